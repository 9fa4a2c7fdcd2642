use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use semedit_core::directions::{
    ganspace_directions, random_direction_set, sefa_direction_set, DirectionSet, DirectionsArchive, Method,
};
use semedit_core::discovery::{optimize_directions, DiscoveryConfig, LossWeights, StepReport};
use semedit_core::generator::{generate_batch, SisGenerator};
use semedit_core::image::Image;
use semedit_core::metrics::{
    evaluate_directions, fid_lite, global_edit_latent, miou_proxy, Distance, EvalProtocol, FeatureExtractor, MethodRow,
    Metric, MetricReport, Score, SeededFeatureBackbone,
};
use semedit_core::scene::{LabelMap, LatentCode3D};
use semedit_core::synth::{LabelMapSource, SceneSampler};
use semedit_core::training::{train_generator, train_segmenter, Checkpoint, TrainLogEntry};

use crate::config::ExperimentConfig;
use crate::error::{HarnessError, Result};

const RENDER_CHUNK: usize = 16;

/// One line of the JSON-lines training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "stage", rename_all = "snake_case")]
pub enum TrainLogLine {
    Generator(TrainLogEntry),
    Segmenter { step: usize, loss: f64 },
}

/// Trains the generator and the proxy segmenter. A zero-step config yields
/// the initialization.
pub fn train(cfg: &ExperimentConfig, mut log: impl FnMut(&TrainLogLine)) -> Result<Checkpoint> {
    cfg.validate()?;
    let gan = train_generator(&cfg.scene, &cfg.generator, &cfg.train_config(), |e| {
        log(&TrainLogLine::Generator(e.clone()))
    })?;
    let segmenter =
        train_segmenter(&cfg.scene, &cfg.segmenter_config(), |step, loss| log(&TrainLogLine::Segmenter { step, loss }))?;
    Ok(Checkpoint {
        generator: gan.generator,
        discriminator: Some(gan.discriminator),
        segmenter: Some(segmenter),
        seed: cfg.seed,
        experiment_hash: cfg.training_lineage()?,
    })
}

/// Refuses a checkpoint trained under a different configuration.
pub fn check_checkpoint(cfg: &ExperimentConfig, ck: &Checkpoint) -> Result<()> {
    let want = cfg.training_lineage()?;
    if ck.experiment_hash != want {
        return Err(semedit_core::Error::Integrity(format!(
            "checkpoint lineage {} does not match config lineage {want}",
            ck.experiment_hash
        ))
        .into());
    }
    Ok(())
}

/// Refuses an archive built on another checkpoint or discovery setup.
pub fn check_archive(cfg: &ExperimentConfig, ck: &Checkpoint, archive: &DirectionsArchive) -> Result<()> {
    check_checkpoint(cfg, ck)?;
    let ck_hash = ck.hash()?;
    if archive.checkpoint_hash != ck_hash {
        return Err(semedit_core::Error::Integrity(format!(
            "archive was built for checkpoint {} but {ck_hash} is loaded",
            archive.checkpoint_hash
        ))
        .into());
    }
    let want = cfg.discovery_lineage()?;
    if archive.experiment_hash != want {
        return Err(semedit_core::Error::Integrity(format!(
            "archive lineage {} does not match config lineage {want}",
            archive.experiment_hash
        ))
        .into());
    }
    Ok(())
}

fn check_classes(cfg: &ExperimentConfig, classes: &[usize]) -> Result<()> {
    if classes.is_empty() {
        return Err(HarnessError::Usage("empty class list".into()));
    }
    if let Some(&c) = classes.iter().find(|&&c| c >= cfg.scene.class_count) {
        return Err(HarnessError::Usage(format!("class {c} out of range")));
    }
    Ok(())
}

fn discovery_source(cfg: &ExperimentConfig) -> SceneSampler {
    SceneSampler { spec: cfg.scene, seed: cfg.discovery_map_seed() }
}

/// Ctrl-SIS config with `n` pinned so discovery and evaluation agree.
fn ctrl_config(cfg: &ExperimentConfig, weights: LossWeights) -> DiscoveryConfig {
    DiscoveryConfig { alpha_bound: Some(cfg.alpha_bound()), weights, ..cfg.discovery.ctrl_sis.clone() }
}

/// Ctrl-SIS directions for `classes`, learned jointly.
pub fn discover_ctrl_sis(
    cfg: &ExperimentConfig,
    gen: &dyn SisGenerator,
    classes: &[usize],
    weights: LossWeights,
    run: u64,
    observe: impl FnMut(&StepReport),
) -> Result<Vec<DirectionSet>> {
    check_classes(cfg, classes)?;
    let seed = cfg.method_seed(Method::CtrlSis, 0, run);
    Ok(optimize_directions(gen, classes, &discovery_source(cfg), &ctrl_config(cfg, weights), seed, observe)?)
}

/// One direction set per `(class, method)`.
pub fn discover(
    cfg: &ExperimentConfig,
    ck: &Checkpoint,
    methods: &[Method],
    classes: &[usize],
    mut observe: impl FnMut(&StepReport),
) -> Result<DirectionsArchive> {
    check_classes(cfg, classes)?;
    check_checkpoint(cfg, ck)?;
    let gen = &ck.generator;
    let k = cfg.discovery.ctrl_sis.k;
    let d = gen.latent_channels();
    let taps = &cfg.discovery.ctrl_sis.taps;
    let mut archive =
        DirectionsArchive { checkpoint_hash: ck.hash()?, experiment_hash: cfg.discovery_lineage()?, records: Vec::new() };
    let mut methods = methods.to_vec();
    methods.sort();
    methods.dedup();
    for method in methods {
        log::info!("discovering {} directions for classes {classes:?}", method.id());
        let sets = match method {
            Method::CtrlSis => discover_ctrl_sis(cfg, gen, classes, LossWeights::FULL, 0, &mut observe)?,
            Method::Random => classes
                .iter()
                .map(|&c| random_direction_set(c, k, d, cfg.method_seed(method, c, 0)))
                .collect::<semedit_core::Result<_>>()?,
            Method::Sefa => classes.iter().map(|&c| sefa_direction_set(gen, c, taps, k)).collect::<semedit_core::Result<_>>()?,
            Method::Ganspace => {
                let gs = semedit_core::directions::GanspaceConfig { k, ..cfg.discovery.ganspace.clone() };
                let source = discovery_source(cfg);
                classes
                    .iter()
                    .map(|&c| ganspace_directions(gen, c, &source, taps, &gs, cfg.method_seed(method, c, 0)))
                    .collect::<semedit_core::Result<_>>()?
            }
        };
        for s in sets {
            archive.upsert(s);
        }
    }
    Ok(archive)
}

pub fn eval_maps(cfg: &ExperimentConfig) -> Result<Vec<LabelMap>> {
    let sampler = SceneSampler { spec: cfg.scene, seed: cfg.eval_map_seed() };
    Ok((0..cfg.eval.label_maps as u64).map(|i| sampler.label_map(i)).collect::<semedit_core::Result<_>>()?)
}

pub fn protocol(cfg: &ExperimentConfig, classes: Option<Vec<usize>>) -> EvalProtocol {
    EvalProtocol {
        latent_codes: cfg.eval.latent_codes,
        global_edits: cfg.eval.global_edits,
        alpha_bound: cfg.alpha_bound(),
        classes,
        seed: cfg.protocol_seed(),
    }
}

/// Real renders and their layouts for the quality monitors.
fn quality_pairs(cfg: &ExperimentConfig) -> Result<Vec<(Image, LabelMap)>> {
    let sampler = SceneSampler { spec: cfg.scene, seed: cfg.quality_map_seed() };
    Ok((0..cfg.eval.quality_samples as u64).map(|i| sampler.pair(i)).collect::<semedit_core::Result<_>>()?)
}

fn render_all(gen: &dyn SisGenerator, latents: &[LatentCode3D], maps: &[LabelMap]) -> Result<Vec<Image>> {
    let mut out = Vec::with_capacity(latents.len());
    for (zs, ys) in latents.chunks(RENDER_CHUNK).zip(maps.chunks(RENDER_CHUNK)) {
        let zs: Vec<Vec<&LatentCode3D>> = zs.iter().map(|z| vec![z]).collect();
        let ys: Vec<&LabelMap> = ys.iter().collect();
        out.extend(generate_batch(gen, &zs, &ys)?);
    }
    Ok(out)
}

/// Quality-monitor renders: plain generation when `sets` is `None`, else
/// the first global edit of the protocol on every layout.
fn quality_renders(
    gen: &dyn SisGenerator,
    maps: &[LabelMap],
    protocol: &EvalProtocol,
    sets: Option<&[DirectionSet]>,
) -> Result<Vec<Image>> {
    let d = gen.latent_channels();
    let latents: Vec<LatentCode3D> = maps
        .iter()
        .enumerate()
        .map(|(i, y)| {
            let z = LatentCode3D::replicate(protocol.latent_vector(i, 0, d), y.height(), y.width())?;
            match sets {
                None => Ok(z),
                Some(s) => global_edit_latent(&z, y, s, protocol, i, 0),
            }
        })
        .collect::<semedit_core::Result<_>>()?;
    render_all(gen, &latents, maps)
}

struct QualityContext {
    real: Vec<Image>,
    maps: Vec<LabelMap>,
    backbone: SeededFeatureBackbone,
}

fn quality_scores(
    ck: &Checkpoint,
    q: &QualityContext,
    protocol: &EvalProtocol,
    sets: Option<&[DirectionSet]>,
    metrics: &[Metric],
) -> Result<BTreeMap<Metric, Score>> {
    let mut out = BTreeMap::new();
    if !metrics.contains(&Metric::FidLite) && !metrics.contains(&Metric::MiouProxy) {
        return Ok(out);
    }
    let images = quality_renders(&ck.generator, &q.maps, protocol, sets)?;
    if metrics.contains(&Metric::FidLite) {
        out.insert(Metric::FidLite, Score::Single(fid_lite(&q.real, &images, &q.backbone)?));
    }
    if metrics.contains(&Metric::MiouProxy) {
        match &ck.segmenter {
            Some(seg) => {
                out.insert(Metric::MiouProxy, Score::Single(miou_proxy(seg, &images, &q.maps)?));
            }
            None => log::warn!("checkpoint has no segmenter; mIoU-proxy skipped"),
        }
    }
    Ok(out)
}

/// Scores every method of the archive. A `baseline` row carries the quality
/// monitors of unedited generation when any are selected.
pub fn evaluate(
    cfg: &ExperimentConfig,
    ck: &Checkpoint,
    archive: &DirectionsArchive,
    metrics: &[Metric],
    distance: &Distance,
) -> Result<MetricReport> {
    check_archive(cfg, ck, archive)?;
    if metrics.is_empty() {
        return Err(HarnessError::Usage("no metrics selected".into()));
    }
    let mut metrics = metrics.to_vec();
    metrics.sort();
    metrics.dedup();
    let maps = eval_maps(cfg)?;
    let protocol = protocol(cfg, None);
    let wants_quality = metrics.iter().any(|m| !m.is_pairwise());
    let quality = if wants_quality {
        let pairs = quality_pairs(cfg)?;
        let (real, maps) = pairs.into_iter().unzip();
        Some(QualityContext { real, maps, backbone: SeededFeatureBackbone::default() })
    } else {
        None
    };
    let mut rows = Vec::new();
    if let Some(q) = &quality {
        rows.push(MethodRow { method: "baseline".into(), scores: quality_scores(ck, q, &protocol, None, &metrics)? });
    }
    let pairwise: Vec<Metric> = metrics.iter().copied().filter(|m| m.is_pairwise()).collect();
    for method in archive.methods() {
        log::info!("evaluating {}", method.id());
        let sets: Vec<DirectionSet> = archive.records.iter().filter(|r| r.method == method).cloned().collect();
        let mut scores = if pairwise.is_empty() {
            BTreeMap::new()
        } else {
            evaluate_directions(&ck.generator, &sets, &maps, &protocol, distance, &pairwise)?
        };
        if let Some(q) = &quality {
            scores.extend(quality_scores(ck, q, &protocol, Some(&sets), &metrics)?);
        }
        rows.push(MethodRow { method: method.id().into(), scores });
    }
    let mut provenance = BTreeMap::new();
    provenance.insert("config".into(), cfg.hash()?);
    provenance.insert("checkpoint".into(), archive.checkpoint_hash.clone());
    provenance.insert("archive".into(), archive.hash()?);
    provenance.insert("lineage".into(), archive.experiment_hash.clone());
    if wants_quality {
        provenance.insert("quality_backbone".into(), SeededFeatureBackbone::default().id());
        provenance.insert("quality_samples".into(), cfg.eval.quality_samples.to_string());
    }
    Ok(MetricReport { distance: distance.id(), protocol, label_maps: maps.len(), metrics, rows, provenance })
}

/// The four objectives of the loss ablation, full objective first.
pub const ABLATION_VARIANTS: [(&str, LossWeights); 4] = [
    ("full", LossWeights::FULL),
    ("no_div", LossWeights::NO_DIVERSITY),
    ("no_const", LossWeights::NO_CONSISTENCY),
    ("no_dis", LossWeights::NO_DISENTANGLEMENT),
];

/// Scores reported by the ablation, in column order.
pub const ABLATION_METRICS: [Metric; 3] = [Metric::Mcd, Metric::Mcc, Metric::Mod];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub weights: LossWeights,
    /// Pair-mean scores per seed, in `seeds` order.
    pub per_seed: Vec<BTreeMap<Metric, f64>>,
    pub median: BTreeMap<Metric, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub distance: String,
    pub classes: Vec<usize>,
    pub seeds: Vec<u64>,
    pub protocol: EvalProtocol,
    pub rows: Vec<AblationRow>,
    pub provenance: BTreeMap<String, String>,
}

/// Direction of each change relative to the full objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SignPattern {
    /// Dropping the diversity term lowers mCD.
    pub no_div_lowers_mcd: bool,
    /// Dropping the disentanglement term raises mOD.
    pub no_dis_raises_mod: bool,
    /// Dropping the consistency term does not lower mCC by more than the
    /// seed spread of the full objective.
    pub no_const_keeps_mcc: bool,
}

impl SignPattern {
    pub fn all(&self) -> bool {
        self.no_div_lowers_mcd && self.no_dis_raises_mod && self.no_const_keeps_mcc
    }
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

impl AblationReport {
    pub fn row(&self, variant: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }

    /// Largest distance of a full-objective seed from its median.
    pub fn noise(&self, metric: Metric) -> f64 {
        let Some(full) = self.row("full") else { return 0.0 };
        let m = full.median[&metric];
        full.per_seed.iter().map(|s| (s[&metric] - m).abs()).fold(0.0, f64::max)
    }

    pub fn sign_pattern(&self) -> Option<SignPattern> {
        let get = |v: &str, m: Metric| self.row(v).map(|r| r.median[&m]);
        let full_mcd = get("full", Metric::Mcd)?;
        let full_mod = get("full", Metric::Mod)?;
        let full_mcc = get("full", Metric::Mcc)?;
        Some(SignPattern {
            no_div_lowers_mcd: get("no_div", Metric::Mcd)? < full_mcd,
            no_dis_raises_mod: get("no_dis", Metric::Mod)? > full_mod,
            no_const_keeps_mcc: get("no_const", Metric::Mcc)? >= full_mcc - self.noise(Metric::Mcc),
        })
    }

    pub fn to_text(&self) -> String {
        let suffix = if self.distance.starts_with("msssim") { " (MS-SSIM)" } else { "" };
        let mut lines = vec![vec!["variant".to_string(), "weights (div,dis,const)".to_string()]];
        lines[0].extend(ABLATION_METRICS.iter().map(|m| format!("{}{suffix}", m.id())));
        for r in &self.rows {
            let mut cells = vec![
                r.variant.clone(),
                format!("({}, {}, {})", r.weights.diversity, r.weights.disentanglement, r.weights.consistency),
            ];
            cells.extend(ABLATION_METRICS.iter().map(|m| format!("{:.4}", r.median[m])));
            lines.push(cells);
        }
        let widths: Vec<usize> = (0..lines[0].len()).map(|i| lines.iter().map(|l| l[i].len()).max().unwrap_or(0)).collect();
        let mut out = format!(
            "# loss ablation, median over seeds {:?}, classes {:?}\n# distance {}\n",
            self.seeds, self.classes, self.distance
        );
        for l in &lines {
            let cells: Vec<String> = l.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect();
            out.push_str(cells.join("  ").trim_end());
            out.push('\n');
        }
        if let Some(s) = self.sign_pattern() {
            out.push_str(&format!(
                "# no_div lowers mCD: {}; no_dis raises mOD: {}; no_const keeps mCC: {}\n",
                s.no_div_lowers_mcd, s.no_dis_raises_mod, s.no_const_keeps_mcc
            ));
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report is plain data")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| HarnessError::Core(e.into()))
    }
}

/// Runs Ctrl-SIS once per loss variant and seed on `classes` and scores
/// each run on mCD, mCC and mOD.
pub fn ablate(
    cfg: &ExperimentConfig,
    ck: &Checkpoint,
    classes: &[usize],
    distance: &Distance,
    mut progress: impl FnMut(&str, u64),
) -> Result<AblationReport> {
    check_classes(cfg, classes)?;
    check_checkpoint(cfg, ck)?;
    let seeds = cfg.eval.ablation_seeds.clone();
    if seeds.is_empty() {
        return Err(HarnessError::Usage("no ablation seeds".into()));
    }
    let maps = eval_maps(cfg)?;
    let protocol = protocol(cfg, Some(classes.to_vec()));
    let mut rows = Vec::new();
    for (name, weights) in ABLATION_VARIANTS {
        let mut per_seed = Vec::new();
        for &run in &seeds {
            progress(name, run);
            let sets = discover_ctrl_sis(cfg, &ck.generator, classes, weights, run, |_| {})?;
            let scores = evaluate_directions(&ck.generator, &sets, &maps, &protocol, distance, &ABLATION_METRICS)?;
            per_seed.push(
                scores
                    .into_iter()
                    .map(|(m, s)| (m, s.value()))
                    .collect::<BTreeMap<Metric, f64>>(),
            );
        }
        let median = ABLATION_METRICS
            .iter()
            .map(|m| (*m, median(&per_seed.iter().map(|s| s[m]).collect::<Vec<_>>())))
            .collect();
        rows.push(AblationRow { variant: name.into(), weights, per_seed, median });
    }
    let mut provenance = BTreeMap::new();
    provenance.insert("config".into(), cfg.hash()?);
    provenance.insert("checkpoint".into(), ck.hash()?);
    provenance.insert("lineage".into(), cfg.discovery_lineage()?);
    Ok(AblationReport { distance: distance.id(), classes: classes.to_vec(), seeds, protocol, rows, provenance })
}

/// File layout of one experiment directory.
#[derive(Clone, Debug)]
pub struct RunPaths {
    pub dir: PathBuf,
}

impl RunPaths {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn checkpoint(&self) -> PathBuf {
        self.dir.join("checkpoint.bin")
    }

    pub fn train_log(&self) -> PathBuf {
        self.dir.join("train_log.jsonl")
    }

    pub fn archive(&self) -> PathBuf {
        self.dir.join("directions.bin")
    }

    pub fn report(&self, ext: &str) -> PathBuf {
        self.dir.join(format!("report.{ext}"))
    }

    pub fn ablation(&self, ext: &str) -> PathBuf {
        self.dir.join(format!("ablation.{ext}"))
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io { path: path.display().to_string(), source }
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    std::fs::write(path, bytes).map_err(io_err(path))
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(io_err(path))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Ok(Checkpoint::from_bytes(&read_file(path)?)?)
}

pub fn load_archive(path: &Path, ck: &Checkpoint) -> Result<DirectionsArchive> {
    Ok(DirectionsArchive::from_bytes(&read_file(path)?, &ck.hash()?)?)
}
