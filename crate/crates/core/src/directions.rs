//! Direction sets, the baseline methods (random, GANSpace, SeFa) and the
//! directions archive.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::container::{config_hash, Container};
use crate::error::{Error, Result};
use crate::generator::{tap_features, SisGenerator, TapSpec};
use crate::nn::ParamStore;
use crate::rng::{derive_seed, rng_for, standard_normal_vec};
use crate::scene::{build_latent, class_mask, EditVector};
use crate::synth::LabelMapSource;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    CtrlSis,
    Random,
    Ganspace,
    Sefa,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::CtrlSis, Method::Random, Method::Ganspace, Method::Sefa];

    pub fn id(self) -> &'static str {
        match self {
            Method::CtrlSis => "ctrl_sis",
            Method::Random => "random",
            Method::Ganspace => "ganspace",
            Method::Sefa => "sefa",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.id() == s)
            .ok_or_else(|| Error::Config(format!("unknown method id {s:?}")))
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.id())
    }
}

/// `K` unit channel directions for one class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DirectionSet {
    pub class_id: usize,
    pub method: Method,
    pub directions: Vec<EditVector>,
    pub taps: TapSpec,
    pub config_hash: String,
    pub seed: u64,
    /// Explained variance (GANSpace) or eigenvalue (SeFa) per direction.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scores: Option<Vec<f64>>,
}

impl DirectionSet {
    pub fn k(&self) -> usize {
        self.directions.len()
    }

    pub fn channels(&self) -> usize {
        self.directions.first().map_or(0, EditVector::channels)
    }

    /// `[K, D]` row-major.
    pub fn matrix(&self) -> Tensor {
        let data = self.directions.iter().flat_map(|v| v.values().iter().copied()).collect();
        Tensor::new(vec![self.k(), self.channels()], data).expect("direction matrix")
    }

    pub fn validate(&self) -> Result<()> {
        if self.directions.is_empty() {
            return Err(Error::Config("direction set is empty".into()));
        }
        if self.method == Method::CtrlSis && self.k() < 2 {
            return Err(Error::Config("ctrl_sis needs at least two directions".into()));
        }
        let d = self.channels();
        for v in &self.directions {
            if v.channels() != d {
                return Err(Error::Shape("directions disagree on channel count".into()));
            }
            if !v.is_unit() || (v.norm() - 1.0).abs() > 1e-5 {
                return Err(Error::Config(format!("direction norm {} is not unit", v.norm())));
            }
        }
        Ok(())
    }
}

pub(crate) fn unit_rows(rows: impl IntoIterator<Item = Vec<f64>>) -> Result<Vec<EditVector>> {
    rows.into_iter().map(EditVector::unit).collect()
}

/// `K` independent standard-normal vectors, unit-normalized.
pub fn random_directions(k: usize, d: usize, seed: u64) -> Result<Vec<EditVector>> {
    if k == 0 || d == 0 {
        return Err(Error::Dimension(format!("random directions need K, D > 0 (got {k}, {d})")));
    }
    let mut rng = rng_for(seed, &[0x7a4d]);
    unit_rows((0..k).map(|_| loop {
        let v = standard_normal_vec(&mut rng, d);
        if v.iter().any(|&x| x != 0.0) {
            break v;
        }
    }))
}

pub fn random_direction_set(class_id: usize, k: usize, d: usize, seed: u64) -> Result<DirectionSet> {
    Ok(DirectionSet {
        class_id,
        method: Method::Random,
        directions: random_directions(k, d, seed)?,
        taps: TapSpec::new(vec![]),
        config_hash: config_hash(&serde_json::json!({"method": "random", "k": k, "d": d}))?,
        seed,
        scores: None,
    })
}

/// Top-`K` eigenvectors of `WᵀW` in descending eigenvalue order, with the
/// eigenvalues.
pub fn sefa_directions(w: &DMatrix<f64>, k: usize) -> Result<(Vec<EditVector>, Vec<f64>)> {
    let d = w.ncols();
    if k == 0 || k > d {
        return Err(Error::Dimension(format!("SeFa asked for {k} directions of a {d}-channel latent")));
    }
    let gram = w.transpose() * w;
    let eig = SymmetricEigen::new(gram);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let dirs = unit_rows(order.iter().take(k).map(|&i| eig.eigenvectors.column(i).iter().copied().collect()))?;
    Ok((dirs, order.iter().take(k).map(|&i| eig.eigenvalues[i]).collect()))
}

pub fn sefa_direction_set(gen: &dyn SisGenerator, class_id: usize, taps: &TapSpec, k: usize) -> Result<DirectionSet> {
    let w = gen.latent_weight(taps)?;
    let (directions, scores) = sefa_directions(&w, k)?;
    Ok(DirectionSet {
        class_id,
        method: Method::Sefa,
        directions,
        taps: taps.clone(),
        config_hash: config_hash(&serde_json::json!({"method": "sefa", "k": k, "taps": taps}))?,
        seed: 0,
        scores: Some(scores),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GanspaceConfig {
    pub samples: usize,
    /// Class-region pixels read per sample.
    pub pixels_per_sample: usize,
    pub k: usize,
}

impl Default for GanspaceConfig {
    fn default() -> Self {
        Self { samples: 512, pixels_per_sample: 4, k: 5 }
    }
}

/// Least-squares regression from latent vectors to per-pixel tapped
/// features, PCA of the features, and pull-back of the top components
/// through the pseudo-inverse of the regression.
///
/// `rows` are `(latent, feature)` pairs.
pub fn ganspace_from_samples(rows: &[(Vec<f64>, Vec<f64>)], k: usize) -> Result<(Vec<EditVector>, Vec<f64>)> {
    let n = rows.len();
    let d = rows.first().map_or(0, |r| r.0.len());
    let f = rows.first().map_or(0, |r| r.1.len());
    if n < d || d == 0 || f == 0 {
        return Err(Error::NumericalRank(format!("{n} samples for a {d}-channel latent")));
    }
    if k == 0 || k > d {
        return Err(Error::Dimension(format!("GANSpace asked for {k} directions of a {d}-channel latent")));
    }
    let mut z = DMatrix::from_fn(n, d, |i, j| rows[i].0[j]);
    let mut feats = DMatrix::from_fn(n, f, |i, j| rows[i].1[j]);
    for mut col in z.column_iter_mut() {
        let m = col.mean();
        col.add_scalar_mut(-m);
    }
    for mut col in feats.column_iter_mut() {
        let m = col.mean();
        col.add_scalar_mut(-m);
    }
    let svd = z.clone().svd(false, false);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if smax <= 0.0 || smin <= smax * 1e-10 {
        return Err(Error::NumericalRank(format!("latent design matrix is rank deficient (σ {smin:e} / {smax:e})")));
    }
    // B: [D, F] with feats ≈ z B
    let b = z
        .svd(true, true)
        .solve(&feats, 1e-12)
        .map_err(|e| Error::NumericalRank(e.to_string()))?;
    let cov = feats.transpose() * &feats / (n as f64 - 1.0).max(1.0);
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..f).collect();
    order.sort_by(|&a, &c| eig.eigenvalues[c].total_cmp(&eig.eigenvalues[a]));
    let bt_pinv = b
        .transpose()
        .pseudo_inverse(1e-10 * b.norm().max(f64::MIN_POSITIVE))
        .map_err(|e| Error::NumericalRank(e.to_string()))?;
    let mut dirs = Vec::with_capacity(k);
    let mut scores = Vec::with_capacity(k);
    for &i in order.iter().take(k) {
        let p: DVector<f64> = eig.eigenvectors.column(i).into();
        let v = &bt_pinv * p;
        if v.norm() <= 1e-12 {
            return Err(Error::NumericalRank(format!("principal component {i} has no latent pre-image")));
        }
        dirs.push(EditVector::unit(v.iter().copied().collect())?);
        scores.push(eig.eigenvalues[i]);
    }
    Ok((dirs, scores))
}

/// Collects `(latent, feature)` rows from class-`c` pixels and runs
/// [`ganspace_from_samples`].
pub fn ganspace_directions(
    gen: &dyn SisGenerator,
    class_id: usize,
    source: &dyn LabelMapSource,
    taps: &TapSpec,
    cfg: &GanspaceConfig,
    seed: u64,
) -> Result<DirectionSet> {
    if taps.taps.is_empty() {
        return Err(Error::Config("GANSpace needs at least one feature tap".into()));
    }
    let d = gen.latent_channels();
    let mut rng = rng_for(seed, &[0x6a5]);
    let mut rows = Vec::with_capacity(cfg.samples * cfg.pixels_per_sample);
    let mut index = 0u64;
    let mut misses = 0usize;
    while rows.len() < cfg.samples * cfg.pixels_per_sample {
        let y = source.label_map(index)?;
        index += 1;
        let mask = class_mask(&y, class_id)?;
        if mask.is_empty() {
            misses += 1;
            if misses > 1000 && rows.is_empty() {
                return Err(Error::ClassCoverage { class: class_id, attempts: misses });
            }
            continue;
        }
        let z = build_latent(derive_seed(seed, &[index]), d, y.height(), y.width())?;
        let base = z.base_vector().expect("replicated").to_vec();
        let feats = tap_features(gen, &z, &y, taps)?;
        let positives: Vec<usize> = (0..mask.values().len()).filter(|&p| mask.values()[p] == 1).collect();
        for _ in 0..cfg.pixels_per_sample {
            use rand::Rng;
            let p = positives[rng.random_range(0..positives.len())];
            let (r, c) = (p / y.width(), p % y.width());
            let mut f = Vec::new();
            for fm in &feats {
                let (rr, cc) = (r * fm.height / y.height(), c * fm.width / y.width());
                let hw = fm.height * fm.width;
                f.extend((0..fm.channels).map(|ch| fm.values[ch * hw + rr * fm.width + cc]));
            }
            rows.push((base.clone(), f));
        }
    }
    let (directions, scores) = ganspace_from_samples(&rows, cfg.k)?;
    Ok(DirectionSet {
        class_id,
        method: Method::Ganspace,
        directions,
        taps: taps.clone(),
        config_hash: config_hash(&serde_json::json!({"method": "ganspace", "cfg": cfg, "taps": taps}))?,
        seed,
        scores: Some(scores),
    })
}

/// All direction sets discovered against one checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct DirectionsArchive {
    pub checkpoint_hash: String,
    pub experiment_hash: String,
    pub records: Vec<DirectionSet>,
}

#[derive(Serialize, Deserialize)]
struct ArchiveRecord {
    class_id: usize,
    method: Method,
    taps: TapSpec,
    config_hash: String,
    seed: u64,
    scores: Option<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct ArchiveMeta {
    checkpoint_hash: String,
    experiment_hash: String,
    records: Vec<ArchiveRecord>,
}

impl DirectionsArchive {
    pub fn get(&self, class_id: usize, method: Method) -> Option<&DirectionSet> {
        self.records.iter().find(|r| r.class_id == class_id && r.method == method)
    }

    pub fn methods(&self) -> Vec<Method> {
        let mut m: Vec<Method> = self.records.iter().map(|r| r.method).collect();
        m.sort();
        m.dedup();
        m
    }

    pub fn classes(&self) -> Vec<usize> {
        let mut c: Vec<usize> = self.records.iter().map(|r| r.class_id).collect();
        c.sort();
        c.dedup();
        c
    }

    /// Adds or replaces the record for `(class, method)`.
    pub fn upsert(&mut self, set: DirectionSet) {
        match self.records.iter_mut().find(|r| r.class_id == set.class_id && r.method == set.method) {
            Some(slot) => *slot = set,
            None => self.records.push(set),
        }
        self.records.sort_by_key(|r| (r.class_id, r.method));
    }

    pub fn to_container(&self) -> Result<Container> {
        let mut tensors = ParamStore::new();
        let mut records = Vec::new();
        for (i, r) in self.records.iter().enumerate() {
            r.validate()?;
            tensors.insert(format!("r{i:04}"), r.matrix());
            records.push(ArchiveRecord {
                class_id: r.class_id,
                method: r.method,
                taps: r.taps.clone(),
                config_hash: r.config_hash.clone(),
                seed: r.seed,
                scores: r.scores.clone(),
            });
        }
        let meta = ArchiveMeta {
            checkpoint_hash: self.checkpoint_hash.clone(),
            experiment_hash: self.experiment_hash.clone(),
            records,
        };
        Ok(Container::new("directions", serde_json::to_value(meta)?, tensors))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.to_container()?.to_bytes()
    }

    /// Decodes an archive and checks it was produced for `checkpoint_hash`.
    pub fn from_bytes(bytes: &[u8], checkpoint_hash: &str) -> Result<Self> {
        let archive = Self::from_bytes_unchecked(bytes)?;
        if archive.checkpoint_hash != checkpoint_hash {
            return Err(Error::Integrity(format!(
                "archive was built for checkpoint {} but {} is loaded",
                archive.checkpoint_hash, checkpoint_hash
            )));
        }
        Ok(archive)
    }

    pub fn from_bytes_unchecked(bytes: &[u8]) -> Result<Self> {
        let c = Container::from_bytes(bytes)?.expect_kind("directions")?;
        let meta: ArchiveMeta = serde_json::from_value(c.meta)?;
        let records = meta
            .records
            .into_iter()
            .enumerate()
            .map(|(i, r)| {
                let t = c
                    .tensors
                    .get(&format!("r{i:04}"))
                    .ok_or_else(|| Error::Format(format!("archive record {i} has no matrix")))?;
                let [k, d] = t.shape() else {
                    return Err(Error::Format(format!("record {i} matrix is not 2-D")));
                };
                let directions = t.data().chunks(*d).take(*k).map(|row| EditVector::from_unit(row.to_vec())).collect::<Result<_>>()?;
                let set = DirectionSet {
                    class_id: r.class_id,
                    method: r.method,
                    directions,
                    taps: r.taps,
                    config_hash: r.config_hash,
                    seed: r.seed,
                    scores: r.scores,
                };
                set.validate()?;
                Ok(set)
            })
            .collect::<Result<_>>()?;
        Ok(Self { checkpoint_hash: meta.checkpoint_hash, experiment_hash: meta.experiment_hash, records })
    }

    pub fn hash(&self) -> Result<String> {
        self.to_container()?.hash()
    }
}
