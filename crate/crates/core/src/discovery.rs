//! The class-specific direction objective (diversity, disentanglement,
//! consistency) and the optimization loop that learns `K` directions per
//! class against a frozen generator.
//!
//! Masked feature distance: at each tap take the per-pixel L2 norm over
//! channels of the feature difference, average it over mask-positive pixels
//! (mask resampled to the tap resolution), then average over taps whose
//! resampled mask is non-empty. Pairs of directions are unordered and
//! averaged.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::container::config_hash;
use crate::directions::{random_directions, DirectionSet, Method};
use crate::error::{Error, Result};
use crate::generator::{FeatureMap, SisGenerator, TapSpec};
use crate::nn::{Adam, ParamStore};
use crate::rng::{derive_seed, rng_for, uniform};
use crate::scene::{
    average_channel_norm, build_latent, class_mask, downsample_mask, ClassMask, GaussianLatentSampler, LabelMap,
    LatentCode3D,
};
use crate::synth::LabelMapSource;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub diversity: f64,
    pub disentanglement: f64,
    pub consistency: f64,
}

impl LossWeights {
    pub const FULL: LossWeights = LossWeights { diversity: 1.0, disentanglement: 1.0, consistency: 1.0 };
    pub const NO_DIVERSITY: LossWeights = LossWeights { diversity: 0.0, ..Self::FULL };
    pub const NO_DISENTANGLEMENT: LossWeights = LossWeights { disentanglement: 0.0, ..Self::FULL };
    pub const NO_CONSISTENCY: LossWeights = LossWeights { consistency: 0.0, ..Self::FULL };
}

impl Default for LossWeights {
    fn default() -> Self {
        Self::FULL
    }
}

/// What the consistency term compares across latent codes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConsistencyConvention {
    /// `h(z₁, v_k)` against `h(z₂, v_k)`.
    #[default]
    Literal,
    /// `h(z₁, v_k) − h(z₁, 0)` against `h(z₂, v_k) − h(z₂, 0)`.
    Difference,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscoveryConfig {
    pub k: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Label maps per epoch, drawn from the source at indices `0..dataset_maps`.
    pub dataset_maps: usize,
    /// `n` of the α interval `[-n, n]`; estimated from the latent prior when absent.
    pub alpha_bound: Option<f64>,
    pub norm_samples: usize,
    pub min_class_fraction: f64,
    pub weights: LossWeights,
    pub consistency: ConsistencyConvention,
    pub taps: TapSpec,
}

impl Default for DiscoveryConfig {
    fn default() -> Self {
        Self {
            k: 5,
            learning_rate: 1e-3,
            weight_decay: 0.01,
            batch_size: 16,
            epochs: 20,
            dataset_maps: 1600,
            alpha_bound: None,
            norm_samples: 10_000,
            min_class_fraction: 0.01,
            weights: LossWeights::FULL,
            consistency: ConsistencyConvention::Literal,
            taps: TapSpec::norm_layers(4),
        }
    }
}

impl DiscoveryConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(Error::Config("K must be at least 2".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if self.taps.taps.is_empty() {
            return Err(Error::Config("tap spec must not be empty".into()));
        }
        if let Some(n) = self.alpha_bound {
            if n.is_nan() || n <= 0.0 {
                return Err(Error::Config(format!("alpha bound {n} must be positive")));
            }
        }
        Ok(())
    }

    /// `n`: either the configured bound or `E‖z‖` of the latent prior.
    pub fn resolve_alpha_bound(&self, channels: usize, seed: u64) -> f64 {
        self.alpha_bound.unwrap_or_else(|| {
            average_channel_norm(&GaussianLatentSampler { channels, seed: derive_seed(seed, &[0xa1]) }, self.norm_samples)
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_div: f64,
    pub l_dis: f64,
    pub l_const: f64,
    pub total: f64,
}

/// Masked distance between two feature banks (one map per tap); `None`
/// when the mask is empty at every tap.
pub fn masked_feature_distance(a: &[FeatureMap], b: &[FeatureMap], mask: &ClassMask) -> Result<Option<f64>> {
    if a.len() != b.len() {
        return Err(Error::Shape("feature banks have different tap counts".into()));
    }
    let mut acc = 0.0;
    let mut layers = 0usize;
    for (fa, fb) in a.iter().zip(b) {
        if (fa.channels, fa.height, fa.width) != (fb.channels, fb.height, fb.width) {
            return Err(Error::Shape(format!("tap {:?} shapes differ", fa.tap)));
        }
        let m = downsample_mask(mask, fa.height, fa.width)?;
        if m.is_empty() {
            continue;
        }
        let hw = fa.height * fa.width;
        let mut sum = 0.0;
        for p in (0..hw).filter(|&p| m.values()[p] == 1) {
            let sq: f64 = (0..fa.channels).map(|c| (fa.values[c * hw + p] - fb.values[c * hw + p]).powi(2)).sum();
            sum += sq.sqrt();
        }
        acc += sum / m.pixel_count() as f64;
        layers += 1;
    }
    Ok((layers > 0).then(|| acc / layers as f64))
}

fn pair_mean(banks: &[Vec<FeatureMap>], mask: &ClassMask) -> Result<Option<f64>> {
    if banks.len() < 2 {
        return Err(Error::Config("pairwise losses need K >= 2".into()));
    }
    let mut acc = 0.0;
    let mut pairs = 0usize;
    for i in 0..banks.len() {
        for j in i + 1..banks.len() {
            match masked_feature_distance(&banks[i], &banks[j], mask)? {
                Some(d) => acc += d,
                None => return Ok(None),
            }
            pairs += 1;
        }
    }
    Ok(Some(acc / pairs as f64))
}

/// `-mean_{k₁<k₂} d_M(h_{k₁}, h_{k₂})`; `None` is the skip signal.
pub fn loss_diversity(banks: &[Vec<FeatureMap>], mask: &ClassMask) -> Result<Option<f64>> {
    Ok(pair_mean(banks, mask)?.map(|d| -d))
}

/// `mean_{k₁<k₂} d_{1−M}(h_{k₁}, h_{k₂})`.
pub fn loss_disentanglement(banks: &[Vec<FeatureMap>], mask: &ClassMask) -> Result<Option<f64>> {
    pair_mean(banks, &mask.complement())
}

/// `mean_k d_M(h(z₁, v_k), h(z₂, v_k))`.
pub fn loss_consistency(first: &[Vec<FeatureMap>], second: &[Vec<FeatureMap>], mask: &ClassMask) -> Result<Option<f64>> {
    if first.len() != second.len() || first.is_empty() {
        return Err(Error::Shape("consistency needs two banks with the same directions".into()));
    }
    let mut acc = 0.0;
    for (a, b) in first.iter().zip(second) {
        match masked_feature_distance(a, b, mask)? {
            Some(d) => acc += d,
            None => return Ok(None),
        }
    }
    Ok(Some(acc / first.len() as f64))
}

/// Per-tap feature difference `a − b`, for the difference convention.
pub fn feature_difference(a: &[FeatureMap], b: &[FeatureMap]) -> Vec<FeatureMap> {
    a.iter()
        .zip(b)
        .map(|(x, y)| FeatureMap {
            values: x.values.iter().zip(&y.values).map(|(p, q)| p - q).collect(),
            ..x.clone()
        })
        .collect()
}

/// One training example of the objective.
#[derive(Clone, Debug)]
pub struct ObjectiveItem {
    pub label_map: LabelMap,
    /// Index into the direction bank's class list.
    pub slot: usize,
    pub z1: LatentCode3D,
    pub z2: LatentCode3D,
    pub alpha: f64,
}

/// The directions being optimized: `classes.len() × K` rows of `D`.
#[derive(Clone, Debug, PartialEq)]
pub struct DirectionBank {
    pub classes: Vec<usize>,
    pub k: usize,
    /// `[classes·K, D]`.
    pub matrix: Tensor,
}

impl DirectionBank {
    pub fn rows(&self) -> usize {
        self.matrix.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.matrix.shape()[1]
    }

    pub fn normalize(&mut self) {
        let d = self.channels();
        for row in self.matrix.data_mut().chunks_mut(d) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n > 0.0 {
                row.iter_mut().for_each(|v| *v /= n);
            }
        }
    }

    /// Removes from each gradient row its component along the current
    /// (unit) direction, leaving the part tangent to the sphere.
    pub fn tangent(&self, grad: &Tensor) -> Tensor {
        let d = self.channels();
        let mut out = grad.clone();
        for (g, v) in out.data_mut().chunks_mut(d).zip(self.matrix.data().chunks(d)) {
            let radial: f64 = g.iter().zip(v).map(|(a, b)| a * b).sum();
            g.iter_mut().zip(v).for_each(|(a, b)| *a -= radial * b);
        }
        out
    }

    pub fn norms(&self) -> Vec<f64> {
        self.matrix.data().chunks(self.channels()).map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt()).collect()
    }
}

/// Constant per-sample weights realizing the masked mean over pixels, the
/// mean over non-empty taps, and the mean over samples with any signal.
fn distance_weights(masks: &[ClassMask], sizes: &[(usize, usize)]) -> Result<Option<Vec<Tensor>>> {
    let n = masks.len();
    let mut per: Vec<Vec<ClassMask>> = Vec::with_capacity(n);
    for m in masks {
        per.push(sizes.iter().map(|&(h, w)| downsample_mask(m, h, w)).collect::<Result<_>>()?);
    }
    let layers: Vec<usize> = per.iter().map(|ls| ls.iter().filter(|m| !m.is_empty()).count()).collect();
    let valid = layers.iter().filter(|&&l| l > 0).count();
    if valid == 0 {
        return Ok(None);
    }
    let mut out = Vec::with_capacity(sizes.len());
    for (t, &(h, w)) in sizes.iter().enumerate() {
        let hw = h * w;
        let mut data = vec![0.0; n * hw];
        for s in 0..n {
            let m = &per[s][t];
            if m.is_empty() {
                continue;
            }
            let scale = 1.0 / (m.pixel_count() as f64 * layers[s] as f64 * valid as f64);
            for (p, &v) in m.values().iter().enumerate() {
                if v == 1 {
                    data[s * hw + p] = scale;
                }
            }
        }
        out.push(Tensor::new(vec![n, 1, h, w], data)?);
    }
    Ok(Some(out))
}

fn graph_distance(g: &mut Graph, a: &[Var], b: &[Var], weights: &[Tensor]) -> Result<Var> {
    let mut parts = Vec::with_capacity(a.len());
    for ((&x, &y), w) in a.iter().zip(b).zip(weights) {
        let d = g.sub(x, y)?;
        let n = g.channel_norm(d);
        parts.push(g.weighted_sum(n, w.clone())?);
    }
    Ok(g.sum_scalars(&parts))
}

/// Scalar vars of one objective evaluation.
pub struct ObjectiveVars {
    pub l_div: Option<Var>,
    pub l_dis: Option<Var>,
    pub l_const: Option<Var>,
    pub total: Var,
}

fn latent_batch(zs: &[&LatentCode3D]) -> Result<Tensor> {
    let parts: Vec<Tensor> = zs
        .iter()
        .map(|z| Tensor::new(vec![1, z.channels(), z.height(), z.width()], z.values().to_vec()))
        .collect::<Result<_>>()?;
    Tensor::cat_batch(&parts)
}

/// Records the weighted objective on `g` with `dirs` (`[rows, D]`) as input.
pub fn record_objective(
    g: &mut Graph,
    gen: &dyn SisGenerator,
    dirs: Var,
    bank: &DirectionBank,
    items: &[ObjectiveItem],
    taps: &TapSpec,
    weights: LossWeights,
    convention: ConsistencyConvention,
) -> Result<ObjectiveVars> {
    if items.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let k = bank.k;
    if k < 2 {
        return Err(Error::Config("K must be at least 2".into()));
    }
    let masks: Vec<ClassMask> = items
        .iter()
        .map(|it| class_mask(&it.label_map, bank.classes[it.slot]))
        .collect::<Result<_>>()?;
    let labels: Vec<&LabelMap> = items.iter().map(|it| &it.label_map).collect();
    let (h, w) = (labels[0].height(), labels[0].width());
    let n = items.len();
    let mut coeff = vec![0.0; n * h * w];
    for (s, (it, m)) in items.iter().zip(&masks).enumerate() {
        for (p, &v) in m.values().iter().enumerate() {
            if v == 1 {
                coeff[s * h * w + p] = it.alpha;
            }
        }
    }
    let coeff = Tensor::new(vec![n, 1, h, w], coeff)?;
    let z1 = g.constant(latent_batch(&items.iter().map(|it| &it.z1).collect::<Vec<_>>())?);
    let z2 = g.constant(latent_batch(&items.iter().map(|it| &it.z2).collect::<Vec<_>>())?);

    let feats = |g: &mut Graph, z: Var, k: Option<usize>| -> Result<Vec<Var>> {
        let zin = match k {
            Some(k) => {
                let index = items.iter().map(|it| Some(it.slot * bank.k + k)).collect();
                g.direction_edit(z, dirs, coeff.clone(), index)?
            }
            None => z,
        };
        Ok(gen.record(g, &[zin], &labels, taps, false)?.taps)
    };
    let h1: Vec<Vec<Var>> = (0..k).map(|j| feats(g, z1, Some(j))).collect::<Result<_>>()?;
    let h2: Vec<Vec<Var>> = (0..k).map(|j| feats(g, z2, Some(j))).collect::<Result<_>>()?;
    let sizes: Vec<(usize, usize)> = h1[0]
        .iter()
        .map(|&v| {
            let (_, _, th, tw) = g.value(v).dims4();
            (th, tw)
        })
        .collect();
    let inside = distance_weights(&masks, &sizes)?;
    let outside = distance_weights(&masks.iter().map(ClassMask::complement).collect::<Vec<_>>(), &sizes)?;

    let pairs: Vec<(usize, usize)> = (0..k).flat_map(|a| (a + 1..k).map(move |b| (a, b))).collect();
    let pair_term = |g: &mut Graph, wts: &[Tensor]| -> Result<Var> {
        let parts: Vec<Var> = pairs.iter().map(|&(a, b)| graph_distance(g, &h1[a], &h1[b], wts)).collect::<Result<_>>()?;
        let s = g.sum_scalars(&parts);
        Ok(g.scale(s, 1.0 / pairs.len() as f64))
    };
    let l_div = match &inside {
        Some(wts) => {
            let p = pair_term(g, wts)?;
            Some(g.scale(p, -1.0))
        }
        None => None,
    };
    let l_dis = match &outside {
        Some(wts) => Some(pair_term(g, wts)?),
        None => None,
    };
    let l_const = match &inside {
        Some(wts) => {
            let (a_bank, b_bank) = match convention {
                ConsistencyConvention::Literal => (h1.clone(), h2.clone()),
                ConsistencyConvention::Difference => {
                    let base1 = feats(g, z1, None)?;
                    let base2 = feats(g, z2, None)?;
                    let diff = |g: &mut Graph, bank: &[Vec<Var>], base: &[Var]| -> Result<Vec<Vec<Var>>> {
                        bank.iter()
                            .map(|hs| hs.iter().zip(base).map(|(&x, &b)| g.sub(x, b)).collect::<Result<Vec<_>>>())
                            .collect()
                    };
                    (diff(g, &h1, &base1)?, diff(g, &h2, &base2)?)
                }
            };
            let parts: Vec<Var> =
                (0..k).map(|j| graph_distance(g, &a_bank[j], &b_bank[j], wts)).collect::<Result<_>>()?;
            let s = g.sum_scalars(&parts);
            Some(g.scale(s, 1.0 / k as f64))
        }
        None => None,
    };
    let mut terms = Vec::new();
    for (v, wt) in [(l_div, weights.diversity), (l_dis, weights.disentanglement), (l_const, weights.consistency)] {
        if let Some(v) = v {
            terms.push(g.scale(v, wt));
        }
    }
    let total = g.sum_scalars(&terms);
    Ok(ObjectiveVars { l_div, l_dis, l_const, total })
}

fn breakdown(g: &Graph, v: &ObjectiveVars) -> LossBreakdown {
    let val = |o: Option<Var>| o.map_or(0.0, |x| g.value(x).item());
    LossBreakdown { l_div: val(v.l_div), l_dis: val(v.l_dis), l_const: val(v.l_const), total: g.value(v.total).item() }
}

/// Objective value and its gradient with respect to the bank matrix.
pub fn objective_with_gradient(
    gen: &dyn SisGenerator,
    bank: &DirectionBank,
    items: &[ObjectiveItem],
    taps: &TapSpec,
    weights: LossWeights,
    convention: ConsistencyConvention,
) -> Result<(LossBreakdown, Tensor)> {
    let mut g = Graph::new();
    let dirs = g.param(bank.matrix.clone());
    let vars = record_objective(&mut g, gen, dirs, bank, items, taps, weights, convention)?;
    let b = breakdown(&g, &vars);
    let grads = g.backward(vars.total);
    let grad = grads.get(dirs).cloned().unwrap_or_else(|| Tensor::zeros(bank.matrix.shape()));
    Ok((b, grad))
}

pub fn ctrl_sis_objective(
    gen: &dyn SisGenerator,
    bank: &DirectionBank,
    items: &[ObjectiveItem],
    taps: &TapSpec,
    weights: LossWeights,
    convention: ConsistencyConvention,
) -> Result<LossBreakdown> {
    let mut g = Graph::new();
    let dirs = g.constant(bank.matrix.clone());
    let vars = record_objective(&mut g, gen, dirs, bank, items, taps, weights, convention)?;
    Ok(breakdown(&g, &vars))
}

/// Per-step observation handed to the caller of [`optimize_directions`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub epoch: usize,
    pub step: usize,
    pub loss: LossBreakdown,
    pub norms: Vec<f64>,
}

/// Label maps of the discovery pool, indices into `source`, that contain at
/// least one selected class above the minimum area fraction.
fn eligible_pool(
    source: &dyn LabelMapSource,
    classes: &[usize],
    cfg: &DiscoveryConfig,
) -> Result<Vec<(LabelMap, Vec<usize>)>> {
    let mut pool = Vec::new();
    let mut seen = vec![false; classes.len()];
    for i in 0..cfg.dataset_maps as u64 {
        let y = source.label_map(i)?;
        let slots: Vec<usize> = classes
            .iter()
            .enumerate()
            .filter(|&(_, &c)| c < y.class_count() && y.class_fraction(c) >= cfg.min_class_fraction)
            .map(|(s, _)| s)
            .collect();
        for &s in &slots {
            seen[s] = true;
        }
        if !slots.is_empty() {
            pool.push((y, slots));
        }
    }
    if let Some(s) = seen.iter().position(|&x| !x) {
        return Err(Error::ClassCoverage { class: classes[s], attempts: cfg.dataset_maps });
    }
    Ok(pool)
}

/// Learns `K` directions for each class in `classes` jointly: every batch
/// element picks one of its eligible classes uniformly. The optimizer sees
/// the gradient component tangent to the unit sphere, and directions are
/// re-projected to unit norm after every step.
pub fn optimize_directions(
    gen: &dyn SisGenerator,
    classes: &[usize],
    source: &dyn LabelMapSource,
    cfg: &DiscoveryConfig,
    seed: u64,
    mut observe: impl FnMut(&StepReport),
) -> Result<Vec<DirectionSet>> {
    cfg.validate()?;
    if classes.is_empty() {
        return Err(Error::Config("no classes selected".into()));
    }
    for &c in classes {
        if c >= gen.class_count() {
            return Err(Error::ClassOutOfRange { class: c, count: gen.class_count() });
        }
    }
    let d = gen.latent_channels();
    let rows: Vec<f64> = classes
        .iter()
        .flat_map(|&c| {
            random_directions(cfg.k, d, derive_seed(seed, &[0x1417, c as u64]))
                .expect("K, D > 0")
                .into_iter()
                .flat_map(|v| v.values().to_vec())
        })
        .collect();
    let mut bank = DirectionBank { classes: classes.to_vec(), k: cfg.k, matrix: Tensor::new(vec![classes.len() * cfg.k, d], rows)? };
    let n = cfg.resolve_alpha_bound(d, seed);
    let pool = if cfg.epochs > 0 { eligible_pool(source, classes, cfg)? } else { Vec::new() };
    let mut opt = Adam::adamw(cfg.learning_rate, cfg.weight_decay);
    let mut rng = rng_for(seed, &[0xd15c0]);
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..pool.len()).collect();
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let items: Vec<ObjectiveItem> = chunk
                .iter()
                .map(|&i| {
                    use rand::Rng;
                    let (y, slots) = &pool[i];
                    let slot = slots[rng.random_range(0..slots.len())];
                    let z1 = build_latent(rng.random(), d, y.height(), y.width())?;
                    let z2 = build_latent(rng.random(), d, y.height(), y.width())?;
                    let alpha = uniform(&mut rng, -n, n);
                    Ok(ObjectiveItem { label_map: y.clone(), slot, z1, z2, alpha })
                })
                .collect::<Result<_>>()?;
            let (loss, grad) = objective_with_gradient(gen, &bank, &items, &cfg.taps, cfg.weights, cfg.consistency)?;
            let weighted = cfg.weights.diversity * loss.l_div
                + cfg.weights.disentanglement * loss.l_dis
                + cfg.weights.consistency * loss.l_const;
            debug_assert!((weighted - loss.total).abs() <= 1e-9 * (1.0 + loss.total.abs()));
            if !loss.total.is_finite() || !grad.is_finite() {
                return Err(Error::Diverged { step, what: "direction objective".into() });
            }
            let grad = bank.tangent(&grad);
            let mut store = ParamStore::new();
            store.insert("v", bank.matrix.clone());
            opt.step(&mut store, &std::collections::BTreeMap::from([("v".to_string(), grad)]));
            bank.matrix = store.get("v").expect("v").clone();
            bank.normalize();
            observe(&StepReport { epoch, step, loss, norms: bank.norms() });
            step += 1;
        }
    }
    let hash = config_hash(&serde_json::json!({"method": "ctrl_sis", "cfg": cfg, "classes": classes}))?;
    let dd = bank.channels();
    classes
        .iter()
        .enumerate()
        .map(|(s, &c)| {
            let directions = bank.matrix.data()[s * cfg.k * dd..(s + 1) * cfg.k * dd]
                .chunks(dd)
                .map(|r| crate::scene::EditVector::from_unit(r.to_vec()))
                .collect::<Result<_>>()?;
            Ok(DirectionSet {
                class_id: c,
                method: Method::CtrlSis,
                directions,
                taps: cfg.taps.clone(),
                config_hash: hash.clone(),
                seed,
                scores: None,
            })
        })
        .collect()
}
