//! Masked perceptual distances and the control-quality metric family.
//!
//! Local scores edit one class at a time: `mCD_l` (diversity across the K
//! directions inside the class), `mOD` (the same pairs measured outside the
//! class) and `mCC_l` (agreement of one direction across latent codes).
//! Global scores edit every class at once with a randomly picked direction:
//! `mCD` pairs different edits, `mCC` pairs different latent codes.
//!
//! Each pairwise score is reported twice. `pair_mean` averages over
//! unordered pairs. `literal` uses the `1/(ZK)` prefactor over ordered
//! pairs, which equals `(K-1)` times the pair mean for `mCD_l`/`mOD` and
//! `(Z-1)` times it for `mCC_l`. The global scores are plain means in both
//! variants.

use std::collections::BTreeMap;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::directions::DirectionSet;
use crate::error::{Error, Result};
use crate::generator::{generate_batch, SisGenerator};
use crate::image::Image;
use crate::nn::conv_weight;
use crate::rng::{derive_seed, rng_for, uniform};
use crate::scene::{apply_direction, class_mask, downsample_mask, latent_base_vector, ClassMask, LabelMap, LatentCode3D};
use crate::tensor::{avg_pool2, conv2d, ConvGeom, Tensor};
use crate::training::LabelPredictor;

/// One layer of extracted features, `[channels, height, width]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureLayer {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl FeatureLayer {
    /// Unit-normalizes every pixel's channel vector.
    fn channel_normalized(&self) -> FeatureLayer {
        let hw = self.height * self.width;
        let mut out = self.values.clone();
        for p in 0..hw {
            let norm = (0..self.channels).map(|c| self.values[c * hw + p].powi(2)).sum::<f64>().sqrt();
            let s = 1.0 / (norm + 1e-10);
            for c in 0..self.channels {
                out[c * hw + p] *= s;
            }
        }
        FeatureLayer { values: out, ..*self }
    }

    fn channel_means(&self) -> impl Iterator<Item = f64> + '_ {
        let hw = self.height * self.width;
        self.values.chunks_exact(hw).map(move |plane| plane.iter().sum::<f64>() / hw as f64)
    }
}

/// Multi-layer image features. Implement this to plug in a pretrained
/// perceptual network.
pub trait FeatureExtractor: Send + Sync {
    fn id(&self) -> String;
    fn features(&self, image: &Image) -> Result<Vec<FeatureLayer>>;
}

/// Randomly initialized convolution stack. Each layer is a 3x3 convolution
/// and leaky ReLU; layers after the first run on a 2x average-pooled input.
#[derive(Clone, Debug)]
pub struct SeededFeatureBackbone {
    widths: Vec<usize>,
    seed: u64,
    weights: Vec<Tensor>,
}

impl SeededFeatureBackbone {
    pub fn new(widths: Vec<usize>, seed: u64) -> Result<Self> {
        if widths.is_empty() || widths.contains(&0) {
            return Err(Error::Config(format!("backbone widths {widths:?}")));
        }
        let mut cin = 3;
        let weights = widths
            .iter()
            .enumerate()
            .map(|(i, &w)| {
                let t = conv_weight(&mut rng_for(seed, &[0xBAC, i as u64]), w, cin, 3, 1.0);
                cin = w;
                t
            })
            .collect();
        Ok(Self { widths, seed, weights })
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }
}

impl Default for SeededFeatureBackbone {
    fn default() -> Self {
        Self::new(vec![16, 32, 64], 0).expect("default widths")
    }
}

impl FeatureExtractor for SeededFeatureBackbone {
    fn id(&self) -> String {
        format!("seeded-random-features(widths={:?},seed={})", self.widths, self.seed)
    }

    fn features(&self, image: &Image) -> Result<Vec<FeatureLayer>> {
        let mut x = image.to_tensor();
        let mut layers = Vec::with_capacity(self.weights.len());
        for (i, w) in self.weights.iter().enumerate() {
            if i > 0 {
                let (_, _, h, wd) = x.dims4();
                if h < 2 || wd < 2 {
                    break;
                }
                x = avg_pool2(&x);
            }
            x = conv2d(&x, w, None, ConvGeom::SAME3)?;
            x.data_mut().iter_mut().for_each(|v| {
                if *v < 0.0 {
                    *v *= 0.2
                }
            });
            let (_, c, h, wd) = x.dims4();
            layers.push(FeatureLayer { channels: c, height: h, width: wd, values: x.data().to_vec() });
        }
        Ok(layers)
    }
}

/// Parameters of the masked multi-scale structural similarity.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MsSsimConfig {
    pub window: usize,
    pub sigma: f64,
    pub max_scales: usize,
    /// Scales stop before the image side drops below this.
    pub min_size: usize,
}

impl Default for MsSsimConfig {
    fn default() -> Self {
        Self { window: 7, sigma: 1.5, max_scales: 5, min_size: 8 }
    }
}

const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
const SSIM_C1: f64 = 1e-4;
const SSIM_C2: f64 = 9e-4;

/// How two images are compared.
#[derive(Clone)]
pub enum Distance {
    /// LPIPS-style distance on channel-normalized deep features.
    Features(Arc<dyn FeatureExtractor>),
    /// `1 - MS-SSIM`.
    MsSsim(MsSsimConfig),
}

impl std::fmt::Debug for Distance {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.id())
    }
}

/// An image ready for repeated comparisons.
#[derive(Clone, Debug)]
pub enum Prepared {
    Features(Vec<FeatureLayer>),
    Image(Image),
}

impl Distance {
    pub fn seeded() -> Self {
        Distance::Features(Arc::new(SeededFeatureBackbone::default()))
    }

    pub fn msssim() -> Self {
        Distance::MsSsim(MsSsimConfig::default())
    }

    /// Parses `features`/`lpips` (seeded backbone) or `msssim`.
    pub fn parse(id: &str) -> Result<Self> {
        match id {
            "features" | "lpips" | "seeded" => Ok(Self::seeded()),
            "msssim" | "ms-ssim" => Ok(Self::msssim()),
            other => Err(Error::Config(format!("unknown distance backend {other:?}"))),
        }
    }

    pub fn id(&self) -> String {
        match self {
            Distance::Features(f) => f.id(),
            Distance::MsSsim(c) => format!("msssim(window={},sigma={})", c.window, c.sigma),
        }
    }

    pub fn is_msssim(&self) -> bool {
        matches!(self, Distance::MsSsim(_))
    }

    pub fn prepare(&self, image: &Image) -> Result<Prepared> {
        match self {
            Distance::Features(f) => {
                Ok(Prepared::Features(f.features(image)?.iter().map(FeatureLayer::channel_normalized).collect()))
            }
            Distance::MsSsim(_) => Ok(Prepared::Image(image.clone())),
        }
    }

    /// Distance under `mask`, or `None` when the mask is empty at every
    /// resolution involved.
    pub fn between(&self, a: &Prepared, b: &Prepared, mask: Option<&ClassMask>) -> Result<Option<f64>> {
        match (self, a, b) {
            (Distance::Features(_), Prepared::Features(fa), Prepared::Features(fb)) => feature_distance(fa, fb, mask),
            (Distance::MsSsim(cfg), Prepared::Image(x), Prepared::Image(y)) => {
                masked_msssim(x, y, mask, cfg).map(|s| s.map(|s| (1.0 - s).max(0.0)))
            }
            _ => Err(Error::Config("prepared inputs do not match the distance backend".into())),
        }
    }
}

fn check_mask(mask: Option<&ClassMask>, h: usize, w: usize) -> Result<()> {
    match mask {
        Some(m) if (m.height(), m.width()) != (h, w) => {
            Err(Error::Shape(format!("mask {}x{} vs image {h}x{w}", m.height(), m.width())))
        }
        _ => Ok(()),
    }
}

fn mask_at(mask: Option<&ClassMask>, h: usize, w: usize) -> Result<Option<ClassMask>> {
    mask.map(|m| downsample_mask(m, h, w)).transpose()
}

fn feature_distance(fa: &[FeatureLayer], fb: &[FeatureLayer], mask: Option<&ClassMask>) -> Result<Option<f64>> {
    if fa.len() != fb.len() {
        return Err(Error::Shape("feature stacks differ in depth".into()));
    }
    let mut total = 0.0;
    let mut used = 0usize;
    for (la, lb) in fa.iter().zip(fb) {
        if (la.channels, la.height, la.width) != (lb.channels, lb.height, lb.width) {
            return Err(Error::Shape("feature layers differ in shape".into()));
        }
        let hw = la.height * la.width;
        let m = mask_at(mask, la.height, la.width)?;
        let mut sum = 0.0;
        let mut count = 0usize;
        for p in 0..hw {
            if m.as_ref().is_some_and(|m| m.values()[p] == 0) {
                continue;
            }
            sum += (0..la.channels).map(|c| (la.values[c * hw + p] - lb.values[c * hw + p]).powi(2)).sum::<f64>();
            count += 1;
        }
        if count > 0 {
            total += sum / count as f64;
            used += 1;
        }
    }
    Ok((used > 0).then(|| total / used as f64))
}

fn gaussian_kernel(window: usize, sigma: f64) -> Vec<f64> {
    let c = (window as f64 - 1.0) / 2.0;
    let k: Vec<f64> = (0..window).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian blur with the window renormalized at the borders, so
/// the output keeps the input size and lines up with the mask.
fn blur(plane: &[f64], h: usize, w: usize, kernel: &[f64]) -> Vec<f64> {
    let r = kernel.len() / 2;
    let pass = |src: &[f64], along_rows: bool| -> Vec<f64> {
        let mut out = vec![0.0; h * w];
        for i in 0..h {
            for j in 0..w {
                let (pos, len) = if along_rows { (j, w) } else { (i, h) };
                let (mut acc, mut wsum) = (0.0, 0.0);
                for (t, &kv) in kernel.iter().enumerate() {
                    let q = pos as isize + t as isize - r as isize;
                    if q < 0 || q >= len as isize {
                        continue;
                    }
                    let idx = if along_rows { i * w + q as usize } else { q as usize * w + j };
                    acc += kv * src[idx];
                    wsum += kv;
                }
                out[i * w + j] = acc / wsum;
            }
        }
        out
    };
    pass(&pass(plane, true), false)
}

fn pool_plane(plane: &[f64], h: usize, w: usize) -> Vec<f64> {
    let t = Tensor::new(vec![1, 1, h, w], plane.to_vec()).expect("plane");
    avg_pool2(&t).into_data()
}

/// Masked MS-SSIM in `[0, 1]`, averaged over RGB channels. Images are
/// mapped from `[-1, 1]` to `[0, 1]`. Each scale's contrast-structure map
/// (and the luminance map at the coarsest used scale) is averaged over the
/// scale-matched mask; scales where the mask vanishes are dropped and the
/// exponents renormalized.
pub fn masked_msssim(x: &Image, y: &Image, mask: Option<&ClassMask>, cfg: &MsSsimConfig) -> Result<Option<f64>> {
    let (h, w) = (x.height(), x.width());
    if (y.height(), y.width()) != (h, w) {
        return Err(Error::Shape(format!("{h}x{w} vs {}x{}", y.height(), y.width())));
    }
    check_mask(mask, h, w)?;
    let mut sizes = vec![(h, w)];
    while sizes.len() < cfg.max_scales.min(MS_SSIM_WEIGHTS.len()) {
        let (ph, pw) = *sizes.last().expect("non-empty");
        if ph / 2 < cfg.min_size || pw / 2 < cfg.min_size {
            break;
        }
        sizes.push((ph / 2, pw / 2));
    }
    let masks: Vec<Option<ClassMask>> = sizes.iter().map(|&(sh, sw)| mask_at(mask, sh, sw)).collect::<Result<_>>()?;
    let used: Vec<usize> = (0..sizes.len()).filter(|&s| masks[s].as_ref().is_none_or(|m| !m.is_empty())).collect();
    let Some(&last) = used.last() else {
        return Ok(None);
    };
    let wsum: f64 = used.iter().map(|&s| MS_SSIM_WEIGHTS[s]).sum();
    let kernel = gaussian_kernel(cfg.window, cfg.sigma);
    let hw = h * w;
    let mut total = 0.0;
    for ch in 0..3 {
        let mut a: Vec<f64> = x.data()[ch * hw..(ch + 1) * hw].iter().map(|v| 0.5 * (v + 1.0)).collect();
        let mut b: Vec<f64> = y.data()[ch * hw..(ch + 1) * hw].iter().map(|v| 0.5 * (v + 1.0)).collect();
        let mut score = 1.0;
        for (s, &(sh, sw)) in sizes.iter().enumerate() {
            if s > last {
                break;
            }
            if s > 0 {
                a = pool_plane(&a, sizes[s - 1].0, sizes[s - 1].1);
                b = pool_plane(&b, sizes[s - 1].0, sizes[s - 1].1);
            }
            if !used.contains(&s) {
                continue;
            }
            let mu_a = blur(&a, sh, sw, &kernel);
            let mu_b = blur(&b, sh, sw, &kernel);
            let aa: Vec<f64> = a.iter().map(|v| v * v).collect();
            let bb: Vec<f64> = b.iter().map(|v| v * v).collect();
            let ab: Vec<f64> = a.iter().zip(&b).map(|(p, q)| p * q).collect();
            let (e_aa, e_bb, e_ab) = (blur(&aa, sh, sw, &kernel), blur(&bb, sh, sw, &kernel), blur(&ab, sh, sw, &kernel));
            let m = masks[s].as_ref();
            let (mut cs_sum, mut l_sum, mut n) = (0.0, 0.0, 0usize);
            for p in 0..sh * sw {
                if m.is_some_and(|m| m.values()[p] == 0) {
                    continue;
                }
                let var_a = e_aa[p] - mu_a[p] * mu_a[p];
                let var_b = e_bb[p] - mu_b[p] * mu_b[p];
                let cov = e_ab[p] - mu_a[p] * mu_b[p];
                cs_sum += (2.0 * cov + SSIM_C2) / (var_a + var_b + SSIM_C2);
                l_sum += (2.0 * mu_a[p] * mu_b[p] + SSIM_C1) / (mu_a[p] * mu_a[p] + mu_b[p] * mu_b[p] + SSIM_C1);
                n += 1;
            }
            let mut term = (cs_sum / n as f64).max(0.0);
            if s == last {
                term *= (l_sum / n as f64).max(0.0);
            }
            score *= term.powf(MS_SSIM_WEIGHTS[s] / wsum);
        }
        total += score;
    }
    Ok(Some(total / 3.0))
}

/// Distance between two images restricted to `mask` (all pixels when
/// absent). An empty mask is a protocol error.
pub fn masked_distance(distance: &Distance, x1: &Image, x2: &Image, mask: Option<&ClassMask>) -> Result<f64> {
    if (x1.height(), x1.width()) != (x2.height(), x2.width()) {
        return Err(Error::Shape(format!(
            "{}x{} vs {}x{}",
            x1.height(),
            x1.width(),
            x2.height(),
            x2.width()
        )));
    }
    check_mask(mask, x1.height(), x1.width())?;
    distance
        .between(&distance.prepare(x1)?, &distance.prepare(x2)?, mask)?
        .ok_or_else(|| Error::Protocol("mask is empty at every feature resolution".into()))
}

/// Evaluation protocol shared by every method in a comparison.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalProtocol {
    /// Initial latent codes per label map (`Z`).
    pub latent_codes: usize,
    /// Global edits per label map.
    pub global_edits: usize,
    /// Edit strengths are drawn from `[-n, n]`.
    pub alpha_bound: f64,
    /// Classes to score; `None` means every class with a direction set.
    pub classes: Option<Vec<usize>>,
    pub seed: u64,
}

impl Default for EvalProtocol {
    fn default() -> Self {
        Self { latent_codes: 5, global_edits: 10, alpha_bound: 1.0, classes: None, seed: 0 }
    }
}

const TAG_LATENT: u64 = 0xE1;
const TAG_LOCAL_ALPHA: u64 = 0xE2;
const TAG_GLOBAL: u64 = 0xE3;

impl EvalProtocol {
    pub fn validate(&self) -> Result<()> {
        if self.latent_codes < 2 {
            return Err(Error::Protocol(format!("{} latent codes; pairs need at least 2", self.latent_codes)));
        }
        if self.global_edits < 2 {
            return Err(Error::Protocol(format!("{} global edits; pairs need at least 2", self.global_edits)));
        }
        if !(self.alpha_bound.is_finite() && self.alpha_bound > 0.0) {
            return Err(Error::Protocol(format!("alpha bound {}", self.alpha_bound)));
        }
        Ok(())
    }

    /// Base vector of initial code `z` for label map `map`.
    pub fn latent_vector(&self, map: usize, z: usize, channels: usize) -> Vec<f64> {
        latent_base_vector(derive_seed(self.seed, &[TAG_LATENT, map as u64, z as u64]), channels)
    }

    /// Strength of the single-class edits of `class` on label map `map`,
    /// shared by all K directions and all initial codes.
    pub fn local_alpha(&self, map: usize, class: usize) -> f64 {
        uniform(&mut rng_for(self.seed, &[TAG_LOCAL_ALPHA, map as u64, class as u64]), -self.alpha_bound, self.alpha_bound)
    }

    /// Direction index and strength used for `class` in global edit `edit`.
    pub fn global_choice(&self, map: usize, edit: usize, class: usize, k: usize) -> (usize, f64) {
        let mut rng = rng_for(self.seed, &[TAG_GLOBAL, map as u64, edit as u64, class as u64]);
        let idx = rng.random_range(0..k);
        (idx, uniform(&mut rng, -self.alpha_bound, self.alpha_bound))
    }
}

/// Pair-mean and literal-prefactor values of one score.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairVariants {
    pub pair_mean: f64,
    pub literal: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalScores {
    pub mcd_l: PairVariants,
    pub mod_score: PairVariants,
    pub mcc_l: PairVariants,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GlobalScores {
    pub mcd: PairVariants,
    pub mcc: PairVariants,
}

fn find_set<'a>(sets: &'a [DirectionSet], class: usize) -> Option<&'a DirectionSet> {
    sets.iter().find(|s| s.class_id == class)
}

const RENDER_BATCH: usize = 16;

fn render_all(gen: &dyn SisGenerator, latents: &[LatentCode3D], y: &LabelMap) -> Result<Vec<Image>> {
    let mut out = Vec::with_capacity(latents.len());
    for chunk in latents.chunks(RENDER_BATCH) {
        let zs: Vec<Vec<&LatentCode3D>> = chunk.iter().map(|z| vec![z]).collect();
        let ys = vec![y; chunk.len()];
        out.extend(generate_batch(gen, &zs, &ys)?);
    }
    Ok(out)
}

fn initial_codes(gen: &dyn SisGenerator, protocol: &EvalProtocol, map: usize, y: &LabelMap) -> Result<Vec<LatentCode3D>> {
    (0..protocol.latent_codes)
        .map(|z| LatentCode3D::replicate(protocol.latent_vector(map, z, gen.latent_channels()), y.height(), y.width()))
        .collect()
}

/// Running mean over label maps per class, then mean over classes.
#[derive(Default)]
struct ClassAccumulator {
    per_class: BTreeMap<usize, (f64, f64, usize)>,
}

impl ClassAccumulator {
    fn add(&mut self, class: usize, pair_mean: f64, literal: f64) {
        let e = self.per_class.entry(class).or_insert((0.0, 0.0, 0));
        e.0 += pair_mean;
        e.1 += literal;
        e.2 += 1;
    }

    fn finish(&self, what: &str, classes: &[usize]) -> Result<PairVariants> {
        for c in classes {
            if !self.per_class.contains_key(c) {
                log::warn!("{what}: class {c} has no usable label map and is excluded");
            }
        }
        if self.per_class.is_empty() {
            return Err(Error::Protocol(format!("{what}: no class could be scored")));
        }
        let n = self.per_class.len() as f64;
        let (pm, lit) = self
            .per_class
            .values()
            .fold((0.0, 0.0), |(a, b), &(p, l, cnt)| (a + p / cnt as f64, b + l / cnt as f64));
        Ok(PairVariants { pair_mean: pm / n, literal: lit / n })
    }
}

fn scored_classes(sets: &[DirectionSet], protocol: &EvalProtocol) -> Result<Vec<usize>> {
    let classes: Vec<usize> = match &protocol.classes {
        Some(c) => c.clone(),
        None => sets.iter().map(|s| s.class_id).collect(),
    };
    for &c in &classes {
        let set = find_set(sets, c).ok_or_else(|| Error::Protocol(format!("no direction set for class {c}")))?;
        if set.k() < 2 {
            return Err(Error::Protocol(format!("class {c} has {} directions; pairs need at least 2", set.k())));
        }
    }
    Ok(classes)
}

/// All three single-class scores from one set of renders.
pub fn local_scores(
    gen: &dyn SisGenerator,
    sets: &[DirectionSet],
    maps: &[LabelMap],
    protocol: &EvalProtocol,
    distance: &Distance,
) -> Result<LocalScores> {
    protocol.validate()?;
    let classes = scored_classes(sets, protocol)?;
    let zc = protocol.latent_codes;
    let (mut cd, mut od, mut cc) = (ClassAccumulator::default(), ClassAccumulator::default(), ClassAccumulator::default());
    for (mi, y) in maps.iter().enumerate() {
        let codes = initial_codes(gen, protocol, mi, y)?;
        for &c in &classes {
            let mask = class_mask(y, c)?;
            if mask.is_empty() {
                continue;
            }
            let outside = mask.complement();
            let set = find_set(sets, c).expect("checked");
            let k = set.k();
            let alpha = protocol.local_alpha(mi, c);
            let mut latents = Vec::with_capacity(zc * k);
            for z in &codes {
                for v in &set.directions {
                    latents.push(apply_direction(z, v, alpha, Some(&mask))?);
                }
            }
            let prepared: Vec<Prepared> =
                render_all(gen, &latents, y)?.iter().map(|img| distance.prepare(img)).collect::<Result<_>>()?;
            let at = |z: usize, d: usize| &prepared[z * k + d];

            let direction_pairs = |m: &ClassMask| -> Result<Option<f64>> {
                let mut sum = 0.0;
                for z in 0..zc {
                    for k1 in 0..k {
                        for k2 in k1 + 1..k {
                            match distance.between(at(z, k1), at(z, k2), Some(m))? {
                                Some(d) => sum += d,
                                None => return Ok(None),
                            }
                        }
                    }
                }
                Ok(Some(sum))
            };
            let pairs = (zc * k * (k - 1) / 2) as f64;
            if let Some(sum) = direction_pairs(&mask)? {
                cd.add(c, sum / pairs, 2.0 * sum / (zc * k) as f64);
            }
            if !outside.is_empty() {
                if let Some(sum) = direction_pairs(&outside)? {
                    od.add(c, sum / pairs, 2.0 * sum / (zc * k) as f64);
                }
            }
            let mut sum = 0.0;
            let mut usable = true;
            'codes: for d in 0..k {
                for z1 in 0..zc {
                    for z2 in z1 + 1..zc {
                        match distance.between(at(z1, d), at(z2, d), Some(&mask))? {
                            Some(v) => sum += v,
                            None => {
                                usable = false;
                                break 'codes;
                            }
                        }
                    }
                }
            }
            if usable {
                cc.add(c, sum / (k * zc * (zc - 1) / 2) as f64, 2.0 * sum / (zc * k) as f64);
            }
        }
    }
    Ok(LocalScores { mcd_l: cd.finish("mCD_l", &classes)?, mod_score: od.finish("mOD", &classes)?, mcc_l: cc.finish("mCC_l", &classes)? })
}

pub fn mcd_local(
    gen: &dyn SisGenerator,
    sets: &[DirectionSet],
    maps: &[LabelMap],
    protocol: &EvalProtocol,
    distance: &Distance,
) -> Result<PairVariants> {
    Ok(local_scores(gen, sets, maps, protocol, distance)?.mcd_l)
}

pub fn mod_score(
    gen: &dyn SisGenerator,
    sets: &[DirectionSet],
    maps: &[LabelMap],
    protocol: &EvalProtocol,
    distance: &Distance,
) -> Result<PairVariants> {
    Ok(local_scores(gen, sets, maps, protocol, distance)?.mod_score)
}

pub fn mcc_local(
    gen: &dyn SisGenerator,
    sets: &[DirectionSet],
    maps: &[LabelMap],
    protocol: &EvalProtocol,
    distance: &Distance,
) -> Result<PairVariants> {
    Ok(local_scores(gen, sets, maps, protocol, distance)?.mcc_l)
}

/// Latent code of global edit `edit` on map `map`: every present class is
/// moved inside its own mask along a randomly chosen direction. When the
/// protocol restricts classes, the others stay unedited.
pub fn global_edit_latent(
    z: &LatentCode3D,
    y: &LabelMap,
    sets: &[DirectionSet],
    protocol: &EvalProtocol,
    map: usize,
    edit: usize,
) -> Result<LatentCode3D> {
    let mut out = z.clone();
    for c in y.present_classes() {
        if protocol.classes.as_ref().is_some_and(|cs| !cs.contains(&c)) {
            continue;
        }
        let set = find_set(sets, c).ok_or_else(|| Error::Protocol(format!("no direction set for class {c}")))?;
        let (k, alpha) = protocol.global_choice(map, edit, c, set.k());
        out = apply_direction(&out, &set.directions[k], alpha, Some(&class_mask(y, c)?))?;
    }
    Ok(out)
}

/// Global diversity and consistency. Pairs are formed only within a shared
/// initial code (`mCD`) or a shared edit (`mCC`).
pub fn global_scores(
    gen: &dyn SisGenerator,
    sets: &[DirectionSet],
    maps: &[LabelMap],
    protocol: &EvalProtocol,
    distance: &Distance,
) -> Result<GlobalScores> {
    protocol.validate()?;
    if maps.is_empty() {
        return Err(Error::Protocol("no label maps".into()));
    }
    let (zc, ec) = (protocol.latent_codes, protocol.global_edits);
    let (mut cd_total, mut cc_total) = (0.0, 0.0);
    for (mi, y) in maps.iter().enumerate() {
        let codes = initial_codes(gen, protocol, mi, y)?;
        let mut latents = Vec::with_capacity(zc * ec);
        for z in &codes {
            for e in 0..ec {
                latents.push(global_edit_latent(z, y, sets, protocol, mi, e)?);
            }
        }
        let prepared: Vec<Prepared> =
            render_all(gen, &latents, y)?.iter().map(|img| distance.prepare(img)).collect::<Result<_>>()?;
        let at = |z: usize, e: usize| &prepared[z * ec + e];
        let unmasked = |a: &Prepared, b: &Prepared| -> Result<f64> { Ok(distance.between(a, b, None)?.expect("unmasked")) };
        let mut cd = 0.0;
        for z in 0..zc {
            for e1 in 0..ec {
                for e2 in e1 + 1..ec {
                    cd += unmasked(at(z, e1), at(z, e2))?;
                }
            }
        }
        let mut cc = 0.0;
        for e in 0..ec {
            for z1 in 0..zc {
                for z2 in z1 + 1..zc {
                    cc += unmasked(at(z1, e), at(z2, e))?;
                }
            }
        }
        cd_total += cd / (zc * ec * (ec - 1) / 2) as f64;
        cc_total += cc / (ec * zc * (zc - 1) / 2) as f64;
    }
    let n = maps.len() as f64;
    let both = |v: f64| PairVariants { pair_mean: v, literal: v };
    Ok(GlobalScores { mcd: both(cd_total / n), mcc: both(cc_total / n) })
}

pub fn mcd_global(
    gen: &dyn SisGenerator,
    sets: &[DirectionSet],
    maps: &[LabelMap],
    protocol: &EvalProtocol,
    distance: &Distance,
) -> Result<PairVariants> {
    Ok(global_scores(gen, sets, maps, protocol, distance)?.mcd)
}

pub fn mcc_global(
    gen: &dyn SisGenerator,
    sets: &[DirectionSet],
    maps: &[LabelMap],
    protocol: &EvalProtocol,
    distance: &Distance,
) -> Result<PairVariants> {
    Ok(global_scores(gen, sets, maps, protocol, distance)?.mcc)
}

/// Sample mean and unbiased covariance of row vectors.
pub fn gaussian_fit(samples: &[Vec<f64>]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = samples.len();
    if n < 2 {
        return Err(Error::Protocol(format!("{n} samples; a covariance needs at least 2")));
    }
    let d = samples[0].len();
    if samples.iter().any(|s| s.len() != d) {
        return Err(Error::Shape("samples differ in dimension".into()));
    }
    let x = DMatrix::from_fn(n, d, |i, j| samples[i][j]);
    let mu = DVector::from_fn(d, |j, _| x.column(j).mean());
    let centered = DMatrix::from_fn(n, d, |i, j| x[(i, j)] - mu[j]);
    let cov = centered.transpose() * &centered / (n - 1) as f64;
    Ok((mu, cov))
}

fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m.clone());
    let vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

/// `‖μ₁−μ₂‖² + tr(Σ₁ + Σ₂ − 2(Σ₁Σ₂)^{1/2})`. The trace of the matrix root is
/// taken as `tr((S Σ₂ S)^{1/2})` with `S = Σ₁^{1/2}`; negative eigenvalues
/// from round-off are clamped to zero.
pub fn frechet_distance(mu1: &DVector<f64>, cov1: &DMatrix<f64>, mu2: &DVector<f64>, cov2: &DMatrix<f64>) -> f64 {
    let s = psd_sqrt(cov1);
    let mut inner = &s * cov2 * &s;
    inner = (&inner + inner.transpose()) * 0.5;
    let eig = SymmetricEigen::new(inner);
    let scale = eig.eigenvalues.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let mut clamped = false;
    let tr_root: f64 = eig
        .eigenvalues
        .iter()
        .map(|&v| {
            if v < -1e-9 * scale.max(1.0) {
                clamped = true;
            }
            v.max(0.0).sqrt()
        })
        .sum();
    if clamped {
        log::warn!("frechet distance: clamped negative eigenvalues of the covariance product");
    }
    let diff = mu1 - mu2;
    (diff.dot(&diff) + cov1.trace() + cov2.trace() - 2.0 * tr_root).max(0.0)
}

pub fn frechet_from_samples(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    let (m1, c1) = gaussian_fit(a)?;
    let (m2, c2) = gaussian_fit(b)?;
    if m1.len() != m2.len() {
        return Err(Error::Shape("feature dimensions differ".into()));
    }
    Ok(frechet_distance(&m1, &c1, &m2, &c2))
}

/// Spatially pooled backbone activations, concatenated over layers.
pub fn pooled_features(backbone: &dyn FeatureExtractor, image: &Image) -> Result<Vec<f64>> {
    Ok(backbone.features(image)?.iter().flat_map(|l| l.channel_means().collect::<Vec<_>>()).collect())
}

/// Fréchet distance between Gaussian fits of pooled backbone features.
pub fn fid_lite(real: &[Image], generated: &[Image], backbone: &dyn FeatureExtractor) -> Result<f64> {
    let fa: Vec<Vec<f64>> = real.iter().map(|x| pooled_features(backbone, x)).collect::<Result<_>>()?;
    let fb: Vec<Vec<f64>> = generated.iter().map(|x| pooled_features(backbone, x)).collect::<Result<_>>()?;
    frechet_from_samples(&fa, &fb)
}

/// Mean IoU between predicted and given labels, accumulated over all
/// images. Classes with an empty union are left out.
pub fn miou_from_maps(predicted: &[LabelMap], truth: &[LabelMap]) -> Result<f64> {
    if predicted.len() != truth.len() || truth.is_empty() {
        return Err(Error::Shape(format!("{} predictions for {} label maps", predicted.len(), truth.len())));
    }
    let classes = truth[0].class_count();
    let mut inter = vec![0usize; classes];
    let mut union = vec![0usize; classes];
    for (p, t) in predicted.iter().zip(truth) {
        if p.labels().len() != t.labels().len() {
            return Err(Error::Shape("prediction and label map sizes differ".into()));
        }
        for (&a, &b) in p.labels().iter().zip(t.labels()) {
            let (a, b) = (a as usize, b as usize);
            if a == b {
                inter[a] += 1;
                union[a] += 1;
            } else {
                union[a] += 1;
                union[b] += 1;
            }
        }
    }
    let ious: Vec<f64> = (0..classes).filter(|&c| union[c] > 0).map(|c| inter[c] as f64 / union[c] as f64).collect();
    if ious.is_empty() {
        return Err(Error::Protocol("no class present".into()));
    }
    Ok(ious.iter().sum::<f64>() / ious.len() as f64)
}

pub fn miou_proxy(segmenter: &dyn LabelPredictor, images: &[Image], labels: &[LabelMap]) -> Result<f64> {
    let predicted: Vec<LabelMap> = images.iter().map(|x| segmenter.predict_labels(x)).collect::<Result<_>>()?;
    miou_from_maps(&predicted, labels)
}

/// Report columns.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Metric {
    #[serde(rename = "mCD")]
    Mcd,
    #[serde(rename = "mCC")]
    Mcc,
    #[serde(rename = "mOD")]
    Mod,
    #[serde(rename = "mCD_l")]
    McdL,
    #[serde(rename = "mCC_l")]
    MccL,
    #[serde(rename = "FID-lite")]
    FidLite,
    #[serde(rename = "mIoU-proxy")]
    MiouProxy,
}

impl Metric {
    pub const ALL: [Metric; 7] =
        [Metric::Mcd, Metric::Mcc, Metric::Mod, Metric::McdL, Metric::MccL, Metric::FidLite, Metric::MiouProxy];

    pub fn id(self) -> &'static str {
        match self {
            Metric::Mcd => "mCD",
            Metric::Mcc => "mCC",
            Metric::Mod => "mOD",
            Metric::McdL => "mCD_l",
            Metric::MccL => "mCC_l",
            Metric::FidLite => "FID-lite",
            Metric::MiouProxy => "mIoU-proxy",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.id().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown metric {s:?}")))
    }

    pub fn is_pairwise(self) -> bool {
        !matches!(self, Metric::FidLite | Metric::MiouProxy)
    }

    pub fn is_local(self) -> bool {
        matches!(self, Metric::Mod | Metric::McdL | Metric::MccL)
    }

    pub fn is_global(self) -> bool {
        matches!(self, Metric::Mcd | Metric::Mcc)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Score {
    Pair(PairVariants),
    Single(f64),
}

impl Score {
    pub fn value(&self) -> f64 {
        match self {
            Score::Pair(p) => p.pair_mean,
            Score::Single(v) => *v,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodRow {
    pub method: String,
    pub scores: BTreeMap<Metric, Score>,
}

impl MethodRow {
    pub fn get(&self, m: Metric) -> Option<f64> {
        self.scores.get(&m).map(Score::value)
    }

    pub fn pair(&self, m: Metric) -> Option<PairVariants> {
        match self.scores.get(&m) {
            Some(Score::Pair(p)) => Some(*p),
            _ => None,
        }
    }
}

/// Pairwise scores of one direction source on the protocol.
pub fn evaluate_directions(
    gen: &dyn SisGenerator,
    sets: &[DirectionSet],
    maps: &[LabelMap],
    protocol: &EvalProtocol,
    distance: &Distance,
    metrics: &[Metric],
) -> Result<BTreeMap<Metric, Score>> {
    let mut out = BTreeMap::new();
    if metrics.iter().any(|m| m.is_local()) {
        let l = local_scores(gen, sets, maps, protocol, distance)?;
        for (m, v) in [(Metric::McdL, l.mcd_l), (Metric::Mod, l.mod_score), (Metric::MccL, l.mcc_l)] {
            if metrics.contains(&m) {
                out.insert(m, Score::Pair(v));
            }
        }
    }
    if metrics.iter().any(|m| m.is_global()) {
        let g = global_scores(gen, sets, maps, protocol, distance)?;
        for (m, v) in [(Metric::Mcd, g.mcd), (Metric::Mcc, g.mcc)] {
            if metrics.contains(&m) {
                out.insert(m, Score::Pair(v));
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub distance: String,
    pub protocol: EvalProtocol,
    pub label_maps: usize,
    pub metrics: Vec<Metric>,
    pub rows: Vec<MethodRow>,
    /// Lineage hashes and any other provenance the producer wants echoed.
    pub provenance: BTreeMap<String, String>,
}

impl MetricReport {
    pub fn row(&self, method: &str) -> Option<&MethodRow> {
        self.rows.iter().find(|r| r.method == method)
    }

    /// Aligned columns, one row per method. Pairwise scores show the pair
    /// mean; the literal-prefactor values follow in `[lit]` columns.
    pub fn to_text(&self) -> String {
        let suffix = if self.distance.starts_with("msssim") { " (MS-SSIM)" } else { "" };
        let mut header = vec!["method".to_string()];
        for m in &self.metrics {
            header.push(if m.is_pairwise() { format!("{}{suffix}", m.id()) } else { m.id().to_string() });
        }
        for m in self.metrics.iter().filter(|m| m.is_pairwise()) {
            header.push(format!("{}{suffix} [lit]", m.id()));
        }
        let mut lines = vec![header];
        for r in &self.rows {
            let mut cells = vec![r.method.clone()];
            for m in &self.metrics {
                cells.push(r.get(*m).map_or("-".into(), |v| format!("{v:.4}")));
            }
            for m in self.metrics.iter().filter(|m| m.is_pairwise()) {
                cells.push(r.pair(*m).map_or("-".into(), |v| format!("{:.4}", v.literal)));
            }
            lines.push(cells);
        }
        let widths: Vec<usize> =
            (0..lines[0].len()).map(|i| lines.iter().map(|l| l[i].len()).max().unwrap_or(0)).collect();
        let mut out = format!(
            "# distance: {}\n# label maps: {}, latent codes: {}, global edits: {}, alpha bound: {:.4}, seed: {}\n",
            self.distance,
            self.label_maps,
            self.protocol.latent_codes,
            self.protocol.global_edits,
            self.protocol.alpha_bound,
            self.protocol.seed
        );
        for l in lines {
            let cells: Vec<String> = l.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect();
            out.push_str(cells.join("  ").trim_end());
            out.push('\n');
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gradient(h: usize, w: usize, phase: f64) -> Image {
        let mut img = Image::filled(h, w, [0.0; 3]);
        for c in 0..3 {
            for r in 0..h {
                for col in 0..w {
                    img.set(c, r, col, ((r as f64 * 0.7 + col as f64 * 0.3 + c as f64 + phase).sin()) * 0.8);
                }
            }
        }
        img
    }

    #[test]
    fn identical_images_have_zero_distance() {
        let x = gradient(16, 16, 0.0);
        for d in [Distance::seeded(), Distance::msssim()] {
            assert_eq!(masked_distance(&d, &x, &x, None).unwrap(), 0.0);
        }
    }

    #[test]
    fn empty_mask_is_rejected() {
        let x = gradient(8, 8, 0.0);
        let m = ClassMask::all_ones(8, 8, 0).complement();
        assert!(matches!(masked_distance(&Distance::seeded(), &x, &x, Some(&m)), Err(Error::Protocol(_))));
    }

    #[test]
    fn miou_edge_cases() {
        let a = LabelMap::from_fn(4, 4, 2, |r, _| (r % 2) as u16).unwrap();
        let flipped = LabelMap::from_fn(4, 4, 2, |r, _| 1 - (r % 2) as u16).unwrap();
        assert_eq!(miou_from_maps(std::slice::from_ref(&a), std::slice::from_ref(&a)).unwrap(), 1.0);
        assert_eq!(miou_from_maps(&[flipped], &[a]).unwrap(), 0.0);
    }

    #[test]
    fn metric_ids_round_trip() {
        for m in Metric::ALL {
            assert_eq!(Metric::parse(m.id()).unwrap(), m);
        }
        assert!(Metric::parse("mAP").is_err());
    }
}
