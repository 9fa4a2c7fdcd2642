//! Spatially-conditioned toy generator with 3-D latent injection, feature
//! taps, and a per-pixel linear generator used as an analytic oracle.
//!
//! Every block modulates instance-normalized activations with a scale and
//! shift predicted from the concatenation of the one-hot label map and the
//! latent tensor, both resampled (nearest) to the block's resolution.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::nn::{conv_weight, BoundParams, ParamStore};
use crate::rng::rng_for;
use crate::scene::{LabelMap, LatentCode3D};
use crate::tensor::{ConvGeom, Tensor};

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub class_count: usize,
    pub latent_channels: usize,
    pub blocks: usize,
    pub width: usize,
    pub hidden: usize,
    pub image_size: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self { class_count: 6, latent_channels: 64, blocks: 4, width: 32, hidden: 32, image_size: 64 }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.class_count == 0 || self.latent_channels == 0 || self.blocks == 0 || self.width == 0 || self.hidden == 0 {
            return Err(Error::Config(format!("degenerate generator config {self:?}")));
        }
        let factor = 1usize << (self.blocks - 1);
        if self.image_size % factor != 0 || self.image_size / factor < 2 {
            return Err(Error::Config(format!(
                "image size {} incompatible with {} upsampling blocks",
                self.image_size, self.blocks
            )));
        }
        Ok(())
    }

    /// Spatial resolution of block `b` (the last block runs at image size).
    pub fn block_resolution(&self, block: usize) -> usize {
        self.image_size >> (self.blocks - 1 - block)
    }
}

/// Activation site inside the generator.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "site", rename_all = "snake_case")]
pub enum FeatureTap {
    /// Output of the first (shared) convolution of a block's conditional
    /// normalization, i.e. the features the scale and shift are predicted from.
    NormActivation { block: usize },
    /// Output of a block after its residual update.
    BlockOutput { block: usize },
    /// The RGB output.
    Image,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TapSpec {
    pub taps: Vec<FeatureTap>,
}

impl TapSpec {
    pub fn new(taps: Vec<FeatureTap>) -> Self {
        Self { taps }
    }

    /// Conditional-normalization features of every block.
    pub fn norm_layers(blocks: usize) -> Self {
        Self::new((0..blocks).map(|block| FeatureTap::NormActivation { block }).collect())
    }

    pub fn image() -> Self {
        Self::new(vec![FeatureTap::Image])
    }
}

/// What [`SisGenerator::record`] put on the graph.
pub struct Recorded {
    pub taps: Vec<Var>,
    pub image: Option<Var>,
}

/// A label-conditioned generator whose forward pass can be recorded on a
/// [`Graph`] so gradients reach the latent input.
pub trait SisGenerator: Send + Sync {
    fn latent_channels(&self) -> usize;
    fn class_count(&self) -> usize;
    /// Number of blocks that can receive distinct latent tensors.
    fn blocks(&self) -> usize;

    /// Records the forward pass for a batch. `latents` holds either one
    /// `[N, D, H, W]` var shared by every block or one per block; `H, W`
    /// equal the label-map size.
    fn record(
        &self,
        g: &mut Graph,
        latents: &[Var],
        labels: &[&LabelMap],
        taps: &TapSpec,
        want_image: bool,
    ) -> Result<Recorded>;

    /// Matrix `[rows, D]` of the first weights acting on the latent input,
    /// for closed-form factorization.
    fn latent_weight(&self, taps: &TapSpec) -> Result<nalgebra::DMatrix<f64>>;

    /// Content hash of the parameters.
    fn parameter_hash(&self) -> String;
}

fn latent_batch(zs: &[&LatentCode3D]) -> Result<Tensor> {
    let parts: Vec<Tensor> = zs
        .iter()
        .map(|z| Tensor::new(vec![1, z.channels(), z.height(), z.width()], z.values().to_vec()))
        .collect::<Result<_>>()?;
    Tensor::cat_batch(&parts)
}

fn check_pair(gen: &dyn SisGenerator, z: &LatentCode3D, y: &LabelMap) -> Result<()> {
    if z.channels() != gen.latent_channels() || z.height() != y.height() || z.width() != y.width() {
        return Err(Error::Shape(format!(
            "latent {}x{}x{} vs label map {}x{} and {} generator channels",
            z.height(),
            z.width(),
            z.channels(),
            y.height(),
            y.width(),
            gen.latent_channels()
        )));
    }
    if y.class_count() != gen.class_count() {
        return Err(Error::Shape(format!("label map has {} classes, generator {}", y.class_count(), gen.class_count())));
    }
    Ok(())
}

/// Renders a batch where each item may use per-block latents
/// (`latents[item][block]`, or a single latent for all blocks).
pub fn generate_batch(gen: &dyn SisGenerator, latents: &[Vec<&LatentCode3D>], labels: &[&LabelMap]) -> Result<Vec<Image>> {
    if latents.is_empty() || latents.len() != labels.len() {
        return Err(Error::Shape(format!("{} latents for {} label maps", latents.len(), labels.len())));
    }
    let per = latents[0].len();
    if per != 1 && per != gen.blocks() {
        return Err(Error::Shape(format!("{per} latent tensors for {} blocks", gen.blocks())));
    }
    for (zs, y) in latents.iter().zip(labels) {
        if zs.len() != per {
            return Err(Error::Shape("items disagree on latent count".into()));
        }
        for z in zs {
            check_pair(gen, z, y)?;
        }
    }
    let mut g = Graph::new();
    let vars: Vec<Var> = (0..per)
        .map(|b| {
            let items: Vec<&LatentCode3D> = latents.iter().map(|zs| zs[b]).collect();
            latent_batch(&items).map(|t| g.constant(t))
        })
        .collect::<Result<_>>()?;
    let rec = gen.record(&mut g, &vars, labels, &TapSpec::new(vec![]), true)?;
    let img = g.value(rec.image.expect("image requested"));
    (0..labels.len()).map(|i| Image::from_batch(img, i)).collect()
}

/// `x = G(z, y)`.
pub fn generate(gen: &dyn SisGenerator, z: &LatentCode3D, y: &LabelMap) -> Result<Image> {
    Ok(generate_batch(gen, &[vec![z]], &[y])?.remove(0))
}

/// Rendering with a distinct latent tensor per block.
pub fn generate_layered(gen: &dyn SisGenerator, per_block: &[LatentCode3D], y: &LabelMap) -> Result<Image> {
    let refs: Vec<&LatentCode3D> = per_block.iter().collect();
    Ok(generate_batch(gen, &[refs], &[y])?.remove(0))
}

/// Tapped activation of one sample, `[channels, height, width]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub tap: FeatureTap,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

pub fn tap_features(gen: &dyn SisGenerator, z: &LatentCode3D, y: &LabelMap, taps: &TapSpec) -> Result<Vec<FeatureMap>> {
    check_pair(gen, z, y)?;
    let mut g = Graph::new();
    let zv = g.constant(latent_batch(&[z])?);
    let rec = gen.record(&mut g, &[zv], &[y], taps, false)?;
    Ok(taps
        .taps
        .iter()
        .zip(rec.taps)
        .map(|(&tap, v)| {
            let t = g.value(v);
            let (_, c, h, w) = t.dims4();
            FeatureMap { tap, channels: c, height: h, width: w, values: t.data().to_vec() }
        })
        .collect())
}

/// Constant `[N, C, H, W]` one-hot batch at label resolution.
pub fn one_hot_batch(labels: &[&LabelMap]) -> Result<Tensor> {
    let parts: Vec<Tensor> = labels
        .iter()
        .map(|y| Tensor::new(vec![1, y.class_count(), y.height(), y.width()], y.one_hot()))
        .collect::<Result<_>>()?;
    Tensor::cat_batch(&parts)
}

const LEAK: f64 = 0.2;

#[derive(Clone, Debug, PartialEq)]
pub struct ToyGenerator {
    config: GeneratorConfig,
    params: ParamStore,
}

impl ToyGenerator {
    pub fn init(config: GeneratorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_for(seed, &[0x6e4e]);
        let GeneratorConfig { class_count: c, latent_channels: d, width: w, hidden, .. } = config;
        let mut p = ParamStore::new();
        p.insert("input.weight", conv_weight(&mut rng, w, c + d, 3, 1.0));
        p.insert("input.bias", Tensor::zeros(&[w]));
        for b in 0..config.blocks {
            p.insert(format!("block{b}.shared.weight"), conv_weight(&mut rng, hidden, c + d, 3, 1.0));
            p.insert(format!("block{b}.shared.bias"), Tensor::zeros(&[hidden]));
            p.insert(format!("block{b}.gamma.weight"), conv_weight(&mut rng, w, hidden, 3, 0.3));
            p.insert(format!("block{b}.gamma.bias"), Tensor::zeros(&[w]));
            p.insert(format!("block{b}.beta.weight"), conv_weight(&mut rng, w, hidden, 3, 0.3));
            p.insert(format!("block{b}.beta.bias"), Tensor::zeros(&[w]));
            p.insert(format!("block{b}.conv.weight"), conv_weight(&mut rng, w, w, 3, 0.5));
            p.insert(format!("block{b}.conv.bias"), Tensor::zeros(&[w]));
        }
        p.insert("out.weight", conv_weight(&mut rng, 3, w, 3, 0.5));
        p.insert("out.bias", Tensor::zeros(&[3]));
        Ok(Self { config, params: p })
    }

    pub fn from_parts(config: GeneratorConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let reference = Self::init(config.clone(), 0)?;
        for (name, t) in reference.params.iter() {
            match params.get(name) {
                Some(p) if p.shape() == t.shape() => {}
                _ => return Err(Error::Format(format!("parameter {name} missing or misshapen"))),
            }
        }
        if params.len() != reference.params.len() {
            return Err(Error::Format("unexpected extra generator parameters".into()));
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn validate_taps(&self, taps: &TapSpec) -> Result<()> {
        for t in &taps.taps {
            match *t {
                FeatureTap::NormActivation { block } | FeatureTap::BlockOutput { block } if block >= self.config.blocks => {
                    return Err(Error::Config(format!("tap {t:?} beyond {} blocks", self.config.blocks)));
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Forward pass with explicitly bound parameters (trainable or not).
    pub fn record_with(
        &self,
        g: &mut Graph,
        params: &BoundParams,
        latents: &[Var],
        labels: &[&LabelMap],
        taps: &TapSpec,
        want_image: bool,
    ) -> Result<Recorded> {
        self.validate_taps(taps)?;
        let cfg = &self.config;
        if latents.len() != 1 && latents.len() != cfg.blocks {
            return Err(Error::Shape(format!("{} latent tensors for {} blocks", latents.len(), cfg.blocks)));
        }
        let onehot_full = one_hot_batch(labels)?;
        for &z in latents {
            let (n, d, h, w) = g.value(z).dims4();
            if n != labels.len() || d != cfg.latent_channels || (h, w) != (onehot_full.dims4().2, onehot_full.dims4().3) {
                return Err(Error::Shape(format!("latent batch {:?}", g.value(z).shape())));
            }
        }
        if onehot_full.dims4().1 != cfg.class_count {
            return Err(Error::Shape("label maps disagree with generator class count".into()));
        }
        let onehot = g.constant(onehot_full);
        let latent_for = |b: usize| if latents.len() == 1 { latents[0] } else { latents[b] };

        let last_main = taps
            .taps
            .iter()
            .filter_map(|t| match *t {
                FeatureTap::BlockOutput { block } => Some(block),
                FeatureTap::Image => Some(cfg.blocks - 1),
                FeatureTap::NormActivation { .. } => None,
            })
            .chain(want_image.then_some(cfg.blocks - 1))
            .max();
        let last_norm = taps
            .taps
            .iter()
            .filter_map(|t| match *t {
                FeatureTap::NormActivation { block } => Some(block),
                _ => None,
            })
            .chain(last_main)
            .max();

        let mut norm_acts = vec![None; cfg.blocks];
        let mut block_outs = vec![None; cfg.blocks];
        let mut x = None;
        let seg = |g: &mut Graph, b: usize| -> Result<Var> {
            let r = cfg.block_resolution(b);
            let oh = g.resize(onehot, r, r);
            let zr = g.resize(latent_for(b), r, r);
            g.concat(&[oh, zr])
        };
        if last_main.is_some() {
            let s0 = seg(g, 0)?;
            x = Some(g.conv(s0, params.var("input.weight"), Some(params.var("input.bias")), ConvGeom::SAME3)?);
        }
        for b in 0..=last_norm.unwrap_or(0) {
            if last_norm.is_none() {
                break;
            }
            let sb = seg(g, b)?;
            let pre = g.conv(
                sb,
                params.var(&format!("block{b}.shared.weight")),
                Some(params.var(&format!("block{b}.shared.bias"))),
                ConvGeom::SAME3,
            )?;
            let shared = g.leaky_relu(pre, LEAK);
            norm_acts[b] = Some(shared);
            if last_main.is_some_and(|m| b <= m) {
                let xin = x.expect("main path");
                let normed = g.instance_norm(xin, 1e-5);
                let gamma = g.conv(
                    shared,
                    params.var(&format!("block{b}.gamma.weight")),
                    Some(params.var(&format!("block{b}.gamma.bias"))),
                    ConvGeom::SAME3,
                )?;
                let beta = g.conv(
                    shared,
                    params.var(&format!("block{b}.beta.weight")),
                    Some(params.var(&format!("block{b}.beta.bias"))),
                    ConvGeom::SAME3,
                )?;
                let scaled = g.mul(normed, gamma)?;
                let modulated = g.add(normed, scaled)?;
                let modulated = g.add(modulated, beta)?;
                let act = g.leaky_relu(modulated, LEAK);
                let h = g.conv(
                    act,
                    params.var(&format!("block{b}.conv.weight")),
                    Some(params.var(&format!("block{b}.conv.bias"))),
                    ConvGeom::SAME3,
                )?;
                let out = g.add(xin, h)?;
                block_outs[b] = Some(out);
                x = Some(if b + 1 < cfg.blocks {
                    let r = cfg.block_resolution(b + 1);
                    g.resize(out, r, r)
                } else {
                    out
                });
            }
        }
        let image = if last_main == Some(cfg.blocks - 1) && (want_image || taps.taps.contains(&FeatureTap::Image)) {
            let xin = x.expect("main path");
            let act = g.leaky_relu(xin, LEAK);
            let rgb = g.conv(act, params.var("out.weight"), Some(params.var("out.bias")), ConvGeom::SAME3)?;
            Some(g.tanh(rgb))
        } else {
            None
        };
        let tapped = taps
            .taps
            .iter()
            .map(|t| match *t {
                FeatureTap::NormActivation { block } => norm_acts[block].expect("computed"),
                FeatureTap::BlockOutput { block } => block_outs[block].expect("computed"),
                FeatureTap::Image => image.expect("computed"),
            })
            .collect();
        Ok(Recorded { taps: tapped, image: if want_image { image } else { None } })
    }
}

impl SisGenerator for ToyGenerator {
    fn latent_channels(&self) -> usize {
        self.config.latent_channels
    }

    fn class_count(&self) -> usize {
        self.config.class_count
    }

    fn blocks(&self) -> usize {
        self.config.blocks
    }

    fn record(&self, g: &mut Graph, latents: &[Var], labels: &[&LabelMap], taps: &TapSpec, want_image: bool) -> Result<Recorded> {
        let bound = self.params.bind(g, false);
        self.record_with(g, &bound, latents, labels, taps, want_image)
    }

    /// Latent slices of the conditional-normalization input convolutions of
    /// the tapped blocks (all blocks when no normalization tap is given),
    /// stacked as rows `[out·k·k, D]`.
    fn latent_weight(&self, taps: &TapSpec) -> Result<nalgebra::DMatrix<f64>> {
        self.validate_taps(taps)?;
        let mut blocks: Vec<usize> = taps
            .taps
            .iter()
            .filter_map(|t| match *t {
                FeatureTap::NormActivation { block } | FeatureTap::BlockOutput { block } => Some(block),
                FeatureTap::Image => None,
            })
            .collect();
        if blocks.is_empty() {
            blocks = (0..self.config.blocks).collect();
        }
        blocks.sort_unstable();
        blocks.dedup();
        let (c, d) = (self.config.class_count, self.config.latent_channels);
        let mut rows = Vec::new();
        for b in blocks {
            let w = self.params.get(&format!("block{b}.shared.weight")).expect("shared weight");
            let (cout, cin, kh, kw) = w.dims4();
            for co in 0..cout {
                for k in 0..kh * kw {
                    rows.push((0..d).map(|j| w.data()[(co * cin + c + j) * kh * kw + k]).collect::<Vec<_>>());
                }
            }
        }
        Ok(nalgebra::DMatrix::from_fn(rows.len(), d, |i, j| rows[i][j]))
    }

    fn parameter_hash(&self) -> String {
        self.params.content_hash()
    }
}

/// `x[p] = A_{y[p]} · z[p]`: no nonlinearity, no mixing across pixels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearOracleGenerator {
    channels: usize,
    /// Row-major `3×D` matrix per class.
    matrices: Vec<Vec<f64>>,
}

impl LinearOracleGenerator {
    pub fn new(channels: usize, matrices: Vec<Vec<f64>>) -> Result<Self> {
        if channels == 0 || matrices.is_empty() || matrices.iter().any(|m| m.len() != 3 * channels) {
            return Err(Error::Shape(format!("oracle needs 3x{channels} matrices")));
        }
        Ok(Self { channels, matrices })
    }

    /// Standard-normal matrices for every class.
    pub fn random(channels: usize, class_count: usize, seed: u64) -> Self {
        let matrices = (0..class_count)
            .map(|c| crate::rng::standard_normal_vec(&mut rng_for(seed, &[c as u64]), 3 * channels))
            .collect();
        Self { channels, matrices }
    }

    pub fn matrix(&self, class: usize) -> nalgebra::DMatrix<f64> {
        nalgebra::DMatrix::from_row_slice(3, self.channels, &self.matrices[class])
    }

    fn check_taps(taps: &TapSpec) -> Result<()> {
        match taps.taps.iter().find(|t| **t != FeatureTap::Image) {
            Some(t) => Err(Error::Config(format!("linear oracle only exposes the image tap, got {t:?}"))),
            None => Ok(()),
        }
    }
}

/// Direct per-pixel evaluation, independent of the graph machinery.
pub fn linear_oracle_generate(oracle: &LinearOracleGenerator, z: &LatentCode3D, y: &LabelMap) -> Result<Image> {
    check_pair(oracle, z, y)?;
    let (h, w) = (y.height(), y.width());
    let mut img = Image::filled(h, w, [0.0; 3]);
    for r in 0..h {
        for c in 0..w {
            let a = &oracle.matrices[y.get(r, c) as usize];
            for ch in 0..3 {
                let v = (0..oracle.channels).map(|d| a[ch * oracle.channels + d] * z.at(d, r, c)).sum();
                img.set(ch, r, c, v);
            }
        }
    }
    Ok(img)
}

impl SisGenerator for LinearOracleGenerator {
    fn latent_channels(&self) -> usize {
        self.channels
    }

    fn class_count(&self) -> usize {
        self.matrices.len()
    }

    fn blocks(&self) -> usize {
        1
    }

    fn record(&self, g: &mut Graph, latents: &[Var], labels: &[&LabelMap], taps: &TapSpec, want_image: bool) -> Result<Recorded> {
        Self::check_taps(taps)?;
        if latents.len() != 1 {
            return Err(Error::Shape("linear oracle takes a single latent tensor".into()));
        }
        let z = latents[0];
        let (n, _, h, w) = g.value(z).dims4();
        let hw = h * w;
        let mut acc: Option<Var> = None;
        for (class, m) in self.matrices.iter().enumerate() {
            let mut mask = vec![0.0; n * 3 * hw];
            let mut any = false;
            for (s, y) in labels.iter().enumerate() {
                for (p, &l) in y.labels().iter().enumerate() {
                    if l as usize == class {
                        any = true;
                        for ch in 0..3 {
                            mask[(s * 3 + ch) * hw + p] = 1.0;
                        }
                    }
                }
            }
            if !any {
                continue;
            }
            let wt = g.constant(Tensor::new(vec![3, self.channels, 1, 1], m.clone())?);
            let proj = g.conv(z, wt, None, ConvGeom::POINT)?;
            let mk = g.constant(Tensor::new(vec![n, 3, h, w], mask)?);
            let part = g.mul(proj, mk)?;
            acc = Some(match acc {
                None => part,
                Some(a) => g.add(a, part)?,
            });
        }
        let image = match acc {
            Some(a) => a,
            None => g.constant(Tensor::zeros(&[n, 3, h, w])),
        };
        Ok(Recorded {
            taps: taps.taps.iter().map(|_| image).collect(),
            image: want_image.then_some(image),
        })
    }

    fn latent_weight(&self, _taps: &TapSpec) -> Result<nalgebra::DMatrix<f64>> {
        let rows: Vec<f64> = self.matrices.concat();
        Ok(nalgebra::DMatrix::from_row_slice(3 * self.matrices.len(), self.channels, &rows))
    }

    fn parameter_hash(&self) -> String {
        let mut store = ParamStore::new();
        for (c, m) in self.matrices.iter().enumerate() {
            store.insert(format!("a{c}"), Tensor::new(vec![3, self.channels], m.clone()).expect("matrix"));
        }
        store.content_hash()
    }
}
