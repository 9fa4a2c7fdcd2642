//! Adversarial training of the toy generator, a small segmenter for the
//! label-alignment monitor, and the checkpoint container built on both.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::container::{config_hash, Container};
use crate::error::{Error, Result};
use crate::generator::{one_hot_batch, GeneratorConfig, TapSpec, ToyGenerator};
use crate::image::Image;
use crate::nn::{conv_weight, Adam, BoundParams, ParamStore};
use crate::rng::{derive_seed, rng_for};
use crate::scene::{build_latent, LabelMap, LatentCode3D};
use crate::synth::{SceneSampler, SyntheticSceneSpec};
use crate::tensor::{ConvGeom, Tensor};

const LEAK: f64 = 0.2;
const STRIDE2: ConvGeom = ConvGeom { stride: 2, pad: 1 };

/// Conditional patch discriminator on `concat(image, one-hot labels)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Discriminator {
    class_count: usize,
    width: usize,
    params: ParamStore,
}

impl Discriminator {
    pub fn init(class_count: usize, width: usize, seed: u64) -> Self {
        let mut rng = rng_for(seed, &[0xd15c]);
        let mut p = ParamStore::new();
        let layers = [(width, 3 + class_count), (2 * width, width), (2 * width, 2 * width), (1, 2 * width)];
        for (i, &(cout, cin)) in layers.iter().enumerate() {
            p.insert(format!("l{i}.weight"), conv_weight(&mut rng, cout, cin, 3, if i == 3 { 0.5 } else { 1.0 }));
            p.insert(format!("l{i}.bias"), Tensor::zeros(&[cout]));
        }
        Self { class_count, width, params: p }
    }

    pub fn from_parts(class_count: usize, width: usize, params: ParamStore) -> Result<Self> {
        let reference = Self::init(class_count, width, 0);
        check_params(&reference.params, &params, "discriminator")?;
        Ok(Self { class_count, width, params })
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Patch logits `[N, 1, H/4, W/4]`.
    pub fn record(&self, g: &mut Graph, p: &BoundParams, image: Var, onehot: Var) -> Result<Var> {
        let mut x = g.concat(&[image, onehot])?;
        let geoms = [ConvGeom::SAME3, STRIDE2, STRIDE2, ConvGeom::SAME3];
        for (i, geom) in geoms.into_iter().enumerate() {
            x = g.conv(x, p.var(&format!("l{i}.weight")), Some(p.var(&format!("l{i}.bias"))), geom)?;
            if i < 3 {
                x = g.leaky_relu(x, LEAK);
            }
        }
        Ok(x)
    }
}

fn check_params(reference: &ParamStore, got: &ParamStore, what: &str) -> Result<()> {
    if reference.len() != got.len() {
        return Err(Error::Format(format!("{what}: {} tensors, expected {}", got.len(), reference.len())));
    }
    for (name, t) in reference.iter() {
        match got.get(name) {
            Some(p) if p.shape() == t.shape() => {}
            _ => return Err(Error::Format(format!("{what}: parameter {name} missing or misshapen"))),
        }
    }
    Ok(())
}

/// `mean(relu(1 - real)) + mean(relu(1 + fake))`.
pub fn hinge_discriminator_loss(g: &mut Graph, real: Var, fake: Var) -> Var {
    let r = g.scale(real, -1.0);
    let r = g.add_scalar(r, 1.0);
    let r = g.relu(r);
    let r = g.mean(r);
    let f = g.add_scalar(fake, 1.0);
    let f = g.relu(f);
    let f = g.mean(f);
    g.sum_scalars(&[r, f])
}

/// `-mean(fake)`.
pub fn hinge_generator_loss(g: &mut Graph, fake: Var) -> Var {
    let m = g.mean(fake);
    g.scale(m, -1.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr_generator: f64,
    pub lr_discriminator: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub discriminator_width: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 20_000,
            batch_size: 16,
            lr_generator: 2e-4,
            lr_discriminator: 4e-4,
            beta1: 0.0,
            beta2: 0.99,
            discriminator_width: 32,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLogEntry {
    pub step: usize,
    pub loss_discriminator: f64,
    pub loss_generator: f64,
}

pub struct TrainedGan {
    pub generator: ToyGenerator,
    pub discriminator: Discriminator,
}

fn real_batch(sampler: &SceneSampler, start: u64, n: usize) -> Result<(Vec<Image>, Vec<LabelMap>)> {
    let mut imgs = Vec::with_capacity(n);
    let mut maps = Vec::with_capacity(n);
    for i in 0..n as u64 {
        let (x, y) = sampler.pair(start + i)?;
        imgs.push(x);
        maps.push(y);
    }
    Ok((imgs, maps))
}

fn latent_tensor(zs: &[LatentCode3D]) -> Result<Tensor> {
    let parts: Vec<Tensor> = zs
        .iter()
        .map(|z| Tensor::new(vec![1, z.channels(), z.height(), z.width()], z.values().to_vec()))
        .collect::<Result<_>>()?;
    Tensor::cat_batch(&parts)
}

/// Hinge-loss GAN training on procedurally rendered scenes. Each step
/// updates the generator against the current discriminator, then the
/// discriminator on the same fake batch.
pub fn train_generator(
    spec: &SyntheticSceneSpec,
    gen_config: &GeneratorConfig,
    cfg: &TrainConfig,
    mut log: impl FnMut(&TrainLogEntry),
) -> Result<TrainedGan> {
    spec.validate()?;
    gen_config.validate()?;
    if spec.height != gen_config.image_size || spec.width != gen_config.image_size {
        return Err(Error::Config(format!(
            "scene canvas {}x{} vs generator image size {}",
            spec.height, spec.width, gen_config.image_size
        )));
    }
    if spec.class_count != gen_config.class_count {
        return Err(Error::Config("scene and generator class counts differ".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let mut generator = ToyGenerator::init(gen_config.clone(), derive_seed(cfg.seed, &[1]))?;
    let mut disc = Discriminator::init(gen_config.class_count, cfg.discriminator_width, derive_seed(cfg.seed, &[2]));
    let mut opt_g = Adam::new(cfg.lr_generator, cfg.beta1, cfg.beta2);
    let mut opt_d = Adam::new(cfg.lr_discriminator, cfg.beta1, cfg.beta2);
    let sampler = SceneSampler { spec: *spec, seed: derive_seed(cfg.seed, &[3]) };
    let (d, size) = (gen_config.latent_channels, gen_config.image_size);

    for step in 0..cfg.steps {
        let (reals, maps) = real_batch(&sampler, (step * cfg.batch_size) as u64, cfg.batch_size)?;
        let zs: Vec<LatentCode3D> = (0..cfg.batch_size)
            .map(|i| build_latent(derive_seed(cfg.seed, &[4, step as u64, i as u64]), d, size, size))
            .collect::<Result<_>>()?;
        let map_refs: Vec<&LabelMap> = maps.iter().collect();
        let onehot = one_hot_batch(&map_refs)?;

        // generator update
        let mut g = Graph::new();
        let gp = generator.params().bind(&mut g, true);
        let dp = disc.params.bind(&mut g, false);
        let z = g.constant(latent_tensor(&zs)?);
        let rec = generator.record_with(&mut g, &gp, &[z], &map_refs, &TapSpec::new(vec![]), true)?;
        let fake = rec.image.expect("image");
        let oh = g.constant(onehot.clone());
        let logits = disc.record(&mut g, &dp, fake, oh)?;
        let loss_g = hinge_generator_loss(&mut g, logits);
        let lg = g.value(loss_g).item();
        if !lg.is_finite() {
            return Err(Error::Diverged { step, what: "generator loss".into() });
        }
        let mut grads = g.backward(loss_g);
        let gg = gp.gradients(&mut grads, generator.params());
        let fake_value = g.value(fake).clone();
        drop(g);
        opt_g.step(generator.params_mut(), &gg);

        // discriminator update
        let mut g = Graph::new();
        let dp = disc.params.bind(&mut g, true);
        let oh = g.constant(onehot);
        let real = g.constant(Image::batch(&reals.iter().collect::<Vec<_>>())?);
        let fake = g.constant(fake_value);
        let lr = disc.record(&mut g, &dp, real, oh)?;
        let lf = disc.record(&mut g, &dp, fake, oh)?;
        let loss_d = hinge_discriminator_loss(&mut g, lr, lf);
        let ld = g.value(loss_d).item();
        if !ld.is_finite() {
            return Err(Error::Diverged { step, what: "discriminator loss".into() });
        }
        let mut grads = g.backward(loss_d);
        let dg = dp.gradients(&mut grads, &disc.params);
        opt_d.step(&mut disc.params, &dg);
        if !generator.params().all_finite() || !disc.params.all_finite() {
            return Err(Error::Diverged { step, what: "parameters".into() });
        }
        log(&TrainLogEntry { step, loss_discriminator: ld, loss_generator: lg });
    }
    Ok(TrainedGan { generator, discriminator: disc })
}

/// Per-pixel classifier: two full-resolution convs, one half-resolution
/// context conv, and a fused head. A row-coordinate channel is appended to
/// the RGB input.
#[derive(Clone, Debug, PartialEq)]
pub struct Segmenter {
    class_count: usize,
    width: usize,
    params: ParamStore,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmenterConfig {
    pub width: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for SegmenterConfig {
    fn default() -> Self {
        Self { width: 16, steps: 400, batch_size: 8, lr: 3e-3, seed: 0 }
    }
}

impl Segmenter {
    pub fn init(class_count: usize, width: usize, seed: u64) -> Self {
        let mut rng = rng_for(seed, &[0x5e6]);
        let mut p = ParamStore::new();
        let layers = [("c0", width, 4), ("c1", width, width), ("ctx", width, width), ("head", class_count, 2 * width)];
        for (name, cout, cin) in layers {
            p.insert(format!("{name}.weight"), conv_weight(&mut rng, cout, cin, 3, 1.0));
            p.insert(format!("{name}.bias"), Tensor::zeros(&[cout]));
        }
        Self { class_count, width, params: p }
    }

    pub fn from_parts(class_count: usize, width: usize, params: ParamStore) -> Result<Self> {
        check_params(&Self::init(class_count, width, 0).params, &params, "segmenter")?;
        Ok(Self { class_count, width, params })
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn width(&self) -> usize {
        self.width
    }

    fn input(images: &[&Image]) -> Result<Tensor> {
        let parts: Vec<Tensor> = images
            .iter()
            .map(|img| {
                let (h, w) = (img.height(), img.width());
                let mut data = img.data().to_vec();
                data.extend((0..h).flat_map(|r| std::iter::repeat_n(2.0 * (r as f64 + 0.5) / h as f64 - 1.0, w)));
                Tensor::new(vec![1, 4, h, w], data)
            })
            .collect::<Result<_>>()?;
        Tensor::cat_batch(&parts)
    }

    fn record(&self, g: &mut Graph, p: &BoundParams, x: Var) -> Result<Var> {
        let conv = |g: &mut Graph, x: Var, name: &str| {
            g.conv(x, p.var(&format!("{name}.weight")), Some(p.var(&format!("{name}.bias"))), ConvGeom::SAME3)
        };
        let (_, _, h, w) = g.value(x).dims4();
        let a = conv(g, x, "c0")?;
        let a = g.leaky_relu(a, LEAK);
        let a = conv(g, a, "c1")?;
        let a = g.leaky_relu(a, LEAK);
        let low = g.avg_pool2(a);
        let low = conv(g, low, "ctx")?;
        let low = g.leaky_relu(low, LEAK);
        let up = g.resize(low, h, w);
        let fused = g.concat(&[a, up])?;
        conv(g, fused, "head")
    }

    pub fn predict(&self, image: &Image) -> Result<LabelMap> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let x = g.constant(Self::input(&[image])?);
        let logits = self.record(&mut g, &p, x)?;
        let t = g.value(logits);
        let (_, c, h, w) = t.dims4();
        let hw = h * w;
        let labels = (0..hw)
            .map(|px| {
                (0..c).max_by(|&a, &b| t.data()[a * hw + px].total_cmp(&t.data()[b * hw + px])).expect("classes") as u16
            })
            .collect();
        LabelMap::new(h, w, c, labels)
    }
}

/// Maps an image to a predicted label map.
pub trait LabelPredictor {
    fn predict_labels(&self, image: &Image) -> Result<LabelMap>;
}

impl LabelPredictor for Segmenter {
    fn predict_labels(&self, image: &Image) -> Result<LabelMap> {
        self.predict(image)
    }
}

/// Returns the exact label map of any image it was built with.
pub struct OracleSegmenter {
    pairs: Vec<(Image, LabelMap)>,
}

impl OracleSegmenter {
    pub fn new(pairs: Vec<(Image, LabelMap)>) -> Self {
        Self { pairs }
    }
}

impl LabelPredictor for OracleSegmenter {
    fn predict_labels(&self, image: &Image) -> Result<LabelMap> {
        self.pairs
            .iter()
            .find(|(x, _)| x == image)
            .map(|(_, y)| y.clone())
            .ok_or_else(|| Error::Config("oracle segmenter has no ground truth for this image".into()))
    }
}

/// Softmax cross-entropy training on real renders.
pub fn train_segmenter(spec: &SyntheticSceneSpec, cfg: &SegmenterConfig, mut log: impl FnMut(usize, f64)) -> Result<Segmenter> {
    spec.validate()?;
    let mut seg = Segmenter::init(spec.class_count, cfg.width, derive_seed(cfg.seed, &[1]));
    let mut opt = Adam::new(cfg.lr, 0.9, 0.999);
    let sampler = SceneSampler { spec: *spec, seed: derive_seed(cfg.seed, &[2]) };
    for step in 0..cfg.steps {
        let (imgs, maps) = real_batch(&sampler, (step * cfg.batch_size) as u64, cfg.batch_size)?;
        let mut g = Graph::new();
        let p = seg.params.bind(&mut g, true);
        let x = g.constant(Segmenter::input(&imgs.iter().collect::<Vec<_>>())?);
        let logits = seg.record(&mut g, &p, x)?;
        let labels: Vec<usize> = maps.iter().flat_map(|y| y.labels().iter().map(|&l| l as usize)).collect();
        let loss = g.softmax_ce(logits, &labels)?;
        let lv = g.value(loss).item();
        if !lv.is_finite() {
            return Err(Error::Diverged { step, what: "segmenter loss".into() });
        }
        let mut grads = g.backward(loss);
        let sg = p.gradients(&mut grads, &seg.params);
        opt.step(&mut seg.params, &sg);
        log(step, lv);
    }
    Ok(seg)
}

/// Trained (or initial) model bundle with its manifest fields.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub generator: ToyGenerator,
    pub discriminator: Option<Discriminator>,
    pub segmenter: Option<Segmenter>,
    pub seed: u64,
    /// Hash of the experiment configuration that produced this checkpoint.
    pub experiment_hash: String,
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    generator: GeneratorConfig,
    config_hash: String,
    experiment_hash: String,
    seed: u64,
    discriminator_width: Option<usize>,
    segmenter_width: Option<usize>,
}

impl Checkpoint {
    pub fn to_container(&self) -> Result<Container> {
        let cfg = self.generator.config();
        let meta = CheckpointMeta {
            generator: cfg.clone(),
            config_hash: config_hash(cfg)?,
            experiment_hash: self.experiment_hash.clone(),
            seed: self.seed,
            discriminator_width: self.discriminator.as_ref().map(Discriminator::width),
            segmenter_width: self.segmenter.as_ref().map(Segmenter::width),
        };
        let mut tensors = ParamStore::new();
        for (k, t) in self.generator.params().iter() {
            tensors.insert(format!("generator.{k}"), t.clone());
        }
        if let Some(d) = &self.discriminator {
            for (k, t) in d.params.iter() {
                tensors.insert(format!("discriminator.{k}"), t.clone());
            }
        }
        if let Some(s) = &self.segmenter {
            for (k, t) in s.params.iter() {
                tensors.insert(format!("segmenter.{k}"), t.clone());
            }
        }
        Ok(Container::new("checkpoint", serde_json::to_value(meta)?, tensors))
    }

    pub fn from_container(c: Container) -> Result<Self> {
        let c = c.expect_kind("checkpoint")?;
        let meta: CheckpointMeta = serde_json::from_value(c.meta)?;
        if config_hash(&meta.generator)? != meta.config_hash {
            return Err(Error::Integrity("checkpoint config hash does not match its generator config".into()));
        }
        let part = |prefix: &str| {
            let mut p = ParamStore::new();
            for (k, t) in c.tensors.iter() {
                if let Some(rest) = k.strip_prefix(prefix) {
                    p.insert(rest, t.clone());
                }
            }
            p
        };
        let classes = meta.generator.class_count;
        let generator = ToyGenerator::from_parts(meta.generator, part("generator."))?;
        let discriminator =
            meta.discriminator_width.map(|w| Discriminator::from_parts(classes, w, part("discriminator."))).transpose()?;
        let segmenter = meta.segmenter_width.map(|w| Segmenter::from_parts(classes, w, part("segmenter."))).transpose()?;
        Ok(Self { generator, discriminator, segmenter, seed: meta.seed, experiment_hash: meta.experiment_hash })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.to_container()?.to_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::from_container(Container::from_bytes(bytes)?)
    }

    /// SHA-256 of the serialized checkpoint.
    pub fn hash(&self) -> Result<String> {
        self.to_container()?.hash()
    }
}
