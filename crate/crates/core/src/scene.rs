//! Label maps, class masks, spatially replicated latent codes and the latent
//! edit arithmetic `z + α·v` (global) / `z + α·(M_c ⊙ v)` (local).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_for, standard_normal_vec};

/// Integer semantic layout; every label is `< class_count`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelMap {
    height: usize,
    width: usize,
    class_count: usize,
    labels: Vec<u16>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, class_count: usize, labels: Vec<u16>) -> Result<Self> {
        if height == 0 || width == 0 || class_count == 0 {
            return Err(Error::Dimension(format!(
                "label map {height}x{width} with {class_count} classes"
            )));
        }
        if labels.len() != height * width {
            return Err(Error::Shape(format!(
                "{} labels for a {height}x{width} map",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= class_count) {
            return Err(Error::ClassOutOfRange { class: bad as usize, count: class_count });
        }
        Ok(Self { height, width, class_count, labels })
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        class_count: usize,
        f: impl Fn(usize, usize) -> u16,
    ) -> Result<Self> {
        let labels = (0..height * width).map(|i| f(i / width, i % width)).collect();
        Self::new(height, width, class_count, labels)
    }

    pub fn uniform(height: usize, width: usize, class_count: usize, class: u16) -> Result<Self> {
        Self::from_fn(height, width, class_count, |_, _| class)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn labels(&self) -> &[u16] {
        &self.labels
    }

    pub fn get(&self, row: usize, col: usize) -> u16 {
        self.labels[row * self.width + col]
    }

    pub fn pixel_count_of(&self, class: usize) -> usize {
        self.labels.iter().filter(|&&l| l as usize == class).count()
    }

    pub fn class_fraction(&self, class: usize) -> f64 {
        self.pixel_count_of(class) as f64 / self.labels.len() as f64
    }

    /// Classes with at least one pixel, ascending.
    pub fn present_classes(&self) -> Vec<usize> {
        let mut seen = vec![false; self.class_count];
        for &l in &self.labels {
            seen[l as usize] = true;
        }
        (0..self.class_count).filter(|&c| seen[c]).collect()
    }

    /// One-hot encoding laid out as `[class, row, col]`.
    pub fn one_hot(&self) -> Vec<f64> {
        let hw = self.height * self.width;
        let mut out = vec![0.0; self.class_count * hw];
        for (p, &l) in self.labels.iter().enumerate() {
            out[l as usize * hw + p] = 1.0;
        }
        out
    }
}

/// Binary indicator of one class in a label map.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassMask {
    height: usize,
    width: usize,
    class_id: usize,
    values: Vec<u8>,
    pixel_count: usize,
}

impl ClassMask {
    fn from_values(height: usize, width: usize, class_id: usize, values: Vec<u8>) -> Self {
        let pixel_count = values.iter().map(|&v| v as usize).sum();
        Self { height, width, class_id, values, pixel_count }
    }

    /// Mask covering every pixel; `class_id` is informational.
    pub fn all_ones(height: usize, width: usize, class_id: usize) -> Self {
        Self::from_values(height, width, class_id, vec![1; height * width])
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        class_id: usize,
        f: impl Fn(usize, usize) -> bool,
    ) -> Self {
        let values = (0..height * width).map(|i| f(i / width, i % width) as u8).collect();
        Self::from_values(height, width, class_id, values)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn class_id(&self) -> usize {
        self.class_id
    }

    pub fn values(&self) -> &[u8] {
        &self.values
    }

    pub fn pixel_count(&self) -> usize {
        self.pixel_count
    }

    pub fn is_empty(&self) -> bool {
        self.pixel_count == 0
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.values[row * self.width + col] != 0
    }

    /// `1 - M`, keeping the class id.
    pub fn complement(&self) -> Self {
        let values = self.values.iter().map(|&v| 1 - v).collect();
        Self::from_values(self.height, self.width, self.class_id, values)
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.values.iter().map(|&v| v as f64).collect()
    }

    /// Pixelwise union of masks with equal dimensions.
    pub fn union(masks: &[&ClassMask]) -> Option<ClassMask> {
        let first = masks.first()?;
        let mut values = vec![0u8; first.values.len()];
        for m in masks {
            for (o, &v) in values.iter_mut().zip(&m.values) {
                *o |= v;
            }
        }
        Some(Self::from_values(first.height, first.width, first.class_id, values))
    }
}

/// Nearest-neighbour source index used for every resampling in the crate:
/// target index `i` of `dst` reads source index `i * src / dst`.
pub fn nearest_index(i: usize, src: usize, dst: usize) -> usize {
    i * src / dst
}

pub fn class_mask(y: &LabelMap, class: usize) -> Result<ClassMask> {
    if class >= y.class_count {
        return Err(Error::ClassOutOfRange { class, count: y.class_count });
    }
    let values = y.labels.iter().map(|&l| (l as usize == class) as u8).collect();
    Ok(ClassMask::from_values(y.height, y.width, class, values))
}

pub fn downsample_mask(mask: &ClassMask, target_height: usize, target_width: usize) -> Result<ClassMask> {
    if target_height == 0
        || target_width == 0
        || target_height > mask.height
        || target_width > mask.width
    {
        return Err(Error::Dimension(format!(
            "cannot resample a {}x{} mask to {target_height}x{target_width}",
            mask.height, mask.width
        )));
    }
    if target_height == mask.height && target_width == mask.width {
        return Ok(mask.clone());
    }
    let out = ClassMask::from_fn(target_height, target_width, mask.class_id, |r, c| {
        mask.get(
            nearest_index(r, mask.height, target_height),
            nearest_index(c, mask.width, target_width),
        )
    });
    Ok(out)
}

/// Direction in latent channel space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EditVector {
    values: Vec<f64>,
    unit_norm: bool,
}

impl EditVector {
    /// Normalizes to unit length. Fails on a zero vector.
    pub fn unit(values: Vec<f64>) -> Result<Self> {
        let norm = l2(&values);
        if !(norm > 0.0) || !norm.is_finite() {
            return Err(Error::Dimension("cannot normalize a zero or non-finite vector".into()));
        }
        Ok(Self { values: values.into_iter().map(|v| v / norm).collect(), unit_norm: true })
    }

    /// Accepts values that are already unit length (within 1e-5) without
    /// touching their bits.
    pub fn from_unit(values: Vec<f64>) -> Result<Self> {
        let norm = l2(&values);
        if !((norm - 1.0).abs() <= 1e-5) {
            return Err(Error::Dimension(format!("vector norm {norm} is not unit")));
        }
        Ok(Self { values, unit_norm: true })
    }

    /// Arbitrary-length vector, e.g. a composition of scaled directions.
    pub fn raw(values: Vec<f64>) -> Self {
        Self { values, unit_norm: false }
    }

    pub fn basis(channels: usize, index: usize) -> Self {
        let mut values = vec![0.0; channels];
        values[index] = 1.0;
        Self { values, unit_norm: true }
    }

    pub fn channels(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn is_unit(&self) -> bool {
        self.unit_norm
    }

    pub fn norm(&self) -> f64 {
        l2(&self.values)
    }
}

pub(crate) fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `H×W×D` latent tensor stored channel-major (`[d][row][col]`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentCode3D {
    height: usize,
    width: usize,
    channels: usize,
    values: Vec<f64>,
    base_vector: Option<Vec<f64>>,
}

/// Base vector drawn for `seed`; shared by [`build_latent`] and [`GaussianLatentSampler`].
pub fn latent_base_vector(seed: u64, channels: usize) -> Vec<f64> {
    let mut rng = rng_for(seed, &[0x1a7e_17]);
    standard_normal_vec(&mut rng, channels)
}

pub fn build_latent(seed: u64, channels: usize, height: usize, width: usize) -> Result<LatentCode3D> {
    if channels == 0 {
        return Err(Error::Dimension("latent needs at least one channel".into()));
    }
    LatentCode3D::replicate(latent_base_vector(seed, channels), height, width)
}

impl LatentCode3D {
    pub fn replicate(base: Vec<f64>, height: usize, width: usize) -> Result<Self> {
        if base.is_empty() || height == 0 || width == 0 {
            return Err(Error::Dimension(format!(
                "latent {height}x{width}x{}",
                base.len()
            )));
        }
        let hw = height * width;
        let mut values = Vec::with_capacity(base.len() * hw);
        for &b in &base {
            values.extend(std::iter::repeat_n(b, hw));
        }
        Ok(Self { height, width, channels: base.len(), values, base_vector: Some(base) })
    }

    pub fn from_values(height: usize, width: usize, channels: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width * channels || values.is_empty() {
            return Err(Error::Shape(format!(
                "{} values for a {height}x{width}x{channels} latent",
                values.len()
            )));
        }
        Ok(Self { height, width, channels, values, base_vector: None })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Result<Self> {
        Self::replicate(vec![0.0; channels], height, width)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn base_vector(&self) -> Option<&[f64]> {
        self.base_vector.as_deref()
    }

    pub fn at(&self, channel: usize, row: usize, col: usize) -> f64 {
        self.values[(channel * self.height + row) * self.width + col]
    }

    /// Channel fiber at one pixel.
    pub fn fiber(&self, row: usize, col: usize) -> Vec<f64> {
        (0..self.channels).map(|d| self.at(d, row, col)).collect()
    }
}

/// Adds `α·v` everywhere, or `α·(M ⊙ v)` when a mask is given. The input is
/// left untouched. Masked pixels outside `M` keep their exact input bits.
pub fn apply_direction(
    z: &LatentCode3D,
    v: &EditVector,
    alpha: f64,
    mask: Option<&ClassMask>,
) -> Result<LatentCode3D> {
    if v.channels() != z.channels {
        return Err(Error::Shape(format!(
            "direction has {} channels, latent has {}",
            v.channels(),
            z.channels
        )));
    }
    if let Some(m) = mask {
        if m.height != z.height || m.width != z.width {
            return Err(Error::Shape(format!(
                "mask {}x{} vs latent {}x{}",
                m.height, m.width, z.height, z.width
            )));
        }
    }
    let hw = z.height * z.width;
    let mut values = z.values.clone();
    for (d, &vd) in v.values().iter().enumerate() {
        let plane = &mut values[d * hw..(d + 1) * hw];
        match mask {
            None => plane.iter_mut().for_each(|x| *x += alpha * vd),
            Some(m) => {
                for (x, &mv) in plane.iter_mut().zip(&m.values) {
                    if mv != 0 {
                        *x += alpha * vd;
                    }
                }
            }
        }
    }
    let full_cover = mask.is_none_or(|m| m.pixel_count == hw);
    let base_vector = match (&z.base_vector, full_cover) {
        (Some(b), true) => Some(b.iter().zip(v.values()).map(|(b, vd)| b + alpha * vd).collect()),
        _ => None,
    };
    Ok(LatentCode3D { height: z.height, width: z.width, channels: z.channels, values, base_vector })
}

/// Source of base latent vectors indexed by draw number.
pub trait LatentSampler {
    fn draw(&self, index: u64) -> Vec<f64>;
}

#[derive(Clone, Copy, Debug)]
pub struct GaussianLatentSampler {
    pub channels: usize,
    pub seed: u64,
}

impl LatentSampler for GaussianLatentSampler {
    fn draw(&self, index: u64) -> Vec<f64> {
        latent_base_vector(derive_seed(self.seed, &[index]), self.channels)
    }
}

/// Monte-Carlo estimate of `E‖z‖₂` over base vectors, i.e. the edit bound `n`.
pub fn average_channel_norm(sampler: &dyn LatentSampler, samples: usize) -> f64 {
    let samples = samples.max(1);
    (0..samples as u64).map(|i| l2(&sampler.draw(i))).sum::<f64>() / samples as f64
}
