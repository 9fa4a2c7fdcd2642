//! Procedural street-like scenes with exact label maps.
//!
//! Layouts combine a sky/ground split, a road band (stripes), buildings
//! (nested rectangles, windows inside) and trees (blobs). Every class has
//! three discrete colour modes, continuous jitter and a class-specific
//! texture whose frequency is drawn from a small discrete set, so each class
//! genuinely has several appearance modes for a generator to learn.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::rng::{derive_seed, rng_for, uniform, SeededRng};
use crate::scene::LabelMap;

pub const CLASS_NAMES: [&str; 6] = ["sky", "ground", "building", "window", "tree", "road"];

pub const SKY: u16 = 0;
pub const GROUND: u16 = 1;
pub const BUILDING: u16 = 2;
pub const WINDOW: u16 = 3;
pub const TREE: u16 = 4;
pub const ROAD: u16 = 5;

const PALETTES: [[[f64; 3]; 3]; 6] = [
    [[0.45, 0.65, 0.95], [0.78, 0.86, 0.96], [0.58, 0.46, 0.86]],
    [[0.35, 0.70, 0.25], [0.86, 0.80, 0.46], [0.62, 0.78, 0.38]],
    [[0.72, 0.30, 0.25], [0.58, 0.58, 0.60], [0.82, 0.66, 0.50]],
    [[0.10, 0.15, 0.38], [0.96, 0.90, 0.28], [0.04, 0.04, 0.06]],
    [[0.10, 0.40, 0.12], [0.86, 0.46, 0.10], [0.42, 0.25, 0.32]],
    [[0.24, 0.24, 0.28], [0.42, 0.40, 0.48], [0.50, 0.36, 0.20]],
];

/// Stripe frequencies (cycles across the canvas width) of the road texture.
pub const ROAD_FREQUENCIES: [f64; 5] = [2.0, 3.0, 4.0, 6.0, 8.0];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayoutRule {
    /// Sky/ground split with road band, buildings, windows and trees.
    Street,
    /// Like `Street` but every optional element is always drawn.
    DenseStreet,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticSceneSpec {
    pub class_count: usize,
    pub height: usize,
    pub width: usize,
    pub layout: LayoutRule,
    pub appearance_seed: u64,
}

impl Default for SyntheticSceneSpec {
    fn default() -> Self {
        Self { class_count: 6, height: 64, width: 64, layout: LayoutRule::Street, appearance_seed: 0 }
    }
}

impl SyntheticSceneSpec {
    pub fn with_size(size: usize) -> Self {
        Self { height: size, width: size, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..=CLASS_NAMES.len()).contains(&self.class_count) {
            return Err(Error::Config(format!("class_count must be in 2..=6, got {}", self.class_count)));
        }
        if self.height < 8 || self.width < 8 {
            return Err(Error::Config(format!("canvas {}x{} too small", self.height, self.width)));
        }
        Ok(())
    }

    pub fn class_name(&self, class: usize) -> &'static str {
        CLASS_NAMES[class]
    }
}

fn layout_rng(seed: u64) -> SeededRng {
    rng_for(seed, &[0x4c41_594f])
}

/// Label map only; identical to the label map of [`render_synthetic_pair`].
pub fn render_layout(spec: &SyntheticSceneSpec, seed: u64) -> Result<LabelMap> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);
    let (hf, wf) = (h as f64, w as f64);
    let dense = spec.layout == LayoutRule::DenseStreet;
    let mut rng = layout_rng(seed);
    let mut labels = vec![SKY; h * w];

    let horizon = (uniform(&mut rng, 0.35, 0.6) * hf) as usize;
    for r in horizon..h {
        labels[r * w..(r + 1) * w].fill(GROUND);
    }

    let road = dense || rng.random::<f64>() < 0.8;
    let (road_top, road_bot) = {
        let span = (h - horizon) as f64;
        let top = horizon + (uniform(&mut rng, 0.1, 0.45) * span) as usize;
        let thick = ((uniform(&mut rng, 0.2, 0.35) * span) as usize).max(2);
        (top.min(h - 1), (top + thick).min(h))
    };
    if road {
        for r in road_top..road_bot {
            labels[r * w..(r + 1) * w].fill(ROAD);
        }
    }

    let n_buildings = if dense { 2 } else { rng.random_range(0..=3) };
    let mut first_building = None;
    for _ in 0..n_buildings {
        let bw = (uniform(&mut rng, 0.16, 0.32) * wf) as usize;
        let bh = (uniform(&mut rng, 0.2, 0.42) * hf) as usize;
        let x0 = rng.random_range(0..w.saturating_sub(bw).max(1));
        let y1 = (horizon + (0.04 * hf) as usize).min(h);
        let y0 = y1.saturating_sub(bh);
        let rect = (y0, y1, x0, (x0 + bw).min(w));
        fill_rect(&mut labels, w, rect, BUILDING);
        first_building.get_or_insert(rect);
    }
    if let Some((y0, y1, x0, x1)) = first_building {
        if dense || rng.random::<f64>() < 0.8 {
            let (ih, iw) = ((y1 - y0) / 4, (x1 - x0) / 4);
            if y1 - y0 > 2 * ih + 1 && x1 - x0 > 2 * iw + 1 {
                fill_rect(&mut labels, w, (y0 + ih, y1 - ih, x0 + iw, x1 - iw), WINDOW);
            }
        }
    }

    let n_trees = if dense { 1 } else { rng.random_range(0..=2) };
    for _ in 0..n_trees {
        let rx = uniform(&mut rng, 0.07, 0.14) * wf;
        let ry = rx * uniform(&mut rng, 1.0, 1.6);
        let cx = uniform(&mut rng, 0.0, wf);
        let cy = horizon as f64 - 0.4 * ry;
        for r in 0..h {
            for c in 0..w {
                let dx = (c as f64 + 0.5 - cx) / rx;
                let dy = (r as f64 + 0.5 - cy) / ry;
                if dx * dx + dy * dy <= 1.0 {
                    labels[r * w + c] = TREE;
                }
            }
        }
    }

    // Classes beyond the configured count fall back to the surface below them.
    for (p, l) in labels.iter_mut().enumerate() {
        if *l as usize >= spec.class_count {
            *l = if p / w < horizon { SKY } else { GROUND.min(spec.class_count as u16 - 1) };
        }
    }
    LabelMap::new(h, w, spec.class_count, labels)
}

fn fill_rect(labels: &mut [u16], w: usize, (y0, y1, x0, x1): (usize, usize, usize, usize), class: u16) {
    for r in y0..y1 {
        labels[r * w + x0..r * w + x1].fill(class);
    }
}

/// Appearance of one class in one scene.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassAppearance {
    pub mode: usize,
    pub color: [f64; 3],
    pub frequency: f64,
    pub phase: f64,
    pub phase2: f64,
}

pub fn class_appearance(spec: &SyntheticSceneSpec, seed: u64, class: usize) -> ClassAppearance {
    let mut rng = rng_for(derive_seed(spec.appearance_seed, &[seed]), &[0xa99e, class as u64]);
    let mode = rng.random_range(0..3);
    let mut color = PALETTES[class][mode];
    for c in &mut color {
        *c += uniform(&mut rng, -0.05, 0.05);
    }
    let freqs: &[f64] = match class as u16 {
        GROUND => &[3.0, 5.0, 7.0],
        BUILDING => &[4.0, 6.0, 8.0],
        TREE => &[4.0, 6.0],
        ROAD => &ROAD_FREQUENCIES,
        _ => &[1.0],
    };
    let frequency = freqs[rng.random_range(0..freqs.len())];
    let phase = uniform(&mut rng, 0.0, std::f64::consts::TAU);
    let phase2 = uniform(&mut rng, 0.0, std::f64::consts::TAU);
    ClassAppearance { mode, color, frequency, phase, phase2 }
}

fn shade(class: u16, a: &ClassAppearance, r: usize, c: usize, h: usize, w: usize) -> [f64; 3] {
    use std::f64::consts::TAU;
    let (y, x) = ((r as f64 + 0.5) / h as f64, (c as f64 + 0.5) / w as f64);
    let mut out = a.color;
    match class {
        SKY => out.iter_mut().for_each(|v| *v += 0.12 * (0.5 - y)),
        GROUND => {
            let t = 0.06 * (TAU * a.frequency * (x + y) + a.phase).sin();
            out.iter_mut().for_each(|v| *v += t);
        }
        BUILDING => {
            let t = 1.0 + 0.15 * (TAU * a.frequency * y + a.phase).sin();
            out.iter_mut().for_each(|v| *v *= t);
        }
        TREE => {
            let t = 0.08 * (TAU * a.frequency * x + a.phase).sin() * (TAU * a.frequency * y + a.phase2).sin();
            out.iter_mut().for_each(|v| *v += t);
        }
        ROAD => {
            let t = 0.12 * (TAU * a.frequency * x + a.phase).sin();
            out.iter_mut().for_each(|v| *v += t);
        }
        _ => {}
    }
    out
}

/// Deterministic `(image, label map)` pair for `seed`.
pub fn render_synthetic_pair(spec: &SyntheticSceneSpec, seed: u64) -> Result<(Image, LabelMap)> {
    let y = render_layout(spec, seed)?;
    let (h, w) = (spec.height, spec.width);
    let looks: Vec<ClassAppearance> = (0..spec.class_count).map(|c| class_appearance(spec, seed, c)).collect();
    let mut img = Image::filled(h, w, [0.0; 3]);
    for r in 0..h {
        for c in 0..w {
            let l = y.get(r, c);
            let rgb = shade(l, &looks[l as usize], r, c, h, w);
            for (ch, v) in rgb.iter().enumerate() {
                img.set(ch, r, c, (2.0 * v - 1.0).clamp(-1.0, 1.0));
            }
        }
    }
    Ok((img, y))
}

/// Indexed source of label maps for discovery, evaluation and GANSpace.
pub trait LabelMapSource {
    fn label_map(&self, index: u64) -> Result<LabelMap>;
}

#[derive(Clone, Copy, Debug)]
pub struct SceneSampler {
    pub spec: SyntheticSceneSpec,
    pub seed: u64,
}

impl SceneSampler {
    pub fn scene_seed(&self, index: u64) -> u64 {
        derive_seed(self.seed, &[index])
    }

    pub fn pair(&self, index: u64) -> Result<(Image, LabelMap)> {
        render_synthetic_pair(&self.spec, self.scene_seed(index))
    }
}

impl LabelMapSource for SceneSampler {
    fn label_map(&self, index: u64) -> Result<LabelMap> {
        render_layout(&self.spec, self.scene_seed(index))
    }
}

/// Cycles through a fixed list of maps.
pub struct FixedMaps(pub Vec<LabelMap>);

impl LabelMapSource for FixedMaps {
    fn label_map(&self, index: u64) -> Result<LabelMap> {
        Ok(self.0[(index as usize) % self.0.len()].clone())
    }
}
