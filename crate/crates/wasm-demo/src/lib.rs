//! Browser demo over the core crate. `www/index.html` drives three
//! operations: draw a scene from a seed, pick the class under the cursor,
//! and slide one of that class's directions.
//!
//! Without artifacts the demo uses an untrained generator with SeFa
//! directions; [`Demo::from_artifacts`] takes a checkpoint and archive
//! written by the harness.

use wasm_bindgen::prelude::*;

use semedit_core::directions::{sefa_direction_set, DirectionSet, DirectionsArchive, Method};
use semedit_core::discovery::DiscoveryConfig;
use semedit_core::editing::{apply_edit_stack, n_max, EditSpec};
use semedit_core::generator::{generate, GeneratorConfig, SisGenerator, TapSpec, ToyGenerator};
use semedit_core::image::Image;
use semedit_core::rng::derive_seed;
use semedit_core::scene::{build_latent, LabelMap, LatentCode3D};
use semedit_core::synth::{render_layout, SyntheticSceneSpec};
use semedit_core::training::Checkpoint;

const K: usize = 5;

fn js_err(e: semedit_core::Error) -> String {
    e.to_string()
}

#[wasm_bindgen]
pub struct Demo {
    generator: ToyGenerator,
    spec: SyntheticSceneSpec,
    sets: Vec<DirectionSet>,
    bound: f64,
    label_map: LabelMap,
    latent: LatentCode3D,
}

#[wasm_bindgen]
impl Demo {
    /// Untrained generator of `size` pixels with SeFa directions.
    #[wasm_bindgen(constructor)]
    pub fn new(size: usize, seed: u64) -> Result<Demo, String> {
        let spec = SyntheticSceneSpec::with_size(size);
        let cfg = GeneratorConfig {
            class_count: spec.class_count,
            latent_channels: 8,
            blocks: 2,
            width: 8,
            hidden: 8,
            image_size: size,
        };
        let generator = ToyGenerator::init(cfg, seed).map_err(js_err)?;
        let taps = TapSpec::norm_layers(2);
        let sets = (0..spec.class_count)
            .map(|c| sefa_direction_set(&generator, c, &taps, K))
            .collect::<semedit_core::Result<Vec<_>>>()
            .map_err(js_err)?;
        Self::assemble(generator, spec, sets, 3.0)
    }

    /// Checkpoint plus archive bytes; `method` picks the direction sets.
    pub fn from_artifacts(checkpoint: &[u8], archive: &[u8], method: &str) -> Result<Demo, String> {
        let ck = Checkpoint::from_bytes(checkpoint).map_err(js_err)?;
        let archive = DirectionsArchive::from_bytes(archive, &ck.hash().map_err(js_err)?).map_err(js_err)?;
        let method = Method::parse(method).map_err(js_err)?;
        let sets: Vec<DirectionSet> = archive.records.into_iter().filter(|r| r.method == method).collect();
        let generator = ck.generator;
        let c = generator.config();
        let spec = SyntheticSceneSpec { class_count: c.class_count, ..SyntheticSceneSpec::with_size(c.image_size) };
        let bound = DiscoveryConfig::default().resolve_alpha_bound(generator.latent_channels(), ck.seed);
        Self::assemble(generator, spec, sets, bound)
    }

    fn assemble(generator: ToyGenerator, spec: SyntheticSceneSpec, sets: Vec<DirectionSet>, n: f64) -> Result<Demo, String> {
        let label_map = render_layout(&spec, 0).map_err(js_err)?;
        let latent = build_latent(0, generator.latent_channels(), label_map.height(), label_map.width()).map_err(js_err)?;
        Ok(Demo { generator, spec, sets, bound: n_max(n), label_map, latent })
    }

    pub fn size(&self) -> usize {
        self.label_map.width()
    }

    pub fn directions(&self) -> usize {
        K
    }

    pub fn alpha_bound(&self) -> f64 {
        self.bound
    }

    /// Draws a new layout and latent code from `seed`.
    pub fn new_scene(&mut self, seed: u64) -> Result<(), String> {
        self.label_map = render_layout(&self.spec, seed).map_err(js_err)?;
        let d = self.generator.latent_channels();
        self.latent = build_latent(derive_seed(seed, &[0x5ce]), d, self.label_map.height(), self.label_map.width())
            .map_err(js_err)?;
        Ok(())
    }

    /// Class id at a pixel.
    pub fn class_at(&self, row: usize, col: usize) -> Option<u16> {
        (row < self.label_map.height() && col < self.label_map.width()).then(|| self.label_map.get(row, col))
    }

    pub fn class_name(&self, class: usize) -> String {
        self.spec.class_name(class).to_string()
    }

    /// RGBA of the label map in the palette of the scene renderer.
    pub fn label_rgba(&self) -> Vec<u8> {
        let (h, w) = (self.label_map.height(), self.label_map.width());
        let mut img = Image::filled(h, w, [0.0; 3]);
        for r in 0..h {
            for c in 0..w {
                let k = self.label_map.get(r, c) as usize;
                let hue = k as f64 / self.spec.class_count as f64;
                for (ch, phase) in [0.0, 1.0 / 3.0, 2.0 / 3.0].into_iter().enumerate() {
                    img.set(ch, r, c, (std::f64::consts::TAU * (hue + phase)).cos() * 0.8);
                }
            }
        }
        img.to_rgba8()
    }

    /// RGBA of the scene with direction `k` of `class` at strength `alpha`;
    /// `alpha = 0` gives the unedited image.
    pub fn render(&self, class: usize, k: usize, alpha: f64) -> Result<Vec<u8>, String> {
        let image = if alpha == 0.0 {
            generate(&self.generator, &self.latent, &self.label_map).map_err(js_err)?
        } else {
            let edit = EditSpec::new(class, k, alpha.clamp(-self.bound, self.bound));
            apply_edit_stack(&self.generator, &self.latent, &self.label_map, &[edit], &self.sets, self.bound)
                .map_err(js_err)?
        };
        Ok(image.to_rgba8())
    }
}
