//! Edit stacks: joint class edits, direction composition and per-block
//! injection.

use serde::{Deserialize, Serialize};

use crate::directions::DirectionSet;
use crate::error::{Error, Result};
use crate::generator::{generate, generate_layered, SisGenerator};
use crate::image::Image;
use crate::scene::{apply_direction, class_mask, ClassMask, EditVector, LabelMap, LatentCode3D};

/// Largest accepted `|α|` relative to the sampling bound `n`.
pub const N_MAX_FACTOR: f64 = 1.5;

pub fn n_max(n: f64) -> f64 {
    N_MAX_FACTOR * n
}

/// Blocks whose latent input receives an edit.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlockRange {
    All,
    /// Inclusive interval.
    Span { first: usize, last: usize },
    Empty,
}

impl BlockRange {
    pub fn covers(&self, block: usize) -> bool {
        match *self {
            BlockRange::All => true,
            BlockRange::Span { first, last } => (first..=last).contains(&block),
            BlockRange::Empty => false,
        }
    }

    fn resolved(&self, blocks: usize) -> Option<(usize, usize)> {
        match *self {
            BlockRange::All => Some((0, blocks - 1)),
            BlockRange::Span { first, last } => Some((first, last)),
            BlockRange::Empty => None,
        }
    }

    pub fn overlaps(&self, other: &BlockRange, blocks: usize) -> bool {
        match (self.resolved(blocks), other.resolved(blocks)) {
            (Some((a0, a1)), Some((b0, b1))) => a0 <= b1 && b0 <= a1,
            _ => false,
        }
    }

    pub fn validate(&self, blocks: usize) -> Result<()> {
        match *self {
            BlockRange::Span { first, last } if first > last || last >= blocks => {
                Err(Error::Config(format!("block range [{first}, {last}] for a {blocks}-block generator")))
            }
            _ => Ok(()),
        }
    }
}

/// Which direction an edit uses.
#[derive(Clone, Debug, PartialEq)]
pub enum DirectionRef {
    /// Index into the class's direction set.
    Index(usize),
    Vector(EditVector),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "EditSpecWire", into = "EditSpecWire")]
pub struct EditSpec {
    pub class_id: usize,
    pub direction: DirectionRef,
    pub alpha: f64,
    pub blocks: BlockRange,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
struct EditSpecWire {
    class_id: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    k: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    vector: Option<Vec<f64>>,
    alpha: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    blocks: Option<Vec<usize>>,
}

impl TryFrom<EditSpecWire> for EditSpec {
    type Error = String;

    fn try_from(w: EditSpecWire) -> std::result::Result<Self, String> {
        let direction = match (w.k, w.vector) {
            (Some(k), None) => DirectionRef::Index(k),
            (None, Some(v)) => {
                if v.is_empty() || v.iter().any(|x| !x.is_finite()) {
                    return Err("vector must be non-empty and finite".into());
                }
                DirectionRef::Vector(EditVector::raw(v))
            }
            _ => return Err("exactly one of `k` and `vector` is required".into()),
        };
        if !w.alpha.is_finite() {
            return Err("alpha must be finite".into());
        }
        let blocks = match w.blocks.as_deref() {
            None => BlockRange::All,
            Some([]) => BlockRange::Empty,
            Some(&[first, last]) => BlockRange::Span { first, last },
            Some(other) => return Err(format!("blocks must be [first, last], got {other:?}")),
        };
        Ok(EditSpec { class_id: w.class_id, direction, alpha: w.alpha, blocks })
    }
}

impl From<EditSpec> for EditSpecWire {
    fn from(s: EditSpec) -> Self {
        let (k, vector) = match s.direction {
            DirectionRef::Index(k) => (Some(k), None),
            DirectionRef::Vector(v) => (None, Some(v.values().to_vec())),
        };
        let blocks = match s.blocks {
            BlockRange::All => None,
            BlockRange::Span { first, last } => Some(vec![first, last]),
            BlockRange::Empty => Some(vec![]),
        };
        EditSpecWire { class_id: s.class_id, k, vector, alpha: s.alpha, blocks }
    }
}

impl EditSpec {
    pub fn new(class_id: usize, k: usize, alpha: f64) -> Self {
        Self { class_id, direction: DirectionRef::Index(k), alpha, blocks: BlockRange::All }
    }

    pub fn with_vector(class_id: usize, v: EditVector, alpha: f64) -> Self {
        Self { class_id, direction: DirectionRef::Vector(v), alpha, blocks: BlockRange::All }
    }

    pub fn in_blocks(mut self, blocks: BlockRange) -> Self {
        self.blocks = blocks;
        self
    }

    /// The edit vector, looked up in `sets` for an index reference.
    pub fn resolve(&self, sets: &[DirectionSet]) -> Result<EditVector> {
        match &self.direction {
            DirectionRef::Vector(v) => Ok(v.clone()),
            DirectionRef::Index(k) => {
                let set = sets
                    .iter()
                    .find(|s| s.class_id == self.class_id)
                    .ok_or_else(|| Error::Config(format!("no directions for class {}", self.class_id)))?;
                set.directions.get(*k).cloned().ok_or_else(|| {
                    Error::Config(format!("direction {k} out of range for class {} (K = {})", self.class_id, set.k()))
                })
            }
        }
    }
}

/// Wire form of a joint edit request.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct EditStack {
    pub label_map_id: String,
    pub seed: u64,
    pub edits: Vec<EditSpec>,
}

/// Checks every precondition of [`apply_edit_stack`] without rendering.
pub fn validate_edits(
    gen: &dyn SisGenerator,
    y: &LabelMap,
    edits: &[EditSpec],
    alpha_limit: f64,
) -> Result<()> {
    let blocks = gen.blocks();
    for (i, e) in edits.iter().enumerate() {
        if e.class_id >= y.class_count() {
            return Err(Error::ClassOutOfRange { class: e.class_id, count: y.class_count() });
        }
        if !(e.alpha.abs() <= alpha_limit) {
            return Err(Error::AlphaOutOfBounds { alpha: e.alpha, bound: alpha_limit });
        }
        e.blocks.validate(blocks)?;
        if y.pixel_count_of(e.class_id) == 0 {
            return Err(Error::ClassAbsent(e.class_id));
        }
        for other in &edits[..i] {
            if other.class_id == e.class_id && (other.blocks == e.blocks || other.blocks.overlaps(&e.blocks, blocks)) {
                return Err(Error::Conflict(format!("class {} is edited twice in overlapping blocks", e.class_id)));
            }
        }
    }
    Ok(())
}

/// Latent tensor seen by each block after the edits.
pub fn edited_latents(
    gen: &dyn SisGenerator,
    z: &LatentCode3D,
    y: &LabelMap,
    edits: &[EditSpec],
    sets: &[DirectionSet],
) -> Result<Vec<LatentCode3D>> {
    let resolved: Vec<(EditVector, ClassMask)> =
        edits.iter().map(|e| Ok((e.resolve(sets)?, class_mask(y, e.class_id)?))).collect::<Result<_>>()?;
    (0..gen.blocks())
        .map(|b| {
            let mut zb = z.clone();
            for (e, (v, m)) in edits.iter().zip(&resolved) {
                if e.blocks.covers(b) {
                    zb = apply_direction(&zb, v, e.alpha, Some(m))?;
                }
            }
            Ok(zb)
        })
        .collect()
}

fn render(gen: &dyn SisGenerator, y: &LabelMap, per_block: Vec<LatentCode3D>) -> Result<Image> {
    if per_block.iter().all(|zb| zb == &per_block[0]) {
        return generate(gen, &per_block[0], y);
    }
    generate_layered(gen, &per_block, y)
}

/// Renders `y` with every edit applied inside its class mask to the blocks
/// of its range. Edits of different classes touch disjoint pixels, so
/// their order does not matter.
pub fn apply_edit_stack(
    gen: &dyn SisGenerator,
    z: &LatentCode3D,
    y: &LabelMap,
    edits: &[EditSpec],
    sets: &[DirectionSet],
    alpha_limit: f64,
) -> Result<Image> {
    validate_edits(gen, y, edits, alpha_limit)?;
    render(gen, y, edited_latents(gen, z, y, edits, sets)?)
}

/// `α₁v₁ + α₂v₂`, not renormalized; apply it with `α = 1`.
pub fn compose_directions(v1: &EditVector, alpha1: f64, v2: &EditVector, alpha2: f64) -> Result<EditVector> {
    if v1.channels() != v2.channels() {
        return Err(Error::Shape(format!("{} vs {} channels", v1.channels(), v2.channels())));
    }
    Ok(EditVector::raw(v1.values().iter().zip(v2.values()).map(|(a, b)| alpha1 * a + alpha2 * b).collect()))
}

/// Per-block injection. Unlike a general stack, the assignments must cover
/// disjoint block intervals regardless of class.
pub fn layerwise_inject(
    gen: &dyn SisGenerator,
    z: &LatentCode3D,
    y: &LabelMap,
    assignments: &[EditSpec],
    sets: &[DirectionSet],
    alpha_limit: f64,
) -> Result<Image> {
    for (i, a) in assignments.iter().enumerate() {
        for b in &assignments[..i] {
            if a.blocks.overlaps(&b.blocks, gen.blocks()) {
                return Err(Error::Conflict(format!("block ranges {:?} and {:?} overlap", b.blocks, a.blocks)));
            }
        }
    }
    apply_edit_stack(gen, z, y, assignments, sets, alpha_limit)
}

/// Mean absolute pixel change inside and outside one edited class.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct DeltaStats {
    pub class_id: usize,
    pub inside: Option<f64>,
    pub outside: Option<f64>,
}

pub fn delta_stats(base: &Image, edited: &Image, mask: &ClassMask) -> DeltaStats {
    let v = mask.values();
    DeltaStats {
        class_id: mask.class_id(),
        inside: edited.mean_abs_delta(base, |p| v[p] != 0),
        outside: edited.mean_abs_delta(base, |p| v[p] == 0),
    }
}
