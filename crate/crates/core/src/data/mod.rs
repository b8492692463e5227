//! Few-shot task construction: class pools, class-level splits,
//! rotation augmentation and N-way K-shot episode sampling.

mod omniglot;
mod synth;

use std::collections::HashSet;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use omniglot::{load_omniglot, OMNIGLOT_CLASSES, OMNIGLOT_INSTANCES};
pub use synth::{synth_glyph_pool, SynthSpec};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Evaluation set size used for validation and test.
pub const EVAL_TASKS: usize = 600;

/// Base-class split sizes for Omniglot (train / val / test).
pub const OMNIGLOT_SPLIT: [usize; 3] = [1150, 50, 423];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Origin {
    Omniglot,
    Synthetic,
}

/// Counter-clockwise quarter turns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Rotation {
    R0,
    R90,
    R180,
    R270,
}

impl Rotation {
    pub const ALL: [Rotation; 4] = [Rotation::R0, Rotation::R90, Rotation::R180, Rotation::R270];

    pub fn quarter_turns(self) -> usize {
        self as usize
    }

    pub fn degrees(self) -> u32 {
        90 * self as u32
    }
}

/// Rotates a row-major `size x size` image counter-clockwise.
pub fn rotate_square(img: &[f32], size: usize, rot: Rotation) -> Vec<f32> {
    let mut cur = img.to_vec();
    for _ in 0..rot.quarter_turns() {
        let mut next = vec![0.0; cur.len()];
        for y in 0..size {
            for x in 0..size {
                next[y * size + x] = cur[x * size + (size - 1 - y)];
            }
        }
        cur = next;
    }
    cur
}

#[derive(Debug, Clone)]
pub struct ClassEntry {
    /// Index of the unrotated class this entry derives from.
    pub base: usize,
    pub rotation: Rotation,
    pub name: String,
    instances: Arc<Vec<Arc<[f32]>>>,
}

impl ClassEntry {
    pub fn new(base: usize, name: impl Into<String>, instances: Vec<Vec<f32>>) -> Self {
        Self {
            base,
            rotation: Rotation::R0,
            name: name.into(),
            instances: Arc::new(instances.into_iter().map(Into::into).collect()),
        }
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }
}

/// Immutable set of labelled classes. Rotated classes share pixel storage
/// with their base class; the rotation is applied when an episode is built.
#[derive(Debug, Clone)]
pub struct ClassPool {
    pub origin: Origin,
    /// `[channels, height, width]` of every instance.
    pub image_shape: [usize; 3],
    pub classes: Vec<ClassEntry>,
}

impl ClassPool {
    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    /// Number of distinct base classes.
    pub fn base_classes(&self) -> usize {
        self.classes.iter().map(|c| c.base + 1).max().unwrap_or(0)
    }

    /// Pixels of one instance with the class rotation applied.
    pub fn image(&self, class: usize, instance: usize) -> Vec<f32> {
        let c = &self.classes[class];
        let raw = &c.instances[instance];
        if c.rotation == Rotation::R0 {
            raw.to_vec()
        } else {
            rotate_square(raw, self.image_shape[1], c.rotation)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Section {
    Train,
    Val,
    Test,
}

/// Section of every class in a pool (indexed like `pool.classes`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitAssignment {
    pub seed: u64,
    pub by_class: Vec<Section>,
}

impl SplitAssignment {
    pub fn counts(&self) -> [usize; 3] {
        let mut c = [0; 3];
        for s in &self.by_class {
            c[*s as usize] += 1;
        }
        c
    }

    pub fn classes_in(&self, section: Section) -> Vec<usize> {
        self.by_class
            .iter()
            .enumerate()
            .filter(|(_, s)| **s == section)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Omniglot protocol split: shuffle the 1623 base classes and assign
/// 1150 / 50 / 423.
pub fn split_classes(pool: &ClassPool, seed: u64) -> Result<SplitAssignment> {
    if pool.len() != OMNIGLOT_CLASSES || pool.classes.iter().any(|c| c.rotation != Rotation::R0) {
        return Err(Error::Structure(format!(
            "omniglot split needs {OMNIGLOT_CLASSES} unrotated base classes, pool has {}",
            pool.len()
        )));
    }
    split_classes_with(pool, OMNIGLOT_SPLIT, seed)
}

/// Shuffled split of an unrotated pool into the given section sizes.
pub fn split_classes_with(
    pool: &ClassPool,
    counts: [usize; 3],
    seed: u64,
) -> Result<SplitAssignment> {
    if counts.iter().sum::<usize>() != pool.len() {
        return Err(Error::Structure(format!(
            "split sizes {counts:?} do not cover {} classes",
            pool.len()
        )));
    }
    let mut order: Vec<usize> = (0..pool.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut by_class = vec![Section::Train; pool.len()];
    for (rank, &class) in order.iter().enumerate() {
        by_class[class] = if rank < counts[0] {
            Section::Train
        } else if rank < counts[0] + counts[1] {
            Section::Val
        } else {
            Section::Test
        };
    }
    Ok(SplitAssignment { seed, by_class })
}

/// Adds the 90/180/270 degree siblings of every class. Siblings inherit
/// the section of their base class, so a split computed on base classes
/// never leaks rotations across sections.
pub fn augment_rotations(
    pool: &ClassPool,
    split: &SplitAssignment,
) -> (ClassPool, SplitAssignment) {
    let mut classes = Vec::with_capacity(pool.len() * 4);
    let mut by_class = Vec::with_capacity(pool.len() * 4);
    for (entry, &section) in pool.classes.iter().zip(&split.by_class) {
        for rot in Rotation::ALL {
            let mut e = entry.clone();
            e.rotation = rot;
            e.name = format!("{}@{}", entry.name, rot.degrees());
            classes.push(e);
            by_class.push(section);
        }
    }
    (
        ClassPool {
            origin: pool.origin,
            image_shape: pool.image_shape,
            classes,
        },
        SplitAssignment {
            seed: split.seed,
            by_class,
        },
    )
}

/// One few-shot task in the set-to-set protocol.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub task_id: u64,
    /// `[n_way * k_shot, C, H, W]`
    pub support_x: Tensor<f32>,
    pub support_y: Vec<usize>,
    /// `[n_way * q_targets, C, H, W]`
    pub target_x: Tensor<f32>,
    pub target_y: Vec<usize>,
    /// Pool class index per draw order; `labels[j]` is the label of `classes[j]`.
    pub classes: Vec<usize>,
    pub labels: Vec<usize>,
    /// `(class, instance)` of every support / target example.
    pub support_ids: Vec<(usize, usize)>,
    pub target_ids: Vec<(usize, usize)>,
}

impl Episode {
    pub fn n_way(&self) -> usize {
        self.classes.len()
    }
}

fn fnv1a(words: impl IntoIterator<Item = u64>) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for w in words {
        for b in w.to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
    }
    h
}

/// Draws `n_way` distinct classes from `section` and, per class,
/// `k_shot + q_targets` distinct instances; labels are a fresh random
/// permutation.
pub fn sample_episode<R: Rng>(
    pool: &ClassPool,
    split: &SplitAssignment,
    section: Section,
    n_way: usize,
    k_shot: usize,
    q_targets: usize,
    rng: &mut R,
) -> Result<Episode> {
    let candidates = split.classes_in(section);
    if n_way == 0 || candidates.len() < n_way {
        return Err(Error::Sampling(format!(
            "{section:?} has {} classes, {n_way}-way episode requested",
            candidates.len()
        )));
    }
    let per_class = k_shot + q_targets;
    let picks = rand::seq::index::sample(rng, candidates.len(), n_way);
    let classes: Vec<usize> = picks.iter().map(|i| candidates[i]).collect();
    if let Some(&c) = classes.iter().find(|&&c| pool.classes[c].len() < per_class) {
        return Err(Error::Sampling(format!(
            "class {:?} has {} instances, {per_class} needed",
            pool.classes[c].name,
            pool.classes[c].len()
        )));
    }
    let mut labels: Vec<usize> = (0..n_way).collect();
    labels.shuffle(rng);

    let [ch, h, w] = pool.image_shape;
    let pixels = ch * h * w;
    let mut support = Vec::with_capacity(n_way * k_shot * pixels);
    let mut target = Vec::with_capacity(n_way * q_targets * pixels);
    let (mut support_y, mut target_y) = (Vec::new(), Vec::new());
    let (mut support_ids, mut target_ids) = (Vec::new(), Vec::new());
    for (&class, &label) in classes.iter().zip(&labels) {
        let inst = rand::seq::index::sample(rng, pool.classes[class].len(), per_class);
        for (j, i) in inst.iter().enumerate() {
            let img = pool.image(class, i);
            if j < k_shot {
                support.extend_from_slice(&img);
                support_y.push(label);
                support_ids.push((class, i));
            } else {
                target.extend_from_slice(&img);
                target_y.push(label);
                target_ids.push((class, i));
            }
        }
    }
    let task_id = fnv1a(
        classes
            .iter()
            .zip(&labels)
            .flat_map(|(&c, &l)| [c as u64, l as u64])
            .chain(
                support_ids
                    .iter()
                    .chain(&target_ids)
                    .map(|&(c, i)| ((c as u64) << 20) | i as u64),
            ),
    );
    Ok(Episode {
        task_id,
        support_x: Tensor::new(vec![support_y.len(), ch, h, w], support)?,
        support_y,
        target_x: Tensor::new(vec![target_y.len(), ch, h, w], target)?,
        target_y,
        classes,
        labels,
        support_ids,
        target_ids,
    })
}

/// `count` distinct episodes from a dedicated generator seeded by
/// `eval_seed`; regenerating with the same seed gives identical episodes.
#[allow(clippy::too_many_arguments)]
pub fn fixed_eval_set(
    pool: &ClassPool,
    split: &SplitAssignment,
    section: Section,
    n_way: usize,
    k_shot: usize,
    q_targets: usize,
    eval_seed: u64,
    count: usize,
) -> Result<Vec<Episode>> {
    let mut rng = ChaCha8Rng::seed_from_u64(eval_seed);
    let mut seen = HashSet::with_capacity(count);
    let mut out = Vec::with_capacity(count);
    let mut attempts = 0usize;
    while out.len() < count {
        attempts += 1;
        if attempts > count.saturating_mul(20).max(1000) {
            return Err(Error::Sampling(format!(
                "could not draw {count} distinct tasks from {section:?} (got {})",
                out.len()
            )));
        }
        let ep = sample_episode(pool, split, section, n_way, k_shot, q_targets, &mut rng)?;
        if seen.insert(ep.task_id) {
            out.push(ep);
        }
    }
    Ok(out)
}
