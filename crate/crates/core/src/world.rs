//! Synthetic glyph world: grid-aligned geometric patterns on a noisy
//! background, split into tasks with disjoint class sets.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::boxes::BBox;
use crate::detector::{GtObject, ToyImage};
use crate::error::{PdpError, Result};

pub const NUM_GLYPHS: usize = 8;

/// Whether glyph `class` covers pixel `(y, x)` of its `s × s` footprint.
pub fn glyph_pixel(class: usize, y: usize, x: usize, s: usize) -> bool {
    let c = (s as f64 - 1.0) / 2.0;
    let (dy, dx) = (y as f64 - c, x as f64 - c);
    match class {
        0 => true,
        1 => dy * dy + dx * dx <= c * c + 0.5,
        2 => y % 2 == 0,
        3 => x % 2 == 0,
        4 => (x + y) % 2 == 0,
        5 => dy.abs() < 1.0 || dx.abs() < 1.0,
        6 => x == y || x + y == s - 1,
        7 => y == 0 || x == 0 || y == s - 1 || x == s - 1,
        _ => false,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub image_size: usize,
    /// Side of a grid cell; objects sit one per cell.
    pub cell: usize,
    /// Side of the glyph footprint inside its cell.
    pub glyph: usize,
    /// Inclusive range of objects per image.
    pub min_objects: usize,
    pub max_objects: usize,
    /// Uniform pixel noise amplitude.
    pub noise: f64,
    /// Glyph intensity is drawn from `[min_intensity, 1]`.
    pub min_intensity: f64,
    /// Number of classes introduced by each task.
    pub task_sizes: Vec<usize>,
    pub train_per_task: usize,
    pub eval_per_task: usize,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            cell: 8,
            glyph: 6,
            min_objects: 1,
            max_objects: 3,
            noise: 0.2,
            min_intensity: 0.6,
            task_sizes: vec![4, 2, 2],
            train_per_task: 200,
            eval_per_task: 50,
        }
    }
}

impl WorldConfig {
    pub fn num_classes(&self) -> usize {
        self.task_sizes.iter().sum()
    }

    pub fn check(&self) -> Result<()> {
        let bad = |m: String| Err(PdpError::Config(m));
        if self.cell == 0 || self.image_size % self.cell != 0 {
            return bad(format!("cell {} must divide image size {}", self.cell, self.image_size));
        }
        if self.glyph == 0 || self.glyph > self.cell {
            return bad(format!("glyph size {} must be in 1..={}", self.glyph, self.cell));
        }
        let cells = (self.image_size / self.cell).pow(2);
        if self.min_objects == 0 || self.min_objects > self.max_objects || self.max_objects > cells {
            return bad(format!("objects per image {}..={} invalid for {cells} cells", self.min_objects, self.max_objects));
        }
        if self.task_sizes.is_empty() || self.task_sizes.contains(&0) {
            return bad("every task needs at least one class".into());
        }
        if self.num_classes() > NUM_GLYPHS {
            return bad(format!("{} classes but only {NUM_GLYPHS} glyphs", self.num_classes()));
        }
        if !(0.0..=1.0).contains(&self.min_intensity) || self.noise < 0.0 {
            return bad("intensity must lie in [0, 1] and noise be non-negative".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub classes: Vec<usize>,
    /// Annotations restricted to `classes`; other objects are still drawn.
    pub train: Vec<ToyImage>,
    /// Fully annotated over every class seen up to this task.
    pub eval: Vec<ToyImage>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskStream {
    pub tasks: Vec<Task>,
}

impl TaskStream {
    pub fn generate(cfg: &WorldConfig, seed: u64) -> Result<Self> {
        cfg.check()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tasks = Vec::with_capacity(cfg.task_sizes.len());
        let mut next = 0;
        for &n in &cfg.task_sizes {
            let classes: Vec<usize> = (next..next + n).collect();
            next += n;
            let seen: Vec<usize> = (0..next).collect();
            let current: BTreeSet<usize> = classes.iter().copied().collect();
            let train = (0..cfg.train_per_task)
                .map(|_| {
                    let mut img = render(cfg, &seen, &classes, &mut rng);
                    img.objects.retain(|o| current.contains(&o.class));
                    img
                })
                .collect();
            let eval = (0..cfg.eval_per_task).map(|_| render(cfg, &seen, &classes, &mut rng)).collect();
            tasks.push(Task { classes, train, eval });
        }
        Ok(Self { tasks })
    }

    /// Classes introduced before task `t` (zero-based).
    pub fn old_classes(&self, t: usize) -> BTreeSet<usize> {
        self.tasks[..t].iter().flat_map(|k| k.classes.iter().copied()).collect()
    }

    pub fn seen_classes(&self, t: usize) -> BTreeSet<usize> {
        self.tasks[..=t].iter().flat_map(|k| k.classes.iter().copied()).collect()
    }
}

/// One image with objects from `pool`, at least one of which is drawn from
/// `must`.
fn render(cfg: &WorldConfig, pool: &[usize], must: &[usize], rng: &mut ChaCha8Rng) -> ToyImage {
    let size = cfg.image_size;
    let mut img = ToyImage::blank(size, size);
    for p in img.pixels.iter_mut() {
        *p = rng.random_range(-cfg.noise..=cfg.noise);
    }
    let grid = size / cfg.cell;
    let mut cells: Vec<usize> = (0..grid * grid).collect();
    cells.shuffle(rng);
    let count = rng.random_range(cfg.min_objects..=cfg.max_objects);
    let offset = (cfg.cell - cfg.glyph) / 2;
    for (k, &cell) in cells.iter().take(count).enumerate() {
        let class = if k == 0 { must[rng.random_range(0..must.len())] } else { pool[rng.random_range(0..pool.len())] };
        let intensity = rng.random_range(cfg.min_intensity..=1.0);
        let (y0, x0) = ((cell / grid) * cfg.cell + offset, (cell % grid) * cfg.cell + offset);
        for y in 0..cfg.glyph {
            for x in 0..cfg.glyph {
                if glyph_pixel(class, y, x, cfg.glyph) {
                    img.pixels[(y0 + y) * size + x0 + x] += intensity;
                }
            }
        }
        let s = size as f64;
        let g = cfg.glyph as f64;
        img.objects.push(GtObject {
            class,
            bbox: BBox::new((x0 as f64 + g / 2.0) / s, (y0 as f64 + g / 2.0) / s, g / s, g / s),
        });
    }
    img
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> WorldConfig {
        WorldConfig { train_per_task: 20, eval_per_task: 5, ..Default::default() }
    }

    #[test]
    fn glyphs_are_pairwise_distinct() {
        let masks: Vec<Vec<bool>> = (0..NUM_GLYPHS)
            .map(|c| (0..36).map(|i| glyph_pixel(c, i / 6, i % 6, 6)).collect())
            .collect();
        for a in 0..NUM_GLYPHS {
            for b in a + 1..NUM_GLYPHS {
                assert_ne!(masks[a], masks[b], "glyphs {a} and {b}");
            }
        }
    }

    #[test]
    fn same_seed_same_stream() {
        assert_eq!(TaskStream::generate(&small(), 7).unwrap(), TaskStream::generate(&small(), 7).unwrap());
        assert_ne!(TaskStream::generate(&small(), 7).unwrap(), TaskStream::generate(&small(), 8).unwrap());
    }

    #[test]
    fn classes_are_disjoint_and_annotations_masked() {
        let s = TaskStream::generate(&small(), 1).unwrap();
        assert_eq!(s.tasks.iter().map(|t| t.classes.clone()).collect::<Vec<_>>(), vec![
            vec![0, 1, 2, 3],
            vec![4, 5],
            vec![6, 7]
        ]);
        for (t, task) in s.tasks.iter().enumerate() {
            let current: BTreeSet<usize> = task.classes.iter().copied().collect();
            for img in &task.train {
                assert!(!img.objects.is_empty());
                assert!(img.objects.iter().all(|o| current.contains(&o.class)));
            }
            for img in &task.eval {
                assert!(img.objects.iter().all(|o| s.seen_classes(t).contains(&o.class)));
                assert!(img.objects.iter().any(|o| current.contains(&o.class)));
            }
        }
    }

    #[test]
    fn boxes_cover_the_glyph() {
        let s = TaskStream::generate(&small(), 2).unwrap();
        for o in &s.tasks[0].eval[0].objects {
            let b = o.bbox;
            assert!((b.w - 6.0 / 32.0).abs() < 1e-15 && b.cx > 0.0 && b.cx < 1.0);
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        assert!(WorldConfig { task_sizes: vec![5, 4], ..small() }.check().is_err());
        assert!(WorldConfig { cell: 7, ..small() }.check().is_err());
        assert!(WorldConfig { max_objects: 17, ..small() }.check().is_err());
    }
}
