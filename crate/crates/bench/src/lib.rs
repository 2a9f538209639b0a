//! Seeded inputs for the benchmarks, built outside the timed loops.

use pdp_core::model::{Model, ModelShape};
use pdp_core::{GtObject, Tensor, ToyImage};
use pdp_core::world::{TaskStream, WorldConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn cost_matrix(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(rows, cols, |_, _| rng.random_range(-5.0..5.0))
}

/// A default-shaped model after two stages of pool growth, with the
/// features and targets of one training image.
pub fn model_and_image(seed: u64) -> (Model, Tensor, Vec<GtObject>) {
    let mut model = Model::new(&ModelShape::default(), seed).unwrap();
    model.private.grow(1, 4, seed + 1).unwrap();
    model.private.grow(2, 2, seed + 2).unwrap();
    let world = WorldConfig { train_per_task: 1, eval_per_task: 1, ..Default::default() };
    let stream = TaskStream::generate(&world, seed).unwrap();
    let img: &ToyImage = &stream.tasks[0].train[0];
    let features = model.features(img).unwrap();
    (model, features, img.objects.clone())
}
