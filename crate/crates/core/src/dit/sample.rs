use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::schedule::posterior_step;
use super::{Conditioning, DitError, LoraSet, NoiseSchedule, ToyDit};

pub(crate) fn normal_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| StandardNormal.sample(rng))
}

/// Ancestral sampling from `z_T ~ N(0, I)` down to `t = 0`.
pub fn sample(
    model: &ToyDit,
    cond: &Conditioning,
    loras: &LoraSet,
    schedule: &NoiseSchedule,
    seed: u64,
) -> Result<Array2<f64>, DitError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (v, c) = (model.config().grid.token_count(), model.config().d_latent);
    let mut z = normal_matrix(&mut rng, v, c);
    for t in (0..schedule.steps()).rev() {
        let eps = model.forward(cond, loras, &z, t)?;
        let noise = (t > 0).then(|| normal_matrix(&mut rng, v, c));
        z = posterior_step(&z, &eps, t, schedule, noise.as_ref());
    }
    Ok(z)
}
