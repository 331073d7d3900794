//! Helpers shared by unit tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::nn::{Ctx, ParamStore};
use crate::tensor::{grad_check_many, numel, GradCheckReport, Graph, Tensor, Var};

pub fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::new(shape.to_vec(), (0..numel(shape)).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Contracts `y` with fixed random weights into a scalar.
pub fn weighted_sum(g: &Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let w = random(&g.shape(y), &mut rng(seed));
    let p = g.mul_const(y, w.data)?;
    Ok(g.sum(p))
}

/// Gradient check of `f(ctx, input)` with respect to the input and to every
/// parameter in `store`.
pub fn check_layer<F>(store: &ParamStore<f64>, input: &Tensor<f64>, f: F) -> GradCheckReport
where
    F: Fn(&Ctx<f64>, Var) -> Result<Var>,
{
    let mut xs = vec![input.clone()];
    xs.extend(store.iter().map(|(_, t)| t.clone()));
    grad_check_many(
        |g, vs| {
            let ctx = Ctx::from_vars(g, vs[1..].to_vec());
            let y = f(&ctx, vs[0])?;
            weighted_sum(g, y, 77)
        },
        &xs,
        1e-4,
    )
    .unwrap()
}
