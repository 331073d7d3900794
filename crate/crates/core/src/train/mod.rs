//! Optimisation: Noam schedule, Adam, the epoch loop and checkpoints.

pub mod checkpoint;

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{make_batches, Batch, SentencePair};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::nn::{Ctx, Mode, ParamStore};
use crate::tensor::{Graph, Scalar};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub warmup: u64,
    pub label_smoothing: f64,
    pub token_budget: usize,
    pub max_epochs: usize,
    pub seed: u64,
    /// Multiplier on the Noam rate. 1 reproduces the plain schedule.
    pub lr_scale: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            beta1: 0.9,
            beta2: 0.98,
            adam_eps: 1e-9,
            warmup: 4000,
            label_smoothing: 0.1,
            token_budget: 4096,
            max_epochs: 1,
            seed: 1,
            lr_scale: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return bad(format!("label_smoothing must lie in [0, 1), got {}", self.label_smoothing));
        }
        if self.warmup == 0 {
            return bad("warmup must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad(format!("Adam betas must lie in [0, 1), got {} and {}", self.beta1, self.beta2));
        }
        if self.adam_eps <= 0.0 || self.lr_scale < 0.0 || !self.lr_scale.is_finite() {
            return bad("adam_eps must be positive and lr_scale finite and non-negative".into());
        }
        if self.token_budget == 0 {
            return bad("token_budget must be positive".into());
        }
        Ok(())
    }

    pub fn echo(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "train.beta1 = {}", self.beta1);
        let _ = writeln!(s, "train.beta2 = {}", self.beta2);
        let _ = writeln!(s, "train.adam_eps = {:e}", self.adam_eps);
        let _ = writeln!(s, "train.warmup = {}", self.warmup);
        let _ = writeln!(s, "train.label_smoothing = {}", self.label_smoothing);
        let _ = writeln!(s, "train.token_budget = {}", self.token_budget);
        let _ = writeln!(s, "train.max_epochs = {}", self.max_epochs);
        let _ = writeln!(s, "train.seed = {}", self.seed);
        let _ = writeln!(s, "train.lr_scale = {}", self.lr_scale);
        s
    }
}

/// `d^-0.5 · min(step^-0.5, step · warmup^-1.5)`.
pub fn noam_lr(step: u64, d_model: usize, warmup: u64) -> Result<f64> {
    if step == 0 {
        return Err(Error::Contract("noam_lr is defined for steps from 1".into()));
    }
    if warmup == 0 || d_model == 0 {
        return Err(Error::Contract("noam_lr needs positive d_model and warmup".into()));
    }
    let s = step as f64;
    Ok((d_model as f64).powf(-0.5) * s.powf(-0.5).min(s * (warmup as f64).powf(-1.5)))
}

/// Bias-corrected Adam moments, one array per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub t: u64,
}

impl<T: Scalar> Adam<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        let zeros: Vec<Vec<T>> = store.iter().map(|(_, p)| vec![T::zero(); p.data.len()]).collect();
        Adam { m: zeros.clone(), v: zeros, t: 0 }
    }

    /// One update. Parameters without a gradient (`None`) are left alone,
    /// moments included.
    pub fn step(
        &mut self,
        store: &mut ParamStore<T>,
        grads: &[Option<Vec<T>>],
        lr: f64,
        cfg: &TrainConfig,
    ) -> Result<()> {
        if grads.len() != store.len() || self.m.len() != store.len() {
            return Err(Error::Contract(format!(
                "Adam step over {} parameters with {} gradients and {} moments",
                store.len(),
                grads.len(),
                self.m.len()
            )));
        }
        self.t += 1;
        let t = self.t as i32;
        let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
        let c1 = T::one() - b1.powi(t);
        let c2 = T::one() - b2.powi(t);
        let (lr, eps) = (T::lit(lr), T::lit(cfg.adam_eps));
        for (i, id) in store.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let Some(g) = &grads[i] else { continue };
            let p = store.get_mut(id);
            if g.len() != p.data.len() {
                return Err(Error::shape("adam_step", &[p.data.len()], &[g.len()]));
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..g.len() {
                m[j] = b1 * m[j] + (T::one() - b1) * g[j];
                v[j] = b2 * v[j] + (T::one() - b2) * g[j] * g[j];
                let mh = m[j] / c1;
                let vh = v[j] / c2;
                p.data[j] -= lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_loss: f64,
    /// Rate of the last step taken in the epoch.
    pub lr: f64,
}

pub const METRICS_HEADER: &str = "epoch,train_loss,valid_loss,lr";

impl EpochMetrics {
    pub fn csv_line(&self) -> String {
        format!("{},{:.6},{:.6},{:.6e}", self.epoch, self.train_loss, self.valid_loss, self.lr)
    }
}

pub fn metrics_csv(history: &[EpochMetrics]) -> String {
    let mut s = format!("{METRICS_HEADER}\n");
    for m in history {
        s.push_str(&m.csv_line());
        s.push('\n');
    }
    s
}

fn target_tokens(b: &Batch) -> usize {
    b.decoder_input().lengths.iter().sum()
}

fn mix(seed: u64, a: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ a.wrapping_mul(0xD1B5_4A32_D192_ED03)
}

/// Token-weighted mean loss in evaluation mode.
pub fn evaluate_loss<T: Scalar>(
    model: &Model,
    store: &ParamStore<T>,
    pairs: &[SentencePair],
    cfg: &TrainConfig,
) -> Result<f64> {
    if pairs.is_empty() {
        return Ok(f64::NAN);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, u64::MAX));
    let (mut total, mut count) = (0.0, 0usize);
    for b in make_batches(pairs, cfg.token_budget, &mut rng)? {
        let g = Graph::new();
        let ctx = Ctx::eval(&g, store);
        let loss = model.loss(&ctx, b.src_ids(), b.decoder_input(), b.targets(), cfg.label_smoothing)?;
        let n = target_tokens(&b);
        total += g.scalar_value(loss).to_f64().unwrap_or(f64::NAN) * n as f64;
        count += n;
    }
    Ok(total / count as f64)
}

/// Runs `cfg.max_epochs` epochs. Batching of epoch `e` and the dropout stream
/// of step `s` are seeded from `cfg.seed`, so runs are reproducible. The
/// callback sees each epoch's metrics as soon as they are known.
pub fn train_loop<T: Scalar>(
    model: &Model,
    store: &mut ParamStore<T>,
    adam: &mut Adam<T>,
    train: &[SentencePair],
    valid: &[SentencePair],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<Vec<EpochMetrics>> {
    cfg.validate()?;
    let mut history = Vec::with_capacity(cfg.max_epochs);
    for epoch in 1..=cfg.max_epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, epoch as u64));
        let batches = make_batches(train, cfg.token_budget, &mut rng)?;
        let (mut total, mut count) = (0.0, 0usize);
        let mut lr = 0.0;
        for b in &batches {
            let step = adam.t + 1;
            lr = noam_lr(step, model.cfg.d_model, cfg.warmup)? * cfg.lr_scale;
            let g = Graph::new();
            let ctx = Ctx::new(&g, store, Mode::Train, model.cfg.dropout, mix(cfg.seed ^ 0x5eed, step))?;
            let loss = model.loss(&ctx, b.src_ids(), b.decoder_input(), b.targets(), cfg.label_smoothing)?;
            g.backward(loss)?;
            let grads = ctx.grads();
            drop(ctx);
            let value = g.scalar_value(loss).to_f64().unwrap_or(f64::NAN);
            if !value.is_finite() {
                let norm = grads
                    .iter()
                    .flatten()
                    .flatten()
                    .map(|x| x.to_f64().unwrap_or(f64::NAN).powi(2))
                    .sum::<f64>()
                    .sqrt();
                return Err(Error::NonFiniteLoss { step, lr, grad_norm: norm, loss: value });
            }
            adam.step(store, &grads, lr, cfg)?;
            let n = target_tokens(b);
            total += value * n as f64;
            count += n;
        }
        let m = EpochMetrics {
            epoch,
            train_loss: total / count as f64,
            valid_loss: evaluate_loss(model, store, valid, cfg)?,
            lr,
        };
        on_epoch(&m);
        history.push(m);
    }
    Ok(history)
}
