//! Base model training: epsilon-prediction denoising loss on mixture data,
//! with condition dropout so the null slot learns the unconditional score.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::condition::Condition;
use crate::error::{Error, Result};
use crate::nn::{AdamState, Arch, Batch, ScoreNet};
use crate::oracle::GaussianMixture;
use crate::schedule::NoiseSchedule;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaseTrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub cond_dropout: f64,
    /// Size of the fixed batch used to report before/after loss.
    pub eval_batch: usize,
}

impl Default for BaseTrainConfig {
    fn default() -> Self {
        Self {
            iterations: 3000,
            batch_size: 256,
            lr: 1e-3,
            seed: 0,
            cond_dropout: 0.1,
            eval_batch: 4096,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BaseTrainOutcome {
    pub net: ScoreNet,
    pub losses: Vec<f64>,
    /// Loss of the initial network on the fixed evaluation batch.
    pub initial_eval_loss: f64,
    pub final_eval_loss: f64,
    pub divergence: Option<String>,
}

/// A denoising batch `(x_t, t, c)` with its epsilon targets.
pub fn denoising_batch<R: Rng + ?Sized>(
    mixture: &GaussianMixture,
    schedule: &NoiseSchedule,
    n: usize,
    cond_dropout: f64,
    rng: &mut R,
) -> Result<(Batch, Array2<f64>)> {
    let classes = mixture.classes();
    if classes.is_empty() {
        return Err(Error::config("data has no classes"));
    }
    let dim = mixture.dim();
    let mut x = Array2::zeros((n, dim));
    let mut eps = Array2::zeros((n, dim));
    let mut t = Vec::with_capacity(n);
    let mut cond = Vec::with_capacity(n);
    for i in 0..n {
        let c = Condition::Class(classes[rng.random_range(0..classes.len())]);
        let x0 = mixture.sample_data(c, rng, 1)?;
        let ti = rng.random_range(1..=schedule.t_max());
        let e: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let xt = schedule.add_noise(x0.row(0).as_slice().expect("row"), ti, &e)?;
        for d in 0..dim {
            x[[i, d]] = xt[d];
            eps[[i, d]] = e[d];
        }
        t.push(ti);
        cond.push(if rng.random::<f64>() < cond_dropout {
            Condition::Null
        } else {
            c
        });
    }
    Ok((Batch { x, t, cond }, eps))
}

fn eval_loss(net: &ScoreNet, batch: &Batch, eps: &Array2<f64>) -> Result<f64> {
    let out = net.forward_batch(batch.x.view(), &batch.t, &batch.cond)?;
    Ok((&out - eps).iter().map(|r| r * r).sum::<f64>() / batch.len() as f64)
}

/// Trains a fresh network from `arch` on `mixture`.
pub fn train_base(
    arch: Arch,
    mixture: &GaussianMixture,
    schedule: &NoiseSchedule,
    cfg: &BaseTrainConfig,
) -> Result<BaseTrainOutcome> {
    if cfg.batch_size == 0 || cfg.eval_batch == 0 {
        return Err(Error::config("batch sizes must be positive"));
    }
    if !(cfg.lr > 0.0 && cfg.lr.is_finite()) {
        return Err(Error::config("lr must be positive"));
    }
    if !(0.0..=1.0).contains(&cfg.cond_dropout) {
        return Err(Error::config("cond_dropout must lie in [0, 1]"));
    }
    if arch.t_max != schedule.t_max() || arch.input_dim != mixture.dim() {
        return Err(Error::config(
            "architecture does not match schedule or data",
        ));
    }
    for c in mixture.classes() {
        Condition::Class(c).check(arch.num_classes)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut net = ScoreNet::init(arch, &mut rng)?;
    let mut eval_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_e7a1);
    let (eval_b, eval_eps) = denoising_batch(
        mixture,
        schedule,
        cfg.eval_batch,
        cfg.cond_dropout,
        &mut eval_rng,
    )?;
    let initial_eval_loss = eval_loss(&net, &eval_b, &eval_eps)?;
    let mut adam = AdamState::new(net.params(), cfg.lr);
    let mut losses = Vec::with_capacity(cfg.iterations);
    let mut divergence = None;
    for _ in 0..cfg.iterations {
        let (batch, eps) = denoising_batch(
            mixture,
            schedule,
            cfg.batch_size,
            cfg.cond_dropout,
            &mut rng,
        )?;
        let (loss, grads) = match net.mse_backward(&batch, eps.view()) {
            Ok(v) => v,
            Err(Error::TrainingDivergence(msg)) => {
                divergence = Some(msg);
                break;
            }
            Err(e) => return Err(e),
        };
        let mut next = net.params().clone();
        adam.apply(&mut next, &grads)?;
        if !next.all_finite() {
            divergence = Some("non-finite parameters after update".into());
            break;
        }
        *net.params_mut() = next;
        losses.push(loss);
    }
    let final_eval_loss = eval_loss(&net, &eval_b, &eval_eps)?;
    Ok(BaseTrainOutcome {
        net,
        losses,
        initial_eval_loss,
        final_eval_loss,
        divergence,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn arch(t_max: usize) -> Arch {
        Arch {
            input_dim: 2,
            hidden: vec![32, 32],
            time_embed_dim: 8,
            cond_embed_dim: 8,
            num_classes: 8,
            t_max,
        }
    }

    #[test]
    fn zero_iterations_keep_initialisation() {
        let s = NoiseSchedule::cosine(100).unwrap();
        let gm = GaussianMixture::default_ring();
        let cfg = BaseTrainConfig {
            iterations: 0,
            eval_batch: 16,
            ..BaseTrainConfig::default()
        };
        let out = train_base(arch(100), &gm, &s, &cfg).unwrap();
        let init = ScoreNet::init(arch(100), &mut ChaCha8Rng::seed_from_u64(cfg.seed)).unwrap();
        assert_eq!(out.net, init);
        assert_eq!(out.initial_eval_loss, out.final_eval_loss);
    }

    #[test]
    fn short_run_learns_and_is_deterministic() {
        let s = NoiseSchedule::cosine(100).unwrap();
        let gm = GaussianMixture::default_ring();
        let cfg = BaseTrainConfig {
            iterations: 300,
            batch_size: 64,
            lr: 3e-3,
            seed: 4,
            eval_batch: 512,
            ..BaseTrainConfig::default()
        };
        let a = train_base(arch(100), &gm, &s, &cfg).unwrap();
        let b = train_base(arch(100), &gm, &s, &cfg).unwrap();
        assert_eq!(a.net, b.net);
        assert!(a.divergence.is_none());
        assert!(
            a.final_eval_loss < a.initial_eval_loss,
            "{} vs {}",
            a.final_eval_loss,
            a.initial_eval_loss
        );
    }
}
