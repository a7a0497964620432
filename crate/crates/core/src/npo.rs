//! Inference-time negative preference optimisation: build the negative
//! model as `theta + alpha * eta + beta * delta` and use it as the
//! guidance branch next to the positive model.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::condition::Condition;
use crate::diffusion::{eps_to_x0, sample, Corruption, Guided, SampleOutput};
use crate::error::{Error, Result};
use crate::eval::{reward, reward_grad, RewardFn};
use crate::nn::{paramset_axpy, AdamState, Batch, ParamSet, ScoreNet};
use crate::oracle::GaussianMixture;
use crate::schedule::{NoiseSchedule, StepGrid};

/// Base weights plus the optional positive offset `eta` and the Self-NPO
/// offset `delta`.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightOffsets {
    theta: ParamSet,
    eta: Option<ParamSet>,
    delta: ParamSet,
}

impl WeightOffsets {
    pub fn new(theta: ParamSet, eta: Option<ParamSet>, delta: ParamSet) -> Result<Self> {
        theta.check_compatible(&delta)?;
        if let Some(eta) = &eta {
            theta.check_compatible(eta)?;
        }
        Ok(Self { theta, eta, delta })
    }

    /// Offsets from fine-tuned weights: `delta = theta_neg - theta`,
    /// `eta = theta_pos - theta`.
    pub fn from_checkpoints(
        theta: &ParamSet,
        pos: Option<&ParamSet>,
        neg: &ParamSet,
    ) -> Result<Self> {
        let delta = neg.delta_from(theta)?;
        let eta = pos.map(|p| p.delta_from(theta)).transpose()?;
        Self::new(theta.clone(), eta, delta)
    }

    pub fn theta(&self) -> &ParamSet {
        &self.theta
    }

    pub fn eta(&self) -> Option<&ParamSet> {
        self.eta.as_ref()
    }

    pub fn delta(&self) -> &ParamSet {
        &self.delta
    }
}

/// `theta + alpha * eta + beta * delta`.
pub fn mix_negative(offsets: &WeightOffsets, alpha: f64, beta: f64) -> Result<ParamSet> {
    for (name, v) in [("alpha", alpha), ("beta", beta)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::invalid(format!(
                "{name} must lie in [0, 1], got {v}"
            )));
        }
    }
    match (&offsets.eta, alpha > 0.0) {
        (None, true) => Err(Error::config("alpha > 0 needs a positive offset (eta)")),
        (Some(eta), true) => paramset_axpy(&offsets.theta, &[(alpha, eta), (beta, &offsets.delta)]),
        _ => paramset_axpy(&offsets.theta, &[(beta, &offsets.delta)]),
    }
}

/// DDIM sampling with `(omega + 1) eps_pos(x, t, c) - omega eps_neg(x, t, c')`.
#[allow(clippy::too_many_arguments)]
pub fn guided_sample<R: Rng>(
    pos: &ScoreNet,
    neg: &ScoreNet,
    schedule: &NoiseSchedule,
    grid: &StepGrid,
    cond: &[Condition],
    omega: f64,
    neg_condition: Condition,
    clip_x0: Option<f64>,
    rngs: &mut [R],
) -> Result<SampleOutput> {
    if pos.arch() != neg.arch() {
        return Err(Error::config(
            "positive and negative networks have different architectures",
        ));
    }
    if !(omega >= 0.0 && omega.is_finite()) {
        return Err(Error::invalid(format!("omega must be >= 0, got {omega}")));
    }
    neg_condition.check(pos.arch().num_classes)?;
    let guide = Guided {
        pos,
        neg,
        omega,
        neg_condition,
        clip_x0,
    };
    sample(schedule, &guide, grid, cond, Corruption::None, rngs)
}

/// Settings for producing a positive offset `eta` by reward ascent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardTuneConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Range of the noise level as fractions of `T`.
    pub t_frac: (f64, f64),
}

impl Default for RewardTuneConfig {
    fn default() -> Self {
        Self {
            iterations: 20,
            batch_size: 128,
            lr: 1e-4,
            seed: 0,
            t_frac: (0.05, 0.5),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RewardTuneOutcome {
    pub net: ScoreNet,
    /// Mean reward of the one-step sample prediction at each iteration.
    pub rewards: Vec<f64>,
}

/// A few Adam steps maximising the reward of the one-step sample prediction
/// `x0_hat(add_noise(x0, s), s, c)` on real data.
pub fn reward_finetune(
    base: &ScoreNet,
    mixture: &GaussianMixture,
    schedule: &NoiseSchedule,
    r: &RewardFn,
    cfg: &RewardTuneConfig,
) -> Result<RewardTuneOutcome> {
    if cfg.batch_size == 0 || !(cfg.lr > 0.0) {
        return Err(Error::config(
            "reward tuning needs a positive batch size and lr",
        ));
    }
    let (lo, hi) = cfg.t_frac;
    if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo > hi {
        return Err(Error::config("bad t_frac range"));
    }
    let t_max = schedule.t_max();
    let t_lo = ((lo * t_max as f64).round() as usize).max(1);
    let t_hi = ((hi * t_max as f64).round() as usize).max(t_lo);
    let classes = mixture.classes();
    if classes.is_empty() {
        return Err(Error::config("data has no classes"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut net = base.clone();
    let mut adam = AdamState::new(net.params(), cfg.lr);
    let dim = mixture.dim();
    let mut rewards = Vec::with_capacity(cfg.iterations);
    for _ in 0..cfg.iterations {
        let b = cfg.batch_size;
        let mut x = Array2::zeros((b, dim));
        let mut t = Vec::with_capacity(b);
        let mut cond = Vec::with_capacity(b);
        for mut row in x.rows_mut() {
            let c = Condition::Class(classes[rng.random_range(0..classes.len())]);
            let x0 = mixture.sample_data(c, &mut rng, 1)?;
            let s = rng.random_range(t_lo..=t_hi);
            let e: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
            let xs = schedule.add_noise(&x0.row(0).to_vec(), s, &e)?;
            row.assign(&ndarray::ArrayView1::from(&xs[..]));
            t.push(s);
            cond.push(c);
        }
        let batch = Batch { x, t, cond };
        let (eps, cache) = net.forward_cached(&batch)?;
        let mut grad_out = Array2::zeros((b, dim));
        let mut total = 0.0;
        for i in 0..b {
            let s = batch.t[i];
            let xs = batch.x.row(i).to_vec();
            let x0_hat = eps_to_x0(&eps.row(i).to_vec(), &xs, schedule, s)?;
            total += reward(r, &x0_hat, batch.cond[i])?;
            let g = reward_grad(r, &x0_hat, batch.cond[i])?;
            let chain = schedule.sigma(s) / schedule.alpha(s);
            for d in 0..dim {
                // loss = -mean R, and d x0_hat / d eps = -sigma / alpha
                grad_out[[i, d]] = g[d] * chain / b as f64;
            }
        }
        rewards.push(total / b as f64);
        let grads = net.backward(&cache, grad_out.view())?;
        let mut next = net.params().clone();
        adam.apply(&mut next, &grads)?;
        if !next.all_finite() {
            return Err(Error::TrainingDivergence(
                "non-finite parameters in reward tuning".into(),
            ));
        }
        *net.params_mut() = next;
    }
    Ok(RewardTuneOutcome { net, rewards })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Arch;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn arch() -> Arch {
        Arch {
            input_dim: 2,
            hidden: vec![8],
            time_embed_dim: 4,
            cond_embed_dim: 2,
            num_classes: 3,
            t_max: 50,
        }
    }

    fn net(seed: u64) -> ScoreNet {
        ScoreNet::init(arch(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn mixing_cases() {
        let theta = net(1).into_params();
        let delta = net(2).into_params();
        let neg_delta = delta.axpy(&[(-2.0, &delta)]).unwrap();
        let off = WeightOffsets::new(theta.clone(), Some(neg_delta), delta.clone()).unwrap();
        assert_eq!(mix_negative(&off, 0.0, 0.0).unwrap(), theta);
        assert_eq!(
            mix_negative(&off, 0.0, 1.0).unwrap(),
            theta.axpy(&[(1.0, &delta)]).unwrap()
        );
        let cancel = mix_negative(&off, 1.0, 1.0).unwrap();
        assert!(cancel.max_abs_diff(&theta).unwrap() < 1e-15);

        let no_eta = WeightOffsets::new(theta, None, delta).unwrap();
        assert!(matches!(
            mix_negative(&no_eta, 0.5, 1.0),
            Err(Error::Configuration(_))
        ));
        assert!(mix_negative(&no_eta, 0.0, 1.5).is_err());
    }

    #[test]
    fn offsets_from_checkpoints_round_trip() {
        let theta = net(1).into_params();
        let neg = net(3).into_params();
        let off = WeightOffsets::from_checkpoints(&theta, None, &neg).unwrap();
        let back = mix_negative(&off, 0.0, 1.0).unwrap();
        assert!(back.max_abs_diff(&neg).unwrap() < 1e-15);
    }

    #[test]
    fn omega_zero_ignores_negative() {
        let s = NoiseSchedule::cosine(50).unwrap();
        let grid = StepGrid::full(&s, 6).unwrap();
        let cond = [Condition::Class(0), Condition::Class(2)];
        let pos = net(1);
        let run = |neg: &ScoreNet| {
            let mut rngs: Vec<ChaCha8Rng> = (0..2).map(ChaCha8Rng::seed_from_u64).collect();
            guided_sample(
                &pos,
                neg,
                &s,
                &grid,
                &cond,
                0.0,
                Condition::Null,
                None,
                &mut rngs,
            )
            .unwrap()
        };
        let a = run(&net(5));
        let b = run(&net(6));
        assert_eq!(a.x0, b.x0);
        assert_eq!(a.nfe, 6);
    }

    #[test]
    fn same_weights_and_condition_is_plain_conditional_sampling() {
        let s = NoiseSchedule::cosine(50).unwrap();
        let grid = StepGrid::full(&s, 6).unwrap();
        let cond = [Condition::Class(1); 3];
        let pos = net(1);
        let mut r1: Vec<ChaCha8Rng> = (0..3).map(ChaCha8Rng::seed_from_u64).collect();
        let mut r2 = r1.clone();
        let guided = guided_sample(
            &pos,
            &pos,
            &s,
            &grid,
            &cond,
            2.0,
            Condition::Class(1),
            None,
            &mut r1,
        )
        .unwrap();
        let plain = guided_sample(
            &pos,
            &pos,
            &s,
            &grid,
            &cond,
            0.0,
            Condition::Null,
            None,
            &mut r2,
        )
        .unwrap();
        assert!(guided
            .x0
            .iter()
            .zip(plain.x0.iter())
            .all(|(a, b)| (a - b).abs() < 1e-9 * a.abs().max(1.0)));
    }

    #[test]
    fn architecture_mismatch_rejected() {
        let s = NoiseSchedule::cosine(50).unwrap();
        let grid = StepGrid::full(&s, 3).unwrap();
        let other = ScoreNet::init(
            Arch {
                hidden: vec![9],
                ..arch()
            },
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap();
        let mut rngs = vec![ChaCha8Rng::seed_from_u64(0)];
        let err = guided_sample(
            &net(1),
            &other,
            &s,
            &grid,
            &[Condition::Null],
            1.0,
            Condition::Null,
            None,
            &mut rngs,
        );
        assert!(matches!(err, Err(Error::Configuration(_))));
    }

    proptest! {
        #[test]
        fn mixing_is_linear(a in 0.0f64..1.0, b in 0.0f64..1.0, seed in 0u64..1000) {
            let theta = net(seed).into_params();
            let eta = net(seed + 1).into_params();
            let delta = net(seed + 2).into_params();
            let off = WeightOffsets::new(theta.clone(), Some(eta.clone()), delta.clone()).unwrap();
            let mixed = mix_negative(&off, a, b).unwrap();
            for ((_, m), ((_, t), ((_, e), (_, d)))) in mixed.iter().zip(theta.iter().zip(eta.iter().zip(delta.iter()))) {
                for i in 0..m.len() {
                    let want = t.as_slice().unwrap()[i] + a * e.as_slice().unwrap()[i] + b * d.as_slice().unwrap()[i];
                    prop_assert!((m.as_slice().unwrap()[i] - want).abs() < 1e-12);
                }
            }
        }
    }
}
