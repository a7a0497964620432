//! Truncated diffusion fine-tuning.
//!
//! The reference model is run for a few DDIM steps from `t'` down to `t`
//! (starting either from pure noise at `T` or from real data noised to
//! `t'`). Its posterior-mean prediction at `t` becomes the regression
//! target, and the student sees `x_s` obtained by re-noising `x_t` forward
//! to some `s >= t`. The full-simulation baseline is the special plan that
//! runs the whole grid and lands on the final sample.

use ndarray::{Array2, ArrayView1, ArrayView2};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::condition::Condition;
use crate::diffusion::{eps_to_x0, run_chain, Corruption, Guided};
use crate::error::{Error, Result};
use crate::nn::{AdamState, Batch, ParamSet, ScoreNet};
use crate::oracle::GaussianMixture;
use crate::schedule::{NoiseSchedule, StepGrid};

/// Where a truncated reference chain starts and stops.
///
/// `t = 0` marks the full-simulation plan: the chain covers the whole grid
/// and its final sample prediction is used both as the target and as the
/// "noisy" state, so re-noising reduces to the ordinary forward process.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TruncationPlan {
    t_prime: usize,
    t: usize,
    grid: StepGrid,
}

impl TruncationPlan {
    pub fn new(t_prime: usize, t: usize, grid: StepGrid) -> Result<Self> {
        if grid.first() != t_prime {
            return Err(Error::invalid(format!(
                "grid starts at {}, plan starts at {t_prime}",
                grid.first()
            )));
        }
        if t != 0 && grid.last() != t {
            return Err(Error::invalid(format!(
                "grid ends at {}, plan ends at {t}",
                grid.last()
            )));
        }
        Ok(Self { t_prime, t, grid })
    }

    /// `k` evenly spaced evaluation points from `t_prime` down to `t`.
    pub fn uniform(t_prime: usize, t: usize, k: usize) -> Result<Self> {
        if t == 0 || t > t_prime {
            return Err(Error::invalid(format!(
                "need 1 <= t <= t' (got t={t}, t'={t_prime})"
            )));
        }
        Self::new(t_prime, t, StepGrid::uniform(t_prime, t, k)?)
    }

    /// The untruncated baseline: `k` points from `T` down to `1`, landing on
    /// the final sample.
    pub fn full_simulation(schedule: &NoiseSchedule, k: usize) -> Result<Self> {
        Self::new(schedule.t_max(), 0, StepGrid::full(schedule, k)?)
    }

    pub fn t_prime(&self) -> usize {
        self.t_prime
    }

    pub fn t(&self) -> usize {
        self.t
    }

    pub fn grid(&self) -> &StepGrid {
        &self.grid
    }

    pub fn is_full_simulation(&self) -> bool {
        self.t == 0
    }

    /// Network evaluations per generated example.
    pub fn nfe_per_chain(&self, omega: f64) -> u64 {
        self.grid.len() as u64 * if omega == 0.0 { 1 } else { 2 }
    }
}

/// One self-generated training record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruncatedSample {
    pub x_t_ref: Vec<f64>,
    pub t: usize,
    /// Posterior-mean target `x_{t->0}`.
    pub x_t_to_0: Vec<f64>,
    pub condition: Condition,
}

#[derive(Debug, Clone)]
pub struct Trajectories {
    pub samples: Vec<TruncatedSample>,
    /// Network evaluations per record.
    pub nfe: u64,
}

/// Runs the reference sampler along `plan` for every row of `cond`.
///
/// With `x0_real` the chain starts from `add_noise(x0_real, t')`; without it
/// `t'` must be `T` and the chain starts from `N(0, I)`. Each row draws its
/// start noise (and any corruption noise) from its own generator.
pub fn truncated_trajectory<R: Rng>(
    schedule: &NoiseSchedule,
    reference: &Guided<'_>,
    plan: &TruncationPlan,
    x0_real: Option<ArrayView2<f64>>,
    cond: &[Condition],
    corruption: Corruption,
    rngs: &mut [R],
) -> Result<Trajectories> {
    let rows = cond.len();
    if rngs.len() != rows {
        return Err(Error::invalid(format!(
            "{} generators for {rows} chains",
            rngs.len()
        )));
    }
    let dim = reference.pos.input_dim();
    let x_start = match x0_real {
        Some(x0) => {
            if x0.dim() != (rows, dim) {
                return Err(Error::ShapeMismatch(format!(
                    "real data {:?}, expected ({rows}, {dim})",
                    x0.dim()
                )));
            }
            let mut x = Array2::zeros((rows, dim));
            for ((src, mut dst), rng) in
                x0.rows().into_iter().zip(x.rows_mut()).zip(rngs.iter_mut())
            {
                let eps: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
                let noised = schedule.add_noise(&src.to_vec(), plan.t_prime, &eps)?;
                dst.assign(&ArrayView1::from(&noised[..]));
            }
            x
        }
        None => {
            if plan.t_prime != schedule.t_max() {
                return Err(Error::invalid(format!(
                    "without real data the chain must start at T={}, plan starts at {}",
                    schedule.t_max(),
                    plan.t_prime
                )));
            }
            crate::diffusion::initial_noise(rngs, dim)
        }
    };
    let end = run_chain(
        schedule, reference, x_start, &plan.grid, cond, corruption, rngs,
    )?;
    let mut samples = Vec::with_capacity(rows);
    for ((x, eps), &c) in end.x.rows().into_iter().zip(end.eps.rows()).zip(cond) {
        let x = x.to_vec();
        let target = eps_to_x0(&eps.to_vec(), &x, schedule, end.t)?;
        let (x_t_ref, t) = if plan.is_full_simulation() {
            (target.clone(), 0)
        } else {
            (x, end.t)
        };
        samples.push(TruncatedSample {
            x_t_ref,
            t,
            x_t_to_0: target,
            condition: c,
        });
    }
    Ok(Trajectories {
        samples,
        nfe: end.nfe,
    })
}

fn check_s(schedule: &NoiseSchedule, s: usize) -> Result<()> {
    if s == 0 || s > schedule.t_max() {
        return Err(Error::RejectedRange(format!(
            "re-noising level s={s} outside 1..={}",
            schedule.t_max()
        )));
    }
    Ok(())
}

/// The rejected rule `x_s = alpha_s x_{t->0} + sigma_s noise`; it discards
/// the posterior spread around the target.
pub fn renoise_naive(
    x_t_to_0: &[f64],
    schedule: &NoiseSchedule,
    s: usize,
    noise: &[f64],
) -> Result<Vec<f64>> {
    check_s(schedule, s)?;
    schedule.add_noise(x_t_to_0, s, noise)
}

/// Forward transition `q(x_s | x_t)`:
/// `x_s = (alpha_s/alpha_t) x_t + sqrt(sigma_s^2 - sigma_t^2 alpha_s^2/alpha_t^2) noise`.
pub fn renoise_corrected(
    x_t_ref: &[f64],
    schedule: &NoiseSchedule,
    t: usize,
    s: usize,
    noise: &[f64],
) -> Result<Vec<f64>> {
    check_s(schedule, s)?;
    schedule.check_t(t)?;
    if x_t_ref.len() != noise.len() {
        return Err(Error::ShapeMismatch(format!(
            "state has {} entries, noise has {}",
            x_t_ref.len(),
            noise.len()
        )));
    }
    if s < t {
        return Err(Error::RejectedRange(format!(
            "cannot re-noise from t={t} down to the less noisy s={s}"
        )));
    }
    let ratio = schedule.alpha(s) / schedule.alpha(t);
    let carried = schedule.sigma(t) * ratio;
    let var = schedule.sigma(s).powi(2) - carried * carried;
    if var < -1e-12 {
        return Err(Error::RejectedRange(format!(
            "noise variance {var} < 0 for t={t}, s={s}"
        )));
    }
    let scale = var.max(0.0).sqrt();
    Ok(x_t_ref
        .iter()
        .zip(noise)
        .map(|(x, e)| ratio * x + scale * e)
        .collect())
}

/// Per-example weight on the squared `x0` error.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossWeighting {
    /// Plain `||x0_hat - target||^2`.
    Unit,
    /// Scaled by `alpha_s^2 / sigma_s^2`, which equals the epsilon-space error.
    #[default]
    Snr,
}

impl LossWeighting {
    pub fn weight(self, schedule: &NoiseSchedule, s: usize) -> f64 {
        match self {
            LossWeighting::Unit => 1.0,
            LossWeighting::Snr => schedule.snr(s),
        }
    }
}

impl std::str::FromStr for LossWeighting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unit" => Ok(LossWeighting::Unit),
            "snr" => Ok(LossWeighting::Snr),
            _ => Err(Error::invalid(format!("unknown loss weighting `{s}`"))),
        }
    }
}

impl std::fmt::Display for LossWeighting {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LossWeighting::Unit => "unit",
            LossWeighting::Snr => "snr",
        })
    }
}

/// Student inputs for a batch of records: re-noising level, noise and the
/// condition actually shown to the student (possibly dropped to null).
#[derive(Debug, Clone)]
pub struct StudentDraw {
    pub s: Vec<usize>,
    pub noise: Array2<f64>,
    pub cond: Vec<Condition>,
}

impl StudentDraw {
    /// `s ~ U{max(t,1)..=T}`, standard-normal noise, and the record's own
    /// condition replaced by null with probability `cond_dropout`.
    pub fn sample<R: Rng + ?Sized>(
        samples: &[TruncatedSample],
        schedule: &NoiseSchedule,
        cond_dropout: f64,
        rng: &mut R,
    ) -> Self {
        let dim = samples.first().map_or(0, |r| r.x_t_ref.len());
        let t_max = schedule.t_max();
        let s = samples
            .iter()
            .map(|r| rng.random_range(r.t.max(1)..=t_max))
            .collect();
        let noise =
            Array2::from_shape_simple_fn((samples.len(), dim), || rng.sample(StandardNormal));
        let cond = samples
            .iter()
            .map(|r| {
                if rng.random::<f64>() < cond_dropout {
                    Condition::Null
                } else {
                    r.condition
                }
            })
            .collect();
        Self { s, noise, cond }
    }
}

#[derive(Debug, Clone)]
pub struct LossOutput {
    pub loss: f64,
    pub grads: ParamSet,
}

/// Mean over the batch of `w(s) ||x0_hat(x_s, s, c) - x_{t->0}||^2`, where
/// `x_s` comes from [`renoise_corrected`] and `x0_hat` is the student's
/// epsilon output converted to a sample prediction.
pub fn tdft_loss(
    student: &ScoreNet,
    samples: &[TruncatedSample],
    schedule: &NoiseSchedule,
    draw: &StudentDraw,
    weighting: LossWeighting,
) -> Result<LossOutput> {
    let n = samples.len();
    if n == 0 {
        return Err(Error::invalid("empty batch"));
    }
    if draw.s.len() != n || draw.cond.len() != n || draw.noise.nrows() != n {
        return Err(Error::invalid("student draw does not match the batch size"));
    }
    let dim = student.arch().input_dim;
    let mut x = Array2::zeros((n, dim));
    for ((r, (&s, noise)), mut dst) in samples
        .iter()
        .zip(draw.s.iter().zip(draw.noise.rows()))
        .zip(x.rows_mut())
    {
        if r.x_t_ref.len() != dim || r.x_t_to_0.len() != dim {
            return Err(Error::ShapeMismatch(format!(
                "record of dimension {}, network expects {dim}",
                r.x_t_ref.len()
            )));
        }
        let xs = renoise_corrected(&r.x_t_ref, schedule, r.t, s, &noise.to_vec())?;
        dst.assign(&ArrayView1::from(&xs[..]));
    }
    let batch = Batch {
        x,
        t: draw.s.clone(),
        cond: draw.cond.clone(),
    };
    let (eps, cache) = student.forward_cached(&batch)?;
    let mut loss = 0.0;
    let mut grad_out = Array2::zeros((n, dim));
    for i in 0..n {
        let s = draw.s[i];
        let (a, sg) = (schedule.alpha(s), schedule.sigma(s));
        let w = weighting.weight(schedule, s);
        let xs = batch.x.row(i).to_vec();
        let x0_hat = eps_to_x0(&eps.row(i).to_vec(), &xs, schedule, s)?;
        for d in 0..dim {
            let r = x0_hat[d] - samples[i].x_t_to_0[d];
            loss += w * r * r;
            grad_out[[i, d]] = w * 2.0 * r * (-sg / a) / n as f64;
        }
    }
    loss /= n as f64;
    if !loss.is_finite() {
        return Err(Error::TrainingDivergence(format!("non-finite loss {loss}")));
    }
    let grads = student.backward(&cache, grad_out.view())?;
    Ok(LossOutput { loss, grads })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PlanMode {
    Truncated,
    FullSimulation,
}

impl std::str::FromStr for PlanMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "truncated" => Ok(PlanMode::Truncated),
            "full-simulation" | "full" => Ok(PlanMode::FullSimulation),
            _ => Err(Error::invalid(format!("unknown plan mode `{s}`"))),
        }
    }
}

impl std::fmt::Display for PlanMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PlanMode::Truncated => "truncated",
            PlanMode::FullSimulation => "full-simulation",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FineTuneConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub mode: PlanMode,
    /// Evaluation points of a truncated plan.
    pub k: usize,
    /// Evaluation points of the full-simulation plan.
    pub full_k: usize,
    /// Start truncated chains from noised real data instead of `x_T`.
    pub real_data: bool,
    /// Range of `t'` as fractions of `T` (used with real data).
    pub t_prime_frac: (f64, f64),
    /// Range of `t` as fractions of `T`.
    pub t_frac: (f64, f64),
    /// Guidance scale of the reference during self-generation.
    pub omega: f64,
    pub neg_condition: Condition,
    pub corruption: Corruption,
    /// Bound on the reference's implied `x0` during self-generation.
    pub clip_x0: Option<f64>,
    pub cond_dropout: f64,
    pub weighting: LossWeighting,
}

impl Default for FineTuneConfig {
    fn default() -> Self {
        Self {
            iterations: 1000,
            batch_size: 80,
            lr: 1e-4,
            seed: 0,
            mode: PlanMode::Truncated,
            k: 5,
            full_k: 25,
            real_data: true,
            t_prime_frac: (0.5, 1.0),
            t_frac: (0.1, 0.6),
            omega: 2.0,
            neg_condition: Condition::Null,
            corruption: Corruption::None,
            clip_x0: None,
            cond_dropout: 0.1,
            weighting: LossWeighting::Snr,
        }
    }
}

fn frac_range(
    schedule: &NoiseSchedule,
    (lo, hi): (f64, f64),
    what: &str,
) -> Result<(usize, usize)> {
    if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo > hi {
        return Err(Error::config(format!(
            "{what} range ({lo}, {hi}) must satisfy 0 <= lo <= hi <= 1"
        )));
    }
    let t_max = schedule.t_max() as f64;
    let a = ((lo * t_max).round() as usize).max(1);
    let b = ((hi * t_max).round() as usize).max(a);
    Ok((a, b))
}

impl FineTuneConfig {
    pub fn validate(&self, schedule: &NoiseSchedule) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("lr must be positive"));
        }
        if self.k == 0 || self.full_k == 0 {
            return Err(Error::config("step counts must be positive"));
        }
        if !(0.0..=1.0).contains(&self.cond_dropout) {
            return Err(Error::config("cond_dropout must lie in [0, 1]"));
        }
        if !(self.omega >= 0.0 && self.omega.is_finite()) {
            return Err(Error::config("omega must be >= 0"));
        }
        if matches!(self.clip_x0, Some(c) if !(c > 0.0 && c.is_finite())) {
            return Err(Error::config("clip_x0 must be positive"));
        }
        frac_range(schedule, self.t_prime_frac, "t_prime")?;
        frac_range(schedule, self.t_frac, "t")?;
        StepGrid::full(schedule, self.full_k)?;
        Ok(())
    }

    /// Draws one truncation plan.
    ///
    /// With real data `t' ~ U[t_prime_frac]`, otherwise `t' = T`; then
    /// `t ~ U[t_frac]`, capped so the grid fits `k` distinct points.
    pub fn sample_plan<R: Rng + ?Sized>(
        &self,
        schedule: &NoiseSchedule,
        rng: &mut R,
    ) -> Result<TruncationPlan> {
        if self.mode == PlanMode::FullSimulation {
            return TruncationPlan::full_simulation(schedule, self.full_k);
        }
        let (t_lo, t_hi) = frac_range(schedule, self.t_frac, "t")?;
        let gap = self.k - 1;
        if gap == 0 {
            // a single evaluation point: the chain starts where it stops
            if !self.real_data {
                return Err(Error::config(
                    "one evaluation point needs real data to start below T",
                ));
            }
            let t = rng.random_range(t_lo..=t_hi);
            return TruncationPlan::uniform(t, t, 1);
        }
        let t_prime = if self.real_data {
            let (lo, hi) = frac_range(schedule, self.t_prime_frac, "t_prime")?;
            rng.random_range(lo.max(t_lo + gap)..=hi.max(t_lo + gap))
        } else {
            schedule.t_max()
        };
        if t_prime > schedule.t_max() || t_prime < 1 + gap {
            return Err(Error::config(format!(
                "cannot fit {} grid points below t'={t_prime}",
                self.k
            )));
        }
        let hi = t_hi.min(t_prime - gap);
        let lo = t_lo.min(hi);
        let t = rng.random_range(lo..=hi);
        TruncationPlan::uniform(t_prime, t, self.k)
    }
}

/// Result of a fine-tuning run.
#[derive(Debug, Clone)]
pub struct FineTuneOutcome {
    /// Last parameters with a finite loss.
    pub student: ScoreNet,
    pub losses: Vec<f64>,
    pub iterations: usize,
    /// Reference evaluations spent generating training data.
    pub generation_nfe: u64,
    /// Student forward passes (one per training example).
    pub training_nfe: u64,
    pub divergence: Option<String>,
}

/// Stateful fine-tuning loop; each [`FineTuner::step`] generates one batch
/// of records with the frozen reference and takes one Adam step.
pub struct FineTuner<'a> {
    reference: &'a ScoreNet,
    mixture: &'a GaussianMixture,
    schedule: &'a NoiseSchedule,
    cfg: FineTuneConfig,
    student: ScoreNet,
    adam: AdamState,
    rng: ChaCha8Rng,
    classes: Vec<usize>,
    losses: Vec<f64>,
    generation_nfe: u64,
    training_nfe: u64,
}

impl<'a> FineTuner<'a> {
    pub fn new(
        reference: &'a ScoreNet,
        mixture: &'a GaussianMixture,
        schedule: &'a NoiseSchedule,
        cfg: FineTuneConfig,
    ) -> Result<Self> {
        cfg.validate(schedule)?;
        if reference.arch().t_max != schedule.t_max() {
            return Err(Error::config(format!(
                "network trained for T={}, schedule has T={}",
                reference.arch().t_max,
                schedule.t_max()
            )));
        }
        if reference.arch().input_dim != mixture.dim() {
            return Err(Error::config("network and data dimensions differ"));
        }
        let classes = mixture.classes();
        if classes.is_empty() {
            return Err(Error::config("data has no classes to condition on"));
        }
        for &c in &classes {
            Condition::Class(c).check(reference.arch().num_classes)?;
        }
        cfg.neg_condition.check(reference.arch().num_classes)?;
        let student = reference.clone();
        let adam = AdamState::new(student.params(), cfg.lr);
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        Ok(Self {
            reference,
            mixture,
            schedule,
            cfg,
            student,
            adam,
            rng,
            classes,
            losses: Vec::new(),
            generation_nfe: 0,
            training_nfe: 0,
        })
    }

    pub fn student(&self) -> &ScoreNet {
        &self.student
    }

    /// Generates a batch and returns it without training on it.
    pub fn generate(&mut self) -> Result<(TruncationPlan, Trajectories)> {
        let b = self.cfg.batch_size;
        let plan = self.cfg.sample_plan(self.schedule, &mut self.rng)?;
        let cond: Vec<Condition> = (0..b)
            .map(|_| Condition::Class(self.classes[self.rng.random_range(0..self.classes.len())]))
            .collect();
        let mut rngs: Vec<ChaCha8Rng> = (0..b)
            .map(|_| ChaCha8Rng::seed_from_u64(self.rng.next_u64()))
            .collect();
        let real = if self.cfg.real_data && !plan.is_full_simulation() {
            let mut x0 = Array2::zeros((b, self.mixture.dim()));
            for ((mut dst, &c), rng) in x0.rows_mut().into_iter().zip(&cond).zip(rngs.iter_mut()) {
                dst.assign(&self.mixture.sample_data(c, rng, 1)?.row(0));
            }
            Some(x0)
        } else {
            None
        };
        let guide = Guided::single(self.reference, self.cfg.omega, self.cfg.neg_condition)
            .with_clip(self.cfg.clip_x0);
        let traj = truncated_trajectory(
            self.schedule,
            &guide,
            &plan,
            real.as_ref().map(|x| x.view()),
            &cond,
            self.cfg.corruption,
            &mut rngs,
        )?;
        self.generation_nfe += traj.nfe * b as u64;
        Ok((plan, traj))
    }

    /// One iteration. On a non-finite loss or update the student is left at
    /// its previous parameters and a training-divergence error is returned.
    pub fn step(&mut self) -> Result<f64> {
        let (_, traj) = self.generate()?;
        let draw = StudentDraw::sample(
            &traj.samples,
            self.schedule,
            self.cfg.cond_dropout,
            &mut self.rng,
        );
        let out = tdft_loss(
            &self.student,
            &traj.samples,
            self.schedule,
            &draw,
            self.cfg.weighting,
        )?;
        self.training_nfe += traj.samples.len() as u64;
        let mut next = self.student.params().clone();
        self.adam.apply(&mut next, &out.grads)?;
        if !next.all_finite() {
            return Err(Error::TrainingDivergence(
                "non-finite parameters after update".into(),
            ));
        }
        *self.student.params_mut() = next;
        self.losses.push(out.loss);
        Ok(out.loss)
    }

    pub fn finish(self, divergence: Option<String>) -> FineTuneOutcome {
        FineTuneOutcome {
            iterations: self.losses.len(),
            student: self.student,
            losses: self.losses,
            generation_nfe: self.generation_nfe,
            training_nfe: self.training_nfe,
            divergence,
        }
    }
}

/// Fine-tunes a copy of `reference` on its own truncated generations.
/// A divergence stops the run early; the outcome then carries the last
/// good parameters and the reason.
pub fn self_npo_train(
    reference: &ScoreNet,
    mixture: &GaussianMixture,
    schedule: &NoiseSchedule,
    cfg: &FineTuneConfig,
) -> Result<FineTuneOutcome> {
    let mut tuner = FineTuner::new(reference, mixture, schedule, cfg.clone())?;
    for _ in 0..cfg.iterations {
        match tuner.step() {
            Ok(_) => {}
            Err(Error::TrainingDivergence(msg)) => return Ok(tuner.finish(Some(msg))),
            Err(Error::SamplerDivergence { t }) => {
                return Ok(tuner.finish(Some(format!("reference sampler diverged at t={t}"))))
            }
            Err(e) => return Err(e),
        }
    }
    Ok(tuner.finish(None))
}

/// The full-simulation baseline: identical loop, every record generated by
/// the complete `full_k`-point sampler.
pub fn baseline_finetune(
    reference: &ScoreNet,
    mixture: &GaussianMixture,
    schedule: &NoiseSchedule,
    cfg: &FineTuneConfig,
) -> Result<FineTuneOutcome> {
    let cfg = FineTuneConfig {
        mode: PlanMode::FullSimulation,
        ..cfg.clone()
    };
    self_npo_train(reference, mixture, schedule, &cfg)
}

/// One baseline iteration on `tuner` (which must be in full-simulation mode).
pub fn baseline_finetune_step(tuner: &mut FineTuner<'_>) -> Result<f64> {
    if tuner.cfg.mode != PlanMode::FullSimulation {
        return Err(Error::config("baseline step needs a full-simulation tuner"));
    }
    tuner.step()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::sample;
    use crate::nn::Arch;
    use crate::oracle::OracleEps;

    fn sched() -> NoiseSchedule {
        NoiseSchedule::cosine(1000).unwrap()
    }

    fn small_net(t_max: usize, seed: u64) -> ScoreNet {
        let arch = Arch {
            input_dim: 2,
            hidden: vec![16, 16],
            time_embed_dim: 8,
            cond_embed_dim: 4,
            num_classes: 8,
            t_max,
        };
        ScoreNet::init(arch, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn corrected_renoise_endpoints() {
        let s = sched();
        let x = [0.4, -1.1];
        let e = [0.3, 0.8];
        assert_eq!(renoise_corrected(&x, &s, 300, 300, &e).unwrap(), x.to_vec());
        for level in [1, 2, 450, 1000] {
            assert_eq!(
                renoise_corrected(&x, &s, 0, level, &e).unwrap(),
                s.add_noise(&x, level, &e).unwrap()
            );
        }
        assert!(matches!(
            renoise_corrected(&x, &s, 500, 499, &e),
            Err(Error::RejectedRange(_))
        ));
        assert!(renoise_corrected(&x, &s, 10, 0, &e).is_err());
    }

    #[test]
    fn naive_renoise() {
        let s = sched();
        let x = [3.0, -2.0];
        let e = [0.1, 0.2];
        let top = renoise_naive(&x, &s, 1000, &e).unwrap();
        for d in 0..2 {
            assert!((top[d] - e[d]).abs() < 1e-3);
        }
        assert_eq!(
            renoise_naive(&x, &s, 77, &e).unwrap(),
            renoise_naive(&x, &s, 77, &e).unwrap()
        );
        assert!(renoise_naive(&x, &s, 0, &e).is_err());
    }

    #[test]
    fn plan_validation() {
        let s = sched();
        assert!(TruncationPlan::uniform(700, 300, 5).is_ok());
        assert!(TruncationPlan::uniform(300, 700, 5).is_err());
        assert!(TruncationPlan::uniform(300, 0, 5).is_err());
        assert!(TruncationPlan::new(700, 300, StepGrid::new(vec![700, 500]).unwrap()).is_err());
        let full = TruncationPlan::full_simulation(&s, 25).unwrap();
        assert_eq!((full.t_prime(), full.t(), full.grid().len()), (1000, 0, 25));
        assert_eq!(full.nfe_per_chain(2.0), 50);
    }

    #[test]
    fn zero_step_plan_gives_posterior_mean() {
        let s = sched();
        let gm = GaussianMixture::single(vec![0.4, -0.2], 0.3).unwrap();
        let oracle = OracleEps {
            mixture: &gm,
            schedule: &s,
        };
        let guide = Guided::single(&oracle, 0.0, Condition::Null);
        let plan = TruncationPlan::uniform(420, 420, 1).unwrap();
        let x0 = ndarray::array![[0.1, 0.2], [1.0, -1.0], [0.0, 0.0]];
        let mut rngs: Vec<ChaCha8Rng> = (0..3).map(ChaCha8Rng::seed_from_u64).collect();
        let cond = [Condition::Class(0); 3];
        let traj = truncated_trajectory(
            &s,
            &guide,
            &plan,
            Some(x0.view()),
            &cond,
            Corruption::None,
            &mut rngs,
        )
        .unwrap();
        assert_eq!(traj.nfe, 1);
        for r in &traj.samples {
            let pm = gm
                .posterior_mean(&s, &r.x_t_ref, 420, Condition::Class(0))
                .unwrap();
            for d in 0..2 {
                assert!((r.x_t_to_0[d] - pm[d]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn five_point_plan_costs_five_evaluations() {
        let s = sched();
        let gm = GaussianMixture::default_ring();
        let oracle = OracleEps {
            mixture: &gm,
            schedule: &s,
        };
        let guide = Guided::single(&oracle, 0.0, Condition::Null);
        let plan = TruncationPlan::uniform(1000, 400, 5).unwrap();
        let mut rngs: Vec<ChaCha8Rng> = (0..2).map(ChaCha8Rng::seed_from_u64).collect();
        let traj = truncated_trajectory(
            &s,
            &guide,
            &plan,
            None,
            &[Condition::Class(3); 2],
            Corruption::None,
            &mut rngs,
        )
        .unwrap();
        assert_eq!(traj.nfe, 5);
        assert!(traj.samples.iter().all(|r| r.t == 400));
    }

    #[test]
    fn degenerate_plans_reproduce_full_sampler() {
        let s = NoiseSchedule::cosine(200).unwrap();
        let net = small_net(200, 3);
        let guide = Guided::single(&net, 2.0, Condition::Null);
        let cond: Vec<Condition> = (0..6).map(|i| Condition::Class(i % 8)).collect();
        let seeds =
            || -> Vec<ChaCha8Rng> { (0..6).map(|i| ChaCha8Rng::seed_from_u64(40 + i)).collect() };
        let grid = StepGrid::full(&s, 25).unwrap();
        let full = sample(&s, &guide, &grid, &cond, Corruption::None, &mut seeds()).unwrap();

        let to_one = TruncationPlan::new(200, 1, grid.clone()).unwrap();
        let landed = TruncationPlan::full_simulation(&s, 25).unwrap();
        for plan in [to_one, landed] {
            let traj = truncated_trajectory(
                &s,
                &guide,
                &plan,
                None,
                &cond,
                Corruption::None,
                &mut seeds(),
            )
            .unwrap();
            assert_eq!(traj.nfe, full.nfe);
            for (r, row) in traj.samples.iter().zip(full.x0.rows()) {
                let bits: Vec<u64> = r.x_t_to_0.iter().map(|v| v.to_bits()).collect();
                let want: Vec<u64> = row.iter().map(|v| v.to_bits()).collect();
                assert_eq!(bits, want);
            }
        }
    }

    #[test]
    fn loss_zero_for_exact_student_and_closed_form_for_zero_net() {
        let s = sched();
        let net = small_net(1000, 8);
        let x_t = vec![0.3, -0.5];
        let rec = |target: Vec<f64>| TruncatedSample {
            x_t_ref: x_t.clone(),
            t: 250,
            x_t_to_0: target,
            condition: Condition::Class(2),
        };
        let draw = StudentDraw {
            s: vec![600],
            noise: ndarray::array![[0.7, -0.1]],
            cond: vec![Condition::Class(2)],
        };
        let xs = renoise_corrected(&x_t, &s, 250, 600, &[0.7, -0.1]).unwrap();
        let eps = net.forward(&xs, 600, Condition::Class(2)).unwrap();
        let own = eps_to_x0(&eps, &xs, &s, 600).unwrap();
        let out = tdft_loss(&net, &[rec(own)], &s, &draw, LossWeighting::Unit).unwrap();
        assert_eq!(out.loss, 0.0);
        assert!(out.grads.iter().all(|(_, g)| g.iter().all(|&v| v == 0.0)));

        let zero = ScoreNet::zeros(net.arch().clone()).unwrap();
        let target = vec![1.0, 2.0];
        let out = tdft_loss(
            &zero,
            &[rec(target.clone())],
            &s,
            &draw,
            LossWeighting::Unit,
        )
        .unwrap();
        let a = s.alpha(600);
        let want: f64 = (0..2).map(|d| (target[d] - xs[d] / a).powi(2)).sum();
        assert!((out.loss - want).abs() < 1e-12 * want.max(1.0));
        let snr = tdft_loss(&zero, &[rec(target)], &s, &draw, LossWeighting::Snr).unwrap();
        assert!((snr.loss - want * s.snr(600)).abs() < 1e-10);
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let s = NoiseSchedule::cosine(100).unwrap();
        let net = small_net(100, 21);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let samples: Vec<TruncatedSample> = (0..4)
            .map(|i| TruncatedSample {
                x_t_ref: vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)],
                t: 20 + i,
                x_t_to_0: vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)],
                condition: Condition::Class(i),
            })
            .collect();
        let draw = StudentDraw::sample(&samples, &s, 0.25, &mut rng);
        let out = tdft_loss(&net, &samples, &s, &draw, LossWeighting::Unit).unwrap();
        let h = 1e-5;
        for (name, g) in out.grads.iter() {
            for idx in 0..g.len().min(6) {
                let bump = |delta: f64| {
                    let mut p = net.params().clone();
                    p.slice_mut(name).unwrap()[idx] += delta;
                    let moved = net.with_params(p).unwrap();
                    tdft_loss(&moved, &samples, &s, &draw, LossWeighting::Unit)
                        .unwrap()
                        .loss
                };
                let numeric = (bump(h) - bump(-h)) / (2.0 * h);
                let analytic = g.as_slice().unwrap()[idx];
                let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-7);
                assert!(rel < 1e-4, "{name}[{idx}]: {analytic} vs {numeric}");
            }
        }
    }

    #[test]
    fn zero_iterations_return_reference() {
        let s = NoiseSchedule::cosine(100).unwrap();
        let net = small_net(100, 1);
        let gm = GaussianMixture::default_ring();
        let cfg = FineTuneConfig {
            iterations: 0,
            ..FineTuneConfig::default()
        };
        let out = self_npo_train(&net, &gm, &s, &cfg).unwrap();
        assert_eq!(out.student, net);
        assert_eq!((out.generation_nfe, out.training_nfe), (0, 0));
    }

    #[test]
    fn nfe_ratio_and_determinism() {
        let s = NoiseSchedule::cosine(100).unwrap();
        let net = small_net(100, 1);
        let gm = GaussianMixture::default_ring();
        let cfg = FineTuneConfig {
            iterations: 3,
            batch_size: 8,
            lr: 1e-3,
            seed: 9,
            ..FineTuneConfig::default()
        };
        let a = self_npo_train(&net, &gm, &s, &cfg).unwrap();
        let b = self_npo_train(&net, &gm, &s, &cfg).unwrap();
        assert_eq!(a.student, b.student);
        assert_ne!(a.student, net);
        let base = baseline_finetune(&net, &gm, &s, &cfg).unwrap();
        assert_eq!(a.generation_nfe, 3 * 8 * 5 * 2);
        assert_eq!(base.generation_nfe, 3 * 8 * 25 * 2);
        assert_eq!(a.generation_nfe as f64 / base.generation_nfe as f64, 0.2);
        assert_eq!(a.training_nfe, base.training_nfe);
    }

    #[test]
    fn plans_respect_ranges() {
        let s = sched();
        let cfg = FineTuneConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..500 {
            let p = cfg.sample_plan(&s, &mut rng).unwrap();
            assert!((500..=1000).contains(&p.t_prime()));
            assert!((100..=600).contains(&p.t()));
            assert_eq!(p.grid().len(), 5);
        }
        let k1 = FineTuneConfig {
            k: 1,
            real_data: false,
            ..cfg
        };
        assert!(k1.sample_plan(&s, &mut rng).is_err());
        let k1 = FineTuneConfig {
            real_data: true,
            ..k1
        };
        let p = k1.sample_plan(&s, &mut rng).unwrap();
        assert_eq!(p.t(), p.t_prime());
    }
}
