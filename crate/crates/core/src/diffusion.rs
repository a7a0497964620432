//! Prediction-space conversions, the posterior-mean (Tweedie) denoiser,
//! classifier-free guidance and the deterministic DDIM sampler.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::condition::Condition;
use crate::error::{Error, Result};
use crate::nn::ScoreNet;
use crate::schedule::{NoiseSchedule, StepGrid};

fn same_len(a: &[f64], b: &[f64], what: &str) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch(format!(
            "{what}: {} vs {} entries",
            a.len(),
            b.len()
        )));
    }
    Ok(())
}

fn alpha_nonzero(schedule: &NoiseSchedule, t: usize) -> Result<f64> {
    schedule.check_t(t)?;
    let a = schedule.alpha(t);
    if a == 0.0 {
        return Err(Error::SingularTimestep { t, what: "alpha" });
    }
    Ok(a)
}

fn sigma_nonzero(schedule: &NoiseSchedule, t: usize) -> Result<f64> {
    schedule.check_t(t)?;
    let s = schedule.sigma(t);
    if s == 0.0 {
        return Err(Error::SingularTimestep { t, what: "sigma" });
    }
    Ok(s)
}

/// Sample prediction `(x_t - sigma_t * eps) / alpha_t`.
pub fn eps_to_x0(eps: &[f64], x_t: &[f64], schedule: &NoiseSchedule, t: usize) -> Result<Vec<f64>> {
    same_len(eps, x_t, "eps_to_x0")?;
    let a = alpha_nonzero(schedule, t)?;
    let s = schedule.sigma(t);
    Ok(x_t.iter().zip(eps).map(|(x, e)| (x - s * e) / a).collect())
}

/// Inverse of [`eps_to_x0`]: `(x_t - alpha_t * x0) / sigma_t`.
pub fn x0_to_eps(x0: &[f64], x_t: &[f64], schedule: &NoiseSchedule, t: usize) -> Result<Vec<f64>> {
    same_len(x0, x_t, "x0_to_eps")?;
    let s = sigma_nonzero(schedule, t)?;
    let a = schedule.alpha(t);
    Ok(x_t.iter().zip(x0).map(|(x, x0)| (x - a * x0) / s).collect())
}

/// `eps = -sigma_t * score`.
pub fn score_to_eps(score: &[f64], schedule: &NoiseSchedule, t: usize) -> Result<Vec<f64>> {
    let s = sigma_nonzero(schedule, t)?;
    Ok(score.iter().map(|v| -s * v).collect())
}

/// `score = -eps / sigma_t`.
pub fn eps_to_score(eps: &[f64], schedule: &NoiseSchedule, t: usize) -> Result<Vec<f64>> {
    let s = sigma_nonzero(schedule, t)?;
    Ok(eps.iter().map(|v| -v / s).collect())
}

/// Posterior mean `E[x0 | x_t] = (x_t + sigma_t^2 * score) / alpha_t`; exact
/// when `score` is the true score of the noisy marginal.
pub fn tweedie_x0(
    x_t: &[f64],
    score: &[f64],
    schedule: &NoiseSchedule,
    t: usize,
) -> Result<Vec<f64>> {
    same_len(x_t, score, "tweedie_x0")?;
    let a = alpha_nonzero(schedule, t)?;
    let s2 = schedule.sigma(t).powi(2);
    Ok(x_t
        .iter()
        .zip(score)
        .map(|(x, g)| (x + s2 * g) / a)
        .collect())
}

/// Epsilon-form guidance `(omega + 1) * eps_pos - omega * eps_neg`.
pub fn cfg_combine(eps_pos: &[f64], eps_neg: &[f64], omega: f64) -> Result<Vec<f64>> {
    same_len(eps_pos, eps_neg, "cfg_combine")?;
    Ok(eps_pos
        .iter()
        .zip(eps_neg)
        .map(|(p, n)| (omega + 1.0) * p - omega * n)
        .collect())
}

/// Score-form guidance `score_pos + omega * (score_pos - score_neg)`.
pub fn cfg_combine_score(score_pos: &[f64], score_neg: &[f64], omega: f64) -> Result<Vec<f64>> {
    same_len(score_pos, score_neg, "cfg_combine_score")?;
    Ok(score_pos
        .iter()
        .zip(score_neg)
        .map(|(p, n)| p + omega * (p - n))
        .collect())
}

/// Deterministic DDIM transition from `t_from` to `t_to` given the epsilon
/// prediction at `t_from`. Landing on `t = 0` returns the sample prediction
/// itself.
pub fn ddim_update(
    schedule: &NoiseSchedule,
    x_t: &[f64],
    eps: &[f64],
    t_from: usize,
    t_to: usize,
) -> Result<Vec<f64>> {
    schedule.check_t(t_to)?;
    if t_to > t_from {
        return Err(Error::RejectedRange(format!(
            "DDIM step must not increase the timestep ({t_from} -> {t_to})"
        )));
    }
    if t_to == t_from {
        return Ok(x_t.to_vec());
    }
    let x0 = eps_to_x0(eps, x_t, schedule, t_from)?;
    if t_to == 0 {
        return Ok(x0);
    }
    let (a, s) = (schedule.alpha(t_to), schedule.sigma(t_to));
    Ok(x0.iter().zip(eps).map(|(x, e)| a * x + s * e).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PredictionKind {
    Epsilon,
    X0,
    Score,
}

/// A network output at timestep `t`, in one of the three equivalent
/// parameterisations.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub kind: PredictionKind,
    pub value: Vec<f64>,
    pub t: usize,
}

impl Prediction {
    pub fn to_eps(&self, x_t: &[f64], schedule: &NoiseSchedule) -> Result<Vec<f64>> {
        match self.kind {
            PredictionKind::Epsilon => Ok(self.value.clone()),
            PredictionKind::X0 => x0_to_eps(&self.value, x_t, schedule, self.t),
            PredictionKind::Score => score_to_eps(&self.value, schedule, self.t),
        }
    }

    pub fn convert(
        &self,
        kind: PredictionKind,
        x_t: &[f64],
        schedule: &NoiseSchedule,
    ) -> Result<Prediction> {
        if kind == self.kind {
            return Ok(self.clone());
        }
        let eps = self.to_eps(x_t, schedule)?;
        let value = match kind {
            PredictionKind::Epsilon => eps,
            PredictionKind::X0 => eps_to_x0(&eps, x_t, schedule, self.t)?,
            PredictionKind::Score => eps_to_score(&eps, schedule, self.t)?,
        };
        Ok(Prediction {
            kind,
            value,
            t: self.t,
        })
    }
}

/// Guidance scale, weight-mixing coefficients and the negative condition.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GuidanceConfig {
    pub omega: f64,
    pub alpha: f64,
    pub beta: f64,
    pub neg_condition: Condition,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            omega: 0.0,
            alpha: 0.0,
            beta: 1.0,
            neg_condition: Condition::Null,
        }
    }
}

impl GuidanceConfig {
    pub fn cfg(omega: f64) -> Self {
        Self {
            omega,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.omega >= 0.0 && self.omega.is_finite()) {
            return Err(Error::invalid(format!(
                "omega must be >= 0, got {}",
                self.omega
            )));
        }
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::invalid(format!(
                    "{name} must lie in [0, 1], got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Deliberate degradation of the sampling chain.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub enum Corruption {
    #[default]
    None,
    /// Keep only every `j`-th grid step (the last one always survives).
    StepSkip(usize),
    /// Add `gamma * sigma_t * N(0, I)` after each transition.
    ExtraNoise(f64),
}

impl fmt::Display for Corruption {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Corruption::None => f.write_str("none"),
            Corruption::StepSkip(j) => write!(f, "step-skip:{j}"),
            Corruption::ExtraNoise(g) => write!(f, "extra-noise:{g}"),
        }
    }
}

impl FromStr for Corruption {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || {
            Error::invalid(format!(
                "bad corruption `{s}` (none | step-skip:J | extra-noise:GAMMA)"
            ))
        };
        match s.split_once(':') {
            None if s == "none" => Ok(Corruption::None),
            Some(("step-skip", j)) => {
                let j: usize = j.parse().map_err(|_| bad())?;
                if j == 0 {
                    return Err(bad());
                }
                Ok(Corruption::StepSkip(j))
            }
            Some(("extra-noise", g)) => {
                let g: f64 = g.parse().map_err(|_| bad())?;
                if !(g >= 0.0 && g.is_finite()) {
                    return Err(bad());
                }
                Ok(Corruption::ExtraNoise(g))
            }
            _ => Err(bad()),
        }
    }
}

/// Anything that predicts epsilon for a batch sharing one timestep.
pub trait EpsModel {
    fn predict_eps(&self, x: ArrayView2<f64>, t: usize, cond: &[Condition]) -> Result<Array2<f64>>;

    fn input_dim(&self) -> usize;
}

impl EpsModel for ScoreNet {
    fn predict_eps(&self, x: ArrayView2<f64>, t: usize, cond: &[Condition]) -> Result<Array2<f64>> {
        self.forward_batch(x, &vec![t; x.nrows()], cond)
    }

    fn input_dim(&self) -> usize {
        self.arch().input_dim
    }
}

/// A positive and a negative epsilon model combined by classifier-free
/// guidance. With `omega = 0` the negative model is never evaluated.
///
/// `clip_x0` bounds the implied `x0` prediction to `[-c, c]` per coordinate
/// inside the samplers; epsilon is re-derived only for rows that were
/// actually clipped.
#[derive(Clone, Copy)]
pub struct Guided<'a> {
    pub pos: &'a dyn EpsModel,
    pub neg: &'a dyn EpsModel,
    pub omega: f64,
    pub neg_condition: Condition,
    pub clip_x0: Option<f64>,
}

impl<'a> Guided<'a> {
    /// Vanilla guidance with one model for both branches.
    pub fn single(model: &'a dyn EpsModel, omega: f64, neg_condition: Condition) -> Self {
        Self {
            pos: model,
            neg: model,
            omega,
            neg_condition,
            clip_x0: None,
        }
    }

    pub fn with_clip(mut self, clip_x0: Option<f64>) -> Self {
        self.clip_x0 = clip_x0;
        self
    }

    pub fn evals_per_step(&self) -> u64 {
        if self.omega == 0.0 {
            1
        } else {
            2
        }
    }

    /// Guided epsilon; adds one evaluation per row per branch to `nfe`.
    pub fn eps(
        &self,
        x: ArrayView2<f64>,
        t: usize,
        cond: &[Condition],
        nfe: &mut u64,
    ) -> Result<Array2<f64>> {
        let rows = x.nrows() as u64;
        let pos = self.pos.predict_eps(x, t, cond)?;
        *nfe += rows;
        if self.omega == 0.0 {
            return Ok(pos);
        }
        let neg_cond = vec![self.neg_condition; x.nrows()];
        let neg = self.neg.predict_eps(x, t, &neg_cond)?;
        *nfe += rows;
        let mut out = pos;
        for (mut p, n) in out.rows_mut().into_iter().zip(neg.rows()) {
            let mixed = cfg_combine(
                p.as_slice().expect("row-major"),
                n.as_slice().expect("row-major"),
                self.omega,
            )?;
            p.assign(&ndarray::ArrayView1::from(&mixed[..]));
        }
        Ok(out)
    }

    /// [`Guided::eps`] followed by the optional `x0` clipping at `t`.
    pub fn sampler_eps(
        &self,
        schedule: &NoiseSchedule,
        x: ArrayView2<f64>,
        t: usize,
        cond: &[Condition],
        nfe: &mut u64,
    ) -> Result<Array2<f64>> {
        let mut eps = self.eps(x, t, cond, nfe)?;
        let Some(c) = self.clip_x0 else {
            return Ok(eps);
        };
        if t == 0 {
            return Ok(eps);
        }
        let (a, s) = (schedule.alpha(t), schedule.sigma(t));
        for (xr, mut er) in x.rows().into_iter().zip(eps.rows_mut()) {
            let x0: Vec<f64> = xr
                .iter()
                .zip(er.iter())
                .map(|(x, e)| (x - s * e) / a)
                .collect();
            if x0.iter().all(|v| v.abs() <= c) {
                continue;
            }
            for ((e, x), x0) in er.iter_mut().zip(xr.iter()).zip(x0) {
                *e = (x - a * x0.clamp(-c, c)) / s;
            }
        }
        Ok(eps)
    }
}

fn rows_apply(
    x: ArrayView2<f64>,
    eps: ArrayView2<f64>,
    f: impl Fn(&[f64], &[f64]) -> Result<Vec<f64>>,
) -> Result<Array2<f64>> {
    let mut out = Array2::zeros(x.raw_dim());
    for ((xr, er), mut dst) in x.rows().into_iter().zip(eps.rows()).zip(out.rows_mut()) {
        let v = f(&xr.to_vec(), &er.to_vec())?;
        dst.assign(&ndarray::ArrayView1::from(&v[..]));
    }
    Ok(out)
}

/// Row-wise [`eps_to_x0`].
pub fn eps_to_x0_batch(
    schedule: &NoiseSchedule,
    x: ArrayView2<f64>,
    eps: ArrayView2<f64>,
    t: usize,
) -> Result<Array2<f64>> {
    rows_apply(x, eps, |x, e| eps_to_x0(e, x, schedule, t))
}

fn check_finite(x: &Array2<f64>, t: usize) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::SamplerDivergence { t })
    }
}

/// One (guided) DDIM step of a batch.
pub fn ddim_step(
    schedule: &NoiseSchedule,
    guide: &Guided<'_>,
    x: ArrayView2<f64>,
    t_from: usize,
    t_to: usize,
    cond: &[Condition],
    nfe: &mut u64,
) -> Result<Array2<f64>> {
    if t_to == t_from {
        return Ok(x.to_owned());
    }
    if t_to > t_from {
        return Err(Error::RejectedRange(format!("{t_from} -> {t_to}")));
    }
    let eps = guide.sampler_eps(schedule, x, t_from, cond, nfe)?;
    let next = rows_apply(x, eps.view(), |x, e| {
        ddim_update(schedule, x, e, t_from, t_to)
    })?;
    check_finite(&next, t_to)?;
    Ok(next)
}

/// State of a chain at its last grid point, with the guided epsilon
/// evaluated there.
#[derive(Debug, Clone)]
pub struct ChainEnd {
    pub x: Array2<f64>,
    pub t: usize,
    pub eps: Array2<f64>,
    /// Network evaluations per chain.
    pub nfe: u64,
}

impl ChainEnd {
    /// Posterior-mean estimate of `x0` at the end of the chain.
    pub fn x0_estimate(&self, schedule: &NoiseSchedule) -> Result<Array2<f64>> {
        eps_to_x0_batch(schedule, self.x.view(), self.eps.view(), self.t)
    }
}

/// Runs DDIM through every point of `grid` starting from `x_start` (taken to
/// be at `grid.first()`), evaluating the guided model once per grid point.
/// `rngs` holds one generator per row and is only drawn from by
/// [`Corruption::ExtraNoise`].
pub fn run_chain<R: Rng>(
    schedule: &NoiseSchedule,
    guide: &Guided<'_>,
    x_start: Array2<f64>,
    grid: &StepGrid,
    cond: &[Condition],
    corruption: Corruption,
    rngs: &mut [R],
) -> Result<ChainEnd> {
    let rows = x_start.nrows();
    if cond.len() != rows {
        return Err(Error::invalid(format!(
            "{} conditions for {rows} chains",
            cond.len()
        )));
    }
    if x_start.ncols() != guide.pos.input_dim() {
        return Err(Error::invalid(format!(
            "state has {} columns, model expects {}",
            x_start.ncols(),
            guide.pos.input_dim()
        )));
    }
    let grid = match corruption {
        Corruption::StepSkip(j) => grid.skip(j)?,
        _ => grid.clone(),
    };
    if let Corruption::ExtraNoise(_) = corruption {
        if rngs.len() != rows {
            return Err(Error::invalid(format!(
                "{} generators for {rows} chains",
                rngs.len()
            )));
        }
    }
    let mut nfe = 0u64;
    let mut x = x_start;
    check_finite(&x, grid.first())?;
    let steps = grid.steps();
    for w in steps.windows(2) {
        let (t_from, t_to) = (w[0], w[1]);
        x = ddim_step(schedule, guide, x.view(), t_from, t_to, cond, &mut nfe)?;
        if let Corruption::ExtraNoise(gamma) = corruption {
            let scale = gamma * schedule.sigma(t_to);
            for (mut row, rng) in x.rows_mut().into_iter().zip(rngs.iter_mut()) {
                for v in row.iter_mut() {
                    let z: f64 = rng.sample(StandardNormal);
                    *v += scale * z;
                }
            }
        }
    }
    let t = grid.last();
    let eps = guide.sampler_eps(schedule, x.view(), t, cond, &mut nfe)?;
    check_finite(&eps, t)?;
    Ok(ChainEnd {
        x,
        t,
        eps,
        nfe: nfe / rows.max(1) as u64,
    })
}

/// Final samples of a batch of chains.
#[derive(Debug, Clone)]
pub struct SampleOutput {
    pub x0: Array2<f64>,
    /// Network evaluations per sample.
    pub nfe: u64,
}

/// Draws `x_T ~ N(0, I)` per chain and runs DDIM over `grid` down to `t = 0`.
pub fn sample<R: Rng>(
    schedule: &NoiseSchedule,
    guide: &Guided<'_>,
    grid: &StepGrid,
    cond: &[Condition],
    corruption: Corruption,
    rngs: &mut [R],
) -> Result<SampleOutput> {
    if rngs.len() != cond.len() {
        return Err(Error::invalid(format!(
            "{} generators for {} chains",
            rngs.len(),
            cond.len()
        )));
    }
    let x_start = initial_noise(rngs, guide.pos.input_dim());
    let end = run_chain(schedule, guide, x_start, grid, cond, corruption, rngs)?;
    let x0 = end.x0_estimate(schedule)?;
    check_finite(&x0, 0)?;
    Ok(SampleOutput { x0, nfe: end.nfe })
}

/// Stochastic ancestral transition: draws from the forward-process posterior
/// `q(x_{t_to} | x_{t_from}, x0)` with `x0` predicted from `eps`, using the
/// standard-normal vector `z`.
pub fn ancestral_update(
    schedule: &NoiseSchedule,
    x_t: &[f64],
    eps: &[f64],
    t_from: usize,
    t_to: usize,
    z: &[f64],
) -> Result<Vec<f64>> {
    same_len(x_t, z, "ancestral_update")?;
    schedule.check_t(t_to)?;
    if t_to >= t_from {
        return Err(Error::RejectedRange(format!(
            "ancestral step must decrease the timestep ({t_from} -> {t_to})"
        )));
    }
    let x0 = eps_to_x0(eps, x_t, schedule, t_from)?;
    if t_to == 0 {
        return Ok(x0);
    }
    let (a_t, s_t) = (schedule.alpha(t_from), schedule.sigma(t_from));
    let (a_s, s_s) = (schedule.alpha(t_to), schedule.sigma(t_to));
    let a_ts = a_t / a_s;
    let var_ts = (s_t * s_t - a_ts * a_ts * s_s * s_s).max(0.0);
    let c0 = a_s * var_ts / (s_t * s_t);
    let ct = a_ts * s_s * s_s / (s_t * s_t);
    let sd = (var_ts * s_s * s_s / (s_t * s_t)).sqrt();
    Ok(x0
        .iter()
        .zip(x_t)
        .zip(z)
        .map(|((x0, x), z)| c0 * x0 + ct * x + sd * z)
        .collect())
}

/// Ancestral sampling over `grid`; every transition draws fresh noise from
/// the chain's own generator.
pub fn sample_ancestral<R: Rng>(
    schedule: &NoiseSchedule,
    guide: &Guided<'_>,
    grid: &StepGrid,
    cond: &[Condition],
    rngs: &mut [R],
) -> Result<SampleOutput> {
    if rngs.len() != cond.len() {
        return Err(Error::invalid(format!(
            "{} generators for {} chains",
            rngs.len(),
            cond.len()
        )));
    }
    let dim = guide.pos.input_dim();
    let mut x = initial_noise(rngs, dim);
    let mut nfe = 0u64;
    let mut steps = grid.steps().to_vec();
    steps.push(0);
    for w in steps.windows(2) {
        let (t_from, t_to) = (w[0], w[1]);
        let eps = guide.sampler_eps(schedule, x.view(), t_from, cond, &mut nfe)?;
        let z = initial_noise(rngs, dim);
        let mut next = Array2::zeros(x.raw_dim());
        for (((xr, er), zr), mut dst) in x
            .rows()
            .into_iter()
            .zip(eps.rows())
            .zip(z.rows())
            .zip(next.rows_mut())
        {
            let v = ancestral_update(
                schedule,
                &xr.to_vec(),
                &er.to_vec(),
                t_from,
                t_to,
                &zr.to_vec(),
            )?;
            dst.assign(&ndarray::ArrayView1::from(&v[..]));
        }
        check_finite(&next, t_to)?;
        x = next;
    }
    Ok(SampleOutput {
        x0: x,
        nfe: nfe / cond.len().max(1) as u64,
    })
}

/// One standard-normal row per generator.
pub fn initial_noise<R: Rng>(rngs: &mut [R], dim: usize) -> Array2<f64> {
    let mut x = Array2::zeros((rngs.len(), dim));
    for (mut row, rng) in x.rows_mut().into_iter().zip(rngs.iter_mut()) {
        for v in row.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{GaussianMixture, OracleEps};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sched() -> NoiseSchedule {
        NoiseSchedule::cosine(1000).unwrap()
    }

    #[test]
    fn eps_to_x0_cases() {
        let s = sched();
        let t = 420;
        let x = [0.5, -1.5];
        let got = eps_to_x0(&[0.0, 0.0], &x, &s, t).unwrap();
        assert_eq!(got, vec![0.5 / s.alpha(t), -1.5 / s.alpha(t)]);

        let (v, e) = ([0.3, 0.9], [-1.0, 0.25]);
        let xt = s.add_noise(&v, t, &e).unwrap();
        let back = eps_to_x0(&e, &xt, &s, t).unwrap();
        assert!(back.iter().zip(v).all(|(a, b)| (a - b).abs() < 1e-14));

        let x0 = [0.1, 0.2];
        let eps = x0_to_eps(&x0, &x, &s, t).unwrap();
        let rt = eps_to_x0(&eps, &x, &s, t).unwrap();
        assert!(rt.iter().zip(x0).all(|(a, b)| (a - b).abs() < 1e-10));
    }

    #[test]
    fn singular_timesteps() {
        let s = sched();
        assert!(matches!(
            score_to_eps(&[1.0], &s, 0),
            Err(Error::SingularTimestep { t: 0, .. })
        ));
        assert!(x0_to_eps(&[1.0], &[1.0], &s, 0).is_err());
        assert!(eps_to_score(&[1.0], &s, 0).is_err());
    }

    #[test]
    fn score_eps_round_trip() {
        let s = sched();
        assert_eq!(score_to_eps(&[0.0, 0.0], &s, 10).unwrap(), vec![-0.0, -0.0]);
        for t in [1, 10, 500, 1000] {
            let score = [0.7, -3.0];
            let back = eps_to_score(&score_to_eps(&score, &s, t).unwrap(), &s, t).unwrap();
            assert!(back.iter().zip(score).all(|(a, b)| (a - b).abs() < 1e-12));
        }
    }

    #[test]
    fn score_route_matches_oracle_posterior_mean() {
        let s = sched();
        let gm = GaussianMixture::single(vec![0.2, -0.6], 0.4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            let t = rng.random_range(1..=1000);
            let x = [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)];
            let score = gm.marginal_score(&s, &x, t, Condition::Null).unwrap();
            let eps = score_to_eps(&score, &s, t).unwrap();
            let via_eps = eps_to_x0(&eps, &x, &s, t).unwrap();
            let pm = gm.posterior_mean(&s, &x, t, Condition::Null).unwrap();
            for d in 0..2 {
                assert!((via_eps[d] - pm[d]).abs() < 1e-8, "t={t}");
            }
        }
    }

    #[test]
    fn tweedie_on_dirac_is_exact() {
        let s = sched();
        let mu = [0.25, -0.75];
        for t in [1, 37, 500, 999] {
            let (a, sg) = (s.alpha(t), s.sigma(t));
            let x = [1.0, 2.0];
            let score: Vec<f64> = (0..2).map(|d| -(x[d] - a * mu[d]) / (sg * sg)).collect();
            let got = tweedie_x0(&x, &score, &s, t).unwrap();
            for d in 0..2 {
                assert!((got[d] - mu[d]).abs() < 1e-9 * (1.0 / a), "t={t}");
            }
        }
    }

    #[test]
    fn tweedie_small_noise_limit() {
        let s = sched();
        let x = [0.4, 0.1];
        let score = [2.0, -1.0];
        let got = tweedie_x0(&x, &score, &s, 1).unwrap();
        let bound = s.sigma(1).powi(2) * (5.0f64).sqrt() + (1.0 / s.alpha(1) - 1.0);
        let dist = ((got[0] - x[0]).powi(2) + (got[1] - x[1]).powi(2)).sqrt();
        assert!(dist <= bound, "{dist} > {bound}");
    }

    #[test]
    fn tweedie_gaussian_closed_form_and_monte_carlo() {
        let s = sched();
        let (mu, sd) = ([0.5, -0.2], 0.6);
        let gm = GaussianMixture::single(mu.to_vec(), sd).unwrap();
        let t = 400;
        let (a, sg) = (s.alpha(t), s.sigma(t));
        let v = a * a * sd * sd + sg * sg;
        let x_t = [0.3, 0.4];
        let score = gm.marginal_score(&s, &x_t, t, Condition::Null).unwrap();
        let got = tweedie_x0(&x_t, &score, &s, t).unwrap();
        for d in 0..2 {
            let want = (a * sd * sd * x_t[d] + sg * sg * mu[d]) / v;
            assert!((got[d] - want).abs() < 1e-8);
        }
        // independent check: weight prior draws of x0 by the likelihood of x_t
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let n = 200_000;
        let mut num = [0.0; 2];
        let mut den = 0.0;
        let mut w2 = 0.0;
        for _ in 0..n {
            let x0: Vec<f64> = (0..2)
                .map(|d| mu[d] + sd * rng.sample::<f64, _>(StandardNormal))
                .collect();
            let sq: f64 = (0..2).map(|d| (x_t[d] - a * x0[d]).powi(2)).sum();
            let w = (-sq / (2.0 * sg * sg)).exp();
            num[0] += w * x0[0];
            num[1] += w * x0[1];
            den += w;
            w2 += w * w;
        }
        let ess = den * den / w2;
        let post_sd = (sg * sg * sd * sd / v).sqrt();
        for d in 0..2 {
            let mc = num[d] / den;
            assert!(
                (mc - got[d]).abs() < 4.0 * post_sd / ess.sqrt(),
                "d={d}: {mc} vs {}",
                got[d]
            );
        }
    }

    #[test]
    fn cfg_cases() {
        let p = [0.3, -0.1];
        let n = [1.0, 2.0];
        assert_eq!(cfg_combine(&p, &n, 0.0).unwrap(), p.to_vec());
        for w in [0.5, 1.0, 7.5] {
            let got = cfg_combine(&p, &p, w).unwrap();
            assert!(got.iter().zip(p).all(|(a, b)| (a - b).abs() < 1e-15));
        }
        assert!(cfg_combine(&p, &[1.0], 1.0).is_err());
    }

    #[test]
    fn cfg_score_and_eps_forms_agree() {
        let s = sched();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..500 {
            let t = rng.random_range(1..=1000);
            let w = rng.random_range(0.0..5.0);
            let sp = [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)];
            let sn = [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)];
            let via_score = score_to_eps(&cfg_combine_score(&sp, &sn, w).unwrap(), &s, t).unwrap();
            let via_eps = cfg_combine(
                &score_to_eps(&sp, &s, t).unwrap(),
                &score_to_eps(&sn, &s, t).unwrap(),
                w,
            )
            .unwrap();
            for d in 0..2 {
                assert!((via_score[d] - via_eps[d]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn prediction_conversions_round_trip() {
        let s = sched();
        let x_t = [0.2, -0.9];
        let p = Prediction {
            kind: PredictionKind::Score,
            value: vec![0.5, 1.5],
            t: 321,
        };
        for kind in [PredictionKind::Epsilon, PredictionKind::X0] {
            let there = p.convert(kind, &x_t, &s).unwrap();
            let back = there.convert(PredictionKind::Score, &x_t, &s).unwrap();
            assert!(back
                .value
                .iter()
                .zip(&p.value)
                .all(|(a, b)| (a - b).abs() < 1e-10));
        }
    }

    #[test]
    fn ddim_identity_and_dirac_landing() {
        let s = sched();
        let gm = GaussianMixture::single(vec![0.3, -0.4], 0.0).unwrap();
        let oracle = OracleEps {
            mixture: &gm,
            schedule: &s,
        };
        let guide = Guided::single(&oracle, 0.0, Condition::Null);
        let x = ndarray::array![[0.7, 0.1], [-2.0, 1.0]];
        let cond = [Condition::Null; 2];
        let mut nfe = 0;
        let same = ddim_step(&s, &guide, x.view(), 600, 600, &cond, &mut nfe).unwrap();
        assert_eq!(same, x);
        assert_eq!(nfe, 0);
        let landed = ddim_step(&s, &guide, x.view(), 600, 0, &cond, &mut nfe).unwrap();
        for r in landed.rows() {
            assert!((r[0] - 0.3).abs() < 1e-12 && (r[1] + 0.4).abs() < 1e-12);
        }
        assert_eq!(nfe, 2);
    }

    #[test]
    fn nfe_accounting() {
        let s = sched();
        let gm = GaussianMixture::default_ring();
        let oracle = OracleEps {
            mixture: &gm,
            schedule: &s,
        };
        let grid = StepGrid::full(&s, 7).unwrap();
        let cond = vec![Condition::Class(2); 3];
        for (omega, per_step) in [(0.0, 1), (2.0, 2)] {
            let guide = Guided::single(&oracle, omega, Condition::Null);
            let mut rngs: Vec<ChaCha8Rng> = (0..3).map(ChaCha8Rng::seed_from_u64).collect();
            let out = sample(&s, &guide, &grid, &cond, Corruption::None, &mut rngs).unwrap();
            assert_eq!(out.nfe, 7 * per_step);
        }
        let guide = Guided::single(&oracle, 1.0, Condition::Null);
        let mut rngs: Vec<ChaCha8Rng> = (0..3).map(ChaCha8Rng::seed_from_u64).collect();
        let out = sample(&s, &guide, &grid, &cond, Corruption::StepSkip(3), &mut rngs).unwrap();
        assert_eq!(out.nfe, 2 * grid.skip(3).unwrap().len() as u64);
    }

    #[test]
    fn sampling_is_deterministic() {
        let s = sched();
        let gm = GaussianMixture::default_ring();
        let oracle = OracleEps {
            mixture: &gm,
            schedule: &s,
        };
        let guide = Guided::single(&oracle, 2.0, Condition::Null);
        let grid = StepGrid::full(&s, 10).unwrap();
        let cond: Vec<_> = (0..8).map(Condition::Class).collect();
        let run = || {
            let mut rngs: Vec<ChaCha8Rng> =
                (0..8).map(|i| ChaCha8Rng::seed_from_u64(100 + i)).collect();
            sample(&s, &guide, &grid, &cond, Corruption::None, &mut rngs)
                .unwrap()
                .x0
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn corruption_parsing() {
        assert_eq!("none".parse::<Corruption>().unwrap(), Corruption::None);
        assert_eq!(
            "step-skip:3".parse::<Corruption>().unwrap(),
            Corruption::StepSkip(3)
        );
        assert_eq!(
            "extra-noise:0.2".parse::<Corruption>().unwrap(),
            Corruption::ExtraNoise(0.2)
        );
        for bad in ["step-skip:0", "extra-noise:-1", "blur", "extra-noise:x"] {
            assert!(bad.parse::<Corruption>().is_err(), "{bad}");
        }
        let c = Corruption::ExtraNoise(0.25);
        assert_eq!(c.to_string().parse::<Corruption>().unwrap(), c);
    }

    #[test]
    fn guidance_validation() {
        assert!(GuidanceConfig::cfg(2.0).validate().is_ok());
        assert!(GuidanceConfig::cfg(-0.1).validate().is_err());
        let g = GuidanceConfig {
            alpha: 1.5,
            ..GuidanceConfig::default()
        };
        assert!(g.validate().is_err());
    }

    fn population_moments(x: &Array2<f64>) -> (Vec<f64>, Vec<f64>) {
        let n = x.nrows() as f64;
        let mean: Vec<f64> = x.columns().into_iter().map(|c| c.sum() / n).collect();
        let var: Vec<f64> = x
            .columns()
            .into_iter()
            .zip(&mean)
            .map(|(c, m)| c.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0))
            .collect();
        (mean, var)
    }

    #[test]
    fn ddim_gaussian_moments_full_grid() {
        let s = sched();
        let (mu, sd) = ([0.5, -0.3], 0.5);
        let gm = GaussianMixture::single(mu.to_vec(), sd).unwrap();
        let oracle = OracleEps {
            mixture: &gm,
            schedule: &s,
        };
        let guide = Guided::single(&oracle, 0.0, Condition::Null);
        let grid = StepGrid::full(&s, 1000).unwrap();
        let n = 100_000;
        let cond = vec![Condition::Class(0); n];
        let mut rngs: Vec<ChaCha8Rng> = (0..n as u64)
            .map(|i| ChaCha8Rng::seed_from_u64(7_000 + i))
            .collect();
        let out = sample(&s, &guide, &grid, &cond, Corruption::None, &mut rngs).unwrap();
        let (mean, var) = population_moments(&out.x0);
        let var_want = sd * sd;
        for d in 0..2 {
            let se_mean = (var_want / n as f64).sqrt();
            let se_var = var_want * (2.0 / (n as f64 - 1.0)).sqrt();
            assert!(
                (mean[d] - mu[d]).abs() < 4.0 * se_mean,
                "mean {d}: {}",
                mean[d]
            );
            assert!(
                (var[d] - var_want).abs() < 4.0 * se_var,
                "var {d}: {}",
                var[d]
            );
        }
    }

    #[test]
    fn ancestral_sampler_lands_on_dirac_and_is_seeded() {
        let s = sched();
        let dirac = GaussianMixture::single(vec![0.3, -0.4], 0.0).unwrap();
        let oracle = OracleEps {
            mixture: &dirac,
            schedule: &s,
        };
        let guide = Guided::single(&oracle, 0.0, Condition::Null);
        let grid = StepGrid::full(&s, 10).unwrap();
        let mut rngs: Vec<ChaCha8Rng> = (0..4).map(ChaCha8Rng::seed_from_u64).collect();
        let out = sample_ancestral(&s, &guide, &grid, &[Condition::Null; 4], &mut rngs).unwrap();
        assert_eq!(out.nfe, 10);
        for r in out.x0.rows() {
            assert!((r[0] - 0.3).abs() < 1e-12 && (r[1] + 0.4).abs() < 1e-12);
        }

        let gm = GaussianMixture::default_ring();
        let oracle = OracleEps {
            mixture: &gm,
            schedule: &s,
        };
        let guide = Guided::single(&oracle, 1.0, Condition::Null);
        let cond = [Condition::Class(1); 4];
        let mut r1: Vec<ChaCha8Rng> = (0..4).map(ChaCha8Rng::seed_from_u64).collect();
        let mut r2: Vec<ChaCha8Rng> = (0..4).map(ChaCha8Rng::seed_from_u64).collect();
        let a = sample_ancestral(&s, &guide, &grid, &cond, &mut r1).unwrap();
        let b = sample_ancestral(&s, &guide, &grid, &cond, &mut r2).unwrap();
        assert_eq!(a.x0, b.x0);
        assert_eq!(a.nfe, 20);
    }
}
