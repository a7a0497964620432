//! Discrete-time variance-preserving noise schedules.
//!
//! A schedule tabulates `(alpha_t, sigma_t)` for every integer timestep
//! `t in 0..=T`, with `x_t = alpha_t * x0 + sigma_t * eps` and
//! `alpha_t^2 + sigma_t^2 = 1`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Offset of the cosine schedule, keeps `beta` from vanishing near `t = 0`.
const COSINE_OFFSET: f64 = 0.008;
/// Upper clip on per-step beta; keeps `alpha_T` strictly positive.
const MAX_BETA: f64 = 0.999;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleKind {
    Cosine,
    LinearBeta,
}

impl fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScheduleKind::Cosine => f.write_str("cosine"),
            ScheduleKind::LinearBeta => f.write_str("linear-beta"),
        }
    }
}

impl FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(ScheduleKind::Cosine),
            "linear-beta" | "linear" => Ok(ScheduleKind::LinearBeta),
            other => Err(Error::invalid(format!("unknown schedule kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    kind: ScheduleKind,
    alpha: Vec<f64>,
    sigma: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(kind: ScheduleKind, t_max: usize) -> Result<Self> {
        if t_max < 2 {
            return Err(Error::invalid(format!(
                "schedule needs T >= 2, got {t_max}"
            )));
        }
        let betas: Vec<f64> = match kind {
            ScheduleKind::Cosine => {
                let f = |t: usize| {
                    let u = (t as f64 / t_max as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET);
                    (u * std::f64::consts::FRAC_PI_2).cos().powi(2)
                };
                (1..=t_max)
                    .map(|t| (1.0 - f(t) / f(t - 1)).clamp(0.0, MAX_BETA))
                    .collect()
            }
            ScheduleKind::LinearBeta => {
                // Standard 1e-4..2e-2 range at T = 1000, rescaled for other T.
                let scale = 1000.0 / t_max as f64;
                let (lo, hi) = (scale * 1e-4, (scale * 0.02).min(MAX_BETA));
                (0..t_max)
                    .map(|i| lo + (hi - lo) * i as f64 / (t_max - 1) as f64)
                    .collect()
            }
        };

        let mut alpha = Vec::with_capacity(t_max + 1);
        let mut sigma = Vec::with_capacity(t_max + 1);
        alpha.push(1.0);
        sigma.push(0.0);
        let mut alpha_bar = 1.0f64;
        for beta in betas {
            alpha_bar *= 1.0 - beta;
            alpha.push(alpha_bar.sqrt());
            sigma.push((1.0 - alpha_bar).sqrt());
        }
        Ok(Self { kind, alpha, sigma })
    }

    pub fn cosine(t_max: usize) -> Result<Self> {
        Self::new(ScheduleKind::Cosine, t_max)
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    /// Largest timestep index `T`.
    pub fn t_max(&self) -> usize {
        self.alpha.len() - 1
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t]
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigma[t]
    }

    /// Signal-to-noise ratio `alpha_t^2 / sigma_t^2` (infinite at `t = 0`).
    pub fn snr(&self, t: usize) -> f64 {
        let (a, s) = (self.alpha[t], self.sigma[t]);
        a * a / (s * s)
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        if t > self.t_max() {
            return Err(Error::RejectedRange(format!(
                "timestep {t} outside 0..={}",
                self.t_max()
            )));
        }
        Ok(())
    }

    /// `alpha_t * x0 + sigma_t * eps`.
    pub fn add_noise(&self, x0: &[f64], t: usize, eps: &[f64]) -> Result<Vec<f64>> {
        self.check_t(t)?;
        if x0.len() != eps.len() {
            return Err(Error::ShapeMismatch(format!(
                "x0 has {} entries, eps has {}",
                x0.len(),
                eps.len()
            )));
        }
        let (a, s) = (self.alpha[t], self.sigma[t]);
        Ok(x0.iter().zip(eps).map(|(x, e)| a * x + s * e).collect())
    }
}

/// Strictly decreasing list of timesteps visited by a sampler, each one
/// costing one network evaluation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepGrid(Vec<usize>);

impl StepGrid {
    pub fn new(steps: Vec<usize>) -> Result<Self> {
        if steps.is_empty() {
            return Err(Error::invalid("step grid is empty"));
        }
        if steps.windows(2).any(|w| w[0] <= w[1]) {
            return Err(Error::invalid(format!(
                "step grid must be strictly decreasing: {steps:?}"
            )));
        }
        if *steps.last().unwrap() == 0 {
            return Err(Error::invalid("step grid may not contain t = 0"));
        }
        Ok(Self(steps))
    }

    /// `k` evenly spaced timesteps from `start` down to `end`, both included.
    pub fn uniform(start: usize, end: usize, k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::invalid("step grid needs at least one step"));
        }
        if end == 0 || start < end {
            return Err(Error::invalid(format!(
                "uniform grid needs start >= end >= 1, got {start}..{end}"
            )));
        }
        if k == 1 {
            if start != end {
                return Err(Error::invalid("a single-step grid needs start == end"));
            }
            return Self::new(vec![start]);
        }
        if start - end < k - 1 {
            return Err(Error::invalid(format!(
                "cannot fit {k} distinct steps between {start} and {end}"
            )));
        }
        let span = (start - end) as f64;
        let steps = (0..k)
            .map(|i| end + (span * (k - 1 - i) as f64 / (k - 1) as f64).round() as usize)
            .collect();
        Self::new(steps)
    }

    /// The default full-simulation grid `T = t_K > ... > t_1 = 1`.
    pub fn full(schedule: &NoiseSchedule, k: usize) -> Result<Self> {
        Self::uniform(schedule.t_max(), 1, k)
    }

    /// Keeps every `j`-th step, always retaining the last one.
    pub fn skip(&self, j: usize) -> Result<Self> {
        if j == 0 {
            return Err(Error::invalid("step-skip factor must be >= 1"));
        }
        let n = self.0.len();
        let steps = self
            .0
            .iter()
            .enumerate()
            .filter(|(i, _)| i % j == 0 || *i == n - 1)
            .map(|(_, &t)| t)
            .collect();
        Self::new(steps)
    }

    pub fn steps(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn first(&self) -> usize {
        self.0[0]
    }

    pub fn last(&self) -> usize {
        *self.0.last().unwrap()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoints() {
        for kind in [ScheduleKind::Cosine, ScheduleKind::LinearBeta] {
            let s = NoiseSchedule::new(kind, 1000).unwrap();
            assert_eq!((s.alpha(0), s.sigma(0)), (1.0, 0.0));
            assert!(s.alpha(1000) < 0.01, "{kind}: alpha_T = {}", s.alpha(1000));
            assert!(s.sigma(1000) > 0.999);
            assert!(s.alpha(1000) > 0.0);
        }
    }

    #[test]
    fn variance_preserving_and_snr_monotone() {
        for kind in [ScheduleKind::Cosine, ScheduleKind::LinearBeta] {
            for t_max in [2, 10, 1000] {
                let s = NoiseSchedule::new(kind, t_max).unwrap();
                for t in 0..=t_max {
                    let vp = s.alpha(t).powi(2) + s.sigma(t).powi(2);
                    assert!((vp - 1.0).abs() < 1e-12, "{kind} T={t_max} t={t}: {vp}");
                }
                // exhaustive scan of adjacent pairs, t = 0 has infinite SNR
                assert!(s.snr(0).is_infinite());
                for t in 1..t_max {
                    assert!(s.snr(t) > s.snr(t + 1), "{kind} T={t_max}: t={t}");
                }
            }
        }
    }

    #[test]
    fn rejects_short_schedule() {
        assert!(matches!(
            NoiseSchedule::cosine(1),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn add_noise_closed_forms() {
        let s = NoiseSchedule::cosine(1000).unwrap();
        let x0 = [0.3, -1.2];
        let e = [0.7, 0.1];
        assert_eq!(s.add_noise(&x0, 0, &e).unwrap(), x0.to_vec());
        let got = s.add_noise(&[0.0, 0.0], 400, &e).unwrap();
        assert_eq!(got, vec![s.sigma(400) * 0.7, s.sigma(400) * 0.1]);
        assert!(s.add_noise(&x0, 1001, &e).is_err());
        assert!(s.add_noise(&x0, 10, &[1.0]).is_err());
    }

    #[test]
    fn uniform_grid() {
        let g = StepGrid::uniform(1000, 1, 25).unwrap();
        assert_eq!(g.len(), 25);
        assert_eq!((g.first(), g.last()), (1000, 1));
        let g = StepGrid::uniform(700, 300, 5).unwrap();
        assert_eq!(g.steps(), &[700, 600, 500, 400, 300]);
        assert_eq!(StepGrid::uniform(7, 7, 1).unwrap().steps(), &[7]);
        assert!(StepGrid::uniform(5, 3, 4).is_err());
        assert!(StepGrid::new(vec![3, 3]).is_err());
        assert!(StepGrid::new(vec![3, 0]).is_err());
    }

    #[test]
    fn skip_keeps_last() {
        let g = StepGrid::uniform(10, 1, 10).unwrap();
        assert_eq!(g.skip(3).unwrap().steps(), &[10, 7, 4, 1]);
        assert_eq!(g.skip(4).unwrap().steps(), &[10, 6, 2, 1]);
        assert_eq!(g.skip(1).unwrap(), g);
    }
}
