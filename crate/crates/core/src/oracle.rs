//! Analytic ground truth: isotropic Gaussian mixtures whose noisy marginals,
//! scores and posterior means are available in closed form.
//!
//! Under `x_t = alpha_t x0 + sigma_t eps`, a component `N(mu, s^2 I)` becomes
//! `N(alpha_t mu, v I)` with `v = alpha_t^2 s^2 + sigma_t^2`, and the
//! per-component posterior mean is `(alpha_t s^2 x_t + sigma_t^2 mu) / v`.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::condition::Condition;
use crate::diffusion::EpsModel;
use crate::error::{Error, Result};
use crate::schedule::NoiseSchedule;

#[derive(Debug, Clone, PartialEq)]
pub struct Component {
    pub weight: f64,
    pub mean: Vec<f64>,
    /// Isotropic standard deviation; zero makes a Dirac component.
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMixture {
    dim: usize,
    components: Vec<Component>,
    conditions: BTreeMap<Condition, Vec<usize>>,
}

impl GaussianMixture {
    /// `conditions` maps each condition to the components it draws from;
    /// weights are renormalised within each condition.
    pub fn new(
        components: Vec<Component>,
        conditions: BTreeMap<Condition, Vec<usize>>,
    ) -> Result<Self> {
        let dim = components
            .first()
            .map(|c| c.mean.len())
            .ok_or_else(|| Error::invalid("mixture needs at least one component"))?;
        if dim == 0 {
            return Err(Error::invalid("mixture dimension must be positive"));
        }
        for (i, c) in components.iter().enumerate() {
            if c.mean.len() != dim {
                return Err(Error::invalid(format!(
                    "component {i} has dimension {}, expected {dim}",
                    c.mean.len()
                )));
            }
            if !(c.weight > 0.0 && c.weight.is_finite()) {
                return Err(Error::invalid(format!("component {i} weight must be > 0")));
            }
            if !(c.std >= 0.0 && c.std.is_finite()) {
                return Err(Error::invalid(format!("component {i} std must be >= 0")));
            }
        }
        let mut conditions = conditions;
        conditions
            .entry(Condition::Null)
            .or_insert_with(|| (0..components.len()).collect());
        for (cond, members) in &conditions {
            if members.is_empty() {
                return Err(Error::invalid(format!(
                    "condition {cond} has no components"
                )));
            }
            if let Some(bad) = members.iter().find(|&&m| m >= components.len()) {
                return Err(Error::invalid(format!(
                    "condition {cond} references missing component {bad}"
                )));
            }
        }
        Ok(Self {
            dim,
            components,
            conditions,
        })
    }

    /// `modes` equal-weight components of std `std` evenly spaced on a circle;
    /// class `i` selects mode `i`, the null condition selects all of them.
    pub fn ring(modes: usize, radius: f64, std: f64) -> Result<Self> {
        let components = (0..modes)
            .map(|i| {
                let a = 2.0 * std::f64::consts::PI * i as f64 / modes as f64;
                Component {
                    weight: 1.0 / modes as f64,
                    mean: vec![radius * a.cos(), radius * a.sin()],
                    std,
                }
            })
            .collect();
        let conditions = (0..modes).map(|i| (Condition::Class(i), vec![i])).collect();
        Self::new(components, conditions)
    }

    /// Default toy dataset: 8 modes of std 0.05 on the unit circle.
    pub fn default_ring() -> Self {
        Self::ring(8, 1.0, 0.05).expect("valid ring")
    }

    /// One component, reachable as class 0 and as the null condition.
    pub fn single(mean: Vec<f64>, std: f64) -> Result<Self> {
        let comp = Component {
            weight: 1.0,
            mean,
            std,
        };
        Self::new(vec![comp], BTreeMap::from([(Condition::Class(0), vec![0])]))
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn components(&self) -> &[Component] {
        &self.components
    }

    /// Real classes, in order.
    pub fn classes(&self) -> Vec<usize> {
        self.conditions
            .keys()
            .filter_map(|c| match c {
                Condition::Class(i) => Some(*i),
                Condition::Null => None,
            })
            .collect()
    }

    pub fn num_classes(&self) -> usize {
        self.classes().iter().max().map_or(0, |m| m + 1)
    }

    /// Components of `cond` with weights renormalised to sum to one.
    pub fn members(&self, cond: Condition) -> Result<Vec<(f64, &Component)>> {
        let idx = self
            .conditions
            .get(&cond)
            .ok_or_else(|| Error::invalid(format!("unknown condition {cond}")))?;
        let total: f64 = idx.iter().map(|&i| self.components[i].weight).sum();
        Ok(idx
            .iter()
            .map(|&i| (self.components[i].weight / total, &self.components[i]))
            .collect())
    }

    fn check_point(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::invalid(format!(
                "point has {} entries, mixture dimension is {}",
                x.len(),
                self.dim
            )));
        }
        Ok(())
    }

    fn noise_level(schedule: &NoiseSchedule, t: usize) -> Result<(f64, f64)> {
        schedule.check_t(t)?;
        let sigma = schedule.sigma(t);
        if sigma == 0.0 {
            return Err(Error::SingularTimestep { t, what: "sigma" });
        }
        Ok((schedule.alpha(t), sigma))
    }

    /// Log-responsibility terms `log w_i + log N(x; alpha mu_i, v_i I)` and
    /// the variances `v_i`.
    fn log_terms(
        &self,
        x: &[f64],
        alpha: f64,
        sigma: f64,
        cond: Condition,
    ) -> Result<Vec<(f64, f64, &Component)>> {
        let d = self.dim as f64;
        Ok(self
            .members(cond)?
            .into_iter()
            .map(|(w, c)| {
                let v = alpha * alpha * c.std * c.std + sigma * sigma;
                let sq: f64 = x
                    .iter()
                    .zip(&c.mean)
                    .map(|(xi, mi)| (xi - alpha * mi).powi(2))
                    .sum();
                let lt = w.ln() - 0.5 * d * (2.0 * std::f64::consts::PI * v).ln() - sq / (2.0 * v);
                (lt, v, c)
            })
            .collect())
    }

    /// Normalised responsibilities and the log-density `log p_t(x | c)`.
    fn responsibilities(terms: &[(f64, f64, &Component)]) -> (Vec<f64>, f64) {
        let max = terms.iter().map(|t| t.0).fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = terms.iter().map(|t| (t.0 - max).exp()).sum();
        let resp = terms.iter().map(|t| (t.0 - max).exp() / sum).collect();
        (resp, max + sum.ln())
    }

    /// `log p_t(x | c)` of the noise-perturbed mixture.
    pub fn log_density(
        &self,
        schedule: &NoiseSchedule,
        x: &[f64],
        t: usize,
        cond: Condition,
    ) -> Result<f64> {
        self.check_point(x)?;
        let (alpha, sigma) = Self::noise_level(schedule, t)?;
        let terms = self.log_terms(x, alpha, sigma, cond)?;
        Ok(Self::responsibilities(&terms).1)
    }

    /// `grad_x log p_t(x | c)`.
    pub fn marginal_score(
        &self,
        schedule: &NoiseSchedule,
        x: &[f64],
        t: usize,
        cond: Condition,
    ) -> Result<Vec<f64>> {
        self.check_point(x)?;
        let (alpha, sigma) = Self::noise_level(schedule, t)?;
        let terms = self.log_terms(x, alpha, sigma, cond)?;
        let (resp, _) = Self::responsibilities(&terms);
        let mut score = vec![0.0; self.dim];
        for (r, (_, v, c)) in resp.iter().zip(&terms) {
            for ((s, xi), mi) in score.iter_mut().zip(x).zip(&c.mean) {
                *s -= r * (xi - alpha * mi) / v;
            }
        }
        Ok(score)
    }

    /// `E[x0 | x_t = x, c]`.
    pub fn posterior_mean(
        &self,
        schedule: &NoiseSchedule,
        x: &[f64],
        t: usize,
        cond: Condition,
    ) -> Result<Vec<f64>> {
        self.check_point(x)?;
        let (alpha, sigma) = Self::noise_level(schedule, t)?;
        let terms = self.log_terms(x, alpha, sigma, cond)?;
        let (resp, _) = Self::responsibilities(&terms);
        let mut mean = vec![0.0; self.dim];
        let s2 = sigma * sigma;
        for (r, (_, v, c)) in resp.iter().zip(&terms) {
            let k = alpha * c.std * c.std;
            for ((m, xi), mi) in mean.iter_mut().zip(x).zip(&c.mean) {
                *m += r * (k * xi + s2 * mi) / v;
            }
        }
        Ok(mean)
    }

    /// `n` i.i.d. draws from the mixture of `cond`, one per row.
    pub fn sample_data<R: Rng + ?Sized>(
        &self,
        cond: Condition,
        rng: &mut R,
        n: usize,
    ) -> Result<Array2<f64>> {
        if n == 0 {
            return Err(Error::invalid("sample count must be >= 1"));
        }
        let members = self.members(cond)?;
        let mut out = Array2::zeros((n, self.dim));
        for mut row in out.rows_mut() {
            let comp = pick(&members, rng.random::<f64>());
            for (x, m) in row.iter_mut().zip(&comp.mean) {
                let z: f64 = rng.sample(StandardNormal);
                *x = m + comp.std * z;
            }
        }
        Ok(out)
    }

    /// Mean vector and covariance matrix of `x0 | c`.
    pub fn moments(&self, cond: Condition) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
        let members = self.members(cond)?;
        let d = self.dim;
        let mut mean = vec![0.0; d];
        for (w, c) in &members {
            for (m, mi) in mean.iter_mut().zip(&c.mean) {
                *m += w * mi;
            }
        }
        let mut cov = vec![vec![0.0; d]; d];
        for (w, c) in &members {
            for i in 0..d {
                for j in 0..d {
                    let diag = if i == j { c.std * c.std } else { 0.0 };
                    cov[i][j] += w * ((c.mean[i] - mean[i]) * (c.mean[j] - mean[j]) + diag);
                }
            }
        }
        Ok((mean, cov))
    }

    /// Mean vector and covariance of the forward marginal `x_t | c`.
    pub fn noisy_moments(
        &self,
        schedule: &NoiseSchedule,
        t: usize,
        cond: Condition,
    ) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
        schedule.check_t(t)?;
        let (a, s) = (schedule.alpha(t), schedule.sigma(t));
        let (mean, cov) = self.moments(cond)?;
        let mean = mean.into_iter().map(|m| a * m).collect();
        let cov = cov
            .into_iter()
            .enumerate()
            .map(|(i, row)| {
                row.into_iter()
                    .enumerate()
                    .map(|(j, c)| a * a * c + if i == j { s * s } else { 0.0 })
                    .collect()
            })
            .collect();
        Ok((mean, cov))
    }

    /// Mean of the component of `cond` nearest to `x`.
    pub fn nearest_mean(&self, x: &[f64], cond: Condition) -> Result<&[f64]> {
        self.check_point(x)?;
        let members = self.members(cond)?;
        let best = members
            .iter()
            .map(|(_, c)| {
                let d: f64 = x.iter().zip(&c.mean).map(|(a, b)| (a - b).powi(2)).sum();
                (d, c)
            })
            .min_by(|a, b| a.0.total_cmp(&b.0))
            .expect("non-empty condition");
        Ok(&best.1.mean)
    }

    /// Parses the declarative text form:
    ///
    /// ```text
    /// # comment
    /// component weight=0.5 mean=1.0,0.0 std=0.05
    /// component weight=0.5 mean=-1.0,0.0 std=0.05
    /// condition 0 = 0
    /// condition 1 = 1
    /// condition null = 0 1
    /// ```
    ///
    /// Components are numbered in order of appearance. Without a `null` line
    /// the null condition covers every component.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut components = Vec::new();
        let mut conditions = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: &str| Error::invalid(format!("mixture line {}: {msg}", lineno + 1));
            let (head, rest) = line.split_once(char::is_whitespace).unwrap_or((line, ""));
            match head {
                "component" => {
                    let (mut weight, mut mean, mut std) = (None, None, None);
                    for field in rest.split_whitespace() {
                        let (k, v) = field
                            .split_once('=')
                            .ok_or_else(|| err("expected key=value"))?;
                        match k {
                            "weight" => {
                                weight = Some(v.parse::<f64>().map_err(|_| err("bad weight"))?)
                            }
                            "std" => std = Some(v.parse::<f64>().map_err(|_| err("bad std"))?),
                            "mean" => {
                                mean = Some(
                                    v.split(',')
                                        .map(|p| p.trim().parse::<f64>())
                                        .collect::<std::result::Result<Vec<_>, _>>()
                                        .map_err(|_| err("bad mean"))?,
                                )
                            }
                            other => return Err(err(&format!("unknown key `{other}`"))),
                        }
                    }
                    components.push(Component {
                        weight: weight.ok_or_else(|| err("missing weight"))?,
                        mean: mean.ok_or_else(|| err("missing mean"))?,
                        std: std.ok_or_else(|| err("missing std"))?,
                    });
                }
                "condition" => {
                    let (cond, members) = rest
                        .split_once('=')
                        .ok_or_else(|| err("expected `condition <id> = <components>`"))?;
                    let cond: Condition = cond.trim().parse()?;
                    let members = members
                        .split_whitespace()
                        .map(|m| m.parse::<usize>())
                        .collect::<std::result::Result<Vec<_>, _>>()
                        .map_err(|_| err("bad component index"))?;
                    if conditions.insert(cond, members).is_some() {
                        return Err(err("condition declared twice"));
                    }
                }
                other => return Err(err(&format!("unknown directive `{other}`"))),
            }
        }
        Self::new(components, conditions)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for c in &self.components {
            let mean: Vec<String> = c.mean.iter().map(|m| format!("{m:?}")).collect();
            let _ = writeln!(
                out,
                "component weight={:?} mean={} std={:?}",
                c.weight,
                mean.join(","),
                c.std
            );
        }
        for (cond, members) in &self.conditions {
            let ids: Vec<String> = members.iter().map(usize::to_string).collect();
            let _ = writeln!(out, "condition {cond} = {}", ids.join(" "));
        }
        out
    }
}

fn pick<'a>(members: &[(f64, &'a Component)], u: f64) -> &'a Component {
    let mut acc = 0.0;
    for (w, c) in members {
        acc += w;
        if u < acc {
            return c;
        }
    }
    members.last().expect("non-empty").1
}

/// Exact epsilon predictor of a mixture: `eps = -sigma_t * score`.
#[derive(Debug, Clone, Copy)]
pub struct OracleEps<'a> {
    pub mixture: &'a GaussianMixture,
    pub schedule: &'a NoiseSchedule,
}

impl EpsModel for OracleEps<'_> {
    fn predict_eps(&self, x: ArrayView2<f64>, t: usize, cond: &[Condition]) -> Result<Array2<f64>> {
        let sigma = self.schedule.sigma(t);
        let mut out = Array2::zeros(x.raw_dim());
        for ((row, mut dst), &c) in x.rows().into_iter().zip(out.rows_mut()).zip(cond) {
            let row = row.to_vec();
            let score = self.mixture.marginal_score(self.schedule, &row, t, c)?;
            for (d, s) in dst.iter_mut().zip(score) {
                *d = -sigma * s;
            }
        }
        Ok(out)
    }

    fn input_dim(&self) -> usize {
        self.mixture.dim()
    }
}
