//! Toy rewards and the metrics built on them: the NPO reward flip, the
//! KL-regularised objective, histogram KL, winning ratios and NFE tables.

use std::fmt::Write as _;

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::condition::Condition;
use crate::error::{Error, Result};
use crate::manifest::RunManifest;
use crate::oracle::GaussianMixture;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RewardKind {
    /// `exp(-||x - mu||^2 / (2 l^2))` for the nearest mode `mu` of the condition.
    ModeProximity,
    /// Conditional data density relative to its value at the best mode.
    TargetLoglik,
}

impl std::str::FromStr for RewardKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mode-proximity" => Ok(RewardKind::ModeProximity),
            "target-loglik" => Ok(RewardKind::TargetLoglik),
            _ => Err(Error::invalid(format!("unknown reward `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RewardFn {
    pub kind: RewardKind,
    pub mixture: GaussianMixture,
    pub length_scale: f64,
}

impl RewardFn {
    /// Mode proximity with `l` three times the largest component std.
    pub fn mode_proximity(mixture: GaussianMixture) -> Self {
        let s = mixture
            .components()
            .iter()
            .map(|c| c.std)
            .fold(0.0, f64::max);
        Self {
            kind: RewardKind::ModeProximity,
            mixture,
            length_scale: 3.0 * s,
        }
    }

    pub fn target_loglik(mixture: GaussianMixture) -> Self {
        Self {
            kind: RewardKind::TargetLoglik,
            length_scale: 0.0,
            mixture,
        }
    }

    fn log_data_density(&self, x: &[f64], cond: Condition) -> Result<f64> {
        let members = self.mixture.members(cond)?;
        let d = x.len() as f64;
        let terms: Vec<f64> = members
            .iter()
            .map(|(w, c)| {
                let v = c.std * c.std;
                let sq: f64 = x.iter().zip(&c.mean).map(|(a, b)| (a - b).powi(2)).sum();
                w.ln() - 0.5 * d * (2.0 * std::f64::consts::PI * v).ln() - sq / (2.0 * v)
            })
            .collect();
        let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Ok(max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln())
    }
}

/// Toy reward `R(x, c)` in `[0, 1]`.
pub fn reward(r: &RewardFn, x: &[f64], cond: Condition) -> Result<f64> {
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("reward input must be finite"));
    }
    match r.kind {
        RewardKind::ModeProximity => {
            if !(r.length_scale > 0.0) {
                return Err(Error::config(
                    "mode-proximity reward needs a positive length scale",
                ));
            }
            let mu = r.mixture.nearest_mean(x, cond)?;
            let sq: f64 = x.iter().zip(mu).map(|(a, b)| (a - b).powi(2)).sum();
            Ok((-sq / (2.0 * r.length_scale * r.length_scale)).exp())
        }
        RewardKind::TargetLoglik => {
            let members = r.mixture.members(cond)?;
            if members.iter().any(|(_, c)| c.std == 0.0) {
                return Err(Error::config(
                    "target-loglik reward needs components with std > 0",
                ));
            }
            let mut best = f64::NEG_INFINITY;
            for (_, c) in &members {
                best = best.max(r.log_data_density(&c.mean, cond)?);
            }
            let lp = r.log_data_density(x, cond)?;
            Ok((lp - best).exp().clamp(0.0, 1.0))
        }
    }
}

/// Gradient of the mode-proximity reward with respect to `x` (the nearest
/// mode is held fixed).
pub fn reward_grad(r: &RewardFn, x: &[f64], cond: Condition) -> Result<Vec<f64>> {
    if r.kind != RewardKind::ModeProximity {
        return Err(Error::config(
            "reward gradients are only available for mode-proximity",
        ));
    }
    let value = reward(r, x, cond)?;
    let mu = r.mixture.nearest_mean(x, cond)?;
    let l2 = r.length_scale * r.length_scale;
    Ok(x.iter()
        .zip(mu)
        .map(|(a, m)| -value * (a - m) / l2)
        .collect())
}

/// `1 - r`.
pub fn reward_npo(r_value: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&r_value) {
        return Err(Error::invalid(format!("reward {r_value} outside [0, 1]")));
    }
    Ok(1.0 - r_value)
}

/// Per-sample rewards.
pub fn rewards(r: &RewardFn, samples: ArrayView2<f64>, cond: &[Condition]) -> Result<Vec<f64>> {
    if samples.nrows() != cond.len() {
        return Err(Error::invalid(format!(
            "{} samples, {} conditions",
            samples.nrows(),
            cond.len()
        )));
    }
    samples
        .rows()
        .into_iter()
        .zip(cond)
        .map(|(x, &c)| reward(r, &x.to_vec(), c))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preference {
    #[default]
    Positive,
    /// Uses `1 - R`.
    Negative,
}

/// `mean R - beta * KL`, a reported metric only.
pub fn rlhf_objective_estimate(
    samples: ArrayView2<f64>,
    cond: &[Condition],
    r: &RewardFn,
    kl_estimate: f64,
    beta: f64,
    preference: Preference,
) -> Result<f64> {
    if samples.nrows() == 0 {
        return Err(Error::invalid("empty sample set"));
    }
    let values = rewards(r, samples, cond)?;
    let mut total = 0.0;
    for v in values {
        total += match preference {
            Preference::Positive => v,
            Preference::Negative => reward_npo(v)?,
        };
    }
    Ok(total / samples.nrows() as f64 - beta * kl_estimate)
}

/// Axis-aligned histogram binning.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinSpec {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub bins: Vec<usize>,
    /// Mass assigned to empty `q` bins where `p` has mass.
    pub eps_bin: f64,
}

impl BinSpec {
    pub fn square(lo: f64, hi: f64, bins: usize, dim: usize) -> Self {
        Self {
            lo: vec![lo; dim],
            hi: vec![hi; dim],
            bins: vec![bins; dim],
            eps_bin: 1e-9,
        }
    }

    fn validate(&self, dim: usize) -> Result<()> {
        if self.lo.len() != dim || self.hi.len() != dim || self.bins.len() != dim {
            return Err(Error::invalid(format!(
                "bin spec does not have {dim} dimensions"
            )));
        }
        for d in 0..dim {
            if !(self.hi[d] > self.lo[d]) || self.bins[d] == 0 {
                return Err(Error::invalid(format!("bad bins on axis {d}")));
            }
        }
        if !(self.eps_bin > 0.0) {
            return Err(Error::invalid("eps_bin must be positive"));
        }
        Ok(())
    }

    /// Flat bin index; points outside the box fall into the edge bins.
    fn index(&self, x: &[f64]) -> usize {
        let mut idx = 0;
        for d in 0..x.len() {
            let n = self.bins[d];
            let u = (x[d] - self.lo[d]) / (self.hi[d] - self.lo[d]) * n as f64;
            let b = if u.is_nan() {
                0
            } else {
                (u.floor().max(0.0) as usize).min(n - 1)
            };
            idx = idx * n + b;
        }
        idx
    }

    fn counts(&self, x: ArrayView2<f64>) -> Vec<f64> {
        let mut c = vec![0.0; self.bins.iter().product()];
        for row in x.rows() {
            c[self.index(&row.to_vec())] += 1.0;
        }
        c
    }
}

impl Default for BinSpec {
    fn default() -> Self {
        Self::square(-1.6, 1.6, 64, 2)
    }
}

/// Histogram estimate of `KL(p || q)`.
pub fn kl_histogram(p: ArrayView2<f64>, q: ArrayView2<f64>, spec: &BinSpec) -> Result<f64> {
    if p.nrows() == 0 || q.nrows() == 0 {
        return Err(Error::invalid("KL needs non-empty sample sets"));
    }
    if p.ncols() != q.ncols() {
        return Err(Error::invalid("sample sets differ in dimension"));
    }
    spec.validate(p.ncols())?;
    let (np, nq) = (p.nrows() as f64, q.nrows() as f64);
    let cp = spec.counts(p);
    let cq = spec.counts(q);
    let mut kl = 0.0;
    for (a, b) in cp.iter().zip(&cq) {
        if *a == 0.0 {
            continue;
        }
        let ph = a / np;
        let qh = if *b == 0.0 { spec.eps_bin } else { b / nq };
        kl += ph * (ph / qh).ln();
    }
    Ok(kl)
}

/// Fraction of pairs where `a` beats `b`, ties counting one half.
pub fn winning_ratio(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::invalid(format!("{} vs {} scores", a.len(), b.len())));
    }
    if a.is_empty() {
        return Err(Error::invalid("no paired scores"));
    }
    let wins: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| match x.partial_cmp(y) {
            Some(std::cmp::Ordering::Greater) => 1.0,
            Some(std::cmp::Ordering::Equal) => 0.5,
            _ => 0.0,
        })
        .sum();
    Ok(wins / a.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NfeRow {
    pub method: String,
    pub generation_nfe: u64,
    pub training_nfe: u64,
    /// Generation NFE relative to the most expensive method.
    pub ratio: f64,
    /// Most expensive method's generation NFE divided by this one's.
    pub speedup: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NfeReport {
    pub rows: Vec<NfeRow>,
}

impl NfeReport {
    pub fn to_table(&self) -> String {
        let width = self
            .rows
            .iter()
            .map(|r| r.method.len())
            .max()
            .unwrap_or(6)
            .max(6);
        let mut out = format!(
            "{:<width$}  {:>14}  {:>12}  {:>6}  {:>7}\n",
            "method", "generation_nfe", "training_nfe", "ratio", "speedup"
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<width$}  {:>14}  {:>12}  {:>6.3}  {:>7.3}",
                r.method, r.generation_nfe, r.training_nfe, r.ratio, r.speedup
            );
        }
        out
    }
}

/// Per-method NFE totals and ratios from run manifests.
pub fn nfe_report(manifests: &[RunManifest]) -> Result<NfeReport> {
    let mut rows = Vec::with_capacity(manifests.len());
    for m in manifests {
        let nfe = m.nfe.ok_or_else(|| {
            Error::IncompleteManifest(format!("`{}` run has no NFE counters", m.command))
        })?;
        rows.push((m.label(), nfe));
    }
    let max = rows.iter().map(|(_, n)| n.generation).max().unwrap_or(0);
    Ok(NfeReport {
        rows: rows
            .into_iter()
            .map(|(method, n)| {
                let (ratio, speedup) = if max == 0 {
                    (1.0, 1.0)
                } else if n.generation == 0 {
                    (0.0, f64::INFINITY)
                } else {
                    (
                        n.generation as f64 / max as f64,
                        max as f64 / n.generation as f64,
                    )
                };
                NfeRow {
                    method,
                    generation_nfe: n.generation,
                    training_nfe: n.training,
                    ratio,
                    speedup,
                }
            })
            .collect(),
    })
}

/// Comparison of two sample sets drawn with paired seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub samples: usize,
    pub seed: u64,
    pub mean_reward_a: f64,
    pub mean_reward_b: f64,
    /// Fraction of pairs where `a` scores higher (ties count half).
    pub winning_ratio: f64,
    /// Histogram `KL(a || b)`.
    pub kl: f64,
    /// `mean R(a) - beta * KL` and its NPO counterpart `mean (1 - R(a)) - beta * KL`.
    pub rlhf_objective: f64,
    pub npo_objective: f64,
    pub kl_beta: f64,
    pub nfe_a: u64,
    pub nfe_b: u64,
}

impl EvalReport {
    #[allow(clippy::too_many_arguments)]
    pub fn compute(
        r: &RewardFn,
        a: ArrayView2<f64>,
        b: ArrayView2<f64>,
        cond: &[Condition],
        bins: &BinSpec,
        kl_beta: f64,
        seed: u64,
        nfe: (u64, u64),
    ) -> Result<Self> {
        let ra = rewards(r, a, cond)?;
        let rb = rewards(r, b, cond)?;
        let kl = kl_histogram(a, b, bins)?;
        let n = ra.len() as f64;
        let mean_a = ra.iter().sum::<f64>() / n;
        Ok(Self {
            samples: ra.len(),
            seed,
            mean_reward_a: mean_a,
            mean_reward_b: rb.iter().sum::<f64>() / n,
            winning_ratio: winning_ratio(&ra, &rb)?,
            kl,
            rlhf_objective: mean_a - kl_beta * kl,
            npo_objective: (1.0 - mean_a) - kl_beta * kl,
            kl_beta,
            nfe_a: nfe.0,
            nfe_b: nfe.1,
        })
    }

    pub fn to_table(&self) -> String {
        let rows: [(&str, String); 11] = [
            ("samples", self.samples.to_string()),
            ("seed", self.seed.to_string()),
            ("mean_reward_a", format!("{:.6}", self.mean_reward_a)),
            ("mean_reward_b", format!("{:.6}", self.mean_reward_b)),
            ("winning_ratio", format!("{:.6}", self.winning_ratio)),
            ("kl", format!("{:.6}", self.kl)),
            ("kl_beta", format!("{}", self.kl_beta)),
            ("rlhf_objective", format!("{:.6}", self.rlhf_objective)),
            ("npo_objective", format!("{:.6}", self.npo_objective)),
            ("nfe_a", self.nfe_a.to_string()),
            ("nfe_b", self.nfe_b.to_string()),
        ];
        let mut out = String::new();
        for (k, v) in rows {
            let _ = writeln!(out, "{k:<16}{v:>14}");
        }
        out
    }
}
