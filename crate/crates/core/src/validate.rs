//! Oracle-based checks of the re-noising and objective-equivalence claims.
//!
//! Every check draws from the exact mixture and its closed-form noisy
//! marginals, so no learned network is involved.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::condition::Condition;
use crate::error::{Error, Result};
use crate::oracle::GaussianMixture;
use crate::schedule::NoiseSchedule;
use crate::tdft::{renoise_corrected, renoise_naive};

/// Empirical moments of a population against their closed forms, with the
/// largest deviation expressed in standard errors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentCheck {
    pub t: usize,
    pub s: usize,
    pub n: usize,
    pub mean: Vec<f64>,
    pub mean_want: Vec<f64>,
    pub cov: Vec<Vec<f64>>,
    pub cov_want: Vec<Vec<f64>>,
    /// Largest `|empirical - closed form| / standard error` over all entries.
    pub max_z: f64,
    pub passed: bool,
}

/// Sample moments plus the standard error of every entry.
struct Moments {
    mean: Vec<f64>,
    mean_se: Vec<f64>,
    cov: Vec<Vec<f64>>,
    cov_se: Vec<Vec<f64>>,
}

fn moments(x: &Array2<f64>) -> Moments {
    let (n, d) = x.dim();
    let nf = n as f64;
    let mean: Vec<f64> = (0..d).map(|j| x.column(j).sum() / nf).collect();
    let mut cov = vec![vec![0.0; d]; d];
    let mut cov_se = vec![vec![0.0; d]; d];
    for i in 0..d {
        for j in 0..d {
            let prods: Vec<f64> = x
                .rows()
                .into_iter()
                .map(|r| (r[i] - mean[i]) * (r[j] - mean[j]))
                .collect();
            let m = prods.iter().sum::<f64>() / nf;
            let v = prods.iter().map(|p| (p - m).powi(2)).sum::<f64>() / (nf - 1.0);
            cov[i][j] = m * nf / (nf - 1.0);
            cov_se[i][j] = (v / nf).sqrt();
        }
    }
    let mean_se = (0..d).map(|j| (cov[j][j] / nf).sqrt()).collect();
    Moments {
        mean,
        mean_se,
        cov,
        cov_se,
    }
}

fn noise_rows<R: Rng>(rng: &mut R, n: usize, d: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((n, d), || rng.sample(StandardNormal))
}

/// Draws `x_t` from the exact noisy marginal at `t`.
fn noisy_marginal<R: Rng>(
    mixture: &GaussianMixture,
    schedule: &NoiseSchedule,
    t: usize,
    n: usize,
    rng: &mut R,
) -> Result<Array2<f64>> {
    let x0 = mixture.sample_data(Condition::Null, rng, n)?;
    let eps = noise_rows(rng, n, mixture.dim());
    let mut out = Array2::zeros(x0.raw_dim());
    for i in 0..n {
        let v = schedule.add_noise(&x0.row(i).to_vec(), t, &eps.row(i).to_vec())?;
        out.row_mut(i).assign(&ndarray::ArrayView1::from(&v[..]));
    }
    Ok(out)
}

/// Corrected re-noising from exact `x_t` samples: moments of `x_s` against
/// the true marginal at `s`, within `z_max` standard errors.
pub fn theorem1_check(
    mixture: &GaussianMixture,
    schedule: &NoiseSchedule,
    t: usize,
    s: usize,
    n: usize,
    seed: u64,
    z_max: f64,
) -> Result<MomentCheck> {
    if n < 2 {
        return Err(Error::invalid("need at least two samples"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x_t = if t == 0 {
        mixture.sample_data(Condition::Null, &mut rng, n)?
    } else {
        noisy_marginal(mixture, schedule, t, n, &mut rng)?
    };
    let eps = noise_rows(&mut rng, n, mixture.dim());
    let mut x_s = Array2::zeros(x_t.raw_dim());
    for i in 0..n {
        let v = renoise_corrected(&x_t.row(i).to_vec(), schedule, t, s, &eps.row(i).to_vec())?;
        x_s.row_mut(i).assign(&ndarray::ArrayView1::from(&v[..]));
    }
    let (mean_want, cov_want) = mixture.noisy_moments(schedule, s, Condition::Null)?;
    let m = moments(&x_s);
    let mut max_z: f64 = 0.0;
    for i in 0..mixture.dim() {
        max_z = max_z.max((m.mean[i] - mean_want[i]).abs() / m.mean_se[i]);
        for j in 0..mixture.dim() {
            max_z = max_z.max((m.cov[i][j] - cov_want[i][j]).abs() / m.cov_se[i][j]);
        }
    }
    Ok(MomentCheck {
        t,
        s,
        n,
        mean: m.mean,
        mean_want,
        cov: m.cov,
        cov_want,
        max_z,
        passed: max_z < z_max,
    })
}

/// Naive re-noising of the posterior mean: the covariance deficit against
/// the true marginal at `s`, in standard errors of the empirical variance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NaiveCheck {
    pub t: usize,
    pub s: usize,
    pub n: usize,
    /// Per-axis `true variance - empirical variance`.
    pub deficit: Vec<f64>,
    /// Smallest per-axis deficit in standard errors.
    pub min_deficit_z: f64,
    /// Corrected rule on the same `x_t`, for contrast.
    pub corrected_max_z: f64,
    pub passed: bool,
}

pub fn naive_mismatch_check(
    mixture: &GaussianMixture,
    schedule: &NoiseSchedule,
    t: usize,
    s: usize,
    n: usize,
    seed: u64,
    z_min: f64,
) -> Result<NaiveCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x_t = noisy_marginal(mixture, schedule, t, n, &mut rng)?;
    let eps = noise_rows(&mut rng, n, mixture.dim());
    let mut naive = Array2::zeros(x_t.raw_dim());
    let mut corrected = Array2::zeros(x_t.raw_dim());
    for i in 0..n {
        let xt = x_t.row(i).to_vec();
        let e = eps.row(i).to_vec();
        let target = mixture.posterior_mean(schedule, &xt, t, Condition::Null)?;
        let a = renoise_naive(&target, schedule, s, &e)?;
        let b = renoise_corrected(&xt, schedule, t, s, &e)?;
        naive.row_mut(i).assign(&ndarray::ArrayView1::from(&a[..]));
        corrected
            .row_mut(i)
            .assign(&ndarray::ArrayView1::from(&b[..]));
    }
    let (mean_want, cov_want) = mixture.noisy_moments(schedule, s, Condition::Null)?;
    let mn = moments(&naive);
    let mc = moments(&corrected);
    let d = mixture.dim();
    let deficit: Vec<f64> = (0..d).map(|i| cov_want[i][i] - mn.cov[i][i]).collect();
    let min_deficit_z = (0..d)
        .map(|i| deficit[i] / mn.cov_se[i][i])
        .fold(f64::INFINITY, f64::min);
    let mut corrected_max_z: f64 = 0.0;
    for i in 0..d {
        corrected_max_z = corrected_max_z.max((mc.mean[i] - mean_want[i]).abs() / mc.mean_se[i]);
        for j in 0..d {
            corrected_max_z =
                corrected_max_z.max((mc.cov[i][j] - cov_want[i][j]).abs() / mc.cov_se[i][j]);
        }
    }
    Ok(NaiveCheck {
        t,
        s,
        n,
        deficit,
        min_deficit_z,
        corrected_max_z,
        passed: min_deficit_z > z_min,
    })
}

/// Least-squares fit of an affine map `[x, 1] -> y`; returns the
/// `(d + 1) x d` coefficient matrix.
pub fn affine_least_squares(x: &Array2<f64>, y: &Array2<f64>) -> Result<Array2<f64>> {
    let (n, d) = x.dim();
    if y.nrows() != n || n <= d {
        return Err(Error::invalid("not enough rows for the affine fit"));
    }
    let p = d + 1;
    let mut xtx = vec![vec![0.0; p]; p];
    let mut xty = vec![vec![0.0; y.ncols()]; p];
    let mut feat = vec![1.0; p];
    for i in 0..n {
        for j in 0..d {
            feat[j] = x[[i, j]];
        }
        for a in 0..p {
            for b in 0..p {
                xtx[a][b] += feat[a] * feat[b];
            }
            for c in 0..y.ncols() {
                xty[a][c] += feat[a] * y[[i, c]];
            }
        }
    }
    // Gauss-Jordan with partial pivoting on [X^T X | X^T Y]
    let m = y.ncols();
    let mut aug: Vec<Vec<f64>> = (0..p)
        .map(|r| [xtx[r].clone(), xty[r].clone()].concat())
        .collect();
    for col in 0..p {
        let piv = (col..p)
            .max_by(|&a, &b| aug[a][col].abs().total_cmp(&aug[b][col].abs()))
            .expect("non-empty");
        if aug[piv][col].abs() < 1e-300 {
            return Err(Error::invalid("singular normal equations"));
        }
        aug.swap(col, piv);
        let div = aug[col][col];
        for v in aug[col].iter_mut() {
            *v /= div;
        }
        for r in 0..p {
            if r != col {
                let f = aug[r][col];
                if f != 0.0 {
                    for c in 0..p + m {
                        aug[r][c] -= f * aug[col][c];
                    }
                }
            }
        }
    }
    let mut w = Array2::zeros((p, m));
    for r in 0..p {
        for c in 0..m {
            w[[r, c]] = aug[r][p + c];
        }
    }
    Ok(w)
}

/// Linear students fitted to the truncated objective and to the standard
/// objective on exact samples, at one `(t, s)` pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearStudentCheck {
    pub t: usize,
    pub s: usize,
    pub n: usize,
    pub truncated: Vec<Vec<f64>>,
    pub baseline: Vec<Vec<f64>>,
    /// Frobenius distance between the two minimisers.
    pub distance: f64,
    pub passed: bool,
}

/// Truncated objective: `x_t` from the exact marginal, target the posterior
/// mean at `t`, input `x_s` from corrected re-noising. Baseline: target an
/// exact sample `x0`, input `add_noise(x0, s)`.
pub fn linear_student_check(
    mixture: &GaussianMixture,
    schedule: &NoiseSchedule,
    t: usize,
    s: usize,
    n: usize,
    seed: u64,
    tol: f64,
) -> Result<LinearStudentCheck> {
    let d = mixture.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let x_t = noisy_marginal(mixture, schedule, t, n, &mut rng)?;
    let eps = noise_rows(&mut rng, n, d);
    let mut xs = Array2::zeros((n, d));
    let mut target = Array2::zeros((n, d));
    for i in 0..n {
        let xt = x_t.row(i).to_vec();
        let tgt = mixture.posterior_mean(schedule, &xt, t, Condition::Null)?;
        let v = renoise_corrected(&xt, schedule, t, s, &eps.row(i).to_vec())?;
        xs.row_mut(i).assign(&ndarray::ArrayView1::from(&v[..]));
        target
            .row_mut(i)
            .assign(&ndarray::ArrayView1::from(&tgt[..]));
    }
    let w_trunc = affine_least_squares(&xs, &target)?;

    let x0 = mixture.sample_data(Condition::Null, &mut rng, n)?;
    let eps = noise_rows(&mut rng, n, d);
    let mut xs = Array2::zeros((n, d));
    for i in 0..n {
        let v = schedule.add_noise(&x0.row(i).to_vec(), s, &eps.row(i).to_vec())?;
        xs.row_mut(i).assign(&ndarray::ArrayView1::from(&v[..]));
    }
    let w_base = affine_least_squares(&xs, &x0)?;

    let distance = (&w_trunc - &w_base)
        .iter()
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    let rows = |w: &Array2<f64>| w.rows().into_iter().map(|r| r.to_vec()).collect();
    Ok(LinearStudentCheck {
        t,
        s,
        n,
        truncated: rows(&w_trunc),
        baseline: rows(&w_base),
        distance,
        passed: distance < tol,
    })
}

/// Settings of the full validation suite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteConfig {
    pub seed: u64,
    pub moment_samples: usize,
    pub linear_samples: usize,
    /// `(t, s)` pairs as fractions of `T`.
    pub pairs: Vec<(f64, f64)>,
    pub naive_pair: (f64, f64),
    pub linear_pairs: Vec<(f64, f64)>,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            moment_samples: 100_000,
            linear_samples: 1_000_000,
            pairs: vec![
                (0.1, 0.1),
                (0.1, 0.3),
                (0.1, 0.9),
                (0.3, 0.4),
                (0.3, 0.7),
                (0.5, 0.5),
                (0.5, 0.6),
                (0.5, 1.0),
                (0.7, 0.9),
                (0.9, 0.95),
            ],
            naive_pair: (0.5, 0.6),
            linear_pairs: vec![(0.3, 0.4), (0.3, 0.7), (0.5, 0.8)],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub corrected_renoise: Vec<MomentCheck>,
    pub naive_mismatch: NaiveCheck,
    pub linear_student: Vec<LinearStudentCheck>,
    pub passed: bool,
}

fn at(schedule: &NoiseSchedule, frac: f64) -> usize {
    ((frac * schedule.t_max() as f64).round() as usize).clamp(1, schedule.t_max())
}

/// Runs every oracle check on `mixture`.
pub fn run_suite(
    mixture: &GaussianMixture,
    schedule: &NoiseSchedule,
    cfg: &SuiteConfig,
) -> Result<SuiteReport> {
    let mut corrected = Vec::new();
    for (i, &(t, s)) in cfg.pairs.iter().enumerate() {
        corrected.push(theorem1_check(
            mixture,
            schedule,
            at(schedule, t),
            at(schedule, s),
            cfg.moment_samples,
            cfg.seed.wrapping_add(i as u64),
            4.0,
        )?);
    }
    let naive = naive_mismatch_check(
        mixture,
        schedule,
        at(schedule, cfg.naive_pair.0),
        at(schedule, cfg.naive_pair.1),
        cfg.moment_samples,
        cfg.seed.wrapping_add(1000),
        10.0,
    )?;
    let mut linear = Vec::new();
    for (i, &(t, s)) in cfg.linear_pairs.iter().enumerate() {
        linear.push(linear_student_check(
            mixture,
            schedule,
            at(schedule, t),
            at(schedule, s),
            cfg.linear_samples,
            cfg.seed.wrapping_add(2000 + i as u64),
            1e-2,
        )?);
    }
    let passed =
        corrected.iter().all(|c| c.passed) && naive.passed && linear.iter().all(|c| c.passed);
    Ok(SuiteReport {
        corrected_renoise: corrected,
        naive_mismatch: naive,
        linear_student: linear,
        passed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn affine_fit_recovers_exact_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = noise_rows(&mut rng, 50, 2);
        let mut y = Array2::zeros((50, 2));
        for i in 0..50 {
            y[[i, 0]] = 2.0 * x[[i, 0]] - x[[i, 1]] + 0.5;
            y[[i, 1]] = 0.25 * x[[i, 1]] - 3.0;
        }
        let w = affine_least_squares(&x, &y).unwrap();
        let want = ndarray::array![[2.0, 0.0], [-1.0, 0.25], [0.5, -3.0]];
        assert!((&w - &want).iter().all(|v| v.abs() < 1e-10));
    }

    #[test]
    fn small_suite_behaves() {
        let s = NoiseSchedule::cosine(1000).unwrap();
        let gm = GaussianMixture::default_ring();
        let c = theorem1_check(&gm, &s, 300, 700, 20_000, 1, 4.0).unwrap();
        assert!(c.passed, "{c:?}");
        let same = theorem1_check(&gm, &s, 300, 700, 20_000, 1, 4.0).unwrap();
        assert_eq!(c, same);
        let naive = naive_mismatch_check(&gm, &s, 500, 600, 20_000, 2, 10.0).unwrap();
        assert!(naive.passed, "{naive:?}");
        assert!(naive.corrected_max_z < 4.0);
    }
}
