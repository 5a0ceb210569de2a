//! Normal-inverse-Wishart prior: posterior updates, marginal likelihoods
//! and sampling of Gaussian parameters.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::distributions::Distribution;
use rand::Rng;
use rand_distr::{ChiSquared, StandardNormal};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::linalg;

const LN_2PI: f64 = 1.8378770664093453;

/// Prior (or posterior) parameters {m, S, kappa, nu} over a Gaussian's
/// mean and covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct NiwParams {
    pub m: Array1<f64>,
    pub s: Array2<f64>,
    pub kappa: f64,
    pub nu: f64,
}

impl NiwParams {
    pub fn dim(&self) -> usize {
        self.m.len()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        if self.s.nrows() != d || self.s.ncols() != d {
            return Err(Error::Shape(format!(
                "scale matrix is {}x{}, mean has dimension {d}",
                self.s.nrows(),
                self.s.ncols()
            )));
        }
        if !(self.kappa > 0.0) {
            return Err(Error::Parameter(format!(
                "kappa must be positive, got {}",
                self.kappa
            )));
        }
        if !(self.nu > d as f64 - 1.0) {
            return Err(Error::Parameter(format!(
                "nu must exceed D-1 = {}, got {}",
                d as f64 - 1.0,
                self.nu
            )));
        }
        if linalg::cholesky(&self.s.view()).is_none() {
            return Err(Error::Parameter(
                "scale matrix is not positive-definite".into(),
            ));
        }
        Ok(())
    }
}

/// Sufficient statistics of a frame set: count, mean and centered scatter.
#[derive(Debug, Clone)]
pub struct SuffStats {
    pub n: usize,
    pub mean: Array1<f64>,
    pub scatter: Array2<f64>,
}

impl SuffStats {
    pub fn empty(d: usize) -> Self {
        SuffStats {
            n: 0,
            mean: Array1::zeros(d),
            scatter: Array2::zeros((d, d)),
        }
    }

    pub fn from_rows(rows: &ArrayView2<f64>) -> Self {
        let (n, d) = (rows.nrows(), rows.ncols());
        if n == 0 {
            return SuffStats::empty(d);
        }
        let mean = rows.mean_axis(Axis(0)).expect("n >= 1");
        let mut scatter = Array2::<f64>::zeros((d, d));
        for row in rows.axis_iter(Axis(0)) {
            let c = &row - &mean;
            for i in 0..d {
                for j in 0..=i {
                    scatter[[i, j]] += c[i] * c[j];
                }
            }
        }
        for i in 0..d {
            for j in 0..i {
                scatter[[j, i]] = scatter[[i, j]];
            }
        }
        SuffStats { n, mean, scatter }
    }

    /// Pooled statistics of two disjoint frame sets.
    pub fn merged(&self, other: &SuffStats) -> SuffStats {
        if self.n == 0 {
            return other.clone();
        }
        if other.n == 0 {
            return self.clone();
        }
        let (n1, n2) = (self.n as f64, other.n as f64);
        let n = n1 + n2;
        let mean = (&self.mean * n1 + &other.mean * n2) / n;
        let dm = &self.mean - &other.mean;
        let coef = n1 * n2 / n;
        let d = self.mean.len();
        let mut scatter = &self.scatter + &other.scatter;
        for i in 0..d {
            for j in 0..d {
                scatter[[i, j]] += coef * dm[i] * dm[j];
            }
        }
        SuffStats {
            n: self.n + other.n,
            mean,
            scatter,
        }
    }
}

/// Posterior parameters given assigned data. With no data the prior is
/// returned unchanged, field by field.
///
/// kappa_k = kappa0 + N, nu_k = nu0 + N, m_k = (kappa0 m0 + N xbar)/kappa_k.
/// The scale update is computed in the centered form
/// S_k = S0 + C + kappa0 N / kappa_k (xbar - m0)(xbar - m0)^T,
/// which equals S0 + sum x x^T + kappa0 m0 m0^T - kappa_k m_k m_k^T but
/// avoids the cancellation of large uncentered moments.
pub fn posterior(prior: &NiwParams, stats: &SuffStats) -> NiwParams {
    if stats.n == 0 {
        return prior.clone();
    }
    let d = prior.dim();
    let n = stats.n as f64;
    let kappa = prior.kappa + n;
    let nu = prior.nu + n;
    let m = (&prior.m * prior.kappa + &stats.mean * n) / kappa;
    let dm = &stats.mean - &prior.m;
    let coef = prior.kappa * n / kappa;
    let mut s = &prior.s + &stats.scatter;
    for i in 0..d {
        for j in 0..d {
            s[[i, j]] += coef * dm[i] * dm[j];
        }
    }
    NiwParams { m, s, kappa, nu }
}

/// ln Gamma_D(a), the multivariate gamma function.
pub fn ln_multigamma(d: usize, a: f64) -> f64 {
    let base = 0.25 * (d * (d - 1)) as f64 * std::f64::consts::PI.ln();
    base + (1..=d)
        .map(|j| ln_gamma(a + 0.5 * (1.0 - j as f64)))
        .sum::<f64>()
}

fn sym_log_det(s: &Array2<f64>) -> f64 {
    match linalg::cholesky(&s.view()) {
        Some(l) => linalg::log_det_from_cholesky(&l.view()),
        None => {
            let (vals, _) = linalg::jacobi_eigen(&s.view());
            vals.iter().map(|&v| v.max(f64::MIN_POSITIVE).ln()).sum()
        }
    }
}

/// Normalizing constant of the NIW density in log form.
pub fn ln_z(p: &NiwParams) -> f64 {
    let d = p.dim() as f64;
    0.5 * p.nu * d * std::f64::consts::LN_2
        + ln_multigamma(p.dim(), 0.5 * p.nu)
        + 0.5 * d * (2.0 * std::f64::consts::PI / p.kappa).ln()
        - 0.5 * p.nu * sym_log_det(&p.s)
}

/// Log marginal likelihood of the frames behind `stats` with parameters
/// integrated out: ln Z(posterior) - ln Z(prior) - N D/2 ln 2pi.
pub fn marginal_log_likelihood(prior: &NiwParams, stats: &SuffStats) -> f64 {
    let post = posterior(prior, stats);
    ln_z(&post) - ln_z(prior) - 0.5 * (stats.n * prior.dim()) as f64 * LN_2PI
}

/// Draw (mu, Sigma) from the NIW: Sigma by inverting a Bartlett-sampled
/// Wishart with scale S^{-1}, then mu from N(m, Sigma/kappa).
pub fn sample_gaussian<R: Rng>(p: &NiwParams, rng: &mut R) -> (Array1<f64>, Array2<f64>) {
    let d = p.dim();
    let s_inv = linalg::spd_inverse(&p.s.view()).expect("scale matrix is SPD");
    let l = linalg::cholesky(&s_inv.view()).expect("inverse of SPD is SPD");
    // Bartlett factor: lower triangular, chi^2 diagonal, standard normal below
    let mut a = Array2::<f64>::zeros((d, d));
    for i in 0..d {
        let chi = ChiSquared::new(p.nu - i as f64).expect("nu > D - 1");
        a[[i, i]] = chi.sample(rng).max(f64::MIN_POSITIVE).sqrt();
        for j in 0..i {
            a[[i, j]] = StandardNormal.sample(rng);
        }
    }
    let m = l.dot(&a); // lower-triangular factor of the Wishart draw
                       // Sigma = (M M^T)^{-1} = B^T B with B = M^{-1}
    let b = lower_inverse(&m);
    let mut sigma = b.t().dot(&b);
    for i in 0..d {
        for j in 0..i {
            let v = 0.5 * (sigma[[i, j]] + sigma[[j, i]]);
            sigma[[i, j]] = v;
            sigma[[j, i]] = v;
        }
    }
    let l_sigma = linalg::cholesky(&sigma.view()).unwrap_or_else(|| {
        linalg::cholesky(&linalg::floor_eigenvalues(&sigma, 1e-12).view()).expect("floored")
    });
    let z: Array1<f64> = (0..d)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect();
    let mu = &p.m + &(l_sigma.dot(&z) / p.kappa.sqrt());
    (mu, sigma)
}

fn lower_inverse(m: &Array2<f64>) -> Array2<f64> {
    let d = m.nrows();
    let mut inv = Array2::<f64>::zeros((d, d));
    for col in 0..d {
        inv[[col, col]] = 1.0 / m[[col, col]];
        for i in col + 1..d {
            let mut acc = 0.0;
            for k in col..i {
                acc += m[[i, k]] * inv[[k, col]];
            }
            inv[[i, col]] = -acc / m[[i, i]];
        }
    }
    inv
}
