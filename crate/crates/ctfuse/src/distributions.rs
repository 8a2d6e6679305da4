//! Primitive probability laws used throughout the model.
//!
//! Everything is computed on the log scale; raw densities underflow quickly
//! once seven measurement dimensions are involved. The multivariate pieces
//! work with a lower-triangular correlation factor and never materialize a
//! full covariance matrix.
//!
//! The non-elliptically-contoured t (NECT) is a scale mixture
//! `y = mu + Q^{-1/2} * T * L_R * z` with one chi-square mixing variable per
//! dimension, so each margin is a location-scale t with its own degrees of
//! freedom. Its joint density is only ever used *conditionally* on the mixing
//! latents; the marginal has no closed form and is not needed.

use rand::Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};

pub const LN_2PI: f64 = 1.837_877_066_409_345_3;

fn check_finite(name: &str, x: f64) -> Result<()> {
    if x.is_finite() {
        Ok(())
    } else {
        Err(Error::Domain(format!("{name} must be finite, got {x}")))
    }
}

fn check_positive(name: &str, x: f64) -> Result<()> {
    check_finite(name, x)?;
    if x > 0.0 {
        Ok(())
    } else {
        Err(Error::Domain(format!("{name} must be > 0, got {x}")))
    }
}

/// Log density of N(mu, sd) at x.
pub fn normal_logpdf(x: f64, mu: f64, sd: f64) -> f64 {
    let z = (x - mu) / sd;
    -0.5 * z * z - sd.ln() - 0.5 * LN_2PI
}

/// Log density of the location-scale Student t with `nu` degrees of freedom.
pub fn t_logpdf(x: f64, nu: f64, mu: f64, tau: f64) -> Result<f64> {
    check_finite("x", x)?;
    check_finite("mu", mu)?;
    check_positive("nu", nu)?;
    check_positive("tau", tau)?;
    let z = (x - mu) / tau;
    Ok(ln_gamma((nu + 1.0) / 2.0)
        - ln_gamma(nu / 2.0)
        - 0.5 * (nu * std::f64::consts::PI).ln()
        - tau.ln()
        - 0.5 * (nu + 1.0) * (z * z / nu).ln_1p())
}

/// Excess kurtosis of the t law, `6 / (nu - 4)`. Only exists for `nu > 4`.
pub fn excess_kurtosis(nu: f64) -> Result<f64> {
    check_finite("nu", nu)?;
    if nu <= 4.0 {
        return Err(Error::Domain(format!(
            "excess kurtosis undefined for nu <= 4 (got {nu})"
        )));
    }
    Ok(6.0 / (nu - 4.0))
}

/// Log density of the chi-square law with (possibly non-integer) `nu` > 0.
pub fn chisq_logpdf(x: f64, nu: f64) -> Result<f64> {
    check_positive("nu", nu)?;
    check_finite("x", x)?;
    if x <= 0.0 {
        return Err(Error::Domain(format!("chi-square support is x > 0, got {x}")));
    }
    let h = nu / 2.0;
    Ok((h - 1.0) * x.ln() - x / 2.0 - h * std::f64::consts::LN_2 - ln_gamma(h))
}

/// Log density of the half-normal law on [0, inf) with the given scale.
pub fn halfnormal_logpdf(x: f64, scale: f64) -> Result<f64> {
    check_positive("scale", scale)?;
    check_finite("x", x)?;
    if x < 0.0 {
        return Err(Error::Domain(format!("half-normal support is x >= 0, got {x}")));
    }
    Ok(std::f64::consts::LN_2 + normal_logpdf(x, 0.0, scale))
}

/// Log density of the exponential law parameterized by its MEAN (rate = 1/mean).
pub fn exponential_logpdf(x: f64, mean: f64) -> Result<f64> {
    check_positive("mean", mean)?;
    check_finite("x", x)?;
    if x < 0.0 {
        return Err(Error::Domain(format!("exponential support is x >= 0, got {x}")));
    }
    Ok(-mean.ln() - x / mean)
}

/// Lower-triangular Cholesky factor of a correlation matrix, stored packed
/// row-major (row i holds i+1 entries). Rows have unit Euclidean norm and the
/// diagonal is strictly positive, which makes the factor unique.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrCholesky {
    dim: usize,
    data: Vec<f64>,
}

pub const ROW_NORM_TOL: f64 = 1e-8;

impl CorrCholesky {
    pub fn identity(dim: usize) -> Self {
        let mut data = vec![0.0; dim * (dim + 1) / 2];
        for i in 0..dim {
            data[i * (i + 1) / 2 + i] = 1.0;
        }
        CorrCholesky { dim, data }
    }

    /// Build from packed lower-triangular entries, validating unit row norms
    /// and a positive diagonal.
    pub fn from_packed(dim: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != dim * (dim + 1) / 2 {
            return Err(Error::Dimension(format!(
                "packed factor for dim {dim} needs {} entries, got {}",
                dim * (dim + 1) / 2,
                data.len()
            )));
        }
        let f = CorrCholesky { dim, data };
        f.validate()?;
        Ok(f)
    }

    fn validate(&self) -> Result<()> {
        for i in 0..self.dim {
            let row = self.row(i);
            if !row.iter().all(|v| v.is_finite()) {
                return Err(Error::Domain(format!("non-finite entry in factor row {i}")));
            }
            let norm2: f64 = row.iter().map(|v| v * v).sum();
            if (norm2 - 1.0).abs() > 64.0 * ROW_NORM_TOL {
                return Err(Error::Domain(format!(
                    "factor row {i} has squared norm {norm2}, expected 1"
                )));
            }
            if row[i] <= 0.0 {
                return Err(Error::Domain(format!(
                    "factor diagonal entry {i} must be > 0, got {}",
                    row[i]
                )));
            }
        }
        Ok(())
    }

    /// Cholesky-factor a dense correlation matrix given row-major. The input
    /// must have a unit diagonal and be positive definite.
    pub fn from_correlation(dim: usize, r: &[f64]) -> Result<Self> {
        if r.len() != dim * dim {
            return Err(Error::Dimension(format!(
                "correlation matrix for dim {dim} needs {} entries, got {}",
                dim * dim,
                r.len()
            )));
        }
        for i in 0..dim {
            if (r[i * dim + i] - 1.0).abs() > 1e-10 {
                return Err(Error::Domain(format!(
                    "correlation matrix diagonal entry {i} is {}, expected 1",
                    r[i * dim + i]
                )));
            }
            for j in 0..i {
                if (r[i * dim + j] - r[j * dim + i]).abs() > 1e-10 {
                    return Err(Error::Domain("correlation matrix is not symmetric".into()));
                }
            }
        }
        let mut data = vec![0.0; dim * (dim + 1) / 2];
        for i in 0..dim {
            for j in 0..=i {
                let mut sum = r[i * dim + j];
                for l in 0..j {
                    sum -= data[i * (i + 1) / 2 + l] * data[j * (j + 1) / 2 + l];
                }
                if i == j {
                    if sum <= 0.0 {
                        return Err(Error::Domain(
                            "correlation matrix is not positive definite".into(),
                        ));
                    }
                    data[i * (i + 1) / 2 + j] = sum.sqrt();
                } else {
                    data[i * (i + 1) / 2 + j] = sum / data[j * (j + 1) / 2 + j];
                }
            }
        }
        CorrCholesky::from_packed(dim, data)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn packed(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * (i + 1) / 2..i * (i + 1) / 2 + i + 1]
    }

    /// Entry (i, j) with j <= i, 0-based.
    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        debug_assert!(j <= i);
        self.data[i * (i + 1) / 2 + j]
    }

    /// Sum of log diagonal entries (log determinant of the factor).
    pub fn log_diag_sum(&self) -> f64 {
        (0..self.dim).map(|i| self.get(i, i).ln()).sum()
    }

    /// out = L * x
    pub fn mul_vec(&self, x: &[f64], out: &mut [f64]) {
        for i in 0..self.dim {
            let row = self.row(i);
            let mut acc = 0.0;
            for (l, &xv) in row.iter().zip(x.iter()) {
                acc += l * xv;
            }
            out[i] = acc;
        }
    }

    /// Solve L w = b by forward substitution.
    pub fn forward_solve(&self, b: &[f64], w: &mut [f64]) {
        for i in 0..self.dim {
            let row = self.row(i);
            let mut acc = b[i];
            for j in 0..i {
                acc -= row[j] * w[j];
            }
            w[i] = acc / row[i];
        }
    }

    /// Solve L^T u = b by back substitution.
    pub fn back_solve(&self, b: &[f64], u: &mut [f64]) {
        for i in (0..self.dim).rev() {
            let mut acc = b[i];
            for j in i + 1..self.dim {
                acc -= self.get(j, i) * u[j];
            }
            u[i] = acc / self.get(i, i);
        }
    }

    /// Dense R = L * L^T, row-major.
    pub fn correlation(&self) -> Vec<f64> {
        let k = self.dim;
        let mut r = vec![0.0; k * k];
        for i in 0..k {
            for j in 0..k {
                let m = i.min(j);
                let mut acc = 0.0;
                for l in 0..=m {
                    acc += self.get(i, l) * self.get(j, l);
                }
                r[i * k + j] = acc;
            }
        }
        r
    }
}

/// Parameters of one K-dimensional NECT distribution.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NectParams {
    nu: Vec<f64>,
    mu: Vec<f64>,
    tau: Vec<f64>,
    l_r: CorrCholesky,
}

impl NectParams {
    pub fn new(nu: Vec<f64>, mu: Vec<f64>, tau: Vec<f64>, l_r: CorrCholesky) -> Result<Self> {
        let k = l_r.dim();
        if nu.len() != k || mu.len() != k || tau.len() != k {
            return Err(Error::Dimension(format!(
                "nu/mu/tau must all have length {k} (factor dimension)"
            )));
        }
        for (name, v) in [("nu", &nu), ("tau", &tau)] {
            for (i, &x) in v.iter().enumerate() {
                check_positive(&format!("{name}[{i}]"), x)?;
            }
        }
        for (i, &x) in mu.iter().enumerate() {
            check_finite(&format!("mu[{i}]"), x)?;
        }
        Ok(NectParams { nu, mu, tau, l_r })
    }

    pub fn dim(&self) -> usize {
        self.l_r.dim()
    }

    pub fn nu(&self) -> &[f64] {
        &self.nu
    }

    pub fn mu(&self) -> &[f64] {
        &self.mu
    }

    pub fn tau(&self) -> &[f64] {
        &self.tau
    }

    pub fn factor(&self) -> &CorrCholesky {
        &self.l_r
    }
}

/// Per-dimension chi-square mixing latents, `q_k = chisq(nu_k) draw / nu_k`.
#[derive(Debug, Clone)]
pub struct MixingLatents {
    pub q: Vec<f64>,
}

impl MixingLatents {
    pub fn new(q: Vec<f64>) -> Result<Self> {
        for (i, &x) in q.iter().enumerate() {
            check_positive(&format!("q[{i}]"), x)?;
        }
        Ok(MixingLatents { q })
    }

    pub fn unit(k: usize) -> Self {
        MixingLatents { q: vec![1.0; k] }
    }
}

/// Log density of N(mu, D L_R (D L_R)^T) with D = diag(scale_diag), via one
/// triangular solve. No dense covariance is formed.
pub fn mvn_chol_logpdf(y: &[f64], mu: &[f64], scale_diag: &[f64], l_r: &CorrCholesky) -> Result<f64> {
    let k = l_r.dim();
    if y.len() != k || mu.len() != k || scale_diag.len() != k {
        return Err(Error::Dimension(format!(
            "y/mu/scale must all have length {k} (factor dimension)"
        )));
    }
    let mut t = vec![0.0; k];
    for i in 0..k {
        check_positive(&format!("scale[{i}]"), scale_diag[i])?;
        t[i] = (y[i] - mu[i]) / scale_diag[i];
    }
    let mut w = vec![0.0; k];
    l_r.forward_solve(&t, &mut w);
    let quad: f64 = w.iter().map(|v| v * v).sum();
    let log_scale: f64 = scale_diag.iter().map(|s| s.ln()).sum();
    Ok(-0.5 * k as f64 * LN_2PI - log_scale - l_r.log_diag_sum() - 0.5 * quad)
}

/// Draw one NECT sample together with its mixing latents.
///
/// Draws z ~ N(0, I) first, then the K chi-square variables, and returns
/// `y_k = mu_k + tau_k / sqrt(q_k) * (L_R z)_k`. Marginally each `y_k` is a
/// location-scale t with `nu_k` degrees of freedom.
pub fn nect_sample<R: Rng + ?Sized>(params: &NectParams, rng: &mut R) -> (Vec<f64>, MixingLatents) {
    let k = params.dim();
    let z: Vec<f64> = (0..k).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let mut e = vec![0.0; k];
    params.l_r.mul_vec(&z, &mut e);
    let mut q = vec![0.0; k];
    let mut y = vec![0.0; k];
    for i in 0..k {
        let chi = ChiSquared::new(params.nu[i]).expect("validated nu").sample(rng);
        q[i] = chi / params.nu[i];
        y[i] = params.mu[i] + params.tau[i] / q[i].sqrt() * e[i];
    }
    (y, MixingLatents { q })
}

/// Log density of y conditional on the mixing latents: a correlated normal
/// with per-dimension scale `tau_k / sqrt(q_k)`. The chi-square log prior of
/// the latents is accounted for separately by the posterior.
pub fn nect_conditional_logpdf(y: &[f64], params: &NectParams, q: &MixingLatents) -> Result<f64> {
    let k = params.dim();
    if q.q.len() != k {
        return Err(Error::Dimension(format!("q must have length {k}")));
    }
    let mut scale = vec![0.0; k];
    for i in 0..k {
        check_positive(&format!("q[{i}]"), q.q[i])?;
        scale[i] = params.tau[i] / q.q[i].sqrt();
    }
    mvn_chol_logpdf(y, params.mu(), &scale, params.factor())
}

/// Log density (up to the eta-only normalizing constant) of the LKJ law with
/// shape `eta`, expressed on the Cholesky factor. Includes the
/// factor-parameterization Jacobian:
/// `sum_{k=2..K} (K - k + 2*eta - 2) * ln L[k,k]`.
pub fn lkj_chol_logpdf(l_r: &CorrCholesky, eta: f64) -> Result<f64> {
    check_positive("eta", eta)?;
    l_r.validate()?;
    let k = l_r.dim();
    let mut lp = 0.0;
    for row in 1..k {
        let exponent = (k - (row + 1)) as f64 + 2.0 * eta - 2.0;
        lp += exponent * l_r.get(row, row).ln();
    }
    Ok(lp)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn t_logpdf_normal_limit_at_zero() {
        let lp = t_logpdf(0.0, 1e6, 0.0, 1.0).unwrap();
        assert!((lp - (-0.9189385)).abs() < 1e-6, "lp = {lp}");
    }

    #[test]
    fn t_logpdf_cauchy_at_mode() {
        let lp = t_logpdf(0.0, 1.0, 0.0, 1.0).unwrap();
        assert!((lp - (-(std::f64::consts::PI).ln())).abs() < 1e-12);
        assert!((lp - (-1.1447299)).abs() < 1e-7);
    }

    #[test]
    fn t_logpdf_cauchy_tail_ratio() {
        // A z-score of 3 under a Cauchy is 10 times less likely than 0.
        let diff = t_logpdf(3.0, 1.0, 0.0, 1.0).unwrap() - t_logpdf(0.0, 1.0, 0.0, 1.0).unwrap();
        assert!((diff - (0.1f64).ln()).abs() < 1e-9, "diff = {diff}");
    }

    #[test]
    fn t_logpdf_rejects_nonfinite() {
        assert!(t_logpdf(f64::NAN, 1.0, 0.0, 1.0).is_err());
        assert!(t_logpdf(0.0, f64::INFINITY, 0.0, 1.0).is_err());
        assert!(t_logpdf(0.0, 1.0, 0.0, 0.0).is_err());
        assert!(t_logpdf(0.0, -1.0, 0.0, 1.0).is_err());
    }

    #[test]
    fn excess_kurtosis_values() {
        assert_eq!(excess_kurtosis(5.0).unwrap(), 6.0);
        assert_eq!(excess_kurtosis(10.0).unwrap(), 1.0);
        // Value implied by the ANTsNative posterior-mean degrees of freedom.
        assert!((excess_kurtosis(105.02).unwrap() - 0.0594).abs() < 1e-3);
        assert!(excess_kurtosis(4.0).is_err());
        assert!(excess_kurtosis(3.0).is_err());
    }

    #[test]
    fn mvn_chol_standard_bivariate_at_mode() {
        let l = CorrCholesky::identity(2);
        let lp = mvn_chol_logpdf(&[0.0, 0.0], &[0.0, 0.0], &[1.0, 1.0], &l).unwrap();
        assert!((lp - (-LN_2PI)).abs() < 1e-12);
        assert!((lp - (-1.8378771)).abs() < 1e-7);
    }

    #[test]
    fn mvn_chol_dim_one_matches_univariate_normal() {
        let l = CorrCholesky::identity(1);
        for &(y, mu, s) in &[(0.3, 0.0, 1.0), (-2.0, 1.5, 0.7), (10.0, 9.0, 3.0)] {
            let lp = mvn_chol_logpdf(&[y], &[mu], &[s], &l).unwrap();
            assert!((lp - normal_logpdf(y, mu, s)).abs() < 1e-14);
        }
    }

    #[test]
    fn mvn_chol_rejects_bad_scale() {
        let l = CorrCholesky::identity(2);
        assert!(mvn_chol_logpdf(&[0.0, 0.0], &[0.0, 0.0], &[1.0, 0.0], &l).is_err());
        assert!(mvn_chol_logpdf(&[0.0, 0.0], &[0.0, 0.0], &[1.0, -1.0], &l).is_err());
    }

    #[test]
    fn conditional_with_unit_mixing_is_plain_mvn() {
        let l_r = CorrCholesky::from_correlation(2, &[1.0, 0.6, 0.6, 1.0]).unwrap();
        let params = NectParams::new(
            vec![5.0, 9.0],
            vec![1.0, -1.0],
            vec![0.5, 2.0],
            l_r.clone(),
        )
        .unwrap();
        let y = [1.3, -0.2];
        let a = nect_conditional_logpdf(&y, &params, &MixingLatents::unit(2)).unwrap();
        let b = mvn_chol_logpdf(&y, &[1.0, -1.0], &[0.5, 2.0], &l_r).unwrap();
        assert!((a - b).abs() < 1e-14);
    }

    #[test]
    fn conditional_dim_one_is_scaled_normal() {
        let params = NectParams::new(vec![4.0], vec![0.7], vec![1.3], CorrCholesky::identity(1))
            .unwrap();
        for &qv in &[0.2, 1.0, 3.7] {
            let q = MixingLatents::new(vec![qv]).unwrap();
            let lp = nect_conditional_logpdf(&[1.9], &params, &q).unwrap();
            let expect = normal_logpdf(1.9, 0.7, 1.3 / qv.sqrt());
            assert!((lp - expect).abs() < 1e-14);
        }
    }

    #[test]
    fn exponential_logpdf_at_mean() {
        let lp = exponential_logpdf(30.0, 30.0).unwrap();
        assert!((lp - ((1.0f64 / 30.0).ln() - 1.0)).abs() < 1e-12);
        assert!((lp - (-4.4012)).abs() < 1e-4);
    }

    #[test]
    fn halfnormal_logpdf_at_zero() {
        let lp = halfnormal_logpdf(0.0, 3.0).unwrap();
        let expect = std::f64::consts::LN_2 - (3.0 * (2.0 * std::f64::consts::PI).sqrt()).ln();
        assert!((lp - expect).abs() < 1e-12);
        assert!((lp - (-1.3244)).abs() < 1e-4);
    }

    #[test]
    fn support_errors() {
        assert!(chisq_logpdf(0.0, 4.0).is_err());
        assert!(chisq_logpdf(-1.0, 4.0).is_err());
        assert!(chisq_logpdf(1.0, 0.0).is_err());
        assert!(halfnormal_logpdf(-0.1, 1.0).is_err());
        assert!(exponential_logpdf(-0.1, 1.0).is_err());
    }

    #[test]
    fn lkj_uniform_when_eta_is_one() {
        // eta = 1 puts zero weight on the diagonal at K = 2: flat over rho.
        let rho = 0.4f64;
        let l = CorrCholesky::from_packed(2, vec![1.0, rho, (1.0 - rho * rho).sqrt()]).unwrap();
        let l0 = CorrCholesky::identity(2);
        let a = lkj_chol_logpdf(&l, 1.0).unwrap();
        let b = lkj_chol_logpdf(&l0, 1.0).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn lkj_mode_at_identity() {
        // For eta = 2 the identity factor maximizes the log density.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for k in [2usize, 4, 7] {
            let id = CorrCholesky::identity(k);
            let lp_id = lkj_chol_logpdf(&id, 2.0).unwrap();
            for _ in 0..200 {
                let mut data = Vec::with_capacity(k * (k + 1) / 2);
                for i in 0..k {
                    let mut row: Vec<f64> = (0..=i)
                        .map(|_| rng.sample::<f64, _>(StandardNormal))
                        .collect();
                    row[i] = row[i].abs().max(1e-3);
                    let norm: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                    for v in &mut row {
                        *v /= norm;
                    }
                    data.extend_from_slice(&row);
                }
                let l = CorrCholesky::from_packed(k, data).unwrap();
                assert!(lkj_chol_logpdf(&l, 2.0).unwrap() <= lp_id + 1e-12);
            }
        }
    }

    #[test]
    fn factor_validation_catches_bad_rows() {
        assert!(CorrCholesky::from_packed(2, vec![1.0, 0.5, 0.5]).is_err());
        assert!(CorrCholesky::from_packed(2, vec![1.0, 0.8, -0.6]).is_err());
        assert!(CorrCholesky::from_packed(2, vec![1.0, 0.8]).is_err());
    }

    #[test]
    fn from_correlation_round_trips() {
        let r = [1.0, 0.47, -0.32, 0.47, 1.0, 0.1, -0.32, 0.1, 1.0];
        let l = CorrCholesky::from_correlation(3, &r).unwrap();
        let back = l.correlation();
        for (a, b) in r.iter().zip(back.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        let not_pd = [1.0, 0.99, -0.99, 0.99, 1.0, 0.99, -0.99, 0.99, 1.0];
        assert!(CorrCholesky::from_correlation(3, &not_pd).is_err());
    }

    #[test]
    fn nect_sample_marginal_q_independence_shape() {
        // Smoke check: scale and tail direction behave as intended.
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let params = NectParams::new(
            vec![6.0, 200.0],
            vec![0.0, 0.0],
            vec![1.0, 1.0],
            CorrCholesky::identity(2),
        )
        .unwrap();
        let mut extreme = [0usize; 2];
        for _ in 0..20_000 {
            let (y, q) = nect_sample(&params, &mut rng);
            assert!(q.q.iter().all(|&v| v > 0.0));
            for d in 0..2 {
                if y[d].abs() > 5.0 {
                    extreme[d] += 1;
                }
            }
        }
        // Heavy-tailed margin produces far more 5-sigma events.
        assert!(extreme[0] > 10 * (extreme[1] + 1), "extreme = {extreme:?}");
    }
}
