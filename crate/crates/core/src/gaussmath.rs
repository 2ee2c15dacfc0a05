//! Closed-form analytics for diagonal Gaussians.
//!
//! Every density in the model is a diagonal Gaussian parameterized by a mean
//! and a log-variance vector. Log-variances are clamped to
//! [`LOG_VAR_MIN`, `LOG_VAR_MAX`] whenever a [`DiagGaussian`] is built.

use std::f64::consts::PI;

use crate::error::{check_dim, Error, Result};

pub const LOG_VAR_MIN: f64 = -10.0;
pub const LOG_VAR_MAX: f64 = 10.0;

/// `ln(2π)`.
pub const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Clamp a raw log-variance into the admissible range.
#[inline]
pub fn clamp_log_var(v: f64) -> f64 {
    v.clamp(LOG_VAR_MIN, LOG_VAR_MAX)
}

/// Derivative of [`clamp_log_var`]: identity strictly inside the range, zero outside.
#[inline]
pub fn clamp_log_var_grad(raw: f64) -> f64 {
    if (LOG_VAR_MIN..=LOG_VAR_MAX).contains(&raw) {
        1.0
    } else {
        0.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiagGaussian {
    mean: Vec<f64>,
    log_var: Vec<f64>,
}

impl DiagGaussian {
    pub fn new(mean: Vec<f64>, log_var: Vec<f64>) -> Result<Self> {
        if mean.is_empty() {
            return Err(Error::Contract("diagonal Gaussian needs dimension >= 1".into()));
        }
        check_dim("DiagGaussian::new", mean.len(), log_var.len())?;
        let log_var = log_var.into_iter().map(clamp_log_var).collect();
        Ok(Self { mean, log_var })
    }

    pub fn standard(dim: usize) -> Self {
        assert!(dim >= 1, "dimension must be positive");
        Self {
            mean: vec![0.0; dim],
            log_var: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn log_var(&self) -> &[f64] {
        &self.log_var
    }

    pub fn variances(&self) -> impl Iterator<Item = f64> + '_ {
        self.log_var.iter().map(|l| l.exp())
    }

    pub fn std_devs(&self) -> impl Iterator<Item = f64> + '_ {
        self.log_var.iter().map(|l| (0.5 * l).exp())
    }

    /// Differential entropy `½ Σ (1 + ln 2π + log_var)`.
    pub fn entropy(&self) -> f64 {
        0.5 * self.log_var.iter().map(|l| 1.0 + LN_2PI + l).sum::<f64>()
    }

    /// Mean log-variance, a scalar summary of the spread.
    pub fn mean_log_var(&self) -> f64 {
        self.log_var.iter().sum::<f64>() / self.dim() as f64
    }

    pub fn is_finite(&self) -> bool {
        self.mean.iter().chain(&self.log_var).all(|v| v.is_finite())
    }
}

/// A realization of the continuous latent variable.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentPoint(pub Vec<f64>);

impl LatentPoint {
    pub fn coords(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

/// Analytic `KL(q || p)` for diagonal Gaussians.
pub fn kl_diag(q: &DiagGaussian, p: &DiagGaussian) -> Result<f64> {
    check_dim("kl_diag", q.dim(), p.dim())?;
    Ok(kl_unchecked(q, p))
}

pub(crate) fn kl_unchecked(q: &DiagGaussian, p: &DiagGaussian) -> f64 {
    let mut acc = 0.0;
    for d in 0..q.dim() {
        let dl = q.log_var[d] - p.log_var[d];
        let diff = q.mean[d] - p.mean[d];
        // expm1(x) - x >= 0 keeps the variance part non-negative in floating point.
        acc += dl.exp_m1() - dl + diff * diff * (-p.log_var[d]).exp();
    }
    0.5 * acc
}

/// Cross entropy `H(q, p) = -∫ q ln p`, equal to `KL(q || p) + entropy(q)`.
pub fn cross_entropy(q: &DiagGaussian, p: &DiagGaussian) -> Result<f64> {
    check_dim("cross_entropy", q.dim(), p.dim())?;
    Ok(kl_unchecked(q, p) + q.entropy())
}

/// Partial derivatives of `KL(q || p)` with respect to both parameter sets.
#[derive(Debug, Clone, PartialEq)]
pub struct KlGrad {
    pub q_mean: Vec<f64>,
    pub q_log_var: Vec<f64>,
    pub p_mean: Vec<f64>,
    pub p_log_var: Vec<f64>,
}

pub fn kl_diag_grad(q: &DiagGaussian, p: &DiagGaussian) -> Result<KlGrad> {
    check_dim("kl_diag_grad", q.dim(), p.dim())?;
    let dim = q.dim();
    let mut g = KlGrad {
        q_mean: vec![0.0; dim],
        q_log_var: vec![0.0; dim],
        p_mean: vec![0.0; dim],
        p_log_var: vec![0.0; dim],
    };
    for d in 0..dim {
        let inv_p = (-p.log_var[d]).exp();
        let diff = q.mean[d] - p.mean[d];
        let ratio = (q.log_var[d] - p.log_var[d]).exp();
        g.q_mean[d] = diff * inv_p;
        g.p_mean[d] = -diff * inv_p;
        g.q_log_var[d] = 0.5 * (ratio - 1.0);
        g.p_log_var[d] = 0.5 * (1.0 - ratio - diff * diff * inv_p);
    }
    Ok(g)
}

/// `ln N(point; mean, I)` including the normalization constant.
pub fn log_pdf_identity_cov(mean: &[f64], point: &[f64]) -> Result<f64> {
    check_dim("log_pdf_identity_cov", mean.len(), point.len())?;
    let sq: f64 = mean.iter().zip(point).map(|(m, x)| (x - m) * (x - m)).sum();
    Ok(-0.5 * sq - 0.5 * LN_2PI * mean.len() as f64)
}

/// Reparameterized draw `mean + exp(log_var / 2) ⊙ noise` for caller-supplied
/// standard-normal `noise`.
pub fn sample_reparam(g: &DiagGaussian, noise: &[f64]) -> Result<LatentPoint> {
    check_dim("sample_reparam", g.dim(), noise.len())?;
    Ok(LatentPoint(
        g.mean
            .iter()
            .zip(g.std_devs())
            .zip(noise)
            .map(|((m, s), e)| m + s * e)
            .collect(),
    ))
}

/// The `2D + 1` sigma points: the mean first, then `mean + σ_d e_d` and
/// `mean - σ_d e_d` for each dimension in ascending order.
pub fn sigma_points(g: &DiagGaussian) -> Vec<LatentPoint> {
    let mut out = Vec::with_capacity(2 * g.dim() + 1);
    out.push(LatentPoint(g.mean.clone()));
    for (d, sigma) in g.std_devs().enumerate() {
        for sign in [1.0, -1.0] {
            let mut p = g.mean.clone();
            p[d] += sign * sigma;
            out.push(LatentPoint(p));
        }
    }
    out
}

/// Density of a univariate normal, used by quadrature-based diagnostics.
pub fn normal_pdf(x: f64, mean: f64, var: f64) -> f64 {
    (-(x - mean) * (x - mean) / (2.0 * var)).exp() / (2.0 * PI * var).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn g1(mean: f64, var: f64) -> DiagGaussian {
        DiagGaussian::new(vec![mean], vec![var.ln()]).unwrap()
    }

    /// Trapezoid rule over a uniform grid.
    fn trapezoid(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
        let h = (b - a) / n as f64;
        let mut acc = 0.5 * (f(a) + f(b));
        for i in 1..n {
            acc += f(a + i as f64 * h);
        }
        acc * h
    }

    fn quad_kl(qm: f64, qv: f64, pm: f64, pv: f64, a: f64, b: f64) -> f64 {
        trapezoid(
            |x| {
                let q = normal_pdf(x, qm, qv);
                if q == 0.0 {
                    0.0
                } else {
                    q * (q.ln() - normal_pdf(x, pm, pv).ln())
                }
            },
            a,
            b,
            200_000,
        )
    }

    #[test]
    fn kl_of_identical_is_zero() {
        let g = DiagGaussian::standard(3);
        assert_eq!(kl_diag(&g, &g).unwrap(), 0.0);
    }

    #[test]
    fn kl_matches_quadrature_shifted_mean() {
        let analytic = kl_diag(&g1(1.0, 1.0), &g1(0.0, 1.0)).unwrap();
        let oracle = quad_kl(1.0, 1.0, 0.0, 1.0, -12.0, 13.0);
        assert!((analytic - oracle).abs() < 1e-8, "{analytic} vs {oracle}");
        assert!((analytic - 0.5).abs() < 1e-15);
    }

    #[test]
    fn kl_matches_quadrature_wider_variance() {
        let analytic = kl_diag(&g1(0.0, 4.0), &g1(0.0, 1.0)).unwrap();
        let oracle = quad_kl(0.0, 4.0, 0.0, 1.0, -24.0, 24.0);
        assert!((analytic - oracle).abs() < 1e-8, "{analytic} vs {oracle}");
    }

    #[test]
    fn cross_entropy_of_self_is_entropy() {
        let g = g1(0.0, 1.0);
        let h = cross_entropy(&g, &g).unwrap();
        assert!((h - 0.5 * (2.0 * PI * std::f64::consts::E).ln()).abs() < 1e-14);
    }

    #[test]
    fn cross_entropy_matches_quadrature() {
        let analytic = cross_entropy(&g1(0.0, 1.0), &g1(3.0, 2.0)).unwrap();
        let oracle = trapezoid(
            |x| -normal_pdf(x, 0.0, 1.0) * normal_pdf(x, 3.0, 2.0).ln(),
            -12.0,
            12.0,
            200_000,
        );
        assert!((analytic - oracle).abs() < 1e-8);
    }

    #[test]
    fn cross_entropy_is_kl_plus_entropy() {
        let q = DiagGaussian::new(vec![0.3, -1.2], vec![0.4, -0.7]).unwrap();
        let p = DiagGaussian::new(vec![1.1, 0.5], vec![-0.2, 1.3]).unwrap();
        let lhs = cross_entropy(&q, &p).unwrap();
        let rhs = kl_diag(&q, &p).unwrap() + q.entropy();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let a = DiagGaussian::standard(2);
        let b = DiagGaussian::standard(3);
        assert!(matches!(kl_diag(&a, &b), Err(Error::DimensionMismatch { .. })));
        assert!(cross_entropy(&a, &b).is_err());
        assert!(log_pdf_identity_cov(&[0.0], &[0.0, 1.0]).is_err());
        assert!(sample_reparam(&a, &[0.0]).is_err());
        assert!(DiagGaussian::new(vec![0.0], vec![0.0, 0.0]).is_err());
        assert!(DiagGaussian::new(vec![], vec![]).is_err());
    }

    #[test]
    fn log_var_is_clamped() {
        let g = DiagGaussian::new(vec![0.0, 0.0], vec![-40.0, 25.0]).unwrap();
        assert_eq!(g.log_var(), &[LOG_VAR_MIN, LOG_VAR_MAX]);
    }

    #[test]
    fn log_pdf_examples() {
        let v = log_pdf_identity_cov(&[1.0, 2.0], &[1.0, 2.0]).unwrap();
        assert!((v + (2.0 * PI).ln()).abs() < 1e-14);
        let v = log_pdf_identity_cov(&[0.0], &[1.0]).unwrap();
        assert!((v - (-0.5 * (2.0 * PI).ln() - 0.5)).abs() < 1e-14);
    }

    #[test]
    fn log_pdf_matches_per_coordinate_sum() {
        let mean = [0.3, -1.7, 2.2, 0.0];
        let point = [1.1, 0.4, -0.6, 3.0];
        let oracle: f64 = mean.iter().zip(&point).map(|(m, x)| normal_pdf(*x, *m, 1.0).ln()).sum();
        let v = log_pdf_identity_cov(&mean, &point).unwrap();
        assert!((v - oracle).abs() < 1e-12);
    }

    #[test]
    fn reparam_examples() {
        let g = DiagGaussian::new(vec![0.5, -2.0], vec![0.3, 1.0]).unwrap();
        assert_eq!(sample_reparam(&g, &[0.0, 0.0]).unwrap().0, g.mean());
        let s = DiagGaussian::standard(3);
        assert_eq!(sample_reparam(&s, &[1.0, 0.0, 0.0]).unwrap().0, vec![1.0, 0.0, 0.0]);
        let g = DiagGaussian::new(vec![2.0], vec![4f64.ln()]).unwrap();
        let z = sample_reparam(&g, &[1.0]).unwrap();
        assert!((z.0[0] - 4.0).abs() < 1e-14);
    }

    #[test]
    fn sigma_point_examples() {
        let pts = sigma_points(&DiagGaussian::standard(2));
        let expect = [[0.0, 0.0], [1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]];
        assert_eq!(pts.len(), 5);
        for (p, e) in pts.iter().zip(expect) {
            assert_eq!(p.0, e);
        }
        let pts = sigma_points(&DiagGaussian::new(vec![3.0], vec![9f64.ln()]).unwrap());
        let flat: Vec<f64> = pts.iter().map(|p| p.0[0]).collect();
        assert!((flat[0] - 3.0).abs() < 1e-14);
        assert!((flat[1] - 6.0).abs() < 1e-12);
        assert!(flat[2].abs() < 1e-12);
        let g = DiagGaussian::new(vec![0.1; 5], vec![0.2; 5]).unwrap();
        let pts = sigma_points(&g);
        assert_eq!(pts.len(), 11);
        assert_eq!(pts[0].0, g.mean());
    }

    #[test]
    fn kl_gradient_matches_finite_differences() {
        let q = DiagGaussian::new(vec![0.3, -1.2], vec![0.4, -0.7]).unwrap();
        let p = DiagGaussian::new(vec![1.1, 0.5], vec![-0.2, 1.3]).unwrap();
        let g = kl_diag_grad(&q, &p).unwrap();
        let h = 1e-6;
        let kl = |qm: &[f64], ql: &[f64], pm: &[f64], pl: &[f64]| {
            kl_diag(
                &DiagGaussian::new(qm.to_vec(), ql.to_vec()).unwrap(),
                &DiagGaussian::new(pm.to_vec(), pl.to_vec()).unwrap(),
            )
            .unwrap()
        };
        for d in 0..2 {
            let mut params = [
                q.mean().to_vec(),
                q.log_var().to_vec(),
                p.mean().to_vec(),
                p.log_var().to_vec(),
            ];
            let analytic = [g.q_mean[d], g.q_log_var[d], g.p_mean[d], g.p_log_var[d]];
            for (which, a) in analytic.iter().enumerate() {
                params[which][d] += h;
                let up = kl(&params[0], &params[1], &params[2], &params[3]);
                params[which][d] -= 2.0 * h;
                let dn = kl(&params[0], &params[1], &params[2], &params[3]);
                params[which][d] += h;
                let fd = (up - dn) / (2.0 * h);
                assert!((fd - a).abs() < 1e-7, "block {which} dim {d}: {fd} vs {a}");
            }
        }
    }
}
