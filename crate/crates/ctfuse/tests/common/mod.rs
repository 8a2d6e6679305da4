//! Shared oracle helpers for the integration suites. Everything here is
//! deliberately independent of the library's computation paths: plain
//! quadrature, dense linear algebra, and order-statistics code.

#![allow(dead_code)]

use ctfuse::dataio::{parse_panel, PipelinePanel, Schema};

/// Adaptive Simpson quadrature.
pub fn integrate<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, tol: f64) -> f64 {
    fn simpson<F: Fn(f64) -> f64>(f: &F, a: f64, fa: f64, b: f64, fb: f64) -> (f64, f64, f64) {
        let m = 0.5 * (a + b);
        let fm = f(m);
        ((b - a) / 6.0 * (fa + 4.0 * fm + fb), m, fm)
    }
    fn recurse<F: Fn(f64) -> f64>(
        f: &F,
        a: f64,
        fa: f64,
        b: f64,
        fb: f64,
        whole: f64,
        m: f64,
        fm: f64,
        tol: f64,
        depth: u32,
    ) -> f64 {
        let (left, lm, flm) = simpson(f, a, fa, m, fm);
        let (right, rm, frm) = simpson(f, m, fm, b, fb);
        let delta = left + right - whole;
        if depth == 0 || delta.abs() <= 15.0 * tol {
            return left + right + delta / 15.0;
        }
        recurse(f, a, fa, m, fm, left, lm, flm, tol / 2.0, depth - 1)
            + recurse(f, m, fm, b, fb, right, rm, frm, tol / 2.0, depth - 1)
    }
    let fa = f(a);
    let fb = f(b);
    let (whole, m, fm) = simpson(f, a, fa, b, fb);
    recurse(f, a, fa, b, fb, whole, m, fm, tol, 48)
}

/// Two-sided Kolmogorov-Smirnov statistic of sorted samples against a CDF.
pub fn ks_statistic<F: Fn(f64) -> f64>(sorted: &[f64], cdf: F) -> f64 {
    let n = sorted.len() as f64;
    let mut d = 0.0f64;
    for (i, &x) in sorted.iter().enumerate() {
        let f = cdf(x);
        d = d.max((f - i as f64 / n).abs());
        d = d.max(((i + 1) as f64 / n - f).abs());
    }
    d
}

/// Asymptotic KS critical value at the 1% level.
pub fn ks_critical_1pct(n: usize) -> f64 {
    1.6276 / (n as f64).sqrt()
}

/// Dense log density of N(mu, cov) by explicit inversion (Gauss-Jordan).
pub fn dense_mvn_logpdf(y: &[f64], mu: &[f64], cov: &[f64]) -> f64 {
    let k = y.len();
    // Augment [cov | I] and invert.
    let mut a = vec![0.0; k * 2 * k];
    for r in 0..k {
        for c in 0..k {
            a[r * 2 * k + c] = cov[r * k + c];
        }
        a[r * 2 * k + k + r] = 1.0;
    }
    let mut det = 1.0f64;
    for col in 0..k {
        let mut piv = col;
        for r in col + 1..k {
            if a[r * 2 * k + col].abs() > a[piv * 2 * k + col].abs() {
                piv = r;
            }
        }
        if piv != col {
            for c in 0..2 * k {
                a.swap(col * 2 * k + c, piv * 2 * k + c);
            }
            det = -det;
        }
        let d = a[col * 2 * k + col];
        det *= d;
        for c in 0..2 * k {
            a[col * 2 * k + c] /= d;
        }
        for r in 0..k {
            if r != col {
                let f = a[r * 2 * k + col];
                for c in 0..2 * k {
                    a[r * 2 * k + c] -= f * a[col * 2 * k + c];
                }
            }
        }
    }
    let mut quad = 0.0;
    for r in 0..k {
        for c in 0..k {
            quad += (y[r] - mu[r]) * a[r * 2 * k + k + c] * (y[c] - mu[c]);
        }
    }
    -0.5 * (k as f64) * (2.0 * std::f64::consts::PI).ln() - 0.5 * det.ln() - 0.5 * quad
}

/// Dense Cholesky (lower) of a symmetric positive definite matrix.
pub fn dense_cholesky(k: usize, m: &[f64]) -> Vec<f64> {
    let mut l = vec![0.0; k * k];
    for i in 0..k {
        for j in 0..=i {
            let mut sum = m[i * k + j];
            for t in 0..j {
                sum -= l[i * k + t] * l[j * k + t];
            }
            if i == j {
                assert!(sum > 0.0, "matrix not positive definite");
                l[i * k + j] = sum.sqrt();
            } else {
                l[i * k + j] = sum / l[j * k + j];
            }
        }
    }
    l
}

/// Sample mean.
pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample variance (ddof 1).
pub fn variance(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() as f64 - 1.0)
}

/// Pearson correlation.
pub fn correlation(xs: &[f64], ys: &[f64]) -> f64 {
    let mx = mean(xs);
    let my = mean(ys);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (&x, &y) in xs.iter().zip(ys.iter()) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    sxy / (sxx * syy).sqrt()
}

/// Sample excess kurtosis.
pub fn excess_kurtosis_sample(xs: &[f64]) -> f64 {
    let m = mean(xs);
    let n = xs.len() as f64;
    let m2 = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    let m4 = xs.iter().map(|x| (x - m).powi(4)).sum::<f64>() / n;
    m4 / (m2 * m2) - 3.0
}

/// A small deterministic panel: `visits` visits for each of `subjects`
/// subjects, `k` pipelines, mixed diagnoses and covariates, hand-written
/// values (no library RNG involved).
pub fn deterministic_panel(subjects: usize, visits: usize, k: usize) -> PipelinePanel {
    let mut text = String::from("subject_id,years,age,male,dx,mmse");
    for p in 1..=k {
        text.push_str(&format!(",p{p}"));
    }
    text.push('\n');
    let dxs = ["CN", "MCI", "AD"];
    for s in 0..subjects {
        let dx = dxs[s % 3];
        let age = 65.0 + (s % 20) as f64;
        let male = s % 2;
        for v in 0..visits {
            let years = v as f64 * 0.5;
            let mmse = 29.0 - (s % 5) as f64 - 0.8 * years - ((v * 7 + s) % 3) as f64 * 0.4;
            text.push_str(&format!("s{s:03},{years},{age},{male},{dx},{mmse}"));
            for p in 0..k {
                // Positive, smoothly varying pseudo-measurements.
                let base = 6.4 + ((s * 13 + p * 5) % 7) as f64 * 0.2;
                let wiggle = 0.3 * (((s + v * 3 + p * 11) % 9) as f64 / 4.0 - 1.0);
                text.push_str(&format!(",{}", base - 0.1 * years + wiggle));
            }
            text.push('\n');
        }
    }
    parse_panel(&text, &Schema::default()).unwrap().0
}
