//! Joint log posterior of the full hierarchical model and its gradient.
//!
//! The model, on the constrained scale:
//!
//! * latent per-visit thickness `ct_n` with a normal regularizing prior;
//! * per-row measurement law: the observed K-vector is correlated normal
//!   around `ct_n + phi` given explicit chi-square mixing latents, with
//!   per-dimension scale `tau_k / sqrt(q_nk)`, `q_nk = chisq_nk / nu_k`
//!   (the conditional form of the NECT error law);
//! * chi-square priors on every mixing latent, exponential-by-mean priors on
//!   the degrees of freedom, half-normal scales, normal offsets, and an LKJ
//!   prior on the correlation factor;
//! * outcome regression: score ~ normal(X beta + beta_ct * ct + a0_i +
//!   a1_i * years, sigma) with non-centered random effects
//!   `a_i = alpha + lambda * z_i`.
//!
//! The sampler works on the unconstrained vector; gradients are hand-derived
//! per block and pulled back through the transform. The contract is agreement
//! with central finite differences, which the test suite enforces.

use statrs::function::gamma::{digamma, ln_gamma};

use crate::dataio::{design_matrix, PipelinePanel, DESIGN_COLUMNS};
use crate::distributions::LN_2PI;
use crate::error::{Error, Result};
use crate::sampler::Target;
use crate::transforms::{Block, BlockSpan, ConstraintKind, TransformSpec};

/// Indices into the beta block: mci, ad, age, male, ct, mci_t, ad_t.
pub const B_MCI: usize = 0;
pub const B_AD: usize = 1;
pub const B_AGE: usize = 2;
pub const B_MALE: usize = 3;
pub const B_CT: usize = 4;
pub const B_MCI_T: usize = 5;
pub const B_AD_T: usize = 6;
pub const N_BETA: usize = 7;

pub const BETA_NAMES: [&str; N_BETA] =
    ["beta_mci", "beta_ad", "beta_age", "beta_male", "beta_ct", "beta_mci_t", "beta_ad_t"];

/// Prior hypervalues. Defaults follow the generative program: half-normal(1)
/// measurement scales, exponential(mean 30) degrees of freedom, LKJ(2)
/// correlation, normal(7, 2) latent thickness, normal(15, 15) intercept mean,
/// normal(0, 5) slope mean, half-normal(10) random-effect scales,
/// normal(0, 10) regression coefficients, half-normal(1) outcome error.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ModelConfig {
    pub phi_sd: f64,
    pub tau_sd: f64,
    pub nu_mean: f64,
    pub lkj_eta: f64,
    pub ct_mean: f64,
    pub ct_sd: f64,
    pub alpha0_mean: f64,
    pub alpha0_sd: f64,
    pub alpha1_mean: f64,
    pub alpha1_sd: f64,
    pub lambda_sd: f64,
    pub beta_sd: f64,
    pub sigma_sd: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            phi_sd: 3.0,
            tau_sd: 1.0,
            nu_mean: 30.0,
            lkj_eta: 2.0,
            ct_mean: 7.0,
            ct_sd: 2.0,
            alpha0_mean: 15.0,
            alpha0_sd: 15.0,
            alpha1_mean: 0.0,
            alpha1_sd: 5.0,
            lambda_sd: 10.0,
            beta_sd: 10.0,
            sigma_sd: 1.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("phi_sd", self.phi_sd),
            ("tau_sd", self.tau_sd),
            ("nu_mean", self.nu_mean),
            ("lkj_eta", self.lkj_eta),
            ("ct_sd", self.ct_sd),
            ("alpha0_sd", self.alpha0_sd),
            ("alpha1_sd", self.alpha1_sd),
            ("lambda_sd", self.lambda_sd),
            ("beta_sd", self.beta_sd),
            ("sigma_sd", self.sigma_sd),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

/// Explicit-parameter and latent-variable counts of the full model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamCount {
    pub explicit: usize,
    pub latent: usize,
}

/// Count model parameters for a panel of N rows, I subjects, K pipelines:
/// N latent thicknesses, 2I non-centered effects, the 2+2 random-effect
/// means/scales, 7 regression coefficients, the outcome scale, K each of
/// offset/scale/degrees-of-freedom, and K(K-1)/2 free correlation entries;
/// plus N*K chi-square mixing latents.
pub fn parameter_audit(n: usize, i: usize, k: usize) -> ParamCount {
    ParamCount {
        explicit: n + 2 * i + 2 + 2 + N_BETA + 1 + 3 * k + k * (k - 1) / 2,
        latent: n * k,
    }
}

/// Block spans of the full-model parameter vector.
#[derive(Debug, Clone)]
pub struct ParamLayout {
    pub n: usize,
    pub i: usize,
    pub k: usize,
    pub spec: TransformSpec,
    pub ct: BlockSpan,
    pub z0: BlockSpan,
    pub z1: BlockSpan,
    pub alpha0: BlockSpan,
    pub alpha1: BlockSpan,
    pub lambda0: BlockSpan,
    pub lambda1: BlockSpan,
    pub beta: BlockSpan,
    pub sigma: BlockSpan,
    pub phi: BlockSpan,
    pub tau: BlockSpan,
    pub nu: BlockSpan,
    pub l_r: BlockSpan,
    pub chisq: BlockSpan,
}

impl ParamLayout {
    pub fn new(n: usize, i: usize, k: usize) -> Self {
        let spec = TransformSpec::new(vec![
            Block::new("ct", ConstraintKind::PositiveVector, n),
            Block::new("z0", ConstraintKind::Identity, i),
            Block::new("z1", ConstraintKind::Identity, i),
            Block::new("alpha0", ConstraintKind::Identity, 1),
            Block::new("alpha1", ConstraintKind::Identity, 1),
            Block::new("lambda0", ConstraintKind::Positive, 1),
            Block::new("lambda1", ConstraintKind::Positive, 1),
            Block::new("beta", ConstraintKind::Identity, N_BETA),
            Block::new("sigma", ConstraintKind::Positive, 1),
            Block::new("phi", ConstraintKind::Identity, k),
            Block::new("tau", ConstraintKind::PositiveVector, k),
            Block::new("nu", ConstraintKind::PositiveVector, k),
            Block::new("L_R", ConstraintKind::CorrFactor, k),
            Block::new("chisq", ConstraintKind::PositiveVector, n * k),
        ])
        .expect("block names are unique");
        let span = |name: &str| spec.span(name).expect("known block");
        ParamLayout {
            n,
            i,
            k,
            ct: span("ct"),
            z0: span("z0"),
            z1: span("z1"),
            alpha0: span("alpha0"),
            alpha1: span("alpha1"),
            lambda0: span("lambda0"),
            lambda1: span("lambda1"),
            beta: span("beta"),
            sigma: span("sigma"),
            phi: span("phi"),
            tau: span("tau"),
            nu: span("nu"),
            l_r: span("L_R"),
            chisq: span("chisq"),
            spec,
        }
    }

    /// Names of the constrained quantities, in vector order.
    pub fn quantity_names(&self, pipeline_names: &[String]) -> Vec<String> {
        let mut names = Vec::with_capacity(self.spec.constrained_dim());
        names.extend((1..=self.n).map(|n| format!("ct[{n}]")));
        names.extend((1..=self.i).map(|i| format!("z0[{i}]")));
        names.extend((1..=self.i).map(|i| format!("z1[{i}]")));
        names.push("alpha0".into());
        names.push("alpha1".into());
        names.push("lambda0".into());
        names.push("lambda1".into());
        names.extend(BETA_NAMES.iter().map(|s| s.to_string()));
        names.push("sigma".into());
        for block in ["phi", "tau", "nu"] {
            names.extend(pipeline_names.iter().map(|p| format!("{block}[{p}]")));
        }
        for i in 1..=self.k {
            for j in 1..=i {
                names.push(format!("L_R[{i},{j}]"));
            }
        }
        for n in 1..=self.n {
            for k in 1..=self.k {
                names.push(format!("chisq[{n},{k}]"));
            }
        }
        names
    }

    /// Structured view over a flat constrained vector.
    pub fn view<'a>(&self, theta: &'a [f64]) -> ParamView<'a> {
        let s = |sp: BlockSpan| &theta[sp.c_offset..sp.c_offset + sp.c_len];
        ParamView {
            ct: s(self.ct),
            z0: s(self.z0),
            z1: s(self.z1),
            alpha0: theta[self.alpha0.c_offset],
            alpha1: theta[self.alpha1.c_offset],
            lambda0: theta[self.lambda0.c_offset],
            lambda1: theta[self.lambda1.c_offset],
            beta: s(self.beta),
            sigma: theta[self.sigma.c_offset],
            phi: s(self.phi),
            tau: s(self.tau),
            nu: s(self.nu),
            l_r: s(self.l_r),
            chisq: s(self.chisq),
        }
    }
}

/// Named view of every model parameter and latent inside one constrained
/// vector. `l_r` is the packed lower-triangular correlation factor; `chisq`
/// is N x K row-major.
#[derive(Debug, Clone, Copy)]
pub struct ParamView<'a> {
    pub ct: &'a [f64],
    pub z0: &'a [f64],
    pub z1: &'a [f64],
    pub alpha0: f64,
    pub alpha1: f64,
    pub lambda0: f64,
    pub lambda1: f64,
    pub beta: &'a [f64],
    pub sigma: f64,
    pub phi: &'a [f64],
    pub tau: &'a [f64],
    pub nu: &'a [f64],
    pub l_r: &'a [f64],
    pub chisq: &'a [f64],
}

/// The full-model posterior over a panel, ready for sampling: owns flattened
/// data, the transform layout, and scratch buffers.
#[derive(Debug, Clone)]
pub struct Posterior {
    n: usize,
    i: usize,
    k: usize,
    /// Observations, N x K row-major.
    y: Vec<f64>,
    /// Fixed-effects design, N x 6 row-major.
    x: Vec<f64>,
    outcome: Vec<f64>,
    years: Vec<f64>,
    subject: Vec<usize>,
    pipeline_names: Vec<String>,
    cfg: ModelConfig,
    layout: ParamLayout,
    scratch: Scratch,
}

#[derive(Debug, Clone, Default)]
struct Scratch {
    theta: Vec<f64>,
    g_theta: Vec<f64>,
    // Per-row K-length workspaces.
    s: Vec<f64>,
    t: Vec<f64>,
    w: Vec<f64>,
    v: Vec<f64>,
    // Per-subject outcome accumulators.
    s0: Vec<f64>,
    s1: Vec<f64>,
    // Per-pipeline constants of one evaluation.
    ln_nu: Vec<f64>,
    digamma_half_nu: Vec<f64>,
    lgamma_half_nu: Vec<f64>,
}

impl Posterior {
    pub fn new(panel: &PipelinePanel, cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let n = panel.n_rows();
        let i = panel.n_subjects();
        let k = panel.n_pipelines();
        let mut y = Vec::with_capacity(n * k);
        let mut outcome = Vec::with_capacity(n);
        let mut years = Vec::with_capacity(n);
        let mut subject = Vec::with_capacity(n);
        for (row_idx, row) in panel.rows().iter().enumerate() {
            y.extend_from_slice(&row.ect);
            outcome.push(row.mmse.expect("validated panel"));
            years.push(row.years);
            subject.push(panel.subject_of_row(row_idx));
        }
        let layout = ParamLayout::new(n, i, k);
        Ok(Posterior {
            n,
            i,
            k,
            y,
            x: design_matrix(panel),
            outcome,
            years,
            subject,
            pipeline_names: panel.pipeline_names().to_vec(),
            cfg,
            layout,
            scratch: Scratch::default(),
        })
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn unconstrained_dim(&self) -> usize {
        self.layout.spec.unconstrained_dim()
    }

    /// Log posterior (including the transform log-Jacobian) at an
    /// unconstrained point.
    pub fn log_posterior(&mut self, u: &[f64]) -> Result<f64> {
        if u.len() != self.unconstrained_dim() {
            return Err(Error::Dimension(format!(
                "expected dimension {}, got {}",
                self.unconstrained_dim(),
                u.len()
            )));
        }
        let mut grad = vec![0.0; u.len()];
        Ok(self.logp_grad(u, &mut grad))
    }

    /// Gradient of [`Posterior::log_posterior`] with respect to the
    /// unconstrained vector.
    pub fn grad_log_posterior(&mut self, u: &[f64]) -> Result<Vec<f64>> {
        if u.len() != self.unconstrained_dim() {
            return Err(Error::Dimension(format!(
                "expected dimension {}, got {}",
                self.unconstrained_dim(),
                u.len()
            )));
        }
        let mut grad = vec![0.0; u.len()];
        self.logp_grad(u, &mut grad);
        Ok(grad)
    }

    /// A data-informed point in unconstrained space: latent thicknesses at
    /// offset-corrected column means, everything else at prior-central
    /// values. Useful for finiteness checks and as a deterministic anchor.
    pub fn reference_point(&self) -> Vec<f64> {
        let mut u = vec![0.0; self.unconstrained_dim()];
        let l = &self.layout;
        for n in 0..self.n {
            let row_mean = (0..self.k).map(|k| self.y[n * self.k + k]).sum::<f64>() / self.k as f64;
            u[l.ct.u_offset + n] = row_mean.max(0.1).ln();
        }
        u[l.alpha0.u_offset] = self.cfg.alpha0_mean;
        u
    }

    /// Fused value + gradient on unconstrained space. Non-finite results are
    /// returned as-is for the sampler to treat as divergences.
    fn logp_grad(&mut self, u: &[f64], grad: &mut [f64]) -> f64 {
        let (n, i_count, k) = (self.n, self.i, self.k);
        let cfg = self.cfg.clone();
        let layout = &self.layout;
        let c_dim = layout.spec.constrained_dim();
        self.scratch.theta.resize(c_dim, 0.0);
        self.scratch.g_theta.resize(c_dim, 0.0);
        self.scratch.g_theta.fill(0.0);
        self.scratch.s.resize(k, 0.0);
        self.scratch.t.resize(k, 0.0);
        self.scratch.w.resize(k, 0.0);
        self.scratch.v.resize(k, 0.0);
        self.scratch.s0.resize(i_count, 0.0);
        self.scratch.s0.fill(0.0);
        self.scratch.s1.resize(i_count, 0.0);
        self.scratch.s1.fill(0.0);
        self.scratch.ln_nu.resize(k, 0.0);
        self.scratch.digamma_half_nu.resize(k, 0.0);
        self.scratch.lgamma_half_nu.resize(k, 0.0);

        let theta = &mut self.scratch.theta;
        let log_jac = match layout.spec.constrain(u, theta) {
            Ok(lj) => lj,
            Err(_) => return f64::NAN,
        };
        let g = &mut self.scratch.g_theta;

        let mut lp = 0.0f64;

        // ---- priors on the clinical block ----
        let ct = &theta[layout.ct.c_offset..layout.ct.c_offset + n];
        let g_ct_off = layout.ct.c_offset;
        let ct_var = cfg.ct_sd * cfg.ct_sd;
        for idx in 0..n {
            let d = ct[idx] - cfg.ct_mean;
            lp += -0.5 * d * d / ct_var - cfg.ct_sd.ln() - 0.5 * LN_2PI;
            g[g_ct_off + idx] -= d / ct_var;
        }
        for (span, mean, sd) in [
            (layout.alpha0, cfg.alpha0_mean, cfg.alpha0_sd),
            (layout.alpha1, cfg.alpha1_mean, cfg.alpha1_sd),
        ] {
            let v = theta[span.c_offset];
            let d = v - mean;
            lp += -0.5 * d * d / (sd * sd) - sd.ln() - 0.5 * LN_2PI;
            g[span.c_offset] -= d / (sd * sd);
        }
        for span in [layout.z0, layout.z1] {
            for idx in 0..i_count {
                let z = theta[span.c_offset + idx];
                lp += -0.5 * z * z - 0.5 * LN_2PI;
                g[span.c_offset + idx] -= z;
            }
        }
        let half_normal = |v: f64, sd: f64| -> (f64, f64) {
            let var = sd * sd;
            (
                std::f64::consts::LN_2 - 0.5 * v * v / var - sd.ln() - 0.5 * LN_2PI,
                -v / var,
            )
        };
        for span in [layout.lambda0, layout.lambda1] {
            let (l, dl) = half_normal(theta[span.c_offset], cfg.lambda_sd);
            lp += l;
            g[span.c_offset] += dl;
        }
        {
            let (l, dl) = half_normal(theta[layout.sigma.c_offset], cfg.sigma_sd);
            lp += l;
            g[layout.sigma.c_offset] += dl;
        }
        for idx in 0..N_BETA {
            let b = theta[layout.beta.c_offset + idx];
            let var = cfg.beta_sd * cfg.beta_sd;
            lp += -0.5 * b * b / var - cfg.beta_sd.ln() - 0.5 * LN_2PI;
            g[layout.beta.c_offset + idx] -= b / var;
        }

        // ---- priors on the measurement block ----
        for idx in 0..k {
            let phi = theta[layout.phi.c_offset + idx];
            let var = cfg.phi_sd * cfg.phi_sd;
            lp += -0.5 * phi * phi / var - cfg.phi_sd.ln() - 0.5 * LN_2PI;
            g[layout.phi.c_offset + idx] -= phi / var;

            let (l, dl) = half_normal(theta[layout.tau.c_offset + idx], cfg.tau_sd);
            lp += l;
            g[layout.tau.c_offset + idx] += dl;

            let nu = theta[layout.nu.c_offset + idx];
            lp += -cfg.nu_mean.ln() - nu / cfg.nu_mean;
            g[layout.nu.c_offset + idx] -= 1.0 / cfg.nu_mean;
        }
        // LKJ on the factor diagonal.
        {
            let lro = layout.l_r.c_offset;
            for row in 1..k {
                let exponent = (k - (row + 1)) as f64 + 2.0 * cfg.lkj_eta - 2.0;
                let diag_idx = lro + row * (row + 1) / 2 + row;
                let d = theta[diag_idx];
                lp += exponent * d.ln();
                g[diag_idx] += exponent / d;
            }
        }

        // ---- chi-square mixing latents ----
        // For each pipeline: sum over rows of
        //   (nu/2 - 1) ln c - c/2 - (nu/2) ln 2 - lgamma(nu/2),
        // where ln c is the unconstrained coordinate itself.
        for idx in 0..k {
            let nu = theta[layout.nu.c_offset + idx];
            self.scratch.ln_nu[idx] = nu.ln();
            self.scratch.digamma_half_nu[idx] = digamma(nu / 2.0);
            self.scratch.lgamma_half_nu[idx] = ln_gamma(nu / 2.0);
        }
        {
            let co = layout.chisq.c_offset;
            let uo = layout.chisq.u_offset;
            for idx in 0..k {
                let nu = theta[layout.nu.c_offset + idx];
                let half = nu / 2.0;
                let mut sum_ln_c = 0.0;
                for row in 0..n {
                    let cell = row * k + idx;
                    let c = theta[co + cell];
                    let ln_c = u[uo + cell];
                    sum_ln_c += ln_c;
                    lp += (half - 1.0) * ln_c - 0.5 * c;
                    g[co + cell] += (half - 1.0) / c - 0.5;
                }
                lp -= n as f64
                    * (half * std::f64::consts::LN_2 + self.scratch.lgamma_half_nu[idx]);
                g[layout.nu.c_offset + idx] += 0.5 * sum_ln_c
                    - 0.5
                        * n as f64
                        * (std::f64::consts::LN_2 + self.scratch.digamma_half_nu[idx]);
            }
        }

        // ---- measurement likelihood, conditional on the mixing latents ----
        {
            let lro = layout.l_r.c_offset;
            let l_packed_ln_diag: f64 =
                (0..k).map(|r| theta[lro + r * (r + 1) / 2 + r].ln()).sum();
            let mut sum_ln_tau = 0.0;
            for idx in 0..k {
                sum_ln_tau += theta[layout.tau.c_offset + idx].ln();
            }
            let sum_ln_nu: f64 = self.scratch.ln_nu.iter().sum();
            let co = layout.chisq.c_offset;
            let uo = layout.chisq.u_offset;

            for row in 0..n {
                let ct_n = theta[layout.ct.c_offset + row];
                let mut row_sum_ln_c = 0.0;
                for idx in 0..k {
                    let cell = row * k + idx;
                    let tau = theta[layout.tau.c_offset + idx];
                    let nu = theta[layout.nu.c_offset + idx];
                    let c = theta[co + cell];
                    row_sum_ln_c += u[uo + cell];
                    let s = tau * (nu / c).sqrt();
                    self.scratch.s[idx] = s;
                    let r = self.y[row * k + idx] - ct_n - theta[layout.phi.c_offset + idx];
                    self.scratch.t[idx] = r / s;
                }
                // Forward solve L w = t.
                for a in 0..k {
                    let row_l = &theta[lro + a * (a + 1) / 2..lro + a * (a + 1) / 2 + a + 1];
                    let mut acc = self.scratch.t[a];
                    for b in 0..a {
                        acc -= row_l[b] * self.scratch.w[b];
                    }
                    self.scratch.w[a] = acc / row_l[a];
                }
                let quad: f64 = self.scratch.w.iter().map(|v| v * v).sum();
                lp += -0.5 * k as f64 * LN_2PI
                    - (sum_ln_tau + 0.5 * sum_ln_nu - 0.5 * row_sum_ln_c)
                    - l_packed_ln_diag
                    - 0.5 * quad;

                // Back solve L^T v = w.
                for a in (0..k).rev() {
                    let mut acc = self.scratch.w[a];
                    for b in a + 1..k {
                        acc -= theta[lro + b * (b + 1) / 2 + a] * self.scratch.v[b];
                    }
                    self.scratch.v[a] = acc / theta[lro + a * (a + 1) / 2 + a];
                }

                let mut g_ct_acc = 0.0;
                for idx in 0..k {
                    let cell = row * k + idx;
                    let s = self.scratch.s[idx];
                    let vv = self.scratch.v[idx];
                    let tt = self.scratch.t[idx];
                    let residual_pull = vv / s;
                    g_ct_acc += residual_pull;
                    g[layout.phi.c_offset + idx] += residual_pull;
                    let g_s = (vv * tt - 1.0) / s;
                    let tau = theta[layout.tau.c_offset + idx];
                    let nu = theta[layout.nu.c_offset + idx];
                    let c = theta[co + cell];
                    g[layout.tau.c_offset + idx] += g_s * s / tau;
                    g[layout.nu.c_offset + idx] += g_s * s / (2.0 * nu);
                    g[co + cell] -= g_s * s / (2.0 * c);
                }
                g[g_ct_off + row] += g_ct_acc;

                // d logp / d L[a][b] = v_a * w_b (minus the diagonal term,
                // folded in once after the row loop).
                for a in 0..k {
                    let va = self.scratch.v[a];
                    let base = lro + a * (a + 1) / 2;
                    for b in 0..=a {
                        g[base + b] += va * self.scratch.w[b];
                    }
                }
            }
            for r in 0..k {
                let diag_idx = lro + r * (r + 1) / 2 + r;
                g[diag_idx] -= n as f64 / theta[diag_idx];
            }
        }

        // ---- outcome regression ----
        {
            let beta = layout.beta.c_offset;
            let sigma = theta[layout.sigma.c_offset];
            let inv_var = 1.0 / (sigma * sigma);
            let alpha0 = theta[layout.alpha0.c_offset];
            let alpha1 = theta[layout.alpha1.c_offset];
            let lambda0 = theta[layout.lambda0.c_offset];
            let lambda1 = theta[layout.lambda1.c_offset];
            let mut sum_sq = 0.0;
            for row in 0..n {
                let subj = self.subject[row];
                let x = &self.x[row * DESIGN_COLUMNS..(row + 1) * DESIGN_COLUMNS];
                let ct_n = theta[layout.ct.c_offset + row];
                let a0 = alpha0 + lambda0 * theta[layout.z0.c_offset + subj];
                let a1 = alpha1 + lambda1 * theta[layout.z1.c_offset + subj];
                let pred = x[0] * theta[beta + B_MCI]
                    + x[1] * theta[beta + B_AD]
                    + x[2] * theta[beta + B_AGE]
                    + x[3] * theta[beta + B_MALE]
                    + x[4] * theta[beta + B_MCI_T]
                    + x[5] * theta[beta + B_AD_T]
                    + theta[beta + B_CT] * ct_n
                    + a0
                    + a1 * self.years[row];
                let resid = self.outcome[row] - pred;
                sum_sq += resid * resid;
                let gp = resid * inv_var;
                g[beta + B_MCI] += gp * x[0];
                g[beta + B_AD] += gp * x[1];
                g[beta + B_AGE] += gp * x[2];
                g[beta + B_MALE] += gp * x[3];
                g[beta + B_MCI_T] += gp * x[4];
                g[beta + B_AD_T] += gp * x[5];
                g[beta + B_CT] += gp * ct_n;
                g[g_ct_off + row] += gp * theta[beta + B_CT];
                self.scratch.s0[subj] += gp;
                self.scratch.s1[subj] += gp * self.years[row];
            }
            lp += -0.5 * sum_sq * inv_var - n as f64 * (sigma.ln() + 0.5 * LN_2PI);
            g[layout.sigma.c_offset] += sum_sq / (sigma * sigma * sigma) - n as f64 / sigma;
            let mut g_alpha0 = 0.0;
            let mut g_alpha1 = 0.0;
            let mut g_lambda0 = 0.0;
            let mut g_lambda1 = 0.0;
            for subj in 0..i_count {
                let s0 = self.scratch.s0[subj];
                let s1 = self.scratch.s1[subj];
                g_alpha0 += s0;
                g_alpha1 += s1;
                g_lambda0 += s0 * theta[layout.z0.c_offset + subj];
                g_lambda1 += s1 * theta[layout.z1.c_offset + subj];
                g[layout.z0.c_offset + subj] += lambda0 * s0;
                g[layout.z1.c_offset + subj] += lambda1 * s1;
            }
            g[layout.alpha0.c_offset] += g_alpha0;
            g[layout.alpha1.c_offset] += g_alpha1;
            g[layout.lambda0.c_offset] += g_lambda0;
            g[layout.lambda1.c_offset] += g_lambda1;
        }

        layout.spec.pullback(u, theta, g, grad);
        lp + log_jac
    }
}

impl Target for Posterior {
    fn dim(&self) -> usize {
        self.unconstrained_dim()
    }

    fn log_density_grad(&mut self, u: &[f64], grad: &mut [f64]) -> f64 {
        assert_eq!(u.len(), self.unconstrained_dim());
        self.logp_grad(u, grad)
    }

    fn quantity_names(&self) -> Vec<String> {
        self.layout.quantity_names(&self.pipeline_names)
    }

    fn quantities(&mut self, u: &[f64], out: &mut Vec<f64>) {
        let c_dim = self.layout.spec.constrained_dim();
        let start = out.len();
        out.resize(start + c_dim, 0.0);
        self.layout
            .spec
            .constrain(u, &mut out[start..])
            .expect("dimension checked at construction");
    }
}

/// The clinical submodel alone, with one pipeline's observed measurements
/// plugged in as a fixed covariate (no measurement model). Same priors as
/// the clinical block of the full model.
#[derive(Debug, Clone)]
pub struct NaivePosterior {
    i: usize,
    x: Vec<f64>,
    outcome: Vec<f64>,
    years: Vec<f64>,
    subject: Vec<usize>,
    ct_obs: Vec<f64>,
    cfg: ModelConfig,
    spec: TransformSpec,
    z0: BlockSpan,
    z1: BlockSpan,
    alpha0: BlockSpan,
    alpha1: BlockSpan,
    lambda0: BlockSpan,
    lambda1: BlockSpan,
    beta: BlockSpan,
    sigma: BlockSpan,
    scratch_theta: Vec<f64>,
    scratch_g: Vec<f64>,
    s0: Vec<f64>,
    s1: Vec<f64>,
}

impl NaivePosterior {
    pub fn new(panel: &PipelinePanel, pipeline: usize, cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        if pipeline >= panel.n_pipelines() {
            return Err(Error::Dimension(format!(
                "pipeline index {pipeline} out of range (K = {})",
                panel.n_pipelines()
            )));
        }
        let i = panel.n_subjects();
        let spec = TransformSpec::new(vec![
            Block::new("z0", ConstraintKind::Identity, i),
            Block::new("z1", ConstraintKind::Identity, i),
            Block::new("alpha0", ConstraintKind::Identity, 1),
            Block::new("alpha1", ConstraintKind::Identity, 1),
            Block::new("lambda0", ConstraintKind::Positive, 1),
            Block::new("lambda1", ConstraintKind::Positive, 1),
            Block::new("beta", ConstraintKind::Identity, N_BETA),
            Block::new("sigma", ConstraintKind::Positive, 1),
        ])?;
        let span = |name: &str| spec.span(name).expect("known block");
        let mut outcome = Vec::new();
        let mut years = Vec::new();
        let mut subject = Vec::new();
        let mut ct_obs = Vec::new();
        for (row_idx, row) in panel.rows().iter().enumerate() {
            outcome.push(row.mmse.expect("validated panel"));
            years.push(row.years);
            subject.push(panel.subject_of_row(row_idx));
            ct_obs.push(row.ect[pipeline]);
        }
        Ok(NaivePosterior {
            i,
            x: design_matrix(panel),
            outcome,
            years,
            subject,
            ct_obs,
            cfg,
            z0: span("z0"),
            z1: span("z1"),
            alpha0: span("alpha0"),
            alpha1: span("alpha1"),
            lambda0: span("lambda0"),
            lambda1: span("lambda1"),
            beta: span("beta"),
            sigma: span("sigma"),
            spec,
            scratch_theta: Vec::new(),
            scratch_g: Vec::new(),
            s0: Vec::new(),
            s1: Vec::new(),
        })
    }

    fn logp_grad(&mut self, u: &[f64], grad: &mut [f64]) -> f64 {
        let cfg = self.cfg.clone();
        let c_dim = self.spec.constrained_dim();
        self.scratch_theta.resize(c_dim, 0.0);
        self.scratch_g.resize(c_dim, 0.0);
        self.scratch_g.fill(0.0);
        self.s0.resize(self.i, 0.0);
        self.s0.fill(0.0);
        self.s1.resize(self.i, 0.0);
        self.s1.fill(0.0);
        let theta = &mut self.scratch_theta;
        let log_jac = match self.spec.constrain(u, theta) {
            Ok(lj) => lj,
            Err(_) => return f64::NAN,
        };
        let g = &mut self.scratch_g;
        let mut lp = 0.0;

        for (span, mean, sd) in [
            (self.alpha0, cfg.alpha0_mean, cfg.alpha0_sd),
            (self.alpha1, cfg.alpha1_mean, cfg.alpha1_sd),
        ] {
            let d = theta[span.c_offset] - mean;
            lp += -0.5 * d * d / (sd * sd) - sd.ln() - 0.5 * LN_2PI;
            g[span.c_offset] -= d / (sd * sd);
        }
        for span in [self.z0, self.z1] {
            for idx in 0..self.i {
                let z = theta[span.c_offset + idx];
                lp += -0.5 * z * z - 0.5 * LN_2PI;
                g[span.c_offset + idx] -= z;
            }
        }
        for span in [self.lambda0, self.lambda1] {
            let v = theta[span.c_offset];
            lp += std::f64::consts::LN_2
                - 0.5 * v * v / (cfg.lambda_sd * cfg.lambda_sd)
                - cfg.lambda_sd.ln()
                - 0.5 * LN_2PI;
            g[span.c_offset] -= v / (cfg.lambda_sd * cfg.lambda_sd);
        }
        {
            let v = theta[self.sigma.c_offset];
            lp += std::f64::consts::LN_2
                - 0.5 * v * v / (cfg.sigma_sd * cfg.sigma_sd)
                - cfg.sigma_sd.ln()
                - 0.5 * LN_2PI;
            g[self.sigma.c_offset] -= v / (cfg.sigma_sd * cfg.sigma_sd);
        }
        for idx in 0..N_BETA {
            let b = theta[self.beta.c_offset + idx];
            let var = cfg.beta_sd * cfg.beta_sd;
            lp += -0.5 * b * b / var - cfg.beta_sd.ln() - 0.5 * LN_2PI;
            g[self.beta.c_offset + idx] -= b / var;
        }

        let beta = self.beta.c_offset;
        let sigma = theta[self.sigma.c_offset];
        let inv_var = 1.0 / (sigma * sigma);
        let alpha0 = theta[self.alpha0.c_offset];
        let alpha1 = theta[self.alpha1.c_offset];
        let lambda0 = theta[self.lambda0.c_offset];
        let lambda1 = theta[self.lambda1.c_offset];
        let n = self.outcome.len();
        let mut sum_sq = 0.0;
        for row in 0..n {
            let subj = self.subject[row];
            let x = &self.x[row * DESIGN_COLUMNS..(row + 1) * DESIGN_COLUMNS];
            let ct_n = self.ct_obs[row];
            let pred = x[0] * theta[beta + B_MCI]
                + x[1] * theta[beta + B_AD]
                + x[2] * theta[beta + B_AGE]
                + x[3] * theta[beta + B_MALE]
                + x[4] * theta[beta + B_MCI_T]
                + x[5] * theta[beta + B_AD_T]
                + theta[beta + B_CT] * ct_n
                + alpha0
                + lambda0 * theta[self.z0.c_offset + subj]
                + (alpha1 + lambda1 * theta[self.z1.c_offset + subj]) * self.years[row];
            let resid = self.outcome[row] - pred;
            sum_sq += resid * resid;
            let gp = resid * inv_var;
            g[beta + B_MCI] += gp * x[0];
            g[beta + B_AD] += gp * x[1];
            g[beta + B_AGE] += gp * x[2];
            g[beta + B_MALE] += gp * x[3];
            g[beta + B_MCI_T] += gp * x[4];
            g[beta + B_AD_T] += gp * x[5];
            g[beta + B_CT] += gp * ct_n;
            self.s0[subj] += gp;
            self.s1[subj] += gp * self.years[row];
        }
        lp += -0.5 * sum_sq * inv_var - n as f64 * (sigma.ln() + 0.5 * LN_2PI);
        g[self.sigma.c_offset] += sum_sq / (sigma * sigma * sigma) - n as f64 / sigma;
        for subj in 0..self.i {
            g[self.alpha0.c_offset] += self.s0[subj];
            g[self.alpha1.c_offset] += self.s1[subj];
            g[self.lambda0.c_offset] += self.s0[subj] * theta[self.z0.c_offset + subj];
            g[self.lambda1.c_offset] += self.s1[subj] * theta[self.z1.c_offset + subj];
            g[self.z0.c_offset + subj] += lambda0 * self.s0[subj];
            g[self.z1.c_offset + subj] += lambda1 * self.s1[subj];
        }

        self.spec.pullback(u, theta, g, grad);
        lp + log_jac
    }
}

impl Target for NaivePosterior {
    fn dim(&self) -> usize {
        self.spec.unconstrained_dim()
    }

    fn log_density_grad(&mut self, u: &[f64], grad: &mut [f64]) -> f64 {
        assert_eq!(u.len(), self.spec.unconstrained_dim());
        self.logp_grad(u, grad)
    }

    fn quantity_names(&self) -> Vec<String> {
        let mut names = Vec::with_capacity(self.spec.constrained_dim());
        names.extend((1..=self.i).map(|i| format!("z0[{i}]")));
        names.extend((1..=self.i).map(|i| format!("z1[{i}]")));
        names.push("alpha0".into());
        names.push("alpha1".into());
        names.push("lambda0".into());
        names.push("lambda1".into());
        names.extend(BETA_NAMES.iter().map(|s| s.to_string()));
        names.push("sigma".into());
        names
    }

    fn quantities(&mut self, u: &[f64], out: &mut Vec<f64>) {
        let c_dim = self.spec.constrained_dim();
        let start = out.len();
        out.resize(start + c_dim, 0.0);
        self.spec.constrain(u, &mut out[start..]).expect("dimension checked");
    }
}

/// Posterior draws for the clinical model with pipeline `pipeline`'s observed
/// measurements as a fixed covariate.
pub fn fit_naive_single_pipeline(
    panel: &PipelinePanel,
    pipeline: usize,
    cfg: ModelConfig,
    sampler_cfg: &crate::sampler::SamplerConfig,
) -> Result<crate::sampler::DrawsMatrix> {
    let target = NaivePosterior::new(panel, pipeline, cfg)?;
    crate::sampler::nuts_run(&target, sampler_cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{parse_panel, Schema};

    fn tiny_panel() -> PipelinePanel {
        let text = "subject_id,years,age,male,dx,mmse,p1,p2,p3\n\
                    s1,0,70,0,CN,29,7.0,8.1,6.5\n\
                    s1,1.5,70,0,CN,28,6.8,7.9,6.2\n\
                    s2,0,80,1,AD,24,6.1,7.2,5.9\n\
                    s2,1,80,1,AD,22,6.0,7.0,5.6\n\
                    s3,0,75,1,MCI,27,7.2,8.3,6.8\n\
                    s3,0.5,75,1,MCI,26,7.1,8.2,6.7\n\
                    s4,0,72,0,MCI,28,7.4,8.6,7.0\n\
                    s4,2,72,0,MCI,25,7.0,8.1,6.6\n";
        parse_panel(text, &Schema::default()).unwrap().0
    }

    #[test]
    fn audit_matches_reported_counts() {
        let c = parameter_audit(2449, 663, 7);
        assert_eq!(c.explicit, 3829);
        assert_eq!(c.latent, 17143);
        // The layout agrees with the audit.
        let layout = ParamLayout::new(2449, 663, 7);
        assert_eq!(layout.spec.unconstrained_dim(), c.explicit + c.latent);
    }

    #[test]
    fn finite_at_reference_point() {
        let panel = tiny_panel();
        let mut post = Posterior::new(&panel, ModelConfig::default()).unwrap();
        let u = post.reference_point();
        let lp = post.log_posterior(&u).unwrap();
        assert!(lp.is_finite(), "lp = {lp}");
        let g = post.grad_log_posterior(&u).unwrap();
        assert!(g.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let panel = tiny_panel();
        let mut post = Posterior::new(&panel, ModelConfig::default()).unwrap();
        assert!(post.log_posterior(&[0.0]).is_err());
    }

    #[test]
    fn quantity_names_are_unique_and_sized() {
        let panel = tiny_panel();
        let post = Posterior::new(&panel, ModelConfig::default()).unwrap();
        let names = Target::quantity_names(&post);
        assert_eq!(names.len(), post.layout().spec.constrained_dim());
        let set: std::collections::HashSet<&String> = names.iter().collect();
        assert_eq!(set.len(), names.len());
        assert!(names.contains(&"phi[p2]".to_string()));
        assert!(names.contains(&"L_R[3,1]".to_string()));
        assert!(names.contains(&"chisq[8,3]".to_string()));
    }

    #[test]
    fn gradient_of_z0_at_zero_is_zero_without_outcome_coupling() {
        // With lambda0 -> tiny, the outcome contribution to z0 vanishes and
        // the non-centered prior score -z0 remains; at z0 = 0 that is 0.
        let panel = tiny_panel();
        let mut post = Posterior::new(&panel, ModelConfig::default()).unwrap();
        let mut u = post.reference_point();
        let span = post.layout().z0;
        let lspan = post.layout().lambda0;
        u[lspan.u_offset] = -30.0; // lambda0 = e^-30
        let g = post.grad_log_posterior(&u).unwrap();
        for idx in 0..span.u_len {
            assert!(
                g[span.u_offset + idx].abs() < 1e-9,
                "z0[{idx}] grad {}",
                g[span.u_offset + idx]
            );
        }
    }
}
