//! Synthetic-data oracle: run the generative model forward from fully
//! specified ground-truth parameters, producing a panel plus the latent
//! truths, so parameter recovery can be tested end to end.
//!
//! Default true values come from the reported posterior means of the seven
//! reference pipelines. Latent thickness trajectories are linear per subject
//! (baseline plus slope), a free choice of the oracle; measurement errors are
//! NECT draws. Rows are redrawn in the rare case an observed thickness comes
//! out non-positive, since panels require strictly positive measurements.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataio::{Dx, PipelinePanel, VisitRow};
use crate::distributions::{nect_sample, CorrCholesky, NectParams};
use crate::error::{Error, Result};
use crate::kv::KvFile;

pub const TABLE1_PIPELINES: [&str; 7] = [
    "FSCross",
    "FSLong",
    "ANTsCross",
    "ANTsNative",
    "ANTsSST",
    "ANTsXNetCross",
    "ANTsXNetLong",
];
pub const TABLE1_PHI: [f64; 7] = [-1.02, -1.00, 0.92, 0.21, 0.23, -0.51, 0.24];
pub const TABLE1_TAU: [f64; 7] = [0.21, 0.24, 1.06, 1.23, 1.27, 0.97, 0.79];
pub const TABLE1_NU: [f64; 7] = [17.43, 6.06, 15.66, 105.02, 54.78, 35.95, 13.01];
pub const TABLE1_ALPHA0: f64 = 22.29;
pub const TABLE1_ALPHA1: f64 = 0.01;
pub const TABLE1_LAMBDA0: f64 = 1.61;
pub const TABLE1_LAMBDA1: f64 = 1.53;
pub const TABLE1_BETA_MCI: f64 = -1.72;
pub const TABLE1_BETA_AD: f64 = -4.86;
pub const TABLE1_BETA_AGE: f64 = 0.01;
pub const TABLE1_BETA_MALE: f64 = 0.00;
pub const TABLE1_BETA_CT: f64 = 0.75;
pub const TABLE1_BETA_MCI_T: f64 = -0.81;
pub const TABLE1_BETA_AD_T: f64 = -2.35;
pub const TABLE1_SIGMA: f64 = 1.48;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum VisitPlan {
    /// Same number of visits for every subject.
    Fixed(usize),
    /// Explicit per-subject visit counts.
    PerSubject(Vec<usize>),
}

impl VisitPlan {
    fn count(&self, subject: usize) -> usize {
        match self {
            VisitPlan::Fixed(n) => *n,
            VisitPlan::PerSubject(v) => v[subject],
        }
    }
}

/// Ground-truth parameter set driving the generator.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TruthConfig {
    pub subjects: usize,
    pub visits: VisitPlan,
    /// Years between consecutive visits.
    pub visit_spacing: f64,
    pub pipeline_names: Vec<String>,
    pub phi: Vec<f64>,
    pub tau: Vec<f64>,
    pub nu: Vec<f64>,
    pub corr: CorrCholesky,
    pub alpha0: f64,
    pub alpha1: f64,
    pub lambda0: f64,
    pub lambda1: f64,
    pub beta_mci: f64,
    pub beta_ad: f64,
    pub beta_age: f64,
    pub beta_male: f64,
    pub beta_ct: f64,
    pub beta_mci_t: f64,
    pub beta_ad_t: f64,
    pub sigma: f64,
    /// Per-subject latent thickness: baseline draw at the first visit.
    pub ct_baseline_mean: f64,
    pub ct_baseline_sd: f64,
    /// Per-subject latent thinning rate, mm per year.
    pub ct_slope_mean: f64,
    pub ct_slope_sd: f64,
    /// CN/MCI/AD marginals.
    pub dx_probs: [f64; 3],
    pub p_male: f64,
    pub age_range: (f64, f64),
    /// Round and clamp the outcome to the integer test range.
    pub round_mmse: bool,
}

/// Compound-symmetric correlation factor, `rho` off the diagonal.
pub fn compound_correlation(k: usize, rho: f64) -> Result<CorrCholesky> {
    let mut r = vec![rho; k * k];
    for i in 0..k {
        r[i * k + i] = 1.0;
    }
    CorrCholesky::from_correlation(k, &r)
}

impl TruthConfig {
    /// Reported posterior means of the seven reference pipelines as ground
    /// truth; moderately correlated errors.
    pub fn table1(subjects: usize, visits: usize) -> Self {
        TruthConfig {
            subjects,
            visits: VisitPlan::Fixed(visits),
            visit_spacing: 0.5,
            pipeline_names: TABLE1_PIPELINES.iter().map(|s| s.to_string()).collect(),
            phi: TABLE1_PHI.to_vec(),
            tau: TABLE1_TAU.to_vec(),
            nu: TABLE1_NU.to_vec(),
            corr: compound_correlation(7, 0.3).expect("valid compound correlation"),
            alpha0: TABLE1_ALPHA0,
            alpha1: TABLE1_ALPHA1,
            lambda0: TABLE1_LAMBDA0,
            lambda1: TABLE1_LAMBDA1,
            beta_mci: TABLE1_BETA_MCI,
            beta_ad: TABLE1_BETA_AD,
            beta_age: TABLE1_BETA_AGE,
            beta_male: TABLE1_BETA_MALE,
            beta_ct: TABLE1_BETA_CT,
            beta_mci_t: TABLE1_BETA_MCI_T,
            beta_ad_t: TABLE1_BETA_AD_T,
            sigma: TABLE1_SIGMA,
            ct_baseline_mean: 7.0,
            ct_baseline_sd: 0.8,
            ct_slope_mean: -0.1,
            ct_slope_sd: 0.05,
            dx_probs: [0.297, 0.489, 0.214],
            p_male: 0.5,
            age_range: (60.0, 90.0),
            round_mmse: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.pipeline_names.len();
        if k < 2 {
            return Err(Error::Config("need at least 2 pipelines".into()));
        }
        if self.subjects == 0 {
            return Err(Error::Config("need at least 1 subject".into()));
        }
        if let VisitPlan::PerSubject(v) = &self.visits {
            if v.len() != self.subjects {
                return Err(Error::Config(format!(
                    "per-subject visit counts ({}) must match subjects ({})",
                    v.len(),
                    self.subjects
                )));
            }
            if v.iter().any(|&n| n == 0) {
                return Err(Error::Config("every subject needs at least 1 visit".into()));
            }
        }
        if self.phi.len() != k || self.tau.len() != k || self.nu.len() != k {
            return Err(Error::Dimension(format!("phi/tau/nu must have length {k}")));
        }
        if self.corr.dim() != k {
            return Err(Error::Dimension(format!("correlation factor must have order {k}")));
        }
        for (name, v) in [("tau", &self.tau), ("nu", &self.nu)] {
            if v.iter().any(|&x| !(x > 0.0) || !x.is_finite()) {
                return Err(Error::Config(format!("{name} entries must be positive")));
            }
        }
        for (name, v) in [
            ("lambda0", self.lambda0),
            ("lambda1", self.lambda1),
            ("ct_baseline_sd", self.ct_baseline_sd),
            ("ct_slope_sd", self.ct_slope_sd),
            ("visit_spacing", self.visit_spacing),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.sigma < 0.0 || !self.sigma.is_finite() {
            return Err(Error::Config("sigma must be non-negative".into()));
        }
        let psum: f64 = self.dx_probs.iter().sum();
        if self.dx_probs.iter().any(|&p| p < 0.0) || (psum - 1.0).abs() > 1e-6 {
            return Err(Error::Config(
                "dx probabilities must be non-negative and sum to 1".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.p_male) {
            return Err(Error::Config("p_male must be in [0, 1]".into()));
        }
        if !(self.age_range.0 > 0.0 && self.age_range.1 > self.age_range.0) {
            return Err(Error::Config("age_range must be an increasing positive interval".into()));
        }
        Ok(())
    }

    /// Parse a key=value truth configuration; unset keys keep the reference
    /// defaults. The correlation comes either from `rho` (compound symmetry)
    /// or from `R` (full row-major matrix).
    pub fn parse(text: &str) -> Result<TruthConfig> {
        let mut kv = KvFile::parse(text)?;
        let subjects = kv.take_usize("subjects")?.unwrap_or(60);
        let visits = kv.take_usize("visits")?.unwrap_or(4);
        let mut cfg = TruthConfig::table1(subjects, visits);
        if let Some(names) = kv.take_vec_str("pipelines") {
            let k = names.len();
            cfg.pipeline_names = names;
            // A changed pipeline set resizes the error model; start neutral
            // and let explicit keys fill in the rest.
            cfg.phi = vec![0.0; k];
            cfg.tau = vec![1.0; k];
            cfg.nu = vec![30.0; k];
            cfg.corr = compound_correlation(k, 0.3)?;
        }
        let k = cfg.pipeline_names.len();
        if let Some(v) = kv.take_vec_f64("phi")? {
            cfg.phi = v;
        }
        if let Some(v) = kv.take_vec_f64("tau")? {
            cfg.tau = v;
        }
        if let Some(v) = kv.take_vec_f64("nu")? {
            cfg.nu = v;
        }
        match (kv.take_f64("rho")?, kv.take_vec_f64("R")?) {
            (Some(_), Some(_)) => {
                return Err(Error::Config("give either rho or R, not both".into()))
            }
            (Some(rho), None) => cfg.corr = compound_correlation(k, rho)?,
            (None, Some(r)) => cfg.corr = CorrCholesky::from_correlation(k, &r)?,
            (None, None) => {}
        }
        for (key, slot) in [
            ("alpha0", &mut cfg.alpha0),
            ("alpha1", &mut cfg.alpha1),
            ("lambda0", &mut cfg.lambda0),
            ("lambda1", &mut cfg.lambda1),
            ("beta_mci", &mut cfg.beta_mci),
            ("beta_ad", &mut cfg.beta_ad),
            ("beta_age", &mut cfg.beta_age),
            ("beta_male", &mut cfg.beta_male),
            ("beta_ct", &mut cfg.beta_ct),
            ("beta_mci_t", &mut cfg.beta_mci_t),
            ("beta_ad_t", &mut cfg.beta_ad_t),
            ("sigma", &mut cfg.sigma),
            ("visit_spacing", &mut cfg.visit_spacing),
            ("ct_baseline_mean", &mut cfg.ct_baseline_mean),
            ("ct_baseline_sd", &mut cfg.ct_baseline_sd),
            ("ct_slope_mean", &mut cfg.ct_slope_mean),
            ("ct_slope_sd", &mut cfg.ct_slope_sd),
            ("p_male", &mut cfg.p_male),
        ] {
            if let Some(v) = kv.take_f64(key)? {
                *slot = v;
            }
        }
        if let Some(p_cn) = kv.take_f64("p_cn")? {
            cfg.dx_probs[0] = p_cn;
        }
        if let Some(p_mci) = kv.take_f64("p_mci")? {
            cfg.dx_probs[1] = p_mci;
        }
        if let Some(p_ad) = kv.take_f64("p_ad")? {
            cfg.dx_probs[2] = p_ad;
        }
        if let Some(lo) = kv.take_f64("age_min")? {
            cfg.age_range.0 = lo;
        }
        if let Some(hi) = kv.take_f64("age_max")? {
            cfg.age_range.1 = hi;
        }
        if let Some(b) = kv.take_bool("round_mmse")? {
            cfg.round_mmse = b;
        }
        kv.finish()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<TruthConfig> {
        TruthConfig::parse(&std::fs::read_to_string(path)?)
    }
}

/// Latent truths recorded alongside a generated panel, aligned with the
/// panel's (sorted) row and subject order.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    /// True latent thickness per panel row.
    pub ct: Vec<f64>,
    /// Per-subject random intercepts/slopes on the natural scale.
    pub a0: Vec<f64>,
    pub a1: Vec<f64>,
    pub z0: Vec<f64>,
    pub z1: Vec<f64>,
}

impl GroundTruth {
    /// Truth file: one row per visit with the latent values.
    pub fn to_csv(&self, panel: &PipelinePanel) -> String {
        use std::fmt::Write as _;
        let mut out = String::from("subject_id,years,ct_true,a0,a1\n");
        for (row_idx, row) in panel.rows().iter().enumerate() {
            let s = panel.subject_of_row(row_idx);
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                row.subject_id, row.years, self.ct[row_idx], self.a0[s], self.a1[s]
            );
        }
        out
    }
}

/// Simulate a panel. Subject ids are zero-padded so lexicographic panel
/// sorting preserves generation order, keeping the ground-truth record
/// aligned.
pub fn generate(truth: &TruthConfig, seed: u64) -> Result<(PipelinePanel, GroundTruth)> {
    truth.validate()?;
    let k = truth.pipeline_names.len();
    let error_law = NectParams::new(
        truth.nu.clone(),
        vec![0.0; k],
        truth.tau.clone(),
        truth.corr.clone(),
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let id_width = (truth.subjects as f64).log10().floor() as usize + 1;

    let mut rows = Vec::new();
    let mut gt = GroundTruth {
        ct: Vec::new(),
        a0: Vec::with_capacity(truth.subjects),
        a1: Vec::with_capacity(truth.subjects),
        z0: Vec::with_capacity(truth.subjects),
        z1: Vec::with_capacity(truth.subjects),
    };

    for subject in 0..truth.subjects {
        let subject_id = format!("S{:0width$}", subject + 1, width = id_width.max(4));
        let age = rng.random_range(truth.age_range.0..truth.age_range.1);
        let male = rng.random::<f64>() < truth.p_male;
        let dx = {
            let x: f64 = rng.random();
            if x < truth.dx_probs[0] {
                Dx::Cn
            } else if x < truth.dx_probs[0] + truth.dx_probs[1] {
                Dx::Mci
            } else {
                Dx::Ad
            }
        };
        let z0: f64 = rng.sample(StandardNormal);
        let z1: f64 = rng.sample(StandardNormal);
        let a0 = truth.alpha0 + truth.lambda0 * z0;
        let a1 = truth.alpha1 + truth.lambda1 * z1;
        gt.z0.push(z0);
        gt.z1.push(z1);
        gt.a0.push(a0);
        gt.a1.push(a1);

        let n_visits = truth.visits.count(subject);
        let horizon = (n_visits - 1) as f64 * truth.visit_spacing;
        // Redraw degenerate trajectories that would leave the positive range.
        let (baseline, slope) = loop {
            let b = truth.ct_baseline_mean
                + truth.ct_baseline_sd * rng.sample::<f64, _>(StandardNormal);
            let s =
                truth.ct_slope_mean + truth.ct_slope_sd * rng.sample::<f64, _>(StandardNormal);
            if b > 0.1 && b + s * horizon > 0.1 {
                break (b, s);
            }
        };

        let mci = f64::from(dx == Dx::Mci);
        let ad = f64::from(dx == Dx::Ad);
        for visit in 0..n_visits {
            let years = visit as f64 * truth.visit_spacing;
            let ct = baseline + slope * years;
            let mut ect = vec![0.0; k];
            let mut attempts = 0usize;
            loop {
                let (err, _) = nect_sample(&error_law, &mut rng);
                let mut ok = true;
                for idx in 0..k {
                    let obs = ct + truth.phi[idx] + err[idx];
                    if obs <= 0.0 {
                        ok = false;
                        break;
                    }
                    ect[idx] = obs;
                }
                if ok {
                    break;
                }
                attempts += 1;
                if attempts > 10_000 {
                    return Err(Error::Config(
                        "measurement law keeps producing non-positive thickness; \
                         offsets/scales are incompatible with the latent level"
                            .into(),
                    ));
                }
            }
            let location = truth.beta_mci * mci
                + truth.beta_ad * ad
                + truth.beta_age * age
                + truth.beta_male * f64::from(male)
                + truth.beta_ct * ct
                + a0
                + (truth.beta_mci_t * mci + truth.beta_ad_t * ad + a1) * years;
            let mut mmse = location
                + if truth.sigma > 0.0 {
                    truth.sigma * rng.sample::<f64, _>(StandardNormal)
                } else {
                    0.0
                };
            if truth.round_mmse {
                mmse = mmse.round().clamp(0.0, 30.0);
            }
            gt.ct.push(ct);
            rows.push(VisitRow {
                subject_id: subject_id.clone(),
                years,
                age,
                male,
                dx,
                mmse: Some(mmse),
                ect,
            });
        }
    }

    let (panel, report) = PipelinePanel::from_rows(rows, truth.pipeline_names.clone())?;
    debug_assert_eq!(report.dropped_missing_mmse, 0);
    Ok((panel, gt))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generated_panel_passes_validation_and_round_trips() {
        let truth = TruthConfig::table1(20, 3);
        let (panel, gt) = generate(&truth, 7).unwrap();
        assert_eq!(panel.n_rows(), 60);
        assert_eq!(panel.n_subjects(), 20);
        assert_eq!(panel.n_pipelines(), 7);
        assert_eq!(gt.ct.len(), 60);
        let text = panel.to_delimited(',');
        let (again, report) =
            crate::dataio::parse_panel(&text, &crate::dataio::Schema::default()).unwrap();
        assert_eq!(panel, again);
        assert_eq!(report.dropped_missing_mmse, 0);
    }

    #[test]
    fn determinism_per_seed() {
        let truth = TruthConfig::table1(10, 2);
        let (a, _) = generate(&truth, 11).unwrap();
        let (b, _) = generate(&truth, 11).unwrap();
        assert_eq!(a, b);
        let (c, _) = generate(&truth, 12).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn zero_noise_limit_reproduces_latents() {
        let mut truth = TruthConfig::table1(5, 3);
        truth.tau = vec![1e-8; 7];
        let (panel, gt) = generate(&truth, 3).unwrap();
        for (row_idx, row) in panel.rows().iter().enumerate() {
            for (idx, &obs) in row.ect.iter().enumerate() {
                let expect = gt.ct[row_idx] + truth.phi[idx];
                assert!(
                    (obs - expect).abs() < 1e-6,
                    "row {row_idx} pipeline {idx}: {obs} vs {expect}"
                );
            }
        }
    }

    #[test]
    fn deterministic_outcome_when_sigma_zero() {
        let mut truth = TruthConfig::table1(6, 3);
        truth.sigma = 0.0;
        truth.beta_mci = 0.0;
        truth.beta_ad = 0.0;
        truth.beta_age = 0.0;
        truth.beta_male = 0.0;
        truth.beta_mci_t = 0.0;
        truth.beta_ad_t = 0.0;
        let (panel, gt) = generate(&truth, 9).unwrap();
        for (row_idx, row) in panel.rows().iter().enumerate() {
            let s = panel.subject_of_row(row_idx);
            let expect = gt.a0[s] + truth.beta_ct * gt.ct[row_idx] + gt.a1[s] * row.years;
            assert!((row.mmse.unwrap() - expect).abs() < 1e-10);
        }
    }

    #[test]
    fn per_subject_visit_plan() {
        let mut truth = TruthConfig::table1(3, 1);
        truth.visits = VisitPlan::PerSubject(vec![1, 4, 2]);
        let (panel, _) = generate(&truth, 1).unwrap();
        assert_eq!(panel.n_rows(), 7);
        assert_eq!(panel.n_subjects(), 3);
    }

    #[test]
    fn parse_overrides_and_rejects_unknown() {
        let cfg =
            TruthConfig::parse("subjects = 12\nvisits = 2\nbeta_ct = 0.5\nrho = 0.2\n").unwrap();
        assert_eq!(cfg.subjects, 12);
        assert_eq!(cfg.beta_ct, 0.5);
        assert!(TruthConfig::parse("nope = 1\n").is_err());
        assert!(TruthConfig::parse("rho = 0.3\nR = 1,0,0,1\n").is_err());
        // Mismatched vector length.
        assert!(TruthConfig::parse("phi = 1,2\n").is_err());
    }

    #[test]
    fn truth_csv_is_aligned_with_panel() {
        let truth = TruthConfig::table1(4, 2);
        let (panel, gt) = generate(&truth, 5).unwrap();
        let text = gt.to_csv(&panel);
        assert_eq!(text.lines().count(), panel.n_rows() + 1);
        assert!(text.starts_with("subject_id,years,ct_true,a0,a1\n"));
    }
}
