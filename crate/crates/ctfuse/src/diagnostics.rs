//! Posterior summarization and MCMC quality diagnostics.
//!
//! `summarize` produces the per-quantity table (mean, sd, central 95%
//! interval, bulk ESS, split R-hat). R-hat is computed twice — once on the
//! raw split chains and once rank-normalized — and the larger value is
//! reported: rank normalization is robust but saturates for a small number
//! of disjoint chains, while the classic statistic grows without bound on
//! gross nonconvergence. ESS follows the split-chain, rank-normalized
//! autocorrelation estimator with Geyer initial-monotone truncation.
//!
//! Undefined values (constant quantities, moments that do not exist) are
//! reported as explicit markers, never as sentinel numbers.

use statrs::distribution::ContinuousCDF;

use crate::error::{Error, Result};
use crate::sampler::DrawsMatrix;

/// Summary of one retained quantity.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub name: String,
    pub mean: Option<f64>,
    pub sd: Option<f64>,
    pub ci_low: Option<f64>,
    pub ci_high: Option<f64>,
    pub ess: Option<f64>,
    pub rhat: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryTable {
    pub rows: Vec<SummaryRow>,
    /// Total retained draws across chains.
    pub total_draws: usize,
    pub n_chains: usize,
}

const NA: &str = "NA";

impl SummaryTable {
    pub fn row(&self, name: &str) -> Option<&SummaryRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    /// Delimited text mirroring the usual posterior table layout:
    /// parameter, element, mean, sd, ci_low, ci_high, ess, rhat.
    pub fn to_csv(&self) -> String {
        use std::fmt::Write as _;
        let fmt = |v: Option<f64>| match v {
            Some(x) => format!("{x}"),
            None => NA.to_string(),
        };
        let mut out = String::from("parameter,element,mean,sd,ci_low,ci_high,ess,rhat\n");
        for r in &self.rows {
            let (param, element) = split_name(&r.name);
            let _ = writeln!(
                out,
                "{param},{element},{},{},{},{},{},{}",
                fmt(r.mean),
                fmt(r.sd),
                fmt(r.ci_low),
                fmt(r.ci_high),
                fmt(r.ess),
                fmt(r.rhat)
            );
        }
        out
    }
}

/// `phi[FSCross]` -> (`phi`, `FSCross`); `beta_mci` -> (`beta`, `mci`);
/// plain scalars keep an empty element.
fn split_name(name: &str) -> (String, String) {
    if let Some(open) = name.find('[') {
        if name.ends_with(']') {
            let param = &name[..open];
            let element = &name[open + 1..name.len() - 1];
            // Elements may contain commas; keep the table parseable.
            return (param.to_string(), element.replace(',', ";"));
        }
    }
    if let Some(rest) = name.strip_prefix("beta_") {
        return ("beta".to_string(), rest.to_string());
    }
    (name.to_string(), String::new())
}

/// Type-7 (linear interpolation) quantile of already-sorted values.
fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = lo + 1;
    if hi >= n {
        return sorted[n - 1];
    }
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

fn mean_of(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn var_of(xs: &[f64]) -> f64 {
    let m = mean_of(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() as f64 - 1.0)
}

/// Split each chain into halves (an odd middle draw is dropped).
fn split_chains(chains: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut out = Vec::with_capacity(chains.len() * 2);
    for c in chains {
        let half = c.len() / 2;
        out.push(c[..half].to_vec());
        out.push(c[c.len() - half..].to_vec());
    }
    out
}

/// Rank-normalize pooled values: average ranks for ties mapped through the
/// normal quantile function with the standard (r - 3/8)/(S + 1/4) offset.
fn rank_normalize(chains: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let total: usize = chains.iter().map(|c| c.len()).sum();
    let mut indexed: Vec<(f64, usize)> = Vec::with_capacity(total);
    let mut flat_pos = 0usize;
    for c in chains {
        for &v in c {
            indexed.push((v, flat_pos));
            flat_pos += 1;
        }
    }
    indexed.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("no NaN in rank input"));
    let mut ranks = vec![0.0; total];
    let mut i = 0;
    while i < total {
        let mut j = i;
        while j + 1 < total && indexed[j + 1].0 == indexed[i].0 {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for item in &indexed[i..=j] {
            ranks[item.1] = avg;
        }
        i = j + 1;
    }
    let normal = statrs::distribution::Normal::new(0.0, 1.0).unwrap();
    let s = total as f64;
    let mut out = Vec::with_capacity(chains.len());
    let mut pos = 0usize;
    for c in chains {
        let z: Vec<f64> = (0..c.len())
            .map(|_| {
                let r = ranks[pos];
                pos += 1;
                normal.inverse_cdf((r - 0.375) / (s + 0.25))
            })
            .collect();
        out.push(z);
    }
    out
}

/// Classic Gelman-Rubin statistic over (already split) chains.
fn gelman_rubin(chains: &[Vec<f64>]) -> Option<f64> {
    let m = chains.len();
    let n = chains[0].len();
    if m < 2 || n < 2 {
        return None;
    }
    let means: Vec<f64> = chains.iter().map(|c| mean_of(c)).collect();
    let w = chains.iter().map(|c| var_of(c)).sum::<f64>() / m as f64;
    let b_over_n = var_of(&means);
    if w <= 0.0 {
        return if b_over_n > 0.0 { Some(f64::INFINITY) } else { None };
    }
    let var_hat = (n as f64 - 1.0) / n as f64 * w + b_over_n;
    Some((var_hat / w).sqrt())
}

/// Lag-t autocovariance with 1/n normalization.
fn autocov(xs: &[f64], mean: f64, t: usize) -> f64 {
    let n = xs.len();
    let mut acc = 0.0;
    for i in 0..n - t {
        acc += (xs[i] - mean) * (xs[i + t] - mean);
    }
    acc / n as f64
}

/// Effective sample size over (already split, rank-normalized) chains using
/// the combined-chain autocorrelation with Geyer initial-monotone truncation.
fn ess_core(chains: &[Vec<f64>]) -> Option<f64> {
    let m = chains.len();
    let n = chains[0].len();
    if n < 4 {
        return None;
    }
    let means: Vec<f64> = chains.iter().map(|c| mean_of(c)).collect();
    let vars: Vec<f64> = chains.iter().map(|c| var_of(c)).collect();
    let mean_var = mean_of(&vars);
    let var_plus = mean_var * (n as f64 - 1.0) / n as f64
        + if m > 1 { var_of(&means) } else { 0.0 };
    if !(var_plus > 0.0) {
        return None;
    }
    let mean_acov = |t: usize| -> f64 {
        let mut acc = 0.0;
        for (c, &mu) in chains.iter().zip(means.iter()) {
            acc += autocov(c, mu, t);
        }
        acc / m as f64
    };

    let mut rho = vec![0.0f64; n];
    rho[0] = 1.0;
    rho[1] = 1.0 - (mean_var - mean_acov(1)) / var_plus;
    let mut rho_even = rho[0];
    let mut rho_odd = rho[1];
    let mut s = 1usize;
    while s < n - 4 && rho_even + rho_odd > 0.0 {
        rho_even = 1.0 - (mean_var - mean_acov(s + 1)) / var_plus;
        rho_odd = 1.0 - (mean_var - mean_acov(s + 2)) / var_plus;
        if rho_even + rho_odd >= 0.0 {
            rho[s + 1] = rho_even;
            rho[s + 2] = rho_odd;
        }
        s += 2;
    }
    let max_s = s;
    // Improved estimate uses a trailing positive even term.
    if rho_even > 0.0 && max_s + 1 < n {
        rho[max_s + 1] = rho_even;
    }
    // Geyer initial monotone sequence.
    let mut t = 1usize;
    while t + 3 <= max_s {
        if rho[t + 1] + rho[t + 2] > rho[t - 1] + rho[t] {
            rho[t + 1] = (rho[t - 1] + rho[t]) / 2.0;
            rho[t + 2] = rho[t + 1];
        }
        t += 2;
    }
    let total = (m * n) as f64;
    let tau: f64 = -1.0 + 2.0 * rho[..max_s].iter().sum::<f64>() + rho[max_s + 1];
    if !(tau > 0.0) {
        return Some(total);
    }
    Some((total / tau).min(total * total.log10()))
}

fn gather_chains(draws: &DrawsMatrix, quantity: usize) -> Result<Vec<Vec<f64>>> {
    let n_chains = draws.n_chains();
    let mut chains: Vec<Vec<f64>> = (0..n_chains as u32)
        .map(|c| draws.chain_column(c, quantity))
        .collect();
    chains.retain(|c| !c.is_empty());
    if chains.is_empty() {
        return Err(Error::Dimension("no draws".into()));
    }
    let len = chains[0].len();
    if chains.iter().any(|c| c.len() != len) {
        return Err(Error::Dimension("chains have unequal lengths".into()));
    }
    Ok(chains)
}

/// Summarize retained quantities; `names` filters to a subset (draw order is
/// preserved), `None` summarizes everything.
pub fn summarize(draws: &DrawsMatrix, names: Option<&[String]>) -> Result<SummaryTable> {
    if draws.n_draws() < 4 {
        return Err(Error::Dimension(format!(
            "need at least 4 draws to summarize, got {}",
            draws.n_draws()
        )));
    }
    let selected: Vec<usize> = match names {
        None => (0..draws.n_quantities()).collect(),
        Some(filter) => {
            let mut idx = Vec::with_capacity(filter.len());
            for name in filter {
                idx.push(
                    draws
                        .index_of(name)
                        .ok_or_else(|| Error::Schema(format!("unknown quantity {name}")))?,
                );
            }
            idx
        }
    };

    let mut rows = Vec::with_capacity(selected.len());
    for q in selected {
        let name = draws.names[q].clone();
        let chains = gather_chains(draws, q)?;
        let pooled: Vec<f64> = chains.iter().flatten().copied().collect();
        if pooled.iter().any(|v| !v.is_finite()) {
            rows.push(SummaryRow {
                name,
                mean: None,
                sd: None,
                ci_low: None,
                ci_high: None,
                ess: None,
                rhat: None,
            });
            continue;
        }
        let mean = mean_of(&pooled);
        let sd = var_of(&pooled).sqrt();
        let mut sorted = pooled.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let ci_low = quantile_sorted(&sorted, 0.025);
        let ci_high = quantile_sorted(&sorted, 0.975);

        let constant = sorted[0] == sorted[sorted.len() - 1];
        let (ess, rhat) = if constant {
            (None, None)
        } else {
            let split = split_chains(&chains);
            let z = rank_normalize(&split);
            let rhat_classic = gelman_rubin(&split);
            let rhat_rank = gelman_rubin(&z);
            let rhat = match (rhat_classic, rhat_rank) {
                (Some(a), Some(b)) => Some(a.max(b)),
                (a, b) => a.or(b),
            };
            let ess = ess_core(&z).map(|e| e.min(pooled.len() as f64));
            (ess, rhat)
        };
        rows.push(SummaryRow {
            name,
            mean: Some(mean),
            sd: Some(sd),
            ci_low: Some(ci_low),
            ci_high: Some(ci_high),
            ess,
            rhat,
        });
    }
    Ok(SummaryTable { rows, total_draws: draws.n_draws(), n_chains: draws.n_chains() })
}

pub(crate) fn bulk_ess_for_test(draws: &DrawsMatrix, quantity: usize) -> f64 {
    let chains = gather_chains(draws, quantity).unwrap();
    let z = rank_normalize(&split_chains(&chains));
    ess_core(&z).unwrap_or(f64::NAN)
}

/// Convergence thresholds for pass/fail reporting.
#[derive(Debug, Clone, Copy)]
pub struct ConvergenceThresholds {
    pub max_rhat: f64,
    pub min_ess: f64,
    pub max_divergence_rate: f64,
}

impl Default for ConvergenceThresholds {
    fn default() -> Self {
        ConvergenceThresholds { max_rhat: 1.01, min_ess: 500.0, max_divergence_rate: 0.01 }
    }
}

#[derive(Debug, Clone)]
pub struct ConvergenceReport {
    pub worst_rhat: Option<(String, f64)>,
    pub worst_ess: Option<(String, f64)>,
    pub divergence_rate: f64,
    pub failures: Vec<String>,
    pub passed: bool,
}

/// Check every summarized quantity against the thresholds. Quantities with
/// undefined ESS/R-hat (constants) are skipped.
pub fn check_convergence(
    draws: &DrawsMatrix,
    table: &SummaryTable,
    thresholds: &ConvergenceThresholds,
) -> ConvergenceReport {
    let mut worst_rhat: Option<(String, f64)> = None;
    let mut worst_ess: Option<(String, f64)> = None;
    let mut failures = Vec::new();
    for row in &table.rows {
        if let Some(r) = row.rhat {
            if worst_rhat.as_ref().is_none_or(|(_, v)| r > *v) {
                worst_rhat = Some((row.name.clone(), r));
            }
            if r > thresholds.max_rhat {
                failures.push(format!("{}: rhat {r:.4} > {}", row.name, thresholds.max_rhat));
            }
        }
        if let Some(e) = row.ess {
            if worst_ess.as_ref().is_none_or(|(_, v)| e < *v) {
                worst_ess = Some((row.name.clone(), e));
            }
            if e < thresholds.min_ess {
                failures.push(format!("{}: ess {e:.0} < {}", row.name, thresholds.min_ess));
            }
        }
    }
    let divergence_rate =
        draws.divergent.iter().filter(|&&d| d).count() as f64 / draws.n_draws().max(1) as f64;
    if divergence_rate > thresholds.max_divergence_rate {
        failures.push(format!(
            "divergence rate {divergence_rate:.4} > {}",
            thresholds.max_divergence_rate
        ));
    }
    ConvergenceReport {
        worst_rhat,
        worst_ess,
        divergence_rate,
        passed: failures.is_empty(),
        failures,
    }
}

/// Append derived per-draw quantities where their inputs are present:
/// pairwise error correlations from the `L_R[i,j]` block, log excess kurtosis
/// from `nu[...]` (undefined marker when nu <= 4), and natural-scale random
/// effects `a0[i] = alpha0 + lambda0 * z0[i]` (likewise for slopes).
pub fn derived_quantities(draws: &DrawsMatrix) -> DrawsMatrix {
    let p = draws.n_quantities();
    let s = draws.n_draws();

    // Correlation factor block, if complete.
    let mut factor_dim = 0usize;
    while draws.index_of(&format!("L_R[{},{}]", factor_dim + 1, 1)).is_some() {
        factor_dim += 1;
    }
    let mut factor_idx = Vec::new();
    if factor_dim >= 2 {
        let mut complete = true;
        for i in 1..=factor_dim {
            for j in 1..=i {
                match draws.index_of(&format!("L_R[{i},{j}]")) {
                    Some(ix) => factor_idx.push(ix),
                    None => complete = false,
                }
            }
        }
        if !complete {
            factor_idx.clear();
            factor_dim = 0;
        }
    } else {
        factor_dim = 0;
    }

    // Element labels for pipeline-indexed quantities.
    let labels: Vec<String> = {
        let from_phi: Vec<String> = draws
            .names
            .iter()
            .filter_map(|n| {
                n.strip_prefix("phi[").and_then(|r| r.strip_suffix(']')).map(str::to_string)
            })
            .collect();
        if from_phi.len() == factor_dim && factor_dim > 0 {
            from_phi
        } else {
            (1..=factor_dim).map(|i| i.to_string()).collect()
        }
    };

    let nu_idx: Vec<(usize, String)> = draws
        .names
        .iter()
        .enumerate()
        .filter_map(|(ix, n)| {
            n.strip_prefix("nu[")
                .and_then(|r| r.strip_suffix(']'))
                .map(|e| (ix, e.to_string()))
        })
        .collect();

    let re_blocks: Vec<(String, String, String, Vec<usize>)> = ["0", "1"]
        .iter()
        .filter_map(|which| {
            let alpha = format!("alpha{which}");
            let lambda = format!("lambda{which}");
            draws.index_of(&alpha)?;
            draws.index_of(&lambda)?;
            let mut z_idx = Vec::new();
            let mut i = 1usize;
            while let Some(ix) = draws.index_of(&format!("z{which}[{i}]")) {
                z_idx.push(ix);
                i += 1;
            }
            if z_idx.is_empty() {
                None
            } else {
                Some((format!("a{which}"), alpha, lambda, z_idx))
            }
        })
        .collect();

    let mut names = draws.names.clone();
    for i in 1..=factor_dim {
        for j in 1..i {
            names.push(format!("rho[{},{}]", labels[i - 1], labels[j - 1]));
        }
    }
    for (_, e) in &nu_idx {
        names.push(format!("log_excess_kurtosis[{e}]"));
    }
    for (out_name, _, _, z_idx) in &re_blocks {
        for i in 1..=z_idx.len() {
            names.push(format!("{out_name}[{i}]"));
        }
    }

    let extra = names.len() - p;
    let mut new_draws = Vec::with_capacity(s * names.len());
    for row in 0..s {
        let base = &draws.draws[row * p..(row + 1) * p];
        new_draws.extend_from_slice(base);
        if factor_dim > 0 {
            // R = L L^T restricted to strictly-lower entries.
            let l = |i: usize, j: usize| base[factor_idx[i * (i + 1) / 2 + j]];
            for i in 1..factor_dim {
                for j in 0..i {
                    let mut acc = 0.0;
                    for t in 0..=j.min(i) {
                        acc += l(i, t) * l(j, t);
                    }
                    new_draws.push(acc);
                }
            }
        }
        for (ix, _) in &nu_idx {
            let nu = base[*ix];
            new_draws.push(if nu > 4.0 { (6.0 / (nu - 4.0)).ln() } else { f64::NAN });
        }
        for (_, alpha, lambda, z_idx) in &re_blocks {
            let a = base[draws.index_of(alpha).unwrap()];
            let l = base[draws.index_of(lambda).unwrap()];
            for &zi in z_idx {
                new_draws.push(a + l * base[zi]);
            }
        }
        debug_assert_eq!(new_draws.len(), (row + 1) * (p + extra));
    }

    DrawsMatrix {
        names,
        draws: new_draws,
        chain_id: draws.chain_id.clone(),
        iteration: draws.iteration.clone(),
        divergent: draws.divergent.clone(),
        tree_depth: draws.tree_depth.clone(),
        step_size: draws.step_size.clone(),
        energy: draws.energy.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn fixture(chains: Vec<Vec<f64>>, names: Vec<String>, per_row: usize) -> DrawsMatrix {
        // chains: per chain, flattened rows of `per_row` quantities.
        let mut draws = Vec::new();
        let mut chain_id = Vec::new();
        let mut iteration = Vec::new();
        for (c, rows) in chains.iter().enumerate() {
            let n = rows.len() / per_row;
            draws.extend_from_slice(rows);
            chain_id.extend(std::iter::repeat(c as u32).take(n));
            iteration.extend(1..=n as u32);
        }
        let s = chain_id.len();
        DrawsMatrix {
            names,
            draws,
            chain_id,
            iteration,
            divergent: vec![false; s],
            tree_depth: vec![1; s],
            step_size: vec![0.5; s],
            energy: vec![0.0; s],
        }
    }

    fn gaussian_chains(n_chains: usize, n: usize, mu: f64, seed: u64) -> Vec<Vec<f64>> {
        let mut out = Vec::new();
        for c in 0..n_chains {
            let mut rng = ChaCha8Rng::seed_from_u64(seed + c as u64);
            out.push(
                (0..n)
                    .map(|_| mu + rng.sample::<f64, _>(StandardNormal))
                    .collect(),
            );
        }
        out
    }

    #[test]
    fn iid_fixture_summary() {
        let chains = gaussian_chains(4, 2500, 0.0, 42);
        let m = fixture(chains, vec!["x".into()], 1);
        let table = summarize(&m, None).unwrap();
        let row = table.row("x").unwrap();
        assert!(row.mean.unwrap().abs() < 0.05);
        assert!((row.ci_low.unwrap() + 1.96).abs() < 0.08, "{:?}", row.ci_low);
        assert!((row.ci_high.unwrap() - 1.96).abs() < 0.08, "{:?}", row.ci_high);
        assert!(row.rhat.unwrap() < 1.01, "rhat {:?}", row.rhat);
        let ess = row.ess.unwrap();
        assert!((ess - 10_000.0).abs() < 1500.0, "ess {ess}");
    }

    #[test]
    fn two_distribution_fixture_fails_loudly() {
        let mut chains = gaussian_chains(1, 2000, 0.0, 1);
        chains.extend(gaussian_chains(1, 2000, 10.0, 2));
        let m = fixture(chains, vec!["x".into()], 1);
        let table = summarize(&m, None).unwrap();
        let rhat = table.row("x").unwrap().rhat.unwrap();
        assert!(rhat > 3.0, "rhat {rhat}");
    }

    #[test]
    fn ar1_ess_matches_theory() {
        // AR(1) with coefficient 0.9: ESS/S should be near (1-p)/(1+p).
        let phi = 0.9f64;
        let innovation = (1.0 - phi * phi).sqrt();
        let mut chains = Vec::new();
        for c in 0..4u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + c);
            let mut x = rng.sample::<f64, _>(StandardNormal);
            let mut v = Vec::with_capacity(5000);
            for _ in 0..5000 {
                x = phi * x + innovation * rng.sample::<f64, _>(StandardNormal);
                v.push(x);
            }
            chains.push(v);
        }
        let m = fixture(chains, vec!["x".into()], 1);
        let table = summarize(&m, None).unwrap();
        let ess = table.row("x").unwrap().ess.unwrap();
        let frac = ess / 20_000.0;
        let expect = (1.0 - phi) / (1.0 + phi);
        assert!(
            (frac - expect).abs() < 0.25 * expect,
            "ess fraction {frac}, expected about {expect}"
        );
    }

    #[test]
    fn constant_quantity_reports_markers() {
        let chains = vec![vec![2.5; 100], vec![2.5; 100]];
        let m = fixture(chains, vec!["c".into()], 1);
        let table = summarize(&m, None).unwrap();
        let row = table.row("c").unwrap();
        assert_eq!(row.mean, Some(2.5));
        assert_eq!(row.ess, None);
        assert_eq!(row.rhat, None);
        assert!(table.to_csv().contains("NA"));
    }

    #[test]
    fn nan_quantity_reports_markers() {
        let chains = vec![vec![1.0, f64::NAN, 2.0, 3.0], vec![1.0, 2.0, 3.0, 4.0]];
        let m = fixture(chains, vec!["k".into()], 1);
        let table = summarize(&m, None).unwrap();
        let row = table.row("k").unwrap();
        assert_eq!(row.mean, None);
        assert_eq!(row.ci_low, None);
    }

    #[test]
    fn summarize_respects_filter_and_unknown_names() {
        let chains = gaussian_chains(2, 100, 0.0, 9);
        let two: Vec<Vec<f64>> = chains
            .into_iter()
            .map(|c| c.into_iter().flat_map(|v| [v, v + 1.0]).collect())
            .collect();
        let m = fixture(two, vec!["a".into(), "b".into()], 2);
        let table = summarize(&m, Some(&["b".to_string()])).unwrap();
        assert_eq!(table.rows.len(), 1);
        assert_eq!(table.rows[0].name, "b");
        assert!(summarize(&m, Some(&["zzz".to_string()])).is_err());
    }

    #[test]
    fn quantiles_match_order_statistics() {
        // 41 evenly ranked values: type-7 quantile at p lands exactly on the
        // order statistic when (n-1)p is integral.
        let xs: Vec<f64> = (0..41).map(|i| i as f64).collect();
        assert_eq!(quantile_sorted(&xs, 0.025), 1.0);
        assert_eq!(quantile_sorted(&xs, 0.975), 39.0);
        assert_eq!(quantile_sorted(&xs, 0.5), 20.0);
    }

    #[test]
    fn mean_sd_ci_invariant_to_within_chain_permutation() {
        let chains = gaussian_chains(2, 500, 0.3, 77);
        let m1 = fixture(chains.clone(), vec!["x".into()], 1);
        let mut reversed = chains;
        for c in &mut reversed {
            c.reverse();
        }
        let m2 = fixture(reversed, vec!["x".into()], 1);
        let t1 = summarize(&m1, None).unwrap();
        let t2 = summarize(&m2, None).unwrap();
        let (a, b) = (t1.row("x").unwrap(), t2.row("x").unwrap());
        // Summation order may differ; the statistics may not.
        assert!((a.mean.unwrap() - b.mean.unwrap()).abs() < 1e-12);
        assert!((a.sd.unwrap() - b.sd.unwrap()).abs() < 1e-12);
        assert_eq!(a.ci_low, b.ci_low);
        assert_eq!(a.ci_high, b.ci_high);
    }

    #[test]
    fn derived_quantities_from_factor_and_nu() {
        // One draw with an identity factor, one with correlation 0.6.
        let rho = 0.6f64;
        let d = (1.0 - rho * rho).sqrt();
        let rows_per_draw = vec![
            // L_R[1,1], L_R[2,1], L_R[2,2], nu[a], nu[b], alpha0, lambda0, z0[1]
            vec![1.0, 0.0, 1.0, 10.0, 3.0, 20.0, 2.0, 0.5],
            vec![1.0, rho, d, 10.0, 3.0, 20.0, 2.0, -1.0],
            vec![1.0, 0.0, 1.0, 10.0, 3.0, 20.0, 2.0, 0.0],
            vec![1.0, rho, d, 10.0, 3.0, 20.0, 2.0, 1.0],
        ];
        let names: Vec<String> = [
            "L_R[1,1]", "L_R[2,1]", "L_R[2,2]", "nu[a]", "nu[b]", "alpha0", "lambda0", "z0[1]",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        let flat: Vec<f64> = rows_per_draw.into_iter().flatten().collect();
        let m = fixture(vec![flat], names, 8);
        let out = derived_quantities(&m);
        let rho_ix = out.index_of("rho[2,1]").unwrap();
        assert_eq!(out.value(0, rho_ix), 0.0);
        assert!((out.value(1, rho_ix) - rho).abs() < 1e-12);
        let k_a = out.index_of("log_excess_kurtosis[a]").unwrap();
        // nu = 10 has excess kurtosis 1, log 0.
        assert!(out.value(0, k_a).abs() < 1e-12);
        let k_b = out.index_of("log_excess_kurtosis[b]").unwrap();
        assert!(out.value(0, k_b).is_nan(), "nu <= 4 must be undefined");
        let a0 = out.index_of("a0[1]").unwrap();
        assert!((out.value(0, a0) - 21.0).abs() < 1e-12);
        assert!((out.value(1, a0) - 18.0).abs() < 1e-12);
    }

    #[test]
    fn derived_rho_matrices_are_valid_correlations() {
        // Random factors: reconstructed rho must stay in [-1, 1] with unit
        // diagonal by construction; check 2x2 principal minors too.
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let spec = crate::transforms::TransformSpec::new(vec![crate::transforms::Block::new(
            "lr",
            crate::transforms::ConstraintKind::CorrFactor,
            4,
        )])
        .unwrap();
        for _ in 0..50 {
            let u: Vec<f64> = (0..6).map(|_| rng.random_range(-2.0..2.0)).collect();
            let mut packed = vec![0.0; 10];
            spec.constrain(&u, &mut packed).unwrap();
            let f = crate::distributions::CorrCholesky::from_packed(4, packed).unwrap();
            let r = f.correlation();
            for i in 0..4 {
                assert!((r[i * 4 + i] - 1.0).abs() < 1e-12);
                for j in 0..4 {
                    assert!(r[i * 4 + j].abs() <= 1.0 + 1e-12);
                    let minor = r[i * 4 + i] * r[j * 4 + j] - r[i * 4 + j] * r[j * 4 + i];
                    assert!(minor >= -1e-10);
                }
            }
        }
    }

    #[test]
    fn check_convergence_thresholds() {
        let good = fixture(gaussian_chains(4, 1000, 0.0, 3), vec!["x".into()], 1);
        let table = summarize(&good, None).unwrap();
        let report = check_convergence(&good, &table, &ConvergenceThresholds::default());
        assert!(report.passed, "failures: {:?}", report.failures);

        let mut chains = gaussian_chains(1, 1000, 0.0, 4);
        chains.extend(gaussian_chains(1, 1000, 8.0, 5));
        let bad = fixture(chains, vec!["x".into()], 1);
        let table = summarize(&bad, None).unwrap();
        let report = check_convergence(&bad, &table, &ConvergenceThresholds::default());
        assert!(!report.passed);
        assert!(report.failures.iter().any(|f| f.contains("rhat")));
    }
}
