//! Self-contained No-U-Turn sampler.
//!
//! Multinomial sampling across the trajectory with the generalized
//! no-U-turn criterion on metric-weighted momenta; dual-averaging step-size
//! adaptation toward a target acceptance statistic; windowed estimation of a
//! diagonal mass matrix during warmup (15% fast, doubling slow windows, 10%
//! final fast). Chains run in parallel, each on its own counter-based
//! substream of the seed, so results do not depend on scheduling.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A differentiable unnormalized log density the sampler can draw from.
///
/// `log_density_grad` may return a non-finite value; the sampler treats that
/// point as a divergence, never as a hard error. Implementations may keep
/// internal scratch buffers (the sampler clones one target per chain).
pub trait Target {
    /// Unconstrained dimension.
    fn dim(&self) -> usize;

    /// Write the gradient into `grad` and return the log density at `u`.
    fn log_density_grad(&mut self, u: &[f64], grad: &mut [f64]) -> f64;

    /// Names of the retained per-draw quantities.
    fn quantity_names(&self) -> Vec<String> {
        (1..=self.dim()).map(|i| format!("u[{i}]")).collect()
    }

    /// Map an unconstrained point to the retained quantities (constrained
    /// values and anything derived). Defaults to the point itself.
    fn quantities(&mut self, u: &[f64], out: &mut Vec<f64>) {
        out.extend_from_slice(u);
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub n_chains: usize,
    pub n_warmup: usize,
    /// Post-warmup iterations per chain.
    pub n_iterations: usize,
    pub thin: usize,
    pub target_accept: f64,
    pub max_tree_depth: usize,
    pub seed: u64,
    pub init_radius: f64,
    /// Emit progress lines on stderr.
    #[serde(default)]
    pub progress: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            n_chains: 4,
            n_warmup: 1000,
            n_iterations: 1000,
            thin: 1,
            target_accept: 0.8,
            max_tree_depth: 10,
            seed: 0,
            init_radius: 2.0,
            progress: false,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_chains < 1 {
            return Err(Error::Config("n_chains must be >= 1".into()));
        }
        if self.n_iterations < 1 {
            return Err(Error::Config("n_iterations must be >= 1".into()));
        }
        if self.thin < 1 {
            return Err(Error::Config("thin must be >= 1".into()));
        }
        if !(self.target_accept > 0.0 && self.target_accept < 1.0) {
            return Err(Error::Config("target_accept must be in (0, 1)".into()));
        }
        if self.max_tree_depth < 1 {
            return Err(Error::Config("max_tree_depth must be >= 1".into()));
        }
        if !(self.init_radius > 0.0) {
            return Err(Error::Config("init_radius must be > 0".into()));
        }
        Ok(())
    }

    /// Retained draws per chain.
    pub fn retained_per_chain(&self) -> usize {
        self.n_iterations / self.thin
    }
}

/// Retained posterior draws across all chains plus per-draw sampler stats.
#[derive(Debug, Clone)]
pub struct DrawsMatrix {
    pub names: Vec<String>,
    /// S x P row-major.
    pub draws: Vec<f64>,
    pub chain_id: Vec<u32>,
    /// Post-warmup iteration (1-based, before thinning) that produced a draw.
    pub iteration: Vec<u32>,
    pub divergent: Vec<bool>,
    pub tree_depth: Vec<u32>,
    pub step_size: Vec<f64>,
    pub energy: Vec<f64>,
}

impl DrawsMatrix {
    pub fn n_draws(&self) -> usize {
        self.chain_id.len()
    }

    pub fn n_quantities(&self) -> usize {
        self.names.len()
    }

    pub fn n_chains(&self) -> usize {
        self.chain_id.iter().copied().max().map_or(0, |m| m as usize + 1)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn value(&self, draw: usize, quantity: usize) -> f64 {
        self.draws[draw * self.names.len() + quantity]
    }

    pub fn column(&self, quantity: usize) -> Vec<f64> {
        (0..self.n_draws()).map(|s| self.value(s, quantity)).collect()
    }

    /// Column values of one chain, in draw order.
    pub fn chain_column(&self, chain: u32, quantity: usize) -> Vec<f64> {
        (0..self.n_draws())
            .filter(|&s| self.chain_id[s] == chain)
            .map(|s| self.value(s, quantity))
            .collect()
    }

    /// Serialize as delimited text: leading columns
    /// `chain,iteration,divergent,tree_depth,energy`, then one column per
    /// quantity.
    pub fn to_csv(&self) -> String {
        use std::fmt::Write as _;
        let mut out = String::new();
        out.push_str("chain,iteration,divergent,tree_depth,energy");
        for n in &self.names {
            out.push(',');
            out.push_str(n);
        }
        out.push('\n');
        for s in 0..self.n_draws() {
            let _ = write!(
                out,
                "{},{},{},{},{}",
                self.chain_id[s],
                self.iteration[s],
                u8::from(self.divergent[s]),
                self.tree_depth[s],
                self.energy[s]
            );
            for p in 0..self.names.len() {
                let _ = write!(out, ",{}", self.value(s, p));
            }
            out.push('\n');
        }
        out
    }

    pub fn write_csv(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    /// Parse a draws file produced by [`DrawsMatrix::to_csv`]. Step sizes are
    /// not persisted and come back as NaN.
    pub fn parse_csv(text: &str) -> Result<DrawsMatrix> {
        let mut lines = text.lines().enumerate();
        let (_, header) =
            lines.next().ok_or_else(|| Error::Schema("empty draws file".into()))?;
        let cols: Vec<&str> = header.split(',').collect();
        let expected = ["chain", "iteration", "divergent", "tree_depth", "energy"];
        if cols.len() < expected.len() + 1 {
            return Err(Error::Schema(
                "draws file needs stat columns plus at least one quantity".into(),
            ));
        }
        for (have, want) in cols.iter().zip(expected.iter()) {
            if have != want {
                return Err(Error::Schema(format!(
                    "expected leading column {want}, found {have}"
                )));
            }
        }
        let names: Vec<String> = cols[expected.len()..].iter().map(|s| s.to_string()).collect();
        {
            let mut seen = std::collections::HashSet::new();
            for n in &names {
                if !seen.insert(n.as_str()) {
                    return Err(Error::Schema(format!("duplicate quantity name {n}")));
                }
            }
        }
        let p = names.len();
        let mut m = DrawsMatrix {
            names,
            draws: Vec::new(),
            chain_id: Vec::new(),
            iteration: Vec::new(),
            divergent: Vec::new(),
            tree_depth: Vec::new(),
            step_size: Vec::new(),
            energy: Vec::new(),
        };
        for (idx, raw) in lines {
            let line = idx + 1;
            if raw.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = raw.split(',').collect();
            if fields.len() != p + expected.len() {
                return Err(Error::Parse {
                    line,
                    msg: format!("expected {} fields, got {}", p + expected.len(), fields.len()),
                });
            }
            let parse_u32 = |s: &str, what: &str| -> Result<u32> {
                s.parse().map_err(|_| Error::Parse { line, msg: format!("bad {what}: {s}") })
            };
            let parse_f64 = |s: &str, what: &str| -> Result<f64> {
                s.parse().map_err(|_| Error::Parse { line, msg: format!("bad {what}: {s}") })
            };
            m.chain_id.push(parse_u32(fields[0], "chain")?);
            m.iteration.push(parse_u32(fields[1], "iteration")?);
            m.divergent.push(match fields[2] {
                "0" => false,
                "1" => true,
                other => {
                    return Err(Error::Parse { line, msg: format!("bad divergent flag: {other}") })
                }
            });
            m.tree_depth.push(parse_u32(fields[3], "tree_depth")?);
            m.energy.push(parse_f64(fields[4], "energy")?);
            m.step_size.push(f64::NAN);
            for f in &fields[expected.len()..] {
                m.draws.push(parse_f64(f, "quantity value")?);
            }
        }
        if m.chain_id.is_empty() {
            return Err(Error::Schema("draws file has no draws".into()));
        }
        Ok(m)
    }

    pub fn read_csv(path: &std::path::Path) -> Result<DrawsMatrix> {
        DrawsMatrix::parse_csv(&std::fs::read_to_string(path)?)
    }
}

/// Position/momentum pair with cached density and gradient.
#[derive(Debug, Clone)]
pub struct PhasePoint {
    pub position: Vec<f64>,
    pub momentum: Vec<f64>,
    pub logp: f64,
    pub grad: Vec<f64>,
}

impl PhasePoint {
    pub fn hamiltonian(&self, inv_mass: &[f64]) -> f64 {
        let kinetic: f64 = self
            .momentum
            .iter()
            .zip(inv_mass.iter())
            .map(|(&p, &im)| 0.5 * p * p * im)
            .sum();
        -self.logp + kinetic
    }
}

/// One velocity-Verlet step under a diagonal metric. Returns false when the
/// step produced a non-finite density, gradient, or position (a divergence
/// signal, not an error).
pub fn leapfrog<T: Target + ?Sized>(
    state: &mut PhasePoint,
    step: f64,
    inv_mass: &[f64],
    target: &mut T,
) -> bool {
    let half = 0.5 * step;
    for (p, &g) in state.momentum.iter_mut().zip(state.grad.iter()) {
        *p += half * g;
    }
    for ((q, &p), &im) in state
        .position
        .iter_mut()
        .zip(state.momentum.iter())
        .zip(inv_mass.iter())
    {
        *q += step * p * im;
    }
    if !state.position.iter().all(|v| v.is_finite()) {
        return false;
    }
    state.logp = target.log_density_grad(&state.position, &mut state.grad);
    if !state.logp.is_finite() || !state.grad.iter().all(|v| v.is_finite()) {
        return false;
    }
    for (p, &g) in state.momentum.iter_mut().zip(state.grad.iter()) {
        *p += half * g;
    }
    true
}

const DIVERGENCE_ENERGY: f64 = 1000.0;

fn log_sum_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Generalized U-turn check: the trajectory stops making progress when the
/// momentum sum turns against either endpoint under the metric.
fn is_turning(rho: &[f64], p_left: &[f64], p_right: &[f64], inv_mass: &[f64]) -> bool {
    let mut dot_left = 0.0;
    let mut dot_right = 0.0;
    for i in 0..rho.len() {
        dot_left += rho[i] * p_left[i] * inv_mass[i];
        dot_right += rho[i] * p_right[i] * inv_mass[i];
    }
    if !dot_left.is_finite() || !dot_right.is_finite() {
        return true;
    }
    dot_left < 0.0 || dot_right < 0.0
}

struct Tree {
    q_left: Vec<f64>,
    p_left: Vec<f64>,
    g_left: Vec<f64>,
    q_right: Vec<f64>,
    p_right: Vec<f64>,
    g_right: Vec<f64>,
    q_prop: Vec<f64>,
    logp_prop: f64,
    g_prop: Vec<f64>,
    log_sum_weight: f64,
    p_sum: Vec<f64>,
    n_leapfrog: usize,
    sum_accept: f64,
    divergent: bool,
    turning: bool,
}

impl Tree {
    fn valid(&self) -> bool {
        !self.divergent && !self.turning
    }
}

fn build_leaf<T: Target + ?Sized>(
    edge: &PhasePoint,
    direction: f64,
    step: f64,
    h0: f64,
    inv_mass: &[f64],
    target: &mut T,
) -> Tree {
    let mut state = edge.clone();
    let ok = leapfrog(&mut state, direction * step, inv_mass, target);
    if !ok {
        return Tree {
            q_left: edge.position.clone(),
            p_left: edge.momentum.clone(),
            g_left: edge.grad.clone(),
            q_right: edge.position.clone(),
            p_right: edge.momentum.clone(),
            g_right: edge.grad.clone(),
            q_prop: edge.position.clone(),
            logp_prop: edge.logp,
            g_prop: edge.grad.clone(),
            log_sum_weight: f64::NEG_INFINITY,
            p_sum: vec![0.0; edge.position.len()],
            n_leapfrog: 1,
            sum_accept: 0.0,
            divergent: true,
            turning: false,
        };
    }
    let h = state.hamiltonian(inv_mass);
    let energy_error = h - h0;
    let divergent = !h.is_finite() || energy_error > DIVERGENCE_ENERGY;
    let log_weight = if divergent { f64::NEG_INFINITY } else { -energy_error };
    let accept = if energy_error.is_finite() {
        (-energy_error).exp().min(1.0)
    } else {
        0.0
    };
    Tree {
        q_left: state.position.clone(),
        p_left: state.momentum.clone(),
        g_left: state.grad.clone(),
        q_right: state.position.clone(),
        p_right: state.momentum.clone(),
        g_right: state.grad.clone(),
        q_prop: state.position.clone(),
        logp_prop: state.logp,
        g_prop: state.grad.clone(),
        log_sum_weight: log_weight,
        p_sum: state.momentum,
        n_leapfrog: 1,
        sum_accept: accept,
        divergent,
        turning: false,
    }
}

#[allow(clippy::too_many_arguments)]
fn build_tree<T: Target + ?Sized>(
    depth: usize,
    edge: &PhasePoint,
    direction: f64,
    step: f64,
    h0: f64,
    inv_mass: &[f64],
    target: &mut T,
    rng: &mut ChaCha8Rng,
) -> Tree {
    if depth == 0 {
        return build_leaf(edge, direction, step, h0, inv_mass, target);
    }
    let mut inner = build_tree(depth - 1, edge, direction, step, h0, inv_mass, target, rng);
    if !inner.valid() {
        return inner;
    }
    let inner_edge = if direction > 0.0 {
        PhasePoint {
            position: inner.q_right.clone(),
            momentum: inner.p_right.clone(),
            logp: 0.0,
            grad: inner.g_right.clone(),
        }
    } else {
        PhasePoint {
            position: inner.q_left.clone(),
            momentum: inner.p_left.clone(),
            logp: 0.0,
            grad: inner.g_left.clone(),
        }
    };
    // Junction momenta feed the cross-subtree U-turn checks below.
    let rho_inner = inner.p_sum.clone();
    let p_inner_junction = inner_edge.momentum.clone();

    let outer = build_tree(depth - 1, &inner_edge, direction, step, h0, inv_mass, target, rng);

    inner.n_leapfrog += outer.n_leapfrog;
    inner.sum_accept += outer.sum_accept;
    inner.divergent |= outer.divergent;
    inner.turning |= outer.turning;

    if outer.valid() {
        // Multinomial selection between the two halves.
        let total = log_sum_exp(inner.log_sum_weight, outer.log_sum_weight);
        let p_outer = if total == f64::NEG_INFINITY {
            0.0
        } else {
            (outer.log_sum_weight - total).exp()
        };
        if rng.random::<f64>() < p_outer {
            inner.q_prop = outer.q_prop.clone();
            inner.logp_prop = outer.logp_prop;
            inner.g_prop = outer.g_prop.clone();
        }
        inner.log_sum_weight = total;
    }

    let p_outer_junction =
        if direction > 0.0 { outer.p_left.clone() } else { outer.p_right.clone() };
    let rho_outer = outer.p_sum.clone();
    for (a, b) in inner.p_sum.iter_mut().zip(outer.p_sum.iter()) {
        *a += *b;
    }
    if direction > 0.0 {
        inner.q_right = outer.q_right;
        inner.p_right = outer.p_right;
        inner.g_right = outer.g_right;
    } else {
        inner.q_left = outer.q_left;
        inner.p_left = outer.p_left;
        inner.g_left = outer.g_left;
    }

    if inner.valid() {
        // Full-span check plus the two junction cross-checks.
        let t1 = is_turning(&inner.p_sum, &inner.p_left, &inner.p_right, inv_mass);
        let rho_cross: Vec<f64> = rho_inner
            .iter()
            .zip(p_outer_junction.iter())
            .map(|(&a, &b)| a + b)
            .collect();
        let p_start = if direction > 0.0 { &inner.p_left } else { &inner.p_right };
        let t2 = is_turning(&rho_cross, p_start, &p_outer_junction, inv_mass);
        let rho_cross2: Vec<f64> = rho_outer
            .iter()
            .zip(p_inner_junction.iter())
            .map(|(&a, &b)| a + b)
            .collect();
        let p_end = if direction > 0.0 { &inner.p_right } else { &inner.p_left };
        let t3 = is_turning(&rho_cross2, &p_inner_junction, p_end, inv_mass);
        inner.turning = t1 || t2 || t3;
    }
    inner
}

struct Transition {
    q: Vec<f64>,
    logp: f64,
    grad: Vec<f64>,
    depth: u32,
    divergent: bool,
    accept: f64,
    energy: f64,
}

fn nuts_transition<T: Target + ?Sized>(
    current: &PhasePoint,
    step: f64,
    max_depth: usize,
    inv_mass: &[f64],
    target: &mut T,
    rng: &mut ChaCha8Rng,
) -> Transition {
    let dim = current.position.len();
    let mut state = current.clone();
    for (p, &im) in state.momentum.iter_mut().zip(inv_mass.iter()) {
        let z: f64 = rng.sample(StandardNormal);
        *p = z / im.sqrt();
    }
    let h0 = state.hamiltonian(inv_mass);
    if !h0.is_finite() {
        return Transition {
            q: current.position.clone(),
            logp: current.logp,
            grad: current.grad.clone(),
            depth: 0,
            divergent: true,
            accept: 0.0,
            energy: h0,
        };
    }

    let mut tree = Tree {
        q_left: state.position.clone(),
        p_left: state.momentum.clone(),
        g_left: state.grad.clone(),
        q_right: state.position.clone(),
        p_right: state.momentum.clone(),
        g_right: state.grad.clone(),
        q_prop: state.position.clone(),
        logp_prop: state.logp,
        g_prop: state.grad.clone(),
        log_sum_weight: 0.0,
        p_sum: state.momentum.clone(),
        n_leapfrog: 0,
        sum_accept: 0.0,
        divergent: false,
        turning: false,
    };

    let mut depth = 0u32;
    while (depth as usize) < max_depth {
        let direction = if rng.random::<bool>() { 1.0 } else { -1.0 };
        let edge = if direction > 0.0 {
            PhasePoint {
                position: tree.q_right.clone(),
                momentum: tree.p_right.clone(),
                logp: 0.0,
                grad: tree.g_right.clone(),
            }
        } else {
            PhasePoint {
                position: tree.q_left.clone(),
                momentum: tree.p_left.clone(),
                logp: 0.0,
                grad: tree.g_left.clone(),
            }
        };
        let rho_existing = tree.p_sum.clone();
        let p_existing_junction = edge.momentum.clone();

        let subtree =
            build_tree(depth as usize, &edge, direction, step, h0, inv_mass, target, rng);

        tree.n_leapfrog += subtree.n_leapfrog;
        tree.sum_accept += subtree.sum_accept;
        if !subtree.valid() {
            // An invalid subtree is discarded whole; its flags still count.
            tree.divergent |= subtree.divergent;
            break;
        }

        // Progressive sampling, biased away from the initial point.
        let p_take = (subtree.log_sum_weight - tree.log_sum_weight).exp().min(1.0);
        if rng.random::<f64>() < p_take {
            tree.q_prop = subtree.q_prop.clone();
            tree.logp_prop = subtree.logp_prop;
            tree.g_prop = subtree.g_prop.clone();
        }
        tree.log_sum_weight = log_sum_exp(tree.log_sum_weight, subtree.log_sum_weight);

        let p_subtree_junction =
            if direction > 0.0 { subtree.p_left.clone() } else { subtree.p_right.clone() };
        let rho_subtree = subtree.p_sum.clone();
        for (a, b) in tree.p_sum.iter_mut().zip(subtree.p_sum.iter()) {
            *a += *b;
        }
        if direction > 0.0 {
            tree.q_right = subtree.q_right;
            tree.p_right = subtree.p_right;
            tree.g_right = subtree.g_right;
        } else {
            tree.q_left = subtree.q_left;
            tree.p_left = subtree.p_left;
            tree.g_left = subtree.g_left;
        }
        depth += 1;

        let t1 = is_turning(&tree.p_sum, &tree.p_left, &tree.p_right, inv_mass);
        let (rho_l, rho_r, p_lj, p_rj) = if direction > 0.0 {
            (&rho_existing, &rho_subtree, &p_existing_junction, &p_subtree_junction)
        } else {
            (&rho_subtree, &rho_existing, &p_subtree_junction, &p_existing_junction)
        };
        let mut rho_cross = vec![0.0; dim];
        for i in 0..dim {
            rho_cross[i] = rho_l[i] + p_rj[i];
        }
        let t2 = is_turning(&rho_cross, &tree.p_left, p_rj, inv_mass);
        for i in 0..dim {
            rho_cross[i] = rho_r[i] + p_lj[i];
        }
        let t3 = is_turning(&rho_cross, p_lj, &tree.p_right, inv_mass);
        if t1 || t2 || t3 {
            break;
        }
    }

    let accept = if tree.n_leapfrog > 0 {
        (tree.sum_accept / tree.n_leapfrog as f64).clamp(0.0, 1.0)
    } else {
        0.0
    };
    Transition {
        q: tree.q_prop,
        logp: tree.logp_prop,
        grad: tree.g_prop,
        depth,
        divergent: tree.divergent,
        accept,
        energy: h0,
    }
}

/// Nesterov dual averaging of the log step size (standard constants).
struct DualAveraging {
    mu: f64,
    log_eps: f64,
    log_eps_bar: f64,
    h_bar: f64,
    m: f64,
    delta: f64,
}

impl DualAveraging {
    fn new(eps0: f64, delta: f64) -> Self {
        DualAveraging {
            mu: (10.0 * eps0).ln(),
            log_eps: eps0.ln(),
            log_eps_bar: 0.0,
            h_bar: 0.0,
            m: 1.0,
            delta,
        }
    }

    fn update(&mut self, accept: f64) {
        const GAMMA: f64 = 0.05;
        const T0: f64 = 10.0;
        const KAPPA: f64 = 0.75;
        let w = 1.0 / (self.m + T0);
        self.h_bar = (1.0 - w) * self.h_bar + w * (self.delta - accept);
        self.log_eps = self.mu - self.m.sqrt() / GAMMA * self.h_bar;
        let eta = self.m.powf(-KAPPA);
        self.log_eps_bar = eta * self.log_eps + (1.0 - eta) * self.log_eps_bar;
        self.m += 1.0;
    }

    fn current(&self) -> f64 {
        self.log_eps.exp()
    }

    fn adapted(&self) -> f64 {
        self.log_eps_bar.exp()
    }
}

/// Running mean/variance accumulator for mass-matrix estimation.
struct Welford {
    n: f64,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Welford {
    fn new(dim: usize) -> Self {
        Welford { n: 0.0, mean: vec![0.0; dim], m2: vec![0.0; dim] }
    }

    fn add(&mut self, x: &[f64]) {
        self.n += 1.0;
        for i in 0..x.len() {
            let d = x[i] - self.mean[i];
            self.mean[i] += d / self.n;
            self.m2[i] += d * (x[i] - self.mean[i]);
        }
    }

    /// Regularized variance estimate, shrunk slightly toward unit scale.
    fn regularized_variance(&self) -> Option<Vec<f64>> {
        if self.n < 2.0 {
            return None;
        }
        let w = self.n / (self.n + 5.0);
        Some(
            self.m2
                .iter()
                .map(|&m2| {
                    let var = m2 / (self.n - 1.0);
                    (w * var + 1e-3 * (1.0 - w)).max(1e-10)
                })
                .collect(),
        )
    }
}

/// Heuristic initial step size: double or halve until one leapfrog step
/// crosses 50% acceptance.
fn find_reasonable_step_size<T: Target + ?Sized>(
    q: &[f64],
    logp: f64,
    grad: &[f64],
    inv_mass: &[f64],
    target: &mut T,
    rng: &mut ChaCha8Rng,
) -> f64 {
    let mut state = PhasePoint {
        position: q.to_vec(),
        momentum: vec![0.0; q.len()],
        logp,
        grad: grad.to_vec(),
    };
    for (p, &im) in state.momentum.iter_mut().zip(inv_mass.iter()) {
        let z: f64 = rng.sample(StandardNormal);
        *p = z / im.sqrt();
    }
    let h0 = state.hamiltonian(inv_mass);
    let mut eps = 1.0f64;
    let ratio_at = |eps: f64, target: &mut T| -> f64 {
        let mut s = state.clone();
        if !leapfrog(&mut s, eps, inv_mass, target) {
            return 0.0;
        }
        let h1 = s.hamiltonian(inv_mass);
        if !h1.is_finite() {
            return 0.0;
        }
        (h0 - h1).exp()
    };
    let r0 = ratio_at(eps, target);
    let dir: f64 = if r0 > 0.5 { 1.0 } else { -1.0 };
    for _ in 0..100 {
        let r = ratio_at(eps, target);
        let keep_going = if dir > 0.0 { r > 0.5 } else { r < 0.5 };
        if !keep_going {
            break;
        }
        eps *= 2.0f64.powf(dir);
        if !(1e-10..=1e10).contains(&eps) {
            break;
        }
    }
    eps.clamp(1e-10, 1e10)
}

/// Ends (exclusive iteration indices) of the doubling slow windows that feed
/// the mass-matrix estimate.
fn slow_window_ends(n_warmup: usize) -> Vec<usize> {
    let fast1 = (0.15 * n_warmup as f64).floor() as usize;
    let term = (0.10 * n_warmup as f64).floor() as usize;
    if n_warmup < 40 || n_warmup <= fast1 + term + 10 {
        return Vec::new();
    }
    let slow_end = n_warmup - term;
    let mut ends = Vec::new();
    let mut start = fast1;
    let mut width = 25usize;
    while start < slow_end {
        let mut end = start + width;
        // Absorb a too-small trailing window into this one.
        if end > slow_end || slow_end - end < 2 * width {
            end = slow_end;
        }
        ends.push(end);
        start = end;
        width *= 2;
    }
    ends
}

struct ChainOutput {
    quantities: Vec<f64>,
    iterations: Vec<u32>,
    divergent: Vec<bool>,
    tree_depth: Vec<u32>,
    step_size: Vec<f64>,
    energy: Vec<f64>,
}

fn run_chain<T: Target>(
    mut target: T,
    cfg: &SamplerConfig,
    chain: usize,
    n_quantities: usize,
) -> Result<ChainOutput> {
    let dim = target.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(chain as u64 + 1);

    // Random initialization in a box, retried until the density and gradient
    // are finite.
    let mut grad = vec![0.0; dim];
    let mut q = vec![0.0; dim];
    let mut logp = f64::NEG_INFINITY;
    let mut found = false;
    for _ in 0..100 {
        for v in q.iter_mut() {
            *v = rng.random_range(-cfg.init_radius..cfg.init_radius);
        }
        logp = target.log_density_grad(&q, &mut grad);
        if logp.is_finite() && grad.iter().all(|g| g.is_finite()) {
            found = true;
            break;
        }
    }
    if !found {
        return Err(Error::Init(format!(
            "chain {chain}: no finite starting point in 100 draws within radius {}",
            cfg.init_radius
        )));
    }

    let mut state = PhasePoint { position: q, momentum: vec![0.0; dim], logp, grad };
    let mut inv_mass = vec![1.0; dim];

    let eps0 = find_reasonable_step_size(
        &state.position,
        state.logp,
        &state.grad,
        &inv_mass,
        &mut target,
        &mut rng,
    );
    let mut da = DualAveraging::new(eps0, cfg.target_accept);
    let window_ends = slow_window_ends(cfg.n_warmup);
    let mut welford = Welford::new(dim);
    let mut window = 0usize;
    let fast1 = (0.15 * cfg.n_warmup as f64).floor() as usize;

    let progress_every = ((cfg.n_warmup + cfg.n_iterations) / 10).max(1);
    let mut warmup_divergences = 0usize;
    for it in 0..cfg.n_warmup {
        let eps = da.current();
        let tr = nuts_transition(&state, eps, cfg.max_tree_depth, &inv_mass, &mut target, &mut rng);
        state.position = tr.q;
        state.logp = tr.logp;
        state.grad = tr.grad;
        if tr.divergent {
            warmup_divergences += 1;
        }
        da.update(tr.accept);
        let in_slow = !window_ends.is_empty() && it >= fast1 && it < *window_ends.last().unwrap();
        if in_slow {
            welford.add(&state.position);
        }
        if window < window_ends.len() && it + 1 == window_ends[window] {
            if let Some(var) = welford.regularized_variance() {
                inv_mass = var;
            }
            welford = Welford::new(dim);
            window += 1;
            // Restart the step-size search under the new metric.
            let eps_new = find_reasonable_step_size(
                &state.position,
                state.logp,
                &state.grad,
                &inv_mass,
                &mut target,
                &mut rng,
            );
            da = DualAveraging::new(eps_new, cfg.target_accept);
        }
        if cfg.progress && (it + 1) % progress_every == 0 {
            eprintln!("chain {chain}: warmup {}/{}", it + 1, cfg.n_warmup);
        }
    }
    if cfg.n_warmup >= 20 && warmup_divergences == cfg.n_warmup {
        return Err(Error::Adaptation(format!(
            "chain {chain}: every warmup iteration diverged"
        )));
    }
    let eps = if cfg.n_warmup > 0 { da.adapted() } else { da.current() };
    if !eps.is_finite() || eps <= 0.0 {
        return Err(Error::Adaptation(format!(
            "chain {chain}: step-size adaptation produced {eps}"
        )));
    }

    let retained = cfg.retained_per_chain();
    let mut out = ChainOutput {
        quantities: Vec::with_capacity(retained * n_quantities),
        iterations: Vec::with_capacity(retained),
        divergent: Vec::with_capacity(retained),
        tree_depth: Vec::with_capacity(retained),
        step_size: Vec::with_capacity(retained),
        energy: Vec::with_capacity(retained),
    };
    let mut scratch = Vec::with_capacity(n_quantities);
    for it in 0..cfg.n_iterations {
        let tr = nuts_transition(&state, eps, cfg.max_tree_depth, &inv_mass, &mut target, &mut rng);
        state.position = tr.q;
        state.logp = tr.logp;
        state.grad = tr.grad;
        if (it + 1) % cfg.thin == 0 {
            scratch.clear();
            target.quantities(&state.position, &mut scratch);
            debug_assert_eq!(scratch.len(), n_quantities);
            out.quantities.extend_from_slice(&scratch);
            out.iterations.push((it + 1) as u32);
            out.divergent.push(tr.divergent);
            out.tree_depth.push(tr.depth);
            out.step_size.push(eps);
            out.energy.push(tr.energy);
        }
        if cfg.progress && (cfg.n_warmup + it + 1) % progress_every == 0 {
            eprintln!("chain {chain}: sampling {}/{}", it + 1, cfg.n_iterations);
        }
    }
    Ok(out)
}

/// Run NUTS over `cfg.n_chains` independent chains and collect the retained
/// draws. The target is cloned once per chain; chains run in parallel and
/// each consumes its own substream of the seed.
pub fn nuts_run<T: Target + Clone + Send>(target: &T, cfg: &SamplerConfig) -> Result<DrawsMatrix> {
    cfg.validate()?;
    let names = target.quantity_names();
    let n_quantities = names.len();

    let results: Vec<Result<ChainOutput>> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..cfg.n_chains)
            .map(|chain| {
                let t = target.clone();
                scope.spawn(move || run_chain(t, cfg, chain, n_quantities))
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("chain thread panicked")).collect()
    });

    let retained = cfg.retained_per_chain();
    let mut m = DrawsMatrix {
        names,
        draws: Vec::with_capacity(cfg.n_chains * retained * n_quantities),
        chain_id: Vec::with_capacity(cfg.n_chains * retained),
        iteration: Vec::with_capacity(cfg.n_chains * retained),
        divergent: Vec::with_capacity(cfg.n_chains * retained),
        tree_depth: Vec::with_capacity(cfg.n_chains * retained),
        step_size: Vec::with_capacity(cfg.n_chains * retained),
        energy: Vec::with_capacity(cfg.n_chains * retained),
    };
    for (chain, res) in results.into_iter().enumerate() {
        let out = res?;
        m.draws.extend_from_slice(&out.quantities);
        m.chain_id.extend(std::iter::repeat(chain as u32).take(out.iterations.len()));
        m.iteration.extend_from_slice(&out.iterations);
        m.divergent.extend_from_slice(&out.divergent);
        m.tree_depth.extend_from_slice(&out.tree_depth);
        m.step_size.extend_from_slice(&out.step_size);
        m.energy.extend_from_slice(&out.energy);
    }
    Ok(m)
}

#[cfg(test)]
pub(crate) mod test_targets {
    use super::Target;

    /// Independent Gaussian target with per-coordinate standard deviations.
    #[derive(Clone)]
    pub struct GaussianTarget {
        pub sd: Vec<f64>,
    }

    impl Target for GaussianTarget {
        fn dim(&self) -> usize {
            self.sd.len()
        }

        fn log_density_grad(&mut self, u: &[f64], grad: &mut [f64]) -> f64 {
            let mut lp = 0.0;
            for i in 0..u.len() {
                let v = self.sd[i] * self.sd[i];
                lp -= 0.5 * u[i] * u[i] / v;
                grad[i] = -u[i] / v;
            }
            lp
        }
    }
}
