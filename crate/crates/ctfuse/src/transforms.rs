//! Bijections between constrained model parameters and an unconstrained real
//! vector, with log-Jacobian corrections, so the sampler can work on all of
//! R^d.
//!
//! Positive quantities use the exponential map. Correlation factors use the
//! row-wise spherical construction: unconstrained entries pass through tanh
//! to canonical partial correlations, and each row is completed to unit norm
//! with a positive diagonal entry.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConstraintKind {
    /// Real scalars, mapped through unchanged.
    Identity,
    /// A single positive scalar via exp.
    Positive,
    /// A vector of positive entries via elementwise exp.
    PositiveVector,
    /// Unit-row-norm lower-triangular correlation factor of the given order.
    CorrFactor,
}

#[derive(Debug, Clone)]
pub struct Block {
    pub name: String,
    pub kind: ConstraintKind,
    /// Scalar count for identity/positive blocks; matrix order K for factors.
    pub shape: usize,
}

impl Block {
    pub fn new(name: &str, kind: ConstraintKind, shape: usize) -> Self {
        Block { name: name.to_string(), kind, shape }
    }

    /// Number of unconstrained coordinates the block consumes.
    pub fn unconstrained_len(&self) -> usize {
        match self.kind {
            ConstraintKind::Identity | ConstraintKind::PositiveVector => self.shape,
            ConstraintKind::Positive => 1,
            ConstraintKind::CorrFactor => self.shape * (self.shape - 1) / 2,
        }
    }

    /// Number of constrained values the block produces (factors are stored
    /// packed lower-triangular including the diagonal).
    pub fn constrained_len(&self) -> usize {
        match self.kind {
            ConstraintKind::Identity | ConstraintKind::PositiveVector => self.shape,
            ConstraintKind::Positive => 1,
            ConstraintKind::CorrFactor => self.shape * (self.shape + 1) / 2,
        }
    }
}

/// Offsets of one block inside the flat unconstrained / constrained vectors.
#[derive(Debug, Clone, Copy)]
pub struct BlockSpan {
    pub u_offset: usize,
    pub u_len: usize,
    pub c_offset: usize,
    pub c_len: usize,
}

#[derive(Debug, Clone)]
pub struct TransformSpec {
    blocks: Vec<Block>,
    spans: Vec<BlockSpan>,
    u_dim: usize,
    c_dim: usize,
}

impl TransformSpec {
    pub fn new(blocks: Vec<Block>) -> Result<Self> {
        let mut seen = std::collections::HashSet::new();
        for b in &blocks {
            if !seen.insert(b.name.clone()) {
                return Err(Error::Dimension(format!("duplicate block name {}", b.name)));
            }
            if b.shape == 0 {
                return Err(Error::Dimension(format!("block {} has zero shape", b.name)));
            }
        }
        let mut spans = Vec::with_capacity(blocks.len());
        let mut u = 0;
        let mut c = 0;
        for b in &blocks {
            let span = BlockSpan {
                u_offset: u,
                u_len: b.unconstrained_len(),
                c_offset: c,
                c_len: b.constrained_len(),
            };
            u += span.u_len;
            c += span.c_len;
            spans.push(span);
        }
        Ok(TransformSpec { blocks, spans, u_dim: u, c_dim: c })
    }

    pub fn unconstrained_dim(&self) -> usize {
        self.u_dim
    }

    pub fn constrained_dim(&self) -> usize {
        self.c_dim
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn span(&self, name: &str) -> Option<BlockSpan> {
        self.blocks
            .iter()
            .position(|b| b.name == name)
            .map(|i| self.spans[i])
    }

    /// Map the unconstrained vector to constrained values, returning the
    /// accumulated log absolute Jacobian determinant of the map.
    pub fn constrain(&self, u: &[f64], theta: &mut [f64]) -> Result<f64> {
        if u.len() != self.u_dim {
            return Err(Error::Dimension(format!(
                "expected unconstrained dimension {}, got {}",
                self.u_dim,
                u.len()
            )));
        }
        if theta.len() != self.c_dim {
            return Err(Error::Dimension(format!(
                "expected constrained dimension {}, got {}",
                self.c_dim,
                theta.len()
            )));
        }
        let mut log_jac = 0.0;
        for (b, s) in self.blocks.iter().zip(&self.spans) {
            let uu = &u[s.u_offset..s.u_offset + s.u_len];
            let tt = &mut theta[s.c_offset..s.c_offset + s.c_len];
            match b.kind {
                ConstraintKind::Identity => tt.copy_from_slice(uu),
                ConstraintKind::Positive | ConstraintKind::PositiveVector => {
                    for (t, &x) in tt.iter_mut().zip(uu.iter()) {
                        *t = x.exp();
                        log_jac += x;
                    }
                }
                ConstraintKind::CorrFactor => {
                    log_jac += corr_factor_constrain(b.shape, uu, tt);
                }
            }
        }
        Ok(log_jac)
    }

    /// Exact inverse of `constrain`, without the Jacobian.
    pub fn unconstrain(&self, theta: &[f64], u: &mut [f64]) -> Result<()> {
        if theta.len() != self.c_dim || u.len() != self.u_dim {
            return Err(Error::Dimension(format!(
                "expected dimensions ({}, {}), got ({}, {})",
                self.c_dim,
                self.u_dim,
                theta.len(),
                u.len()
            )));
        }
        for (b, s) in self.blocks.iter().zip(&self.spans) {
            let tt = &theta[s.c_offset..s.c_offset + s.c_len];
            let uu = &mut u[s.u_offset..s.u_offset + s.u_len];
            match b.kind {
                ConstraintKind::Identity => uu.copy_from_slice(tt),
                ConstraintKind::Positive | ConstraintKind::PositiveVector => {
                    for (x, &t) in uu.iter_mut().zip(tt.iter()) {
                        if !(t > 0.0) || !t.is_finite() {
                            return Err(Error::Domain(format!(
                                "block {} requires positive finite values, got {t}",
                                b.name
                            )));
                        }
                        *x = t.ln();
                    }
                }
                ConstraintKind::CorrFactor => {
                    corr_factor_unconstrain(b.shape, tt, uu).map_err(|e| match e {
                        Error::Domain(msg) => Error::Domain(format!("block {}: {msg}", b.name)),
                        other => other,
                    })?;
                }
            }
        }
        Ok(())
    }

    /// Pull a constrained-space gradient back to unconstrained space and add
    /// the gradient of the log-Jacobian:
    /// `g_u = J^T g_theta + d(log_jac)/du`.
    ///
    /// `theta` must be the image of `u` under `constrain`.
    pub fn pullback(&self, u: &[f64], theta: &[f64], g_theta: &[f64], g_u: &mut [f64]) {
        debug_assert_eq!(u.len(), self.u_dim);
        debug_assert_eq!(theta.len(), self.c_dim);
        debug_assert_eq!(g_theta.len(), self.c_dim);
        debug_assert_eq!(g_u.len(), self.u_dim);
        for (b, s) in self.blocks.iter().zip(&self.spans) {
            let gu = &mut g_u[s.u_offset..s.u_offset + s.u_len];
            let gt = &g_theta[s.c_offset..s.c_offset + s.c_len];
            match b.kind {
                ConstraintKind::Identity => gu.copy_from_slice(gt),
                ConstraintKind::Positive | ConstraintKind::PositiveVector => {
                    let tt = &theta[s.c_offset..s.c_offset + s.c_len];
                    for i in 0..gu.len() {
                        gu[i] = tt[i] * gt[i] + 1.0;
                    }
                }
                ConstraintKind::CorrFactor => {
                    corr_factor_pullback(b.shape, &u[s.u_offset..s.u_offset + s.u_len], gt, gu);
                }
            }
        }
    }
}

/// Row-wise spherical construction of a unit-row-norm lower-triangular factor
/// from K(K-1)/2 unconstrained entries. Writes the packed factor (including
/// the diagonal) and returns the log Jacobian of the map onto the strictly
/// lower-triangular entries.
fn corr_factor_constrain(k: usize, u: &[f64], packed: &mut [f64]) -> f64 {
    let mut log_jac = 0.0;
    let mut ui = 0;
    let mut ci = 0;
    for row in 0..k {
        // s carries the remaining squared norm of the row.
        let mut s = 1.0f64;
        for _ in 0..row {
            let z = u[ui].tanh();
            let l = z * s.sqrt();
            packed[ci] = l;
            // tanh derivative plus the sqrt(s) stretch of this coordinate.
            log_jac += (1.0 - z * z).ln() + 0.5 * s.ln();
            s *= 1.0 - z * z;
            ui += 1;
            ci += 1;
        }
        packed[ci] = s.sqrt();
        ci += 1;
    }
    log_jac
}

fn corr_factor_unconstrain(k: usize, packed: &[f64], u: &mut [f64]) -> Result<()> {
    let mut ui = 0;
    let mut ci = 0;
    for row in 0..k {
        let mut s = 1.0f64;
        for col in 0..row {
            let l = packed[ci];
            let denom = s.sqrt();
            let z = l / denom;
            if !z.is_finite() || z.abs() >= 1.0 {
                return Err(Error::Domain(format!(
                    "entry ({},{}) incompatible with a unit-norm row",
                    row + 1,
                    col + 1
                )));
            }
            u[ui] = z.atanh();
            s *= 1.0 - z * z;
            ui += 1;
            ci += 1;
        }
        let diag = packed[ci];
        if !(diag > 0.0) {
            return Err(Error::Domain(format!(
                "diagonal entry {} must be positive, got {diag}",
                row + 1
            )));
        }
        if (diag * diag - s).abs() > 1e-8 {
            return Err(Error::Domain(format!(
                "row {} does not have unit norm (residual {})",
                row + 1,
                diag * diag - s
            )));
        }
        ci += 1;
    }
    Ok(())
}

/// Reverse pass for the spherical construction. `g_packed` holds adjoints of
/// the packed factor entries (diagonal included); adds nothing to them. The
/// output also contains the gradient of the constrain log-Jacobian.
fn corr_factor_pullback(k: usize, u: &[f64], g_packed: &[f64], g_u: &mut [f64]) {
    let mut ui = 0;
    let mut ci = 0;
    let mut z_row = Vec::with_capacity(k);
    let mut s_row = Vec::with_capacity(k);
    let mut l_row = Vec::with_capacity(k);
    for row in 0..k {
        z_row.clear();
        s_row.clear();
        l_row.clear();
        let m = row;
        let mut s = 1.0f64;
        for j in 0..m {
            let z = u[ui + j].tanh();
            s_row.push(s);
            z_row.push(z);
            l_row.push(z * s.sqrt());
            s *= 1.0 - z * z;
        }
        let diag = s.sqrt();
        // suffix = sum_{l > j} gL_l * L_l + gD * diag
        let mut suffix = g_packed[ci + m] * diag;
        for j in (0..m).rev() {
            let z = z_row[j];
            let g_l = g_packed[ci + j];
            g_u[ui + j] = (1.0 - z * z) * g_l * s_row[j].sqrt()
                - z * suffix
                - (m - j + 1) as f64 * z;
            suffix += g_l * l_row[j];
        }
        ui += m;
        ci += m + 1;
    }
}
