//! Refitting block penalties phi(z, zhat), their convex conjugates and
//! closed-form proximal operators, plus the l12 building blocks (ball
//! projection, block soft thresholding) and blockwise Bregman divergences.
//!
//! Six penalties couple a candidate block z to the anchor zhat taken from
//! the biased solution: hard/quadratic/soft variants of orientation
//! (insensitive to sign) and direction (sign-aware) preservation. The soft
//! direction penalty is lambda * ||z|| * (1 - cos(z, zhat)).

use crate::error::{RefitError, Result};
use crate::field::{dot_slices, norm_slice, BlockField};
use crate::solvers::SupportMask;

/// Numeric guard for the |cos| = 1 indicator sets.
const COS_TOL: f64 = 1e-12;
/// Guard against vanishing denominators in prox formulas.
const TINY: f64 = 1e-30;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PenaltyTag {
    Ho,
    Hd,
    Qo,
    Qd,
    So,
    Sd,
}

impl PenaltyTag {
    pub const ALL: [PenaltyTag; 6] =
        [PenaltyTag::Ho, PenaltyTag::Hd, PenaltyTag::Qo, PenaltyTag::Qd, PenaltyTag::So, PenaltyTag::Sd];

    pub fn name(&self) -> &'static str {
        match self {
            PenaltyTag::Ho => "HO",
            PenaltyTag::Hd => "HD",
            PenaltyTag::Qo => "QO",
            PenaltyTag::Qd => "QD",
            PenaltyTag::So => "SO",
            PenaltyTag::Sd => "SD",
        }
    }

    pub fn parse(s: &str) -> Option<PenaltyTag> {
        match s.to_ascii_uppercase().as_str() {
            "HO" => Some(PenaltyTag::Ho),
            "HD" => Some(PenaltyTag::Hd),
            "QO" => Some(PenaltyTag::Qo),
            "QD" => Some(PenaltyTag::Qd),
            "SO" => Some(PenaltyTag::So),
            "SD" => Some(PenaltyTag::Sd),
            _ => None,
        }
    }

    /// Penalties whose conjugate is an indicator; their prox does not
    /// depend on the prox scale.
    pub fn conjugate_is_indicator(&self) -> bool {
        matches!(self, PenaltyTag::Ho | PenaltyTag::Hd | PenaltyTag::So | PenaltyTag::Sd)
    }

    /// Whether the prox needs the anchor amplitude (not just its direction).
    pub fn needs_anchor_norm(&self) -> bool {
        matches!(self, PenaltyTag::Qo | PenaltyTag::Qd)
    }
}

impl std::fmt::Display for PenaltyTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BlockPenaltyKind {
    pub tag: PenaltyTag,
    pub lambda: f64,
}

impl BlockPenaltyKind {
    pub fn new(tag: PenaltyTag, lambda: f64) -> Result<Self> {
        if !lambda.is_finite() || lambda <= 0.0 {
            return Err(RefitError::InvalidParams(format!("penalty weight must be positive, got {lambda}")));
        }
        Ok(BlockPenaltyKind { tag, lambda })
    }
}

/// Anchor block: unit direction and amplitude of zhat.
#[derive(Clone, Debug, PartialEq)]
pub struct AnchorBlock {
    pub direction: Vec<f64>,
    pub norm: f64,
}

impl AnchorBlock {
    pub fn from_block(zhat: &[f64]) -> Result<Self> {
        let n = norm_slice(zhat);
        if n == 0.0 {
            return Err(RefitError::AnchorRequired("anchor"));
        }
        Ok(AnchorBlock { direction: zhat.iter().map(|v| v / n).collect(), norm: n })
    }

    pub fn from_parts(direction: Vec<f64>, norm: f64) -> Result<Self> {
        let dn = norm_slice(&direction);
        if (dn - 1.0).abs() > 1e-12 {
            return Err(RefitError::InvalidParams(format!("anchor direction must be unit, norm {dn}")));
        }
        if norm < 0.0 {
            return Err(RefitError::InvalidParams(format!("anchor norm must be non-negative, got {norm}")));
        }
        Ok(AnchorBlock { direction, norm })
    }
}

/// cos(z, zhat) per the convention that null vectors are aligned.
pub fn cos_angle(z: &[f64], zhat: &[f64]) -> f64 {
    let nz = norm_slice(z);
    let nh = norm_slice(zhat);
    if nz == 0.0 || nh == 0.0 {
        return 1.0;
    }
    (dot_slices(z, zhat) / (nz * nh)).clamp(-1.0, 1.0)
}

/// Orthogonal projection of z onto Span(zhat).
pub fn proj_span(z: &[f64], zhat: &[f64]) -> Result<Vec<f64>> {
    let nh = norm_slice(zhat);
    if nh == 0.0 {
        return Err(RefitError::AnchorRequired("proj_span"));
    }
    let coeff = dot_slices(z, zhat) / (nh * nh);
    Ok(zhat.iter().map(|v| coeff * v).collect())
}

/// Squared norm of the component of z orthogonal to zhat. Equals
/// |z|^2 (1 - cos^2) but stays exact for aligned blocks.
fn perp_norm_sq(z: &[f64], zhat: &[f64]) -> f64 {
    let nh2 = dot_slices(zhat, zhat).max(TINY);
    let coeff = dot_slices(z, zhat) / nh2;
    let mut acc = 0.0;
    for (zi, hi) in z.iter().zip(zhat) {
        let p = zi - coeff * hi;
        acc += p * p;
    }
    acc
}

/// Evaluates phi(z, zhat); infinite for the hard constraints outside their
/// sets. Zero blocks always evaluate to zero.
pub fn eval_penalty(kind: &BlockPenaltyKind, z: &[f64], zhat: &[f64]) -> f64 {
    let nz = norm_slice(z);
    if nz == 0.0 {
        return 0.0;
    }
    let lambda = kind.lambda;
    match kind.tag {
        PenaltyTag::Ho => {
            let c = cos_angle(z, zhat);
            if 1.0 - c.abs() <= COS_TOL {
                0.0
            } else {
                f64::INFINITY
            }
        }
        PenaltyTag::Hd => {
            let c = cos_angle(z, zhat);
            if 1.0 - c <= COS_TOL {
                0.0
            } else {
                f64::INFINITY
            }
        }
        PenaltyTag::Qo => {
            let nh = norm_slice(zhat).max(TINY);
            lambda * perp_norm_sq(z, zhat) / (2.0 * nh)
        }
        PenaltyTag::Qd => {
            let nh = norm_slice(zhat).max(TINY);
            if dot_slices(z, zhat) >= 0.0 {
                lambda * perp_norm_sq(z, zhat) / (2.0 * nh)
            } else {
                lambda * nz * nz / (2.0 * nh)
            }
        }
        PenaltyTag::So => lambda * perp_norm_sq(z, zhat).sqrt(),
        PenaltyTag::Sd => {
            let nh = norm_slice(zhat).max(TINY);
            lambda * (nz - dot_slices(z, zhat) / nh)
        }
    }
}

/// Evaluates the convex conjugate phi*(xi, zhat) in its first argument.
/// Equality constraints carry a small absolute tolerance so points built on
/// the constraint sets are recognized.
pub fn eval_conjugate(kind: &BlockPenaltyKind, xi: &[f64], zhat: &[f64]) -> f64 {
    let lambda = kind.lambda;
    let nh = norm_slice(zhat).max(TINY);
    let up = dot_slices(xi, zhat) / nh;
    let nxi2 = dot_slices(xi, xi);
    let atol = 1e-9 * (1.0 + nxi2.sqrt());
    match kind.tag {
        PenaltyTag::Ho => {
            if up.abs() <= atol {
                0.0
            } else {
                f64::INFINITY
            }
        }
        PenaltyTag::Hd => {
            if up <= atol {
                0.0
            } else {
                f64::INFINITY
            }
        }
        PenaltyTag::Qo => {
            if up.abs() <= atol {
                let perp2 = (nxi2 - up * up).max(0.0);
                nh * perp2 / (2.0 * lambda)
            } else {
                f64::INFINITY
            }
        }
        PenaltyTag::Qd => {
            if up <= atol {
                nh * nxi2 / (2.0 * lambda)
            } else {
                f64::INFINITY
            }
        }
        PenaltyTag::So => {
            let perp = (nxi2 - up * up).max(0.0).sqrt();
            if up.abs() <= atol && perp <= lambda + atol {
                0.0
            } else {
                f64::INFINITY
            }
        }
        PenaltyTag::Sd => {
            let mut d2 = 0.0;
            for (x, h) in xi.iter().zip(zhat) {
                let v = x + lambda * h / nh;
                d2 += v * v;
            }
            if d2.sqrt() <= lambda + atol {
                0.0
            } else {
                f64::INFINITY
            }
        }
    }
}

/// Blockwise closed form of prox_{kappa phi*}; `dir` is the unit anchor
/// direction and `anchor_norm` the anchor amplitude (used by QO/QD only).
pub(crate) fn prox_conj_block(
    kind: &BlockPenaltyKind,
    z0: &[f64],
    dir: &[f64],
    anchor_norm: f64,
    kappa: f64,
    out: &mut [f64],
) {
    let lambda = kind.lambda;
    match kind.tag {
        PenaltyTag::Ho => {
            let up = dot_slices(z0, dir);
            for ((o, z), d) in out.iter_mut().zip(z0).zip(dir) {
                *o = z - up * d;
            }
        }
        PenaltyTag::Hd => {
            let up = dot_slices(z0, dir);
            if up >= 0.0 {
                for ((o, z), d) in out.iter_mut().zip(z0).zip(dir) {
                    *o = z - up * d;
                }
            } else {
                out.copy_from_slice(z0);
            }
        }
        PenaltyTag::Qo => {
            let s = lambda / (lambda + kappa * anchor_norm).max(TINY);
            let up = dot_slices(z0, dir);
            for ((o, z), d) in out.iter_mut().zip(z0).zip(dir) {
                *o = s * (z - up * d);
            }
        }
        PenaltyTag::Qd => {
            let s = lambda / (lambda + kappa * anchor_norm).max(TINY);
            let up = dot_slices(z0, dir);
            if up >= 0.0 {
                for ((o, z), d) in out.iter_mut().zip(z0).zip(dir) {
                    *o = s * (z - up * d);
                }
            } else {
                for (o, z) in out.iter_mut().zip(z0) {
                    *o = s * z;
                }
            }
        }
        PenaltyTag::So => {
            let up = dot_slices(z0, dir);
            let mut wn2 = 0.0;
            for (z, d) in z0.iter().zip(dir) {
                let w = z - up * d;
                wn2 += w * w;
            }
            let scale = lambda / lambda.max(wn2.sqrt());
            for ((o, z), d) in out.iter_mut().zip(z0).zip(dir) {
                *o = scale * (z - up * d);
            }
        }
        PenaltyTag::Sd => {
            // Projection onto the l2 ball of radius lambda centered at
            // -lambda * dir.
            let mut wn2 = 0.0;
            for (z, d) in z0.iter().zip(dir) {
                let w = z + lambda * d;
                wn2 += w * w;
            }
            let scale = lambda / lambda.max(wn2.sqrt());
            for ((o, z), d) in out.iter_mut().zip(z0).zip(dir) {
                *o = scale * (z + lambda * d) - lambda * d;
            }
        }
    }
}

/// prox_{kappa phi*}(z0, zhat) from the anchor block.
pub fn prox_conj(kind: &BlockPenaltyKind, z0: &[f64], anchor: &AnchorBlock, kappa: f64) -> Result<Vec<f64>> {
    if kind.tag.needs_anchor_norm() && anchor.norm <= 0.0 {
        return Err(RefitError::AnchorRequired(kind.tag.name()));
    }
    if z0.len() != anchor.direction.len() {
        return Err(RefitError::ShapeMismatch {
            context: "prox_conj",
            expected: format!("block of size {}", anchor.direction.len()),
            got: format!("{}", z0.len()),
        });
    }
    let mut out = vec![0.0; z0.len()];
    prox_conj_block(kind, z0, &anchor.direction, anchor.norm, kappa, &mut out);
    Ok(out)
}

/// prox_{tau phi}(zeta0, zhat) through the Moreau decomposition
/// zeta0 - tau * prox_{phi*/tau}(zeta0/tau).
pub fn prox_primal(kind: &BlockPenaltyKind, zeta0: &[f64], anchor: &AnchorBlock, tau: f64) -> Result<Vec<f64>> {
    if !tau.is_finite() || tau <= 0.0 {
        return Err(RefitError::InvalidParams(format!("prox_primal needs tau > 0, got {tau}")));
    }
    let scaled: Vec<f64> = zeta0.iter().map(|v| v / tau).collect();
    let conj = prox_conj(kind, &scaled, anchor, 1.0 / tau)?;
    Ok(zeta0.iter().zip(&conj).map(|(z, c)| z - tau * c).collect())
}

/// Blockwise orthogonal projection onto the l2 ball of radius lambda.
pub fn ball_project_into(xi: &BlockField, lambda: f64, out: &mut BlockField) {
    debug_assert!(xi.same_shape(out));
    let b = xi.block_size;
    for (zi, oi) in xi.values.chunks_exact(b).zip(out.values.chunks_exact_mut(b)) {
        let n = norm_slice(zi);
        let scale = lambda / lambda.max(n);
        for (o, z) in oi.iter_mut().zip(zi) {
            *o = scale * z;
        }
    }
}

pub fn ball_project(xi: &BlockField, lambda: f64) -> BlockField {
    let mut out = BlockField::zeros(xi.blocks, xi.block_size);
    ball_project_into(xi, lambda, &mut out);
    out
}

/// Block soft thresholding: zero blocks with norm at most lambda, shrink
/// the rest radially by lambda.
pub fn block_soft_threshold_into(zeta: &BlockField, lambda: f64, out: &mut BlockField) {
    debug_assert!(zeta.same_shape(out));
    let b = zeta.block_size;
    for (zi, oi) in zeta.values.chunks_exact(b).zip(out.values.chunks_exact_mut(b)) {
        let n = norm_slice(zi);
        if n <= lambda {
            oi.fill(0.0);
        } else {
            let scale = 1.0 - lambda / n;
            for (o, z) in oi.iter_mut().zip(zi) {
                *o = scale * z;
            }
        }
    }
}

pub fn block_soft_threshold(zeta: &BlockField, lambda: f64) -> BlockField {
    let mut out = BlockField::zeros(zeta.blocks, zeta.block_size);
    block_soft_threshold_into(zeta, lambda, &mut out);
    out
}

/// Bregman divergence of the block l2 norm at subgradient eta:
/// ||z|| - <eta, z> >= 0 whenever ||eta|| <= 1.
pub fn bregman_block(z: &[f64], eta: &[f64]) -> Result<f64> {
    let en = norm_slice(eta);
    if en > 1.0 + 1e-12 {
        return Err(RefitError::InvalidParams(format!("subgradient norm {en} exceeds 1")));
    }
    Ok(norm_slice(z) - dot_slices(eta, z))
}

/// Minimal-norm subgradient of the l12 norm at zhat: normalized blocks on
/// the support, zero elsewhere.
pub fn min_norm_subgradient(zhat: &BlockField, support: &SupportMask) -> Result<BlockField> {
    if support.len() != zhat.blocks {
        return Err(RefitError::ShapeMismatch {
            context: "min_norm_subgradient",
            expected: format!("{} mask entries", zhat.blocks),
            got: format!("{}", support.len()),
        });
    }
    let mut out = BlockField::zeros(zhat.blocks, zhat.block_size);
    for i in 0..zhat.blocks {
        if support.contains(i) {
            let n = zhat.block_norm(i);
            if n == 0.0 {
                return Err(RefitError::InvalidParams(format!(
                    "support marks block {i} but the anchor block is zero"
                )));
            }
            for (o, z) in out.block_mut(i).iter_mut().zip(zhat.block(i)) {
                *o = z / n;
            }
        }
    }
    Ok(out)
}

/// Samples phi over amplitude/angle polar coordinates around zhat = (1, 0):
/// rows (theta, amplitude, value) with theta in [-pi, pi] (181 samples) and
/// amplitude in [0, 3] (61 samples).
pub fn penalty_landscape(kind: &BlockPenaltyKind) -> Vec<(f64, f64, f64)> {
    let zhat = [1.0, 0.0];
    let mut rows = Vec::with_capacity(181 * 61);
    for ti in 0..181 {
        let theta = -std::f64::consts::PI + 2.0 * std::f64::consts::PI * ti as f64 / 180.0;
        for ai in 0..61 {
            let a = 3.0 * ai as f64 / 60.0;
            let z = [a * theta.cos(), a * theta.sin()];
            rows.push((theta, a, eval_penalty(kind, &z, &zhat)));
        }
    }
    rows
}
