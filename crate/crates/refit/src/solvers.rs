//! Joint solvers producing the biased solution and its refitting in one
//! pass, with online support and direction identification from the biased
//! dual variables; plus sequential (posterior) refitting and the two-step
//! iterative-Bregman boost.
//!
//! The biased chain never reads refitted state, so deleting the refitting
//! updates cannot change a bit of the biased iterates.

use crate::error::{RefitError, Result};
use crate::field::{norm_slice, BlockField, ImageGrid};
use crate::penalties::{
    ball_project_into, block_soft_threshold_into, min_norm_subgradient, prox_conj_block, AnchorBlock,
    BlockPenaltyKind, PenaltyTag,
};
use crate::problems::ProblemSpec;

/// Blocks currently detected as active.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SupportMask {
    included: Vec<bool>,
}

impl SupportMask {
    pub fn empty(blocks: usize) -> Self {
        SupportMask { included: vec![false; blocks] }
    }

    pub fn from_included(included: Vec<bool>) -> Self {
        SupportMask { included }
    }

    pub fn len(&self) -> usize {
        self.included.len()
    }

    pub fn is_empty(&self) -> bool {
        self.included.is_empty()
    }

    pub fn contains(&self, i: usize) -> bool {
        self.included[i]
    }

    pub fn set(&mut self, i: usize, v: bool) {
        self.included[i] = v;
    }

    pub fn count(&self) -> usize {
        self.included.iter().filter(|&&v| v).count()
    }
}

/// Primal-dual step sizes; valid when tau * kappa * |Gamma|^2 < 1.
#[derive(Clone, Copy, Debug)]
pub struct PdParams {
    pub tau: f64,
    pub kappa: f64,
    pub theta: f64,
    /// Support margin: blocks with |nu_i| > lambda + beta count as active.
    pub beta: f64,
    pub iters: usize,
}

impl PdParams {
    /// Standard defaults: tau = kappa = 1/|Gamma| (backed off by 0.1% so
    /// the strict step-size condition holds against the certified norm),
    /// theta = 1, beta = 1e-8 * lambda.
    pub fn defaults_for(problem: &ProblemSpec) -> Self {
        let s = 1.0 / (problem.analysis.op_norm() * 1.001);
        PdParams { tau: s, kappa: s, theta: 1.0, beta: 1e-8 * problem.lambda, iters: 4000 }
    }

    pub fn with_iters(mut self, iters: usize) -> Self {
        self.iters = iters;
        self
    }

    pub fn with_beta(mut self, beta: f64) -> Self {
        self.beta = beta;
        self
    }

    pub fn validate(&self, op_norm: f64) -> Result<()> {
        if !(self.tau.is_finite() && self.tau > 0.0 && self.kappa.is_finite() && self.kappa > 0.0) {
            return Err(RefitError::InvalidParams("PD step sizes must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.theta) {
            return Err(RefitError::InvalidParams(format!("theta must lie in [0,1], got {}", self.theta)));
        }
        if !self.beta.is_finite() || self.beta <= 0.0 {
            return Err(RefitError::InvalidParams("support margin beta must be positive".into()));
        }
        if self.iters == 0 {
            return Err(RefitError::InvalidParams("iteration budget must be positive".into()));
        }
        let product = self.tau * self.kappa * op_norm * op_norm;
        if product >= 1.0 {
            return Err(RefitError::InvalidParams(format!(
                "step-size condition violated: tau*kappa*|Gamma|^2 = {product} >= 1"
            )));
        }
        Ok(())
    }
}

/// Douglas-Rachford parameters; alpha must lie strictly inside (0, 2).
#[derive(Clone, Copy, Debug)]
pub struct DrParams {
    pub alpha: f64,
    pub tau: f64,
    pub beta: f64,
    pub iters: usize,
}

impl DrParams {
    pub fn defaults_for(problem: &ProblemSpec) -> Self {
        DrParams { alpha: 0.5, tau: 0.01, beta: 1e-8 * problem.lambda, iters: 1000 }
    }

    pub fn with_iters(mut self, iters: usize) -> Self {
        self.iters = iters;
        self
    }

    pub fn with_beta(mut self, beta: f64) -> Self {
        self.beta = beta;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !self.alpha.is_finite() || self.alpha <= 0.0 || self.alpha >= 2.0 {
            return Err(RefitError::InvalidParams(format!("alpha must lie in (0,2), got {}", self.alpha)));
        }
        if !self.tau.is_finite() || self.tau <= 0.0 {
            return Err(RefitError::InvalidParams("tau must be positive".into()));
        }
        if !self.beta.is_finite() || self.beta <= 0.0 {
            return Err(RefitError::InvalidParams("support margin beta must be positive".into()));
        }
        if self.iters == 0 {
            return Err(RefitError::InvalidParams("iteration budget must be positive".into()));
        }
        Ok(())
    }
}

/// Unit directions with amplitudes for the active blocks; entries outside
/// the mask are unspecified.
#[derive(Clone, Debug)]
pub struct AnchorField {
    pub directions: BlockField,
    pub norms: Vec<f64>,
}

impl AnchorField {
    pub fn zeros(blocks: usize, block_size: usize) -> Self {
        AnchorField { directions: BlockField::zeros(blocks, block_size), norms: vec![0.0; blocks] }
    }

    /// Anchors taken directly from the blocks of zhat on the mask.
    pub fn from_field(zhat: &BlockField, mask: &SupportMask) -> Result<Self> {
        let mut anchors = AnchorField::zeros(zhat.blocks, zhat.block_size);
        for i in 0..zhat.blocks {
            if mask.contains(i) {
                let n = zhat.block_norm(i);
                if n == 0.0 {
                    return Err(RefitError::AnchorRequired("AnchorField::from_field"));
                }
                anchors.norms[i] = n;
                for (d, z) in anchors.directions.block_mut(i).iter_mut().zip(zhat.block(i)) {
                    *d = z / n;
                }
            }
        }
        Ok(anchors)
    }
}

/// Per-iteration solver record.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceRow {
    pub iter: usize,
    pub fidelity_biased: f64,
    pub fidelity_refit: f64,
    pub objective_biased: f64,
    pub support_size: usize,
    pub psnr_biased: Option<f64>,
    pub psnr_refit: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct JointSolveOutput {
    pub x_hat: ImageGrid,
    pub x_tilde: ImageGrid,
    pub mask: SupportMask,
    pub trace: Vec<TraceRow>,
    /// Final biased auxiliary dual of the Douglas-Rachford solver (None for
    /// the primal-dual solver); at its fixed point
    /// zeta_i = (1 + tau*lambda/|(Gamma xhat)_i|) (Gamma xhat)_i on the
    /// support.
    pub zeta_hat: Option<BlockField>,
}

/// Support detection from the pre-projection dual: strictly above
/// lambda + beta counts as active.
pub fn detect_support_pd(nu: &BlockField, lambda: f64, beta: f64) -> SupportMask {
    let mut mask = SupportMask::empty(nu.blocks);
    for i in 0..nu.blocks {
        mask.set(i, nu.block_norm(i) > lambda + beta);
    }
    mask
}

/// Direction/amplitude estimate of (Gamma xhat)_i from the pre-projection
/// dual block: direction nu/|nu|, amplitude (|nu| - lambda)/kappa.
pub fn psi_direction(nu_i: &[f64], lambda: f64, kappa: f64) -> Result<AnchorBlock> {
    let n = norm_slice(nu_i);
    if n <= lambda {
        return Err(RefitError::InvalidParams(format!(
            "psi_direction called off-support: |nu| = {n} <= lambda = {lambda}"
        )));
    }
    AnchorBlock::from_parts(nu_i.iter().map(|v| v / n).collect(), (n - lambda) / kappa)
}

/// The Douglas-Rachford counterpart of `psi_direction`: recovers the anchor
/// from the auxiliary dual as ((|zeta| - tau*lambda)/|zeta|) * zeta.
pub fn upsilon_direction(zeta_i: &[f64], tau_lambda: f64) -> Result<AnchorBlock> {
    let n = norm_slice(zeta_i);
    if n <= tau_lambda {
        return Err(RefitError::InvalidParams(format!(
            "upsilon_direction called off-support: |zeta| = {n} <= tau*lambda = {tau_lambda}"
        )));
    }
    AnchorBlock::from_parts(zeta_i.iter().map(|v| v / n).collect(), n - tau_lambda)
}

fn update_mask_and_anchors(
    nu: &BlockField,
    lambda: f64,
    beta: f64,
    kappa: f64,
    mask: &mut SupportMask,
    anchors: &mut AnchorField,
) {
    let threshold = lambda + beta;
    for i in 0..nu.blocks {
        let n = nu.block_norm(i);
        if n > threshold {
            mask.set(i, true);
            anchors.norms[i] = (n - lambda) / kappa;
            for (d, v) in anchors.directions.block_mut(i).iter_mut().zip(nu.block(i)) {
                *d = v / n;
            }
        } else {
            mask.set(i, false);
        }
    }
}

fn update_mask_and_anchors_dr(
    zeta: &BlockField,
    tau_lambda: f64,
    beta: f64,
    mask: &mut SupportMask,
    anchors: &mut AnchorField,
) {
    let threshold = tau_lambda + beta;
    for i in 0..zeta.blocks {
        let n = zeta.block_norm(i);
        if n > threshold {
            mask.set(i, true);
            anchors.norms[i] = n - tau_lambda;
            for (d, v) in anchors.directions.block_mut(i).iter_mut().zip(zeta.block(i)) {
                *d = v / n;
            }
        } else {
            mask.set(i, false);
        }
    }
}

pub(crate) fn prox_omega_conj_into(
    nu: &BlockField,
    anchors: &AnchorField,
    mask: &SupportMask,
    kind: &BlockPenaltyKind,
    kappa: f64,
    out: &mut BlockField,
) {
    for i in 0..nu.blocks {
        if mask.contains(i) {
            let (dir, norm) = (anchors.directions.block(i), anchors.norms[i]);
            let src = nu.block(i);
            // Split borrow: out block is disjoint from nu.
            prox_conj_block(kind, src, dir, norm, kappa, out.block_mut(i));
        } else {
            out.block_mut(i).copy_from_slice(nu.block(i));
        }
    }
}

/// Blockwise prox of omega_phi* at scale kappa: the penalty conjugate prox
/// on the support, the identity elsewhere.
pub fn prox_omega_conj(
    nu: &BlockField,
    anchors: &AnchorField,
    mask: &SupportMask,
    kind: &BlockPenaltyKind,
    kappa: f64,
) -> Result<BlockField> {
    if mask.len() != nu.blocks || anchors.norms.len() != nu.blocks {
        return Err(RefitError::ShapeMismatch {
            context: "prox_omega_conj",
            expected: format!("{} blocks", nu.blocks),
            got: format!("mask {}, anchors {}", mask.len(), anchors.norms.len()),
        });
    }
    for i in 0..nu.blocks {
        if mask.contains(i) {
            let dn = norm_slice(anchors.directions.block(i));
            if (dn - 1.0).abs() > 1e-9 {
                return Err(RefitError::AnchorRequired("prox_omega_conj"));
            }
            if kind.tag.needs_anchor_norm() && anchors.norms[i] <= 0.0 {
                return Err(RefitError::AnchorRequired(kind.tag.name()));
            }
        }
    }
    let mut out = BlockField::zeros(nu.blocks, nu.block_size);
    prox_omega_conj_into(nu, anchors, mask, kind, kappa, &mut out);
    Ok(out)
}

/// Blockwise prox of tau * omega_phi via the Moreau decomposition: on the
/// support zeta - tau * prox_{phi*/tau}(zeta/tau), off the support zero.
pub(crate) fn prox_omega_primal_into(
    zeta: &BlockField,
    anchors: &AnchorField,
    mask: &SupportMask,
    kind: &BlockPenaltyKind,
    tau: f64,
    out: &mut BlockField,
) {
    let b = zeta.block_size;
    let mut scaled = vec![0.0; b];
    let mut proxed = vec![0.0; b];
    for i in 0..zeta.blocks {
        if mask.contains(i) {
            let src = zeta.block(i);
            for (s, z) in scaled.iter_mut().zip(src) {
                *s = z / tau;
            }
            prox_conj_block(kind, &scaled, anchors.directions.block(i), anchors.norms[i], 1.0 / tau, &mut proxed);
            for ((o, z), p) in out.block_mut(i).iter_mut().zip(src).zip(&proxed) {
                *o = z - tau * p;
            }
        } else {
            out.block_mut(i).fill(0.0);
        }
    }
}

struct TraceBuilder<'a> {
    problem: &'a ProblemSpec,
    truth: Option<&'a ImageGrid>,
    rows: Vec<TraceRow>,
}

impl<'a> TraceBuilder<'a> {
    fn new(problem: &'a ProblemSpec, truth: Option<&'a ImageGrid>, iters: usize) -> Self {
        TraceBuilder { problem, truth, rows: Vec::with_capacity(iters) }
    }

    fn record(
        &mut self,
        iter: usize,
        x_hat: &ImageGrid,
        x_tilde: &ImageGrid,
        support_size: usize,
    ) -> Result<()> {
        let fidelity_biased = self.problem.fidelity(x_hat)?;
        let fidelity_refit = self.problem.fidelity(x_tilde)?;
        let objective_biased = fidelity_biased + self.problem.lambda * self.problem.analysis.forward(x_hat)?.l12_norm();
        if !fidelity_biased.is_finite() || !fidelity_refit.is_finite() || !objective_biased.is_finite() {
            return Err(RefitError::NonFiniteIterate { iter });
        }
        let psnr_biased = self.truth.map(|t| self.problem.psnr_against(t, x_hat));
        let psnr_refit = self.truth.map(|t| self.problem.psnr_against(t, x_tilde));
        self.rows.push(TraceRow {
            iter,
            fidelity_biased,
            fidelity_refit,
            objective_biased,
            support_size,
            psnr_biased,
            psnr_refit,
        });
        Ok(())
    }
}

/// Joint primal-dual algorithm: runs the biased Chambolle-Pock chain and the
/// refitted chain side by side, re-estimating support and anchors from the
/// biased dual at every iteration.
pub fn pd_joint_solve(
    problem: &ProblemSpec,
    kind: &BlockPenaltyKind,
    params: &PdParams,
    truth: Option<&ImageGrid>,
) -> Result<JointSolveOutput> {
    let op = &problem.analysis;
    params.validate(op.op_norm())?;
    let (h, w, c) = problem.primal_shape();
    let (m, b) = (op.blocks(), op.block_size());
    let (tau, kappa, theta, beta) = (params.tau, params.kappa, params.theta, params.beta);
    let lambda = problem.lambda;

    let mut x_hat = ImageGrid::zeros(h, w, c);
    let mut v_hat = ImageGrid::zeros(h, w, c);
    let mut xi_hat = BlockField::zeros(m, b);
    let mut x_tilde = ImageGrid::zeros(h, w, c);
    let mut v_tilde = ImageGrid::zeros(h, w, c);
    let mut xi_tilde = BlockField::zeros(m, b);

    let mut gv = BlockField::zeros(m, b);
    let mut nu_hat = BlockField::zeros(m, b);
    let mut nu_tilde = BlockField::zeros(m, b);
    let mut gt = ImageGrid::zeros(h, w, c);
    let mut wbuf = ImageGrid::zeros(h, w, c);
    let mut anchors = AnchorField::zeros(m, b);
    let mut mask = SupportMask::empty(m);

    let phi_t_y = problem.adjoint_forward(&problem.y)?;
    let mut trace = TraceBuilder::new(problem, truth, params.iters);

    for k in 0..params.iters {
        // Biased dual ascent and projection.
        op.forward_into(&v_hat, &mut gv)?;
        for ((nu, xi), g) in nu_hat.values.iter_mut().zip(&xi_hat.values).zip(&gv.values) {
            *nu = xi + kappa * g;
        }
        ball_project_into(&nu_hat, lambda, &mut xi_hat);

        // Support and anchor identification from the biased dual.
        update_mask_and_anchors(&nu_hat, lambda, beta, kappa, &mut mask, &mut anchors);

        // Refitted dual ascent and penalty prox.
        op.forward_into(&v_tilde, &mut gv)?;
        for ((nu, xi), g) in nu_tilde.values.iter_mut().zip(&xi_tilde.values).zip(&gv.values) {
            *nu = xi + kappa * g;
        }
        prox_omega_conj_into(&nu_tilde, &anchors, &mask, kind, kappa, &mut xi_tilde);

        // Biased primal descent and over-relaxation.
        op.adjoint_into(&xi_hat, &mut gt)?;
        for ((wv, x), (p, g)) in wbuf.values.iter_mut().zip(&x_hat.values).zip(phi_t_y.values.iter().zip(&gt.values)) {
            *wv = x + tau * (p - g);
        }
        let x_new = problem.resolvent_forward(tau, &wbuf)?;
        for ((v, xn), xo) in v_hat.values.iter_mut().zip(&x_new.values).zip(&x_hat.values) {
            *v = xn + theta * (xn - xo);
        }
        x_hat = x_new;

        // Refitted primal descent and over-relaxation.
        op.adjoint_into(&xi_tilde, &mut gt)?;
        for ((wv, x), (p, g)) in wbuf.values.iter_mut().zip(&x_tilde.values).zip(phi_t_y.values.iter().zip(&gt.values)) {
            *wv = x + tau * (p - g);
        }
        let x_new = problem.resolvent_forward(tau, &wbuf)?;
        for ((v, xn), xo) in v_tilde.values.iter_mut().zip(&x_new.values).zip(&x_tilde.values) {
            *v = xn + theta * (xn - xo);
        }
        x_tilde = x_new;

        trace.record(k, &x_hat, &x_tilde, mask.count())?;
    }

    Ok(JointSolveOutput { x_hat, x_tilde, mask, trace: trace.rows, zeta_hat: None })
}

/// Joint Douglas-Rachford algorithm over the splitting (x, xi) with the
/// consensus constraint Gamma x = xi.
pub fn dr_joint_solve(
    problem: &ProblemSpec,
    kind: &BlockPenaltyKind,
    params: &DrParams,
    truth: Option<&ImageGrid>,
) -> Result<JointSolveOutput> {
    params.validate()?;
    let op = &problem.analysis;
    let (h, w, c) = problem.primal_shape();
    let (m, b) = (op.blocks(), op.block_size());
    let (alpha, tau, beta) = (params.alpha, params.tau, params.beta);
    let tau_lambda = tau * problem.lambda;

    let mut x_hat = ImageGrid::zeros(h, w, c);
    let mut mu_hat = ImageGrid::zeros(h, w, c);
    let mut xi_hat = BlockField::zeros(m, b);
    let mut zeta_hat = BlockField::zeros(m, b);
    let mut x_tilde = ImageGrid::zeros(h, w, c);
    let mut mu_tilde = ImageGrid::zeros(h, w, c);
    let mut xi_tilde = BlockField::zeros(m, b);
    let mut zeta_tilde = BlockField::zeros(m, b);

    let mut fbuf = BlockField::zeros(m, b);
    let mut gbuf = BlockField::zeros(m, b);
    let mut gt = ImageGrid::zeros(h, w, c);
    let mut wbuf = ImageGrid::zeros(h, w, c);
    let mut anchors = AnchorField::zeros(m, b);
    let mut mask = SupportMask::empty(m);
    let mut warm_hat: Option<ImageGrid> = None;
    let mut warm_tilde: Option<ImageGrid> = None;

    let phi_t_y = problem.adjoint_forward(&problem.y)?;
    let mut trace = TraceBuilder::new(problem, truth, params.iters);

    for k in 0..params.iters {
        // upsilon = Gamma^-(2x - mu + Gamma^t(2 xi - zeta)) for each chain.
        for ((f, xi), z) in fbuf.values.iter_mut().zip(&xi_hat.values).zip(&zeta_hat.values) {
            *f = 2.0 * xi - z;
        }
        op.adjoint_into(&fbuf, &mut gt)?;
        for ((wv, x), (mu, g)) in wbuf.values.iter_mut().zip(&x_hat.values).zip(mu_hat.values.iter().zip(&gt.values)) {
            *wv = 2.0 * x - mu + g;
        }
        let upsilon_hat = op.resolvent_gamma(&wbuf, warm_hat.as_ref())?;

        for ((f, xi), z) in fbuf.values.iter_mut().zip(&xi_tilde.values).zip(&zeta_tilde.values) {
            *f = 2.0 * xi - z;
        }
        op.adjoint_into(&fbuf, &mut gt)?;
        for ((wv, x), (mu, g)) in wbuf.values.iter_mut().zip(&x_tilde.values).zip(mu_tilde.values.iter().zip(&gt.values)) {
            *wv = 2.0 * x - mu + g;
        }
        let upsilon_tilde = op.resolvent_gamma(&wbuf, warm_tilde.as_ref())?;

        // Relaxed auxiliary updates.
        for ((mu, u), x) in mu_hat.values.iter_mut().zip(&upsilon_hat.values).zip(&x_hat.values) {
            *mu += alpha * (u - x);
        }
        for ((mu, u), x) in mu_tilde.values.iter_mut().zip(&upsilon_tilde.values).zip(&x_tilde.values) {
            *mu += alpha * (u - x);
        }
        op.forward_into(&upsilon_hat, &mut gbuf)?;
        for ((z, g), xi) in zeta_hat.values.iter_mut().zip(&gbuf.values).zip(&xi_hat.values) {
            *z += alpha * (g - xi);
        }
        op.forward_into(&upsilon_tilde, &mut gbuf)?;
        for ((z, g), xi) in zeta_tilde.values.iter_mut().zip(&gbuf.values).zip(&xi_tilde.values) {
            *z += alpha * (g - xi);
        }

        // Primal prox through the forward resolvent.
        for ((wv, mu), p) in wbuf.values.iter_mut().zip(&mu_hat.values).zip(&phi_t_y.values) {
            *wv = mu + tau * p;
        }
        x_hat = problem.resolvent_forward(tau, &wbuf)?;
        for ((wv, mu), p) in wbuf.values.iter_mut().zip(&mu_tilde.values).zip(&phi_t_y.values) {
            *wv = mu + tau * p;
        }
        x_tilde = problem.resolvent_forward(tau, &wbuf)?;

        // Dual prox: soft thresholding for the biased chain, the penalty
        // prox with online support/anchors for the refitted one.
        block_soft_threshold_into(&zeta_hat, tau_lambda, &mut xi_hat);
        update_mask_and_anchors_dr(&zeta_hat, tau_lambda, beta, &mut mask, &mut anchors);
        prox_omega_primal_into(&zeta_tilde, &anchors, &mask, kind, tau, &mut xi_tilde);

        warm_hat = Some(upsilon_hat);
        warm_tilde = Some(upsilon_tilde);

        trace.record(k, &x_hat, &x_tilde, mask.count())?;
    }

    Ok(JointSolveOutput { x_hat, x_tilde, mask, trace: trace.rows, zeta_hat: Some(zeta_hat) })
}

#[derive(Clone, Debug)]
pub struct PosteriorOutput {
    pub x_tilde: ImageGrid,
    pub mask: SupportMask,
    pub trace: Vec<TraceRow>,
}

/// Sequential refitting: freeze the support {|(Gamma xhat)_i| > beta} and
/// the anchors (Gamma xhat)_i, then run a single refitted PD chain.
pub fn posterior_refit(
    problem: &ProblemSpec,
    kind: &BlockPenaltyKind,
    x_hat: &ImageGrid,
    beta: f64,
    params: &PdParams,
    truth: Option<&ImageGrid>,
) -> Result<PosteriorOutput> {
    let op = &problem.analysis;
    params.validate(op.op_norm())?;
    if !beta.is_finite() || beta <= 0.0 {
        return Err(RefitError::InvalidParams("mask threshold beta must be positive".into()));
    }
    let gxh = op.forward(x_hat)?;
    let mut mask = SupportMask::empty(gxh.blocks);
    for i in 0..gxh.blocks {
        mask.set(i, gxh.block_norm(i) > beta);
    }
    let anchors = AnchorField::from_field(&gxh, &mask)?;
    let x_tilde = refit_chain(problem, kind, &anchors, &mask, params, truth, RefitDualProx::Penalty)?;
    Ok(PosteriorOutput { x_tilde: x_tilde.0, mask, trace: x_tilde.1 })
}

/// Two-step iterative Bregman boost: minimizes the fidelity plus
/// lambda * sum_i D_i(Gamma x) for the minimal-norm subgradient taken from
/// xhat on the given mask. The support is not constrained, so blocks outside
/// the mask may activate.
pub fn ib_boost(
    problem: &ProblemSpec,
    x_hat: &ImageGrid,
    mask: &SupportMask,
    params: &PdParams,
) -> Result<ImageGrid> {
    let op = &problem.analysis;
    params.validate(op.op_norm())?;
    let gxh = op.forward(x_hat)?;
    let eta = min_norm_subgradient(&gxh, mask)?;
    // On the support the divergence term is the soft direction penalty with
    // anchor eta_i; off the support it degenerates to lambda * |block|.
    let mut anchors = AnchorField::zeros(gxh.blocks, gxh.block_size);
    for i in 0..gxh.blocks {
        if mask.contains(i) {
            anchors.norms[i] = 1.0;
            anchors.directions.block_mut(i).copy_from_slice(eta.block(i));
        }
    }
    let sd = BlockPenaltyKind::new(PenaltyTag::Sd, problem.lambda)?;
    let out = refit_chain(problem, &sd, &anchors, mask, params, None, RefitDualProx::BregmanBoost)?;
    Ok(out.0)
}

enum RefitDualProx {
    /// prox of omega_phi*: penalty prox on the mask, pass-through outside.
    Penalty,
    /// Boost prox: penalty prox on the mask, ball projection outside.
    BregmanBoost,
}

#[allow(clippy::too_many_arguments)]
fn refit_chain(
    problem: &ProblemSpec,
    kind: &BlockPenaltyKind,
    anchors: &AnchorField,
    mask: &SupportMask,
    params: &PdParams,
    truth: Option<&ImageGrid>,
    dual_prox: RefitDualProx,
) -> Result<(ImageGrid, Vec<TraceRow>)> {
    let op = &problem.analysis;
    let (h, w, c) = problem.primal_shape();
    let (m, b) = (op.blocks(), op.block_size());
    let (tau, kappa, theta) = (params.tau, params.kappa, params.theta);
    let lambda = problem.lambda;

    let mut x = ImageGrid::zeros(h, w, c);
    let mut v = ImageGrid::zeros(h, w, c);
    let mut xi = BlockField::zeros(m, b);
    let mut gv = BlockField::zeros(m, b);
    let mut nu = BlockField::zeros(m, b);
    let mut gt = ImageGrid::zeros(h, w, c);
    let mut wbuf = ImageGrid::zeros(h, w, c);
    let phi_t_y = problem.adjoint_forward(&problem.y)?;
    let mut trace = TraceBuilder::new(problem, truth, params.iters);

    for k in 0..params.iters {
        op.forward_into(&v, &mut gv)?;
        for ((n, x0), g) in nu.values.iter_mut().zip(&xi.values).zip(&gv.values) {
            *n = x0 + kappa * g;
        }
        match dual_prox {
            RefitDualProx::Penalty => {
                prox_omega_conj_into(&nu, anchors, mask, kind, kappa, &mut xi);
            }
            RefitDualProx::BregmanBoost => {
                for i in 0..m {
                    if mask.contains(i) {
                        prox_conj_block(kind, nu.block(i), anchors.directions.block(i), anchors.norms[i], kappa, xi.block_mut(i));
                    } else {
                        // Off the support the divergence is the plain block
                        // norm, whose conjugate prox is the ball projection.
                        let scale = lambda / lambda.max(norm_slice(nu.block(i)));
                        for (o, z) in xi.block_mut(i).iter_mut().zip(nu.block(i)) {
                            *o = scale * z;
                        }
                    }
                }
            }
        }
        op.adjoint_into(&xi, &mut gt)?;
        for ((wv, x0), (p, g)) in wbuf.values.iter_mut().zip(&x.values).zip(phi_t_y.values.iter().zip(&gt.values)) {
            *wv = x0 + tau * (p - g);
        }
        let x_new = problem.resolvent_forward(tau, &wbuf)?;
        for ((vv, xn), xo) in v.values.iter_mut().zip(&x_new.values).zip(&x.values) {
            *vv = xn + theta * (xn - xo);
        }
        x = x_new;
        trace.record(k, &x, &x, mask.count())?;
    }
    Ok((x, trace.rows))
}
