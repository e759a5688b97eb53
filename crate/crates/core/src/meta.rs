//! The retention-aware student update and its second-order machinery.
//!
//! The student objective couples two distillation terms: an acquisition loss
//! on freshly generated samples and a retention loss on replayed samples,
//! evaluated after a differentiable inner step
//!
//! ```text
//! theta' = theta - alpha * grad L_acq(theta)
//! L = L_acq(theta) [+ L_ret(theta)] + L_ret(theta')
//! ```
//!
//! Because [`Graph::grad`] emits the backward pass as ordinary graph nodes,
//! differentiating `L` w.r.t. `theta` routes through `theta'` and picks up
//! the exact curvature term `(I - alpha * H_acq) * grad L_ret(theta')` with
//! no truncation. The same mechanism provides Hessian-vector products and
//! the Taylor-expansion residual used to validate the first-order analysis.

use ndarray::ArrayD;

use crate::autodiff::{Graph, NodeId};
use crate::param::{grads_to_vector, ParamNodes, ParamVector};
use crate::Result;

/// How the student consumes replayed samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StudentUpdateMode {
    /// Acquisition plus retention evaluated after the inner step.
    Meta,
    /// Acquisition plus retention at the current parameters; no inner step.
    NaiveReplay,
    /// Acquisition only.
    NoReplay,
}

#[derive(Debug, Clone, Copy)]
pub struct InnerStepConfig {
    pub mode: StudentUpdateMode,
    /// Inner-step learning rate.
    pub alpha: f64,
    /// Keep the plain `L_ret(theta)` term alongside the adapted one; the
    /// canonical update uses both.
    pub include_plain_retention: bool,
}

impl InnerStepConfig {
    pub fn meta(alpha: f64) -> Self {
        Self {
            mode: StudentUpdateMode::Meta,
            alpha,
            include_plain_retention: true,
        }
    }
}

/// Loss nodes assembled for one student update.
pub struct MetaLossParts {
    pub total: NodeId,
    pub acq: NodeId,
    pub ret_plain: Option<NodeId>,
    pub ret_adapted: Option<NodeId>,
    pub theta_prime: Option<ParamNodes>,
}

/// Differentiable inner step: returns parameter nodes for
/// `theta - alpha * grad loss(theta)`. The returned nodes stay connected to
/// `p`, so anything built on them back-propagates through the step.
pub fn inner_step(g: &mut Graph, p: &ParamNodes, loss: NodeId, alpha: f64) -> ParamNodes {
    assert!(alpha.is_finite(), "inner step rate must be finite");
    let grads = g.grad(loss, &p.nodes);
    let nodes = p
        .nodes
        .iter()
        .zip(&grads)
        .map(|(&t, &gr)| {
            let step = g.scale(gr, alpha);
            g.sub(t, step)
        })
        .collect();
    ParamNodes {
        layout: p.layout.clone(),
        nodes,
    }
}

/// Builds the student loss for one update according to `cfg`. `acq` and
/// `ret` construct the acquisition and retention losses for an arbitrary
/// set of parameter nodes; `ret` is `None` when nothing can be replayed
/// (empty memory), which degrades every mode to acquisition-only.
pub fn meta_student_loss_parts<A, R>(
    g: &mut Graph,
    p: &ParamNodes,
    acq: A,
    ret: Option<R>,
    cfg: &InnerStepConfig,
) -> Result<MetaLossParts>
where
    A: Fn(&mut Graph, &ParamNodes) -> Result<NodeId>,
    R: Fn(&mut Graph, &ParamNodes) -> Result<NodeId>,
{
    let acq_node = acq(g, p)?;
    let (mode_has_ret, ret) = match (cfg.mode, ret) {
        (StudentUpdateMode::NoReplay, _) | (_, None) => (false, None),
        (_, Some(r)) => (true, Some(r)),
    };
    if !mode_has_ret {
        return Ok(MetaLossParts {
            total: acq_node,
            acq: acq_node,
            ret_plain: None,
            ret_adapted: None,
            theta_prime: None,
        });
    }
    let ret = ret.unwrap();
    match cfg.mode {
        StudentUpdateMode::NaiveReplay => {
            let ret_node = ret(g, p)?;
            let total = g.add(acq_node, ret_node);
            Ok(MetaLossParts {
                total,
                acq: acq_node,
                ret_plain: Some(ret_node),
                ret_adapted: None,
                theta_prime: None,
            })
        }
        StudentUpdateMode::Meta => {
            let tp = inner_step(g, p, acq_node, cfg.alpha);
            let ret_adapted = ret(g, &tp)?;
            let mut total = g.add(acq_node, ret_adapted);
            let ret_plain = if cfg.include_plain_retention {
                let r = ret(g, p)?;
                total = g.add(total, r);
                Some(r)
            } else {
                None
            };
            Ok(MetaLossParts {
                total,
                acq: acq_node,
                ret_plain,
                ret_adapted: Some(ret_adapted),
                theta_prime: Some(tp),
            })
        }
        StudentUpdateMode::NoReplay => unreachable!(),
    }
}

/// Exact gradient of the assembled student loss w.r.t. the base parameters.
pub fn total_gradient(g: &mut Graph, parts: &MetaLossParts, p: &ParamNodes) -> ParamVector {
    let grads = g.grad(parts.total, &p.nodes);
    grads_to_vector(g, &p.layout, &grads)
}

/// Hessian-vector product `H_loss(p) * v` by differentiating
/// `<grad loss, v>`; the Hessian is never materialized.
pub fn hvp(g: &mut Graph, loss: NodeId, p: &ParamNodes, v: &ParamVector) -> ParamVector {
    let grads = g.grad(loss, &p.nodes);
    let mut acc: Option<NodeId> = None;
    for (i, &gr) in grads.iter().enumerate() {
        let vt = g.leaf(v.tensor(i));
        let d = g.dot(gr, vt);
        acc = Some(match acc {
            None => d,
            Some(a) => g.add(a, d),
        });
    }
    let s = acc.expect("empty parameter set");
    let hv = g.grad(s, &p.nodes);
    grads_to_vector(g, &p.layout, &hv)
}

/// Gradient-alignment summary between the acquisition and retention
/// gradients at the same parameters.
#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct Alignment {
    pub dot: f64,
    pub cos: f64,
    pub norm_acq: f64,
    pub norm_ret: f64,
    /// Set when either gradient has (near-)zero norm; `cos` is reported as 0
    /// rather than dividing by nothing.
    pub degenerate: bool,
}

pub fn alignment_report(g_acq: &ParamVector, g_ret: &ParamVector) -> Alignment {
    let dot = g_acq.dot(g_ret);
    let na = g_acq.norm();
    let nr = g_ret.norm();
    let degenerate = na < 1e-300 || nr < 1e-300;
    let cos = if degenerate { 0.0 } else { dot / (na * nr) };
    Alignment {
        dot,
        cos,
        norm_acq: na,
        norm_ret: nr,
        degenerate,
    }
}

/// Norm of the first-order Taylor remainder of the retention gradient under
/// the inner step:
///
/// ```text
/// r(alpha) = || grad L_ret(theta - alpha g_acq)
///             - grad L_ret(theta) + alpha H_ret g_acq ||
/// ```
///
/// For twice-differentiable losses `r(alpha) = O(alpha^2)`, so halving
/// `alpha` divides the residual by about 4; for quadratics it vanishes.
pub fn taylor_residual<A, R>(acq: &A, ret: &R, params: &ParamVector, alpha: f64) -> Result<f64>
where
    A: Fn(&mut Graph, &ParamNodes) -> Result<NodeId>,
    R: Fn(&mut Graph, &ParamNodes) -> Result<NodeId>,
{
    // Base point: acquisition gradient, retention gradient, and the
    // Hessian-vector product H_ret * g_acq.
    let mut g = Graph::new();
    let p = params.inject(&mut g);
    let acq_node = acq(&mut g, &p)?;
    let acq_grads = g.grad(acq_node, &p.nodes);
    let g_acq = grads_to_vector(&g, &p.layout, &acq_grads);
    let ret_node = ret(&mut g, &p)?;
    let ret_grads = g.grad(ret_node, &p.nodes);
    let g_ret = grads_to_vector(&g, &p.layout, &ret_grads);
    let h_ret_gacq = hvp(&mut g, ret_node, &p, &g_acq);

    // Shifted point: retention gradient at theta - alpha * g_acq.
    let mut shifted = params.clone();
    shifted.axpy(-alpha, &g_acq);
    let mut g2 = Graph::new();
    let p2 = shifted.inject(&mut g2);
    let ret2 = ret(&mut g2, &p2)?;
    let ret2_grads = g2.grad(ret2, &p2.nodes);
    let g_ret_shifted = grads_to_vector(&g2, &p2.layout, &ret2_grads);

    let mut resid = g_ret_shifted;
    resid.axpy(-1.0, &g_ret);
    resid.axpy(alpha, &h_ret_gacq);
    Ok(resid.norm())
}

/// Convenience leaf constructor for loss builders written as closures.
pub fn const_leaf(g: &mut Graph, x: &ArrayD<f64>) -> NodeId {
    g.leaf(x.clone())
}
