//! Runtime verification of the numerical kernels.
//!
//! Each suite re-derives a mathematical fact from first principles (closed
//! forms on quadratics, high-precision reference constants, central finite
//! differences) and compares the production code path against it. The
//! suites exist so a binary install can prove its own gradients are exact,
//! without a test harness.
//!
//! `tolerance_scale` multiplies every tolerance and window half-width.
//! 1.0 is the shipped gate; 0.0 turns each comparison into an impossible
//! equality, which exercises the failure reporting end to end.

use ndarray::{Array1, Array2, ArrayD, IxDyn};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use std::sync::Arc;

use crate::autodiff::{Graph, NodeId};
use crate::check::{central_diff_grad, rel_err_norm};
use crate::losses::{self, oracle};
use crate::meta::{
    hvp, meta_student_loss_parts, taylor_residual, total_gradient, InnerStepConfig,
    StudentUpdateMode,
};
use crate::nets::{ForwardMode, NetKind, NetSpec, Network};
use crate::param::{grads_to_vector, ParamLayout, ParamNodes, ParamVector};
use crate::rng::{stream_rng, Stream};
use crate::{Error, Result};

pub const SUITE_NAMES: &[&str] = &["losses", "hvp", "metagrad", "taylor"];

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: String,
    pub ok: bool,
    pub detail: String,
}

#[derive(Debug, Clone)]
pub struct SuiteReport {
    pub suite: &'static str,
    pub checks: Vec<CheckResult>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.ok)
    }
}

/// Runs one named suite, or all of them for `"all"`.
pub fn run_suites(which: &str, tolerance_scale: f64, seed: u64) -> Result<Vec<SuiteReport>> {
    if !tolerance_scale.is_finite() || tolerance_scale < 0.0 {
        return Err(Error::Config(format!(
            "tolerance scale must be a finite nonnegative number, got {tolerance_scale}"
        )));
    }
    let run = |name: &str| -> Result<SuiteReport> {
        let mut h = Harness::new(tolerance_scale);
        match name {
            "losses" => losses_suite(&mut h, seed)?,
            "hvp" => hvp_suite(&mut h, seed)?,
            "metagrad" => metagrad_suite(&mut h, seed)?,
            "taylor" => taylor_suite(&mut h, seed)?,
            _ => unreachable!(),
        }
        Ok(SuiteReport {
            suite: SUITE_NAMES.iter().find(|s| **s == name).unwrap(),
            checks: h.checks,
        })
    };
    match which {
        "all" => SUITE_NAMES.iter().map(|s| run(s)).collect(),
        s if SUITE_NAMES.contains(&s) => Ok(vec![run(s)?]),
        other => Err(Error::Config(format!(
            "unknown verification suite {other:?}; expected one of {SUITE_NAMES:?} or \"all\""
        ))),
    }
}

struct Harness {
    scale: f64,
    checks: Vec<CheckResult>,
}

impl Harness {
    fn new(scale: f64) -> Self {
        Harness {
            scale,
            checks: Vec::new(),
        }
    }

    /// Absolute or relative error bounded by `tol * scale`.
    fn err_within(&mut self, name: &str, err: f64, tol: f64) {
        let bound = tol * self.scale;
        let ok = err.is_finite() && err <= bound;
        self.checks.push(CheckResult {
            name: name.to_string(),
            ok,
            detail: format!("err {err:.3e} (tolerance {bound:.3e})"),
        });
    }

    /// Value inside `center +- halfwidth * scale`.
    fn within_window(&mut self, name: &str, value: f64, center: f64, halfwidth: f64) {
        let hw = halfwidth * self.scale;
        let ok = value.is_finite() && (value - center).abs() <= hw;
        self.checks.push(CheckResult {
            name: name.to_string(),
            ok,
            detail: format!("value {value:.4} (window {center} +- {hw})"),
        });
    }
}

fn randn_array(shape: &[usize], rng: &mut ChaCha8Rng) -> ArrayD<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    ArrayD::from_shape_vec(IxDyn(shape), data).unwrap()
}

fn randn_vec(n: usize, rng: &mut ChaCha8Rng) -> Array1<f64> {
    Array1::from_iter((0..n).map(|_| StandardNormal.sample(rng)))
}

/// Small smooth teacher/student pair plus fixed inputs; the workhorse for
/// every finite-difference comparison below.
struct FdSetup {
    teacher: Network,
    student: Network,
    x_acq: ArrayD<f64>,
    x_ret: ArrayD<f64>,
}

fn fd_setup(seed: u64) -> Result<FdSetup> {
    let spec_t = NetSpec {
        kind: NetKind::ClassifierMlp,
        input_shape: vec![3],
        output_dim: 4,
        hidden: 10,
        depth: 2,
        noise_dim: 1,
        base_channels: 128,
    };
    let spec_s = NetSpec {
        hidden: 8,
        ..spec_t.clone()
    };
    let teacher = Network::build(&spec_t, seed.wrapping_add(1))?;
    let student = Network::build(&spec_s, seed.wrapping_add(2))?;
    let mut rng = stream_rng(seed, Stream::Diagnostics);
    let x_acq = randn_array(&[6, 3], &mut rng);
    let x_ret = randn_array(&[5, 3], &mut rng);
    Ok(FdSetup {
        teacher,
        student,
        x_acq,
        x_ret,
    })
}

/// Distillation loss evaluated through the student as a plain function of
/// its parameter vector.
fn kd_builder<'a>(
    teacher: &'a Network,
    student: &'a Network,
    x: &'a ArrayD<f64>,
) -> impl Fn(&mut Graph, &ParamNodes) -> Result<NodeId> + 'a {
    move |g: &mut Graph, p: &ParamNodes| {
        let t_logits = g.leaf(teacher.forward_values(x, ForwardMode::Eval)?);
        let xn = g.leaf(x.clone());
        let s_logits = student.forward_nodes(g, p, xn, ForwardMode::Eval)?;
        Ok(losses::kd_mae(g, t_logits, s_logits))
    }
}

/// Smooth (squared-error) variant for checks that expand to second order.
fn sq_builder<'a>(
    teacher: &'a Network,
    student: &'a Network,
    x: &'a ArrayD<f64>,
) -> impl Fn(&mut Graph, &ParamNodes) -> Result<NodeId> + 'a {
    move |g: &mut Graph, p: &ParamNodes| {
        let t_logits = g.leaf(teacher.forward_values(x, ForwardMode::Eval)?);
        let xn = g.leaf(x.clone());
        let s_logits = student.forward_nodes(g, p, xn, ForwardMode::Eval)?;
        let d = g.sub(t_logits, s_logits);
        let sq = g.mul(d, d);
        Ok(g.mean_all(sq))
    }
}

fn flat_params(n: usize, rng: &mut ChaCha8Rng) -> ParamVector {
    let layout = Arc::new(ParamLayout::new([("theta".to_string(), vec![n])]));
    ParamVector::from_values(layout, randn_vec(n, rng))
}

/// 0.5 * d' A d + b' d with d = theta - c; gradient A d + b, Hessian A
/// (for symmetric A).
fn quad_loss(
    g: &mut Graph,
    theta: NodeId,
    a: &Array2<f64>,
    b: &Array1<f64>,
    c: &Array1<f64>,
) -> NodeId {
    let n = b.len();
    let a_leaf = g.leaf(a.clone().into_dyn());
    let b_leaf = g.leaf(b.clone().into_dyn());
    let c_leaf = g.leaf(c.clone().into_dyn());
    let d = g.sub(theta, c_leaf);
    let d_col = g.reshape(d, &[n, 1]);
    let ad = g.matmul(a_leaf, d_col);
    let ad_flat = g.reshape(ad, &[n]);
    let quad = g.dot(d, ad_flat);
    let half = g.scale(quad, 0.5);
    let lin = g.dot(b_leaf, d);
    g.add(half, lin)
}

fn losses_suite(h: &mut Harness, seed: u64) -> Result<()> {
    let leaf2 = |g: &mut Graph, rows: &[&[f64]]| {
        let data: Vec<f64> = rows.iter().flat_map(|r| r.iter().cloned()).collect();
        g.leaf(ArrayD::from_shape_vec(IxDyn(&[rows.len(), rows[0].len()]), data).unwrap())
    };

    for (i, (p, q, want)) in oracle::KL_CASES.iter().enumerate() {
        let mut g = Graph::new();
        let pn = leaf2(&mut g, &[p]);
        let qn = leaf2(&mut g, &[q]);
        let kl = losses::kl_divergence(&mut g, pn, qn);
        let graph_err = (g.scalar_value(kl) - want).abs();
        let scalar_err = (losses::checked_kl(p, q)? - want).abs();
        h.err_within(
            &format!("kl_reference_{i}"),
            graph_err.max(scalar_err),
            1e-12,
        );
    }
    {
        let t: Vec<&[f64]> = oracle::TWO_ROW_T.iter().map(|r| r.as_slice()).collect();
        let s: Vec<&[f64]> = oracle::TWO_ROW_S.iter().map(|r| r.as_slice()).collect();
        let mut g = Graph::new();
        let tn = leaf2(&mut g, &t);
        let sn = leaf2(&mut g, &s);
        let js = losses::js_divergence(&mut g, tn, sn);
        h.err_within(
            "js_reference",
            (g.scalar_value(js) - oracle::JS_TWO_ROW).abs(),
            1e-12,
        );
        let mut g = Graph::new();
        let tn = leaf2(&mut g, &t);
        let em = losses::entropy_max_loss(&mut g, tn);
        h.err_within(
            "entropy_reference",
            (g.scalar_value(em) - oracle::EM_TWO_ROW).abs(),
            1e-12,
        );
    }
    {
        // Identical logits: zero distillation gap, JS exactly zero.
        let mut g = Graph::new();
        let t = leaf2(&mut g, &[&[0.4, -0.8, 1.6]]);
        let s = leaf2(&mut g, &[&[0.4, -0.8, 1.6]]);
        let kd = losses::kd_mae(&mut g, t, s);
        let js = losses::js_divergence(&mut g, t, s);
        h.err_within("kd_identity", g.scalar_value(kd).abs(), 1e-15);
        h.err_within("js_identity", g.scalar_value(js).abs(), 1e-15);
        // Effectively disjoint supports: JS saturates at ln 2.
        let mut g = Graph::new();
        let t = leaf2(&mut g, &[&[200.0, 0.0]]);
        let s = leaf2(&mut g, &[&[0.0, 200.0]]);
        let js = losses::js_divergence(&mut g, t, s);
        h.err_within(
            "js_saturation",
            (g.scalar_value(js) - std::f64::consts::LN_2).abs(),
            1e-9,
        );
        // Uniform logits pin the one-hot and entropy terms at +-ln C.
        let mut g = Graph::new();
        let t = leaf2(&mut g, &[&[0.0; 5], &[0.0; 5]]);
        let oh = losses::one_hot_loss(&mut g, t);
        let em = losses::entropy_max_loss(&mut g, t);
        let ln_c = (5.0f64).ln();
        h.err_within("uniform_one_hot", (g.scalar_value(oh) - ln_c).abs(), 1e-9);
        h.err_within("uniform_entropy", (g.scalar_value(em) + ln_c).abs(), 1e-9);
    }

    // Analytic gradients of every loss head against central differences,
    // taken through the teacher so the activation traces participate.
    let setup = fd_setup(seed)?;
    let FdSetup {
        teacher,
        student,
        x_acq: x,
        ..
    } = &setup;
    let s_logits = student.forward_values(x, ForwardMode::Eval)?;
    type Head<'a> = (
        &'a str,
        Box<dyn Fn(&mut Graph, NodeId, &[NodeId], NodeId) -> NodeId>,
    );
    let heads: Vec<Head> = vec![
        ("kd_mae", Box::new(|g, t, _tr, s| losses::kd_mae(g, t, s))),
        (
            "kl",
            Box::new(|g, t, _tr, s| {
                let p = losses::softmax(g, t);
                let q = losses::softmax(g, s);
                losses::kl_divergence(g, p, q)
            }),
        ),
        (
            "js",
            Box::new(|g, t, _tr, s| losses::js_divergence(g, t, s)),
        ),
        (
            "one_hot",
            Box::new(|g, t, _tr, _s| losses::one_hot_loss(g, t)),
        ),
        (
            "activation",
            Box::new(|g, _t, tr, _s| losses::activation_loss(g, tr)),
        ),
        (
            "entropy",
            Box::new(|g, t, _tr, _s| losses::entropy_max_loss(g, t)),
        ),
        (
            "prior",
            Box::new(|g, t, tr, _s| losses::prior_loss(g, t, tr, 1.0, 1.0)),
        ),
        (
            "generator",
            Box::new(|g, t, tr, s| losses::generator_loss(g, t, s, tr, 1.0, 1.0)),
        ),
    ];
    for (name, head) in &heads {
        let build = |g: &mut Graph, p: &ParamNodes| -> Result<NodeId> {
            let xn = g.leaf(x.clone());
            let (t_logits, traces) = teacher.forward_traced_nodes(g, p, xn, ForwardMode::Eval)?;
            let sn = g.leaf(s_logits.clone());
            Ok(head(g, t_logits, &traces, sn))
        };
        let mut g = Graph::new();
        let p = teacher.params.inject(&mut g);
        let loss = build(&mut g, &p)?;
        let grads = g.grad(loss, &p.nodes);
        let analytic = grads_to_vector(&g, &teacher.layout, &grads);
        let f = |vals: &Array1<f64>| -> f64 {
            let pv = ParamVector::from_values(teacher.layout.clone(), vals.clone());
            let mut g = Graph::new();
            let p = pv.inject(&mut g);
            let loss = build(&mut g, &p).expect("head builds");
            g.scalar_value(loss)
        };
        let fd = central_diff_grad(f, &teacher.params.values, 1e-5);
        h.err_within(
            &format!("grad_fd_{name}"),
            rel_err_norm(analytic.values.as_slice().unwrap(), fd.as_slice().unwrap()),
            1e-4,
        );
    }
    Ok(())
}

fn hvp_suite(h: &mut Harness, seed: u64) -> Result<()> {
    let mut rng = stream_rng(seed, Stream::Diagnostics);
    let n = 6;
    let m = Array2::from_shape_fn((n, n), |_| {
        let v: f64 = StandardNormal.sample(&mut rng);
        v
    });
    let a = &m + &m.t(); // symmetric, so the Hessian equals it exactly
    let b = randn_vec(n, &mut rng);
    let c = randn_vec(n, &mut rng);
    let params = flat_params(n, &mut rng);
    let v = randn_vec(n, &mut rng);

    {
        let mut g = Graph::new();
        let p = params.inject(&mut g);
        let loss = quad_loss(&mut g, p.nodes[0], &a, &b, &c);
        let vv = ParamVector::from_values(params.layout.clone(), v.clone());
        let got = hvp(&mut g, loss, &p, &vv);
        let want = a.dot(&v);
        h.err_within(
            "quadratic_exact",
            rel_err_norm(got.values.as_slice().unwrap(), want.as_slice().unwrap()),
            1e-10,
        );
    }

    let setup = fd_setup(seed)?;
    let FdSetup {
        teacher,
        student,
        x_acq,
        ..
    } = &setup;
    let loss_b = kd_builder(teacher, student, x_acq);
    let grad_at = |vals: &ParamVector| -> Result<ParamVector> {
        let mut g = Graph::new();
        let p = vals.inject(&mut g);
        let loss = loss_b(&mut g, &p)?;
        let grads = g.grad(loss, &p.nodes);
        Ok(grads_to_vector(&g, &student.layout, &grads))
    };
    let dir = ParamVector::from_values(
        student.layout.clone(),
        randn_vec(student.params.len(), &mut rng),
    );
    {
        let mut g = Graph::new();
        let p = student.params.inject(&mut g);
        let loss = loss_b(&mut g, &p)?;
        let got = hvp(&mut g, loss, &p, &dir);
        let eps = 1e-5;
        let mut plus = student.params.clone();
        plus.axpy(eps, &dir);
        let mut minus = student.params.clone();
        minus.axpy(-eps, &dir);
        let mut fd = grad_at(&plus)?;
        fd.axpy(-1.0, &grad_at(&minus)?);
        fd.scale(1.0 / (2.0 * eps));
        h.err_within(
            "network_fd",
            rel_err_norm(
                got.values.as_slice().unwrap(),
                fd.values.as_slice().unwrap(),
            ),
            1e-4,
        );
    }
    {
        let u = ParamVector::from_values(
            student.layout.clone(),
            randn_vec(student.params.len(), &mut rng),
        );
        let mut g = Graph::new();
        let p = student.params.inject(&mut g);
        let loss = loss_b(&mut g, &p)?;
        let hu = hvp(&mut g, loss, &p, &u);
        let hv = hvp(&mut g, loss, &p, &dir);
        let mut combo = u.clone();
        combo.scale(2.0);
        combo.axpy(3.0, &dir);
        let h_combo = hvp(&mut g, loss, &p, &combo);
        let mut want = hu.clone();
        want.scale(2.0);
        want.axpy(3.0, &hv);
        h.err_within(
            "linearity",
            rel_err_norm(
                h_combo.values.as_slice().unwrap(),
                want.values.as_slice().unwrap(),
            ),
            1e-8,
        );
        let uhv = u.dot(&hv);
        let vhu = dir.dot(&hu);
        h.err_within(
            "symmetry",
            (uhv - vhu).abs() / uhv.abs().max(vhu.abs()).max(1.0),
            1e-8,
        );
    }
    Ok(())
}

fn metagrad_suite(h: &mut Harness, seed: u64) -> Result<()> {
    let mut rng = stream_rng(seed, Stream::Diagnostics);
    let n = 5;
    let a_target = randn_vec(n, &mut rng);
    let b_target = randn_vec(n, &mut rng);
    let params = flat_params(n, &mut rng);
    let alpha = 0.3;

    // Closed form on paired quadratics 0.5 * ||theta - a||^2.
    {
        let half_sq = |target: Array1<f64>| {
            move |g: &mut Graph, p: &ParamNodes| -> Result<NodeId> {
                let t = g.leaf(target.clone().into_dyn());
                let d = g.sub(p.nodes[0], t);
                let sq = g.mul(d, d);
                let s = g.sum_all(sq);
                Ok(g.scale(s, 0.5))
            }
        };
        let acq = half_sq(a_target.clone());
        let ret = half_sq(b_target.clone());
        let cfg = InnerStepConfig {
            mode: StudentUpdateMode::Meta,
            alpha,
            include_plain_retention: true,
        };
        let mut g = Graph::new();
        let p = params.inject(&mut g);
        let parts = meta_student_loss_parts(&mut g, &p, &acq, Some(&ret), &cfg)?;
        let got = total_gradient(&mut g, &parts, &p);
        let theta = &params.values;
        let theta_prime = theta - &(alpha * (theta - &a_target));
        let want =
            (theta - &a_target) + (theta - &b_target) + (1.0 - alpha) * (&theta_prime - &b_target);
        h.err_within(
            "quadratic_closed_form",
            rel_err_norm(got.values.as_slice().unwrap(), want.as_slice().unwrap()),
            1e-10,
        );
        let want_loss = 0.5
            * ((theta - &a_target).mapv(|x| x * x).sum()
                + (theta - &b_target).mapv(|x| x * x).sum()
                + (&theta_prime - &b_target).mapv(|x| x * x).sum());
        h.err_within(
            "quadratic_loss_value",
            (g.scalar_value(parts.total) - want_loss).abs(),
            1e-10,
        );
    }

    let setup = fd_setup(seed)?;
    let FdSetup {
        teacher,
        student,
        x_acq,
        x_ret,
    } = &setup;
    let acq = kd_builder(teacher, student, x_acq);
    let ret = kd_builder(teacher, student, x_ret);
    let cfg = InnerStepConfig {
        mode: StudentUpdateMode::Meta,
        alpha: 0.9,
        include_plain_retention: true,
    };

    // Full double-backward gradient against central differences of the
    // assembled objective.
    {
        let mut g = Graph::new();
        let p = student.params.inject(&mut g);
        let parts = meta_student_loss_parts(&mut g, &p, &acq, Some(&ret), &cfg)?;
        let got = total_gradient(&mut g, &parts, &p);
        let f = |vals: &Array1<f64>| -> f64 {
            let pv = ParamVector::from_values(student.layout.clone(), vals.clone());
            let mut g = Graph::new();
            let p = pv.inject(&mut g);
            let parts =
                meta_student_loss_parts(&mut g, &p, &acq, Some(&ret), &cfg).expect("loss builds");
            g.scalar_value(parts.total)
        };
        let fd = central_diff_grad(f, &student.params.values, 1e-5);
        h.err_within(
            "network_fd",
            rel_err_norm(got.values.as_slice().unwrap(), fd.as_slice().unwrap()),
            1e-3,
        );
    }

    // A zero inner step length collapses the adapted retention onto plain
    // replay: with the plain term dropped, the two modes coincide.
    {
        let zero = InnerStepConfig {
            alpha: 0.0,
            include_plain_retention: false,
            ..cfg
        };
        let naive = InnerStepConfig {
            mode: StudentUpdateMode::NaiveReplay,
            ..zero
        };
        let mut g = Graph::new();
        let p = student.params.inject(&mut g);
        let parts_zero = meta_student_loss_parts(&mut g, &p, &acq, Some(&ret), &zero)?;
        let g_zero = total_gradient(&mut g, &parts_zero, &p);
        let parts_naive = meta_student_loss_parts(&mut g, &p, &acq, Some(&ret), &naive)?;
        let g_naive = total_gradient(&mut g, &parts_naive, &p);
        let mut diff = g_zero.clone();
        diff.axpy(-1.0, &g_naive);
        h.err_within("zero_alpha_matches_naive", diff.norm(), 1e-12);
    }

    // The adapted retention gradient equals (I - alpha H_acq) g_ret(theta'),
    // assembled here from its two factors without double backward.
    {
        let lean = InnerStepConfig {
            include_plain_retention: false,
            ..cfg
        };
        let mut g = Graph::new();
        let p = student.params.inject(&mut g);
        let parts = meta_student_loss_parts(&mut g, &p, &acq, Some(&ret), &lean)?;
        let total = total_gradient(&mut g, &parts, &p);
        let acq_grads = g.grad(parts.acq, &p.nodes);
        let mut adapted = total.clone();
        adapted.axpy(-1.0, &grads_to_vector(&g, &student.layout, &acq_grads));

        let theta_prime = parts.theta_prime.as_ref().unwrap().read_values(&g);
        let mut g2 = Graph::new();
        let p2 = theta_prime.inject(&mut g2);
        let ret_node = ret(&mut g2, &p2)?;
        let ret_grads = g2.grad(ret_node, &p2.nodes);
        let g_ret_prime = grads_to_vector(&g2, &student.layout, &ret_grads);

        let mut g3 = Graph::new();
        let p3 = student.params.inject(&mut g3);
        let acq_node = acq(&mut g3, &p3)?;
        let h_times = hvp(&mut g3, acq_node, &p3, &g_ret_prime);
        let mut want = g_ret_prime.clone();
        want.axpy(-lean.alpha, &h_times);
        h.err_within(
            "curvature_identity",
            rel_err_norm(
                adapted.values.as_slice().unwrap(),
                want.values.as_slice().unwrap(),
            ),
            1e-9,
        );
    }
    Ok(())
}

fn taylor_suite(h: &mut Harness, seed: u64) -> Result<()> {
    let mut rng = stream_rng(seed, Stream::Diagnostics);
    let n = 5;
    let a_target = randn_vec(n, &mut rng);
    let b_target = randn_vec(n, &mut rng);
    let params = flat_params(n, &mut rng);
    let half_sq = |target: Array1<f64>| {
        move |g: &mut Graph, p: &ParamNodes| -> Result<NodeId> {
            let t = g.leaf(target.clone().into_dyn());
            let d = g.sub(p.nodes[0], t);
            let sq = g.mul(d, d);
            let s = g.sum_all(sq);
            Ok(g.scale(s, 0.5))
        }
    };
    // On a quadratic the first-order expansion of the retention gradient is
    // exact, so the residual vanishes.
    let r = taylor_residual(&half_sq(a_target), &half_sq(b_target), &params, 0.1)?;
    h.err_within("quadratic_residual", r, 1e-12);

    // On smooth networks the residual is O(alpha^2): halving alpha must
    // shrink it by about four.
    let setup = fd_setup(seed)?;
    let FdSetup {
        teacher,
        student,
        x_acq,
        x_ret,
    } = &setup;
    let acq = sq_builder(teacher, student, x_acq);
    let ret = sq_builder(teacher, student, x_ret);
    let alphas = [1e-2, 5e-3, 2.5e-3];
    let mut residuals = Vec::new();
    for alpha in alphas {
        residuals.push(taylor_residual(&acq, &ret, &student.params, alpha)?);
    }
    for k in 1..alphas.len() {
        h.within_window(
            &format!("contraction_ratio_{}", k - 1),
            residuals[k - 1] / residuals[k],
            4.0,
            0.7,
        );
    }
    Ok(())
}
