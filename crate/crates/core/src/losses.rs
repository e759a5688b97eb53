//! Loss builders. Every loss is assembled on a caller-supplied [`Graph`] so
//! its gradient nodes can themselves be differentiated (the meta update and
//! the Hessian-vector products depend on this).
//!
//! Probability-space conventions: probabilities come from row-wise softmax,
//! logarithms clamp their argument at [`PROB_FLOOR`], and `0 * log 0 = 0`.
//! Batch losses are means over the leading axis.

use ndarray::ArrayD;

use crate::autodiff::{Graph, NodeId};
use crate::{Error, Result};

/// Probabilities below this are clamped before any logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

fn batch_rows(g: &Graph, x: NodeId) -> (usize, usize) {
    let sh = g.shape(x);
    assert!(sh.len() == 2, "logits must be [n, c], got {sh:?}");
    (sh[0], sh[1])
}

/// Row-wise softmax of a logits node `[n, c]`. The per-row max is subtracted
/// as a detached constant; this changes no values and keeps exponents tame.
pub fn softmax(g: &mut Graph, logits: NodeId) -> NodeId {
    let (n, c) = batch_rows(g, logits);
    let shifted = sub_row_max(g, logits, n, c);
    let e = g.exp(shifted);
    let z = g.sum_axis_keep(e, 1);
    let zi = g.recip(z);
    let zib = g.broadcast_to(zi, &[n, c]);
    g.mul(e, zib)
}

/// Row-wise log-softmax, `x - max - ln(sum exp(x - max))`.
pub fn log_softmax(g: &mut Graph, logits: NodeId) -> NodeId {
    let (n, c) = batch_rows(g, logits);
    let shifted = sub_row_max(g, logits, n, c);
    let e = g.exp(shifted);
    let z = g.sum_axis_keep(e, 1);
    let lz = g.ln(z);
    let lzb = g.broadcast_to(lz, &[n, c]);
    g.sub(shifted, lzb)
}

fn sub_row_max(g: &mut Graph, logits: NodeId, n: usize, c: usize) -> NodeId {
    let vals = g.value(logits);
    let mut maxes = Vec::with_capacity(n);
    for r in 0..n {
        let mut m = f64::NEG_INFINITY;
        for j in 0..c {
            m = m.max(vals[[r, j]]);
        }
        maxes.push(m);
    }
    let mx = g.leaf(ArrayD::from_shape_vec(ndarray::IxDyn(&[n, 1]), maxes).unwrap());
    let mxb = g.broadcast_to(mx, &[n, c]);
    g.sub(logits, mxb)
}

/// Mean absolute logit gap: batch mean of the per-sample L1 distance between
/// teacher and student logits. The distillation objective for both the
/// acquisition and retention terms.
pub fn kd_mae(g: &mut Graph, t_logits: NodeId, s_logits: NodeId) -> NodeId {
    let (n, _) = batch_rows(g, t_logits);
    let (ns, _) = batch_rows(g, s_logits);
    assert_eq!(n, ns, "teacher/student batch mismatch");
    let d = g.sub(t_logits, s_logits);
    let a = g.abs(d);
    let s = g.sum_all(a);
    g.scale(s, 1.0 / n as f64)
}

/// KL(p || q) averaged over the batch; `p`, `q` are probability nodes
/// `[n, c]`. Both arguments are clamped at [`PROB_FLOOR`] inside the logs,
/// and zero rows of `p` contribute nothing because `p` multiplies.
pub fn kl_divergence(g: &mut Graph, p: NodeId, q: NodeId) -> NodeId {
    let (n, _) = batch_rows(g, p);
    let pc = g.clamp_min(p, PROB_FLOOR);
    let qc = g.clamp_min(q, PROB_FLOOR);
    let lp = g.ln(pc);
    let lq = g.ln(qc);
    let d = g.sub(lp, lq);
    let t = g.mul(p, d);
    let s = g.sum_all(t);
    g.scale(s, 1.0 / n as f64)
}

/// Jensen-Shannon divergence between teacher and student predictive
/// distributions, built from raw logits. Batch mean; bounded by `ln 2`.
pub fn js_divergence(g: &mut Graph, t_logits: NodeId, s_logits: NodeId) -> NodeId {
    let p = softmax(g, t_logits);
    let q = softmax(g, s_logits);
    let s = g.add(p, q);
    let m = g.scale(s, 0.5);
    let kpm = kl_divergence(g, p, m);
    let kqm = kl_divergence(g, q, m);
    let sum = g.add(kpm, kqm);
    g.scale(sum, 0.5)
}

/// Teacher-confidence prior: cross-entropy of the teacher's own argmax
/// labels (lowest index wins ties). Pulls synthetic samples toward regions
/// the teacher labels decisively.
pub fn one_hot_loss(g: &mut Graph, t_logits: NodeId) -> NodeId {
    let (n, c) = batch_rows(g, t_logits);
    let labels: Vec<usize> = {
        let vals = g.value(t_logits);
        (0..n)
            .map(|r| {
                let mut best = 0;
                for j in 1..c {
                    if vals[[r, j]] > vals[[r, best]] {
                        best = j;
                    }
                }
                best
            })
            .collect()
    };
    cross_entropy(g, t_logits, &labels)
}

/// Mean negative L1 activation magnitude across the supplied feature maps:
/// `-(1/(n*L)) * sum_l ||A_l||_1`. Larger activations mean a lower loss.
pub fn activation_loss(g: &mut Graph, traces: &[NodeId]) -> NodeId {
    assert!(
        !traces.is_empty(),
        "activation loss needs at least one trace"
    );
    let n = g.shape(traces[0])[0];
    let mut total = None;
    for &t in traces {
        assert_eq!(g.shape(t)[0], n, "trace batch mismatch");
        let a = g.abs(t);
        let s = g.sum_all(a);
        total = Some(match total {
            None => s,
            Some(acc) => g.add(acc, s),
        });
    }
    let l = traces.len();
    g.scale(total.unwrap(), -1.0 / (n * l) as f64)
}

/// Negative entropy of the batch-averaged teacher prediction,
/// `pbar . ln pbar`. Minimized (at `-ln c`) when the synthetic batch covers
/// all classes evenly.
pub fn entropy_max_loss(g: &mut Graph, t_logits: NodeId) -> NodeId {
    let (n, _) = batch_rows(g, t_logits);
    let p = softmax(g, t_logits);
    let s = g.sum_axis_keep(p, 0);
    let pbar = g.scale(s, 1.0 / n as f64);
    let pc = g.clamp_min(pbar, PROB_FLOOR);
    let lp = g.ln(pc);
    let t = g.mul(pbar, lp);
    g.sum_all(t)
}

/// Combined sample prior: one-hot confidence plus `gamma` times the
/// activation term plus `delta` times the entropy term.
pub fn prior_loss(
    g: &mut Graph,
    t_logits: NodeId,
    traces: &[NodeId],
    gamma: f64,
    delta: f64,
) -> NodeId {
    let oh = one_hot_loss(g, t_logits);
    let act = activation_loss(g, traces);
    let em = entropy_max_loss(g, t_logits);
    let act_s = g.scale(act, gamma);
    let em_s = g.scale(em, delta);
    let a = g.add(oh, act_s);
    g.add(a, em_s)
}

/// Generator objective: maximize teacher/student disagreement under the
/// sample prior, `-JS(t, s) + prior`.
pub fn generator_loss(
    g: &mut Graph,
    t_logits: NodeId,
    s_logits: NodeId,
    traces: &[NodeId],
    gamma: f64,
    delta: f64,
) -> NodeId {
    let js = js_divergence(g, t_logits, s_logits);
    let njs = g.neg(js);
    let prior = prior_loss(g, t_logits, traces, gamma, delta);
    g.add(njs, prior)
}

/// Mean cross-entropy against integer labels; supervised pretraining.
pub fn cross_entropy(g: &mut Graph, logits: NodeId, labels: &[usize]) -> NodeId {
    let (n, c) = batch_rows(g, logits);
    assert_eq!(labels.len(), n, "label count must match batch");
    let mut mask = ArrayD::zeros(ndarray::IxDyn(&[n, c]));
    for (r, &y) in labels.iter().enumerate() {
        assert!(y < c, "label {y} out of range for {c} classes");
        mask[[r, y]] = 1.0;
    }
    let mk = g.leaf(mask);
    let ls = log_softmax(g, logits);
    let picked = g.mul(mk, ls);
    let s = g.sum_all(picked);
    g.scale(s, -1.0 / n as f64)
}

/// Fraction of rows whose argmax (lowest index on ties) equals the label.
pub fn accuracy(logits: &ArrayD<f64>, labels: &[usize]) -> Result<f64> {
    let sh = logits.shape();
    if sh.len() != 2 || sh[0] != labels.len() {
        return Err(Error::Shape(format!(
            "accuracy: logits {sh:?} vs {} labels",
            labels.len()
        )));
    }
    let (n, c) = (sh[0], sh[1]);
    let mut hits = 0usize;
    for (r, &y) in labels.iter().enumerate() {
        let mut best = 0;
        for j in 1..c {
            if logits[[r, j]] > logits[[r, best]] {
                best = j;
            }
        }
        if best == y {
            hits += 1;
        }
    }
    Ok(hits as f64 / n as f64)
}

/// Value-level KL between two explicit probability vectors, with input
/// validation; diagnostics helper, mirrors the graph builder exactly.
pub fn checked_kl(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() || p.is_empty() {
        return Err(Error::Shape("kl: length mismatch or empty".into()));
    }
    for v in p.iter().chain(q.iter()) {
        if !v.is_finite() || *v < 0.0 {
            return Err(Error::Numeric(format!("kl: invalid probability {v}")));
        }
    }
    let (sp, sq): (f64, f64) = (p.iter().sum(), q.iter().sum());
    if (sp - 1.0).abs() > 1e-6 || (sq - 1.0).abs() > 1e-6 {
        return Err(Error::Numeric(format!(
            "kl: inputs must sum to 1 (got {sp}, {sq})"
        )));
    }
    let mut acc = 0.0;
    for (&pi, &qi) in p.iter().zip(q) {
        if pi == 0.0 {
            continue;
        }
        acc += pi * (pi.max(PROB_FLOOR).ln() - qi.max(PROB_FLOOR).ln());
    }
    Ok(acc)
}

/// High-precision reference values computed with a 50-digit arbitrary
/// precision evaluator applying the exact same clamp conventions
/// (floor 1e-12 inside logs, 0*log(0) = 0). Regenerate with mpmath if the
/// conventions ever change. The runtime verification suites check against
/// these, so they live outside the test module.
#[allow(clippy::excessive_precision)] // constants keep the oracle's full digit string
pub mod oracle {
    /// (p, q, KL(p || q)) with the clamp conventions above.
    pub const KL_CASES: &[(&[f64], &[f64], f64)] = &[
        (
            &[0.1, 0.2, 0.3, 0.4],
            &[0.25, 0.25, 0.25, 0.25],
            0.1064401352862231516522785,
        ),
        (
            &[0.7, 0.1, 0.1, 0.1],
            &[0.1, 0.7, 0.1, 0.1],
            1.167546089433187983063212,
        ),
        (
            &[0.5, 0.5, 0.0, 0.0],
            &[0.25, 0.25, 0.25, 0.25],
            std::f64::consts::LN_2,
        ),
        (&[0.3, 0.7], &[0.0, 1.0], 7.678442032723670999439098),
    ];
    /// Logit rows for the two-row JS / entropy references below.
    pub const TWO_ROW_T: [[f64; 3]; 2] = [[0.5, -1.2, 2.0], [0.0, 0.3, -0.7]];
    pub const TWO_ROW_S: [[f64; 3]; 2] = [[1.1, 0.4, -0.3], [-0.2, 0.9, 0.1]];
    pub const JS_TWO_ROW: f64 = 0.1280154841020446472282085;
    pub const EM_TWO_ROW: f64 = -1.050920404392020484309421;
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::check::{central_diff_grad, rel_err_norm};
    use crate::nets::{ForwardMode, NetKind, NetSpec, Network};
    use crate::param::ParamVector;
    use crate::rng::{stream_rng, Stream};
    use ndarray::{Array1, ArrayD, IxDyn};
    use proptest::prelude::*;

    use super::oracle::KL_CASES;

    const LN2: f64 = std::f64::consts::LN_2;
    const JS_TWO_ROW_REFERENCE: f64 = oracle::JS_TWO_ROW;
    const EM_TWO_ROW_REFERENCE: f64 = oracle::EM_TWO_ROW;

    fn leaf2(g: &mut Graph, rows: &[&[f64]]) -> NodeId {
        let n = rows.len();
        let c = rows[0].len();
        let data: Vec<f64> = rows.iter().flat_map(|r| r.iter().cloned()).collect();
        g.leaf(ArrayD::from_shape_vec(IxDyn(&[n, c]), data).unwrap())
    }

    #[test]
    fn kl_matches_high_precision_reference() {
        for (p, q, want) in KL_CASES {
            let mut g = Graph::new();
            let pn = leaf2(&mut g, &[p]);
            let qn = leaf2(&mut g, &[q]);
            let kl = kl_divergence(&mut g, pn, qn);
            assert!(
                (g.scalar_value(kl) - want).abs() < 1e-12,
                "graph kl for {p:?} || {q:?}"
            );
            assert!((checked_kl(p, q).unwrap() - want).abs() < 1e-12);
        }
    }

    #[test]
    fn js_matches_high_precision_reference() {
        let mut g = Graph::new();
        let t = leaf2(&mut g, &[&[0.5, -1.2, 2.0], &[0.0, 0.3, -0.7]]);
        let s = leaf2(&mut g, &[&[1.1, 0.4, -0.3], &[-0.2, 0.9, 0.1]]);
        let js = js_divergence(&mut g, t, s);
        assert!((g.scalar_value(js) - JS_TWO_ROW_REFERENCE).abs() < 1e-12);
    }

    #[test]
    fn entropy_term_matches_high_precision_reference() {
        let mut g = Graph::new();
        let t = leaf2(&mut g, &[&[0.5, -1.2, 2.0], &[0.0, 0.3, -0.7]]);
        let em = entropy_max_loss(&mut g, t);
        assert!((g.scalar_value(em) - EM_TWO_ROW_REFERENCE).abs() < 1e-12);
    }

    #[test]
    fn kd_mae_identity_is_zero_and_hand_case_matches() {
        let mut g = Graph::new();
        let t = leaf2(&mut g, &[&[1.0, -2.0, 0.5], &[0.0, 3.0, -1.0]]);
        let same = kd_mae(&mut g, t, t);
        assert_eq!(g.scalar_value(same), 0.0);
        let s = leaf2(&mut g, &[&[0.0, -2.0, 1.5], &[1.0, 3.0, -1.0]]);
        // Row L1 gaps: |1|+0+|‑1| = 2 and |‑1|+0+0 = 1; mean 1.5.
        let d = kd_mae(&mut g, t, s);
        assert!((g.scalar_value(d) - 1.5).abs() < 1e-15);
    }

    #[test]
    fn js_is_zero_on_identical_and_ln2_on_disjoint() {
        let mut g = Graph::new();
        let t = leaf2(&mut g, &[&[0.2, 1.4, -0.8]]);
        let same = js_divergence(&mut g, t, t);
        assert!(g.scalar_value(same).abs() < 1e-15);
        // Logit gap 200 puts the off-class mass below 1e-80; the divergence
        // sits within 1e-9 of its upper bound.
        let a = leaf2(&mut g, &[&[200.0, 0.0, 0.0], &[0.0, 200.0, 0.0]]);
        let b = leaf2(&mut g, &[&[0.0, 200.0, 0.0], &[0.0, 0.0, 200.0]]);
        let js = js_divergence(&mut g, a, b);
        assert!((g.scalar_value(js) - LN2).abs() < 1e-9);
    }

    #[test]
    fn uniform_teacher_pins_one_hot_and_entropy_bounds() {
        let c = 5;
        let mut g = Graph::new();
        let row = vec![0.7; c];
        let t = leaf2(&mut g, &[&row, &row]);
        let oh = one_hot_loss(&mut g, t);
        assert!((g.scalar_value(oh) - (c as f64).ln()).abs() < 1e-9);
        let em = entropy_max_loss(&mut g, t);
        assert!((g.scalar_value(em) + (c as f64).ln()).abs() < 1e-9);
    }

    #[test]
    fn one_hot_breaks_ties_toward_lowest_index() {
        let mut g = Graph::new();
        // Classes 0 and 2 tie; the mask must select class 0.
        let t = leaf2(&mut g, &[&[3.0, 1.0, 3.0]]);
        let oh = one_hot_loss(&mut g, t);
        let ce0 = cross_entropy(&mut g, t, &[0]);
        assert_eq!(g.scalar_value(oh), g.scalar_value(ce0));
    }

    #[test]
    fn activation_loss_matches_hand_computation() {
        let mut g = Graph::new();
        let a = leaf2(&mut g, &[&[1.0, -2.0], &[0.5, 0.0]]);
        let b = leaf2(&mut g, &[&[-1.0, 1.0], &[2.0, -3.0]]);
        let loss = activation_loss(&mut g, &[a, b]);
        // Totals: 3.5 and 7.0; -(3.5 + 7.0) / (2 samples * 2 layers).
        assert!((g.scalar_value(loss) - (-(3.5 + 7.0) / 4.0)).abs() < 1e-15);
    }

    #[test]
    fn generator_loss_is_the_documented_composition() {
        let mut g = Graph::new();
        let t = leaf2(&mut g, &[&[0.5, -1.2, 2.0], &[0.0, 0.3, -0.7]]);
        let s = leaf2(&mut g, &[&[1.1, 0.4, -0.3], &[-0.2, 0.9, 0.1]]);
        let tr = leaf2(&mut g, &[&[1.0, -1.0], &[0.5, 2.0]]);
        let (gamma, delta) = (0.4, 1.7);
        let total = generator_loss(&mut g, t, s, &[tr], gamma, delta);
        let js = js_divergence(&mut g, t, s);
        let oh = one_hot_loss(&mut g, t);
        let act = activation_loss(&mut g, &[tr]);
        let em = entropy_max_loss(&mut g, t);
        let want = -g.scalar_value(js)
            + g.scalar_value(oh)
            + gamma * g.scalar_value(act)
            + delta * g.scalar_value(em);
        assert!((g.scalar_value(total) - want).abs() < 1e-15);
    }

    #[test]
    fn cross_entropy_matches_hand_oracle() {
        let mut g = Graph::new();
        let t = leaf2(&mut g, &[&[2.0, 0.0], &[0.0, 1.0]]);
        let ce = cross_entropy(&mut g, t, &[0, 0]);
        let want = (-((2.0f64.exp()) / (2.0f64.exp() + 1.0)).ln()
            - ((1.0f64) / (1.0 + 1.0f64.exp())).ln())
            / 2.0;
        assert!((g.scalar_value(ce) - want).abs() < 1e-12);
    }

    #[test]
    fn accuracy_counts_argmax_hits() {
        let logits =
            ArrayD::from_shape_vec(IxDyn(&[3, 2]), vec![2.0, 1.0, 0.0, 5.0, 1.0, 1.0]).unwrap();
        // Ties go to the lowest index, so row 3 predicts class 0.
        let acc = accuracy(&logits, &[0, 1, 0]).unwrap();
        assert_eq!(acc, 1.0);
        let acc2 = accuracy(&logits, &[1, 1, 1]).unwrap();
        assert!((acc2 - 1.0 / 3.0).abs() < 1e-15);
        assert!(accuracy(&logits, &[0, 1]).is_err());
    }

    #[test]
    fn checked_kl_rejects_non_distributions() {
        assert!(checked_kl(&[0.5, 0.6], &[0.5, 0.5]).is_err());
        assert!(checked_kl(&[-0.1, 1.1], &[0.5, 0.5]).is_err());
        assert!(checked_kl(&[0.5, 0.5], &[0.5]).is_err());
        assert!(checked_kl(&[0.5, 0.5], &[f64::NAN, 1.0]).is_err());
    }

    /// All eight loss heads, each differentiated through a small smooth
    /// network against central differences.
    #[test]
    fn loss_gradients_match_finite_differences_through_tanh_nets() {
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
        let teacher = Network::build(&spec_t, 3).unwrap();
        let student = Network::build(&spec_s, 4).unwrap();
        assert!(teacher.param_count() + student.param_count() <= 2000);
        assert!(teacher.is_smooth() && student.is_smooth());
        let mut rng = stream_rng(7, Stream::Diagnostics);
        let x = ArrayD::from_shape_vec(
            IxDyn(&[4, 3]),
            (0..12).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap();

        type LossFn = Box<dyn Fn(&mut Graph, NodeId, NodeId, &[NodeId]) -> NodeId>;
        let heads: Vec<(&str, LossFn)> = vec![
            ("kd_mae", Box::new(|g, t, s, _| kd_mae(g, t, s))),
            (
                "kl",
                Box::new(|g, t, s, _| {
                    let p = softmax(g, t);
                    let q = softmax(g, s);
                    kl_divergence(g, p, q)
                }),
            ),
            ("js", Box::new(|g, t, s, _| js_divergence(g, t, s))),
            ("one_hot", Box::new(|g, t, _, _| one_hot_loss(g, t))),
            ("activation", Box::new(|g, _, _, tr| activation_loss(g, tr))),
            ("entropy", Box::new(|g, t, _, _| entropy_max_loss(g, t))),
            (
                "prior",
                Box::new(|g, t, _, tr| prior_loss(g, t, tr, 0.6, 1.3)),
            ),
            (
                "generator",
                Box::new(|g, t, s, tr| generator_loss(g, t, s, tr, 0.6, 1.3)),
            ),
        ];

        for (name, head) in &heads {
            // Differentiate w.r.t. the teacher parameters (every head uses
            // the teacher path; kd/js/kl also consume the student's logits,
            // held at the student's own fixed parameters).
            let eval = |flat: &Array1<f64>| {
                let pv = ParamVector::from_values(teacher.layout.clone(), flat.clone());
                let mut g = Graph::new();
                let tp = pv.inject(&mut g);
                let sp = student.inject_params(&mut g);
                let xn = g.leaf(x.clone());
                let (tl, tr) = teacher
                    .forward_traced_nodes(&mut g, &tp, xn, ForwardMode::Eval)
                    .unwrap();
                let sl = student
                    .forward_nodes(&mut g, &sp, xn, ForwardMode::Eval)
                    .unwrap();
                let loss = head(&mut g, tl, sl, &tr);
                g.scalar_value(loss)
            };
            let mut g = Graph::new();
            let tp = teacher.inject_params(&mut g);
            let sp = student.inject_params(&mut g);
            let xn = g.leaf(x.clone());
            let (tl, tr) = teacher
                .forward_traced_nodes(&mut g, &tp, xn, ForwardMode::Eval)
                .unwrap();
            let sl = student
                .forward_nodes(&mut g, &sp, xn, ForwardMode::Eval)
                .unwrap();
            let loss = head(&mut g, tl, sl, &tr);
            let grads = g.grad(loss, &tp.nodes);
            let got = crate::param::grads_to_vector(&g, &teacher.layout, &grads);
            let fd = central_diff_grad(eval, &teacher.params.values, 1e-5);
            let err = rel_err_norm(got.values.as_slice().unwrap(), fd.as_slice().unwrap());
            assert!(err < 1e-4, "{name}: rel err {err:.3e}");
        }
    }

    fn logits_strategy(n: usize, c: usize) -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(-8.0f64..8.0, n * c)
    }

    proptest! {
        #[test]
        fn kd_mae_is_a_metric(a in logits_strategy(3, 4), b in logits_strategy(3, 4), c in logits_strategy(3, 4)) {
            let mut g = Graph::new();
            let to = |g: &mut Graph, v: &Vec<f64>| {
                g.leaf(ArrayD::from_shape_vec(IxDyn(&[3, 4]), v.clone()).unwrap())
            };
            let (an, bn, cn) = (to(&mut g, &a), to(&mut g, &b), to(&mut g, &c));
            let __t0 = kd_mae(&mut g, an, bn);
            let dab = g.scalar_value(__t0);
            let __t1 = kd_mae(&mut g, bn, an);
            let dba = g.scalar_value(__t1);
            let __t2 = kd_mae(&mut g, an, cn);
            let dac = g.scalar_value(__t2);
            let __t3 = kd_mae(&mut g, cn, bn);
            let dcb = g.scalar_value(__t3);
            prop_assert!(dab >= 0.0);
            prop_assert!((dab - dba).abs() < 1e-12);
            prop_assert!(dab <= dac + dcb + 1e-12);
        }

        #[test]
        fn js_respects_range_and_symmetry(a in logits_strategy(2, 5), b in logits_strategy(2, 5)) {
            let mut g = Graph::new();
            let an = g.leaf(ArrayD::from_shape_vec(IxDyn(&[2, 5]), a).unwrap());
            let bn = g.leaf(ArrayD::from_shape_vec(IxDyn(&[2, 5]), b).unwrap());
            let __t4 = js_divergence(&mut g, an, bn);
            let ab = g.scalar_value(__t4);
            let __t5 = js_divergence(&mut g, bn, an);
            let ba = g.scalar_value(__t5);
            prop_assert!((-1e-15..=LN2 + 1e-12).contains(&ab), "js out of range: {ab}");
            prop_assert!((ab - ba).abs() < 1e-12);
        }

        #[test]
        fn kl_of_softmax_pairs_is_nonnegative(a in logits_strategy(2, 4), b in logits_strategy(2, 4)) {
            let mut g = Graph::new();
            let an = g.leaf(ArrayD::from_shape_vec(IxDyn(&[2, 4]), a).unwrap());
            let bn = g.leaf(ArrayD::from_shape_vec(IxDyn(&[2, 4]), b).unwrap());
            let p = softmax(&mut g, an);
            let q = softmax(&mut g, bn);
            let __t6 = kl_divergence(&mut g, p, q);
            let kl = g.scalar_value(__t6);
            prop_assert!(kl >= -1e-12, "kl negative: {kl}");
        }

        #[test]
        fn one_hot_loss_is_nonnegative_and_entropy_in_range(a in logits_strategy(3, 4)) {
            let mut g = Graph::new();
            let an = g.leaf(ArrayD::from_shape_vec(IxDyn(&[3, 4]), a).unwrap());
            let __t7 = one_hot_loss(&mut g, an);
            let oh = g.scalar_value(__t7);
            prop_assert!(oh >= -1e-12);
            let __t8 = entropy_max_loss(&mut g, an);
            let em = g.scalar_value(__t8);
            prop_assert!(em >= -(4f64).ln() - 1e-12 && em <= 1e-12, "entropy term {em}");
        }

        #[test]
        fn softmax_rows_are_distributions(a in logits_strategy(3, 6)) {
            let mut g = Graph::new();
            let an = g.leaf(ArrayD::from_shape_vec(IxDyn(&[3, 6]), a).unwrap());
            let p = softmax(&mut g, an);
            let vals = g.value(p);
            for r in 0..3 {
                let row: Vec<f64> = (0..6).map(|j| vals[[r, j]]).collect();
                prop_assert!(row.iter().all(|&v| v > 0.0));
                let s: f64 = row.iter().sum();
                prop_assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }
}
