//! Define-by-run reverse-mode automatic differentiation on f64 tensors.
//!
//! The one property everything downstream relies on: [`Graph::grad`] emits the
//! backward pass as *new graph nodes* rather than detached values. A gradient
//! is therefore itself a differentiable expression, and calling `grad` on a
//! function of a gradient yields exact second-order derivatives (gradients
//! through a recorded inner SGD step, Hessian-vector products) with no
//! finite-difference or first-order approximation anywhere.
//!
//! Values are evaluated eagerly at node creation, so `Graph` is also the
//! forward interpreter. A graph is intended to live for one optimization step
//! and be dropped afterwards.
//!
//! Conventions:
//! - scalars are tensors of shape `[1]`; `grad` targets must be scalar,
//! - broadcasting is explicit (`broadcast_to` / `sum_to` are adjoint),
//! - convolution is lowered to `im2col` + `matmul` (stride 1), so its
//!   backward pass is composed of ops the tape already differentiates,
//! - non-smooth ops (`abs`, `leaky_relu`, `clamp_min`) differentiate through
//!   a mask captured as a constant, i.e. the mask itself is not
//!   differentiated. This matches the usual subgradient semantics.

use ndarray::{ArrayD, Axis, Ix2, IxDyn};

#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
pub struct NodeId(u32);

impl NodeId {
    fn idx(self) -> usize {
        self.0 as usize
    }
}

/// Geometry of a stride-1 2-D convolution lowering.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        self.h + 2 * self.pad + 1 - self.kh
    }
    pub fn out_w(&self) -> usize {
        self.w + 2 * self.pad + 1 - self.kw
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Neg(NodeId),
    Recip(NodeId),
    Sqrt(NodeId),
    Exp(NodeId),
    Ln(NodeId),
    Tanh(NodeId),
    Abs(NodeId),
    LeakyRelu(NodeId, f64),
    ClampMin(NodeId, f64),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Reshape(NodeId),
    BroadcastTo(NodeId),
    SumTo(NodeId),
    SumAll(NodeId),
    SumAxis(NodeId),
    Permute(NodeId, Vec<usize>),
    Im2Col(NodeId, ConvGeom),
    Col2Im(NodeId, ConvGeom),
    Upsample2x(NodeId),
    PoolSum2x(NodeId),
}

fn op_inputs(op: &Op) -> (Option<NodeId>, Option<NodeId>) {
    use Op::*;
    match op {
        Leaf => (None, None),
        Neg(a)
        | Recip(a)
        | Sqrt(a)
        | Exp(a)
        | Ln(a)
        | Tanh(a)
        | Abs(a)
        | LeakyRelu(a, _)
        | ClampMin(a, _)
        | Scale(a, _)
        | AddScalar(a)
        | Transpose(a)
        | Reshape(a)
        | BroadcastTo(a)
        | SumTo(a)
        | SumAll(a)
        | SumAxis(a)
        | Permute(a, _)
        | Im2Col(a, _)
        | Col2Im(a, _)
        | Upsample2x(a)
        | PoolSum2x(a) => (Some(*a), None),
        Add(a, b) | Sub(a, b) | Mul(a, b) | MatMul(a, b) => (Some(*a), Some(*b)),
    }
}

struct Node {
    op: Op,
    value: ArrayD<f64>,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Materializes an array in logical (row-major) order with the given shape.
fn reshape_std(a: &ArrayD<f64>, shape: &[usize]) -> ArrayD<f64> {
    let flat: Vec<f64> = a.iter().cloned().collect();
    ArrayD::from_shape_vec(IxDyn(shape), flat).expect("reshape: element count mismatch")
}

fn sum_to_value(v: &ArrayD<f64>, target: &[usize]) -> ArrayD<f64> {
    let mut out = v.to_owned();
    while out.ndim() > target.len() {
        out = out.sum_axis(Axis(0));
    }
    assert_eq!(out.ndim(), target.len(), "sum_to: rank underflow");
    for ax in 0..target.len() {
        if out.shape()[ax] != target[ax] {
            assert_eq!(target[ax], 1, "sum_to: target {:?} not reducible", target);
            out = out.sum_axis(Axis(ax)).insert_axis(Axis(ax));
        }
    }
    out
}

fn im2col_value(x: &ArrayD<f64>, g: &ConvGeom) -> ArrayD<f64> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let xs = x.as_standard_layout();
    let s = xs.as_slice().expect("standard layout");
    let row_len = g.c * g.kh * g.kw;
    let mut out = vec![0.0; g.n * oh * ow * row_len];
    for n in 0..g.n {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = ((n * oh + oy) * ow + ox) * row_len;
                for c in 0..g.c {
                    for ky in 0..g.kh {
                        let iy = (oy + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        for kx in 0..g.kw {
                            let ix = (ox + kx) as isize - g.pad as isize;
                            if ix < 0 || ix >= g.w as isize {
                                continue;
                            }
                            let col = (c * g.kh + ky) * g.kw + kx;
                            out[row + col] =
                                s[((n * g.c + c) * g.h + iy as usize) * g.w + ix as usize];
                        }
                    }
                }
            }
        }
    }
    ArrayD::from_shape_vec(IxDyn(&[g.n * oh * ow, row_len]), out).unwrap()
}

/// Exact adjoint of `im2col_value`: scatter-adds column entries back to image
/// positions, so `<im2col(x), y> == <x, col2im(y)>` for all x, y.
fn col2im_value(cols: &ArrayD<f64>, g: &ConvGeom) -> ArrayD<f64> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let cs = cols.as_standard_layout();
    let s = cs.as_slice().expect("standard layout");
    let row_len = g.c * g.kh * g.kw;
    assert_eq!(
        cols.shape(),
        &[g.n * oh * ow, row_len],
        "col2im: bad input shape"
    );
    let mut out = vec![0.0; g.n * g.c * g.h * g.w];
    for n in 0..g.n {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = ((n * oh + oy) * ow + ox) * row_len;
                for c in 0..g.c {
                    for ky in 0..g.kh {
                        let iy = (oy + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        for kx in 0..g.kw {
                            let ix = (ox + kx) as isize - g.pad as isize;
                            if ix < 0 || ix >= g.w as isize {
                                continue;
                            }
                            let col = (c * g.kh + ky) * g.kw + kx;
                            out[((n * g.c + c) * g.h + iy as usize) * g.w + ix as usize] +=
                                s[row + col];
                        }
                    }
                }
            }
        }
    }
    ArrayD::from_shape_vec(IxDyn(&[g.n, g.c, g.h, g.w]), out).unwrap()
}

fn upsample2x_value(x: &ArrayD<f64>) -> ArrayD<f64> {
    let sh = x.shape();
    assert_eq!(sh.len(), 4, "upsample2x expects [n,c,h,w]");
    let (n, c, h, w) = (sh[0], sh[1], sh[2], sh[3]);
    let xs = x.as_standard_layout();
    let s = xs.as_slice().unwrap();
    let mut out = vec![0.0; n * c * 4 * h * w];
    for i in 0..n * c {
        for y in 0..2 * h {
            for x_ in 0..2 * w {
                out[(i * 2 * h + y) * 2 * w + x_] = s[(i * h + y / 2) * w + x_ / 2];
            }
        }
    }
    ArrayD::from_shape_vec(IxDyn(&[n, c, 2 * h, 2 * w]), out).unwrap()
}

/// Sums each non-overlapping 2x2 window; adjoint of nearest `upsample2x`.
fn poolsum2x_value(x: &ArrayD<f64>) -> ArrayD<f64> {
    let sh = x.shape();
    assert_eq!(sh.len(), 4, "poolsum2x expects [n,c,h,w]");
    let (n, c, h, w) = (sh[0], sh[1], sh[2], sh[3]);
    assert!(
        h % 2 == 0 && w % 2 == 0,
        "poolsum2x needs even spatial dims"
    );
    let xs = x.as_standard_layout();
    let s = xs.as_slice().unwrap();
    let (ho, wo) = (h / 2, w / 2);
    let mut out = vec![0.0; n * c * ho * wo];
    for i in 0..n * c {
        for y in 0..ho {
            for x_ in 0..wo {
                let mut acc = 0.0;
                for dy in 0..2 {
                    for dx in 0..2 {
                        acc += s[(i * h + 2 * y + dy) * w + 2 * x_ + dx];
                    }
                }
                out[(i * ho + y) * wo + x_] = acc;
            }
        }
    }
    ArrayD::from_shape_vec(IxDyn(&[n, c, ho, wo]), out).unwrap()
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    fn push(&mut self, op: Op, value: ArrayD<f64>) -> NodeId {
        let id = NodeId(u32::try_from(self.nodes.len()).expect("graph too large"));
        self.nodes.push(Node { op, value });
        id
    }

    pub fn leaf(&mut self, value: ArrayD<f64>) -> NodeId {
        self.push(Op::Leaf, value)
    }

    pub fn scalar(&mut self, v: f64) -> NodeId {
        self.leaf(ArrayD::from_elem(IxDyn(&[1]), v))
    }

    pub fn zeros(&mut self, shape: &[usize]) -> NodeId {
        self.leaf(ArrayD::zeros(IxDyn(shape)))
    }

    pub fn value(&self, id: NodeId) -> &ArrayD<f64> {
        &self.nodes[id.idx()].value
    }

    pub fn scalar_value(&self, id: NodeId) -> f64 {
        let v = self.value(id);
        assert_eq!(v.len(), 1, "scalar_value on non-scalar node");
        v.iter().next().copied().unwrap()
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.idx()].value.shape()
    }

    fn unary(&mut self, a: NodeId, op: Op, f: impl Fn(f64) -> f64) -> NodeId {
        let v = self.nodes[a.idx()].value.mapv(f);
        self.push(op, v)
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Neg(a), |x| -x)
    }
    pub fn recip(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Recip(a), |x| 1.0 / x)
    }
    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Sqrt(a), f64::sqrt)
    }
    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Exp(a), f64::exp)
    }
    pub fn ln(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Ln(a), f64::ln)
    }
    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }
    pub fn abs(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Abs(a), f64::abs)
    }
    pub fn leaky_relu(&mut self, a: NodeId, slope: f64) -> NodeId {
        self.unary(a, Op::LeakyRelu(a, slope), |x| {
            if x > 0.0 {
                x
            } else {
                slope * x
            }
        })
    }
    pub fn clamp_min(&mut self, a: NodeId, lo: f64) -> NodeId {
        self.unary(a, Op::ClampMin(a, lo), |x| x.max(lo))
    }
    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        self.unary(a, Op::Scale(a, c), |x| c * x)
    }
    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        self.unary(a, Op::AddScalar(a), |x| x + c)
    }

    fn binary_elementwise(
        &mut self,
        a: NodeId,
        b: NodeId,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> NodeId {
        let (av, bv) = (&self.nodes[a.idx()].value, &self.nodes[b.idx()].value);
        assert_eq!(
            av.shape(),
            bv.shape(),
            "elementwise op on mismatched shapes"
        );
        let mut v = av.to_owned();
        v.zip_mut_with(bv, |x, &y| *x = f(*x, y));
        self.push(op, v)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary_elementwise(a, b, Op::Add(a, b), |x, y| x + y)
    }
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary_elementwise(a, b, Op::Sub(a, b), |x, y| x - y)
    }
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary_elementwise(a, b, Op::Mul(a, b), |x, y| x * y)
    }
    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let r = self.recip(b);
        self.mul(a, r)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = {
            let av = &self.nodes[a.idx()].value;
            let bv = &self.nodes[b.idx()].value;
            assert_eq!(av.ndim(), 2, "matmul lhs must be 2-D");
            assert_eq!(bv.ndim(), 2, "matmul rhs must be 2-D");
            assert_eq!(av.shape()[1], bv.shape()[0], "matmul inner dimension");
            let a2 = av.view().into_dimensionality::<Ix2>().unwrap();
            let b2 = bv.view().into_dimensionality::<Ix2>().unwrap();
            a2.dot(&b2).into_dyn()
        };
        self.push(Op::MatMul(a, b), v)
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let v = {
            let av = &self.nodes[a.idx()].value;
            assert_eq!(av.ndim(), 2, "transpose is 2-D only");
            av.t().to_owned()
        };
        self.push(Op::Transpose(a), v)
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> NodeId {
        let v = reshape_std(&self.nodes[a.idx()].value, shape);
        self.push(Op::Reshape(a), v)
    }

    pub fn broadcast_to(&mut self, a: NodeId, shape: &[usize]) -> NodeId {
        let v = self.nodes[a.idx()]
            .value
            .broadcast(IxDyn(shape))
            .unwrap_or_else(|| {
                panic!(
                    "cannot broadcast {:?} to {:?}",
                    self.nodes[a.idx()].value.shape(),
                    shape
                )
            })
            .to_owned();
        self.push(Op::BroadcastTo(a), v)
    }

    /// Reduces to `shape` by summing broadcast axes; adjoint of `broadcast_to`.
    pub fn sum_to(&mut self, a: NodeId, shape: &[usize]) -> NodeId {
        let v = sum_to_value(&self.nodes[a.idx()].value, shape);
        self.push(Op::SumTo(a), v)
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s = self.nodes[a.idx()].value.sum();
        self.push(Op::SumAll(a), ArrayD::from_elem(IxDyn(&[1]), s))
    }

    /// Sum along one axis, keeping it as a length-1 dimension.
    pub fn sum_axis_keep(&mut self, a: NodeId, axis: usize) -> NodeId {
        let v = self.nodes[a.idx()]
            .value
            .sum_axis(Axis(axis))
            .insert_axis(Axis(axis));
        self.push(Op::SumAxis(a), v)
    }

    pub fn permute(&mut self, a: NodeId, axes: &[usize]) -> NodeId {
        let v = {
            let view = self.nodes[a.idx()]
                .value
                .view()
                .permuted_axes(axes.to_vec());
            let shape = view.shape().to_vec();
            let flat: Vec<f64> = view.iter().cloned().collect();
            ArrayD::from_shape_vec(IxDyn(&shape), flat).unwrap()
        };
        self.push(Op::Permute(a, axes.to_vec()), v)
    }

    pub fn im2col(&mut self, a: NodeId, geom: ConvGeom) -> NodeId {
        assert_eq!(
            self.shape(a),
            &[geom.n, geom.c, geom.h, geom.w],
            "im2col input shape"
        );
        let v = im2col_value(&self.nodes[a.idx()].value, &geom);
        self.push(Op::Im2Col(a, geom), v)
    }

    pub fn col2im(&mut self, a: NodeId, geom: ConvGeom) -> NodeId {
        let v = col2im_value(&self.nodes[a.idx()].value, &geom);
        self.push(Op::Col2Im(a, geom), v)
    }

    pub fn upsample2x(&mut self, a: NodeId) -> NodeId {
        let v = upsample2x_value(&self.nodes[a.idx()].value);
        self.push(Op::Upsample2x(a), v)
    }

    pub fn poolsum2x(&mut self, a: NodeId) -> NodeId {
        let v = poolsum2x_value(&self.nodes[a.idx()].value);
        self.push(Op::PoolSum2x(a), v)
    }

    pub fn avgpool2x(&mut self, a: NodeId) -> NodeId {
        let p = self.poolsum2x(a);
        self.scale(p, 0.25)
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let n = self.nodes[a.idx()].value.len();
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n as f64)
    }

    /// `sum(a * b)` for equal shapes; the basic inner product.
    pub fn dot(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let m = self.mul(a, b);
        self.sum_all(m)
    }

    /// Stride-1 2-D convolution with bias, lowered to im2col + matmul.
    /// `x`: [n, c, h, w], `w`: [oc, c, kh, kw], `b`: [oc]. Output [n, oc, oh, ow].
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId, pad: usize) -> NodeId {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert_eq!(xs.len(), 4, "conv2d input must be [n,c,h,w]");
        assert_eq!(ws.len(), 4, "conv2d weight must be [oc,c,kh,kw]");
        assert_eq!(xs[1], ws[1], "conv2d channel mismatch");
        let geom = ConvGeom {
            n: xs[0],
            c: xs[1],
            h: xs[2],
            w: xs[3],
            kh: ws[2],
            kw: ws[3],
            pad,
        };
        let (oh, ow) = (geom.out_h(), geom.out_w());
        let oc = ws[0];
        let cols = self.im2col(x, geom);
        let wmat = self.reshape(w, &[oc, ws[1] * ws[2] * ws[3]]);
        let wt = self.transpose(wmat);
        let out = self.matmul(cols, wt);
        let bb = self.broadcast_to(b, &[geom.n * oh * ow, oc]);
        let out = self.add(out, bb);
        let out = self.reshape(out, &[geom.n, oh, ow, oc]);
        self.permute(out, &[0, 3, 1, 2])
    }

    /// Emits backward-pass nodes for scalar `y` and returns one gradient node
    /// per `wrt` entry (a zero tensor when `y` does not depend on it).
    /// Gradient nodes are ordinary graph nodes: differentiating them again
    /// gives exact higher-order derivatives.
    pub fn grad(&mut self, y: NodeId, wrt: &[NodeId]) -> Vec<NodeId> {
        assert_eq!(
            self.nodes[y.idx()].value.len(),
            1,
            "grad target must be a scalar node"
        );
        let n = y.idx() + 1;
        // Forward reachability from the requested leaves prunes the backward
        // sweep to the subgraph that can actually influence them.
        let mut needs = vec![false; n];
        for w in wrt {
            if w.idx() < n {
                needs[w.idx()] = true;
            }
        }
        for i in 0..n {
            if needs[i] {
                continue;
            }
            let (a, b) = op_inputs(&self.nodes[i].op);
            needs[i] = a.is_some_and(|a| needs[a.idx()]) || b.is_some_and(|b| needs[b.idx()]);
        }

        let mut adj: Vec<Option<NodeId>> = vec![None; n];
        if needs[y.idx()] {
            let one = self.scalar(1.0);
            adj[y.idx()] = Some(one);
        }

        fn accum(g: &mut Graph, adj: &mut [Option<NodeId>], target: NodeId, contrib: NodeId) {
            adj[target.idx()] = Some(match adj[target.idx()] {
                None => contrib,
                Some(prev) => g.add(prev, contrib),
            });
        }

        for i in (0..n).rev() {
            let Some(gy) = adj[i] else { continue };
            let op = self.nodes[i].op.clone();
            let out = NodeId(i as u32);
            match op {
                Op::Leaf => {}
                Op::Neg(a) => {
                    if needs[a.idx()] {
                        let c = self.neg(gy);
                        accum(self, &mut adj, a, c);
                    }
                }
                Op::Recip(a) => {
                    if needs[a.idx()] {
                        // d(1/x) = -out^2
                        let o2 = self.mul(out, out);
                        let m = self.mul(gy, o2);
                        let c = self.neg(m);
                        accum(self, &mut adj, a, c);
                    }
                }
                Op::Sqrt(a) => {
                    if needs[a.idx()] {
                        // d(sqrt x) = 1/(2 out)
                        let r = self.recip(out);
                        let m = self.mul(gy, r);
                        let c = self.scale(m, 0.5);
                        accum(self, &mut adj, a, c);
                    }
                }
                Op::Exp(a) => {
                    if needs[a.idx()] {
                        let c = self.mul(gy, out);
                        accum(self, &mut adj, a, c);
                    }
                }
                Op::Ln(a) => {
                    if needs[a.idx()] {
                        let r = self.recip(a);
                        let c = self.mul(gy, r);
                        accum(self, &mut adj, a, c);
                    }
                }
                Op::Tanh(a) => {
                    if needs[a.idx()] {
                        // d(tanh x) = 1 - out^2, expressed in nodes so it
                        // stays differentiable for higher orders.
                        let o2 = self.mul(out, out);
                        let no2 = self.neg(o2);
                        let d = self.add_scalar(no2, 1.0);
                        let c = self.mul(gy, d);
                        accum(self, &mut adj, a, c);
                    }
                }
                Op::Abs(a) => {
                    if needs[a.idx()] {
                        let sign = self.nodes[a.idx()].value.mapv(|x| {
                            if x > 0.0 {
                                1.0
                            } else if x < 0.0 {
                                -1.0
                            } else {
                                0.0
                            }
                        });
                        let s = self.leaf(sign);
                        let c = self.mul(gy, s);
                        accum(self, &mut adj, a, c);
                    }
                }
                Op::LeakyRelu(a, slope) => {
                    if needs[a.idx()] {
                        let mask =
                            self.nodes[a.idx()]
                                .value
                                .mapv(|x| if x > 0.0 { 1.0 } else { slope });
                        let m = self.leaf(mask);
                        let c = self.mul(gy, m);
                        accum(self, &mut adj, a, c);
                    }
                }
                Op::ClampMin(a, lo) => {
                    if needs[a.idx()] {
                        let mask = self.nodes[a.idx()]
                            .value
                            .mapv(|x| if x > lo { 1.0 } else { 0.0 });
                        let m = self.leaf(mask);
                        let c = self.mul(gy, m);
                        accum(self, &mut adj, a, c);
                    }
                }
                Op::Scale(a, k) => {
                    if needs[a.idx()] {
                        let c = self.scale(gy, k);
                        accum(self, &mut adj, a, c);
                    }
                }
                Op::AddScalar(a) => {
                    if needs[a.idx()] {
                        accum(self, &mut adj, a, gy);
                    }
                }
                Op::Add(a, b) => {
                    if needs[a.idx()] {
                        accum(self, &mut adj, a, gy);
                    }
                    if needs[b.idx()] {
                        accum(self, &mut adj, b, gy);
                    }
                }
                Op::Sub(a, b) => {
                    if needs[a.idx()] {
                        accum(self, &mut adj, a, gy);
                    }
                    if needs[b.idx()] {
                        let c = self.neg(gy);
                        accum(self, &mut adj, b, c);
                    }
                }
                Op::Mul(a, b) => {
                    if needs[a.idx()] {
                        let c = self.mul(gy, b);
                        accum(self, &mut adj, a, c);
                    }
                    if needs[b.idx()] {
                        let c = self.mul(gy, a);
                        accum(self, &mut adj, b, c);
                    }
                }
                Op::MatMul(a, b) => {
                    if needs[a.idx()] {
                        let bt = self.transpose(b);
                        let c = self.matmul(gy, bt);
                        accum(self, &mut adj, a, c);
                    }
                    if needs[b.idx()] {
                        let at = self.transpose(a);
                        let c = self.matmul(at, gy);
                        accum(self, &mut adj, b, c);
                    }
                }
                Op::Transpose(a) => {
                    if needs[a.idx()] {
                        let c = self.transpose(gy);
                        accum(self, &mut adj, a, c);
                    }
                }
                Op::Reshape(a) => {
                    if needs[a.idx()] {
                        let sh = self.shape(a).to_vec();
                        let c = self.reshape(gy, &sh);
                        accum(self, &mut adj, a, c);
                    }
                }
                Op::BroadcastTo(a) => {
                    if needs[a.idx()] {
                        let sh = self.shape(a).to_vec();
                        let c = self.sum_to(gy, &sh);
                        accum(self, &mut adj, a, c);
                    }
                }
                Op::SumTo(a) => {
                    if needs[a.idx()] {
                        let sh = self.shape(a).to_vec();
                        let c = self.broadcast_to(gy, &sh);
                        accum(self, &mut adj, a, c);
                    }
                }
                Op::SumAll(a) | Op::SumAxis(a) => {
                    if needs[a.idx()] {
                        let sh = self.shape(a).to_vec();
                        let c = self.broadcast_to(gy, &sh);
                        accum(self, &mut adj, a, c);
                    }
                }
                Op::Permute(a, axes) => {
                    if needs[a.idx()] {
                        let mut inv = vec![0usize; axes.len()];
                        for (k, &ax) in axes.iter().enumerate() {
                            inv[ax] = k;
                        }
                        let c = self.permute(gy, &inv);
                        accum(self, &mut adj, a, c);
                    }
                }
                Op::Im2Col(a, geom) => {
                    if needs[a.idx()] {
                        let c = self.col2im(gy, geom);
                        accum(self, &mut adj, a, c);
                    }
                }
                Op::Col2Im(a, geom) => {
                    if needs[a.idx()] {
                        let c = self.im2col(gy, geom);
                        accum(self, &mut adj, a, c);
                    }
                }
                Op::Upsample2x(a) => {
                    if needs[a.idx()] {
                        let c = self.poolsum2x(gy);
                        accum(self, &mut adj, a, c);
                    }
                }
                Op::PoolSum2x(a) => {
                    if needs[a.idx()] {
                        let c = self.upsample2x(gy);
                        accum(self, &mut adj, a, c);
                    }
                }
            }
        }

        wrt.iter()
            .map(|w| {
                if w.idx() < n {
                    if let Some(a) = adj[w.idx()] {
                        return a;
                    }
                }
                let sh = self.shape(*w).to_vec();
                self.zeros(&sh)
            })
            .collect()
    }
}
