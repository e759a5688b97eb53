//! Network construction and forward evaluation for every architecture in the
//! framework: the upsampling generator (which doubles as the generative-replay
//! decoder), the VAE encoder, and the desk-scale classifiers.
//!
//! Networks are descriptions plus state: the trainable values live in a
//! [`ParamVector`], forward passes are built on a caller-supplied [`Graph`]
//! against caller-supplied [`ParamNodes`] (which may be derived nodes, e.g.
//! inner-step parameters), and non-trainable state (batch-norm running
//! statistics, spectral-norm power-iteration vectors) lives behind a
//! `RefCell` so read-paths stay `&self`.
//!
//! Image-shaped specs (`[c, h, w]`) build the convolutional stacks; flat
//! specs (`[d]`) build MLP analogues with the same block structure
//! (spectrally-normalized affine, batch-norm, leaky-ReLU; tanh then a final
//! batch-norm on the generator output), so 2-D point tasks run the same
//! training loop end to end.

use std::cell::RefCell;
use std::path::Path;
use std::sync::Arc;

use ndarray::{Array1, ArrayD, IxDyn};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::ckpt::{self, Container, NamedArray};
use crate::param::{ParamLayout, ParamNodes, ParamVector};
use crate::{Error, Result};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const LEAKY_SLOPE: f64 = 0.2;
const SN_SETTLE_ITERS: usize = 30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NetKind {
    Generator,
    VaeEncoder,
    ClassifierMlp,
    ClassifierSmallConv,
}

fn default_hidden() -> usize {
    32
}
fn default_depth() -> usize {
    2
}
fn default_noise_dim() -> usize {
    1000
}
fn default_base_channels() -> usize {
    128
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetSpec {
    pub kind: NetKind,
    /// Classifiers and the encoder: the per-sample input shape. The
    /// generator: the per-sample shape it must produce.
    pub input_shape: Vec<usize>,
    /// Class count for classifiers, latent dimension for the VAE encoder.
    #[serde(default)]
    pub output_dim: usize,
    /// Width knob: MLP units, or channel count for the small conv classifier.
    #[serde(default = "default_hidden")]
    pub hidden: usize,
    /// Hidden-block count for MLP variants.
    #[serde(default = "default_depth")]
    pub depth: usize,
    /// Generator/decoder latent input dimension.
    #[serde(default = "default_noise_dim")]
    pub noise_dim: usize,
    /// First-stage channel count of the convolutional generator.
    #[serde(default = "default_base_channels")]
    pub base_channels: usize,
}

impl NetSpec {
    pub fn sample_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn is_image(&self) -> bool {
        self.input_shape.len() == 3
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_shape.is_empty() || self.input_shape.contains(&0) {
            return Err(Error::Config(format!(
                "net spec: bad input_shape {:?}",
                self.input_shape
            )));
        }
        if self.input_shape.len() != 1 && self.input_shape.len() != 3 {
            return Err(Error::Config(
                "net spec: input_shape must be [d] or [c, h, w]".into(),
            ));
        }
        match self.kind {
            NetKind::ClassifierMlp | NetKind::ClassifierSmallConv => {
                if self.output_dim < 2 {
                    return Err(Error::Config(
                        "classifier output_dim must be at least 2".into(),
                    ));
                }
                if self.hidden == 0 || self.depth == 0 {
                    return Err(Error::Config(
                        "classifier width/depth must be positive".into(),
                    ));
                }
                if self.kind == NetKind::ClassifierSmallConv {
                    let [_, h, w] = self.image_dims()?;
                    if h % 4 != 0 || w % 4 != 0 {
                        return Err(Error::Config(format!(
                            "small conv classifier needs h, w divisible by 4, got {h}x{w}"
                        )));
                    }
                }
            }
            NetKind::Generator => {
                if self.noise_dim < 1 {
                    return Err(Error::Config(
                        "generator noise_dim must be at least 1".into(),
                    ));
                }
                if self.is_image() {
                    let [_, h, w] = self.image_dims()?;
                    if h % 4 != 0 || w % 4 != 0 {
                        return Err(Error::Config(format!(
                            "generator reshapes to h/4 x w/4; h, w must be divisible by 4, got {h}x{w}"
                        )));
                    }
                    if !self.base_channels.is_multiple_of(2) {
                        return Err(Error::Config("generator base_channels must be even".into()));
                    }
                } else if self.hidden == 0 || self.depth == 0 {
                    return Err(Error::Config(
                        "generator width/depth must be positive".into(),
                    ));
                }
            }
            NetKind::VaeEncoder => {
                if self.output_dim < 1 {
                    return Err(Error::Config(
                        "vae encoder latent dim must be positive".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    fn image_dims(&self) -> Result<[usize; 3]> {
        match self.input_shape[..] {
            [c, h, w] => Ok([c, h, w]),
            _ => Err(Error::Config(format!(
                "expected [c, h, w] input shape, got {:?}",
                self.input_shape
            ))),
        }
    }
}

/// Standard-normal noise batch `[n, noise_dim]` for the generator/decoder.
pub fn sample_noise(n: usize, noise_dim: usize, rng: &mut ChaCha8Rng) -> ArrayD<f64> {
    assert!(n >= 1, "noise batch size must be at least 1");
    let data: Vec<f64> = (0..n * noise_dim)
        .map(|_| rand_distr::StandardNormal.sample(rng))
        .collect();
    ArrayD::from_shape_vec(IxDyn(&[n, noise_dim]), data).unwrap()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForwardMode {
    /// Normalize with batch statistics; when `update_state` is set, refresh
    /// batch-norm running statistics and run one spectral-norm power
    /// iteration. Gradient checks freeze the state (`update_state: false`)
    /// so the parameter-to-loss map stays fixed.
    Train { update_state: bool },
    /// Normalize with running statistics; never mutates state.
    Eval,
}

#[derive(Debug, Clone)]
enum Layer {
    Linear {
        wi: usize,
        bi: usize,
        sn: Option<usize>,
    },
    Conv3x3 {
        wi: usize,
        bi: usize,
        sn: Option<usize>,
    },
    Bn1d {
        gi: usize,
        bi: usize,
        st: usize,
    },
    Bn2d {
        gi: usize,
        bi: usize,
        st: usize,
    },
    LeakyRelu(f64),
    Tanh,
    ReshapePerSample(Vec<usize>),
    Flatten,
    Upsample2x,
    AvgPool2x,
    Trace,
}

#[derive(Debug, Clone)]
enum Head {
    Sequential,
    /// Mean / log-variance pair for the VAE encoder.
    Gauss {
        mu_wi: usize,
        mu_bi: usize,
        lv_wi: usize,
        lv_bi: usize,
    },
}

#[derive(Debug, Clone, Copy)]
enum InitKind {
    FanInUniform { fan_in: usize },
    Zero,
    One,
}

#[derive(Debug, Clone)]
pub struct BnState {
    pub mean: ArrayD<f64>,
    pub var: ArrayD<f64>,
}

#[derive(Debug, Clone)]
pub struct SnState {
    pub u: Array1<f64>,
    pub v: Array1<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct NetState {
    pub bn: Vec<BnState>,
    pub sn: Vec<SnState>,
}

struct NetBuilder {
    tensors: Vec<(String, Vec<usize>)>,
    inits: Vec<InitKind>,
    layers: Vec<Layer>,
    bn_shapes: Vec<Vec<usize>>,
    sn_dims: Vec<(usize, usize)>,
}

impl NetBuilder {
    fn new() -> Self {
        Self {
            tensors: Vec::new(),
            inits: Vec::new(),
            layers: Vec::new(),
            bn_shapes: Vec::new(),
            sn_dims: Vec::new(),
        }
    }

    fn tensor(&mut self, name: String, shape: Vec<usize>, init: InitKind) -> usize {
        self.tensors.push((name, shape));
        self.inits.push(init);
        self.tensors.len() - 1
    }

    fn sn_slot(&mut self, out_f: usize, in_f: usize) -> usize {
        self.sn_dims.push((out_f, in_f));
        self.sn_dims.len() - 1
    }

    fn linear(&mut self, name: &str, in_f: usize, out_f: usize, sn: bool) -> (usize, usize) {
        let wi = self.tensor(
            format!("{name}.w"),
            vec![out_f, in_f],
            InitKind::FanInUniform { fan_in: in_f },
        );
        let bi = self.tensor(
            format!("{name}.b"),
            vec![out_f],
            InitKind::FanInUniform { fan_in: in_f },
        );
        let sn = sn.then(|| self.sn_slot(out_f, in_f));
        self.layers.push(Layer::Linear { wi, bi, sn });
        (wi, bi)
    }

    fn conv3(&mut self, name: &str, in_c: usize, out_c: usize, sn: bool) {
        let fan_in = in_c * 9;
        let wi = self.tensor(
            format!("{name}.w"),
            vec![out_c, in_c, 3, 3],
            InitKind::FanInUniform { fan_in },
        );
        let bi = self.tensor(
            format!("{name}.b"),
            vec![out_c],
            InitKind::FanInUniform { fan_in },
        );
        let sn = sn.then(|| self.sn_slot(out_c, in_c * 9));
        self.layers.push(Layer::Conv3x3 { wi, bi, sn });
    }

    fn bn1(&mut self, name: &str, features: usize) {
        let gi = self.tensor(format!("{name}.gamma"), vec![features], InitKind::One);
        let bi = self.tensor(format!("{name}.beta"), vec![features], InitKind::Zero);
        self.bn_shapes.push(vec![1, features]);
        let st = self.bn_shapes.len() - 1;
        self.layers.push(Layer::Bn1d { gi, bi, st });
    }

    fn bn2(&mut self, name: &str, channels: usize) {
        let gi = self.tensor(format!("{name}.gamma"), vec![channels], InitKind::One);
        let bi = self.tensor(format!("{name}.beta"), vec![channels], InitKind::Zero);
        self.bn_shapes.push(vec![1, channels, 1, 1]);
        let st = self.bn_shapes.len() - 1;
        self.layers.push(Layer::Bn2d { gi, bi, st });
    }

    fn gauss_head(&mut self, in_f: usize, latent: usize) -> Head {
        let mu_wi = self.tensor(
            "head.mu.w".into(),
            vec![latent, in_f],
            InitKind::FanInUniform { fan_in: in_f },
        );
        let mu_bi = self.tensor(
            "head.mu.b".into(),
            vec![latent],
            InitKind::FanInUniform { fan_in: in_f },
        );
        let lv_wi = self.tensor(
            "head.logvar.w".into(),
            vec![latent, in_f],
            InitKind::FanInUniform { fan_in: in_f },
        );
        let lv_bi = self.tensor(
            "head.logvar.b".into(),
            vec![latent],
            InitKind::FanInUniform { fan_in: in_f },
        );
        Head::Gauss {
            mu_wi,
            mu_bi,
            lv_wi,
            lv_bi,
        }
    }
}

pub struct Network {
    pub spec: NetSpec,
    layers: Vec<Layer>,
    head: Head,
    pub layout: Arc<ParamLayout>,
    pub params: ParamVector,
    state: RefCell<NetState>,
}

impl Network {
    /// Deterministic construction: identical (spec, seed) pairs produce
    /// bitwise-identical parameters and state.
    pub fn build(spec: &NetSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut b = NetBuilder::new();
        let head = match spec.kind {
            NetKind::ClassifierMlp => {
                let d = spec.sample_len();
                if spec.input_shape.len() != 1 {
                    b.layers.push(Layer::Flatten);
                }
                let mut in_f = d;
                for i in 0..spec.depth {
                    b.linear(&format!("fc{i}"), in_f, spec.hidden, false);
                    b.layers.push(Layer::Tanh);
                    b.layers.push(Layer::Trace);
                    in_f = spec.hidden;
                }
                b.linear("out", in_f, spec.output_dim, false);
                Head::Sequential
            }
            NetKind::ClassifierSmallConv => {
                let [c, h, w] = spec.image_dims()?;
                let k = spec.hidden;
                b.conv3("conv0", c, k, false);
                b.bn2("bn0", k);
                b.layers.push(Layer::LeakyRelu(LEAKY_SLOPE));
                b.layers.push(Layer::Trace);
                b.layers.push(Layer::AvgPool2x);
                b.conv3("conv1", k, k, false);
                b.bn2("bn1", k);
                b.layers.push(Layer::LeakyRelu(LEAKY_SLOPE));
                b.layers.push(Layer::Trace);
                b.layers.push(Layer::AvgPool2x);
                b.layers.push(Layer::Flatten);
                b.linear("out", k * (h / 4) * (w / 4), spec.output_dim, false);
                Head::Sequential
            }
            NetKind::Generator => {
                if spec.is_image() {
                    let [c, h, w] = spec.image_dims()?;
                    let bc = spec.base_channels;
                    let feat = bc * (h / 4) * (w / 4);
                    b.linear("fc", spec.noise_dim, feat, false);
                    b.bn1("bn0", feat);
                    b.layers
                        .push(Layer::ReshapePerSample(vec![bc, h / 4, w / 4]));
                    b.conv3("conv1", bc, bc, true);
                    b.bn2("bn1", bc);
                    b.layers.push(Layer::LeakyRelu(LEAKY_SLOPE));
                    b.layers.push(Layer::Upsample2x);
                    b.conv3("conv2", bc, bc / 2, true);
                    b.bn2("bn2", bc / 2);
                    b.layers.push(Layer::LeakyRelu(LEAKY_SLOPE));
                    b.layers.push(Layer::Upsample2x);
                    b.conv3("conv3", bc / 2, c, true);
                    b.layers.push(Layer::Tanh);
                    b.layers.push(Layer::Trace);
                    b.bn2("bn3", c);
                } else {
                    let d = spec.sample_len();
                    let mut in_f = spec.noise_dim;
                    for i in 0..spec.depth {
                        b.linear(&format!("fc{i}"), in_f, spec.hidden, true);
                        b.bn1(&format!("bn{i}"), spec.hidden);
                        b.layers.push(Layer::LeakyRelu(LEAKY_SLOPE));
                        in_f = spec.hidden;
                    }
                    b.linear("out", in_f, d, true);
                    b.layers.push(Layer::Tanh);
                    b.layers.push(Layer::Trace);
                    b.bn1("bn_out", d);
                }
                Head::Sequential
            }
            NetKind::VaeEncoder => {
                if spec.is_image() {
                    let [c, h, w] = spec.image_dims()?;
                    if h % 4 != 0 || w % 4 != 0 {
                        return Err(Error::Config(format!(
                            "vae encoder downsamples twice; h, w must be divisible by 4, got {h}x{w}"
                        )));
                    }
                    let bc = spec.base_channels;
                    b.conv3("conv0", c, bc / 2, true);
                    b.bn2("bn0", bc / 2);
                    b.layers.push(Layer::LeakyRelu(LEAKY_SLOPE));
                    b.conv3("conv1", bc / 2, bc, true);
                    b.bn2("bn1", bc);
                    b.layers.push(Layer::LeakyRelu(LEAKY_SLOPE));
                    b.layers.push(Layer::AvgPool2x);
                    b.conv3("conv2", bc, bc, true);
                    b.bn2("bn2", bc);
                    b.layers.push(Layer::AvgPool2x);
                    b.layers.push(Layer::Flatten);
                    b.gauss_head(bc * (h / 4) * (w / 4), spec.output_dim)
                } else {
                    let d = spec.sample_len();
                    b.linear("fc0", d, spec.hidden, true);
                    b.bn1("bn0", spec.hidden);
                    b.layers.push(Layer::LeakyRelu(LEAKY_SLOPE));
                    b.linear("fc1", spec.hidden, spec.hidden, true);
                    b.bn1("bn1", spec.hidden);
                    b.gauss_head(spec.hidden, spec.output_dim)
                }
            }
        };

        let layout = Arc::new(ParamLayout::new(b.tensors.clone()));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamVector::zeros(layout.clone());
        for (i, init) in b.inits.iter().enumerate() {
            let shape = layout.entries()[i].shape.clone();
            let len: usize = shape.iter().product();
            let data: Vec<f64> = match init {
                InitKind::FanInUniform { fan_in } => {
                    let bound = 1.0 / (*fan_in as f64).sqrt();
                    (0..len).map(|_| rng.random_range(-bound..bound)).collect()
                }
                InitKind::Zero => vec![0.0; len],
                InitKind::One => vec![1.0; len],
            };
            params.set_tensor(i, &ArrayD::from_shape_vec(IxDyn(&shape), data).unwrap());
        }

        let bn = b
            .bn_shapes
            .iter()
            .map(|s| BnState {
                mean: ArrayD::zeros(IxDyn(s)),
                var: ArrayD::from_elem(IxDyn(s), 1.0),
            })
            .collect();
        let sn = b
            .sn_dims
            .iter()
            .map(|&(out_f, in_f)| {
                let mut mk = |n: usize| {
                    let mut v = Array1::from_iter((0..n).map(|_| {
                        let s: f64 = rand_distr::StandardNormal.sample(&mut rng);
                        s
                    }));
                    let norm = v.dot(&v).sqrt().max(1e-12);
                    v.mapv_inplace(|x| x / norm);
                    v
                };
                SnState {
                    u: mk(out_f),
                    v: mk(in_f),
                }
            })
            .collect();

        let net = Self {
            spec: spec.clone(),
            layers: b.layers,
            head,
            layout,
            params,
            state: RefCell::new(NetState { bn, sn }),
        };
        net.settle_spectral_norms();
        Ok(net)
    }

    /// Runs enough power iterations at construction that the per-forward
    /// single iteration only has to track slow weight drift.
    fn settle_spectral_norms(&self) {
        for layer in &self.layers {
            let (wi, sn) = match layer {
                Layer::Linear {
                    wi, sn: Some(s), ..
                }
                | Layer::Conv3x3 {
                    wi, sn: Some(s), ..
                } => (*wi, *s),
                _ => continue,
            };
            let w = self.params.tensor(wi);
            let (out_f, in_f) = weight_matrix_dims(&w);
            let flat: Vec<f64> = w.iter().cloned().collect();
            let mut st = self.state.borrow_mut();
            for _ in 0..SN_SETTLE_ITERS {
                power_iteration_step(&flat, out_f, in_f, &mut st.sn[sn]);
            }
        }
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    /// True when every activation in the net is infinitely differentiable
    /// (no leaky-ReLU layers); the Taylor diagnostic requires this.
    pub fn is_smooth(&self) -> bool {
        !self.layers.iter().any(|l| matches!(l, Layer::LeakyRelu(_)))
    }

    pub fn state(&self) -> std::cell::Ref<'_, NetState> {
        self.state.borrow()
    }

    pub fn set_state(&self, state: NetState) {
        *self.state.borrow_mut() = state;
    }

    pub fn inject_params(&self, g: &mut Graph) -> ParamNodes {
        self.params.inject(g)
    }

    fn expected_input(&self) -> Vec<usize> {
        match self.spec.kind {
            NetKind::Generator => vec![self.spec.noise_dim],
            NetKind::ClassifierMlp => vec![self.spec.sample_len()],
            _ => self.spec.input_shape.clone(),
        }
    }

    fn check_input(&self, g: &Graph, x: NodeId) -> Result<()> {
        let got = g.shape(x);
        let want = self.expected_input();
        if got.len() != want.len() + 1 || got[1..] != want[..] {
            return Err(Error::Shape(format!(
                "{:?} forward: expected [n, {:?}] input, got {:?}",
                self.spec.kind, want, got
            )));
        }
        Ok(())
    }

    fn spectral_weight(
        &self,
        g: &mut Graph,
        w: NodeId,
        sn_idx: usize,
        mode: ForwardMode,
    ) -> NodeId {
        let wsh = g.shape(w).to_vec();
        let out_f = wsh[0];
        let in_f: usize = wsh[1..].iter().product();
        if let ForwardMode::Train { update_state: true } = mode {
            let flat: Vec<f64> = g.value(w).iter().cloned().collect();
            let mut st = self.state.borrow_mut();
            power_iteration_step(&flat, out_f, in_f, &mut st.sn[sn_idx]);
        }
        let (u, v) = {
            let st = self.state.borrow();
            (st.sn[sn_idx].u.clone(), st.sn[sn_idx].v.clone())
        };
        // sigma = u^T W v with u, v held constant; dividing keeps the weight
        // differentiable w.r.t. W while pinning its top singular value near 1.
        let un = g.leaf(ArrayD::from_shape_vec(IxDyn(&[1, out_f]), u.to_vec()).unwrap());
        let vn = g.leaf(ArrayD::from_shape_vec(IxDyn(&[in_f, 1]), v.to_vec()).unwrap());
        let wmat = g.reshape(w, &[out_f, in_f]);
        let uw = g.matmul(un, wmat);
        let sig = g.matmul(uw, vn);
        let sig = g.reshape(sig, &[1]);
        let inv = g.recip(sig);
        let invb = g.broadcast_to(inv, &wsh);
        g.mul(w, invb)
    }

    #[allow(clippy::too_many_arguments)]
    fn batchnorm(
        &self,
        g: &mut Graph,
        x: NodeId,
        gi: usize,
        bi: usize,
        st: usize,
        p: &ParamNodes,
        mode: ForwardMode,
        spatial: bool,
    ) -> NodeId {
        let xsh = g.shape(x).to_vec();
        let (mu, var) = match mode {
            ForwardMode::Train { update_state } => {
                let count: usize = if spatial {
                    xsh[0] * xsh[2] * xsh[3]
                } else {
                    xsh[0]
                };
                let mut s = g.sum_axis_keep(x, 0);
                if spatial {
                    s = g.sum_axis_keep(s, 2);
                    s = g.sum_axis_keep(s, 3);
                }
                let mu = g.scale(s, 1.0 / count as f64);
                let mub = g.broadcast_to(mu, &xsh);
                let xc = g.sub(x, mub);
                let sq = g.mul(xc, xc);
                let mut vs = g.sum_axis_keep(sq, 0);
                if spatial {
                    vs = g.sum_axis_keep(vs, 2);
                    vs = g.sum_axis_keep(vs, 3);
                }
                let var = g.scale(vs, 1.0 / count as f64);
                if update_state {
                    let mut state = self.state.borrow_mut();
                    let bns = &mut state.bn[st];
                    let m = BN_MOMENTUM;
                    bns.mean = &bns.mean * (1.0 - m) + &(g.value(mu).to_owned() * m);
                    bns.var = &bns.var * (1.0 - m) + &(g.value(var).to_owned() * m);
                }
                (mu, var)
            }
            ForwardMode::Eval => {
                let state = self.state.borrow();
                let mu = g.leaf(state.bn[st].mean.clone());
                let var = g.leaf(state.bn[st].var.clone());
                (mu, var)
            }
        };
        let mub = g.broadcast_to(mu, &xsh);
        let xc = g.sub(x, mub);
        let veps = g.add_scalar(var, BN_EPS);
        let std = g.sqrt(veps);
        let istd = g.recip(std);
        let istdb = g.broadcast_to(istd, &xsh);
        let xhat = g.mul(xc, istdb);
        let (gamma, beta) = if spatial {
            let c = g.shape(p.nodes[gi])[0];
            let ga = g.reshape(p.nodes[gi], &[1, c, 1, 1]);
            let be = g.reshape(p.nodes[bi], &[1, c, 1, 1]);
            (ga, be)
        } else {
            (p.nodes[gi], p.nodes[bi])
        };
        let gb = g.broadcast_to(gamma, &xsh);
        let bb = g.broadcast_to(beta, &xsh);
        let y = g.mul(xhat, gb);
        g.add(y, bb)
    }

    fn run_layers(
        &self,
        g: &mut Graph,
        p: &ParamNodes,
        x0: NodeId,
        mode: ForwardMode,
        trace: &mut Vec<NodeId>,
    ) -> NodeId {
        let mut x = x0;
        for layer in &self.layers {
            x = match layer {
                Layer::Linear { wi, bi, sn } => {
                    let w = match sn {
                        Some(s) => self.spectral_weight(g, p.nodes[*wi], *s, mode),
                        None => p.nodes[*wi],
                    };
                    let wt = g.transpose(w);
                    let y = g.matmul(x, wt);
                    let ysh = g.shape(y).to_vec();
                    let bb = g.broadcast_to(p.nodes[*bi], &ysh);
                    g.add(y, bb)
                }
                Layer::Conv3x3 { wi, bi, sn } => {
                    let w = match sn {
                        Some(s) => self.spectral_weight(g, p.nodes[*wi], *s, mode),
                        None => p.nodes[*wi],
                    };
                    g.conv2d(x, w, p.nodes[*bi], 1)
                }
                Layer::Bn1d { gi, bi, st } => self.batchnorm(g, x, *gi, *bi, *st, p, mode, false),
                Layer::Bn2d { gi, bi, st } => self.batchnorm(g, x, *gi, *bi, *st, p, mode, true),
                Layer::LeakyRelu(slope) => g.leaky_relu(x, *slope),
                Layer::Tanh => g.tanh(x),
                Layer::ReshapePerSample(shape) => {
                    let n = g.shape(x)[0];
                    let mut full = vec![n];
                    full.extend_from_slice(shape);
                    g.reshape(x, &full)
                }
                Layer::Flatten => {
                    let sh = g.shape(x).to_vec();
                    let n = sh[0];
                    let rest: usize = sh[1..].iter().product();
                    g.reshape(x, &[n, rest])
                }
                Layer::Upsample2x => g.upsample2x(x),
                Layer::AvgPool2x => g.avgpool2x(x),
                Layer::Trace => {
                    trace.push(x);
                    x
                }
            };
        }
        x
    }

    /// Forward pass returning the output node (logits for classifiers,
    /// samples for the generator). Differentiable w.r.t. both `x` and `p`.
    pub fn forward_nodes(
        &self,
        g: &mut Graph,
        p: &ParamNodes,
        x: NodeId,
        mode: ForwardMode,
    ) -> Result<NodeId> {
        let (out, _) = self.forward_traced_nodes(g, p, x, mode)?;
        Ok(out)
    }

    /// Forward pass plus the activation trace (one node per designated
    /// feature layer, leading dimension = batch size).
    pub fn forward_traced_nodes(
        &self,
        g: &mut Graph,
        p: &ParamNodes,
        x: NodeId,
        mode: ForwardMode,
    ) -> Result<(NodeId, Vec<NodeId>)> {
        if matches!(self.head, Head::Gauss { .. }) {
            return Err(Error::Shape(
                "gaussian-head network: use forward_gauss_nodes".into(),
            ));
        }
        self.check_input(g, x)?;
        let mut trace = Vec::new();
        let out = self.run_layers(g, p, x, mode, &mut trace);
        Ok((out, trace))
    }

    /// VAE encoder forward: (mean, log-variance), each `[n, latent]`.
    pub fn forward_gauss_nodes(
        &self,
        g: &mut Graph,
        p: &ParamNodes,
        x: NodeId,
        mode: ForwardMode,
    ) -> Result<(NodeId, NodeId)> {
        let Head::Gauss {
            mu_wi,
            mu_bi,
            lv_wi,
            lv_bi,
        } = self.head
        else {
            return Err(Error::Shape("network has no gaussian head".into()));
        };
        self.check_input(g, x)?;
        let mut trace = Vec::new();
        let h = self.run_layers(g, p, x, mode, &mut trace);
        let linear = |g: &mut Graph, wi: usize, bi: usize, h: NodeId| {
            let wt = g.transpose(p.nodes[wi]);
            let y = g.matmul(h, wt);
            let ysh = g.shape(y).to_vec();
            let bb = g.broadcast_to(p.nodes[bi], &ysh);
            g.add(y, bb)
        };
        Ok((linear(g, mu_wi, mu_bi, h), linear(g, lv_wi, lv_bi, h)))
    }

    /// Convenience value-level forward using the network's own parameters.
    pub fn forward_values(&self, x: &ArrayD<f64>, mode: ForwardMode) -> Result<ArrayD<f64>> {
        let mut g = Graph::new();
        let p = self.inject_params(&mut g);
        let xn = g.leaf(x.clone());
        let out = self.forward_nodes(&mut g, &p, xn, mode)?;
        Ok(g.value(out).to_owned())
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let state = self.state.borrow();
        let mut arrays = vec![NamedArray::new(
            "params",
            vec![self.params.len()],
            self.params.values.to_vec(),
        )];
        for (i, bn) in state.bn.iter().enumerate() {
            arrays.push(NamedArray::new(
                format!("bn{i}.mean"),
                bn.mean.shape().to_vec(),
                bn.mean.iter().cloned().collect(),
            ));
            arrays.push(NamedArray::new(
                format!("bn{i}.var"),
                bn.var.shape().to_vec(),
                bn.var.iter().cloned().collect(),
            ));
        }
        for (i, sn) in state.sn.iter().enumerate() {
            arrays.push(NamedArray::new(
                format!("sn{i}.u"),
                vec![sn.u.len()],
                sn.u.to_vec(),
            ));
            arrays.push(NamedArray::new(
                format!("sn{i}.v"),
                vec![sn.v.len()],
                sn.v.to_vec(),
            ));
        }
        let meta = serde_json::json!({
            "kind": "model",
            "spec": self.spec,
        });
        ckpt::write_container(path, &Container { meta, arrays })
    }

    /// Rebuilds a network from a checkpoint. When `expected` is given, the
    /// stored spec must match it exactly.
    pub fn from_checkpoint(path: &Path, expected: Option<&NetSpec>) -> Result<Self> {
        let c = ckpt::read_container(path)?;
        let spec_value = c
            .meta
            .get("spec")
            .ok_or_else(|| Error::Checkpoint("model checkpoint missing spec".into()))?;
        let spec: NetSpec = serde_json::from_value(spec_value.clone())
            .map_err(|e| Error::Checkpoint(format!("bad spec in checkpoint: {e}")))?;
        if let Some(exp) = expected {
            if *exp != spec {
                return Err(Error::Checkpoint(format!(
                    "checkpoint spec mismatch: expected {exp:?}, found {spec:?}"
                )));
            }
        }
        let mut net = Self::build(&spec, 0)?;
        net.load_arrays(&c)?;
        Ok(net)
    }

    fn load_arrays(&mut self, c: &Container) -> Result<()> {
        let p = c.array("params")?;
        if p.data.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "parameter count mismatch: checkpoint {}, spec {}",
                p.data.len(),
                self.params.len()
            )));
        }
        self.params.values = Array1::from_vec(p.data.clone());
        let mut state = self.state.borrow_mut();
        for i in 0..state.bn.len() {
            let m = c.array(&format!("bn{i}.mean"))?;
            let v = c.array(&format!("bn{i}.var"))?;
            state.bn[i].mean = ArrayD::from_shape_vec(IxDyn(&m.shape), m.data.clone())
                .map_err(|e| Error::Checkpoint(format!("bn{i}.mean: {e}")))?;
            state.bn[i].var = ArrayD::from_shape_vec(IxDyn(&v.shape), v.data.clone())
                .map_err(|e| Error::Checkpoint(format!("bn{i}.var: {e}")))?;
        }
        for i in 0..state.sn.len() {
            let u = c.array(&format!("sn{i}.u"))?;
            let v = c.array(&format!("sn{i}.v"))?;
            state.sn[i].u = Array1::from_vec(u.data.clone());
            state.sn[i].v = Array1::from_vec(v.data.clone());
        }
        Ok(())
    }
}

fn weight_matrix_dims(w: &ArrayD<f64>) -> (usize, usize) {
    let sh = w.shape();
    (sh[0], sh[1..].iter().product())
}

/// One u/v power-iteration update on the flattened weight matrix.
fn power_iteration_step(w_flat: &[f64], out_f: usize, in_f: usize, sn: &mut SnState) {
    // v <- normalize(W^T u)
    let mut v = vec![0.0f64; in_f];
    for r in 0..out_f {
        let ur = sn.u[r];
        let row = &w_flat[r * in_f..(r + 1) * in_f];
        for (vi, &wv) in v.iter_mut().zip(row) {
            *vi += ur * wv;
        }
    }
    let vnorm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    for vi in v.iter_mut() {
        *vi /= vnorm;
    }
    // u <- normalize(W v)
    let mut u = vec![0.0f64; out_f];
    for r in 0..out_f {
        let row = &w_flat[r * in_f..(r + 1) * in_f];
        u[r] = row.iter().zip(&v).map(|(&w, &x)| w * x).sum();
    }
    let unorm = u.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    for ui in u.iter_mut() {
        *ui /= unorm;
    }
    sn.u = Array1::from_vec(u);
    sn.v = Array1::from_vec(v);
}

/// Largest singular value by running power iteration to convergence;
/// test/diagnostic helper, not a training-path operation.
pub fn top_singular_value(w: &ArrayD<f64>) -> f64 {
    let (out_f, in_f) = weight_matrix_dims(w);
    let flat: Vec<f64> = w.iter().cloned().collect();
    let mut sn = SnState {
        u: Array1::from_elem(out_f, 1.0 / (out_f as f64).sqrt()),
        v: Array1::from_elem(in_f, 1.0 / (in_f as f64).sqrt()),
    };
    for _ in 0..200 {
        power_iteration_step(&flat, out_f, in_f, &mut sn);
    }
    let mut sigma = 0.0;
    for r in 0..out_f {
        let row = &flat[r * in_f..(r + 1) * in_f];
        let wv: f64 = row.iter().zip(sn.v.iter()).map(|(&a, &b)| a * b).sum();
        sigma += sn.u[r] * wv;
    }
    sigma
}
