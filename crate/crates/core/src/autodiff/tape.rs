//! Reverse-mode differentiation over a linear operation tape.
//!
//! Every operation appends a node holding its output value and the handles
//! of its inputs. Node indices are assigned in execution order, so the tape
//! is topologically sorted by construction and the backward sweep is a
//! single reverse pass.

use std::collections::HashMap;

use super::kernels::{self, ConvGeometry};
use crate::error::{Error, Result};
use crate::params::{ParamGrads, ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn node_id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    Sigmoid(Var),
    LogSigmoid(Var),
    Relu(Var),
    Sum(Var),
    SumPerSample(Var),
    Expand(Var),
    Reshape(Var),
    ConcatChannels(Vec<Var>),
    SliceChannels(Var, usize),
    Squeeze(Var),
    Unsqueeze(Var),
    Conv2d { input: Var, kernel: Var, bias: Var, stride: usize, padding: usize },
    Linear { input: Var, weight: Var, bias: Var },
    ChannelAffine { input: Var, log_scale: Var, shift: Var },
    ChannelMix { input: Var, weight: Var },
    LuAssemble { lower: Var, upper: Var, log_s: Var, perm: Vec<usize>, sign: Vec<f64> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddConst(..) => "add_const",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Square(..) => "square",
            Op::Sigmoid(..) => "sigmoid",
            Op::LogSigmoid(..) => "log_sigmoid",
            Op::Relu(..) => "relu",
            Op::Sum(..) => "sum",
            Op::SumPerSample(..) => "sum_per_sample",
            Op::Expand(..) => "expand",
            Op::Reshape(..) => "reshape",
            Op::ConcatChannels(..) => "concat_channels",
            Op::SliceChannels(..) => "slice_channels",
            Op::Squeeze(..) => "squeeze",
            Op::Unsqueeze(..) => "unsqueeze",
            Op::Conv2d { .. } => "conv2d",
            Op::Linear { .. } => "dense",
            Op::ChannelAffine { .. } => "channel_affine",
            Op::ChannelMix { .. } => "channel_mix",
            Op::LuAssemble { .. } => "lu_assemble",
        }
    }
}

struct Node<R> {
    value: Tensor<R>,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation for one iteration.
pub struct Tape<R> {
    nodes: Vec<Node<R>>,
    params: HashMap<ParamId, Var>,
    param_order: Vec<(ParamId, Var)>,
    consumed: bool,
}

impl<R: Real> Default for Tape<R> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by one backward sweep, for leaves only.
pub struct Gradients<R> {
    grads: Vec<Option<Tensor<R>>>,
}

impl<R: Real> Gradients<R> {
    pub fn get(&self, var: Var) -> Option<&Tensor<R>> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<R>> {
        self.grads.get_mut(var.0).and_then(|g| g.take())
    }
}

impl<R: Real> Tape<R> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), params: HashMap::new(), param_order: Vec::new(), consumed: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Total scalars held by recorded values.
    pub fn stored_scalars(&self) -> usize {
        self.nodes.iter().map(|n| n.value.numel()).sum()
    }

    pub fn value(&self, v: Var) -> &Tensor<R> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn leaf(&mut self, value: Tensor<R>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<R>) -> Var {
        self.leaf(value, false)
    }

    /// Leaf for a stored parameter; repeated calls return the same handle.
    pub fn param(&mut self, store: &ParamStore<R>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let trainable = store.entry(id).trainable;
        let v = self.leaf(store.get(id).clone(), trainable);
        self.params.insert(id, v);
        self.param_order.push((id, v));
        v
    }

    /// Number of distinct parameters pulled onto this tape.
    pub fn param_count(&self) -> usize {
        self.param_order.len()
    }

    fn push(&mut self, value: Tensor<R>, op: Op) -> Result<Var> {
        if !value.is_finite() {
            let inputs = inputs_of(&op);
            return Err(Error::numerical(format!(
                "non-finite output from {} (inputs {:?})",
                op.name(),
                inputs.iter().map(|v| self.shape(*v).to_vec()).collect::<Vec<_>>()
            )));
        }
        let requires_grad = inputs_of(&op).iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::config(format!(
                "{what}: shape mismatch {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        self.push(v, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let k = R::lit(c);
        let v = self.value(a).map(|x| x * k);
        self.push(v, Op::Scale(a, c))
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Result<Var> {
        let k = R::lit(c);
        let v = self.value(a).map(|x| x + k);
        self.push(v, Op::AddConst(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| x.exp());
        self.push(v, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| x.ln());
        self.push(v, Op::Log(a))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| x * x);
        self.push(v, Op::Square(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(kernels::sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn log_sigmoid(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(kernels::log_sigmoid);
        self.push(v, Op::LogSigmoid(a))
    }

    /// ReLU; the derivative at exactly zero is zero.
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| if x > R::zero() { x } else { R::zero() });
        self.push(v, Op::Relu(a))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a))
    }

    /// Sums everything but the leading axis: `[N, ...] -> [N]`.
    pub fn sum_per_sample(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let n = t.shape()[0];
        let per = t.per_sample();
        let data = t.data().chunks(per).map(|c| c.iter().copied().sum()).collect();
        let v = Tensor::new(vec![n], data)?;
        self.push(v, Op::SumPerSample(a))
    }

    /// Repeats `a` along a new leading axis of length `n`.
    pub fn expand(&mut self, a: Var, n: usize) -> Result<Var> {
        let t = self.value(a);
        let mut shape = vec![n];
        shape.extend_from_slice(t.shape());
        let mut data = Vec::with_capacity(n * t.numel());
        for _ in 0..n {
            data.extend_from_slice(t.data());
        }
        let v = Tensor::new(shape, data)?;
        self.push(v, Op::Expand(a))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let v = self.value(a).clone().reshape(shape)?;
        self.push(v, Op::Reshape(a))
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor<R>> = parts.iter().map(|p| self.value(*p)).collect();
        let v = Tensor::concat_channels(&tensors)?;
        self.push(v, Op::ConcatChannels(parts.to_vec()))
    }

    pub fn slice_channels(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let v = self.value(a).slice_channels(start, len)?;
        self.push(v, Op::SliceChannels(a, start))
    }

    pub fn squeeze(&mut self, a: Var) -> Result<Var> {
        let v = squeeze_tensor(self.value(a))?;
        self.push(v, Op::Squeeze(a))
    }

    pub fn unsqueeze(&mut self, a: Var) -> Result<Var> {
        let v = unsqueeze_tensor(self.value(a))?;
        self.push(v, Op::Unsqueeze(a))
    }

    /// 2-D convolution, `N×Cin×H×W` with kernel `Cout×Cin×k×k`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var, stride: usize, padding: usize) -> Result<Var> {
        let v = conv2d_forward(self.value(input), self.value(kernel), self.value(bias), stride, padding)?;
        self.push(v, Op::Conv2d { input, kernel, bias, stride, padding })
    }

    /// Fully connected layer over `N×n` rows with weight `m×n`.
    pub fn dense(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let v = dense_forward(self.value(input), self.value(weight), self.value(bias))?;
        self.push(v, Op::Linear { input, weight, bias })
    }

    /// `y = exp(log_scale) ⊙ x + shift` with per-sample, per-channel
    /// parameters of shape `N×C`.
    pub fn channel_affine(&mut self, input: Var, log_scale: Var, shift: Var) -> Result<Var> {
        let x = self.value(input);
        let (n, c, h, w) = x.dims4()?;
        for p in [log_scale, shift] {
            if self.shape(p) != [n, c] {
                return Err(Error::config(format!(
                    "channel_affine: parameters must be {:?}, got {:?}",
                    [n, c],
                    self.shape(p)
                )));
            }
        }
        let ls = self.value(log_scale).data();
        let sh = self.value(shift).data();
        let hw = h * w;
        let mut out = x.data().to_vec();
        for (nc, plane) in out.chunks_mut(hw).enumerate() {
            let s = ls[nc].exp();
            let t = sh[nc];
            for v in plane {
                *v = s * *v + t;
            }
        }
        let v = Tensor::new(vec![n, c, h, w], out)?;
        self.push(v, Op::ChannelAffine { input, log_scale, shift })
    }

    /// Applies a per-sample `C×C` matrix to the channel vector at every pixel.
    pub fn channel_mix(&mut self, input: Var, weight: Var) -> Result<Var> {
        let v = channel_mix_forward(self.value(input), self.value(weight))?;
        self.push(v, Op::ChannelMix { input, weight })
    }

    /// Builds per-sample matrices `P·L·(U + diag(sign ⊙ exp(log_s)))` from
    /// packed strictly-triangular entries (`N×C(C−1)/2`) and log magnitudes
    /// (`N×C`).
    pub fn lu_assemble(&mut self, lower: Var, upper: Var, log_s: Var, perm: &[usize], sign: &[f64]) -> Result<Var> {
        let c = perm.len();
        let k = c * (c - 1) / 2;
        let n = self.shape(log_s)[0];
        if self.shape(lower) != [n, k] || self.shape(upper) != [n, k] || self.shape(log_s) != [n, c] || sign.len() != c {
            return Err(Error::config(format!(
                "lu_assemble: expected [{n},{k}], [{n},{k}], [{n},{c}], got {:?}, {:?}, {:?}",
                self.shape(lower),
                self.shape(upper),
                self.shape(log_s)
            )));
        }
        let sign_r: Vec<R> = sign.iter().map(|&s| R::lit(s)).collect();
        let mut out = vec![R::zero(); n * c * c];
        let (lo, up, ls) = (self.value(lower).data(), self.value(upper).data(), self.value(log_s).data());
        for i in 0..n {
            kernels::lu_assemble(
                c,
                &lo[i * k..(i + 1) * k],
                &up[i * k..(i + 1) * k],
                &ls[i * c..(i + 1) * c],
                perm,
                &sign_r,
                &mut out[i * c * c..(i + 1) * c * c],
            );
        }
        let v = Tensor::new(vec![n, c, c], out)?;
        self.push(v, Op::LuAssemble { lower, upper, log_s, perm: perm.to_vec(), sign: sign.to_vec() })
    }

    /// Backpropagates from a scalar loss.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<R>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.backward_with(vec![(loss, Tensor::full(self.shape(loss), R::one()))])
    }

    /// Backpropagates from several outputs with explicit upstream gradients.
    ///
    /// A tape can be swept once; a second call is rejected so gradients never
    /// silently accumulate across sweeps.
    pub fn backward_with(&mut self, seeds: Vec<(Var, Tensor<R>)>) -> Result<Gradients<R>> {
        if self.consumed {
            return Err(Error::usage("backward already ran on this tape; record a new one"));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Tensor<R>>> = vec![None; self.nodes.len()];
        for (v, g) in seeds {
            if g.shape() != self.shape(v) {
                return Err(Error::usage(format!(
                    "seed gradient shape {:?} does not match value shape {:?}",
                    g.shape(),
                    self.shape(v)
                )));
            }
            accumulate(&mut grads, v, g);
        }
        for i in (0..self.nodes.len()).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if !g.is_finite() {
                return Err(Error::numerical(format!(
                    "non-finite gradient flowing into {} (node {i})",
                    node.op.name()
                )));
            }
            self.backprop_node(i, &g, &mut grads)?;
        }
        Ok(Gradients { grads })
    }

    /// Collects the gradients of every parameter pulled onto this tape.
    pub fn param_grads(&self, grads: &mut Gradients<R>, into: &mut ParamGrads<R>) {
        for &(id, v) in &self.param_order {
            if let Some(g) = grads.take(v) {
                into.accumulate(id, g);
            }
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&self, i: usize, g: &Tensor<R>, grads: &mut [Option<Tensor<R>>]) -> Result<()> {
        let node = &self.nodes[i];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if self.needs(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if self.needs(*b) {
                    accumulate(grads, *b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if self.needs(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if self.needs(*b) {
                    accumulate(grads, *b, g.map(|x| -x));
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    accumulate(grads, *a, g.zip_map(self.value(*b), |x, y| x * y)?);
                }
                if self.needs(*b) {
                    accumulate(grads, *b, g.zip_map(self.value(*a), |x, y| x * y)?);
                }
            }
            Op::Scale(a, c) => {
                let k = R::lit(*c);
                accumulate(grads, *a, g.map(|x| x * k));
            }
            Op::AddConst(a) | Op::Reshape(a) => {
                let shaped = g.clone().reshape(self.shape(*a).to_vec())?;
                accumulate(grads, *a, shaped);
            }
            Op::Exp(a) => accumulate(grads, *a, g.zip_map(out, |x, y| x * y)?),
            Op::Log(a) => accumulate(grads, *a, g.zip_map(self.value(*a), |x, y| x / y)?),
            Op::Square(a) => {
                let two = R::lit(2.0);
                accumulate(grads, *a, g.zip_map(self.value(*a), |x, y| two * x * y)?)
            }
            Op::Sigmoid(a) => accumulate(grads, *a, g.zip_map(out, |x, s| x * s * (R::one() - s))?),
            Op::LogSigmoid(a) => {
                // d/dx ln σ(x) = σ(−x)
                accumulate(grads, *a, g.zip_map(self.value(*a), |x, y| x * kernels::sigmoid(-y))?)
            }
            Op::Relu(a) => accumulate(
                grads,
                *a,
                g.zip_map(self.value(*a), |x, y| if y > R::zero() { x } else { R::zero() })?,
            ),
            Op::Sum(a) => {
                let gv = g.item();
                accumulate(grads, *a, Tensor::full(self.shape(*a), gv));
            }
            Op::SumPerSample(a) => {
                let src = self.value(*a);
                let per = src.per_sample();
                let mut data = Vec::with_capacity(src.numel());
                for &gv in g.data() {
                    data.extend(std::iter::repeat_n(gv, per));
                }
                accumulate(grads, *a, Tensor::new(src.shape().to_vec(), data)?);
            }
            Op::Expand(a) => {
                let src = self.value(*a);
                let mut acc = vec![R::zero(); src.numel()];
                for chunk in g.data().chunks(src.numel()) {
                    for (s, v) in acc.iter_mut().zip(chunk) {
                        *s += *v;
                    }
                }
                accumulate(grads, *a, Tensor::new(src.shape().to_vec(), acc)?);
            }
            Op::ConcatChannels(parts) => {
                let mut start = 0;
                for p in parts {
                    let c = self.shape(*p)[1];
                    if self.needs(*p) {
                        accumulate(grads, *p, g.slice_channels(start, c)?);
                    }
                    start += c;
                }
            }
            Op::SliceChannels(a, start) => {
                let src = self.value(*a);
                let (n, c, h, w) = src.dims4()?;
                let len = out.shape()[1];
                let hw = h * w;
                let mut full = vec![R::zero(); src.numel()];
                for s in 0..n {
                    let dst = s * c * hw + start * hw;
                    full[dst..dst + len * hw].copy_from_slice(&g.data()[s * len * hw..(s + 1) * len * hw]);
                }
                accumulate(grads, *a, Tensor::new(src.shape().to_vec(), full)?);
            }
            Op::Squeeze(a) => accumulate(grads, *a, unsqueeze_tensor(g)?),
            Op::Unsqueeze(a) => accumulate(grads, *a, squeeze_tensor(g)?),
            Op::Conv2d { input, kernel, bias, stride, padding } => {
                let (gi, gk, gb) = conv2d_backward(
                    self.value(*input),
                    self.value(*kernel),
                    g,
                    *stride,
                    *padding,
                    self.needs(*input),
                    self.needs(*kernel) || self.needs(*bias),
                )?;
                if let Some(gi) = gi {
                    accumulate(grads, *input, gi);
                }
                if let Some((gk, gb)) = gk.zip(gb) {
                    if self.needs(*kernel) {
                        accumulate(grads, *kernel, gk);
                    }
                    if self.needs(*bias) {
                        accumulate(grads, *bias, gb);
                    }
                }
            }
            Op::Linear { input, weight, bias } => {
                let x = self.value(*input);
                let wt = self.value(*weight);
                let (n, k) = (x.shape()[0], x.shape()[1]);
                let m = wt.shape()[0];
                if self.needs(*input) {
                    // dx = dy · W
                    let mut dx = vec![R::zero(); n * k];
                    R::gemm(n, m, k, R::one(), g.data(), (m as isize, 1), wt.data(), (k as isize, 1), R::zero(), &mut dx, (k as isize, 1));
                    accumulate(grads, *input, Tensor::new(vec![n, k], dx)?);
                }
                if self.needs(*weight) {
                    // dW = dyᵀ · x
                    let mut dw = vec![R::zero(); m * k];
                    R::gemm(m, n, k, R::one(), g.data(), (1, m as isize), x.data(), (k as isize, 1), R::zero(), &mut dw, (k as isize, 1));
                    accumulate(grads, *weight, Tensor::new(vec![m, k], dw)?);
                }
                if self.needs(*bias) {
                    let mut db = vec![R::zero(); m];
                    for row in g.data().chunks(m) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += *v;
                        }
                    }
                    accumulate(grads, *bias, Tensor::new(vec![m], db)?);
                }
            }
            Op::ChannelAffine { input, log_scale, shift } => {
                let x = self.value(*input);
                let (n, c, h, w) = x.dims4()?;
                let hw = h * w;
                let ls = self.value(*log_scale).data();
                let mut dx = vec![R::zero(); x.numel()];
                let mut dls = vec![R::zero(); n * c];
                let mut dt = vec![R::zero(); n * c];
                for nc in 0..n * c {
                    let s = ls[nc].exp();
                    let gp = &g.data()[nc * hw..(nc + 1) * hw];
                    let xp = &x.data()[nc * hw..(nc + 1) * hw];
                    let mut acc_s = R::zero();
                    let mut acc_t = R::zero();
                    for p in 0..hw {
                        dx[nc * hw + p] = gp[p] * s;
                        acc_s += gp[p] * xp[p];
                        acc_t += gp[p];
                    }
                    dls[nc] = acc_s * s;
                    dt[nc] = acc_t;
                }
                if self.needs(*input) {
                    accumulate(grads, *input, Tensor::new(x.shape().to_vec(), dx)?);
                }
                if self.needs(*log_scale) {
                    accumulate(grads, *log_scale, Tensor::new(vec![n, c], dls)?);
                }
                if self.needs(*shift) {
                    accumulate(grads, *shift, Tensor::new(vec![n, c], dt)?);
                }
            }
            Op::ChannelMix { input, weight } => {
                let x = self.value(*input);
                let wt = self.value(*weight);
                let (n, c, h, w) = x.dims4()?;
                let hw = h * w;
                let (cs, hws) = (c as isize, hw as isize);
                if self.needs(*input) {
                    let mut dx = vec![R::zero(); x.numel()];
                    for s in 0..n {
                        R::gemm(
                            c, c, hw, R::one(),
                            &wt.data()[s * c * c..(s + 1) * c * c], (1, cs),
                            &g.data()[s * c * hw..(s + 1) * c * hw], (hws, 1),
                            R::zero(), &mut dx[s * c * hw..(s + 1) * c * hw], (hws, 1),
                        );
                    }
                    accumulate(grads, *input, Tensor::new(x.shape().to_vec(), dx)?);
                }
                if self.needs(*weight) {
                    let mut dw = vec![R::zero(); n * c * c];
                    for s in 0..n {
                        R::gemm(
                            c, hw, c, R::one(),
                            &g.data()[s * c * hw..(s + 1) * c * hw], (hws, 1),
                            &x.data()[s * c * hw..(s + 1) * c * hw], (1, hws),
                            R::zero(), &mut dw[s * c * c..(s + 1) * c * c], (cs, 1),
                        );
                    }
                    accumulate(grads, *weight, Tensor::new(vec![n, c, c], dw)?);
                }
            }
            Op::LuAssemble { lower, upper, log_s, perm, sign } => {
                let c = perm.len();
                let k = c * (c - 1) / 2;
                let n = self.shape(*log_s)[0];
                let sign_r: Vec<R> = sign.iter().map(|&s| R::lit(s)).collect();
                let (lo, up, ls) = (self.value(*lower).data(), self.value(*upper).data(), self.value(*log_s).data());
                let mut d_lo = vec![R::zero(); n * k];
                let mut d_up = vec![R::zero(); n * k];
                let mut d_ls = vec![R::zero(); n * c];
                for s in 0..n {
                    kernels::lu_assemble_backward(
                        c,
                        &lo[s * k..(s + 1) * k],
                        &up[s * k..(s + 1) * k],
                        &ls[s * c..(s + 1) * c],
                        perm,
                        &sign_r,
                        &g.data()[s * c * c..(s + 1) * c * c],
                        &mut d_lo[s * k..(s + 1) * k],
                        &mut d_up[s * k..(s + 1) * k],
                        &mut d_ls[s * c..(s + 1) * c],
                    );
                }
                if self.needs(*lower) {
                    accumulate(grads, *lower, Tensor::new(vec![n, k], d_lo)?);
                }
                if self.needs(*upper) {
                    accumulate(grads, *upper, Tensor::new(vec![n, k], d_up)?);
                }
                if self.needs(*log_s) {
                    accumulate(grads, *log_s, Tensor::new(vec![n, c], d_ls)?);
                }
            }
        }
        Ok(())
    }
}

fn inputs_of(op: &Op) -> Vec<Var> {
    match op {
        Op::Leaf => vec![],
        Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
        Op::Scale(a, _)
        | Op::AddConst(a)
        | Op::Exp(a)
        | Op::Log(a)
        | Op::Square(a)
        | Op::Sigmoid(a)
        | Op::LogSigmoid(a)
        | Op::Relu(a)
        | Op::Sum(a)
        | Op::SumPerSample(a)
        | Op::Expand(a)
        | Op::Reshape(a)
        | Op::SliceChannels(a, _)
        | Op::Squeeze(a)
        | Op::Unsqueeze(a) => vec![*a],
        Op::ConcatChannels(parts) => parts.clone(),
        Op::Conv2d { input, kernel, bias, .. } => vec![*input, *kernel, *bias],
        Op::Linear { input, weight, bias } => vec![*input, *weight, *bias],
        Op::ChannelAffine { input, log_scale, shift } => vec![*input, *log_scale, *shift],
        Op::ChannelMix { input, weight } => vec![*input, *weight],
        Op::LuAssemble { lower, upper, log_s, .. } => vec![*lower, *upper, *log_s],
    }
}

fn accumulate<R: Real>(grads: &mut [Option<Tensor<R>>], v: Var, g: Tensor<R>) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (a, b) in existing.data_mut().iter_mut().zip(g.data()) {
                *a += *b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

/// Space-to-depth on `N×C×H×W`, see [`kernels::squeeze_index`].
pub fn squeeze_tensor<R: Real>(x: &Tensor<R>) -> Result<Tensor<R>> {
    let (n, c, h, w) = x.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::config(format!("squeeze needs even spatial dims, got {h}×{w}")));
    }
    let map = kernels::squeeze_index(c, h, w);
    let per = c * h * w;
    let mut out = vec![R::zero(); x.numel()];
    for s in 0..n {
        let src = &x.data()[s * per..(s + 1) * per];
        let dst = &mut out[s * per..(s + 1) * per];
        for (i, &j) in map.iter().enumerate() {
            dst[j] = src[i];
        }
    }
    Tensor::new(vec![n, c * 4, h / 2, w / 2], out)
}

pub fn unsqueeze_tensor<R: Real>(x: &Tensor<R>) -> Result<Tensor<R>> {
    let (n, c4, h2, w2) = x.dims4()?;
    if c4 % 4 != 0 {
        return Err(Error::config(format!("unsqueeze needs a channel count divisible by 4, got {c4}")));
    }
    let (c, h, w) = (c4 / 4, h2 * 2, w2 * 2);
    let map = kernels::squeeze_index(c, h, w);
    let per = c * h * w;
    let mut out = vec![R::zero(); x.numel()];
    for s in 0..n {
        let src = &x.data()[s * per..(s + 1) * per];
        let dst = &mut out[s * per..(s + 1) * per];
        for (i, &j) in map.iter().enumerate() {
            dst[i] = src[j];
        }
    }
    Tensor::new(vec![n, c, h, w], out)
}

pub fn conv2d_forward<R: Real>(
    x: &Tensor<R>,
    kernel: &Tensor<R>,
    bias: &Tensor<R>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<R>> {
    let (n, cin, h, w) = x.dims4()?;
    let (cout, kcin, kh, kw) = kernel.dims4()?;
    if kcin != cin || kh != kw || kh % 2 == 0 || stride == 0 || bias.shape() != [cout] {
        return Err(Error::config(format!(
            "conv2d: input {:?}, kernel {:?}, bias {:?}, stride {stride} are incompatible",
            x.shape(),
            kernel.shape(),
            bias.shape()
        )));
    }
    if h + 2 * padding < kh || w + 2 * padding < kw {
        return Err(Error::config(format!("conv2d: kernel {kh} larger than padded input {h}×{w}")));
    }
    let g = ConvGeometry { in_channels: cin, height: h, width: w, kernel: kh, stride, padding };
    let (oh, ow) = (g.out_height(), g.out_width());
    let positions = oh * ow;
    let patch = g.patch_len();
    let mut cols = vec![R::zero(); patch * positions];
    let mut out = vec![R::zero(); n * cout * positions];
    for s in 0..n {
        im2col(&g, &x.data()[s * cin * h * w..(s + 1) * cin * h * w], &mut cols);
        let dst = &mut out[s * cout * positions..(s + 1) * cout * positions];
        for (co, plane) in dst.chunks_mut(positions).enumerate() {
            plane.fill(bias.data()[co]);
        }
        R::gemm(
            cout, patch, positions, R::one(),
            kernel.data(), (patch as isize, 1),
            &cols, (positions as isize, 1),
            R::one(), dst, (positions as isize, 1),
        );
    }
    Tensor::new(vec![n, cout, oh, ow], out)
}

use kernels::{col2im_add, im2col};

type ConvGrads<R> = (Option<Tensor<R>>, Option<Tensor<R>>, Option<Tensor<R>>);

fn conv2d_backward<R: Real>(
    x: &Tensor<R>,
    kernel: &Tensor<R>,
    g: &Tensor<R>,
    stride: usize,
    padding: usize,
    want_input: bool,
    want_params: bool,
) -> Result<ConvGrads<R>> {
    let (n, cin, h, w) = x.dims4()?;
    let (cout, _, k, _) = kernel.dims4()?;
    let geo = ConvGeometry { in_channels: cin, height: h, width: w, kernel: k, stride, padding };
    let positions = geo.out_positions();
    let patch = geo.patch_len();
    let mut cols = vec![R::zero(); patch * positions];
    let mut d_input = want_input.then(|| vec![R::zero(); x.numel()]);
    let mut d_kernel = want_params.then(|| vec![R::zero(); kernel.numel()]);
    let mut d_bias = want_params.then(|| vec![R::zero(); cout]);
    let (ps, pos) = (patch as isize, positions as isize);
    for s in 0..n {
        let gs = &g.data()[s * cout * positions..(s + 1) * cout * positions];
        if let (Some(dk), Some(db)) = (d_kernel.as_mut(), d_bias.as_mut()) {
            im2col(&geo, &x.data()[s * cin * h * w..(s + 1) * cin * h * w], &mut cols);
            // dK += dY · colsᵀ
            R::gemm(cout, positions, patch, R::one(), gs, (pos, 1), &cols, (1, pos), R::one(), dk, (ps, 1));
            for (co, plane) in gs.chunks(positions).enumerate() {
                db[co] += plane.iter().copied().sum::<R>();
            }
        }
        if let Some(di) = d_input.as_mut() {
            // dcols = Kᵀ · dY
            R::gemm(patch, cout, positions, R::one(), kernel.data(), (1, ps), gs, (pos, 1), R::zero(), &mut cols, (pos, 1));
            col2im_add(&geo, &cols, &mut di[s * cin * h * w..(s + 1) * cin * h * w]);
        }
    }
    Ok((
        d_input.map(|d| Tensor::new(x.shape().to_vec(), d)).transpose()?,
        d_kernel.map(|d| Tensor::new(kernel.shape().to_vec(), d)).transpose()?,
        d_bias.map(|d| Tensor::new(vec![cout], d)).transpose()?,
    ))
}

pub fn dense_forward<R: Real>(x: &Tensor<R>, weight: &Tensor<R>, bias: &Tensor<R>) -> Result<Tensor<R>> {
    if x.rank() != 2 || weight.rank() != 2 || weight.shape()[1] != x.shape()[1] || bias.shape() != [weight.shape()[0]] {
        return Err(Error::config(format!(
            "dense: input {:?}, weight {:?}, bias {:?} are incompatible",
            x.shape(),
            weight.shape(),
            bias.shape()
        )));
    }
    let (n, k) = (x.shape()[0], x.shape()[1]);
    let m = weight.shape()[0];
    let mut out = Vec::with_capacity(n * m);
    for _ in 0..n {
        out.extend_from_slice(bias.data());
    }
    R::gemm(n, k, m, R::one(), x.data(), (k as isize, 1), weight.data(), (1, k as isize), R::one(), &mut out, (m as isize, 1));
    Tensor::new(vec![n, m], out)
}

pub fn channel_mix_forward<R: Real>(x: &Tensor<R>, weight: &Tensor<R>) -> Result<Tensor<R>> {
    let (n, c, h, w) = x.dims4()?;
    if weight.shape() != [n, c, c] {
        return Err(Error::config(format!(
            "channel_mix: weight must be {:?}, got {:?}",
            [n, c, c],
            weight.shape()
        )));
    }
    let hw = h * w;
    let mut out = vec![R::zero(); x.numel()];
    for s in 0..n {
        R::gemm(
            c, c, hw, R::one(),
            &weight.data()[s * c * c..(s + 1) * c * c], (c as isize, 1),
            &x.data()[s * c * hw..(s + 1) * c * hw], (hw as isize, 1),
            R::zero(), &mut out[s * c * hw..(s + 1) * c * hw], (hw as isize, 1),
        );
    }
    Tensor::new(x.shape().to_vec(), out)
}
