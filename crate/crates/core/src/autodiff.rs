//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every operation appends a node to the [`Tape`] and returns its [`NodeId`].
//! Ids grow monotonically, so walking the node list backwards from the loss
//! visits each node once in reverse topological order.
//!
//! ```
//! use vsumm::autodiff::Tape;
//! use vsumm::Tensor;
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(Tensor::from_vec(vec![1.0, 2.0, 3.0]));
//! let y = tape.square(x);
//! let loss = tape.sum(y);
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.wrt(&tape, x).data(), &[2.0, 4.0, 6.0]);
//! ```

use crate::error::{Error, Result};
use crate::tensor::{dims4, dims5, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Deliberate backward-pass bugs, used to prove the gradient checker bites.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    ConvInputGradSign,
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    x: [usize; 4],
    k: [usize; 5],
    stride: [usize; 3],
    pad: [usize; 3],
    out: [usize; 4],
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv3d {
        x: NodeId,
        k: NodeId,
        bias: Option<NodeId>,
        geom: ConvGeom,
    },
    ConvTranspose {
        x: NodeId,
        k: NodeId,
        bias: Option<NodeId>,
        geom: ConvGeom,
    },
    MaxPoolT {
        x: NodeId,
        argmax: Vec<usize>,
    },
    Relu(NodeId),
    Sigmoid(NodeId),
    GapSpatial {
        x: NodeId,
        area: usize,
    },
    Concat {
        a: NodeId,
        b: NodeId,
        ca: usize,
        cb: usize,
        inner: usize,
    },
    Reshape(NodeId),
    Truncate(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    Square(NodeId),
    Abs(NodeId),
    Recip(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    BernoulliLogLik {
        z: NodeId,
        actions: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    fault: Option<Fault>,
}

/// Gradient of the loss with respect to one node.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradient {
    pub value: Tensor,
    /// Number of contributions summed into `value`.
    pub count: usize,
}

#[derive(Debug)]
pub struct Grads {
    grads: Vec<Option<Gradient>>,
}

impl Grads {
    pub fn get(&self, id: NodeId) -> Option<&Gradient> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Gradient for `id`, or zeros shaped like its value if the loss does
    /// not depend on it.
    pub fn wrt(&self, tape: &Tape, id: NodeId) -> Tensor {
        match self.get(id) {
            Some(g) => g.value.clone(),
            None => Tensor::zeros(tape.value(id).shape()),
        }
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `log(sigmoid(z))` without overflow.
pub fn log_sigmoid(z: f64) -> f64 {
    -((-z).max(0.0) + (-z.abs()).exp().ln_1p())
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    #[doc(hidden)]
    pub fn inject_fault(&mut self, fault: Fault) {
        self.fault = Some(fault);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    /// Records an input. Parameters and constants are both leaves; a constant
    /// is simply a leaf whose gradient nobody reads.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value)
    }

    pub fn conv3d(
        &mut self,
        x: NodeId,
        k: NodeId,
        bias: Option<NodeId>,
        stride: [usize; 3],
        pad: [usize; 3],
    ) -> Result<NodeId> {
        let xs = dims4(self.value(x), "input")?;
        let ks = dims5(self.value(k), "kernel")?;
        if stride.contains(&0) {
            return Err(Error::Contract("conv3d stride must be >= 1".into()));
        }
        if ks[1] != xs[1] {
            return Err(Error::shape(
                "channel",
                format!("kernel expects {} input channels, input has {}", ks[1], xs[1]),
            ));
        }
        let names = ["temporal", "width", "height"];
        let mut out = [xs[0], ks[0], 0, 0];
        for a in 0..3 {
            let padded = xs[[0, 2, 3][a]] + 2 * pad[a];
            if ks[2 + a] > padded {
                return Err(Error::shape(
                    names[a],
                    format!("kernel extent {} exceeds padded input {}", ks[2 + a], padded),
                ));
            }
            let o = (padded - ks[2 + a]) / stride[a] + 1;
            if a == 0 {
                out[0] = o;
            } else {
                out[a + 1] = o;
            }
        }
        check_bias(self, bias, ks[0])?;
        let geom = ConvGeom {
            x: xs,
            k: ks,
            stride,
            pad,
            out,
        };
        let y = conv3d_forward(
            self.value(x).data(),
            self.value(k).data(),
            bias.map(|b| self.value(b).data()),
            &geom,
        );
        Ok(self.push(
            Op::Conv3d { x, k, bias, geom },
            Tensor::from_parts(out.to_vec(), y),
        ))
    }

    /// Transposed convolution with kernel layout `[C_in, C_out, kt, kw, kh]`
    /// and no output cropping. With `kt == stride[0]` the temporal length is
    /// multiplied by the stride. It is the adjoint of [`Tape::conv3d`] with
    /// zero padding and the same kernel tensor.
    pub fn conv_transpose(
        &mut self,
        x: NodeId,
        k: NodeId,
        bias: Option<NodeId>,
        stride: [usize; 3],
    ) -> Result<NodeId> {
        let xs = dims4(self.value(x), "input")?;
        let ks = dims5(self.value(k), "kernel")?;
        if stride.contains(&0) {
            return Err(Error::Contract("conv_transpose stride must be >= 1".into()));
        }
        if ks[0] != xs[1] {
            return Err(Error::shape(
                "channel",
                format!("kernel expects {} input channels, input has {}", ks[0], xs[1]),
            ));
        }
        let out = [
            (xs[0] - 1) * stride[0] + ks[2],
            ks[1],
            (xs[2] - 1) * stride[1] + ks[3],
            (xs[3] - 1) * stride[2] + ks[4],
        ];
        check_bias(self, bias, ks[1])?;
        let geom = ConvGeom {
            x: xs,
            k: ks,
            stride,
            pad: [0; 3],
            out,
        };
        let y = conv_t_forward(
            self.value(x).data(),
            self.value(k).data(),
            bias.map(|b| self.value(b).data()),
            &geom,
        );
        Ok(self.push(
            Op::ConvTranspose { x, k, bias, geom },
            Tensor::from_parts(out.to_vec(), y),
        ))
    }

    /// Max pooling along the temporal axis. Gradient goes to the first
    /// maximal element of each window.
    pub fn maxpool_temporal(&mut self, x: NodeId, window: usize, stride: usize) -> Result<NodeId> {
        let [t, c, w, h] = dims4(self.value(x), "input")?;
        if window == 0 || stride == 0 {
            return Err(Error::Contract("pool window and stride must be >= 1".into()));
        }
        if t < window {
            return Err(Error::Degenerate(format!(
                "temporal length {t} shorter than pool window {window}"
            )));
        }
        let to = (t - window) / stride + 1;
        let inner = c * w * h;
        let xd = self.value(x).data();
        let mut y = vec![0.0; to * inner];
        let mut argmax = vec![0; to * inner];
        for o in 0..to {
            for j in 0..inner {
                let mut best = o * stride * inner + j;
                for d in 1..window {
                    let idx = (o * stride + d) * inner + j;
                    if xd[idx] > xd[best] {
                        best = idx;
                    }
                }
                y[o * inner + j] = xd[best];
                argmax[o * inner + j] = best;
            }
        }
        Ok(self.push(
            Op::MaxPoolT { x, argmax },
            Tensor::from_parts(vec![to, c, w, h], y),
        ))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(|a| a.max(0.0));
        self.push(Op::Relu(x), v)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(sigmoid);
        self.push(Op::Sigmoid(x), v)
    }

    /// `[T, C, W, H] -> [T, C]`, averaging over the spatial axes.
    pub fn global_avg_pool_spatial(&mut self, x: NodeId) -> Result<NodeId> {
        let [t, c, w, h] = dims4(self.value(x), "input")?;
        let area = w * h;
        let xd = self.value(x).data();
        let y: Vec<f64> = (0..t * c)
            .map(|i| xd[i * area..(i + 1) * area].iter().sum::<f64>() / area as f64)
            .collect();
        Ok(self.push(
            Op::GapSpatial { x, area },
            Tensor::from_parts(vec![t, c], y),
        ))
    }

    /// Concatenates along axis 1 (channels), `a` first.
    pub fn concat_channels(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let sa = self.value(a).shape().to_vec();
        let sb = self.value(b).shape().to_vec();
        if sa.len() < 2 || sa.len() != sb.len() {
            return Err(Error::shape("rank", format!("cannot concat {sa:?} and {sb:?}")));
        }
        if sa[0] != sb[0] {
            return Err(Error::shape(
                "temporal",
                format!("concat lengths {} vs {}", sa[0], sb[0]),
            ));
        }
        if sa[2..] != sb[2..] {
            return Err(Error::shape("spatial", format!("concat {sa:?} vs {sb:?}")));
        }
        let inner: usize = sa[2..].iter().product();
        let (ca, cb) = (sa[1], sb[1]);
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut y = Vec::with_capacity(ad.len() + bd.len());
        for t in 0..sa[0] {
            y.extend_from_slice(&ad[t * ca * inner..(t + 1) * ca * inner]);
            y.extend_from_slice(&bd[t * cb * inner..(t + 1) * cb * inner]);
        }
        let mut shape = sa.clone();
        shape[1] = ca + cb;
        Ok(self.push(
            Op::Concat {
                a,
                b,
                ca,
                cb,
                inner,
            },
            Tensor::from_parts(shape, y),
        ))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let v = self.value(x).reshape(shape)?;
        Ok(self.push(Op::Reshape(x), v))
    }

    /// Keeps the first `len` entries along axis 0.
    pub fn truncate(&mut self, x: NodeId, len: usize) -> Result<NodeId> {
        let xv = self.value(x);
        let shape = xv.shape();
        if len == 0 || len > shape[0] {
            return Err(Error::shape(
                "temporal",
                format!("cannot truncate length {} to {len}", shape[0]),
            ));
        }
        let inner: usize = shape[1..].iter().product();
        let mut s = shape.to_vec();
        s[0] = len;
        let v = Tensor::from_parts(s, xv.data()[..len * inner].to_vec());
        Ok(self.push(Op::Truncate(x), v))
    }

    fn same_shape(&self, a: NodeId, b: NodeId) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(
                "elementwise",
                format!(
                    "{:?} vs {:?}",
                    self.value(a).shape(),
                    self.value(b).shape()
                ),
            ));
        }
        Ok(())
    }

    fn zip(&self, a: NodeId, b: NodeId, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (av, bv) = (self.value(a), self.value(b));
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_parts(av.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b)?;
        let v = self.zip(a, b, |x, y| x + y);
        Ok(self.push(Op::Add(a, b), v))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b)?;
        let v = self.zip(a, b, |x, y| x - y);
        Ok(self.push(Op::Sub(a, b), v))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b)?;
        let v = self.zip(a, b, |x, y| x * y);
        Ok(self.push(Op::Mul(a, b), v))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let v = self.value(x).map(|a| a * c);
        self.push(Op::Scale(x, c), v)
    }

    pub fn add_scalar(&mut self, x: NodeId, c: f64) -> NodeId {
        let v = self.value(x).map(|a| a + c);
        self.push(Op::AddScalar(x), v)
    }

    pub fn square(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(|a| a * a);
        self.push(Op::Square(x), v)
    }

    /// Elementwise absolute value; the derivative at 0 is taken as 0.
    pub fn abs(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(f64::abs);
        self.push(Op::Abs(x), v)
    }

    pub fn recip(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(|a| 1.0 / a);
        self.push(Op::Recip(x), v)
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s = self.value(x).data().iter().sum();
        self.push(Op::Sum(x), Tensor::scalar(s))
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x);
        let m = v.data().iter().sum::<f64>() / v.len() as f64;
        self.push(Op::Mean(x), Tensor::scalar(m))
    }

    /// `sum_t a_t log sigmoid(z_t) + (1 - a_t) log sigmoid(-z_t)` for constant
    /// weights `a_t`, computed from logits so it stays finite.
    pub fn bernoulli_log_lik(&mut self, z: NodeId, actions: &[f64]) -> Result<NodeId> {
        let zv = self.value(z);
        if zv.len() != actions.len() {
            return Err(Error::shape(
                "frames",
                format!("{} logits vs {} actions", zv.len(), actions.len()),
            ));
        }
        let s = zv
            .data()
            .iter()
            .zip(actions)
            .map(|(&z, &a)| a * log_sigmoid(z) + (1.0 - a) * log_sigmoid(-z))
            .sum();
        Ok(self.push(
            Op::BernoulliLogLik {
                z,
                actions: actions.to_vec(),
            },
            Tensor::scalar(s),
        ))
    }

    pub fn backward(&self, loss: NodeId) -> Result<Grads> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut g: Vec<Option<Gradient>> = vec![None; self.nodes.len()];
        g[loss.0] = Some(Gradient {
            value: Tensor::scalar(1.0),
            count: 1,
        });
        for i in (0..=loss.0).rev() {
            let Some(gy) = g[i].take() else { continue };
            let node = &self.nodes[i];
            let gyd = gy.value.data();
            match &node.op {
                Op::Leaf => {}
                Op::Conv3d { x, k, bias, geom } => {
                    let (mut gx, gk, gb) = conv3d_backward(
                        self.value(*x).data(),
                        self.value(*k).data(),
                        gyd,
                        geom,
                    );
                    if self.fault == Some(Fault::ConvInputGradSign) {
                        gx.iter_mut().for_each(|v| *v = -*v);
                    }
                    acc(&mut g, self, *x, gx);
                    acc(&mut g, self, *k, gk);
                    if let Some(b) = bias {
                        acc(&mut g, self, *b, gb);
                    }
                }
                Op::ConvTranspose { x, k, bias, geom } => {
                    let (gx, gk, gb) = conv_t_backward(
                        self.value(*x).data(),
                        self.value(*k).data(),
                        gyd,
                        geom,
                    );
                    acc(&mut g, self, *x, gx);
                    acc(&mut g, self, *k, gk);
                    if let Some(b) = bias {
                        acc(&mut g, self, *b, gb);
                    }
                }
                Op::MaxPoolT { x, argmax } => {
                    let mut gx = vec![0.0; self.value(*x).len()];
                    for (o, &src) in argmax.iter().enumerate() {
                        gx[src] += gyd[o];
                    }
                    acc(&mut g, self, *x, gx);
                }
                Op::Relu(x) => {
                    let xd = self.value(*x).data();
                    let gx = xd
                        .iter()
                        .zip(gyd)
                        .map(|(&a, &d)| if a > 0.0 { d } else { 0.0 })
                        .collect();
                    acc(&mut g, self, *x, gx);
                }
                Op::Sigmoid(x) => {
                    let gx = node
                        .value
                        .data()
                        .iter()
                        .zip(gyd)
                        .map(|(&s, &d)| d * s * (1.0 - s))
                        .collect();
                    acc(&mut g, self, *x, gx);
                }
                Op::GapSpatial { x, area } => {
                    let gx = gyd
                        .iter()
                        .flat_map(|&d| std::iter::repeat_n(d / *area as f64, *area))
                        .collect();
                    acc(&mut g, self, *x, gx);
                }
                Op::Concat {
                    a,
                    b,
                    ca,
                    cb,
                    inner,
                } => {
                    let t = node.value.shape()[0];
                    let (na, nb) = (ca * inner, cb * inner);
                    let mut ga = Vec::with_capacity(t * na);
                    let mut gb = Vec::with_capacity(t * nb);
                    for s in 0..t {
                        let row = &gyd[s * (na + nb)..(s + 1) * (na + nb)];
                        ga.extend_from_slice(&row[..na]);
                        gb.extend_from_slice(&row[na..]);
                    }
                    acc(&mut g, self, *a, ga);
                    acc(&mut g, self, *b, gb);
                }
                Op::Reshape(x) => acc(&mut g, self, *x, gyd.to_vec()),
                Op::Truncate(x) => {
                    let mut gx = vec![0.0; self.value(*x).len()];
                    gx[..gyd.len()].copy_from_slice(gyd);
                    acc(&mut g, self, *x, gx);
                }
                Op::Add(a, b) => {
                    acc(&mut g, self, *a, gyd.to_vec());
                    acc(&mut g, self, *b, gyd.to_vec());
                }
                Op::Sub(a, b) => {
                    acc(&mut g, self, *a, gyd.to_vec());
                    acc(&mut g, self, *b, gyd.iter().map(|d| -d).collect());
                }
                Op::Mul(a, b) => {
                    let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                    acc(&mut g, self, *a, gyd.iter().zip(bd).map(|(d, y)| d * y).collect());
                    acc(&mut g, self, *b, gyd.iter().zip(ad).map(|(d, x)| d * x).collect());
                }
                Op::Scale(x, c) => acc(&mut g, self, *x, gyd.iter().map(|d| d * c).collect()),
                Op::AddScalar(x) => acc(&mut g, self, *x, gyd.to_vec()),
                Op::Square(x) => {
                    let xd = self.value(*x).data();
                    acc(&mut g, self, *x, gyd.iter().zip(xd).map(|(d, a)| 2.0 * a * d).collect());
                }
                Op::Abs(x) => {
                    let xd = self.value(*x).data();
                    let gx = gyd
                        .iter()
                        .zip(xd)
                        .map(|(&d, &a)| if a == 0.0 { 0.0 } else { d * a.signum() })
                        .collect();
                    acc(&mut g, self, *x, gx);
                }
                Op::Recip(x) => {
                    let yd = node.value.data();
                    acc(&mut g, self, *x, gyd.iter().zip(yd).map(|(d, y)| -d * y * y).collect());
                }
                Op::Sum(x) => {
                    let n = self.value(*x).len();
                    acc(&mut g, self, *x, vec![gyd[0]; n]);
                }
                Op::Mean(x) => {
                    let n = self.value(*x).len();
                    acc(&mut g, self, *x, vec![gyd[0] / n as f64; n]);
                }
                Op::BernoulliLogLik { z, actions } => {
                    let zd = self.value(*z).data();
                    let gz = zd
                        .iter()
                        .zip(actions)
                        .map(|(&z, &a)| gyd[0] * (a - sigmoid(z)))
                        .collect();
                    acc(&mut g, self, *z, gz);
                }
            }
            if matches!(node.op, Op::Leaf) {
                g[i] = Some(gy);
            }
        }
        Ok(Grads { grads: g })
    }
}

fn check_bias(tape: &Tape, bias: Option<NodeId>, channels: usize) -> Result<()> {
    if let Some(b) = bias {
        if tape.value(b).len() != channels {
            return Err(Error::shape(
                "bias",
                format!("{} bias values for {channels} output channels", tape.value(b).len()),
            ));
        }
    }
    Ok(())
}

fn acc(g: &mut [Option<Gradient>], tape: &Tape, id: NodeId, delta: Vec<f64>) {
    match &mut g[id.0] {
        Some(existing) => {
            for (a, b) in existing.value.data_mut().iter_mut().zip(&delta) {
                *a += b;
            }
            existing.count += 1;
        }
        slot @ None => {
            *slot = Some(Gradient {
                value: Tensor::from_parts(tape.value(id).shape().to_vec(), delta),
                count: 1,
            });
        }
    }
}

#[inline]
fn i4(s: &[usize; 4], a: usize, b: usize, c: usize, d: usize) -> usize {
    ((a * s[1] + b) * s[2] + c) * s[3] + d
}

#[inline]
fn i5(s: &[usize; 5], a: usize, b: usize, c: usize, d: usize, e: usize) -> usize {
    (((a * s[1] + b) * s[2] + c) * s[3] + d) * s[4] + e
}

/// Input index touched by output index `o` and kernel tap `d`, if inside.
#[inline]
fn tap(o: usize, d: usize, stride: usize, pad: usize, len: usize) -> Option<usize> {
    let p = o * stride + d;
    if p < pad || p - pad >= len {
        None
    } else {
        Some(p - pad)
    }
}

fn conv3d_forward(x: &[f64], k: &[f64], bias: Option<&[f64]>, g: &ConvGeom) -> Vec<f64> {
    let (xs, ks, os) = (g.x, g.k, g.out);
    let mut y = vec![0.0; os.iter().product()];
    for to in 0..os[0] {
        for co in 0..os[1] {
            for wo in 0..os[2] {
                for ho in 0..os[3] {
                    let mut s = bias.map_or(0.0, |b| b[co]);
                    for ci in 0..xs[1] {
                        for dt in 0..ks[2] {
                            let Some(ti) = tap(to, dt, g.stride[0], g.pad[0], xs[0]) else {
                                continue;
                            };
                            for dw in 0..ks[3] {
                                let Some(wi) = tap(wo, dw, g.stride[1], g.pad[1], xs[2]) else {
                                    continue;
                                };
                                for dh in 0..ks[4] {
                                    let Some(hi) = tap(ho, dh, g.stride[2], g.pad[2], xs[3])
                                    else {
                                        continue;
                                    };
                                    s += x[i4(&xs, ti, ci, wi, hi)]
                                        * k[i5(&ks, co, ci, dt, dw, dh)];
                                }
                            }
                        }
                    }
                    y[i4(&os, to, co, wo, ho)] = s;
                }
            }
        }
    }
    y
}

fn conv3d_backward(
    x: &[f64],
    k: &[f64],
    gy: &[f64],
    g: &ConvGeom,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (xs, ks, os) = (g.x, g.k, g.out);
    let mut gx = vec![0.0; x.len()];
    let mut gk = vec![0.0; k.len()];
    let mut gb = vec![0.0; ks[0]];
    for to in 0..os[0] {
        for co in 0..os[1] {
            for wo in 0..os[2] {
                for ho in 0..os[3] {
                    let d = gy[i4(&os, to, co, wo, ho)];
                    gb[co] += d;
                    if d == 0.0 {
                        continue;
                    }
                    for ci in 0..xs[1] {
                        for dt in 0..ks[2] {
                            let Some(ti) = tap(to, dt, g.stride[0], g.pad[0], xs[0]) else {
                                continue;
                            };
                            for dw in 0..ks[3] {
                                let Some(wi) = tap(wo, dw, g.stride[1], g.pad[1], xs[2]) else {
                                    continue;
                                };
                                for dh in 0..ks[4] {
                                    let Some(hi) = tap(ho, dh, g.stride[2], g.pad[2], xs[3])
                                    else {
                                        continue;
                                    };
                                    let xi = i4(&xs, ti, ci, wi, hi);
                                    let ki = i5(&ks, co, ci, dt, dw, dh);
                                    gx[xi] += d * k[ki];
                                    gk[ki] += d * x[xi];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    (gx, gk, gb)
}

fn conv_t_forward(x: &[f64], k: &[f64], bias: Option<&[f64]>, g: &ConvGeom) -> Vec<f64> {
    let (xs, ks, os) = (g.x, g.k, g.out);
    let mut y = vec![0.0; os.iter().product()];
    if let Some(b) = bias {
        for (i, v) in y.iter_mut().enumerate() {
            *v = b[(i / (os[2] * os[3])) % os[1]];
        }
    }
    for ti in 0..xs[0] {
        for ci in 0..xs[1] {
            for wi in 0..xs[2] {
                for hi in 0..xs[3] {
                    let v = x[i4(&xs, ti, ci, wi, hi)];
                    for co in 0..ks[1] {
                        for dt in 0..ks[2] {
                            for dw in 0..ks[3] {
                                for dh in 0..ks[4] {
                                    let yi = i4(
                                        &os,
                                        ti * g.stride[0] + dt,
                                        co,
                                        wi * g.stride[1] + dw,
                                        hi * g.stride[2] + dh,
                                    );
                                    y[yi] += v * k[i5(&ks, ci, co, dt, dw, dh)];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    y
}

fn conv_t_backward(
    x: &[f64],
    k: &[f64],
    gy: &[f64],
    g: &ConvGeom,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (xs, ks, os) = (g.x, g.k, g.out);
    let mut gx = vec![0.0; x.len()];
    let mut gk = vec![0.0; k.len()];
    let mut gb = vec![0.0; ks[1]];
    for (i, d) in gy.iter().enumerate() {
        gb[(i / (os[2] * os[3])) % os[1]] += d;
    }
    for ti in 0..xs[0] {
        for ci in 0..xs[1] {
            for wi in 0..xs[2] {
                for hi in 0..xs[3] {
                    let xi = i4(&xs, ti, ci, wi, hi);
                    let v = x[xi];
                    let mut s = 0.0;
                    for co in 0..ks[1] {
                        for dt in 0..ks[2] {
                            for dw in 0..ks[3] {
                                for dh in 0..ks[4] {
                                    let d = gy[i4(
                                        &os,
                                        ti * g.stride[0] + dt,
                                        co,
                                        wi * g.stride[1] + dw,
                                        hi * g.stride[2] + dh,
                                    )];
                                    let ki = i5(&ks, ci, co, dt, dw, dh);
                                    s += d * k[ki];
                                    gk[ki] += d * v;
                                }
                            }
                        }
                    }
                    gx[xi] = s;
                }
            }
        }
    }
    (gx, gk, gb)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn conv3d_scalar_product() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1, 1, 1, 1], &[2.0]));
        let k = tape.leaf(t(&[1, 1, 1, 1, 1], &[3.0]));
        let y = tape.conv3d(x, k, None, [1; 3], [0; 3]).unwrap();
        assert_eq!(tape.value(y).data(), &[6.0]);
    }

    #[test]
    fn conv3d_identity_kernel_same_padding() {
        let mut tape = Tape::new();
        let data: Vec<f64> = (0..3 * 2 * 3 * 3).map(|i| i as f64 * 0.5 - 3.0).collect();
        let x = tape.leaf(t(&[3, 2, 3, 3], &data));
        let mut kd = vec![0.0; 2 * 2 * 27];
        for c in 0..2 {
            kd[(c * 2 + c) * 27 + 13] = 1.0;
        }
        let k = tape.leaf(t(&[2, 2, 3, 3, 3], &kd));
        let y = tape.conv3d(x, k, None, [1; 3], [1; 3]).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
    }

    #[test]
    fn conv3d_rejects_channel_mismatch() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2, 3, 1, 1]));
        let k = tape.leaf(Tensor::zeros(&[1, 2, 1, 1, 1]));
        let err = tape.conv3d(x, k, None, [1; 3], [0; 3]).unwrap_err();
        assert!(matches!(err, Error::Shape { axis: "channel", .. }));
        let k = tape.leaf(Tensor::zeros(&[1, 3, 3, 1, 1]));
        let err = tape.conv3d(x, k, None, [1; 3], [0; 3]).unwrap_err();
        assert!(matches!(err, Error::Shape { axis: "temporal", .. }));
    }

    #[test]
    fn conv_transpose_single_tap_upsample() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1, 1, 1, 1], &[5.0]));
        let k = tape.leaf(t(&[1, 1, 2, 1, 1], &[1.0, 1.0]));
        let y = tape.conv_transpose(x, k, None, [2, 1, 1]).unwrap();
        assert_eq!(tape.value(y).shape(), &[2, 1, 1, 1]);
        assert_eq!(tape.value(y).data(), &[5.0, 5.0]);
    }

    #[test]
    fn maxpool_monotone_and_ties() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[4, 1, 1, 1], &[1.0, 2.0, 3.0, 4.0]));
        let y = tape.maxpool_temporal(x, 2, 2).unwrap();
        assert_eq!(tape.value(y).data(), &[2.0, 4.0]);

        let c = tape.leaf(Tensor::full(&[4, 1, 1, 1], 7.0));
        let y = tape.maxpool_temporal(c, 2, 2).unwrap();
        assert_eq!(tape.value(y).data(), &[7.0, 7.0]);
        let loss = tape.sum(y);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(&tape, c).data(), &[1.0, 0.0, 1.0, 0.0]);

        let short = tape.leaf(Tensor::zeros(&[1, 1, 1, 1]));
        assert!(matches!(
            tape.maxpool_temporal(short, 2, 2),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn activations() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![-1.0, 2.0, 0.0]));
        let r = tape.relu(x);
        assert_eq!(tape.value(r).data(), &[0.0, 2.0, 0.0]);
        let s = tape.sigmoid(x);
        assert_eq!(tape.value(s).data()[2], 0.5);
        let z = tape.leaf(Tensor::scalar(0.0));
        let s = tape.sigmoid(z);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(&tape, z).item(), 0.25);
    }

    #[test]
    fn gap_identity_and_constant() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2, 2, 1, 1], &[1.0, 2.0, 3.0, 4.0]));
        let y = tape.global_avg_pool_spatial(x).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);
        let c = tape.leaf(Tensor::full(&[2, 1, 3, 2], 1.5));
        let y = tape.global_avg_pool_spatial(c).unwrap();
        assert_eq!(tape.value(y).data(), &[1.5, 1.5]);
    }

    #[test]
    fn sum_of_params_gives_ones_and_detached_gives_zero() {
        let mut tape = Tape::new();
        let p = tape.leaf(Tensor::from_vec(vec![0.3, -1.2, 4.0]));
        let q = tape.leaf(Tensor::from_vec(vec![1.0, 1.0]));
        let loss = tape.sum(p);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(&tape, p).data(), &[1.0, 1.0, 1.0]);
        assert!(g.get(q).is_none());
        assert_eq!(g.wrt(&tape, q).data(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_needs_scalar() {
        let mut tape = Tape::new();
        let p = tape.leaf(Tensor::from_vec(vec![1.0, 2.0]));
        assert!(matches!(tape.backward(p), Err(Error::Contract(_))));
    }

    #[test]
    fn shared_node_accumulates() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0));
        let y = tape.mul(x, x).unwrap();
        let g = tape.backward(y).unwrap();
        let gx = g.get(x).unwrap();
        assert_eq!(gx.value.item(), 6.0);
        assert_eq!(gx.count, 2);
    }

    #[test]
    fn log_sigmoid_is_stable() {
        assert!((log_sigmoid(0.0) - 0.5f64.ln()).abs() < 1e-15);
        assert!(log_sigmoid(-800.0).is_finite());
        assert_eq!(log_sigmoid(800.0), 0.0);
        assert!((log_sigmoid(-800.0) + 800.0).abs() < 1e-9);
    }
}
