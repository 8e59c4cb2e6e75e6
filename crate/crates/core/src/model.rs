//! The 3D U-Net frame scorer.
//!
//! Pipeline for an input `F` of shape `[T, C, W, H]`:
//!
//! 1. squeeze: 1x1x1 convolution `C -> C'`, no bias
//! 2. encoder level `l = 0..levels`: two convolutions with `base * 2^l`
//!    output channels, each followed by ReLU; the result is kept as the skip
//!    tensor, then max-pooled along time with window and stride 2
//! 3. bottleneck: two convolutions with `base * 2^levels` channels and ReLU
//! 4. decoder level `l = levels-1..=0`: transposed convolution with kernel
//!    `2x1x1` and temporal stride 2 mapping to `base * 2^l` channels,
//!    concatenation `[skip, upsampled]`, two convolutions with ReLU
//! 5. spatial global average pool, then a 1-D transposed convolution with
//!    kernel and stride `n` producing one logit per frame, then sigmoid
//!
//! Convolutions use kernel `3 x k x k` with "same" zero padding, where the
//! spatial extent `k` is 3, or 1 along an axis of length 1 (a 3-wide kernel
//! on a length-1 axis only ever sees padding).
//!
//! # Parameter count
//!
//! With `K = 3 * kw * kh`, `c_l = base * 2^l`, `c_in(0) = C'` and
//! `c_in(l) = c_(l-1)`:
//!
//! ```text
//! squeeze     C * C'
//! encoder l   c_l*c_in(l)*K + c_l  +  c_l*c_l*K + c_l
//! bottleneck  c_L*c_(L-1)*K + c_L  +  c_L*c_L*K + c_L        (L = levels)
//! decoder l   c_(l+1)*c_l*2 + c_l  +  c_l*2c_l*K + c_l  +  c_l*c_l*K + c_l
//! head        c_0 * n + 1
//! ```

use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::tensor::{dims4, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub squeezed_channels: usize,
    pub levels: usize,
    pub base_channels: usize,
    /// Frames per feature step (`n`).
    pub expansion: usize,
    pub width: usize,
    pub height: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            in_channels: 16,
            squeezed_channels: 8,
            levels: 2,
            base_channels: 8,
            expansion: 1,
            width: 1,
            height: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    /// Uniform bound for Xavier init; zero for biases.
    pub init_bound: f64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.in_channels == 0 || self.base_channels == 0 || self.squeezed_channels == 0 {
            return bad("channel counts must be >= 1");
        }
        if self.squeezed_channels > self.in_channels {
            return bad("squeezed_channels must not exceed in_channels");
        }
        if self.levels == 0 {
            return bad("levels must be >= 1");
        }
        if self.expansion == 0 {
            return bad("expansion must be >= 1");
        }
        if self.width == 0 || self.height == 0 {
            return bad("spatial dims must be >= 1");
        }
        Ok(())
    }

    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Temporal multiple every input length must satisfy.
    pub fn temporal_multiple(&self) -> usize {
        1 << self.levels
    }

    fn kernel_extent(&self) -> [usize; 3] {
        let k = |d: usize| if d == 1 { 1 } else { 3 };
        [3, k(self.width), k(self.height)]
    }

    fn padding(&self) -> [usize; 3] {
        let k = self.kernel_extent();
        [k[0] / 2, k[1] / 2, k[2] / 2]
    }

    /// Every parameter tensor in storage order.
    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let [kt, kw, kh] = self.kernel_extent();
        let mut specs = Vec::new();
        let conv = |specs: &mut Vec<ParamSpec>,
                    name: String,
                    cout: usize,
                    cin: usize,
                    k: [usize; 3],
                    bias: bool| {
            let r = k[0] * k[1] * k[2];
            specs.push(ParamSpec {
                name: format!("{name}.w"),
                shape: vec![cout, cin, k[0], k[1], k[2]],
                init_bound: (6.0 / ((cin + cout) * r) as f64).sqrt(),
            });
            if bias {
                specs.push(ParamSpec {
                    name: format!("{name}.b"),
                    shape: vec![cout],
                    init_bound: 0.0,
                });
            }
        };
        conv(&mut specs, "squeeze".into(), self.squeezed_channels, self.in_channels, [1, 1, 1], false);
        let mut cin = self.squeezed_channels;
        for l in 0..self.levels {
            let c = self.channels(l);
            conv(&mut specs, format!("enc{l}.conv0"), c, cin, [kt, kw, kh], true);
            conv(&mut specs, format!("enc{l}.conv1"), c, c, [kt, kw, kh], true);
            cin = c;
        }
        let cb = self.channels(self.levels);
        conv(&mut specs, "bottleneck.conv0".into(), cb, cin, [kt, kw, kh], true);
        conv(&mut specs, "bottleneck.conv1".into(), cb, cb, [kt, kw, kh], true);
        for l in (0..self.levels).rev() {
            let c = self.channels(l);
            let up_in = self.channels(l + 1);
            // transposed kernels are stored [C_in, C_out, ...]
            specs.push(ParamSpec {
                name: format!("dec{l}.up.w"),
                shape: vec![up_in, c, 2, 1, 1],
                init_bound: (6.0 / ((up_in + c) * 2) as f64).sqrt(),
            });
            specs.push(ParamSpec {
                name: format!("dec{l}.up.b"),
                shape: vec![c],
                init_bound: 0.0,
            });
            conv(&mut specs, format!("dec{l}.conv0"), c, 2 * c, [kt, kw, kh], true);
            conv(&mut specs, format!("dec{l}.conv1"), c, c, [kt, kw, kh], true);
        }
        let c0 = self.channels(0);
        specs.push(ParamSpec {
            name: "head.w".into(),
            shape: vec![c0, 1, self.expansion, 1, 1],
            init_bound: (6.0 / ((c0 + 1) * self.expansion) as f64).sqrt(),
        });
        specs.push(ParamSpec {
            name: "head.b".into(),
            shape: vec![1],
            init_bound: 0.0,
        });
        specs
    }

    pub fn param_count(&self) -> usize {
        self.param_specs()
            .iter()
            .map(|s| s.shape.iter().product::<usize>())
            .sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub names: Vec<String>,
    pub tensors: Vec<Tensor>,
}

pub fn init_params(config: &ModelConfig, seed: u64) -> Result<ModelParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut names = Vec::new();
    let mut tensors = Vec::new();
    for spec in config.param_specs() {
        let n: usize = spec.shape.iter().product();
        let data = if spec.init_bound > 0.0 {
            let u = Uniform::new(-spec.init_bound, spec.init_bound).expect("positive bound");
            (0..n).map(|_| u.sample(&mut rng)).collect()
        } else {
            vec![0.0; n]
        };
        names.push(spec.name);
        tensors.push(Tensor::new(&spec.shape, data)?);
    }
    Ok(ModelParams {
        config: *config,
        names,
        tensors,
    })
}

impl ModelParams {
    /// Same shapes, every value zero.
    pub fn zeros(config: &ModelConfig) -> Result<ModelParams> {
        config.validate()?;
        let specs = config.param_specs();
        Ok(ModelParams {
            config: *config,
            names: specs.iter().map(|s| s.name.clone()).collect(),
            tensors: specs.iter().map(|s| Tensor::zeros(&s.shape)).collect(),
        })
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        let i = self.names.iter().position(|n| n == name)?;
        Some(&mut self.tensors[i])
    }

    /// Records every parameter as a leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> Vec<NodeId> {
        self.tensors.iter().map(|t| tape.leaf(t.clone())).collect()
    }

    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }
}

/// Frame selection probabilities, each strictly inside (0, 1).
#[derive(Clone, Debug, PartialEq)]
pub struct FramePolicy {
    pub p: Vec<f64>,
}

impl FramePolicy {
    pub fn len(&self) -> usize {
        self.p.len()
    }

    pub fn is_empty(&self) -> bool {
        self.p.is_empty()
    }
}

fn check_input(config: &ModelConfig, x: &Tensor) -> Result<[usize; 4]> {
    let [t, c, w, h] = dims4(x, "input")?;
    if c != config.in_channels {
        return Err(Error::shape(
            "channel",
            format!("model expects {} channels, input has {c}", config.in_channels),
        ));
    }
    if w != config.width || h != config.height {
        return Err(Error::shape(
            "spatial",
            format!(
                "model expects {}x{} spatial, input is {w}x{h}",
                config.width, config.height
            ),
        ));
    }
    let m = config.temporal_multiple();
    if t % m != 0 {
        return Err(Error::Degenerate(format!(
            "temporal length {t} is not divisible by {m}; pad the sequence to a multiple of 2^levels first"
        )));
    }
    Ok([t, c, w, h])
}

/// Squeezes a bound input, returning the `[T, C', W, H]` node.
pub fn squeeze_on_tape(tape: &mut Tape, ids: &[NodeId], x: NodeId) -> Result<NodeId> {
    tape.conv3d(x, ids[0], None, [1; 3], [0; 3])
}

pub fn squeeze(f: &Tensor, params: &ModelParams) -> Result<Tensor> {
    let [_, c, _, _] = dims4(f, "input")?;
    if c != params.config.in_channels {
        return Err(Error::shape(
            "channel",
            format!("model expects {} channels, input has {c}", params.config.in_channels),
        ));
    }
    let mut tape = Tape::new();
    let ids = params.bind(&mut tape);
    let x = tape.leaf(f.clone());
    let y = squeeze_on_tape(&mut tape, &ids, x)?;
    Ok(tape.value(y).clone())
}

/// Builds the network on `tape` and returns the node holding the `[T*n]`
/// logits. `ids` must come from [`ModelParams::bind`].
pub fn logits_on_tape(
    tape: &mut Tape,
    config: &ModelConfig,
    ids: &[NodeId],
    x: NodeId,
) -> Result<NodeId> {
    let [t, _, _, _] = check_input(config, tape.value(x))?;
    let pad = config.padding();
    let mut next = ids.iter().copied();
    let mut take = || next.next().expect("parameter list matches config");

    let sq = take();
    let mut h = tape.conv3d(x, sq, None, [1; 3], [0; 3])?;
    let block = |tape: &mut Tape, h: NodeId, take: &mut dyn FnMut() -> NodeId| -> Result<NodeId> {
        let (w0, b0) = (take(), take());
        let a = tape.conv3d(h, w0, Some(b0), [1; 3], pad)?;
        let a = tape.relu(a);
        let (w1, b1) = (take(), take());
        let a = tape.conv3d(a, w1, Some(b1), [1; 3], pad)?;
        Ok(tape.relu(a))
    };
    let mut skips = Vec::with_capacity(config.levels);
    for _ in 0..config.levels {
        h = block(tape, h, &mut take)?;
        skips.push(h);
        h = tape.maxpool_temporal(h, 2, 2)?;
    }
    h = block(tape, h, &mut take)?;
    for skip in skips.into_iter().rev() {
        let (wu, bu) = (take(), take());
        let up = tape.conv_transpose(h, wu, Some(bu), [2, 1, 1])?;
        let cat = tape.concat_channels(skip, up)?;
        h = block(tape, cat, &mut take)?;
    }
    let pooled = tape.global_avg_pool_spatial(h)?;
    let c0 = config.channels(0);
    let pooled = tape.reshape(pooled, &[t, c0, 1, 1])?;
    let (wh, bh) = (take(), take());
    let z = tape.conv_transpose(pooled, wh, Some(bh), [config.expansion, 1, 1])?;
    tape.reshape(z, &[t * config.expansion])
}

pub fn forward(f: &Tensor, params: &ModelParams) -> Result<FramePolicy> {
    let mut tape = Tape::new();
    let ids = params.bind(&mut tape);
    let x = tape.leaf(f.clone());
    let z = logits_on_tape(&mut tape, &params.config, &ids, x)?;
    let p = tape.sigmoid(z);
    Ok(FramePolicy {
        p: tape.value(p).data().to_vec(),
    })
}
