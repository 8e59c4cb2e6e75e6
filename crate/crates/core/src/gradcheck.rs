//! Central finite-difference verification of tape gradients.

use crate::autodiff::{Fault, NodeId, Tape};
use crate::error::{Error, Result};
use crate::model::{self, ModelConfig};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const EPS_RANGE: (f64, f64) = (1e-7, 1e-3);

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CheckReport {
    /// Max over coordinates of `|analytic - numeric| / max(1, |analytic|)`.
    pub max_rel_err: f64,
    pub input: usize,
    pub coord: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct GradChecker {
    eps: f64,
    fault: Option<Fault>,
}

impl GradChecker {
    pub fn new(eps: f64) -> Result<Self> {
        if !(EPS_RANGE.0..=EPS_RANGE.1).contains(&eps) {
            return Err(Error::Config(format!(
                "gradient-check eps {eps} outside [{}, {}]",
                EPS_RANGE.0, EPS_RANGE.1
            )));
        }
        Ok(GradChecker { eps, fault: None })
    }

    pub fn with_fault(mut self, fault: Option<Fault>) -> Self {
        self.fault = fault;
        self
    }

    fn eval<F>(&self, f: &F, points: &[Tensor]) -> Result<(Tape, Vec<NodeId>, NodeId)>
    where
        F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
    {
        let mut tape = Tape::new();
        if let Some(fault) = self.fault {
            tape.inject_fault(fault);
        }
        let ids: Vec<NodeId> = points.iter().map(|p| tape.leaf(p.clone())).collect();
        let out = f(&mut tape, &ids)?;
        if !tape.value(out).is_scalar() {
            return Err(Error::Contract("checked function must return a scalar".into()));
        }
        Ok((tape, ids, out))
    }

    /// Checks `f` with respect to every coordinate of every input.
    pub fn check<F>(&self, f: F, points: &[Tensor]) -> Result<CheckReport>
    where
        F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
    {
        let (tape, ids, out) = self.eval(&f, points)?;
        let grads = tape.backward(out)?;
        let mut report = CheckReport {
            max_rel_err: 0.0,
            input: 0,
            coord: 0,
        };
        let analytic: Vec<Tensor> = ids.iter().map(|&id| grads.wrt(&tape, id)).collect();
        let mut offset = 0;
        for (i, g) in analytic.iter().enumerate() {
            if let Some(j) = g.data().iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    index: offset + j,
                    detail: format!("analytic gradient of input {i}"),
                });
            }
            offset += g.len();
        }
        let mut offset = 0;
        for (i, point) in points.iter().enumerate() {
            for j in 0..point.len() {
                let a = analytic[i].data()[j];
                let mut shifted = points.to_vec();
                let mut value_at = |delta: f64| -> Result<f64> {
                    let mut d = point.data().to_vec();
                    d[j] += delta;
                    shifted[i] = Tensor::new(point.shape(), d)?;
                    let (t, _, o) = self.eval(&f, &shifted)?;
                    let v = t.value(o).item();
                    if !v.is_finite() {
                        return Err(Error::NonFinite {
                            index: offset + j,
                            detail: format!("function value with input {i} perturbed"),
                        });
                    }
                    Ok(v)
                };
                let numeric = (value_at(self.eps)? - value_at(-self.eps)?) / (2.0 * self.eps);
                let err = (a - numeric).abs() / a.abs().max(1.0);
                if err > report.max_rel_err {
                    report = CheckReport {
                        max_rel_err: err,
                        input: i,
                        coord: j,
                    };
                }
            }
            offset += point.len();
        }
        Ok(report)
    }
}

/// Single-input convenience wrapper returning the max relative error.
pub fn grad_check<F>(f: F, point: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, NodeId) -> Result<NodeId>,
{
    GradChecker::new(eps)?
        .check(|t, ids| f(t, ids[0]), std::slice::from_ref(point))
        .map(|r| r.max_rel_err)
}

#[derive(Clone, Debug)]
pub struct SuiteEntry {
    pub name: &'static str,
    pub max_rel_err: f64,
    pub passed: bool,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("valid shape")
}

/// Values bounded away from zero, so ReLU kinks stay out of reach.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(0.2..1.0);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape, data).expect("valid shape")
}

/// Distinct values, so max-pool windows have no ties.
fn distinct(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let mut vals: Vec<f64> = (0..n).map(|i| i as f64 * 0.1).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        vals.swap(i, j);
    }
    Tensor::new(shape, vals).expect("valid shape")
}

/// Reduces a tensor node to a scalar with fixed random weights.
fn project(tape: &mut Tape, y: NodeId, seed: u64) -> Result<NodeId> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = tape.value(y).shape().to_vec();
    let w = tape.leaf(uniform(&mut rng, &shape, -1.0, 1.0));
    let m = tape.mul(y, w)?;
    Ok(tape.sum(m))
}

/// Full-network check configuration used by the suite.
pub fn suite_model_config() -> ModelConfig {
    ModelConfig {
        in_channels: 4,
        squeezed_channels: 4,
        levels: 2,
        base_channels: 4,
        expansion: 2,
        width: 1,
        height: 1,
    }
}

/// Checks the whole network on a `T = 8` sequence with respect to every
/// parameter and the input.
pub fn check_full_model(checker: &GradChecker, config: &ModelConfig, seed: u64) -> Result<CheckReport> {
    let params = model::init_params(config, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let t = 8usize.max(config.temporal_multiple());
    let input = uniform(
        &mut rng,
        &[t, config.in_channels, config.width, config.height],
        -1.0,
        1.0,
    );
    let mut points = params.tensors.clone();
    points.push(input);
    let cfg = *config;
    checker.check(
        move |tape, ids| {
            let (param_ids, x) = ids.split_at(ids.len() - 1);
            let z = model::logits_on_tape(tape, &cfg, param_ids, x[0])?;
            let p = tape.sigmoid(z);
            project(tape, p, seed + 1)
        },
        &points,
    )
}

/// Runs every per-operation check plus the full network.
pub fn run_suite(eps: f64, tolerance: f64, fault: Option<Fault>) -> Result<Vec<SuiteEntry>> {
    let checker = GradChecker::new(eps)?.with_fault(fault);
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut out = Vec::new();
    let mut record = |name: &'static str, r: CheckReport| {
        out.push(SuiteEntry {
            name,
            max_rel_err: r.max_rel_err,
            passed: r.max_rel_err < tolerance,
        });
    };

    let x = uniform(&mut rng, &[4, 3, 2, 2], -1.0, 1.0);
    let k = uniform(&mut rng, &[2, 3, 3, 1, 1], -1.0, 1.0);
    let b = uniform(&mut rng, &[2], -1.0, 1.0);
    record(
        "conv3d",
        checker.check(
            |t, ids| {
                let y = t.conv3d(ids[0], ids[1], Some(ids[2]), [1, 1, 1], [1, 0, 0])?;
                project(t, y, 1)
            },
            &[x, k, b],
        )?,
    );

    let x = uniform(&mut rng, &[3, 2, 2, 1], -1.0, 1.0);
    let k = uniform(&mut rng, &[2, 3, 2, 1, 1], -1.0, 1.0);
    let b = uniform(&mut rng, &[3], -1.0, 1.0);
    record(
        "conv_transpose",
        checker.check(
            |t, ids| {
                let y = t.conv_transpose(ids[0], ids[1], Some(ids[2]), [2, 1, 1])?;
                project(t, y, 2)
            },
            &[x, k, b],
        )?,
    );

    let x = distinct(&mut rng, &[6, 2, 1, 2]);
    record(
        "maxpool_temporal",
        checker.check(
            |t, ids| {
                let y = t.maxpool_temporal(ids[0], 2, 2)?;
                project(t, y, 3)
            },
            &[x],
        )?,
    );

    let x = away_from_zero(&mut rng, &[5, 3]);
    record(
        "relu",
        checker.check(
            |t, ids| {
                let y = t.relu(ids[0]);
                project(t, y, 4)
            },
            &[x],
        )?,
    );

    let x = uniform(&mut rng, &[7], -4.0, 4.0);
    record(
        "sigmoid",
        checker.check(
            |t, ids| {
                let y = t.sigmoid(ids[0]);
                project(t, y, 5)
            },
            &[x],
        )?,
    );

    let x = uniform(&mut rng, &[3, 2, 2, 3], -1.0, 1.0);
    record(
        "global_avg_pool_spatial",
        checker.check(
            |t, ids| {
                let y = t.global_avg_pool_spatial(ids[0])?;
                project(t, y, 6)
            },
            &[x],
        )?,
    );

    let a = uniform(&mut rng, &[3, 2, 1, 1], -1.0, 1.0);
    let b = uniform(&mut rng, &[3, 1, 1, 1], -1.0, 1.0);
    record(
        "concat_channels",
        checker.check(
            |t, ids| {
                let y = t.concat_channels(ids[0], ids[1])?;
                project(t, y, 7)
            },
            &[a, b],
        )?,
    );

    let z = uniform(&mut rng, &[6], -3.0, 3.0);
    let actions: Vec<f64> = (0..6).map(|i| (i % 2) as f64).collect();
    record(
        "bernoulli_log_lik",
        checker.check(|t, ids| t.bernoulli_log_lik(ids[0], &actions), &[z])?,
    );

    let z = uniform(&mut rng, &[6], -3.0, 3.0);
    let target = Tensor::from_vec((0..6).map(|i| i as f64 / 6.0).collect());
    record(
        "regularizers",
        checker.check(
            |t, ids| {
                let p = t.sigmoid(ids[0]);
                let prop = crate::rl::loss_reg_proportion_on_tape(t, p, 0.3);
                let bin = crate::rl::loss_reg_binary_on_tape(t, p)?;
                let pred = crate::rl::loss_pred_on_tape(t, p, &target)?;
                let s = t.add(prop, bin)?;
                t.add(s, pred)
            },
            &[z],
        )?,
    );

    record("full_model", check_full_model(&checker, &suite_model_config(), 11)?);
    Ok(out)
}
