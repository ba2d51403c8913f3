//! Central finite-difference verification of the analytic gradients.
//!
//! Every case builds a scalar objective `Σ R ⊙ op(inputs)` with a fixed random
//! `R`, so all output entries contribute. The relative error of one entry is
//! `|a − n| / max(|a|, |n|, floor)`.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{gen_synthetic, sample_batch, SamplerConfig, SynthConfig};
use crate::error::{Error, Result};
use crate::losses::{build_sign_matrix, identity_owners, sigmoid_pair_loss};
use crate::model::{InitConfig, ModelConfig, Parameters};
use crate::numerics::{Graph, Tensor, Var};
use crate::trainer::{batch_gradients, AblationMode};

pub const PRIMITIVES: &[&str] = &[
    "matmul",
    "matmul_nt",
    "add",
    "add_row",
    "mul",
    "mul_const",
    "scale",
    "scale_by",
    "add_scalar",
    "exp",
    "gelu",
    "log_sigmoid",
    "softmax",
    "softmax_masked",
    "layer_norm",
    "l2_normalize_rows",
    "slice_cols",
    "concat_cols",
    "gather_rows",
    "sum",
];

pub const LOSSES: &[&str] = &["class_loss", "multiview_loss"];

pub const END_TO_END: &str = "fuse";

pub fn all_ops() -> Vec<&'static str> {
    PRIMITIVES
        .iter()
        .chain(LOSSES)
        .copied()
        .chain(std::iter::once(END_TO_END))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GradcheckConfig {
    pub seed: u64,
    pub cases: usize,
    pub step: f64,
    pub tolerance: f64,
    pub floor: f64,
    /// Cases for the end-to-end check, which is far more expensive.
    pub fuse_cases: usize,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            cases: 100,
            step: 1e-5,
            tolerance: 1e-4,
            floor: 1e-6,
            fuse_cases: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OpReport {
    pub op: String,
    pub cases: usize,
    pub worst_rel_err: f64,
    pub passed: bool,
}

type Build = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

struct Case {
    inputs: Vec<Tensor>,
    build: Build,
}

fn randn(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor {
    Tensor::randn(shape, std, rng)
}

fn unit_rows(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let mut t = randn(rng, &[rows, cols], 1.0);
    for i in 0..rows {
        let n = t.row(i).iter().map(|x| x * x).sum::<f64>().sqrt();
        for j in 0..cols {
            t.data_mut()[i * cols + j] /= n;
        }
    }
    t
}

fn dim(rng: &mut ChaCha8Rng) -> usize {
    rng.random_range(1..=5)
}

fn case_for(op: &str, rng: &mut ChaCha8Rng) -> Result<Case> {
    let (m, n, k) = (dim(rng), dim(rng), dim(rng));
    let mat = |rng: &mut ChaCha8Rng, r, c| randn(rng, &[r, c], 1.0);
    let unary = |rng: &mut ChaCha8Rng, f: fn(&mut Graph, Var) -> Var| Case {
        inputs: vec![mat(rng, m, n)],
        build: Box::new(move |g, v| Ok(f(g, v[0]))),
    };
    let case = match op {
        "matmul" => Case {
            inputs: vec![mat(rng, m, k), mat(rng, k, n)],
            build: Box::new(|g, v| g.matmul(v[0], v[1])),
        },
        "matmul_nt" => Case {
            inputs: vec![mat(rng, m, k), mat(rng, n, k)],
            build: Box::new(|g, v| g.matmul_nt(v[0], v[1])),
        },
        "add" => Case {
            inputs: vec![mat(rng, m, n), mat(rng, m, n)],
            build: Box::new(|g, v| g.add(v[0], v[1])),
        },
        "add_row" => Case {
            inputs: vec![mat(rng, m, n), randn(rng, &[n], 1.0)],
            build: Box::new(|g, v| g.add_row(v[0], v[1])),
        },
        "mul" => Case {
            inputs: vec![mat(rng, m, n), mat(rng, m, n)],
            build: Box::new(|g, v| g.mul(v[0], v[1])),
        },
        "mul_const" => {
            let c = Arc::new(mat(rng, m, n));
            Case {
                inputs: vec![mat(rng, m, n)],
                build: Box::new(move |g, v| g.mul_const(v[0], c.clone())),
            }
        }
        "scale" => {
            let s: f64 = rng.random_range(-2.0..2.0);
            Case {
                inputs: vec![mat(rng, m, n)],
                build: Box::new(move |g, v| Ok(g.scale(v[0], s))),
            }
        }
        "scale_by" => Case {
            inputs: vec![mat(rng, m, n), randn(rng, &[1], 1.0)],
            build: Box::new(|g, v| g.scale_by(v[0], v[1])),
        },
        "add_scalar" => Case {
            inputs: vec![mat(rng, m, n), randn(rng, &[1], 1.0)],
            build: Box::new(|g, v| g.add_scalar(v[0], v[1])),
        },
        "exp" => unary(rng, Graph::exp),
        "gelu" => Case {
            inputs: vec![randn(rng, &[m, n], 2.0)],
            build: Box::new(|g, v| Ok(g.gelu(v[0]))),
        },
        "log_sigmoid" => Case {
            inputs: vec![randn(rng, &[m, n], 4.0)],
            build: Box::new(|g, v| Ok(g.log_sigmoid(v[0]))),
        },
        "softmax" => unary(rng, Graph::softmax),
        "softmax_masked" => {
            let mask: Arc<Vec<bool>> = Arc::new((0..m * n).map(|_| rng.random_bool(0.6)).collect());
            Case {
                inputs: vec![mat(rng, m, n)],
                build: Box::new(move |g, v| g.softmax_masked(v[0], mask.clone())),
            }
        }
        "layer_norm" => {
            let n = n.max(2);
            Case {
                inputs: vec![mat(rng, m, n), randn(rng, &[n], 1.0), randn(rng, &[n], 1.0)],
                build: Box::new(|g, v| g.layer_norm(v[0], v[1], v[2], 1e-5)),
            }
        }
        "l2_normalize_rows" => unary_result(mat(rng, m, n), |g, v| g.l2_normalize_rows(v)),
        "slice_cols" => {
            let start = rng.random_range(0..n);
            let len = rng.random_range(1..=n - start);
            unary_result(mat(rng, m, n), move |g, v| g.slice_cols(v, start, len))
        }
        "concat_cols" => Case {
            inputs: vec![mat(rng, m, n), mat(rng, m, k), mat(rng, m, 2)],
            build: Box::new(|g, v| g.concat_cols(v)),
        },
        "gather_rows" => {
            let count = dim(rng);
            let index: Vec<usize> = (0..count).map(|_| rng.random_range(0..m)).collect();
            unary_result(mat(rng, m, n), move |g, v| g.gather_rows(v, index.clone()))
        }
        "sum" => unary(rng, Graph::sum),
        "class_loss" | "multiview_loss" => loss_case(op == "multiview_loss", rng)?,
        other => return Err(Error::Config(format!("unknown gradcheck op {other:?}"))),
    };
    Ok(case)
}

fn unary_result(input: Tensor, f: impl Fn(&mut Graph, Var) -> Result<Var> + 'static) -> Case {
    Case {
        inputs: vec![input],
        build: Box::new(move |g, v| f(g, v[0])),
    }
}

/// Inputs: fused rows, targets, t, b. The sign structure is drawn at random,
/// class mask included.
fn loss_case(multiview: bool, rng: &mut ChaCha8Rng) -> Result<Case> {
    let b = rng.random_range(1..=4);
    let d = rng.random_range(2..=6);
    let classes: Vec<i64> = (0..b).map(|_| rng.random_range(0..3)).collect();
    let owners: Vec<usize> = if multiview {
        let m = rng.random_range(1..=3);
        (0..b * m).map(|j| j / m).collect()
    } else {
        identity_owners(b)
    };
    let mask = rng.random_bool(0.5);
    let signs = build_sign_matrix(&classes, &owners, mask)?;
    let norm = if multiview { (b * owners.len()) as f64 } else { b as f64 };
    let t = Tensor::scalar(rng.random_range(0.5..20.0));
    let bias = Tensor::scalar(rng.random_range(-10.0..10.0));
    Ok(Case {
        inputs: vec![unit_rows(rng, b, d), unit_rows(rng, owners.len(), d), t, bias],
        build: Box::new(move |g, v| sigmoid_pair_loss(g, v[0], v[1], &signs, v[2], v[3], norm)),
    })
}

fn objective(case: &Case, inputs: &[Tensor], weights: &Option<Arc<Tensor>>, grads: bool) -> Result<(f64, Vec<Tensor>)> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), grads)).collect();
    let out = (case.build)(&mut g, &vars)?;
    let loss = match weights {
        Some(w) => {
            let weighted = g.mul_const(out, w.clone())?;
            g.sum(weighted)
        }
        None => out,
    };
    let value = g.value(loss).item();
    if !grads {
        return Ok((value, Vec::new()));
    }
    let mut gr = g.backward(loss)?;
    let tensors = vars
        .iter()
        .map(|&v| gr.take(v).ok_or_else(|| Error::Contract("missing gradient".into())))
        .collect::<Result<_>>()?;
    Ok((value, tensors))
}

fn rel_err(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

fn check_case(case: &Case, cfg: &GradcheckConfig, rng: &mut ChaCha8Rng) -> Result<f64> {
    let probe = {
        let mut g = Graph::new();
        let vars: Vec<Var> = case.inputs.iter().map(|t| g.leaf(t.clone(), false)).collect();
        let out = (case.build)(&mut g, &vars)?;
        g.value(out).shape().to_vec()
    };
    let weights = if probe.iter().product::<usize>() == 1 {
        None
    } else {
        Some(Arc::new(Tensor::randn(&probe, 1.0, rng)))
    };
    let (_, analytic) = objective(case, &case.inputs, &weights, true)?;
    let mut worst = 0.0f64;
    let mut inputs = case.inputs.clone();
    for (i, grad) in analytic.iter().enumerate() {
        for e in 0..inputs[i].len() {
            let x0 = inputs[i].data()[e];
            inputs[i].data_mut()[e] = x0 + cfg.step;
            let (fp, _) = objective(case, &inputs, &weights, false)?;
            inputs[i].data_mut()[e] = x0 - cfg.step;
            let (fm, _) = objective(case, &inputs, &weights, false)?;
            inputs[i].data_mut()[e] = x0;
            let numeric = (fp - fm) / (2.0 * cfg.step);
            worst = worst.max(rel_err(grad.data()[e], numeric, cfg.floor));
        }
    }
    Ok(worst)
}

/// Gradients of the full training loss through fusion at a tiny config,
/// probed at a few random coordinates of every parameter tensor.
fn check_fuse(cfg: &GradcheckConfig, case_seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(case_seed);
    let (ds, vocab) = gen_synthetic(&SynthConfig {
        num_classes: 3,
        instances_per_class: 3,
        views_per_instance: 5,
        descriptor_dim: 8,
        parts_per_class: 2,
        seed: case_seed,
        ..Default::default()
    })?;
    let model = ModelConfig {
        descriptor_dim: 8,
        model_dim: 8,
        num_blocks: 2,
        num_heads: 2,
        mlp_hidden: 16,
        layer_norm_eps: 1e-5,
    };
    let init = InitConfig {
        weight_std: 0.5,
        ..Default::default()
    };
    let mut params = Parameters::init(model, init, case_seed)?;
    // move the loss scalars off their init so both matter
    params.get_mut("loss.log_t").data_mut()[0] = rng.random_range(0.0..2.0);
    params.get_mut("loss.b").data_mut()[0] = rng.random_range(-2.0..2.0);
    let sampler = SamplerConfig {
        batch_size: 4,
        views_in: 3,
        views_target: 2,
    };
    let batch = sample_batch(&ds, &vec![1.0; ds.len()], &sampler, &mut rng)?;
    let toggles = AblationMode::Final.toggles();
    let analytic = batch_gradients(&params, &ds, &vocab, &batch, toggles)?.grads;
    let names: Vec<String> = params.names().map(str::to_string).collect();
    let mut worst = 0.0f64;
    for name in &names {
        let len = params.get(name).len();
        let mut coords: Vec<usize> = (0..len).collect();
        coords.shuffle(&mut rng);
        for &e in coords.iter().take(3) {
            let x0 = params.get(name).data()[e];
            params.get_mut(name).data_mut()[e] = x0 + cfg.step;
            let fp = batch_gradients(&params, &ds, &vocab, &batch, toggles)?.loss_total;
            params.get_mut(name).data_mut()[e] = x0 - cfg.step;
            let fm = batch_gradients(&params, &ds, &vocab, &batch, toggles)?.loss_total;
            params.get_mut(name).data_mut()[e] = x0;
            let numeric = (fp - fm) / (2.0 * cfg.step);
            worst = worst.max(rel_err(analytic[name].data()[e], numeric, cfg.floor));
        }
    }
    Ok(worst)
}

pub fn check_op(op: &str, cfg: &GradcheckConfig) -> Result<OpReport> {
    let mut worst = 0.0f64;
    let cases = if op == END_TO_END { cfg.fuse_cases } else { cfg.cases };
    for c in 0..cases {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(c as u64);
        let err = if op == END_TO_END {
            check_fuse(cfg, cfg.seed.wrapping_mul(1000).wrapping_add(c as u64))?
        } else {
            let case = case_for(op, &mut rng)?;
            check_case(&case, cfg, &mut rng)?
        };
        worst = worst.max(err);
    }
    Ok(OpReport {
        op: op.to_string(),
        cases,
        worst_rel_err: worst,
        passed: worst < cfg.tolerance,
    })
}

pub fn run(ops: &[&str], cfg: &GradcheckConfig) -> Result<Vec<OpReport>> {
    ops.iter().map(|op| check_op(op, cfg)).collect()
}
