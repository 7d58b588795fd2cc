//! Central finite-difference oracle and a catalogue of randomized op cases.
#![allow(dead_code)]

pub mod contracts;
pub mod fid_suite;
pub mod fixtures;

use freezelab_core::autodiff::{Tape, Var};
use freezelab_core::nn::{ModelConfig, Network, LEAK, NORM_EPS};
use freezelab_core::rng::SplitMix64;
use freezelab_core::{Result, Tensor};

pub const FD_STEP: f64 = 1e-5;

pub type Build = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

pub struct Case {
    pub name: String,
    pub inputs: Vec<Tensor>,
    pub build: Build,
}

/// Scalar `Σ out ⊙ w` with fixed random weights `w`, so every output element
/// contributes with a different coefficient.
fn weighted_loss(tape: &mut Tape, out: Var, seed: u64) -> Result<Var> {
    let shape = tape.value(out).shape().to_vec();
    let n: usize = shape.iter().product();
    let w = Tensor::new(shape, SplitMix64::new(seed ^ 0xabcd).normals(n))?;
    let w = tape.constant(w);
    let prod = tape.mul(out, w)?;
    Ok(tape.sum(prod))
}

fn eval(case: &Case, inputs: &[Tensor], seed: u64) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = (case.build)(&mut tape, &vars)?;
    let loss = weighted_loss(&mut tape, out, seed)?;
    Ok(tape.value(loss).item())
}

/// Largest norm-wise relative error `‖a − n‖ / max(‖a‖, ‖n‖, 1e-12)` over the
/// case's inputs, comparing reverse-mode gradients with central differences.
pub fn max_rel_error(case: &Case, seed: u64) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = case.inputs.iter().map(|t| tape.variable(t.clone())).collect();
    let out = (case.build)(&mut tape, &vars)?;
    let loss = weighted_loss(&mut tape, out, seed)?;
    let grads = tape.backward(loss)?;
    let mut worst: f64 = 0.0;
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads
            .get(*v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(case.inputs[i].shape()));
        let mut numeric = vec![0.0; case.inputs[i].numel()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let mut plus = case.inputs.clone();
            plus[i].data_mut()[j] += FD_STEP;
            let mut minus = case.inputs.clone();
            minus[i].data_mut()[j] -= FD_STEP;
            *slot = (eval(case, &plus, seed)? - eval(case, &minus, seed)?) / (2.0 * FD_STEP);
        }
        let diff: f64 = analytic
            .data()
            .iter()
            .zip(&numeric)
            .map(|(a, n)| (a - n) * (a - n))
            .sum::<f64>()
            .sqrt();
        let na = analytic.data().iter().map(|a| a * a).sum::<f64>().sqrt();
        let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
        worst = worst.max(diff / na.max(nn).max(1e-12));
    }
    Ok(worst)
}

/// Normals pushed at least `margin` away from zero, so piecewise ops are
/// never probed across their kink.
fn away_from_zero(rng: &mut SplitMix64, n: usize, margin: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let v = rng.normal();
            if v.abs() < margin {
                v.signum() * margin + v
            } else {
                v
            }
        })
        .collect()
}

fn t(shape: &[usize], rng: &mut SplitMix64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), rng.normals(n)).unwrap()
}

fn dim(rng: &mut SplitMix64, lo: usize, hi: usize) -> usize {
    lo + rng.below(hi - lo + 1)
}

pub const OP_NAMES: &[&str] = &[
    "matmul",
    "add",
    "sub",
    "mul",
    "scale",
    "offset",
    "add_bias",
    "conv2d",
    "upsample2x",
    "leaky_relu",
    "relu",
    "tanh",
    "scale_shift_norm",
    "reshape",
    "flatten",
    "sum",
    "mean",
    "abs",
    "square",
    "softplus",
    "concat_cols",
    "gather_rows",
    "row_dot",
    "global_avg_pool",
    "generator",
    "discriminator",
];

/// Randomized case `index` (op chosen round-robin) drawn from `seed`.
pub fn op_case(index: usize, seed: u64) -> Case {
    let name = OP_NAMES[index % OP_NAMES.len()];
    let mut r = SplitMix64::new(seed.wrapping_mul(0x9e37_79b9).wrapping_add(index as u64));
    let (n, m) = (dim(&mut r, 1, 4), dim(&mut r, 1, 5));
    let case = |inputs: Vec<Tensor>, build: Build| Case {
        name: format!("{name}#{index}"),
        inputs,
        build,
    };
    match name {
        "matmul" => {
            let k = dim(&mut r, 1, 5);
            case(vec![t(&[n, k], &mut r), t(&[k, m], &mut r)], Box::new(|tp, v| tp.matmul(v[0], v[1])))
        }
        "add" => case(vec![t(&[n, m], &mut r), t(&[n, m], &mut r)], Box::new(|tp, v| tp.add(v[0], v[1]))),
        "sub" => case(vec![t(&[n, m], &mut r), t(&[n, m], &mut r)], Box::new(|tp, v| tp.sub(v[0], v[1]))),
        "mul" => case(vec![t(&[n, m], &mut r), t(&[n, m], &mut r)], Box::new(|tp, v| tp.mul(v[0], v[1]))),
        "scale" => {
            let c = r.uniform(-2.0, 2.0);
            case(vec![t(&[n, m], &mut r)], Box::new(move |tp, v| Ok(tp.scale(v[0], c))))
        }
        "offset" => {
            let c = r.uniform(-2.0, 2.0);
            case(vec![t(&[n, m], &mut r)], Box::new(move |tp, v| Ok(tp.offset(v[0], c))))
        }
        "add_bias" => {
            let c = dim(&mut r, 1, 3);
            let hw = dim(&mut r, 1, 3);
            case(vec![t(&[n, c, hw, hw], &mut r), t(&[c], &mut r)], Box::new(|tp, v| tp.add_bias(v[0], v[1])))
        }
        "conv2d" => {
            let c = dim(&mut r, 1, 2);
            let f = dim(&mut r, 1, 3);
            let hw = dim(&mut r, 3, 5);
            let stride = dim(&mut r, 1, 2);
            let pad = dim(&mut r, 0, 1);
            let k = dim(&mut r, 1, 3).min(hw);
            case(
                vec![t(&[n.min(2), c, hw, hw], &mut r), t(&[f, c, k, k], &mut r)],
                Box::new(move |tp, v| tp.conv2d(v[0], v[1], stride, pad)),
            )
        }
        "upsample2x" => case(vec![t(&[n, 2, 2, 3], &mut r)], Box::new(|tp, v| tp.upsample2x(v[0]))),
        "leaky_relu" => {
            let x = Tensor::new(vec![n, m], away_from_zero(&mut r, n * m, 1e-3)).unwrap();
            case(vec![x], Box::new(|tp, v| Ok(tp.leaky_relu(v[0], LEAK))))
        }
        "relu" => {
            let x = Tensor::new(vec![n, m], away_from_zero(&mut r, n * m, 1e-3)).unwrap();
            case(vec![x], Box::new(|tp, v| Ok(tp.relu(v[0]))))
        }
        "tanh" => case(vec![t(&[n, m], &mut r)], Box::new(|tp, v| Ok(tp.tanh(v[0])))),
        "scale_shift_norm" => {
            let c = dim(&mut r, 1, 3);
            let hw = dim(&mut r, 2, 3);
            case(
                vec![t(&[n.min(2), c, hw, hw], &mut r), t(&[c], &mut r), t(&[c], &mut r)],
                Box::new(|tp, v| tp.scale_shift_norm(v[0], v[1], v[2], NORM_EPS)),
            )
        }
        "reshape" => case(
            vec![t(&[n, 2, m], &mut r)],
            Box::new(move |tp, v| tp.reshape(v[0], &[2 * m, n])),
        ),
        "flatten" => case(vec![t(&[n, 2, 2, m], &mut r)], Box::new(|tp, v| tp.flatten(v[0]))),
        "sum" => case(vec![t(&[n, m], &mut r)], Box::new(|tp, v| Ok(tp.sum(v[0])))),
        "mean" => case(vec![t(&[n, m], &mut r)], Box::new(|tp, v| Ok(tp.mean(v[0])))),
        "abs" => {
            let x = Tensor::new(vec![n, m], away_from_zero(&mut r, n * m, 1e-3)).unwrap();
            case(vec![x], Box::new(|tp, v| Ok(tp.abs(v[0]))))
        }
        "square" => case(vec![t(&[n, m], &mut r)], Box::new(|tp, v| Ok(tp.square(v[0])))),
        "softplus" => {
            let mut x = t(&[n, m], &mut r);
            x.data_mut().iter_mut().for_each(|v| *v *= 4.0);
            case(vec![x], Box::new(|tp, v| Ok(tp.softplus(v[0]))))
        }
        "concat_cols" => {
            let q = dim(&mut r, 1, 3);
            case(vec![t(&[n, m], &mut r), t(&[n, q], &mut r)], Box::new(|tp, v| tp.concat_cols(v[0], v[1])))
        }
        "gather_rows" => {
            let rows = dim(&mut r, 2, 4);
            let idx: Vec<usize> = (0..n + 2).map(|_| r.below(rows)).collect();
            case(vec![t(&[rows, m], &mut r)], Box::new(move |tp, v| tp.gather_rows(v[0], &idx)))
        }
        "row_dot" => case(vec![t(&[n, m], &mut r), t(&[n, m], &mut r)], Box::new(|tp, v| tp.row_dot(v[0], v[1]))),
        "global_avg_pool" => case(vec![t(&[n, 2, 3, 2], &mut r)], Box::new(|tp, v| tp.global_avg_pool(v[0]))),
        "generator" | "discriminator" => {
            let cfg = ModelConfig {
                latent_dim: 4,
                image_size: 4,
                g_blocks: 2,
                d_blocks: 2,
                g_width: 4,
                d_width: 2,
                conditional: r.below(2) == 1,
                n_classes: 3,
                embed_dim: 2,
                ..ModelConfig::default()
            };
            let labels: Vec<usize> = (0..2).map(|_| r.below(3)).collect();
            let labels = cfg.conditional.then_some(labels);
            let mut init = SplitMix64::new(seed ^ index as u64);
            let (net, input) = if name == "generator" {
                (Network::generator(&cfg, &mut init).unwrap(), t(&[2, 4], &mut r))
            } else {
                (Network::discriminator(&cfg, &mut init).unwrap(), t(&[2, 3, 4, 4], &mut r))
            };
            case(
                vec![input],
                Box::new(move |tp, v| {
                    use freezelab_core::autodiff::{BindMode, ParamOwner};
                    Ok(net.forward(tp, v[0], labels.as_deref(), ParamOwner::Other, BindMode::Frozen)?.output)
                }),
            )
        }
        _ => unreachable!("op list exhausted"),
    }
}
