//! Central-difference validation of the backward pass.
//!
//! Every differentiable op is exercised through a scalar objective; the
//! analytic gradient from the tape is compared element-by-element against
//! `(f(x+h) - f(x-h)) / 2h`. Relative error is `|a - fd| / max(1, |a|)`.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub name: String,
    pub max_err: f64,
    pub tol: f64,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn ok(&self) -> bool {
        self.max_err.is_finite() && self.max_err < self.tol
    }
}

fn eval_scalar(inputs: &[Tensor], build: &dyn Fn(&mut Tape, &[Var]) -> Result<Var>) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let root = build(&mut tape, &vars)?;
    tape.value(root).scalar_value()
}

/// Checks the analytic gradient of `build` (a scalar-valued graph over
/// `inputs`) against central finite differences on every input element.
pub fn grad_check(
    name: &str,
    inputs: &[Tensor],
    build: &dyn Fn(&mut Tape, &[Var]) -> Result<Var>,
    eps: f64,
    tol: f64,
) -> Result<GradCheckReport> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.leaf(t.clone().with_grad()))
        .collect();
    let root = build(&mut tape, &vars)?;
    if !tape.value(root).is_scalar() {
        return Err(Error::Contract(format!(
            "grad_check '{name}': objective must be scalar, got {:?}",
            tape.value(root).shape()
        )));
    }
    let mut grads = tape.backward(root)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| grads.take(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let mut max_err = 0.0f64;
    let mut checked = 0usize;
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.numel() {
            let mut plus: Vec<Tensor> = inputs.to_vec();
            plus[i].data_mut()[j] += eps;
            let f_plus = eval_scalar(&plus, build)?;
            let mut minus: Vec<Tensor> = inputs.to_vec();
            minus[i].data_mut()[j] -= eps;
            let f_minus = eval_scalar(&minus, build)?;
            let fd = (f_plus - f_minus) / (2.0 * eps);
            let a = analytic[i].data()[j];
            let err = (a - fd).abs() / a.abs().max(1.0);
            if err > max_err {
                max_err = err;
            }
            checked += 1;
        }
    }
    Ok(GradCheckReport { name: name.to_string(), max_err, tol, checked })
}

fn rand_tensor(rng: &mut ChaCha20Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Shifts every value lying within `margin` of `point` outward so finite
/// differences never step across a non-differentiable kink.
fn push_away(t: Tensor, point: f64, margin: f64) -> Tensor {
    t.map(|v| {
        if (v - point).abs() < margin {
            if v >= point { point + margin } else { point - margin }
        } else {
            v
        }
    })
}

/// Scalarizes a tensor with a fixed random weighting so every element of the
/// output influences the objective differently.
fn weighted_sum(tape: &mut Tape, x: Var, rng: &mut ChaCha20Rng) -> Result<Var> {
    let shape = tape.value(x).shape().to_vec();
    let w = tape.leaf(rand_tensor(rng, &shape, 0.25, 1.75));
    let prod = tape.mul(x, w)?;
    Ok(tape.sum(prod))
}

/// Runs the full op-by-op gradient suite at the given step size and
/// tolerance. Deterministic: the same seed produces the same inputs.
pub fn run_standard_suite(eps: f64, tol: f64, seed: u64) -> Result<Vec<GradCheckReport>> {
    let mut reports = Vec::new();
    let case = |name: &str,
                    inputs: Vec<Tensor>,
                    build: Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>|
     -> Result<GradCheckReport> { grad_check(name, &inputs, build.as_ref(), eps, tol) };

    {
        let mut rng = ChaCha20Rng::seed_from_u64(seed ^ 0x01);
        let x = rand_tensor(&mut rng, &[1, 2, 4, 4], -1.0, 1.0);
        let k = rand_tensor(&mut rng, &[3, 2, 3, 3], -1.0, 1.0);
        let b = rand_tensor(&mut rng, &[3], -0.5, 0.5);
        let wrng = ChaCha20Rng::seed_from_u64(seed ^ 0x101);
        reports.push(case(
            "conv2d_stride1_pad1",
            vec![x, k, b],
            Box::new(move |t, v| {
                let y = t.conv2d(v[0], v[1], v[2], 1, 1)?;
                weighted_sum(t, y, &mut wrng.clone())
            }),
        )?);
    }
    {
        let mut rng = ChaCha20Rng::seed_from_u64(seed ^ 0x02);
        let x = rand_tensor(&mut rng, &[1, 2, 5, 5], -1.0, 1.0);
        let k = rand_tensor(&mut rng, &[2, 2, 3, 3], -1.0, 1.0);
        let b = rand_tensor(&mut rng, &[2], -0.5, 0.5);
        let wrng = ChaCha20Rng::seed_from_u64(seed ^ 0x102);
        reports.push(case(
            "conv2d_stride2_pad1",
            vec![x, k, b],
            Box::new(move |t, v| {
                let y = t.conv2d(v[0], v[1], v[2], 2, 1)?;
                weighted_sum(t, y, &mut wrng.clone())
            }),
        )?);
    }
    {
        let mut rng = ChaCha20Rng::seed_from_u64(seed ^ 0x03);
        let x = rand_tensor(&mut rng, &[1, 2, 3, 3], -1.0, 1.0);
        let k = rand_tensor(&mut rng, &[2, 3, 4, 4], -1.0, 1.0);
        let b = rand_tensor(&mut rng, &[3], -0.5, 0.5);
        let wrng = ChaCha20Rng::seed_from_u64(seed ^ 0x103);
        reports.push(case(
            "conv_transpose2d_stride2_pad1",
            vec![x, k, b],
            Box::new(move |t, v| {
                let y = t.conv_transpose2d(v[0], v[1], v[2], 2, 1)?;
                weighted_sum(t, y, &mut wrng.clone())
            }),
        )?);
    }
    {
        let mut rng = ChaCha20Rng::seed_from_u64(seed ^ 0x04);
        let x = rand_tensor(&mut rng, &[1, 2, 4, 4], -1.0, 1.0);
        let wrng = ChaCha20Rng::seed_from_u64(seed ^ 0x104);
        reports.push(case(
            "max_pool2d_2x2",
            vec![x],
            Box::new(move |t, v| {
                let y = t.max_pool2d(v[0], 2)?;
                weighted_sum(t, y, &mut wrng.clone())
            }),
        )?);
    }
    {
        let mut rng = ChaCha20Rng::seed_from_u64(seed ^ 0x05);
        let x = rand_tensor(&mut rng, &[2, 3, 2, 2], -1.0, 1.0);
        let scale = rand_tensor(&mut rng, &[3], 0.5, 1.5);
        let shift = rand_tensor(&mut rng, &[3], -0.5, 0.5);
        let wrng = ChaCha20Rng::seed_from_u64(seed ^ 0x105);
        reports.push(case(
            "batch_norm_train",
            vec![x, scale, shift],
            Box::new(move |t, v| {
                let (y, _, _) = t.batch_norm_train(v[0], v[1], v[2], 1e-5)?;
                weighted_sum(t, y, &mut wrng.clone())
            }),
        )?);
    }
    {
        let mut rng = ChaCha20Rng::seed_from_u64(seed ^ 0x06);
        let x = push_away(rand_tensor(&mut rng, &[2, 3, 4], -1.0, 1.0), 0.0, 0.05);
        let wrng = ChaCha20Rng::seed_from_u64(seed ^ 0x106);
        reports.push(case(
            "relu",
            vec![x],
            Box::new(move |t, v| {
                let y = t.relu(v[0]);
                weighted_sum(t, y, &mut wrng.clone())
            }),
        )?);
    }
    {
        let mut rng = ChaCha20Rng::seed_from_u64(seed ^ 0x07);
        let x = rand_tensor(&mut rng, &[2, 3, 4], -2.0, 2.0);
        let wrng = ChaCha20Rng::seed_from_u64(seed ^ 0x107);
        reports.push(case(
            "sigmoid",
            vec![x],
            Box::new(move |t, v| {
                let y = t.sigmoid(v[0]);
                weighted_sum(t, y, &mut wrng.clone())
            }),
        )?);
    }
    {
        let mut rng = ChaCha20Rng::seed_from_u64(seed ^ 0x08);
        let x = rand_tensor(&mut rng, &[8], 0.1, 2.0);
        let wrng = ChaCha20Rng::seed_from_u64(seed ^ 0x108);
        reports.push(case(
            "ln",
            vec![x],
            Box::new(move |t, v| {
                let y = t.ln(v[0]);
                weighted_sum(t, y, &mut wrng.clone())
            }),
        )?);
    }
    {
        let mut rng = ChaCha20Rng::seed_from_u64(seed ^ 0x09);
        let x = rand_tensor(&mut rng, &[8], 0.2, 2.0);
        let wrng = ChaCha20Rng::seed_from_u64(seed ^ 0x109);
        reports.push(case(
            "pow_const_2p5",
            vec![x],
            Box::new(move |t, v| {
                let y = t.pow_const(v[0], 2.5);
                weighted_sum(t, y, &mut wrng.clone())
            }),
        )?);
    }
    {
        let mut rng = ChaCha20Rng::seed_from_u64(seed ^ 0x0a);
        let x = push_away(push_away(rand_tensor(&mut rng, &[12], -1.0, 2.0), 0.0, 0.02), 1.0, 0.02);
        let wrng = ChaCha20Rng::seed_from_u64(seed ^ 0x10a);
        reports.push(case(
            "clamp_0_1",
            vec![x],
            Box::new(move |t, v| {
                let y = t.clamp(v[0], 0.0, 1.0)?;
                weighted_sum(t, y, &mut wrng.clone())
            }),
        )?);
    }
    {
        let mut rng = ChaCha20Rng::seed_from_u64(seed ^ 0x0b);
        let a = rand_tensor(&mut rng, &[6], -1.0, 1.0);
        let b = push_away(rand_tensor(&mut rng, &[6], -1.0, 1.0), 0.0, 0.2);
        let wrng = ChaCha20Rng::seed_from_u64(seed ^ 0x10b);
        reports.push(case(
            "elementwise_arith",
            vec![a, b],
            Box::new(move |t, v| {
                // ((a*b) + a - b) / b
                let p = t.mul(v[0], v[1])?;
                let s = t.add(p, v[0])?;
                let d = t.sub(s, v[1])?;
                let q = t.div(d, v[1])?;
                let sc = t.scale(q, 0.5);
                let sh = t.add_scalar(sc, 1.0);
                weighted_sum(t, sh, &mut wrng.clone())
            }),
        )?);
    }
    {
        let mut rng = ChaCha20Rng::seed_from_u64(seed ^ 0x0c);
        let a = rand_tensor(&mut rng, &[10], -2.0, 2.0);
        let b = Tensor::zeros(&[10]);
        // keep |a - b| away from the quadratic/linear switch at beta = 1
        let a = push_away(push_away(a, 1.0, 0.05), -1.0, 0.05);
        reports.push(case(
            "huber_beta1",
            vec![a, b],
            Box::new(move |t, v| t.huber(v[0], v[1], 1.0)),
        )?);
    }
    {
        let mut rng = ChaCha20Rng::seed_from_u64(seed ^ 0x0d);
        let a = rand_tensor(&mut rng, &[1, 1, 2, 2], -1.0, 1.0);
        let b = rand_tensor(&mut rng, &[1, 2, 2, 2], -1.0, 1.0);
        let wrng = ChaCha20Rng::seed_from_u64(seed ^ 0x10d);
        reports.push(case(
            "concat_channels",
            vec![a, b],
            Box::new(move |t, v| {
                let y = t.concat(&[v[0], v[1]])?;
                weighted_sum(t, y, &mut wrng.clone())
            }),
        )?);
    }
    {
        let mut rng = ChaCha20Rng::seed_from_u64(seed ^ 0x0e);
        let x = rand_tensor(&mut rng, &[2, 5], -1.0, 1.0);
        reports.push(case(
            "sum_mean",
            vec![x],
            Box::new(|t, v| {
                let s = t.sum(v[0]);
                let m = t.mean(v[0]);
                t.add(s, m)
            }),
        )?);
    }
    {
        // an end-to-end slice of the real networks: conv -> bn -> relu ->
        // pool -> 1x1 conv -> sigmoid -> cross-entropy against a fixed mask
        let mut rng = ChaCha20Rng::seed_from_u64(seed ^ 0x0f);
        let x = rand_tensor(&mut rng, &[2, 1, 4, 4], -1.0, 1.0);
        let k1 = rand_tensor(&mut rng, &[2, 1, 3, 3], -0.7, 0.7);
        let b1 = rand_tensor(&mut rng, &[2], -0.2, 0.2);
        let scale = rand_tensor(&mut rng, &[2], 0.8, 1.2);
        let shift = rand_tensor(&mut rng, &[2], -0.2, 0.2);
        let k2 = rand_tensor(&mut rng, &[1, 2, 1, 1], -0.7, 0.7);
        let b2 = rand_tensor(&mut rng, &[1], -0.2, 0.2);
        let mask = Tensor::from_fn(&[2, 1, 2, 2], |i| f64::from(i % 3 == 0));
        reports.push(case(
            "composite_conv_bn_relu_pool_head",
            vec![x, k1, b1, scale, shift, k2, b2],
            Box::new(move |t, v| {
                let c1 = t.conv2d(v[0], v[1], v[2], 1, 1)?;
                let (bn, _, _) = t.batch_norm_train(c1, v[3], v[4], 1e-5)?;
                let r = t.relu(bn);
                let p = t.max_pool2d(r, 2)?;
                let logits = t.conv2d(p, v[5], v[6], 1, 0)?;
                let prob = t.sigmoid(logits);
                let prob = t.clamp(prob, 1e-7, 1.0 - 1e-7)?;
                let m = t.leaf(mask.clone());
                let ln_p = t.ln(prob);
                let term1 = t.mul(m, ln_p)?;
                let neg_p = t.scale(prob, -1.0);
                let one_minus_p = t.add_scalar(neg_p, 1.0);
                let ln_q = t.ln(one_minus_p);
                let neg_m = t.scale(m, -1.0);
                let one_minus_m = t.add_scalar(neg_m, 1.0);
                let term2 = t.mul(one_minus_m, ln_q)?;
                let s = t.add(term1, term2)?;
                let mean = t.mean(s);
                Ok(t.scale(mean, -1.0))
            }),
        )?);
    }
    Ok(reports)
}
