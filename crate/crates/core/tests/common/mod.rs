//! Helpers shared by the integration suites: finite-difference gradient
//! checks and small random inputs.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ssmamc::ndiff::{Graph, Padding, Tensor, Var};
use ssmamc::sssm::{selective_scan, ScanMode};
use ssmamc::shrink::soft_threshold_op;
use ssmamc::{MamcaConfig, Model64, Result};

/// Step of the five-point central difference; its truncation error is
/// `O(h⁴)` and its rounding error about `ε·|f| / h`.
pub const FD_STEP: f64 = 1e-4;

/// `f'(x0)` from `f` evaluated at `x0 + k·h`, `k ∈ {-2, -1, 1, 2}`.
pub fn five_point(x0: f64, mut f: impl FnMut(f64) -> f64) -> f64 {
    let h = FD_STEP;
    (f(x0 - 2.0 * h) - 8.0 * f(x0 - h) + 8.0 * f(x0 + h) - f(x0 + 2.0 * h)) / (12.0 * h)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let v = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::new(shape.to_vec(), v).unwrap()
}

/// Values with `|v| ∈ [lo, hi]` and random sign.
pub fn signed(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let v = (0..n)
        .map(|_| {
            let m = rng.random_range(lo..hi);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), v).unwrap()
}

/// `‖a - n‖ / (‖a‖ + ‖n‖)`; zero when both vanish.
pub fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    let den = norm(analytic) + norm(numeric);
    if den == 0.0 {
        0.0
    } else {
        norm(&diff) / den
    }
}

/// Reduces any output to a scalar with fixed random weights, so every
/// output element contributes a distinct gradient.
fn probe_loss(g: &mut Graph<f64>, out: Var) -> Result<Var> {
    let shape = g.shape(out).to_vec();
    let mut r = rng(shape.iter().product::<usize>() as u64 + 17);
    let w = g.input(uniform(&mut r, &shape, -1.0, 1.0));
    let p = g.mul(out, w)?;
    g.sum_all(p)
}

/// Worst relative error between tape and central-difference gradients
/// over every input of `f`.
pub fn grad_check<F>(inputs: &[Tensor<f64>], f: F) -> f64
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor<f64>]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.input(t.clone())).collect();
        let out = f(&mut g, &vars).unwrap();
        let l = probe_loss(&mut g, out).unwrap();
        g.value(l).item()
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone().with_grad())).collect();
    let out = f(&mut g, &vars).unwrap();
    let l = probe_loss(&mut g, out).unwrap();
    g.backward(l).unwrap();
    let mut worst = 0.0f64;
    for (k, v) in vars.iter().enumerate() {
        let analytic = g.grad(*v).map(<[f64]>::to_vec).unwrap_or(vec![0.0; inputs[k].len()]);
        let mut numeric = vec![0.0; inputs[k].len()];
        let mut vals = inputs.to_vec();
        for (i, slot) in numeric.iter_mut().enumerate() {
            let x0 = inputs[k].data()[i];
            *slot = five_point(x0, |xi| {
                vals[k].data_mut()[i] = xi;
                eval(&vals)
            });
            vals[k].data_mut()[i] = x0;
        }
        worst = worst.max(rel_err(&analytic, &numeric));
    }
    worst
}

/// Every differentiable op with kink-free inputs; returns `(name, error)`.
pub fn op_errors() -> Vec<(&'static str, f64)> {
    let mut r = rng(2024);
    let mut out = Vec::new();
    let a = uniform(&mut r, &[3, 4], -1.5, 1.5);
    let b = uniform(&mut r, &[3, 4], -1.5, 1.5);
    let row = uniform(&mut r, &[4], -1.5, 1.5);
    let pos = uniform(&mut r, &[3, 4], 0.3, 2.0);
    let away = signed(&mut r, &[3, 4], 0.05, 2.0);

    out.push(("add", grad_check(&[a.clone(), b.clone()], |g, v| g.add(v[0], v[1]))));
    out.push(("sub", grad_check(&[a.clone(), b.clone()], |g, v| g.sub(v[0], v[1]))));
    out.push(("mul", grad_check(&[a.clone(), b.clone()], |g, v| g.mul(v[0], v[1]))));
    out.push(("broadcast_add", grad_check(&[a.clone(), row.clone()], |g, v| g.add(v[0], v[1]))));
    out.push(("broadcast_mul", grad_check(&[a.clone(), row.clone()], |g, v| g.mul(v[0], v[1]))));
    out.push(("neg", grad_check(&[a.clone()], |g, v| g.neg(v[0]))));
    out.push(("exp", grad_check(&[a.clone()], |g, v| g.exp(v[0]))));
    out.push(("expm1", grad_check(&[a.clone()], |g, v| g.expm1(v[0]))));
    out.push(("abs", grad_check(&[away.clone()], |g, v| g.abs(v[0]))));
    out.push(("reciprocal", grad_check(&[pos.clone()], |g, v| g.reciprocal(v[0]))));
    out.push(("softplus", grad_check(&[a.clone()], |g, v| g.softplus(v[0]))));
    out.push(("sigmoid", grad_check(&[a.clone()], |g, v| g.sigmoid(v[0]))));
    out.push(("silu", grad_check(&[a.clone()], |g, v| g.silu(v[0]))));
    out.push(("sqrt", grad_check(&[pos.clone()], |g, v| g.sqrt(v[0]))));

    let m3 = uniform(&mut r, &[2, 3, 4], -1.0, 1.0);
    let w = uniform(&mut r, &[4, 5], -1.0, 1.0);
    out.push(("matmul", grad_check(&[m3.clone(), w], |g, v| g.matmul(v[0], v[1]))));
    out.push(("transpose_last", grad_check(&[m3.clone()], |g, v| g.transpose_last(v[0]))));
    out.push(("reshape", grad_check(&[m3.clone()], |g, v| g.reshape(v[0], vec![6, 4]))));
    out.push(("sum", grad_check(&[m3.clone()], |g, v| g.sum(v[0], &[1]))));
    out.push(("mean", grad_check(&[m3.clone()], |g, v| g.mean(v[0], &[0, 2]))));
    // distinct values keep the arg-max stable under the perturbation
    let distinct = {
        let mut v: Vec<f64> = (0..24).map(|i| i as f64 * 0.1).collect();
        use rand::seq::SliceRandom;
        v.shuffle(&mut r);
        Tensor::new(vec![2, 3, 4], v).unwrap()
    };
    out.push(("max", grad_check(&[distinct], |g, v| g.max(v[0], &[2]))));

    let x = uniform(&mut r, &[2, 3, 10], -1.0, 1.0);
    let cw = uniform(&mut r, &[4, 3, 5], -0.5, 0.5);
    let cb = uniform(&mut r, &[4], -0.5, 0.5);
    for (name, pad) in [("conv1d_same", Padding::Same), ("conv1d_causal", Padding::Causal)] {
        out.push((
            name,
            grad_check(&[x.clone(), cw.clone(), cb.clone()], |g, v| {
                g.conv1d(v[0], v[1], Some(v[2]), pad)
            }),
        ));
    }
    let dw = uniform(&mut r, &[3, 4], -0.5, 0.5);
    let db = uniform(&mut r, &[3], -0.5, 0.5);
    out.push((
        "depthwise_conv1d",
        grad_check(&[x.clone(), dw, db], |g, v| {
            g.depthwise_conv1d(v[0], v[1], Some(v[2]), Padding::Causal)
        }),
    ));

    let logits = uniform(&mut r, &[4, 5], -2.0, 2.0);
    out.push((
        "softmax_cross_entropy",
        grad_check(&[logits], |g, v| g.softmax_cross_entropy(v[0], &[0, 3, 4, 1])),
    ));

    // |x| - τ stays at least 0.05 away from the kink
    let tau = uniform(&mut r, &[2, 3, 1], 0.2, 0.4);
    let xs = {
        let mut v = signed(&mut r, &[2, 3, 8], 0.0, 1.0);
        for (i, e) in v.data_mut().iter_mut().enumerate() {
            let t = tau.data()[i / 8];
            if (e.abs() - t).abs() < 0.05 {
                *e = e.signum() * (t + 0.1);
            }
        }
        v
    };
    out.push(("soft_threshold", grad_check(&[xs, tau], |g, v| soft_threshold_op(g, v[0], v[1]))));

    for (name, mode) in [
        ("selective_scan_sequential", ScanMode::Sequential),
        ("selective_scan_parallel", ScanMode::Parallel),
    ] {
        let (bsz, len, d, n) = (2, 7, 3, 4);
        let delta = uniform(&mut r, &[bsz, len, d], 0.05, 0.8);
        // includes rates small enough for the series branch of the gain
        let mut a = uniform(&mut r, &[d, n], -2.0, -0.1);
        a.data_mut()[0] = -0.01;
        a.data_mut()[5] = -1e-3;
        let bt = uniform(&mut r, &[bsz, len, n], -1.0, 1.0);
        let ct = uniform(&mut r, &[bsz, len, n], -1.0, 1.0);
        let xv = uniform(&mut r, &[bsz, len, d], -1.0, 1.0);
        let skip = uniform(&mut r, &[d], -1.0, 1.0);
        out.push((
            name,
            grad_check(&[delta, a, bt, ct, xv, skip], |g, v| {
                selective_scan(g, v[0], v[1], v[2], v[3], v[4], v[5], mode)
            }),
        ));
    }
    out
}

/// Small two-block model used for the whole-network gradient check.
pub fn small_config(use_norm: bool, scan_mode: ScanMode) -> MamcaConfig {
    MamcaConfig {
        num_blocks: 2,
        d_model: 4,
        n_state: 3,
        kernel: 3,
        expand: 2,
        num_classes: 3,
        use_norm,
        scan_mode,
        seed: 5,
        ..MamcaConfig::default()
    }
}

/// [`five_point`] unless steps `h` and `2h` disagree, which happens only
/// when the stencil straddles a kink of the function.
pub fn five_point_smooth(x0: f64, mut f: impl FnMut(f64) -> f64) -> Option<f64> {
    let h = FD_STEP;
    let v: Vec<f64> = [-4.0, -2.0, -1.0, 1.0, 2.0, 4.0]
        .iter()
        .map(|k| f(x0 + k * h))
        .collect();
    let fine = (v[1] - 8.0 * v[2] + 8.0 * v[3] - v[4]) / (12.0 * h);
    let coarse = (v[0] - 8.0 * v[1] + 8.0 * v[4] - v[5]) / (24.0 * h);
    ((fine - coarse).abs() <= 1e-7 + 1e-5 * fine.abs()).then_some(fine)
}

/// Worst relative error over every parameter tensor and the input of a
/// full forward pass plus cross-entropy. Inputs whose stencils cross a
/// shrinkage kink are redrawn.
pub fn model_error(config: MamcaConfig) -> f64 {
    let mut model = Model64::build(config).unwrap();
    let mut r = rng(99);
    // At initialization the step sizes are tiny and the SSM-internal
    // gradients sit near the finite-difference noise floor; move to a
    // generic point where they are well above it.
    let ids: Vec<_> = model.store().ids().collect();
    for &id in &ids {
        let name = model.store().name(id).to_string();
        let t = model.store_mut().get_mut(id);
        if name.ends_with("dt_bias") {
            for v in t.data_mut() {
                *v = r.random_range(-1.0..1.0);
            }
        } else if name.ends_with("proj_b") || name.ends_with("proj_c") {
            for v in t.data_mut() {
                *v *= 4.0;
            }
        }
    }
    for _ in 0..20 {
        let x = uniform(&mut r, &[2, 2, 12], -1.0, 1.0);
        if let Some(e) = model_error_at(&mut model, &x) {
            return e;
        }
    }
    panic!("no kink-free input found");
}

fn model_error_at(model: &mut Model64, x: &Tensor<f64>) -> Option<f64> {
    let labels = [0usize, 2];
    let loss_of = |m: &Model64, x: &Tensor<f64>| -> f64 {
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let lg = m.forward(&mut g, xv).unwrap();
        let l = g.softmax_cross_entropy(lg, &labels).unwrap();
        g.value(l).item()
    };

    let mut g = Graph::new();
    let xv = g.leaf(x.clone().with_grad());
    let lg = model.forward(&mut g, xv).unwrap();
    let l = g.softmax_cross_entropy(lg, &labels).unwrap();
    g.backward(l).unwrap();
    let x_grad = g.grad(xv).unwrap().to_vec();
    model.store_mut().zero_grad();
    g.accumulate_into(model.store_mut());

    let mut xp = x.clone();
    let mut numeric = vec![0.0; x.len()];
    for (i, slot) in numeric.iter_mut().enumerate() {
        let x0 = x.data()[i];
        let d = five_point_smooth(x0, |xi| {
            xp.data_mut()[i] = xi;
            loss_of(model, &xp)
        });
        xp.data_mut()[i] = x0;
        *slot = d?;
    }
    let mut worst = rel_err(&x_grad, &numeric);

    let ids: Vec<_> = model.store().ids().collect();
    for id in ids {
        let analytic = model.store().get(id).grad().unwrap().to_vec();
        let mut numeric = vec![0.0; analytic.len()];
        for (i, slot) in numeric.iter_mut().enumerate() {
            let p0 = model.store().get(id).data()[i];
            let d = five_point_smooth(p0, |pi| {
                model.store_mut().get_mut(id).data_mut()[i] = pi;
                loss_of(model, x)
            });
            model.store_mut().get_mut(id).data_mut()[i] = p0;
            *slot = d?;
        }
        worst = worst.max(rel_err(&analytic, &numeric));
    }
    Some(worst)
}
