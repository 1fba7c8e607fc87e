//! Selective state-space layer.
//!
//! For input `x: [B, L, D]` the layer projects per-step `B_t, C_t: [B, L, N]`
//! and a step size `Δ: [B, L, D]` from `x`, discretizes the diagonal state
//! matrix with zero-order hold,
//!
//! ```text
//! ā = exp(Δ·a)        b̄ = (exp(Δ·a) - 1) / a · b
//! h(n) = ā(n) ⊙ h(n-1) + b̄(n) · x(n)       h(-1) = 0
//! y(n) = C_t(n) · h(n) + skip ⊙ x(n)
//! ```
//!
//! and runs the recurrence either left to right or as a work-efficient
//! up-sweep/down-sweep scan over the affine maps `h ↦ ā·h + b̄x`.

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::hippo;
use crate::ndiff::{softplus, Function, Graph, ParamId, ParamStore, Tensor, Var};
use crate::scalar::Scalar;

/// Below this `|Δ·a|` the ZOH input gain uses its limit `Δ·b`.
const ZOH_SERIES_GUARD: f64 = 1e-8;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScanMode {
    #[default]
    Sequential,
    Parallel,
}

impl std::str::FromStr for ScanMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sequential" => Ok(Self::Sequential),
            "parallel" => Ok(Self::Parallel),
            other => Err(Error::Config(format!("unknown scan mode `{other}`"))),
        }
    }
}

/// Discretized per-step coefficients, both `[B, L, D, N]`.
#[derive(Clone, Debug)]
pub struct DiscretePair<T> {
    pub a_bar: Tensor<T>,
    /// `b̄` already multiplied by `x(n)`: the additive term of each step.
    pub b_bar_x: Tensor<T>,
}

/// ZOH coefficients for one step: `(exp(Δa), (exp(Δa) - 1) / a)`.
#[inline]
pub fn zoh<T: Scalar>(delta: T, a: T) -> (T, T) {
    let (a_bar, gain, _) = zoh_parts(delta, a);
    (a_bar, gain)
}

/// `(ā, gain, expm1(Δa))`; one transcendental call per step.
#[inline]
fn zoh_parts<T: Scalar>(delta: T, a: T) -> (T, T, T) {
    let z = delta * a;
    let em1 = z.expm1_fast();
    let gain = if z.abs() < T::of(ZOH_SERIES_GUARD) {
        delta
    } else {
        em1 / a
    };
    (em1 + T::one(), gain, em1)
}

/// `d/dz [(e^z - 1)/z]`, with a series near zero where the closed form
/// cancels. `em1 = expm1(z)`, `a_bar = exp(z)`.
#[inline]
fn zoh_gain_slope<T: Scalar>(z: T, a_bar: T, em1: T) -> T {
    // 1/2 + z/3 + z²/8 + z³/30 + z⁴/144; both branches are evaluated so
    // callers' loops stay branch-free
    let c = [1.0 / 2.0, 1.0 / 3.0, 1.0 / 8.0, 1.0 / 30.0, 1.0 / 144.0];
    let series = c.iter().rev().fold(T::zero(), |acc, &ci| acc * z + T::of(ci));
    let closed = (z * a_bar - em1) / (z * z);
    if z.abs() < T::of(1e-2) {
        series
    } else {
        closed
    }
}

/// Inverse of softplus: the bias giving `softplus(bias) = y`.
pub fn inverse_softplus(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

/// Composition of affine steps, `first` applied before `second`:
/// `(a₁, b₁) ∘ (a₂, b₂) = (a₁a₂, a₂b₁ + b₂)`.
#[inline]
pub fn combine<T: Scalar>(first: (T, T), second: (T, T)) -> (T, T) {
    (first.0 * second.0, second.0 * first.1 + second.1)
}

fn dims3(op: &'static str, t: &Tensor<impl Scalar>) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [a, b, c] => Ok((a, b, c)),
        _ => Err(Error::InvalidShape {
            op,
            shape: t.shape().to_vec(),
            reason: "expected rank 3".into(),
        }),
    }
}

fn expect_shape(op: &'static str, t: &Tensor<impl Scalar>, want: &[usize]) -> Result<()> {
    if t.shape() != want {
        return Err(Error::ShapeMismatch {
            op,
            lhs: t.shape().to_vec(),
            rhs: want.to_vec(),
        });
    }
    Ok(())
}

/// Elementwise ZOH discretization for a diagonal state matrix.
///
/// `delta: [B, L, D]`, `a: [D, N]`, `b_t: [B, L, N]`, `x: [B, L, D]`.
pub fn discretize<T: Scalar>(
    delta: &Tensor<T>,
    a: &Tensor<T>,
    b_t: &Tensor<T>,
    x: &Tensor<T>,
) -> Result<DiscretePair<T>> {
    let (bsz, len, d) = dims3("discretize", delta)?;
    let n = a.shape().get(1).copied().unwrap_or(0);
    expect_shape("discretize a", a, &[d, n])?;
    expect_shape("discretize b_t", b_t, &[bsz, len, n])?;
    expect_shape("discretize x", x, &[bsz, len, d])?;
    if delta.data().iter().any(|&v| !(v > T::zero())) {
        return Err(Error::invalid("discretize needs Δ > 0"));
    }
    let total = bsz * len * d * n;
    let mut a_bar = Vec::with_capacity(total);
    let mut b_bar_x = Vec::with_capacity(total);
    let (dv, av, bv, xv) = (delta.data(), a.data(), b_t.data(), x.data());
    for step in 0..bsz * len {
        for ch in 0..d {
            let dl = dv[step * d + ch];
            let xi = xv[step * d + ch];
            for k in 0..n {
                let (ab, gain) = zoh(dl, av[ch * n + k]);
                a_bar.push(ab);
                b_bar_x.push(gain * bv[step * n + k] * xi);
            }
        }
    }
    Ok(DiscretePair {
        a_bar: Tensor::new(vec![bsz, len, d, n], a_bar)?,
        b_bar_x: Tensor::new(vec![bsz, len, d, n], b_bar_x)?,
    })
}

fn pair_dims<T: Scalar>(pair: &DiscretePair<T>) -> Result<[usize; 4]> {
    match *pair.a_bar.shape() {
        [b, l, d, n] if pair.b_bar_x.shape() == pair.a_bar.shape() => Ok([b, l, d, n]),
        _ => Err(Error::ShapeMismatch {
            op: "scan",
            lhs: pair.a_bar.shape().to_vec(),
            rhs: pair.b_bar_x.shape().to_vec(),
        }),
    }
}

/// Hidden states `[B, L, D, N]` by the left-to-right recurrence.
pub fn states_sequential<T: Scalar>(pair: &DiscretePair<T>) -> Result<Vec<T>> {
    let [bsz, len, d, n] = pair_dims(pair)?;
    let lane = d * n;
    let (av, bv) = (pair.a_bar.data(), pair.b_bar_x.data());
    let mut hs = vec![T::zero(); bsz * len * lane];
    for b in 0..bsz {
        let mut h = vec![T::zero(); lane];
        for t in 0..len {
            let off = (b * len + t) * lane;
            for j in 0..lane {
                h[j] = av[off + j] * h[j] + bv[off + j];
            }
            hs[off..off + lane].copy_from_slice(&h);
        }
    }
    Ok(hs)
}

/// Inclusive scan of one lane of affine steps (h(-1) = 0) by up-sweep and
/// down-sweep over a power-of-two padded tree.
fn scan_lane<T: Scalar>(a_in: &[T], b_in: &[T], ta: &mut Vec<T>, tb: &mut Vec<T>, out: &mut [T]) {
    let len = a_in.len();
    let n = len.next_power_of_two();
    ta.clear();
    ta.extend_from_slice(a_in);
    ta.resize(n, T::one());
    tb.clear();
    tb.extend_from_slice(b_in);
    tb.resize(n, T::zero());

    let mut stride = 1;
    while stride < n {
        for i in (2 * stride - 1..n).step_by(2 * stride) {
            let l = i - stride;
            (ta[i], tb[i]) = combine((ta[l], tb[l]), (ta[i], tb[i]));
        }
        stride *= 2;
    }
    ta[n - 1] = T::one();
    tb[n - 1] = T::zero();
    stride = n / 2;
    while stride >= 1 {
        for i in (2 * stride - 1..n).step_by(2 * stride) {
            let l = i - stride;
            let left = (ta[l], tb[l]);
            let prefix = (ta[i], tb[i]);
            (ta[l], tb[l]) = prefix;
            (ta[i], tb[i]) = combine(prefix, left);
        }
        stride /= 2;
    }
    // exclusive prefix then the element itself; the state is the offset
    for i in 0..len {
        out[i] = combine((ta[i], tb[i]), (a_in[i], b_in[i])).1;
    }
}

/// Hidden states `[B, L, D, N]` by associative scan; batches run on the
/// rayon pool.
pub fn states_parallel<T: Scalar>(pair: &DiscretePair<T>) -> Result<Vec<T>> {
    let [bsz, len, d, n] = pair_dims(pair)?;
    let lane = d * n;
    let (av, bv) = (pair.a_bar.data(), pair.b_bar_x.data());
    let mut hs = vec![T::zero(); bsz * len * lane];
    hs.par_chunks_mut(len * lane)
        .enumerate()
        .for_each(|(b, block)| {
            let base = b * len * lane;
            let (mut la, mut lb, mut lo) = (vec![T::zero(); len], vec![T::zero(); len], vec![T::zero(); len]);
            let (mut ta, mut tb) = (Vec::new(), Vec::new());
            for j in 0..lane {
                for t in 0..len {
                    la[t] = av[base + t * lane + j];
                    lb[t] = bv[base + t * lane + j];
                }
                scan_lane(&la, &lb, &mut ta, &mut tb, &mut lo);
                for t in 0..len {
                    block[t * lane + j] = lo[t];
                }
            }
        });
    Ok(hs)
}

/// `y(n) = C_t(n) · h(n) + skip ⊙ x(n)`.
fn readout<T: Scalar>(
    hs: &[T],
    c_t: &[T],
    x: &[T],
    skip: &[T],
    steps: usize,
    d: usize,
    n: usize,
) -> Vec<T> {
    let mut y = vec![T::zero(); steps * d];
    for s in 0..steps {
        let c = &c_t[s * n..(s + 1) * n];
        for ch in 0..d {
            let h = &hs[(s * d + ch) * n..][..n];
            let acc = h.iter().zip(c).fold(T::zero(), |acc, (&hv, &cv)| acc + hv * cv);
            y[s * d + ch] = acc + skip[ch] * x[s * d + ch];
        }
    }
    y
}

fn check_readout_shapes<T: Scalar>(
    pair: &DiscretePair<T>,
    c_t: &Tensor<T>,
    x: &Tensor<T>,
    skip: &Tensor<T>,
) -> Result<[usize; 4]> {
    let [b, l, d, n] = pair_dims(pair)?;
    expect_shape("scan c_t", c_t, &[b, l, n])?;
    expect_shape("scan x", x, &[b, l, d])?;
    expect_shape("scan skip", skip, &[d])?;
    Ok([b, l, d, n])
}

/// Output `[B, L, D]` of the recurrence run left to right.
pub fn scan_sequential<T: Scalar>(
    pair: &DiscretePair<T>,
    c_t: &Tensor<T>,
    x: &Tensor<T>,
    skip: &Tensor<T>,
) -> Result<Tensor<T>> {
    let [b, l, d, n] = check_readout_shapes(pair, c_t, x, skip)?;
    let hs = states_sequential(pair)?;
    let y = readout(&hs, c_t.data(), x.data(), skip.data(), b * l, d, n);
    Tensor::new(vec![b, l, d], y)
}

/// Output `[B, L, D]` of the recurrence computed by associative scan.
pub fn scan_parallel<T: Scalar>(
    pair: &DiscretePair<T>,
    c_t: &Tensor<T>,
    x: &Tensor<T>,
    skip: &Tensor<T>,
) -> Result<Tensor<T>> {
    let [b, l, d, n] = check_readout_shapes(pair, c_t, x, skip)?;
    let hs = states_parallel(pair)?;
    let y = readout(&hs, c_t.data(), x.data(), skip.data(), b * l, d, n);
    Tensor::new(vec![b, l, d], y)
}

/// Copies one value per channel across that channel's `n` state slots.
#[inline]
fn spread<T: Scalar>(per_channel: &[T], n: usize, out: &mut [T]) {
    for (slots, &v) in out.chunks_exact_mut(n).zip(per_channel) {
        slots.fill(v);
    }
}

/// Repeats the per-state row once per channel.
#[inline]
fn tile<T: Scalar>(per_state: &[T], out: &mut [T]) {
    for slots in out.chunks_exact_mut(per_state.len()) {
        slots.copy_from_slice(per_state);
    }
}

/// `out[ch·n + k] = per_channel[ch] · per_state[k]`.
#[inline]
fn spread_outer<T: Scalar>(per_channel: &[T], per_state: &[T], out: &mut [T]) {
    for (slots, &v) in out.chunks_exact_mut(per_state.len()).zip(per_channel) {
        for (o, &w) in slots.iter_mut().zip(per_state) {
            *o = v * w;
        }
    }
}

/// One recurrence step over every `(channel, state)` slot:
/// `h ← ā ⊙ h + gain ⊙ (b·x)`, recording `expm1(Δa)`. Branch-free so it
/// vectorizes.
#[inline]
fn step_lane<T: Scalar>(h: &mut [T], em1_out: &mut [T], a: &[T], delta: &[T], bx: &[T]) {
    let guard = T::of(ZOH_SERIES_GUARD);
    for ((((hj, e), &av), &dl), &u) in h.iter_mut().zip(em1_out).zip(a).zip(delta).zip(bx) {
        let z = dl * av;
        let em1 = z.expm1_fast();
        let gain = if z.abs() < guard { dl } else { em1 / av };
        *hj = (em1 + T::one()) * *hj + gain * u;
        *e = em1;
    }
}

/// Fused discretize + sequential recurrence; never materializes `ā`, `b̄x`.
/// Returns the states and `expm1(Δa)` per step for the reverse pass.
fn states_fused<T: Scalar>(
    delta: &[T],
    a: &[T],
    b_t: &[T],
    x: &[T],
    [bsz, len, d, n]: [usize; 4],
) -> (Vec<T>, Vec<T>) {
    let lane = d * n;
    let mut hs = vec![T::zero(); bsz * len * lane];
    let mut em1s = vec![T::zero(); bsz * len * lane];
    let mut dl = vec![T::zero(); lane];
    let mut bx = vec![T::zero(); lane];
    let mut h = vec![T::zero(); lane];
    for b in 0..bsz {
        h.fill(T::zero());
        for t in 0..len {
            let s = b * len + t;
            spread(&delta[s * d..(s + 1) * d], n, &mut dl);
            spread_outer(&x[s * d..(s + 1) * d], &b_t[s * n..(s + 1) * n], &mut bx);
            step_lane(&mut h, &mut em1s[s * lane..(s + 1) * lane], a, &dl, &bx);
            hs[s * lane..(s + 1) * lane].copy_from_slice(&h);
        }
    }
    (hs, em1s)
}

/// Forward-only sequential scan that keeps one state vector per batch
/// row instead of the whole history.
fn outputs_fused<T: Scalar>(
    delta: &[T],
    a: &[T],
    b_t: &[T],
    c_t: &[T],
    x: &[T],
    skip: &[T],
    [bsz, len, d, n]: [usize; 4],
) -> Vec<T> {
    let lane = d * n;
    let mut y = vec![T::zero(); bsz * len * d];
    let mut dl = vec![T::zero(); lane];
    let mut bx = vec![T::zero(); lane];
    let mut em1 = vec![T::zero(); lane];
    let mut h = vec![T::zero(); lane];
    for b in 0..bsz {
        h.fill(T::zero());
        for t in 0..len {
            let s = b * len + t;
            spread(&delta[s * d..(s + 1) * d], n, &mut dl);
            spread_outer(&x[s * d..(s + 1) * d], &b_t[s * n..(s + 1) * n], &mut bx);
            step_lane(&mut h, &mut em1, a, &dl, &bx);
            let ct = &c_t[s * n..(s + 1) * n];
            for (ch, slots) in h.chunks_exact(n).enumerate() {
                let acc = slots.iter().zip(ct).fold(T::zero(), |acc, (&hv, &cv)| acc + hv * cv);
                y[s * d + ch] = acc + skip[ch] * x[s * d + ch];
            }
        }
    }
    y
}

/// `expm1(Δa)` for every step, lane-major like the states.
fn em1_table<T: Scalar>(delta: &[T], a: &[T], [bsz, len, d, n]: [usize; 4]) -> Vec<T> {
    let mut out = Vec::with_capacity(bsz * len * d * n);
    for s in 0..bsz * len {
        for ch in 0..d {
            let dl = delta[s * d + ch];
            out.extend(a[ch * n..(ch + 1) * n].iter().map(|&av| (dl * av).expm1_fast()));
        }
    }
    out
}

/// Saved state of the differentiable scan.
struct SelectiveScanFn<T> {
    states: Vec<T>,
    em1: Vec<T>,
    dims: [usize; 4],
}

impl<T: Scalar> Function<T> for SelectiveScanFn<T> {
    fn name(&self) -> &'static str {
        "selective_scan"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        gy: &[T],
    ) -> Result<Vec<Option<Vec<T>>>> {
        let [bsz, len, d, n] = self.dims;
        let lane = d * n;
        let (delta, a, b_t, c_t, x, skip) = (
            inputs[0].data(),
            inputs[1].data(),
            inputs[2].data(),
            inputs[3].data(),
            inputs[4].data(),
            inputs[5].data(),
        );
        let hs = &self.states;
        let mut g_delta = vec![T::zero(); delta.len()];
        let mut g_a = vec![T::zero(); a.len()];
        let mut g_b = vec![T::zero(); b_t.len()];
        let mut g_c = vec![T::zero(); c_t.len()];
        let mut g_x = vec![T::zero(); x.len()];
        let mut g_skip = vec![T::zero(); skip.len()];
        let zero_state = vec![T::zero(); lane];
        let guard = T::of(ZOH_SERIES_GUARD);
        // per-slot copies of the per-channel and per-state inputs, and
        // per-slot terms reduced afterwards
        let scratch = || vec![T::zero(); lane];
        let (mut dl_s, mut x_s, mut gy_s, mut b_s, mut c_s) =
            (scratch(), scratch(), scratch(), scratch(), scratch());
        let (mut t_gc, mut t_gb, mut t_gx, mut t_gdl) = (scratch(), scratch(), scratch(), scratch());

        for b in 0..bsz {
            // adjoint of h(t) flowing back from step t+1
            let mut carry = scratch();
            for t in (0..len).rev() {
                let s = b * len + t;
                let h = &hs[s * lane..(s + 1) * lane];
                let h_prev = if t > 0 {
                    &hs[(s - 1) * lane..s * lane]
                } else {
                    &zero_state[..]
                };
                let em1 = &self.em1[s * lane..(s + 1) * lane];
                let rows = s * d..(s + 1) * d;
                let bt = &b_t[s * n..(s + 1) * n];
                let ct = &c_t[s * n..(s + 1) * n];
                spread(&delta[rows.clone()], n, &mut dl_s);
                spread(&x[rows.clone()], n, &mut x_s);
                spread(&gy[rows.clone()], n, &mut gy_s);
                tile(bt, &mut b_s);
                tile(ct, &mut c_s);
                // equal-length views let the compiler drop bounds checks
                let (a, h, h_prev, em1) = (&a[..lane], &h[..lane], &h_prev[..lane], &em1[..lane]);
                let (dl_s, x_s, gy_s, b_s, c_s) =
                    (&dl_s[..lane], &x_s[..lane], &gy_s[..lane], &b_s[..lane], &c_s[..lane]);
                let (t_gc, t_gb, t_gx, t_gdl) = (
                    &mut t_gc[..lane],
                    &mut t_gb[..lane],
                    &mut t_gx[..lane],
                    &mut t_gdl[..lane],
                );
                let (g_a, carry) = (&mut g_a[..lane], &mut carry[..lane]);
                for j in 0..lane {
                    let (av, dl) = (a[j], dl_s[j]);
                    let g = carry[j] + c_s[j] * gy_s[j];
                    let z = dl * av;
                    let ab = em1[j] + T::one();
                    let gain = if z.abs() < guard { dl } else { em1[j] / av };
                    let g_ab = g * h_prev[j];
                    let g_gain = g * b_s[j] * x_s[j];
                    t_gc[j] = gy_s[j] * h[j];
                    t_gb[j] = g * gain * x_s[j];
                    t_gx[j] = g * gain * b_s[j];
                    // ∂ā/∂Δ = a·ā, ∂gain/∂Δ = ā
                    t_gdl[j] = (g_ab * av + g_gain) * ab;
                    // ∂ā/∂a = Δ·ā, ∂gain/∂a = Δ²·φ'(Δa)
                    g_a[j] += (g_ab * ab + g_gain * dl * zoh_gain_slope(z, ab, em1[j])) * dl;
                    carry[j] = g * ab;
                }
                for ch in 0..d {
                    let slots = ch * n..(ch + 1) * n;
                    let (gyv, xv) = (gy[s * d + ch], x[s * d + ch]);
                    g_skip[ch] += gyv * xv;
                    g_x[s * d + ch] += gyv * skip[ch] + t_gx[slots.clone()].iter().copied().sum::<T>();
                    g_delta[s * d + ch] += t_gdl[slots].iter().copied().sum::<T>();
                }
                let gbt = &mut g_b[s * n..(s + 1) * n];
                let gct = &mut g_c[s * n..(s + 1) * n];
                for (gb_row, gc_row) in t_gb.chunks_exact(n).zip(t_gc.chunks_exact(n)) {
                    for k in 0..n {
                        gbt[k] += gb_row[k];
                        gct[k] += gc_row[k];
                    }
                }
            }
        }
        Ok(vec![
            Some(g_delta),
            Some(g_a),
            Some(g_b),
            Some(g_c),
            Some(g_x),
            Some(g_skip),
        ])
    }
}

/// Differentiable selective scan.
///
/// `delta, x: [B, L, D]`, `a: [D, N]` (negative), `b_t, c_t: [B, L, N]`,
/// `skip: [D]`; returns `y: [B, L, D]`.
#[allow(clippy::too_many_arguments)]
pub fn selective_scan<T: Scalar>(
    g: &mut Graph<T>,
    delta: Var,
    a: Var,
    b_t: Var,
    c_t: Var,
    x: Var,
    skip: Var,
    mode: ScanMode,
) -> Result<Var> {
    let (bsz, len, d) = dims3("selective_scan", g.value(x))?;
    let n = g.shape(a).get(1).copied().unwrap_or(0);
    expect_shape("selective_scan delta", g.value(delta), &[bsz, len, d])?;
    expect_shape("selective_scan a", g.value(a), &[d, n])?;
    expect_shape("selective_scan b_t", g.value(b_t), &[bsz, len, n])?;
    expect_shape("selective_scan c_t", g.value(c_t), &[bsz, len, n])?;
    expect_shape("selective_scan skip", g.value(skip), &[d])?;
    if g.value(delta).data().iter().any(|&v| !(v > T::zero())) {
        return Err(Error::invalid("selective scan needs Δ > 0"));
    }
    let dims = [bsz, len, d, n];
    let inputs = [delta, a, b_t, c_t, x, skip];
    let (dv, av, bv, cv, xv, sv) = (
        g.value(delta).data(),
        g.value(a).data(),
        g.value(b_t).data(),
        g.value(c_t).data(),
        g.value(x).data(),
        g.value(skip).data(),
    );
    if !inputs.iter().any(|&v| g.needs_grad(v)) {
        let y = match mode {
            ScanMode::Sequential => outputs_fused(dv, av, bv, cv, xv, sv, dims),
            ScanMode::Parallel => {
                let pair = discretize(g.value(delta), g.value(a), g.value(b_t), g.value(x))?;
                readout(&states_parallel(&pair)?, cv, xv, sv, bsz * len, d, n)
            }
        };
        return Ok(g.input(Tensor::new(vec![bsz, len, d], y)?));
    }
    let (states, em1) = match mode {
        ScanMode::Sequential => states_fused(dv, av, bv, xv, dims),
        ScanMode::Parallel => {
            let pair = discretize(g.value(delta), g.value(a), g.value(b_t), g.value(x))?;
            (states_parallel(&pair)?, em1_table(dv, av, dims))
        }
    };
    let y = readout(&states, cv, xv, sv, bsz * len, d, n);
    let out = Tensor::new(vec![bsz, len, d], y)?;
    Ok(g.apply(
        Box::new(SelectiveScanFn { states, em1, dims }),
        &inputs,
        out,
    ))
}

/// Parameters of one selective SSM layer over `d` channels and `n` states.
#[derive(Clone, Debug)]
pub struct SsmLayer {
    pub d_model: usize,
    pub n_state: usize,
    /// `log(-A)`, `[D, N]`.
    pub a_log: ParamId,
    /// `[D, N]`, no bias.
    pub proj_b: ParamId,
    /// `[D, N]`, no bias.
    pub proj_c: ParamId,
    /// `[D, 1]`, the rank-one step projection.
    pub proj_dt: ParamId,
    /// `[D]`, broadcast-added before the softplus.
    pub dt_bias: ParamId,
    /// `[D]`, direct feedthrough.
    pub skip: ParamId,
}

/// Range of initial step sizes, sampled log-uniformly per channel.
pub const DT_INIT_RANGE: (f64, f64) = (1e-3, 1e-1);

pub(crate) fn uniform_tensor<T: Scalar, R: Rng>(
    rng: &mut R,
    shape: Vec<usize>,
    bound: f64,
) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| T::of(rng.random_range(-bound..=bound)))
        .collect();
    Tensor::new(shape, data).expect("shape matches data")
}

impl SsmLayer {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        prefix: &str,
        d_model: usize,
        n_state: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let fan = 1.0 / (d_model as f64).sqrt();
        let a_log = store.add(format!("{prefix}.a_log"), hippo::diag_init(d_model, n_state)?)?;
        let proj_b = store.add(
            format!("{prefix}.proj_b"),
            uniform_tensor(rng, vec![d_model, n_state], fan),
        )?;
        let proj_c = store.add(
            format!("{prefix}.proj_c"),
            uniform_tensor(rng, vec![d_model, n_state], fan),
        )?;
        let proj_dt = store.add(
            format!("{prefix}.proj_dt"),
            uniform_tensor(rng, vec![d_model, 1], fan),
        )?;
        let (lo, hi) = DT_INIT_RANGE;
        let dt_bias: Vec<T> = (0..d_model)
            .map(|_| {
                let u: f64 = rng.random();
                let dt = (lo.ln() + u * (hi.ln() - lo.ln())).exp();
                T::of(inverse_softplus(dt))
            })
            .collect();
        let dt_bias = store.add(format!("{prefix}.dt_bias"), Tensor::new(vec![d_model], dt_bias)?)?;
        let skip = store.add(format!("{prefix}.skip"), Tensor::full(vec![d_model], T::one()))?;
        Ok(Self {
            d_model,
            n_state,
            a_log,
            proj_b,
            proj_c,
            proj_dt,
            dt_bias,
            skip,
        })
    }

    /// Number of scalar parameters for the given sizes.
    pub fn param_count(d_model: usize, n_state: usize) -> usize {
        3 * d_model * n_state + d_model + 2 * d_model
    }

    /// `(B_t, C_t, Δ)` for `x: [B, L, D]`.
    pub fn project_inputs<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
    ) -> Result<(Var, Var, Var)> {
        if !g.value(x).all_finite() {
            return Err(Error::NonFinite("selective SSM input".into()));
        }
        let pb = g.param(store, self.proj_b);
        let pc = g.param(store, self.proj_c);
        let pdt = g.param(store, self.proj_dt);
        let bias = g.param(store, self.dt_bias);
        let b_t = g.matmul(x, pb)?;
        let c_t = g.matmul(x, pc)?;
        let dt = g.matmul(x, pdt)?;
        let dt = g.add(dt, bias)?;
        let delta = g.softplus(dt)?;
        Ok((b_t, c_t, delta))
    }

    /// Full layer: projections, discretization and scan. `x: [B, L, D]`.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        mode: ScanMode,
    ) -> Result<Var> {
        let (b_t, c_t, delta) = self.project_inputs(g, store, x)?;
        let a_log = g.param(store, self.a_log);
        let a = g.exp(a_log)?;
        let a = g.neg(a)?;
        let skip = g.param(store, self.skip);
        selective_scan(g, delta, a, b_t, c_t, x, skip, mode)
    }

    /// Current step sizes for a raw input, outside any graph.
    pub fn step_sizes<T: Scalar>(&self, store: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (bsz, len, d) = dims3("step_sizes", x)?;
        let w = store.get(self.proj_dt).data();
        let bias = store.get(self.dt_bias).data();
        let mut out = Vec::with_capacity(bsz * len * d);
        for row in x.data().chunks_exact(d) {
            let lin = row.iter().zip(w).fold(T::zero(), |s, (&a, &b)| s + a * b);
            out.extend(bias.iter().map(|&bv| softplus(lin + bv)));
        }
        Tensor::new(vec![bsz, len, d], out)
    }
}
