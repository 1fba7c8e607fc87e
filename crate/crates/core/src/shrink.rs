//! Learned soft-threshold denoising.
//!
//! A [`DenoiseUnit`] lifts its input with a convolution, estimates one
//! threshold per sample and channel from the mean absolute activation, and
//! shrinks the features toward zero:
//!
//! ```text
//! f = conv(x)          m = mean_L |f|          s = sigmoid(W·m + b)
//! τ = s ⊙ m            y = shrink(f, τ) + res(x)
//! shrink(v, τ) = sign(v) · max(|v| - τ, 0)
//! ```
//!
//! The derivative of the shrinkage is 1 outside the dead zone `|v| <= τ` and
//! 0 inside it, including at the boundary.

use rand::Rng;

use crate::error::{Error, Result};
use crate::ndiff::kernels::{broadcast_shape, for_each_broadcast, unbroadcast};
use crate::ndiff::{Function, Graph, Padding, ParamId, ParamStore, Tensor, Var};
use crate::scalar::Scalar;
use crate::sssm::uniform_tensor;

/// Added under the square root of the optional RMS normalization.
const NORM_EPS: f64 = 1e-6;

/// Shrinkage of one value.
#[inline]
pub fn shrink<T: Scalar>(x: T, tau: T) -> T {
    if x > tau {
        x - tau
    } else if x < -tau {
        x + tau
    } else {
        T::zero()
    }
}

/// Derivative of [`shrink`] with respect to `x`: 1 outside the dead zone,
/// 0 on and inside it.
#[inline]
pub fn shrink_mask<T: Scalar>(x: T, tau: T) -> T {
    if x > tau || x < -tau {
        T::one()
    } else {
        T::zero()
    }
}

fn check_tau<T: Scalar>(tau: &[T]) -> Result<()> {
    if tau.iter().any(|&t| !(t >= T::zero())) {
        return Err(Error::invalid("soft threshold needs τ >= 0"));
    }
    Ok(())
}

/// Elementwise shrinkage of `x` by `tau`, which broadcasts against `x`.
pub fn soft_threshold<T: Scalar>(x: &Tensor<T>, tau: &Tensor<T>) -> Result<Tensor<T>> {
    check_tau(tau.data())?;
    let out_shape = broadcast_shape("soft_threshold", x.shape(), tau.shape())?;
    if out_shape != x.shape() {
        return Err(Error::ShapeMismatch {
            op: "soft_threshold",
            lhs: x.shape().to_vec(),
            rhs: tau.shape().to_vec(),
        });
    }
    let (xv, tv) = (x.data(), tau.data());
    let mut out = vec![T::zero(); x.len()];
    for_each_broadcast("soft_threshold", x.shape(), tau.shape(), &out_shape, |o, i, j| {
        out[o] = shrink(xv[i], tv[j]);
    })?;
    Tensor::new(out_shape, out)
}

/// Gradients of `Σ upstream ⊙ soft_threshold(x, τ)` with respect to `x`
/// and `τ`. The `τ` gradient is `-sign(x)` outside the dead zone, summed
/// over the broadcast axes.
pub fn soft_threshold_backward<T: Scalar>(
    x: &Tensor<T>,
    tau: &Tensor<T>,
    upstream: &[T],
) -> Result<(Vec<T>, Vec<T>)> {
    check_tau(tau.data())?;
    if upstream.len() != x.len() {
        return Err(Error::ShapeMismatch {
            op: "soft_threshold_backward",
            lhs: x.shape().to_vec(),
            rhs: vec![upstream.len()],
        });
    }
    let (xv, tv) = (x.data(), tau.data());
    let mut gx = vec![T::zero(); x.len()];
    let mut gt_full = vec![T::zero(); x.len()];
    for_each_broadcast(
        "soft_threshold_backward",
        x.shape(),
        tau.shape(),
        x.shape(),
        |o, i, j| {
            let g = upstream[o] * shrink_mask(xv[i], tv[j]);
            gx[i] = g;
            gt_full[o] = -xv[i].signum() * g;
        },
    )?;
    let gt = unbroadcast(&gt_full, tau.shape(), x.shape());
    Ok((gx, gt))
}

struct SoftThresholdFn;

impl<T: Scalar> Function<T> for SoftThresholdFn {
    fn name(&self) -> &'static str {
        "soft_threshold"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad_output: &[T],
    ) -> Result<Vec<Option<Vec<T>>>> {
        let (gx, gt) = soft_threshold_backward(inputs[0], inputs[1], grad_output)?;
        Ok(vec![Some(gx), Some(gt)])
    }
}

/// Differentiable [`soft_threshold`].
pub fn soft_threshold_op<T: Scalar>(g: &mut Graph<T>, x: Var, tau: Var) -> Result<Var> {
    let out = soft_threshold(g.value(x), g.value(tau))?;
    Ok(g.apply(Box::new(SoftThresholdFn), &[x, tau], out))
}

/// Convolutional lift, threshold attention and residual path.
#[derive(Clone, Debug)]
pub struct DenoiseUnit {
    pub in_channels: usize,
    pub d_model: usize,
    pub kernel: usize,
    /// `[D, C_in, K]`.
    pub conv_w: ParamId,
    /// `[D]`, zero-initialized.
    pub conv_b: ParamId,
    /// `[D, D]`, applied as `m · W`.
    pub thresh_w: ParamId,
    /// `[D]`.
    pub thresh_b: ParamId,
    /// `[D, C_in, 1]`; `None` when `C_in == D` and the residual is the
    /// input itself.
    pub res_proj: Option<ParamId>,
    /// RMS-normalize the lifted features across channels before shrinking.
    pub use_norm: bool,
}

impl DenoiseUnit {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        prefix: &str,
        in_channels: usize,
        d_model: usize,
        kernel: usize,
        use_norm: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if in_channels == 0 || d_model == 0 {
            return Err(Error::invalid("denoise unit needs positive channel counts"));
        }
        if kernel % 2 == 0 {
            return Err(Error::invalid(format!(
                "denoise kernel width must be odd, got {kernel}"
            )));
        }
        let conv_fan = 1.0 / ((in_channels * kernel) as f64).sqrt();
        let conv_w = store.add(
            format!("{prefix}.conv_w"),
            uniform_tensor(rng, vec![d_model, in_channels, kernel], conv_fan),
        )?;
        let conv_b = store.add(format!("{prefix}.conv_b"), Tensor::zeros(vec![d_model]))?;
        let thresh_w = store.add(
            format!("{prefix}.thresh_w"),
            uniform_tensor(rng, vec![d_model, d_model], 1.0 / (d_model as f64).sqrt()),
        )?;
        let thresh_b = store.add(format!("{prefix}.thresh_b"), Tensor::zeros(vec![d_model]))?;
        let res_proj = if in_channels == d_model {
            None
        } else {
            Some(store.add(
                format!("{prefix}.res_proj"),
                uniform_tensor(
                    rng,
                    vec![d_model, in_channels, 1],
                    1.0 / (in_channels as f64).sqrt(),
                ),
            )?)
        };
        Ok(Self {
            in_channels,
            d_model,
            kernel,
            conv_w,
            conv_b,
            thresh_w,
            thresh_b,
            res_proj,
            use_norm,
        })
    }

    pub fn param_count(in_channels: usize, d_model: usize, kernel: usize) -> usize {
        let res = if in_channels == d_model {
            0
        } else {
            d_model * in_channels
        };
        d_model * in_channels * kernel + d_model + d_model * d_model + d_model + res
    }

    /// Per-sample, per-channel threshold `τ: [B, D]` for `f: [B, D, L]`.
    pub fn estimate_threshold<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        f: Var,
    ) -> Result<Var> {
        if !g.value(f).all_finite() {
            return Err(Error::NonFinite("threshold estimation input".into()));
        }
        let abs = g.abs(f)?;
        let m = g.mean(abs, &[2])?;
        let w = g.param(store, self.thresh_w);
        let b = g.param(store, self.thresh_b);
        let z = g.matmul(m, w)?;
        let z = g.add(z, b)?;
        let s = g.sigmoid(z)?;
        g.mul(s, m)
    }

    fn rms_norm<T: Scalar>(&self, g: &mut Graph<T>, f: Var) -> Result<Var> {
        let shape = g.shape(f).to_vec();
        let sq = g.mul(f, f)?;
        let ms = g.mean(sq, &[1])?;
        let ms = g.reshape(ms, vec![shape[0], 1, shape[2]])?;
        let eps = g.input(Tensor::scalar(T::of(NORM_EPS)));
        let ms = g.add(ms, eps)?;
        let rms = g.sqrt(ms)?;
        let inv = g.reciprocal(rms)?;
        g.mul(f, inv)
    }

    /// `x: [B, C_in, L]` to `[B, D, L]`.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
    ) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        if shape.len() != 3 || shape[1] != self.in_channels {
            return Err(Error::ShapeMismatch {
                op: "denoise_forward",
                lhs: shape,
                rhs: vec![0, self.in_channels, 0],
            });
        }
        if !g.value(x).all_finite() {
            return Err(Error::NonFinite("denoise input".into()));
        }
        let w = g.param(store, self.conv_w);
        let b = g.param(store, self.conv_b);
        let mut f = g.conv1d(x, w, Some(b), Padding::Same)?;
        if self.use_norm {
            f = self.rms_norm(g, f)?;
        }
        let tau = self.estimate_threshold(g, store, f)?;
        let tau = g.reshape(tau, vec![shape[0], self.d_model, 1])?;
        let y = soft_threshold_op(g, f, tau)?;
        let res = match self.res_proj {
            Some(id) => {
                let w = g.param(store, id);
                g.conv1d(x, w, None, Padding::Same)?
            }
            None => x,
        };
        g.add(y, res)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), v.to_vec()).unwrap()
    }

    #[test]
    fn piecewise_values() {
        assert_eq!(shrink(0.5, 1.0), 0.0);
        assert_eq!(shrink(2.0, 1.0), 1.0);
        assert_eq!(shrink(-2.0, 1.0), -1.0);
        assert_eq!(shrink(1.0, 1.0), 0.0);
        assert_eq!(shrink(-0.3, 0.0), -0.3);
        assert_eq!(shrink_mask(2.0, 1.0), 1.0);
        assert_eq!(shrink_mask(0.5, 1.0), 0.0);
        assert_eq!(shrink_mask(-1.0, 1.0), 0.0);
    }

    #[test]
    fn negative_tau_rejected() {
        let x = t(&[2], &[1.0, 2.0]);
        assert!(soft_threshold(&x, &t(&[1], &[-0.1])).is_err());
        assert!(soft_threshold(&x, &t(&[1], &[f64::NAN])).is_err());
    }

    #[test]
    fn broadcast_threshold_and_gradients() {
        let x = t(&[1, 2, 3], &[2.0, 0.5, -3.0, 0.1, -0.2, 0.3]);
        let tau = t(&[1, 2, 1], &[1.0, 0.25]);
        let y = soft_threshold(&x, &tau).unwrap();
        assert_eq!(y.data(), &[1.0, 0.0, -2.0, 0.0, 0.0, 0.3 - 0.25]);
        let (gx, gt) = soft_threshold_backward(&x, &tau, &[1.0; 6]).unwrap();
        assert_eq!(gx, vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0]);
        // channel 0: -sign(2) - sign(-3) = 0; channel 1: -sign(0.3) = -1
        assert_eq!(gt, vec![0.0, -1.0]);
    }

    #[test]
    fn zero_features_give_zero_threshold() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let unit = DenoiseUnit::new(&mut store, "dn", 3, 3, 1, false, &mut rng).unwrap();
        let mut g = Graph::new();
        let f = g.input(Tensor::zeros(vec![2, 3, 5]));
        let tau = unit.estimate_threshold(&mut g, &store, f).unwrap();
        assert!(g.value(tau).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_weights_give_half_mean() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let unit = DenoiseUnit::new(&mut store, "dn", 2, 2, 1, false, &mut rng).unwrap();
        store.set_values(unit.thresh_w, &[0.0; 4]).unwrap();
        let mut g = Graph::new();
        let f = g.input(t(&[1, 2, 4], &[1.0, -1.0, 1.0, -1.0, 1.0, 1.0, 1.0, 1.0]));
        let tau = unit.estimate_threshold(&mut g, &store, f).unwrap();
        assert_eq!(g.value(tau).data(), &[0.5, 0.5]);
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for use_norm in [false, true] {
            let unit =
                DenoiseUnit::new(&mut store, &format!("dn{use_norm}"), 2, 6, 5, use_norm, &mut rng)
                    .unwrap();
            let mut g = Graph::new();
            let x = g.input(Tensor::zeros(vec![2, 2, 16]));
            let y = unit.forward(&mut g, &store, x).unwrap();
            assert_eq!(g.shape(y), &[2, 6, 16]);
            assert!(g.value(y).data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn small_channel_is_suppressed() {
        // identity lift on two channels: a strong constant and a weak one
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let unit = DenoiseUnit::new(&mut store, "dn", 2, 2, 1, false, &mut rng).unwrap();
        store.set_values(unit.conv_w, &[1.0, 0.0, 0.0, 1.0]).unwrap();
        store.set_values(unit.thresh_w, &[0.0; 4]).unwrap();
        let xs = [4.0, 4.0, 4.0, 4.0, 0.1, -0.1, 0.3, -0.1];
        let mut g = Graph::new();
        let x = g.input(t(&[1, 2, 4], &xs));
        let w = g.param(&store, unit.conv_w);
        let f = g.conv1d(x, w, None, Padding::Same).unwrap();
        let tau = unit.estimate_threshold(&mut g, &store, f).unwrap();
        // τ = 0.5 · mean|f| per channel
        let tv = g.value(tau).data();
        assert!((tv[0] - 2.0).abs() < 1e-15 && (tv[1] - 0.075).abs() < 1e-15);
        let tau = g.reshape(tau, vec![1, 2, 1]).unwrap();
        let y = soft_threshold_op(&mut g, f, tau).unwrap();
        let y = g.value(y).data().to_vec();
        assert_eq!(&y[..4], &[2.0; 4]);
        // the weak channel keeps only its one excursion beyond τ
        assert!((y[6] - 0.225).abs() < 1e-15);
        assert!(y[4].abs() < 0.03 && y[5].abs() < 0.03 && y[7].abs() < 0.03);
    }

    #[test]
    fn param_count_matches_store() {
        for (cin, d) in [(2, 8), (8, 8)] {
            let mut store = ParamStore::<f32>::new();
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            DenoiseUnit::new(&mut store, "dn", cin, d, 5, false, &mut rng).unwrap();
            assert_eq!(store.value_count(), DenoiseUnit::param_count(cin, d, 5));
        }
    }
}
