//! Index arithmetic shared by the differentiable ops: broadcasting,
//! axis reduction and 1-D convolution loops.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub(crate) const MAX_BROADCAST_RANK: usize = 4;

/// Trailing-dimension broadcast of two shapes.
pub(crate) fn broadcast_shape(
    op: &'static str,
    a: &[usize],
    b: &[usize],
) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(Error::ShapeMismatch {
                    op,
                    lhs: a.to_vec(),
                    rhs: b.to_vec(),
                })
            }
        };
    }
    Ok(out)
}

/// Strides of `shape` laid against a rank-4 padded `out` shape, with zero
/// stride on broadcast axes.
fn padded_strides(shape: &[usize], out: &[usize]) -> [usize; MAX_BROADCAST_RANK] {
    let mut strides = [0; MAX_BROADCAST_RANK];
    let off_out = MAX_BROADCAST_RANK - out.len();
    let off_in = out.len() - shape.len();
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        let slot = off_out + off_in + i;
        strides[slot] = if shape[i] == 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

fn padded_dims(out: &[usize]) -> [usize; MAX_BROADCAST_RANK] {
    let mut dims = [1; MAX_BROADCAST_RANK];
    let off = MAX_BROADCAST_RANK - out.len();
    dims[off..].copy_from_slice(out);
    dims
}

/// Visits every output element of a broadcast binary op as
/// `(out_index, a_index, b_index)`.
pub(crate) fn for_each_broadcast(
    op: &'static str,
    a: &[usize],
    b: &[usize],
    out: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) -> Result<()> {
    if a == b {
        for i in 0..out.iter().product() {
            f(i, i, i);
        }
        return Ok(());
    }
    if out.len() > MAX_BROADCAST_RANK {
        return Err(Error::InvalidShape {
            op,
            shape: out.to_vec(),
            reason: format!("broadcasting supports rank <= {MAX_BROADCAST_RANK}"),
        });
    }
    let dims = padded_dims(out);
    let sa = padded_strides(a, out);
    let sb = padded_strides(b, out);
    let mut o = 0;
    for i0 in 0..dims[0] {
        for i1 in 0..dims[1] {
            for i2 in 0..dims[2] {
                let ba = i0 * sa[0] + i1 * sa[1] + i2 * sa[2];
                let bb = i0 * sb[0] + i1 * sb[1] + i2 * sb[2];
                for i3 in 0..dims[3] {
                    f(o, ba + i3 * sa[3], bb + i3 * sb[3]);
                    o += 1;
                }
            }
        }
    }
    Ok(())
}

/// Sums a gradient of broadcast shape `out` back down to `shape`.
pub(crate) fn unbroadcast<T: Scalar>(grad: &[T], shape: &[usize], out: &[usize]) -> Vec<T> {
    let n: usize = shape.iter().product();
    if shape == out {
        return grad.to_vec();
    }
    let mut acc = vec![T::zero(); n];
    // `out` was validated by the forward pass, so this cannot fail.
    for_each_broadcast("unbroadcast", shape, out, out, |o, i, _| {
        acc[i] += grad[o];
    })
    .expect("shape validated in forward");
    acc
}

/// How a reduction maps input elements to output elements.
#[derive(Clone, Debug)]
pub(crate) struct ReducePlan {
    pub out_shape: Vec<usize>,
    /// Output index for each input element, when the reduced axes are not
    /// one contiguous block.
    map: Option<Vec<usize>>,
    outer: usize,
    red: usize,
    inner: usize,
}

impl ReducePlan {
    pub fn new(shape: &[usize], axes: &[usize]) -> Result<Self> {
        if axes.is_empty() {
            return Err(Error::invalid("reduction over an empty axis list"));
        }
        let mut sorted = axes.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != axes.len() || *sorted.last().unwrap() >= shape.len() {
            return Err(Error::InvalidShape {
                op: "reduce",
                shape: shape.to_vec(),
                reason: format!("bad axes {axes:?}"),
            });
        }
        let out_shape: Vec<usize> = (0..shape.len())
            .filter(|d| !sorted.contains(d))
            .map(|d| shape[d])
            .collect();
        let contiguous = sorted.windows(2).all(|w| w[1] == w[0] + 1);
        if contiguous {
            let (lo, hi) = (sorted[0], *sorted.last().unwrap());
            return Ok(Self {
                out_shape,
                map: None,
                outer: shape[..lo].iter().product(),
                red: shape[lo..=hi].iter().product(),
                inner: shape[hi + 1..].iter().product(),
            });
        }
        let mut out_strides = vec![0; shape.len()];
        let mut acc = 1;
        for d in (0..shape.len()).rev() {
            if !sorted.contains(&d) {
                out_strides[d] = acc;
                acc *= shape[d];
            }
        }
        let total: usize = shape.iter().product();
        let map = (0..total)
            .map(|mut i| {
                let mut o = 0;
                for d in (0..shape.len()).rev() {
                    o += (i % shape[d]) * out_strides[d];
                    i /= shape[d];
                }
                o
            })
            .collect();
        let red = sorted.iter().map(|&d| shape[d]).product();
        Ok(Self {
            out_shape,
            map: Some(map),
            outer: 0,
            red,
            inner: 0,
        })
    }

    /// Number of input elements folded into each output element.
    pub fn group_size(&self) -> usize {
        self.red
    }

    pub fn out_len(&self) -> usize {
        self.out_shape.iter().product()
    }

    #[inline]
    pub fn visit(&self, mut f: impl FnMut(usize, usize)) {
        match &self.map {
            Some(map) => {
                for (i, &o) in map.iter().enumerate() {
                    f(i, o);
                }
            }
            None => {
                let mut i = 0;
                for a in 0..self.outer {
                    for _ in 0..self.red {
                        for c in 0..self.inner {
                            f(i, a * self.inner + c);
                            i += 1;
                        }
                    }
                }
            }
        }
    }
}

/// Zero-padding placement for length-preserving 1-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// Centered window; kernel width must be odd.
    Same,
    /// All padding on the left: output at `t` sees inputs `<= t` only.
    Causal,
}

impl Padding {
    pub(crate) fn left(self, k: usize) -> Result<usize> {
        match self {
            Padding::Same if k % 2 == 0 => Err(Error::invalid(format!(
                "'same' padding needs an odd kernel width, got {k}"
            ))),
            Padding::Same => Ok((k - 1) / 2),
            Padding::Causal => Ok(k - 1),
        }
    }
}

/// Valid output range `[lo, hi)` for tap offset `shift` on a length-`l` row.
#[inline]
pub(crate) fn tap_range(shift: isize, l: usize) -> (usize, usize) {
    let lo = (-shift).max(0) as usize;
    let hi = (l as isize - shift).clamp(0, l as isize) as usize;
    (lo.min(hi), hi)
}

/// `y[t] += w * x[t + shift]` over the valid range.
#[inline]
pub(crate) fn axpy_shifted<T: Scalar>(y: &mut [T], x: &[T], w: T, shift: isize) {
    let (lo, hi) = tap_range(shift, y.len());
    let xs = &x[(lo as isize + shift) as usize..(hi as isize + shift) as usize];
    for (yv, &xv) in y[lo..hi].iter_mut().zip(xs) {
        *yv += w * xv;
    }
}

/// `Σ_t a[t] * x[t + shift]` over the valid range.
#[inline]
pub(crate) fn dot_shifted<T: Scalar>(a: &[T], x: &[T], shift: isize) -> T {
    let (lo, hi) = tap_range(shift, a.len());
    let xs = &x[(lo as isize + shift) as usize..(hi as isize + shift) as usize];
    a[lo..hi]
        .iter()
        .zip(xs)
        .fold(T::zero(), |s, (&u, &v)| s + u * v)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_shapes() {
        assert_eq!(broadcast_shape("t", &[2, 3], &[3]).unwrap(), vec![2, 3]);
        assert_eq!(broadcast_shape("t", &[4, 1, 3], &[2, 1]).unwrap(), vec![4, 2, 3]);
        assert!(broadcast_shape("t", &[2, 3], &[2]).is_err());
    }

    #[test]
    fn reduce_plan_contiguous_and_scattered() {
        let p = ReducePlan::new(&[2, 3, 4], &[2]).unwrap();
        assert_eq!(p.out_shape, vec![2, 3]);
        let mut hits = vec![0; 6];
        p.visit(|_, o| hits[o] += 1);
        assert_eq!(hits, vec![4; 6]);

        let p = ReducePlan::new(&[2, 3, 4], &[0, 2]).unwrap();
        assert_eq!(p.out_shape, vec![3]);
        let mut hits = vec![0; 3];
        p.visit(|i, o| {
            assert_eq!(o, (i / 4) % 3);
            hits[o] += 1
        });
        assert_eq!(hits, vec![8; 3]);
        assert!(ReducePlan::new(&[2, 3], &[]).is_err());
        assert!(ReducePlan::new(&[2, 3], &[2]).is_err());
    }

    #[test]
    fn shifted_loops_clip_at_edges() {
        let x = [1.0, 2.0, 3.0];
        let mut y = [0.0; 3];
        axpy_shifted(&mut y, &x, 1.0, -1);
        assert_eq!(y, [0.0, 1.0, 2.0]);
        assert_eq!(dot_shifted(&[1.0, 1.0, 1.0], &x, 1), 5.0);
    }
}
