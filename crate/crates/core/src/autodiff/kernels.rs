//! Numeric kernels shared by the graph ops.

use super::tensor::strides;
use crate::error::{Error, Result};

/// `c (+)= op(a) · op(b)` for row-major `m×k` and `k×n` operands.
///
/// `a_t` / `b_t` read the stored matrix as transposed, so `a` is stored
/// `k×m` when `a_t` is set.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts above keep every strided access inside the slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Numpy-style broadcast of two shapes.
pub(crate) fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(Error::Shape {
                    op,
                    lhs: a.to_vec(),
                    rhs: b.to_vec(),
                })
            }
        };
    }
    Ok(out)
}

/// How the elements of an input map onto a broadcast output.
pub(crate) enum Broadcast {
    Same,
    /// Input repeats every `period` output elements.
    Suffix(usize),
    /// Explicit input index per output element.
    Map(Vec<usize>),
}

impl Broadcast {
    pub(crate) fn new(out: &[usize], input: &[usize]) -> Self {
        if out == input {
            return Broadcast::Same;
        }
        let in_numel: usize = input.iter().product();
        let trimmed: Vec<usize> = {
            let first = input.iter().position(|&d| d != 1).unwrap_or(input.len());
            input[first..].to_vec()
        };
        if trimmed.len() <= out.len() && out[out.len() - trimmed.len()..] == trimmed[..] {
            return Broadcast::Suffix(in_numel);
        }
        let rank = out.len();
        let in_strides = strides(input);
        let mut eff = vec![0; rank];
        for i in 0..input.len() {
            let j = i + rank - input.len();
            eff[j] = if input[i] == 1 { 0 } else { in_strides[i] };
        }
        let numel: usize = out.iter().product();
        let mut map = Vec::with_capacity(numel);
        let mut idx = vec![0usize; rank];
        let mut off = 0usize;
        for _ in 0..numel {
            map.push(off);
            for d in (0..rank).rev() {
                idx[d] += 1;
                off += eff[d];
                if idx[d] < out[d] {
                    break;
                }
                off -= eff[d] * out[d];
                idx[d] = 0;
            }
        }
        Broadcast::Map(map)
    }

    #[inline]
    pub(crate) fn index(&self, i: usize) -> usize {
        match self {
            Broadcast::Same => i,
            Broadcast::Suffix(p) => i % p,
            Broadcast::Map(m) => m[i],
        }
    }

    /// Sums an output-shaped gradient back onto the input shape.
    pub(crate) fn reduce(&self, grad: &[f64], in_numel: usize) -> Vec<f64> {
        match self {
            Broadcast::Same => grad.to_vec(),
            _ => {
                let mut out = vec![0.0; in_numel];
                for (i, g) in grad.iter().enumerate() {
                    out[self.index(i)] += g;
                }
                out
            }
        }
    }
}

/// Applies an axis permutation, returning the permuted data and shape.
pub(crate) fn permute(data: &[f64], shape: &[usize], axes: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let rank = shape.len();
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let eff: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(data.len());
    if rank == 0 {
        return (data.to_vec(), out_shape);
    }
    // The innermost output axis is copied in a tight loop.
    let inner = out_shape[rank - 1];
    let inner_stride = eff[rank - 1];
    let outer: usize = out_shape[..rank - 1].iter().product();
    let mut idx = vec![0usize; rank - 1];
    let mut off = 0usize;
    for _ in 0..outer {
        if inner_stride == 1 {
            out.extend_from_slice(&data[off..off + inner]);
        } else {
            out.extend((0..inner).map(|j| data[off + j * inner_stride]));
        }
        for d in (0..rank - 1).rev() {
            idx[d] += 1;
            off += eff[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= eff[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    (out, out_shape)
}

/// Splits a shape around `axis` into `(outer, len, inner)` extents.
pub(crate) fn axis_extents(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[inline]
pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

#[inline]
pub(crate) fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_transposes() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        gemm(2, 2, 2, &a, false, &b, false, &mut c, false);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        gemm(2, 2, 2, &a, true, &b, false, &mut c, false);
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        gemm(2, 2, 2, &a, false, &b, true, &mut c, false);
        assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);
    }

    #[test]
    fn broadcast_maps() {
        assert_eq!(broadcast_shape("t", &[2, 1, 3], &[4, 3]).unwrap(), vec![2, 4, 3]);
        assert!(broadcast_shape("t", &[2, 3], &[3, 2]).is_err());
        let b = Broadcast::new(&[2, 3, 2], &[2, 1, 2]);
        let idx: Vec<usize> = (0..12).map(|i| b.index(i)).collect();
        assert_eq!(idx, vec![0, 1, 0, 1, 0, 1, 2, 3, 2, 3, 2, 3]);
        let s = Broadcast::new(&[4, 3], &[1, 3]);
        assert!(matches!(s, Broadcast::Suffix(3)));
    }

    #[test]
    fn permute_swaps_axes() {
        let data: Vec<f64> = (0..6).map(f64::from).collect();
        let (out, shape) = permute(&data, &[2, 3], &[1, 0]);
        assert_eq!(shape, vec![3, 2]);
        assert_eq!(out, vec![0.0, 3.0, 1.0, 4.0, 2.0, 5.0]);
    }
}
