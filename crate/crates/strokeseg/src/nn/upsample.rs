//! Non-trainable 2x trilinear upsampling. Source coordinates follow the
//! half-pixel convention x_src = (x_out + 0.5) / 2 - 0.5 with border clamp,
//! so the operator is exactly linear and its backward pass is the transpose.

use ndarray::{Array4, Axis};
use ndarray::parallel::prelude::*;

use super::Scalar;

/// Per-output-index interpolation: (lo, hi, weight of hi).
fn axis_table(out_len: usize, in_len: usize) -> Vec<(usize, usize, f64)> {
    (0..out_len)
        .map(|o| {
            let x = (o as f64 + 0.5) / 2.0 - 0.5;
            let xc = x.clamp(0.0, (in_len - 1) as f64);
            let lo = xc.floor() as usize;
            let hi = (lo + 1).min(in_len - 1);
            (lo, hi, xc - lo as f64)
        })
        .collect()
}

pub fn upsample2x<T: Scalar>(x: &Array4<T>) -> Array4<T> {
    let (c, d0, d1, d2) = x.dim();
    let (o0, o1, o2) = (2 * d0, 2 * d1, 2 * d2);
    let t0 = axis_table(o0, d0);
    let t1 = axis_table(o1, d1);
    let t2 = axis_table(o2, d2);
    let xs = x.as_slice().expect("standard layout");

    let mut out = Array4::zeros((c, o0, o1, o2));
    out.axis_iter_mut(Axis(1))
        .into_par_iter()
        .enumerate()
        .for_each(|(ob0, mut slab)| {
            let (i0, j0, w0) = t0[ob0];
            for ch in 0..c {
                let mut plane = slab.index_axis_mut(Axis(0), ch);
                let prow = plane.as_slice_mut().expect("contiguous plane");
                let base_lo = (ch * d0 + i0) * d1 * d2;
                let base_hi = (ch * d0 + j0) * d1 * d2;
                for (ob1, &(i1, j1, w1)) in t1.iter().enumerate() {
                    let orow = &mut prow[ob1 * o2..(ob1 + 1) * o2];
                    for (o, &(i2, j2, w2)) in t2.iter().enumerate() {
                        let f = |base: usize, r: usize, k: usize| xs[base + r * d2 + k].as_f64();
                        let c00 = f(base_lo, i1, i2) * (1.0 - w2) + f(base_lo, i1, j2) * w2;
                        let c01 = f(base_lo, j1, i2) * (1.0 - w2) + f(base_lo, j1, j2) * w2;
                        let c10 = f(base_hi, i1, i2) * (1.0 - w2) + f(base_hi, i1, j2) * w2;
                        let c11 = f(base_hi, j1, i2) * (1.0 - w2) + f(base_hi, j1, j2) * w2;
                        let a = c00 * (1.0 - w1) + c01 * w1;
                        let b = c10 * (1.0 - w1) + c11 * w1;
                        orow[o] = T::of_f64(a * (1.0 - w0) + b * w0);
                    }
                }
            }
        });
    out
}

/// Transpose of `upsample2x`: distributes output gradients back to the
/// source voxels. Gathers per input slab so tasks never share memory.
pub fn upsample2x_backward<T: Scalar>(in_dim: (usize, usize, usize, usize), gout: &Array4<T>) -> Array4<T> {
    let (c, d0, d1, d2) = in_dim;
    let (_, o0, o1, o2) = gout.dim();
    let t0 = axis_table(o0, d0);
    let t1 = axis_table(o1, d1);
    let t2 = axis_table(o2, d2);

    // Reverse maps: input index -> list of (output index, weight).
    let rev = |t: &[(usize, usize, f64)], in_len: usize| {
        let mut r: Vec<Vec<(usize, f64)>> = vec![Vec::new(); in_len];
        for (o, &(lo, hi, w)) in t.iter().enumerate() {
            if lo == hi {
                r[lo].push((o, 1.0));
            } else {
                if 1.0 - w != 0.0 {
                    r[lo].push((o, 1.0 - w));
                }
                if w != 0.0 {
                    r[hi].push((o, w));
                }
            }
        }
        r
    };
    let r0 = rev(&t0, d0);
    let r1 = rev(&t1, d1);
    let r2 = rev(&t2, d2);
    let gs = gout.as_slice().expect("standard layout");

    let mut gin = Array4::zeros(in_dim);
    gin.axis_iter_mut(Axis(1))
        .into_par_iter()
        .enumerate()
        .for_each(|(i0, mut slab)| {
            for ch in 0..c {
                let mut plane = slab.index_axis_mut(Axis(0), ch);
                let prow = plane.as_slice_mut().expect("contiguous plane");
                for &(ob0, w0) in &r0[i0] {
                    let gplane = &gs[((ch * o0 + ob0) * o1) * o2..((ch * o0 + ob0) * o1 + o1) * o2];
                    for (i1, row_map) in r1.iter().enumerate() {
                        let irow = &mut prow[i1 * d2..(i1 + 1) * d2];
                        for &(ob1, w1) in row_map {
                            let grow = &gplane[ob1 * o2..(ob1 + 1) * o2];
                            for (i2, col_map) in r2.iter().enumerate() {
                                let mut acc = 0.0;
                                for &(ob2, w2) in col_map {
                                    acc += grow[ob2].as_f64() * w2;
                                }
                                irow[i2] += T::of_f64(acc * w0 * w1);
                            }
                        }
                    }
                }
            }
        });
    gin
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn doubles_every_spatial_dim() {
        let x = Array4::<f64>::zeros((3, 2, 5, 4));
        assert_eq!(upsample2x(&x).dim(), (3, 4, 10, 8));
    }

    #[test]
    fn constant_input_stays_constant() {
        let x = Array4::from_elem((1, 3, 3, 3), 2.5f64);
        let y = upsample2x(&x);
        for &v in y.iter() {
            assert!((v - 2.5).abs() < 1e-12);
        }
    }

    #[test]
    fn linear_ramp_is_reproduced_in_the_interior() {
        // Values linear in the source coordinate are reproduced exactly
        // wherever no clamping happens.
        let x = Array4::from_shape_fn((1, 8, 1, 1), |(_, i, _, _)| i as f64);
        let y = upsample2x(&x);
        for o in 1..15 {
            let src = (o as f64 + 0.5) / 2.0 - 0.5;
            assert!((y[[0, o, 0, 0]] - src).abs() < 1e-12, "o={o}");
        }
    }

    #[test]
    fn backward_is_the_transpose_of_forward() {
        // <A x, y> == <x, A^T y> for random x, y.
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = Array4::from_shape_simple_fn((2, 3, 4, 5), || rng.random_range(-1.0..1.0f64));
        let y = Array4::from_shape_simple_fn((2, 6, 8, 10), || rng.random_range(-1.0..1.0f64));
        let ax = upsample2x(&x);
        let aty = upsample2x_backward(x.dim(), &y);
        let lhs = (&ax * &y).sum();
        let rhs = (&x * &aty).sum();
        assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
    }
}
