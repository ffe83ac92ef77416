//! Direct 3D convolution for kernel sizes 1 and 3, strides 1 and 2, with
//! "same" padding for kernel 3. Forward, input-gradient and weight-gradient
//! passes all parallelize over slabs of the array they write, so every
//! output element is accumulated sequentially by exactly one task and the
//! result does not depend on thread count.

use ndarray::{Array1, Array4, Array5, Axis};
use ndarray::parallel::prelude::*;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{ParamView, Scalar};

#[derive(Debug, Clone)]
pub struct Conv3d<T> {
    pub weight: Array5<T>, // (cout, cin, k, k, k)
    /// Absent inside residual blocks, where the next norm's shift makes a
    /// bias redundant (its gradient would be identically zero).
    pub bias: Option<Array1<T>>,
    pub gweight: Array5<T>,
    pub gbias: Option<Array1<T>>,
    pub stride: usize,
    pub kernel: usize,
}

impl<T: Scalar> Conv3d<T> {
    /// He fan-in initialization for the weights, zero bias.
    pub fn new(cin: usize, cout: usize, kernel: usize, stride: usize, rng: &mut impl Rng) -> Self {
        let mut conv = Self::new_without_bias(cin, cout, kernel, stride, rng);
        conv.bias = Some(Array1::zeros(cout));
        conv.gbias = Some(Array1::zeros(cout));
        conv
    }

    pub fn new_without_bias(
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(kernel == 1 || kernel == 3, "kernel must be 1 or 3");
        assert!(stride == 1 || stride == 2, "stride must be 1 or 2");
        let fan_in = cin * kernel * kernel * kernel;
        let std = (2.0 / fan_in as f64).sqrt();
        let normal = Normal::new(0.0f64, std).expect("positive std");
        let weight = Array5::from_shape_simple_fn((cout, cin, kernel, kernel, kernel), || {
            T::of_f64(normal.sample(rng))
        });
        Conv3d {
            gweight: Array5::zeros(weight.dim()),
            weight,
            bias: None,
            gbias: None,
            stride,
            kernel,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dim().0
    }

    fn padding(&self) -> usize {
        (self.kernel - 1) / 2
    }

    pub fn out_dims(&self, dims: [usize; 3]) -> [usize; 3] {
        let (k, s, p) = (self.kernel, self.stride, self.padding());
        [
            (dims[0] + 2 * p - k) / s + 1,
            (dims[1] + 2 * p - k) / s + 1,
            (dims[2] + 2 * p - k) / s + 1,
        ]
    }

    pub fn forward(&self, x: &Array4<T>) -> Array4<T> {
        let (cin, d0, d1, d2) = x.dim();
        let (cout, cin_w, k, _, _) = self.weight.dim();
        assert_eq!(cin, cin_w, "input channel mismatch");
        let s = self.stride;
        let p = self.padding();
        let [o0, o1, o2] = self.out_dims([d0, d1, d2]);

        let xs = x.as_slice().expect("standard layout");
        let ws = self.weight.as_slice().expect("standard layout");
        let mut out = Array4::zeros((cout, o0, o1, o2));
        out.axis_iter_mut(Axis(1))
            .into_par_iter()
            .enumerate()
            .for_each(|(ob0, mut slab)| {
                for co in 0..cout {
                    let mut plane = slab.index_axis_mut(Axis(0), co);
                    let prow = plane.as_slice_mut().expect("contiguous output plane");
                    prow.fill(self.bias.as_ref().map_or(T::zero(), |b| b[co]));
                    for ci in 0..cin {
                        for kd0 in 0..k {
                            let i0 = match in_index(ob0, s, kd0, p, d0) {
                                Some(i) => i,
                                None => continue,
                            };
                            let xplane = &xs[((ci * d0 + i0) * d1) * d2..((ci * d0 + i0) * d1 + d1) * d2];
                            let wbase = ((co * cin + ci) * k + kd0) * k * k;
                            for ob1 in 0..o1 {
                                let orow = &mut prow[ob1 * o2..(ob1 + 1) * o2];
                                for kd1 in 0..k {
                                    let i1 = match in_index(ob1, s, kd1, p, d1) {
                                        Some(i) => i,
                                        None => continue,
                                    };
                                    let xrow = &xplane[i1 * d2..(i1 + 1) * d2];
                                    for kd2 in 0..k {
                                        let w = ws[wbase + kd1 * k + kd2];
                                        accumulate_row(orow, xrow, w, s, kd2, p, d2);
                                    }
                                }
                            }
                        }
                    }
                }
            });
        out
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(&mut self, x: &Array4<T>, gout: &Array4<T>) -> Array4<T> {
        self.backward_params(x, gout);
        self.backward_input(x.dim(), gout)
    }

    pub fn backward_params(&mut self, x: &Array4<T>, gout: &Array4<T>) {
        let (cin, d0, d1, d2) = x.dim();
        let (cout, _, k, _, _) = self.weight.dim();
        let (gc, o0, o1, o2) = gout.dim();
        assert_eq!(gc, cout);
        let s = self.stride;
        let p = self.padding();
        let xs = x.as_slice().expect("standard layout");
        let gs = gout.as_slice().expect("standard layout");

        if let Some(gbias) = self.gbias.as_mut() {
            let gb: Vec<T> = (0..cout)
                .into_par_iter()
                .map(|co| {
                    let base = co * o0 * o1 * o2;
                    let mut acc = T::zero();
                    for &g in &gs[base..base + o0 * o1 * o2] {
                        acc += g;
                    }
                    acc
                })
                .collect();
            for (b, g) in gbias.iter_mut().zip(gb) {
                *b += g;
            }
        }

        let kk = k * k * k;
        let gw: Vec<Vec<T>> = (0..cout)
            .into_par_iter()
            .map(|co| {
                let mut acc = vec![T::zero(); cin * kk];
                for ob0 in 0..o0 {
                    for kd0 in 0..k {
                        let i0 = match in_index(ob0, s, kd0, p, d0) {
                            Some(i) => i,
                            None => continue,
                        };
                        for ci in 0..cin {
                            let xplane =
                                &xs[((ci * d0 + i0) * d1) * d2..((ci * d0 + i0) * d1 + d1) * d2];
                            for ob1 in 0..o1 {
                                let grow =
                                    &gs[((co * o0 + ob0) * o1 + ob1) * o2..((co * o0 + ob0) * o1 + ob1 + 1) * o2];
                                for kd1 in 0..k {
                                    let i1 = match in_index(ob1, s, kd1, p, d1) {
                                        Some(i) => i,
                                        None => continue,
                                    };
                                    let xrow = &xplane[i1 * d2..(i1 + 1) * d2];
                                    for kd2 in 0..k {
                                        let dot = row_dot(grow, xrow, s, kd2, p, d2);
                                        acc[(ci * k + kd0) * k * k + kd1 * k + kd2] += dot;
                                    }
                                }
                            }
                        }
                    }
                }
                acc
            })
            .collect();
        let gws = self.gweight.as_slice_mut().expect("standard layout");
        for (co, acc) in gw.into_iter().enumerate() {
            for (dst, src) in gws[co * cin * kk..(co + 1) * cin * kk].iter_mut().zip(acc) {
                *dst += src;
            }
        }
    }

    pub fn backward_input(&self, in_dim: (usize, usize, usize, usize), gout: &Array4<T>) -> Array4<T> {
        let (cin, d0, d1, d2) = in_dim;
        let (cout, _, k, _, _) = self.weight.dim();
        let (_, o0, o1, o2) = gout.dim();
        let s = self.stride;
        let p = self.padding();
        let ws = self.weight.as_slice().expect("standard layout");
        let gs = gout.as_slice().expect("standard layout");

        let mut gin = Array4::zeros((cin, d0, d1, d2));
        gin.axis_iter_mut(Axis(1))
            .into_par_iter()
            .enumerate()
            .for_each(|(i0, mut slab)| {
                for kd0 in 0..k {
                    // i0 = ob0*s + kd0 - p  =>  ob0 = (i0 + p - kd0) / s
                    let num = i0 + p;
                    if num < kd0 || (num - kd0) % s != 0 {
                        continue;
                    }
                    let ob0 = (num - kd0) / s;
                    if ob0 >= o0 {
                        continue;
                    }
                    for ci in 0..cin {
                        let mut plane = slab.index_axis_mut(Axis(0), ci);
                        let prow = plane.as_slice_mut().expect("contiguous plane");
                        for co in 0..cout {
                            let wbase = ((co * cin + ci) * k + kd0) * k * k;
                            let gplane =
                                &gs[((co * o0 + ob0) * o1) * o2..((co * o0 + ob0) * o1 + o1) * o2];
                            for ob1 in 0..o1 {
                                let grow = &gplane[ob1 * o2..(ob1 + 1) * o2];
                                for kd1 in 0..k {
                                    let i1 = match in_index(ob1, s, kd1, p, d1) {
                                        Some(i) => i,
                                        None => continue,
                                    };
                                    let irow = &mut prow[i1 * d2..(i1 + 1) * d2];
                                    for kd2 in 0..k {
                                        let w = ws[wbase + kd1 * k + kd2];
                                        scatter_row(irow, grow, w, s, kd2, p, d2);
                                    }
                                }
                            }
                        }
                    }
                }
            });
        gin
    }

    pub fn zero_grads(&mut self) {
        self.gweight.fill(T::zero());
        if let Some(gb) = self.gbias.as_mut() {
            gb.fill(T::zero());
        }
    }

    pub fn visit<'a>(&'a mut self, prefix: &str, f: &mut impl FnMut(ParamView<'a, T>)) {
        f(ParamView {
            name: format!("{prefix}.weight"),
            shape: self.weight.shape().to_vec(),
            value: self.weight.as_slice_mut().expect("standard layout"),
            grad: self.gweight.as_slice_mut().expect("standard layout"),
        });
        if let (Some(bias), Some(gbias)) = (self.bias.as_mut(), self.gbias.as_mut()) {
            f(ParamView {
                name: format!("{prefix}.bias"),
                shape: bias.shape().to_vec(),
                value: bias.as_slice_mut().expect("standard layout"),
                grad: gbias.as_slice_mut().expect("standard layout"),
            });
        }
    }
}

#[inline]
fn in_index(o: usize, s: usize, kd: usize, p: usize, d: usize) -> Option<usize> {
    let i = o * s + kd;
    if i < p {
        return None;
    }
    let i = i - p;
    if i < d {
        Some(i)
    } else {
        None
    }
}

/// orow[o] += w * xrow[o*s + kd - p] over the valid range.
#[inline]
fn accumulate_row<T: Scalar>(orow: &mut [T], xrow: &[T], w: T, s: usize, kd: usize, p: usize, d: usize) {
    let o_len = orow.len();
    if s == 1 {
        // valid o: o + kd - p in [0, d)
        let lo = p.saturating_sub(kd);
        let hi = (d + p - kd).min(o_len);
        if lo >= hi {
            return;
        }
        let xoff = lo + kd - p;
        for (y, &x) in orow[lo..hi].iter_mut().zip(&xrow[xoff..xoff + (hi - lo)]) {
            *y += w * x;
        }
    } else {
        for (o, y) in orow.iter_mut().enumerate() {
            if let Some(i) = in_index(o, s, kd, p, d) {
                *y += w * xrow[i];
            }
        }
        let _ = o_len;
    }
}

/// sum_o grow[o] * xrow[o*s + kd - p] over the valid range.
#[inline]
fn row_dot<T: Scalar>(grow: &[T], xrow: &[T], s: usize, kd: usize, p: usize, d: usize) -> T {
    let mut acc = T::zero();
    if s == 1 {
        let lo = p.saturating_sub(kd);
        let hi = (d + p - kd).min(grow.len());
        if lo >= hi {
            return acc;
        }
        let xoff = lo + kd - p;
        for (&g, &x) in grow[lo..hi].iter().zip(&xrow[xoff..xoff + (hi - lo)]) {
            acc += g * x;
        }
    } else {
        for (o, &g) in grow.iter().enumerate() {
            if let Some(i) = in_index(o, s, kd, p, d) {
                acc += g * xrow[i];
            }
        }
    }
    acc
}

/// irow[o*s + kd - p] += w * grow[o] over the valid range.
#[inline]
fn scatter_row<T: Scalar>(irow: &mut [T], grow: &[T], w: T, s: usize, kd: usize, p: usize, d: usize) {
    if s == 1 {
        let lo = p.saturating_sub(kd);
        let hi = (d + p - kd).min(grow.len());
        if lo >= hi {
            return;
        }
        let xoff = lo + kd - p;
        for (x, &g) in irow[xoff..xoff + (hi - lo)].iter_mut().zip(&grow[lo..hi]) {
            *x += w * g;
        }
    } else {
        for (o, &g) in grow.iter().enumerate() {
            if let Some(i) = in_index(o, s, kd, p, d) {
                irow[i] += w * g;
            }
        }
    }
}
