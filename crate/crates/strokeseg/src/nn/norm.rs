//! Instance normalization: per-channel statistics over the spatial dims of
//! a single sample, with learned scale and shift.

use ndarray::{Array1, Array4, Axis};

use super::{ParamView, Scalar};

#[derive(Debug, Clone)]
pub struct InstanceNorm<T> {
    pub gamma: Array1<T>,
    pub beta: Array1<T>,
    pub ggamma: Array1<T>,
    pub gbeta: Array1<T>,
    pub eps: f64,
}

/// Saved statistics for the backward pass.
#[derive(Debug, Clone)]
pub struct NormAux {
    pub mean: Vec<f64>,
    pub inv_std: Vec<f64>,
}

impl<T: Scalar> InstanceNorm<T> {
    pub fn new(channels: usize) -> Self {
        InstanceNorm {
            gamma: Array1::from_elem(channels, T::one()),
            beta: Array1::zeros(channels),
            ggamma: Array1::zeros(channels),
            gbeta: Array1::zeros(channels),
            eps: 1e-5,
        }
    }

    pub fn forward(&self, x: &Array4<T>) -> (Array4<T>, NormAux) {
        let c = x.dim().0;
        let mut y = x.clone();
        let mut aux = NormAux {
            mean: Vec::with_capacity(c),
            inv_std: Vec::with_capacity(c),
        };
        for ch in 0..c {
            let mut view = y.index_axis_mut(Axis(0), ch);
            let n = view.len() as f64;
            let mut sum = 0.0;
            let mut sumsq = 0.0;
            for &v in view.iter() {
                let v = v.as_f64();
                sum += v;
                sumsq += v * v;
            }
            let mean = sum / n;
            let var = (sumsq / n - mean * mean).max(0.0);
            let inv_std = 1.0 / (var + self.eps).sqrt();
            aux.mean.push(mean);
            aux.inv_std.push(inv_std);
            let g = self.gamma[ch].as_f64();
            let b = self.beta[ch].as_f64();
            view.mapv_inplace(|v| T::of_f64((v.as_f64() - mean) * inv_std * g + b));
        }
        (y, aux)
    }

    /// Accumulates ggamma/gbeta and returns the input gradient.
    pub fn backward(&mut self, x: &Array4<T>, aux: &NormAux, gout: &Array4<T>) -> Array4<T> {
        let c = x.dim().0;
        let mut gin = Array4::zeros(x.dim());
        for ch in 0..c {
            let xv = x.index_axis(Axis(0), ch);
            let gv = gout.index_axis(Axis(0), ch);
            let n = xv.len() as f64;
            let mean = aux.mean[ch];
            let istd = aux.inv_std[ch];

            let mut sum_g = 0.0;
            let mut sum_gx = 0.0;
            for (&g, &v) in gv.iter().zip(xv.iter()) {
                let xh = (v.as_f64() - mean) * istd;
                let g = g.as_f64();
                sum_g += g;
                sum_gx += g * xh;
            }
            self.gbeta[ch] += T::of_f64(sum_g);
            self.ggamma[ch] += T::of_f64(sum_gx);

            let gamma = self.gamma[ch].as_f64();
            let mean_g = sum_g / n;
            let mean_gx = sum_gx / n;
            let mut out = gin.index_axis_mut(Axis(0), ch);
            ndarray::Zip::from(&mut out).and(&xv).and(&gv).for_each(|o, &v, &g| {
                let xh = (v.as_f64() - mean) * istd;
                *o = T::of_f64(gamma * istd * (g.as_f64() - mean_g - xh * mean_gx));
            });
        }
        gin
    }

    pub fn zero_grads(&mut self) {
        self.ggamma.fill(T::zero());
        self.gbeta.fill(T::zero());
    }

    pub fn visit<'a>(&'a mut self, prefix: &str, f: &mut impl FnMut(ParamView<'a, T>)) {
        f(ParamView {
            name: format!("{prefix}.gamma"),
            shape: self.gamma.shape().to_vec(),
            value: self.gamma.as_slice_mut().expect("standard layout"),
            grad: self.ggamma.as_slice_mut().expect("standard layout"),
        });
        f(ParamView {
            name: format!("{prefix}.beta"),
            shape: self.beta.shape().to_vec(),
            value: self.beta.as_slice_mut().expect("standard layout"),
            grad: self.gbeta.as_slice_mut().expect("standard layout"),
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn output_has_zero_mean_unit_variance_per_channel() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Array4::from_shape_simple_fn((3, 4, 5, 6), || rng.random_range(-4.0..9.0f64));
        let norm = InstanceNorm::<f64>::new(3);
        let (y, _) = norm.forward(&x);
        for ch in 0..3 {
            let v = y.index_axis(Axis(0), ch);
            let n = v.len() as f64;
            let mean = v.iter().sum::<f64>() / n;
            let var = v.iter().map(|&a| (a - mean).powi(2)).sum::<f64>() / n;
            assert!(mean.abs() < 1e-10);
            assert!((var - 1.0).abs() < 1e-4); // eps slightly shrinks the variance
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Array4::from_shape_simple_fn((2, 3, 4, 5), || rng.random_range(-1.0..1.0f64));
        let mut norm = InstanceNorm::<f64>::new(2);
        for g in norm.gamma.iter_mut() {
            *g = rng.random_range(0.5..1.5);
        }
        for b in norm.beta.iter_mut() {
            *b = rng.random_range(-0.5..0.5);
        }
        let proj = Array4::from_shape_simple_fn(x.dim(), || rng.random_range(-1.0..1.0f64));
        let objective =
            |norm: &InstanceNorm<f64>, x: &Array4<f64>| -> f64 { (&norm.forward(x).0 * &proj).sum() };

        let (_, aux) = norm.forward(&x);
        norm.zero_grads();
        let gin = norm.backward(&x, &aux, &proj);

        let h = 1e-6;
        let mut xp = x.clone();
        for idx in [[0usize, 0, 0, 0], [1, 2, 3, 4], [0, 1, 2, 3]] {
            let orig = xp[idx];
            xp[idx] = orig + h;
            let up = objective(&norm, &xp);
            xp[idx] = orig - h;
            let dn = objective(&norm, &xp);
            xp[idx] = orig;
            let fd = (up - dn) / (2.0 * h);
            assert!(
                (fd - gin[idx]).abs() / fd.abs().max(1.0) < 1e-5,
                "input grad at {idx:?}: fd {fd} vs {}",
                gin[idx]
            );
        }
        for ch in 0..2 {
            let orig = norm.gamma[ch];
            norm.gamma[ch] = orig + h;
            let up = objective(&norm, &x);
            norm.gamma[ch] = orig - h;
            let dn = objective(&norm, &x);
            norm.gamma[ch] = orig;
            let fd = (up - dn) / (2.0 * h);
            assert!((fd - norm.ggamma[ch]).abs() / fd.abs().max(1.0) < 1e-6);

            let orig = norm.beta[ch];
            norm.beta[ch] = orig + h;
            let up = objective(&norm, &x);
            norm.beta[ch] = orig - h;
            let dn = objective(&norm, &x);
            norm.beta[ch] = orig;
            let fd = (up - dn) / (2.0 * h);
            assert!((fd - norm.gbeta[ch]).abs() / fd.abs().max(1.0) < 1e-6);
        }
    }
}
