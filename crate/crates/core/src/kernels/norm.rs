//! The block-internal normalization activation: instance norm then ReLU.

use crate::autodiff::{Tape, Var};
use crate::error::{ensure_shape, Result};
use crate::tensor::{Real, Tensor};

pub const NORM_EPS: f64 = 1e-5;

impl<T: Real> Tape<T> {
    /// Normalizes every `(sample, channel)` slice to zero mean and unit
    /// (biased) variance. Slices with a single element pass through
    /// unchanged, since they carry no spread to normalize.
    pub fn instance_norm(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        ensure_shape!(shape.len() >= 3, "instance_norm needs (N, C, spatial..), got {shape:?}");
        let slice: usize = shape[2..].iter().product();
        if slice == 1 {
            return Ok(x);
        }
        let eps = T::lit(NORM_EPS);
        let m = T::lit(slice as f64);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); src.len()];
        let mut inv_std = Vec::with_capacity(src.len() / slice);
        for (xs, ys) in src.chunks(slice).zip(out.chunks_mut(slice)) {
            let mean = xs.iter().copied().sum::<T>() / m;
            let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / m;
            let is = T::one() / (var + eps).sqrt();
            for (y, &v) in ys.iter_mut().zip(xs) {
                *y = (v - mean) * is;
            }
            inv_std.push(is);
        }
        let out = Tensor::new(&shape, out)?;
        Ok(self.push(out, &[x], move |_, y, g| {
            let mut dx = Tensor::zeros(y.shape());
            for (((ys, gs), ds), &is) in y
                .data()
                .chunks(slice)
                .zip(g.data().chunks(slice))
                .zip(dx.data_mut().chunks_mut(slice))
                .zip(&inv_std)
            {
                let g_mean = gs.iter().copied().sum::<T>() / m;
                let gy_mean = gs.iter().zip(ys).map(|(&a, &b)| a * b).sum::<T>() / m;
                for ((d, &gv), &yv) in ds.iter_mut().zip(gs).zip(ys) {
                    *d = is * (gv - g_mean - yv * gy_mean);
                }
            }
            vec![Some(dx)]
        }))
    }

    /// `h(x)`: instance normalization followed by rectification.
    pub fn norm_act(&mut self, x: Var) -> Result<Var> {
        let n = self.instance_norm(x)?;
        Ok(self.relu(n))
    }
}
