//! Axis projections and pooling.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{ensure_shape, Result};
use crate::tensor::{Real, Tensor};

/// One of the three spatial dimensions of an `(N, C, H, W, D)` tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SpatialAxis {
    H,
    W,
    D,
}

impl SpatialAxis {
    pub const ALL: [SpatialAxis; 3] = [SpatialAxis::H, SpatialAxis::W, SpatialAxis::D];

    /// Position among the spatial dims (0, 1, 2).
    pub fn spatial_index(self) -> usize {
        match self {
            SpatialAxis::H => 0,
            SpatialAxis::W => 1,
            SpatialAxis::D => 2,
        }
    }

    /// `(outer, extent, inner)` factorization of a 5D shape around this axis.
    fn split(self, shape: &[usize; 5]) -> (usize, usize, usize) {
        let dim = 2 + self.spatial_index();
        let outer: usize = shape[..dim].iter().product();
        let inner: usize = shape[dim + 1..].iter().product();
        (outer, shape[dim], inner)
    }

    /// The 4D shape left after removing this axis.
    pub fn projected_shape(self, shape: &[usize; 5]) -> [usize; 4] {
        let keep: Vec<usize> = (0..5).filter(|&d| d != 2 + self.spatial_index()).collect();
        [shape[keep[0]], shape[keep[1]], shape[keep[2]], shape[keep[3]]]
    }

    /// The 5D shape with this axis kept at extent 1.
    pub fn keepdim_shape(self, shape: &[usize; 5]) -> [usize; 5] {
        let mut s = *shape;
        s[2 + self.spatial_index()] = 1;
        s
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PoolMode {
    Mean,
    Max,
}

impl<T: Real> Tape<T> {
    /// Pools away one spatial axis: `(N, C, H, W, D) -> (N, C, A, B)`.
    /// Max routes its subgradient to the first maximum in scan order.
    pub fn axis_pool(&mut self, x: Var, axis: SpatialAxis, mode: PoolMode) -> Result<Var> {
        let shape = self.value(x).dims5()?;
        let (outer, ext, inner) = axis.split(&shape);
        let src = self.value(x).data();
        let out_shape = axis.projected_shape(&shape);
        let mut out = vec![T::zero(); outer * inner];
        match mode {
            PoolMode::Mean => {
                let inv = T::one() / T::lit(ext as f64);
                for o in 0..outer {
                    for e in 0..ext {
                        let row = &src[(o * ext + e) * inner..(o * ext + e + 1) * inner];
                        for (acc, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                }
                for v in &mut out {
                    *v *= inv;
                }
                let out = Tensor::new(&out_shape, out)?;
                Ok(self.push(out, &[x], move |ins, _, g| {
                    let mut dx = Tensor::zeros(ins[0].shape());
                    let d = dx.data_mut();
                    for o in 0..outer {
                        let gr = &g.data()[o * inner..(o + 1) * inner];
                        for e in 0..ext {
                            let row = &mut d[(o * ext + e) * inner..(o * ext + e + 1) * inner];
                            for (dv, &gv) in row.iter_mut().zip(gr) {
                                *dv = gv * inv;
                            }
                        }
                    }
                    vec![Some(dx)]
                }))
            }
            PoolMode::Max => {
                let mut arg = vec![0usize; outer * inner];
                for o in 0..outer {
                    out[o * inner..(o + 1) * inner]
                        .copy_from_slice(&src[o * ext * inner..(o * ext + 1) * inner]);
                    for e in 1..ext {
                        let row = &src[(o * ext + e) * inner..(o * ext + e + 1) * inner];
                        for i in 0..inner {
                            // strict comparison keeps the first maximum
                            if row[i] > out[o * inner + i] {
                                out[o * inner + i] = row[i];
                                arg[o * inner + i] = e;
                            }
                        }
                    }
                }
                self.note_branches(arg.iter().map(|&e| e as u64));
                let out = Tensor::new(&out_shape, out)?;
                Ok(self.push(out, &[x], move |ins, _, g| {
                    let mut dx = Tensor::zeros(ins[0].shape());
                    let d = dx.data_mut();
                    for o in 0..outer {
                        for i in 0..inner {
                            let e = arg[o * inner + i];
                            d[(o * ext + e) * inner + i] = g.data()[o * inner + i];
                        }
                    }
                    vec![Some(dx)]
                }))
            }
        }
    }

    /// Repeats a projected plane `(N, C, A, B)` `extent` times along `axis`.
    pub fn expand_axis(&mut self, plane: Var, axis: SpatialAxis, extent: usize) -> Result<Var> {
        let [n, c, a, b] = self.value(plane).dims4()?;
        let (keep, full) = match axis {
            SpatialAxis::H => ([n, c, 1, a, b], [n, c, extent, a, b]),
            SpatialAxis::W => ([n, c, a, 1, b], [n, c, a, extent, b]),
            SpatialAxis::D => ([n, c, a, b, 1], [n, c, a, b, extent]),
        };
        let r = self.reshape(plane, &keep)?;
        self.broadcast_to(r, &full)
    }

    /// `H = V ⊙ G`, with the plane `G` broadcast along the axis it was projected from.
    pub fn mul_expand(&mut self, volume: Var, plane: Var, axis: SpatialAxis) -> Result<Var> {
        let vshape = self.value(volume).dims5()?;
        let pshape = self.value(plane).dims4()?;
        ensure_shape!(
            axis.projected_shape(&vshape) == pshape,
            "plane {pshape:?} does not match volume {vshape:?} projected along {axis:?}"
        );
        let keep = axis.keepdim_shape(&vshape);
        let r = self.reshape(plane, &keep)?;
        self.mul_broadcast(volume, r)
    }

    /// 2x2x2 average pooling with stride 2.
    pub fn avg_pool3d(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w, d] = self.value(x).dims5()?;
        ensure_shape!(
            h % 2 == 0 && w % 2 == 0 && d % 2 == 0,
            "avg_pool3d needs even extents, got {:?}",
            [h, w, d]
        );
        let (oh, ow, od) = (h / 2, w / 2, d / 2);
        let src = self.value(x).data();
        let eighth = T::lit(0.125);
        let mut out = vec![T::zero(); n * c * oh * ow * od];
        for p in 0..n * c {
            let sp = &src[p * h * w * d..(p + 1) * h * w * d];
            let op = &mut out[p * oh * ow * od..(p + 1) * oh * ow * od];
            for i in 0..oh {
                for j in 0..ow {
                    for k in 0..od {
                        let mut s = T::zero();
                        for (a, b, e) in OCTANT {
                            s += sp[((2 * i + a) * w + 2 * j + b) * d + 2 * k + e];
                        }
                        op[(i * ow + j) * od + k] = s * eighth;
                    }
                }
            }
        }
        let out = Tensor::new(&[n, c, oh, ow, od], out)?;
        Ok(self.push(out, &[x], move |ins, _, g| {
            let mut dx = Tensor::zeros(ins[0].shape());
            let dd = dx.data_mut();
            for p in 0..n * c {
                let gp = &g.data()[p * oh * ow * od..(p + 1) * oh * ow * od];
                let dp = &mut dd[p * h * w * d..(p + 1) * h * w * d];
                for i in 0..oh {
                    for j in 0..ow {
                        for k in 0..od {
                            let gv = gp[(i * ow + j) * od + k] * eighth;
                            for (a, b, e) in OCTANT {
                                dp[((2 * i + a) * w + 2 * j + b) * d + 2 * k + e] = gv;
                            }
                        }
                    }
                }
            }
            vec![Some(dx)]
        }))
    }

    /// Mean over all spatial positions: `(N, C, ...) -> (N, C, 1, 1, 1)`.
    pub fn global_avg_pool3d(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w, d] = self.value(x).dims5()?;
        let vol = h * w * d;
        let inv = T::one() / T::lit(vol as f64);
        let out: Vec<T> = self
            .value(x)
            .data()
            .chunks(vol)
            .map(|p| p.iter().copied().sum::<T>() * inv)
            .collect();
        let out = Tensor::new(&[n, c, 1, 1, 1], out)?;
        Ok(self.push(out, &[x], move |ins, _, g| {
            let mut dx = Tensor::zeros(ins[0].shape());
            for (p, chunk) in dx.data_mut().chunks_mut(vol).enumerate() {
                chunk.fill(g.data()[p] * inv);
            }
            vec![Some(dx)]
        }))
    }
}

const OCTANT: [(usize, usize, usize); 8] = [
    (0, 0, 0),
    (0, 0, 1),
    (0, 1, 0),
    (0, 1, 1),
    (1, 0, 0),
    (1, 0, 1),
    (1, 1, 0),
    (1, 1, 1),
];

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn pooled(x: &Tensor<f64>, axis: SpatialAxis, mode: PoolMode) -> Tensor<f64> {
        let mut tape = Tape::new();
        let v = tape.constant(x.clone());
        let y = tape.axis_pool(v, axis, mode).unwrap();
        tape.value(y).clone()
    }

    #[test]
    fn constant_volume_projects_to_constant_plane() {
        let x = Tensor::full(&[1, 2, 3, 4, 5], 2.5);
        for axis in SpatialAxis::ALL {
            for mode in [PoolMode::Mean, PoolMode::Max] {
                let p = pooled(&x, axis, mode);
                assert!(p.data().iter().all(|&v| (v - 2.5).abs() < 1e-15));
            }
        }
        assert_eq!(pooled(&x, SpatialAxis::H, PoolMode::Mean).shape(), &[1, 2, 4, 5]);
        assert_eq!(pooled(&x, SpatialAxis::W, PoolMode::Mean).shape(), &[1, 2, 3, 5]);
        assert_eq!(pooled(&x, SpatialAxis::D, PoolMode::Max).shape(), &[1, 2, 3, 4]);
    }

    #[test]
    fn matches_loop_oracle() {
        let mut r = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::<f64>::uniform(&[1, 1, 2, 2, 2], -1.0, 1.0, &mut r);
        for axis in SpatialAxis::ALL {
            let mean = pooled(&x, axis, PoolMode::Mean);
            let max = pooled(&x, axis, PoolMode::Max);
            for a in 0..2 {
                for b in 0..2 {
                    let vals: Vec<f64> = (0..2)
                        .map(|e| match axis {
                            SpatialAxis::H => x.at(&[0, 0, e, a, b]),
                            SpatialAxis::W => x.at(&[0, 0, a, e, b]),
                            SpatialAxis::D => x.at(&[0, 0, a, b, e]),
                        })
                        .collect();
                    let m = (vals[0] + vals[1]) / 2.0;
                    assert!((mean.at(&[0, 0, a, b]) - m).abs() < 1e-15);
                    assert_eq!(max.at(&[0, 0, a, b]), vals[0].max(vals[1]));
                }
            }
        }
    }

    #[test]
    fn max_ties_route_to_first_index() {
        let mut tape = Tape::<f64>::new();
        let x = tape.variable(Tensor::full(&[1, 1, 3, 1, 1], 1.0));
        let y = tape.axis_pool(x, SpatialAxis::H, PoolMode::Max).unwrap();
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn mean_projection_is_linear() {
        let mut r = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::<f64>::uniform(&[1, 2, 3, 3, 3], -2.0, 2.0, &mut r);
        for axis in SpatialAxis::ALL {
            let a = pooled(&x.scale(3.0), axis, PoolMode::Mean);
            let b = pooled(&x, axis, PoolMode::Mean).scale(3.0);
            assert!(a.data().iter().zip(b.data()).all(|(p, q)| (p - q).abs() < 1e-12));
        }
    }

    #[test]
    fn avg_pool_values_and_shapes() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_fn(&[1, 1, 2, 2, 2], |i| i as f64));
        let y = tape.avg_pool3d(x).unwrap();
        assert_eq!(tape.value(y).data(), &[3.5]);

        let c = tape.constant(Tensor::full(&[1, 3, 8, 8, 8], -4.0));
        let y = tape.avg_pool3d(c).unwrap();
        assert_eq!(tape.shape(y), &[1, 3, 4, 4, 4]);
        assert!(tape.value(y).data().iter().all(|&v| v == -4.0));

        let odd = tape.constant(Tensor::zeros(&[1, 1, 3, 2, 2]));
        assert!(tape.avg_pool3d(odd).is_err());
    }

    #[test]
    fn expand_broadcasts_along_removed_axis() {
        let mut tape = Tape::<f64>::new();
        let v = tape.constant(Tensor::from_fn(&[1, 1, 2, 3, 4], |i| i as f64));
        for axis in SpatialAxis::ALL {
            let p = tape.axis_pool(v, axis, PoolMode::Mean).unwrap();
            let h = tape.mul_expand(v, p, axis).unwrap();
            let (vv, pv, hv) = (tape.value(v), tape.value(p), tape.value(h));
            for i in 0..2 {
                for j in 0..3 {
                    for k in 0..4 {
                        let pidx = match axis {
                            SpatialAxis::H => [0, 0, j, k],
                            SpatialAxis::W => [0, 0, i, k],
                            SpatialAxis::D => [0, 0, i, j],
                        };
                        let want = vv.at(&[0, 0, i, j, k]) * pv.at(&pidx);
                        assert_eq!(hv.at(&[0, 0, i, j, k]), want);
                    }
                }
            }
        }
    }
}
