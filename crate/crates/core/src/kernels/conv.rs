//! Direct (cross-correlation) convolution kernels and their tape ops.
//!
//! All convolutions run through one 3D core. A 2D convolution over
//! `(N, C, A, B)` is the 3D core on `(N, C, 1, A, B)` with a unit kernel
//! along the leading spatial axis. Transposed convolution is the adjoint of
//! the forward core: its forward pass is the core's data-gradient and vice
//! versa.

use std::ops::Range;

use crate::autodiff::{Tape, Var};
use crate::error::{ensure_shape, Result};
use crate::par;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec<const D: usize> {
    pub stride: [usize; D],
    pub padding: [usize; D],
    pub groups: usize,
}

impl<const D: usize> ConvSpec<D> {
    pub fn new(stride: usize, padding: usize, groups: usize) -> Self {
        Self { stride: [stride; D], padding: [padding; D], groups }
    }

    /// Unit stride, no padding, one group.
    pub fn pointwise() -> Self {
        Self::new(1, 0, 1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TransposeSpec<const D: usize> {
    pub stride: [usize; D],
    pub padding: [usize; D],
    pub output_padding: [usize; D],
    pub groups: usize,
}

impl<const D: usize> TransposeSpec<D> {
    pub fn new(stride: usize, padding: usize, output_padding: usize, groups: usize) -> Self {
        Self { stride: [stride; D], padding: [padding; D], output_padding: [output_padding; D], groups }
    }

    /// Kernel 3, stride 2, padding 1, output padding 1: doubles every extent.
    pub fn upsample2(groups: usize) -> Self {
        Self { stride: [2; D], padding: [1; D], output_padding: [1; D], groups }
    }
}

/// Geometry of a forward convolution from x-space to y-space.
#[derive(Clone, Copy, Debug)]
struct Geom {
    n: usize,
    cin: usize,
    cout: usize,
    groups: usize,
    isp: [usize; 3],
    osp: [usize; 3],
    k: [usize; 3],
    stride: [usize; 3],
    pad: [usize; 3],
}

impl Geom {
    fn ivol(&self) -> usize {
        self.isp.iter().product()
    }
    fn ovol(&self) -> usize {
        self.osp.iter().product()
    }
    fn kvol(&self) -> usize {
        self.k.iter().product()
    }
    fn cin_g(&self) -> usize {
        self.cin / self.groups
    }
    fn cout_g(&self) -> usize {
        self.cout / self.groups
    }
    fn pointwise(&self) -> bool {
        self.k == [1; 3] && self.stride == [1; 3] && self.pad == [0; 3]
    }

    /// Visits every contiguous output row touched by kernel tap `kk`:
    /// `f(out_row_offset, in_row_offset, out_range_along_last_axis, first_in_index)`.
    #[inline]
    fn for_each_row(&self, kk: [usize; 3], mut f: impl FnMut(usize, usize, Range<usize>, usize)) {
        if self.pointwise() {
            f(0, 0, 0..self.ovol(), 0);
            return;
        }
        let r0 = valid_range(kk[0], self.isp[0], self.osp[0], self.stride[0], self.pad[0]);
        let r1 = valid_range(kk[1], self.isp[1], self.osp[1], self.stride[1], self.pad[1]);
        let r2 = valid_range(kk[2], self.isp[2], self.osp[2], self.stride[2], self.pad[2]);
        if r0.is_empty() || r1.is_empty() || r2.is_empty() {
            return;
        }
        let i2 = r2.start * self.stride[2] + kk[2] - self.pad[2];
        for o0 in r0 {
            let i0 = o0 * self.stride[0] + kk[0] - self.pad[0];
            for o1 in r1.clone() {
                let i1 = o1 * self.stride[1] + kk[1] - self.pad[1];
                let orow = (o0 * self.osp[1] + o1) * self.osp[2];
                let irow = (i0 * self.isp[1] + i1) * self.isp[2];
                f(orow, irow, r2.clone(), i2);
            }
        }
    }

    fn taps(&self) -> impl Iterator<Item = (usize, [usize; 3])> + '_ {
        let k = self.k;
        (0..self.kvol()).map(move |t| (t, [t / (k[1] * k[2]), (t / k[2]) % k[1], t % k[2]]))
    }
}

/// Output positions `o` with `0 <= o * s + k - p < i_ext`.
fn valid_range(k: usize, i_ext: usize, o_ext: usize, s: usize, p: usize) -> Range<usize> {
    let lo = if k >= p { 0 } else { (p - k).div_ceil(s) };
    if i_ext + p < k + 1 {
        return 0..0;
    }
    let hi = ((i_ext - 1 + p - k) / s + 1).min(o_ext);
    lo..hi.max(lo)
}

fn conv_out_extent(i: usize, k: usize, s: usize, p: usize) -> Option<usize> {
    let padded = i + 2 * p;
    (padded >= k && s >= 1).then(|| (padded - k) / s + 1)
}

fn forward_core<T: Real>(x: &[T], w: &[T], g: &Geom) -> Vec<T> {
    let (ivol, ovol, kvol) = (g.ivol(), g.ovol(), g.kvol());
    let (cin_g, cout_g, s2) = (g.cin_g(), g.cout_g(), g.stride[2]);
    let mut out = vec![T::zero(); g.n * g.cout * ovol];
    par::for_each_chunk(&mut out, ovol, |plane, o| {
        let (n, oc) = (plane / g.cout, plane % g.cout);
        let grp = oc / cout_g;
        for icl in 0..cin_g {
            let ic = grp * cin_g + icl;
            let xp = &x[(n * g.cin + ic) * ivol..(n * g.cin + ic + 1) * ivol];
            let wbase = (oc * cin_g + icl) * kvol;
            for (t, kk) in g.taps() {
                let wv = w[wbase + t];
                g.for_each_row(kk, |orow, irow, r2, i2| {
                    let dst = &mut o[orow + r2.start..orow + r2.end];
                    if s2 == 1 {
                        let src = &xp[irow + i2..irow + i2 + dst.len()];
                        for (d, &s) in dst.iter_mut().zip(src) {
                            *d += wv * s;
                        }
                    } else {
                        for (j, d) in dst.iter_mut().enumerate() {
                            *d += wv * xp[irow + i2 + j * s2];
                        }
                    }
                });
            }
        }
    });
    out
}

/// Gradient of the forward core w.r.t. `x`, equivalently the transposed
/// convolution of `dy`.
fn backward_data_core<T: Real>(dy: &[T], w: &[T], g: &Geom) -> Vec<T> {
    let (ivol, ovol, kvol) = (g.ivol(), g.ovol(), g.kvol());
    let (cin_g, cout_g, s2) = (g.cin_g(), g.cout_g(), g.stride[2]);
    let mut dx = vec![T::zero(); g.n * g.cin * ivol];
    par::for_each_chunk(&mut dx, ivol, |plane, d| {
        let (n, ic) = (plane / g.cin, plane % g.cin);
        let (grp, icl) = (ic / cin_g, ic % cin_g);
        for oc in grp * cout_g..(grp + 1) * cout_g {
            let yp = &dy[(n * g.cout + oc) * ovol..(n * g.cout + oc + 1) * ovol];
            let wbase = (oc * cin_g + icl) * kvol;
            for (t, kk) in g.taps() {
                let wv = w[wbase + t];
                g.for_each_row(kk, |orow, irow, r2, i2| {
                    let src = &yp[orow + r2.start..orow + r2.end];
                    if s2 == 1 {
                        let dst = &mut d[irow + i2..irow + i2 + src.len()];
                        for (dd, &s) in dst.iter_mut().zip(src) {
                            *dd += wv * s;
                        }
                    } else {
                        for (j, &s) in src.iter().enumerate() {
                            d[irow + i2 + j * s2] += wv * s;
                        }
                    }
                });
            }
        }
    });
    dx
}

/// Gradient of the forward core w.r.t. its weight.
fn backward_weight_core<T: Real>(x: &[T], dy: &[T], g: &Geom) -> Vec<T> {
    let (ivol, ovol, kvol) = (g.ivol(), g.ovol(), g.kvol());
    let (cin_g, cout_g, s2) = (g.cin_g(), g.cout_g(), g.stride[2]);
    let mut dw = vec![T::zero(); g.cout * cin_g * kvol];
    par::for_each_chunk(&mut dw, cin_g * kvol, |oc, dws| {
        let grp = oc / cout_g;
        for n in 0..g.n {
            let yp = &dy[(n * g.cout + oc) * ovol..(n * g.cout + oc + 1) * ovol];
            for icl in 0..cin_g {
                let ic = grp * cin_g + icl;
                let xp = &x[(n * g.cin + ic) * ivol..(n * g.cin + ic + 1) * ivol];
                for (t, kk) in g.taps() {
                    let mut acc = T::zero();
                    g.for_each_row(kk, |orow, irow, r2, i2| {
                        let src = &yp[orow + r2.start..orow + r2.end];
                        if s2 == 1 {
                            let xs = &xp[irow + i2..irow + i2 + src.len()];
                            for (&a, &b) in src.iter().zip(xs) {
                                acc += a * b;
                            }
                        } else {
                            for (j, &a) in src.iter().enumerate() {
                                acc += a * xp[irow + i2 + j * s2];
                            }
                        }
                    });
                    dws[icl * kvol + t] += acc;
                }
            }
        }
    });
    dw
}

fn add_bias<T: Real>(out: &mut [T], b: &[T], plane: usize) {
    let c = b.len();
    par::for_each_chunk(out, plane, |p, o| {
        let bv = b[p % c];
        for v in o {
            *v += bv;
        }
    });
}

fn bias_grad<T: Real>(g: &Tensor<T>, channels: usize) -> Tensor<T> {
    let shape = g.shape();
    let plane: usize = shape[2..].iter().product();
    let mut db = vec![T::zero(); channels];
    for (p, chunk) in g.data().chunks(plane).enumerate() {
        db[p % channels] += chunk.iter().copied().sum::<T>();
    }
    Tensor::new(&[channels], db).unwrap()
}

fn check_weight<T: Real>(
    tape: &Tape<T>,
    b: Option<Var>,
    bias_len: usize,
) -> Result<()> {
    if let Some(b) = b {
        ensure_shape!(
            tape.shape(b) == [bias_len],
            "bias shape {:?} does not match {bias_len} output channels",
            tape.shape(b)
        );
    }
    Ok(())
}

impl<T: Real> Tape<T> {
    /// 3D cross-correlation. `w` has shape `(C_out, C_in / groups, kH, kW, kD)`.
    pub fn conv3d(&mut self, x: Var, w: Var, b: Option<Var>, spec: ConvSpec<3>) -> Result<Var> {
        let [n, cin, h, wd, d] = self.value(x).dims5()?;
        let [cout, cin_g, k0, k1, k2] = self.value(w).dims5()?;
        let groups = spec.groups;
        ensure_shape!(groups >= 1, "groups must be >= 1");
        ensure_shape!(
            cin % groups == 0 && cout % groups == 0,
            "channels ({cin} in, {cout} out) not divisible by groups {groups}"
        );
        ensure_shape!(
            cin_g * groups == cin,
            "weight expects {} input channels, input has {cin}",
            cin_g * groups
        );
        ensure_shape!(spec.stride.iter().all(|&s| s >= 1), "stride must be >= 1");
        check_weight(self, b, cout)?;
        let isp = [h, wd, d];
        let k = [k0, k1, k2];
        let mut osp = [0; 3];
        for a in 0..3 {
            osp[a] = conv_out_extent(isp[a], k[a], spec.stride[a], spec.padding[a]).ok_or_else(
                || {
                    crate::error::Error::shape(format!(
                        "kernel {k:?} larger than padded input {isp:?}"
                    ))
                },
            )?;
        }
        let geom =
            Geom { n, cin, cout, groups, isp, osp, k, stride: spec.stride, pad: spec.padding };
        let mut out = forward_core(self.value(x).data(), self.value(w).data(), &geom);
        if let Some(b) = b {
            add_bias(&mut out, self.value(b).data(), geom.ovol());
        }
        let out = Tensor::new(&[n, cout, osp[0], osp[1], osp[2]], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(out, &inputs, move |ins, _, g| {
            let dx = backward_data_core(g.data(), ins[1].data(), &geom);
            let dw = backward_weight_core(ins[0].data(), g.data(), &geom);
            let mut grads = vec![
                Some(Tensor::new(ins[0].shape(), dx).unwrap()),
                Some(Tensor::new(ins[1].shape(), dw).unwrap()),
            ];
            if ins.len() == 3 {
                grads.push(Some(bias_grad(g, geom.cout)));
            }
            grads
        }))
    }

    /// 3D transposed convolution. `w` has shape `(C_in, C_out / groups, kH, kW, kD)`;
    /// output extent is `(i - 1) * stride - 2 * padding + k + output_padding`.
    pub fn conv_transpose3d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        spec: TransposeSpec<3>,
    ) -> Result<Var> {
        let [n, cin, h, wd, d] = self.value(x).dims5()?;
        let [wc_in, cout_g, k0, k1, k2] = self.value(w).dims5()?;
        let groups = spec.groups;
        ensure_shape!(groups >= 1, "groups must be >= 1");
        ensure_shape!(
            wc_in == cin && cin % groups == 0,
            "transpose weight expects {wc_in} input channels (groups {groups}), input has {cin}"
        );
        ensure_shape!(spec.stride.iter().all(|&s| s >= 1), "stride must be >= 1");
        for a in 0..3 {
            ensure_shape!(
                spec.output_padding[a] < spec.stride[a],
                "output_padding {:?} must be smaller than stride {:?}",
                spec.output_padding,
                spec.stride
            );
        }
        let cout = cout_g * groups;
        check_weight(self, b, cout)?;
        let ysp = [h, wd, d];
        let k = [k0, k1, k2];
        let mut xsp = [0; 3];
        for a in 0..3 {
            let full = (ysp[a] - 1) * spec.stride[a] + k[a] + spec.output_padding[a];
            ensure_shape!(
                full > 2 * spec.padding[a],
                "transpose conv output extent would be non-positive along axis {a}"
            );
            xsp[a] = full - 2 * spec.padding[a];
        }
        // Forward geometry of the adjoint convolution: xsp -> ysp.
        let geom = Geom {
            n,
            cin: cout,
            cout: cin,
            groups,
            isp: xsp,
            osp: ysp,
            k,
            stride: spec.stride,
            pad: spec.padding,
        };
        let mut out = backward_data_core(self.value(x).data(), self.value(w).data(), &geom);
        if let Some(b) = b {
            add_bias(&mut out, self.value(b).data(), geom.ivol());
        }
        let out = Tensor::new(&[n, cout, xsp[0], xsp[1], xsp[2]], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(out, &inputs, move |ins, _, g| {
            let dx = forward_core(g.data(), ins[1].data(), &geom);
            let dw = backward_weight_core(g.data(), ins[0].data(), &geom);
            let mut grads = vec![
                Some(Tensor::new(ins[0].shape(), dx).unwrap()),
                Some(Tensor::new(ins[1].shape(), dw).unwrap()),
            ];
            if ins.len() == 3 {
                grads.push(Some(bias_grad(g, cout)));
            }
            grads
        }))
    }

    /// 2D cross-correlation over `(N, C, A, B)`; `w` is `(C_out, C_in / groups, kA, kB)`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: ConvSpec<2>) -> Result<Var> {
        let [n, c, a, bb] = self.value(x).dims4()?;
        let [o, i, ka, kb] = self.value(w).dims4()?;
        let x5 = self.reshape(x, &[n, c, 1, a, bb])?;
        let w5 = self.reshape(w, &[o, i, 1, ka, kb])?;
        let spec3 = ConvSpec {
            stride: [1, spec.stride[0], spec.stride[1]],
            padding: [0, spec.padding[0], spec.padding[1]],
            groups: spec.groups,
        };
        let y = self.conv3d(x5, w5, b, spec3)?;
        let [_, co, _, ya, yb] = self.value(y).dims5()?;
        self.reshape(y, &[n, co, ya, yb])
    }

    /// 2D transposed convolution; `w` is `(C_in, C_out / groups, kA, kB)`.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        spec: TransposeSpec<2>,
    ) -> Result<Var> {
        let [n, c, a, bb] = self.value(x).dims4()?;
        let [i, o, ka, kb] = self.value(w).dims4()?;
        let x5 = self.reshape(x, &[n, c, 1, a, bb])?;
        let w5 = self.reshape(w, &[i, o, 1, ka, kb])?;
        let spec3 = TransposeSpec {
            stride: [1, spec.stride[0], spec.stride[1]],
            padding: [0, spec.padding[0], spec.padding[1]],
            output_padding: [0, spec.output_padding[0], spec.output_padding[1]],
            groups: spec.groups,
        };
        let y = self.conv_transpose3d(x5, w5, b, spec3)?;
        let [_, co, _, ya, yb] = self.value(y).dims5()?;
        self.reshape(y, &[n, co, ya, yb])
    }
}
