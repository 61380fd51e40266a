//! Axis projection attention blocks.
//!
//! An internal encoder (IE) block projects a 3D feature map onto one
//! anatomical plane, computes contextual attention on that plane and
//! broadcasts it back onto 3D values. The internal decoder (ID) block does
//! the same with queries from a high-resolution skip and keys/values from
//! the low-resolution decoder path. Three blocks, one per plane, are mixed
//! by learned axis weights.

mod fusion;
mod id;
mod ie;
mod sk;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{ensure_shape, Error, Result};
use crate::kernels::{PoolMode, SpatialAxis};
use crate::params::{Ctx, ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

pub use fusion::{fuse_axes, AxisFusion, FusionMode};
pub use id::IdBlock;
pub use ie::IeBlock;
pub use sk::{sk_fuse, SkFusion, SK_REDUCTION};

/// Anatomical viewing plane, named by the axis it projects away.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AxisId {
    /// Projects out H.
    Sagittal,
    /// Projects out W.
    Axial,
    /// Projects out D.
    Coronal,
}

impl AxisId {
    pub const ALL: [AxisId; 3] = [AxisId::Sagittal, AxisId::Axial, AxisId::Coronal];

    pub fn spatial(self) -> SpatialAxis {
        match self {
            AxisId::Sagittal => SpatialAxis::H,
            AxisId::Axial => SpatialAxis::W,
            AxisId::Coronal => SpatialAxis::D,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            AxisId::Sagittal => "sagittal",
            AxisId::Axial => "axial",
            AxisId::Coronal => "coronal",
        }
    }
}

/// How a 3D map is reduced onto a plane.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ProjectionOp {
    /// Mean plus max along the axis.
    AvgPlusMax,
    Avg,
    Max,
    /// Per-channel learned weights spanning the full axis extent.
    DepthwiseConv,
}

impl ProjectionOp {
    pub const ALL: [ProjectionOp; 4] =
        [ProjectionOp::AvgPlusMax, ProjectionOp::Avg, ProjectionOp::Max, ProjectionOp::DepthwiseConv];
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BlockVariant {
    /// Axis projection attention (projected keys/queries, 3D values).
    #[serde(rename = "APA")]
    Apa,
    /// Keys, queries and values all projected; output broadcast back.
    #[serde(rename = "CoT2D")]
    CoT2d,
    /// Keys, queries and values kept 3D; ignores the projection op.
    #[serde(rename = "CoT3D")]
    CoT3d,
}

impl BlockVariant {
    pub const ALL: [BlockVariant; 3] = [BlockVariant::Apa, BlockVariant::CoT2d, BlockVariant::CoT3d];

    pub fn projects(self) -> bool {
        !matches!(self, BlockVariant::CoT3d)
    }
}

/// Intermediate tensors of one block evaluation.
#[derive(Clone, Copy, Debug)]
pub struct AttentionTrace {
    pub keys: Var,
    pub queries: Var,
    pub local: Var,
    pub global: Var,
    pub values: Var,
    pub hybrid: Var,
}

impl AttentionTrace {
    /// Key elements per (sample, channel): n² for projected planes, n³ for 3D keys.
    pub fn key_elements_per_channel<T: Real>(&self, tape: &Tape<T>) -> usize {
        tape.shape(self.keys)[2..].iter().product()
    }
}

/// Projection of a 3D map onto the plane orthogonal to `axis`.
#[derive(Clone, Debug)]
pub struct Projection {
    pub op: ProjectionOp,
    kernel: Option<ParamId>,
}

impl Projection {
    /// `extent` is the length of the projected axis; it sizes the
    /// depthwise kernel and is ignored by the pooling operators.
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        op: ProjectionOp,
        channels: usize,
        extent: Option<usize>,
        rng: &mut R,
    ) -> Result<Self> {
        let kernel = match op {
            ProjectionOp::DepthwiseConv => {
                let e = extent.ok_or_else(|| {
                    Error::Config(format!(
                        "{name}: DepthwiseConv projection needs the axis extent (set the patch shape)"
                    ))
                })?;
                let bound = (1.0 / e as f64).sqrt();
                Some(store.add(format!("{name}.kernel"), Tensor::uniform(&[channels, e], -bound, bound, rng)))
            }
            _ => None,
        };
        Ok(Self { op, kernel })
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var, axis: AxisId) -> Result<Var> {
        let kernel = self.kernel.map(|k| ctx.param(k));
        project(&mut ctx.tape, x, axis, self.op, kernel)
    }
}

/// Reduces `(N, C, H, W, D)` to the plane orthogonal to `axis`.
/// `kernel` (shape `(C, extent)`) is required for [`ProjectionOp::DepthwiseConv`].
pub fn project<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    axis: AxisId,
    op: ProjectionOp,
    kernel: Option<Var>,
) -> Result<Var> {
    let sa = axis.spatial();
    match op {
        ProjectionOp::AvgPlusMax => {
            let avg = tape.axis_pool(x, sa, PoolMode::Mean)?;
            let max = tape.axis_pool(x, sa, PoolMode::Max)?;
            tape.add(avg, max)
        }
        ProjectionOp::Avg => tape.axis_pool(x, sa, PoolMode::Mean),
        ProjectionOp::Max => tape.axis_pool(x, sa, PoolMode::Max),
        ProjectionOp::DepthwiseConv => {
            let kernel = kernel
                .ok_or_else(|| Error::shape("DepthwiseConv projection called without a kernel"))?;
            let shape = tape.value(x).dims5()?;
            let ext = shape[2 + sa.spatial_index()];
            ensure_shape!(
                tape.shape(kernel) == [shape[1], ext],
                "depthwise kernel {:?} does not span ({}, {ext})",
                tape.shape(kernel),
                shape[1]
            );
            let mut kshape = [1, shape[1], 1, 1, 1];
            kshape[2 + sa.spatial_index()] = ext;
            let k = tape.reshape(kernel, &kshape)?;
            let weighted = tape.mul_broadcast(x, k)?;
            let mean = tape.axis_pool(weighted, sa, PoolMode::Mean)?;
            Ok(tape.scale(mean, T::lit(ext as f64)))
        }
    }
}

/// `H = V ⊙ G` for every variant: plane attention broadcast onto 3D values
/// (APA), plane values times plane attention broadcast back (CoT2D), or a
/// plain elementwise product (CoT3D).
pub(crate) fn hybridize<T: Real>(
    ctx: &mut Ctx<'_, T>,
    values: Var,
    attention: Var,
    axis: AxisId,
    variant: BlockVariant,
    projection: Option<&Projection>,
) -> Result<Var> {
    match variant {
        BlockVariant::Apa => ctx.tape.mul_expand(values, attention, axis.spatial()),
        BlockVariant::CoT2d => {
            let extent = ctx.tape.value(values).dims5()?[2 + axis.spatial().spatial_index()];
            let projection = projection
                .ok_or_else(|| Error::shape("CoT2D hybridization needs a projection"))?;
            let v2 = projection.forward(ctx, values, axis)?;
            let h2 = ctx.tape.mul(v2, attention)?;
            ctx.tape.expand_axis(h2, axis.spatial(), extent)
        }
        BlockVariant::CoT3d => ctx.tape.mul(values, attention),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn run(x: &Tensor<f64>, axis: AxisId, op: ProjectionOp, kernel: Option<&Tensor<f64>>) -> Tensor<f64> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let k = kernel.map(|k| tape.constant(k.clone()));
        let p = project(&mut tape, xv, axis, op, k).unwrap();
        tape.value(p).clone()
    }

    #[test]
    fn axis_binding_is_bijective() {
        let mut seen: Vec<usize> = AxisId::ALL.iter().map(|a| a.spatial().spatial_index()).collect();
        seen.sort();
        assert_eq!(seen, vec![0, 1, 2]);
        assert_eq!(AxisId::Sagittal.spatial(), SpatialAxis::H);
        assert_eq!(AxisId::Axial.spatial(), SpatialAxis::W);
        assert_eq!(AxisId::Coronal.spatial(), SpatialAxis::D);
    }

    #[test]
    fn constant_volume_avg_plus_max_doubles() {
        let x = Tensor::full(&[1, 2, 3, 3, 3], 1.5);
        for axis in AxisId::ALL {
            let p = run(&x, axis, ProjectionOp::AvgPlusMax, None);
            assert!(p.data().iter().all(|&v| v == 3.0));
        }
    }

    #[test]
    fn single_voxel_max_projection_fraction() {
        let n = 8;
        let mut x = Tensor::<f64>::zeros(&[1, 1, n, n, n]);
        let off = x.offset(&[0, 0, 2, 5, 6]);
        x.data_mut()[off] = 1.0;
        for axis in AxisId::ALL {
            let p = run(&x, axis, ProjectionOp::Max, None);
            assert_eq!(p.numel(), n * n);
            assert_eq!(p.data().iter().filter(|&&v| v != 0.0).count(), 1);
        }
    }

    #[test]
    fn sagittal_matches_mean_plus_max_oracle() {
        let mut r = ChaCha8Rng::seed_from_u64(11);
        let x = Tensor::<f64>::uniform(&[1, 1, 2, 2, 2], -1.0, 1.0, &mut r);
        let p = run(&x, AxisId::Sagittal, ProjectionOp::AvgPlusMax, None);
        for w in 0..2 {
            for d in 0..2 {
                let (a, b) = (x.at(&[0, 0, 0, w, d]), x.at(&[0, 0, 1, w, d]));
                let want = (a + b) / 2.0 + a.max(b);
                assert!((p.at(&[0, 0, w, d]) - want).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn depthwise_projection_is_weighted_sum() {
        let mut r = ChaCha8Rng::seed_from_u64(12);
        let x = Tensor::<f64>::uniform(&[2, 2, 3, 2, 4], -1.0, 1.0, &mut r);
        let k = Tensor::<f64>::uniform(&[2, 2], -1.0, 1.0, &mut r);
        let p = run(&x, AxisId::Axial, ProjectionOp::DepthwiseConv, Some(&k));
        assert_eq!(p.shape(), &[2, 2, 3, 4]);
        for n in 0..2 {
            for c in 0..2 {
                for h in 0..3 {
                    for d in 0..4 {
                        let want: f64 = (0..2).map(|w| k.at(&[c, w]) * x.at(&[n, c, h, w, d])).sum();
                        assert!((p.at(&[n, c, h, d]) - want).abs() < 1e-12);
                    }
                }
            }
        }
        let bad = Tensor::<f64>::zeros(&[2, 3]);
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let kv = tape.constant(bad);
        assert!(project(&mut tape, xv, AxisId::Axial, ProjectionOp::DepthwiseConv, Some(kv)).is_err());
    }
}
