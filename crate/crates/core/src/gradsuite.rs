//! The finite-difference suite behind `apaseg gradcheck`: every tape
//! operator, every block and the training loss, in f64 on extents ≤ 4.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::blocks::{fuse_axes, AxisId, BlockVariant, IdBlock, IeBlock, ProjectionOp, Projection, SkFusion};
use crate::error::Result;
use crate::kernels::{grad_check, ConvSpec, GradCheckReport, PoolMode, SpatialAxis, TransposeSpec};
use crate::losses::{one_hot, total_loss, ClassSet};
use crate::params::{Ctx, ParamStore};
use crate::tensor::Tensor;

/// Maximum relative error accepted by the suite.
pub const SUITE_TOL: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: String,
    pub report: GradCheckReport,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.report.passed()
    }
}

struct Suite {
    rng: ChaCha8Rng,
    out: Vec<CheckResult>,
}

type Op<'a> = dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + 'a;

impl Suite {
    fn uniform(&mut self, shape: &[usize]) -> Tensor<f64> {
        Tensor::uniform(shape, -1.0, 1.0, &mut self.rng)
    }

    /// Checks `f` contracted against a fixed random probe.
    fn op(&mut self, name: impl Into<String>, inputs: Vec<Tensor<f64>>, f: &Op<'_>) -> Result<()> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let y = f(&mut tape, &vars)?;
        let probe = self.uniform(tape.shape(y));
        let report = grad_check(
            |t, v| {
                let y = f(t, v)?;
                t.dot_const(y, &probe)
            },
            &inputs,
            SUITE_TOL,
        )?;
        self.out.push(CheckResult { name: name.into(), report });
        Ok(())
    }

    /// Like [`Suite::op`], with the parameters of `store` appended as inputs.
    fn module(
        &mut self,
        name: impl Into<String>,
        store: &ParamStore<f64>,
        inputs: Vec<Tensor<f64>>,
        f: &dyn Fn(&mut Ctx<'_, f64>, &[Var]) -> Result<Var>,
    ) -> Result<()> {
        let k = inputs.len();
        let mut all = inputs;
        all.extend(store.iter().map(|p| p.value.clone()));
        self.op(name, all, &|tape, vars| Ctx::on_tape(tape, store, &vars[k..], |ctx| f(ctx, &vars[..k])))
    }
}

fn kernels(s: &mut Suite) -> Result<()> {
    let x = s.uniform(&[1, 4, 3, 3, 3]);
    let w = s.uniform(&[4, 2, 3, 3, 3]);
    let b = s.uniform(&[4]);
    s.op("conv3d 3x3x3 pad 1 groups 2", vec![x.clone(), w, b], &|t, v| {
        t.conv3d(v[0], v[1], Some(v[2]), ConvSpec::new(1, 1, 2))
    })?;
    let x4 = s.uniform(&[1, 2, 4, 4, 4]);
    let w = s.uniform(&[3, 2, 2, 2, 2]);
    s.op("conv3d stride 2", vec![x4, w], &|t, v| t.conv3d(v[0], v[1], None, ConvSpec::new(2, 0, 1)))?;
    let p = s.uniform(&[2, 4, 3, 4]);
    let w = s.uniform(&[4, 1, 3, 3]);
    let b = s.uniform(&[4]);
    s.op("conv2d 3x3 pad 1 groups 4", vec![p, w, b], &|t, v| {
        t.conv2d(v[0], v[1], Some(v[2]), ConvSpec::new(1, 1, 4))
    })?;
    let lo = s.uniform(&[1, 4, 2, 2, 2]);
    let w = s.uniform(&[4, 1, 3, 3, 3]);
    let b = s.uniform(&[2]);
    s.op("conv_transpose3d 3x3x3 upsample groups 2", vec![lo.clone(), w, b], &|t, v| {
        t.conv_transpose3d(v[0], v[1], Some(v[2]), TransposeSpec::upsample2(2))
    })?;
    let w = s.uniform(&[4, 2, 2, 2, 2]);
    s.op("conv_transpose3d 2x2x2 stride 2", vec![lo, w], &|t, v| {
        t.conv_transpose3d(v[0], v[1], None, TransposeSpec::new(2, 0, 0, 1))
    })?;
    let plane = s.uniform(&[1, 4, 2, 2]);
    let w = s.uniform(&[4, 1, 3, 3]);
    let b = s.uniform(&[2]);
    s.op("conv_transpose2d 3x3 upsample groups 2", vec![plane, w, b], &|t, v| {
        t.conv_transpose2d(v[0], v[1], Some(v[2]), TransposeSpec::upsample2(2))
    })?;

    s.op("instance_norm", vec![x.clone()], &|t, v| t.instance_norm(v[0]))?;
    s.op("norm_act", vec![x.clone()], &|t, v| t.norm_act(v[0]))?;
    for axis in SpatialAxis::ALL {
        for mode in [PoolMode::Mean, PoolMode::Max] {
            s.op(format!("axis_pool {mode:?} {axis:?}"), vec![x.clone()], &|t, v| t.axis_pool(v[0], axis, mode))?;
        }
        let pl = s.uniform(&[1, 4, 3, 3]);
        s.op(format!("expand_axis {axis:?}"), vec![pl.clone()], &|t, v| t.expand_axis(v[0], axis, 3))?;
        s.op(format!("mul_expand {axis:?}"), vec![x.clone(), pl], &|t, v| t.mul_expand(v[0], v[1], axis))?;
    }
    let x4 = s.uniform(&[1, 2, 4, 4, 2]);
    s.op("avg_pool3d", vec![x4.clone()], &|t, v| t.avg_pool3d(v[0]))?;
    s.op("global_avg_pool3d", vec![x4], &|t, v| t.global_avg_pool3d(v[0]))?;
    Ok(())
}

fn elementwise(s: &mut Suite) -> Result<()> {
    let a = s.uniform(&[2, 3, 2, 2]);
    let b = s.uniform(&[2, 3, 2, 2]);
    let pos = a.map(|v| v.abs() + 0.5);
    s.op("add/sub/mul", vec![a.clone(), b.clone()], &|t, v| {
        let s = t.add(v[0], v[1])?;
        let d = t.sub(v[0], v[1])?;
        t.mul(s, d)
    })?;
    s.op("div", vec![b.clone(), pos.clone()], &|t, v| t.div(v[0], v[1]))?;
    s.op("log_clamped", vec![pos], &|t, v| Ok(t.log_clamped(v[0], 1e-12)))?;
    s.op("softmax dim 1", vec![a.clone()], &|t, v| t.softmax(v[0], 1))?;
    s.op("sum_keep dim 1", vec![a.clone()], &|t, v| t.sum_keep(v[0], 1))?;
    s.op("concat/narrow", vec![a.clone(), b], &|t, v| {
        let c = t.concat(&[v[0], v[1]], 1)?;
        t.narrow(c, 1, 2, 3)
    })?;
    let col = s.uniform(&[2, 3, 1, 1]);
    s.op("mul_broadcast", vec![a.clone(), col], &|t, v| t.mul_broadcast(v[0], v[1]))?;
    let w3 = s.uniform(&[3]);
    s.op("scale_by_element", vec![a, w3], &|t, v| t.scale_by_element(v[0], v[1], 2))?;
    Ok(())
}

fn blocks(s: &mut Suite) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    for op in ProjectionOp::ALL {
        for axis in AxisId::ALL {
            let mut store = ParamStore::new();
            let p = Projection::new(&mut store, "proj", op, 4, Some(3), &mut rng)?;
            let x = s.uniform(&[1, 4, 3, 3, 3]);
            s.module(format!("projection {op:?} {}", axis.name()), &store, vec![x], &|ctx, v| {
                p.forward(ctx, v[0], axis)
            })?;
        }
    }

    let mut store = ParamStore::new();
    let sk = SkFusion::new(&mut store, "sk", 4, &mut rng)?;
    let (h, x) = (s.uniform(&[2, 4, 2, 2, 2]), s.uniform(&[2, 4, 2, 2, 2]));
    s.module("selective-kernel fusion", &store, vec![h, x], &|ctx, v| sk.forward(ctx, v[0], v[1]))?;

    let br: Vec<Tensor<f64>> = (0..3).map(|_| s.uniform(&[1, 2, 2, 2, 2])).collect();
    let logits = s.uniform(&[3]);
    s.op("axis fusion", vec![br[0].clone(), br[1].clone(), br[2].clone(), logits], &|t, v| {
        fuse_axes(t, [v[0], v[1], v[2]], v[3])
    })?;

    for variant in BlockVariant::ALL {
        for axis in AxisId::ALL {
            let mut store = ParamStore::new();
            let b = IeBlock::new(&mut store, "ie", axis, 4, variant, ProjectionOp::AvgPlusMax, Some(3), &mut rng)?;
            let x = s.uniform(&[1, 4, 3, 3, 3]);
            s.module(format!("IE block {variant:?} {}", axis.name()), &store, vec![x], &|ctx, v| {
                Ok(b.forward(ctx, v[0])?.0)
            })?;

            let mut store = ParamStore::new();
            let b = IdBlock::new(&mut store, "id", axis, 4, variant, ProjectionOp::AvgPlusMax, Some(4), &mut rng)?;
            let lo = s.uniform(&[1, 8, 2, 2, 2]);
            let hi = s.uniform(&[1, 4, 4, 4, 4]);
            s.module(format!("ID block {variant:?} {}", axis.name()), &store, vec![lo, hi], &|ctx, v| {
                Ok(b.forward(ctx, v[0], v[1])?.0)
            })?;
        }
    }
    let mut store = ParamStore::new();
    let b = IeBlock::new(&mut store, "ie", AxisId::Axial, 4, BlockVariant::Apa, ProjectionOp::DepthwiseConv, Some(3), &mut rng)?;
    let x = s.uniform(&[1, 4, 3, 3, 3]);
    s.module("IE block Apa axial DepthwiseConv", &store, vec![x], &|ctx, v| Ok(b.forward(ctx, v[0])?.0))?;
    Ok(())
}

fn loss(s: &mut Suite) -> Result<()> {
    let logits = Tensor::uniform(&[2, 3, 2, 2, 2], -2.0, 2.0, &mut s.rng);
    let labels: Vec<u8> = (0..16).map(|i| ((i * 7) % 3) as u8).collect();
    let y = one_hot::<f64>(&labels, 2, [2, 2, 2], 3)?;
    for set in [ClassSet::Foreground, ClassSet::All] {
        let report = grad_check(|t, v| Ok(total_loss(t, v[0], &y, &set)?.total), std::slice::from_ref(&logits), SUITE_TOL)?;
        s.out.push(CheckResult { name: format!("total loss ({set:?} Dice)"), report });
    }
    Ok(())
}

/// Runs every check. Errors are structural (bad shapes); numerical
/// failures are reported through each [`CheckResult`].
pub fn run_suite() -> Result<Vec<CheckResult>> {
    let mut s = Suite { rng: ChaCha8Rng::seed_from_u64(2024), out: Vec::new() };
    kernels(&mut s)?;
    elementwise(&mut s)?;
    blocks(&mut s)?;
    loss(&mut s)?;
    Ok(s.out)
}
