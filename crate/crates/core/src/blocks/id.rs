//! Internal decoder block.

use rand::Rng;

use super::ie::{check_width, AttentionHead, KEY_GROUP_SIZE};
use super::{hybridize, AttentionTrace, AxisId, BlockVariant, Projection, ProjectionOp, SkFusion};
use crate::autodiff::Var;
use crate::error::{ensure_shape, Result};
use crate::kernels::TransposeSpec;
use crate::params::{ConvKind, ConvLayer, Ctx, ParamStore};
use crate::tensor::Real;

/// Decoder block: queries from the high-resolution skip (`C` channels),
/// keys and values from the low-resolution path (`2C` channels, half size).
#[derive(Clone, Debug)]
pub struct IdBlock {
    pub axis: AxisId,
    pub channels: usize,
    pub variant: BlockVariant,
    query_proj: Option<Projection>,
    key_proj: Option<Projection>,
    key_upsample: ConvLayer,
    value_upsample: ConvLayer,
    attention: AttentionHead,
    sk: SkFusion,
}

impl IdBlock {
    /// `channels` is the skip width `C`; `extent` is the skip's length along
    /// `axis` (only depthwise projections need it).
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        axis: AxisId,
        channels: usize,
        variant: BlockVariant,
        op: ProjectionOp,
        extent: Option<usize>,
        rng: &mut R,
    ) -> Result<Self> {
        check_width(channels)?;
        let c = channels;
        let planar = variant.projects();
        let (query_proj, key_proj) = if planar {
            (
                Some(Projection::new(store, &format!("{name}.query_proj"), op, c, extent, rng)?),
                Some(Projection::new(store, &format!("{name}.key_proj"), op, 2 * c, extent.map(|e| e / 2), rng)?),
            )
        } else {
            (None, None)
        };
        let key_groups = 2 * c / KEY_GROUP_SIZE;
        let key_upsample = if planar {
            ConvLayer::new(
                store,
                &format!("{name}.key_upsample"),
                2 * c,
                c,
                &[3, 3],
                ConvKind::Transpose2(TransposeSpec::upsample2(key_groups)),
                rng,
            )?
        } else {
            ConvLayer::new(
                store,
                &format!("{name}.key_upsample"),
                2 * c,
                c,
                &[3, 3, 3],
                ConvKind::Transpose3(TransposeSpec::upsample2(key_groups)),
                rng,
            )?
        };
        let value_upsample = ConvLayer::new(
            store,
            &format!("{name}.value_upsample"),
            2 * c,
            c,
            &[2, 2, 2],
            ConvKind::Transpose3(TransposeSpec::new(2, 0, 0, 1)),
            rng,
        )?;
        let attention = AttentionHead::new(store, name, c, planar, rng)?;
        let sk = SkFusion::new(store, &format!("{name}.sk"), c, rng)?;
        Ok(Self { axis, channels, variant, query_proj, key_proj, key_upsample, value_upsample, attention, sk })
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x_low: Var, x_high: Var) -> Result<(Var, AttentionTrace)> {
        self.forward_variant(ctx, x_low, x_high, self.variant)
    }

    pub fn forward_variant<T: Real>(
        &self,
        ctx: &mut Ctx<'_, T>,
        x_low: Var,
        x_high: Var,
        variant: BlockVariant,
    ) -> Result<(Var, AttentionTrace)> {
        let lo = ctx.tape.value(x_low).dims5()?;
        let hi = ctx.tape.value(x_high).dims5()?;
        let c = self.channels;
        ensure_shape!(
            hi[1] == c && lo[1] == 2 * c,
            "ID block of width {c} needs {}/{c} channels, got {}/{}",
            2 * c,
            lo[1],
            hi[1]
        );
        ensure_shape!(
            lo[0] == hi[0] && (2..5).all(|i| 2 * lo[i] == hi[i]),
            "ID block: low-resolution input {:?} is not half of {:?}",
            lo,
            hi
        );
        ensure_shape!(
            variant.projects() == self.variant.projects(),
            "ID block built as {:?} cannot run as {variant:?}",
            self.variant
        );
        let (keys, queries) = match (&self.key_proj, &self.query_proj) {
            (Some(kp), Some(qp)) => (kp.forward(ctx, x_low, self.axis)?, qp.forward(ctx, x_high, self.axis)?),
            _ => (x_low, x_high),
        };
        let local = self.key_upsample.forward(ctx, keys)?;
        let local = ctx.tape.norm_act(local)?;
        let global = self.attention.forward(ctx, local, queries)?;
        let values = self.value_upsample.forward(ctx, x_low)?;
        let hybrid = hybridize(ctx, values, global, self.axis, variant, self.query_proj.as_ref())?;
        let y = self.sk.forward(ctx, hybrid, x_high)?;
        Ok((y, AttentionTrace { keys, queries, local, global, values, hybrid }))
    }
}
