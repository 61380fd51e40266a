//! Internal encoder block.

use rand::Rng;

use super::{hybridize, AttentionTrace, AxisId, BlockVariant, Projection, ProjectionOp, SkFusion};
use crate::autodiff::Var;
use crate::error::{ensure_shape, Error, Result};
use crate::kernels::ConvSpec;
use crate::params::{ConvKind, ConvLayer, Ctx, ParamStore};
use crate::tensor::Real;

/// Channels per group of the key convolution.
pub(crate) const KEY_GROUP_SIZE: usize = 4;

/// The two 1x1 attention convolutions `[L, Q] (2C) -> C -> C`, planar or 3D.
#[derive(Clone, Debug)]
pub(crate) struct AttentionHead {
    a: ConvLayer,
    b: ConvLayer,
}

impl AttentionHead {
    pub(crate) fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        planar: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let (kind, k): (ConvKind, &[usize]) = if planar {
            (ConvKind::Conv2(ConvSpec::pointwise()), &[1, 1])
        } else {
            (ConvKind::Conv3(ConvSpec::pointwise()), &[1, 1, 1])
        };
        Ok(Self {
            a: ConvLayer::new(store, &format!("{name}.attn_a"), 2 * channels, channels, k, kind, rng)?,
            b: ConvLayer::new(store, &format!("{name}.attn_b"), channels, channels, k, kind, rng)?,
        })
    }

    /// `G = conv_b(h(conv_a([L, Q])))`.
    pub(crate) fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, local: Var, queries: Var) -> Result<Var> {
        let cat = ctx.tape.concat(&[local, queries], 1)?;
        let a = self.a.forward(ctx, cat)?;
        let a = ctx.tape.norm_act(a)?;
        self.b.forward(ctx, a)
    }
}

pub(crate) fn check_width(channels: usize) -> Result<()> {
    if channels == 0 || !channels.is_multiple_of(KEY_GROUP_SIZE) {
        return Err(Error::Config(format!(
            "block width {channels} must be a positive multiple of {KEY_GROUP_SIZE}"
        )));
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct IeBlock {
    pub axis: AxisId,
    pub channels: usize,
    pub variant: BlockVariant,
    projection: Option<Projection>,
    value_proj: ConvLayer,
    key_conv: ConvLayer,
    attention: AttentionHead,
    sk: SkFusion,
}

impl IeBlock {
    /// `extent` is the input's length along `axis`; only depthwise
    /// projections need it.
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
        let planar = variant.projects();
        let projection = if planar {
            Some(Projection::new(store, &format!("{name}.proj"), op, channels, extent, rng)?)
        } else {
            None
        };
        let groups = channels / KEY_GROUP_SIZE;
        let value_proj = ConvLayer::new(
            store,
            &format!("{name}.value_proj"),
            channels,
            channels,
            &[1, 1, 1],
            ConvKind::Conv3(ConvSpec::pointwise()),
            rng,
        )?;
        let key_conv = if planar {
            ConvLayer::new(
                store,
                &format!("{name}.key_conv"),
                channels,
                channels,
                &[3, 3],
                ConvKind::Conv2(ConvSpec::new(1, 1, groups)),
                rng,
            )?
        } else {
            ConvLayer::new(
                store,
                &format!("{name}.key_conv"),
                channels,
                channels,
                &[3, 3, 3],
                ConvKind::Conv3(ConvSpec::new(1, 1, groups)),
                rng,
            )?
        };
        let attention = AttentionHead::new(store, name, channels, planar, rng)?;
        let sk = SkFusion::new(store, &format!("{name}.sk"), channels, rng)?;
        Ok(Self { axis, channels, variant, projection, value_proj, key_conv, attention, sk })
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<(Var, AttentionTrace)> {
        self.forward_variant(ctx, x, self.variant)
    }

    /// Runs the block's parameters under `variant`. APA and CoT2D share a
    /// parameter layout and may be swapped; CoT3D needs 3D kernels.
    pub fn forward_variant<T: Real>(
        &self,
        ctx: &mut Ctx<'_, T>,
        x: Var,
        variant: BlockVariant,
    ) -> Result<(Var, AttentionTrace)> {
        let shape = ctx.tape.value(x).dims5()?;
        ensure_shape!(
            shape[1] == self.channels,
            "IE block of width {} got {} channels",
            self.channels,
            shape[1]
        );
        ensure_shape!(
            variant.projects() == self.variant.projects(),
            "IE block built as {:?} cannot run as {variant:?}",
            self.variant
        );
        let keys = match &self.projection {
            Some(p) => p.forward(ctx, x, self.axis)?,
            None => x,
        };
        let queries = keys;
        let local = self.key_conv.forward(ctx, keys)?;
        let local = ctx.tape.norm_act(local)?;
        let global = self.attention.forward(ctx, local, queries)?;
        let values = self.value_proj.forward(ctx, x)?;
        let hybrid = hybridize(ctx, values, global, self.axis, variant, self.projection.as_ref())?;
        let y = self.sk.forward(ctx, hybrid, x)?;
        Ok((y, AttentionTrace { keys, queries, local, global, values, hybrid }))
    }
}
