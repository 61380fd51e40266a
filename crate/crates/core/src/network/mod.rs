//! The U-shaped network: stem, encoder stages of per-plane IE blocks,
//! decoder stages of per-plane ID blocks, and a segmentation head.

mod checkpoint;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::blocks::{AttentionTrace, AxisFusion, AxisId, BlockVariant, FusionMode, IdBlock, IeBlock, ProjectionOp};
use crate::error::{ensure_shape, Error, Result};
use crate::kernels::ConvSpec;
use crate::params::{ConvKind, ConvLayer, Ctx, ParamStore};
use crate::tensor::{Real, Tensor};

pub use checkpoint::{load_checkpoint, load_tensors, save_checkpoint, save_tensors, Manifest, TensorEntry};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct APAUNetConfig {
    pub levels: usize,
    pub base_channels: usize,
    pub in_channels: usize,
    pub num_classes: usize,
    pub variant: BlockVariant,
    pub projection_op: ProjectionOp,
    pub fusion_mode: FusionMode,
    pub seed: u64,
    /// Training patch shape. Required by depthwise projections, whose
    /// kernels span a fixed axis extent.
    pub patch: Option<[usize; 3]>,
}

impl Default for APAUNetConfig {
    fn default() -> Self {
        Self {
            levels: 5,
            base_channels: 32,
            in_channels: 1,
            num_classes: 3,
            variant: BlockVariant::Apa,
            projection_op: ProjectionOp::AvgPlusMax,
            fusion_mode: FusionMode::Learned,
            seed: 0,
            patch: None,
        }
    }
}

impl APAUNetConfig {
    /// Small configuration used for CPU experiments.
    pub fn desk() -> Self {
        Self { levels: 3, base_channels: 8, patch: Some([32; 3]), ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels < 2 {
            return Err(Error::config(format!("levels must be >= 2, got {}", self.levels)));
        }
        if self.base_channels == 0 || !self.base_channels.is_multiple_of(4) {
            return Err(Error::config(format!(
                "base_channels must be a positive multiple of 4, got {}",
                self.base_channels
            )));
        }
        if self.in_channels == 0 || self.num_classes == 0 {
            return Err(Error::config("in_channels and num_classes must be positive"));
        }
        let factor = 1 << (self.levels - 1);
        if let Some(p) = self.patch {
            if p.iter().any(|&e| e == 0 || e % factor != 0) {
                return Err(Error::config(format!(
                    "patch {p:?} must be divisible by 2^(levels-1) = {factor}"
                )));
            }
        } else if self.projection_op == ProjectionOp::DepthwiseConv && self.variant.projects() {
            return Err(Error::config("DepthwiseConv projection requires a patch shape"));
        }
        Ok(())
    }

    pub fn width(&self, level: usize) -> usize {
        self.base_channels << level
    }

    fn extent(&self, level: usize, axis: AxisId) -> Option<usize> {
        self.patch.map(|p| p[axis.spatial().spatial_index()] >> level)
    }
}

#[derive(Clone, Debug)]
pub struct EncoderStage {
    pub blocks: [IeBlock; 3],
    pub fusion: AxisFusion,
    /// 1x1x1 channel-doubling conv ahead of the 2x2x2 average pool; absent
    /// at the deepest level.
    pub down: Option<ConvLayer>,
}

#[derive(Clone, Debug)]
pub struct DecoderStage {
    pub blocks: [IdBlock; 3],
    pub fusion: AxisFusion,
}

/// Network structure. Parameter values live in a separate [`ParamStore`].
#[derive(Clone, Debug)]
pub struct APAUNet {
    pub config: APAUNetConfig,
    pub stem: ConvLayer,
    pub encoder: Vec<EncoderStage>,
    /// Indexed by level, `0..levels-1`.
    pub decoder: Vec<DecoderStage>,
    pub head: ConvLayer,
}

/// Result of one forward pass.
pub struct NetOutput {
    pub logits: Var,
    /// Fused output of every encoder level, before downsampling.
    pub encoder_outputs: Vec<Var>,
    /// Per-plane traces of the encoder blocks, by level.
    pub encoder_traces: Vec<[AttentionTrace; 3]>,
}

/// One row of the learned axis-weight table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AxisWeightRow {
    pub stage: String,
    pub sagittal: f64,
    pub axial: f64,
    pub coronal: f64,
}

fn pointwise(
    store: &mut ParamStore<impl Real>,
    name: &str,
    cin: usize,
    cout: usize,
    rng: &mut ChaCha8Rng,
) -> Result<ConvLayer> {
    ConvLayer::new(store, name, cin, cout, &[1, 1, 1], ConvKind::Conv3(ConvSpec::pointwise()), rng)
}

impl APAUNet {
    /// Builds the network and its parameters, initialized from `config.seed`
    /// in a fixed order.
    pub fn build<T: Real>(config: &APAUNetConfig) -> Result<(Self, ParamStore<T>)> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let cfg = config;
        let stem = pointwise(&mut store, "stem", cfg.in_channels, cfg.base_channels, &mut rng)?;
        let mut encoder = Vec::with_capacity(cfg.levels);
        for level in 0..cfg.levels {
            let c = cfg.width(level);
            let mut make = |axis: AxisId| {
                IeBlock::new(
                    &mut store,
                    &format!("enc{level}.{}", axis.name()),
                    axis,
                    c,
                    cfg.variant,
                    cfg.projection_op,
                    cfg.extent(level, axis),
                    &mut rng,
                )
            };
            let blocks = [make(AxisId::Sagittal)?, make(AxisId::Axial)?, make(AxisId::Coronal)?];
            let fusion = AxisFusion::new(&mut store, &format!("enc{level}.fusion"), cfg.fusion_mode);
            let down = if level + 1 < cfg.levels {
                Some(pointwise(&mut store, &format!("enc{level}.down"), c, 2 * c, &mut rng)?)
            } else {
                None
            };
            encoder.push(EncoderStage { blocks, fusion, down });
        }
        let mut decoder: Vec<Option<DecoderStage>> = (0..cfg.levels - 1).map(|_| None).collect();
        for level in (0..cfg.levels - 1).rev() {
            let c = cfg.width(level);
            let mut make = |axis: AxisId| {
                IdBlock::new(
                    &mut store,
                    &format!("dec{level}.{}", axis.name()),
                    axis,
                    c,
                    cfg.variant,
                    cfg.projection_op,
                    cfg.extent(level, axis),
                    &mut rng,
                )
            };
            let blocks = [make(AxisId::Sagittal)?, make(AxisId::Axial)?, make(AxisId::Coronal)?];
            let fusion = AxisFusion::new(&mut store, &format!("dec{level}.fusion"), cfg.fusion_mode);
            decoder[level] = Some(DecoderStage { blocks, fusion });
        }
        let head = pointwise(&mut store, "head", cfg.base_channels, cfg.num_classes, &mut rng)?;
        let decoder = decoder.into_iter().map(|d| d.expect("every level built")).collect();
        Ok((Self { config: config.clone(), stem, encoder, decoder, head }, store))
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<NetOutput> {
        let cfg = &self.config;
        let shape = ctx.tape.value(x).dims5()?;
        ensure_shape!(
            shape[1] == cfg.in_channels,
            "network expects {} input channels, got {}",
            cfg.in_channels,
            shape[1]
        );
        let factor = 1 << (cfg.levels - 1);
        ensure_shape!(
            shape[2..].iter().all(|&e| e % factor == 0),
            "input extents {:?} not divisible by 2^(levels-1) = {factor}",
            &shape[2..]
        );

        let mut h = self.stem.forward(ctx, x)?;
        let mut encoder_outputs = Vec::with_capacity(cfg.levels);
        let mut encoder_traces = Vec::with_capacity(cfg.levels);
        for stage in &self.encoder {
            let mut branches = [h; 3];
            let mut traces = Vec::with_capacity(3);
            for (slot, block) in branches.iter_mut().zip(&stage.blocks) {
                let (y, t) = block.forward(ctx, h)?;
                *slot = y;
                traces.push(t);
            }
            let fused = stage.fusion.forward(ctx, branches)?;
            encoder_outputs.push(fused);
            encoder_traces.push([traces[0], traces[1], traces[2]]);
            h = match &stage.down {
                Some(down) => {
                    let wide = down.forward(ctx, fused)?;
                    ctx.tape.avg_pool3d(wide)?
                }
                None => fused,
            };
        }
        for level in (0..cfg.levels - 1).rev() {
            let stage = &self.decoder[level];
            let skip = encoder_outputs[level];
            let mut branches = [h; 3];
            for (slot, block) in branches.iter_mut().zip(&stage.blocks) {
                *slot = block.forward(ctx, h, skip)?.0;
            }
            h = stage.fusion.forward(ctx, branches)?;
        }
        let logits = self.head.forward(ctx, h)?;
        Ok(NetOutput { logits, encoder_outputs, encoder_traces })
    }

    /// Forward pass without gradient tracking; returns the logits.
    pub fn predict<T: Real>(&self, store: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut ctx = Ctx::new(store, false);
        let xv = ctx.tape.constant(x.clone());
        let out = self.forward(&mut ctx, xv)?;
        Ok(ctx.value(out.logits).clone())
    }

    pub fn fused_stages(&self) -> usize {
        self.encoder.len() + self.decoder.len()
    }

    /// Learned axis weights: encoder levels first, then decoder levels from
    /// deepest to shallowest.
    pub fn axis_weights<T: Real>(&self, store: &ParamStore<T>) -> Vec<AxisWeightRow> {
        let row = |stage: String, w: [f64; 3]| AxisWeightRow { stage, sagittal: w[0], axial: w[1], coronal: w[2] };
        let mut rows: Vec<AxisWeightRow> = self
            .encoder
            .iter()
            .enumerate()
            .map(|(i, s)| row(format!("encoder {}", i + 1), s.fusion.weights(store)))
            .collect();
        for level in (0..self.decoder.len()).rev() {
            rows.push(row(format!("decoder {}", level + 1), self.decoder[level].fusion.weights(store)));
        }
        rows
    }
}

/// Total scalar parameter count.
pub fn param_count<T: Real>(store: &ParamStore<T>) -> usize {
    store.numel()
}

/// Renders axis weights as a fixed-width table.
pub fn format_axis_weights(rows: &[AxisWeightRow]) -> String {
    let mut out = format!("{:<12}{:>10}{:>10}{:>10}\n", "stage", "sagittal", "axial", "coronal");
    for r in rows {
        out.push_str(&format!("{:<12}{:>10.4}{:>10.4}{:>10.4}\n", r.stage, r.sagittal, r.axial, r.coronal));
    }
    out
}
