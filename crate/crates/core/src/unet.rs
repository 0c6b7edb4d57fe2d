//! U-shaped network over factorized implicit grids.
//!
//! Surface points are encoded onto the level-0 grids by point convolution,
//! pass through a down path of FIG blocks with strided downsampling, and come
//! back up with trilinear upsampling and skip concatenation. The bottleneck
//! grids feed the drag head; the level-0 output grids are decoded at the
//! surface points for the pressure head.

use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{load_checkpoint, save_checkpoint, Graph, Scalar, SparseMap, Tensor, Var};
use crate::dataio::SurfaceSample;
use crate::error::{Error, Result};
use crate::figconv::{fig_conv_graph, fig_conv_macs};
use crate::grid::{
    decode_graph, fuse_graph, rank_axis, Aabb, CombineMode, DecodePlan, FusionPlan, GridGeometry, PositionalEncoding,
};
use crate::nn::{uniform, Ctx, Linear, Mlp, ParamId, ParamStore};
use crate::pointconv::{default_covariance, point_to_grid_graph, EdgeEncoding, PointConvParams, PointGridEdges};

const NORM_EPS: f64 = 1e-5;

fn default_bounds() -> Aabb {
    Aabb {
        min: [-0.1, -0.3, -0.05],
        max: [1.4, 0.3, 0.5],
    }
}

fn default_drag_hidden() -> usize {
    32
}

/// Network hyperparameters. Field names follow the common YAML layout for
/// this model family, so existing files can be pasted in directly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub num_levels: usize,
    pub kernel_size: usize,
    /// Channels per level, bottleneck last; `num_levels + 1` entries.
    pub hidden_channels: Vec<usize>,
    pub num_down_blocks: Vec<usize>,
    pub num_up_blocks: Vec<usize>,
    /// Level-0 resolution of every factorized grid.
    pub resolution_memory_format_pairs: Vec<[usize; 3]>,
    pub combine: CombineMode,
    pub positional_encoding: PositionalEncoding,
    pub edge_encoding: EdgeEncoding,
    /// Region covered by the grids (m).
    pub bounds: Aabb,
    /// Feed the inlet velocity to the point features and the drag head.
    pub velocity_conditioning: bool,
    /// Velocities are divided by this (m/s) before entering the network.
    pub velocity_scale: f64,
    #[serde(default = "default_drag_hidden")]
    pub drag_hidden: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_levels: 2,
            kernel_size: 5,
            hidden_channels: vec![16, 32, 48],
            num_down_blocks: vec![1, 1],
            num_up_blocks: vec![1, 1],
            resolution_memory_format_pairs: vec![[5, 150, 100], [250, 3, 100], [250, 150, 2]],
            combine: CombineMode::Sum,
            positional_encoding: PositionalEncoding::Raw,
            edge_encoding: EdgeEncoding::Offset,
            bounds: default_bounds(),
            velocity_conditioning: false,
            velocity_scale: 20.0,
            drag_hidden: default_drag_hidden(),
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// One level, channels `[4, 8]`, three small grids.
    pub fn minimal() -> Self {
        Self {
            num_levels: 1,
            kernel_size: 3,
            hidden_channels: vec![4, 8],
            num_down_blocks: vec![1],
            num_up_blocks: vec![1],
            resolution_memory_format_pairs: vec![[2, 8, 6], [8, 2, 6], [8, 6, 2]],
            drag_hidden: 8,
            ..Self::default()
        }
    }

    /// One level, channels `[8, 16]`, grids inside a 16³ footprint.
    pub fn tiny() -> Self {
        Self {
            num_levels: 1,
            kernel_size: 3,
            hidden_channels: vec![8, 16],
            num_down_blocks: vec![1],
            num_up_blocks: vec![1],
            resolution_memory_format_pairs: vec![[4, 16, 12], [16, 3, 12], [16, 12, 3]],
            drag_hidden: 16,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let l = self.num_levels;
        if l == 0 {
            return Err(Error::config("num_levels", "must be at least 1"));
        }
        if !(self.velocity_scale.is_finite() && self.velocity_scale > 0.0) {
            return Err(Error::config("velocity_scale", "must be positive"));
        }
        if self.hidden_channels.len() != l + 1 {
            return Err(Error::config(
                "hidden_channels",
                format!("needs num_levels + 1 = {} entries, got {}", l + 1, self.hidden_channels.len()),
            ));
        }
        if self.hidden_channels.contains(&0) {
            return Err(Error::config("hidden_channels", "channel counts must be positive"));
        }
        if self.num_down_blocks.len() != l {
            return Err(Error::config("num_down_blocks", format!("needs {} entries", l)));
        }
        if self.num_up_blocks.len() != l {
            return Err(Error::config("num_up_blocks", format!("needs {} entries", l)));
        }
        if self.num_up_blocks.contains(&0) {
            return Err(Error::config(
                "num_up_blocks",
                "every level needs a block to merge the skip connection",
            ));
        }
        if self.kernel_size % 2 == 0 || self.kernel_size == 0 {
            return Err(Error::config("kernel_size", "must be odd"));
        }
        if self.resolution_memory_format_pairs.is_empty() {
            return Err(Error::config("resolution_memory_format_pairs", "needs at least one grid"));
        }
        for res in &self.resolution_memory_format_pairs {
            if res.contains(&0) {
                return Err(Error::config("resolution_memory_format_pairs", format!("{:?} has an empty axis", res)));
            }
            if rank_axis(*res).is_none() {
                return Err(Error::config(
                    "resolution_memory_format_pairs",
                    format!("{:?} needs exactly one smallest axis", res),
                ));
            }
        }
        if self.drag_hidden == 0 {
            return Err(Error::config("drag_hidden", "must be positive"));
        }
        Aabb::new(self.bounds.min, self.bounds.max).map_err(|e| Error::config("bounds", e.to_string()))?;
        Ok(())
    }

    /// Per-point input features: the normal, plus the velocity if
    /// conditioned.
    pub fn point_features(&self) -> usize {
        3 + self.velocity_conditioning as usize
    }

    /// Resolutions of every grid at every level. High-resolution axes halve
    /// (rounding up) per level; rank axes stay.
    pub fn level_resolutions(&self) -> Vec<Vec<[usize; 3]>> {
        let axes: Vec<usize> = self
            .resolution_memory_format_pairs
            .iter()
            .map(|r| rank_axis(*r).unwrap_or(0))
            .collect();
        let mut levels = vec![self.resolution_memory_format_pairs.clone()];
        for _ in 0..self.num_levels {
            let next = levels
                .last()
                .unwrap()
                .iter()
                .zip(&axes)
                .map(|(res, &ra)| {
                    let mut out = *res;
                    for a in 0..3 {
                        if a != ra {
                            out[a] = (res[a] + 1) / 2;
                        }
                    }
                    out
                })
                .collect();
            levels.push(next);
        }
        levels
    }
}

/// FIG convolution on every grid, then fusion, layer normalization across
/// channels, and GELU.
#[derive(Clone, Debug)]
pub struct FigBlock {
    pub kernels: Vec<ParamId>,
    pub biases: Vec<ParamId>,
    pub fusion: Vec<Option<Linear>>,
    pub gammas: Vec<ParamId>,
    pub betas: Vec<ParamId>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
}

impl FigBlock {
    #[allow(clippy::too_many_arguments)]
    fn new(
        store: &mut ParamStore<f64>,
        name: &str,
        grids: usize,
        ci: usize,
        co: usize,
        k: usize,
        stride: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let bound = 1.0 / ((ci * k * k * k) as f64).sqrt();
        let mut block = Self {
            kernels: Vec::new(),
            biases: Vec::new(),
            fusion: Vec::new(),
            gammas: Vec::new(),
            betas: Vec::new(),
            in_channels: ci,
            out_channels: co,
            stride,
        };
        for m in 0..grids {
            let p = format!("{}.g{}", name, m);
            block
                .kernels
                .push(store.add(format!("{}.kernel", p), uniform(rng, &[co, ci, k, k, k], bound)));
            block.biases.push(store.add(format!("{}.bias", p), uniform(rng, &[co], bound)));
            block
                .fusion
                .push((grids > 1).then(|| Linear::new(store, &format!("{}.fusion", p), co, co, true, rng)));
            block.gammas.push(store.add(format!("{}.norm.gamma", p), Tensor::ones(&[co])));
            block.betas.push(store.add(format!("{}.norm.beta", p), Tensor::zeros(&[co])));
        }
        block
    }

    /// `grids[m]` is `[Ci, V]` on `inputs[m]`; returns `[Co, V']` values on
    /// the geometries of `plan`.
    #[allow(clippy::too_many_arguments)]
    pub fn forward<T: Scalar>(
        &self,
        ctx: &mut Ctx<'_, T>,
        grids: &[Var],
        inputs: &[GridGeometry],
        rank_axes: &[usize],
        plan: &FusionPlan<T>,
        fig_macs: &mut u64,
    ) -> Result<Vec<Var>> {
        let k = ctx.store().get(self.kernels[0]).shape()[2];
        let mut convs = Vec::with_capacity(grids.len());
        for (m, &x) in grids.iter().enumerate() {
            let res = inputs[m].resolution;
            let x5 = ctx.graph.reshape(x, &[1, self.in_channels, res[0], res[1], res[2]])?;
            let w = ctx.param(self.kernels[m]);
            let y = fig_conv_graph(ctx.graph, x5, w, rank_axes[m], self.stride)?;
            *fig_macs += fig_conv_macs(
                &[1, self.in_channels, res[0], res[1], res[2]],
                &[self.out_channels, self.in_channels, k, k, k],
                rank_axes[m],
                self.stride,
            )?;
            let v: usize = ctx.graph.shape(y)[2..].iter().product();
            let y = ctx.graph.reshape(y, &[self.out_channels, v])?;
            let b = ctx.param(self.biases[m]);
            convs.push(ctx.graph.bias_add(y, b, 0)?);
        }
        let fused = fuse_graph(ctx, &convs, plan, &self.fusion)?;
        let mut out = Vec::with_capacity(fused.len());
        for (m, x) in fused.into_iter().enumerate() {
            let (g, b) = (ctx.param(self.gammas[m]), ctx.param(self.betas[m]));
            let n = ctx.graph.layer_norm(x, g, b, T::from_f64_lossy(NORM_EPS))?;
            out.push(ctx.graph.gelu(n));
        }
        Ok(out)
    }
}

/// Parameter layout of a model, independent of the scalar type.
#[derive(Clone, Debug)]
pub struct Architecture {
    pub rank_axes: Vec<usize>,
    /// `geometries[l][m]`: grid `m` at level `l`, `l = 0..=num_levels`.
    pub geometries: Vec<Vec<GridGeometry>>,
    pub stem: Vec<PointConvParams>,
    pub down: Vec<Vec<FigBlock>>,
    pub downsample: Vec<FigBlock>,
    pub up: Vec<Vec<FigBlock>>,
    pub decoders: Vec<Mlp>,
    pub pressure_head: Mlp,
    pub drag_head: Mlp,
}

impl Architecture {
    fn build(config: &ModelConfig, store: &mut ParamStore<f64>) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let grids = config.resolution_memory_format_pairs.len();
        let rank_axes: Vec<usize> = config
            .resolution_memory_format_pairs
            .iter()
            .map(|r| rank_axis(*r).unwrap())
            .collect();
        let geometries = config
            .level_resolutions()
            .into_iter()
            .map(|level| level.into_iter().map(|r| GridGeometry::new(r, config.bounds)).collect())
            .collect::<Result<Vec<Vec<_>>>>()?;
        let ch = &config.hidden_channels;
        let k = config.kernel_size;
        let f = config.point_features();

        let stem = (0..grids)
            .map(|m| {
                PointConvParams::new(
                    store,
                    &format!("stem.g{}", m),
                    f,
                    ch[0],
                    ch[0],
                    default_covariance(&geometries[0][m]),
                    config.edge_encoding,
                    &mut rng,
                )
            })
            .collect();
        let mut down = Vec::new();
        let mut downsample = Vec::new();
        for l in 0..config.num_levels {
            down.push(
                (0..config.num_down_blocks[l])
                    .map(|b| FigBlock::new(store, &format!("down.{}.{}", l, b), grids, ch[l], ch[l], k, 1, &mut rng))
                    .collect(),
            );
            downsample.push(FigBlock::new(
                store,
                &format!("downsample.{}", l),
                grids,
                ch[l],
                ch[l + 1],
                k,
                2,
                &mut rng,
            ));
        }
        let mut up = Vec::new();
        for l in 0..config.num_levels {
            up.push(
                (0..config.num_up_blocks[l])
                    .map(|b| {
                        let ci = if b == 0 { ch[l + 1] + ch[l] } else { ch[l] };
                        FigBlock::new(store, &format!("up.{}.{}", l, b), grids, ci, ch[l], k, 1, &mut rng)
                    })
                    .collect(),
            );
        }
        let enc = config.positional_encoding.width();
        let decoders = (0..grids)
            .map(|m| Mlp::new(store, &format!("decoder.g{}", m), &[ch[0] + enc, ch[0], ch[0]], &mut rng))
            .collect();
        let pressure_head = Mlp::new(store, "pressure_head", &[ch[0] + f, ch[0], 1], &mut rng);
        let pooled = grids * ch[config.num_levels] + config.velocity_conditioning as usize;
        let drag_head = Mlp::new(store, "drag_head", &[pooled, config.drag_hidden, 1], &mut rng);
        Ok(Self {
            rank_axes,
            geometries,
            stem,
            down,
            downsample,
            up,
            decoders,
            pressure_head,
            drag_head,
        })
    }
}

/// Sampling maps that depend only on the grid layout.
#[derive(Clone, Debug)]
struct Plans<T: Scalar> {
    fusion: Vec<FusionPlan<T>>,
    /// `upsample[l][m]`: grid `m` from level `l + 1` to level `l`.
    upsample: Vec<Vec<Arc<SparseMap<T>>>>,
}

impl<T: Scalar> Plans<T> {
    fn new(geometries: &[Vec<GridGeometry>]) -> Self {
        let fusion = geometries.iter().map(|g| FusionPlan::new(g)).collect();
        let upsample = geometries
            .windows(2)
            .map(|w| {
                w[1].iter()
                    .zip(&w[0])
                    .map(|(coarse, fine)| Arc::new(coarse.sampling_map(&fine.centers())))
                    .collect()
            })
            .collect();
        Self { fusion, upsample }
    }
}

/// Per-sample inputs that do not depend on the parameters.
#[derive(Clone, Debug)]
pub struct PreparedSample<T: Scalar> {
    /// `[F, N]`: normals, then the velocity when conditioned.
    pub features: Tensor<T>,
    pub edges: Vec<PointGridEdges<T>>,
    pub decode: DecodePlan<T>,
    pub velocity: Option<f64>,
}

impl<T: Scalar> PreparedSample<T> {
    pub fn num_points(&self) -> usize {
        self.decode.num_points
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub drag: f64,
    /// Normalized pressure at every point.
    pub pressure: Vec<f64>,
    /// Multiply-accumulates spent in FIG convolutions.
    pub fig_macs: u64,
    /// Multiply-accumulates of the whole forward pass.
    pub total_macs: u64,
}

/// Output variables of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    /// `[1, 1]`.
    pub drag: Var,
    /// `[1, N]`.
    pub pressure: Var,
    pub fig_macs: u64,
}

#[derive(Clone, Debug)]
pub struct Model<T: Scalar> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    pub arch: Architecture,
    plans: Plans<T>,
}

impl<T: Scalar> Model<T> {
    /// Build with parameters drawn from `config.seed`. Initialization runs
    /// in 64-bit and is then cast, so models of either precision start from
    /// the same values.
    pub fn new(config: ModelConfig) -> Result<Self> {
        let mut store = ParamStore::<f64>::new();
        let arch = Architecture::build(&config, &mut store)?;
        let plans = Plans::new(&arch.geometries);
        Ok(Self {
            config,
            store: store.cast(),
            arch,
            plans,
        })
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_scalars()
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            store: self.store.cast(),
            arch: self.arch.clone(),
            plans: Plans::new(&self.arch.geometries),
        }
    }

    pub fn prepare(&self, sample: &SurfaceSample) -> Result<PreparedSample<T>> {
        let n = sample.points.len();
        if n == 0 {
            return Err(Error::invalid("empty point cloud"));
        }
        if sample.normals.len() != n {
            return Err(Error::shape(format!("{} points but {} normals", n, sample.normals.len())));
        }
        if let Some(i) = sample.points.iter().position(|p| p.iter().any(|c| !c.is_finite())) {
            return Err(Error::NonFinitePoint { index: i });
        }
        let velocity = if self.config.velocity_conditioning {
            Some(
                sample
                    .velocity
                    .ok_or_else(|| Error::invalid("model is velocity-conditioned but the sample has no velocity"))?,
            )
        } else {
            None
        };
        let f = self.config.point_features();
        let mut feats = vec![T::zero(); f * n];
        for (i, nrm) in sample.normals.iter().enumerate() {
            for a in 0..3 {
                feats[a * n + i] = T::from_f64_lossy(nrm[a]);
            }
            if let Some(v) = velocity {
                feats[3 * n + i] = T::from_f64_lossy(v / self.config.velocity_scale);
            }
        }
        let level0 = &self.arch.geometries[0];
        let edges = level0
            .iter()
            .zip(&self.arch.stem)
            .map(|(geom, params)| PointGridEdges::search(&sample.points, geom, params))
            .collect::<Result<Vec<_>>>()?;
        let decode = DecodePlan::new(level0, &sample.points, &self.config.positional_encoding)?;
        Ok(PreparedSample {
            features: Tensor::new(vec![f, n], feats)?,
            edges,
            decode,
            velocity,
        })
    }

    /// Mean-pool each grid, concatenate (with the velocity if conditioned)
    /// and apply the two-layer head. Returns `[1, 1]`.
    pub fn drag_head_graph(&self, ctx: &mut Ctx<'_, T>, bottleneck: &[Var], velocity: Option<f64>) -> Result<Var> {
        let mut parts = Vec::with_capacity(bottleneck.len() + 1);
        for &x in bottleneck {
            let pooled = ctx.graph.mean_axis(x, 1)?;
            let c = ctx.graph.shape(pooled)[0];
            parts.push(ctx.graph.reshape(pooled, &[c, 1])?);
        }
        if self.config.velocity_conditioning {
            let v = velocity.ok_or_else(|| Error::invalid("velocity-conditioned drag head needs a velocity"))?;
            parts.push(ctx.graph.leaf(Tensor::full(&[1, 1], T::from_f64_lossy(v / self.config.velocity_scale))));
        }
        let x = ctx.graph.concat(&parts, 0)?;
        self.arch.drag_head.forward(ctx, x)
    }

    /// Drag from explicit bottleneck values (`[C, V_m]` each).
    pub fn drag_head(&self, bottleneck: &[Tensor<T>], velocity: Option<f64>) -> Result<f64> {
        let mut graph = Graph::new();
        let vars: Vec<Var> = bottleneck.iter().map(|t| graph.leaf(t.clone())).collect();
        let mut ctx = Ctx::new(&mut graph, &self.store);
        let y = self.drag_head_graph(&mut ctx, &vars, velocity)?;
        Ok(graph.value(y).item().to_f64_lossy())
    }

    /// Build the forward pass on `ctx`.
    pub fn forward_graph(&self, ctx: &mut Ctx<'_, T>, sample: &PreparedSample<T>) -> Result<ForwardVars> {
        let arch = &self.arch;
        if sample.edges.len() != arch.stem.len() {
            return Err(Error::invalid("sample was prepared for a different model"));
        }
        let mut fig_macs = 0u64;
        let feats = ctx.graph.leaf(sample.features.clone());
        let mut grids = Vec::with_capacity(arch.stem.len());
        for (edges, params) in sample.edges.iter().zip(&arch.stem) {
            grids.push(point_to_grid_graph(ctx, feats, edges, params)?);
        }
        let levels = self.config.num_levels;
        let mut skips = Vec::with_capacity(levels);
        for l in 0..levels {
            let geo = &arch.geometries[l];
            for block in &arch.down[l] {
                grids = block.forward(ctx, &grids, geo, &arch.rank_axes, &self.plans.fusion[l], &mut fig_macs)?;
            }
            skips.push(grids.clone());
            grids = arch.downsample[l].forward(
                ctx,
                &grids,
                geo,
                &arch.rank_axes,
                &self.plans.fusion[l + 1],
                &mut fig_macs,
            )?;
        }
        let drag = self.drag_head_graph(ctx, &grids, sample.velocity)?;
        for l in (0..levels).rev() {
            let mut merged = Vec::with_capacity(grids.len());
            for (m, &x) in grids.iter().enumerate() {
                let upsampled = ctx.graph.sparse(x, self.plans.upsample[l][m].clone())?;
                merged.push(ctx.graph.concat(&[upsampled, skips[l][m]], 0)?);
            }
            grids = merged;
            for block in &arch.up[l] {
                grids = block.forward(
                    ctx,
                    &grids,
                    &arch.geometries[l],
                    &arch.rank_axes,
                    &self.plans.fusion[l],
                    &mut fig_macs,
                )?;
            }
        }
        let decoded = decode_graph(ctx, &grids, &sample.decode, &arch.decoders, self.config.combine)?;
        let head_in = ctx.graph.concat(&[decoded, feats], 0)?;
        let pressure = arch.pressure_head.forward(ctx, head_in)?;
        Ok(ForwardVars {
            drag,
            pressure,
            fig_macs,
        })
    }

    pub fn forward(&self, sample: &PreparedSample<T>) -> Result<Prediction> {
        let mut graph = Graph::new();
        let mut ctx = Ctx::new(&mut graph, &self.store);
        let out = self.forward_graph(&mut ctx, sample)?;
        let drag = graph.value(out.drag).item().to_f64_lossy();
        let pressure = graph.value(out.pressure).to_f64_vec();
        if !drag.is_finite() || pressure.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite("model output".into()));
        }
        Ok(Prediction {
            drag,
            pressure,
            fig_macs: out.fig_macs,
            total_macs: graph.macs(),
        })
    }

    /// Independent forward passes, one per sample.
    pub fn forward_batch(&self, samples: &[PreparedSample<T>]) -> Result<Vec<Prediction>> {
        samples.par_iter().map(|s| self.forward(s)).collect()
    }

    pub fn predict(&self, sample: &SurfaceSample) -> Result<Prediction> {
        self.forward(&self.prepare(sample)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(path, &self.store.to_named_f32())
    }

    /// Build from `config` and overwrite the parameters from a checkpoint.
    /// Extra tensors in the file (optimizer state) are ignored.
    pub fn load(config: ModelConfig, path: &Path) -> Result<Self> {
        let mut model = Self::new(config)?;
        let named: Vec<_> = load_checkpoint(path)?
            .into_iter()
            .filter(|(n, _)| !is_training_state(n))
            .collect();
        model.store.load_named(&named)?;
        Ok(model)
    }
}

/// Names of the optimizer entries a training checkpoint adds.
pub fn is_training_state(name: &str) -> bool {
    name.starts_with("adam.") || name.starts_with("train.")
}
