//! Shared-weight maps, squeeze-excite feature attention and the FAT layer.

use std::rc::Rc;

use crate::autodiff::{concat_last, Var};
use crate::error::{Error, Result};
use crate::geometry::knn_graph;
use crate::params::{Ctx, Init, ParamId, ParamStore};
use crate::tensor::{Float, Tensor};

/// Negative slope of every LeakyReLU in the network.
pub const LEAKY_SLOPE: f64 = 0.2;

/// Bottleneck ratio of the per-layer feature attention.
pub const ATTENTION_RATIO: usize = 8;

pub(crate) fn leaky<'t, T: Float>(x: Var<'t, T>) -> Var<'t, T> {
    x.leaky_relu(T::of(LEAKY_SLOPE))
}

/// Linear map applied identically to every row (point, or point-neighbour
/// pair) of its input.
#[derive(Clone, Debug)]
pub struct SharedMap {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl SharedMap {
    pub fn new<T: Float>(store: &mut ParamStore<T>, name: &str, d_in: usize, d_out: usize, bias: bool) -> Self {
        let weight = store.add(
            &format!("{name}.w"),
            &[d_in, d_out],
            Init::Glorot {
                fan_in: d_in,
                fan_out: d_out,
            },
            true,
        );
        let bias = bias.then(|| store.add(&format!("{name}.b"), &[d_out], Init::Zeros, true));
        Self {
            weight,
            bias,
            d_in,
            d_out,
        }
    }

    pub fn forward<'t, T: Float>(&self, ctx: &Ctx<'_, 't, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let y = x.matmul(ctx.param(self.weight))?;
        match self.bias {
            Some(b) => y.add_bias(ctx.param(b)),
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm {
    pub fn new<T: Float>(store: &mut ParamStore<T>, name: &str, c: usize) -> Self {
        Self {
            gamma: store.add(&format!("{name}.gamma"), &[c], Init::Ones, true),
            beta: store.add(&format!("{name}.beta"), &[c], Init::Zeros, true),
            running_mean: store.add(&format!("{name}.running_mean"), &[c], Init::Zeros, false),
            running_var: store.add(&format!("{name}.running_var"), &[c], Init::Ones, false),
        }
    }

    pub fn forward<'t, T: Float>(&self, ctx: &Ctx<'_, 't, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        ctx.batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var)
    }
}

/// Shared map, batch norm, optional LeakyReLU: the conv1D-BN-LeakyReLU unit.
#[derive(Clone, Debug)]
pub struct SharedMlp {
    pub map: SharedMap,
    pub bn: BatchNorm,
    pub activation: bool,
}

impl SharedMlp {
    pub fn new<T: Float>(store: &mut ParamStore<T>, name: &str, d_in: usize, d_out: usize, activation: bool) -> Self {
        Self {
            map: SharedMap::new(store, name, d_in, d_out, true),
            bn: BatchNorm::new(store, &format!("{name}.bn"), d_out),
            activation,
        }
    }

    pub fn forward<'t, T: Float>(&self, ctx: &Ctx<'_, 't, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        self.forward_residual(ctx, x, None)
    }

    /// As [`forward`](Self::forward), adding `residual` after batch norm and
    /// before the activation.
    pub fn forward_residual<'t, T: Float>(
        &self,
        ctx: &Ctx<'_, 't, T>,
        x: Var<'t, T>,
        residual: Option<Var<'t, T>>,
    ) -> Result<Var<'t, T>> {
        let mut y = self.bn.forward(ctx, self.map.forward(ctx, x)?)?;
        if let Some(r) = residual {
            y = y.add(r)?;
        }
        Ok(if self.activation { leaky(y) } else { y })
    }

    pub fn d_out(&self) -> usize {
        self.map.d_out
    }
}

/// Squeeze-excite encoder/decoder producing per-channel gates in (0, 1).
#[derive(Clone, Debug)]
pub struct AttentionBlock {
    pub encoder: ParamId,
    pub decoder: ParamId,
    pub channels: usize,
    pub hidden: usize,
}

impl AttentionBlock {
    pub fn bottleneck(channels: usize, ratio: usize) -> usize {
        channels.div_ceil(ratio).max(1)
    }

    pub fn new<T: Float>(store: &mut ParamStore<T>, name: &str, channels: usize, ratio: usize) -> Self {
        let hidden = Self::bottleneck(channels, ratio);
        let glorot = Init::Glorot {
            fan_in: channels,
            fan_out: hidden,
        };
        Self {
            encoder: store.add(&format!("{name}.w1"), &[channels, hidden], glorot.clone(), true),
            decoder: store.add(&format!("{name}.w2"), &[hidden, channels], glorot, true),
            channels,
            hidden,
        }
    }

    /// `sigmoid(leaky(pooled W1) W2)` for pooled descriptors `[B, D]`.
    pub fn gates<'t, T: Float>(&self, ctx: &Ctx<'_, 't, T>, pooled: Var<'t, T>) -> Result<Var<'t, T>> {
        let h = leaky(pooled.matmul(ctx.param(self.encoder))?);
        Ok(h.matmul(ctx.param(self.decoder))?.sigmoid())
    }
}

/// Projects a residual to the receiving width; identity when widths match.
#[derive(Clone, Debug)]
pub struct ResidualAdapter {
    pub map: Option<SharedMap>,
}

impl ResidualAdapter {
    pub fn new<T: Float>(store: &mut ParamStore<T>, name: &str, d_from: usize, d_to: usize) -> Self {
        Self {
            map: (d_from != d_to).then(|| SharedMap::new(store, name, d_from, d_to, true)),
        }
    }

    pub fn forward<'t, T: Float>(&self, ctx: &Ctx<'_, 't, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        match &self.map {
            Some(m) => m.forward(ctx, x),
            None => Ok(x),
        }
    }
}

/// What the edge branch embeds for each neighbour pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EdgeMode {
    /// `x_j - x_i` only.
    Difference,
    /// `[x_i : x_j - x_i]`.
    CenterDifference,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FatLayerConfig {
    /// Width of the point-branch input.
    pub d_in: usize,
    /// Width of the edge-branch input; equals `d_in` unless the branches run
    /// as separate streams.
    pub d_in_edge: usize,
    pub d_out: usize,
    pub k: usize,
    pub attention: bool,
    pub edge_mode: EdgeMode,
    /// Width of the incoming residual, if the layer receives one.
    pub residual_in: Option<usize>,
    /// Clamp `k` to `N - 1` for small inputs instead of failing.
    pub clamp_k: bool,
}

impl FatLayerConfig {
    pub fn new(d_in: usize, d_out: usize, k: usize) -> Self {
        Self {
            d_in,
            d_in_edge: d_in,
            d_out,
            k,
            attention: true,
            edge_mode: EdgeMode::Difference,
            residual_in: None,
            clamp_k: false,
        }
    }

    pub fn half(&self) -> usize {
        self.d_out / 2
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_out < 2 || !self.d_out.is_multiple_of(2) {
            return Err(Error::Config(format!("FAT layer width {} must be even", self.d_out)));
        }
        if self.k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        Ok(())
    }
}

/// How the attention gates are obtained.
#[derive(Clone, Copy, Debug)]
pub enum Gates {
    /// From the layer's attention block (identity gates when attention is off).
    Learned,
    /// Every gate pinned to a constant.
    Fixed(f64),
}

pub struct FatOutput<'t, T: Float> {
    /// `[B, N, d_out]`: point half followed by the pooled edge half.
    pub out: Var<'t, T>,
    /// Gated second point embedding, `[B, N, d_out / 2]`.
    pub point: Var<'t, T>,
    /// Gated, neighbour-pooled edge embedding, `[B, N, d_out / 2]`.
    pub edge: Var<'t, T>,
}

/// Feature-attentive layer: a point branch and an edge branch, both gated by
/// one shared attention block and concatenated.
#[derive(Clone, Debug)]
pub struct FatLayer {
    pub config: FatLayerConfig,
    pub point1: SharedMlp,
    pub point2: SharedMlp,
    /// First edge map, applied to neighbour differences.
    pub edge1: SharedMap,
    /// Centre-feature map for [`EdgeMode::CenterDifference`].
    pub edge1_center: Option<SharedMap>,
    pub edge1_bn: BatchNorm,
    pub edge2: SharedMlp,
    pub attention: Option<AttentionBlock>,
    pub adapter: Option<ResidualAdapter>,
}

impl FatLayer {
    pub fn new<T: Float>(store: &mut ParamStore<T>, name: &str, config: FatLayerConfig) -> Result<Self> {
        config.validate()?;
        let h = config.half();
        let point1 = SharedMlp::new(store, &format!("{name}.point1"), config.d_in, h, true);
        let point2 = SharedMlp::new(store, &format!("{name}.point2"), h, h, false);
        let edge1 = SharedMap::new(store, &format!("{name}.edge1"), config.d_in_edge, h, true);
        let edge1_center = (config.edge_mode == EdgeMode::CenterDifference)
            .then(|| SharedMap::new(store, &format!("{name}.edge1_center"), config.d_in_edge, h, false));
        let edge1_bn = BatchNorm::new(store, &format!("{name}.edge1.bn"), h);
        let edge2 = SharedMlp::new(store, &format!("{name}.edge2"), h, h, false);
        let attention = config
            .attention
            .then(|| AttentionBlock::new(store, &format!("{name}.attention"), h, ATTENTION_RATIO));
        let adapter = config
            .residual_in
            .map(|w| ResidualAdapter::new(store, &format!("{name}.residual"), w, h));
        Ok(Self {
            config,
            point1,
            point2,
            edge1,
            edge1_center,
            edge1_bn,
            edge2,
            attention,
            adapter,
        })
    }

    /// Effective neighbour count for clouds of `n` points.
    pub fn effective_k(&self, n: usize) -> Result<usize> {
        let k = self.config.k;
        if k < n {
            Ok(k)
        } else if self.config.clamp_k && n >= 2 {
            Ok(n - 1)
        } else {
            Err(Error::TooFewPoints { n, k })
        }
    }

    /// Point branch: `S1 = leaky(BN(h1(x)) + residual)`, `S2 = BN(h2(S1))`.
    pub fn point_branch<'t, T: Float>(
        &self,
        ctx: &Ctx<'_, 't, T>,
        x: Var<'t, T>,
        residual: Option<Var<'t, T>>,
    ) -> Result<Var<'t, T>> {
        let residual = match (residual, &self.adapter) {
            (Some(r), Some(a)) => Some(a.forward(ctx, r)?),
            (Some(_), None) => {
                return Err(Error::InvalidArgument(
                    "residual passed to a layer built without one".into(),
                ))
            }
            (None, _) => None,
        };
        let s1 = self.point1.forward_residual(ctx, x, residual)?;
        self.point2.forward(ctx, s1)
    }

    /// Edge branch on the dynamic kNN graph of `x`, returning `[B, N, K, d_out/2]`.
    pub fn edge_branch<'t, T: Float>(&self, ctx: &Ctx<'_, 't, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let xv = x.value();
        if xv.rank() != 3 {
            return Err(Error::shape("edge_branch", xv.shape(), &[0, 0, self.config.d_in_edge]));
        }
        let (b, n, d) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let k = self.effective_k(n)?;
        let mut nbrs = Vec::with_capacity(b * n * k);
        for bi in 0..b {
            let cloud = &xv.data()[bi * n * d..(bi + 1) * n * d];
            nbrs.extend(knn_graph(cloud, n, d, k)?.indices);
        }
        let h = self.config.half();
        // W(x_j - x_i) = Wx_j - Wx_i: project once per point, then difference.
        let proj = x.matmul(ctx.param(self.edge1.weight))?;
        let mut e = proj.edge_diff(Rc::new(nbrs), k)?;
        if let Some(c) = &self.edge1_center {
            let centre = c
                .forward(ctx, x)?
                .reshape(&[b * n, h])?
                .tile_mid(k)?
                .reshape(&[b, n, k, h])?;
            e = e.add(centre)?;
        }
        if let Some(bias) = self.edge1.bias {
            e = e.add_bias(ctx.param(bias))?;
        }
        let e1 = leaky(self.edge1_bn.forward(ctx, e)?);
        self.edge2.forward(ctx, e1)
    }

    pub fn forward<'t, T: Float>(
        &self,
        ctx: &Ctx<'_, 't, T>,
        point_in: Var<'t, T>,
        edge_in: Var<'t, T>,
        residual: Option<Var<'t, T>>,
    ) -> Result<FatOutput<'t, T>> {
        self.forward_gated(ctx, point_in, edge_in, residual, Gates::Learned)
    }

    pub fn forward_gated<'t, T: Float>(
        &self,
        ctx: &Ctx<'_, 't, T>,
        point_in: Var<'t, T>,
        edge_in: Var<'t, T>,
        residual: Option<Var<'t, T>>,
        gates: Gates,
    ) -> Result<FatOutput<'t, T>> {
        let s2 = self.point_branch(ctx, point_in, residual)?;
        let e2 = self.edge_branch(ctx, edge_in)?;
        let b = s2.value().shape()[0];
        let h = self.config.half();
        let (point, edge) = match (gates, &self.attention) {
            (Gates::Learned, None) => (s2, e2.reduce_max(2)?),
            (Gates::Learned, Some(att)) => {
                let gs = att.gates(ctx, s2.reduce_max(1)?)?;
                let ge = att.gates(ctx, e2.reduce_max(2)?.reduce_max(1)?)?;
                (s2.scale_channels(gs)?, e2.scale_channels(ge)?.reduce_max(2)?)
            }
            (Gates::Fixed(v), _) => {
                let g = ctx.input(Tensor::full(&[b, h], T::of(v)));
                (s2.scale_channels(g)?, e2.scale_channels(g)?.reduce_max(2)?)
            }
        };
        let out = concat_last(&[point, edge])?;
        Ok(FatOutput { out, point, edge })
    }
}
