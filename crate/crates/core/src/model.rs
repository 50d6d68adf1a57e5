//! Classifier and part-segmenter assembly.

use std::fmt;
use std::str::FromStr;

use crate::aggregation::{Aggregation, GlobalAggregator};
use crate::alignment::{Aligner, AlignerConfig, TransformerKind};
use crate::autodiff::{concat_last, Tape, Var};
use crate::error::{Error, Result};
use crate::geometry::{stack_clouds, PointCloud};
use crate::layers::{EdgeMode, FatLayer, FatLayerConfig, SharedMap, SharedMlp};
use crate::params::{Ctx, Mode, ParamStore};
use crate::tensor::{Float, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    /// One label per cloud over `outputs` classes.
    Classification,
    /// One label per point over `outputs` parts.
    Segmentation,
}

/// How point and edge embeddings are combined across the backbone.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Combine {
    /// Each layer concatenates its branches and feeds the result forward.
    PerLayer,
    /// Point and edge branches run as separate streams, joined only at the
    /// final layer's output.
    AtEnd,
}

impl FromStr for Combine {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per-layer" => Ok(Self::PerLayer),
            "at-end" => Ok(Self::AtEnd),
            o => Err(Error::Config(format!("unknown combine `{o}` (expected per-layer|at-end)"))),
        }
    }
}

impl fmt::Display for Combine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::PerLayer => "per-layer",
            Self::AtEnd => "at-end",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub task: Task,
    /// Class count `c`, or part count `r` for segmentation.
    pub outputs: usize,
    pub widths: Vec<usize>,
    pub final_width: usize,
    pub head: Vec<usize>,
    pub k: usize,
    pub aggregation: Aggregation,
    pub attention: bool,
    pub residual: bool,
    pub combine: Combine,
    pub edge_mode: EdgeMode,
    pub transformer: TransformerKind,
    pub tnet_widths: Vec<usize>,
    pub tnet_head: Vec<usize>,
}

impl ModelConfig {
    pub fn classifier(classes: usize) -> Self {
        Self {
            task: Task::Classification,
            outputs: classes,
            widths: vec![64, 64, 128],
            final_width: 1024,
            head: vec![512, 256],
            k: 20,
            aggregation: Aggregation::Gfa,
            attention: true,
            residual: true,
            combine: Combine::PerLayer,
            edge_mode: EdgeMode::Difference,
            transformer: TransformerKind::Fat,
            tnet_widths: vec![64, 128, 1024],
            tnet_head: vec![512, 256],
        }
    }

    pub fn segmenter(parts: usize) -> Self {
        Self {
            task: Task::Segmentation,
            ..Self::classifier(parts)
        }
    }

    /// Attention-free, max-pool variant.
    pub fn vanilla(mut self) -> Self {
        self.attention = false;
        self.aggregation = Aggregation::MaxPool;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.outputs < 2 {
            return Err(Error::Config(format!("need at least 2 outputs, got {}", self.outputs)));
        }
        if self.widths.is_empty() {
            return Err(Error::Config("need at least one FAT layer before the final layer".into()));
        }
        let all = self.widths.iter().chain([&self.final_width]);
        if let Some(w) = all.chain(&self.tnet_widths).find(|&&w| w < 2 || w % 2 != 0) {
            return Err(Error::Config(format!("FAT widths must be even, got {w}")));
        }
        if self.k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        if self.head.iter().chain(&self.tnet_head).any(|&w| w == 0) {
            return Err(Error::Config("dense widths must be positive".into()));
        }
        Ok(())
    }

    /// Width of the per-point skip concatenation feeding the final layer.
    pub fn skip_width(&self) -> usize {
        self.widths.iter().sum()
    }
}

/// Output of the shared backbone.
pub struct Features<'t, T: Float> {
    /// Aggregated descriptor, `[B, G]`.
    pub global: Var<'t, T>,
    /// Concatenated per-layer outputs, `[B, N, skip_width]`.
    pub skip: Var<'t, T>,
}

#[derive(Clone, Debug)]
pub struct Model<T: Float> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    pub aligner: Option<Aligner>,
    pub layers: Vec<FatLayer>,
    pub final_layer: FatLayer,
    pub aggregator: GlobalAggregator,
    pub head: Vec<SharedMlp>,
    pub out: SharedMap,
}

impl<T: Float> Model<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new(seed);
        let aligner = match config.transformer {
            TransformerKind::None => None,
            kind => Some(Aligner::new(
                &mut store,
                "tnet",
                AlignerConfig {
                    kind,
                    widths: config.tnet_widths.clone(),
                    head: config.tnet_head.clone(),
                    k: config.k,
                },
            )?),
        };

        let layer_cfg = |d_in: usize, d_in_edge: usize, d_out: usize, residual_in: Option<usize>| FatLayerConfig {
            d_in,
            d_in_edge,
            d_out,
            k: config.k,
            attention: config.attention,
            edge_mode: config.edge_mode,
            residual_in: residual_in.filter(|_| config.residual),
            clamp_k: false,
        };
        let mut layers = Vec::new();
        let (mut dp, mut de) = (3, 3);
        let mut prev_half = None;
        for (i, &w) in config.widths.iter().enumerate() {
            let cfg = layer_cfg(dp, de, w, prev_half);
            layers.push(FatLayer::new(&mut store, &format!("fat{i}"), cfg)?);
            match config.combine {
                Combine::PerLayer => (dp, de) = (w, w),
                Combine::AtEnd => (dp, de) = (w / 2, w / 2),
            }
            prev_half = Some(w / 2);
        }
        let final_in = match config.combine {
            Combine::PerLayer => (config.skip_width(), config.skip_width()),
            Combine::AtEnd => (config.skip_width() / 2, config.skip_width() / 2),
        };
        let final_layer = FatLayer::new(
            &mut store,
            "final",
            layer_cfg(final_in.0, final_in.1, config.final_width, prev_half),
        )?;
        let aggregator = GlobalAggregator::new(&mut store, "agg", config.final_width, config.aggregation);

        let mut d = aggregator.output_width();
        if config.task == Task::Segmentation {
            d += config.skip_width();
        }
        let mut head = Vec::new();
        for (i, &w) in config.head.iter().enumerate() {
            head.push(SharedMlp::new(&mut store, &format!("head.fc{i}"), d, w, true));
            d = w;
        }
        let out = SharedMap::new(&mut store, "head.out", d, config.outputs, true);
        Ok(Self {
            config,
            store,
            aligner,
            layers,
            final_layer,
            aggregator,
            head,
            out,
        })
    }

    /// Same structure and values in another precision.
    pub fn cast<U: Float>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            store: self.store.cast(),
            aligner: self.aligner.clone(),
            layers: self.layers.clone(),
            final_layer: self.final_layer.clone(),
            aggregator: self.aggregator.clone(),
            head: self.head.clone(),
            out: self.out.clone(),
        }
    }

    /// Total trainable scalars; batch-norm running statistics are excluded.
    pub fn count_parameters(&self) -> usize {
        self.store.count_trainable()
    }

    fn check_input(&self, x: &Var<'_, T>) -> Result<()> {
        let s = x.shape();
        if s.len() != 3 || s[2] != 3 {
            return Err(Error::shape("model input", &s, &[0, 0, 3]));
        }
        if s[1] <= self.config.k {
            return Err(Error::TooFewPoints {
                n: s[1],
                k: self.config.k,
            });
        }
        Ok(())
    }

    /// Alignment and backbone up to the aggregated descriptor.
    pub fn features<'t>(&self, ctx: &Ctx<'_, 't, T>, x: Var<'t, T>) -> Result<Features<'t, T>> {
        self.check_input(&x)?;
        let x = match &self.aligner {
            Some(a) => a.align(ctx, x)?,
            None => x,
        };
        let mut residual: Option<Var<'t, T>> = None;
        let (skip, final_out) = match self.config.combine {
            Combine::PerLayer => {
                let mut h = x;
                let mut outs = Vec::with_capacity(self.layers.len());
                for l in &self.layers {
                    let o = l.forward(ctx, h, h, residual.filter(|_| l.adapter.is_some()))?;
                    residual = Some(o.point);
                    h = o.out;
                    outs.push(o.out);
                }
                let skip = concat_last(&outs)?;
                let r = residual.filter(|_| self.final_layer.adapter.is_some());
                (skip, self.final_layer.forward(ctx, skip, skip, r)?.out)
            }
            Combine::AtEnd => {
                let (mut hp, mut he) = (x, x);
                let (mut ps, mut es) = (Vec::new(), Vec::new());
                for l in &self.layers {
                    let o = l.forward(ctx, hp, he, residual.filter(|_| l.adapter.is_some()))?;
                    residual = Some(o.point);
                    (hp, he) = (o.point, o.edge);
                    ps.push(o.point);
                    es.push(o.edge);
                }
                let (sp, se) = (concat_last(&ps)?, concat_last(&es)?);
                let r = residual.filter(|_| self.final_layer.adapter.is_some());
                let out = self.final_layer.forward(ctx, sp, se, r)?.out;
                (concat_last(&[sp, se])?, out)
            }
        };
        let global = self.aggregator.forward(ctx, final_out)?;
        Ok(Features { global, skip })
    }

    /// Logits: `[B, c]` for classification, `[B, N, r]` for segmentation.
    pub fn forward<'t>(&self, ctx: &Ctx<'_, 't, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let f = self.features(ctx, x)?;
        let mut h = match self.config.task {
            Task::Classification => f.global,
            Task::Segmentation => {
                let n = x.shape()[1];
                concat_last(&[f.global.tile_mid(n)?, f.skip])?
            }
        };
        for fc in &self.head {
            h = fc.forward(ctx, h)?;
        }
        self.out.forward(ctx, h)
    }

    /// Cross-entropy loss for a batch. `labels` holds one entry per cloud, or
    /// one per point (cloud-major) for segmentation.
    pub fn loss<'t>(&self, logits: Var<'t, T>, labels: &[usize]) -> Result<Var<'t, T>> {
        let s = logits.shape();
        let rows = s[..s.len() - 1].iter().product();
        logits
            .reshape(&[rows, self.config.outputs])?
            .softmax_cross_entropy(labels)
    }

    /// Inference on a batch of equal-size clouds with running statistics.
    pub fn predict(&self, clouds: &[&PointCloud]) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &self.store, Mode::Eval);
        let x = ctx.input(stack_clouds(clouds)?);
        Ok(self.forward(&ctx, x)?.value().as_ref().clone())
    }

    /// Alignment matrices `[B, 3, 3]` from the input transformer, if any.
    pub fn transforms(&self, clouds: &[&PointCloud]) -> Result<Option<Tensor<T>>> {
        let Some(aligner) = &self.aligner else {
            return Ok(None);
        };
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &self.store, Mode::Eval);
        let x = ctx.input(stack_clouds(clouds)?);
        Ok(Some(aligner.regress(&ctx, x)?.value().as_ref().clone()))
    }
}
