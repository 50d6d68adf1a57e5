//! Input transformer: regresses a 3x3 matrix from the raw cloud and applies it.

use std::fmt;
use std::str::FromStr;

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::geometry::PointCloud;
use crate::layers::{FatLayer, FatLayerConfig, SharedMap, SharedMlp};
use crate::params::{Ctx, Init, ParamStore};
use crate::tensor::Float;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TransformerKind {
    None,
    /// Shared-MLP transformer (per-point maps only).
    PointNet,
    /// Transformer built from attention-free FAT layers.
    Fat,
}

impl FromStr for TransformerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "tnet" => Ok(Self::PointNet),
            "fat-tnet" => Ok(Self::Fat),
            other => Err(Error::Config(format!(
                "unknown transformer `{other}` (expected none|tnet|fat-tnet)"
            ))),
        }
    }
}

impl fmt::Display for TransformerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::None => "none",
            Self::PointNet => "tnet",
            Self::Fat => "fat-tnet",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AlignerConfig {
    pub kind: TransformerKind,
    /// Embedding widths, `[64, 128, 1024]` by default.
    pub widths: Vec<usize>,
    /// Hidden widths of the regression head, `[512, 256]` by default.
    pub head: Vec<usize>,
    pub k: usize,
}

#[derive(Clone, Debug)]
enum Embedding {
    Fat(Vec<FatLayer>),
    PointNet(Vec<SharedMlp>),
}

/// Regresses one 3x3 transform per cloud. The output layer starts at zero
/// weights and identity bias, so a fresh aligner is the identity map.
#[derive(Clone, Debug)]
pub struct Aligner {
    pub config: AlignerConfig,
    embedding: Embedding,
    head: Vec<SharedMlp>,
    out: SharedMap,
}

const IDENTITY: [f64; 9] = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];

impl Aligner {
    pub fn new<T: Float>(store: &mut ParamStore<T>, name: &str, config: AlignerConfig) -> Result<Self> {
        if config.widths.is_empty() {
            return Err(Error::Config("transformer needs at least one embedding width".into()));
        }
        let mut d = 3;
        let embedding = match config.kind {
            TransformerKind::None => {
                return Err(Error::Config("no aligner for transformer=none".into()));
            }
            TransformerKind::Fat => {
                let mut layers = Vec::new();
                for (i, &w) in config.widths.iter().enumerate() {
                    let mut cfg = FatLayerConfig::new(d, w, config.k);
                    cfg.attention = false;
                    cfg.clamp_k = true;
                    layers.push(FatLayer::new(store, &format!("{name}.fat{i}"), cfg)?);
                    d = w;
                }
                Embedding::Fat(layers)
            }
            TransformerKind::PointNet => {
                let mut maps = Vec::new();
                for (i, &w) in config.widths.iter().enumerate() {
                    maps.push(SharedMlp::new(store, &format!("{name}.mlp{i}"), d, w, true));
                    d = w;
                }
                Embedding::PointNet(maps)
            }
        };
        let mut head = Vec::new();
        for (i, &w) in config.head.iter().enumerate() {
            head.push(SharedMlp::new(store, &format!("{name}.fc{i}"), d, w, true));
            d = w;
        }
        let out = SharedMap {
            weight: store.add(&format!("{name}.out.w"), &[d, 9], Init::Zeros, true),
            bias: Some(store.add(&format!("{name}.out.b"), &[9], Init::Values(IDENTITY.to_vec()), true)),
            d_in: d,
            d_out: 9,
        };
        Ok(Self {
            config,
            embedding,
            head,
            out,
        })
    }

    /// `[B, N, 3] -> [B, 3, 3]`, row-major per cloud.
    pub fn regress<'t, T: Float>(&self, ctx: &Ctx<'_, 't, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let shape = x.shape();
        if shape.len() != 3 || shape[2] != 3 {
            return Err(Error::shape("regress_transform", &shape, &[0, 0, 3]));
        }
        if shape[1] < 2 {
            return Err(Error::TooFewPoints { n: shape[1], k: 1 });
        }
        let mut h = x;
        match &self.embedding {
            Embedding::Fat(layers) => {
                for l in layers {
                    h = l.forward(ctx, h, h, None)?.out;
                }
            }
            Embedding::PointNet(maps) => {
                for m in maps {
                    h = m.forward(ctx, h)?;
                }
            }
        }
        let mut g = h.reduce_max(1)?;
        for fc in &self.head {
            g = fc.forward(ctx, g)?;
        }
        self.out.forward(ctx, g)?.reshape(&[shape[0], 3, 3])
    }

    /// Regresses the transform and applies it: `p' = p T`.
    pub fn align<'t, T: Float>(&self, ctx: &Ctx<'_, 't, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let t = self.regress(ctx, x)?;
        x.bmm(t)
    }
}

/// Applies a row-major 3x3 transform to every point: `p' = p T`.
pub fn apply_transform(pc: &PointCloud, t: &[[f64; 3]; 3]) -> PointCloud {
    PointCloud {
        points: pc
            .points
            .iter()
            .map(|p| {
                std::array::from_fn(|j| {
                    (0..3)
                        .map(|i| f64::from(p[i]) * t[i][j])
                        .sum::<f64>() as f32
                })
            })
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cloud() -> PointCloud {
        PointCloud::new(vec![[0.5, -1.0, 2.0], [0.1, 0.2, -0.3], [1.5, 0.0, 0.25]]).unwrap()
    }

    #[test]
    fn identity_and_double() {
        let pc = cloud();
        let id = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        assert_eq!(apply_transform(&pc, &id), pc);
        let two = [[2.0, 0.0, 0.0], [0.0, 2.0, 0.0], [0.0, 0.0, 2.0]];
        let out = apply_transform(&pc, &two);
        for (a, b) in pc.points.iter().zip(&out.points) {
            for d in 0..3 {
                assert_eq!(a[d] * 2.0, b[d]);
            }
        }
    }

    #[test]
    fn composition_matches_product() {
        let pc = cloud();
        let a = [[0.9, 0.1, -0.2], [0.3, 1.1, 0.0], [-0.4, 0.2, 0.8]];
        let b = [[1.2, -0.3, 0.5], [0.0, 0.7, 0.1], [0.6, 0.4, 1.0]];
        let ab: [[f64; 3]; 3] =
            std::array::from_fn(|i| std::array::from_fn(|j| (0..3).map(|k| a[i][k] * b[k][j]).sum()));
        let lhs = apply_transform(&apply_transform(&pc, &a), &b);
        let rhs = apply_transform(&pc, &ab);
        for (p, q) in lhs.points.iter().zip(&rhs.points) {
            for d in 0..3 {
                assert!((p[d] - q[d]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn kind_parsing() {
        assert_eq!("fat-tnet".parse::<TransformerKind>().unwrap(), TransformerKind::Fat);
        assert!("stn".parse::<TransformerKind>().is_err());
    }
}
