//! Point-dropout robustness and ablation runners.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use crate::aggregation::Aggregation;
use crate::alignment::TransformerKind;
use crate::data::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::geometry::random_dropout;
use crate::model::{Combine, Model, ModelConfig, Task};
use crate::rng;
use crate::train::{evaluate, train, TrainConfig};

pub const MIN_REPEATS: usize = 5;

#[derive(Clone, Debug, PartialEq)]
pub struct DropoutRow {
    pub keep: usize,
    /// Instance accuracy of each repeat.
    pub accuracies: Vec<f64>,
    pub mean: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DropoutTable {
    pub rows: Vec<DropoutRow>,
}

impl DropoutTable {
    pub fn to_csv(&self) -> String {
        let repeats = self.rows.first().map_or(0, |r| r.accuracies.len());
        let mut s = String::from("keep,mean_acc");
        for i in 0..repeats {
            let _ = write!(s, ",acc_{i}");
        }
        s.push('\n');
        for r in &self.rows {
            let _ = write!(s, "{},{:.6}", r.keep, r.mean);
            for a in &r.accuracies {
                let _ = write!(s, ",{a:.6}");
            }
            s.push('\n');
        }
        s
    }
}

/// Evaluates a classifier on seeded random subsets of every test cloud.
pub fn run_dropout_experiment(
    model: &Model<f32>,
    test: &Dataset,
    keep_counts: &[usize],
    repeats: usize,
    seed: u64,
) -> Result<DropoutTable> {
    if test.task != Task::Classification {
        return Err(Error::InvalidArgument("point dropout is evaluated on classifiers".into()));
    }
    if repeats < MIN_REPEATS {
        return Err(Error::InvalidArgument(format!(
            "need at least {MIN_REPEATS} repeats, got {repeats}"
        )));
    }
    let n = test
        .samples
        .iter()
        .map(|s| s.cloud.len())
        .min()
        .ok_or_else(|| Error::InvalidArgument("empty test set".into()))?;
    let mut table = DropoutTable::default();
    for &keep in keep_counts {
        if keep == 0 || keep > n {
            return Err(Error::InvalidArgument(format!("keep {keep} outside 1..={n}")));
        }
        let mut accuracies = Vec::with_capacity(repeats);
        for rep in 0..repeats {
            let samples = test
                .samples
                .iter()
                .enumerate()
                .map(|(i, s)| {
                    let cloud = random_dropout(&s.cloud, keep, rng::derive_seed(seed, &format!("dropout/{rep}/{i}")))?;
                    Ok(Sample {
                        cloud,
                        label: s.label,
                        point_labels: None,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let subset = Dataset {
                samples,
                ..test.clone()
            };
            accuracies.push(evaluate(model, &subset, 32)?.metric());
        }
        let mean = accuracies.iter().sum::<f64>() / repeats as f64;
        table.rows.push(DropoutRow { keep, accuracies, mean });
    }
    Ok(table)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    Full,
    CombineAtEnd,
    CombinePerLayer,
    Residual,
    NoAttention,
    MaxPool,
    ConcatAttention,
    MaxPoolAttention,
    Gfa,
    NoTransformer,
    PointNetTransformer,
    FatTransformer,
    /// Full model with the last hidden dense layer of the head removed.
    MinusFc,
}

impl Variant {
    pub const ALL: [Variant; 13] = [
        Variant::Full,
        Variant::CombineAtEnd,
        Variant::CombinePerLayer,
        Variant::Residual,
        Variant::NoAttention,
        Variant::MaxPool,
        Variant::ConcatAttention,
        Variant::MaxPoolAttention,
        Variant::Gfa,
        Variant::NoTransformer,
        Variant::PointNetTransformer,
        Variant::FatTransformer,
        Variant::MinusFc,
    ];

    /// The variant's model configuration derived from the full model.
    pub fn apply(self, base: &ModelConfig) -> ModelConfig {
        let mut c = base.clone();
        match self {
            Variant::Full => {}
            Variant::CombineAtEnd => {
                c.combine = Combine::AtEnd;
                c.residual = false;
            }
            Variant::CombinePerLayer => {
                c.combine = Combine::PerLayer;
                c.residual = false;
            }
            Variant::Residual => {
                c.combine = Combine::PerLayer;
                c.residual = true;
            }
            Variant::NoAttention => c.attention = false,
            Variant::MaxPool => c.aggregation = Aggregation::MaxPool,
            Variant::ConcatAttention => c.aggregation = Aggregation::ConcatAttention,
            Variant::MaxPoolAttention => c.aggregation = Aggregation::MaxPoolAttention,
            Variant::Gfa => c.aggregation = Aggregation::Gfa,
            Variant::NoTransformer => c.transformer = TransformerKind::None,
            Variant::PointNetTransformer => c.transformer = TransformerKind::PointNet,
            Variant::FatTransformer => c.transformer = TransformerKind::Fat,
            Variant::MinusFc => {
                c.head.pop();
            }
        }
        c
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.to_string() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation variant `{s}`")))
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Full => "full",
            Variant::CombineAtEnd => "combine-at-end",
            Variant::CombinePerLayer => "combine-per-layer",
            Variant::Residual => "+residual",
            Variant::NoAttention => "no-attention",
            Variant::MaxPool => "mp",
            Variant::ConcatAttention => "ca",
            Variant::MaxPoolAttention => "mpa",
            Variant::Gfa => "gfa",
            Variant::NoTransformer => "no-transformer",
            Variant::PointNetTransformer => "tnet",
            Variant::FatTransformer => "fat-tnet",
            Variant::MinusFc => "minus-fc",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: Variant,
    pub parameters: usize,
    /// Validation metric per seed, in seed order.
    pub metrics: Vec<f64>,
    pub median: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AblationReport {
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn row(&self, v: Variant) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == v)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("variant,parameters,median");
        for seed in &self.seeds {
            let _ = write!(s, ",seed_{seed}");
        }
        s.push('\n');
        for r in &self.rows {
            let _ = write!(s, "{},{},{:.6}", r.variant, r.parameters, r.median);
            for m in &r.metrics {
                let _ = write!(s, ",{m:.6}");
            }
            s.push('\n');
        }
        s
    }
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.is_empty() {
        f64::NAN
    } else if v.len() % 2 == 1 {
        v[m]
    } else {
        (v[m - 1] + v[m]) / 2.0
    }
}

/// Trains every variant once per seed and reports the median test metric.
/// Each seed drives model initialisation, shuffling and augmentation.
pub fn run_ablation_suite(
    base: &ModelConfig,
    train_set: &Dataset,
    test_set: &Dataset,
    variants: &[Variant],
    seeds: &[u64],
    train_cfg: &TrainConfig,
    mut progress: impl FnMut(Variant, u64, f64),
) -> Result<AblationReport> {
    if seeds.is_empty() {
        return Err(Error::InvalidArgument("ablation needs at least one seed".into()));
    }
    let mut report = AblationReport {
        seeds: seeds.to_vec(),
        rows: Vec::new(),
    };
    for &v in variants {
        let cfg = v.apply(base);
        let mut metrics = Vec::with_capacity(seeds.len());
        let mut parameters = 0;
        for &seed in seeds {
            let mut model = Model::<f32>::new(cfg.clone(), seed)?;
            parameters = model.count_parameters();
            let tc = TrainConfig {
                seed,
                ..train_cfg.clone()
            };
            train(&mut model, train_set, None, &tc, |_| {})?;
            let m = evaluate(&model, test_set, 32)?.metric();
            progress(v, seed, m);
            metrics.push(m);
        }
        report.rows.push(AblationRow {
            variant: v,
            parameters,
            median: median(&metrics),
            metrics,
        });
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.to_string().parse::<Variant>().unwrap(), v);
        }
        assert!("no-gfa".parse::<Variant>().is_err());
    }

    #[test]
    fn medians() {
        assert_eq!(median(&[0.3, 0.1, 0.2]), 0.2);
        assert_eq!(median(&[0.4, 0.1, 0.2, 0.3]), 0.25);
    }

    #[test]
    fn no_attention_has_fewer_parameters() {
        let base = crate::gradcheck::tiny_config();
        let full = Model::<f32>::new(base.clone(), 0).unwrap().count_parameters();
        let na = Model::<f32>::new(Variant::NoAttention.apply(&base), 0)
            .unwrap()
            .count_parameters();
        assert!(na < full);
    }
}
