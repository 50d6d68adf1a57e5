//! Global feature aggregation over the point axis.

use std::fmt;
use std::str::FromStr;

use crate::autodiff::{concat_last, Var};
use crate::error::{Error, Result};
use crate::layers::AttentionBlock;
use crate::params::{Ctx, ParamStore};
use crate::tensor::{Float, Tensor};

/// Bottleneck ratio of the global aggregation attention.
pub const GFA_RATIO: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Aggregation {
    /// Attention-scaled max pool plus attention-scaled mean pool.
    Gfa,
    /// Plain max pool.
    MaxPool,
    /// Concatenation of the two attention-scaled pools.
    ConcatAttention,
    /// Max pool scaled by its attention gates.
    MaxPoolAttention,
}

impl Aggregation {
    pub fn output_width(self, d: usize) -> usize {
        match self {
            Aggregation::ConcatAttention => 2 * d,
            _ => d,
        }
    }

    pub fn has_attention(self) -> bool {
        self != Aggregation::MaxPool
    }
}

impl FromStr for Aggregation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gfa" => Ok(Self::Gfa),
            "mp" => Ok(Self::MaxPool),
            "ca" => Ok(Self::ConcatAttention),
            "mpa" => Ok(Self::MaxPoolAttention),
            other => Err(Error::Config(format!(
                "unknown aggregation `{other}` (expected gfa|mp|ca|mpa)"
            ))),
        }
    }
}

impl fmt::Display for Aggregation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Gfa => "gfa",
            Self::MaxPool => "mp",
            Self::ConcatAttention => "ca",
            Self::MaxPoolAttention => "mpa",
        })
    }
}

/// Aggregates `[B, N, D]` embeddings into `[B, D]` (or `[B, 2D]` for
/// [`Aggregation::ConcatAttention`]).
#[derive(Clone, Debug)]
pub struct GlobalAggregator {
    pub mode: Aggregation,
    pub channels: usize,
    /// One encoder/decoder shared by both pooled descriptors.
    pub attention: Option<AttentionBlock>,
}

impl GlobalAggregator {
    pub fn new<T: Float>(store: &mut ParamStore<T>, name: &str, channels: usize, mode: Aggregation) -> Self {
        let attention = mode
            .has_attention()
            .then(|| AttentionBlock::new(store, name, channels, GFA_RATIO));
        Self {
            mode,
            channels,
            attention,
        }
    }

    pub fn output_width(&self) -> usize {
        self.mode.output_width(self.channels)
    }

    pub fn forward<'t, T: Float>(&self, ctx: &Ctx<'_, 't, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        self.forward_with_gates(ctx, x, None)
    }

    /// `forced` pins the (max, mean) gates to constants instead of computing
    /// them from the attention block.
    pub fn forward_with_gates<'t, T: Float>(
        &self,
        ctx: &Ctx<'_, 't, T>,
        x: Var<'t, T>,
        forced: Option<(f64, f64)>,
    ) -> Result<Var<'t, T>> {
        let shape = x.shape();
        if shape.len() != 3 || shape[2] != self.channels {
            return Err(Error::shape("aggregate", &shape, &[0, 0, self.channels]));
        }
        let b = shape[0];
        let max = x.reduce_max(1)?;
        if self.mode == Aggregation::MaxPool {
            return Ok(max);
        }
        let gates = |pooled: Var<'t, T>, fixed: Option<f64>| -> Result<Var<'t, T>> {
            match (fixed, &self.attention) {
                (Some(v), _) => Ok(ctx.input(Tensor::full(&[b, self.channels], T::of(v)))),
                (None, Some(att)) => att.gates(ctx, pooled),
                (None, None) => unreachable!("attention modes own a block"),
            }
        };
        let max_scaled = max.mul(gates(max, forced.map(|f| f.0))?)?;
        if self.mode == Aggregation::MaxPoolAttention {
            return Ok(max_scaled);
        }
        let mean = x.reduce_mean(1)?;
        let mean_scaled = mean.mul(gates(mean, forced.map(|f| f.1))?)?;
        match self.mode {
            Aggregation::Gfa => max_scaled.add(mean_scaled),
            Aggregation::ConcatAttention => concat_last(&[max_scaled, mean_scaled]),
            _ => unreachable!(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::params::Mode;

    fn run(mode: Aggregation, x: Tensor<f64>, zero: bool) -> Tensor<f64> {
        let d = x.channels();
        let mut store = ParamStore::<f64>::new(2);
        let agg = GlobalAggregator::new(&mut store, "agg", d, mode);
        if zero {
            if let Some(att) = &agg.attention {
                store.get_mut(att.encoder).data_mut().fill(0.0);
                store.get_mut(att.decoder).data_mut().fill(0.0);
            }
        }
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store, Mode::Eval);
        let v = agg.forward(&ctx, ctx.input(x)).unwrap().value();
        v.as_ref().clone()
    }

    #[test]
    fn max_pool_example() {
        let x = Tensor::new(&[1, 2, 2], vec![1.0, 5.0, 3.0, 2.0]).unwrap();
        assert_eq!(run(Aggregation::MaxPool, x, false).data(), &[3.0, 5.0]);
    }

    #[test]
    fn concat_doubles_width() {
        let x = Tensor::from_fn(&[2, 5, 4], |i| (i as f64 * 0.37).cos());
        assert_eq!(run(Aggregation::ConcatAttention, x, false).shape(), &[2, 8]);
    }

    #[test]
    fn mpa_with_zero_weights_halves_max() {
        let x = Tensor::from_fn(&[1, 5, 4], |i| (i as f64 * 0.37).cos());
        let mp = run(Aggregation::MaxPool, x.clone(), false);
        let mpa = run(Aggregation::MaxPoolAttention, x, true);
        for (a, b) in mp.data().iter().zip(mpa.data()) {
            assert_eq!(a * 0.5, *b);
        }
    }

    #[test]
    fn unknown_mode_is_rejected() {
        assert!("avg".parse::<Aggregation>().is_err());
        assert_eq!("mpa".parse::<Aggregation>().unwrap(), Aggregation::MaxPoolAttention);
    }
}
