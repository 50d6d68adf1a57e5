//! End-to-end gradient check against central finite differences in `f64`.

use crate::alignment::TransformerKind;
use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::model::{Model, ModelConfig};
use crate::params::{Ctx, Mode, ParamId, ParamStore};
use crate::rng;
use crate::tensor::Tensor;

use rand::Rng as _;

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
/// Round-off in a central difference with `STEP` is around `1e-10 * |L|`,
/// so relative errors are only resolvable above `1e-10 * |L| / TOLERANCE`.
/// Gradients below `FLOOR * max(|L|, 1)` on both sides are compared
/// absolutely.
pub const FLOOR: f64 = 1e-5;

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub max_rel_err: f64,
    /// `name[index]` of the worst element.
    pub worst: String,
    /// Analytic and numeric gradient at the worst element.
    pub worst_pair: (f64, f64),
    pub checked: usize,
    /// Elements whose central stencil straddled a non-differentiable point
    /// and were compared against a one-sided stencil instead.
    pub kinks: usize,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < TOLERANCE
    }
}

/// The smallest full classifier: every component enabled, tiny widths.
pub fn tiny_config() -> ModelConfig {
    let mut c = ModelConfig::classifier(3);
    c.widths = vec![8, 8, 16];
    c.final_width = 32;
    c.head = vec![16];
    c.k = 3;
    c.transformer = TransformerKind::Fat;
    c.tnet_widths = vec![8, 16];
    c.tnet_head = vec![8];
    c
}

#[derive(Clone, Debug)]
pub struct GradcheckSpec {
    pub config: ModelConfig,
    pub points: usize,
    pub batch: usize,
    pub mode: Mode,
    pub seed: u64,
}

impl GradcheckSpec {
    pub fn tiny(seed: u64) -> Self {
        Self {
            config: tiny_config(),
            points: 8,
            batch: 4,
            mode: Mode::Train,
            seed,
        }
    }
}

/// One checked scalar.
#[derive(Clone, Debug, PartialEq)]
pub struct GradEntry {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    /// The central stencil straddled a non-differentiable point.
    pub kink: bool,
    /// Magnitude below which the comparison is absolute.
    pub floor: f64,
}

/// Second-order one-sided difference from `f(0)`, `f(h)`, `f(2h)`.
fn one_sided(f0: f64, f1: f64, f2: f64, h: f64) -> f64 {
    (-3.0 * f0 + 4.0 * f1 - f2) / (2.0 * h)
}

fn agree(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-5 * a.abs().max(b.abs()) + 1e-9
}

/// Central-difference derivative of `f` at 0. When the left and right
/// one-sided stencils disagree a kink lies within `2h`; the side that is
/// stable under step halving sees a single smooth piece and is used instead.
fn numeric_derivative(f0: f64, mut f: impl FnMut(f64) -> Result<f64>) -> Result<(f64, bool)> {
    let (p1, m1) = (f(STEP)?, f(-STEP)?);
    let central = (p1 - m1) / (2.0 * STEP);
    let (p2, m2) = (f(2.0 * STEP)?, f(-2.0 * STEP)?);
    let right = one_sided(f0, p1, p2, STEP);
    let left = -one_sided(f0, m1, m2, STEP);
    if agree(left, right) {
        return Ok((central, false));
    }
    let (ph, mh) = (f(STEP / 2.0)?, f(-STEP / 2.0)?);
    let right_ok = agree(right, one_sided(f0, ph, p1, STEP / 2.0));
    let left_ok = agree(left, -one_sided(f0, mh, m1, STEP / 2.0));
    Ok(match (left_ok, right_ok) {
        (true, false) => (left, true),
        (false, true) => (right, true),
        _ => (central, false),
    })
}

/// Checks every trainable scalar of `store` for the scalar loss built by `f`.
pub fn check<F>(store: &mut ParamStore<f64>, mode: Mode, f: F) -> Result<Vec<GradEntry>>
where
    F: for<'s, 't> Fn(&Ctx<'s, 't, f64>) -> Result<Var<'t, f64>>,
{
    let eval = |store: &ParamStore<f64>| -> Result<f64> {
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, store, mode).with_grad(false);
        Ok(f(&ctx)?.value().item())
    };
    let analytic = {
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, store, mode).with_grad(true);
        let root = f(&ctx)?;
        let grads = tape.backward(root)?;
        ctx.param_grads(&grads)
    };
    let base = eval(store)?;
    let mut out = Vec::new();
    let ids: Vec<ParamId> = store.trainable_ids().collect();
    for id in ids {
        let name = store.name(id).to_string();
        let a = analytic
            .get(&id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(store.get(id).shape()));
        for i in 0..a.len() {
            let orig = store.get(id).data()[i];
            let (numeric, kink) = numeric_derivative(base, |t| {
                store.get_mut(id).data_mut()[i] = orig + t;
                let l = eval(store);
                store.get_mut(id).data_mut()[i] = orig;
                l
            })?;
            out.push(GradEntry {
                name: name.clone(),
                index: i,
                analytic: a.data()[i],
                numeric,
                kink,
                floor: FLOOR * base.abs().max(1.0),
            });
        }
    }
    Ok(out)
}

impl GradReport {
    /// Summarises entries with [`relative_error`].
    pub fn from_entries(entries: &[GradEntry]) -> Self {
        let mut r = GradReport {
            max_rel_err: 0.0,
            worst: String::new(),
            worst_pair: (0.0, 0.0),
            checked: entries.len(),
            kinks: entries.iter().filter(|e| e.kink).count(),
        };
        for e in entries {
            let err = relative_error(e.analytic, e.numeric, e.floor);
            if err > r.max_rel_err || r.worst.is_empty() {
                r.max_rel_err = err;
                r.worst = format!("{}[{}]", e.name, e.index);
                r.worst_pair = (e.analytic, e.numeric);
            }
        }
        r
    }
}

/// Compares every trainable scalar's analytic gradient with a central
/// difference. Parameters are perturbed first so that zero-initialised
/// tensors do not hide errors.
pub fn run(spec: &GradcheckSpec) -> Result<GradReport> {
    let mut model = Model::<f64>::new(spec.config.clone(), spec.seed)?;
    model.store.perturb(rng::derive_seed(spec.seed, "gradcheck/perturb"), 0.1);
    let mut r = rng::substream(spec.seed, "gradcheck/input");
    let x = Tensor::from_fn(&[spec.batch, spec.points, 3], |_| r.random_range(-1.0..1.0));
    let labels: Vec<usize> = (0..spec.batch).map(|_| r.random_range(0..spec.config.outputs)).collect();
    let mut store = std::mem::replace(&mut model.store, ParamStore::new(0));
    let entries = check(&mut store, spec.mode, |ctx| {
        let logits = model.forward(ctx, ctx.input(x.clone()))?;
        model.loss(logits, &labels)
    })?;
    Ok(GradReport::from_entries(&entries))
}
