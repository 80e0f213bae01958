//! Central finite-difference gradient checks in double precision.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{attend, AttentionConfig, AttentionKind, Side};
use crate::binarize::{binarize, selective_project, BinarizeSpec};
use crate::error::{Error, Result};
use crate::params::Params;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Central differences of `f` at `x` with step `h`.
pub fn finite_difference(f: impl Fn(&Tensor<f64>) -> Result<f64>, x: &Tensor<f64>, h: f64) -> Result<Tensor<f64>> {
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let down = f(&probe)?;
        probe.data_mut()[i] = orig;
        out.push((up - down) / (2.0 * h));
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// `‖a − b‖∞ / max(‖a‖∞, ‖b‖∞)`, with a floor on the denominator so that
/// all-zero gradients compare as equal.
pub fn relative_error(analytic: &Tensor<f64>, numeric: &Tensor<f64>) -> Result<f64> {
    let diff = analytic.max_abs_diff(numeric)?;
    let scale = analytic
        .data()
        .iter()
        .chain(numeric.data())
        .fold(0.0f64, |m, v| m.max(v.abs()));
    Ok(diff / scale.max(1e-8))
}

/// Differentiable paths covered by [`run_gradcheck`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GradOp {
    Binarize,
    L1Attention,
    VanillaAttention,
    Dense,
    RandInit,
}

impl GradOp {
    pub const ALL: [GradOp; 5] = [GradOp::Binarize, GradOp::L1Attention, GradOp::VanillaAttention, GradOp::Dense, GradOp::RandInit];

    pub fn name(self) -> &'static str {
        match self {
            GradOp::Binarize => "binarize",
            GradOp::L1Attention => "l1-attention",
            GradOp::VanillaAttention => "vanilla-attention",
            GradOp::Dense => "dense",
            GradOp::RandInit => "randinit",
        }
    }

    /// Finite-difference tolerance, or the exact-match tolerance of the
    /// surrogate check for `Binarize`.
    pub fn tolerance(self) -> f64 {
        match self {
            GradOp::Binarize => 1e-12,
            _ => 1e-4,
        }
    }
}

impl fmt::Display for GradOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for GradOp {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        GradOp::ALL
            .into_iter()
            .find(|op| op.name() == s || (s == "rand-init" && *op == GradOp::RandInit))
            .ok_or_else(|| Error::Config(format!("unknown gradcheck op `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckResult {
    pub op: GradOp,
    pub trial: usize,
    /// Relative error against finite differences; absolute error against the
    /// closed-form surrogate for `Binarize`.
    pub error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

pub const FD_STEP: f64 = 1e-5;
/// Minimum distance kept from any nondifferentiable point when sampling.
const KINK_MARGIN: f64 = 1e-3;

/// Runs `trials` seeded checks of `op` in double precision.
pub fn run_gradcheck(op: GradOp, seed: u64, trials: usize) -> Result<Vec<GradcheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..trials)
        .map(|trial| {
            let error = match op {
                GradOp::Binarize => binarize_trial(&mut rng)?,
                _ => attention_trial(op, &mut rng)?,
            };
            let tolerance = op.tolerance();
            Ok(GradcheckResult { op, trial, error, tolerance, passed: error <= tolerance })
        })
        .collect()
}

fn binarize_trial(rng: &mut ChaCha8Rng) -> Result<f64> {
    let spec = BinarizeSpec::default();
    let mut x = Tensor::<f64>::uniform(vec![4, 6], 2.0, rng).map(|v| v + spec.tau);
    // The Gaussian peak itself.
    x.data_mut()[0] = spec.tau;
    let mut upstream = Tensor::<f64>::uniform(vec![4, 6], 1.0, rng);
    upstream.data_mut()[0] = 1.0;
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let b = tape.binarize(xv, spec)?;
    let u = tape.constant(upstream.clone());
    let prod = tape.mul(b, u)?;
    let loss = tape.sum_all(prod)?;
    let grads = tape.backward(loss)?;
    let got = grads.get(xv).ok_or_else(|| Error::Shape("binarize input received no gradient".into()))?;
    let peak = (2.0 / std::f64::consts::PI).sqrt();
    let want = x.zip_map(&upstream, "surrogate oracle", |xi, ui| ui * peak * (-2.0 * (xi - spec.tau).powi(2)).exp())?;
    got.max_abs_diff(&want)
}

struct Setup {
    config: AttentionConfig,
    params: Params<f64>,
    x: Tensor<f64>,
    y: Tensor<f64>,
    /// Fixed cotangent contracted with the output to form a scalar loss.
    probe: Tensor<f64>,
}

fn setup(op: GradOp, rng: &mut ChaCha8Rng) -> Result<Setup> {
    let (d, heads, l1, l2) = (4, 2, 3, 4);
    let kind = match op {
        GradOp::VanillaAttention => AttentionKind::Vanilla,
        GradOp::L1Attention => AttentionKind::EAtt,
        GradOp::Dense => AttentionKind::Dense,
        GradOp::RandInit => AttentionKind::RandInit,
        GradOp::Binarize => unreachable!("binarize is checked against its closed form"),
    };
    let config = AttentionConfig::new(kind, d, heads, 5)?;
    for _ in 0..1000 {
        let mut params: Params<f64> = config.init_params(rng)?;
        for (_, t) in params.iter_mut() {
            *t = t.map(|v| v * 2.0 * (d as f64).sqrt());
        }
        let x = Tensor::uniform(vec![l1, d], 1.5, rng).map(|v| v + 1.0);
        let y = Tensor::uniform(vec![l2, d], 1.5, rng).map(|v| v + 1.0);
        let probe = Tensor::uniform(vec![l1, d], 1.0, rng);
        let s = Setup { config, params, x, y, probe };
        if clear_of_kinks(&s)? {
            return Ok(s);
        }
    }
    Err(Error::DegenerateInput("could not sample a kink-free instance".into()))
}

/// E-ATT needs every per-channel `|q - k|` away from zero; Dense needs every
/// hidden pre-activation away from zero.
fn clear_of_kinks(s: &Setup) -> Result<bool> {
    let min_abs = |t: &Tensor<f64>| t.data().iter().fold(f64::INFINITY, |m, v| m.min(v.abs()));
    match s.config.kind {
        AttentionKind::EAtt => {
            let spec = BinarizeSpec::new(s.config.tau)?;
            let q = selective_project(&binarize(&s.x, spec)?, s.params.get("w_q")?)?;
            let k = selective_project(&binarize(&s.y, spec)?, s.params.get("w_k")?)?;
            let d = s.config.d;
            let mut m = f64::INFINITY;
            for i in 0..q.outer_len() {
                for j in 0..k.outer_len() {
                    for c in 0..d {
                        m = m.min((q.data()[i * d + c] - k.data()[j * d + c]).abs());
                    }
                }
            }
            Ok(m > KINK_MARGIN)
        }
        AttentionKind::Dense => {
            let mut tape = Tape::new();
            let x = tape.constant(s.x.clone());
            let w = tape.constant(s.params.get("w1")?.clone());
            let h = tape.matmul(x, w)?;
            Ok(min_abs(tape.value(h)) > KINK_MARGIN)
        }
        _ => Ok(true),
    }
}

/// Loss `Σ output ∘ probe` with every parameter (and, for paths that are
/// differentiable in them, the inputs) as leaves.
fn loss_and_grads(s: &Setup, params: &Params<f64>, x: &Tensor<f64>, y: &Tensor<f64>) -> Result<(f64, Vec<Tensor<f64>>)> {
    let mut tape = Tape::new();
    let differentiable_inputs = s.config.kind != AttentionKind::EAtt;
    let (xv, yv) = if differentiable_inputs {
        (tape.leaf(x.clone()), tape.leaf(y.clone()))
    } else {
        (tape.constant(x.clone()), tape.constant(y.clone()))
    };
    let bound = params.bind(&mut tape);
    let out = attend(&mut tape, &s.config, &bound, "", Side::Raw(xv), Side::Raw(yv), None)?;
    let probe = tape.constant(s.probe.clone());
    let prod = tape.mul(out.output, probe)?;
    let loss = tape.sum_all(prod)?;
    let value = tape.value(loss).data()[0];
    let grads = tape.backward(loss)?;
    let mut vars: Vec<_> = bound.iter().map(|(_, v)| *v).collect();
    if differentiable_inputs {
        vars.extend([xv, yv]);
    }
    let gs = vars
        .into_iter()
        .map(|v| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(tape.value(v).shape().to_vec())))
        .collect();
    Ok((value, gs))
}

fn attention_trial(op: GradOp, rng: &mut ChaCha8Rng) -> Result<f64> {
    let s = setup(op, rng)?;
    let (_, analytic) = loss_and_grads(&s, &s.params, &s.x, &s.y)?;
    let names: Vec<String> = s.params.names().cloned().collect();
    let mut worst = 0f64;
    for (i, name) in names.iter().enumerate() {
        let numeric = finite_difference(
            |t| {
                let mut p = s.params.clone();
                p.insert(name.clone(), t.clone());
                Ok(loss_and_grads(&s, &p, &s.x, &s.y)?.0)
            },
            s.params.get(name)?,
            FD_STEP,
        )?;
        worst = worst.max(relative_error(&analytic[i], &numeric)?);
    }
    if s.config.kind != AttentionKind::EAtt {
        let n = names.len();
        let gx = finite_difference(|t| Ok(loss_and_grads(&s, &s.params, t, &s.y)?.0), &s.x, FD_STEP)?;
        let gy = finite_difference(|t| Ok(loss_and_grads(&s, &s.params, &s.x, t)?.0), &s.y, FD_STEP)?;
        worst = worst.max(relative_error(&analytic[n], &gx)?);
        worst = worst.max(relative_error(&analytic[n + 1], &gy)?);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_derivative() {
        let x = Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap();
        let g = finite_difference(|t| Ok(t.data().iter().map(|v| v * v).sum()), &x, 1e-5).unwrap();
        let exact = x.map(|v| 2.0 * v);
        assert!(relative_error(&exact, &g).unwrap() < 1e-9);
    }

    #[test]
    fn op_names_round_trip() {
        for op in GradOp::ALL {
            assert_eq!(op.name().parse::<GradOp>().unwrap(), op);
        }
        assert!("softmax".parse::<GradOp>().is_err());
    }
}
