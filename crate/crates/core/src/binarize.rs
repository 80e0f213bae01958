//! Threshold binarization with a Gaussian surrogate gradient, mask-driven
//! selective projection, and nonzero-ratio statistics.

use std::f64::consts::PI;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::counter;
use crate::error::{Error, Result};
use crate::tape::{GradRule, Tape, Var};
use crate::tensor::{c, ensure_same_shape, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinarizeSpec {
    pub tau: f64,
}

impl Default for BinarizeSpec {
    fn default() -> Self {
        Self { tau: 1.0 }
    }
}

impl BinarizeSpec {
    pub fn new(tau: f64) -> Result<Self> {
        if !tau.is_finite() {
            return Err(Error::Domain(format!("threshold must be finite, got {tau}")));
        }
        Ok(Self { tau })
    }
}

/// `1` where `x > tau` (strict), else `0`.
pub fn binarize<T: Scalar>(x: &Tensor<T>, spec: BinarizeSpec) -> Result<Tensor<T>> {
    if !x.all_finite() {
        return Err(Error::NonFinite("binarize".into()));
    }
    let tau: T = c(spec.tau);
    Ok(x.map(|v| if v > tau { T::one() } else { T::zero() }))
}

/// Backward rule for [`binarize`]:
/// `upstream ⊙ sqrt(2/π)·exp(−2·(x − tau)²)`, with `x` the forward input.
pub fn surrogate_grad<T: Scalar>(x: &Tensor<T>, upstream: &Tensor<T>, spec: BinarizeSpec) -> Result<Tensor<T>> {
    ensure_same_shape("surrogate_grad", x, upstream)?;
    let peak: T = c((2.0 / PI).sqrt());
    let tau: T = c(spec.tau);
    let two: T = c(2.0);
    x.zip_map(upstream, "surrogate_grad", |xv, g| {
        let z = xv - tau;
        g * peak * (-two * z * z).exp()
    })
}

struct Surrogate(BinarizeSpec);

impl<T: Scalar> GradRule<T> for Surrogate {
    fn name(&self) -> &'static str {
        "binarize"
    }

    fn backward(&self, input: &Tensor<T>, _output: &Tensor<T>, upstream: &Tensor<T>) -> Result<Tensor<T>> {
        surrogate_grad(input, upstream, self.0)
    }
}

impl<T: Scalar> Tape<T> {
    /// Binarizes `x` on the tape; gradients flow back through the surrogate.
    /// Each element charges one comparison (an addition) to the counter.
    pub fn binarize(&mut self, x: Var, spec: BinarizeSpec) -> Result<Var> {
        let out = binarize(self.try_value(x)?, spec)?;
        counter::charge(out.len(), 0);
        self.custom(x, out, Box::new(Surrogate(spec)))
    }
}

/// Selection-and-add projection `x_bin · w` for a `{0,1}` mask, without
/// multiplications.
pub fn selective_project<T: Scalar>(x_bin: &Tensor<T>, w: &Tensor<T>) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let x = tape.constant(x_bin.clone());
    let w = tape.constant(w.clone());
    let out = tape.selective_project(x, w)?;
    Ok(tape.value(out).clone())
}

/// Fraction of ones in a `{0,1}` tensor.
pub fn nonzero_ratio<T: Scalar>(x_bin: &Tensor<T>) -> Result<f64> {
    if x_bin.is_empty() {
        return Err(Error::DegenerateInput("nonzero_ratio of an empty tensor".into()));
    }
    let mut ones = 0usize;
    for (index, &v) in x_bin.data().iter().enumerate() {
        if v == T::one() {
            ones += 1;
        } else if v != T::zero() {
            return Err(Error::NonBinary { index, value: v.to_f64_lossy() });
        }
    }
    Ok(ones as f64 / x_bin.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NonzeroStats {
    pub module_label: String,
    pub layer_index: usize,
    pub rho: f64,
}

impl NonzeroStats {
    pub const CSV_HEADER: &'static str = "module_label,layer_index,rho";

    pub fn csv_row(&self) -> String {
        format!("{},{},{:.5}", self.module_label, self.layer_index, self.rho)
    }
}

pub fn stats_to_csv(rows: &[NonzeroStats]) -> String {
    let mut s = String::from(NonzeroStats::CSV_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(s, "{}", r.csv_row());
    }
    s
}
