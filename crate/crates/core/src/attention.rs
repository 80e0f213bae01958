//! Vanilla dot-product attention, the Dense and RandInit synthesizers, and
//! E-ATT (binarized selective projection with negated-L1 scores), behind one
//! interface that covers self- and cross-attention, masking and multiple
//! heads.
//!
//! Scores are scaled by `1/√(d/heads)` for Vanilla and E-ATT; the
//! synthesizers use unscaled scores. Scaling is folded into the softmax, so
//! it is not charged to the operation counter. No variant uses biases.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::binarize::BinarizeSpec;
use crate::error::{Error, Result};
use crate::params::{Bound, Params};
use crate::tape::{Tape, Var};
use crate::tensor::{c, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum AttentionKind {
    #[serde(rename = "vanilla")]
    Vanilla,
    #[serde(rename = "dense")]
    Dense,
    #[serde(rename = "rand-init")]
    RandInit,
    #[serde(rename = "e-att")]
    EAtt,
}

impl AttentionKind {
    pub const ALL: [AttentionKind; 4] = [Self::Vanilla, Self::Dense, Self::RandInit, Self::EAtt];

    pub fn name(self) -> &'static str {
        match self {
            Self::Vanilla => "vanilla",
            Self::Dense => "dense",
            Self::RandInit => "rand-init",
            Self::EAtt => "e-att",
        }
    }

    /// Names of the trainable tensors this kind carries.
    pub fn param_names(self) -> &'static [&'static str] {
        match self {
            Self::Vanilla | Self::EAtt => &["w_q", "w_k", "w_v"],
            Self::Dense => &["w1", "w2", "w_v"],
            Self::RandInit => &["r", "w_v"],
        }
    }
}

impl fmt::Display for AttentionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AttentionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vanilla" => Ok(Self::Vanilla),
            "dense" => Ok(Self::Dense),
            "rand-init" | "randinit" => Ok(Self::RandInit),
            "e-att" | "eatt" => Ok(Self::EAtt),
            other => Err(Error::Config(format!("unknown attention kind `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub kind: AttentionKind,
    pub d: usize,
    pub heads: usize,
    pub max_len: usize,
    pub tau: f64,
}

impl AttentionConfig {
    pub fn new(kind: AttentionKind, d: usize, heads: usize, max_len: usize) -> Result<Self> {
        let cfg = Self { kind, d, heads, max_len, tau: 1.0 };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.max_len == 0 {
            return Err(Error::Config("d and max_len must be positive".into()));
        }
        if self.heads == 0 || self.d % self.heads != 0 {
            return Err(Error::Divisibility { d: self.d, heads: self.heads });
        }
        BinarizeSpec::new(self.tau)?;
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }

    pub fn param_shape(&self, name: &str) -> Result<Vec<usize>> {
        let (d, m) = (self.d, self.max_len);
        match (self.kind, name) {
            (_, "w_v") => Ok(vec![d, d]),
            (AttentionKind::Vanilla | AttentionKind::EAtt, "w_q" | "w_k") => Ok(vec![d, d]),
            (AttentionKind::Dense, "w1") => Ok(vec![d, d]),
            (AttentionKind::Dense, "w2") => Ok(vec![d, m]),
            (AttentionKind::RandInit, "r") => Ok(vec![self.heads, m, m]),
            _ => Err(Error::Config(format!("{} has no parameter {name}", self.kind))),
        }
    }

    /// Fresh parameters drawn from `uniform(−1/√d, 1/√d)`.
    pub fn init_params<T: Scalar, R: Rng>(&self, rng: &mut R) -> Result<Params<T>> {
        let bound = 1.0 / (self.d as f64).sqrt();
        let mut p = Params::new();
        for name in self.kind.param_names() {
            p.insert(*name, Tensor::uniform(self.param_shape(name)?, bound, rng));
        }
        Ok(p)
    }

    fn check_params<T: Scalar>(&self, params: &Params<T>) -> Result<()> {
        for name in self.kind.param_names() {
            let t = params.get(name)?;
            let want = self.param_shape(name)?;
            if t.shape() != want.as_slice() {
                return Err(Error::Dimension { op: format!("parameter {name}"), left: t.shape().to_vec(), right: want });
            }
        }
        Ok(())
    }
}

/// One side of an attention call. `Binarized` supplies a binary
/// representation computed elsewhere (used by E-ATT to share one binarized
/// encoder output across decoder layers); the other variants read `values`.
#[derive(Clone, Copy, Debug)]
pub enum Side {
    Raw(Var),
    Binarized { values: Var, binary: Var },
}

impl Side {
    pub fn values(&self) -> Var {
        match *self {
            Side::Raw(v) | Side::Binarized { values: v, .. } => v,
        }
    }
}

/// Tape handles produced by one attention call. `weights` has shape
/// `[B·heads, l1, l2]`; `output` matches the query-side input.
#[derive(Clone, Copy, Debug)]
pub struct AttendVars {
    pub output: Var,
    pub weights: Var,
    pub q_binary: Option<Var>,
    pub k_binary: Option<Var>,
}

/// Alignment only: attention weights from the query and key sides.
pub fn align<T: Scalar>(
    tape: &mut Tape<T>,
    cfg: &AttentionConfig,
    params: &Bound,
    prefix: &str,
    x: Side,
    y: Side,
    mask: Option<&Tensor<T>>,
) -> Result<AttendVars> {
    let p = |n: &str| params.get(&format!("{prefix}{n}"));
    let xv = x.values();
    let (bs, l1, l2) = batch_dims(tape, cfg, xv, y.values())?;
    let (h, dh) = (cfg.heads, cfg.head_dim());
    if let Some(m) = mask {
        if m.shape() != [l1, l2] {
            return Err(Error::Dimension { op: "attention mask".into(), left: m.shape().to_vec(), right: vec![l1, l2] });
        }
    }
    let to3 = |tape: &mut Tape<T>, v: Var, l: usize| -> Result<Var> {
        if tape.value(v).rank() == 2 {
            tape.reshape(v, &[1, l, cfg.d])
        } else {
            Ok(v)
        }
    };
    let mut q_binary = None;
    let mut k_binary = None;
    let inv_sqrt: T = c(1.0 / (dh as f64).sqrt());

    let (scores, scale) = match cfg.kind {
        AttentionKind::Vanilla => {
            let xv = to3(tape, xv, l1)?;
            let yv = to3(tape, y.values(), l2)?;
            let q = tape.matmul(xv, p("w_q")?)?;
            let k = tape.matmul(yv, p("w_k")?)?;
            let q = tape.split_heads(q, h)?;
            let k = tape.split_heads(k, h)?;
            let kt = tape.transpose(k)?;
            (tape.bmm(q, kt)?, inv_sqrt)
        }
        AttentionKind::EAtt => {
            let spec = BinarizeSpec::new(cfg.tau)?;
            let xb = match x {
                Side::Raw(v) => tape.binarize(v, spec)?,
                Side::Binarized { binary, .. } => binary,
            };
            let yb = match y {
                Side::Raw(v) => tape.binarize(v, spec)?,
                Side::Binarized { binary, .. } => binary,
            };
            q_binary = Some(xb);
            k_binary = Some(yb);
            let xb3 = to3(tape, xb, l1)?;
            let yb3 = to3(tape, yb, l2)?;
            let q = tape.selective_project(xb3, p("w_q")?)?;
            let k = tape.selective_project(yb3, p("w_k")?)?;
            let q = tape.split_heads(q, h)?;
            let k = tape.split_heads(k, h)?;
            let dist = tape.l1_pairwise(q, k)?;
            (tape.neg(dist)?, inv_sqrt)
        }
        AttentionKind::Dense => {
            if l2 > cfg.max_len {
                return Err(Error::Capacity { len: l2, max_len: cfg.max_len });
            }
            let xv = to3(tape, xv, l1)?;
            let hid = tape.matmul(xv, p("w1")?)?;
            let hid = tape.relu(hid)?;
            let hid = tape.split_heads(hid, h)?;
            let w2 = tape.slice_block(p("w2")?, cfg.d, l2)?;
            let w2 = tape.reshape(w2, &[h, dh, l2])?;
            let w2 = tape.tile(w2, bs)?;
            let w2 = tape.reshape(w2, &[bs * h, dh, l2])?;
            (tape.bmm(hid, w2)?, T::one())
        }
        AttentionKind::RandInit => {
            let longest = l1.max(l2);
            if longest > cfg.max_len {
                return Err(Error::Capacity { len: longest, max_len: cfg.max_len });
            }
            let r = tape.slice_block(p("r")?, l1, l2)?;
            let r = tape.tile(r, bs)?;
            (tape.reshape(r, &[bs * h, l1, l2])?, T::one())
        }
    };
    let scores = match mask {
        Some(m) => tape.add_mask(scores, m)?,
        None => scores,
    };
    let weights = tape.softmax_rows(scores, scale)?;
    Ok(AttendVars { output: weights, weights, q_binary, k_binary })
}

/// Full attention: alignment, value projection and weighted sum.
pub fn attend<T: Scalar>(
    tape: &mut Tape<T>,
    cfg: &AttentionConfig,
    params: &Bound,
    prefix: &str,
    x: Side,
    y: Side,
    mask: Option<&Tensor<T>>,
) -> Result<AttendVars> {
    let mut a = align(tape, cfg, params, prefix, x, y, mask)?;
    let xr = tape.value(x.values()).rank();
    let (bs, l1, l2) = batch_dims(tape, cfg, x.values(), y.values())?;
    let yv = y.values();
    let yv = if tape.value(yv).rank() == 2 { tape.reshape(yv, &[1, l2, cfg.d])? } else { yv };
    let v = tape.matmul(yv, params.get(&format!("{prefix}w_v"))?)?;
    let v = tape.split_heads(v, cfg.heads)?;
    let o = tape.bmm(a.weights, v)?;
    let o = tape.merge_heads(o, cfg.heads)?;
    a.output = if xr == 2 { tape.reshape(o, &[l1, cfg.d])? } else { o };
    debug_assert_eq!(tape.value(a.output).len(), bs * l1 * cfg.d);
    Ok(a)
}

fn batch_dims<T: Scalar>(tape: &Tape<T>, cfg: &AttentionConfig, x: Var, y: Var) -> Result<(usize, usize, usize)> {
    let (xs, ys) = (tape.try_value(x)?.shape(), tape.try_value(y)?.shape());
    let ok = xs.len() == ys.len()
        && (xs.len() == 2 || (xs.len() == 3 && xs[0] == ys[0]))
        && xs[xs.len() - 1] == cfg.d
        && ys[ys.len() - 1] == cfg.d;
    if !ok {
        return Err(Error::Dimension { op: "attention inputs".into(), left: xs.to_vec(), right: ys.to_vec() });
    }
    let r = xs.len();
    let bs = if r == 3 { xs[0] } else { 1 };
    Ok((bs, xs[r - 2], ys[r - 2]))
}

/// Result of a standalone forward pass. `weights` is `[l1, l2]` for a single
/// head on 2-D inputs and `[B·heads, l1, l2]` otherwise.
#[derive(Clone, Debug)]
pub struct AttentionOutput<T> {
    pub output: Tensor<T>,
    pub weights: Tensor<T>,
    pub q_binary: Option<Tensor<T>>,
    pub k_binary: Option<Tensor<T>>,
}

/// An attention configuration together with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionVariant<T> {
    pub config: AttentionConfig,
    pub params: Params<T>,
}

impl<T: Scalar> AttentionVariant<T> {
    pub fn new<R: Rng>(config: AttentionConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let params = config.init_params(rng)?;
        Ok(Self { config, params })
    }

    pub fn from_params(config: AttentionConfig, params: Params<T>) -> Result<Self> {
        config.validate()?;
        config.check_params(&params)?;
        Ok(Self { config, params })
    }

    pub fn kind(&self) -> AttentionKind {
        self.config.kind
    }

    /// Records the forward pass on `tape` with parameters bound as leaves.
    pub fn forward_on(
        &self,
        tape: &mut Tape<T>,
        x: Var,
        y: Var,
        mask: Option<&Tensor<T>>,
    ) -> Result<(Bound, AttendVars)> {
        let bound = self.params.bind(tape);
        let out = attend(tape, &self.config, &bound, "", Side::Raw(x), Side::Raw(y), mask)?;
        Ok((bound, out))
    }

    pub fn forward(&self, x: &Tensor<T>, y: &Tensor<T>, mask: Option<&Tensor<T>>) -> Result<AttentionOutput<T>> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let yv = tape.constant(y.clone());
        let (_, a) = self.forward_on(&mut tape, xv, yv, mask)?;
        let mut weights = tape.value(a.weights).clone();
        if x.rank() == 2 && self.config.heads == 1 {
            let s = weights.shape()[1..].to_vec();
            weights = weights.reshaped(s)?;
        }
        Ok(AttentionOutput {
            output: tape.value(a.output).clone(),
            weights,
            q_binary: a.q_binary.map(|v| tape.value(v).clone()),
            k_binary: a.k_binary.map(|v| tape.value(v).clone()),
        })
    }

    /// Same variant with `heads` heads. Projection matrices are kept; a
    /// RandInit score table is replicated per head.
    pub fn with_heads(&self, heads: usize) -> Result<Self> {
        let mut config = self.config;
        config.heads = heads;
        config.validate()?;
        let mut params = self.params.clone();
        if config.kind == AttentionKind::RandInit && heads != self.config.heads {
            let r = self.params.get("r")?;
            let m = config.max_len;
            let first = &r.data()[..m * m];
            let data = first.iter().copied().cycle().take(heads * m * m).collect();
            params.insert("r", Tensor::new(vec![heads, m, m], data)?);
        }
        Self::from_params(config, params)
    }

    /// Standalone alignment pass (no value path), used for op-count audits.
    pub fn align(&self, x: &Tensor<T>, y: &Tensor<T>, mask: Option<&Tensor<T>>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let yv = tape.constant(y.clone());
        let bound = self.params.bind(&mut tape);
        let a = align(&mut tape, &self.config, &bound, "", Side::Raw(xv), Side::Raw(yv), mask)?;
        Ok(tape.value(a.weights).clone())
    }
}

fn expect_kind<T: Scalar>(v: &AttentionVariant<T>, kind: AttentionKind) -> Result<()> {
    if v.kind() != kind {
        return Err(Error::WrongKind { expected: kind.to_string(), actual: v.kind().to_string() });
    }
    Ok(())
}

pub fn vanilla_forward<T: Scalar>(x: &Tensor<T>, y: &Tensor<T>, v: &AttentionVariant<T>, mask: Option<&Tensor<T>>) -> Result<AttentionOutput<T>> {
    expect_kind(v, AttentionKind::Vanilla)?;
    v.forward(x, y, mask)
}

pub fn eatt_forward<T: Scalar>(x: &Tensor<T>, y: &Tensor<T>, v: &AttentionVariant<T>, mask: Option<&Tensor<T>>) -> Result<AttentionOutput<T>> {
    expect_kind(v, AttentionKind::EAtt)?;
    v.forward(x, y, mask)
}

pub fn dense_forward<T: Scalar>(x: &Tensor<T>, y: &Tensor<T>, v: &AttentionVariant<T>, mask: Option<&Tensor<T>>) -> Result<AttentionOutput<T>> {
    expect_kind(v, AttentionKind::Dense)?;
    v.forward(x, y, mask)
}

pub fn randinit_forward<T: Scalar>(x: &Tensor<T>, y: &Tensor<T>, v: &AttentionVariant<T>, mask: Option<&Tensor<T>>) -> Result<AttentionOutput<T>> {
    expect_kind(v, AttentionKind::RandInit)?;
    v.forward(x, y, mask)
}

/// Wraps a variant to run with `heads` heads.
pub fn multi_head_wrap<T: Scalar>(v: &AttentionVariant<T>, heads: usize) -> Result<AttentionVariant<T>> {
    v.with_heads(heads)
}

/// Additive causal mask: `0` on and below the diagonal, `-inf` above.
pub fn causal_mask<T: Scalar>(l: usize) -> Tensor<T> {
    Tensor::from_fn(vec![l, l], |i| if i % l > i / l { T::neg_infinity() } else { T::zero() })
}
