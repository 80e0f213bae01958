//! Toy sequence tasks (copy, reversal) and a small pre-norm Transformer whose
//! attention modules are chosen per role, trained with Adam under the
//! warmup / inverse-square-root learning-rate schedule.

use std::collections::HashSet;
use std::fmt;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{attend, causal_mask, AttentionConfig, AttentionKind, Side};
use crate::binarize::{nonzero_ratio, BinarizeSpec, NonzeroStats};
use crate::checkpoint;
use crate::error::{Error, Result};
use crate::params::{Bound, Params};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
/// First token id available for sequence content.
pub const FIRST_SYMBOL: usize = 3;

/// `peak · min(t / warmup, 1, (decay / t)^0.5)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub peak: f64,
    pub warmup: f64,
    pub decay: f64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self { peak: 1e-3, warmup: 8000.0, decay: 20000.0 }
    }
}

impl LrSchedule {
    pub fn at(&self, t: u64) -> Result<f64> {
        if t < 1 {
            return Err(Error::Domain("learning-rate step must be >= 1".into()));
        }
        let t = t as f64;
        Ok(self.peak * (t / self.warmup).min(1.0).min((self.decay / t).sqrt()))
    }
}

/// `0.001 · min(t/8000, 1, (20000/t)^0.5)`.
pub fn lr_schedule(t: u64) -> Result<f64> {
    LrSchedule::default().at(t)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Copy,
    Reverse,
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "copy" => Ok(Task::Copy),
            "reverse" | "reversal" => Ok(Task::Reverse),
            other => Err(Error::Config(format!("unknown task `{other}`"))),
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Copy => "copy",
            Task::Reverse => "reverse",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyTaskConfig {
    pub task: Task,
    pub vocab_size: usize,
    /// Maximum content length; sequences are padded to it.
    pub seq_len: usize,
    /// Minimum content length; `None` fixes every sequence at `seq_len`.
    pub min_len: Option<usize>,
    pub train_examples: usize,
    pub eval_examples: usize,
    pub seed: u64,
}

impl Default for ToyTaskConfig {
    fn default() -> Self {
        Self { task: Task::Copy, vocab_size: 16, seq_len: 12, min_len: None, train_examples: 20_000, eval_examples: 256, seed: 1 }
    }
}

impl ToyTaskConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 3 {
            return Err(Error::Config("vocab_size must be at least 3".into()));
        }
        if self.seq_len < 2 {
            return Err(Error::Config("seq_len must be at least 2".into()));
        }
        if let Some(m) = self.min_len {
            if m == 0 || m > self.seq_len {
                return Err(Error::Config(format!("min_len must lie in [1, seq_len], got {m}")));
            }
        }
        Ok(())
    }

    fn symbols(&self) -> usize {
        self.vocab_size.saturating_sub(FIRST_SYMBOL)
    }

    fn min_len(&self) -> usize {
        self.min_len.unwrap_or(self.seq_len)
    }

    fn target_for(&self, source: &[usize]) -> Vec<usize> {
        match self.task {
            Task::Copy => source.to_vec(),
            Task::Reverse => source.iter().rev().copied().collect(),
        }
    }
}

/// Unpadded content sequences.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub source: Vec<usize>,
    pub target: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub train: Vec<Example>,
    pub eval: Vec<Example>,
}

/// Distinct random sequences over the content symbols; eval and train are
/// disjoint. Deterministic in `cfg.seed`.
pub fn generate_task(cfg: &ToyTaskConfig) -> Result<Dataset> {
    cfg.validate()?;
    let requested = (cfg.train_examples + cfg.eval_examples) as u128;
    let available = (cfg.min_len()..=cfg.seq_len)
        .map(|n| (cfg.symbols() as u128).checked_pow(n as u32).unwrap_or(u128::MAX))
        .fold(0u128, u128::saturating_add);
    if requested > available {
        return Err(Error::Exhaustion { requested, available });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut seen = HashSet::with_capacity(requested as usize);
    let mut all = Vec::with_capacity(requested as usize);
    while all.len() < requested as usize {
        let n = rng.gen_range(cfg.min_len()..=cfg.seq_len);
        let source: Vec<usize> = (0..n).map(|_| rng.gen_range(FIRST_SYMBOL..cfg.vocab_size)).collect();
        if seen.insert(source.clone()) {
            let target = cfg.target_for(&source);
            all.push(Example { source, target });
        }
    }
    let train = all.split_off(cfg.eval_examples);
    Ok(Dataset { train, eval: all })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Role {
    EncoderSelf,
    DecoderSelf,
    DecoderCross,
}

/// Attention kind per role.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoleKinds {
    pub encoder_self: AttentionKind,
    pub decoder_self: AttentionKind,
    pub decoder_cross: AttentionKind,
}

impl RoleKinds {
    pub fn all(kind: AttentionKind) -> Self {
        Self { encoder_self: kind, decoder_self: kind, decoder_cross: kind }
    }

    pub fn get(&self, role: Role) -> AttentionKind {
        match role {
            Role::EncoderSelf => self.encoder_self,
            Role::DecoderSelf => self.decoder_self,
            Role::DecoderCross => self.decoder_cross,
        }
    }

    /// Applies a spec such as `all=e-att`, `self=vanilla,cross=e-att` or
    /// `enc-self=dense,dec-self=vanilla,cross=rand-init` on top of `self`.
    /// Later entries override earlier ones.
    pub fn parse_onto(mut self, spec: &str) -> Result<Self> {
        for part in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (role, kind) = part
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("expected role=kind, got `{part}`")))?;
            let kind: AttentionKind = kind.trim().parse()?;
            match role.trim() {
                "all" => self = Self::all(kind),
                "self" => {
                    self.encoder_self = kind;
                    self.decoder_self = kind;
                }
                "enc-self" | "encoder-self" => self.encoder_self = kind,
                "dec-self" | "decoder-self" => self.decoder_self = kind,
                "cross" | "dec-cross" | "decoder-cross" => self.decoder_cross = kind,
                other => return Err(Error::Config(format!("unknown attention role `{other}`"))),
            }
        }
        Ok(self)
    }

    pub fn any_eatt(&self) -> bool {
        [self.encoder_self, self.decoder_self, self.decoder_cross].contains(&AttentionKind::EAtt)
    }
}

impl fmt::Display for RoleKinds {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "enc-self={},dec-self={},cross={}", self.encoder_self, self.decoder_self, self.decoder_cross)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Architecture {
    EncoderDecoder,
    /// Per-position tagging straight from the encoder output.
    EncoderOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub d: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub dropout: f64,
    pub attention: RoleKinds,
    pub tau: f64,
    pub architecture: Architecture,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 32,
            layers: 2,
            heads: 2,
            ffn_dim: 128,
            dropout: 0.0,
            attention: RoleKinds::all(AttentionKind::Vanilla),
            tau: 1.0,
            architecture: Architecture::EncoderDecoder,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.layers == 0 || self.ffn_dim == 0 {
            return Err(Error::Config("d, layers and ffn_dim must be positive".into()));
        }
        if self.heads == 0 || self.d % self.heads != 0 {
            return Err(Error::Divisibility { d: self.d, heads: self.heads });
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout must lie in [0, 1), got {}", self.dropout)));
        }
        BinarizeSpec::new(self.tau)?;
        Ok(())
    }

    fn attention_config(&self, role: Role, max_len: usize) -> AttentionConfig {
        AttentionConfig { kind: self.attention.get(role), d: self.d, heads: self.heads, max_len, tau: self.tau }
    }

    fn roles(&self) -> &'static [Role] {
        match self.architecture {
            Architecture::EncoderDecoder => &[Role::EncoderSelf, Role::DecoderSelf, Role::DecoderCross],
            Architecture::EncoderOnly => &[Role::EncoderSelf],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainOptions {
    pub steps: u64,
    pub batch_size: usize,
    pub eval_every: u64,
    pub schedule: LrSchedule,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; `0` disables clipping.
    pub clip_norm: f64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            steps: 3000,
            batch_size: 32,
            eval_every: 250,
            schedule: LrSchedule::default(),
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            clip_norm: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub step: u64,
    pub loss: f64,
    pub token_accuracy: f64,
    pub lr: f64,
}

pub fn metrics_to_csv(rows: &[MetricRow]) -> String {
    let mut s = String::from("step,loss,token_accuracy,lr\n");
    for r in rows {
        let _ = writeln!(s, "{},{:.6},{:.6},{:.6e}", r.step, r.loss, r.token_accuracy, r.lr);
    }
    s
}

/// Sequence-to-sequence model over one shared vocabulary.
#[derive(Clone, Debug, PartialEq)]
pub struct Seq2Seq {
    pub config: ModelConfig,
    pub vocab_size: usize,
    /// Padded source length.
    pub seq_len: usize,
    /// Attention capacity, `seq_len + 1` to fit the decoder's EOS position.
    pub max_len: usize,
    pub params: Params<f32>,
}

const LN_EPS: f32 = 1e-5;

/// Tape handles of one forward pass.
pub struct ForwardPass {
    pub logits: Var,
    /// Binarized representations feeding E-ATT modules:
    /// (module label, 1-based layer, tensor).
    pub binaries: Vec<(&'static str, usize, Var)>,
}

impl Seq2Seq {
    pub fn new(config: ModelConfig, vocab_size: usize, seq_len: usize, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let max_len = seq_len + 1;
        let d = config.d;
        let mut p = Params::new();
        let bound = 1.0 / (d as f64).sqrt();
        p.insert("embed.src", Tensor::uniform(vec![vocab_size, d], 1.0, rng));
        let with_decoder = config.architecture == Architecture::EncoderDecoder;
        if with_decoder {
            p.insert("embed.tgt", Tensor::uniform(vec![vocab_size, d], 1.0, rng));
        }
        p.insert("out.w", Tensor::uniform(vec![d, vocab_size], bound, rng));
        let ln = |p: &mut Params<f32>, name: &str| {
            p.insert(format!("{name}.g"), Tensor::ones(vec![d]));
            p.insert(format!("{name}.b"), Tensor::zeros(vec![d]));
        };
        let attn = |p: &mut Params<f32>, prefix: &str, role: Role, rng: &mut dyn rand::RngCore| -> Result<()> {
            let cfg = config.attention_config(role, max_len);
            let mut r = ChaCha8Rng::seed_from_u64(rng.gen());
            p.absorb(prefix, cfg.init_params(&mut r)?);
            p.insert(format!("{prefix}w_o"), Tensor::uniform(vec![d, d], bound, &mut r));
            if cfg.kind == AttentionKind::EAtt {
                // Threshold offset on the normalized input; the cross-attention
                // key side uses one shared offset for all layers.
                p.insert(format!("{prefix}shift"), Tensor::zeros(vec![d]));
            }
            Ok(())
        };
        let ffn = |p: &mut Params<f32>, prefix: &str, rng: &mut dyn rand::RngCore| {
            let mut r = ChaCha8Rng::seed_from_u64(rng.gen());
            p.insert(format!("{prefix}w1"), Tensor::uniform(vec![d, config.ffn_dim], bound, &mut r));
            let b2 = 1.0 / (config.ffn_dim as f64).sqrt();
            p.insert(format!("{prefix}w2"), Tensor::uniform(vec![config.ffn_dim, d], b2, &mut r));
        };
        for i in 0..config.layers {
            ln(&mut p, &format!("enc.{i}.ln1"));
            attn(&mut p, &format!("enc.{i}.self."), Role::EncoderSelf, rng)?;
            ln(&mut p, &format!("enc.{i}.ln2"));
            ffn(&mut p, &format!("enc.{i}.ffn."), rng);
        }
        ln(&mut p, "enc.ln");
        if with_decoder {
            for i in 0..config.layers {
                ln(&mut p, &format!("dec.{i}.ln1"));
                attn(&mut p, &format!("dec.{i}.self."), Role::DecoderSelf, rng)?;
                ln(&mut p, &format!("dec.{i}.ln2"));
                attn(&mut p, &format!("dec.{i}.cross."), Role::DecoderCross, rng)?;
                ln(&mut p, &format!("dec.{i}.ln3"));
                ffn(&mut p, &format!("dec.{i}.ffn."), rng);
            }
            ln(&mut p, "dec.ln");
            if config.attention.decoder_cross == AttentionKind::EAtt {
                p.insert("cross.key_shift", Tensor::zeros(vec![d]));
            }
        }
        Ok(Self { config, vocab_size, seq_len, max_len, params: p })
    }

    fn layer_norm(&self, tape: &mut Tape<f32>, b: &Bound, x: Var, name: &str) -> Result<Var> {
        tape.layer_norm(x, b.get(&format!("{name}.g"))?, b.get(&format!("{name}.b"))?, LN_EPS)
    }

    fn embed(&self, tape: &mut Tape<f32>, b: &Bound, table: &str, ids: &[usize], bs: usize, len: usize) -> Result<Var> {
        let d = self.config.d;
        let e = tape.embedding(b.get(table)?, ids)?;
        let e = tape.reshape(e, &[bs, len, d])?;
        let pe = tape.constant(positional_encoding(len, d));
        tape.add_bias(e, pe)
    }

    fn dropout(&self, tape: &mut Tape<f32>, x: Var, rng: Option<&mut ChaCha8Rng>) -> Result<Var> {
        let p = self.config.dropout;
        match rng {
            Some(rng) if p > 0.0 => {
                let keep = (1.0 / (1.0 - p)) as f32;
                let shape = tape.value(x).shape().to_vec();
                let mask = Tensor::from_fn(shape, |_| if rng.gen::<f64>() < p { 0.0 } else { keep });
                tape.dropout(x, mask)
            }
            _ => Ok(x),
        }
    }

    fn ffn(&self, tape: &mut Tape<f32>, b: &Bound, prefix: &str, x: Var) -> Result<Var> {
        let h = tape.matmul(x, b.get(&format!("{prefix}w1"))?)?;
        let h = tape.relu(h)?;
        tape.matmul(h, b.get(&format!("{prefix}w2"))?)
    }

    /// Binarized input for an E-ATT module: `binarize(h + shift)`.
    fn binarize_shifted(&self, tape: &mut Tape<f32>, b: &Bound, h: Var, shift: &str) -> Result<Var> {
        let s = tape.add_bias(h, b.get(shift)?)?;
        tape.binarize(s, BinarizeSpec { tau: self.config.tau })
    }

    #[allow(clippy::too_many_arguments)]
    fn self_attention(
        &self,
        tape: &mut Tape<f32>,
        b: &Bound,
        role: Role,
        prefix: &str,
        h: Var,
        mask: Option<&Tensor<f32>>,
        label: &'static str,
        layer: usize,
        binaries: &mut Vec<(&'static str, usize, Var)>,
    ) -> Result<Var> {
        let len = tape.value(h).shape()[1];
        let cfg = self.config.attention_config(role, self.max_len.max(len));
        let side = if cfg.kind == AttentionKind::EAtt {
            let bin = self.binarize_shifted(tape, b, h, &format!("{prefix}shift"))?;
            binaries.push((label, layer, bin));
            Side::Binarized { values: h, binary: bin }
        } else {
            Side::Raw(h)
        };
        let a = attend(tape, &cfg, b, prefix, side, side, mask)?;
        tape.matmul(a.output, b.get(&format!("{prefix}w_o"))?)
    }

    /// Encoder over `src` (`bs` sequences of `len` tokens), returning the
    /// final normalized states `[bs, len, d]`.
    pub fn encode(
        &self,
        tape: &mut Tape<f32>,
        b: &Bound,
        src: &[usize],
        bs: usize,
        mut rng: Option<&mut ChaCha8Rng>,
        binaries: &mut Vec<(&'static str, usize, Var)>,
    ) -> Result<Var> {
        let len = src.len() / bs;
        let mut x = self.embed(tape, b, "embed.src", src, bs, len)?;
        for i in 0..self.config.layers {
            let h = self.layer_norm(tape, b, x, &format!("enc.{i}.ln1"))?;
            let a = self.self_attention(tape, b, Role::EncoderSelf, &format!("enc.{i}.self."), h, None, "encoder-self", i + 1, binaries)?;
            let a = self.dropout(tape, a, rng.as_deref_mut())?;
            x = tape.add(x, a)?;
            let h = self.layer_norm(tape, b, x, &format!("enc.{i}.ln2"))?;
            let f = self.ffn(tape, b, &format!("enc.{i}.ffn."), h)?;
            let f = self.dropout(tape, f, rng.as_deref_mut())?;
            x = tape.add(x, f)?;
        }
        self.layer_norm(tape, b, x, "enc.ln")
    }

    /// Decoder logits `[bs·len, V]` for teacher-forced inputs `tgt_in`.
    #[allow(clippy::too_many_arguments)]
    pub fn decode(
        &self,
        tape: &mut Tape<f32>,
        b: &Bound,
        memory: Var,
        tgt_in: &[usize],
        bs: usize,
        mut rng: Option<&mut ChaCha8Rng>,
        binaries: &mut Vec<(&'static str, usize, Var)>,
    ) -> Result<Var> {
        let len = tgt_in.len() / bs;
        let src_len = tape.value(memory).shape()[1];
        let mask = causal_mask::<f32>(len);
        let cross_cfg = self.config.attention_config(Role::DecoderCross, self.max_len.max(len).max(src_len));
        let key_side = if cross_cfg.kind == AttentionKind::EAtt {
            let kb = self.binarize_shifted(tape, b, memory, "cross.key_shift")?;
            Side::Binarized { values: memory, binary: kb }
        } else {
            Side::Raw(memory)
        };
        let mut x = self.embed(tape, b, "embed.tgt", tgt_in, bs, len)?;
        for i in 0..self.config.layers {
            let layer = i + 1;
            let h = self.layer_norm(tape, b, x, &format!("dec.{i}.ln1"))?;
            let a = self.self_attention(tape, b, Role::DecoderSelf, &format!("dec.{i}.self."), h, Some(&mask), "decoder-self", layer, binaries)?;
            let a = self.dropout(tape, a, rng.as_deref_mut())?;
            x = tape.add(x, a)?;

            let h = self.layer_norm(tape, b, x, &format!("dec.{i}.ln2"))?;
            let prefix = format!("dec.{i}.cross.");
            let q_side = if cross_cfg.kind == AttentionKind::EAtt {
                let qb = self.binarize_shifted(tape, b, h, &format!("{prefix}shift"))?;
                binaries.push(("decoder-cross-query", layer, qb));
                if let Side::Binarized { binary, .. } = key_side {
                    binaries.push(("decoder-cross-key", layer, binary));
                }
                Side::Binarized { values: h, binary: qb }
            } else {
                Side::Raw(h)
            };
            let a = attend(tape, &cross_cfg, b, &prefix, q_side, key_side, None)?;
            let a = tape.matmul(a.output, b.get(&format!("{prefix}w_o"))?)?;
            let a = self.dropout(tape, a, rng.as_deref_mut())?;
            x = tape.add(x, a)?;

            let h = self.layer_norm(tape, b, x, &format!("dec.{i}.ln3"))?;
            let f = self.ffn(tape, b, &format!("dec.{i}.ffn."), h)?;
            let f = self.dropout(tape, f, rng.as_deref_mut())?;
            x = tape.add(x, f)?;
        }
        let x = self.layer_norm(tape, b, x, "dec.ln")?;
        let logits = tape.matmul(x, b.get("out.w")?)?;
        tape.reshape(logits, &[bs * len, self.vocab_size])
    }

    /// Length of a padded target row: content, EOS, then PAD for the
    /// decoder; content then PAD for encoder-only tagging.
    pub fn target_len(&self) -> usize {
        match self.config.architecture {
            Architecture::EncoderDecoder => self.seq_len + 1,
            Architecture::EncoderOnly => self.seq_len,
        }
    }

    fn check_len(&self, e: &Example) -> Result<()> {
        if e.source.is_empty() || e.source.len() > self.seq_len || e.target.len() > self.seq_len {
            return Err(Error::Capacity { len: e.source.len().max(e.target.len()), max_len: self.seq_len });
        }
        Ok(())
    }

    /// Sources padded to `seq_len`, flattened.
    pub fn source_ids(&self, batch: &[&Example]) -> Result<Vec<usize>> {
        let mut out = Vec::with_capacity(batch.len() * self.seq_len);
        for e in batch {
            self.check_len(e)?;
            out.extend_from_slice(&e.source);
            out.resize(out.len() + self.seq_len - e.source.len(), PAD);
        }
        Ok(out)
    }

    /// Targets padded to `target_len()`, flattened.
    pub fn target_ids(&self, batch: &[&Example]) -> Result<Vec<usize>> {
        let tl = self.target_len();
        let mut out = Vec::with_capacity(batch.len() * tl);
        for e in batch {
            self.check_len(e)?;
            out.extend_from_slice(&e.target);
            if self.config.architecture == Architecture::EncoderDecoder {
                out.push(EOS);
            }
            out.resize(out.len() + tl - e.target.len() - usize::from(self.config.architecture == Architecture::EncoderDecoder), PAD);
        }
        Ok(out)
    }

    /// Teacher-forced forward pass over a batch.
    pub fn forward(
        &self,
        tape: &mut Tape<f32>,
        b: &Bound,
        batch: &[&Example],
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<ForwardPass> {
        let bs = batch.len();
        let src = self.source_ids(batch)?;
        let mut binaries = Vec::new();
        let memory = self.encode(tape, b, &src, bs, rng.as_deref_mut(), &mut binaries)?;
        let logits = match self.config.architecture {
            Architecture::EncoderOnly => {
                let len = src.len() / bs;
                let l = tape.matmul(memory, b.get("out.w")?)?;
                tape.reshape(l, &[bs * len, self.vocab_size])?
            }
            Architecture::EncoderDecoder => {
                let tgt_in: Vec<usize> = self
                    .target_ids(batch)?
                    .chunks(self.target_len())
                    .flat_map(|t| std::iter::once(BOS).chain(t[..t.len() - 1].iter().copied()))
                    .collect();
                self.decode(tape, b, memory, &tgt_in, bs, rng, &mut binaries)?
            }
        };
        Ok(ForwardPass { logits, binaries })
    }

    /// Predicted target tokens: greedy decoding for encoder-decoder models,
    /// per-position argmax for encoder-only models.
    pub fn predict(&self, batch: &[&Example]) -> Result<Vec<Vec<usize>>> {
        let bs = batch.len();
        let len = self.target_len();
        let mut tape = Tape::new();
        let b = self.params.bind(&mut tape);
        let src = self.source_ids(batch)?;
        let mut scratch = Vec::new();
        let memory = self.encode(&mut tape, &b, &src, bs, None, &mut scratch)?;
        if self.config.architecture == Architecture::EncoderOnly {
            let l = tape.matmul(memory, b.get("out.w")?)?;
            let l = tape.reshape(l, &[bs * len, self.vocab_size])?;
            let am = tape.value(l).argmax_rows();
            return Ok(am.chunks(len).map(|c| c.to_vec()).collect());
        }
        let memory = tape.value(memory).clone();
        let mut out: Vec<Vec<usize>> = vec![Vec::with_capacity(len); bs];
        for step in 0..len {
            let mut t = Tape::new();
            let bd = self.params.bind(&mut t);
            let mem = t.constant(memory.clone());
            let tgt_in: Vec<usize> = out
                .iter()
                .flat_map(|o| std::iter::once(BOS).chain(o.iter().copied()))
                .collect();
            let logits = self.decode(&mut t, &bd, mem, &tgt_in, bs, None, &mut scratch)?;
            let am = t.value(logits).argmax_rows();
            for (i, o) in out.iter_mut().enumerate() {
                o.push(am[i * (step + 1) + step]);
            }
        }
        Ok(out)
    }
}


/// Sinusoidal position table `[len, d]`.
pub fn positional_encoding(len: usize, d: usize) -> Tensor<f32> {
    Tensor::from_fn(vec![len, d], |i| {
        let (pos, ch) = ((i / d) as f64, i % d);
        let rate = 10000f64.powf((2 * (ch / 2)) as f64 / d as f64);
        let v = if ch % 2 == 0 { (pos / rate).sin() } else { (pos / rate).cos() };
        v as f32
    })
}

/// Full training state: model, optimizer moments, RNG and metric history.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub step: u64,
    pub model: Seq2Seq,
    pub task: ToyTaskConfig,
    pub options: TrainOptions,
    pub adam_m: Params<f32>,
    pub adam_v: Params<f32>,
    pub rng: ChaCha8Rng,
    pub history: Vec<MetricRow>,
    pub step_losses: Vec<f32>,
}

impl TrainState {
    pub fn new(model: &ModelConfig, task: &ToyTaskConfig, options: &TrainOptions) -> Result<Self> {
        task.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(task.seed ^ 0x5eed_0f_7a11);
        let model = Seq2Seq::new(model.clone(), task.vocab_size, task.seq_len, &mut rng)?;
        let zeros = |p: &Params<f32>| {
            let mut z = Params::new();
            for (k, v) in p.iter() {
                z.insert(k.clone(), Tensor::zeros(v.shape().to_vec()));
            }
            z
        };
        Ok(Self {
            step: 0,
            adam_m: zeros(&model.params),
            adam_v: zeros(&model.params),
            model,
            task: task.clone(),
            options: options.clone(),
            rng,
            history: Vec::new(),
            step_losses: Vec::new(),
        })
    }

    pub fn final_accuracy(&self) -> Option<f64> {
        self.history.last().map(|r| r.token_accuracy)
    }

    /// One optimizer step on `batch`; returns the batch loss.
    pub fn step_on(&mut self, batch: &[&Example]) -> Result<f32> {
        let t = self.step + 1;
        let lr = self.options.schedule.at(t)?;
        let mut tape = Tape::new();
        let bound = self.model.params.bind(&mut tape);
        let targets = self.model.target_ids(batch)?;
        let diverged = |e: Error| match e {
            Error::NonFinite(_) | Error::DegenerateRow { .. } => Error::Divergence { step: t, lr },
            other => other,
        };
        let pass = self.model.forward(&mut tape, &bound, batch, Some(&mut self.rng)).map_err(diverged)?;
        let loss = tape.cross_entropy(pass.logits, &targets).map_err(diverged)?;
        let loss_value = tape.value(loss).data()[0];
        if !loss_value.is_finite() {
            return Err(Error::Divergence { step: t, lr });
        }
        let grads = tape.backward(loss).map_err(diverged)?;

        let mut sq = 0f64;
        for (_, var) in bound.iter() {
            if let Some(g) = grads.get(*var) {
                sq += g.data().iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>();
            }
        }
        let norm = sq.sqrt();
        if !norm.is_finite() {
            return Err(Error::Divergence { step: t, lr });
        }
        let clip = if self.options.clip_norm > 0.0 && norm > self.options.clip_norm { self.options.clip_norm / norm } else { 1.0 };

        let o = &self.options;
        let (b1, b2) = (o.beta1, o.beta2);
        let bc1 = 1.0 - b1.powi(t as i32);
        let bc2 = 1.0 - b2.powi(t as i32);
        let step_size = (lr / bc1) as f32;
        let (b1, b2, eps) = (b1 as f32, b2 as f32, o.eps as f32);
        let bc2_sqrt = (bc2.sqrt()) as f32;
        let clip = clip as f32;
        for (name, var) in bound.iter() {
            let Some(g) = grads.get(*var) else { continue };
            let p = self.model.params.get_mut(name)?;
            let m = self.adam_m.get_mut(name)?;
            let v = self.adam_v.get_mut(name)?;
            for (((pv, mv), vv), &gv) in p.data_mut().iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(g.data()) {
                let gv = gv * clip;
                *mv = b1 * *mv + (1.0 - b1) * gv;
                *vv = b2 * *vv + (1.0 - b2) * gv * gv;
                *pv -= step_size * *mv / ((*vv).sqrt() / bc2_sqrt + eps);
            }
        }
        self.step = t;
        self.step_losses.push(loss_value);
        Ok(loss_value)
    }

    /// Teacher-forced loss and decoded token accuracy on `examples`.
    pub fn evaluate(&self, examples: &[Example]) -> Result<(f64, f64)> {
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        let mut total = 0usize;
        for chunk in examples.chunks(128) {
            let batch: Vec<&Example> = chunk.iter().collect();
            let mut tape = Tape::new();
            let b = self.model.params.bind(&mut tape);
            let targets = self.model.target_ids(&batch)?;
            let pass = self.model.forward(&mut tape, &b, &batch, None)?;
            let loss = tape.cross_entropy(pass.logits, &targets)?;
            loss_sum += tape.value(loss).data()[0] as f64 * batch.len() as f64;
            let preds = self.model.predict(&batch)?;
            // Padding positions are not scored.
            for (p, &t) in preds.iter().flatten().zip(&targets) {
                if t != PAD {
                    total += 1;
                    correct += usize::from(*p == t);
                }
            }
        }
        Ok((loss_sum / examples.len() as f64, correct as f64 / total as f64))
    }

    fn record(&mut self, eval: &[Example]) -> Result<()> {
        let (loss, acc) = self.evaluate(eval)?;
        let lr = self.options.schedule.at(self.step.max(1))?;
        self.history.push(MetricRow { step: self.step, loss, token_accuracy: acc, lr });
        Ok(())
    }

    /// Runs `steps` more optimizer steps, evaluating every
    /// `options.eval_every` steps and at the end.
    pub fn run(&mut self, data: &Dataset, steps: u64) -> Result<()> {
        if data.train.is_empty() || data.eval.is_empty() {
            return Err(Error::Config("train and eval sets must be nonempty".into()));
        }
        if self.history.is_empty() {
            self.record(&data.eval)?;
        }
        let end = self.step + steps;
        let bs = self.options.batch_size.min(data.train.len()).max(1);
        while self.step < end {
            let batch: Vec<&Example> = data.train.choose_multiple(&mut self.rng, bs).collect();
            self.step_on(&batch)?;
            let due = self.options.eval_every > 0 && self.step % self.options.eval_every == 0;
            if due || self.step == end {
                if self.history.last().map(|r| r.step) != Some(self.step) {
                    self.record(&data.eval)?;
                }
            }
        }
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let mut tensors: Vec<(String, &Tensor<f32>)> = Vec::new();
        for (k, v) in self.model.params.iter() {
            tensors.push((format!("param.{k}"), v));
        }
        for (k, v) in self.adam_m.iter() {
            tensors.push((format!("adam_m.{k}"), v));
        }
        for (k, v) in self.adam_v.iter() {
            tensors.push((format!("adam_v.{k}"), v));
        }
        let losses = if self.step_losses.is_empty() { None } else { Some(Tensor::new(vec![self.step_losses.len()], self.step_losses.clone())?) };
        if let Some(l) = &losses {
            tensors.push(("history.step_loss".into(), l));
        }
        let meta = serde_json::json!({
            "step": self.step,
            "model": self.model.config,
            "vocab_size": self.model.vocab_size,
            "seq_len": self.model.seq_len,
            "max_len": self.model.max_len,
            "task": self.task,
            "options": self.options,
            "rng": {
                "seed": self.rng.get_seed().iter().map(|b| format!("{b:02x}")).collect::<String>(),
                "stream": self.rng.get_stream().to_string(),
                "word_pos": self.rng.get_word_pos().to_string(),
            },
            "history": self.history,
        });
        checkpoint::save(dir, &tensors, meta)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let (tensors, meta) = checkpoint::load(dir)?;
        let bad = |what: &str| Error::Checkpoint(format!("manifest metadata missing or invalid: {what}"));
        let config: ModelConfig = serde_json::from_value(meta["model"].clone()).map_err(|_| bad("model"))?;
        let task: ToyTaskConfig = serde_json::from_value(meta["task"].clone()).map_err(|_| bad("task"))?;
        let options: TrainOptions = serde_json::from_value(meta["options"].clone()).map_err(|_| bad("options"))?;
        let history: Vec<MetricRow> = serde_json::from_value(meta["history"].clone()).map_err(|_| bad("history"))?;
        let step = meta["step"].as_u64().ok_or_else(|| bad("step"))?;
        let vocab_size = meta["vocab_size"].as_u64().ok_or_else(|| bad("vocab_size"))? as usize;
        let seq_len = meta["seq_len"].as_u64().ok_or_else(|| bad("seq_len"))? as usize;
        let max_len = meta["max_len"].as_u64().ok_or_else(|| bad("max_len"))? as usize;
        let seed_hex = meta["rng"]["seed"].as_str().ok_or_else(|| bad("rng.seed"))?;
        let mut seed = [0u8; 32];
        if seed_hex.len() != 64 {
            return Err(bad("rng.seed"));
        }
        for (i, s) in seed.iter_mut().enumerate() {
            *s = u8::from_str_radix(&seed_hex[2 * i..2 * i + 2], 16).map_err(|_| bad("rng.seed"))?;
        }
        let stream: u64 = meta["rng"]["stream"].as_str().and_then(|s| s.parse().ok()).ok_or_else(|| bad("rng.stream"))?;
        let word_pos: u128 = meta["rng"]["word_pos"].as_str().and_then(|s| s.parse().ok()).ok_or_else(|| bad("rng.word_pos"))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(stream);
        rng.set_word_pos(word_pos);

        let (mut params, mut m, mut v) = (Params::new(), Params::new(), Params::new());
        let mut step_losses = Vec::new();
        for (name, t) in tensors {
            if let Some(k) = name.strip_prefix("param.") {
                params.insert(k, t);
            } else if let Some(k) = name.strip_prefix("adam_m.") {
                m.insert(k, t);
            } else if let Some(k) = name.strip_prefix("adam_v.") {
                v.insert(k, t);
            } else if name == "history.step_loss" {
                step_losses = t.into_data();
            }
        }
        config.validate()?;
        let model = Seq2Seq { config, vocab_size, seq_len, max_len, params };
        Ok(Self { step, model, task, options, adam_m: m, adam_v: v, rng, history, step_losses })
    }
}

/// Trains a fresh model for `options.steps` steps on the generated task.
pub fn train(model: &ModelConfig, task: &ToyTaskConfig, options: &TrainOptions) -> Result<TrainState> {
    let data = generate_task(task)?;
    let mut state = TrainState::new(model, task, options)?;
    state.run(&data, options.steps)?;
    Ok(state)
}

/// Mean nonzero ratio of every binarized E-ATT input over `examples`
/// (teacher-forced), one row per (module, layer).
pub fn collect_binarization_stats(state: &TrainState, examples: &[Example]) -> Result<Vec<NonzeroStats>> {
    if !state.model.config.roles().iter().any(|&r| state.model.config.attention.get(r) == AttentionKind::EAtt) {
        return Err(Error::NoBinarizedRole);
    }
    if examples.is_empty() {
        return Err(Error::DegenerateInput("no examples for statistics".into()));
    }
    let mut sums: Vec<(&'static str, usize, f64, usize)> = Vec::new();
    for chunk in examples.chunks(128) {
        let batch: Vec<&Example> = chunk.iter().collect();
        let mut tape = Tape::new();
        let b = state.model.params.bind(&mut tape);
        let pass = state.model.forward(&mut tape, &b, &batch, None)?;
        for (label, layer, var) in pass.binaries {
            let t = tape.value(var);
            let rho = nonzero_ratio(t)?;
            match sums.iter_mut().find(|s| s.0 == label && s.1 == layer) {
                Some(s) => {
                    s.2 += rho * t.len() as f64;
                    s.3 += t.len();
                }
                None => sums.push((label, layer, rho * t.len() as f64, t.len())),
            }
        }
    }
    let order = |l: &str| ["encoder-self", "decoder-self", "decoder-cross-query", "decoder-cross-key"].iter().position(|x| *x == l);
    sums.sort_by_key(|s| (order(s.0), s.1));
    Ok(sums
        .into_iter()
        .map(|(label, layer, total, n)| NonzeroStats { module_label: label.to_string(), layer_index: layer, rho: total / n as f64 })
        .collect())
}
