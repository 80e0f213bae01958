//! Closed-form operation counts and energy estimates for the attention
//! variants, plus a runtime audit of those counts.
//!
//! Counts assume equal query and key lengths `l` and model width `d`, and
//! ignore activation functions. A multiply-accumulate counts once in each
//! column. Multi-head splitting leaves every count unchanged.

use std::fmt;
use std::fmt::Write as _;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{AttentionConfig, AttentionKind, AttentionVariant};
use crate::counter::{self, TraceCount};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpCount {
    pub additions: u64,
    pub multiplications: u64,
}

impl OpCount {
    pub fn new(additions: u64, multiplications: u64) -> Self {
        Self { additions, multiplications }
    }
}

impl From<TraceCount> for OpCount {
    fn from(t: TraceCount) -> Self {
        Self { additions: t.additions, multiplications: t.multiplications }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Chip {
    #[serde(rename = "asic")]
    Asic,
    #[serde(rename = "fpga")]
    Fpga,
}

impl Chip {
    pub const ALL: [Chip; 2] = [Chip::Asic, Chip::Fpga];

    pub fn name(self) -> &'static str {
        match self {
            Chip::Asic => "asic",
            Chip::Fpga => "fpga",
        }
    }

    /// 32-bit float energy per operation, in joules.
    pub fn profile(self) -> ChipProfile {
        match self {
            Chip::Asic => ChipProfile { name: self, e_add: 0.9e-12, e_mul: 3.7e-12 },
            Chip::Fpga => ChipProfile { name: self, e_add: 0.4e-12, e_mul: 18.8e-12 },
        }
    }
}

impl fmt::Display for Chip {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Chip {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "asic" => Ok(Chip::Asic),
            "fpga" => Ok(Chip::Fpga),
            other => Err(Error::Config(format!("unknown chip `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChipProfile {
    pub name: Chip,
    pub e_add: f64,
    pub e_mul: f64,
}

impl ChipProfile {
    pub fn new(name: Chip, e_add: f64, e_mul: f64) -> Result<Self> {
        if !(e_add > 0.0 && e_mul > 0.0 && e_add.is_finite() && e_mul.is_finite()) {
            return Err(Error::Domain(format!("energy constants must be positive, got ({e_add}, {e_mul})")));
        }
        Ok(Self { name, e_add, e_mul })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum CostLevel {
    #[serde(rename = "alignment")]
    Alignment,
    #[serde(rename = "attention")]
    Attention,
    #[serde(rename = "block")]
    TransformerBlock,
}

impl CostLevel {
    pub const ALL: [CostLevel; 3] = [CostLevel::Alignment, CostLevel::Attention, CostLevel::TransformerBlock];

    pub fn name(self) -> &'static str {
        match self {
            CostLevel::Alignment => "alignment",
            CostLevel::Attention => "attention",
            CostLevel::TransformerBlock => "block",
        }
    }
}

impl fmt::Display for CostLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CostLevel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "alignment" => Ok(CostLevel::Alignment),
            "attention" => Ok(CostLevel::Attention),
            "block" | "transformer-block" => Ok(CostLevel::TransformerBlock),
            other => Err(Error::Config(format!("unknown level `{other}`"))),
        }
    }
}

/// Additions and multiplications for `variant` at `level`.
///
/// With `exact = false`, `ld` terms are dropped from counts that also carry
/// an `ld²` term (negligible when `d ≫ 1`); counts without an `ld²` term are
/// returned unchanged.
pub fn count_ops(variant: AttentionKind, level: CostLevel, l: u64, d: u64, exact: bool) -> Result<OpCount> {
    use AttentionKind::*;
    use CostLevel::*;
    if l == 0 || d == 0 {
        return Err(Error::Domain(format!("l and d must be at least 1, got l = {l}, d = {d}")));
    }
    let ld2 = l * d * d;
    let l2d = l * l * d;
    let ld = if exact { l * d } else { 0 };
    let (add, mul) = match (variant, level) {
        (Vanilla, Alignment) => (2 * ld2 + l2d, 2 * ld2 + l2d),
        (Vanilla, Attention) => (3 * ld2 + 2 * l2d, 3 * ld2 + 2 * l2d),
        (Vanilla, TransformerBlock) => (12 * ld2 + 2 * l2d, 12 * ld2 + 2 * l2d),
        (Dense, Alignment) => (ld2 + l2d, ld2 + l2d),
        (Dense, Attention) => (2 * ld2 + 2 * l2d, 2 * ld2 + 2 * l2d),
        (RandInit, Alignment) => (0, 0),
        (RandInit, Attention) => (ld2 + l2d, ld2 + l2d),
        // Alignment has no ld² term, so its ld term is always kept.
        (EAtt, Alignment) => (2 * l * d + l2d, 0),
        (EAtt, Attention) => (ld2 + 2 * ld + 2 * l2d, ld2 + l2d),
        (EAtt, TransformerBlock) => (10 * ld2 + 2 * ld + 2 * l2d, 10 * ld2 + l2d),
        (Dense | RandInit, TransformerBlock) => {
            return Err(Error::UnsupportedCombination { variant: variant.to_string(), level: level.to_string() })
        }
    };
    Ok(OpCount::new(add, mul))
}

pub fn energy_joules(counts: OpCount, chip: &ChipProfile) -> f64 {
    chip.e_add * counts.additions as f64 + chip.e_mul * counts.multiplications as f64
}

/// Energy of `variant` relative to vanilla attention at the same level, in
/// percent.
pub fn energy_ratio(variant: AttentionKind, level: CostLevel, chip: &ChipProfile, l: u64, d: u64) -> Result<f64> {
    let base = energy_joules(count_ops(AttentionKind::Vanilla, level, l, d, true)?, chip);
    if variant == AttentionKind::Vanilla {
        return Ok(100.0);
    }
    let e = energy_joules(count_ops(variant, level, l, d, true)?, chip);
    Ok(100.0 * e / base)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyReport {
    pub variant: AttentionKind,
    pub level: CostLevel,
    pub chip: Chip,
    pub l: u64,
    pub d: u64,
    pub additions: u64,
    pub multiplications: u64,
    pub joules: f64,
    #[serde(skip)]
    pub baseline_joules: f64,
    pub ratio_percent: f64,
}

impl EnergyReport {
    pub const CSV_HEADER: &'static str = "variant,level,chip,l,d,additions,multiplications,joules,ratio_percent";

    pub fn evaluate(variant: AttentionKind, level: CostLevel, chip: &ChipProfile, l: u64, d: u64) -> Result<Self> {
        let counts = count_ops(variant, level, l, d, true)?;
        let joules = energy_joules(counts, chip);
        let baseline_joules = energy_joules(count_ops(AttentionKind::Vanilla, level, l, d, true)?, chip);
        Ok(Self {
            variant,
            level,
            chip: chip.name,
            l,
            d,
            additions: counts.additions,
            multiplications: counts.multiplications,
            joules,
            baseline_joules,
            ratio_percent: energy_ratio(variant, level, chip, l, d)?,
        })
    }

    fn joules_text(&self) -> String {
        format!("{:.6e}", self.joules)
    }

    fn ratio_text(&self) -> String {
        format!("{:.2}", self.ratio_percent)
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.variant,
            self.level,
            self.chip,
            self.l,
            self.d,
            self.additions,
            self.multiplications,
            self.joules_text(),
            self.ratio_text()
        )
    }
}

/// Cartesian evaluation, sorted by (variant, level, chip, l, d).
pub fn report_sweep(
    variants: &[AttentionKind],
    levels: &[CostLevel],
    chips: &[ChipProfile],
    ls: &[u64],
    ds: &[u64],
) -> Result<Vec<EnergyReport>> {
    if variants.is_empty() || levels.is_empty() || chips.is_empty() || ls.is_empty() || ds.is_empty() {
        return Err(Error::Domain("sweep ranges must be nonempty".into()));
    }
    let mut rows = Vec::new();
    for &v in variants {
        for &level in levels {
            for chip in chips {
                for &l in ls {
                    for &d in ds {
                        rows.push(EnergyReport::evaluate(v, level, chip, l, d)?);
                    }
                }
            }
        }
    }
    rows.sort_by(|a, b| (a.variant, a.level, a.chip, a.l, a.d).cmp(&(b.variant, b.level, b.chip, b.l, b.d)));
    Ok(rows)
}

pub fn reports_to_csv(rows: &[EnergyReport]) -> String {
    let mut s = format!("{}\n", EnergyReport::CSV_HEADER);
    for r in rows {
        let _ = writeln!(s, "{}", r.csv_row());
    }
    s
}

/// JSON array with the CSV keys; numeric values carry the same rounding as
/// the CSV text.
pub fn reports_to_json(rows: &[EnergyReport]) -> Result<String> {
    let items: Vec<serde_json::Value> = rows
        .iter()
        .map(|r| {
            serde_json::json!({
                "variant": r.variant.name(),
                "level": r.level.name(),
                "chip": r.chip.name(),
                "l": r.l,
                "d": r.d,
                "additions": r.additions,
                "multiplications": r.multiplications,
                "joules": r.joules_text().parse::<f64>().unwrap_or(r.joules),
                "ratio_percent": r.ratio_text().parse::<f64>().unwrap_or(r.ratio_percent),
            })
        })
        .collect();
    Ok(serde_json::to_string_pretty(&items)?)
}

/// Runs `f` with the scalar-operation counter enabled.
pub fn instrument_trace<R>(f: impl FnOnce() -> R) -> Result<(R, TraceCount)> {
    counter::count(f)
}

/// Executes one single-head forward pass of `variant` on random inputs
/// `x, y ∈ R^{l×d}` and returns the scalar operations charged at `level`.
pub fn measure_ops(variant: AttentionKind, level: CostLevel, l: usize, d: usize, seed: u64) -> Result<TraceCount> {
    if level == CostLevel::TransformerBlock {
        return Err(Error::UnsupportedCombination { variant: variant.to_string(), level: "block (measured)".into() });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = AttentionConfig::new(variant, d, 1, l)?;
    let att = AttentionVariant::<f32>::new(cfg, &mut rng)?;
    // Inputs centered on the threshold so binarized masks are mixed.
    let x = Tensor::<f32>::uniform(vec![l, d], 2.0, &mut rng).map(|v| v + 1.0);
    let y = Tensor::<f32>::uniform(vec![l, d], 2.0, &mut rng).map(|v| v + 1.0);
    let (out, tally) = match level {
        CostLevel::Alignment => instrument_trace(|| att.align(&x, &y, None).map(|_| ()))?,
        _ => instrument_trace(|| att.forward(&x, &y, None).map(|_| ()))?,
    };
    out?;
    Ok(tally)
}
