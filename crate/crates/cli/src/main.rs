//! `eatt`: energy reports, gradient checks, toy training, binarization
//! statistics and op-count audits.
//!
//! Exit codes: 0 success, 1 failed gradient check, 2 usage or unsupported
//! request, 3 training divergence, 4 audit mismatch.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use eatt::binarize::{stats_to_csv, surrogate_grad, BinarizeSpec, NonzeroStats};
use eatt::energy::{count_ops, measure_ops, report_sweep, reports_to_csv, reports_to_json, Chip, EnergyReport};
use eatt::gradcheck::{run_gradcheck, GradOp, GradcheckResult};
use eatt::harness::{
    collect_binarization_stats, generate_task, metrics_to_csv, Architecture, LrSchedule, MetricRow, ModelConfig,
    Task, ToyTaskConfig, TrainOptions, TrainState,
};
use eatt::{AttentionKind, CostLevel, Error, Tensor};
use serde_json::json;

#[derive(Parser, Debug)]
#[command(name = "eatt", version, about = "Energy-efficient attention toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Analytic operation counts, energy and ratio against vanilla attention.
    Energy(EnergyArgs),
    /// Gradient checks against finite differences (64-bit).
    Gradcheck(GradcheckArgs),
    /// Train a toy sequence model.
    Train(TrainArgs),
    /// Nonzero ratios of binarized representations in a checkpoint.
    Stats(StatsArgs),
    /// Compare instrumented operation counts with the analytic formulas.
    Audit(AuditArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Format {
    Csv,
    Json,
    Text,
}

#[derive(Args, Debug)]
struct Output {
    /// Output format.
    #[arg(long, value_enum)]
    format: Option<Format>,
    /// Shorthand for `--format json`.
    #[arg(long, conflicts_with_all = ["format", "csv"])]
    json: bool,
    /// Shorthand for `--format csv`.
    #[arg(long, conflicts_with = "format")]
    csv: bool,
    /// Write the report here instead of stdout.
    #[arg(long, short = 'o')]
    output: Option<PathBuf>,
}

impl Output {
    fn format(&self, default: Format) -> Format {
        match (self.json, self.csv, self.format) {
            (true, _, _) => Format::Json,
            (_, true, _) => Format::Csv,
            (_, _, Some(f)) => f,
            _ => default,
        }
    }

    fn emit(&self, text: &str) -> Result<(), Failure> {
        match &self.output {
            Some(p) => fs::write(p, text).map_err(|e| Failure::usage(format!("cannot write {}: {e}", p.display()))),
            None => {
                print!("{text}");
                Ok(())
            }
        }
    }
}

#[derive(Args, Debug)]
struct EnergyArgs {
    /// Attention variant, or `all`.
    #[arg(long, default_value = "e-att")]
    variant: String,
    /// Cost level (alignment, attention, block), or `all`.
    #[arg(long, default_value = "attention")]
    level: String,
    /// Chip profile (asic, fpga), or `all`.
    #[arg(long, default_value = "asic")]
    chip: String,
    #[arg(long, default_value_t = 22)]
    seq_len: u64,
    #[arg(long, default_value_t = 512)]
    dim: u64,
    /// Sweep `l` or `d`: `d=64..1024:64` (inclusive, optional step) or `l=8,16,32`.
    #[arg(long)]
    sweep: Vec<String>,
    #[command(flatten)]
    out: Output,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    /// binarize, l1-attention, vanilla-attention, dense, randinit, or all.
    #[arg(long, default_value = "all")]
    op: String,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 5)]
    trials: usize,
    #[command(flatten)]
    out: Output,
}

#[derive(Args, Debug, Default)]
struct TrainArgs {
    /// JSON file with `task`, `model` and `options` objects; flags win.
    #[arg(long)]
    config: Option<PathBuf>,
    /// copy or reverse.
    #[arg(long)]
    task: Option<String>,
    /// Attention per role, e.g. `all=e-att` or `self=vanilla,cross=e-att`.
    #[arg(long)]
    attention: Option<String>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    ffn_dim: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    vocab_size: Option<usize>,
    #[arg(long)]
    seq_len: Option<usize>,
    /// Draw content lengths from [min-len, seq-len].
    #[arg(long)]
    min_len: Option<usize>,
    #[arg(long)]
    train_examples: Option<usize>,
    #[arg(long)]
    eval_examples: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    eval_every: Option<u64>,
    /// Peak learning rate of the schedule.
    #[arg(long)]
    lr_peak: Option<f64>,
    #[arg(long)]
    warmup: Option<f64>,
    /// Tag positions straight from the encoder instead of decoding.
    #[arg(long)]
    encoder_only: bool,
    /// Write the metric history CSV here.
    #[arg(long)]
    metrics_out: Option<PathBuf>,
    /// Write the final training state here.
    #[arg(long)]
    checkpoint_out: Option<PathBuf>,
    #[command(flatten)]
    out: OutputOpt,
}

/// `Output` with a `Default`, for the flattened train arguments.
#[derive(Args, Debug, Default)]
struct OutputOpt {
    #[arg(long, value_enum)]
    format: Option<Format>,
}

#[derive(Args, Debug)]
struct StatsArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Evaluate on this task instead of the one stored in the checkpoint.
    #[arg(long)]
    task: Option<String>,
    #[command(flatten)]
    out: Output,
}

#[derive(Args, Debug)]
struct AuditArgs {
    #[arg(long, default_value_t = 4)]
    seq_len: usize,
    #[arg(long, default_value_t = 8)]
    dim: usize,
    #[arg(long, default_value_t = 17)]
    seed: u64,
    #[command(flatten)]
    out: Output,
}

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Self { code: 2, message: message.into() }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Divergence { .. } => 3,
            _ => 2,
        };
        Self { code, message: e.to_string() }
    }
}

fn main() -> ExitCode {
    if let Ok(t) = std::env::var("EATT_THREADS") {
        if t.trim() != "1" {
            eprintln!("error: EATT_THREADS must be 1 (got `{t}`)");
            return ExitCode::from(2);
        }
    }
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Energy(a) => energy(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Train(a) => train(a),
        Command::Stats(a) => stats(a),
        Command::Audit(a) => audit(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn parse_list<T: std::str::FromStr<Err = Error> + Copy>(s: &str, all: &[T]) -> Result<Vec<T>, Failure> {
    if s == "all" {
        return Ok(all.to_vec());
    }
    s.split(',').map(|p| p.trim().parse::<T>().map_err(Failure::from)).collect()
}

fn parse_range(spec: &str) -> Result<Vec<u64>, Failure> {
    let bad = || Failure::usage(format!("invalid sweep range `{spec}`"));
    if let Some((range, rest)) = spec.split_once("..") {
        let (end, step) = match rest.split_once(':') {
            Some((e, s)) => (e, s.parse::<u64>().map_err(|_| bad())?),
            None => (rest, 1),
        };
        let (a, b) = (range.parse::<u64>().map_err(|_| bad())?, end.parse::<u64>().map_err(|_| bad())?);
        if step == 0 || a > b {
            return Err(bad());
        }
        return Ok((a..=b).step_by(step as usize).collect());
    }
    spec.split(',').map(|v| v.trim().parse::<u64>().map_err(|_| bad())).collect()
}

fn text_table(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for r in rows {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.len());
        }
    }
    let line = |cells: Vec<&str>| {
        let mut s = cells.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect::<Vec<_>>().join("  ");
        s.truncate(s.trim_end().len());
        s + "\n"
    };
    let mut s = line(header.to_vec());
    for r in rows {
        s += &line(r.iter().map(String::as_str).collect());
    }
    s
}

fn energy(a: EnergyArgs) -> Result<(), Failure> {
    let variants = parse_list(&a.variant, &AttentionKind::ALL)?;
    let levels = parse_list(&a.level, &[CostLevel::Alignment, CostLevel::Attention, CostLevel::TransformerBlock])?;
    let chips: Vec<_> = parse_list(&a.chip, &[Chip::Asic, Chip::Fpga])?.into_iter().map(Chip::profile).collect();
    let (mut ls, mut ds) = (vec![a.seq_len], vec![a.dim]);
    for s in &a.sweep {
        match s.split_once('=') {
            Some(("l", r)) => ls = parse_range(r)?,
            Some(("d", r)) => ds = parse_range(r)?,
            _ => return Err(Failure::usage(format!("sweep must look like d=a..b or l=a..b, got `{s}`"))),
        }
    }
    // Unsupported pairs are an error when asked for explicitly and skipped
    // when they come from `all`.
    let explicit = a.variant != "all" && a.level != "all";
    let mut rows = Vec::new();
    for &v in &variants {
        for &level in &levels {
            match report_sweep(&[v], &[level], &chips, &ls, &ds) {
                Ok(r) => rows.extend(r),
                Err(e @ Error::UnsupportedCombination { .. }) if explicit => return Err(e.into()),
                Err(Error::UnsupportedCombination { .. }) => {}
                Err(e) => return Err(e.into()),
            }
        }
    }
    if rows.is_empty() {
        return Err(Failure::usage("no supported (variant, level) combination requested"));
    }
    let text = match a.out.format(Format::Csv) {
        Format::Csv => reports_to_csv(&rows),
        Format::Json => reports_to_json(&rows)? + "\n",
        Format::Text => text_table(
            &EnergyReport::CSV_HEADER.split(',').collect::<Vec<_>>(),
            &rows.iter().map(|r| r.csv_row().split(',').map(String::from).collect()).collect::<Vec<_>>(),
        ),
    };
    a.out.emit(&text)
}

fn gradcheck(a: GradcheckArgs) -> Result<(), Failure> {
    let ops = parse_list(&a.op, &GradOp::ALL)?;
    let mut results: Vec<GradcheckResult> = Vec::new();
    for op in &ops {
        results.extend(run_gradcheck(*op, a.seed, a.trials)?);
    }
    let spec = BinarizeSpec::default();
    let peak = surrogate_grad(&Tensor::scalar(spec.tau), &Tensor::scalar(1.0f64), spec)?.data()[0];
    let text = match a.out.format(Format::Text) {
        Format::Csv => {
            let mut s = String::from("op,trial,error,tolerance,passed\n");
            for r in &results {
                let _ = writeln!(s, "{},{},{:.3e},{:.0e},{}", r.op, r.trial, r.error, r.tolerance, r.passed);
            }
            s
        }
        Format::Json => {
            let mut v = json!({ "results": results, "all_passed": results.iter().all(|r| r.passed) });
            if ops.contains(&GradOp::Binarize) {
                v["surrogate_at_tau"] = json!(peak);
            }
            serde_json::to_string_pretty(&v).map_err(|e| Failure::usage(e.to_string()))? + "\n"
        }
        Format::Text => {
            let rows: Vec<Vec<String>> = results
                .iter()
                .map(|r| {
                    vec![
                        r.op.to_string(),
                        r.trial.to_string(),
                        format!("{:.3e}", r.error),
                        format!("{:.0e}", r.tolerance),
                        if r.passed { "pass" } else { "FAIL" }.to_string(),
                    ]
                })
                .collect();
            let mut s = text_table(&["op", "trial", "error", "tolerance", "status"], &rows);
            if ops.contains(&GradOp::Binarize) {
                let _ = writeln!(s, "surrogate at x = tau, upstream 1: {peak:.15}");
            }
            s
        }
    };
    a.out.emit(&text)?;
    if results.iter().all(|r| r.passed) {
        Ok(())
    } else {
        Err(Failure { code: 1, message: "gradient check exceeded tolerance".into() })
    }
}

#[derive(serde::Deserialize, Default)]
#[serde(default)]
struct ConfigFile {
    task: Option<ToyTaskConfig>,
    model: Option<ModelConfig>,
    options: Option<TrainOptions>,
}

fn resolve_train(a: &TrainArgs) -> Result<(ToyTaskConfig, ModelConfig, TrainOptions), Failure> {
    let file: ConfigFile = match &a.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Failure::usage(format!("cannot read config {}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| Failure::usage(format!("invalid config {}: {e}", p.display())))?
        }
        None => ConfigFile::default(),
    };
    let mut task = file.task.unwrap_or_default();
    let mut model = file.model.unwrap_or_default();
    let mut opts = file.options.unwrap_or_default();
    if let Some(t) = &a.task {
        task.task = t.parse::<Task>()?;
    }
    macro_rules! set {
        ($($flag:ident => $target:expr),* $(,)?) => {
            $(if let Some(v) = a.$flag { $target = v; })*
        };
    }
    set!(
        vocab_size => task.vocab_size,
        seq_len => task.seq_len,
        train_examples => task.train_examples,
        eval_examples => task.eval_examples,
        seed => task.seed,
        dim => model.d,
        layers => model.layers,
        heads => model.heads,
        dropout => model.dropout,
        tau => model.tau,
        steps => opts.steps,
        batch_size => opts.batch_size,
        eval_every => opts.eval_every,
    );
    if a.min_len.is_some() {
        task.min_len = a.min_len;
    }
    if let Some(f) = a.ffn_dim {
        model.ffn_dim = f;
    } else if a.dim.is_some() && a.config.is_none() {
        model.ffn_dim = 4 * model.d;
    }
    if let Some(spec) = &a.attention {
        model.attention = model.attention.parse_onto(spec)?;
    }
    if a.encoder_only {
        model.architecture = Architecture::EncoderOnly;
    }
    let LrSchedule { peak, warmup, decay } = opts.schedule;
    opts.schedule = LrSchedule { peak: a.lr_peak.unwrap_or(peak), warmup: a.warmup.unwrap_or(warmup), decay };
    Ok((task, model, opts))
}

fn train(a: TrainArgs) -> Result<(), Failure> {
    let (task, model, opts) = resolve_train(&a)?;
    eprintln!(
        "effective config: {}",
        json!({ "task": task, "model": model, "options": opts, "attention": model.attention.to_string() })
    );
    let data = generate_task(&task)?;
    let mut state = TrainState::new(&model, &task, &opts)?;
    state.run(&data, opts.steps)?;
    if let Some(p) = &a.metrics_out {
        fs::write(p, metrics_to_csv(&state.history)).map_err(|e| Failure::usage(format!("cannot write {}: {e}", p.display())))?;
    }
    if let Some(dir) = &a.checkpoint_out {
        state.save(dir)?;
    }
    let acc = state.final_accuracy().unwrap_or(0.0);
    let text = match a.out.format.unwrap_or(Format::Text) {
        Format::Csv => metrics_to_csv(&state.history),
        Format::Json => {
            serde_json::to_string_pretty(&json!({ "step": state.step, "final_accuracy": acc, "history": state.history }))
                .map_err(|e| Failure::usage(e.to_string()))?
                + "\n"
        }
        Format::Text => {
            let rows: Vec<Vec<String>> = state.history.iter().map(metric_cells).collect();
            let mut s = text_table(&["step", "loss", "token_accuracy", "lr"], &rows);
            let _ = writeln!(s, "final token accuracy: {acc:.4} (step {})", state.step);
            s
        }
    };
    print!("{text}");
    Ok(())
}

fn metric_cells(r: &MetricRow) -> Vec<String> {
    vec![r.step.to_string(), format!("{:.6}", r.loss), format!("{:.4}", r.token_accuracy), format!("{:.3e}", r.lr)]
}

fn stats(a: StatsArgs) -> Result<(), Failure> {
    let state = load_checkpoint(&a.checkpoint)?;
    let mut task = state.task.clone();
    if let Some(t) = &a.task {
        task.task = t.parse()?;
    }
    let data = generate_task(&task)?;
    let rows: Vec<NonzeroStats> = collect_binarization_stats(&state, &data.eval).map_err(|e| match e {
        Error::NoBinarizedRole => Failure::usage("checkpoint has no e-att attention role; nothing to report"),
        other => other.into(),
    })?;
    let text = match a.out.format(Format::Csv) {
        Format::Csv => stats_to_csv(&rows),
        Format::Json => serde_json::to_string_pretty(&rows).map_err(|e| Failure::usage(e.to_string()))? + "\n",
        Format::Text => text_table(
            &["module_label", "layer_index", "rho"],
            &rows.iter().map(|r| vec![r.module_label.clone(), r.layer_index.to_string(), format!("{:.5}", r.rho)]).collect::<Vec<_>>(),
        ),
    };
    a.out.emit(&text)
}

fn load_checkpoint(dir: &Path) -> Result<TrainState, Failure> {
    if !dir.is_dir() {
        return Err(Failure::usage(format!("checkpoint directory {} does not exist", dir.display())));
    }
    Ok(TrainState::load(dir)?)
}

fn audit(a: AuditArgs) -> Result<(), Failure> {
    let (l, d) = (a.seq_len, a.dim);
    let mut rows = Vec::new();
    let mut mismatches = Vec::new();
    for kind in [AttentionKind::Vanilla, AttentionKind::EAtt] {
        for level in [CostLevel::Alignment, CostLevel::Attention] {
            let want = count_ops(kind, level, l as u64, d as u64, true)?;
            let got = measure_ops(kind, level, l, d, a.seed)?;
            let ok = (got.additions, got.multiplications) == (want.additions, want.multiplications);
            if !ok {
                mismatches.push(format!(
                    "{kind}/{level}: expected {}+{}, measured {}+{}",
                    want.additions, want.multiplications, got.additions, got.multiplications
                ));
            }
            rows.push((kind, level, want, got, ok));
        }
    }
    let text = match a.out.format(Format::Text) {
        Format::Csv | Format::Text => {
            let header = ["variant", "level", "l", "d", "expected_additions", "expected_multiplications", "measured_additions", "measured_multiplications", "selections", "match"];
            let cells: Vec<Vec<String>> = rows
                .iter()
                .map(|(k, lv, w, g, ok)| {
                    vec![
                        k.to_string(),
                        lv.to_string(),
                        l.to_string(),
                        d.to_string(),
                        w.additions.to_string(),
                        w.multiplications.to_string(),
                        g.additions.to_string(),
                        g.multiplications.to_string(),
                        g.selections.to_string(),
                        ok.to_string(),
                    ]
                })
                .collect();
            if a.out.format(Format::Text) == Format::Csv {
                let mut s = header.join(",") + "\n";
                for c in &cells {
                    s += &(c.join(",") + "\n");
                }
                s
            } else {
                text_table(&header, &cells)
            }
        }
        Format::Json => {
            let items: Vec<_> = rows
                .iter()
                .map(|(k, lv, w, g, ok)| {
                    json!({
                        "variant": k, "level": lv, "l": l, "d": d,
                        "expected_additions": w.additions, "expected_multiplications": w.multiplications,
                        "measured_additions": g.additions, "measured_multiplications": g.multiplications,
                        "selections": g.selections, "match": ok,
                    })
                })
                .collect();
            serde_json::to_string_pretty(&items).map_err(|e| Failure::usage(e.to_string()))? + "\n"
        }
    };
    a.out.emit(&text)?;
    if mismatches.is_empty() {
        Ok(())
    } else {
        Err(Failure { code: 4, message: format!("op-count mismatch: {}", mismatches.join("; ")) })
    }
}
