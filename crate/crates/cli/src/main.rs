//! `gbt`: command-line front end.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use gbt_core::analysis::{compare_models, summarize, write_matrix_csv, write_summary_csv, ScoreTable};
use gbt_core::checkpoint::{load_checkpoint, save_checkpoint};
use gbt_core::config::{count_params, preset, ArchDocument, ArchSpec, PRESETS};
use gbt_core::embed::EmbedVariant;
use gbt_core::equivalence::check_spec;
use gbt_core::error::Error;
use gbt_core::gated::ForwardCtx;
use gbt_core::graph::Graph;
use gbt_core::model::{encode_pair, grad_audit, match_logit};
use gbt_core::params::init_params;
use gbt_core::synth::{gen_synth, Dataset, SynthSpec, SynthTask};
use gbt_core::train::{evaluate_itm, finetune_itm, train, write_history, StepRecord, TrainConfig, TrainOutput};

const ARCH_FILE: &str = "arch.json";
const TRAIN_FILE: &str = "train.json";
const HISTORY_FILE: &str = "history.jsonl";

#[derive(Parser)]
#[command(name = "gbt", version, about = "Gated bimodal Transformer toolkit")]
struct Cli {
    /// Machine-readable JSON on stdout.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Encode one image-caption pair and print the final hidden states.
    Encode(EncodeArgs),
    /// Compare gated sublayers against their literal oracles.
    CheckEquivalence(EquivArgs),
    /// Finite-difference audit of the full model gradient.
    GradCheck(GradArgs),
    /// Pretrain on a synthetic dataset.
    Pretrain(PretrainArgs),
    /// Retrain only the matching head of a checkpoint.
    Finetune(FinetuneArgs),
    /// Held-out image-text matching accuracy of a checkpoint.
    Evaluate(EvalArgs),
    /// Parameter counts of an architecture.
    Params(ArchArgs),
    /// List the shipped presets.
    Presets,
    /// Generate a synthetic dataset.
    GenData(GenArgs),
    /// Exact tests and ANOVA over multi-run scores.
    Analyze(AnalyzeArgs),
}

#[derive(Args, Clone, Default)]
struct ArchArgs {
    /// Preset name (uniter, visualbert, vl-bert, vilbert, lxmert).
    #[arg(long)]
    preset: Option<String>,
    /// Architecture config document (JSON).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the embedding variant: box5, none, box5_global.
    #[arg(long)]
    embed_variant: Option<String>,
}

#[derive(Args)]
struct EncodeArgs {
    #[command(flatten)]
    arch: ArchArgs,
    /// Dataset directory; without it a one-pair synthetic sample is used.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    index: usize,
    /// Checkpoint directory; without it parameters are initialized from the seed.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct EquivArgs {
    #[command(flatten)]
    arch: ArchArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 20)]
    draws: usize,
    /// Overrides every per-check tolerance.
    #[arg(long)]
    tolerance: Option<f64>,
}

#[derive(Args)]
struct GradArgs {
    #[command(flatten)]
    arch: ArchArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 200)]
    probes: usize,
    #[arg(long, default_value_t = 1e-6)]
    step: f64,
    #[arg(long, default_value_t = 1e-5)]
    tolerance: f64,
}

#[derive(Args, Clone, Default)]
struct TrainArgs {
    /// Training config document (JSON); flags override it.
    #[arg(long)]
    train_config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    warmup: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    /// Print a progress line every N steps (0 disables).
    #[arg(long, default_value_t = 100)]
    log_every: usize,
}

#[derive(Args)]
struct PretrainArgs {
    #[command(flatten)]
    arch: ArchArgs,
    #[command(flatten)]
    train: TrainArgs,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FinetuneArgs {
    #[command(flatten)]
    arch: ArchArgs,
    #[command(flatten)]
    train: TrainArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    arch: ArchArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    out: PathBuf,
    /// Synthetic data spec (JSON); flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    n_pairs: Option<usize>,
    #[arg(long)]
    heldout: Option<usize>,
    #[arg(long)]
    correlation: Option<f64>,
    /// class_match or spatial_relation.
    #[arg(long)]
    task: Option<String>,
}

#[derive(Args)]
struct AnalyzeArgs {
    /// CSV with header `model,run,score`.
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value_t = 0.001)]
    alpha: f64,
    /// Writes significance.csv, pvalues.json and summary.csv here.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Monte Carlo draws for pairs too large to enumerate; without it such
    /// pairs are an error.
    #[arg(long)]
    mc_draws: Option<u64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Usage mistakes found after parsing.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

/// A check that ran but exceeded its tolerance.
#[derive(Debug)]
struct CheckFailed(String);

impl std::fmt::Display for CheckFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for CheckFailed {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())).into())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Io(format!("{}: {e}", path.display())).into())
}

fn parse_json<T: serde::de::DeserializeOwned>(text: &str) -> Result<T> {
    serde_json::from_str(text).map_err(|e| {
        Error::ParseError {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        }
        .into()
    })
}

fn enum_from_str<T: serde::de::DeserializeOwned>(s: &str, what: &str) -> Result<T> {
    serde_json::from_value(Value::String(s.to_string())).map_err(|_| usage(format!("unknown {what} `{s}`")))
}

/// Preset defaults, then the config document, then flags.
fn resolve_arch(a: &ArchArgs, fallback: Option<&Path>) -> Result<ArchSpec> {
    let doc = match (&a.config, fallback) {
        (Some(p), _) => Some(ArchDocument::parse(&read_text(p)?)?),
        (None, Some(p)) if a.preset.is_none() && p.exists() => Some(ArchDocument::parse(&read_text(p)?)?),
        _ => None,
    };
    let mut spec = match (&a.preset, doc) {
        (Some(name), Some(mut d)) => {
            d.preset = None;
            d.apply(&preset(name)?)?
        }
        (Some(name), None) => preset(name)?,
        (None, Some(d)) => d.apply(&ArchSpec::default())?,
        (None, None) => return Err(usage("pass --preset or --config")),
    };
    if let Some(v) = &a.embed_variant {
        spec.embed_variant = enum_from_str::<EmbedVariant>(v, "embed variant")?;
    }
    spec.validate()?;
    Ok(spec)
}

fn resolve_train(t: &TrainArgs) -> Result<TrainConfig> {
    let mut cfg = match &t.train_config {
        Some(p) => parse_json(&read_text(p)?)?,
        None => TrainConfig::default(),
    };
    if let Some(v) = t.seed {
        cfg.seed = v;
    }
    if let Some(v) = t.epochs {
        cfg.epochs = v;
    }
    if t.steps.is_some() {
        cfg.max_steps = t.steps;
    }
    if let Some(v) = t.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = t.lr {
        cfg.lr = v;
    }
    if let Some(v) = t.warmup {
        cfg.warmup = v;
    }
    if let Some(v) = t.weight_decay {
        cfg.weight_decay = v;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn emit(json_mode: bool, value: &Value, human: impl FnOnce()) {
    if json_mode {
        println!("{}", serde_json::to_string_pretty(value).expect("json values serialize"));
    } else {
        human();
    }
}

fn cmd_presets(json_mode: bool) -> Result<()> {
    let mut rows = Vec::new();
    for name in PRESETS {
        let s = preset(name)?;
        rows.push(json!({
            "name": name,
            "sublayers": s.sublayers.len(),
            "embed_variant": s.embed_variant,
            "encoder_params": s.encoder_param_count(),
            "total_params": count_params(&s).total,
        }));
    }
    emit(json_mode, &Value::Array(rows.clone()), || {
        println!("{:<12} {:>9} {:>14} {:>14}  embed", "preset", "sublayers", "encoder", "total");
        for r in &rows {
            println!(
                "{:<12} {:>9} {:>14} {:>14}  {}",
                r["name"].as_str().unwrap_or_default(),
                r["sublayers"].as_u64().unwrap_or_default(),
                r["encoder_params"].as_u64().unwrap_or_default(),
                r["total_params"].as_u64().unwrap_or_default(),
                r["embed_variant"].as_str().unwrap_or_default()
            );
        }
    });
    Ok(())
}

fn cmd_params(a: &ArchArgs, json_mode: bool) -> Result<()> {
    let spec = resolve_arch(a, None)?;
    let c = count_params(&spec);
    let v = json!({
        "arch": spec.name,
        "encoder_params": spec.encoder_param_count(),
        "total": c.total,
        "by_group": c.by_group,
    });
    emit(json_mode, &v, || {
        println!("{}", spec.name);
        for (g, n) in &c.by_group {
            println!("  {:<12} {n:>12}", format!("{g:?}"));
        }
        println!("  {:<12} {:>12}", "encoder", spec.encoder_param_count());
        println!("  {:<12} {:>12}", "total", c.total);
    });
    Ok(())
}

fn cmd_encode(a: &EncodeArgs, json_mode: bool) -> Result<()> {
    let fallback = a.checkpoint.as_ref().map(|c| c.join(ARCH_FILE));
    let spec = resolve_arch(&a.arch, fallback.as_deref())?;
    let ds = match &a.data {
        Some(dir) => Dataset::read(dir)?,
        None => gen_synth(&SynthSpec {
            n_pairs: 2,
            heldout: 0,
            vocab: spec.vocab,
            classes: spec.classes,
            d_feat: spec.d_feat,
            seed: a.seed,
            ..SynthSpec::default()
        })?,
    };
    if a.index >= ds.len() {
        return Err(usage(format!("--index {} out of range for {} pairs", a.index, ds.len())));
    }
    let store = match &a.checkpoint {
        Some(dir) => load_checkpoint(dir)?,
        None => init_params(&spec, a.seed),
    };
    gbt_core::params::check_store(&spec, &store)?;
    let text = ds.text(a.index);
    let vision = ds.vision(a.index);
    let mut g = Graph::new(&store);
    let (h_l, h_v) = encode_pair(&mut g, &spec, &text, vision, &mut ForwardCtx::default())?;
    let rows = |m: &gbt_core::mat::Mat| (0..m.rows()).map(|i| m.row(i).to_vec()).collect::<Vec<_>>();
    let (hl, hv) = (g.value(h_l).clone(), g.value(h_v).clone());
    let logit = match_logit(&store, &spec, &text, vision)?;
    let v = json!({
        "arch": spec.name,
        "caption": ds.captions[a.index],
        "text_shape": [hl.rows(), hl.cols()],
        "vision_shape": [hv.rows(), hv.cols()],
        "match_logit": logit,
        "hidden_text": rows(&hl),
        "hidden_vision": rows(&hv),
    });
    emit(json_mode, &v, || {
        println!("{} pair {}: \"{}\"", spec.name, a.index, ds.captions[a.index]);
        println!("  text hidden   {} x {}", hl.rows(), hl.cols());
        println!("  vision hidden {} x {}", hv.rows(), hv.cols());
        let head = |r: &[f64]| r.iter().take(6).map(|x| format!("{x:+.4}")).collect::<Vec<_>>().join(" ");
        println!("  [CLS] {} ...", head(hl.row(0)));
        println!("  [IMG] {} ...", head(hv.row(0)));
        println!("  match logit {logit:+.6}");
    });
    Ok(())
}

fn cmd_check_equivalence(a: &EquivArgs, json_mode: bool) -> Result<()> {
    let spec = resolve_arch(&a.arch, None)?;
    let checks = check_spec(&spec, a.seed, a.draws, a.tolerance)?;
    let max_dev = checks.iter().map(|c| c.max_abs_dev).fold(0.0, f64::max);
    let passed = checks.iter().all(|c| c.passed);
    let v = json!({ "arch": spec.name, "seed": a.seed, "max_abs_dev": max_dev, "passed": passed, "checks": checks });
    emit(json_mode, &v, || {
        for c in &checks {
            println!(
                "{:<24} {:>3} cases  max |dev| {:.3e}  tol {:.0e}  {}",
                c.name,
                c.cases,
                c.max_abs_dev,
                c.tolerance,
                if c.passed { "ok" } else { "FAILED" }
            );
        }
        println!("max abs deviation {max_dev:.3e}");
    });
    if passed {
        Ok(())
    } else {
        Err(CheckFailed(format!("deviation {max_dev:.3e} not below tolerance")).into())
    }
}

fn cmd_grad_check(a: &GradArgs, json_mode: bool) -> Result<()> {
    let spec = resolve_arch(&a.arch, None)?;
    let r = grad_audit(&spec, a.seed, a.probes, a.step)?;
    let worst = r.worst().cloned();
    let passed = r.max_rel_error < a.tolerance;
    let over = r.probes.iter().filter(|p| p.rel_error >= a.tolerance).count();
    let v = json!({
        "arch": spec.name,
        "seed": a.seed,
        "h": a.step,
        "probes": r.probes.len(),
        "kinked": r.kinked,
        "max_rel_error": r.max_rel_error,
        "over_tolerance": over,
        "worst": worst,
        "passed": passed,
    });
    emit(json_mode, &v, || {
        println!("{}: {} probes ({} kinked draws replaced)", spec.name, r.probes.len(), r.kinked);
        println!("max relative error {:.3e} (tolerance {:.0e}, {over} probes over)", r.max_rel_error, a.tolerance);
        if let Some(w) = &worst {
            println!("worst: {}[{}] analytic {:.6e} numeric {:.6e}", w.name, w.index, w.analytic, w.numeric);
        }
    });
    if passed {
        Ok(())
    } else {
        Err(CheckFailed(format!("max relative error {:.3e} above {:.0e}", r.max_rel_error, a.tolerance)).into())
    }
}

fn progress(log_every: usize, json_mode: bool) -> impl FnMut(&StepRecord) {
    move |r: &StepRecord| {
        if log_every > 0 && (r.step + 1) % log_every == 0 {
            let line = format!(
                "step {:>5}  lr {:.2e}  total {:.4}  mlm {:.4}  mrc {:.4}  itm {:.4}  |g| {:.3}",
                r.step + 1,
                r.lr,
                r.loss.total,
                r.loss.mlm,
                r.loss.mrc_kl,
                r.loss.itm,
                r.grad_norm
            );
            if json_mode {
                eprintln!("{line}");
            } else {
                println!("{line}");
            }
        }
    }
}

fn write_run(out: &Path, spec: &ArchSpec, cfg: &TrainConfig, run: &TrainOutput) -> Result<()> {
    save_checkpoint(&run.store, out)?;
    write_text(&out.join(ARCH_FILE), &(spec.to_json() + "\n"))?;
    write_text(&out.join(TRAIN_FILE), &(serde_json::to_string_pretty(cfg)? + "\n"))?;
    let mut buf = Vec::new();
    write_history(&mut buf, &run.history)?;
    fs::write(out.join(HISTORY_FILE), buf).map_err(|e| Error::Io(e.to_string()))?;
    Ok(())
}

fn run_summary(spec: &ArchSpec, cfg: &TrainConfig, out: &Path, run: &TrainOutput) -> Value {
    json!({
        "arch": serde_json::from_str::<Value>(&spec.to_json()).unwrap_or(Value::Null),
        "train": cfg,
        "out": out,
        "steps": run.history.len(),
        "final": run.history.last(),
    })
}

fn print_effective(spec: &ArchSpec, cfg: &TrainConfig) -> Result<()> {
    println!("effective architecture:\n{}", spec.to_json());
    println!("effective training config:\n{}", serde_json::to_string_pretty(cfg)?);
    Ok(())
}

fn cmd_pretrain(a: &PretrainArgs, json_mode: bool) -> Result<()> {
    let spec = resolve_arch(&a.arch, None)?;
    let cfg = resolve_train(&a.train)?;
    let spec = cfg.effective_arch(&spec)?;
    let ds = Dataset::read(&a.data)?;
    if !json_mode {
        print_effective(&spec, &cfg)?;
    }
    let run = train(&spec, &ds, &cfg, progress(a.train.log_every, json_mode))?;
    write_run(&a.out, &spec, &cfg, &run)?;
    emit(json_mode, &run_summary(&spec, &cfg, &a.out, &run), || {
        println!("wrote {} steps to {}", run.history.len(), a.out.display());
    });
    Ok(())
}

fn cmd_finetune(a: &FinetuneArgs, json_mode: bool) -> Result<()> {
    let spec = resolve_arch(&a.arch, Some(&a.checkpoint.join(ARCH_FILE)))?;
    let cfg = resolve_train(&a.train)?;
    let pretrained = load_checkpoint(&a.checkpoint)?;
    let ds = Dataset::read(&a.data)?;
    if !json_mode {
        print_effective(&spec, &cfg)?;
    }
    let run = finetune_itm(&spec, &pretrained, &ds, &cfg, progress(a.train.log_every, json_mode))?;
    write_run(&a.out, &spec, &cfg, &run)?;
    emit(json_mode, &run_summary(&spec, &cfg, &a.out, &run), || {
        println!("wrote {} steps to {}", run.history.len(), a.out.display());
    });
    Ok(())
}

fn cmd_evaluate(a: &EvalArgs, json_mode: bool) -> Result<()> {
    let spec = resolve_arch(&a.arch, Some(&a.checkpoint.join(ARCH_FILE)))?;
    let store = load_checkpoint(&a.checkpoint)?;
    let ds = Dataset::read(&a.data)?;
    let r = evaluate_itm(&spec, &store, &ds, a.seed)?;
    let v = json!({ "arch": spec.name, "seed": a.seed, "report": r });
    emit(json_mode, &v, || {
        println!(
            "{}: accuracy {:.4} over {} pairs (matched {}/{}, mismatched {}/{})",
            spec.name,
            r.accuracy,
            r.pairs,
            r.matched_correct,
            r.pairs / 2,
            r.mismatched_correct,
            r.pairs / 2
        );
    });
    Ok(())
}

fn cmd_gen_data(a: &GenArgs, json_mode: bool) -> Result<()> {
    let mut spec: SynthSpec = match &a.config {
        Some(p) => parse_json(&read_text(p)?)?,
        None => SynthSpec::default(),
    };
    if let Some(v) = a.seed {
        spec.seed = v;
    }
    if let Some(v) = a.n_pairs {
        spec.n_pairs = v;
    }
    if let Some(v) = a.heldout {
        spec.heldout = v;
    }
    if let Some(v) = a.correlation {
        spec.correlation = v;
    }
    if let Some(t) = &a.task {
        spec.task = enum_from_str::<SynthTask>(t, "task")?;
    }
    let ds = gen_synth(&spec)?;
    ds.write(&a.out)?;
    emit(json_mode, &json!({ "spec": spec, "out": a.out }), || {
        println!("effective data spec:\n{}", serde_json::to_string_pretty(&spec).unwrap_or_default());
        println!("wrote {} pairs to {}", spec.n_pairs, a.out.display());
    });
    Ok(())
}

fn cmd_analyze(a: &AnalyzeArgs, json_mode: bool) -> Result<()> {
    let file = fs::File::open(&a.input).map_err(|e| Error::Io(format!("{}: {e}", a.input.display())))?;
    let table = ScoreTable::read_csv(file)?;
    if table.models.is_empty() {
        return Err(Error::InsufficientData("no scores in the input".into()).into());
    }
    let summary = summarize(&table);
    let cmp = compare_models(&table, a.alpha, a.mc_draws, a.seed)?;
    if let Some(out) = &a.out {
        fs::create_dir_all(out).map_err(|e| Error::Io(e.to_string()))?;
        let f = fs::File::create(out.join("significance.csv")).map_err(|e| Error::Io(e.to_string()))?;
        write_matrix_csv(f, &cmp)?;
        let f = fs::File::create(out.join("summary.csv")).map_err(|e| Error::Io(e.to_string()))?;
        write_summary_csv(f, &summary)?;
        write_text(&out.join("pvalues.json"), &(serde_json::to_string_pretty(&cmp)? + "\n"))?;
    }
    let v = json!({ "summary": summary, "comparison": cmp });
    emit(json_mode, &v, || {
        println!("{:<14} {:>4} {:>10} {:>10} {:>10} {:>10}", "model", "runs", "min", "max", "mean", "sd");
        for s in &summary {
            let sd = s.sd.map_or("-".to_string(), |x| format!("{x:.4}"));
            println!("{:<14} {:>4} {:>10.4} {:>10.4} {:>10.4} {:>10}", s.model, s.runs, s.min, s.max, s.mean, sd);
        }
        if !cmp.skipped.is_empty() {
            println!("not tested (fewer than 2 runs): {}", cmp.skipped.join(", "));
        }
        match &cmp.anova {
            Some(an) if an.degenerate => println!("ANOVA: zero within-group variance, p = {}", an.p),
            Some(an) => println!("ANOVA: F({}, {}) = {:.4}, p = {:.4e}", an.df_between, an.df_within, an.f, an.p),
            None => println!("ANOVA: needs at least 2 models with 2 runs"),
        }
        println!(
            "{} pairs tested, per-pair threshold {:.3e} (alpha {}){}",
            cmp.pairs_tested,
            cmp.threshold,
            cmp.alpha,
            if cmp.exact { "" } else { ", some p-values by Monte Carlo" }
        );
        let n = cmp.models.len();
        for i in 0..n {
            for j in i + 1..n {
                if let Some(p) = cmp.p_values[i][j] {
                    let mark = if cmp.significant[i][j] { "significant" } else { "not significant" };
                    println!("  {} vs {}: p = {p:.6e}  {mark}", cmp.models[i], cmp.models[j]);
                }
            }
        }
    });
    Ok(())
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var("GBT_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| usage(format!("GBT_THREADS must be a positive integer, got `{v}`")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    configure_threads()?;
    let j = cli.json;
    match &cli.cmd {
        Cmd::Encode(a) => cmd_encode(a, j),
        Cmd::CheckEquivalence(a) => cmd_check_equivalence(a, j),
        Cmd::GradCheck(a) => cmd_grad_check(a, j),
        Cmd::Pretrain(a) => cmd_pretrain(a, j),
        Cmd::Finetune(a) => cmd_finetune(a, j),
        Cmd::Evaluate(a) => cmd_evaluate(a, j),
        Cmd::Params(a) => cmd_params(a, j),
        Cmd::Presets => cmd_presets(j),
        Cmd::GenData(a) => cmd_gen_data(a, j),
        Cmd::Analyze(a) => cmd_analyze(a, j),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            if let Some(u) = e.downcast_ref::<Usage>() {
                eprintln!("usage error: {u}");
                return ExitCode::from(2);
            }
            let name = match (e.downcast_ref::<Error>(), e.downcast_ref::<CheckFailed>()) {
                (Some(d), _) => d.name(),
                (None, Some(_)) => "CheckFailed",
                _ => "Error",
            };
            eprintln!("error[{name}]: {e:#}");
            ExitCode::from(1)
        }
    }
}
