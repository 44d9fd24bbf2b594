//! Command-line front end. `run_command` never exits the process; it returns
//! the exit code (0 ok, 1 usage or config error, 2 data/contamination/
//! corruption error).

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::checkpoint::{load_mstb, load_ovlm, metadata, save_mstb, save_ovlm};
use crate::error::{Result, VistexError};
use crate::evaluation::{
    alignment_histogram, base_alignment_samples, evaluate_fsod, eval_episode, EvalMode, EvalOptions, MetricsReport,
};
use crate::exec::{configure_threads, Exec};
use crate::fusion::FusionMode;
use crate::mstb::{Mstb, MstbConfig};
use crate::prompting::{PromptEngineering, PromptSettings};
use crate::synthdata::{Dataset, DatasetConfig};
use crate::toyovlm::{DecodeParams, ToyOvlm};
use crate::training::{pretrain, train_full, train_log_csv, train_mstb, EpochLog, PretrainConfig, TrainConfig};

/// Evaluation knobs of a run config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub shots: usize,
    pub iou_threshold: f64,
    pub decode: DecodeParams,
    pub alignment_bins: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            shots: 5,
            iou_threshold: 0.5,
            decode: DecodeParams::default(),
            alignment_bins: 40,
        }
    }
}

/// Everything a pipeline stage depends on. Precedence: CLI flags, then the
/// `--config` JSON file, then these defaults.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DatasetConfig,
    pub pretrain: PretrainConfig,
    pub train: TrainConfig,
    pub mstb: MstbConfig,
    pub prompt: PromptSettings,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| VistexError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| VistexError::InvalidConfig(format!("{}: {e}", path.display())))
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }
}

#[derive(Debug, Parser)]
#[command(name = "vistex", version, about = "Few-shot visual prompts for a frozen toy grounded detector")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render the synthetic shapes dataset.
    GenData(GenDataArgs),
    /// Pre-train the toy detector on base classes with text prompts.
    Pretrain(PretrainArgs),
    /// Train the MSTB against a frozen detector, or fine-tune the detector.
    Train(TrainArgs),
    /// Evaluate one few-shot episode over base and novel classes.
    Eval(EvalArgs),
    /// Run one ablation sweep; one metrics JSON per cell.
    Ablate(AblateArgs),
    /// Compare object/name cosine-similarity distributions of two detectors.
    AnalyzeAlignment(AlignArgs),
}

#[derive(Debug, Clone, Args)]
struct Common {
    /// JSON run config; CLI flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Clone, Args)]
struct PromptFlags {
    #[arg(long)]
    msf: Option<FusionMode>,
    #[arg(long = "shot-fusion")]
    shot_fusion: Option<FusionMode>,
    #[arg(long = "prompt-eng")]
    prompt_eng: Option<PromptEngineering>,
    /// Stage subset, e.g. `0-2`, `2` or `0,2`.
    #[arg(long, value_parser = parse_stages)]
    stages: Option<StageList>,
}

#[derive(Debug, Args)]
struct GenDataArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct PretrainArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum TrainableArg {
    Mstb,
    All,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_enum)]
    trainable: TrainableArg,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    ovlm: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long = "shots", short = 'k')]
    shots: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[command(flatten)]
    prompt: PromptFlags,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    mode: EvalMode,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    ovlm: PathBuf,
    #[arg(long)]
    mstb: Option<PathBuf>,
    #[arg(long = "shots", short = 'k')]
    shots: Option<usize>,
    #[command(flatten)]
    prompt: PromptFlags,
    /// Also write the metrics report here.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum AblationArg {
    Scales,
    Stages,
    Msf,
    ShotFusion,
    PromptEng,
    Sharing,
}

#[derive(Debug, Args)]
struct AblateArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_enum)]
    what: AblationArg,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    ovlm: PathBuf,
    /// Directory receiving one `<what>-<cell>.json` per cell.
    #[arg(long)]
    out: PathBuf,
    #[arg(long = "shots", short = 'k')]
    shots: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
}

#[derive(Debug, Args)]
struct AlignArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    data: PathBuf,
    /// Reference detector.
    #[arg(long)]
    ovlm: PathBuf,
    /// Detector to compare against the reference.
    #[arg(long)]
    against: PathBuf,
    #[arg(long)]
    bins: Option<usize>,
    #[arg(long)]
    json: Option<PathBuf>,
    /// Histogram table.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct StageList(Vec<usize>);

fn parse_stages(s: &str) -> std::result::Result<StageList, String> {
    let mut out = Vec::new();
    for part in s.split(',') {
        let part = part.trim();
        let range = match part.split_once('-') {
            Some((a, b)) => {
                let (a, b): (usize, usize) = (a.parse().map_err(|_| format!("bad stage {a:?}"))?, b.parse().map_err(|_| format!("bad stage {b:?}"))?);
                if a > b {
                    return Err(format!("empty stage range {part:?}"));
                }
                a..=b
            }
            None => {
                let a = part.parse().map_err(|_| format!("bad stage {part:?}"))?;
                a..=a
            }
        };
        out.extend(range);
    }
    out.sort_unstable();
    out.dedup();
    if out.is_empty() {
        return Err("empty stage subset".into());
    }
    Ok(StageList(out))
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::from_json_file(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

/// Whether the config file sets the `prompt` section explicitly.
fn config_sets_prompt(common: &Common) -> Result<bool> {
    let Some(p) = &common.config else { return Ok(false) };
    let text = fs::read_to_string(p).map_err(|e| VistexError::io(p, e))?;
    let v: Value = serde_json::from_str(&text).map_err(|e| VistexError::InvalidConfig(format!("{}: {e}", p.display())))?;
    Ok(v.get("prompt").is_some())
}

fn apply_prompt_flags(settings: &mut PromptSettings, flags: &PromptFlags) {
    if let Some(m) = flags.msf {
        settings.msf = m;
    }
    if let Some(m) = flags.shot_fusion {
        settings.shot_fusion = m;
    }
    if let Some(p) = flags.prompt_eng {
        settings.prompt_eng = p;
    }
    if let Some(s) = &flags.stages {
        settings.stages = Some(s.0.clone());
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| VistexError::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| VistexError::io(path, e))
}

fn write_log(dir: &Path, log: &[EpochLog]) -> Result<()> {
    write_text(&dir.join("train_log.csv"), &train_log_csv(log))
}

fn load_dataset(dir: &Path, cfg: &RunConfig) -> Result<Dataset> {
    let ds = Dataset::load(dir)?;
    if ds.manifest.seed != cfg.seed {
        log::warn!("dataset was generated with seed {}, run seed is {}", ds.manifest.seed, cfg.seed);
    }
    Ok(ds)
}

fn cmd_gen_data(a: &GenDataArgs) -> Result<()> {
    let cfg = load_config(&a.common)?;
    let ds = Dataset::render(&cfg.data, cfg.seed)?;
    ds.write(&a.out)?;
    println!(
        "{}",
        json!({
            "out": a.out,
            "images": ds.len(),
            "base": ds.manifest.split.base,
            "novel": ds.manifest.split.novel,
            "config_hash": cfg.hash(),
        })
    );
    Ok(())
}

fn cmd_pretrain(a: &PretrainArgs) -> Result<()> {
    let mut cfg = load_config(&a.common)?;
    if let Some(e) = a.epochs {
        cfg.pretrain.epochs = e;
    }
    if let Some(lr) = a.lr {
        cfg.pretrain.lr = lr;
    }
    let ds = load_dataset(&a.data, &cfg)?;
    let (model, log) = pretrain(&ds, &cfg.pretrain, cfg.seed, Exec::default())?;
    let meta = metadata([
        ("stage", json!("pretrain")),
        ("epochs", json!(cfg.pretrain.epochs)),
        ("seed", json!(cfg.seed)),
        ("config_hash", json!(cfg.hash())),
    ]);
    save_ovlm(&model, meta, &a.out)?;
    write_log(&a.out, &log)?;
    println!("{}", json!({"out": a.out, "final_loss": log.last().map(|l| l.loss), "config_hash": cfg.hash()}));
    Ok(())
}

fn train_config(cfg: &mut RunConfig, shots: Option<usize>, epochs: Option<usize>, lr: Option<f64>) {
    if let Some(k) = shots {
        cfg.train.k = k;
    }
    if let Some(e) = epochs {
        cfg.train.epochs = e;
    }
    if let Some(lr) = lr {
        cfg.train.lr = lr;
    }
}

/// Trains a fresh MSTB and writes its checkpoint plus `train_log.csv`.
fn train_and_save_mstb(ovlm: &ToyOvlm, ds: &Dataset, cfg: &RunConfig, out: &Path) -> Result<Mstb> {
    let mut mstb = Mstb::new(ovlm.config.clone(), cfg.mstb.clone(), cfg.seed)?;
    let log = train_mstb(ovlm, &mut mstb, ds, &cfg.train, &cfg.prompt, cfg.seed, Exec::default())?;
    let meta = metadata([
        ("stage", json!("train_mstb")),
        ("epochs", json!(cfg.train.epochs)),
        ("k", json!(cfg.train.k)),
        ("seed", json!(cfg.seed)),
        ("config_hash", json!(cfg.hash())),
    ]);
    save_mstb(&mstb, &cfg.prompt, meta, out)?;
    write_log(out, &log)?;
    Ok(mstb)
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let mut cfg = load_config(&a.common)?;
    train_config(&mut cfg, a.shots, a.epochs, a.lr);
    apply_prompt_flags(&mut cfg.prompt, &a.prompt);
    let ds = load_dataset(&a.data, &cfg)?;
    let (mut ovlm, _) = load_ovlm(&a.ovlm)?;
    match a.trainable {
        TrainableArg::Mstb => {
            train_and_save_mstb(&ovlm, &ds, &cfg, &a.out)?;
        }
        TrainableArg::All => {
            let log = train_full(&mut ovlm, &ds, &cfg.train, cfg.seed, Exec::default())?;
            let meta = metadata([
                ("stage", json!("train_full")),
                ("epochs", json!(cfg.train.epochs)),
                ("k", json!(cfg.train.k)),
                ("seed", json!(cfg.seed)),
                ("config_hash", json!(cfg.hash())),
            ]);
            save_ovlm(&ovlm, meta, &a.out)?;
            write_log(&a.out, &log)?;
        }
    }
    println!("{}", json!({"out": a.out, "config_hash": cfg.hash()}));
    Ok(())
}

fn eval_options(cfg: &RunConfig) -> EvalOptions {
    EvalOptions {
        decode: cfg.eval.decode,
        iou_threshold: cfg.eval.iou_threshold,
        seed: cfg.seed,
        exec: Exec::default(),
    }
}

/// Evaluates one episode drawn from `cfg.seed` with `cfg.eval.shots` shots.
fn evaluate(ovlm: &ToyOvlm, mstb: Option<&Mstb>, ds: &Dataset, mode: EvalMode, settings: &PromptSettings, cfg: &RunConfig) -> Result<MetricsReport> {
    let episode = eval_episode(ds, cfg.eval.shots, cfg.seed)?;
    let mut report = evaluate_fsod(ovlm, mstb, ds, &episode, mode, settings, &eval_options(cfg))?;
    report.config_hash = cfg.hash();
    Ok(report)
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let mut cfg = load_config(&a.common)?;
    if let Some(k) = a.shots {
        cfg.eval.shots = k;
    }
    let ds = load_dataset(&a.data, &cfg)?;
    let (ovlm, _) = load_ovlm(&a.ovlm)?;
    let mstb = match (&a.mstb, a.mode) {
        (Some(dir), EvalMode::Vistex) => {
            let (m, trained_with, _) = load_mstb(dir)?;
            if !config_sets_prompt(&a.common)? {
                cfg.prompt = trained_with;
            }
            Some(m)
        }
        (None, EvalMode::Vistex) => return Err(VistexError::InvalidConfig("--mode vistex needs --mstb".into())),
        _ => None,
    };
    apply_prompt_flags(&mut cfg.prompt, &a.prompt);
    let report = evaluate(&ovlm, mstb.as_ref(), &ds, a.mode, &cfg.prompt.clone(), &cfg)?;
    let text = report.to_json();
    if let Some(p) = &a.json {
        write_text(p, &text)?;
    }
    print!("{text}");
    Ok(())
}

/// `(cell name, config with the cell applied)` for one sweep.
fn ablation_cells(what: AblationArg, base: &RunConfig) -> Vec<(String, RunConfig)> {
    let m = base.pretrain.ovlm.scales;
    let l = base.pretrain.ovlm.stages;
    let with = |f: &dyn Fn(&mut RunConfig)| {
        let mut c = base.clone();
        f(&mut c);
        c
    };
    match what {
        AblationArg::Scales => (0..m)
            .map(|first| {
                let scales: Vec<usize> = (first..m).collect();
                (format!("{first}-{}", m - 1), with(&|c| c.mstb.scales = Some(scales.clone())))
            })
            .collect(),
        AblationArg::Stages => {
            let mut subsets: Vec<Vec<usize>> = vec![(0..=l).collect(), vec![l], vec![0]];
            if l >= 2 {
                subsets.push((1..=l).collect());
            }
            subsets
                .into_iter()
                .map(|s| {
                    let name = if s.len() == 1 { s[0].to_string() } else { format!("{}-{}", s[0], s[s.len() - 1]) };
                    (name, with(&|c| c.prompt.stages = Some(s.clone())))
                })
                .collect()
        }
        AblationArg::Msf => FusionMode::ALL
            .into_iter()
            .map(|f| (f.name().to_string(), with(&|c| c.prompt.msf = f)))
            .collect(),
        AblationArg::ShotFusion => FusionMode::ALL
            .into_iter()
            .map(|f| (f.name().to_string(), with(&|c| c.prompt.shot_fusion = f)))
            .collect(),
        AblationArg::PromptEng => PromptEngineering::ALL
            .into_iter()
            .map(|p| (p.name().to_string(), with(&|c| c.prompt.prompt_eng = p)))
            .collect(),
        AblationArg::Sharing => [true, false]
            .into_iter()
            .map(|s| ((if s { "shared" } else { "unshared" }).to_string(), with(&|c| c.mstb.sharing = s)))
            .collect(),
    }
}

fn ablation_name(what: AblationArg) -> &'static str {
    match what {
        AblationArg::Scales => "scales",
        AblationArg::Stages => "stages",
        AblationArg::Msf => "msf",
        AblationArg::ShotFusion => "shot-fusion",
        AblationArg::PromptEng => "prompt-eng",
        AblationArg::Sharing => "sharing",
    }
}

fn cmd_ablate(a: &AblateArgs) -> Result<()> {
    let mut cfg = load_config(&a.common)?;
    train_config(&mut cfg, None, a.epochs, a.lr);
    if let Some(k) = a.shots {
        cfg.eval.shots = k;
    }
    let ds = load_dataset(&a.data, &cfg)?;
    let (ovlm, _) = load_ovlm(&a.ovlm)?;
    let what = ablation_name(a.what);
    let mut summary = serde_json::Map::new();
    for (cell, cell_cfg) in ablation_cells(a.what, &cfg) {
        log::info!("ablation {what}: cell {cell}");
        let ckpt = a.out.join(format!("{what}-{cell}.mstb"));
        let mstb = train_and_save_mstb(&ovlm, &ds, &cell_cfg, &ckpt)?;
        let report = evaluate(&ovlm, Some(&mstb), &ds, EvalMode::Vistex, &cell_cfg.prompt, &cell_cfg)?;
        write_text(&a.out.join(format!("{what}-{cell}.json")), &report.to_json())?;
        summary.insert(cell, json!({"bAP50": report.bap50, "nAP50": report.nap50}));
    }
    println!("{}", json!({"ablation": what, "cells": summary}));
    Ok(())
}

fn cmd_align(a: &AlignArgs) -> Result<()> {
    let mut cfg = load_config(&a.common)?;
    if let Some(b) = a.bins {
        cfg.eval.alignment_bins = b;
    }
    let ds = load_dataset(&a.data, &cfg)?;
    let (ovlm_a, _) = load_ovlm(&a.ovlm)?;
    let (ovlm_b, _) = load_ovlm(&a.against)?;
    let samples = base_alignment_samples(&ds)?;
    let report = alignment_histogram(&ovlm_a, &ovlm_b, &ds, &samples, cfg.eval.alignment_bins, Exec::default())?;
    let out = json!({
        "samples": samples.len(),
        "bins": cfg.eval.alignment_bins,
        "sym_kl": report.stats.sym_kl,
        "emd": report.stats.emd,
        "config_hash": cfg.hash(),
    });
    let text = serde_json::to_string_pretty(&out).expect("json") + "\n";
    if let Some(p) = &a.json {
        write_text(p, &text)?;
    }
    if let Some(p) = &a.csv {
        write_text(p, &report.to_csv())?;
    }
    print!("{text}");
    Ok(())
}

fn dispatch(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::GenData(a) => cmd_gen_data(a),
        Command::Pretrain(a) => cmd_pretrain(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::AnalyzeAlignment(a) => cmd_align(a),
    }
}

/// Parses `argv` (including the program name) and runs the subcommand.
pub fn run_command<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    configure_threads(None);
    match dispatch(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_data_error() {
                2
            } else {
                1
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_lists() {
        assert_eq!(parse_stages("0-2").unwrap().0, vec![0, 1, 2]);
        assert_eq!(parse_stages("2").unwrap().0, vec![2]);
        assert_eq!(parse_stages("2,0,0").unwrap().0, vec![0, 2]);
        assert!(parse_stages("2-1").is_err());
        assert!(parse_stages("x").is_err());
    }

    #[test]
    fn ablation_grid_sizes() {
        let base = RunConfig::default();
        let n = |w| ablation_cells(w, &base).len();
        assert_eq!(n(AblationArg::Scales), base.pretrain.ovlm.scales);
        assert_eq!(n(AblationArg::Msf), 4);
        assert_eq!(n(AblationArg::ShotFusion), 4);
        assert_eq!(n(AblationArg::PromptEng), 6);
        assert_eq!(n(AblationArg::Sharing), 2);
        let stages = ablation_cells(AblationArg::Stages, &base);
        assert_eq!(stages[0].1.prompt.stages, Some(vec![0, 1, 2]));
    }

    #[test]
    fn config_hash_tracks_content() {
        let a = RunConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
        let back: RunConfig = serde_json::from_str(&serde_json::to_string(&a).unwrap()).unwrap();
        assert_eq!(back, a);
    }
}
