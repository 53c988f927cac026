//! `fuselab`: command-line front end for the exposure-fusion laboratory.

mod manifest;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use fuselab::autodiff::op_suite;
use fuselab::image::{load_image, load_manifest, save_image, save_plane, ExposureStack, SceneSets};
use fuselab::mef_ssim::{total_loss, LossConfig};
use fuselab::msfnet::{self, NetConfig, NetParams};
use fuselab::pyramid::{default_levels, mertens_fuse};
use fuselab::synth::{load_corpus, write_corpus, CorpusConfig, CorpusScene, SceneKind, SynthConfig};
use fuselab::training::{
    ablation, end_to_end_grad_check, evaluate, order_preservation, split_indices, train_with_validation, Case,
    MeasureSet, TrainConfig,
};
use fuselab::weights::smoothed_weights;

use manifest::{files_under, manifest_files, RunManifest};

const OP_TOLERANCE: f64 = 1e-4;
const END_TO_END_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Parser)]
#[command(name = "fuselab", version, about = "Exposure-fusion laboratory")]
struct Cli {
    /// Worker threads for data-parallel loops [default: available cores].
    #[arg(long, global = true, env = "FUSELAB_THREADS")]
    threads: Option<usize>,
    /// `key=value` file of defaults for the subcommand's flags. Flags given
    /// on the command line take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Where to write the run manifest [default: next to the main output].
    #[arg(long, global = true)]
    run_manifest: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic bracketed corpus.
    Synth(SynthArgs),
    /// Write normalized and smoothed weight maps of a stack.
    Weights(WeightsArgs),
    /// Fuse a stack with pyramid fusion or a trained network.
    Fuse(FuseArgs),
    /// Train the fusion network on a corpus.
    Train(TrainArgs),
    /// Score a fused image, or a trained network on a corpus.
    Eval(EvalArgs),
    /// Train the λ × levels ablation grid.
    Ablate(AblateArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
    /// Re-run a recorded invocation and compare its outputs.
    Replay(ReplayArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Synth(_) => "synth",
            Command::Weights(_) => "weights",
            Command::Fuse(_) => "fuse",
            Command::Train(_) => "train",
            Command::Eval(_) => "eval",
            Command::Ablate(_) => "ablate",
            Command::Gradcheck(_) => "gradcheck",
            Command::Replay(_) => "replay",
        }
    }
}

/// Parses a 1-based image index into a 0-based one.
fn parse_index(s: &str) -> std::result::Result<usize, String> {
    let i: usize = s.trim().parse().map_err(|_| format!("bad index {s:?}"))?;
    if i == 0 {
        return Err("indices are 1-based".into());
    }
    Ok(i - 1)
}

fn parse_kind(s: &str) -> std::result::Result<SceneKind, String> {
    s.parse().map_err(|e: fuselab::Error| e.to_string())
}

#[derive(Debug, Args, Serialize)]
#[command(args_override_self = true)]
struct SynthArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 10)]
    scenes: usize,
    #[arg(long, default_value_t = 64)]
    size: usize,
    /// Exposure ratios, comma separated, scaled by --base-time.
    #[arg(long, default_value = "1,8,64", value_delimiter = ',')]
    times: Vec<f64>,
    #[arg(long, default_value_t = fuselab::synth::DEFAULT_BASE_TIME)]
    base_time: f64,
    /// gradient, disks, value-noise or composite.
    #[arg(long, default_value = "composite", value_parser = parse_kind)]
    #[serde(skip)]
    kind: SceneKind,
    #[arg(long, default_value_t = fuselab::synth::DEFAULT_DYNAMIC_RANGE)]
    dynamic_range: f64,
    /// Gaussian capture noise standard deviation, in units of full scale.
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
#[command(args_override_self = true)]
struct WeightsArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Images to weight (1-based, comma separated) [default: all].
    #[arg(long, value_parser = parse_index, value_delimiter = ',')]
    images: Option<Vec<usize>>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
enum Method {
    Mertens,
    Net,
}

#[derive(Debug, Args, Serialize)]
#[command(args_override_self = true)]
struct FuseArgs {
    #[arg(long, value_enum)]
    method: Method,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Trained parameters (required for --method net).
    #[arg(long)]
    params: Option<PathBuf>,
    /// Images to fuse (1-based, comma separated). Defaults to every image
    /// for mertens and to the case rule for net.
    #[arg(long, value_parser = parse_index, value_delimiter = ',')]
    fuse: Option<Vec<usize>>,
    /// Set-construction rule for net fusion [default: from the network's
    /// input count].
    #[arg(long)]
    case: Option<u32>,
    /// Pyramid levels for mertens [default: floor(log2 min side) - 1].
    #[arg(long)]
    levels: Option<usize>,
}

#[derive(Debug, Args, Serialize, Clone)]
struct NetFlags {
    #[arg(long, default_value_t = 16)]
    base_channels: usize,
    #[arg(long, default_value_t = 3)]
    levels: usize,
    #[arg(long, default_value_t = 1)]
    msrrg_per_scale: usize,
    #[arg(long, default_value_t = 2)]
    dabs_per_msrrg: usize,
}

#[derive(Debug, Args, Serialize, Clone)]
struct TrainFlags {
    #[arg(long, default_value_t = 1)]
    case: u32,
    #[arg(long, default_value_t = 200)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    batch: usize,
    /// Weight of the weighted-absolute-error term.
    #[arg(long, default_value_t = 10.0)]
    lambda: f64,
    /// Measure the loss on the fused set only (the coupled control).
    #[arg(long)]
    coupled: bool,
    #[arg(long)]
    deep_supervision: bool,
    /// Seed of the 80/10/10 train/validation/test split.
    #[arg(long, default_value_t = 0)]
    split_seed: u64,
    #[command(flatten)]
    net: NetFlags,
}

impl TrainFlags {
    fn config(&self) -> Result<TrainConfig> {
        let case = Case::from_number(self.case).map_err(usage)?;
        let mut cfg = TrainConfig::new(case);
        cfg.epochs = self.epochs;
        cfg.lr0 = self.lr;
        cfg.seed = self.seed;
        cfg.batch = self.batch;
        cfg.loss.lambda = self.lambda;
        cfg.deep_supervision = self.deep_supervision;
        cfg.measure = if self.coupled { MeasureSet::Coupled } else { MeasureSet::Decoupled };
        cfg.net = NetConfig {
            inputs: case.fuse_count(),
            levels: self.net.levels,
            base_channels: self.net.base_channels,
            msrrg_per_scale: self.net.msrrg_per_scale,
            dabs_per_msrrg: self.net.dabs_per_msrrg,
            ..NetConfig::default()
        };
        cfg.validate().map_err(usage)?;
        Ok(cfg)
    }
}

#[derive(Debug, Args, Serialize)]
#[command(args_override_self = true)]
struct TrainArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Per-epoch CSV [default: <out>.train.csv].
    #[arg(long)]
    report: Option<PathBuf>,
    #[command(flatten)]
    train: TrainFlags,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
enum Split {
    All,
    Train,
    Val,
    Test,
}

#[derive(Debug, Args, Serialize)]
#[command(args_override_self = true)]
struct EvalArgs {
    /// Stack to score a single fused image against.
    #[arg(long, requires = "fused", conflicts_with = "corpus")]
    manifest: Option<PathBuf>,
    #[arg(long)]
    fused: Option<PathBuf>,
    /// Measurement images for --fused (1-based) [default: all].
    #[arg(long, value_parser = parse_index, value_delimiter = ',')]
    measure: Option<Vec<usize>>,
    /// Corpus to score a trained network on.
    #[arg(long, requires = "params")]
    corpus: Option<PathBuf>,
    #[arg(long)]
    params: Option<PathBuf>,
    #[arg(long)]
    case: Option<u32>,
    #[arg(long, value_enum, default_value = "test")]
    split: Split,
    #[arg(long, default_value_t = 0)]
    split_seed: u64,
    /// CSV of per-scene scores.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
#[command(args_override_self = true)]
struct AblateArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    csv: Option<PathBuf>,
    #[command(flatten)]
    train: TrainFlags,
}

#[derive(Debug, Args, Serialize)]
#[command(args_override_self = true)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Parameters sampled for the end-to-end check.
    #[arg(long, default_value_t = 25)]
    samples: usize,
}

#[derive(Debug, Args, Serialize)]
struct ReplayArgs {
    /// A run manifest written by an earlier invocation.
    run: PathBuf,
}

/// Argument problems found after parsing; reported with exit code 2.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(e: impl std::fmt::Display) -> anyhow::Error {
    UsageError(e.to_string()).into()
}

/// What a subcommand touched, for the run manifest.
#[derive(Default)]
struct Effects {
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    seeds: Vec<u64>,
    primary: Option<PathBuf>,
    /// Set when the run completed but its check failed.
    failure: Option<String>,
}

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().collect();
    match run(argv) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            if let Some(clap_err) = e.downcast_ref::<clap::Error>() {
                let _ = clap_err.print();
                return ExitCode::from(clap_err.exit_code().clamp(0, 255) as u8);
            }
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                eprintln!("\nFor more information, try '--help'.");
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

fn parse(argv: &[String]) -> Result<Cli> {
    let matches = Cli::command().try_get_matches_from(argv)?;
    Ok(Cli::from_arg_matches(&matches)?)
}

/// Inserts `--key value` pairs from a config file right after the
/// subcommand name, so explicit flags that follow override them.
fn apply_config_file(argv: &[String], cli: &Cli) -> Result<Vec<String>> {
    let Some(path) = &cli.config else {
        return Ok(argv.to_vec());
    };
    let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let mut injected = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| usage(format!("{}:{}: expected key=value", path.display(), lineno + 1)))?;
        let flag = format!("--{}", k.trim().replace('_', "-"));
        match v.trim() {
            "true" => injected.push(flag),
            "false" => {}
            v => {
                injected.push(flag);
                injected.push(v.to_string());
            }
        }
    }
    let name = cli.command.name();
    let pos = argv
        .iter()
        .position(|a| a == name)
        .ok_or_else(|| usage("subcommand not found in arguments"))?;
    let mut out = argv[..=pos].to_vec();
    out.extend(injected);
    out.extend_from_slice(&argv[pos + 1..]);
    Ok(out)
}

fn run(argv: Vec<String>) -> Result<()> {
    let first = parse(&argv)?;
    let cli = parse(&apply_config_file(&argv, &first)?)?;
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(usage("--threads must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    if let Command::Replay(args) = &cli.command {
        return replay(&args.run);
    }
    let (config, effects) = match &cli.command {
        Command::Synth(a) => (serde_json::to_value(a)?, synth(a)?),
        Command::Weights(a) => (serde_json::to_value(a)?, weights(a)?),
        Command::Fuse(a) => (serde_json::to_value(a)?, fuse(a)?),
        Command::Train(a) => (serde_json::to_value(a)?, train(a)?),
        Command::Eval(a) => (serde_json::to_value(a)?, eval(a)?),
        Command::Ablate(a) => (serde_json::to_value(a)?, ablate(a)?),
        Command::Gradcheck(a) => (serde_json::to_value(a)?, gradcheck(a)?),
        Command::Replay(_) => unreachable!("handled above"),
    };
    let mut m = RunManifest::new(cli.command.name(), argv.clone(), config);
    m.threads = cli.threads;
    m.seeds = effects.seeds.clone();
    if let Some(cfg) = &cli.config {
        m.add_inputs(std::slice::from_ref(cfg))?;
    }
    m.add_inputs(&effects.inputs)?;
    m.add_outputs(&effects.outputs)?;
    let path = cli.run_manifest.clone().unwrap_or_else(|| match &effects.primary {
        Some(p) if p.is_dir() => p.join("run.json"),
        Some(p) => PathBuf::from(format!("{}.run.json", p.display())),
        None => PathBuf::from(format!("fuselab-{}.run.json", cli.command.name())),
    });
    m.write(&path)?;
    eprintln!("run manifest: {}", path.display());
    match effects.failure {
        Some(msg) => anyhow::bail!(msg),
        None => Ok(()),
    }
}

fn replay(run: &Path) -> Result<()> {
    let m = RunManifest::read(run)?;
    if m.command == "replay" {
        return Err(usage("cannot replay a replay"));
    }
    std::env::set_current_dir(&m.cwd).with_context(|| format!("entering {}", m.cwd.display()))?;
    for input in &m.inputs {
        let now = manifest::sha256_file(&input.path)?;
        if now != input.sha256 {
            anyhow::bail!("input {} changed since the recorded run", input.path.display());
        }
    }
    let scratch = tempfile_path(run);
    let mut argv = m.argv.clone();
    argv.push("--run-manifest".into());
    argv.push(scratch.display().to_string());
    run_inner(argv)?;
    let again = RunManifest::read(&scratch)?;
    fs::remove_file(&scratch).ok();
    let mut mismatches = 0;
    for (a, b) in m.outputs.iter().zip(&again.outputs) {
        if a != b {
            eprintln!("differs: {}", a.path.display());
            mismatches += 1;
        }
    }
    if mismatches > 0 || m.outputs.len() != again.outputs.len() {
        anyhow::bail!("replay did not reproduce {mismatches} output(s)");
    }
    println!("reproduced {} output(s) bit-exactly", m.outputs.len());
    Ok(())
}

fn run_inner(argv: Vec<String>) -> Result<()> {
    let cli = parse(&argv)?;
    if matches!(cli.command, Command::Replay(_)) {
        return Err(usage("cannot replay a replay"));
    }
    run(argv)
}

fn tempfile_path(run: &Path) -> PathBuf {
    let mut p = std::env::temp_dir();
    p.push(format!(
        "fuselab-replay-{}-{}.json",
        std::process::id(),
        run.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
    ));
    p
}

fn synth(a: &SynthArgs) -> Result<Effects> {
    let cfg = CorpusConfig {
        seed: a.seed,
        scenes: a.scenes,
        synth: SynthConfig {
            size: a.size,
            kind: a.kind,
            dynamic_range: a.dynamic_range,
        },
        ratios: a.times.clone(),
        base_time: a.base_time,
        noise: a.noise,
    };
    if a.scenes == 0 {
        return Err(usage("--scenes must be at least 1"));
    }
    let dirs = write_corpus(&a.out, &cfg)?;
    println!("wrote {} scenes to {}", dirs.len(), a.out.display());
    let mut outputs = Vec::new();
    for d in &dirs {
        outputs.extend(files_under(d)?);
    }
    Ok(Effects {
        outputs,
        seeds: vec![a.seed],
        primary: Some(a.out.clone()),
        ..Effects::default()
    })
}

fn select(stack: ExposureStack, idx: Option<&Vec<usize>>) -> Result<SceneSets> {
    match idx {
        None => Ok(SceneSets::all(stack)),
        Some(i) => Ok(SceneSets::new(stack, i.clone(), i.clone())?),
    }
}

fn weights(a: &WeightsArgs) -> Result<Effects> {
    let stack = load_manifest(&a.manifest)?;
    let sets = select(stack, a.images.as_ref())?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let set = smoothed_weights(&sets)?;
    let mut outputs = Vec::new();
    for (kind, maps) in [("weight", &set.normalized), ("smoothed", &set.smoothed)] {
        let n = maps[0].len();
        let worst = (0..n)
            .map(|p| (maps.iter().map(|m| m.data()[p]).sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max);
        println!("{kind}: max |sum - 1| = {worst:.3e}");
        for (m, &img) in maps.iter().zip(sets.measure_idx()) {
            let p = a.out.join(format!("{kind}_{}.png", img + 1));
            save_plane(m, &p)?;
            outputs.push(p);
        }
    }
    Ok(Effects {
        inputs: manifest_files(&a.manifest)?,
        outputs,
        primary: Some(a.out.clone()),
        ..Effects::default()
    })
}

fn fuse(a: &FuseArgs) -> Result<Effects> {
    let stack = load_manifest(&a.manifest)?;
    let mut inputs = manifest_files(&a.manifest)?;
    let fused = match a.method {
        Method::Mertens => {
            if a.params.is_some() {
                return Err(usage("--params only applies to --method net"));
            }
            let sets = select(stack, a.fuse.as_ref())?;
            let (w, h) = sets.dims();
            mertens_fuse(&sets, a.levels.unwrap_or_else(|| default_levels(w, h)))?
        }
        Method::Net => {
            let path = a.params.as_ref().ok_or_else(|| usage("--method net needs --params"))?;
            let params = NetParams::load(path, None)?;
            inputs.push(path.clone());
            let images: Vec<usize> = match (&a.fuse, a.case) {
                (Some(_), Some(_)) => return Err(usage("give either --fuse or --case")),
                (Some(idx), None) => idx.clone(),
                (None, case) => {
                    let case = match case {
                        Some(c) => Case::from_number(c).map_err(usage)?,
                        None if params.config().inputs == 3 => Case::Two,
                        None => Case::One,
                    };
                    case.make_sets(stack.clone())?.fuse_idx().to_vec()
                }
            };
            let sets = SceneSets::new(stack, images.clone(), images)?;
            let refs: Vec<_> = sets.fuse_images().collect();
            msfnet::forward(&refs, &params)?
        }
    };
    save_image(&fused, &a.out)?;
    println!("wrote {}", a.out.display());
    Ok(Effects {
        inputs,
        outputs: vec![a.out.clone()],
        primary: Some(a.out.clone()),
        ..Effects::default()
    })
}

fn corpus_inputs(dir: &Path) -> Result<Vec<PathBuf>> {
    Ok(files_under(dir)?
        .into_iter()
        .filter(|p| p.file_name().is_some_and(|n| n != "run.json"))
        .collect())
}

fn pick(scenes: &[CorpusScene], idx: &[usize]) -> Vec<CorpusScene> {
    idx.iter().map(|&i| scenes[i].clone()).collect()
}

fn train(a: &TrainArgs) -> Result<Effects> {
    let cfg = a.train.config()?;
    let scenes = load_corpus(&a.corpus)?;
    let (tr, val, _) = split_indices(scenes.len(), a.train.split_seed);
    let (train_set, val_set) = (pick(&scenes, &tr), pick(&scenes, &val));
    eprintln!(
        "training on {} scenes ({} validation), {} epochs",
        train_set.len(),
        val_set.len(),
        cfg.epochs
    );
    let (params, report) = train_with_validation(&train_set, &val_set, &cfg)?;
    for e in &report.epochs {
        eprintln!(
            "epoch {:>4}  lr {:.3e}  loss {:.5}  L_S {:.5}  L_W {:.5}  val {}",
            e.epoch,
            e.lr,
            e.loss_total,
            e.loss_s,
            e.loss_w,
            e.val_mef_ssim.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into())
        );
    }
    params.save(&a.out)?;
    let report_path = a
        .report
        .clone()
        .unwrap_or_else(|| PathBuf::from(format!("{}.train.csv", a.out.display())));
    fs::write(&report_path, report.to_csv()?).with_context(|| format!("writing {}", report_path.display()))?;
    let first = report.epochs.first().map(|e| e.loss_total).unwrap_or(f64::NAN);
    let last = report.epochs.last().map(|e| e.loss_total).unwrap_or(f64::NAN);
    println!(
        "trained {} parameters in {:.1} s; loss {first:.5} -> {last:.5}",
        params.count(),
        report.wall_clock
    );
    Ok(Effects {
        inputs: corpus_inputs(&a.corpus)?,
        outputs: vec![a.out.clone(), report_path],
        seeds: vec![a.train.seed, a.train.split_seed],
        primary: Some(a.out.clone()),
        ..Effects::default()
    })
}

fn eval(a: &EvalArgs) -> Result<Effects> {
    if let (Some(manifest), Some(fused_path)) = (&a.manifest, &a.fused) {
        let stack = load_manifest(manifest)?;
        let sets = select(stack, a.measure.as_ref())?;
        let fused = load_image(fused_path)?;
        let b = total_loss(&sets, &fused, &LossConfig::default())?;
        println!("mef_ssim {:.6}", b.mef_ssim);
        println!("loss_s {:.6}", b.loss_s);
        println!("loss_w {:.6}", b.loss_w);
        println!("total {:.6}", b.total);
        let mut inputs = manifest_files(manifest)?;
        inputs.push(fused_path.clone());
        let mut outputs = Vec::new();
        if let Some(csv_path) = &a.csv {
            let mut w = csv::Writer::from_path(csv_path)?;
            w.write_record(["fused", "mef_ssim", "loss_s", "loss_w", "total"])?;
            w.write_record([
                fused_path.display().to_string(),
                format!("{:.12}", b.mef_ssim),
                format!("{:.12}", b.loss_s),
                format!("{:.12}", b.loss_w),
                format!("{:.12}", b.total),
            ])?;
            w.flush()?;
            outputs.push(csv_path.clone());
        }
        return Ok(Effects {
            inputs,
            primary: a.csv.clone(),
            outputs,
            ..Effects::default()
        });
    }
    let (Some(corpus), Some(params_path)) = (&a.corpus, &a.params) else {
        return Err(usage("eval needs --manifest with --fused, or --corpus with --params"));
    };
    let params = NetParams::load(params_path, None)?;
    let case = match a.case {
        Some(c) => Case::from_number(c).map_err(usage)?,
        None if params.config().inputs == 3 => Case::Two,
        None => Case::One,
    };
    let mut cfg = TrainConfig::new(case);
    cfg.net = params.config().clone();
    let scenes = load_corpus(corpus)?;
    let (tr, val, test) = split_indices(scenes.len(), a.split_seed);
    let chosen = match a.split {
        Split::All => scenes.clone(),
        Split::Train => pick(&scenes, &tr),
        Split::Val => pick(&scenes, &val),
        Split::Test => pick(&scenes, &test),
    };
    if chosen.is_empty() {
        return Err(usage("the selected split is empty"));
    }
    let table = evaluate(&chosen, &params, &cfg)?;
    print!("{}", table.to_text());
    let labeled: Vec<CorpusScene> = chosen.iter().filter(|s| s.labels.is_some()).cloned().collect();
    if !labeled.is_empty() {
        let reports = order_preservation(&labeled, &params, &cfg)?;
        let (kept, total) = reports
            .iter()
            .fold((0, 0), |(k, t), (_, r)| (k + r.preserved(), t + r.pairs.len()));
        if total > 0 {
            println!(
                "brightness order preserved: {kept}/{total} region pairs ({:.4})",
                kept as f64 / total as f64
            );
        }
    }
    let mut outputs = Vec::new();
    if let Some(csv_path) = &a.csv {
        fs::write(csv_path, table.to_csv()?).with_context(|| format!("writing {}", csv_path.display()))?;
        outputs.push(csv_path.clone());
    }
    let mut inputs = corpus_inputs(corpus)?;
    inputs.push(params_path.clone());
    Ok(Effects {
        inputs,
        outputs,
        seeds: vec![a.split_seed],
        primary: a.csv.clone(),
        ..Effects::default()
    })
}

fn ablate(a: &AblateArgs) -> Result<Effects> {
    let cfg = a.train.config()?;
    let scenes = load_corpus(&a.corpus)?;
    let (tr, val, _) = split_indices(scenes.len(), a.train.split_seed);
    let val_set = pick(&scenes, &val);
    if val_set.is_empty() {
        return Err(usage("the corpus is too small for a validation split"));
    }
    let report = ablation(&pick(&scenes, &tr), &val_set, &cfg)?;
    print!("{}", report.to_text());
    let mut outputs = Vec::new();
    if let Some(csv_path) = &a.csv {
        fs::write(csv_path, report.to_csv()?).with_context(|| format!("writing {}", csv_path.display()))?;
        outputs.push(csv_path.clone());
    }
    Ok(Effects {
        inputs: corpus_inputs(&a.corpus)?,
        outputs,
        seeds: vec![a.train.seed, a.train.split_seed],
        primary: a.csv.clone(),
        ..Effects::default()
    })
}

fn gradcheck(a: &GradcheckArgs) -> Result<Effects> {
    let mut ok = true;
    for r in op_suite(a.seed)? {
        let pass = r.max_rel_error < OP_TOLERANCE;
        ok &= pass;
        println!("{:<24} {:.3e} {}", r.name, r.max_rel_error, if pass { "ok" } else { "FAIL" });
    }
    let e2e = end_to_end_grad_check(a.seed, a.samples, &NetConfig::default())?;
    let pass = e2e < END_TO_END_TOLERANCE;
    ok &= pass;
    println!("{:<24} {:.3e} {}", "network + total loss", e2e, if pass { "ok" } else { "FAIL" });
    Ok(Effects {
        seeds: vec![a.seed],
        failure: (!ok).then(|| "gradient check exceeded tolerance".to_string()),
        ..Effects::default()
    })
}
