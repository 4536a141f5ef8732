//! Command-line front end.
//!
//! Every command writes its primary outputs deterministically and records a
//! run manifest next to them. Wall-clock timestamps only appear in the
//! manifest's `[timing]` section.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::assignment::{brute_force_assignment, hungarian_max, PermutationMatrix};
use crate::data::{
    load_cloud, load_pair, make_split, parse_categories, write_dataset, CloudFormat, Dataset, NoiseConfig, PairConfig,
    PairSample, Setting, ShapeCategory, SplitPart, DEFAULT_WARP,
};
use crate::error::{config, Error, Result};
use crate::matchnet::{permutation_loss, straight_through_seed, MatchMode};
use crate::metrics::{
    precision_rows, relaxed_precision, strict_precision, transform_rows, write_metric_csv, MetricRow,
};
use crate::rigid::{procrustes, rotation_from_euler, EulerAngles, RigidTransform};
use crate::sinkhorn::{gumbel_sinkhorn_values, SinkhornConfig};
use crate::trainer::{
    epoch_csv, evaluate, hex, predict_with_scores, Checkpoint, EvalReport, TrainConfig, TrainStatus, Trainer,
};
use crate::{PointCloud, Tensor};

pub const RUN_MANIFEST: &str = "run-manifest.txt";

#[derive(Debug, Parser)]
#[command(name = "permatch", version, about = "Dense point cloud correspondence by permutation learning")]
pub struct Cli {
    /// Worker threads for batch evaluation (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset.
    Gen(GenArgs),
    /// Train a matching network.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Match a single pair of clouds.
    Match(MatchArgs),
    /// Compare post-processing against end-to-end training.
    Ablate(AblateArgs),
    /// Run the built-in oracle checks.
    Selftest(SelftestArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// upc, uc, nd or nonrigid.
    #[arg(long, default_value = "upc")]
    pub setting: Setting,
    /// Total number of pair files.
    #[arg(long, default_value_t = 200)]
    pub pairs: usize,
    /// Share of the pairs put in the test part.
    #[arg(long, default_value_t = 0.2)]
    pub test_fraction: f64,
    #[arg(long, default_value_t = 32)]
    pub n: usize,
    #[arg(long, env = "PERMATCH_SEED", default_value_t = 0)]
    pub seed: u64,
    /// Comma-separated category names, or a count of categories to take in order.
    #[arg(long)]
    pub categories: Option<String>,
    #[arg(long, default_value_t = 45.0)]
    pub rot_max: f64,
    #[arg(long, default_value_t = 0.5)]
    pub trans_max: f64,
    /// Noise standard deviation (nd only).
    #[arg(long)]
    pub sigma: Option<f64>,
    /// Noise clip (nd only).
    #[arg(long)]
    pub clip: Option<f64>,
    /// Deformation amplitude (nonrigid only).
    #[arg(long, default_value_t = DEFAULT_WARP)]
    pub warp: f64,
}

/// Training options shared by `train` and `ablate`.
#[derive(Debug, Args, Clone, Default)]
pub struct TrainOpts {
    /// Flat key=value config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long)]
    pub mode: Option<MatchMode>,
    #[arg(long)]
    pub loss: Option<String>,
    #[arg(long)]
    pub phase1_epochs: Option<usize>,
    #[arg(long)]
    pub phase2_epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long, env = "PERMATCH_SEED")]
    pub seed: Option<u64>,
    /// Use the 100 + 100 epoch schedule and the large network as the base.
    #[arg(long)]
    pub paper_preset: bool,
    /// Suppress per-epoch progress on stderr.
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from this checkpoint instead of starting fresh.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[command(flatten)]
    pub opts: TrainOpts,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// train or test.
    #[arg(long, default_value = "test")]
    pub part: String,
    /// Relaxation levels.
    #[arg(long, value_delimiter = ',', default_value = "0,1,2,4")]
    pub k: Vec<usize>,
}

#[derive(Debug, Args)]
pub struct MatchArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Pair file; alternative to --x/--y.
    #[arg(long, conflicts_with_all = ["x", "y"])]
    pub pair: Option<PathBuf>,
    #[arg(long, requires = "y")]
    pub x: Option<PathBuf>,
    #[arg(long, requires = "x")]
    pub y: Option<PathBuf>,
    /// Cloud format override (xyz or binary); inferred from the extension otherwise.
    #[arg(long)]
    pub format: Option<CloudFormat>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2,4")]
    pub k: Vec<usize>,
    /// Also train the one-stage variant.
    #[arg(long)]
    pub one_stage: bool,
    #[command(flatten)]
    pub opts: TrainOpts,
}

#[derive(Debug, Args)]
pub struct SelftestArgs {
    #[arg(long, env = "PERMATCH_SEED", default_value_t = 0)]
    pub seed: u64,
}

/// Provenance of one command invocation.
#[derive(Debug, Clone, Default)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub seed: u64,
    pub config: Vec<(String, String)>,
    /// Path relative to the manifest and SHA-256 of the content.
    pub artifacts: Vec<(String, String)>,
    pub started_unix: u64,
    pub finished_unix: u64,
}

fn now_unix() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

impl RunManifest {
    fn new(command: &str, seed: u64) -> Self {
        Self {
            command: command.into(),
            argv: std::env::args().collect(),
            seed,
            started_unix: now_unix(),
            ..Self::default()
        }
    }

    pub fn render(&self) -> String {
        let mut s = String::from("# permatch run manifest\n");
        s.push_str(&format!("command={}\n", self.command));
        s.push_str(&format!("version={}\n", env!("CARGO_PKG_VERSION")));
        s.push_str(&format!("seed={}\n", self.seed));
        s.push_str(&format!("argv={}\n", self.argv.join(" ")));
        s.push_str("[config]\n");
        for (k, v) in &self.config {
            s.push_str(&format!("{k}={v}\n"));
        }
        s.push_str("[artifacts]\n");
        for (p, h) in &self.artifacts {
            s.push_str(&format!("{p} sha256={h}\n"));
        }
        s.push_str("[timing]\n");
        s.push_str(&format!("started_unix={}\nfinished_unix={}\n", self.started_unix, self.finished_unix));
        s
    }

    fn config_from(&mut self, cfg: &TrainConfig) {
        self.config = cfg
            .to_kv()
            .lines()
            .filter_map(|l| l.split_once('='))
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect();
        self.config.push(("config_hash".into(), hex(&cfg.hash())));
    }

    fn finish(mut self, path: &Path) -> Result<()> {
        self.finished_unix = now_unix();
        write_file(path, self.render().as_bytes())
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes `bytes` to `dir/name` and records it in `manifest`.
fn emit(manifest: &mut RunManifest, dir: &Path, name: &str, bytes: &[u8]) -> Result<()> {
    write_file(&dir.join(name), bytes)?;
    manifest.artifacts.push((name.to_string(), hex(&Sha256::digest(bytes))));
    Ok(())
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Parses `arg` as category names or as a count of categories to take in order.
pub fn resolve_categories(arg: Option<&str>) -> Result<Vec<ShapeCategory>> {
    match arg {
        None => Ok(ShapeCategory::ALL.to_vec()),
        Some(s) => match s.trim().parse::<usize>() {
            Ok(0) => Err(config("--categories needs at least one category")),
            Ok(k) if k > ShapeCategory::ALL.len() => {
                Err(config(format!("only {} categories exist, asked for {k}", ShapeCategory::ALL.len())))
            }
            Ok(k) => Ok(ShapeCategory::ALL[..k].to_vec()),
            Err(_) => parse_categories(s),
        },
    }
}

pub fn cmd_gen(args: &GenArgs) -> Result<()> {
    if !(0.0..=1.0).contains(&args.test_fraction) {
        return Err(config(format!("--test-fraction must lie in [0, 1], got {}", args.test_fraction)));
    }
    let categories = resolve_categories(args.categories.as_deref())?;
    let default_noise = NoiseConfig::default();
    let noise = match (args.sigma, args.clip) {
        (None, None) => NoiseConfig::none(),
        (s, c) => NoiseConfig { sigma: s.unwrap_or(default_noise.sigma), clip: c.unwrap_or(default_noise.clip) },
    };
    if args.setting != Setting::Nd && !noise.is_none() {
        return Err(config("--sigma and --clip only apply to the nd setting"));
    }
    let pair = PairConfig { n: args.n, rot_max_deg: args.rot_max, trans_max: args.trans_max, noise };
    let mut split = make_split(args.setting, &categories, pair, args.seed)?;
    if !(args.warp >= 0.0 && args.warp.is_finite()) {
        return Err(config(format!("--warp must be non-negative, got {}", args.warp)));
    }
    split.warp = args.warp;
    let test = (args.pairs as f64 * args.test_fraction).round() as usize;
    let train = args.pairs - test;
    create_dir(&args.out)?;
    let mut manifest = RunManifest::new("gen", args.seed);
    let dataset = write_dataset(&args.out, &split, train, test)?;
    manifest.config = dataset.header.clone();
    manifest.config.push(("train_pairs".into(), train.to_string()));
    manifest.config.push(("test_pairs".into(), test.to_string()));
    for e in &dataset.entries {
        let bytes = fs::read(args.out.join(&e.path)).map_err(|err| Error::io(args.out.join(&e.path), err))?;
        manifest.artifacts.push((e.path.display().to_string(), hex(&Sha256::digest(&bytes))));
    }
    let text = dataset.render();
    manifest.artifacts.push((crate::data::MANIFEST_NAME.into(), hex(&Sha256::digest(text.as_bytes()))));
    manifest.finish(&args.out.join(RUN_MANIFEST))?;
    eprintln!("wrote {train} train and {test} test pairs to {}", args.out.display());
    Ok(())
}

/// Resolves the training config: defaults, then the dataset's `n`, then the
/// config file, then `--set` overrides, then dedicated flags.
pub fn resolve_config(opts: &TrainOpts, dataset_n: Option<usize>) -> Result<TrainConfig> {
    let mut cfg = if opts.paper_preset { TrainConfig::paper() } else { TrainConfig::default() };
    if let Some(n) = dataset_n {
        cfg.n = n;
    }
    if let Some(path) = &opts.config {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        cfg.apply_kv(&text).map_err(|e| config(format!("{}: {e}", path.display())))?;
    }
    for kv in &opts.set {
        let (k, v) = kv.split_once('=').ok_or_else(|| config(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        cfg.set(k, v)?;
    }
    if let Some(m) = opts.mode {
        cfg.mode = m;
    }
    if let Some(l) = &opts.loss {
        cfg.loss = l.parse()?;
    }
    if let Some(v) = opts.phase1_epochs {
        cfg.phase1_epochs = v;
    }
    if let Some(v) = opts.phase2_epochs {
        cfg.phase2_epochs = v;
    }
    if let Some(v) = opts.lr {
        cfg.adam.lr = v;
    }
    if let Some(v) = opts.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = opts.seed {
        cfg.seed = v;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn dataset_n(ds: &Dataset) -> Result<Option<usize>> {
    ds.manifest
        .get("n")
        .map(|v| v.parse().map_err(|_| config(format!("dataset manifest has a bad n `{v}`"))))
        .transpose()
}

fn parse_part(s: &str) -> Result<SplitPart> {
    match s {
        "train" => Ok(SplitPart::Train),
        "test" => Ok(SplitPart::Test),
        other => Err(config(format!("unknown split part `{other}`, expected train or test"))),
    }
}

fn progress(quiet: bool, label: &str, ckpt: &Checkpoint) {
    if quiet {
        return;
    }
    if let Some(l) = ckpt.history.last() {
        eprintln!(
            "{label}epoch {:>4} phase {} loss {:.5} strict {:.2}",
            l.epoch + 1,
            l.phase,
            l.loss,
            l.strict_precision
        );
    }
}

/// Trains to completion, reporting progress; writes the checkpoint and log
/// to `out` under `prefix` and returns the final status.
fn train_into(
    cfg: TrainConfig,
    resume: Option<Checkpoint>,
    pairs: &[PairSample],
    out: &Path,
    prefix: &str,
    quiet: bool,
    manifest: &mut RunManifest,
) -> Result<(Checkpoint, TrainStatus)> {
    let mut trainer = match resume {
        Some(ckpt) => Trainer::resume(ckpt, pairs)?,
        None => Trainer::new(cfg, pairs)?,
    };
    let label = if prefix.is_empty() { String::new() } else { format!("[{prefix}] ") };
    let mut status = TrainStatus::Completed;
    while !trainer.finished() {
        let epoch = trainer.checkpoint().epoch;
        match trainer.run_epoch() {
            Ok(_) => progress(quiet, &label, trainer.checkpoint()),
            Err(Error::Diverged(message)) => {
                status = TrainStatus::Diverged { epoch, message };
                break;
            }
            Err(e) => return Err(e),
        }
    }
    let ckpt = trainer.into_checkpoint();
    let name = |base: &str, ext: &str| {
        if prefix.is_empty() {
            format!("{base}.{ext}")
        } else {
            format!("{base}-{prefix}.{ext}")
        }
    };
    emit(manifest, out, &name("checkpoint", "pmck"), &ckpt.encode())?;
    emit(manifest, out, &name("epochs", "csv"), epoch_csv(&ckpt.history).as_bytes())?;
    emit(manifest, out, &name("config", "txt"), ckpt.config.to_kv().as_bytes())?;
    Ok((ckpt, status))
}

fn diverged_error(status: &TrainStatus) -> Result<()> {
    match status {
        TrainStatus::Completed => Ok(()),
        TrainStatus::Diverged { epoch, message } => Err(Error::Diverged(format!(
            "epoch {}: {message}; the checkpoint holds the last good epoch",
            epoch + 1
        ))),
    }
}

pub fn cmd_train(args: &TrainArgs) -> Result<()> {
    let ds = Dataset::open(&args.data)?;
    let pairs = ds.load_part(SplitPart::Train)?;
    let (cfg, resume) = match &args.resume {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            (ckpt.config.clone(), Some(ckpt))
        }
        None => (resolve_config(&args.opts, dataset_n(&ds)?)?, None),
    };
    create_dir(&args.out)?;
    let mut manifest = RunManifest::new("train", cfg.seed);
    manifest.config_from(&cfg);
    manifest.config.push(("data".into(), args.data.display().to_string()));
    let (ckpt, status) = train_into(cfg, resume, &pairs, &args.out, "", args.opts.quiet, &mut manifest)?;
    manifest.finish(&args.out.join(RUN_MANIFEST))?;
    diverged_error(&status)?;
    if let Some(l) = ckpt.history.last() {
        println!("trained {} epochs: loss {:.6} strict {:.2}", ckpt.epoch, l.loss, l.strict_precision);
    }
    Ok(())
}

fn fmt_value(v: f64) -> String {
    format!("{v:?}")
}

/// Wide table: one row per pair plus a `mean` row.
pub fn precision_table(report: &EvalReport) -> String {
    let mut s = String::from("pair,strict");
    for k in &report.ks {
        s.push_str(&format!(",relaxed_K{k}"));
    }
    s.push('\n');
    let mut row = |name: &str, p: &crate::metrics::PrecisionReport| {
        s.push_str(name);
        s.push(',');
        s.push_str(&fmt_value(p.strict));
        for (_, v) in &p.relaxed {
            s.push(',');
            s.push_str(&fmt_value(*v));
        }
        s.push('\n');
    };
    for (i, p) in report.pairs.iter().enumerate() {
        row(&i.to_string(), &p.precision);
    }
    row("mean", &report.mean);
    s
}

/// Per-pair transform errors plus an `all` row over every component.
pub fn transform_table(report: &EvalReport) -> Option<String> {
    let summary = report.transform?;
    let mut s = String::from(
        "pair,yaw_deg,pitch_deg,roll_deg,tx,ty,tz,rmse_rotation_deg,mae_rotation_deg,rmse_translation,mae_translation\n",
    );
    for (i, p) in report.pairs.iter().enumerate() {
        if let Some(e) = &p.transform {
            let cols: Vec<String> = e
                .angles
                .iter()
                .chain(&e.translation)
                .copied()
                .chain([e.rmse_rotation(), e.mae_rotation(), e.rmse_translation(), e.mae_translation()])
                .map(fmt_value)
                .collect();
            s.push_str(&format!("{i},{}\n", cols.join(",")));
        }
    }
    s.push_str(&format!(
        "all,,,,,,,{},{},{},{}\n",
        fmt_value(summary.rmse_rotation),
        fmt_value(summary.mae_rotation),
        fmt_value(summary.rmse_translation),
        fmt_value(summary.mae_translation)
    ));
    Some(s)
}

fn long_rows(report: &EvalReport) -> Vec<MetricRow> {
    let mut rows = Vec::new();
    for (i, p) in report.pairs.iter().enumerate() {
        let name = i.to_string();
        rows.extend(precision_rows(&name, &p.precision));
        if let Some(e) = &p.transform {
            rows.extend(transform_rows(&name, e));
        }
    }
    rows.extend(precision_rows("mean", &report.mean));
    if let Some(t) = report.transform {
        rows.push(MetricRow::new("all", "rmse_rotation_deg", t.rmse_rotation));
        rows.push(MetricRow::new("all", "mae_rotation_deg", t.mae_rotation));
        rows.push(MetricRow::new("all", "rmse_translation", t.rmse_translation));
        rows.push(MetricRow::new("all", "mae_translation", t.mae_translation));
        rows.push(MetricRow::new("all", "degenerate_pairs", report.degenerate as f64));
    }
    rows
}

fn metric_csv(rows: &[MetricRow]) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    write_metric_csv(&mut buf, rows)?;
    Ok(buf)
}

pub fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let ds = Dataset::open(&args.data)?;
    let part = parse_part(&args.part)?;
    let pairs = ds.load_part(part)?;
    if pairs.is_empty() {
        return Err(config(format!("dataset has no {} pairs", part.name())));
    }
    let report = evaluate(&ckpt, &pairs, &args.k)?;
    create_dir(&args.out)?;
    let mut manifest = RunManifest::new("eval", ckpt.config.seed);
    manifest.config_from(&ckpt.config);
    manifest.config.push(("checkpoint".into(), args.checkpoint.display().to_string()));
    manifest.config.push(("data".into(), args.data.display().to_string()));
    manifest.config.push(("part".into(), part.name().into()));
    emit(&mut manifest, &args.out, "precision.csv", precision_table(&report).as_bytes())?;
    if let Some(t) = transform_table(&report) {
        emit(&mut manifest, &args.out, "transform.csv", t.as_bytes())?;
    }
    emit(&mut manifest, &args.out, "metrics.csv", &metric_csv(&long_rows(&report))?)?;
    manifest.finish(&args.out.join(RUN_MANIFEST))?;
    println!("strict {:.2}", report.strict());
    for (k, v) in &report.mean.relaxed {
        println!("relaxed K={k} {v:.2}");
    }
    if let Some(t) = report.transform {
        println!("rmse rotation {:.4} deg, rmse translation {:.5}", t.rmse_rotation, t.rmse_translation);
    }
    Ok(())
}

/// One index per line, then a `# objective=` comment line.
pub fn render_matching(m: &PermutationMatrix, objective: f64) -> String {
    let mut s = String::with_capacity(m.n() * 4 + 32);
    for &j in m.assignment() {
        s.push_str(&j.to_string());
        s.push('\n');
    }
    s.push_str(&format!("# objective={objective:?}\n"));
    s
}

fn load_clouds(args: &MatchArgs) -> Result<(PointCloud, PointCloud, Option<PermutationMatrix>)> {
    if let Some(p) = &args.pair {
        let pair = load_pair(p)?;
        return Ok((pair.x, pair.y, Some(pair.gt)));
    }
    match (&args.x, &args.y) {
        (Some(x), Some(y)) => {
            let load = |p: &PathBuf| load_cloud(p, args.format.unwrap_or_else(|| CloudFormat::from_path(p)));
            Ok((load(x)?, load(y)?, None))
        }
        _ => Err(config("match needs --pair or both --x and --y")),
    }
}

pub fn cmd_match(args: &MatchArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let (x, y, gt) = load_clouds(args)?;
    let (m, p) = predict_with_scores(&ckpt, &x, &y)?;
    let objective = m.objective(&p);
    let mut manifest = RunManifest::new("match", ckpt.config.seed);
    manifest.config_from(&ckpt.config);
    manifest.config.push(("checkpoint".into(), args.checkpoint.display().to_string()));
    let text = render_matching(&m, objective);
    write_file(&args.out, text.as_bytes())?;
    let name = args.out.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    manifest.artifacts.push((name.clone(), hex(&Sha256::digest(text.as_bytes()))));
    manifest.finish(&args.out.with_file_name(format!("{name}.{RUN_MANIFEST}")))?;
    println!("objective {objective:.6}");
    if let Some(gt) = gt {
        println!("agreement with ground truth {:.2}%", strict_precision(&m, &gt)?);
    }
    Ok(())
}

/// `mode,k,precision` rows; `k = strict` is the unrelaxed score.
pub fn ablation_table(results: &[(MatchMode, EvalReport)]) -> String {
    let mut s = String::from("mode,k,precision\n");
    for (mode, r) in results {
        s.push_str(&format!("{mode},strict,{}\n", fmt_value(r.mean.strict)));
        for (k, v) in &r.mean.relaxed {
            s.push_str(&format!("{mode},{k},{}\n", fmt_value(*v)));
        }
    }
    s
}

pub fn cmd_ablate(args: &AblateArgs) -> Result<()> {
    let ds = Dataset::open(&args.data)?;
    let train_pairs = ds.load_part(SplitPart::Train)?;
    let test_pairs = ds.load_part(SplitPart::Test)?;
    if test_pairs.is_empty() {
        return Err(config("ablation needs test pairs"));
    }
    let base = resolve_config(&args.opts, dataset_n(&ds)?)?;
    create_dir(&args.out)?;
    let mut manifest = RunManifest::new("ablate", base.seed);
    manifest.config_from(&base);
    let mut modes = vec![MatchMode::PostProcess, MatchMode::TwoStage];
    if args.one_stage {
        modes.push(MatchMode::OneStage);
    }
    let mut results = Vec::new();
    for mode in modes {
        let cfg = TrainConfig { mode, ..base.clone() };
        let (ckpt, status) =
            train_into(cfg, None, &train_pairs, &args.out, mode.name(), args.opts.quiet, &mut manifest)?;
        diverged_error(&status)?;
        results.push((mode, evaluate(&ckpt, &test_pairs, &args.k)?));
    }
    emit(&mut manifest, &args.out, "ablation.csv", ablation_table(&results).as_bytes())?;
    manifest.finish(&args.out.join(RUN_MANIFEST))?;
    for (mode, r) in &results {
        println!("{mode}: strict {:.2}", r.strict());
    }
    Ok(())
}

fn random_matrix(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Tensor {
    Tensor::from_fn(n, n, |_, _| rng.random_range(-scale..scale))
}

fn random_permutation(rng: &mut ChaCha8Rng, n: usize) -> PermutationMatrix {
    use rand::seq::SliceRandom;
    let mut sigma: Vec<usize> = (0..n).collect();
    sigma.shuffle(rng);
    PermutationMatrix::from_assignment(sigma).expect("shuffled identity is a permutation")
}

type Check = (&'static str, fn(&mut ChaCha8Rng) -> Result<Option<String>>);

fn check_hungarian(rng: &mut ChaCha8Rng) -> Result<Option<String>> {
    for n in 2..=6 {
        for _ in 0..50 {
            let p = random_matrix(rng, n, 1.0);
            let (a, b) = (hungarian_max(&p)?.objective(&p), brute_force_assignment(&p)?.objective(&p));
            if a != b {
                return Ok(Some(format!("n={n}: hungarian {a} vs exhaustive {b}")));
            }
        }
    }
    Ok(None)
}

fn check_sinkhorn(rng: &mut ChaCha8Rng) -> Result<Option<String>> {
    for _ in 0..20 {
        let s = random_matrix(rng, 16, 2.5);
        let p = gumbel_sinkhorn_values(&s, None, SinkhornConfig { mu: 0.5, iters: 100 })?;
        let dev = p.max_row_deviation().max(p.max_col_deviation());
        if dev > 1e-6 {
            return Ok(Some(format!("marginal deviation {dev:e} after 100 iterations")));
        }
    }
    Ok(None)
}

fn check_seed(rng: &mut ChaCha8Rng) -> Result<Option<String>> {
    let n = 6;
    let gt = random_permutation(rng, n);
    let seed = straight_through_seed(&gt, n)?;
    let want = gt.to_dense().map(|v| -v / n as f64);
    Ok((seed != want).then(|| "straight-through seed differs from -M_gt / N".to_string()))
}

fn check_procrustes(rng: &mut ChaCha8Rng) -> Result<Option<String>> {
    for _ in 0..20 {
        let angles = EulerAngles {
            yaw: rng.random_range(-180.0..180.0),
            pitch: rng.random_range(-80.0..80.0),
            roll: rng.random_range(-180.0..180.0),
        };
        let t = RigidTransform::new(
            rotation_from_euler(angles),
            nalgebra::Vector3::new(rng.random(), rng.random(), rng.random()),
        );
        let x = PointCloud::new(
            (0..20)
                .map(|_| [0; 3].map(|_| rng.random_range(-1.0..1.0)))
                .collect(),
        );
        let y = t.apply_cloud(&x);
        let est = procrustes(&x, &y, &PermutationMatrix::identity(20))?;
        let err = (est.rotation - t.rotation).norm() + (est.translation - t.translation).norm();
        if err > 1e-9 {
            return Ok(Some(format!("recovered transform off by {err:e}")));
        }
    }
    Ok(None)
}

fn check_metrics(rng: &mut ChaCha8Rng) -> Result<Option<String>> {
    for _ in 0..50 {
        let n = rng.random_range(2..20);
        let pred = random_permutation(rng, n);
        let gt = random_permutation(rng, n);
        let target = PointCloud::new(
            (0..n).map(|_| [0; 3].map(|_| rng.random::<f64>())).collect(),
        );
        let strict = strict_precision(&pred, &gt)?;
        if relaxed_precision(&pred, &gt, &target, 0)? != strict {
            return Ok(Some("relaxed precision at K=0 differs from strict".into()));
        }
        if -100.0 * permutation_loss(&pred, &gt)? != strict {
            return Ok(Some("loss does not equal negative precision".into()));
        }
    }
    Ok(None)
}

const CHECKS: &[Check] = &[
    ("hungarian-optimality", check_hungarian),
    ("sinkhorn-marginals", check_sinkhorn),
    ("straight-through-seed", check_seed),
    ("procrustes-exactness", check_procrustes),
    ("metric-identities", check_metrics),
];

pub fn cmd_selftest(args: &SelftestArgs) -> Result<()> {
    let mut failed = Vec::new();
    for (i, (name, check)) in CHECKS.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(crate::data::derive_seed(args.seed, 100, i as u64));
        match check(&mut rng) {
            Ok(None) => println!("ok   {name}"),
            Ok(Some(msg)) => {
                println!("FAIL {name}: {msg}");
                failed.push(*name);
            }
            Err(e) => {
                println!("FAIL {name}: {e}");
                failed.push(*name);
            }
        }
    }
    std::io::stdout().flush().ok();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::Contract(format!("self-test failures: {}", failed.join(", "))))
    }
}

/// Parses `argv` and runs the selected command.
pub fn run(cli: Cli) -> Result<()> {
    if let Some(t) = cli.threads {
        if t == 0 {
            return Err(config("--threads must be positive"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .map_err(|e| config(format!("configuring the thread pool: {e}")))?;
    }
    match &cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Match(a) => cmd_match(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Selftest(a) => cmd_selftest(a),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn categories_by_count_or_name() {
        assert_eq!(resolve_categories(Some("2")).unwrap(), ShapeCategory::ALL[..2].to_vec());
        assert_eq!(resolve_categories(Some("torus,box")).unwrap(), vec![ShapeCategory::Torus, ShapeCategory::Box]);
        assert!(resolve_categories(Some("0")).is_err());
        assert!(resolve_categories(Some("99")).is_err());
        assert_eq!(resolve_categories(None).unwrap().len(), ShapeCategory::ALL.len());
    }

    #[test]
    fn config_precedence() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("cfg.txt");
        fs::write(&file, "lr=0.01\nbatch_size=4\nphase1_epochs=3\n").unwrap();
        let opts = TrainOpts {
            config: Some(file),
            set: vec!["batch_size=2".into()],
            phase1_epochs: Some(5),
            ..TrainOpts::default()
        };
        let cfg = resolve_config(&opts, Some(16)).unwrap();
        assert_eq!(cfg.n, 16);
        assert_eq!(cfg.adam.lr, 0.01);
        assert_eq!(cfg.batch_size, 2);
        assert_eq!(cfg.phase1_epochs, 5);
    }

    #[test]
    fn bad_override_is_config_error() {
        let opts = TrainOpts { set: vec!["lr".into()], ..TrainOpts::default() };
        assert!(matches!(resolve_config(&opts, None), Err(Error::Config(_))));
        let opts = TrainOpts { set: vec!["nope=1".into()], ..TrainOpts::default() };
        assert!(matches!(resolve_config(&opts, None), Err(Error::Config(_))));
    }

    #[test]
    fn matching_text_layout() {
        let m = PermutationMatrix::from_assignment(vec![2, 0, 1]).unwrap();
        assert_eq!(render_matching(&m, 1.5), "2\n0\n1\n# objective=1.5\n");
    }

    #[test]
    fn manifest_segregates_timing() {
        let mut m = RunManifest::new("gen", 4);
        m.artifacts.push(("a.txt".into(), "00".into()));
        let text = m.render();
        let timing = text.find("[timing]").unwrap();
        assert!(text[..timing].lines().all(|l| !l.contains("_unix")));
        assert!(text.contains("a.txt sha256=00"));
    }

    #[test]
    fn selftest_passes() {
        cmd_selftest(&SelftestArgs { seed: 0 }).unwrap();
    }
}
