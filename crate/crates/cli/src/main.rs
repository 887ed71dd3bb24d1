//! `cloudseg` — lidar cloud segmentation pipeline.
//!
//! Subcommands: `gen` (synthetic corpus), `assemble` (dataset manifest),
//! `train` (staged training with hyperparameter search), `eval` (comparison
//! table), `predict` (day mask), `render` (portable-pixmap panels), and
//! `gradcheck` (finite-difference suite).
//!
//! Exit codes: 0 success; 1 a check failed; 2 bad arguments, configuration,
//! or data; 3 missing stage prerequisite. Artifacts are written via a temp
//! file and renamed into place, so failures leave no partial outputs.

mod config;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use cloudseg::format;
use cloudseg::gradcheck::run_layer_suite;
use cloudseg::lidar::{generate_day, DayRecord, SyntheticSceneSpec};
use cloudseg::models::{predict_day, Segmenter};
use cloudseg::preprocess::{
    assemble_datasets, preprocess_backscatter, preprocess_ldr, ScaleConfig, SplitSpec,
};
use cloudseg::render::{render_grayscale, render_mask};
use cloudseg::train::{
    run_pipeline, write_pipeline_artifacts, Ablation, PipelineConfig, TrainConfig, Stage,
};

/// Error that maps to exit code 3: a required earlier stage has not run.
#[derive(Debug)]
struct PrerequisiteMissing(String);

impl fmt::Display for PrerequisiteMissing {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "missing stage prerequisite: {}", self.0)
    }
}

impl std::error::Error for PrerequisiteMissing {}

/// Error that maps to exit code 1: a verification command found failures.
#[derive(Debug)]
struct CheckFailed(String);

impl fmt::Display for CheckFailed {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "check failed: {}", self.0)
    }
}

impl std::error::Error for CheckFailed {}

#[derive(Parser)]
#[command(name = "cloudseg", version, about = "Lidar cloud segmentation pipeline")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Scale {
    Desk,
    Full,
}

impl Scale {
    fn config(self) -> ScaleConfig {
        match self {
            Scale::Desk => ScaleConfig::desk(),
            Scale::Full => ScaleConfig::full(),
        }
    }

    fn parse_key(v: &str) -> Result<Scale> {
        match v {
            "desk" => Ok(Scale::Desk),
            "full" => Ok(Scale::Full),
            other => bail!("bad scale '{other}' (expected desk or full)"),
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
#[clap(rename_all = "snake_case")]
enum AblationArg {
    Full,
    NoNoisy,
    NoPretrain,
    All,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic corpus of day records.
    Gen(GenArgs),
    /// Assemble the four datasets and write their manifest.
    Assemble(AssembleArgs),
    /// Run the staged training pipeline for an ablation.
    Train(TrainArgs),
    /// Print the comparison table from a training output directory.
    Eval(EvalArgs),
    /// Predict a full-day cloud mask from a checkpoint.
    Predict(PredictArgs),
    /// Render day channels and masks as binary portable pixmaps.
    Render(RenderArgs),
    /// Run the finite-difference gradient suite and print a table.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct GenArgs {
    /// Number of days to generate.
    #[arg(long, default_value_t = 80)]
    days: usize,
    #[arg(long, value_enum, default_value_t = Scale::Desk)]
    scale: Scale,
    /// Corpus seed; day k is generated with seed + k.
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Output directory for the .mplb files and manifest.
    #[arg(long)]
    out: PathBuf,
    /// Optional `key = value` config file (keys: days, scale, seed, out).
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct AssembleArgs {
    /// Directory of .mplb day records.
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, value_enum, default_value_t = Scale::Desk)]
    scale: Scale,
    /// Manifest output path.
    #[arg(long)]
    out: PathBuf,
    /// Optional `key = value` config file (keys: corpus, scale, out).
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// Directory of .mplb day records.
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, value_enum, default_value_t = Scale::Desk)]
    scale: Scale,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Output directory; artifacts go under <out>/<ablation>/.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = AblationArg::Full)]
    ablation: AblationArg,
    /// Optional `key = value` config file. Keys: corpus, scale, seed, out,
    /// ablation, stage{1,2,3}.{epochs,batch,lr,dropout,decay},
    /// baseline.{slope_threshold,extinction_threshold}. List-valued keys
    /// (lr, dropout, decay) take comma-separated grids.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Training output directory (the parent of the ablation directories).
    #[arg(long)]
    run: PathBuf,
    /// Which split's reports to tabulate.
    #[arg(long, default_value = "holdout")]
    split: String,
}

#[derive(Args)]
struct PredictArgs {
    /// Checkpoint written by train (with its .meta sidecar).
    #[arg(long)]
    checkpoint: PathBuf,
    /// Day record (.mplb), or use --backscatter/--ldr CSV grids.
    #[arg(long, conflicts_with_all = ["backscatter", "ldr"])]
    day: Option<PathBuf>,
    /// Backscatter CSV grid (rows = height bins).
    #[arg(long, requires = "ldr")]
    backscatter: Option<PathBuf>,
    /// LDR CSV grid (rows = height bins).
    #[arg(long, requires = "backscatter")]
    ldr: Option<PathBuf>,
    /// Output mask (.mplb).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RenderArgs {
    /// Day record (.mplb), or use --backscatter/--ldr CSV grids.
    #[arg(long, conflicts_with_all = ["backscatter", "ldr"])]
    day: Option<PathBuf>,
    #[arg(long)]
    backscatter: Option<PathBuf>,
    #[arg(long)]
    ldr: Option<PathBuf>,
    /// Extra mask files (.mplb) rendered as additional panels.
    #[arg(long = "mask")]
    masks: Vec<PathBuf>,
    /// Output directory for the .ppm panels.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Seeded random instances per layer.
    #[arg(long, default_value_t = 20)]
    seeds: u64,
}

fn main() {
    if let Ok(threads) = std::env::var("CLOUDSEG_THREADS") {
        if let Ok(n) = threads.parse::<usize>() {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
    }
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e:#}");
        let code = if e.downcast_ref::<PrerequisiteMissing>().is_some() {
            3
        } else if e.downcast_ref::<CheckFailed>().is_some() {
            1
        } else {
            2
        };
        std::process::exit(code);
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Gen(args) => cmd_gen(args),
        Cmd::Assemble(args) => cmd_assemble(args),
        Cmd::Train(args) => cmd_train(args),
        Cmd::Eval(args) => cmd_eval(args),
        Cmd::Predict(args) => cmd_predict(args),
        Cmd::Render(args) => cmd_render(args),
        Cmd::Gradcheck(args) => cmd_gradcheck(args),
    }
}

// ── gen ────────────────────────────────────────────────────────────────────

fn cmd_gen(mut args: GenArgs) -> Result<()> {
    if let Some(path) = &args.config {
        let conf = config::parse(path, &["days", "scale", "seed", "out"])?;
        if let Some(v) = conf.get("days") {
            args.days = v.parse().context("config key 'days'")?;
        }
        if let Some(v) = conf.get("scale") {
            args.scale = Scale::parse_key(v)?;
        }
        if let Some(v) = conf.get("seed") {
            args.seed = v.parse().context("config key 'seed'")?;
        }
        if let Some(v) = conf.get("out") {
            args.out = PathBuf::from(v);
        }
    }
    let scale = args.scale.config();
    fs::create_dir_all(&args.out)
        .with_context(|| format!("creating output directory {}", args.out.display()))?;
    let template = SyntheticSceneSpec::for_scale(&scale, 0);
    let mut lines = Vec::with_capacity(args.days);
    let mut cloud_px = 0usize;
    let mut total_px = 0usize;
    for k in 0..args.days {
        let mut spec = template.clone();
        spec.seed = args.seed.wrapping_add(k as u64);
        let day_id = format!("day{k:04}");
        let day = generate_day(&spec, day_id.clone())?;
        let fraction = day
            .clean_mask
            .as_ref()
            .map(|m| m.cloud_fraction())
            .unwrap_or(0.0);
        cloud_px += day
            .clean_mask
            .as_ref()
            .map(|m| m.data.iter().filter(|&&v| v == 1).count())
            .unwrap_or(0);
        total_px += day.backscatter.data.len();
        format::write_record(&day, &args.out.join(format!("{day_id}.mplb")))?;
        lines.push(format!("{day_id},{},{:.6}", spec.seed, fraction));
    }
    let corpus_fraction = if total_px == 0 {
        0.0
    } else {
        cloud_px as f64 / total_px as f64
    };
    format::write_atomic(&args.out.join("manifest.txt"), |w| {
        use std::io::Write;
        writeln!(w, "# days = {}", args.days)?;
        writeln!(w, "# corpus_cloud_fraction = {corpus_fraction:.6}")?;
        for line in &lines {
            writeln!(w, "{line}")?;
        }
        Ok(())
    })?;
    println!(
        "wrote {} day records to {} (cloud fraction {corpus_fraction:.4})",
        args.days,
        args.out.display()
    );
    Ok(())
}

// ── assemble ───────────────────────────────────────────────────────────────

fn load_corpus(dir: &Path) -> Result<Vec<DayRecord>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading corpus directory {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().map(|e| e == "mplb").unwrap_or(false))
        .collect();
    paths.sort();
    if paths.is_empty() {
        bail!("no .mplb files in {}", dir.display());
    }
    paths
        .iter()
        .map(|p| format::read_record(p).map_err(Into::into))
        .collect()
}

fn split_for(scale: Scale) -> SplitSpec {
    match scale {
        Scale::Desk => SplitSpec::desk_default(),
        Scale::Full => SplitSpec::full_default(),
    }
}

fn cmd_assemble(mut args: AssembleArgs) -> Result<()> {
    if let Some(path) = &args.config {
        let conf = config::parse(path, &["corpus", "scale", "out"])?;
        if let Some(v) = conf.get("corpus") {
            args.corpus = PathBuf::from(v);
        }
        if let Some(v) = conf.get("scale") {
            args.scale = Scale::parse_key(v)?;
        }
        if let Some(v) = conf.get("out") {
            args.out = PathBuf::from(v);
        }
    }
    let corpus = load_corpus(&args.corpus)?;
    let bundle = assemble_datasets(&corpus, &args.scale.config(), &split_for(args.scale))?;
    format::write_atomic(&args.out, |w| bundle.write_manifest(w))?;
    println!(
        "assembled {} classification, {} noisy, {} hand-labeled, {} holdout samples -> {}",
        bundle.classification.len(),
        bundle.noisy.len(),
        bundle.hand_labeled.len(),
        bundle.holdout.len(),
        args.out.display()
    );
    Ok(())
}

// ── train ──────────────────────────────────────────────────────────────────

fn parse_list(v: &str, key: &str) -> Result<Vec<f64>> {
    v.split(',')
        .map(|t| t.trim().parse::<f64>().with_context(|| format!("config key '{key}'")))
        .collect()
}

fn apply_train_config(
    pc: &mut PipelineConfig,
    conf: &indexmap::IndexMap<String, String>,
) -> Result<()> {
    for (idx, stage) in ["stage1", "stage2", "stage3"].iter().enumerate() {
        let grid = match idx {
            0 => &mut pc.grids.stage1,
            1 => &mut pc.grids.stage2,
            _ => &mut pc.grids.stage3,
        };
        if let Some(v) = conf.get(&format!("{stage}.lr")) {
            grid.lr = parse_list(v, &format!("{stage}.lr"))?;
        }
        if let Some(v) = conf.get(&format!("{stage}.dropout")) {
            grid.dropout = parse_list(v, &format!("{stage}.dropout"))?;
        }
        if let Some(v) = conf.get(&format!("{stage}.decay")) {
            grid.decay = parse_list(v, &format!("{stage}.decay"))?;
        }
        if let Some(v) = conf.get(&format!("{stage}.epochs")) {
            let e: usize = v.parse().with_context(|| format!("config key '{stage}.epochs'"))?;
            match idx {
                0 => pc.epochs.0 = e,
                1 => pc.epochs.1 = e,
                _ => pc.epochs.2 = e,
            }
        }
        if let Some(v) = conf.get(&format!("{stage}.batch")) {
            let b: usize = v.parse().with_context(|| format!("config key '{stage}.batch'"))?;
            match idx {
                0 => pc.batch.0 = b,
                1 => pc.batch.1 = b,
                _ => pc.batch.2 = b,
            }
        }
    }
    if let Some(v) = conf.get("baseline.slope_threshold") {
        pc.baseline_slope_threshold = v.parse().context("config key 'baseline.slope_threshold'")?;
    }
    if let Some(v) = conf.get("baseline.extinction_threshold") {
        pc.baseline_extinction_threshold = v
            .parse()
            .context("config key 'baseline.extinction_threshold'")?;
    }
    Ok(())
}

const TRAIN_CONFIG_KEYS: [&str; 22] = [
    "corpus",
    "scale",
    "seed",
    "out",
    "ablation",
    "stage1.epochs",
    "stage1.batch",
    "stage1.lr",
    "stage1.dropout",
    "stage1.decay",
    "stage2.epochs",
    "stage2.batch",
    "stage2.lr",
    "stage2.dropout",
    "stage2.decay",
    "stage3.epochs",
    "stage3.batch",
    "stage3.lr",
    "stage3.dropout",
    "stage3.decay",
    "baseline.slope_threshold",
    "baseline.extinction_threshold",
];

fn cmd_train(mut args: TrainArgs) -> Result<()> {
    let conf = match &args.config {
        Some(path) => config::parse(path, &TRAIN_CONFIG_KEYS)?,
        None => indexmap::IndexMap::new(),
    };
    if let Some(v) = conf.get("corpus") {
        args.corpus = PathBuf::from(v);
    }
    if let Some(v) = conf.get("scale") {
        args.scale = Scale::parse_key(v)?;
    }
    if let Some(v) = conf.get("seed") {
        args.seed = v.parse().context("config key 'seed'")?;
    }
    if let Some(v) = conf.get("out") {
        args.out = PathBuf::from(v);
    }
    if let Some(v) = conf.get("ablation") {
        args.ablation = match v.as_str() {
            "full" => AblationArg::Full,
            "no_noisy" => AblationArg::NoNoisy,
            "no_pretrain" => AblationArg::NoPretrain,
            "all" => AblationArg::All,
            other => bail!("bad ablation '{other}'"),
        };
    }

    let scale = args.scale.config();
    let mut pc = PipelineConfig::desk_default(args.seed);
    pc.scale = scale.clone();
    if args.scale == Scale::Full {
        pc.epochs = (
            TrainConfig::paper_defaults(Stage::ClsPretrain, 0).epochs,
            TrainConfig::paper_defaults(Stage::NoisyPretrain, 0).epochs,
            TrainConfig::paper_defaults(Stage::Finetune, 0).epochs,
        );
    }
    apply_train_config(&mut pc, &conf)?;

    // The no_noisy ablation starts from the transferred snapshot of a full
    // run; fail fast (exit 3) before loading anything if it is absent.
    let transfer_for_no_noisy: Option<Segmenter> = if args.ablation == AblationArg::NoNoisy {
        let transferred_path = args.out.join("full").join("transferred.mplp");
        if !transferred_path.exists() {
            return Err(anyhow!(PrerequisiteMissing(format!(
                "{} (run --ablation full first)",
                transferred_path.display()
            ))));
        }
        let (params, cfg, _) = format::read_checkpoint(&transferred_path)?;
        if cfg != scale {
            bail!("transferred checkpoint scale does not match --scale");
        }
        Some(Segmenter { cfg, params })
    } else {
        None
    };

    let corpus = load_corpus(&args.corpus)?;
    let bundle = assemble_datasets(&corpus, &scale, &split_for(args.scale))?;
    fs::create_dir_all(&args.out)?;

    let run_one = |ablation: Ablation, transfer: Option<&Segmenter>| -> Result<cloudseg::train::PipelineOutput> {
        let out = run_pipeline(&corpus, &bundle, &pc, ablation, transfer)?;
        let dir = args.out.join(ablation.as_str());
        write_pipeline_artifacts(&dir, &out, &pc)?;
        println!(
            "{}: holdout F1 {:.4} (test F1 {:.4}) -> {}",
            ablation.as_str(),
            out.reports.model_holdout.f1,
            out.reports.model_test.f1,
            dir.display()
        );
        Ok(out)
    };

    let manifest_status: Result<()> = match args.ablation {
        AblationArg::Full => run_one(Ablation::Full, None).map(|_| ()),
        AblationArg::NoPretrain => run_one(Ablation::NoPretrain, None).map(|_| ()),
        AblationArg::NoNoisy => {
            run_one(Ablation::NoNoisy, transfer_for_no_noisy.as_ref()).map(|_| ())
        }
        AblationArg::All => {
            let full = run_one(Ablation::Full, None)?;
            run_one(Ablation::NoNoisy, full.transferred.as_ref())?;
            run_one(Ablation::NoPretrain, None).map(|_| ())
        }
    };
    manifest_status?;

    format::write_atomic(&args.out.join("run_manifest.txt"), |w| {
        use std::io::Write;
        writeln!(
            w,
            "config = {}",
            args.config
                .as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_else(|| "-".to_string())
        )?;
        writeln!(
            w,
            "scale = {}",
            if args.scale == Scale::Desk { "desk" } else { "full" }
        )?;
        writeln!(w, "seed = {}", args.seed)?;
        writeln!(w, "out = {}", args.out.display())?;
        writeln!(w, "status = ok")?;
        Ok(())
    })?;
    Ok(())
}

// ── eval ───────────────────────────────────────────────────────────────────

fn cmd_eval(args: EvalArgs) -> Result<()> {
    if args.split != "test" && args.split != "holdout" {
        bail!("bad split '{}' (expected test or holdout)", args.split);
    }
    let parse_report = |path: &Path| -> Result<(f64, f64, f64)> {
        let text = fs::read_to_string(path)?;
        let line = text.lines().next().ok_or_else(|| anyhow!("empty report"))?;
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 8 {
            bail!("malformed report {}", path.display());
        }
        Ok((
            fields[6].parse()?, // f1
            fields[4].parse()?, // precision
            fields[5].parse()?, // recall
        ))
    };
    let mut rows = Vec::new();
    for ab in ["full", "no_noisy", "no_pretrain"] {
        let path = args.run.join(ab).join(format!("baseline_report_{}.txt", args.split));
        if path.exists() {
            let (f1, p, r) = parse_report(&path)?;
            rows.push(("baseline".to_string(), f1, p, r));
            break;
        }
    }
    for ab in ["no_pretrain", "no_noisy", "full"] {
        let path = args.run.join(ab).join(format!("report_{}.txt", args.split));
        if path.exists() {
            let (f1, p, r) = parse_report(&path)?;
            rows.push((ab.to_string(), f1, p, r));
        }
    }
    if rows.is_empty() {
        bail!("no reports found under {}", args.run.display());
    }
    println!("method,f1,precision,recall");
    for (name, f1, p, r) in rows {
        println!("{name},{f1:.6},{p:.6},{r:.6}");
    }
    Ok(())
}

// ── predict ────────────────────────────────────────────────────────────────

fn day_from_args(
    day: &Option<PathBuf>,
    backscatter: &Option<PathBuf>,
    ldr: &Option<PathBuf>,
) -> Result<DayRecord> {
    if let Some(day) = day {
        return format::read_record(day).map_err(Into::into);
    }
    let (Some(bs), Some(ldr)) = (backscatter, ldr) else {
        bail!("provide --day or both --backscatter and --ldr");
    };
    let bs_grid = format::read_csv_grid(bs)?;
    let ldr_grid = format::read_csv_grid(ldr)?;
    if (bs_grid.height, bs_grid.width) != (ldr_grid.height, ldr_grid.width) {
        bail!(
            "backscatter {}x{} and ldr {}x{} differ",
            bs_grid.height,
            bs_grid.width,
            ldr_grid.height,
            ldr_grid.width
        );
    }
    Ok(DayRecord {
        day_id: bs
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "csv".into()),
        backscatter: bs_grid,
        ldr: ldr_grid,
        clean_mask: None,
        noisy_mask: None,
    })
}

fn cmd_predict(args: PredictArgs) -> Result<()> {
    let (params, cfg, _) = format::read_checkpoint(&args.checkpoint)?;
    let segmenter = Segmenter { cfg, params };
    let day = day_from_args(&args.day, &args.backscatter, &args.ldr)?;
    let mask = predict_day(&segmenter, &day)?;
    format::write_mask(&mask, &args.out)?;
    println!(
        "predicted mask for {} ({:.4} cloud fraction) -> {}",
        day.day_id,
        mask.cloud_fraction(),
        args.out.display()
    );
    Ok(())
}

// ── render ─────────────────────────────────────────────────────────────────

fn cmd_render(args: RenderArgs) -> Result<()> {
    fs::create_dir_all(&args.out)?;
    let mut dims: Option<(usize, usize)> = None;
    let mut check_dims = |h: usize, w: usize| -> Result<()> {
        match dims {
            None => {
                dims = Some((h, w));
                Ok(())
            }
            Some(d) if d == (h, w) => Ok(()),
            Some((dh, dw)) => bail!("panel shape {h}x{w} does not match {dh}x{dw}"),
        }
    };

    if args.day.is_some() || args.backscatter.is_some() {
        let day = day_from_args(&args.day, &args.backscatter, &args.ldr)?;
        check_dims(day.backscatter.height, day.backscatter.width)?;
        let bs = preprocess_backscatter(&day.backscatter)?;
        render_grayscale(&bs, &args.out.join("backscatter.ppm"))?;
        let ldr = preprocess_ldr(&day.ldr);
        render_grayscale(&ldr, &args.out.join("ldr.ppm"))?;
        if let Some(m) = &day.clean_mask {
            render_mask(m, &args.out.join("clean_mask.ppm"))?;
        }
        if let Some(m) = &day.noisy_mask {
            render_mask(m, &args.out.join("noisy_mask.ppm"))?;
        }
    }
    for (i, path) in args.masks.iter().enumerate() {
        let mask = format::read_mask(path)?;
        check_dims(mask.height, mask.width)?;
        let stem = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| format!("mask{i}"));
        render_mask(&mask, &args.out.join(format!("{stem}.ppm")))?;
    }
    if dims.is_none() {
        bail!("nothing to render: provide --day, --backscatter/--ldr, or --mask");
    }
    println!("rendered panels to {}", args.out.display());
    Ok(())
}

// ── gradcheck ──────────────────────────────────────────────────────────────

fn cmd_gradcheck(args: GradcheckArgs) -> Result<()> {
    let entries = run_layer_suite(args.seeds)?;
    println!("{:<28} {:>12} {:>10} {:>8}", "layer", "max_rel_err", "tolerance", "status");
    let mut failures = 0;
    for e in &entries {
        println!(
            "{:<28} {:>12.3e} {:>10.0e} {:>8}",
            e.name,
            e.max_error,
            e.tolerance,
            if e.passed { "PASS" } else { "FAIL" }
        );
        if !e.passed {
            failures += 1;
        }
    }
    if failures > 0 {
        return Err(anyhow!(CheckFailed(format!("{failures} layer(s) failed"))));
    }
    Ok(())
}
