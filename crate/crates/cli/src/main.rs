use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use image::RgbImage;
use ratenet::data::{
    default_sigma, denormalize_image, encode_png, load_dataset, load_image, make_synthetic_dataset, render_files,
    render_heatmap, Keypoints18, PairDataset, Split, SynthOptions,
};
use ratenet::losses::ExtractorSpec;
use ratenet::metrics::{evaluate_directory, MetricReport, SurrogateClassifier};
use ratenet::trainer::{
    latest_checkpoint, load_training_data, read_log, train, AblationMode, RunConfig, TrainOptions, TrainedModel,
    LOG_FILE,
};
use ratenet::autograd::Tensor;

const DATA_ROOT_ENV: &str = "RATE_NET_DATA_ROOT";

#[derive(Parser, Debug)]
#[command(name = "rate-net", version, about = "Pose-guided person image synthesis: data, training, inference, evaluation")]
struct Cli {
    /// JSON run configuration; unknown keys are rejected.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the seed of the command (dataset generation or training).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Print what would be done and write nothing.
    #[arg(long, global = true)]
    dry_run: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic paired dataset.
    SynthData(SynthArgs),
    /// Train (or resume) a model.
    Train(TrainArgs),
    /// Render side-by-side result grids from a checkpoint.
    Infer(InferArgs),
    /// Score predicted images against ground truth.
    Evaluate(EvaluateArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    persons: usize,
    #[arg(long)]
    poses: usize,
    /// Image height; also the width unless `--width` is given.
    #[arg(long)]
    size: usize,
    #[arg(long)]
    width: Option<usize>,
    /// Persons (taken from the end) assigned to the test split.
    #[arg(long, default_value_t = 0)]
    test_persons: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Run directory for checkpoints and the training log.
    #[arg(long)]
    out: PathBuf,
    /// Dataset root; overrides `data.root` and the environment default.
    #[arg(long)]
    data_root: Option<PathBuf>,
    #[arg(long)]
    ablation: Option<AblationMode>,
    /// Continue from the newest checkpoint in `--out`.
    #[arg(long)]
    resume: bool,
    /// Overrides `cycle.total_cycles`.
    #[arg(long)]
    cycles: Option<u64>,
    /// Checkpoint whose pose transfer weights initialise the run.
    #[arg(long)]
    init_checkpoint: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct InferArgs {
    /// Checkpoint manifest, or a run directory (newest checkpoint is used).
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Dataset root for batch mode; defaults to the training data root.
    #[arg(long)]
    data_root: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    split: Split,
    /// At most this many pairs in batch mode.
    #[arg(long)]
    limit: Option<usize>,
    /// Single-input mode: source image.
    #[arg(long, requires_all = ["source_keypoints", "target_keypoints"], conflicts_with_all = ["data_root", "limit"])]
    source: Option<PathBuf>,
    #[arg(long, requires = "source")]
    source_keypoints: Option<PathBuf>,
    #[arg(long, requires = "source")]
    target_keypoints: Option<PathBuf>,
    /// Optional ground truth for single-input mode.
    #[arg(long, requires = "source")]
    target: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    /// Where to write the JSON report; defaults to `<pred>/metric_report.json`.
    #[arg(long)]
    report: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// 3 for numeric failures during a run, 2 for everything else.
fn exit_code(e: &anyhow::Error) -> u8 {
    let numeric = e
        .chain()
        .any(|c| matches!(c.downcast_ref::<ratenet::Error>(), Some(ratenet::Error::NonFinite { .. })));
    if numeric { 3 } else { 2 }
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::SynthData(a) => synth_data(cli, a),
        Command::Train(a) => cmd_train(cli, a),
        Command::Infer(a) => infer(cli, a),
        Command::Evaluate(a) => evaluate(cli, a),
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    match &cli.config {
        Some(p) => Ok(RunConfig::load(p)?),
        None => Ok(RunConfig::default()),
    }
}

fn env_data_root() -> Option<PathBuf> {
    std::env::var_os(DATA_ROOT_ENV).filter(|v| !v.is_empty()).map(PathBuf::from)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    std::fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn synth_data(cli: &Cli, a: &SynthArgs) -> Result<()> {
    let mut opts = SynthOptions::new(a.persons, a.poses, a.size, a.width.unwrap_or(a.size), cli.seed.unwrap_or(0));
    opts.test_persons = a.test_persons;
    opts.validate()?;
    if cli.dry_run {
        let files = render_files(&opts)?;
        println!(
            "would write {} images and {} keypoint files ({}x{}, seed {}) under {}",
            a.persons * a.poses,
            a.persons * a.poses,
            opts.height,
            opts.width,
            opts.seed,
            a.out.display()
        );
        println!("digest {}", ratenet::data::digest_files(&files));
        return Ok(());
    }
    let s = make_synthetic_dataset(&opts, &a.out)?;
    let state = if s.unchanged { "unchanged" } else { "updated" };
    println!(
        "{}: {} images, {} keypoint files, {} files written ({state})",
        s.root.display(),
        s.images,
        s.keypoint_files,
        s.files_written
    );
    println!("digest {}", s.digest);
    Ok(())
}

fn cmd_train(cli: &Cli, a: &TrainArgs) -> Result<()> {
    let mut cfg = load_config(cli)?;
    if let Some(s) = cli.seed {
        cfg.cycle.seed = s;
    }
    if let Some(m) = a.ablation {
        cfg.cycle.ablation_mode = m;
    }
    if let Some(c) = a.cycles {
        cfg.cycle.total_cycles = c;
    }
    if let Some(p) = &a.init_checkpoint {
        cfg.cycle.init_checkpoint = Some(p.clone());
    }
    let root = a.data_root.clone().or_else(|| cfg.data.root.clone()).or_else(env_data_root);
    cfg.data.root = root;
    cfg.validate()?;
    let data = load_training_data(&cfg, None)?;
    let opts = TrainOptions { resume: a.resume, stop_at_cycle: None };

    if cli.dry_run {
        let start = if a.resume {
            match latest_checkpoint(&a.out)? {
                Some(p) => format!("resume from {}", p.display()),
                None => bail!(ratenet::Error::Checkpoint(format!("no checkpoint found in {}", a.out.display()))),
            }
        } else {
            "fresh start".to_string()
        };
        println!("mode {}, {start}", cfg.cycle.ablation_mode);
        println!("data {} pairs at {}x{}", data.len(), data.height, data.width);
        println!(
            "{} cycles x {} iterations = {} optimizer iterations, batch {}, seed {}",
            cfg.cycle.total_cycles,
            cfg.iterations_per_cycle(),
            cfg.cycle.total_cycles * cfg.iterations_per_cycle(),
            cfg.cycle.batch_size,
            cfg.cycle.seed
        );
        println!("checkpoints every {} cycles under {}", cfg.cycle.checkpoint_every, a.out.display());
        return Ok(());
    }

    let outcome = train(&cfg, &data, &a.out, &opts)?;
    let log = read_log(&a.out.join(LOG_FILE))?;
    if let (Some(first), Some(last)) = (log.first(), log.last()) {
        let recon = |r: &ratenet::trainer::CycleRecord| r.losses.get("l2_recon").copied().unwrap_or(f64::NAN);
        println!(
            "cycles {}..{}: recon loss {:.5} -> {:.5}",
            first.cycle,
            last.cycle,
            recon(first),
            recon(last)
        );
    }
    let c = outcome.counters;
    println!(
        "updates: pose {}, texture {}, shape disc {}, appearance disc {}, iterations {}",
        c.pose, c.texture, c.disc_shape, c.disc_app, c.iterations
    );
    println!("final checkpoint {}", outcome.final_checkpoint.display());
    Ok(())
}

fn resolve_checkpoint(p: &Path) -> Result<PathBuf> {
    if p.is_dir() {
        return latest_checkpoint(p)?
            .ok_or_else(|| ratenet::Error::Checkpoint(format!("no checkpoint found in {}", p.display())).into());
    }
    Ok(p.to_path_buf())
}

/// Horizontal strip of equally sized panes.
fn grid(panes: &[RgbImage]) -> RgbImage {
    let (w, h) = (panes[0].width(), panes[0].height());
    let mut out = RgbImage::new(w * panes.len() as u32, h);
    for (i, p) in panes.iter().enumerate() {
        image::imageops::replace(&mut out, p, (i as u32 * w) as i64, 0);
    }
    out
}

struct Rendered {
    grid: RgbImage,
    pred: RgbImage,
    coarse: RgbImage,
}

/// Panes: source | coarse | residual as 0.5 + R/2 | output | ground truth (if any).
fn render(model: &TrainedModel, src: &Tensor<f32>, sp: &Tensor<f32>, tp: &Tensor<f32>, gt: Option<&Tensor<f32>>) -> Result<Rendered> {
    let r = model.infer(src, sp, tp)?;
    // Mapping [0, 1] display values back to [-1, 1] turns 0.5 + R/2 into R itself.
    let mut panes = vec![
        denormalize_image(src)?,
        denormalize_image(&r.coarse)?,
        denormalize_image(&r.residual)?,
        denormalize_image(&r.output)?,
    ];
    if let Some(t) = gt {
        panes.push(denormalize_image(t)?);
    }
    Ok(Rendered { grid: grid(&panes), pred: panes[3].clone(), coarse: panes[1].clone() })
}

fn batch1(t: &Tensor<f32>) -> Result<Tensor<f32>> {
    let s = t.shape();
    Ok(t.reshape(&[1, s[0], s[1], s[2]])?)
}

fn infer(cli: &Cli, a: &InferArgs) -> Result<()> {
    let manifest = resolve_checkpoint(&a.checkpoint)?;
    let model = TrainedModel::load(&manifest)?;
    let (h, w) = model.resolution;
    let sigma = model.config.data.heatmap_sigma.unwrap_or_else(|| default_sigma(h));

    if let Some(source) = &a.source {
        let src = batch1(&load_image(source)?)?;
        let pose = |p: &Option<PathBuf>| -> Result<Tensor<f32>> {
            let kp = Keypoints18::load(p.as_deref().expect("required by clap"))?;
            batch1(&render_heatmap(&kp, h, w, sigma)?)
        };
        let (sp, tp) = (pose(&a.source_keypoints)?, pose(&a.target_keypoints)?);
        let gt = a.target.as_deref().map(load_image).transpose()?.map(|t| batch1(&t)).transpose()?;
        let r = render(&model, &src, &sp, &tp, gt.as_ref())?;
        if cli.dry_run {
            println!("would write grid.png ({} panes), pred.png and coarse.png under {}", r.grid.width() / w as u32, a.out.display());
            return Ok(());
        }
        for (name, img) in [("grid.png", &r.grid), ("pred.png", &r.pred), ("coarse.png", &r.coarse)] {
            write_file(&a.out.join(name), &encode_png(img))?;
        }
        println!("wrote {}", a.out.join("grid.png").display());
        return Ok(());
    }

    let root = a
        .data_root
        .clone()
        .or_else(|| model.config.data.root.clone())
        .or_else(env_data_root)
        .context(format!("no data root: pass --data-root or set {DATA_ROOT_ENV}"))?;
    let index = load_dataset(&root, a.split)?;
    if index.is_empty() {
        bail!(ratenet::Error::Dataset(format!("{}: no {} pairs", root.display(), a.split)));
    }
    let data = PairDataset::load(index, sigma)?;
    if (data.height, data.width) != model.resolution {
        bail!(ratenet::Error::Invalid(format!(
            "data is {}x{} but the checkpoint was trained at {h}x{w}",
            data.height, data.width
        )));
    }
    let n = a.limit.unwrap_or(data.len()).min(data.len());
    if cli.dry_run {
        println!("would render {n} {} pairs from {} into {}/{{grid,pred,coarse,gt}}", a.split, root.display(), a.out.display());
        return Ok(());
    }
    for i in 0..n {
        let pair = &data.index.pairs[i];
        let stem = |p: &Path| p.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
        let name = format!("{}__{}.png", stem(&pair.source_image), stem(&pair.target_image));
        let b = data.batch(&[i])?;
        let r = render(&model, &b.source_image, &b.source_pose, &b.target_pose, Some(&b.target_image))?;
        write_file(&a.out.join("grid").join(&name), &encode_png(&r.grid))?;
        write_file(&a.out.join("pred").join(&name), &encode_png(&r.pred))?;
        write_file(&a.out.join("coarse").join(&name), &encode_png(&r.coarse))?;
        write_file(&a.out.join("gt").join(&name), &encode_png(&denormalize_image(&b.target_image)?))?;
    }
    println!("rendered {n} pairs into {}", a.out.display());
    Ok(())
}

fn evaluate(cli: &Cli, a: &EvaluateArgs) -> Result<()> {
    let spec = match &cli.config {
        Some(_) => load_config(cli)?.losses.extractor,
        None => ExtractorSpec::default(),
    };
    let fx = spec.build()?;
    let clf = SurrogateClassifier::for_extractor(&fx);
    let report_path = a.report.clone().unwrap_or_else(|| a.pred.join("metric_report.json"));
    let report: MetricReport = evaluate_directory(&a.pred, &a.gt, &fx, &clf)?;
    println!("{}", MetricReport::table_header());
    println!("{}", report.table_row());
    if cli.dry_run {
        println!("would write {}", report_path.display());
        return Ok(());
    }
    let json = serde_json::to_string_pretty(&report)?;
    write_file(&report_path, json.as_bytes())?;
    println!("report {}", report_path.display());
    Ok(())
}
