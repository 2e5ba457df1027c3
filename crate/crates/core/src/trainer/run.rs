use std::fs::{self, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use ratenet_autograd::{ParamSet, Tensor};

use super::config::RunConfig;
use super::cycle::{run_cycle, CycleRecord, Models, TrainState, UpdateCounters};
use crate::checkpoint::{ensure_same_config, load_checkpoint, save_checkpoint, sha256_hex, Manifest};
use crate::data::{default_sigma, load_dataset, BatchSampler, PairDataset};
use crate::error::{Error, Result};
use crate::generator::{Inference, POSE_NS};
use crate::optimizer::RAdam;

pub const LOG_FILE: &str = "train_log.jsonl";
pub const CHECKPOINT_DIR: &str = "checkpoints";

const OPT_GEN: &str = "opt/gen/";
const OPT_SHAPE: &str = "opt/disc_shape/";
const OPT_APP: &str = "opt/disc_app/";
const STATE_NS: &str = "state/";

/// Per-invocation options that are not part of the run configuration.
#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Continue from the newest checkpoint in the output directory.
    pub resume: bool,
    /// Stop after this many completed cycles (still within the schedule).
    pub stop_at_cycle: Option<u64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub final_checkpoint: PathBuf,
    /// Records produced by this invocation.
    pub records: Vec<CycleRecord>,
    pub counters: UpdateCounters,
}

/// Digest of everything that determines future random draws: batch order
/// is a pure function of the seed, dataset size and cycle index.
pub fn rng_state_digest(seed: u64, n_pairs: usize, batch_size: usize, cycle: u64) -> String {
    sha256_hex(format!("sampler:{seed}:{n_pairs}:{batch_size}:{cycle}").as_bytes())
}

fn checkpoint_stem(cycle: u64) -> String {
    format!("cycle_{cycle:08}")
}

/// Newest checkpoint manifest in `dir`, if any.
pub fn latest_checkpoint(dir: &Path) -> Result<Option<PathBuf>> {
    let ckpt = dir.join(CHECKPOINT_DIR);
    if !ckpt.is_dir() {
        return Ok(None);
    }
    let mut best: Option<PathBuf> = None;
    for entry in fs::read_dir(&ckpt).map_err(|e| Error::io(&ckpt, e))? {
        let p = entry.map_err(|e| Error::io(&ckpt, e))?.path();
        let name = p.file_name().and_then(|n| n.to_str()).unwrap_or("");
        if name.starts_with("cycle_") && name.ends_with(".json") && best.as_ref().is_none_or(|b| p > *b) {
            best = Some(p);
        }
    }
    Ok(best)
}

fn scalar(v: u64) -> Tensor<f32> {
    Tensor::scalar(v as f32)
}

fn bundle(state: &TrainState, resolution: (usize, usize)) -> Result<ParamSet<f32>> {
    let mut ps = state.params.clone();
    ps.merge(state.opt_gen.export(OPT_GEN))?;
    ps.merge(state.opt_shape.export(OPT_SHAPE))?;
    ps.merge(state.opt_app.export(OPT_APP))?;
    let c = state.counters;
    for (k, v) in [
        ("pose", c.pose),
        ("texture", c.texture),
        ("disc_shape", c.disc_shape),
        ("disc_app", c.disc_app),
        ("height", resolution.0 as u64),
        ("width", resolution.1 as u64),
    ] {
        ps.insert(format!("{STATE_NS}{k}"), scalar(v));
    }
    Ok(ps)
}

fn read_u64(ps: &ParamSet<f32>, key: &str) -> Result<u64> {
    let t = ps.get(&format!("{STATE_NS}{key}")).ok_or_else(|| Error::Checkpoint(format!("missing {STATE_NS}{key}")))?;
    Ok(t.item() as u64)
}

/// Network parameters only (optimizer and bookkeeping entries removed).
fn network_params(all: &ParamSet<f32>) -> ParamSet<f32> {
    let mut ps = ParamSet::new();
    for (n, t) in all.iter().filter(|(n, _)| !n.starts_with("opt/") && !n.starts_with(STATE_NS)) {
        ps.insert(n, t.clone());
    }
    ps
}

fn unbundle(cfg: &RunConfig, manifest: &Manifest, all: &ParamSet<f32>) -> Result<(TrainState, (usize, usize))> {
    let o = &cfg.optimizer.radam;
    let counters = UpdateCounters {
        pose: read_u64(all, "pose")?,
        texture: read_u64(all, "texture")?,
        disc_shape: read_u64(all, "disc_shape")?,
        disc_app: read_u64(all, "disc_app")?,
        iterations: manifest.iteration,
    };
    let state = TrainState {
        params: network_params(all),
        opt_gen: RAdam::import(o.clone(), all, OPT_GEN)?,
        opt_shape: RAdam::import(o.clone(), all, OPT_SHAPE)?,
        opt_app: RAdam::import(o.clone(), all, OPT_APP)?,
        cycle: manifest.cycle,
        counters,
    };
    Ok((state, (read_u64(all, "height")? as usize, read_u64(all, "width")? as usize)))
}

/// Loads the dataset named by the configuration (or `root_override`).
pub fn load_training_data(cfg: &RunConfig, root_override: Option<&Path>) -> Result<PairDataset> {
    let root = root_override
        .map(Path::to_path_buf)
        .or_else(|| cfg.data.root.clone())
        .ok_or_else(|| Error::Config("no data root given (data.root)".into()))?;
    let index = load_dataset(&root, cfg.data.split)?;
    let first = index
        .pairs
        .first()
        .ok_or_else(|| Error::Dataset(format!("{}: no {} pairs", root.display(), cfg.data.split)))?;
    let sigma = match cfg.data.heatmap_sigma {
        Some(s) => s,
        None => {
            let (_, h) = image::image_dimensions(&first.source_image)
                .map_err(|e| Error::Image { path: first.source_image.clone(), source: e })?;
            default_sigma(h as usize)
        }
    };
    PairDataset::load(index, sigma)
}

/// Runs (or resumes) training into `out_dir` and returns the final checkpoint.
///
/// Identical configurations and data give identical loss traces, whether
/// or not the run was interrupted and resumed.
pub fn train(cfg: &RunConfig, data: &PairDataset, out_dir: &Path, opts: &TrainOptions) -> Result<TrainOutcome> {
    cfg.validate()?;
    let models = Models::new(cfg)?;
    let resolution = (data.height, data.width);
    let sampler = BatchSampler::new(data.len(), cfg.cycle.batch_size, cfg.cycle.seed)?;
    let config_json = cfg.to_json();
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let log_path = out_dir.join(LOG_FILE);

    let mut state = if opts.resume {
        let latest = latest_checkpoint(out_dir)?
            .ok_or_else(|| Error::Checkpoint(format!("no checkpoint found in {}", out_dir.display())))?;
        let (manifest, all) = load_checkpoint(&latest)?;
        ensure_same_config(&manifest.config, &config_json)?;
        let expect = rng_state_digest(cfg.cycle.seed, data.len(), cfg.cycle.batch_size, manifest.cycle);
        if manifest.rng_state_digest != expect {
            return Err(Error::Checkpoint("dataset or sampler differs from the checkpointed run".into()));
        }
        let (state, res) = unbundle(cfg, &manifest, &all)?;
        if res != resolution {
            return Err(Error::Checkpoint(format!("checkpoint resolution {res:?} differs from data {resolution:?}")));
        }
        truncate_log(&log_path, state.cycle)?;
        state
    } else {
        if latest_checkpoint(out_dir)?.is_some() {
            return Err(Error::Checkpoint(format!(
                "{} already holds checkpoints; resume or choose another directory",
                out_dir.display()
            )));
        }
        let mut params = models.init_params(cfg.cycle.seed)?;
        if let Some(init) = &cfg.cycle.init_checkpoint {
            let (_, src) = load_checkpoint(init)?;
            for (name, t) in src.with_prefix(POSE_NS) {
                let slot = params
                    .get_mut(name)
                    .ok_or_else(|| Error::Checkpoint(format!("{}: unexpected parameter {name}", init.display())))?;
                if slot.shape() != t.shape() {
                    return Err(Error::Checkpoint(format!("{}: {name} has a different shape", init.display())));
                }
                *slot = t.clone();
            }
        }
        fs::write(&log_path, b"").map_err(|e| Error::io(&log_path, e))?;
        TrainState::new(cfg, params)?
    };

    let end = opts.stop_at_cycle.unwrap_or(cfg.cycle.total_cycles).min(cfg.cycle.total_cycles);
    let mut log = OpenOptions::new().append(true).open(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let ckpt_dir = out_dir.join(CHECKPOINT_DIR);
    let mut records = Vec::new();
    let mut last_ckpt = latest_checkpoint(out_dir)?;

    while state.cycle < end {
        let lr = cfg.optimizer.schedule.lr_at(state.cycle)?;
        let batch = data.batch(&sampler.batch_indices(state.cycle))?;
        let record = run_cycle(cfg, &models, &mut state, &batch, lr)?;
        let line = serde_json::to_string(&record).expect("record serialises");
        writeln!(log, "{line}").map_err(|e| Error::io(&log_path, e))?;
        records.push(record);

        let done = state.cycle;
        let per = cfg.iterations_per_cycle();
        if state.counters.iterations != per * done {
            return Err(Error::Invalid(format!(
                "bookkeeping: {} optimizer iterations after {done} cycles, expected {}",
                state.counters.iterations,
                per * done
            )));
        }
        if done % cfg.cycle.checkpoint_every == 0 || done == end {
            last_ckpt = Some(save_checkpoint(
                &ckpt_dir,
                &checkpoint_stem(done),
                &bundle(&state, resolution)?,
                config_json.clone(),
                state.counters.iterations,
                done,
                rng_state_digest(cfg.cycle.seed, data.len(), cfg.cycle.batch_size, done),
            )?);
        }
    }
    let final_checkpoint = match last_ckpt {
        Some(p) => p,
        None => save_checkpoint(
            &ckpt_dir,
            &checkpoint_stem(state.cycle),
            &bundle(&state, resolution)?,
            config_json,
            state.counters.iterations,
            state.cycle,
            rng_state_digest(cfg.cycle.seed, data.len(), cfg.cycle.batch_size, state.cycle),
        )?,
    };
    Ok(TrainOutcome { final_checkpoint, records, counters: state.counters })
}

/// Drops log lines for cycles at or after `cycle` so a resumed run
/// continues a consistent trace.
fn truncate_log(path: &Path, cycle: u64) -> Result<()> {
    let kept = read_log(path)?.into_iter().filter(|r| r.cycle < cycle);
    let mut out = String::new();
    for r in kept {
        out.push_str(&serde_json::to_string(&r).expect("record serialises"));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Parses a JSON-lines training log; a missing file is an empty log.
pub fn read_log(path: &Path) -> Result<Vec<CycleRecord>> {
    let f = match fs::File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(Error::io(path, e)),
    };
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let r = serde_json::from_str(&line)
            .map_err(|e| Error::Parse { path: path.into(), line: i + 1, column: e.column(), msg: e.to_string() })?;
        out.push(r);
    }
    Ok(out)
}

/// A trained generator restored from a checkpoint.
#[derive(Clone, Debug)]
pub struct TrainedModel {
    pub config: RunConfig,
    pub models: Models,
    pub params: ParamSet<f32>,
    pub resolution: (usize, usize),
    pub cycle: u64,
}

impl TrainedModel {
    pub fn load(manifest_path: &Path) -> Result<Self> {
        let (manifest, all) = load_checkpoint(manifest_path)?;
        let config: RunConfig = serde_json::from_value(manifest.config.clone())
            .map_err(|e| Error::Checkpoint(format!("{}: bad config ({e})", manifest_path.display())))?;
        config.validate()?;
        let models = Models::new(&config)?;
        let (state, resolution) = unbundle(&config, &manifest, &all)?;
        let expected = models.init_params(0)?;
        for (name, t) in expected.iter() {
            match state.params.get(name) {
                Some(p) if p.shape() == t.shape() => {}
                _ => {
                    return Err(Error::Checkpoint(format!(
                        "{}: parameter {name} missing or mis-shaped for the stored configuration",
                        manifest_path.display()
                    )))
                }
            }
        }
        Ok(Self { config, models, params: state.params, resolution, cycle: manifest.cycle })
    }

    /// Coarse image, residual and composed output for a batch.
    pub fn infer(&self, source: &Tensor<f32>, source_pose: &Tensor<f32>, target_pose: &Tensor<f32>) -> Result<Inference> {
        let (_, _, h, w) = source.dims4()?;
        if (h, w) != self.resolution {
            return Err(Error::Invalid(format!(
                "input is {h}x{w} but the checkpoint was trained at {}x{}",
                self.resolution.0, self.resolution.1
            )));
        }
        let mode = self.config.cycle.ablation_mode;
        self.models.generator.infer(&self.params, source, source_pose, target_pose, mode.uses_texture())
    }
}
