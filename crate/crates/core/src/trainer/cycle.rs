use std::collections::BTreeMap;
use std::time::Instant;

use ratenet_autograd::{Graph, ParamSet, Tensor, Trainable, Var};
use serde::{Deserialize, Serialize};

use super::config::{AblationMode, RunConfig};
use crate::data::TrainingBatch;
use crate::discriminators::{DiscKind, PatchDiscriminator, APP_NS, SHAPE_NS};
use crate::error::{Error, Result};
use crate::generator::{Generator, POSE_NS, TEX_NS};
use crate::losses::{gan_d, loss_l1, loss_l2, FeatureExtractor};
use crate::optimizer::RAdam;

/// Network descriptions plus the frozen feature extractor.
#[derive(Clone, Debug)]
pub struct Models {
    pub generator: Generator,
    pub disc_shape: PatchDiscriminator,
    pub disc_app: PatchDiscriminator,
    pub extractor: FeatureExtractor,
}

impl Models {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        Ok(Self {
            generator: Generator::new(&cfg.generator)?,
            disc_shape: PatchDiscriminator::new(DiscKind::Shape, &cfg.discriminator)?,
            disc_app: PatchDiscriminator::new(DiscKind::Appearance, &cfg.discriminator)?,
            extractor: cfg.losses.extractor.build()?,
        })
    }

    /// Fresh parameters of all four networks, seeded from `seed`.
    pub fn init_params(&self, seed: u64) -> Result<ParamSet<f32>> {
        let mut ps = self.generator.init_params(seed);
        ps.merge(self.disc_shape.init_params(seed.wrapping_add(1)))?;
        ps.merge(self.disc_app.init_params(seed.wrapping_add(2)))?;
        Ok(ps)
    }
}

/// How many times each network has been updated.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct UpdateCounters {
    pub pose: u64,
    pub texture: u64,
    pub disc_shape: u64,
    pub disc_app: u64,
    /// Optimizer phases; a discriminator step (shape then appearance) counts once.
    pub iterations: u64,
}

/// Everything that changes during training.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub params: ParamSet<f32>,
    pub opt_gen: RAdam<f32>,
    pub opt_shape: RAdam<f32>,
    pub opt_app: RAdam<f32>,
    /// Completed cycles.
    pub cycle: u64,
    pub counters: UpdateCounters,
}

impl TrainState {
    pub fn new(cfg: &RunConfig, params: ParamSet<f32>) -> Result<Self> {
        let o = &cfg.optimizer.radam;
        Ok(Self {
            params,
            opt_gen: RAdam::new(o.clone())?,
            opt_shape: RAdam::new(o.clone())?,
            opt_app: RAdam::new(o.clone())?,
            cycle: 0,
            counters: UpdateCounters::default(),
        })
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CycleRecord {
    /// Zero-based index of the cycle this record describes.
    pub cycle: u64,
    pub lr: f64,
    pub losses: BTreeMap<String, f64>,
    pub counters: UpdateCounters,
    /// Seconds spent in this cycle.
    pub wall_time: f64,
}

fn finite(phase: &str, name: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite { phase: phase.into(), what: format!("loss `{name}`") })
    }
}

/// Gradients of every trainable parameter named in the graph.
fn collect(g: &Graph<f32>, loss: Var) -> Result<Vec<(String, Tensor<f32>)>> {
    let grads = g.backward(loss)?;
    Ok(grads
        .param_names()
        .into_iter()
        .filter_map(|n| grads.param(n).map(|t| (n.to_string(), t.clone())))
        .collect())
}

fn apply(opt: &mut RAdam<f32>, ps: &mut ParamSet<f32>, grads: &[(String, Tensor<f32>)], lr: f64) -> Result<()> {
    let refs: Vec<(&str, &Tensor<f32>)> = grads.iter().map(|(n, t)| (n.as_str(), t)).collect();
    opt.step(ps, &refs, lr)
}

fn grad_norm(grads: &[(String, Tensor<f32>)], prefix: &str) -> f64 {
    grads
        .iter()
        .filter(|(n, _)| n.starts_with(prefix))
        .flat_map(|(_, t)| t.data())
        .map(|&x| (x as f64).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Inputs of a batch placed on a graph as constants.
struct Inputs {
    source: Var,
    source_pose: Var,
    target: Var,
    target_pose: Var,
}

fn place(g: &mut Graph<f32>, b: &TrainingBatch) -> Inputs {
    Inputs {
        source: g.constant(b.source_image.clone()),
        source_pose: g.constant(b.source_pose.clone()),
        target: g.constant(b.target_image.clone()),
        target_pose: g.constant(b.target_pose.clone()),
    }
}

/// Runs one alternating cycle:
///
/// 1. the pose transfer module takes one step on the coarse loss;
/// 2. a fresh forward pass and one joint step on the texture-aware loss,
///    with the discriminators scoring but not learning;
/// 3. `K` steps of each discriminator (shape, then appearance) against
///    fakes generated once after phase 2 and detached.
///
/// On a non-finite loss the cycle aborts before that phase's update.
pub fn run_cycle(
    cfg: &RunConfig,
    models: &Models,
    state: &mut TrainState,
    batch: &TrainingBatch,
    lr: f64,
) -> Result<CycleRecord> {
    let started = Instant::now();
    let mode = cfg.cycle.ablation_mode;
    let w = &cfg.losses.weights;
    let fx = &models.extractor;
    let gen = &models.generator;
    let mut losses = BTreeMap::new();

    // Phase 1.
    if mode.trains_pose() {
        let mut g = Graph::with_trainable(Trainable::prefixes(&[POSE_NS]));
        let x = place(&mut g, batch);
        let out = gen.pose.forward(&mut g, &state.params, x.source, x.source_pose, x.target_pose)?;
        let terms = loss_l1(&mut g, fx, w, out.coarse, x.target)?;
        for (k, v) in terms.values(&g) {
            losses.insert(format!("l1_{k}"), finite("phase 1 (coarse loss)", k, v)?);
        }
        let grads = collect(&g, terms.total)?;
        apply(&mut state.opt_gen, &mut state.params, &grads, lr)?;
        state.counters.pose += 1;
        state.counters.iterations += 1;
    }

    // Phase 2.
    {
        let trainable: Vec<&str> = match mode {
            AblationMode::Full => vec![POSE_NS, TEX_NS],
            AblationMode::PbOnly => vec![POSE_NS],
            AblationMode::PbFixed => vec![TEX_NS],
        };
        let mut g = Graph::with_trainable(Trainable::prefixes(trainable.as_slice()));
        let x = place(&mut g, batch);
        let out = gen.forward(&mut g, &state.params, x.source, x.source_pose, x.target_pose, mode.uses_texture())?;
        let fs = models.disc_shape.forward(&mut g, &state.params, out.output, x.target_pose)?;
        let fa = models.disc_app.forward(&mut g, &state.params, out.output, x.source)?;
        let terms = loss_l2(&mut g, fx, w, out.output, x.target, fs, fa)?;
        for (k, v) in terms.values(&g) {
            losses.insert(format!("l2_{k}"), finite("phase 2 (texture-aware loss)", k, v)?);
        }
        let grads = collect(&g, terms.total)?;
        losses.insert("l2_pose_grad_norm".into(), grad_norm(&grads, POSE_NS));
        apply(&mut state.opt_gen, &mut state.params, &grads, lr)?;
        if trainable.contains(&POSE_NS) {
            state.counters.pose += 1;
        }
        if trainable.contains(&TEX_NS) {
            state.counters.texture += 1;
        }
        state.counters.iterations += 1;
    }

    // Phase 3.
    let fake = {
        let mut g = Graph::inference();
        let x = place(&mut g, batch);
        let out = gen.forward(&mut g, &state.params, x.source, x.source_pose, x.target_pose, mode.uses_texture())?;
        g.value(out.output).clone()
    };
    let (mut sum_s, mut sum_a) = (0.0, 0.0);
    for _ in 0..cfg.cycle.d_steps {
        for kind in [DiscKind::Shape, DiscKind::Appearance] {
            let (disc, ns) = match kind {
                DiscKind::Shape => (&models.disc_shape, SHAPE_NS),
                DiscKind::Appearance => (&models.disc_app, APP_NS),
            };
            let mut g = Graph::with_trainable(Trainable::prefixes(&[ns]));
            let x = place(&mut g, batch);
            let f = g.constant(fake.clone());
            let cond = if kind == DiscKind::Shape { x.target_pose } else { x.source };
            let real = disc.forward(&mut g, &state.params, x.target, cond)?;
            let fk = disc.forward(&mut g, &state.params, f, cond)?;
            let loss = gan_d(&mut g, real, fk)?;
            let v = g.value(loss).item() as f64;
            let name = if kind == DiscKind::Shape { "d_shape" } else { "d_app" };
            finite("phase 3 (discriminator)", name, v)?;
            let grads = collect(&g, loss)?;
            match kind {
                DiscKind::Shape => {
                    apply(&mut state.opt_shape, &mut state.params, &grads, lr)?;
                    state.counters.disc_shape += 1;
                    sum_s += v;
                }
                DiscKind::Appearance => {
                    apply(&mut state.opt_app, &mut state.params, &grads, lr)?;
                    state.counters.disc_app += 1;
                    sum_a += v;
                }
            }
        }
        state.counters.iterations += 1;
    }
    let k = cfg.cycle.d_steps as f64;
    losses.insert("d_shape".into(), sum_s / k);
    losses.insert("d_app".into(), sum_a / k);

    let record = CycleRecord {
        cycle: state.cycle,
        lr,
        losses,
        counters: state.counters,
        wall_time: started.elapsed().as_secs_f64(),
    };
    state.cycle += 1;
    Ok(record)
}
