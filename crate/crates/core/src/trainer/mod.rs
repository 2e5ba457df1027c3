//! The alternating training cycle, full training runs with logging and
//! checkpoints, and inference from checkpoints.

mod config;
mod cycle;
mod run;

pub use config::{AblationMode, CycleConfig, DataConfig, OptimizerConfig, RunConfig};
pub use cycle::{run_cycle, CycleRecord, Models, TrainState, UpdateCounters};
pub use run::{
    latest_checkpoint, load_training_data, read_log, rng_state_digest, train, TrainOptions, TrainOutcome,
    TrainedModel, CHECKPOINT_DIR, LOG_FILE,
};

#[cfg(test)]
mod tests {
    use std::path::Path;

    use ratenet_autograd::ParamSet;

    use super::*;
    use crate::data::{make_synthetic_dataset, PairDataset, SynthOptions};
    use crate::generator::{POSE_NS, TEX_NS};

    fn dataset(dir: &Path) -> PairDataset {
        make_synthetic_dataset(&SynthOptions::new(2, 2, 32, 32, 3), dir).unwrap();
        let cfg = RunConfig { data: DataConfig { root: Some(dir.into()), ..DataConfig::default() }, ..RunConfig::tiny() };
        load_training_data(&cfg, None).unwrap()
    }

    fn subset(ps: &ParamSet<f32>, prefix: &str) -> Vec<(String, Vec<f32>)> {
        ps.with_prefix(prefix).map(|(n, t)| (n.to_string(), t.data().to_vec())).collect()
    }

    fn one_cycle(mode: AblationMode) -> (TrainState, TrainState, CycleRecord) {
        let dir = tempfile::tempdir().unwrap();
        let data = dataset(dir.path());
        let mut cfg = RunConfig::tiny();
        cfg.cycle.ablation_mode = mode;
        let models = Models::new(&cfg).unwrap();
        let mut state = TrainState::new(&cfg, models.init_params(1).unwrap()).unwrap();
        let before = state.clone();
        let batch = data.batch(&[0, 1]).unwrap();
        let rec = run_cycle(&cfg, &models, &mut state, &batch, 1e-3).unwrap();
        (before, state, rec)
    }

    #[test]
    fn one_one_three_counters() {
        let (_, after, rec) = one_cycle(AblationMode::Full);
        let c = after.counters;
        assert_eq!((c.pose, c.texture, c.disc_shape, c.disc_app, c.iterations), (2, 1, 3, 3, 5));
        assert_eq!(rec.cycle, 0);
        assert!(rec.losses["l2_pose_grad_norm"] > 0.0);
        for k in ["l1_total", "l2_total", "l2_sty", "l2_gan", "d_shape", "d_app"] {
            assert!(rec.losses[k].is_finite(), "{k}");
        }
    }

    #[test]
    fn pb_fixed_freezes_pose_module() {
        let (before, after, _) = one_cycle(AblationMode::PbFixed);
        assert_eq!(subset(&before.params, POSE_NS), subset(&after.params, POSE_NS));
        assert_ne!(subset(&before.params, TEX_NS), subset(&after.params, TEX_NS));
        assert_eq!(after.counters.iterations, 4);
    }

    #[test]
    fn pb_only_never_touches_enhancer() {
        let (before, after, _) = one_cycle(AblationMode::PbOnly);
        assert_eq!(subset(&before.params, TEX_NS), subset(&after.params, TEX_NS));
        assert_eq!((after.counters.pose, after.counters.texture), (2, 0));
    }

    #[test]
    fn train_resume_matches_uninterrupted() {
        let data_dir = tempfile::tempdir().unwrap();
        let data = dataset(data_dir.path());
        let cfg = RunConfig::tiny();

        let a = tempfile::tempdir().unwrap();
        let full = train(&cfg, &data, a.path(), &TrainOptions::default()).unwrap();
        assert_eq!(full.records.len(), 4);
        assert_eq!(full.counters.iterations, 20);

        let b = tempfile::tempdir().unwrap();
        let first = train(&cfg, &data, b.path(), &TrainOptions { stop_at_cycle: Some(2), ..TrainOptions::default() }).unwrap();
        assert_eq!(first.records.len(), 2);
        let second = train(&cfg, &data, b.path(), &TrainOptions { resume: true, ..TrainOptions::default() }).unwrap();
        assert_eq!(second.records.len(), 2);

        let strip = |rs: Vec<CycleRecord>| rs.into_iter().map(|r| (r.cycle, r.lr, r.losses, r.counters)).collect::<Vec<_>>();
        let la = strip(read_log(&a.path().join(LOG_FILE)).unwrap());
        let lb = strip(read_log(&b.path().join(LOG_FILE)).unwrap());
        assert_eq!(la, lb);
        assert_eq!(la[0].1, 1e-4);

        let ma = TrainedModel::load(&full.final_checkpoint).unwrap();
        let mb = TrainedModel::load(&second.final_checkpoint).unwrap();
        assert_eq!(ma.params, mb.params);

        // Fresh directories cannot resume; a changed config cannot resume.
        let c = tempfile::tempdir().unwrap();
        let err = train(&cfg, &data, c.path(), &TrainOptions { resume: true, ..TrainOptions::default() }).unwrap_err();
        assert!(err.to_string().contains("no checkpoint found"));
        let mut other = cfg.clone();
        other.cycle.seed = 9;
        assert!(train(&other, &data, b.path(), &TrainOptions { resume: true, ..TrainOptions::default() }).is_err());
    }

    #[test]
    fn inference_checks_resolution_and_is_batch_independent() {
        let data_dir = tempfile::tempdir().unwrap();
        let data = dataset(data_dir.path());
        let out = tempfile::tempdir().unwrap();
        let mut cfg = RunConfig::tiny();
        cfg.cycle.total_cycles = 1;
        let run = train(&cfg, &data, out.path(), &TrainOptions::default()).unwrap();
        let model = TrainedModel::load(&run.final_checkpoint).unwrap();
        let b = data.batch(&[0, 1, 2]).unwrap();
        let all = model.infer(&b.source_image, &b.source_pose, &b.target_pose).unwrap();
        for i in 0..3 {
            let s = b.sample(i).unwrap();
            let one = model.infer(&s.source_image, &s.source_pose, &s.target_pose).unwrap();
            assert_eq!(one.output, all.output.narrow_batch(i, 1).unwrap());
        }
        assert_eq!(crate::generator::compose_tensor(&all.coarse, &all.residual).unwrap(), all.output);
        let small = ratenet_autograd::Tensor::zeros(&[1, 3, 16, 16]);
        let pose = ratenet_autograd::Tensor::zeros(&[1, 18, 16, 16]);
        assert!(model.infer(&small, &pose, &pose).is_err());
    }
}
