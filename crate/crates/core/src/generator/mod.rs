//! Two-stage generator: a pose transfer module producing a coarse image and
//! a pose-aligned content feature, followed by a texture enhancer that
//! encodes the source appearance into a code and synthesises an additive
//! residual map.

mod adain;
mod pose_transfer;
mod texture;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use ratenet_autograd::{Graph, ParamSet, Scalar, Tensor, Var};
use serde::{Deserialize, Serialize};

pub use adain::{adain, adain_tensor};
pub use pose_transfer::{PatnBlock, PatnOutput, PoseTransfer, PoseTransferOutput, IMAGE_PATH_CHANNELS, POSE_PATH_CHANNELS};
pub use texture::{ResidualSynthesizer, TextureEncoder};

use crate::data::NUM_JOINTS;
use crate::error::{Error, Result};

/// Parameter namespace of the pose transfer module.
pub const POSE_NS: &str = "gen_pose/";
/// Parameter namespace of the texture enhancer.
pub const TEX_NS: &str = "gen_tex/";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub n_downsample: usize,
    pub n_patn_blocks: usize,
    pub base_channels: usize,
    pub max_channels: usize,
    pub texture_code_dim: usize,
    pub leaky_slope: f64,
    pub texture_encoder_res_blocks: usize,
    pub enhancer_res_blocks: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            n_downsample: 3,
            n_patn_blocks: 9,
            base_channels: 32,
            max_channels: 64,
            texture_code_dim: 128,
            leaky_slope: 0.2,
            texture_encoder_res_blocks: 1,
            enhancer_res_blocks: 2,
        }
    }
}

impl GeneratorConfig {
    /// Widths for 256 x 256 training.
    pub fn full_scale() -> Self {
        Self { base_channels: 64, max_channels: 256, ..Self::default() }
    }

    fn width(&self, level: usize) -> usize {
        (self.base_channels << level.min(20)).min(self.max_channels)
    }

    /// Output channels of each stride-2 encoder stage.
    pub fn encoder_channels(&self) -> Vec<usize> {
        (0..self.n_downsample).map(|i| self.width(i)).collect()
    }

    /// `C_f`, the width of the content feature.
    pub fn content_channels(&self) -> usize {
        self.width(self.n_downsample.saturating_sub(1))
    }

    /// Output channels of each up-sampling stage, mirroring the encoder.
    pub fn decoder_channels(&self) -> Vec<usize> {
        let n = self.n_downsample;
        (0..n)
            .map(|j| if j + 1 < n { self.width(n - 2 - j) } else { (self.base_channels / 2).max(1) })
            .collect()
    }

    /// Total down-sampling factor.
    pub fn stride(&self) -> usize {
        1 << self.n_downsample
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("generator: {m}")));
        if self.n_downsample == 0 || self.n_downsample > 8 {
            return bad("n_downsample must be in 1..=8");
        }
        if self.n_patn_blocks == 0 {
            return bad("n_patn_blocks must be at least 1");
        }
        if self.base_channels == 0 || self.max_channels < self.base_channels {
            return bad("need 1 <= base_channels <= max_channels");
        }
        if self.texture_code_dim == 0 {
            return bad("texture_code_dim must be at least 1");
        }
        if !(self.leaky_slope.is_finite() && self.leaky_slope >= 0.0) {
            return bad("leaky_slope must be finite and non-negative");
        }
        Ok(())
    }
}

/// Shared input validation for both modules.
pub(crate) fn check_inputs<T: Scalar>(
    cfg: &GeneratorConfig,
    g: &Graph<T>,
    source: Var,
    source_pose: Var,
    target_pose: Var,
) -> Result<()> {
    let (b, c, h, w) = g.value(source).dims4()?;
    if c != 3 {
        return Err(Error::Invalid(format!("source image has {c} channels, expected 3")));
    }
    let m = cfg.stride().max(8);
    if h % m != 0 || w % m != 0 || h == 0 || w == 0 {
        return Err(Error::Invalid(format!("image size {h}x{w} is not a multiple of {m}")));
    }
    for (what, p) in [("source pose", source_pose), ("target pose", target_pose)] {
        let s = g.shape(p);
        if s != [b, NUM_JOINTS, h, w] {
            return Err(Error::Invalid(format!(
                "{what} has shape {s:?}, expected [{b}, {NUM_JOINTS}, {h}, {w}]"
            )));
        }
    }
    Ok(())
}

/// `clamp(coarse + residual, -1, 1)`.
pub fn compose<T: Scalar>(g: &mut Graph<T>, coarse: Var, residual: Var) -> Result<Var> {
    let s = g.add(coarse, residual)?;
    Ok(g.clamp(s, -T::one(), T::one()))
}

pub fn compose_tensor<T: Scalar>(coarse: &Tensor<T>, residual: &Tensor<T>) -> Result<Tensor<T>> {
    Ok(coarse.zip_map(residual, |a, b| (a + b).max(-T::one()).min(T::one()))?)
}

/// Graph handles produced by one generator pass.
#[derive(Clone, Copy, Debug)]
pub struct GeneratorOutput {
    pub content: Var,
    pub coarse: Var,
    /// Absent when the enhancer is disabled.
    pub code: Option<Var>,
    pub residual: Option<Var>,
    /// Composed image; equals `coarse` when the enhancer is disabled.
    pub output: Var,
}

/// Eager results of [`Generator::infer`].
#[derive(Clone, Debug, PartialEq)]
pub struct Inference {
    pub coarse: Tensor<f32>,
    pub residual: Tensor<f32>,
    pub output: Tensor<f32>,
}

#[derive(Clone, Debug)]
pub struct Generator {
    pub cfg: GeneratorConfig,
    pub pose: PoseTransfer,
    pub encoder: TextureEncoder,
    pub synthesizer: ResidualSynthesizer,
}

impl Generator {
    pub fn new(cfg: &GeneratorConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg: cfg.clone(),
            pose: PoseTransfer::new(cfg),
            encoder: TextureEncoder::new(cfg),
            synthesizer: ResidualSynthesizer::new(cfg),
        })
    }

    /// Seeded initial parameters for both modules.
    pub fn init_params(&self, seed: u64) -> ParamSet<f32> {
        let mut ps = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.pose.init(&mut ps, &mut rng);
        self.encoder.init(&mut ps, &mut rng);
        self.synthesizer.init(&mut ps, &mut rng);
        ps
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        ps: &ParamSet<T>,
        source: Var,
        source_pose: Var,
        target_pose: Var,
        with_texture: bool,
    ) -> Result<GeneratorOutput> {
        let PoseTransferOutput { content, coarse } = self.pose.forward(g, ps, source, source_pose, target_pose)?;
        if !with_texture {
            return Ok(GeneratorOutput { content, coarse, code: None, residual: None, output: coarse });
        }
        let code = self.encoder.forward(g, ps, source)?;
        let residual = self.synthesizer.forward(g, ps, content, code)?;
        let output = compose(g, coarse, residual)?;
        Ok(GeneratorOutput { content, coarse, code: Some(code), residual: Some(residual), output })
    }

    /// Forward pass without gradient recording. With the enhancer disabled
    /// the residual is all zeros.
    pub fn infer(
        &self,
        ps: &ParamSet<f32>,
        source: &Tensor<f32>,
        source_pose: &Tensor<f32>,
        target_pose: &Tensor<f32>,
        with_texture: bool,
    ) -> Result<Inference> {
        let mut g = Graph::inference();
        let s = g.constant(source.clone());
        let sp = g.constant(source_pose.clone());
        let tp = g.constant(target_pose.clone());
        let out = self.forward(&mut g, ps, s, sp, tp, with_texture)?;
        let coarse = g.value(out.coarse).clone();
        let residual = match out.residual {
            Some(r) => g.value(r).clone(),
            None => Tensor::zeros(coarse.shape()),
        };
        Ok(Inference { coarse, residual, output: g.value(out.output).clone() })
    }
}

#[cfg(test)]
mod tests {
    use rand::Rng;
    use ratenet_autograd::Trainable;

    use super::*;

    fn tiny() -> GeneratorConfig {
        GeneratorConfig {
            n_patn_blocks: 2,
            base_channels: 8,
            max_channels: 16,
            texture_code_dim: 16,
            enhancer_res_blocks: 1,
            ..GeneratorConfig::default()
        }
    }

    fn inputs(b: usize, h: usize, w: usize, seed: u64) -> (Tensor<f32>, Tensor<f32>, Tensor<f32>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let img = Tensor::from_fn(&[b, 3, h, w], |_| rng.random_range(-1.0..1.0));
        let sp = Tensor::from_fn(&[b, NUM_JOINTS, h, w], |_| rng.random_range(0.0..1.0));
        let tp = Tensor::from_fn(&[b, NUM_JOINTS, h, w], |_| rng.random_range(0.0..1.0));
        (img, sp, tp)
    }

    #[test]
    fn channel_plan() {
        let d = GeneratorConfig::default();
        assert_eq!(d.encoder_channels(), vec![32, 64, 64]);
        assert_eq!(d.content_channels(), 64);
        assert_eq!(d.decoder_channels(), vec![64, 32, 16]);
        let f = GeneratorConfig::full_scale();
        assert_eq!(f.encoder_channels(), vec![64, 128, 256]);
        assert_eq!(f.content_channels(), 256);
    }

    #[test]
    fn shapes_and_ranges() {
        let gen = Generator::new(&tiny()).unwrap();
        let ps = gen.init_params(1);
        let (img, sp, tp) = inputs(2, 32, 24, 2);
        let mut g = Graph::inference();
        let (s, a, b) = (g.constant(img), g.constant(sp), g.constant(tp));
        let out = gen.forward(&mut g, &ps, s, a, b, true).unwrap();
        assert_eq!(g.shape(out.content), &[2, 16, 4, 3]);
        assert_eq!(g.shape(out.coarse), &[2, 3, 32, 24]);
        assert_eq!(g.shape(out.code.unwrap()), &[2, 16]);
        assert_eq!(g.shape(out.residual.unwrap()), &[2, 3, 32, 24]);
        assert!(g.value(out.coarse).data().iter().all(|v| v.abs() < 1.0));
        assert!(g.value(out.output).data().iter().all(|v| v.abs() <= 1.0));
    }

    #[test]
    fn bad_inputs_rejected() {
        let gen = Generator::new(&tiny()).unwrap();
        let ps = gen.init_params(1);
        let (img, sp, tp) = inputs(1, 20, 16, 3);
        assert!(gen.infer(&ps, &img, &sp, &tp, true).is_err());
        let (img, sp, _) = inputs(1, 16, 16, 3);
        let wrong = Tensor::zeros(&[1, 17, 16, 16]);
        assert!(gen.infer(&ps, &img, &sp, &wrong, true).is_err());
    }

    #[test]
    fn zero_weights_give_zero_coarse_image() {
        let gen = Generator::new(&tiny()).unwrap();
        let mut ps = gen.init_params(4);
        for (_, t) in ps.iter_mut() {
            t.data_mut().fill(0.0);
        }
        let (img, sp, tp) = inputs(1, 16, 16, 5);
        let out = gen.infer(&ps, &img, &sp, &tp, false).unwrap();
        assert!(out.coarse.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn patn_mask_in_open_unit_interval_and_identity_under_zero_residual() {
        let cfg = tiny();
        let gen = Generator::new(&cfg).unwrap();
        let mut ps = gen.init_params(6);
        let blk = &gen.pose.blocks[0];
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = Tensor::from_fn(&[2, 16, 4, 4], |_| rng.random_range(-2.0..2.0));
        let p = Tensor::from_fn(&[2, 16, 4, 4], |_| rng.random_range(-2.0..2.0));
        let mut g = Graph::inference();
        let (xv, pv) = (g.constant(x.clone()), g.constant(p.clone()));
        let out = blk.forward(&mut g, &ps, xv, pv).unwrap();
        assert!(g.value(out.mask).data().iter().all(|&m| m > 0.0 && m < 1.0));
        assert_eq!(g.shape(out.image), &[2, 16, 4, 4]);
        assert_eq!(g.shape(out.pose), &[2, 16, 4, 4]);

        // Zeroing the last residual conv makes its instance-normalised
        // output exactly zero.
        ps.get_mut(&blk.res2.weight_name()).unwrap().data_mut().fill(0.0);
        let mut g = Graph::inference();
        let (xv, pv) = (g.constant(x.clone()), g.constant(p));
        let out = blk.forward(&mut g, &ps, xv, pv).unwrap();
        assert_eq!(g.value(out.image), &x);
    }

    #[test]
    fn compose_examples() {
        let co = Tensor::from_vec(&[3], vec![0.9f32, 0.2, -0.7]).unwrap();
        let r = Tensor::from_vec(&[3], vec![0.5f32, -0.5, -0.6]).unwrap();
        let out = compose_tensor(&co, &r).unwrap();
        assert_eq!(out.data()[0], 1.0);
        assert!((out.data()[1] + 0.3).abs() < 1e-7);
        assert_eq!(out.data()[2], -1.0);
        assert_eq!(compose_tensor(&co, &Tensor::zeros(&[3])).unwrap(), co);
        assert!(compose_tensor(&co, &Tensor::zeros(&[4])).is_err());
    }

    #[test]
    fn zeroed_output_head_separates_coarse_and_final() {
        let gen = Generator::new(&tiny()).unwrap();
        let mut ps = gen.init_params(8);
        let head = &gen.synthesizer.output;
        ps.get_mut(&head.weight_name()).unwrap().data_mut().fill(0.0);
        ps.get_mut(&head.bias_name()).unwrap().data_mut().fill(0.0);
        let (img, sp, tp) = inputs(2, 16, 16, 9);
        let out = gen.infer(&ps, &img, &sp, &tp, true).unwrap();
        assert!(out.residual.data().iter().all(|&v| v == 0.0));
        assert_eq!(out.output, out.coarse);
    }

    #[test]
    fn texture_code_is_per_sample_and_drives_residual() {
        let cfg = tiny();
        let gen = Generator::new(&cfg).unwrap();
        let ps = gen.init_params(10);
        let (img, _, _) = inputs(1, 16, 16, 11);
        let both = Tensor::cat_batch(&[&img, &img]).unwrap();
        let mut g = Graph::inference();
        let s = g.constant(both);
        let z = gen.encoder.forward(&mut g, &ps, s).unwrap();
        let z = g.value(z);
        assert_eq!(z.shape(), &[2, 16]);
        assert_eq!(&z.data()[..16], &z.data()[16..]);

        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let content = Tensor::from_fn(&[1, 16, 2, 2], |_| rng.random_range(-1.0..1.0));
        let code = Tensor::from_fn(&[1, 16], |_| rng.random_range(-1.0..1.0));
        let mut bumped = code.clone();
        bumped.data_mut()[3] += 1e-2;
        let run = |code: Tensor<f32>| {
            let mut g = Graph::inference();
            let (c, z) = (g.constant(content.clone()), g.constant(code));
            let r = gen.synthesizer.forward(&mut g, &ps, c, z).unwrap();
            g.value(r).clone()
        };
        let (r0, r1) = (run(code), run(bumped));
        assert_eq!(r0.shape(), &[1, 3, 16, 16]);
        let diff = r0.zip_map(&r1, |a, b| a - b).unwrap().max_abs();
        assert!(diff > 0.0);
    }

    #[test]
    fn uniform_source_pools_to_any_position() {
        let gen = Generator::new(&tiny()).unwrap();
        let ps = gen.init_params(13).cast::<f64>();
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let colour: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let img = Tensor::from_fn(&[1, 3, 16, 16], |i| colour[i / 256]);
        let mut g = Graph::inference();
        let s = g.constant(img);
        let f = gen.encoder.feature_map(&mut g, &ps, s).unwrap();
        let fm = g.value(f).clone();
        let pooled = gen.encoder.pooled(&mut g, &ps, s).unwrap();
        let (_, c, h, w) = fm.dims4().unwrap();
        let (cy, cx) = (h / 2, w / 2);
        for ch in 0..c {
            let centre = fm.data()[(ch * h + cy) * w + cx];
            assert!((g.value(pooled).data()[ch] - centre).abs() < 1e-12);
        }
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        let gen = Generator::new(&tiny()).unwrap();
        let ps = gen.init_params(15).cast::<f64>();
        let (img, sp, tp) = inputs(1, 16, 16, 16);
        let (img, sp, tp) = (img.cast::<f64>(), sp.cast::<f64>(), tp.cast::<f64>());
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let target = Tensor::<f64>::from_fn(&[1, 3, 16, 16], |_| rng.random_range(-0.5..0.5));

        let loss = |ps: &ParamSet<f64>, trainable: Trainable| {
            let mut g = Graph::with_trainable(trainable);
            let (s, a, b) = (g.constant(img.clone()), g.constant(sp.clone()), g.constant(tp.clone()));
            let out = gen.forward(&mut g, ps, s, a, b, true).unwrap();
            let t = g.constant(target.clone());
            let d = g.sub(out.output, t).unwrap();
            let d = g.square(d);
            let l = g.mean(d);
            (g, l)
        };
        let (g, l) = loss(&ps, Trainable::All);
        let grads = g.backward(l).unwrap();

        let names: Vec<String> = ps.names().map(String::from).collect();
        let h = 1e-3;
        for k in 0..10 {
            let name = &names[rng.random_range(0..names.len())];
            let n = ps.get(name).unwrap().numel();
            let idx = rng.random_range(0..n);
            let analytic = grads.param(name).map(|t| t.data()[idx]).unwrap_or(0.0);
            let eval = |delta: f64| {
                let mut p = ps.clone();
                p.get_mut(name).unwrap().data_mut()[idx] += delta;
                let (g, l) = loss(&p, Trainable::Nothing);
                g.value(l).item()
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
            assert!(err < 1e-2, "sample {k}: {name}[{idx}] analytic {analytic} numeric {numeric}");
        }
    }
}
