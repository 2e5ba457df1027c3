use ratenet_autograd::{Graph, PadMode, ParamSet, Scalar, Var};
use rand::Rng;

use super::{check_inputs, GeneratorConfig, POSE_NS};
use crate::data::NUM_JOINTS;
use crate::error::Result;
use crate::nn::{conv_in_lrelu, Conv2d, IN_EPS};

/// Dual-pathway block: the pose pathway produces a sigmoid mask that gates
/// a residual update of the image pathway; the pose pathway is then
/// refreshed from both.
#[derive(Clone, Debug)]
pub struct PatnBlock {
    pub mask1: Conv2d,
    pub mask2: Conv2d,
    pub res1: Conv2d,
    pub res2: Conv2d,
    pub pose_update: Conv2d,
    pub slope: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct PatnOutput {
    pub image: Var,
    pub pose: Var,
    pub mask: Var,
    pub residual: Var,
}

impl PatnBlock {
    pub fn new(prefix: &str, channels: usize, slope: f64) -> Self {
        let c = |n: &str, cin| Conv2d::same(format!("{prefix}/{n}"), cin, channels, 3, PadMode::Reflect).without_bias();
        Self {
            mask1: c("mask1", channels),
            mask2: c("mask2", channels),
            res1: c("res1", channels),
            res2: c("res2", channels),
            pose_update: c("pose_update", 2 * channels),
            slope,
        }
    }

    fn convs(&self) -> [&Conv2d; 5] {
        [&self.mask1, &self.mask2, &self.res1, &self.res2, &self.pose_update]
    }

    pub fn init<R: Rng>(&self, ps: &mut ParamSet<f32>, rng: &mut R) {
        for c in self.convs() {
            c.init(ps, rng, 1.0);
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, ps: &ParamSet<T>, image: Var, pose: Var) -> Result<PatnOutput> {
        if g.shape(image) != g.shape(pose) {
            return Err(crate::Error::Invalid(format!(
                "pose-attention block pathways differ: {:?} vs {:?}",
                g.shape(image),
                g.shape(pose)
            )));
        }
        let eps = T::from_f64_lossy(IN_EPS);
        let m = conv_in_lrelu(g, ps, &self.mask1, pose, self.slope)?;
        let m = self.mask2.forward(g, ps, m)?;
        let m = g.instance_norm(m, eps)?;
        let mask = g.sigmoid(m);

        let r = conv_in_lrelu(g, ps, &self.res1, image, self.slope)?;
        let r = self.res2.forward(g, ps, r)?;
        let residual = g.instance_norm(r, eps)?;

        let gated = g.mul(mask, residual)?;
        let image_out = g.add(gated, image)?;
        let both = g.concat(&[pose, image_out], 1)?;
        let pose_out = conv_in_lrelu(g, ps, &self.pose_update, both, self.slope)?;
        Ok(PatnOutput { image: image_out, pose: pose_out, mask, residual })
    }
}

/// Coarse pose transfer module.
#[derive(Clone, Debug)]
pub struct PoseTransfer {
    pub cfg: GeneratorConfig,
    pub image_encoder: Vec<Conv2d>,
    pub pose_encoder: Vec<Conv2d>,
    pub blocks: Vec<PatnBlock>,
    pub decoder: Vec<Conv2d>,
    pub output: Conv2d,
}

#[derive(Clone, Copy, Debug)]
pub struct PoseTransferOutput {
    /// Pose-aligned content feature, `B x C_f x H/2^n x W/2^n`.
    pub content: Var,
    /// Coarse image in `(-1, 1)`.
    pub coarse: Var,
}

/// Channels entering the image pathway: source image and both pose heatmaps.
pub const IMAGE_PATH_CHANNELS: usize = 3 + 2 * NUM_JOINTS;
/// Channels entering the pose pathway: both pose heatmaps.
pub const POSE_PATH_CHANNELS: usize = 2 * NUM_JOINTS;

impl PoseTransfer {
    pub fn new(cfg: &GeneratorConfig) -> Self {
        let ns = POSE_NS;
        let chans = cfg.encoder_channels();
        let encoder = |name: &str, c_in: usize| {
            let mut prev = c_in;
            chans
                .iter()
                .enumerate()
                .map(|(i, &c)| {
                    let conv = Conv2d::strided(format!("{ns}{name}/{i}"), prev, c, 3, 2, 1, PadMode::Reflect).without_bias();
                    prev = c;
                    conv
                })
                .collect::<Vec<_>>()
        };
        let c_f = cfg.content_channels();
        let mut prev = c_f;
        let decoder = cfg
            .decoder_channels()
            .into_iter()
            .enumerate()
            .map(|(j, c)| {
                let conv = Conv2d::same(format!("{ns}dec/{j}"), prev, c, 3, PadMode::Reflect).without_bias();
                prev = c;
                conv
            })
            .collect();
        Self {
            cfg: cfg.clone(),
            image_encoder: encoder("img_enc", IMAGE_PATH_CHANNELS),
            pose_encoder: encoder("pose_enc", POSE_PATH_CHANNELS),
            blocks: (0..cfg.n_patn_blocks)
                .map(|b| PatnBlock::new(&format!("{ns}patn/{b}"), c_f, cfg.leaky_slope))
                .collect(),
            decoder,
            output: Conv2d::same(format!("{ns}out"), prev, 3, 3, PadMode::Reflect),
        }
    }

    pub fn init<R: Rng>(&self, ps: &mut ParamSet<f32>, rng: &mut R) {
        for c in self.image_encoder.iter().chain(&self.pose_encoder) {
            c.init(ps, rng, 1.0);
        }
        for b in &self.blocks {
            b.init(ps, rng);
        }
        for c in &self.decoder {
            c.init(ps, rng, 1.0);
        }
        self.output.init(ps, rng, 1.0);
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        ps: &ParamSet<T>,
        source: Var,
        source_pose: Var,
        target_pose: Var,
    ) -> Result<PoseTransferOutput> {
        check_inputs(&self.cfg, g, source, source_pose, target_pose)?;
        let slope = self.cfg.leaky_slope;
        let poses = g.concat(&[source_pose, target_pose], 1)?;
        let mut image = g.concat(&[source, poses], 1)?;
        let mut pose = poses;
        for (ci, cp) in self.image_encoder.iter().zip(&self.pose_encoder) {
            image = conv_in_lrelu(g, ps, ci, image, slope)?;
            pose = conv_in_lrelu(g, ps, cp, pose, slope)?;
        }
        for b in &self.blocks {
            let out = b.forward(g, ps, image, pose)?;
            image = out.image;
            pose = out.pose;
        }
        let content = image;
        let mut x = content;
        for conv in &self.decoder {
            x = g.upsample2x(x)?;
            x = conv_in_lrelu(g, ps, conv, x, slope)?;
        }
        let x = self.output.forward(g, ps, x)?;
        let coarse = g.tanh(x);
        Ok(PoseTransferOutput { content, coarse })
    }
}
