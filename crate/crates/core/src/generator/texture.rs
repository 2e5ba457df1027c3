use rand::Rng;
use ratenet_autograd::{Graph, PadMode, ParamSet, Scalar, Var};

use super::adain::adain;
use super::{GeneratorConfig, TEX_NS};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, Linear};

/// Plain residual block (`x + conv(lrelu(conv(x)))`), no normalisation.
#[derive(Clone, Debug)]
struct ResBlock {
    conv1: Conv2d,
    conv2: Conv2d,
}

/// Texture encoder: strided convs, residual blocks, global average pooling
/// and a dense projection to the code.
///
/// Reflect padding keeps a spatially uniform input uniform through every
/// layer, so pooling a uniform image equals reading any single position.
#[derive(Clone, Debug)]
pub struct TextureEncoder {
    down: Vec<Conv2d>,
    res: Vec<ResBlock>,
    project: Linear,
    slope: f64,
}

impl TextureEncoder {
    pub fn new(cfg: &GeneratorConfig) -> Self {
        let ns = TEX_NS;
        let mut prev = 3;
        let down = cfg
            .encoder_channels()
            .into_iter()
            .enumerate()
            .map(|(i, c)| {
                let conv = Conv2d::strided(format!("{ns}enc/{i}"), prev, c, 3, 2, 1, PadMode::Reflect);
                prev = c;
                conv
            })
            .collect();
        let res = (0..cfg.texture_encoder_res_blocks)
            .map(|r| ResBlock {
                conv1: Conv2d::same(format!("{ns}enc_res/{r}/conv1"), prev, prev, 3, PadMode::Reflect),
                conv2: Conv2d::same(format!("{ns}enc_res/{r}/conv2"), prev, prev, 3, PadMode::Reflect),
            })
            .collect();
        Self {
            down,
            res,
            project: Linear::new(format!("{ns}code"), prev, cfg.texture_code_dim),
            slope: cfg.leaky_slope,
        }
    }

    pub fn init<R: Rng>(&self, ps: &mut ParamSet<f32>, rng: &mut R) {
        for c in &self.down {
            c.init(ps, rng, 1.0);
        }
        for r in &self.res {
            r.conv1.init(ps, rng, 1.0);
            r.conv2.init(ps, rng, 0.5);
        }
        self.project.init(ps, rng, 1.0);
    }

    /// Feature map right before pooling, `B x C x H/2^n x W/2^n`.
    pub fn feature_map<T: Scalar>(&self, g: &mut Graph<T>, ps: &ParamSet<T>, source: Var) -> Result<Var> {
        let slope = T::from_f64_lossy(self.slope);
        let mut x = source;
        for c in &self.down {
            x = c.forward(g, ps, x)?;
            x = g.leaky_relu(x, slope);
        }
        for r in &self.res {
            let h = r.conv1.forward(g, ps, x)?;
            let h = g.leaky_relu(h, slope);
            let h = r.conv2.forward(g, ps, h)?;
            x = g.add(x, h)?;
        }
        Ok(x)
    }

    /// Pooled feature before the code projection, `B x C`.
    pub fn pooled<T: Scalar>(&self, g: &mut Graph<T>, ps: &ParamSet<T>, source: Var) -> Result<Var> {
        let f = self.feature_map(g, ps, source)?;
        Ok(g.global_avg_pool(f)?)
    }

    /// Texture code `z`, `B x D`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, ps: &ParamSet<T>, source: Var) -> Result<Var> {
        let (_, c, _, _) = g.value(source).dims4()?;
        if c != 3 {
            return Err(Error::Invalid(format!("texture encoder expects 3 channels, got {c}")));
        }
        let p = self.pooled(g, ps, source)?;
        self.project.forward(g, ps, p)
    }
}

/// Residual block whose two convolutions are each followed by AdaIN.
#[derive(Clone, Debug)]
struct AdaInResBlock {
    conv1: Conv2d,
    conv2: Conv2d,
}

/// Decodes the content feature, modulated by the texture code, into a
/// full-resolution residual map with unbounded values.
#[derive(Clone, Debug)]
pub struct ResidualSynthesizer {
    head: Linear,
    blocks: Vec<AdaInResBlock>,
    up: Vec<Conv2d>,
    pub output: Conv2d,
    channels: usize,
    code_dim: usize,
    slope: f64,
}

impl ResidualSynthesizer {
    pub fn new(cfg: &GeneratorConfig) -> Self {
        let ns = TEX_NS;
        let c = cfg.content_channels();
        let blocks: Vec<AdaInResBlock> = (0..cfg.enhancer_res_blocks)
            .map(|r| AdaInResBlock {
                conv1: Conv2d::same(format!("{ns}res/{r}/conv1"), c, c, 3, PadMode::Reflect).without_bias(),
                conv2: Conv2d::same(format!("{ns}res/{r}/conv2"), c, c, 3, PadMode::Reflect).without_bias(),
            })
            .collect();
        let n_adain = 2 * blocks.len();
        let mut prev = c;
        let up = cfg
            .decoder_channels()
            .into_iter()
            .enumerate()
            .map(|(j, co)| {
                let conv = Conv2d::same(format!("{ns}up/{j}"), prev, co, 3, PadMode::Reflect);
                prev = co;
                conv
            })
            .collect();
        Self {
            head: Linear::new(format!("{ns}adain_head"), cfg.texture_code_dim, n_adain * 2 * c),
            blocks,
            up,
            output: Conv2d::same(format!("{ns}out"), prev, 3, 3, PadMode::Reflect),
            channels: c,
            code_dim: cfg.texture_code_dim,
            slope: cfg.leaky_slope,
        }
    }

    pub fn init<R: Rng>(&self, ps: &mut ParamSet<f32>, rng: &mut R) {
        self.head.init(ps, rng, 0.5);
        for b in &self.blocks {
            b.conv1.init(ps, rng, 1.0);
            b.conv2.init(ps, rng, 1.0);
        }
        for c in &self.up {
            c.init(ps, rng, 1.0);
        }
        self.output.init(ps, rng, 0.1);
    }

    /// Per-layer `(gamma, beta)` from the code; `gamma = 1 + raw` so a zero
    /// head output is the identity modulation.
    pub fn modulation<T: Scalar>(&self, g: &mut Graph<T>, ps: &ParamSet<T>, code: Var) -> Result<Vec<(Var, Var)>> {
        let raw = self.head.forward(g, ps, code)?;
        let c = self.channels;
        (0..2 * self.blocks.len())
            .map(|l| {
                let gr = g.narrow(raw, 1, 2 * l * c, c)?;
                let gamma = g.add_scalar(gr, T::one());
                let beta = g.narrow(raw, 1, 2 * l * c + c, c)?;
                Ok((gamma, beta))
            })
            .collect()
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, ps: &ParamSet<T>, content: Var, code: Var) -> Result<Var> {
        let (b, c, _, _) = g.value(content).dims4()?;
        let (bz, d) = g.value(code).dims2()?;
        if c != self.channels || bz != b || d != self.code_dim {
            return Err(Error::Invalid(format!(
                "residual synthesizer expects content {b} x {} and code {b} x {}, got {:?} and {:?}",
                self.channels,
                self.code_dim,
                g.shape(content),
                g.shape(code)
            )));
        }
        let slope = T::from_f64_lossy(self.slope);
        let mods = self.modulation(g, ps, code)?;
        let mut x = content;
        for (i, blk) in self.blocks.iter().enumerate() {
            let (g1, b1) = mods[2 * i];
            let (g2, b2) = mods[2 * i + 1];
            let h = blk.conv1.forward(g, ps, x)?;
            let h = adain(g, h, g1, b1)?;
            let h = g.leaky_relu(h, slope);
            let h = blk.conv2.forward(g, ps, h)?;
            let h = adain(g, h, g2, b2)?;
            x = g.add(x, h)?;
        }
        for conv in &self.up {
            x = g.upsample2x(x)?;
            x = conv.forward(g, ps, x)?;
            x = g.leaky_relu(x, slope);
        }
        self.output.forward(g, ps, x)
    }
}
