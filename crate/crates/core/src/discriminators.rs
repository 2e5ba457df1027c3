//! Patch discriminators scoring image/pose shape consistency and
//! generated/source appearance consistency. Outputs are raw logits.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use ratenet_autograd::{Graph, PadMode, ParamSet, Scalar, Var};
use serde::{Deserialize, Serialize};

use crate::data::NUM_JOINTS;
use crate::error::{Error, Result};
use crate::nn::Conv2d;

/// Parameter namespace of the shape discriminator.
pub const SHAPE_NS: &str = "disc_shape/";
/// Parameter namespace of the appearance discriminator.
pub const APP_NS: &str = "disc_app/";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiscriminatorConfig {
    /// Stride-2 `4 x 4` conv stages before the score head.
    pub n_layers: usize,
    pub base_channels: usize,
    pub max_channels: usize,
    pub leaky_slope: f64,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self { n_layers: 4, base_channels: 32, max_channels: 128, leaky_slope: 0.2 }
    }
}

impl DiscriminatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.base_channels == 0 || self.max_channels < self.base_channels {
            return Err(Error::Config(
                "discriminator: need n_layers >= 1 and 1 <= base_channels <= max_channels".into(),
            ));
        }
        if !(self.leaky_slope.is_finite() && self.leaky_slope >= 0.0) {
            return Err(Error::Config("discriminator: leaky_slope must be finite and non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DiscKind {
    Shape,
    Appearance,
}

impl DiscKind {
    pub fn namespace(self) -> &'static str {
        match self {
            DiscKind::Shape => SHAPE_NS,
            DiscKind::Appearance => APP_NS,
        }
    }

    /// Channels of the conditioning input concatenated to the image.
    pub fn condition_channels(self) -> usize {
        match self {
            DiscKind::Shape => NUM_JOINTS,
            DiscKind::Appearance => 3,
        }
    }
}

#[derive(Clone, Debug)]
pub struct PatchDiscriminator {
    pub kind: DiscKind,
    pub layers: Vec<Conv2d>,
    pub head: Conv2d,
    slope: f64,
}

impl PatchDiscriminator {
    pub fn new(kind: DiscKind, cfg: &DiscriminatorConfig) -> Result<Self> {
        cfg.validate()?;
        let ns = kind.namespace();
        let mut prev = 3 + kind.condition_channels();
        let layers = (0..cfg.n_layers)
            .map(|i| {
                let c = (cfg.base_channels << i.min(20)).min(cfg.max_channels);
                let conv = Conv2d::strided(format!("{ns}conv/{i}"), prev, c, 4, 2, 1, PadMode::Zero);
                prev = c;
                conv
            })
            .collect();
        Ok(Self {
            kind,
            layers,
            head: Conv2d::same(format!("{ns}score"), prev, 1, 3, PadMode::Zero),
            slope: cfg.leaky_slope,
        })
    }

    pub fn init_params(&self, seed: u64) -> ParamSet<f32> {
        let mut ps = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for c in &self.layers {
            c.init(&mut ps, &mut rng, 1.0);
        }
        self.head.init(&mut ps, &mut rng, 1.0);
        ps
    }

    /// Logit map `B x 1 x H/2^n x W/2^n` for `image` conditioned on `cond`
    /// (target pose for the shape critic, source image for the appearance
    /// critic).
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, ps: &ParamSet<T>, image: Var, cond: Var) -> Result<Var> {
        let (b, c, h, w) = g.value(image).dims4()?;
        let want = [b, self.kind.condition_channels(), h, w];
        if c != 3 || g.shape(cond) != want {
            return Err(Error::Invalid(format!(
                "{:?} discriminator got image {:?} and condition {:?}, expected condition {want:?}",
                self.kind,
                g.shape(image),
                g.shape(cond)
            )));
        }
        let f = 1usize << self.layers.len();
        if h % f != 0 || w % f != 0 {
            return Err(Error::Invalid(format!("discriminator input {h}x{w} is not a multiple of {f}")));
        }
        let slope = T::from_f64_lossy(self.slope);
        let mut x = g.concat(&[image, cond], 1)?;
        for conv in &self.layers {
            x = conv.forward(g, ps, x)?;
            x = g.leaky_relu(x, slope);
        }
        self.head.forward(g, ps, x)
    }
}

/// Convenience: shape critic `D_S(image; pose)`.
pub fn score_shape<T: Scalar>(
    d: &PatchDiscriminator,
    g: &mut Graph<T>,
    ps: &ParamSet<T>,
    image: Var,
    pose: Var,
) -> Result<Var> {
    debug_assert_eq!(d.kind, DiscKind::Shape);
    d.forward(g, ps, image, pose)
}

/// Convenience: appearance critic `D_A(image; source)`.
pub fn score_appearance<T: Scalar>(
    d: &PatchDiscriminator,
    g: &mut Graph<T>,
    ps: &ParamSet<T>,
    image: Var,
    source: Var,
) -> Result<Var> {
    debug_assert_eq!(d.kind, DiscKind::Appearance);
    d.forward(g, ps, image, source)
}

#[cfg(test)]
mod tests {
    use rand::Rng;
    use ratenet_autograd::{Tensor, Trainable};

    use super::*;

    fn rand_t(shape: &[usize], seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    fn score(d: &PatchDiscriminator, ps: &ParamSet<f32>, img: &Tensor<f32>, cond: &Tensor<f32>) -> Tensor<f32> {
        let mut g = Graph::inference();
        let (a, b) = (g.constant(img.clone()), g.constant(cond.clone()));
        let s = d.forward(&mut g, ps, a, b).unwrap();
        g.value(s).clone()
    }

    #[test]
    fn score_map_shapes() {
        let cfg = DiscriminatorConfig::default();
        let ds = PatchDiscriminator::new(DiscKind::Shape, &cfg).unwrap();
        let da = PatchDiscriminator::new(DiscKind::Appearance, &cfg).unwrap();
        let img = rand_t(&[2, 3, 64, 64], 1);
        let s = score(&ds, &ds.init_params(0), &img, &rand_t(&[2, NUM_JOINTS, 64, 64], 2));
        let a = score(&da, &da.init_params(0), &img, &img);
        assert_eq!(s.shape(), &[2, 1, 4, 4]);
        assert_eq!(a.shape(), s.shape());
        assert!(s.all_finite() && a.all_finite());
    }

    #[test]
    fn zero_weights_give_zero_logits() {
        let d = PatchDiscriminator::new(DiscKind::Appearance, &DiscriminatorConfig::default()).unwrap();
        let mut ps = d.init_params(3);
        for (_, t) in ps.iter_mut() {
            t.data_mut().fill(0.0);
        }
        let img = rand_t(&[1, 3, 32, 32], 4);
        assert!(score(&d, &ps, &img, &img).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn batch_permutation_commutes() {
        let d = PatchDiscriminator::new(DiscKind::Shape, &DiscriminatorConfig::default()).unwrap();
        let ps = d.init_params(5);
        let img = rand_t(&[2, 3, 32, 32], 6);
        let pose = rand_t(&[2, NUM_JOINTS, 32, 32], 7);
        let swap = |t: &Tensor<f32>| {
            Tensor::cat_batch(&[&t.narrow_batch(1, 1).unwrap(), &t.narrow_batch(0, 1).unwrap()]).unwrap()
        };
        let s = score(&d, &ps, &img, &pose);
        let sw = score(&d, &ps, &swap(&img), &swap(&pose));
        assert_eq!(swap(&s), sw);
    }

    #[test]
    fn namespaces_are_disjoint_and_inputs_checked() {
        let cfg = DiscriminatorConfig::default();
        let ds = PatchDiscriminator::new(DiscKind::Shape, &cfg).unwrap();
        let da = PatchDiscriminator::new(DiscKind::Appearance, &cfg).unwrap();
        let (ps, pa) = (ds.init_params(0), da.init_params(0));
        assert!(ps.names().all(|n| n.starts_with(SHAPE_NS)));
        assert!(pa.names().all(|n| n.starts_with(APP_NS)));
        let img = rand_t(&[1, 3, 32, 32], 8);
        let mut g = Graph::inference();
        let (a, b) = (g.constant(img.clone()), g.constant(img));
        assert!(ds.forward(&mut g, &ps, a, b).is_err());
    }

    #[test]
    fn image_gradient_is_nonzero_and_matches_difference() {
        let d = PatchDiscriminator::new(DiscKind::Appearance, &DiscriminatorConfig::default()).unwrap();
        let ps = d.init_params(9).cast::<f64>();
        let img = rand_t(&[1, 3, 32, 32], 10).cast::<f64>();
        let src = rand_t(&[1, 3, 32, 32], 11).cast::<f64>();
        let run = |img: &Tensor<f64>, grad: bool| {
            let mut g = Graph::with_trainable(Trainable::Nothing);
            let a = g.input(img.clone(), grad);
            let b = g.constant(src.clone());
            let s = d.forward(&mut g, &ps, a, b).unwrap();
            let m = g.mean(s);
            let v = g.value(m).item();
            let gr = grad.then(|| g.backward(m).unwrap().wrt(a).unwrap().clone());
            (v, gr)
        };
        let (_, grad) = run(&img, true);
        let grad = grad.unwrap();
        assert!(grad.max_abs() > 0.0);
        let idx = (3 * 32 + 17) + 32 * 32;
        let h = 1e-5;
        let mut p = img.clone();
        p.data_mut()[idx] += h;
        let mut m = img.clone();
        m.data_mut()[idx] -= h;
        let numeric = (run(&p, false).0 - run(&m, false).0) / (2.0 * h);
        assert!((numeric - grad.data()[idx]).abs() <= 1e-6 * numeric.abs().max(1e-3));
    }
}
