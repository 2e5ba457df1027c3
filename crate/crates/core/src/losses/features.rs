use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use ratenet_autograd::{Graph, PadMode, ParamSet, Scalar, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::checkpoint::read_params;
use crate::error::{Error, Result};
use crate::nn::Conv2d;

/// Where an extractor's weights came from. Reported next to every metric
/// so numbers from the surrogate are never mistaken for canonical ones.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    PretrainedVgg19,
    FixedSeedSurrogate,
    Identity,
}

impl std::fmt::Display for Provenance {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Provenance::PretrainedVgg19 => "pretrained-vgg19",
            Provenance::FixedSeedSurrogate => "fixed-seed-surrogate",
            Provenance::Identity => "identity",
        })
    }
}

/// Selects an extractor in run configs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ExtractorSpec {
    Surrogate { seed: u64 },
    Identity,
    Vgg19 { weights: PathBuf },
}

impl Default for ExtractorSpec {
    fn default() -> Self {
        ExtractorSpec::Surrogate { seed: SURROGATE_SEED }
    }
}

impl ExtractorSpec {
    pub fn build(&self) -> Result<FeatureExtractor> {
        match self {
            ExtractorSpec::Surrogate { seed } => Ok(FeatureExtractor::surrogate(*seed)),
            ExtractorSpec::Identity => Ok(FeatureExtractor::identity()),
            ExtractorSpec::Vgg19 { weights } => FeatureExtractor::vgg19(weights),
        }
    }
}

pub const SURROGATE_SEED: u64 = 0x5eed_f00d;

/// Tap widths of the surrogate network.
const SURROGATE_WIDTHS: [usize; 4] = [16, 32, 64, 64];

/// VGG-19 conv widths up to `relu4_4`, grouped by stage.
const VGG19_STAGES: [(usize, usize); 4] = [(64, 2), (128, 2), (256, 4), (512, 4)];
const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

/// Frozen convolutional feature pyramid.
///
/// Stage `s > 0` starts with a 2x average pool; each conv is followed by
/// ReLU and the last activation of every stage is a tap. Weights enter
/// graphs as constants, so no gradient ever reaches them.
#[derive(Clone, Debug)]
pub struct FeatureExtractor {
    provenance: Provenance,
    stages: Vec<Vec<Conv2d>>,
    /// Optional fixed `1 x 1` conv applied before the first stage.
    input_map: Option<Conv2d>,
    params: ParamSet<f32>,
}

impl FeatureExtractor {
    /// One tap that returns the image itself.
    pub fn identity() -> Self {
        Self { provenance: Provenance::Identity, stages: vec![Vec::new()], input_map: None, params: ParamSet::new() }
    }

    /// Four-stage random conv net with orthogonal weights drawn from `seed`.
    pub fn surrogate(seed: u64) -> Self {
        let mut prev = 3;
        let stages: Vec<Vec<Conv2d>> = SURROGATE_WIDTHS
            .iter()
            .enumerate()
            .map(|(s, &c)| {
                let conv = Conv2d::same(format!("fx/{s}"), prev, c, 3, PadMode::Zero);
                prev = c;
                vec![conv]
            })
            .collect();
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for conv in stages.iter().flatten() {
            conv.init(&mut params, &mut rng, 2f64.sqrt());
        }
        Self { provenance: Provenance::FixedSeedSurrogate, stages, input_map: None, params }
    }

    /// Layer layout of VGG-19 through `relu4_4`, tapping `relu1_2`,
    /// `relu2_2`, `relu3_4` and `relu4_4`. Expected parameter names are
    /// `vgg19/conv{s}_{i}.weight|bias` (1-based, as in the usual export).
    pub fn vgg19_layout() -> Vec<Vec<Conv2d>> {
        let mut prev = 3;
        VGG19_STAGES
            .iter()
            .enumerate()
            .map(|(s, &(c, n))| {
                (0..n)
                    .map(|i| {
                        let conv = Conv2d::same(format!("vgg19/conv{}_{}", s + 1, i + 1), prev, c, 3, PadMode::Zero);
                        prev = c;
                        conv
                    })
                    .collect()
            })
            .collect()
    }

    /// Loads pretrained VGG-19 weights from a parameter file.
    pub fn vgg19(path: &Path) -> Result<Self> {
        let mut params = read_params(path)?;
        let stages = Self::vgg19_layout();
        for conv in stages.iter().flatten() {
            let w = params
                .get(&conv.weight_name())
                .ok_or_else(|| Error::Checkpoint(format!("{}: missing {}", path.display(), conv.weight_name())))?;
            if w.shape() != [conv.c_out, conv.c_in, 3, 3] {
                return Err(Error::Checkpoint(format!(
                    "{}: {} has shape {:?}",
                    path.display(),
                    conv.weight_name(),
                    w.shape()
                )));
            }
            if !params.contains(&conv.bias_name()) {
                return Err(Error::Checkpoint(format!("{}: missing {}", path.display(), conv.bias_name())));
            }
        }
        // [-1, 1] -> ImageNet-normalised RGB as a diagonal 1 x 1 conv.
        let input_map = Conv2d::same("vgg19/input", 3, 3, 1, PadMode::Zero);
        let mut w = vec![0.0f32; 9];
        let mut b = vec![0.0f32; 3];
        for c in 0..3 {
            w[c * 3 + c] = (0.5 / IMAGENET_STD[c]) as f32;
            b[c] = ((0.5 - IMAGENET_MEAN[c]) / IMAGENET_STD[c]) as f32;
        }
        params.insert(input_map.weight_name(), Tensor::from_vec(&[3, 3, 1, 1], w)?);
        params.insert(input_map.bias_name(), Tensor::from_vec(&[3], b)?);
        Ok(Self { provenance: Provenance::PretrainedVgg19, stages, input_map: Some(input_map), params })
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn n_taps(&self) -> usize {
        self.stages.len()
    }

    /// Channel count of every tap.
    pub fn tap_channels(&self) -> Vec<usize> {
        let mut c = 3;
        self.stages
            .iter()
            .map(|s| {
                if let Some(last) = s.last() {
                    c = last.c_out;
                }
                c
            })
            .collect()
    }

    pub fn params(&self) -> &ParamSet<f32> {
        &self.params
    }

    fn conv<T: Scalar>(&self, g: &mut Graph<T>, conv: &Conv2d, x: Var) -> Result<Var> {
        let w = g.constant(self.params.require(&conv.weight_name())?.cast());
        let b = g.constant(self.params.require(&conv.bias_name())?.cast());
        Ok(g.conv2d(x, w, Some(b), conv.stride, conv.pad, conv.pad_mode)?)
    }

    /// Tapped feature maps of `image` (`B x 3 x H x W`).
    pub fn features<T: Scalar>(&self, g: &mut Graph<T>, image: Var) -> Result<Vec<Var>> {
        let (_, c, h, w) = g.value(image).dims4()?;
        let need = 1usize << self.stages.len().saturating_sub(1);
        if c != 3 || h % need != 0 || w % need != 0 {
            return Err(Error::Invalid(format!(
                "feature extractor needs 3 channels and sides divisible by {need}, got {:?}",
                g.shape(image)
            )));
        }
        let mut x = image;
        if let Some(m) = &self.input_map {
            x = self.conv(g, m, x)?;
        }
        let mut taps = Vec::with_capacity(self.stages.len());
        for (s, stage) in self.stages.iter().enumerate() {
            if s > 0 {
                x = g.avg_pool2(x)?;
            }
            for conv in stage {
                x = self.conv(g, conv, x)?;
                x = g.relu(x);
            }
            taps.push(x);
        }
        Ok(taps)
    }

    /// Eager version of [`Self::features`].
    pub fn features_tensor<T: Scalar>(&self, image: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let mut g = Graph::inference();
        let x = g.constant(image.clone());
        let taps = self.features(&mut g, x)?;
        Ok(taps.into_iter().map(|v| g.value(v).clone()).collect())
    }
}

#[cfg(test)]
mod tests {
    use rand::Rng;

    use super::*;
    use crate::checkpoint::write_params;

    #[test]
    fn surrogate_is_deterministic_with_four_taps() {
        let a = FeatureExtractor::surrogate(1);
        let b = FeatureExtractor::surrogate(1);
        assert_eq!(a.params(), b.params());
        assert_ne!(a.params(), FeatureExtractor::surrogate(2).params());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let img = Tensor::<f32>::from_fn(&[2, 3, 16, 16], |_| rng.random_range(-1.0..1.0));
        let fa = a.features_tensor(&img).unwrap();
        assert_eq!(fa, b.features_tensor(&img).unwrap());
        let shapes: Vec<_> = fa.iter().map(|t| t.shape().to_vec()).collect();
        assert_eq!(shapes, vec![vec![2, 16, 16, 16], vec![2, 32, 8, 8], vec![2, 64, 4, 4], vec![2, 64, 2, 2]]);
        assert_eq!(a.tap_channels(), vec![16, 32, 64, 64]);
        assert_eq!(a.provenance().to_string(), "fixed-seed-surrogate");
    }

    #[test]
    fn identity_returns_input() {
        let fx = FeatureExtractor::identity();
        let img = Tensor::<f64>::from_fn(&[1, 3, 4, 4], |i| i as f64 * 0.01);
        assert_eq!(fx.features_tensor(&img).unwrap(), vec![img]);
    }

    #[test]
    fn vgg19_loads_and_rejects_incomplete_files() {
        let dir = tempfile::tempdir().unwrap();
        let mut ps = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for conv in FeatureExtractor::vgg19_layout().iter().flatten() {
            conv.init(&mut ps, &mut rng, 1.0);
        }
        let path = dir.path().join("vgg.bin");
        write_params(&path, &ps).unwrap();
        let fx = FeatureExtractor::vgg19(&path).unwrap();
        assert_eq!(fx.provenance(), Provenance::PretrainedVgg19);
        assert_eq!(fx.tap_channels(), vec![64, 128, 256, 512]);
        let img = Tensor::<f32>::zeros(&[1, 3, 8, 8]);
        assert_eq!(fx.features_tensor(&img).unwrap()[3].shape(), &[1, 512, 1, 1]);

        let mut partial = ParamSet::new();
        for (n, t) in ps.iter().filter(|(n, _)| !n.starts_with("vgg19/conv4_4")) {
            partial.insert(n, t.clone());
        }
        write_params(&path, &partial).unwrap();
        assert!(FeatureExtractor::vgg19(&path).is_err());
    }

    #[test]
    fn extractor_choice_round_trips_through_json() {
        for s in [ExtractorSpec::default(), ExtractorSpec::Identity, ExtractorSpec::Vgg19 { weights: "w.bin".into() }] {
            let j = serde_json::to_string(&s).unwrap();
            assert_eq!(serde_json::from_str::<ExtractorSpec>(&j).unwrap(), s);
        }
        assert!(serde_json::from_str::<ExtractorSpec>(r#"{"kind":"surrogate","seed":1,"x":2}"#).is_err());
    }
}
