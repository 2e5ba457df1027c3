//! Reconstruction, perceptual, style and adversarial objectives, and the
//! two composite generator losses.
//!
//! Every function records onto a [`Graph`], so the same code yields values
//! and gradients in `f32` or `f64`.

mod features;

use ratenet_autograd::{Graph, Scalar, Var};
use serde::{Deserialize, Serialize};

pub use features::{ExtractorSpec, FeatureExtractor, Provenance, SURROGATE_SEED};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_recon: f64,
    pub lambda_per: f64,
    pub lambda_sty: f64,
    pub lambda_gan: f64,
    /// One weight per extractor tap.
    pub layer_weights: Vec<f64>,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_recon: 10.0, lambda_per: 5.0, lambda_sty: 5.0, lambda_gan: 5.0, layer_weights: vec![0.25; 4] }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_recon, self.lambda_per, self.lambda_sty, self.lambda_gan];
        if all.iter().chain(&self.layer_weights).any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config("loss weights must be finite and non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub weights: LossWeights,
    pub extractor: ExtractorSpec,
}

fn same_shape<T: Scalar>(g: &Graph<T>, a: Var, b: Var, what: &str) -> Result<()> {
    if g.shape(a) != g.shape(b) {
        return Err(Error::Invalid(format!(
            "{what}: prediction {:?} and target {:?} differ in shape",
            g.shape(a),
            g.shape(b)
        )));
    }
    Ok(())
}

fn mean_abs_diff<T: Scalar>(g: &mut Graph<T>, a: Var, b: Var) -> Result<Var> {
    let d = g.sub(a, b)?;
    let d = g.abs(d);
    Ok(g.mean(d))
}

/// Mean absolute difference over all elements.
pub fn recon_l1<T: Scalar>(g: &mut Graph<T>, pred: Var, target: Var) -> Result<Var> {
    same_shape(g, pred, target, "reconstruction loss")?;
    mean_abs_diff(g, pred, target)
}

fn check_layer_weights(fx: &FeatureExtractor, w: &[f64]) -> Result<()> {
    if w.len() != fx.n_taps() {
        return Err(Error::Invalid(format!(
            "{} layer weights for an extractor with {} taps",
            w.len(),
            fx.n_taps()
        )));
    }
    Ok(())
}

/// `sum_l w_l * mean |phi_l(pred) - phi_l(target)|`, each layer normalised
/// by its own size.
pub fn perceptual<T: Scalar>(
    g: &mut Graph<T>,
    fx: &FeatureExtractor,
    pred: Var,
    target: Var,
    layer_weights: &[f64],
) -> Result<Var> {
    same_shape(g, pred, target, "perceptual loss")?;
    check_layer_weights(fx, layer_weights)?;
    let fp = fx.features(g, pred)?;
    let ft = fx.features(g, target)?;
    perceptual_from_features(g, &fp, &ft, layer_weights)
}

/// [`perceptual`] on precomputed taps.
pub fn perceptual_from_features<T: Scalar>(g: &mut Graph<T>, fp: &[Var], ft: &[Var], w: &[f64]) -> Result<Var> {
    let mut total: Option<Var> = None;
    for ((&a, &b), &wl) in fp.iter().zip(ft).zip(w) {
        let m = mean_abs_diff(g, a, b)?;
        let m = g.scale(m, T::from_f64_lossy(wl));
        total = Some(match total {
            Some(t) => g.add(t, m)?,
            None => m,
        });
    }
    total.ok_or_else(|| Error::Invalid("perceptual loss needs at least one layer".into()))
}

/// Per-sample Gram matrices `B x C x C`, normalised by `C H W`.
pub fn gram<T: Scalar>(g: &mut Graph<T>, features: Var) -> Result<Var> {
    Ok(g.gram(features)?)
}

/// Squared Frobenius distance of Gram matrices, summed over taps and
/// averaged over the batch.
pub fn style<T: Scalar>(g: &mut Graph<T>, fx: &FeatureExtractor, pred: Var, target: Var) -> Result<Var> {
    same_shape(g, pred, target, "style loss")?;
    let fp = fx.features(g, pred)?;
    let ft = fx.features(g, target)?;
    style_from_features(g, &fp, &ft)
}

pub fn style_from_features<T: Scalar>(g: &mut Graph<T>, fp: &[Var], ft: &[Var]) -> Result<Var> {
    let b = *g.shape(fp[0]).first().ok_or_else(|| Error::Invalid("empty feature list".into()))?;
    let mut total: Option<Var> = None;
    for (&a, &t) in fp.iter().zip(ft) {
        let ga = g.gram(a)?;
        let gt = g.gram(t)?;
        let d = g.sub(ga, gt)?;
        let d = g.square(d);
        let s = g.sum(d);
        total = Some(match total {
            Some(acc) => g.add(acc, s)?,
            None => s,
        });
    }
    let total = total.ok_or_else(|| Error::Invalid("style loss needs at least one layer".into()))?;
    Ok(g.scale(total, T::one() / T::from_usize(b).unwrap()))
}

/// Generator adversarial term: BCE of fake logits against "real".
pub fn gan_g<T: Scalar>(g: &mut Graph<T>, fake_logits: Var) -> Var {
    g.bce_with_logits(fake_logits, T::one())
}

/// Discriminator term: mean of BCE(real, 1) and BCE(fake, 0).
pub fn gan_d<T: Scalar>(g: &mut Graph<T>, real_logits: Var, fake_logits: Var) -> Result<Var> {
    let r = g.bce_with_logits(real_logits, T::one());
    let f = g.bce_with_logits(fake_logits, T::zero());
    let s = g.add(r, f)?;
    Ok(g.scale(s, T::from_f64_lossy(0.5)))
}

/// Weighted total plus the unweighted components that went into it.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub recon: Var,
    pub per: Var,
    pub sty: Option<Var>,
    pub gan: Option<Var>,
}

impl LossTerms {
    /// `(name, value)` pairs for logging.
    pub fn values<T: Scalar>(&self, g: &Graph<T>) -> Vec<(&'static str, f64)> {
        let mut v = vec![
            ("total", g.value(self.total).item().to_f64_lossy()),
            ("recon", g.value(self.recon).item().to_f64_lossy()),
            ("per", g.value(self.per).item().to_f64_lossy()),
        ];
        if let Some(s) = self.sty {
            v.push(("sty", g.value(s).item().to_f64_lossy()));
        }
        if let Some(a) = self.gan {
            v.push(("gan", g.value(a).item().to_f64_lossy()));
        }
        v
    }
}

fn weighted_sum<T: Scalar>(g: &mut Graph<T>, terms: &[(f64, Var)]) -> Result<Var> {
    let mut total: Option<Var> = None;
    for &(w, v) in terms {
        let s = g.scale(v, T::from_f64_lossy(w));
        total = Some(match total {
            Some(t) => g.add(t, s)?,
            None => s,
        });
    }
    total.ok_or_else(|| Error::Invalid("empty loss".into()))
}

/// Coarse objective `lambda_recon * recon + lambda_per * per`; no adversarial term.
pub fn loss_l1<T: Scalar>(
    g: &mut Graph<T>,
    fx: &FeatureExtractor,
    weights: &LossWeights,
    pred_coarse: Var,
    target: Var,
) -> Result<LossTerms> {
    let recon = recon_l1(g, pred_coarse, target)?;
    let per = perceptual(g, fx, pred_coarse, target, &weights.layer_weights)?;
    let total = weighted_sum(g, &[(weights.lambda_recon, recon), (weights.lambda_per, per)])?;
    Ok(LossTerms { total, recon, per, sty: None, gan: None })
}

/// Texture-aware objective on the composed image. The adversarial term is
/// the sum of both discriminators' generator losses.
pub fn loss_l2<T: Scalar>(
    g: &mut Graph<T>,
    fx: &FeatureExtractor,
    weights: &LossWeights,
    pred_final: Var,
    target: Var,
    fake_shape_logits: Var,
    fake_app_logits: Var,
) -> Result<LossTerms> {
    same_shape(g, pred_final, target, "texture-aware loss")?;
    check_layer_weights(fx, &weights.layer_weights)?;
    let recon = recon_l1(g, pred_final, target)?;
    let fp = fx.features(g, pred_final)?;
    let ft = fx.features(g, target)?;
    let per = perceptual_from_features(g, &fp, &ft, &weights.layer_weights)?;
    let sty = style_from_features(g, &fp, &ft)?;
    let gs = gan_g(g, fake_shape_logits);
    let ga = gan_g(g, fake_app_logits);
    let gan = g.add(gs, ga)?;
    let total = weighted_sum(
        g,
        &[
            (weights.lambda_recon, recon),
            (weights.lambda_per, per),
            (weights.lambda_sty, sty),
            (weights.lambda_gan, gan),
        ],
    )?;
    Ok(LossTerms { total, recon, per, sty: Some(sty), gan: Some(gan) })
}
