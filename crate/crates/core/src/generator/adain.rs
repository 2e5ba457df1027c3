use ratenet_autograd::{Graph, Scalar, Tensor, Var};

use crate::error::{Error, Result};
use crate::nn::IN_EPS;

/// Adaptive instance normalisation.
///
/// For every sample `b` and channel `c` the spatial map is normalised to
/// zero mean and unit variance (`eps = 1e-5` under the root), then scaled
/// by `gamma[b, c]` and shifted by `beta[b, c]`.
pub fn adain<T: Scalar>(g: &mut Graph<T>, x: Var, gamma: Var, beta: Var) -> Result<Var> {
    let c = *g.shape(x).get(1).ok_or_else(|| Error::Invalid("adain needs a B x C x H x W input".into()))?;
    for (what, v) in [("gamma", gamma), ("beta", beta)] {
        let s = g.shape(v);
        if s.len() != 2 || s[1] != c || s[0] != g.shape(x)[0] {
            return Err(Error::Invalid(format!(
                "adain {what} has shape {s:?}, expected [{}, {c}]",
                g.shape(x)[0]
            )));
        }
    }
    let n = g.instance_norm(x, T::from_f64_lossy(IN_EPS))?;
    Ok(g.channel_affine(n, gamma, beta)?)
}

/// Eager [`adain`] on plain tensors; `gamma`/`beta` may be `C` (shared by
/// the batch) or `B x C`.
pub fn adain_tensor<T: Scalar>(x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, c, _, _) = x.dims4()?;
    let widen = |t: &Tensor<T>, what: &str| -> Result<Tensor<T>> {
        match t.shape() {
            [n] if *n == c => {
                let data: Vec<T> = (0..b).flat_map(|_| t.data().iter().copied()).collect();
                Ok(Tensor::from_vec(&[b, c], data)?)
            }
            [bb, n] if *bb == b && *n == c => Ok(t.clone()),
            s => Err(Error::Invalid(format!("adain {what} has shape {s:?} for {c} channels"))),
        }
    };
    let (gm, bt) = (widen(gamma, "gamma")?, widen(beta, "beta")?);
    let mut g = Graph::inference();
    let xv = g.constant(x.clone());
    let gv = g.constant(gm);
    let bv = g.constant(bt);
    let y = adain(&mut g, xv, gv, bv)?;
    Ok(g.value(y).clone())
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn stats(t: &Tensor<f64>, plane: usize) -> Vec<(f64, f64)> {
        t.data()
            .chunks(plane)
            .map(|p| {
                let m = p.iter().sum::<f64>() / plane as f64;
                let v = p.iter().map(|x| (x - m).powi(2)).sum::<f64>() / plane as f64;
                (m, v.sqrt())
            })
            .collect()
    }

    fn random(rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(&[2, 3, 5, 5], |_| rng.random_range(-2.0..3.0))
    }

    #[test]
    fn unit_gamma_zero_beta_normalises() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let y = adain_tensor(&random(&mut rng), &Tensor::full(&[3], 1.0), &Tensor::zeros(&[3])).unwrap();
        for (m, s) in stats(&y, 25) {
            assert!(m.abs() < 1e-5);
            assert!((s - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn zero_gamma_gives_constant_beta() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let y = adain_tensor(&random(&mut rng), &Tensor::zeros(&[3]), &Tensor::full(&[3], 0.7)).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.7));
    }

    #[test]
    fn statistics_follow_gamma_beta() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let y = adain_tensor(&random(&mut rng), &Tensor::full(&[3], 2.5), &Tensor::full(&[3], -1.0)).unwrap();
        for (m, s) in stats(&y, 25) {
            assert!((m + 1.0).abs() < 1e-6);
            assert!((s - 2.5).abs() < 1e-3);
        }
    }

    #[test]
    fn channel_mismatch_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        assert!(adain_tensor(&random(&mut rng), &Tensor::zeros(&[4]), &Tensor::zeros(&[4])).is_err());
    }
}
