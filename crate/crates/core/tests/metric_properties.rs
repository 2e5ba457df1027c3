use nalgebra::DMatrix;
use proptest::prelude::*;
use ratenet::autograd::Tensor;
use ratenet::losses::FeatureExtractor;
use ratenet::metrics::{fid, inception_score, lpips_distance, lpips_from_features, ssim, DEFAULT_SPLITS};

fn image(vals: &[f64]) -> Tensor<f64> {
    Tensor::from_vec(&[3, 12, 12], vals.to_vec()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn ssim_symmetric_and_bounded(
        a in prop::collection::vec(-1.0f64..1.0, 432),
        b in prop::collection::vec(-1.0f64..1.0, 432),
    ) {
        let (x, y) = (image(&a), image(&b));
        let s = ssim(&x, &y).unwrap();
        prop_assert!((s - ssim(&y, &x).unwrap()).abs() < 1e-7);
        prop_assert!((-1.0..=1.0).contains(&s));
    }

    #[test]
    fn inception_score_within_class_count(rows in prop::collection::vec(prop::collection::vec(0.01f64..1.0, 5), 1..30)) {
        let n = rows.len();
        let m = DMatrix::from_fn(n, 5, |i, j| rows[i][j] / rows[i].iter().sum::<f64>());
        let (is, _) = inception_score(&m, DEFAULT_SPLITS).unwrap();
        prop_assert!((1.0 - 1e-9..=5.0 + 1e-9).contains(&is), "{is}");
    }

    #[test]
    fn fid_nonnegative_and_symmetric(
        a in prop::collection::vec(-3.0f64..3.0, 24),
        b in prop::collection::vec(-3.0f64..3.0, 30),
    ) {
        let (fa, fb) = (DMatrix::from_row_slice(8, 3, &a), DMatrix::from_row_slice(10, 3, &b));
        let ab = fid(&fa, &fb).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - fid(&fb, &fa).unwrap()).abs() < 1e-6);
    }
}

#[test]
fn lpips_zero_on_self_and_symmetric() {
    let fx = FeatureExtractor::surrogate(9);
    let a = Tensor::from_fn(&[2, 3, 16, 16], |i| ((i * 37 % 101) as f32 / 50.0) - 1.0);
    let b = Tensor::from_fn(&[2, 3, 16, 16], |i| ((i * 53 % 97) as f32 / 48.0) - 1.0);
    assert!(lpips_distance(&fx, &a, &a, None).unwrap().iter().all(|d| d.abs() < 1e-12));
    let ab = lpips_distance(&fx, &a, &b, None).unwrap();
    let ba = lpips_distance(&fx, &b, &a, None).unwrap();
    for (x, y) in ab.iter().zip(&ba) {
        assert!((x - y).abs() < 1e-7);
    }
}

#[test]
fn lpips_matches_per_position_loop() {
    let mut seed = 7u64;
    let mut next = || {
        seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        (seed >> 11) as f64 / (1u64 << 53) as f64 - 0.5
    };
    let shapes = [[2, 4, 3, 5], [2, 6, 2, 2]];
    let fa: Vec<Tensor<f64>> = shapes.iter().map(|s| Tensor::from_fn(s, |_| next())).collect();
    let fb: Vec<Tensor<f64>> = shapes.iter().map(|s| Tensor::from_fn(s, |_| next())).collect();
    let weights: Vec<Vec<f64>> = shapes.iter().map(|s| (0..s[1]).map(|_| next() + 1.0).collect()).collect();
    let got = lpips_from_features(&fa, &fb, Some(&weights)).unwrap();

    for n in 0..2 {
        let mut want = 0.0;
        for (l, s) in shapes.iter().enumerate() {
            let (c, hw) = (s[1], s[2] * s[3]);
            let mut acc = 0.0;
            for p in 0..hw {
                let col = |t: &Tensor<f64>| -> Vec<f64> { (0..c).map(|ch| t.data()[(n * c + ch) * hw + p]).collect() };
                let (va, vb) = (col(&fa[l]), col(&fb[l]));
                let na = va.iter().map(|v| v * v).sum::<f64>().sqrt() + 1e-10;
                let nb = vb.iter().map(|v| v * v).sum::<f64>().sqrt() + 1e-10;
                for ch in 0..c {
                    acc += weights[l][ch] * (va[ch] / na - vb[ch] / nb).powi(2);
                }
            }
            want += acc / hw as f64;
        }
        assert!((got[n] - want).abs() < 1e-6, "{} vs {want}", got[n]);
    }
}
