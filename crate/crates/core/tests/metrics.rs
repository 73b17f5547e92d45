use petite_core::metrics::{nrmse, psnr, ssim, ssim3d, MetricReport};
use petite_core::{Error, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: [usize; 3], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random::<f64>())
}

fn loop_psnr(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for i in 0..a.len() {
        acc += (a[i] - b[i]).powi(2);
    }
    10.0 * (1.0 / (acc / a.len() as f64)).log10()
}

fn naive_ssim(a: &Tensor, b: &Tensor, w: usize) -> f64 {
    let s = a.shape();
    let (d, h, wd) = (s[0], s[1], s[2]);
    let at = |t: &Tensor, i: usize, j: usize, k: usize| t.data()[(i * h + j) * wd + k];
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut total = 0.0;
    let mut count = 0;
    for i in 0..=d - w {
        for j in 0..=h - w {
            for k in 0..=wd - w {
                let mut xs = Vec::new();
                let mut ys = Vec::new();
                for di in 0..w {
                    for dj in 0..w {
                        for dk in 0..w {
                            xs.push(at(a, i + di, j + dj, k + dk));
                            ys.push(at(b, i + di, j + dj, k + dk));
                        }
                    }
                }
                let n = xs.len() as f64;
                let mx = xs.iter().sum::<f64>() / n;
                let my = ys.iter().sum::<f64>() / n;
                let vx = xs.iter().map(|v| (v - mx).powi(2)).sum::<f64>() / n;
                let vy = ys.iter().map(|v| (v - my).powi(2)).sum::<f64>() / n;
                let cov = xs
                    .iter()
                    .zip(&ys)
                    .map(|(x, y)| (x - mx) * (y - my))
                    .sum::<f64>()
                    / n;
                total += ((2.0 * mx * my + c1) * (2.0 * cov + c2))
                    / ((mx * mx + my * my + c1) * (vx + vy + c2));
                count += 1;
            }
        }
    }
    total / count as f64
}

#[test]
fn psnr_offset_case() {
    let gt = random([8, 8, 8], 1).map(|v| v * 0.5);
    let pred = gt.map(|v| v + 0.1);
    assert!((psnr(&pred, &gt, 1.0).unwrap() - 20.0).abs() < 1e-9);
    assert_eq!(psnr(&gt, &gt, 1.0).unwrap(), f64::INFINITY);
}

#[test]
fn psnr_matches_loop() {
    let (a, b) = (random([9, 8, 7], 2), random([9, 8, 7], 3));
    assert!((psnr(&a, &b, 1.0).unwrap() - loop_psnr(a.data(), b.data())).abs() < 1e-12);
}

#[test]
fn psnr_decreases_with_noise() {
    let gt = random([10, 10, 10], 4);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let noise: Vec<f64> = (0..1000).map(|_| rng.random_range(-1.0..1.0)).collect();
    let values: Vec<f64> = [0.01, 0.02, 0.05]
        .iter()
        .map(|amp| {
            let pred = Tensor::from_fn([10, 10, 10], |i| gt.data()[i] + amp * noise[i]);
            psnr(&pred, &gt, 1.0).unwrap()
        })
        .collect();
    assert!(values[0] > values[1] && values[1] > values[2]);
}

#[test]
fn ssim_identical_and_constant_cases() {
    let a = random([9, 9, 9], 6);
    assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);

    let (ca, cb) = (0.3, 0.7);
    let x = Tensor::full([8, 8, 8], ca);
    let y = Tensor::full([8, 8, 8], cb);
    let c1 = 0.01f64.powi(2);
    let closed = (2.0 * ca * cb + c1) / (ca * ca + cb * cb + c1);
    assert!((ssim(&x, &y).unwrap() - closed).abs() < 1e-9);
}

#[test]
fn ssim_matches_naive_windows_and_is_symmetric() {
    let (a, b) = (random([10, 9, 8], 7), random([10, 9, 8], 8));
    let fast = ssim(&a, &b).unwrap();
    assert!((fast - naive_ssim(&a, &b, 7)).abs() < 1e-9);
    assert!((fast - ssim(&b, &a).unwrap()).abs() < 1e-12);
    let small = ssim3d(&a, &b, 3, 1.0).unwrap();
    assert!((small - naive_ssim(&a, &b, 3)).abs() < 1e-9);
}

#[test]
fn ssim_rejects_small_volumes() {
    let a = random([6, 8, 8], 9);
    assert!(matches!(ssim(&a, &a), Err(Error::Shape(_))));
}

#[test]
fn nrmse_cases() {
    let gt = Tensor::from_fn([4, 4, 4], |i| (i % 2) as f64);
    let pred = gt.map(|v| v + 0.1);
    assert!((nrmse(&pred, &gt).unwrap() - 0.1).abs() < 1e-12);
    assert_eq!(nrmse(&gt, &gt).unwrap(), 0.0);
    let flat = Tensor::full([4, 4, 4], 0.5);
    assert!(matches!(nrmse(&pred, &flat), Err(Error::DegenerateRange)));

    // Normalized by the ground-truth range, so swapping arguments changes it.
    let (a, b) = (
        random([5, 5, 5], 10),
        random([5, 5, 5], 11).map(|v| v * 0.5),
    );
    let n = a.numel() as f64;
    let rmse = (a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        / n)
        .sqrt();
    let range = |t: &Tensor| {
        t.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max)
            - t.data().iter().cloned().fold(f64::INFINITY, f64::min)
    };
    assert!((nrmse(&a, &b).unwrap() - rmse / range(&b)).abs() < 1e-12);
    assert!((nrmse(&a, &b).unwrap() - nrmse(&b, &a).unwrap()).abs() > 1e-6);
}

#[test]
fn report_over_identical_pairs() {
    let a = random([8, 8, 8], 12);
    let r = MetricReport::from_pairs([(&a, &a), (&a, &a)]).unwrap();
    assert_eq!(r.n_samples, 2);
    assert_eq!(r.psnr, f64::INFINITY);
    assert!((r.ssim - 1.0).abs() < 1e-12);
    assert_eq!(r.nrmse, 0.0);
    let json = serde_json::to_string(&r).unwrap();
    assert!(json.contains("\"psnr\":\"inf\""));
    let back: MetricReport = serde_json::from_str(&json).unwrap();
    assert_eq!(back, r);
    assert!(matches!(
        MetricReport::from_pairs(std::iter::empty()),
        Err(Error::EmptyDataset)
    ));
}

#[test]
fn shape_mismatch_is_an_error() {
    let (a, b) = (random([8, 8, 8], 1), random([8, 8, 7], 2));
    assert!(matches!(psnr(&a, &b, 1.0), Err(Error::Shape(_))));
    assert!(matches!(nrmse(&a, &b), Err(Error::Shape(_))));
}

mod properties {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn psnr_matches_loop_oracle(seed in 0u64..1000, offset in 0.001f64..0.5) {
            let gt = random([7, 8, 9], seed);
            let pred = random([7, 8, 9], seed + 1).map(|v| v * offset);
            let pred = Tensor::from_fn([7, 8, 9], |i| gt.data()[i] + pred.data()[i]);
            let fast = psnr(&pred, &gt, 1.0).unwrap();
            let slow = loop_psnr(pred.data(), gt.data());
            prop_assert!((fast - slow).abs() < 1e-9);
        }

        #[test]
        fn ssim_is_symmetric_and_bounded(seed in 0u64..1000) {
            let a = random([8, 8, 8], seed);
            let b = random([8, 8, 8], seed + 7);
            let ab = ssim(&a, &b).unwrap();
            let ba = ssim(&b, &a).unwrap();
            prop_assert!((ab - ba).abs() < 1e-12);
            prop_assert!((-1.0..=1.0).contains(&ab));
        }

        #[test]
        fn nrmse_scales_with_error(seed in 0u64..1000, k in 0.1f64..4.0) {
            let gt = random([6, 6, 6], seed).map(|v| v + 0.5);
            let noise = random([6, 6, 6], seed + 3).map(|v| v - 0.5);
            let at = |s: f64| Tensor::from_fn([6, 6, 6], |i| gt.data()[i] + s * noise.data()[i]);
            let base = nrmse(&at(0.01), &gt).unwrap();
            let scaled = nrmse(&at(0.01 * k), &gt).unwrap();
            prop_assert!((scaled / base - k).abs() < 1e-9);
        }
    }
}
