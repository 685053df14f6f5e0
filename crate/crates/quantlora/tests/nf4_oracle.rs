use std::time::Instant;

use medrag_quantlora::nf4::{dequantize_slice, quantize_slice, Absmax, QuantOptions};
use medrag_quantlora::{dequantize_nf4, nf4_codebook, quantize_nf4};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use statrs::distribution::{ContinuousCDF, Normal};

/// Rebuilds the NF4 levels from normal quantiles: 8 positive levels from
/// `linspace(offset, 0.5, 9)`, 7 negative ones from `linspace(offset, 0.5, 8)`,
/// plus an exact zero, scaled so the extremes are +-1.
fn quantile_levels() -> Vec<f64> {
    let offset = 0.9677083;
    let normal = Normal::new(0.0, 1.0).unwrap();
    let linspace = |n: usize| -> Vec<f64> {
        (0..n)
            .map(|i| offset + (0.5 - offset) * i as f64 / (n - 1) as f64)
            .collect()
    };
    let mut v: Vec<f64> = Vec::new();
    v.extend(linspace(9)[..8].iter().map(|&p| normal.inverse_cdf(p)));
    v.push(0.0);
    v.extend(linspace(8)[..7].iter().map(|&p| -normal.inverse_cdf(p)));
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let max = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    v.iter().map(|x| x / max).collect()
}

#[test]
fn codebook_matches_quantile_construction() {
    let oracle = quantile_levels();
    let book = nf4_codebook();
    assert_eq!(oracle.len(), 16);
    for (i, (&got, want)) in book.levels.iter().zip(&oracle).enumerate() {
        assert!(
            (got as f64 - want).abs() < 1e-6,
            "level {i}: codebook {got} vs quantile oracle {want}"
        );
    }
    assert_eq!(book.levels[0], -1.0);
    assert_eq!(book.levels[15], 1.0);
    assert_eq!(book.levels[7], 0.0);
}

/// Symmetric absmax 4-bit uniform quantizer over the same blocks: codes in
/// `[-7, 7]`, reconstruction `q * s / 7`.
fn uniform_int4_roundtrip(data: &[f32], block: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(data.len());
    for chunk in data.chunks(block) {
        let s = chunk.iter().fold(0.0f32, |m, x| m.max(x.abs()));
        for &w in chunk {
            if s == 0.0 {
                out.push(0.0);
            } else {
                let q = (w / s * 7.0).round().clamp(-7.0, 7.0);
                out.push(q * s / 7.0);
            }
        }
    }
    out
}

fn rmse(a: &[f32], b: &[f32]) -> f64 {
    let sum: f64 = a.iter().zip(b).map(|(x, y)| ((x - y) as f64).powi(2)).sum();
    (sum / a.len() as f64).sqrt()
}

fn gaussian(seed: u64, n: usize) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.sample::<f32, _>(StandardNormal)).collect()
}

fn plain(block_size: usize) -> QuantOptions {
    QuantOptions {
        block_size,
        double_quant: false,
        ..Default::default()
    }
}

#[test]
fn nf4_beats_uniform_int4_on_gaussian_data() {
    let start = Instant::now();
    for seed in 0..20u64 {
        let data = gaussian(seed, 4096);
        let q = quantize_slice(&data, 64, 64, plain(64)).unwrap();
        let nf4 = rmse(&data, &dequantize_slice(&q).unwrap());
        let int4 = rmse(&data, &uniform_int4_roundtrip(&data, 64));
        assert!(nf4 < int4, "seed {seed}: nf4 rmse {nf4} vs int4 {int4}");
    }
    assert!(start.elapsed().as_secs_f64() < 10.0);
}

#[test]
fn per_block_error_bound_holds() {
    let gap = nf4_codebook().max_gap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for trial in 0..50 {
        let rows = rng.random_range(1..40);
        let cols = rng.random_range(1..70);
        let block = [1, 3, 16, 64, 100][trial % 5];
        let scale: f32 = rng.random_range(0.01..100.0);
        let data: Vec<f32> = (0..rows * cols)
            .map(|_| rng.sample::<f32, _>(StandardNormal) * scale)
            .collect();
        let q = quantize_slice(&data, rows, cols, plain(block)).unwrap();
        let back = dequantize_slice(&q).unwrap();
        let scales = q.scales();
        for (i, (w, w_hat)) in data.iter().zip(&back).enumerate() {
            let s = scales[i / block];
            let bound = s * gap / 2.0 + s * f32::EPSILON * 4.0;
            assert!(
                (w - w_hat).abs() <= bound,
                "trial {trial} element {i}: |{w} - {w_hat}| > {bound}"
            );
        }
    }
}

#[test]
fn double_quant_differs_by_at_most_half_a_step() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for meta_block in [1usize, 4, 256] {
        let data: Vec<f32> = (0..64 * 600)
            .map(|_| rng.sample::<f32, _>(StandardNormal) * rng.random_range(0.1f32..3.0))
            .collect();
        let p = quantize_slice(&data, 600, 64, plain(64)).unwrap();
        let d = quantize_slice(
            &data,
            600,
            64,
            QuantOptions {
                block_size: 64,
                double_quant: true,
                meta_block,
            },
        )
        .unwrap();
        let Absmax::Double(dq) = &d.absmax else {
            panic!("expected double quantization")
        };
        let (wp, wd) = (dequantize_slice(&p).unwrap(), dequantize_slice(&d).unwrap());
        for (i, (a, b)) in wp.iter().zip(&wd).enumerate() {
            let step = dq.meta_scales[i / 64 / meta_block] / 127.0;
            assert!(
                (a - b).abs() <= step / 2.0 + step * 1e-4,
                "element {i}: {a} vs {b}, step {step}"
            );
        }
        assert!(d.storage_bytes() < p.storage_bytes() || meta_block == 1);
    }
}

#[test]
fn zero_matrix_roundtrips_exactly() {
    let w = DMatrix::<f32>::zeros(3, 64);
    for dq in [false, true] {
        let q = quantize_nf4(&w, 64, dq).unwrap();
        assert!((0..q.len()).all(|i| q.code(i) == nf4_codebook().zero_index()));
        assert_eq!(dequantize_nf4(&q).unwrap(), w);
    }
}
