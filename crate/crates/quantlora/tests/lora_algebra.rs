use medrag_quantlora::lora::lora_grads;
use medrag_quantlora::{lora_forward, merge_adapter, quantize_nf4, BaseWeight, LoraAdapter};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn randn(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.sample(StandardNormal))
}

fn rel(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm().max(1e-300)
}

#[test]
fn adapter_path_matches_merged_path() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x10a);
    for i in 0..100 {
        let d = rng.random_range(1..=64);
        let k = rng.random_range(1..=64);
        let r = rng.random_range(1..=8);
        let n = rng.random_range(1..=4);
        let alpha = rng.random_range(1.0..32.0);
        let adapter = LoraAdapter::new(randn(&mut rng, r, k), randn(&mut rng, d, r), alpha).unwrap();
        let bias = DVector::from_fn(d, |_, _| rng.sample(StandardNormal));
        let x = randn(&mut rng, k, n);
        // Every fourth instance uses a quantized base weight.
        let base = if i % 4 == 0 {
            let w = DMatrix::from_fn(d, k, |_, _| rng.sample::<f32, _>(StandardNormal));
            BaseWeight::Quantized(quantize_nf4(&w, 64, i % 8 == 0).unwrap())
        } else {
            BaseWeight::Dense(randn(&mut rng, d, k))
        };
        let y = lora_forward(&x, &base, Some(&bias), &adapter).unwrap();
        let mut merged = merge_adapter(&base, &adapter).unwrap() * &x;
        for mut col in merged.column_iter_mut() {
            col += &bias;
        }
        let e = rel(&y, &merged);
        assert!(e <= 1e-6, "instance {i} ({d}x{k}, r={r}): relative error {e}");
    }
}

#[test]
fn zero_b_is_exactly_inert() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let (d, k, r) = (
            rng.random_range(1..=32),
            rng.random_range(1..=32),
            rng.random_range(1..=8),
        );
        let w = randn(&mut rng, d, k);
        let x = randn(&mut rng, k, 3);
        let adapter = LoraAdapter::inert(randn(&mut rng, r, k), d, 16.0).unwrap();
        let base = BaseWeight::Dense(w.clone());
        assert_eq!(lora_forward(&x, &base, None, &adapter).unwrap(), &w * &x);
        assert_eq!(merge_adapter(&base, &adapter).unwrap(), w);
    }
}

#[test]
fn update_rank_is_bounded_by_r() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..30 {
        let (d, k, r) = (
            rng.random_range(9..=40),
            rng.random_range(9..=40),
            rng.random_range(1..=8),
        );
        let adapter = LoraAdapter::new(randn(&mut rng, r, k), randn(&mut rng, d, r), 16.0).unwrap();
        let zero = BaseWeight::Dense(DMatrix::zeros(d, k));
        let delta = merge_adapter(&zero, &adapter).unwrap();
        let rank = delta.rank(1e-9 * delta.norm());
        assert!(rank <= r, "rank {rank} exceeds r={r}");
        assert_eq!(rank, r);
    }
}

/// Central differences of `||forward(x)||^2 / 2`, one entry at a time.
fn numeric_grad(
    x: &DMatrix<f64>,
    w: &BaseWeight,
    bias: &DVector<f64>,
    adapter: &LoraAdapter,
    wrt_a: bool,
) -> DMatrix<f64> {
    let h = 1e-6;
    let target = if wrt_a { &adapter.a } else { &adapter.b };
    let mut g = DMatrix::zeros(target.nrows(), target.ncols());
    let loss = |ad: &LoraAdapter| lora_forward(x, w, Some(bias), ad).unwrap().norm_squared() / 2.0;
    for i in 0..target.nrows() {
        for j in 0..target.ncols() {
            let mut plus = adapter.clone();
            let mut minus = adapter.clone();
            let (p, m) = if wrt_a {
                (&mut plus.a, &mut minus.a)
            } else {
                (&mut plus.b, &mut minus.b)
            };
            p[(i, j)] += h;
            m[(i, j)] -= h;
            g[(i, j)] = (loss(&plus) - loss(&minus)) / (2.0 * h);
        }
    }
    g
}

#[test]
fn analytic_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for i in 0..20 {
        let (d, k, r, n) = (
            rng.random_range(1..=8),
            rng.random_range(1..=8),
            rng.random_range(1..=4),
            rng.random_range(1..=3),
        );
        let adapter = LoraAdapter::new(randn(&mut rng, r, k), randn(&mut rng, d, r), 8.0).unwrap();
        let w = BaseWeight::Dense(randn(&mut rng, d, k));
        let bias = DVector::from_fn(d, |_, _| rng.sample(StandardNormal));
        let x = randn(&mut rng, k, n);
        let g = lora_grads(&x, &w, Some(&bias), &adapter).unwrap();
        let fd_a = numeric_grad(&x, &w, &bias, &adapter, true);
        let fd_b = numeric_grad(&x, &w, &bias, &adapter, false);
        assert!(
            rel(&g.d_a, &fd_a) <= 1e-4,
            "instance {i}: dA relative error {}",
            rel(&g.d_a, &fd_a)
        );
        assert!(
            rel(&g.d_b, &fd_b) <= 1e-4,
            "instance {i}: dB relative error {}",
            rel(&g.d_b, &fd_b)
        );
    }
}
