use medrag_quantlora::efficiency::{bits_per_param, FractionCheck};
use medrag_quantlora::tensor_file::{self, Tensor};
use medrag_quantlora::{count_trainable, estimate_memory, quantize_nf4, Scheme};
use nalgebra::DMatrix;

#[test]
fn count_matches_hand_enumeration() {
    // q, k, v, o projections of a small block with grouped k/v heads.
    let layers = [(3072u64, 3072u64), (1024, 3072), (1024, 3072), (3072, 3072)];
    let mut hand = 0u64;
    for &(d, k) in &layers {
        for _ in 0..8 {
            hand += d + k;
        }
    }
    let got = count_trainable(&layers, 8, 1, 3_200_000_000).unwrap();
    assert_eq!(got.params, hand);
    assert_eq!(
        count_trainable(&layers, 8, 28, 3_200_000_000).unwrap().params,
        hand * 28
    );
    assert_eq!(count_trainable(&layers, 16, 28, 1).unwrap().params, hand * 56);
}

#[test]
fn stated_fraction_is_flagged() {
    let c = FractionCheck::new(2_400_000, 3_200_000_000, 0.0075).unwrap();
    assert!(!c.is_consistent(0.05));
    assert!((c.implied_fraction * 100.0 - 0.075).abs() < 1e-12);
}

#[test]
fn dq_memory_sits_just_above_half_a_gigabyte() {
    let e = estimate_memory(1_000_000_000, Scheme::Nf4Dq, 64, 256).unwrap();
    assert!((e.bits_per_param - 4.127).abs() < 5e-4);
    let gb = e.bytes / 1e9;
    assert!(gb >= 0.5 && (gb - 0.5) / 0.5 <= 0.05, "{gb} GB");
    let fp16 = estimate_memory(1_000_000_000, Scheme::Fp16, 64, 256).unwrap();
    assert_eq!(fp16.bytes, 2e9);
    assert_eq!(bits_per_param(Scheme::Nf4, 64, 256).unwrap(), 4.5);
}

#[test]
fn tensor_files_roundtrip_on_disk() {
    let dir = tempfile::tempdir().unwrap();
    let w = DMatrix::from_fn(5, 33, |i, j| ((i * 33 + j) as f32 * 0.11).cos());
    let dense = Tensor::Dense {
        rows: 5,
        cols: 33,
        data: w.transpose().as_slice().to_vec(),
    };
    let path = dir.path().join("w.bin");
    tensor_file::write(&path, &dense).unwrap();
    assert_eq!(tensor_file::read(&path).unwrap(), dense);

    let q = Tensor::Nf4(quantize_nf4(&w, 64, true).unwrap());
    let qpath = dir.path().join("w.nf4");
    tensor_file::write(&qpath, &q).unwrap();
    assert_eq!(tensor_file::read(&qpath).unwrap(), q);
    assert!(tensor_file::read(&dir.path().join("missing")).is_err());
}
