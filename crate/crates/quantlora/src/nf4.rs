//! 4-bit NormalFloat (NF4) blockwise quantization.
//!
//! Elements are grouped into row-major blocks. Each block stores its absmax
//! `s` and one 4-bit code per element: the index of the codebook level
//! nearest to `w / s`. With double quantization the block absmax values are
//! themselves stored as 8-bit integers against one `f32` scale per meta-block.

use nalgebra::DMatrix;
use thiserror::Error;

pub const DEFAULT_BLOCK_SIZE: usize = 64;
pub const DEFAULT_META_BLOCK: usize = 256;
const Q8_MAX: f32 = 127.0;

/// Normal-quantile levels, normalized to `[-1, 1]`, as published with the
/// reference 4-bit NormalFloat implementation.
#[allow(clippy::excessive_precision)]
const NF4_LEVELS: [f32; 16] = [
    -1.0,
    -0.696_192_800_998_687_7,
    -0.525_073_051_452_636_7,
    -0.394_917_488_098_144_53,
    -0.284_441_381_692_886_35,
    -0.184_773_430_228_233_34,
    -0.091_050_036_251_544_95,
    0.0,
    0.079_580_299_556_255_34,
    0.160_930_201_411_247_25,
    0.246_112_301_945_686_34,
    0.337_915_241_718_292_24,
    0.440_709_829_330_444_34,
    0.562_617_003_917_694_1,
    0.722_956_836_223_602_3,
    1.0,
];

#[derive(Debug, Error, PartialEq)]
pub enum QuantError {
    #[error("non-finite value at element {0}")]
    NonFinite(usize),
    #[error("block size and meta-block size must be at least 1")]
    InvalidBlockSize,
    #[error("corrupt quantized tensor: {0}")]
    Corrupt(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Nf4Codebook {
    pub levels: [f32; 16],
}

pub fn nf4_codebook() -> Nf4Codebook {
    Nf4Codebook { levels: NF4_LEVELS }
}

impl Nf4Codebook {
    pub fn zero_index(&self) -> u8 {
        self.levels
            .iter()
            .position(|&l| l == 0.0)
            .expect("codebook contains zero") as u8
    }

    /// Widest gap between adjacent levels.
    pub fn max_gap(&self) -> f32 {
        self.levels.windows(2).map(|w| w[1] - w[0]).fold(0.0, f32::max)
    }

    /// Index of the level nearest to `x`; exact ties go to the lower index.
    pub fn nearest(&self, x: f32) -> u8 {
        let mut best = 0usize;
        let mut best_d = (x - self.levels[0]).abs();
        for (i, &l) in self.levels.iter().enumerate().skip(1) {
            let d = (x - l).abs();
            if d < best_d {
                best = i;
                best_d = d;
            }
        }
        best as u8
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DoubleQuant {
    /// One 8-bit code per block: `round(s / meta_scale * 127)`.
    pub q8_codes: Vec<i8>,
    pub meta_block: usize,
    /// One absmax per meta-block of block scales.
    pub meta_scales: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Absmax {
    Plain(Vec<f32>),
    Double(DoubleQuant),
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    pub rows: usize,
    pub cols: usize,
    pub block_size: usize,
    /// Two codes per byte, element `2i` in the low nibble.
    pub codes: Vec<u8>,
    pub absmax: Absmax,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QuantOptions {
    pub block_size: usize,
    pub double_quant: bool,
    pub meta_block: usize,
}

impl Default for QuantOptions {
    fn default() -> Self {
        QuantOptions {
            block_size: DEFAULT_BLOCK_SIZE,
            double_quant: false,
            meta_block: DEFAULT_META_BLOCK,
        }
    }
}

impl QuantizedTensor {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn block_count(&self) -> usize {
        self.len().div_ceil(self.block_size)
    }

    pub fn code(&self, i: usize) -> u8 {
        let byte = self.codes[i / 2];
        if i.is_multiple_of(2) {
            byte & 0x0f
        } else {
            byte >> 4
        }
    }

    /// Block scales as used by dequantization.
    pub fn scales(&self) -> Vec<f32> {
        match &self.absmax {
            Absmax::Plain(s) => s.clone(),
            Absmax::Double(dq) => dq
                .q8_codes
                .iter()
                .enumerate()
                .map(|(b, &q)| q as f32 / Q8_MAX * dq.meta_scales[b / dq.meta_block])
                .collect(),
        }
    }

    /// Bytes of codes plus scale storage.
    pub fn storage_bytes(&self) -> usize {
        self.codes.len()
            + match &self.absmax {
                Absmax::Plain(s) => 4 * s.len(),
                Absmax::Double(dq) => dq.q8_codes.len() + 4 * dq.meta_scales.len(),
            }
    }

    /// Checks the internal lengths and values a decoder relies on.
    pub fn validate(&self) -> Result<(), QuantError> {
        let bad = |m: String| Err(QuantError::Corrupt(m));
        if self.block_size == 0 {
            return Err(QuantError::InvalidBlockSize);
        }
        let n = self.len();
        if self.codes.len() != n.div_ceil(2) {
            return bad(format!("{} code bytes for {n} elements", self.codes.len()));
        }
        if n % 2 == 1 && self.codes[n / 2] >> 4 != 0 {
            return bad("padding nibble is not zero".into());
        }
        let blocks = self.block_count();
        match &self.absmax {
            Absmax::Plain(s) => {
                if s.len() != blocks {
                    return bad(format!("{} scales for {blocks} blocks", s.len()));
                }
                if let Some(v) = s.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
                    return bad(format!("invalid block scale {v}"));
                }
            }
            Absmax::Double(dq) => {
                if dq.meta_block == 0 {
                    return Err(QuantError::InvalidBlockSize);
                }
                if dq.q8_codes.len() != blocks {
                    return bad(format!("{} 8-bit scales for {blocks} blocks", dq.q8_codes.len()));
                }
                if dq.meta_scales.len() != blocks.div_ceil(dq.meta_block) {
                    return bad(format!("{} meta-scales for {blocks} blocks", dq.meta_scales.len()));
                }
                if dq.q8_codes.iter().any(|&q| q < 0) {
                    return bad("negative 8-bit block scale".into());
                }
                if let Some(v) = dq.meta_scales.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
                    return bad(format!("invalid meta-scale {v}"));
                }
            }
        }
        Ok(())
    }
}

fn absmax(xs: &[f32]) -> f32 {
    xs.iter().fold(0.0f32, |m, x| m.max(x.abs()))
}

fn double_quantize(scales: &[f32], meta_block: usize) -> DoubleQuant {
    let mut q8_codes = Vec::with_capacity(scales.len());
    let mut meta_scales = Vec::with_capacity(scales.len().div_ceil(meta_block));
    for group in scales.chunks(meta_block) {
        let meta = absmax(group);
        meta_scales.push(meta);
        for &s in group {
            let q = if meta == 0.0 { 0.0 } else { (s / meta * Q8_MAX).round() };
            q8_codes.push(q.clamp(0.0, Q8_MAX) as i8);
        }
    }
    DoubleQuant {
        q8_codes,
        meta_block,
        meta_scales,
    }
}

/// Quantizes row-major `data` of shape `rows x cols`.
pub fn quantize_slice(
    data: &[f32],
    rows: usize,
    cols: usize,
    opts: QuantOptions,
) -> Result<QuantizedTensor, QuantError> {
    if opts.block_size == 0 || opts.meta_block == 0 {
        return Err(QuantError::InvalidBlockSize);
    }
    if data.len() != rows * cols {
        return Err(QuantError::Corrupt(format!(
            "{} values for shape {rows}x{cols}",
            data.len()
        )));
    }
    if let Some(i) = data.iter().position(|v| !v.is_finite()) {
        return Err(QuantError::NonFinite(i));
    }
    let book = nf4_codebook();
    let zero = book.zero_index();
    let mut codes = vec![0u8; data.len().div_ceil(2)];
    let mut scales = Vec::with_capacity(data.len().div_ceil(opts.block_size));
    for (b, block) in data.chunks(opts.block_size).enumerate() {
        let s = absmax(block);
        scales.push(s);
        for (j, &w) in block.iter().enumerate() {
            let code = if s == 0.0 { zero } else { book.nearest(w / s) };
            let i = b * opts.block_size + j;
            codes[i / 2] |= if i.is_multiple_of(2) { code } else { code << 4 };
        }
    }
    let absmax = if opts.double_quant {
        Absmax::Double(double_quantize(&scales, opts.meta_block))
    } else {
        Absmax::Plain(scales)
    };
    Ok(QuantizedTensor {
        rows,
        cols,
        block_size: opts.block_size,
        codes,
        absmax,
    })
}

fn row_major(w: &DMatrix<f32>) -> Vec<f32> {
    w.transpose().as_slice().to_vec()
}

pub fn quantize_nf4(w: &DMatrix<f32>, block_size: usize, double_quant: bool) -> Result<QuantizedTensor, QuantError> {
    quantize_slice(
        &row_major(w),
        w.nrows(),
        w.ncols(),
        QuantOptions {
            block_size,
            double_quant,
            ..Default::default()
        },
    )
}

/// Row-major reconstruction `level[code] * s_block`.
pub fn dequantize_slice(qt: &QuantizedTensor) -> Result<Vec<f32>, QuantError> {
    qt.validate()?;
    let book = nf4_codebook();
    let scales = qt.scales();
    Ok((0..qt.len())
        .map(|i| book.levels[qt.code(i) as usize] * scales[i / qt.block_size])
        .collect())
}

pub fn dequantize_nf4(qt: &QuantizedTensor) -> Result<DMatrix<f32>, QuantError> {
    let data = dequantize_slice(qt)?;
    Ok(DMatrix::from_row_slice(qt.rows, qt.cols, &data))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn codebook_invariants() {
        let b = nf4_codebook();
        assert_eq!(b.levels[0], -1.0);
        assert_eq!(b.levels[15], 1.0);
        assert_eq!(b.zero_index(), 7);
        assert!(b.levels.windows(2).all(|w| w[0] < w[1]));
        assert!((b.max_gap() - (1.0 - 0.696_192_8)).abs() < 1e-6);
    }

    #[test]
    fn nearest_ties_go_low() {
        let b = nf4_codebook();
        let mid = (b.levels[7] + b.levels[8]) / 2.0;
        assert_eq!(b.nearest(mid), 7);
        assert_eq!(b.nearest(1.0), 15);
        assert_eq!(b.nearest(-1.0), 0);
    }

    #[test]
    fn zero_block() {
        let q = quantize_slice(&[0.0; 64], 1, 64, QuantOptions::default()).unwrap();
        assert!((0..64).all(|i| q.code(i) == 7));
        assert_eq!(q.absmax, Absmax::Plain(vec![0.0]));
        assert_eq!(dequantize_slice(&q).unwrap(), vec![0.0; 64]);
    }

    #[test]
    fn grid_values_roundtrip_exactly() {
        let b = nf4_codebook();
        let s = 2.5f32;
        let data: Vec<f32> = (0..64).map(|i| s * b.levels[i % 16]).collect();
        let q = quantize_slice(&data, 4, 16, QuantOptions::default()).unwrap();
        assert_eq!(dequantize_slice(&q).unwrap(), data);
    }

    #[test]
    fn packing_is_low_nibble_first() {
        let q = quantize_slice(&[-1.0, 1.0, 0.0], 1, 3, QuantOptions::default()).unwrap();
        assert_eq!(q.codes, vec![0xf0, 0x07]);
    }

    #[test]
    fn errors() {
        assert_eq!(
            quantize_slice(&[1.0, f32::NAN], 1, 2, QuantOptions::default()),
            Err(QuantError::NonFinite(1))
        );
        let zero_block = QuantOptions {
            block_size: 0,
            ..Default::default()
        };
        assert_eq!(
            quantize_slice(&[1.0], 1, 1, zero_block),
            Err(QuantError::InvalidBlockSize)
        );
        let mut q = quantize_slice(&[1.0, 2.0, 3.0], 1, 3, QuantOptions::default()).unwrap();
        q.codes[1] |= 0xa0;
        assert!(matches!(dequantize_slice(&q), Err(QuantError::Corrupt(_))));
        q.codes.pop();
        assert!(matches!(dequantize_slice(&q), Err(QuantError::Corrupt(_))));
    }

    #[test]
    fn matrix_layout_is_row_major() {
        let w = DMatrix::from_row_slice(2, 3, &[1.0f32, 0.0, -1.0, 0.5, 0.25, 0.0]);
        let q = quantize_nf4(&w, 3, false).unwrap();
        assert_eq!(q.scales(), vec![1.0, 0.5]);
        assert_eq!(q.code(0), 15);
        assert_eq!(q.code(2), 0);
        assert_eq!(q.code(3), 15);
        let back = dequantize_nf4(&q).unwrap();
        assert_eq!(back[(0, 0)], 1.0);
        assert_eq!(back[(0, 2)], -1.0);
        assert_eq!(back[(1, 0)], 0.5);
    }

    #[test]
    fn double_quant_storage_is_smaller() {
        let data: Vec<f32> = (0..64 * 512)
            .map(|i| ((i * 7919) % 1000) as f32 / 1000.0 - 0.5)
            .collect();
        let plain = quantize_slice(&data, 512, 64, QuantOptions::default()).unwrap();
        let dq = quantize_slice(
            &data,
            512,
            64,
            QuantOptions {
                double_quant: true,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(dq.storage_bytes() < plain.storage_bytes());
        assert!(matches!(dq.absmax, Absmax::Double(ref d) if d.meta_scales.len() == 2));
    }
}
