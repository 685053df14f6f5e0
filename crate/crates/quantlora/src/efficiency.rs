//! Trainable-parameter counts for LoRA and weight-memory estimates per
//! storage scheme.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum EfficiencyError {
    #[error("rank must be at least 1")]
    ZeroRank,
    #[error("base parameter count must be positive")]
    NoBaseParams,
    #[error("block and meta-block sizes must be at least 1")]
    InvalidBlock,
    #[error("unknown storage scheme {0:?} (expected fp16, int8, nf4 or nf4+dq)")]
    UnknownScheme(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainableCount {
    pub params: u64,
    pub fraction: f64,
}

/// `repeats * sum(r * (d + k))` over the adapted `(d, k)` matrices.
pub fn count_trainable(
    layers: &[(u64, u64)],
    r: u64,
    repeats: u64,
    base_params: u64,
) -> Result<TrainableCount, EfficiencyError> {
    if r == 0 {
        return Err(EfficiencyError::ZeroRank);
    }
    if base_params == 0 {
        return Err(EfficiencyError::NoBaseParams);
    }
    let per_block: u64 = layers.iter().map(|&(d, k)| r * (d + k)).sum();
    let params = per_block * repeats;
    Ok(TrainableCount {
        params,
        fraction: params as f64 / base_params as f64,
    })
}

/// A stated parameter count and percentage set against the implied one.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FractionCheck {
    pub params: u64,
    pub base_params: u64,
    pub stated_fraction: f64,
    pub implied_fraction: f64,
    /// Relative gap `|stated - implied| / implied`.
    pub relative_gap: f64,
}

impl FractionCheck {
    pub fn new(params: u64, base_params: u64, stated_fraction: f64) -> Result<Self, EfficiencyError> {
        if base_params == 0 {
            return Err(EfficiencyError::NoBaseParams);
        }
        let implied = params as f64 / base_params as f64;
        Ok(FractionCheck {
            params,
            base_params,
            stated_fraction,
            implied_fraction: implied,
            relative_gap: (stated_fraction - implied).abs() / implied,
        })
    }

    pub fn is_consistent(&self, tolerance: f64) -> bool {
        self.relative_gap <= tolerance
    }
}

impl fmt::Display for FractionCheck {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} of {} params: stated {:.4}%, implied {:.4}%",
            self.params,
            self.base_params,
            self.stated_fraction * 100.0,
            self.implied_fraction * 100.0
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scheme {
    Fp16,
    /// Blockwise absmax int8 with one f32 scale per block.
    Int8,
    Nf4,
    Nf4Dq,
}

impl FromStr for Scheme {
    type Err = EfficiencyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "fp16" => Ok(Scheme::Fp16),
            "int8" => Ok(Scheme::Int8),
            "nf4" => Ok(Scheme::Nf4),
            "nf4+dq" | "nf4dq" => Ok(Scheme::Nf4Dq),
            _ => Err(EfficiencyError::UnknownScheme(s.to_string())),
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scheme::Fp16 => "fp16",
            Scheme::Int8 => "int8",
            Scheme::Nf4 => "nf4",
            Scheme::Nf4Dq => "nf4+dq",
        })
    }
}

/// Effective storage bits per weight, scale overhead included.
pub fn bits_per_param(scheme: Scheme, block: u64, meta: u64) -> Result<f64, EfficiencyError> {
    if block == 0 || meta == 0 {
        return Err(EfficiencyError::InvalidBlock);
    }
    let (b, m) = (block as f64, meta as f64);
    Ok(match scheme {
        Scheme::Fp16 => 16.0,
        Scheme::Int8 => 8.0 + 32.0 / b,
        Scheme::Nf4 => 4.0 + 32.0 / b,
        Scheme::Nf4Dq => 4.0 + 8.0 / b + 32.0 / (b * m),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MemoryEstimate {
    pub scheme: Scheme,
    pub bits_per_param: f64,
    pub bytes: f64,
}

pub fn estimate_memory(
    base_params: u64,
    scheme: Scheme,
    block: u64,
    meta: u64,
) -> Result<MemoryEstimate, EfficiencyError> {
    if base_params == 0 {
        return Err(EfficiencyError::NoBaseParams);
    }
    let bits = bits_per_param(scheme, block, meta)?;
    Ok(MemoryEstimate {
        scheme,
        bits_per_param: bits,
        bytes: base_params as f64 * bits / 8.0,
    })
}
