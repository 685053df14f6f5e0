//! Low-rank adapters: `y = W x + (alpha / r) * B (A x) + b`.
//!
//! `W` is the frozen `d x k` base weight, dense or NF4-quantized. `A` is
//! `r x k` and `B` is `d x r`. Inputs are `k x n` column batches.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::nf4::{dequantize_nf4, QuantError, QuantizedTensor};

#[derive(Debug, Error, PartialEq)]
pub enum LoraError {
    #[error("rank must be at least 1")]
    ZeroRank,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Quant(#[from] QuantError),
}

#[derive(Debug, Clone, PartialEq)]
pub enum BaseWeight {
    Dense(DMatrix<f64>),
    Quantized(QuantizedTensor),
}

impl BaseWeight {
    pub fn shape(&self) -> (usize, usize) {
        match self {
            BaseWeight::Dense(w) => w.shape(),
            BaseWeight::Quantized(q) => (q.rows, q.cols),
        }
    }

    /// The weight as used in the forward pass (dequantized if needed).
    pub fn dense(&self) -> Result<DMatrix<f64>, LoraError> {
        Ok(match self {
            BaseWeight::Dense(w) => w.clone(),
            BaseWeight::Quantized(q) => dequantize_nf4(q)?.map(f64::from),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub alpha: f64,
}

impl LoraAdapter {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, alpha: f64) -> Result<Self, LoraError> {
        if a.nrows() == 0 {
            return Err(LoraError::ZeroRank);
        }
        if b.ncols() != a.nrows() {
            return Err(LoraError::Shape(format!(
                "B is {}x{} but A has rank {}",
                b.nrows(),
                b.ncols(),
                a.nrows()
            )));
        }
        Ok(LoraAdapter { a, b, alpha })
    }

    /// Standard initialization shape: given `A`, `B = 0`, so the adapter is inert.
    pub fn inert(a: DMatrix<f64>, d: usize, alpha: f64) -> Result<Self, LoraError> {
        let r = a.nrows();
        Self::new(a, DMatrix::zeros(d, r), alpha)
    }

    pub fn rank(&self) -> usize {
        self.a.nrows()
    }

    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank() as f64
    }

    /// `(d, k)` of the base matrix this adapter conforms to.
    pub fn shape(&self) -> (usize, usize) {
        (self.b.nrows(), self.a.ncols())
    }

    pub fn param_count(&self) -> usize {
        self.a.len() + self.b.len()
    }
}

fn check(
    w: (usize, usize),
    bias: Option<&DVector<f64>>,
    adapter: &LoraAdapter,
    x: Option<&DMatrix<f64>>,
) -> Result<(), LoraError> {
    if adapter.shape() != w {
        return Err(LoraError::Shape(format!(
            "adapter fits {:?} but base weight is {:?}",
            adapter.shape(),
            w
        )));
    }
    if let Some(b) = bias {
        if b.len() != w.0 {
            return Err(LoraError::Shape(format!(
                "bias has {} entries, expected {}",
                b.len(),
                w.0
            )));
        }
    }
    if let Some(x) = x {
        if x.nrows() != w.1 {
            return Err(LoraError::Shape(format!(
                "input has {} rows, expected {}",
                x.nrows(),
                w.1
            )));
        }
    }
    Ok(())
}

/// Adapter-path forward pass; `BA` is never formed.
pub fn lora_forward(
    x: &DMatrix<f64>,
    w: &BaseWeight,
    bias: Option<&DVector<f64>>,
    adapter: &LoraAdapter,
) -> Result<DMatrix<f64>, LoraError> {
    check(w.shape(), bias, adapter, Some(x))?;
    let mut y = w.dense()? * x;
    let ax = &adapter.a * x;
    y += (&adapter.b * ax) * adapter.scaling();
    if let Some(b) = bias {
        for mut col in y.column_iter_mut() {
            col += b;
        }
    }
    Ok(y)
}

/// `W + scaling * B A` as a dense matrix.
pub fn merge_adapter(w: &BaseWeight, adapter: &LoraAdapter) -> Result<DMatrix<f64>, LoraError> {
    check(w.shape(), None, adapter, None)?;
    Ok(w.dense()? + (&adapter.b * &adapter.a) * adapter.scaling())
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraGrads {
    pub loss: f64,
    pub d_a: DMatrix<f64>,
    pub d_b: DMatrix<f64>,
}

/// Loss `||y||^2 / 2` over the batch and its gradients w.r.t. `A` and `B`:
/// `dB = s * Y (A X)^T` and `dA = s * B^T Y X^T`.
pub fn lora_grads(
    x: &DMatrix<f64>,
    w: &BaseWeight,
    bias: Option<&DVector<f64>>,
    adapter: &LoraAdapter,
) -> Result<LoraGrads, LoraError> {
    let y = lora_forward(x, w, bias, adapter)?;
    let s = adapter.scaling();
    let ax = &adapter.a * x;
    Ok(LoraGrads {
        loss: y.norm_squared() / 2.0,
        d_b: (&y * ax.transpose()) * s,
        d_a: (adapter.b.transpose() * &y * x.transpose()) * s,
    })
}
