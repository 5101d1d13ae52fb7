//! Low-rank adaptation of a frozen linear map.
//!
//! A frozen weight `W0` (d×k) is adapted by a rank-`r` update
//! `ΔW = B·A` with `B` d×r and `A` r×k, so the adapted layer computes
//!
//! ```text
//! h = W0·x + scale·B·(A·x)
//! ```
//!
//! `B` starts at zero, which makes a fresh adapter an exact no-op. Only
//! `r·(d + k)` parameters are trained instead of `d·k`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::hashing::sha256_parts;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LoraError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid rank {rank}: need 1 <= r < min(d, k) = {limit}")]
    InvalidRank { rank: usize, limit: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    b: DMatrix<f64>,
    a: DMatrix<f64>,
    pub scale: f64,
    /// Identity of the frozen `W0` this adapter was built for.
    pub frozen_ref: String,
}

/// Content identity of a weight matrix.
pub fn matrix_ref(w: &DMatrix<f64>) -> String {
    let bytes: Vec<u8> = w.iter().flat_map(|v| v.to_le_bytes()).collect();
    hex::encode(sha256_parts([
        (w.nrows() as u64).to_le_bytes().as_slice(),
        (w.ncols() as u64).to_le_bytes().as_slice(),
        bytes.as_slice(),
    ]))
}

fn check_rank(rank: usize, d: usize, k: usize) -> Result<(), LoraError> {
    let limit = d.min(k);
    if rank == 0 || rank >= limit {
        return Err(LoraError::InvalidRank { rank, limit });
    }
    Ok(())
}

impl LoraAdapter {
    /// Fresh adapter for `w0`: `A` drawn from N(0, 1/k), `B = 0`.
    pub fn init<R: Rng + ?Sized>(
        w0: &DMatrix<f64>,
        rank: usize,
        scale: f64,
        rng: &mut R,
    ) -> Result<Self, LoraError> {
        let (d, k) = w0.shape();
        check_rank(rank, d, k)?;
        let normal = Normal::new(0.0, 1.0 / (k as f64).sqrt()).expect("positive std");
        Ok(Self {
            b: DMatrix::zeros(d, rank),
            a: DMatrix::from_fn(rank, k, |_, _| normal.sample(rng)),
            scale,
            frozen_ref: matrix_ref(w0),
        })
    }

    pub fn from_parts(
        b: DMatrix<f64>,
        a: DMatrix<f64>,
        scale: f64,
        frozen_ref: impl Into<String>,
    ) -> Result<Self, LoraError> {
        if b.ncols() != a.nrows() {
            return Err(LoraError::ShapeMismatch(format!(
                "B is {}x{} but A is {}x{}",
                b.nrows(),
                b.ncols(),
                a.nrows(),
                a.ncols()
            )));
        }
        check_rank(b.ncols(), b.nrows(), a.ncols())?;
        Ok(Self {
            b,
            a,
            scale,
            frozen_ref: frozen_ref.into(),
        })
    }

    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn rank(&self) -> usize {
        self.a.nrows()
    }

    pub fn d(&self) -> usize {
        self.b.nrows()
    }

    pub fn k(&self) -> usize {
        self.a.ncols()
    }

    /// `r·(d + k)`.
    pub fn param_count(&self) -> usize {
        self.rank() * (self.d() + self.k())
    }

    /// Dense `scale·B·A`. Only for inspection; the forward pass never builds it.
    pub fn delta(&self) -> DMatrix<f64> {
        &self.b * &self.a * self.scale
    }

    pub(crate) fn set_factors(&mut self, b: DMatrix<f64>, a: DMatrix<f64>) {
        debug_assert_eq!(b.shape(), self.b.shape());
        debug_assert_eq!(a.shape(), self.a.shape());
        self.b = b;
        self.a = a;
    }

    fn check_base(&self, w0: &DMatrix<f64>) -> Result<(), LoraError> {
        if w0.shape() != (self.d(), self.k()) {
            return Err(LoraError::ShapeMismatch(format!(
                "W0 is {}x{} but adapter expects {}x{}",
                w0.nrows(),
                w0.ncols(),
                self.d(),
                self.k()
            )));
        }
        Ok(())
    }
}

/// `W0·x + scale·B·(A·x)`.
pub fn apply_lora(
    adapter: &LoraAdapter,
    w0: &DMatrix<f64>,
    x: &DVector<f64>,
) -> Result<DVector<f64>, LoraError> {
    adapter.check_base(w0)?;
    if x.len() != adapter.k() {
        return Err(LoraError::ShapeMismatch(format!(
            "x has length {} but W0 has {} columns",
            x.len(),
            adapter.k()
        )));
    }
    let low = &adapter.a * x;
    Ok(w0 * x + (&adapter.b * low) * adapter.scale)
}

/// Fold the update into the base weights: `W0 + scale·B·A`.
pub fn merge_lora(adapter: &LoraAdapter, w0: &DMatrix<f64>) -> Result<DMatrix<f64>, LoraError> {
    adapter.check_base(w0)?;
    Ok(w0 + adapter.delta())
}
