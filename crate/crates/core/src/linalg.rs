//! Matrix exponentials, Kronecker products and a memoized propagator for
//! `w ↦ e^{-R w} C`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// `e^{-M s}` by Padé scaling and squaring.
pub fn matrix_exp(m: &DMatrix<f64>, s: f64) -> Result<DMatrix<f64>> {
    if m.iter().any(|v| !v.is_finite()) || !s.is_finite() {
        return Err(Error::InvalidArgument("matrix exponential of a non-finite matrix".into()));
    }
    let e = (m * (-s)).exp();
    if e.iter().all(|v| v.is_finite()) {
        Ok(e)
    } else {
        Err(Error::Overflow)
    }
}

/// Kronecker product `a ⊗ b`.
pub fn kron(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    a.kronecker(b)
}

/// Identity of size `n`.
pub fn eye(n: usize) -> DMatrix<f64> {
    DMatrix::identity(n, n)
}

/// Infinity norm (max absolute row sum).
pub fn norm_inf(m: &DMatrix<f64>) -> f64 {
    m.row_iter()
        .map(|row| row.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

const TAYLOR_ORDER: usize = 14;
const MAX_CELLS: usize = 1 << 16;

/// Tabulates `G(w) = e^{-R w} C` for `w ∈ [0, span]`.
///
/// Grid nodes are computed directly with [`matrix_exp`]; between nodes a
/// truncated Taylor series for `e^{-R δ}` is applied, with the grid chosen so
/// that `‖R‖ δ ≤ 1/4` and the truncation error stays below `1e-17`.
#[derive(Debug, Clone)]
pub struct Propagator {
    r: DMatrix<f64>,
    span: f64,
    step: f64,
    grid: Vec<DMatrix<f64>>,
}

impl Propagator {
    pub fn new(r: &DMatrix<f64>, c: &DMatrix<f64>, span: f64, min_cells: usize) -> Result<Self> {
        let norm = norm_inf(r);
        let needed = (4.0 * norm * span).ceil() as usize;
        let cells = min_cells.max(needed).clamp(1, MAX_CELLS);
        let step = if span > 0.0 { span / cells as f64 } else { 0.0 };
        let mut grid = Vec::with_capacity(cells + 1);
        for k in 0..=cells {
            grid.push(matrix_exp(r, step * k as f64)? * c);
        }
        Ok(Propagator {
            r: r.clone(),
            span,
            step,
            grid,
        })
    }

    pub fn span(&self) -> f64 {
        self.span
    }

    pub fn dim(&self) -> usize {
        self.r.nrows()
    }

    /// `G(0) = C`.
    pub fn at_zero(&self) -> &DMatrix<f64> {
        &self.grid[0]
    }

    /// `G(span)`.
    pub fn at_span(&self) -> &DMatrix<f64> {
        self.grid.last().expect("grid has at least one node")
    }

    /// `e^{-R w} C` for `w` in `[0, span]` (clamped).
    pub fn eval(&self, w: f64) -> DMatrix<f64> {
        let (k, delta) = self.locate(w);
        if delta == 0.0 {
            return self.grid[k].clone();
        }
        // Horner evaluation of Σ (−Rδ)^j / j! applied to G_k.
        let base = &self.grid[k];
        let mut acc = base.clone();
        for j in (1..=TAYLOR_ORDER).rev() {
            acc = base - (&self.r * acc) * (delta / j as f64);
        }
        acc
    }

    /// `e^{-R w} C x` without forming the matrix.
    pub fn apply(&self, w: f64, x: &DVector<f64>) -> DVector<f64> {
        let (k, delta) = self.locate(w);
        let base = &self.grid[k] * x;
        if delta == 0.0 {
            return base;
        }
        let mut acc = base.clone();
        let mut next = base.clone();
        for j in (1..=TAYLOR_ORDER).rev() {
            next.copy_from(&base);
            next.gemv(-delta / j as f64, &self.r, &acc, 1.0);
            std::mem::swap(&mut acc, &mut next);
        }
        acc
    }

    /// `(e^{-R w} C)ᵀ b` without forming the matrix.
    pub fn apply_transpose(&self, w: f64, b: &DVector<f64>) -> DVector<f64> {
        let (k, delta) = self.locate(w);
        if delta == 0.0 {
            return self.grid[k].tr_mul(b);
        }
        let mut acc = b.clone();
        let mut next = b.clone();
        for j in (1..=TAYLOR_ORDER).rev() {
            next.copy_from(b);
            next.gemv_tr(-delta / j as f64, &self.r, &acc, 1.0);
            std::mem::swap(&mut acc, &mut next);
        }
        self.grid[k].tr_mul(&acc)
    }

    /// Grid node at or below `w` and the remaining offset.
    fn locate(&self, w: f64) -> (usize, f64) {
        if self.step == 0.0 {
            return (0, 0.0);
        }
        let w = w.clamp(0.0, self.span);
        let cells = self.grid.len() - 1;
        let k = ((w / self.step).floor() as usize).min(cells);
        (k, w - self.step * k as f64)
    }
}
