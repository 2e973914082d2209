use nalgebra::{DMatrix, DVector};

use crate::error::{IsanError, Result};

/// `h -> W h + b`. Houses both the per-token transitions and the readout.
#[derive(Clone, Debug, PartialEq)]
pub struct AffineMap {
    pub weight: DMatrix<f64>,
    pub bias: DVector<f64>,
}

impl AffineMap {
    pub fn new(weight: DMatrix<f64>, bias: DVector<f64>) -> Result<Self> {
        if weight.nrows() != bias.len() {
            return Err(IsanError::shape(
                "affine map bias",
                weight.nrows(),
                bias.len(),
            ));
        }
        Ok(Self { weight, bias })
    }

    pub fn identity(n: usize) -> Self {
        Self {
            weight: DMatrix::identity(n, n),
            bias: DVector::zeros(n),
        }
    }

    pub fn zeros(n_out: usize, n_in: usize) -> Self {
        Self {
            weight: DMatrix::zeros(n_out, n_in),
            bias: DVector::zeros(n_out),
        }
    }

    pub fn n_in(&self) -> usize {
        self.weight.ncols()
    }

    pub fn n_out(&self) -> usize {
        self.weight.nrows()
    }

    pub fn is_finite(&self) -> bool {
        self.weight.iter().chain(self.bias.iter()).all(|v| v.is_finite())
    }

    pub fn apply(&self, h: &DVector<f64>) -> Result<DVector<f64>> {
        if h.len() != self.n_in() {
            return Err(IsanError::shape("affine map input", self.n_in(), h.len()));
        }
        let mut out = self.bias.clone();
        out.gemv(1.0, &self.weight, h, 1.0);
        Ok(out)
    }

    /// `out <- W h + b` without allocating. Shapes are the caller's responsibility.
    #[inline]
    pub(crate) fn apply_into(&self, h: &DVector<f64>, out: &mut DVector<f64>) {
        out.copy_from(&self.bias);
        out.gemv(1.0, &self.weight, h, 1.0);
    }

    /// The map that applies `self` first and `then` second.
    pub fn then(&self, then: &AffineMap) -> Result<AffineMap> {
        if then.n_in() != self.n_out() {
            return Err(IsanError::shape(
                "affine composition",
                self.n_out(),
                then.n_in(),
            ));
        }
        let weight = &then.weight * &self.weight;
        let mut bias = then.bias.clone();
        bias.gemv(1.0, &then.weight, &self.bias, 1.0);
        Ok(AffineMap { weight, bias })
    }

    /// Number of stored reals (`n_out * n_in + n_out`).
    pub fn size(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}
