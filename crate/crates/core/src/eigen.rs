//! Dense symmetric eigensolver (cyclic Jacobi rotations, 64-bit).

use crate::error::{Error, Result};

const MAX_SWEEPS: usize = 100;
const OFF_DIAGONAL_TOLERANCE: f64 = 1e-11;

/// A real symmetric matrix in row-major `f64` storage.
#[derive(Clone, Debug, PartialEq)]
pub struct SymmetricMatrix {
    dim: usize,
    data: Vec<f64>,
}

impl SymmetricMatrix {
    /// Builds a matrix from `dim²` row-major entries, symmetrizing as
    /// `(A + Aᵀ)/2`.
    pub fn new(dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Shape("symmetric matrix needs dim >= 1".into()));
        }
        if data.len() != dim * dim {
            return Err(Error::DimensionMismatch {
                expected: dim * dim,
                actual: data.len(),
            });
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("matrix entry {bad}")));
        }
        let mut m = Self { dim, data };
        for i in 0..dim {
            for j in (i + 1)..dim {
                let avg = 0.5 * (m.data[i * dim + j] + m.data[j * dim + i]);
                m.data[i * dim + j] = avg;
                m.data[j * dim + i] = avg;
            }
        }
        Ok(m)
    }

    pub fn zeros(dim: usize) -> Self {
        Self {
            dim,
            data: vec![0.0; dim * dim],
        }
    }

    pub fn identity(dim: usize) -> Self {
        let mut m = Self::zeros(dim);
        (0..dim).for_each(|i| m.data[i * dim + i] = 1.0);
        m
    }

    pub fn from_diagonal(diag: &[f64]) -> Result<Self> {
        let n = diag.len();
        let mut data = vec![0.0; n * n];
        diag.iter().enumerate().for_each(|(i, d)| data[i * n + i] = *d);
        Self::new(n, data)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.dim + j]
    }

    pub fn trace(&self) -> f64 {
        (0..self.dim).map(|i| self.get(i, i)).sum()
    }

    /// Max absolute row sum.
    pub fn inf_norm(&self) -> f64 {
        self.data
            .chunks_exact(self.dim)
            .map(|r| r.iter().map(|v| v.abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// `‖A − Aᵀ‖∞`; zero for anything built through [`SymmetricMatrix::new`].
    pub fn asymmetry(&self) -> f64 {
        let n = self.dim;
        (0..n)
            .map(|i| (0..n).map(|j| (self.get(i, j) - self.get(j, i)).abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            dim: self.dim,
            data: self.data.iter().map(|v| v * c).collect(),
        }
    }

    pub fn shifted(&self, c: f64) -> Self {
        let mut m = self.clone();
        (0..self.dim).for_each(|i| m.data[i * self.dim + i] += c);
        m
    }
}

/// Eigenvalues (ascending) and the matching unit eigenvectors as columns of a
/// row-major `dim×dim` matrix.
#[derive(Clone, Debug)]
pub struct Eigen {
    pub values: Vec<f64>,
    pub vectors: Vec<f64>,
}

fn jacobi(m: &SymmetricMatrix, want_vectors: bool) -> (Vec<f64>, Option<Vec<f64>>) {
    let n = m.dim;
    let mut a = m.data.clone();
    let mut v = want_vectors.then(|| SymmetricMatrix::identity(n).data);
    let threshold = OFF_DIAGONAL_TOLERANCE * m.frobenius_norm();

    for _ in 0..MAX_SWEEPS {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i * n + j] * a[i * n + j])
            .sum::<f64>()
            .sqrt();
        if off <= threshold {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = if theta.abs() > 1e150 {
                    0.5 / theta
                } else {
                    theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt())
                };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k * n + p], a[k * n + q]);
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p * n + k], a[q * n + k]);
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                a[p * n + q] = 0.0;
                a[q * n + p] = 0.0;
                if let Some(v) = v.as_mut() {
                    for k in 0..n {
                        let (vkp, vkq) = (v[k * n + p], v[k * n + q]);
                        v[k * n + p] = c * vkp - s * vkq;
                        v[k * n + q] = s * vkp + c * vkq;
                    }
                }
            }
        }
    }
    ((0..n).map(|i| a[i * n + i]).collect(), v)
}

/// All eigenvalues in ascending order.
pub fn sym_eigvals(m: &SymmetricMatrix) -> Vec<f64> {
    let (mut values, _) = jacobi(m, false);
    values.sort_by(f64::total_cmp);
    values
}

/// Eigenvalues in ascending order with their eigenvectors.
pub fn sym_eigen(m: &SymmetricMatrix) -> Eigen {
    let n = m.dim;
    let (values, vectors) = jacobi(m, true);
    let vectors = vectors.expect("vectors requested");
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| values[i].total_cmp(&values[j]));
    let mut sorted = vec![0.0; n * n];
    for (new_col, &old_col) in order.iter().enumerate() {
        for r in 0..n {
            sorted[r * n + new_col] = vectors[r * n + old_col];
        }
    }
    Eigen {
        values: order.iter().map(|&i| values[i]).collect(),
        vectors: sorted,
    }
}

pub fn min_eigval(m: &SymmetricMatrix) -> f64 {
    sym_eigvals(m)[0]
}
