//! Row-by-row least squares with Givens rotations.
//!
//! Only the `p × p` triangular factor `R`, the rotated right-hand side
//! `Qᵀy` and the residual sum of squares are kept, so prefixes of a long
//! data record can be solved at any point without refactorizing.

use nalgebra::{DMatrix, DVector};

/// Singular values of the column-equilibrated factor below this fraction
/// of the largest one make the problem rank deficient.
pub const RANK_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct RankDeficiency {
    /// Unit vector `d` with `Ψ d ≈ 0`.
    pub direction: Vec<f64>,
    /// Smallest over largest singular value of the equilibrated factor.
    pub ratio: f64,
}

#[derive(Debug, Clone)]
pub struct IncrementalQr {
    p: usize,
    /// Upper triangle, row-major.
    r: Vec<f64>,
    qty: Vec<f64>,
    rss: f64,
    rows: usize,
    scratch: Vec<f64>,
}

impl IncrementalQr {
    pub fn new(p: usize) -> Self {
        Self {
            p,
            r: vec![0.0; p * p],
            qty: vec![0.0; p],
            rss: 0.0,
            rows: 0,
            scratch: Vec::with_capacity(p),
        }
    }

    pub fn cols(&self) -> usize {
        self.p
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    /// Residual sum of squares of the current least-squares fit.
    pub fn rss(&self) -> f64 {
        self.rss
    }

    pub fn push_row(&mut self, row: &[f64], y: f64) {
        assert_eq!(row.len(), self.p, "row length");
        let p = self.p;
        let mut x = std::mem::take(&mut self.scratch);
        x.clear();
        x.extend_from_slice(row);
        let mut b = y;
        for i in 0..p {
            if x[i] == 0.0 {
                continue;
            }
            let rii = self.r[i * p + i];
            let h = rii.hypot(x[i]);
            let (c, s) = (rii / h, x[i] / h);
            self.r[i * p + i] = h;
            for j in i + 1..p {
                let a = self.r[i * p + j];
                self.r[i * p + j] = c * a + s * x[j];
                x[j] = c * x[j] - s * a;
            }
            let q = self.qty[i];
            self.qty[i] = c * q + s * b;
            b = c * b - s * q;
        }
        self.scratch = x;
        self.rss += b * b;
        self.rows += 1;
    }

    /// The triangular factor with `RᵀR = ΨᵀΨ`.
    pub fn r_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.p, self.p, &self.r)
    }

    /// Euclidean norm of every data column.
    pub fn column_norms(&self) -> Vec<f64> {
        let p = self.p;
        (0..p)
            .map(|j| {
                (0..=j)
                    .map(|i| self.r[i * p + j].powi(2))
                    .sum::<f64>()
                    .sqrt()
            })
            .collect()
    }

    /// Singular values of `R D⁻¹` with `D` the column norms, and the right
    /// singular vector of the smallest one mapped back to original scale.
    /// A zero column yields ratio 0 and its unit vector.
    pub fn equilibrated_spectrum(&self) -> (Vec<f64>, Vec<f64>) {
        let p = self.p;
        let d = self.column_norms();
        if let Some(j) = d.iter().position(|&x| x == 0.0) {
            let mut dir = vec![0.0; p];
            dir[j] = 1.0;
            let mut sv = vec![1.0; p];
            sv[p - 1] = 0.0;
            return (sv, dir);
        }
        let scaled = DMatrix::from_fn(p, p, |i, j| self.r[i * p + j] / d[j]);
        let svd = scaled.svd(false, true);
        let v_t = svd.v_t.expect("requested");
        let (imin, _) = svd
            .singular_values
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(b.1))
            .expect("non-empty");
        let mut dir: Vec<f64> = (0..p).map(|j| v_t[(imin, j)] / d[j]).collect();
        let norm = dir.iter().map(|x| x * x).sum::<f64>().sqrt();
        dir.iter_mut().for_each(|x| *x /= norm);
        let mut sv: Vec<f64> = svd.singular_values.iter().copied().collect();
        sv.sort_by(|a, b| b.total_cmp(a));
        (sv, dir)
    }

    /// Back substitution `R θ = Qᵀy`.
    pub fn solve(&self) -> Result<Vec<f64>, RankDeficiency> {
        let p = self.p;
        let (sv, dir) = self.equilibrated_spectrum();
        let ratio = sv[p - 1] / sv[0];
        if !(ratio > RANK_TOLERANCE) {
            return Err(RankDeficiency {
                direction: dir,
                ratio,
            });
        }
        let mut theta = vec![0.0; p];
        for i in (0..p).rev() {
            let mut acc = self.qty[i];
            for j in i + 1..p {
                acc -= self.r[i * p + j] * theta[j];
            }
            theta[i] = acc / self.r[i * p + i];
        }
        Ok(theta)
    }
}

/// `(ΨᵀΨ)⁻¹ Ψᵀ y` through a Cholesky solve of the normal equations.
pub fn normal_equations(rows: &[Vec<f64>], y: &[f64]) -> Option<Vec<f64>> {
    let p = rows.first()?.len();
    let psi = DMatrix::from_fn(rows.len(), p, |i, j| rows[i][j]);
    let gram = psi.transpose() * &psi;
    let rhs = psi.transpose() * DVector::from_column_slice(y);
    gram.cholesky()
        .map(|ch| ch.solve(&rhs).iter().copied().collect())
}
