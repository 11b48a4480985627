//! Dense linear algebra for the small systems that remain after absorbing
//! fixed effects (tens of columns at most).

use alloc::vec;
use alloc::vec::Vec;

use crate::math;

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length");
        Matrix { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn diag(&self) -> Vec<f64> {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).collect()
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.rows, "matmul dimensions");
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == 0.0 {
                    continue;
                }
                for j in 0..other.cols {
                    out[(i, j)] += a * other[(k, j)];
                }
            }
        }
        out
    }

    pub fn matvec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(self.cols, v.len(), "matvec dimensions");
        (0..self.rows)
            .map(|i| (0..self.cols).map(|j| self[(i, j)] * v[j]).sum())
            .collect()
    }

    pub fn scale(&mut self, c: f64) {
        self.data.iter_mut().for_each(|v| *v *= c);
    }

    pub fn add_assign(&mut self, other: &Matrix, c: f64) {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        self.data
            .iter_mut()
            .zip(&other.data)
            .for_each(|(a, b)| *a += c * b);
    }

    /// `B M B` for symmetric `B`.
    pub fn sandwich(bread: &Matrix, meat: &Matrix) -> Matrix {
        bread.matmul(meat).matmul(bread)
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Keep only the listed rows and columns.
    pub fn select(&self, idx: &[usize]) -> Matrix {
        let mut out = Matrix::zeros(idx.len(), idx.len());
        for (a, &i) in idx.iter().enumerate() {
            for (b, &j) in idx.iter().enumerate() {
                out[(a, b)] = self[(i, j)];
            }
        }
        out
    }
}

impl core::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl core::ops::IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

/// Lower Cholesky factor of a symmetric positive-definite matrix.
#[derive(Debug, Clone)]
pub struct Cholesky {
    l: Matrix,
}

impl Cholesky {
    pub fn new(a: &Matrix) -> Option<Self> {
        let n = a.rows();
        let mut l = Matrix::zeros(n, n);
        for j in 0..n {
            let mut d = a[(j, j)];
            for k in 0..j {
                d -= l[(j, k)] * l[(j, k)];
            }
            if d <= 0.0 || !d.is_finite() {
                return None;
            }
            let d = math::sqrt(d);
            l[(j, j)] = d;
            for i in j + 1..n {
                let mut s = a[(i, j)];
                for k in 0..j {
                    s -= l[(i, k)] * l[(j, k)];
                }
                l[(i, j)] = s / d;
            }
        }
        Some(Cholesky { l })
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.l.rows();
        let mut z = b.to_vec();
        for i in 0..n {
            let mut s = z[i];
            for k in 0..i {
                s -= self.l[(i, k)] * z[k];
            }
            z[i] = s / self.l[(i, i)];
        }
        for i in (0..n).rev() {
            let mut s = z[i];
            for k in i + 1..n {
                s -= self.l[(k, i)] * z[k];
            }
            z[i] = s / self.l[(i, i)];
        }
        z
    }

    pub fn inverse(&self) -> Matrix {
        let n = self.l.rows();
        let mut inv = Matrix::zeros(n, n);
        let mut e = vec![0.0; n];
        for j in 0..n {
            e.iter_mut().for_each(|v| *v = 0.0);
            e[j] = 1.0;
            let col = self.solve(&e);
            for i in 0..n {
                inv[(i, j)] = col[i];
            }
        }
        inv
    }
}

/// Greedy column selection for a Gram matrix: a column is kept when its
/// Cholesky pivot retains more than `rel_tol` of its own squared norm after
/// projecting out the previously kept columns.
pub fn independent_columns(gram: &Matrix, rel_tol: f64) -> Vec<usize> {
    let n = gram.rows();
    let mut kept: Vec<usize> = Vec::new();
    // Rows of L for kept columns, indexed in kept order.
    let mut l_rows: Vec<Vec<f64>> = Vec::new();
    for j in 0..n {
        let ajj = gram[(j, j)];
        if !(ajj > 0.0) || !ajj.is_finite() {
            continue;
        }
        let mut row = Vec::with_capacity(kept.len() + 1);
        for (a, &k) in kept.iter().enumerate() {
            let mut s = gram[(j, k)];
            for b in 0..a {
                s -= row[b] * l_rows[a][b];
            }
            row.push(s / l_rows[a][a]);
        }
        let d = ajj - row.iter().map(|v| v * v).sum::<f64>();
        if d > rel_tol * ajj {
            row.push(math::sqrt(d));
            l_rows.push(row);
            kept.push(j);
        }
    }
    kept
}

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Returns eigenvalues and the matrix whose columns are eigenvectors.
pub fn symmetric_eigen(a: &Matrix) -> (Vec<f64>, Matrix) {
    let n = a.rows();
    let mut m = a.clone();
    let mut v = Matrix::identity(n);
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[(i, j)] * m[(i, j)])
            .sum();
        let scale: f64 = (0..n).map(|i| m[(i, i)] * m[(i, i)]).sum::<f64>() + off;
        if off <= 1e-30 * scale.max(f64::MIN_POSITIVE) {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let theta = (m[(q, q)] - m[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + math::sqrt(theta * theta + 1.0));
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / math::sqrt(t * t + 1.0);
                let s = t * c;
                for k in 0..n {
                    let mkp = m[(k, p)];
                    let mkq = m[(k, q)];
                    m[(k, p)] = c * mkp - s * mkq;
                    m[(k, q)] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[(p, k)];
                    let mqk = m[(q, k)];
                    m[(p, k)] = c * mpk - s * mqk;
                    m[(q, k)] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }
    (m.diag(), v)
}

/// Project a symmetric matrix onto the PSD cone by flooring eigenvalues at 0.
/// Returns the matrix unchanged when it is already PSD.
pub fn floor_eigenvalues(a: &Matrix) -> (Matrix, bool) {
    let (vals, vecs) = symmetric_eigen(a);
    if vals.iter().all(|&l| l >= 0.0) {
        return (a.clone(), false);
    }
    let n = a.rows();
    let mut out = Matrix::zeros(n, n);
    for (k, &l) in vals.iter().enumerate() {
        if l <= 0.0 {
            continue;
        }
        for i in 0..n {
            for j in 0..n {
                out[(i, j)] += l * vecs[(i, k)] * vecs[(j, k)];
            }
        }
    }
    (out, true)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spd() -> Matrix {
        Matrix::from_rows(3, 3, vec![4.0, 2.0, 0.6, 2.0, 5.0, 1.0, 0.6, 1.0, 3.0])
    }

    #[test]
    fn cholesky_inverse_roundtrip() {
        let a = spd();
        let inv = Cholesky::new(&a).unwrap().inverse();
        assert!(a.matmul(&inv).max_abs_diff(&Matrix::identity(3)) < 1e-12);
    }

    #[test]
    fn eigen_reconstructs() {
        let a = spd();
        let (vals, vecs) = symmetric_eigen(&a);
        let mut d = Matrix::zeros(3, 3);
        for i in 0..3 {
            d[(i, i)] = vals[i];
        }
        let back = vecs.matmul(&d).matmul(&vecs.transpose());
        assert!(back.max_abs_diff(&a) < 1e-12);
    }

    #[test]
    fn floor_removes_negative_direction() {
        let a = Matrix::from_rows(2, 2, vec![1.0, 0.0, 0.0, -2.0]);
        let (f, changed) = floor_eigenvalues(&a);
        assert!(changed);
        assert!(f.max_abs_diff(&Matrix::from_rows(2, 2, vec![1.0, 0.0, 0.0, 0.0])) < 1e-12);
    }

    #[test]
    fn detects_collinear_columns() {
        // Columns: x, 2x, z
        let x = [1.0, 2.0, 3.0, 4.0];
        let z = [1.0, 0.0, 1.0, 0.0];
        let cols = [x.to_vec(), x.iter().map(|v| 2.0 * v).collect(), z.to_vec()];
        let mut g = Matrix::zeros(3, 3);
        for i in 0..3 {
            for j in 0..3 {
                g[(i, j)] = cols[i].iter().zip(&cols[j]).map(|(a, b)| a * b).sum();
            }
        }
        assert_eq!(independent_columns(&g, 1e-10), vec![0, 2]);
    }
}
