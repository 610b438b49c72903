//! Dense linear algebra for the small systems the solvers produce: LU solves,
//! a one-sided Jacobi SVD (pseudo-inverse and numerical rank), stabilized
//! log-sum-exp and central-difference Jacobians.

use std::ops::{Index, IndexMut};

use crate::error::{Error, Result};
use crate::exec::{self, Execution};

/// Relative pivot threshold for [`solve_linear`].
pub const PIVOT_RTOL: f64 = 1e-14;
/// Default truncation for [`pseudo_inverse`].
pub const DEFAULT_RCOND: f64 = 1e-12;
/// Default relative step for [`jacobian_fd`].
pub const DEFAULT_FD_STEP: f64 = 1e-6;

/// Row-major dense matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_row_major(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch(format!(
                "{} entries for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::DimensionMismatch(format!(
                    "row {i} has {} entries, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn diag(values: &[f64]) -> Self {
        let mut m = Self::zeros(values.len(), values.len());
        for (i, &v) in values.iter().enumerate() {
            m[(i, i)] = v;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.cols, "mul_vec dimension mismatch");
        (0..self.rows)
            .map(|i| self.row(i).iter().zip(x).map(|(a, b)| a * b).sum())
            .collect()
    }

    /// `selfᵀ · x` without materializing the transpose.
    pub fn tr_mul_vec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.rows, "tr_mul_vec dimension mismatch");
        let mut out = vec![0.0; self.cols];
        for (i, &xi) in x.iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            for (o, a) in out.iter_mut().zip(self.row(i)) {
                *o += a * xi;
            }
        }
        out
    }

    pub fn matmul(&self, other: &DenseMatrix) -> DenseMatrix {
        assert_eq!(self.cols, other.rows, "matmul dimension mismatch");
        let mut out = DenseMatrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == 0.0 {
                    continue;
                }
                let src = other.row(k);
                let dst = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += a * s;
                }
            }
        }
        out
    }

    /// Largest absolute entry.
    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Max-norm of `self - other`.
    pub fn max_abs_diff(&self, other: &DenseMatrix) -> f64 {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }
}

impl Index<(usize, usize)> for DenseMatrix {
    type Output = f64;

    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for DenseMatrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

/// Solves `A x = b` by LU factorization with partial pivoting.
pub fn solve_linear(a: &DenseMatrix, b: &[f64]) -> Result<Vec<f64>> {
    let n = a.rows();
    if a.cols() != n {
        return Err(Error::DimensionMismatch(format!(
            "solve_linear needs a square matrix, got {}x{}",
            a.rows(),
            a.cols()
        )));
    }
    if b.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "right-hand side has length {}, matrix is {n}x{n}",
            b.len()
        )));
    }
    let scale = a.max_abs();
    let threshold = PIVOT_RTOL * scale;
    let mut lu = a.data.clone();
    let mut x = b.to_vec();

    for k in 0..n {
        let (p, pivot) = (k..n)
            .map(|i| (i, lu[i * n + k].abs()))
            .fold(
                (k, -1.0),
                |best, cur| if cur.1 > best.1 { cur } else { best },
            );
        if !(pivot > threshold) || scale == 0.0 {
            return Err(Error::SingularMatrix { column: k });
        }
        if p != k {
            for j in 0..n {
                lu.swap(k * n + j, p * n + j);
            }
            x.swap(k, p);
        }
        let diag = lu[k * n + k];
        for i in (k + 1)..n {
            let factor = lu[i * n + k] / diag;
            if factor == 0.0 {
                continue;
            }
            lu[i * n + k] = factor;
            for j in (k + 1)..n {
                lu[i * n + j] -= factor * lu[k * n + j];
            }
            x[i] -= factor * x[k];
        }
    }
    for k in (0..n).rev() {
        let mut acc = x[k];
        for j in (k + 1)..n {
            acc -= lu[k * n + j] * x[j];
        }
        x[k] = acc / lu[k * n + k];
    }
    Ok(x)
}

/// Thin singular value decomposition `A = U diag(s) Vᵀ` with `r = min(m, n)`
/// columns in `u` and `v`. Singular values are sorted in decreasing order.
#[derive(Clone, Debug)]
pub struct Svd {
    pub u: DenseMatrix,
    pub singular_values: Vec<f64>,
    pub v: DenseMatrix,
}

/// One-sided (Hestenes) Jacobi SVD.
pub fn svd(a: &DenseMatrix) -> Svd {
    if a.rows() < a.cols() {
        let t = svd(&a.transpose());
        return Svd {
            u: t.v,
            singular_values: t.singular_values,
            v: t.u,
        };
    }
    let (m, n) = (a.rows(), a.cols());
    // Column-major working copies.
    let mut u: Vec<Vec<f64>> = (0..n)
        .map(|j| (0..m).map(|i| a[(i, j)]).collect())
        .collect();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|j| (0..n).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();

    const MAX_SWEEPS: usize = 80;
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in (p + 1)..n {
                let (mut alpha, mut beta, mut gamma) = (0.0, 0.0, 0.0);
                for (x, y) in u[p].iter().zip(&u[q]) {
                    alpha += x * x;
                    beta += y * y;
                    gamma += x * y;
                }
                if gamma == 0.0 || gamma.abs() <= f64::EPSILON * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut u, p, q, c, s);
                rotate(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            break;
        }
    }

    let mut order: Vec<(f64, usize)> = u
        .iter()
        .enumerate()
        .map(|(j, col)| (col.iter().map(|x| x * x).sum::<f64>().sqrt(), j))
        .collect();
    order.sort_by(|a, b| b.0.total_cmp(&a.0));

    let mut um = DenseMatrix::zeros(m, n);
    let mut vm = DenseMatrix::zeros(n, n);
    let mut singular_values = Vec::with_capacity(n);
    for (k, &(sigma, j)) in order.iter().enumerate() {
        singular_values.push(sigma);
        for i in 0..m {
            um[(i, k)] = if sigma > 0.0 { u[j][i] / sigma } else { 0.0 };
        }
        for i in 0..n {
            vm[(i, k)] = v[j][i];
        }
    }
    Svd {
        u: um,
        singular_values,
        v: vm,
    }
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (left, right) = cols.split_at_mut(q);
    for (x, y) in left[p].iter_mut().zip(right[0].iter_mut()) {
        let (xp, yq) = (*x, *y);
        *x = c * xp - s * yq;
        *y = s * xp + c * yq;
    }
}

/// Moore–Penrose pseudo-inverse; singular values at or below
/// `rcond · σ_max` are treated as zero.
pub fn pseudo_inverse(a: &DenseMatrix, rcond: f64) -> DenseMatrix {
    let Svd {
        u,
        singular_values,
        v,
    } = svd(a);
    let smax = singular_values.first().copied().unwrap_or(0.0);
    let cutoff = rcond * smax;
    let mut out = DenseMatrix::zeros(a.cols(), a.rows());
    for (k, &s) in singular_values.iter().enumerate() {
        if s <= cutoff || s == 0.0 {
            continue;
        }
        let inv = 1.0 / s;
        for i in 0..a.cols() {
            let vik = v[(i, k)] * inv;
            if vik == 0.0 {
                continue;
            }
            for j in 0..a.rows() {
                out[(i, j)] += vik * u[(j, k)];
            }
        }
    }
    out
}

/// Numerical rank: number of singular values above `rcond · σ_max`.
pub fn rank(a: &DenseMatrix, rcond: f64) -> usize {
    let s = svd(a).singular_values;
    let smax = s.first().copied().unwrap_or(0.0);
    if smax == 0.0 {
        return 0;
    }
    s.iter().filter(|&&x| x > rcond * smax).count()
}

/// `log Σ exp(vᵢ)`, shifted by the maximum so that large arguments do not
/// overflow.
pub fn log_sum_exp(v: &[f64]) -> Result<f64> {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if v.is_empty() {
        return Err(Error::EmptyInput);
    }
    if max == f64::NEG_INFINITY {
        return Ok(f64::NEG_INFINITY);
    }
    let sum: f64 = v.iter().map(|x| (x - max).exp()).sum();
    Ok(max + sum.ln())
}

/// Central-difference Jacobian of `f` at `z` with per-coordinate step
/// `h_rel · (1 + |zᵢ|)`. Columns are evaluated according to `execution`.
pub fn jacobian_fd<F>(f: F, z: &[f64], h_rel: f64, execution: Execution) -> Result<DenseMatrix>
where
    F: Fn(&[f64]) -> Vec<f64> + Sync + Send,
{
    let n = z.len();
    let columns = exec::map_indexed(execution, n, |j| {
        let h = h_rel * (1.0 + z[j].abs());
        let mut probe = z.to_vec();
        probe[j] = z[j] + h;
        let plus = f(&probe);
        probe[j] = z[j] - h;
        let minus = f(&probe);
        if plus.iter().chain(&minus).any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteEvaluation { coordinate: j });
        }
        // Use the representable step actually taken.
        let width = (z[j] + h) - (z[j] - h);
        Ok(plus
            .iter()
            .zip(&minus)
            .map(|(p, m)| (p - m) / width)
            .collect::<Vec<f64>>())
    });
    let mut jac: Option<DenseMatrix> = None;
    for (j, col) in columns.into_iter().enumerate() {
        let col = col?;
        let jm = jac.get_or_insert_with(|| DenseMatrix::zeros(col.len(), n));
        if col.len() != jm.rows() {
            return Err(Error::DimensionMismatch(
                "map output length changed between probes".into(),
            ));
        }
        for (i, v) in col.into_iter().enumerate() {
            jm[(i, j)] = v;
        }
    }
    Ok(jac.unwrap_or_else(|| DenseMatrix::zeros(0, 0)))
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn norm_inf(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, m: usize, n: usize) -> DenseMatrix {
        let data = (0..m * n).map(|_| rng.random_range(-1.0..1.0)).collect();
        DenseMatrix::from_row_major(m, n, data).unwrap()
    }

    #[test]
    fn identity_solve() {
        let x = solve_linear(&DenseMatrix::identity(3), &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(x, vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn diagonal_solve() {
        let x = solve_linear(&DenseMatrix::diag(&[2.0, 4.0]), &[2.0, 4.0]).unwrap();
        assert_eq!(x, vec![1.0, 1.0]);
    }

    #[test]
    fn random_solve_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let mut a = random_matrix(&mut rng, 8, 8);
            for i in 0..8 {
                a[(i, i)] += 4.0;
            }
            let b: Vec<f64> = (0..8).map(|_| rng.random_range(-5.0..5.0)).collect();
            let x = solve_linear(&a, &b).unwrap();
            let r: Vec<f64> = a.mul_vec(&x).iter().zip(&b).map(|(p, q)| p - q).collect();
            assert!(norm_inf(&r) <= 1e-10 * (1.0 + norm_inf(&b)));
        }
    }

    #[test]
    fn singular_solve_is_reported() {
        let a = DenseMatrix::from_rows(&[[1.0, 2.0], [2.0, 4.0]]).unwrap();
        assert!(matches!(
            solve_linear(&a, &[1.0, 1.0]),
            Err(Error::SingularMatrix { column: 1 })
        ));
        assert!(matches!(
            solve_linear(&DenseMatrix::zeros(2, 2), &[0.0, 0.0]),
            Err(Error::SingularMatrix { column: 0 })
        ));
    }

    #[test]
    fn pinv_of_identity_and_singular_diagonal() {
        let p = pseudo_inverse(&DenseMatrix::identity(2), DEFAULT_RCOND);
        assert!(p.max_abs_diff(&DenseMatrix::identity(2)) < 1e-15);
        let p = pseudo_inverse(&DenseMatrix::diag(&[2.0, 0.0]), DEFAULT_RCOND);
        assert!(p.max_abs_diff(&DenseMatrix::diag(&[0.5, 0.0])) < 1e-15);
    }

    #[test]
    fn pinv_rank_deficient_penrose() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        // 6x4 of rank 2.
        let a = random_matrix(&mut rng, 6, 2).matmul(&random_matrix(&mut rng, 2, 4));
        let p = pseudo_inverse(&a, DEFAULT_RCOND);
        let apa = a.matmul(&p).matmul(&a);
        let pap = p.matmul(&a).matmul(&p);
        let ap = a.matmul(&p);
        let pa = p.matmul(&a);
        assert!(apa.max_abs_diff(&a) < 1e-8);
        assert!(pap.max_abs_diff(&p) < 1e-8);
        assert!(ap.max_abs_diff(&ap.transpose()) < 1e-8);
        assert!(pa.max_abs_diff(&pa.transpose()) < 1e-8);
        assert_eq!(rank(&a, 1e-10), 2);
    }

    #[test]
    fn svd_reconstructs() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (m, n) in [(5, 3), (3, 5), (4, 4)] {
            let a = random_matrix(&mut rng, m, n);
            let s = svd(&a);
            let us = {
                let mut us = s.u.clone();
                for i in 0..us.rows() {
                    for k in 0..us.cols() {
                        us[(i, k)] *= s.singular_values[k];
                    }
                }
                us
            };
            assert!(us.matmul(&s.v.transpose()).max_abs_diff(&a) < 1e-12);
            assert!(s.singular_values.windows(2).all(|w| w[0] >= w[1]));
        }
    }

    #[test]
    fn lse_cases() {
        assert!((log_sum_exp(&[0.0, 0.0]).unwrap() - 2f64.ln()).abs() < 1e-15);
        let big = log_sum_exp(&[1000.0, 1000.0]).unwrap();
        assert!((big - (1000.0 + 2f64.ln())).abs() < 1e-12);
        assert!(matches!(log_sum_exp(&[]), Err(Error::EmptyInput)));
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let v: Vec<f64> = (0..10).map(|_| rng.random_range(-3.0..3.0)).collect();
        let naive = v.iter().map(|x| x.exp()).sum::<f64>().ln();
        assert!((log_sum_exp(&v).unwrap() - naive).abs() < 1e-13);
    }

    #[test]
    fn fd_linear_and_quadratic() {
        let m = DenseMatrix::from_rows(&[[1.0, -2.0, 0.5], [3.0, 0.0, 4.0]]).unwrap();
        let mc = m.clone();
        let j = jacobian_fd(
            move |z| mc.mul_vec(z),
            &[0.3, -1.0, 2.0],
            DEFAULT_FD_STEP,
            Execution::default(),
        )
        .unwrap();
        assert!(j.max_abs_diff(&m) < 1e-6);

        let j = jacobian_fd(
            |z| vec![z[0] * z[0], z[0] * z[1]],
            &[1.0, 2.0],
            DEFAULT_FD_STEP,
            Execution::Sequential,
        )
        .unwrap();
        let expect = DenseMatrix::from_rows(&[[2.0, 0.0], [2.0, 1.0]]).unwrap();
        assert!(j.max_abs_diff(&expect) < 1e-5);
    }

    #[test]
    fn fd_reports_non_finite() {
        let r = jacobian_fd(
            |z| vec![if z[1] > 0.0 { f64::NAN } else { 0.0 }],
            &[0.0, 0.0],
            1e-6,
            Execution::Sequential,
        );
        assert!(matches!(
            r,
            Err(Error::NonFiniteEvaluation { coordinate: 1 })
        ));
    }
}
