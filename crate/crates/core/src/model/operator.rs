use std::sync::OnceLock;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, invalid, Error, Result};

const POWER_REL_TOL: f64 = 1e-10;
const POWER_MAX_ITER: usize = 10_000;

/// The four operator shapes the solvers understand.
#[derive(Clone, Debug, PartialEq)]
pub enum OperatorKind {
    /// Row-major dense matrix.
    Dense(Array2<f64>),
    /// Square diagonal matrix.
    Diagonal(Array1<f64>),
    Identity(usize),
    Zero { rows: usize, cols: usize },
}

/// A linear map `R^cols -> R^rows` with a lazily cached spectral norm.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(try_from = "OperatorRepr", into = "OperatorRepr")]
pub struct LinearOperator {
    kind: OperatorKind,
    norm: OnceLock<f64>,
}

impl PartialEq for LinearOperator {
    fn eq(&self, other: &Self) -> bool {
        self.kind == other.kind
    }
}

impl LinearOperator {
    pub fn dense(matrix: Array2<f64>) -> Self {
        Self::from_kind(OperatorKind::Dense(matrix.as_standard_layout().into_owned()))
    }

    /// Builds a dense operator from row-major nested rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let m = rows.len();
        if m == 0 {
            return invalid("dense operator needs at least one row");
        }
        let n = rows[0].len();
        if rows.iter().any(|r| r.len() != n) {
            return invalid("dense operator rows have unequal lengths");
        }
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        let matrix = Array2::from_shape_vec((m, n), flat)
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
        Ok(Self::dense(matrix))
    }

    pub fn diagonal(diag: Array1<f64>) -> Self {
        Self::from_kind(OperatorKind::Diagonal(diag))
    }

    pub fn identity(n: usize) -> Self {
        Self::from_kind(OperatorKind::Identity(n))
    }

    pub fn zero(rows: usize, cols: usize) -> Self {
        Self::from_kind(OperatorKind::Zero { rows, cols })
    }

    fn from_kind(kind: OperatorKind) -> Self {
        Self {
            kind,
            norm: OnceLock::new(),
        }
    }

    pub fn kind(&self) -> &OperatorKind {
        &self.kind
    }

    pub fn rows(&self) -> usize {
        match &self.kind {
            OperatorKind::Dense(m) => m.nrows(),
            OperatorKind::Diagonal(d) => d.len(),
            OperatorKind::Identity(n) => *n,
            OperatorKind::Zero { rows, .. } => *rows,
        }
    }

    pub fn cols(&self) -> usize {
        match &self.kind {
            OperatorKind::Dense(m) => m.ncols(),
            OperatorKind::Diagonal(d) => d.len(),
            OperatorKind::Identity(n) => *n,
            OperatorKind::Zero { cols, .. } => *cols,
        }
    }

    /// Returns `s * self`. Identity scales into a diagonal.
    pub fn scaled(&self, s: f64) -> Self {
        let kind = match &self.kind {
            OperatorKind::Dense(m) => OperatorKind::Dense(m * s),
            OperatorKind::Diagonal(d) => OperatorKind::Diagonal(d * s),
            OperatorKind::Identity(n) => OperatorKind::Diagonal(Array1::from_elem(*n, s)),
            OperatorKind::Zero { rows, cols } => OperatorKind::Zero {
                rows: *rows,
                cols: *cols,
            },
        };
        let out = Self::from_kind(kind);
        if let Some(n) = self.norm.get() {
            let _ = out.norm.set(n * s.abs());
        }
        out
    }

    /// `op * v`.
    pub fn apply(&self, v: &Array1<f64>) -> Result<Array1<f64>> {
        check_len("apply: input", v.len(), self.cols())?;
        let mut out = Array1::zeros(self.rows());
        self.apply_add(v.as_slice().unwrap(), 1.0, out.as_slice_mut().unwrap());
        Ok(out)
    }

    /// `op^T * u`.
    pub fn adjoint_apply(&self, u: &Array1<f64>) -> Result<Array1<f64>> {
        check_len("adjoint_apply: input", u.len(), self.rows())?;
        let mut out = Array1::zeros(self.cols());
        self.adjoint_add(u.as_slice().unwrap(), 1.0, out.as_slice_mut().unwrap());
        Ok(out)
    }

    /// `out += s * op * v` without dimension checks beyond debug assertions.
    pub fn apply_add(&self, v: &[f64], s: f64, out: &mut [f64]) {
        debug_assert_eq!(v.len(), self.cols());
        debug_assert_eq!(out.len(), self.rows());
        match &self.kind {
            OperatorKind::Dense(m) => {
                let v = ndarray::ArrayView1::from(v);
                for (o, row) in out.iter_mut().zip(m.rows()) {
                    *o += s * row.dot(&v);
                }
            }
            OperatorKind::Diagonal(d) => {
                for ((o, &di), &vi) in out.iter_mut().zip(d.iter()).zip(v) {
                    *o += s * (di * vi);
                }
            }
            OperatorKind::Identity(_) => {
                for (o, &vi) in out.iter_mut().zip(v) {
                    *o += s * vi;
                }
            }
            OperatorKind::Zero { .. } => {}
        }
    }

    /// `out += s * op^T * u`.
    pub fn adjoint_add(&self, u: &[f64], s: f64, out: &mut [f64]) {
        debug_assert_eq!(u.len(), self.rows());
        debug_assert_eq!(out.len(), self.cols());
        match &self.kind {
            OperatorKind::Dense(m) => {
                for (&ui, row) in u.iter().zip(m.rows()) {
                    let w = s * ui;
                    if w == 0.0 {
                        continue;
                    }
                    for (o, &r) in out.iter_mut().zip(row.iter()) {
                        *o += w * r;
                    }
                }
            }
            OperatorKind::Zero { .. } => {}
            // square diagonal maps are self-adjoint
            OperatorKind::Diagonal(_) | OperatorKind::Identity(_) => self.apply_add(u, s, out),
        }
    }

    /// Diagonal of the operator when it is square and diagonal (including identity).
    /// `Zero` reports `None`; callers treat it as contributing nothing.
    pub fn diagonal_entries(&self) -> Option<Array1<f64>> {
        match &self.kind {
            OperatorKind::Diagonal(d) => Some(d.clone()),
            OperatorKind::Identity(n) => Some(Array1::ones(*n)),
            _ => None,
        }
    }

    pub fn is_zero(&self) -> bool {
        match &self.kind {
            OperatorKind::Zero { .. } => true,
            OperatorKind::Diagonal(d) => d.iter().all(|&x| x == 0.0),
            OperatorKind::Dense(m) => m.iter().all(|&x| x == 0.0),
            OperatorKind::Identity(n) => *n == 0,
        }
    }

    /// Largest singular value. Exact for the structured kinds; power iteration
    /// on `op^T op` for dense matrices. Cached after the first call.
    pub fn operator_norm(&self) -> f64 {
        *self.norm.get_or_init(|| match &self.kind {
            OperatorKind::Dense(m) => dense_norm(m),
            OperatorKind::Diagonal(d) => d.iter().fold(0.0_f64, |a, &x| a.max(x.abs())),
            OperatorKind::Identity(n) => {
                if *n == 0 {
                    0.0
                } else {
                    1.0
                }
            }
            OperatorKind::Zero { .. } => 0.0,
        })
    }

    pub fn cached_norm(&self) -> Option<f64> {
        self.norm.get().copied()
    }

    pub fn to_dense(&self) -> Array2<f64> {
        match &self.kind {
            OperatorKind::Dense(m) => m.clone(),
            OperatorKind::Diagonal(d) => Array2::from_diag(d),
            OperatorKind::Identity(n) => Array2::eye(*n),
            OperatorKind::Zero { rows, cols } => Array2::zeros((*rows, *cols)),
        }
    }
}

fn power_iteration(m: &Array2<f64>, start: Array1<f64>) -> f64 {
    let mut v = start;
    let nv = v.dot(&v).sqrt();
    if nv == 0.0 {
        return 0.0;
    }
    v /= nv;
    let mut estimate = 0.0_f64;
    for _ in 0..POWER_MAX_ITER {
        let av = m.dot(&v);
        let next = av.dot(&av);
        let mut w = m.t().dot(&av);
        let nw = w.dot(&w).sqrt();
        if nw == 0.0 {
            return next;
        }
        w /= nw;
        v = w;
        let done = (next - estimate).abs() <= POWER_REL_TOL * next.abs();
        estimate = next;
        if done {
            break;
        }
    }
    estimate
}

fn dense_norm(m: &Array2<f64>) -> f64 {
    let n = m.ncols();
    if n == 0 || m.nrows() == 0 {
        return 0.0;
    }
    let sigma_sq = power_iteration(m, Array1::ones(n));
    // The all-ones start can lie in an invariant subspace that misses the top
    // singular vector; the largest column norm is a lower bound that exposes it.
    let (best_col, col_sq) = m
        .columns()
        .into_iter()
        .map(|c| c.dot(&c))
        .enumerate()
        .fold((0, 0.0), |acc, (j, s)| if s > acc.1 { (j, s) } else { acc });
    if sigma_sq < col_sq * (1.0 - 1e-9) {
        let mut e = Array1::zeros(n);
        e[best_col] = 1.0;
        return power_iteration(m, e).max(col_sq).sqrt();
    }
    sigma_sq.sqrt()
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum OperatorRepr {
    Dense {
        data: Vec<Vec<f64>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        norm: Option<f64>,
    },
    Diagonal {
        diag: Vec<f64>,
    },
    Identity {
        n: usize,
    },
    Zero {
        rows: usize,
        cols: usize,
    },
}

impl TryFrom<OperatorRepr> for LinearOperator {
    type Error = Error;

    fn try_from(repr: OperatorRepr) -> Result<Self> {
        Ok(match repr {
            OperatorRepr::Dense { data, norm } => {
                let op = LinearOperator::from_rows(&data)?;
                if let Some(n) = norm {
                    if !(n.is_finite() && n >= 0.0) {
                        return invalid("dense operator norm must be finite and nonnegative");
                    }
                    let _ = op.norm.set(n);
                }
                op
            }
            OperatorRepr::Diagonal { diag } => LinearOperator::diagonal(Array1::from(diag)),
            OperatorRepr::Identity { n } => LinearOperator::identity(n),
            OperatorRepr::Zero { rows, cols } => LinearOperator::zero(rows, cols),
        })
    }
}

impl From<LinearOperator> for OperatorRepr {
    fn from(op: LinearOperator) -> Self {
        let norm = op.cached_norm();
        match op.kind {
            OperatorKind::Dense(m) => OperatorRepr::Dense {
                data: m.rows().into_iter().map(|r| r.to_vec()).collect(),
                norm,
            },
            OperatorKind::Diagonal(d) => OperatorRepr::Diagonal { diag: d.to_vec() },
            OperatorKind::Identity(n) => OperatorRepr::Identity { n },
            OperatorKind::Zero { rows, cols } => OperatorRepr::Zero { rows, cols },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    fn naive_matvec(m: &[Vec<f64>], v: &[f64]) -> Vec<f64> {
        m.iter()
            .map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum())
            .collect()
    }

    fn naive_transpose_matvec(m: &[Vec<f64>], u: &[f64]) -> Vec<f64> {
        let cols = m[0].len();
        let mut out = vec![0.0; cols];
        for j in 0..cols {
            for (i, row) in m.iter().enumerate() {
                out[j] += row[j] * u[i];
            }
        }
        out
    }

    #[test]
    fn identity_apply_returns_input() {
        let op = LinearOperator::identity(3);
        assert_eq!(op.apply(&array![1.0, 2.0, 3.0]).unwrap(), array![1.0, 2.0, 3.0]);
        assert_eq!(
            op.adjoint_apply(&array![1.0, 2.0, 3.0]).unwrap(),
            array![1.0, 2.0, 3.0]
        );
    }

    #[test]
    fn diagonal_apply_and_adjoint() {
        let op = LinearOperator::diagonal(array![2.0, 3.0, 1.0]);
        assert_eq!(op.apply(&array![1.0, 1.0, 1.0]).unwrap(), array![2.0, 3.0, 1.0]);
        assert_eq!(
            op.adjoint_apply(&array![1.0, 1.0, 1.0]).unwrap(),
            array![2.0, 3.0, 1.0]
        );
    }

    #[test]
    fn zero_apply_has_row_dimension() {
        let op = LinearOperator::zero(2, 3);
        assert_eq!(op.apply(&array![5.0, 6.0, 7.0]).unwrap(), array![0.0, 0.0]);
    }

    #[test]
    fn dense_adjoint_matches_triple_loop() {
        let rows = vec![vec![1.0, 0.0], vec![1.0, 1.0], vec![0.0, 1.0]];
        let op = LinearOperator::from_rows(&rows).unwrap();
        let got = op.adjoint_apply(&array![1.0, 1.0, 1.0]).unwrap();
        let want = naive_transpose_matvec(&rows, &[1.0, 1.0, 1.0]);
        assert_eq!(got.to_vec(), want);
        assert_eq!(got, array![2.0, 2.0]);
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let op = LinearOperator::identity(3);
        assert!(matches!(
            op.apply(&array![1.0, 2.0]),
            Err(Error::InvalidArgument(_))
        ));
        assert!(op.adjoint_apply(&array![1.0]).is_err());
    }

    #[test]
    fn structured_norms_are_exact() {
        assert_eq!(LinearOperator::identity(5).operator_norm(), 1.0);
        assert_eq!(
            LinearOperator::diagonal(array![2.0, 3.0, 1.0]).operator_norm(),
            3.0
        );
        assert_eq!(
            LinearOperator::diagonal(array![2.0, -4.0]).operator_norm(),
            4.0
        );
        assert_eq!(LinearOperator::zero(3, 2).operator_norm(), 0.0);
    }

    // Singular values of a 2x2 matrix from the closed-form eigenvalues of M^T M.
    fn svd_2x2_max(m: [[f64; 2]; 2]) -> f64 {
        let a = m[0][0] * m[0][0] + m[1][0] * m[1][0];
        let d = m[0][1] * m[0][1] + m[1][1] * m[1][1];
        let b = m[0][0] * m[0][1] + m[1][0] * m[1][1];
        let tr = a + d;
        let det = a * d - b * b;
        ((tr + (tr * tr - 4.0 * det).max(0.0).sqrt()) / 2.0).sqrt()
    }

    #[test]
    fn dense_norm_matches_closed_form_2x2() {
        let op = LinearOperator::from_rows(&[vec![3.0, 0.0], vec![4.0, 0.0]]).unwrap();
        let want = svd_2x2_max([[3.0, 0.0], [4.0, 0.0]]);
        assert!((want - 5.0).abs() < 1e-12);
        assert!((op.operator_norm() - want).abs() < 1e-9);
    }

    #[test]
    fn dense_norm_escapes_orthogonal_start() {
        // (1,1) is in the kernel, so the all-ones start sees nothing.
        let op = LinearOperator::from_rows(&[vec![1.0, -1.0]]).unwrap();
        assert!((op.operator_norm() - 2f64.sqrt()).abs() < 1e-9);
        let zero = LinearOperator::from_rows(&[vec![0.0, 0.0]]).unwrap();
        assert_eq!(zero.operator_norm(), 0.0);
    }

    #[test]
    fn serde_round_trip_keeps_row_major_layout() {
        let op = LinearOperator::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let text = serde_json::to_string(&op).unwrap();
        assert_eq!(text, r#"{"kind":"dense","data":[[1.0,2.0],[3.0,4.0]]}"#);
        let back: LinearOperator = serde_json::from_str(&text).unwrap();
        assert_eq!(back, op);
        let ragged = r#"{"kind":"dense","data":[[1.0],[3.0,4.0]]}"#;
        assert!(serde_json::from_str::<LinearOperator>(ragged).is_err());
    }

    fn dense_strategy() -> impl Strategy<Value = Vec<Vec<f64>>> {
        (1usize..5, 1usize..5).prop_flat_map(|(m, n)| {
            prop::collection::vec(prop::collection::vec(-3.0..3.0f64, n), m)
        })
    }

    proptest! {
        #[test]
        fn adjoint_is_consistent(rows in dense_strategy(), seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let op = LinearOperator::from_rows(&rows).unwrap();
            let v: Array1<f64> = (0..op.cols()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let u: Array1<f64> = (0..op.rows()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let lhs = op.apply(&v).unwrap().dot(&u);
            let rhs = v.dot(&op.adjoint_apply(&u).unwrap());
            prop_assert!((lhs - rhs).abs() <= 1e-10 * (1.0 + lhs.abs()));
            let naive = naive_matvec(&rows, v.as_slice().unwrap());
            for (a, b) in op.apply(&v).unwrap().iter().zip(&naive) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }

        #[test]
        fn norm_bounds_every_direction(rows in dense_strategy(), seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let op = LinearOperator::from_rows(&rows).unwrap();
            let mut v: Array1<f64> = (0..op.cols()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let nv = v.dot(&v).sqrt();
            prop_assume!(nv > 1e-6);
            v /= nv;
            let av = op.apply(&v).unwrap();
            prop_assert!(op.operator_norm() >= av.dot(&av).sqrt() - 1e-6);
        }
    }
}
