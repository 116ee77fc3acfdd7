use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, invalid, Error, Result};

/// Closed-form proximable function families. All are finite everywhere.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProxKind {
    Zero,
    /// `w * ||u||_1`
    L1 { weight: f64 },
    /// `(mu / 2) * ||u||^2`
    SquaredL2 { mu: f64 },
    /// `w * ||u||_1 + (mu / 2) * ||u||^2`
    ElasticNet { weight: f64, mu: f64 },
    /// `w * ||u - c||_1`
    ShiftedL1 { weight: f64, shift: Vec<f64> },
}

/// A proximable function on `R^dim`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ProxRepr", into = "ProxRepr")]
pub struct ProxFunction {
    kind: ProxKind,
    dim: usize,
}

/// One coordinate of a separable function: `w * |t - c| + (mu / 2) * t^2`.
///
/// Every [`ProxKind`] decomposes into these; `c` and `mu` are never both nonzero.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScalarPiece {
    pub w: f64,
    pub c: f64,
    pub mu: f64,
}

pub(crate) fn soft_threshold(v: f64, t: f64) -> f64 {
    if v > t {
        v - t
    } else if v < -t {
        v + t
    } else {
        0.0
    }
}

impl ScalarPiece {
    pub fn value(&self, t: f64) -> f64 {
        self.w * (t - self.c).abs() + 0.5 * self.mu * t * t
    }

    /// `argmin_u piece(u) + (rho / 2) (u - v)^2`
    #[inline]
    pub fn prox(&self, v: f64, rho: f64) -> f64 {
        if self.mu == 0.0 {
            self.c + soft_threshold(v - self.c, self.w / rho)
        } else {
            soft_threshold(v, self.w / rho) * (rho / (self.mu + rho))
        }
    }

    /// Distance from `g` to the subdifferential of the piece at `t`.
    pub fn subgradient_distance(&self, t: f64, g: f64) -> f64 {
        let r = g - self.mu * t;
        if self.w > 0.0 && t == self.c {
            (r.abs() - self.w).max(0.0)
        } else if self.w > 0.0 {
            (r - self.w * (t - self.c).signum()).abs()
        } else {
            r.abs()
        }
    }
}

impl ProxFunction {
    pub fn new(kind: ProxKind, dim: usize) -> Result<Self> {
        match &kind {
            ProxKind::Zero => {}
            ProxKind::L1 { weight } => positive("L1 weight", *weight)?,
            ProxKind::SquaredL2 { mu } => positive("SquaredL2 mu", *mu)?,
            ProxKind::ElasticNet { weight, mu } => {
                positive("ElasticNet weight", *weight)?;
                positive("ElasticNet mu", *mu)?;
            }
            ProxKind::ShiftedL1 { weight, shift } => {
                positive("ShiftedL1 weight", *weight)?;
                check_len("ShiftedL1 shift", shift.len(), dim)?;
                if shift.iter().any(|c| !c.is_finite()) {
                    return invalid("ShiftedL1 shift must be finite");
                }
            }
        }
        Ok(Self { kind, dim })
    }

    pub fn zero(dim: usize) -> Self {
        Self {
            kind: ProxKind::Zero,
            dim,
        }
    }

    pub fn l1(weight: f64, dim: usize) -> Result<Self> {
        Self::new(ProxKind::L1 { weight }, dim)
    }

    pub fn squared_l2(mu: f64, dim: usize) -> Result<Self> {
        Self::new(ProxKind::SquaredL2 { mu }, dim)
    }

    pub fn elastic_net(weight: f64, mu: f64, dim: usize) -> Result<Self> {
        Self::new(ProxKind::ElasticNet { weight, mu }, dim)
    }

    pub fn shifted_l1(weight: f64, shift: Vec<f64>) -> Result<Self> {
        let dim = shift.len();
        Self::new(ProxKind::ShiftedL1 { weight, shift }, dim)
    }

    pub fn kind(&self) -> &ProxKind {
        &self.kind
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Strong convexity modulus.
    pub fn strong_convexity(&self) -> f64 {
        match self.kind {
            ProxKind::SquaredL2 { mu } | ProxKind::ElasticNet { mu, .. } => mu,
            _ => 0.0,
        }
    }

    #[inline]
    pub fn piece(&self, j: usize) -> ScalarPiece {
        match &self.kind {
            ProxKind::Zero => ScalarPiece { w: 0.0, c: 0.0, mu: 0.0 },
            ProxKind::L1 { weight } => ScalarPiece { w: *weight, c: 0.0, mu: 0.0 },
            ProxKind::SquaredL2 { mu } => ScalarPiece { w: 0.0, c: 0.0, mu: *mu },
            ProxKind::ElasticNet { weight, mu } => ScalarPiece { w: *weight, c: 0.0, mu: *mu },
            ProxKind::ShiftedL1 { weight, shift } => ScalarPiece {
                w: *weight,
                c: shift[j],
                mu: 0.0,
            },
        }
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        debug_assert_eq!(x.len(), self.dim);
        match &self.kind {
            ProxKind::Zero => 0.0,
            ProxKind::L1 { weight } => weight * x.iter().map(|v| v.abs()).sum::<f64>(),
            ProxKind::SquaredL2 { mu } => 0.5 * mu * x.iter().map(|v| v * v).sum::<f64>(),
            ProxKind::ElasticNet { weight, mu } => {
                weight * x.iter().map(|v| v.abs()).sum::<f64>()
                    + 0.5 * mu * x.iter().map(|v| v * v).sum::<f64>()
            }
            ProxKind::ShiftedL1 { weight, shift } => {
                weight * x.iter().zip(shift).map(|(v, c)| (v - c).abs()).sum::<f64>()
            }
        }
    }

    /// `argmin_u f(u) + (rho / 2) ||u - v||^2`.
    pub fn prox(&self, v: &Array1<f64>, rho: f64) -> Result<Array1<f64>> {
        check_len("prox: input", v.len(), self.dim)?;
        if !(rho > 0.0) {
            return invalid(format!("prox: rho must be positive, got {rho}"));
        }
        let mut out = Array1::zeros(self.dim);
        self.prox_into(v.as_slice().unwrap(), rho, out.as_slice_mut().unwrap());
        Ok(out)
    }

    /// Unchecked prox into a caller buffer.
    pub fn prox_into(&self, v: &[f64], rho: f64, out: &mut [f64]) {
        debug_assert_eq!(v.len(), self.dim);
        for (j, (o, &vj)) in out.iter_mut().zip(v).enumerate() {
            *o = self.piece(j).prox(vj, rho);
        }
    }

    /// Euclidean distance from `g` to the subdifferential of `f` at `x`.
    pub fn subgradient_distance(&self, x: &[f64], g: &[f64]) -> f64 {
        debug_assert_eq!(x.len(), self.dim);
        debug_assert_eq!(g.len(), self.dim);
        x.iter()
            .zip(g)
            .enumerate()
            .map(|(j, (&t, &gj))| {
                let d = self.piece(j).subgradient_distance(t, gj);
                d * d
            })
            .sum::<f64>()
            .sqrt()
    }
}

fn positive(what: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        invalid(format!("{what} must be positive and finite, got {v}"))
    }
}

#[derive(Serialize, Deserialize)]
struct ProxRepr {
    dim: usize,
    #[serde(flatten)]
    kind: ProxKind,
}

impl TryFrom<ProxRepr> for ProxFunction {
    type Error = Error;

    fn try_from(r: ProxRepr) -> Result<Self> {
        ProxFunction::new(r.kind, r.dim)
    }
}

impl From<ProxFunction> for ProxRepr {
    fn from(f: ProxFunction) -> Self {
        ProxRepr {
            dim: f.dim,
            kind: f.kind,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    /// Ternary search for the minimizer of a unimodal scalar function on [lo, hi].
    /// Bisection on the right derivative of a convex scalar function, which is
    /// nondecreasing; its sign change brackets the minimizer to machine precision.
    fn right_derivative_root(d: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if d(mid) < 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    /// Bisection on a monotone scalar equation g(u) = 0.
    fn bisect(g: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if g(lo).signum() == g(mid).signum() {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn zero_prox_is_identity() {
        let f = ProxFunction::zero(2);
        assert_eq!(f.prox(&array![1.0, -2.0], 7.0).unwrap(), array![1.0, -2.0]);
    }

    #[test]
    fn l1_prox_matches_derivative_bisection() {
        let f = ProxFunction::l1(1.0, 3).unwrap();
        let v = [2.0, -0.5, 0.0];
        let got = f.prox(&Array1::from(v.to_vec()), 1.0).unwrap();
        assert_eq!(got, array![1.0, 0.0, 0.0]);
        for (j, &vj) in v.iter().enumerate() {
            let right_sign = |u: f64| if u >= 0.0 { 1.0 } else { -1.0 };
            let oracle = right_derivative_root(|u| right_sign(u) + (u - vj), -10.0, 10.0);
            assert!((got[j] - oracle).abs() < 1e-9, "coord {j}: {} vs {oracle}", got[j]);
        }
    }

    #[test]
    fn squared_l2_prox_matches_bisection() {
        let f = ProxFunction::squared_l2(0.2, 1).unwrap();
        let got = f.prox(&array![1.0], 0.8).unwrap();
        let oracle = bisect(|u| 0.2 * u + 0.8 * (u - 1.0), -10.0, 10.0);
        assert!((got[0] - 0.8).abs() < 1e-15);
        assert!((got[0] - oracle).abs() < 1e-12);
    }

    #[test]
    fn elastic_net_and_shifted_forms() {
        let f = ProxFunction::elastic_net(1.0, 1.0, 2).unwrap();
        // threshold by w/rho = 0.5 then scale by rho / (mu + rho) = 2/3
        let got = f.prox(&array![2.0, -0.25], 2.0).unwrap();
        assert!((got[0] - 1.0).abs() < 1e-15);
        assert_eq!(got[1], 0.0);

        let g = ProxFunction::shifted_l1(1.0, vec![2.0, 2.0]).unwrap();
        let got = g.prox(&array![0.0, 2.5], 1.0).unwrap();
        assert_eq!(got, array![1.0, 2.0]);
    }

    #[test]
    fn invalid_parameters_are_rejected() {
        assert!(ProxFunction::l1(0.0, 2).is_err());
        assert!(ProxFunction::squared_l2(-1.0, 2).is_err());
        assert!(ProxFunction::new(
            ProxKind::ShiftedL1 { weight: 1.0, shift: vec![1.0] },
            2
        )
        .is_err());
        let f = ProxFunction::l1(1.0, 2).unwrap();
        assert!(f.prox(&array![1.0, 2.0], 0.0).is_err());
        assert!(f.prox(&array![1.0], 1.0).is_err());
    }

    #[test]
    fn strong_convexity_by_kind() {
        assert_eq!(ProxFunction::zero(1).strong_convexity(), 0.0);
        assert_eq!(ProxFunction::l1(1.0, 1).unwrap().strong_convexity(), 0.0);
        assert_eq!(ProxFunction::squared_l2(0.3, 1).unwrap().strong_convexity(), 0.3);
        assert_eq!(
            ProxFunction::elastic_net(1.0, 0.2, 1).unwrap().strong_convexity(),
            0.2
        );
    }

    #[test]
    fn subgradient_distance_l1_intervals() {
        let f = ProxFunction::l1(3.0, 3).unwrap();
        // inside [-3, 3] at zeros
        assert_eq!(f.subgradient_distance(&[0.0, 0.0, 0.0], &[2.0, 3.0, 1.0]), 0.0);
        // one coordinate outside by 1
        assert!((f.subgradient_distance(&[0.0, 0.0, 0.0], &[4.0, 3.0, 1.0]) - 1.0).abs() < 1e-15);
        // away from zero the subdifferential is the single point w*sign
        assert!((f.subgradient_distance(&[1.0, 0.0, 0.0], &[2.0, 0.0, 0.0]) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn serde_shape() {
        let f = ProxFunction::shifted_l1(1.0, vec![2.0, 2.0]).unwrap();
        let text = serde_json::to_string(&f).unwrap();
        assert_eq!(text, r#"{"dim":2,"kind":"shifted_l1","weight":1.0,"shift":[2.0,2.0]}"#);
        let back: ProxFunction = serde_json::from_str(&text).unwrap();
        assert_eq!(back, f);
        assert!(serde_json::from_str::<ProxFunction>(r#"{"dim":2,"kind":"l1","weight":-1.0}"#).is_err());
    }

    fn any_function(dim: usize) -> impl Strategy<Value = ProxFunction> {
        prop_oneof![
            Just(ProxFunction::zero(dim)),
            (0.01..5.0f64).prop_map(move |w| ProxFunction::l1(w, dim).unwrap()),
            (0.01..5.0f64).prop_map(move |m| ProxFunction::squared_l2(m, dim).unwrap()),
            (0.01..5.0f64, 0.01..5.0f64)
                .prop_map(move |(w, m)| ProxFunction::elastic_net(w, m, dim).unwrap()),
            (0.01..5.0f64, prop::collection::vec(-3.0..3.0f64, dim))
                .prop_map(|(w, c)| ProxFunction::shifted_l1(w, c).unwrap()),
        ]
    }

    proptest! {
        #[test]
        fn prox_is_nonexpansive(
            f in any_function(4),
            v1 in prop::collection::vec(-10.0..10.0f64, 4),
            v2 in prop::collection::vec(-10.0..10.0f64, 4),
            rho in 0.01..10.0f64,
        ) {
            let v1 = Array1::from(v1);
            let v2 = Array1::from(v2);
            let p1 = f.prox(&v1, rho).unwrap();
            let p2 = f.prox(&v2, rho).unwrap();
            let d_out = (&p1 - &p2).mapv(|x| x * x).sum().sqrt();
            let d_in = (&v1 - &v2).mapv(|x| x * x).sum().sqrt();
            prop_assert!(d_out <= d_in + 1e-12);
        }

        #[test]
        fn prox_satisfies_optimality(
            f in any_function(4),
            v in prop::collection::vec(-10.0..10.0f64, 4),
            rho in 0.01..10.0f64,
        ) {
            let v = Array1::from(v);
            let u = f.prox(&v, rho).unwrap();
            let g = (&v - &u) * rho;
            let d = f.subgradient_distance(u.as_slice().unwrap(), g.as_slice().unwrap());
            prop_assert!(d <= 1e-10, "distance {}", d);
        }
    }
}
