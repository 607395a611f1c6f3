//! Domain types for the coupled transport-PDE / SDE plant, structural checks and the
//! stochastic-integral sanity check.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::linalg;

/// A matrix-valued function of one real variable (space on `[0,1]` or time).
#[derive(Clone, Debug, PartialEq)]
pub enum MatrixFn {
    Const(DMatrix<f64>),
    /// `scale * exp(-theta * s)`.
    ExpDecay { theta: f64, scale: DMatrix<f64> },
    /// Uniform samples on `[lo, hi]`, linearly interpolated and clamped outside.
    Samples { lo: f64, hi: f64, values: Vec<DMatrix<f64>> },
}

impl MatrixFn {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        MatrixFn::Const(DMatrix::zeros(rows, cols))
    }

    pub fn constant_vec(v: &[f64]) -> Self {
        MatrixFn::Const(DMatrix::from_column_slice(v.len(), 1, v))
    }

    /// Samples `f` on `n` uniform points of `[lo, hi]`.
    pub fn sampled<F: Fn(f64) -> DMatrix<f64>>(lo: f64, hi: f64, n: usize, f: F) -> Self {
        let n = n.max(2);
        let values = (0..n).map(|k| f(lo + (hi - lo) * k as f64 / (n - 1) as f64)).collect();
        MatrixFn::Samples { lo, hi, values }
    }

    pub fn shape(&self) -> (usize, usize) {
        match self {
            MatrixFn::Const(m) => m.shape(),
            MatrixFn::ExpDecay { scale, .. } => scale.shape(),
            MatrixFn::Samples { values, .. } => values.first().map_or((0, 0), |m| m.shape()),
        }
    }

    pub fn eval(&self, s: f64) -> DMatrix<f64> {
        match self {
            MatrixFn::Const(m) => m.clone(),
            MatrixFn::ExpDecay { theta, scale } => scale * (-theta * s).exp(),
            MatrixFn::Samples { lo, hi, values } => {
                let n = values.len();
                if n == 1 || hi <= lo {
                    return values[0].clone();
                }
                let p = ((s - lo) / (hi - lo) * (n - 1) as f64).clamp(0.0, (n - 1) as f64);
                let i = (p.floor() as usize).min(n - 2);
                let w = p - i as f64;
                &values[i] * (1.0 - w) + &values[i + 1] * w
            }
        }
    }

    pub fn eval_entry(&self, s: f64, r: usize, c: usize) -> f64 {
        match self {
            MatrixFn::Const(m) => m[(r, c)],
            MatrixFn::ExpDecay { theta, scale } => scale[(r, c)] * (-theta * s).exp(),
            MatrixFn::Samples { .. } => self.eval(s)[(r, c)],
        }
    }

    pub fn is_identically_zero(&self) -> bool {
        match self {
            MatrixFn::Const(m) | MatrixFn::ExpDecay { scale: m, .. } => m.iter().all(|v| *v == 0.0),
            MatrixFn::Samples { values, .. } => values.iter().all(|m| m.iter().all(|v| *v == 0.0)),
        }
    }

    /// Sample points used by structural checks: the stored grid for sampled functions, a
    /// fixed uniform grid otherwise.
    fn check_points(&self, lo: f64, hi: f64) -> Vec<f64> {
        let n = match self {
            MatrixFn::Samples { values, .. } => values.len(),
            _ => 33,
        };
        (0..n.max(2)).map(|k| lo + (hi - lo) * k as f64 / (n.max(2) - 1) as f64).collect()
    }
}

/// The interconnected plant: `n` rightward and `m` leftward transport equations on `[0,1]`
/// coupled to an `N`-dimensional linear SDE through the boundary at `x = 0`.
#[derive(Clone, Debug)]
pub struct CoupledSystem {
    pub lambda: Vec<f64>,
    pub mu: Vec<f64>,
    pub sigma_pp: MatrixFn,
    pub sigma_pm: MatrixFn,
    pub sigma_mp: MatrixFn,
    pub sigma_mm: MatrixFn,
    /// Reflection at `x = 0` (`n x m`).
    pub qb: DMatrix<f64>,
    /// Reflection at `x = 1` (`m x n`).
    pub rb: DMatrix<f64>,
    /// SDE-to-PDE coupling at `x = 0` (`n x N`).
    pub mb: DMatrix<f64>,
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    /// Diffusion direction `sigma(t)` (`N x 1`).
    pub sigma_t: MatrixFn,
    pub horizon: f64,
    pub x0: DVector<f64>,
    pub u0: MatrixFn,
    pub v0: MatrixFn,
}

impl CoupledSystem {
    pub fn n(&self) -> usize {
        self.lambda.len()
    }
    pub fn m(&self) -> usize {
        self.mu.len()
    }
    pub fn big_n(&self) -> usize {
        self.a.nrows()
    }

    pub fn check_dims(&self) -> Result<()> {
        let (n, m, nn) = (self.n(), self.m(), self.big_n());
        let want = [
            ("sigma_pp", self.sigma_pp.shape(), (n, n)),
            ("sigma_pm", self.sigma_pm.shape(), (n, m)),
            ("sigma_mp", self.sigma_mp.shape(), (m, n)),
            ("sigma_mm", self.sigma_mm.shape(), (m, m)),
            ("Q", self.qb.shape(), (n, m)),
            ("R", self.rb.shape(), (m, n)),
            ("M", self.mb.shape(), (n, nn)),
            ("A", self.a.shape(), (nn, nn)),
            ("B", self.b.shape(), (nn, m)),
            ("sigma_t", self.sigma_t.shape(), (nn, 1)),
            ("X0", (self.x0.len(), 1), (nn, 1)),
            ("u0", self.u0.shape(), (n, 1)),
            ("v0", self.v0.shape(), (m, 1)),
        ];
        for (name, got, exp) in want {
            if got != exp {
                return Err(Error::Dimension(format!("{name} is {got:?}, expected {exp:?}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct CheckItem {
    pub name: String,
    pub pass: bool,
    pub measured: String,
}

#[derive(Clone, Debug, Default, serde::Serialize)]
pub struct ValidationReport {
    pub items: Vec<CheckItem>,
    /// Spectral radius of the product of the two boundary reflections; reported only.
    pub reflection_radius: Option<f64>,
}

impl ValidationReport {
    pub fn ok(&self) -> bool {
        self.items.iter().all(|c| c.pass)
    }

    pub fn item(&self, name: &str) -> Option<&CheckItem> {
        self.items.iter().find(|c| c.name == name)
    }

    fn push(&mut self, name: &str, pass: bool, measured: String) {
        self.items.push(CheckItem { name: name.to_string(), pass, measured });
    }
}

fn strictly_increasing_positive(v: &[f64]) -> bool {
    !v.is_empty() && v[0] > 0.0 && v.windows(2).all(|w| w[1] > w[0])
}

/// Rank check of `[B, AB, ...]` with the smallest retained singular value.
pub fn controllability_item(a: &DMatrix<f64>, b: &DMatrix<f64>) -> CheckItem {
    let c = linalg::controllability_matrix(a, b);
    let s = linalg::singular_values(&c);
    let r = linalg::rank(&c);
    let smin = if r > 0 { s[r - 1] } else { 0.0 };
    CheckItem {
        name: "controllable".into(),
        pass: r == a.nrows(),
        measured: format!("rank {r} of {}, smallest singular value {smin:.3e}", a.nrows()),
    }
}

pub fn validate(sys: &CoupledSystem) -> ValidationReport {
    let mut rep = ValidationReport::default();
    let dims = sys.check_dims();
    rep.push("dimensions", dims.is_ok(), dims.err().map_or("consistent".into(), |e| e.to_string()));
    rep.push(
        "rightward speeds increasing",
        strictly_increasing_positive(&sys.lambda),
        format!("{:?}", sys.lambda),
    );
    rep.push(
        "leftward speeds increasing",
        strictly_increasing_positive(&sys.mu),
        format!("{:?}", sys.mu),
    );
    for (name, f) in [("sigma_pp diagonal zero", &sys.sigma_pp), ("sigma_mm diagonal zero", &sys.sigma_mm)] {
        let mut worst = 0.0f64;
        for x in f.check_points(0.0, 1.0) {
            let v = f.eval(x);
            for i in 0..v.nrows().min(v.ncols()) {
                worst = worst.max(v[(i, i)].abs());
            }
        }
        rep.push(name, worst == 0.0, format!("max |diag| {worst:.3e}"));
    }
    if sys.a.is_square() && sys.a.nrows() == sys.b.nrows() {
        rep.items.push(controllability_item(&sys.a, &sys.b));
    }
    if sys.rb.ncols() == sys.qb.nrows() && sys.m() > 0 {
        let prod = &sys.rb * &sys.qb;
        let rho = prod
            .complex_eigenvalues()
            .iter()
            .map(|z| z.norm())
            .fold(0.0, f64::max);
        rep.reflection_radius = Some(rho);
    }
    rep
}

/// Monte Carlo versus quadrature for `E[(int f1 dW)(int f2 dW)] = int f1 f2 ds` on `[0, t]`.
#[derive(Clone, Copy, Debug)]
pub struct IsometrySample {
    pub mc_estimate: f64,
    pub quadrature: f64,
    pub stderr: f64,
}

pub fn ito_isometry_check<F1, F2>(
    f1: F1,
    f2: F2,
    t: f64,
    paths: usize,
    steps: usize,
    seed: u64,
) -> Result<IsometrySample>
where
    F1: Fn(f64) -> f64,
    F2: Fn(f64) -> f64,
{
    if paths < 2 || steps == 0 || t <= 0.0 {
        return Err(Error::Config("isometry check needs paths >= 2, steps >= 1, t > 0".into()));
    }
    let h = t / steps as f64;
    let sq = h.sqrt();
    // Integrands frozen at cell midpoints; still deterministic, so the discrete sum is an
    // exact Gaussian with covariance sum(f1 f2) h.
    let g1: Vec<f64> = (0..steps).map(|k| f1((k as f64 + 0.5) * h)).collect();
    let g2: Vec<f64> = (0..steps).map(|k| f2((k as f64 + 0.5) * h)).collect();
    let grid: Vec<f64> = (0..=steps).map(|k| f1(k as f64 * h) * f2(k as f64 * h)).collect();
    let quadrature = linalg::trapz(&grid, h);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut mean, mut m2) = (0.0, 0.0);
    for p in 0..paths {
        rng.set_stream(p as u64);
        rng.set_word_pos(0);
        let (mut i1, mut i2) = (0.0, 0.0);
        for k in 0..steps {
            let z: f64 = StandardNormal.sample(&mut rng);
            let dw = z * sq;
            i1 += g1[k] * dw;
            i2 += g2[k] * dw;
        }
        let prod = i1 * i2;
        if !prod.is_finite() {
            return Err(Error::NonFinite(p));
        }
        let delta = prod - mean;
        mean += delta / (p + 1) as f64;
        m2 += delta * (prod - mean);
    }
    let var = m2 / (paths - 1) as f64;
    Ok(IsometrySample { mc_estimate: mean, quadrature, stderr: (var / paths as f64).sqrt() })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sim_like(a: &[f64], b: &[f64]) -> CoupledSystem {
        let n = 1;
        let m = 2;
        let nn = 2;
        CoupledSystem {
            lambda: vec![1.0],
            mu: vec![1.0, 2.0],
            sigma_pp: MatrixFn::zeros(n, n),
            sigma_pm: MatrixFn::zeros(n, m),
            sigma_mp: MatrixFn::zeros(m, n),
            sigma_mm: MatrixFn::zeros(m, m),
            qb: DMatrix::zeros(n, m),
            rb: DMatrix::zeros(m, n),
            mb: DMatrix::zeros(n, nn),
            a: DMatrix::from_row_slice(2, 2, a),
            b: DMatrix::from_row_slice(2, 2, b),
            sigma_t: MatrixFn::constant_vec(&[0.3, 0.3]),
            horizon: 1.0,
            x0: DVector::zeros(nn),
            u0: MatrixFn::zeros(n, 1),
            v0: MatrixFn::zeros(m, 1),
        }
    }

    #[test]
    fn experiment_pair_is_controllable() {
        let sys = sim_like(&[0.4, 0.4, 0.0, 0.4], &[2.0, -2.0, 0.0, 2.0]);
        let rep = validate(&sys);
        assert!(rep.ok(), "{rep:?}");
        assert!(rep.item("controllable").unwrap().measured.starts_with("rank 2"));
    }

    #[test]
    fn zero_drift_single_column_fails_rank() {
        let item = controllability_item(&DMatrix::zeros(2, 2), &DMatrix::from_row_slice(2, 1, &[1.0, 0.0]));
        assert!(!item.pass);
        assert!(item.measured.starts_with("rank 1"));
    }

    #[test]
    fn identity_input_is_full_rank() {
        let a = DMatrix::from_fn(4, 4, |i, j| ((i * 7 + j * 3) % 5) as f64 - 2.0);
        assert!(controllability_item(&a, &DMatrix::identity(4, 4)).pass);
    }

    #[test]
    fn non_monotone_speeds_rejected() {
        let mut sys = sim_like(&[0.4, 0.4, 0.0, 0.4], &[2.0, -2.0, 0.0, 2.0]);
        sys.mu = vec![2.0, 1.0];
        let rep = validate(&sys);
        assert!(!rep.ok());
        assert!(!rep.item("leftward speeds increasing").unwrap().pass);
    }

    #[test]
    fn nonzero_self_coupling_rejected() {
        let mut sys = sim_like(&[0.4, 0.4, 0.0, 0.4], &[2.0, -2.0, 0.0, 2.0]);
        sys.sigma_mm = MatrixFn::Const(DMatrix::from_row_slice(2, 2, &[0.1, 0.0, 0.0, 0.0]));
        assert!(!validate(&sys).item("sigma_mm diagonal zero").unwrap().pass);
    }

    #[test]
    fn isometry_quadratures() {
        let one = ito_isometry_check(|_| 1.0, |_| 1.0, 1.0, 100, 64, 1).unwrap();
        assert!((one.quadrature - 1.0).abs() < 1e-12);
        let anti = ito_isometry_check(|_| 1.0, |s| s - 0.5, 1.0, 100, 64, 1).unwrap();
        assert!(anti.quadrature.abs() < 1e-12);
        // Closed form of int_0^1 exp(-0.4 s) ds, compared at trapezoid accuracy.
        let dec = ito_isometry_check(|s| (-0.2 * s).exp(), |s| (-0.2 * s).exp(), 1.0, 100, 256, 1).unwrap();
        let exact = (1.0 - (-0.4f64).exp()) / 0.4;
        assert!((dec.quadrature - exact).abs() < 1e-5);
    }

    #[test]
    fn isometry_unit_variance() {
        let s = ito_isometry_check(|_| 1.0, |_| 1.0, 1.0, 4000, 16, 7).unwrap();
        assert!((s.mc_estimate - 1.0).abs() <= 5.0 * s.stderr);
    }

    #[test]
    fn sampled_function_interpolates() {
        let f = MatrixFn::sampled(0.0, 1.0, 3, |x| DMatrix::from_element(1, 1, x * x));
        assert!((f.eval(0.25)[(0, 0)] - 0.125).abs() < 1e-12);
    }
}
