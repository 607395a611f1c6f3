use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::kernels::KernelSet;
use crate::model::CoupledSystem;

/// Upwind discretization of the transport system coupled to the SDE.
#[derive(Clone, Debug)]
pub struct CoupledSim {
    pub nx: usize,
    pub dx: f64,
    pub dt: f64,
    lambda: Vec<f64>,
    mu: Vec<f64>,
    spp: Vec<DMatrix<f64>>,
    spm: Vec<DMatrix<f64>>,
    smp: Vec<DMatrix<f64>>,
    smm: Vec<DMatrix<f64>>,
    qb: DMatrix<f64>,
    rb: DMatrix<f64>,
    mb: DMatrix<f64>,
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    sigma: DVector<f64>,
}

#[derive(Clone, Debug)]
pub struct PlantState {
    pub x: DVector<f64>,
    pub u: DMatrix<f64>,
    pub v: DMatrix<f64>,
}

fn cfl(speeds: impl Iterator<Item = f64>, dt: f64, dx: f64) -> Result<()> {
    let c = speeds.fold(0.0, f64::max) * dt / dx;
    if c > 1.0 + 1e-12 {
        return Err(Error::Config(format!("CFL number {c:.3} exceeds one")));
    }
    Ok(())
}

/// One upwind step of `n` rightward and `m` leftward rows with extra source `src` (per node).
/// Boundary nodes at the inflow ends are left for the caller.
fn transport(
    u: &DMatrix<f64>,
    v: &DMatrix<f64>,
    lambda: &[f64],
    mu: &[f64],
    dt: f64,
    dx: f64,
    su: &DMatrix<f64>,
    sv: &DMatrix<f64>,
) -> (DMatrix<f64>, DMatrix<f64>) {
    let nx = u.ncols().max(v.ncols());
    let mut un = u.clone();
    let mut vn = v.clone();
    for i in 0..u.nrows() {
        let c = lambda[i] * dt / dx;
        for a in 1..nx {
            un[(i, a)] = u[(i, a)] - c * (u[(i, a)] - u[(i, a - 1)]) + dt * su[(i, a)];
        }
    }
    for i in 0..v.nrows() {
        let c = mu[i] * dt / dx;
        for a in 0..nx - 1 {
            vn[(i, a)] = v[(i, a)] + c * (v[(i, a + 1)] - v[(i, a)]) + dt * sv[(i, a)];
        }
    }
    (un, vn)
}

impl CoupledSim {
    pub fn new(sys: &CoupledSystem, nx: usize, dt: f64) -> Result<Self> {
        sys.check_dims()?;
        if nx < 3 {
            return Err(Error::Config("need at least three grid nodes".into()));
        }
        let dx = 1.0 / (nx - 1) as f64;
        cfl(sys.lambda.iter().chain(&sys.mu).copied(), dt, dx)?;
        let at = |f: &crate::model::MatrixFn| (0..nx).map(|a| f.eval(a as f64 * dx)).collect::<Vec<_>>();
        Ok(CoupledSim {
            nx,
            dx,
            dt,
            lambda: sys.lambda.clone(),
            mu: sys.mu.clone(),
            spp: at(&sys.sigma_pp),
            spm: at(&sys.sigma_pm),
            smp: at(&sys.sigma_mp),
            smm: at(&sys.sigma_mm),
            qb: sys.qb.clone(),
            rb: sys.rb.clone(),
            mb: sys.mb.clone(),
            a: sys.a.clone(),
            b: sys.b.clone(),
            sigma: sys.sigma_t.eval(0.0).column(0).into_owned(),
        })
    }

    /// Advances by one step with boundary input `vin` and Brownian increment `dw`.
    pub fn step(&self, s: &mut PlantState, vin: &DVector<f64>, dw: f64) {
        let (n, m) = (s.u.nrows(), s.v.nrows());
        let mut su = DMatrix::zeros(n, self.nx);
        let mut sv = DMatrix::zeros(m, self.nx);
        for a in 0..self.nx {
            let (uc, vc) = (s.u.column(a), s.v.column(a));
            su.set_column(a, &(&self.spp[a] * uc + &self.spm[a] * vc));
            sv.set_column(a, &(&self.smp[a] * uc + &self.smm[a] * vc));
        }
        let (mut un, mut vn) = transport(&s.u, &s.v, &self.lambda, &self.mu, self.dt, self.dx, &su, &sv);
        let drift = &self.a * &s.x + &self.b * s.v.column(0);
        s.x += drift * self.dt + &self.sigma * dw;
        let last = self.nx - 1;
        let right = &self.rb * un.column(last) + vin;
        vn.set_column(last, &right);
        let left = &self.qb * vn.column(0) + &self.mb * &s.x;
        un.set_column(0, &left);
        s.u = un;
        s.v = vn;
    }
}

/// Upwind discretization of the target system.
#[derive(Clone, Debug)]
pub struct TargetSim {
    pub nx: usize,
    pub dx: f64,
    pub dt: f64,
    lambda: Vec<f64>,
    mu: Vec<f64>,
    psi: Vec<DMatrix<f64>>,
    psi_b: Vec<DMatrix<f64>>,
    omega: Vec<DMatrix<f64>>,
    ga_sigma: Vec<DVector<f64>>,
    gb_sigma: Vec<DVector<f64>>,
    qb: DMatrix<f64>,
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    sigma: DVector<f64>,
}

#[derive(Clone, Debug)]
pub struct TargetState {
    pub x: DVector<f64>,
    pub alpha: DMatrix<f64>,
    pub beta: DMatrix<f64>,
}

impl TargetSim {
    pub fn new(sys: &CoupledSystem, ks: &KernelSet, dt: f64) -> Result<Self> {
        sys.check_dims()?;
        let nx = ks.nx;
        let dx = ks.dx();
        cfl(sys.lambda.iter().chain(&sys.mu).copied(), dt, dx)?;
        let sigma = sys.sigma_t.eval(0.0).column(0).into_owned();
        Ok(TargetSim {
            nx,
            dx,
            dt,
            lambda: sys.lambda.clone(),
            mu: sys.mu.clone(),
            psi: ks.psi.clone(),
            psi_b: ks.psi_boundary.clone(),
            omega: ks.omega.clone(),
            ga_sigma: ks.gamma_alpha.iter().map(|g| g * &sigma).collect(),
            gb_sigma: ks.gamma_beta.iter().map(|g| g * &sigma).collect(),
            qb: sys.qb.clone(),
            a: sys.a.clone(),
            b: sys.b.clone(),
            sigma,
        })
    }

    pub fn step(&self, s: &mut TargetState, veff: &DVector<f64>, dw: f64) {
        let (n, m) = (s.alpha.nrows(), s.beta.nrows());
        let b0 = s.beta.column(0).into_owned();
        let mut su = DMatrix::zeros(n, self.nx);
        let mut sv = DMatrix::zeros(m, self.nx);
        for a in 0..self.nx {
            su.set_column(a, &(&self.psi[a] * s.alpha.column(a) + &self.psi_b[a] * &b0 + &self.ga_sigma[a] * (dw / self.dt)));
            sv.set_column(a, &(&self.omega[a] * s.beta.column(a) + &self.gb_sigma[a] * (dw / self.dt)));
        }
        let (mut an, mut bn) = transport(&s.alpha, &s.beta, &self.lambda, &self.mu, self.dt, self.dx, &su, &sv);
        let drift = &self.a * &s.x + &self.b * &b0;
        s.x += drift * self.dt + &self.sigma * dw;
        bn.set_column(self.nx - 1, veff);
        let left = &self.qb * bn.column(0);
        an.set_column(0, &left);
        s.alpha = an;
        s.beta = bn;
    }
}
