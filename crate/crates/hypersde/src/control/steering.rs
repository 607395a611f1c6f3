use nalgebra::{DMatrix, DVector};

use super::discrete_gbar;
use crate::covariance::discrete_response;
use crate::error::{Error, Result};
use crate::linalg;
use crate::reduction::KalmanForm;
use crate::sim::{Controller, DelayedSim, StepView};

/// Steps before the end of a window where the noise feedback switches off.
const CUTOFF_STEPS: usize = 2;

/// Finite-horizon steering: block `i` acts on the window `[T - h_{i+1}, T - h_i]` (the last
/// block uses `[T - 2 h_m, T - h_m]`), blocks are processed from the largest delay down. Each
/// window cancels the mean error of `E[Z_i(T) | F_t]` with a minimum-energy open-loop input and
/// shrinks its fluctuation with a feedback whose strength is tuned so that the part of the
/// terminal covariance the window controls equals the target.
#[derive(Clone, Debug)]
pub struct SteeringLaw {
    pub target_mean: DVector<f64>,
    pub target_cov: Vec<DMatrix<f64>>,
    /// Feedback strength per block in `[0, 1]`.
    pub strength: Vec<f64>,
    /// Covariance of the window-controlled part that the chosen strength delivers.
    pub achieved: Vec<DMatrix<f64>>,
    blocks: Vec<Window>,
    t: DMatrix<f64>,
    n_total: usize,
    dt: f64,
    phi: DMatrix<f64>,
    bbar: DMatrix<f64>,
    d: Vec<usize>,
    gbar: Vec<DMatrix<f64>>,
}

#[derive(Clone, Debug)]
struct Window {
    offset: usize,
    size: usize,
    input: usize,
    start: usize,
    /// Last step whose input still reaches `T`.
    end: usize,
    cut: usize,
    /// Response of `Z_i(T)` to `U_i(k)`, per unit `dt`, for `k` in the window.
    c: Vec<DVector<f64>>,
    w_inv: DMatrix<f64>,
    /// Inverse remaining Gramians on `[k, cut)`.
    w_rem_inv: Vec<DMatrix<f64>>,
    /// Response of `Z_i(T)` to the state-coordinate noise increment of step `k`.
    noise: Vec<DMatrix<f64>>,
    /// Covariance rate of that response, `noise sigma sigma^T noise^T`.
    rate: Vec<DMatrix<f64>>,
}

impl SteeringLaw {
    pub fn new(kf: &KalmanForm, sim: &DelayedSim, target_mean: &DVector<f64>, target_cov: &[DMatrix<f64>]) -> Result<Self> {
        let nb = kf.blocks();
        let n = kf.abar.nrows();
        if target_mean.len() != n || target_cov.len() != nb {
            return Err(Error::Dimension("terminal targets must match the state and block sizes".into()));
        }
        for (i, s) in target_cov.iter().enumerate() {
            if s.shape() != (kf.sizes[i], kf.sizes[i]) {
                return Err(Error::Dimension(format!("terminal covariance of block {i} has the wrong shape")));
            }
            if linalg::min_sym_eigenvalue(s) <= 1e-12 {
                return Err(Error::Config(format!("terminal covariance of block {i} is not positive definite")));
            }
        }
        let dt = sim.dt;
        let n_total = sim.steps;
        let phi = DMatrix::<f64>::identity(n, n) + &kf.abar * dt;
        let d: Vec<usize> = kf.inputs.iter().map(|&l| sim.d[l]).collect();
        let resp = discrete_response(kf, &sim.sde, dt, n_total);
        let mut blocks = Vec::with_capacity(nb);
        let mut strength = Vec::with_capacity(nb);
        let mut achieved = Vec::with_capacity(nb);
        for i in 0..nb {
            let di = d[i];
            let dnext = if i + 1 < nb { d[i + 1] } else { 2 * d[nb - 1] };
            if dnext <= di {
                return Err(Error::Unsupported("steering needs strictly increasing block delays".into()));
            }
            if n_total < di + 1 {
                return Err(Error::Config("horizon shorter than the block delay".into()));
            }
            let end = n_total - di - 1;
            let start = n_total.saturating_sub(dnext);
            let (off, ni) = (kf.offset(i), kf.sizes[i]);
            let aii = phi.view((off, off), (ni, ni)).into_owned();
            let bii = kf.bbar.view((off, kf.inputs[i]), (ni, 1)).into_owned();
            // c_k = Phi_ii^{n_T - k - d_i - 1} Bbar_ii, built from the window end backwards.
            let mut c = vec![DVector::zeros(ni); end + 1 - start];
            let mut pw = bii.column(0).into_owned();
            for k in (start..=end).rev() {
                c[k - start] = pw.clone();
                pw = &aii * pw;
            }
            let mut w = DMatrix::zeros(ni, ni);
            for ck in &c {
                w += ck * ck.transpose() * dt;
            }
            let sv = linalg::singular_values(&w);
            let cond = sv[0] / sv[sv.len() - 1].max(f64::MIN_POSITIVE);
            if cond > 1e12 {
                return Err(Error::IllConditioned(cond));
            }
            let w_inv = w.clone().try_inverse().ok_or(Error::IllConditioned(f64::INFINITY))?;
            let cut = (end + 1).saturating_sub(CUTOFF_STEPS).max(start);
            let mut w_rem_inv = vec![DMatrix::zeros(ni, ni); end + 1 - start];
            let mut acc = DMatrix::zeros(ni, ni);
            for k in (start..cut).rev() {
                acc += &c[k - start] * c[k - start].transpose() * dt;
                let sv = linalg::singular_values(&acc);
                let well = sv[sv.len() - 1] > 1e-12 * sv[0];
                if well {
                    w_rem_inv[k - start] = acc.clone().try_inverse().unwrap_or_else(|| DMatrix::zeros(ni, ni));
                }
            }
            let p = kf.projection(i);
            let noise: Vec<DMatrix<f64>> = (start..=end).map(|k| &p * &resp[n_total - 1 - k] * &kf.t).collect();
            let rate = (start..=end)
                .map(|k| {
                    let g = &noise[k - start] * sim.sigma_at(k);
                    &g * g.transpose()
                })
                .collect();
            let win = Window { offset: off, size: ni, input: kf.inputs[i], start, end, cut, c, w_inv, w_rem_inv, noise, rate };
            let (s, ach) = tune_strength(&win, &target_cov[i], dt);
            strength.push(s);
            achieved.push(ach);
            blocks.push(win);
        }
        let gbar = discrete_gbar(kf, sim);
        Ok(SteeringLaw {
            target_mean: target_mean.clone(),
            target_cov: target_cov.to_vec(),
            strength,
            achieved,
            blocks,
            t: kf.t.clone(),
            n_total,
            dt,
            phi,
            bbar: kf.bbar.clone(),
            d: sim.d.clone(),
            gbar,
        })
    }

    pub fn controller(&self) -> SteeringController<'_> {
        SteeringController {
            law: self,
            active: None,
            u_open: Vec::new(),
            dev: DVector::zeros(0),
        }
    }

    /// `E[Z(T) | F_k]` when every input from step `k` on is zero.
    fn free_forecast(&self, view: &StepView<'_>) -> DVector<f64> {
        let n = self.phi.nrows();
        let k = view.k;
        let mut y = &self.t * view.x;
        let mut drive = DVector::zeros(n);
        let mut conv = DVector::zeros(n);
        let lmem = self.gbar.len();
        let first = k.saturating_sub(lmem);
        let sbar: Vec<DVector<f64>> = if lmem > 0 {
            (first..k).map(|j| &self.t * DVector::from_column_slice(view.hist.noise(j))).collect()
        } else {
            Vec::new()
        };
        for step in k..self.n_total {
            drive.fill(0.0);
            for (l, &dl) in self.d.iter().enumerate() {
                let src = step as isize - dl as isize;
                if src < k as isize {
                    let u = view.hist.u(l, src);
                    if u != 0.0 {
                        drive.axpy(u, &self.bbar.column(l), 1.0);
                    }
                }
            }
            if lmem > 0 {
                // Known part of the memory drift at `step`: increments before `k`.
                conv.fill(0.0);
                for lag in step - k..lmem {
                    let j = step as isize - 1 - lag as isize;
                    if j < 0 {
                        break;
                    }
                    let j = j as usize;
                    if j < first {
                        break;
                    }
                    conv.gemv(1.0, &self.gbar[lag], &sbar[j - first], 1.0);
                }
                drive += &conv;
            }
            y = &self.phi * y + &drive * self.dt;
        }
        y
    }
}

/// Variance recursion of the window fluctuation for a given feedback strength.
fn window_covariance(w: &Window, strength: f64, dt: f64) -> DMatrix<f64> {
    let ni = w.size;
    let eye = DMatrix::<f64>::identity(ni, ni);
    let mut v = DMatrix::zeros(ni, ni);
    for k in w.start..=w.end {
        let j = k - w.start;
        if k < w.cut {
            let g = &w.c[j] * w.c[j].transpose() * &w.w_rem_inv[j] * (strength * dt);
            let f = &eye - g;
            v = &f * v * f.transpose();
        }
        v += &w.rate[j] * dt;
    }
    v
}

fn tune_strength(w: &Window, target: &DMatrix<f64>, dt: f64) -> (f64, DMatrix<f64>) {
    let goal = target.trace();
    let lo_cov = window_covariance(w, 1.0, dt);
    if lo_cov.trace() >= goal {
        return (1.0, lo_cov);
    }
    let hi_cov = window_covariance(w, 0.0, dt);
    if hi_cov.trace() <= goal {
        return (0.0, hi_cov);
    }
    let (mut lo, mut hi) = (0.0, 1.0);
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if window_covariance(w, mid, dt).trace() > goal {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let s = 0.5 * (lo + hi);
    (s, window_covariance(w, s, dt))
}

/// Per-path state of a [`SteeringLaw`].
#[derive(Clone, Debug)]
pub struct SteeringController<'a> {
    law: &'a SteeringLaw,
    active: Option<usize>,
    u_open: Vec<f64>,
    /// Deviation of the forecast of `Z_i(T)` from the target.
    dev: DVector<f64>,
}

impl Controller for SteeringController<'_> {
    fn control(&mut self, view: &StepView<'_>, out: &mut [f64]) {
        out.fill(0.0);
        let law = self.law;
        let k = view.k;
        let Some(b) = law.blocks.iter().position(|w| (w.start..=w.end).contains(&k)) else {
            self.active = None;
            return;
        };
        let w = &law.blocks[b];
        if self.active != Some(b) {
            let f = law.free_forecast(view);
            let delta = law.target_mean.rows(w.offset, w.size) - f.rows(w.offset, w.size);
            let coef = &w.w_inv * delta;
            self.u_open = w.c.iter().map(|c| c.dot(&coef)).collect();
            self.dev = DVector::zeros(w.size);
            self.active = Some(b);
        } else {
            // Innovation of the previous step.
            let j = k - 1 - w.start;
            let s = DVector::from_column_slice(view.hist.noise(k - 1));
            self.dev.gemv(1.0, &w.noise[j], &s, 1.0);
        }
        let j = k - w.start;
        let mut u = self.u_open[j];
        if k < w.cut {
            let fb = -law.strength[b] * w.c[j].dot(&(&w.w_rem_inv[j] * &self.dev));
            u += fb;
            self.dev.axpy(fb * law.dt, &w.c[j], 1.0);
        }
        out[w.input] = u;
    }
}
