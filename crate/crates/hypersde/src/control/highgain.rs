use nalgebra::{DMatrix, DVector};

use super::{discrete_gbar, NoiseConv};
use crate::error::{Error, Result};
use crate::reduction::KalmanForm;
use crate::sim::{dot, reversed_rows, Controller, DelayedSim, StepView};

/// Cascade controller for scalar blocks that drives each forecast
/// `xi_i(t) = E[Z_i(t + h_i) | F_t]` towards zero at rate `K`. Forecasts follow the Euler
/// recursion of the simulator, so they are exact for the discretized model.
#[derive(Clone, Debug)]
pub struct HighGain {
    pub k: f64,
    t: DMatrix<f64>,
    abar: DMatrix<f64>,
    bbar: DMatrix<f64>,
    d: Vec<usize>,
    /// `Phi^{d_i}` with `Phi = I + Abar dt`.
    phi_d: Vec<DMatrix<f64>>,
    /// `[i][l][c][p]`: component `c` of `Phi^{d_i-1-p} Bbar_l dt`, multiplying
    /// `U_l(t_{k+p-d_l})`.
    vb: Vec<Vec<Vec<Vec<f64>>>>,
    /// Memory part of the forecast of block `i`, acting on past noise.
    mem_forecast: Vec<NoiseConv>,
    /// Memory drift expected at `t + h_i`, acting on past noise.
    mem_ahead: Vec<NoiseConv>,
    has_memory: bool,
}

impl HighGain {
    /// The law is tied to `sim`: its noise convolutions include that simulator's `sigma`.
    pub fn new(kf: &KalmanForm, sim: &DelayedSim, k: f64) -> Result<Self> {
        let m = sim.sde.m();
        if kf.blocks() != m || kf.sizes.iter().any(|&s| s != 1) {
            return Err(Error::Unsupported("high-gain cascade needs one scalar block per input".into()));
        }
        if k <= 0.0 {
            return Err(Error::Config("gain must be positive".into()));
        }
        let n = m;
        let dt = sim.dt;
        let phi = DMatrix::<f64>::identity(n, n) + &kf.abar * dt;
        let dmax = sim.d.iter().copied().max().unwrap_or(0);
        let mut pows = Vec::with_capacity(dmax + 1);
        pows.push(DMatrix::<f64>::identity(n, n));
        for q in 1..=dmax {
            let next = &pows[q - 1] * &phi;
            pows.push(next);
        }
        let d: Vec<usize> = kf.inputs.iter().map(|&l| sim.d[l]).collect();
        let vb = d
            .iter()
            .map(|&di| {
                (0..m)
                    .map(|l| {
                        let seq: Vec<DVector<f64>> = (0..di).map(|q| &pows[q] * kf.bbar.column(l) * dt).collect();
                        reversed_rows(&seq, n)
                    })
                    .collect()
            })
            .collect();
        let phi_d = d.iter().map(|&di| pows[di].clone()).collect();
        let gbar = discrete_gbar(kf, sim);
        let lmem = gbar.len();
        let mut mem_forecast = Vec::new();
        let mut mem_ahead = Vec::new();
        for &di in &d {
            // kappa(j) = sum_{p < d} Phi^{d-1-p} Gbar_{p+j} dt
            let kappa: Vec<DMatrix<f64>> = (0..lmem)
                .map(|j| {
                    let mut acc = DMatrix::zeros(n, n);
                    for p in 0..di.min(lmem.saturating_sub(j)) {
                        acc += &pows[di - 1 - p] * &gbar[p + j];
                    }
                    acc * dt
                })
                .collect();
            let ahead: Vec<DMatrix<f64>> = (0..lmem.saturating_sub(di)).map(|j| gbar[di + j].clone()).collect();
            mem_forecast.push(NoiseConv::new(kappa, &kf.t, sim));
            mem_ahead.push(NoiseConv::new(ahead, &kf.t, sim));
        }
        Ok(HighGain {
            k,
            t: kf.t.clone(),
            abar: kf.abar.clone(),
            bbar: kf.bbar.clone(),
            d,
            phi_d,
            vb,
            mem_forecast,
            mem_ahead,
            has_memory: lmem > 0,
        })
    }

    pub fn controller(&self) -> HighGainController<'_> {
        HighGainController { law: self }
    }
}

/// Per-path view of a [`HighGain`] law; it keeps no state of its own.
#[derive(Clone, Copy, Debug)]
pub struct HighGainController<'a> {
    law: &'a HighGain,
}

impl Controller for HighGainController<'_> {
    fn control(&mut self, view: &StepView<'_>, out: &mut [f64]) {
        let g = self.law;
        let m = g.d.len();
        let z = &g.t * view.x;
        let k = view.k as isize;
        for i in (0..m).rev() {
            let di = g.d[i];
            let mut f = &g.phi_d[i] * &z;
            for l in i..m {
                let dl = g.d[l] as isize;
                let w = view.hist.u_window(l, k - dl, k - dl + di as isize);
                for (c, row) in g.vb[i][l].iter().enumerate().skip(i) {
                    f[c] += dot(row, w);
                }
            }
            let mut rho = DVector::zeros(m);
            if g.has_memory {
                g.mem_forecast[i].apply(view.hist, view.k, &mut f);
                g.mem_ahead[i].apply(view.hist, view.k, &mut rho);
            }
            let mut drive = (g.k + g.abar[(i, i)]) * f[i] + rho[i];
            for j in i + 1..m {
                let lag = k + di as isize - g.d[j] as isize;
                let uj = if lag == k { out[j] } else { view.hist.u(j, lag) };
                drive += g.abar[(i, j)] * f[j] + g.bbar[(i, j)] * uj;
            }
            out[i] = -drive / g.bbar[(i, i)];
        }
    }
}
