//! Euler–Maruyama simulation of the input-delayed SDE and of the PDE loops, plus the Monte
//! Carlo driver.

mod montecarlo;
mod pde;

pub use montecarlo::{configure_threads, diverged, path_rng, run_monte_carlo, McConfig, McSummary, Moments, PathOutput};
pub use pde::{CoupledSim, PlantState, TargetSim, TargetState};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::covariance::PathRecord;
use crate::error::{Error, Result};
use crate::model::MatrixFn;
use crate::reduction::DelayedSde;

/// Inputs, Brownian increments and noise increments of one path, indexable by step.
#[derive(Clone, Debug)]
pub struct History {
    n: usize,
    /// Steps stored before time zero.
    pad: usize,
    /// One contiguous series per input.
    u: Vec<Vec<f64>>,
    dw: Vec<f64>,
    noise: Vec<f64>,
}

impl History {
    fn new(m: usize, n: usize, pad: usize, steps: usize) -> Self {
        History {
            n,
            pad,
            u: (0..m).map(|_| Vec::with_capacity(pad + steps + 1)).collect(),
            dw: Vec::with_capacity(steps),
            noise: Vec::with_capacity(steps * n),
        }
    }

    /// `U_i(t_k)`; negative `k` reads the prescribed past input.
    pub fn u(&self, i: usize, k: isize) -> f64 {
        self.u[i][(k + self.pad as isize) as usize]
    }

    /// `U_i(t_j)` for `j` in `[from, to)`.
    pub fn u_window(&self, i: usize, from: isize, to: isize) -> &[f64] {
        let p = self.pad as isize;
        &self.u[i][(from + p) as usize..(to + p) as usize]
    }

    /// Brownian increments of steps `[from, to)`.
    pub fn dw_window(&self, from: usize, to: usize) -> &[f64] {
        &self.dw[from..to]
    }

    /// Number of steps whose increment is known.
    pub fn len(&self) -> usize {
        self.dw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dw.is_empty()
    }

    pub fn dw(&self, k: usize) -> f64 {
        self.dw[k]
    }

    /// `sigma(t_k) dW_k`.
    pub fn noise(&self, k: usize) -> &[f64] {
        &self.noise[k * self.n..(k + 1) * self.n]
    }
}

/// What a controller sees at `t_k`: the state and everything strictly before.
pub struct StepView<'a> {
    pub k: usize,
    pub t: f64,
    pub dt: f64,
    pub x: &'a DVector<f64>,
    pub hist: &'a History,
}

pub trait Controller {
    /// Writes `U(t_k)` into `out` (one entry per input).
    fn control(&mut self, view: &StepView<'_>, out: &mut [f64]);
}

/// Zero input.
#[derive(Clone, Copy, Debug, Default)]
pub struct OpenLoop;

impl Controller for OpenLoop {
    fn control(&mut self, _: &StepView<'_>, out: &mut [f64]) {
        out.fill(0.0);
    }
}

impl<F: FnMut(&StepView<'_>, &mut [f64])> Controller for F {
    fn control(&mut self, view: &StepView<'_>, out: &mut [f64]) {
        self(view, out)
    }
}

/// Precomputed stepping data for a delayed SDE on a uniform grid.
#[derive(Clone, Debug)]
pub struct DelayedSim {
    pub sde: DelayedSde,
    pub dt: f64,
    pub steps: usize,
    /// Delay of each input in steps.
    pub d: Vec<usize>,
    /// Memory window in steps.
    pub mem: usize,
    gmem: Vec<DMatrix<f64>>,
    /// Rows of `gmem(l dt) sigma` with the lag reversed, when sigma is constant.
    gsig: Option<Vec<Vec<f64>>>,
    sigma: Vec<DVector<f64>>,
    past: Vec<f64>,
}

impl DelayedSim {
    pub fn new(sde: &DelayedSde, dt: f64, t_end: f64) -> Result<Self> {
        sde.check()?;
        if dt <= 0.0 || t_end <= 0.0 {
            return Err(Error::Config("time step and horizon must be positive".into()));
        }
        let steps = (t_end / dt).round() as usize;
        let d: Vec<usize> = sde.h.iter().map(|h| (h / dt).round() as usize).collect();
        if d.contains(&0) {
            return Err(Error::Config(format!("delays {:?} shorter than one step {dt}", sde.h)));
        }
        let mem = (sde.memory / dt).round() as usize;
        let gmem: Vec<DMatrix<f64>> = if sde.gmem.is_identically_zero() {
            Vec::new()
        } else {
            (0..mem).map(|l| sde.gmem_at(l as f64 * dt)).collect()
        };
        let const_sigma = matches!(sde.sigma_t, MatrixFn::Const(_));
        let sigma: Vec<DVector<f64>> = if const_sigma {
            vec![sde.sigma_t.eval(0.0).column(0).into_owned()]
        } else {
            (0..steps).map(|k| sde.sigma_t.eval(k as f64 * dt).column(0).into_owned()).collect()
        };
        let gsig = const_sigma.then(|| reversed_rows(&gmem.iter().map(|g| g * &sigma[0]).collect::<Vec<_>>(), sde.n()));
        let pad = d.iter().copied().max().unwrap_or(0);
        let m = sde.m();
        let mut past = Vec::with_capacity(pad * m);
        for j in 0..pad {
            let s = (j as f64 - pad as f64) * dt;
            let col = sde.past_input.eval(s);
            past.extend((0..m).map(|i| col[(i, 0)]));
        }
        Ok(DelayedSim { sde: sde.clone(), dt, steps, d, mem, gmem, gsig, sigma, past })
    }

    pub fn pad(&self) -> usize {
        self.d.iter().copied().max().unwrap_or(0)
    }

    pub fn sigma_at(&self, k: usize) -> &DVector<f64> {
        if self.sigma.len() == 1 {
            &self.sigma[0]
        } else {
            &self.sigma[k.min(self.sigma.len() - 1)]
        }
    }

    /// Memory drift `r_k = sum_l gmem(l dt) sigma(t_{k-1-l}) dW_{k-1-l}`.
    pub fn memory_drift(&self, hist: &History, k: usize, out: &mut DVector<f64>) {
        out.fill(0.0);
        let lags = self.gmem.len().min(k);
        if let Some(gs) = &self.gsig {
            let w = &hist.dw[k - lags..k];
            let skip = self.gmem.len() - lags;
            for (o, row) in out.iter_mut().zip(gs) {
                *o = dot(&row[skip..], w);
            }
        } else {
            for (l, g) in self.gmem.iter().enumerate().take(lags) {
                let s = DVector::from_column_slice(hist.noise(k - 1 - l));
                out.gemv(1.0, g, &s, 1.0);
            }
        }
    }

    /// Runs one path. `observe(k, x, hist)` is called at every grid time `t_k`, `k = 0..=steps`,
    /// after the input for that time has been chosen (except at the final time). Returns
    /// `false` when the state left `limit`.
    pub fn run_path<C, O>(&self, ctrl: &mut C, rng: &mut ChaCha8Rng, limit: f64, mut record: Option<&mut PathRecord>, mut observe: O) -> bool
    where
        C: Controller + ?Sized,
        O: FnMut(usize, &DVector<f64>, &History),
    {
        let sde = &self.sde;
        let (n, m) = (sde.n(), sde.m());
        let pad = self.pad();
        let mut hist = History::new(m, n, pad, self.steps);
        for (i, series) in hist.u.iter_mut().enumerate() {
            series.extend((0..pad).map(|j| self.past[j * m + i]));
        }
        let mut x = sde.x0.clone();
        let mut u_now = vec![0.0; m];
        let mut r = DVector::zeros(n);
        let mut drift = DVector::zeros(n);
        let sq = self.dt.sqrt();
        if let Some(rec) = record.as_deref_mut() {
            *rec = PathRecord { dt: self.dt, pad, ..PathRecord::default() };
            for j in 0..pad {
                rec.u.push(DVector::from_column_slice(&self.past[j * m..(j + 1) * m]));
            }
            rec.x.push(x.clone());
        }
        for k in 0..self.steps {
            let view = StepView { k, t: k as f64 * self.dt, dt: self.dt, x: &x, hist: &hist };
            ctrl.control(&view, &mut u_now);
            for (series, v) in hist.u.iter_mut().zip(&u_now) {
                series.push(*v);
            }
            observe(k, &x, &hist);
            self.memory_drift(&hist, k, &mut r);
            drift.gemv(1.0, &sde.a, &x, 0.0);
            for i in 0..m {
                let ud = hist.u(i, k as isize - self.d[i] as isize);
                if ud != 0.0 {
                    drift.axpy(ud, &sde.b.column(i), 1.0);
                }
            }
            drift += &r;
            let dw: f64 = rng.sample::<f64, _>(StandardNormal) * sq;
            let sig = self.sigma_at(k);
            if let Some(rec) = record.as_deref_mut() {
                rec.u.push(DVector::from_column_slice(&u_now));
                rec.r.push(r.clone());
                rec.noise.push(sig * dw);
            }
            x.axpy(self.dt, &drift, 1.0);
            x.axpy(dw, sig, 1.0);
            hist.dw.push(dw);
            hist.noise.extend(sig.iter().map(|s| s * dw));
            if let Some(rec) = record.as_deref_mut() {
                rec.x.push(x.clone());
            }
            if diverged(&x, limit) {
                return false;
            }
        }
        observe(self.steps, &x, &hist);
        true
    }
}

/// Kernels applied to past noise increments: `sum_j K_j sbar_{k-1-j}` with `sbar = T sigma dW`.
#[derive(Clone, Debug)]
pub enum NoiseConv {
    /// Per-component kernels times `T sigma`, latest lag first.
    Scalar(Vec<Vec<f64>>),
    Full(Vec<DMatrix<f64>>),
}

impl NoiseConv {
    /// `kernels[j]` acts on `sbar`; `t` maps state to staircase coordinates.
    pub fn new(kernels: Vec<DMatrix<f64>>, t: &DMatrix<f64>, sim: &DelayedSim) -> Self {
        let const_sigma = matches!(sim.sde.sigma_t, MatrixFn::Const(_));
        if const_sigma {
            let sb = t * sim.sigma_at(0);
            let rows = kernels.first().map_or(0, |k| k.nrows());
            NoiseConv::Scalar(reversed_rows(&kernels.iter().map(|k| k * &sb).collect::<Vec<_>>(), rows))
        } else {
            NoiseConv::Full(kernels.iter().map(|k| k * t).collect())
        }
    }

    pub fn rows(&self) -> usize {
        match self {
            NoiseConv::Scalar(r) => r.len(),
            NoiseConv::Full(v) => v.first().map_or(0, |m| m.nrows()),
        }
    }

    pub fn apply(&self, hist: &History, k: usize, out: &mut DVector<f64>) {
        match self {
            NoiseConv::Scalar(rows) => {
                let len = rows.first().map_or(0, Vec::len);
                let lags = len.min(k);
                let w = hist.dw_window(k - lags, k);
                for (o, row) in out.iter_mut().zip(rows) {
                    *o += dot(&row[len - lags..], w);
                }
            }
            NoiseConv::Full(v) => {
                for (j, g) in v.iter().enumerate().take(k) {
                    let s = DVector::from_column_slice(hist.noise(k - 1 - j));
                    out.gemv(1.0, g, &s, 1.0);
                }
            }
        }
    }
}

/// Splits a lag sequence of vectors into one array per component, latest lag first, so that
/// a convolution with a chronological history window is a dot product.
pub(crate) fn reversed_rows(seq: &[DVector<f64>], dim: usize) -> Vec<Vec<f64>> {
    (0..dim).map(|c| seq.iter().rev().map(|v| v[c]).collect()).collect()
}

/// Dot product with eight independent partial sums, so the loop vectorizes.
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for j in 0..8 {
            acc[j] += x[j] * y[j];
        }
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn scalar_sde(a: f64, sigma: f64) -> DelayedSde {
        DelayedSde {
            a: DMatrix::from_element(1, 1, a),
            b: DMatrix::from_element(1, 1, 1.0),
            h: vec![0.5],
            gmem: MatrixFn::zeros(1, 1),
            memory: 0.5,
            sigma_t: MatrixFn::constant_vec(&[sigma]),
            x0: DVector::from_element(1, 1.0),
            past_input: MatrixFn::zeros(1, 1),
            horizon: 1.0,
            boundary_of_input: None,
        }
    }

    #[test]
    fn noiseless_open_loop_is_euler_exponential() {
        let sim = DelayedSim::new(&scalar_sde(-0.7, 0.0), 1e-4, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut last = 0.0;
        sim.run_path(&mut OpenLoop, &mut rng, 1e8, None, |k, x, _| {
            if k == sim.steps {
                last = x[0];
            }
        });
        assert!((last - (-0.7f64).exp()).abs() < 1e-4);
    }

    #[test]
    fn constant_input_arrives_after_delay() {
        let mut sde = scalar_sde(0.0, 0.0);
        sde.x0 = DVector::zeros(1);
        let sim = DelayedSim::new(&sde, 0.01, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut xs = Vec::new();
        let mut one = |_: &StepView<'_>, out: &mut [f64]| out[0] = 1.0;
        sim.run_path(&mut one, &mut rng, 1e8, None, |_, x, _| xs.push(x[0]));
        assert_eq!(xs[50], 0.0);
        assert!((xs[100] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn memory_drift_matches_direct_sum() {
        let mut sde = scalar_sde(0.0, 0.3);
        sde.gmem = MatrixFn::ExpDecay { theta: 0.2, scale: DMatrix::identity(1, 1) };
        let sim = DelayedSim::new(&sde, 0.01, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut rs = Vec::new();
        let mut h_final = None;
        sim.run_path(&mut OpenLoop, &mut rng, 1e8, None, |k, _, h| {
            if k < sim.steps {
                let mut r = DVector::zeros(1);
                sim.memory_drift(h, k, &mut r);
                rs.push(r[0]);
            } else {
                h_final = Some(h.clone());
            }
        });
        let h = h_final.unwrap();
        let k = 80;
        let direct: f64 = (0..50).map(|l| (-0.2 * l as f64 * 0.01).exp() * 0.3 * h.dw(k - 1 - l)).sum();
        assert!((rs[k] - direct).abs() < 1e-14);
    }

    #[test]
    fn too_short_delay_is_rejected() {
        let mut sde = scalar_sde(0.0, 0.0);
        sde.h = vec![1e-4];
        assert!(DelayedSim::new(&sde, 1e-3, 1.0).is_err());
    }
}
