//! Delay-compensating controllers acting in the staircase coordinates.

mod highgain;
mod steering;

pub use highgain::{HighGain, HighGainController};
pub use steering::{SteeringController, SteeringLaw};

pub(crate) use crate::sim::NoiseConv;

use nalgebra::{DMatrix, DVector};

use crate::covariance::PredictorWeights;
use crate::error::{Error, Result};
use crate::linalg;
use crate::reduction::{DelayedSde, KalmanForm};
use crate::sim::{dot, reversed_rows, Controller, DelayedSim, StepView};

/// Per-block predictor feedback `U_i = -K_i Y_i`.
#[derive(Clone, Debug)]
pub struct FeedbackLaw {
    pub gains: Vec<DMatrix<f64>>,
    /// `exp(-Abar_ii h_i) Bbar_ii`.
    pub btilde: Vec<DVector<f64>>,
    pub nu: f64,
    pub h: Vec<f64>,
}

/// Places every eigenvalue of `Abar_ii - Btilde_i K_i` at `-nu`.
pub fn design_feedback(kf: &KalmanForm, h: &[f64], nu: f64) -> Result<FeedbackLaw> {
    if nu <= 0.0 {
        return Err(Error::Config("decay rate must be positive".into()));
    }
    let mut gains = Vec::new();
    let mut btilde = Vec::new();
    let mut hs = Vec::new();
    for i in 0..kf.blocks() {
        let inp = kf.inputs[i];
        let a = kf.a_block(i, i);
        let b = kf.b_block(i, inp);
        let hb = h[inp];
        let bt = linalg::expm(&(&a * -hb)) * &b;
        gains.push(ackermann(&a, &bt, nu)?);
        btilde.push(bt.column(0).into_owned());
        hs.push(hb);
    }
    Ok(FeedbackLaw { gains, btilde, nu, h: hs })
}

/// Single-input pole placement at `-nu` with multiplicity `n`.
fn ackermann(a: &DMatrix<f64>, b: &DMatrix<f64>, nu: f64) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    let c = linalg::controllability_matrix(a, b);
    let r = linalg::rank(&c);
    if r < n {
        return Err(Error::NotControllable { rank: r, expected: n });
    }
    let shifted = a + DMatrix::identity(n, n) * nu;
    let mut p = DMatrix::<f64>::identity(n, n);
    for _ in 0..n {
        p = &p * &shifted;
    }
    let cinv = c.try_inverse().ok_or(Error::IllConditioned(f64::INFINITY))?;
    let mut en = DMatrix::zeros(1, n);
    en[(0, n - 1)] = 1.0;
    Ok(en * cinv * p)
}

impl FeedbackLaw {
    /// Eigenvalues of each closed-loop block matrix.
    pub fn spectra(&self, kf: &KalmanForm) -> Vec<Vec<f64>> {
        (0..self.gains.len())
            .map(|i| {
                let cl = kf.a_block(i, i) - &self.btilde[i] * &self.gains[i];
                cl.complex_eigenvalues().iter().map(|z| z.re).collect()
            })
            .collect()
    }
}

/// Memory kernel of the discretized model in staircase coordinates, `Gbar(l dt)`.
pub(crate) fn discrete_gbar(kf: &KalmanForm, sim: &DelayedSim) -> Vec<DMatrix<f64>> {
    if sim.sde.gmem.is_identically_zero() {
        return Vec::new();
    }
    (0..sim.mem).map(|l| kf.gbar(&sim.sde, l as f64 * sim.dt)).collect()
}

/// Predictor feedback running on a path.
#[derive(Clone, Debug)]
pub struct FeedbackController {
    t: DMatrix<f64>,
    blocks: Vec<FbBlock>,
    m: usize,
}

#[derive(Clone, Debug)]
struct FbBlock {
    input: usize,
    offset: usize,
    gain: DVector<f64>,
    /// Predictor weights of lags `d..=1` per row, oldest first.
    past: Vec<Vec<f64>>,
    d: usize,
    /// `1 + K w_0`: the current input enters its own predictor.
    implicit: f64,
}

impl FeedbackController {
    pub fn new(law: &FeedbackLaw, kf: &KalmanForm, sde: &DelayedSde, dt: f64) -> Self {
        let blocks = (0..kf.blocks())
            .map(|i| {
                let inp = kf.inputs[i];
                let a = kf.a_block(i, i);
                let b = kf.b_block(i, inp).column(0).into_owned();
                let weights = PredictorWeights::new(&a, &b, sde.h[inp], dt);
                let gain = law.gains[i].row(0).transpose();
                let implicit = 1.0 + gain.dot(&weights.w[0]);
                let d = weights.len() - 1;
                let past = reversed_rows(&weights.w[1..], b.len());
                FbBlock { input: inp, offset: kf.offset(i), gain, past, d, implicit }
            })
            .collect();
        FeedbackController { t: kf.t.clone(), blocks, m: sde.m() }
    }
}

impl Controller for FeedbackController {
    fn control(&mut self, view: &StepView<'_>, out: &mut [f64]) {
        out[..self.m].fill(0.0);
        let z = &self.t * view.x;
        let k = view.k as isize;
        for b in &self.blocks {
            let ni = b.gain.len();
            let hist = view.hist.u_window(b.input, k - b.d as isize, k);
            let mut acc = 0.0;
            for r in 0..ni {
                acc += b.gain[r] * (z[b.offset + r] + dot(&b.past[r], hist));
            }
            out[b.input] = -acc / b.implicit;
        }
    }
}
