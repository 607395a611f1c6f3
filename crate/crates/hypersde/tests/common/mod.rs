#![allow(dead_code)]

use hypersde::model::{CoupledSystem, MatrixFn};
use hypersde::reduction::DelayedSde;
use nalgebra::{DMatrix, DVector};

/// Two-input cascade with memory used throughout the experiments.
pub fn cascade_sde(horizon: f64) -> DelayedSde {
    DelayedSde {
        a: DMatrix::from_row_slice(2, 2, &[0.4, 0.4, 0.0, 0.4]),
        b: DMatrix::from_row_slice(2, 2, &[2.0, -2.0, 0.0, 2.0]),
        h: vec![0.5, 1.0],
        gmem: MatrixFn::ExpDecay { theta: 0.2, scale: DMatrix::identity(2, 2) },
        memory: 1.0,
        sigma_t: MatrixFn::constant_vec(&[0.3, 0.3]),
        x0: DVector::from_element(2, 1.0),
        past_input: MatrixFn::zeros(2, 1),
        horizon,
        boundary_of_input: None,
    }
}

/// Same drift and delays without noise or memory.
pub fn cascade_deterministic(horizon: f64) -> DelayedSde {
    let mut sde = cascade_sde(horizon);
    sde.gmem = MatrixFn::zeros(2, 2);
    sde.sigma_t = MatrixFn::zeros(2, 1);
    sde
}

/// One rightward, one leftward transport row and a scalar SDE with smooth couplings.
pub fn scalar_plant(spm: f64, smp: f64, sigma: f64) -> CoupledSystem {
    CoupledSystem {
        lambda: vec![1.0],
        mu: vec![2.0],
        sigma_pp: MatrixFn::zeros(1, 1),
        sigma_pm: MatrixFn::Const(DMatrix::from_element(1, 1, spm)),
        sigma_mp: MatrixFn::Const(DMatrix::from_element(1, 1, smp)),
        sigma_mm: MatrixFn::zeros(1, 1),
        qb: DMatrix::from_element(1, 1, 0.5),
        rb: DMatrix::from_element(1, 1, 0.2),
        mb: DMatrix::from_element(1, 1, 1.0),
        a: DMatrix::from_element(1, 1, 0.4),
        b: DMatrix::from_element(1, 1, 1.0),
        sigma_t: MatrixFn::constant_vec(&[sigma]),
        horizon: 3.0,
        x0: DVector::from_element(1, 1.0),
        u0: MatrixFn::zeros(1, 1),
        v0: MatrixFn::zeros(1, 1),
    }
}
