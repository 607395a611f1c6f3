//! Reduction of the closed PDE loop to an input-delayed SDE, and the nested controllability
//! staircase that splits the state by input delay.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::kernels::{self, KernelSet};
use crate::linalg;
use crate::model::{CoupledSystem, MatrixFn};
use crate::tracking::TrackingKernels;

/// `dX = (A X + sum_k B_k U_k(t - h_k) + r(t)) dt + sigma(t) dW` with
/// `r(t) = int_{t-H}^t gmem(t-s) sigma(s) dW_s`, `H = max h`.
#[derive(Clone, Debug)]
pub struct DelayedSde {
    pub a: DMatrix<f64>,
    /// Input columns, one per delayed input.
    pub b: DMatrix<f64>,
    /// Per-input delays, nondecreasing.
    pub h: Vec<f64>,
    /// Memory kernel (`N x N`), used on `[0, memory]` only.
    pub gmem: MatrixFn,
    pub memory: f64,
    pub sigma_t: MatrixFn,
    pub x0: DVector<f64>,
    /// Input values on `[-max h, 0)` as a function of `s` (`m x 1`).
    pub past_input: MatrixFn,
    pub horizon: f64,
    /// Boundary component driven by each input, when the system came from a PDE loop.
    pub boundary_of_input: Option<Vec<usize>>,
}

impl DelayedSde {
    pub fn n(&self) -> usize {
        self.a.nrows()
    }
    pub fn m(&self) -> usize {
        self.b.ncols()
    }
    pub fn max_delay(&self) -> f64 {
        self.h.iter().copied().fold(0.0, f64::max)
    }

    pub fn check(&self) -> Result<()> {
        let n = self.n();
        if !self.a.is_square() || self.b.nrows() != n || self.x0.len() != n {
            return Err(Error::Dimension("A, B, X0 disagree on the state dimension".into()));
        }
        if self.h.len() != self.m() {
            return Err(Error::Dimension(format!("{} delays for {} inputs", self.h.len(), self.m())));
        }
        if self.h.iter().any(|&v| v <= 0.0) || self.h.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::Config(format!("delays must be positive and nondecreasing: {:?}", self.h)));
        }
        if self.gmem.shape() != (n, n) || self.sigma_t.shape() != (n, 1) {
            return Err(Error::Dimension("memory kernel must be N x N and sigma N x 1".into()));
        }
        if self.memory < 0.0 {
            return Err(Error::Config("negative memory length".into()));
        }
        Ok(())
    }

    /// Memory kernel with its support cut at `memory`.
    pub fn gmem_at(&self, u: f64) -> DMatrix<f64> {
        if u < 0.0 || u > self.memory + 1e-12 {
            DMatrix::zeros(self.n(), self.n())
        } else {
            self.gmem.eval(u)
        }
    }
}

/// Equivalent delayed SDE of the closed PDE loop. When the in-domain leftward coupling
/// vanishes each input keeps its own transport delay `1/mu`; otherwise all inputs share
/// the slowest one. Inputs are numbered so that delays increase, which reverses the
/// boundary component order.
pub fn reduce(sys: &CoupledSystem, ks: &KernelSet, tk: &TrackingKernels) -> Result<DelayedSde> {
    sys.check_dims()?;
    let m = sys.m();
    let nn = sys.big_n();
    let multi = ks.omega_is_zero();
    let comp: Vec<usize> = (0..m).rev().collect();
    let h: Vec<f64> = comp
        .iter()
        .map(|&c| if multi { 1.0 / sys.mu[c] } else { 1.0 / sys.mu[0] })
        .collect();
    let mut b = DMatrix::zeros(nn, m);
    for (k, &c) in comp.iter().enumerate() {
        b.set_column(k, &sys.b.column(c));
    }
    let memory = 1.0 / sys.mu[0];
    let samples = tk.time_samples().max(2);
    let bfull = sys.b.clone();
    let gmem = if tk.is_zero() {
        MatrixFn::zeros(nn, nn)
    } else {
        MatrixFn::sampled(0.0, memory, samples, |u| &bfull * tk.boundary_kernel(u))
    };

    // Past input from the initial leftward profile: beta_c(t, 0) = beta_c(0, mu_c t) before the
    // first transit, with t = s + h.
    let (_, beta0) = kernels::backstep_initial(sys, ks)?;
    let profiles: Vec<Vec<f64>> = comp.iter().map(|&c| beta0.row(c).iter().copied().collect()).collect();
    let hmax = h.iter().copied().fold(0.0, f64::max);
    let mu = sys.mu.clone();
    let delays = h.clone();
    let past_input = MatrixFn::sampled(-hmax, 0.0, samples, |s| {
        let mut col = DMatrix::zeros(m, 1);
        for (k, &c) in comp.iter().enumerate() {
            let x = (mu[c] * (s + delays[k])).clamp(0.0, 1.0);
            col[(k, 0)] = linalg::lerp_uniform(&profiles[k], 0.0, 1.0, x);
        }
        col
    });
    Ok(DelayedSde {
        a: sys.a.clone(),
        b,
        h,
        gmem,
        memory,
        sigma_t: sys.sigma_t.clone(),
        x0: sys.x0.clone(),
        past_input,
        horizon: sys.horizon,
        boundary_of_input: Some(comp),
    })
}

/// Block upper-triangular coordinates `Z = T X` matched to the input ordering.
#[derive(Clone, Debug)]
pub struct KalmanForm {
    pub t: DMatrix<f64>,
    pub t_inv: DMatrix<f64>,
    pub abar: DMatrix<f64>,
    pub bbar: DMatrix<f64>,
    /// Sizes of the retained (nonempty) blocks.
    pub sizes: Vec<usize>,
    /// Input index owning each retained block.
    pub inputs: Vec<usize>,
}

impl KalmanForm {
    pub fn blocks(&self) -> usize {
        self.sizes.len()
    }

    pub fn offset(&self, i: usize) -> usize {
        self.sizes[..i].iter().sum()
    }

    /// `P_i` with `P_i Z = Z_i`.
    pub fn projection(&self, i: usize) -> DMatrix<f64> {
        let n = self.t.nrows();
        let mut p = DMatrix::zeros(self.sizes[i], n);
        let o = self.offset(i);
        for r in 0..self.sizes[i] {
            p[(r, o + r)] = 1.0;
        }
        p
    }

    pub fn a_block(&self, i: usize, j: usize) -> DMatrix<f64> {
        self.abar
            .view((self.offset(i), self.offset(j)), (self.sizes[i], self.sizes[j]))
            .into_owned()
    }

    /// Rows of block `i`, column of input `k`.
    pub fn b_block(&self, i: usize, k: usize) -> DMatrix<f64> {
        self.bbar.view((self.offset(i), k), (self.sizes[i], 1)).into_owned()
    }

    /// Transformed memory kernel `T gmem(u) T^-1`.
    pub fn gbar(&self, sde: &DelayedSde, u: f64) -> DMatrix<f64> {
        &self.t * sde.gmem_at(u) * &self.t_inv
    }

    pub fn sigbar(&self, sde: &DelayedSde, t: f64) -> DMatrix<f64> {
        &self.t * sde.sigma_t.eval(t)
    }

    /// Largest entry below the block diagonal, relative to `|Abar|` for `Abar` and to `|Bbar|`
    /// for `Bbar` (absolute when the norm vanishes).
    pub fn lower_block_residual(&self) -> f64 {
        let (mut wa, mut wb) = (0.0f64, 0.0f64);
        for i in 0..self.blocks() {
            for j in 0..i {
                wa = wa.max(linalg::max_abs(&self.a_block(i, j)));
            }
            for k in 0..self.bbar.ncols() {
                if k < self.inputs[i] {
                    wb = wb.max(linalg::max_abs(&self.b_block(i, k)));
                }
            }
        }
        let rel = |w: f64, norm: f64| if norm > 0.0 { w / norm } else { w };
        rel(wa, self.abar.norm()).max(rel(wb, self.bbar.norm()))
    }

    pub fn diagonal_pairs_controllable(&self) -> bool {
        (0..self.blocks()).all(|i| {
            linalg::is_controllable(&self.a_block(i, i), &self.b_block(i, self.inputs[i]))
        })
    }

    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["matrix", "row", "values"])?;
        let mut put = |name: &str, m: &DMatrix<f64>| -> Result<()> {
            for r in 0..m.nrows() {
                let vals: Vec<String> = (0..m.ncols()).map(|c| format!("{:.17e}", m[(r, c)])).collect();
                wr.write_record([name, &r.to_string(), &vals.join(" ")])?;
            }
            Ok(())
        };
        put("T", &self.t)?;
        put("Abar", &self.abar)?;
        put("Bbar", &self.bbar)?;
        let sizes = DMatrix::from_row_slice(1, self.sizes.len(), &self.sizes.iter().map(|&s| s as f64).collect::<Vec<_>>());
        put("sizes", &sizes)?;
        wr.flush()?;
        Ok(())
    }
}

/// Nested staircase: split off the subspace reachable from input 0, then recurse on the
/// quotient with the remaining inputs. Every stage uses an orthonormal Krylov basis, so
/// `T` is orthogonal.
pub fn kalman_decompose(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<KalmanForm> {
    let n = a.nrows();
    if !a.is_square() || b.nrows() != n {
        return Err(Error::Dimension("A must be square and B must have N rows".into()));
    }
    let r = linalg::rank(&linalg::controllability_matrix(a, b));
    if r < n {
        return Err(Error::NotControllable { rank: r, expected: n });
    }
    let mut t = DMatrix::<f64>::identity(n, n);
    let mut sizes = Vec::new();
    let mut inputs = Vec::new();
    // Orthonormal basis (in X coordinates) of the part not yet assigned to a block.
    let mut rest = DMatrix::<f64>::identity(n, n);
    let mut done = 0;
    for k in 0..b.ncols() {
        let dim = rest.ncols();
        if dim == 0 {
            break;
        }
        let a_sub = rest.transpose() * a * &rest;
        let b_sub = DMatrix::from_column_slice(dim, 1, (rest.transpose() * b.column(k)).as_slice());
        let q = linalg::range_basis(&linalg::controllability_matrix(&a_sub, &b_sub));
        if q.ncols() == 0 {
            continue;
        }
        let c = linalg::complement_basis(&q);
        let basis = &rest * &q;
        for (j, col) in basis.column_iter().enumerate() {
            t.set_row(done + j, &col.transpose());
        }
        sizes.push(q.ncols());
        inputs.push(k);
        done += q.ncols();
        rest = &rest * c;
    }
    if done < n {
        return Err(Error::NotControllable { rank: done, expected: n });
    }
    let t_inv = t.transpose();
    let abar = &t * a * &t_inv;
    let bbar = &t * b;
    Ok(KalmanForm { t, t_inv, abar, bbar, sizes, inputs })
}
