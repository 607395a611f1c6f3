//! Predictors, the recursive noise kernels behind the structural covariance floor, and the
//! weighted-variance costs built on them.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg;
use crate::reduction::{DelayedSde, KalmanForm};
use crate::sim::{DelayedSim, History, NoiseConv};

/// Trapezoid weights of the predictor integral: `w[l]` multiplies `U(t - l dt)`.
#[derive(Clone, Debug)]
pub struct PredictorWeights {
    pub w: Vec<DVector<f64>>,
}

impl PredictorWeights {
    pub fn new(a: &DMatrix<f64>, b: &DVector<f64>, h: f64, dt: f64) -> Self {
        let d = (h / dt).round() as usize;
        let step = linalg::expm(&(a * dt));
        let mut e = linalg::expm(&(a * -h));
        let mut w = Vec::with_capacity(d + 1);
        for l in 0..=d {
            let tw = if d == 0 { 0.0 } else if l == 0 || l == d { 0.5 * dt } else { dt };
            w.push(&e * b * tw);
            e = &e * &step;
        }
        PredictorWeights { w }
    }

    pub fn len(&self) -> usize {
        self.w.len()
    }

    pub fn is_empty(&self) -> bool {
        self.w.is_empty()
    }
}

/// `Y = Z + int_{t-h}^t exp(A (t - s - h)) b U(s) ds` from samples of `U` on the step grid,
/// oldest first with `U(t)` last.
pub fn predictor(z: &DVector<f64>, u_hist: &[f64], a: &DMatrix<f64>, b: &DVector<f64>, h: f64, dt: f64) -> Result<DVector<f64>> {
    let pw = PredictorWeights::new(a, b, h, dt);
    if u_hist.len() < pw.len() {
        return Err(Error::ShortHistory(format!("{} input samples, predictor needs {}", u_hist.len(), pw.len())));
    }
    let last = u_hist.len() - 1;
    let mut y = z.clone();
    for (l, w) in pw.w.iter().enumerate() {
        y += w * u_hist[last - l];
    }
    Ok(y)
}

/// Integration limits of the noise-kernel recursion.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Limits {
    /// Windows end at the next block's delay; the last block uses twice its own.
    NextDelay,
    /// Windows end at the block's own delay.
    OwnDelay,
}

#[derive(Clone, Debug)]
pub struct GammaFamily {
    pub du: f64,
    pub limits: Limits,
    /// Delay of each block.
    pub h: Vec<f64>,
    /// Right end of each block's support.
    pub h_next: Vec<f64>,
    /// Integral part of `Gamma_i` on `u = k du`.
    pub smooth: Vec<Vec<DMatrix<f64>>>,
    /// `Theta_ij` for `j > i`, stored at `[i][j - i - 1]`.
    pub theta: Vec<Vec<Vec<DMatrix<f64>>>>,
    /// `exp(Abar_ii u) P_i` for `u` in `[0, h_i]`.
    pub direct: Vec<Vec<DMatrix<f64>>>,
    pub times: Vec<f64>,
    /// Covariance floor per block on `times`.
    pub sigma_min: Vec<Vec<DMatrix<f64>>>,
}

impl GammaFamily {
    pub fn blocks(&self) -> usize {
        self.smooth.len()
    }

    /// `Gamma_i(k du)`, with the direct term included on the closed interval `[0, h_i]`.
    pub fn gamma(&self, i: usize, k: usize) -> DMatrix<f64> {
        let mut g = self.smooth[i][k].clone();
        if let Some(d) = self.direct[i].get(k) {
            g += d;
        }
        g
    }

    /// Jump of `Gamma_i` across `u = h_i`.
    pub fn jump(&self, i: usize) -> DMatrix<f64> {
        self.direct[i].last().cloned().unwrap_or_else(|| DMatrix::zeros(0, 0))
    }

    pub fn samples(&self, i: usize) -> usize {
        self.smooth[i].len()
    }

    /// CSV rows `u,block,row,col,value`.
    pub fn write_gamma_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["u", "block", "row", "col", "value"])?;
        for i in 0..self.blocks() {
            for k in 0..self.samples(i) {
                let g = self.gamma(i, k);
                for r in 0..g.nrows() {
                    for c in 0..g.ncols() {
                        wr.write_record([
                            format!("{:.10e}", k as f64 * self.du),
                            i.to_string(),
                            r.to_string(),
                            c.to_string(),
                            format!("{:.10e}", g[(r, c)]),
                        ])?;
                    }
                }
            }
        }
        wr.flush()?;
        Ok(())
    }

    /// CSV with columns `t`, then row-major entries of each block's floor.
    pub fn write_sigma_min_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let mut head = vec!["t".to_string()];
        for (i, s) in self.sigma_min.iter().enumerate() {
            let (r, c) = s.first().map_or((0, 0), |m| m.shape());
            for a in 0..r {
                for b in 0..c {
                    head.push(format!("s{i}_{a}{b}"));
                }
            }
        }
        wr.write_record(&head)?;
        for (k, t) in self.times.iter().enumerate() {
            let mut rec = vec![format!("{t:.10e}")];
            for s in &self.sigma_min {
                let m = &s[k];
                for a in 0..m.nrows() {
                    for b in 0..m.ncols() {
                        rec.push(format!("{:.10e}", m[(a, b)]));
                    }
                }
            }
            wr.write_record(&rec)?;
        }
        wr.flush()?;
        Ok(())
    }
}

/// Delay attached to each retained block.
pub fn block_delays(kf: &KalmanForm, sde: &DelayedSde) -> Vec<f64> {
    kf.inputs.iter().map(|&k| sde.h[k]).collect()
}

fn grid_index(v: f64, du: f64) -> usize {
    (v / du + 1e-9).round() as usize
}

/// Downward recursion for `Gamma_i` and `Theta_ij` on the grid `u = k du`, then the floor
/// `Sigma_min^(i)(t) = int_{t-h_i}^t Gamma_i(t-s) sbar(s) sbar(s)^T Gamma_i(t-s)^T ds`.
pub fn gamma_recursion(kf: &KalmanForm, sde: &DelayedSde, du: f64, times: &[f64], limits: Limits) -> Result<GammaFamily> {
    if du <= 0.0 {
        return Err(Error::Config("kernel step must be positive".into()));
    }
    let nb = kf.blocks();
    let h = block_delays(kf, sde);
    let h_next: Vec<f64> = (0..nb).map(|i| if i + 1 < nb { h[i + 1] } else { 2.0 * h[nb - 1] }).collect();
    let k_mem = grid_index(sde.memory, du);
    let k_max = h_next.iter().map(|&v| grid_index(v, du)).max().unwrap_or(0);
    let gbar: Vec<DMatrix<f64>> = (0..=k_max).map(|k| kf.gbar(sde, k as f64 * du)).collect();

    let mut smooth: Vec<Vec<DMatrix<f64>>> = vec![Vec::new(); nb];
    let mut theta: Vec<Vec<Vec<DMatrix<f64>>>> = (0..nb).map(|i| vec![Vec::new(); nb - i - 1]).collect();
    let mut direct: Vec<Vec<DMatrix<f64>>> = vec![Vec::new(); nb];
    let mut full: Vec<Vec<DMatrix<f64>>> = vec![Vec::new(); nb];

    for i in (0..nb).rev() {
        let aii = kf.a_block(i, i);
        let p = kf.projection(i);
        let step = linalg::expm(&(&aii * du));
        let kn = grid_index(h_next[i], du);
        let kh = grid_index(h[i], du);
        let mut pows = Vec::with_capacity(kn + 1);
        pows.push(DMatrix::<f64>::identity(aii.nrows(), aii.nrows()));
        for k in 1..=kn {
            let next = &pows[k - 1] * &step;
            pows.push(next);
        }
        let gi: Vec<DMatrix<f64>> = gbar.iter().take(kn + 1).map(|g| &p * g).collect();
        let own_end = match limits {
            Limits::NextDelay => kn,
            Limits::OwnDelay => kh,
        };
        for k in 0..=kn {
            let lo = k.saturating_sub(own_end);
            let hi = k.min(k_mem);
            let mut acc = DMatrix::zeros(aii.nrows(), p.ncols());
            if hi > lo {
                for s in lo..=hi {
                    let w = if s == lo || s == hi { 0.5 * du } else { du };
                    acc += &pows[k - s] * &gi[s] * w;
                }
            }
            smooth[i].push(acc);
        }
        direct[i] = (0..=kh.min(kn)).map(|k| &pows[k] * &p).collect();
        for j in i + 1..nb {
            let aij = kf.a_block(i, j);
            let j_end = match limits {
                Limits::NextDelay => grid_index(h_next[j], du),
                Limits::OwnDelay => grid_index(h[j], du),
            };
            let mut th = Vec::with_capacity(kn + 1);
            for k in 0..=kn {
                let lo = k.saturating_sub(own_end);
                let hi = k.min(j_end).min(full[j].len() - 1);
                let mut acc = DMatrix::zeros(aii.nrows(), p.ncols());
                if hi > lo {
                    for s in lo..=hi {
                        let w = if s == lo || s == hi { 0.5 * du } else { du };
                        acc += &pows[k - s] * &aij * &full[j][s] * w;
                    }
                }
                th.push(acc);
            }
            for (k, t) in th.iter().enumerate() {
                smooth[i][k] += t;
            }
            theta[i][j - i - 1] = th;
        }
        full[i] = (0..=kn)
            .map(|k| {
                let mut g = smooth[i][k].clone();
                if k <= kh {
                    g += &direct[i][k];
                }
                g
            })
            .collect();
    }

    let mut gf = GammaFamily {
        du,
        limits,
        h,
        h_next,
        smooth,
        theta,
        direct,
        times: times.to_vec(),
        sigma_min: Vec::new(),
    };
    gf.sigma_min = (0..nb)
        .map(|i| times.iter().map(|&t| sigma_min_at(&gf, kf, sde, i, t)).collect())
        .collect();
    Ok(gf)
}

/// The floor for block `i` at time `t`; noise starts at time zero.
pub fn sigma_min_at(gf: &GammaFamily, kf: &KalmanForm, sde: &DelayedSde, i: usize, t: f64) -> DMatrix<f64> {
    let ni = kf.sizes[i];
    let span = gf.h[i].min(t.max(0.0));
    let kend = grid_index(span, gf.du).min(gf.samples(i) - 1);
    let mut acc = DMatrix::zeros(ni, ni);
    if kend == 0 {
        return acc;
    }
    for k in 0..=kend {
        let w = if k == 0 || k == kend { 0.5 * gf.du } else { gf.du };
        let gs = gf.gamma(i, k) * kf.sigbar(sde, t - k as f64 * gf.du);
        acc += &gs * gs.transpose() * w;
    }
    linalg::sym(&acc)
}

/// Response of `Z(t + u)` to a unit noise impulse at `t` when no control reacts:
/// `exp(Abar u) + int_0^{min(u, memory)} exp(Abar (u - s)) Gbar(s) ds`.
pub fn open_loop_response(kf: &KalmanForm, sde: &DelayedSde, u: f64, panels: usize) -> DMatrix<f64> {
    let mut out = linalg::expm(&(&kf.abar * u));
    let top = u.min(sde.memory);
    if top > 0.0 {
        let n = panels.max(1);
        let hstep = top / n as f64;
        for q in 0..=n {
            let s = q as f64 * hstep;
            let w = if q == 0 || q == n { 0.5 * hstep } else { hstep };
            out += linalg::expm(&(&kf.abar * (u - s))) * kf.gbar(sde, s) * w;
        }
    }
    out
}

/// Weighted floor `V_i(t) = tr(Q_ii(t) Sigma_min^(i)(t))` on `gf.times`, and its integral over
/// `[h_max, t_end]` per block.
pub fn min_weighted_variance<Q: Fn(f64) -> DMatrix<f64>>(
    gf: &GammaFamily,
    kf: &KalmanForm,
    q: Q,
    t_end: f64,
) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    let hm = gf.h.iter().copied().fold(0.0, f64::max);
    if t_end <= hm {
        return Err(Error::Config(format!("horizon {t_end} does not exceed the largest delay {hm}")));
    }
    let mut curves = Vec::with_capacity(gf.blocks());
    let mut totals = Vec::with_capacity(gf.blocks());
    for i in 0..gf.blocks() {
        let off = kf.offset(i);
        let ni = kf.sizes[i];
        let v: Vec<f64> = gf
            .times
            .iter()
            .zip(&gf.sigma_min[i])
            .map(|(&t, s)| {
                let qf = q(t);
                let qii = qf.view((off, off), (ni, ni));
                (qii * s).trace()
            })
            .collect();
        totals.push(integrate_series(&gf.times, &v, hm, t_end));
        curves.push(v);
    }
    Ok((curves, totals))
}

/// Exact integral of the piecewise-linear interpolant of `(t, v)` over `[a, b]`.
pub fn integrate_series(t: &[f64], v: &[f64], a: f64, b: f64) -> f64 {
    let mut acc = 0.0;
    for k in 0..t.len().saturating_sub(1) {
        let (t0, t1) = (t[k], t[k + 1]);
        let lo = t0.max(a);
        let hi = t1.min(b);
        if hi <= lo || t1 <= t0 {
            continue;
        }
        let f = |s: f64| v[k] + (v[k + 1] - v[k]) * (s - t0) / (t1 - t0);
        acc += 0.5 * (f(lo) + f(hi)) * (hi - lo);
    }
    acc
}

/// Per-path quadratic cost `int_{h}^{T} Z^T Q Z dt + rho int_0^{T-h} |U|^2 dt` from samples on
/// the step grid `t_k = k dt`.
pub fn cost_j<Q: Fn(f64) -> DMatrix<f64>>(z: &[DVector<f64>], u: &[DVector<f64>], dt: f64, q: Q, rho: f64, h: f64, t_end: f64) -> f64 {
    let times: Vec<f64> = (0..z.len().max(u.len())).map(|k| k as f64 * dt).collect();
    let zq: Vec<f64> = z.iter().enumerate().map(|(k, zk)| (zk.transpose() * q(times[k]) * zk)[0]).collect();
    let uu: Vec<f64> = u.iter().map(|uk| uk.norm_squared()).collect();
    let mut j = integrate_series(&times[..zq.len()], &zq, h, t_end);
    if rho != 0.0 {
        j += rho * integrate_series(&times[..uu.len()], &uu, 0.0, t_end - h);
    }
    j
}

/// Noise response of the Euler-discretized `Z` dynamics: `R(l) = Phi^l + sum_{q<l} Phi^{l-1-q}
/// Gbar(q dt) dt` maps the increment entering at one step to the state `l + 1` steps later.
pub fn discrete_response(kf: &KalmanForm, sde: &DelayedSde, dt: f64, lags: usize) -> Vec<DMatrix<f64>> {
    let n = kf.abar.nrows();
    let phi = DMatrix::<f64>::identity(n, n) + &kf.abar * dt;
    let l_mem = (sde.memory / dt).round() as usize;
    let mut out = Vec::with_capacity(lags);
    let mut pow = DMatrix::<f64>::identity(n, n);
    let mut mem = DMatrix::<f64>::zeros(n, n);
    for l in 0..lags {
        out.push(&pow + &mem);
        // Advance: mem(l+1) = Phi mem(l) + Gbar(l dt) dt.
        let g = if l < l_mem { kf.gbar(sde, l as f64 * dt) * dt } else { DMatrix::zeros(n, n) };
        mem = &phi * &mem + g;
        pow = &phi * &pow;
    }
    out
}

/// Covariance floor of the discretized model: `sum_{l < d_i} R_i(l) sbar sbar^T R_i(l)^T dt`.
pub fn discrete_sigma_min(kf: &KalmanForm, sde: &DelayedSde, dt: f64, i: usize, t: f64) -> DMatrix<f64> {
    let d = (block_delays(kf, sde)[i] / dt).round() as usize;
    let k = (t / dt).round() as usize;
    let resp = discrete_response(kf, sde, dt, d);
    let p = kf.projection(i);
    let mut acc = DMatrix::zeros(kf.sizes[i], kf.sizes[i]);
    for (l, r) in resp.iter().enumerate().take(d.min(k)) {
        let s = (k - 1 - l) as f64 * dt;
        let v = &p * r * kf.sigbar(sde, s);
        acc += &v * v.transpose() * dt;
    }
    acc
}

/// Per-path innovations `Z_i(t_k) - E[Z_i(t_k) | F_{k - d_i}]` of the discretized model,
/// stacked over blocks. They do not depend on the controller.
#[derive(Clone, Debug)]
pub struct Innovation {
    blocks: Vec<(usize, NoiseConv)>,
    n: usize,
}

impl Innovation {
    pub fn new(kf: &KalmanForm, sim: &DelayedSim) -> Self {
        let dmax = sim.d.iter().copied().max().unwrap_or(0);
        let resp = discrete_response(kf, &sim.sde, sim.dt, dmax);
        let blocks = (0..kf.blocks())
            .map(|i| {
                let p = kf.projection(i);
                let d = sim.d[kf.inputs[i]];
                let kern = resp[..d].iter().map(|r| &p * r).collect();
                (kf.offset(i), NoiseConv::new(kern, &kf.t, sim))
            })
            .collect();
        Innovation { blocks, n: kf.abar.nrows() }
    }

    pub fn at(&self, hist: &History, k: usize) -> DVector<f64> {
        let mut out = DVector::zeros(self.n);
        for (off, conv) in &self.blocks {
            let mut part = DVector::zeros(conv.rows());
            conv.apply(hist, k, &mut part);
            out.rows_mut(*off, part.len()).copy_from(&part);
        }
        out
    }
}

/// Everything a discrepancy check of the cropped-predictor identity needs from one path, in
/// state coordinates `X`.
#[derive(Clone, Debug, Default)]
pub struct PathRecord {
    pub dt: f64,
    /// `X(t_k)` for `k = 0..=steps`.
    pub x: Vec<DVector<f64>>,
    /// Inputs `U(t_k)` for `k = -pad..steps`, stored at `k + pad`.
    pub u: Vec<DVector<f64>>,
    pub pad: usize,
    /// Memory drift `r(t_k)` used at step `k`.
    pub r: Vec<DVector<f64>>,
    /// `sigma(t_k) dW_k`.
    pub noise: Vec<DVector<f64>>,
}

impl PathRecord {
    pub fn u_at(&self, input: usize, k: isize) -> f64 {
        let idx = k + self.pad as isize;
        if idx < 0 {
            0.0
        } else {
            self.u[idx as usize][input]
        }
    }
}

/// `|Z_i(t) - rhs(t)|` on the step grid for `t >= h_max`, where `rhs` is
/// `exp(A_ii h_i) Ytilde_i(t - h_i) + int_{t-h_i}^t exp(A_ii (t-s)) sbar_i dW`
/// plus `int_0^t exp(A_ii (t-s)) d_i(s) ds`, and `Ytilde_i` is the cropped predictor driven by the
/// same noise. Propagators are those of the Euler scheme, `exp(A_ii dt) -> I + A_ii dt`, so
/// the identity holds to rounding on a simulated path.
pub fn predictor_identity_gap(kf: &KalmanForm, sde: &DelayedSde, rec: &PathRecord, i: usize) -> Vec<(f64, f64)> {
    let dt = rec.dt;
    let steps = rec.x.len() - 1;
    let inp = kf.inputs[i];
    let d = (sde.h[inp] / dt).round() as usize;
    let dmax = sde.h.iter().map(|v| (v / dt).round() as usize).max().unwrap_or(0);
    let aii = kf.a_block(i, i);
    let ni = kf.sizes[i];
    let bii = kf.b_block(i, inp).column(0).into_owned();
    let p = kf.projection(i);
    let z: Vec<DVector<f64>> = rec.x.iter().map(|x| &kf.t * x).collect();
    let phi = DMatrix::<f64>::identity(ni, ni) + &aii * dt;
    let phi_inv = phi.clone().try_inverse().unwrap_or_else(|| DMatrix::identity(ni, ni));
    let phi_d = phi.pow(d as u32);
    let btil = phi_inv.pow(d as u32) * &bii;

    // Ytilde(0) = Z(0) + sum_{j<d} Phi^{-(j+1)} B U(t_{j-d}) dt.
    let mut y0 = &p * &z[0];
    let mut back = phi_inv.clone();
    for j in 0..d {
        y0 += &back * &bii * (rec.u_at(inp, j as isize - d as isize) * dt);
        back = &back * &phi_inv;
    }

    let mut ytil = Vec::with_capacity(steps + 1);
    ytil.push(y0);
    let mut drift_int = DVector::zeros(ni);
    let mut noise_win = DVector::zeros(ni);
    let mut out = Vec::new();
    for k in 0..steps {
        let sb = &p * (&kf.t * &rec.noise[k]);
        let next = &phi * &ytil[k] + &btil * (rec.u_at(inp, k as isize) * dt) + &sb;
        ytil.push(next);

        // d_i(t_k): cross-block state, cross-block delayed inputs, memory drift.
        let mut di = &p * (&kf.t * &rec.r[k]);
        for j in i + 1..kf.blocks() {
            di += kf.a_block(i, j) * (kf.projection(j) * &z[k]);
        }
        for l in 0..sde.m() {
            if l == inp {
                continue;
            }
            let dl = (sde.h[l] / dt).round() as isize;
            let col = kf.b_block(i, l).column(0).into_owned();
            di += col * rec.u_at(l, k as isize - dl);
        }
        drift_int = &phi * drift_int + di * dt;
        noise_win = &phi * &noise_win + &sb;
        if k >= d {
            let old = &p * (&kf.t * &rec.noise[k - d]);
            noise_win -= &phi_d * old;
        }
        let kk = k + 1;
        if kk >= dmax && kk >= d {
            let rhs = &phi_d * &ytil[kk - d] + &noise_win + &drift_int;
            let lhs = &p * &z[kk];
            out.push((kk as f64 * dt, (lhs - rhs).amax()));
        }
    }
    out
}
