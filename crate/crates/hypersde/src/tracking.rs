//! Tracking of a desired SDE-side input through the leftward transport: the cross-coupling
//! kernels `F_ij`, the noise kernels `G_i`, the causal synthesis of the boundary input `V_eff`,
//! and the explicit formula for `beta(t, 0)`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::kernels::KernelSet;
use crate::model::CoupledSystem;

/// Samples of a kernel on `x` nodes times a per-node affine grid in the second variable.
#[derive(Clone, Debug)]
struct Sheet {
    nx: usize,
    nq: usize,
    width: usize,
    /// Start and length of the second-variable range at `x`, both proportional to `1 - x`.
    lo: f64,
    len: f64,
    data: Vec<f64>,
}

impl Sheet {
    fn new(nx: usize, nq: usize, width: usize, lo: f64, len: f64) -> Self {
        Sheet { nx, nq, width, lo, len, data: vec![0.0; nx * nq * width] }
    }

    fn node_x(&self, a: usize) -> f64 {
        a as f64 / (self.nx - 1) as f64
    }

    fn node_s(&self, a: usize, q: usize) -> f64 {
        let r = 1.0 - self.node_x(a);
        r * (self.lo + self.len * q as f64 / (self.nq - 1) as f64)
    }

    fn slot(&mut self, a: usize, q: usize) -> &mut [f64] {
        let o = (a * self.nq + q) * self.width;
        &mut self.data[o..o + self.width]
    }

    fn at(&self, a: usize, q: usize) -> &[f64] {
        let o = (a * self.nq + q) * self.width;
        &self.data[o..o + self.width]
    }

    /// Bilinear interpolation; zero outside the support in the second variable.
    fn eval_into(&self, x: f64, s: f64, out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        let last = (self.nx - 1) as f64;
        let p = (x * last).clamp(0.0, last);
        let a0 = (p.floor() as usize).min(self.nx - 2);
        let fx = p - a0 as f64;
        let r = 1.0 - x.clamp(0.0, 1.0);
        let tol = 1e-12;
        if r <= tol {
            if s.abs() <= tol + self.lo * r {
                out.copy_from_slice(self.at(self.nx - 1, 0));
            }
            return;
        }
        let rho = (s / r - self.lo) / self.len;
        if !(-1e-9..=1.0 + 1e-9).contains(&rho) {
            return;
        }
        let qf = (rho * (self.nq - 1) as f64).clamp(0.0, (self.nq - 1) as f64);
        let q0 = (qf.floor() as usize).min(self.nq - 2);
        let fq = qf - q0 as f64;
        for (w, a, q) in [
            ((1.0 - fx) * (1.0 - fq), a0, q0),
            ((1.0 - fx) * fq, a0, q0 + 1),
            (fx * (1.0 - fq), a0 + 1, q0),
            (fx * fq, a0 + 1, q0 + 1),
        ] {
            if w != 0.0 {
                for (o, v) in out.iter_mut().zip(self.at(a, q)) {
                    *o += w * v;
                }
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrackingKernels {
    pub m: usize,
    pub big_n: usize,
    pub mu: Vec<f64>,
    /// `g[i]`: rows `G_i(x, u)` of length `N`, `u` in `[0, (1 - x)/mu_i]`.
    g: Vec<Sheet>,
    /// `f[i][j - i - 1]`: `F_ij(x, s)`, `s` in `[(1 - x)/mu_j, (1 - x)/mu_i]`.
    f: Vec<Vec<Sheet>>,
}

/// Upper limit of the noise-kernel recursion integral, clipped below at zero.
pub fn s_bar(mu_i: f64, mu_j: f64, x: f64, u: f64) -> f64 {
    ((1.0 - x - mu_i * u) / (mu_j - mu_i)).min(u).max(0.0)
}

/// Lower limit of the cross-coupling convolution.
pub fn s_under(mu_i: f64, mu_j: f64, x: f64, tau: f64) -> f64 {
    ((mu_j * tau - (1.0 - x)) / (mu_j - mu_i)).max(0.0)
}

fn lerp_nodes(v: &[DMatrix<f64>], i: usize, j: usize, x: f64) -> f64 {
    let n = v.len();
    let p = (x * (n - 1) as f64).clamp(0.0, (n - 1) as f64);
    let k = (p.floor() as usize).min(n - 2);
    let w = p - k as f64;
    v[k][(i, j)] * (1.0 - w) + v[k + 1][(i, j)] * w
}

fn panels_for(len: f64, per_unit: f64) -> usize {
    ((len * per_unit).ceil() as usize).max(1)
}

/// Builds `G` by downward recursion in the component index and `F` from the in-domain
/// leftward coupling. Both sheets use the kernel mesh resolution.
pub fn build_tracking_kernels(ks: &KernelSet, sys: &CoupledSystem) -> Result<TrackingKernels> {
    let m = ks.m;
    let nn = ks.big_n;
    let mu = sys.mu.clone();
    if mu.len() != m {
        return Err(Error::Dimension("kernel set and system disagree on m".into()));
    }
    for i in 0..m {
        for j in i + 1..m {
            if (mu[j] - mu[i]).abs() < 1e-12 {
                return Err(Error::DegenerateSpeeds(ks.n + i, ks.n + j));
            }
        }
    }
    let nx = ks.nx;
    let nq = ks.nx;
    let per_unit = (nq - 1) as f64 * mu.iter().copied().fold(0.0, f64::max);
    let omega = &ks.omega;
    let gb = &ks.gamma_beta;

    let mut g: Vec<Sheet> = (0..m).map(|i| Sheet::new(nx, nq, nn, 0.0, 1.0 / mu[i])).collect();
    let mut buf = vec![0.0; nn];
    for i in (0..m).rev() {
        let mut sheet = g[i].clone();
        for a in 0..nx {
            let x = sheet.node_x(a);
            for q in 0..nq {
                let u = sheet.node_s(a, q);
                let xe = (x + mu[i] * u).min(1.0);
                let mut row: Vec<f64> = (0..nn).map(|c| lerp_nodes(gb, i, c, xe)).collect();
                for j in i + 1..m {
                    let top = s_bar(mu[i], mu[j], x, u);
                    if top <= 0.0 {
                        continue;
                    }
                    let k = panels_for(top, per_unit);
                    let h = top / k as f64;
                    for p in 0..=k {
                        let s = p as f64 * h;
                        let w = if p == 0 || p == k { 0.5 * h } else { h };
                        let xs = (x + mu[i] * (u - s)).min(1.0);
                        let om = lerp_nodes(omega, i, j, xs);
                        if om == 0.0 {
                            continue;
                        }
                        g[j].eval_into(xs, s, &mut buf);
                        for (r, v) in row.iter_mut().zip(&buf) {
                            *r += w * om * v;
                        }
                    }
                }
                sheet.slot(a, q).copy_from_slice(&row);
            }
        }
        g[i] = sheet;
    }

    let mut f: Vec<Vec<Sheet>> = (0..m)
        .map(|i| (i + 1..m).map(|j| Sheet::new(nx, nq, 1, 1.0 / mu[j], 1.0 / mu[i] - 1.0 / mu[j])).collect())
        .collect();
    let mut one = [0.0];
    for i in (0..m).rev() {
        for j in i + 1..m {
            let mut sheet = f[i][j - i - 1].clone();
            let jac = mu[j] / (mu[j] - mu[i]);
            for a in 0..nx {
                let x = sheet.node_x(a);
                for q in 0..nq {
                    let s = sheet.node_s(a, q);
                    let xe = x + mu[i] * mu[j] / (mu[j] - mu[i]) * (s - (1.0 - x) / mu[j]);
                    let mut val = jac * lerp_nodes(omega, i, j, xe.clamp(0.0, 1.0));
                    for l in i + 1..j {
                        let lo = s_under(mu[i], mu[l], x, s);
                        let hi = (mu[j] * s - (1.0 - x)) / (mu[j] - mu[i]);
                        if hi <= lo {
                            continue;
                        }
                        let k = panels_for(hi - lo, per_unit);
                        let h = (hi - lo) / k as f64;
                        for p in 0..=k {
                            let r = lo + p as f64 * h;
                            let w = if p == 0 || p == k { 0.5 * h } else { h };
                            let xr = (x + mu[i] * r).min(1.0);
                            let om = lerp_nodes(omega, i, l, xr);
                            if om == 0.0 {
                                continue;
                            }
                            f[l][j - l - 1].eval_into(xr, s - r, &mut one);
                            val += w * om * one[0];
                        }
                    }
                    sheet.slot(a, q)[0] = val;
                }
            }
            f[i][j - i - 1] = sheet;
        }
    }
    Ok(TrackingKernels { m, big_n: nn, mu, g, f })
}

impl TrackingKernels {
    /// Number of samples per kernel line; callers resample at this resolution.
    pub fn time_samples(&self) -> usize {
        self.g.first().map_or(2, |s| s.nq)
    }

    pub fn is_zero(&self) -> bool {
        self.g.iter().all(|s| s.data.iter().all(|v| *v == 0.0))
    }

    /// `G_i(x, u)` as a row of length `N`; zero beyond its support.
    pub fn g(&self, i: usize, x: f64, u: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.big_n];
        self.g[i].eval_into(x, u, &mut out);
        out
    }

    /// `F_ij(x, s)` for `i < j`.
    pub fn f(&self, i: usize, j: usize, x: f64, s: f64) -> f64 {
        assert!(i < j && j < self.m, "cross-coupling kernels exist only for i < j");
        let mut out = [0.0];
        self.f[i][j - i - 1].eval_into(x, s, &mut out);
        out[0]
    }

    /// `m x N` matrix whose row `i` is `G_i(0, u)`.
    pub fn boundary_kernel(&self, u: f64) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.m, self.big_n);
        for i in 0..self.m {
            let row = self.g(i, 0.0, u);
            for (c, v) in row.into_iter().enumerate() {
                out[(i, c)] = v;
            }
        }
        out
    }

    /// CSV dump of `G_i(0, u)` on `samples` points of `[0, 1/mu_min]`.
    pub fn write_boundary_csv<W: std::io::Write>(&self, w: W, samples: usize) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let mut head = vec!["u".to_string()];
        for i in 0..self.m {
            for c in 0..self.big_n {
                head.push(format!("g{i}_{c}"));
            }
        }
        wr.write_record(&head)?;
        let top = 1.0 / self.mu[0];
        for k in 0..samples.max(2) {
            let u = top * k as f64 / (samples.max(2) - 1) as f64;
            let bk = self.boundary_kernel(u);
            let mut rec = vec![format!("{u:.10e}")];
            for i in 0..self.m {
                for c in 0..self.big_n {
                    rec.push(format!("{:.10e}", bk[(i, c)]));
                }
            }
            wr.write_record(&rec)?;
        }
        wr.flush()?;
        Ok(())
    }
}

/// Per-path causal synthesizer of the boundary input. Component `j` is evaluated `L_j`
/// ahead of real time, `L_j = 1/mu_min - 1/mu_j`, which is as far as the desired signal
/// allows; faster components are therefore available to the convolutions of slower ones.
#[derive(Clone, Debug)]
pub struct VeffSynth {
    m: usize,
    /// Delays `1/mu_j` in steps.
    d: Vec<usize>,
    lead: Vec<usize>,
    /// Weights of `F_ij(0, q dt)` for `q` in `d_j ..= d_i`, pair `(i, j)` with `i < j`.
    weights: Vec<Vec<Vec<f64>>>,
    offset: usize,
    hist: Vec<Vec<f64>>,
    step: usize,
}

impl VeffSynth {
    /// `pre(j, t)` gives component `j` before time zero; `past(j, t)` the desired signal at
    /// negative times, used during warm-up.
    pub fn new<P, Q>(tk: &TrackingKernels, dt: f64, pre: P, past: Q) -> Result<Self>
    where
        P: Fn(usize, f64) -> f64,
        Q: Fn(usize, f64) -> f64,
    {
        if dt <= 0.0 {
            return Err(Error::Config("time step must be positive".into()));
        }
        let m = tk.m;
        let d: Vec<usize> = tk.mu.iter().map(|mu| ((1.0 / mu) / dt).round() as usize).collect();
        let dmax = d.iter().copied().max().unwrap_or(0);
        let lead: Vec<usize> = d.iter().map(|&dj| dmax - dj).collect();
        let weights = (0..m)
            .map(|i| {
                (i + 1..m)
                    .map(|j| {
                        (d[j]..=d[i])
                            .map(|q| {
                                let end = q == d[j] || q == d[i];
                                let w = if d[i] == d[j] { 0.0 } else if end { 0.5 * dt } else { dt };
                                w * tk.f(i, j, 0.0, q as f64 * dt)
                            })
                            .collect()
                    })
                    .collect()
            })
            .collect();
        let offset = dmax + 1;
        let hist = (0..m)
            .map(|j| (0..offset).map(|k| pre(j, (k as f64 - offset as f64) * dt)).collect())
            .collect();
        let mut s = VeffSynth { m, d, lead, weights, offset, hist, step: 0 };
        // Warm-up: compute the led components for the real-time window [0, L_j).
        let lmax = s.lead.iter().copied().max().unwrap_or(0);
        for back in (1..=lmax).rev() {
            let t = -(back as f64) * dt;
            let v: Vec<f64> = (0..m).map(|j| past(j, t)).collect();
            s.advance(-(back as isize), &v);
        }
        Ok(s)
    }

    fn advance(&mut self, k: isize, vsde: &[f64]) {
        let off = self.offset as isize;
        let d0 = *self.d.iter().max().unwrap_or(&0) as isize;
        for j in (0..self.m).rev() {
            let target = k + self.lead[j] as isize;
            if target < 0 {
                continue;
            }
            let mut val = vsde[j];
            for i2 in j + 1..self.m {
                let w = &self.weights[j][i2 - j - 1];
                for (p, q) in (self.d[i2]..=self.d[j]).enumerate() {
                    let idx = (k + d0 - q as isize + off) as usize;
                    val -= w[p] * self.hist[i2][idx];
                }
            }
            let idx = (target + off) as usize;
            let h = &mut self.hist[j];
            if h.len() <= idx {
                h.resize(idx + 1, 0.0);
            }
            h[idx] = val;
        }
    }

    /// Consumes the desired signal at the current time and returns `V_eff` for it.
    pub fn push(&mut self, vsde_now: &[f64]) -> DVector<f64> {
        let k = self.step as isize;
        self.advance(k, vsde_now);
        self.step += 1;
        let idx = (k + self.offset as isize) as usize;
        DVector::from_iterator(self.m, (0..self.m).map(|j| self.hist[j][idx]))
    }
}

/// Runs the synthesizer over `steps` steps, querying the desired signal once per step at the
/// current time only.
pub fn synthesize_veff<S: FnMut(f64) -> DVector<f64>>(
    tk: &TrackingKernels,
    dt: f64,
    steps: usize,
    mut vsde: S,
) -> Result<Vec<DVector<f64>>> {
    let mut synth = VeffSynth::new(tk, dt, |_, _| 0.0, |_, _| 0.0)?;
    Ok((0..steps)
        .map(|k| {
            let v = vsde(k as f64 * dt);
            synth.push(v.as_slice())
        })
        .collect())
}

/// `beta(t, 0)` from the delayed desired signal and the recent noise increments
/// `sigma(s_k) dW_k` (most recent last); lag `l` pairs with `G(0, l dt)`.
pub fn beta_explicit(tk: &TrackingKernels, vsde_delayed: &DVector<f64>, noise: &[DVector<f64>], dt: f64) -> Result<DVector<f64>> {
    let window = ((1.0 / tk.mu[0]) / dt).round() as usize;
    if noise.len() < window {
        return Err(Error::ShortHistory(format!("{} increments for a window of {window}", noise.len())));
    }
    let mut out = vsde_delayed.clone();
    for l in 0..window {
        let inc = &noise[noise.len() - 1 - l];
        let gk = tk.boundary_kernel(l as f64 * dt);
        out += gk * inc;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::KernelSet;

    /// Hand-built kernel set with constant leftward coupling and gains.
    pub(crate) fn constant_set(mu: &[f64], omega01: f64, gb: &[f64]) -> (KernelSet, CoupledSystem) {
        let m = mu.len();
        let nx = 41;
        let mut sys = crate::kernels::tests_support::scalar_with_mu(mu);
        sys.mu = mu.to_vec();
        let mut ks = crate::kernels::tests_support::empty(nx, 1, m, 1);
        for a in 0..nx {
            for i in 0..m {
                ks.gamma_beta[a][(i, 0)] = gb[i];
            }
            if m > 1 {
                ks.omega[a][(0, 1)] = omega01;
            }
        }
        (ks, sys)
    }

    #[test]
    fn single_component_is_gain_shift() {
        let (ks, sys) = constant_set(&[2.0], 0.0, &[0.7]);
        let tk = build_tracking_kernels(&ks, &sys).unwrap();
        assert!((tk.g(0, 0.0, 0.3)[0] - 0.7).abs() < 1e-12);
        assert_eq!(tk.g(0, 0.0, 0.6)[0], 0.0);
        let out = synthesize_veff(&tk, 0.01, 50, |t| DVector::from_element(1, t.sin())).unwrap();
        for (k, v) in out.iter().enumerate() {
            assert_eq!(v[0], (k as f64 * 0.01).sin());
        }
    }

    #[test]
    fn constant_coupling_noise_kernel() {
        let (mu1, mu2, w0) = (1.0, 2.0, 0.6);
        let (ks, sys) = constant_set(&[mu1, mu2], w0, &[0.3, -0.5]);
        let tk = build_tracking_kernels(&ks, &sys).unwrap();
        for &u in &[0.0, 0.1, 0.25, 0.4, 0.7, 0.95] {
            let expect = 0.3 + w0 * -0.5 * s_bar(mu1, mu2, 0.0, u);
            assert!((tk.g(0, 0.0, u)[0] - expect).abs() < 1e-3, "u={u}");
        }
        assert!((tk.g(1, 0.0, 0.2)[0] + 0.5).abs() < 1e-12);
    }

    #[test]
    fn noise_limits_stay_in_range() {
        for &(x, u) in &[(0.0, 0.0), (0.2, 0.5), (0.9, 0.1), (0.5, 0.5)] {
            let s = s_bar(1.0, 3.0, x, u);
            assert!((0.0..=u).contains(&s));
        }
    }

    #[test]
    fn zero_coupling_is_pure_shift() {
        let (ks, sys) = constant_set(&[1.0, 2.0], 0.0, &[0.0, 0.0]);
        let tk = build_tracking_kernels(&ks, &sys).unwrap();
        assert!(tk.is_zero());
        let dt = 0.01;
        let out = synthesize_veff(&tk, dt, 300, |t| DVector::from_vec(vec![t, 2.0 * t])).unwrap();
        // Component 2 runs half a time unit ahead of the desired signal.
        for k in 60..300 {
            let t = k as f64 * dt;
            assert!((out[k][0] - t).abs() < 1e-12);
            assert!((out[k][1] - 2.0 * (t - 0.5)).abs() < 1e-9);
        }
    }

    #[test]
    fn step_convolution_matches_fine_riemann_sum() {
        let (mu1, mu2, w0) = (1.0, 2.0, 0.6);
        let (ks, sys) = constant_set(&[mu1, mu2], w0, &[0.0, 0.0]);
        let tk = build_tracking_kernels(&ks, &sys).unwrap();
        let fval = w0 * mu2 / (mu2 - mu1);
        assert!((tk.f(0, 1, 0.0, 0.7) - fval).abs() < 1e-12);
        let dt = 0.001;
        let t0 = 0.3;
        let step = |t: f64| if t >= t0 { 1.0 } else { 0.0 };
        let out = synthesize_veff(&tk, dt, 2000, |t| DVector::from_vec(vec![0.0, step(t)])).unwrap();
        // Reference at ten times the resolution.
        let lead = 1.0 / mu1 - 1.0 / mu2;
        for &t in &[0.2, 0.5, 0.9, 1.4] {
            let k = (t / dt).round() as usize;
            let fine = 10_000;
            let (lo, hi) = (1.0 / mu2, 1.0 / mu1);
            let h = (hi - lo) / fine as f64;
            let mut acc = 0.0;
            for p in 0..fine {
                let s = lo + (p as f64 + 0.5) * h;
                acc += fval * step(t + 1.0 / mu1 - s - lead) * h;
            }
            assert!((out[k][0] + acc).abs() < 2.0 * dt, "t={t}: {} vs {}", out[k][0], -acc);
        }
    }

    #[test]
    fn causal_queries_only() {
        let (ks, sys) = constant_set(&[1.0, 1.5], 0.4, &[0.1, 0.2]);
        let tk = build_tracking_kernels(&ks, &sys).unwrap();
        let dt = 0.01;
        let mut calls = Vec::new();
        synthesize_veff(&tk, dt, 100, |t| {
            calls.push(t);
            DVector::from_vec(vec![t.cos(), t.sin()])
        })
        .unwrap();
        for (k, t) in calls.iter().enumerate() {
            assert!(*t <= k as f64 * dt + 1e-15);
        }
    }

    #[test]
    fn noiseless_beta_is_delayed_signal() {
        let (ks, sys) = constant_set(&[1.0, 2.0], 0.5, &[0.3, 0.2]);
        let tk = build_tracking_kernels(&ks, &sys).unwrap();
        let v = DVector::from_vec(vec![1.5, -2.0]);
        let zeros = vec![DVector::zeros(1); 200];
        assert_eq!(beta_explicit(&tk, &v, &zeros, 0.01).unwrap(), v);
        assert!(beta_explicit(&tk, &v, &zeros[..10], 0.01).is_err());
    }
}
