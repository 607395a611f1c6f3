//! Backstepping kernels on the triangle `0 <= y <= x <= 1`, the boundary feedback that
//! cancels the reflection at `x = 1`, and the forward/inverse Volterra change of variables.
//!
//! Every kernel entry obeys a first-order transport equation `a K_x + b K_y = S` whose
//! characteristics run from a data-carrying edge (diagonal or `y = 0`) into the triangle.
//! A Picard sweep freezes the sources `S` at the previous iterate and integrates each node
//! independently along its characteristic, so the sweep order inside a family is irrelevant.
//! Where a characteristic starts on `y = 0` and the equations leave the value free (the
//! rightward-rightward kernel), zero data is used.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{CoupledSystem, MatrixFn};

/// A scalar field on the triangular mesh, row-major in `x`.
#[derive(Clone, Debug, PartialEq)]
pub struct TriField {
    nx: usize,
    data: Vec<f64>,
}

impl TriField {
    pub fn zeros(nx: usize) -> Self {
        TriField { nx, data: vec![0.0; nx * (nx + 1) / 2] }
    }

    #[inline]
    fn idx(a: usize, b: usize) -> usize {
        a * (a + 1) / 2 + b
    }

    #[inline]
    pub fn get(&self, a: usize, b: usize) -> f64 {
        self.data[Self::idx(a, b)]
    }

    #[inline]
    pub fn set(&mut self, a: usize, b: usize, v: f64) {
        self.data[Self::idx(a, b)] = v;
    }

    /// Piecewise-linear interpolation on the two triangles of each mesh square.
    #[inline]
    pub fn interp(&self, x: f64, y: f64) -> f64 {
        let last = (self.nx - 1) as f64;
        let p = (x * last).clamp(0.0, last);
        let q = (y * last).clamp(0.0, p);
        let a0 = (p.floor() as usize).min(self.nx - 2);
        let b0 = (q.floor() as usize).min(a0);
        let fx = p - a0 as f64;
        let fy = q - b0 as f64;
        let v00 = self.get(a0, b0);
        let v11 = self.get(a0 + 1, b0 + 1);
        if fx >= fy || b0 + 1 > a0 {
            let v10 = self.get(a0 + 1, b0);
            v00 + fx * (v10 - v00) + fy * (v11 - v10)
        } else {
            let v01 = self.get(a0, b0 + 1);
            v00 + fy * (v01 - v00) + fx * (v11 - v01)
        }
    }

    fn max_diff(&self, other: &TriField) -> f64 {
        self.data.iter().zip(&other.data).fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }
}

/// A matrix of mesh fields, one per entry.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelBlock {
    pub rows: usize,
    pub cols: usize,
    pub entries: Vec<TriField>,
}

impl KernelBlock {
    fn zeros(rows: usize, cols: usize, nx: usize) -> Self {
        KernelBlock { rows, cols, entries: vec![TriField::zeros(nx); rows * cols] }
    }

    #[inline]
    pub fn entry(&self, i: usize, j: usize) -> &TriField {
        &self.entries[i * self.cols + j]
    }

    pub fn at(&self, a: usize, b: usize) -> DMatrix<f64> {
        DMatrix::from_fn(self.rows, self.cols, |i, j| self.entry(i, j).get(a, b))
    }

    pub fn interp(&self, x: f64, y: f64) -> DMatrix<f64> {
        DMatrix::from_fn(self.rows, self.cols, |i, j| self.entry(i, j).interp(x, y))
    }

    fn max_diff(&self, other: &KernelBlock) -> f64 {
        self.entries.iter().zip(&other.entries).fold(0.0, |m, (a, b)| m.max(a.max_diff(b)))
    }
}

#[derive(Clone, Debug)]
pub struct KernelSet {
    pub nx: usize,
    pub n: usize,
    pub m: usize,
    pub big_n: usize,
    pub kuu: KernelBlock,
    pub kuv: KernelBlock,
    pub kvu: KernelBlock,
    pub kvv: KernelBlock,
    /// Node samples of the SDE-coupling gains (`n x N` and `m x N`).
    pub gamma_alpha: Vec<DMatrix<f64>>,
    pub gamma_beta: Vec<DMatrix<f64>>,
    /// Strictly upper-triangular in-domain couplings of the target system.
    pub psi: Vec<DMatrix<f64>>,
    pub omega: Vec<DMatrix<f64>>,
    /// Coefficient of `beta(t, 0)` in the rightward target equation (`n x m`).
    pub psi_boundary: Vec<DMatrix<f64>>,
    pub residual_norm: f64,
    pub sweeps: usize,
}

fn lerp_mats(v: &[DMatrix<f64>], x: f64) -> DMatrix<f64> {
    let n = v.len();
    let p = (x * (n - 1) as f64).clamp(0.0, (n - 1) as f64);
    let i = (p.floor() as usize).min(n - 2);
    let w = p - i as f64;
    &v[i] * (1.0 - w) + &v[i + 1] * w
}

impl KernelSet {
    pub fn dx(&self) -> f64 {
        1.0 / (self.nx - 1) as f64
    }

    pub fn gamma_beta_at(&self, x: f64) -> DMatrix<f64> {
        lerp_mats(&self.gamma_beta, x)
    }

    pub fn gamma_alpha_at(&self, x: f64) -> DMatrix<f64> {
        lerp_mats(&self.gamma_alpha, x)
    }

    pub fn omega_at(&self, x: f64) -> DMatrix<f64> {
        lerp_mats(&self.omega, x)
    }

    pub fn omega_is_zero(&self) -> bool {
        let scale = self.omega.iter().chain(&self.gamma_beta).fold(1.0f64, |s, m| s.max(linalg::max_abs(m)));
        self.omega.iter().all(|w| linalg::max_abs(w) <= 1e-12 * scale)
    }

    /// Flat CSV dump: `field,i,j,a,b,value`, preceded by a metadata row.
    pub fn write_csv<W: std::io::Write>(&self, w: W, tag: &str) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["field", "i", "j", "a", "b", "value"])?;
        wr.write_record([
            "meta",
            &self.nx.to_string(),
            &self.n.to_string(),
            &self.m.to_string(),
            &self.big_n.to_string(),
            &format!("{:.17e}", self.residual_norm),
        ])?;
        wr.write_record(["tag", "0", "0", "0", "0", tag])?;
        for (name, blk) in [("kuu", &self.kuu), ("kuv", &self.kuv), ("kvu", &self.kvu), ("kvv", &self.kvv)] {
            for i in 0..blk.rows {
                for j in 0..blk.cols {
                    let f = blk.entry(i, j);
                    for a in 0..self.nx {
                        for b in 0..=a {
                            wr.write_record([
                                name,
                                &i.to_string(),
                                &j.to_string(),
                                &a.to_string(),
                                &b.to_string(),
                                &format!("{:.17e}", f.get(a, b)),
                            ])?;
                        }
                    }
                }
            }
        }
        for (name, v) in [
            ("gamma_alpha", &self.gamma_alpha),
            ("gamma_beta", &self.gamma_beta),
            ("psi", &self.psi),
            ("omega", &self.omega),
            ("psi_boundary", &self.psi_boundary),
        ] {
            for (a, mat) in v.iter().enumerate() {
                for i in 0..mat.nrows() {
                    for j in 0..mat.ncols() {
                        wr.write_record([
                            name,
                            &i.to_string(),
                            &j.to_string(),
                            &a.to_string(),
                            "0",
                            &format!("{:.17e}", mat[(i, j)]),
                        ])?;
                    }
                }
            }
        }
        wr.flush()?;
        Ok(())
    }

    /// Reads a dump written by [`KernelSet::write_csv`]; returns the set and its tag.
    pub fn read_csv<R: std::io::Read>(r: R) -> Result<(KernelSet, String)> {
        let mut rd = csv::Reader::from_reader(r);
        let mut recs = rd.records();
        let bad = |s: &str| Error::Config(format!("kernel cache: {s}"));
        let meta = recs.next().ok_or_else(|| bad("empty"))??;
        if &meta[0] != "meta" {
            return Err(bad("missing metadata row"));
        }
        let p = |s: &str| s.parse::<usize>().map_err(|_| bad("bad integer"));
        let (nx, n, m, big_n) = (p(&meta[1])?, p(&meta[2])?, p(&meta[3])?, p(&meta[4])?);
        let residual_norm: f64 = meta[5].parse().map_err(|_| bad("bad residual"))?;
        let tagrec = recs.next().ok_or_else(|| bad("missing tag"))??;
        let tag = tagrec[5].to_string();
        let mut ks = empty_set(nx, n, m, big_n);
        ks.residual_norm = residual_norm;
        for rec in recs {
            let rec = rec?;
            let (i, j, a, b) = (p(&rec[1])?, p(&rec[2])?, p(&rec[3])?, p(&rec[4])?);
            let v: f64 = rec[5].parse().map_err(|_| bad("bad value"))?;
            let blk = match &rec[0] {
                "kuu" => Some(&mut ks.kuu),
                "kuv" => Some(&mut ks.kuv),
                "kvu" => Some(&mut ks.kvu),
                "kvv" => Some(&mut ks.kvv),
                _ => None,
            };
            if let Some(blk) = blk {
                let cols = blk.cols;
                blk.entries[i * cols + j].set(a, b, v);
                continue;
            }
            let vec = match &rec[0] {
                "gamma_alpha" => &mut ks.gamma_alpha,
                "gamma_beta" => &mut ks.gamma_beta,
                "psi" => &mut ks.psi,
                "omega" => &mut ks.omega,
                "psi_boundary" => &mut ks.psi_boundary,
                other => return Err(bad(&format!("unknown field {other}"))),
            };
            vec[a][(i, j)] = v;
        }
        Ok((ks, tag))
    }
}

fn empty_set(nx: usize, n: usize, m: usize, big_n: usize) -> KernelSet {
    KernelSet {
        nx,
        n,
        m,
        big_n,
        kuu: KernelBlock::zeros(n, n, nx),
        kuv: KernelBlock::zeros(n, m, nx),
        kvu: KernelBlock::zeros(m, n, nx),
        kvv: KernelBlock::zeros(m, m, nx),
        gamma_alpha: vec![DMatrix::zeros(n, big_n); nx],
        gamma_beta: vec![DMatrix::zeros(m, big_n); nx],
        psi: vec![DMatrix::zeros(n, n); nx],
        omega: vec![DMatrix::zeros(m, m); nx],
        psi_boundary: vec![DMatrix::zeros(n, m); nx],
        residual_norm: 0.0,
        sweeps: 0,
    }
}

/// Coupling coefficients sampled on the mesh abscissae.
struct Coeffs {
    lambda: Vec<f64>,
    mu: Vec<f64>,
    spp: Vec<DMatrix<f64>>,
    spm: Vec<DMatrix<f64>>,
    smp: Vec<DMatrix<f64>>,
    smm: Vec<DMatrix<f64>>,
}

impl Coeffs {
    fn new(sys: &CoupledSystem, nx: usize) -> Self {
        let xs: Vec<f64> = (0..nx).map(|a| a as f64 / (nx - 1) as f64).collect();
        let s = |f: &MatrixFn| xs.iter().map(|&x| f.eval(x)).collect::<Vec<_>>();
        Coeffs {
            lambda: sys.lambda.clone(),
            mu: sys.mu.clone(),
            spp: s(&sys.sigma_pp),
            spm: s(&sys.sigma_pm),
            smp: s(&sys.sigma_mp),
            smm: s(&sys.sigma_mm),
        }
    }
}

#[derive(Clone, Copy)]
enum Edge {
    Diagonal,
    Bottom,
}

/// Signed characteristic parameter `tau0` such that `P + tau0 (a, b)` is the inflow point,
/// and the edge it lies on. `backward` selects `tau0 <= 0`.
fn inflow(x: f64, y: f64, a: f64, b: f64, backward: bool) -> (f64, Edge) {
    let sgn = if backward { -1.0 } else { 1.0 };
    let (da, db) = (sgn * a, sgn * b);
    let mut best = (f64::INFINITY, Edge::Bottom);
    if db < 0.0 {
        best = (y / -db, Edge::Bottom);
    }
    // Reaching the diagonal needs y - x to increase along the move.
    let rel = db - da;
    if rel > 0.0 {
        let t = (x - y) / rel;
        if t < best.0 {
            best = (t, Edge::Diagonal);
        }
    }
    (sgn * best.0, best.1)
}

/// `int_{tau0}^{0} S(P + tau (a, b)) dtau` by trapezoid with sample spacing at most one cell.
#[inline]
fn line_integral(s: &TriField, x: f64, y: f64, a: f64, b: f64, tau0: f64, dx: f64) -> f64 {
    if tau0 == 0.0 {
        return 0.0;
    }
    let reach = tau0.abs() * a.abs().max(b.abs());
    let k = ((reach / dx).ceil() as usize).max(1);
    let step = tau0 / k as f64;
    let mut acc = 0.5 * (s.interp(x, y) + s.interp(x + tau0 * a, y + tau0 * b));
    for q in 1..k {
        let t = q as f64 * step;
        acc += s.interp(x + t * a, y + t * b);
    }
    // Integral from tau0 to 0 equals minus the integral from 0 to tau0.
    -acc * step
}

struct Family<'a> {
    /// Coefficients `(a, b)` of `a K_x + b K_y = S` for entry `(i, j)`.
    dir: &'a dyn Fn(usize, usize) -> (f64, f64),
    backward: bool,
}

/// Integrates every node of every entry along its characteristic from the inflow data.
fn sweep_block<D, B>(
    nx: usize,
    rows: usize,
    cols: usize,
    fam: &Family,
    src: &KernelBlock,
    diag_data: D,
    bottom_data: B,
) -> KernelBlock
where
    D: Fn(usize, usize, f64) -> f64,
    B: Fn(usize, usize, f64) -> f64,
{
    let dx = 1.0 / (nx - 1) as f64;
    let mut out = KernelBlock::zeros(rows, cols, nx);
    for i in 0..rows {
        for j in 0..cols {
            let (ca, cb) = (fam.dir)(i, j);
            let s = src.entry(i, j);
            let field = &mut out.entries[i * cols + j];
            for a in 0..nx {
                let x = a as f64 * dx;
                for b in 0..=a {
                    let y = b as f64 * dx;
                    let (tau0, edge) = inflow(x, y, ca, cb, fam.backward);
                    let (x0, y0) = (x + tau0 * ca, y + tau0 * cb);
                    let data = match edge {
                        Edge::Diagonal => diag_data(i, j, 0.5 * (x0 + y0)),
                        Edge::Bottom => bottom_data(i, j, x0),
                    };
                    field.set(a, b, data + line_integral(s, x, y, ca, cb, tau0, dx));
                }
            }
        }
    }
    out
}

/// Sources of the four kernel families at every node, given the current iterate.
fn sources(ks: &KernelSet, c: &Coeffs) -> [KernelBlock; 4] {
    let (n, m, nx) = (ks.n, ks.m, ks.nx);
    let mut s_uu = KernelBlock::zeros(n, n, nx);
    let mut s_uv = KernelBlock::zeros(n, m, nx);
    let mut s_vu = KernelBlock::zeros(m, n, nx);
    let mut s_vv = KernelBlock::zeros(m, m, nx);
    for a in 0..nx {
        let psi = &ks.psi[a];
        let om = &ks.omega[a];
        for b in 0..=a {
            let kuu = ks.kuu.at(a, b);
            let kuv = ks.kuv.at(a, b);
            let kvu = ks.kvu.at(a, b);
            let kvv = ks.kvv.at(a, b);
            let uu = psi * &kuu - &kuu * &c.spp[b] - &kuv * &c.smp[b];
            let uv = psi * &kuv - &kuu * &c.spm[b] - &kuv * &c.smm[b];
            let vu = om * &kvu - &kvu * &c.spp[b] - &kvv * &c.smp[b];
            let vv = om * &kvv - &kvu * &c.spm[b] - &kvv * &c.smm[b];
            for (blk, val) in [(&mut s_uu, uu), (&mut s_uv, uv), (&mut s_vu, vu), (&mut s_vv, vv)] {
                for i in 0..blk.rows {
                    for j in 0..blk.cols {
                        let cols = blk.cols;
                        blk.entries[i * cols + j].set(a, b, val[(i, j)]);
                    }
                }
            }
        }
    }
    [s_uu, s_uv, s_vu, s_vv]
}

/// Heun march of `g' = f(x, g)` on the mesh abscissae.
fn march<F: Fn(usize, &DMatrix<f64>) -> DMatrix<f64>>(g0: DMatrix<f64>, nx: usize, f: F) -> Vec<DMatrix<f64>> {
    let dx = 1.0 / (nx - 1) as f64;
    let mut out = Vec::with_capacity(nx);
    out.push(g0);
    for a in 0..nx - 1 {
        let g = &out[a];
        let k1 = f(a, g);
        let pred = g + &k1 * dx;
        let k2 = f(a + 1, &pred);
        out.push(g + (k1 + k2) * (0.5 * dx));
    }
    out
}

/// Picard solve of the kernel equations on an `nx`-point mesh.
pub fn solve_kernels(sys: &CoupledSystem, nx: usize, tol: f64, max_iter: usize) -> Result<KernelSet> {
    sys.check_dims()?;
    if nx < 8 {
        return Err(Error::Config("kernel mesh needs nx >= 8".into()));
    }
    if tol <= 0.0 {
        return Err(Error::Config("tolerance must be positive".into()));
    }
    for (speeds, off) in [(&sys.lambda, 0), (&sys.mu, sys.n())] {
        for i in 0..speeds.len() {
            for j in i + 1..speeds.len() {
                if (speeds[i] - speeds[j]).abs() < 1e-12 {
                    return Err(Error::DegenerateSpeeds(off + i, off + j));
                }
            }
        }
    }
    let (n, m, nn) = (sys.n(), sys.m(), sys.big_n());
    let c = Coeffs::new(sys, nx);
    let dx = 1.0 / (nx - 1) as f64;
    let lam_p = DMatrix::from_diagonal(&DVector::from_vec(c.lambda.clone()));
    let lam_m = DMatrix::from_diagonal(&DVector::from_vec(c.mu.clone()));
    let lam_m_inv = DMatrix::from_diagonal(&DVector::from_iterator(m, c.mu.iter().map(|v| 1.0 / v)));
    let lam_p_inv = DMatrix::from_diagonal(&DVector::from_iterator(n, c.lambda.iter().map(|v| 1.0 / v)));

    let (lambda, mu) = (c.lambda.clone(), c.mu.clone());
    let dir_uu = move |i: usize, j: usize| (lambda[i], lambda[j]);
    let (lambda, mu2) = (c.lambda.clone(), mu.clone());
    let dir_uv = move |i: usize, j: usize| (lambda[i], -mu2[j]);
    let (lambda, mu2) = (c.lambda.clone(), mu.clone());
    let dir_vu = move |i: usize, j: usize| (-mu2[i], lambda[j]);
    let mu2 = mu.clone();
    let dir_vv = move |i: usize, j: usize| (-mu2[i], -mu2[j]);
    let fam_uu = Family { dir: &dir_uu, backward: true };
    let fam_uv = Family { dir: &dir_uv, backward: true };
    let fam_vu = Family { dir: &dir_vu, backward: false };
    let fam_vv = Family { dir: &dir_vv, backward: false };

    let lerp_entry = |v: &[DMatrix<f64>], i: usize, j: usize, x: f64| -> f64 {
        let p = (x / dx).clamp(0.0, (nx - 1) as f64);
        let k = (p.floor() as usize).min(nx - 2);
        let w = p - k as f64;
        v[k][(i, j)] * (1.0 - w) + v[k + 1][(i, j)] * w
    };

    let mut ks = empty_set(nx, n, m, nn);
    let mut sweeps = 0;
    loop {
        sweeps += 1;
        let [s_uu, s_uv, s_vu, s_vv] = sources(&ks, &c);

        let kvu = sweep_block(
            nx,
            m,
            n,
            &fam_vu,
            &s_vu,
            |i, j, xi| lerp_entry(&c.smp, i, j, xi) / (c.mu[i] + c.lambda[j]),
            |_, _, _| 0.0,
        );
        let kvu_bottom: Vec<DMatrix<f64>> = (0..nx).map(|a| kvu.at(a, 0)).collect();
        let omega_prev = ks.omega.clone();
        let gamma_beta = march(DMatrix::zeros(m, nn), nx, |a, g| {
            &lam_m_inv * (g * &sys.a + &kvu_bottom[a] * &lam_p * &sys.mb - &omega_prev[a] * g)
        });
        let kvv_bottom: Vec<DMatrix<f64>> = (0..nx)
            .map(|a| (&kvu_bottom[a] * &lam_p * &sys.qb + &gamma_beta[a] * &sys.b) * &lam_m_inv)
            .collect();
        let kvv = sweep_block(
            nx,
            m,
            m,
            &fam_vv,
            &s_vv,
            |i, j, xi| lerp_entry(&c.smm, i, j, xi) / (c.mu[i] - c.mu[j]),
            |i, j, xi| lerp_entry(&kvv_bottom, i, j, xi),
        );
        let omega: Vec<DMatrix<f64>> = (0..nx)
            .map(|a| {
                DMatrix::from_fn(m, m, |i, j| {
                    if i < j {
                        (c.mu[j] - c.mu[i]) * kvv.entry(i, j).get(a, a) + c.smm[a][(i, j)]
                    } else {
                        0.0
                    }
                })
            })
            .collect();

        let kuv = sweep_block(
            nx,
            n,
            m,
            &fam_uv,
            &s_uv,
            |i, j, xi| -lerp_entry(&c.spm, i, j, xi) / (c.lambda[i] + c.mu[j]),
            |_, _, _| 0.0,
        );
        let kuu = sweep_block(
            nx,
            n,
            n,
            &fam_uu,
            &s_uu,
            |i, j, xi| lerp_entry(&c.spp, i, j, xi) / (c.lambda[j] - c.lambda[i]),
            |_, _, _| 0.0,
        );
        let psi: Vec<DMatrix<f64>> = (0..nx)
            .map(|a| {
                DMatrix::from_fn(n, n, |i, j| {
                    if i < j {
                        (c.lambda[i] - c.lambda[j]) * kuu.entry(i, j).get(a, a) + c.spp[a][(i, j)]
                    } else {
                        0.0
                    }
                })
            })
            .collect();
        let kuu_bottom: Vec<DMatrix<f64>> = (0..nx).map(|a| kuu.at(a, 0)).collect();
        let gamma_alpha = march(-sys.mb.clone(), nx, |a, g| {
            &lam_p_inv * (&psi[a] * g - g * &sys.a - &kuu_bottom[a] * &lam_p * &sys.mb)
        });
        let psi_boundary: Vec<DMatrix<f64>> = (0..nx)
            .map(|a| &kuu_bottom[a] * &lam_p * &sys.qb - kuv.at(a, 0) * &lam_m + &gamma_alpha[a] * &sys.b)
            .collect();

        let mut change = kuu.max_diff(&ks.kuu).max(kuv.max_diff(&ks.kuv));
        change = change.max(kvu.max_diff(&ks.kvu)).max(kvv.max_diff(&ks.kvv));
        for (new, old) in [(&gamma_alpha, &ks.gamma_alpha), (&gamma_beta, &ks.gamma_beta), (&omega, &ks.omega), (&psi, &ks.psi)] {
            for (p, q) in new.iter().zip(old.iter()) {
                change = change.max(linalg::max_abs(&(p - q)));
            }
        }
        ks.kuu = kuu;
        ks.kuv = kuv;
        ks.kvu = kvu;
        ks.kvv = kvv;
        ks.gamma_alpha = gamma_alpha;
        ks.gamma_beta = gamma_beta;
        ks.omega = omega;
        ks.psi = psi;
        ks.psi_boundary = psi_boundary;
        ks.sweeps = sweeps;
        if !change.is_finite() {
            return Err(Error::NoConvergence { iterations: sweeps, residual: change });
        }
        if change <= tol {
            break;
        }
        if sweeps >= max_iter {
            return Err(Error::NoConvergence { iterations: sweeps, residual: change });
        }
    }
    ks.residual_norm = residual(&ks, &c, sys, &[&fam_uu, &fam_uv, &fam_vu, &fam_vv]);
    Ok(ks)
}

/// Defect of the converged mesh solution against a one-cell trapezoid discretization of each
/// characteristic equation and of the two gain ODEs. Consistent with the exact solution, so it
/// shrinks under refinement.
fn residual(ks: &KernelSet, c: &Coeffs, sys: &CoupledSystem, fams: &[&Family; 4]) -> f64 {
    let nx = ks.nx;
    let dx = ks.dx();
    let srcs = sources(ks, c);
    let blocks = [&ks.kuu, &ks.kuv, &ks.kvu, &ks.kvv];
    let mut worst = 0.0f64;
    for f in 0..4 {
        let blk = blocks[f];
        for i in 0..blk.rows {
            for j in 0..blk.cols {
                let (ca, cb) = (fams[f].dir)(i, j);
                let sgn = if fams[f].backward { -1.0 } else { 1.0 };
                let dt = dx / ca.abs().max(cb.abs());
                let field = blk.entry(i, j);
                let s = srcs[f].entry(i, j);
                for a in 1..nx - 1 {
                    let x = a as f64 * dx;
                    for b in 1..a {
                        let y = b as f64 * dx;
                        let (tau0, _) = inflow(x, y, ca, cb, fams[f].backward);
                        if tau0.abs() < dt {
                            continue;
                        }
                        let (xf, yf) = (x + sgn * dt * ca, y + sgn * dt * cb);
                        // Integral over [sgn dt, 0] of S is -sgn dt * mean(S).
                        let rhs = -sgn * dt * 0.5 * (s.get(a, b) + s.interp(xf, yf));
                        let r = (field.get(a, b) - field.interp(xf, yf) - rhs).abs() / dt;
                        worst = worst.max(r);
                    }
                }
            }
        }
    }
    let lam_p = DMatrix::from_diagonal(&DVector::from_vec(c.lambda.clone()));
    let lam_m = DMatrix::from_diagonal(&DVector::from_vec(c.mu.clone()));
    for a in 0..nx - 1 {
        let f_alpha = |k: usize| {
            &ks.psi[k] * &ks.gamma_alpha[k] - &ks.gamma_alpha[k] * &sys.a - ks.kuu.at(k, 0) * &lam_p * &sys.mb
        };
        let f_beta = |k: usize| {
            &ks.gamma_beta[k] * &sys.a + ks.kvu.at(k, 0) * &lam_p * &sys.mb - &ks.omega[k] * &ks.gamma_beta[k]
        };
        let ra = &lam_p * (&ks.gamma_alpha[a + 1] - &ks.gamma_alpha[a]) / dx - (f_alpha(a) + f_alpha(a + 1)) * 0.5;
        let rb = &lam_m * (&ks.gamma_beta[a + 1] - &ks.gamma_beta[a]) / dx - (f_beta(a) + f_beta(a + 1)) * 0.5;
        worst = worst.max(linalg::max_abs(&ra)).max(linalg::max_abs(&rb));
    }
    worst
}

/// Grids of the distributed states: columns are mesh nodes.
#[derive(Clone, Debug)]
pub struct PdeState {
    pub x: DVector<f64>,
    pub u: DMatrix<f64>,
    pub v: DMatrix<f64>,
}

fn check_grid(ks: &KernelSet, x: &DVector<f64>, u: &DMatrix<f64>, v: &DMatrix<f64>) -> Result<()> {
    if u.shape() != (ks.n, ks.nx) || v.shape() != (ks.m, ks.nx) || x.len() != ks.big_n {
        return Err(Error::Dimension(format!(
            "state grids {:?}/{:?}/{} do not match kernel mesh ({}, {}, {}) x {}",
            u.shape(),
            v.shape(),
            x.len(),
            ks.n,
            ks.m,
            ks.big_n,
            ks.nx
        )));
    }
    Ok(())
}

/// Boundary feedback cancelling the reflection and the in-domain couplings at `x = 1`.
pub fn v_pde(ks: &KernelSet, rb: &DMatrix<f64>, x: &DVector<f64>, u: &DMatrix<f64>, v: &DMatrix<f64>) -> Result<DVector<f64>> {
    check_grid(ks, x, u, v)?;
    let last = ks.nx - 1;
    let w = linalg::trapz_weights(ks.nx, ks.dx());
    let mut out = -(rb * u.column(last)) - &ks.gamma_beta[last] * x;
    for i in 0..ks.m {
        let mut acc = 0.0;
        for b in 0..ks.nx {
            let mut s = 0.0;
            for j in 0..ks.n {
                s += ks.kvu.entry(i, j).get(last, b) * u[(j, b)];
            }
            for j in 0..ks.m {
                s += ks.kvv.entry(i, j).get(last, b) * v[(j, b)];
            }
            acc += w[b] * s;
        }
        out[i] -= acc;
    }
    Ok(out)
}

/// Forward change of variables `(X, u, v) -> (alpha, beta)`.
pub fn backstep(ks: &KernelSet, x: &DVector<f64>, u: &DMatrix<f64>, v: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    check_grid(ks, x, u, v)?;
    let (n, m, nx) = (ks.n, ks.m, ks.nx);
    let dx = ks.dx();
    let mut alpha = DMatrix::zeros(n, nx);
    let mut beta = DMatrix::zeros(m, nx);
    for a in 0..nx {
        let ga = &ks.gamma_alpha[a] * x;
        let gb = &ks.gamma_beta[a] * x;
        for i in 0..n {
            alpha[(i, a)] = u[(i, a)] + ga[i] + volterra_row(a, dx, |b| {
                let mut s = 0.0;
                for j in 0..n {
                    s += ks.kuu.entry(i, j).get(a, b) * u[(j, b)];
                }
                for j in 0..m {
                    s += ks.kuv.entry(i, j).get(a, b) * v[(j, b)];
                }
                s
            });
        }
        for i in 0..m {
            beta[(i, a)] = v[(i, a)] + gb[i] + volterra_row(a, dx, |b| {
                let mut s = 0.0;
                for j in 0..n {
                    s += ks.kvu.entry(i, j).get(a, b) * u[(j, b)];
                }
                for j in 0..m {
                    s += ks.kvv.entry(i, j).get(a, b) * v[(j, b)];
                }
                s
            });
        }
    }
    Ok((alpha, beta))
}

#[inline]
fn volterra_row<F: Fn(usize) -> f64>(a: usize, dx: f64, f: F) -> f64 {
    if a == 0 {
        return 0.0;
    }
    let mut acc = 0.5 * (f(0) + f(a));
    for b in 1..a {
        acc += f(b);
    }
    acc * dx
}

/// Inverse change of variables by forward substitution in `x`; exact inverse of the discrete
/// forward map.
pub fn inverse_backstep(ks: &KernelSet, x: &DVector<f64>, alpha: &DMatrix<f64>, beta: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    check_grid(ks, x, alpha, beta)?;
    let (n, m, nx) = (ks.n, ks.m, ks.nx);
    let dx = ks.dx();
    let mut u = DMatrix::zeros(n, nx);
    let mut v = DMatrix::zeros(m, nx);
    for a in 0..nx {
        let mut rhs = DVector::zeros(n + m);
        let ga = &ks.gamma_alpha[a] * x;
        let gb = &ks.gamma_beta[a] * x;
        let mut lhs = DMatrix::<f64>::identity(n + m, n + m);
        let wd = if a == 0 { 0.0 } else { 0.5 * dx };
        for i in 0..n + m {
            let target = if i < n { alpha[(i, a)] - ga[i] } else { beta[(i - n, a)] - gb[i - n] };
            let mut known = 0.0;
            for b in 0..a {
                let w = if b == 0 { 0.5 * dx } else { dx };
                for j in 0..n {
                    let k = if i < n { ks.kuu.entry(i, j).get(a, b) } else { ks.kvu.entry(i - n, j).get(a, b) };
                    known += w * k * u[(j, b)];
                }
                for j in 0..m {
                    let k = if i < n { ks.kuv.entry(i, j).get(a, b) } else { ks.kvv.entry(i - n, j).get(a, b) };
                    known += w * k * v[(j, b)];
                }
            }
            rhs[i] = target - known;
            for j in 0..n {
                let k = if i < n { ks.kuu.entry(i, j).get(a, a) } else { ks.kvu.entry(i - n, j).get(a, a) };
                lhs[(i, j)] += wd * k;
            }
            for j in 0..m {
                let k = if i < n { ks.kuv.entry(i, j).get(a, a) } else { ks.kvv.entry(i - n, j).get(a, a) };
                lhs[(i, n + j)] += wd * k;
            }
        }
        let sol = lhs
            .lu()
            .solve(&rhs)
            .ok_or_else(|| Error::Unsupported("singular diagonal step in inverse transform".into()))?;
        for j in 0..n {
            u[(j, a)] = sol[j];
        }
        for j in 0..m {
            v[(j, a)] = sol[n + j];
        }
    }
    Ok((u, v))
}

/// Samples the plant's initial profiles on the mesh and maps them to target coordinates.
pub fn backstep_initial(sys: &CoupledSystem, ks: &KernelSet) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let (u, v) = initial_grids(sys, ks.nx);
    backstep(ks, &sys.x0, &u, &v)
}

pub fn initial_grids(sys: &CoupledSystem, nx: usize) -> (DMatrix<f64>, DMatrix<f64>) {
    let dx = 1.0 / (nx - 1) as f64;
    let u = DMatrix::from_fn(sys.n(), nx, |i, a| sys.u0.eval_entry(a as f64 * dx, i, 0));
    let v = DMatrix::from_fn(sys.m(), nx, |i, a| sys.v0.eval_entry(a as f64 * dx, i, 0));
    (u, v)
}


#[cfg(test)]
pub(crate) mod tests_support {
    use super::*;

    /// One rightward and one SDE state, given leftward speeds, no couplings.
    pub fn scalar_with_mu(mu: &[f64]) -> CoupledSystem {
        let m = mu.len();
        CoupledSystem {
            lambda: vec![1.0],
            mu: mu.to_vec(),
            sigma_pp: MatrixFn::zeros(1, 1),
            sigma_pm: MatrixFn::zeros(1, m),
            sigma_mp: MatrixFn::zeros(m, 1),
            sigma_mm: MatrixFn::zeros(m, m),
            qb: DMatrix::zeros(1, m),
            rb: DMatrix::zeros(m, 1),
            mb: DMatrix::zeros(1, 1),
            a: DMatrix::from_element(1, 1, 0.4),
            b: DMatrix::from_element(1, m, 1.0),
            sigma_t: MatrixFn::constant_vec(&[0.1]),
            horizon: 1.0,
            x0: DVector::from_element(1, 1.0),
            u0: MatrixFn::zeros(1, 1),
            v0: MatrixFn::zeros(m, 1),
        }
    }

    pub fn empty(nx: usize, n: usize, m: usize, big_n: usize) -> KernelSet {
        empty_set(nx, n, m, big_n)
    }
}
