use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct McConfig {
    pub paths: usize,
    pub seed: u64,
    /// Spread chunks over the thread pool (ignored without the `parallel` feature).
    pub parallel: bool,
    pub chunk: usize,
    /// A path whose state leaves this bound is discarded.
    pub divergence_limit: f64,
    /// Largest tolerated fraction of discarded paths.
    pub max_divergent_fraction: f64,
}

impl Default for McConfig {
    fn default() -> Self {
        McConfig {
            paths: 1000,
            seed: 0,
            parallel: true,
            chunk: 64,
            divergence_limit: 1e8,
            max_divergent_fraction: 0.01,
        }
    }
}

/// Independent stream for each path, so results do not depend on scheduling.
pub fn path_rng(seed: u64, path: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(path as u64);
    rng
}

pub fn diverged(x: &DVector<f64>, limit: f64) -> bool {
    x.iter().any(|v| !v.is_finite() || v.abs() > limit)
}

/// One path's contribution: a vector per recorded time and a few scalars.
#[derive(Clone, Debug, Default)]
pub struct PathOutput {
    pub series: Vec<DVector<f64>>,
    pub scalars: Vec<f64>,
    pub diverged: bool,
}

/// Running mean, co-moment and per-component third and fourth central moments.
#[derive(Clone, Debug)]
pub struct Moments {
    pub n: f64,
    pub mean: DVector<f64>,
    pub c2: DMatrix<f64>,
    pub m3: DVector<f64>,
    pub m4: DVector<f64>,
}

impl Moments {
    pub fn new(dim: usize) -> Self {
        Moments {
            n: 0.0,
            mean: DVector::zeros(dim),
            c2: DMatrix::zeros(dim, dim),
            m3: DVector::zeros(dim),
            m4: DVector::zeros(dim),
        }
    }

    pub fn push(&mut self, x: &DVector<f64>) {
        let n1 = self.n;
        self.n += 1.0;
        let n = self.n;
        let delta = x - &self.mean;
        for c in 0..delta.len() {
            let d = delta[c];
            let dn = d / n;
            let t1 = d * dn * n1;
            let m2 = self.c2[(c, c)];
            self.m4[c] += t1 * dn * dn * (n * n - 3.0 * n + 3.0) + 6.0 * dn * dn * m2 - 4.0 * dn * self.m3[c];
            self.m3[c] += t1 * dn * (n - 2.0) - 3.0 * dn * m2;
        }
        self.c2.ger(n1 / n, &delta, &delta, 1.0);
        self.mean.axpy(1.0 / n, &delta, 1.0);
    }

    pub fn merge(&mut self, o: &Moments) {
        if o.n == 0.0 {
            return;
        }
        if self.n == 0.0 {
            *self = o.clone();
            return;
        }
        let (na, nb) = (self.n, o.n);
        let n = na + nb;
        let delta = &o.mean - &self.mean;
        for c in 0..delta.len() {
            let d = delta[c];
            let (m2a, m2b) = (self.c2[(c, c)], o.c2[(c, c)]);
            let (m3a, m3b) = (self.m3[c], o.m3[c]);
            self.m4[c] += o.m4[c]
                + d.powi(4) * na * nb * (na * na - na * nb + nb * nb) / (n * n * n)
                + 6.0 * d * d * (na * na * m2b + nb * nb * m2a) / (n * n)
                + 4.0 * d * (na * m3b - nb * m3a) / n;
            self.m3[c] += m3b + d.powi(3) * na * nb * (na - nb) / (n * n) + 3.0 * d * (na * m2b - nb * m2a) / n;
        }
        self.c2 += &o.c2;
        self.c2.ger(na * nb / n, &delta, &delta, 1.0);
        self.mean.axpy(nb / n, &delta, 1.0);
        self.n = n;
    }

    /// Unbiased sample covariance.
    pub fn covariance(&self) -> DMatrix<f64> {
        if self.n < 2.0 {
            return DMatrix::zeros(self.mean.len(), self.mean.len());
        }
        &self.c2 / (self.n - 1.0)
    }

    /// Standard error of each diagonal variance estimate.
    pub fn variance_stderr(&self) -> DVector<f64> {
        let n = self.n;
        DVector::from_iterator(
            self.mean.len(),
            (0..self.mean.len()).map(|c| {
                if n < 4.0 {
                    return f64::INFINITY;
                }
                let s2 = self.c2[(c, c)] / (n - 1.0);
                let mu4 = self.m4[c] / n;
                ((mu4 - s2 * s2 * (n - 3.0) / (n - 1.0)) / n).max(0.0).sqrt()
            }),
        )
    }
}

#[derive(Clone, Debug)]
struct ChunkAcc {
    series: Vec<Moments>,
    scalars: Moments,
    values: Vec<Vec<f64>>,
    divergent: usize,
}

#[derive(Clone, Debug)]
pub struct McSummary {
    pub times: Vec<f64>,
    pub paths: usize,
    pub divergent: usize,
    pub seed: u64,
    pub moments: Vec<Moments>,
    pub scalars: Moments,
    /// Per-path scalars (`NaN` for discarded paths), by path index.
    pub scalar_values: Vec<Vec<f64>>,
}

impl McSummary {
    pub fn mean(&self, k: usize) -> &DVector<f64> {
        &self.moments[k].mean
    }

    pub fn covariance(&self, k: usize) -> DMatrix<f64> {
        self.moments[k].covariance()
    }

    pub fn mean_stderr(&self, k: usize) -> DVector<f64> {
        let m = &self.moments[k];
        m.covariance().diagonal().map(|v| (v / m.n.max(1.0)).sqrt())
    }

    pub fn scalar_mean(&self, s: usize) -> f64 {
        self.scalars.mean[s]
    }

    pub fn scalar_stderr(&self, s: usize) -> f64 {
        (self.scalars.covariance()[(s, s)] / self.scalars.n.max(1.0)).sqrt()
    }

    /// CSV with `t`, then mean, standard deviation and standard error of the mean per
    /// component.
    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let dim = self.moments.first().map_or(0, |m| m.mean.len());
        let mut head = vec!["t".to_string()];
        for c in 0..dim {
            head.push(format!("mean_{c}"));
            head.push(format!("std_{c}"));
            head.push(format!("stderr_{c}"));
        }
        wr.write_record(&head)?;
        for (k, t) in self.times.iter().enumerate() {
            let cov = self.covariance(k);
            let se = self.mean_stderr(k);
            let mut rec = vec![format!("{t:.10e}")];
            for c in 0..dim {
                rec.push(format!("{:.10e}", self.mean(k)[c]));
                rec.push(format!("{:.10e}", cov[(c, c)].sqrt()));
                rec.push(format!("{:.10e}", se[c]));
            }
            wr.write_record(&rec)?;
        }
        wr.flush()?;
        Ok(())
    }
}

fn run_chunk<F>(paths: std::ops::Range<usize>, seed: u64, times: usize, dim: usize, nscalars: usize, f: &F) -> ChunkAcc
where
    F: Fn(usize, &mut ChaCha8Rng) -> PathOutput,
{
    let mut acc = ChunkAcc {
        series: (0..times).map(|_| Moments::new(dim)).collect(),
        scalars: Moments::new(nscalars),
        values: vec![Vec::with_capacity(paths.len()); nscalars],
        divergent: 0,
    };
    for p in paths {
        let mut rng = path_rng(seed, p);
        let out = f(p, &mut rng);
        let bad = out.diverged
            || out.series.len() != times
            || out.series.iter().any(|v| v.iter().any(|x| !x.is_finite()))
            || out.scalars.iter().any(|x| !x.is_finite());
        if bad {
            acc.divergent += 1;
            for v in acc.values.iter_mut() {
                v.push(f64::NAN);
            }
            continue;
        }
        for (m, v) in acc.series.iter_mut().zip(&out.series) {
            m.push(v);
        }
        if nscalars > 0 {
            acc.scalars.push(&DVector::from_column_slice(&out.scalars));
        }
        for (v, s) in acc.values.iter_mut().zip(&out.scalars) {
            v.push(*s);
        }
    }
    acc
}

/// Runs `cfg.paths` paths in chunks and merges the chunk statistics in index order, so the
/// parallel and serial schedules give bitwise equal results. `f(path, rng)` must produce one
/// vector of length `dim` per entry of `times` and `nscalars` scalars.
pub fn run_monte_carlo<F>(cfg: &McConfig, times: &[f64], dim: usize, nscalars: usize, f: F) -> Result<McSummary>
where
    F: Fn(usize, &mut ChaCha8Rng) -> PathOutput + Sync,
{
    if cfg.paths == 0 || cfg.chunk == 0 {
        return Err(Error::Config("Monte Carlo needs at least one path and a positive chunk size".into()));
    }
    let ranges: Vec<std::ops::Range<usize>> = (0..cfg.paths)
        .step_by(cfg.chunk)
        .map(|s| s..(s + cfg.chunk).min(cfg.paths))
        .collect();
    let nt = times.len();
    let chunks: Vec<ChunkAcc> = if cfg.parallel {
        parallel_chunks(ranges, cfg.seed, nt, dim, nscalars, &f)
    } else {
        ranges.into_iter().map(|r| run_chunk(r, cfg.seed, nt, dim, nscalars, &f)).collect()
    };
    let mut moments: Vec<Moments> = (0..nt).map(|_| Moments::new(dim)).collect();
    let mut scalars = Moments::new(nscalars);
    let mut values = vec![Vec::with_capacity(cfg.paths); nscalars];
    let mut divergent = 0;
    for c in &chunks {
        for (m, cm) in moments.iter_mut().zip(&c.series) {
            m.merge(cm);
        }
        scalars.merge(&c.scalars);
        for (v, cv) in values.iter_mut().zip(&c.values) {
            v.extend_from_slice(cv);
        }
        divergent += c.divergent;
    }
    if divergent as f64 > cfg.max_divergent_fraction * cfg.paths as f64 {
        return Err(Error::Divergence { divergent, paths: cfg.paths });
    }
    Ok(McSummary {
        times: times.to_vec(),
        paths: cfg.paths,
        divergent,
        seed: cfg.seed,
        moments,
        scalars,
        scalar_values: values,
    })
}

/// Sets the worker count of the global pool. Must run before the first parallel Monte Carlo
/// call; without the `parallel` feature it does nothing.
#[cfg(feature = "parallel")]
pub fn configure_threads(n: usize) -> Result<()> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

#[cfg(not(feature = "parallel"))]
pub fn configure_threads(_n: usize) -> Result<()> {
    Ok(())
}

#[cfg(feature = "parallel")]
fn parallel_chunks<F>(ranges: Vec<std::ops::Range<usize>>, seed: u64, nt: usize, dim: usize, ns: usize, f: &F) -> Vec<ChunkAcc>
where
    F: Fn(usize, &mut ChaCha8Rng) -> PathOutput + Sync,
{
    use rayon::prelude::*;
    ranges.into_par_iter().map(|r| run_chunk(r, seed, nt, dim, ns, f)).collect()
}

#[cfg(not(feature = "parallel"))]
fn parallel_chunks<F>(ranges: Vec<std::ops::Range<usize>>, seed: u64, nt: usize, dim: usize, ns: usize, f: &F) -> Vec<ChunkAcc>
where
    F: Fn(usize, &mut ChaCha8Rng) -> PathOutput + Sync,
{
    ranges.into_iter().map(|r| run_chunk(r, seed, nt, dim, ns, f)).collect()
}
