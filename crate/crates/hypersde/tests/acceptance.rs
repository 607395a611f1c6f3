//! End-to-end acceptance checks. Runs as a plain binary so that every criterion prints one
//! PASS/FAIL line; the process exits nonzero if any criterion fails.

mod common;

use std::time::Instant;

use hypersde::control::{design_feedback, FeedbackController, HighGain, SteeringLaw};
use hypersde::checks;
use hypersde::covariance::{discrete_sigma_min, gamma_recursion, min_weighted_variance, Innovation, Limits};
use hypersde::kernels::solve_kernels;
use hypersde::model::ito_isometry_check;
use hypersde::reduction::kalman_decompose;
use hypersde::sim::{path_rng, run_monte_carlo, DelayedSim, McConfig, McSummary, OpenLoop, PathOutput};
use hypersde::Result;
use nalgebra::{DMatrix, DVector};

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: String) -> Self {
        Outcome { pass, detail }
    }
}

fn report(id: usize, name: &str, res: Result<Outcome>, started: Instant) -> bool {
    let secs = started.elapsed().as_secs_f64();
    match res {
        Ok(o) => {
            let tag = if o.pass { "PASS" } else { "FAIL" };
            println!("[{tag}] {id}. {name}: {} ({secs:.1} s)", o.detail);
            o.pass
        }
        Err(e) => {
            println!("[FAIL] {id}. {name}: error {e} ({secs:.1} s)");
            false
        }
    }
}

/// Feedback run shared by the stabilization and variance floor criteria. Series hold `X`
/// then `Z = T X` on a grid of `every` steps.
struct FeedbackRun {
    summary: McSummary,
    elapsed: f64,
}

fn feedback_run() -> Result<FeedbackRun> {
    let (dt, t_end, every) = (1e-3, 10.0, 10);
    let sde = common::cascade_sde(t_end);
    let kf = kalman_decompose(&sde.a, &sde.b)?;
    let law = design_feedback(&kf, &sde.h, 1.0)?;
    let sim = DelayedSim::new(&sde, dt, t_end)?;
    let times: Vec<f64> = (0..=sim.steps / every).map(|k| (k * every) as f64 * dt).collect();
    let cfg = McConfig { paths: 2000, seed: 20_241, ..Default::default() };
    let start = Instant::now();
    let summary = run_monte_carlo(&cfg, &times, 4, 0, |_, rng| {
        let mut ctrl = FeedbackController::new(&law, &kf, &sde, dt);
        let mut out = PathOutput::default();
        let ok = sim.run_path(&mut ctrl, rng, cfg.divergence_limit, None, |k, x, _| {
            if k % every == 0 {
                let z = &kf.t * x;
                out.series.push(DVector::from_iterator(4, x.iter().chain(z.iter()).copied()));
            }
        });
        out.diverged = !ok;
        out
    })?;
    Ok(FeedbackRun { summary, elapsed: start.elapsed().as_secs_f64() })
}

fn stabilization(run: &FeedbackRun) -> Result<Outcome> {
    let s = &run.summary;
    let mean_norm = |k: usize| s.mean(k).rows(0, 2).norm();
    let last = s.times.len() - 1;
    let peak = (0..s.times.len()).map(mean_norm).fold(0.0, f64::max);
    let decay_ok = mean_norm(last) <= 0.05 * peak;
    let k3 = s.times.iter().position(|&t| t >= 3.0 - 1e-9).unwrap_or(0);
    let dev = |k: usize| {
        let c = s.covariance(k);
        [c[(0, 0)].sqrt(), c[(1, 1)].sqrt()]
    };
    let base = dev(k3);
    let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
    for k in k3..=last {
        let d = dev(k);
        for c in 0..2 {
            let r = d[c] / base[c];
            lo = lo.min(r);
            hi = hi.max(r);
        }
    }
    let bounded = lo >= 0.5 && hi <= 2.0;
    let fast = run.elapsed <= 300.0;
    Ok(Outcome::new(
        decay_ok && bounded && fast && s.divergent == 0,
        format!(
            "|mean X(10)| = {:.4} vs 0.05 x peak {:.3} = {:.4}; deviation ratio on [3,10] in [{lo:.3}, {hi:.3}]; \
             {} paths in {:.1} s",
            mean_norm(last),
            peak,
            0.05 * peak,
            s.paths,
            run.elapsed
        ),
    ))
}

fn ito_isometry() -> Result<Outcome> {
    let f1 = |s: f64| (2.0 * s).cos() + 0.5;
    let f2 = |s: f64| (-s).exp();
    let mut good = 0;
    let mut worst = 0.0f64;
    for seed in 0..100u64 {
        let r = ito_isometry_check(f1, f2, 2.0, 10_000, 200, 7_000 + seed)?;
        let z = (r.mc_estimate - r.quadrature).abs() / r.stderr;
        worst = worst.max(z);
        if z <= 5.0 {
            good += 1;
        }
    }
    Ok(Outcome::new(good >= 99, format!("{good}/100 seeds within 5 stderr, worst {worst:.2} stderr")))
}

fn decomposition_corpus() -> Result<Outcome> {
    let start = Instant::now();
    let st = checks::decomposition_corpus(1000, 99)?;
    let secs = start.elapsed().as_secs_f64();
    Ok(Outcome::new(
        st.failures == 0 && secs <= 30.0,
        format!(
            "{} pairs, {} failures, worst lower block {:.2e}, worst T Tinv - I {:.2e}",
            st.count, st.failures, st.worst_lower_block, st.worst_inverse
        ),
    ))
}

fn predictor_identity() -> Result<Outcome> {
    let dt = 1e-3;
    let worst = checks::predictor_identity_worst(&common::cascade_sde(5.0), dt, 10, 5)?;
    Ok(Outcome::new(worst <= 10.0 * dt, format!("max |lhs - rhs| = {worst:.2e} over 10 paths, limit {:.0e}", 10.0 * dt)))
}

/// Smallest `(Var_MC(Z_i) - Sigma_min_i) / stderr` over sampled times past each block's window.
/// `offset` is the index of `Z` inside the recorded series.
fn floor_margin(s: &McSummary, offset: usize, t_end: f64) -> Result<(f64, f64)> {
    let sde = common::cascade_sde(t_end);
    let kf = kalman_decompose(&sde.a, &sde.b)?;
    let gf = gamma_recursion(&kf, &sde, 1e-3, &s.times, Limits::NextDelay)?;
    let mut worst_z = f64::INFINITY;
    let mut worst_rel = f64::INFINITY;
    for (k, &t) in s.times.iter().enumerate() {
        let se = s.moments[k].variance_stderr();
        let cov = s.covariance(k);
        for i in 0..kf.blocks() {
            if t < gf.h_next[i] - 1e-9 {
                continue;
            }
            let c = offset + kf.offset(i);
            let floor = gf.sigma_min[i][k][(0, 0)];
            let diff = cov[(c, c)] - floor;
            worst_z = worst_z.min(diff / se[c]);
            worst_rel = worst_rel.min(diff / floor);
        }
    }
    Ok((worst_z, worst_rel))
}

/// High-gain sweep with common random numbers. Per path and gain it integrates `|Z|^2` and
/// `|Z - I|^2` over `[h_max, T]`, where `I` is the innovation of each block; the series hold
/// `Z` of the largest gain.
struct SweepRun {
    gains: Vec<f64>,
    summary: McSummary,
    /// `int |E Z|^2` per gain, from the noise-free path.
    mean_sq: Vec<f64>,
    /// Discrete and continuous floors integrated over `[h_max, T]`.
    j_disc: f64,
    j_min: f64,
    t_end: f64,
}

fn sweep_run() -> Result<SweepRun> {
    let (dt, t_end, every) = (2e-3, 6.0, 25);
    let gains = vec![2.0, 5.0, 10.0, 20.0];
    let ng = gains.len();
    let sde = common::cascade_sde(t_end);
    let kf = kalman_decompose(&sde.a, &sde.b)?;
    let sim = DelayedSim::new(&sde, dt, t_end)?;
    let quiet = DelayedSim::new(&common::cascade_deterministic(t_end), dt, t_end)?;
    let laws = gains.iter().map(|&k| HighGain::new(&kf, &sim, k)).collect::<Result<Vec<_>>>()?;
    let inn = Innovation::new(&kf, &sim);
    let h_max = sde.max_delay();
    let k0 = (h_max / dt).round() as usize;
    let weight = |k: usize, steps: usize| if k == k0 || k == steps { 0.5 * dt } else { dt };

    // Laws fold sigma into their noise convolutions, so the noise-free path needs its own.
    let mean_sq = gains
        .iter()
        .map(|&g| {
            let law = HighGain::new(&kf, &quiet, g)?;
            let mut acc = 0.0;
            let mut rng = path_rng(0, 0);
            quiet.run_path(&mut law.controller(), &mut rng, 1e8, None, |k, x, _| {
                if k >= k0 {
                    acc += (&kf.t * x).norm_squared() * weight(k, quiet.steps);
                }
            });
            Ok(acc)
        })
        .collect::<Result<Vec<f64>>>()?;

    let times: Vec<f64> = (0..=sim.steps / every).map(|k| (k * every) as f64 * dt).collect();
    let seed = 4_242;
    let cfg = McConfig { paths: 1000, seed, ..Default::default() };
    // Scalars: |Z - I|^2 per gain, |Z|^2 per gain, then paired differences of the former.
    let summary = run_monte_carlo(&cfg, &times, 2, 3 * ng - 1, |p, _| {
        let mut out = PathOutput { scalars: vec![0.0; 3 * ng - 1], ..Default::default() };
        for (g, law) in laws.iter().enumerate() {
            let mut rng = path_rng(seed, p);
            let (mut fz, mut zz) = (0.0, 0.0);
            let last = g + 1 == ng;
            let ok = sim.run_path(&mut law.controller(), &mut rng, cfg.divergence_limit, None, |k, x, hist| {
                let z = &kf.t * x;
                if last && k % every == 0 {
                    out.series.push(z.clone());
                }
                if k >= k0 {
                    let w = weight(k, sim.steps);
                    fz += (&z - inn.at(hist, k)).norm_squared() * w;
                    zz += z.norm_squared() * w;
                }
            });
            out.diverged |= !ok;
            out.scalars[g] = fz;
            out.scalars[ng + g] = zz;
        }
        for g in 0..ng - 1 {
            out.scalars[2 * ng + g] = out.scalars[g + 1] - out.scalars[g];
        }
        out
    })?;

    let j_disc = (0..kf.blocks())
        .map(|i| discrete_sigma_min(&kf, &sde, dt, i, t_end).trace() * (t_end - h_max))
        .sum();
    let fine: Vec<f64> = (0..=(t_end / 0.01).round() as usize).map(|k| k as f64 * 0.01).collect();
    let gf = gamma_recursion(&kf, &sde, 1e-3, &fine, Limits::NextDelay)?;
    let (_, totals) = min_weighted_variance(&gf, &kf, |_| DMatrix::identity(2, 2), t_end)?;
    Ok(SweepRun { gains, summary, mean_sq, j_disc, j_min: totals.iter().sum(), t_end })
}

fn variance_floor(fb: &FeedbackRun, sweep: &SweepRun) -> Result<Outcome> {
    let (z_fb, rel_fb) = floor_margin(&fb.summary, 2, 10.0)?;
    let (z_hg, rel_hg) = floor_margin(&sweep.summary, 0, sweep.t_end)?;
    Ok(Outcome::new(
        z_fb >= -3.0 && z_hg >= -3.0,
        format!(
            "min (Var - floor)/stderr: feedback {z_fb:.2} (rel {rel_fb:+.3}), high gain K=20 {z_hg:.2} (rel {rel_hg:+.3})"
        ),
    ))
}

fn high_gain_convergence(sweep: &SweepRun) -> Result<Outcome> {
    let s = &sweep.summary;
    let ng = sweep.gains.len();
    // Var(Z) = Var(I) + Var(Z - I) since the forecast part is measurable before the innovation.
    let cost: Vec<f64> = (0..ng).map(|g| sweep.j_disc + s.scalar_mean(g) - sweep.mean_sq[g]).collect();
    let raw: Vec<f64> = (0..ng).map(|g| s.scalar_mean(ng + g) - sweep.mean_sq[g]).collect();
    let mut monotone = true;
    for g in 0..ng - 1 {
        let diff = s.scalar_mean(2 * ng + g);
        if diff > 2.0 * s.scalar_stderr(2 * ng + g) {
            monotone = false;
        }
    }
    let excess = cost[ng - 1] / sweep.j_min - 1.0;
    let above = cost.iter().all(|&c| c >= sweep.j_min);
    let lx: Vec<f64> = sweep.gains.iter().map(|k| k.ln()).collect();
    let ly: Vec<f64> = cost.iter().map(|c| (c - sweep.j_min).max(1e-300).ln()).collect();
    let slope = ls_slope(&lx, &ly);
    let pass = monotone && above && excess <= 0.25 && (-1.4..=-0.6).contains(&slope);
    let table: Vec<String> = (0..ng)
        .map(|g| format!("K={}: {:.4}+-{:.4} (raw {:.3}+-{:.3})", sweep.gains[g], cost[g], s.scalar_stderr(g), raw[g], s.scalar_stderr(ng + g)))
        .collect();
    Ok(Outcome::new(
        pass,
        format!(
            "J_min {:.4}; {}; monotone {monotone}; K=20 excess {:.1}%; log-log slope {slope:.3}",
            sweep.j_min,
            table.join(", "),
            100.0 * excess
        ),
    ))
}

fn ls_slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    sxy / sxx
}

fn kernel_convergence() -> Result<Outcome> {
    let sys = common::scalar_plant(0.5, 0.3, 0.1);
    let coarse = solve_kernels(&sys, 128, 1e-12, 400)?;
    let fine = solve_kernels(&sys, 256, 1e-12, 400)?;
    let ratio = coarse.residual_norm / fine.residual_norm;

    let plain = common::scalar_plant(0.0, 0.0, 0.1);
    let ks = solve_kernels(&plain, 256, 1e-12, 400)?;
    let (m, a, lambda) = (plain.mb[(0, 0)], plain.a[(0, 0)], plain.lambda[0]);
    let gap = ks
        .gamma_alpha
        .iter()
        .enumerate()
        .map(|(j, g)| (g[(0, 0)] + m * (-a * j as f64 * ks.dx() / lambda).exp()).abs())
        .fold(0.0, f64::max);
    Ok(Outcome::new(
        ratio >= 1.7 && gap <= 1e-3,
        format!(
            "residual {:.3e} (nx=128) / {:.3e} (nx=256) = {ratio:.2}; uncoupled gain error {gap:.2e}",
            coarse.residual_norm, fine.residual_norm
        ),
    ))
}

fn transform_equivalence() -> Result<Outcome> {
    let sys = common::scalar_plant(0.5, 0.3, 0.3);
    let ks = solve_kernels(&sys, 200, 1e-12, 400)?;
    let st = checks::transform_equivalence(&sys, &ks, 500, 808, |t| DVector::from_element(1, 0.5 * (2.0 * t).sin()))?;
    let tol = 3.0 * (ks.dx() + st.dt);
    Ok(Outcome::new(
        st.worst_mean <= tol && st.worst_var <= 5.0,
        format!(
            "nx={}, dt={:.3e}, {} paths; worst relative mean gap {:.2e} (limit {tol:.2e}), worst variance gap {:.2} stderr",
            st.nx, st.dt, st.paths, st.worst_mean, st.worst_var
        ),
    ))
}

fn deterministic_steering() -> Result<Outcome> {
    let (dt, t_end) = (1e-4, 3.0);
    let sde = common::cascade_deterministic(t_end);
    let kf = kalman_decompose(&sde.a, &sde.b)?;
    let sim = DelayedSim::new(&sde, dt, t_end)?;
    let target = DVector::from_vec(vec![0.5, -0.25]);
    let cov: Vec<DMatrix<f64>> = kf.sizes.iter().map(|&n| DMatrix::identity(n, n) * 0.01).collect();
    let law = SteeringLaw::new(&kf, &sim, &target, &cov)?;
    let mut rng = path_rng(1, 0);
    let mut z_end = DVector::zeros(2);
    let mut ctrl = law.controller();
    sim.run_path(&mut ctrl, &mut rng, 1e8, None, |k, x, _| {
        if k == sim.steps {
            z_end = &kf.t * x;
        }
    });
    let err = (&z_end - &target).norm() / target.norm();
    // Same run without control, to show the steering did the work.
    let mut free = DVector::zeros(2);
    sim.run_path(&mut OpenLoop, &mut rng, 1e8, None, |k, x, _| {
        if k == sim.steps {
            free = &kf.t * x;
        }
    });
    Ok(Outcome::new(
        err <= 1e-3,
        format!(
            "Z(T) = ({:.5}, {:.5}) vs target ({:.2}, {:.2}), relative error {err:.2e}; uncontrolled |Z(T)| {:.2}",
            z_end[0],
            z_end[1],
            target[0],
            target[1],
            free.norm()
        ),
    ))
}

fn main() {
    let mut all = true;
    let t = Instant::now();
    let fb = feedback_run();
    let fb_time = t.elapsed();
    let (fb, fb_err) = match fb {
        Ok(r) => (Some(r), None),
        Err(e) => (None, Some(e.to_string())),
    };
    let t1 = Instant::now();
    all &= report(
        1,
        "stabilization under predictor feedback",
        fb.as_ref().map(stabilization).unwrap_or_else(|| Err(hypersde::Error::Config(fb_err.clone().unwrap_or_default()))),
        t1 - fb_time,
    );

    let t = Instant::now();
    all &= report(2, "Ito isometry", ito_isometry(), t);
    let t = Instant::now();
    all &= report(3, "Kalman decomposition corpus", decomposition_corpus(), t);
    let t = Instant::now();
    all &= report(4, "predictor identity", predictor_identity(), t);

    let t = Instant::now();
    let sweep = sweep_run();
    let sweep_time = t.elapsed();
    let t = Instant::now();
    let floor = match (&fb, &sweep) {
        (Some(fb), Ok(sw)) => variance_floor(fb, sw),
        (None, _) => Err(hypersde::Error::Config(fb_err.clone().unwrap_or_default())),
        (_, Err(e)) => Err(hypersde::Error::Config(e.to_string())),
    };
    all &= report(5, "variance floor", floor, t);
    let t = Instant::now();
    let conv = match &sweep {
        Ok(sw) => high_gain_convergence(sw),
        Err(e) => Err(hypersde::Error::Config(e.to_string())),
    };
    all &= report(6, "high-gain convergence", conv, t - sweep_time);

    let t = Instant::now();
    all &= report(7, "kernel solver convergence", kernel_convergence(), t);
    let t = Instant::now();
    all &= report(8, "transform equivalence", transform_equivalence(), t);
    let t = Instant::now();
    all &= report(9, "deterministic steering", deterministic_steering(), t);

    if all {
        println!("acceptance: all criteria passed");
    } else {
        println!("acceptance: some criteria FAILED");
        std::process::exit(1);
    }
}
