use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use hypersde::checks;
use hypersde::config::{snap_delays, Config, ControllerKind, ExperimentConfig, SystemConfig};
use hypersde::control::{design_feedback, FeedbackController, HighGain, SteeringLaw};
use hypersde::covariance::{gamma_recursion, integrate_series, min_weighted_variance, GammaFamily, Limits};
use hypersde::kernels::{solve_kernels, KernelSet};
use hypersde::model::{controllability_item, validate, CheckItem, CoupledSystem};
use hypersde::reduction::{kalman_decompose, reduce, DelayedSde, KalmanForm};
use hypersde::sim::{configure_threads, run_monte_carlo, Controller, DelayedSim, McConfig, McSummary, OpenLoop, PathOutput};
use hypersde::tracking::build_tracking_kernels;
use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Parser, Debug)]
#[command(name = "hypersde", version, about = "Kernels, covariance floors and Monte Carlo experiments for PDE-driven SDEs")]
struct Cli {
    /// Output directory; overrides the one in the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Solve the backstepping kernel equations and report the residual.
    SolveKernels {
        config: PathBuf,
        #[arg(long)]
        nx: Option<usize>,
        #[arg(long)]
        tol: Option<f64>,
        /// Kernel CSV to reuse when its tag matches, written otherwise.
        #[arg(long)]
        kernel_cache: Option<PathBuf>,
        /// Also solve on the doubled grid and report the residual ratio.
        #[arg(long)]
        refine: bool,
    },
    /// Monte Carlo run of the closed loop.
    Simulate {
        config: PathBuf,
        #[arg(long)]
        controller: Option<ControllerKind>,
        #[arg(long)]
        paths: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// High-gain values, comma separated.
        #[arg(long, value_delimiter = ',')]
        gains: Option<Vec<f64>>,
        #[arg(long)]
        kernel_cache: Option<PathBuf>,
    },
    /// Covariance floor, weighted floor and its integral.
    Bound {
        config: PathBuf,
        #[arg(long)]
        kernel_cache: Option<PathBuf>,
    },
    /// Property suite: validation, isometry, decomposition, predictor identity, transform.
    Check {
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
}

#[derive(Serialize, Debug)]
struct OutputFile {
    path: String,
    rows: usize,
}

#[derive(Serialize, Debug)]
struct KernelArtifact {
    tag: String,
    nx: usize,
    residual: f64,
    cache: Option<String>,
    reused: bool,
}

#[derive(Serialize, Debug)]
struct RunManifest {
    command: String,
    config_hash: String,
    seed: Option<u64>,
    kernels: Vec<KernelArtifact>,
    wall_time_s: f64,
    outputs: Vec<OutputFile>,
    checks: Vec<CheckItem>,
    details: serde_json::Map<String, serde_json::Value>,
}

impl RunManifest {
    fn new(command: &str, hash: &str) -> Self {
        RunManifest {
            command: command.into(),
            config_hash: hash.into(),
            seed: None,
            kernels: Vec::new(),
            wall_time_s: 0.0,
            outputs: Vec::new(),
            checks: Vec::new(),
            details: serde_json::Map::new(),
        }
    }

    fn output(&mut self, path: &Path) -> anyhow::Result<()> {
        let text = fs::read_to_string(path).with_context(|| format!("reading back {}", path.display()))?;
        let rows = text.lines().count().saturating_sub(1);
        self.outputs.push(OutputFile { path: path.display().to_string(), rows });
        Ok(())
    }

    fn check(&mut self, name: &str, pass: bool, measured: String) {
        self.checks.push(CheckItem { name: name.into(), pass, measured });
    }

    fn detail(&mut self, key: &str, v: impl Serialize) {
        self.details.insert(key.into(), serde_json::to_value(v).unwrap_or(serde_json::Value::Null));
    }

    fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    fn finish(mut self, out: &Path, started: Instant) -> anyhow::Result<bool> {
        self.wall_time_s = started.elapsed().as_secs_f64();
        let path = out.join(format!("manifest_{}.json", self.command));
        fs::write(&path, serde_json::to_string_pretty(&self)?)?;
        for c in &self.checks {
            println!("{:<28} {:<4} {}", c.name, if c.pass { "PASS" } else { "FAIL" }, c.measured);
        }
        println!("manifest: {}", path.display());
        Ok(self.passed())
    }
}

struct Loaded {
    cfg: Config,
    hash: String,
    out: PathBuf,
}

fn load(path: &Path, out: &Option<PathBuf>) -> anyhow::Result<Loaded> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let cfg = Config::from_json(&text).with_context(|| format!("parsing {}", path.display()))?;
    let hash = format!("{:x}", Sha256::digest(text.as_bytes()));
    let out = out.clone().unwrap_or_else(|| PathBuf::from(&cfg.experiment.out));
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    Ok(Loaded { cfg, hash, out })
}

fn system_tag(sys: &SystemConfig, nx: usize, tol: f64) -> anyhow::Result<String> {
    let text = serde_json::to_string(sys)?;
    let h = format!("{:x}", Sha256::digest(text.as_bytes()));
    Ok(format!("{}-nx{nx}-tol{tol:e}", &h[..16]))
}

/// Kernels from the cache when its tag matches, solved (and cached) otherwise.
fn kernels_for(
    sys_cfg: &SystemConfig,
    sys: &CoupledSystem,
    exp: &ExperimentConfig,
    nx: usize,
    tol: f64,
    cache: Option<&Path>,
    man: &mut RunManifest,
) -> anyhow::Result<KernelSet> {
    let tag = system_tag(sys_cfg, nx, tol)?;
    if let Some(p) = cache.filter(|p| p.exists()) {
        let (ks, found) = KernelSet::read_csv(fs::File::open(p)?)?;
        if found == tag {
            man.kernels.push(KernelArtifact { tag, nx, residual: ks.residual_norm, cache: Some(p.display().to_string()), reused: true });
            return Ok(ks);
        }
    }
    let ks = solve_kernels(sys, nx, tol, exp.max_sweeps)?;
    if let Some(p) = cache {
        if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        ks.write_csv(fs::File::create(p)?, &tag)?;
    }
    man.kernels.push(KernelArtifact {
        tag,
        nx,
        residual: ks.residual_norm,
        cache: cache.map(|p| p.display().to_string()),
        reused: false,
    });
    Ok(ks)
}

/// The delayed SDE of the config, reduced from the coupled system when needed, with delays
/// snapped to the time step.
fn delayed_model(l: &Loaded, cache: Option<&Path>, man: &mut RunManifest) -> anyhow::Result<DelayedSde> {
    let exp = &l.cfg.experiment;
    let mut sde = match &l.cfg.system {
        SystemConfig::Delayed(d) => d.build()?,
        SystemConfig::Coupled(c) => {
            let sys = c.build()?;
            let ks = kernels_for(&l.cfg.system, &sys, exp, exp.nx, exp.tol, cache, man)?;
            let tk = build_tracking_kernels(&ks, &sys)?;
            reduce(&sys, &ks, &tk)?
        }
    };
    sde.h = snap_delays(&sde.h, exp.dt)?;
    Ok(sde)
}

fn record_grid(sim: &DelayedSim, every: usize) -> Vec<f64> {
    (0..=sim.steps / every).map(|k| (k * every) as f64 * sim.dt).collect()
}

fn run_controller<C, F>(sim: &DelayedSim, mc: &McConfig, every: usize, make: F) -> anyhow::Result<McSummary>
where
    C: Controller,
    F: Fn() -> C + Sync,
{
    let times = record_grid(sim, every);
    let n = sim.sde.n();
    let s = run_monte_carlo(mc, &times, n, 0, |_, rng| {
        let mut ctrl = make();
        let mut out = PathOutput::default();
        let ok = sim.run_path(&mut ctrl, rng, mc.divergence_limit, None, |k, x, _| {
            if k % every == 0 {
                out.series.push(x.clone());
            }
        });
        out.diverged = !ok;
        out
    })?;
    Ok(s)
}

fn write_summary(s: &McSummary, path: &Path, man: &mut RunManifest) -> anyhow::Result<()> {
    s.write_csv(fs::File::create(path)?)?;
    man.output(path)?;
    man.check(
        "divergence",
        s.divergent == 0,
        format!("{} of {} paths diverged", s.divergent, s.paths + s.divergent),
    );
    Ok(())
}

fn cost_weight(exp: &ExperimentConfig, n: usize) -> anyhow::Result<DMatrix<f64>> {
    let q = match &exp.q_cost {
        Some(m) => m.to_matrix()?,
        None => DMatrix::identity(n, n),
    };
    if q.shape() != (n, n) {
        bail!("cost weight must be {n}x{n}");
    }
    Ok(q)
}

/// `int tr(Q Var Z) dt` over `[from, T]` from the recorded covariance of `X`.
fn weighted_cost(s: &McSummary, kf: &KalmanForm, q: &DMatrix<f64>, from: f64) -> f64 {
    let v: Vec<f64> = (0..s.times.len())
        .map(|k| (q * &kf.t * s.covariance(k) * kf.t.transpose()).trace())
        .collect();
    let end = s.times.last().copied().unwrap_or(0.0);
    integrate_series(&s.times, &v, from, end)
}

fn floor_family(kf: &KalmanForm, sde: &DelayedSde, dt: f64, times: &[f64]) -> anyhow::Result<GammaFamily> {
    Ok(gamma_recursion(kf, sde, dt, times, Limits::NextDelay)?)
}

fn cmd_simulate(
    l: &Loaded,
    controller: Option<ControllerKind>,
    paths: Option<usize>,
    seed: Option<u64>,
    gains: Option<Vec<f64>>,
    cache: Option<&Path>,
    man: &mut RunManifest,
) -> anyhow::Result<()> {
    let exp = &l.cfg.experiment;
    let sde = delayed_model(l, cache, man)?;
    let kf = kalman_decompose(&sde.a, &sde.b)?;
    let sim = DelayedSim::new(&sde, exp.dt, sde.horizon)?;
    let mc = McConfig { paths: paths.unwrap_or(exp.paths), seed: seed.unwrap_or(exp.seed), ..Default::default() };
    man.seed = Some(mc.seed);
    let kind = controller.unwrap_or(exp.controller);
    man.detail("controller", kind);
    man.detail("paths", mc.paths);
    man.detail("dt", exp.dt);
    let every = exp.record_every;
    match kind {
        ControllerKind::None => {
            let s = run_controller(&sim, &mc, every, || OpenLoop)?;
            write_summary(&s, &l.out.join("summary.csv"), man)?;
        }
        ControllerKind::Feedback => {
            let law = design_feedback(&kf, &sde.h, exp.nu)?;
            man.detail("gains", law.gains.iter().map(|g| g.iter().copied().collect::<Vec<_>>()).collect::<Vec<_>>());
            man.detail("spectra", law.spectra(&kf));
            let s = run_controller(&sim, &mc, every, || FeedbackController::new(&law, &kf, &sde, exp.dt))?;
            write_summary(&s, &l.out.join("summary.csv"), man)?;
        }
        ControllerKind::Highgain => {
            let gains = gains.unwrap_or_else(|| exp.gains.clone());
            let q = cost_weight(exp, sde.n())?;
            let h_max = sde.max_delay();
            let gf = floor_family(&kf, &sde, exp.dt, &record_grid(&sim, every))?;
            let qz = q.clone();
            let (_, totals) = min_weighted_variance(&gf, &kf, move |_| qz.clone(), sde.horizon)?;
            let j_min: f64 = totals.iter().sum();
            let table = l.out.join("highgain_costs.csv");
            let mut wr = csv::Writer::from_path(&table)?;
            wr.write_record(["gain", "cost", "j_min", "relative_excess"])?;
            let mut costs = Vec::new();
            for &g in &gains {
                let law = HighGain::new(&kf, &sim, g)?;
                let s = run_controller(&sim, &mc, every, || law.controller())?;
                write_summary(&s, &l.out.join(format!("summary_K{g}.csv")), man)?;
                let c = weighted_cost(&s, &kf, &q, h_max);
                wr.write_record([g.to_string(), format!("{c:.8e}"), format!("{j_min:.8e}"), format!("{:.6}", c / j_min - 1.0)])?;
                println!("K = {g:>6}: cost {c:.5}, floor {j_min:.5}, excess {:.2}%", 100.0 * (c / j_min - 1.0));
                costs.push(c);
            }
            wr.flush()?;
            drop(wr);
            man.output(&table)?;
            man.detail("j_min", j_min);
            man.detail("costs", &costs);
            man.check(
                "cost above floor",
                costs.iter().all(|&c| c >= j_min * 0.98),
                format!("min cost / floor = {:.4}", costs.iter().copied().fold(f64::INFINITY, f64::min) / j_min),
            );
        }
        ControllerKind::Steering => {
            let n = sde.n();
            let target = match &exp.target_mean {
                Some(v) => DVector::from_column_slice(v),
                None => DVector::zeros(n),
            };
            let covs = match &exp.target_cov {
                Some(v) => v.iter().map(|m| m.to_matrix()).collect::<hypersde::Result<Vec<_>>>()?,
                None => kf.sizes.iter().map(|&s| DMatrix::identity(s, s) * 0.01).collect(),
            };
            let law = SteeringLaw::new(&kf, &sim, &target, &covs)?;
            man.detail("strength", &law.strength);
            let s = run_controller(&sim, &mc, every, || law.controller())?;
            write_summary(&s, &l.out.join("summary.csv"), man)?;
            steering_checks(&s, &kf, &sde, exp.dt, &target, &covs, man)?;
        }
    }
    Ok(())
}

/// Terminal mean within 3 standard errors of the target and terminal block variance within
/// 15% of the target plus the floor.
fn steering_checks(
    s: &McSummary,
    kf: &KalmanForm,
    sde: &DelayedSde,
    dt: f64,
    target: &DVector<f64>,
    covs: &[DMatrix<f64>],
    man: &mut RunManifest,
) -> anyhow::Result<()> {
    let last = s.times.len() - 1;
    let t_end = s.times[last];
    let mz = &kf.t * s.mean(last);
    let cz = &kf.t * s.covariance(last) * kf.t.transpose();
    let n = s.paths as f64;
    let mut worst = 0.0f64;
    for c in 0..mz.len() {
        let se = (cz[(c, c)] / n).sqrt();
        worst = worst.max((mz[c] - target[c]).abs() / se.max(f64::MIN_POSITIVE));
    }
    man.check("terminal mean", worst <= 3.0, format!("largest gap {worst:.2} stderr"));
    let gf = floor_family(kf, sde, dt, &[t_end])?;
    let mut rel = 0.0f64;
    for i in 0..kf.blocks() {
        let (o, ni) = (kf.offset(i), kf.sizes[i]);
        let want = &covs[i] + &gf.sigma_min[i][0];
        let got = cz.view((o, o), (ni, ni));
        for r in 0..ni {
            rel = rel.max((got[(r, r)] / want[(r, r)] - 1.0).abs());
        }
    }
    // relative stderr of a Gaussian sample variance is sqrt(2 / n)
    let tol = 0.15f64.max(4.0 * (2.0 / n).sqrt());
    man.check(
        "terminal variance",
        rel <= tol,
        format!("largest relative gap {:.1}%, limit {:.1}%", 100.0 * rel, 100.0 * tol),
    );
    Ok(())
}

fn cmd_bound(l: &Loaded, cache: Option<&Path>, man: &mut RunManifest) -> anyhow::Result<()> {
    let exp = &l.cfg.experiment;
    let sde = delayed_model(l, cache, man)?;
    let kf = kalman_decompose(&sde.a, &sde.b)?;
    let sim = DelayedSim::new(&sde, exp.dt, sde.horizon)?;
    let times = record_grid(&sim, exp.record_every);
    let gf = floor_family(&kf, &sde, exp.dt, &times)?;
    let gpath = l.out.join("gamma.csv");
    gf.write_gamma_csv(fs::File::create(&gpath)?)?;
    man.output(&gpath)?;
    let spath = l.out.join("sigma_min.csv");
    gf.write_sigma_min_csv(fs::File::create(&spath)?)?;
    man.output(&spath)?;
    let q = cost_weight(exp, sde.n())?;
    let (curves, totals) = min_weighted_variance(&gf, &kf, move |_| q.clone(), sde.horizon)?;
    let vpath = l.out.join("v_min.csv");
    let mut wr = csv::Writer::from_path(&vpath)?;
    let mut header = vec!["t".to_string()];
    header.extend((0..curves.len()).map(|i| format!("block_{i}")));
    wr.write_record(&header)?;
    for (k, t) in gf.times.iter().enumerate() {
        let mut row = vec![format!("{t:.6}")];
        row.extend(curves.iter().map(|c| format!("{:.10e}", c[k])));
        wr.write_record(&row)?;
    }
    wr.flush()?;
    drop(wr);
    man.output(&vpath)?;
    for (i, j) in totals.iter().enumerate() {
        println!("block {i}: J_min = {j:.6}");
    }
    man.detail("j_min_blocks", &totals);
    man.detail("j_min", totals.iter().sum::<f64>());
    let finite = gf.sigma_min.iter().flatten().all(|m| m.iter().all(|v| v.is_finite()));
    man.check("floor finite", finite, format!("{} blocks on {} times", gf.blocks(), gf.times.len()));
    Ok(())
}

fn cmd_solve(
    l: &Loaded,
    nx: Option<usize>,
    tol: Option<f64>,
    cache: Option<&Path>,
    refine: bool,
    man: &mut RunManifest,
) -> anyhow::Result<()> {
    let exp = &l.cfg.experiment;
    let SystemConfig::Coupled(c) = &l.cfg.system else {
        println!("not applicable: the configuration is a delayed SDE and has no kernels");
        man.check("kernels", true, "not applicable".into());
        return Ok(());
    };
    let sys = c.build()?;
    let nx = nx.unwrap_or(exp.nx);
    let tol = tol.unwrap_or(exp.tol);
    let default_cache = l.out.join(format!("kernels_nx{nx}.csv"));
    let cache = cache.unwrap_or(&default_cache);
    let ks = kernels_for(&l.cfg.system, &sys, exp, nx, tol, Some(cache), man)?;
    man.output(cache)?;
    println!("nx = {nx}: residual {:.4e}", ks.residual_norm);
    man.check("kernel solve", ks.residual_norm.is_finite(), format!("residual {:.4e} at nx = {nx}", ks.residual_norm));
    if refine {
        let fine = solve_kernels(&sys, 2 * nx, tol, exp.max_sweeps)?;
        let ratio = ks.residual_norm / fine.residual_norm;
        println!("nx = {}: residual {:.4e}, ratio {ratio:.3}", 2 * nx, fine.residual_norm);
        man.detail("refined_residual", fine.residual_norm);
        man.detail("residual_ratio", ratio);
        let exact = ks.residual_norm == 0.0 && fine.residual_norm == 0.0;
        man.check("refinement", exact || ratio >= 1.7, format!("residual ratio {ratio:.3}"));
    }
    Ok(())
}

fn cmd_check(l: &Loaded, seed: Option<u64>, man: &mut RunManifest) -> anyhow::Result<()> {
    let exp = &l.cfg.experiment;
    let seed = seed.unwrap_or(exp.seed);
    man.seed = Some(seed);
    let push = |man: &mut RunManifest, name: &str, r: hypersde::Result<CheckItem>| match r {
        Ok(item) => man.checks.push(item),
        Err(e) => man.check(name, false, format!("error: {e}")),
    };
    let sde = match &l.cfg.system {
        SystemConfig::Coupled(c) => {
            let sys = c.build()?;
            let rep = validate(&sys);
            man.checks.extend(rep.items.iter().cloned());
            if let Some(r) = rep.reflection_radius {
                man.detail("reflection_radius", r);
            }
            if !rep.ok() {
                return Ok(());
            }
            let ks = match kernels_for(&l.cfg.system, &sys, exp, exp.nx, exp.tol, None, man) {
                Ok(ks) => ks,
                Err(e) => {
                    man.check("kernel solve", false, format!("error: {e}"));
                    return Ok(());
                }
            };
            push(man, "transform equivalence", checks::transform_item(&sys, &ks, 200, seed));
            let tk = build_tracking_kernels(&ks, &sys)?;
            let mut sde = reduce(&sys, &ks, &tk)?;
            sde.h = snap_delays(&sde.h, exp.dt)?;
            sde
        }
        SystemConfig::Delayed(d) => {
            let mut sde = d.build()?;
            sde.h = snap_delays(&sde.h, exp.dt)?;
            man.checks.push(controllability_item(&sde.a, &sde.b));
            sde
        }
    };
    match kalman_decompose(&sde.a, &sde.b) {
        Ok(kf) => {
            let low = kf.lower_block_residual();
            man.check(
                "config decomposition",
                low <= 1e-10 && kf.diagonal_pairs_controllable(),
                format!("blocks {:?}, lower block {low:.2e}", kf.sizes),
            );
        }
        Err(e) => man.check("config decomposition", false, format!("error: {e}")),
    }
    push(man, "ito isometry", checks::isometry_item(100, 10_000, seed));
    push(man, "decomposition corpus", checks::decomposition_item(1000, seed));
    push(man, "predictor identity", checks::predictor_item(&sde, exp.dt, 5, seed));
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<bool> {
    if let Ok(v) = std::env::var("HYPERSDE_THREADS") {
        let n: usize = v.parse().with_context(|| format!("HYPERSDE_THREADS={v:?} is not a count"))?;
        if n > 0 {
            configure_threads(n)?;
        }
    }
    let started = Instant::now();
    let (name, config) = match &cli.cmd {
        Cmd::SolveKernels { config, .. } => ("solve-kernels", config),
        Cmd::Simulate { config, .. } => ("simulate", config),
        Cmd::Bound { config, .. } => ("bound", config),
        Cmd::Check { config, .. } => ("check", config),
    };
    let l = load(config, &cli.out)?;
    let mut man = RunManifest::new(name, &l.hash);
    match cli.cmd {
        Cmd::SolveKernels { nx, tol, kernel_cache, refine, .. } => {
            cmd_solve(&l, nx, tol, kernel_cache.as_deref(), refine, &mut man)?
        }
        Cmd::Simulate { controller, paths, seed, gains, kernel_cache, .. } => {
            cmd_simulate(&l, controller, paths, seed, gains, kernel_cache.as_deref(), &mut man)?
        }
        Cmd::Bound { kernel_cache, .. } => cmd_bound(&l, kernel_cache.as_deref(), &mut man)?,
        Cmd::Check { seed, .. } => cmd_check(&l, seed, &mut man)?,
    }
    man.finish(&l.out, started)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
