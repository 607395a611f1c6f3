use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use hypersde::control::{design_feedback, FeedbackController};
use hypersde::model::MatrixFn;
use hypersde::reduction::{kalman_decompose, DelayedSde};
use hypersde::sim::{run_monte_carlo, DelayedSim, McConfig, PathOutput};
use nalgebra::{DMatrix, DVector};

fn cascade(horizon: f64) -> DelayedSde {
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

fn feedback_paths(c: &mut Criterion) {
    let (dt, t_end) = (1e-3, 2.0);
    let sde = cascade(t_end);
    let kf = kalman_decompose(&sde.a, &sde.b).unwrap();
    let law = design_feedback(&kf, &sde.h, 1.0).unwrap();
    let sim = DelayedSim::new(&sde, dt, t_end).unwrap();
    let times: Vec<f64> = (0..=20).map(|k| k as f64 * 0.1).collect();
    let mut group = c.benchmark_group("feedback_monte_carlo");
    group.sample_size(10);
    for parallel in [false, true] {
        let cfg = McConfig { paths: 256, seed: 1, parallel, ..Default::default() };
        let label = if parallel { "parallel" } else { "serial" };
        group.bench_with_input(BenchmarkId::new(label, cfg.paths), &cfg, |b, cfg| {
            b.iter(|| {
                run_monte_carlo(cfg, &times, 2, 0, |_, rng| {
                    let mut ctrl = FeedbackController::new(&law, &kf, &sde, dt);
                    let mut out = PathOutput::default();
                    sim.run_path(&mut ctrl, rng, 1e8, None, |k, x, _| {
                        if k % 100 == 0 {
                            out.series.push(x.clone());
                        }
                    });
                    out
                })
                .unwrap()
            })
        });
    }
    group.finish();
}

criterion_group!(benches, feedback_paths);
criterion_main!(benches);
