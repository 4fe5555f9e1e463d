use num_complex::Complex64;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sepdpd_core::hpa::load_coefficients;
use sepdpd_core::signals::DensityTable;
use sepdpd_core::training::{fit_additive, fit_multiplicative_als, fit_postdistorter, indirect_learning_loop, PredistorterSpec};
use sepdpd_core::{
    build_basis, ComplexSequence, HpaModel, Operator, OrthonormalBasis, PredistorterMatrix, Solver, StaticCurve, Structure,
    TrainingConfig, UnivariateFunction, WaveformConfig,
};

const ONE: Complex64 = Complex64::new(1.0, 0.0);

fn envelope_input(n: usize, seed: u64) -> ComplexSequence {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ComplexSequence::from_samples((0..n).map(|_| Complex64::from_polar(rng.gen_range(0.05..0.9), rng.gen_range(-3.2..3.2))).collect())
        .unwrap()
}

fn random_matrix(structure: Structure, rows: usize, depth: usize, basis: &OrthonormalBasis, seed: u64) -> PredistorterMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pd = PredistorterMatrix::filled(structure, rows, depth, basis, ONE).unwrap();
    for k in 0..rows {
        for q in 0..depth {
            let u = (0..basis.degree_count())
                .map(|m| {
                    let s = if m == 0 { 1.0 } else { 0.2 };
                    Complex64::new(rng.gen_range(-s..s), rng.gen_range(-s..s))
                })
                .collect();
            pd.set_entry(k, q, UnivariateFunction::Poly(u)).unwrap();
        }
    }
    pd
}

/// `(z, y)` with `z` produced from `y` by `pd`, padded so that `y` lines up
/// as a memoryless amplifier output of `z`.
fn planted_pair(pd: &PredistorterMatrix, y: &ComplexSequence) -> ComplexSequence {
    let mut z = vec![Complex64::new(0.0, 0.0); pd.depth() - 1];
    z.extend_from_slice(pd.apply(y).unwrap().samples());
    ComplexSequence::from_samples(z).unwrap()
}

fn uniform_basis(m: usize) -> OrthonormalBasis {
    build_basis(&DensityTable::uniform(128), m).unwrap()
}

#[test]
fn additive_planted_solution() {
    let b = uniform_basis(5);
    let truth = random_matrix(Structure::Additive, 3, 3, &b, 1);
    let y = envelope_input(4000, 2);
    let z = planted_pair(&truth, &y);
    let run = fit_additive(&truth, &z, &y, &TrainingConfig::default()).unwrap();
    assert!(run.residual_nmse_db < -80.0, "{}", run.residual_nmse_db);
}

#[test]
fn multiplicative_planted_solution() {
    let b = uniform_basis(5);
    let truth = random_matrix(Structure::Multiplicative, 3, 3, &b, 3);
    let y = envelope_input(4000, 4);
    let z = planted_pair(&truth, &y);
    let init = PredistorterMatrix::filled(Structure::Multiplicative, 3, 3, &b, ONE).unwrap();
    let cfg = TrainingConfig {
        max_iterations: 100,
        convergence_tol: 0.0,
        ..TrainingConfig::default()
    };
    let run = fit_multiplicative_als(&init, &z, &y, &cfg).unwrap();
    assert!(run.residual_nmse_db < -60.0, "{}", run.residual_nmse_db);
    assert!(run.objective_trace.windows(2).all(|w| w[1] <= w[0]));
}

#[test]
fn only_products_express_the_cross_term() {
    let b = uniform_basis(5);
    let y = envelope_input(3000, 5);
    let ys = y.samples();
    // z_n = y_{n-2} |y_{n-1}| |y_n|
    let mut z = vec![Complex64::new(0.0, 0.0); 2];
    z.extend((2..ys.len()).map(|n| ys[n - 2] * ys[n - 1].norm() * ys[n].norm()));
    let z = ComplexSequence::from_samples(z).unwrap();
    let cfg = TrainingConfig {
        max_iterations: 200,
        convergence_tol: 0.0,
        ..TrainingConfig::default()
    };
    let entries = vec![UnivariateFunction::constant(&b, ONE); 3];
    let product = PredistorterMatrix::new(Structure::Multiplicative, 1, 3, entries, vec![3], vec![ONE], b.clone()).unwrap();
    let fit = fit_multiplicative_als(&product, &z, &y, &cfg).unwrap();
    let power: f64 = z.samples().iter().map(|v| v.norm_sqr()).sum();
    let relative = fit.objective_trace.last().unwrap() / power;
    assert!(relative < 1e-6, "product residual {relative}");

    let additive = PredistorterMatrix::identity(Structure::Additive, 3, 3, &b).unwrap();
    let fit = fit_additive(&additive, &z, &y, &cfg).unwrap();
    let relative = fit.objective_trace.last().unwrap() / power;
    assert!(relative > 1e-3, "additive residual {relative}");
}

fn identity_loop(solver: Solver) -> sepdpd_core::AdaptationRun {
    let wf = WaveformConfig {
        num_samples: 8192,
        ..WaveformConfig::default()
    };
    let spec = PredistorterSpec {
        structure: Structure::Diagonal,
        rows: 3,
        depth: 3,
        degree_count: 5,
        histogram_bins: 256,
    };
    let cfg = TrainingConfig {
        samples_per_iteration: 8192,
        adaptation_iterations: 1,
        solver,
        ..TrainingConfig::default()
    };
    indirect_learning_loop(&HpaModel::identity(), &wf, &spec, &cfg).unwrap()
}

#[test]
fn identity_amplifier_is_learned_in_one_pass() {
    for solver in [Solver::Als, Solver::Scg] {
        let run = identity_loop(solver);
        assert!(run.evaluation.final_nmse_db < -60.0, "{solver:?}: {}", run.evaluation.final_nmse_db);
        assert_eq!(run.evaluation.estimated_lag, run.evaluation.compensated_lag as isize);
    }
}

#[test]
fn static_postdistorter_inverts_the_curve() {
    let model = HpaModel::static_nonlinearity(StaticCurve::Rapp {
        saturation: 1.5,
        smoothness: 2.0,
    })
    .unwrap()
    .normalize_unit_gain()
    .unwrap();
    let spec = PredistorterSpec {
        structure: Structure::Multiplicative,
        rows: 1,
        depth: 1,
        degree_count: 5,
        histogram_bins: 256,
    };
    let cfg = TrainingConfig {
        adaptation_iterations: 4,
        ..TrainingConfig::default()
    };
    let wf = WaveformConfig::default();
    let run = indirect_learning_loop(&model, &wf, &spec, &cfg).unwrap();
    let e = &run.evaluation;
    assert!(e.final_nmse_db <= -50.0, "{}", e.final_nmse_db);
    let last_residual = *run.residual_nmse_db.last().unwrap();
    assert!((e.final_nmse_db - last_residual).abs() < 3.0, "cascade {} residual {last_residual}", e.final_nmse_db);
    let pd = &run.final_matrix;
    let worst = (1..=95)
        .map(|i| {
            let r = i as f64 * 0.01;
            let (p, _) = pd.entry(0, 0).eval(pd.basis(), r);
            let z = pd.scales()[0] * r * p;
            (z - model.static_inverse(r).unwrap()).norm()
        })
        .fold(0.0, f64::max);
    assert!(worst < 1e-3, "pointwise error {worst}");
}

#[test]
fn scg_and_als_reach_the_same_plateau() {
    let path = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/ding2004_memory_polynomial.txt");
    let model = HpaModel::memory_polynomial(load_coefficients(&path).unwrap()).normalize_unit_gain().unwrap();
    let wf = WaveformConfig {
        peak_normalization: 0.5,
        edge_ramp: 64,
        ..WaveformConfig::default()
    };
    let spec = PredistorterSpec {
        structure: Structure::Diagonal,
        rows: 3,
        depth: 3,
        degree_count: 5,
        histogram_bins: 256,
    };
    let base = TrainingConfig {
        adaptation_iterations: 8,
        ..TrainingConfig::default()
    };
    let als = indirect_learning_loop(&model, &wf, &spec, &base).unwrap();
    let scg = indirect_learning_loop(
        &model,
        &wf,
        &spec,
        &TrainingConfig {
            solver: Solver::Scg,
            max_iterations: 8,
            ..base.clone()
        },
    )
    .unwrap();
    let plateau = |v: &[f64]| v[v.len() - 3..].iter().sum::<f64>() / 3.0;
    let (a, s) = (plateau(&als.residual_nmse_db), plateau(&scg.residual_nmse_db));
    assert!((a - s).abs() < 2.0, "ALS {a} SCG {s}");
    // the amplifier is invertible at this drive level
    let e = &als.evaluation;
    let last = *als.residual_nmse_db.last().unwrap();
    assert!((e.final_nmse_db - last).abs() < 3.0, "cascade {} residual {last}", e.final_nmse_db);
    assert_eq!(e.estimated_lag, 4);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn als_objective_never_increases(seed in 0u64..1000, rows in 1usize..4, depth in 1usize..4, m in 1usize..5) {
        let b = uniform_basis(m);
        let y = envelope_input(300, seed);
        let z = envelope_input(300 + 1, seed + 1);
        let init = PredistorterMatrix::identity(Structure::Multiplicative, rows, depth, &b).unwrap();
        let cfg = TrainingConfig { max_iterations: 8, convergence_tol: 0.0, ..TrainingConfig::default() };
        let run = fit_postdistorter(&init, &z, &y, &cfg).unwrap();
        prop_assert!(run.objective_trace.windows(2).all(|w| w[1] <= w[0]));
    }
}
