use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sepdpd_core::predistorter::default_tap;
use sepdpd_core::signals::DensityTable;
use sepdpd_core::{build_basis, ComplexSequence, Operator, PredistorterMatrix, Structure, UnivariateFunction};

fn random_input(n: usize, seed: u64) -> ComplexSequence {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ComplexSequence::from_samples((0..n).map(|_| Complex64::from_polar(rng.gen_range(0.0..1.0), rng.gen_range(-3.2..3.2))).collect())
        .unwrap()
}

fn random_coeffs(rng: &mut ChaCha8Rng, len: usize) -> Vec<Complex64> {
    (0..len).map(|_| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))).collect()
}

fn horner(c: &[Complex64], r: f64) -> Complex64 {
    c.iter().rev().fold(Complex64::new(0.0, 0.0), |acc, v| acc * r + v)
}

fn relative_error(got: &ComplexSequence, want: &[Complex64]) -> f64 {
    let scale = want.iter().map(|v| v.norm()).fold(0.0, f64::max);
    got.samples().iter().zip(want).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max) / scale
}

#[test]
fn diagonal_with_unit_off_diagonal_is_memory_polynomial() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let basis = build_basis(&DensityTable::uniform(256), 5).unwrap();
    let depth = 3;
    let coeffs: Vec<Vec<Complex64>> = (0..depth).map(|_| random_coeffs(&mut rng, 5)).collect();
    let pd = PredistorterMatrix::memory_polynomial_equivalent(depth, &coeffs, &basis).unwrap();
    let x = random_input(10_000, 12);
    let xs = x.samples();
    // z_n = sum_q sum_j b_qj x_{n-q} |x_{n-q}|^j
    let want: Vec<Complex64> = (depth - 1..xs.len())
        .map(|n| (0..depth).map(|q| xs[n - q] * horner(&coeffs[q], xs[n - q].norm())).sum())
        .collect();
    let got = pd.apply(&x).unwrap();
    assert_eq!(got.len(), want.len());
    assert!(relative_error(&got, &want) < 1e-12);
}

#[test]
fn additive_is_generalized_memory_polynomial() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let basis = build_basis(&DensityTable::uniform(256), 5).unwrap();
    let (rows, depth) = (4, 3);
    let c: Vec<Vec<Complex64>> = (0..rows * depth).map(|_| random_coeffs(&mut rng, 5)).collect();
    let entries = c.iter().map(|c| UnivariateFunction::from_monomials(&basis, c).unwrap()).collect();
    let taps: Vec<usize> = (0..rows).map(|k| default_tap(k, depth)).collect();
    let pd = PredistorterMatrix::new(
        Structure::Additive,
        rows,
        depth,
        entries,
        taps.clone(),
        vec![Complex64::new(1.0, 0.0); rows],
        basis,
    )
    .unwrap();
    let x = random_input(10_000, 14);
    let xs = x.samples();
    // z_n = sum_k sum_q sum_j c_kqj x_{n-m_k+1} |x_{n-q}|^j
    let want: Vec<Complex64> = (depth - 1..xs.len())
        .map(|n| {
            let mut z = Complex64::new(0.0, 0.0);
            for k in 0..rows {
                for q in 0..depth {
                    z += xs[n + 1 - taps[k]] * horner(&c[k * depth + q], xs[n - q].norm());
                }
            }
            z
        })
        .collect();
    assert!(relative_error(&pd.apply(&x).unwrap(), &want) < 1e-12);
}
