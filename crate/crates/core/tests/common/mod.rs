#![allow(dead_code)]

use eqsel_core::matctrl::SquareMatrix;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `M = S D S⁻¹` with `D` block diagonal: real eigenvalues and 2×2 blocks
/// `[[a, b], [−b, a]]`, all with `|Re λ| ∈ [0.2, 3]`. Returns `M` and the
/// planted unstable trace.
pub fn planted_dichotomous(seed: u64, d: usize) -> (SquareMatrix, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut block = DMatrix::zeros(d, d);
    let mut lambda_plus = 0.0;
    let mut i = 0;
    while i < d {
        let re = rng.random_range(0.2..3.0) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        if i + 1 < d && rng.random_bool(0.4) {
            let im = rng.random_range(0.1..3.0);
            block[(i, i)] = re;
            block[(i + 1, i + 1)] = re;
            block[(i, i + 1)] = im;
            block[(i + 1, i)] = -im;
            if re > 0.0 {
                lambda_plus += 2.0 * re;
            }
            i += 2;
        } else {
            block[(i, i)] = re;
            if re > 0.0 {
                lambda_plus += re;
            }
            i += 1;
        }
    }
    // Well-conditioned similarity: identity plus a modest random perturbation.
    let s = DMatrix::from_fn(d, d, |r, c| {
        let delta = if r == c { 1.0 } else { 0.0 };
        delta + rng.random_range(-0.4..0.4)
    });
    let s_inv = s.clone().try_inverse().expect("perturbed identity is invertible");
    let m = &s * block * s_inv;
    (SquareMatrix::new(m).unwrap(), lambda_plus)
}

pub fn random_matrix(seed: u64, d: usize, scale: f64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    DMatrix::from_fn(d, d, |_, _| rng.random_range(-scale..scale))
}

pub fn min_eig_sym(m: &DMatrix<f64>) -> f64 {
    m.clone()
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

pub fn is_hurwitz(m: &DMatrix<f64>) -> bool {
    m.complex_eigenvalues().iter().all(|l| l.re < 0.0)
}
