//! Fréchet distance between Gaussians fitted to two embedding sets.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::{Error, Result};

fn moments(set: &[Vec<f32>], dim: usize) -> (DVector<f64>, DMatrix<f64>) {
    let n = set.len() as f64;
    let mut mu = DVector::zeros(dim);
    for x in set {
        for (j, v) in x.iter().enumerate() {
            mu[j] += *v as f64 / n;
        }
    }
    let mut cov = DMatrix::zeros(dim, dim);
    for x in set {
        let d = DVector::from_iterator(dim, x.iter().enumerate().map(|(j, v)| *v as f64 - mu[j]));
        cov += &d * d.transpose();
    }
    cov /= (n - 1.0).max(1.0);
    (mu, cov)
}

fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

fn trace_sqrt_product(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    // Tr((A B)^{1/2}) = Tr((A^{1/2} B A^{1/2})^{1/2}) for PSD A, B
    let ra = sym_sqrt(a);
    sym_sqrt(&(&ra * b * &ra)).trace()
}

/// `|mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a S_b)^{1/2})`.
///
/// Without `shrinkage` each set needs more samples than dimensions; with it,
/// covariances are pulled toward a scaled identity by that weight.
pub fn frechet_embedding_distance(a: &[Vec<f32>], b: &[Vec<f32>], shrinkage: Option<f64>) -> Result<f64> {
    let dim = a.first().map(Vec::len).ok_or_else(|| Error::invalid("empty embedding set"))?;
    if b.is_empty() || a.iter().chain(b).any(|x| x.len() != dim) || dim == 0 {
        return Err(Error::shape("frechet distance", "embedding sets must be non-empty with one width"));
    }
    match shrinkage {
        None if a.len() <= dim || b.len() <= dim => {
            return Err(Error::invalid(format!(
                "{} and {} samples are too few for {dim}-d covariances; use shrinkage",
                a.len(),
                b.len()
            )));
        }
        Some(l) if !(0.0..=1.0).contains(&l) => return Err(Error::invalid("shrinkage must be in [0, 1]")),
        _ => {}
    }
    let (mu_a, mut ca) = moments(a, dim);
    let (mu_b, mut cb) = moments(b, dim);
    if let Some(l) = shrinkage {
        for c in [&mut ca, &mut cb] {
            let t = c.trace() / dim as f64;
            *c = &*c * (1.0 - l) + DMatrix::identity(dim, dim) * (l * t);
        }
    }
    let mean_term = (&mu_a - &mu_b).norm_squared();
    // average both orders so the result is exactly symmetric
    let cross = 0.5 * (trace_sqrt_product(&ca, &cb) + trace_sqrt_product(&cb, &ca));
    let d = mean_term + ca.trace() + cb.trace() - 2.0 * cross;
    Ok(d.max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn gauss(seed: u64, n: usize, mean: f32) -> Vec<Vec<f32>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| vec![crate::numeric::params::standard_normal(&mut rng) + mean]).collect()
    }

    #[test]
    fn identical_sets_are_zero_and_symmetric() {
        let a = gauss(1, 50, 0.0);
        let b = gauss(2, 50, 0.5);
        assert!(frechet_embedding_distance(&a, &a, None).unwrap() < 1e-9);
        assert_eq!(
            frechet_embedding_distance(&a, &b, None).unwrap(),
            frechet_embedding_distance(&b, &a, None).unwrap()
        );
    }

    #[test]
    fn unit_shift_gives_one() {
        let d = frechet_embedding_distance(&gauss(3, 10_000, 0.0), &gauss(4, 10_000, 1.0), None).unwrap();
        assert!((d - 1.0).abs() < 0.1, "{d}");
    }

    #[test]
    fn too_few_samples_need_shrinkage() {
        let a: Vec<Vec<f32>> = (0..3).map(|i| vec![i as f32, 1.0, 0.5 * i as f32]).collect();
        assert!(frechet_embedding_distance(&a, &a, None).is_err());
        assert!(frechet_embedding_distance(&a, &a, Some(0.1)).unwrap() < 1e-9);
    }
}
