//! Fréchet distance between two feature clouds under a Gaussian fit:
//! `||μ₁−μ₂||² + Tr(Σ₁ + Σ₂ − 2·(Σ₁Σ₂)^{1/2})`.

use nalgebra::{DMatrix, DVector};

use super::EvalError;

/// Regularizer added to both covariance diagonals before the square root,
/// so rank-deficient clouds (even constant features) stay well-posed.
const EPS_REG: f64 = 1e-6;
const EIG_MAX_ITER: usize = 10_000;

fn mean_and_cov(features: &[Vec<f32>], dim: usize) -> (DVector<f64>, DMatrix<f64>) {
    let n = features.len();
    let mut mean = DVector::<f64>::zeros(dim);
    for f in features {
        for (i, &v) in f.iter().enumerate() {
            mean[i] += v as f64;
        }
    }
    mean /= n as f64;
    // Sample covariance (n−1 denominator), the standard estimator for this
    // metric.
    let mut cov = DMatrix::<f64>::zeros(dim, dim);
    for f in features {
        let d: DVector<f64> = DVector::from_iterator(dim, f.iter().map(|&v| v as f64)) - &mean;
        cov.ger(1.0 / (n - 1) as f64, &d, &d, 1.0);
    }
    for i in 0..dim {
        cov[(i, i)] += EPS_REG;
    }
    (mean, cov)
}

/// Symmetric PSD square root via eigendecomposition; eigenvalues pushed
/// below zero by round-off are clamped to 0.
fn sqrt_psd(m: DMatrix<f64>) -> Result<DMatrix<f64>, EvalError> {
    let eig = nalgebra::SymmetricEigen::try_new(m, f64::EPSILON, EIG_MAX_ITER)
        .ok_or(EvalError::Eigen)?;
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    let scaled = {
        let mut q = eig.eigenvectors.clone();
        for (j, r) in roots.iter().enumerate() {
            q.column_mut(j).scale_mut(*r);
        }
        q
    };
    Ok(&scaled * eig.eigenvectors.transpose())
}

/// Fréchet distance between Gaussian fits of two feature sets. Each set
/// needs at least `dim + 1` vectors; the result is clamped at 0 against
/// round-off.
pub fn frechet_distance(a: &[Vec<f32>], b: &[Vec<f32>]) -> Result<f64, EvalError> {
    let dim = a
        .first()
        .or_else(|| b.first())
        .map(|f| f.len())
        .ok_or_else(|| EvalError::Malformed("both feature sets are empty".into()))?;
    for (name, set) in [("first", a), ("second", b)] {
        if set.len() < dim + 1 {
            return Err(EvalError::TooFewFeatures { dim, need: dim + 1, got: set.len() });
        }
        if let Some(bad) = set.iter().find(|f| f.len() != dim) {
            return Err(EvalError::LengthMismatch(format!(
                "{name} set mixes dims {dim} and {}",
                bad.len()
            )));
        }
    }

    let (mu1, sigma1) = mean_and_cov(a, dim);
    let (mu2, sigma2) = mean_and_cov(b, dim);

    let diff = &mu1 - &mu2;
    let mean_term = diff.dot(&diff);

    // Tr((Σ₁Σ₂)^{1/2}) via the symmetrized product S·Σ₂·S with S = Σ₁^{1/2}:
    // Σ₁Σ₂ is similar to S·Σ₂·S, so their square-root traces agree, and the
    // symmetric form keeps the eigensolve real.
    let s1 = sqrt_psd(sigma1.clone())?;
    let mut prod = &s1 * &sigma2 * &s1;
    // Kill the asymmetric round-off before the symmetric eigensolve.
    let prod_t = prod.transpose();
    prod = (prod + prod_t) * 0.5;
    let eig = nalgebra::SymmetricEigen::try_new(prod, f64::EPSILON, EIG_MAX_ITER)
        .ok_or(EvalError::Eigen)?;
    let tr_sqrt: f64 = eig.eigenvalues.iter().map(|&l| l.max(0.0).sqrt()).sum();

    let fd = mean_term + sigma1.trace() + sigma2.trace() - 2.0 * tr_sqrt;
    Ok(fd.max(0.0))
}
