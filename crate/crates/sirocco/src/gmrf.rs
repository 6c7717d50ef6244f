//! Gaussian Markov random field sampling and density evaluation.
//!
//! A field is specified by a mean vector and a sparse precision matrix.
//! Exact sampling runs a Cholesky back-solve on white noise; conditional
//! sampling given a fixed subset factors only the free block, which is what
//! keeps forecasting cheap when history is long and the horizon short.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::precision::{CholeskyFactor, SparsePrecision};
use crate::stats::LN_2PI;

/// Field values over (region, day), region-major. See [`Grid`] for layout.
pub type LatentField = Grid<f64>;

fn check_mean(mean: &[f64], dim: usize) -> Result<()> {
    if !mean.is_empty() && mean.len() != dim {
        return Err(Error::Precision(format!(
            "mean length {} does not match dimension {}",
            mean.len(),
            dim
        )));
    }
    Ok(())
}

/// Draws one exact sample x ~ N(mean, Q⁻¹).
///
/// An empty mean is treated as zero. Identical (precision, mean, rng state)
/// produce identical samples.
///
/// # Errors
///
/// Mean length mismatch, or a precision that is not positive definite.
pub fn sample_field<R: Rng + ?Sized>(
    precision: &SparsePrecision,
    mean: &[f64],
    rng: &mut R,
) -> Result<Vec<f64>> {
    check_mean(mean, precision.dim())?;
    let factor = precision.cholesky()?;
    let z: Vec<f64> = (0..precision.dim())
        .map(|_| rng.sample(StandardNormal))
        .collect();
    let mut x = factor.solve_lt(&z);
    if !mean.is_empty() {
        for (xi, mi) in x.iter_mut().zip(mean) {
            *xi += mi;
        }
    }
    Ok(x)
}

/// log N(x; mean, Q⁻¹) = ½ log det Q − (n/2) log 2π − ½ (x−m)ᵀQ(x−m).
///
/// # Errors
///
/// Length mismatches, or a precision that is not positive definite.
pub fn log_density(x: &[f64], mean: &[f64], precision: &SparsePrecision) -> Result<f64> {
    let n = precision.dim();
    if x.len() != n {
        return Err(Error::Precision(format!(
            "value length {} does not match dimension {}",
            x.len(),
            n
        )));
    }
    check_mean(mean, n)?;
    let log_det = precision.log_det()?;
    Ok(0.5 * log_det - 0.5 * n as f64 * LN_2PI - 0.5 * precision.quadform(x, mean))
}

/// Draws the free coordinates of x ~ N(mean, Q⁻¹) conditional on
/// `x[fixed_indices] == fixed_values`, returning the full vector with the
/// fixed coordinates passed through unchanged.
///
/// The conditional distribution is Gaussian with precision equal to the
/// free-block sub-matrix of Q, so only that block is factored.
///
/// # Errors
///
/// Index out of range, duplicate fixed index, length mismatches, or a free
/// block that is not positive definite.
pub fn conditional_sample<R: Rng + ?Sized>(
    precision: &SparsePrecision,
    mean: &[f64],
    fixed_indices: &[usize],
    fixed_values: &[f64],
    rng: &mut R,
) -> Result<Vec<f64>> {
    let n = precision.dim();
    check_mean(mean, n)?;
    if fixed_indices.len() != fixed_values.len() {
        return Err(Error::Precision(
            "fixed indices and values differ in length".into(),
        ));
    }
    let mut is_fixed = vec![false; n];
    let mut fixed_dev = vec![0.0; n]; // x_B - m_B, zero on free coords
    for (&i, &v) in fixed_indices.iter().zip(fixed_values) {
        if i >= n {
            return Err(Error::Precision(format!("fixed index {i} out of range")));
        }
        if is_fixed[i] {
            return Err(Error::Precision(format!("fixed index {i} repeated")));
        }
        is_fixed[i] = true;
        let m = if mean.is_empty() { 0.0 } else { mean[i] };
        fixed_dev[i] = v - m;
    }

    let free: Vec<usize> = (0..n).filter(|&i| !is_fixed[i]).collect();
    let mut out = vec![0.0; n];
    for (&i, &v) in fixed_indices.iter().zip(fixed_values) {
        out[i] = v;
    }
    if free.is_empty() {
        return Ok(out);
    }

    if free.len() == n {
        return sample_field(precision, mean, rng);
    }

    // Conditional mean: m_F - Q_FF^{-1} Q_FB (x_B - m_B).
    let q_ff = precision.dense_block(&free);
    let factor = CholeskyFactor::of_dense(q_ff)
        .ok_or_else(|| Error::Precision("free block is not positive definite".into()))?;
    let rhs: Vec<f64> = free
        .iter()
        .map(|&i| {
            precision
                .row_entries(i)
                .filter(|&(j, _)| is_fixed[j])
                .map(|(j, q)| q * fixed_dev[j])
                .sum::<f64>()
        })
        .collect();
    let shift = factor.solve(&rhs);
    let z: Vec<f64> = (0..free.len()).map(|_| rng.sample(StandardNormal)).collect();
    let noise = factor.solve_lt(&z);
    for (k, &i) in free.iter().enumerate() {
        let m = if mean.is_empty() { 0.0 } else { mean[i] };
        out[i] = m - shift[k] + noise[k];
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::shapes;
    use crate::precision::{ar1_precision, car_precision};
    use crate::rng::SeedTree;
    use approx::assert_abs_diff_eq;
    use nalgebra::{DMatrix, DVector};

    #[test]
    fn log_density_standard_normal_at_ones() {
        let q = SparsePrecision::identity(2);
        let ld = log_density(&[1.0, 1.0], &[], &q).unwrap();
        assert_abs_diff_eq!(ld, -LN_2PI - 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(ld, -2.837877066409345, epsilon = 1e-9);
    }

    #[test]
    fn log_density_matches_dense_oracle() {
        let g = shapes::grid(2, 2);
        let q = car_precision(&g, 0.8, 1.7).unwrap();
        let x = [0.4, -1.2, 0.05, 2.2];
        let m = [0.1, 0.1, -0.2, 0.0];
        // Dense oracle: direct inverse and determinant via nalgebra.
        let qd = q.to_dense();
        let det = qd.determinant();
        let dev = DVector::from_column_slice(&x) - DVector::from_column_slice(&m);
        let quad = (dev.transpose() * qd * &dev)[(0, 0)];
        let expect = 0.5 * det.ln() - 2.0 * LN_2PI - 0.5 * quad;
        assert_abs_diff_eq!(log_density(&x, &m, &q).unwrap(), expect, epsilon = 1e-10);
    }

    #[test]
    fn sampler_is_deterministic_under_seed() {
        let q = ar1_precision(6, 0.4).unwrap();
        let tree = SeedTree::new(9);
        let a = sample_field(&q, &[], &mut tree.stream("s", 0)).unwrap();
        let b = sample_field(&q, &[], &mut tree.stream("s", 0)).unwrap();
        let c = sample_field(&q, &[], &mut tree.stream("s", 1)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn sample_moments_match_dense_inverse() {
        let g = shapes::path(3);
        let q = car_precision(&g, 0.5, 1.0).unwrap();
        let cov = q.to_dense().try_inverse().unwrap();
        let mean = [1.0, -2.0, 0.5];
        let n_draws = 40_000;
        let mut rng = SeedTree::new(31).stream("moments", 0);
        let mut sum = [0.0; 3];
        let mut sum_sq = DMatrix::<f64>::zeros(3, 3);
        for _ in 0..n_draws {
            let x = sample_field(&q, &mean, &mut rng).unwrap();
            for i in 0..3 {
                sum[i] += x[i];
                for j in 0..3 {
                    sum_sq[(i, j)] += (x[i] - mean[i]) * (x[j] - mean[j]);
                }
            }
        }
        let nf = n_draws as f64;
        for i in 0..3 {
            let se = (cov[(i, i)] / nf).sqrt();
            assert!(
                (sum[i] / nf - mean[i]).abs() < 5.0 * se,
                "mean {i} off by more than 5 standard errors"
            );
            for j in 0..3 {
                let se_cov =
                    ((cov[(i, i)] * cov[(j, j)] + cov[(i, j)] * cov[(i, j)]) / nf).sqrt();
                assert!(
                    (sum_sq[(i, j)] / nf - cov[(i, j)]).abs() < 5.0 * se_cov,
                    "cov ({i},{j}) off by more than 5 standard errors"
                );
            }
        }
    }

    #[test]
    fn conditional_sample_fixes_requested_coordinates() {
        let q = kron_fixture();
        let mean = vec![0.5; q.dim()];
        let fixed_idx = [0usize, 3, 4];
        let fixed_val = [2.0, -1.0, 0.0];
        let mut rng = SeedTree::new(5).stream("cond", 0);
        let x = conditional_sample(&q, &mean, &fixed_idx, &fixed_val, &mut rng).unwrap();
        assert_eq!(x.len(), q.dim());
        for (&i, &v) in fixed_idx.iter().zip(&fixed_val) {
            assert_eq!(x[i], v, "fixed coordinate {i} must pass through exactly");
        }
    }

    #[test]
    fn conditional_moments_match_dense_oracle() {
        let q = kron_fixture();
        let n = q.dim();
        let mean = vec![0.25; n];
        let fixed_idx = [1usize, 2];
        let fixed_val = [1.5, -0.5];

        // Dense oracle: conditional mean and covariance from the partitioned
        // precision, built with nalgebra only.
        let qd = q.to_dense();
        let free: Vec<usize> = (0..n).filter(|i| !fixed_idx.contains(i)).collect();
        let q_ff = DMatrix::from_fn(free.len(), free.len(), |a, b| qd[(free[a], free[b])]);
        let q_fb = DMatrix::from_fn(free.len(), fixed_idx.len(), |a, b| {
            qd[(free[a], fixed_idx[b])]
        });
        let dev = DVector::from_iterator(2, fixed_val.iter().map(|v| v - 0.25));
        let cov_f = q_ff.clone().try_inverse().unwrap();
        let mean_f = DVector::from_element(free.len(), 0.25) - &cov_f * (q_fb * dev);

        let n_draws = 30_000;
        let mut rng = SeedTree::new(77).stream("cond-moments", 0);
        let mut sums = vec![0.0; free.len()];
        let mut sq = DMatrix::<f64>::zeros(free.len(), free.len());
        for _ in 0..n_draws {
            let x = conditional_sample(&q, &mean, &fixed_idx, &fixed_val, &mut rng).unwrap();
            for (a, &i) in free.iter().enumerate() {
                sums[a] += x[i];
                for (b, &j) in free.iter().enumerate() {
                    sq[(a, b)] += (x[i] - mean_f[a]) * (x[j] - mean_f[b]);
                }
            }
        }
        let nf = n_draws as f64;
        for a in 0..free.len() {
            let se = (cov_f[(a, a)] / nf).sqrt();
            assert!(
                (sums[a] / nf - mean_f[a]).abs() < 5.0 * se,
                "conditional mean {a} outside 5 standard errors"
            );
            for b in 0..free.len() {
                let se_cov =
                    ((cov_f[(a, a)] * cov_f[(b, b)] + cov_f[(a, b)].powi(2)) / nf).sqrt();
                assert!(
                    (sq[(a, b)] / nf - cov_f[(a, b)]).abs() < 5.0 * se_cov,
                    "conditional cov ({a},{b}) outside 5 standard errors"
                );
            }
        }
    }

    #[test]
    fn conditional_degenerate_cases() {
        let q = ar1_precision(4, 0.5).unwrap();
        let mut rng = SeedTree::new(1).stream("deg", 0);
        // All fixed: passthrough.
        let x = conditional_sample(&q, &[], &[0, 1, 2, 3], &[9.0, 8.0, 7.0, 6.0], &mut rng)
            .unwrap();
        assert_eq!(x, vec![9.0, 8.0, 7.0, 6.0]);
        // None fixed: plain sample, still length 4.
        let x = conditional_sample(&q, &[], &[], &[], &mut rng).unwrap();
        assert_eq!(x.len(), 4);
        // Errors.
        assert!(conditional_sample(&q, &[], &[9], &[0.0], &mut rng).is_err());
        assert!(conditional_sample(&q, &[], &[1, 1], &[0.0, 0.0], &mut rng).is_err());
        assert!(conditional_sample(&q, &[], &[1], &[], &mut rng).is_err());
    }

    fn kron_fixture() -> SparsePrecision {
        let a = car_precision(&shapes::path(2), 0.4, 1.2).unwrap();
        let b = ar1_precision(3, 0.5).unwrap();
        crate::precision::kron_precision(&a, &b).unwrap()
    }
}
