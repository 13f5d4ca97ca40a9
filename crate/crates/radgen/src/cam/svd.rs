//! Truncated SVD via one-sided Jacobi (Hestenes) rotations.
//!
//! Orthogonalizes the columns of a tall matrix in place; after convergence
//! each column equals u_j·σ_j and the accumulated rotations give V. Suited
//! to the (H·W)×K channel matrices here, where K is small.

/// Rank-truncated SVD of a row-major `rows`×`cols` matrix.
pub struct TruncatedSvd {
    /// Columns of U·Σ, each of length `rows`, in descending σ order.
    pub scaled_left: Vec<Vec<f64>>,
    pub singular_values: Vec<f64>,
    /// Right singular vectors, each of length `cols`.
    pub right: Vec<Vec<f64>>,
}

const TOL: f64 = 1e-14;
const MAX_SWEEPS: usize = 64;

pub fn truncated_svd(matrix: &[f64], rows: usize, cols: usize, rank: usize) -> TruncatedSvd {
    assert_eq!(matrix.len(), rows * cols, "matrix size mismatch");
    // column-major working copy
    let mut a: Vec<Vec<f64>> = (0..cols)
        .map(|j| (0..rows).map(|i| matrix[i * cols + j]).collect())
        .collect();
    let mut v: Vec<Vec<f64>> = (0..cols)
        .map(|j| (0..cols).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();

    let frob: f64 = matrix.iter().map(|x| x * x).sum();
    let thresh = TOL * frob.max(f64::MIN_POSITIVE);

    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..cols {
            for q in (p + 1)..cols {
                let (mut app, mut aqq, mut apq) = (0.0, 0.0, 0.0);
                for i in 0..rows {
                    app += a[p][i] * a[p][i];
                    aqq += a[q][i] * a[q][i];
                    apq += a[p][i] * a[q][i];
                }
                if apq.abs() <= thresh || apq.abs() <= TOL * (app * aqq).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (aqq - app) / (2.0 * apq);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..rows {
                    let xp = a[p][i];
                    let xq = a[q][i];
                    a[p][i] = c * xp - s * xq;
                    a[q][i] = s * xp + c * xq;
                }
                for i in 0..cols {
                    let vp = v[p][i];
                    let vq = v[q][i];
                    v[p][i] = c * vp - s * vq;
                    v[q][i] = s * vp + c * vq;
                }
            }
        }
        if !rotated {
            break;
        }
    }

    let mut norms: Vec<(usize, f64)> = a
        .iter()
        .enumerate()
        .map(|(j, col)| (j, col.iter().map(|x| x * x).sum::<f64>().sqrt()))
        .collect();
    norms.sort_by(|x, y| y.1.total_cmp(&x.1).then(x.0.cmp(&y.0)));

    let keep = rank.min(cols);
    let mut scaled_left = Vec::with_capacity(keep);
    let mut singular_values = Vec::with_capacity(keep);
    let mut right = Vec::with_capacity(keep);
    for &(j, sigma) in norms.iter().take(keep) {
        let mut u_col = std::mem::take(&mut a[j]);
        let mut v_col = std::mem::take(&mut v[j]);
        // orient so the largest-magnitude entry of the right vector is positive
        let mut pivot = 0;
        for (i, val) in v_col.iter().enumerate() {
            if val.abs() > v_col[pivot].abs() {
                pivot = i;
            }
        }
        if v_col[pivot] < 0.0 {
            for x in u_col.iter_mut() {
                *x = -*x;
            }
            for x in v_col.iter_mut() {
                *x = -*x;
            }
        }
        scaled_left.push(u_col);
        singular_values.push(sigma);
        right.push(v_col);
    }
    TruncatedSvd {
        scaled_left,
        singular_values,
        right,
    }
}

/// Frobenius norm of (matrix − Σ_j scaled_left_j · right_jᵀ).
pub fn reconstruction_error(matrix: &[f64], rows: usize, cols: usize, svd: &TruncatedSvd) -> f64 {
    let mut err = 0.0;
    for i in 0..rows {
        for j in 0..cols {
            let mut approx = 0.0;
            for (u, v) in svd.scaled_left.iter().zip(svd.right.iter()) {
                approx += u[i] * v[j];
            }
            let d = matrix[i * cols + j] - approx;
            err += d * d;
        }
    }
    err.sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rank_one_matrix_is_reconstructed_exactly() {
        let rows = 8;
        let cols = 5;
        let u: Vec<f64> = (0..rows).map(|i| (i as f64 * 0.7).sin() + 1.5).collect();
        let v: Vec<f64> = (0..cols).map(|j| (j as f64 * 1.3).cos() * 2.0).collect();
        let m: Vec<f64> = (0..rows * cols)
            .map(|idx| u[idx / cols] * v[idx % cols])
            .collect();
        let svd = truncated_svd(&m, rows, cols, 3);
        assert!(svd.singular_values[0] > 1.0);
        assert!(svd.singular_values[1] < 1e-9);
        assert!(reconstruction_error(&m, rows, cols, &svd) <= 1e-9);
    }

    #[test]
    fn columns_of_scaled_left_are_orthogonal() {
        let rows = 30;
        let cols = 6;
        let m: Vec<f64> = (0..rows * cols)
            .map(|i| ((i * 2654435761) % 97) as f64 / 97.0 - 0.5)
            .collect();
        let svd = truncated_svd(&m, rows, cols, 6);
        for a in 0..6 {
            for b in (a + 1)..6 {
                let dot: f64 = svd.scaled_left[a]
                    .iter()
                    .zip(svd.scaled_left[b].iter())
                    .map(|(x, y)| x * y)
                    .sum();
                assert!(dot.abs() <= 1e-8, "columns {a},{b} dot {dot}");
            }
        }
        // singular values descend
        for w in svd.singular_values.windows(2) {
            assert!(w[0] >= w[1] - 1e-12);
        }
    }

    #[test]
    fn sign_convention_makes_largest_right_entry_positive() {
        let rows = 10;
        let cols = 4;
        let m: Vec<f64> = (0..rows * cols)
            .map(|i| -(((i * 7919) % 31) as f64 / 31.0))
            .collect();
        let svd = truncated_svd(&m, rows, cols, 3);
        for v_col in &svd.right {
            let mut pivot = 0;
            for (i, x) in v_col.iter().enumerate() {
                if x.abs() > v_col[pivot].abs() {
                    pivot = i;
                }
            }
            assert!(v_col[pivot] >= 0.0);
        }
    }
}
