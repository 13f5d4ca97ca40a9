//! Shared test oracles, deliberately independent of the library's own
//! computation paths.

/// Symmetric eigendecomposition by classical two-sided Jacobi rotations.
/// Returns (eigenvalues, eigenvectors-as-columns), descending.
pub fn jacobi_eigh(matrix: &[f64], n: usize) -> (Vec<f64>, Vec<Vec<f64>>) {
    let mut a: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| matrix[i * n + j]).collect())
        .collect();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();
    for _ in 0..100 {
        let mut off = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                off += a[i][j] * a[i][j];
            }
        }
        if off <= 1e-24 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                if a[p][q].abs() <= 1e-18 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (1.0 + theta * theta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..n {
                    let aip = a[i][p];
                    let aiq = a[i][q];
                    a[i][p] = c * aip - s * aiq;
                    a[i][q] = s * aip + c * aiq;
                }
                for j in 0..n {
                    let apj = a[p][j];
                    let aqj = a[q][j];
                    a[p][j] = c * apj - s * aqj;
                    a[q][j] = s * apj + c * aqj;
                }
                for i in 0..n {
                    let vip = v[i][p];
                    let viq = v[i][q];
                    v[i][p] = c * vip - s * viq;
                    v[i][q] = s * vip + c * viq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| a[y][y].total_cmp(&a[x][x]));
    let eigenvalues: Vec<f64> = order.iter().map(|&i| a[i][i]).collect();
    let eigenvectors: Vec<Vec<f64>> = order
        .iter()
        .map(|&col| (0..n).map(|row| v[row][col]).collect())
        .collect();
    (eigenvalues, eigenvectors)
}

/// Best achievable rank-r Frobenius error of a rows×cols matrix, from the
/// eigenvalues of MᵀM (Eckart–Young): sqrt of the discarded eigenvalue sum.
pub fn best_rank_error(matrix: &[f64], rows: usize, cols: usize, rank: usize) -> f64 {
    let mut gram = vec![0.0; cols * cols];
    for i in 0..cols {
        for j in 0..cols {
            let mut s = 0.0;
            for r in 0..rows {
                s += matrix[r * cols + i] * matrix[r * cols + j];
            }
            gram[i * cols + j] = s;
        }
    }
    let (eigenvalues, _) = jacobi_eigh(&gram, cols);
    let tail: f64 = eigenvalues.iter().skip(rank).map(|&l| l.max(0.0)).sum();
    tail.sqrt()
}

/// Largest principal angle (in terms of singular-value defect) between the
/// column spaces spanned by two sets of vectors of equal length.
pub fn subspace_defect(a_cols: &[Vec<f64>], b_cols: &[Vec<f64>]) -> f64 {
    let qa = gram_schmidt(a_cols);
    let qb = gram_schmidt(b_cols);
    if qa.is_empty() || qb.is_empty() || qa.len() != qb.len() {
        return 1.0;
    }
    let k = qa.len();
    // singular values of QaᵀQb via eigenvalues of its k×k gram
    let mut m = vec![0.0; k * k];
    for i in 0..k {
        for j in 0..k {
            let mut s = 0.0;
            for r in 0..qa[0].len() {
                s += qa[i][r] * qb[j][r];
            }
            m[i * k + j] = s;
        }
    }
    let mut gram = vec![0.0; k * k];
    for i in 0..k {
        for j in 0..k {
            let mut s = 0.0;
            for p in 0..k {
                s += m[p * k + i] * m[p * k + j];
            }
            gram[i * k + j] = s;
        }
    }
    let (eig, _) = jacobi_eigh(&gram, k);
    let min_sv = eig.last().copied().unwrap_or(0.0).max(0.0).sqrt();
    1.0 - min_sv
}

fn gram_schmidt(cols: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for col in cols {
        let mut v = col.clone();
        for b in &basis {
            let dot: f64 = v.iter().zip(b.iter()).map(|(x, y)| x * y).sum();
            for (vi, bi) in v.iter_mut().zip(b.iter()) {
                *vi -= dot * bi;
            }
        }
        let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-10 {
            for x in v.iter_mut() {
                *x /= norm;
            }
            basis.push(v);
        }
    }
    basis
}

/// xorshift64* PRNG for test data that must not depend on library RNG paths.
pub struct TestRng(u64);

impl TestRng {
    pub fn new(seed: u64) -> TestRng {
        TestRng(seed.max(1))
    }

    pub fn next_u64(&mut self) -> u64 {
        let mut x = self.0;
        x ^= x >> 12;
        x ^= x << 25;
        x ^= x >> 27;
        self.0 = x;
        x.wrapping_mul(0x2545F4914F6CDD1D)
    }

    pub fn unit(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 / (1u64 << 53) as f64
    }

    pub fn range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.unit()
    }

    pub fn below(&mut self, n: usize) -> usize {
        (self.next_u64() % n as u64) as usize
    }
}
