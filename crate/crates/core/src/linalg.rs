//! Thin Householder QR.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Thin factorization `A = Q R` with `Q: m x n` orthonormal columns and
/// `R: n x n` upper triangular.
#[derive(Debug, Clone)]
pub struct ThinQr {
    pub q: Tensor,
    pub r: Tensor,
}

impl ThinQr {
    /// Ratio of the smallest to the largest `|R_jj|`. Zero for rank-deficient input.
    pub fn diag_ratio(&self) -> f64 {
        let n = self.r.rows();
        let diag: Vec<f64> = (0..n).map(|j| self.r.at(j, j).abs()).collect();
        let max = diag.iter().copied().fold(0.0, f64::max);
        if max == 0.0 {
            return 0.0;
        }
        diag.iter().copied().fold(f64::INFINITY, f64::min) / max
    }
}

/// Householder QR of a tall matrix (`rows >= cols`).
pub fn thin_qr(a: &Tensor) -> Result<ThinQr> {
    let (m, n) = a.dims2();
    if m < n {
        return Err(Error::contract(format!(
            "thin QR needs rows >= cols, got {m}x{n}"
        )));
    }
    let mut r = a.data().to_vec();
    // Householder vectors, one per column, stored densely.
    let mut vs: Vec<Vec<f64>> = Vec::with_capacity(n);

    for j in 0..n {
        let norm: f64 = (j..m).map(|i| r[i * n + j].powi(2)).sum::<f64>().sqrt();
        let mut v = vec![0.0; m];
        if norm == 0.0 {
            vs.push(v);
            continue;
        }
        let x0 = r[j * n + j];
        let alpha = if x0 >= 0.0 { -norm } else { norm };
        for i in j..m {
            v[i] = r[i * n + j];
        }
        v[j] -= alpha;
        let vnorm2: f64 = v[j..].iter().map(|x| x * x).sum();
        if vnorm2 > 0.0 {
            for c in j..n {
                let dot: f64 = (j..m).map(|i| v[i] * r[i * n + c]).sum();
                let f = 2.0 * dot / vnorm2;
                for i in j..m {
                    r[i * n + c] -= f * v[i];
                }
            }
        }
        vs.push(v);
    }

    // Accumulate Q = H_0 H_1 ... H_{n-1} applied to the first n columns of I.
    let mut q = vec![0.0; m * n];
    for i in 0..n {
        q[i * n + i] = 1.0;
    }
    for j in (0..n).rev() {
        let v = &vs[j];
        let vnorm2: f64 = v[j..].iter().map(|x| x * x).sum();
        if vnorm2 == 0.0 {
            continue;
        }
        for c in 0..n {
            let dot: f64 = (j..m).map(|i| v[i] * q[i * n + c]).sum();
            let f = 2.0 * dot / vnorm2;
            for i in j..m {
                q[i * n + c] -= f * v[i];
            }
        }
    }

    let mut r_top = vec![0.0; n * n];
    for i in 0..n {
        for c in i..n {
            r_top[i * n + c] = r[i * n + c];
        }
    }
    Ok(ThinQr {
        q: Tensor::from_vec(&[m, n], q)?,
        r: Tensor::from_vec(&[n, n], r_top)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn reconstructs_and_is_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for &(m, n) in &[(8, 2), (5, 5), (16, 3), (3, 1)] {
            let a = Tensor::randn(&[m, n], 1.0, &mut rng);
            let qr = thin_qr(&a).unwrap();
            let back = qr.q.matmul(&qr.r).unwrap();
            assert!(back.max_abs_diff(&a).unwrap() < 1e-12);
            let qtq = qr.q.transpose().matmul(&qr.q).unwrap();
            assert!(qtq.max_abs_diff(&Tensor::identity(n)).unwrap() < 1e-12);
            for i in 0..n {
                for j in 0..i {
                    assert_eq!(qr.r.at(i, j), 0.0);
                }
            }
        }
    }

    #[test]
    fn rank_deficient_input_has_tiny_ratio() {
        let a = Tensor::from_rows(&[&[1.0, 2.0], &[2.0, 4.0], &[3.0, 6.0]]);
        let qr = thin_qr(&a).unwrap();
        assert!(qr.diag_ratio() < 1e-12);
    }

    #[test]
    fn wide_input_is_rejected() {
        assert!(thin_qr(&Tensor::zeros(&[2, 3])).is_err());
    }
}
