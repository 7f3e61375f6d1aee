//! Numerical verification utilities: central finite differences and a small
//! dense linear solver. These are deliberately independent of the graph
//! backward pass so they can serve as oracles for it.

use crate::tensor::Tensor;

/// Central finite-difference gradient of a scalar function, one tensor of
/// partials per input, step `h` per coordinate.
pub fn central_diff<F>(f: F, inputs: &[Tensor], h: f64) -> Vec<Tensor>
where
    F: Fn(&[Tensor]) -> f64,
{
    let mut grads = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut g = Tensor::zeros(inputs[i].shape());
        for j in 0..inputs[i].numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += h;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= h;
            g.data_mut()[j] = (f(&plus) - f(&minus)) / (2.0 * h);
        }
        grads.push(g);
    }
    grads
}

/// Relative error with an absolute floor of 1, so tiny reference values are
/// judged on absolute error.
pub fn rel_err(got: f64, want: f64) -> f64 {
    (got - want).abs() / want.abs().max(1.0)
}

/// Largest `rel_err` over paired slices.
pub fn max_rel_err(got: &[f64], want: &[f64]) -> f64 {
    assert_eq!(got.len(), want.len(), "length mismatch in comparison");
    got.iter()
        .zip(want)
        .map(|(&g, &w)| rel_err(g, w))
        .fold(0.0, f64::max)
}

/// Solve `A x = b` for dense square `A` by Gaussian elimination with partial
/// pivoting. Oracle-grade: used to check iterative inverse-Hessian products.
pub fn gauss_solve(a: &[Vec<f64>], b: &[f64]) -> Vec<f64> {
    let n = b.len();
    assert!(a.len() == n && a.iter().all(|r| r.len() == n), "square system");
    let mut m: Vec<Vec<f64>> = a.to_vec();
    let mut x: Vec<f64> = b.to_vec();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| m[i][col].abs().partial_cmp(&m[j][col].abs()).unwrap())
            .unwrap();
        m.swap(col, pivot);
        x.swap(col, pivot);
        let diag = m[col][col];
        assert!(diag.abs() > 1e-300, "singular system");
        for row in col + 1..n {
            let factor = m[row][col] / diag;
            if factor == 0.0 {
                continue;
            }
            for k in col..n {
                m[row][k] -= factor * m[col][k];
            }
            x[row] -= factor * x[col];
        }
    }
    for col in (0..n).rev() {
        x[col] /= m[col][col];
        for row in 0..col {
            x[row] -= m[row][col] * x[col];
            m[row][col] = 0.0;
        }
    }
    x
}

/// Largest eigenvalue of a symmetric positive-definite matrix by power
/// iteration.
pub fn spd_lambda_max(a: &[Vec<f64>]) -> f64 {
    let n = a.len();
    let mut v = vec![1.0 / (n as f64).sqrt(); n];
    let mut lambda = 0.0;
    for _ in 0..500 {
        let mut av = vec![0.0; n];
        for i in 0..n {
            for j in 0..n {
                av[i] += a[i][j] * v[j];
            }
        }
        let norm = av.iter().map(|x| x * x).sum::<f64>().sqrt();
        lambda = norm;
        for i in 0..n {
            v[i] = av[i] / norm;
        }
    }
    lambda
}
