//! Dense inverse and the Cayley transform used for learnable rotations.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Condition numbers above this are treated as singular.
pub const MAX_CONDITION: f64 = 1e8;

fn norm1(m: &[f64], n: usize) -> f64 {
    (0..n).map(|j| (0..n).map(|i| m[i * n + j].abs()).sum::<f64>()).fold(0.0, f64::max)
}

/// Gauss-Jordan inverse with partial pivoting. The pivot is the first row
/// holding the largest magnitude in the column, so ties resolve identically
/// on every run.
pub fn invert(m: &[f64], n: usize) -> Result<Vec<f64>> {
    let mut a = m.to_vec();
    let mut inv = vec![0.0; n * n];
    for i in 0..n {
        inv[i * n + i] = 1.0;
    }
    for col in 0..n {
        let mut piv = col;
        for r in col + 1..n {
            if a[r * n + col].abs() > a[piv * n + col].abs() {
                piv = r;
            }
        }
        if a[piv * n + col] == 0.0 {
            return Err(Error::Singular(f64::INFINITY));
        }
        if piv != col {
            for j in 0..n {
                a.swap(col * n + j, piv * n + j);
                inv.swap(col * n + j, piv * n + j);
            }
        }
        let d = a[col * n + col];
        for j in 0..n {
            a[col * n + j] /= d;
            inv[col * n + j] /= d;
        }
        for r in 0..n {
            if r == col {
                continue;
            }
            let f = a[r * n + col];
            if f != 0.0 {
                for j in 0..n {
                    a[r * n + j] -= f * a[col * n + j];
                    inv[r * n + j] -= f * inv[col * n + j];
                }
            }
        }
    }
    let cond = norm1(m, n) * norm1(&inv, n);
    if !cond.is_finite() || cond > MAX_CONDITION {
        return Err(Error::Singular(cond));
    }
    Ok(inv)
}

/// Skew-symmetric `A` from the row-major strict upper triangle.
pub fn skew_from_params(theta: &[f32], n: usize) -> Vec<f64> {
    let mut a = vec![0.0f64; n * n];
    let mut k = 0;
    for i in 0..n {
        for j in i + 1..n {
            let v = theta[k] as f64;
            a[i * n + j] = v;
            a[j * n + i] = -v;
            k += 1;
        }
    }
    a
}

fn matmul64(a: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for p in 0..n {
            let av = a[i * n + p];
            for j in 0..n {
                out[i * n + j] += av * b[p * n + j];
            }
        }
    }
    out
}

/// Returns `R = (I − A)(I + A)⁻¹` and `(I + A)⁻¹`.
pub fn cayley_forward(theta: &[f32], n: usize) -> Result<(Tensor, Tensor)> {
    let a = skew_from_params(theta, n);
    let mut plus = a.clone();
    let mut minus = a.iter().map(|v| -v).collect::<Vec<_>>();
    for i in 0..n {
        plus[i * n + i] += 1.0;
        minus[i * n + i] += 1.0;
    }
    let inv = invert(&plus, n)?;
    let r = matmul64(&minus, &inv, n);
    let to_t = |v: Vec<f64>| Tensor::new(vec![n, n], v.into_iter().map(|x| x as f32).collect());
    Ok((to_t(r)?, to_t(inv)?))
}

/// Gradient with respect to the free parameters given `G = ∂L/∂R`.
///
/// `dR = −(I + R) dA (I + A)⁻¹`, hence `∂L/∂A = −(I + R)ᵀ G (I + A)⁻ᵀ`, and each
/// free parameter collects `∂L/∂A_ij − ∂L/∂A_ji`.
pub fn cayley_backward(r: &Tensor, inv: &Tensor, g: &Tensor) -> Result<Tensor> {
    let (n, _) = r.dims2()?;
    let mut ipr_t = r.transpose()?;
    for i in 0..n {
        ipr_t.data_mut()[i * n + i] += 1.0;
    }
    let ga = ipr_t.matmul(g)?.matmul(&inv.transpose()?)?;
    let mut out = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            out.push(-(ga.get2(i, j) - ga.get2(j, i)));
        }
    }
    if out.is_empty() {
        return Err(Error::Dimension("cayley rotation needs n >= 2".into()));
    }
    Tensor::from_vec(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inverse_of_known_matrix() {
        let m = [4.0, 7.0, 2.0, 6.0];
        let inv = invert(&m, 2).unwrap();
        let expect = [0.6, -0.7, -0.2, 0.4];
        for (a, b) in inv.iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn singular_detected() {
        assert!(matches!(invert(&[1.0, 2.0, 2.0, 4.0], 2), Err(Error::Singular(_))));
        assert!(matches!(invert(&[1.0, 0.0, 0.0, 1e-12], 2), Err(Error::Singular(_))));
    }

    #[test]
    fn cayley_of_zero_is_identity() {
        let (r, _) = cayley_forward(&[0.0; 6], 4).unwrap();
        assert_eq!(r, Tensor::eye(4));
    }
}
