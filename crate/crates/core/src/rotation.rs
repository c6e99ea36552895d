//! Orthogonal rotations: Sylvester and randomized Hadamard matrices, the Cayley
//! parametrization, and offline fusion into linear weights.
//!
//! For a linear layer `Y = X Wᵀ` and orthogonal `R`, `(X R)(W R)ᵀ = X Wᵀ`, so a
//! rotation on the input side is folded into the weight as `W R`, and one on
//! the output side as `Rᵀ W`.

use crate::error::{Error, Result};
use crate::linalg;
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RotationKind {
    Identity,
    Sylvester,
    Randomized,
    Cayley,
}

/// Where a rotation is fused: residual stream (`R1`) or per attention head
/// between `v_proj` and `o_proj` (`R2`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RotationSite {
    R1,
    R2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FuseSide {
    /// The weight consumes rotated inputs: `W ← W R`.
    Input,
    /// The weight's outputs get rotated: `W ← Rᵀ W`.
    Output,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RotationHandle {
    pub kind: RotationKind,
    pub site: RotationSite,
    pub matrix: Tensor,
    pub cayley_params: Option<Tensor>,
    pub seed: Option<u64>,
}

impl RotationHandle {
    pub fn size(&self) -> usize {
        self.matrix.shape()[0]
    }

    pub fn with_site(mut self, site: RotationSite) -> Self {
        self.site = site;
        self
    }

    pub fn identity(n: usize) -> Self {
        Self {
            kind: RotationKind::Identity,
            site: RotationSite::R1,
            matrix: Tensor::eye(n),
            cayley_params: None,
            seed: None,
        }
    }

    /// `RᵀR` or `R`-transpose product: `‖RᵀR − I‖∞`.
    pub fn orthogonality_error(&self) -> f32 {
        orthogonality_error(&self.matrix)
    }
}

/// Largest entry of `|RᵀR − I|`.
pub fn orthogonality_error(r: &Tensor) -> f32 {
    let n = r.shape()[0];
    let rtr = r.transpose().and_then(|t| t.matmul(r)).expect("square matrix");
    rtr.sub(&Tensor::eye(n)).expect("same shape").abs_max()
}

fn check_pow2(n: usize) -> Result<()> {
    if n == 0 || !n.is_power_of_two() {
        return Err(Error::Argument(format!("Hadamard size {n} is not a power of two")));
    }
    Ok(())
}

/// Sylvester construction normalized by `1/√n`, so `HᵀH = I`.
pub fn sylvester_hadamard(n: usize) -> Result<RotationHandle> {
    check_pow2(n)?;
    let mut h = vec![1.0f32];
    let mut size = 1;
    while size < n {
        let next = size * 2;
        let mut out = vec![0.0f32; next * next];
        for i in 0..size {
            for j in 0..size {
                let v = h[i * size + j];
                out[i * next + j] = v;
                out[i * next + j + size] = v;
                out[(i + size) * next + j] = v;
                out[(i + size) * next + j + size] = -v;
            }
        }
        h = out;
        size = next;
    }
    let norm = 1.0 / (n as f32).sqrt();
    for v in &mut h {
        *v *= norm;
    }
    Ok(RotationHandle {
        kind: RotationKind::Sylvester,
        site: RotationSite::R1,
        matrix: Tensor::new(vec![n, n], h)?,
        cayley_params: None,
        seed: None,
    })
}

/// `D · H` with an explicit ±1 diagonal.
pub fn randomized_hadamard_with_signs(signs: &[f32]) -> Result<RotationHandle> {
    if signs.iter().any(|s| *s != 1.0 && *s != -1.0) {
        return Err(Error::Argument("diagonal entries must be ±1".into()));
    }
    let h = sylvester_hadamard(signs.len())?;
    Ok(RotationHandle {
        kind: RotationKind::Randomized,
        matrix: h.matrix.scale_rows(signs)?,
        ..h
    })
}

/// `D · H` with the diagonal drawn from a seeded generator.
pub fn randomized_hadamard(n: usize, seed: u64) -> Result<RotationHandle> {
    check_pow2(n)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let signs: Vec<f32> = (0..n).map(|_| if rng.random_bool(0.5) { 1.0 } else { -1.0 }).collect();
    let mut r = randomized_hadamard_with_signs(&signs)?;
    r.seed = Some(seed);
    Ok(r)
}

/// Number of free parameters of an `n × n` skew-symmetric matrix.
pub fn num_cayley_params(n: usize) -> usize {
    n * n.saturating_sub(1) / 2
}

/// Strict upper triangle of a skew-symmetric matrix, row-major.
pub fn skew_params(a: &Tensor) -> Result<Tensor> {
    let (n, m) = a.dims2()?;
    if n != m || n < 2 {
        return Err(Error::Dimension(format!("skew-symmetric parameters must be square n>=2, got {n}x{m}")));
    }
    let mut out = Vec::with_capacity(num_cayley_params(n));
    for i in 0..n {
        if a.get2(i, i) != 0.0 {
            return Err(Error::Argument("skew-symmetric matrix has a non-zero diagonal".into()));
        }
        for j in i + 1..n {
            if a.get2(i, j) != -a.get2(j, i) {
                return Err(Error::Argument(format!("entry ({i},{j}) is not mirrored with a sign flip")));
            }
            out.push(a.get2(i, j));
        }
    }
    Tensor::from_vec(out)
}

/// `(I − A)(I + A)⁻¹` for a skew-symmetric `A`.
pub fn cayley_rotation(a: &Tensor) -> Result<RotationHandle> {
    let theta = skew_params(a)?;
    cayley_from_params(&theta, a.shape()[0])
}

pub fn cayley_from_params(theta: &Tensor, n: usize) -> Result<RotationHandle> {
    if n < 2 || theta.len() != num_cayley_params(n) {
        return Err(Error::Dimension(format!("{} Cayley parameters for n = {n}", theta.len())));
    }
    let (matrix, _) = linalg::cayley_forward(theta.data(), n)?;
    Ok(RotationHandle {
        kind: RotationKind::Cayley,
        site: RotationSite::R1,
        matrix,
        cayley_params: Some(theta.clone()),
        seed: None,
    })
}

/// Folds a rotation into a weight stored `[out_features × in_features]`.
pub fn fuse_into_weight(w: &Tensor, r: &RotationHandle, side: FuseSide) -> Result<Tensor> {
    let (rows, cols) = w.dims2()?;
    let n = r.size();
    match side {
        FuseSide::Input => {
            if cols != n {
                return Err(Error::Dimension(format!("input-side fusion: weight has {cols} inputs, rotation is {n}")));
            }
            w.matmul(&r.matrix)
        }
        FuseSide::Output => {
            if rows != n {
                return Err(Error::Dimension(format!("output-side fusion: weight has {rows} outputs, rotation is {n}")));
            }
            r.matrix.transpose()?.matmul(w)
        }
    }
}

/// Norm and mean of a flattened vector before and after rotation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RotationStats {
    pub norm_ratio: f64,
    pub mean_in: f64,
    pub mean_out: f64,
}

pub fn rotation_stat_check(x: &Tensor, r: &RotationHandle) -> Result<RotationStats> {
    let n = x.len();
    if r.size() != n {
        return Err(Error::Dimension(format!("vector of length {n} for a {0}x{0} rotation", r.size())));
    }
    let col = x.reshape(&[n, 1])?;
    let y = r.matrix.matmul(&col)?;
    let norm = |t: &Tensor| t.data().iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
    let mean = |t: &Tensor| t.data().iter().map(|&v| v as f64).sum::<f64>() / n as f64;
    let nx = norm(x);
    Ok(RotationStats {
        norm_ratio: if nx > 0.0 { norm(&y) / nx } else { 1.0 },
        mean_in: mean(x),
        mean_out: mean(&y),
    })
}

/// A rotation learned as `base · cayley(θ)`; with `θ = 0` it equals `base`.
#[derive(Debug, Clone, PartialEq)]
pub struct LearnableRotation {
    pub site: RotationSite,
    pub base: RotationHandle,
    pub theta: Tensor,
    pub learnable: bool,
}

impl LearnableRotation {
    pub fn new(base: RotationHandle, site: RotationSite, learnable: bool) -> Self {
        let n = base.size();
        Self {
            site,
            theta: Tensor::zeros(&[num_cayley_params(n).max(1)]),
            base: base.with_site(site),
            learnable: learnable && n >= 2,
        }
    }

    pub fn size(&self) -> usize {
        self.base.size()
    }

    /// Current rotation matrix.
    pub fn matrix(&self) -> Result<Tensor> {
        if !self.learnable {
            return Ok(self.base.matrix.clone());
        }
        let c = cayley_from_params(&self.theta, self.size())?;
        self.base.matrix.matmul(&c.matrix)
    }

    pub fn handle(&self) -> Result<RotationHandle> {
        Ok(RotationHandle {
            kind: if self.learnable { RotationKind::Cayley } else { self.base.kind },
            site: self.site,
            matrix: self.matrix()?,
            cayley_params: self.learnable.then(|| self.theta.clone()),
            seed: self.base.seed,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn small_hadamards() {
        assert_eq!(sylvester_hadamard(1).unwrap().matrix.data(), &[1.0]);
        let h = sylvester_hadamard(2).unwrap();
        let k = 1.0 / 2f32.sqrt();
        assert_eq!(h.matrix.data(), &[k, k, k, -k]);
        let h = sylvester_hadamard(8).unwrap();
        let e = 1.0 / 8f32.sqrt();
        assert!(h.matrix.data().iter().all(|v| *v == e || *v == -e));
        assert!(h.orthogonality_error() <= 1e-6);
        assert!(sylvester_hadamard(12).is_err());
        assert!(sylvester_hadamard(0).is_err());
    }

    #[test]
    fn randomized_is_deterministic_and_orthogonal() {
        let a = randomized_hadamard(16, 9).unwrap();
        let b = randomized_hadamard(16, 9).unwrap();
        assert_eq!(a.matrix, b.matrix);
        for seed in 0..10 {
            assert!(randomized_hadamard(4, seed).unwrap().orthogonality_error() <= 1e-6);
        }
        let plain = randomized_hadamard_with_signs(&[1.0; 8]).unwrap();
        assert_eq!(plain.matrix, sylvester_hadamard(8).unwrap().matrix);
    }

    #[test]
    fn cayley_basics() {
        let r = cayley_rotation(&Tensor::zeros(&[3, 3])).unwrap();
        assert_eq!(r.matrix, Tensor::eye(3));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let theta = Tensor::from_fn(&[28], |_| rng.random_range(-0.1..0.1));
        let r = cayley_from_params(&theta, 8).unwrap();
        assert!(r.orthogonality_error() <= 1e-5);
        let mut not_skew = Tensor::zeros(&[2, 2]);
        not_skew.data_mut()[1] = 1.0;
        assert!(cayley_rotation(&not_skew).is_err());
    }

    #[test]
    fn fusion_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::from_fn(&[4, 8], |_| rng.random_range(-1.0..1.0));
        let w = Tensor::from_fn(&[8, 8], |_| rng.random_range(-1.0..1.0));
        let id = RotationHandle::identity(8);
        assert_eq!(fuse_into_weight(&w, &id, FuseSide::Input).unwrap(), w);
        let r = randomized_hadamard(8, 5).unwrap();
        let fused = fuse_into_weight(&w, &r, FuseSide::Input).unwrap();
        let lhs = x.matmul(&r.matrix).unwrap().matmul_nt(&fused).unwrap();
        let rhs = x.matmul_nt(&w).unwrap();
        assert!(lhs.max_abs_diff(&rhs).unwrap() <= 1e-5);
        let rt = RotationHandle { matrix: r.matrix.transpose().unwrap(), ..r.clone() };
        let back = fuse_into_weight(&fused, &rt, FuseSide::Input).unwrap();
        assert!(back.max_abs_diff(&w).unwrap() <= 1e-5);
        let out = fuse_into_weight(&w, &r, FuseSide::Output).unwrap();
        assert!(out.max_abs_diff(&r.matrix.transpose().unwrap().matmul(&w).unwrap()).unwrap() == 0.0);
        assert!(fuse_into_weight(&Tensor::zeros(&[8, 4]), &r, FuseSide::Input).is_err());
    }

    #[test]
    fn stat_check_identity_and_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::from_fn(&[16], |_| StandardNormal.sample(&mut rng));
        let s = rotation_stat_check(&x, &RotationHandle::identity(16)).unwrap();
        assert_eq!(s.mean_in, s.mean_out);
        let s = rotation_stat_check(&x, &randomized_hadamard(16, 3).unwrap()).unwrap();
        assert!((s.norm_ratio - 1.0).abs() <= 1e-5);
    }

    #[test]
    fn learnable_starts_at_base() {
        let base = randomized_hadamard(8, 1).unwrap();
        let lr = LearnableRotation::new(base.clone(), RotationSite::R2, true);
        assert!(lr.matrix().unwrap().max_abs_diff(&base.matrix).unwrap() == 0.0);
        assert_eq!(lr.handle().unwrap().site, RotationSite::R2);
    }
}
