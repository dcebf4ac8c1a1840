use rayon::prelude::*;

use crate::error::{Error, Result};

/// Symmetric positive definite operator with a preconditioner.
pub trait LinearOperator: Sync {
    fn dim(&self) -> usize;
    fn apply(&self, x: &[f64], y: &mut [f64]);
    fn precondition(&self, r: &[f64], z: &mut [f64]);
}

/// Fixed-size chunks keep the summation order independent of thread count.
const DOT_CHUNK: usize = 4096;

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    if a.len() <= DOT_CHUNK {
        return a.iter().zip(b).map(|(x, y)| x * y).sum();
    }
    let partials: Vec<f64> = a
        .par_chunks(DOT_CHUNK)
        .zip(b.par_chunks(DOT_CHUNK))
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p * q).sum::<f64>())
        .collect();
    partials.iter().sum()
}

#[derive(Clone, Debug, PartialEq)]
pub struct PcgResult {
    pub x: Vec<f64>,
    /// `x^T A x / 2 - b^T x` after every iteration.
    pub model: Vec<f64>,
    /// `sqrt(r^T M^-1 r)` before the first and after every iteration.
    pub residual_norms: Vec<f64>,
}

/// Runs `iters` preconditioned CG iterations from `x = 0`. Stops early only
/// when the residual vanishes exactly.
pub fn pcg(op: &impl LinearOperator, b: &[f64], iters: usize) -> Result<PcgResult> {
    let n = op.dim();
    assert_eq!(b.len(), n);
    let mut x = vec![0.0; n];
    let mut r = b.to_vec();
    let mut z = vec![0.0; n];
    let mut ap = vec![0.0; n];
    op.precondition(&r, &mut z);
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let initial = rz.max(0.0).sqrt();
    let mut out = PcgResult {
        x: Vec::new(),
        model: Vec::with_capacity(iters),
        residual_norms: vec![initial],
    };
    for iteration in 0..iters {
        if rz == 0.0 {
            break;
        }
        op.apply(&p, &mut ap);
        let curvature = dot(&p, &ap);
        if !(curvature > 0.0) {
            return Err(Error::NotPositiveDefinite { iteration, curvature });
        }
        let alpha = rz / curvature;
        x.iter_mut().zip(&p).for_each(|(xi, pi)| *xi += alpha * pi);
        r.iter_mut().zip(&ap).for_each(|(ri, api)| *ri -= alpha * api);
        op.precondition(&r, &mut z);
        let rz_new = dot(&r, &z);
        let current = rz_new.max(0.0).sqrt();
        if !current.is_finite() || current > 10.0 * initial {
            return Err(Error::PcgDiverged {
                iteration,
                initial,
                current,
            });
        }
        out.residual_norms.push(current);
        // for CG from zero, q(x) = -x^T (b + r) / 2
        let q = -0.5 * (dot(&x, b) + dot(&x, &r));
        out.model.push(q);
        let beta = rz_new / rz;
        rz = rz_new;
        p.iter_mut().zip(&z).for_each(|(pi, zi)| *pi = zi + beta * *pi);
    }
    out.x = x;
    Ok(out)
}

/// Dense operator with a block-diagonal Jacobi preconditioner, for tests and
/// small experiments.
pub struct DenseOperator {
    pub a: nalgebra::DMatrix<f64>,
    inv_blocks: Vec<nalgebra::DMatrix<f64>>,
    block: usize,
}

impl DenseOperator {
    pub fn new(a: nalgebra::DMatrix<f64>, block: usize) -> Self {
        assert!(a.is_square() && block >= 1 && a.nrows() % block == 0);
        let inv_blocks = (0..a.nrows() / block)
            .map(|i| {
                let d = a.view((i * block, i * block), (block, block)).into_owned();
                d.clone().try_inverse().unwrap_or_else(|| nalgebra::DMatrix::identity(block, block))
            })
            .collect();
        DenseOperator { a, inv_blocks, block }
    }
}

impl LinearOperator for DenseOperator {
    fn dim(&self) -> usize {
        self.a.nrows()
    }

    fn apply(&self, x: &[f64], y: &mut [f64]) {
        let v = &self.a * nalgebra::DVector::from_column_slice(x);
        y.copy_from_slice(v.as_slice());
    }

    fn precondition(&self, r: &[f64], z: &mut [f64]) {
        let b = self.block;
        for (i, inv) in self.inv_blocks.iter().enumerate() {
            let v = inv * nalgebra::DVector::from_column_slice(&r[i * b..(i + 1) * b]);
            z[i * b..(i + 1) * b].copy_from_slice(v.as_slice());
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DMatrix, DVector};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_system_one_step() {
        let op = DenseOperator::new(DMatrix::identity(4, 4), 2);
        let b = [1.0, -2.0, 3.0, 0.5];
        let res = pcg(&op, &b, 1).unwrap();
        assert_eq!(res.x, b.to_vec());
    }

    #[test]
    fn diagonal_system_one_step() {
        let a = DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 5.0, 0.5, 9.0]));
        let op = DenseOperator::new(a, 2);
        let b = [1.0, 1.0, 1.0, 1.0];
        let res = pcg(&op, &b, 1).unwrap();
        for (x, d) in res.x.iter().zip([2.0, 5.0, 0.5, 9.0]) {
            assert!((x - 1.0 / d).abs() < 1e-14);
        }
    }

    #[test]
    fn random_spd_matches_direct_solve() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = DMatrix::from_fn(30, 30, |_, _| rng.gen_range(-1.0..1.0));
        let a = &m * m.transpose() / 30.0 + DMatrix::identity(30, 30);
        let b: Vec<f64> = (0..30).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let direct = a.clone().cholesky().unwrap().solve(&DVector::from_vec(b.clone()));
        let res = pcg(&DenseOperator::new(a, 2), &b, 30).unwrap();
        let err = (DVector::from_vec(res.x) - &direct).norm() / direct.norm();
        assert!(err < 1e-6, "{err}");
        // the quadratic model never increases
        assert!(res.model.windows(2).all(|w| w[1] <= w[0] + 1e-12));
    }

    #[test]
    fn indefinite_system_is_reported() {
        let a = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, -1.0]));
        let err = pcg(&DenseOperator::new(a, 1), &[0.0, 1.0], 3).unwrap_err();
        assert!(err.is_solver_failure(), "{err}");
    }

    #[test]
    fn dot_is_chunk_deterministic() {
        let a: Vec<f64> = (0..10_000).map(|i| (i as f64 * 0.37).sin()).collect();
        let d1 = dot(&a, &a);
        let d2 = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .unwrap()
            .install(|| dot(&a, &a));
        assert_eq!(d1.to_bits(), d2.to_bits());
    }
}
