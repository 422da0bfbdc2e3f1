use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// A standalone low-rank adapter for an `m × n` base weight used as
/// `x · W`: `A` is `r × n`, `B` is `m × r`, and the delta is `(α/r)·B·A`.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterPair {
    pub a: Matrix,
    pub b: Matrix,
    pub scaling: f64,
}

impl AdapterPair {
    /// Random `A`, zero `B`: the adapter starts as a zero delta.
    pub fn new<R: Rng + ?Sized>(m: usize, n: usize, rank: usize, alpha: f64, rng: &mut R) -> Result<Self> {
        if rank == 0 {
            return Err(Error::Config("adapter rank must be at least 1".into()));
        }
        Ok(AdapterPair {
            a: Matrix::random_normal(rank, n, (1.0 / rank as f64).sqrt(), rng),
            b: Matrix::zeros(m, rank),
            scaling: alpha / rank as f64,
        })
    }

    pub fn rank(&self) -> usize {
        self.a.rows()
    }

    pub fn delta(&self) -> Result<Matrix> {
        Ok(self.b.matmul(&self.a)?.scale(self.scaling))
    }

    pub fn merged(&self, base: &Matrix) -> Result<Matrix> {
        base.add(&self.delta()?)
    }

    /// `x·W + (α/r)·(x·B)·A` without forming the merged weight.
    pub fn apply(&self, x: &Matrix, base: &Matrix) -> Result<Matrix> {
        if base.shape() != (self.b.rows(), self.a.cols()) {
            return Err(Error::dim(
                "apply_adapter",
                format!(
                    "base {:?} does not match adapter {}x{}",
                    base.shape(),
                    self.b.rows(),
                    self.a.cols()
                ),
            ));
        }
        let low = x.matmul(&self.b)?.matmul(&self.a)?.scale(self.scaling);
        x.matmul(base)?.add(&low)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_b_is_identity_and_paths_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = Matrix::random_normal(5, 4, 1.0, &mut rng);
        let x = Matrix::random_normal(3, 5, 1.0, &mut rng);
        let mut ad = AdapterPair::new(5, 4, 2, 4.0, &mut rng).unwrap();
        assert_eq!(ad.apply(&x, &w).unwrap(), x.matmul(&w).unwrap());
        ad.b = Matrix::random_normal(5, 2, 1.0, &mut rng);
        let factored = ad.apply(&x, &w).unwrap();
        let merged = x.matmul(&ad.merged(&w).unwrap()).unwrap();
        assert!(factored.max_abs_diff(&merged) < 1e-12);
        assert!(ad.apply(&x, &Matrix::zeros(4, 4)).is_err());
    }
}
