//! Dense matrices, reverse-mode differentiation, and the finite-difference
//! gradient oracle.

pub mod flops;
mod gradcheck;
mod matrix;
mod params;
mod tape;

pub use gradcheck::{finite_diff_check, numeric_check, GradCheck, WorstCoordinate};
pub use matrix::{gelu, sigmoid, Matrix};
pub use params::{ParamId, ParamStore, Parameter};
pub use tape::{Tape, Var};

use crate::error::{Error, Result};

/// Single-head attention on the tape: `softmax(Q Kᵀ / √d) V`.
/// Returns `(output, weights)`.
pub fn scaled_dot_attention(tape: &mut Tape, q: Var, k: Var, v: Var, d: usize) -> Result<(Var, Var)> {
    attention_impl(tape, q, k, v, d, None)
}

/// As [`scaled_dot_attention`], with `mask[i*keys+j] == false` hiding key
/// `j` from query `i`.
pub fn masked_attention(tape: &mut Tape, q: Var, k: Var, v: Var, d: usize, mask: &[bool]) -> Result<(Var, Var)> {
    attention_impl(tape, q, k, v, d, Some(mask))
}

fn attention_impl(tape: &mut Tape, q: Var, k: Var, v: Var, d: usize, mask: Option<&[bool]>) -> Result<(Var, Var)> {
    let (qm, km, vm) = (tape.value(q), tape.value(k), tape.value(v));
    if qm.cols() != d || km.cols() != d {
        return Err(Error::dim(
            "scaled_dot_attention",
            format!("q {:?}, k {:?}, d = {d}", qm.shape(), km.shape()),
        ));
    }
    if km.rows() != vm.rows() {
        return Err(Error::dim(
            "scaled_dot_attention",
            format!("k {:?} vs v {:?}", km.shape(), vm.shape()),
        ));
    }
    if km.rows() == 0 {
        return Err(Error::Domain("attention over zero keys".into()));
    }
    let kt = tape.transpose(k);
    let logits = tape.matmul(q, kt)?;
    let logits = tape.scale(logits, 1.0 / (d as f64).sqrt());
    let weights = match mask {
        Some(m) => tape.row_softmax_masked(logits, m)?,
        None => tape.row_softmax(logits),
    };
    let out = tape.matmul(weights, v)?;
    Ok((out, weights))
}

/// Tape-free attention on plain matrices, for inference-only paths.
pub fn attention_values(q: &Matrix, k: &Matrix, v: &Matrix, d: usize) -> Result<(Matrix, Matrix)> {
    let mut tape = Tape::new();
    let (qv, kv, vv) = (
        tape.constant(q.clone()),
        tape.constant(k.clone()),
        tape.constant(v.clone()),
    );
    let (o, w) = scaled_dot_attention(&mut tape, qv, kv, vv, d)?;
    Ok((tape.value(o).clone(), tape.value(w).clone()))
}

/// Elementwise operations exposed as plain functions.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Elementwise {
    Sigmoid,
    Gelu,
    Add,
    Scale(f64),
}

pub fn elementwise(op: Elementwise, a: &Matrix, b: Option<&Matrix>) -> Result<Matrix> {
    match op {
        Elementwise::Sigmoid => Ok(a.map(sigmoid)),
        Elementwise::Gelu => Ok(a.map(gelu)),
        Elementwise::Add => {
            let b = b.ok_or_else(|| Error::dim("elementwise add", "missing second operand"))?;
            a.add(b)
        }
        Elementwise::Scale(c) => Ok(a.scale(c)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_key_returns_its_value() {
        let q = Matrix::from_rows(&[[0.3, -1.2], [5.0, 2.0]]);
        let k = Matrix::from_rows(&[[1.0, 0.5]]);
        let v = Matrix::from_rows(&[[7.0, -3.0, 2.0]]);
        let (o, w) = attention_values(&q, &k, &v, 2).unwrap();
        for r in 0..2 {
            assert_eq!(w.get(r, 0), 1.0);
            assert_eq!(o.row(r), v.row(0));
        }
    }

    #[test]
    fn orthogonal_query_gives_column_mean() {
        let q = Matrix::from_rows(&[[1.0, 0.0]]);
        let k = Matrix::from_rows(&[[0.0, 1.0], [0.0, -2.0], [0.0, 3.0]]);
        let v = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0], [5.0, 9.0]]);
        let (o, _) = attention_values(&q, &k, &v, 2).unwrap();
        assert!((o.get(0, 0) - 3.0).abs() < 1e-15);
        assert!((o.get(0, 1) - 5.0).abs() < 1e-15);
    }

    #[test]
    fn attention_matches_straight_line() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let q = Matrix::random_normal(2, 3, 1.0, &mut rng);
        let k = Matrix::random_normal(3, 3, 1.0, &mut rng);
        let v = Matrix::random_normal(3, 2, 1.0, &mut rng);
        let (o, w) = attention_values(&q, &k, &v, 3).unwrap();
        for i in 0..2 {
            let logits: Vec<f64> = (0..3)
                .map(|j| (0..3).map(|p| q.get(i, p) * k.get(j, p)).sum::<f64>() / 3f64.sqrt())
                .collect();
            let z: f64 = logits.iter().map(|l| l.exp()).sum();
            for (j, l) in logits.iter().enumerate() {
                assert!((w.get(i, j) - l.exp() / z).abs() < 1e-12);
            }
            for c in 0..2 {
                let expect: f64 = (0..3).map(|j| logits[j].exp() / z * v.get(j, c)).sum();
                assert!((o.get(i, c) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_shape_errors() {
        let a = Matrix::zeros(2, 3);
        let b = Matrix::zeros(2, 4);
        assert!(matches!(attention_values(&a, &b, &b, 3), Err(Error::Dimension { .. })));
        let v = Matrix::zeros(3, 2);
        assert!(matches!(attention_values(&a, &a, &v, 3), Err(Error::Dimension { .. })));
    }

    #[test]
    fn elementwise_examples() {
        let z = Matrix::zeros(1, 1);
        assert_eq!(elementwise(Elementwise::Sigmoid, &z, None).unwrap().get(0, 0), 0.5);
        assert_eq!(elementwise(Elementwise::Gelu, &z, None).unwrap().get(0, 0), 0.0);
        let a = Matrix::from_rows(&[[1.0, -2.0]]);
        assert_eq!(
            elementwise(Elementwise::Add, &a, Some(&Matrix::zeros(1, 2))).unwrap(),
            a
        );
        assert_eq!(
            elementwise(Elementwise::Scale(2.0), &a, None).unwrap(),
            Matrix::from_rows(&[[2.0, -4.0]])
        );
        assert!(elementwise(Elementwise::Add, &a, Some(&Matrix::zeros(2, 2))).is_err());
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(vals in prop::collection::vec(-1000.0f64..1000.0, 12)) {
            let m = Matrix::new(3, 4, vals).unwrap();
            let s = m.row_softmax();
            for r in 0..3 {
                let total: f64 = s.row(r).iter().sum();
                prop_assert!((total - 1.0).abs() < 1e-9);
                prop_assert!(s.row(r).iter().all(|&v| v >= 0.0));
            }
        }

        #[test]
        fn attention_output_in_convex_hull(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let q = Matrix::random_normal(3, 4, 2.0, &mut rng);
            let k = Matrix::random_normal(5, 4, 2.0, &mut rng);
            let v = Matrix::random_normal(5, 3, 1.0, &mut rng);
            let (o, _) = attention_values(&q, &k, &v, 4).unwrap();
            for c in 0..3 {
                let col: Vec<f64> = (0..5).map(|r| v.get(r, c)).collect();
                let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                for r in 0..3 {
                    prop_assert!(o.get(r, c) >= lo - 1e-12 && o.get(r, c) <= hi + 1e-12);
                }
            }
        }
    }
}
