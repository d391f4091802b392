//! Checked scalar/vector primitives shared by the oracle tests and the CLI.

use crate::autodiff::{softmax_in_place, Tape, Var};
use crate::error::{Error, Result};

pub fn softmax_stable(x: &[f64]) -> Result<Vec<f64>> {
    if x.is_empty() {
        return Err(Error::DimensionMismatch("softmax of empty vector".into()));
    }
    if !x.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFiniteLogits);
    }
    let mut y = x.to_vec();
    softmax_in_place(&mut y);
    Ok(y)
}

/// Plain cosine; zero-norm inputs are rejected rather than clamped.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch(format!(
            "cosine of {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroNorm);
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok(dot / (na * nb))
}

/// Differentiable row-wise cosine between `a[m, d]` and `b[m, d]` → `[m]`.
pub fn cosine_rows(t: &mut Tape, a: Var, b: Var) -> Result<Var> {
    for v in [a, b] {
        let d = t.cols(v);
        if t.value(v).chunks(d).any(|r| r.iter().all(|x| *x == 0.0)) {
            return Err(Error::ZeroNorm);
        }
    }
    let an = t.normalize_rows(a, 0.0);
    let bn = t.normalize_rows(b, 0.0);
    let p = t.mul(an, bn)?;
    let s = t.sum_cols(p);
    let m = t.rows(s);
    t.reshape(s, &[m])
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(x: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in x.iter().enumerate() {
        if v > x[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;
    use crate::tensor::Tensor;

    #[test]
    fn softmax_anchors() {
        assert_eq!(softmax_stable(&[0.0, 0.0]).unwrap(), vec![0.5, 0.5]);
        let big = softmax_stable(&[1000.0; 3]).unwrap();
        assert!(big.iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));
        let y = softmax_stable(&[1.0, 2.0, 3.0]).unwrap();
        // exp(k - 3) / (e^-2 + e^-1 + 1), evaluated independently
        let z = (-2f64).exp() + (-1f64).exp() + 1.0;
        let want = [(-2f64).exp() / z, (-1f64).exp() / z, 1.0 / z];
        for (a, b) in y.iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
        for (a, b) in y.iter().zip([0.09003057, 0.24472847, 0.66524096]) {
            assert!((a - b).abs() < 5e-9);
        }
        assert!(matches!(
            softmax_stable(&[1.0, f64::NAN]),
            Err(Error::NonFiniteLogits)
        ));
        assert!(matches!(
            softmax_stable(&[f64::INFINITY]),
            Err(Error::NonFiniteLogits)
        ));
    }

    #[test]
    fn cosine_anchors() {
        assert_eq!(cosine_similarity(&[3.0, 4.0], &[3.0, 4.0]).unwrap(), 1.0);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!((cosine_similarity(&[1.0, 2.0], &[2.0, 1.0]).unwrap() - 0.8).abs() < 1e-15);
        let err = cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]).unwrap_err();
        assert_eq!(err.to_string(), "zero-norm vector");
    }

    #[test]
    fn cosine_rows_gradcheck_and_zero_norm() {
        let a = Tensor::matrix(
            3,
            4,
            vec![
                0.3, -1.2, 0.5, 0.8, 1.1, 0.2, -0.4, 0.9, -0.6, 0.7, 0.1, -1.3,
            ],
        )
        .unwrap();
        let b = Tensor::matrix(
            3,
            4,
            vec![
                0.9, 0.4, -0.2, 0.1, -0.5, 1.4, 0.3, 0.6, 0.2, -0.8, 1.0, 0.4,
            ],
        )
        .unwrap();
        let r = grad_check(
            |t, v| {
                let c = cosine_rows(t, v[0], v[1])?;
                let w = t.constant(&[3], vec![0.7, -1.3, 0.4])?;
                let p = t.mul(c, w)?;
                Ok(t.sum(p))
            },
            &[a.clone(), b],
            1e-5,
        )
        .unwrap();
        assert!(r.pass, "{r:?}");
        let mut t = Tape::new();
        let av = t.leaf(&a);
        let z = t.constant(&[3, 4], vec![0.0; 12]).unwrap();
        assert!(matches!(cosine_rows(&mut t, av, z), Err(Error::ZeroNorm)));
    }

    #[test]
    fn argmax_prefers_lowest_index() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[0.0, 0.0]), 0);
    }
}
