use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Cosine similarity of two flat vectors, with the zero-norm convention:
/// if either vector has zero norm the similarity is 0.
pub fn cosine<T: Scalar>(a: &[T], b: &[T]) -> Result<T> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Shape(format!("cosine: lengths {} vs {}", a.len(), b.len())));
    }
    let mut dot = 0.0f64;
    let mut na = 0.0f64;
    let mut nb = 0.0f64;
    for (x, y) in a.iter().zip(b) {
        let (x, y) = (x.to64(), y.to64());
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Ok(T::zero());
    }
    Ok(T::of((dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn self_similarity_is_one() {
        let v = [0.3f64, -1.2, 4.0, 0.01];
        assert!((cosine(&v, &v).unwrap() - 1.0).abs() < 1e-12);
        let neg: Vec<f64> = v.iter().map(|x| -x).collect();
        assert!((cosine(&v, &neg).unwrap() + 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_norm_convention() {
        let z = [0.0f64; 3];
        let v = [1.0f64, 2.0, 3.0];
        assert_eq!(cosine(&z, &v).unwrap(), 0.0);
        assert_eq!(cosine(&v, &z).unwrap(), 0.0);
    }

    #[test]
    fn length_mismatch_is_shape_error() {
        assert!(cosine(&[1.0f64], &[1.0, 2.0]).is_err());
        assert!(cosine::<f64>(&[], &[]).is_err());
    }
}
