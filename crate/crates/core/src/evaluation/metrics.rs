use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};

/// Slack on the Within-1 boundary so decimal scores such as 3.4 vs 4.4
/// count as exactly one apart.
pub const WITHIN1_SLACK: f64 = 1e-9;

/// True when `|pred − gt| ≤ 1` (inclusive, up to [`WITHIN1_SLACK`]).
pub fn within1(pred: f64, gt: f64) -> Result<bool> {
    if !pred.is_finite() || !gt.is_finite() {
        return Err(Error::NonFinite(format!("within1({pred}, {gt})")));
    }
    Ok((pred - gt).abs() <= 1.0 + WITHIN1_SLACK)
}

/// Expected score `Σ s·p_s` over scores `1..=len`.
pub fn malignancy_scalar<T: Scalar>(dist: &[T]) -> f64 {
    dist.iter().enumerate().map(|(i, p)| (i + 1) as f64 * p.as_f64()).sum()
}

/// Dice overlap after thresholding both planes at one half; two empty
/// planes score 1.
pub fn dice<T: Scalar, U: Scalar>(pred: &Tensor<T>, mask: &Tensor<U>) -> Result<f64> {
    if pred.shape() != mask.shape() {
        return Err(Error::shape("dice", format!("{:?} vs {:?}", pred.shape(), mask.shape())));
    }
    let half_t = T::of(0.5);
    let half_u = U::of(0.5);
    let (mut inter, mut p_n, mut m_n) = (0usize, 0usize, 0usize);
    for (&p, &m) in pred.data().iter().zip(mask.data()) {
        let (p, m) = (p >= half_t, m >= half_u);
        inter += (p && m) as usize;
        p_n += p as usize;
        m_n += m as usize;
    }
    if p_n + m_n == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (p_n + m_n) as f64)
}

/// Fraction of pairs within one score of each other.
pub fn within1_accuracy(pairs: impl IntoIterator<Item = (f64, f64)>) -> Result<f64> {
    let (mut hit, mut n) = (0usize, 0usize);
    for (p, g) in pairs {
        hit += within1(p, g)? as usize;
        n += 1;
    }
    Ok(if n == 0 { 0.0 } else { hit as f64 / n as f64 })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn within1_examples() {
        assert!(within1(4.0, 5.0).unwrap());
        assert!(!within1(2.0, 5.0).unwrap());
        assert!(within1(3.4, 4.4).unwrap());
        assert!(within1(f64::NAN, 1.0).is_err());
    }

    #[test]
    fn scalar_examples() {
        assert_eq!(malignancy_scalar(&[0.0f64, 0.0, 0.0, 0.0, 1.0]), 5.0);
        assert_eq!(malignancy_scalar(&[0.2f64; 5]), 3.0);
        assert_eq!(malignancy_scalar(&[0.0f64, 0.0, 0.0, 0.5, 0.5]), 4.5);
    }

    #[test]
    fn dice_examples() {
        let plane = |v: [f32; 4]| Tensor::from_vec(&[1, 2, 2], v.to_vec()).unwrap();
        let m = plane([1.0, 1.0, 0.0, 0.0]);
        assert_eq!(dice(&m, &m).unwrap(), 1.0);
        assert_eq!(dice(&plane([0.0, 0.0, 1.0, 1.0]), &m).unwrap(), 0.0);
        assert_eq!(dice(&plane([0.9, 0.0, 0.7, 0.0]), &m).unwrap(), 0.5);
        assert_eq!(dice(&plane([0.0; 4]), &plane([0.0; 4])).unwrap(), 1.0);
    }
}
