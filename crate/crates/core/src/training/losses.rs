use super::LossWeights;
use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};

/// Predicted probabilities below this are clamped inside the logarithm.
pub const KL_CLAMP: f64 = 1e-9;
const NORMALIZATION_TOL: f64 = 1e-4;

/// The five per-sample loss terms, unweighted.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossTerms<T> {
    pub malignancy: T,
    pub reconstruction: T,
    pub attribute: T,
    pub cluster: T,
    pub separation: T,
}

fn check_distribution<T: Scalar>(what: &str, p: &[T]) -> Result<()> {
    let sum: f64 = p.iter().map(|v| v.as_f64()).sum();
    if p.iter().any(|v| !(v.as_f64() >= 0.0)) || (sum - 1.0).abs() > NORMALIZATION_TOL {
        return Err(Error::InvalidInput(format!("{what} is not a probability vector (sum {sum})")));
    }
    Ok(())
}

/// `Σ t ln(t / p)` with `0 ln 0 = 0`.
pub fn malignancy_kl_loss<T: Scalar>(pred: &[T], target: &[T]) -> Result<T> {
    if pred.len() != target.len() {
        return Err(Error::shape("malignancy_kl_loss", format!("{} vs {} bins", pred.len(), target.len())));
    }
    check_distribution("prediction", pred)?;
    check_distribution("target", target)?;
    let clamp = T::of(KL_CLAMP);
    Ok(pred
        .iter()
        .zip(target)
        .filter(|(_, &t)| t > T::zero())
        .map(|(&p, &t)| t * (t.ln() - p.max(clamp).ln()))
        .sum())
}

/// Gradient of [`malignancy_kl_loss`] with respect to `pred`.
pub fn malignancy_kl_grad<T: Scalar>(pred: &[T], target: &[T]) -> Vec<T> {
    let clamp = T::of(KL_CLAMP);
    pred.iter()
        .zip(target)
        .map(|(&p, &t)| if p > clamp { -t / p } else { T::zero() })
        .collect()
}

/// `(1 − b) Σ (y − o)²`.
pub fn attribute_loss<T: Scalar>(scores: &[T], gt: &[T], b: u8) -> Result<T> {
    if scores.len() != gt.len() {
        return Err(Error::shape("attribute_loss", format!("{} scores vs {} labels", scores.len(), gt.len())));
    }
    if b != 0 {
        return Ok(T::zero());
    }
    Ok(scores.iter().zip(gt).map(|(&o, &y)| (y - o) * (y - o)).sum())
}

/// Mean squared error between reconstruction and mask.
pub fn reconstruction_loss<T: Scalar>(recon: &Tensor<T>, mask: &Tensor<T>) -> Result<T> {
    if recon.shape() != mask.shape() {
        return Err(Error::shape(
            "reconstruction_loss",
            format!("{:?} vs {:?}", recon.shape(), mask.shape()),
        ));
    }
    let sum: T = recon.data().iter().zip(mask.data()).map(|(&r, &m)| (r - m) * (r - m)).sum();
    Ok(sum / T::of(recon.len() as f64))
}

/// `mal + λ_r·recon + attr + λ_p·(clu + λ_s·sep)`; the bracket is dropped
/// when prototypes are inactive.
pub fn total_loss<T: Scalar>(terms: &LossTerms<T>, w: &LossWeights) -> Result<T> {
    let all = [
        terms.malignancy,
        terms.reconstruction,
        terms.attribute,
        terms.cluster,
        terms.separation,
    ];
    if all.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("loss terms {all:?}")));
    }
    let mut total = terms.malignancy + T::of(w.recon) * terms.reconstruction + terms.attribute;
    if w.prototypes {
        total += T::of(w.proto) * (terms.cluster + T::of(w.sep_inner) * terms.separation);
    }
    Ok(total)
}
