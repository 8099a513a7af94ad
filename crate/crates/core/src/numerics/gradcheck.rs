use rand::Rng;
use serde::Serialize;

use super::{ParamStore, Scalar};
use crate::error::{Error, Result};

/// Denominator floor of the relative error, so that coordinates whose true
/// gradient is zero are judged on absolute error.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    /// Position (in the checked coordinate list) of the worst coordinate.
    pub worst: Option<usize>,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub non_finite: bool,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        !self.non_finite && self.max_rel_error < self.tol
    }
}

/// `|a - n| / max(|a|, |n|, REL_ERROR_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

struct Accum {
    report: GradCheckReport,
}

impl Accum {
    fn new(tol: f64) -> Self {
        Self {
            report: GradCheckReport {
                checked: 0,
                max_rel_error: 0.0,
                worst: None,
                worst_analytic: 0.0,
                worst_numeric: 0.0,
                non_finite: false,
                tol,
            },
        }
    }

    fn push(&mut self, analytic: f64, plus: f64, minus: f64, h: f64) {
        let r = &mut self.report;
        let pos = r.checked;
        r.checked += 1;
        if !(plus.is_finite() && minus.is_finite() && analytic.is_finite()) {
            r.non_finite = true;
            return;
        }
        let numeric = (plus - minus) / (2.0 * h);
        let err = relative_error(analytic, numeric);
        if r.worst.is_none() || err > r.max_rel_error {
            r.max_rel_error = err;
            r.worst = Some(pos);
            r.worst_analytic = analytic;
            r.worst_numeric = numeric;
        }
    }
}

fn check_step(h: f64) -> Result<()> {
    if h > 0.0 && h.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!("finite-difference step must be positive, got {h}")))
    }
}

/// Compares `analytic` against central differences of `f` at `x`.
///
/// `coords` selects which coordinates to check (all when `None`); `analytic`
/// is always indexed by coordinate, not by position in `coords`.
pub fn finite_diff_check<T, F>(
    mut f: F,
    x: &[T],
    analytic: &[T],
    coords: Option<&[usize]>,
    h: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    T: Scalar,
    F: FnMut(&[T]) -> T,
{
    check_step(h)?;
    if analytic.len() != x.len() {
        return Err(Error::shape(
            "finite_diff_check",
            format!("{} gradient values for {} inputs", analytic.len(), x.len()),
        ));
    }
    let all: Vec<usize>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = (0..x.len()).collect();
            &all
        }
    };
    let mut acc = Accum::new(tol);
    let mut probe = x.to_vec();
    for &i in coords {
        let orig = probe[i];
        probe[i] = orig + T::of(h);
        let plus = f(&probe).as_f64();
        probe[i] = orig - T::of(h);
        let minus = f(&probe).as_f64();
        probe[i] = orig;
        acc.push(analytic[i].as_f64(), plus, minus, h);
    }
    Ok(acc.report)
}

/// Finite-difference check over selected `(param id, offset)` coordinates of
/// a store whose gradients were populated by the caller.
pub fn finite_diff_check_store<T, F>(
    store: &mut ParamStore<T>,
    coords: &[(usize, usize)],
    mut f: F,
    h: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    T: Scalar,
    F: FnMut(&ParamStore<T>) -> T,
{
    check_step(h)?;
    let analytic = coords
        .iter()
        .map(|&(id, off)| {
            store
                .get(id)
                .grad()
                .map(|g| g[off].as_f64())
                .ok_or_else(|| Error::MissingGradient(store.name(id).to_string()))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut acc = Accum::new(tol);
    for (&(id, off), &a) in coords.iter().zip(&analytic) {
        let orig = store.get(id).data()[off];
        store.get_mut(id).data_mut()[off] = orig + T::of(h);
        let plus = f(store).as_f64();
        store.get_mut(id).data_mut()[off] = orig - T::of(h);
        let minus = f(store).as_f64();
        store.get_mut(id).data_mut()[off] = orig;
        acc.push(a, plus, minus, h);
    }
    Ok(acc.report)
}

/// Draws `n` coordinates, first one from every parameter tensor (so small
/// tensors such as biases are always covered), then uniformly over all
/// scalars.
pub fn sample_coords<T: Scalar, R: Rng + ?Sized>(store: &ParamStore<T>, n: usize, rng: &mut R) -> Vec<(usize, usize)> {
    let mut out: Vec<(usize, usize)> = (0..store.len())
        .map(|id| (id, rng.gen_range(0..store.get(id).len())))
        .take(n)
        .collect();
    let total = store.numel();
    while out.len() < n {
        let mut flat = rng.gen_range(0..total);
        for id in 0..store.len() {
            let len = store.get(id).len();
            if flat < len {
                out.push((id, flat));
                break;
            }
            flat -= len;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::ops;
    use crate::numerics::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn half_squared_norm() {
        let x = vec![0.3f64, -1.2, 2.0, 0.7];
        let f = |v: &[f64]| 0.5 * v.iter().map(|a| a * a).sum::<f64>();
        let r = finite_diff_check(f, &x, &x, None, 1e-3, 1e-4).unwrap();
        assert!(r.passed(), "{r:?}");
        assert_eq!(r.checked, 4);

        let x32 = vec![0.5f32, -0.25, 0.75];
        let f32_ = |v: &[f32]| 0.5 * v.iter().map(|a| a * a).sum::<f32>();
        let r = finite_diff_check(f32_, &x32, &x32, None, 1e-3, 1e-4).unwrap();
        assert!(r.passed(), "{r:?}");
    }

    #[test]
    fn wrong_gradient_is_caught() {
        let x = vec![1.0f64, 2.0];
        let f = |v: &[f64]| v[0] * v[1];
        let r = finite_diff_check(f, &x, &[2.0, 2.0], None, 1e-4, 1e-3).unwrap();
        assert!(!r.passed());
        assert_eq!(r.worst, Some(1));
    }

    #[test]
    fn non_finite_fails() {
        let f = |v: &[f64]| if v[0] > 0.0 { f64::NAN } else { 0.0 };
        let r = finite_diff_check(f, &[0.0], &[0.0], None, 1e-3, 1e-3).unwrap();
        assert!(r.non_finite && !r.passed());
        assert!(finite_diff_check(f, &[0.0], &[0.0], None, 0.0, 1e-3).is_err());
    }

    #[test]
    fn squash_then_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..5 {
            let v = Tensor::<f64>::uniform(&[16], -1.0, 1.0, &mut rng);
            let ones = Tensor::full(&[16], 1.0);
            let g = ops::squash_backward(&v, &ones).unwrap();
            let f = |x: &[f64]| ops::squash(&Tensor::vector(x.to_vec())).data().iter().sum::<f64>();
            let r = finite_diff_check(f, v.data(), g.data(), None, 1e-3, 1e-3).unwrap();
            assert!(r.passed(), "{r:?}");
        }
    }

    #[test]
    fn store_check_restores_values() {
        let mut s = ParamStore::<f64>::new();
        s.insert("w", Tensor::vector(vec![1.0, 2.0, 3.0])).unwrap();
        s.set_grads(vec![vec![2.0, 4.0, 6.0]]).unwrap();
        let f = |st: &ParamStore<f64>| st.get(0).data().iter().map(|a| a * a).sum::<f64>();
        let r = finite_diff_check_store(&mut s, &[(0, 0), (0, 2)], f, 1e-4, 1e-6).unwrap();
        assert!(r.passed(), "{r:?}");
        assert_eq!(s.get(0).data(), &[1.0, 2.0, 3.0]);
    }
}
