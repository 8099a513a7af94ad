//! Dynamic routing between a layer of pose vectors and `A` output capsules.
//!
//! The backward pass differentiates through every routing iteration,
//! including the agreement updates of the coupling logits.

use crate::error::{Error, Result};
use crate::numerics::ops::{softmax_backward_acc, softmax_into, squash_backward_acc, squash_into};
use crate::numerics::{dot, Scalar, Tensor};

/// Extents of a routing layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RoutingDims {
    pub n_in: usize,
    pub pose_dim: usize,
    pub n_out: usize,
    pub out_dim: usize,
}

impl RoutingDims {
    pub fn weight_len(&self) -> usize {
        self.n_out * self.n_in * self.out_dim * self.pose_dim
    }
}

/// Intermediate values of one routing forward pass.
#[derive(Debug, Clone)]
pub struct RoutingTrace<T> {
    /// Predictions `u[a][i] = W[a,i] pose_i`, laid out `[A, N_in, out_dim]`.
    pub predictions: Vec<T>,
    /// Coupling coefficients per iteration, each `[N_in, A]`.
    pub couplings: Vec<Vec<T>>,
    /// Pre-squash capsule inputs per iteration, each `[A, out_dim]`.
    pub totals: Vec<Vec<T>>,
    /// Output capsules per iteration, each `[A, out_dim]`.
    pub outputs: Vec<Vec<T>>,
}

impl<T: Scalar> RoutingTrace<T> {
    /// Output capsules of the last iteration, `[A, out_dim]`.
    pub fn final_output(&self) -> &[T] {
        self.outputs.last().expect("at least one routing iteration")
    }
}

pub fn route<T: Scalar>(dims: RoutingDims, poses: &[T], weight: &[T], iters: usize) -> RoutingTrace<T> {
    let RoutingDims {
        n_in,
        pose_dim,
        n_out,
        out_dim,
    } = dims;
    debug_assert!(iters >= 1);
    debug_assert_eq!(poses.len(), n_in * pose_dim);
    debug_assert_eq!(weight.len(), dims.weight_len());

    let mut u = vec![T::zero(); n_out * n_in * out_dim];
    for a in 0..n_out {
        for i in 0..n_in {
            let pose = &poses[i * pose_dim..(i + 1) * pose_dim];
            let w = &weight[(a * n_in + i) * out_dim * pose_dim..];
            let dst = &mut u[(a * n_in + i) * out_dim..(a * n_in + i + 1) * out_dim];
            for (r, d) in dst.iter_mut().enumerate() {
                *d = dot(&w[r * pose_dim..(r + 1) * pose_dim], pose);
            }
        }
    }

    let mut logits = vec![T::zero(); n_in * n_out];
    let mut trace = RoutingTrace {
        predictions: Vec::new(),
        couplings: Vec::with_capacity(iters),
        totals: Vec::with_capacity(iters),
        outputs: Vec::with_capacity(iters),
    };
    for t in 0..iters {
        let mut c = vec![T::zero(); n_in * n_out];
        for i in 0..n_in {
            softmax_into(&logits[i * n_out..(i + 1) * n_out], &mut c[i * n_out..(i + 1) * n_out]);
        }
        let mut s = vec![T::zero(); n_out * out_dim];
        for a in 0..n_out {
            let sa = &mut s[a * out_dim..(a + 1) * out_dim];
            for i in 0..n_in {
                let cia = c[i * n_out + a];
                let ua = &u[(a * n_in + i) * out_dim..(a * n_in + i + 1) * out_dim];
                for (x, &y) in sa.iter_mut().zip(ua) {
                    *x += cia * y;
                }
            }
        }
        let mut v = vec![T::zero(); n_out * out_dim];
        for a in 0..n_out {
            squash_into(&s[a * out_dim..(a + 1) * out_dim], &mut v[a * out_dim..(a + 1) * out_dim]);
        }
        if t + 1 < iters {
            for a in 0..n_out {
                let va = &v[a * out_dim..(a + 1) * out_dim];
                for i in 0..n_in {
                    logits[i * n_out + a] += dot(&u[(a * n_in + i) * out_dim..(a * n_in + i + 1) * out_dim], va);
                }
            }
        }
        trace.couplings.push(c);
        trace.totals.push(s);
        trace.outputs.push(v);
    }
    trace.predictions = u;
    trace
}

/// Accumulates gradients of the routing layer given `grad_out` on the final
/// output capsules. Returns nothing; writes `grad_poses += ...` and
/// `grad_weight += ...`.
pub fn route_backward<T: Scalar>(
    dims: RoutingDims,
    poses: &[T],
    weight: &[T],
    trace: &RoutingTrace<T>,
    grad_out: &[T],
    grad_poses: &mut [T],
    grad_weight: &mut [T],
) {
    let RoutingDims {
        n_in,
        pose_dim,
        n_out,
        out_dim,
    } = dims;
    let iters = trace.outputs.len();
    let u = &trace.predictions;
    let mut gu = vec![T::zero(); u.len()];
    // gradient w.r.t. the logits entering iteration t + 1
    let mut g_logits = vec![T::zero(); n_in * n_out];
    let mut gv = vec![T::zero(); n_out * out_dim];
    let mut gs = vec![T::zero(); n_out * out_dim];
    let mut gc = vec![T::zero(); n_out];
    for t in (0..iters).rev() {
        let (c, s, v) = (&trace.couplings[t], &trace.totals[t], &trace.outputs[t]);
        if t + 1 == iters {
            gv.copy_from_slice(grad_out);
        } else {
            gv.fill(T::zero());
            for a in 0..n_out {
                let va = &v[a * out_dim..(a + 1) * out_dim];
                for i in 0..n_in {
                    let gb = g_logits[i * n_out + a];
                    if gb == T::zero() {
                        continue;
                    }
                    let base = (a * n_in + i) * out_dim;
                    for r in 0..out_dim {
                        gv[a * out_dim + r] += gb * u[base + r];
                        gu[base + r] += gb * va[r];
                    }
                }
            }
        }
        gs.fill(T::zero());
        for a in 0..n_out {
            squash_backward_acc(
                &s[a * out_dim..(a + 1) * out_dim],
                &gv[a * out_dim..(a + 1) * out_dim],
                &mut gs[a * out_dim..(a + 1) * out_dim],
            );
        }
        for i in 0..n_in {
            for a in 0..n_out {
                let base = (a * n_in + i) * out_dim;
                let ua = &u[base..base + out_dim];
                let gsa = &gs[a * out_dim..(a + 1) * out_dim];
                gc[a] = dot(gsa, ua);
                let cia = c[i * n_out + a];
                for (g, &x) in gu[base..base + out_dim].iter_mut().zip(gsa) {
                    *g += cia * x;
                }
            }
            // logits entering iteration t feed iteration t's softmax and,
            // unchanged, the next iteration's logits
            if t > 0 {
                softmax_backward_acc(&c[i * n_out..(i + 1) * n_out], &gc, &mut g_logits[i * n_out..(i + 1) * n_out]);
            }
        }
    }

    for a in 0..n_out {
        for i in 0..n_in {
            let pose = &poses[i * pose_dim..(i + 1) * pose_dim];
            let gpose = &mut grad_poses[i * pose_dim..(i + 1) * pose_dim];
            let wbase = (a * n_in + i) * out_dim * pose_dim;
            let gua = &gu[(a * n_in + i) * out_dim..(a * n_in + i + 1) * out_dim];
            for (r, &g) in gua.iter().enumerate() {
                if g == T::zero() {
                    continue;
                }
                let w = &weight[wbase + r * pose_dim..wbase + (r + 1) * pose_dim];
                let gw = &mut grad_weight[wbase + r * pose_dim..wbase + (r + 1) * pose_dim];
                for d in 0..pose_dim {
                    gw[d] += g * pose[d];
                    gpose[d] += g * w[d];
                }
            }
        }
    }
}

/// Tensor-level routing: `poses` `[N_in, D]`, `weight` `[A, N_in, out_dim, D]`.
/// Returns the `A` output capsule vectors.
pub fn routing<T: Scalar>(poses: &Tensor<T>, weight: &Tensor<T>, iters: usize) -> Result<Vec<Tensor<T>>> {
    let trace = routing_trace(poses, weight, iters)?;
    let out_dim = weight.shape()[2];
    Ok(trace
        .final_output()
        .chunks(out_dim)
        .map(|c| Tensor::vector(c.to_vec()))
        .collect())
}

pub fn routing_trace<T: Scalar>(poses: &Tensor<T>, weight: &Tensor<T>, iters: usize) -> Result<RoutingTrace<T>> {
    let dims = routing_dims(poses, weight)?;
    if iters == 0 {
        return Err(Error::InvalidInput("routing needs at least one iteration".into()));
    }
    Ok(route(dims, poses.data(), weight.data(), iters))
}

fn routing_dims<T: Scalar>(poses: &Tensor<T>, weight: &Tensor<T>) -> Result<RoutingDims> {
    let &[n_in, pose_dim] = poses.shape() else {
        return Err(Error::shape("routing", format!("poses must be [N_in, D], got {:?}", poses.shape())));
    };
    let &[n_out, wn, out_dim, wd] = weight.shape() else {
        return Err(Error::shape(
            "routing",
            format!("weight must be [A, N_in, out, D], got {:?}", weight.shape()),
        ));
    };
    if wn != n_in || wd != pose_dim {
        return Err(Error::shape(
            "routing",
            format!("weight {:?} does not match poses {:?}", weight.shape(), poses.shape()),
        ));
    }
    Ok(RoutingDims {
        n_in,
        pose_dim,
        n_out,
        out_dim,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_check, squash};
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_iteration_is_uniform_mixture() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let poses = Tensor::<f64>::uniform(&[5, 3], -1.0, 1.0, &mut rng);
        let w = Tensor::<f64>::uniform(&[2, 5, 4, 3], -1.0, 1.0, &mut rng);
        let trace = routing_trace(&poses, &w, 1).unwrap();
        assert!(trace.couplings[0].iter().all(|&c| (c - 0.5).abs() < 1e-15));
        for a in 0..2 {
            let mut s = vec![0.0; 4];
            for i in 0..5 {
                for r in 0..4 {
                    let mut u = 0.0;
                    for d in 0..3 {
                        u += w.data()[((a * 5 + i) * 4 + r) * 3 + d] * poses.data()[i * 3 + d];
                    }
                    s[r] += 0.5 * u;
                }
            }
            let expect = squash(&Tensor::vector(s));
            for r in 0..4 {
                assert_abs_diff_eq!(trace.final_output()[a * 4 + r], expect.data()[r], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn agreement_raises_coupling() {
        // input 0 predicts (1,0) for capsule 0 and (0,0) for capsule 1;
        // input 1 predicts a small vector for both
        let poses = Tensor::<f64>::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        #[rustfmt::skip]
        let w = Tensor::from_vec(&[2, 2, 2, 2], vec![
            // capsule 0: input 0 identity, input 1 scaled 0.1
            1.0, 0.0, 0.0, 1.0,   0.1, 0.0, 0.0, 0.1,
            // capsule 1: input 0 zero, input 1 scaled 0.1
            0.0, 0.0, 0.0, 0.0,   0.1, 0.0, 0.0, 0.1,
        ]).unwrap();
        let trace = routing_trace(&poses, &w, 3).unwrap();
        let c = &trace.couplings[2];
        assert!(c[0] > c[1], "c_00 = {} c_01 = {}", c[0], c[1]);
    }

    #[test]
    fn coupling_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let poses = Tensor::<f32>::uniform(&[20, 8], -1.0, 1.0, &mut rng);
        let w = Tensor::<f32>::uniform(&[8, 20, 16, 8], -0.5, 0.5, &mut rng);
        let trace = routing_trace(&poses, &w, 3).unwrap();
        for c in &trace.couplings {
            for row in c.chunks(8) {
                assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let dims = RoutingDims {
            n_in: 6,
            pose_dim: 3,
            n_out: 3,
            out_dim: 4,
        };
        let poses = Tensor::<f64>::uniform(&[6, 3], -1.0, 1.0, &mut rng);
        let w = Tensor::<f64>::uniform(&[3, 6, 4, 3], -1.0, 1.0, &mut rng);
        let probe = Tensor::<f64>::uniform(&[12], -1.0, 1.0, &mut rng);
        let loss = |p: &[f64], w: &[f64]| dot(route(dims, p, w, 3).final_output(), probe.data());

        let trace = route(dims, poses.data(), w.data(), 3);
        let mut gp = vec![0.0; poses.len()];
        let mut gw = vec![0.0; w.len()];
        route_backward(dims, poses.data(), w.data(), &trace, probe.data(), &mut gp, &mut gw);

        let r = finite_diff_check(|p| loss(p, w.data()), poses.data(), &gp, None, 1e-5, 1e-5).unwrap();
        assert!(r.passed(), "poses {r:?}");
        let r = finite_diff_check(|x| loss(poses.data(), x), w.data(), &gw, None, 1e-5, 1e-5).unwrap();
        assert!(r.passed(), "weights {r:?}");
    }

    #[test]
    fn shape_errors() {
        let p = Tensor::<f32>::zeros(&[4, 8]);
        assert!(routing(&p, &Tensor::zeros(&[2, 3, 16, 8]), 3).is_err());
        assert!(routing(&p, &Tensor::zeros(&[2, 4, 16, 8]), 0).is_err());
        assert_eq!(routing(&p, &Tensor::zeros(&[2, 4, 16, 8]), 3).unwrap().len(), 2);
    }
}
