//! Central finite-difference gradient verification.
//!
//! This is the independent oracle the rest of the crate is checked against.
//! It runs in 64-bit only; 32-bit differences are dominated by rounding.

use crate::error::{Error, Result};
use crate::tensor::graph::{Graph, NodeId};
use crate::tensor::store::ParameterStore;
use crate::tensor::Scalar;

/// Outcome of one gradient check over a parameter store.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// `(name, entries probed, max relative error)` per trainable parameter,
    /// in canonical order.
    pub per_param: Vec<(String, usize, f64)>,
    pub max_rel_err: f64,
    pub worst_param: String,
}

/// Compare analytic gradients of `f` against central finite differences.
///
/// `f` must rebuild the same deterministic scalar forward pass every call
/// (fix any noise masks outside the closure). `probes_per_param` limits how
/// many entries of each parameter are perturbed; `0` probes every entry.
/// Probe positions are evenly strided so corners and interior are both hit.
///
/// Returns the max over probed entries of
/// `|analytic - central| / max(|analytic|, |central|, 1e-8)`.
pub fn finite_diff_check<FN>(
    store: &mut ParameterStore<f64>,
    eps: f64,
    probes_per_param: usize,
    mut f: FN,
) -> Result<GradCheckReport>
where
    FN: FnMut(&mut Graph<f64>, &ParameterStore<f64>) -> Result<NodeId>,
{
    if eps <= 0.0 {
        return Err(Error::usage(format!("finite_diff_check: eps must be > 0, got {eps}")));
    }

    // Analytic pass.
    let mut g = Graph::new();
    let loss = f(&mut g, store)?;
    if g.value(loss).numel() != 1 {
        return Err(Error::usage(format!(
            "finite_diff_check: f must be scalar, got shape {:?}",
            g.value(loss).shape()
        )));
    }
    g.backward(loss, store)?;
    let ids = store.trainable_ids();
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .map(|&id| store.grad(id).expect("backward populated").data().to_vec())
        .collect();

    let eval = |g_store: &mut ParameterStore<f64>, f: &mut FN| -> Result<f64> {
        let mut graph = Graph::new();
        let node = f(&mut graph, g_store)?;
        Ok(graph.value(node).data()[0])
    };

    let mut report = GradCheckReport {
        per_param: Vec::new(),
        max_rel_err: 0.0,
        worst_param: String::new(),
    };

    for (slot, &id) in ids.iter().enumerate() {
        let name = store.name(id).to_string();
        let n = store.value(id).numel();
        let probes: Vec<usize> = if probes_per_param == 0 || probes_per_param >= n {
            (0..n).collect()
        } else {
            (0..probes_per_param)
                .map(|i| i * n / probes_per_param)
                .collect()
        };
        let mut worst = 0.0f64;
        for &i in &probes {
            let orig = store.value(id).data()[i];
            store.value_mut(id).data_mut()[i] = orig + eps;
            let plus = eval(store, &mut f)?;
            store.value_mut(id).data_mut()[i] = orig - eps;
            let minus = eval(store, &mut f)?;
            store.value_mut(id).data_mut()[i] = orig;

            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[slot][i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            if rel > worst {
                worst = rel;
            }
        }
        if worst > report.max_rel_err {
            report.max_rel_err = worst;
            report.worst_param = name.clone();
        }
        report.per_param.push((name, probes.len(), worst));
    }
    Ok(report)
}

/// Convenience: max relative error over all entries of all parameters.
pub fn max_grad_error<FN>(store: &mut ParameterStore<f64>, eps: f64, f: FN) -> Result<f64>
where
    FN: FnMut(&mut Graph<f64>, &ParameterStore<f64>) -> Result<NodeId>,
{
    Ok(finite_diff_check(store, eps, 0, f)?.max_rel_err)
}

#[allow(dead_code)]
fn _assert_scalar_bound<F: Scalar>() {}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::rc::Rc;

    #[test]
    fn linear_is_exact() {
        // Dyadic values keep the central difference bit-exact.
        let mut store = ParameterStore::new();
        store
            .register("p", Tensor::from_vec(&[2], vec![0.5, 1.0]).unwrap(), true)
            .unwrap();
        let err = max_grad_error(&mut store, 0.25, |g, s| {
            let p = g.param(s, s.id("p").unwrap());
            Ok(g.sum_all(p))
        })
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn quadratic_is_exact_to_rounding() {
        let mut store = ParameterStore::new();
        store
            .register("p", Tensor::from_vec(&[3], vec![0.3, -1.2, 2.0]).unwrap(), true)
            .unwrap();
        let err = max_grad_error(&mut store, 1e-3, |g, s| {
            let p = g.param(s, s.id("p").unwrap());
            let sq = g.mul(p, p)?;
            Ok(g.sum_all(sq))
        })
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn non_scalar_objective_is_a_usage_error() {
        let mut store = ParameterStore::new();
        store
            .register("p", Tensor::zeros(&[2]), true)
            .unwrap();
        let res = max_grad_error(&mut store, 1e-3, |g, s| Ok(g.param(s, s.id("p").unwrap())));
        assert!(matches!(res, Err(Error::Usage(_))));
    }

    #[test]
    fn injected_fault_is_detected() {
        let mut store = ParameterStore::new();
        store
            .register("w", Tensor::from_vec(&[2, 2], vec![0.4, -0.3, 0.7, 0.9]).unwrap(), true)
            .unwrap();
        let err = max_grad_error(&mut store, 1e-3, |g, s| {
            g.set_grad_fault(true);
            let w = g.param(s, s.id("w").unwrap());
            let x = g.leaf(Tensor::from_vec(&[2, 2], vec![1.0, 2.0, -1.0, 0.5]).unwrap());
            let y = g.matmul(w, x)?;
            let sq = g.mul(y, y)?;
            Ok(g.sum_all(sq))
        })
        .unwrap();
        assert!(err > 1e-4, "fault went undetected: {err}");
    }

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::from_vec(shape, data).unwrap()
    }

    /// Tensor whose entries stay at least `margin` away from zero, for ops
    /// with a kink at the origin.
    fn rand_tensor_off_zero(rng: &mut ChaCha8Rng, shape: &[usize], margin: f64) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n)
            .map(|_| {
                let mag = rng.random_range(margin..1.0);
                if rng.random_bool(0.5) {
                    mag
                } else {
                    -mag
                }
            })
            .collect();
        Tensor::from_vec(shape, data).unwrap()
    }

    /// Every differentiable op, driven from random small shapes across many
    /// seeds; each must match central finite differences to 1e-4 relative.
    #[test]
    fn every_op_matches_finite_differences() {
        for seed in 0..24u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = rng.random_range(2..5usize);
            let k = rng.random_range(2..5usize);
            let n = rng.random_range(2..5usize);

            let mut store = ParameterStore::new();
            store.register("a", rand_tensor(&mut rng, &[m, k]), true).unwrap();
            store.register("b", rand_tensor(&mut rng, &[k, n]), true).unwrap();
            store.register("c", rand_tensor(&mut rng, &[m, k]), true).unwrap();
            store
                .register("off", rand_tensor_off_zero(&mut rng, &[m, k], 0.05), true)
                .unwrap();
            store.register("gain", rand_tensor(&mut rng, &[k]), true).unwrap();
            store.register("bias", rand_tensor(&mut rng, &[k]), true).unwrap();
            // rows with guaranteed spread: near-zero variance makes the
            // normalizer's curvature too large for a 1e-3 central difference
            let mut xln = rand_tensor(&mut rng, &[m, k]);
            for (j, v) in xln.data_mut().iter_mut().enumerate() {
                *v += if j % 2 == 0 { 0.8 } else { -0.8 };
            }
            store.register("xln", xln, true).unwrap();

            let gather_idx: Rc<Vec<i64>> = Rc::new(
                (0..2 * k)
                    .map(|_| {
                        if rng.random_bool(0.2) {
                            -1
                        } else {
                            rng.random_range(0..(m * k) as i64)
                        }
                    })
                    .collect(),
            );

            type Builder = Box<
                dyn Fn(&mut Graph<f64>, &ParameterStore<f64>) -> crate::error::Result<NodeId>,
            >;
            let idx = gather_idx.clone();
            let cases: Vec<(&str, Builder)> = vec![
                ("matmul", Box::new(|g, s| {
                    let a = g.param(s, s.id("a").unwrap());
                    let b = g.param(s, s.id("b").unwrap());
                    let y = g.matmul(a, b)?;
                    Ok(g.mean_all(y))
                })),
                ("add_sub_mul", Box::new(|g, s| {
                    let a = g.param(s, s.id("a").unwrap());
                    let c = g.param(s, s.id("c").unwrap());
                    let t = g.add(a, c)?;
                    let u = g.sub(t, a)?;
                    let v = g.mul(u, t)?;
                    Ok(g.sum_all(v))
                })),
                ("add_row", Box::new(|g, s| {
                    let a = g.param(s, s.id("a").unwrap());
                    let bias = g.param(s, s.id("bias").unwrap());
                    let y = g.add_row(a, bias)?;
                    let sq = g.mul(y, y)?;
                    Ok(g.mean_all(sq))
                })),
                ("relu_scale", Box::new(|g, s| {
                    let x = g.param(s, s.id("off").unwrap());
                    let r = g.relu(x);
                    let sc = g.scale(r, 1.7);
                    let sh = g.add_const(sc, 0.3);
                    Ok(g.sum_all(sh))
                })),
                ("exp", Box::new(|g, s| {
                    let x = g.param(s, s.id("a").unwrap());
                    let e = g.exp(x);
                    Ok(g.mean_all(e))
                })),
                ("abs", Box::new(|g, s| {
                    let x = g.param(s, s.id("off").unwrap());
                    let e = g.abs(x);
                    Ok(g.sum_all(e))
                })),
                ("clamp_interior", Box::new(|g, s| {
                    let x = g.param(s, s.id("a").unwrap());
                    let c = g.clamp(x, -5.0, 5.0);
                    let sq = g.mul(c, c)?;
                    Ok(g.sum_all(sq))
                })),
                ("softmax", Box::new(|g, s| {
                    let x = g.param(s, s.id("a").unwrap());
                    let sm = g.softmax_rows(x)?;
                    let w = g.param(s, s.id("c").unwrap());
                    let v = g.mul(sm, w)?;
                    Ok(g.sum_all(v))
                })),
                ("layer_norm", Box::new(|g, s| {
                    let x = g.param(s, s.id("xln").unwrap());
                    let gain = g.param(s, s.id("gain").unwrap());
                    let bias = g.param(s, s.id("bias").unwrap());
                    let y = g.layer_norm(x, gain, bias, 1e-5)?;
                    let sq = g.mul(y, y)?;
                    Ok(g.mean_all(sq))
                })),
                ("transpose_slice_concat", Box::new(|g, s| {
                    let a = g.param(s, s.id("a").unwrap());
                    let t = g.transpose(a)?;
                    let r0 = g.slice_rows(t, 0, 1)?;
                    let rest = g.slice_rows(t, 1, t_rows(g, t) - 1)?;
                    let back = g.concat_rows(&[rest, r0])?;
                    let c0 = g.slice_cols(back, 0, 1)?;
                    let c1 = g.slice_cols(back, 1, cols(g, back) - 1)?;
                    let re = g.concat_cols(&[c1, c0])?;
                    let sq = g.mul(re, re)?;
                    Ok(g.sum_all(sq))
                })),
                ("gather", Box::new(move |g, s| {
                    let a = g.param(s, s.id("a").unwrap());
                    let y = g.gather(a, idx.clone(), &[2, k])?;
                    let sq = g.mul(y, y)?;
                    Ok(g.sum_all(sq))
                })),
                ("reshape_mean", Box::new(|g, s| {
                    let a = g.param(s, s.id("a").unwrap());
                    let numel = g.value(a).numel();
                    let r = g.reshape(a, &[numel, 1])?;
                    let sq = g.mul(r, r)?;
                    Ok(g.mean_all(sq))
                })),
            ];

            for (name, builder) in &cases {
                let err = max_grad_error(&mut store, 1e-3, |g, s| builder(g, s))
                    .unwrap_or_else(|e| panic!("{name} failed to build: {e}"));
                assert!(err < 1e-4, "op {name} seed {seed}: rel err {err}");
            }
        }
    }

    fn t_rows(g: &Graph<f64>, id: NodeId) -> usize {
        g.value(id).shape()[0]
    }

    fn cols(g: &Graph<f64>, id: NodeId) -> usize {
        g.value(id).shape()[1]
    }
}
