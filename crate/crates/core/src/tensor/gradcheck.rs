use super::{Graph, ParamStore, TensorError, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub coordinates: usize,
}

/// Compares backprop gradients against central finite differences on every
/// coordinate of every parameter in `store`.
///
/// Relative error per coordinate is `|a - n| / max(1e-8, |a| + |n|)`. Grads
/// in `store` are zero on return.
pub fn grad_check<F, E>(store: &mut ParamStore, eps: f64, mut loss_fn: F) -> Result<GradCheckReport, E>
where
    F: FnMut(&mut Graph, &ParamStore) -> Result<Var, E>,
    E: From<TensorError>,
{
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(TensorError::Invalid {
            op: "grad_check",
            msg: format!("eps {eps} outside (0, 1e-2]"),
        }
        .into());
    }
    store.zero_grads();
    let mut g = Graph::new();
    let loss = loss_fn(&mut g, store)?;
    g.backward(loss, store)?;
    let analytic: Vec<Vec<f64>> = store.iter().map(|(_, p)| p.grad.data().to_vec()).collect();
    store.zero_grads();

    let mut eval = |store: &ParamStore, name: &str, index: usize| -> Result<f64, E> {
        let mut g = Graph::new();
        let v = loss_fn(&mut g, store)?;
        let value = g.value(v).item();
        if !value.is_finite() {
            return Err(TensorError::NonFiniteLoss {
                param: name.to_string(),
                index,
                value,
            }
            .into());
        }
        Ok(value)
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        coordinates: 0,
    };
    for (pi, grads) in analytic.iter().enumerate() {
        let name = store.params_mut()[pi].name.clone();
        for (i, &a) in grads.iter().enumerate() {
            let orig = store.params_mut()[pi].value.data()[i];
            store.params_mut()[pi].value.data_mut()[i] = orig + eps;
            let plus = eval(store, &name, i)?;
            store.params_mut()[pi].value.data_mut()[i] = orig - eps;
            let minus = eval(store, &name, i)?;
            store.params_mut()[pi].value.data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
            report.coordinates += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst_param = name.clone();
                report.worst_index = i;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use crate::tensor::{SparseRows, Tensor};
    use std::sync::Arc;

    #[test]
    fn quadratic_is_exact() {
        let mut store = ParamStore::new();
        let x = store.add("x", Tensor::row_vector(vec![0.7, -1.3, 2.2])).unwrap();
        let r = grad_check(&mut store, 1e-4, |g, s| -> Result<Var, TensorError> {
            let v = g.param(s, x);
            let sq = g.mul(v, v)?;
            let w = g.scale(sq, 1.5);
            Ok(g.sum(w))
        })
        .unwrap();
        assert!(r.max_rel_error < 1e-8, "{r:?}");
        assert_eq!(r.coordinates, 3);
    }

    #[test]
    fn constant_loss_has_zero_error() {
        let mut store = ParamStore::new();
        let x = store.add("x", Tensor::row_vector(vec![1.0, 2.0])).unwrap();
        let r = grad_check(&mut store, 1e-4, |g, s| -> Result<Var, TensorError> {
            let _ = g.param(s, x);
            let c = g.constant(Tensor::scalar(4.0));
            Ok(g.sum(c))
        })
        .unwrap();
        assert_eq!(r.max_rel_error, 0.0);
    }

    #[test]
    fn eps_out_of_range_rejected() {
        let mut store = ParamStore::new();
        let r = grad_check(&mut store, 0.5, |g, _| -> Result<Var, TensorError> {
            Ok(g.constant(Tensor::scalar(0.0)))
        });
        assert!(r.is_err());
    }

    #[test]
    fn non_finite_perturbed_loss_is_an_error() {
        let mut store = ParamStore::new();
        let x = store.add("x", Tensor::scalar(0.0)).unwrap();
        let r = grad_check(&mut store, 1e-4, |g, s| -> Result<Var, TensorError> {
            let v = g.param(s, x);
            if g.value(v).item() != 0.0 {
                return Ok(g.constant(Tensor::scalar(f64::NAN)));
            }
            Ok(g.sum(v))
        });
        assert!(matches!(r, Err(TensorError::NonFiniteLoss { .. })));
    }

    /// Every primitive against central differences on random 3x4 inputs.
    #[test]
    fn every_primitive_matches_finite_differences() {
        let mut rng = seeded(42);
        let mut store = ParamStore::new();
        let a = store.add("a", Tensor::xavier(3, 4, &mut rng).scale(2.0)).unwrap();
        let b = store.add("b", Tensor::xavier(3, 4, &mut rng).scale(2.0)).unwrap();
        let m = store.add("m", Tensor::xavier(4, 3, &mut rng)).unwrap();
        let row = store.add("row", Tensor::xavier(1, 4, &mut rng)).unwrap();
        let sparse = Arc::new(SparseRows {
            cols: 4,
            rows: vec![vec![(0, 0.5), (3, -1.0)], vec![], vec![(2, 2.0)]],
        });
        let weights = Tensor::xavier(3, 4, &mut rng);
        type Build = fn(&mut Graph, Var, Var, Var, Var, &Arc<SparseRows>) -> crate::tensor::Result<Var>;
        let cases: Vec<(&str, Build)> = vec![
            ("matmul", |g, a, _, m, _, _| g.matmul(a, m)),
            ("add", |g, a, b, _, _, _| g.add(a, b)),
            ("add_row", |g, a, _, _, r, _| g.add(a, r)),
            ("scale", |g, a, _, _, _, _| Ok(g.scale(a, -1.7))),
            ("row_softmax", |g, a, _, _, _, _| Ok(g.row_softmax(a))),
            ("tanh", |g, a, _, _, _, _| Ok(g.tanh(a))),
            ("sigmoid", |g, a, _, _, _, _| Ok(g.sigmoid(a))),
            ("concat_cols", |g, a, b, _, _, _| g.concat_cols(&[a, b])),
            ("concat_rows", |g, a, b, _, _, _| g.concat_rows(&[a, b])),
            ("mean_rows", |g, a, _, _, _, _| g.mean_rows(a)),
            ("elementwise_mul", |g, a, b, _, _, _| g.mul(a, b)),
            ("transpose", |g, a, _, _, _, _| Ok(g.transpose(a))),
            ("gather_rows", |g, a, _, _, _, _| g.gather_rows(a, &[2, 0, 2])),
            ("sparse_matmul", |g, _, _, m, _, x| g.sparse_matmul(x.clone(), m)),
        ];
        for (name, build) in cases {
            let r = grad_check(&mut store, 1e-5, |g, s| -> Result<Var, TensorError> {
                let (va, vb, vm, vr) = (g.param(s, a), g.param(s, b), g.param(s, m), g.param(s, row));
                let out = build(g, va, vb, vm, vr, &sparse)?;
                // contract against fixed random weights so the loss is not symmetric
                let (rows, cols) = g.value(out).shape();
                let w = Tensor::from_vec(
                    rows,
                    cols,
                    weights.data().iter().cycle().take(rows * cols).copied().collect(),
                )?;
                let wv = g.constant(w);
                let prod = g.mul(out, wv)?;
                Ok(g.sum(prod))
            })
            .unwrap();
            assert!(r.max_rel_error < 1e-5, "{name}: {r:?}");
        }
    }

    #[test]
    fn weighted_bce_gradient_matches() {
        let mut store = ParamStore::new();
        let z = store
            .add("z", Tensor::from_vec(4, 1, vec![0.3, -0.8, 1.4, 0.0]).unwrap())
            .unwrap();
        let r = grad_check(&mut store, 1e-5, |g, s| -> Result<Var, TensorError> {
            let v = g.param(s, z);
            let p = g.sigmoid(v);
            g.weighted_bce(p, &[1.0, 0.0, 0.0, 1.0], 5.0)
        })
        .unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
    }
}
