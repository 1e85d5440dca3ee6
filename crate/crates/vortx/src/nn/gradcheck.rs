//! Central finite-difference gradient verification in `f64`.
//!
//! A check rebuilds the forward graph from a `ParamStore` closure, so
//! any network that exposes a scalar loss over store parameters can be
//! verified without extra plumbing.

use std::collections::BTreeMap;

use super::params::ParamStore;
use super::tensor::{Tape, Tensor};

pub const DEFAULT_STEP: f64 = 1e-5;

/// One parameter entry whose analytic and numeric gradients disagree.
#[derive(Debug, Clone)]
pub struct GradMismatch {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub n_checked: usize,
    pub max_rel_err: f64,
    pub mismatches: Vec<GradMismatch>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.mismatches.is_empty()
    }
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / (a.abs() + n.abs()).max(1e-6)
}

/// Compare analytic gradients of `f` against central differences with
/// step `h`. `f` builds the scalar loss on the given tape and returns it
/// together with the leaf tensor for every parameter it consumed.
pub fn check_gradients<F>(
    store: &ParamStore,
    f: F,
    h: f64,
    tol: f64,
) -> GradCheckReport
where
    F: Fn(&ParamStore, &Tape<f64>) -> (Tensor<f64>, BTreeMap<String, Tensor<f64>>),
{
    let tape = Tape::new();
    let (loss, leaves) = f(store, &tape);
    let grads = loss.backward();

    let eval = |s: &ParamStore| -> f64 {
        let t = Tape::new();
        f(s, &t).0.item()
    };

    let mut report = GradCheckReport {
        n_checked: 0,
        max_rel_err: 0.0,
        mismatches: Vec::new(),
    };
    let mut work = store.clone();
    for (name, leaf) in &leaves {
        let analytic = leaf.grad_of(&grads);
        for i in 0..analytic.len() {
            work.perturb(name, i, h);
            let up = eval(&work);
            work.perturb(name, i, -2.0 * h);
            let down = eval(&work);
            work.perturb(name, i, h);
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[i];
            let e = rel_err(a, numeric);
            report.n_checked += 1;
            report.max_rel_err = report.max_rel_err.max(e);
            if e > tol {
                report.mismatches.push(GradMismatch {
                    name: name.clone(),
                    index: i,
                    analytic: a,
                    numeric,
                    rel_err: e,
                });
            }
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_store(specs: &[(&str, &[usize])], seed: u64) -> ParamStore {
        // values kept away from kink points of relu/clamp/abs
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        for (name, shape) in specs {
            let n: usize = shape.iter().product();
            let data = (0..n)
                .map(|_| {
                    let v: f64 = rand::Rng::gen_range(&mut rng, 0.3..1.2);
                    if rand::Rng::gen_bool(&mut rng, 0.5) {
                        v
                    } else {
                        -v
                    }
                })
                .collect();
            store.insert(name, data, shape);
        }
        store
    }

    fn check_one<F>(store: &ParamStore, f: F)
    where
        F: Fn(&ParamStore, &Tape<f64>) -> (Tensor<f64>, BTreeMap<String, Tensor<f64>>),
    {
        let report = check_gradients(store, f, DEFAULT_STEP, 1e-4);
        assert!(
            report.passed(),
            "gradcheck failed: max rel err {} ({:?})",
            report.max_rel_err,
            report.mismatches.first()
        );
        assert!(report.n_checked > 0);
    }

    fn leaf_map(
        store: &ParamStore,
        tape: &Tape<f64>,
        names: &[&str],
    ) -> BTreeMap<String, Tensor<f64>> {
        names
            .iter()
            .map(|&n| (n.to_string(), store.leaf(tape, n)))
            .collect()
    }

    #[test]
    fn fd_matmul_add_row() {
        let store = rand_store(&[("w", &[3, 4]), ("b", &[4]), ("x", &[2, 3])], 11);
        check_one(&store, |s, t| {
            let m = leaf_map(s, t, &["w", "b", "x"]);
            let y = m["x"].matmul(&m["w"]).add_row(&m["b"]).mean_all();
            (y, m)
        });
    }

    #[test]
    fn fd_bmm_both_orientations() {
        let store = rand_store(&[("a", &[2, 2, 3]), ("b", &[2, 3, 2]), ("c", &[2, 2, 3])], 12);
        check_one(&store, |s, t| {
            let m = leaf_map(s, t, &["a", "b", "c"]);
            let y1 = m["a"].bmm(&m["b"], false);
            let y2 = m["a"].bmm(&m["c"], true);
            let y = Tensor::concat(&[&y1, &y2], 2).mean_all();
            (y, m)
        });
    }

    #[test]
    fn fd_activations() {
        let store = rand_store(&[("x", &[2, 5])], 13);
        check_one(&store, |s, t| {
            let m = leaf_map(s, t, &["x"]);
            let y = m["x"]
                .relu()
                .add(&m["x"].sigmoid())
                .add(&m["x"].tanh())
                .mean_all();
            (y, m)
        });
    }

    #[test]
    fn fd_exp_log() {
        let mut store = ParamStore::new();
        store.insert("x", vec![0.4, 1.1, 2.3, 0.7], &[4]);
        check_one(&store, |s, t| {
            let m = leaf_map(s, t, &["x"]);
            let y = m["x"].exp().log().mul(&m["x"].log()).mean_all();
            (y, m)
        });
    }

    #[test]
    fn fd_softmax() {
        let store = rand_store(&[("x", &[3, 4])], 14);
        check_one(&store, |s, t| {
            let m = leaf_map(s, t, &["x"]);
            // weight rows so the softmax Jacobian is exercised off-axis
            let w = t.constant_f64(
                &(0..12).map(|i| (i as f64) * 0.17 - 1.0).collect::<Vec<_>>(),
                &[3, 4],
            );
            let y = m["x"].softmax_last().mul(&w).sum_all();
            (y, m)
        });
    }

    #[test]
    fn fd_layer_norm() {
        let store = rand_store(&[("x", &[2, 6])], 15);
        check_one(&store, |s, t| {
            let m = leaf_map(s, t, &["x"]);
            let w = t.constant_f64(
                &(0..12).map(|i| (i as f64) * 0.1 + 0.2).collect::<Vec<_>>(),
                &[2, 6],
            );
            let y = m["x"].layer_norm(1e-5).mul(&w).sum_all();
            (y, m)
        });
    }

    #[test]
    fn fd_mul_broadcasts() {
        let store = rand_store(&[("x", &[3, 4]), ("row", &[4]), ("col", &[3, 1])], 16);
        check_one(&store, |s, t| {
            let m = leaf_map(s, t, &["x", "row", "col"]);
            let y = m["x"].mul_row(&m["row"]).mul_col(&m["col"]).mean_all();
            (y, m)
        });
    }

    #[test]
    fn fd_concat_slice_gather() {
        let store = rand_store(&[("a", &[3, 2]), ("b", &[3, 3])], 17);
        check_one(&store, |s, t| {
            let m = leaf_map(s, t, &["a", "b"]);
            let cat = Tensor::concat(&[&m["a"], &m["b"]], 1);
            let y = cat
                .slice_last(1, 3)
                .gather_rows(&[2, 0, 2, 1])
                .mean_all();
            (y, m)
        });
    }

    #[test]
    fn fd_clamp_scale() {
        let mut store = ParamStore::new();
        // keep away from the clamp breakpoints
        store.insert("x", vec![-1.7, -0.4, 0.3, 1.9, 0.8, -0.9], &[6]);
        check_one(&store, |s, t| {
            let m = leaf_map(s, t, &["x"]);
            let y = m["x"].clamp(-1.0, 1.0).scale(2.5).add_scalar(0.3).mean_all();
            (y, m)
        });
    }

    #[test]
    fn fd_bce_with_logits() {
        let store = rand_store(&[("x", &[6])], 18);
        check_one(&store, |s, t| {
            let m = leaf_map(s, t, &["x"]);
            let loss = m["x"].bce_with_logits(
                &[1.0, 0.0, 1.0, 1.0, 0.0, 0.0],
                &[1.0, 1.0, 0.0, 1.0, 1.0, 1.0],
            );
            (loss, m)
        });
    }

    #[test]
    fn fd_log_tsdf_l1() {
        let mut store = ParamStore::new();
        // pred values chosen so phi(pred) != phi(gt) (abs kink avoided)
        store.insert("p", vec![0.8, -0.5, 0.2, -0.9], &[4]);
        check_one(&store, |s, t| {
            let m = leaf_map(s, t, &["p"]);
            let loss = m["p"].log_tsdf_l1(&[0.2, 0.4, -0.6, -0.1], &[1.0, 1.0, 1.0, 0.0]);
            (loss, m)
        });
    }

    #[test]
    fn fd_mlp_composite() {
        // two-layer MLP with layer norm and softmax attention-like mix
        let store = rand_store(
            &[("w1", &[4, 8]), ("b1", &[8]), ("w2", &[8, 3]), ("x", &[5, 4])],
            19,
        );
        let report = check_gradients(
            &store,
            |s, t| {
                let m = leaf_map(s, t, &["w1", "b1", "w2", "x"]);
                let h = m["x"].matmul(&m["w1"]).add_row(&m["b1"]).relu().layer_norm(1e-5);
                let logits = h.matmul(&m["w2"]).softmax_last();
                let loss = logits.bce_with_logits(&vec![0.5; 15], &vec![1.0; 15]);
                (loss, m)
            },
            DEFAULT_STEP,
            1e-3,
        );
        assert!(
            report.passed(),
            "composite gradcheck failed: max rel err {}",
            report.max_rel_err
        );
    }
}
