//! Central finite-difference verification of reverse-mode gradients.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{Graph, ParamStore, Tensor, Var};
use crate::error::Result;

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_THRESHOLD: f64 = 1e-3;
pub const LINEAR_THRESHOLD: f64 = 1e-6;
pub const MAX_ELEMENTS_PER_PARAM: usize = 10_000;
/// Denominator floor so exactly-zero gradients compare on an absolute scale.
const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    pub step: f64,
    pub threshold: f64,
    pub max_elements: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: DEFAULT_STEP,
            threshold: DEFAULT_THRESHOLD,
            max_elements: MAX_ELEMENTS_PER_PARAM,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ParamCheck {
    pub name: String,
    pub elements_checked: usize,
    pub max_rel_error: f64,
    pub worst_element: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub max_rel_error: f64,
    pub threshold: f64,
    pub passed: bool,
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

/// Compares the analytic gradient of the scalar built by `f` against central
/// differences for every trainable parameter in `store`. Frozen parameters
/// are not reported. `f` must be deterministic in the store contents.
pub fn grad_check<F>(store: &mut ParamStore, mut f: F, cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore, &mut Graph) -> Result<Var>,
{
    let mut graph = Graph::new();
    let loss = f(store, &mut graph)?;
    let grads = graph.backward(loss)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut params = Vec::new();
    let ids: Vec<_> = store.ids().filter(|&id| store.is_trainable(id)).collect();
    for id in ids {
        let n = store.get(id).value.len();
        let analytic = match grads.get(graph.param(store, id)) {
            Some(g) => g.clone(),
            None => Tensor::zeros(store.get(id).value.shape()),
        };
        let elements: Vec<usize> = if n > cfg.max_elements {
            let mut picked = sample(&mut rng, n, cfg.max_elements).into_vec();
            picked.sort_unstable();
            picked
        } else {
            (0..n).collect()
        };
        let mut worst = (0.0, 0);
        for &e in &elements {
            let orig = store.get(id).value.data()[e];
            store.value_mut(id).data_mut()[e] = orig + cfg.step;
            let plus = eval(store, &mut f)?;
            store.value_mut(id).data_mut()[e] = orig - cfg.step;
            let minus = eval(store, &mut f)?;
            store.value_mut(id).data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * cfg.step);
            let err = relative_error(analytic.data()[e], numeric);
            if err > worst.0 {
                worst = (err, e);
            }
        }
        params.push(ParamCheck {
            name: store.name(id).to_owned(),
            elements_checked: elements.len(),
            max_rel_error: worst.0,
            worst_element: worst.1,
        });
    }
    let max_rel_error = params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        params,
        max_rel_error,
        threshold: cfg.threshold,
        passed: max_rel_error < cfg.threshold,
    })
}

fn eval<F>(store: &ParamStore, f: &mut F) -> Result<f64>
where
    F: FnMut(&ParamStore, &mut Graph) -> Result<Var>,
{
    let mut g = Graph::new();
    let v = f(store, &mut g)?;
    Ok(g.value(v).item())
}

/// Result of checking a single primitive.
#[derive(Debug, Clone, Serialize)]
pub struct OpCheck {
    pub op: &'static str,
    pub linear: bool,
    pub report: GradCheckReport,
}

type OpBody = fn(&mut Graph, &[Var]) -> Result<Var>;

struct OpCase {
    op: &'static str,
    linear: bool,
    inputs: Vec<Vec<usize>>,
    body: OpBody,
}

fn cases() -> Vec<OpCase> {
    let case = |op, linear, inputs: &[&[usize]], body: OpBody| OpCase {
        op,
        linear,
        inputs: inputs.iter().map(|s| s.to_vec()).collect(),
        body,
    };
    vec![
        case("matmul", true, &[&[2, 3], &[3, 1]], |g, v| g.matmul(v[0], v[1])),
        case("matmul_batched", true, &[&[2, 2, 3], &[3, 4]], |g, v| {
            g.matmul(v[0], v[1])
        }),
        case("transpose", true, &[&[2, 3]], |g, v| g.transpose(v[0])),
        case("add", true, &[&[2, 3], &[2, 3]], |g, v| g.add(v[0], v[1])),
        case("add_broadcast", true, &[&[4, 3], &[3]], |g, v| g.add(v[0], v[1])),
        case("scale", true, &[&[5]], |g, v| g.scale(v[0], -1.7)),
        case("concat_axis0", true, &[&[2, 3], &[1, 3]], |g, v| {
            g.concat(&[v[0], v[1]], 0)
        }),
        case("concat_axis1", true, &[&[2, 2, 3], &[2, 1, 3]], |g, v| {
            g.concat(&[v[0], v[1]], 1)
        }),
        case("slice", true, &[&[3, 4, 2]], |g, v| g.slice(v[0], 1, 1, 3)),
        case("reshape", true, &[&[2, 6]], |g, v| g.reshape(v[0], &[3, 4])),
        case("embedding_lookup", true, &[&[5, 3]], |g, v| {
            g.embedding_lookup(v[0], &[4, 0, 4, 2])
        }),
        case("mean_pool", true, &[&[2, 3, 4]], |g, v| {
            let mask = Tensor::new(vec![2, 3], vec![1.0, 0.0, 1.0, 1.0, 1.0, 1.0])?;
            g.mean_pool(v[0], 1, Some(&mask))
        }),
        case("dropout", true, &[&[3, 4]], |g, v| {
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            g.dropout(v[0], 0.3, true, &mut rng)
        }),
        case("sum", true, &[&[3, 2]], |g, v| g.sum(v[0])),
        case("mul", false, &[&[2, 3], &[2, 3]], |g, v| g.mul(v[0], v[1])),
        case("softmax", false, &[&[3, 4]], |g, v| g.softmax(v[0], 1, None)),
        case("softmax_masked", false, &[&[3, 4]], |g, v| {
            let mask = Tensor::new(vec![4], vec![1.0, 0.0, 1.0, 1.0])?;
            g.softmax(v[0], 1, Some(&mask))
        }),
        case("softmax_axis0", false, &[&[3, 2, 2]], |g, v| g.softmax(v[0], 0, None)),
        case("tanh", false, &[&[2, 3]], |g, v| g.tanh(v[0])),
        case("gelu", false, &[&[2, 3]], |g, v| g.gelu(v[0])),
        case("layer_norm", false, &[&[3, 5], &[5], &[5]], |g, v| {
            g.layer_norm(v[0], v[1], v[2], 1e-5)
        }),
        case("euclidean_distance_rows", false, &[&[4], &[3, 4]], |g, v| {
            g.euclidean_distance_rows(v[0], v[1])
        }),
        case("normalize_sum", false, &[&[2, 3]], |g, v| {
            let sq = g.mul(v[0], v[0])?;
            g.normalize_sum(sq)
        }),
        case("reciprocal", false, &[&[4]], |g, v| {
            let sq = g.mul(v[0], v[0])?;
            g.reciprocal(sq, 0.5)
        }),
        case("cross_entropy", false, &[&[3, 4]], |g, v| {
            g.cross_entropy(v[0], &[1, 3, 0], &[true, false, true])
        }),
        case("nll", false, &[&[3, 4]], |g, v| {
            let p = g.softmax(v[0], 1, None)?;
            g.nll(p, &[2, 0, 1], &[true, true, false])
        }),
    ]
}

/// Checks every primitive against central differences. Each op output is
/// reduced to a scalar through a fixed random weighting so that no gradient
/// is trivially uniform.
pub fn op_suite(seed: u64) -> Result<Vec<OpCheck>> {
    let mut out = Vec::new();
    for (ci, case) in cases().into_iter().enumerate() {
        let mut store = ParamStore::new(seed.wrapping_add(ci as u64));
        let mut ids = Vec::new();
        for (i, shape) in case.inputs.iter().enumerate() {
            ids.push(store.add_normal(&format!("{}.in{i}", case.op), shape, 1.0, true)?);
        }
        let mut wrng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed ^ ci as u64);
        let probe = {
            let mut g = Graph::new();
            let vars: Vec<Var> = ids.iter().map(|&id| g.param(&store, id)).collect();
            let y = (case.body)(&mut g, &vars)?;
            g.value(y).shape().to_vec()
        };
        let n: usize = probe.iter().product();
        let weights = Tensor::new(probe.clone(), (0..n).map(|_| wrng.gen_range(-1.0..1.0)).collect())?;
        let body = case.body;
        let cfg = GradCheckConfig {
            threshold: if case.linear {
                LINEAR_THRESHOLD
            } else {
                DEFAULT_THRESHOLD
            },
            seed,
            ..Default::default()
        };
        let report = grad_check(
            &mut store,
            |s, g| {
                let vars: Vec<Var> = ids.iter().map(|&id| g.param(s, id)).collect();
                let y = body(g, &vars)?;
                let w = g.input(weights.clone());
                let prod = g.mul(y, w)?;
                g.sum(prod)
            },
            &cfg,
        )?;
        out.push(OpCheck {
            op: case.op,
            linear: case.linear,
            report,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_analytic() {
        let mut store = ParamStore::new(0);
        let id = store
            .add("x", Tensor::new(vec![2], vec![1.0, 2.0]).unwrap(), true)
            .unwrap();
        let f = |s: &ParamStore, g: &mut Graph| {
            let x = g.param(s, id);
            let sq = g.mul(x, x)?;
            g.sum(sq)
        };
        let mut g = Graph::new();
        let loss = f(&store, &mut g).unwrap();
        let grads = g.backward(loss).unwrap();
        let x = g.param(&store, id);
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0]);

        let report = grad_check(&mut store, f, &GradCheckConfig::default()).unwrap();
        assert!(report.passed);
        assert!(report.max_rel_error < 1e-8, "{}", report.max_rel_error);
    }

    #[test]
    fn frozen_params_are_excluded() {
        let mut store = ParamStore::new(0);
        let a = store.add("a", Tensor::scalar(1.5), true).unwrap();
        let b = store.add("b", Tensor::scalar(2.0), false).unwrap();
        let report = grad_check(
            &mut store,
            |s, g| {
                let x = g.param(s, a);
                let y = g.param(s, b);
                g.mul(x, y)
            },
            &GradCheckConfig::default(),
        )
        .unwrap();
        let names: Vec<_> = report.params.iter().map(|p| p.name.as_str()).collect();
        assert_eq!(names, ["a"]);
    }

    #[test]
    fn large_parameters_are_subsampled() {
        let mut store = ParamStore::new(0);
        let id = store.add_normal("big", &[50, 30], 1.0, true).unwrap();
        let cfg = GradCheckConfig {
            max_elements: 100,
            ..Default::default()
        };
        let report = grad_check(
            &mut store,
            |s, g| {
                let x = g.param(s, id);
                let t = g.tanh(x)?;
                g.sum(t)
            },
            &cfg,
        )
        .unwrap();
        assert_eq!(report.params[0].elements_checked, 100);
        assert!(report.passed);
    }

    #[test]
    fn every_op_passes() {
        for check in op_suite(1).unwrap() {
            assert!(
                check.report.passed,
                "{} max rel err {:e}",
                check.op, check.report.max_rel_error
            );
        }
    }

    #[test]
    fn matmul_two_by_three_linear_tolerance() {
        let check = op_suite(5).unwrap().into_iter().find(|c| c.op == "matmul").unwrap();
        assert!(check.report.max_rel_error < 1e-6);
    }
}
