//! Central-difference gradient verification.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbone::{Backbone, BackboneConfig};
use crate::error::{Error, Result};
use crate::head::{Head, HeadConfig};
use crate::tensor::Tensor;
use crate::graph::{Graph, NodeId};
use crate::tensor::Scalar;

/// Finite-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Relative errors are `|analytic - numeric| / max(|analytic|, |numeric|, FLOOR)`,
/// so gradients far below the floor are compared absolutely.
pub const RELATIVE_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub max_relative_error: f64,
    /// Flat index of the worst element.
    pub worst_index: usize,
    pub passed: bool,
    pub failure: Option<String>,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.passed)
    }

    pub fn max_relative_error(&self) -> f64 {
        self.params
            .iter()
            .map(|p| p.max_relative_error)
            .fold(0.0, f64::max)
    }

    pub fn failures(&self) -> impl Iterator<Item = &ParamCheck> {
        self.params.iter().filter(|p| !p.passed)
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for p in &self.params {
            let status = if p.passed { "ok" } else { "FAIL" };
            write!(
                f,
                "{status:>4}  {:<24} max rel err {:.3e} (at {})",
                p.name, p.max_relative_error, p.worst_index
            )?;
            if let Some(why) = &p.failure {
                write!(f, "  {why}")?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

/// Compare `graph.backward` against central differences for every parameter.
///
/// `build` must rebuild the scalar loss from the graph's current parameters
/// on a freshly reset tape.
pub fn grad_check<T, F>(graph: &mut Graph<T>, build: F, tolerance: f64) -> Result<GradCheckReport>
where
    T: Scalar,
    F: FnMut(&mut Graph<T>) -> Result<NodeId>,
{
    grad_check_with(graph, build, tolerance, |g, loss| g.backward(loss))
}

/// As [`grad_check`], with a caller-supplied analytic pass (useful for
/// checking that a broken rule is caught).
pub fn grad_check_with<T, F, B>(
    graph: &mut Graph<T>,
    mut build: F,
    tolerance: f64,
    mut backward: B,
) -> Result<GradCheckReport>
where
    T: Scalar,
    F: FnMut(&mut Graph<T>) -> Result<NodeId>,
    B: FnMut(&mut Graph<T>, NodeId) -> Result<()>,
{
    if !(tolerance > 0.0) {
        return Err(Error::invalid(format!("tolerance must be positive, got {tolerance}")));
    }
    let names: Vec<String> = graph.params().iter().map(|p| p.name.clone()).collect();

    graph.reset();
    let loss = match build(graph) {
        Ok(l) => l,
        Err(e @ Error::NonFinite { .. }) => {
            let params = names
                .into_iter()
                .map(|name| ParamCheck {
                    name,
                    max_relative_error: f64::INFINITY,
                    worst_index: 0,
                    passed: false,
                    failure: Some(e.to_string()),
                })
                .collect();
            return Ok(GradCheckReport { tolerance, params });
        }
        Err(e) => return Err(e),
    };
    backward(graph, loss)?;
    let analytic: Vec<Vec<f64>> = graph
        .params()
        .iter()
        .map(|p| p.grad.as_ref().map(|g| g.to_f64_vec()).unwrap_or_default())
        .collect();
    graph.zero_grads();

    let mut eval = |graph: &mut Graph<T>| -> Result<f64> {
        graph.reset();
        let l = build(graph)?;
        Ok(graph.value(l).item().as_f64())
    };

    let mut params = Vec::with_capacity(names.len());
    for (pi, name) in names.into_iter().enumerate() {
        let id = graph.param_id(&name).expect("parameter listed above");
        let n = graph.param_value(id).len();
        let mut worst = 0.0f64;
        let mut worst_index = 0;
        let mut failure = None;
        if analytic[pi].len() != n {
            failure = Some("no analytic gradient produced".to_string());
            worst = f64::INFINITY;
        }
        for i in 0..n {
            if failure.is_some() {
                break;
            }
            let original = graph.param_value(id).data()[i];
            let h = T::of_f64(FD_STEP);
            graph.param_value_mut(id).data_mut()[i] = original + h;
            let plus = eval(graph);
            graph.param_value_mut(id).data_mut()[i] = original - h;
            let minus = eval(graph);
            graph.param_value_mut(id).data_mut()[i] = original;
            let (plus, minus) = match (plus, minus) {
                (Ok(p), Ok(m)) => (p, m),
                (Err(e), _) | (_, Err(e)) => {
                    failure = Some(format!("element {i}: {e}"));
                    worst = f64::INFINITY;
                    worst_index = i;
                    break;
                }
            };
            // the effective step after rounding into T
            let step = (original + h).as_f64() - (original - h).as_f64();
            let numeric = (plus - minus) / step;
            let err = relative_error(analytic[pi][i], numeric);
            if !(err <= worst) {
                worst = err;
                worst_index = i;
            }
        }
        let passed = failure.is_none() && worst <= tolerance;
        params.push(ParamCheck {
            name,
            max_relative_error: worst,
            worst_index,
            passed,
            failure,
        });
    }
    graph.reset();
    Ok(GradCheckReport { tolerance, params })
}

/// Primitives covered by [`check_primitive`].
pub const PRIMITIVE_CASES: [&str; 21] = [
    "matmul",
    "conv2d",
    "conv2d_stride2",
    "add",
    "add_row",
    "subtract",
    "multiply",
    "scale",
    "tanh",
    "relu",
    "abs",
    "log",
    "sum",
    "mean",
    "sum_last_axis",
    "max_pool2x2",
    "global_avg_pool",
    "softmax",
    "reshape",
    "tile",
    "grouped_matmul",
];

fn random_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, lo: f64, hi: f64, min_abs: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let v = rng.gen_range(lo..hi);
            if v.abs() >= min_abs {
                break v;
            }
        })
        .collect();
    Tensor::new(shape, data).expect("positive dims")
}

/// Gradient check of one primitive on a random instance. The loss is
/// `sum(op(params) ⊙ R)` with a fixed random `R`, so every output element
/// carries a distinct weight.
pub fn check_primitive(name: &str, seed: u64, tolerance: f64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dim = |lo: usize, hi: usize| rng.gen_range(lo..=hi);
    let (n, k, m) = (dim(1, 3), dim(1, 4), dim(1, 4));
    let (h, w, c, o) = (dim(3, 5), dim(3, 5), dim(1, 3), dim(1, 3));
    let mut g = Graph::<f64>::new();
    let t = |rng: &mut ChaCha8Rng, shape: Vec<usize>| random_tensor(rng, shape, -1.0, 1.0, 0.0);
    let (a_shape, b_shape): (Vec<usize>, Option<Vec<usize>>) = match name {
        "matmul" => (vec![n, k], Some(vec![k, m])),
        "conv2d" | "conv2d_stride2" => (vec![n, h, w, c], Some(vec![3, 3, c, o])),
        "add" | "subtract" | "multiply" => (vec![n, k, m], Some(vec![n, k, m])),
        "add_row" => (vec![n, k, m], Some(vec![m])),
        "max_pool2x2" | "global_avg_pool" => (vec![n, h, w, c], None),
        "reshape" => (vec![2, 6], None),
        "grouped_matmul" => (vec![n * 2, c * k], Some(vec![c, k, m])),
        other if PRIMITIVE_CASES.contains(&other) => (vec![n, k + 1], None),
        other => return Err(Error::invalid(format!("no gradient case for `{other}`"))),
    };
    let a_value = match name {
        // keep clear of the kink at zero
        "relu" | "abs" => random_tensor(&mut rng, a_shape, -1.0, 1.0, 0.05),
        "log" => random_tensor(&mut rng, a_shape, 0.2, 2.0, 0.0),
        _ => t(&mut rng, a_shape),
    };
    let a = g.add_param("a", a_value)?;
    let b = match b_shape {
        Some(s) => {
            let v = t(&mut rng, s);
            Some(g.add_param("b", v)?)
        }
        None => None,
    };
    let factor = rng.gen_range(-2.0..2.0);
    let mut weights: Option<Tensor<f64>> = None;
    let name = name.to_string();
    let mut build = |g: &mut Graph<f64>| -> Result<NodeId> {
        let an = g.use_param(a);
        let bn = b.map(|b| g.use_param(b));
        let out = match name.as_str() {
            "matmul" => g.matmul(an, bn.expect("b"))?,
            "conv2d" => g.conv2d(an, bn.expect("b"), 1, 1)?,
            "conv2d_stride2" => g.conv2d(an, bn.expect("b"), 2, 0)?,
            "add" => g.add(an, bn.expect("b"))?,
            "add_row" => g.add_row(an, bn.expect("b"))?,
            "subtract" => g.sub(an, bn.expect("b"))?,
            "multiply" => g.mul(an, bn.expect("b"))?,
            "scale" => g.scale(an, factor)?,
            "tanh" => g.tanh(an)?,
            "relu" => g.relu(an)?,
            "abs" => g.abs(an)?,
            "log" => g.log(an, 1e-12)?,
            "sum" => g.sum(an)?,
            "mean" => g.mean(an)?,
            "sum_last_axis" => g.sum_last_axis(an)?,
            "max_pool2x2" => g.max_pool2x2(an)?,
            "global_avg_pool" => g.global_avg_pool(an)?,
            "softmax" => g.softmax(an)?,
            "reshape" => g.reshape(an, vec![3, 4])?,
            "tile" => g.tile(an, 3)?,
            "grouped_matmul" => g.grouped_matmul(an, bn.expect("b"))?,
            _ => unreachable!(),
        };
        let shape = g.value(out).shape().to_vec();
        let r = weights
            .get_or_insert_with(|| {
                let mut wr = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
                random_tensor(&mut wr, shape, -1.0, 1.0, 0.0)
            })
            .clone();
        let rn = g.input(r)?;
        let weighted = g.mul(out, rn)?;
        g.sum(weighted)
    };
    grad_check(&mut g, &mut build, tolerance)
}

/// Every primitive once, each on its own instance derived from `seed`.
pub fn primitive_suite(seed: u64, tolerance: f64) -> Result<Vec<(&'static str, GradCheckReport)>> {
    PRIMITIVE_CASES
        .iter()
        .enumerate()
        .map(|(i, &name)| check_primitive(name, crate::rng::derive_seed(seed, i as u64), tolerance).map(|r| (name, r)))
        .collect()
}

/// End-to-end check of the classification loss through the 2-D backbone and
/// a reconstruction head on a small random batch.
pub fn end_to_end_check(head: HeadConfig, seed: u64, tolerance: f64) -> Result<GradCheckReport> {
    let mut g = Graph::<f64>::new();
    let backbone = Backbone::build(BackboneConfig::mlp2d(8, seed), &mut g)?;
    let head = Head::build(head, 8, seed ^ 1, &mut g)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 2);
    let n = 4;
    let x = random_tensor(&mut rng, vec![n, 2], -2.0, 2.0, 0.0);
    let labels: Vec<usize> = (0..n).map(|i| i % head.config().num_classes).collect();
    grad_check(
        &mut g,
        |g| {
            let xn = g.input(x.clone())?;
            let z = backbone.forward(g, xn)?;
            let out = head.forward(g, z)?;
            Ok(head.loss(g, &out, &labels)?.0)
        },
        tolerance,
    )
}
