//! Quick installation checks: gradient checks and analytic graph cases.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::graph::{pearson_similarity, RegionGraph};
use crate::model::{forecast_on_tape, BoundParams, Feed, Hyper, ModelParams};
use crate::tensor::{gradient_check, gradient_check_many, Tape, Tensor, Var};
use crate::training::sequence_loss;

#[derive(Clone, Debug, Serialize)]
pub struct Check {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

fn check(name: &str, outcome: Result<(bool, String)>) -> Check {
    match outcome {
        Ok((pass, detail)) => Check {
            name: name.into(),
            pass,
            detail,
        },
        Err(e) => Check {
            name: name.into(),
            pass: false,
            detail: format!("error: {e}"),
        },
    }
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .expect("shape")
}

fn op_gradients(rng: &mut ChaCha8Rng) -> Result<(bool, String)> {
    let x = random(rng, &[3, 4]);
    let w = random(rng, &[4, 2]);
    let mut worst: f64 = 0.0;
    worst = worst.max(gradient_check(
        |t, v| {
            let s = t.sigmoid(v)?;
            let m = t.mul(s, v)?;
            t.sum(m, None)
        },
        &x,
        1e-5,
    )?);
    worst = worst.max(gradient_check(
        |t, v| {
            let y = t.tanh(v)?;
            let p = t.softmax(y, 1)?;
            let q = t.mul(p, v)?;
            t.sum(q, None)
        },
        &x,
        1e-5,
    )?);
    let report = gradient_check_many(
        |t: &mut Tape, vs: &[Var]| {
            let y = t.matmul(vs[0], vs[1])?;
            let y = t.tanh(y)?;
            let z = t.mul(y, y)?;
            t.mean(z, None)
        },
        &[x, w],
        1e-5,
    )?;
    worst = worst.max(report.max_error());
    Ok((worst < 1e-6, format!("max relative error {worst:.2e}")))
}

fn model_gradients(rng: &mut ChaCha8Rng) -> Result<(bool, String)> {
    let hp = Hyper::new(5, 3, 3, 2, 4, 1, 10).with_hidden(4);
    let params = ModelParams::init(hp.clone(), 1)?;
    let mut adj = Tensor::zeros(&[4, 4]);
    for (i, j) in [(0, 1), (1, 2), (2, 3)] {
        adj.set(&[i, j], 1.0);
        adj.set(&[j, i], 1.0);
    }
    let graph = RegionGraph::from_adjacency(adj, 0.0)?;
    let x = random(rng, &[1, 5, 4, 1]);
    let y = random(rng, &[1, 2, 4, 1]);
    let mut e = Tensor::zeros(&[1, 2, 10]);
    e.set(&[0, 0, 1], 1.0);
    e.set(&[0, 1, 2], 1.0);
    let names: Vec<String> = params.tensors.keys().cloned().collect();
    let inputs: Vec<Tensor> = params.tensors.values().cloned().collect();
    let report = gradient_check_many(
        |tape: &mut Tape, vars: &[Var]| {
            let map: BTreeMap<String, Var> =
                names.iter().cloned().zip(vars.iter().copied()).collect();
            let bound = BoundParams::from_vars(hp.clone(), map)?;
            let prop = tape.constant(graph.propagation().clone());
            let xv = tape.constant(x.clone());
            let ev = tape.constant(e.clone());
            let yv = tape.constant(y.clone());
            let out = forecast_on_tape(tape, &bound, prop, xv, ev, Feed::TeacherForced(yv))?;
            sequence_loss(tape, out.predictions, yv)
        },
        &inputs,
        1e-5,
    )?;
    let frac = report.fraction_below(1e-4);
    let max = report.max_error();
    Ok((
        frac >= 0.99 && max < 1e-3,
        format!(
            "{} parameters, {:.2}% below 1e-4, max {max:.2e}",
            report.coordinates(),
            frac * 100.0
        ),
    ))
}

fn graph_cases() -> Result<(bool, String)> {
    let two = RegionGraph::from_adjacency(Tensor::matrix(&[vec![0.0, 1.0], vec![1.0, 0.0]])?, 0.0)?;
    let two_err = two.propagation().max_abs_diff(&Tensor::full(&[2, 2], 0.5));
    let iso = RegionGraph::from_adjacency(Tensor::zeros(&[3, 3]), 0.0)?;
    let iso_ok = iso.propagation() == &Tensor::identity(3);
    let r = pearson_similarity(&[1.0, 2.0, 3.0, 4.0], &[2.0, 4.0, 6.0, 8.0])?;
    let flat = pearson_similarity(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0])?;
    let pass = two_err <= 1e-12 && iso_ok && (r - 1.0).abs() < 1e-12 && flat == 0.0;
    Ok((
        pass,
        format!("two-region err {two_err:.1e}, isolated identity {iso_ok}, pearson {r}, constant {flat}"),
    ))
}

/// Runs every check; deterministic.
pub fn run() -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    vec![
        check("operation gradients", op_gradients(&mut rng)),
        check("model gradients", model_gradients(&mut rng)),
        check("analytic graph cases", graph_cases()),
    ]
}
