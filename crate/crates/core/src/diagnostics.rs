//! Finite-difference verification suite covering every differentiable
//! operation plus the full model objective (theta gradients included),
//! shared by the `gradcheck` CLI subcommand and the acceptance tests.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::gradcheck::{grad_check, GradCheckReport};
use crate::losses::{batch_hard_triplet, cross_entropy, smoothed_label_matrix, total_loss};
use crate::model::{ModelConfig, ReidModel};
use crate::reg::adaptive_penalty;
use crate::stream::stream;
use crate::tape::{ParamId, ReduceKind, Tape, ValueId};
use crate::tensor::Tensor;
use crate::train::build_regularizer;
use crate::Real;

pub struct OpCheck {
    pub name: &'static str,
    pub report: GradCheckReport,
}

const H: f64 = 1e-5;

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Tensor<Real> {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

fn scalarize(tape: &mut Tape<Real>, v: ValueId) -> Result<ValueId> {
    if tape.value(v).shape() == [1] {
        return Ok(v);
    }
    let rank = tape.value(v).rank();
    let axes: Vec<usize> = (0..rank).collect();
    // squaring first makes the probe sensitive to sign errors that a
    // plain sum would cancel
    let sq = tape.square(v);
    tape.reduce(sq, ReduceKind::Sum, &axes)
}

type Builder = Box<dyn Fn(&mut Tape<Real>) -> Result<ValueId>>;

fn check(
    name: &'static str,
    params: Vec<Tensor<Real>>,
    tol: f64,
    build: Builder,
) -> Result<OpCheck> {
    let params: Vec<(ParamId, Tensor<Real>)> = params
        .into_iter()
        .enumerate()
        .map(|(i, t)| (ParamId(i), t))
        .collect();
    let report = grad_check(&params, H, tol, move |tape| build(tape))?;
    Ok(OpCheck { name, report })
}

/// Runs the whole suite. Primitive ops are held to 1e-6 relative error at
/// random non-kink points; composites and the end-to-end objective to 1e-5.
pub fn gradcheck_suite() -> Result<Vec<OpCheck>> {
    let mut rng = stream(0x9d1a_6005, 7);
    let mut checks = Vec::new();

    // elementwise binary
    let a = rand_tensor(&[3, 4], &mut rng, -1.0, 1.0);
    let b = rand_tensor(&[3, 4], &mut rng, -1.0, 1.0);
    checks.push(check(
        "add",
        vec![a, b],
        1e-6,
        Box::new(|t| {
            let (a, b) = (ParamId(0), ParamId(1));
            let av = t.param(a, &Tensor::zeros(&[3, 4]));
            let bv = t.param(b, &Tensor::zeros(&[3, 4]));
            let s = t.add(av, bv)?;
            scalarize(t, s)
        }),
    )?);
    let a = rand_tensor(&[3, 4], &mut rng, -1.0, 1.0);
    let b = rand_tensor(&[3, 4], &mut rng, -1.0, 1.0);
    checks.push(check(
        "sub",
        vec![a, b],
        1e-6,
        Box::new(|t| {
            let av = t.param(ParamId(0), &Tensor::zeros(&[3, 4]));
            let bv = t.param(ParamId(1), &Tensor::zeros(&[3, 4]));
            let s = t.sub(av, bv)?;
            scalarize(t, s)
        }),
    )?);
    let a = rand_tensor(&[3, 4], &mut rng, -1.0, 1.0);
    let b = rand_tensor(&[3, 4], &mut rng, -1.0, 1.0);
    checks.push(check(
        "mul",
        vec![a, b],
        1e-6,
        Box::new(|t| {
            let av = t.param(ParamId(0), &Tensor::zeros(&[3, 4]));
            let bv = t.param(ParamId(1), &Tensor::zeros(&[3, 4]));
            let s = t.mul(av, bv)?;
            scalarize(t, s)
        }),
    )?);
    let a = rand_tensor(&[3, 4], &mut rng, -1.0, 1.0);
    let bias = rand_tensor(&[4], &mut rng, -1.0, 1.0);
    checks.push(check(
        "add_bias",
        vec![a, bias],
        1e-6,
        Box::new(|t| {
            let av = t.param(ParamId(0), &Tensor::zeros(&[3, 4]));
            let bv = t.param(ParamId(1), &Tensor::zeros(&[4]));
            let s = t.add_bias(av, bv)?;
            scalarize(t, s)
        }),
    )?);
    let a = rand_tensor(&[3, 4], &mut rng, -1.0, 1.0);
    checks.push(check(
        "scale",
        vec![a],
        1e-6,
        Box::new(|t| {
            let av = t.param(ParamId(0), &Tensor::zeros(&[3, 4]));
            let s = t.scale(av, 1.7);
            scalarize(t, s)
        }),
    )?);

    // elementwise unary; inputs kept away from kinks
    let a = rand_tensor(&[3, 4], &mut rng, 0.2, 1.5);
    checks.push(check(
        "relu",
        vec![a],
        1e-6,
        Box::new(|t| {
            let av = t.param(ParamId(0), &Tensor::zeros(&[3, 4]));
            let s = t.relu(av);
            scalarize(t, s)
        }),
    )?);
    let a = rand_tensor(&[3, 4], &mut rng, -1.0, 1.0);
    checks.push(check(
        "exp",
        vec![a],
        1e-6,
        Box::new(|t| {
            let av = t.param(ParamId(0), &Tensor::zeros(&[3, 4]));
            let s = t.exp(av);
            scalarize(t, s)
        }),
    )?);
    let a = rand_tensor(&[3, 4], &mut rng, 0.5, 2.0);
    checks.push(check(
        "log",
        vec![a],
        1e-6,
        Box::new(|t| {
            let av = t.param(ParamId(0), &Tensor::zeros(&[3, 4]));
            let s = t.log(av);
            scalarize(t, s)
        }),
    )?);
    let a = rand_tensor(&[3, 4], &mut rng, -1.0, 1.0);
    checks.push(check(
        "square",
        vec![a],
        1e-6,
        Box::new(|t| {
            let av = t.param(ParamId(0), &Tensor::zeros(&[3, 4]));
            let s = t.square(av);
            scalarize(t, s)
        }),
    )?);
    let a = rand_tensor(&[3, 4], &mut rng, -2.0, 2.0);
    checks.push(check(
        "clamp",
        vec![a],
        1e-6,
        Box::new(|t| {
            let av = t.param(ParamId(0), &Tensor::zeros(&[3, 4]));
            let s = t.clamp(av, -0.9, 0.9)?;
            scalarize(t, s)
        }),
    )?);
    let a = rand_tensor(&[8], &mut rng, -4.0, 4.0);
    checks.push(check(
        "hard_sigmoid",
        vec![a],
        1e-6,
        Box::new(|t| {
            let av = t.param(ParamId(0), &Tensor::zeros(&[8]));
            let s = t.hard_sigmoid(av, 2.5)?;
            scalarize(t, s)
        }),
    )?);

    // linear algebra and reductions
    let a = rand_tensor(&[3, 4], &mut rng, -1.0, 1.0);
    let b = rand_tensor(&[4, 2], &mut rng, -1.0, 1.0);
    checks.push(check(
        "matmul",
        vec![a, b],
        1e-6,
        Box::new(|t| {
            let av = t.param(ParamId(0), &Tensor::zeros(&[3, 4]));
            let bv = t.param(ParamId(1), &Tensor::zeros(&[4, 2]));
            let s = t.matmul(av, bv)?;
            scalarize(t, s)
        }),
    )?);
    let a = rand_tensor(&[2, 3, 4, 2], &mut rng, -1.0, 1.0);
    checks.push(check(
        "reduce_sum",
        vec![a],
        1e-6,
        Box::new(|t| {
            let av = t.param(ParamId(0), &Tensor::zeros(&[2, 3, 4, 2]));
            let s = t.reduce(av, ReduceKind::Sum, &[2, 3])?;
            scalarize(t, s)
        }),
    )?);
    let a = rand_tensor(&[2, 3, 4, 2], &mut rng, -1.0, 1.0);
    checks.push(check(
        "reduce_mean",
        vec![a],
        1e-6,
        Box::new(|t| {
            let av = t.param(ParamId(0), &Tensor::zeros(&[2, 3, 4, 2]));
            let s = t.reduce(av, ReduceKind::Mean, &[2, 3])?;
            scalarize(t, s)
        }),
    )?);

    // structured ops
    let x = rand_tensor(&[2, 3, 5, 5], &mut rng, -1.0, 1.0);
    let k = rand_tensor(&[4, 3, 3, 3], &mut rng, -0.5, 0.5);
    checks.push(check(
        "conv2d",
        vec![x, k],
        1e-5,
        Box::new(|t| {
            let xv = t.param(ParamId(0), &Tensor::zeros(&[2, 3, 5, 5]));
            let kv = t.param(ParamId(1), &Tensor::zeros(&[4, 3, 3, 3]));
            let s = t.conv2d(xv, kv, 1, 1)?;
            scalarize(t, s)
        }),
    )?);
    let x = rand_tensor(&[2, 3, 4, 4], &mut rng, -1.0, 1.0);
    checks.push(check(
        "avg_pool2",
        vec![x],
        1e-6,
        Box::new(|t| {
            let xv = t.param(ParamId(0), &Tensor::zeros(&[2, 3, 4, 4]));
            let s = t.avg_pool2(xv)?;
            scalarize(t, s)
        }),
    )?);
    let x = rand_tensor(&[6, 3], &mut rng, -1.0, 1.0);
    let g = rand_tensor(&[3], &mut rng, 0.5, 1.5);
    let bt = rand_tensor(&[3], &mut rng, -0.3, 0.3);
    checks.push(check(
        "batch_norm_train",
        vec![x, g, bt],
        1e-5,
        Box::new(|t| {
            let xv = t.param(ParamId(0), &Tensor::zeros(&[6, 3]));
            let gv = t.param(ParamId(1), &Tensor::zeros(&[3]));
            let bv = t.param(ParamId(2), &Tensor::zeros(&[3]));
            let (s, _, _) = t.batch_norm_train(xv, gv, bv, 1e-5)?;
            scalarize(t, s)
        }),
    )?);
    let x = rand_tensor(&[6, 3], &mut rng, -1.0, 1.0);
    let g = rand_tensor(&[3], &mut rng, 0.5, 1.5);
    let bt = rand_tensor(&[3], &mut rng, -0.3, 0.3);
    checks.push(check(
        "batch_norm_infer",
        vec![x, g, bt],
        1e-6,
        Box::new(|t| {
            let xv = t.param(ParamId(0), &Tensor::zeros(&[6, 3]));
            let gv = t.param(ParamId(1), &Tensor::zeros(&[3]));
            let bv = t.param(ParamId(2), &Tensor::zeros(&[3]));
            let s = t.batch_norm_infer(xv, gv, bv, &[0.1, -0.2, 0.3], &[1.1, 0.9, 1.3], 1e-5)?;
            scalarize(t, s)
        }),
    )?);
    let x = rand_tensor(&[2, 3, 4, 2], &mut rng, -1.0, 1.0);
    checks.push(check(
        "slice_rows",
        vec![x],
        1e-6,
        Box::new(|t| {
            let xv = t.param(ParamId(0), &Tensor::zeros(&[2, 3, 4, 2]));
            let s = t.slice_rows(xv, 1, 2)?;
            scalarize(t, s)
        }),
    )?);

    // losses
    let logits = rand_tensor(&[4, 5], &mut rng, -2.0, 2.0);
    let targets = smoothed_label_matrix(&[1, 3, 5, 2], 0.1, 5)?;
    checks.push(check(
        "cross_entropy",
        vec![logits],
        1e-5,
        Box::new(move |t| {
            let zv = t.param(ParamId(0), &Tensor::zeros(&[4, 5]));
            cross_entropy(t, zv, &targets)
        }),
    )?);
    let emb = rand_tensor(&[8, 4], &mut rng, -1.0, 1.0);
    let ids = vec![0, 0, 1, 1, 2, 2, 3, 3];
    checks.push(check(
        "batch_hard_triplet",
        vec![emb],
        1e-5,
        Box::new(move |t| {
            let ev = t.param(ParamId(0), &Tensor::zeros(&[8, 4]));
            batch_hard_triplet(t, ev, &ids, 0.3)
        }),
    )?);

    // the end-to-end objective, thetas included
    checks.push(full_model_check()?);
    Ok(checks)
}

/// Gradient check of the complete training objective (cross-entropy,
/// triplet and adaptive penalty) on a tiny model, probing every weight and
/// every theta.
pub fn full_model_check() -> Result<OpCheck> {
    let mut rng = stream(0x9d1a_6005, 99);
    let cfg = ModelConfig {
        input_h: 16,
        input_w: 8,
        channels: vec![2, 3, 4],
        kernel_size: 3,
        reduction_channels: 2,
        stripes: 2,
        num_classes: 2,
        ..ModelConfig::default()
    };
    let mut init_rng = stream(0x9d1a_6005, 100);
    let model = ReidModel::build(cfg, Some(&mut init_rng))?;
    let run_cfg = crate::config::RunConfig::default();
    let reg = build_regularizer(&run_cfg, &model, crate::reg::RegMode::Adaptive)?;

    let images = rand_tensor(&[4, 1, 16, 8], &mut rng, 0.0, 1.0);
    let classes = vec![0usize, 0, 1, 1];
    let targets = smoothed_label_matrix(&[1, 1, 2, 2], 0.1, 2)?;

    let mut params: Vec<(ParamId, Tensor<Real>)> = model.param_values();
    if let Some(ar) = reg.factors() {
        for f in &ar.factors {
            params.push((f.theta_id, f.theta.clone()));
        }
    }

    let report = grad_check(&params, H, 1e-5, move |tape| {
        let mut m = model.clone();
        let heads = m.forward_train(tape, &images)?;
        let mut ce_terms = Vec::new();
        let mut tr_terms = Vec::new();
        for head in &heads {
            ce_terms.push(cross_entropy(tape, head.logits, &targets)?);
        }
        for head in &heads {
            tr_terms.push(batch_hard_triplet(tape, head.embedding, &classes, 0.3)?);
        }
        let values = m.param_values();
        let refs: Vec<(ParamId, &Tensor<Real>)> = values.iter().map(|(id, t)| (*id, t)).collect();
        let factors = reg.factors().unwrap();
        let penalty = adaptive_penalty(tape, &refs, &factors.factors)?;
        total_loss(tape, &ce_terms, &tr_terms, Some(penalty))
    })?;
    Ok(OpCheck {
        name: "full_model_loss",
        report,
    })
}

/// Human-readable table of suite results.
pub fn format_suite(checks: &[OpCheck]) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<20} {:>8} {:>14} {:>9} {:>6}\n",
        "op", "coords", "max_rel_err", "excluded", "pass"
    ));
    for c in checks {
        out.push_str(&format!(
            "{:<20} {:>8} {:>14.3e} {:>9} {:>6}\n",
            c.name,
            c.report.checked,
            c.report.max_rel_err,
            c.report.excluded.len(),
            if c.report.pass { "ok" } else { "FAIL" }
        ));
    }
    out
}
