//! Adaptive per-parameter L2 regularization.
//!
//! Each trainable parameter array w_n carries one raw scalar theta_n; its
//! regularization factor is lambda_n = A * hardsigmoid(theta_n), so lambda
//! stays in [0, A] while remaining trainable through backpropagation. The
//! constant-lambda baseline and the unconstrained ablation (raw theta as
//! lambda, which lets the penalty go negative and the weights blow up)
//! share the same plumbing.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::layers::ParamInfo;
use crate::scalar::{cast, Scalar};
use crate::tape::{ParamId, Tape, ValueId};
use crate::tensor::Tensor;

/// The five factor categories, one per kind of parameter array.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Category {
    ConvKernel,
    ConvBias,
    BnGamma,
    BnBeta,
    DenseKernel,
}

pub const ALL_CATEGORIES: [Category; 5] = [
    Category::ConvKernel,
    Category::ConvBias,
    Category::BnGamma,
    Category::BnBeta,
    Category::DenseKernel,
];

impl Category {
    pub fn as_str(&self) -> &'static str {
        match self {
            Category::ConvKernel => "conv_kernel",
            Category::ConvBias => "conv_bias",
            Category::BnGamma => "bn_gamma",
            Category::BnBeta => "bn_beta",
            Category::DenseKernel => "dense_kernel",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "conv_kernel" => Ok(Category::ConvKernel),
            "conv_bias" => Ok(Category::ConvBias),
            "bn_gamma" => Ok(Category::BnGamma),
            "bn_beta" => Ok(Category::BnBeta),
            "dense_kernel" => Ok(Category::DenseKernel),
            other => Err(Error::invalid("category", other.to_string())),
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Conv,
    BatchNorm,
    Dense,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FieldKind {
    Kernel,
    Bias,
    Gamma,
    Beta,
}

/// Descriptor of where a parameter lives, used to classify it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerField {
    pub layer: LayerKind,
    pub field: FieldKind,
}

impl LayerField {
    pub fn new(layer: LayerKind, field: FieldKind) -> Self {
        LayerField { layer, field }
    }
}

/// Maps a (layer, field) descriptor onto its factor category. Combinations
/// outside the taxonomy (e.g. a dense bias) are rejected rather than
/// guessed at.
pub fn classify_category(d: LayerField) -> Result<Category> {
    match (d.layer, d.field) {
        (LayerKind::Conv, FieldKind::Kernel) => Ok(Category::ConvKernel),
        (LayerKind::Conv, FieldKind::Bias) => Ok(Category::ConvBias),
        (LayerKind::BatchNorm, FieldKind::Gamma) => Ok(Category::BnGamma),
        (LayerKind::BatchNorm, FieldKind::Beta) => Ok(Category::BnBeta),
        (LayerKind::Dense, FieldKind::Kernel) => Ok(Category::DenseKernel),
        other => Err(Error::invalid(
            "parameter descriptor",
            format!("{:?} has no factor category", other),
        )),
    }
}

/// Hard sigmoid: 0 if x < -c, 1 if x > c, x/(2c) + 0.5 otherwise. The
/// interior branch is taken at exactly +/-c.
pub fn hard_sigmoid<F: Scalar>(x: F, c: F) -> Result<F> {
    if c <= F::zero() {
        return Err(Error::invalid(
            "hard sigmoid half-width",
            format!("c must be positive, got {}", c),
        ));
    }
    Ok(if x < -c {
        F::zero()
    } else if x > c {
        F::one()
    } else {
        x / (cast::<F>(2.0) * c) + cast::<F>(0.5)
    })
}

/// Derivative of the hard sigmoid: 1/(2c) on [-c, c], 0 outside.
pub fn hard_sigmoid_deriv<F: Scalar>(x: F, c: F) -> F {
    if x >= -c && x <= c {
        F::one() / (cast::<F>(2.0) * c)
    } else {
        F::zero()
    }
}

/// One trainable regularization factor, attached to exactly one parameter
/// array. The theta scalar is itself a parameter (so the optimizer updates
/// it) but is never part of the regularized set.
#[derive(Clone, Debug)]
pub struct RegFactor<F> {
    pub theta_id: ParamId,
    pub theta: Tensor<F>,
    pub amplitude: F,
    pub half_width: F,
    pub category: Category,
    pub param_id: ParamId,
    pub param_name: String,
}

impl<F: Scalar> RegFactor<F> {
    /// Current factor value lambda = A * f(theta), always in [0, A].
    pub fn lambda(&self) -> F {
        self.amplitude * hard_sigmoid(self.theta.item(), self.half_width).expect("validated c")
    }

    pub fn theta_value(&self) -> F {
        self.theta.item()
    }
}

/// The factor set for a model: one RegFactor per categorized parameter.
#[derive(Clone, Debug)]
pub struct AdaptiveRegularizer<F> {
    pub factors: Vec<RegFactor<F>>,
}

impl<F: Scalar> AdaptiveRegularizer<F> {
    /// Builds one factor per inventory entry, in registration order.
    /// `alloc_theta` must hand out fresh parameter ids for the thetas.
    pub fn new(
        inventory: &[ParamInfo],
        amplitude: F,
        half_width: F,
        theta_init: F,
        mut alloc_theta: impl FnMut(&str) -> ParamId,
    ) -> Result<Self> {
        if amplitude <= F::zero() {
            return Err(Error::invalid("amplitude", "A must be positive"));
        }
        if half_width <= F::zero() {
            return Err(Error::invalid("half width", "c must be positive"));
        }
        let mut factors = Vec::new();
        for info in inventory {
            let category = match info.category {
                Some(c) => c,
                None => continue,
            };
            let theta_id = alloc_theta(&info.name);
            factors.push(RegFactor {
                theta_id,
                theta: Tensor::scalar(theta_init),
                amplitude,
                half_width,
                category,
                param_id: info.id,
                param_name: info.name.clone(),
            });
        }
        Ok(AdaptiveRegularizer { factors })
    }

    pub fn for_each_theta_mut(&mut self, mut f: impl FnMut(ParamId, &mut Tensor<F>)) {
        for factor in &mut self.factors {
            f(factor.theta_id, &mut factor.theta);
        }
    }
}

fn check_coverage<F: Scalar>(
    params: &[(ParamId, &Tensor<F>)],
    factors: &[RegFactor<F>],
) -> Result<()> {
    if params.len() != factors.len() {
        return Err(Error::invalid(
            "regularizer coverage",
            format!("{} parameters but {} factors", params.len(), factors.len()),
        ));
    }
    for ((pid, _), factor) in params.iter().zip(factors) {
        if *pid != factor.param_id {
            return Err(Error::invalid(
                "regularizer coverage",
                format!(
                    "factor for {} (param {:?}) does not match parameter {:?}",
                    factor.param_name, factor.param_id, pid
                ),
            ));
        }
    }
    Ok(())
}

fn sum_squares_node<F: Scalar>(tape: &mut Tape<F>, w: ValueId) -> Result<ValueId> {
    let sq = tape.square(w);
    let rank = tape.value(sq).rank();
    let axes: Vec<usize> = (0..rank).collect();
    tape.reduce(sq, crate::tape::ReduceKind::Sum, &axes)
}

/// Sum over n of A * f(theta_n) * ||w_n||^2, with gradients flowing to both
/// the weights and the thetas. Terms are summed in factor order.
pub fn adaptive_penalty<F: Scalar>(
    tape: &mut Tape<F>,
    params: &[(ParamId, &Tensor<F>)],
    factors: &[RegFactor<F>],
) -> Result<ValueId> {
    check_coverage(params, factors)?;
    let mut total: Option<ValueId> = None;
    for ((pid, value), factor) in params.iter().zip(factors) {
        let w = tape.param(*pid, value);
        let theta = tape.param(factor.theta_id, &factor.theta);
        let f = tape.hard_sigmoid(theta, factor.half_width)?;
        let lambda = tape.scale(f, factor.amplitude);
        let ssq = sum_squares_node(tape, w)?;
        let term = tape.mul(lambda, ssq)?;
        total = Some(match total {
            Some(t) => tape.add(t, term)?,
            None => term,
        });
    }
    Ok(total.unwrap_or_else(|| tape.leaf(Tensor::scalar(F::zero()))))
}

/// The constant-lambda baseline: lambda * ||w_n||^2 summed over n in
/// registration order (term-by-term, so it agrees bit for bit with the
/// adaptive penalty when every factor saturates at f = 1 and A = lambda).
pub fn constant_penalty<F: Scalar>(
    tape: &mut Tape<F>,
    params: &[(ParamId, &Tensor<F>)],
    lambda: F,
) -> Result<ValueId> {
    if lambda < F::zero() {
        return Err(Error::invalid("lambda", "constant factor must be >= 0"));
    }
    let mut total: Option<ValueId> = None;
    for (pid, value) in params {
        let w = tape.param(*pid, value);
        let ssq = sum_squares_node(tape, w)?;
        let term = tape.scale(ssq, lambda);
        total = Some(match total {
            Some(t) => tape.add(t, term)?,
            None => term,
        });
    }
    Ok(total.unwrap_or_else(|| tape.leaf(Tensor::scalar(F::zero()))))
}

/// Ablation: raw theta_n as the factor, so lambda ranges over all reals.
/// Gradient descent then drives theta negative and rewards weight growth;
/// the model collapses. Only reachable through the explicit
/// `unconstrained` mode.
pub fn unconstrained_penalty<F: Scalar>(
    tape: &mut Tape<F>,
    params: &[(ParamId, &Tensor<F>)],
    factors: &[RegFactor<F>],
) -> Result<ValueId> {
    check_coverage(params, factors)?;
    let mut total: Option<ValueId> = None;
    for ((pid, value), factor) in params.iter().zip(factors) {
        let w = tape.param(*pid, value);
        let theta = tape.param(factor.theta_id, &factor.theta);
        let ssq = sum_squares_node(tape, w)?;
        let term = tape.mul(theta, ssq)?;
        total = Some(match total {
            Some(t) => tape.add(t, term)?,
            None => term,
        });
    }
    Ok(total.unwrap_or_else(|| tape.leaf(Tensor::scalar(F::zero()))))
}

/// Which penalty (if any) a training run applies.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RegMode {
    Adaptive,
    Constant,
    Unconstrained,
    Off,
}

impl RegMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            RegMode::Adaptive => "adaptive",
            RegMode::Constant => "constant",
            RegMode::Unconstrained => "unconstrained",
            RegMode::Off => "off",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "adaptive" => Ok(RegMode::Adaptive),
            "constant" => Ok(RegMode::Constant),
            "unconstrained" => Ok(RegMode::Unconstrained),
            "off" => Ok(RegMode::Off),
            other => Err(Error::invalid("reg mode", other.to_string())),
        }
    }
}

impl fmt::Display for RegMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Run-level regularizer: the mode plus whatever state it needs.
#[derive(Clone, Debug)]
pub enum Regularizer {
    Adaptive(AdaptiveRegularizer<f64>),
    Constant { lambda: f64 },
    Unconstrained(AdaptiveRegularizer<f64>),
    Off,
}

impl Regularizer {
    pub fn mode(&self) -> RegMode {
        match self {
            Regularizer::Adaptive(_) => RegMode::Adaptive,
            Regularizer::Constant { .. } => RegMode::Constant,
            Regularizer::Unconstrained(_) => RegMode::Unconstrained,
            Regularizer::Off => RegMode::Off,
        }
    }

    pub fn penalty(
        &self,
        tape: &mut Tape<f64>,
        params: &[(ParamId, &Tensor<f64>)],
    ) -> Result<Option<ValueId>> {
        match self {
            Regularizer::Adaptive(r) => Ok(Some(adaptive_penalty(tape, params, &r.factors)?)),
            Regularizer::Constant { lambda } => {
                Ok(Some(constant_penalty(tape, params, *lambda)?))
            }
            Regularizer::Unconstrained(r) => {
                Ok(Some(unconstrained_penalty(tape, params, &r.factors)?))
            }
            Regularizer::Off => Ok(None),
        }
    }

    pub fn factors(&self) -> Option<&AdaptiveRegularizer<f64>> {
        match self {
            Regularizer::Adaptive(r) | Regularizer::Unconstrained(r) => Some(r),
            _ => None,
        }
    }

    pub fn for_each_theta_mut(&mut self, f: impl FnMut(ParamId, &mut Tensor<f64>)) {
        match self {
            Regularizer::Adaptive(r) | Regularizer::Unconstrained(r) => r.for_each_theta_mut(f),
            _ => {}
        }
    }

    /// Per-parameter factor values at a step boundary. Constant mode
    /// reports its lambda for every parameter; off mode reports zero;
    /// unconstrained mode reports the raw theta.
    pub fn snapshot(&self, iteration: u64, inventory: &[ParamInfo]) -> RegSnapshot {
        let entries = match self {
            Regularizer::Adaptive(r) => r
                .factors
                .iter()
                .map(|f| SnapshotEntry {
                    param_name: f.param_name.clone(),
                    category: f.category,
                    lambda: f.lambda(),
                })
                .collect(),
            Regularizer::Unconstrained(r) => r
                .factors
                .iter()
                .map(|f| SnapshotEntry {
                    param_name: f.param_name.clone(),
                    category: f.category,
                    lambda: f.theta_value(),
                })
                .collect(),
            Regularizer::Constant { lambda } => categorized(inventory)
                .map(|(name, cat)| SnapshotEntry {
                    param_name: name.to_string(),
                    category: cat,
                    lambda: *lambda,
                })
                .collect(),
            Regularizer::Off => categorized(inventory)
                .map(|(name, cat)| SnapshotEntry {
                    param_name: name.to_string(),
                    category: cat,
                    lambda: 0.0,
                })
                .collect(),
        };
        RegSnapshot { iteration, entries }
    }
}

fn categorized(inventory: &[ParamInfo]) -> impl Iterator<Item = (&str, Category)> {
    inventory
        .iter()
        .filter_map(|i| i.category.map(|c| (i.name.as_str(), c)))
}

#[derive(Clone, Debug)]
pub struct SnapshotEntry {
    pub param_name: String,
    pub category: Category,
    pub lambda: f64,
}

/// Factor values of every parameter at one iteration.
#[derive(Clone, Debug)]
pub struct RegSnapshot {
    pub iteration: u64,
    pub entries: Vec<SnapshotEntry>,
}

/// Per-iteration, per-category median factor value. Categories with no
/// factors yield `None` (an empty CSV cell, not zero).
pub fn median_trajectory(snapshots: &[RegSnapshot]) -> Result<Vec<(u64, Category, Option<f64>)>> {
    if snapshots.is_empty() {
        return Err(Error::invalid("snapshots", "no snapshots recorded"));
    }
    let mut rows = Vec::new();
    for snap in snapshots {
        let mut per_cat: BTreeMap<Category, Vec<f64>> = BTreeMap::new();
        for entry in &snap.entries {
            per_cat.entry(entry.category).or_default().push(entry.lambda);
        }
        for cat in ALL_CATEGORIES {
            let median = per_cat.get(&cat).map(|vals| median_of(vals));
            rows.push((snap.iteration, cat, median));
        }
    }
    Ok(rows)
}

fn median_of(vals: &[f64]) -> f64 {
    let mut sorted = vals.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
    }
}

/// Histogram of factor values over evenly subdivided buckets. Buckets are
/// half-open except the last, which is closed above; values outside the
/// range land in per-category underflow/overflow counters.
#[derive(Clone, Debug)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: BTreeMap<Category, Vec<u64>>,
    pub underflow: BTreeMap<Category, u64>,
    pub overflow: BTreeMap<Category, u64>,
}

pub fn bucket_edges(lo: f64, hi: f64, buckets: usize) -> Vec<f64> {
    (0..=buckets)
        .map(|i| lo + (hi - lo) * (i as f64) / (buckets as f64))
        .collect()
}

pub fn factor_histogram(snapshot: &RegSnapshot, lo: f64, hi: f64, buckets: usize) -> Result<Histogram> {
    if lo >= hi {
        return Err(Error::invalid(
            "histogram range",
            format!("lower {} must be below upper {}", lo, hi),
        ));
    }
    if buckets == 0 {
        return Err(Error::invalid("histogram buckets", "need at least one bucket"));
    }
    let edges = bucket_edges(lo, hi, buckets);
    let mut hist = Histogram {
        edges: edges.clone(),
        counts: BTreeMap::new(),
        underflow: BTreeMap::new(),
        overflow: BTreeMap::new(),
    };
    for entry in &snapshot.entries {
        let counts = hist
            .counts
            .entry(entry.category)
            .or_insert_with(|| vec![0; buckets]);
        let v = entry.lambda;
        if v < lo {
            *hist.underflow.entry(entry.category).or_insert(0) += 1;
        } else if v > hi {
            *hist.overflow.entry(entry.category).or_insert(0) += 1;
        } else {
            // last bucket is closed above
            let mut b = buckets - 1;
            for i in 0..buckets {
                if v >= edges[i] && v < edges[i + 1] {
                    b = i;
                    break;
                }
            }
            counts[b] += 1;
        }
    }
    Ok(hist)
}

// ---------------------------------------------------------------------
// CSV interfaces
// ---------------------------------------------------------------------

pub fn write_snapshot_csv(path: &Path, snapshots: &[RegSnapshot]) -> Result<()> {
    let mut out = String::from("iteration,param,category,lambda\n");
    for snap in snapshots {
        for e in &snap.entries {
            out.push_str(&format!(
                "{},{},{},{:.17e}\n",
                snap.iteration, e.param_name, e.category, e.lambda
            ));
        }
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_snapshot_csv(path: &Path) -> Result<Vec<RegSnapshot>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut snapshots: Vec<RegSnapshot> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if lineno == 0 {
            if line != "iteration,param,category,lambda" {
                return Err(Error::format(path, format!("unexpected header: {}", line)));
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            return Err(Error::format(path, format!("line {}: expected 4 fields", lineno + 1)));
        }
        let iteration: u64 = fields[0]
            .parse()
            .map_err(|_| Error::format(path, format!("line {}: bad iteration", lineno + 1)))?;
        let category = Category::parse(fields[2])
            .map_err(|_| Error::format(path, format!("line {}: bad category", lineno + 1)))?;
        let lambda: f64 = fields[3]
            .parse()
            .map_err(|_| Error::format(path, format!("line {}: bad lambda", lineno + 1)))?;
        let entry = SnapshotEntry {
            param_name: fields[1].to_string(),
            category,
            lambda,
        };
        match snapshots.last_mut() {
            Some(s) if s.iteration == iteration => s.entries.push(entry),
            _ => snapshots.push(RegSnapshot {
                iteration,
                entries: vec![entry],
            }),
        }
    }
    Ok(snapshots)
}

pub fn write_trajectory_csv(path: &Path, rows: &[(u64, Category, Option<f64>)]) -> Result<()> {
    let mut out = String::from("iteration,category,median_lambda\n");
    for (iter, cat, median) in rows {
        match median {
            Some(m) => out.push_str(&format!("{},{},{:.17e}\n", iter, cat, m)),
            None => out.push_str(&format!("{},{},\n", iter, cat)),
        }
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn write_histogram_csv(path: &Path, hist: &Histogram) -> Result<()> {
    let mut buf = Vec::new();
    writeln!(buf, "category,bucket_lo,bucket_hi,count").unwrap();
    for (cat, counts) in &hist.counts {
        if let Some(&n) = hist.underflow.get(cat) {
            if n > 0 {
                writeln!(buf, "{},-inf,{},{}", cat, fmt_edge(hist.edges[0]), n).unwrap();
            }
        }
        for (i, &n) in counts.iter().enumerate() {
            writeln!(
                buf,
                "{},{},{},{}",
                cat,
                fmt_edge(hist.edges[i]),
                fmt_edge(hist.edges[i + 1]),
                n
            )
            .unwrap();
        }
        if let Some(&n) = hist.overflow.get(cat) {
            if n > 0 {
                writeln!(
                    buf,
                    "{},{},inf,{}",
                    cat,
                    fmt_edge(hist.edges[hist.edges.len() - 1]),
                    n
                )
                .unwrap();
            }
        }
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

fn fmt_edge(v: f64) -> String {
    format!("{}", v)
}
