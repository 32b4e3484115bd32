//! Randomized identity suite behind `lorafed verify`.
//!
//! Every check draws its own instances from a seeded stream and records the
//! worst error seen. Reference values are computed with plain scalar loops
//! or central finite differences, never with the code under test.

use std::fmt::Write as _;

use rand::Rng;

use crate::aggregate::{self, BaseUpdate, ClientUpdate, Strategy};
use crate::error::Result;
use crate::lora::{FrozenBase, LoraAdapter, MatrixId, MatrixKind};
use crate::model::{
    init_backbone, Architecture, LossKind, ModelConfig, ModelState, Objective, TrainSpec,
};
use crate::numkit::gradcheck::{max_relative_error, numerical_gradient, DEFAULT_STEP};
use crate::numkit::{Tape, Tensor, Var};
use crate::rng::StreamRng;

pub const EXACTNESS_TOL: f64 = 1e-10;
pub const PAIRWISE_TOL: f64 = 1e-10;
pub const NULL_TOL: f64 = 1e-12;
/// Smallest `‖W_res‖_F` accepted for the heterogeneous control instance.
pub const CONTROL_MIN: f64 = 1e-6;
pub const OP_GRAD_TOL: f64 = 1e-5;
pub const MODEL_GRAD_TOL: f64 = 1e-4;
/// Entries smaller than this are compared absolutely in gradient checks.
pub const GRAD_FLOOR: f64 = 1e-6;

/// Deliberate corruptions used to show the suite can fail.
#[doc(hidden)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    /// Negates the first entry of every residual before it is used.
    FlipResidualSign,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SuiteOptions {
    pub trials: usize,
    pub max_k: usize,
    /// Random model configurations for the composed-model gradient check.
    pub model_configs: usize,
    pub seed: u64,
    #[doc(hidden)]
    pub fault: Option<Fault>,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        SuiteOptions {
            trials: 500,
            max_k: 16,
            model_configs: 50,
            seed: 0,
            fault: None,
        }
    }
}

/// Outcome of one identity.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub trials: usize,
    /// Worst error, or for lower-bound checks the smallest value seen.
    pub worst: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl CheckResult {
    fn upper(name: impl Into<String>, trials: usize, worst: f64, tolerance: f64) -> Self {
        CheckResult {
            name: name.into(),
            trials,
            worst,
            tolerance,
            passed: worst.is_finite() && worst < tolerance,
        }
    }
}

fn rng_for(seed: u64, check: u64) -> StreamRng {
    crate::rng::stream(seed, crate::rng::Purpose::Verify, &[check])
}

/// A random aggregation instance for one adapted matrix.
#[derive(Debug, Clone)]
pub struct Instance {
    pub w0: Tensor,
    pub updates: Vec<ClientUpdate>,
    pub weights: Vec<f64>,
}

const ID: MatrixId = MatrixId {
    block: 0,
    kind: MatrixKind::Q,
};

fn simplex<R: Rng + ?Sized>(k: usize, rng: &mut R) -> Vec<f64> {
    let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.01..1.0)).collect();
    let s: f64 = raw.iter().sum();
    raw.iter().map(|v| v / s).collect()
}

fn updates_from(adapters: Vec<LoraAdapter>) -> Vec<ClientUpdate> {
    adapters
        .into_iter()
        .enumerate()
        .map(|(c, ad)| ClientUpdate {
            client: c,
            samples: 1,
            factors: [(ID, ad)].into(),
            head: None,
        })
        .collect()
}

/// `K ∈ [1, max_k]`, `d, k ∈ [2, 32]`, `r ∈ [1, min(d, k)]`, simplex weights.
pub fn random_instance<R: Rng + ?Sized>(max_k: usize, rng: &mut R) -> Result<Instance> {
    let clients = rng.random_range(1..=max_k.max(1));
    let d = rng.random_range(2..=32);
    let k = rng.random_range(2..=32);
    let r = rng.random_range(1..=d.min(k));
    let w0 = Tensor::randn(&[d, k], 1.0, rng);
    let adapters = (0..clients)
        .map(|_| LoraAdapter::from_factors(Tensor::randn(&[d, r], 1.0, rng), Tensor::randn(&[r, k], 1.0, rng)))
        .collect::<Result<Vec<_>>>()?;
    Ok(Instance {
        w0,
        updates: updates_from(adapters),
        weights: simplex(clients, rng),
    })
}

/// `W0 + Σ ω_k B_k A_k` with explicit scalar loops.
pub fn scalar_dense_oracle(inst: &Instance) -> Tensor {
    let (d, k) = (inst.w0.rows(), inst.w0.cols());
    let mut out = inst.w0.clone();
    for (u, &w) in inst.updates.iter().zip(&inst.weights) {
        let ad = &u.factors[&ID];
        for i in 0..d {
            for j in 0..k {
                let mut p = 0.0;
                for t in 0..ad.rank() {
                    p += ad.b.get(i, t) * ad.a.get(t, j);
                }
                out.data_mut()[i * k + j] += w * p;
            }
        }
    }
    out
}

fn inject(fault: Option<Fault>, t: &mut Tensor) {
    if let Some(Fault::FlipResidualSign) = fault {
        if let Some(v) = t.data_mut().first_mut() {
            *v = -*v;
        }
    }
}

/// Residual as the server computes it, after any injected fault.
fn served_residual(inst: &Instance, fault: Option<Fault>) -> Result<Tensor> {
    let mut res = aggregate::residual_weight(&inst.updates, &inst.weights)?
        .remove(&ID)
        .expect("instance has one matrix");
    inject(fault, &mut res);
    Ok(res)
}

/// Max over trials of `|W0 + W_res + BA − (W0 + Σ ω_k B_k A_k)|`.
pub fn check_exactness(opts: &SuiteOptions) -> Result<CheckResult> {
    let mut rng = rng_for(opts.seed, 1);
    let mut worst: f64 = 0.0;
    for _ in 0..opts.trials {
        let inst = random_instance(opts.max_k, &mut rng)?;
        let agg = aggregate::aggregate(Strategy::Reswu, &inst.updates, &inst.weights)?;
        let m = &agg.matrices[&ID];
        let mut res = match &m.base_update {
            BaseUpdate::AddResidual(t) => t.clone(),
            other => unreachable!("residual strategy produced {other:?}"),
        };
        inject(opts.fault, &mut res);
        let mut base = FrozenBase::new(inst.w0.clone());
        base.apply_reswu(&res)?;
        let got = crate::lora::effective_weight(&base, &m.factors)?;
        worst = worst.max(got.max_abs_diff(&scalar_dense_oracle(&inst))?);
    }
    Ok(CheckResult::upper("reswu exactness", opts.trials, worst, EXACTNESS_TOL))
}

/// Max over trials of `|W_res − pairwise form|`.
pub fn check_pairwise(opts: &SuiteOptions) -> Result<CheckResult> {
    let mut rng = rng_for(opts.seed, 1);
    let mut worst: f64 = 0.0;
    for _ in 0..opts.trials {
        let inst = random_instance(opts.max_k, &mut rng)?;
        let res = served_residual(&inst, opts.fault)?;
        let pair = aggregate::residual_weight_pairwise(&inst.updates, &inst.weights)?
            .remove(&ID)
            .expect("instance has one matrix");
        worst = worst.max(res.max_abs_diff(&pair)?);
    }
    Ok(CheckResult::upper("pairwise form", opts.trials, worst, PAIRWISE_TOL))
}

/// Identical client adapters give a zero residual.
pub fn check_identical_null(opts: &SuiteOptions) -> Result<CheckResult> {
    let mut rng = rng_for(opts.seed, 2);
    let mut worst: f64 = 0.0;
    for _ in 0..opts.trials {
        let mut inst = random_instance(opts.max_k, &mut rng)?;
        let shared = inst.updates[0].factors[&ID].clone();
        inst.updates = updates_from(vec![shared; inst.updates.len()]);
        worst = worst.max(served_residual(&inst, opts.fault)?.max_abs());
    }
    Ok(CheckResult::upper("identical-adapter null", opts.trials, worst, NULL_TOL))
}

/// Two clients whose factors differ: `(B_1, A_1) = (e_1, e_1ᵀ)`, `(B_2, A_2) = (e_2, e_2ᵀ)`
/// with equal weights, so `W_res = ¼ (e_1 − e_2)(e_1 − e_2)ᵀ`.
pub fn heterogeneous_control() -> Result<Instance> {
    let b1 = Tensor::from_rows(&[[1.0], [0.0]])?;
    let a1 = Tensor::from_rows(&[[1.0, 0.0]])?;
    let b2 = Tensor::from_rows(&[[0.0], [1.0]])?;
    let a2 = Tensor::from_rows(&[[0.0, 1.0]])?;
    Ok(Instance {
        w0: Tensor::zeros(&[2, 2]),
        updates: updates_from(vec![LoraAdapter::from_factors(b1, a1)?, LoraAdapter::from_factors(b2, a2)?]),
        weights: vec![0.5, 0.5],
    })
}

pub fn check_control(opts: &SuiteOptions) -> Result<CheckResult> {
    let norm = served_residual(&heterogeneous_control()?, opts.fault)?.frobenius_norm();
    Ok(CheckResult {
        name: "heterogeneous control".into(),
        trials: 1,
        worst: norm,
        tolerance: CONTROL_MIN,
        passed: norm > CONTROL_MIN,
    })
}

type Build = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

/// One differentiable op with random inputs.
pub struct OpCase {
    pub name: &'static str,
    pub inputs: Vec<Tensor>,
    build: Build,
}

fn uniform<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor {
    Tensor::uniform(shape, -1.0, 1.0, rng)
}

/// Uniform in `[-1, 1]` but at least `0.05` away from the relu kink.
fn off_kink<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor {
    uniform(shape, rng).map(|v| if v >= 0.0 { 0.05 + 0.95 * v } else { -0.05 + 0.95 * v })
}

/// Names of the ops covered by [`op_case`].
pub const OPS: [&str; 20] = [
    "matmul",
    "add",
    "sub",
    "scale",
    "relu",
    "gelu",
    "add_row",
    "tile_add",
    "layer_norm",
    "transpose",
    "row_softmax",
    "slice_rows",
    "concat_rows",
    "reshape",
    "group_mean",
    "sum",
    "sum_squares",
    "softmax_cross_entropy",
    "squared_error",
    "masked_cross_entropy",
];

pub fn op_case<R: Rng + ?Sized>(name: &'static str, rng: &mut R) -> OpCase {
    let m = rng.random_range(1..=4);
    let n = rng.random_range(1..=5);
    let k = rng.random_range(1..=4);
    let (inputs, build): (Vec<Tensor>, Build) = match name {
        "matmul" => (
            vec![uniform(&[m, k], rng), uniform(&[k, n], rng)],
            Box::new(|t, v| t.matmul(v[0], v[1])),
        ),
        "add" => (
            vec![uniform(&[m, n], rng), uniform(&[m, n], rng)],
            Box::new(|t, v| t.add(v[0], v[1])),
        ),
        "sub" => (
            vec![uniform(&[m, n], rng), uniform(&[m, n], rng)],
            Box::new(|t, v| t.sub(v[0], v[1])),
        ),
        "scale" => {
            let f = rng.random_range(-2.0..2.0);
            (vec![uniform(&[m, n], rng)], Box::new(move |t, v| t.scale(v[0], f)))
        }
        "relu" => (vec![off_kink(&[m, n], rng)], Box::new(|t, v| t.relu(v[0]))),
        "gelu" => (vec![uniform(&[m, n], rng).scale(3.0)], Box::new(|t, v| t.gelu(v[0]))),
        "add_row" => (
            vec![uniform(&[m, n], rng), uniform(&[n], rng)],
            Box::new(|t, v| t.add_row(v[0], v[1])),
        ),
        "tile_add" => (
            vec![uniform(&[m * k, n], rng), uniform(&[k, n], rng)],
            Box::new(|t, v| t.tile_add(v[0], v[1])),
        ),
        "layer_norm" => {
            // Rows get a linear ramp so their variance stays well above zero.
            let n = n + 2;
            let ramp = Tensor::new(
                vec![m, n],
                (0..m * n).map(|i| (i % n) as f64 / n as f64).collect(),
            )
            .expect("sized");
            let x = uniform(&[m, n], rng).scale(0.3).add(&ramp).expect("same shape");
            (
                vec![x, uniform(&[n], rng), uniform(&[n], rng)],
                Box::new(|t, v| t.layer_norm(v[0], v[1], v[2], crate::model::LAYER_NORM_EPS)),
            )
        }
        "transpose" => (vec![uniform(&[m, n], rng)], Box::new(|t, v| t.transpose(v[0]))),
        "row_softmax" => (vec![uniform(&[m, n], rng).scale(2.0)], Box::new(|t, v| t.row_softmax(v[0]))),
        "slice_rows" => {
            let rows = m + k;
            let start = rng.random_range(0..rows);
            let len = rng.random_range(1..=rows - start);
            (
                vec![uniform(&[rows, n], rng)],
                Box::new(move |t, v| t.slice_rows(v[0], start, len)),
            )
        }
        "concat_rows" => (
            vec![uniform(&[m, n], rng), uniform(&[k, n], rng), uniform(&[1, n], rng)],
            Box::new(|t, v| t.concat_rows(v)),
        ),
        "reshape" => (
            vec![uniform(&[m * k, n], rng)],
            Box::new(move |t, v| t.reshape(v[0], &[m, k * n])),
        ),
        "group_mean" => (
            vec![uniform(&[m * k, n], rng)],
            Box::new(move |t, v| t.group_mean(v[0], k)),
        ),
        "sum" => (vec![uniform(&[m, n], rng)], Box::new(|t, v| t.sum(v[0]))),
        "sum_squares" => (vec![uniform(&[m, n], rng)], Box::new(|t, v| t.sum_squares(v[0]))),
        "softmax_cross_entropy" => {
            let c = n + 1;
            let labels: Vec<usize> = (0..m).map(|_| rng.random_range(0..c)).collect();
            (
                vec![uniform(&[m, c], rng).scale(3.0)],
                Box::new(move |t, v| t.softmax_cross_entropy(v[0], &labels)),
            )
        }
        "squared_error" => {
            let target = uniform(&[m, n], rng);
            (
                vec![uniform(&[m, n], rng)],
                Box::new(move |t, v| t.squared_error(v[0], target.clone())),
            )
        }
        "masked_cross_entropy" => {
            // Cross-entropy after adding a large negative constant to one column.
            let c = n + 2;
            let masked = rng.random_range(0..c);
            let labels: Vec<usize> = (0..m)
                .map(|_| (masked + rng.random_range(1..c)) % c)
                .collect();
            let mut mask = vec![0.0; c];
            mask[masked] = -1e9;
            let mask = Tensor::new(vec![c], mask).expect("sized");
            (
                vec![uniform(&[m, c], rng).scale(3.0)],
                Box::new(move |t, v| {
                    let mk = t.constant(mask.clone());
                    let z = t.add_row(v[0], mk)?;
                    t.softmax_cross_entropy(z, &labels)
                }),
            )
        }
        other => panic!("unknown op `{other}`"),
    };
    OpCase { name, inputs, build }
}

impl OpCase {
    /// Scalar objective `Σ (op(inputs) ⊙ P)` for a fixed random projection `P`,
    /// written as `½(‖out + P‖² − ‖out‖² − ‖P‖²)` with tape primitives.
    fn objective(&self, tape: &mut Tape, vars: &[Var], proj: &Tensor) -> Result<Var> {
        let out = (self.build)(tape, vars)?;
        let p = tape.constant(proj.clone());
        let shifted = tape.add(out, p)?;
        let a = tape.sum_squares(shifted)?;
        let b = tape.sum_squares(out)?;
        let d = tape.sub(a, b)?;
        tape.scale(d, 0.5)
    }

    fn output_shape(&self) -> Result<Vec<usize>> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = self.inputs.iter().map(|x| tape.constant(x.clone())).collect();
        let out = (self.build)(&mut tape, &vars)?;
        Ok(tape.value(out)?.shape().to_vec())
    }

    /// Worst relative error over all inputs.
    pub fn gradient_error<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<f64> {
        let proj = uniform(&self.output_shape()?, rng);
        let mut tape = Tape::new();
        let vars: Vec<Var> = self.inputs.iter().map(|x| tape.param(x.clone())).collect();
        let loss = self.objective(&mut tape, &vars, &proj)?;
        let grads = tape.backward(loss)?;
        let f = |xs: &[Tensor]| {
            let mut t = Tape::new();
            let vs: Vec<Var> = xs.iter().map(|x| t.constant(x.clone())).collect();
            let l = self.objective(&mut t, &vs, &proj).expect("objective builds");
            t.value(l).expect("value").item()
        };
        let mut worst: f64 = 0.0;
        for (i, &v) in vars.iter().enumerate() {
            let numeric = numerical_gradient(&f, &self.inputs, i, DEFAULT_STEP);
            worst = worst.max(max_relative_error(grads.get(v)?.as_ref(), &numeric, GRAD_FLOOR));
        }
        Ok(worst)
    }
}

/// Finite-difference check of every op over `trials` random cases each.
pub fn check_op_gradients(opts: &SuiteOptions) -> Result<Vec<CheckResult>> {
    let trials = opts.trials.clamp(1, 50);
    OPS.iter()
        .enumerate()
        .map(|(i, &name)| {
            let mut rng = rng_for(opts.seed, 100 + i as u64);
            let mut worst: f64 = 0.0;
            for _ in 0..trials {
                worst = worst.max(op_case(name, &mut rng).gradient_error(&mut rng)?);
            }
            Ok(CheckResult::upper(format!("grad {name}"), trials, worst, OP_GRAD_TOL))
        })
        .collect()
}

/// A small random model with perturbed bases, nonzero adapters and a batch.
pub struct ModelCase {
    pub state: ModelState,
    pub batch: Tensor,
    pub labels: Vec<usize>,
    pub objective: Objective,
}

pub fn random_model_case<R: Rng + ?Sized>(rng: &mut R, arch: Architecture) -> Result<ModelCase> {
    let patch_size = rng.random_range(1..=3);
    let tokens = rng.random_range(1..=3);
    let num_classes = rng.random_range(2..=4);
    let config = ModelConfig {
        arch,
        depth: rng.random_range(1..=2),
        dim: rng.random_range(2..=5),
        ffn_dim: rng.random_range(2..=5),
        patch_size,
        hidden: rng.random_range(2..=5),
        input_dim: patch_size * tokens,
        num_classes,
    };
    let mut state = init_backbone(&config, rng.random())?;
    let ids: Vec<MatrixId> = config
        .adaptable_matrices()
        .into_iter()
        .filter(|_| rng.random_bool(0.6))
        .collect();
    for &id in &ids {
        let (d, k) = config.matrix_shape(id).expect("listed");
        let r = rng.random_range(1..=d.min(k).min(2));
        let ad = LoraAdapter::from_factors(Tensor::randn(&[d, r], 0.5, rng), Tensor::randn(&[r, k], 0.5, rng))?;
        state.adapters.insert(id, ad);
        let res = Tensor::randn(&[d, k], 0.1, rng);
        state.backbone.matrices.get_mut(&id).expect("listed").apply_reswu(&res)?;
    }
    // Nonzero biases keep relu inputs away from the kink at exactly zero.
    for (name, t) in state.backbone.others.iter_mut() {
        if name.ends_with("bias") {
            *t = Tensor::randn(t.shape(), 0.5, rng);
        }
    }
    if let Some(h) = state.head.as_mut() {
        h.weight = Tensor::randn(h.weight.shape(), 0.5, rng);
        h.bias = Tensor::randn(h.bias.shape(), 0.5, rng);
    }
    let n = rng.random_range(1..=3);
    let batch = uniform(&[n, config.input_dim], rng);
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..num_classes)).collect();
    let loss = if rng.random_bool(0.25) {
        LossKind::SquaredError
    } else {
        LossKind::CrossEntropy
    };
    Ok(ModelCase {
        state,
        batch,
        labels,
        objective: Objective::plain(loss),
    })
}

impl ModelCase {
    /// Worst relative error over every parameter of the model.
    pub fn gradient_error(&self) -> Result<f64> {
        let (_, grads) = self
            .state
            .gradient(&self.batch, &self.labels, &TrainSpec::ALL, &self.objective)?;
        let mut worst: f64 = 0.0;
        for (name, g) in &grads {
            let value = self.state.get_param(name).expect("trainable names resolve");
            let f = |xs: &[Tensor]| {
                let mut probe = self.state.clone();
                probe.set_param(name, xs[0].clone()).expect("same shape");
                probe.loss(&self.batch, &self.labels, &self.objective).expect("loss")
            };
            let numeric = numerical_gradient(&f, &[value], 0, DEFAULT_STEP);
            worst = worst.max(max_relative_error(g, &numeric, GRAD_FLOOR));
        }
        Ok(worst)
    }
}

pub fn check_model_gradients(opts: &SuiteOptions) -> Result<Vec<CheckResult>> {
    [Architecture::Transformer, Architecture::Mlp]
        .iter()
        .enumerate()
        .map(|(i, &arch)| {
            let mut rng = rng_for(opts.seed, 200 + i as u64);
            let mut worst: f64 = 0.0;
            for _ in 0..opts.model_configs {
                worst = worst.max(random_model_case(&mut rng, arch)?.gradient_error()?);
            }
            let name = match arch {
                Architecture::Transformer => "grad model transformer",
                _ => "grad model mlp",
            };
            Ok(CheckResult::upper(name, opts.model_configs, worst, MODEL_GRAD_TOL))
        })
        .collect()
}

/// Every check, in report order.
pub fn run_suite(opts: &SuiteOptions) -> Result<Vec<CheckResult>> {
    let mut out = vec![
        check_exactness(opts)?,
        check_pairwise(opts)?,
        check_identical_null(opts)?,
        check_control(opts)?,
    ];
    out.extend(check_op_gradients(opts)?);
    out.extend(check_model_gradients(opts)?);
    Ok(out)
}

/// Fixed-width pass/fail table.
pub fn format_table(results: &[CheckResult]) -> String {
    let width = results.iter().map(|r| r.name.len()).max().unwrap_or(5).max(5);
    let mut out = String::new();
    let _ = writeln!(out, "{:<width$}  {:>6}  {:>10}  {:>10}  result", "check", "trials", "worst", "tolerance");
    for r in results {
        let _ = writeln!(
            out,
            "{:<width$}  {:>6}  {:>10.3e}  {:>10.1e}  {}",
            r.name,
            r.trials,
            r.worst,
            r.tolerance,
            if r.passed { "PASS" } else { "FAIL" }
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick() -> SuiteOptions {
        SuiteOptions {
            trials: 40,
            max_k: 6,
            model_configs: 5,
            ..SuiteOptions::default()
        }
    }

    #[test]
    fn suite_passes() {
        let results = run_suite(&quick()).unwrap();
        let failed: Vec<_> = results.iter().filter(|r| !r.passed).collect();
        assert!(failed.is_empty(), "{}", format_table(&results));
    }

    #[test]
    fn flipped_sign_is_caught() {
        let opts = SuiteOptions {
            fault: Some(Fault::FlipResidualSign),
            ..quick()
        };
        assert!(!check_exactness(&opts).unwrap().passed);
        assert!(!check_pairwise(&opts).unwrap().passed);
    }

    #[test]
    fn control_residual_is_a_quarter_outer_product() {
        let res = served_residual(&heterogeneous_control().unwrap(), None).unwrap();
        let expected = Tensor::from_rows(&[[0.25, -0.25], [-0.25, 0.25]]).unwrap();
        assert!(res.max_abs_diff(&expected).unwrap() < 1e-15);
    }

    #[test]
    fn scalar_oracle_matches_hand_case() {
        let inst = heterogeneous_control().unwrap();
        let dense = scalar_dense_oracle(&inst);
        assert_eq!(dense.data(), &[0.5, 0.0, 0.0, 0.5]);
    }

    #[test]
    fn every_op_builds() {
        let mut rng = rng_for(9, 0);
        for name in OPS {
            let case = op_case(name, &mut rng);
            assert!(case.output_shape().is_ok(), "{name}");
        }
    }
}
