//! Finite-difference verification of every backward rule and of a whole
//! model, in 64-bit arithmetic.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::Result;
use crate::fusion::FusionConfig;
use crate::model::{ModelConfig, VtfModel};
use crate::tensor::gradcheck::{finite_diff_grad, relative_error};
use crate::tensor::{OpKind, Tape, Tensor, Var};
use crate::text::{AttributeClass, AttributeGroup, AttributeSchema, GroupKind, PromptTemplate, TextConfig};
use crate::vision::{Frame, VitConfig, CHANNELS};

pub const DELTA: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, Copy)]
pub struct GradcheckConfig {
    pub trials: usize,
    pub model_coordinates: usize,
    pub seed: u64,
    /// Corrupts the backward rule of one op kind (harness self-test).
    pub fault: Option<OpKind>,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            trials: 100,
            model_coordinates: 600,
            seed: 0,
            fault: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub trials: usize,
    pub coordinates: usize,
    pub max_rel_err: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err < TOLERANCE
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub checks: Vec<CheckResult>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(CheckResult::passed)
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from("check\ttrials\tcoordinates\tmax_rel_err\tstatus\n");
        for c in &self.checks {
            writeln!(
                out,
                "{}\t{}\t{}\t{:.4e}\t{}",
                c.name,
                c.trials,
                c.coordinates,
                c.max_rel_err,
                if c.passed() { "pass" } else { "FAIL" }
            )
            .expect("writing to a string");
        }
        out
    }
}

fn normal(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| StandardNormal.sample(rng)).collect()).expect("shape")
}

fn dim(rng: &mut ChaCha8Rng) -> usize {
    rng.random_range(1..=4)
}

type Build = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>;

/// Random inputs and a graph that exercises `kind` on them.
fn case(kind: OpKind, rng: &mut ChaCha8Rng) -> (Vec<Tensor<f64>>, Build) {
    match kind {
        OpKind::MatMul => {
            let (m, k, n) = (dim(rng), dim(rng), dim(rng));
            if rng.random_bool(0.5) {
                let b = dim(rng);
                let ins = vec![normal(&[b, m, k], rng), normal(&[b, k, n], rng)];
                (ins, Box::new(|t, v| t.matmul(v[0], v[1])))
            } else {
                let ins = vec![normal(&[2, m, k], rng), normal(&[k, n], rng)];
                (ins, Box::new(|t, v| t.matmul(v[0], v[1])))
            }
        }
        OpKind::Add | OpKind::Mul => {
            let (m, n) = (dim(rng), dim(rng));
            let b_shape = if rng.random_bool(0.5) { vec![n] } else { vec![m, n] };
            let ins = vec![normal(&[m, n], rng), normal(&b_shape, rng)];
            if kind == OpKind::Add {
                (ins, Box::new(|t, v| t.add(v[0], v[1])))
            } else {
                (ins, Box::new(|t, v| t.mul(v[0], v[1])))
            }
        }
        OpKind::Scale => {
            let k: f64 = StandardNormal.sample(rng);
            (vec![normal(&[dim(rng), dim(rng)], rng)], Box::new(move |t, v| Ok(t.scale(v[0], k))))
        }
        OpKind::Reshape => {
            let (m, n) = (dim(rng), dim(rng));
            (vec![normal(&[m, n], rng)], Box::new(move |t, v| t.reshape(v[0], &[n, m])))
        }
        OpKind::Transpose => {
            let a0 = rng.random_range(0..4);
            let a1 = (a0 + rng.random_range(1..4)) % 4;
            let shape: Vec<usize> = (0..4).map(|_| dim(rng)).collect();
            (vec![normal(&shape, rng)], Box::new(move |t, v| t.transpose(v[0], a0, a1)))
        }
        OpKind::Gelu => (vec![normal(&[dim(rng), dim(rng)], rng)], Box::new(|t, v| Ok(t.gelu(v[0])))),
        OpKind::Sigmoid => (vec![normal(&[dim(rng), dim(rng)], rng)], Box::new(|t, v| Ok(t.sigmoid(v[0])))),
        OpKind::Softmax => {
            let axis = rng.random_range(0..3);
            let shape = [dim(rng), dim(rng) + 1, dim(rng)];
            (vec![normal(&shape, rng)], Box::new(move |t, v| t.softmax(v[0], axis)))
        }
        OpKind::LayerNorm => {
            let (m, d) = (dim(rng), dim(rng) + 1);
            let ins = vec![normal(&[m, d], rng), normal(&[d], rng), normal(&[d], rng)];
            (ins, Box::new(|t, v| t.layer_norm(v[0], v[1], v[2], crate::nn::LN_EPS)))
        }
        OpKind::Reduce => {
            let axis = rng.random_range(0..3);
            let mean = rng.random_bool(0.5);
            let shape = [dim(rng), dim(rng), dim(rng)];
            (
                vec![normal(&shape, rng)],
                Box::new(move |t, v| if mean { t.mean_axis(v[0], axis) } else { t.sum_axis(v[0], axis) }),
            )
        }
        OpKind::Concat => {
            let axis = rng.random_range(0..2);
            let base = [dim(rng), dim(rng)];
            let parts = rng.random_range(2..=3);
            let ins = (0..parts)
                .map(|_| {
                    let mut s = base;
                    s[axis] = dim(rng);
                    normal(&s, rng)
                })
                .collect();
            (ins, Box::new(move |t, v| t.concat(v, axis)))
        }
        OpKind::Narrow => {
            let shape = [dim(rng) + 1, dim(rng) + 1, dim(rng)];
            let axis = rng.random_range(0..3);
            let start = rng.random_range(0..shape[axis]);
            let len = rng.random_range(1..=shape[axis] - start);
            (vec![normal(&shape, rng)], Box::new(move |t, v| t.narrow(v[0], axis, start, len)))
        }
        OpKind::Gather => {
            let (rows, d) = (dim(rng) + 1, dim(rng));
            let ids: Vec<usize> = (0..rng.random_range(1..=6)).map(|_| rng.random_range(0..rows)).collect();
            (vec![normal(&[rows, d], rng)], Box::new(move |t, v| t.gather(v[0], &ids)))
        }
        OpKind::Bce => {
            let n = dim(rng) * 2;
            let y = Tensor::new([n], (0..n).map(|_| if rng.random_bool(0.5) { 1.0 } else { 0.0 }).collect())
                .expect("shape");
            (vec![normal(&[n], rng)], Box::new(move |t, v| t.bce_with_logits(v[0], &y)))
        }
    }
}

/// `sum(build(inputs) ⊙ weights)`, so every output coordinate carries a
/// distinct upstream gradient.
fn projected(tape: &mut Tape<f64>, vars: &[Var], build: &Build, weights: &Tensor<f64>) -> Result<Var> {
    let y = build(tape, vars)?;
    let w = tape.constant(weights.clone());
    let p = tape.mul(y, w)?;
    tape.sum(p)
}

fn check_case(inputs: &[Tensor<f64>], build: &Build, rng: &mut ChaCha8Rng, fault: Option<OpKind>) -> Result<(f64, usize)> {
    let mut probe = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| probe.constant(x.clone())).collect();
    let out = build(&mut probe, &vars)?;
    let out_shape = probe.value(out).shape().to_vec();
    let weights = normal(&out_shape, rng);

    let mut tape = Tape::new();
    if let Some(kind) = fault {
        tape.inject_fault(kind);
    }
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
    let loss = projected(&mut tape, &vars, build, &weights)?;
    let grads = tape.backward(loss)?;

    let mut worst = 0.0f64;
    let mut coords = 0;
    for (i, x) in inputs.iter().enumerate() {
        let numeric = finite_diff_grad(
            |xi| {
                let mut t = Tape::new();
                let vs: Vec<Var> =
                    inputs.iter().enumerate().map(|(j, v)| t.constant(if j == i { xi.clone() } else { v.clone() })).collect();
                let l = projected(&mut t, &vs, build, &weights)?;
                t.value(l).item()
            },
            x,
            DELTA,
        )?;
        let zeros = Tensor::zeros(x.shape());
        let analytic = grads.wrt(vars[i]).unwrap_or(&zeros);
        for (a, n) in analytic.data().iter().zip(numeric.data()) {
            worst = worst.max(relative_error(*a, *n));
        }
        coords += x.numel();
    }
    Ok((worst, coords))
}

/// Analytic vs central-difference gradients over `trials` random cases.
pub fn check_op(kind: OpKind, trials: usize, seed: u64, fault: Option<OpKind>) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (kind as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let mut worst = 0.0f64;
    let mut coordinates = 0;
    for _ in 0..trials {
        let (inputs, build) = case(kind, &mut rng);
        let (err, n) = check_case(&inputs, &build, &mut rng, fault)?;
        worst = worst.max(err);
        coordinates += n;
    }
    Ok(CheckResult {
        name: kind.name().to_string(),
        trials,
        coordinates,
        max_rel_err: worst,
    })
}

/// A model small enough to difference every coordinate quickly.
pub fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        vision: VitConfig {
            image_size: 8,
            patch_size: 4,
            dim: 8,
            depth: 1,
            heads: 2,
            mlp_ratio: 2,
        },
        text: TextConfig {
            depth: 1,
            heads: 2,
            mlp_ratio: 2,
            max_len: 8,
        },
        fusion: FusionConfig {
            blocks: 1,
            heads: 2,
            mlp_ratio: 2,
            no_fusion: false,
        },
    }
}

pub fn tiny_schema() -> AttributeSchema {
    let class = |name: &str, raw: &str| AttributeClass {
        name: name.into(),
        raw: raw.into(),
    };
    AttributeSchema::new(
        vec![
            AttributeGroup {
                name: "age".into(),
                kind: GroupKind::Exclusive,
                classes: vec![class("young", "Age < 18"), class("adult", "Age ≤ 40"), class("older", "Age > 40")],
            },
            AttributeGroup {
                name: "carrying".into(),
                kind: GroupKind::Binary,
                classes: vec![class("bag", "handBag"), class("hat", "hat")],
            },
        ],
        PromptTemplate::default(),
    )
    .expect("valid schema")
}

/// End-to-end check with every parameter trainable: frames through both
/// encoders, fusion, heads and the loss.
pub fn check_model(coordinates: usize, seed: u64, fault: Option<OpKind>) -> Result<CheckResult> {
    let mut model = VtfModel::<f64>::new(tiny_model_config(), tiny_schema(), seed)?;
    model.freeze_encoders(false);
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(17));
    let frames: Vec<Frame> = (0..2)
        .map(|_| Frame::new(8, 6, (0..8 * 6 * CHANNELS).map(|_| rng.random::<f32>()).collect()))
        .collect::<Result<_>>()?;
    let refs: Vec<&Frame> = frames.iter().collect();
    let patches = model.prepare(&refs)?;
    let c = model.class_count();
    let targets = Tensor::new([c], (0..c).map(|_| if rng.random_bool(0.5) { 1.0 } else { 0.0 }).collect())?;

    let loss_of = |m: &VtfModel<f64>, fault: Option<OpKind>| -> Result<(Tape<f64>, Var)> {
        let mut tape = Tape::new();
        if let Some(kind) = fault {
            tape.inject_fault(kind);
        }
        let logits = m.logits_on_tape(&mut tape, &patches, None)?;
        let loss = tape.bce_with_logits(logits, &targets)?;
        Ok((tape, loss))
    };
    let (tape, loss) = loss_of(&model, fault)?;
    let grads = tape.backward(loss)?;

    // every tensor gets a few coordinates, the rest are drawn at random
    let ids: Vec<_> = model.params.iter().map(|(id, p)| (id, p.tensor.numel())).collect();
    let mut picks = Vec::new();
    for &(id, n) in &ids {
        picks.extend((0..n.min(3)).map(|k| (id, k)));
    }
    while picks.len() < coordinates {
        let (id, n) = ids[rng.random_range(0..ids.len())];
        picks.push((id, rng.random_range(0..n)));
    }

    let mut worst = 0.0f64;
    for &(id, k) in &picks {
        let analytic = grads.param(id).map_or(0.0, |g| g.data()[k]);
        let orig = model.params.tensor(id).data()[k];
        model.params.tensor_mut(id).data_mut()[k] = orig + DELTA;
        let (t, l) = loss_of(&model, None)?;
        let up = t.value(l).item()?;
        model.params.tensor_mut(id).data_mut()[k] = orig - DELTA;
        let (t, l) = loss_of(&model, None)?;
        let down = t.value(l).item()?;
        model.params.tensor_mut(id).data_mut()[k] = orig;
        worst = worst.max(relative_error(analytic, (up - down) / (2.0 * DELTA)));
    }
    Ok(CheckResult {
        name: "full_model".into(),
        trials: 1,
        coordinates: picks.len(),
        max_rel_err: worst,
    })
}

/// Every op kind plus the full model.
pub fn run_gradcheck(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    let mut checks = OpKind::ALL
        .iter()
        .map(|&k| check_op(k, cfg.trials, cfg.seed, cfg.fault))
        .collect::<Result<Vec<_>>>()?;
    checks.push(check_model(cfg.model_coordinates, cfg.seed, cfg.fault)?);
    Ok(GradcheckReport { checks })
}
