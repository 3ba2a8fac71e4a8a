//! Helpers shared by the integration test targets: a finite-difference
//! gradient checker over every differentiable tape op, a brute-force
//! pruning oracle and small synthetic fixtures.
#![allow(dead_code)]

use booster_core::attack::{self, AttackConfig, AttackLoss, Domain};
use booster_core::autodiff::{Padding, Tape, Var};
use booster_core::nn::{self, ModelSpec, ParamSet};
use booster_core::prune::{Mask, Scope};
use booster_core::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Op {
    MatMul,
    Add,
    Mul,
    AddBias,
    Relu,
    Scale,
    Flatten,
    Sum,
    ConvValid,
    ConvSame,
    MaxPool,
    SoftmaxCe,
    Margin,
}

pub const OPS: [Op; 13] = [
    Op::MatMul,
    Op::Add,
    Op::Mul,
    Op::AddBias,
    Op::Relu,
    Op::Scale,
    Op::Flatten,
    Op::Sum,
    Op::ConvValid,
    Op::ConvSame,
    Op::MaxPool,
    Op::SoftmaxCe,
    Op::Margin,
];

pub struct Instance {
    pub inputs: Vec<Tensor<f64>>,
    /// Fixed random cotangent so the check sees every output coordinate.
    pub probe: Option<Tensor<f64>>,
    pub labels: Vec<usize>,
    pub kappa: f64,
}

fn normal(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::from_f64_slice(shape, &v).unwrap()
}

/// Values bounded away from zero, so ReLU has no kink within the step.
fn off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let v: Vec<f64> = (0..n)
        .map(|_| {
            let m = rng.random_range(0.05..1.0);
            if rng.random_bool(0.5) { m } else { -m }
        })
        .collect();
    Tensor::from_f64_slice(shape, &v).unwrap()
}

/// Distinct values with a minimum spacing, so max-pool winners are stable.
fn spaced(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        idx.swap(i, rng.random_range(0..=i));
    }
    let v: Vec<f64> = idx.iter().map(|&i| i as f64 * 0.05 - 1.0 + rng.random_range(0.0..0.01)).collect();
    Tensor::from_f64_slice(shape, &v).unwrap()
}

pub fn instance(op: Op, seed: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((op as u64) << 40));
    let mut d = |lo: usize, hi: usize| rng.random_range(lo..=hi);
    let (n, c, h, w) = (d(1, 3), d(1, 3), d(3, 6), d(3, 6));
    let (m, k) = (d(1, 5), d(2, 6));
    let (o, kh, kw) = (d(1, 3), d(1, 3), d(1, 3));
    let odd = |v: usize| if v.is_multiple_of(2) { v + 1 } else { v };
    let mut labels = Vec::new();
    let mut kappa = 0.0;
    let inputs = match op {
        Op::MatMul => vec![normal(&mut rng, &[m, k]), normal(&mut rng, &[k, n + 1])],
        Op::Add | Op::Mul => vec![normal(&mut rng, &[m, k]), normal(&mut rng, &[m, k])],
        Op::AddBias => vec![normal(&mut rng, &[n, c, h, w]), normal(&mut rng, &[c])],
        Op::Relu => vec![off_zero(&mut rng, &[n, c, h])],
        Op::Scale | Op::Flatten | Op::Sum => vec![normal(&mut rng, &[n, c, h, w])],
        Op::ConvValid => vec![normal(&mut rng, &[n, c, h, w]), normal(&mut rng, &[o, c, kh, kw])],
        Op::ConvSame => vec![normal(&mut rng, &[n, c, h, w]), normal(&mut rng, &[o, c, odd(kh), odd(kw)])],
        Op::MaxPool => vec![spaced(&mut rng, &[n, c, h, w])],
        Op::SoftmaxCe | Op::Margin => {
            let classes = k;
            labels = (0..m).map(|_| rng.random_range(0..classes)).collect();
            kappa = rng.random_range(0.0..0.5);
            loop {
                let z = normal(&mut rng, &[m, classes]).map(|v| v * 3.0);
                if op == Op::SoftmaxCe || margins_are_smooth(&z, &labels, kappa) {
                    break vec![z];
                }
            }
        }
    };
    let out_shape = forward(op, &inputs, &labels, kappa, None).1;
    let probe = out_shape.filter(|s| !s.is_empty()).map(|s| normal(&mut rng, &s));
    Instance {
        inputs,
        probe,
        labels,
        kappa,
    }
}

/// The margin objective has kinks where the runner-up changes and at the
/// `-kappa` clamp; keep instances a safe distance from both.
fn margins_are_smooth(z: &Tensor<f64>, labels: &[usize], kappa: f64) -> bool {
    let k = z.shape()[1];
    z.data().chunks(k).zip(labels).all(|(row, &y)| {
        let mut others: Vec<f64> = row.iter().enumerate().filter(|&(j, _)| j != y).map(|(_, &v)| v).collect();
        others.sort_by(|a, b| b.total_cmp(a));
        let gap = if others.len() > 1 { others[0] - others[1] } else { 1.0 };
        gap > 1e-2 && (row[y] - others[0] + kappa).abs() > 1e-2
    })
}

fn apply(op: Op, tape: &mut Tape<f64>, vars: &[Var], labels: &[usize], kappa: f64) -> Var {
    let r = match op {
        Op::MatMul => tape.matmul(vars[0], vars[1]),
        Op::Add => tape.add(vars[0], vars[1]),
        Op::Mul => tape.mul(vars[0], vars[1]),
        Op::AddBias => tape.add_bias(vars[0], vars[1]),
        Op::Relu => tape.relu(vars[0]),
        Op::Scale => tape.scale(vars[0], -1.7),
        Op::Flatten => tape.flatten(vars[0]),
        Op::Sum => tape.sum(vars[0]),
        Op::ConvValid => tape.conv2d(vars[0], vars[1], Padding::Valid),
        Op::ConvSame => tape.conv2d(vars[0], vars[1], Padding::Same),
        Op::MaxPool => tape.maxpool2x2(vars[0]),
        Op::SoftmaxCe => tape.softmax_cross_entropy(vars[0], labels),
        Op::Margin => tape.margin_loss(vars[0], labels, kappa),
    };
    r.unwrap()
}

/// Returns the scalar loss `<probe, op(inputs)>` (or the op's own scalar)
/// and the raw output shape.
fn forward(
    op: Op,
    inputs: &[Tensor<f64>],
    labels: &[usize],
    kappa: f64,
    probe: Option<&Tensor<f64>>,
) -> (f64, Option<Vec<usize>>) {
    let mut tape = Tape::<f64>::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), false)).collect();
    let out = apply(op, &mut tape, &vars, labels, kappa);
    let shape = tape.shape(out).to_vec();
    let value = match probe {
        Some(p) => tape.value(out).data().iter().zip(p.data()).map(|(a, b)| a * b).sum(),
        None => tape.value(out).sum_f64(),
    };
    (value, Some(shape))
}

fn analytic(op: Op, inst: &Instance) -> Vec<Vec<f64>> {
    let mut tape = Tape::<f64>::new();
    let vars: Vec<Var> = inst.inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = apply(op, &mut tape, &vars, &inst.labels, inst.kappa);
    let loss = match &inst.probe {
        Some(p) => {
            let pv = tape.leaf(p.clone(), false);
            let prod = tape.mul(out, pv).unwrap();
            tape.sum(prod).unwrap()
        }
        None => tape.sum(out).unwrap(),
    };
    let grads = tape.backward(loss).unwrap();
    vars.iter()
        .map(|&v| grads.get(v).unwrap().data().to_vec())
        .collect()
}

fn numeric(op: Op, inst: &Instance, h: f64) -> Vec<Vec<f64>> {
    let mut out = Vec::new();
    for which in 0..inst.inputs.len() {
        let mut g = Vec::with_capacity(inst.inputs[which].len());
        for i in 0..inst.inputs[which].len() {
            let mut plus = inst.inputs.clone();
            plus[which].data_mut()[i] += h;
            let mut minus = inst.inputs.clone();
            minus[which].data_mut()[i] -= h;
            let f = |x: &[Tensor<f64>]| forward(op, x, &inst.labels, inst.kappa, inst.probe.as_ref()).0;
            g.push((f(&plus) - f(&minus)) / (2.0 * h));
        }
        out.push(g);
    }
    out
}

/// Worst relative error `|a - n|_2 / max(|a|_2, |n|_2)` over the op's
/// inputs (zero when both gradients vanish).
pub fn gradient_error(op: Op, seed: u64) -> f64 {
    let inst = instance(op, seed);
    let a = analytic(op, &inst);
    let n = numeric(op, &inst, 1e-6);
    a.iter()
        .zip(&n)
        .map(|(a, n)| {
            let diff = a.iter().zip(n).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
            let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(n.iter().map(|x| x * x).sum::<f64>().sqrt());
            if scale < 1e-12 { diff } else { diff / scale }
        })
        .fold(0.0, f64::max)
}

/// Full-sort reference for magnitude pruning: returns, per prunable entry,
/// the pruned flags and the magnitude threshold of the group.
pub fn oracle_prune(params: &ParamSet, ratio: f64, scope: Scope) -> (Vec<Vec<bool>>, Vec<f32>) {
    let entries: Vec<Vec<f32>> = params
        .iter()
        .filter(|(_, p)| p.prunable)
        .map(|(_, p)| p.value.data().to_vec())
        .collect();
    let groups: Vec<Vec<usize>> = match scope {
        Scope::Global => vec![(0..entries.len()).collect()],
        Scope::Layerwise => (0..entries.len()).map(|e| vec![e]).collect(),
    };
    let mut pruned: Vec<Vec<bool>> = entries.iter().map(|e| vec![false; e.len()]).collect();
    let mut thresholds = vec![f32::NAN; entries.len()];
    for g in groups {
        let mut all: Vec<(f32, usize, usize)> = Vec::new();
        for &e in &g {
            all.extend(entries[e].iter().enumerate().map(|(i, w)| (w.abs(), e, i)));
        }
        let count = (ratio * all.len() as f64).floor() as usize;
        all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        for &(_, e, i) in &all[..count] {
            pruned[e][i] = true;
        }
        let t = if count > 0 { all[count - 1].0 } else { f32::NAN };
        for &e in &g {
            thresholds[e] = t;
        }
    }
    (pruned, thresholds)
}

/// Number of coordinates where `mask` and the oracle disagree outside the
/// tie group at the threshold.
pub fn oracle_disagreements(params: &ParamSet, mask: &Mask, ratio: f64, scope: Scope) -> usize {
    let (pruned, thresholds) = oracle_prune(params, ratio, scope);
    let mut bad = 0;
    let prunable = params.iter().filter(|(_, p)| p.prunable);
    for (e, ((name, p), want)) in prunable.zip(&pruned).enumerate() {
        let bits = mask.get(name).unwrap().bits();
        for (i, w) in p.value.data().iter().enumerate() {
            if !bits[i] != want[i] && w.abs() != thresholds[e] {
                bad += 1;
            }
        }
    }
    bad
}

/// Random (shape-preserving) parameters for a registry of prunable and
/// non-prunable entries holding `total` prunable weights.
pub fn random_params(total: usize, ties: bool, seed: u64) -> ParamSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let split = [total / 2, total / 3, total - total / 2 - total / 3];
    let mut ps = ParamSet::new();
    for (i, &n) in split.iter().enumerate() {
        let v: Vec<f64> = (0..n)
            .map(|_| {
                let x: f64 = rng.random_range(-1.0..1.0);
                if ties { (x * 8.0).round() / 8.0 } else { x }
            })
            .collect();
        ps.insert(format!("layer{i}.weight"), Tensor::from_f64_slice(&[n], &v).unwrap(), true).unwrap();
        ps.insert(format!("layer{i}.bias"), Tensor::from_f64_slice(&[3], &[0.5, -0.5, 0.1]).unwrap(), false)
            .unwrap();
    }
    ps
}

pub fn toy_model(dim: usize, hidden: usize, classes: usize, seed: u64) -> (ModelSpec, nn::ParamSet) {
    let hidden: Vec<usize> = if hidden == 0 { vec![] } else { vec![hidden] };
    let spec = ModelSpec::mlp([1, 1, dim], &hidden, classes);
    let p = nn::init(&spec, seed).unwrap();
    (spec, p)
}

pub fn inputs(batch: usize, dim: usize, seed: u64, domain: Domain) -> Tensor<f32> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let v: Vec<f64> = (0..batch * dim)
        .map(|_| {
            // a share of coordinates sits exactly on the domain boundary
            match r.random_range(0..6) {
                0 => domain.lo as f64,
                1 => domain.hi as f64,
                _ => r.random_range(domain.lo as f64..domain.hi as f64),
            }
        })
        .collect();
    Tensor::from_f64_slice(&[batch, 1, 1, dim], &v).unwrap()
}

pub fn within_budget(adv: &Tensor<f32>, x: &Tensor<f32>, eps: f64, domain: Domain) -> Result<(), String> {
    for (a, o) in adv.data().iter().zip(x.data()) {
        if ((a - o).abs() as f64) > eps + 1e-6 {
            return Err(format!("|{a} - {o}| exceeds {eps}"));
        }
        if *a < domain.lo || *a > domain.hi {
            return Err(format!("{a} leaves [{}, {}]", domain.lo, domain.hi));
        }
    }
    Ok(())
}

/// One random (model, input, config) triple for the attack invariants.
#[derive(Debug, Clone)]
pub struct AttackCase {
    pub model_seed: u64,
    pub data_seed: u64,
    pub attack_seed: u64,
    pub dim: usize,
    pub hidden: usize,
    pub classes: usize,
    pub batch: usize,
    pub eps: f64,
    pub alpha_scale: f64,
    pub steps: usize,
    pub random_start: bool,
    pub margin: bool,
    pub kappa: f64,
    pub wide_domain: bool,
}

impl AttackCase {
    pub fn random(seed: u64) -> Self {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        Self {
            model_seed: r.random(),
            data_seed: r.random(),
            attack_seed: r.random(),
            dim: r.random_range(1..12),
            hidden: r.random_range(0..10),
            classes: r.random_range(2..6),
            batch: r.random_range(1..6),
            eps: if r.random_bool(0.1) { 0.0 } else { r.random_range(0.0..0.6) },
            alpha_scale: r.random_range(0.05..3.0),
            steps: r.random_range(1..6),
            random_start: r.random(),
            margin: r.random(),
            kappa: r.random_range(0.0..2.0),
            wide_domain: r.random(),
        }
    }
}

/// Checks the ε-ball and domain bounds for PGD and FGSM, and that FGSM is
/// bit-identical to one PGD step of size ε from the clean input.
pub fn check_attack_case(c: &AttackCase) -> Result<(), String> {
    let (spec, params) = toy_model(c.dim, c.hidden, c.classes, c.model_seed);
    let domain = if c.wide_domain { Domain { lo: -1.0, hi: 2.0 } } else { Domain::default() };
    let x = inputs(c.batch, c.dim, c.data_seed, domain);
    let labels: Vec<usize> = (0..c.batch).map(|i| (i + c.data_seed as usize) % c.classes).collect();
    let loss = if c.margin { AttackLoss::CwMargin { kappa: c.kappa } } else { AttackLoss::CrossEntropy };
    let mut cfg = AttackConfig::pgd(c.eps, (c.alpha_scale * c.eps).max(1e-3), c.steps).with_loss(loss);
    cfg.random_start = c.random_start;
    cfg.domain = domain;
    let adv = attack::pgd(&params, &spec, &x, &labels, &cfg, c.attack_seed).map_err(|e| e.to_string())?;
    if adv.shape() != x.shape() {
        return Err(format!("shape {:?} != {:?}", adv.shape(), x.shape()));
    }
    within_budget(&adv, &x, c.eps, domain)?;

    let mut f = AttackConfig::fgsm(c.eps.max(1e-3)).with_loss(loss);
    f.domain = domain;
    let one = attack::fgsm(&params, &spec, &x, &labels, &f).map_err(|e| e.to_string())?;
    within_budget(&one, &x, f.epsilon, domain)?;
    let mut as_pgd = AttackConfig::pgd(f.epsilon, f.epsilon, 1).with_loss(loss);
    as_pgd.random_start = false;
    as_pgd.domain = domain;
    let via_pgd = attack::pgd(&params, &spec, &x, &labels, &as_pgd, c.attack_seed).map_err(|e| e.to_string())?;
    if one.data().iter().zip(via_pgd.data()).any(|(a, b)| a.to_bits() != b.to_bits()) {
        return Err("fgsm differs from single-step pgd".into());
    }
    Ok(())
}
