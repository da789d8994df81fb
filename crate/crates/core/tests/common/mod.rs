//! Independent oracles shared by integration tests.
#![allow(dead_code)]

/// Gamma((nu+1)/2) / Gamma(nu/2) for integer nu, by the half-integer recurrence.
pub fn t_gamma_ratio(nu: usize) -> f64 {
    assert!(nu >= 1);
    let mut r = if nu % 2 == 1 { 1.0 / std::f64::consts::PI.sqrt() } else { std::f64::consts::PI.sqrt() / 2.0 };
    let mut k = if nu % 2 == 1 { 1 } else { 2 };
    while k < nu {
        r *= (k as f64 + 1.0) / k as f64;
        k += 2;
    }
    r
}

pub fn t_pdf(x: f64, nu: usize) -> f64 {
    let v = nu as f64;
    t_gamma_ratio(nu) / (v * std::f64::consts::PI).sqrt() * (1.0 + x * x / v).powf(-(v + 1.0) / 2.0)
}

/// Two-sided p-value by composite Simpson integration of the t density over [0, |t|].
pub fn t_two_sided_quadrature(t: f64, nu: usize) -> f64 {
    let b = t.abs();
    if b == 0.0 {
        return 1.0;
    }
    let m = 1usize << 16;
    let h = b / m as f64;
    let mut s = t_pdf(0.0, nu) + t_pdf(b, nu);
    for i in 1..m {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        s += w * t_pdf(i as f64 * h, nu);
    }
    1.0 - 2.0 * s * h / 3.0
}

/// Brute-force AUROC over all positive/negative pairs, ties counted as one half.
pub fn auroc_pairs(scores: &[f64], labels: &[f64]) -> f64 {
    let mut twice = 0u64;
    let mut pairs = 0u64;
    for (i, &si) in scores.iter().enumerate() {
        if labels[i] != 1.0 {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] != 0.0 {
                continue;
            }
            pairs += 1;
            twice += if si > sj { 2 } else if si == sj { 1 } else { 0 };
        }
    }
    twice as f64 / (2 * pairs) as f64
}

use facestress::model::{Fusion, ModelConfig, TemporalModel};
use ndcore::{Init, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;

/// `||a - n|| / max(||a||, ||n||)`.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, n)| (a - n) * (a - n)).sum::<f64>().sqrt();
    let na: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn: f64 = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    diff / na.max(nn).max(1e-300)
}

pub fn uniform(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Worst relative error over the inputs of `sum(op(inputs) * probe)`, with
/// a fixed Gaussian probe weighting every output element differently.
pub fn op_gradient_error(inputs: &[Tensor], op: impl Fn(&mut Tape, &[Var]) -> Var) -> f64 {
    let loss_of = |xs: &[Tensor]| -> (Tape, Vec<Var>, Var) {
        let mut tape = Tape::eval();
        let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone())).collect();
        let out = op(&mut tape, &vars);
        let shape = tape.shape(out).to_vec();
        let probe = tape.leaf(Init::new(99).normal(&shape, 1.0));
        let prod = tape.mul(out, probe);
        let loss = tape.sum_all(prod);
        (tape, vars, loss)
    };
    let (tape, vars, loss) = loss_of(inputs);
    let grads = tape.backward(loss);
    let mut worst = 0.0f64;
    for (idx, &v) in vars.iter().enumerate() {
        let analytic = grads.tensor(v);
        let mut numeric = vec![0.0; inputs[idx].len()];
        for (j, nj) in numeric.iter_mut().enumerate() {
            let mut plus = inputs.to_vec();
            plus[idx].data_mut()[j] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[idx].data_mut()[j] -= FD_STEP;
            let (tp, _, lp) = loss_of(&plus);
            let (tm, _, lm) = loss_of(&minus);
            *nj = (tp.value(lp).item() - tm.value(lm).item()) / (2.0 * FD_STEP);
        }
        worst = worst.max(relative_error(analytic.data(), &numeric));
    }
    worst
}

/// Small configuration used for end-to-end gradient checks.
pub fn toy_config(fusion: Fusion) -> ModelConfig {
    ModelConfig {
        embed_dim: 16,
        n_layers: 2,
        n_heads: 2,
        ffn_dim: 32,
        dropout: 0.0,
        max_t: 12,
        stem_kernels: vec![3, 5, 7],
        fusion,
        head_hidden: 8,
    }
}

/// Relative error of the loss gradient over every parameter of a toy model
/// on a batch of two `T = 12` windows with stream widths `dims`.
pub fn architecture_gradient_error(fusion: Fusion, dims: &[usize]) -> f64 {
    let mut m = TemporalModel::new(toy_config(fusion), dims, 11).unwrap();
    let inputs: Vec<Tensor> = dims.iter().enumerate().map(|(i, &f)| uniform(&[2, 12, f], 20 + i as u64)).collect();
    let labels = [1.0, 0.0];
    let (_, grads) = m.loss_and_grads(&inputs, &labels, 0).unwrap();
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for p in 0..m.params.len() {
        for i in 0..m.params.tensors[p].len() {
            let orig = m.params.tensors[p].data()[i];
            m.params.tensors[p].data_mut()[i] = orig + FD_STEP;
            let up = m.loss(&inputs, &labels).unwrap();
            m.params.tensors[p].data_mut()[i] = orig - FD_STEP;
            let down = m.loss(&inputs, &labels).unwrap();
            m.params.tensors[p].data_mut()[i] = orig;
            numeric.push((up - down) / (2.0 * FD_STEP));
            analytic.push(grads[p].data()[i]);
        }
    }
    relative_error(&analytic, &numeric)
}
