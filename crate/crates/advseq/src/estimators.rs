//! Generator update rules.
//!
//! Each estimator is expressed as a surrogate scalar whose reverse-mode
//! gradient w.r.t. the generator parameters equals the estimator. Advantage
//! tensors are computed outside the graph and enter it as constants, so no
//! gradient ever flows through them.
//!
//! The Taylor estimator spreads the reward of one sampled sequence over all
//! of its single-token substitutions: substituted rewards come from a
//! first-order expansion at the embedding output, and each candidate's
//! credit is importance-weighted by a Gaussian kernel over token embeddings
//! whose bandwidth interpolates between REINFORCE (bandwidth -> 0) and the
//! Straight-Through estimator (bandwidth -> infinity).

use rand::Rng;
use thiserror::Error;

use crate::discriminator::{Discriminator, RewardBundle};
use crate::generator::{GenRollout, Generator, PolicyRollout};
use crate::graph::{Graph, GraphError, NodeId};
use crate::rng::SeedRng;
use crate::tensor::{gemm, Tensor};
use crate::vocab::{PAD, SOS};

#[derive(Debug, Error)]
pub enum EstimatorError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("bandwidth must be positive, got {0}")]
    BadBandwidth(f64),
    #[error("estimator surrogates require rollouts at temperature 1, got {0}")]
    TemperedRollout(f64),
    #[error("dimension mismatch: {0}")]
    Mismatch(String),
}

pub type Result<T> = std::result::Result<T, EstimatorError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EstimatorKind {
    Reinforce,
    StraightThrough,
    GumbelSoftmax,
    Taylor,
}

impl EstimatorKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "reinforce" => Some(EstimatorKind::Reinforce),
            "straight_through" => Some(EstimatorKind::StraightThrough),
            "gumbel_softmax" => Some(EstimatorKind::GumbelSoftmax),
            "taylor" => Some(EstimatorKind::Taylor),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            EstimatorKind::Reinforce => "reinforce",
            EstimatorKind::StraightThrough => "straight_through",
            EstimatorKind::GumbelSoftmax => "gumbel_softmax",
            EstimatorKind::Taylor => "taylor",
        }
    }
}

#[derive(Clone, Debug)]
pub struct EstimatorConfig {
    pub kind: EstimatorKind,
    /// Kernel bandwidth; only the Taylor estimator reads it.
    pub bandwidth: f64,
    pub entropy_weight: f64,
    pub baseline_decay: f64,
    /// Exponential annealing endpoints for the Gumbel-Softmax temperature.
    pub gumbel_temp_start: f64,
    pub gumbel_temp_end: f64,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        EstimatorConfig {
            kind: EstimatorKind::Taylor,
            bandwidth: 0.5,
            entropy_weight: 0.02,
            baseline_decay: 0.9,
            gumbel_temp_start: 1.0,
            gumbel_temp_end: 0.3,
        }
    }
}

/// Exponential-moving-average reward baseline; the first update seeds the
/// average with the first batch mean.
#[derive(Clone, Copy, Debug)]
pub struct BaselineState {
    value: f64,
    decay: f64,
    initialized: bool,
}

impl BaselineState {
    pub fn new(decay: f64) -> Self {
        assert!((0.0..1.0).contains(&decay), "decay must be in [0, 1)");
        BaselineState { value: 0.0, decay, initialized: false }
    }

    pub fn value(&self) -> f64 {
        self.value
    }

    pub fn update(&mut self, batch_mean_reward: f64) -> f64 {
        if self.initialized {
            self.value = self.decay * self.value + (1.0 - self.decay) * batch_mean_reward;
        } else {
            self.value = batch_mean_reward;
            self.initialized = true;
        }
        self.value
    }
}

/// Column-normalized Gaussian kernel over token embeddings.
///
/// `k[u, v]` is the probability of substituting token v by token u; columns
/// sum to one over the unmasked candidate rows. `log_k` carries the same
/// information for underflow-free arithmetic with peaked policies.
#[derive(Clone, Debug)]
pub struct KernelMatrix {
    pub k: Tensor,
    pub log_k: Tensor,
    pub candidate_mask: Vec<bool>,
}

/// Candidate mask for a text vocabulary: PAD and SOS are never valid
/// replacements; EOS is an ordinary generation decision.
pub fn text_candidate_mask(vocab_size: usize) -> Vec<bool> {
    (0..vocab_size).map(|i| i != PAD && i != SOS).collect()
}

pub fn hamming_kernel(
    w_embed: &Tensor,
    bandwidth: f64,
    candidate_mask: &[bool],
) -> Result<KernelMatrix> {
    if bandwidth <= 0.0 {
        return Err(EstimatorError::BadBandwidth(bandwidth));
    }
    let s = w_embed.shape();
    let (v, d) = (s[0], s[1]);
    if candidate_mask.len() != v {
        return Err(EstimatorError::Mismatch(format!(
            "mask length {} vs vocab {}",
            candidate_mask.len(),
            v
        )));
    }
    if !candidate_mask.iter().any(|&m| m) {
        return Err(EstimatorError::Mismatch("empty candidate set".into()));
    }
    // Pairwise squared distances via the Gram matrix.
    let mut gram = vec![0.0; v * v];
    gemm(&mut gram, w_embed.data(), false, w_embed.data(), true, v, d, v, 1.0, 0.0);
    let norms: Vec<f64> = (0..v).map(|i| gram[i * v + i]).collect();
    let inv_two_bw2 = 1.0 / (2.0 * bandwidth * bandwidth);
    let mut log_k = Tensor::filled(&[v, v], f64::NEG_INFINITY);
    for col in 0..v {
        let mut max_l = f64::NEG_INFINITY;
        for row in 0..v {
            if !candidate_mask[row] {
                continue;
            }
            let d2 = (norms[row] + norms[col] - 2.0 * gram[row * v + col]).max(0.0);
            let l = -d2 * inv_two_bw2;
            log_k.data_mut()[row * v + col] = l;
            max_l = max_l.max(l);
        }
        let mut z = 0.0;
        for row in 0..v {
            if candidate_mask[row] {
                z += (log_k.at2(row, col) - max_l).exp();
            }
        }
        let log_z = max_l + z.ln();
        for row in 0..v {
            if candidate_mask[row] {
                let entry = log_k.at2(row, col) - log_z;
                log_k.set2(row, col, entry);
            }
        }
    }
    let k = log_k.map(f64::exp);
    Ok(KernelMatrix { k, log_k, candidate_mask: candidate_mask.to_vec() })
}

/// Importance-weighted, baseline-subtracted substituted-token advantages.
///
/// Entry (n, v, t) is K(v|x_t) pi(v|prefix) / sum_u K(v|u) pi(u|prefix)
/// times (substituted reward - baseline); zero at and past each length.
/// The importance weight is evaluated in log space with the inner sum over
/// u running in a max-shifted probability scale, which keeps peaked
/// policies from underflowing the denominator.
pub fn taylor_advantages(
    rollout: &PolicyRollout,
    taylor: &Tensor,
    kernel: &KernelMatrix,
    baseline: f64,
) -> Result<Tensor> {
    if rollout.temperature != 1.0 {
        return Err(EstimatorError::TemperedRollout(rollout.temperature));
    }
    let (n, t_max) = (rollout.tokens.n, rollout.tokens.t_max);
    let v = kernel.candidate_mask.len();
    if taylor.shape() != [n, v, t_max] {
        return Err(EstimatorError::Mismatch(format!(
            "taylor matrix shape {:?}",
            taylor.shape()
        )));
    }
    let mut out = Tensor::zeros(&[n, v, t_max]);
    // Gather the alive (n, t) positions and their max-shifted probability
    // columns for one batched denominator product D = K * Qhat.
    let mut alive = Vec::new();
    for row in 0..n {
        for t in 0..rollout.tokens.lengths[row] {
            alive.push((row, t));
        }
    }
    if alive.is_empty() {
        return Ok(out);
    }
    let p = alive.len();
    let mut qhat = vec![0.0; v * p];
    let mut max_logq = vec![f64::NEG_INFINITY; p];
    for (col, &(row, t)) in alive.iter().enumerate() {
        let base = (row * t_max + t) * v;
        let logq = &rollout.step_log_dists.data()[base..base + v];
        let m = logq.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        max_logq[col] = m;
        for u in 0..v {
            qhat[u * p + col] = (logq[u] - m).exp();
        }
    }
    let mut den = vec![0.0; v * p];
    gemm(&mut den, kernel.k.data(), false, &qhat, false, v, v, p, 1.0, 0.0);

    for (col, &(row, t)) in alive.iter().enumerate() {
        let tok = rollout.tokens.token_at(row, t);
        let base = (row * t_max + t) * v;
        let logq = &rollout.step_log_dists.data()[base..base + v];
        for cand in 0..v {
            if !kernel.candidate_mask[cand] {
                continue;
            }
            let num = kernel.log_k.at2(cand, tok) + logq[cand];
            if num == f64::NEG_INFINITY {
                continue;
            }
            let d_fast = den[cand * p + col];
            let log_den = if d_fast > 0.0 {
                max_logq[col] + d_fast.ln()
            } else {
                // Full underflow in the shifted sum; do the exact
                // log-sum-exp over u for this candidate alone.
                let mut m = f64::NEG_INFINITY;
                for u in 0..v {
                    let term = kernel.log_k.at2(cand, u) + logq[u];
                    m = m.max(term);
                }
                let mut z = 0.0;
                for u in 0..v {
                    let term = kernel.log_k.at2(cand, u) + logq[u];
                    if term > f64::NEG_INFINITY {
                        z += (term - m).exp();
                    }
                }
                m + z.ln()
            };
            let weight = (num - log_den).exp();
            let r_sub = taylor.at3(row, cand, t);
            out.data_mut()[(row * v + cand) * t_max + t] = weight * (r_sub - baseline);
        }
    }
    Ok(out)
}

fn advantage_slice(adv: &Tensor, t: usize) -> Tensor {
    let s = adv.shape();
    let (n, v, t_max) = (s[0], s[1], s[2]);
    let mut out = Tensor::zeros(&[n, v]);
    for row in 0..n {
        for cand in 0..v {
            out.data_mut()[row * v + cand] = adv.data()[(row * v + cand) * t_max + t];
        }
    }
    out
}

/// Surrogate whose gradient is the Taylor estimator:
/// (1/N) sum_n sum_t sum_v advantage[n,v,t] * log pi(v | prefix).
pub fn taylor_surrogate(gr: &mut GenRollout, advantages: &Tensor) -> Result<NodeId> {
    let n = gr.rollout.tokens.n;
    let g = &mut gr.graph;
    let mut acc: Option<NodeId> = None;
    for (t, step) in gr.steps.iter().enumerate() {
        let slice = advantage_slice(advantages, t);
        if slice.data().iter().all(|&x| x == 0.0) {
            continue;
        }
        let a = g.constant(slice);
        let weighted = g.mul(a, step.log_dist)?;
        let s = g.sum(weighted)?;
        acc = Some(match acc {
            Some(prev) => g.add(prev, s)?,
            None => s,
        });
    }
    let total = match acc {
        Some(node) => node,
        None => g.constant(Tensor::scalar(0.0)),
    };
    Ok(g.scale(total, 1.0 / n as f64)?)
}

/// Surrogate whose gradient is the REINFORCE estimator with baseline:
/// (1/N) sum_n (R_n - b) log pi(x^(n)).
pub fn reinforce_surrogate(gr: &mut GenRollout, rewards: &[f64], baseline: f64) -> Result<NodeId> {
    let (n, _t_max) = (gr.rollout.tokens.n, gr.rollout.tokens.t_max);
    if rewards.len() != n {
        return Err(EstimatorError::Mismatch(format!(
            "{} rewards for batch of {}",
            rewards.len(),
            n
        )));
    }
    if gr.rollout.temperature != 1.0 {
        return Err(EstimatorError::TemperedRollout(gr.rollout.temperature));
    }
    let lengths = gr.rollout.tokens.lengths.clone();
    let tokens = gr.rollout.tokens.clone();
    let g = &mut gr.graph;
    let mut acc: Option<NodeId> = None;
    for (t, step) in gr.steps.iter().enumerate() {
        let ids: Vec<usize> = (0..n).map(|row| tokens.token_at(row, t)).collect();
        let w: Vec<f64> = (0..n)
            .map(|row| if t < lengths[row] { rewards[row] - baseline } else { 0.0 })
            .collect();
        if w.iter().all(|&x| x == 0.0) {
            continue;
        }
        let picked = g.select_per_row(step.log_dist, &ids)?;
        let wc = g.constant(Tensor::new(vec![n], w));
        let weighted = g.mul(picked, wc)?;
        let s = g.sum(weighted)?;
        acc = Some(match acc {
            Some(prev) => g.add(prev, s)?,
            None => s,
        });
    }
    let total = match acc {
        Some(node) => node,
        None => g.constant(Tensor::scalar(0.0)),
    };
    Ok(g.scale(total, 1.0 / n as f64)?)
}

/// Surrogate whose gradient is the Straight-Through estimator: the reward
/// gradient at the embedding output contracted with the probability-weighted
/// embedding, per step. Both the tap and the target embedding matrix enter
/// as constants.
pub fn straight_through_surrogate(
    gr: &mut GenRollout,
    bundle: &RewardBundle,
    disc_embed: &Tensor,
) -> Result<NodeId> {
    let (n, t_max) = (gr.rollout.tokens.n, gr.rollout.tokens.t_max);
    let d_e = disc_embed.shape()[1];
    if bundle.delta_e.shape() != [n, t_max, d_e] {
        return Err(EstimatorError::Mismatch(format!(
            "delta_e shape {:?}",
            bundle.delta_e.shape()
        )));
    }
    if gr.rollout.temperature != 1.0 {
        return Err(EstimatorError::TemperedRollout(gr.rollout.temperature));
    }
    let g = &mut gr.graph;
    let w_e = g.constant(disc_embed.clone());
    let mut acc: Option<NodeId> = None;
    for (t, step) in gr.steps.iter().enumerate() {
        // delta_e rows past the length are zero, masking dead steps.
        let mut delta_t = Tensor::zeros(&[n, d_e]);
        for row in 0..n {
            for j in 0..d_e {
                delta_t.data_mut()[row * d_e + j] = bundle.delta_e.at3(row, t, j);
            }
        }
        if delta_t.data().iter().all(|&x| x == 0.0) {
            continue;
        }
        let soft = g.matmul(step.dist, w_e)?;
        let dc = g.constant(delta_t);
        let prod = g.mul(soft, dc)?;
        let s = g.sum(prod)?;
        acc = Some(match acc {
            Some(prev) => g.add(prev, s)?,
            None => s,
        });
    }
    let total = match acc {
        Some(node) => node,
        None => g.constant(Tensor::scalar(0.0)),
    };
    Ok(g.scale(total, 1.0 / n as f64)?)
}

/// lambda_h * (1/N) sum_n sum_t H(pi(.|prefix)), as a graph node to be
/// maximized alongside a surrogate.
pub fn entropy_bonus(gr: &mut GenRollout, entropy_weight: f64) -> Result<NodeId> {
    let (n, v) = (gr.rollout.tokens.n, gr.rollout.step_dists.shape()[2]);
    let lengths = gr.rollout.tokens.lengths.clone();
    let g = &mut gr.graph;
    let mut acc: Option<NodeId> = None;
    for (t, step) in gr.steps.iter().enumerate() {
        let mut mask = Tensor::zeros(&[n, v]);
        let mut any = false;
        for row in 0..n {
            if t < lengths[row] {
                any = true;
                for j in 0..v {
                    mask.data_mut()[row * v + j] = 1.0;
                }
            }
        }
        if !any {
            continue;
        }
        let m = g.constant(mask);
        let p_ls = g.mul(step.dist, step.log_dist)?;
        let masked = g.mul(p_ls, m)?;
        let s = g.sum(masked)?;
        acc = Some(match acc {
            Some(prev) => g.add(prev, s)?,
            None => s,
        });
    }
    let total = match acc {
        Some(node) => node,
        None => g.constant(Tensor::scalar(0.0)),
    };
    // sum p log p is negative entropy.
    Ok(g.scale(total, -entropy_weight / n as f64)?)
}

pub fn update_baseline(state: &mut BaselineState, batch_rewards: &[f64]) -> f64 {
    assert!(!batch_rewards.is_empty(), "empty reward batch");
    let mean = batch_rewards.iter().sum::<f64>() / batch_rewards.len() as f64;
    state.update(mean)
}

/// One fully differentiable relaxed-sample pass: per step the generator's
/// logits plus Gumbel noise are softened at `tau_g`, the soft token feeds
/// both the next generator input and the discriminator's embedding space.
pub struct GumbelStep {
    pub graph: Graph,
    pub binding: crate::generator::GenBinding,
    pub loss: NodeId,
    pub reward_mean: f64,
}

pub fn gumbel_softmax_step(
    gen: &Generator,
    disc: &Discriminator,
    n: usize,
    t_max: usize,
    tau_g: f64,
    entropy_weight: f64,
    rng: &mut SeedRng,
) -> Result<GumbelStep> {
    assert!(tau_g > 0.0, "gumbel temperature must be positive");
    let v = gen.cfg.vocab_size;
    let mut g = Graph::new();
    let binding = gen
        .bind(&mut g, n)
        .map_err(|e| match e {
            crate::generator::GeneratorError::Graph(ge) => EstimatorError::Graph(ge),
            other => EstimatorError::Mismatch(other.to_string()),
        })?;
    let disc_binding = disc.bind_const(&mut g);
    let disc_embed = g.constant(disc.w_embed.clone());
    let mut h = binding.h0;
    let sos_ids = vec![SOS.min(v - 1); n];
    let mut emb_in = g.gather_rows(binding.w_embed, &sos_ids)?;
    let mut soft_cols = Vec::with_capacity(t_max);
    let mut neg_entropy: Option<NodeId> = None;
    for _ in 0..t_max {
        let (h_new, logits) = gen
            .step_from_emb(&mut g, &binding, h, emb_in)
            .map_err(|e| match e {
                crate::generator::GeneratorError::Graph(ge) => EstimatorError::Graph(ge),
                other => EstimatorError::Mismatch(other.to_string()),
            })?;
        h = h_new;
        let mut noise = Tensor::zeros(&[n, v]);
        for x in noise.data_mut() {
            let u: f64 = rng.gen::<f64>().clamp(1e-12, 1.0 - 1e-12);
            *x = -(-u.ln()).ln();
        }
        let noise_c = g.constant(noise);
        let noisy = g.add(logits, noise_c)?;
        let y = g.softmax_t(noisy, tau_g)?;
        // Policy entropy at temperature 1 for the bonus term.
        let ls = g.log_softmax_t(logits, 1.0)?;
        let p = g.exp(ls)?;
        let p_ls = g.mul(p, ls)?;
        let s = g.sum(p_ls)?;
        neg_entropy = Some(match neg_entropy {
            Some(prev) => g.add(prev, s)?,
            None => s,
        });
        // Soft embeddings for both networks.
        emb_in = g.matmul(y, binding.w_embed)?;
        soft_cols.push(g.matmul(y, disc_embed)?);
    }
    let stacked = g.stack_time(&soft_cols)?;
    let lengths = vec![t_max; n];
    let logits = disc
        .body(&mut g, &disc_binding, stacked, &lengths)
        .map_err(|e| match e {
            crate::discriminator::DiscError::Graph(ge) => EstimatorError::Graph(ge),
            other => EstimatorError::Mismatch(other.to_string()),
        })?;
    let mean_r = g.mean(logits)?;
    let reward_mean = g.value(mean_r).item();
    let neg_r = g.scale(mean_r, -1.0)?;
    // Minimize -E[R] - lambda_h * mean entropy.
    let ent_term = g.scale(neg_entropy.expect("t_max >= 1"), entropy_weight / n as f64)?;
    let loss = g.add(neg_r, ent_term)?;
    Ok(GumbelStep { graph: g, binding, loss, reward_mean })
}
