//! Exact enumeration over tiny sequence spaces.
//!
//! For vocabularies of at most 6 symbols and horizons of at most 4 steps,
//! every sequence can be enumerated and every expectation computed in
//! closed form. This module turns the estimator identities into executable
//! checks: unbiasedness of the score-function estimator, bias-freeness of
//! the reward baseline, the bandwidth limits that recover REINFORCE and the
//! Straight-Through estimator, the entropy-gradient identity, and the
//! exactness of the importance weighting when the substituted reward is the
//! true state-action value.

use thiserror::Error;

use crate::corpus::SequenceBatch;
use crate::discriminator::{Discriminator, DiscriminatorConfig};
use crate::estimators::{
    hamming_kernel, reinforce_surrogate, straight_through_surrogate, taylor_advantages,
    taylor_surrogate, KernelMatrix,
};
use crate::generator::{GenRollout, Generator, GeneratorConfig};
use crate::gradcheck::rel_l2_error;
use crate::rng::{seed_rng, SeedRng};
use crate::tensor::Tensor;

pub const MAX_VOCAB: usize = 6;
pub const MAX_LEN: usize = 4;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("enumeration space {vocab}^{len} exceeds caps {MAX_VOCAB}^{MAX_LEN}")]
    SpaceTooLarge { vocab: usize, len: usize },
}

/// All sequences of a fixed length over a tiny vocabulary, ordered so that
/// row index equals the base-V code with the first token most significant.
pub struct EnumerationSpace {
    pub vocab_size: usize,
    pub len: usize,
    batch: SequenceBatch,
}

impl EnumerationSpace {
    pub fn new(vocab_size: usize, len: usize) -> Result<Self, OracleError> {
        if vocab_size > MAX_VOCAB || len > MAX_LEN || vocab_size == 0 || len == 0 {
            return Err(OracleError::SpaceTooLarge { vocab: vocab_size, len });
        }
        let count = vocab_size.pow(len as u32);
        let mut ids = vec![0usize; count * len];
        for code in 0..count {
            let mut c = code;
            for pos in (0..len).rev() {
                ids[code * len + pos] = c % vocab_size;
                c /= vocab_size;
            }
        }
        let batch = SequenceBatch { ids, n: count, t_max: len, lengths: vec![len; count] };
        Ok(EnumerationSpace { vocab_size, len, batch })
    }

    pub fn count(&self) -> usize {
        self.batch.n
    }

    pub fn batch(&self) -> &SequenceBatch {
        &self.batch
    }

    pub fn single(&self, code: usize) -> SequenceBatch {
        let row: Vec<usize> = self.batch.row(code).to_vec();
        SequenceBatch { ids: row, n: 1, t_max: self.len, lengths: vec![self.len] }
    }

    pub fn describe(&self) -> String {
        format!("V={}, T={} ({} seqs)", self.vocab_size, self.len, self.count())
    }
}

/// Flattened generator gradient from a finished surrogate graph.
pub fn flat_gen_grads(gr: &GenRollout, gen: &Generator, output: crate::graph::NodeId) -> Vec<f64> {
    let mut grads = gr.graph.backward(output, &[]).expect("backward");
    Generator::param_nodes(&gr.binding)
        .iter()
        .zip(gen.param_shapes())
        .flat_map(|(&id, s)| grads.take_or_zeros(id, &s).data().to_vec())
        .collect()
}

/// Exact policy probabilities over the space.
pub fn policy_probs(gen: &Generator, space: &EnumerationSpace) -> Vec<f64> {
    gen.log_prob(space.batch())
        .expect("enumeration log_prob")
        .iter()
        .map(|lp| lp.exp())
        .collect()
}

/// Autodiff gradient of sum_x pi(x) R(x), computed in closed form over the
/// whole space (no sampling).
pub fn exact_objective_gradient(
    gen: &Generator,
    space: &EnumerationSpace,
    rewards: &[f64],
) -> Vec<f64> {
    assert_eq!(rewards.len(), space.count(), "one reward per sequence");
    let mut gr = gen.teacher_forced(space.batch()).expect("teacher forcing");
    let n = space.count();
    let g = &mut gr.graph;
    let mut logp: Option<crate::graph::NodeId> = None;
    for (t, step) in gr.steps.iter().enumerate() {
        let ids: Vec<usize> = (0..n).map(|row| space.batch().token_at(row, t)).collect();
        let picked = g.select_per_row(step.log_dist, &ids).expect("select");
        logp = Some(match logp {
            Some(prev) => g.add(prev, picked).expect("add"),
            None => picked,
        });
    }
    let p = g.exp(logp.expect("len >= 1")).expect("exp");
    let r = g.constant(Tensor::new(vec![n], rewards.to_vec()));
    let weighted = g.mul(p, r).expect("mul");
    let obj = g.sum(weighted).expect("sum");
    flat_gen_grads(&gr, gen, obj)
}

/// Expected value of sum_t H(pi(.|x_<t)) with the gradient taken inside the
/// expectation (prefix measure held fixed): the right-hand side of the
/// greedy entropy-estimator identity.
pub fn expected_stepwise_entropy_gradient(gen: &Generator, space: &EnumerationSpace) -> Vec<f64> {
    let probs = policy_probs(gen, space);
    let mut gr = gen.teacher_forced(space.batch()).expect("teacher forcing");
    let n = space.count();
    let g = &mut gr.graph;
    let mut acc: Option<crate::graph::NodeId> = None;
    let w = g.constant(Tensor::new(vec![n], probs));
    for step in &gr.steps {
        let p_ls = g.mul(step.dist, step.log_dist).expect("mul");
        let neg_h = g.row_sum(p_ls).expect("row_sum");
        let weighted = g.mul(neg_h, w).expect("mul");
        let s = g.sum(weighted).expect("sum");
        acc = Some(match acc {
            Some(prev) => g.add(prev, s).expect("add"),
            None => s,
        });
    }
    let total = g.scale(acc.expect("steps"), -1.0).expect("scale");
    flat_gen_grads(&gr, gen, total)
}

/// Single-sample estimators whose enumeration expectation the suite checks.
pub enum OracleEstimator {
    Reinforce { baseline: f64 },
    Taylor { bandwidth: f64, baseline: f64 },
    /// The Taylor weighting machinery with the substituted reward replaced
    /// by the exact state-action value.
    TaylorExactQ { bandwidth: f64 },
    /// Greedy entropy estimator: per-step score times -log pi of the
    /// sampled token.
    GreedyEntropy,
}

/// sum_x pi(x) g_hat(x), with g_hat the per-sample estimator gradient.
pub fn estimator_expectation(
    gen: &Generator,
    disc: &Discriminator,
    space: &EnumerationSpace,
    est: &OracleEstimator,
) -> Vec<f64> {
    let probs = policy_probs(gen, space);
    let rewards = disc.reward(space.batch()).expect("rewards");
    let kernel = match est {
        OracleEstimator::Taylor { bandwidth, .. }
        | OracleEstimator::TaylorExactQ { bandwidth } => Some(
            hamming_kernel(&disc.w_embed, *bandwidth, &vec![true; space.vocab_size])
                .expect("kernel"),
        ),
        _ => None,
    };
    let q_table = match est {
        OracleEstimator::TaylorExactQ { .. } => Some(exact_q_table(gen, space, &rewards)),
        _ => None,
    };
    let total_params: usize = gen.param_shapes().iter().map(|s| s.iter().product::<usize>()).sum();
    let mut acc = vec![0.0; total_params];
    for code in 0..space.count() {
        let single = space.single(code);
        let mut gr = gen.teacher_forced(&single).expect("teacher forcing");
        let node = match est {
            OracleEstimator::Reinforce { baseline } => {
                reinforce_surrogate(&mut gr, &[rewards[code]], *baseline).expect("surrogate")
            }
            OracleEstimator::Taylor { bandwidth: _, baseline } => {
                let bundle = disc.reward_with_embedding_grad(&single).expect("bundle");
                let tm = disc.taylor_matrix(&bundle, &single).expect("taylor matrix");
                let adv = taylor_advantages(
                    &gr.rollout,
                    &tm,
                    kernel.as_ref().expect("kernel"),
                    *baseline,
                )
                .expect("advantages");
                taylor_surrogate(&mut gr, &adv).expect("surrogate")
            }
            OracleEstimator::TaylorExactQ { .. } => {
                let q = q_table.as_ref().expect("q table");
                let tm = q_matrix_for(space, code, q);
                let adv = taylor_advantages(&gr.rollout, &tm, kernel.as_ref().expect("kernel"), 0.0)
                    .expect("advantages");
                taylor_surrogate(&mut gr, &adv).expect("surrogate")
            }
            OracleEstimator::GreedyEntropy => {
                let g = &mut gr.graph;
                let mut acc_node: Option<crate::graph::NodeId> = None;
                for (t, step) in gr.steps.iter().enumerate() {
                    let tok = single.token_at(0, t);
                    let r_t = -gr.rollout.step_logprobs.at2(0, t);
                    let picked = g.select_per_row(step.log_dist, &[tok]).expect("select");
                    let w = g.constant(Tensor::new(vec![1], vec![r_t]));
                    let weighted = g.mul(picked, w).expect("mul");
                    let s = g.sum(weighted).expect("sum");
                    acc_node = Some(match acc_node {
                        Some(prev) => g.add(prev, s).expect("add"),
                        None => s,
                    });
                }
                acc_node.expect("steps")
            }
        };
        let grad = flat_gen_grads(&gr, gen, node);
        for (a, gi) in acc.iter_mut().zip(grad.iter()) {
            *a += probs[code] * gi;
        }
    }
    acc
}

/// Q^pi(prefix, v) for every prefix level, by backward recursion over the
/// enumeration tree. Level t holds V^t * V entries indexed by
/// (prefix code) * V + candidate.
pub fn exact_q_table(
    gen: &Generator,
    space: &EnumerationSpace,
    rewards: &[f64],
) -> Vec<Vec<f64>> {
    let v = space.vocab_size;
    let t_len = space.len;
    let fwd = gen.teacher_forced(space.batch()).expect("teacher forcing");
    let dists = &fwd.rollout.step_dists;
    // Conditional next-token table per level: pi(w | prefix).
    let cond: Vec<Vec<f64>> = (0..t_len)
        .map(|level| {
            let prefixes = v.pow(level as u32);
            let mut table = vec![0.0; prefixes * v];
            for p in 0..prefixes {
                // Any row whose first `level` tokens spell the prefix sees
                // the same conditional; take the first such row.
                let row = p * v.pow((t_len - level) as u32);
                for w in 0..v {
                    table[p * v + w] = dists.at3(row, level, w);
                }
            }
            table
        })
        .collect();
    let mut levels: Vec<Vec<f64>> = vec![Vec::new(); t_len];
    // Deepest level: Q(prefix of len T-1, v) = R(prefix + v).
    levels[t_len - 1] = rewards.to_vec();
    for level in (0..t_len - 1).rev() {
        let prefixes = v.pow(level as u32);
        let mut table = vec![0.0; prefixes * v];
        for p in 0..prefixes {
            for cand in 0..v {
                let child = p * v + cand;
                let mut acc = 0.0;
                for w in 0..v {
                    acc += cond[level + 1][child * v + w] * levels[level + 1][child * v + w];
                }
                table[p * v + cand] = acc;
            }
        }
        levels[level] = table;
    }
    levels
}

/// Substituted-reward matrix (1, V, T) holding exact Q values for one
/// sequence of the space.
fn q_matrix_for(space: &EnumerationSpace, code: usize, q: &[Vec<f64>]) -> Tensor {
    let v = space.vocab_size;
    let t_len = space.len;
    let mut out = Tensor::zeros(&[1, v, t_len]);
    for t in 0..t_len {
        let prefix = code / v.pow((t_len - t) as u32);
        for cand in 0..v {
            out.data_mut()[cand * t_len + t] = q[t][prefix * v + cand];
        }
    }
    out
}

// ── The check suite ─────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorKind {
    Abs,
    Rel,
}

#[derive(Clone, Debug)]
pub struct OracleReport {
    pub name: String,
    pub max_error: f64,
    pub tolerance: f64,
    pub kind: ErrorKind,
    pub passed: bool,
    pub space: String,
}

impl OracleReport {
    fn new(name: &str, max_error: f64, tolerance: f64, kind: ErrorKind, space: String) -> Self {
        OracleReport {
            name: name.to_string(),
            max_error,
            tolerance,
            kind,
            passed: max_error < tolerance && max_error.is_finite(),
            space,
        }
    }
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn oracle_models(vocab: usize, seed: u64) -> (Generator, Discriminator) {
    let gen = Generator::new(GeneratorConfig::fixed_length(vocab, 4, 6), &mut seed_rng(seed));
    let disc =
        Discriminator::new(DiscriminatorConfig::tiny(vocab, 8, 6), &mut seed_rng(seed + 1000));
    (gen, disc)
}

fn sample_fixed_length(
    gen: &Generator,
    t_len: usize,
    rng: &mut SeedRng,
) -> GenRollout {
    gen.rollout(1, t_len, 1.0, rng).expect("rollout")
}

/// Run every enumeration check. `inject_fault` deliberately corrupts the
/// kernel normalization so the negative control can observe a failure.
pub fn run_suite_with_fault(seed: u64, inject_fault: bool) -> Vec<OracleReport> {
    let mut reports = Vec::new();
    let space = EnumerationSpace::new(4, 3).expect("within caps");
    let (gen, disc) = oracle_models(4, seed);
    let rewards = disc.reward(space.batch()).expect("rewards");

    // Policy normalization over the space.
    {
        let total: f64 = policy_probs(&gen, &space).iter().sum();
        reports.push(OracleReport::new(
            "policy-normalization",
            (total - 1.0).abs(),
            1e-9,
            ErrorKind::Abs,
            space.describe(),
        ));
    }

    // Kernel column normalization (the fault-injection target).
    {
        let mut kernel =
            hamming_kernel(&disc.w_embed, 0.5, &vec![true; 4]).expect("kernel");
        if inject_fault {
            for row in 0..4 {
                let val = kernel.k.at2(row, 1) * 1.01;
                kernel.k.set2(row, 1, val);
            }
        }
        let mut worst: f64 = 0.0;
        for col in 0..4 {
            let s: f64 = (0..4).map(|row| kernel.k.at2(row, col)).sum();
            worst = worst.max((s - 1.0).abs());
        }
        reports.push(OracleReport::new(
            "kernel-normalization",
            worst,
            1e-9,
            ErrorKind::Abs,
            "V=4".to_string(),
        ));
    }

    // REINFORCE unbiasedness: expectation equals the exact gradient.
    {
        let exact = exact_objective_gradient(&gen, &space, &rewards);
        let expect =
            estimator_expectation(&gen, &disc, &space, &OracleEstimator::Reinforce { baseline: 0.0 });
        reports.push(OracleReport::new(
            "reinforce-unbiasedness",
            max_abs_diff(&exact, &expect),
            1e-9,
            ErrorKind::Abs,
            space.describe(),
        ));
    }

    // Baseline invariance for REINFORCE and Taylor.
    for (name, make) in [
        (
            "baseline-invariance-reinforce",
            Box::new(|b: f64| OracleEstimator::Reinforce { baseline: b })
                as Box<dyn Fn(f64) -> OracleEstimator>,
        ),
        (
            "baseline-invariance-taylor",
            Box::new(|b: f64| OracleEstimator::Taylor { bandwidth: 0.5, baseline: b }),
        ),
    ] {
        let grads: Vec<Vec<f64>> = [0.0, -3.0, 7.0]
            .iter()
            .map(|&b| estimator_expectation(&gen, &disc, &space, &make(b)))
            .collect();
        let mut worst: f64 = 0.0;
        for pair in grads.windows(2) {
            worst = worst.max(max_abs_diff(&pair[0], &pair[1]));
        }
        worst = worst.max(max_abs_diff(&grads[0], &grads[2]));
        reports.push(OracleReport::new(name, worst, 1e-9, ErrorKind::Abs, space.describe()));
    }

    // Per-sample limit equivalences over 20 sampled sequences.
    {
        let kernel_small = hamming_kernel(&disc.w_embed, 1e-8, &vec![true; 4]).expect("kernel");
        let kernel_large = hamming_kernel(&disc.w_embed, 1e8, &vec![true; 4]).expect("kernel");
        let mut worst_rf: f64 = 0.0;
        let mut worst_st: f64 = 0.0;
        let mut worst_b: f64 = 0.0;
        let mut rng = seed_rng(seed + 7);
        for _ in 0..20 {
            let mut gr = sample_fixed_length(&gen, 3, &mut rng);
            let tokens = gr.rollout.tokens.clone();
            let bundle = disc.reward_with_embedding_grad(&tokens).expect("bundle");
            let tm = disc.taylor_matrix(&bundle, &tokens).expect("taylor matrix");
            let b = 0.3;
            let taylor_grad = |gr: &mut GenRollout,
                               kernel: &KernelMatrix,
                               baseline: f64|
             -> Vec<f64> {
                let adv = taylor_advantages(&gr.rollout, &tm, kernel, baseline)
                    .expect("advantages");
                let node = taylor_surrogate(gr, &adv).expect("surrogate");
                flat_gen_grads(gr, &gen, node)
            };
            let g_small = taylor_grad(&mut gr, &kernel_small, b);
            let mut gr2 = gen.teacher_forced(&tokens).expect("tf");
            let node_rf = reinforce_surrogate(&mut gr2, &bundle.rewards, b).expect("surrogate");
            let g_rf = flat_gen_grads(&gr2, &gen, node_rf);
            worst_rf = worst_rf.max(rel_l2_error(&g_small, &g_rf));

            let mut gr3 = gen.teacher_forced(&tokens).expect("tf");
            let g_large = taylor_grad(&mut gr3, &kernel_large, b);
            let mut gr4 = gen.teacher_forced(&tokens).expect("tf");
            let node_st =
                straight_through_surrogate(&mut gr4, &bundle, &disc.w_embed).expect("surrogate");
            let g_st = flat_gen_grads(&gr4, &gen, node_st);
            worst_st = worst_st.max(rel_l2_error(&g_large, &g_st));

            let mut gr5 = gen.teacher_forced(&tokens).expect("tf");
            let g_large_b = taylor_grad(&mut gr5, &kernel_large, b + 5.0);
            worst_b = worst_b.max(rel_l2_error(&g_large, &g_large_b));
        }
        reports.push(OracleReport::new(
            "taylor-limit-reinforce",
            worst_rf,
            1e-5,
            ErrorKind::Rel,
            "20 samples, V=4, T=3".to_string(),
        ));
        reports.push(OracleReport::new(
            "taylor-limit-straight-through",
            worst_st,
            1e-5,
            ErrorKind::Rel,
            "20 samples, V=4, T=3".to_string(),
        ));
        reports.push(OracleReport::new(
            "st-baseline-independence",
            worst_b,
            1e-9,
            ErrorKind::Rel,
            "20 samples, V=4, T=3".to_string(),
        ));
    }

    // Entropy-gradient identity on a separate tiny space.
    {
        let espace = EnumerationSpace::new(3, 2).expect("within caps");
        let (egen, edisc) = oracle_models(3, seed + 17);
        let lhs = estimator_expectation(&egen, &edisc, &espace, &OracleEstimator::GreedyEntropy);
        let rhs = expected_stepwise_entropy_gradient(&egen, &espace);
        reports.push(OracleReport::new(
            "entropy-gradient-identity",
            max_abs_diff(&lhs, &rhs),
            1e-9,
            ErrorKind::Abs,
            espace.describe(),
        ));
    }

    // Exact-Q substitution: the importance weighting marginalizes out and
    // the expectation equals the true objective gradient.
    {
        let exact = exact_objective_gradient(&gen, &space, &rewards);
        let q_est = estimator_expectation(
            &gen,
            &disc,
            &space,
            &OracleEstimator::TaylorExactQ { bandwidth: 0.5 },
        );
        reports.push(OracleReport::new(
            "q-substitution-unbiasedness",
            max_abs_diff(&exact, &q_est),
            1e-9,
            ErrorKind::Abs,
            space.describe(),
        ));
    }

    reports
}

pub fn run_suite(seed: u64) -> Vec<OracleReport> {
    run_suite_with_fault(seed, false)
}
