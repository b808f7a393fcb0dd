//! Autoregressive GRU policy over token sequences.
//!
//! One recurrent layer over tied token embeddings: the GRU output is
//! projected back to embedding dimension and multiplied by the transpose of
//! the embedding matrix to produce logits, so a single weight matrix serves
//! as both input embedding and output projection. The same model doubles as
//! the language model used for scoring.

use rand::Rng;
use thiserror::Error;

use crate::corpus::{Corpus, SequenceBatch};
use crate::graph::{Graph, GraphError, NodeId};
use crate::optim::Adam;
use crate::rng::SeedRng;
use crate::tensor::Tensor;
use crate::vocab::{EOS, PAD, SOS};

/// Additive logit penalty for hard-masked tokens. Large enough that the
/// tempered softmax underflows to exactly zero, small enough to stay finite
/// at every supported temperature.
const MASK_LOGIT: f64 = -1e30;

#[derive(Debug, Error)]
pub enum GeneratorError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("sequence contains token {0} with zero probability under the hard-masked policy")]
    ForbiddenToken(usize),
    #[error("empty corpus")]
    EmptyCorpus,
}

pub type Result<T> = std::result::Result<T, GeneratorError>;

#[derive(Clone, Debug)]
pub struct GeneratorConfig {
    pub vocab_size: usize,
    pub d_embed: usize,
    pub d_hidden: usize,
    /// Tokens excluded from every next-token distribution. Text models
    /// forbid PAD and SOS; enumeration-oracle toys forbid nothing.
    pub forbidden: Vec<usize>,
    /// Whether sampling an EOS token terminates the sequence. Disabled for
    /// fixed-length enumeration spaces, where every id is a plain symbol.
    pub eos_stops: bool,
}

impl GeneratorConfig {
    /// Configuration for a real text vocabulary: PAD and SOS can never be
    /// emitted, EOS is an ordinary generation decision.
    pub fn for_text(vocab_size: usize, d_embed: usize, d_hidden: usize) -> Self {
        GeneratorConfig {
            vocab_size,
            d_embed,
            d_hidden,
            forbidden: vec![PAD, SOS],
            eos_stops: true,
        }
    }

    /// Fully unmasked policy over `vocab_size` plain symbols; EOS still
    /// terminates sequences.
    pub fn unmasked(vocab_size: usize, d_embed: usize, d_hidden: usize) -> Self {
        GeneratorConfig {
            vocab_size,
            d_embed,
            d_hidden,
            forbidden: Vec::new(),
            eos_stops: true,
        }
    }

    /// Unmasked fixed-length policy: no token is special and rollouts always
    /// run the full horizon.
    pub fn fixed_length(vocab_size: usize, d_embed: usize, d_hidden: usize) -> Self {
        GeneratorConfig {
            vocab_size,
            d_embed,
            d_hidden,
            forbidden: Vec::new(),
            eos_stops: false,
        }
    }
}

/// Policy parameters. `w_embed` is shared between the input embedding and
/// the output projection.
pub struct Generator {
    pub cfg: GeneratorConfig,
    pub w_embed: Tensor, // (V, d_e)
    pub w_z: Tensor,     // (d_e, d_h)
    pub u_z: Tensor,     // (d_h, d_h)
    pub b_z: Tensor,     // (d_h,)
    pub w_r: Tensor,
    pub u_r: Tensor,
    pub b_r: Tensor,
    pub w_h: Tensor,
    pub u_h: Tensor,
    pub b_h: Tensor,
    pub w_proj: Tensor, // (d_h, d_e)
    pub b_proj: Tensor, // (d_e,)
}

impl Generator {
    pub fn new(cfg: GeneratorConfig, rng: &mut SeedRng) -> Self {
        let (v, de, dh) = (cfg.vocab_size, cfg.d_embed, cfg.d_hidden);
        let se = 1.0 / (de as f64).sqrt();
        let sh = 1.0 / (dh as f64).sqrt();
        Generator {
            cfg,
            w_embed: Tensor::randn(&[v, de], se, rng),
            w_z: Tensor::randn(&[de, dh], se, rng),
            u_z: Tensor::randn(&[dh, dh], sh, rng),
            b_z: Tensor::zeros(&[dh]),
            w_r: Tensor::randn(&[de, dh], se, rng),
            u_r: Tensor::randn(&[dh, dh], sh, rng),
            b_r: Tensor::zeros(&[dh]),
            w_h: Tensor::randn(&[de, dh], se, rng),
            u_h: Tensor::randn(&[dh, dh], sh, rng),
            b_h: Tensor::zeros(&[dh]),
            w_proj: Tensor::randn(&[dh, de], sh, rng),
            b_proj: Tensor::zeros(&[de]),
        }
    }

    /// All-zero weights: every next-token distribution is uniform over the
    /// allowed tokens. Useful as a known starting point in tests.
    pub fn zeroed(cfg: GeneratorConfig) -> Self {
        let (v, de, dh) = (cfg.vocab_size, cfg.d_embed, cfg.d_hidden);
        Generator {
            cfg,
            w_embed: Tensor::zeros(&[v, de]),
            w_z: Tensor::zeros(&[de, dh]),
            u_z: Tensor::zeros(&[dh, dh]),
            b_z: Tensor::zeros(&[dh]),
            w_r: Tensor::zeros(&[de, dh]),
            u_r: Tensor::zeros(&[dh, dh]),
            b_r: Tensor::zeros(&[dh]),
            w_h: Tensor::zeros(&[de, dh]),
            u_h: Tensor::zeros(&[dh, dh]),
            b_h: Tensor::zeros(&[dh]),
            w_proj: Tensor::zeros(&[dh, de]),
            b_proj: Tensor::zeros(&[de]),
        }
    }

    pub fn named_params(&self) -> Vec<(&'static str, &Tensor)> {
        vec![
            ("w_embed", &self.w_embed),
            ("gru.w_z", &self.w_z),
            ("gru.u_z", &self.u_z),
            ("gru.b_z", &self.b_z),
            ("gru.w_r", &self.w_r),
            ("gru.u_r", &self.u_r),
            ("gru.b_r", &self.b_r),
            ("gru.w_h", &self.w_h),
            ("gru.u_h", &self.u_h),
            ("gru.b_h", &self.b_h),
            ("w_proj", &self.w_proj),
            ("b_proj", &self.b_proj),
        ]
    }

    pub fn named_params_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        vec![
            ("w_embed", &mut self.w_embed),
            ("gru.w_z", &mut self.w_z),
            ("gru.u_z", &mut self.u_z),
            ("gru.b_z", &mut self.b_z),
            ("gru.w_r", &mut self.w_r),
            ("gru.u_r", &mut self.u_r),
            ("gru.b_r", &mut self.b_r),
            ("gru.w_h", &mut self.w_h),
            ("gru.u_h", &mut self.u_h),
            ("gru.b_h", &mut self.b_h),
            ("w_proj", &mut self.w_proj),
            ("b_proj", &mut self.b_proj),
        ]
    }

    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        self.named_params().iter().map(|(_, t)| t.shape().to_vec()).collect()
    }

    pub fn optimizer(&self, cfg: crate::optim::AdamConfig) -> Adam {
        Adam::new(cfg, &self.param_shapes())
    }

    /// Register parameters into a fresh graph for a batch of `n` rows.
    pub fn bind(&self, g: &mut Graph, n: usize) -> Result<GenBinding> {
        let w_embed = g.param(self.w_embed.clone());
        let w_embed_t = g.transpose(w_embed)?;
        let binding = GenBinding {
            w_embed,
            w_embed_t,
            w_z: g.param(self.w_z.clone()),
            u_z: g.param(self.u_z.clone()),
            b_z: g.param(self.b_z.clone()),
            w_r: g.param(self.w_r.clone()),
            u_r: g.param(self.u_r.clone()),
            b_r: g.param(self.b_r.clone()),
            w_h: g.param(self.w_h.clone()),
            u_h: g.param(self.u_h.clone()),
            b_h: g.param(self.b_h.clone()),
            w_proj: g.param(self.w_proj.clone()),
            b_proj: g.param(self.b_proj.clone()),
            mask: if self.cfg.forbidden.is_empty() {
                None
            } else {
                let mut m = Tensor::zeros(&[n, self.cfg.vocab_size]);
                for row in 0..n {
                    for &tok in &self.cfg.forbidden {
                        m.data_mut()[row * self.cfg.vocab_size + tok] = MASK_LOGIT;
                    }
                }
                Some(g.constant(m))
            },
            h0: g.constant(Tensor::zeros(&[n, self.cfg.d_hidden])),
        };
        Ok(binding)
    }

    /// Aligned parameter node ids, in `named_params` order.
    pub fn param_nodes(binding: &GenBinding) -> Vec<NodeId> {
        vec![
            binding.w_embed,
            binding.w_z,
            binding.u_z,
            binding.b_z,
            binding.w_r,
            binding.u_r,
            binding.b_r,
            binding.w_h,
            binding.u_h,
            binding.b_h,
            binding.w_proj,
            binding.b_proj,
        ]
    }

    /// One GRU step from a token-id input; returns (new hidden, masked logits).
    pub fn step_ids(
        &self,
        g: &mut Graph,
        b: &GenBinding,
        h: NodeId,
        ids: &[usize],
    ) -> Result<(NodeId, NodeId)> {
        let emb = g.gather_rows(b.w_embed, ids)?;
        self.step_from_emb(g, b, h, emb)
    }

    /// One GRU step from an embedding-space input (soft tokens).
    pub fn step_from_emb(
        &self,
        g: &mut Graph,
        b: &GenBinding,
        h: NodeId,
        emb: NodeId,
    ) -> Result<(NodeId, NodeId)> {
        let h_new = gru_cell(g, b, h, emb)?;
        let proj = g.matmul(h_new, b.w_proj)?;
        let proj = g.add_bias(proj, b.b_proj)?;
        let logits = g.matmul(proj, b.w_embed_t)?;
        let logits = match b.mask {
            Some(m) => g.add(logits, m)?,
            None => logits,
        };
        Ok((h_new, logits))
    }

    /// Sample a batch of sequences; the graph is kept so estimator
    /// surrogates can be built on the same forward pass.
    ///
    /// Sampling is conditioned on SOS at the first step and stops
    /// per-sequence at the first EOS; later steps feed PAD and are masked
    /// out of the recorded rollout.
    pub fn rollout(
        &self,
        n: usize,
        t_max: usize,
        temperature: f64,
        rng: &mut SeedRng,
    ) -> Result<GenRollout> {
        assert!(temperature > 0.0, "temperature must be positive");
        let v = self.cfg.vocab_size;
        let mut g = Graph::new();
        let binding = self.bind(&mut g, n)?;
        let mut h = binding.h0;
        let mut input: Vec<usize> = vec![SOS.min(v - 1); n];
        let mut alive = vec![true; n];
        let mut lengths = vec![t_max; n];
        let mut ids = vec![PAD; n * t_max];
        let mut steps = Vec::with_capacity(t_max);
        let mut dists = Tensor::zeros(&[n, t_max, v]);
        let mut log_dists = Tensor::zeros(&[n, t_max, v]);
        let mut logprobs = Tensor::zeros(&[n, t_max]);
        let mut entropies = Tensor::zeros(&[n, t_max]);
        for t in 0..t_max {
            let (h_new, logits) = self.step_ids(&mut g, &binding, h, &input)?;
            h = h_new;
            let log_dist = g.log_softmax_t(logits, temperature)?;
            let dist = g.exp(log_dist)?;
            steps.push(GenStep { log_dist, dist });
            let pd = g.value(dist).data();
            let ld = g.value(log_dist).data();
            for row in 0..n {
                if !alive[row] {
                    input[row] = PAD.min(v - 1);
                    continue;
                }
                let probs = &pd[row * v..(row + 1) * v];
                let tok = sample_categorical(probs, rng);
                ids[row * t_max + t] = tok;
                input[row] = tok;
                dists.data_mut()[(row * t_max + t) * v..(row * t_max + t + 1) * v]
                    .copy_from_slice(probs);
                log_dists.data_mut()[(row * t_max + t) * v..(row * t_max + t + 1) * v]
                    .copy_from_slice(&ld[row * v..(row + 1) * v]);
                logprobs.data_mut()[row * t_max + t] = ld[row * v + tok];
                entropies.data_mut()[row * t_max + t] = entropy_of(probs, &ld[row * v..(row + 1) * v]);
                if self.cfg.eos_stops && tok == EOS && v > EOS {
                    alive[row] = false;
                    lengths[row] = t + 1;
                }
            }
        }
        let tokens = SequenceBatch { ids, n, t_max, lengths };
        Ok(GenRollout {
            graph: g,
            binding,
            steps,
            rollout: PolicyRollout {
                tokens,
                step_dists: dists,
                step_log_dists: log_dists,
                step_logprobs: logprobs,
                step_entropies: entropies,
                temperature,
            },
        })
    }

    /// Run the policy over given sequences (teacher forcing) at temperature
    /// 1, recording the same per-step artifacts as `rollout`.
    pub fn teacher_forced(&self, batch: &SequenceBatch) -> Result<GenRollout> {
        let v = self.cfg.vocab_size;
        let (n, t_max) = (batch.n, batch.t_max);
        for row in 0..n {
            for t in 0..batch.lengths[row] {
                let tok = batch.token_at(row, t);
                if self.cfg.forbidden.contains(&tok) {
                    return Err(GeneratorError::ForbiddenToken(tok));
                }
            }
        }
        let mut g = Graph::new();
        let binding = self.bind(&mut g, n)?;
        let mut h = binding.h0;
        let mut input: Vec<usize> = vec![SOS.min(v - 1); n];
        let mut steps = Vec::with_capacity(t_max);
        let mut dists = Tensor::zeros(&[n, t_max, v]);
        let mut log_dists = Tensor::zeros(&[n, t_max, v]);
        let mut logprobs = Tensor::zeros(&[n, t_max]);
        let mut entropies = Tensor::zeros(&[n, t_max]);
        for t in 0..t_max {
            let (h_new, logits) = self.step_ids(&mut g, &binding, h, &input)?;
            h = h_new;
            let log_dist = g.log_softmax_t(logits, 1.0)?;
            let dist = g.exp(log_dist)?;
            steps.push(GenStep { log_dist, dist });
            let pd = g.value(dist).data();
            let ld = g.value(log_dist).data();
            for row in 0..n {
                if t >= batch.lengths[row] {
                    input[row] = PAD.min(v - 1);
                    continue;
                }
                let tok = batch.token_at(row, t);
                input[row] = tok;
                dists.data_mut()[(row * t_max + t) * v..(row * t_max + t + 1) * v]
                    .copy_from_slice(&pd[row * v..(row + 1) * v]);
                log_dists.data_mut()[(row * t_max + t) * v..(row * t_max + t + 1) * v]
                    .copy_from_slice(&ld[row * v..(row + 1) * v]);
                logprobs.data_mut()[row * t_max + t] = ld[row * v + tok];
                entropies.data_mut()[row * t_max + t] = entropy_of(
                    &pd[row * v..(row + 1) * v],
                    &ld[row * v..(row + 1) * v],
                );
            }
        }
        Ok(GenRollout {
            graph: g,
            binding,
            steps,
            rollout: PolicyRollout {
                tokens: batch.clone(),
                step_dists: dists,
                step_log_dists: log_dists,
                step_logprobs: logprobs,
                step_entropies: entropies,
                temperature: 1.0,
            },
        })
    }

    /// Per-sequence log probability, summed up to and including EOS.
    pub fn log_prob(&self, batch: &SequenceBatch) -> Result<Vec<f64>> {
        let fwd = self.teacher_forced(batch)?;
        Ok(fwd.rollout.sequence_logprobs())
    }

    /// exp(-sum log_prob / total tokens) over a corpus, EOS counted.
    pub fn perplexity(&self, corpus: &Corpus, t_max: usize, batch_size: usize) -> Result<f64> {
        if corpus.is_empty() {
            return Err(GeneratorError::EmptyCorpus);
        }
        let mut total_logp = 0.0;
        let mut total_tokens = 0usize;
        for chunk in corpus.sentences().chunks(batch_size) {
            let batch = SequenceBatch::from_sentences(chunk, t_max);
            let lp = self.log_prob(&batch)?;
            total_logp += lp.iter().sum::<f64>();
            total_tokens += batch.token_count();
        }
        Ok((-total_logp / total_tokens as f64).exp())
    }

    /// One Adam step on mean per-token negative log-likelihood.
    pub fn mle_step(&mut self, batch: &SequenceBatch, adam: &mut Adam, clip_norm: f64) -> Result<f64> {
        let fwd = self.teacher_forced(batch)?;
        let mut g = fwd.graph;
        let total_tokens = batch.token_count().max(1);
        let mut acc: Option<NodeId> = None;
        for (t, step) in fwd.steps.iter().enumerate() {
            let ids: Vec<usize> = (0..batch.n).map(|r| batch.token_at(r, t)).collect();
            let mask: Vec<f64> = (0..batch.n)
                .map(|r| if t < batch.lengths[r] { 1.0 } else { 0.0 })
                .collect();
            if mask.iter().all(|&m| m == 0.0) {
                continue;
            }
            let picked = g.select_per_row(step.log_dist, &ids)?;
            let m = g.constant(Tensor::new(vec![batch.n], mask));
            let masked = g.mul(picked, m)?;
            let s = g.sum(masked)?;
            acc = Some(match acc {
                Some(a) => g.add(a, s)?,
                None => s,
            });
        }
        let total = acc.expect("batch with no valid tokens");
        let loss = g.scale(total, -1.0 / total_tokens as f64)?;
        let loss_val = g.value(loss).item();
        let mut grads = g.backward(loss, &[])?;
        let nodes = Generator::param_nodes(&fwd.binding);
        let shapes = self.param_shapes();
        let grad_vec: Vec<Tensor> = nodes
            .iter()
            .zip(shapes.iter())
            .map(|(&id, s)| grads.take_or_zeros(id, s))
            .collect();
        let mut params: Vec<&mut Tensor> =
            self.named_params_mut().into_iter().map(|(_, t)| t).collect();
        adam.step(&mut params, &grad_vec, clip_norm);
        Ok(loss_val)
    }
}

/// Parameter node ids plus per-batch constants for one graph.
pub struct GenBinding {
    pub w_embed: NodeId,
    pub w_embed_t: NodeId,
    pub w_z: NodeId,
    pub u_z: NodeId,
    pub b_z: NodeId,
    pub w_r: NodeId,
    pub u_r: NodeId,
    pub b_r: NodeId,
    pub w_h: NodeId,
    pub u_h: NodeId,
    pub b_h: NodeId,
    pub w_proj: NodeId,
    pub b_proj: NodeId,
    pub mask: Option<NodeId>,
    pub h0: NodeId,
}

/// Graph nodes recorded for one generation step.
pub struct GenStep {
    /// (N, V) log next-token distribution at the rollout temperature.
    pub log_dist: NodeId,
    /// (N, V) next-token distribution, exp of the above.
    pub dist: NodeId,
}

/// A sampled (or teacher-forced) batch with its per-step distributions.
pub struct GenRollout {
    pub graph: Graph,
    pub binding: GenBinding,
    pub steps: Vec<GenStep>,
    pub rollout: PolicyRollout,
}

/// Plain-data view of a rollout: sampled tokens, per-step next-token
/// distributions, log-probabilities and entropies of the sampled tokens.
/// Entries at or past each sequence's length are zeroed.
#[derive(Clone, Debug)]
pub struct PolicyRollout {
    pub tokens: SequenceBatch,
    pub step_dists: Tensor,      // (N, T, V)
    pub step_log_dists: Tensor,  // (N, T, V)
    pub step_logprobs: Tensor,   // (N, T)
    pub step_entropies: Tensor,  // (N, T)
    pub temperature: f64,
}

impl PolicyRollout {
    /// Sum of step log-probs per sequence up to and including EOS.
    pub fn sequence_logprobs(&self) -> Vec<f64> {
        (0..self.tokens.n)
            .map(|row| {
                (0..self.tokens.lengths[row])
                    .map(|t| self.step_logprobs.at2(row, t))
                    .sum()
            })
            .collect()
    }
}

fn gru_cell(g: &mut Graph, b: &GenBinding, h: NodeId, emb: NodeId) -> crate::graph::Result<NodeId> {
    let zx = g.matmul(emb, b.w_z)?;
    let zh = g.matmul(h, b.u_z)?;
    let z_pre = g.add(zx, zh)?;
    let z_pre = g.add_bias(z_pre, b.b_z)?;
    let z = g.sigmoid(z_pre)?;

    let rx = g.matmul(emb, b.w_r)?;
    let rh = g.matmul(h, b.u_r)?;
    let r_pre = g.add(rx, rh)?;
    let r_pre = g.add_bias(r_pre, b.b_r)?;
    let r = g.sigmoid(r_pre)?;

    let cx = g.matmul(emb, b.w_h)?;
    let rh_gated = g.mul(r, h)?;
    let ch = g.matmul(rh_gated, b.u_h)?;
    let c_pre = g.add(cx, ch)?;
    let c_pre = g.add_bias(c_pre, b.b_h)?;
    let c = g.tanh(c_pre)?;

    // h' = (1 - z) * h + z * c
    let neg_z = g.scale(z, -1.0)?;
    let one_minus_z = g.add_scalar(neg_z, 1.0)?;
    let keep = g.mul(one_minus_z, h)?;
    let update = g.mul(z, c)?;
    g.add(keep, update)
}

fn entropy_of(probs: &[f64], log_probs: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (&p, &lp) in probs.iter().zip(log_probs.iter()) {
        if p > 0.0 {
            acc -= p * lp;
        }
    }
    acc.max(0.0)
}

fn sample_categorical(probs: &[f64], rng: &mut SeedRng) -> usize {
    let u: f64 = rng.gen();
    let mut cum = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        cum += p;
        if u < cum {
            return i;
        }
    }
    // Roundoff deficit: fall back to the most probable token.
    probs
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .map(|(i, _)| i)
        .unwrap()
}
