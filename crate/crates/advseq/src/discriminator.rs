//! Convolutional reward network over embedded token sequences.
//!
//! The reward R(x) is the discriminator's pre-sigmoid logit; the sigmoid
//! only appears inside the classification loss. Convolution and pooling
//! layers track per-sequence valid lengths so that padding never leaks into
//! features, and the embedding output can be tapped for its gradient, which
//! is the raw material of the Taylor reward matrix: the approximate reward
//! of every single-token substitution is an affine function of that tap.

use thiserror::Error;

use crate::corpus::SequenceBatch;
use crate::graph::{pooled_lengths, Graph, GraphError, NodeId};
use crate::optim::Adam;
use crate::rng::SeedRng;
use crate::spectral::PowerIterState;
use crate::tensor::{gemm, Tensor};

#[derive(Debug, Error)]
pub enum DiscError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("batch token id {id} out of range for vocabulary of size {size}")]
    TokenOutOfRange { id: usize, size: usize },
    #[error("taylor matrix requested without delta_e of matching shape")]
    BundleMismatch,
}

pub type Result<T> = std::result::Result<T, DiscError>;

#[derive(Clone, Debug)]
pub enum DiscLayer {
    Conv { kernel: usize, channels: usize },
    MeanPool2,
}

#[derive(Clone, Debug)]
pub struct DiscriminatorConfig {
    pub vocab_size: usize,
    pub d_embed: usize,
    pub layers: Vec<DiscLayer>,
    /// Hidden dense widths after global mean pooling; a final scalar layer
    /// is always appended.
    pub dense_hidden: Vec<usize>,
    pub lambda_sn: f64,
    pub lambda_e: f64,
    /// Embedding norm threshold M: rows with squared norm above M^2 pay an
    /// l2 penalty.
    pub embed_norm_threshold: f64,
}

impl DiscriminatorConfig {
    /// Full stack: Conv3/Conv4 at `c1`, halving mean pool, Conv3/Conv4 at
    /// `c2`, global mean pool, one hidden dense layer.
    pub fn standard(vocab_size: usize, d_embed: usize, c1: usize, c2: usize, dense: usize) -> Self {
        DiscriminatorConfig {
            vocab_size,
            d_embed,
            layers: vec![
                DiscLayer::Conv { kernel: 3, channels: c1 },
                DiscLayer::Conv { kernel: 4, channels: c1 },
                DiscLayer::MeanPool2,
                DiscLayer::Conv { kernel: 3, channels: c2 },
                DiscLayer::Conv { kernel: 4, channels: c2 },
            ],
            dense_hidden: vec![dense],
            lambda_sn: 0.07,
            lambda_e: 0.2,
            embed_norm_threshold: 1.0,
        }
    }

    /// One conv layer and the scalar head: small enough for finite
    /// differences, structurally faithful.
    pub fn tiny(vocab_size: usize, d_embed: usize, channels: usize) -> Self {
        DiscriminatorConfig {
            vocab_size,
            d_embed,
            layers: vec![DiscLayer::Conv { kernel: 3, channels }],
            dense_hidden: Vec::new(),
            lambda_sn: 0.07,
            lambda_e: 0.2,
            embed_norm_threshold: 1.0,
        }
    }

    /// No convolutions: the reward is an affine function of the embedding
    /// output, so first-order Taylor expansion is exact.
    pub fn linear(vocab_size: usize, d_embed: usize) -> Self {
        DiscriminatorConfig {
            vocab_size,
            d_embed,
            layers: Vec::new(),
            dense_hidden: Vec::new(),
            lambda_sn: 0.07,
            lambda_e: 0.2,
            embed_norm_threshold: 1.0,
        }
    }
}

/// Per-sequence rewards with the embedding-output gradient, and optionally
/// the |V| x T matrix of first-order substituted-token rewards.
#[derive(Clone, Debug)]
pub struct RewardBundle {
    pub rewards: Vec<f64>,
    /// (N, T, d_e); zero at and past each sequence's length.
    pub delta_e: Tensor,
    /// (N, V, T); filled by `Discriminator::taylor_matrix`.
    pub taylor: Option<Tensor>,
}

pub struct Discriminator {
    pub cfg: DiscriminatorConfig,
    pub w_embed: Tensor,
    conv_w: Vec<Tensor>, // (K, C_in, C_out)
    conv_b: Vec<Tensor>,
    dense_w: Vec<Tensor>, // (in, out); last has out = 1
    dense_b: Vec<Tensor>,
    /// Power-iteration state per regularized weight: conv kernels (viewed
    /// as (K*C_in) x C_out) followed by dense matrices.
    power: Vec<PowerIterState>,
}

pub struct DiscBinding {
    pub w_embed: NodeId,
    conv_w: Vec<NodeId>,
    conv_b: Vec<NodeId>,
    dense_w: Vec<NodeId>,
    dense_b: Vec<NodeId>,
}

/// Graph handles for one forward pass.
pub struct RewardNodes {
    /// (N, T, d_e) embedding output after length masking; tap target.
    pub embedding: NodeId,
    /// (N, 1) pre-sigmoid logits.
    pub logits: NodeId,
}

impl Discriminator {
    pub fn new(cfg: DiscriminatorConfig, rng: &mut SeedRng) -> Self {
        let mut conv_w = Vec::new();
        let mut conv_b = Vec::new();
        let mut c_in = cfg.d_embed;
        for layer in &cfg.layers {
            if let DiscLayer::Conv { kernel, channels } = layer {
                let std = 1.0 / ((kernel * c_in) as f64).sqrt();
                conv_w.push(Tensor::randn(&[*kernel, c_in, *channels], std, rng));
                conv_b.push(Tensor::zeros(&[*channels]));
                c_in = *channels;
            }
        }
        let mut dense_w = Vec::new();
        let mut dense_b = Vec::new();
        let mut d_in = c_in;
        for &h in &cfg.dense_hidden {
            dense_w.push(Tensor::randn(&[d_in, h], 1.0 / (d_in as f64).sqrt(), rng));
            dense_b.push(Tensor::zeros(&[h]));
            d_in = h;
        }
        dense_w.push(Tensor::randn(&[d_in, 1], 1.0 / (d_in as f64).sqrt(), rng));
        dense_b.push(Tensor::zeros(&[1]));

        let w_embed = Tensor::randn(&[cfg.vocab_size, cfg.d_embed], 1.0 / (cfg.d_embed as f64).sqrt(), rng);
        let mut power = Vec::new();
        for w in &conv_w {
            let s = w.shape();
            power.push(PowerIterState::new(s[0] * s[1], s[2], rng));
        }
        for w in &dense_w {
            let s = w.shape();
            power.push(PowerIterState::new(s[0], s[1], rng));
        }
        Discriminator { cfg, w_embed, conv_w, conv_b, dense_w, dense_b, power }
    }

    /// Zero all weights; rewards become identically zero.
    pub fn zero_weights(&mut self) {
        for (_, t) in self.named_params_mut() {
            for x in t.data_mut() {
                *x = 0.0;
            }
        }
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![("w_embed".to_string(), &self.w_embed)];
        for (i, (w, b)) in self.conv_w.iter().zip(self.conv_b.iter()).enumerate() {
            out.push((format!("conv{i}.w"), w));
            out.push((format!("conv{i}.b"), b));
        }
        for (i, (w, b)) in self.dense_w.iter().zip(self.dense_b.iter()).enumerate() {
            out.push((format!("dense{i}.w"), w));
            out.push((format!("dense{i}.b"), b));
        }
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> =
            vec![("w_embed".to_string(), &mut self.w_embed)];
        for (i, (w, b)) in self.conv_w.iter_mut().zip(self.conv_b.iter_mut()).enumerate() {
            out.push((format!("conv{i}.w"), w));
            out.push((format!("conv{i}.b"), b));
        }
        for (i, (w, b)) in self.dense_w.iter_mut().zip(self.dense_b.iter_mut()).enumerate() {
            out.push((format!("dense{i}.w"), w));
            out.push((format!("dense{i}.b"), b));
        }
        out
    }

    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        self.named_params().iter().map(|(_, t)| t.shape().to_vec()).collect()
    }

    pub fn optimizer(&self, cfg: crate::optim::AdamConfig) -> Adam {
        Adam::new(cfg, &self.param_shapes())
    }

    pub fn bind(&self, g: &mut Graph) -> DiscBinding {
        DiscBinding {
            w_embed: g.param(self.w_embed.clone()),
            conv_w: self.conv_w.iter().map(|t| g.param(t.clone())).collect(),
            conv_b: self.conv_b.iter().map(|t| g.param(t.clone())).collect(),
            dense_w: self.dense_w.iter().map(|t| g.param(t.clone())).collect(),
            dense_b: self.dense_b.iter().map(|t| g.param(t.clone())).collect(),
        }
    }

    /// Register all weights as constants: the forward pass is differentiable
    /// w.r.t. its embedding-space input but not w.r.t. the discriminator.
    pub fn bind_const(&self, g: &mut Graph) -> DiscBinding {
        DiscBinding {
            w_embed: g.constant(self.w_embed.clone()),
            conv_w: self.conv_w.iter().map(|t| g.constant(t.clone())).collect(),
            conv_b: self.conv_b.iter().map(|t| g.constant(t.clone())).collect(),
            dense_w: self.dense_w.iter().map(|t| g.constant(t.clone())).collect(),
            dense_b: self.dense_b.iter().map(|t| g.constant(t.clone())).collect(),
        }
    }

    /// Aligned parameter node ids, in `named_params` order.
    pub fn param_nodes(b: &DiscBinding) -> Vec<NodeId> {
        let mut out = vec![b.w_embed];
        for (w, bb) in b.conv_w.iter().zip(b.conv_b.iter()) {
            out.push(*w);
            out.push(*bb);
        }
        for (w, bb) in b.dense_w.iter().zip(b.dense_b.iter()) {
            out.push(*w);
            out.push(*bb);
        }
        out
    }

    fn check_batch(&self, batch: &SequenceBatch) -> Result<()> {
        for &id in &batch.ids {
            if id >= self.cfg.vocab_size {
                return Err(DiscError::TokenOutOfRange { id, size: self.cfg.vocab_size });
            }
        }
        Ok(())
    }

    /// Embed a token batch and run the reward body on it.
    pub fn forward_ids(
        &self,
        g: &mut Graph,
        b: &DiscBinding,
        batch: &SequenceBatch,
    ) -> Result<RewardNodes> {
        self.check_batch(batch)?;
        let flat = g.gather_rows(b.w_embed, &batch.ids)?;
        let emb = g.reshape(flat, &[batch.n, batch.t_max, self.cfg.d_embed])?;
        let masked = g.mask_time(emb, &batch.lengths)?;
        let logits = self.body(g, b, masked, &batch.lengths)?;
        // Tap the pre-mask node: its adjoint passes back through the mask,
        // so positions past the true length read exactly zero.
        Ok(RewardNodes { embedding: emb, logits })
    }

    /// Reward body from an embedding-space input (already length-masked).
    pub fn body(
        &self,
        g: &mut Graph,
        b: &DiscBinding,
        emb: NodeId,
        lengths: &[usize],
    ) -> Result<NodeId> {
        let mut x = emb;
        let mut lens = lengths.to_vec();
        let mut conv_idx = 0;
        for layer in &self.cfg.layers {
            match layer {
                DiscLayer::Conv { .. } => {
                    x = g.conv1d_same(x, b.conv_w[conv_idx], b.conv_b[conv_idx], &lens)?;
                    // ELU(0) = 0, so masked positions stay masked.
                    x = g.elu(x)?;
                    conv_idx += 1;
                }
                DiscLayer::MeanPool2 => {
                    x = g.mean_pool2(x, &lens)?;
                    lens = pooled_lengths(&lens);
                }
            }
        }
        let mut h = g.global_mean_pool(x, &lens)?;
        let n_dense = self.dense_w.len();
        for i in 0..n_dense {
            h = g.matmul(h, b.dense_w[i])?;
            h = g.add_bias(h, b.dense_b[i])?;
            if i + 1 < n_dense {
                h = g.elu(h)?;
            }
        }
        Ok(h)
    }

    /// Pre-sigmoid logit per sequence.
    pub fn reward(&self, batch: &SequenceBatch) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let b = self.bind(&mut g);
        let nodes = self.forward_ids(&mut g, &b, batch)?;
        Ok(g.value(nodes.logits).data().to_vec())
    }

    /// Rewards plus the gradient of each sequence's reward at the embedding
    /// output. Summing the per-sequence logits before the backward pass is
    /// sound because no feature crosses sequences, so row n of the tap holds
    /// exactly d reward_n / d E_n.
    pub fn reward_with_embedding_grad(&self, batch: &SequenceBatch) -> Result<RewardBundle> {
        let mut g = Graph::new();
        let b = self.bind(&mut g);
        let nodes = self.forward_ids(&mut g, &b, batch)?;
        let total = g.sum(nodes.logits)?;
        let mut grads = g.backward(total, &[nodes.embedding])?;
        let delta_e = grads
            .take(nodes.embedding)
            .expect("tap gradient present");
        Ok(RewardBundle {
            rewards: g.value(nodes.logits).data().to_vec(),
            delta_e,
            taylor: None,
        })
    }

    /// (N, V, T) matrix of first-order substituted-token rewards:
    /// entry (n, v, t) approximates the reward of sequence n with token t
    /// replaced by v. The row of the sampled token reproduces the true
    /// reward exactly; columns past the sequence length are zero.
    pub fn taylor_matrix(&self, bundle: &RewardBundle, batch: &SequenceBatch) -> Result<Tensor> {
        let (n, t_max, d_e) = (batch.n, batch.t_max, self.cfg.d_embed);
        let v = self.cfg.vocab_size;
        if bundle.delta_e.shape() != [n, t_max, d_e] {
            return Err(DiscError::BundleMismatch);
        }
        let mut out = Tensor::zeros(&[n, v, t_max]);
        let mut scores = vec![0.0; v * t_max];
        for row in 0..n {
            // scores[v, t] = e_v . delta_e[row, t, :]
            let de = &bundle.delta_e.data()[row * t_max * d_e..(row + 1) * t_max * d_e];
            gemm(&mut scores, self.w_embed.data(), false, de, true, v, d_e, t_max, 1.0, 0.0);
            let r = bundle.rewards[row];
            let len = batch.lengths[row];
            for t in 0..len {
                let anchor = scores[batch.token_at(row, t) * t_max + t];
                for tok in 0..v {
                    out.data_mut()[(row * v + tok) * t_max + t] =
                        r + scores[tok * t_max + t] - anchor;
                }
            }
        }
        Ok(out)
    }

    /// Regularization term: spectral penalty over all post-embedding weight
    /// matrices plus the hinge penalty on embedding row norms. Refines the
    /// persistent power-iteration state with `power_iters` rounds and
    /// returns the sigma estimates alongside the loss node.
    pub fn reg_loss_nodes(
        &mut self,
        g: &mut Graph,
        b: &DiscBinding,
        power_iters: usize,
    ) -> Result<(NodeId, Vec<f64>)> {
        let mut sigmas = Vec::new();
        let mut acc: Option<NodeId> = None;
        let weights: Vec<(NodeId, Vec<usize>)> = b
            .conv_w
            .iter()
            .map(|&wn| {
                let s = g.value(wn).shape().to_vec();
                (wn, vec![s[0] * s[1], s[2]])
            })
            .chain(b.dense_w.iter().map(|&wn| {
                let s = g.value(wn).shape().to_vec();
                (wn, s)
            }))
            .collect();
        for (i, (wn, mat_shape)) in weights.iter().enumerate() {
            let (rows, cols) = (mat_shape[0], mat_shape[1]);
            let sigma_val =
                self.power[i].update(g.value(*wn).data(), rows, cols, power_iters);
            sigmas.push(sigma_val);
            let flat = g.reshape(*wn, &[rows, cols])?;
            let sigma = g.spectral_norm(flat, &self.power[i].u, &self.power[i].v)?;
            let sq = g.mul(sigma, sigma)?;
            acc = Some(match acc {
                Some(a) => g.add(a, sq)?,
                None => sq,
            });
        }
        let spectral = g.scale(acc.expect("at least the scalar head"), self.cfg.lambda_sn / 2.0)?;

        let m2 = self.cfg.embed_norm_threshold * self.cfg.embed_norm_threshold;
        let sq = g.mul(b.w_embed, b.w_embed)?;
        let row_norms = g.row_sum(sq)?;
        let excess = g.add_scalar(row_norms, -m2)?;
        let hinge = g.relu(excess)?;
        let hinge_sum = g.sum(hinge)?;
        let embed_pen = g.scale(hinge_sum, self.cfg.lambda_e / (2.0 * self.cfg.vocab_size as f64))?;

        Ok((g.add(spectral, embed_pen)?, sigmas))
    }

    /// Current regularization value without touching the persistent state
    /// beyond the requested refinement.
    pub fn reg_loss(&mut self, power_iters: usize) -> Result<f64> {
        let mut g = Graph::new();
        let b = self.bind(&mut g);
        let (node, _) = self.reg_loss_nodes(&mut g, &b, power_iters)?;
        Ok(g.value(node).item())
    }

    /// Binary classification loss with regularizers:
    /// mean softplus(-r_real) + mean softplus(r_fake) + reg.
    pub fn d_loss_graph(
        &mut self,
        real: &SequenceBatch,
        fake: &SequenceBatch,
        power_iters: usize,
    ) -> Result<DLossGraph> {
        let mut g = Graph::new();
        let b = self.bind(&mut g);
        let real_nodes = self.forward_ids(&mut g, &b, real)?;
        let fake_nodes = self.forward_ids(&mut g, &b, fake)?;
        let neg_real = g.scale(real_nodes.logits, -1.0)?;
        let sp_real = g.softplus(neg_real)?;
        let real_term = g.mean(sp_real)?;
        let sp_fake = g.softplus(fake_nodes.logits)?;
        let fake_term = g.mean(sp_fake)?;
        let cls = g.add(real_term, fake_term)?;
        let (reg, sigmas) = self.reg_loss_nodes(&mut g, &b, power_iters)?;
        let loss = g.add(cls, reg)?;
        let cls_value = g.value(cls).item();
        let reg_value = g.value(reg).item();
        Ok(DLossGraph { graph: g, binding: b, loss, cls_value, reg_value, sigmas })
    }

    /// One Adam step on the discriminator loss; returns (classification
    /// part, regularization part, sigma estimates).
    pub fn d_step(
        &mut self,
        real: &SequenceBatch,
        fake: &SequenceBatch,
        adam: &mut Adam,
        clip_norm: f64,
        power_iters: usize,
    ) -> Result<(f64, f64, Vec<f64>, f64)> {
        let dl = self.d_loss_graph(real, fake, power_iters)?;
        let mut grads = dl.graph.backward(dl.loss, &[])?;
        let nodes = Discriminator::param_nodes(&dl.binding);
        let shapes = self.param_shapes();
        let grad_vec: Vec<Tensor> = nodes
            .iter()
            .zip(shapes.iter())
            .map(|(&id, s)| grads.take_or_zeros(id, s))
            .collect();
        let mut params: Vec<&mut Tensor> =
            self.named_params_mut().into_iter().map(|(_, t)| t).collect();
        let (_, post) = adam.step(&mut params, &grad_vec, clip_norm);
        Ok((dl.cls_value, dl.reg_value, dl.sigmas, post))
    }
}

pub struct DLossGraph {
    pub graph: Graph,
    pub binding: DiscBinding,
    pub loss: NodeId,
    pub cls_value: f64,
    pub reg_value: f64,
    pub sigmas: Vec<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{finite_diff_grad, max_rel_error};
    use crate::optim::AdamConfig;
    use crate::rng::seed_rng;

    fn batch(rows: &[&[usize]], t_max: usize) -> SequenceBatch {
        let sents: Vec<Vec<usize>> = rows.iter().map(|r| r.to_vec()).collect();
        SequenceBatch::from_sentences(&sents, t_max)
    }

    #[test]
    fn zero_weights_give_zero_reward() {
        let mut d = Discriminator::new(DiscriminatorConfig::tiny(6, 4, 5), &mut seed_rng(0));
        d.zero_weights();
        let r = d.reward(&batch(&[&[1, 2, 2], &[3, 2]], 5)).unwrap();
        assert!(r.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn reward_is_padding_invariant() {
        let d = Discriminator::new(DiscriminatorConfig::standard(8, 6, 4, 8, 8), &mut seed_rng(1));
        let short = batch(&[&[3, 4, 5, 2]], 4);
        let long = batch(&[&[3, 4, 5, 2]], 11);
        let r1 = d.reward(&short).unwrap();
        let r2 = d.reward(&long).unwrap();
        assert!((r1[0] - r2[0]).abs() < 1e-9, "{} vs {}", r1[0], r2[0]);
    }

    #[test]
    fn delta_e_is_padding_invariant_on_valid_positions() {
        let d = Discriminator::new(DiscriminatorConfig::standard(8, 6, 4, 8, 8), &mut seed_rng(1));
        let b1 = d.reward_with_embedding_grad(&batch(&[&[3, 4, 5, 2]], 4)).unwrap();
        let b2 = d.reward_with_embedding_grad(&batch(&[&[3, 4, 5, 2]], 11)).unwrap();
        for t in 0..4 {
            for j in 0..6 {
                assert!((b1.delta_e.at3(0, t, j) - b2.delta_e.at3(0, t, j)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn linear_network_delta_e_is_the_dense_weight() {
        // With no convolutions, reward = w . global_mean(E) + b, so
        // d reward / d E_t = w / len for every valid t, exactly.
        let d = Discriminator::new(DiscriminatorConfig::linear(6, 4), &mut seed_rng(2));
        let bundle = d.reward_with_embedding_grad(&batch(&[&[1, 3, 4]], 5)).unwrap();
        for t in 0..3 {
            for j in 0..4 {
                let expect = d.dense_w[0].at2(j, 0) / 3.0;
                assert!((bundle.delta_e.at3(0, t, j) - expect).abs() < 1e-12);
            }
        }
        // Positions past the length have zero gradient.
        for t in 3..5 {
            for j in 0..4 {
                assert_eq!(bundle.delta_e.at3(0, t, j), 0.0);
            }
        }
    }

    #[test]
    fn delta_e_matches_finite_differences() {
        let d = Discriminator::new(DiscriminatorConfig::tiny(6, 4, 5), &mut seed_rng(3));
        let bt = batch(&[&[1, 3, 4, 2], &[5, 2]], 5);
        let bundle = d.reward_with_embedding_grad(&bt).unwrap();
        // Perturb the embedding input directly and re-run the body.
        let reward_from_emb = |emb: &[f64]| -> f64 {
            let mut g = Graph::new();
            let bind = d.bind(&mut g);
            let e = g.constant(Tensor::new(vec![2, 5, 4], emb.to_vec()));
            let m = g.mask_time(e, &bt.lengths).unwrap();
            let out = d.body(&mut g, &bind, m, &bt.lengths).unwrap();
            g.value(out).data().iter().sum()
        };
        let mut base = vec![0.0; 2 * 5 * 4];
        for (i, &id) in bt.ids.iter().enumerate() {
            base[i * 4..(i + 1) * 4].copy_from_slice(
                &d.w_embed.data()[id * 4..(id + 1) * 4],
            );
        }
        // Zero padded positions like the forward pass does.
        for row in 0..2 {
            for t in bt.lengths[row]..5 {
                for j in 0..4 {
                    base[(row * 5 + t) * 4 + j] = 0.0;
                }
            }
        }
        let mut f = |v: &[f64]| reward_from_emb(v);
        let fd = finite_diff_grad(&mut f, &base, 1e-5);
        let err = max_rel_error(bundle.delta_e.data(), &fd, 1e-8);
        assert!(err < 1e-4, "max rel error {err}");
    }

    #[test]
    fn taylor_identity_row_reproduces_reward() {
        let d = Discriminator::new(DiscriminatorConfig::tiny(7, 4, 6), &mut seed_rng(4));
        let bt = batch(&[&[1, 3, 4, 2], &[5, 6, 2]], 5);
        let bundle = d.reward_with_embedding_grad(&bt).unwrap();
        let tm = d.taylor_matrix(&bundle, &bt).unwrap();
        for row in 0..2 {
            for t in 0..bt.lengths[row] {
                let tok = bt.token_at(row, t);
                assert!(
                    (tm.at3(row, tok, t) - bundle.rewards[row]).abs() < 1e-9,
                    "identity row mismatch"
                );
            }
            for t in bt.lengths[row]..5 {
                for v in 0..7 {
                    assert_eq!(tm.at3(row, v, t), 0.0);
                }
            }
        }
    }

    #[test]
    fn taylor_matrix_is_exact_on_a_linear_network() {
        let d = Discriminator::new(DiscriminatorConfig::linear(6, 4), &mut seed_rng(5));
        let bt = batch(&[&[1, 3, 4]], 3);
        let bundle = d.reward_with_embedding_grad(&bt).unwrap();
        let tm = d.taylor_matrix(&bundle, &bt).unwrap();
        for t in 0..3 {
            for v in 0..6 {
                let mut swapped = vec![1usize, 3, 4];
                swapped[t] = v;
                let direct = d.reward(&batch(&[&swapped], 3)).unwrap()[0];
                assert!(
                    (tm.at3(0, v, t) - direct).abs() < 1e-9,
                    "linear substitution mismatch at v={v} t={t}"
                );
            }
        }
    }

    #[test]
    fn taylor_remainder_shrinks_quadratically() {
        // Substitute token embeddings along the segment E(x) + s (E(y)-E(x))
        // for s = 1 and s = 1/2: a smooth reward's first-order remainder
        // scales as s^2, so the ratio sits near 4.
        let d = Discriminator::new(DiscriminatorConfig::tiny(10, 6, 8), &mut seed_rng(6));
        let bt = batch(&[&[1, 3, 4, 5, 2]], 5);
        let bundle = d.reward_with_embedding_grad(&bt).unwrap();
        let reward_from_emb = |emb: &[f64]| -> f64 {
            let mut g = Graph::new();
            let bind = d.bind(&mut g);
            let e = g.constant(Tensor::new(vec![1, 5, 6], emb.to_vec()));
            let m = g.mask_time(e, &bt.lengths).unwrap();
            let out = d.body(&mut g, &bind, m, &bt.lengths).unwrap();
            g.value(out).item()
        };
        let mut base = vec![0.0; 5 * 6];
        for (i, &id) in bt.ids.iter().enumerate() {
            base[i * 6..(i + 1) * 6].copy_from_slice(&d.w_embed.data()[id * 6..(id + 1) * 6]);
        }
        let mut sum_full = 0.0;
        let mut sum_half = 0.0;
        let mut count = 0;
        for t in 0..5 {
            for v in 0..10 {
                let old = bt.token_at(0, t);
                if v == old {
                    continue;
                }
                for &s in &[1.0, 0.5] {
                    let mut emb = base.clone();
                    for j in 0..6 {
                        let diff = d.w_embed.at2(v, j) - d.w_embed.at2(old, j);
                        emb[t * 6 + j] += s * diff;
                    }
                    let actual = reward_from_emb(&emb);
                    // First-order prediction at the interpolated point.
                    let mut pred = bundle.rewards[0];
                    for j in 0..6 {
                        let diff = d.w_embed.at2(v, j) - d.w_embed.at2(old, j);
                        pred += s * diff * bundle.delta_e.at3(0, t, j);
                    }
                    let rem = (actual - pred).abs();
                    if s == 1.0 {
                        sum_full += rem;
                    } else {
                        sum_half += rem;
                    }
                }
                count += 1;
            }
        }
        assert!(count > 0);
        let ratio = sum_full / sum_half;
        assert!(
            (3.0..=5.0).contains(&ratio),
            "remainder ratio {ratio} outside [3, 5]"
        );
    }

    #[test]
    fn d_loss_at_zero_logits_is_two_log_two() {
        let mut d = Discriminator::new(DiscriminatorConfig::tiny(6, 4, 5), &mut seed_rng(7));
        d.zero_weights();
        let real = batch(&[&[1, 2]], 3);
        let fake = batch(&[&[3, 4]], 3);
        let dl = d.d_loss_graph(&real, &fake, 1).unwrap();
        assert!((dl.cls_value - 2.0 * (2.0f64).ln()).abs() < 1e-12);
        assert_eq!(dl.reg_value, 0.0);
    }

    #[test]
    fn d_loss_saturates_when_separated() {
        // Force strongly separated logits through the final bias.
        let mut d = Discriminator::new(DiscriminatorConfig::linear(6, 4), &mut seed_rng(8));
        d.zero_weights();
        let last = d.dense_b.len() - 1;
        d.dense_b[last].data_mut()[0] = 20.0;
        let real = batch(&[&[1, 2]], 3);
        let fake = batch(&[&[3, 4]], 3);
        let dl = d.d_loss_graph(&real, &fake, 1).unwrap();
        // real logit +20 contributes ~0; fake logit +20 contributes ~20.
        assert!((dl.cls_value - 20.0).abs() < 1e-6);
        d.dense_b[last].data_mut()[0] = -20.0;
        let dl2 = d.d_loss_graph(&real, &fake, 1).unwrap();
        assert!((dl2.cls_value - 20.0).abs() < 1e-6);
    }

    #[test]
    fn d_loss_gradient_matches_finite_differences() {
        let cfg = DiscriminatorConfig::tiny(6, 3, 4);
        let d = Discriminator::new(cfg.clone(), &mut seed_rng(9));
        let real = batch(&[&[1, 3, 2], &[4, 2]], 4);
        let fake = batch(&[&[5, 2]], 4);
        let flat: Vec<f64> = d
            .named_params()
            .iter()
            .flat_map(|(_, t)| t.data().iter().copied())
            .collect();
        let shapes = d.param_shapes();
        let loss_of = |v: &[f64]| -> f64 {
            let mut d2 = Discriminator::new(cfg.clone(), &mut seed_rng(9));
            let mut off = 0;
            for (_, t) in d2.named_params_mut() {
                let n = t.numel();
                t.data_mut().copy_from_slice(&v[off..off + n]);
                off += n;
            }
            // Classification part only: sigma estimates drift with the
            // power-iteration state, so the regularizer is checked through
            // its own dedicated node gradients.
            let dl = d2.d_loss_graph(&real, &fake, 1).unwrap();
            dl.cls_value
        };
        // Gradient of the classification part alone, on a fresh graph.
        let d_ad = Discriminator::new(cfg.clone(), &mut seed_rng(9));
        let mut g2 = Graph::new();
        let b2 = d_ad.bind(&mut g2);
        let rn = d_ad.forward_ids(&mut g2, &b2, &real).unwrap();
        let fnodes = d_ad.forward_ids(&mut g2, &b2, &fake).unwrap();
        let neg = g2.scale(rn.logits, -1.0).unwrap();
        let sp_r = g2.softplus(neg).unwrap();
        let tr = g2.mean(sp_r).unwrap();
        let sp_f = g2.softplus(fnodes.logits).unwrap();
        let tf = g2.mean(sp_f).unwrap();
        let cls_node = g2.add(tr, tf).unwrap();
        let mut grads = g2.backward(cls_node, &[]).unwrap();
        let ad: Vec<f64> = Discriminator::param_nodes(&b2)
            .iter()
            .zip(shapes.iter())
            .flat_map(|(&id, s)| grads.take_or_zeros(id, s).data().to_vec())
            .collect();
        let mut f = |v: &[f64]| loss_of(v);
        let fd = finite_diff_grad(&mut f, &flat, 1e-5);
        let err = max_rel_error(&ad, &fd, 1e-8);
        assert!(err < 1e-4, "max rel error {err}");
    }

    #[test]
    fn reg_loss_hinge_inactive_inside_ball() {
        let mut d = Discriminator::new(DiscriminatorConfig::linear(6, 4), &mut seed_rng(10));
        d.zero_weights();
        // All embedding norms zero <= M: embedding term contributes nothing;
        // zero weights keep sigma at zero.
        assert_eq!(d.reg_loss(5).unwrap(), 0.0);
    }

    #[test]
    fn reg_loss_single_diag_weight() {
        // One dense 2x2 weight diag(2, 1) with lambda_sn = 0.07:
        // spectral term = 0.07/2 * sigma^2 = 0.035 * 4 = 0.14.
        let mut cfg = DiscriminatorConfig::linear(4, 2);
        cfg.lambda_sn = 0.07;
        cfg.lambda_e = 0.0;
        let mut d = Discriminator::new(cfg, &mut seed_rng(11));
        d.zero_weights();
        d.dense_w[0] = Tensor::new(vec![2, 1], vec![2.0, 0.0]);
        // dense (2,1) has sigma 2 as well; use it directly.
        let reg = d.reg_loss(100).unwrap();
        assert!((reg - 0.07 / 2.0 * 4.0).abs() < 1e-9, "reg {reg}");
    }

    #[test]
    fn embedding_hinge_gradient_zero_inside_ball() {
        let cfg = DiscriminatorConfig::tiny(6, 3, 4);
        let mut d = Discriminator::new(cfg, &mut seed_rng(12));
        // Shrink all embeddings strictly inside the unit ball.
        for x in d.w_embed.data_mut() {
            *x *= 0.1;
        }
        let mut g = Graph::new();
        let b = d.bind(&mut g);
        let (reg, _) = d.reg_loss_nodes(&mut g, &b, 1).unwrap();
        let mut grads = g.backward(reg, &[]).unwrap();
        let ge = grads.take(b.w_embed).unwrap();
        assert!(ge.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn defaults_match_training_settings() {
        let cfg = DiscriminatorConfig::standard(100, 8, 4, 8, 8);
        assert_eq!(cfg.lambda_sn, 0.07);
        assert_eq!(cfg.lambda_e, 0.2);
        assert_eq!(cfg.embed_norm_threshold, 1.0);
    }

    #[test]
    fn stronger_spectral_penalty_smooths_rewards_over_neighbors() {
        // Train three discriminators that differ only in lambda_sn on the
        // same fixed batches, then compare the mean |R(x) - R(y)| over
        // single-token substitutions. The trend must be monotone.
        let mut diffs = Vec::new();
        for &lambda in &[0.0, 0.5, 5.0] {
            let mut cfg = DiscriminatorConfig::tiny(12, 6, 8);
            cfg.lambda_sn = lambda;
            let mut d = Discriminator::new(cfg, &mut seed_rng(13));
            let mut adam = d.optimizer(AdamConfig { lr: 3e-3, ..AdamConfig::default() });
            let real = batch(&[&[3, 4, 5, 6, 2], &[7, 8, 9, 2]], 6);
            let fake = batch(&[&[10, 10, 11, 2], &[11, 3, 11, 10, 2]], 6);
            for _ in 0..150 {
                d.d_step(&real, &fake, &mut adam, 10.0, 1).unwrap();
            }
            let probe: Vec<usize> = vec![3, 8, 5, 10, 2];
            let base = d.reward(&batch(&[&probe], 6)).unwrap()[0];
            let mut total = 0.0;
            let mut count = 0;
            for t in 0..probe.len() {
                for v in 3..12 {
                    if v == probe[t] {
                        continue;
                    }
                    let mut swapped = probe.clone();
                    swapped[t] = v;
                    let r = d.reward(&batch(&[&swapped], 6)).unwrap()[0];
                    total += (r - base).abs();
                    count += 1;
                }
            }
            diffs.push(total / count as f64);
        }
        assert!(
            diffs[0] > diffs[1] && diffs[1] > diffs[2],
            "smoothness not monotone in lambda_sn: {diffs:?}"
        );
    }
}
