//! Transformer encoder with an MLM head, supporting per-layer hidden-state
//! capture and injection.
//!
//! The injection point is each layer's final output (post-residual,
//! post-layernorm), including the embedding layernorm output as "layer 0".
//! With that convention, injecting a sequence's own captured states is an
//! exact no-op, which the tests rely on.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math;
use crate::matrix::{
    gelu_matrix, layer_norm_rows, linear, log_softmax_rows, multi_head_attention, Matrix,
    Parameter,
};
use crate::rng::Rng;
use crate::tape::{Tape, Var};

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub hidden: usize,
    pub ff_dim: usize,
    pub vocab: usize,
    pub max_positions: usize,
    pub layernorm_eps: f64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers < 1
            || self.n_heads < 1
            || self.hidden < 1
            || self.ff_dim < 1
            || self.vocab < 1
            || self.max_positions < 1
        {
            return Err(Error::Config("all counts must be >= 1".into()));
        }
        if self.hidden % self.n_heads != 0 {
            return Err(Error::Config(alloc::format!(
                "hidden {} not divisible by n_heads {}",
                self.hidden, self.n_heads
            )));
        }
        if self.layernorm_eps <= 0.0 {
            return Err(Error::Config("layernorm_eps must be > 0".into()));
        }
        Ok(())
    }
}

/// Weights of one encoder layer.
#[derive(Debug, Clone)]
pub struct LayerWeights {
    pub wq: Parameter,
    pub bq: Parameter,
    pub wk: Parameter,
    pub bk: Parameter,
    pub wv: Parameter,
    pub bv: Parameter,
    pub wo: Parameter,
    pub bo: Parameter,
    pub ln1_gamma: Parameter,
    pub ln1_beta: Parameter,
    pub ffn_w1: Parameter,
    pub ffn_b1: Parameter,
    pub ffn_w2: Parameter,
    pub ffn_b2: Parameter,
    pub ln2_gamma: Parameter,
    pub ln2_beta: Parameter,
}

/// All learned tensors. The MLM decoder is tied to `token_embedding`; the
/// head is layernorm + tied decoder + output bias.
#[derive(Debug, Clone)]
pub struct WeightSet {
    pub token_embedding: Parameter,
    pub position_embedding: Parameter,
    pub emb_ln_gamma: Parameter,
    pub emb_ln_beta: Parameter,
    pub layers: Vec<LayerWeights>,
    pub mlm_ln_gamma: Parameter,
    pub mlm_ln_beta: Parameter,
    pub mlm_bias: Parameter,
}

impl WeightSet {
    /// Random init: normal(0, 0.02) weights, unit layernorm gains, zero biases.
    pub fn random(config: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let d = config.hidden;
        let normal = |rng: &mut Rng, rows: usize, cols: usize, name: &str| {
            let data = (0..rows * cols).map(|_| rng.normal() * 0.02).collect();
            Parameter::new(name, Matrix { rows, cols, data })
        };
        let ones = |rows: usize, cols: usize, name: &str| {
            Parameter::new(name, Matrix {
                rows,
                cols,
                data: alloc::vec![1.0; rows * cols],
            })
        };
        let zeros = |rows: usize, cols: usize, name: &str| {
            Parameter::new(name, Matrix::zeros(rows, cols))
        };
        let mut layers = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            let n = |s: &str| alloc::format!("layer{l}.{s}");
            layers.push(LayerWeights {
                wq: normal(rng, d, d, &n("attn.wq")),
                bq: zeros(1, d, &n("attn.bq")),
                wk: normal(rng, d, d, &n("attn.wk")),
                bk: zeros(1, d, &n("attn.bk")),
                wv: normal(rng, d, d, &n("attn.wv")),
                bv: zeros(1, d, &n("attn.bv")),
                wo: normal(rng, d, d, &n("attn.wo")),
                bo: zeros(1, d, &n("attn.bo")),
                ln1_gamma: ones(1, d, &n("ln1.gamma")),
                ln1_beta: zeros(1, d, &n("ln1.beta")),
                ffn_w1: normal(rng, config.ff_dim, d, &n("ffn.w1")),
                ffn_b1: zeros(1, config.ff_dim, &n("ffn.b1")),
                ffn_w2: normal(rng, d, config.ff_dim, &n("ffn.w2")),
                ffn_b2: zeros(1, d, &n("ffn.b2")),
                ln2_gamma: ones(1, d, &n("ln2.gamma")),
                ln2_beta: zeros(1, d, &n("ln2.beta")),
            });
        }
        Ok(WeightSet {
            token_embedding: normal(rng, config.vocab, d, "token_embedding"),
            position_embedding: normal(rng, config.max_positions, d, "position_embedding"),
            emb_ln_gamma: ones(1, d, "emb_ln.gamma"),
            emb_ln_beta: zeros(1, d, "emb_ln.beta"),
            layers,
            mlm_ln_gamma: ones(1, d, "mlm_ln.gamma"),
            mlm_ln_beta: zeros(1, d, "mlm_ln.beta"),
            mlm_bias: zeros(1, config.vocab, "mlm.bias"),
        })
    }

    pub fn params(&self) -> Vec<&Parameter> {
        let mut out = alloc::vec![
            &self.token_embedding,
            &self.position_embedding,
            &self.emb_ln_gamma,
            &self.emb_ln_beta,
        ];
        for l in &self.layers {
            out.extend([
                &l.wq, &l.bq, &l.wk, &l.bk, &l.wv, &l.bv, &l.wo, &l.bo,
                &l.ln1_gamma, &l.ln1_beta,
                &l.ffn_w1, &l.ffn_b1, &l.ffn_w2, &l.ffn_b2,
                &l.ln2_gamma, &l.ln2_beta,
            ]);
        }
        out.extend([&self.mlm_ln_gamma, &self.mlm_ln_beta, &self.mlm_bias]);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut out: Vec<&mut Parameter> = alloc::vec![
            &mut self.token_embedding,
            &mut self.position_embedding,
            &mut self.emb_ln_gamma,
            &mut self.emb_ln_beta,
        ];
        for l in &mut self.layers {
            out.push(&mut l.wq);
            out.push(&mut l.bq);
            out.push(&mut l.wk);
            out.push(&mut l.bk);
            out.push(&mut l.wv);
            out.push(&mut l.bv);
            out.push(&mut l.wo);
            out.push(&mut l.bo);
            out.push(&mut l.ln1_gamma);
            out.push(&mut l.ln1_beta);
            out.push(&mut l.ffn_w1);
            out.push(&mut l.ffn_b1);
            out.push(&mut l.ffn_w2);
            out.push(&mut l.ffn_b2);
            out.push(&mut l.ln2_gamma);
            out.push(&mut l.ln2_beta);
        }
        out.push(&mut self.mlm_ln_gamma);
        out.push(&mut self.mlm_ln_beta);
        out.push(&mut self.mlm_bias);
        out
    }
}

/// Per-layer hidden states of every position from one forward pass.
/// `states[0]` is the embedding-layer output; `states[l]` the output of
/// encoder layer `l`.
#[derive(Debug, Clone)]
pub struct CapturedStates {
    pub states: Vec<Matrix>,
}

impl CapturedStates {
    pub fn seq_len(&self) -> usize {
        self.states.first().map_or(0, |m| m.rows)
    }
}

/// MLM head output: logits and log-probabilities per position.
#[derive(Debug, Clone)]
pub struct MlmOutput {
    pub logits: Matrix,
    pub log_probs: Matrix,
}

impl MlmOutput {
    fn from_logits(logits: Matrix) -> Result<Self> {
        let log_probs = log_softmax_rows(&logits)?;
        Ok(MlmOutput { logits, log_probs })
    }

    /// log(1 - p) for the target class at `pos`, by exclusion log-sum-exp.
    /// Never computed as ln(1 - exp(log p)): near-certain predictions would
    /// cancel catastrophically.
    pub fn log_one_minus_p(&self, pos: usize, target: usize) -> Result<f64> {
        if pos >= self.logits.rows || target >= self.logits.cols {
            return Err(Error::Index(alloc::format!(
                "log_one_minus_p({pos}, {target}) out of range"
            )));
        }
        let row = self.logits.row(pos);
        let lse_all = math::log_sum_exp(row.iter().copied());
        let lse_rest = math::log_sum_exp(
            row.iter()
                .enumerate()
                .filter(|&(i, _)| i != target)
                .map(|(_, &v)| v),
        );
        Ok(lse_rest - lse_all)
    }
}

/// (log p, log(1-p)) pairs for the requested (position, target id) list.
pub fn target_log_probs(
    output: &MlmOutput,
    targets: &[(usize, usize)],
) -> Result<Vec<(f64, f64)>> {
    targets
        .iter()
        .map(|&(pos, id)| {
            if pos >= output.log_probs.rows || id >= output.log_probs.cols {
                return Err(Error::Index(alloc::format!(
                    "target ({pos}, {id}) out of range"
                )));
            }
            Ok((output.log_probs.get(pos, id), output.log_one_minus_p(pos, id)?))
        })
        .collect()
}

fn encoder_layer(x: &Matrix, lw: &LayerWeights, n_heads: usize, eps: f64) -> Result<Matrix> {
    let attn = multi_head_attention(
        x, &lw.wq, &lw.bq, &lw.wk, &lw.bk, &lw.wv, &lw.bv, &lw.wo, &lw.bo, n_heads,
    )?;
    let x1 = layer_norm_rows(&x.add(&attn)?, &lw.ln1_gamma.value, &lw.ln1_beta.value, eps)?;
    let h = gelu_matrix(&linear(&x1, &lw.ffn_w1, &lw.ffn_b1)?);
    let ffn = linear(&h, &lw.ffn_w2, &lw.ffn_b2)?;
    layer_norm_rows(&x1.add(&ffn)?, &lw.ln2_gamma.value, &lw.ln2_beta.value, eps)
}

fn mlm_head(x: &Matrix, w: &WeightSet, eps: f64) -> Result<Matrix> {
    let ln = layer_norm_rows(x, &w.mlm_ln_gamma.value, &w.mlm_ln_beta.value, eps)?;
    // decoder tied to the token embedding table
    let mut logits = ln.matmul_nt(&w.token_embedding.value)?;
    for r in 0..logits.rows {
        for c in 0..logits.cols {
            logits.data[r * logits.cols + c] += w.mlm_bias.value.data[c];
        }
    }
    Ok(logits)
}

fn embed(ids: &[usize], use_positions: bool, w: &WeightSet, config: &ModelConfig) -> Result<Matrix> {
    if ids.len() > config.max_positions {
        return Err(Error::SequenceTooLong { len: ids.len(), max: config.max_positions });
    }
    let d = config.hidden;
    let mut x = Matrix::zeros(ids.len(), d);
    for (pos, &id) in ids.iter().enumerate() {
        if id >= config.vocab {
            return Err(Error::InvalidId(id));
        }
        let tok = w.token_embedding.value.row(id);
        let row = x.row_mut(pos);
        row.copy_from_slice(tok);
        if use_positions {
            for (v, p) in row.iter_mut().zip(w.position_embedding.value.row(pos)) {
                *v += p;
            }
        }
    }
    layer_norm_rows(&x, &w.emb_ln_gamma.value, &w.emb_ln_beta.value, config.layernorm_eps)
}

/// Plain forward pass, recording per-layer captures.
pub fn forward_plain(
    ids: &[usize],
    use_positions: bool,
    weights: &WeightSet,
    config: &ModelConfig,
) -> Result<(MlmOutput, CapturedStates)> {
    let mut x = embed(ids, use_positions, weights, config)?;
    let mut states = Vec::with_capacity(config.n_layers + 1);
    states.push(x.clone());
    for lw in &weights.layers {
        x = encoder_layer(&x, lw, config.n_heads, config.layernorm_eps)?;
        states.push(x.clone());
    }
    let logits = mlm_head(&x, weights, config.layernorm_eps)?;
    Ok((MlmOutput::from_logits(logits)?, CapturedStates { states }))
}

/// Forward pass that overwrites the hidden state at `source_pos` with the
/// captured state at every layer boundary (embedding output included).
/// Positions are always enabled here.
pub fn forward_injected(
    masked_ids: &[usize],
    source_pos: usize,
    captured: &CapturedStates,
    weights: &WeightSet,
    config: &ModelConfig,
) -> Result<MlmOutput> {
    if captured.seq_len() != masked_ids.len() {
        return Err(Error::Injection(alloc::format!(
            "captured length {} != input length {}",
            captured.seq_len(),
            masked_ids.len()
        )));
    }
    if captured.states.len() != config.n_layers + 1 {
        return Err(Error::Injection(alloc::format!(
            "captured {} layers, model has {}",
            captured.states.len(),
            config.n_layers + 1
        )));
    }
    if source_pos >= masked_ids.len() {
        return Err(Error::Index(alloc::format!("source_pos {source_pos} out of range")));
    }
    let mut x = embed(masked_ids, true, weights, config)?;
    x.row_mut(source_pos).copy_from_slice(captured.states[0].row(source_pos));
    for (l, lw) in weights.layers.iter().enumerate() {
        x = encoder_layer(&x, lw, config.n_heads, config.layernorm_eps)?;
        x.row_mut(source_pos).copy_from_slice(captured.states[l + 1].row(source_pos));
    }
    let logits = mlm_head(&x, weights, config.layernorm_eps)?;
    MlmOutput::from_logits(logits)
}

/// Tape-recorded forward pass over the same architecture, for training.
/// Returns the logits node; parameter leaves are reported in the same order
/// as [`WeightSet::params`].
pub fn forward_tape(
    tape: &mut Tape,
    ids: &[usize],
    use_positions: bool,
    weights: &WeightSet,
    config: &ModelConfig,
) -> Result<(Var, Vec<Var>)> {
    if ids.len() > config.max_positions {
        return Err(Error::SequenceTooLong { len: ids.len(), max: config.max_positions });
    }
    let eps = config.layernorm_eps;
    let mut leaves = Vec::new();
    let mut leaf = |tape: &mut Tape, p: &Parameter| {
        let v = tape.leaf(p.value.clone());
        leaves.push(v);
        v
    };

    let tok_table = leaf(tape, &weights.token_embedding);
    let pos_table = leaf(tape, &weights.position_embedding);
    let emb_g = leaf(tape, &weights.emb_ln_gamma);
    let emb_b = leaf(tape, &weights.emb_ln_beta);

    let tok = tape.gather_rows(tok_table, ids)?;
    let emb = if use_positions {
        let positions: Vec<usize> = (0..ids.len()).collect();
        let pos = tape.gather_rows(pos_table, &positions)?;
        tape.add(tok, pos)?
    } else {
        tok
    };
    let mut x = tape.layer_norm_rows(emb, emb_g, emb_b, eps)?;

    let dh = config.hidden / config.n_heads;
    let scale = 1.0 / math::sqrt(dh as f64);
    for lw in &weights.layers {
        let wq = leaf(tape, &lw.wq);
        let bq = leaf(tape, &lw.bq);
        let wk = leaf(tape, &lw.wk);
        let bk = leaf(tape, &lw.bk);
        let wv = leaf(tape, &lw.wv);
        let bv = leaf(tape, &lw.bv);
        let wo = leaf(tape, &lw.wo);
        let bo = leaf(tape, &lw.bo);
        let ln1_g = leaf(tape, &lw.ln1_gamma);
        let ln1_b = leaf(tape, &lw.ln1_beta);
        let w1 = leaf(tape, &lw.ffn_w1);
        let b1 = leaf(tape, &lw.ffn_b1);
        let w2 = leaf(tape, &lw.ffn_w2);
        let b2 = leaf(tape, &lw.ffn_b2);
        let ln2_g = leaf(tape, &lw.ln2_gamma);
        let ln2_b = leaf(tape, &lw.ln2_beta);

        let q = tape.linear(x, wq, bq)?;
        let k = tape.linear(x, wk, bk)?;
        let v = tape.linear(x, wv, bv)?;
        let mut heads = Vec::with_capacity(config.n_heads);
        for h in 0..config.n_heads {
            let qh = tape.slice_cols(q, h * dh, dh);
            let kh = tape.slice_cols(k, h * dh, dh);
            let vh = tape.slice_cols(v, h * dh, dh);
            let scores = tape.matmul_nt(qh, kh)?;
            let scaled = tape.scale(scores, scale);
            let attn = tape.softmax_rows(scaled)?;
            heads.push(tape.matmul(attn, vh)?);
        }
        let concat = tape.concat_cols(&heads)?;
        let attn_out = tape.linear(concat, wo, bo)?;
        let res1 = tape.add(x, attn_out)?;
        let x1 = tape.layer_norm_rows(res1, ln1_g, ln1_b, eps)?;
        let h1 = tape.linear(x1, w1, b1)?;
        let h1g = tape.gelu(h1);
        let ffn = tape.linear(h1g, w2, b2)?;
        let res2 = tape.add(x1, ffn)?;
        x = tape.layer_norm_rows(res2, ln2_g, ln2_b, eps)?;
    }

    let mlm_g = leaf(tape, &weights.mlm_ln_gamma);
    let mlm_b = leaf(tape, &weights.mlm_ln_beta);
    let mlm_bias = leaf(tape, &weights.mlm_bias);
    let ln = tape.layer_norm_rows(x, mlm_g, mlm_b, eps)?;
    let dec = tape.matmul_nt(ln, tok_table)?;
    let logits = tape.add_bias_row(dec, mlm_bias)?;
    Ok((logits, leaves))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::MASK;

    fn small_config() -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            n_heads: 2,
            hidden: 8,
            ff_dim: 16,
            vocab: 11,
            max_positions: 12,
            layernorm_eps: 1e-12,
        }
    }

    fn small_model() -> (ModelConfig, WeightSet) {
        let config = small_config();
        let mut rng = Rng::from_seed(42);
        let weights = WeightSet::random(&config, &mut rng).unwrap();
        (config, weights)
    }

    #[test]
    fn probability_rows_sum_to_one() {
        let (config, weights) = small_model();
        let ids = [2, 5, 6, 7, 3];
        let (out, _) = forward_plain(&ids, true, &weights, &config).unwrap();
        for r in 0..out.log_probs.rows {
            let sum: f64 = out.log_probs.row(r).iter().map(|&lp| math::exp(lp)).sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn all_mask_no_positions_rows_identical() {
        let (config, weights) = small_model();
        let ids = [MASK; 5];
        let (out, _) = forward_plain(&ids, false, &weights, &config).unwrap();
        for r in 1..5 {
            for c in 0..config.vocab {
                assert!(
                    (out.log_probs.get(r, c) - out.log_probs.get(0, c)).abs() < 1e-9
                );
            }
        }
    }

    #[test]
    fn all_mask_no_positions_invariant_across_lengths() {
        let (config, weights) = small_model();
        let (short, _) = forward_plain(&[MASK; 3], false, &weights, &config).unwrap();
        let (long, _) = forward_plain(&[MASK; 7], false, &weights, &config).unwrap();
        let (single, _) = forward_plain(&[MASK], false, &weights, &config).unwrap();
        for c in 0..config.vocab {
            assert!((short.log_probs.get(0, c) - long.log_probs.get(0, c)).abs() < 1e-9);
            assert!((short.log_probs.get(0, c) - single.log_probs.get(0, c)).abs() < 1e-9);
        }
    }

    #[test]
    fn injection_of_own_captures_is_noop() {
        let (config, weights) = small_model();
        let ids = [2, 5, 6, 7, 8, 3];
        let (plain, captured) = forward_plain(&ids, true, &weights, &config).unwrap();
        for source in 0..ids.len() {
            let injected = forward_injected(&ids, source, &captured, &weights, &config).unwrap();
            for (a, b) in injected.logits.data.iter().zip(&plain.logits.data) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn injection_length_mismatch_rejected() {
        let (config, weights) = small_model();
        let (_, captured) = forward_plain(&[2, 5, 3], true, &weights, &config).unwrap();
        let r = forward_injected(&[MASK; 5], 1, &captured, &weights, &config);
        assert!(matches!(r, Err(Error::Injection(_))));
    }

    #[test]
    fn source_pos_out_of_range_rejected() {
        let (config, weights) = small_model();
        let (_, captured) = forward_plain(&[2, 5, 3], true, &weights, &config).unwrap();
        let r = forward_injected(&[2, 5, 3], 7, &captured, &weights, &config);
        assert!(matches!(r, Err(Error::Index(_))));
    }

    #[test]
    fn sequence_too_long_rejected() {
        let (config, weights) = small_model();
        let ids = alloc::vec![MASK; config.max_positions + 1];
        assert!(matches!(
            forward_plain(&ids, true, &weights, &config),
            Err(Error::SequenceTooLong { .. })
        ));
    }

    #[test]
    fn target_log_probs_uniform_logits() {
        let logits = Matrix::zeros(1, 4);
        let out = MlmOutput::from_logits(logits).unwrap();
        let got = target_log_probs(&out, &[(0, 2)]).unwrap();
        assert!((got[0].0 - 0.25_f64.ln()).abs() < 1e-12);
        assert!((got[0].1 - 0.75_f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn target_log_probs_dominant_logit_no_overflow() {
        let v = 6;
        let mut logits = Matrix::zeros(1, v);
        logits.data[0] = 50.0;
        let out = MlmOutput::from_logits(logits).unwrap();
        let (lp, l1mp) = target_log_probs(&out, &[(0, 0)]).unwrap()[0];
        assert!(l1mp.is_finite());
        // closed form: log(1-p) = LSE(rest) - LSE(all) = ln(V-1) - LSE(all)
        let lse_all = math::log_sum_exp([50.0, 0.0, 0.0, 0.0, 0.0, 0.0].iter().copied());
        assert!((l1mp - ((v - 1) as f64).ln() + lse_all).abs() < 1e-12);
        assert!(lp <= 0.0 && lp > -1e-12);
    }

    #[test]
    fn complement_identity_random_logits() {
        let mut rng = Rng::from_seed(9);
        for _ in 0..50 {
            let data: Vec<f64> = (0..8).map(|_| rng.normal() * 5.0).collect();
            let out = MlmOutput::from_logits(Matrix::from_vec(1, 8, data).unwrap()).unwrap();
            for t in 0..8 {
                let (lp, l1mp) = target_log_probs(&out, &[(0, t)]).unwrap()[0];
                assert!((math::exp(lp) + math::exp(l1mp) - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn tape_forward_matches_plain_forward() {
        let (config, weights) = small_model();
        let ids = [2, 5, 6, 7, 3];
        let (plain, _) = forward_plain(&ids, true, &weights, &config).unwrap();
        let mut tape = Tape::new();
        let (logits, _) = forward_tape(&mut tape, &ids, true, &weights, &config).unwrap();
        for (a, b) in tape.value(logits).data.iter().zip(&plain.logits.data) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn tied_decoder_shares_embedding_rows() {
        // Perturb one token-embedding row: its output logit column must move.
        let (config, mut weights) = small_model();
        let ids = [2, 5, 6, 3];
        let (before, _) = forward_plain(&ids, true, &weights, &config).unwrap();
        // A token not present in the input; perturb one component only (a
        // uniform shift is invisible to the zero-mean layernormed states).
        let row = 9;
        weights.token_embedding.value.row_mut(row)[0] += 0.5;
        let (after, _) = forward_plain(&ids, true, &weights, &config).unwrap();
        let moved = (0..ids.len())
            .any(|p| (after.logits.get(p, row) - before.logits.get(p, row)).abs() > 1e-9);
        assert!(moved);
    }
}
