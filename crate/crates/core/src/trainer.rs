//! Desk-scale MLM training: 80/10/10 masking, plain Adam, one thread.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math;
use crate::matrix::Matrix;
use crate::model::{forward_tape, ModelConfig, WeightSet};
use crate::rng::Rng;
use crate::tape::Tape;
use crate::tokenizer::{TokenizedSentence, MASK};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub mask_rate: f64,
    pub mask_frac: f64,
    pub keep_frac: f64,
    pub random_frac: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mask_rate: 0.15,
            mask_frac: 0.8,
            keep_frac: 0.1,
            random_frac: 0.1,
            steps: 2000,
            batch_size: 16,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.mask_rate > 0.0 && self.mask_rate < 1.0) {
            return Err(Error::Config("mask_rate must be in (0,1)".into()));
        }
        let sum = self.mask_frac + self.keep_frac + self.random_frac;
        if (sum - 1.0).abs() > 1e-12 {
            return Err(Error::Config("mask/keep/random fractions must sum to 1".into()));
        }
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::Config("steps and batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// One masked training example.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedExample {
    pub input_ids: Vec<usize>,
    /// (position, original token id) at every loss position.
    pub targets: Vec<(usize, usize)>,
}

/// Apply the MLM corruption recipe to each sentence. Sentences without
/// content positions are skipped. Of the selected positions, `mask_frac`
/// become [MASK], `random_frac` a random vocab token, the rest stay.
pub fn make_mlm_batch(
    sentences: &[&TokenizedSentence],
    vocab_size: usize,
    config: &TrainConfig,
    rng: &mut Rng,
) -> Vec<MaskedExample> {
    let mut out = Vec::new();
    for s in sentences {
        let content = s.content_positions();
        if content.is_empty() {
            continue;
        }
        let mut input_ids = s.ids.clone();
        let mut targets = Vec::new();
        for pos in content {
            if rng.f64() >= config.mask_rate {
                continue;
            }
            targets.push((pos, s.ids[pos]));
            let r = rng.f64();
            if r < config.mask_frac {
                input_ids[pos] = MASK;
            } else if r < config.mask_frac + config.random_frac {
                input_ids[pos] = rng.index(vocab_size);
            }
            // otherwise the token is kept unchanged
        }
        out.push(MaskedExample { input_ids, targets });
    }
    out
}

struct AdamState {
    m: Vec<Matrix>,
    v: Vec<Matrix>,
    t: usize,
}

impl AdamState {
    fn new(weights: &WeightSet) -> Self {
        let shapes: Vec<(usize, usize)> = weights
            .params()
            .iter()
            .map(|p| (p.value.rows, p.value.cols))
            .collect();
        AdamState {
            m: shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect(),
            v: shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect(),
            t: 0,
        }
    }

    fn step(&mut self, weights: &mut WeightSet, config: &TrainConfig) {
        self.t += 1;
        let bc1 = 1.0 - libm::pow(config.beta1, self.t as f64);
        let bc2 = 1.0 - libm::pow(config.beta2, self.t as f64);
        for (i, p) in weights.params_mut().into_iter().enumerate() {
            for j in 0..p.value.data.len() {
                let g = p.gradient.data[j];
                let m = &mut self.m[i].data[j];
                let v = &mut self.v[i].data[j];
                *m = config.beta1 * *m + (1.0 - config.beta1) * g;
                *v = config.beta2 * *v + (1.0 - config.beta2) * g * g;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                p.value.data[j] -=
                    config.learning_rate * mhat / (math::sqrt(vhat) + config.adam_eps);
            }
        }
    }
}

/// Mean masked cross-entropy of `example` and its parameter gradients,
/// accumulated into `weights` with the given scale.
fn accumulate_example(
    weights: &mut WeightSet,
    model_config: &ModelConfig,
    example: &MaskedExample,
    scale: f64,
) -> Result<f64> {
    let mut tape = Tape::new();
    let snapshot = weights.clone();
    let (logits, leaves) = forward_tape(
        &mut tape,
        &example.input_ids,
        true,
        &snapshot,
        model_config,
    )?;
    let loss = tape.cross_entropy(logits, &example.targets)?;
    let loss_value = tape.value(loss).data[0];
    tape.backward(loss)?;
    for (param, leaf) in weights.params_mut().into_iter().zip(leaves) {
        let g = tape.grad(leaf)?;
        for (dst, src) in param.gradient.data.iter_mut().zip(&g.data) {
            *dst += src * scale;
        }
    }
    Ok(loss_value)
}

/// Train in place; returns the per-step loss trace. Single-threaded and
/// bit-deterministic for a fixed seed.
pub fn train(
    weights: &mut WeightSet,
    model_config: &ModelConfig,
    corpus: &[TokenizedSentence],
    config: &TrainConfig,
) -> Result<Vec<f64>> {
    config.validate()?;
    if corpus.is_empty() {
        return Err(Error::Config("empty training corpus".into()));
    }
    let mut rng = Rng::from_seed(config.seed);
    let mut adam = AdamState::new(weights);
    let mut trace = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let batch: Vec<&TokenizedSentence> = (0..config.batch_size)
            .map(|_| &corpus[rng.index(corpus.len())])
            .collect();
        let examples: Vec<MaskedExample> =
            make_mlm_batch(&batch, model_config.vocab, config, &mut rng)
                .into_iter()
                .filter(|e| !e.targets.is_empty())
                .collect();
        if examples.is_empty() {
            // every sampled sentence escaped masking; keep the trace aligned
            trace.push(trace.last().copied().unwrap_or(f64::NAN));
            continue;
        }
        for p in weights.params_mut() {
            p.zero_grad();
        }
        let scale = 1.0 / examples.len() as f64;
        let mut loss = 0.0;
        for ex in &examples {
            loss += accumulate_example(weights, model_config, ex, scale)?;
        }
        loss *= scale;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        if config.learning_rate != 0.0 {
            adam.step(weights, config);
        }
        trace.push(loss);
    }
    Ok(trace)
}

/// Mean masked cross-entropy over fixed examples, no gradients. Used to
/// evaluate convergence independently of the sampled training batches.
pub fn evaluate_loss(
    weights: &WeightSet,
    model_config: &ModelConfig,
    examples: &[MaskedExample],
) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for ex in examples {
        if ex.targets.is_empty() {
            continue;
        }
        let (out, _) = crate::model::forward_plain(&ex.input_ids, true, weights, model_config)?;
        for &(pos, id) in &ex.targets {
            total -= out.log_probs.get(pos, id);
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::Domain("no loss positions".into()));
    }
    Ok(total / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::{tokenize, Vocab, RESERVED};
    use alloc::string::ToString;

    fn vocab() -> Vocab {
        let mut tokens: Vec<_> = RESERVED.iter().map(|s| s.to_string()).collect();
        for t in ["the", "cat", "dog", "chased", "saw", "a"] {
            tokens.push(t.to_string());
        }
        Vocab::new(tokens).unwrap()
    }

    fn sentences(v: &Vocab) -> Vec<TokenizedSentence> {
        [
            alloc::vec!["the", "cat", "chased", "a", "dog"],
            alloc::vec!["a", "dog", "saw", "the", "cat"],
            alloc::vec!["the", "dog", "chased", "the", "cat"],
            alloc::vec!["a", "cat", "saw", "a", "dog"],
        ]
        .iter()
        .map(|w| tokenize(&w.iter().map(|s| *s).collect::<Vec<_>>(), v))
        .collect()
    }

    fn tiny_model() -> (ModelConfig, WeightSet) {
        let config = ModelConfig {
            n_layers: 1,
            n_heads: 2,
            hidden: 8,
            ff_dim: 16,
            vocab: 11,
            max_positions: 10,
            layernorm_eps: 1e-12,
        };
        let mut rng = Rng::from_seed(1);
        let w = WeightSet::random(&config, &mut rng).unwrap();
        (config, w)
    }

    #[test]
    fn mask_rate_zero_yields_no_loss_positions() {
        let v = vocab();
        let ss = sentences(&v);
        let refs: Vec<&TokenizedSentence> = ss.iter().collect();
        let cfg = TrainConfig { mask_rate: 0.0, ..Default::default() };
        let mut rng = Rng::from_seed(0);
        let batch = make_mlm_batch(&refs, v.len(), &cfg, &mut rng);
        assert!(batch.iter().all(|e| e.targets.is_empty()));
    }

    #[test]
    fn fixed_seed_gives_identical_batches() {
        let v = vocab();
        let ss = sentences(&v);
        let refs: Vec<&TokenizedSentence> = ss.iter().collect();
        let cfg = TrainConfig::default();
        let a = make_mlm_batch(&refs, v.len(), &cfg, &mut Rng::from_seed(5));
        let b = make_mlm_batch(&refs, v.len(), &cfg, &mut Rng::from_seed(5));
        assert_eq!(a, b);
    }

    #[test]
    fn selected_fraction_concentrates_at_mask_rate() {
        let v = vocab();
        let ss = sentences(&v);
        let refs: Vec<&TokenizedSentence> = ss.iter().collect();
        let cfg = TrainConfig::default();
        let mut rng = Rng::from_seed(11);
        let mut selected = 0usize;
        let mut total = 0usize;
        // 4 sentences x 5 content positions per pass; run past 1e5 positions
        for _ in 0..6000 {
            let batch = make_mlm_batch(&refs, v.len(), &cfg, &mut rng);
            for e in &batch {
                selected += e.targets.len();
            }
            total += refs.iter().map(|s| s.content_positions().len()).sum::<usize>();
        }
        assert!(total > 100_000);
        let frac = selected as f64 / total as f64;
        assert!((frac - cfg.mask_rate).abs() < 0.01, "frac={frac}");
    }

    #[test]
    fn zero_learning_rate_keeps_weights_and_loss_constant() {
        let (config, mut w) = tiny_model();
        let before = w.token_embedding.value.clone();
        let v = vocab();
        let ss = sentences(&v);
        let tc = TrainConfig {
            steps: 5,
            batch_size: 4,
            learning_rate: 0.0,
            seed: 3,
            ..Default::default()
        };
        let trace = train(&mut w, &config, &ss, &tc).unwrap();
        assert_eq!(w.token_embedding.value, before);
        assert_eq!(trace.len(), 5);
    }

    #[test]
    fn same_seed_trains_to_bitwise_identical_weights() {
        let (config, w0) = tiny_model();
        let v = vocab();
        let ss = sentences(&v);
        let tc = TrainConfig { steps: 10, batch_size: 4, seed: 7, ..Default::default() };
        let mut a = w0.clone();
        let mut b = w0.clone();
        let ta = train(&mut a, &config, &ss, &tc).unwrap();
        let tb = train(&mut b, &config, &ss, &tc).unwrap();
        assert_eq!(ta, tb);
        for (pa, pb) in a.params().iter().zip(b.params().iter()) {
            assert_eq!(pa.value.data, pb.value.data);
        }
    }

    #[test]
    fn training_reduces_loss() {
        let (config, mut w) = tiny_model();
        let v = vocab();
        let ss = sentences(&v);
        let tc = TrainConfig { steps: 200, batch_size: 4, seed: 2, ..Default::default() };
        let trace = train(&mut w, &config, &ss, &tc).unwrap();
        let head: f64 = trace[..20].iter().sum::<f64>() / 20.0;
        let tail: f64 = trace[trace.len() - 20..].iter().sum::<f64>() / 20.0;
        assert!(tail < head, "head={head} tail={tail}");
    }

    #[test]
    fn invalid_fractions_rejected() {
        let tc = TrainConfig { mask_frac: 0.9, keep_frac: 0.2, random_frac: 0.1, ..Default::default() };
        assert!(tc.validate().is_err());
    }
}
