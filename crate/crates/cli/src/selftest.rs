//! End-to-end invariant suite on a throwaway model. Each check prints one
//! line; any violation aborts with a runtime error.

use anyhow::{anyhow, ensure, Result};

use recon_core::corpus::Grammar;
use recon_core::model::{forward_injected, forward_plain, ModelConfig, WeightSet};
use recon_core::probe::{collect_records, lor, ProbeCondition, ProbeRecord};
use recon_core::rng::Rng;
use recon_core::tokenizer::{tokenize, TokenizedSentence, MASK};
use recon_core::trainer::{train, TrainConfig};

fn check(name: &str, result: Result<()>) -> Result<()> {
    match result {
        Ok(()) => {
            eprintln!("ok: {name}");
            Ok(())
        }
        Err(e) => Err(anyhow!("{name}: {e}")),
    }
}

pub fn run(seed: u64) -> Result<()> {
    let grammar = Grammar::toy_default();
    let vocab = grammar.derive_vocab().map_err(|e| anyhow!("{e}"))?;
    let config = ModelConfig {
        n_layers: 2,
        n_heads: 2,
        hidden: 16,
        ff_dim: 32,
        vocab: vocab.len(),
        max_positions: 24,
        layernorm_eps: 1e-12,
    };
    let weights = WeightSet::random(&config, &mut Rng::derive(seed, "selftest"))
        .map_err(|e| anyhow!("{e}"))?;
    let corpus = recon_core::corpus::sample_corpus(&grammar, 8, seed).map_err(|e| anyhow!("{e}"))?;
    let tokenized: Vec<TokenizedSentence> = corpus
        .iter()
        .map(|(words, _)| {
            let refs: Vec<&str> = words.iter().map(String::as_str).collect();
            tokenize(&refs, &vocab)
        })
        .collect();
    let sentence = &tokenized[0];

    check("injection of own captures reproduces the plain pass", {
        let (plain, captured) = forward_plain(&sentence.ids, true, &weights, &config)
            .map_err(|e| anyhow!("{e}"))?;
        let source = sentence.content_positions()[0];
        let injected = forward_injected(&sentence.ids, source, &captured, &weights, &config)
            .map_err(|e| anyhow!("{e}"))?;
        let drift = plain
            .log_probs
            .data
            .iter()
            .zip(&injected.log_probs.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        ensure!(drift < 1e-12, "max drift {drift}");
        Ok(())
    })?;

    check("all-mask baseline without positions ignores position and length", {
        let short = vec![MASK; 5];
        let long = vec![MASK; 11];
        let (a, _) = forward_plain(&short, false, &weights, &config).map_err(|e| anyhow!("{e}"))?;
        let (b, _) = forward_plain(&long, false, &weights, &config).map_err(|e| anyhow!("{e}"))?;
        let mut drift = 0.0f64;
        for token in 0..config.vocab {
            for pos_a in 0..short.len() {
                for pos_b in 0..long.len() {
                    drift = drift
                        .max((a.log_probs.get(pos_a, token) - b.log_probs.get(pos_b, token)).abs());
                }
            }
        }
        ensure!(drift < 1e-9, "max drift {drift}");
        Ok(())
    })?;

    check("log odds ratio identities", {
        let half = (0.5f64.ln(), 0.5f64.ln());
        ensure!(lor(half, half).abs() < 1e-15, "self comparison nonzero");
        let p = (0.9f64.ln(), 0.1f64.ln());
        let q = (0.1f64.ln(), 0.9f64.ln());
        ensure!((lor(p, q) - 81f64.ln()).abs() < 1e-12, "9:1 vs 1:9 odds");
        ensure!((lor(p, q) + lor(q, p)).abs() < 1e-12, "antisymmetry");
        Ok(())
    })?;

    check("record counts and probability complements", {
        let records = collect_records("s1", sentence, &weights, &config, &ProbeCondition::ALL)
            .map_err(|e| anyhow!("{e}"))?;
        let n = sentence.content_positions().len();
        let per_condition = |c: ProbeCondition| -> usize {
            records.iter().filter(|r| r.condition == c).count()
        };
        for c in ProbeCondition::ALL {
            let expected = if c.requires_source() { n * (n - 1) } else { n };
            ensure!(per_condition(c) == expected, "{}: wrong count", c.label());
        }
        for r in &records {
            let total = r.log_p.exp() + r.log_1mp.exp();
            ensure!((total - 1.0).abs() < 1e-12, "complement off by {}", total - 1.0);
        }
        Ok(())
    })?;

    check("probe records are identical across worker counts", {
        let serial: Vec<Vec<ProbeRecord>> = tokenized
            .iter()
            .enumerate()
            .map(|(i, ts)| {
                collect_records(&format!("s{}", i + 1), ts, &weights, &config, &ProbeCondition::ALL)
                    .map_err(|e| anyhow!("{e}"))
            })
            .collect::<Result<_>>()?;
        let pool = rayon::ThreadPoolBuilder::new().num_threads(4).build()?;
        let parallel: Vec<Vec<ProbeRecord>> = pool.install(|| {
            use rayon::prelude::*;
            tokenized
                .par_iter()
                .enumerate()
                .map(|(i, ts)| {
                    collect_records(
                        &format!("s{}", i + 1),
                        ts,
                        &weights,
                        &config,
                        &ProbeCondition::ALL,
                    )
                    .map_err(|e| anyhow!("{e}"))
                })
                .collect::<Result<_>>()
        })?;
        ensure!(serial == parallel, "parallel records diverged");
        Ok(())
    })?;

    check("training is bit-deterministic for a fixed seed", {
        let tc = TrainConfig { steps: 5, batch_size: 4, seed, ..TrainConfig::default() };
        let run = || -> Result<Vec<u64>> {
            let mut w = WeightSet::random(&config, &mut Rng::derive(seed, "selftest-train"))
                .map_err(|e| anyhow!("{e}"))?;
            train(&mut w, &config, &tokenized, &tc).map_err(|e| anyhow!("{e}"))?;
            Ok(w.params()
                .iter()
                .flat_map(|p| p.value.data.iter().map(|v| v.to_bits()))
                .collect())
        };
        ensure!(run()? == run()?, "two runs diverged");
        Ok(())
    })?;

    eprintln!("selftest passed");
    Ok(())
}
