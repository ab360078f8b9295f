//! Greedy and beam-search decoding, plus the end-to-end `translate`
//! pipeline (tokenize, substitute numbers, decode, restore, detokenize).

use crate::model::{self, Mode, Model, ModelConfig, Real, BOS_ID, EOS_ID};
use crate::preprocess::{self, NumberMap, Vocabulary};
use crate::tokenizer::{detokenize, tokenize, Language};
use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// A finished decoder hypothesis.
#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    /// Target ids, ending in EOS unless truncated at max length.
    pub ids: Vec<usize>,
    /// Sum of token log-probabilities.
    pub score: f64,
    /// Score divided by length.
    pub normalized_score: f64,
}

/// Default decode length: min(max_positions, 2 * source length + 50).
pub fn default_max_len(source_len: usize, max_positions: usize) -> usize {
    max_positions.min(2 * source_len + 50)
}

fn log_softmax_row<T: Real>(row: &[T]) -> Vec<f64> {
    let max = row
        .iter()
        .map(|v| v.as_f64())
        .fold(f64::NEG_INFINITY, f64::max);
    let log_z = max
        + row
            .iter()
            .map(|v| (v.as_f64() - max).exp())
            .sum::<f64>()
            .ln();
    row.iter().map(|v| v.as_f64() - log_z).collect()
}

fn last_step_log_probs<T: Real>(
    model: &Model<T>,
    source_ids: &[usize],
    prefix: &[usize],
) -> Result<Vec<f64>> {
    let out = model.forward(source_ids, prefix, Mode::Eval)?;
    let last = out.logits.row(out.logits.dim().0 - 1);
    Ok(log_softmax_row(last.as_slice().unwrap()))
}

/// Repeatedly appends the argmax token (ties broken towards the
/// smallest id) until EOS or `max_len` tokens are emitted.
pub fn greedy_decode<T: Real>(
    model: &Model<T>,
    source_ids: &[usize],
    max_len: usize,
) -> Result<Vec<usize>> {
    if source_ids.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut prefix = vec![BOS_ID];
    let mut out = Vec::new();
    for _ in 0..max_len {
        let log_probs = last_step_log_probs(model, source_ids, &prefix)?;
        let mut best = 0usize;
        for (j, &lp) in log_probs.iter().enumerate() {
            if lp > log_probs[best] {
                best = j;
            }
        }
        out.push(best);
        if best == EOS_ID {
            break;
        }
        prefix.push(best);
    }
    Ok(out)
}

/// Standard beam search. Hypotheses emitting EOS are finalized; the
/// search stops when `beam_size` hypotheses are final or `max_len` is
/// reached (truncating the survivors). The result is ranked by
/// normalized score descending, ties broken by smaller final token id,
/// then shorter length.
pub fn beam_search<T: Real>(
    model: &Model<T>,
    source_ids: &[usize],
    beam_size: usize,
    max_len: usize,
) -> Result<Vec<Hypothesis>> {
    if source_ids.is_empty() {
        return Err(Error::EmptyInput);
    }
    if beam_size == 0 || max_len == 0 {
        return Err(Error::Config(
            "beam_size and max_len must be positive".into(),
        ));
    }
    // live hypotheses: emitted ids (no BOS) and running score
    let mut live: Vec<(Vec<usize>, f64)> = vec![(Vec::new(), 0.0)];
    let mut done: Vec<Hypothesis> = Vec::new();
    for _ in 0..max_len {
        if live.is_empty() || done.len() >= beam_size {
            break;
        }
        let mut candidates: Vec<(Vec<usize>, f64, usize)> = Vec::new();
        for (ids, score) in &live {
            let mut prefix = Vec::with_capacity(ids.len() + 1);
            prefix.push(BOS_ID);
            prefix.extend_from_slice(ids);
            let log_probs = last_step_log_probs(model, source_ids, &prefix)?;
            for (j, &lp) in log_probs.iter().enumerate() {
                candidates.push((ids.clone(), score + lp, j));
            }
        }
        candidates.sort_by(|a, b| {
            b.1.partial_cmp(&a.1)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.2.cmp(&b.2))
        });
        live.clear();
        for (ids, score, token) in candidates.into_iter().take(beam_size) {
            let mut ids = ids;
            ids.push(token);
            if token == EOS_ID {
                let normalized_score = score / ids.len() as f64;
                done.push(Hypothesis {
                    ids,
                    score,
                    normalized_score,
                });
            } else {
                live.push((ids, score));
            }
        }
    }
    // truncated survivors still count as hypotheses
    for (ids, score) in live {
        if done.len() >= beam_size {
            break;
        }
        if !ids.is_empty() {
            let normalized_score = score / ids.len() as f64;
            done.push(Hypothesis {
                ids,
                score,
                normalized_score,
            });
        }
    }
    done.sort_by(|a, b| {
        b.normalized_score
            .partial_cmp(&a.normalized_score)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| a.ids.last().cmp(&b.ids.last()))
            .then_with(|| a.ids.len().cmp(&b.ids.len()))
    });
    Ok(done)
}

/// A trained model with everything needed to translate raw text.
pub struct ModelBundle {
    pub model: Model<f32>,
    pub source_vocab: Vocabulary,
    pub target_vocab: Vocabulary,
    pub source_language: Language,
    pub target_language: Language,
}

#[derive(Serialize, Deserialize)]
struct BundleManifest {
    source_language: String,
    target_language: String,
}

impl ModelBundle {
    /// Writes `model.ckpt`, `source.vocab`, `target.vocab`, and
    /// `bundle.json` under `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        model::save_checkpoint(&self.model, &dir.join("model.ckpt"))?;
        self.source_vocab.save(&dir.join("source.vocab"))?;
        self.target_vocab.save(&dir.join("target.vocab"))?;
        let manifest = BundleManifest {
            source_language: self.source_language.to_string(),
            target_language: self.target_language.to_string(),
        };
        let json = serde_json::to_string_pretty(&manifest)
            .map_err(|e| Error::Other(e.to_string()))?;
        std::fs::write(dir.join("bundle.json"), json)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<ModelBundle> {
        let model: Model<f32> = model::load_checkpoint(&dir.join("model.ckpt"))?;
        let source_vocab = Vocabulary::load(&dir.join("source.vocab"))?;
        let target_vocab = Vocabulary::load(&dir.join("target.vocab"))?;
        let manifest: BundleManifest =
            serde_json::from_str(&std::fs::read_to_string(dir.join("bundle.json"))?)
                .map_err(|e| Error::Checkpoint(format!("bundle manifest: {e}")))?;
        let parse = |s: &str| {
            s.parse::<Language>()
                .map_err(|e| Error::Checkpoint(format!("bundle manifest: {e}")))
        };
        if source_vocab.size() != model.config.source_vocab_size
            || target_vocab.size() != model.config.target_vocab_size
        {
            return Err(Error::Checkpoint(
                "vocabulary sizes do not match the model config".into(),
            ));
        }
        Ok(ModelBundle {
            model,
            source_vocab,
            target_vocab,
            source_language: parse(&manifest.source_language)?,
            target_language: parse(&manifest.target_language)?,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.model.config
    }
}

/// One translated formula, as written to translation JSONL output.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TranslationRecord {
    pub id: String,
    pub source: String,
    pub prediction: String,
    pub score: f64,
    pub number_map: String,
}

/// Full text-to-text pipeline: tokenize, substitute numbers, encode,
/// beam-search, decode ids, restore numbers, detokenize.
pub fn translate(
    text: &str,
    bundle: &ModelBundle,
    beam_size: usize,
    number_seed: u64,
) -> Result<(String, f64, NumberMap)> {
    let stream = tokenize(text, bundle.source_language)?;
    let (tagged, map) = preprocess::substitute_numbers(&stream, number_seed)?;
    let source_ids = preprocess::encode(&tagged, &bundle.source_vocab, true);
    let max_positions = bundle.model.config.max_positions;
    if source_ids.len() > max_positions {
        return Err(Error::Length {
            len: source_ids.len(),
            max: max_positions,
        });
    }
    let max_len = default_max_len(source_ids.len(), max_positions);
    let hyps = beam_search(&bundle.model, &source_ids, beam_size, max_len)?;
    let best = hyps.first().ok_or(Error::EmptyInput)?;
    let decoded = preprocess::decode_ids(&best.ids, &bundle.target_vocab, bundle.target_language);
    let restored = preprocess::restore_numbers(&decoded, &map)?;
    Ok((detokenize(&restored), best.normalized_score, map))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, EOS_ID};

    fn tiny_model(seed: u64) -> Model<f64> {
        init_model(&ModelConfig {
            state_size: 8,
            num_layers: 2,
            kernel_size: 3,
            dropout_rate: 0.0,
            label_smoothing: 0.1,
            max_positions: 16,
            source_vocab_size: 12,
            target_vocab_size: 10,
            seed,
        })
        .unwrap()
    }

    #[test]
    fn greedy_properties() {
        let model = tiny_model(3);
        let out = greedy_decode(&model, &[4, 5, 6], 8).unwrap();
        assert!(!out.is_empty() && out.len() <= 8);
        assert_eq!(out, greedy_decode(&model, &[4, 5, 6], 8).unwrap());
        // EOS, if present, is terminal and unique
        let eos_positions: Vec<usize> = out
            .iter()
            .enumerate()
            .filter(|(_, &id)| id == EOS_ID)
            .map(|(i, _)| i)
            .collect();
        assert!(eos_positions.is_empty() || eos_positions == vec![out.len() - 1]);
        assert!(matches!(
            greedy_decode(&model, &[], 8),
            Err(Error::EmptyInput)
        ));
    }

    #[test]
    fn eos_biased_model_emits_eos_immediately() {
        let mut model = tiny_model(3);
        model.params.output_b[EOS_ID] = 100.0;
        assert_eq!(greedy_decode(&model, &[4], 8).unwrap(), vec![EOS_ID]);
        let hyps = beam_search(&model, &[4], 3, 8).unwrap();
        assert_eq!(hyps[0].ids, vec![EOS_ID]);
    }

    #[test]
    fn beam_one_equals_greedy() {
        for seed in 0..10 {
            let model = tiny_model(seed);
            let src = [4, 5 + (seed as usize % 3)];
            let greedy = greedy_decode(&model, &src, 10).unwrap();
            let beam = beam_search(&model, &src, 1, 10).unwrap();
            assert_eq!(beam[0].ids, greedy, "seed {seed}");
        }
    }

    #[test]
    fn beam_ranking_contract() {
        let model = tiny_model(11);
        let hyps = beam_search(&model, &[4, 5, 6, 7], 4, 12).unwrap();
        assert!(!hyps.is_empty());
        for pair in hyps.windows(2) {
            assert!(pair[0].normalized_score >= pair[1].normalized_score);
        }
        for h in &hyps {
            assert!(h.score <= 0.0);
            assert!(!h.ids.is_empty());
            assert!(h.ids.iter().all(|&id| id < 10));
            let eos_count = h.ids.iter().filter(|&&id| id == EOS_ID).count();
            assert!(eos_count <= 1);
            if eos_count == 1 {
                assert_eq!(*h.ids.last().unwrap(), EOS_ID);
            }
        }
    }

    #[test]
    fn beam_respects_max_len() {
        let model = tiny_model(5);
        for h in beam_search(&model, &[4, 5], 3, 4).unwrap() {
            assert!(h.ids.len() <= 4);
        }
    }

    #[test]
    fn default_max_len_formula() {
        assert_eq!(default_max_len(10, 1024), 70);
        assert_eq!(default_max_len(600, 1024), 1024);
    }
}
