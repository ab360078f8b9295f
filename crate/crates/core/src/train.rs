//! Token-budget batching, Nesterov-momentum optimization with global
//! gradient clipping, and validation-driven early stopping on
//! exact-match accuracy.

use crate::decode::{default_max_len, greedy_decode};
use crate::metrics;
use crate::model::{self, Mode, Model, Params, Real, EOS_ID, PAD_ID};
use crate::preprocess::EncodedPair;
use crate::{Error, Result};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    /// Nesterov-accelerated momentum (the default).
    Nag,
    /// Plain stochastic gradient descent.
    Sgd,
}

/// Optimization hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub clip_threshold: f64,
    pub max_tokens_per_batch: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub momentum: f64,
    pub seed: u64,
    pub optimizer: Optimizer,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.25,
            clip_threshold: 0.1,
            max_tokens_per_batch: 48_000,
            max_epochs: 100,
            patience: 10,
            momentum: 0.99,
            seed: 0,
            optimizer: Optimizer::Nag,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 || self.clip_threshold <= 0.0 {
            return Err(Error::Config(
                "learning_rate and clip_threshold must be positive".into(),
            ));
        }
        if self.max_tokens_per_batch == 0 || self.max_epochs == 0 || self.patience == 0 {
            return Err(Error::Config(
                "max_tokens_per_batch, max_epochs, and patience must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum must be in [0, 1)".into()));
        }
        Ok(())
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_em: f64,
    pub valid_ppl: f64,
    pub checkpoint: String,
}

/// Shuffles pairs by seed, groups them by similar source length, and
/// greedily fills batches so that
/// `pairs_in_batch * max_padded_length_across_both_sides <= max_tokens`.
/// Returns indices into `pairs`.
pub fn make_batches(
    pairs: &[EncodedPair],
    max_tokens: usize,
    seed: u64,
) -> Result<Vec<Vec<usize>>> {
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    order.sort_by_key(|&i| pairs[i].source_ids.len());

    let mut batches: Vec<Vec<usize>> = Vec::new();
    let mut current: Vec<usize> = Vec::new();
    let mut current_max = 0usize;
    for &i in &order {
        let pair_max = pairs[i].source_ids.len().max(pairs[i].target_ids.len());
        if pair_max > max_tokens {
            return Err(Error::Batching {
                len: pair_max,
                budget: max_tokens,
            });
        }
        let new_max = current_max.max(pair_max);
        if !current.is_empty() && (current.len() + 1) * new_max > max_tokens {
            batches.push(std::mem::take(&mut current));
            current_max = 0;
        }
        current_max = current_max.max(pair_max);
        current.push(i);
    }
    if !current.is_empty() {
        batches.push(current);
    }
    Ok(batches)
}

/// Scales all gradients by `threshold / norm` when the global L2 norm
/// exceeds `threshold`. Returns the pre-clip norm.
pub fn clip_gradients<T: Real>(grads: &mut Params<T>, threshold: f64) -> Result<f64> {
    let norm = grads.sq_norm().sqrt();
    if !norm.is_finite() {
        return Err(Error::Numeric("non-finite gradient norm".into()));
    }
    if norm > threshold {
        grads.scale(T::from_f64(threshold / norm));
    }
    Ok(norm)
}

/// Momentum optimizer state.
pub struct OptimizerState<T: Real> {
    velocity: Params<T>,
}

impl<T: Real> OptimizerState<T> {
    pub fn new(params: &Params<T>) -> OptimizerState<T> {
        OptimizerState {
            velocity: params.zeros_like(),
        }
    }

    /// Applies one update. NAG: `v = m*v + g; theta -= lr*(g + m*v)`.
    /// SGD: `theta -= lr*g`.
    pub fn step(&mut self, params: &mut Params<T>, grads: &Params<T>, config: &TrainConfig) {
        let lr = T::from_f64(config.learning_rate);
        match config.optimizer {
            Optimizer::Sgd => {
                params.scaled_add(-lr, grads);
            }
            Optimizer::Nag => {
                let m = T::from_f64(config.momentum);
                self.velocity.scale(m);
                self.velocity.scaled_add(T::one(), grads);
                // lookahead step: g + m * v
                params.scaled_add(-lr, grads);
                params.scaled_add(-(lr * m), &self.velocity);
            }
        }
    }
}

/// Early-stopping controller: tracks the maximum validation EM (ties
/// resolved towards the earliest epoch) and signals a stop after
/// `patience` epochs without improvement.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    best_em: f64,
    best_epoch: usize,
    since_best: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> EarlyStopping {
        EarlyStopping {
            patience,
            best_em: f64::NEG_INFINITY,
            best_epoch: 0,
            since_best: 0,
        }
    }

    /// Records one epoch's EM; returns true when training should stop.
    pub fn observe(&mut self, epoch: usize, em: f64) -> bool {
        if em > self.best_em {
            self.best_em = em;
            self.best_epoch = epoch;
            self.since_best = 0;
        } else {
            self.since_best += 1;
        }
        self.since_best >= self.patience
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }

    pub fn best_em(&self) -> f64 {
        self.best_em
    }
}

/// Greedy-decodes the validation set for EM and computes teacher-forced
/// perplexity over the reference targets.
pub fn validate<T: Real>(model: &Model<T>, valid: &[EncodedPair]) -> Result<(f64, f64)> {
    if valid.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut matches = 0usize;
    let mut all_dists: Vec<Vec<f64>> = Vec::new();
    let mut all_refs: Vec<usize> = Vec::new();
    for pair in valid {
        let max_len = default_max_len(pair.source_ids.len(), model.config.max_positions);
        let decoded = greedy_decode(model, &pair.source_ids, max_len)?;
        if decoded == pair.target_ids {
            matches += 1;
        }
        all_dists.extend(model.target_distributions(&pair.source_ids, &pair.target_ids)?);
        all_refs.extend_from_slice(&pair.target_ids);
    }
    let em = matches as f64 / valid.len() as f64;
    let ppl = metrics::perplexity(&all_dists, &all_refs, PAD_ID)?;
    Ok((em, ppl))
}

/// The result of a training run.
pub struct TrainOutcome<T: Real> {
    /// The checkpoint with maximum validation EM (ties -> earliest).
    pub model: Model<T>,
    pub history: Vec<EpochRecord>,
    /// 1-based epoch index of the returned checkpoint.
    pub best_epoch: usize,
}

/// Runs the optimization loop. When `output_dir` is given, an
/// `epoch-N.ckpt` file is written per epoch, the winner is copied to
/// `best.ckpt`, and EpochRecords are appended to `train.log.jsonl`.
pub fn train<T: Real>(
    mut model: Model<T>,
    train_set: &[EncodedPair],
    valid_set: &[EncodedPair],
    config: &TrainConfig,
    output_dir: Option<&Path>,
) -> Result<TrainOutcome<T>> {
    config.validate()?;
    if train_set.is_empty() || valid_set.is_empty() {
        return Err(Error::EmptyInput);
    }
    if let Some(dir) = output_dir {
        std::fs::create_dir_all(dir)?;
    }
    let mut optimizer = OptimizerState::new(&model.params);
    let mut controller = EarlyStopping::new(config.patience);
    let mut history = Vec::new();
    let mut best_model = model.clone();
    let mut dropout_counter = config.seed;
    let mut log_file = match output_dir {
        Some(dir) => Some(std::io::BufWriter::new(std::fs::File::create(
            dir.join("train.log.jsonl"),
        )?)),
        None => None,
    };

    for epoch in 1..=config.max_epochs {
        let batches = make_batches(
            train_set,
            config.max_tokens_per_batch,
            config.seed.wrapping_add(epoch as u64),
        )?;
        let mut epoch_loss = 0.0f64;
        let mut epoch_pairs = 0usize;
        for (step, batch) in batches.iter().enumerate() {
            let mut grads = model.params.zeros_like();
            let mut batch_loss = 0.0f64;
            for &i in batch {
                let pair = &train_set[i];
                dropout_counter = dropout_counter.wrapping_add(1);
                let (loss, g) = model
                    .loss_and_gradients(
                        &pair.source_ids,
                        &pair.target_ids,
                        model.config.label_smoothing,
                        Mode::Train {
                            dropout_seed: dropout_counter,
                        },
                    )
                    .map_err(|e| {
                        Error::Other(format!(
                            "epoch {epoch} step {step} pair {id}: {e}",
                            id = pair.id
                        ))
                    })?;
                batch_loss += loss;
                grads.scaled_add(T::one(), &g);
            }
            let scale = T::from_f64(1.0 / batch.len() as f64);
            grads.scale(scale);
            clip_gradients(&mut grads, config.clip_threshold)
                .map_err(|e| Error::Other(format!("epoch {epoch} step {step}: {e}")))?;
            optimizer.step(&mut model.params, &grads, config);
            epoch_loss += batch_loss;
            epoch_pairs += batch.len();
        }
        let train_loss = epoch_loss / epoch_pairs as f64;

        let (valid_em, valid_ppl) = validate(&model, valid_set)?;
        let checkpoint = match output_dir {
            Some(dir) => {
                let path = dir.join(format!("epoch-{epoch}.ckpt"));
                model::save_checkpoint(&model, &path)?;
                path.display().to_string()
            }
            None => format!("epoch-{epoch}"),
        };
        let record = EpochRecord {
            epoch,
            train_loss,
            valid_em,
            valid_ppl,
            checkpoint,
        };
        if let Some(f) = log_file.as_mut() {
            let line = serde_json::to_string(&record).map_err(|e| Error::Other(e.to_string()))?;
            writeln!(f, "{line}")?;
            f.flush()?;
        }
        history.push(record);

        let improved = valid_em > controller.best_em();
        let stop = controller.observe(epoch, valid_em);
        if improved {
            best_model = model.clone();
        }
        if stop {
            break;
        }
    }

    if let Some(dir) = output_dir {
        let best_path: PathBuf = dir.join("best.ckpt");
        model::save_checkpoint(&best_model, &best_path)?;
    }
    Ok(TrainOutcome {
        model: best_model,
        history,
        best_epoch: controller.best_epoch(),
    })
}

/// Fraction of non-PAD target positions whose argmax logit matches the
/// reference under teacher forcing.
pub fn token_accuracy<T: Real>(model: &Model<T>, pairs: &[EncodedPair]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::UndefinedMetric);
    }
    let mut correct = 0usize;
    let mut total = 0usize;
    for pair in pairs {
        let prefix = model::decoder_prefix(&pair.target_ids)?;
        let out = model.forward(&pair.source_ids, &prefix, Mode::Eval)?;
        for (t, &target) in pair.target_ids.iter().enumerate() {
            if target == PAD_ID {
                continue;
            }
            let row = out.logits.row(t);
            let mut best = 0usize;
            for (j, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = j;
                }
            }
            total += 1;
            correct += usize::from(best == target);
        }
    }
    Ok(correct as f64 / total as f64)
}

/// The id sequences a decoded hypothesis and reference share when both
/// strip the trailing EOS; used by tests and evaluation helpers.
pub fn strip_eos(ids: &[usize]) -> &[usize] {
    match ids.last() {
        Some(&id) if id == EOS_ID => &ids[..ids.len() - 1],
        _ => ids,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, ModelConfig};
    use approx::assert_relative_eq;

    fn pair(id: &str, src: Vec<usize>, tgt: Vec<usize>) -> EncodedPair {
        EncodedPair {
            id: id.to_string(),
            source_ids: src,
            target_ids: tgt,
            number_map: String::new(),
        }
    }

    fn random_pairs(n: usize, seed: u64) -> Vec<EncodedPair> {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let slen = rng.gen_range(1..=40);
                let tlen = rng.gen_range(1..=40);
                pair(
                    &format!("p{i}"),
                    (0..slen).map(|_| rng.gen_range(4..50)).collect(),
                    (0..tlen).map(|_| rng.gen_range(4..50)).collect(),
                )
            })
            .collect()
    }

    #[test]
    fn batches_partition_and_respect_budget() {
        for seed in 0..20 {
            let pairs = random_pairs(80, seed);
            let budget = 200;
            let batches = make_batches(&pairs, budget, seed).unwrap();
            let mut seen: Vec<usize> = batches.iter().flatten().copied().collect();
            seen.sort_unstable();
            assert_eq!(seen, (0..pairs.len()).collect::<Vec<_>>());
            for batch in &batches {
                let max_len = batch
                    .iter()
                    .map(|&i| pairs[i].source_ids.len().max(pairs[i].target_ids.len()))
                    .max()
                    .unwrap();
                assert!(batch.len() * max_len <= budget);
            }
        }
    }

    #[test]
    fn single_pair_over_budget_is_an_error() {
        let pairs = vec![pair("a", vec![4; 100], vec![5; 3])];
        assert!(matches!(
            make_batches(&pairs, 50, 0),
            Err(Error::Batching { .. })
        ));
        // one long pair within budget gets its own batch
        let pairs = vec![pair("a", vec![4; 1024], vec![5; 3])];
        let batches = make_batches(&pairs, 48_000, 0).unwrap();
        assert_eq!(batches, vec![vec![0]]);
        assert!(make_batches(&[], 48_000, 0).unwrap().is_empty());
    }

    #[test]
    fn batching_is_deterministic_in_seed() {
        let pairs = random_pairs(60, 1);
        assert_eq!(
            make_batches(&pairs, 300, 7).unwrap(),
            make_batches(&pairs, 300, 7).unwrap()
        );
    }

    #[test]
    fn clip_gradients_contract() {
        let config = ModelConfig {
            state_size: 4,
            num_layers: 1,
            kernel_size: 3,
            dropout_rate: 0.0,
            label_smoothing: 0.1,
            max_positions: 8,
            source_vocab_size: 6,
            target_vocab_size: 6,
            seed: 1,
        };
        let model: Model<f64> = init_model(&config).unwrap();
        let mut grads = model.params.zeros_like();
        grads.for_each_mut(|v| *v = 0.01);
        let n = grads.sq_norm().sqrt();
        assert!(n > 0.1);
        clip_gradients(&mut grads, 0.1).unwrap();
        assert_relative_eq!(grads.sq_norm().sqrt(), 0.1, epsilon = 1e-7);

        // below threshold: unchanged
        let mut small = model.params.zeros_like();
        small.for_each_mut(|v| *v = 1e-6);
        let before = small.sq_norm();
        clip_gradients(&mut small, 0.1).unwrap();
        assert_relative_eq!(small.sq_norm(), before);

        // zero gradients: unchanged
        let mut zero = model.params.zeros_like();
        clip_gradients(&mut zero, 0.1).unwrap();
        assert_eq!(zero.sq_norm(), 0.0);

        let mut bad = model.params.zeros_like();
        bad.for_each_mut(|v| *v = f64::NAN);
        assert!(clip_gradients(&mut bad, 0.1).is_err());
    }

    #[test]
    fn early_stopping_controller() {
        // EM sequence [0.1, 0.5, 0.4, 0.4, 0.4], patience 3:
        // stops after epoch 5, best is epoch 2
        let mut c = EarlyStopping::new(3);
        let ems = [0.1, 0.5, 0.4, 0.4, 0.4];
        let mut stopped_at = None;
        for (i, &em) in ems.iter().enumerate() {
            if c.observe(i + 1, em) {
                stopped_at = Some(i + 1);
                break;
            }
        }
        assert_eq!(stopped_at, Some(5));
        assert_eq!(c.best_epoch(), 2);

        // ties go to the earliest epoch
        let mut c = EarlyStopping::new(10);
        c.observe(1, 0.2);
        c.observe(2, 0.2);
        assert_eq!(c.best_epoch(), 1);
    }

    #[test]
    fn nag_and_sgd_updates() {
        let config = ModelConfig {
            state_size: 4,
            num_layers: 1,
            kernel_size: 3,
            dropout_rate: 0.0,
            label_smoothing: 0.1,
            max_positions: 8,
            source_vocab_size: 6,
            target_vocab_size: 6,
            seed: 1,
        };
        let model: Model<f64> = init_model(&config).unwrap();
        let mut grads = model.params.zeros_like();
        grads.for_each_mut(|v| *v = 1.0);

        let sgd_cfg = TrainConfig {
            learning_rate: 0.5,
            optimizer: Optimizer::Sgd,
            ..TrainConfig::default()
        };
        let mut p = model.params.zeros_like();
        let mut opt = OptimizerState::new(&p);
        opt.step(&mut p, &grads, &sgd_cfg);
        p.for_each(|v| assert_relative_eq!(v, -0.5));

        // NAG first step: v = g, theta -= lr*(g + m*g) = lr*(1+m)*g
        let nag_cfg = TrainConfig {
            learning_rate: 0.5,
            momentum: 0.9,
            optimizer: Optimizer::Nag,
            ..TrainConfig::default()
        };
        let mut p = model.params.zeros_like();
        let mut opt = OptimizerState::new(&p);
        opt.step(&mut p, &grads, &nag_cfg);
        p.for_each(|v| assert_relative_eq!(v, -0.5 * 1.9, epsilon = 1e-12));
        // second step: v = 0.9 + 1 = 1.9; delta = lr*(1 + 0.9*1.9)
        opt.step(&mut p, &grads, &nag_cfg);
        p.for_each(|v| assert_relative_eq!(v, -0.5 * 1.9 - 0.5 * (1.0 + 0.9 * 1.9), epsilon = 1e-12));
    }

    fn copy_task_sets() -> (Vec<EncodedPair>, Vec<EncodedPair>, ModelConfig) {
        // a tiny copy task: target repeats the source then EOS
        let mut pairs = Vec::new();
        for a in 4..8 {
            for b in 4..8 {
                pairs.push(pair(
                    &format!("c{a}{b}"),
                    vec![a, b],
                    vec![a, b, EOS_ID],
                ));
            }
        }
        let config = ModelConfig {
            state_size: 32,
            num_layers: 2,
            kernel_size: 3,
            dropout_rate: 0.0,
            label_smoothing: 0.05,
            max_positions: 16,
            source_vocab_size: 8,
            target_vocab_size: 8,
            seed: 5,
        };
        (pairs.clone(), pairs, config)
    }

    #[test]
    fn training_reduces_loss_and_reaches_high_em_on_copy_task() {
        let (train_set, valid_set, config) = copy_task_sets();
        let model: Model<f32> = init_model(&config).unwrap();
        let tc = TrainConfig {
            learning_rate: 0.25,
            clip_threshold: 0.1,
            max_tokens_per_batch: 64,
            max_epochs: 60,
            patience: 60,
            momentum: 0.99,
            seed: 3,
            optimizer: Optimizer::Nag,
        };
        let outcome = train(model, &train_set, &valid_set, &tc, None).unwrap();
        let first = outcome.history.first().unwrap();
        let best = outcome
            .history
            .iter()
            .map(|r| r.valid_em)
            .fold(f64::NEG_INFINITY, f64::max);
        assert!(
            best > 0.9,
            "copy task should be learnable; best EM {best}, first loss {}",
            first.train_loss
        );
        // best checkpoint selection is argmax EM, ties earliest
        let argmax = outcome
            .history
            .iter()
            .max_by(|a, b| {
                a.valid_em
                    .partial_cmp(&b.valid_em)
                    .unwrap()
                    .then(b.epoch.cmp(&a.epoch))
            })
            .unwrap();
        assert_eq!(outcome.best_epoch, argmax.epoch);
        let (em, _) = validate(&outcome.model, &valid_set).unwrap();
        assert_relative_eq!(em, best, epsilon = 1e-12);
    }

    #[test]
    fn training_is_deterministic() {
        let (train_set, valid_set, config) = copy_task_sets();
        let tc = TrainConfig {
            max_tokens_per_batch: 64,
            max_epochs: 3,
            patience: 3,
            seed: 9,
            ..TrainConfig::default()
        };
        let a = train(
            init_model::<f32>(&config).unwrap(),
            &train_set,
            &valid_set,
            &tc,
            None,
        )
        .unwrap();
        let b = train(
            init_model::<f32>(&config).unwrap(),
            &train_set,
            &valid_set,
            &tc,
            None,
        )
        .unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.model.params, b.model.params);
    }

    #[test]
    fn untrained_model_perplexity_near_vocab_size() {
        let config = ModelConfig {
            state_size: 16,
            num_layers: 2,
            kernel_size: 3,
            dropout_rate: 0.0,
            label_smoothing: 0.1,
            max_positions: 16,
            source_vocab_size: 64,
            target_vocab_size: 64,
            seed: 2,
        };
        let model: Model<f64> = init_model(&config).unwrap();
        let valid = vec![
            pair("a", vec![4, 5, 6], vec![7, 8, EOS_ID]),
            pair("b", vec![9, 10], vec![11, EOS_ID]),
        ];
        let (_, ppl) = validate(&model, &valid).unwrap();
        assert!(
            ppl > 32.0 && ppl < 128.0,
            "expected perplexity near 64, got {ppl}"
        );
    }

    #[test]
    fn train_writes_log_and_checkpoints() {
        let (train_set, valid_set, config) = copy_task_sets();
        let dir = tempfile::tempdir().unwrap();
        let tc = TrainConfig {
            max_tokens_per_batch: 64,
            max_epochs: 2,
            patience: 2,
            seed: 1,
            ..TrainConfig::default()
        };
        let outcome = train(
            init_model::<f32>(&config).unwrap(),
            &train_set,
            &valid_set,
            &tc,
            Some(dir.path()),
        )
        .unwrap();
        assert!(dir.path().join("epoch-1.ckpt").exists());
        assert!(dir.path().join("epoch-2.ckpt").exists());
        assert!(dir.path().join("best.ckpt").exists());
        let log = std::fs::read_to_string(dir.path().join("train.log.jsonl")).unwrap();
        let records: Vec<EpochRecord> = log
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        assert_eq!(records, outcome.history);
        let best: Model<f32> = model::load_checkpoint(&dir.path().join("best.ckpt")).unwrap();
        assert_eq!(best.params, outcome.model.params);
    }
}
