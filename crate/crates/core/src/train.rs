//! Mini-batch Adam training and the composition-function ablation grid.

use std::collections::BTreeMap;
use std::hash::{Hash, Hasher};
use std::path::PathBuf;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{AttentionMode, Composition, NormVariant, Squash};
use crate::data::{PairExample, PerturbationTag, Vocab};
use crate::error::{Error, Result};
use crate::matcher::{evaluate, Metrics, Model, ModelConfig};
use crate::optim::{clip_global_norm, Adam};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip_norm: f64,
    /// Written whenever dev accuracy improves.
    pub checkpoint_path: Option<PathBuf>,
    pub dev_fraction: f64,
    pub test_fraction: f64,
    /// Stop after this many epochs without dev improvement.
    pub patience: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 16,
            epochs: 20,
            seed: 0,
            clip_norm: 1.0,
            checkpoint_path: None,
            dev_fraction: 0.1,
            test_fraction: 0.1,
            patience: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::Config(format!("lr must be finite and ≥ 0, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        if self.adam_eps <= 0.0 || self.batch_size == 0 {
            return Err(Error::Config("adam_eps and batch_size must be positive".into()));
        }
        if self.dev_fraction < 0.0 || self.test_fraction < 0.0 || self.dev_fraction + self.test_fraction >= 1.0 {
            return Err(Error::Config("dev/test fractions must be ≥ 0 and sum below 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub dev_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: usize,
    /// Mean mini-batch loss before each update.
    pub step_losses: Vec<f64>,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_dev_accuracy: f64,
    pub best_dev_metrics: Option<Metrics>,
}

/// Summed loss and gradients of `batch`, divided by its length.
pub fn batch_gradients<T: Scalar>(
    model: &Model<T>,
    batch: &[PairExample],
) -> Result<(f64, Vec<Tensor<T>>)> {
    let mut total = 0.0;
    let mut acc: Vec<Tensor<T>> = model
        .store
        .tensors()
        .iter()
        .map(|t| Tensor::zeros(t.shape()))
        .collect();
    for ex in batch {
        let (loss, grads) = model.loss_and_gradients(ex)?;
        total += loss.to_f64_lossy();
        for (a, g) in acc.iter_mut().zip(&grads) {
            a.add_assign(g);
        }
    }
    let inv = T::one() / T::of(batch.len() as f64);
    for a in &mut acc {
        for x in a.data_mut() {
            *x = *x * inv;
        }
    }
    Ok((total / batch.len() as f64, acc))
}

/// One optimiser step on `batch`; returns the pre-step loss.
pub fn train_step<T: Scalar>(
    model: &mut Model<T>,
    adam: &mut Adam<T>,
    batch: &[PairExample],
    clip_norm: f64,
    step: usize,
) -> Result<f64> {
    let (loss, mut grads) = batch_gradients(model, batch)?;
    if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::Divergence { step, loss });
    }
    clip_global_norm(&mut grads, clip_norm);
    adam.step(model.store.tensors_mut(), &grads);
    Ok(loss)
}

/// Trains `model` on `train`, evaluating on `dev` after every epoch and
/// restoring the parameters of the best dev epoch at the end.
pub fn train<T: Scalar>(
    model: &mut Model<T>,
    train: &[PairExample],
    dev: &[PairExample],
    config: &TrainConfig,
) -> Result<TrainReport> {
    config.validate()?;
    if train.is_empty() || dev.is_empty() {
        return Err(Error::Input("training needs non-empty train and dev sets".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = Adam::new(config.lr, config.beta1, config.beta2, config.adam_eps);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut report = TrainReport {
        steps: 0,
        step_losses: Vec::new(),
        epochs: Vec::new(),
        best_epoch: 0,
        best_dev_accuracy: f64::NEG_INFINITY,
        best_dev_metrics: None,
    };
    let mut best = model.store.clone();
    let mut since_best = 0;
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<PairExample> = chunk.iter().map(|&i| train[i].clone()).collect();
            let loss = train_step(model, &mut adam, &batch, config.clip_norm, report.steps)?;
            report.step_losses.push(loss);
            report.steps += 1;
            epoch_loss += loss;
            batches += 1;
        }
        let metrics = evaluate(dev, model)?;
        let record = EpochRecord {
            epoch,
            mean_loss: epoch_loss / batches as f64,
            dev_accuracy: metrics.accuracy,
        };
        info!(
            "epoch {epoch}: loss {:.4} dev acc {:.4}",
            record.mean_loss, record.dev_accuracy
        );
        report.epochs.push(record);
        if metrics.accuracy > report.best_dev_accuracy {
            report.best_dev_accuracy = metrics.accuracy;
            report.best_epoch = epoch;
            report.best_dev_metrics = Some(metrics);
            best = model.store.clone();
            since_best = 0;
            if let Some(path) = &config.checkpoint_path {
                model.save(path)?;
                debug!("checkpoint written to {}", path.display());
            }
        } else {
            since_best += 1;
            if config.patience.is_some_and(|p| since_best >= p) {
                info!("no dev improvement for {since_best} epochs, stopping");
                break;
            }
        }
    }
    if config.epochs > 0 {
        model.store = best;
    }
    Ok(report)
}

/// One row of the ablation grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationVariant {
    pub name: String,
    /// Composition pair, or `softmax` for the baseline.
    pub family: String,
    pub composition: Composition,
    pub norm_variant: NormVariant,
    pub mode: AttentionMode,
}

fn variant(fe: Squash, fn_: Squash, norm: NormVariant) -> AblationVariant {
    let composition = Composition::new(fe, fn_);
    let name = match norm {
        NormVariant::None => composition.name(),
        NormVariant::CenterE => format!("{}/center_e", composition.name()),
        NormVariant::CenterN => format!("{}/center_n", composition.name()),
        NormVariant::TwoSigmoid => format!("{}/two_sigmoid", composition.name()),
    };
    AblationVariant {
        name,
        family: composition.name(),
        composition,
        norm_variant: norm,
        mode: AttentionMode::Combined,
    }
}

/// The eight composition variants of the ablation table.
pub fn composition_variants() -> Vec<AblationVariant> {
    use NormVariant::*;
    use Squash::*;
    vec![
        variant(Tanh, Sigmoid, None),
        variant(Tanh, Sigmoid, CenterE),
        variant(Tanh, Sigmoid, CenterN),
        variant(Tanh, Tanh, None),
        variant(Tanh, Arctan, None),
        variant(Sigmoid, Tanh, None),
        variant(Sigmoid, Arctan, None),
        variant(Sigmoid, Sigmoid, None),
    ]
}

pub fn softmax_baseline_variant() -> AblationVariant {
    AblationVariant {
        name: "softmax".into(),
        family: "softmax".into(),
        composition: Composition::TANH_SIGMOID,
        norm_variant: NormVariant::None,
        mode: AttentionMode::SoftmaxBaseline,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: AblationVariant,
    pub dev_accuracy: f64,
    pub test_accuracy: f64,
    pub test_tag_accuracy: BTreeMap<PerturbationTag, f64>,
    pub best_epoch: usize,
    pub final_train_loss: f64,
    /// Hash of the training shard; identical for every row.
    pub data_fingerprint: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    /// Mean test accuracy per family.
    pub fn family_means(&self) -> BTreeMap<String, f64> {
        let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
        for row in &self.rows {
            let e = sums.entry(row.variant.family.clone()).or_default();
            e.0 += row.test_accuracy;
            e.1 += 1;
        }
        sums.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect()
    }

    /// Tab-separated rendering.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("variant\tfamily\tdev_acc\ttest_acc\tswap_num\tswap_ant\toverlap_high\n");
        for r in &self.rows {
            let tag = |t| r.test_tag_accuracy.get(&t).map_or("-".to_owned(), |a| format!("{a:.4}"));
            out.push_str(&format!(
                "{}\t{}\t{:.4}\t{:.4}\t{}\t{}\t{}\n",
                r.variant.name,
                r.variant.family,
                r.dev_accuracy,
                r.test_accuracy,
                tag(PerturbationTag::SwapNum),
                tag(PerturbationTag::SwapAnt),
                tag(PerturbationTag::OverlapHigh),
            ));
        }
        out
    }
}

pub fn fingerprint(examples: &[PairExample]) -> u64 {
    let mut h = std::collections::hash_map::DefaultHasher::new();
    for ex in examples {
        ex.tokens_q.hash(&mut h);
        ex.tokens_p.hash(&mut h);
        ex.label.hash(&mut h);
        ex.tag.hash(&mut h);
    }
    h.finish()
}

/// Trains one model per variant with `config` adjusted to it; returns the
/// trained model and its metrics.
pub fn train_variant<T: Scalar>(
    config: &ModelConfig,
    vocab: &Vocab,
    variant: &AblationVariant,
    train_cfg: &TrainConfig,
    train_set: &[PairExample],
    dev_set: &[PairExample],
) -> Result<(Model<T>, TrainReport)> {
    let mut cfg = config.clone();
    let attn = &mut cfg.encoder.attention;
    attn.composition = variant.composition;
    attn.norm_variant = variant.norm_variant;
    attn.mode = variant.mode;
    let mut model = Model::new(cfg, vocab.clone(), train_cfg.seed)?;
    let report = train(&mut model, train_set, dev_set, train_cfg)?;
    Ok((model, report))
}

/// Trains every composition variant plus the softmax baseline from the same
/// seed on the same data.
pub fn ablate<T: Scalar>(
    config: &ModelConfig,
    vocab: &Vocab,
    train_cfg: &TrainConfig,
    train_set: &[PairExample],
    dev_set: &[PairExample],
    test_set: &[PairExample],
) -> Result<AblationTable> {
    let mut rows = Vec::new();
    let mut variants = composition_variants();
    variants.push(softmax_baseline_variant());
    let train_cfg = TrainConfig {
        checkpoint_path: None,
        ..train_cfg.clone()
    };
    for v in variants {
        info!("ablation variant {}", v.name);
        let (model, report) = train_variant::<T>(config, vocab, &v, &train_cfg, train_set, dev_set)?;
        let test = evaluate(test_set, &model)?;
        rows.push(AblationRow {
            dev_accuracy: report.best_dev_accuracy,
            test_accuracy: test.accuracy,
            test_tag_accuracy: test.per_tag.iter().map(|(t, m)| (*t, m.accuracy)).collect(),
            best_epoch: report.best_epoch,
            final_train_loss: report.epochs.last().map_or(f64::NAN, |e| e.mean_loss),
            data_fingerprint: fingerprint(train_set),
            variant: v,
        });
    }
    Ok(AblationTable { rows })
}
