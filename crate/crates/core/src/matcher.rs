//! Sentence-pair classification over the encoder.
//!
//! Cross mode encodes `[CLS] q [SEP] p [SEP]` as one sequence; position
//! indices restart for `p` so that aligned tokens of `q` and `p` share a
//! position encoding, and a segment embedding tells the halves apart.
//! Siamese mode encodes `q` and `p` separately with the shared encoder, then
//! cross-attends them with [`attend`] and classifies pooled
//! `[â; b̂; |â−b̂|; â⊙b̂]` features.

use std::collections::BTreeMap;
use std::ops::Range;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{attend, DualProjections, TraceVars};
use crate::data::{PairExample, PerturbationTag, Role, Vocab};
use crate::encoder::{EncodeOutput, Encoder, EncoderConfig, Positions};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{Bound, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncodingMode {
    #[default]
    Cross,
    Siamese,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    Cls,
    #[default]
    Mean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MatcherConfig {
    pub encoding: EncodingMode,
    pub pooling: Pooling,
    pub num_classes: usize,
    /// Siamese only: use the order-free features `[â+b̂; |â−b̂|; â⊙b̂]` so
    /// that swapping `q` and `p` leaves the logits unchanged.
    pub symmetric_features: bool,
}

impl Default for MatcherConfig {
    fn default() -> Self {
        MatcherConfig {
            encoding: EncodingMode::Cross,
            pooling: Pooling::Mean,
            num_classes: 2,
            symmetric_features: false,
        }
    }
}

/// Architecture part of a run configuration, stored in checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub matcher: MatcherConfig,
}

#[derive(Clone, Debug)]
enum InteractionLayout {
    Shared(ParamId),
    Separate { affinity: ParamId, difference: ParamId },
}

#[derive(Clone, Debug)]
pub struct Model<T: Scalar> {
    pub config: ModelConfig,
    pub vocab: Vocab,
    pub store: ParamStore<T>,
    encoder: Encoder,
    interaction: Option<InteractionLayout>,
    head_w: ParamId,
    head_b: ParamId,
}

/// Graph handles produced by one forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    pub logits: Var,
    /// Input of the linear classification head.
    pub features: Var,
    /// Cross mode: the joint encoding; siamese mode: the encodings of `q`
    /// and `p`.
    pub encodings: Vec<EncodeOutput>,
    /// Cross mode: rows of the joint sequence holding `q` and `p` tokens.
    pub q_span: Range<usize>,
    pub p_span: Range<usize>,
    /// Siamese mode: the `q`-against-`p` combined attention.
    pub interaction: Option<TraceVars>,
}

impl<T: Scalar> Model<T> {
    pub fn new(config: ModelConfig, vocab: Vocab, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        if config.encoder.vocab_size < vocab.len() {
            return Err(Error::Config(format!(
                "vocab_size {} smaller than vocabulary of {}",
                config.encoder.vocab_size,
                vocab.len()
            )));
        }
        let m = &config.matcher;
        if !(2..=3).contains(&m.num_classes) {
            return Err(Error::Config(format!(
                "num_classes must be 2 or 3, got {}",
                m.num_classes
            )));
        }
        let mut store = ParamStore::new();
        let encoder = Encoder::new(config.encoder.clone(), &mut store, "encoder", &mut rng)?;
        let d = config.encoder.d_model();
        let d_k = config.encoder.attention.d_k();
        let interaction = (m.encoding == EncodingMode::Siamese).then(|| {
            if config.encoder.attention.share_projections {
                InteractionLayout::Shared(store.add("interaction.f", Tensor::xavier(d, d_k, &mut rng)))
            } else {
                InteractionLayout::Separate {
                    affinity: store.add("interaction.f_e", Tensor::xavier(d, d_k, &mut rng)),
                    difference: store.add("interaction.f_n", Tensor::xavier(d, d_k, &mut rng)),
                }
            }
        });
        let feature_dim = match (m.encoding, m.symmetric_features) {
            (EncodingMode::Cross, _) => d,
            (EncodingMode::Siamese, false) => 4 * d,
            (EncodingMode::Siamese, true) => 3 * d,
        };
        let head_w = store.add("head.w", Tensor::xavier(feature_dim, m.num_classes, &mut rng));
        let head_b = store.add("head.b", Tensor::zeros(&[m.num_classes]));
        Ok(Model {
            config,
            vocab,
            store,
            encoder,
            interaction,
            head_w,
            head_b,
        })
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    fn pool(&self, g: &mut Graph<T>, hidden: Var) -> Result<Var> {
        let n = g.shape(hidden)[0];
        match self.config.matcher.pooling {
            Pooling::Mean => g.mean_rows(hidden, &vec![true; n]),
            Pooling::Cls => {
                let mut keep = vec![false; n];
                keep[0] = true;
                g.mean_rows(hidden, &keep)
            }
        }
    }

    /// Builds the forward pass for `pair` on `g`.
    pub fn forward(&self, g: &mut Graph<T>, bound: &Bound, pair: &PairExample) -> Result<Forward> {
        if pair.tokens_q.is_empty() || pair.tokens_p.is_empty() {
            return Err(Error::Input("both sequences must be non-empty".into()));
        }
        match self.config.matcher.encoding {
            EncodingMode::Cross => self.forward_cross(g, bound, pair),
            EncodingMode::Siamese => self.forward_siamese(g, bound, pair),
        }
    }

    fn forward_cross(&self, g: &mut Graph<T>, bound: &Bound, pair: &PairExample) -> Result<Forward> {
        let (q, p) = (&pair.tokens_q, &pair.tokens_p);
        let (cls, sep) = (self.vocab.cls(), self.vocab.sep());
        let mut tokens = Vec::with_capacity(q.len() + p.len() + 3);
        tokens.push(cls);
        tokens.extend_from_slice(q);
        tokens.push(sep);
        tokens.extend_from_slice(p);
        tokens.push(sep);
        let first = q.len() + 2;
        let mut positions: Vec<usize> = (0..first).collect();
        positions.extend(1..=p.len() + 1);
        let mut segments = vec![0; first];
        segments.resize(tokens.len(), 1);
        let layout = Positions {
            positions,
            segments: Some(segments),
        };
        let enc = self.encoder.encode(g, bound, &tokens, &layout, None)?;
        let pooled = self.pool(g, enc.hidden)?;
        let logits = g.linear(pooled, bound.var(self.head_w), Some(bound.var(self.head_b)))?;
        Ok(Forward {
            logits,
            features: pooled,
            encodings: vec![enc],
            q_span: 1..1 + q.len(),
            p_span: first..first + p.len(),
            interaction: None,
        })
    }

    fn forward_siamese(&self, g: &mut Graph<T>, bound: &Bound, pair: &PairExample) -> Result<Forward> {
        let enc_q = self.encoder.encode(
            g,
            bound,
            &pair.tokens_q,
            &Positions::sequential(pair.tokens_q.len()),
            None,
        )?;
        let enc_p = self.encoder.encode(
            g,
            bound,
            &pair.tokens_p,
            &Positions::sequential(pair.tokens_p.len()),
            None,
        )?;
        let proj = match self.interaction.as_ref().expect("siamese model has interaction maps") {
            InteractionLayout::Shared(w) => DualProjections::Shared(bound.var(*w)),
            InteractionLayout::Separate {
                affinity,
                difference,
            } => DualProjections::Separate {
                affinity: bound.var(*affinity),
                difference: bound.var(*difference),
            },
        };
        let out = attend(g, enc_q.hidden, enc_p.hidden, &proj, &self.config.encoder.attention)?;
        let a = self.pool(g, out.a_hat)?;
        let b = self.pool(g, out.b_hat)?;
        let diff = g.sub(a, b)?;
        let absdiff = g.abs(diff);
        let prod = g.mul(a, b)?;
        let features = if self.config.matcher.symmetric_features {
            let sum = g.add(a, b)?;
            g.concat_cols(&[sum, absdiff, prod])?
        } else {
            g.concat_cols(&[a, b, absdiff, prod])?
        };
        let logits = g.linear(features, bound.var(self.head_w), Some(bound.var(self.head_b)))?;
        Ok(Forward {
            logits,
            features,
            encodings: vec![enc_q, enc_p],
            q_span: 0..pair.tokens_q.len(),
            p_span: 0..pair.tokens_p.len(),
            interaction: Some(out.trace),
        })
    }

    /// Class logits for `pair`.
    pub fn classify(&self, pair: &PairExample) -> Result<Vec<T>> {
        let mut g = Graph::new();
        let bound = self.store.bind_frozen(&mut g);
        let fwd = self.forward(&mut g, &bound, pair)?;
        Ok(g.value(fwd.logits).data().to_vec())
    }

    pub fn predict(&self, pair: &PairExample) -> Result<usize> {
        let logits = self.classify(pair)?;
        // first index wins ties
        let mut best = 0;
        for (k, v) in logits.iter().enumerate() {
            if *v > logits[best] {
                best = k;
            }
        }
        Ok(best)
    }

    /// Cross-entropy loss node for `pair`.
    pub fn loss(&self, g: &mut Graph<T>, bound: &Bound, pair: &PairExample) -> Result<Var> {
        if pair.label >= self.config.matcher.num_classes {
            return Err(Error::Domain(format!(
                "label {} out of range for {} classes",
                pair.label, self.config.matcher.num_classes
            )));
        }
        let fwd = self.forward(g, bound, pair)?;
        g.cross_entropy(fwd.logits, pair.label)
    }

    /// Loss value and gradients (in store order) for one example.
    pub fn loss_and_gradients(&self, pair: &PairExample) -> Result<(T, Vec<Tensor<T>>)> {
        let mut g = Graph::new();
        let bound = self.store.bind(&mut g);
        let loss = self.loss(&mut g, &bound, pair)?;
        let grads = g.backward(loss)?;
        Ok((g.value(loss).item(), bound.gradients(&grads)))
    }

    pub fn mean_loss(&self, batch: &[PairExample]) -> Result<T> {
        let mut total = T::zero();
        for ex in batch {
            let mut g = Graph::new();
            let bound = self.store.bind_frozen(&mut g);
            let l = self.loss(&mut g, &bound, ex)?;
            total = total + g.value(l).item();
        }
        Ok(total / T::of(batch.len().max(1) as f64))
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_owned(),
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            vocab: self
                .vocab
                .words()
                .iter()
                .cloned()
                .zip(self.vocab.roles().iter().map(|&r| RoleName::from(r)))
                .collect(),
            params: self.store.to_map().into_iter().map(|(k, t)| (k, t.cast())).collect(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(file, &self.checkpoint())?;
        Ok(())
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.format != CHECKPOINT_FORMAT {
            return Err(Error::Input(format!("not a checkpoint: format {:?}", ckpt.format)));
        }
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::Input(format!(
                "unsupported checkpoint version {}",
                ckpt.version
            )));
        }
        let (words, roles): (Vec<String>, Vec<Role>) = ckpt
            .vocab
            .iter()
            .map(|(w, r)| (w.clone(), Role::from(*r)))
            .unzip();
        let vocab = Vocab::from_words(words, roles)?;
        let mut model = Model::new(ckpt.config.clone(), vocab, 0)?;
        let params: BTreeMap<String, Tensor<T>> =
            ckpt.params.iter().map(|(k, t)| (k.clone(), t.cast())).collect();
        model.store.load_map(&params)?;
        Ok(model)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::io::BufReader::new(std::fs::File::open(path)?);
        let ckpt: Checkpoint = serde_json::from_reader(file)?;
        Self::from_checkpoint(&ckpt)
    }
}

pub const CHECKPOINT_FORMAT: &str = "comate-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Serialised role of a vocab entry.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "role")]
pub enum RoleName {
    Special,
    Content,
    Number,
    Antonym { pair: usize },
    Filler,
}

impl From<Role> for RoleName {
    fn from(r: Role) -> Self {
        match r {
            Role::Special => RoleName::Special,
            Role::Content => RoleName::Content,
            Role::Number => RoleName::Number,
            Role::Antonym { pair } => RoleName::Antonym { pair },
            Role::Filler => RoleName::Filler,
        }
    }
}

impl From<RoleName> for Role {
    fn from(r: RoleName) -> Self {
        match r {
            RoleName::Special => Role::Special,
            RoleName::Content => Role::Content,
            RoleName::Number => Role::Number,
            RoleName::Antonym { pair } => Role::Antonym { pair },
            RoleName::Filler => Role::Filler,
        }
    }
}

/// JSON checkpoint: versioned header, architecture, vocabulary and a map
/// from parameter path to `{shape, data}` (row-major `f64`).
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config: ModelConfig,
    pub vocab: Vec<(String, RoleName)>,
    pub params: BTreeMap<String, Tensor<f64>>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TagMetrics {
    pub count: usize,
    pub correct: usize,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub count: usize,
    pub correct: usize,
    pub accuracy: f64,
    pub per_tag: BTreeMap<PerturbationTag, TagMetrics>,
    /// `confusion[label][predicted]`.
    pub confusion: Vec<Vec<usize>>,
}

impl Metrics {
    pub fn tag_accuracy(&self, tag: PerturbationTag) -> Option<f64> {
        self.per_tag.get(&tag).map(|m| m.accuracy)
    }
}

/// Accuracy metrics from `(label, prediction, tag)` triples.
pub fn metrics_from_predictions(
    outcomes: &[(usize, usize, PerturbationTag)],
    num_classes: usize,
) -> Result<Metrics> {
    if outcomes.is_empty() {
        return Err(Error::Domain("cannot evaluate an empty dataset".into()));
    }
    let mut confusion = vec![vec![0; num_classes]; num_classes];
    let mut per_tag: BTreeMap<PerturbationTag, TagMetrics> = BTreeMap::new();
    let mut correct = 0;
    for &(label, pred, tag) in outcomes {
        if label >= num_classes || pred >= num_classes {
            return Err(Error::Domain(format!(
                "label {label} / prediction {pred} outside {num_classes} classes"
            )));
        }
        confusion[label][pred] += 1;
        let entry = per_tag.entry(tag).or_default();
        entry.count += 1;
        if label == pred {
            entry.correct += 1;
            correct += 1;
        }
    }
    for m in per_tag.values_mut() {
        m.accuracy = m.correct as f64 / m.count as f64;
    }
    Ok(Metrics {
        count: outcomes.len(),
        correct,
        accuracy: correct as f64 / outcomes.len() as f64,
        per_tag,
        confusion,
    })
}

pub fn evaluate<T: Scalar>(dataset: &[PairExample], model: &Model<T>) -> Result<Metrics> {
    let outcomes = dataset
        .iter()
        .map(|ex| Ok((ex.label, model.predict(ex)?, ex.tag)))
        .collect::<Result<Vec<_>>>()?;
    metrics_from_predictions(&outcomes, model.config.matcher.num_classes)
}
