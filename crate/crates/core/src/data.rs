//! Sentence-pair examples, the JSONL dataset format and the synthetic
//! fine-grained-difference generator.
//!
//! The generator builds a source sentence `q` from four token roles
//! (content words, numbers, antonym-pair members, filler) and derives `p`:
//!
//! - positive (label 1): `q` with a few filler tokens swapped for other
//!   filler tokens, at least 80% of positions unchanged;
//! - `swap_num` (label 0): a positive rewrite with one number replaced;
//! - `swap_ant` (label 0): a positive rewrite with one antonym replaced by
//!   its partner;
//! - `overlap_high` (label 0): a positive rewrite with one content word
//!   replaced by another content word;
//! - random negative (label 0, tag `none`): an unrelated sentence.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: &str = "[PAD]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbationTag {
    #[default]
    None,
    SwapNum,
    SwapAnt,
    OverlapHigh,
}

impl PerturbationTag {
    pub const ALL: [PerturbationTag; 4] = [
        PerturbationTag::None,
        PerturbationTag::SwapNum,
        PerturbationTag::SwapAnt,
        PerturbationTag::OverlapHigh,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PerturbationTag::None => "none",
            PerturbationTag::SwapNum => "swap_num",
            PerturbationTag::SwapAnt => "swap_ant",
            PerturbationTag::OverlapHigh => "overlap_high",
        }
    }
}

impl fmt::Display for PerturbationTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PerturbationTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PerturbationTag::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::Input(format!("unknown perturbation tag {s:?}")))
    }
}

/// A `(q, p, label)` triple with its perturbation tag.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PairExample {
    pub tokens_q: Vec<usize>,
    pub tokens_p: Vec<usize>,
    pub label: usize,
    pub tag: PerturbationTag,
}

impl PairExample {
    /// Same pair with `q` and `p` exchanged.
    pub fn swapped(&self) -> Self {
        PairExample {
            tokens_q: self.tokens_p.clone(),
            tokens_p: self.tokens_q.clone(),
            ..self.clone()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Special,
    Content,
    Number,
    /// Member of antonym pair `pair`; its partner is `id ^ 1` relative to
    /// the pair base.
    Antonym { pair: usize },
    Filler,
}

/// Token strings and their roles. Ids are assigned in a fixed order:
/// specials, content, numbers, antonyms (pairwise adjacent), filler.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    words: Vec<String>,
    roles: Vec<Role>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn from_words(words: Vec<String>, roles: Vec<Role>) -> Result<Self> {
        if words.len() != roles.len() {
            return Err(Error::Input("vocab words and roles differ in length".into()));
        }
        let mut index = HashMap::with_capacity(words.len());
        for (i, w) in words.iter().enumerate() {
            if index.insert(w.clone(), i).is_some() {
                return Err(Error::Input(format!("duplicate vocab entry {w:?}")));
            }
        }
        for special in [PAD, CLS, SEP] {
            if !index.contains_key(special) {
                return Err(Error::Input(format!("vocab lacks {special}")));
            }
        }
        Ok(Vocab {
            words,
            roles,
            index,
        })
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.words.get(id).map(String::as_str)
    }

    pub fn role(&self, id: usize) -> Option<Role> {
        self.roles.get(id).copied()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn roles(&self) -> &[Role] {
        &self.roles
    }

    pub fn pad(&self) -> usize {
        self.index[PAD]
    }

    pub fn cls(&self) -> usize {
        self.index[CLS]
    }

    pub fn sep(&self) -> usize {
        self.index[SEP]
    }

    /// Maps whitespace-separated words to ids.
    pub fn encode_words(&self, text: &str) -> Result<Vec<usize>> {
        text.split_whitespace()
            .map(|w| {
                self.id(w)
                    .ok_or_else(|| Error::Input(format!("unknown token {w:?}")))
            })
            .collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .map(|&i| self.word(i).map_or_else(|| format!("#{i}"), str::to_owned))
            .collect()
    }
}

/// Relative weights of the negative constructions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PerturbationMix {
    pub swap_num: f64,
    pub swap_ant: f64,
    pub overlap_high: f64,
    pub random_neg: f64,
}

impl Default for PerturbationMix {
    fn default() -> Self {
        PerturbationMix {
            swap_num: 0.3,
            swap_ant: 0.3,
            overlap_high: 0.2,
            random_neg: 0.2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum NegativeKind {
    SwapNum,
    SwapAnt,
    OverlapHigh,
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_examples: usize,
    pub content_words: usize,
    pub numbers: usize,
    pub antonym_pairs: usize,
    pub filler_words: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Fraction of label-1 examples.
    pub positive_fraction: f64,
    pub perturbations: PerturbationMix,
    /// Upper bound on the fraction of positions a positive rewrite changes.
    pub max_filler_substitution: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            num_examples: 1000,
            content_words: 30,
            numbers: 12,
            antonym_pairs: 8,
            filler_words: 8,
            min_len: 5,
            max_len: 8,
            positive_fraction: 0.5,
            perturbations: PerturbationMix::default(),
            max_filler_substitution: 0.2,
            seed: 7,
        }
    }
}

const MIN_SLOTS: usize = 4;

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let cfg = |msg: String| Err(Error::Config(msg));
        if self.content_words < 2 {
            return cfg(format!("need ≥2 content words, got {}", self.content_words));
        }
        if self.numbers < 2 {
            return cfg(format!("need ≥2 numbers, got {}", self.numbers));
        }
        if self.antonym_pairs < 1 {
            return cfg("need ≥1 antonym pair".into());
        }
        if self.filler_words < 2 {
            return cfg(format!("need ≥2 filler words, got {}", self.filler_words));
        }
        if self.min_len < MIN_SLOTS {
            return cfg(format!(
                "min_len {} cannot hold one token of each role ({MIN_SLOTS})",
                self.min_len
            ));
        }
        if self.max_len < self.min_len {
            return cfg(format!("max_len {} < min_len {}", self.max_len, self.min_len));
        }
        if !(0.0..=1.0).contains(&self.positive_fraction) {
            return cfg(format!("positive_fraction {} not in [0, 1]", self.positive_fraction));
        }
        if !(0.0..=1.0).contains(&self.max_filler_substitution) {
            return cfg("max_filler_substitution must be in [0, 1]".into());
        }
        let mix = &self.perturbations;
        let weights = [mix.swap_num, mix.swap_ant, mix.overlap_high, mix.random_neg];
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return cfg("perturbation weights must be non-negative".into());
        }
        if self.positive_fraction < 1.0 && weights.iter().sum::<f64>() <= 0.0 {
            return cfg("negatives requested but every perturbation weight is 0".into());
        }
        Ok(())
    }

    /// The vocabulary implied by the role sizes.
    pub fn vocab(&self) -> Vocab {
        let mut words = vec![PAD.to_owned(), CLS.to_owned(), SEP.to_owned()];
        let mut roles = vec![Role::Special; 3];
        for i in 0..self.content_words {
            words.push(format!("w{i}"));
            roles.push(Role::Content);
        }
        for i in 0..self.numbers {
            words.push(format!("{i}"));
            roles.push(Role::Number);
        }
        for i in 0..self.antonym_pairs {
            words.push(format!("a{i}+"));
            words.push(format!("a{i}-"));
            roles.push(Role::Antonym { pair: i });
            roles.push(Role::Antonym { pair: i });
        }
        for i in 0..self.filler_words {
            words.push(format!("f{i}"));
            roles.push(Role::Filler);
        }
        Vocab::from_words(words, roles).expect("generated vocab is well formed")
    }
}

struct Ranges {
    content: std::ops::Range<usize>,
    number: std::ops::Range<usize>,
    antonym: std::ops::Range<usize>,
    filler: std::ops::Range<usize>,
}

impl Ranges {
    fn new(spec: &SyntheticSpec) -> Self {
        let c0 = 3;
        let n0 = c0 + spec.content_words;
        let a0 = n0 + spec.numbers;
        let f0 = a0 + 2 * spec.antonym_pairs;
        Ranges {
            content: c0..n0,
            number: n0..a0,
            antonym: a0..f0,
            filler: f0..f0 + spec.filler_words,
        }
    }

    fn partner(&self, id: usize) -> usize {
        let base = self.antonym.start;
        base + ((id - base) ^ 1)
    }
}

/// Draws a token from `range` different from `avoid`.
fn other_in<R: Rng>(rng: &mut R, range: &std::ops::Range<usize>, avoid: usize) -> usize {
    loop {
        let t = rng.gen_range(range.clone());
        if t != avoid {
            return t;
        }
    }
}

fn sentence<R: Rng>(rng: &mut R, spec: &SyntheticSpec, ranges: &Ranges) -> Vec<usize> {
    let len = rng.gen_range(spec.min_len..=spec.max_len);
    let mut roles: Vec<u8> = vec![0, 1, 2, 3];
    while roles.len() < len {
        // content-heavy, then filler, numbers, antonyms
        let r = match rng.gen_range(0..10) {
            0..=3 => 0,
            4..=6 => 3,
            7 => 1,
            _ => 2,
        };
        roles.push(r);
    }
    roles.shuffle(rng);
    roles
        .into_iter()
        .map(|r| match r {
            0 => rng.gen_range(ranges.content.clone()),
            1 => rng.gen_range(ranges.number.clone()),
            2 => rng.gen_range(ranges.antonym.clone()),
            _ => rng.gen_range(ranges.filler.clone()),
        })
        .collect()
}

fn positions_in(tokens: &[usize], range: &std::ops::Range<usize>) -> Vec<usize> {
    tokens
        .iter()
        .enumerate()
        .filter(|(_, t)| range.contains(t))
        .map(|(i, _)| i)
        .collect()
}

fn paraphrase<R: Rng>(
    rng: &mut R,
    q: &[usize],
    spec: &SyntheticSpec,
    ranges: &Ranges,
) -> Vec<usize> {
    let mut p = q.to_vec();
    let mut fillers = positions_in(q, &ranges.filler);
    let budget = ((spec.max_filler_substitution * q.len() as f64).floor() as usize).min(fillers.len());
    let count = rng.gen_range(0..=budget);
    fillers.shuffle(rng);
    for &pos in &fillers[..count] {
        p[pos] = other_in(rng, &ranges.filler, q[pos]);
    }
    p
}

fn content_signature(tokens: &[usize], ranges: &Ranges) -> Vec<Option<usize>> {
    tokens
        .iter()
        .map(|t| (!ranges.filler.contains(t)).then_some(*t))
        .collect()
}

fn pick_negative<R: Rng>(rng: &mut R, mix: &PerturbationMix) -> NegativeKind {
    let weights = [mix.swap_num, mix.swap_ant, mix.overlap_high, mix.random_neg];
    let total: f64 = weights.iter().sum();
    let mut x = rng.gen_range(0.0..total);
    let kinds = [
        NegativeKind::SwapNum,
        NegativeKind::SwapAnt,
        NegativeKind::OverlapHigh,
        NegativeKind::Random,
    ];
    for (k, w) in kinds.into_iter().zip(weights) {
        if x < w {
            return k;
        }
        x -= w;
    }
    NegativeKind::Random
}

/// Example `index` of the dataset described by `spec`; each example has its
/// own ChaCha stream, so examples can be generated independently.
pub fn generate_one(spec: &SyntheticSpec, index: usize) -> PairExample {
    let ranges = Ranges::new(spec);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64);

    let q = sentence(&mut rng, spec, &ranges);
    let positive = rng.gen_bool(spec.positive_fraction);
    let p0 = paraphrase(&mut rng, &q, spec, &ranges);
    if positive {
        return PairExample {
            tokens_q: q,
            tokens_p: p0,
            label: 1,
            tag: PerturbationTag::None,
        };
    }
    let mut p = p0;
    let tag = match pick_negative(&mut rng, &spec.perturbations) {
        NegativeKind::SwapNum => {
            let slots = positions_in(&p, &ranges.number);
            let pos = *slots.choose(&mut rng).expect("sentence holds a number");
            p[pos] = other_in(&mut rng, &ranges.number, p[pos]);
            PerturbationTag::SwapNum
        }
        NegativeKind::SwapAnt => {
            let slots = positions_in(&p, &ranges.antonym);
            let pos = *slots.choose(&mut rng).expect("sentence holds an antonym");
            p[pos] = ranges.partner(p[pos]);
            PerturbationTag::SwapAnt
        }
        NegativeKind::OverlapHigh => {
            let slots = positions_in(&p, &ranges.content);
            let pos = *slots.choose(&mut rng).expect("sentence holds a content word");
            p[pos] = other_in(&mut rng, &ranges.content, p[pos]);
            PerturbationTag::OverlapHigh
        }
        NegativeKind::Random => {
            let source = content_signature(&q, &ranges);
            loop {
                let candidate = sentence(&mut rng, spec, &ranges);
                if content_signature(&candidate, &ranges) != source {
                    p = candidate;
                    break;
                }
            }
            PerturbationTag::None
        }
    };
    PairExample {
        tokens_q: q,
        tokens_p: p,
        label: 0,
        tag,
    }
}

pub fn generate(spec: &SyntheticSpec) -> Result<Vec<PairExample>> {
    spec.validate()?;
    Ok((0..spec.num_examples).map(|i| generate_one(spec, i)).collect())
}

/// Token reference in the JSONL format: an id or a vocab word.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TokenRef {
    Id(usize),
    Word(String),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JsonExample {
    pub q: Vec<TokenRef>,
    pub p: Vec<TokenRef>,
    pub label: usize,
    #[serde(default)]
    pub tag: PerturbationTag,
}

fn resolve_tokens(tokens: &[TokenRef], vocab: &Vocab) -> Result<Vec<usize>> {
    tokens
        .iter()
        .map(|t| match t {
            TokenRef::Id(id) if *id < vocab.len() => Ok(*id),
            TokenRef::Id(id) => Err(Error::Input(format!(
                "token id {id} outside vocab of {}",
                vocab.len()
            ))),
            TokenRef::Word(w) => vocab
                .id(w)
                .ok_or_else(|| Error::Input(format!("unknown token {w:?}"))),
        })
        .collect()
}

/// Writes one JSON object per line, tokens as vocab words.
pub fn write_jsonl<W: Write>(mut out: W, examples: &[PairExample], vocab: &Vocab) -> Result<()> {
    for ex in examples {
        let record = JsonExample {
            q: vocab.decode(&ex.tokens_q).into_iter().map(TokenRef::Word).collect(),
            p: vocab.decode(&ex.tokens_p).into_iter().map(TokenRef::Word).collect(),
            label: ex.label,
            tag: ex.tag,
        };
        serde_json::to_writer(&mut out, &record)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_jsonl<R: BufRead>(input: R, vocab: &Vocab) -> Result<Vec<PairExample>> {
    let mut examples = Vec::new();
    for (lineno, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: JsonExample = serde_json::from_str(&line)
            .map_err(|e| Error::Input(format!("line {}: {e}", lineno + 1)))?;
        examples.push(PairExample {
            tokens_q: resolve_tokens(&record.q, vocab)?,
            tokens_p: resolve_tokens(&record.p, vocab)?,
            label: record.label,
            tag: record.tag,
        });
    }
    Ok(examples)
}

pub fn save_jsonl(path: &Path, examples: &[PairExample], vocab: &Vocab) -> Result<()> {
    let file = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_jsonl(file, examples, vocab)
}

pub fn load_jsonl(path: &Path, vocab: &Vocab) -> Result<Vec<PairExample>> {
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    read_jsonl(file, vocab)
}

/// Counts per label and per tag.
pub fn summarize(examples: &[PairExample]) -> (BTreeMap<usize, usize>, BTreeMap<PerturbationTag, usize>) {
    let mut labels = BTreeMap::new();
    let mut tags = BTreeMap::new();
    for ex in examples {
        *labels.entry(ex.label).or_default() += 1;
        *tags.entry(ex.tag).or_default() += 1;
    }
    (labels, tags)
}

/// Splits off the last `dev_fraction` and `test_fraction` of `examples`.
pub fn split(
    examples: &[PairExample],
    dev_fraction: f64,
    test_fraction: f64,
) -> (Vec<PairExample>, Vec<PairExample>, Vec<PairExample>) {
    let n = examples.len();
    let n_test = (test_fraction * n as f64).round() as usize;
    let n_dev = ((dev_fraction * n as f64).round() as usize).min(n - n_test);
    let n_train = n - n_dev - n_test;
    (
        examples[..n_train].to_vec(),
        examples[n_train..n_train + n_dev].to_vec(),
        examples[n_train + n_dev..].to_vec(),
    )
}
