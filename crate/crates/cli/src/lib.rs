//! Subcommand implementations for the `comate` binary.
//!
//! Every command writes human-readable output to the supplied sink and
//! returns a structured value, so the same code serves the binary and the
//! tests.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use comate_core::config::RunConfig;
use comate_core::data::{self, PairExample, PerturbationTag, SyntheticSpec, Vocab};
use comate_core::diagnostics::{gradient_suite, ComponentCheck};
use comate_core::graph::Graph;
use comate_core::matcher::{evaluate, EncodingMode, Metrics, Model};
use comate_core::tensor::Tensor;
use comate_core::train::{self, AblationTable, TrainReport};
use serde::{Deserialize, Serialize};

pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const REPORT_FILE: &str = "report.json";
pub const ABLATION_JSON: &str = "ablation.json";
pub const ABLATION_TSV: &str = "ablation.tsv";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] comate_core::Error),
    #[error("check failed: {0}")]
    Check(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Core(comate_core::Error::Usage(_)) => 1,
            CliError::Core(_) => 2,
            CliError::Check(_) => 3,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(e.into())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Core(e.into())
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

/// Loads and resolves a run config; `None` gives the defaults.
pub fn load_config(path: Option<&Path>) -> CliResult<RunConfig> {
    let cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    Ok(cfg.resolve()?)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn load_examples(cfg: &RunConfig, data: Option<&Path>) -> CliResult<Vec<PairExample>> {
    match data {
        Some(path) => Ok(data::load_jsonl(path, &cfg.data.vocab())?),
        None => Ok(data::generate(&cfg.data)?),
    }
}

fn print_counts(out: &mut dyn Write, examples: &[PairExample]) -> CliResult<()> {
    let (labels, tags) = data::summarize(examples);
    writeln!(out, "examples: {}", examples.len())?;
    for (label, n) in &labels {
        writeln!(out, "label {label}: {n}")?;
    }
    for (tag, n) in &tags {
        writeln!(out, "tag {tag}: {n}")?;
    }
    Ok(())
}

/// `generate --spec FILE --out FILE`
pub fn cmd_generate(spec: Option<&Path>, out_path: &Path, out: &mut dyn Write) -> CliResult<Vec<PairExample>> {
    let spec: SyntheticSpec = match spec {
        Some(p) => serde_json::from_str(&fs::read_to_string(p)?)
            .map_err(|e| comate_core::Error::Config(format!("synthetic spec: {e}")))?,
        None => SyntheticSpec::default(),
    };
    let examples = data::generate(&spec)?;
    data::save_jsonl(out_path, &examples, &spec.vocab())?;
    print_counts(out, &examples)?;
    writeln!(out, "wrote {}", out_path.display())?;
    Ok(examples)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub dev: usize,
    pub test: usize,
}

/// Contents of `report.json`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunReport {
    pub config: RunConfig,
    pub split: SplitSizes,
    pub train: TrainReport,
    pub dev: Metrics,
    pub test: Option<Metrics>,
}

/// `train --config FILE [--data FILE] --out DIR [--seed N]`
pub fn cmd_train(
    config: Option<&Path>,
    data_path: Option<&Path>,
    out_dir: &Path,
    seed: Option<u64>,
    out: &mut dyn Write,
) -> CliResult<RunReport> {
    let mut cfg = load_config(config)?;
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    let examples = load_examples(&cfg, data_path)?;
    let (tr, dev, test) = data::split(&examples, cfg.train.dev_fraction, cfg.train.test_fraction);
    fs::create_dir_all(out_dir)?;
    let ckpt = out_dir.join(CHECKPOINT_FILE);
    let mut train_cfg = cfg.train.clone();
    train_cfg.checkpoint_path = Some(ckpt.clone());

    let mut model: Model<f64> = Model::new(cfg.model_config(), cfg.data.vocab(), cfg.train.seed)?;
    let report = train::train(&mut model, &tr, &dev, &train_cfg)?;
    if report.epochs.is_empty() {
        model.save(&ckpt)?;
    }
    let dev_metrics = evaluate(&dev, &model)?;
    let test_metrics = if test.is_empty() {
        None
    } else {
        Some(evaluate(&test, &model)?)
    };
    for e in &report.epochs {
        writeln!(out, "epoch {:>3}  loss {:.5}  dev_acc {:.4}", e.epoch, e.mean_loss, e.dev_accuracy)?;
    }
    writeln!(out, "best epoch {} dev_acc {:.4}", report.best_epoch, dev_metrics.accuracy)?;
    if let Some(m) = &test_metrics {
        print_metrics(out, "test", m)?;
    }
    let run = RunReport {
        config: cfg,
        split: SplitSizes {
            train: tr.len(),
            dev: dev.len(),
            test: test.len(),
        },
        train: report,
        dev: dev_metrics,
        test: test_metrics,
    };
    write_json(&out_dir.join(REPORT_FILE), &run)?;
    writeln!(out, "wrote {} and {}", ckpt.display(), out_dir.join(REPORT_FILE).display())?;
    Ok(run)
}

fn print_metrics(out: &mut dyn Write, label: &str, m: &Metrics) -> CliResult<()> {
    writeln!(out, "{label} accuracy {:.4} ({}/{})", m.accuracy, m.correct, m.count)?;
    for (tag, t) in &m.per_tag {
        writeln!(out, "  {:<13}{:.4} ({}/{})", tag.as_str(), t.accuracy, t.correct, t.count)?;
    }
    Ok(())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub metrics: Metrics,
    pub baseline: Option<Metrics>,
    /// Per-tag `accuracy − baseline accuracy`.
    pub tag_deltas: BTreeMap<PerturbationTag, f64>,
    pub overall_delta: Option<f64>,
}

/// `eval --checkpoint FILE --data FILE [--baseline FILE]`
pub fn cmd_eval(
    checkpoint: &Path,
    data_path: &Path,
    baseline: Option<&Path>,
    out: &mut dyn Write,
) -> CliResult<EvalReport> {
    let model: Model<f64> = Model::load(checkpoint)?;
    let examples = data::load_jsonl(data_path, &model.vocab)?;
    let metrics = evaluate(&examples, &model)?;
    print_metrics(out, "model", &metrics)?;
    let mut report = EvalReport {
        metrics,
        baseline: None,
        tag_deltas: BTreeMap::new(),
        overall_delta: None,
    };
    if let Some(path) = baseline {
        let base: Model<f64> = Model::load(path)?;
        let base_examples = data::load_jsonl(data_path, &base.vocab)?;
        let bm = evaluate(&base_examples, &base)?;
        print_metrics(out, "baseline", &bm)?;
        writeln!(out, "delta (model - baseline)")?;
        let overall = report.metrics.accuracy - bm.accuracy;
        writeln!(out, "  {:<13}{:+.4}", "overall", overall)?;
        for (tag, t) in &report.metrics.per_tag {
            if let Some(b) = bm.per_tag.get(tag) {
                let d = t.accuracy - b.accuracy;
                writeln!(out, "  {:<13}{:+.4}", tag.as_str(), d)?;
                report.tag_deltas.insert(*tag, d);
            }
        }
        report.overall_delta = Some(overall);
        report.baseline = Some(bm);
    }
    Ok(report)
}

/// `gradcheck [--config FILE] [--seed N]`; errors with [`CliError::Check`]
/// when any component exceeds the tolerance.
pub fn cmd_gradcheck(config: Option<&Path>, seed: u64, out: &mut dyn Write) -> CliResult<Vec<ComponentCheck>> {
    let cfg = load_config(config)?;
    let checks = gradient_suite(&cfg.model_config(), &cfg.data, seed)?;
    writeln!(out, "{:<42}{:>12}{:>9}{:>6}{:>9}  result", "component", "max_rel_err", "checked", "kink", "zero")?;
    for c in &checks {
        writeln!(
            out,
            "{:<42}{:>12.3e}{:>9}{:>6}{:>9}  {}",
            c.component,
            c.max_rel_error,
            c.checked,
            c.excluded,
            c.zero,
            if c.passed { "pass" } else { "FAIL" }
        )?;
    }
    let failed: Vec<&str> = checks.iter().filter(|c| !c.passed).map(|c| c.component.as_str()).collect();
    if failed.is_empty() {
        writeln!(out, "all {} components pass", checks.len())?;
        Ok(checks)
    } else {
        Err(CliError::Check(format!("gradient check failed for {}", failed.join(", "))))
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationReport {
    pub config: RunConfig,
    pub split: SplitSizes,
    pub table: AblationTable,
    pub family_means: BTreeMap<String, f64>,
}

/// `ablate --config FILE [--data FILE] --out DIR`
pub fn cmd_ablate(
    config: Option<&Path>,
    data_path: Option<&Path>,
    out_dir: &Path,
    out: &mut dyn Write,
) -> CliResult<AblationReport> {
    let cfg = load_config(config)?;
    let examples = load_examples(&cfg, data_path)?;
    let (tr, dev, test) = data::split(&examples, cfg.train.dev_fraction, cfg.train.test_fraction);
    if test.is_empty() {
        return Err(comate_core::Error::Config("ablation needs a non-empty test split".into()).into());
    }
    let table = train::ablate::<f64>(&cfg.model_config(), &cfg.data.vocab(), &cfg.train, &tr, &dev, &test)?;
    let tsv = table.to_tsv();
    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join(ABLATION_TSV), &tsv)?;
    let report = AblationReport {
        config: cfg,
        split: SplitSizes {
            train: tr.len(),
            dev: dev.len(),
            test: test.len(),
        },
        family_means: table.family_means(),
        table,
    };
    write_json(&out_dir.join(ABLATION_JSON), &report)?;
    write!(out, "{tsv}")?;
    for (family, mean) in &report.family_means {
        writeln!(out, "family {family:<16} mean test_acc {mean:.4}")?;
    }
    Ok(report)
}

/// Contents of an attention export file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionExport {
    pub tokens_q: Vec<String>,
    pub tokens_p: Vec<String>,
    /// `E` as fed to the affinity squash.
    pub affinity: Vec<Vec<f64>>,
    /// `N` after normalisation, as fed to the gate.
    pub difference: Vec<Vec<f64>>,
    pub combined: Vec<Vec<f64>>,
    pub layer: usize,
    pub head: usize,
    pub composition: String,
    pub norm_variant: String,
}

fn parse_pair(vocab: &Vocab, pair: &str) -> CliResult<PairExample> {
    let (q, p) = pair
        .split_once('|')
        .ok_or_else(|| CliError::Usage(format!("--pair must look like \"q words|p words\", got {pair:?}")))?;
    let tokens_q = vocab.encode_words(q)?;
    let tokens_p = vocab.encode_words(p)?;
    if tokens_q.is_empty() || tokens_p.is_empty() {
        return Err(CliError::Usage("--pair needs tokens on both sides of '|'".into()));
    }
    Ok(PairExample {
        tokens_q,
        tokens_p,
        label: 0,
        tag: PerturbationTag::None,
    })
}

fn block(t: &Tensor<f64>, rows: std::ops::Range<usize>, cols: std::ops::Range<usize>) -> Vec<Vec<f64>> {
    rows.map(|i| cols.clone().map(|j| t.get(i, j)).collect()).collect()
}

/// `export-attention --checkpoint FILE --pair "q|p" --layer L --head H --out FILE`
///
/// Layers are 0-based. In cross mode the exported matrices are the q-rows ×
/// p-columns block of the chosen self-attention head. In siamese mode only
/// the interaction layer exists (`layer = num_layers`, `head = 0`).
pub fn cmd_export_attention(
    checkpoint: &Path,
    pair: &str,
    layer: usize,
    head: usize,
    out_path: &Path,
    out: &mut dyn Write,
) -> CliResult<AttentionExport> {
    let model: Model<f64> = Model::load(checkpoint)?;
    let example = parse_pair(&model.vocab, pair)?;
    let cfg = &model.config;
    let layers = cfg.encoder.num_layers;
    let heads = cfg.encoder.attention.num_heads;
    let mut g = Graph::new();
    let bound = model.store.bind_frozen(&mut g);
    let fwd = model.forward(&mut g, &bound, &example)?;
    let (trace, rows, cols) = match cfg.matcher.encoding {
        EncodingMode::Cross => {
            if layer >= layers || head >= heads {
                return Err(CliError::Usage(format!(
                    "layer {layer} head {head} out of range: valid layers 0..={}, heads 0..={}",
                    layers - 1,
                    heads - 1
                )));
            }
            let trace = fwd.encodings[0].traces[layer][head].ok_or_else(|| {
                CliError::Usage(format!(
                    "layer {layer} head {head} is a softmax head and has no difference matrix; \
                     combined heads in this layer: 0..{}",
                    cfg.encoder.combined_heads(layer)
                ))
            })?;
            (trace, fwd.q_span.clone(), fwd.p_span.clone())
        }
        EncodingMode::Siamese => {
            if layer != layers || head != 0 {
                return Err(CliError::Usage(format!(
                    "siamese models export only the interaction layer: use --layer {layers} --head 0"
                )));
            }
            let trace = fwd.interaction.expect("siamese forward has an interaction trace");
            (trace, fwd.q_span.clone(), fwd.p_span.clone())
        }
    };
    let t = trace.materialize(&g);
    let export = AttentionExport {
        tokens_q: model.vocab.decode(&example.tokens_q),
        tokens_p: model.vocab.decode(&example.tokens_p),
        affinity: block(&t.e_used, rows.clone(), cols.clone()),
        difference: block(&t.n_norm, rows.clone(), cols.clone()),
        combined: block(&t.m, rows, cols),
        layer,
        head,
        composition: cfg.encoder.attention.composition.name(),
        norm_variant: serde_json::to_value(cfg.encoder.attention.norm_variant)?
            .as_str()
            .unwrap_or_default()
            .to_owned(),
    };
    write_json(out_path, &export)?;
    writeln!(
        out,
        "wrote {}×{} matrices for layer {layer} head {head} to {}",
        export.tokens_q.len(),
        export.tokens_p.len(),
        out_path.display()
    )?;
    Ok(export)
}

pub fn checkpoint_in(dir: &Path) -> PathBuf {
    dir.join(CHECKPOINT_FILE)
}
