//! Run configuration, artifact persistence and the `smdt` command dispatcher.

use std::collections::HashSet;
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::de::{self, DeserializeSeed, MapAccess, SeqAccess, Visitor};
use serde::{Deserialize, Deserializer, Serialize};

use crate::corpus::{
    encode_corpus, ingest_parallel_corpus, learn_subwords, parse_doc_map, Corpus, RawCorpus, Split, TokenId,
    Vocabulary, DEFAULT_TRUNCATION_LIMIT, NUM_RESERVED,
};
use crate::error::{Result, SmdtError};
use crate::inference::{bleu_lines, translate_layout, DecodeConfig};
use crate::layout::{build_mask_set, mask_json, HeadAllocation, InstanceLayout};
use crate::model::{Model, ModelConfig, Probes};
use crate::parallel::Execution;
use crate::retrieval::{Query, TmIndex, DEFAULT_B, DEFAULT_K1};
use crate::training::{train_with_index, EvalRecord, TrainConfig};

pub const VOCAB_FILE: &str = "vocab.json";
pub const INDEX_FILE: &str = "index.bin";
pub const CONFIG_FILE: &str = "config.json";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const TRAIN_LOG_FILE: &str = "train_log.jsonl";

/// Everything a pipeline run needs, as one flat JSON object. Relative paths
/// resolve against the directory of the config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Must match the vocabulary when given; otherwise taken from it.
    pub vocab_size: Option<usize>,
    pub d_model: usize,
    pub d_ff: usize,
    pub num_heads: usize,
    pub num_layers: usize,
    pub two_stream_top_layers: usize,
    pub head_allocation: HeadAllocation,
    pub dropout: f64,
    pub label_smoothing: f64,
    pub adjacent_window: usize,

    pub lr: f64,
    pub warmup: usize,
    pub patience: usize,
    pub eval_interval: usize,
    pub sentence_task_ratio: f64,
    pub seed: u64,
    pub max_steps: usize,
    pub batch_size: f64,
    pub stop_at_accuracy: Option<f64>,
    pub clip_norm: Option<f64>,

    pub k1: f64,
    pub b: f64,
    /// Queries are lines of the indexed corpus; skip each line's own entry.
    pub exclude_self: bool,

    pub beam: usize,
    pub max_len_factor: f64,
    pub length_penalty: f64,
    pub smoothing: bool,

    pub num_merges: usize,
    pub truncation_limit: usize,

    pub train_src: Option<PathBuf>,
    pub train_tgt: Option<PathBuf>,
    pub train_doc_map: Option<PathBuf>,
    pub valid_src: Option<PathBuf>,
    pub valid_tgt: Option<PathBuf>,
    pub valid_doc_map: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
    pub index: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        let t = TrainConfig::default();
        let d = DecodeConfig::default();
        RunConfig {
            vocab_size: None,
            d_model: m.d_model,
            d_ff: m.d_ff,
            num_heads: m.num_heads,
            num_layers: m.num_layers,
            two_stream_top_layers: m.two_stream_top_layers,
            head_allocation: m.head_allocation,
            dropout: m.dropout,
            label_smoothing: m.label_smoothing,
            adjacent_window: m.adjacent_window,
            lr: t.lr,
            warmup: t.warmup,
            patience: t.patience,
            eval_interval: t.eval_interval,
            sentence_task_ratio: t.sentence_task_ratio,
            seed: t.seed,
            max_steps: t.max_steps,
            batch_size: t.batch_size,
            stop_at_accuracy: t.stop_at_accuracy,
            clip_norm: t.clip_norm,
            k1: DEFAULT_K1,
            b: DEFAULT_B,
            exclude_self: false,
            beam: d.beam,
            max_len_factor: d.max_len_factor,
            length_penalty: d.length_penalty,
            smoothing: false,
            num_merges: 200,
            truncation_limit: DEFAULT_TRUNCATION_LIMIT,
            train_src: None,
            train_tgt: None,
            train_doc_map: None,
            valid_src: None,
            valid_tgt: None,
            valid_doc_map: None,
            vocab: None,
            index: None,
            checkpoint: None,
        }
    }
}

impl RunConfig {
    /// Model shape for a vocabulary of `vocab_len` entries.
    pub fn model_config(&self, vocab_len: usize) -> Result<ModelConfig> {
        if let Some(v) = self.vocab_size {
            if v != vocab_len {
                return Err(SmdtError::Config(format!(
                    "vocab_size {v} does not match the vocabulary ({vocab_len} entries)"
                )));
            }
        }
        let c = ModelConfig {
            vocab_size: vocab_len,
            d_model: self.d_model,
            d_ff: self.d_ff,
            num_heads: self.num_heads,
            num_layers: self.num_layers,
            two_stream_top_layers: self.two_stream_top_layers,
            head_allocation: self.head_allocation,
            dropout: self.dropout,
            label_smoothing: self.label_smoothing,
            adjacent_window: self.adjacent_window,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            warmup: self.warmup,
            patience: self.patience,
            eval_interval: self.eval_interval,
            sentence_task_ratio: self.sentence_task_ratio,
            seed: self.seed,
            max_steps: self.max_steps,
            batch_size: self.batch_size,
            stop_at_accuracy: self.stop_at_accuracy,
            clip_norm: self.clip_norm,
        }
    }

    pub fn decode_config(&self) -> DecodeConfig {
        DecodeConfig {
            beam: self.beam,
            max_len_factor: self.max_len_factor,
            length_penalty: self.length_penalty,
        }
    }

    /// Range checks owned by the model, training, retrieval and decoding.
    pub fn validate(&self) -> Result<()> {
        self.model_config(self.vocab_size.unwrap_or(NUM_RESERVED + 1))?;
        self.train_config().validate()?;
        self.decode_config().validate()?;
        if !(self.k1 >= 0.0 && self.k1.is_finite()) || !(0.0..=1.0).contains(&self.b) {
            return Err(SmdtError::Config(format!(
                "BM25 parameters out of range: k1 {} b {}",
                self.k1, self.b
            )));
        }
        if self.truncation_limit == 0 {
            return Err(SmdtError::Config("truncation_limit must be positive".into()));
        }
        Ok(())
    }

    fn paths_mut(&mut self) -> [&mut Option<PathBuf>; 9] {
        [
            &mut self.train_src,
            &mut self.train_tgt,
            &mut self.train_doc_map,
            &mut self.valid_src,
            &mut self.valid_tgt,
            &mut self.valid_doc_map,
            &mut self.vocab,
            &mut self.index,
            &mut self.checkpoint,
        ]
    }

    /// Rewrites relative paths as `base/path`.
    pub fn resolve_paths(&mut self, base: &Path) {
        for p in self.paths_mut().into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let mut de = serde_json::Deserializer::from_str(text);
        UniqueKeys.deserialize(&mut de).map_err(|e| SmdtError::Config(e.to_string()))?;
        de.end().map_err(|e| SmdtError::Config(e.to_string()))?;
        let config: RunConfig = serde_json::from_str(text).map_err(|e| SmdtError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Reads, validates and path-resolves a config file.
pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| SmdtError::Config(format!("cannot read {}: {e}", path.display())))?;
    let mut config = RunConfig::from_json(&text)?;
    config.resolve_paths(path.parent().unwrap_or(Path::new(".")));
    Ok(config)
}

/// Walks a JSON document and fails on the first repeated object key.
struct UniqueKeys;

impl<'de> DeserializeSeed<'de> for UniqueKeys {
    type Value = ();

    fn deserialize<D: Deserializer<'de>>(self, d: D) -> std::result::Result<(), D::Error> {
        d.deserialize_any(self)
    }
}

impl<'de> Visitor<'de> for UniqueKeys {
    type Value = ();

    fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
        f.write_str("a JSON value")
    }

    fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> std::result::Result<(), A::Error> {
        let mut seen = HashSet::new();
        while let Some(key) = map.next_key::<String>()? {
            if !seen.insert(key.clone()) {
                return Err(de::Error::custom(format!("duplicate key `{key}`")));
            }
            map.next_value_seed(UniqueKeys)?;
        }
        Ok(())
    }

    fn visit_seq<A: SeqAccess<'de>>(self, mut seq: A) -> std::result::Result<(), A::Error> {
        while seq.next_element_seed(UniqueKeys)?.is_some() {}
        Ok(())
    }

    fn visit_bool<E>(self, _: bool) -> std::result::Result<(), E> {
        Ok(())
    }
    fn visit_i64<E>(self, _: i64) -> std::result::Result<(), E> {
        Ok(())
    }
    fn visit_u64<E>(self, _: u64) -> std::result::Result<(), E> {
        Ok(())
    }
    fn visit_f64<E>(self, _: f64) -> std::result::Result<(), E> {
        Ok(())
    }
    fn visit_str<E>(self, _: &str) -> std::result::Result<(), E> {
        Ok(())
    }
    fn visit_unit<E>(self) -> std::result::Result<(), E> {
        Ok(())
    }
}

/// Vocabulary and translation memory produced by `prepare`.
#[derive(Clone, Debug, PartialEq)]
pub struct Artifacts {
    pub vocab: Vocabulary,
    pub index: TmIndex,
}

pub fn save_artifacts(dir: &Path, artifacts: &Artifacts) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    artifacts.vocab.save(&dir.join(VOCAB_FILE))?;
    artifacts.index.save(&dir.join(INDEX_FILE))
}

pub fn load_artifacts(vocab: &Path, index: &Path) -> Result<Artifacts> {
    Ok(Artifacts {
        vocab: Vocabulary::load(vocab)?,
        index: TmIndex::load(index)?,
    })
}

#[derive(Debug, Parser)]
#[command(name = "smdt", version, about = "Document translation with selective translation memory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output file or directory; standard output when omitted where allowed.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Learn a joint subword vocabulary from source and target text.
    BuildVocab {
        #[arg(long)]
        src: Option<PathBuf>,
        #[arg(long)]
        tgt: Option<PathBuf>,
        #[arg(long)]
        merges: Option<usize>,
    },
    /// Index a parallel corpus as translation memory.
    BuildIndex {
        #[arg(long)]
        src: Option<PathBuf>,
        #[arg(long)]
        tgt: Option<PathBuf>,
        #[arg(long)]
        doc_map: Option<PathBuf>,
        #[arg(long)]
        vocab: Option<PathBuf>,
    },
    /// Build vocabulary and index into `--out` and write the effective config there.
    Prepare,
    /// Train a model; writes the checkpoint and JSONL log into `--out`.
    Train,
    /// Translate documents, one output sentence per line.
    Translate {
        #[arg(long)]
        src: PathBuf,
        #[arg(long)]
        doc_map: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        beam: Option<usize>,
    },
    /// Corpus BLEU of line-aligned files as JSON.
    Score {
        #[arg(long)]
        hyp: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        /// Add-one smoothing for orders 2 to 4.
        #[arg(long)]
        smooth: bool,
    },
    /// Mask families of a synthetic layout as JSON.
    DumpMasks {
        /// Source sentence lengths, e.g. `2,3`.
        #[arg(long)]
        doc_sentences: String,
        /// Retrieved `src:tgt` lengths per sentence, e.g. `1:1,2:2`.
        #[arg(long)]
        tm_lengths: String,
        #[arg(long, default_value_t = 1)]
        window: usize,
        /// Include a `0`/`x` picture of every mask.
        #[arg(long)]
        grid: bool,
    },
}

enum Failure {
    Usage(String),
    Data(SmdtError),
}

impl From<SmdtError> for Failure {
    fn from(e: SmdtError) -> Self {
        match e {
            SmdtError::Config(m) => Failure::Usage(m),
            e => Failure::Data(e),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Data(e.into())
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn usage<T>(msg: impl Into<String>) -> CliResult<T> {
    Err(Failure::Usage(msg.into()))
}

fn required(path: Option<PathBuf>, what: &str) -> CliResult<PathBuf> {
    match path {
        Some(p) => Ok(p),
        None => usage(format!("missing {what}: pass it as a flag or set it in --config")),
    }
}

/// Runs one command. `argv[0]` is the program name. Returns the exit status:
/// 0 success, 1 usage error, 2 data error.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(Failure::Usage(m)) => {
            eprintln!("usage error: {m}");
            1
        }
        Err(Failure::Data(e)) => {
            eprintln!("error: {e}");
            2
        }
    }
}

fn dispatch(cli: Cli) -> CliResult<()> {
    let mut config = match &cli.config {
        Some(p) => load_config(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    let needs_config = matches!(cli.command, Command::Prepare | Command::Train);
    if needs_config && cli.config.is_none() {
        return usage("this command requires --config <FILE>");
    }
    if cli.config.is_some() {
        eprintln!("effective config: {}", serde_json::to_string(&config).map_err(SmdtError::from)?);
    }
    match cli.command {
        Command::BuildVocab { src, tgt, merges } => {
            let src = required(src.or(config.train_src.clone()), "--src")?;
            let tgt = required(tgt.or(config.train_tgt.clone()), "--tgt")?;
            let texts = [std::fs::read_to_string(src)?, std::fs::read_to_string(tgt)?];
            let vocab = Vocabulary::learn(texts.iter().flat_map(|t| t.lines()), merges.unwrap_or(config.num_merges))?;
            emit(cli.out.as_deref(), vocab.to_json()?.as_bytes())
        }
        Command::BuildIndex { src, tgt, doc_map, vocab } => {
            let out = required(cli.out, "--out")?;
            let vocab = Vocabulary::load(&required(vocab.or(config.vocab.clone()), "--vocab")?)?;
            let raw = ingest_parallel_corpus(
                &required(src.or(config.train_src.clone()), "--src")?,
                &required(tgt.or(config.train_tgt.clone()), "--tgt")?,
                &required(doc_map.or(config.train_doc_map.clone()), "--doc-map")?,
                Split::Train,
            )?;
            let corpus = encode_corpus(&raw, &vocab)?.truncated(config.truncation_limit);
            TmIndex::build(&corpus, config.k1, config.b)?.save(&out)?;
            Ok(())
        }
        Command::Prepare => {
            let out = required(cli.out, "--out")?;
            prepare(&config, &out)
        }
        Command::Train => {
            let out = required(cli.out, "--out")?;
            train_command(&config, &out)
        }
        Command::Translate {
            src,
            doc_map,
            checkpoint,
            beam,
        } => {
            if let Some(b) = beam {
                config.beam = b;
            }
            config.decode_config().validate()?;
            let checkpoint = required(checkpoint.or(config.checkpoint.clone()), "--checkpoint")?;
            let artifacts = load_artifacts(
                &required(config.vocab.clone(), "vocab path in --config")?,
                &required(config.index.clone(), "index path in --config")?,
            )?;
            let model = Model::load(&checkpoint)?;
            let text = translate_files(&model, &artifacts, &config, &src, &doc_map)?;
            emit(cli.out.as_deref(), text.as_bytes())
        }
        Command::Score { hyp, reference, smooth } => {
            let hyp = std::fs::read_to_string(hyp)?;
            let reference = std::fs::read_to_string(reference)?;
            let report = bleu_lines(&hyp, &reference, smooth || config.smoothing).map_err(|e| match e {
                SmdtError::InvalidArgument(m) => Failure::Data(SmdtError::Corpus(m)),
                e => e.into(),
            })?;
            let mut json = serde_json::to_string_pretty(&report).map_err(SmdtError::from)?;
            json.push('\n');
            emit(cli.out.as_deref(), json.as_bytes())
        }
        Command::DumpMasks {
            doc_sentences,
            tm_lengths,
            window,
            grid,
        } => {
            let layout = synthetic_layout(&doc_sentences, &tm_lengths)?;
            let value = dump_masks(&layout, window, grid)?;
            let mut json = serde_json::to_string_pretty(&value).map_err(SmdtError::from)?;
            json.push('\n');
            emit(cli.out.as_deref(), json.as_bytes())
        }
    }
}

fn emit(out: Option<&Path>, bytes: &[u8]) -> CliResult<()> {
    match out {
        Some(p) => std::fs::write(p, bytes)?,
        None => std::io::stdout().write_all(bytes)?,
    }
    Ok(())
}

fn read_corpus(config: &RunConfig, vocab: &Vocabulary, split: Split) -> CliResult<Corpus> {
    let (src, tgt, map, what) = match split {
        Split::Valid => (&config.valid_src, &config.valid_tgt, &config.valid_doc_map, "valid"),
        _ => (&config.train_src, &config.train_tgt, &config.train_doc_map, "train"),
    };
    let raw = ingest_parallel_corpus(
        &required(src.clone(), &format!("{what}_src"))?,
        &required(tgt.clone(), &format!("{what}_tgt"))?,
        &required(map.clone(), &format!("{what}_doc_map"))?,
        split,
    )?;
    Ok(encode_corpus(&raw, vocab)?.truncated(config.truncation_limit))
}

fn read_raw_train(config: &RunConfig) -> CliResult<RawCorpus> {
    Ok(ingest_parallel_corpus(
        &required(config.train_src.clone(), "train_src")?,
        &required(config.train_tgt.clone(), "train_tgt")?,
        &required(config.train_doc_map.clone(), "train_doc_map")?,
        Split::Train,
    )?)
}

/// Learns the vocabulary, indexes the training corpus and writes both with
/// an effective config pointing at them.
fn prepare(config: &RunConfig, out: &Path) -> CliResult<()> {
    let raw = read_raw_train(config)?;
    let vocab = learn_subwords(&raw, config.num_merges)?;
    let corpus = encode_corpus(&raw, &vocab)?.truncated(config.truncation_limit);
    let index = TmIndex::build(&corpus, config.k1, config.b)?;
    let artifacts = Artifacts { vocab, index };
    save_artifacts(out, &artifacts)?;
    let mut effective = config.clone();
    effective.vocab = Some(std::fs::canonicalize(out.join(VOCAB_FILE))?);
    effective.index = Some(std::fs::canonicalize(out.join(INDEX_FILE))?);
    effective.vocab_size = Some(artifacts.vocab.len());
    std::fs::write(out.join(CONFIG_FILE), effective.to_json()?)?;
    eprintln!(
        "prepared {} documents, {} TM entries, vocabulary of {}",
        corpus.documents.len(),
        artifacts.index.len(),
        artifacts.vocab.len()
    );
    Ok(())
}

fn train_command(config: &RunConfig, out: &Path) -> CliResult<()> {
    let artifacts = load_artifacts(
        &required(config.vocab.clone(), "vocab")?,
        &required(config.index.clone(), "index")?,
    )?;
    let train_corpus = read_corpus(config, &artifacts.vocab, Split::Train)?;
    let valid_corpus = read_corpus(config, &artifacts.vocab, Split::Valid)?;
    let model_config = config.model_config(artifacts.vocab.len())?;
    std::fs::create_dir_all(out)?;
    let mut log = std::fs::File::create(out.join(TRAIN_LOG_FILE))?;
    let mut on_eval = |r: &EvalRecord| -> Result<()> {
        let line = serde_json::to_string(r)?;
        writeln!(log, "{line}")?;
        eprintln!("{line}");
        Ok(())
    };
    let outcome = train_with_index(
        &train_corpus,
        &valid_corpus,
        &artifacts.index,
        &model_config,
        &config.train_config(),
        Execution::default(),
        &mut on_eval,
    )?;
    outcome.model.save(&out.join(CHECKPOINT_FILE))?;
    eprintln!(
        "trained {} steps, best valid loss {:.4}",
        outcome.steps, outcome.best_valid_loss
    );
    Ok(())
}

/// Translates a source file partitioned by a doc map. Output lines follow the
/// input lines.
pub fn translate_files(
    model: &Model,
    artifacts: &Artifacts,
    config: &RunConfig,
    src: &Path,
    doc_map: &Path,
) -> Result<String> {
    let text = std::fs::read_to_string(src)?;
    let lines: Vec<&str> = text.lines().collect();
    let blanks = vec![""; lines.len()];
    let ranges = parse_doc_map(&std::fs::read_to_string(doc_map)?)?;
    let raw = RawCorpus::from_lines(&lines, &blanks, &ranges, Split::Test)?;
    let mut docs: Vec<(usize, Vec<Vec<TokenId>>)> = Vec::new();
    let mut start = 0;
    for d in &raw.documents {
        let sources: Vec<Vec<TokenId>> = d.pairs.iter().map(|p| artifacts.vocab.encode(&p.src)).collect();
        if let Some(i) = sources.iter().position(Vec::is_empty) {
            return Err(SmdtError::Corpus(format!(
                "document `{}` sentence {i} encodes to an empty sequence",
                d.doc_id
            )));
        }
        docs.push((start, sources));
        start += d.pairs.len();
    }
    let decode = config.decode_config();
    let outputs = Execution::default().try_map(&docs, |(first, sources)| -> Result<Vec<String>> {
        let tm: Vec<(Vec<TokenId>, Vec<TokenId>)> = sources
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let global_id = config.exclude_self.then_some(first + i);
                let r = artifacts.index.retrieve(Query { tokens: s, global_id }, config.exclude_self);
                (r.retrieved_src, r.retrieved_tgt)
            })
            .collect();
        let layout = InstanceLayout::from_parts(sources, &tm, Vec::new())?;
        let t = translate_layout(model, &layout, &decode, &Probes::default())?;
        Ok(t.hypothesis.outputs().iter().map(|y| artifacts.vocab.decode(y)).collect())
    })?;
    let mut out = String::new();
    for line in outputs.into_iter().flatten() {
        out.push_str(&line);
        out.push('\n');
    }
    Ok(out)
}

fn parse_list(text: &str, what: &str) -> Result<Vec<usize>> {
    text.split(',')
        .map(|x| {
            x.trim()
                .parse()
                .map_err(|_| SmdtError::Config(format!("{what}: `{x}` is not a length")))
        })
        .collect()
}

/// A layout with placeholder tokens: sentence lengths `2,3` and TM lengths
/// `1:1,2:2`.
pub fn synthetic_layout(doc_sentences: &str, tm_lengths: &str) -> Result<InstanceLayout> {
    let lens = parse_list(doc_sentences, "--doc-sentences")?;
    let tm: Vec<(usize, usize)> = tm_lengths
        .split(',')
        .map(|pair| {
            let (a, b) = pair
                .split_once(':')
                .ok_or_else(|| SmdtError::Config(format!("--tm-lengths: `{pair}` is not `src:tgt`")))?;
            let a = parse_list(a, "--tm-lengths")?[0];
            let b = parse_list(b, "--tm-lengths")?[0];
            Ok((a, b))
        })
        .collect::<Result<_>>()?;
    if tm.len() != lens.len() {
        return Err(SmdtError::Config(format!(
            "{} sentences but {} TM length pairs",
            lens.len(),
            tm.len()
        )));
    }
    let filler = NUM_RESERVED as TokenId;
    let sources: Vec<Vec<TokenId>> = lens.iter().map(|&n| vec![filler; n]).collect();
    let tm: Vec<_> = tm.iter().map(|&(a, b)| (vec![filler; a], vec![filler; b])).collect();
    let targets = lens.iter().map(|_| vec![filler]).collect();
    InstanceLayout::from_parts(&sources, &tm, targets).map_err(|e| SmdtError::Config(e.to_string()))
}

/// Layout tags and every mask family of `layout` as one JSON object.
pub fn dump_masks(layout: &InstanceLayout, window: usize, grid: bool) -> Result<serde_json::Value> {
    let masks = build_mask_set(layout, window)?;
    let families: Vec<serde_json::Value> = masks.named().into_iter().map(|(n, m)| mask_json(n, m, grid)).collect();
    Ok(serde_json::json!({
        "tokens": layout.tokens,
        "tags": layout.tags,
        "positions": layout.positions,
        "adjacent_window": window,
        "decoder_lengths": masks.decoder.lengths,
        "masks": families,
    }))
}
