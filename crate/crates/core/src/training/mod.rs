//! Multi-task training: a stream mixing full documents with single-sentence
//! instances, a label-smoothed token loss, Adam and early stopping.

mod optim;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use optim::{adam_step, AdamState, LrSchedule, ADAM_BETA1, ADAM_BETA2, ADAM_EPSILON};

use crate::corpus::{Corpus, SentencePair};
use crate::error::{Result, SmdtError};
use crate::layout::{assemble_instance, build_mask_set, InstanceLayout, MaskSet};
use crate::model::{token_accuracy, Model, ModelConfig, Probes, Session};
use crate::numerics::{Graph, Tensor};
use crate::parallel::Execution;
use crate::retrieval::{RetrievedPair, TmIndex};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Task {
    Document,
    Sentence,
}

#[derive(Clone, Debug)]
pub struct TrainingInstance {
    pub layout: InstanceLayout,
    pub mask_set: MaskSet,
    pub task: Task,
}

impl TrainingInstance {
    pub fn new(layout: InstanceLayout, task: Task, adjacent_window: usize) -> Result<Self> {
        let mask_set = build_mask_set(&layout, adjacent_window)?;
        Ok(TrainingInstance {
            layout,
            mask_set,
            task,
        })
    }

    /// Number of predicted target tokens (EOS included).
    pub fn num_targets(&self) -> usize {
        self.layout.decoder_targets().len()
    }
}

/// Retrievals for every pair of `corpus`, grouped per document.
pub fn retrieve_by_document(
    corpus: &Corpus,
    index: &TmIndex,
    exclude_self: bool,
    exec: Execution,
) -> Vec<Vec<RetrievedPair>> {
    let mut flat = index.retrieve_corpus(corpus, exclude_self, exec).into_iter();
    corpus
        .documents
        .iter()
        .map(|d| flat.by_ref().take(d.len()).collect())
        .collect()
}

/// Seeded, endless stream of training instances.
pub struct InstanceStream<'a> {
    corpus: &'a Corpus,
    retrieved: Vec<Vec<RetrievedPair>>,
    /// `(document, sentence)` of every pair, for uniform sentence sampling.
    pair_index: Vec<(usize, usize)>,
    sentence_task_ratio: f64,
    adjacent_window: usize,
    rng: ChaCha8Rng,
}

/// Each draw is a SENTENCE instance with probability `sentence_task_ratio`
/// (one uniformly chosen pair with its retrieved pair) and otherwise a
/// DOCUMENT instance (a uniformly chosen document). Retrieval excludes the
/// query itself.
pub fn build_training_stream<'a>(
    corpus: &'a Corpus,
    index: &TmIndex,
    sentence_task_ratio: f64,
    seed: u64,
    adjacent_window: usize,
    exec: Execution,
) -> Result<InstanceStream<'a>> {
    if !(0.0..=1.0).contains(&sentence_task_ratio) {
        return Err(SmdtError::InvalidArgument(format!(
            "sentence_task_ratio must lie in [0, 1], got {sentence_task_ratio}"
        )));
    }
    let pair_index: Vec<(usize, usize)> = corpus
        .documents
        .iter()
        .enumerate()
        .flat_map(|(d, doc)| (0..doc.len()).map(move |i| (d, i)))
        .collect();
    if pair_index.is_empty() {
        return Err(SmdtError::Corpus("training corpus is empty".into()));
    }
    Ok(InstanceStream {
        corpus,
        retrieved: retrieve_by_document(corpus, index, true, exec),
        pair_index,
        sentence_task_ratio,
        adjacent_window,
        rng: ChaCha8Rng::seed_from_u64(seed),
    })
}

impl InstanceStream<'_> {
    /// Draws the next task and the document/sentence it covers.
    fn draw(&mut self) -> (Task, usize, Option<usize>) {
        if self.rng.gen::<f64>() < self.sentence_task_ratio {
            let (d, i) = self.pair_index[self.rng.gen_range(0..self.pair_index.len())];
            (Task::Sentence, d, Some(i))
        } else {
            (Task::Document, self.rng.gen_range(0..self.corpus.documents.len()), None)
        }
    }

    pub fn next_instance(&mut self) -> Result<TrainingInstance> {
        let (task, d, sentence) = self.draw();
        let doc = &self.corpus.documents[d];
        let layout = match sentence {
            Some(i) => sentence_layout(&doc.pairs[i], &self.retrieved[d][i])?,
            None => assemble_instance(doc, &self.retrieved[d])?,
        };
        TrainingInstance::new(layout, task, self.adjacent_window)
    }
}

impl Iterator for InstanceStream<'_> {
    type Item = Result<TrainingInstance>;

    fn next(&mut self) -> Option<Self::Item> {
        Some(self.next_instance())
    }
}

/// A single pair with its retrieved pair, `m = 1`.
pub fn sentence_layout(pair: &SentencePair, retrieved: &RetrievedPair) -> Result<InstanceLayout> {
    InstanceLayout::from_parts(
        std::slice::from_ref(&pair.src_tokens),
        &[(retrieved.retrieved_src.clone(), retrieved.retrieved_tgt.clone())],
        vec![pair.tgt_tokens.clone()],
    )
}

/// DOCUMENT instances for every document of `corpus`, retrieving from
/// `index` without self-exclusion.
pub fn document_instances(
    corpus: &Corpus,
    index: &TmIndex,
    adjacent_window: usize,
    exec: Execution,
) -> Result<Vec<TrainingInstance>> {
    let retrieved = retrieve_by_document(corpus, index, false, exec);
    corpus
        .documents
        .iter()
        .zip(&retrieved)
        .map(|(doc, r)| TrainingInstance::new(assemble_instance(doc, r)?, Task::Document, adjacent_window))
        .collect()
}

/// Mean label-smoothed token loss of one instance. `train` enables dropout,
/// seeded by `seed`.
pub fn compute_loss(model: &Model, instance: &TrainingInstance, train: bool, seed: u64) -> Result<f64> {
    let mut g = Graph::new(train, seed);
    let mut s = Session::new(model, &mut g, false);
    let (loss, _) = s.loss(&instance.layout, &instance.mask_set, &Probes::default())?;
    Ok(g.scalar_value(loss))
}

/// Loss and parameter gradients of one instance.
pub fn instance_gradients(
    model: &Model,
    instance: &TrainingInstance,
    train: bool,
    seed: u64,
) -> Result<(f64, Vec<Tensor>)> {
    let mut g = Graph::new(train, seed);
    let mut s = Session::new(model, &mut g, true);
    let (loss, _) = s.loss(&instance.layout, &instance.mask_set, &Probes::default())?;
    s.graph().backward(loss)?;
    let value = s.graph_ref().scalar_value(loss);
    Ok((value, s.gradients()))
}

/// Token-weighted loss and teacher-forced token accuracy, dropout off.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub accuracy: f64,
    pub tokens: usize,
}

pub fn evaluate(model: &Model, instances: &[TrainingInstance], exec: Execution) -> Result<Evaluation> {
    let per = exec.try_map(instances, |inst| -> Result<(f64, usize, usize)> {
        let mut g = Graph::eval();
        let mut s = Session::new(model, &mut g, false);
        let (loss, logits) = s.loss(&inst.layout, &inst.mask_set, &Probes::default())?;
        let (correct, total) = token_accuracy(g.value(logits), &inst.layout.decoder_targets());
        Ok((g.scalar_value(loss), correct, total))
    })?;
    let tokens: usize = per.iter().map(|p| p.2).sum();
    if tokens == 0 {
        return Err(SmdtError::InvalidArgument("nothing to evaluate".into()));
    }
    let loss = per.iter().map(|p| p.0 * p.2 as f64).sum::<f64>() / tokens as f64;
    let correct: usize = per.iter().map(|p| p.1).sum();
    Ok(Evaluation {
        loss,
        accuracy: correct as f64 / tokens as f64,
        tokens,
    })
}

/// Optimisation settings; model shape lives in [`ModelConfig`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub warmup: usize,
    pub patience: usize,
    pub eval_interval: usize,
    pub sentence_task_ratio: f64,
    pub seed: u64,
    pub max_steps: usize,
    /// Batch size in documents; a sentence instance counts a quarter.
    pub batch_size: f64,
    /// Stop as soon as validation token accuracy reaches this value.
    pub stop_at_accuracy: Option<f64>,
    /// Rescale the batch gradient to at most this global L2 norm.
    pub clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 5e-4,
            warmup: 400,
            patience: 5,
            eval_interval: 100,
            sentence_task_ratio: 0.25,
            seed: 1,
            max_steps: 2000,
            batch_size: 1.0,
            stop_at_accuracy: None,
            clip_norm: None,
        }
    }
}

pub const SENTENCE_INSTANCE_WEIGHT: f64 = 0.25;

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(SmdtError::Config(m));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return fail(format!("lr must be finite and non-negative, got {}", self.lr));
        }
        if self.eval_interval == 0 {
            return fail("eval_interval must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.sentence_task_ratio) {
            return fail(format!("sentence_task_ratio must lie in [0, 1], got {}", self.sentence_task_ratio));
        }
        if self.clip_norm.is_some_and(|c| !(c > 0.0)) {
            return fail("clip_norm must be positive".into());
        }
        if !(self.batch_size > 0.0 && self.batch_size.is_finite()) {
            return fail(format!("batch_size must be positive, got {}", self.batch_size));
        }
        Ok(())
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule {
            peak: self.lr,
            warmup: self.warmup,
        }
    }
}

/// One evaluation, written as a JSON line.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalRecord {
    pub step: usize,
    pub train_loss: f64,
    pub valid_loss: f64,
    pub best: bool,
    #[serde(skip)]
    pub valid_accuracy: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters of the best validation evaluation.
    pub model: Model,
    pub history: Vec<EvalRecord>,
    pub steps: usize,
    pub best_valid_loss: f64,
    pub best_valid_accuracy: f64,
}

/// Scales `grads` so their global L2 norm is at most `max`. Returns the norm
/// before clipping.
pub fn clip_gradients(grads: &mut [Tensor], max: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if norm > max && norm.is_finite() {
        let k = max / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= k);
        }
    }
    norm
}

/// Mixes a 64-bit seed with a step and slot so every instance gets its own
/// dropout stream.
fn derive_seed(seed: u64, step: usize, slot: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_d209);
    rng.set_stream(((step as u64) << 16) | slot as u64);
    rng.gen()
}

/// Trains from a fresh model until `max_steps` or early stopping. `on_eval`
/// sees every evaluation as it happens.
pub fn train(
    train_corpus: &Corpus,
    valid_corpus: &Corpus,
    model_config: &ModelConfig,
    config: &TrainConfig,
    exec: Execution,
    on_eval: &mut dyn FnMut(&EvalRecord) -> Result<()>,
) -> Result<TrainOutcome> {
    let index = TmIndex::build(train_corpus, crate::retrieval::DEFAULT_K1, crate::retrieval::DEFAULT_B)?;
    train_with_index(train_corpus, valid_corpus, &index, model_config, config, exec, on_eval)
}

/// [`train`] with a prebuilt translation memory over `train_corpus`.
pub fn train_with_index(
    train_corpus: &Corpus,
    valid_corpus: &Corpus,
    index: &TmIndex,
    model_config: &ModelConfig,
    config: &TrainConfig,
    exec: Execution,
    on_eval: &mut dyn FnMut(&EvalRecord) -> Result<()>,
) -> Result<TrainOutcome> {
    config.validate()?;
    let mut model = Model::new(model_config.clone(), config.seed)?;
    let valid = document_instances(valid_corpus, index, model_config.adjacent_window, exec)?;
    let mut stream = build_training_stream(
        train_corpus,
        index,
        config.sentence_task_ratio,
        config.seed.wrapping_add(1),
        model_config.adjacent_window,
        exec,
    )?;
    let mut state = AdamState::new(model.parameters());
    let schedule = config.schedule();

    let mut best: Option<(f64, f64, Model)> = None;
    let mut bad_evals = 0;
    let mut history = Vec::new();
    let mut window_loss = 0.0;
    let mut window_batches = 0usize;

    for step in 1..=config.max_steps {
        let mut batch = Vec::new();
        let mut weight = 0.0;
        while weight < config.batch_size {
            let inst = stream.next_instance()?;
            weight += match inst.task {
                Task::Document => 1.0,
                Task::Sentence => SENTENCE_INSTANCE_WEIGHT,
            };
            batch.push(inst);
        }
        let slots: Vec<usize> = (0..batch.len()).collect();
        let results = exec.try_map(&slots, |&k| {
            instance_gradients(&model, &batch[k], true, derive_seed(config.seed, step, k))
        })?;
        let total: usize = batch.iter().map(TrainingInstance::num_targets).sum();
        let mut grads: Vec<Tensor> = model
            .parameters()
            .tensors()
            .iter()
            .map(|t| Tensor::zeros(t.shape().to_vec()))
            .collect();
        let mut batch_loss = 0.0;
        for (inst, (loss, g)) in batch.iter().zip(&results) {
            let w = inst.num_targets() as f64 / total as f64;
            batch_loss += w * loss;
            for (acc, gi) in grads.iter_mut().zip(g) {
                for (a, &x) in acc.data_mut().iter_mut().zip(gi.data()) {
                    *a += w * x;
                }
            }
        }
        if let Some(max) = config.clip_norm {
            clip_gradients(&mut grads, max);
        }
        if !batch_loss.is_finite() {
            return Err(SmdtError::Divergence {
                step,
                detail: format!("training loss is {batch_loss}"),
            });
        }
        adam_step(&mut state, model.parameters_mut(), &grads, schedule.at(step)).map_err(|e| match e {
            SmdtError::Divergence { detail, .. } => SmdtError::Divergence { step, detail },
            other => other,
        })?;
        window_loss += batch_loss;
        window_batches += 1;

        if step % config.eval_interval == 0 || step == config.max_steps {
            let eval = evaluate(&model, &valid, exec)?;
            if !eval.loss.is_finite() {
                return Err(SmdtError::Divergence {
                    step,
                    detail: format!("validation loss is {}", eval.loss),
                });
            }
            let improved = best.as_ref().map_or(true, |b| eval.loss < b.0);
            if improved {
                best = Some((eval.loss, eval.accuracy, model.clone()));
                bad_evals = 0;
            } else {
                bad_evals += 1;
            }
            let record = EvalRecord {
                step,
                train_loss: window_loss / window_batches as f64,
                valid_loss: eval.loss,
                best: improved,
                valid_accuracy: eval.accuracy,
            };
            on_eval(&record)?;
            history.push(record);
            window_loss = 0.0;
            window_batches = 0;
            let reached = config.stop_at_accuracy.is_some_and(|a| eval.accuracy >= a);
            if bad_evals > config.patience || reached {
                let (loss, acc, model) = best.expect("at least one evaluation");
                return Ok(TrainOutcome {
                    model,
                    history,
                    steps: step,
                    best_valid_loss: loss,
                    best_valid_accuracy: acc,
                });
            }
        }
    }
    let steps = config.max_steps;
    match best {
        Some((loss, acc, model)) => Ok(TrainOutcome {
            model,
            history,
            steps,
            best_valid_loss: loss,
            best_valid_accuracy: acc,
        }),
        None => {
            let eval = evaluate(&model, &valid, exec)?;
            Ok(TrainOutcome {
                model,
                history,
                steps,
                best_valid_loss: eval.loss,
                best_valid_accuracy: eval.accuracy,
            })
        }
    }
}
