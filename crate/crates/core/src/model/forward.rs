//! Encoder, selection layer and decoder forward passes.

use serde::Serialize;

use super::attention::{gate_sum, multi_head_attention, sinusoidal_positions, MhaWeights};
use super::params::{AttnIds, FfnIds, NormIds, StreamIds};
use super::Model;
use crate::corpus::{TokenId, BOS, PAD};
use crate::error::{Result, SmdtError};
use crate::layout::{decoder_positions, decoder_spans, DecoderMasks, EncoderMasks, HeadKind, InstanceLayout, MaskSet};
use crate::numerics::{Graph, Tensor, Var, MASK_BLOCKED};

/// Overrides used by tests and diagnostics.
#[derive(Clone, Debug, Default)]
pub struct Probes {
    /// Fix every gate to the local stream (`g = 1`).
    pub force_local_gate: bool,
    /// Replace the selection decision on TM positions (markers included).
    /// Indexed by encoder position; entries at non-TM positions are ignored.
    pub force_sigma: Option<Vec<bool>>,
}

/// Per-position selection outcome over the encoder stream.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SelectionResult {
    /// Probability of the retain class; 1 where no decision is made.
    pub retain_probabilities: Vec<f64>,
    /// `true` means the token stays visible to the decoder.
    pub hard_sigma: Vec<bool>,
}

impl SelectionResult {
    pub fn all_retain(n: usize) -> Self {
        SelectionResult {
            retain_probabilities: vec![1.0; n],
            hard_sigma: vec![true; n],
        }
    }
}

/// Weights of the selection layer as bound graph variables.
#[derive(Clone, Copy, Debug)]
pub struct SelectionWeights {
    pub layer_logits: Var,
    pub norm_gain: Var,
    pub norm_bias: Var,
    pub attn: MhaWeights,
    pub ws: Var,
}

/// Selection over block outputs `h_1..h_L`.
///
/// `selectable[j]` marks positions whose decision comes from the classifier;
/// all others are retained with probability 1. Returns the `[n, 1]` retain
/// weights (differentiable at selectable positions) and the numeric result.
pub fn selection_layer(
    g: &mut Graph,
    blocks: &[Var],
    w: &SelectionWeights,
    mask: Var,
    selectable: &[bool],
) -> Result<(Var, SelectionResult)> {
    let first = *blocks
        .first()
        .ok_or_else(|| SmdtError::shape("selection_layer", "no block outputs"))?;
    let shape = g.value(first).shape().to_vec();
    if blocks.iter().any(|&b| g.value(b).shape() != shape.as_slice()) {
        return Err(SmdtError::shape("selection_layer", "block outputs differ in shape"));
    }
    if g.value(w.layer_logits).numel() != blocks.len() {
        return Err(SmdtError::shape(
            "selection_layer",
            format!("{} layer logits for {} blocks", g.value(w.layer_logits).numel(), blocks.len()),
        ));
    }
    let n = shape[0];
    if selectable.len() != n {
        return Err(SmdtError::shape("selection_layer", "selectable flags do not cover the stream"));
    }
    let a = g.softmax(w.layer_logits);
    let mut combined = None;
    for (i, &h) in blocks.iter().enumerate() {
        let ai = g.slice(a, i, i + 1)?;
        let term = g.mul_scalar(h, ai)?;
        combined = Some(match combined {
            None => term,
            Some(acc) => g.add(acc, term)?,
        });
    }
    let combined = combined.expect("at least one block");
    let normed = g.layer_norm(combined, w.norm_gain, w.norm_bias)?;
    let top = multi_head_attention(g, normed, normed, &[mask], &w.attn, 1)?;
    let scores = g.matmul(top, w.ws)?;
    let probs = g.softmax(scores);
    let retain = g.slice(probs, 1, 2)?;

    let sel_flags = Tensor::new(vec![n, 1], selectable.iter().map(|&s| f64::from(u8::from(s))).collect())?;
    let fixed = Tensor::new(vec![n, 1], selectable.iter().map(|&s| if s { 0.0 } else { 1.0 }).collect())?;
    let sel_flags = g.constant(sel_flags);
    let fixed = g.constant(fixed);
    let kept = g.mul(retain, sel_flags)?;
    let weights = g.add(kept, fixed)?;

    let sv = g.value(scores);
    let pv = g.value(probs);
    let mut result = SelectionResult::all_retain(n);
    for j in (0..n).filter(|&j| selectable[j]) {
        result.retain_probabilities[j] = pv.get(j, 1);
        result.hard_sigma[j] = sv.get(j, 1) >= sv.get(j, 0);
    }
    Ok((weights, result))
}

/// Encoder outputs needed downstream.
#[derive(Clone, Debug)]
pub struct EncoderOutput {
    /// Final normalised encoder states `[n, d]`.
    pub states: Var,
    /// Output of each encoder block, bottom first.
    pub blocks: Vec<Var>,
    /// Gate activations of the two-stream encoder layers, bottom first.
    pub gates: Vec<Var>,
    /// `[n, 1]` retain weights used in training mode.
    pub retain_weights: Var,
    pub selection: SelectionResult,
}

impl EncoderOutput {
    pub fn memory(&self) -> Memory {
        Memory {
            states: self.states,
            retain_weights: self.retain_weights,
            sigma: self.selection.hard_sigma.clone(),
        }
    }
}

/// What the decoder reads from the encoder.
#[derive(Clone, Debug)]
pub struct Memory {
    pub states: Var,
    pub retain_weights: Var,
    pub sigma: Vec<bool>,
}

impl Memory {
    /// Copies encoder values from one graph into another as constants.
    pub fn transfer(&self, from: &Graph, to: &mut Graph) -> Memory {
        Memory {
            states: to.constant(from.value(self.states).clone()),
            retain_weights: to.constant(from.value(self.retain_weights).clone()),
            sigma: self.sigma.clone(),
        }
    }
}

/// A forward pass of one [`Model`] on one [`Graph`].
pub struct Session<'a> {
    model: &'a Model,
    g: &'a mut Graph,
    vars: Vec<Option<Var>>,
    trainable: bool,
}

impl<'a> Session<'a> {
    /// `trainable` binds parameters as gradient leaves; otherwise as constants.
    pub fn new(model: &'a Model, g: &'a mut Graph, trainable: bool) -> Self {
        Session {
            model,
            vars: vec![None; model.params.len()],
            g,
            trainable,
        }
    }

    /// Uses `vars`, aligned with [`Model::parameters`], instead of binding
    /// the model's own tensors. Only shapes are taken from the model.
    pub fn with_bound(model: &'a Model, g: &'a mut Graph, vars: &[Var]) -> Result<Self> {
        if vars.len() != model.params.len() {
            return Err(SmdtError::shape(
                "Session::with_bound",
                format!("{} variables for {} parameters", vars.len(), model.params.len()),
            ));
        }
        for (i, (&v, t)) in vars.iter().zip(model.params.tensors()).enumerate() {
            if g.value(v).shape() != t.shape() {
                return Err(SmdtError::shape(
                    "Session::with_bound",
                    format!("variable for `{}` has the wrong shape", model.params.names()[i]),
                ));
            }
        }
        Ok(Session {
            model,
            vars: vars.iter().map(|&v| Some(v)).collect(),
            g,
            trainable: true,
        })
    }

    pub fn graph(&mut self) -> &mut Graph {
        self.g
    }

    pub fn graph_ref(&self) -> &Graph {
        self.g
    }

    fn p(&mut self, id: usize) -> Var {
        if let Some(v) = self.vars[id] {
            return v;
        }
        let t = self.model.params.tensors()[id].clone();
        let v = if self.trainable {
            self.g.param(t)
        } else {
            self.g.constant(t)
        };
        self.vars[id] = Some(v);
        v
    }

    /// The bound variable of parameter `name`, binding it if needed.
    pub fn parameter(&mut self, name: &str) -> Option<Var> {
        let id = self.model.params.names().iter().position(|n| n == name)?;
        Some(self.p(id))
    }

    /// Gradients aligned with [`Model::parameters`]; zero for unused tensors.
    pub fn gradients(&self) -> Vec<Tensor> {
        self.model
            .params
            .tensors()
            .iter()
            .zip(&self.vars)
            .map(|(t, v)| {
                let grad = v.and_then(|v| self.g.grad(v));
                match grad {
                    Some(gr) => Tensor::new(t.shape().to_vec(), gr.to_vec()).expect("grad shape"),
                    None => Tensor::zeros(t.shape().to_vec()),
                }
            })
            .collect()
    }

    fn mha(&mut self, ids: AttnIds) -> MhaWeights {
        MhaWeights {
            wq: self.p(ids.wq),
            wk: self.p(ids.wk),
            wv: self.p(ids.wv),
            wo: self.p(ids.wo),
        }
    }

    fn norm(&mut self, x: Var, ids: NormIds) -> Result<Var> {
        let (gain, bias) = (self.p(ids.gain), self.p(ids.bias));
        self.g.layer_norm(x, gain, bias)
    }

    fn ffn(&mut self, x: Var, ids: FfnIds) -> Result<Var> {
        let (w1, b1, w2, b2) = (self.p(ids.w1), self.p(ids.b1), self.p(ids.w2), self.p(ids.b2));
        let dropout = self.model.config.dropout;
        let h = self.g.matmul(x, w1)?;
        let h = self.g.add_row(h, b1)?;
        let h = self.g.relu(h);
        let h = self.g.dropout(h, dropout)?;
        let h = self.g.matmul(h, w2)?;
        self.g.add_row(h, b2)
    }

    /// Local stream on all heads plus, where present, the global stream with
    /// per-head masks, fused by the gate. Returns `(output, gate)`.
    #[allow(clippy::too_many_arguments)]
    fn streams(
        &mut self,
        ids: StreamIds,
        x_q: Var,
        x_kv_local: Var,
        x_kv_global: Var,
        local_mask: Var,
        global_masks: &[Var],
        probes: &Probes,
    ) -> Result<(Var, Option<Var>)> {
        let h = self.model.config.num_heads;
        let w = self.mha(ids.local);
        let local = multi_head_attention(self.g, x_q, x_kv_local, &vec![local_mask; h], &w, h)?;
        match ids.global {
            None => Ok((local, None)),
            Some((attn, gate)) => {
                let w = self.mha(attn);
                let global = multi_head_attention(self.g, x_q, x_kv_global, global_masks, &w, h)?;
                let (wg, bg) = (self.p(gate.w), self.p(gate.b));
                let (fused, gate) = gate_sum(self.g, local, global, wg, bg, probes.force_local_gate)?;
                Ok((fused, Some(gate)))
            }
        }
    }

    fn embed(&mut self, tokens: &[TokenId], positions: &[usize]) -> Result<Var> {
        let d = self.model.config.d_model;
        let vocab = self.model.config.vocab_size;
        if let Some(&t) = tokens.iter().find(|&&t| t as usize >= vocab) {
            return Err(SmdtError::InvalidArgument(format!(
                "token id {t} outside vocabulary of {vocab}"
            )));
        }
        let table = self.p(self.model.ids.embed);
        let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        let e = self.g.gather(table, &ids)?;
        let e = self.g.scale(e, (d as f64).sqrt());
        let pe = self.g.constant(sinusoidal_positions(positions, d));
        let x = self.g.add(e, pe)?;
        self.g.dropout(x, self.model.config.dropout)
    }

    pub fn encode(&mut self, layout: &InstanceLayout, masks: &EncoderMasks, probes: &Probes) -> Result<EncoderOutput> {
        let n = layout.len();
        if masks.local.shape() != [n, n] {
            return Err(SmdtError::shape(
                "encode",
                format!("masks {:?} for a stream of {n}", masks.local.shape()),
            ));
        }
        let dropout = self.model.config.dropout;
        let local = self.g.constant(masks.local.clone());
        let per_kind = [
            (HeadKind::MemoryFocus, self.g.constant(masks.memory_focus.clone())),
            (HeadKind::Document, self.g.constant(masks.document.clone())),
            (HeadKind::Adjacent, self.g.constant(masks.adjacent.clone())),
        ];
        let global: Vec<Var> = self
            .model
            .head_kinds
            .iter()
            .map(|k| per_kind.iter().find(|(kind, _)| kind == k).expect("kind").1)
            .collect();

        let mut x = self.embed(&layout.tokens, &layout.positions)?;
        let mut blocks = Vec::new();
        let mut gates = Vec::new();
        let layers = self.model.ids.encoder.clone();
        for ids in layers {
            let h = self.norm(x, ids.norm_attn)?;
            let (a, gate) = self.streams(ids.attn, h, h, h, local, &global, probes)?;
            gates.extend(gate);
            let a = self.g.dropout(a, dropout)?;
            x = self.g.add(x, a)?;
            let h = self.norm(x, ids.norm_ffn)?;
            let f = self.ffn(h, ids.ffn)?;
            let f = self.g.dropout(f, dropout)?;
            x = self.g.add(x, f)?;
            blocks.push(x);
        }
        let states = self.norm(x, self.model.ids.encoder_norm)?;

        // Retrieval markers are always kept; the classifier decides on content.
        let mut selectable = layout.tm_positions();
        for s in &layout.tm_spans {
            selectable[s.src.start] = false;
            selectable[s.tgt.start] = false;
        }
        let sel = self.model.ids.selection;
        let weights = SelectionWeights {
            layer_logits: self.p(sel.layer_logits),
            norm_gain: self.p(sel.norm.gain),
            norm_bias: self.p(sel.norm.bias),
            attn: self.mha(sel.attn),
            ws: self.p(sel.ws),
        };
        let sel_mask = self.g.constant(masks.selection.clone());
        let (mut retain_weights, mut selection) =
            selection_layer(self.g, &blocks, &weights, sel_mask, &selectable)?;

        if let Some(forced) = &probes.force_sigma {
            if forced.len() != n {
                return Err(SmdtError::InvalidArgument(format!(
                    "forced selection covers {} of {n} positions",
                    forced.len()
                )));
            }
            let tm = layout.tm_positions();
            for j in (0..n).filter(|&j| tm[j]) {
                selection.hard_sigma[j] = forced[j];
                selection.retain_probabilities[j] = if forced[j] { 1.0 } else { 0.0 };
            }
            let w = Tensor::new(vec![n, 1], selection.retain_probabilities.clone())?;
            retain_weights = self.g.constant(w);
        }
        Ok(EncoderOutput {
            states,
            blocks,
            gates,
            retain_weights,
            selection,
        })
    }

    /// Vocabulary logits `[t, V]` for every decoder input position.
    ///
    /// `inputs` is the concatenation of segments with the lengths recorded in
    /// `masks`; each segment starts with BOS.
    pub fn decode(
        &mut self,
        memory: &Memory,
        layout: &InstanceLayout,
        inputs: &[TokenId],
        masks: &DecoderMasks,
        probes: &Probes,
    ) -> Result<Var> {
        let t: usize = masks.lengths.iter().sum();
        if inputs.len() != t {
            return Err(SmdtError::shape(
                "decode",
                format!("{} inputs for segments totalling {t}", inputs.len()),
            ));
        }
        for span in decoder_spans(&masks.lengths) {
            if inputs[span.start] != BOS {
                return Err(SmdtError::InvalidArgument(format!(
                    "decoder segment at {} does not begin with BOS",
                    span.start
                )));
            }
        }
        let n = layout.len();
        if memory.sigma.len() != n || masks.cross_local.shape() != [t, n] {
            return Err(SmdtError::shape("decode", "memory or masks do not match the layout"));
        }
        let h = self.model.config.num_heads;
        let dropout = self.model.config.dropout;
        let self_local = self.g.constant(masks.self_local.clone());
        let self_document = self.g.constant(masks.self_document.clone());
        let cross_local = self.g.constant(masks.cross_local.clone());

        // Training weights TM rows softly; evaluation blocks discarded columns.
        let (global_kv, cross_global) = if self.g.is_train() {
            let kv = self.g.mul_rows(memory.states, memory.retain_weights)?;
            (kv, self.g.constant(masks.cross_global.clone()))
        } else {
            let mut m = masks.cross_global.clone();
            for (j, &keep) in memory.sigma.iter().enumerate() {
                if !keep {
                    for q in 0..t {
                        m.data_mut()[q * n + j] = MASK_BLOCKED;
                    }
                }
            }
            (memory.states, self.g.constant(m))
        };

        let mut x = self.embed(inputs, &decoder_positions(&masks.lengths))?;
        let layers = self.model.ids.decoder.clone();
        for ids in layers {
            let hs = self.norm(x, ids.norm_self)?;
            let (a, _) = self.streams(ids.self_attn, hs, hs, hs, self_local, &vec![self_document; h], probes)?;
            let a = self.g.dropout(a, dropout)?;
            x = self.g.add(x, a)?;
            let hc = self.norm(x, ids.norm_cross)?;
            let (c, _) = self.streams(
                ids.cross_attn,
                hc,
                memory.states,
                global_kv,
                cross_local,
                &vec![cross_global; h],
                probes,
            )?;
            let c = self.g.dropout(c, dropout)?;
            x = self.g.add(x, c)?;
            let hf = self.norm(x, ids.norm_ffn)?;
            let f = self.ffn(hf, ids.ffn)?;
            let f = self.g.dropout(f, dropout)?;
            x = self.g.add(x, f)?;
        }
        let out = self.norm(x, self.model.ids.decoder_norm)?;
        let table = self.p(self.model.ids.embed);
        self.g.matmul_nt(out, table)
    }

    /// Teacher-forced loss of a full instance: mean label-smoothed
    /// cross-entropy over target tokens. Returns `(loss, logits)`.
    pub fn loss(&mut self, layout: &InstanceLayout, masks: &MaskSet, probes: &Probes) -> Result<(Var, Var)> {
        if layout.target_tokens.is_empty() {
            return Err(SmdtError::InvalidArgument("instance has no target".into()));
        }
        let enc = self.encode(layout, &masks.encoder, probes)?;
        let inputs = layout.decoder_inputs();
        let logits = self.decode(&enc.memory(), layout, &inputs, &masks.decoder, probes)?;
        let targets: Vec<Option<usize>> = layout
            .decoder_targets()
            .iter()
            .map(|&y| (y != PAD).then_some(y as usize))
            .collect();
        let smoothing = self.model.config.label_smoothing;
        let loss = self.g.cross_entropy(logits, &targets, smoothing, Some(PAD as usize))?;
        Ok((loss, logits))
    }
}

/// Number of rows whose argmax equals the target, and the number of rows.
/// Ties resolve to the lowest id.
pub fn token_accuracy(logits: &Tensor, targets: &[TokenId]) -> (usize, usize) {
    let correct = targets
        .iter()
        .enumerate()
        .filter(|&(r, &y)| {
            let row = logits.row(r);
            let best = row
                .iter()
                .enumerate()
                .fold(0, |b, (i, &v)| if v > row[b] { i } else { b });
            best == y as usize
        })
        .count();
    (correct, targets.len())
}
