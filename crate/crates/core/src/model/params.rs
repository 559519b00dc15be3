//! Named parameter store, deterministic initialisation and the checkpoint format.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::ModelConfig;
use crate::error::{Result, SmdtError};
use crate::numerics::{read_named_tensors, read_u32_le, read_u64_le, write_named_tensors, Tensor};

const CHECKPOINT_MAGIC: &[u8; 8] = b"SMDTCKPT";
pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug)]
pub(crate) struct AttnIds {
    pub wq: usize,
    pub wk: usize,
    pub wv: usize,
    pub wo: usize,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct GateIds {
    pub w: usize,
    pub b: usize,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct NormIds {
    pub gain: usize,
    pub bias: usize,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct FfnIds {
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

/// Local stream always; global stream and gate on two-stream layers.
#[derive(Clone, Copy, Debug)]
pub(crate) struct StreamIds {
    pub local: AttnIds,
    pub global: Option<(AttnIds, GateIds)>,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct EncoderLayerIds {
    pub norm_attn: NormIds,
    pub attn: StreamIds,
    pub norm_ffn: NormIds,
    pub ffn: FfnIds,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct DecoderLayerIds {
    pub norm_self: NormIds,
    pub self_attn: StreamIds,
    pub norm_cross: NormIds,
    pub cross_attn: StreamIds,
    pub norm_ffn: NormIds,
    pub ffn: FfnIds,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct SelectionIds {
    /// `[1, L]` logits whose softmax weights the block outputs.
    pub layer_logits: usize,
    pub norm: NormIds,
    pub attn: AttnIds,
    /// `[d_model, 2]`: column 0 discards, column 1 retains.
    pub ws: usize,
}

#[derive(Clone, Debug)]
pub(crate) struct ParamIds {
    pub embed: usize,
    pub encoder: Vec<EncoderLayerIds>,
    pub encoder_norm: NormIds,
    pub selection: SelectionIds,
    pub decoder: Vec<DecoderLayerIds>,
    pub decoder_norm: NormIds,
}

/// All learnable tensors in a fixed order, addressable by name.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameters {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl Parameters {
    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(move |i| &mut self.tensors[i])
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn shapes(&self) -> Vec<(String, Vec<usize>)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .map(|(n, t)| (n.clone(), t.shape().to_vec()))
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }
}

#[derive(Clone, Copy)]
enum Init {
    Xavier,
    Embedding,
    Zeros,
    Ones,
}

struct Builder {
    rng: ChaCha8Rng,
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl Builder {
    fn add(&mut self, name: String, shape: Vec<usize>, init: Init) -> usize {
        let n: usize = shape.iter().product();
        let data = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Xavier => {
                let fan_in = shape[0] as f64;
                let fan_out = *shape.last().unwrap() as f64;
                let limit = (6.0 / (fan_in + fan_out)).sqrt();
                (0..n).map(|_| self.rng.gen_range(-limit..limit)).collect()
            }
            Init::Embedding => {
                // Uniform with standard deviation d^-1/2.
                let limit = (3.0 / shape[1] as f64).sqrt();
                (0..n).map(|_| self.rng.gen_range(-limit..limit)).collect()
            }
        };
        self.names.push(name);
        self.tensors.push(Tensor::new(shape, data).expect("init shape"));
        self.tensors.len() - 1
    }

    fn attn(&mut self, prefix: &str, d: usize) -> AttnIds {
        AttnIds {
            wq: self.add(format!("{prefix}.wq"), vec![d, d], Init::Xavier),
            wk: self.add(format!("{prefix}.wk"), vec![d, d], Init::Xavier),
            wv: self.add(format!("{prefix}.wv"), vec![d, d], Init::Xavier),
            wo: self.add(format!("{prefix}.wo"), vec![d, d], Init::Xavier),
        }
    }

    fn norm(&mut self, prefix: &str, d: usize) -> NormIds {
        NormIds {
            gain: self.add(format!("{prefix}.gain"), vec![d], Init::Ones),
            bias: self.add(format!("{prefix}.bias"), vec![d], Init::Zeros),
        }
    }

    fn ffn(&mut self, prefix: &str, d: usize, d_ff: usize) -> FfnIds {
        FfnIds {
            w1: self.add(format!("{prefix}.w1"), vec![d, d_ff], Init::Xavier),
            b1: self.add(format!("{prefix}.b1"), vec![d_ff], Init::Zeros),
            w2: self.add(format!("{prefix}.w2"), vec![d_ff, d], Init::Xavier),
            b2: self.add(format!("{prefix}.b2"), vec![d], Init::Zeros),
        }
    }

    fn stream(&mut self, prefix: &str, d: usize, two_stream: bool) -> StreamIds {
        let local = self.attn(&format!("{prefix}.local"), d);
        let global = two_stream.then(|| {
            let attn = self.attn(&format!("{prefix}.global"), d);
            let gate = GateIds {
                w: self.add(format!("{prefix}.gate.w"), vec![2 * d, d], Init::Xavier),
                b: self.add(format!("{prefix}.gate.b"), vec![d], Init::Zeros),
            };
            (attn, gate)
        });
        StreamIds { local, global }
    }
}

/// Allocates every tensor for `config` in a fixed order. With `rng = None`
/// only the layout is produced (values are zero).
fn build(config: &ModelConfig, seed: Option<u64>) -> (ParamIds, Parameters) {
    let d = config.d_model;
    let mut b = Builder {
        rng: ChaCha8Rng::seed_from_u64(seed.unwrap_or(0)),
        names: Vec::new(),
        tensors: Vec::new(),
    };
    let embed = b.add("embed".into(), vec![config.vocab_size, d], Init::Embedding);
    let encoder = (0..config.num_layers)
        .map(|l| {
            let p = format!("enc.{l}");
            EncoderLayerIds {
                norm_attn: b.norm(&format!("{p}.norm_attn"), d),
                attn: b.stream(&format!("{p}.self"), d, config.is_two_stream(l)),
                norm_ffn: b.norm(&format!("{p}.norm_ffn"), d),
                ffn: b.ffn(&format!("{p}.ffn"), d, config.d_ff),
            }
        })
        .collect();
    let encoder_norm = b.norm("enc.norm", d);
    let selection = SelectionIds {
        layer_logits: b.add("sel.layer_logits".into(), vec![1, config.num_layers], Init::Zeros),
        norm: b.norm("sel.norm", d),
        attn: b.attn("sel.attn", d),
        ws: b.add("sel.ws".into(), vec![d, 2], Init::Xavier),
    };
    let decoder = (0..config.num_layers)
        .map(|l| {
            let p = format!("dec.{l}");
            let two = config.is_two_stream(l);
            DecoderLayerIds {
                norm_self: b.norm(&format!("{p}.norm_self"), d),
                self_attn: b.stream(&format!("{p}.self"), d, two),
                norm_cross: b.norm(&format!("{p}.norm_cross"), d),
                cross_attn: b.stream(&format!("{p}.cross"), d, two),
                norm_ffn: b.norm(&format!("{p}.norm_ffn"), d),
                ffn: b.ffn(&format!("{p}.ffn"), d, config.d_ff),
            }
        })
        .collect();
    let decoder_norm = b.norm("dec.norm", d);
    let ids = ParamIds {
        embed,
        encoder,
        encoder_norm,
        selection,
        decoder,
        decoder_norm,
    };
    (
        ids,
        Parameters {
            names: b.names,
            tensors: b.tensors,
        },
    )
}

pub(crate) fn initialise(config: &ModelConfig, seed: u64) -> (ParamIds, Parameters) {
    build(config, Some(seed))
}

pub(crate) fn layout_for(config: &ModelConfig) -> (ParamIds, Parameters) {
    build(config, None)
}

/// Writes magic, format version, the config as length-prefixed JSON, then the
/// named tensors.
pub(crate) fn write_checkpoint<W: Write>(
    w: &mut W,
    config: &ModelConfig,
    params: &Parameters,
) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_FORMAT_VERSION.to_le_bytes())?;
    let json = serde_json::to_vec(config)?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    let named: Vec<(String, Tensor)> = params
        .names
        .iter()
        .cloned()
        .zip(params.tensors.iter().cloned())
        .collect();
    write_named_tensors(w, &named)
}

pub(crate) fn read_checkpoint<R: Read>(r: &mut R) -> Result<(ModelConfig, ParamIds, Parameters)> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|_| SmdtError::Format("checkpoint too short".into()))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(SmdtError::Format("not a checkpoint (bad magic)".into()));
    }
    let version = read_u32_le(r)?;
    if version != CHECKPOINT_FORMAT_VERSION {
        return Err(SmdtError::VersionMismatch {
            artifact: "checkpoint",
            expected: CHECKPOINT_FORMAT_VERSION,
            found: version,
        });
    }
    let len = read_u64_le(r)? as usize;
    let mut json = vec![0u8; len];
    r.read_exact(&mut json)?;
    let config: ModelConfig = serde_json::from_slice(&json)?;
    config.validate()?;
    let named = read_named_tensors(r)?;
    let (ids, mut params) = layout_for(&config);
    if named.len() != params.len() {
        return Err(SmdtError::Format(format!(
            "checkpoint holds {} tensors, config expects {}",
            named.len(),
            params.len()
        )));
    }
    let by_name: HashMap<String, Tensor> = named.into_iter().collect();
    for (name, slot) in params.names.iter().zip(params.tensors.iter_mut()) {
        let t = by_name
            .get(name)
            .ok_or_else(|| SmdtError::Format(format!("checkpoint lacks tensor `{name}`")))?;
        if t.shape() != slot.shape() {
            return Err(SmdtError::Format(format!(
                "tensor `{name}` has shape {:?}, expected {:?}",
                t.shape(),
                slot.shape()
            )));
        }
        *slot = t.clone();
    }
    Ok((config, ids, params))
}

pub(crate) fn save_checkpoint(path: &Path, config: &ModelConfig, params: &Parameters) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, config, params)?;
    std::fs::write(path, buf)?;
    Ok(())
}
