//! The translation network.
//!
//! A [`Model`] owns its configuration and parameters. Forward passes run
//! through a [`Session`], which binds parameters onto a [`Graph`] on first use.
//! The graph's training flag selects the mode: in training, dropout is active
//! and the selection layer's soft retain probabilities weight the TM rows fed to
//! global cross-attention; at evaluation the hard decisions block discarded TM
//! keys instead.

mod attention;
mod config;
mod forward;
mod params;

use std::path::Path;

pub use attention::{
    attention, attention_heads, gate_sum, multi_head_attention, sinusoidal_positions, MhaWeights,
};
pub use config::ModelConfig;
pub use forward::{
    selection_layer, token_accuracy, EncoderOutput, Memory, Probes, SelectionResult, SelectionWeights,
    Session,
};
pub use params::{Parameters, CHECKPOINT_FORMAT_VERSION};

use crate::error::{Result, SmdtError};
use crate::layout::{allocate_heads, HeadKind};
use params::ParamIds;

#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    ids: ParamIds,
    params: Parameters,
    head_kinds: Vec<HeadKind>,
}

impl Model {
    /// Fresh parameters drawn deterministically from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (ids, params) = params::initialise(&config, seed);
        let head_kinds = allocate_heads(config.num_heads, config.head_allocation)?;
        Ok(Model {
            config,
            ids,
            params,
            head_kinds,
        })
    }

    /// Replaces the parameters, which must match this configuration's shapes.
    pub fn with_parameters(config: ModelConfig, params: Parameters) -> Result<Self> {
        let mut model = Model::new(config, 0)?;
        if model.params.shapes() != params.shapes() {
            return Err(SmdtError::Config(
                "parameter shapes do not match the configuration".into(),
            ));
        }
        model.params = params;
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn parameters(&self) -> &Parameters {
        &self.params
    }

    pub fn parameters_mut(&mut self) -> &mut Parameters {
        &mut self.params
    }

    pub fn head_kinds(&self) -> &[HeadKind] {
        &self.head_kinds
    }

    /// Total number of learnable scalars.
    pub fn num_parameters(&self) -> usize {
        self.params.num_values()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        params::write_checkpoint(&mut buf, &self.config, &self.params)?;
        Ok(buf)
    }

    pub fn from_bytes(mut bytes: &[u8]) -> Result<Self> {
        let (config, ids, params) = params::read_checkpoint(&mut bytes)?;
        let head_kinds = allocate_heads(config.num_heads, config.head_allocation)?;
        Ok(Model {
            config,
            ids,
            params,
            head_kinds,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        params::save_checkpoint(path, &self.config, &self.params)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Model::from_bytes(&std::fs::read(path)?)
    }
}
