//! Experiment configuration, read from TOML.
//!
//! Every section is optional and falls back to its defaults:
//!
//! ```toml
//! seed = 0
//!
//! [synth]            # corpus: states, speakers, dim, noise, lengths, size
//! num_semantic_states = 8
//! num_speakers = 8
//! dim = 16
//!
//! [rvq]              # quantizer: layers, codebook size, EMA, k-means passes
//! num_layers = 4
//! codebook_size = 16
//!
//! [flow]             # field network preset and training schedule
//! preset = "tiny"
//! steps = 1000
//! batch_size = 4
//!
//! [ar]               # semantic token model
//! steps = 1500
//!
//! [discrete]         # masked-token baseline
//! steps = 1000
//!
//! [eval]             # held-out pairs, prompt fraction, sweeps
//! num_pairs = 32
//! prompt_fraction = 0.25
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::harness::synth::SynthConfig;
use crate::nn::{NetConfig, Preset};
use crate::ode::SolverMethod;
use crate::optim::AdamConfig;
use crate::rvq::RvqConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowSection {
    pub preset: Preset,
    /// Replaces the preset when given.
    pub net: Option<NetConfig>,
    pub steps: usize,
    pub batch_size: usize,
    pub prior_sigma: f64,
    pub sigma_min: f64,
    pub method: SolverMethod,
    pub adam: AdamConfig,
    /// Scaling study only: each size trains at `lr · (h_tiny / h)^p`.
    pub lr_width_exponent: f64,
}

impl Default for FlowSection {
    fn default() -> Self {
        FlowSection {
            preset: Preset::Tiny,
            net: None,
            steps: 1000,
            batch_size: 4,
            prior_sigma: 1.0,
            sigma_min: 0.0,
            method: SolverMethod::Euler,
            adam: AdamConfig::default(),
            lr_width_exponent: 0.0,
        }
    }
}

impl FlowSection {
    pub fn net_config(&self) -> NetConfig {
        self.net.clone().unwrap_or_else(|| NetConfig::preset(self.preset))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArSection {
    pub layers: usize,
    pub hidden_dim: usize,
    pub ffn_dim: usize,
    pub heads: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
}

impl Default for ArSection {
    fn default() -> Self {
        ArSection {
            layers: 2,
            hidden_dim: 64,
            ffn_dim: 256,
            heads: 4,
            steps: 1500,
            batch_size: 4,
            adam: AdamConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiscreteSection {
    pub preset: Preset,
    pub net: Option<NetConfig>,
    pub steps: usize,
    pub batch_size: usize,
    /// Sampling temperature at decode time; 0 commits the argmax.
    pub temperature: f64,
    pub adam: AdamConfig,
}

impl Default for DiscreteSection {
    fn default() -> Self {
        DiscreteSection {
            preset: Preset::Tiny,
            net: None,
            steps: 1000,
            batch_size: 4,
            temperature: 0.0,
            adam: AdamConfig::default(),
        }
    }
}

impl DiscreteSection {
    pub fn net_config(&self) -> NetConfig {
        self.net.clone().unwrap_or_else(|| NetConfig::preset(self.preset))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Held-out (source, prompt) pairs per evaluation.
    pub num_pairs: usize,
    pub prompt_fraction: f64,
    /// ODE step counts for the prior sweep.
    pub ode_steps: Vec<usize>,
    /// Decode iteration counts for the chain comparison.
    pub iterations: Vec<usize>,
    /// Inference iterations used by the scaling and continuous/discrete runs.
    pub fixed_iterations: usize,
    /// Loss checkpoints are means over this many consecutive steps.
    pub loss_window: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            num_pairs: 32,
            prompt_fraction: 0.25,
            ode_steps: vec![1, 2, 4, 8, 16],
            iterations: vec![1, 2, 4, 8],
            fixed_iterations: 8,
            loss_window: 25,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub synth: SynthConfig,
    pub rvq: RvqConfig,
    pub flow: FlowSection,
    pub ar: ArSection,
    pub discrete: DiscreteSection,
    pub eval: EvalSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            synth: SynthConfig::default(),
            rvq: RvqConfig::default(),
            flow: FlowSection::default(),
            ar: ArSection::default(),
            discrete: DiscreteSection::default(),
            eval: EvalSection::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::ConfigParse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::ConfigParse(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.rvq.validate()?;
        if self.rvq.dim != self.synth.dim {
            return Err(Error::InvalidConfig(format!(
                "rvq.dim {} differs from synth.dim {}",
                self.rvq.dim, self.synth.dim
            )));
        }
        self.flow.net_config().validate()?;
        self.discrete.net_config().validate()?;
        if self.flow.batch_size == 0 || self.ar.batch_size == 0 || self.discrete.batch_size == 0 {
            return Err(Error::InvalidConfig("batch sizes must be ≥ 1".into()));
        }
        if !self.flow.lr_width_exponent.is_finite() {
            return Err(Error::InvalidConfig("flow.lr_width_exponent must be finite".into()));
        }
        let e = &self.eval;
        if e.num_pairs == 0 || !(e.prompt_fraction > 0.0 && e.prompt_fraction < 1.0) {
            return Err(Error::InvalidConfig(
                "eval needs num_pairs ≥ 1 and prompt_fraction in (0,1)".into(),
            ));
        }
        if e.ode_steps.contains(&0) || e.iterations.contains(&0) || e.fixed_iterations == 0 || e.loss_window == 0 {
            return Err(Error::InvalidConfig("step and iteration counts must be ≥ 1".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn digest(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}
