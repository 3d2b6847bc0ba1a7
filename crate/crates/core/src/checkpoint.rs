//! JSON checkpoints for the guidance model and the denoiser.
//!
//! Floats are written in shortest round-trip form and parsed with correct
//! rounding, so save/load is value-exact.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::diffusion::{make_schedule, DenoiserNet, Linear, NoiseSchedule};
use crate::guidance::{GuidanceModel, LoraAdapter};
use crate::numkit::Tensor2;
use crate::{Error, Result};

pub const GUIDANCE_FORMAT: &str = "cgsd-guidance-v1";
pub const DENOISER_FORMAT: &str = "cgsd-denoiser-v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuidanceCheckpoint {
    pub format: String,
    pub d_in: usize,
    pub hidden: usize,
    pub d: usize,
    pub k: usize,
    pub rank: usize,
    pub alpha: f64,
    pub log_scale: f64,
    /// Set once stage 1 has finished; stage 2 refuses unfrozen guidance.
    pub frozen: bool,
    pub w1: Tensor2,
    pub b1: Tensor2,
    pub w2: Tensor2,
    pub b2: Tensor2,
    pub lora_a: Tensor2,
    pub lora_b: Tensor2,
    pub prompts: Tensor2,
}

impl GuidanceCheckpoint {
    pub fn from_model(model: &GuidanceModel, frozen: bool) -> Self {
        Self {
            format: GUIDANCE_FORMAT.into(),
            d_in: model.d_in(),
            hidden: model.w1.rows(),
            d: model.feature_dim(),
            k: model.k(),
            rank: model.adapter.rank,
            alpha: model.adapter.alpha,
            log_scale: model.log_scale,
            frozen,
            w1: model.w1.clone(),
            b1: model.b1.clone(),
            w2: model.w2.clone(),
            b2: model.b2.clone(),
            lora_a: model.adapter.a.clone(),
            lora_b: model.adapter.b.clone(),
            prompts: model.prompts.clone(),
        }
    }

    pub fn into_model(self) -> Result<GuidanceModel> {
        let model = GuidanceModel {
            w1: self.w1,
            b1: self.b1,
            w2: self.w2,
            b2: self.b2,
            adapter: LoraAdapter {
                a: self.lora_a,
                b: self.lora_b,
                rank: self.rank,
                alpha: self.alpha,
            },
            prompts: self.prompts,
            log_scale: self.log_scale,
        };
        model.validate()?;
        let dims = (model.d_in(), model.w1.rows(), model.feature_dim(), model.k());
        if dims != (self.d_in, self.hidden, self.d, self.k) {
            return Err(Error::Data("guidance checkpoint header disagrees with weights".into()));
        }
        Ok(model)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    pub t_total: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl ScheduleSpec {
    pub fn of(s: &NoiseSchedule) -> Self {
        Self {
            t_total: s.t_total,
            beta_start: s.beta_start,
            beta_end: s.beta_end,
        }
    }

    pub fn build(&self) -> Result<NoiseSchedule> {
        make_schedule(self.t_total, self.beta_start, self.beta_end)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserCheckpoint {
    pub format: String,
    pub layout: String,
    pub feature_dim: usize,
    pub k: usize,
    pub temb_dim: usize,
    pub schedule: ScheduleSpec,
    pub ema_mu: f64,
    /// Raw weights at the end of training.
    pub weights: Vec<Linear>,
    /// EMA shadow weights; these are the ones used for inference.
    pub ema: Vec<Linear>,
}

impl DenoiserCheckpoint {
    pub fn new(raw: &DenoiserNet, ema: &DenoiserNet, sched: &NoiseSchedule, ema_mu: f64) -> Self {
        Self {
            format: DENOISER_FORMAT.into(),
            layout: raw.layout(),
            feature_dim: raw.feature_dim,
            k: raw.k,
            temb_dim: raw.temb_dim,
            schedule: ScheduleSpec::of(sched),
            ema_mu,
            weights: raw.layers.clone(),
            ema: ema.layers.clone(),
        }
    }

    fn net(&self, layers: &[Linear]) -> Result<DenoiserNet> {
        let net = DenoiserNet {
            feature_dim: self.feature_dim,
            k: self.k,
            temb_dim: self.temb_dim,
            layers: layers.to_vec(),
        };
        net.validate()?;
        if net.layout() != self.layout {
            return Err(Error::Data(format!(
                "denoiser layout {:?} does not match weights ({})",
                self.layout,
                net.layout()
            )));
        }
        Ok(net)
    }

    /// The EMA network used for inference.
    pub fn inference_net(&self) -> Result<DenoiserNet> {
        self.net(&self.ema)
    }

    pub fn raw_net(&self) -> Result<DenoiserNet> {
        self.net(&self.weights)
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string(value)?;
    text.push('\n');
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_versioned<T: DeserializeOwned>(path: &Path, expected: &str) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let found = value.get("format").and_then(|f| f.as_str()).unwrap_or("");
    if found != expected {
        return Err(Error::Version {
            expected: expected.into(),
            found: found.into(),
        });
    }
    serde_json::from_value(value).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

pub fn save_guidance(path: &Path, ckpt: &GuidanceCheckpoint) -> Result<()> {
    write_json(path, ckpt)
}

pub fn load_guidance(path: &Path) -> Result<GuidanceCheckpoint> {
    read_versioned(path, GUIDANCE_FORMAT)
}

pub fn save_denoiser(path: &Path, ckpt: &DenoiserCheckpoint) -> Result<()> {
    write_json(path, ckpt)
}

pub fn load_denoiser(path: &Path) -> Result<DenoiserCheckpoint> {
    read_versioned(path, DENOISER_FORMAT)
}

/// Hex SHA-256 of any serializable value's JSON form.
pub fn digest<T: Serialize>(value: &T) -> String {
    use sha2::{Digest, Sha256};
    let bytes = serde_json::to_vec(value).expect("serializable value");
    let hash = Sha256::digest(&bytes);
    hash.iter().map(|b| format!("{b:02x}")).collect()
}
