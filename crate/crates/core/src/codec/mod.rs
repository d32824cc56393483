//! Hyperprior codec with point-cloud context injection.

pub mod bitstream;
pub mod checkpoint;
pub mod coder;
pub mod entropy;
pub mod model;
pub mod transforms;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Rate-distortion weights; models are trained for one entry each.
pub const LAMBDAS: [f64; 4] = [0.004, 0.008, 0.016, 0.032];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InjectionSides {
    Encoder,
    Decoder,
    #[default]
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CodecConfig {
    /// Transform width.
    pub n_channels: usize,
    /// Latent width.
    pub m_channels: usize,
    pub lambda_index: u8,
    pub conditional: bool,
    pub injection_sides: InjectionSides,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            n_channels: 192,
            m_channels: 128,
            lambda_index: 0,
            conditional: true,
            injection_sides: InjectionSides::Both,
        }
    }
}

impl CodecConfig {
    pub fn lambda(&self) -> f64 {
        LAMBDAS[self.lambda_index as usize]
    }

    pub fn validate(&self) -> Result<()> {
        let err = |field: &str, message: String| Error::InvalidConfig {
            field: field.into(),
            message,
        };
        if self.n_channels == 0 {
            return Err(err("codec.n_channels", "must be positive".into()));
        }
        if self.m_channels < 2 {
            return Err(err("codec.m_channels", "must be at least 2".into()));
        }
        if self.lambda_index as usize >= LAMBDAS.len() {
            return Err(err(
                "codec.lambda_index",
                format!("{} is out of range 0..{}", self.lambda_index, LAMBDAS.len()),
            ));
        }
        Ok(())
    }
}
