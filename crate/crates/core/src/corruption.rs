//! Closed-form photometric corruptions with a fixed severity ladder.

use ndarray::Array3;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorruptionKind {
    Brightness,
    Contrast,
    Dark,
}

impl CorruptionKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "brightness" => Ok(Self::Brightness),
            "contrast" => Ok(Self::Contrast),
            "dark" => Ok(Self::Dark),
            other => Err(Error::Invalid(format!("unknown corruption kind {other:?}"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Brightness => "brightness",
            Self::Contrast => "contrast",
            Self::Dark => "dark",
        }
    }
}

pub const ALLOWED_SEVERITIES: [u8; 3] = [1, 3, 5];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    pub severity: u8,
}

impl CorruptionSpec {
    pub fn new(kind: CorruptionKind, severity: u8) -> Result<Self> {
        if !ALLOWED_SEVERITIES.contains(&severity) {
            return Err(Error::Invalid(format!(
                "severity must be one of {ALLOWED_SEVERITIES:?}, got {severity}"
            )));
        }
        Ok(Self { kind, severity })
    }
}

/// Apply a corruption to a (3,H,W) image with values in [0,1]; the result
/// stays in [0,1].
pub fn corrupt(image: &Array3<f64>, spec: CorruptionSpec) -> Array3<f64> {
    let s = spec.severity as f64;
    match spec.kind {
        CorruptionKind::Brightness => image.mapv(|x| (x + 0.1 * s).clamp(0.0, 1.0)),
        CorruptionKind::Contrast => {
            let k = 1.0 - 0.12 * s;
            image.mapv(|x| (0.5 + (x - 0.5) * k).clamp(0.0, 1.0))
        }
        CorruptionKind::Dark => {
            let k = 1.0 - 0.12 * s;
            image.mapv(|x| (x * k).clamp(0.0, 1.0))
        }
    }
}
