use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which attention branch the network uses. Only [`MaskKind::Hourglass`] is
/// the full model; the other two keep the ablation variants constructible.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskKind {
    /// Multi-scale hourglass mask branch.
    Hourglass,
    /// Two residual blocks at a single resolution, then conv + sigmoid.
    SingleScale,
    /// No mask branch: attended features equal the feature branch output.
    None,
}

impl MaskKind {
    pub(crate) fn code(self) -> u32 {
        match self {
            MaskKind::Hourglass => 0,
            MaskKind::SingleScale => 1,
            MaskKind::None => 2,
        }
    }

    pub(crate) fn from_code(code: u32) -> Option<Self> {
        match code {
            0 => Some(MaskKind::Hourglass),
            1 => Some(MaskKind::SingleScale),
            2 => Some(MaskKind::None),
            _ => None,
        }
    }
}

/// Architecture and per-class decision hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Event class this binary detector is trained for.
    pub label: String,
    /// Feature channels inside the attention module (C).
    pub channels: usize,
    /// Hidden units per GRU direction (U).
    pub gru_units: usize,
    pub gru_layers: usize,
    /// Mel bins (D).
    pub n_mels: usize,
    /// Training chunk length in frames (T).
    pub chunk_frames: usize,
    pub chunk_shift: usize,
    /// Resolutions visited by the mask branch; `n_scales - 1` poolings.
    pub n_scales: usize,
    pub dropout: f64,
    pub threshold: f64,
    pub mask: MaskKind,
}

/// Per-class `(dropout, threshold)` defaults for the three target events.
pub fn class_defaults(label: &str) -> Option<(f64, f64)> {
    match label {
        "babycry" => Some((0.3, 0.4)),
        "glassbreak" => Some((0.3, 0.2)),
        "gunshot" => Some((0.4, 0.4)),
        _ => None,
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            label: "event".into(),
            channels: 64,
            gru_units: 64,
            gru_layers: 2,
            n_mels: 128,
            chunk_frames: 256,
            chunk_shift: 128,
            n_scales: 4,
            dropout: 0.3,
            threshold: 0.4,
            mask: MaskKind::Hourglass,
        }
    }
}

impl ModelConfig {
    /// Full-size configuration for a known class, `None` for unknown labels.
    pub fn for_class(label: &str) -> Option<Self> {
        let (dropout, threshold) = class_defaults(label)?;
        Some(Self {
            label: label.into(),
            dropout,
            threshold,
            ..Self::default()
        })
    }

    /// Time and frequency sizes must be multiples of this.
    pub fn size_multiple(&self) -> usize {
        1 << (self.n_scales - 1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.channels == 0 || self.gru_units == 0 || self.gru_layers == 0 {
            return bad("channels, gru_units and gru_layers must be positive".into());
        }
        if self.n_scales == 0 || self.n_scales > 8 {
            return bad(format!("n_scales {} outside 1..=8", self.n_scales));
        }
        let m = self.size_multiple();
        if !self.n_mels.is_multiple_of(m) || !self.chunk_frames.is_multiple_of(m) {
            return bad(format!(
                "n_mels {} and chunk_frames {} must be divisible by {m}",
                self.n_mels, self.chunk_frames
            ));
        }
        if self.chunk_shift == 0 {
            return bad("chunk_shift must be positive".into());
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return bad(format!("threshold {} outside (0,1)", self.threshold));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0,1)", self.dropout));
        }
        Ok(())
    }
}
