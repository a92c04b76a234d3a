//! Black-box adversarial naturalization of computer-generated images: an
//! H-Net (twin autoencoders plus a latent transformer) trained against a
//! frozen, score-only natural-vs-CG detector.

pub mod detector;
pub mod eval;
pub mod format;
pub mod image;
pub mod losses;
pub mod model;
pub mod training;

use serde::{Deserialize, Serialize};

/// Image class. Detector scores are probabilities of `Natural`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Natural,
    Cg,
}

impl Label {
    /// Target value for cross-entropy: natural 1, CG 0.
    pub fn target(self) -> f64 {
        match self {
            Label::Natural => 1.0,
            Label::Cg => 0.0,
        }
    }
}
