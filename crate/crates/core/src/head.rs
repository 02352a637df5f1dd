//! Fusion, classification head, loss and the ablation variants.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{bce_value, Tape, Var};
use crate::error::{CmtaError, Result};
use crate::params::{xavier_uniform, zeros_bias, ParamStore};
use crate::tensor::Real;

/// Which branches and modalities a model uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationVariant {
    /// Coarse GRU branch and fine encoder branch, fused.
    #[default]
    Full,
    /// Fine branch over visual embeddings only.
    VOnly,
    /// Fine branch over textual embeddings only.
    TOnly,
    /// Coarse branch only.
    VtCgtm,
    /// Fine branch over both modalities only.
    VtFgtm,
}

impl AblationVariant {
    pub const ALL: [AblationVariant; 5] = [
        AblationVariant::Full,
        AblationVariant::VOnly,
        AblationVariant::TOnly,
        AblationVariant::VtCgtm,
        AblationVariant::VtFgtm,
    ];

    pub fn uses_coarse(self) -> bool {
        matches!(self, AblationVariant::Full | AblationVariant::VtCgtm)
    }

    pub fn uses_fine(self) -> bool {
        self != AblationVariant::VtCgtm
    }

    /// Width of the encoder's per-frame input.
    pub fn fine_input_dim(self, d_v: usize, d_e: usize) -> usize {
        match self {
            AblationVariant::VOnly => d_v,
            AblationVariant::TOnly => d_e,
            _ => d_v + d_e,
        }
    }

    /// Width of the vector fed to the classification head.
    pub fn fusion_dim(self, hidden: usize, model_dim: usize) -> usize {
        match self {
            AblationVariant::Full => hidden + model_dim,
            AblationVariant::VtCgtm => hidden,
            _ => model_dim,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            AblationVariant::Full => "full",
            AblationVariant::VOnly => "v-only",
            AblationVariant::TOnly => "t-only",
            AblationVariant::VtCgtm => "vt-cgtm",
            AblationVariant::VtFgtm => "vt-fgtm",
        }
    }
}

impl fmt::Display for AblationVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AblationVariant {
    type Err = CmtaError;
    fn from_str(s: &str) -> Result<Self> {
        AblationVariant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| CmtaError::config(format!("unknown variant `{s}` (full|v-only|t-only|vt-cgtm|vt-fgtm)")))
    }
}

/// FC layer `2 × D_f` plus bias.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeadParams {
    pub input_dim: usize,
    pub w: usize,
    pub b: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct HeadVars {
    pub w: Var,
    pub b: Var,
}

impl HeadParams {
    pub fn register<F: Real, R: Rng + ?Sized>(store: &mut ParamStore<F>, input_dim: usize, rng: &mut R) -> Self {
        HeadParams {
            input_dim,
            w: store.add("head.w", xavier_uniform(2, input_dim, rng)),
            b: store.add("head.b", zeros_bias(2)),
        }
    }

    pub fn bind<'a, F: Real>(&self, tape: &mut Tape<'a, F>, store: &'a ParamStore<F>) -> HeadVars {
        HeadVars {
            w: store.bind(tape, self.w),
            b: store.bind(tape, self.b),
        }
    }
}

/// `h_fusion = [h_T; h_fine]`, coarse first. Only the full model fuses.
pub fn fuse<F: Real>(tape: &mut Tape<'_, F>, h_coarse: Var, h_fine: Var, variant: AblationVariant) -> Result<Var> {
    if variant != AblationVariant::Full {
        return Err(CmtaError::config(format!("fusion is only defined for the full model, not {variant}")));
    }
    tape.concat_cols(&[h_coarse, h_fine])
}

/// `softmax(W·h + b)` as a `1×2` row `(p_real, p_fake)`.
pub fn classify<F: Real>(tape: &mut Tape<'_, F>, h: Var, head: &HeadVars) -> Result<Var> {
    let logits = tape.matmul_bt(h, head.w)?;
    let logits = tape.add_row(logits, head.b)?;
    Ok(tape.softmax_rows(logits))
}

/// Binary cross-entropy on the fake-class probability, clamped to
/// `[1e-7, 1 − 1e-7]`.
pub fn bce_loss<F: Real>(p_fake: F, label: u8) -> F {
    bce_value(p_fake, label)
}
