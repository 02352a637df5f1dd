//! The assembled detector: parameter layout, forward pass for every ablation
//! variant, and per-clip loss/gradient evaluation.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::embeddings::EmbeddingClip;
use crate::encoder::{
    embed_sequence, encoder_forward, fuse_frames, temporal_pool, Dropout, EncoderParams, EncoderShape,
};
use crate::error::{CmtaError, Result};
use crate::gru::{gru_forward, initial_state, GruParams};
use crate::head::{classify, fuse, AblationVariant, HeadParams};
use crate::params::ParamStore;
use crate::similarity::similarity_on_tape;
use crate::tensor::{Real, Tensor};

/// Architecture hyperparameters. Embedding widths come from the data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_v: usize,
    pub d_e: usize,
    pub clip_len: usize,
    pub hidden: usize,
    pub model_dim: usize,
    pub ff_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub variant: AblationVariant,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_v", self.d_v),
            ("d_e", self.d_e),
            ("clip_len", self.clip_len),
            ("hidden", self.hidden),
            ("model_dim", self.model_dim),
            ("ff_dim", self.ff_dim),
            ("heads", self.heads),
        ];
        if let Some((k, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(CmtaError::config(format!("`{k}` must be positive")));
        }
        if !self.model_dim.is_multiple_of(self.heads) {
            return Err(CmtaError::config(format!(
                "model_dim {} must be divisible by heads {}",
                self.model_dim, self.heads
            )));
        }
        if self.variant.uses_coarse() && self.d_v != self.d_e {
            return Err(CmtaError::config(format!(
                "variant {} needs paired embeddings but d_v = {} and d_e = {}",
                self.variant, self.d_v, self.d_e
            )));
        }
        Ok(())
    }

    pub fn fusion_dim(&self) -> usize {
        self.variant.fusion_dim(self.hidden, self.model_dim)
    }
}

/// Detector parameters. Both branches are always allocated so that every
/// variant shares a layout; branches a variant does not use simply receive no
/// gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<F> {
    pub config: ModelConfig,
    pub store: ParamStore<F>,
    pub gru: GruParams,
    pub encoder: EncoderParams,
    pub head: HeadParams,
}

/// Result of one forward pass.
pub struct ForwardOutput {
    /// `1×2` `(p_real, p_fake)`.
    pub probs: Var,
    /// Vector fed to the classification head.
    pub features: Var,
}

impl<F: Real> Model<F> {
    /// Xavier-uniform weights, zero biases, unit layer-norm scales.
    pub fn init<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let gru = GruParams::register(&mut store, config.hidden, rng);
        let encoder = EncoderParams::register(
            &mut store,
            EncoderShape {
                input_dim: config.variant.fine_input_dim(config.d_v, config.d_e),
                model_dim: config.model_dim,
                ff_dim: config.ff_dim,
                clip_len: config.clip_len,
                layers: config.layers,
                heads: config.heads,
            },
            rng,
        )?;
        let head = HeadParams::register(&mut store, config.fusion_dim(), rng);
        Ok(Model {
            config,
            store,
            gru,
            encoder,
            head,
        })
    }

    /// Ids of parameters the active variant actually reads.
    pub fn active_param_ids(&self) -> Vec<usize> {
        let v = self.config.variant;
        let mut ids = Vec::new();
        if v.uses_coarse() {
            ids.extend(self.gru.ids());
        }
        if v.uses_fine() {
            ids.extend(self.encoder.ids());
        }
        ids.extend([self.head.w, self.head.b]);
        ids
    }

    pub fn check_clip(&self, clip: &EmbeddingClip) -> Result<()> {
        let c = &self.config;
        if clip.visual_dim() != c.d_v || clip.textual_dim() != c.d_e {
            return Err(CmtaError::config(format!(
                "clip `{}` has d_v={}, d_e={} but the model expects d_v={}, d_e={}",
                clip.clip_id,
                clip.visual_dim(),
                clip.textual_dim(),
                c.d_v,
                c.d_e
            )));
        }
        if clip.frames() != c.clip_len {
            return Err(CmtaError::config(format!(
                "clip `{}` has {} frames, model is bound to {}",
                clip.clip_id,
                clip.frames(),
                c.clip_len
            )));
        }
        Ok(())
    }

    /// Records the forward pass on `tape` for a clip of exactly `clip_len`
    /// frames whose embeddings are already on the tape.
    pub fn forward_vars<'a>(
        &'a self,
        tape: &mut Tape<'a, F>,
        visual: Var,
        textual: Var,
        dropout: Option<&mut Dropout<'_>>,
    ) -> Result<ForwardOutput> {
        let variant = self.config.variant;
        let coarse = if variant.uses_coarse() {
            let seq = similarity_on_tape(tape, visual, textual)?;
            let vars = self.gru.bind(tape, &self.store);
            let h0 = initial_state(tape, self.config.hidden);
            Some(gru_forward(tape, seq, &vars, h0)?)
        } else {
            None
        };
        let fine = if variant.uses_fine() {
            let x = match variant {
                AblationVariant::VOnly => visual,
                AblationVariant::TOnly => textual,
                _ => fuse_frames(tape, visual, textual)?,
            };
            let vars = self.encoder.bind(tape, &self.store);
            let u0 = embed_sequence(tape, x, &vars)?;
            let ul = encoder_forward(tape, u0, &vars, self.encoder.heads, dropout)?;
            Some(temporal_pool(tape, ul))
        } else {
            None
        };
        let features = match (coarse, fine) {
            (Some(h), Some(f)) => fuse(tape, h, f, variant)?,
            (Some(h), None) => h,
            (None, Some(f)) => f,
            (None, None) => unreachable!("every variant uses a branch"),
        };
        let head = self.head.bind(tape, &self.store);
        let probs = classify(tape, features, &head)?;
        Ok(ForwardOutput { probs, features })
    }

    fn clip_vars<'a>(&'a self, tape: &mut Tape<'a, F>, clip: &EmbeddingClip) -> Result<(Var, Var)> {
        self.check_clip(clip)?;
        Ok((tape.constant(clip.visual.cast()), tape.constant(clip.textual.cast())))
    }

    /// `(p_real, p_fake)` for one clip.
    pub fn predict(&self, clip: &EmbeddingClip) -> Result<(F, F)> {
        let mut tape = Tape::new();
        let (v, e) = self.clip_vars(&mut tape, clip)?;
        let out = self.forward_vars(&mut tape, v, e, None)?;
        let p = tape.value(out.probs).data();
        Ok((p[0], p[1]))
    }

    /// The pre-head representation of one clip.
    pub fn features(&self, clip: &EmbeddingClip) -> Result<Vec<F>> {
        let mut tape = Tape::new();
        let (v, e) = self.clip_vars(&mut tape, clip)?;
        let out = self.forward_vars(&mut tape, v, e, None)?;
        Ok(tape.value(out.features).data().to_vec())
    }

    /// BCE loss of one clip; adds the parameter gradient into `grads`.
    pub fn loss_and_grad(
        &self,
        clip: &EmbeddingClip,
        grads: &mut [Tensor<F>],
        dropout: Option<&mut Dropout<'_>>,
    ) -> Result<F> {
        let mut tape = Tape::new();
        let (v, e) = self.clip_vars(&mut tape, clip)?;
        let out = self.forward_vars(&mut tape, v, e, dropout)?;
        let loss = tape.bce(out.probs, clip.label.as_u8())?;
        tape.backward_into(loss, grads);
        Ok(tape.value(loss).data()[0])
    }

    pub fn loss(&self, clip: &EmbeddingClip) -> Result<F> {
        let mut tape = Tape::new();
        let (v, e) = self.clip_vars(&mut tape, clip)?;
        let out = self.forward_vars(&mut tape, v, e, None)?;
        let loss = tape.bce(out.probs, clip.label.as_u8())?;
        Ok(tape.value(loss).data()[0])
    }

    pub fn cast<G: Real>(&self) -> Model<G> {
        Model {
            config: self.config,
            store: self.store.cast(),
            gru: self.gru,
            encoder: self.encoder.clone(),
            head: self.head,
        }
    }
}

/// Deterministic dropout stream for one clip of one training step.
pub fn dropout_rng(seed: u64, step: u64, index: u64) -> ChaCha8Rng {
    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xD1B5_4A32_D192_ED03);
    rng.set_stream(step.wrapping_mul(0x1_0000_0000).wrapping_add(index));
    rng
}
