//! Frame-wise cross-modal cosine similarity.

use crate::autodiff::{Tape, Var, COSINE_EPS};
use crate::error::{CmtaError, Result};
use crate::tensor::{c, dot, Real, Tensor};

/// Per-frame similarities `s_1..s_T` as a `T×1` tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilaritySequence<F>(pub Tensor<F>);

impl<F: Real> SimilaritySequence<F> {
    pub fn values(&self) -> &[F] {
        self.0.data()
    }

    pub fn len(&self) -> usize {
        self.0.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// `v·e / (max(‖v‖, ε) · max(‖e‖, ε))`
pub fn cosine<F: Real>(v: &[F], e: &[F]) -> Result<F> {
    if v.len() != e.len() {
        return Err(CmtaError::config(format!(
            "cosine: dimension mismatch ({} vs {})",
            v.len(),
            e.len()
        )));
    }
    let eps = c::<F>(COSINE_EPS);
    let nv = dot(v, v).sqrt().max(eps);
    let ne = dot(e, e).sqrt().max(eps);
    Ok(dot(v, e) / (nv * ne))
}

fn check_paired(visual: &Tensor<impl Real>, textual: &Tensor<impl Real>) -> Result<()> {
    if visual.cols() != textual.cols() {
        return Err(CmtaError::config(format!(
            "similarity needs paired embedding spaces: d_v = {} but d_e = {}",
            visual.cols(),
            textual.cols()
        )));
    }
    if visual.rows() != textual.rows() {
        return Err(CmtaError::config(format!(
            "frame counts differ: {} visual vs {} textual",
            visual.rows(),
            textual.rows()
        )));
    }
    Ok(())
}

/// Similarity sequence of a clip without recording a tape.
pub fn similarity_sequence<F: Real>(visual: &Tensor<F>, textual: &Tensor<F>) -> Result<SimilaritySequence<F>> {
    check_paired(visual, textual)?;
    let vals = (0..visual.rows())
        .map(|t| cosine(visual.row(t), textual.row(t)))
        .collect::<Result<Vec<F>>>()?;
    Ok(SimilaritySequence(Tensor::new(vec![vals.len(), 1], vals)?))
}

/// Records the similarity sequence on a tape. Gradients reach the embeddings
/// only when `visual`/`textual` were registered as trainable leaves.
pub fn similarity_on_tape<F: Real>(tape: &mut Tape<'_, F>, visual: Var, textual: Var) -> Result<Var> {
    check_paired(tape.value(visual), tape.value(textual))?;
    tape.cosine_rows(visual, textual)
}
