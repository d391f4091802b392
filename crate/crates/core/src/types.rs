use crate::error::{mismatch, Result};
use crate::tensor::Tensor;

/// Encoded video: patch embeddings `[N, n², D]` and frame CLS tokens `[N, D]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameBundle {
    pub patches: Tensor,
    pub cls: Tensor,
}

impl FrameBundle {
    pub fn new(patches: Tensor, cls: Tensor) -> Result<Self> {
        let ps = patches.shape();
        if ps.len() != 3 || cls.shape() != [ps[0], ps[2]] {
            return Err(mismatch(format!(
                "patches {:?} vs cls {:?}",
                ps,
                cls.shape()
            )));
        }
        Ok(Self { patches, cls })
    }

    pub fn frames(&self) -> usize {
        self.patches.shape()[0]
    }

    pub fn patches_per_frame(&self) -> usize {
        self.patches.shape()[1]
    }

    pub fn dim(&self) -> usize {
        self.patches.shape()[2]
    }

    /// Patches of frame `f`, flattened to `n²·D`.
    pub fn frame(&self, f: usize) -> &[f64] {
        let w = self.patches_per_frame() * self.dim();
        &self.patches.data()[f * w..(f + 1) * w]
    }
}

/// Encoded sentence: token outputs `[M, D]`; the sentence token is row 0.
#[derive(Clone, Debug, PartialEq)]
pub struct TextBundle {
    pub words: Tensor,
}

impl TextBundle {
    pub fn cls(&self) -> &[f64] {
        self.words.row(0)
    }
}
