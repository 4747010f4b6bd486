//! Small differentiable temporal model with hand-written gradients.
//!
//! Encoder per modality: a per-frame mixing layer (`tanh(W x + b)`) over the
//! flattened joints or feature vector, a bidirectional GRU, and a linear
//! projection of the concatenated directions into the shared embedding
//! space. Several encoders are fused by addition. Two linear heads emit
//! coarse (T x 2) and fine (T x C) logits.

pub mod checkpoint;
mod gru;
pub mod linalg;
mod model;
pub mod optim;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointHeader};
pub use model::{Arch, EmbedPass, Embeddings, ForwardPass, ModelState, OptState};
pub use optim::lr_at;

use crate::error::{shape_err, Result};
use crate::tensor::{Mat, PoseTensor};

/// Skeleton encoder output for a pose sequence.
pub fn forward_teacher(m: &ModelState, pose: &PoseTensor) -> Result<Embeddings> {
    if m.arch.inputs.len() != 1 || m.arch.inputs[0] != pose.frame_dim() {
        return Err(shape_err(format!(
            "teacher expects one {:?}-wide input, pose frames are {} wide",
            m.arch.inputs,
            pose.frame_dim()
        )));
    }
    Ok(m.forward_embeddings(&[&pose.as_frames()])?.embeddings)
}

/// Single-modality encoder output for a T x D_m feature sequence.
pub fn forward_student(m: &ModelState, feat: &Mat) -> Result<Embeddings> {
    if m.arch.inputs.len() != 1 {
        return Err(shape_err("student models have exactly one encoder"));
    }
    Ok(m.forward_embeddings(&[feat])?.embeddings)
}

pub fn fuse(a: &Embeddings, b: &Embeddings) -> Result<Embeddings> {
    if a.0.shape() != b.0.shape() {
        return Err(shape_err(format!(
            "cannot fuse {:?} with {:?}",
            a.0.shape(),
            b.0.shape()
        )));
    }
    let data = a.0.data.iter().zip(&b.0.data).map(|(x, y)| x + y).collect();
    Ok(Embeddings(Mat::from_vec(a.0.rows, a.0.cols, data)?))
}

/// Raw coarse (T x 2) and fine (T x C) logits.
pub fn detect(m: &ModelState, e: &Embeddings) -> Result<(Mat, Mat)> {
    if e.dim() != m.arch.embed {
        return Err(shape_err(format!(
            "embedding width {} does not match model D_e={}",
            e.dim(),
            m.arch.embed
        )));
    }
    Ok(m.heads(&e.0))
}
