//! Training objectives: class-weighted coarse cross-entropy, fine
//! multi-label BCE, the pseudo-label loss, the annealed Stage I total and
//! the embedding alignment loss.
//!
//! Loss functions take a batch as parallel slices (one entry per clip) and
//! return gradients w.r.t. the raw logits alongside the value.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::events::FrameLabels;
use crate::nn::Embeddings;
use crate::pseudo::PseudoLabels;
use crate::tensor::Mat;

/// Raw head outputs for one clip.
#[derive(Debug, Clone, Copy)]
pub struct Preds<'a> {
    pub coarse: &'a Mat,
    pub fine: &'a Mat,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub value: f64,
    pub d_coarse: Vec<Mat>,
    pub d_fine: Vec<Mat>,
}

impl LossGrad {
    pub fn scale(mut self, k: f64) -> Self {
        self.value *= k;
        for m in self.d_coarse.iter_mut().chain(self.d_fine.iter_mut()) {
            m.data.iter_mut().for_each(|g| *g *= k);
        }
        self
    }
}

fn log_sum_exp2(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Softmax cross-entropy over the two coarse classes, each frame weighted
/// by `fg_weight` (label 1) or 1 (label 0), normalized by the weight sum.
pub fn coarse_loss_grad(logits: &[&Mat], labels: &[&[u8]], fg_weight: f64) -> Result<(f64, Vec<Mat>)> {
    if !(fg_weight > 0.0 && fg_weight.is_finite()) {
        return Err(Error::Argument(format!("fg_weight must be positive, got {fg_weight}")));
    }
    if logits.len() != labels.len() {
        return Err(shape_err("coarse logits and labels have different batch sizes"));
    }
    let mut weight_sum = 0.0;
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(logits.len());
    for (l, y) in logits.iter().zip(labels) {
        if l.cols != 2 || l.rows != y.len() {
            return Err(shape_err(format!("coarse logits {:?} vs {} labels", l.shape(), y.len())));
        }
        let mut g = Mat::zeros(l.rows, 2);
        for (t, &label) in y.iter().enumerate() {
            let row = l.row(t);
            let lse = log_sum_exp2(row[0], row[1]);
            let k = usize::from(label == 1);
            let w = if k == 1 { fg_weight } else { 1.0 };
            weight_sum += w;
            total += w * (lse - row[k]);
            let gr = g.row_mut(t);
            for c in 0..2 {
                let p = (row[c] - lse).exp();
                gr[c] = w * (p - if c == k { 1.0 } else { 0.0 });
            }
        }
        grads.push(g);
    }
    if weight_sum == 0.0 {
        return Err(Error::Empty("coarse loss over zero frames".into()));
    }
    for g in &mut grads {
        g.data.iter_mut().for_each(|x| *x /= weight_sum);
    }
    Ok((total / weight_sum, grads))
}

pub fn coarse_loss(logits: &[&Mat], labels: &[&[u8]], fg_weight: f64) -> Result<f64> {
    Ok(coarse_loss_grad(logits, labels, fg_weight)?.0)
}

/// Element-wise binary cross-entropy with logits, averaged over B x T x C.
pub fn fine_loss_grad(logits: &[&Mat], labels: &[&[Vec<u8>]]) -> Result<(f64, Vec<Mat>)> {
    if logits.len() != labels.len() {
        return Err(shape_err("fine logits and labels have different batch sizes"));
    }
    let mut count = 0usize;
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(logits.len());
    for (l, y) in logits.iter().zip(labels) {
        if l.rows != y.len() || y.iter().any(|row| row.len() != l.cols) {
            return Err(shape_err(format!("fine logits {:?} vs labels", l.shape())));
        }
        let mut g = Mat::zeros(l.rows, l.cols);
        for (t, yr) in y.iter().enumerate() {
            for (c, (&x, &yc)) in l.row(t).iter().zip(yr).enumerate() {
                let target = f64::from(yc);
                // max(x, 0) - x y + log(1 + exp(-|x|))
                total += x.max(0.0) - x * target + (-x.abs()).exp().ln_1p();
                g.row_mut(t)[c] = crate::nn::linalg::sigmoid(x) - target;
            }
            count += l.cols;
        }
        grads.push(g);
    }
    if count == 0 {
        return Err(Error::Empty("fine loss over zero elements".into()));
    }
    let n = count as f64;
    for g in &mut grads {
        g.data.iter_mut().for_each(|x| *x /= n);
    }
    Ok((total / n, grads))
}

pub fn fine_loss(logits: &[&Mat], labels: &[&[Vec<u8>]]) -> Result<f64> {
    Ok(fine_loss_grad(logits, labels)?.0)
}

/// Coarse + fine loss of a batch against dense targets.
pub fn supervised_loss(preds: &[Preds<'_>], targets: &[&FrameLabels], fg_weight: f64) -> Result<LossGrad> {
    let coarse: Vec<&Mat> = preds.iter().map(|p| p.coarse).collect();
    let fine: Vec<&Mat> = preds.iter().map(|p| p.fine).collect();
    let coarse_y: Vec<&[u8]> = targets.iter().map(|l| l.coarse.as_slice()).collect();
    let fine_y: Vec<&[Vec<u8>]> = targets.iter().map(|l| l.fine.as_slice()).collect();
    let (vc, d_coarse) = coarse_loss_grad(&coarse, &coarse_y, fg_weight)?;
    let (vf, d_fine) = fine_loss_grad(&fine, &fine_y)?;
    Ok(LossGrad {
        value: vc + vf,
        d_coarse,
        d_fine,
    })
}

/// Same objective as the labeled loss, against pseudo-labels. The
/// pseudo-labels are constants: no gradient reaches whatever produced them.
pub fn unlabeled_loss(preds: &[Preds<'_>], pseudo: &[&PseudoLabels], fg_weight: f64) -> Result<LossGrad> {
    let targets: Vec<&FrameLabels> = pseudo.iter().map(|p| &p.labels).collect();
    supervised_loss(preds, &targets, fg_weight)
}

/// Linear ramp of the unlabeled-loss weight from 0 at `start_epoch` to
/// `target` at `end_epoch`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnealSchedule {
    pub start_epoch: usize,
    pub end_epoch: usize,
    pub target: f64,
}

impl Default for AnnealSchedule {
    fn default() -> Self {
        Self {
            start_epoch: 30,
            end_epoch: 90,
            target: 0.4,
        }
    }
}

impl AnnealSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.start_epoch >= self.end_epoch {
            return Err(Error::Config("anneal start must precede its end".into()));
        }
        if !(self.target >= 0.0 && self.target.is_finite()) {
            return Err(Error::Config("anneal target must be finite and non-negative".into()));
        }
        Ok(())
    }
}

pub fn lambda_at(e: usize, s: &AnnealSchedule) -> f64 {
    if e < s.start_epoch {
        0.0
    } else if e >= s.end_epoch {
        s.target
    } else {
        s.target * (e - s.start_epoch) as f64 / (s.end_epoch - s.start_epoch) as f64
    }
}

/// `lab + lambda(e) * unlab`; pass 0 for the term a batch does not have.
pub fn total_stage1_loss(lab_loss: f64, unlab_loss: f64, e: usize, s: &AnnealSchedule) -> f64 {
    lab_loss + lambda_at(e, s) * unlab_loss
}

/// Mean squared error between student and (constant) teacher embeddings,
/// with its gradient w.r.t. the student embeddings.
pub fn distill_loss_grad(teacher: &Embeddings, student: &Embeddings) -> Result<(f64, Mat)> {
    if teacher.0.shape() != student.0.shape() {
        return Err(shape_err(format!(
            "teacher {:?} vs student {:?}",
            teacher.0.shape(),
            student.0.shape()
        )));
    }
    let n = student.0.data.len();
    if n == 0 {
        return Err(Error::Empty("distillation over empty embeddings".into()));
    }
    let nf = n as f64;
    let mut grad = Mat::zeros(student.0.rows, student.0.cols);
    let mut total = 0.0;
    for ((g, &s), &t) in grad.data.iter_mut().zip(&student.0.data).zip(&teacher.0.data) {
        let diff = s - t;
        total += diff * diff;
        *g = 2.0 * diff / nf;
    }
    Ok((total / nf, grad))
}

pub fn distill_loss(teacher: &Embeddings, student: &Embeddings) -> Result<f64> {
    Ok(distill_loss_grad(teacher, student)?.0)
}
