//! Online pseudo-labels and the structured fine-label post-processing.
//!
//! Post-processing is driven by the schema. For the tennis schema it does:
//! one of near/far; one of serve/return/stroke; unless serve, one of fh/bh
//! and one shot type (all zero on serve); approach thresholded at 0.5.

use crate::error::{shape_err, Error, Result};
use crate::events::FrameLabels;
use crate::nn::linalg::sigmoid;
use crate::schema::LabelSchema;
use crate::tensor::Mat;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PseudoLabels {
    pub labels: FrameLabels,
    /// Epoch of the model that produced them.
    pub source_epoch: usize,
}

fn activate_in_place(v: &mut [f64], idxs: &[usize]) {
    let mut best = idxs[0];
    for &i in &idxs[1..] {
        if v[i] > v[best] || (v[i] == v[best] && i < best) {
            best = i;
        }
    }
    for &i in idxs {
        v[i] = if i == best { 1.0 } else { 0.0 };
    }
}

/// One-hot argmax over `idxs`, ties to the lowest index; other entries are
/// left alone.
pub fn activate_one(v: &[f64], idxs: &[usize]) -> Result<Vec<f64>> {
    if idxs.is_empty() {
        return Err(Error::Argument("activate_one needs at least one index".into()));
    }
    if let Some(&i) = idxs.iter().find(|&&i| i >= v.len()) {
        return Err(Error::Argument(format!("index {i} out of bounds for length {}", v.len())));
    }
    let mut out = v.to_vec();
    activate_in_place(&mut out, idxs);
    Ok(out)
}

/// Projects a soft or hard fine vector onto a schema-valid hard vector.
pub fn fine_label_postprocess(v: &[f64], s: &LabelSchema) -> Result<Vec<f64>> {
    if v.len() != s.num_classes() {
        return Err(Error::Schema(format!(
            "vector length {} does not match schema C={}",
            v.len(),
            s.num_classes()
        )));
    }
    let mut out = v.to_vec();
    for g in &s.groups {
        activate_in_place(&mut out, g);
    }
    for &b in &s.independent_binary {
        out[b] = if out[b] >= 0.5 { 1.0 } else { 0.0 };
    }
    for g in &s.conditional_groups {
        if out[g.gate_index] == f64::from(g.gate_value) {
            activate_in_place(&mut out, &g.members);
        } else {
            for &i in &g.members {
                out[i] = 0.0;
            }
        }
    }
    Ok(out)
}

/// Hard targets from a detached forward pass: a frame is an event when its
/// coarse foreground logit strictly wins; event frames get the
/// post-processed sigmoid of their fine logits, the rest stay zero.
pub fn make_pseudo_labels(coarse_logits: &Mat, fine_logits: &Mat, s: &LabelSchema, source_epoch: usize) -> Result<PseudoLabels> {
    if coarse_logits.cols != 2 || fine_logits.cols != s.num_classes() || coarse_logits.rows != fine_logits.rows {
        return Err(shape_err(format!(
            "pseudo-labels from coarse {:?} and fine {:?}",
            coarse_logits.shape(),
            fine_logits.shape()
        )));
    }
    if !coarse_logits.is_finite() || !fine_logits.is_finite() {
        return Err(Error::Numeric("non-finite logits".into()));
    }
    let mut labels = FrameLabels::background(coarse_logits.rows, s.num_classes());
    for t in 0..coarse_logits.rows {
        let c = coarse_logits.row(t);
        if c[1] > c[0] {
            labels.coarse[t] = 1;
            let probs: Vec<f64> = fine_logits.row(t).iter().map(|&x| sigmoid(x)).collect();
            labels.fine[t] = fine_label_postprocess(&probs, s)?
                .into_iter()
                .map(|x| u8::from(x == 1.0))
                .collect();
        }
    }
    Ok(PseudoLabels { labels, source_epoch })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schema::validate_hard_vector;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn activate_one_examples() {
        assert_eq!(activate_one(&[0.3, 0.6], &[0, 1]).unwrap(), vec![0.0, 1.0]);
        assert_eq!(activate_one(&[0.5, 0.5], &[0, 1]).unwrap(), vec![1.0, 0.0]);
        assert_eq!(activate_one(&[0.0, 1.0, 0.0], &[0, 1, 2]).unwrap(), vec![0.0, 1.0, 0.0]);
        assert_eq!(activate_one(&[0.2, 0.7, 0.9], &[0, 1]).unwrap(), vec![0.0, 1.0, 0.9]);
        // tie broken by class index even when listed out of order
        assert_eq!(activate_one(&[0.4, 0.4], &[1, 0]).unwrap(), vec![1.0, 0.0]);
        assert!(activate_one(&[0.1], &[]).is_err());
        assert!(activate_one(&[0.1], &[1]).is_err());
    }

    fn soft(pairs: &[(usize, f64)]) -> Vec<f64> {
        let mut v = vec![0.1; 14];
        for &(i, x) in pairs {
            v[i] = x;
        }
        v
    }

    #[test]
    fn serve_zeroes_conditional_groups() {
        let s = LabelSchema::tennis();
        let out = fine_label_postprocess(&soft(&[(0, 0.8), (2, 0.9), (3, 0.3), (5, 0.7), (9, 0.8)]), &s).unwrap();
        assert!(out[5..=12].iter().all(|&x| x == 0.0));
        assert_eq!(out[2], 1.0);
        assert!(validate_hard_vector(&out, &s).unwrap());
    }

    #[test]
    fn stroke_activates_side_and_shot() {
        let s = LabelSchema::tennis();
        let out = fine_label_postprocess(&soft(&[(1, 0.6), (4, 0.9), (6, 0.4), (11, 0.5)]), &s).unwrap();
        assert_eq!(out[5..=6].iter().sum::<f64>(), 1.0);
        assert_eq!(out[7..=12].iter().sum::<f64>(), 1.0);
        assert_eq!(out[6], 1.0);
        assert_eq!(out[11], 1.0);
        assert!(validate_hard_vector(&out, &s).unwrap());
    }

    #[test]
    fn approach_threshold_is_inclusive() {
        let s = LabelSchema::tennis();
        assert_eq!(fine_label_postprocess(&soft(&[(13, 0.5)]), &s).unwrap()[13], 1.0);
        assert_eq!(fine_label_postprocess(&soft(&[(13, 0.4999)]), &s).unwrap()[13], 0.0);
        assert_eq!(fine_label_postprocess(&[0.5; 3], &s).unwrap_err().category(), "schema");
    }

    #[test]
    fn background_logits_give_empty_pseudo_labels() {
        let s = LabelSchema::tennis();
        let mut coarse = Mat::zeros(5, 2);
        for t in 0..5 {
            coarse.row_mut(t)[0] = 6.0;
        }
        let p = make_pseudo_labels(&coarse, &Mat::zeros(5, 14), &s, 7).unwrap();
        assert_eq!(p.labels, FrameLabels::background(5, 14));
        assert_eq!(p.source_epoch, 7);
    }

    #[test]
    fn one_foreground_frame() {
        let s = LabelSchema::tennis();
        let mut coarse = Mat::zeros(4, 2);
        coarse.row_mut(2)[1] = 3.0;
        let mut fine = Mat::zeros(4, 14);
        fine.row_mut(2)[1] = 2.0; // far
        fine.row_mut(2)[3] = 1.0; // return
        fine.row_mut(2)[5] = 0.5; // fh
        fine.row_mut(2)[12] = 1.5; // lob
        fine.row_mut(2)[13] = -3.0;
        let p = make_pseudo_labels(&coarse, &fine, &s, 0).unwrap();
        assert_eq!(p.labels.coarse, vec![0, 0, 1, 0]);
        let mut want = vec![0u8; 14];
        for i in [1, 3, 5, 12] {
            want[i] = 1;
        }
        assert_eq!(p.labels.fine[2], want);
        p.labels.check(&s).unwrap();
    }

    #[test]
    fn random_logits_always_give_valid_pseudo_labels() {
        let s = LabelSchema::tennis();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..1000 {
            let t = rng.gen_range(1..6);
            let coarse = Mat::from_vec(t, 2, (0..2 * t).map(|_| rng.gen_range(-4.0..4.0)).collect()).unwrap();
            let fine = Mat::from_vec(t, 14, (0..14 * t).map(|_| rng.gen_range(-4.0..4.0)).collect()).unwrap();
            let p = make_pseudo_labels(&coarse, &fine, &s, 0).unwrap();
            p.labels.check(&s).unwrap();
        }
    }

    #[test]
    fn pseudo_label_errors() {
        let s = LabelSchema::tennis();
        assert_eq!(make_pseudo_labels(&Mat::zeros(3, 2), &Mat::zeros(2, 14), &s, 0).unwrap_err().category(), "shape");
        let mut nan = Mat::zeros(1, 2);
        nan.data[0] = f64::NAN;
        assert_eq!(make_pseudo_labels(&nan, &Mat::zeros(1, 14), &s, 0).unwrap_err().category(), "numeric");
    }

    proptest! {
        #[test]
        fn postprocess_is_idempotent_and_valid(v in prop::collection::vec(0.0f64..=1.0, 14)) {
            let s = LabelSchema::tennis();
            let once = fine_label_postprocess(&v, &s).unwrap();
            prop_assert!(validate_hard_vector(&once, &s).unwrap());
            prop_assert_eq!(fine_label_postprocess(&once, &s).unwrap(), once);
        }
    }
}
