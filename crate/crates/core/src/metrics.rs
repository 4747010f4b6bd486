//! Event decoding from dense predictions, Edit score and F1 at a temporal
//! tolerance.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::{ClipSample, ClipView, Modality};
use crate::error::{shape_err, Error, Result};
use crate::events::{Event, EventSequence};
use crate::nn::linalg::sigmoid;
use crate::nn::ModelState;
use crate::pseudo::fine_label_postprocess;
use crate::schema::{EventVocab, LabelSchema};
use crate::tensor::Mat;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeConfig {
    /// A frame must have foreground probability strictly above this.
    pub thresh: f64,
    /// Suppression radius in frames.
    pub window: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self { thresh: 0.5, window: 1 }
    }
}

/// Foreground probability per frame from T x 2 coarse logits.
pub fn coarse_probs(coarse_logits: &Mat) -> Vec<f64> {
    (0..coarse_logits.rows)
        .map(|t| {
            let r = coarse_logits.row(t);
            sigmoid(r[1] - r[0])
        })
        .collect()
}

/// Peaks of `coarse_probs` above the threshold. A frame survives when it
/// beats every frame up to `window` before it and is not beaten by any frame
/// up to `window` after it, so the earliest frame of a plateau wins.
pub fn decode_events(
    coarse_probs: &[f64],
    fine_logits: &Mat,
    s: &LabelSchema,
    vocab: &EventVocab,
    cfg: &DecodeConfig,
) -> Result<EventSequence> {
    if fine_logits.rows != coarse_probs.len() || fine_logits.cols != s.num_classes() {
        return Err(shape_err(format!(
            "{} coarse probabilities vs fine logits {:?}",
            coarse_probs.len(),
            fine_logits.shape()
        )));
    }
    let n = coarse_probs.len();
    let mut events = Vec::new();
    for (t, &p) in coarse_probs.iter().enumerate() {
        if !(p > cfg.thresh) {
            continue;
        }
        let lo = t.saturating_sub(cfg.window);
        let hi = (t + cfg.window).min(n - 1);
        let left_ok = coarse_probs[lo..t].iter().all(|&q| p > q);
        let right_ok = coarse_probs[t + 1..=hi].iter().all(|&q| p >= q);
        if left_ok && right_ok {
            let probs: Vec<f64> = fine_logits.row(t).iter().map(|&x| sigmoid(x)).collect();
            let hard = fine_label_postprocess(&probs, s)?;
            let class_id = vocab
                .index_of(&hard)
                .ok_or_else(|| Error::Schema("post-processed vector missing from the vocabulary".into()))?;
            events.push(Event { class_id, frame: t });
        }
    }
    EventSequence::new(events)
}

/// Levenshtein distance between two class sequences.
pub fn levenshtein(a: &[usize], b: &[usize]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// `100 * (1 - lev / max_len)` over class ids; two empty sequences score 100.
pub fn edit_score(pred: &EventSequence, gt: &EventSequence) -> f64 {
    let longest = pred.len().max(gt.len());
    if longest == 0 {
        return 100.0;
    }
    let d = levenshtein(&pred.classes(), &gt.classes());
    100.0 * (1.0 - d as f64 / longest as f64)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Counts {
    /// F1 in percent. Zero when there is nothing to match.
    pub fn f1(&self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            0.0
        } else {
            100.0 * (2 * self.tp) as f64 / denom as f64
        }
    }

    fn add(&mut self, o: &Counts) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
    }
}

/// Size of a maximum matching between prediction and ground-truth frames
/// where a pair is allowed when they are at most `delta` frames apart.
pub fn max_matching(pred: &[usize], gt: &[usize], delta: usize) -> usize {
    fn augment(p: usize, pred: &[usize], gt: &[usize], delta: usize, seen: &mut [bool], owner: &mut [Option<usize>]) -> bool {
        for g in 0..gt.len() {
            if seen[g] || pred[p].abs_diff(gt[g]) > delta {
                continue;
            }
            seen[g] = true;
            if owner[g].map_or(true, |q| augment(q, pred, gt, delta, seen, owner)) {
                owner[g] = Some(p);
                return true;
            }
        }
        false
    }
    let mut owner = vec![None; gt.len()];
    let mut matched = 0;
    for p in 0..pred.len() {
        let mut seen = vec![false; gt.len()];
        if augment(p, pred, gt, delta, &mut seen, &mut owner) {
            matched += 1;
        }
    }
    matched
}

fn frames_by_class(seq: &EventSequence) -> BTreeMap<usize, Vec<usize>> {
    let mut m: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for e in seq.events() {
        m.entry(e.class_id).or_default().push(e.frame);
    }
    m
}

/// Per-class counts for every class present in `pred` or `gt`.
pub fn class_counts(pred: &EventSequence, gt: &EventSequence, delta: usize) -> BTreeMap<usize, Counts> {
    let p = frames_by_class(pred);
    let g = frames_by_class(gt);
    let classes: std::collections::BTreeSet<usize> = p.keys().chain(g.keys()).copied().collect();
    classes
        .into_iter()
        .map(|c| {
            let pf = p.get(&c).map_or(&[][..], Vec::as_slice);
            let gf = g.get(&c).map_or(&[][..], Vec::as_slice);
            let tp = max_matching(pf, gf, delta);
            (
                c,
                Counts {
                    tp,
                    fp: pf.len() - tp,
                    fn_: gf.len() - tp,
                },
            )
        })
        .collect()
}

/// Macro F1 over the classes in `counts`; 100 when there are none, since
/// predicting nothing on an eventless clip is correct.
pub fn macro_f1(counts: &BTreeMap<usize, Counts>) -> f64 {
    if counts.is_empty() {
        return 100.0;
    }
    counts.values().map(Counts::f1).sum::<f64>() / counts.len() as f64
}

pub fn f1_at_tolerance(pred: &EventSequence, gt: &EventSequence, delta: usize) -> (BTreeMap<usize, Counts>, f64) {
    let counts = class_counts(pred, gt, delta);
    let f1 = macro_f1(&counts);
    (counts, f1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub edit: f64,
    pub f1_evt: f64,
    pub per_class_f1: BTreeMap<usize, f64>,
    pub counts: BTreeMap<usize, Counts>,
    pub delta: usize,
    pub clips: usize,
}

/// Aggregates (prediction, ground truth) pairs: Edit is the per-clip mean,
/// F1 comes from counts summed over clips.
pub fn evaluate_sequences(pairs: &[(EventSequence, EventSequence)], delta: usize) -> Result<EvalReport> {
    if pairs.is_empty() {
        return Err(Error::Empty("evaluation over zero clips".into()));
    }
    let edit = pairs.iter().map(|(p, g)| edit_score(p, g)).sum::<f64>() / pairs.len() as f64;
    let mut counts: BTreeMap<usize, Counts> = BTreeMap::new();
    for (p, g) in pairs {
        for (c, k) in class_counts(p, g, delta) {
            counts.entry(c).or_default().add(&k);
        }
    }
    Ok(EvalReport {
        edit,
        f1_evt: macro_f1(&counts),
        per_class_f1: counts.iter().map(|(&c, k)| (c, k.f1())).collect(),
        counts,
        delta,
        clips: pairs.len(),
    })
}

/// Coarse and fine logits of `m` on a clip.
pub fn predict_logits(m: &ModelState, modality: Modality, view: &ClipView<'_>) -> Result<(Mat, Mat)> {
    let inputs = view.inputs(modality);
    let refs: Vec<&Mat> = inputs.iter().map(|c| c.as_ref()).collect();
    let pass = m.forward(&refs)?;
    Ok((pass.coarse, pass.fine))
}

pub fn predict_events(
    m: &ModelState,
    modality: Modality,
    view: &ClipView<'_>,
    s: &LabelSchema,
    vocab: &EventVocab,
    decode: &DecodeConfig,
) -> Result<EventSequence> {
    let (coarse, fine) = predict_logits(m, modality, view)?;
    decode_events(&coarse_probs(&coarse), &fine, s, vocab, decode)
}

/// Decodes every clip in parallel and scores against its ground truth.
pub fn evaluate_split(
    m: &ModelState,
    modality: Modality,
    clips: &[ClipSample],
    s: &LabelSchema,
    vocab: &EventVocab,
    decode: &DecodeConfig,
    delta: usize,
) -> Result<EvalReport> {
    let pairs = clips
        .par_iter()
        .map(|c| Ok((predict_events(m, modality, &c.view(), s, vocab, decode)?, c.events.clone())))
        .collect::<Result<Vec<_>>>()?;
    evaluate_sequences(&pairs, delta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schema::event_vocab;
    use proptest::prelude::*;

    fn seq(ev: &[(usize, usize)]) -> EventSequence {
        EventSequence::new(ev.iter().map(|&(class_id, frame)| Event { class_id, frame }).collect()).unwrap()
    }

    fn tennis() -> (LabelSchema, EventVocab) {
        let s = LabelSchema::tennis();
        let v = event_vocab(&s);
        (s, v)
    }

    #[test]
    fn decode_below_threshold_is_empty() {
        let (s, v) = tennis();
        let out = decode_events(&[0.1, 0.4, 0.5, 0.2], &Mat::zeros(4, 14), &s, &v, &DecodeConfig::default()).unwrap();
        assert!(out.is_empty());
    }

    #[test]
    fn decode_single_peak() {
        let (s, v) = tennis();
        let mut p = vec![0.1; 10];
        p[4] = 0.6;
        p[5] = 0.9;
        p[6] = 0.7;
        let mut fine = Mat::zeros(10, 14);
        for (c, x) in [(0, 3.0), (4, 3.0), (6, 3.0), (8, 3.0), (13, -3.0)] {
            fine.row_mut(5)[c] = x;
        }
        let out = decode_events(&p, &fine, &s, &v, &DecodeConfig::default()).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out.events()[0].frame, 5);
        assert_eq!(v.bits(out.events()[0].class_id), &[1, 0, 0, 0, 1, 0, 1, 0, 1, 0, 0, 0, 0, 0]);
    }

    #[test]
    fn decode_plateau_keeps_earliest() {
        let (s, v) = tennis();
        let p = [0.1, 0.8, 0.8, 0.8, 0.1];
        let out = decode_events(&p, &Mat::zeros(5, 14), &s, &v, &DecodeConfig::default()).unwrap();
        assert_eq!(out.events().iter().map(|e| e.frame).collect::<Vec<_>>(), vec![1]);
    }

    #[test]
    fn decode_separated_peaks() {
        let (s, v) = tennis();
        let p = [0.9, 0.2, 0.9, 0.1, 0.7, 0.8];
        let out = decode_events(&p, &Mat::zeros(6, 14), &s, &v, &DecodeConfig::default()).unwrap();
        assert_eq!(out.events().iter().map(|e| e.frame).collect::<Vec<_>>(), vec![0, 2, 5]);
        assert!(decode_events(&p, &Mat::zeros(5, 14), &s, &v, &DecodeConfig::default()).is_err());
    }

    #[test]
    fn edit_examples() {
        let a = seq(&[(1, 0), (2, 3), (3, 6), (4, 9)]);
        assert_eq!(edit_score(&a, &a), 100.0);
        assert_eq!(edit_score(&EventSequence::empty(), &a), 0.0);
        assert_eq!(edit_score(&EventSequence::empty(), &EventSequence::empty()), 100.0);
        let x = seq(&[(1, 0), (9, 3), (3, 6), (4, 9)]);
        assert_eq!(edit_score(&x, &a), 75.0);
    }

    #[test]
    fn levenshtein_small_cases() {
        assert_eq!(levenshtein(&[], &[1, 2]), 2);
        assert_eq!(levenshtein(&[1, 2, 3], &[1, 3]), 1);
        assert_eq!(levenshtein(&[1, 2], &[2, 1]), 2);
        assert_eq!(levenshtein(&[5, 6, 7], &[5, 6, 7]), 0);
    }

    #[test]
    fn f1_examples() {
        let g = seq(&[(1, 3), (2, 8)]);
        let (_, f1) = f1_at_tolerance(&g, &g, 1);
        assert_eq!(f1, 100.0);
        let p = seq(&[(1, 5), (2, 8)]);
        let (c, f1) = f1_at_tolerance(&p, &g, 1);
        assert_eq!(c[&1], Counts { tp: 0, fp: 1, fn_: 1 });
        assert_eq!(c[&1].f1(), 0.0);
        assert_eq!(f1, 50.0);
        // greedy would match 11 to 10 and strand 12
        let g = seq(&[(0, 10), (0, 11)]);
        let p = seq(&[(0, 11), (0, 12)]);
        assert_eq!(f1_at_tolerance(&p, &g, 1).0[&0].tp, 2);
    }

    #[test]
    fn class_absent_from_both_contributes_nothing() {
        let g = seq(&[(3, 2)]);
        let (c, f1) = f1_at_tolerance(&g, &g, 0);
        assert_eq!(c.len(), 1);
        assert_eq!(f1, 100.0);
    }

    #[test]
    fn split_aggregation() {
        let a = seq(&[(1, 0), (2, 4)]);
        let b = seq(&[(1, 0), (3, 4)]);
        let r = evaluate_sequences(&[(a.clone(), a.clone()), (b, a.clone())], 1).unwrap();
        assert_eq!(r.edit, 75.0);
        assert_eq!(r.counts[&1], Counts { tp: 2, fp: 0, fn_: 0 });
        assert_eq!(r.counts[&2], Counts { tp: 1, fp: 0, fn_: 1 });
        assert_eq!(r.counts[&3], Counts { tp: 0, fp: 1, fn_: 0 });
        let nothing = evaluate_sequences(&[(EventSequence::empty(), a)], 1).unwrap();
        assert_eq!((nothing.edit, nothing.f1_evt), (0.0, 0.0));
        assert_eq!(evaluate_sequences(&[], 1).unwrap_err().category(), "empty");
    }

    fn brute_matching(pred: &[usize], gt: &[usize], delta: usize) -> usize {
        fn go(i: usize, pred: &[usize], gt: &[usize], used: &mut Vec<bool>, delta: usize) -> usize {
            if i == pred.len() {
                return 0;
            }
            let mut best = go(i + 1, pred, gt, used, delta);
            for g in 0..gt.len() {
                if !used[g] && pred[i].abs_diff(gt[g]) <= delta {
                    used[g] = true;
                    best = best.max(1 + go(i + 1, pred, gt, used, delta));
                    used[g] = false;
                }
            }
            best
        }
        go(0, pred, gt, &mut vec![false; gt.len()], delta)
    }

    proptest! {
        #[test]
        fn matching_equals_brute_force(
            pred in prop::collection::vec(0usize..15, 0..6),
            gt in prop::collection::vec(0usize..15, 0..6),
            delta in 0usize..4,
        ) {
            prop_assert_eq!(max_matching(&pred, &gt, delta), brute_matching(&pred, &gt, delta));
        }

        #[test]
        fn larger_delta_never_loses_matches(
            pred in prop::collection::vec(0usize..20, 0..8),
            gt in prop::collection::vec(0usize..20, 0..8),
            delta in 0usize..5,
        ) {
            prop_assert!(max_matching(&pred, &gt, delta + 1) >= max_matching(&pred, &gt, delta));
        }

        #[test]
        fn edit_is_bounded(a in prop::collection::vec(0usize..4, 0..8), b in prop::collection::vec(0usize..4, 0..8)) {
            let sa = seq(&a.iter().enumerate().map(|(i, &c)| (c, i)).collect::<Vec<_>>());
            let sb = seq(&b.iter().enumerate().map(|(i, &c)| (c, i)).collect::<Vec<_>>());
            let e = edit_score(&sa, &sb);
            prop_assert!((0.0..=100.0).contains(&e));
            prop_assert_eq!(e, edit_score(&sb, &sa));
        }
    }
}
