//! Adaptive-weight distillation: the teacher's hard predictions supervise
//! the student with a per-clip weight estimated from a validation mapping
//! of (student confidence, teacher confidence) to (p, d).

use std::cmp::Ordering;
use std::collections::HashMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::datagen::{ClipSample, ClipView, Modality};
use crate::error::{shape_err, Error, Result};
use crate::events::FrameLabels;
use crate::losses::{coarse_loss_grad, fine_loss_grad, LossGrad, Preds};
use crate::metrics::{coarse_probs, predict_logits};
use crate::nn::linalg::sigmoid;
use crate::nn::ModelState;
use crate::pseudo::{fine_label_postprocess, PseudoLabels};
use crate::schema::{event_vocab, GroupRef, LabelSchema};
use crate::tensor::Mat;

pub const DEFAULT_K_NEIGHBORS: usize = 5;

fn check_len(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(shape_err(format!("label vectors of length {a} and {b}")));
    }
    Ok(())
}

/// 0 when the teacher matches the ground truth on every class, else 1.
pub fn correctness_p(teacher_hard: &[u8], gt: &[u8]) -> Result<u8> {
    check_len(teacher_hard.len(), gt.len())?;
    Ok(u8::from(teacher_hard != gt))
}

fn mismatches(a: &[u8], b: &[u8]) -> usize {
    a.iter().zip(b).filter(|(x, y)| x != y).count()
}

/// `(#teacher/student mismatches + 1) / (#student/gt mismatches + 1)`.
pub fn distortion_d(teacher_hard: &[u8], student_hard: &[u8], gt: &[u8]) -> Result<f64> {
    check_len(teacher_hard.len(), student_hard.len())?;
    check_len(student_hard.len(), gt.len())?;
    Ok((mismatches(teacher_hard, student_hard) + 1) as f64 / (mismatches(student_hard, gt) + 1) as f64)
}

/// `1 / (1 + p (d - 1))` clipped to [0, 1].
pub fn weight_w(p: f64, d: f64) -> Result<f64> {
    if !p.is_finite() || !d.is_finite() {
        return Err(Error::Numeric(format!("weight of p={p}, d={d}")));
    }
    let denom = 1.0 + p * (d - 1.0);
    // a non-positive denominator means W has blown past 1
    if denom <= 0.0 {
        return Ok(1.0);
    }
    Ok((1.0 / denom).clamp(0.0, 1.0))
}

/// Top-1 minus top-2 probability within each exclusive group (conditional
/// groups included whatever the gate says), `|2y - 1|` for binaries, in
/// [`LabelSchema::group_refs`] order.
pub fn group_confidence(probs: &[f64], s: &LabelSchema) -> Result<Vec<f64>> {
    if probs.len() != s.num_classes() {
        return Err(Error::Schema(format!(
            "{} probabilities for a {}-class schema",
            probs.len(),
            s.num_classes()
        )));
    }
    let margin = |idxs: &[usize]| {
        let (mut first, mut second) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
        for &i in idxs {
            let x = probs[i];
            if x > first {
                second = first;
                first = x;
            } else if x > second {
                second = x;
            }
        }
        if idxs.len() == 1 {
            first
        } else {
            first - second
        }
    };
    Ok(s.group_refs()
        .into_iter()
        .map(|g| match g {
            GroupRef::Exclusive(idxs) => margin(idxs),
            GroupRef::Conditional(c) => margin(&c.members),
            GroupRef::Binary(i) => (probs[i] - (1.0 - probs[i])).abs(),
        })
        .collect())
}

/// Mean over groups per frame, then mean over the given event frames.
pub fn clip_confidence(frame_confs: &[Vec<f64>]) -> Result<f64> {
    if frame_confs.is_empty() {
        return Err(Error::UndefinedConfidence("clip has no event frames".into()));
    }
    let mut total = 0.0;
    for f in frame_confs {
        if f.is_empty() {
            return Err(Error::Argument("frame with zero groups".into()));
        }
        total += f.iter().sum::<f64>() / f.len() as f64;
    }
    Ok(total / frame_confs.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MappingRecord {
    pub c_s: f64,
    pub c_t: f64,
    pub p: f64,
    pub d: f64,
}

impl MappingRecord {
    fn total_cmp(&self, o: &Self) -> Ordering {
        self.c_s
            .total_cmp(&o.c_s)
            .then(self.c_t.total_cmp(&o.c_t))
            .then(self.p.total_cmp(&o.p))
            .then(self.d.total_cmp(&o.d))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightMapping {
    pub records: Vec<MappingRecord>,
    pub k_neighbors: usize,
}

impl WeightMapping {
    pub fn new(records: Vec<MappingRecord>, k_neighbors: usize) -> Result<Self> {
        if k_neighbors == 0 {
            return Err(Error::Config("k_neighbors must be positive".into()));
        }
        for r in &records {
            let conf_ok = (0.0..=1.0).contains(&r.c_s) && (0.0..=1.0).contains(&r.c_t);
            if !conf_ok || !(0.0..=1.0).contains(&r.p) || !(r.d > 0.0 && r.d.is_finite()) {
                return Err(Error::Argument(format!("invalid mapping record {r:?}")));
            }
        }
        Ok(Self { records, k_neighbors })
    }

    /// Mean (p, d) of the nearest records to `(c_s, c_t)`. Distance ties
    /// are broken by record contents, so record order never matters.
    pub fn estimate(&self, c_s: f64, c_t: f64) -> Result<(f64, f64)> {
        if self.records.is_empty() {
            return Err(Error::Empty("weight mapping has no records".into()));
        }
        if !c_s.is_finite() || !c_t.is_finite() {
            return Err(Error::Numeric("non-finite confidence query".into()));
        }
        let mut scored: Vec<(f64, &MappingRecord)> = self
            .records
            .iter()
            .map(|r| (((r.c_s - c_s).powi(2) + (r.c_t - c_t).powi(2)).sqrt(), r))
            .collect();
        scored.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.total_cmp(b.1)));
        let k = self.k_neighbors.min(scored.len());
        let (p, d) = scored[..k].iter().fold((0.0, 0.0), |(p, d), (_, r)| (p + r.p, d + r.d));
        Ok((p / k as f64, d / k as f64))
    }

    pub fn knn_weight(&self, c_s: f64, c_t: f64) -> Result<f64> {
        let (p, d) = self.estimate(c_s, c_t)?;
        weight_w(p, d)
    }

    /// One whitespace-separated `c_s c_t p d` line per record. Values are
    /// printed in shortest round-trip form, so reading gives back the same
    /// bits.
    pub fn to_table(&self) -> String {
        let mut out = format!("# k_neighbors {}\n# c_s c_t p d\n", self.k_neighbors);
        for r in &self.records {
            out.push_str(&format!("{:?} {:?} {:?} {:?}\n", r.c_s, r.c_t, r.p, r.d));
        }
        out
    }

    pub fn from_table(text: &str) -> Result<Self> {
        let mut k = DEFAULT_K_NEIGHBORS;
        let mut records = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if let Some(rest) = line.strip_prefix("# k_neighbors") {
                k = rest
                    .trim()
                    .parse()
                    .map_err(|_| Error::Dataset(format!("line {}: bad k_neighbors", n + 1)))?;
                continue;
            }
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let vals: Vec<f64> = line
                .split_whitespace()
                .map(str::parse)
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Dataset(format!("line {}: {e}", n + 1)))?;
            let [c_s, c_t, p, d] = vals[..] else {
                return Err(Error::Dataset(format!("line {}: expected 4 values", n + 1)));
            };
            records.push(MappingRecord { c_s, c_t, p, d });
        }
        Self::new(records, k)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_table())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_table(&std::fs::read_to_string(path)?)
    }
}

/// Anything that yields per-frame probabilities for a clip: foreground
/// probability and the T x C fine probabilities.
pub trait Predictor: Sync {
    fn predict(&self, clip: &ClipView<'_>) -> Result<(Vec<f64>, Mat)>;
}

pub struct ModelPredictor<'a> {
    pub model: &'a ModelState,
    pub modality: Modality,
}

impl Predictor for ModelPredictor<'_> {
    fn predict(&self, clip: &ClipView<'_>) -> Result<(Vec<f64>, Mat)> {
        let (coarse, mut fine) = predict_logits(self.model, self.modality, clip)?;
        fine.data.iter_mut().for_each(|x| *x = sigmoid(*x));
        Ok((coarse_probs(&coarse), fine))
    }
}

/// Replays stored labels as certain predictions, optionally with a share of
/// the event frames replaced by a different valid fine vector. Only knows
/// the clips it was built from.
pub struct LabelOracle {
    labels: HashMap<String, FrameLabels>,
}

impl LabelOracle {
    pub fn new(clips: &[ClipSample], s: &LabelSchema, corrupt_fraction: f64, seed: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&corrupt_fraction) {
            return Err(Error::Argument("corrupt fraction must lie in [0, 1]".into()));
        }
        let vocab = event_vocab(s);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut labels = HashMap::new();
        for c in clips {
            let mut l = c.labels.clone();
            let frames: Vec<usize> = l.event_frames().collect();
            let n_flip = (corrupt_fraction * frames.len() as f64).round() as usize;
            for &t in frames.choose_multiple(&mut rng, n_flip) {
                let current = vocab.index_of_bits(&l.fine[t]);
                let mut id = rng.gen_range(0..vocab.len());
                while Some(id) == current && vocab.len() > 1 {
                    id = rng.gen_range(0..vocab.len());
                }
                l.fine[t] = vocab.bits(id).to_vec();
            }
            labels.insert(c.clip_id.clone(), l);
        }
        Ok(Self { labels })
    }
}

impl Predictor for LabelOracle {
    fn predict(&self, clip: &ClipView<'_>) -> Result<(Vec<f64>, Mat)> {
        let l = self
            .labels
            .get(clip.clip_id)
            .ok_or_else(|| Error::Argument(format!("oracle has no labels for {}", clip.clip_id)))?;
        let coarse = l.coarse.iter().map(|&c| f64::from(c)).collect();
        let rows: Vec<Vec<f64>> = (0..l.frames()).map(|t| l.fine_row(t)).collect();
        Ok((coarse, Mat::from_rows(&rows)?))
    }
}

fn hard_row(probs: &[f64], s: &LabelSchema) -> Result<Vec<u8>> {
    Ok(fine_label_postprocess(probs, s)?
        .into_iter()
        .map(|x| u8::from(x == 1.0))
        .collect())
}

/// Clip confidence of one model's fine probabilities over `frames`.
pub fn confidence_over(fine_probs: &Mat, frames: &[usize], s: &LabelSchema) -> Result<f64> {
    let confs = frames
        .iter()
        .map(|&t| group_confidence(fine_probs.row(t), s))
        .collect::<Result<Vec<_>>>()?;
    clip_confidence(&confs)
}

/// Per-clip (p, d) means over `frames`, from fine probabilities and ground
/// truth.
pub fn clip_reliability(teacher: &Mat, student: &Mat, gt: &FrameLabels, frames: &[usize], s: &LabelSchema) -> Result<(f64, f64)> {
    if frames.is_empty() {
        return Err(Error::UndefinedConfidence("clip has no event frames".into()));
    }
    let (mut p, mut d) = (0.0, 0.0);
    for &t in frames {
        let th = hard_row(teacher.row(t), s)?;
        let sh = hard_row(student.row(t), s)?;
        p += f64::from(correctness_p(&th, &gt.fine[t])?);
        d += distortion_d(&th, &sh, &gt.fine[t])?;
    }
    let n = frames.len() as f64;
    Ok((p / n, d / n))
}

/// One record per validation clip with at least one ground-truth event
/// frame; confidences and (p, d) are taken over those frames.
pub fn build_mapping(
    val: &[ClipSample],
    teacher: &dyn Predictor,
    student: &dyn Predictor,
    s: &LabelSchema,
    k_neighbors: usize,
) -> Result<WeightMapping> {
    if val.is_empty() {
        return Err(Error::Empty("no validation clips to build the mapping from".into()));
    }
    let records = val
        .par_iter()
        .map(|clip| {
            let frames: Vec<usize> = clip.labels.event_frames().collect();
            if frames.is_empty() {
                return Ok(None);
            }
            let (_, tf) = teacher.predict(&clip.view())?;
            let (_, sf) = student.predict(&clip.view())?;
            let (p, d) = clip_reliability(&tf, &sf, &clip.labels, &frames, s)?;
            Ok(Some(MappingRecord {
                c_s: confidence_over(&sf, &frames, s)?,
                c_t: confidence_over(&tf, &frames, s)?,
                p,
                d,
            }))
        })
        .collect::<Result<Vec<_>>>()?;
    let records: Vec<MappingRecord> = records.into_iter().flatten().collect();
    if records.is_empty() {
        return Err(Error::Empty("no validation clip has an event frame".into()));
    }
    WeightMapping::new(records, k_neighbors)
}

/// Weight for an unlabeled clip, using the frames the teacher marks as
/// events. `None` when the teacher marks none.
pub fn query_weight(
    mapping: &WeightMapping,
    teacher_fine: &Mat,
    student_fine: &Mat,
    pseudo: &PseudoLabels,
    s: &LabelSchema,
) -> Result<Option<f64>> {
    let frames: Vec<usize> = pseudo.labels.event_frames().collect();
    let c_t = match confidence_over(teacher_fine, &frames, s) {
        Ok(c) => c,
        Err(Error::UndefinedConfidence(_)) => return Ok(None),
        Err(e) => return Err(e),
    };
    let c_s = confidence_over(student_fine, &frames, s)?;
    mapping.knn_weight(c_s, c_t).map(Some)
}

/// Mean over clips of `W * (coarse + fine)` against the teacher's hard
/// outputs. A clip whose weight is `None` contributes its coarse loss only,
/// unweighted.
pub fn awd_student_loss(
    preds: &[Preds<'_>],
    teacher: &[&PseudoLabels],
    weights: &[Option<f64>],
    fg_weight: f64,
) -> Result<LossGrad> {
    if preds.len() != teacher.len() || preds.len() != weights.len() {
        return Err(shape_err("predictions, teacher labels and weights differ in batch size"));
    }
    if preds.is_empty() {
        return Err(Error::Empty("awd loss over zero clips".into()));
    }
    let b = preds.len() as f64;
    let mut out = LossGrad {
        value: 0.0,
        d_coarse: Vec::with_capacity(preds.len()),
        d_fine: Vec::with_capacity(preds.len()),
    };
    for ((p, t), w) in preds.iter().zip(teacher).zip(weights) {
        if let Some(w) = w {
            if !(0.0..=1.0).contains(w) {
                return Err(Error::Argument(format!("weight {w} outside [0, 1]")));
            }
        }
        let (vc, mut gc) = coarse_loss_grad(&[p.coarse], &[&t.labels.coarse], fg_weight)?;
        let (vf, mut gf) = match w {
            Some(_) => fine_loss_grad(&[p.fine], &[&t.labels.fine])?,
            None => (0.0, vec![Mat::zeros(p.fine.rows, p.fine.cols)]),
        };
        let k = w.unwrap_or(1.0) / b;
        out.value += k * (vc + vf);
        let mut gc = gc.remove(0);
        let mut gf = gf.remove(0);
        gc.data.iter_mut().chain(gf.data.iter_mut()).for_each(|g| *g *= k);
        out.d_coarse.push(gc);
        out.d_fine.push(gf);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::unlabeled_loss;
    use proptest::prelude::*;

    fn rel_close(a: f64, b: f64) -> bool {
        (a - b).abs() <= 1e-12 * b.abs().max(1e-300)
    }

    #[test]
    fn correctness_examples() {
        let a = [1, 0, 1, 0];
        assert_eq!(correctness_p(&a, &a).unwrap(), 0);
        assert_eq!(correctness_p(&[1, 1, 1, 0], &a).unwrap(), 1);
        assert_eq!(correctness_p(&[0, 1, 0, 1], &a).unwrap(), 1);
        assert_eq!(correctness_p(&[0, 1], &a).unwrap_err().category(), "shape");
    }

    #[test]
    fn distortion_examples() {
        let gt = [1, 0, 1, 0, 1];
        assert_eq!(distortion_d(&gt, &gt, &gt).unwrap(), 1.0);
        assert_eq!(distortion_d(&[0, 1, 1, 0, 1], &gt, &gt).unwrap(), 3.0);
        let student = [0, 1, 0, 0, 1];
        assert_eq!(distortion_d(&[1, 1, 0, 0, 1], &student, &gt).unwrap(), 0.5);
        assert!(distortion_d(&gt, &gt, &[1]).is_err());
    }

    #[test]
    fn weight_examples() {
        assert_eq!(weight_w(0.0, 7.0).unwrap(), 1.0);
        assert!(rel_close(weight_w(1.0, 3.0).unwrap(), 1.0 / 3.0));
        assert_eq!(weight_w(1.0, 0.5).unwrap(), 1.0);
        assert_eq!(weight_w(f64::NAN, 1.0).unwrap_err().category(), "numeric");
    }

    #[test]
    fn group_confidence_examples() {
        let s = LabelSchema::tennis();
        let mut probs = vec![0.5; 14];
        probs[2] = 0.7;
        probs[3] = 0.2;
        probs[4] = 0.1;
        let c = group_confidence(&probs, &s).unwrap();
        assert_eq!(c.len(), 5);
        assert!(rel_close(c[1], 0.5));
        assert_eq!(c[4], 0.0);
        probs[13] = 0.9;
        assert!(rel_close(group_confidence(&probs, &s).unwrap()[4], 0.8));
        assert_eq!(group_confidence(&[0.5; 3], &s).unwrap_err().category(), "schema");
    }

    #[test]
    fn clip_confidence_examples() {
        assert_eq!(clip_confidence(&[vec![1.0; 5], vec![1.0; 5]]).unwrap(), 1.0);
        assert!(rel_close(clip_confidence(&[vec![0.2; 5], vec![0.6; 5]]).unwrap(), 0.4));
        assert!(rel_close(clip_confidence(&[vec![0.5, 0.5, 0.5, 0.5, 0.0]]).unwrap(), 0.4));
        assert_eq!(clip_confidence(&[]).unwrap_err().category(), "undefined_confidence");
    }

    fn rec(c_s: f64, c_t: f64, p: f64, d: f64) -> MappingRecord {
        MappingRecord { c_s, c_t, p, d }
    }

    #[test]
    fn knn_examples() {
        let one = WeightMapping::new(vec![rec(0.5, 0.5, 0.0, 1.0)], 5).unwrap();
        assert_eq!(one.knn_weight(0.0, 1.0).unwrap(), 1.0);
        let two = WeightMapping::new(vec![rec(0.4, 0.5, 0.0, 1.0), rec(0.6, 0.5, 1.0, 3.0)], 2).unwrap();
        assert_eq!(two.estimate(0.5, 0.5).unwrap(), (0.5, 2.0));
        assert!(rel_close(two.knn_weight(0.5, 0.5).unwrap(), 2.0 / 3.0));
        let nearest = WeightMapping::new(vec![rec(0.1, 0.1, 0.0, 1.0), rec(0.9, 0.9, 1.0, 3.0)], 1).unwrap();
        assert!(rel_close(nearest.knn_weight(0.9, 0.9).unwrap(), 1.0 / 3.0));
        let empty = WeightMapping::new(vec![], 5).unwrap();
        assert_eq!(empty.knn_weight(0.5, 0.5).unwrap_err().category(), "empty");
        assert!(WeightMapping::new(vec![rec(0.5, 0.5, 0.5, 0.0)], 5).is_err());
    }

    #[test]
    fn table_round_trip_is_exact() {
        let m = WeightMapping::new(vec![rec(0.1 + 0.2, 1.0 / 3.0, 0.25, 7.0 / 3.0), rec(0.0, 1.0, 1.0, 1e-9)], 3).unwrap();
        let back = WeightMapping::from_table(&m.to_table()).unwrap();
        assert_eq!(back, m);
        assert!(WeightMapping::from_table("0.1 0.2 0.3\n").is_err());
    }

    fn labels(frames: usize, events: &[(usize, Vec<u8>)]) -> FrameLabels {
        let mut l = FrameLabels::background(frames, 14);
        for (t, bits) in events {
            l.coarse[*t] = 1;
            l.fine[*t] = bits.clone();
        }
        l
    }

    fn bits(on: &[usize]) -> Vec<u8> {
        let mut b = vec![0u8; 14];
        on.iter().for_each(|&i| b[i] = 1);
        b
    }

    fn probs_of(l: &FrameLabels) -> Mat {
        Mat::from_rows(&(0..l.frames()).map(|t| l.fine_row(t)).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn reliability_of_the_reference_example() {
        // per-frame (p, d) of (0, 1) and (1, 3) average to (0.5, 2)
        let s = LabelSchema::tennis();
        let a = bits(&[0, 4, 5, 7]);
        let gt = labels(3, &[(0, a.clone()), (1, a.clone())]);
        let teacher = labels(3, &[(0, a.clone()), (1, bits(&[1, 4, 5, 7]))]);
        let student = labels(3, &[(0, a.clone()), (1, a.clone())]);
        let (p, d) = clip_reliability(&probs_of(&teacher), &probs_of(&student), &gt, &[0, 1], &s).unwrap();
        assert_eq!((p, d), (0.5, 2.0));
    }

    fn clip_with(id: &str, l: FrameLabels) -> ClipSample {
        let t = l.frames();
        let vocab = event_vocab(&LabelSchema::tennis());
        ClipSample {
            clip_id: id.into(),
            video_id: "v".into(),
            pose: crate::tensor::PoseTensor::zeros(t, 1, 2),
            rgb: Mat::zeros(t, 2),
            flow: Mat::zeros(t, 2),
            events: crate::events::events_from_labels(&l, &vocab).unwrap(),
            labels: l,
        }
    }

    #[test]
    fn perfect_oracle_gives_zero_p_everywhere() {
        let s = LabelSchema::tennis();
        let a = bits(&[0, 4, 5, 7]);
        let clips = vec![
            clip_with("a", labels(5, &[(1, a.clone()), (3, bits(&[1, 2]))])),
            clip_with("b", labels(5, &[])),
            clip_with("c", labels(5, &[(4, a.clone())])),
        ];
        let teacher = LabelOracle::new(&clips, &s, 0.0, 0).unwrap();
        let student = LabelOracle::new(&clips, &s, 1.0, 1).unwrap();
        let m = build_mapping(&clips, &teacher, &student, &s, 5).unwrap();
        assert_eq!(m.records.len(), 2);
        assert!(m.records.iter().all(|r| r.p == 0.0));
        // serve frames leave the gated groups at zero margin
        assert_eq!(m.records[1].c_t, 1.0);
        assert!(m.records[0].c_t < 1.0);
        assert_eq!(m.knn_weight(0.3, 0.9).unwrap(), 1.0);
        assert_eq!(build_mapping(&[], &teacher, &student, &s, 5).unwrap_err().category(), "empty");
    }

    #[test]
    fn corrupted_oracle_is_wrong_on_the_flipped_share() {
        let s = LabelSchema::tennis();
        let a = bits(&[0, 4, 5, 7]);
        let clips = vec![clip_with("a", labels(8, &[(0, a.clone()), (2, a.clone()), (4, a.clone()), (6, a.clone())]))];
        let teacher = LabelOracle::new(&clips, &s, 0.5, 3).unwrap();
        let student = LabelOracle::new(&clips, &s, 0.0, 0).unwrap();
        let m = build_mapping(&clips, &teacher, &student, &s, 5).unwrap();
        assert_eq!(m.records[0].p, 0.5);
        assert!(m.records[0].d > 1.0);
        assert!(m.knn_weight(1.0, 1.0).unwrap() < 1.0);
    }

    #[test]
    fn awd_loss_examples() {
        let s = LabelSchema::tennis();
        let coarse = Mat::from_rows(&[vec![0.3, -0.2], vec![-1.0, 0.5], vec![0.0, 0.1]]).unwrap();
        let fine = Mat::from_rows(&vec![vec![0.2; 14]; 3]).unwrap();
        let preds = [Preds { coarse: &coarse, fine: &fine }];
        let teacher = PseudoLabels {
            labels: labels(3, &[(1, bits(&[0, 2]))]),
            source_epoch: 0,
        };
        teacher.labels.check(&s).unwrap();
        let zero = awd_student_loss(&preds, &[&teacher], &[Some(0.0)], 5.0).unwrap();
        assert_eq!(zero.value, 0.0);
        assert!(zero.d_fine[0].data.iter().all(|&g| g == 0.0));
        let full = awd_student_loss(&preds, &[&teacher], &[Some(1.0)], 5.0).unwrap();
        let base = unlabeled_loss(&preds, &[&teacher], 5.0).unwrap();
        assert!(rel_close(full.value, base.value));
        let half = awd_student_loss(&preds, &[&teacher], &[Some(0.5)], 5.0).unwrap();
        assert!(rel_close(half.value, 0.5 * base.value));
        let skipped = awd_student_loss(&preds, &[&teacher], &[None], 5.0).unwrap();
        let coarse_only = coarse_loss_grad(&[&coarse], &[&teacher.labels.coarse], 5.0).unwrap().0;
        assert!(rel_close(skipped.value, coarse_only));
        assert!(awd_student_loss(&preds, &[&teacher], &[Some(1.5)], 5.0).is_err());
    }

    proptest! {
        #[test]
        fn weight_non_increasing_in_d(p in 0.0f64..=1.0, d in 0.01f64..10.0, step in 0.0f64..5.0) {
            let w1 = weight_w(p, d).unwrap();
            let w2 = weight_w(p, d + step).unwrap();
            prop_assert!(w2 <= w1);
            prop_assert!((0.0..=1.0).contains(&w1));
            prop_assert_eq!(weight_w(0.0, d).unwrap(), 1.0);
        }

        #[test]
        fn confidences_in_unit_interval(probs in prop::collection::vec(0.0f64..=1.0, 14)) {
            let c = group_confidence(&probs, &LabelSchema::tennis()).unwrap();
            prop_assert!(c.iter().all(|x| (0.0..=1.0).contains(x)));
        }

        #[test]
        fn clip_confidence_of_constant(x in 0.0f64..=1.0, frames in 1usize..6, groups in 1usize..6) {
            let c = clip_confidence(&vec![vec![x; groups]; frames]).unwrap();
            prop_assert!((c - x).abs() <= 1e-15);
        }

        #[test]
        fn knn_ignores_record_order(
            raw in prop::collection::vec((0usize..4, 0usize..4, 0.0f64..=1.0, 0.1f64..4.0), 1..12),
            seed in any::<u64>(),
            q in (0.0f64..=1.0, 0.0f64..=1.0),
        ) {
            // coarse grid positions make distance ties common
            let records: Vec<MappingRecord> = raw.iter().map(|&(a, b, p, d)| rec(a as f64 / 3.0, b as f64 / 3.0, p, d)).collect();
            let mut shuffled = records.clone();
            shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let a = WeightMapping::new(records, 3).unwrap().knn_weight(q.0, q.1).unwrap();
            let b = WeightMapping::new(shuffled, 3).unwrap().knn_weight(q.0, q.1).unwrap();
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}
