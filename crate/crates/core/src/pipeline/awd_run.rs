//! AWD end to end: an RGB student learns from labeled clips and from the
//! skeleton teacher's hard outputs on unlabeled clips, each unlabeled clip
//! weighted through the validation mapping.

use std::collections::HashMap;

use rayon::prelude::*;

use super::train::{fit, preds_of, salt, FitSpec, UnlabeledLoss, UnlabeledObjective};
use super::{RunConfig, RunRecord, Strategy};
use crate::awd::{awd_student_loss, build_mapping, query_weight, ModelPredictor, WeightMapping};
use crate::datagen::{mix_seed, ClipSample, ClipView, DatasetSplit, Modality};
use crate::error::{Error, Result};
use crate::metrics::predict_logits;
use crate::nn::linalg::sigmoid;
use crate::nn::{ForwardPass, ModelState};
use crate::pseudo::{make_pseudo_labels, PseudoLabels};
use crate::schema::LabelSchema;
use crate::tensor::Mat;

const STUDENT: Modality = Modality::Rgb;

struct TeacherOutput {
    pseudo: PseudoLabels,
    fine_probs: Mat,
}

fn teacher_output(teacher: &ModelState, view: &ClipView<'_>, s: &LabelSchema) -> Result<TeacherOutput> {
    let (coarse, mut fine) = predict_logits(teacher, Modality::Pose, view)?;
    let pseudo = make_pseudo_labels(&coarse, &fine, s, 0)?;
    fine.data.iter_mut().for_each(|x| *x = sigmoid(*x));
    Ok(TeacherOutput {
        pseudo,
        fine_probs: fine,
    })
}

fn sigmoid_mat(m: &Mat) -> Mat {
    Mat {
        rows: m.rows,
        cols: m.cols,
        data: m.data.iter().map(|&x| sigmoid(x)).collect(),
    }
}

struct AwdObjective<'a> {
    teacher: &'a ModelState,
    val: &'a [ClipSample],
    schema: &'a LabelSchema,
    fg_weight: f64,
    knn_k: usize,
    refresh_every: Option<usize>,
    mapping: Option<WeightMapping>,
    built_at: usize,
    /// The teacher is frozen, so its outputs are computed once per clip.
    cache: HashMap<String, TeacherOutput>,
}

impl UnlabeledObjective for AwdObjective<'_> {
    fn begin_epoch(&mut self, epoch: usize, model: &ModelState) -> Result<()> {
        let stale = match (&self.mapping, self.refresh_every) {
            (None, _) => true,
            (Some(_), Some(r)) => epoch - self.built_at >= r,
            (Some(_), None) => false,
        };
        if stale {
            let teacher = ModelPredictor {
                model: self.teacher,
                modality: Modality::Pose,
            };
            let student = ModelPredictor { model, modality: STUDENT };
            self.mapping = Some(build_mapping(self.val, &teacher, &student, self.schema, self.knn_k)?);
            self.built_at = epoch;
        }
        Ok(())
    }

    fn lambda(&self, _epoch: usize) -> f64 {
        1.0
    }

    fn loss(&mut self, _epoch: usize, _model: &ModelState, views: &[ClipView<'_>], passes: &[ForwardPass]) -> Result<UnlabeledLoss> {
        for v in views {
            if !self.cache.contains_key(v.clip_id) {
                let out = teacher_output(self.teacher, v, self.schema)?;
                self.cache.insert(v.clip_id.to_string(), out);
            }
        }
        let mapping = self.mapping.as_ref().expect("mapping built at epoch start");
        let mut weights = Vec::with_capacity(views.len());
        let mut pseudo = Vec::with_capacity(views.len());
        for (v, p) in views.iter().zip(passes) {
            let t = &self.cache[v.clip_id];
            weights.push(query_weight(mapping, &t.fine_probs, &sigmoid_mat(&p.fine), &t.pseudo, self.schema)?);
            pseudo.push(&t.pseudo);
        }
        let grad = awd_student_loss(&preds_of(passes), &pseudo, &weights, self.fg_weight)?;
        Ok(UnlabeledLoss { grad, weights })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AwdOutcome {
    pub student: ModelState,
    pub record: RunRecord,
    /// Mapping in effect at the end of training.
    pub mapping: WeightMapping,
}

/// Trains an RGB student with AWD against a Stage I skeleton teacher.
pub fn run_awd(cfg: &RunConfig, teacher: &ModelState, split: &DatasetSplit, s: &LabelSchema) -> Result<AwdOutcome> {
    cfg.validate()?;
    if split.val().is_empty() {
        return Err(Error::Empty("AWD needs a validation set to build its mapping".into()));
    }
    let student = ModelState::init(cfg.arch(STUDENT, s.num_classes()), mix_seed(cfg.seed, salt("awd/init")))?;
    let mut objective = AwdObjective {
        teacher,
        val: split.val(),
        schema: s,
        fg_weight: cfg.fg_weight,
        knn_k: cfg.knn_k,
        refresh_every: cfg.awd_refresh_every,
        mapping: None,
        built_at: 0,
        cache: HashMap::new(),
    };
    let spec = FitSpec {
        stage: "awd",
        modality: STUDENT,
        epochs: cfg.awd_epochs,
        strategy: Strategy::Joint,
        seed: cfg.seed,
    };
    let (student, record) = fit(cfg, split, s, student, &spec, Some(&mut objective))?;
    let mapping = objective.mapping.expect("built in the first epoch");
    Ok(AwdOutcome {
        student,
        record,
        mapping,
    })
}

/// Weight of every unlabeled clip under `mapping`; `None` where the teacher
/// marks no event frame.
pub fn query_unlabeled_weights(
    mapping: &WeightMapping,
    teacher: &ModelState,
    student: &ModelState,
    split: &DatasetSplit,
    s: &LabelSchema,
) -> Result<Vec<Option<f64>>> {
    (0..split.unlabeled_len())
        .into_par_iter()
        .map(|i| {
            let v = split.unlabeled_view(i);
            let t = teacher_output(teacher, &v, s)?;
            let (_, fine) = predict_logits(student, STUDENT, &v)?;
            query_weight(mapping, &t.fine_probs, &sigmoid_mat(&fine), &t.pseudo, s)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::awd::{LabelOracle, MappingRecord};
    use crate::pipeline::train::tests::{tiny_cfg, tiny_split};

    #[test]
    fn awd_run_reads_no_unlabeled_labels() {
        let mut cfg = tiny_cfg();
        cfg.awd_epochs = 4;
        cfg.awd_refresh_every = Some(2);
        let (split, s) = tiny_split(&cfg);
        let teacher = ModelState::init(cfg.arch(Modality::Pose, 14), 2).unwrap();
        split.reset_access_counts();
        let out = run_awd(&cfg, &teacher, &split, &s).unwrap();
        assert_eq!(split.access_counts().unlabeled_labels, 0);
        assert!(!out.mapping.records.is_empty());
        assert_eq!(out.record.epochs.len(), 4);
        let again = run_awd(&cfg, &teacher, &split, &s).unwrap();
        assert_eq!(again, out);
    }

    #[test]
    fn perfect_mapping_gives_unit_weights() {
        let cfg = tiny_cfg();
        let (split, s) = tiny_split(&cfg);
        let teacher = ModelState::init(cfg.arch(Modality::Pose, 14), 2).unwrap();
        let student = ModelState::init(cfg.arch(Modality::Rgb, 14), 3).unwrap();
        let oracle = LabelOracle::new(split.val(), &s, 0.0, 0).unwrap();
        let sp = ModelPredictor {
            model: &student,
            modality: Modality::Rgb,
        };
        let mapping = build_mapping(split.val(), &oracle, &sp, &s, 5).unwrap();
        let w = query_unlabeled_weights(&mapping, &teacher, &student, &split, &s).unwrap();
        assert!(w.iter().flatten().all(|&x| x == 1.0));
    }

    #[test]
    fn pessimistic_mapping_gives_low_weights() {
        let cfg = tiny_cfg();
        let (split, s) = tiny_split(&cfg);
        // an untrained teacher calls events everywhere or nowhere; force
        // events so weights are defined
        let mut teacher = ModelState::init(cfg.arch(Modality::Pose, 14), 2).unwrap();
        let cb = teacher.layout.coarse_b.clone();
        teacher.params[cb.start + 1] = 10.0;
        let student = ModelState::init(cfg.arch(Modality::Rgb, 14), 3).unwrap();
        let rec = MappingRecord { c_s: 0.5, c_t: 0.5, p: 1.0, d: 3.0 };
        let mapping = WeightMapping::new(vec![rec], 5).unwrap();
        let w = query_unlabeled_weights(&mapping, &teacher, &student, &split, &s).unwrap();
        assert!(w.iter().all(|x| (x.unwrap() - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn empty_validation_set_is_an_error() {
        let cfg = tiny_cfg();
        let (split, s) = tiny_split(&cfg);
        let bare = DatasetSplit::from_parts(
            (0..split.labeled_len()).map(|i| split.labeled(i).clone()).collect(),
            vec![],
            vec![],
            vec![],
        );
        let teacher = ModelState::init(cfg.arch(Modality::Pose, 14), 2).unwrap();
        assert_eq!(run_awd(&cfg, &teacher, &bare, &s).unwrap_err().category(), "empty");
    }
}
