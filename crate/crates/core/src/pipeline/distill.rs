//! Stage II: RGB and flow encoders regress the frozen skeleton embeddings.
//! Stage III: the fused detector fine-tuned on the labeled clips.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::train::{fit, salt, FitSpec};
use super::{params_hash, EpochRecord, RunConfig, RunRecord, Strategy};
use crate::datagen::{mix_seed, ClipView, DatasetSplit, Modality};
use crate::error::{shape_err, Error, Result};
use crate::losses::distill_loss_grad;
use crate::nn::{forward_student, forward_teacher, lr_at, Embeddings, ModelState};
use crate::schema::LabelSchema;

#[derive(Debug, Clone, PartialEq)]
pub struct Students {
    pub rgb: ModelState,
    pub flow: ModelState,
}

fn check_teacher(cfg: &RunConfig, teacher: &ModelState) -> Result<()> {
    let want = Modality::Pose.input_dims(&cfg.data);
    if teacher.arch.inputs != want || teacher.arch.embed != cfg.model.embed {
        return Err(shape_err(format!(
            "teacher architecture {:?} does not fit the configured pose/embedding sizes",
            teacher.arch
        )));
    }
    Ok(())
}

fn features<'a>(v: &ClipView<'a>, m: Modality) -> &'a crate::tensor::Mat {
    match m {
        Modality::Rgb => v.rgb,
        Modality::Flow => v.flow,
        _ => unreachable!("students are single-stream"),
    }
}

fn distill_one(
    cfg: &RunConfig,
    teacher: &ModelState,
    teacher_pool: &[Embeddings],
    pool: &[ClipView<'_>],
    val: &[(Embeddings, ClipView<'_>)],
    modality: Modality,
    classes: usize,
) -> Result<(ModelState, RunRecord)> {
    let stage = match modality {
        Modality::Rgb => "stage2_rgb",
        _ => "stage2_flow",
    };
    let mut student = ModelState::init(cfg.arch(modality, classes), mix_seed(cfg.seed, salt(stage)))?;
    // the student's embeddings live in the teacher's space, so the teacher's
    // heads ride along untouched and the student checkpoint is a detector
    let dst = student.heads_range();
    student.params[dst].copy_from_slice(&teacher.params[teacher.heads_range()]);
    // both students see the same batch sequence
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, salt("stage2")));
    let o = &cfg.optim;
    let mut epochs = Vec::with_capacity(cfg.stage2_epochs);
    for e in 0..cfg.stage2_epochs {
        let lr = lr_at(e, o.lr, o.warmup_epochs, cfg.stage2_epochs)?;
        let mut loss_sum = 0.0;
        for _ in 0..o.steps_per_epoch {
            let mut grads = student.zero_grads();
            let mut batch_loss = 0.0;
            for _ in 0..o.batch_size {
                let i = rng.gen_range(0..pool.len());
                let pass = student.forward_embeddings(&[features(&pool[i], modality)])?;
                let (l, mut d) = distill_loss_grad(&teacher_pool[i], &pass.embeddings)?;
                d.data.iter_mut().for_each(|g| *g /= o.batch_size as f64);
                student.backward_embeddings(&pass, &d, &mut grads);
                batch_loss += l / o.batch_size as f64;
            }
            if !batch_loss.is_finite() {
                return Err(Error::Numeric(format!("{stage} loss diverged at epoch {e}")));
            }
            loss_sum += batch_loss;
            student.opt_step(&grads, lr, o.weight_decay)?;
        }
        let val_losses = val
            .par_iter()
            .map(|(t, v)| {
                let emb = forward_student(&student, features(v, modality))?;
                Ok(distill_loss_grad(t, &emb)?.0)
            })
            .collect::<Result<Vec<f64>>>()?;
        epochs.push(EpochRecord {
            epoch: e,
            lr,
            train_loss: loss_sum / o.steps_per_epoch as f64,
            labeled_batches: 0,
            unlabeled_batches: 0,
            lambda: 0.0,
            val_loss: Some(val_losses.iter().sum::<f64>() / val_losses.len().max(1) as f64),
            val_edit: None,
            mean_weight: None,
            params_hash: params_hash(&student),
        });
    }
    student.reset_optimizer();
    let record = RunRecord {
        stage: stage.into(),
        strategy: None,
        modality,
        epochs,
        transition: None,
        best_epoch: cfg.stage2_epochs - 1,
        best_val_edit: None,
        best_params_hash: params_hash(&student),
        val: None,
        test: None,
    };
    Ok((student, record))
}

/// Trains both students against the frozen teacher on the features of the
/// whole training pool. No labels are read.
pub fn run_stage2(
    cfg: &RunConfig,
    teacher: &ModelState,
    split: &DatasetSplit,
    s: &LabelSchema,
) -> Result<(Students, Vec<RunRecord>)> {
    cfg.validate()?;
    check_teacher(cfg, teacher)?;
    let mut pool: Vec<ClipView<'_>> = (0..split.labeled_len()).map(|i| split.labeled_view(i)).collect();
    pool.extend((0..split.unlabeled_len()).map(|i| split.unlabeled_view(i)));
    if pool.is_empty() {
        return Err(Error::Empty("training pool is empty".into()));
    }
    let teacher_pool = pool
        .par_iter()
        .map(|v| forward_teacher(teacher, v.pose))
        .collect::<Result<Vec<_>>>()?;
    let val = split
        .val()
        .par_iter()
        .map(|c| Ok((forward_teacher(teacher, &c.pose)?, c.view())))
        .collect::<Result<Vec<_>>>()?;
    let (rgb, r_rgb) = distill_one(cfg, teacher, &teacher_pool, &pool, &val, Modality::Rgb, s.num_classes())?;
    let (flow, r_flow) = distill_one(cfg, teacher, &teacher_pool, &pool, &val, Modality::Flow, s.num_classes())?;
    Ok((Students { rgb, flow }, vec![r_rgb, r_flow]))
}

/// Fused RGB + flow detector whose encoders start from the Stage II
/// students. Each student approximates the teacher embedding, so their sum
/// is about twice it; the heads are the students' mean heads with weights
/// halved, which keeps the teacher's logits.
pub fn stage3_init(cfg: &RunConfig, students: &Students, classes: usize) -> Result<ModelState> {
    let mut model = ModelState::init(cfg.arch(Modality::RgbFlow, classes), mix_seed(cfg.seed, salt("stage3/init")))?;
    if students.rgb.arch.embed != model.arch.embed
        || students.flow.arch.embed != model.arch.embed
        || students.rgb.arch.classes != classes
        || students.flow.arch.classes != classes
    {
        return Err(shape_err("student heads do not match the fused layout"));
    }
    for (i, student) in [&students.rgb, &students.flow].into_iter().enumerate() {
        let dst = model.encoder_range(i);
        let src = student.encoder_range(0);
        if dst.len() != src.len() {
            return Err(shape_err(format!("student {i} encoder does not match the fused layout")));
        }
        model.params[dst].copy_from_slice(&student.params[src]);
    }
    let (r, f) = (&students.rgb, &students.flow);
    for (dst, src_r, src_f, scale) in [
        (model.layout.coarse_w.clone(), r.layout.coarse_w.clone(), f.layout.coarse_w.clone(), 0.25),
        (model.layout.coarse_b.clone(), r.layout.coarse_b.clone(), f.layout.coarse_b.clone(), 0.5),
        (model.layout.fine_w.clone(), r.layout.fine_w.clone(), f.layout.fine_w.clone(), 0.25),
        (model.layout.fine_b.clone(), r.layout.fine_b.clone(), f.layout.fine_b.clone(), 0.5),
    ] {
        for ((d, a), b) in model.params[dst].iter_mut().zip(&r.params[src_r]).zip(&f.params[src_f]) {
            *d = scale * (a + b);
        }
    }
    Ok(model)
}

/// Stage III: fine-tunes the fused detector on labeled clips only.
pub fn run_stage3(cfg: &RunConfig, students: &Students, split: &DatasetSplit, s: &LabelSchema) -> Result<(ModelState, RunRecord)> {
    cfg.validate()?;
    let model = stage3_init(cfg, students, s.num_classes())?;
    let spec = FitSpec {
        stage: "stage3",
        modality: Modality::RgbFlow,
        epochs: cfg.stage3_epochs,
        strategy: Strategy::LabeledOnly,
        seed: cfg.seed,
    };
    fit(cfg, split, s, model, &spec, None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::distill_loss;
    use crate::nn::fuse;
    use crate::pipeline::train::tests::{tiny_cfg, tiny_split};
    use crate::pipeline::run_stage1;

    #[test]
    fn stage2_freezes_the_teacher_and_reads_no_labels() {
        let mut cfg = tiny_cfg();
        cfg.stage2_epochs = 6;
        let (split, s) = tiny_split(&cfg);
        let (teacher, _) = run_stage1(&cfg, &split, &s).unwrap();
        let before = params_hash(&teacher);
        split.reset_access_counts();
        let (students, records) = run_stage2(&cfg, &teacher, &split, &s).unwrap();
        assert_eq!(params_hash(&teacher), before);
        let h = teacher.heads_range();
        // weight decay only shrinks the carried heads
        for st in [&students.rgb, &students.flow] {
            for (a, b) in st.params[st.heads_range()].iter().zip(&teacher.params[h.clone()]) {
                assert!(a.abs() <= b.abs() && a * b >= 0.0, "{a} vs {b}");
            }
        }
        let c = split.access_counts();
        assert_eq!((c.labeled_labels, c.unlabeled_labels), (0, 0));
        assert!(c.unlabeled_features > 0);
        assert_eq!(records.len(), 2);
        assert_ne!(students.rgb.params, students.flow.params);
    }

    #[test]
    fn matching_student_starts_at_zero_loss() {
        let cfg = tiny_cfg();
        let (split, _) = tiny_split(&cfg);
        let teacher = ModelState::init(cfg.arch(Modality::Pose, 14), 1).unwrap();
        let student = teacher.clone();
        let v = split.val()[0].view();
        let t = forward_teacher(&teacher, v.pose).unwrap();
        let e = forward_student(&student, &v.pose.as_frames()).unwrap();
        assert_eq!(distill_loss(&t, &e).unwrap(), 0.0);
    }

    #[test]
    fn stage3_starts_from_student_encoders_and_fuses_additively() {
        let cfg = tiny_cfg();
        let (split, s) = tiny_split(&cfg);
        let students = Students {
            rgb: ModelState::init(cfg.arch(Modality::Rgb, 14), 5).unwrap(),
            flow: ModelState::init(cfg.arch(Modality::Flow, 14), 6).unwrap(),
        };
        let fused = stage3_init(&cfg, &students, 14).unwrap();
        let v = split.val()[0].view();
        let er = forward_student(&students.rgb, v.rgb).unwrap();
        let ef = forward_student(&students.flow, v.flow).unwrap();
        let both = fused.forward_embeddings(&[v.rgb, v.flow]).unwrap().embeddings;
        assert_eq!(both, fuse(&er, &ef).unwrap());
        let (l, r, f) = (&fused.layout, &students.rgb.layout, &students.flow.layout);
        let (p, pr, pf) = (&fused.params, &students.rgb.params, &students.flow.params);
        for i in 0..l.fine_w.len() {
            assert_eq!(p[l.fine_w.start + i], 0.25 * (pr[r.fine_w.start + i] + pf[f.fine_w.start + i]));
        }
        assert_eq!(p[l.coarse_b.start], 0.5 * (pr[r.coarse_b.start] + pf[f.coarse_b.start]));

        split.reset_access_counts();
        let (_, r) = run_stage3(&cfg, &students, &split, &s).unwrap();
        let c = split.access_counts();
        assert_eq!((c.unlabeled_labels, c.unlabeled_features), (0, 0));
        assert_eq!(r.epochs.len(), cfg.stage3_epochs);
        assert!(r.test.is_some());
    }

    #[test]
    fn stage3_rejects_mismatched_students() {
        let cfg = tiny_cfg();
        let mut wide = cfg.clone();
        wide.model.hidden = 5;
        let students = Students {
            rgb: ModelState::init(wide.arch(Modality::Rgb, 14), 5).unwrap(),
            flow: ModelState::init(cfg.arch(Modality::Flow, 14), 6).unwrap(),
        };
        assert_eq!(stage3_init(&cfg, &students, 14).unwrap_err().category(), "shape");
    }
}
