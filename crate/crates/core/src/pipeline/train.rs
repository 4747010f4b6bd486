//! The detector training loop shared by Stage I, Stage III, the RGB
//! baseline and the AWD student.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{params_hash, EpochRecord, RunConfig, RunRecord, Strategy, TransitionRecord};
use crate::datagen::{mix_seed, sample_batch, ClipSample, ClipView, DatasetSplit, Modality, Origin, SamplePhase};
use crate::error::{Error, Result};
use crate::events::FrameLabels;
use crate::losses::{lambda_at, supervised_loss, unlabeled_loss, AnnealSchedule, LossGrad, Preds};
use crate::metrics::{coarse_probs, decode_events, evaluate_sequences, predict_logits, EvalReport};
use crate::nn::{lr_at, ForwardPass, ModelState};
use crate::pseudo::make_pseudo_labels;
use crate::schema::{event_vocab, EventVocab, LabelSchema};

/// Stable per-stage salt for seed derivation.
pub(crate) fn salt(tag: &str) -> u64 {
    // FNV-1a
    tag.bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ u64::from(b)).wrapping_mul(0x100_0000_01b3))
}

pub(crate) struct UnlabeledLoss {
    pub grad: LossGrad,
    /// AWD weight per clip; empty for objectives without weights.
    pub weights: Vec<Option<f64>>,
}

/// Supervision for unlabeled batches.
pub(crate) trait UnlabeledObjective {
    fn begin_epoch(&mut self, _epoch: usize, _model: &ModelState) -> Result<()> {
        Ok(())
    }

    /// Weight reported in the epoch record.
    fn lambda(&self, epoch: usize) -> f64;

    fn loss(&mut self, epoch: usize, model: &ModelState, views: &[ClipView<'_>], passes: &[ForwardPass]) -> Result<UnlabeledLoss>;
}

/// The model's own hard predictions, scaled by the annealed weight. The
/// targets come from the same forward pass and are treated as constants.
pub(crate) struct SelfTraining {
    pub schedule: AnnealSchedule,
    pub schema: LabelSchema,
    pub fg_weight: f64,
}

impl UnlabeledObjective for SelfTraining {
    fn lambda(&self, epoch: usize) -> f64 {
        lambda_at(epoch, &self.schedule)
    }

    fn loss(&mut self, epoch: usize, _model: &ModelState, _views: &[ClipView<'_>], passes: &[ForwardPass]) -> Result<UnlabeledLoss> {
        let pseudo = passes
            .iter()
            .map(|p| make_pseudo_labels(&p.coarse, &p.fine, &self.schema, epoch))
            .collect::<Result<Vec<_>>>()?;
        let preds = preds_of(passes);
        let refs: Vec<_> = pseudo.iter().collect();
        let grad = unlabeled_loss(&preds, &refs, self.fg_weight)?.scale(self.lambda(epoch));
        Ok(UnlabeledLoss { grad, weights: Vec::new() })
    }
}

pub(crate) fn preds_of(passes: &[ForwardPass]) -> Vec<Preds<'_>> {
    passes
        .iter()
        .map(|p| Preds {
            coarse: &p.coarse,
            fine: &p.fine,
        })
        .collect()
}

pub(crate) fn forward_views(model: &ModelState, modality: Modality, views: &[ClipView<'_>]) -> Result<Vec<ForwardPass>> {
    views
        .iter()
        .map(|v| {
            let inputs = v.inputs(modality);
            let refs: Vec<_> = inputs.iter().map(|c| c.as_ref()).collect();
            model.forward(&refs)
        })
        .collect()
}

pub(crate) struct FitSpec {
    pub stage: &'static str,
    pub modality: Modality,
    pub epochs: usize,
    pub strategy: Strategy,
    pub seed: u64,
}

/// Validation loss and decoded-event report in one pass over the clips.
pub(crate) fn validate(
    model: &ModelState,
    modality: Modality,
    clips: &[ClipSample],
    s: &LabelSchema,
    vocab: &EventVocab,
    cfg: &RunConfig,
) -> Result<(f64, EvalReport)> {
    let outputs = clips
        .par_iter()
        .map(|c| {
            let (coarse, fine) = predict_logits(model, modality, &c.view())?;
            let events = decode_events(&coarse_probs(&coarse), &fine, s, vocab, &cfg.decode)?;
            Ok((coarse, fine, events))
        })
        .collect::<Result<Vec<_>>>()?;
    let preds: Vec<Preds<'_>> = outputs.iter().map(|(c, f, _)| Preds { coarse: c, fine: f }).collect();
    let targets: Vec<&FrameLabels> = clips.iter().map(|c| &c.labels).collect();
    let loss = supervised_loss(&preds, &targets, cfg.fg_weight)?.value;
    let pairs: Vec<_> = outputs
        .into_iter()
        .zip(clips)
        .map(|((_, _, e), c)| (e, c.events.clone()))
        .collect();
    Ok((loss, evaluate_sequences(&pairs, cfg.delta)?))
}

/// Trains `model` with model selection by validation Edit and returns the
/// selected parameters.
pub(crate) fn fit(
    cfg: &RunConfig,
    split: &DatasetSplit,
    s: &LabelSchema,
    mut model: ModelState,
    spec: &FitSpec,
    mut unlabeled: Option<&mut dyn UnlabeledObjective>,
) -> Result<(ModelState, RunRecord)> {
    if split.labeled_len() == 0 {
        return Err(Error::Empty("labeled pool is empty".into()));
    }
    if split.val().is_empty() {
        return Err(Error::Empty("model selection needs a validation set".into()));
    }
    if spec.strategy != Strategy::LabeledOnly && unlabeled.is_none() {
        return Err(Error::Argument(format!("{} needs an unlabeled objective", spec.strategy.name())));
    }
    let vocab = event_vocab(s);
    let o = &cfg.optim;
    let e_s = cfg.anneal.start_epoch;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(spec.seed, salt(spec.stage)));
    let mut best: Option<(f64, usize, Vec<f64>)> = None;
    let mut epochs = Vec::with_capacity(spec.epochs);
    let mut transition = None;

    for e in 0..spec.epochs {
        let phase = match spec.strategy {
            Strategy::LabeledOnly => SamplePhase::LabeledOnly,
            Strategy::Joint => SamplePhase::Mixed,
            Strategy::Delayed | Strategy::BestContinuation if e < e_s => SamplePhase::LabeledOnly,
            Strategy::Delayed | Strategy::BestContinuation => SamplePhase::Mixed,
        };
        if e == e_s && e > 0 && matches!(spec.strategy, Strategy::Delayed | Strategy::BestContinuation) {
            let mut restored = None;
            if spec.strategy == Strategy::BestContinuation {
                if let Some((edit, epoch, params)) = &best {
                    model.params.clone_from(params);
                    restored = Some((*epoch, *edit));
                }
            }
            model.reset_optimizer();
            transition = Some(TransitionRecord {
                epoch: e,
                restored_epoch: restored.map(|r| r.0),
                restored_val_edit: restored.map(|r| r.1),
                params_hash: params_hash(&model),
            });
        }
        let lr = lr_at(e, o.lr, o.warmup_epochs, spec.epochs)?;
        if phase == SamplePhase::Mixed {
            if let Some(u) = unlabeled.as_deref_mut() {
                u.begin_epoch(e, &model)?;
            }
        }
        let (mut loss_sum, mut n_lab, mut n_unlab) = (0.0, 0, 0);
        let mut weights = Vec::new();
        for _ in 0..o.steps_per_epoch {
            let batch = sample_batch(split, phase, o.batch_size, &mut rng)?;
            let (passes, lg) = match batch.origin {
                Origin::Labeled => {
                    n_lab += 1;
                    let views: Vec<_> = batch.indices.iter().map(|&i| split.labeled_view(i)).collect();
                    let passes = forward_views(&model, spec.modality, &views)?;
                    let targets: Vec<&FrameLabels> = batch.indices.iter().map(|&i| &split.labeled(i).labels).collect();
                    let lg = supervised_loss(&preds_of(&passes), &targets, cfg.fg_weight)?;
                    (passes, lg)
                }
                Origin::Unlabeled => {
                    n_unlab += 1;
                    let u = unlabeled.as_deref_mut().expect("checked above");
                    let views: Vec<_> = batch.indices.iter().map(|&i| split.unlabeled_view(i)).collect();
                    let passes = forward_views(&model, spec.modality, &views)?;
                    let out = u.loss(e, &model, &views, &passes)?;
                    weights.extend(out.weights.into_iter().flatten());
                    (passes, out.grad)
                }
            };
            if !lg.value.is_finite() {
                return Err(Error::Numeric(format!("{} loss diverged at epoch {e}", spec.stage)));
            }
            loss_sum += lg.value;
            let mut grads = model.zero_grads();
            for (i, pass) in passes.iter().enumerate() {
                model.backward(pass, &lg.d_coarse[i], &lg.d_fine[i], &mut grads);
            }
            model.opt_step(&grads, lr, o.weight_decay)?;
        }
        let (val_loss, report) = validate(&model, spec.modality, split.val(), s, &vocab, cfg)?;
        if best.as_ref().map_or(true, |b| report.edit > b.0) {
            best = Some((report.edit, e, model.params.clone()));
        }
        epochs.push(EpochRecord {
            epoch: e,
            lr,
            train_loss: loss_sum / o.steps_per_epoch as f64,
            labeled_batches: n_lab,
            unlabeled_batches: n_unlab,
            lambda: match (phase, unlabeled.as_deref()) {
                (SamplePhase::Mixed, Some(u)) => u.lambda(e),
                _ => 0.0,
            },
            val_loss: Some(val_loss),
            val_edit: Some(report.edit),
            mean_weight: (!weights.is_empty()).then(|| weights.iter().sum::<f64>() / weights.len() as f64),
            params_hash: params_hash(&model),
        });
        log::debug!("{} epoch {e}: loss {:.4} val edit {:.2}", spec.stage, loss_sum / o.steps_per_epoch as f64, report.edit);
    }

    let (best_edit, best_epoch, params) = best.expect("at least one epoch");
    model.params = params;
    model.reset_optimizer();
    let (_, val) = validate(&model, spec.modality, split.val(), s, &vocab, cfg)?;
    let (_, test) = if split.test().is_empty() {
        (0.0, None)
    } else {
        let (l, r) = validate(&model, spec.modality, split.test(), s, &vocab, cfg)?;
        (l, Some(r))
    };
    let record = RunRecord {
        stage: spec.stage.into(),
        strategy: Some(spec.strategy),
        modality: spec.modality,
        epochs,
        transition,
        best_epoch,
        best_val_edit: Some(best_edit),
        best_params_hash: params_hash(&model),
        val: Some(val),
        test,
    };
    Ok((model, record))
}

/// Stage I: the skeleton detector under `cfg.strategy`.
pub fn run_stage1(cfg: &RunConfig, split: &DatasetSplit, s: &LabelSchema) -> Result<(ModelState, RunRecord)> {
    cfg.validate()?;
    let model = ModelState::init(cfg.arch(Modality::Pose, s.num_classes()), mix_seed(cfg.seed, salt("stage1/init")))?;
    let spec = FitSpec {
        stage: "stage1",
        modality: Modality::Pose,
        epochs: cfg.stage1_epochs,
        strategy: cfg.strategy,
        seed: cfg.seed,
    };
    let mut objective = SelfTraining {
        schedule: cfg.anneal,
        schema: s.clone(),
        fg_weight: cfg.fg_weight,
    };
    fit(cfg, split, s, model, &spec, Some(&mut objective))
}

/// RGB-only detector trained from scratch on the labeled clips.
pub fn run_baseline(cfg: &RunConfig, split: &DatasetSplit, s: &LabelSchema) -> Result<(ModelState, RunRecord)> {
    cfg.validate()?;
    let model = ModelState::init(cfg.arch(Modality::Rgb, s.num_classes()), mix_seed(cfg.seed, salt("baseline/init")))?;
    let spec = FitSpec {
        stage: "baseline_rgb",
        modality: Modality::Rgb,
        epochs: cfg.baseline_epochs,
        strategy: Strategy::LabeledOnly,
        seed: cfg.seed,
    };
    fit(cfg, split, s, model, &spec, None)
}
