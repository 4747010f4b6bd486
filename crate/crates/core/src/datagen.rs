//! Synthetic multimodal clips and few-shot (k-clip) splits.
//!
//! Clips come from a latent motion process. Events are placed by a
//! semi-Markov sampler with a minimum gap. Each active fine class adds its
//! own motion template around the event frame, on top of a template shared
//! by all events and a smooth AR(1) background. The pose view is the latent
//! plus low noise. RGB and flow are fixed random linear projections of the
//! latent with heavier noise, RGB the heaviest.
//!
//! Templates and projections depend only on `world_seed`, so datasets drawn
//! with different seeds share one world but come from different videos.

use std::borrow::Cow;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Geometric, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::events::{events_from_labels, labels_from_events, Event, EventSequence, FrameLabels};
use crate::schema::{event_vocab, EventVocab, LabelSchema};
use crate::tensor::{Mat, PoseTensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub frames: usize,
    pub persons: usize,
    pub joints: usize,
    pub rgb_dim: usize,
    pub flow_dim: usize,
    pub clips: usize,
    /// Expected number of events per clip.
    pub event_rate: f64,
    pub min_gap: usize,
    pub segment_half_width: usize,
    pub event_amplitude: f64,
    pub background_scale: f64,
    pub background_rho: f64,
    pub pose_noise: f64,
    pub flow_noise: f64,
    pub rgb_noise: f64,
    pub clips_per_video: usize,
    pub video_style_scale: f64,
    pub world_seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            frames: 32,
            persons: 1,
            joints: 8,
            rgb_dim: 32,
            flow_dim: 24,
            clips: 100,
            event_rate: 3.0,
            min_gap: 2,
            segment_half_width: 2,
            event_amplitude: 1.0,
            background_scale: 0.5,
            background_rho: 0.8,
            pose_noise: 0.15,
            flow_noise: 0.6,
            rgb_noise: 0.9,
            clips_per_video: 8,
            video_style_scale: 0.3,
            world_seed: 7,
        }
    }
}

impl GenConfig {
    pub fn latent_dim(&self) -> usize {
        self.persons * self.joints * 2
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("frames", self.frames),
            ("persons", self.persons),
            ("joints", self.joints),
            ("rgb_dim", self.rgb_dim),
            ("flow_dim", self.flow_dim),
            ("clips_per_video", self.clips_per_video),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.min_gap < 2 {
            return Err(Error::Config("min_gap must be at least 2 frames".into()));
        }
        let reals = [
            ("event_rate", self.event_rate),
            ("event_amplitude", self.event_amplitude),
            ("background_scale", self.background_scale),
            ("pose_noise", self.pose_noise),
            ("flow_noise", self.flow_noise),
            ("rgb_noise", self.rgb_noise),
            ("video_style_scale", self.video_style_scale),
        ];
        if let Some((name, _)) = reals.iter().find(|(_, v)| !v.is_finite() || *v < 0.0) {
            return Err(Error::Config(format!("{name} must be finite and non-negative")));
        }
        if !(0.0..1.0).contains(&self.background_rho) {
            return Err(Error::Config("background_rho must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClipSample {
    pub clip_id: String,
    pub video_id: String,
    pub pose: PoseTensor,
    pub rgb: Mat,
    pub flow: Mat,
    pub labels: FrameLabels,
    pub events: EventSequence,
}

impl ClipSample {
    pub fn frames(&self) -> usize {
        self.labels.frames()
    }

    pub fn view(&self) -> ClipView<'_> {
        ClipView {
            clip_id: &self.clip_id,
            pose: &self.pose,
            rgb: &self.rgb,
            flow: &self.flow,
        }
    }

    /// Every stored invariant: shapes agree, labels obey the schema, and the
    /// event list is exactly what the labels decode to.
    pub fn check(&self, schema: &LabelSchema, vocab: &EventVocab) -> Result<()> {
        let t = self.frames();
        if self.pose.frames != t || self.rgb.rows != t || self.flow.rows != t {
            return Err(Error::Dataset(format!("{}: modality frame counts differ", self.clip_id)));
        }
        self.labels.check(schema)?;
        if events_from_labels(&self.labels, vocab)? != self.events {
            return Err(Error::Dataset(format!("{}: events disagree with labels", self.clip_id)));
        }
        Ok(())
    }
}

/// Input features of a clip without any labels.
#[derive(Debug, Clone, Copy)]
pub struct ClipView<'a> {
    pub clip_id: &'a str,
    pub pose: &'a PoseTensor,
    pub rgb: &'a Mat,
    pub flow: &'a Mat,
}

/// Which input streams a model consumes. `RgbFlow` feeds two encoders whose
/// embeddings are summed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Pose,
    Rgb,
    Flow,
    RgbFlow,
}

impl Modality {
    /// Per-frame input width of each encoder.
    pub fn input_dims(self, cfg: &GenConfig) -> Vec<usize> {
        match self {
            Modality::Pose => vec![cfg.persons * cfg.joints * 2],
            Modality::Rgb => vec![cfg.rgb_dim],
            Modality::Flow => vec![cfg.flow_dim],
            Modality::RgbFlow => vec![cfg.rgb_dim, cfg.flow_dim],
        }
    }
}

impl<'a> ClipView<'a> {
    pub fn inputs(&self, m: Modality) -> Vec<Cow<'a, Mat>> {
        match m {
            Modality::Pose => vec![Cow::Owned(self.pose.as_frames())],
            Modality::Rgb => vec![Cow::Borrowed(self.rgb)],
            Modality::Flow => vec![Cow::Borrowed(self.flow)],
            Modality::RgbFlow => vec![Cow::Borrowed(self.rgb), Cow::Borrowed(self.flow)],
        }
    }
}

struct World {
    onset: Mat,
    class_templates: Vec<Mat>,
    rgb_proj: Mat,
    flow_proj: Mat,
}

pub(crate) fn mix_seed(a: u64, b: u64) -> u64 {
    // splitmix64 finalizer over a combined word
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0x632B_E59B_D9B4_E019);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn gaussian_mat(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Mat {
    let normal = Normal::new(0.0, std).expect("valid std");
    Mat {
        rows,
        cols,
        data: (0..rows * cols).map(|_| normal.sample(rng)).collect(),
    }
}

impl World {
    fn new(cfg: &GenConfig, classes: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.world_seed, 0x5EED));
        let latent = cfg.latent_dim();
        let h = cfg.segment_half_width;
        let width = 2 * h + 1;
        let sigma = 0.5 + h as f64 / 2.0;
        let template = |rng: &mut ChaCha8Rng| {
            let mut m = gaussian_mat(rng, width, latent, 1.0);
            for o in 0..width {
                let off = o as f64 - h as f64;
                let env = (-0.5 * (off / sigma).powi(2)).exp();
                m.row_mut(o).iter_mut().for_each(|x| *x *= env);
            }
            m
        };
        let onset = template(&mut rng);
        let class_templates = (0..classes).map(|_| template(&mut rng)).collect();
        let proj_std = 1.0 / (latent as f64).sqrt();
        let rgb_proj = gaussian_mat(&mut rng, latent, cfg.rgb_dim, proj_std);
        let flow_proj = gaussian_mat(&mut rng, latent, cfg.flow_dim, proj_std);
        Self {
            onset,
            class_templates,
            rgb_proj,
            flow_proj,
        }
    }
}

fn project(latent: &Mat, proj: &Mat) -> Mat {
    let mut out = Mat::zeros(latent.rows, proj.cols);
    for t in 0..latent.rows {
        let src = latent.row(t);
        let dst = out.row_mut(t);
        for (l, &x) in src.iter().enumerate() {
            for (d, &w) in dst.iter_mut().zip(proj.row(l)) {
                *d += x * w;
            }
        }
    }
    out
}

fn add_noise(m: &mut Mat, std: f64, rng: &mut ChaCha8Rng) {
    if std > 0.0 {
        let normal = Normal::new(0.0, std).expect("valid std");
        m.data.iter_mut().for_each(|x| *x += normal.sample(rng));
    }
}

fn sample_event_frames(cfg: &GenConfig, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if cfg.event_rate <= 0.0 {
        return Vec::new();
    }
    let mean_gap = cfg.frames as f64 / cfg.event_rate;
    let extra_mean = (mean_gap - cfg.min_gap as f64).max(0.0);
    let extra = Geometric::new(1.0 / (1.0 + extra_mean)).expect("valid probability");
    let mut frames = Vec::new();
    let mut t = extra.sample(rng) as usize;
    while t < cfg.frames {
        frames.push(t);
        t += cfg.min_gap + extra.sample(rng) as usize;
    }
    frames
}

fn generate_clip(cfg: &GenConfig, world: &World, vocab: &EventVocab, seed: u64, index: usize) -> Result<ClipSample> {
    let video = index / cfg.clips_per_video;
    let mut style_rng = ChaCha8Rng::seed_from_u64(mix_seed(mix_seed(seed, 0x51DE), video as u64));
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, index as u64 + 1));
    let latent_dim = cfg.latent_dim();
    let t_len = cfg.frames;

    let style = gaussian_mat(&mut style_rng, 1, latent_dim, cfg.video_style_scale);
    let mut latent = Mat::zeros(t_len, latent_dim);
    let innovation = Normal::new(0.0, cfg.background_scale * (1.0 - cfg.background_rho.powi(2)).sqrt())
        .expect("valid std");
    let init = Normal::new(0.0, cfg.background_scale).expect("valid std");
    let mut state: Vec<f64> = (0..latent_dim).map(|_| init.sample(&mut rng)).collect();
    for t in 0..t_len {
        if t > 0 {
            for s in state.iter_mut() {
                *s = cfg.background_rho * *s + innovation.sample(&mut rng);
            }
        }
        for ((dst, &s), &st) in latent.row_mut(t).iter_mut().zip(&state).zip(&style.data) {
            *dst = s + st;
        }
    }

    let events: Vec<Event> = sample_event_frames(cfg, &mut rng)
        .into_iter()
        .map(|frame| Event {
            class_id: rng.gen_range(0..vocab.len()),
            frame,
        })
        .collect();
    let h = cfg.segment_half_width as isize;
    for e in &events {
        let bits = vocab.bits(e.class_id);
        for o in -h..=h {
            let f = e.frame as isize + o;
            if f < 0 || f >= t_len as isize {
                continue;
            }
            let row = (o + h) as usize;
            let dst = latent.row_mut(f as usize);
            for (l, d) in dst.iter_mut().enumerate() {
                let mut v = world.onset.row(row)[l];
                for (c, &b) in bits.iter().enumerate() {
                    if b == 1 {
                        v += world.class_templates[c].row(row)[l];
                    }
                }
                *d += cfg.event_amplitude * v;
            }
        }
    }
    let events = EventSequence::new(events)?;
    let labels = labels_from_events(&events, t_len, vocab)?;

    let mut pose_frames = latent.clone();
    add_noise(&mut pose_frames, cfg.pose_noise, &mut rng);
    let mut rgb = project(&latent, &world.rgb_proj);
    add_noise(&mut rgb, cfg.rgb_noise, &mut rng);
    let mut flow = project(&latent, &world.flow_proj);
    add_noise(&mut flow, cfg.flow_noise, &mut rng);

    Ok(ClipSample {
        clip_id: format!("s{seed}-c{index:05}"),
        video_id: format!("s{seed}-v{video:04}"),
        pose: PoseTensor::from_frames(&pose_frames, cfg.persons, cfg.joints)?,
        rgb,
        flow,
        labels,
        events,
    })
}

/// Deterministic in `(cfg, seed)`; clips are generated in parallel from
/// per-clip derived seeds, so thread scheduling cannot change the output.
pub fn generate_dataset(cfg: &GenConfig, schema: &LabelSchema, seed: u64) -> Result<Vec<ClipSample>> {
    cfg.validate()?;
    let vocab = event_vocab(schema);
    let world = World::new(cfg, schema.num_classes());
    (0..cfg.clips)
        .into_par_iter()
        .map(|i| generate_clip(cfg, &world, &vocab, seed, i))
        .collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct AccessCounts {
    pub labeled_labels: usize,
    pub labeled_features: usize,
    pub unlabeled_labels: usize,
    pub unlabeled_features: usize,
}

#[derive(Debug, Default)]
struct AccessLog {
    labeled_labels: AtomicUsize,
    labeled_features: AtomicUsize,
    unlabeled_labels: AtomicUsize,
    unlabeled_features: AtomicUsize,
}

impl AccessLog {
    fn bump(counter: &AtomicUsize) {
        counter.fetch_add(1, Ordering::Relaxed);
    }
}

/// Labeled/unlabeled training pools plus evaluation sets.
///
/// Unlabeled clips keep their ground truth, but training code only reaches
/// it through [`DatasetSplit::unlabeled_ground_truth`], and every access to
/// a training pool is counted so tests can assert which data a stage read.
#[derive(Debug)]
pub struct DatasetSplit {
    labeled: Vec<ClipSample>,
    unlabeled: Vec<ClipSample>,
    val: Vec<ClipSample>,
    test: Vec<ClipSample>,
    log: AccessLog,
}

impl Clone for DatasetSplit {
    fn clone(&self) -> Self {
        Self::from_parts(self.labeled.clone(), self.unlabeled.clone(), self.val.clone(), self.test.clone())
    }
}

impl DatasetSplit {
    pub fn from_parts(
        labeled: Vec<ClipSample>,
        unlabeled: Vec<ClipSample>,
        val: Vec<ClipSample>,
        test: Vec<ClipSample>,
    ) -> Self {
        Self {
            labeled,
            unlabeled,
            val,
            test,
            log: AccessLog::default(),
        }
    }

    pub fn with_eval(mut self, val: Vec<ClipSample>, test: Vec<ClipSample>) -> Self {
        self.val = val;
        self.test = test;
        self
    }

    pub fn labeled_len(&self) -> usize {
        self.labeled.len()
    }

    pub fn unlabeled_len(&self) -> usize {
        self.unlabeled.len()
    }

    pub fn labeled(&self, i: usize) -> &ClipSample {
        AccessLog::bump(&self.log.labeled_labels);
        &self.labeled[i]
    }

    pub fn labeled_view(&self, i: usize) -> ClipView<'_> {
        AccessLog::bump(&self.log.labeled_features);
        self.labeled[i].view()
    }

    pub fn unlabeled_view(&self, i: usize) -> ClipView<'_> {
        AccessLog::bump(&self.log.unlabeled_features);
        self.unlabeled[i].view()
    }

    /// Hidden labels of an unlabeled clip, for oracle evaluation only.
    pub fn unlabeled_ground_truth(&self, i: usize) -> &ClipSample {
        AccessLog::bump(&self.log.unlabeled_labels);
        &self.unlabeled[i]
    }

    pub fn val(&self) -> &[ClipSample] {
        &self.val
    }

    pub fn test(&self) -> &[ClipSample] {
        &self.test
    }

    pub fn labeled_ids(&self) -> Vec<&str> {
        self.labeled.iter().map(|c| c.clip_id.as_str()).collect()
    }

    pub fn unlabeled_ids(&self) -> Vec<&str> {
        self.unlabeled.iter().map(|c| c.clip_id.as_str()).collect()
    }

    pub fn access_counts(&self) -> AccessCounts {
        AccessCounts {
            labeled_labels: self.log.labeled_labels.load(Ordering::Relaxed),
            labeled_features: self.log.labeled_features.load(Ordering::Relaxed),
            unlabeled_labels: self.log.unlabeled_labels.load(Ordering::Relaxed),
            unlabeled_features: self.log.unlabeled_features.load(Ordering::Relaxed),
        }
    }

    pub fn reset_access_counts(&self) {
        for c in [
            &self.log.labeled_labels,
            &self.log.labeled_features,
            &self.log.unlabeled_labels,
            &self.log.unlabeled_features,
        ] {
            c.store(0, Ordering::Relaxed);
        }
    }
}

/// Uniformly picks `k` labeled clips without replacement; the rest of the
/// pool becomes unlabeled. Both keep pool order.
pub fn split_k_clip(pool: Vec<ClipSample>, k: usize, seed: u64) -> Result<DatasetSplit> {
    if k == 0 {
        return Err(Error::Argument("k must be positive".into()));
    }
    if k > pool.len() {
        return Err(Error::Argument(format!("k={k} exceeds pool size {}", pool.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x5917));
    let mut chosen = vec![false; pool.len()];
    for i in sample_indices(&mut rng, pool.len(), k) {
        chosen[i] = true;
    }
    let (labeled, unlabeled): (Vec<_>, Vec<_>) = pool.into_iter().zip(chosen).partition(|(_, c)| *c);
    Ok(DatasetSplit::from_parts(
        labeled.into_iter().map(|(clip, _)| clip).collect(),
        unlabeled.into_iter().map(|(clip, _)| clip).collect(),
        Vec::new(),
        Vec::new(),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplePhase {
    LabeledOnly,
    Mixed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Labeled,
    Unlabeled,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub origin: Origin,
    pub indices: Vec<usize>,
    /// Mixed phase wanted unlabeled clips but the pool was empty.
    pub fell_back: bool,
}

/// Draws `batch_size` clip indices with replacement. In the mixed phase a
/// fair coin decides which pool the whole batch comes from.
pub fn sample_batch(split: &DatasetSplit, phase: SamplePhase, batch_size: usize, rng: &mut impl Rng) -> Result<Batch> {
    if split.labeled_len() == 0 {
        return Err(Error::Empty("labeled pool is empty".into()));
    }
    if batch_size == 0 {
        return Err(Error::Argument("batch size must be positive".into()));
    }
    let mut origin = Origin::Labeled;
    let mut fell_back = false;
    if phase == SamplePhase::Mixed && rng.gen_bool(0.5) {
        if split.unlabeled_len() == 0 {
            log::warn!("unlabeled pool is empty; drawing a labeled batch instead");
            fell_back = true;
        } else {
            origin = Origin::Unlabeled;
        }
    }
    let n = match origin {
        Origin::Labeled => split.labeled_len(),
        Origin::Unlabeled => split.unlabeled_len(),
    };
    let indices = (0..batch_size).map(|_| rng.gen_range(0..n)).collect();
    Ok(Batch {
        origin,
        indices,
        fell_back,
    })
}

/// One line of a dataset file.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ClipRecord {
    clip_id: String,
    video_id: String,
    pose: PoseTensor,
    rgb_feat: Mat,
    flow_feat: Mat,
    coarse_labels: Vec<u8>,
    fine_labels: Vec<Vec<u8>>,
    events: EventSequence,
}

pub fn write_dataset(path: &Path, clips: &[ClipSample]) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for c in clips {
        let rec = ClipRecord {
            clip_id: c.clip_id.clone(),
            video_id: c.video_id.clone(),
            pose: c.pose.clone(),
            rgb_feat: c.rgb.clone(),
            flow_feat: c.flow.clone(),
            coarse_labels: c.labels.coarse.clone(),
            fine_labels: c.labels.fine.clone(),
            events: c.events.clone(),
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a dataset file and checks every clip invariant.
pub fn read_dataset(path: &Path, schema: &LabelSchema) -> Result<Vec<ClipSample>> {
    let vocab = event_vocab(schema);
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut clips = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ClipRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Dataset(format!("{}:{}: {e}", path.display(), n + 1)))?;
        let clip = ClipSample {
            clip_id: rec.clip_id,
            video_id: rec.video_id,
            pose: rec.pose,
            rgb: rec.rgb_feat,
            flow: rec.flow_feat,
            labels: FrameLabels {
                coarse: rec.coarse_labels,
                fine: rec.fine_labels,
            },
            events: rec.events,
        };
        clip.check(schema, &vocab)?;
        clips.push(clip);
    }
    Ok(clips)
}
