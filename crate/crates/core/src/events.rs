//! Event sequences and their dense per-frame label encoding.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schema::{validate_hard_vector, EventVocab, LabelSchema};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Event {
    pub class_id: usize,
    pub frame: usize,
}

/// Events ordered by strictly increasing frame.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Event>", into = "Vec<Event>")]
pub struct EventSequence {
    events: Vec<Event>,
}

impl EventSequence {
    pub fn new(events: Vec<Event>) -> Result<Self> {
        if events.windows(2).any(|w| w[0].frame >= w[1].frame) {
            return Err(Error::Argument("event frames must be strictly increasing".into()));
        }
        Ok(Self { events })
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn classes(&self) -> Vec<usize> {
        self.events.iter().map(|e| e.class_id).collect()
    }

    pub fn check_vocab(&self, vocab: &EventVocab) -> Result<()> {
        match self.events.iter().find(|e| e.class_id >= vocab.len()) {
            Some(e) => Err(Error::Argument(format!(
                "class id {} outside vocabulary of {}",
                e.class_id,
                vocab.len()
            ))),
            None => Ok(()),
        }
    }
}

impl TryFrom<Vec<Event>> for EventSequence {
    type Error = Error;
    fn try_from(events: Vec<Event>) -> Result<Self> {
        Self::new(events)
    }
}

impl From<EventSequence> for Vec<Event> {
    fn from(seq: EventSequence) -> Self {
        seq.events
    }
}

/// Dense targets for one clip: coarse event/background flag per frame and
/// a T x C fine label matrix. Shared by ground truth and pseudo-labels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameLabels {
    pub coarse: Vec<u8>,
    pub fine: Vec<Vec<u8>>,
}

impl FrameLabels {
    pub fn background(frames: usize, classes: usize) -> Self {
        Self {
            coarse: vec![0; frames],
            fine: vec![vec![0; classes]; frames],
        }
    }

    pub fn frames(&self) -> usize {
        self.coarse.len()
    }

    pub fn event_frames(&self) -> impl Iterator<Item = usize> + '_ {
        self.coarse.iter().enumerate().filter(|(_, &c)| c == 1).map(|(t, _)| t)
    }

    pub fn fine_row(&self, t: usize) -> Vec<f64> {
        self.fine[t].iter().map(|&b| f64::from(b)).collect()
    }

    /// Coarse is binary, fine rows are zero on background and
    /// schema-valid on event frames.
    pub fn check(&self, schema: &LabelSchema) -> Result<()> {
        if self.fine.len() != self.coarse.len() {
            return Err(Error::Dataset("coarse/fine frame counts differ".into()));
        }
        for (t, (&c, row)) in self.coarse.iter().zip(&self.fine).enumerate() {
            if row.len() != schema.num_classes() {
                return Err(Error::Dataset(format!("frame {t}: fine row has wrong width")));
            }
            let ok = match c {
                0 => row.iter().all(|&b| b == 0),
                1 => validate_hard_vector(&row.iter().map(|&b| f64::from(b)).collect::<Vec<_>>(), schema)?,
                _ => false,
            };
            if !ok {
                return Err(Error::Dataset(format!("frame {t}: labels violate the schema")));
            }
        }
        Ok(())
    }
}

pub fn labels_from_events(events: &EventSequence, frames: usize, vocab: &EventVocab) -> Result<FrameLabels> {
    events.check_vocab(vocab)?;
    let classes = vocab.bits(0).len();
    let mut labels = FrameLabels::background(frames, classes);
    for e in events.events() {
        if e.frame >= frames {
            return Err(Error::Argument(format!("event at frame {} beyond T={frames}", e.frame)));
        }
        labels.coarse[e.frame] = 1;
        labels.fine[e.frame] = vocab.bits(e.class_id).to_vec();
    }
    Ok(labels)
}

pub fn events_from_labels(labels: &FrameLabels, vocab: &EventVocab) -> Result<EventSequence> {
    let events = labels
        .event_frames()
        .map(|t| {
            vocab
                .index_of_bits(&labels.fine[t])
                .map(|class_id| Event { class_id, frame: t })
                .ok_or_else(|| Error::Dataset(format!("frame {t}: fine label not in vocabulary")))
        })
        .collect::<Result<Vec<_>>>()?;
    EventSequence::new(events)
}
