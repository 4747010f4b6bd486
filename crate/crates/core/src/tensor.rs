//! Row-major dense matrices and the pose tensor layout.

use serde::de::Deserializer;
use serde::ser::Serializer;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(shape_err(format!(
                "{} values cannot fill a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(shape_err("ragged rows"));
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data: rows.concat(),
        })
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows).map(|r| self.row(r).to_vec()).collect()
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

impl Serialize for Mat {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_seq((0..self.rows).map(|r| self.row(r)))
    }
}

impl<'de> Deserialize<'de> for Mat {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        Mat::from_rows(&rows).map_err(serde::de::Error::custom)
    }
}

/// Pose sequence of shape T x P x V x 2, stored flat in that order.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseTensor {
    pub frames: usize,
    pub persons: usize,
    pub joints: usize,
    pub data: Vec<f64>,
}

impl PoseTensor {
    pub fn zeros(frames: usize, persons: usize, joints: usize) -> Self {
        Self {
            frames,
            persons,
            joints,
            data: vec![0.0; frames * persons * joints * 2],
        }
    }

    pub fn frame_dim(&self) -> usize {
        self.persons * self.joints * 2
    }

    /// View as T x (P*V*2) frame features.
    pub fn as_frames(&self) -> Mat {
        Mat {
            rows: self.frames,
            cols: self.frame_dim(),
            data: self.data.clone(),
        }
    }

    pub fn from_frames(m: &Mat, persons: usize, joints: usize) -> Result<Self> {
        if m.cols != persons * joints * 2 {
            return Err(shape_err(format!(
                "frame width {} is not P*V*2 = {}",
                m.cols,
                persons * joints * 2
            )));
        }
        Ok(Self {
            frames: m.rows,
            persons,
            joints,
            data: m.data.clone(),
        })
    }
}

impl Serialize for PoseTensor {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let fd = self.frame_dim();
        let nested: Vec<Vec<Vec<[f64; 2]>>> = (0..self.frames)
            .map(|t| {
                let frame = &self.data[t * fd..(t + 1) * fd];
                frame
                    .chunks(self.joints * 2)
                    .map(|person| person.chunks(2).map(|xy| [xy[0], xy[1]]).collect())
                    .collect()
            })
            .collect();
        nested.serialize(s)
    }
}

impl<'de> Deserialize<'de> for PoseTensor {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let nested = Vec::<Vec<Vec<[f64; 2]>>>::deserialize(d)?;
        let frames = nested.len();
        let persons = nested.first().map_or(0, Vec::len);
        let joints = nested.first().and_then(|f| f.first()).map_or(0, Vec::len);
        let mut data = Vec::with_capacity(frames * persons * joints * 2);
        for frame in &nested {
            if frame.len() != persons || frame.iter().any(|p| p.len() != joints) {
                return Err(serde::de::Error::custom("ragged pose tensor"));
            }
            for person in frame {
                for xy in person {
                    data.extend_from_slice(xy);
                }
            }
        }
        Ok(Self {
            frames,
            persons,
            joints,
            data,
        })
    }
}
