//! Coordinate-classification codec.
//!
//! A keypoint is represented by two 1-D distributions: one over `L_x`
//! horizontal bins and one over `L_y` vertical bins, with `split_ratio` bins
//! per input pixel. Encoding places a renormalized discrete Gaussian at the
//! sub-pixel position; decoding takes the argmax of each row.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::tensor::PoseLogits;

/// Coarse body region a keypoint belongs to, used for per-part reporting.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PartGroup {
    Body,
    Foot,
    Face,
    Hand,
}

impl PartGroup {
    pub const ALL: [PartGroup; 4] = [PartGroup::Body, PartGroup::Foot, PartGroup::Face, PartGroup::Hand];

    pub fn as_str(self) -> &'static str {
        match self {
            PartGroup::Body => "body",
            PartGroup::Foot => "foot",
            PartGroup::Face => "face",
            PartGroup::Hand => "hand",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        PartGroup::ALL.into_iter().find(|g| g.as_str() == s)
    }
}

/// COCO-style visibility flags.
pub const VIS_UNLABELED: u8 = 0;
pub const VIS_OCCLUDED: u8 = 1;
pub const VIS_VISIBLE: u8 = 2;

/// Annotated keypoints of one instance, in input-image pixel space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KeypointSet {
    pub coords: Vec<[f64; 2]>,
    pub visibility: Vec<u8>,
    pub part_group: Vec<PartGroup>,
}

impl KeypointSet {
    pub fn new(coords: Vec<[f64; 2]>, visibility: Vec<u8>, part_group: Vec<PartGroup>) -> Result<Self> {
        let kps = Self {
            coords,
            visibility,
            part_group,
        };
        kps.validate()?;
        Ok(kps)
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.coords.len();
        ensure!(
            self.visibility.len() == k && self.part_group.len() == k,
            "keypoint set has {k} coords, {} flags, {} groups",
            self.visibility.len(),
            self.part_group.len()
        );
        if let Some(i) = self.coords.iter().position(|c| !c[0].is_finite() || !c[1].is_finite()) {
            return Err(Error::InvalidInput(format!("keypoint {i} has non-finite coordinates")));
        }
        if let Some(i) = self.visibility.iter().position(|v| *v > VIS_VISIBLE) {
            return Err(Error::InvalidInput(format!(
                "keypoint {i} has visibility flag {}",
                self.visibility[i]
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn is_labeled(&self, k: usize) -> bool {
        self.visibility[k] > VIS_UNLABELED
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimCCConfig {
    pub input_width: usize,
    pub input_height: usize,
    #[serde(default = "default_split_ratio")]
    pub split_ratio: f64,
    #[serde(default = "default_label_sigma")]
    pub label_sigma: f64,
}

fn default_split_ratio() -> f64 {
    2.0
}

fn default_label_sigma() -> f64 {
    6.0
}

impl SimCCConfig {
    pub fn new(input_width: usize, input_height: usize) -> Self {
        Self {
            input_width,
            input_height,
            split_ratio: default_split_ratio(),
            label_sigma: default_label_sigma(),
        }
    }

    pub fn bins_x(&self) -> usize {
        (self.input_width as f64 * self.split_ratio).round() as usize
    }

    pub fn bins_y(&self) -> usize {
        (self.input_height as f64 * self.split_ratio).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.split_ratio > 0.0 && self.split_ratio.is_finite()) {
            return Err(Error::Config(format!(
                "split_ratio must be > 0, got {}",
                self.split_ratio
            )));
        }
        if !(self.label_sigma > 0.0 && self.label_sigma.is_finite()) {
            return Err(Error::Config(format!(
                "label_sigma must be > 0, got {}",
                self.label_sigma
            )));
        }
        if self.bins_x() < 2 || self.bins_y() < 2 {
            return Err(Error::Config(format!(
                "bin counts must be >= 2, got {}x{}",
                self.bins_x(),
                self.bins_y()
            )));
        }
        Ok(())
    }
}

/// Per-keypoint label distributions for one instance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimCCTarget {
    pub num_keypoints: usize,
    pub bins_x: usize,
    pub bins_y: usize,
    pub x_labels: Vec<f64>,
    pub y_labels: Vec<f64>,
}

impl SimCCTarget {
    pub fn x_row(&self, k: usize) -> &[f64] {
        &self.x_labels[k * self.bins_x..(k + 1) * self.bins_x]
    }

    pub fn y_row(&self, k: usize) -> &[f64] {
        &self.y_labels[k * self.bins_y..(k + 1) * self.bins_y]
    }

    /// The labels reinterpreted as logits (for decode round-trips).
    pub fn as_logits(&self) -> PoseLogits {
        PoseLogits {
            num_keypoints: self.num_keypoints,
            bins_x: self.bins_x,
            bins_y: self.bins_y,
            x: self.x_labels.clone(),
            y: self.y_labels.clone(),
        }
    }
}

/// Batch target-weight mask, `N x K`, entries exactly 0 or 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VisibilityWeights {
    pub samples: usize,
    pub num_keypoints: usize,
    pub weights: Vec<f64>,
}

impl VisibilityWeights {
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let k = rows.first().map_or(0, Vec::len);
        ensure!(rows.iter().all(|r| r.len() == k), "weight rows have unequal lengths");
        let weights: Vec<f64> = rows.concat();
        ensure!(
            weights.iter().all(|w| *w == 0.0 || *w == 1.0),
            "target weights must be exactly 0 or 1"
        );
        Ok(Self {
            samples: rows.len(),
            num_keypoints: k,
            weights,
        })
    }

    pub fn ones(samples: usize, num_keypoints: usize) -> Self {
        Self {
            samples,
            num_keypoints,
            weights: vec![1.0; samples * num_keypoints],
        }
    }

    pub fn row(&self, n: usize) -> &[f64] {
        &self.weights[n * self.num_keypoints..(n + 1) * self.num_keypoints]
    }
}

fn center_bin(pos: f64, split_ratio: f64) -> f64 {
    (pos * split_ratio).round()
}

fn gaussian_row(row: &mut [f64], mu: f64, sigma: f64) {
    let denom = 2.0 * sigma * sigma;
    let mut sum = 0.0;
    for (i, v) in row.iter_mut().enumerate() {
        let d = i as f64 - mu;
        *v = (-d * d / denom).exp();
        sum += *v;
    }
    if sum > 0.0 && sum.is_finite() {
        for v in row.iter_mut() {
            *v /= sum;
        }
    } else {
        // Sigma far below one bin: every tap underflowed, collapse to a delta.
        row.iter_mut().for_each(|v| *v = 0.0);
        row[mu.round().clamp(0.0, (row.len() - 1) as f64) as usize] = 1.0;
    }
}

/// Encodes one instance into label rows plus its target-weight row.
///
/// A keypoint gets weight 1 iff it is labeled (flag 1 or 2) and its center
/// bin falls inside both axes; otherwise its rows stay all-zero.
pub fn encode(kps: &KeypointSet, cfg: &SimCCConfig) -> Result<(SimCCTarget, Vec<f64>)> {
    kps.validate()?;
    cfg.validate()?;
    let (lx, ly) = (cfg.bins_x(), cfg.bins_y());
    let k = kps.len();
    let mut x_labels = vec![0.0; k * lx];
    let mut y_labels = vec![0.0; k * ly];
    let mut weights = vec![0.0; k];
    for (i, [px, py]) in kps.coords.iter().copied().enumerate() {
        if !kps.is_labeled(i) {
            continue;
        }
        let (cx, cy) = (center_bin(px, cfg.split_ratio), center_bin(py, cfg.split_ratio));
        if cx < 0.0 || cx >= lx as f64 || cy < 0.0 || cy >= ly as f64 {
            continue;
        }
        gaussian_row(
            &mut x_labels[i * lx..(i + 1) * lx],
            px * cfg.split_ratio,
            cfg.label_sigma,
        );
        gaussian_row(
            &mut y_labels[i * ly..(i + 1) * ly],
            py * cfg.split_ratio,
            cfg.label_sigma,
        );
        weights[i] = 1.0;
    }
    Ok((
        SimCCTarget {
            num_keypoints: k,
            bins_x: lx,
            bins_y: ly,
            x_labels,
            y_labels,
        },
        weights,
    ))
}

/// Decoded keypoints: pixel coordinates and a confidence in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoded {
    pub coords: Vec<[f64; 2]>,
    pub scores: Vec<f64>,
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate().skip(1) {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

fn softmax_max(row: &[f64]) -> f64 {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(*v));
    let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
    1.0 / sum
}

pub fn decode(logits: &PoseLogits, cfg: &SimCCConfig) -> Result<Decoded> {
    ensure!(
        logits.bins_x == cfg.bins_x() && logits.bins_y == cfg.bins_y(),
        "logits have {}x{} bins, config expects {}x{}",
        logits.bins_x,
        logits.bins_y,
        cfg.bins_x(),
        cfg.bins_y()
    );
    ensure!(
        logits.x.len() == logits.num_keypoints * logits.bins_x
            && logits.y.len() == logits.num_keypoints * logits.bins_y,
        "logit buffers do not match their declared shape"
    );
    let mut coords = Vec::with_capacity(logits.num_keypoints);
    let mut scores = Vec::with_capacity(logits.num_keypoints);
    for k in 0..logits.num_keypoints {
        let (rx, ry) = (logits.x_row(k), logits.y_row(k));
        coords.push([argmax(rx) as f64 / cfg.split_ratio, argmax(ry) as f64 / cfg.split_ratio]);
        scores.push(0.5 * (softmax_max(rx) + softmax_max(ry)));
    }
    Ok(Decoded { coords, scores })
}
