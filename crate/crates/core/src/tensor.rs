//! Value types shared by the model, codec and losses.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};

/// Dense `C x H x W` activation map, channel-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureMap {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        ensure!(
            channels >= 1 && height >= 1 && width >= 1,
            "feature map dims must be >= 1, got {channels}x{height}x{width}"
        );
        ensure!(
            data.len() == channels * height * width,
            "feature map data has {} values, expected {}",
            data.len(),
            channels * height * width
        );
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("feature map".into()));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn spatial(&self) -> usize {
        self.height * self.width
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }
}

/// Raw per-keypoint scores over horizontal and vertical bins.
///
/// `x` is `K x L_x` row-major, `y` is `K x L_y`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseLogits {
    pub num_keypoints: usize,
    pub bins_x: usize,
    pub bins_y: usize,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

impl PoseLogits {
    pub fn new(num_keypoints: usize, bins_x: usize, bins_y: usize, x: Vec<f64>, y: Vec<f64>) -> Result<Self> {
        ensure!(
            x.len() == num_keypoints * bins_x && y.len() == num_keypoints * bins_y,
            "logit buffers ({}, {}) do not match K={num_keypoints}, L_x={bins_x}, L_y={bins_y}",
            x.len(),
            y.len()
        );
        Ok(Self {
            num_keypoints,
            bins_x,
            bins_y,
            x,
            y,
        })
    }

    pub fn zeros(num_keypoints: usize, bins_x: usize, bins_y: usize) -> Self {
        Self {
            num_keypoints,
            bins_x,
            bins_y,
            x: vec![0.0; num_keypoints * bins_x],
            y: vec![0.0; num_keypoints * bins_y],
        }
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.num_keypoints == other.num_keypoints && self.bins_x == other.bins_x && self.bins_y == other.bins_y
    }

    pub fn x_row(&self, k: usize) -> &[f64] {
        &self.x[k * self.bins_x..(k + 1) * self.bins_x]
    }

    pub fn y_row(&self, k: usize) -> &[f64] {
        &self.y[k * self.bins_y..(k + 1) * self.bins_y]
    }

    /// Row-wise softmax of `logits / temperature`.
    pub fn softmax(&self, temperature: f64) -> PoseProbs {
        let mut x = self.x.clone();
        let mut y = self.y.clone();
        for row in x.chunks_mut(self.bins_x).chain(y.chunks_mut(self.bins_y)) {
            softmax_in_place(row, temperature);
        }
        PoseProbs(PoseLogits { x, y, ..*self })
    }
}

/// Row-normalized probabilities with the same layout as [`PoseLogits`].
#[derive(Clone, Debug, PartialEq)]
pub struct PoseProbs(pub PoseLogits);

impl PoseProbs {
    /// Wraps rows that are already probability vectors. Rows are checked to
    /// be nonnegative and to sum to 1 within `1e-6`.
    pub fn from_rows(num_keypoints: usize, bins_x: usize, bins_y: usize, x: Vec<f64>, y: Vec<f64>) -> Result<Self> {
        let inner = PoseLogits::new(num_keypoints, bins_x, bins_y, x, y)?;
        for row in inner.x.chunks(bins_x).chain(inner.y.chunks(bins_y)) {
            let sum: f64 = row.iter().sum();
            ensure!(
                row.iter().all(|p| *p >= 0.0) && (sum - 1.0).abs() <= 1e-6,
                "probability row must be nonnegative and sum to 1 (sum = {sum})"
            );
        }
        Ok(PoseProbs(inner))
    }

    pub fn inner(&self) -> &PoseLogits {
        &self.0
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64], temperature: f64) {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(*v / temperature));
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v / temperature - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// `log softmax(row / temperature)`.
pub(crate) fn log_softmax(row: &[f64], temperature: f64, out: &mut [f64]) {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(*v / temperature));
    let lse = row.iter().map(|v| (*v / temperature - max).exp()).sum::<f64>().ln() + max;
    for (o, v) in out.iter_mut().zip(row) {
        *o = *v / temperature - lse;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_rows_sum_to_one() {
        let logits = PoseLogits::new(2, 3, 2, vec![1.0, 2.0, 3.0, -1.0, 0.0, 1.0], vec![0.5, 0.5, 4.0, -4.0]).unwrap();
        let p = logits.softmax(1.0);
        for row in p.0.x.chunks(3).chain(p.0.y.chunks(2)) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert_eq!(p.0.y[0], 0.5);
    }

    #[test]
    fn feature_map_rejects_bad_shapes() {
        assert!(FeatureMap::new(1, 2, 2, vec![0.0; 3]).is_err());
        assert!(FeatureMap::new(0, 2, 2, vec![]).is_err());
        assert!(FeatureMap::new(1, 1, 1, vec![f64::NAN]).is_err());
    }

    #[test]
    fn probs_reject_unnormalized_rows() {
        assert!(PoseProbs::from_rows(1, 2, 2, vec![0.5, 0.6], vec![0.5, 0.5]).is_err());
        assert!(PoseProbs::from_rows(1, 2, 2, vec![0.5, 0.5], vec![1.0, 0.0]).is_ok());
    }
}
