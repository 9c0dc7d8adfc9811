//! PCK and a simplified OKS-based AP, broken down by part group.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::simcc::{KeypointSet, PartGroup};

pub const PCK_THRESHOLDS: [f64; 3] = [0.05, 0.1, 0.2];

/// One score per part group plus the all-keypoint score.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GroupScores {
    pub whole: f64,
    pub body: f64,
    pub foot: f64,
    pub face: f64,
    pub hand: f64,
}

impl GroupScores {
    pub fn get(&self, group: Option<PartGroup>) -> f64 {
        match group {
            None => self.whole,
            Some(PartGroup::Body) => self.body,
            Some(PartGroup::Foot) => self.foot,
            Some(PartGroup::Face) => self.face,
            Some(PartGroup::Hand) => self.hand,
        }
    }

    fn set(&mut self, group: Option<PartGroup>, v: f64) {
        match group {
            None => self.whole = v,
            Some(PartGroup::Body) => self.body = v,
            Some(PartGroup::Foot) => self.foot = v,
            Some(PartGroup::Face) => self.face = v,
            Some(PartGroup::Hand) => self.hand = v,
        }
    }
}

/// `None` stands for the whole-body group.
pub const GROUPS: [Option<PartGroup>; 5] = [
    None,
    Some(PartGroup::Body),
    Some(PartGroup::Foot),
    Some(PartGroup::Face),
    Some(PartGroup::Hand),
];

pub fn group_name(group: Option<PartGroup>) -> &'static str {
    group.map_or("whole", PartGroup::as_str)
}

fn check_aligned(preds: &[KeypointSet], gts: &[KeypointSet]) -> Result<()> {
    ensure!(
        preds.len() == gts.len(),
        "{} predictions for {} ground-truth instances",
        preds.len(),
        gts.len()
    );
    for (i, (p, g)) in preds.iter().zip(gts).enumerate() {
        ensure!(
            p.len() == g.len(),
            "sample {i}: {} predicted keypoints, {} annotated",
            p.len(),
            g.len()
        );
    }
    Ok(())
}

/// Diagonal of the bounding box of the labeled ground-truth keypoints.
pub fn bbox_diagonal(gt: &KeypointSet) -> f64 {
    let mut lo = [f64::INFINITY; 2];
    let mut hi = [f64::NEG_INFINITY; 2];
    for (k, c) in gt.coords.iter().enumerate() {
        if gt.is_labeled(k) {
            for a in 0..2 {
                lo[a] = lo[a].min(c[a]);
                hi[a] = hi[a].max(c[a]);
            }
        }
    }
    if lo[0] > hi[0] {
        return 0.0;
    }
    (hi[0] - lo[0]).hypot(hi[1] - lo[1])
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

fn in_group(gt: &KeypointSet, k: usize, group: Option<PartGroup>) -> bool {
    group.is_none_or(|g| gt.part_group[k] == g)
}

/// Fraction of labeled keypoints within `tau * diagonal` of the ground truth.
/// Groups with no labeled keypoints score 0.
pub fn pck(preds: &[KeypointSet], gts: &[KeypointSet], tau: f64) -> Result<GroupScores> {
    check_aligned(preds, gts)?;
    let mut hits = [0usize; 5];
    let mut counts = [0usize; 5];
    for (p, g) in preds.iter().zip(gts) {
        let thr = tau * bbox_diagonal(g);
        for k in 0..g.len() {
            if !g.is_labeled(k) {
                continue;
            }
            let hit = dist(p.coords[k], g.coords[k]) <= thr;
            for (gi, group) in GROUPS.iter().enumerate() {
                if in_group(g, k, *group) {
                    counts[gi] += 1;
                    hits[gi] += usize::from(hit);
                }
            }
        }
    }
    let mut out = GroupScores::default();
    for (gi, group) in GROUPS.iter().enumerate() {
        let v = if counts[gi] == 0 {
            0.0
        } else {
            hits[gi] as f64 / counts[gi] as f64
        };
        out.set(*group, v);
    }
    Ok(out)
}

/// Per-group OKS falloff, as a fraction of the box diagonal.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupSigmas {
    pub body: f64,
    pub foot: f64,
    pub face: f64,
    pub hand: f64,
}

impl Default for GroupSigmas {
    fn default() -> Self {
        Self {
            body: 0.10,
            foot: 0.07,
            face: 0.03,
            hand: 0.03,
        }
    }
}

impl GroupSigmas {
    pub fn of(&self, g: PartGroup) -> f64 {
        match g {
            PartGroup::Body => self.body,
            PartGroup::Foot => self.foot,
            PartGroup::Face => self.face,
            PartGroup::Hand => self.hand,
        }
    }
}

/// OKS thresholds 0.50, 0.55, ..., 0.95.
pub fn oks_thresholds() -> impl Iterator<Item = f64> {
    (0..10).map(|i| (50 + 5 * i) as f64 / 100.0)
}

/// Object keypoint similarity of one instance over one group; `None` when
/// the group has no labeled keypoints.
pub fn oks(pred: &KeypointSet, gt: &KeypointSet, group: Option<PartGroup>, sigmas: &GroupSigmas) -> Option<f64> {
    let diag = bbox_diagonal(gt);
    let mut sum = 0.0;
    let mut n = 0usize;
    for k in 0..gt.len() {
        if !gt.is_labeled(k) || !in_group(gt, k, group) {
            continue;
        }
        let s = sigmas.of(gt.part_group[k]) * diag;
        let d = dist(pred.coords[k], gt.coords[k]);
        let sim = if s > 0.0 {
            (-(d * d) / (2.0 * s * s)).exp()
        } else {
            f64::from(u8::from(d == 0.0))
        };
        sum += if sim.is_nan() { 0.0 } else { sim };
        n += 1;
    }
    (n > 0).then(|| sum / n as f64)
}

/// Mean over OKS thresholds of the fraction of instances at or above each.
pub fn oks_ap(preds: &[KeypointSet], gts: &[KeypointSet], sigmas: &GroupSigmas) -> Result<GroupScores> {
    check_aligned(preds, gts)?;
    let mut out = GroupScores::default();
    for group in GROUPS {
        let scores: Vec<f64> = preds
            .iter()
            .zip(gts)
            .filter_map(|(p, g)| oks(p, g, group, sigmas))
            .collect();
        if scores.is_empty() {
            continue;
        }
        let ap = oks_thresholds()
            .map(|t| scores.iter().filter(|s| **s >= t).count() as f64 / scores.len() as f64)
            .sum::<f64>()
            / 10.0;
        out.set(group, ap);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub split: String,
    pub sigmas: GroupSigmas,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Keyed by threshold, formatted like `"0.1"`.
    pub pck: BTreeMap<String, GroupScores>,
    pub ap: GroupScores,
    pub samples: usize,
    pub config: EvalConfig,
}

impl EvalReport {
    pub fn pck_at(&self, tau: f64) -> Option<&GroupScores> {
        self.pck.get(&tau.to_string())
    }

    /// Headline metric: whole-group PCK@0.1.
    pub fn headline(&self) -> f64 {
        self.pck_at(0.1).map_or(0.0, |g| g.whole)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

pub fn evaluate(preds: &[KeypointSet], gts: &[KeypointSet], split: &str, sigmas: &GroupSigmas) -> Result<EvalReport> {
    let mut table = BTreeMap::new();
    for tau in PCK_THRESHOLDS {
        table.insert(tau.to_string(), pck(preds, gts, tau)?);
    }
    Ok(EvalReport {
        pck: table,
        ap: oks_ap(preds, gts, sigmas)?,
        samples: gts.len(),
        config: EvalConfig {
            split: split.to_string(),
            sigmas: *sigmas,
        },
    })
}

/// What [`compare_runs`] needs from a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub name: String,
    /// Identifies the evaluated split; rows must agree to be comparable.
    pub eval_split: String,
    pub pck: GroupScores,
    pub ap: GroupScores,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankingRow {
    pub name: String,
    pub pck: GroupScores,
    pub ap: GroupScores,
    /// Whole PCK@0.1 minus the first input record's.
    pub delta: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankingTable {
    pub baseline: String,
    pub rows: Vec<RankingRow>,
}

/// Sorts runs by whole PCK@0.1 (descending, ties by name) with deltas
/// against the first record.
pub fn compare_runs(records: &[RunSummary]) -> Result<RankingTable> {
    let Some(first) = records.first() else {
        return Err(Error::Contract("compare_runs needs at least one record".into()));
    };
    if let Some(bad) = records.iter().find(|r| r.eval_split != first.eval_split) {
        return Err(Error::Contract(format!(
            "run {} was evaluated on {}, baseline {} on {}",
            bad.name, bad.eval_split, first.name, first.eval_split
        )));
    }
    let mut rows: Vec<RankingRow> = records
        .iter()
        .map(|r| RankingRow {
            name: r.name.clone(),
            pck: r.pck,
            ap: r.ap,
            delta: r.pck.whole - first.pck.whole,
        })
        .collect();
    rows.sort_by(|a, b| b.pck.whole.total_cmp(&a.pck.whole).then_with(|| a.name.cmp(&b.name)));
    Ok(RankingTable {
        baseline: first.name.clone(),
        rows,
    })
}

impl RankingTable {
    pub fn names(&self) -> Vec<&str> {
        self.rows.iter().map(|r| r.name.as_str()).collect()
    }

    pub fn to_text(&self) -> String {
        let width = self.rows.iter().map(|r| r.name.len()).max().unwrap_or(4).max(4);
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<width$}  {:>8} {:>8} {:>8} {:>8} {:>8} {:>8}  {:>8}",
            "run", "whole", "body", "foot", "face", "hand", "delta", "AP"
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<width$}  {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>+8.4}  {:>8.4}",
                r.name, r.pck.whole, r.pck.body, r.pck.foot, r.pck.face, r.pck.hand, r.delta, r.ap.whole
            );
        }
        let _ = writeln!(s, "(PCK@0.1 per group; delta vs {})", self.baseline);
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "run,pck_whole,pck_body,pck_foot,pck_face,pck_hand,delta,ap_whole,ap_body,ap_foot,ap_face,ap_hand\n",
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{},{},{}",
                r.name,
                r.pck.whole,
                r.pck.body,
                r.pck.foot,
                r.pck.face,
                r.pck.hand,
                r.delta,
                r.ap.whole,
                r.ap.body,
                r.ap.foot,
                r.ap.face,
                r.ap.hand
            );
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn instance(rng: &mut ChaCha8Rng) -> KeypointSet {
        let groups = [
            PartGroup::Body,
            PartGroup::Body,
            PartGroup::Body,
            PartGroup::Foot,
            PartGroup::Face,
            PartGroup::Face,
            PartGroup::Hand,
            PartGroup::Hand,
        ];
        KeypointSet {
            coords: groups
                .iter()
                .map(|_| [rng.gen_range(0.0..64.0), rng.gen_range(0.0..64.0)])
                .collect(),
            visibility: groups.iter().map(|_| rng.gen_range(0..3u8)).collect(),
            part_group: groups.to_vec(),
        }
    }

    fn jitter(gt: &KeypointSet, rng: &mut ChaCha8Rng, scale: f64) -> KeypointSet {
        let mut p = gt.clone();
        for c in &mut p.coords {
            c[0] += rng.gen_range(-scale..scale);
            c[1] += rng.gen_range(-scale..scale);
        }
        p
    }

    #[test]
    fn perfect_predictions_score_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let gts: Vec<_> = (0..10)
            .map(|_| {
                let mut g = instance(&mut rng);
                g.visibility.fill(2);
                g
            })
            .collect();
        let p = pck(&gts, &gts, 0.1).unwrap();
        let ap = oks_ap(&gts, &gts, &GroupSigmas::default()).unwrap();
        for g in GROUPS {
            assert_eq!(p.get(g), 1.0);
            assert_eq!(ap.get(g), 1.0);
        }
    }

    #[test]
    fn displacement_just_past_threshold_scores_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let tau = 0.1;
        let gts: Vec<_> = (0..5)
            .map(|_| {
                let mut g = instance(&mut rng);
                g.visibility.fill(2);
                g
            })
            .collect();
        let preds: Vec<_> = gts
            .iter()
            .map(|g| {
                let shift = tau * bbox_diagonal(g) * (1.0 + 1e-9);
                let mut p = g.clone();
                p.coords.iter_mut().for_each(|c| c[0] += shift);
                p
            })
            .collect();
        let p = pck(&preds, &gts, tau).unwrap();
        for g in GROUPS {
            assert_eq!(p.get(g), 0.0);
        }
    }

    #[test]
    fn infinite_predictions_give_zero_ap() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let gts: Vec<_> = (0..5).map(|_| instance(&mut rng)).collect();
        let preds: Vec<_> = gts
            .iter()
            .map(|g| {
                let mut p = g.clone();
                p.coords.fill([f64::INFINITY, f64::INFINITY]);
                p
            })
            .collect();
        let ap = oks_ap(&preds, &gts, &GroupSigmas::default()).unwrap();
        for g in GROUPS {
            assert_eq!(ap.get(g), 0.0);
        }
    }

    #[test]
    fn misaligned_inputs_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let gts: Vec<_> = (0..3).map(|_| instance(&mut rng)).collect();
        assert!(matches!(pck(&gts[..2], &gts, 0.1), Err(Error::Contract(_))));
        assert!(oks_ap(&gts[..1], &gts, &GroupSigmas::default()).is_err());
    }

    #[test]
    fn unlabeled_keypoints_never_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let gts: Vec<_> = (0..10).map(|_| instance(&mut rng)).collect();
        let preds: Vec<_> = gts.iter().map(|g| jitter(g, &mut rng, 3.0)).collect();
        let mut wild = preds.clone();
        for (p, g) in wild.iter_mut().zip(&gts) {
            for k in 0..g.len() {
                if !g.is_labeled(k) {
                    p.coords[k] = [1e6, -1e6];
                }
            }
        }
        assert_eq!(pck(&preds, &gts, 0.1).unwrap(), pck(&wild, &gts, 0.1).unwrap());
        let s = GroupSigmas::default();
        assert_eq!(oks_ap(&preds, &gts, &s).unwrap(), oks_ap(&wild, &gts, &s).unwrap());
    }

    #[test]
    fn joint_translation_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let gts: Vec<_> = (0..10).map(|_| instance(&mut rng)).collect();
        let preds: Vec<_> = gts.iter().map(|g| jitter(g, &mut rng, 4.0)).collect();
        let shift = |v: &[KeypointSet]| -> Vec<KeypointSet> {
            v.iter()
                .map(|k| {
                    let mut k = k.clone();
                    k.coords.iter_mut().for_each(|c| {
                        c[0] += 16.0;
                        c[1] -= 8.0;
                    });
                    k
                })
                .collect()
        };
        assert_eq!(
            pck(&preds, &gts, 0.1).unwrap(),
            pck(&shift(&preds), &shift(&gts), 0.1).unwrap()
        );
    }

    #[test]
    fn pck_does_not_rise_with_more_noise() {
        let mut worse = 0;
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let gts: Vec<_> = (0..20).map(|_| instance(&mut rng)).collect();
            let dirs: Vec<Vec<[f64; 2]>> = gts
                .iter()
                .map(|g| {
                    g.coords
                        .iter()
                        .map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)])
                        .collect()
                })
                .collect();
            let noisy = |scale: f64| -> Vec<KeypointSet> {
                gts.iter()
                    .zip(&dirs)
                    .map(|(g, d)| {
                        let mut p = g.clone();
                        for (c, dd) in p.coords.iter_mut().zip(d) {
                            c[0] += scale * dd[0];
                            c[1] += scale * dd[1];
                        }
                        p
                    })
                    .collect()
            };
            let a = pck(&noisy(2.0), &gts, 0.1).unwrap().whole;
            let b = pck(&noisy(6.0), &gts, 0.1).unwrap().whole;
            if b > a {
                worse += 1;
            }
        }
        assert_eq!(worse, 0);
    }

    fn summary(name: &str, whole: f64) -> RunSummary {
        RunSummary {
            name: name.into(),
            eval_split: "val".into(),
            pck: GroupScores {
                whole,
                ..Default::default()
            },
            ap: GroupScores::default(),
        }
    }

    #[test]
    fn ranking_of_first_stage_components() {
        let records = [
            summary("GT", 60.4),
            summary("GT+Fea", 61.8),
            summary("GT+Fea+Logit", 62.0),
            summary("GT+Fea+Logit+Decay", 62.3),
        ];
        let table = compare_runs(&records).unwrap();
        assert_eq!(table.names(), ["GT+Fea+Logit+Decay", "GT+Fea+Logit", "GT+Fea", "GT"]);
        assert!((table.rows[0].delta - 1.9).abs() < 1e-9);
    }

    #[test]
    fn ranking_identical_records_and_split_mismatch() {
        let table = compare_runs(&[summary("a", 0.5), summary("b", 0.5)]).unwrap();
        assert_eq!(table.names(), ["a", "b"]);
        assert!(table.rows.iter().all(|r| r.delta == 0.0));
        let mut other = summary("c", 0.7);
        other.eval_split = "test".into();
        assert!(matches!(
            compare_runs(&[summary("a", 0.5), other]),
            Err(Error::Contract(_))
        ));
        assert!(table.to_csv().lines().count() == 3);
    }
}
