//! Turning head outputs into scored 3D detections and suppressing duplicates.
//!
//! Suppression runs in two stages: greedy NMS inside each class, then a
//! location-aware pass that removes lower-scored boxes of *other* classes
//! overlapping a kept box.

use std::cmp::Ordering;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::assignment::decode_predictions;
use crate::boxes::{iou_2d, iou_3d, Box3D};
use crate::detmodel::RawPredictions;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct Detection {
    pub box3d: Box3D<f64>,
    pub class_id: usize,
    /// Objectness times class probability.
    pub class_score: f64,
    pub objectness: f64,
    /// Source pyramid level; unknown for detections read back from a dump.
    pub level: Option<usize>,
}

/// Overlap measure used by both suppression stages.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OverlapMode {
    #[default]
    Iou3d,
    /// IoU of the range-azimuth projections.
    Ra2d,
}

impl OverlapMode {
    pub fn iou(self, a: &Box3D<f64>, b: &Box3D<f64>) -> f64 {
        match self {
            OverlapMode::Iou3d => iou_3d(a, b),
            OverlapMode::Ra2d => iou_2d(&a.ra(), &b.ra()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PostprocessConfig {
    pub score_thr: f64,
    pub class_nms_thr: f64,
    pub la_thr: f64,
    #[serde(default)]
    pub overlap: OverlapMode,
}

impl Default for PostprocessConfig {
    fn default() -> Self {
        Self { score_thr: 0.3, class_nms_thr: 0.3, la_thr: 0.1, overlap: OverlapMode::Iou3d }
    }
}

impl PostprocessConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("score_thr", self.score_thr), ("class_nms_thr", self.class_nms_thr), ("la_thr", self.la_thr)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} = {v} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// Score descending, then class id, then box corners.
pub fn detection_order(a: &Detection, b: &Detection) -> Ordering {
    b.class_score
        .total_cmp(&a.class_score)
        .then(a.class_id.cmp(&b.class_id))
        .then_with(|| {
            a.box3d
                .as_array()
                .iter()
                .zip(b.box3d.as_array().iter())
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(Ordering::Equal)
        })
}

/// Scored, clamped detections of every anchor at or above `score_thr`.
pub fn decode<T: Scalar>(preds: &RawPredictions<'_, T>, cube_shape: [usize; 3], score_thr: f64) -> Vec<Detection> {
    let decoded = decode_predictions(preds, cube_shape[2]);
    let levels: Vec<usize> = preds.levels.iter().enumerate().flat_map(|(i, l)| std::iter::repeat(i).take(l.height * l.width)).collect();
    decoded
        .into_iter()
        .zip(levels)
        .filter_map(|(a, level)| {
            let (class_id, p) = a
                .class_probs
                .iter()
                .copied()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, p)| if p > best.1 { (i, p) } else { best });
            let score = a.objectness * p;
            (score >= score_thr).then(|| Detection {
                box3d: a.box3d().clamp_to(cube_shape),
                class_id,
                class_score: score,
                objectness: a.objectness,
                level: Some(level),
            })
        })
        .collect()
}

/// Greedy NMS inside each class.
pub fn class_nms(dets: &[Detection], iou_thr: f64, mode: OverlapMode) -> Vec<Detection> {
    let mut sorted = dets.to_vec();
    sorted.sort_by(detection_order);
    let mut keep: Vec<Detection> = Vec::new();
    for d in sorted {
        if keep.iter().all(|k| k.class_id != d.class_id || mode.iou(&k.box3d, &d.box3d) <= iou_thr) {
            keep.push(d);
        }
    }
    keep
}

/// Location-aware NMS: a kept box removes every remaining box of a different
/// class whose overlap exceeds `thr`. Output is in selection order.
pub fn la_nms(dets: &[Detection], thr: f64, mode: OverlapMode) -> Vec<Detection> {
    let mut queue = dets.to_vec();
    queue.sort_by(detection_order);
    queue.reverse();
    let mut selected = Vec::new();
    while let Some(current) = queue.pop() {
        queue.retain(|b| b.class_id == current.class_id || mode.iou(&current.box3d, &b.box3d) <= thr);
        selected.push(current);
    }
    selected
}

/// Decode, per-class NMS, then location-aware NMS.
pub fn postprocess_pipeline<T: Scalar>(preds: &RawPredictions<'_, T>, cube_shape: [usize; 3], cfg: &PostprocessConfig) -> Vec<Detection> {
    let dets = decode(preds, cube_shape, cfg.score_thr);
    let dets = class_nms(&dets, cfg.class_nms_thr, cfg.overlap);
    la_nms(&dets, cfg.la_thr, cfg.overlap)
}

/// One line per detection: `frame_id class_id class_score objectness x1 y1 z1 x2 y2 z2`.
pub fn format_detections(frame_id: &str, dets: &[Detection]) -> String {
    let mut out = String::new();
    for d in dets {
        let b = d.box3d.as_array();
        let _ = writeln!(
            out,
            "{frame_id} {} {} {} {} {} {} {} {} {}",
            d.class_id, d.class_score, d.objectness, b[0], b[1], b[2], b[3], b[4], b[5]
        );
    }
    out
}

/// Parses a detection dump into `(frame_id, detection)` pairs.
pub fn parse_detections(text: &str) -> Result<Vec<(String, Detection)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        let bad = |why: &str| Error::frame(f.first().copied().unwrap_or("?"), format!("detection line {}: {why}", n + 1));
        if f.len() != 10 {
            return Err(bad(&format!("expected 10 fields, found {}", f.len())));
        }
        let class_id = f[1].parse::<usize>().map_err(|e| bad(&e.to_string()))?;
        let nums = f[2..].iter().map(|s| s.parse::<f64>()).collect::<std::result::Result<Vec<_>, _>>().map_err(|e| bad(&e.to_string()))?;
        out.push((
            f[0].to_string(),
            Detection {
                box3d: Box3D::new(nums[2], nums[3], nums[4], nums[5], nums[6], nums[7]),
                class_id,
                class_score: nums[0],
                objectness: nums[1],
                level: None,
            },
        ));
    }
    Ok(out)
}
