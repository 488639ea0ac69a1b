//! AP/mAP over 3D boxes and their range-azimuth and range-Doppler projections.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::boxes::{iou_2d, iou_3d, Box3D};
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::postprocess::{detection_order, Detection};
use crate::raddata::Annotation3D;
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub iou_thresholds_3d: Vec<f64>,
    pub iou_thresholds_2d: Vec<f64>,
    #[serde(default)]
    pub class_names: Vec<String>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            iou_thresholds_3d: vec![0.3, 0.4, 0.5, 0.6, 0.7],
            iou_thresholds_2d: vec![0.5, 0.6, 0.7, 0.8, 0.9],
            class_names: Vec::new(),
        }
    }
}

impl EvalConfig {
    pub fn with_class_names(names: Vec<String>) -> Self {
        Self { class_names: names, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, t) in [("iou_thresholds_3d", &self.iou_thresholds_3d), ("iou_thresholds_2d", &self.iou_thresholds_2d)] {
            if t.is_empty() {
                return Err(Error::Config(format!("{name} is empty")));
            }
            if t.iter().any(|&v| !(v > 0.0 && v < 1.0)) || t.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::Config(format!("{name} must be strictly increasing in (0, 1): {t:?}")));
            }
        }
        Ok(())
    }

    fn class_name(&self, c: usize) -> String {
        self.class_names.get(c).cloned().unwrap_or_else(|| format!("class{c}"))
    }
}

/// Where boxes are compared.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalPlane {
    Rad,
    Ra,
    Rd,
}

impl EvalPlane {
    pub const ALL: [EvalPlane; 3] = [EvalPlane::Rad, EvalPlane::Ra, EvalPlane::Rd];

    pub fn iou(self, a: &Box3D<f64>, b: &Box3D<f64>) -> f64 {
        match self {
            EvalPlane::Rad => iou_3d(a, b),
            EvalPlane::Ra => iou_2d(&a.ra(), &b.ra()),
            EvalPlane::Rd => iou_2d(&a.rd(), &b.rd()),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            EvalPlane::Rad => "rad",
            EvalPlane::Ra => "ra",
            EvalPlane::Rd => "rd",
        }
    }
}

/// TP/FP flags of one class's detections in global score order.
#[derive(Clone, Debug, PartialEq)]
pub struct MatchResult {
    pub flags: Vec<bool>,
    pub scores: Vec<f64>,
    pub num_gt: usize,
}

/// Greedy matching by descending score; each detection takes the
/// highest-IoU unmatched GT of its class in its frame when IoU >= `iou_thr`.
pub fn match_detections(
    dets: &[Vec<Detection>],
    gts: &[Vec<Annotation3D>],
    iou_thr: f64,
    class_id: usize,
    plane: EvalPlane,
) -> Result<MatchResult> {
    if dets.len() != gts.len() {
        return Err(Error::InvalidArgument(format!("{} detection frames vs {} annotation frames", dets.len(), gts.len())));
    }
    let gt_boxes: Vec<Vec<Box3D<f64>>> =
        gts.iter().map(|g| g.iter().filter(|a| a.class_id == class_id).map(|a| a.to_box()).collect()).collect();
    let mut order: Vec<(usize, &Detection)> =
        dets.iter().enumerate().flat_map(|(f, d)| d.iter().filter(|d| d.class_id == class_id).map(move |d| (f, d))).collect();
    order.sort_by(|a, b| {
        b.1.class_score.total_cmp(&a.1.class_score).then(a.0.cmp(&b.0)).then_with(|| detection_order(a.1, b.1))
    });

    let mut used: Vec<Vec<bool>> = gt_boxes.iter().map(|g| vec![false; g.len()]).collect();
    let mut flags = Vec::with_capacity(order.len());
    let mut scores = Vec::with_capacity(order.len());
    for (f, d) in order {
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in gt_boxes[f].iter().enumerate() {
            if used[f][j] {
                continue;
            }
            let iou = plane.iou(&d.box3d, g);
            if iou >= iou_thr && best.map_or(true, |(_, b)| iou > b) {
                best = Some((j, iou));
            }
        }
        if let Some((j, _)) = best {
            used[f][j] = true;
        }
        flags.push(best.is_some());
        scores.push(d.class_score);
    }
    Ok(MatchResult { flags, scores, num_gt: gt_boxes.iter().map(Vec::len).sum() })
}

/// All-point AP with the precision envelope made non-increasing from the right.
pub fn average_precision(flags: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 || flags.is_empty() {
        return 0.0;
    }
    let mut tp = 0usize;
    let mut recall = Vec::with_capacity(flags.len());
    let mut precision = Vec::with_capacity(flags.len());
    for (i, &f) in flags.iter().enumerate() {
        tp += usize::from(f);
        recall.push(tp as f64 / num_gt as f64);
        precision.push(tp as f64 / (i + 1) as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_r = 0.0;
    for (r, p) in recall.iter().zip(&precision) {
        ap += (r - prev_r) * p;
        prev_r = *r;
    }
    ap
}

/// AP per class and threshold on one plane.
#[derive(Clone, Debug, PartialEq)]
pub struct ApTable {
    pub plane: EvalPlane,
    pub thresholds: Vec<f64>,
    /// Classes that enter the mean: present in GT or predicted.
    pub class_ids: Vec<usize>,
    /// `ap[k][t]` for `class_ids[k]` at `thresholds[t]`.
    pub ap: Vec<Vec<f64>>,
    pub map_per_threshold: Vec<f64>,
    pub map: f64,
}

impl ApTable {
    pub fn map_at(&self, thr: f64) -> Option<f64> {
        self.thresholds.iter().position(|&t| (t - thr).abs() < 1e-12).map(|i| self.map_per_threshold[i])
    }
}

/// Mean over classes, then over thresholds. Classes absent from both GT and
/// predictions are left out; classes only predicted score 0.
pub fn mean_ap(ap: &[Vec<f64>], num_thresholds: usize) -> (Vec<f64>, f64) {
    let per_thr: Vec<f64> = (0..num_thresholds)
        .map(|t| if ap.is_empty() { 0.0 } else { ap.iter().map(|row| row[t]).sum::<f64>() / ap.len() as f64 })
        .collect();
    let map = if per_thr.is_empty() { 0.0 } else { per_thr.iter().sum::<f64>() / per_thr.len() as f64 };
    (per_thr, map)
}

pub fn evaluate(dets: &[Vec<Detection>], gts: &[Vec<Annotation3D>], thresholds: &[f64], plane: EvalPlane) -> Result<ApTable> {
    let mut classes: Vec<usize> =
        gts.iter().flatten().map(|a| a.class_id).chain(dets.iter().flatten().map(|d| d.class_id)).collect();
    classes.sort_unstable();
    classes.dedup();
    let mut ap = Vec::with_capacity(classes.len());
    for &c in &classes {
        let row = thresholds
            .iter()
            .map(|&thr| match_detections(dets, gts, thr, c, plane).map(|m| average_precision(&m.flags, m.num_gt)))
            .collect::<Result<Vec<_>>>()?;
        ap.push(row);
    }
    let (map_per_threshold, map) = mean_ap(&ap, thresholds.len());
    Ok(ApTable { plane, thresholds: thresholds.to_vec(), class_ids: classes, ap, map_per_threshold, map })
}

/// Tables for the 3D cube and both 2D projections.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub rad: ApTable,
    pub ra: ApTable,
    pub rd: ApTable,
}

impl EvalReport {
    pub fn tables(&self) -> [&ApTable; 3] {
        [&self.rad, &self.ra, &self.rd]
    }

    pub fn to_text(&self, cfg: &EvalConfig) -> String {
        let mut out = String::new();
        for t in self.tables() {
            let _ = write!(out, "{:<12}", t.plane.name().to_uppercase());
            for thr in &t.thresholds {
                let _ = write!(out, " AP@{thr:.1}  ");
            }
            let _ = writeln!(out, " mAP");
            for (k, &c) in t.class_ids.iter().enumerate() {
                let _ = write!(out, "{:<12}", cfg.class_name(c));
                for v in &t.ap[k] {
                    let _ = write!(out, " {:.4}  ", v);
                }
                let mean = t.ap[k].iter().sum::<f64>() / t.ap[k].len().max(1) as f64;
                let _ = writeln!(out, " {mean:.4}");
            }
            let _ = write!(out, "{:<12}", "mean");
            for v in &t.map_per_threshold {
                let _ = write!(out, " {:.4}  ", v);
            }
            let _ = writeln!(out, " {:.4}\n", t.map);
        }
        out
    }

    pub fn to_key_values(&self, cfg: &EvalConfig) -> String {
        let mut out = String::new();
        for t in self.tables() {
            let p = t.plane.name();
            let _ = writeln!(out, "{p}.map={}", t.map);
            for (thr, v) in t.thresholds.iter().zip(&t.map_per_threshold) {
                let _ = writeln!(out, "{p}.map@{thr:.1}={v}");
            }
            for (k, &c) in t.class_ids.iter().enumerate() {
                for (thr, v) in t.thresholds.iter().zip(&t.ap[k]) {
                    let _ = writeln!(out, "{p}.ap.{}@{thr:.1}={v}", cfg.class_name(c));
                }
            }
        }
        out
    }
}

pub fn evaluate_all(dets: &[Vec<Detection>], gts: &[Vec<Annotation3D>], cfg: &EvalConfig) -> Result<EvalReport> {
    cfg.validate()?;
    Ok(EvalReport {
        rad: evaluate(dets, gts, &cfg.iou_thresholds_3d, EvalPlane::Rad)?,
        ra: evaluate(dets, gts, &cfg.iou_thresholds_2d, EvalPlane::Ra)?,
        rd: evaluate(dets, gts, &cfg.iou_thresholds_2d, EvalPlane::Rd)?,
    })
}

pub fn count_params<T: Scalar>(params: &ParamStore<T>) -> usize {
    params.num_scalars()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Conv2d, ParamBuilder};
    use proptest::prelude::*;

    fn ann(class_id: usize, c: [f64; 3], s: [f64; 3]) -> Annotation3D {
        Annotation3D { class_id, center: c, size: s }
    }

    fn det_on(a: &Annotation3D, score: f64) -> Detection {
        Detection { box3d: a.to_box(), class_id: a.class_id, class_score: score, objectness: 1.0, level: None }
    }

    #[test]
    fn ap_examples() {
        assert_eq!(average_precision(&[true], 1), 1.0);
        assert_eq!(average_precision(&[], 3), 0.0);
        assert!((average_precision(&[true, false, true], 2) - 5.0 / 6.0).abs() < 1e-12);
        assert_eq!(average_precision(&[false, false], 0), 0.0);
    }

    #[test]
    fn matching_examples() {
        let g = ann(0, [10.0, 10.0, 10.0], [4.0, 4.0, 4.0]);
        let m = match_detections(&[vec![det_on(&g, 0.9)]], &[vec![g]], 0.5, 0, EvalPlane::Rad).unwrap();
        assert_eq!((m.flags, m.num_gt), (vec![true], 1));
        let m = match_detections(&[vec![det_on(&g, 0.5), det_on(&g, 0.9)]], &[vec![g]], 0.5, 0, EvalPlane::Rad).unwrap();
        assert_eq!(m.flags, vec![true, false]);
        assert_eq!(m.scores, vec![0.9, 0.5]);
        let mut wrong = det_on(&g, 0.9);
        wrong.class_id = 1;
        let m = match_detections(&[vec![wrong]], &[vec![g]], 0.5, 1, EvalPlane::Rad).unwrap();
        assert_eq!((m.flags, m.num_gt), (vec![false], 0));
        assert!(match_detections(&[vec![]], &[], 0.5, 0, EvalPlane::Rad).is_err());
    }

    #[test]
    fn class_inclusion() {
        let g = ann(0, [10.0, 10.0, 10.0], [4.0, 4.0, 4.0]);
        let t = evaluate(&[vec![det_on(&g, 0.9)]], &[vec![g]], &[0.5], EvalPlane::Rad).unwrap();
        assert_eq!(t.class_ids, vec![0]);
        assert_eq!(t.map, 1.0);
        // a hallucinated class drags the mean down
        let h = det_on(&ann(3, [30.0, 30.0, 30.0], [2.0, 2.0, 2.0]), 0.8);
        let t = evaluate(&[vec![det_on(&g, 0.9), h]], &[vec![g]], &[0.5], EvalPlane::Rad).unwrap();
        assert_eq!(t.class_ids, vec![0, 3]);
        assert!((t.map - 0.5).abs() < 1e-12);
        let (per, m) = mean_ap(&[vec![0.8], vec![0.4]], 1);
        assert!((per[0] - 0.6).abs() < 1e-12 && (m - 0.6).abs() < 1e-12);
    }

    #[test]
    fn projections_differ() {
        let g = ann(0, [10.0, 10.0, 10.0], [4.0, 4.0, 4.0]);
        let mut d = det_on(&g, 0.9);
        d.box3d.z1 += 3.0;
        d.box3d.z2 += 3.0;
        let ra = evaluate(&[vec![d.clone()]], &[vec![g]], &[0.9], EvalPlane::Ra).unwrap();
        let rd = evaluate(&[vec![d]], &[vec![g]], &[0.9], EvalPlane::Rd).unwrap();
        assert_eq!((ra.map, rd.map), (1.0, 0.0));
    }

    #[test]
    fn report_formats() {
        let g = ann(0, [10.0, 10.0, 10.0], [4.0, 4.0, 4.0]);
        let cfg = EvalConfig::with_class_names(vec!["person".into()]);
        let r = evaluate_all(&[vec![det_on(&g, 0.9)]], &[vec![g]], &cfg).unwrap();
        let kv = r.to_key_values(&cfg);
        assert!(kv.contains("rad.map=1\n") && kv.contains("ra.ap.person@0.9=1\n"), "{kv}");
        assert!(r.to_text(&cfg).contains("person"));
        assert_eq!(r.rad.map_at(0.3), Some(1.0));
    }

    #[test]
    fn param_counting() {
        let mut pb = ParamBuilder::<f64>::new(0);
        Conv2d::new(&mut pb, "c", 4, 8, 3, 1, 1, true);
        assert_eq!(count_params(&pb.finish()), 296);
    }

    fn scenario() -> impl Strategy<Value = (Vec<Vec<Detection>>, Vec<Vec<Annotation3D>>)> {
        let b = (0usize..2, 0.0..20.0f64, 0.0..20.0f64, 0.0..20.0f64, 1.0..6.0f64, 1.0..6.0f64, 1.0..6.0f64);
        let frame = (proptest::collection::vec(b.clone(), 0..5), proptest::collection::vec((b, 0.0..1.0f64), 0..6));
        proptest::collection::vec(frame, 1..4).prop_map(|frames| {
            let mut d = Vec::new();
            let mut g = Vec::new();
            for (gs, ds) in frames {
                g.push(gs.into_iter().map(|(c, x, y, z, w, h, l)| ann(c, [x, y, z], [w, h, l])).collect());
                d.push(ds.into_iter().map(|((c, x, y, z, w, h, l), s)| det_on(&ann(c, [x, y, z], [w, h, l]), s)).collect());
            }
            (d, g)
        })
    }

    proptest! {
        #[test]
        fn ap_bounds_and_threshold_monotone((d, g) in scenario()) {
            let t = evaluate(&d, &g, &[0.1, 0.3, 0.5, 0.7], EvalPlane::Rad).unwrap();
            for row in &t.ap {
                prop_assert!(row.iter().all(|v| (0.0..=1.0 + 1e-12).contains(v)));
                prop_assert!(row.windows(2).all(|w| w[1] <= w[0] + 1e-12), "{row:?}");
            }
        }

        #[test]
        fn frame_permutation_invariant((d, g) in scenario()) {
            let a = evaluate(&d, &g, &[0.3, 0.5], EvalPlane::Ra).unwrap();
            let mut d2 = d.clone();
            let mut g2 = g.clone();
            d2.reverse();
            g2.reverse();
            let b = evaluate(&d2, &g2, &[0.3, 0.5], EvalPlane::Ra).unwrap();
            prop_assert!((a.map - b.map).abs() < 1e-12);
        }

        #[test]
        fn flipping_fp_to_tp_helps(flags in proptest::collection::vec(any::<bool>(), 1..12), idx in 0usize..12) {
            let n = flags.iter().filter(|&&f| f).count() + 1;
            let i = idx % flags.len();
            let mut better = flags.clone();
            better[i] = true;
            prop_assert!(average_precision(&better, n) + 1e-12 >= average_precision(&flags, n));
        }
    }
}
