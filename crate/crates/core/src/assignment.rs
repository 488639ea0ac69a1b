//! Anchor grid, head decoding, and task-aligned label assignment on the RA plane.
//!
//! Anchors are the cells of every pyramid level, flattened level by level in
//! row-major order. Anchor `(i, j)` of a level with stride `s` sits at
//! `((i + 0.5) s, (j + 0.5) s)`: `i` runs along range (box `x`), `j` along
//! azimuth (box `y`).

use serde::{Deserialize, Serialize};

use crate::boxes::{iou_2d, Box2D, Box3D};
use crate::detmodel::RawPredictions;
use crate::error::{Error, Result};
use crate::raddata::Annotation3D;
use crate::scalar::{sigmoid, Scalar};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Anchor {
    pub cx: f64,
    pub cy: f64,
    pub stride: f64,
    pub level: usize,
}

/// Anchors of levels given as `(height, width, stride)`.
pub fn make_anchors(levels: &[(usize, usize, usize)]) -> Vec<Anchor> {
    let mut out = Vec::with_capacity(levels.iter().map(|&(h, w, _)| h * w).sum());
    for (level, &(h, w, s)) in levels.iter().enumerate() {
        let s = s as f64;
        for i in 0..h {
            for j in 0..w {
                out.push(Anchor { cx: (i as f64 + 0.5) * s, cy: (j as f64 + 0.5) * s, stride: s, level });
            }
        }
    }
    out
}

pub fn anchors_for<T: Scalar>(preds: &RawPredictions<'_, T>) -> Vec<Anchor> {
    let levels: Vec<_> = preds.levels.iter().map(|l| (l.height, l.width, l.stride)).collect();
    make_anchors(&levels)
}

/// Head outputs of one anchor turned into probabilities and cube-cell boxes.
#[derive(Clone, Debug, PartialEq)]
pub struct DecodedAnchor {
    pub ra_box: Box2D<f64>,
    /// Ordered Doppler extent `(z1, z2)` in cells.
    pub doppler: (f64, f64),
    pub objectness: f64,
    pub class_probs: Vec<f64>,
}

impl DecodedAnchor {
    pub fn box3d(&self) -> Box3D<f64> {
        let b = &self.ra_box;
        Box3D::new(b.x1, b.y1, self.doppler.0, b.x2, b.y2, self.doppler.1)
    }
}

/// Expected bin index of a softmax over `logits`.
pub fn expected_bin(logits: &[f64]) -> f64 {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|&l| (l - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().enumerate().map(|(i, &p)| i as f64 * p).sum::<f64>() / z
}

/// Decodes every anchor; `doppler_bins` scales the squashed Doppler outputs.
pub fn decode_predictions<T: Scalar>(preds: &RawPredictions<'_, T>, doppler_bins: usize) -> Vec<DecodedAnchor> {
    let d = doppler_bins as f64;
    let mut out = Vec::with_capacity(preds.num_anchors());
    for l in &preds.levels {
        let (obj, cls, bx, dp) = (l.obj.value(), l.cls.value(), l.boxes.value(), l.dopl.value());
        let hw = l.height * l.width;
        let nc = cls.dim(0);
        let reg_max = bx.dim(0) / 4;
        let s = l.stride as f64;
        for p in 0..hw {
            let (i, j) = (p / l.width, p % l.width);
            let (cx, cy) = ((i as f64 + 0.5) * s, (j as f64 + 0.5) * s);
            let dist: Vec<f64> = (0..4)
                .map(|k| {
                    let logits: Vec<f64> = (0..reg_max).map(|b| bx.data()[(k * reg_max + b) * hw + p].f64()).collect();
                    expected_bin(&logits) * s
                })
                .collect();
            let z1 = sigmoid(dp.data()[p].f64()) * d;
            let z2 = sigmoid(dp.data()[hw + p].f64()) * d;
            out.push(DecodedAnchor {
                ra_box: Box2D::new(cx - dist[0], cy - dist[1], cx + dist[2], cy + dist[3]),
                doppler: (z1.min(z2), z1.max(z2)),
                objectness: sigmoid(obj.data()[p].f64()),
                class_probs: (0..nc).map(|c| sigmoid(cls.data()[c * hw + p].f64())).collect(),
            });
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AssignConfig {
    pub alpha: f64,
    pub beta: f64,
    pub top_k: usize,
    /// Rescale `t` per GT so its maximum equals the GT's best IoU.
    #[serde(default)]
    pub normalize_t: bool,
}

impl Default for AssignConfig {
    fn default() -> Self {
        Self { alpha: 1.0, beta: 6.0, top_k: 10, normalize_t: false }
    }
}

impl AssignConfig {
    pub fn validate(&self) -> Result<()> {
        if self.top_k == 0 || !(self.alpha > 0.0) || !(self.beta > 0.0) {
            return Err(Error::Config(format!("invalid assigner settings {self:?}")));
        }
        Ok(())
    }
}

/// `t = c^alpha * l^beta`.
pub fn alignment_metric(c: f64, l: f64, cfg: &AssignConfig) -> Result<f64> {
    if !(0.0..=1.0).contains(&c) || !(0.0..=1.0).contains(&l) {
        return Err(Error::InvalidArgument(format!("alignment inputs c={c}, l={l} outside [0, 1]")));
    }
    Ok(c.powf(cfg.alpha) * l.powf(cfg.beta))
}

/// Regression and classification targets of one positive anchor.
#[derive(Clone, Debug, PartialEq)]
pub struct AnchorTarget {
    pub class_id: usize,
    pub box3d: Box3D<f64>,
}

impl AnchorTarget {
    pub fn ra_box(&self) -> Box2D<f64> {
        self.box3d.ra()
    }

    pub fn rd_box(&self) -> Box2D<f64> {
        self.box3d.rd()
    }

    pub fn doppler(&self) -> (f64, f64) {
        (self.box3d.z1, self.box3d.z2)
    }

    pub fn center(&self) -> (f64, f64) {
        self.box3d.ra().center()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AssignmentResult {
    pub gt_index: Vec<Option<usize>>,
    pub t: Vec<f64>,
    pub targets: Vec<Option<AnchorTarget>>,
}

impl AssignmentResult {
    pub fn empty(num_anchors: usize) -> Self {
        Self { gt_index: vec![None; num_anchors], t: vec![0.0; num_anchors], targets: vec![None; num_anchors] }
    }

    pub fn is_positive(&self, a: usize) -> bool {
        self.gt_index[a].is_some()
    }

    pub fn positives(&self) -> Vec<usize> {
        (0..self.gt_index.len()).filter(|&a| self.is_positive(a)).collect()
    }

    pub fn num_positives(&self) -> usize {
        self.gt_index.iter().filter(|g| g.is_some()).count()
    }
}

/// Metric of one candidate anchor for one GT.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Candidate {
    pub anchor: usize,
    pub t: f64,
    pub iou: f64,
}

/// Keeps the `top_k` candidates of each GT by `t` (lower index on ties) and
/// resolves anchors claimed twice in favour of the higher IoU (lower GT index on ties).
/// Returns the owning GT of every anchor.
pub fn select_positives(candidates: &[Vec<Candidate>], num_anchors: usize, top_k: usize) -> Vec<Option<(usize, Candidate)>> {
    let mut owner: Vec<Option<(usize, Candidate)>> = vec![None; num_anchors];
    for (g, cands) in candidates.iter().enumerate() {
        let mut sorted = cands.clone();
        sorted.sort_by(|a, b| b.t.total_cmp(&a.t).then(a.anchor.cmp(&b.anchor)));
        for c in sorted.into_iter().take(top_k) {
            match owner[c.anchor] {
                Some((_, prev)) if prev.iou >= c.iou => {}
                _ => owner[c.anchor] = Some((g, c)),
            }
        }
    }
    owner
}

fn center_inside(a: &Anchor, b: &Box2D<f64>) -> bool {
    a.cx > b.x1 && a.cx < b.x2 && a.cy > b.y1 && a.cy < b.y2
}

/// Task-aligned assignment of one frame.
pub fn tal_assign(anchors: &[Anchor], preds: &[DecodedAnchor], gts: &[Annotation3D], cfg: &AssignConfig) -> Result<AssignmentResult> {
    cfg.validate()?;
    if anchors.len() != preds.len() {
        return Err(Error::InvalidArgument(format!("{} anchors but {} predictions", anchors.len(), preds.len())));
    }
    let mut res = AssignmentResult::empty(anchors.len());
    if gts.is_empty() {
        return Ok(res);
    }
    let gt_boxes: Vec<Box3D<f64>> = gts.iter().map(|g| g.to_box()).collect();
    let mut candidates = Vec::with_capacity(gts.len());
    for (g, gt) in gts.iter().enumerate() {
        let ra = gt_boxes[g].ra();
        let mut cands = Vec::new();
        for (a, anchor) in anchors.iter().enumerate() {
            if !center_inside(anchor, &ra) {
                continue;
            }
            let p = &preds[a];
            let c = p.class_probs.get(gt.class_id).copied().ok_or_else(|| {
                Error::InvalidArgument(format!("class {} outside {} predicted classes", gt.class_id, p.class_probs.len()))
            })?;
            let l = iou_2d(&p.ra_box, &ra);
            cands.push(Candidate { anchor: a, t: alignment_metric(c.clamp(0.0, 1.0), l, cfg)?, iou: l });
        }
        candidates.push(cands);
    }
    let owner = select_positives(&candidates, anchors.len(), cfg.top_k);
    for (a, o) in owner.iter().enumerate() {
        if let Some((g, c)) = o {
            res.gt_index[a] = Some(*g);
            res.t[a] = c.t;
            res.targets[a] = Some(AnchorTarget { class_id: gts[*g].class_id, box3d: gt_boxes[*g] });
        }
    }
    if cfg.normalize_t {
        for g in 0..gts.len() {
            let mine: Vec<usize> = (0..anchors.len()).filter(|&a| res.gt_index[a] == Some(g)).collect();
            let max_t = mine.iter().map(|&a| res.t[a]).fold(0.0, f64::max);
            let max_iou = mine.iter().map(|&a| owner[a].map_or(0.0, |(_, c)| c.iou)).fold(0.0, f64::max);
            if max_t > 0.0 {
                for &a in &mine {
                    res.t[a] = res.t[a] / max_t * max_iou;
                }
            }
        }
    }
    Ok(res)
}
