//! Detection losses: CIoU, center, DFL, focal, Smooth L1, 3D IoU and their weighted sum.
//!
//! Each loss has a scalar reference form and a vectorized form on the tape
//! used for training. Positives are laid out as columns: a box batch is four
//! `[P]` variables.

use std::f64::consts::PI;
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::assignment::{anchors_for, AssignmentResult};
use crate::autograd::{Tape, Var};
use crate::boxes::{iou_2d, Box2D};
use crate::detmodel::RawPredictions;
use crate::error::{Error, Result};
use crate::scalar::{sigmoid, softplus, Scalar};
use crate::tensor::Tensor;

/// Keeps divisions finite on the tape.
const EPS: f64 = 1e-7;

pub const COMPONENT_NAMES: [&str; 9] =
    ["fl_obj", "fl_cls", "ciou_ra", "cent_ra", "dfl_ra", "ciou_rd", "cent_rd", "sl1_dopl", "iou_rad"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub alpha: [f64; 9],
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { alpha: [30.0, 7.5, 7.5, 0.5, 1.5, 5.0, 5.0, 80.0, 40.0] }
    }
}

impl LossWeights {
    /// Weights of the second training round: objectness 40, classification 15.
    pub fn phase2() -> Self {
        let mut w = Self::default();
        w.alpha[0] = 40.0;
        w.alpha[1] = 15.0;
        w
    }

    pub fn validate(&self) -> Result<()> {
        if self.alpha.iter().any(|&a| !(a >= 0.0) || !a.is_finite()) {
            return Err(Error::Config(format!("loss weights must be non-negative, got {:?}", self.alpha)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FocalConfig {
    pub alpha: f64,
    pub gamma: f64,
}

impl Default for FocalConfig {
    fn default() -> Self {
        Self { alpha: 0.25, gamma: 2.0 }
    }
}

impl FocalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) || !(self.gamma >= 0.0) {
            return Err(Error::Config(format!("invalid focal settings {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub weights: LossWeights,
    pub focal: FocalConfig,
    /// Divide the center terms by the enclosing-box diagonal squared.
    #[serde(default)]
    pub normalized_center: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { weights: LossWeights::default(), focal: FocalConfig::default(), normalized_center: false }
    }
}

/// The nine loss components and their weighted sum.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub components: [f64; 9],
    pub total: f64,
}

impl LossBreakdown {
    pub fn from_components(components: [f64; 9], weights: &LossWeights) -> Self {
        let total = components.iter().zip(&weights.alpha).map(|(c, a)| c * a).sum();
        Self { components, total }
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        COMPONENT_NAMES.iter().position(|&n| n == name).map(|i| self.components[i])
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CiouParts<T> {
    pub loss: T,
    pub iou_loss: T,
    pub ncent: T,
    pub aspect: T,
    pub alpha: T,
}

fn aspect_angle<T: Scalar>(w: T, h: T) -> T {
    if h > T::zero() {
        (w / h).atan()
    } else if w > T::zero() {
        T::lit(PI / 2.0)
    } else {
        T::zero()
    }
}

/// Squared distance between box centers.
pub fn center_loss<T: Scalar>(pred: &Box2D<T>, gt: &Box2D<T>) -> T {
    let (px, py) = pred.center();
    let (gx, gy) = gt.center();
    (px - gx).powi(2) + (py - gy).powi(2)
}

/// CIoU with its parts; the aspect term is gated off below IoU 0.5.
pub fn ciou_loss<T: Scalar>(pred: &Box2D<T>, gt: &Box2D<T>) -> CiouParts<T> {
    let iou = iou_2d(pred, gt);
    let iou_loss = T::one() - iou;
    let cw = pred.x2.max(gt.x2) - pred.x1.min(gt.x1);
    let ch = pred.y2.max(gt.y2) - pred.y1.min(gt.y1);
    let c2 = cw * cw + ch * ch;
    let ncent = if c2 > T::zero() { center_loss(pred, gt) / c2 } else { T::zero() };
    let da = aspect_angle(gt.width(), gt.height()) - aspect_angle(pred.width(), pred.height());
    let aspect = T::lit(4.0 / (PI * PI)) * da * da;
    let alpha = if iou < T::lit(0.5) || iou_loss + aspect == T::zero() { T::zero() } else { aspect / (iou_loss + aspect) };
    CiouParts { loss: iou_loss + ncent + alpha * aspect, iou_loss, ncent, aspect, alpha }
}

/// Softmax probabilities over DFL bins.
pub fn dfl_probs<T: Scalar>(logits: &[T]) -> Vec<T> {
    let m = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let e: Vec<T> = logits.iter().map(|&l| (l - m).exp()).collect();
    let z: T = e.iter().copied().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// Expectation `sum_i P(y_i) i` over bin indices.
pub fn dfl_decode<T: Scalar>(probs: &[T]) -> T {
    probs.iter().enumerate().map(|(i, &p)| p * T::from_usize_lossy(i)).sum()
}

/// Clamps a DFL target into `[0, bins - 1]`; the flag reports whether it moved.
pub fn clamp_dfl_target<T: Scalar>(y: T, bins: usize) -> (T, bool) {
    let hi = T::from_usize_lossy(bins - 1);
    if y < T::zero() {
        (T::zero(), true)
    } else if y > hi {
        (hi, true)
    } else {
        (y, false)
    }
}

/// Bin weights `(y_{i+1} - y, y - y_i)` placed on `(floor(y), floor(y) + 1)`.
fn dfl_bin_weights<T: Scalar>(y: T, bins: usize) -> [(usize, T); 2] {
    let yi = y.floor();
    let i = yi.to_usize().unwrap_or(0).min(bins - 1);
    if i + 1 >= bins || y == yi {
        return [(i, T::one()), (i, T::zero())];
    }
    [(i, yi + T::one() - y), (i + 1, y - yi)]
}

/// Two-bin distribution focal loss on raw logits; `y` is clamped into range.
pub fn dfl_loss<T: Scalar>(logits: &[T], y: T) -> T {
    let (y, _) = clamp_dfl_target(y, logits.len());
    let p = dfl_probs(logits);
    let mut loss = T::zero();
    for (i, w) in dfl_bin_weights(y, logits.len()) {
        if w != T::zero() {
            loss = loss - w * p[i].ln();
        }
    }
    loss
}

/// Focal loss from a probability with class weight `w` inside the cross-entropy.
pub fn focal_loss<T: Scalar>(p: T, y: T, cfg: &FocalConfig, w: T) -> T {
    let (one, a) = (T::one(), T::lit(cfg.alpha));
    let alpha_t = a * y + (one - a) * (one - y);
    let p_t = p * y + (one - p) * (one - y);
    let bce = -w * (y * p.ln() + (one - y) * (one - p).ln());
    alpha_t * (one - p_t).powf(T::lit(cfg.gamma)) * bce
}

/// Focal loss evaluated from a logit without forming `log(0)`.
pub fn focal_loss_logit<T: Scalar>(z: T, y: T, cfg: &FocalConfig, w: T) -> T {
    let (one, a) = (T::one(), T::lit(cfg.alpha));
    let p = sigmoid(z);
    let alpha_t = a * y + (one - a) * (one - y);
    let one_minus_pt = y + p * (one - T::lit(2.0) * y);
    let bce = w * (softplus(z) - y * z);
    alpha_t * one_minus_pt.powf(T::lit(cfg.gamma)) * bce
}

pub fn smooth_l1<T: Scalar>(p: T, y: T) -> T {
    let d = (p - y).abs();
    if d < T::one() {
        T::lit(0.5) * d * d
    } else {
        d - T::lit(0.5)
    }
}

/// Box batch on the tape: four `[P]` coordinate variables.
#[derive(Clone, Copy, Debug)]
pub struct BoxVars<'t, T: Scalar> {
    pub x1: Var<'t, T>,
    pub y1: Var<'t, T>,
    pub x2: Var<'t, T>,
    pub y2: Var<'t, T>,
}

impl<'t, T: Scalar> BoxVars<'t, T> {
    pub fn constant(tape: &'t Tape<T>, boxes: &[Box2D<f64>]) -> Self {
        let col = |f: fn(&Box2D<f64>) -> f64| {
            let data: Vec<T> = boxes.iter().map(|b| T::lit(f(b))).collect();
            tape.constant(Tensor::new(&[boxes.len()], data).expect("box column"))
        };
        Self { x1: col(|b| b.x1), y1: col(|b| b.y1), x2: col(|b| b.x2), y2: col(|b| b.y2) }
    }

    pub fn width(&self) -> Var<'t, T> {
        self.x2.sub(self.x1)
    }

    pub fn height(&self) -> Var<'t, T> {
        self.y2.sub(self.y1)
    }
}

/// Per-box CIoU loss, IoU and both center terms on the tape.
#[derive(Clone, Copy, Debug)]
pub struct CiouVars<'t, T: Scalar> {
    pub loss: Var<'t, T>,
    pub iou: Var<'t, T>,
    pub cent: Var<'t, T>,
    pub ncent: Var<'t, T>,
}

fn overlap<'t, T: Scalar>(a1: Var<'t, T>, a2: Var<'t, T>, b1: Var<'t, T>, b2: Var<'t, T>) -> Var<'t, T> {
    a2.minimum(b2).sub(a1.maximum(b1)).relu()
}

pub fn ciou_vars<'t, T: Scalar>(p: &BoxVars<'t, T>, g: &BoxVars<'t, T>) -> CiouVars<'t, T> {
    let inter = overlap(p.x1, p.x2, g.x1, g.x2).mul(overlap(p.y1, p.y2, g.y1, g.y2));
    let (pw, ph, gw, gh) = (p.width(), p.height(), g.width(), g.height());
    let union_raw = pw.mul(ph).add(gw.mul(gh)).sub(inter);
    let iou = inter.div(union_raw.add_scalar(EPS));
    let cw = p.x2.maximum(g.x2).sub(p.x1.minimum(g.x1));
    let ch = p.y2.maximum(g.y2).sub(p.y1.minimum(g.y1));
    let c2 = cw.square().add(ch.square()).add_scalar(EPS);
    let dx = p.x1.add(p.x2).sub(g.x1).sub(g.x2);
    let dy = p.y1.add(p.y2).sub(g.y1).sub(g.y2);
    let cent = dx.square().add(dy.square()).scale(0.25);
    let ncent = cent.div(c2);
    let da = gw.div(gh.add_scalar(EPS)).atan().sub(pw.div(ph.add_scalar(EPS)).atan());
    let aspect = da.square().scale(4.0 / (PI * PI));
    let iou_loss = iou.neg().add_scalar(1.0);
    // gate on the exact ratio so IoU = 0.5 stays open
    let (iv, uv) = (inter.value(), union_raw.value());
    let gate: Vec<bool> = iv.data().iter().zip(uv.data()).map(|(&i, &u)| u > T::zero() && i >= T::lit(0.5) * u).collect();
    let zeros = iou.scale(0.0);
    let alpha = aspect.div(iou_loss.add(aspect).add_scalar(EPS)).select(Rc::new(gate), zeros);
    CiouVars { loss: iou_loss.add(ncent).add(alpha.mul(aspect)), iou, cent, ncent }
}

/// Per-row DFL of `[M, bins]` logits against targets in bin units.
/// Returns the losses and the number of clamped targets.
pub fn dfl_vars<'t, T: Scalar>(logits: Var<'t, T>, targets: &[f64]) -> (Var<'t, T>, usize) {
    let s = logits.shape();
    let (m, bins) = (s[0], s[1]);
    assert_eq!(targets.len(), m, "one DFL target per row");
    let mut w = Tensor::zeros(&[m, bins]);
    let mut clamped = 0;
    for (r, &y) in targets.iter().enumerate() {
        let (y, c) = clamp_dfl_target(y, bins);
        clamped += c as usize;
        for (i, wt) in dfl_bin_weights(y, bins) {
            w.data_mut()[r * bins + i] = w.data()[r * bins + i] + T::lit(wt);
        }
    }
    (logits.log_softmax_last().mul_const(Rc::new(w)).sum_last().neg(), clamped)
}

/// Elementwise focal loss of logits `z` against targets `y` with per-element weights `w`.
pub fn focal_vars<'t, T: Scalar>(z: Var<'t, T>, y: &Tensor<T>, w: &Tensor<T>, cfg: &FocalConfig) -> Var<'t, T> {
    let a = T::lit(cfg.alpha);
    let one = T::one();
    let bce = z.softplus().sub(z.mul_const(Rc::new(y.clone())));
    let alpha_w = Rc::new(y.zip_map(w, |y, w| (a * y + (one - a) * (one - y)) * w));
    let scaled = bce.mul_const(alpha_w);
    if cfg.gamma == 0.0 {
        return scaled;
    }
    let g = T::lit(cfg.gamma);
    let one_minus_pt = z.sigmoid().mul_const(Rc::new(y.map(|y| one - T::lit(2.0) * y))).add_const(Rc::new(y.clone()));
    let modulator = one_minus_pt.map(move |x| x.max(T::zero()).powf(g), move |x, _| g * x.max(T::zero()).powf(g - one));
    scaled.mul(modulator)
}

pub fn smooth_l1_vars<'t, T: Scalar>(p: Var<'t, T>, y: Var<'t, T>) -> Var<'t, T> {
    let d = p.sub(y);
    let mask: Vec<bool> = d.value().data().iter().map(|v| v.abs() < T::one()).collect();
    d.square().scale(0.5).select(Rc::new(mask), d.abs().add_scalar(-0.5))
}

/// 3D IoU of two batches given as (RA box, Doppler extent) pairs.
pub fn iou3d_vars<'t, T: Scalar>(p: &BoxVars<'t, T>, pz: (Var<'t, T>, Var<'t, T>), g: &BoxVars<'t, T>, gz: (Var<'t, T>, Var<'t, T>)) -> Var<'t, T> {
    let inter = overlap(p.x1, p.x2, g.x1, g.x2).mul(overlap(p.y1, p.y2, g.y1, g.y2)).mul(overlap(pz.0, pz.1, gz.0, gz.1));
    let pv = p.width().mul(p.height()).mul(pz.1.sub(pz.0));
    let gv = g.width().mul(g.height()).mul(gz.1.sub(gz.0));
    inter.div(pv.add(gv).sub(inter).add_scalar(EPS))
}

pub struct LossOutput<'t, T: Scalar> {
    pub total: Var<'t, T>,
    pub breakdown: LossBreakdown,
    pub num_positives: usize,
    pub dfl_clamped: usize,
}

/// One frame's predictions and its assignment.
pub struct FrameTargets<'a, 't, T: Scalar> {
    pub preds: &'a RawPredictions<'t, T>,
    pub assign: &'a AssignmentResult,
}

/// Weighted sum of all components over a batch of frames.
///
/// Objectness and classification average over every anchor of the batch; the
/// regression terms average over positives, the RA triple weighted by `t`.
pub fn total_loss<'t, T: Scalar>(
    tape: &'t Tape<T>,
    frames: &[FrameTargets<'_, 't, T>],
    class_weights: &[f64],
    doppler_bins: usize,
    cfg: &LossConfig,
) -> Result<LossOutput<'t, T>> {
    cfg.weights.validate()?;
    cfg.focal.validate()?;
    if frames.is_empty() {
        return Err(Error::InvalidArgument("loss needs at least one frame".into()));
    }
    let nc = frames[0].preds.levels[0].cls.shape()[0];
    if class_weights.len() != nc {
        return Err(Error::InvalidArgument(format!("{} class weights for {nc} classes", class_weights.len())));
    }
    let d = doppler_bins as f64;

    let mut obj_parts = Vec::new();
    let mut cls_parts = Vec::new();
    let mut box_parts = Vec::new();
    let mut dopl_parts = Vec::new();
    let mut obj_y = Vec::new();
    let mut pos_info = Vec::new();
    let mut cls_y: Vec<Vec<T>> = vec![Vec::new(); nc];
    let mut reg_max = 0;
    for f in frames {
        let anchors = anchors_for(f.preds);
        if f.assign.gt_index.len() != anchors.len() {
            return Err(Error::InvalidArgument(format!(
                "assignment covers {} anchors, predictions have {}",
                f.assign.gt_index.len(),
                anchors.len()
            )));
        }
        let lv = &f.preds.levels;
        let flat = |get: &dyn Fn(usize) -> Var<'t, T>| {
            let parts: Vec<_> = (0..lv.len())
                .map(|i| {
                    let v = get(i);
                    let s = v.shape();
                    v.reshape(&[s[0], s[1] * s[2]])
                })
                .collect();
            Var::concat(&parts, 1)
        };
        obj_parts.push(flat(&|i| lv[i].obj).reshape(&[anchors.len()]));
        cls_parts.push(flat(&|i| lv[i].cls));
        let pos = f.assign.positives();
        reg_max = lv[0].boxes.shape()[0] / 4;
        if !pos.is_empty() {
            box_parts.push(flat(&|i| lv[i].boxes).t().gather_rows(&pos));
            dopl_parts.push(flat(&|i| lv[i].dopl).t().gather_rows(&pos));
        }
        for a in 0..anchors.len() {
            let target = &f.assign.targets[a];
            obj_y.push(if target.is_some() { T::one() } else { T::zero() });
            for (c, ys) in cls_y.iter_mut().enumerate() {
                ys.push(if target.as_ref().is_some_and(|t| t.class_id == c) { T::one() } else { T::zero() });
            }
        }
        for &a in &pos {
            pos_info.push((anchors[a], f.assign.t[a], f.assign.targets[a].clone().expect("positive target")));
        }
    }
    let total_anchors = obj_y.len();
    let obj = Var::concat(&obj_parts, 0);
    let obj_y = Tensor::new(&[total_anchors], obj_y)?;
    let fl_obj = focal_vars(obj, &obj_y, &Tensor::ones(&[total_anchors]), &cfg.focal).mean();

    let cls = Var::concat(&cls_parts, 1).reshape(&[nc * total_anchors]);
    let cls_y = Tensor::new(&[nc * total_anchors], cls_y.concat())?;
    let cls_w = Tensor::from_fn(&[nc * total_anchors], |i| T::lit(class_weights[i / total_anchors]));
    let fl_cls = focal_vars(cls, &cls_y, &cls_w, &cfg.focal).sum().scale(1.0 / total_anchors as f64);

    let p = pos_info.len();
    let zero = tape.constant(Tensor::scalar(T::zero()));
    let mut comps = [fl_obj, fl_cls, zero, zero, zero, zero, zero, zero, zero];
    let mut dfl_clamped = 0;
    if p > 0 {
        let inv_p = 1.0 / p as f64;
        let col = |f: &dyn Fn(usize) -> f64| Rc::new(Tensor::from_fn(&[p], |i| T::lit(f(i))));
        let stride = col(&|i| pos_info[i].0.stride);
        let (cx, cy) = (col(&|i| pos_info[i].0.cx), col(&|i| pos_info[i].0.cy));
        let t = col(&|i| pos_info[i].1);

        let logits = Var::concat(&box_parts, 0).reshape(&[4 * p, reg_max]);
        let bins = Rc::new(Tensor::from_fn(&[reg_max, 1], |i| T::from_usize_lossy(i)));
        let dist = logits.softmax_last().matmul(tape.constant((*bins).clone())).reshape(&[p, 4]).t();
        let side = |k: usize| dist.narrow(0, k, 1).reshape(&[p]).mul_const(stride.clone());
        let pred_ra = BoxVars {
            x1: side(0).neg().add_const(cx.clone()),
            y1: side(1).neg().add_const(cy.clone()),
            x2: side(2).add_const(cx.clone()),
            y2: side(3).add_const(cy.clone()),
        };
        let gt_ra_boxes: Vec<Box2D<f64>> = pos_info.iter().map(|x| x.2.ra_box()).collect();
        let gt_ra = BoxVars::constant(tape, &gt_ra_boxes);
        let ra = ciou_vars(&pred_ra, &gt_ra);
        let cent_ra = if cfg.normalized_center { ra.ncent } else { ra.cent };
        comps[2] = ra.loss.mul_const(t.clone()).sum().scale(inv_p);
        comps[3] = cent_ra.mul_const(t.clone()).sum().scale(inv_p);

        let mut dfl_targets = Vec::with_capacity(4 * p);
        for (a, _, tg) in &pos_info {
            let b = tg.ra_box();
            dfl_targets.extend([(a.cx - b.x1) / a.stride, (a.cy - b.y1) / a.stride, (b.x2 - a.cx) / a.stride, (b.y2 - a.cy) / a.stride]);
        }
        let (dfl_rows, clamped) = dfl_vars(logits, &dfl_targets);
        dfl_clamped = clamped;
        let dfl = dfl_rows.reshape(&[p, 4]).sum_last().scale(0.25);
        comps[4] = dfl.mul_const(t).sum().scale(inv_p);

        let squashed = Var::concat(&dopl_parts, 0).sigmoid().t();
        let (s1, s2) = (squashed.narrow(0, 0, 1).reshape(&[p]), squashed.narrow(0, 1, 1).reshape(&[p]));
        let (za, zb) = (s1.scale(d), s2.scale(d));
        let (z1, z2) = (za.minimum(zb), za.maximum(zb));
        let pred_rd = BoxVars { x1: pred_ra.x1, y1: z1, x2: pred_ra.x2, y2: z2 };
        let gt_rd_boxes: Vec<Box2D<f64>> = pos_info.iter().map(|x| x.2.rd_box()).collect();
        let gt_rd = BoxVars::constant(tape, &gt_rd_boxes);
        let rd = ciou_vars(&pred_rd, &gt_rd);
        comps[5] = rd.loss.mean();
        comps[6] = if cfg.normalized_center { rd.ncent.mean() } else { rd.cent.mean() };

        let zt1 = tape.constant(Tensor::from_fn(&[p], |i| T::lit(pos_info[i].2.doppler().0 / d)));
        let zt2 = tape.constant(Tensor::from_fn(&[p], |i| T::lit(pos_info[i].2.doppler().1 / d)));
        comps[7] = smooth_l1_vars(s1, zt1).add(smooth_l1_vars(s2, zt2)).sum().scale(inv_p);

        let iou3 = iou3d_vars(&pred_ra, (z1, z2), &gt_ra, (gt_rd.y1, gt_rd.y2));
        comps[8] = iou3.neg().add_scalar(1.0).mean();
    }
    let mut values = [0.0; 9];
    for (v, c) in values.iter_mut().zip(&comps) {
        *v = c.item().f64();
    }
    let total = comps
        .iter()
        .zip(&cfg.weights.alpha)
        .map(|(c, &a)| c.scale(a))
        .reduce(|x, y| x.add(y))
        .expect("nine components");
    Ok(LossOutput { total, breakdown: LossBreakdown::from_components(values, &cfg.weights), num_positives: p, dfl_clamped })
}
