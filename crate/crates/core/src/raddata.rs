//! Range-azimuth-Doppler cubes, their on-disk layout, and synthetic frames.
//!
//! Axis order is fixed everywhere in this crate: `(range, azimuth, Doppler)`,
//! which is `(x, y, z)` of every box. The range-azimuth (RA) plane is
//! `(range, azimuth)` and the range-Doppler (RD) plane is `(range, Doppler)`.
//!
//! Dataset layout on disk:
//!
//! ```text
//! <root>/labels.txt          class names, one per line; line i is class_id i
//! <root>/<split>/<id>.rad    "RAD1" + u32 R + u32 A + u32 D (LE), then R*A*D f32 LE, row-major
//! <root>/<split>/<id>.ann    one "class_id r a d w h depth" record per line
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::boxes::Box3D;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const RAD_MAGIC: &[u8; 4] = b"RAD1";
const HEADER_LEN: usize = 16;

/// Dense magnitude cube indexed `[range][azimuth][Doppler]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RadCube<T> {
    shape: [usize; 3],
    values: Vec<T>,
}

impl<T: Scalar> RadCube<T> {
    pub fn new(shape: [usize; 3], values: Vec<T>) -> Result<Self> {
        if shape.iter().any(|&s| s == 0) {
            return Err(Error::InvalidArgument(format!("cube shape {shape:?} has an empty axis")));
        }
        if values.len() != shape.iter().product::<usize>() {
            return Err(Error::Shape(format!("cube shape {shape:?} needs {} values, got {}", shape.iter().product::<usize>(), values.len())));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!("cube value {i} is not finite")));
        }
        Ok(Self { shape, values })
    }

    pub fn zeros(shape: [usize; 3]) -> Self {
        assert!(shape.iter().all(|&s| s > 0), "empty cube axis");
        Self { shape, values: vec![T::zero(); shape.iter().product()] }
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    #[inline]
    pub fn index(&self, r: usize, a: usize, d: usize) -> usize {
        (r * self.shape[1] + a) * self.shape[2] + d
    }

    pub fn get(&self, r: usize, a: usize, d: usize) -> T {
        self.values[self.index(r, a, d)]
    }

    pub fn set(&mut self, r: usize, a: usize, d: usize, v: T) {
        let i = self.index(r, a, d);
        self.values[i] = v;
    }

    /// Model input: Doppler bins become channels of an RA-plane image, `[D, R, A]`.
    pub fn to_input(&self) -> Tensor<T> {
        let [r, a, d] = self.shape;
        Tensor::new(&[r, a, d], self.values.clone()).expect("cube shape").permute(&[2, 0, 1])
    }

    /// Sum over Doppler: the RA-plane magnitude image `[R][A]`.
    pub fn ra_projection(&self) -> Vec<T> {
        let [r, a, d] = self.shape;
        (0..r * a).map(|i| self.values[i * d..(i + 1) * d].iter().copied().sum()).collect()
    }

    /// Sum over azimuth: the RD-plane magnitude image `[R][D]`.
    pub fn rd_projection(&self) -> Vec<T> {
        let [r, a, d] = self.shape;
        let mut out = vec![T::zero(); r * d];
        for ri in 0..r {
            for ai in 0..a {
                for di in 0..d {
                    out[ri * d + di] = out[ri * d + di] + self.get(ri, ai, di);
                }
            }
        }
        out
    }

    pub fn cast<U: Scalar>(&self) -> RadCube<U> {
        RadCube { shape: self.shape, values: self.values.iter().map(|v| U::lit(v.f64())).collect() }
    }
}

/// One annotated target in cube-cell coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Annotation3D {
    pub class_id: usize,
    /// `(range, azimuth, Doppler)` center.
    pub center: [f64; 3],
    /// `(w, h, depth)`: extents along range, azimuth, Doppler.
    pub size: [f64; 3],
}

impl Annotation3D {
    pub fn to_box(&self) -> Box3D<f64> {
        Box3D::from_center_size(self.center, self.size)
    }

    /// Checks the size, bounds and class invariants against a cube shape.
    pub fn validate(&self, shape: [usize; 3], num_classes: Option<usize>) -> std::result::Result<(), String> {
        if let Some(n) = num_classes {
            if self.class_id >= n {
                return Err(format!("class_id {} outside label map of {} classes", self.class_id, n));
            }
        }
        if self.size.iter().chain(&self.center).any(|v| !v.is_finite()) {
            return Err("non-finite annotation value".into());
        }
        if self.size.iter().any(|&s| s <= 0.0) {
            return Err(format!("non-positive size {:?}", self.size));
        }
        let b = self.to_box();
        let lo = [b.x1, b.y1, b.z1];
        let hi = [b.x2, b.y2, b.z2];
        for ax in 0..3 {
            if lo[ax] < 0.0 || hi[ax] > shape[ax] as f64 {
                return Err(format!("box {:?} exceeds cube shape {:?}", b.as_array(), shape));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrameRecord<T> {
    pub cube: RadCube<T>,
    pub annotations: Vec<Annotation3D>,
    pub frame_id: String,
}

impl<T: Scalar> FrameRecord<T> {
    pub fn validate(&self, num_classes: Option<usize>) -> Result<()> {
        for a in &self.annotations {
            a.validate(self.cube.shape(), num_classes).map_err(|e| Error::frame(&self.frame_id, e))?;
        }
        Ok(())
    }
}

/// Nearest-neighbour resampling of the Doppler axis: `out[.., k] = in[.., floor(k * D / target_d)]`.
pub fn resize_doppler<T: Scalar>(cube: &RadCube<T>, target_d: usize) -> Result<RadCube<T>> {
    if target_d == 0 {
        return Err(Error::InvalidArgument("target Doppler length must be positive".into()));
    }
    let [r, a, d] = cube.shape;
    if target_d == d {
        return Ok(cube.clone());
    }
    let src: Vec<usize> = (0..target_d).map(|k| k * d / target_d).collect();
    let mut values = Vec::with_capacity(r * a * target_d);
    for cell in cube.values.chunks(d) {
        values.extend(src.iter().map(|&s| cell[s]));
    }
    Ok(RadCube { shape: [r, a, target_d], values })
}

/// Scales the Doppler center and depth by `target_d / src_d`.
pub fn rescale_annotations(ann: &Annotation3D, src_d: usize, target_d: usize) -> Result<Annotation3D> {
    if src_d == 0 || target_d == 0 {
        return Err(Error::InvalidArgument("Doppler lengths must be positive".into()));
    }
    let f = target_d as f64 / src_d as f64;
    let mut out = *ann;
    out.center[2] *= f;
    out.size[2] *= f;
    Ok(out)
}

/// Resizes a frame's cube and annotations to `target_d` Doppler bins.
pub fn resize_frame<T: Scalar>(frame: &FrameRecord<T>, target_d: usize) -> Result<FrameRecord<T>> {
    let src_d = frame.cube.shape()[2];
    Ok(FrameRecord {
        cube: resize_doppler(&frame.cube, target_d)?,
        annotations: frame
            .annotations
            .iter()
            .map(|a| rescale_annotations(a, src_d, target_d))
            .collect::<Result<_>>()?,
        frame_id: frame.frame_id.clone(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassWeightConfig {
    pub w_min: f64,
    pub counts: Vec<u64>,
}

impl ClassWeightConfig {
    pub const DEFAULT_W_MIN: f64 = 0.05;

    pub fn new(counts: Vec<u64>) -> Self {
        Self { w_min: Self::DEFAULT_W_MIN, counts }
    }
}

/// Inverse-frequency class weights with a floor, normalized to sum to one.
///
/// `w_i = (N - N_i) / sum_j (N - N_j)`, then `w = max(w, w_min)`, then `w /= sum(w)`.
/// The floor is applied once; normalization may push a floored weight back
/// under `w_min`.
pub fn compute_class_weights(cfg: &ClassWeightConfig) -> Result<Vec<f64>> {
    if cfg.counts.is_empty() {
        return Err(Error::InvalidArgument("no classes to weight".into()));
    }
    let total: u64 = cfg.counts.iter().sum();
    if total == 0 {
        return Err(Error::InvalidArgument("all class counts are zero".into()));
    }
    let c = cfg.counts.len() as f64;
    let denom = c * total as f64 - total as f64;
    let raw: Vec<f64> = if denom > 0.0 {
        cfg.counts.iter().map(|&n| (total - n) as f64 / denom).collect()
    } else {
        // a single class: every count equals the total
        vec![1.0 / c; cfg.counts.len()]
    };
    let floored: Vec<f64> = raw.iter().map(|&w| w.max(cfg.w_min)).collect();
    let s: f64 = floored.iter().sum();
    Ok(floored.iter().map(|w| w / s).collect())
}

/// One family of synthetic targets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetClass {
    pub name: String,
    /// Relative sampling frequency.
    pub weight: f64,
    /// Minimum `(w, h, depth)` in cells.
    pub size_min: [f64; 3],
    pub size_max: [f64; 3],
    /// Peak magnitude at the target center.
    pub peak: f64,
}

/// Scene description for [`synth_frame`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub cube_shape: [usize; 3],
    pub num_targets: usize,
    pub classes: Vec<TargetClass>,
    /// Background magnitudes are uniform in `[0, noise_level)`.
    pub noise_level: f64,
    /// Minimum RA-plane gap between target boxes, in cells.
    pub min_gap: f64,
}

impl SceneSpec {
    /// Three target families with distinct extents and strengths.
    pub fn standard(cube_shape: [usize; 3], num_targets: usize, noise_level: f64) -> Self {
        let [r, a, d] = cube_shape.map(|v| v as f64);
        let frac = |lo: [f64; 3], hi: [f64; 3]| {
            ([lo[0] * r, lo[1] * a, lo[2] * d].map(|v: f64| v.max(1.0)), [hi[0] * r, hi[1] * a, hi[2] * d].map(|v: f64| v.max(1.5)))
        };
        let (p_lo, p_hi) = frac([0.08, 0.08, 0.15], [0.12, 0.12, 0.25]);
        let (c_lo, c_hi) = frac([0.18, 0.14, 0.25], [0.26, 0.2, 0.4]);
        let (t_lo, t_hi) = frac([0.3, 0.2, 0.3], [0.38, 0.26, 0.5]);
        Self {
            cube_shape,
            num_targets,
            classes: vec![
                TargetClass { name: "person".into(), weight: 1.0, size_min: p_lo, size_max: p_hi, peak: 0.6 },
                TargetClass { name: "car".into(), weight: 1.0, size_min: c_lo, size_max: c_hi, peak: 1.0 },
                TargetClass { name: "truck".into(), weight: 1.0, size_min: t_lo, size_max: t_hi, peak: 1.5 },
            ],
            noise_level,
            min_gap: 2.0,
        }
    }

    pub fn class_names(&self) -> Vec<String> {
        self.classes.iter().map(|c| c.name.clone()).collect()
    }
}

/// Raised-cosine bump: 1 at `s = 0`, strictly decreasing in `|s|`, 0 for `|s| >= 1`.
fn bump(s: f64) -> f64 {
    let s = s.abs();
    if s >= 1.0 {
        0.0
    } else {
        0.5 * (1.0 + (std::f64::consts::PI * s).cos())
    }
}

/// Deterministic synthetic frame.
///
/// Each target is a separable raised-cosine blob centered on a cell center;
/// its support is exactly the open annotation box. Targets are kept apart on
/// the RA plane by `min_gap` cells.
pub fn synth_frame<T: Scalar>(seed: u64, spec: &SceneSpec) -> Result<FrameRecord<T>> {
    let shape = spec.cube_shape;
    if shape.iter().any(|&s| s == 0) {
        return Err(Error::InvalidArgument("cube shape has an empty axis".into()));
    }
    if spec.num_targets > 0 && spec.classes.is_empty() {
        return Err(Error::Generation("targets requested but no classes defined".into()));
    }
    let total_w: f64 = spec.classes.iter().map(|c| c.weight.max(0.0)).sum();
    if spec.num_targets > 0 && total_w <= 0.0 {
        return Err(Error::Generation("class weights sum to zero".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut annotations: Vec<Annotation3D> = Vec::with_capacity(spec.num_targets);
    const MAX_ATTEMPTS: usize = 2000;

    for t in 0..spec.num_targets {
        let mut placed = None;
        for _ in 0..MAX_ATTEMPTS {
            let mut pick = rng.gen::<f64>() * total_w;
            let mut class_id = spec.classes.len() - 1;
            for (i, c) in spec.classes.iter().enumerate() {
                if pick < c.weight.max(0.0) {
                    class_id = i;
                    break;
                }
                pick -= c.weight.max(0.0);
            }
            let cls = &spec.classes[class_id];
            let mut size = [0.0; 3];
            let mut center = [0.0; 3];
            let mut ok = true;
            for ax in 0..3 {
                let (lo, hi) = (cls.size_min[ax], cls.size_max[ax]);
                if !(lo > 0.0 && hi >= lo) {
                    return Err(Error::Generation(format!("class `{}` has an invalid size range on axis {ax}", cls.name)));
                }
                let s = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
                let half = s / 2.0;
                // centers sit on cell centers k + 0.5
                let kmin = (half - 0.5).ceil().max(0.0) as i64;
                let kmax = (shape[ax] as f64 - half - 0.5).floor() as i64;
                if kmax < kmin {
                    ok = false;
                    break;
                }
                let k = rng.gen_range(kmin..=kmax);
                size[ax] = s;
                center[ax] = k as f64 + 0.5;
            }
            if !ok {
                continue;
            }
            let cand = Annotation3D { class_id, center, size };
            let cb = cand.to_box();
            let clear = annotations.iter().all(|o| {
                let ob = o.to_box();
                cb.x1 >= ob.x2 + spec.min_gap
                    || ob.x1 >= cb.x2 + spec.min_gap
                    || cb.y1 >= ob.y2 + spec.min_gap
                    || ob.y1 >= cb.y2 + spec.min_gap
            });
            if clear {
                placed = Some(cand);
                break;
            }
        }
        match placed {
            Some(a) => annotations.push(a),
            None => {
                return Err(Error::Generation(format!(
                    "could not place target {} of {} in cube {:?}",
                    t + 1,
                    spec.num_targets,
                    shape
                )))
            }
        }
    }

    let mut values: Vec<f64> = (0..shape.iter().product::<usize>())
        .map(|_| if spec.noise_level > 0.0 { rng.gen::<f64>() * spec.noise_level } else { 0.0 })
        .collect();
    for ann in &annotations {
        let peak = spec.classes[ann.class_id].peak;
        let b = ann.to_box();
        let lo = [b.x1, b.y1, b.z1].map(|v| v.floor().max(0.0) as usize);
        let hi = [(b.x2.ceil() as usize).min(shape[0]), (b.y2.ceil() as usize).min(shape[1]), (b.z2.ceil() as usize).min(shape[2])];
        let prof = |ax: usize, i: usize| bump((i as f64 + 0.5 - ann.center[ax]) / (ann.size[ax] / 2.0));
        for r in lo[0]..hi[0] {
            let pr = prof(0, r);
            if pr == 0.0 {
                continue;
            }
            for a in lo[1]..hi[1] {
                let pa = prof(1, a);
                if pa == 0.0 {
                    continue;
                }
                for d in lo[2]..hi[2] {
                    let v = peak * pr * pa * prof(2, d);
                    values[(r * shape[1] + a) * shape[2] + d] += v;
                }
            }
        }
    }
    let cube = RadCube::new(shape, values.into_iter().map(T::lit).collect())?;
    Ok(FrameRecord { cube, annotations, frame_id: format!("synth_{seed:08}") })
}

fn check_frame_id(id: &str) -> Result<()> {
    if id.is_empty() || id.contains(['/', '\\', ' ', '\n']) || id.starts_with('.') {
        return Err(Error::InvalidArgument(format!("frame id `{id}` is not a plain file stem")));
    }
    Ok(())
}

/// Writes `<id>.rad` and `<id>.ann` for every frame into `dir` (created if needed).
pub fn save_frames<T: Scalar>(frames: &[FrameRecord<T>], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for f in frames {
        check_frame_id(&f.frame_id)?;
        let [r, a, d] = f.cube.shape();
        let mut buf = Vec::with_capacity(HEADER_LEN + 4 * f.cube.values().len());
        buf.extend_from_slice(RAD_MAGIC);
        for s in [r, a, d] {
            let s = u32::try_from(s).map_err(|_| Error::InvalidArgument(format!("axis length {s} exceeds u32")))?;
            buf.extend_from_slice(&s.to_le_bytes());
        }
        for v in f.cube.values() {
            buf.extend_from_slice(&(v.f64() as f32).to_le_bytes());
        }
        let rad = dir.join(format!("{}.rad", f.frame_id));
        fs::write(&rad, buf).map_err(|e| Error::io(&rad, e))?;

        let ann = dir.join(format!("{}.ann", f.frame_id));
        let mut text = String::new();
        for a in &f.annotations {
            text.push_str(&format!(
                "{} {} {} {} {} {} {}\n",
                a.class_id, a.center[0], a.center[1], a.center[2], a.size[0], a.size[1], a.size[2]
            ));
        }
        fs::write(&ann, text).map_err(|e| Error::io(&ann, e))?;
    }
    Ok(())
}

/// Reads one `.rad` cube file.
pub fn read_cube<T: Scalar>(path: &Path, frame_id: &str) -> Result<RadCube<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < HEADER_LEN || &bytes[..4] != RAD_MAGIC {
        return Err(Error::frame(frame_id, "cube file lacks the RAD1 header"));
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    let shape = [dim(0), dim(1), dim(2)];
    let n: usize = shape.iter().product();
    let expected = HEADER_LEN + 4 * n;
    if n == 0 || bytes.len() != expected {
        return Err(Error::frame(
            frame_id,
            format!("cube header says {:?} ({} bytes) but file has {} bytes", shape, expected, bytes.len()),
        ));
    }
    let values = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| T::lit(f32::from_le_bytes(c.try_into().unwrap()) as f64))
        .collect();
    RadCube::new(shape, values).map_err(|e| Error::frame(frame_id, e.to_string()))
}

/// Parses `.ann` text.
pub fn parse_annotations(text: &str, frame_id: &str) -> Result<Vec<Annotation3D>> {
    let mut out = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 7 {
            return Err(Error::frame(frame_id, format!("annotation line {}: expected 7 fields, got {}", ln + 1, fields.len())));
        }
        let class_id = fields[0]
            .parse::<usize>()
            .map_err(|_| Error::frame(frame_id, format!("annotation line {}: bad class id `{}`", ln + 1, fields[0])))?;
        let mut nums = [0.0f64; 6];
        for (i, f) in fields[1..].iter().enumerate() {
            nums[i] = f
                .parse::<f64>()
                .map_err(|_| Error::frame(frame_id, format!("annotation line {}: bad number `{f}`", ln + 1)))?;
        }
        out.push(Annotation3D { class_id, center: [nums[0], nums[1], nums[2]], size: [nums[3], nums[4], nums[5]] });
    }
    Ok(out)
}

/// Loads every frame in `dir`, sorted by frame id, validating annotations.
pub fn load_frames<T: Scalar>(dir: &Path, num_classes: Option<usize>) -> Result<Vec<FrameRecord<T>>> {
    let rd = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut ids: Vec<String> = Vec::new();
    for entry in rd {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let p = entry.path();
        if p.extension().and_then(|e| e.to_str()) == Some("rad") {
            if let Some(stem) = p.file_stem().and_then(|s| s.to_str()) {
                ids.push(stem.to_string());
            }
        }
    }
    ids.sort();
    ids.iter().map(|id| load_frame(dir, id, num_classes)).collect()
}

pub fn load_frame<T: Scalar>(dir: &Path, frame_id: &str, num_classes: Option<usize>) -> Result<FrameRecord<T>> {
    let cube = read_cube(&dir.join(format!("{frame_id}.rad")), frame_id)?;
    let ann_path = dir.join(format!("{frame_id}.ann"));
    let text = fs::read_to_string(&ann_path).map_err(|e| Error::io(&ann_path, e))?;
    let annotations = parse_annotations(&text, frame_id)?;
    let rec = FrameRecord { cube, annotations, frame_id: frame_id.to_string() };
    rec.validate(num_classes)?;
    Ok(rec)
}

pub fn write_labels(root: &Path, names: &[String]) -> Result<()> {
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let p = root.join("labels.txt");
    let mut f = fs::File::create(&p).map_err(|e| Error::io(&p, e))?;
    for n in names {
        writeln!(f, "{n}").map_err(|e| Error::io(&p, e))?;
    }
    Ok(())
}

pub fn read_labels(root: &Path) -> Result<Vec<String>> {
    let p = root.join("labels.txt");
    let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    Ok(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect())
}
