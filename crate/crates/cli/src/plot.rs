//! RA and RD heatmaps with ground-truth and detected boxes.

use std::path::Path;

use image::{Rgb, RgbImage};
use transrad::boxes::Box2D;
use transrad::postprocess::Detection;
use transrad::raddata::Annotation3D;
use transrad::Cube;

const GT_COLOR: Rgb<u8> = Rgb([40, 220, 90]);
const GAP: u32 = 8;
const CLASS_COLORS: [[u8; 3]; 6] = [[255, 80, 80], [255, 170, 40], [80, 160, 255], [230, 90, 230], [255, 255, 90], [90, 240, 240]];

/// Dark-blue to yellow ramp.
fn colormap(v: f64) -> Rgb<u8> {
    let v = v.clamp(0.0, 1.0);
    let r = (255.0 * (1.5 * v - 0.3).clamp(0.0, 1.0)) as u8;
    let g = (255.0 * v.powf(0.8)) as u8;
    let b = (255.0 * (0.45 + 0.4 * (1.0 - 2.0 * v).max(-1.0)).clamp(0.0, 1.0) * (1.0 - v * 0.8)) as u8;
    Rgb([r, g, b])
}

/// One panel: `rows x cols` magnitudes drawn `scale_x` times wider.
struct Panel {
    rows: usize,
    cols: usize,
    scale_x: f64,
    x0: u32,
}

impl Panel {
    fn width(&self) -> u32 {
        (self.cols as f64 * self.scale_x).round() as u32
    }

    fn paint(&self, img: &mut RgbImage, values: &[f32]) {
        let logv: Vec<f64> = values.iter().map(|&v| (1.0 + v.max(0.0) as f64).ln()).collect();
        let max = logv.iter().copied().fold(0.0, f64::max).max(1e-12);
        for y in 0..self.rows as u32 {
            for x in 0..self.width() {
                let c = ((x as f64 / self.scale_x) as usize).min(self.cols - 1);
                img.put_pixel(self.x0 + x, y, colormap(logv[y as usize * self.cols + c] / max));
            }
        }
    }

    /// `b.x*` are rows (range), `b.y*` are columns.
    fn rect(&self, img: &mut RgbImage, b: &Box2D<f64>, color: Rgb<u8>) {
        let (h, w) = (self.rows as i64, self.width() as i64);
        let r1 = (b.x1.floor() as i64).clamp(0, h - 1);
        let r2 = (b.x2.ceil() as i64 - 1).clamp(0, h - 1);
        let c1 = ((b.y1 * self.scale_x).floor() as i64).clamp(0, w - 1);
        let c2 = ((b.y2 * self.scale_x).ceil() as i64 - 1).clamp(0, w - 1);
        let mut put = |r: i64, c: i64| img.put_pixel(self.x0 + c as u32, r as u32, color);
        for c in c1..=c2 {
            put(r1, c);
            put(r2, c);
        }
        for r in r1..=r2 {
            put(r, c1);
            put(r, c2);
        }
    }
}

/// Writes a PNG with the RA panel on the left and the RD panel on the right.
pub fn plot_frame(cube: &Cube, gts: &[Annotation3D], dets: &[Detection], out: &Path) -> Result<(), String> {
    let [r, a, d] = cube.shape();
    let ra = Panel { rows: r, cols: a, scale_x: 1.0, x0: 0 };
    let rd = Panel { rows: r, cols: d, scale_x: (a as f64 / d as f64).max(1.0), x0: ra.width() + GAP };
    let mut img = RgbImage::from_pixel(ra.width() + GAP + rd.width(), r as u32, Rgb([0, 0, 0]));
    ra.paint(&mut img, &cube.ra_projection());
    rd.paint(&mut img, &cube.rd_projection());
    for g in gts {
        let b = g.to_box();
        ra.rect(&mut img, &b.ra(), GT_COLOR);
        rd.rect(&mut img, &b.rd(), GT_COLOR);
    }
    for det in dets {
        let color = Rgb(CLASS_COLORS[det.class_id % CLASS_COLORS.len()]);
        ra.rect(&mut img, &det.box3d.ra(), color);
        rd.rect(&mut img, &det.box3d.rd(), color);
    }
    img.save(out).map_err(|e| format!("{}: {e}", out.display()))
}
