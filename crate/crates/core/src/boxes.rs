//! Axis-aligned boxes on the range-azimuth / range-Doppler planes and in the full cube.
//!
//! Coordinates are cube cells. Axis `x` is range, `y` azimuth, `z` Doppler.

use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Box2D<T> {
    pub x1: T,
    pub y1: T,
    pub x2: T,
    pub y2: T,
}

impl<T: Scalar> Box2D<T> {
    pub fn new(x1: T, y1: T, x2: T, y2: T) -> Self {
        Self { x1, y1, x2, y2 }
    }

    pub fn width(&self) -> T {
        self.x2 - self.x1
    }

    pub fn height(&self) -> T {
        self.y2 - self.y1
    }

    pub fn area(&self) -> T {
        self.width().max(T::zero()) * self.height().max(T::zero())
    }

    pub fn center(&self) -> (T, T) {
        let h = T::lit(0.5);
        ((self.x1 + self.x2) * h, (self.y1 + self.y2) * h)
    }

    pub fn is_valid(&self) -> bool {
        self.x2 >= self.x1 && self.y2 >= self.y1
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Box3D<T> {
    pub x1: T,
    pub y1: T,
    pub z1: T,
    pub x2: T,
    pub y2: T,
    pub z2: T,
}

impl<T: Scalar> Box3D<T> {
    pub fn new(x1: T, y1: T, z1: T, x2: T, y2: T, z2: T) -> Self {
        Self { x1, y1, z1, x2, y2, z2 }
    }

    pub fn from_center_size(center: [T; 3], size: [T; 3]) -> Self {
        let h = T::lit(0.5);
        Self::new(
            center[0] - size[0] * h,
            center[1] - size[1] * h,
            center[2] - size[2] * h,
            center[0] + size[0] * h,
            center[1] + size[1] * h,
            center[2] + size[2] * h,
        )
    }

    pub fn volume(&self) -> T {
        (self.x2 - self.x1).max(T::zero()) * (self.y2 - self.y1).max(T::zero()) * (self.z2 - self.z1).max(T::zero())
    }

    /// Projection on the range-azimuth plane.
    pub fn ra(&self) -> Box2D<T> {
        Box2D::new(self.x1, self.y1, self.x2, self.y2)
    }

    /// Projection on the range-Doppler plane (`y` of the result is Doppler).
    pub fn rd(&self) -> Box2D<T> {
        Box2D::new(self.x1, self.z1, self.x2, self.z2)
    }

    pub fn clamp_to(&self, shape: [usize; 3]) -> Self {
        let c = |v: T, hi: usize| v.max(T::zero()).min(T::from_usize_lossy(hi));
        Self::new(
            c(self.x1, shape[0]),
            c(self.y1, shape[1]),
            c(self.z1, shape[2]),
            c(self.x2, shape[0]),
            c(self.y2, shape[1]),
            c(self.z2, shape[2]),
        )
    }

    pub fn as_array(&self) -> [T; 6] {
        [self.x1, self.y1, self.z1, self.x2, self.y2, self.z2]
    }

    pub fn is_valid(&self) -> bool {
        self.x2 >= self.x1 && self.y2 >= self.y1 && self.z2 >= self.z1
    }
}

fn overlap<T: Scalar>(a1: T, a2: T, b1: T, b2: T) -> T {
    (a2.min(b2) - a1.max(b1)).max(T::zero())
}

/// Intersection over union; an empty union gives 0.
pub fn iou_2d<T: Scalar>(a: &Box2D<T>, b: &Box2D<T>) -> T {
    let inter = overlap(a.x1, a.x2, b.x1, b.x2) * overlap(a.y1, a.y2, b.y1, b.y2);
    let union = a.area() + b.area() - inter;
    if union <= T::zero() {
        T::zero()
    } else {
        (inter / union).min(T::one())
    }
}

/// Intersection over union of volumes; an empty union gives 0.
pub fn iou_3d<T: Scalar>(a: &Box3D<T>, b: &Box3D<T>) -> T {
    let inter = overlap(a.x1, a.x2, b.x1, b.x2) * overlap(a.y1, a.y2, b.y1, b.y2) * overlap(a.z1, a.z2, b.z1, b.z2);
    let union = a.volume() + b.volume() - inter;
    if union <= T::zero() {
        T::zero()
    } else {
        (inter / union).min(T::one())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn hand_worked_iou() {
        let a = Box2D::<f64>::new(0.0, 0.0, 2.0, 2.0);
        let b = Box2D::new(1.0, 1.0, 3.0, 3.0);
        assert!((iou_2d(&a, &b) - 1.0 / 7.0).abs() < 1e-15);
        assert_eq!(iou_2d(&a, &a), 1.0);
        assert_eq!(iou_2d(&a, &Box2D::new(5.0, 5.0, 6.0, 6.0)), 0.0);
        let z = Box2D::new(1.0, 1.0, 1.0, 1.0);
        assert_eq!(iou_2d(&z, &z), 0.0);
    }

    #[test]
    fn iou_3d_identical_and_disjoint() {
        let a = Box3D::<f64>::new(0.0, 0.0, 0.0, 2.0, 2.0, 2.0);
        assert_eq!(iou_3d(&a, &a), 1.0);
        let b = Box3D::new(0.0, 0.0, 3.0, 2.0, 2.0, 4.0);
        assert_eq!(iou_3d(&a, &b), 0.0);
        let c = Box3D::new(1.0, 0.0, 0.0, 3.0, 2.0, 2.0);
        assert!((iou_3d(&a, &c) - 4.0 / 12.0).abs() < 1e-15);
    }

    fn arb_box3() -> impl Strategy<Value = Box3D<f64>> {
        (0.0..10.0f64, 0.0..10.0f64, 0.0..10.0f64, 0.1..5.0f64, 0.1..5.0f64, 0.1..5.0f64)
            .prop_map(|(x, y, z, w, h, d)| Box3D::new(x, y, z, x + w, y + h, z + d))
    }

    proptest! {
        #[test]
        fn iou_symmetric_and_bounded(a in arb_box3(), b in arb_box3()) {
            let ab = iou_3d(&a, &b);
            prop_assert!((ab - iou_3d(&b, &a)).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&ab));
            let ra = iou_2d(&a.ra(), &b.ra());
            prop_assert!((ra - iou_2d(&b.ra(), &a.ra())).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&ra));
        }
    }
}
