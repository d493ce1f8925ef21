//! Axis-aligned 3D box math and the object KNN graph.
//!
//! Extents map to axes as `l -> x`, `w -> y`, `h -> z`.

use crate::{Error, Result, Scalar};

/// Axis-aligned box given by its center and extents `(h, w, l)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Box3<T> {
    cx: T,
    cy: T,
    cz: T,
    h: T,
    w: T,
    l: T,
}

impl<T: Scalar> Box3<T> {
    pub fn new(cx: T, cy: T, cz: T, h: T, w: T, l: T) -> Result<Self> {
        let all = [cx, cy, cz, h, w, l];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(Error::contract("box fields must be finite"));
        }
        if h <= T::zero() || w <= T::zero() || l <= T::zero() {
            return Err(Error::contract(format!(
                "box extents must be positive, got h={h} w={w} l={l}"
            )));
        }
        Ok(Box3 { cx, cy, cz, h, w, l })
    }

    /// From `[cx, cy, cz, h, w, l]`.
    pub fn from_array(a: [T; 6]) -> Result<Self> {
        Box3::new(a[0], a[1], a[2], a[3], a[4], a[5])
    }

    pub fn to_array(&self) -> [T; 6] {
        [self.cx, self.cy, self.cz, self.h, self.w, self.l]
    }

    pub fn cx(&self) -> T {
        self.cx
    }
    pub fn cy(&self) -> T {
        self.cy
    }
    pub fn cz(&self) -> T {
        self.cz
    }
    pub fn h(&self) -> T {
        self.h
    }
    pub fn w(&self) -> T {
        self.w
    }
    pub fn l(&self) -> T {
        self.l
    }

    pub fn center(&self) -> [T; 3] {
        [self.cx, self.cy, self.cz]
    }

    fn half(&self) -> [T; 3] {
        let two = T::of(2.0);
        [self.l / two, self.w / two, self.h / two]
    }

    pub fn min_corner(&self) -> [T; 3] {
        let h = self.half();
        [self.cx - h[0], self.cy - h[1], self.cz - h[2]]
    }

    pub fn max_corner(&self) -> [T; 3] {
        let h = self.half();
        [self.cx + h[0], self.cy + h[1], self.cz + h[2]]
    }

    pub fn z_min(&self) -> T {
        self.cz - self.h / T::of(2.0)
    }

    pub fn z_max(&self) -> T {
        self.cz + self.h / T::of(2.0)
    }

    pub fn volume(&self) -> T {
        self.h * self.w * self.l
    }

    pub fn translated(&self, d: [T; 3]) -> Self {
        Box3 {
            cx: self.cx + d[0],
            cy: self.cy + d[1],
            cz: self.cz + d[2],
            ..*self
        }
    }
}

/// The 8 corners. Corner `k` takes the `-` half-extent on axis `a` when bit
/// `a` of `k` is clear (bit 0: x, bit 1: y, bit 2: z), `+` otherwise.
pub fn corners<T: Scalar>(b: &Box3<T>) -> [[T; 3]; 8] {
    let half = b.half();
    let c = b.center();
    std::array::from_fn(|k| {
        std::array::from_fn(|axis| {
            if k >> axis & 1 == 1 {
                c[axis] + half[axis]
            } else {
                c[axis] - half[axis]
            }
        })
    })
}

/// All 64 corner-pair height differences between two boxes.
#[derive(Clone, Debug, PartialEq)]
pub struct VerticalDistances<T> {
    values: [T; 64],
}

impl<T: Scalar> VerticalDistances<T> {
    /// Entry `8a + b` is `z(corner a of j) - z(corner b of i)`.
    pub fn values(&self) -> &[T; 64] {
        &self.values
    }

    pub fn min(&self) -> T {
        self.values.iter().copied().fold(T::infinity(), T::min)
    }

    pub fn max(&self) -> T {
        self.values.iter().copied().fold(T::neg_infinity(), T::max)
    }
}

pub fn vertical_distances<T: Scalar>(box_j: &Box3<T>, box_i: &Box3<T>) -> VerticalDistances<T> {
    let cj = corners(box_j);
    let ci = corners(box_i);
    VerticalDistances {
        values: std::array::from_fn(|k| cj[k / 8][2] - ci[k % 8][2]),
    }
}

/// Intersection over union of two axis-aligned boxes.
pub fn iou3d<T: Scalar>(a: &Box3<T>, b: &Box3<T>) -> T {
    if a == b {
        return T::one();
    }
    let (amin, amax) = (a.min_corner(), a.max_corner());
    let (bmin, bmax) = (b.min_corner(), b.max_corner());
    let mut inter = T::one();
    for axis in 0..3 {
        let overlap = amax[axis].min(bmax[axis]) - amin[axis].max(bmin[axis]);
        if overlap <= T::zero() {
            return T::zero();
        }
        inter *= overlap;
    }
    let union = a.volume() + b.volume() - inter;
    (inter / union).min(T::one()).max(T::zero())
}

/// `(x_j - x_i, y_j - y_i)`.
pub fn relative_offset<T: Scalar>(box_j: &Box3<T>, box_i: &Box3<T>) -> (T, T) {
    (box_j.cx - box_i.cx, box_j.cy - box_i.cy)
}

pub fn center_distance<T: Scalar>(a: &Box3<T>, b: &Box3<T>) -> T {
    let (ca, cb) = (a.center(), b.center());
    ca.iter()
        .zip(&cb)
        .fold(T::zero(), |s, (&p, &q)| s + (p - q) * (p - q))
        .sqrt()
}

/// For every box, the indices of its `min(k, n - 1)` nearest other boxes by
/// center distance, closest first; equal distances prefer the lower index.
pub fn knn_graph<T: Scalar>(boxes: &[Box3<T>], k: usize) -> Vec<Vec<usize>> {
    (0..boxes.len())
        .map(|i| {
            let mut others: Vec<(T, usize)> = (0..boxes.len())
                .filter(|&j| j != i)
                .map(|j| (center_distance(&boxes[i], &boxes[j]), j))
                .collect();
            others.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite").then(a.1.cmp(&b.1)));
            others.into_iter().take(k).map(|(_, j)| j).collect()
        })
        .collect()
}
