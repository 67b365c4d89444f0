use serde::{Deserialize, Serialize};

/// Axis-aligned box in pixels: top-left corner plus extent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl From<[f64; 4]> for BBox {
    fn from(v: [f64; 4]) -> Self {
        Self { x: v[0], y: v[1], w: v[2], h: v[3] }
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        [b.x, b.y, b.w, b.h]
    }
}

impl BBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        Self { x, y, w, h }
    }

    pub fn from_corners(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self { x: x0, y: y0, w: x1 - x0, h: y1 - y0 }
    }

    pub fn right(&self) -> f64 {
        self.x + self.w
    }

    pub fn bottom(&self) -> f64 {
        self.y + self.h
    }

    pub fn area(&self) -> f64 {
        self.w.max(0.0) * self.h.max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + self.w / 2.0, self.y + self.h / 2.0)
    }

    pub fn corners(&self) -> [(f64, f64); 4] {
        [(self.x, self.y), (self.right(), self.y), (self.right(), self.bottom()), (self.x, self.bottom())]
    }

    pub fn is_valid(&self) -> bool {
        self.w > 0.0 && self.h > 0.0 && [self.x, self.y, self.w, self.h].iter().all(|v| v.is_finite())
    }

    /// Intersection with `[x0, x1] × [y0, y1]`; may be empty (zero extent).
    pub fn clip(&self, x0: f64, y0: f64, x1: f64, y1: f64) -> BBox {
        let l = self.x.max(x0);
        let t = self.y.max(y0);
        let r = self.right().min(x1).max(l);
        let b = self.bottom().min(y1).max(t);
        BBox::from_corners(l, t, r, b)
    }

    /// Smallest box containing all points. `None` for an empty iterator.
    pub fn hull<I: IntoIterator<Item = (f64, f64)>>(points: I) -> Option<BBox> {
        let mut it = points.into_iter();
        let (x, y) = it.next()?;
        let (mut x0, mut y0, mut x1, mut y1) = (x, y, x, y);
        for (x, y) in it {
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x);
            y1 = y1.max(y);
        }
        Some(BBox::from_corners(x0, y0, x1, y1))
    }
}

/// Intersection over union; 0 when either box is empty.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.right().min(b.right()) - a.x.max(b.x)).max(0.0);
    let ih = (a.bottom().min(b.bottom()) - a.y.max(b.y)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}
