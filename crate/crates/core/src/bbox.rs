use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box in frame pixels, stored by center and extent.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        let b = Self { cx, cy, w, h };
        b.validate()?;
        Ok(b)
    }

    /// From the top-left corner convention used by ground-truth files.
    pub fn from_xywh(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        Self::new(x + w / 2.0, y + h / 2.0, w, h)
    }

    pub fn from_corners(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        Self::new((x1 + x2) / 2.0, (y1 + y2) / 2.0, x2 - x1, y2 - y1)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.cx, self.cy, self.w, self.h]
            .iter()
            .all(|v| v.is_finite());
        if !finite || self.w <= 0.0 || self.h <= 0.0 {
            return Err(Error::invalid(format!("degenerate box {self:?}")));
        }
        Ok(())
    }

    pub fn x1(&self) -> f64 {
        self.cx - self.w / 2.0
    }

    pub fn y1(&self) -> f64 {
        self.cy - self.h / 2.0
    }

    pub fn x2(&self) -> f64 {
        self.cx + self.w / 2.0
    }

    pub fn y2(&self) -> f64 {
        self.cy + self.h / 2.0
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let iw = (self.x2().min(other.x2()) - self.x1().max(other.x1())).max(0.0);
        let ih = (self.y2().min(other.y2()) - self.y1().max(other.y1())).max(0.0);
        iw * ih
    }

    /// Top-left `(x, y, w, h)`.
    pub fn to_xywh(&self) -> [f64; 4] {
        [self.x1(), self.y1(), self.w, self.h]
    }

    /// One ground-truth style line, `x,y,w,h` rounded to integers, no newline.
    pub fn to_rect_line(&self) -> String {
        let [x, y, w, h] = self.to_xywh().map(|v| v.round() as i64);
        format!("{x},{y},{w},{h}")
    }

    pub fn parse_rect_line(line: &str) -> Result<Self> {
        let vals: Vec<f64> = line
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|s| !s.is_empty())
            .map(|s| s.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::invalid(format!("bad rectangle line {line:?}: {e}")))?;
        match vals[..] {
            [x, y, w, h] => Self::from_xywh(x, y, w, h),
            _ => Err(Error::invalid(format!(
                "rectangle line needs 4 values: {line:?}"
            ))),
        }
    }

    /// Mirror about the vertical axis of a frame `frame_width` pixels wide.
    pub fn flip_horizontal(&self, frame_width: f64) -> Self {
        Self {
            cx: frame_width - self.cx,
            ..*self
        }
    }

    /// Intersection with the frame `[0, width) × [0, height)`, or `None` when
    /// the box lies entirely outside.
    pub fn clip_to(&self, width: f64, height: f64) -> Option<Self> {
        let x1 = self.x1().max(0.0);
        let y1 = self.y1().max(0.0);
        let x2 = self.x2().min(width);
        let y2 = self.y2().min(height);
        if x2 > x1 && y2 > y1 {
            Some(Self::from_corners(x1, y1, x2, y2).expect("positive extents"))
        } else {
            None
        }
    }

    pub fn center_inside(&self, width: f64, height: f64) -> bool {
        (0.0..width).contains(&self.cx) && (0.0..height).contains(&self.cy)
    }
}
