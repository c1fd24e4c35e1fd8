//! Spatial masks, boxes and polygons.
//!
//! Coordinates are continuous with pixel `(x, y)` covering `[x, x+1) × [y, y+1)`,
//! so its center sits at `(x + 0.5, y + 0.5)`. All resampling is bilinear on
//! pixel centers, which keeps constant masks exact and crop/paste stable.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default decode threshold, inclusive.
pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    bits: Vec<u8>,
}

impl BinaryMask {
    pub fn zeros(width: usize, height: usize) -> Self {
        assert!(width >= 1 && height >= 1, "mask dimensions must be positive");
        Self {
            width,
            height,
            bits: vec![0; width * height],
        }
    }

    pub fn new(width: usize, height: usize, bits: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidArgument(format!(
                "mask dimensions must be positive, got {width}x{height}"
            )));
        }
        if bits.len() != width * height {
            return Err(Error::dims(width * height, bits.len()));
        }
        if bits.iter().any(|&b| b > 1) {
            return Err(Error::InvalidArgument("mask bits must be 0 or 1".into()));
        }
        Ok(Self {
            width,
            height,
            bits,
        })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut m = Self::zeros(width, height);
        for y in 0..height {
            for x in 0..width {
                m.bits[y * width + x] = f(x, y) as u8;
            }
        }
        m
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x] == 1
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, on: bool) {
        self.bits[y * self.width + x] = on as u8;
    }

    pub fn area(&self) -> usize {
        self.bits.iter().map(|&b| b as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.iter().all(|&b| b == 0)
    }

    /// Tight bounding box in pixel-edge coordinates, `None` for an empty mask.
    pub fn bounding_box(&self) -> Option<BoxXyxy> {
        let (mut x1, mut y1, mut x2, mut y2) = (usize::MAX, usize::MAX, 0, 0);
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) {
                    x1 = x1.min(x);
                    y1 = y1.min(y);
                    x2 = x2.max(x + 1);
                    y2 = y2.max(y + 1);
                }
            }
        }
        (x1 != usize::MAX).then(|| BoxXyxy::new(x1 as f64, y1 as f64, x2 as f64, y2 as f64))
    }

    pub fn to_soft(&self) -> SoftMask {
        SoftMask {
            width: self.width,
            height: self.height,
            values: self.bits.iter().map(|&b| b as f64).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SoftMask {
    width: usize,
    height: usize,
    values: Vec<f64>,
}

/// Grayscale images share the soft-mask layout.
pub type GrayImage = SoftMask;

impl SoftMask {
    pub fn new(width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidArgument(format!(
                "mask dimensions must be positive, got {width}x{height}"
            )));
        }
        if values.len() != width * height {
            return Err(Error::dims(width * height, values.len()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("soft mask values must be finite".into()));
        }
        Ok(Self {
            width,
            height,
            values,
        })
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        assert!(width >= 1 && height >= 1);
        Self {
            width,
            height,
            values: vec![value; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        assert!(width >= 1 && height >= 1);
        let mut values = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                values.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            values,
        }
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn max_abs_diff(&self, other: &SoftMask) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Bilinear sample at continuous pixel-index coordinates, clamped to
    /// the inclusive index window `[x_lo, x_hi] × [y_lo, y_hi]`.
    fn sample_clamped(&self, u: f64, v: f64, win: (usize, usize, usize, usize)) -> f64 {
        let (x_lo, x_hi, y_lo, y_hi) = win;
        let u = u.clamp(x_lo as f64, x_hi as f64);
        let v = v.clamp(y_lo as f64, y_hi as f64);
        let x0 = u.floor() as usize;
        let y0 = v.floor() as usize;
        let x1 = (x0 + 1).min(x_hi);
        let y1 = (y0 + 1).min(y_hi);
        let fx = u - x0 as f64;
        let fy = v - y0 as f64;
        let top = self.get(x0, y0) * (1.0 - fx) + self.get(x1, y0) * fx;
        let bottom = self.get(x0, y1) * (1.0 - fx) + self.get(x1, y1) * fx;
        top * (1.0 - fy) + bottom * fy
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxXyxy {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BoxXyxy {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        debug_assert!(x2 >= x1 && y2 >= y1, "inverted box");
        Self { x1, y1, x2, y2 }
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn clamp_to(&self, width: usize, height: usize) -> BoxXyxy {
        let (w, h) = (width as f64, height as f64);
        BoxXyxy {
            x1: self.x1.clamp(0.0, w),
            y1: self.y1.clamp(0.0, h),
            x2: self.x2.clamp(0.0, w),
            y2: self.y2.clamp(0.0, h),
        }
    }

    /// Normalized center form relative to an image of the given size.
    pub fn to_cxcywh(&self, image_w: usize, image_h: usize) -> BoxCxCyWh {
        let (w, h) = (image_w as f64, image_h as f64);
        BoxCxCyWh {
            cx: (self.x1 + self.x2) / 2.0 / w,
            cy: (self.y1 + self.y2) / 2.0 / h,
            w: self.width() / w,
            h: self.height() / h,
        }
    }

    pub fn iou(&self, other: &BoxXyxy) -> f64 {
        let iw = (self.x2.min(other.x2) - self.x1.max(other.x1)).max(0.0);
        let ih = (self.y2.min(other.y2) - self.y1.max(other.y1)).max(0.0);
        let inter = iw * ih;
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxCxCyWh {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BoxCxCyWh {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        let b = Self { cx, cy, w, h };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !(unit(self.cx) && unit(self.cy) && self.w > 0.0 && self.w <= 1.0 && self.h > 0.0 && self.h <= 1.0)
        {
            return Err(Error::InvalidArgument(format!("invalid normalized box {self:?}")));
        }
        Ok(())
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    /// Unit-square corners, no image scaling.
    pub fn to_unit_xyxy(&self) -> BoxXyxy {
        cxcywh_to_xyxy(self.as_array())
    }

    pub fn to_xyxy(&self, image_w: usize, image_h: usize) -> BoxXyxy {
        let (w, h) = (image_w as f64, image_h as f64);
        let u = self.to_unit_xyxy();
        BoxXyxy {
            x1: u.x1 * w,
            y1: u.y1 * h,
            x2: u.x2 * w,
            y2: u.y2 * h,
        }
    }
}

/// Corner form of a `[cx, cy, w, h]` quadruple. Negative sizes collapse to a point.
pub fn cxcywh_to_xyxy(b: [f64; 4]) -> BoxXyxy {
    let (hw, hh) = (b[2].max(0.0) / 2.0, b[3].max(0.0) / 2.0);
    BoxXyxy {
        x1: b[0] - hw,
        y1: b[1] - hh,
        x2: b[0] + hw,
        y2: b[1] + hh,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Polygon {
    vertices: Vec<(f64, f64)>,
}

impl Polygon {
    pub fn new(vertices: Vec<(f64, f64)>) -> Result<Self> {
        if vertices.len() < 3 {
            return Err(Error::InvalidArgument(format!(
                "polygon needs at least 3 vertices, got {}",
                vertices.len()
            )));
        }
        if vertices
            .iter()
            .any(|&(x, y)| !x.is_finite() || !y.is_finite() || x < 0.0 || y < 0.0)
        {
            return Err(Error::InvalidArgument(
                "polygon coordinates must be finite and non-negative".into(),
            ));
        }
        Ok(Self { vertices })
    }

    /// From COCO's flat `[x0, y0, x1, y1, ...]` list.
    pub fn from_flat(coords: &[f64]) -> Result<Self> {
        if !coords.len().is_multiple_of(2) {
            return Err(Error::Format("odd polygon coordinate count".into()));
        }
        Self::new(coords.chunks(2).map(|c| (c[0], c[1])).collect())
    }

    pub fn vertices(&self) -> &[(f64, f64)] {
        &self.vertices
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.vertices.iter().flat_map(|&(x, y)| [x, y]).collect()
    }

    /// Shoelace area.
    pub fn area(&self) -> f64 {
        let n = self.vertices.len();
        let twice: f64 = (0..n)
            .map(|i| {
                let (x0, y0) = self.vertices[i];
                let (x1, y1) = self.vertices[(i + 1) % n];
                x0 * y1 - x1 * y0
            })
            .sum();
        twice.abs() / 2.0
    }

    /// Even-odd crossing test.
    pub fn contains(&self, px: f64, py: f64) -> bool {
        let v = &self.vertices;
        let mut inside = false;
        let mut j = v.len() - 1;
        for i in 0..v.len() {
            let (xi, yi) = v[i];
            let (xj, yj) = v[j];
            if (yi > py) != (yj > py) {
                let x_cross = xj + (py - yj) * (xi - xj) / (yi - yj);
                if px < x_cross {
                    inside = !inside;
                }
            }
            j = i;
        }
        inside
    }
}

pub fn mask_iou(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    if a.width != b.width || a.height != b.height {
        return Err(Error::dims(
            format!("{}x{}", a.width, a.height),
            format!("{}x{}", b.width, b.height),
        ));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.bits.iter().zip(&b.bits) {
        inter += (x & y) as usize;
        union += (x | y) as usize;
    }
    Ok(if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    })
}

/// Bit is set iff `value >= threshold`.
pub fn binarize(s: &SoftMask, threshold: f64) -> BinaryMask {
    BinaryMask {
        width: s.width,
        height: s.height,
        bits: s.values.iter().map(|&v| (v >= threshold) as u8).collect(),
    }
}

pub fn resize(s: &SoftMask, out_w: usize, out_h: usize) -> SoftMask {
    assert!(out_w >= 1 && out_h >= 1, "output dimensions must be positive");
    let sx = s.width as f64 / out_w as f64;
    let sy = s.height as f64 / out_h as f64;
    let win = (0, s.width - 1, 0, s.height - 1);
    SoftMask::from_fn(out_w, out_h, |x, y| {
        let u = (x as f64 + 0.5) * sx - 0.5;
        let v = (y as f64 + 0.5) * sy - 0.5;
        s.sample_clamped(u, v, win)
    })
}

fn checked_box(b: &BoxXyxy, width: usize, height: usize) -> Result<BoxXyxy> {
    let c = b.clamp_to(width, height);
    if !(c.width() > 0.0 && c.height() > 0.0) {
        return Err(Error::DegenerateBox(format!("{b:?} on {width}x{height}")));
    }
    Ok(c)
}

/// Crops `m` to `bx` and resamples the crop to `side × side`.
///
/// Sampling is confined to the pixels the box touches, so an integer box gives
/// the same result as an explicit crop followed by [`resize`].
pub fn crop_resize(m: &BinaryMask, bx: &BoxXyxy, side: usize) -> Result<SoftMask> {
    crop_resize_soft(&m.to_soft(), bx, side)
}

pub fn crop_resize_soft(s: &SoftMask, bx: &BoxXyxy, side: usize) -> Result<SoftMask> {
    if side < 2 {
        return Err(Error::InvalidArgument(format!("crop side must be >= 2, got {side}")));
    }
    let b = checked_box(bx, s.width, s.height)?;
    let x_lo = b.x1.floor() as usize;
    let y_lo = b.y1.floor() as usize;
    let x_hi = (b.x2.ceil() as usize).min(s.width) - 1;
    let y_hi = (b.y2.ceil() as usize).min(s.height) - 1;
    let sx = b.width() / side as f64;
    let sy = b.height() / side as f64;
    Ok(SoftMask::from_fn(side, side, |x, y| {
        let u = b.x1 + (x as f64 + 0.5) * sx - 0.5;
        let v = b.y1 + (y as f64 + 0.5) * sy - 0.5;
        s.sample_clamped(u, v, (x_lo, x_hi, y_lo, y_hi))
    }))
}

/// Inverse of [`crop_resize`]: an `image_w × image_h` canvas holding `s`
/// resampled into the box and zeros elsewhere.
pub fn paste_into_box(s: &SoftMask, bx: &BoxXyxy, image_w: usize, image_h: usize) -> Result<SoftMask> {
    if image_w == 0 || image_h == 0 {
        return Err(Error::InvalidArgument("empty canvas".into()));
    }
    let b = checked_box(bx, image_w, image_h)?;
    let sx = s.width as f64 / b.width();
    let sy = s.height as f64 / b.height();
    let win = (0, s.width - 1, 0, s.height - 1);
    Ok(SoftMask::from_fn(image_w, image_h, |x, y| {
        let (cx, cy) = (x as f64 + 0.5, y as f64 + 0.5);
        if cx < b.x1 || cx >= b.x2 || cy < b.y1 || cy >= b.y2 {
            return 0.0;
        }
        let u = (cx - b.x1) * sx - 0.5;
        let v = (cy - b.y1) * sy - 0.5;
        s.sample_clamped(u, v, win)
    }))
}

/// Pixel is set iff its center lies inside the polygon (even-odd rule).
pub fn rasterize_polygon(p: &Polygon, width: usize, height: usize) -> BinaryMask {
    BinaryMask::from_fn(width, height, |x, y| p.contains(x as f64 + 0.5, y as f64 + 0.5))
}

// ---------------------------------------------------------------------------
// Netpbm

pub fn write_pgm(s: &SoftMask, mut w: impl Write) -> Result<()> {
    write!(w, "P5\n{} {}\n255\n", s.width, s.height)?;
    let bytes: Vec<u8> = s
        .values
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    w.write_all(&bytes)?;
    Ok(())
}

pub fn write_pbm(m: &BinaryMask, mut w: impl Write) -> Result<()> {
    write!(w, "P4\n{} {}\n", m.width, m.height)?;
    let row_bytes = m.width.div_ceil(8);
    for y in 0..m.height {
        let mut row = vec![0u8; row_bytes];
        for x in 0..m.width {
            if m.get(x, y) {
                row[x / 8] |= 0x80 >> (x % 8);
            }
        }
        w.write_all(&row)?;
    }
    Ok(())
}

fn read_header_tokens(r: &mut impl BufRead, count: usize) -> Result<Vec<String>> {
    let mut tokens = Vec::with_capacity(count);
    let mut token = String::new();
    let mut byte = [0u8; 1];
    while tokens.len() < count {
        r.read_exact(&mut byte)?;
        let c = byte[0] as char;
        if c == '#' && token.is_empty() {
            let mut skip = String::new();
            r.read_line(&mut skip)?;
        } else if c.is_ascii_whitespace() {
            if !token.is_empty() {
                tokens.push(std::mem::take(&mut token));
            }
        } else {
            token.push(c);
        }
    }
    Ok(tokens)
}

fn parse_dim(s: &str) -> Result<usize> {
    s.parse()
        .map_err(|_| Error::Format(format!("bad netpbm header field {s:?}")))
}

/// Reads a binary P5 image, scaling samples to `[0, 1]`.
pub fn read_pgm(mut r: impl BufRead) -> Result<SoftMask> {
    let t = read_header_tokens(&mut r, 4)?;
    if t[0] != "P5" {
        return Err(Error::Format(format!("expected P5, found {}", t[0])));
    }
    let (w, h, maxval) = (parse_dim(&t[1])?, parse_dim(&t[2])?, parse_dim(&t[3])?);
    if maxval == 0 || maxval > 255 {
        return Err(Error::Format(format!("unsupported maxval {maxval}")));
    }
    let mut buf = vec![0u8; w * h];
    r.read_exact(&mut buf)?;
    SoftMask::new(w, h, buf.iter().map(|&b| b as f64 / maxval as f64).collect())
}

pub fn read_pbm(mut r: impl BufRead) -> Result<BinaryMask> {
    let t = read_header_tokens(&mut r, 3)?;
    if t[0] != "P4" {
        return Err(Error::Format(format!("expected P4, found {}", t[0])));
    }
    let (w, h) = (parse_dim(&t[1])?, parse_dim(&t[2])?);
    let row_bytes = w.div_ceil(8);
    let mut buf = vec![0u8; row_bytes * h];
    r.read_exact(&mut buf)?;
    Ok(BinaryMask::from_fn(w, h, |x, y| {
        buf[y * row_bytes + x / 8] & (0x80 >> (x % 8)) != 0
    }))
}
