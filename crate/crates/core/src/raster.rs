//! Raster helpers shared by the synthesizer and the detectors: affine warps with
//! bilinear or nearest resampling, alpha-over compositing and luma conversion.

use image::{Rgba, RgbaImage};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Resample {
    Nearest,
    #[default]
    Bilinear,
}

/// Linear part of a 2-D affine map, row-major: `[x', y'] = m * [x, y]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Linear2(pub [[f64; 2]; 2]);

impl Linear2 {
    pub const IDENTITY: Linear2 = Linear2([[1.0, 0.0], [0.0, 1.0]]);

    pub fn scale(s: f64) -> Self {
        Linear2([[s, 0.0], [0.0, s]])
    }

    pub fn rotation_deg(deg: f64) -> Self {
        let (s, c) = deg.to_radians().sin_cos();
        Linear2([[c, -s], [s, c]])
    }

    /// Horizontal shear `x' = x + k*y`.
    pub fn shear_x(k: f64) -> Self {
        Linear2([[1.0, k], [0.0, 1.0]])
    }

    pub fn flip_h() -> Self {
        Linear2([[-1.0, 0.0], [0.0, 1.0]])
    }

    /// `self * rhs`: apply `rhs` first.
    pub fn then_after(self, rhs: Linear2) -> Linear2 {
        let a = self.0;
        let b = rhs.0;
        Linear2([
            [
                a[0][0] * b[0][0] + a[0][1] * b[1][0],
                a[0][0] * b[0][1] + a[0][1] * b[1][1],
            ],
            [
                a[1][0] * b[0][0] + a[1][1] * b[1][0],
                a[1][0] * b[0][1] + a[1][1] * b[1][1],
            ],
        ])
    }

    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        let m = self.0;
        (m[0][0] * x + m[0][1] * y, m[1][0] * x + m[1][1] * y)
    }

    pub fn determinant(&self) -> f64 {
        let m = self.0;
        m[0][0] * m[1][1] - m[0][1] * m[1][0]
    }

    pub fn inverse(&self) -> Option<Linear2> {
        let det = self.determinant();
        if det.abs() < 1e-12 {
            return None;
        }
        let m = self.0;
        Some(Linear2([
            [m[1][1] / det, -m[0][1] / det],
            [-m[1][0] / det, m[0][0] / det],
        ]))
    }
}

/// Continuous bounding box of `[0,w] x [0,h]` mapped through `m` about its center,
/// returned as `(min_x, min_y, width_px, height_px)` with integer output dimensions.
pub fn footprint(m: &Linear2, width: u32, height: u32) -> (f64, f64, u32, u32) {
    let (hw, hh) = (width as f64 / 2.0, height as f64 / 2.0);
    let corners = [(-hw, -hh), (hw, -hh), (-hw, hh), (hw, hh)];
    let mut min = (f64::INFINITY, f64::INFINITY);
    let mut max = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for (x, y) in corners {
        let (u, v) = m.apply(x, y);
        min = (min.0.min(u), min.1.min(v));
        max = (max.0.max(u), max.1.max(v));
    }
    let dim = |extent: f64| ((extent - 1e-9).ceil().max(1.0)) as u32;
    (min.0, min.1, dim(max.0 - min.0), dim(max.1 - min.1))
}

/// Renders `src` transformed by `m` into a fresh raster sized to the transformed footprint.
///
/// Each output pixel center is mapped back into the source; samples outside the source
/// are transparent. Bilinear interpolation works on premultiplied colour so transparent
/// texels do not darken edges.
pub fn warp(src: &RgbaImage, m: &Linear2, resample: Resample) -> RgbaImage {
    let inv = m.inverse().expect("warp requires an invertible transform");
    let (sw, sh) = (src.width(), src.height());
    let (min_x, min_y, ow, oh) = footprint(m, sw, sh);
    let (cx, cy) = (sw as f64 / 2.0, sh as f64 / 2.0);
    let mut out = RgbaImage::new(ow, oh);
    for j in 0..oh {
        for i in 0..ow {
            let (dx, dy) = (min_x + i as f64 + 0.5, min_y + j as f64 + 0.5);
            let (u, v) = inv.apply(dx, dy);
            let (sx, sy) = (u + cx, v + cy);
            let px = match resample {
                Resample::Nearest => sample_nearest(src, sx, sy),
                Resample::Bilinear => sample_bilinear(src, sx - 0.5, sy - 0.5),
            };
            out.put_pixel(i, j, px);
        }
    }
    out
}

fn sample_nearest(src: &RgbaImage, sx: f64, sy: f64) -> Rgba<u8> {
    // 1e-9 nudge keeps exact texel boundaries stable against rounding in the inverse map.
    let (fx, fy) = ((sx + 1e-9).floor(), (sy + 1e-9).floor());
    if fx < 0.0 || fy < 0.0 || fx >= src.width() as f64 || fy >= src.height() as f64 {
        return Rgba([0, 0, 0, 0]);
    }
    *src.get_pixel(fx as u32, fy as u32)
}

fn sample_bilinear(src: &RgbaImage, tx: f64, ty: f64) -> Rgba<u8> {
    let snap = |t: f64| {
        if (t - t.round()).abs() < 1e-9 {
            t.round()
        } else {
            t
        }
    };
    let (tx, ty) = (snap(tx), snap(ty));
    let (x0, y0) = (tx.floor(), ty.floor());
    let (fx, fy) = (tx - x0, ty - y0);
    let (w, h) = (src.width() as i64, src.height() as i64);
    let mut acc = [0.0f64; 4];
    for (ox, oy, wt) in [
        (0i64, 0i64, (1.0 - fx) * (1.0 - fy)),
        (1, 0, fx * (1.0 - fy)),
        (0, 1, (1.0 - fx) * fy),
        (1, 1, fx * fy),
    ] {
        if wt == 0.0 {
            continue;
        }
        let (x, y) = (x0 as i64 + ox, y0 as i64 + oy);
        if x < 0 || y < 0 || x >= w || y >= h {
            continue;
        }
        let p = src.get_pixel(x as u32, y as u32);
        let a = p[3] as f64 / 255.0;
        acc[0] += wt * a * p[0] as f64;
        acc[1] += wt * a * p[1] as f64;
        acc[2] += wt * a * p[2] as f64;
        acc[3] += wt * a;
    }
    if acc[3] <= 0.0 {
        return Rgba([0, 0, 0, 0]);
    }
    let un = |c: f64| (c / acc[3]).round().clamp(0.0, 255.0) as u8;
    Rgba([
        un(acc[0]),
        un(acc[1]),
        un(acc[2]),
        (acc[3] * 255.0).round().clamp(0.0, 255.0) as u8,
    ])
}

/// `alpha * over + (1 - alpha) * under`, rounded to the nearest integer.
pub fn blend_channel(under: u8, over: u8, alpha: f64) -> u8 {
    (alpha * over as f64 + (1.0 - alpha) * under as f64)
        .round()
        .clamp(0.0, 255.0) as u8
}

/// Alpha-over composites `overlay` onto `base` with its top-left at `(x, y)`.
///
/// Overlay pixels with alpha `<= alpha_floor` are skipped entirely, so the base is
/// byte-identical there. The overlay must fit inside the base.
pub fn composite_over(base: &mut RgbaImage, overlay: &RgbaImage, x: u32, y: u32, alpha_floor: u8) {
    assert!(x + overlay.width() <= base.width() && y + overlay.height() <= base.height());
    for (ox, oy, p) in overlay.enumerate_pixels() {
        if p[3] <= alpha_floor {
            continue;
        }
        let a = p[3] as f64 / 255.0;
        let dst = base.get_pixel_mut(x + ox, y + oy);
        let out_alpha = a + (1.0 - a) * dst[3] as f64 / 255.0;
        *dst = Rgba([
            blend_channel(dst[0], p[0], a),
            blend_channel(dst[1], p[1], a),
            blend_channel(dst[2], p[2], a),
            (out_alpha * 255.0).round().clamp(0.0, 255.0) as u8,
        ]);
    }
}

/// Bounding box `(x_min, y_min, x_max, y_max)` (max exclusive) of pixels with alpha above `floor`.
pub fn alpha_bbox(img: &RgbaImage, floor: u8) -> Option<(u32, u32, u32, u32)> {
    let mut bb: Option<(u32, u32, u32, u32)> = None;
    for (x, y, p) in img.enumerate_pixels() {
        if p[3] > floor {
            bb = Some(match bb {
                None => (x, y, x + 1, y + 1),
                Some((x0, y0, x1, y1)) => (x0.min(x), y0.min(y), x1.max(x + 1), y1.max(y + 1)),
            });
        }
    }
    bb
}

/// Bounding box of pixels that differ between two equally sized rasters.
pub fn diff_bbox(a: &RgbaImage, b: &RgbaImage) -> Option<(u32, u32, u32, u32)> {
    assert_eq!(a.dimensions(), b.dimensions());
    let mut bb: Option<(u32, u32, u32, u32)> = None;
    for ((x, y, p), q) in a.enumerate_pixels().zip(b.pixels()) {
        if p != q {
            bb = Some(match bb {
                None => (x, y, x + 1, y + 1),
                Some((x0, y0, x1, y1)) => (x0.min(x), y0.min(y), x1.max(x + 1), y1.max(y + 1)),
            });
        }
    }
    bb
}

/// Rec. 601 luma as a real number.
pub fn luma(p: &Rgba<u8>) -> f64 {
    0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64
}

/// Integer Rec. 601 luma in `0..=255`.
pub fn luma_u8(p: &Rgba<u8>) -> u8 {
    ((299 * p[0] as u32 + 587 * p[1] as u32 + 114 * p[2] as u32) / 1000) as u8
}
