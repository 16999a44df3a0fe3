//! Five-channel patch rasters: RGB render of the patch region plus x and y
//! mesh grids.

use crate::doc_model::{ElementKind, FormPage};
use crate::error::{Error, Result};
use crate::netcore::Tensor;

use super::Patch;

pub const CHANNELS: usize = 5;

const WHITE: [f32; 3] = [1.0, 1.0, 1.0];
const BLACK: [f32; 3] = [0.0, 0.0, 0.0];
const HATCH: [f32; 3] = [0.2, 0.2, 0.2];
const WIDGET_FILL: [f32; 3] = [0.8, 0.8, 0.8];
const BLUE: [f32; 3] = [0.0, 0.0, 1.0];
const GREEN: [f32; 3] = [0.0, 1.0, 0.0];
const STROKE: usize = 2;

/// RGB render of a patch region resized to the output resolution, shared by
/// every candidate of the patch before strokes are added.
#[derive(Debug, Clone)]
pub struct BaseRaster {
    pub height: usize,
    pub width: usize,
    rgb: Vec<f32>,
}

/// Draws every page element overlapping the patch at one pixel per page
/// unit, then resamples to `height × width` with corner-aligned bilinear
/// interpolation.
pub fn render_base(page: &FormPage, patch: &Patch, height: usize, width: usize) -> BaseRaster {
    let pb = patch.patch_bbox;
    let sw = (pb.width.ceil() as usize).max(1);
    let sh = (pb.height.ceil() as usize).max(1);
    let mut src = vec![0f32; sw * sh * 3];
    for px in src.chunks_mut(3) {
        px.copy_from_slice(&WHITE);
    }
    let (ox, oy) = (pb.left.floor() as i64, pb.top.floor() as i64);

    let span = |lo: f64, hi: f64, origin: f64, n: usize| -> Option<(usize, usize)> {
        let a = (lo - origin).floor().max(0.0) as usize;
        let b = ((hi - origin).ceil().min(n as f64)) as usize;
        (a < b).then_some((a, b))
    };
    let mut set = |r: usize, c: usize, color: [f32; 3]| {
        src[(r * sw + c) * 3..][..3].copy_from_slice(&color);
    };

    let mut ordered: Vec<_> = page
        .elements
        .iter()
        .filter(|e| e.bbox.intersection_area(&pb) > 0.0 || pb.contains(&e.bbox))
        .collect();
    // textblock outlines go on top of any fills
    ordered.sort_by_key(|e| (e.kind == ElementKind::TextBlock, e.id));
    for e in ordered {
        let b = &e.bbox;
        let (Some((c0, c1)), Some((r0, r1))) = (
            span(b.left, b.right(), pb.left, sw),
            span(b.top, b.bottom(), pb.top, sh),
        ) else {
            continue;
        };
        for r in r0..r1 {
            for c in c0..c1 {
                match e.kind {
                    ElementKind::TextRun => {
                        let diag = (ox + c as i64 + oy + r as i64).rem_euclid(4);
                        set(r, c, if diag < 2 { HATCH } else { WHITE });
                    }
                    ElementKind::Widget => set(r, c, WIDGET_FILL),
                    ElementKind::TextBlock => {
                        if r == r0 || r + 1 == r1 || c == c0 || c + 1 == c1 {
                            set(r, c, BLACK);
                        }
                    }
                }
            }
        }
    }

    BaseRaster {
        height,
        width,
        rgb: resize_bilinear(&src, sh, sw, height, width),
    }
}

fn corner_scale(src: usize, dst: usize) -> f64 {
    if dst <= 1 {
        0.0
    } else {
        (src - 1) as f64 / (dst - 1) as f64
    }
}

fn resize_bilinear(src: &[f32], sh: usize, sw: usize, h: usize, w: usize) -> Vec<f32> {
    let (sy, sx) = (corner_scale(sh, h), corner_scale(sw, w));
    let taps = |i: usize, scale: f64, n: usize| -> (usize, usize, f32) {
        let pos = i as f64 * scale;
        let lo = (pos.floor() as usize).min(n - 1);
        let hi = (lo + 1).min(n - 1);
        (lo, hi, (pos - lo as f64) as f32)
    };
    let cols: Vec<_> = (0..w).map(|j| taps(j, sx, sw)).collect();
    let mut out = vec![0f32; h * w * 3];
    for i in 0..h {
        let (y0, y1, fy) = taps(i, sy, sh);
        for (j, &(x0, x1, fx)) in cols.iter().enumerate() {
            for ch in 0..3 {
                let p = |y: usize, x: usize| src[(y * sw + x) * 3 + ch];
                let top = p(y0, x0) * (1.0 - fx) + p(y0, x1) * fx;
                let bottom = p(y1, x0) * (1.0 - fx) + p(y1, x1) * fx;
                out[(i * w + j) * 3 + ch] = (top * (1.0 - fy) + bottom * fy).clamp(0.0, 1.0);
            }
        }
    }
    out
}

impl BaseRaster {
    /// The reference outlined in blue and `highlight_id` in green (drawn
    /// last), plus the mesh channels.
    pub fn with_highlight(&self, patch: &Patch, highlight_id: u32) -> Result<Tensor<f32>> {
        let slot = patch
            .candidate_ids
            .iter()
            .position(|&id| id == highlight_id)
            .ok_or(Error::UnknownReference(highlight_id))?;
        let (h, w) = (self.height, self.width);
        let mut data = vec![0f32; h * w * CHANNELS];
        for (px, rgb) in data.chunks_mut(CHANNELS).zip(self.rgb.chunks(3)) {
            px[..3].copy_from_slice(rgb);
        }
        let mut out = Tensor::from_vec(&[h, w, CHANNELS], data)?;
        self.stroke(&mut out, patch.norm_bboxes[patch.reference_slot()], BLUE);
        self.stroke(&mut out, patch.norm_bboxes[slot], GREEN);

        let mesh = |k: usize, n: usize| if n > 1 { k as f32 / (n - 1) as f32 } else { 0.0 };
        for (idx, px) in out.data_mut().chunks_mut(CHANNELS).enumerate() {
            let (i, j) = (idx / w, idx % w);
            px[3] = mesh(j, w);
            px[4] = mesh(i, h);
        }
        Ok(out)
    }

    fn stroke(&self, out: &mut Tensor<f32>, norm: [f32; 4], color: [f32; 3]) {
        let (h, w) = (self.height, self.width);
        let to_px = |v: f32, n: usize| ((v as f64 * (n.max(1) - 1) as f64).round() as usize).min(n - 1);
        let (x0, x1) = (to_px(norm[0], w), to_px(norm[0] + norm[2], w));
        let (y0, y1) = (to_px(norm[1], h), to_px(norm[1] + norm[3], h));
        let data = out.data_mut();
        for i in y0..=y1 {
            for j in x0..=x1 {
                let edge = i < y0 + STROKE || i + STROKE > y1 || j < x0 + STROKE || j + STROKE > x1;
                if edge {
                    data[(i * w + j) * CHANNELS..][..3].copy_from_slice(&color);
                }
            }
        }
    }
}

/// Raster of `patch` with `highlight_id` outlined in green.
pub fn rasterize(
    page: &FormPage,
    patch: &Patch,
    highlight_id: u32,
    height: usize,
    width: usize,
) -> Result<Tensor<f32>> {
    render_base(page, patch, height, width).with_highlight(patch, highlight_id)
}
