//! Composite explanation images.
//!
//! The canvas holds four panels: image A and image B side by side on top
//! with the kept matches drawn as lines, and grayscale copies of both below
//! with each match's pixel relevance tinted in that match's colour.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::geometry::GridToPixel;
use crate::image::{encode_rgba_png, quantize, RgbImage};
use crate::lrp::PixelRelevance;
use crate::matching::MatchSet;

/// Gap between panels, in pixels.
pub const GUTTER: usize = 8;
/// Opacity of a fully relevant pixel's tint.
pub const ALPHA: f64 = 0.65;
/// Match colours by rank (cycled). Twenty well-separated hues; the order is
/// part of the output format.
pub const PALETTE: [[u8; 3]; 20] = [
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
    [210, 245, 60],
    [250, 190, 212],
    [0, 128, 128],
    [220, 190, 255],
    [170, 110, 40],
    [255, 250, 200],
    [128, 0, 0],
    [170, 255, 195],
    [128, 128, 0],
    [255, 215, 180],
    [0, 0, 128],
    [128, 128, 128],
];
const BACKGROUND: [u8; 3] = [255, 255, 255];
const MARKER_RADIUS: isize = 1;

pub fn palette(rank: usize) -> [u8; 3] {
    PALETTE[rank % PALETTE.len()]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub x: usize,
    pub y: usize,
    pub width: usize,
    pub height: usize,
}

impl Rect {
    pub fn contains(&self, x: isize, y: isize) -> bool {
        x >= self.x as isize
            && y >= self.y as isize
            && x < (self.x + self.width) as isize
            && y < (self.y + self.height) as isize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CanvasLayout {
    pub width: usize,
    pub height: usize,
    pub top_a: Rect,
    pub top_b: Rect,
    pub bottom_a: Rect,
    pub bottom_b: Rect,
}

impl CanvasLayout {
    pub fn new(width: usize, height: usize) -> Self {
        let rect = |col: usize, row: usize| Rect {
            x: col * (width + GUTTER),
            y: row * (height + GUTTER),
            width,
            height,
        };
        CanvasLayout {
            width: 2 * width + GUTTER,
            height: 2 * height + GUTTER,
            top_a: rect(0, 0),
            top_b: rect(1, 0),
            bottom_a: rect(0, 1),
            bottom_b: rect(1, 1),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExplanationCanvas {
    pub layout: CanvasLayout,
    /// Row-major RGBA.
    pub rgba: Vec<u8>,
}

impl ExplanationCanvas {
    /// Both images in the top row, grayscale copies in the bottom row.
    /// Images must share one size.
    pub fn new(image_a: &RgbImage, image_b: &RgbImage) -> Result<Self> {
        if (image_a.width, image_a.height) != (image_b.width, image_b.height) {
            return Err(crate::Error::Shape(format!(
                "panel images differ in size: {}x{} vs {}x{}",
                image_a.width, image_a.height, image_b.width, image_b.height
            )));
        }
        let layout = CanvasLayout::new(image_a.width, image_a.height);
        let mut canvas = ExplanationCanvas {
            layout,
            rgba: [BACKGROUND[0], BACKGROUND[1], BACKGROUND[2], 255]
                .repeat(layout.width * layout.height),
        };
        canvas.blit(image_a, layout.top_a, false);
        canvas.blit(image_b, layout.top_b, false);
        canvas.blit(image_a, layout.bottom_a, true);
        canvas.blit(image_b, layout.bottom_b, true);
        Ok(canvas)
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let o = 4 * (y * self.layout.width + x);
        [self.rgba[o], self.rgba[o + 1], self.rgba[o + 2]]
    }

    fn put(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let o = 4 * (y * self.layout.width + x);
        self.rgba[o..o + 3].copy_from_slice(&rgb);
    }

    fn blit(&mut self, img: &RgbImage, at: Rect, gray: bool) {
        for y in 0..img.height {
            for x in 0..img.width {
                let rgb = if gray {
                    let l = quantize(img.luma(y, x));
                    [l, l, l]
                } else {
                    [0, 1, 2].map(|c| quantize(img.get(c, y, x)))
                };
                self.put(at.x + x, at.y + y, rgb);
            }
        }
    }

    pub fn encode_png(&self) -> Result<Vec<u8>> {
        encode_rgba_png(self.layout.width, self.layout.height, &self.rgba)
    }
}

/// Pixel position of a point inside a panel, clamped to the panel.
fn panel_point(p: (f64, f64), panel: Rect) -> (isize, isize) {
    let x = (p.0.floor() as isize).clamp(0, panel.width as isize - 1);
    let y = (p.1.floor() as isize).clamp(0, panel.height as isize - 1);
    (panel.x as isize + x, panel.y as isize + y)
}

/// Panel-local endpoints of every match, as drawn.
pub fn match_endpoints(canvas: &ExplanationCanvas, matches: &MatchSet, grid: &GridToPixel) -> Vec<((isize, isize), (isize, isize))> {
    let l = canvas.layout;
    matches
        .matches
        .iter()
        .map(|m| {
            (
                panel_point(grid.map(m.kp_a), l.top_a),
                panel_point(grid.map(m.kp_b), l.top_b),
            )
        })
        .collect()
}

/// Bresenham line, clipped to the canvas.
fn line(canvas: &mut ExplanationCanvas, from: (isize, isize), to: (isize, isize), rgb: [u8; 3]) {
    let (mut x, mut y) = from;
    let (dx, dy) = ((to.0 - x).abs(), -(to.1 - y).abs());
    let (sx, sy) = (if x < to.0 { 1 } else { -1 }, if y < to.1 { 1 } else { -1 });
    let mut err = dx + dy;
    let (w, h) = (canvas.layout.width as isize, canvas.layout.height as isize);
    loop {
        if (0..w).contains(&x) && (0..h).contains(&y) {
            canvas.put(x as usize, y as usize, rgb);
        }
        if (x, y) == to {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

fn marker(canvas: &mut ExplanationCanvas, at: (isize, isize), panel: Rect, rgb: [u8; 3]) {
    for dy in -MARKER_RADIUS..=MARKER_RADIUS {
        for dx in -MARKER_RADIUS..=MARKER_RADIUS {
            let (x, y) = (at.0 + dx, at.1 + dy);
            if panel.contains(x, y) {
                canvas.put(x as usize, y as usize, rgb);
            }
        }
    }
}

/// Draws each match (in rank order) as a line between its mapped pixel
/// centres, coloured `palette(rank)`, with square endpoint markers.
pub fn draw_matches(canvas: &mut ExplanationCanvas, matches: &MatchSet, grid: &GridToPixel) {
    let l = canvas.layout;
    for (rank, (a, b)) in match_endpoints(canvas, matches, grid).into_iter().enumerate() {
        let rgb = palette(rank);
        line(canvas, a, b, rgb);
        marker(canvas, a, l.top_a, rgb);
        marker(canvas, b, l.top_b, rgb);
    }
}

/// Per-pixel winning match and its normalized relevance. Each heatmap is
/// normalized by its own maximum; the largest normalized value wins, ties
/// going to the better-ranked match. All-zero heatmaps are skipped.
pub fn heatmap_winners(heatmaps: &[PixelRelevance]) -> Vec<Option<(usize, f64)>> {
    let Some(first) = heatmaps.first() else {
        return Vec::new();
    };
    let n = first.width() * first.height();
    let mut winners: Vec<Option<(usize, f64)>> = vec![None; n];
    for (rank, h) in heatmaps.iter().enumerate() {
        let values = h.heatmap();
        let max = values.iter().copied().fold(0.0f64, f64::max);
        if !(max > 0.0) {
            log::warn!("match {} has an all-zero heatmap; skipped", h.match_id);
            continue;
        }
        for (w, v) in winners.iter_mut().zip(values) {
            let v = (v / max).clamp(0.0, 1.0);
            if v > 0.0 && w.is_none_or(|(_, best)| v > best) {
                *w = Some((rank, v));
            }
        }
    }
    winners
}

fn tint(canvas: &mut ExplanationCanvas, panel: Rect, heatmaps: &[PixelRelevance]) {
    for (idx, winner) in winners_for_panel(heatmaps, panel).into_iter().enumerate() {
        let Some((rank, v)) = winner else { continue };
        let (x, y) = (panel.x + idx % panel.width, panel.y + idx / panel.width);
        let base = canvas.pixel(x, y);
        let color = palette(rank);
        let a = ALPHA * v;
        let mixed = [0, 1, 2].map(|c| {
            (base[c] as f64 * (1.0 - a) + color[c] as f64 * a).round().clamp(0.0, 255.0) as u8
        });
        canvas.put(x, y, mixed);
    }
}

fn winners_for_panel(heatmaps: &[PixelRelevance], panel: Rect) -> Vec<Option<(usize, f64)>> {
    if heatmaps
        .iter()
        .any(|h| (h.width(), h.height()) != (panel.width, panel.height))
    {
        log::warn!("heatmap extents differ from the panel; heatmaps skipped");
        return Vec::new();
    }
    heatmap_winners(heatmaps)
}

/// Tints the bottom panels; `heatmaps_a[k]` and `heatmaps_b[k]` belong to the
/// match of rank `k`.
pub fn draw_heatmaps(canvas: &mut ExplanationCanvas, heatmaps_a: &[PixelRelevance], heatmaps_b: &[PixelRelevance]) {
    let l = canvas.layout;
    tint(canvas, l.bottom_a, heatmaps_a);
    tint(canvas, l.bottom_b, heatmaps_b);
}
