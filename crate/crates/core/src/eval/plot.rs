//! Minimal raster plots written as PNG: bar charts, line charts and
//! attention heatmaps.

use std::fs;
use std::io::BufWriter;
use std::path::Path;

use font8x8::{UnicodeFonts, BASIC_FONTS};

use crate::error::{Error, Result};

pub type Rgb = [u8; 3];

pub const WHITE: Rgb = [255, 255, 255];
pub const BLACK: Rgb = [0, 0, 0];
pub const GREY: Rgb = [190, 190, 190];
pub const RED: Rgb = [220, 40, 40];
pub const BLUE: Rgb = [40, 90, 200];
pub const PALETTE: [Rgb; 4] = [BLUE, RED, [40, 160, 70], [230, 150, 20]];

/// RGB raster with the origin at the top left.
pub struct Canvas {
    pub width: usize,
    pub height: usize,
    pixels: Vec<u8>,
}

impl Canvas {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height, pixels: vec![255; width * height * 3] }
    }

    pub fn set(&mut self, x: i64, y: i64, c: Rgb) {
        if x >= 0 && y >= 0 && (x as usize) < self.width && (y as usize) < self.height {
            let i = 3 * (y as usize * self.width + x as usize);
            self.pixels[i..i + 3].copy_from_slice(&c);
        }
    }

    pub fn get(&self, x: usize, y: usize) -> Rgb {
        let i = 3 * (y * self.width + x);
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn fill_rect(&mut self, x0: i64, y0: i64, x1: i64, y1: i64, c: Rgb) {
        for y in y0.min(y1)..y0.max(y1) {
            for x in x0.min(x1)..x0.max(x1) {
                self.set(x, y, c);
            }
        }
    }

    /// Bresenham line, endpoints included.
    pub fn line(&mut self, mut x0: i64, mut y0: i64, x1: i64, y1: i64, c: Rgb) {
        let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
        let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
        let mut err = dx + dy;
        loop {
            self.set(x0, y0, c);
            if x0 == x1 && y0 == y1 {
                break;
            }
            let e2 = 2 * err;
            if e2 >= dy {
                err += dy;
                x0 += sx;
            }
            if e2 <= dx {
                err += dx;
                y0 += sy;
            }
        }
    }

    /// 8x8 bitmap text; unknown characters render as blanks.
    pub fn text(&mut self, x: i64, y: i64, s: &str, c: Rgb) {
        for (i, ch) in s.chars().enumerate() {
            if let Some(glyph) = BASIC_FONTS.get(ch) {
                for (row, bits) in glyph.iter().enumerate() {
                    for col in 0..8 {
                        if bits >> col & 1 == 1 {
                            self.set(x + 8 * i as i64 + col, y + row as i64, c);
                        }
                    }
                }
            }
        }
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        let w = BufWriter::new(fs::File::create(path)?);
        let mut enc = png::Encoder::new(w, self.width as u32, self.height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let png_err = |e: png::EncodingError| Error::Io(std::io::Error::other(e));
        let mut writer = enc.write_header().map_err(png_err)?;
        writer.write_image_data(&self.pixels).map_err(png_err)?;
        writer.finish().map_err(png_err)
    }
}

const MARGIN_L: i64 = 64;
const MARGIN_R: i64 = 16;
const MARGIN_T: i64 = 16;
const MARGIN_B: i64 = 32;

/// Value-to-pixel map for the y axis, with 0 always in range.
struct YScale {
    lo: f64,
    hi: f64,
    top: i64,
    bottom: i64,
}

impl YScale {
    fn new(values: impl Iterator<Item = f64>, top: i64, bottom: i64) -> Self {
        let (mut lo, mut hi) = values.filter(|v| v.is_finite()).fold((0.0f64, 0.0f64), |(a, b), v| (a.min(v), b.max(v)));
        if hi - lo < 1e-9 {
            hi += 1.0;
            lo -= if lo < 0.0 { 1.0 } else { 0.0 };
        }
        let pad = 0.05 * (hi - lo);
        Self { lo: lo - if lo < 0.0 { pad } else { 0.0 }, hi: hi + pad, top, bottom }
    }

    fn px(&self, v: f64) -> i64 {
        let f = (v - self.lo) / (self.hi - self.lo);
        self.bottom - (f * (self.bottom - self.top) as f64).round() as i64
    }

    fn draw_axis(&self, c: &mut Canvas, x: i64, x_end: i64) {
        c.line(x, self.top, x, self.bottom, BLACK);
        for v in [self.lo, 0.0, self.hi] {
            let y = self.px(v);
            c.line(x - 3, y, x, y, BLACK);
            c.text(2, y - 4, &format!("{v:>7.1}"), BLACK);
        }
        let y0 = self.px(0.0);
        c.line(x, y0, x_end, y0, GREY);
    }
}

/// One bar per labelled value; missing values leave a gap marked `x`.
pub fn bar_chart(path: &Path, bars: &[(String, Option<f64>)]) -> Result<()> {
    let slot = 72i64;
    let width = (MARGIN_L + MARGIN_R + slot * bars.len().max(1) as i64) as usize;
    let height = 240usize;
    let mut c = Canvas::new(width, height);
    let ys = YScale::new(bars.iter().filter_map(|b| b.1), MARGIN_T, height as i64 - MARGIN_B);
    ys.draw_axis(&mut c, MARGIN_L, width as i64 - MARGIN_R);
    for (i, (label, v)) in bars.iter().enumerate() {
        let x = MARGIN_L + slot * i as i64;
        match v {
            Some(v) if v.is_finite() => c.fill_rect(x + 12, ys.px(0.0), x + slot - 12, ys.px(*v), BLUE),
            _ => c.text(x + slot / 2 - 4, ys.px(0.0) - 12, "x", RED),
        }
        let label: String = label.chars().take(8).collect();
        c.text(x + (slot - 8 * label.len() as i64) / 2, height as i64 - MARGIN_B + 10, &label, BLACK);
    }
    c.save_png(path)
}

/// Polylines of `(x, y)` points sharing one frame.
pub fn line_chart(path: &Path, series: &[(String, Vec<(f64, f64)>)]) -> Result<()> {
    let (width, height) = (640usize, 320usize);
    let mut c = Canvas::new(width, height);
    let pts = || series.iter().flat_map(|s| s.1.iter().copied()).filter(|p| p.0.is_finite() && p.1.is_finite());
    let ys = YScale::new(pts().map(|p| p.1), MARGIN_T, height as i64 - MARGIN_B);
    let (x_lo, x_hi) = pts().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| (a.min(p.0), b.max(p.0)));
    let x_right = width as i64 - MARGIN_R;
    ys.draw_axis(&mut c, MARGIN_L, x_right);
    let xs = |x: f64| {
        let span = if x_hi > x_lo { x_hi - x_lo } else { 1.0 };
        MARGIN_L + ((x - x_lo) / span * (x_right - MARGIN_L) as f64).round() as i64
    };
    if x_lo.is_finite() {
        c.text(MARGIN_L, height as i64 - MARGIN_B + 10, &format!("{x_lo}"), BLACK);
        let s = format!("{x_hi}");
        c.text(x_right - 8 * s.len() as i64, height as i64 - MARGIN_B + 10, &s, BLACK);
    }
    for (k, (name, points)) in series.iter().enumerate() {
        let col = PALETTE[k % PALETTE.len()];
        let pts: Vec<(i64, i64)> = points.iter().filter(|p| p.0.is_finite() && p.1.is_finite()).map(|p| (xs(p.0), ys.px(p.1))).collect();
        for w in pts.windows(2) {
            c.line(w[0].0, w[0].1, w[1].0, w[1].1, col);
        }
        if let [p] = pts.as_slice() {
            c.fill_rect(p.0 - 1, p.1 - 1, p.0 + 2, p.1 + 2, col);
        }
        c.text(x_right - 8 * name.len() as i64 - 4, MARGIN_T + 10 * k as i64, name, col);
    }
    c.save_png(path)
}

/// Square `n x n` row-major matrix as a heatmap (white = 0, dark = max),
/// with red rules at each index in `marks` on both axes. Each cell is
/// `scale` pixels.
pub fn heatmap(path: &Path, data: &[f64], n: usize, marks: &[usize], scale: usize) -> Result<()> {
    if data.len() != n * n || n == 0 {
        return Err(Error::shape(format!("heatmap needs {n}x{n} values, got {}", data.len())));
    }
    let s = scale.max(1);
    let mut c = Canvas::new(n * s, n * s);
    let max = data.iter().copied().filter(|v| v.is_finite()).fold(0.0f64, f64::max);
    for r in 0..n {
        for q in 0..n {
            let v = if max > 0.0 { (data[r * n + q] / max).clamp(0.0, 1.0) } else { 0.0 };
            // sqrt stretch keeps weak structure visible
            let g = (255.0 * (1.0 - v.sqrt())).round() as u8;
            let col = [g, g, 255u8.saturating_sub((v * 40.0) as u8)];
            c.fill_rect((q * s) as i64, (r * s) as i64, ((q + 1) * s) as i64, ((r + 1) * s) as i64, col);
        }
    }
    let end = (n * s) as i64;
    for &m in marks.iter().filter(|&&m| m > 0 && m < n) {
        let p = (m * s) as i64;
        c.line(p, 0, p, end - 1, RED);
        c.line(0, p, end - 1, p, RED);
    }
    c.save_png(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn read_png(path: &Path) -> (u32, u32) {
        let dec = png::Decoder::new(fs::File::open(path).unwrap());
        let reader = dec.read_info().unwrap();
        let info = reader.info();
        (info.width, info.height)
    }

    #[test]
    fn charts_render() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bars.png");
        bar_chart(&p, &[("0.25".into(), Some(3.0)), ("0.5".into(), Some(-1.0)), ("1.0".into(), None)]).unwrap();
        assert_eq!(read_png(&p), (64 + 16 + 3 * 72, 240));
        let p = dir.path().join("lines.png");
        line_chart(&p, &[("loss".into(), vec![(0.0, 1.0), (1.0, -2.0), (2.0, f64::NAN)])]).unwrap();
        assert_eq!(read_png(&p), (640, 320));
    }

    #[test]
    fn heatmap_marks_boundaries() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("h.png");
        let n = 6;
        let data = vec![1.0 / n as f64; n * n];
        heatmap(&p, &data, n, &[2], 3).unwrap();
        assert_eq!(read_png(&p), (18, 18));
        assert!(heatmap(&p, &data[1..], n, &[], 1).is_err());
    }

    #[test]
    fn canvas_primitives() {
        let mut c = Canvas::new(10, 10);
        c.line(0, 0, 9, 9, RED);
        assert_eq!(c.get(5, 5), RED);
        c.set(-1, 20, BLACK);
        c.text(0, 0, "1", BLACK);
        assert!((0..8).any(|y| (0..8).any(|x| c.get(x, y) == BLACK)));
    }
}
