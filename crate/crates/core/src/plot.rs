//! Figure rendering for evaluation reports: log-log energy spectra, vorticity
//! distribution curves, and field/error heatmaps, written as PNGs.
//!
//! Everything is drawn onto an in-memory RGB canvas with a built-in 5x7
//! bitmap font, so rendering is fully deterministic (identical reports
//! produce byte-identical images) and needs no display or font files.

use std::path::{Path, PathBuf};

use image::{ImageBuffer, Rgb};

use crate::error::{Error, Result};
use crate::evaluation::EvalReport;

// ---------------------------------------------------------------------------
// 5x7 bitmap font. Each glyph is 7 rows; the low 5 bits of each row are the
// pixels, most significant bit leftmost. Lowercase renders as uppercase.
// ---------------------------------------------------------------------------

const GLYPH_W: usize = 5;
/// Horizontal advance per character (glyph plus one pixel of spacing).
const ADVANCE: usize = GLYPH_W + 1;

fn glyph(c: char) -> [u8; 7] {
    let c = c.to_ascii_uppercase();
    match c {
        'A' => [0x0E, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11],
        'B' => [0x1E, 0x11, 0x11, 0x1E, 0x11, 0x11, 0x1E],
        'C' => [0x0E, 0x11, 0x10, 0x10, 0x10, 0x11, 0x0E],
        'D' => [0x1E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x1E],
        'E' => [0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x1F],
        'F' => [0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x10],
        'G' => [0x0E, 0x11, 0x10, 0x17, 0x11, 0x11, 0x0F],
        'H' => [0x11, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11],
        'I' => [0x0E, 0x04, 0x04, 0x04, 0x04, 0x04, 0x0E],
        'J' => [0x07, 0x02, 0x02, 0x02, 0x02, 0x12, 0x0C],
        'K' => [0x11, 0x12, 0x14, 0x18, 0x14, 0x12, 0x11],
        'L' => [0x10, 0x10, 0x10, 0x10, 0x10, 0x10, 0x1F],
        'M' => [0x11, 0x1B, 0x15, 0x15, 0x11, 0x11, 0x11],
        'N' => [0x11, 0x11, 0x19, 0x15, 0x13, 0x11, 0x11],
        'O' => [0x0E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E],
        'P' => [0x1E, 0x11, 0x11, 0x1E, 0x10, 0x10, 0x10],
        'Q' => [0x0E, 0x11, 0x11, 0x11, 0x15, 0x12, 0x0D],
        'R' => [0x1E, 0x11, 0x11, 0x1E, 0x14, 0x12, 0x11],
        'S' => [0x0F, 0x10, 0x10, 0x0E, 0x01, 0x01, 0x1E],
        'T' => [0x1F, 0x04, 0x04, 0x04, 0x04, 0x04, 0x04],
        'U' => [0x11, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E],
        'V' => [0x11, 0x11, 0x11, 0x11, 0x11, 0x0A, 0x04],
        'W' => [0x11, 0x11, 0x11, 0x15, 0x15, 0x15, 0x0A],
        'X' => [0x11, 0x11, 0x0A, 0x04, 0x0A, 0x11, 0x11],
        'Y' => [0x11, 0x11, 0x11, 0x0A, 0x04, 0x04, 0x04],
        'Z' => [0x1F, 0x01, 0x02, 0x04, 0x08, 0x10, 0x1F],
        '0' => [0x0E, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0E],
        '1' => [0x04, 0x0C, 0x04, 0x04, 0x04, 0x04, 0x0E],
        '2' => [0x0E, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1F],
        '3' => [0x1F, 0x02, 0x04, 0x02, 0x01, 0x11, 0x0E],
        '4' => [0x02, 0x06, 0x0A, 0x12, 0x1F, 0x02, 0x02],
        '5' => [0x1F, 0x10, 0x1E, 0x01, 0x01, 0x11, 0x0E],
        '6' => [0x06, 0x08, 0x10, 0x1E, 0x11, 0x11, 0x0E],
        '7' => [0x1F, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08],
        '8' => [0x0E, 0x11, 0x11, 0x0E, 0x11, 0x11, 0x0E],
        '9' => [0x0E, 0x11, 0x11, 0x0F, 0x01, 0x02, 0x0C],
        '.' => [0x00, 0x00, 0x00, 0x00, 0x00, 0x0C, 0x0C],
        ',' => [0x00, 0x00, 0x00, 0x00, 0x0C, 0x04, 0x08],
        '-' => [0x00, 0x00, 0x00, 0x1F, 0x00, 0x00, 0x00],
        '+' => [0x00, 0x04, 0x04, 0x1F, 0x04, 0x04, 0x00],
        ':' => [0x00, 0x0C, 0x0C, 0x00, 0x0C, 0x0C, 0x00],
        '(' => [0x02, 0x04, 0x08, 0x08, 0x08, 0x04, 0x02],
        ')' => [0x08, 0x04, 0x02, 0x02, 0x02, 0x04, 0x08],
        '/' => [0x01, 0x01, 0x02, 0x04, 0x08, 0x10, 0x10],
        '=' => [0x00, 0x1F, 0x00, 0x1F, 0x00, 0x00, 0x00],
        '_' => [0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x1F],
        '|' => [0x04, 0x04, 0x04, 0x04, 0x04, 0x04, 0x04],
        ' ' => [0x00; 7],
        // Unknown characters render as a hollow box.
        _ => [0x1F, 0x11, 0x11, 0x11, 0x11, 0x11, 0x1F],
    }
}

// ---------------------------------------------------------------------------
// Canvas primitives.
// ---------------------------------------------------------------------------

type Color = [u8; 3];

const BG: Color = [255, 255, 255];
const FG: Color = [20, 20, 20];
const GRID_LINE: Color = [225, 225, 225];
const TRUTH_COLOR: Color = [20, 20, 20];

/// Curve colors assigned to models in report order.
const PALETTE: [Color; 6] = [
    [214, 39, 40],   // red
    [31, 119, 180],  // blue
    [44, 160, 44],   // green
    [255, 127, 14],  // orange
    [148, 103, 189], // purple
    [127, 127, 127], // gray
];

struct Canvas {
    w: usize,
    h: usize,
    px: Vec<u8>,
}

impl Canvas {
    fn new(w: usize, h: usize) -> Self {
        let mut px = Vec::with_capacity(w * h * 3);
        for _ in 0..w * h {
            px.extend_from_slice(&BG);
        }
        Canvas { w, h, px }
    }

    fn set(&mut self, x: i64, y: i64, c: Color) {
        if x < 0 || y < 0 || x >= self.w as i64 || y >= self.h as i64 {
            return;
        }
        let i = (y as usize * self.w + x as usize) * 3;
        self.px[i..i + 3].copy_from_slice(&c);
    }

    fn line(&mut self, x0: i64, y0: i64, x1: i64, y1: i64, c: Color) {
        // Bresenham.
        let (mut x, mut y) = (x0, y0);
        let dx = (x1 - x0).abs();
        let dy = -(y1 - y0).abs();
        let sx = if x0 < x1 { 1 } else { -1 };
        let sy = if y0 < y1 { 1 } else { -1 };
        let mut err = dx + dy;
        loop {
            self.set(x, y, c);
            if x == x1 && y == y1 {
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

    fn fill_rect(&mut self, x: i64, y: i64, w: i64, h: i64, c: Color) {
        for yy in y..y + h {
            for xx in x..x + w {
                self.set(xx, yy, c);
            }
        }
    }

    fn text(&mut self, x: i64, y: i64, s: &str, c: Color) {
        let mut cx = x;
        for ch in s.chars() {
            let rows = glyph(ch);
            for (ri, row) in rows.iter().enumerate() {
                for col in 0..GLYPH_W {
                    if row & (1 << (GLYPH_W - 1 - col)) != 0 {
                        self.set(cx + col as i64, y + ri as i64, c);
                    }
                }
            }
            cx += ADVANCE as i64;
        }
    }

    fn save(&self, path: &Path) -> Result<()> {
        let img: ImageBuffer<Rgb<u8>, Vec<u8>> =
            ImageBuffer::from_raw(self.w as u32, self.h as u32, self.px.clone())
                .expect("canvas buffer size");
        img.save(path)
            .map_err(|e| Error::Config(format!("failed to write {}: {e}", path.display())))
    }
}

fn text_width(s: &str) -> usize {
    s.chars().count() * ADVANCE
}

// ---------------------------------------------------------------------------
// Colormaps.
// ---------------------------------------------------------------------------

fn lerp(a: Color, b: Color, t: f64) -> Color {
    let t = t.clamp(0.0, 1.0);
    [
        (a[0] as f64 + (b[0] as f64 - a[0] as f64) * t).round() as u8,
        (a[1] as f64 + (b[1] as f64 - a[1] as f64) * t).round() as u8,
        (a[2] as f64 + (b[2] as f64 - a[2] as f64) * t).round() as u8,
    ]
}

/// Diverging blue-white-red map for signed fields: `v` in `[-vmax, vmax]`.
fn diverging(v: f64, vmax: f64) -> Color {
    const COOL: Color = [59, 76, 192];
    const MID: Color = [242, 242, 242];
    const WARM: Color = [180, 4, 38];
    if vmax <= 0.0 {
        return MID;
    }
    let t = (v / vmax).clamp(-1.0, 1.0);
    if t < 0.0 {
        lerp(MID, COOL, -t)
    } else {
        lerp(MID, WARM, t)
    }
}

/// Sequential white-to-red map for magnitudes: `v` in `[0, vmax]`.
fn sequential(v: f64, vmax: f64) -> Color {
    const WARM: Color = [180, 4, 38];
    if vmax <= 0.0 {
        return BG;
    }
    lerp(BG, WARM, (v / vmax).clamp(0.0, 1.0))
}

// ---------------------------------------------------------------------------
// Axis helpers.
// ---------------------------------------------------------------------------

fn fmt_num(v: f64) -> String {
    if v == 0.0 {
        return "0".to_string();
    }
    let a = v.abs();
    if (0.01..10000.0).contains(&a) {
        let s = format!("{v:.3}");
        let s = s.trim_end_matches('0').trim_end_matches('.').to_string();
        if s.is_empty() || s == "-" {
            "0".to_string()
        } else {
            s
        }
    } else {
        format!("{v:.1e}")
    }
}

struct Frame {
    left: i64,
    top: i64,
    right: i64,
    bottom: i64,
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Frame {
    fn px(&self, x: f64) -> i64 {
        let t = (x - self.x0) / (self.x1 - self.x0);
        self.left + (t * (self.right - self.left) as f64).round() as i64
    }

    fn py(&self, y: f64) -> i64 {
        let t = (y - self.y0) / (self.y1 - self.y0);
        self.bottom - (t * (self.bottom - self.top) as f64).round() as i64
    }
}

/// Evenly spaced tick positions over `[lo, hi]`.
fn linear_ticks(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    (0..count)
        .map(|i| lo + (hi - lo) * i as f64 / (count - 1) as f64)
        .collect()
}

/// Integer powers of ten inside `[lo, hi]` (log10 units in, values out).
fn decade_ticks(lo_log: f64, hi_log: f64) -> Vec<f64> {
    let mut out = Vec::new();
    let mut d = lo_log.ceil() as i64;
    while (d as f64) <= hi_log {
        out.push(d as f64);
        d += 1;
    }
    if out.is_empty() {
        out.push(lo_log);
        out.push(hi_log);
    }
    out
}

fn draw_frame(c: &mut Canvas, f: &Frame, title: &str, x_label: &str, y_label: &str) {
    c.line(f.left, f.top, f.left, f.bottom, FG);
    c.line(f.left, f.bottom, f.right, f.bottom, FG);
    c.line(f.right, f.top, f.right, f.bottom, GRID_LINE);
    c.line(f.left, f.top, f.right, f.top, GRID_LINE);
    let tx = f.left + ((f.right - f.left) - text_width(title) as i64) / 2;
    c.text(tx, f.top - 18, title, FG);
    let xx = f.left + ((f.right - f.left) - text_width(x_label) as i64) / 2;
    c.text(xx, f.bottom + 22, x_label, FG);
    // y label drawn horizontally above the axis to keep the font unrotated.
    c.text(4, f.top - 18, y_label, FG);
}

struct Series<'a> {
    name: &'a str,
    color: Color,
    /// (x, y) points, already in axis units.
    points: Vec<(f64, f64)>,
}

fn draw_legend(c: &mut Canvas, f: &Frame, series: &[Series]) {
    let mut y = f.top + 8;
    let widest = series.iter().map(|s| text_width(s.name)).max().unwrap_or(0) as i64;
    let x = f.right - widest - 30;
    for s in series {
        c.fill_rect(x, y + 1, 14, 5, s.color);
        c.text(x + 18, y, s.name, FG);
        y += 12;
    }
}

fn draw_series(c: &mut Canvas, f: &Frame, series: &[Series]) {
    for s in series {
        let mut prev: Option<(i64, i64)> = None;
        for &(x, y) in &s.points {
            let (px, py) = (f.px(x), f.py(y));
            if let Some((qx, qy)) = prev {
                c.line(qx, qy, px, py, s.color);
            }
            // A small marker so single-point series stay visible.
            c.set(px, py - 1, s.color);
            c.set(px, py + 1, s.color);
            c.set(px - 1, py, s.color);
            c.set(px + 1, py, s.color);
            prev = Some((px, py));
        }
    }
}

// ---------------------------------------------------------------------------
// The figures.
// ---------------------------------------------------------------------------

const PLOT_W: usize = 640;
const PLOT_H: usize = 480;
const MARGIN_L: i64 = 78;
const MARGIN_R: i64 = 16;
const MARGIN_T: i64 = 34;
const MARGIN_B: i64 = 46;

fn plot_frame(x0: f64, x1: f64, y0: f64, y1: f64) -> Frame {
    Frame {
        left: MARGIN_L,
        top: MARGIN_T,
        right: PLOT_W as i64 - 1 - MARGIN_R,
        bottom: PLOT_H as i64 - 1 - MARGIN_B,
        x0,
        x1,
        y0,
        y1,
    }
}

/// Log-log energy spectrum: ground truth plus every model entry.
fn spectrum_figure(report: &EvalReport, path: &Path) -> Result<()> {
    let mut series = Vec::new();
    let log_points = |values: &[f64]| -> Vec<(f64, f64)> {
        values
            .iter()
            .enumerate()
            .filter(|(_, &e)| e > 0.0)
            .map(|(i, &e)| (((i + 1) as f64).log10(), e.log10()))
            .collect()
    };
    series.push(Series {
        name: "truth",
        color: TRUTH_COLOR,
        points: log_points(&report.truth_spectrum),
    });
    for (i, (name, m)) in report.models.iter().enumerate() {
        series.push(Series {
            name,
            color: PALETTE[i % PALETTE.len()],
            points: log_points(&m.spectrum),
        });
    }

    let xs: Vec<f64> = series.iter().flat_map(|s| s.points.iter().map(|p| p.0)).collect();
    let ys: Vec<f64> = series.iter().flat_map(|s| s.points.iter().map(|p| p.1)).collect();
    let (x0, x1, y0, y1) = if ys.is_empty() {
        (0.0, 1.0, -1.0, 0.0) // all-zero spectra: draw an empty frame
    } else {
        let (mut x0, mut x1) = (f64::INFINITY, f64::NEG_INFINITY);
        let (mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY);
        for &x in &xs {
            x0 = x0.min(x);
            x1 = x1.max(x);
        }
        for &y in &ys {
            y0 = y0.min(y);
            y1 = y1.max(y);
        }
        // Cap the dynamic range at 12 decades so round-off floors do not
        // flatten the interesting part of the curve.
        y0 = y0.max(y1 - 12.0);
        if x1 - x0 < 1e-9 {
            x1 = x0 + 1.0;
        }
        if y1 - y0 < 1e-9 {
            y1 = y0 + 1.0;
        }
        (x0, x1, y0, y1)
    };

    let mut c = Canvas::new(PLOT_W, PLOT_H);
    let f = plot_frame(x0, x1, y0, y1);
    for d in decade_ticks(x0, x1) {
        let px = f.px(d);
        c.line(px, f.top, px, f.bottom, GRID_LINE);
        c.line(px, f.bottom, px, f.bottom + 3, FG);
        let label = format!("1e{}", d as i64);
        c.text(px - text_width(&label) as i64 / 2, f.bottom + 7, &label, FG);
    }
    for d in decade_ticks(y0, y1) {
        let py = f.py(d);
        c.line(f.left, py, f.right, py, GRID_LINE);
        c.line(f.left - 3, py, f.left, py, FG);
        let label = format!("1e{}", d as i64);
        c.text(f.left - 6 - text_width(&label) as i64, py - 3, &label, FG);
    }
    draw_frame(&mut c, &f, "energy spectrum", "k", "E(k)");
    draw_series(&mut c, &f, &series);
    draw_legend(&mut c, &f, &series);
    c.save(path)
}

/// Vorticity distribution curves over the report's shared bins.
fn pdf_figure(report: &EvalReport, path: &Path) -> Result<()> {
    let centers: Vec<f64> = report
        .pdf_edges
        .windows(2)
        .map(|w| 0.5 * (w[0] + w[1]))
        .collect();
    let curve = |density: &[f64]| -> Vec<(f64, f64)> {
        centers.iter().copied().zip(density.iter().copied()).collect()
    };
    let mut series = vec![Series {
        name: "truth",
        color: TRUTH_COLOR,
        points: curve(&report.truth_pdf),
    }];
    for (i, (name, m)) in report.models.iter().enumerate() {
        series.push(Series {
            name,
            color: PALETTE[i % PALETTE.len()],
            points: curve(&m.pdf_density),
        });
    }
    let x0 = report.pdf_edges[0];
    let x1 = *report.pdf_edges.last().unwrap();
    let ymax = series
        .iter()
        .flat_map(|s| s.points.iter().map(|p| p.1))
        .fold(0.0_f64, f64::max)
        .max(1e-12);

    let mut c = Canvas::new(PLOT_W, PLOT_H);
    let f = plot_frame(x0, x1, 0.0, ymax * 1.05);
    for t in linear_ticks(x0, x1, 5) {
        let px = f.px(t);
        c.line(px, f.bottom, px, f.bottom + 3, FG);
        let label = fmt_num(t);
        c.text(px - text_width(&label) as i64 / 2, f.bottom + 7, &label, FG);
    }
    for t in linear_ticks(0.0, ymax * 1.05, 5) {
        let py = f.py(t);
        c.line(f.left - 3, py, f.left, py, FG);
        let label = fmt_num(t);
        c.text(f.left - 6 - text_width(&label) as i64, py - 3, &label, FG);
    }
    draw_frame(&mut c, &f, "vorticity distribution", "vorticity", "density");
    draw_series(&mut c, &f, &series);
    draw_legend(&mut c, &f, &series);
    c.save(path)
}

/// Upscale factor aiming for roughly 256-pixel heatmaps.
fn upscale_of(n: usize) -> usize {
    (256 / n).max(1)
}

/// One field rendered with the shared symmetric color scale plus a title.
fn heatmap_figure(
    values: &[f64],
    n: usize,
    vmax: f64,
    title: &str,
    diverging_map: bool,
    path: &Path,
) -> Result<()> {
    let s = upscale_of(n);
    let w = n * s;
    let header = 18;
    let mut c = Canvas::new(w, w + header);
    c.text(2, 5, title, FG);
    for i in 0..n {
        for j in 0..n {
            let v = values[i * n + j];
            let color = if diverging_map {
                diverging(v, vmax)
            } else {
                sequential(v, vmax)
            };
            c.fill_rect(
                (j * s) as i64,
                (header + i * s) as i64,
                s as i64,
                s as i64,
                color,
            );
        }
    }
    c.save(path)
}

fn sanitize(name: &str) -> String {
    name.chars()
        .map(|ch| if ch.is_ascii_alphanumeric() { ch } else { '_' })
        .collect()
}

/// Render every figure for a report into `out_dir` (created if missing):
/// `spectrum.png`, `vorticity_pdf.png`, heatmaps of the example frame
/// (truth, occluded input, one composite per model), and per-model
/// absolute-error heatmaps. Returns the paths written.
pub fn render_report(report: &EvalReport, out_dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut written = Vec::new();
    let mut emit = |p: PathBuf| written.push(p);

    let spectrum = out_dir.join("spectrum.png");
    spectrum_figure(report, &spectrum)?;
    emit(spectrum);
    let pdf = out_dir.join("vorticity_pdf.png");
    pdf_figure(report, &pdf)?;
    emit(pdf);

    let n = report.grid;
    // One symmetric color scale across truth, input, and all composites.
    let mut vmax = 0.0_f64;
    for v in report
        .example_truth
        .iter()
        .chain(&report.example_masked)
        .chain(report.models.values().flat_map(|m| &m.example_composite))
    {
        vmax = vmax.max(v.abs());
    }
    let truth_png = out_dir.join("example_truth.png");
    heatmap_figure(
        &report.example_truth,
        n,
        vmax,
        &format!("truth (frame {})", report.example_frame),
        true,
        &truth_png,
    )?;
    emit(truth_png);
    let masked_png = out_dir.join("example_masked.png");
    heatmap_figure(&report.example_masked, n, vmax, "masked input", true, &masked_png)?;
    emit(masked_png);

    let errors: Vec<(String, Vec<f64>)> = report
        .models
        .iter()
        .map(|(name, m)| {
            let e: Vec<f64> = m
                .example_composite
                .iter()
                .zip(&report.example_truth)
                .map(|(p, t)| (p - t).abs())
                .collect();
            (name.clone(), e)
        })
        .collect();
    let emax = errors
        .iter()
        .flat_map(|(_, e)| e.iter().copied())
        .fold(0.0_f64, f64::max);

    for (name, m) in &report.models {
        let file = out_dir.join(format!("example_{}.png", sanitize(name)));
        heatmap_figure(
            &m.example_composite,
            n,
            vmax,
            &format!("{name} (rel l2 {})", fmt_num(m.rel_l2_mean)),
            true,
            &file,
        )?;
        emit(file);
    }
    for (name, e) in &errors {
        let file = out_dir.join(format!("error_{}.png", sanitize(name)));
        heatmap_figure(e, n, emax, &format!("|{name} - truth|"), false, &file)?;
        emit(file);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masking::MaskConfig;
    use std::collections::BTreeMap;

    fn tiny_report() -> EvalReport {
        let n = 8;
        let hw = n * n;
        let truth: Vec<f64> = (0..hw).map(|i| ((i * 13) % 17) as f64 / 8.5 - 1.0).collect();
        let masked: Vec<f64> = truth
            .iter()
            .enumerate()
            .map(|(i, &v)| if (16..32).contains(&i) { 0.0 } else { v })
            .collect();
        let mk_model = |bias: f64| crate::evaluation::ModelEval {
            rel_l2_per_frame: vec![0.5 + bias, 0.6 + bias],
            rel_l2_mean: 0.55 + bias,
            rel_l2_std: 0.05,
            spectrum: vec![1e-2, 3e-3, 0.0, 1e-5],
            pdf_density: vec![0.0, 0.1, 0.4, 0.1, 0.0],
            example_composite: truth.iter().map(|v| v * (1.0 - bias)).collect(),
        };
        let mut models = BTreeMap::new();
        models.insert("model".to_string(), mk_model(0.0));
        models.insert("zerofill".to_string(), mk_model(0.3));
        EvalReport {
            mask: MaskConfig::single(4),
            grid: n,
            test_frames: vec![10, 11],
            spectrum_bins: 4,
            pdf_edges: (0..=5).map(|i| -2.5 + i as f64).collect(),
            truth_spectrum: vec![1.2e-2, 2.9e-3, 0.0, 0.9e-5],
            truth_pdf: vec![0.05, 0.15, 0.35, 0.15, 0.05],
            example_frame: 10,
            example_truth: truth,
            example_masked: masked,
            models,
        }
    }

    #[test]
    fn colormap_endpoints_and_midpoint() {
        let zero = diverging(0.0, 1.0);
        assert_eq!(zero, [242, 242, 242]);
        let hot = diverging(1.0, 1.0);
        assert!(hot[0] > hot[2], "positive values lean red: {hot:?}");
        let cold = diverging(-1.0, 1.0);
        assert!(cold[2] > cold[0], "negative values lean blue: {cold:?}");
        // Saturation beyond vmax clamps instead of wrapping.
        assert_eq!(diverging(5.0, 1.0), hot);
        // Degenerate scale renders the midpoint.
        assert_eq!(diverging(3.0, 0.0), zero);
        assert_eq!(sequential(0.0, 1.0), BG);
        let emax = sequential(1.0, 1.0);
        assert!(emax[0] > emax[1] && emax[0] > emax[2]);
    }

    #[test]
    fn text_rendering_marks_pixels_and_respects_advance() {
        let mut c = Canvas::new(100, 20);
        let before = c.px.clone();
        c.text(2, 2, "E(k) = 1e-3", FG);
        assert_ne!(c.px, before);
        assert_eq!(text_width("abc"), 18);
        // Out-of-bounds drawing is clipped, not panicking.
        c.text(95, 15, "overflow", FG);
        c.line(-50, -50, 300, 300, FG);
    }

    #[test]
    fn render_report_writes_decodable_deterministic_figures() {
        let report = tiny_report();
        let tmp = tempfile::tempdir().unwrap();
        let d1 = tmp.path().join("a");
        let files = render_report(&report, &d1).unwrap();
        // 2 curve figures + truth + masked + 2 composites + 2 error maps.
        assert_eq!(files.len(), 8);
        for f in &files {
            assert!(f.exists(), "{} missing", f.display());
            let img = image::open(f).unwrap().to_rgb8();
            assert!(img.width() >= 8 && img.height() >= 8);
        }
        let named: Vec<String> = files
            .iter()
            .map(|f| f.file_name().unwrap().to_string_lossy().into_owned())
            .collect();
        assert!(named.contains(&"spectrum.png".to_string()));
        assert!(named.contains(&"vorticity_pdf.png".to_string()));
        assert!(named.contains(&"example_zerofill.png".to_string()));
        assert!(named.contains(&"error_model.png".to_string()));
        // Determinism: a second render is byte-identical.
        let d2 = tmp.path().join("b");
        let files2 = render_report(&report, &d2).unwrap();
        for (a, b) in files.iter().zip(&files2) {
            assert_eq!(
                std::fs::read(a).unwrap(),
                std::fs::read(b).unwrap(),
                "{} differs",
                a.display()
            );
        }
    }

    #[test]
    fn degenerate_reports_still_render() {
        // All-zero spectra (log plot has no points) and flat distributions.
        let mut report = tiny_report();
        report.truth_spectrum = vec![0.0; 4];
        for m in report.models.values_mut() {
            m.spectrum = vec![0.0; 4];
            m.pdf_density = vec![0.0; 5];
        }
        report.truth_pdf = vec![0.0; 5];
        let tmp = tempfile::tempdir().unwrap();
        let files = render_report(&report, tmp.path()).unwrap();
        assert_eq!(files.len(), 8);
    }

    #[test]
    fn heatmaps_scale_with_grid_size() {
        let report = tiny_report(); // grid 8 -> 32x upscale to 256 wide
        let tmp = tempfile::tempdir().unwrap();
        let files = render_report(&report, tmp.path()).unwrap();
        let truth = files
            .iter()
            .find(|f| f.file_name().unwrap() == "example_truth.png")
            .unwrap();
        let img = image::open(truth).unwrap().to_rgb8();
        assert_eq!(img.width(), 256);
        assert_eq!(img.height(), 256 + 18);
    }
}
