//! Minimal self-contained SVG charts. Every coordinate is printed with a
//! fixed number of decimals so identical data gives identical files.

use std::fmt::Write;

pub const BLUE: &str = "#1f77b4";
pub const RED: &str = "#d62728";
pub const GREY: &str = "#7f7f7f";

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 420.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 20.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 60.0;

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

struct Canvas {
    out: String,
    width: f64,
    height: f64,
}

impl Canvas {
    fn new(width: f64, height: f64, title: &str) -> Self {
        let mut out = String::new();
        let _ = write!(
            out,
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width:.0}\" height=\"{height:.0}\" \
             viewBox=\"0 0 {width:.0} {height:.0}\" font-family=\"sans-serif\" font-size=\"11\">\n\
             <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
        );
        let mut c = Self { out, width, height };
        c.text(width / 2.0, 22.0, title, "middle", 14.0);
        c
    }

    fn rect(&mut self, x: f64, y: f64, w: f64, h: f64, fill: &str) {
        let _ = writeln!(
            self.out,
            "<rect x=\"{x:.2}\" y=\"{y:.2}\" width=\"{:.2}\" height=\"{:.2}\" fill=\"{fill}\"/>",
            w.max(0.0),
            h.max(0.0)
        );
    }

    fn line(&mut self, x1: f64, y1: f64, x2: f64, y2: f64, stroke: &str) {
        let _ = writeln!(
            self.out,
            "<line x1=\"{x1:.2}\" y1=\"{y1:.2}\" x2=\"{x2:.2}\" y2=\"{y2:.2}\" stroke=\"{stroke}\" stroke-width=\"1\"/>"
        );
    }

    fn circle(&mut self, x: f64, y: f64, r: f64, fill: &str, stroke: Option<&str>) {
        let stroke = stroke.map_or(String::new(), |s| format!(" stroke=\"{s}\" stroke-width=\"1.5\""));
        let _ = writeln!(
            self.out,
            "<circle cx=\"{x:.2}\" cy=\"{y:.2}\" r=\"{r:.2}\" fill=\"{fill}\" fill-opacity=\"0.8\"{stroke}/>"
        );
    }

    fn text(&mut self, x: f64, y: f64, s: &str, anchor: &str, size: f64) {
        let _ = writeln!(
            self.out,
            "<text x=\"{x:.2}\" y=\"{y:.2}\" text-anchor=\"{anchor}\" font-size=\"{size:.0}\">{}</text>",
            esc(s)
        );
    }

    fn vtext(&mut self, x: f64, y: f64, s: &str) {
        let _ = writeln!(
            self.out,
            "<text x=\"{x:.2}\" y=\"{y:.2}\" text-anchor=\"middle\" transform=\"rotate(-90 {x:.2} {y:.2})\">{}</text>",
            esc(s)
        );
    }

    fn finish(mut self) -> String {
        self.out.push_str("</svg>\n");
        self.out
    }
}

/// Linear map from data range to pixel range.
#[derive(Clone, Copy)]
struct Scale {
    d0: f64,
    d1: f64,
    p0: f64,
    p1: f64,
}

impl Scale {
    fn new(lo: f64, hi: f64, p0: f64, p1: f64) -> Self {
        let (lo, hi) = if hi > lo {
            let pad = 0.05 * (hi - lo);
            (lo - pad, hi + pad)
        } else {
            (lo - 0.5, hi + 0.5)
        };
        Self { d0: lo, d1: hi, p0, p1 }
    }

    fn map(&self, v: f64) -> f64 {
        self.p0 + (v - self.d0) / (self.d1 - self.d0) * (self.p1 - self.p0)
    }
}

fn finite_range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if lo.is_finite() {
        (lo, hi)
    } else {
        (0.0, 1.0)
    }
}

fn y_axis(c: &mut Canvas, ys: &Scale, label: &str) {
    let (bottom, top) = (c.height - BOTTOM, TOP);
    c.line(LEFT, top, LEFT, bottom, "black");
    for i in 0..=4 {
        let v = ys.d0 + (ys.d1 - ys.d0) * i as f64 / 4.0;
        let y = ys.map(v);
        c.line(LEFT - 4.0, y, LEFT, y, "black");
        c.text(LEFT - 6.0, y + 4.0, &format!("{v:.3}"), "end", 10.0);
    }
    c.vtext(16.0, (top + bottom) / 2.0, label);
}

fn x_axis(c: &mut Canvas, xs: &Scale, label: &str) {
    let y = c.height - BOTTOM;
    c.line(LEFT, y, c.width - RIGHT, y, "black");
    for i in 0..=4 {
        let v = xs.d0 + (xs.d1 - xs.d0) * i as f64 / 4.0;
        let x = xs.map(v);
        c.line(x, y, x, y + 4.0, "black");
        c.text(x, y + 16.0, &format!("{v:.3}"), "middle", 10.0);
    }
    c.text((LEFT + c.width - RIGHT) / 2.0, c.height - 18.0, label, "middle", 12.0);
}

/// Vertical bars with one color per bar.
pub fn bar_chart(title: &str, y_label: &str, bars: &[(String, f64, &str)]) -> String {
    let mut c = Canvas::new(WIDTH, HEIGHT, title);
    let (lo, hi) = finite_range(bars.iter().map(|b| b.1).chain([0.0]));
    let ys = Scale::new(lo, hi, HEIGHT - BOTTOM, TOP);
    y_axis(&mut c, &ys, y_label);
    let slot = (WIDTH - LEFT - RIGHT) / bars.len().max(1) as f64;
    let zero = ys.map(0.0);
    for (i, (label, v, color)) in bars.iter().enumerate() {
        let x = LEFT + slot * i as f64 + 0.1 * slot;
        let y = ys.map(*v);
        c.rect(x, y.min(zero), 0.8 * slot, (y - zero).abs(), color);
        let cx = x + 0.4 * slot;
        let cy = HEIGHT - BOTTOM + 12.0;
        let _ = writeln!(
            c.out,
            "<text x=\"{cx:.2}\" y=\"{cy:.2}\" text-anchor=\"end\" font-size=\"8\" transform=\"rotate(-60 {cx:.2} {cy:.2})\">{}</text>",
            esc(label)
        );
    }
    c.line(LEFT, zero, WIDTH - RIGHT, zero, GREY);
    c.finish()
}

/// Five-number summaries: `[min, q1, median, q3, max]`.
pub fn box_plot(title: &str, y_label: &str, boxes: &[(String, [f64; 5])]) -> String {
    let mut c = Canvas::new(WIDTH, HEIGHT, title);
    let (lo, hi) = finite_range(boxes.iter().flat_map(|b| b.1));
    let ys = Scale::new(lo, hi, HEIGHT - BOTTOM, TOP);
    y_axis(&mut c, &ys, y_label);
    let slot = (WIDTH - LEFT - RIGHT) / boxes.len().max(1) as f64;
    for (i, (label, [mn, q1, med, q3, mx])) in boxes.iter().enumerate() {
        let cx = LEFT + slot * (i as f64 + 0.5);
        let half = 0.3 * slot;
        c.line(cx, ys.map(*mn), cx, ys.map(*q1), "black");
        c.line(cx, ys.map(*q3), cx, ys.map(*mx), "black");
        c.line(cx - half / 2.0, ys.map(*mn), cx + half / 2.0, ys.map(*mn), "black");
        c.line(cx - half / 2.0, ys.map(*mx), cx + half / 2.0, ys.map(*mx), "black");
        c.rect(cx - half, ys.map(*q3), 2.0 * half, ys.map(*q1) - ys.map(*q3), BLUE);
        c.line(cx - half, ys.map(*med), cx + half, ys.map(*med), "white");
        c.text(cx, HEIGHT - BOTTOM + 16.0, label, "middle", 10.0);
    }
    c.finish()
}

/// Blue for -1, white for 0, red for +1.
pub fn diverging(v: f64) -> String {
    let v = v.clamp(-1.0, 1.0);
    let (r, g, b) = if v >= 0.0 {
        (255.0, 255.0 * (1.0 - v), 255.0 * (1.0 - v))
    } else {
        (255.0 * (1.0 + v), 255.0 * (1.0 + v), 255.0)
    };
    format!("#{:02x}{:02x}{:02x}", r.round() as u8, g.round() as u8, b.round() as u8)
}

/// Dark (0) to red (1) for returns.
pub fn sequential(v: f64) -> String {
    let v = if v.is_finite() { v.clamp(0.0, 1.0) } else { 0.0 };
    let (r, g, b) = (40.0 + 200.0 * v, 30.0 + 10.0 * v, 50.0 - 10.0 * v);
    format!("#{:02x}{:02x}{:02x}", r.round() as u8, g.round() as u8, b.round() as u8)
}

/// One horizontal strip per row; `None` cells are left blank.
pub fn heat_strips(title: &str, rows: &[(String, Vec<Option<f64>>)]) -> String {
    let row_h = 22.0;
    let label_w = 150.0;
    let height = TOP + row_h * rows.len() as f64 + 30.0;
    let width = 900.0;
    let mut c = Canvas::new(width, height, title);
    let units = rows.iter().map(|r| r.1.len()).max().unwrap_or(1).max(1);
    let cell = (width - label_w - RIGHT) / units as f64;
    for (i, (label, values)) in rows.iter().enumerate() {
        let y = TOP + row_h * i as f64;
        c.text(label_w - 6.0, y + row_h * 0.65, label, "end", 10.0);
        for (u, v) in values.iter().enumerate() {
            if let Some(v) = v {
                c.rect(label_w + cell * u as f64, y, cell + 0.05, row_h - 2.0, &diverging(*v));
            }
        }
    }
    c.text(label_w, height - 10.0, "unit 0", "start", 10.0);
    c.text(width - RIGHT, height - 10.0, &format!("unit {}", units - 1), "end", 10.0);
    c.finish()
}

pub struct ScatterPoint {
    pub x: f64,
    pub y: f64,
    pub fill: String,
    /// Drawn larger with a black outline.
    pub highlight: bool,
}

pub fn scatter(title: &str, x_label: &str, y_label: &str, points: &[ScatterPoint]) -> String {
    let mut c = Canvas::new(WIDTH, HEIGHT, title);
    let (xl, xh) = finite_range(points.iter().map(|p| p.x));
    let (yl, yh) = finite_range(points.iter().map(|p| p.y));
    let xs = Scale::new(xl, xh, LEFT, WIDTH - RIGHT);
    let ys = Scale::new(yl, yh, HEIGHT - BOTTOM, TOP);
    x_axis(&mut c, &xs, x_label);
    y_axis(&mut c, &ys, y_label);
    let order = points.iter().filter(|p| !p.highlight).chain(points.iter().filter(|p| p.highlight));
    for p in order {
        if p.x.is_finite() && p.y.is_finite() {
            let (r, stroke) = if p.highlight { (6.0, Some("black")) } else { (3.0, None) };
            c.circle(xs.map(p.x), ys.map(p.y), r, &p.fill, stroke);
        }
    }
    c.finish()
}
