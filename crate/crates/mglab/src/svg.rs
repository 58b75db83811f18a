//! Minimal deterministic SVG emission for the figure panels: scatter plots,
//! trajectory polylines, and density heatmaps. Output is canonical — fixed
//! number formatting, elements in insertion order — so identical inputs
//! produce byte-identical files.

use crate::error::Result;
use crate::metrics::GridSpec;
use crate::vec2::Vec2;
use std::fmt::Write as _;
use std::path::Path;

pub struct SvgCanvas {
    width: f64,
    height: f64,
    x_min: f64,
    x_max: f64,
    y_min: f64,
    y_max: f64,
    body: String,
}

impl SvgCanvas {
    pub fn new(width: f64, height: f64, x_min: f64, x_max: f64, y_min: f64, y_max: f64) -> Self {
        SvgCanvas {
            width,
            height,
            x_min,
            x_max,
            y_min,
            y_max,
            body: String::new(),
        }
    }

    /// Data coordinates to pixel coordinates (y flipped).
    fn map(&self, p: Vec2) -> (f64, f64) {
        let px = (p.x - self.x_min) / (self.x_max - self.x_min) * self.width;
        let py = (1.0 - (p.y - self.y_min) / (self.y_max - self.y_min)) * self.height;
        (px, py)
    }

    pub fn title(&mut self, text: &str) {
        let _ = writeln!(
            self.body,
            r#"<text x="6" y="16" font-family="monospace" font-size="13">{}</text>"#,
            escape(text)
        );
    }

    /// Filled dots.
    pub fn scatter(&mut self, points: &[Vec2], radius: f64, color: &str) {
        for &p in points {
            let (x, y) = self.map(p);
            let _ = writeln!(
                self.body,
                r#"<circle cx="{x:.3}" cy="{y:.3}" r="{radius:.3}" fill="{color}"/>"#
            );
        }
    }

    /// Open circles, e.g. mixture-mode markers.
    pub fn markers(&mut self, points: &[Vec2], radius: f64, color: &str) {
        for &p in points {
            let (x, y) = self.map(p);
            let _ = writeln!(
                self.body,
                r#"<circle cx="{x:.3}" cy="{y:.3}" r="{radius:.3}" fill="none" stroke="{color}" stroke-width="1.2"/>"#
            );
        }
    }

    pub fn polyline(&mut self, points: &[Vec2], width: f64, color: &str) {
        if points.len() < 2 {
            return;
        }
        let mut d = String::new();
        for &p in points {
            let (x, y) = self.map(p);
            let _ = write!(d, "{x:.3},{y:.3} ");
        }
        let _ = writeln!(
            self.body,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="{width:.3}" stroke-opacity="0.55"/>"#,
            d.trim_end()
        );
    }

    /// Row-major density grid rendered as shaded cells, white at zero up to a
    /// dark blue at the maximum.
    pub fn heatmap(&mut self, grid: &GridSpec, values: &[f64]) {
        let peak = values.iter().cloned().fold(0.0f64, f64::max);
        let cw = self.width / grid.nx as f64;
        let ch = self.height / grid.ny as f64;
        for j in 0..grid.ny {
            for i in 0..grid.nx {
                let v = values[j * grid.nx + i];
                let s = if peak > 0.0 {
                    (v / peak).clamp(0.0, 1.0)
                } else {
                    0.0
                };
                let r = (255.0 - 225.0 * s).round() as u8;
                let g = (255.0 - 180.0 * s).round() as u8;
                let b = (255.0 - 90.0 * s).round() as u8;
                let node = grid.node(i, j);
                let (px, py) = self.map(node);
                let _ = writeln!(
                    self.body,
                    r#"<rect x="{:.3}" y="{:.3}" width="{:.3}" height="{:.3}" fill="rgb({r},{g},{b})"/>"#,
                    px - cw / 2.0,
                    py - ch / 2.0,
                    cw,
                    ch
                );
            }
        }
    }

    pub fn finish(&self) -> String {
        format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{:.0}\" height=\"{:.0}\" \
             viewBox=\"0 0 {:.0} {:.0}\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n{}</svg>\n",
            self.width, self.height, self.width, self.height, self.body
        )
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.finish())?;
        Ok(())
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}
