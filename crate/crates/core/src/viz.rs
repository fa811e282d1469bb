//! SVG rendering of DET curves, D-EER boxplots and t-SNE scatter plots.
//!
//! Output depends only on the input data and style, never on time or
//! hashing order, so identical inputs give identical bytes.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::DetCurve;
use crate::tsne::LayoutPoint;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxplotStats {
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    pub whisker_low: f64,
    pub whisker_high: f64,
    pub outliers: Vec<f64>,
}

/// Quantile of sorted data by linear interpolation between order statistics.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Tukey boxplot: whiskers reach the furthest data within 1.5·IQR of the box.
pub fn compute_boxplot(values: &[f64]) -> Result<BoxplotStats> {
    if values.is_empty() {
        return Err(Error::Argument("boxplot of no values".into()));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data("boxplot values must be finite".into()));
    }
    let mut s = values.to_vec();
    s.sort_by(f64::total_cmp);
    let (q1, median, q3) = (quantile(&s, 0.25), quantile(&s, 0.5), quantile(&s, 0.75));
    let fence = 1.5 * (q3 - q1);
    let (lo_fence, hi_fence) = (q1 - fence, q3 + fence);
    let inside = s.iter().copied().filter(|v| (lo_fence..=hi_fence).contains(v));
    let whisker_low = inside.clone().fold(f64::INFINITY, f64::min);
    let whisker_high = inside.fold(f64::NEG_INFINITY, f64::max);
    let outliers = s.iter().copied().filter(|v| !(lo_fence..=hi_fence).contains(v)).collect();
    Ok(BoxplotStats { median, q1, q3, whisker_low, whisker_high, outliers })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotStyle {
    pub width: u32,
    pub height: u32,
    pub title: String,
}

impl Default for PlotStyle {
    fn default() -> Self {
        Self { width: 640, height: 480, title: String::new() }
    }
}

/// Data for one figure.
#[derive(Debug, Clone, PartialEq)]
pub enum PlotData {
    /// Named DET curves (MACER, BPCER as fractions).
    Det(Vec<(String, DetCurve)>),
    /// Named groups of D-EER values in percent.
    Boxplot(Vec<(String, Vec<f64>)>),
    Scatter(Vec<LayoutPoint>),
}

impl PlotData {
    pub fn kind(&self) -> &'static str {
        match self {
            PlotData::Det(_) => "det",
            PlotData::Boxplot(_) => "boxplot",
            PlotData::Scatter(_) => "scatter",
        }
    }

    fn validate(&self) -> Result<()> {
        let empty = match self {
            PlotData::Det(c) => c.is_empty() || c.iter().any(|(_, d)| d.points.is_empty()),
            PlotData::Boxplot(g) => g.is_empty() || g.iter().any(|(_, v)| v.is_empty()),
            PlotData::Scatter(p) => p.is_empty(),
        };
        if empty {
            return Err(Error::Argument(format!("nothing to draw in {} plot", self.kind())));
        }
        Ok(())
    }
}

const PALETTE: [&str; 10] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
];

const MARGIN_LEFT: f64 = 70.0;
const MARGIN_RIGHT: f64 = 160.0;
const MARGIN_TOP: f64 = 40.0;
const MARGIN_BOTTOM: f64 = 60.0;

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&apos;"),
            c => out.push(c),
        }
    }
    out
}

/// Plot area with data-to-pixel mapping.
struct Frame {
    x0: f64,
    y0: f64,
    w: f64,
    h: f64,
    xr: (f64, f64),
    yr: (f64, f64),
}

impl Frame {
    fn new(style: &PlotStyle, xr: (f64, f64), yr: (f64, f64)) -> Self {
        let widen = |(a, b): (f64, f64)| if b > a { (a, b) } else { (a - 1.0, b + 1.0) };
        Self {
            x0: MARGIN_LEFT,
            y0: MARGIN_TOP,
            w: (f64::from(style.width) - MARGIN_LEFT - MARGIN_RIGHT).max(10.0),
            h: (f64::from(style.height) - MARGIN_TOP - MARGIN_BOTTOM).max(10.0),
            xr: widen(xr),
            yr: widen(yr),
        }
    }

    fn px(&self, x: f64) -> f64 {
        self.x0 + (x - self.xr.0) / (self.xr.1 - self.xr.0) * self.w
    }

    fn py(&self, y: f64) -> f64 {
        self.y0 + self.h - (y - self.yr.0) / (self.yr.1 - self.yr.0) * self.h
    }

    fn axes(&self, out: &mut String, xlabel: &str, ylabel: &str, xticks: bool) {
        let y1 = self.y0 + self.h;
        let _ = writeln!(
            out,
            r#"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="none" stroke="black"/>"#,
            self.x0, self.y0, self.w, self.h
        );
        for i in 0..=4 {
            let f = f64::from(i) / 4.0;
            let yv = self.yr.0 + f * (self.yr.1 - self.yr.0);
            let y = self.py(yv);
            let _ = writeln!(
                out,
                r#"<line x1="{:.2}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="black"/><text x="{:.2}" y="{:.2}" font-size="11" text-anchor="end">{yv:.1}</text>"#,
                self.x0 - 4.0,
                self.x0,
                self.x0 - 6.0,
                y + 4.0
            );
            if xticks {
                let xv = self.xr.0 + f * (self.xr.1 - self.xr.0);
                let x = self.px(xv);
                let _ = writeln!(
                    out,
                    r#"<line x1="{x:.2}" y1="{y1:.2}" x2="{x:.2}" y2="{:.2}" stroke="black"/><text x="{x:.2}" y="{:.2}" font-size="11" text-anchor="middle">{xv:.1}</text>"#,
                    y1 + 4.0,
                    y1 + 16.0
                );
            }
        }
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="{:.2}" font-size="13" text-anchor="middle">{}</text>"#,
            self.x0 + self.w / 2.0,
            y1 + 40.0,
            escape(xlabel)
        );
        let (lx, ly) = (18.0, self.y0 + self.h / 2.0);
        let _ = writeln!(
            out,
            r#"<text x="{lx:.2}" y="{ly:.2}" font-size="13" text-anchor="middle" transform="rotate(-90 {lx:.2} {ly:.2})">{}</text>"#,
            escape(ylabel)
        );
    }

    fn legend(&self, out: &mut String, entries: &[(String, &str)]) {
        let lx = self.x0 + self.w + 15.0;
        for (i, (name, color)) in entries.iter().enumerate() {
            let y = self.y0 + 10.0 + 18.0 * i as f64;
            let _ = writeln!(
                out,
                r#"<g class="legend-entry"><rect x="{lx:.2}" y="{:.2}" width="10" height="10" fill="{color}"/><text x="{:.2}" y="{:.2}" font-size="12">{}</text></g>"#,
                y - 9.0,
                lx + 15.0,
                y,
                escape(name)
            );
        }
    }
}

fn header(style: &PlotStyle, kind: &str) -> String {
    let mut out = String::new();
    let _ = writeln!(out, r#"<?xml version="1.0" encoding="UTF-8" standalone="no"?>"#);
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{w}" height="{h}" viewBox="0 0 {w} {h}" class="{kind}">"#,
        w = style.width,
        h = style.height
    );
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
    if !style.title.is_empty() {
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="24" font-size="15" text-anchor="middle">{}</text>"#,
            f64::from(style.width) / 2.0,
            escape(&style.title)
        );
    }
    out
}

fn det_svg(curves: &[(String, DetCurve)], style: &PlotStyle) -> String {
    let mut out = header(style, "det");
    let frame = Frame::new(style, (0.0, 100.0), (0.0, 100.0));
    frame.axes(&mut out, "MACER (%)", "BPCER (%)", true);
    let mut legend = Vec::new();
    for (i, (name, curve)) in curves.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let mut pts = String::new();
        for (k, (m, b)) in curve.points.iter().enumerate() {
            if k > 0 {
                pts.push(' ');
            }
            let _ = write!(pts, "{:.2},{:.2}", frame.px(100.0 * m), frame.py(100.0 * b));
        }
        let _ = writeln!(out, r#"<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1.5"/>"#);
        legend.push((name.clone(), color));
    }
    frame.legend(&mut out, &legend);
    out.push_str("</svg>\n");
    out
}

fn boxplot_svg(groups: &[(String, Vec<f64>)], style: &PlotStyle) -> Result<String> {
    let stats: Vec<BoxplotStats> = groups.iter().map(|(_, v)| compute_boxplot(v)).collect::<Result<_>>()?;
    let lo = groups.iter().flat_map(|(_, v)| v).copied().fold(f64::INFINITY, f64::min).min(0.0);
    let hi = groups.iter().flat_map(|(_, v)| v).copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out = header(style, "boxplot");
    let frame = Frame::new(style, (0.0, groups.len() as f64), (lo, hi * 1.05));
    frame.axes(&mut out, "", "D-EER (%)", false);
    let mut legend = Vec::new();
    for (i, ((name, _), s)) in groups.iter().zip(&stats).enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let cx = frame.px(i as f64 + 0.5);
        let half = frame.w / groups.len() as f64 * 0.25;
        let (top, bottom) = (frame.py(s.q3), frame.py(s.q1));
        let _ = writeln!(out, r#"<g class="box">"#);
        let _ = writeln!(
            out,
            r#"<line x1="{cx:.2}" y1="{:.2}" x2="{cx:.2}" y2="{:.2}" stroke="black"/>"#,
            frame.py(s.whisker_high),
            frame.py(s.whisker_low)
        );
        let _ = writeln!(
            out,
            r#"<rect x="{:.2}" y="{top:.2}" width="{:.2}" height="{:.2}" fill="{color}" fill-opacity="0.5" stroke="black"/>"#,
            cx - half,
            2.0 * half,
            bottom - top
        );
        for (v, w) in [(s.median, 2.0), (s.whisker_low, 1.0), (s.whisker_high, 1.0)] {
            let y = frame.py(v);
            let _ = writeln!(
                out,
                r#"<line x1="{:.2}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="black" stroke-width="{w}"/>"#,
                cx - half,
                cx + half
            );
        }
        for &o in &s.outliers {
            let _ = writeln!(
                out,
                r#"<circle cx="{cx:.2}" cy="{:.2}" r="3" fill="none" stroke="black"/>"#,
                frame.py(o)
            );
        }
        let _ = writeln!(
            out,
            r#"<text x="{cx:.2}" y="{:.2}" font-size="11" text-anchor="middle">{}</text>"#,
            frame.y0 + frame.h + 16.0,
            escape(name)
        );
        let _ = writeln!(out, "</g>");
        legend.push((name.clone(), color));
    }
    frame.legend(&mut out, &legend);
    out.push_str("</svg>\n");
    Ok(out)
}

fn scatter_svg(points: &[LayoutPoint], style: &PlotStyle) -> String {
    let bounds = |f: fn(&LayoutPoint) -> f64| {
        points.iter().map(f).fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)))
    };
    let mut groups: Vec<&str> = Vec::new();
    for p in points {
        if !groups.contains(&p.group.as_str()) {
            groups.push(&p.group);
        }
    }
    groups.sort_unstable();
    let mut out = header(style, "scatter");
    let frame = Frame::new(style, bounds(|p| p.x), bounds(|p| p.y));
    frame.axes(&mut out, "t-SNE 1", "t-SNE 2", true);
    for p in points {
        let gi = groups.iter().position(|g| *g == p.group).unwrap_or(0);
        let _ = writeln!(
            out,
            r#"<circle cx="{:.2}" cy="{:.2}" r="2.5" fill="{}"/>"#,
            frame.px(p.x),
            frame.py(p.y),
            PALETTE[gi % PALETTE.len()]
        );
    }
    let legend: Vec<(String, &str)> =
        groups.iter().enumerate().map(|(i, g)| (g.to_string(), PALETTE[i % PALETTE.len()])).collect();
    frame.legend(&mut out, &legend);
    out.push_str("</svg>\n");
    out
}

pub fn emit_svg(data: &PlotData, style: &PlotStyle) -> Result<String> {
    data.validate()?;
    match data {
        PlotData::Det(c) => Ok(det_svg(c, style)),
        PlotData::Boxplot(g) => boxplot_svg(g, style),
        PlotData::Scatter(p) => Ok(scatter_svg(p, style)),
    }
}

/// Every plotted series as long-format CSV.
pub fn series_csv(data: &PlotData) -> Result<String> {
    data.validate()?;
    let mut out = String::new();
    match data {
        PlotData::Det(curves) => {
            out.push_str("series,macer,bpcer\n");
            for (name, c) in curves {
                for (m, b) in &c.points {
                    let _ = writeln!(out, "{},{m},{b}", csv_field(name));
                }
            }
        }
        PlotData::Boxplot(groups) => {
            out.push_str("series,d_eer\n");
            for (name, values) in groups {
                for v in values {
                    let _ = writeln!(out, "{},{v}", csv_field(name));
                }
            }
        }
        PlotData::Scatter(points) => {
            out.push_str("image_id,x,y,group\n");
            for p in points {
                let _ = writeln!(out, "{},{},{},{}", csv_field(&p.image_id), p.x, p.y, csv_field(&p.group));
            }
        }
    }
    Ok(out)
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}
