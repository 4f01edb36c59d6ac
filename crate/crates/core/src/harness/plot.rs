//! Plain SVG line charts. No plotting dependency; the output is a handful
//! of `<path>`, `<line>` and `<text>` elements.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::census::FlowCensus;
use super::run::RunRecord;
use super::HarnessError;

const W: f64 = 720.0;
const H: f64 = 420.0;
const PAD_L: f64 = 70.0;
const PAD_R: f64 = 150.0;
const PAD_T: f64 = 40.0;
const PAD_B: f64 = 50.0;
const COLORS: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Indicator {
    Return,
    Wait,
    Queue,
    Speed,
}

impl Indicator {
    pub const ALL: [Indicator; 4] = [
        Indicator::Return,
        Indicator::Wait,
        Indicator::Queue,
        Indicator::Speed,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Indicator::Return => "return",
            Indicator::Wait => "wait",
            Indicator::Queue => "queue",
            Indicator::Speed => "speed",
        }
    }

    pub fn get(self, r: &RunRecord) -> f64 {
        match self {
            Indicator::Return => r.ret,
            Indicator::Wait => r.wait,
            Indicator::Queue => r.queue,
            Indicator::Speed => r.speed,
        }
    }
}

/// Per-episode mean, min and max across seeds.
#[derive(Clone, Debug, PartialEq)]
pub struct Band {
    pub episode: Vec<usize>,
    pub mean: Vec<f64>,
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

pub fn band(records: &[RunRecord], ind: Indicator) -> Band {
    let mut by_ep: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for r in records {
        by_ep.entry(r.episode).or_default().push(ind.get(r));
    }
    let mut b = Band {
        episode: vec![],
        mean: vec![],
        min: vec![],
        max: vec![],
    };
    for (ep, v) in by_ep {
        b.episode.push(ep);
        b.mean.push(v.iter().sum::<f64>() / v.len() as f64);
        b.min.push(v.iter().copied().fold(f64::INFINITY, f64::min));
        b.max
            .push(v.iter().copied().fold(f64::NEG_INFINITY, f64::max));
    }
    b
}

struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Frame {
    fn new(xs: impl Iterator<Item = f64> + Clone, ys: impl Iterator<Item = f64> + Clone) -> Self {
        let lo = |it: &mut dyn Iterator<Item = f64>| it.fold(f64::INFINITY, f64::min);
        let hi = |it: &mut dyn Iterator<Item = f64>| it.fold(f64::NEG_INFINITY, f64::max);
        let (mut x0, mut x1) = (lo(&mut xs.clone()), hi(&mut xs.clone()));
        let (mut y0, mut y1) = (lo(&mut ys.clone()), hi(&mut ys.clone()));
        if !x0.is_finite() {
            (x0, x1) = (0.0, 1.0);
        }
        if !y0.is_finite() {
            (y0, y1) = (0.0, 1.0);
        }
        if x1 - x0 < 1e-12 {
            x1 = x0 + 1.0;
        }
        if y1 - y0 < 1e-12 {
            let m = y0.abs().max(1.0) * 0.05;
            (y0, y1) = (y0 - m, y1 + m);
        }
        let m = (y1 - y0) * 0.05;
        Frame {
            x0,
            x1,
            y0: y0 - m,
            y1: y1 + m,
        }
    }

    fn px(&self, x: f64) -> f64 {
        PAD_L + (x - self.x0) / (self.x1 - self.x0) * (W - PAD_L - PAD_R)
    }

    fn py(&self, y: f64) -> f64 {
        H - PAD_B - (y - self.y0) / (self.y1 - self.y0) * (H - PAD_T - PAD_B)
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

fn polyline(f: &Frame, xs: &[f64], ys: &[f64]) -> String {
    let mut d = String::new();
    for (i, (&x, &y)) in xs.iter().zip(ys).enumerate() {
        let _ = write!(
            d,
            "{}{:.2},{:.2} ",
            if i == 0 { "M" } else { "L" },
            f.px(x),
            f.py(y)
        );
    }
    d.trim_end().to_string()
}

fn header(title: &str, xlabel: &str, ylabel: &str, f: &Frame) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="22" text-anchor="middle" font-size="15">{}</text>"#,
        (W - PAD_R + PAD_L) / 2.0,
        escape(title)
    );
    let (bx, by, bw, bh) = (PAD_L, PAD_T, W - PAD_L - PAD_R, H - PAD_T - PAD_B);
    let _ = writeln!(
        s,
        r#"<rect x="{bx}" y="{by}" width="{bw}" height="{bh}" fill="none" stroke="black"/>"#
    );
    for i in 0..=4 {
        let t = i as f64 / 4.0;
        let xv = f.x0 + t * (f.x1 - f.x0);
        let yv = f.y0 + t * (f.y1 - f.y0);
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            f.px(xv),
            H - PAD_B + 16.0,
            tick(xv)
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#,
            PAD_L - 6.0,
            f.py(yv) + 4.0,
            tick(yv)
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
        (W - PAD_R + PAD_L) / 2.0,
        H - 12.0,
        escape(xlabel)
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{:.1}" text-anchor="middle" transform="rotate(-90 16 {:.1})">{}</text>"#,
        H / 2.0,
        H / 2.0,
        escape(ylabel)
    );
    s
}

fn tick(v: f64) -> String {
    let a = v.abs();
    if a >= 1e5 {
        format!("{v:.2e}")
    } else if a >= 100.0 || v == v.round() {
        format!("{v:.0}")
    } else {
        format!("{v:.2}")
    }
}

fn legend(s: &mut String, i: usize, label: &str, color: &str, dashed: bool) {
    let y = PAD_T + 14.0 + 18.0 * i as f64;
    let x = W - PAD_R + 12.0;
    let dash = if dashed {
        r#" stroke-dasharray="5,3""#
    } else {
        ""
    };
    let _ = writeln!(
        s,
        r#"<line x1="{x}" y1="{y}" x2="{}" y2="{y}" stroke="{color}" stroke-width="2"{dash}/>"#,
        x + 22.0
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}">{}</text>"#,
        x + 28.0,
        y + 4.0,
        escape(label)
    );
}

/// One chart of `ind` against episode: a line per labelled run set with a
/// shaded min-max band across seeds.
pub fn indicator_svg(ind: Indicator, series: &[(String, Vec<RunRecord>)]) -> String {
    let bands: Vec<Band> = series.iter().map(|(_, r)| band(r, ind)).collect();
    let xs = bands
        .iter()
        .flat_map(|b| b.episode.iter().map(|&e| e as f64));
    let ys = bands
        .iter()
        .flat_map(|b| b.min.iter().chain(&b.max).copied());
    let f = Frame::new(xs, ys);
    let mut s = header(ind.name(), "episode", ind.name(), &f);
    for (i, ((label, _), b)) in series.iter().zip(&bands).enumerate() {
        let color = COLORS[i % COLORS.len()];
        let xs: Vec<f64> = b.episode.iter().map(|&e| e as f64).collect();
        if !xs.is_empty() {
            let upper = polyline(&f, &xs, &b.max);
            let mut lower = String::new();
            for (&x, &y) in xs.iter().zip(&b.min).rev() {
                let _ = write!(lower, "L{:.2},{:.2} ", f.px(x), f.py(y));
            }
            let _ = writeln!(
                s,
                r#"<path d="{upper} {}Z" fill="{color}" fill-opacity="0.18" stroke="none"/>"#,
                lower.trim_end()
            );
            let _ = writeln!(
                s,
                r#"<path d="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
                polyline(&f, &xs, &b.mean)
            );
        }
        legend(&mut s, i, label, color, false);
    }
    s.push_str("</svg>\n");
    s
}

/// Writes `<indicator>.svg` for each indicator into `dir`.
pub fn write_indicator_plots(
    dir: &Path,
    series: &[(String, Vec<RunRecord>)],
) -> Result<Vec<PathBuf>, HarnessError> {
    if series.is_empty() || series.iter().any(|(_, r)| r.is_empty()) {
        return Err(HarnessError::Runtime("no records to plot".into()));
    }
    std::fs::create_dir_all(dir)?;
    Indicator::ALL
        .iter()
        .map(|&ind| {
            let p = dir.join(format!("{}.svg", ind.name()));
            std::fs::write(&p, indicator_svg(ind, series))?;
            Ok(p)
        })
        .collect()
}

/// Signed per-minute flow on one edge with and without the blocks. Vertical
/// dashed lines mark the closure window.
pub fn census_svg(c: &FlowCensus, edge: usize) -> String {
    let (base, blk) = c.signed(edge);
    let xs: Vec<f64> = (0..c.minutes).map(|m| m as f64).collect();
    let to_f = |v: &[i64]| v.iter().map(|&x| x as f64).collect::<Vec<_>>();
    let (base, blk) = (to_f(&base), to_f(&blk));
    let f = Frame::new(
        xs.iter().copied(),
        base.iter().chain(&blk).copied().chain([0.0]),
    );
    let mut s = header(
        &format!("flow on {}", c.edges[edge]),
        "minute",
        "vehicles per minute (signed)",
        &f,
    );
    for (i, (label, ys)) in [("no block", &base), ("block", &blk)]
        .into_iter()
        .enumerate()
    {
        let color = COLORS[i];
        if !xs.is_empty() {
            let _ = writeln!(
                s,
                r#"<path d="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
                polyline(&f, &xs, ys)
            );
        }
        legend(&mut s, i, label, color, false);
    }
    let mut marked = false;
    for (_, start, end) in &c.windows {
        for t in [start / 60.0, end / 60.0] {
            if t >= f.x0 && t <= f.x1 {
                let x = f.px(t);
                let _ = writeln!(
                    s,
                    r##"<line x1="{x:.2}" y1="{PAD_T}" x2="{x:.2}" y2="{}" stroke="#444" stroke-dasharray="6,4"/>"##,
                    H - PAD_B
                );
                marked = true;
            }
        }
    }
    if marked {
        legend(&mut s, 2, "block window", "#444", true);
    }
    s.push_str("</svg>\n");
    s
}

/// Writes `census_<edge>.svg` for every named edge.
pub fn write_census_plots(
    dir: &Path,
    c: &FlowCensus,
    edges: &[String],
) -> Result<Vec<PathBuf>, HarnessError> {
    std::fs::create_dir_all(dir)?;
    edges
        .iter()
        .map(|name| {
            let i = c
                .edge_index(name)
                .ok_or_else(|| HarnessError::Config(format!("unknown edge {name:?}")))?;
            let p = dir.join(format!("census_{name}.svg"));
            std::fs::write(&p, census_svg(c, i))?;
            Ok(p)
        })
        .collect()
}
