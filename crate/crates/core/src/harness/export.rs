//! CSV logs and SVG line plots.

use std::fmt::Write as _;
use std::path::Path;

use super::simulate::{LogRow, SimulationLog};
use crate::dynamics::{NU, NX};
use crate::error::{Error, Result};

pub const CSV_HEADER: [&str; 38] = [
    "t", "beta", "theta", "L_t", "phi_r", "theta_r", "phi_p", "theta_p", "beta_dot", "theta_dot", "L_t_dot",
    "phi_r_dot", "theta_r_dot", "phi_p_dot", "theta_p_dot", "u1", "u2", "u3", "um1", "um2", "um3", "ppx", "ppy",
    "ppz", "rpx", "rpy", "rpz", "h_t", "h1", "h2", "h3", "h4", "h5", "h6", "delta_t", "kkt", "qp_iters", "solve_ms",
];

/// 17 significant digits, enough to reproduce every `f64` exactly.
fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn csv_error(path: &Path) -> impl Fn(csv::Error) -> Error + '_ {
    move |source| Error::Csv { path: path.to_path_buf(), source }
}

pub fn export_csv(log: &SimulationLog, path: &Path) -> Result<()> {
    if log.is_empty() {
        return Err(Error::EmptyLog);
    }
    let mut w = csv::Writer::from_path(path).map_err(csv_error(path))?;
    w.write_record(CSV_HEADER).map_err(csv_error(path))?;
    for r in &log.rows {
        let mut rec: Vec<String> = Vec::with_capacity(CSV_HEADER.len());
        let floats = std::iter::once(r.t)
            .chain(r.state)
            .chain(r.input)
            .chain(r.measured_input)
            .chain(r.payload)
            .chain(r.reference)
            .chain([r.h_t])
            .chain(r.boxes)
            .chain([r.delta, r.kkt]);
        rec.extend(floats.map(fmt_f64));
        rec.push(r.qp_iters.to_string());
        rec.push(fmt_f64(r.solve_ms));
        w.write_record(&rec).map_err(csv_error(path))?;
    }
    w.flush().map_err(|source| Error::Io { path: path.to_path_buf(), source })
}

/// Reads back the rows written by [`export_csv`].
pub fn read_csv(path: &Path) -> Result<Vec<LogRow>> {
    let mut rd = csv::Reader::from_path(path).map_err(csv_error(path))?;
    let header = rd.headers().map_err(csv_error(path))?;
    if !header.iter().eq(CSV_HEADER.iter().copied()) {
        return Err(Error::Parse(format!("{}: unexpected CSV header", path.display())));
    }
    let bad = |line: usize, what: &str| Error::Parse(format!("{}: line {line}: {what}", path.display()));
    let mut rows = Vec::new();
    for (i, rec) in rd.records().enumerate() {
        let rec = rec.map_err(csv_error(path))?;
        let line = i + 2;
        if rec.len() != CSV_HEADER.len() {
            return Err(bad(line, "wrong number of fields"));
        }
        let f = |j: usize| rec[j].parse::<f64>().map_err(|_| bad(line, &format!("field {} is not a number", CSV_HEADER[j])));
        let block = |start: usize, out: &mut [f64]| -> Result<()> {
            for (k, o) in out.iter_mut().enumerate() {
                *o = f(start + k)?;
            }
            Ok(())
        };
        let mut r = LogRow {
            t: f(0)?,
            state: [0.0; NX],
            input: [0.0; NU],
            measured_input: [0.0; NU],
            payload: [0.0; 3],
            reference: [0.0; 3],
            h_t: f(27)?,
            boxes: [0.0; 6],
            delta: f(34)?,
            kkt: f(35)?,
            qp_iters: rec[36].parse().map_err(|_| bad(line, "qp_iters is not an integer"))?,
            solve_ms: f(37)?,
        };
        block(1, &mut r.state)?;
        block(1 + NX, &mut r.input)?;
        block(1 + NX + NU, &mut r.measured_input)?;
        block(1 + NX + 2 * NU, &mut r.payload)?;
        block(4 + NX + 2 * NU, &mut r.reference)?;
        block(28, &mut r.boxes)?;
        rows.push(r);
    }
    Ok(rows)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PlotKind {
    /// Reference and payload height against time.
    Tracking,
    /// `h_t` against time with the zero line.
    Safety,
}

struct Series<'a> {
    label: &'a str,
    color: &'a str,
    dashed: bool,
    points: Vec<(f64, f64)>,
}

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 360.0;
const MARGIN_LEFT: f64 = 70.0;
const MARGIN_RIGHT: f64 = 20.0;
const MARGIN_TOP: f64 = 30.0;
const MARGIN_BOTTOM: f64 = 45.0;
const TICKS: usize = 5;

pub fn export_plot(log: &SimulationLog, kind: PlotKind, path: &Path) -> Result<()> {
    if log.is_empty() {
        return Err(Error::EmptyLog);
    }
    let svg = render_svg(log, kind);
    std::fs::write(path, svg).map_err(|source| Error::Io { path: path.to_path_buf(), source })
}

fn render_svg(log: &SimulationLog, kind: PlotKind) -> String {
    let pts = |f: fn(&LogRow) -> f64| log.rows.iter().map(|r| (r.t, f(r))).collect::<Vec<_>>();
    let (title, y_label, series, zero_line) = match kind {
        PlotKind::Tracking => (
            format!("Payload height, {} mode", log.mode),
            "z (m)",
            vec![
                Series { label: "r_p,z", color: "#d62728", dashed: true, points: pts(|r| r.reference[2]) },
                Series { label: "p_p,z", color: "#1f77b4", dashed: false, points: pts(|r| r.payload[2]) },
            ],
            false,
        ),
        PlotKind::Safety => (
            format!("Target safety, {} mode", log.mode),
            "h_t (m)",
            vec![Series { label: "h_t", color: "#1f77b4", dashed: false, points: pts(|r| r.h_t) }],
            true,
        ),
    };

    let (t0, t1) = (log.rows[0].t, log.rows[log.rows.len() - 1].t);
    let t1 = if t1 > t0 { t1 } else { t0 + 1.0 };
    let ys = series.iter().flat_map(|s| s.points.iter().map(|p| p.1));
    let (mut y0, mut y1) = ys.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), y| (lo.min(y), hi.max(y)));
    if zero_line {
        y0 = y0.min(0.0);
        y1 = y1.max(0.0);
    }
    let pad = 0.05 * (y1 - y0).max(1e-6);
    let (y0, y1) = (y0 - pad, y1 + pad);
    let plot_w = WIDTH - MARGIN_LEFT - MARGIN_RIGHT;
    let plot_h = HEIGHT - MARGIN_TOP - MARGIN_BOTTOM;
    let sx = |t: f64| MARGIN_LEFT + (t - t0) / (t1 - t0) * plot_w;
    let sy = |y: f64| MARGIN_TOP + (y1 - y) / (y1 - y0) * plot_h;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    );
    let _ = writeln!(s, r#"<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="20" font-family="sans-serif" font-size="14" text-anchor="middle">{title}</text>"#, WIDTH / 2.0);
    let _ = writeln!(
        s,
        r#"<rect x="{MARGIN_LEFT}" y="{MARGIN_TOP}" width="{plot_w}" height="{plot_h}" fill="none" stroke="black"/>"#
    );
    for i in 0..=TICKS {
        let f = i as f64 / TICKS as f64;
        let (t, y) = (t0 + f * (t1 - t0), y0 + f * (y1 - y0));
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" font-family="sans-serif" font-size="11" text-anchor="middle">{t:.1}</text>"#,
            sx(t),
            HEIGHT - MARGIN_BOTTOM + 16.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" font-family="sans-serif" font-size="11" text-anchor="end">{y:.3}</text>"#,
            MARGIN_LEFT - 6.0,
            sy(y) + 4.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" font-family="sans-serif" font-size="12" text-anchor="middle">t (s)</text>"#,
        MARGIN_LEFT + plot_w / 2.0,
        HEIGHT - 8.0
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{:.2}" font-family="sans-serif" font-size="12" text-anchor="middle" transform="rotate(-90 16 {:.2})">{y_label}</text>"#,
        MARGIN_TOP + plot_h / 2.0,
        MARGIN_TOP + plot_h / 2.0
    );
    if zero_line {
        let _ = writeln!(
            s,
            r##"<line x1="{MARGIN_LEFT}" y1="{0:.2}" x2="{1:.2}" y2="{0:.2}" stroke="#444444" stroke-dasharray="4 3"/>"##,
            sy(0.0),
            MARGIN_LEFT + plot_w
        );
    }
    for (i, ser) in series.iter().enumerate() {
        let mut pts = String::new();
        for (t, y) in &ser.points {
            let _ = write!(pts, "{:.2},{:.2} ", sx(*t), sy(*y));
        }
        let dash = if ser.dashed { r#" stroke-dasharray="6 4""# } else { "" };
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="{}" stroke-width="1.5"{dash}/>"#,
            pts.trim_end(),
            ser.color
        );
        let ly = MARGIN_TOP + 14.0 + 16.0 * i as f64;
        let lx = MARGIN_LEFT + plot_w - 90.0;
        let _ = writeln!(
            s,
            r#"<line x1="{lx:.2}" y1="{ly:.2}" x2="{:.2}" y2="{ly:.2}" stroke="{}" stroke-width="1.5"{dash}/>"#,
            lx + 24.0,
            ser.color
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" font-family="sans-serif" font-size="11">{}</text>"#,
            lx + 30.0,
            ly + 4.0,
            ser.label
        );
    }
    s.push_str("</svg>\n");
    s
}
