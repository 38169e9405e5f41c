//! Convergence tables, replica statistics and file output.

use std::fs;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

pub const CONVERGENCE_HEADER: [&str; 6] = [
    "epsilon",
    "replica",
    "sup_l2_err_u1",
    "sup_l2_err_u2",
    "weak_h1_err_u1",
    "weak_h1_err_u2",
];
pub const SUMMARY_HEADER: [&str; 6] = ["epsilon", "metric", "replicas", "median", "q1", "q3"];
pub const SPLITTING_HEADER: [&str; 7] = ["epsilon", "replica", "s1", "s2", "s3", "total", "defect"];
pub const FLUX_HEADER: [&str; 8] = [
    "epsilon",
    "replica",
    "bump",
    "profile",
    "continuum",
    "weak_h1",
    "flux",
    "flux_corrected",
];

/// Path errors of one `(epsilon, replica)` run against the averaged solution.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ErrorRow {
    pub epsilon: f64,
    pub replica: usize,
    /// `sup_t |u_i^eps - ubar_i|_{L^2}`.
    pub sup_l2: [f64; 2],
    /// Largest `|int int grad(u_i^eps - ubar_i) . grad phi psi|` over the test panel.
    pub weak_h1: [f64; 2],
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplittingRow {
    pub epsilon: f64,
    pub replica: usize,
    pub s1: f64,
    pub s2: f64,
    pub s3: f64,
    pub total: f64,
}

impl SplittingRow {
    pub fn defect(&self) -> f64 {
        (self.total - (self.s1 + self.s2 + self.s3)).abs()
    }
}

/// One entry of the weak test panel.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FluxRow {
    pub epsilon: f64,
    pub replica: usize,
    pub bump: usize,
    pub profile: usize,
    pub continuum: usize,
    /// Signed `int int grad(u^eps - ubar) . grad phi psi`.
    pub weak_h1: f64,
    /// Signed `int int (A^eps grad u^eps - Abar grad ubar) . grad phi psi`.
    pub flux: f64,
    /// Same with `phi^eps` on the oscillating side.
    pub flux_corrected: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ConvergenceReport {
    pub epsilons: Vec<f64>,
    pub replicas: usize,
    /// Sorted by epsilon index, then replica.
    pub rows: Vec<ErrorRow>,
    pub splitting: Vec<SplittingRow>,
    pub flux: Vec<FluxRow>,
}

/// Median and quartiles.
///
/// The median is the middle order statistic, or the midpoint of the two
/// middle ones for even counts. The quartiles are the medians of the lower
/// and upper halves, the middle element excluded for odd counts; a single
/// value is its own quartile.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Quartiles {
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
}

fn median_sorted(xs: &[f64]) -> f64 {
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

pub fn quartiles(values: &[f64]) -> Option<Quartiles> {
    if values.is_empty() {
        return None;
    }
    let mut xs = values.to_vec();
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    let (lo, hi) = if n == 1 { (&xs[..], &xs[..]) } else { (&xs[..n / 2], &xs[n.div_ceil(2)..]) };
    Some(Quartiles {
        q1: median_sorted(lo),
        median: median_sorted(&xs),
        q3: median_sorted(hi),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Metric {
    SupL2(usize),
    WeakH1(usize),
    S1,
    S2,
    S3,
}

impl Metric {
    pub const ERRORS: [Metric; 4] = [Metric::SupL2(0), Metric::SupL2(1), Metric::WeakH1(0), Metric::WeakH1(1)];
    pub const SPLITTING: [Metric; 3] = [Metric::S1, Metric::S2, Metric::S3];

    pub fn name(&self) -> String {
        match self {
            Metric::SupL2(i) => format!("sup_l2_err_u{}", i + 1),
            Metric::WeakH1(i) => format!("weak_h1_err_u{}", i + 1),
            Metric::S1 => "abs_s1".into(),
            Metric::S2 => "abs_s2".into(),
            Metric::S3 => "abs_s3".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub epsilon: f64,
    pub metric: String,
    pub replicas: usize,
    pub stats: Quartiles,
}

impl ConvergenceReport {
    fn values(&self, eps: f64, metric: Metric) -> Vec<f64> {
        match metric {
            Metric::SupL2(i) => self.rows.iter().filter(|r| r.epsilon == eps).map(|r| r.sup_l2[i]).collect(),
            Metric::WeakH1(i) => self.rows.iter().filter(|r| r.epsilon == eps).map(|r| r.weak_h1[i]).collect(),
            Metric::S1 | Metric::S2 | Metric::S3 => self
                .splitting
                .iter()
                .filter(|r| r.epsilon == eps)
                .map(|r| match metric {
                    Metric::S1 => r.s1.abs(),
                    Metric::S2 => r.s2.abs(),
                    _ => r.s3.abs(),
                })
                .collect(),
        }
    }

    /// Replica medians along the epsilon ladder; `NaN` where no rows exist.
    pub fn medians(&self, metric: Metric) -> Vec<f64> {
        self.epsilons
            .iter()
            .map(|&e| quartiles(&self.values(e, metric)).map_or(f64::NAN, |q| q.median))
            .collect()
    }

    pub fn summary(&self) -> Vec<SummaryRow> {
        let mut out = Vec::new();
        for &eps in &self.epsilons {
            let metrics: Vec<Metric> = if self.splitting.is_empty() {
                Metric::ERRORS.to_vec()
            } else {
                Metric::ERRORS.iter().chain(&Metric::SPLITTING).copied().collect()
            };
            for m in metrics {
                let v = self.values(eps, m);
                if let Some(stats) = quartiles(&v) {
                    out.push(SummaryRow {
                        epsilon: eps,
                        metric: m.name(),
                        replicas: v.len(),
                        stats,
                    });
                }
            }
        }
        out
    }

    /// Medians nonincreasing along the ladder for both continua and both metrics.
    pub fn medians_nonincreasing(&self) -> bool {
        Metric::ERRORS
            .iter()
            .all(|&m| self.medians(m).windows(2).all(|w| w[1] <= w[0]))
    }

    pub fn strictly_decreasing(&self, metric: Metric) -> bool {
        self.medians(metric).windows(2).all(|w| w[1] < w[0])
    }

    pub fn max_error(&self) -> f64 {
        self.rows
            .iter()
            .flat_map(|r| r.sup_l2.iter().chain(&r.weak_h1))
            .fold(0.0, |a, &b| a.max(b))
    }

    pub fn max_defect(&self) -> f64 {
        self.splitting.iter().map(SplittingRow::defect).fold(0.0, f64::max)
    }
}

fn writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    csv::WriterBuilder::new()
        .has_headers(false)
        .terminator(csv::Terminator::CRLF)
        .from_path(path)
        .map_err(|e| csv_err(path, e))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::io(path, std::io::Error::other(format!("{other:?}"))),
    }
}

fn write_table<const N: usize>(path: &Path, header: [&str; N], rows: impl Iterator<Item = [String; N]>) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(header).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.write_record(&r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Shortest decimal that parses back to the same `f64`.
fn num(x: f64) -> String {
    format!("{x:?}")
}

pub fn write_convergence_csv(rows: &[ErrorRow], path: &Path) -> Result<()> {
    write_table(
        path,
        CONVERGENCE_HEADER,
        rows.iter().map(|r| {
            [
                num(r.epsilon),
                r.replica.to_string(),
                num(r.sup_l2[0]),
                num(r.sup_l2[1]),
                num(r.weak_h1[0]),
                num(r.weak_h1[1]),
            ]
        }),
    )
}

pub fn read_convergence_csv(path: &Path) -> Result<Vec<ErrorRow>> {
    let mut r = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| csv_err(path, e))?;
    let header = r.headers().map_err(|e| csv_err(path, e))?.clone();
    if header.iter().ne(CONVERGENCE_HEADER) {
        return Err(Error::Config(format!("{}: unexpected header {header:?}", path.display())));
    }
    let bad = |what: &str| Error::Config(format!("{}: cannot parse {what}", path.display()));
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let f = |i: usize| rec[i].parse::<f64>().map_err(|_| bad(CONVERGENCE_HEADER[i]));
        out.push(ErrorRow {
            epsilon: f(0)?,
            replica: rec[1].parse().map_err(|_| bad("replica"))?,
            sup_l2: [f(2)?, f(3)?],
            weak_h1: [f(4)?, f(5)?],
        });
    }
    Ok(out)
}

pub fn write_summary_csv(rows: &[SummaryRow], path: &Path) -> Result<()> {
    write_table(
        path,
        SUMMARY_HEADER,
        rows.iter().map(|r| {
            [
                num(r.epsilon),
                r.metric.clone(),
                r.replicas.to_string(),
                num(r.stats.median),
                num(r.stats.q1),
                num(r.stats.q3),
            ]
        }),
    )
}

pub fn write_splitting_csv(rows: &[SplittingRow], path: &Path) -> Result<()> {
    write_table(
        path,
        SPLITTING_HEADER,
        rows.iter().map(|r| {
            [
                num(r.epsilon),
                r.replica.to_string(),
                num(r.s1),
                num(r.s2),
                num(r.s3),
                num(r.total),
                num(r.defect()),
            ]
        }),
    )
}

pub fn write_flux_csv(rows: &[FluxRow], path: &Path) -> Result<()> {
    write_table(
        path,
        FLUX_HEADER,
        rows.iter().map(|r| {
            [
                num(r.epsilon),
                r.replica.to_string(),
                r.bump.to_string(),
                r.profile.to_string(),
                (r.continuum + 1).to_string(),
                num(r.weak_h1),
                num(r.flux),
                num(r.flux_corrected),
            ]
        }),
    )
}

/// Generic table writer for the other subcommands.
pub fn write_rows(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(header).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.write_record(r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn fmt_num(x: f64) -> String {
    num(x)
}

pub(crate) fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Write `convergence.csv`, `summary.csv`, `s_decomposition.csv`,
/// `weak_flux.csv` and optionally `decay.svg`; returns the written paths.
pub fn emit_report(report: &ConvergenceReport, dir: &Path, svg: bool) -> Result<Vec<PathBuf>> {
    ensure_dir(dir)?;
    let mut out = Vec::new();
    let p = dir.join("convergence.csv");
    write_convergence_csv(&report.rows, &p)?;
    out.push(p);
    let p = dir.join("summary.csv");
    write_summary_csv(&report.summary(), &p)?;
    out.push(p);
    let p = dir.join("s_decomposition.csv");
    write_splitting_csv(&report.splitting, &p)?;
    out.push(p);
    let p = dir.join("weak_flux.csv");
    write_flux_csv(&report.flux, &p)?;
    out.push(p);
    if svg {
        let p = dir.join("decay.svg");
        let series: Vec<Series> = Metric::ERRORS
            .iter()
            .map(|&m| Series {
                label: m.name(),
                points: report
                    .epsilons
                    .iter()
                    .filter_map(|&e| quartiles(&report.values(e, m)).map(|q| (e, q)))
                    .collect(),
            })
            .collect();
        fs::write(&p, decay_svg(&series)).map_err(|e| Error::io(&p, e))?;
        out.push(p);
    }
    Ok(out)
}

pub struct Series {
    pub label: String,
    pub points: Vec<(f64, Quartiles)>,
}

const COLORS: [&str; 7] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf"];

/// Log-log plot of replica medians against epsilon with quartile bars.
pub fn decay_svg(series: &[Series]) -> String {
    let (w, h, pad) = (640.0, 420.0, 60.0);
    let pos = |v: f64| v > 0.0 && v.is_finite();
    let xs: Vec<f64> = series.iter().flat_map(|s| s.points.iter().map(|p| p.0)).filter(|v| pos(*v)).collect();
    let ys: Vec<f64> = series
        .iter()
        .flat_map(|s| s.points.iter().flat_map(|p| [p.1.q1, p.1.q3, p.1.median]))
        .filter(|v| pos(*v))
        .collect();
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    if xs.is_empty() || ys.is_empty() {
        let _ = writeln!(svg, r#"<text x="{}" y="{}" font-size="14">no data</text>"#, w / 2.0 - 30.0, h / 2.0);
        svg.push_str("</svg>\n");
        return svg;
    }
    let span = |v: &[f64]| {
        let lo = v.iter().copied().fold(f64::INFINITY, f64::min).log10();
        let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max).log10();
        if hi - lo < 1e-9 {
            (lo - 0.5, hi + 0.5)
        } else {
            let m = 0.05 * (hi - lo);
            (lo - m, hi + m)
        }
    };
    let (x0, x1) = span(&xs);
    let (y0, y1) = span(&ys);
    let px = |x: f64| pad + (x.log10() - x0) / (x1 - x0) * (w - 2.0 * pad);
    let py = |y: f64| h - pad - (y.log10() - y0) / (y1 - y0) * (h - 2.0 * pad);
    let _ = writeln!(
        svg,
        r#"<rect x="{pad}" y="{pad}" width="{}" height="{}" fill="none" stroke="black"/>"#,
        w - 2.0 * pad,
        h - 2.0 * pad
    );
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" font-size="13" text-anchor="middle">epsilon (log)</text>"#,
        w / 2.0,
        h - 15.0
    );
    let _ = writeln!(
        svg,
        r#"<text x="15" y="{}" font-size="13" text-anchor="middle" transform="rotate(-90 15 {})">median error (log)</text>"#,
        h / 2.0,
        h / 2.0
    );
    for (lo, hi, at) in [(x0, x1, true), (y0, y1, false)] {
        for e in (lo.ceil() as i32)..=(hi.floor() as i32) {
            let v = 10f64.powi(e);
            if at {
                let x = px(v);
                let _ = writeln!(
                    svg,
                    r#"<text x="{x:.1}" y="{:.1}" font-size="11" text-anchor="middle">1e{e}</text>"#,
                    h - pad + 16.0
                );
            } else {
                let y = py(v);
                let _ = writeln!(
                    svg,
                    r#"<text x="{:.1}" y="{y:.1}" font-size="11" text-anchor="end">1e{e}</text>"#,
                    pad - 6.0
                );
            }
        }
    }
    for (i, s) in series.iter().enumerate() {
        let c = COLORS[i % COLORS.len()];
        let pts: Vec<String> = s
            .points
            .iter()
            .filter(|p| pos(p.0) && pos(p.1.median))
            .map(|p| format!("{:.2},{:.2}", px(p.0), py(p.1.median)))
            .collect();
        let _ = writeln!(svg, r#"<polyline fill="none" stroke="{c}" stroke-width="1.5" points="{}"/>"#, pts.join(" "));
        for p in s.points.iter().filter(|p| pos(p.0) && pos(p.1.q1) && pos(p.1.q3)) {
            let x = px(p.0);
            let _ = writeln!(
                svg,
                r#"<line x1="{x:.2}" x2="{x:.2}" y1="{:.2}" y2="{:.2}" stroke="{c}"/>"#,
                py(p.1.q1),
                py(p.1.q3)
            );
        }
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" font-size="11" fill="{c}">{}</text>"#,
            pad + 8.0,
            pad + 16.0 + 14.0 * i as f64,
            s.label
        );
    }
    svg.push_str("</svg>\n");
    svg
}
