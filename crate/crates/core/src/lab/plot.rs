use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::run::read_metrics;
use crate::error::{Error, Result};
use crate::metrics::MetricRecord;
use crate::tensor::Real;

const W: Real = 720.0;
const H: Real = 440.0;
const LEFT: Real = 80.0;
const RIGHT: Real = 170.0;
const TOP: Real = 40.0;
const BOTTOM: Real = 60.0;
const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"];

/// One named polyline.
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(Real, Real)>,
}

struct Axis {
    lo: Real,
    hi: Real,
    log: bool,
}

impl Axis {
    fn fit(values: impl Iterator<Item = Real> + Clone, allow_log: bool) -> Axis {
        let finite = values.filter(|v| v.is_finite());
        let lo = finite.clone().fold(Real::INFINITY, Real::min);
        let hi = finite.fold(Real::NEG_INFINITY, Real::max);
        if !lo.is_finite() {
            return Axis { lo: 0.0, hi: 1.0, log: false };
        }
        let log = allow_log && lo > 0.0 && hi / lo > 1e3;
        let (lo, hi) = if log { (lo.log10(), hi.log10()) } else { (lo, hi) };
        let pad = if hi > lo { 0.05 * (hi - lo) } else { 0.5 * lo.abs().max(1.0) };
        Axis { lo: lo - pad, hi: hi + pad, log }
    }

    fn frac(&self, v: Real) -> Real {
        let v = if self.log { v.max(Real::MIN_POSITIVE).log10() } else { v };
        ((v - self.lo) / (self.hi - self.lo)).clamp(-0.05, 1.05)
    }

    fn ticks(&self) -> Vec<(Real, String)> {
        (0..=4)
            .map(|k| {
                let u = self.lo + (self.hi - self.lo) * k as Real / 4.0;
                let label = if self.log { format!("1e{u:.1}") } else { format_tick(u) };
                (k as Real / 4.0, label)
            })
            .collect()
    }
}

fn format_tick(v: Real) -> String {
    let a = v.abs();
    if a != 0.0 && !(1e-3..1e5).contains(&a) {
        format!("{v:.2e}")
    } else {
        format!("{v:.3}")
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn frame(out: &mut String, title: &str, x_label: &str, y_label: &str, x: &Axis, y: &Axis) {
    let (pw, ph) = (W - LEFT - RIGHT, H - TOP - BOTTOM);
    let _ = writeln!(out, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(out, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(out, r#"<text x="{}" y="24" text-anchor="middle" font-size="15">{}</text>"#, LEFT + pw / 2.0, escape(title));
    let _ = writeln!(out, r#"<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#);
    for (f, label) in x.ticks() {
        let px = LEFT + f * pw;
        let _ = writeln!(out, r##"<line x1="{px:.2}" y1="{TOP}" x2="{px:.2}" y2="{:.2}" stroke="#ddd"/>"##, TOP + ph);
        let _ = writeln!(out, r#"<text x="{px:.2}" y="{:.2}" text-anchor="middle">{label}</text>"#, TOP + ph + 18.0);
    }
    for (f, label) in y.ticks() {
        let py = TOP + ph - f * ph;
        let _ = writeln!(out, r##"<line x1="{LEFT}" y1="{py:.2}" x2="{:.2}" y2="{py:.2}" stroke="#ddd"/>"##, LEFT + pw);
        let _ = writeln!(out, r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{label}</text>"#, LEFT - 6.0, py + 4.0);
    }
    let _ = writeln!(out, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, LEFT + pw / 2.0, H - 18.0, escape(x_label));
    let _ = writeln!(
        out,
        r#"<text x="18" y="{0}" text-anchor="middle" transform="rotate(-90 18 {0})">{1}</text>"#,
        TOP + ph / 2.0,
        escape(y_label)
    );
}

fn legend(out: &mut String, names: &[String]) {
    for (i, name) in names.iter().enumerate() {
        let y = TOP + 12.0 + 18.0 * i as Real;
        let x = W - RIGHT + 14.0;
        let c = PALETTE[i % PALETTE.len()];
        let _ = writeln!(out, r#"<rect x="{x}" y="{:.2}" width="12" height="12" fill="{c}"/>"#, y - 10.0);
        let _ = writeln!(out, r#"<text x="{}" y="{y:.2}">{}</text>"#, x + 18.0, escape(name));
    }
}

/// Line chart with one marker per data point. Switches the y axis to log
/// scale when positive values span more than three decades.
pub fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let all = || series.iter().flat_map(|s| s.points.iter().copied());
    let x = Axis::fit(all().map(|p| p.0), false);
    let y = Axis::fit(all().map(|p| p.1), true);
    let y_label = if y.log { format!("{y_label} (log)") } else { y_label.to_string() };
    let mut out = String::new();
    frame(&mut out, title, x_label, &y_label, &x, &y);
    let (pw, ph) = (W - LEFT - RIGHT, H - TOP - BOTTOM);
    for (i, s) in series.iter().enumerate() {
        let c = PALETTE[i % PALETTE.len()];
        let pts: Vec<(Real, Real)> = s
            .points
            .iter()
            .filter(|p| p.1.is_finite())
            .map(|&(a, b)| (LEFT + x.frac(a) * pw, TOP + ph - y.frac(b) * ph))
            .collect();
        let path: Vec<String> = pts.iter().map(|(a, b)| format!("{a:.2},{b:.2}")).collect();
        let _ = writeln!(out, r#"<polyline fill="none" stroke="{c}" stroke-width="1.5" points="{}"/>"#, path.join(" "));
        for (a, b) in pts {
            let _ = writeln!(out, r#"<circle class="marker" cx="{a:.2}" cy="{b:.2}" r="2.5" fill="{c}"/>"#);
        }
    }
    legend(&mut out, &series.iter().map(|s| s.name.clone()).collect::<Vec<_>>());
    out.push_str("</svg>\n");
    out
}

/// 2-D point clouds, one colour per group.
pub fn scatter_plot(title: &str, groups: &[(String, Vec<(Real, Real)>)]) -> String {
    let all = || groups.iter().flat_map(|g| g.1.iter().copied());
    let x = Axis::fit(all().map(|p| p.0), false);
    let y = Axis::fit(all().map(|p| p.1), false);
    let mut out = String::new();
    frame(&mut out, title, "x0", "x1", &x, &y);
    let (pw, ph) = (W - LEFT - RIGHT, H - TOP - BOTTOM);
    for (i, (_, pts)) in groups.iter().enumerate() {
        let c = PALETTE[i % PALETTE.len()];
        for &(a, b) in pts.iter().filter(|p| p.0.is_finite() && p.1.is_finite()) {
            let _ = writeln!(
                out,
                r#"<circle cx="{:.2}" cy="{:.2}" r="1.6" fill="{c}" fill-opacity="0.5"/>"#,
                LEFT + x.frac(a) * pw,
                TOP + ph - y.frac(b) * ph
            );
        }
    }
    legend(&mut out, &groups.iter().map(|g| g.0.clone()).collect::<Vec<_>>());
    out.push_str("</svg>\n");
    out
}

fn metric_series(name: &str, records: &[MetricRecord], f: impl Fn(&MetricRecord) -> Real) -> Series {
    Series {
        name: name.into(),
        points: records.iter().map(|r| (r.iteration as Real, f(r))).collect(),
    }
}

type Groups = Vec<(String, Vec<(Real, Real)>)>;

fn read_samples(path: &Path) -> Result<Groups> {
    let text = std::fs::read_to_string(path)?;
    let mut groups: Groups = Vec::new();
    for line in text.lines().skip(1).filter(|l| !l.trim().is_empty()) {
        let f: Vec<&str> = line.split(',').collect();
        let bad = || Error::PlotInput(format!("malformed sample row `{line}` in {}", path.display()));
        if f.len() < 3 {
            return Err(bad());
        }
        let label: usize = f[0].parse().map_err(|_| bad())?;
        let a: Real = f[1].parse().map_err(|_| bad())?;
        let b: Real = f[2].parse().map_err(|_| bad())?;
        while groups.len() <= label {
            groups.push((format!("label {}", groups.len()), Vec::new()));
        }
        groups[label].1.push((a, b));
    }
    Ok(groups)
}

fn sample_dumps(dir: &Path) -> Result<Vec<PathBuf>> {
    let samples = dir.join("samples");
    if !samples.is_dir() {
        return Ok(Vec::new());
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(samples)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "csv"))
        .collect();
    files.sort();
    Ok(files)
}

fn load_run(dir: &Path) -> Result<Vec<MetricRecord>> {
    let path = dir.join("metrics.csv");
    if !path.is_file() {
        return Err(Error::PlotInput(format!("{} not found", path.display())));
    }
    let records = read_metrics(&path)?;
    if records.is_empty() {
        return Err(Error::PlotInput(format!("{} has no rows", path.display())));
    }
    Ok(records)
}

fn plot_run(dir: &Path, records: &[MetricRecord]) -> Result<Vec<PathBuf>> {
    let name = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let dumps = sample_dumps(dir)?;
    let mut charts = vec![
        ("sw2.svg", line_chart(&format!("{name}: sliced W2 to held-out data"), "generator update", "SW2", &[metric_series("sw2", records, |r| r.sw2)])),
        (
            "variance.svg",
            line_chart(&format!("{name}: mean per-sample variance"), "generator update", "variance", &[metric_series("mean_of_vars", records, |r| r.mean_of_vars)]),
        ),
        (
            "coverage.svg",
            line_chart(&format!("{name}: mode coverage"), "generator update", "fraction", &[metric_series("mode_coverage", records, |r| r.mode_coverage)]),
        ),
        (
            "losses.svg",
            line_chart(
                &format!("{name}: losses"),
                "generator update",
                "loss",
                &[
                    metric_series("proxy", records, |r| r.loss_proxy),
                    metric_series("fake", records, |r| r.loss_fake),
                    metric_series("regularizer", records, |r| r.loss_reg),
                ],
            ),
        ),
    ];
    if let Some(last) = dumps.last() {
        let stem = last.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        charts.push(("samples_final.svg", scatter_plot(&format!("{name}: samples at {stem}"), &read_samples(last)?)));
    }
    let out = dir.join("plots");
    std::fs::create_dir_all(&out)?;
    let mut written = Vec::new();
    for (file, svg) in charts {
        let p = out.join(file);
        std::fs::write(&p, svg)?;
        written.push(p);
    }
    Ok(written)
}

/// Plots a run directory, or every run of a preset directory plus overlays.
///
/// Nothing is written unless all metrics inputs are present and non-empty.
pub fn plot_dir(dir: &Path) -> Result<Vec<PathBuf>> {
    if dir.join("metrics.csv").exists() {
        let records = load_run(dir)?;
        return plot_run(dir, &records);
    }
    let runs_dir = dir.join("runs");
    if !runs_dir.is_dir() {
        return Err(Error::PlotInput(format!("{} has neither metrics.csv nor runs/", dir.display())));
    }
    let mut runs: Vec<PathBuf> = std::fs::read_dir(&runs_dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    runs.sort();
    let loaded = runs
        .iter()
        .map(|r| load_run(r).map(|m| (r.clone(), m)))
        .collect::<Result<Vec<_>>>()?;
    if loaded.is_empty() {
        return Err(Error::PlotInput(format!("{} contains no runs", runs_dir.display())));
    }
    let mut written = Vec::new();
    for (r, m) in &loaded {
        written.extend(plot_run(r, m)?);
    }
    let name = |p: &Path| p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let sw: Vec<Series> = loaded.iter().map(|(r, m)| metric_series(&name(r), m, |x| x.sw2)).collect();
    let var: Vec<Series> = loaded.iter().map(|(r, m)| metric_series(&name(r), m, |x| x.mean_of_vars)).collect();
    let out = dir.join("plots");
    std::fs::create_dir_all(&out)?;
    for (file, svg) in [
        ("sw2.svg", line_chart("sliced W2 to held-out data", "generator update", "SW2", &sw)),
        ("variance.svg", line_chart("mean per-sample variance", "generator update", "variance", &var)),
    ] {
        let p = out.join(file);
        std::fs::write(&p, svg)?;
        written.push(p);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn series(n: usize) -> Series {
        Series {
            name: "s".into(),
            points: (1..=n).map(|i| (i as Real * 100.0, 1.0 / i as Real)).collect(),
        }
    }

    #[test]
    fn one_marker_per_point() {
        let svg = line_chart("t", "x", "y", &[series(7)]);
        assert_eq!(svg.matches(r#"class="marker""#).count(), 7);
        assert!(svg.starts_with("<svg") && svg.ends_with("</svg>\n"));
    }

    #[test]
    fn deterministic_output() {
        assert_eq!(line_chart("t", "x", "y", &[series(5)]), line_chart("t", "x", "y", &[series(5)]));
    }

    #[test]
    fn log_axis_for_wide_ranges() {
        let s = Series {
            name: "v".into(),
            points: vec![(0.0, 1.0), (1.0, 1e6)],
        };
        assert!(line_chart("t", "x", "var", &[s]).contains("var (log)"));
        assert!(!line_chart("t", "x", "var", &[series(3)]).contains("(log)"));
    }

    #[test]
    fn titles_are_escaped() {
        assert!(line_chart("a<b", "x", "y", &[series(2)]).contains("a&lt;b"));
    }

    #[test]
    fn missing_or_empty_metrics() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(plot_dir(dir.path()), Err(Error::PlotInput(_))));
        std::fs::write(dir.path().join("metrics.csv"), format!("{}\n", MetricRecord::CSV_HEADER)).unwrap();
        assert!(matches!(plot_dir(dir.path()), Err(Error::PlotInput(_))));
        assert!(!dir.path().join("plots").exists());
    }
}
