//! Native SVG rendering of learning curves and policy heatmaps.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use ecrm::optim::fmt_f64;
use ecrm::policy::to_probabilities;
use ecrm::TwoPartPolicy;

use crate::error::{CliError, Result};
use crate::run::{setting_stem, Manifest, SettingEntry};

const PALETTE: [&str; 10] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf", "#7f7f7f", "#bcbd22",
];

/// Plotted points per series; longer curves are strided.
const MAX_POINTS: usize = 1000;

/// One aggregate curve: x, mean, std.
#[derive(Debug, Clone, PartialEq)]
pub struct Curve {
    pub x_label: String,
    pub y_label: String,
    pub rows: Vec<(f64, f64, f64)>,
}

/// Reads an aggregate CSV: the first column is x, then `<name>_mean` and `<name>_std`.
pub fn read_aggregate(path: &Path) -> Result<Curve> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| CliError::input(path, e.to_string()))?;
    let headers = reader
        .headers()
        .map_err(|e| CliError::input(path, e.to_string()))?
        .clone();
    let find = |suffix: &str| {
        headers.iter().position(|h| h.ends_with(suffix)).ok_or_else(|| {
            CliError::input(
                path,
                format!(
                    "missing column `*{suffix}` in header `{}`",
                    headers.iter().collect::<Vec<_>>().join(",")
                ),
            )
        })
    };
    let x_label = headers
        .get(0)
        .filter(|h| !h.ends_with("_mean") && !h.ends_with("_std"))
        .ok_or_else(|| CliError::input(path, "missing x column"))?
        .to_string();
    let (mean_col, std_col) = (find("_mean")?, find("_std")?);
    let y_label = headers[mean_col].trim_end_matches("_mean").to_string();
    let mut rows = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| CliError::input(path, e.to_string()))?;
        let field = |c: usize| -> Result<f64> {
            record
                .get(c)
                .and_then(|v| v.parse::<f64>().ok())
                .ok_or_else(|| CliError::input(path, format!("row {}: bad value in column {}", i + 2, &headers[c])))
        };
        rows.push((field(0)?, field(mean_col)?, field(std_col)?));
    }
    Ok(Curve { x_label, y_label, rows })
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Round tick positions covering `[lo, hi]`.
fn ticks(lo: f64, hi: f64) -> Vec<f64> {
    let raw = (hi - lo) / 5.0;
    let mag = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 5.0, 10.0]
        .iter()
        .map(|m| m * mag)
        .find(|s| *s >= raw)
        .unwrap_or(10.0 * mag);
    let mut out = Vec::new();
    let mut t = (lo / step).ceil() * step;
    while t <= hi + 1e-9 * step {
        out.push(if t.abs() < 1e-12 * step { 0.0 } else { t });
        t += step;
    }
    out
}

fn tick_label(v: f64) -> String {
    if v.abs() >= 1e4 || (v != 0.0 && v.abs() < 1e-3) {
        format!("{v:.1e}")
    } else {
        let s = format!("{v:.4}");
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    }
}

/// Trailing moving average of mean and std over `window` rows.
pub fn smooth(curve: &Curve, window: usize) -> Curve {
    let w = window.max(1);
    let mut rows = Vec::with_capacity(curve.rows.len());
    let (mut sm, mut ss) = (0.0, 0.0);
    for (i, &(x, m, s)) in curve.rows.iter().enumerate() {
        sm += m;
        ss += s;
        if i >= w {
            sm -= curve.rows[i - w].1;
            ss -= curve.rows[i - w].2;
        }
        let n = (i + 1).min(w) as f64;
        rows.push((x, sm / n, ss / n));
    }
    Curve { rows, ..curve.clone() }
}

/// At most `max` evenly strided rows, always keeping the last one.
fn thin<T: Copy>(rows: &[T], max: usize) -> Vec<T> {
    if rows.len() <= max {
        return rows.to_vec();
    }
    let stride = rows.len().div_ceil(max);
    let mut out: Vec<T> = rows.iter().step_by(stride).copied().collect();
    if !(rows.len() - 1).is_multiple_of(stride) {
        out.push(rows[rows.len() - 1]);
    }
    out
}

fn padded(lo: f64, hi: f64) -> (f64, f64) {
    if hi - lo > 1e-12 * hi.abs().max(1.0) {
        let pad = 0.05 * (hi - lo);
        (lo - pad, hi + pad)
    } else {
        let pad = 0.5 * hi.abs().max(1.0);
        (lo - pad, hi + pad)
    }
}

/// Line chart with one mean line and ±std band per labelled curve.
pub fn line_chart(title: &str, curves: &[(String, Curve)]) -> String {
    const W: f64 = 780.0;
    const H: f64 = 440.0;
    let (left, right, top, bottom) = (70.0, 180.0, 40.0, 50.0);
    let points = curves.iter().flat_map(|(_, c)| c.rows.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, m, s) in points.filter(|r| r.1.is_finite() && r.2.is_finite()) {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(m - s);
        y1 = y1.max(m + s);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    let (y0, y1) = padded(y0, y1);
    let pw = W - left - right;
    let ph = H - top - bottom;
    let sx = |x: f64| left + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| top + (y1 - y) / (y1 - y0) * ph;

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(svg, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="24" text-anchor="middle" font-size="15">{}</text>"#,
        left + pw / 2.0,
        escape(title)
    );
    let _ = writeln!(
        svg,
        r##"<g class="axes" stroke="#444" fill="none"><rect x="{left}" y="{top}" width="{pw}" height="{ph}"/></g>"##
    );
    for t in ticks(x0, x1) {
        let x = sx(t);
        let _ = writeln!(
            svg,
            r##"<line x1="{x:.2}" y1="{}" x2="{x:.2}" y2="{}" stroke="#ddd"/><text x="{x:.2}" y="{}" text-anchor="middle">{}</text>"##,
            top,
            top + ph,
            top + ph + 16.0,
            tick_label(t)
        );
    }
    for t in ticks(y0, y1) {
        let y = sy(t);
        let _ = writeln!(
            svg,
            r##"<line x1="{left}" y1="{y:.2}" x2="{}" y2="{y:.2}" stroke="#ddd"/><text x="{}" y="{:.2}" text-anchor="end">{}</text>"##,
            left + pw,
            left - 6.0,
            y + 4.0,
            tick_label(t)
        );
    }
    let (x_label, y_label) = curves
        .first()
        .map(|(_, c)| (c.x_label.clone(), c.y_label.clone()))
        .unwrap_or_default();
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        left + pw / 2.0,
        H - 10.0,
        escape(&x_label)
    );
    let _ = writeln!(
        svg,
        r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">{}</text>"#,
        top + ph / 2.0,
        top + ph / 2.0,
        escape(&y_label)
    );

    for (i, (label, curve)) in curves.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let finite: Vec<_> = curve
            .rows
            .iter()
            .filter(|r| r.1.is_finite() && r.2.is_finite())
            .collect();
        let rows = thin(&finite, MAX_POINTS);
        let mut band = String::new();
        for (j, r) in rows.iter().enumerate() {
            let _ = write!(
                band,
                "{}{:.2},{:.2} ",
                if j == 0 { "M" } else { "L" },
                sx(r.0),
                sy(r.1 + r.2)
            );
        }
        for r in rows.iter().rev() {
            let _ = write!(band, "L{:.2},{:.2} ", sx(r.0), sy(r.1 - r.2));
        }
        let line: Vec<String> = rows.iter().map(|r| format!("{:.2},{:.2}", sx(r.0), sy(r.1))).collect();
        let _ = writeln!(svg, r#"<g class="series" data-label="{}">"#, escape(label));
        if !rows.is_empty() {
            let _ = writeln!(
                svg,
                r#"<path class="band" d="{}Z" fill="{color}" fill-opacity="0.2" stroke="none"/>"#,
                band.trim_end()
            );
        }
        let _ = writeln!(
            svg,
            r#"<polyline class="mean" points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#,
            line.join(" ")
        );
        let _ = writeln!(svg, "</g>");
    }

    let _ = writeln!(svg, r#"<g class="legend">"#);
    for (i, (label, _)) in curves.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let y = top + 10.0 + 20.0 * i as f64;
        let x = left + pw + 16.0;
        let _ = writeln!(
            svg,
            r#"<rect x="{x}" y="{}" width="18" height="4" fill="{color}"/><text x="{}" y="{}">{}</text>"#,
            y - 2.0,
            x + 24.0,
            y + 4.0,
            escape(label)
        );
    }
    let _ = writeln!(svg, "</g>\n</svg>");
    svg
}

/// One `|H| × |A|` grid: rows are the next η, columns the action.
pub struct Panel {
    pub title: String,
    pub probs: Vec<Vec<f64>>,
}

/// Grayscale heatmap; a lighter cell is a more probable `(a, η')`.
pub fn heatmap(title: &str, action_labels: &[String], eta_labels: &[String], panels: &[Vec<Panel>]) -> String {
    const CELL: f64 = 30.0;
    let n_a = action_labels.len() as f64;
    let n_h = eta_labels.len() as f64;
    let (pad, label_w, title_h) = (24.0, 44.0, 34.0);
    let panel_w = label_w + n_a * CELL + pad;
    let panel_h = title_h + n_h * CELL + pad;
    let cols = panels.iter().map(Vec::len).max().unwrap_or(0) as f64;
    let w = 20.0 + cols * panel_w;
    let h = 60.0 + panels.len() as f64 * panel_h;
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(svg, r##"<rect width="{w}" height="{h}" fill="#f4f4f4"/>"##);
    let _ = writeln!(svg, r#"<text x="10" y="20" font-size="14">{}</text>"#, escape(title));
    let _ = writeln!(
        svg,
        r#"<text x="10" y="38">lighter = higher probability; rows: next eta, columns: action</text>"#
    );
    for (r, row) in panels.iter().enumerate() {
        for (c, panel) in row.iter().enumerate() {
            let ox = 10.0 + c as f64 * panel_w;
            let oy = 50.0 + r as f64 * panel_h;
            let _ = writeln!(
                svg,
                r#"<g class="panel"><text x="{}" y="{}">{}</text>"#,
                ox,
                oy + 14.0,
                escape(&panel.title)
            );
            for (a, label) in action_labels.iter().enumerate() {
                let _ = writeln!(
                    svg,
                    r#"<text x="{:.1}" y="{}" text-anchor="middle" font-size="9">{}</text>"#,
                    ox + label_w + (a as f64 + 0.5) * CELL,
                    oy + title_h - 4.0,
                    escape(label)
                );
            }
            for (hi, probs) in panel.probs.iter().enumerate() {
                let y = oy + title_h + hi as f64 * CELL;
                let _ = writeln!(
                    svg,
                    r#"<text x="{}" y="{:.1}" text-anchor="end" font-size="9">{}</text>"#,
                    ox + label_w - 4.0,
                    y + CELL / 2.0 + 3.0,
                    escape(&eta_labels[hi])
                );
                for (a, &p) in probs.iter().enumerate() {
                    let v = (255.0 * p.clamp(0.0, 1.0)).round() as u8;
                    let _ = writeln!(
                        svg,
                        r##"<rect class="cell" x="{:.1}" y="{y:.1}" width="{CELL}" height="{CELL}" fill="rgb({v},{v},{v})" stroke="#888"><title>{}</title></rect>"##,
                        ox + label_w + a as f64 * CELL,
                        fmt_f64(p)
                    );
                }
            }
            let _ = writeln!(svg, "</g>");
        }
    }
    let _ = writeln!(svg, "</svg>");
    svg
}

/// Panels of `π₂(·,·|s,η)` for each requested state and every incoming η.
pub fn policy_panels(policy: &TwoPartPolicy, manifest: &Manifest, states: &[usize]) -> Result<Vec<Vec<Panel>>> {
    let p = to_probabilities(policy)?;
    let env = &manifest.env;
    let (n_a, n_h) = (env.n_actions, env.n_eta);
    if p.p2.rows() != env.n_states * n_h || p.p2.cols() != n_a * n_h {
        return Err(CliError::Usage("policy shape does not match the manifest".into()));
    }
    Ok(states
        .iter()
        .map(|&s| {
            (0..n_h)
                .map(|h| {
                    let row = p.p2.row(s * n_h + h);
                    Panel {
                        title: format!("s={} eta={}", env.state_labels[s], fmt_f64(env.eta_grid[h])),
                        probs: (0..n_h)
                            .map(|hn| (0..n_a).map(|a| row[a * n_h + hn]).collect())
                            .collect(),
                    }
                })
                .collect()
        })
        .collect())
}

fn write_svg(path: PathBuf, svg: &str, written: &mut Vec<PathBuf>) -> Result<()> {
    fs::write(&path, svg).map_err(|e| CliError::io(&path, e))?;
    written.push(path);
    Ok(())
}

fn distinct(values: impl Iterator<Item = f64>) -> Vec<f64> {
    let mut out: Vec<f64> = Vec::new();
    for v in values {
        if !out.contains(&v) {
            out.push(v);
        }
    }
    out
}

/// Renders every chart of an artifact directory into `<dir>/plots`.
///
/// Curves are grouped per κ with one series per λ, or per λ with one series
/// per κ when λ is not swept. Heatmaps cover the first run of each setting
/// unless `all_runs` is set; `states` defaults to every non-terminal state.
/// A `window` above 1 smooths the curves with a trailing moving average.
pub fn plot(dir: &Path, states: Option<&[usize]>, all_runs: bool, window: usize) -> Result<Vec<PathBuf>> {
    let manifest = Manifest::read(dir)?;
    let out = dir.join("plots");
    fs::create_dir_all(&out).map_err(|e| CliError::io(&out, e))?;
    let mut written = Vec::new();

    let lambdas = distinct(manifest.settings.iter().map(|s| s.lambda));
    let kappas = distinct(manifest.settings.iter().map(|s| s.kappa));
    let by_lambda = lambdas.len() > 1 || kappas.len() == 1;
    let groups = if by_lambda { &kappas } else { &lambdas };
    let algorithm = serde_json::to_value(manifest.config.algorithm)?;
    let algorithm = algorithm.as_str().unwrap_or_default();
    for &g in groups {
        let members: Vec<&SettingEntry> = manifest
            .settings
            .iter()
            .filter(|s| if by_lambda { s.kappa == g } else { s.lambda == g })
            .collect();
        let mut curves = Vec::new();
        for s in &members {
            let curve = smooth(&read_aggregate(&dir.join(&s.aggregate))?, window);
            let label = if by_lambda {
                format!("λ = {}", fmt_f64(s.lambda))
            } else {
                format!("κ = {}", fmt_f64(s.kappa))
            };
            curves.push((label, curve));
        }
        let (title, name) = if by_lambda {
            (
                format!("{algorithm}, κ = {}", fmt_f64(g)),
                format!("curves_kap{}.svg", fmt_f64(g)),
            )
        } else {
            (
                format!("{algorithm}, λ = {}", fmt_f64(g)),
                format!("curves_lam{}.svg", fmt_f64(g)),
            )
        };
        let title = if window > 1 {
            format!("{title}, moving average over {window}")
        } else {
            title
        };
        write_svg(out.join(name), &line_chart(&title, &curves), &mut written)?;
    }

    let env = &manifest.env;
    let default_states: Vec<usize> = (0..env.n_states).filter(|s| !env.terminal_states.contains(s)).collect();
    let states = states.unwrap_or(&default_states);
    if let Some(&s) = states.iter().find(|&&s| s >= env.n_states) {
        return Err(CliError::Usage(format!(
            "state {s} out of range (|S| = {})",
            env.n_states
        )));
    }
    let eta_labels: Vec<String> = env.eta_grid.iter().map(|e| format!("eta'={}", fmt_f64(*e))).collect();
    for s in &manifest.settings {
        for r in s
            .runs
            .iter()
            .filter(|r| r.status == "ok")
            .take(if all_runs { usize::MAX } else { 1 })
        {
            let path = dir.join(&r.policy);
            let text = fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
            let policy = TwoPartPolicy::from_json(&text).map_err(|e| CliError::input(&path, e.to_string()))?;
            let panels = policy_panels(&policy, &manifest, states)?;
            let stem = setting_stem(s.lambda, s.kappa);
            let title = format!(
                "pi2 rows, λ = {}, κ = {}, run {}",
                fmt_f64(s.lambda),
                fmt_f64(s.kappa),
                r.run
            );
            let svg = heatmap(&title, &env.action_labels, &eta_labels, &panels);
            write_svg(
                out.join(format!("heatmap_{stem}_run{:03}.svg", r.run)),
                &svg,
                &mut written,
            )?;
        }
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ticks_are_round_and_cover_the_range() {
        assert_eq!(ticks(0.0, 10.0), vec![0.0, 2.0, 4.0, 6.0, 8.0, 10.0]);
        let t = ticks(6.7, 7.3);
        assert!(t.first().unwrap() >= &6.7 && t.last().unwrap() <= &7.3);
        assert!(t.len() >= 3);
    }

    #[test]
    fn smoothing_averages_trailing_rows() {
        let c = Curve {
            x_label: "x".into(),
            y_label: "y".into(),
            rows: vec![(0.0, 1.0, 0.0), (1.0, 3.0, 2.0), (2.0, 5.0, 4.0)],
        };
        assert_eq!(
            smooth(&c, 2).rows,
            vec![(0.0, 1.0, 0.0), (1.0, 2.0, 1.0), (2.0, 4.0, 3.0)]
        );
        assert_eq!(smooth(&c, 1), c);
    }

    #[test]
    fn thinning_keeps_endpoints() {
        let rows: Vec<usize> = (0..10).collect();
        assert_eq!(thin(&rows, 4), vec![0, 3, 6, 9]);
        assert_eq!(thin(&rows, 3), vec![0, 4, 8, 9]);
        assert_eq!(thin(&rows, 20), rows);
    }

    #[test]
    fn escape_handles_markup() {
        assert_eq!(escape("a<b & c>"), "a&lt;b &amp; c&gt;");
    }
}
