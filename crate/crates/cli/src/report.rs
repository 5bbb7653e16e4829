//! Static SVG figures rendered from a run's CSV artifacts, and nothing else.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("missing artifact {}", .0.display())]
    MissingArtifact(PathBuf),
    #[error("cannot read {}: {message}", path.display())]
    Malformed { path: PathBuf, message: String },
    #[error("cannot write {}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
}

pub struct ReportSummary {
    pub figures: Vec<PathBuf>,
    pub notices: Vec<String>,
}

struct Table {
    path: PathBuf,
    headers: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Table {
    fn read(path: &Path) -> Result<Table, ReportError> {
        if !path.is_file() {
            return Err(ReportError::MissingArtifact(path.to_path_buf()));
        }
        let malformed = |e: csv::Error| ReportError::Malformed { path: path.to_path_buf(), message: e.to_string() };
        let mut r = csv::Reader::from_path(path).map_err(malformed)?;
        let headers = r.headers().map_err(malformed)?.iter().map(String::from).collect();
        let rows = r
            .records()
            .map(|rec| rec.map(|rec| rec.iter().map(String::from).collect()))
            .collect::<Result<_, _>>()
            .map_err(malformed)?;
        Ok(Table { path: path.to_path_buf(), headers, rows })
    }

    fn col(&self, name: &str) -> Result<usize, ReportError> {
        self.headers.iter().position(|h| h == name).ok_or_else(|| ReportError::Malformed {
            path: self.path.clone(),
            message: format!("no column {name}"),
        })
    }

    fn num(&self, row: &[String], col: usize) -> Result<f64, ReportError> {
        row[col].parse().map_err(|_| ReportError::Malformed {
            path: self.path.clone(),
            message: format!("{:?} is not a number", row[col]),
        })
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

struct Svg {
    width: f64,
    height: f64,
    body: String,
}

impl Svg {
    fn new(width: f64, height: f64, title: &str) -> Svg {
        let mut svg = Svg { width, height, body: String::new() };
        svg.text(width / 2.0, 22.0, title, 15.0, "middle", "bold");
        svg
    }

    fn rect(&mut self, x: f64, y: f64, w: f64, h: f64, fill: &str, class: &str) {
        let _ = writeln!(
            self.body,
            r##"<rect class="{class}" x="{x:.1}" y="{y:.1}" width="{w:.1}" height="{h:.1}" fill="{fill}" stroke="#ffffff"/>"##
        );
    }

    fn text(&mut self, x: f64, y: f64, s: &str, size: f64, anchor: &str, weight: &str) {
        let _ = writeln!(
            self.body,
            r##"<text x="{x:.1}" y="{y:.1}" font-size="{size}" text-anchor="{anchor}" font-weight="{weight}">{}</text>"##,
            escape(s)
        );
    }

    fn vtext(&mut self, x: f64, y: f64, s: &str, size: f64) {
        let _ = writeln!(
            self.body,
            r##"<text x="{x:.1}" y="{y:.1}" font-size="{size}" text-anchor="end" transform="rotate(-45 {x:.1} {y:.1})">{}</text>"##,
            escape(s)
        );
    }

    fn line(&mut self, x1: f64, y1: f64, x2: f64, y2: f64, stroke: &str, width: f64) {
        let _ = writeln!(
            self.body,
            r##"<line x1="{x1:.1}" y1="{y1:.1}" x2="{x2:.1}" y2="{y2:.1}" stroke="{stroke}" stroke-width="{width}"/>"##
        );
    }

    fn polyline(&mut self, points: &[(f64, f64)], stroke: &str) {
        let pts: Vec<String> = points.iter().map(|(x, y)| format!("{x:.1},{y:.1}")).collect();
        let _ = writeln!(
            self.body,
            r##"<polyline points="{}" fill="none" stroke="{stroke}" stroke-width="2"/>"##,
            pts.join(" ")
        );
        for (x, y) in points {
            let _ = writeln!(self.body, r##"<circle cx="{x:.1}" cy="{y:.1}" r="3" fill="{stroke}"/>"##);
        }
    }

    fn finish(self) -> String {
        format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\" font-family=\"sans-serif\">\n<rect width=\"{w}\" height=\"{h}\" fill=\"#ffffff\"/>\n{}</svg>\n",
            self.body,
            w = self.width,
            h = self.height
        )
    }
}

const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"];

fn mix(a: (u8, u8, u8), b: (u8, u8, u8), t: f64) -> String {
    let t = t.clamp(0.0, 1.0);
    let ch = |x: u8, y: u8| (x as f64 + (y as f64 - x as f64) * t).round() as u8;
    format!("#{:02x}{:02x}{:02x}", ch(a.0, b.0), ch(a.1, b.1), ch(a.2, b.2))
}

/// Blue below zero, red above, saturating at ±2.
fn diverging(v: f64) -> String {
    let white = (255, 255, 255);
    if v < 0.0 {
        mix(white, (49, 97, 168), -v / 2.0)
    } else {
        mix(white, (190, 40, 40), v / 2.0)
    }
}

fn sequential(p: f64) -> String {
    mix((247, 251, 255), (8, 69, 148), p)
}

fn nice_max(v: f64) -> f64 {
    if v <= 0.0 {
        return 1.0;
    }
    let mag = 10f64.powf(v.log10().floor());
    [1.0, 2.0, 2.5, 5.0, 10.0].iter().map(|m| m * mag).find(|m| *m >= v).unwrap_or(10.0 * mag)
}

/// Left axis from 0 to `max` with five ticks.
fn y_axis(svg: &mut Svg, x: f64, top: f64, bottom: f64, max: f64) {
    svg.line(x, top, x, bottom, "#333333", 1.0);
    for i in 0..=4 {
        let v = max * i as f64 / 4.0;
        let y = bottom - (bottom - top) * i as f64 / 4.0;
        svg.line(x - 4.0, y, x, y, "#333333", 1.0);
        svg.text(x - 6.0, y + 4.0, &format_tick(v), 10.0, "end", "normal");
    }
}

fn format_tick(v: f64) -> String {
    if v.fract() == 0.0 {
        format!("{v:.0}")
    } else {
        format!("{v:.2}")
    }
}

fn line_chart(title: &str, x_labels: &[String], series: &[(String, Vec<f64>)], y_label: &str) -> String {
    let (w, h) = (760.0, 380.0);
    let (left, right, top, bottom) = (70.0, w - 150.0, 50.0, h - 70.0);
    let mut svg = Svg::new(w, h, title);
    let max = nice_max(series.iter().flat_map(|(_, v)| v.iter().copied()).fold(0.0, f64::max));
    y_axis(&mut svg, left, top, bottom, max);
    svg.line(left, bottom, right, bottom, "#333333", 1.0);
    svg.vtext(18.0, (top + bottom) / 2.0, y_label, 11.0);
    let n = x_labels.len().max(1);
    let step = (right - left) / n as f64;
    let x_of = |i: usize| left + step * (i as f64 + 0.5);
    let label_every = n.div_ceil(20);
    for (i, l) in x_labels.iter().enumerate() {
        if i % label_every == 0 {
            svg.vtext(x_of(i), bottom + 14.0, l, 10.0);
        }
    }
    for (s, (name, values)) in series.iter().enumerate() {
        let color = PALETTE[s % PALETTE.len()];
        let pts: Vec<(f64, f64)> =
            values.iter().enumerate().map(|(i, v)| (x_of(i), bottom - (bottom - top) * v / max)).collect();
        svg.polyline(&pts, color);
        let ly = top + 18.0 * s as f64;
        svg.rect(right + 15.0, ly - 9.0, 12.0, 12.0, color, "legend");
        svg.text(right + 32.0, ly + 1.0, name, 11.0, "start", "normal");
    }
    svg.finish()
}

fn monthly_trends(dir: &Path) -> Result<Vec<(String, String)>, ReportError> {
    let t = Table::read(&dir.join("sessions.csv"))?;
    let (start, student) = (t.col("start")?, t.col("student_id")?);
    let mut months: BTreeMap<String, (BTreeSet<String>, usize)> = BTreeMap::new();
    for row in &t.rows {
        let month = row[start].get(..7).unwrap_or_default().to_string();
        let entry = months.entry(month).or_default();
        entry.0.insert(row[student].clone());
        entry.1 += 1;
    }
    let labels: Vec<String> = months.keys().cloned().collect();
    let active: Vec<f64> = months.values().map(|(s, _)| s.len() as f64).collect();
    let per_user: Vec<f64> = months.values().map(|(s, n)| *n as f64 / s.len() as f64).collect();
    Ok(vec![
        (
            "monthly_active_users.svg".into(),
            line_chart("Monthly active students", &labels, &[("active students".into(), active)], "students"),
        ),
        (
            "monthly_sessions_per_user.svg".into(),
            line_chart(
                "Mean sessions per active student",
                &labels,
                &[("sessions / student".into(), per_user)],
                "sessions",
            ),
        ),
    ])
}

fn centroid_heatmap(dir: &Path) -> Result<String, ReportError> {
    let t = Table::read(&dir.join("centroids.csv"))?;
    let label = t.col("label")?;
    let first_feature = t.col("size")? + 1;
    let features = &t.headers[first_feature..];
    let (cell_w, cell_h) = (74.0, 40.0);
    let (left, top) = (130.0, 140.0);
    let w = left + cell_w * features.len() as f64 + 30.0;
    let h = top + cell_h * t.rows.len() as f64 + 40.0;
    let mut svg = Svg::new(w, h, "Cluster centroids (standardized feature means)");
    for (j, f) in features.iter().enumerate() {
        svg.vtext(left + cell_w * (j as f64 + 0.5), top - 8.0, f, 11.0);
    }
    for (i, row) in t.rows.iter().enumerate() {
        let y = top + cell_h * i as f64;
        svg.text(left - 8.0, y + cell_h / 2.0 + 4.0, &row[label], 12.0, "end", "normal");
        for j in 0..features.len() {
            let v = t.num(row, first_feature + j)?;
            let x = left + cell_w * j as f64;
            svg.rect(x, y, cell_w, cell_h, &diverging(v), "cell");
            svg.text(x + cell_w / 2.0, y + cell_h / 2.0 + 4.0, &format!("{v:.2}"), 11.0, "middle", "normal");
        }
    }
    Ok(svg.finish())
}

fn weekly_distribution(dir: &Path) -> Result<String, ReportError> {
    let a = Table::read(&dir.join("assignments.csv"))?;
    let f = Table::read(&dir.join("features.csv"))?;
    let (a_id, a_label) = (a.col("session_id")?, a.col("label")?);
    let (f_id, f_week) = (f.col("session_id")?, f.col("week_progress")?);
    let week: BTreeMap<&str, u32> = f
        .rows
        .iter()
        .map(|r| Ok((r[f_id].as_str(), f.num(r, f_week)? as u32)))
        .collect::<Result<_, ReportError>>()?;
    let mut labels: Vec<String> = Vec::new();
    let mut counts: BTreeMap<(String, u32), usize> = BTreeMap::new();
    for r in &a.rows {
        if !labels.contains(&r[a_label]) {
            labels.push(r[a_label].clone());
        }
        if let Some(&w) = week.get(r[a_id].as_str()) {
            *counts.entry((r[a_label].clone(), w)).or_default() += 1;
        }
    }
    let max_week = counts.keys().map(|(_, w)| *w).max().unwrap_or(1);
    let weeks: Vec<String> = (1..=max_week).map(|w| format!("W{w}")).collect();
    let series: Vec<(String, Vec<f64>)> = labels
        .iter()
        .map(|l| (l.clone(), (1..=max_week).map(|w| *counts.get(&(l.clone(), w)).unwrap_or(&0) as f64).collect()))
        .collect();
    Ok(line_chart("Sessions per academic week by engagement type", &weeks, &series, "sessions"))
}

fn share_charts(dir: &Path, notices: &mut Vec<String>) -> Result<Vec<(String, String)>, ReportError> {
    let t = Table::read(&dir.join("shares.csv"))?;
    let (sg, gr, lb, n, p, lo, hi) =
        (t.col("subgroup")?, t.col("group")?, t.col("label")?, t.col("n")?, t.col("proportion")?, t.col("lo")?, t.col("hi")?);
    let mut dims: BTreeMap<String, BTreeMap<String, Vec<&Vec<String>>>> = BTreeMap::new();
    for r in &t.rows {
        dims.entry(r[sg].clone()).or_default().entry(r[gr].clone()).or_default().push(r);
    }
    for expected in ["all", "selectivity", "discipline"] {
        if !dims.contains_key(expected) {
            notices.push(format!("no sessions for subgroup {expected}; share chart omitted"));
        }
    }
    let mut out = Vec::new();
    for (dim, groups) in &dims {
        let mut kept: Vec<(&String, &Vec<&Vec<String>>)> = Vec::new();
        for (g, rows) in groups {
            if rows.iter().all(|r| r[n] == "0") {
                notices.push(format!("subgroup {dim}={g} is empty; omitted"));
            } else {
                kept.push((g, rows));
            }
        }
        if kept.is_empty() {
            notices.push(format!("every group of {dim} is empty; share chart omitted"));
            continue;
        }
        let labels: Vec<String> = kept[0].1.iter().map(|r| r[lb].clone()).collect();
        let (w, h) = (160.0 + 70.0 * (labels.len() * kept.len()) as f64 + 40.0 * kept.len() as f64, 380.0);
        let (left, top, bottom) = (70.0, 50.0, h - 70.0);
        let mut svg = Svg::new(w.max(420.0), h, &format!("Engagement type shares by {dim} (95% CI)"));
        y_axis(&mut svg, left, top, bottom, 1.0);
        let bar = 60.0;
        let mut x = left + 20.0;
        for (gi, (g, rows)) in kept.iter().enumerate() {
            let group_start = x;
            for (li, r) in rows.iter().enumerate() {
                let v = t.num(r, p)?;
                let y = bottom - (bottom - top) * v;
                svg.rect(x, y, bar, bottom - y, PALETTE[li % PALETTE.len()], "bar");
                if let (Ok(l), Ok(u)) = (r[lo].parse::<f64>(), r[hi].parse::<f64>()) {
                    let (yl, yu) = (bottom - (bottom - top) * l, bottom - (bottom - top) * u);
                    let cx = x + bar / 2.0;
                    svg.line(cx, yl, cx, yu, "#000000", 1.5);
                    svg.line(cx - 6.0, yl, cx + 6.0, yl, "#000000", 1.5);
                    svg.line(cx - 6.0, yu, cx + 6.0, yu, "#000000", 1.5);
                }
                svg.text(x + bar / 2.0, y - 6.0, &format!("{:.1}%", v * 100.0), 10.0, "middle", "normal");
                x += bar + 10.0;
            }
            svg.text((group_start + x - 10.0) / 2.0, bottom + 18.0, g, 12.0, "middle", "bold");
            x += 30.0;
            if gi == 0 {
                for (li, l) in labels.iter().enumerate() {
                    let lx = left + 10.0 + 110.0 * li as f64;
                    svg.rect(lx, h - 30.0, 12.0, 12.0, PALETTE[li % PALETTE.len()], "legend");
                    svg.text(lx + 16.0, h - 20.0, l, 11.0, "start", "normal");
                }
            }
        }
        svg.line(left, bottom, x, bottom, "#333333", 1.0);
        out.push((format!("shares_{dim}.svg"), svg.finish()));
    }
    Ok(out)
}

fn transition_heatmap(probs: &Table, counts: &Table, title: &str) -> Result<String, ReportError> {
    let to_states = &probs.headers[1..];
    let (cell_w, cell_h) = (96.0, 44.0);
    let (left, top) = (120.0, 110.0);
    let w = left + cell_w * to_states.len() as f64 + 30.0;
    let h = top + cell_h * probs.rows.len() as f64 + 40.0;
    let mut svg = Svg::new(w, h, title);
    svg.text(left + cell_w * to_states.len() as f64 / 2.0, 48.0, "to (sequences in parentheses)", 11.0, "middle", "normal");
    for (j, s) in to_states.iter().enumerate() {
        svg.text(left + cell_w * (j as f64 + 0.5), top - 10.0, s, 12.0, "middle", "bold");
    }
    for (i, row) in probs.rows.iter().enumerate() {
        let y = top + cell_h * i as f64;
        svg.text(left - 8.0, y + cell_h / 2.0 + 4.0, &row[0], 12.0, "end", "bold");
        let count_row = counts.rows.iter().find(|r| r[0] == row[0]);
        for j in 0..to_states.len() {
            let x = left + cell_w * j as f64;
            let count = count_row.and_then(|r| r.get(j + 1)).cloned().unwrap_or_default();
            if row[j + 1].is_empty() {
                svg.rect(x, y, cell_w, cell_h, "#eeeeee", "cell");
                svg.text(x + cell_w / 2.0, y + cell_h / 2.0 + 4.0, "n/a", 11.0, "middle", "normal");
            } else {
                let p = probs.num(row, j + 1)?;
                svg.rect(x, y, cell_w, cell_h, &sequential(p), "cell");
                let label = format!("{p:.2} ({count})");
                let fill = if p > 0.55 { "#ffffff" } else { "#000000" };
                let _ = writeln!(
                    svg.body,
                    r##"<text x="{:.1}" y="{:.1}" font-size="11" text-anchor="middle" fill="{fill}">{}</text>"##,
                    x + cell_w / 2.0,
                    y + cell_h / 2.0 + 4.0,
                    escape(&label)
                );
            }
        }
    }
    Ok(svg.finish())
}

fn transition_charts(dir: &Path, notices: &mut Vec<String>) -> Result<Vec<(String, String)>, ReportError> {
    let mut names: Vec<String> = std::fs::read_dir(dir)
        .map_err(|source| ReportError::Io { path: dir.to_path_buf(), source })?
        .filter_map(|e| e.ok().and_then(|e| e.file_name().into_string().ok()))
        .filter(|n| n.starts_with("transitions") && n.ends_with(".csv"))
        .collect();
    names.sort();
    if !names.iter().any(|n| n == "transitions.csv") {
        return Err(ReportError::MissingArtifact(dir.join("transitions.csv")));
    }
    for (dim, groups) in [("selectivity", ["HighlySelective", "LessSelective"]), ("discipline", ["STEM", "NonSTEM"])] {
        for g in groups {
            if !names.contains(&format!("transitions_{dim}_{g}.csv")) {
                notices.push(format!("no sequences for {dim}={g}; transition heatmap omitted"));
            }
        }
    }
    let mut out = Vec::new();
    for name in names {
        let stem = name.trim_end_matches(".csv");
        let suffix = stem.trim_start_matches("transitions");
        let probs = Table::read(&dir.join(&name))?;
        let counts = Table::read(&dir.join(format!("transition_counts{suffix}.csv")))?;
        let title = match suffix.trim_start_matches('_').split_once('_') {
            Some((dim, g)) => format!("Transition probabilities, {dim} = {g}"),
            None => "Transition probabilities, all enrollments".to_string(),
        };
        out.push((format!("{stem}.svg"), transition_heatmap(&probs, &counts, &title)?));
    }
    Ok(out)
}

/// Renders every figure into `<dir>/figures` and lists them, with any
/// notices, in `figures/index.txt`.
pub fn render(dir: &Path) -> Result<ReportSummary, ReportError> {
    let mut notices = Vec::new();
    let mut figures: Vec<(String, String)> = Vec::new();
    figures.extend(monthly_trends(dir)?);
    figures.push(("centroid_heatmap.svg".into(), centroid_heatmap(dir)?));
    figures.push(("weekly_distribution.svg".into(), weekly_distribution(dir)?));
    figures.extend(share_charts(dir, &mut notices)?);
    figures.extend(transition_charts(dir, &mut notices)?);

    let out_dir = dir.join("figures");
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| ReportError::Io { path, source }
    };
    std::fs::create_dir_all(&out_dir).map_err(io(&out_dir))?;
    let mut paths = Vec::new();
    let mut index = String::new();
    for (name, svg) in &figures {
        let path = out_dir.join(name);
        std::fs::write(&path, svg).map_err(io(&path))?;
        let _ = writeln!(index, "{name}");
        paths.push(path);
    }
    for n in &notices {
        let _ = writeln!(index, "notice: {n}");
    }
    let index_path = out_dir.join("index.txt");
    std::fs::write(&index_path, index).map_err(io(&index_path))?;
    Ok(ReportSummary { figures: paths, notices })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn colors_and_ticks() {
        assert_eq!(diverging(0.0), "#ffffff");
        assert_eq!(diverging(5.0), "#be2828");
        assert_eq!(sequential(1.0), "#084594");
        assert_eq!(nice_max(0.37), 0.5);
        assert_eq!(nice_max(1234.0), 2000.0);
        assert_eq!(escape("a<b&c"), "a&lt;b&amp;c");
    }
}
