//! Atomic file output and static SVG line charts of CSV tables.

use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::CliError;

pub struct OutDir {
    dir: PathBuf,
    plot: bool,
    pub written: Vec<PathBuf>,
}

impl OutDir {
    pub fn new(dir: &str, plot: bool) -> Result<Self, CliError> {
        let dir = PathBuf::from(dir);
        std::fs::create_dir_all(&dir)
            .map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
        Ok(Self {
            dir,
            plot,
            written: Vec::new(),
        })
    }

    /// Writes `contents` to a temporary file in the target directory and renames it into place.
    pub fn write(&mut self, name: &str, contents: &str) -> Result<(), CliError> {
        let path = self.dir.join(name);
        write_atomic(&path, contents)?;
        self.written.push(path);
        Ok(())
    }

    pub fn write_json<T: serde::Serialize>(
        &mut self,
        name: &str,
        value: &T,
    ) -> Result<(), CliError> {
        let mut text =
            serde_json::to_string_pretty(value).map_err(|e| CliError::Io(e.to_string()))?;
        text.push('\n');
        self.write(name, &text)
    }

    /// Writes a CSV and, with `--plot`, a chart of it under the same stem.
    pub fn write_csv(&mut self, name: &str, contents: &str) -> Result<(), CliError> {
        self.write(name, contents)?;
        if self.plot {
            if let Some(svg) = line_chart(name, contents) {
                let stem = name.strip_suffix(".csv").unwrap_or(name);
                self.write(&format!("{stem}.svg"), &svg)?;
            }
        }
        Ok(())
    }
}

pub fn write_atomic(path: &Path, contents: &str) -> Result<(), CliError> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let io = |e: std::io::Error| CliError::Io(format!("{}: {e}", path.display()));
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io)?;
    tmp.write_all(contents.as_bytes()).map_err(io)?;
    tmp.as_file().sync_all().map_err(io)?;
    tmp.persist(path).map_err(|e| io(e.error))?;
    Ok(())
}

fn cell(s: &str) -> Option<f64> {
    match s {
        "true" => Some(1.0),
        "false" => Some(0.0),
        _ => s.parse().ok(),
    }
}

const WIDTH: f64 = 640.0;
const PANEL: f64 = 150.0;
const MARGIN: f64 = 56.0;

/// One panel per numeric column against the first non-constant column.
/// A decreasing abscissa starts a new polyline segment.
pub fn line_chart(title: &str, csv: &str) -> Option<String> {
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next()?.split(',').collect();
    let rows: Vec<Vec<Option<f64>>> = lines.map(|l| l.split(',').map(cell).collect()).collect();
    if rows.is_empty() {
        return None;
    }
    let column = |j: usize| -> Vec<Option<f64>> {
        rows.iter().map(|r| r.get(j).copied().flatten()).collect()
    };
    let xi = (0..header.len()).find(|&j| {
        let c = column(j);
        c.iter().all(Option::is_some) && c.iter().any(|v| *v != c[0])
    })?;
    let xs: Vec<f64> = column(xi).into_iter().map(Option::unwrap).collect();
    let (x0, x1) = range(xs.iter().copied());
    let ys: Vec<usize> = (0..header.len())
        .filter(|&j| j != xi && column(j).iter().any(Option::is_some))
        .collect();
    if ys.is_empty() {
        return None;
    }
    let height = 40.0 + ys.len() as f64 * (PANEL + 30.0);
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{height}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<text x="{MARGIN}" y="20" font-size="14">{}</text>"#,
        escape(title)
    );
    for (p, &j) in ys.iter().enumerate() {
        let top = 40.0 + p as f64 * (PANEL + 30.0);
        let col = column(j);
        let finite = col.iter().flatten().copied().filter(|v| v.is_finite());
        let (y0, y1) = range(finite);
        let px = |x: f64| MARGIN + (x - x0) / (x1 - x0) * (WIDTH - 2.0 * MARGIN);
        let py = |y: f64| top + PANEL - (y - y0) / (y1 - y0) * PANEL;
        let _ = writeln!(
            svg,
            r##"<rect x="{MARGIN}" y="{top}" width="{}" height="{PANEL}" fill="none" stroke="#999"/>"##,
            WIDTH - 2.0 * MARGIN
        );
        let _ = writeln!(
            svg,
            r#"<text x="{MARGIN}" y="{}">{} vs {}</text>"#,
            top - 4.0,
            escape(header[j]),
            escape(header[xi])
        );
        let _ = writeln!(
            svg,
            r#"<text x="4" y="{}">{}</text>"#,
            top + 10.0,
            short(y1)
        );
        let _ = writeln!(
            svg,
            r#"<text x="4" y="{}">{}</text>"#,
            top + PANEL,
            short(y0)
        );
        let _ = writeln!(
            svg,
            r#"<text x="{MARGIN}" y="{}">{}</text>"#,
            top + PANEL + 13.0,
            short(x0)
        );
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#,
            WIDTH - MARGIN,
            top + PANEL + 13.0,
            short(x1)
        );
        let mut path = String::new();
        let mut prev: Option<f64> = None;
        for (x, y) in xs.iter().zip(&col) {
            match y.filter(|v| v.is_finite()) {
                Some(y) => {
                    let cmd = if prev.is_some_and(|px0| *x >= px0) {
                        'L'
                    } else {
                        'M'
                    };
                    let _ = write!(path, "{cmd}{:.2},{:.2} ", px(*x), py(y));
                    prev = Some(*x);
                }
                None => prev = None,
            }
        }
        let _ = writeln!(
            svg,
            r##"<path d="{}" fill="none" stroke="#1f5fa8" stroke-width="1"/>"##,
            path.trim_end()
        );
    }
    svg.push_str("</svg>\n");
    Some(svg)
}

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| {
        (a.min(v), b.max(v))
    });
    if !lo.is_finite() || !hi.is_finite() {
        (0.0, 1.0)
    } else if hi > lo {
        (lo, hi)
    } else {
        (lo - 0.5, hi + 0.5)
    }
}

fn short(v: f64) -> String {
    if v != 0.0 && (v.abs() < 1e-3 || v.abs() >= 1e4) {
        format!("{v:.3e}")
    } else {
        format!("{v:.4}")
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chart_has_one_panel_per_column() {
        let svg = line_chart("t", "x,a,b\n0,1,2\n1,2,NaN\n2,3,4\n").unwrap();
        assert_eq!(svg.matches("<path").count(), 2);
        assert!(svg.contains("a vs x") && svg.contains("b vs x"));
    }

    #[test]
    fn constant_first_column_is_skipped() {
        let svg = line_chart("t", "lambda,site,v\n1,0,5\n1,1,6\n").unwrap();
        assert!(svg.contains("v vs site"));
    }

    #[test]
    fn atomic_write_replaces() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.txt");
        write_atomic(&p, "one").unwrap();
        write_atomic(&p, "two").unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap(), "two");
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
    }
}
