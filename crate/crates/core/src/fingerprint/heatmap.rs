//! File output for fingerprints and curves: plain CSV grids and a
//! self-contained SVG heatmap with per-row turnout box plots.

use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use super::{CumulativeCurve, Fingerprint};
use crate::error::{Error, Result};

const CELL: f64 = 6.0;
const MARGIN: f64 = 50.0;
/// Rows with fewer boxes than this get no box plot.
const MIN_ROW_BOXES: u64 = 5;

/// Write `<path>.csv` (the grid) and `<path>.svg` (the rendered panel).
pub fn emit_heatmap(fp: &Fingerprint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    write_grid_csv(fp, path.with_extension("csv"))?;
    write_heatmap_svg(fp, path.with_extension("svg"))
}

/// One line per vote-share bin (lowest first), one integer per turnout bin.
pub fn write_grid_csv(fp: &Fingerprint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::with_capacity(fp.bins() * fp.bins() * 2);
    for row in &fp.grid {
        let line: Vec<String> = row.iter().map(u64::to_string).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_grid_csv(path: impl AsRef<Path>) -> Result<Vec<Vec<u64>>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut grid = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let row = line
            .split(',')
            .map(|v| {
                v.trim().parse::<u64>().map_err(|_| Error::Parse {
                    line: i as u64 + 1,
                    message: format!("{v:?} is not a count"),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        grid.push(row);
    }
    Ok(grid)
}

pub fn write_curve_csv(curve: &CumulativeCurve, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    let io = |e| Error::io(path, e);
    writeln!(w, "threshold,cumulative_share").map_err(io)?;
    for p in &curve.points {
        writeln!(w, "{},{}", p.threshold, p.cumulative_share).map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Turnout-bin position (fractional) of quantile `q` of a histogram row.
fn row_quantile(row: &[u64], total: u64, q: f64) -> f64 {
    let target = q * total as f64;
    let mut acc = 0u64;
    for (i, &c) in row.iter().enumerate() {
        acc += c;
        if acc as f64 >= target && c > 0 {
            return i as f64 + 0.5;
        }
    }
    row.len() as f64 - 0.5
}

fn shade(count: u64, max: u64) -> String {
    if count == 0 || max == 0 {
        return "#ffffff".into();
    }
    let x = (count as f64 / max as f64).sqrt();
    let r = (255.0 * (1.0 - 0.9 * x)) as u8;
    let g = (255.0 * (1.0 - 0.7 * x)) as u8;
    format!("#{r:02x}{g:02x}ff")
}

pub fn write_heatmap_svg(fp: &Fingerprint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bins = fp.bins();
    let side = bins as f64 * CELL;
    let width = side + 2.0 * MARGIN;
    let max = fp.grid.iter().flatten().copied().max().unwrap_or(0);
    // y grows downward in SVG; share bin 0 goes at the bottom
    let y_of = |row: usize| MARGIN + side - (row as f64 + 1.0) * CELL;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{width}" viewBox="0 0 {width} {width}">"#
    );
    let _ = writeln!(
        s,
        r#"<title>{} fingerprint for {} ({} boxes)</title>"#,
        if fp.standardized { "standardized" } else { "raw" },
        fp.candidate,
        fp.n_boxes
    );
    let _ = writeln!(s, r#"<rect x="0" y="0" width="{width}" height="{width}" fill="white"/>"#);
    for (row, counts) in fp.grid.iter().enumerate() {
        for (col, &c) in counts.iter().enumerate() {
            if c == 0 {
                continue;
            }
            let _ = writeln!(
                s,
                r#"<rect x="{:.1}" y="{:.1}" width="{CELL}" height="{CELL}" fill="{}"/>"#,
                MARGIN + col as f64 * CELL,
                y_of(row),
                shade(c, max)
            );
        }
    }

    for (row, counts) in fp.grid.iter().enumerate() {
        let total: u64 = counts.iter().sum();
        if total < MIN_ROW_BOXES {
            continue;
        }
        let x = |q| MARGIN + row_quantile(counts, total, q) * CELL;
        let (lo, q1, med, q3, hi) = (x(0.025), x(0.25), x(0.5), x(0.75), x(0.975));
        let y = y_of(row);
        let mid = y + CELL / 2.0;
        let _ = writeln!(
            s,
            r##"<g stroke="#d62728" fill="none" stroke-width="0.8"><line x1="{lo:.1}" y1="{mid:.1}" x2="{hi:.1}" y2="{mid:.1}"/><rect x="{q1:.1}" y="{:.1}" width="{:.1}" height="{:.1}"/><line x1="{med:.1}" y1="{y:.1}" x2="{med:.1}" y2="{:.1}" stroke-width="1.5"/></g>"##,
            y + 1.0,
            (q3 - q1).max(0.5),
            CELL - 2.0,
            y + CELL
        );
    }

    let lo = fp.x_edges[0];
    let hi = fp.x_edges[bins];
    let _ = writeln!(
        s,
        r#"<rect x="{MARGIN}" y="{MARGIN}" width="{side}" height="{side}" fill="none" stroke="black"/>"#
    );
    for k in 0..=4 {
        let frac = k as f64 / 4.0;
        let label = lo + (hi - lo) * frac;
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" font-size="10" text-anchor="middle">{label:.2}</text>"#,
            MARGIN + frac * side,
            MARGIN + side + 14.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" font-size="10" text-anchor="end">{label:.2}</text>"#,
            MARGIN - 4.0,
            MARGIN + side - frac * side + 3.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" font-size="12" text-anchor="middle">turnout</text>"#,
        MARGIN + side / 2.0,
        width - 12.0
    );
    let _ = writeln!(
        s,
        r#"<text x="14" y="{:.1}" font-size="12" text-anchor="middle" transform="rotate(-90 14 {:.1})">vote share {}</text>"#,
        MARGIN + side / 2.0,
        MARGIN + side / 2.0,
        fp.candidate
    );
    s.push_str("</svg>\n");
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fingerprint::raw_fingerprint;
    use crate::ingest::{BallotBox, ElectionRound};

    fn fp_of(boxes: &[(u64, u64, u64)]) -> Fingerprint {
        let boxes = boxes
            .iter()
            .enumerate()
            .map(|(i, &(el, valid, e))| BallotBox {
                box_id: format!("b{i}"),
                province_id: "P".into(),
                district_id: "D".into(),
                county_id: "C".into(),
                electorate: el,
                valid_votes: valid,
                votes: vec![e],
            })
            .collect();
        let r = ElectionRound::from_boxes("t", vec!["E".into()], boxes).unwrap();
        raw_fingerprint(&r, "E", 20).unwrap()
    }

    #[test]
    fn grid_round_trips_through_csv() {
        let dir = tempfile::tempdir().unwrap();
        let fp = fp_of(&[(100, 80, 40), (100, 90, 81), (300, 150, 30)]);
        emit_heatmap(&fp, dir.path().join("panel")).unwrap();
        let grid = read_grid_csv(dir.path().join("panel.csv")).unwrap();
        assert_eq!(grid, fp.grid);
        assert_eq!(grid.len(), 20);
        assert!(grid.iter().all(|r| r.len() == 20));
        assert_eq!(grid.iter().flatten().sum::<u64>(), fp.n_boxes);
        let svg = std::fs::read_to_string(dir.path().join("panel.svg")).unwrap();
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
    }

    #[test]
    fn empty_fingerprint_writes_zero_grid() {
        let dir = tempfile::tempdir().unwrap();
        let fp = fp_of(&[]);
        emit_heatmap(&fp, dir.path().join("empty")).unwrap();
        let grid = read_grid_csv(dir.path().join("empty.csv")).unwrap();
        assert_eq!(grid.len(), 20);
        assert!(grid.iter().flatten().all(|&c| c == 0));
    }

    #[test]
    fn unwritable_path_is_io_error() {
        let fp = fp_of(&[(100, 80, 40)]);
        let err = emit_heatmap(&fp, "/nonexistent-dir/x/panel").unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }

    #[test]
    fn quantiles_of_a_row() {
        let row = [0, 2, 2, 0, 4];
        assert_eq!(row_quantile(&row, 8, 0.25), 1.5);
        assert_eq!(row_quantile(&row, 8, 0.5), 2.5);
        assert_eq!(row_quantile(&row, 8, 0.75), 4.5);
    }
}
