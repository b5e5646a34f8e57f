//! Result post-processing: loading `results.csv`, trade-off filtering, and
//! report emission (CSV plus an SVG scatter of the error/cost trade-off).

use std::fmt::Write as _;
use std::path::Path;

use anyhow::{bail, Context, Result};

use bnc_core::pareto::pareto_front_keys;
use bnc_core::Objective;

use crate::runner::RESULT_COLUMNS;

/// One parsed result row, keeping the original line for verbatim copying.
pub struct ResultRow {
    pub line: String,
    pub fields: Vec<String>,
    pub bits_total: f64,
    pub ops: f64,
    pub test_err: f64,
}

impl ResultRow {
    pub fn dataset(&self) -> &str {
        &self.fields[0]
    }

    pub fn family(&self) -> &str {
        &self.fields[1]
    }

    /// Per-fold detail rows carry a `#fold-` suffix on the dataset name;
    /// summary rows do not.
    pub fn is_fold_row(&self) -> bool {
        self.dataset().contains("#fold-")
    }

    pub fn objective(&self, dim: Objective) -> f64 {
        match dim {
            Objective::Bits => self.bits_total,
            Objective::Ops => self.ops,
            Objective::Error => self.test_err,
        }
    }
}

fn parse_fields(line: &str) -> Result<Vec<String>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_reader(line.as_bytes());
    let mut record = csv::StringRecord::new();
    if !reader.read_record(&mut record)? {
        bail!("empty row");
    }
    Ok(record.iter().map(str::to_string).collect())
}

/// Reads a results file, checking the header and numeric columns.
pub fn load_rows(path: &Path) -> Result<Vec<ResultRow>> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))?;
    let mut lines = text.lines();
    let header = lines.next().context("results file is empty")?;
    if header != RESULT_COLUMNS.join(",") {
        bail!("{} does not look like a results file (bad header)", path.display());
    }
    let col = |name: &str| RESULT_COLUMNS.iter().position(|c| *c == name).expect("known column");
    let (c_bits, c_ops, c_err) = (col("bits_total"), col("ops"), col("test_err"));
    let mut rows = Vec::new();
    for (n, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields = parse_fields(line).with_context(|| format!("row {}", n + 2))?;
        if fields.len() != RESULT_COLUMNS.len() {
            bail!("row {} has {} fields, expected {}", n + 2, fields.len(), RESULT_COLUMNS.len());
        }
        let num = |i: usize| -> Result<f64> {
            fields[i]
                .parse::<f64>()
                .with_context(|| format!("row {}: bad {} value {:?}", n + 2, RESULT_COLUMNS[i], fields[i]))
        };
        rows.push(ResultRow {
            line: line.to_string(),
            bits_total: num(c_bits)?,
            ops: num(c_ops)?,
            test_err: num(c_err)?,
            fields,
        });
    }
    Ok(rows)
}

pub fn parse_dims(text: &str) -> Result<Vec<Objective>> {
    let dims: Vec<Objective> = text
        .split(',')
        .map(|d| match d.trim() {
            "bits" => Ok(Objective::Bits),
            "ops" => Ok(Objective::Ops),
            "error" => Ok(Objective::Error),
            other => bail!("unknown objective {other:?} (use bits, ops, error)"),
        })
        .collect::<Result<_>>()?;
    if dims.is_empty() {
        bail!("need at least one objective");
    }
    Ok(dims)
}

/// Indices (into `rows`) of the rows on the trade-off front over `dims`.
/// Fold detail rows are excluded unless `include_folds` is set.
pub fn front_indices(
    rows: &[ResultRow],
    dims: &[Objective],
    include_folds: bool,
) -> Result<Vec<usize>> {
    let eligible: Vec<usize> = rows
        .iter()
        .enumerate()
        .filter(|(_, r)| include_folds || !r.is_fold_row())
        .map(|(i, _)| i)
        .collect();
    if eligible.is_empty() {
        bail!("no summary rows to filter (file holds only fold rows?)");
    }
    let keys: Vec<Vec<f64>> = eligible
        .iter()
        .map(|&i| dims.iter().map(|&d| rows[i].objective(d)).collect())
        .collect();
    for (k, &i) in keys.iter().zip(&eligible) {
        if k.iter().any(|v| v.is_nan()) {
            bail!("row {} has a NaN objective; cannot rank it", i + 2);
        }
    }
    Ok(pareto_front_keys(&keys).into_iter().map(|j| eligible[j]).collect())
}

/// Writes a results-shaped CSV containing exactly the given rows, verbatim.
pub fn write_rows(path: &Path, rows: &[ResultRow], keep: &[usize]) -> Result<()> {
    let mut text = String::new();
    writeln!(text, "{}", RESULT_COLUMNS.join(",")).expect("string write");
    for &i in keep {
        writeln!(text, "{}", rows[i].line).expect("string write");
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

/// Scatter-plot axes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum XAxis {
    Bits,
    Ops,
}

impl XAxis {
    fn value(self, r: &ResultRow) -> f64 {
        match self {
            XAxis::Bits => r.bits_total,
            XAxis::Ops => r.ops,
        }
    }

    fn label(self) -> &'static str {
        match self {
            XAxis::Bits => "model bits",
            XAxis::Ops => "operations per prediction",
        }
    }

    /// The cost dimension not on the x axis; encoded as marker area.
    fn other(self, r: &ResultRow) -> f64 {
        match self {
            XAxis::Bits => r.ops,
            XAxis::Ops => r.bits_total,
        }
    }

    fn other_label(self) -> &'static str {
        match self {
            XAxis::Bits => "ops",
            XAxis::Ops => "bits",
        }
    }
}

fn family_color(family: &str) -> &'static str {
    match family {
        "bnc-nb" => "#1f77b4",
        "bnc-tan" => "#2ca02c",
        "bnc-structure" => "#d62728",
        "fc" => "#9467bd",
        "cnn" => "#ff7f0e",
        _ => "#7f7f7f",
    }
}

const PLOT_W: f64 = 640.0;
const PLOT_H: f64 = 480.0;
const MARGIN_L: f64 = 70.0;
const MARGIN_R: f64 = 20.0;
const MARGIN_T: f64 = 20.0;
const MARGIN_B: f64 = 55.0;

fn fmt_tick(v: f64) -> String {
    if v == 0.0 {
        "0".to_string()
    } else if v.abs() >= 1e5 || v.abs() < 1e-3 {
        format!("{v:.1e}")
    } else if v.fract() == 0.0 {
        format!("{v:.0}")
    } else {
        format!("{v:.3}")
    }
}

/// Renders an SVG scatter: x = the chosen cost axis (optionally log-scaled),
/// y = test error, disk area proportional to the remaining cost dimension.
/// Exactly one circle per plotted row.
pub fn render_scatter(
    rows: &[ResultRow],
    keep: &[usize],
    x_axis: XAxis,
    log_x: bool,
) -> Result<String> {
    if keep.is_empty() {
        bail!("nothing to plot");
    }
    let xs: Vec<f64> = keep.iter().map(|&i| x_axis.value(&rows[i])).collect();
    let ys: Vec<f64> = keep.iter().map(|&i| rows[i].test_err).collect();
    let areas: Vec<f64> = keep.iter().map(|&i| x_axis.other(&rows[i])).collect();
    if log_x {
        if let Some(bad) = xs.iter().find(|v| **v <= 0.0) {
            bail!("log x axis needs positive values, found {bad}");
        }
    }
    let tx = |v: f64| if log_x { v.log10() } else { v };

    let (x_lo, x_hi) = {
        let lo = xs.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let (lo, hi) = (tx(lo), tx(hi));
        let pad = (0.05 * (hi - lo)).max(1e-9);
        (lo - pad, hi + pad)
    };
    let y_hi = {
        let hi = ys.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        (1.05 * hi).max(1e-9)
    };
    let area_hi = areas.iter().copied().fold(0.0_f64, f64::max);

    let px = |v: f64| MARGIN_L + (tx(v) - x_lo) / (x_hi - x_lo) * (PLOT_W - MARGIN_L - MARGIN_R);
    let py = |v: f64| PLOT_H - MARGIN_B - v / y_hi * (PLOT_H - MARGIN_T - MARGIN_B);
    let radius = |a: f64| {
        if area_hi <= 0.0 {
            4.0
        } else {
            (12.0 * (a / area_hi).sqrt()).max(2.0)
        }
    };

    let mut svg = String::new();
    writeln!(
        svg,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{PLOT_W}\" height=\"{PLOT_H}\" \
         viewBox=\"0 0 {PLOT_W} {PLOT_H}\" font-family=\"sans-serif\" font-size=\"11\">"
    )
    .expect("string write");
    writeln!(svg, "<rect width=\"{PLOT_W}\" height=\"{PLOT_H}\" fill=\"white\"/>").expect("string write");

    // Axes.
    let x0 = MARGIN_L;
    let x1 = PLOT_W - MARGIN_R;
    let y0 = PLOT_H - MARGIN_B;
    let y1 = MARGIN_T;
    writeln!(
        svg,
        "<line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x1}\" y2=\"{y0}\" stroke=\"black\"/>\
         <line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x0}\" y2=\"{y1}\" stroke=\"black\"/>"
    )
    .expect("string write");
    for t in 0..=4 {
        let f = f64::from(t) / 4.0;
        let xv = x_lo + f * (x_hi - x_lo);
        let xpix = MARGIN_L + f * (PLOT_W - MARGIN_L - MARGIN_R);
        let shown = if log_x { 10f64.powf(xv) } else { xv };
        writeln!(
            svg,
            "<line x1=\"{xpix}\" y1=\"{y0}\" x2=\"{xpix}\" y2=\"{}\" stroke=\"black\"/>\
             <text x=\"{xpix}\" y=\"{}\" text-anchor=\"middle\">{}</text>",
            y0 + 5.0,
            y0 + 18.0,
            fmt_tick(shown)
        )
        .expect("string write");
        let yv = f * y_hi;
        let ypix = py(yv);
        writeln!(
            svg,
            "<line x1=\"{}\" y1=\"{ypix}\" x2=\"{x0}\" y2=\"{ypix}\" stroke=\"black\"/>\
             <text x=\"{}\" y=\"{}\" text-anchor=\"end\">{}</text>",
            x0 - 5.0,
            x0 - 8.0,
            ypix + 4.0,
            fmt_tick(yv)
        )
        .expect("string write");
    }
    let x_label = if log_x {
        format!("{} (log scale)", x_axis.label())
    } else {
        x_axis.label().to_string()
    };
    writeln!(
        svg,
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{x_label}</text>",
        (x0 + x1) / 2.0,
        PLOT_H - 15.0
    )
    .expect("string write");
    writeln!(
        svg,
        "<text x=\"18\" y=\"{}\" text-anchor=\"middle\" transform=\"rotate(-90 18 {})\">test error</text>",
        (y0 + y1) / 2.0,
        (y0 + y1) / 2.0
    )
    .expect("string write");

    // Data markers: one circle per row, area scaled by the third dimension.
    for (k, &i) in keep.iter().enumerate() {
        let r = &rows[i];
        let cx = px(xs[k]);
        let cy = py(ys[k]);
        let rad = radius(areas[k]);
        let color = family_color(r.family());
        writeln!(
            svg,
            "<circle cx=\"{cx:.2}\" cy=\"{cy:.2}\" r=\"{rad:.2}\" fill=\"{color}\" \
             fill-opacity=\"0.65\" stroke=\"{color}\">\
             <title>{} {} {} | bits={} ops={} err={}</title></circle>",
            r.dataset(),
            r.family(),
            r.fields[2],
            r.bits_total,
            r.ops,
            r.test_err
        )
        .expect("string write");
    }

    // Legend: families present, plus the area encoding note.
    let mut families: Vec<&str> = keep.iter().map(|&i| rows[i].family()).collect();
    families.sort_unstable();
    families.dedup();
    for (n, fam) in families.iter().enumerate() {
        let ly = MARGIN_T + 8.0 + 16.0 * n as f64;
        writeln!(
            svg,
            "<rect x=\"{}\" y=\"{}\" width=\"10\" height=\"10\" fill=\"{}\"/>\
             <text x=\"{}\" y=\"{}\">{fam}</text>",
            x1 - 110.0,
            ly - 8.0,
            family_color(fam),
            x1 - 96.0,
            ly
        )
        .expect("string write");
    }
    writeln!(
        svg,
        "<text x=\"{}\" y=\"{}\" font-style=\"italic\">area: {}</text>",
        x1 - 110.0,
        MARGIN_T + 8.0 + 16.0 * families.len() as f64 + 4.0,
        x_axis.other_label()
    )
    .expect("string write");
    writeln!(svg, "</svg>").expect("string write");
    Ok(svg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn results_text(rows: &[(&str, f64, f64, f64)]) -> String {
        let mut text = format!("{}\n", RESULT_COLUMNS.join(","));
        for (name, bits, ops, err) in rows {
            writeln!(
                text,
                "{name},bnc-nb,nb,32,,,0,0.03,{bits},{ops},0.1,{err},7"
            )
            .expect("string write");
        }
        text
    }

    fn load_temp(text: &str) -> Vec<ResultRow> {
        let path = std::env::temp_dir().join(format!(
            "bnc-cli-report-{}-{}.csv",
            std::process::id(),
            text.len()
        ));
        std::fs::write(&path, text).unwrap();
        load_rows(&path).unwrap()
    }

    #[test]
    fn fold_rows_are_skipped_by_default() {
        let rows = load_temp(&results_text(&[
            ("toy#fold-0", 100.0, 10.0, 0.5),
            ("toy#fold-1", 100.0, 10.0, 0.3),
            ("toy", 100.0, 10.0, 0.4),
        ]));
        let dims = parse_dims("bits,ops,error").unwrap();
        let keep = front_indices(&rows, &dims, false).unwrap();
        assert_eq!(keep, vec![2]);
        let keep_all = front_indices(&rows, &dims, true).unwrap();
        assert_eq!(keep_all, vec![1]);
    }

    #[test]
    fn dominated_rows_drop_out_of_the_front() {
        let rows = load_temp(&results_text(&[
            ("a", 100.0, 10.0, 0.5),
            ("b", 200.0, 20.0, 0.6), // dominated by a
            ("c", 50.0, 30.0, 0.7),
        ]));
        let dims = parse_dims("bits,ops,error").unwrap();
        let keep = front_indices(&rows, &dims, false).unwrap();
        assert_eq!(keep, vec![0, 2]);
    }

    #[test]
    fn error_only_front_keeps_the_single_best() {
        let rows = load_temp(&results_text(&[
            ("a", 100.0, 10.0, 0.5),
            ("b", 200.0, 20.0, 0.2),
        ]));
        let keep = front_indices(&rows, &parse_dims("error").unwrap(), false).unwrap();
        assert_eq!(keep, vec![1]);
    }

    #[test]
    fn scatter_draws_one_circle_per_kept_row() {
        let rows = load_temp(&results_text(&[
            ("a", 100.0, 10.0, 0.5),
            ("b", 200.0, 20.0, 0.2),
            ("c", 400.0, 5.0, 0.3),
        ]));
        let svg = render_scatter(&rows, &[0, 1, 2], XAxis::Bits, false).unwrap();
        assert_eq!(svg.matches("<circle").count(), 3);
        assert!(svg.contains("model bits"));
        let svg_ops = render_scatter(&rows, &[0, 1], XAxis::Ops, true).unwrap();
        assert!(svg_ops.contains("log scale"));
    }

    #[test]
    fn log_axis_rejects_nonpositive_values() {
        let rows = load_temp(&results_text(&[("a", 0.0, 10.0, 0.5)]));
        assert!(render_scatter(&rows, &[0], XAxis::Bits, true).is_err());
    }

    #[test]
    fn bad_header_is_rejected() {
        let path = std::env::temp_dir().join(format!(
            "bnc-cli-report-badheader-{}.csv",
            std::process::id()
        ));
        std::fs::write(&path, "a,b,c\n1,2,3\n").unwrap();
        assert!(load_rows(&path).is_err());
    }
}
