//! CSV tables and SVG scatter plots.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

pub const PLOT_SIZE: f64 = 800.0;
const MARGIN: f64 = 0.05;

/// A header plus rows of already formatted cells.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new<S: Into<String>>(header: impl IntoIterator<Item = S>) -> Self {
        Table {
            header: header.into_iter().map(Into::into).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) -> Result<()> {
        if row.len() != self.header.len() {
            return Err(Error::invalid(format!("row has {} cells, header has {}", row.len(), self.header.len())));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let csv_err = |e: csv::Error| Error::invalid(e.to_string());
        w.write_record(&self.header).map_err(csv_err)?;
        for r in &self.rows {
            w.write_record(r).map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::invalid(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output of UTF-8 input"))
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()?).map_err(|e| Error::io(path, e))
    }
}

/// Shortest decimal that parses back to the same `f64`.
pub fn num(v: f64) -> String {
    format!("{v}")
}

/// Reads the plotting coordinates from CSV text: columns `x0` and `x1` when
/// present, otherwise the first two columns.
pub fn read_xy(text: &str) -> Result<Vec<(f64, f64)>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let header = r.headers().map_err(|e| Error::Csv { row: 1, message: e.to_string() })?.clone();
    let find = |name: &str| header.iter().position(|h| h.trim() == name);
    let (xi, yi) = match (find("x0"), find("x1")) {
        (Some(x), Some(y)) => (x, y),
        _ if header.len() >= 2 => (0, 1),
        _ => return Err(Error::Csv { row: 1, message: "need at least two columns".into() }),
    };
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let row = i + 2;
        let rec = rec.map_err(|e| Error::Csv { row, message: e.to_string() })?;
        let cell = |c: usize| -> Result<f64> {
            let s = rec.get(c).ok_or_else(|| Error::Csv { row, message: format!("missing column {}", c + 1) })?;
            s.trim().parse().map_err(|_| Error::Csv { row, message: format!("column {}: not a number: {s:?}", c + 1) })
        };
        out.push((cell(xi)?, cell(yi)?));
    }
    Ok(out)
}

fn range(vals: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() {
        return (-1.0, 1.0);
    }
    if hi - lo < 1e-12 {
        return (lo - 0.5, hi + 0.5);
    }
    let pad = (hi - lo) * MARGIN;
    (lo - pad, hi + pad)
}

/// A self-contained 800x800 scatter plot.
pub fn scatter_svg(points: &[(f64, f64)]) -> Result<String> {
    if points.iter().any(|(x, y)| !x.is_finite() || !y.is_finite()) {
        return Err(Error::invalid("cannot plot non-finite points"));
    }
    let (x_lo, x_hi) = range(points.iter().map(|p| p.0));
    let (y_lo, y_hi) = range(points.iter().map(|p| p.1));
    let sx = |x: f64| (x - x_lo) / (x_hi - x_lo) * PLOT_SIZE;
    let sy = |y: f64| PLOT_SIZE - (y - y_lo) / (y_hi - y_lo) * PLOT_SIZE;
    let mut s = String::new();
    let w = |s: &mut String, t: std::fmt::Arguments<'_>| s.write_fmt(t).expect("writing to a String");
    w(
        &mut s,
        format_args!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{PLOT_SIZE}\" height=\"{PLOT_SIZE}\" viewBox=\"0 0 {PLOT_SIZE} {PLOT_SIZE}\">\n"
        ),
    );
    w(&mut s, format_args!("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"));
    for &(x, y) in points {
        w(
            &mut s,
            format_args!("<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"2.5\" fill=\"steelblue\" fill-opacity=\"0.7\"/>\n", sx(x), sy(y)),
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_formatting_round_trips() {
        for v in [0.1 + 0.2, 1e-300, -2.5e17, 1.0 / 3.0] {
            assert_eq!(num(v).parse::<f64>().unwrap().to_bits(), v.to_bits());
        }
        let mut t = Table::new(["a", "b"]);
        t.push(vec!["1".into(), num(0.5)]).unwrap();
        assert!(t.push(vec!["1".into()]).is_err());
        assert_eq!(t.to_csv().unwrap(), "a,b\n1,0.5\n");
    }

    #[test]
    fn reads_named_or_leading_columns() {
        assert_eq!(read_xy("step,x0,x1\n0,1.5,2\n").unwrap(), vec![(1.5, 2.0)]);
        assert_eq!(read_xy("u,v,w\n3,4,5\n").unwrap(), vec![(3.0, 4.0)]);
        assert!(matches!(read_xy("u,v\n3,oops\n"), Err(Error::Csv { row: 2, .. })));
    }

    #[test]
    fn svg_scales_with_margin() {
        let svg = scatter_svg(&[(0.0, 0.0), (10.0, 20.0)]).unwrap();
        assert!(svg.contains("width=\"800\" height=\"800\""));
        // 5% padding: data spans 10 of 11 units horizontally.
        let lo = 0.5 / 11.0 * 800.0;
        assert!(svg.contains(&format!("cx=\"{lo:.2}\" cy=\"{:.2}\"", 800.0 - lo)));
        assert!(svg.contains(&format!("cx=\"{:.2}\" cy=\"{lo:.2}\"", 800.0 - lo)));
        assert_eq!(svg.matches("<circle").count(), 2);
        assert!(scatter_svg(&[]).unwrap().ends_with("</svg>\n"));
        assert!(scatter_svg(&[(f64::NAN, 0.0)]).is_err());
    }
}
