//! CSV reports.
//!
//! Every report starts with one comment line
//! `# mi-decode <kind> schema=<N> seed=<seed> config_sha256=<hex> methods=<a;b>`
//! followed by a header row and data rows. Accuracies are fractions in
//! `[0, 1]` written in shortest round-trip decimal form. The `std` row uses
//! the sample standard deviation and is empty with fewer than two subjects.
//! Training curves are plain `epoch,loss` tables.

use std::io::Write;

use crate::config::Method;

pub const SCHEMA_VERSION: u32 = 1;

/// One accuracy per (row, column), rows are subjects.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<(String, Vec<f64>)>,
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation (n - 1 denominator); `None` below two values.
pub fn sample_std(xs: &[f64]) -> Option<f64> {
    if xs.len() < 2 {
        return None;
    }
    let m = mean(xs);
    Some((xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt())
}

impl Table {
    pub fn column(&self, j: usize) -> Vec<f64> {
        self.rows.iter().map(|r| r.1[j]).collect()
    }

    pub fn column_means(&self) -> Vec<f64> {
        (0..self.columns.len()).map(|j| mean(&self.column(j))).collect()
    }

    fn transposed(&self) -> Table {
        Table {
            columns: self.rows.iter().map(|r| r.0.clone()).collect(),
            rows: self
                .columns
                .iter()
                .enumerate()
                .map(|(j, c)| (c.clone(), self.column(j)))
                .collect(),
        }
    }
}

pub struct Preamble<'a> {
    pub kind: &'a str,
    pub seed: u64,
    pub config_sha256: &'a str,
    pub methods: &'a [Method],
}

fn write_preamble(w: &mut impl Write, p: &Preamble<'_>) -> std::io::Result<()> {
    let methods: Vec<&str> = p.methods.iter().map(|m| m.name()).collect();
    writeln!(
        w,
        "# mi-decode {} schema={} seed={} config_sha256={} methods={}",
        p.kind,
        SCHEMA_VERSION,
        p.seed,
        p.config_sha256,
        methods.join(";")
    )
}

fn fmt(x: f64) -> String {
    format!("{x}")
}

/// Subjects as rows, methods as columns, then `mean` and `std` rows.
pub fn write_report(w: &mut impl Write, p: &Preamble<'_>, table: &Table) -> Result<(), csv::Error> {
    write_preamble(w, p)?;
    let mut out = csv::Writer::from_writer(w);
    out.write_record(std::iter::once("subject").chain(table.columns.iter().map(String::as_str)))?;
    for (id, vals) in &table.rows {
        out.write_record(std::iter::once(id.clone()).chain(vals.iter().map(|&v| fmt(v))))?;
    }
    let cols: Vec<Vec<f64>> = (0..table.columns.len()).map(|j| table.column(j)).collect();
    out.write_record(std::iter::once("mean".to_string()).chain(cols.iter().map(|c| fmt(mean(c)))))?;
    out.write_record(
        std::iter::once("std".to_string()).chain(cols.iter().map(|c| sample_std(c).map(fmt).unwrap_or_default())),
    )?;
    out.flush()?;
    Ok(())
}

/// Bands (or `cnn_gru`) as rows, subjects as columns, then a `mean` column.
/// `table` is laid out like the main report (subjects as rows).
pub fn write_ablation(w: &mut impl Write, p: &Preamble<'_>, table: &Table) -> Result<(), csv::Error> {
    write_preamble(w, p)?;
    let t = table.transposed();
    let mut out = csv::Writer::from_writer(w);
    out.write_record(
        std::iter::once("band")
            .chain(t.columns.iter().map(String::as_str))
            .chain(std::iter::once("mean")),
    )?;
    for (label, vals) in &t.rows {
        out.write_record(
            std::iter::once(label.clone())
                .chain(vals.iter().map(|&v| fmt(v)))
                .chain(std::iter::once(fmt(mean(vals)))),
        )?;
    }
    out.flush()?;
    Ok(())
}

/// Training curve: header `epoch,loss`, one row per epoch (0-based), no
/// preamble.
pub fn write_curve(w: &mut impl Write, losses: &[f64]) -> Result<(), csv::Error> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["epoch", "loss"])?;
    for (e, &l) in losses.iter().enumerate() {
        out.write_record([e.to_string(), fmt(l)])?;
    }
    out.flush()?;
    Ok(())
}

/// Trial-relative label for a window, e.g. `2.5-4.5`.
pub fn band_label(cue_latency_s: f64, bounds: (f64, f64)) -> String {
    let r = |x: f64| (x * 1e6).round() / 1e6;
    format!("{}-{}", r(cue_latency_s + bounds.0), r(cue_latency_s + bounds.1))
}

/// Parses a report back into its table. Comment lines are skipped, as are
/// the summary rows.
pub fn read_report(text: &str) -> Result<Table, csv::Error> {
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(text.as_bytes());
    let columns: Vec<String> = rdr.headers()?.iter().skip(1).map(String::from).collect();
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let id = rec.get(0).unwrap_or_default().to_string();
        if id == "mean" || id == "std" {
            continue;
        }
        let vals = rec.iter().skip(1).map(|v| v.parse().unwrap_or(f64::NAN)).collect();
        rows.push((id, vals));
    }
    Ok(Table { columns, rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table() -> Table {
        Table {
            columns: vec!["cnn_gru".into(), "csp_lda".into()],
            rows: vec![("S01".into(), vec![0.75, 0.5]), ("S02".into(), vec![0.25, 1.0])],
        }
    }

    fn preamble() -> Preamble<'static> {
        Preamble {
            kind: "report",
            seed: 3,
            config_sha256: "ab",
            methods: &[Method::CnnGru, Method::CspLda],
        }
    }

    #[test]
    fn report_layout() {
        let mut buf = Vec::new();
        write_report(&mut buf, &preamble(), &table()).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "# mi-decode report schema=1 seed=3 config_sha256=ab methods=cnn_gru;csp_lda");
        assert_eq!(lines[1], "subject,cnn_gru,csp_lda");
        assert_eq!(lines[2], "S01,0.75,0.5");
        assert_eq!(lines[4], "mean,0.5,0.75");
        // std of {0.75, 0.25} with n - 1: sqrt(0.125)
        assert_eq!(lines[5], format!("std,{},{}", 0.125f64.sqrt(), 0.125f64.sqrt()));
        assert_eq!(read_report(&text).unwrap(), table());
    }

    #[test]
    fn ablation_layout() {
        let mut buf = Vec::new();
        write_ablation(&mut buf, &preamble(), &table()).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[1], "band,S01,S02,mean");
        assert_eq!(lines[2], "cnn_gru,0.75,0.25,0.5");
        assert_eq!(lines[3], "csp_lda,0.5,1,0.75");
    }

    #[test]
    fn single_subject_std_is_blank() {
        let t = Table {
            columns: vec!["a".into()],
            rows: vec![("S".into(), vec![0.5])],
        };
        let mut buf = Vec::new();
        write_report(&mut buf, &preamble(), &t).unwrap();
        assert!(String::from_utf8(buf).unwrap().ends_with("std,\n"));
    }

    #[test]
    fn curve_layout() {
        let mut buf = Vec::new();
        write_curve(&mut buf, &[0.7, 0.25]).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "epoch,loss\n0,0.7\n1,0.25\n");
    }

    #[test]
    fn labels() {
        assert_eq!(band_label(2.0, (0.5, 2.5)), "2.5-4.5");
        assert_eq!(band_label(2.0, (0.6000000000000001, 2.6)), "2.6-4.6");
    }

    #[test]
    fn floats_round_trip() {
        for x in [0.1, 1.0 / 3.0, 0.925, 1.0, 0.0] {
            assert_eq!(fmt(x).parse::<f64>().unwrap(), x);
        }
    }
}
