//! CSV tables with a provenance comment line.

use std::io::Write;
use std::path::Path;

use crate::CliError;

/// `NA` for undefined values; shortest round-trip text otherwise.
pub fn num(v: Option<f64>) -> String {
    match v {
        Some(x) if x.is_finite() => format!("{x}"),
        Some(x) if x.is_nan() => "NA".into(),
        Some(x) => format!("{x}"),
        None => "NA".into(),
    }
}

pub struct Table {
    pub header: Vec<&'static str>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(header: &[&'static str]) -> Self {
        Self { header: header.to_vec(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<String>) {
        assert_eq!(row.len(), self.header.len(), "row width must match the header");
        self.rows.push(row);
    }

    /// First line is `# coadapt <version>; <command line>; seed <seed>`.
    pub fn to_bytes(&self, command_line: &str, seed: u64) -> Vec<u8> {
        let mut out = format!("# coadapt {}; {}; seed {}\n", env!("CARGO_PKG_VERSION"), command_line, seed).into_bytes();
        {
            let mut w = csv::Writer::from_writer(&mut out);
            w.write_record(&self.header).expect("writing to memory");
            for r in &self.rows {
                w.write_record(r).expect("writing to memory");
            }
            w.flush().expect("writing to memory");
        }
        out
    }

    pub fn write(&self, dest: Option<&Path>, stdout: &mut dyn Write, command_line: &str, seed: u64) -> Result<(), CliError> {
        let bytes = self.to_bytes(command_line, seed);
        match dest {
            Some(path) => write_file(path, &bytes),
            None => stdout.write_all(&bytes).map_err(|e| CliError::Io(format!("stdout: {e}"))),
        }
    }
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| CliError::Io(format!("{}: {e}", parent.display())))?;
    }
    std::fs::write(path, bytes).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

/// Split a CSV produced by [`Table::to_bytes`] into header and rows,
/// skipping the comment line.
pub fn parse(text: &str) -> Result<(Vec<String>, Vec<Vec<String>>), csv::Error> {
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(text.as_bytes());
    let header = r.headers()?.iter().map(String::from).collect();
    let rows = r.records().map(|rec| rec.map(|r| r.iter().map(String::from).collect())).collect::<Result<_, _>>()?;
    Ok((header, rows))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn na_for_missing_and_nan() {
        assert_eq!(num(None), "NA");
        assert_eq!(num(Some(f64::NAN)), "NA");
        assert_eq!(num(Some(0.6)), "0.6");
    }

    #[test]
    fn round_trip_skips_provenance() {
        let mut t = Table::new(&["a", "b"]);
        t.push(vec!["1".into(), "x,y".into()]);
        let bytes = t.to_bytes("coadapt ca x", 7);
        let text = String::from_utf8(bytes).unwrap();
        assert!(text.starts_with("# coadapt "));
        assert!(text.lines().next().unwrap().ends_with("; coadapt ca x; seed 7"));
        let (h, rows) = parse(&text).unwrap();
        assert_eq!(h, ["a", "b"]);
        assert_eq!(rows, [["1", "x,y"]]);
    }
}
