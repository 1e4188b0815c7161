//! Panel CSV and JSON file handling.
//!
//! Panels are plain CSV: a header line of channel names, then one row per
//! time index, comma separated, LF line endings.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use kgc_core::Panel64;
use serde::Serialize;

use crate::error::{CliError, CliResult};

/// Environment variable naming the default output directory.
pub const OUTPUT_DIR_ENV: &str = "KGC_OUTPUT_DIR";

pub fn parse_panel(reader: impl Read, source: &str) -> CliResult<Panel64> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(reader);
    let names: Vec<String> = rdr
        .headers()
        .map_err(|e| CliError::Data(format!("{source}: header: {e}")))?
        .iter()
        .map(str::to_string)
        .collect();
    if names.is_empty() || names.iter().all(String::is_empty) {
        return Err(CliError::Data(format!("{source}: missing header line of channel names")));
    }
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 1;
        let rec = rec.map_err(|e| CliError::Data(format!("{source}: row {row}: {e}")))?;
        let line = rec.position().map_or(row + 1, |p| p.line() as usize);
        if rec.len() != names.len() {
            return Err(CliError::Data(format!(
                "{source}: row {row} (line {line}) has {} fields, expected {}",
                rec.len(),
                names.len()
            )));
        }
        let values = rec
            .iter()
            .enumerate()
            .map(|(c, field)| match field.parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(v),
                _ => Err(CliError::Data(format!(
                    "{source}: row {row} (line {line}), column '{}': cannot parse '{field}' as a finite number",
                    names[c]
                ))),
            })
            .collect::<CliResult<Vec<f64>>>()?;
        rows.push(values);
    }
    if rows.is_empty() {
        return Err(CliError::Data(format!("{source}: no data rows")));
    }
    Ok(Panel64::from_rows(&rows, names)?)
}

pub fn read_panel(path: &Path) -> CliResult<Panel64> {
    let file = File::open(path).map_err(|e| CliError::io(path, e))?;
    parse_panel(file, &path.display().to_string())
}

pub fn write_panel(panel: &Panel64, out: impl Write) -> std::io::Result<()> {
    let mut w = BufWriter::new(out);
    writeln!(w, "{}", panel.names().join(","))?;
    for t in 0..panel.len() {
        for c in 0..panel.dim() {
            if c > 0 {
                w.write_all(b",")?;
            }
            write!(w, "{:?}", panel.channel(c)[t])?;
        }
        w.write_all(b"\n")?;
    }
    w.flush()
}

/// Resolves the directory for generated files: explicit setting, then the
/// environment, then the working directory.
pub fn output_dir(explicit: Option<PathBuf>) -> PathBuf {
    explicit
        .or_else(|| std::env::var_os(OUTPUT_DIR_ENV).filter(|v| !v.is_empty()).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("."))
}

/// Where a single-file command writes: `--output`, else `dir/default_name`.
/// `-` means standard output.
pub enum Sink {
    Stdout,
    File(PathBuf),
}

impl Sink {
    pub fn resolve(output: Option<PathBuf>, dir: Option<PathBuf>, default_name: &str) -> Sink {
        match output {
            Some(p) if p.as_os_str() == "-" => Sink::Stdout,
            Some(p) => Sink::File(p),
            None => Sink::File(output_dir(dir).join(default_name)),
        }
    }

    pub fn write_with(&self, f: impl FnOnce(&mut dyn Write) -> std::io::Result<()>) -> CliResult<()> {
        match self {
            Sink::Stdout => {
                let stdout = std::io::stdout();
                let mut lock = stdout.lock();
                f(&mut lock).map_err(|e| CliError::Data(format!("stdout: {e}")))
            }
            Sink::File(path) => {
                if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
                    std::fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
                }
                let file = File::create(path).map_err(|e| CliError::io(path, e))?;
                let mut w = BufWriter::new(file);
                f(&mut w).and_then(|_| w.flush()).map_err(|e| CliError::io(path, e))
            }
        }
    }

    pub fn describe(&self) -> String {
        match self {
            Sink::Stdout => "<stdout>".into(),
            Sink::File(p) => p.display().to_string(),
        }
    }
}

/// Pretty JSON with a trailing newline.
pub fn write_json(w: &mut dyn Write, value: &impl Serialize) -> std::io::Result<()> {
    serde_json::to_writer_pretty(&mut *w, value)?;
    w.write_all(b"\n")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        let panel = Panel64::new(
            vec![vec![0.1, -2.5e-300, 1.0 / 3.0], vec![7.0, 0.0, -1e10]],
            vec!["a".into(), "b".into()],
        )
        .unwrap();
        let mut buf = Vec::new();
        write_panel(&panel, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("a,b\n"));
        assert!(!text.contains('\r'));
        assert_eq!(parse_panel(&buf[..], "mem").unwrap(), panel);
    }

    #[test]
    fn errors_name_the_row() {
        let err = parse_panel("x,y\n1,2\n3,oops\n".as_bytes(), "mem").unwrap_err();
        assert!(err.to_string().contains("row 2 (line 3)"), "{err}");
        assert_eq!(err.exit_code(), 2);
        let err = parse_panel("x,y\n1,2\n3\n".as_bytes(), "mem").unwrap_err();
        assert!(err.to_string().contains("row 2"), "{err}");
        assert!(parse_panel("x,y\n".as_bytes(), "mem").is_err());
        assert!(parse_panel("x\nnan\n".as_bytes(), "mem").is_err());
    }
}
