//! TSV helpers and atomic file writes.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};

pub fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))
}

/// Writes through a sibling temporary file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let ctx = |what: &str| format!("{what} {}", path.display());
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(ctx("creating directory for"), e))?;
    }
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::InvalidParameter(format!("not a file path: {}", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp", file_name.to_string_lossy()));
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(ctx("creating temp file for"), e))?;
        f.write_all(bytes).map_err(|e| Error::io(ctx("writing"), e))?;
        f.sync_all().map_err(|e| Error::io(ctx("syncing"), e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(ctx("renaming into"), e))
}

/// Parses `id<TAB>v1<TAB>…` rows, keeping file order. Row lengths are not checked here.
pub fn read_id_vectors(path: &Path) -> Result<Vec<(String, Vec<f64>)>> {
    let text = read_to_string(path)?;
    let mut rows = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let mut cols = line.split('\t');
        let id = cols.next().unwrap_or_default().trim().to_string();
        let values = cols
            .map(|c| {
                c.trim().parse::<f64>().map_err(|_| Error::Parse {
                    path: path.to_path_buf(),
                    line: lineno + 1,
                    message: format!("bad number `{c}`"),
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push((id, values));
    }
    Ok(rows)
}

pub fn write_id_vectors(path: &Path, ids: &[String], rows: ArrayView2<f64>) -> Result<()> {
    let mut out = String::new();
    for (id, row) in ids.iter().zip(rows.rows()) {
        out.push_str(id);
        for v in row {
            write!(out, "\t{v}").unwrap();
        }
        out.push('\n');
    }
    write_atomic(path, out.as_bytes())
}

/// Parses a `# key=value key=value` header line.
pub fn parse_header(path: &Path, line: &str) -> Result<Vec<(String, String)>> {
    let body = line.strip_prefix('#').ok_or_else(|| Error::Parse {
        path: path.to_path_buf(),
        line: 1,
        message: "missing `#` header".into(),
    })?;
    body.split_whitespace()
        .map(|kv| {
            kv.split_once('=')
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .ok_or_else(|| Error::Parse {
                    path: path.to_path_buf(),
                    line: 1,
                    message: format!("bad header field `{kv}`"),
                })
        })
        .collect()
}

pub fn header_value<T: std::str::FromStr>(path: &Path, fields: &[(String, String)], key: &str) -> Result<T> {
    let raw = fields
        .iter()
        .find(|(k, _)| k == key)
        .map(|(_, v)| v)
        .ok_or_else(|| Error::Schema(format!("{}: header lacks `{key}`", path.display())))?;
    raw.parse()
        .map_err(|_| Error::Schema(format!("{}: bad header value {key}={raw}", path.display())))
}

/// Writes sparse `(row, col, weight)` triples under a `# n=<rows>` header.
pub fn write_triples(path: &Path, header: &str, entries: impl IntoIterator<Item = (usize, usize, f64)>) -> Result<()> {
    let mut out = format!("# {header}\n");
    for (r, c, v) in entries {
        writeln!(out, "{r}\t{c}\t{v}").unwrap();
    }
    write_atomic(path, out.as_bytes())
}

/// Reads a triple file written by [`write_triples`] into a dense `n × n` matrix.
pub fn read_square_triples(path: &Path) -> Result<(Vec<(String, String)>, Array2<f64>)> {
    let text = read_to_string(path)?;
    let mut lines = text.lines();
    let header = parse_header(path, lines.next().unwrap_or_default())?;
    let n: usize = header_value(path, &header, "n")?;
    let mut m = Array2::zeros((n, n));
    for (k, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: k + 2,
            message,
        };
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 3 {
            return Err(bad(format!("expected 3 columns, found {}", cols.len())));
        }
        let r: usize = cols[0].parse().map_err(|_| bad("bad row".into()))?;
        let c: usize = cols[1].parse().map_err(|_| bad("bad column".into()))?;
        let v: f64 = cols[2].parse().map_err(|_| bad("bad weight".into()))?;
        if r >= n || c >= n {
            return Err(bad(format!("index ({r}, {c}) outside n={n}")));
        }
        m[[r, c]] = v;
    }
    Ok((header, m))
}
