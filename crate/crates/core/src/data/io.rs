//! File formats.
//!
//! Expression: UTF-8, comma- or tab-separated (sniffed from the header line),
//! first column `sample_id`, remaining columns gene ids, one row per sample.
//! Missing cells are empty, "NA", or "NaN" (case-insensitive).
//! Survival: header `sample_id,time,event` with event in {0,1}.
//! Labels: header `sample_id,label`.

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{GexError, Result};

use super::{ExpressionMatrix, SurvivalRecord};

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> GexError {
    GexError::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

fn is_missing(cell: &str) -> bool {
    cell.is_empty() || cell.eq_ignore_ascii_case("na") || cell.eq_ignore_ascii_case("nan")
}

fn sniff_delimiter(header: &str) -> u8 {
    if header.contains('\t') {
        b'\t'
    } else {
        b','
    }
}

pub fn load_expression(path: impl AsRef<Path>) -> Result<ExpressionMatrix> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    let header_line = text
        .lines()
        .next()
        .ok_or_else(|| parse_err(path, 1, "empty file"))?;
    let delim = sniff_delimiter(header_line) as char;

    let header: Vec<&str> = header_line.split(delim).collect();
    if header.first().map(|s| s.trim()) != Some("sample_id") {
        return Err(parse_err(path, 1, "first column must be `sample_id`"));
    }
    let gene_ids: Vec<String> = header[1..].iter().map(|s| s.trim().to_string()).collect();
    {
        let mut seen = HashSet::new();
        for g in &gene_ids {
            if !seen.insert(g.as_str()) {
                return Err(parse_err(path, 1, format!("duplicated gene column \"{g}\"")));
            }
        }
    }

    let n_genes = gene_ids.len();
    let mut sample_ids = Vec::new();
    let mut values = Vec::new();
    let mut present = Vec::new();
    for (lineno, line) in text.lines().enumerate().skip(1) {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(delim).collect();
        if fields.len() != n_genes + 1 {
            return Err(parse_err(
                path,
                lineno + 1,
                format!("expected {} fields, got {}", n_genes + 1, fields.len()),
            ));
        }
        sample_ids.push(fields[0].trim().to_string());
        for cell in &fields[1..] {
            let cell = cell.trim();
            if is_missing(cell) {
                values.push(0.0);
                present.push(false);
            } else {
                let v: f64 = cell.parse().map_err(|_| {
                    parse_err(path, lineno + 1, format!("non-numeric cell \"{cell}\""))
                })?;
                if !v.is_finite() {
                    return Err(parse_err(path, lineno + 1, format!("non-finite cell \"{cell}\"")));
                }
                values.push(v);
                present.push(true);
            }
        }
    }
    ExpressionMatrix::new(sample_ids, gene_ids, values, present).map_err(|e| match e {
        GexError::Contract(msg) => parse_err(path, 1, msg),
        other => other,
    })
}

/// Writes comma-separated with missing cells as "NA". Values use the shortest
/// round-trippable decimal form, so save -> load is exact.
pub fn save_expression(m: &ExpressionMatrix, path: impl AsRef<Path>) -> Result<()> {
    let mut out = fs::File::create(path.as_ref())?;
    let mut line = String::from("sample_id");
    for g in &m.gene_ids {
        line.push(',');
        line.push_str(g);
    }
    writeln!(out, "{line}")?;
    for (i, sid) in m.sample_ids.iter().enumerate() {
        let mut row = sid.clone();
        for j in 0..m.n_genes() {
            row.push(',');
            match m.get(i, j) {
                Some(v) => row.push_str(&format!("{v}")),
                None => row.push_str("NA"),
            }
        }
        writeln!(out, "{row}")?;
    }
    Ok(())
}

/// Returns the parsed records plus ids not found in `known_ids` (not fatal).
pub fn load_survival(
    path: impl AsRef<Path>,
    known_ids: &HashSet<String>,
) -> Result<(Vec<SurvivalRecord>, Vec<String>)> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| parse_err(path, 1, e.to_string()))?;
    {
        let headers = reader.headers().map_err(|e| parse_err(path, 1, e.to_string()))?;
        let expect = ["sample_id", "time", "event"];
        if headers.iter().map(str::trim).ne(expect) {
            return Err(parse_err(path, 1, "header must be `sample_id,time,event`"));
        }
    }
    let mut records = Vec::new();
    let mut unmatched = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let lineno = i + 2;
        let row = row.map_err(|e| parse_err(path, lineno, e.to_string()))?;
        if row.len() != 3 {
            return Err(parse_err(path, lineno, format!("expected 3 fields, got {}", row.len())));
        }
        let id = row[0].trim().to_string();
        let time: f64 = row[1]
            .trim()
            .parse()
            .map_err(|_| parse_err(path, lineno, format!("bad time \"{}\"", &row[1])))?;
        let event = match row[2].trim() {
            "0" => false,
            "1" => true,
            other => return Err(parse_err(path, lineno, format!("event must be 0 or 1, got \"{other}\""))),
        };
        let rec = SurvivalRecord::new(id.clone(), time, event)
            .map_err(|e| parse_err(path, lineno, e.to_string()))?;
        if !known_ids.contains(&id) {
            unmatched.push(id);
        }
        records.push(rec);
    }
    Ok((records, unmatched))
}

pub fn save_survival(records: &[SurvivalRecord], path: impl AsRef<Path>) -> Result<()> {
    let mut out = fs::File::create(path.as_ref())?;
    writeln!(out, "sample_id,time,event")?;
    for r in records {
        writeln!(out, "{},{},{}", r.sample_id, r.time, u8::from(r.event))?;
    }
    Ok(())
}

pub fn load_labels(path: impl AsRef<Path>) -> Result<Vec<(String, String)>> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| parse_err(path, 1, e.to_string()))?;
    {
        let headers = reader.headers().map_err(|e| parse_err(path, 1, e.to_string()))?;
        if headers.iter().map(str::trim).ne(["sample_id", "label"]) {
            return Err(parse_err(path, 1, "header must be `sample_id,label`"));
        }
    }
    let mut labels = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let row = row.map_err(|e| parse_err(path, i + 2, e.to_string()))?;
        labels.push((row[0].trim().to_string(), row[1].trim().to_string()));
    }
    Ok(labels)
}

pub fn save_labels(labels: &[(String, String)], path: impl AsRef<Path>) -> Result<()> {
    let mut out = fs::File::create(path.as_ref())?;
    writeln!(out, "sample_id,label")?;
    for (id, label) in labels {
        writeln!(out, "{id},{label}")?;
    }
    Ok(())
}
