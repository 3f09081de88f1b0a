//! NDJSON and CSV feature files.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Dataset, FeatureRecord, Taxonomy};
use crate::error::{Error, Result};

pub const FEATURES_SCHEMA: &str = "nuclass-features/1";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Format {
    Ndjson,
    Csv,
}

impl Format {
    /// Guess from the file extension; NDJSON unless it ends in `.csv`.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("csv") => Format::Csv,
            _ => Format::Ndjson,
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    schema: String,
    classes: Vec<String>,
    tissues: Vec<String>,
    d_local: usize,
    d_ctx: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Line {
    cell_id: String,
    tissue: String,
    label: Option<String>,
    local: Vec<f64>,
    ctx: Vec<f64>,
}

fn resolve(ds: &Dataset, line: usize, tissue: &str, label: Option<&str>) -> Result<(usize, Option<usize>)> {
    let t = ds
        .taxonomy
        .tissue_index(tissue)
        .ok_or_else(|| Error::data(line, format!("unknown tissue {tissue:?}")))?;
    let y = match label {
        None => None,
        Some(l) => Some(
            ds.taxonomy
                .class_index(l)
                .ok_or_else(|| Error::data(line, format!("unknown class {l:?}")))?,
        ),
    };
    Ok((t, y))
}

pub fn read_ndjson(reader: impl BufRead) -> Result<Dataset> {
    let mut lines = reader.lines().enumerate();
    let (_, first) = lines
        .next()
        .ok_or_else(|| Error::data(1, "missing header line"))?;
    let first = first.map_err(|e| Error::data(1, e.to_string()))?;
    let header: Header =
        serde_json::from_str(&first).map_err(|e| Error::data(1, format!("bad header: {e}")))?;
    if header.schema != FEATURES_SCHEMA {
        return Err(Error::data(1, format!("unsupported schema {:?}", header.schema)));
    }
    let taxonomy =
        Taxonomy::new(header.classes, header.tissues).map_err(|e| Error::data(1, e.to_string()))?;
    let mut ds = Dataset::new(taxonomy, header.d_local, header.d_ctx);
    for (i, line) in lines {
        let n = i + 1;
        let line = line.map_err(|e| Error::data(n, e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Line = serde_json::from_str(&line).map_err(|e| Error::data(n, e.to_string()))?;
        let (tissue, label) = resolve(&ds, n, &rec.tissue, rec.label.as_deref())?;
        let r = FeatureRecord {
            cell_id: rec.cell_id,
            tissue,
            label,
            local: rec.local,
            ctx: rec.ctx,
        };
        ds.validate_record(&r).map_err(|e| Error::data(n, e))?;
        ds.records.push(r);
    }
    Ok(ds)
}

pub fn write_ndjson(ds: &Dataset, mut w: impl Write) -> Result<()> {
    let header = Header {
        schema: FEATURES_SCHEMA.into(),
        classes: ds.taxonomy.classes().to_vec(),
        tissues: ds.taxonomy.tissues().to_vec(),
        d_local: ds.d_local,
        d_ctx: ds.d_ctx,
    };
    let io = |e: std::io::Error| Error::io("<ndjson writer>", e);
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n").map_err(io)?;
    for r in &ds.records {
        let line = Line {
            cell_id: r.cell_id.clone(),
            tissue: ds.taxonomy.tissues()[r.tissue].clone(),
            label: r.label.map(|y| ds.taxonomy.classes()[y].clone()),
            local: r.local.clone(),
            ctx: r.ctx.clone(),
        };
        serde_json::to_writer(&mut w, &line)?;
        w.write_all(b"\n").map_err(io)?;
    }
    w.flush().map_err(io)
}

fn column_dims(header: &csv::StringRecord) -> std::result::Result<(usize, usize), String> {
    let names: Vec<&str> = header.iter().collect();
    if names.len() < 3 || names[..3] != ["cell_id", "tissue", "label"] {
        return Err("header must start with cell_id,tissue,label".into());
    }
    let d_local = names[3..].iter().take_while(|n| n.starts_with('l')).count();
    let d_ctx = names.len() - 3 - d_local;
    for (k, n) in names[3..3 + d_local].iter().enumerate() {
        if *n != format!("l{k}") {
            return Err(format!("expected column l{k}, found {n:?}"));
        }
    }
    for (k, n) in names[3 + d_local..].iter().enumerate() {
        if *n != format!("c{k}") {
            return Err(format!("expected column c{k}, found {n:?}"));
        }
    }
    Ok((d_local, d_ctx))
}

/// CSV rows carry names only, so the taxonomy comes from the caller.
pub fn read_csv(reader: impl std::io::Read, taxonomy: &Taxonomy) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().flexible(true).from_reader(reader);
    let header = rdr.headers().map_err(|e| Error::data(1, e.to_string()))?.clone();
    let (d_local, d_ctx) = column_dims(&header).map_err(|e| Error::data(1, e))?;
    let mut ds = Dataset::new(taxonomy.clone(), d_local, d_ctx);
    for row in rdr.records() {
        let row = row.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            Error::data(line, e.to_string())
        })?;
        let n = row.position().map_or(0, |p| p.line() as usize);
        if row.len() != header.len() {
            return Err(Error::data(
                n,
                format!("expected {} columns, found {}", header.len(), row.len()),
            ));
        }
        let label = Some(&row[2]).filter(|l| !l.is_empty());
        let (tissue, label) = resolve(&ds, n, &row[1], label)?;
        let parse = |s: &str| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| Error::data(n, format!("bad number {s:?}")))
        };
        let values = row.iter().skip(3).map(parse).collect::<Result<Vec<f64>>>()?;
        let r = FeatureRecord {
            cell_id: row[0].to_string(),
            tissue,
            label,
            local: values[..d_local].to_vec(),
            ctx: values[d_local..].to_vec(),
        };
        ds.validate_record(&r).map_err(|e| Error::data(n, e))?;
        ds.records.push(r);
    }
    Ok(ds)
}

pub fn write_csv(ds: &Dataset, w: impl Write) -> Result<()> {
    let csv_err = |e: csv::Error| Error::invalid(format!("csv write failed: {e}"));
    let mut wtr = csv::Writer::from_writer(w);
    let mut header = vec!["cell_id".to_string(), "tissue".into(), "label".into()];
    header.extend((0..ds.d_local).map(|k| format!("l{k}")));
    header.extend((0..ds.d_ctx).map(|k| format!("c{k}")));
    wtr.write_record(&header).map_err(csv_err)?;
    for r in &ds.records {
        let mut row = vec![
            r.cell_id.clone(),
            ds.taxonomy.tissues()[r.tissue].clone(),
            r.label
                .map_or(String::new(), |y| ds.taxonomy.classes()[y].clone()),
        ];
        row.extend(r.local.iter().chain(&r.ctx).map(|v| v.to_string()));
        wtr.write_record(&row).map_err(csv_err)?;
    }
    wtr.flush().map_err(|e| Error::io("<csv writer>", e))
}

/// Reads either format; CSV needs `taxonomy`.
pub fn read_records(path: &Path, format: Format, taxonomy: Option<&Taxonomy>) -> Result<Dataset> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    match format {
        Format::Ndjson => read_ndjson(BufReader::new(f)),
        Format::Csv => {
            let t = taxonomy.ok_or_else(|| Error::config("reading CSV features requires a taxonomy"))?;
            read_csv(BufReader::new(f), t)
        }
    }
}

pub fn write_records(ds: &Dataset, path: &Path, format: Format) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let w = BufWriter::new(f);
    match format {
        Format::Ndjson => write_ndjson(ds, w),
        Format::Csv => write_csv(ds, w),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const HEADER: &str =
        r#"{"schema":"nuclass-features/1","classes":["a","b"],"tissues":["t"],"d_local":2,"d_ctx":1}"#;

    fn parse(body: &str) -> Result<Dataset> {
        read_ndjson(format!("{HEADER}\n{body}").as_bytes())
    }

    #[test]
    fn empty_body_is_empty_dataset() {
        let ds = parse("").unwrap();
        assert!(ds.is_empty());
        assert_eq!((ds.d_local, ds.d_ctx), (2, 1));
    }

    #[test]
    fn unknown_label_names_line() {
        let ok = r#"{"cell_id":"x","tissue":"t","label":"a","local":[1,2],"ctx":[3]}"#;
        let bad = r#"{"cell_id":"y","tissue":"t","label":"zzz","local":[1,2],"ctx":[3]}"#;
        match parse(&format!("{ok}\n{bad}\n")) {
            Err(Error::Data { line, reason }) => {
                assert_eq!(line, 3);
                assert!(reason.contains("zzz"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn ragged_and_missing_fields_rejected() {
        let ragged = r#"{"cell_id":"x","tissue":"t","label":null,"local":[1],"ctx":[3]}"#;
        assert!(matches!(parse(ragged), Err(Error::Data { line: 2, .. })));
        let missing = r#"{"cell_id":"x","tissue":"t","label":null,"local":[1,2]}"#;
        assert!(matches!(parse(missing), Err(Error::Data { line: 2, .. })));
    }

    #[test]
    fn unlabeled_record_parses() {
        let ds = parse(r#"{"cell_id":"x","tissue":"t","label":null,"local":[1,2],"ctx":[3]}"#).unwrap();
        assert_eq!(ds.records[0].label, None);
    }

    #[test]
    fn csv_errors_name_line() {
        let tax = Taxonomy::new(vec!["a".into(), "b".into()], vec!["t".into()]).unwrap();
        let text = "cell_id,tissue,label,l0,c0\nx,t,a,1,2\ny,t,q,1,2\n";
        assert!(matches!(
            read_csv(text.as_bytes(), &tax),
            Err(Error::Data { line: 3, .. })
        ));
        let text = "cell_id,tissue,label,l0,c0\nx,t,a,1\n";
        assert!(matches!(
            read_csv(text.as_bytes(), &tax),
            Err(Error::Data { line: 2, .. })
        ));
        let text = "cell_id,tissue,l0,c0\n";
        assert!(matches!(
            read_csv(text.as_bytes(), &tax),
            Err(Error::Data { line: 1, .. })
        ));
    }
}
