//! `meb-dataset v1` text format.
//!
//! ```text
//! meb-dataset v1
//! domain=target,dim=32,identities=50,train=1000,query=200,gallery=800
//! split,identity,camera,f_0,...,f_31
//! train,100,0,0.1234,...
//! ```

use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::Path;

use super::{Domain, SampleRecord, SplitDataset};
use crate::error::{Error, Result};

pub const FORMAT_MAGIC: &str = "meb-dataset v1";

pub fn write_dataset<W: Write>(ds: &SplitDataset, mut w: W) -> std::io::Result<()> {
    writeln!(w, "{FORMAT_MAGIC}")?;
    writeln!(
        w,
        "domain={},dim={},identities={},train={},query={},gallery={}",
        ds.domain.as_str(),
        ds.dim,
        ds.num_identities,
        ds.train.len(),
        ds.query.len(),
        ds.gallery.len()
    )?;
    let mut header = String::from("split,identity,camera");
    for i in 0..ds.dim {
        write!(header, ",f_{i}").unwrap();
    }
    writeln!(w, "{header}")?;
    let mut line = String::new();
    for (split, records) in [("train", &ds.train), ("query", &ds.query), ("gallery", &ds.gallery)] {
        for r in records {
            line.clear();
            write!(line, "{split},{},{}", r.identity, r.camera).unwrap();
            for v in &r.features {
                // `Display` for f32 prints the shortest string that round-trips.
                write!(line, ",{v}").unwrap();
            }
            writeln!(w, "{line}")?;
        }
    }
    Ok(())
}

pub fn save_dataset(path: impl AsRef<Path>, ds: &SplitDataset) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut buf = std::io::BufWriter::new(file);
    write_dataset(ds, &mut buf).map_err(|e| Error::io(path, e))?;
    buf.flush().map_err(|e| Error::io(path, e))
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<SplitDataset> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_dataset(&text)
}

fn header_field<'a>(fields: &'a [(&str, &str)], key: &str) -> Result<&'a str> {
    fields
        .iter()
        .find(|(k, _)| *k == key)
        .map(|(_, v)| *v)
        .ok_or_else(|| Error::format("line 2", format!("header is missing `{key}`")))
}

fn header_count(fields: &[(&str, &str)], key: &str) -> Result<usize> {
    header_field(fields, key)?
        .parse()
        .map_err(|_| Error::format("line 2", format!("`{key}` is not a count")))
}

pub fn parse_dataset(text: &str) -> Result<SplitDataset> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));

    match lines.next() {
        Some((_, l)) if l.trim_end() == FORMAT_MAGIC => {}
        Some((_, l)) => {
            return Err(Error::format(
                "line 1",
                format!("expected `{FORMAT_MAGIC}`, found `{l}`"),
            ))
        }
        None => return Err(Error::format("line 1", "empty file")),
    }

    let (_, meta) = lines
        .next()
        .ok_or_else(|| Error::format("line 2", "missing header line"))?;
    let fields: Vec<(&str, &str)> = meta
        .split(',')
        .map(|kv| kv.split_once('=').unwrap_or((kv, "")))
        .collect();
    let domain = match header_field(&fields, "domain")? {
        "source" => Domain::Source,
        "target" => Domain::Target,
        other => return Err(Error::format("line 2", format!("unknown domain `{other}`"))),
    };
    let dim = header_count(&fields, "dim")?;
    if dim == 0 {
        return Err(Error::format("line 2", "dim must be positive"));
    }
    let num_identities = header_count(&fields, "identities")?;
    let expected = [
        header_count(&fields, "train")?,
        header_count(&fields, "query")?,
        header_count(&fields, "gallery")?,
    ];

    let (_, cols) = lines
        .next()
        .ok_or_else(|| Error::format("line 3", "missing column header"))?;
    if cols.split(',').count() != dim + 3 {
        return Err(Error::format(
            "line 3",
            format!("column header has {} columns, expected {}", cols.split(',').count(), dim + 3),
        ));
    }

    let mut ds = SplitDataset {
        domain,
        dim,
        num_identities,
        train: Vec::with_capacity(expected[0]),
        query: Vec::with_capacity(expected[1]),
        gallery: Vec::with_capacity(expected[2]),
    };

    for (lineno, line) in lines {
        if line.is_empty() {
            continue;
        }
        let loc = format!("line {lineno}");
        let mut parts = line.split(',');
        let split = parts.next().unwrap_or_default();
        let identity = parts
            .next()
            .and_then(|v| v.parse::<u32>().ok())
            .ok_or_else(|| Error::format(&loc, "bad identity"))?;
        let camera = parts
            .next()
            .and_then(|v| v.parse::<u32>().ok())
            .ok_or_else(|| Error::format(&loc, "bad camera"))?;
        let features = parts
            .map(|v| v.parse::<f32>())
            .collect::<std::result::Result<Vec<f32>, _>>()
            .map_err(|e| Error::format(&loc, format!("bad feature value: {e}")))?;
        if features.len() != dim {
            return Err(Error::format(
                &loc,
                format!("row has {} feature values, header says dim={dim}", features.len()),
            ));
        }
        let record = SampleRecord {
            features,
            identity,
            camera,
            domain,
        };
        match split {
            "train" => ds.train.push(record),
            "query" => ds.query.push(record),
            "gallery" => ds.gallery.push(record),
            other => return Err(Error::format(&loc, format!("unknown split `{other}`"))),
        }
    }

    let found = [ds.train.len(), ds.query.len(), ds.gallery.len()];
    for ((name, want), got) in ["train", "query", "gallery"].iter().zip(expected).zip(found) {
        if want != got {
            return Err(Error::format(
                "end of file",
                format!("header declares {want} {name} rows, found {got} (truncated file?)"),
            ));
        }
    }
    Ok(ds)
}
