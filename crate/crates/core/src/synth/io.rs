//! Dataset directory layout:
//!
//! ```text
//! <dir>/<modality>.csv   header f0,f1,...; one row per sample
//! <dir>/labels.csv       header class[,score]
//! <dir>/masks.csv        header present.<m>...,keep.<m>.<j>...; 0/1 flags
//! ```
//!
//! Every file may start with `#` comment lines (run id, config hash),
//! which readers skip. Floats use the shortest round-trip representation.

use std::fs;
use std::path::Path;

use super::MultimodalBatch;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

fn write_file(path: &Path, header: Option<&str>, body: String) -> Result<()> {
    let mut text = String::new();
    if let Some(h) = header {
        for line in h.lines() {
            text.push_str("# ");
            text.push_str(line);
            text.push('\n');
        }
    }
    text.push_str(&body);
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn flag(b: bool) -> &'static str {
    if b {
        "1"
    } else {
        "0"
    }
}

pub fn write_batch_dir(dir: &Path, batch: &MultimodalBatch, header: Option<&str>) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let n = batch.len();
    for (name, x) in batch.modalities.iter().zip(&batch.features) {
        let mut body = (0..x.cols()).map(|j| format!("f{j}")).collect::<Vec<_>>().join(",");
        body.push('\n');
        for i in 0..n {
            let row: Vec<String> = x.row(i).iter().map(|v| v.to_string()).collect();
            body.push_str(&row.join(","));
            body.push('\n');
        }
        write_file(&dir.join(format!("{name}.csv")), header, body)?;
    }

    let mut body = String::from(if batch.scores.is_some() { "class,score\n" } else { "class\n" });
    for i in 0..n {
        body.push_str(&batch.classes[i].to_string());
        if let Some(s) = &batch.scores {
            body.push(',');
            body.push_str(&s[i].to_string());
        }
        body.push('\n');
    }
    write_file(&dir.join("labels.csv"), header, body)?;

    let mut cols: Vec<String> = batch.modalities.iter().map(|m| format!("present.{m}")).collect();
    for (name, x) in batch.modalities.iter().zip(&batch.features) {
        cols.extend((0..x.cols()).map(|j| format!("keep.{name}.{j}")));
    }
    let mut body = cols.join(",");
    body.push('\n');
    let m = batch.num_modalities();
    for i in 0..n {
        let mut row: Vec<&str> = (0..m).map(|k| flag(batch.is_present(i, k))).collect();
        for (x, mask) in batch.features.iter().zip(&batch.feature_mask) {
            let d = x.cols();
            row.extend(mask[i * d..(i + 1) * d].iter().map(|&b| flag(b)));
        }
        body.push_str(&row.join(","));
        body.push('\n');
    }
    write_file(&dir.join("masks.csv"), header, body)
}

fn read_table(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(path)
        .map_err(|e| Error::format(path, e.to_string()))?;
    let header = reader
        .headers()
        .map_err(|e| Error::format(path, e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    let mut rows = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| Error::format(path, e.to_string()))?;
        rows.push(rec.iter().map(str::to_string).collect());
    }
    Ok((header, rows))
}

fn parse<T: std::str::FromStr>(path: &Path, s: &str) -> Result<T> {
    s.trim()
        .parse()
        .map_err(|_| Error::format(path, format!("cannot parse {s:?}")))
}

pub fn read_batch_dir(dir: &Path) -> Result<MultimodalBatch> {
    let masks_path = dir.join("masks.csv");
    let (mask_header, mask_rows) = read_table(&masks_path)?;
    let modalities: Vec<String> = mask_header
        .iter()
        .filter_map(|h| h.strip_prefix("present.").map(str::to_string))
        .collect();
    if modalities.len() < 2 {
        return Err(Error::format(&masks_path, "fewer than two modalities"));
    }
    let m = modalities.len();

    let labels_path = dir.join("labels.csv");
    let (label_header, label_rows) = read_table(&labels_path)?;
    let n = label_rows.len();
    let classes = label_rows
        .iter()
        .map(|r| parse::<usize>(&labels_path, &r[0]))
        .collect::<Result<Vec<_>>>()?;
    let scores = if label_header.len() > 1 {
        Some(
            label_rows
                .iter()
                .map(|r| parse::<f64>(&labels_path, &r[1]))
                .collect::<Result<Vec<_>>>()?,
        )
    } else {
        None
    };

    let mut features = Vec::with_capacity(m);
    for name in &modalities {
        let path = dir.join(format!("{name}.csv"));
        let (header, rows) = read_table(&path)?;
        if rows.len() != n {
            return Err(Error::format(&path, format!("{} rows, labels have {n}", rows.len())));
        }
        let d = header.len();
        let mut data = Vec::with_capacity(n * d);
        for r in &rows {
            for v in r {
                data.push(parse::<f64>(&path, v)?);
            }
        }
        features.push(Tensor::new(n, d, data)?);
    }

    if mask_rows.len() != n {
        return Err(Error::format(&masks_path, "row count differs from labels"));
    }
    let mut present = Vec::with_capacity(n * m);
    let mut feature_mask: Vec<Vec<bool>> = features.iter().map(|f| Vec::with_capacity(f.len())).collect();
    for r in &mask_rows {
        let flags = r
            .iter()
            .map(|v| match v.trim() {
                "1" => Ok(true),
                "0" => Ok(false),
                other => Err(Error::format(&masks_path, format!("bad flag {other:?}"))),
            })
            .collect::<Result<Vec<_>>>()?;
        present.extend_from_slice(&flags[..m]);
        let mut offset = m;
        for (k, f) in features.iter().enumerate() {
            feature_mask[k].extend_from_slice(&flags[offset..offset + f.cols()]);
            offset += f.cols();
        }
    }
    let batch = MultimodalBatch {
        modalities,
        features,
        classes,
        scores,
        present,
        feature_mask,
    };
    batch
        .check_invariants()
        .map_err(|e| Error::format(dir, e.to_string()))?;
    Ok(batch)
}
