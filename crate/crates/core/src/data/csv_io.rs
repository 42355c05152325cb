use std::io::{Read, Write};
use std::path::Path;

use super::TimeSeriesDataset;
use crate::error::{Error, Result};

fn parse_cell(cell: &str) -> Option<f64> {
    cell.trim().parse::<f64>().ok().filter(|v| v.is_finite())
}

/// Reads a comma-separated matrix, one timestep per row.
///
/// The first row is a header when any cell after the first fails to parse
/// as a number (or when it is a single non-numeric cell). A first column
/// whose first data cell is non-numeric is taken as a timestamp and
/// dropped. Error messages count rows from 1 at the top of the file.
pub fn parse_csv<R: Read>(reader: R, label: &str) -> Result<TimeSeriesDataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut records = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::Data(format!("{label}: row {}: {e}", i + 1)))?;
        let row = rec.position().map(|p| p.line() as usize).unwrap_or(i + 1);
        let cells: Vec<String> = rec.iter().map(str::to_string).collect();
        if cells.len() == 1 && cells[0].is_empty() {
            continue;
        }
        records.push((row, cells));
    }
    let Some((_, first)) = records.first() else {
        return Err(Error::Data(format!("{label}: file is empty")));
    };
    let header = if first.len() == 1 {
        parse_cell(&first[0]).is_none()
    } else {
        first[1..].iter().any(|c| parse_cell(c).is_none())
    };
    let header_row = if header { Some(records.remove(0).1) } else { None };
    let Some((_, data0)) = records.first() else {
        return Err(Error::Data(format!("{label}: no data rows")));
    };
    let width = data0.len();
    let timestamp = width > 1 && parse_cell(&data0[0]).is_none();
    let skip = usize::from(timestamp);
    if let Some(h) = &header_row {
        if h.len() != width {
            return Err(Error::Data(format!(
                "{label}: header has {} columns, row {} has {}",
                h.len(),
                records[0].0,
                width
            )));
        }
    }
    let names: Vec<String> = match &header_row {
        Some(h) => h[skip..].to_vec(),
        None => (1..=width - skip).map(|j| format!("v{j}")).collect(),
    };
    let mut values = Vec::with_capacity(records.len() * names.len());
    for (row, cells) in &records {
        if cells.len() != width {
            return Err(Error::Data(format!(
                "{label}: row {row} has {} columns, expected {width}",
                cells.len()
            )));
        }
        for (j, cell) in cells.iter().enumerate().skip(skip) {
            let v = parse_cell(cell).ok_or_else(|| {
                Error::Data(format!("{label}: row {row}, column {}: cannot parse {:?} as a number", j + 1, cell))
            })?;
            values.push(v);
        }
    }
    TimeSeriesDataset::new(values, names, "unspecified")
}

pub fn load_csv(path: impl AsRef<Path>) -> Result<TimeSeriesDataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    parse_csv(std::io::BufReader::new(file), &path.display().to_string())
}

/// Writes a header row and `values` as rows of `header.len()` columns.
pub fn write_matrix_csv<W: Write>(out: W, header: &[String], values: &[f64]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let err = |e: csv::Error| Error::Data(format!("writing CSV: {e}"));
    w.write_record(header).map_err(err)?;
    for row in values.chunks(header.len().max(1)) {
        w.write_record(row.iter().map(|v| v.to_string())).map_err(err)?;
    }
    w.flush().map_err(|e| Error::Data(format!("writing CSV: {e}")))?;
    Ok(())
}
