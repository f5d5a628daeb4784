//! CSV ingestion and emission of raw tables.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use didcont::RawTable;

use crate::CliError;

/// Reads a headed CSV whose every cell is a decimal number.
pub fn read_table(path: &Path) -> Result<RawTable, CliError> {
    let file = File::open(path).map_err(|e| CliError::Input(format!("cannot open {}: {e}", path.display())))?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(file);
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| CliError::Input(format!("cannot read header of {}: {e}", path.display())))?
        .iter()
        .map(str::to_owned)
        .collect();
    if headers.is_empty() || headers.iter().any(String::is_empty) {
        return Err(CliError::Input("header row has an empty column name".into()));
    }
    for (i, name) in headers.iter().enumerate() {
        if headers[..i].contains(name) {
            return Err(CliError::Input(format!("duplicate column `{name}`")));
        }
    }
    let mut columns: Vec<Vec<f64>> = vec![Vec::new(); headers.len()];
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(|e| CliError::Input(format!("row {row}: {e}")))?;
        for (j, cell) in record.iter().enumerate() {
            let value: f64 = cell
                .parse()
                .map_err(|_| CliError::Input(format!("row {row}, column `{}`: `{cell}` is not a number", headers[j])))?;
            columns[j].push(value);
        }
    }
    Ok(headers.into_iter().zip(columns).fold(RawTable::new(), |t, (name, values)| t.with_column(name, values)))
}

/// Writes `table` with a header row; floats use the shortest representation
/// that round-trips exactly.
pub fn write_table(table: &RawTable, path: &Path) -> Result<(), CliError> {
    let io_err = |e: std::io::Error| CliError::Input(format!("cannot write {}: {e}", path.display()));
    let mut file = std::io::BufWriter::new(File::create(path).map_err(io_err)?);
    let mut writer = csv::Writer::from_writer(&mut file);
    let csv_err = |e: csv::Error| CliError::Input(format!("cannot write {}: {e}", path.display()));
    writer.write_record(table.names()).map_err(csv_err)?;
    for i in 0..table.n_rows() {
        writer
            .write_record(table.columns().iter().map(|(_, values)| values[i].to_string()))
            .map_err(csv_err)?;
    }
    writer.flush().map_err(io_err)?;
    drop(writer);
    file.flush().map_err(io_err)
}
