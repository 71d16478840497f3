//! Reading and writing designs as CSV.
//!
//! The header holds the unit factors (in formula order) then the treatment
//! factors. Unit columns carry 1-based levels, and rows appear in canonical
//! unit order with the first unit factor outermost.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::LevelTable;
use crate::structure::UnitStructure;

/// Reads a design and sorts it into canonical unit order.
pub fn read_design(path: &Path, structure: &UnitStructure) -> Result<LevelTable> {
    let file = std::fs::File::open(path)?;
    read_design_from(file, structure).map_err(|e| match e {
        Error::Design(m) => Error::Design(format!("{}: {m}", path.display())),
        e => e,
    })
}

pub fn read_design_from<R: Read>(reader: R, structure: &UnitStructure) -> Result<LevelTable> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let units = structure.factors();
    if header.len() <= units.len() {
        return Err(Error::Design("no treatment factor columns".into()));
    }
    for (h, f) in header.iter().zip(units) {
        if h != &f.name {
            return Err(Error::Design(format!("expected unit column `{}`, found `{h}`", f.name)));
        }
    }
    let names = header[units.len()..].to_vec();
    let n = structure.n();
    let mut rows: Vec<Option<Vec<f64>>> = vec![None; n];
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = line + 2;
        if rec.len() != header.len() {
            return Err(Error::Design(format!("line {line}: {} fields, expected {}", rec.len(), header.len())));
        }
        let mut unit = 0;
        for (f, field) in units.iter().zip(rec.iter()) {
            let l: usize = field
                .parse()
                .map_err(|_| Error::Design(format!("line {line}: bad level `{field}` for `{}`", f.name)))?;
            if l == 0 || l > f.size {
                return Err(Error::Design(format!("line {line}: level {l} of `{}` outside 1..={}", f.name, f.size)));
            }
            unit = unit * f.size + (l - 1);
        }
        let values = rec
            .iter()
            .skip(units.len())
            .map(|v| match v.parse::<f64>() {
                Ok(x) if x.is_finite() => Ok(x),
                _ => Err(Error::Design(format!("line {line}: bad value `{v}`"))),
            })
            .collect::<Result<Vec<f64>>>()?;
        if rows[unit].replace(values).is_some() {
            return Err(Error::Design(format!("line {line}: unit listed twice")));
        }
    }
    let present = rows.iter().filter(|r| r.is_some()).count();
    if present != n {
        return Err(Error::Dimension(format!("design lists {present} of {n} units")));
    }
    let rows: Vec<Vec<f64>> = rows.into_iter().flatten().collect();
    LevelTable::new(names, &rows)
}

pub fn write_design(path: &Path, structure: &UnitStructure, design: &LevelTable) -> Result<()> {
    let mut file = std::fs::File::create(path)?;
    write_design_to(&mut file, structure, design)?;
    file.flush()?;
    Ok(())
}

pub fn write_design_to<W: Write>(writer: W, structure: &UnitStructure, design: &LevelTable) -> Result<()> {
    if design.nrows() != structure.n() {
        return Err(Error::Dimension(format!("design has {} rows, structure {} units", design.nrows(), structure.n())));
    }
    let mut w = csv::Writer::from_writer(writer);
    let mut header: Vec<&str> = structure.factors().iter().map(|f| f.name.as_str()).collect();
    header.extend(design.names().iter().map(String::as_str));
    w.write_record(&header)?;
    for (u, row) in design.rows().enumerate() {
        let mut rec: Vec<String> =
            (0..structure.factors().len()).map(|f| (structure.level(u, f) + 1).to_string()).collect();
        rec.extend(row.iter().map(|&v| format_number(v)));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Shortest decimal form of `v` rounded to 6 significant digits. Negative
/// zero prints as `0`.
pub fn format_number(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    let rounded: f64 = format!("{v:.5e}").parse().unwrap_or(v);
    format!("{rounded}")
}
