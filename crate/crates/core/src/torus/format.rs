//! Text format for sampled periodic data.
//!
//! A record is one header line of compact JSON
//!
//! ```text
//! {"n":2,"shape":[4,4],"kind":"field"}
//! ```
//!
//! followed by the samples in row-major order (last axis fastest), one grid
//! line per text line: each line holds `shape[n-1]` comma-separated values
//! and there are `len / shape[n-1]` lines. A `"oneform"` record stores its
//! `n` components as consecutive blocks of that layout. Values are written in
//! Rust's shortest round-trip exponent notation (`1.5e-1`), lines end in
//! `\n`, and there is no trailing blank line. Records may be concatenated.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use super::{Grid, PeriodicField, PeriodicOneForm};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RecordKind {
    Field,
    Oneform,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordHeader {
    pub n: usize,
    pub shape: Vec<usize>,
    pub kind: RecordKind,
}

/// A decoded record.
#[derive(Clone, Debug, PartialEq)]
pub enum GridRecord {
    Field(PeriodicField),
    OneForm(PeriodicOneForm),
}

fn write_block<W: Write>(w: &mut W, grid: &Grid, samples: &[f64]) -> Result<()> {
    let row = *grid.shape().last().expect("grid has an axis");
    let mut line = String::new();
    for chunk in samples.chunks(row) {
        line.clear();
        for (i, v) in chunk.iter().enumerate() {
            if i > 0 {
                line.push(',');
            }
            line.push_str(&format!("{v:e}"));
        }
        line.push('\n');
        w.write_all(line.as_bytes())?;
    }
    Ok(())
}

fn write_header<W: Write>(w: &mut W, grid: &Grid, kind: RecordKind) -> Result<()> {
    let header = RecordHeader {
        n: grid.dim(),
        shape: grid.shape().to_vec(),
        kind,
    };
    serde_json::to_writer(&mut *w, &header)?;
    w.write_all(b"\n")?;
    Ok(())
}

pub fn write_field<W: Write>(w: &mut W, field: &PeriodicField) -> Result<()> {
    write_header(w, field.grid(), RecordKind::Field)?;
    write_block(w, field.grid(), field.samples())
}

pub fn write_one_form<W: Write>(w: &mut W, form: &PeriodicOneForm) -> Result<()> {
    write_header(w, form.grid(), RecordKind::Oneform)?;
    for c in form.components() {
        write_block(w, form.grid(), c.samples())?;
    }
    Ok(())
}

fn next_line<R: BufRead>(r: &mut R, what: &str) -> Result<String> {
    let mut line = String::new();
    if r.read_line(&mut line)? == 0 {
        return Err(Error::FileFormat(format!(
            "unexpected end of input reading {what}"
        )));
    }
    Ok(line.trim_end_matches(['\n', '\r']).to_string())
}

fn read_block<R: BufRead>(r: &mut R, grid: &Grid) -> Result<Vec<f64>> {
    let row = *grid.shape().last().expect("grid has an axis");
    let lines = grid.len() / row;
    let mut out = Vec::with_capacity(grid.len());
    for l in 0..lines {
        let line = next_line(r, "samples")?;
        let before = out.len();
        for tok in line.split(',') {
            let v: f64 = tok.trim().parse().map_err(|_| {
                Error::FileFormat(format!("line {} of block: bad number `{tok}`", l + 1))
            })?;
            out.push(v);
        }
        if out.len() - before != row {
            return Err(Error::FileFormat(format!(
                "line {} of block has {} values, expected {row}",
                l + 1,
                out.len() - before
            )));
        }
    }
    Ok(out)
}

/// Parse a header line.
pub fn parse_header(line: &str) -> Result<RecordHeader> {
    let header: RecordHeader = serde_json::from_str(line)?;
    if header.shape.len() != header.n {
        return Err(Error::FileFormat(format!(
            "header declares n={} but shape has {} entries",
            header.n,
            header.shape.len()
        )));
    }
    Ok(header)
}

/// Read one record. Grid validation errors (non-power-of-two shapes) surface
/// as [`Error::BadGrid`].
pub fn read_record<R: BufRead>(r: &mut R) -> Result<GridRecord> {
    let header = parse_header(&next_line(r, "header")?)?;
    let grid = Grid::new(header.shape.clone())?;
    match header.kind {
        RecordKind::Field => {
            let samples = read_block(r, &grid)?;
            Ok(GridRecord::Field(PeriodicField::new(grid, samples)?))
        }
        RecordKind::Oneform => {
            let mut comps = Vec::with_capacity(header.n);
            for _ in 0..header.n {
                comps.push(PeriodicField::new(grid.clone(), read_block(r, &grid)?)?);
            }
            Ok(GridRecord::OneForm(PeriodicOneForm::new(comps)?))
        }
    }
}

/// Read a record that must be a one-form.
pub fn read_one_form<R: BufRead>(r: &mut R) -> Result<PeriodicOneForm> {
    match read_record(r)? {
        GridRecord::OneForm(f) => Ok(f),
        GridRecord::Field(_) => Err(Error::FileFormat("expected a oneform record".into())),
    }
}

/// Read a record that must be a scalar field.
pub fn read_field<R: BufRead>(r: &mut R) -> Result<PeriodicField> {
    match read_record(r)? {
        GridRecord::Field(f) => Ok(f),
        GridRecord::OneForm(_) => Err(Error::FileFormat("expected a field record".into())),
    }
}
