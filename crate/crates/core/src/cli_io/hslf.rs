//! HSLF matrix files.
//!
//! Layout, all little-endian:
//!
//! | offset | size | field                          |
//! |--------|------|--------------------------------|
//! | 0      | 4    | magic `b"HSLF"`                |
//! | 4      | 4    | version, `u32` = 1             |
//! | 8      | 1    | dtype, `0` = f32, `1` = f64    |
//! | 9      | 8    | rows, `u64`                    |
//! | 17     | 8    | cols, `u64`                    |
//! | 25     | ...  | row-major payload              |

use std::fs::File;
use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::gram::GramAccumulator;
use crate::types::Matrix;

pub const MAGIC: [u8; 4] = *b"HSLF";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 25;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    fn code(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
        }
    }

    fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(Dtype::F32),
            1 => Ok(Dtype::F64),
            other => Err(Error::Parse(format!("unknown HSLF dtype code {other}"))),
        }
    }

    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Header {
    pub dtype: Dtype,
    pub rows: usize,
    pub cols: usize,
}

pub fn write_header<W: Write>(out: &mut W, header: &Header) -> Result<()> {
    out.write_all(&MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&[header.dtype.code()])?;
    out.write_all(&(header.rows as u64).to_le_bytes())?;
    out.write_all(&(header.cols as u64).to_le_bytes())?;
    Ok(())
}

fn eof_as_parse(e: std::io::Error, what: &str) -> Error {
    if e.kind() == ErrorKind::UnexpectedEof {
        Error::Parse(format!("truncated HSLF {what}"))
    } else {
        Error::Io(e)
    }
}

pub fn read_header<R: Read>(input: &mut R) -> Result<Header> {
    let mut buf = [0u8; HEADER_LEN];
    input.read_exact(&mut buf).map_err(|e| eof_as_parse(e, "header"))?;
    if buf[0..4] != MAGIC {
        return Err(Error::Parse("bad HSLF magic".into()));
    }
    let version = u32::from_le_bytes(buf[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::Parse(format!("unsupported HSLF version {version}")));
    }
    let dtype = Dtype::from_code(buf[8])?;
    let rows = u64::from_le_bytes(buf[9..17].try_into().unwrap());
    let cols = u64::from_le_bytes(buf[17..25].try_into().unwrap());
    let to_usize = |v: u64| {
        usize::try_from(v).map_err(|_| Error::Parse(format!("HSLF dimension {v} too large")))
    };
    Ok(Header { dtype, rows: to_usize(rows)?, cols: to_usize(cols)? })
}

/// Writes `m` row-major with the given element type.
pub fn write_matrix_to<W: Write>(out: &mut W, m: &Matrix, dtype: Dtype) -> Result<()> {
    write_header(out, &Header { dtype, rows: m.nrows(), cols: m.ncols() })?;
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            match dtype {
                Dtype::F32 => out.write_all(&(m[(i, j)] as f32).to_le_bytes())?,
                Dtype::F64 => out.write_all(&m[(i, j)].to_le_bytes())?,
            }
        }
    }
    Ok(())
}

pub fn write_matrix(path: &Path, m: &Matrix, dtype: Dtype) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    write_matrix_to(&mut out, m, dtype)?;
    out.flush()?;
    Ok(())
}

fn read_rows<R: Read>(input: &mut R, header: &Header, rows: usize) -> Result<Matrix> {
    let width = header.cols;
    let mut buf = vec![0u8; rows * width * header.dtype.size()];
    input.read_exact(&mut buf).map_err(|e| eof_as_parse(e, "payload"))?;
    let values: Vec<f64> = match header.dtype {
        Dtype::F32 => buf
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
        Dtype::F64 => buf
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
    };
    Ok(Matrix::from_row_slice(rows, width, &values))
}

fn expect_end<R: Read>(input: &mut R) -> Result<()> {
    let mut probe = [0u8; 1];
    match input.read(&mut probe)? {
        0 => Ok(()),
        _ => Err(Error::Parse("trailing bytes after HSLF payload".into())),
    }
}

/// Reads a whole matrix, promoting f32 payloads to f64.
pub fn read_matrix_from<R: Read>(input: &mut R) -> Result<Matrix> {
    let header = read_header(input)?;
    let m = read_rows(input, &header, header.rows)?;
    expect_end(input)?;
    Ok(m)
}

pub fn read_matrix(path: &Path) -> Result<Matrix> {
    let mut input = BufReader::new(File::open(path)?);
    read_matrix_from(&mut input)
}

/// Accumulates `X^T X` from an activations file `block_rows` rows at a
/// time. Returns the Gram matrix and the number of sample rows.
pub fn stream_gram(path: &Path, block_rows: usize) -> Result<(Matrix, usize)> {
    if block_rows == 0 {
        return Err(Error::contract("block size must be positive"));
    }
    let mut input = BufReader::new(File::open(path)?);
    let header = read_header(&mut input)?;
    let mut acc = GramAccumulator::new(header.cols);
    let mut remaining = header.rows;
    while remaining > 0 {
        let len = block_rows.min(remaining);
        acc.add_block(&read_rows(&mut input, &header, len)?)?;
        remaining -= len;
    }
    expect_end(&mut input)?;
    let rows = acc.rows();
    Ok((acc.finish(), rows))
}
