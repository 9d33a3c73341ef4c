//! FLD field files.
//!
//! Header line:
//! `FLD1 dim=<n> shape=<k1,...,kn> spacing=<h> origin=<o1,...,on> kind=<scalar|vector|symmat> [enc=bin]`
//! followed by row-major values, either whitespace-separated decimal text or,
//! with `enc=bin`, little-endian f64.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::fields::{packed_len, ScalarField, SymMatField, VectorField};
use super::grid::Grid;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FieldKind {
    Scalar,
    Vector,
    SymMat,
}

impl FieldKind {
    fn as_str(self) -> &'static str {
        match self {
            FieldKind::Scalar => "scalar",
            FieldKind::Vector => "vector",
            FieldKind::SymMat => "symmat",
        }
    }

    fn per_node(self, dim: usize) -> usize {
        match self {
            FieldKind::Scalar => 1,
            FieldKind::Vector => dim,
            FieldKind::SymMat => packed_len(dim),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Encoding {
    #[default]
    Text,
    Binary,
}

/// A field of any kind read from disk.
#[derive(Clone, Debug, PartialEq)]
pub enum AnyField {
    Scalar(ScalarField),
    Vector(VectorField),
    SymMat(SymMatField),
}

impl AnyField {
    pub fn into_scalar(self) -> Result<ScalarField> {
        match self {
            AnyField::Scalar(s) => Ok(s),
            other => Err(Error::Format(format!(
                "expected a scalar field, found {}",
                other.kind().as_str()
            ))),
        }
    }

    pub fn kind(&self) -> FieldKind {
        match self {
            AnyField::Scalar(_) => FieldKind::Scalar,
            AnyField::Vector(_) => FieldKind::Vector,
            AnyField::SymMat(_) => FieldKind::SymMat,
        }
    }
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn header(grid: &Grid, kind: FieldKind, enc: Encoding) -> String {
    let mut h = format!(
        "FLD1 dim={} shape={} spacing={} origin={} kind={}",
        grid.dim(),
        join(grid.shape()),
        grid.spacing(),
        join(&grid.origin()),
        kind.as_str()
    );
    if enc == Encoding::Binary {
        h.push_str(" enc=bin");
    }
    h
}

fn write_values<W: Write>(mut w: W, header: &str, values: &[f64], per_line: usize, enc: Encoding) -> Result<()> {
    writeln!(w, "{header}")?;
    match enc {
        Encoding::Text => {
            for chunk in values.chunks(per_line.max(1)) {
                let line: Vec<String> = chunk.iter().map(|v| format!("{v:e}")).collect();
                writeln!(w, "{}", line.join(" "))?;
            }
        }
        Encoding::Binary => {
            for v in values {
                w.write_all(&v.to_le_bytes())?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_scalar<W: Write>(w: W, field: &ScalarField, enc: Encoding) -> Result<()> {
    let h = header(field.grid(), FieldKind::Scalar, enc);
    write_values(w, &h, field.values(), 8, enc)
}

pub fn write_vector<W: Write>(w: W, field: &VectorField, enc: Encoding) -> Result<()> {
    let h = header(field.grid(), FieldKind::Vector, enc);
    write_values(w, &h, field.values(), field.grid().dim(), enc)
}

pub fn write_symmat<W: Write>(w: W, field: &SymMatField, enc: Encoding) -> Result<()> {
    let h = header(field.grid(), FieldKind::SymMat, enc);
    write_values(w, &h, field.values(), packed_len(field.grid().dim()), enc)
}

pub fn save_scalar(path: impl AsRef<Path>, field: &ScalarField, enc: Encoding) -> Result<()> {
    write_scalar(BufWriter::new(File::create(path)?), field, enc)
}

pub fn save_symmat(path: impl AsRef<Path>, field: &SymMatField, enc: Encoding) -> Result<()> {
    write_symmat(BufWriter::new(File::create(path)?), field, enc)
}

pub fn save_vector(path: impl AsRef<Path>, field: &VectorField, enc: Encoding) -> Result<()> {
    write_vector(BufWriter::new(File::create(path)?), field, enc)
}

struct Header {
    grid: Grid,
    kind: FieldKind,
    enc: Encoding,
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>> {
    s.split(',')
        .map(|t| {
            t.trim()
                .parse()
                .map_err(|_| Error::Format(format!("bad {what} entry `{t}`")))
        })
        .collect()
}

fn parse_header(line: &str) -> Result<Header> {
    let mut tokens = line.split_whitespace();
    if tokens.next() != Some("FLD1") {
        return Err(Error::Format("missing FLD1 magic".into()));
    }
    let (mut dim, mut shape, mut spacing, mut origin, mut kind) = (None, None, None, None, None);
    let mut enc = Encoding::Text;
    for tok in tokens {
        let (key, val) = tok
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("header token `{tok}` is not key=value")))?;
        match key {
            "dim" => {
                dim = Some(val.parse::<usize>().map_err(|_| Error::Format(format!("bad dim `{val}`")))?)
            }
            "shape" => shape = Some(parse_list::<usize>(val, "shape")?),
            "spacing" => {
                spacing = Some(val.parse::<f64>().map_err(|_| Error::Format(format!("bad spacing `{val}`")))?)
            }
            "origin" => origin = Some(parse_list::<f64>(val, "origin")?),
            "kind" => {
                kind = Some(match val {
                    "scalar" => FieldKind::Scalar,
                    "vector" => FieldKind::Vector,
                    "symmat" => FieldKind::SymMat,
                    other => return Err(Error::Format(format!("unknown kind `{other}`"))),
                })
            }
            "enc" => {
                enc = match val {
                    "bin" => Encoding::Binary,
                    "text" => Encoding::Text,
                    other => return Err(Error::Format(format!("unknown encoding `{other}`"))),
                }
            }
            other => return Err(Error::Format(format!("unknown header key `{other}`"))),
        }
    }
    let missing = |k: &str| Error::Format(format!("header lacks `{k}`"));
    let dim = dim.ok_or_else(|| missing("dim"))?;
    let shape = shape.ok_or_else(|| missing("shape"))?;
    if shape.len() != dim {
        return Err(Error::Format(format!(
            "dim={dim} but shape has {} entries",
            shape.len()
        )));
    }
    let grid = Grid::new(
        shape,
        spacing.ok_or_else(|| missing("spacing"))?,
        origin.ok_or_else(|| missing("origin"))?,
    )?;
    Ok(Header {
        grid,
        kind: kind.ok_or_else(|| missing("kind"))?,
        enc,
    })
}

pub fn read_field<R: Read>(r: R) -> Result<AnyField> {
    let mut r = BufReader::new(r);
    let mut line = String::new();
    r.read_line(&mut line)?;
    let h = parse_header(line.trim_end())?;
    let expected = h.grid.len() * h.kind.per_node(h.grid.dim());
    let values = match h.enc {
        Encoding::Text => {
            let mut body = String::new();
            r.read_to_string(&mut body)?;
            let v = body
                .split_whitespace()
                .map(|t| {
                    t.parse::<f64>()
                        .map_err(|_| Error::Format(format!("bad value `{t}`")))
                })
                .collect::<Result<Vec<_>>>()?;
            v
        }
        Encoding::Binary => {
            let mut bytes = Vec::new();
            r.read_to_end(&mut bytes)?;
            if bytes.len() != expected * 8 {
                return Err(Error::Format(format!(
                    "binary body has {} bytes, expected {}",
                    bytes.len(),
                    expected * 8
                )));
            }
            bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
                .collect()
        }
    };
    if values.len() != expected {
        return Err(Error::Format(format!(
            "body has {} values, expected {expected}",
            values.len()
        )));
    }
    Ok(match h.kind {
        FieldKind::Scalar => AnyField::Scalar(ScalarField::new(h.grid, values)?),
        FieldKind::Vector => AnyField::Vector(VectorField::new(h.grid, values)?),
        FieldKind::SymMat => AnyField::SymMat(SymMatField::new(h.grid, values)?),
    })
}

pub fn load_field(path: impl AsRef<Path>) -> Result<AnyField> {
    read_field(File::open(path)?)
}

pub fn load_scalar(path: impl AsRef<Path>) -> Result<ScalarField> {
    load_field(path)?.into_scalar()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ScalarField {
        let g = Grid::new(vec![5, 7], 0.1, vec![-0.2, -0.3]).unwrap();
        ScalarField::from_fn(&g, |x| (x[0] * 3.1).sin() + x[1] / 7.0)
    }

    #[test]
    fn text_round_trip_is_bit_exact() {
        let f = sample();
        let mut buf = Vec::new();
        write_scalar(&mut buf, &f, Encoding::Text).unwrap();
        let back = read_field(&buf[..]).unwrap().into_scalar().unwrap();
        assert_eq!(back, f);
    }

    #[test]
    fn binary_round_trip_is_bit_exact() {
        let f = sample();
        let mut buf = Vec::new();
        write_scalar(&mut buf, &f, Encoding::Binary).unwrap();
        assert!(buf.starts_with(b"FLD1 dim=2 shape=5,7"));
        let back = read_field(&buf[..]).unwrap().into_scalar().unwrap();
        assert_eq!(back, f);
    }

    #[test]
    fn rejects_truncated_body() {
        let f = sample();
        let mut buf = Vec::new();
        write_scalar(&mut buf, &f, Encoding::Binary).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(matches!(read_field(&buf[..]), Err(Error::Format(_))));
        assert!(read_field(&b"FLD2 dim=2"[..]).is_err());
    }
}
