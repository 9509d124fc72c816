//! Reader and writer for `.npy` version 1.0 files.
//!
//! Only little-endian `f4`/`f8` arrays in C order are supported; anything
//! else is rejected with [`Error::Unsupported`]. Data is always widened to
//! `f64` on read.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::{Grid2D, Tensor3};

pub const MAGIC: [u8; 6] = *b"\x93NUMPY";

/// Magic, version and the u16 header-length field.
const PREAMBLE_LEN: usize = 10;
const ALIGNMENT: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F4,
    F8,
}

impl DType {
    pub fn descr(self) -> &'static str {
        match self {
            DType::F4 => "<f4",
            DType::F8 => "<f8",
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F4 => 4,
            DType::F8 => 8,
        }
    }

    fn from_descr(descr: &str) -> Result<Self> {
        match descr {
            "<f4" => Ok(DType::F4),
            "<f8" => Ok(DType::F8),
            other => Err(Error::Unsupported(format!("dtype '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NpyHeader {
    pub dtype: DType,
    pub fortran_order: bool,
    pub shape: Vec<usize>,
}

impl NpyHeader {
    pub fn element_count(&self) -> usize {
        self.shape.iter().product()
    }

    /// The dictionary literal, without padding.
    fn dict_text(&self) -> String {
        let shape = match self.shape.as_slice() {
            [] => "()".to_string(),
            [n] => format!("({n},)"),
            dims => format!(
                "({})",
                dims.iter().map(usize::to_string).collect::<Vec<_>>().join(", ")
            ),
        };
        format!(
            "{{'descr': '{}', 'fortran_order': {}, 'shape': {}, }}",
            self.dtype.descr(),
            if self.fortran_order { "True" } else { "False" },
            shape
        )
    }

    /// Full header block: preamble plus padded, newline-terminated text.
    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut text = self.dict_text();
        let unpadded = PREAMBLE_LEN + text.len() + 1;
        let padding = (ALIGNMENT - unpadded % ALIGNMENT) % ALIGNMENT;
        text.extend(std::iter::repeat_n(' ', padding));
        text.push('\n');
        let header_len = u16::try_from(text.len())
            .map_err(|_| Error::Unsupported("header longer than 65535 bytes".into()))?;

        let mut out = Vec::with_capacity(PREAMBLE_LEN + text.len());
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&[1, 0]);
        out.extend_from_slice(&header_len.to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArrayRecord {
    pub header: NpyHeader,
    pub data: Vec<f64>,
}

impl ArrayRecord {
    /// A C-order record; the dtype recorded here is only a default since the
    /// writer takes the on-disk dtype explicitly.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let rec = Self {
            header: NpyHeader {
                dtype: DType::F8,
                fortran_order: false,
                shape,
            },
            data,
        };
        rec.validate()?;
        Ok(rec)
    }

    pub fn shape(&self) -> &[usize] {
        &self.header.shape
    }

    fn validate(&self) -> Result<()> {
        let expected = self.header.element_count();
        if self.data.len() != expected {
            return Err(Error::InvalidInput(format!(
                "shape {:?} needs {expected} values, record holds {}",
                self.header.shape,
                self.data.len()
            )));
        }
        Ok(())
    }

    pub fn from_grid(g: &Grid2D) -> Self {
        Self::new(vec![g.height(), g.width()], g.values().to_vec()).expect("grid is consistent")
    }

    pub fn from_tensor(t: &Tensor3) -> Self {
        let (c, h, w) = t.shape();
        Self::new(vec![c, h, w], t.values().to_vec()).expect("tensor is consistent")
    }

    /// Stacks equally shaped grids into an `(N, H, W)` record.
    pub fn from_grids(grids: &[Grid2D]) -> Result<Self> {
        let first = grids
            .first()
            .ok_or_else(|| Error::InvalidInput("cannot stack zero grids".into()))?;
        let mut data = Vec::with_capacity(grids.len() * first.len());
        for g in grids {
            first.ensure_same_shape(g)?;
            data.extend_from_slice(g.values());
        }
        Self::new(vec![grids.len(), first.height(), first.width()], data)
    }

    pub fn to_grid(&self) -> Result<Grid2D> {
        match self.header.shape.as_slice() {
            &[h, w] => Grid2D::new(h, w, self.data.clone()),
            other => Err(Error::Shape(format!("expected a 2-D array, got shape {other:?}"))),
        }
    }

    /// Splits an `(N, H, W)` record into its `N` grids.
    pub fn to_grids(&self) -> Result<Vec<Grid2D>> {
        match self.header.shape.as_slice() {
            &[_, h, w] if h > 0 && w > 0 => self
                .data
                .chunks(h * w)
                .map(|chunk| Grid2D::new(h, w, chunk.to_vec()))
                .collect(),
            other => Err(Error::Shape(format!("expected an (N, H, W) array, got shape {other:?}"))),
        }
    }
}

pub fn read_npy(bytes: &[u8]) -> Result<ArrayRecord> {
    if bytes.len() < MAGIC.len() || bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Format("missing \\x93NUMPY magic".into()));
    }
    if bytes.len() < PREAMBLE_LEN {
        return Err(Error::Length {
            expected: PREAMBLE_LEN,
            found: bytes.len(),
        });
    }
    let (major, minor) = (bytes[6], bytes[7]);
    if (major, minor) != (1, 0) {
        return Err(Error::Unsupported(format!("format version {major}.{minor}")));
    }
    let header_len = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
    let data_start = PREAMBLE_LEN + header_len;
    if bytes.len() < data_start {
        return Err(Error::Length {
            expected: data_start,
            found: bytes.len(),
        });
    }
    let text = std::str::from_utf8(&bytes[PREAMBLE_LEN..data_start])
        .map_err(|_| Error::Format("header is not valid text".into()))?;
    let header = parse_header(text)?;
    if header.fortran_order {
        return Err(Error::Unsupported("fortran_order arrays".into()));
    }

    let count = header.element_count();
    let payload = &bytes[data_start..];
    let needed = count * header.dtype.size();
    if payload.len() < needed {
        return Err(Error::Length {
            expected: data_start + needed,
            found: bytes.len(),
        });
    }
    let data = match header.dtype {
        DType::F4 => payload[..needed]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
            .collect(),
        DType::F8 => payload[..needed]
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect(),
    };
    Ok(ArrayRecord { header, data })
}

pub fn write_npy(rec: &ArrayRecord, dtype: DType) -> Result<Vec<u8>> {
    rec.validate()?;
    let header = NpyHeader {
        dtype,
        fortran_order: false,
        shape: rec.header.shape.clone(),
    };
    let mut out = header.encode()?;
    out.reserve(rec.data.len() * dtype.size());
    match dtype {
        DType::F4 => rec
            .data
            .iter()
            .for_each(|&v| out.extend_from_slice(&(v as f32).to_le_bytes())),
        DType::F8 => rec
            .data
            .iter()
            .for_each(|&v| out.extend_from_slice(&v.to_le_bytes())),
    }
    Ok(out)
}

pub fn read_npy_file(path: impl AsRef<Path>) -> Result<ArrayRecord> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    read_npy(&bytes).map_err(|e| Error::at(path, e))
}

pub fn write_npy_file(path: impl AsRef<Path>, rec: &ArrayRecord, dtype: DType) -> Result<()> {
    let path = path.as_ref();
    let bytes = write_npy(rec, dtype).map_err(|e| Error::at(path, e))?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Parses the header dictionary literal, e.g.
/// `{'descr': '<f4', 'fortran_order': False, 'shape': (64, 64), }`.
fn parse_header(text: &str) -> Result<NpyHeader> {
    let mut p = Parser::new(text.trim_end());
    p.expect('{')?;
    let (mut descr, mut fortran, mut shape) = (None, None, None);
    loop {
        p.skip_ws();
        if p.eat('}') {
            break;
        }
        let key = p.string()?;
        p.expect(':')?;
        match key.as_str() {
            "descr" => descr = Some(DType::from_descr(&p.string()?)?),
            "fortran_order" => fortran = Some(p.boolean()?),
            "shape" => shape = Some(p.tuple()?),
            other => return Err(Error::Format(format!("unexpected header key '{other}'"))),
        }
        p.skip_ws();
        if !p.eat(',') {
            p.expect('}')?;
            break;
        }
    }
    p.skip_ws();
    if !p.rest().is_empty() {
        return Err(Error::Format("trailing characters after header dictionary".into()));
    }
    Ok(NpyHeader {
        dtype: descr.ok_or_else(|| Error::Format("header lacks 'descr'".into()))?,
        fortran_order: fortran.ok_or_else(|| Error::Format("header lacks 'fortran_order'".into()))?,
        shape: shape.ok_or_else(|| Error::Format("header lacks 'shape'".into()))?,
    })
}

struct Parser<'a> {
    src: &'a str,
    pos: usize,
}

impl<'a> Parser<'a> {
    fn new(src: &'a str) -> Self {
        Self { src, pos: 0 }
    }

    fn rest(&self) -> &'a str {
        &self.src[self.pos..]
    }

    fn skip_ws(&mut self) {
        let rest = self.rest();
        self.pos += rest.len() - rest.trim_start().len();
    }

    fn eat(&mut self, c: char) -> bool {
        self.skip_ws();
        if self.rest().starts_with(c) {
            self.pos += c.len_utf8();
            true
        } else {
            false
        }
    }

    fn expect(&mut self, c: char) -> Result<()> {
        if self.eat(c) {
            Ok(())
        } else {
            Err(Error::Format(format!("expected '{c}' at offset {} of header", self.pos)))
        }
    }

    fn string(&mut self) -> Result<String> {
        self.skip_ws();
        let quote = match self.rest().chars().next() {
            Some(q @ ('\'' | '"')) => q,
            _ => return Err(Error::Format(format!("expected string at offset {}", self.pos))),
        };
        self.pos += 1;
        let end = self
            .rest()
            .find(quote)
            .ok_or_else(|| Error::Format("unterminated string in header".into()))?;
        let s = self.rest()[..end].to_string();
        self.pos += end + 1;
        Ok(s)
    }

    fn boolean(&mut self) -> Result<bool> {
        self.skip_ws();
        for (word, value) in [("True", true), ("False", false)] {
            if self.rest().starts_with(word) {
                self.pos += word.len();
                return Ok(value);
            }
        }
        Err(Error::Format(format!("expected True/False at offset {}", self.pos)))
    }

    fn tuple(&mut self) -> Result<Vec<usize>> {
        self.expect('(')?;
        let mut dims = Vec::new();
        loop {
            if self.eat(')') {
                return Ok(dims);
            }
            self.skip_ws();
            let digits = self.rest().bytes().take_while(u8::is_ascii_digit).count();
            if digits == 0 {
                return Err(Error::Format(format!("expected dimension at offset {}", self.pos)));
            }
            let dim = self.rest()[..digits]
                .parse()
                .map_err(|_| Error::Format("dimension out of range".into()))?;
            self.pos += digits;
            dims.push(dim);
            if !self.eat(',') {
                self.expect(')')?;
                return Ok(dims);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_small_f8() {
        let rec = ArrayRecord::new(vec![2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let back = read_npy(&write_npy(&rec, DType::F8).unwrap()).unwrap();
        assert_eq!(back, rec);
    }

    #[test]
    fn scalar_record() {
        let rec = ArrayRecord::new(vec![], vec![2.5]).unwrap();
        let bytes = write_npy(&rec, DType::F8).unwrap();
        assert_eq!(bytes.len(), 128 + 8);
        assert_eq!(read_npy(&bytes).unwrap(), rec);
    }

    #[test]
    fn one_dimensional_shape_has_trailing_comma() {
        let rec = ArrayRecord::new(vec![5], vec![0.0; 5]).unwrap();
        let bytes = write_npy(&rec, DType::F8).unwrap();
        let text = std::str::from_utf8(&bytes[10..128]).unwrap();
        assert!(text.starts_with("{'descr': '<f8', 'fortran_order': False, 'shape': (5,), }"));
        assert_eq!(read_npy(&bytes).unwrap().shape(), &[5]);
    }

    #[test]
    fn tensor_file_size() {
        let t = Tensor3::zeros(3, 64, 64);
        let bytes = write_npy(&ArrayRecord::from_tensor(&t), DType::F4).unwrap();
        assert_eq!(bytes.len(), 49280);
    }

    #[test]
    fn f4_round_trip_rounds() {
        let rec = ArrayRecord::new(vec![3], vec![0.1, 1.0 / 3.0, -2.75]).unwrap();
        let back = read_npy(&write_npy(&rec, DType::F4).unwrap()).unwrap();
        let expected: Vec<f64> = rec.data.iter().map(|&v| v as f32 as f64).collect();
        assert_eq!(back.data, expected);
        assert_eq!(back.header.dtype, DType::F4);
    }

    #[test]
    fn bad_magic() {
        let rec = ArrayRecord::new(vec![1], vec![1.0]).unwrap();
        let mut bytes = write_npy(&rec, DType::F4).unwrap();
        bytes[0] = 0;
        assert!(matches!(read_npy(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn truncated_payload() {
        let rec = ArrayRecord::new(vec![4, 4], vec![1.0; 16]).unwrap();
        let bytes = write_npy(&rec, DType::F8).unwrap();
        assert!(matches!(
            read_npy(&bytes[..bytes.len() - 3]),
            Err(Error::Length { .. })
        ));
        assert!(matches!(read_npy(&bytes[..40]), Err(Error::Length { .. })));
    }

    fn with_header(text: &str) -> Vec<u8> {
        let mut out = MAGIC.to_vec();
        out.extend_from_slice(&[1, 0]);
        out.extend_from_slice(&(text.len() as u16).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        out.extend_from_slice(&[0u8; 64]);
        out
    }

    #[test]
    fn unsupported_features() {
        let fortran = with_header("{'descr': '<f8', 'fortran_order': True, 'shape': (2,), }\n");
        assert!(matches!(read_npy(&fortran), Err(Error::Unsupported(_))));

        let int = with_header("{'descr': '<i4', 'fortran_order': False, 'shape': (2,), }\n");
        assert!(matches!(read_npy(&int), Err(Error::Unsupported(_))));

        let big_endian = with_header("{'descr': '>f8', 'fortran_order': False, 'shape': (2,), }\n");
        assert!(matches!(read_npy(&big_endian), Err(Error::Unsupported(_))));

        let mut v2 = with_header("{'descr': '<f8', 'fortran_order': False, 'shape': (2,), }\n");
        v2[6] = 2;
        assert!(matches!(read_npy(&v2), Err(Error::Unsupported(_))));
    }

    #[test]
    fn accepts_reordered_keys_and_double_quotes() {
        let bytes = with_header("{\"shape\": (2, 1), \"fortran_order\": False, \"descr\": \"<f8\"}\n");
        let rec = read_npy(&bytes).unwrap();
        assert_eq!(rec.shape(), &[2, 1]);
        assert_eq!(rec.data, vec![0.0, 0.0]);
    }

    #[test]
    fn length_mismatch_is_rejected() {
        assert!(matches!(
            ArrayRecord::new(vec![2, 3], vec![0.0; 5]),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn grid_stack_round_trip() {
        let grids = vec![Grid2D::filled(2, 3, 1.0), Grid2D::filled(2, 3, 2.0)];
        let rec = ArrayRecord::from_grids(&grids).unwrap();
        assert_eq!(rec.shape(), &[2, 2, 3]);
        assert_eq!(rec.to_grids().unwrap(), grids);
    }
}
