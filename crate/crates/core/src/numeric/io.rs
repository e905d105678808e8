//! Tensor block format:
//!
//! ```text
//! "STNS" | u8 version (1) | u8 dtype (0 = f32, 1 = f64) | u8 rank
//!        | rank x u64 LE extents | row-major LE payload
//! ```

use std::io::{Read, Write};

use super::Tensor;
use crate::error::{Error, Result};

pub const TENSOR_MAGIC: [u8; 4] = *b"STNS";
pub const TENSOR_VERSION: u8 = 1;

/// Upper bound on payload elements accepted from a file.
const MAX_ELEMENTS: u64 = 1 << 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    pub fn from_code(c: u8) -> Result<DType> {
        match c {
            0 => Ok(DType::F32),
            1 => Ok(DType::F64),
            other => Err(Error::Format(format!("unknown dtype code {other}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DType::F32 => "f32",
            DType::F64 => "f64",
        }
    }
}

pub fn write_tensor<W: Write>(w: &mut W, t: &Tensor, dtype: DType) -> Result<()> {
    if t.rank() > u8::MAX as usize {
        return Err(Error::Format(format!("rank {} too large", t.rank())));
    }
    w.write_all(&TENSOR_MAGIC)?;
    w.write_all(&[TENSOR_VERSION, dtype.code(), t.rank() as u8])?;
    for &d in t.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(t.len() * 8);
    match dtype {
        DType::F64 => t.data().iter().for_each(|v| buf.extend_from_slice(&v.to_le_bytes())),
        DType::F32 => t
            .data()
            .iter()
            .for_each(|v| buf.extend_from_slice(&(*v as f32).to_le_bytes())),
    }
    w.write_all(&buf)?;
    Ok(())
}

fn read_exact_or_truncated<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::Format(format!("truncated tensor block while reading {what}"))
        } else {
            Error::Io(e)
        }
    })
}

/// Reads one block, returning its stored dtype. `f32` payloads are widened.
pub fn read_tensor<R: Read>(r: &mut R) -> Result<(Tensor, DType)> {
    let mut magic = [0u8; 4];
    read_exact_or_truncated(r, &mut magic, "magic")?;
    if magic != TENSOR_MAGIC {
        return Err(Error::BadMagic {
            expected: TENSOR_MAGIC,
            found: magic,
        });
    }
    let mut head = [0u8; 3];
    read_exact_or_truncated(r, &mut head, "header")?;
    if head[0] != TENSOR_VERSION {
        return Err(Error::Format(format!("unsupported tensor version {}", head[0])));
    }
    let dtype = DType::from_code(head[1])?;
    let rank = head[2] as usize;
    let mut shape = Vec::with_capacity(rank);
    let mut count: u64 = 1;
    for _ in 0..rank {
        let mut b = [0u8; 8];
        read_exact_or_truncated(r, &mut b, "extents")?;
        let d = u64::from_le_bytes(b);
        count = count.saturating_mul(d);
        shape.push(d as usize);
    }
    if count == 0 || count > MAX_ELEMENTS {
        return Err(Error::Format(format!("implausible tensor extents {shape:?}")));
    }
    let width = match dtype {
        DType::F32 => 4,
        DType::F64 => 8,
    };
    let mut raw = vec![0u8; count as usize * width];
    read_exact_or_truncated(r, &mut raw, "payload")?;
    let data: Vec<f64> = match dtype {
        DType::F64 => raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
        DType::F32 => raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
    };
    Ok((Tensor::new(shape, data)?, dtype))
}

/// Reads a block and requires a specific stored dtype.
pub fn read_tensor_as<R: Read>(r: &mut R, expected: DType) -> Result<Tensor> {
    let (t, found) = read_tensor(r)?;
    if found != expected {
        return Err(Error::DTypeMismatch {
            expected: expected.name(),
            found: found.name(),
        });
    }
    Ok(t)
}

/// Writes a single tensor to a file (f64 payload).
pub fn save_tensor(path: &std::path::Path, t: &Tensor) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_tensor(&mut f, t, DType::F64)?;
    f.flush()?;
    Ok(())
}

pub fn load_tensor(path: &std::path::Path) -> Result<Tensor> {
    let f = std::fs::File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingArtifact {
            name: "tensor".into(),
            path: path.to_path_buf(),
        },
        _ => Error::Io(e),
    })?;
    Ok(read_tensor(&mut std::io::BufReader::new(f))?.0)
}

/// Length-prefixed (u64 LE) UTF-8 JSON header.
pub fn write_json_header<W: Write, T: serde::Serialize>(w: &mut W, value: &T) -> Result<()> {
    let bytes = serde_json::to_vec(value)?;
    w.write_all(&(bytes.len() as u64).to_le_bytes())?;
    w.write_all(&bytes)?;
    Ok(())
}

pub fn read_json_header<R: Read, T: serde::de::DeserializeOwned>(r: &mut R) -> Result<T> {
    let mut len = [0u8; 8];
    read_exact_or_truncated(r, &mut len, "header length")?;
    let len = u64::from_le_bytes(len);
    if len > 1 << 24 {
        return Err(Error::Format(format!("header length {len} implausible")));
    }
    let mut buf = vec![0u8; len as usize];
    read_exact_or_truncated(r, &mut buf, "header")?;
    let text = std::str::from_utf8(&buf).map_err(|e| Error::Format(format!("header utf-8: {e}")))?;
    Ok(serde_json::from_str(text)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_exact() {
        let t = Tensor::new(vec![2, 1], vec![1.0, -2.0]).unwrap();
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t, DType::F64).unwrap();
        assert_eq!(&buf[..4], b"STNS");
        assert_eq!(&buf[4..7], &[1, 1, 2]);
        assert_eq!(&buf[7..15], &2u64.to_le_bytes());
        assert_eq!(&buf[15..23], &1u64.to_le_bytes());
        assert_eq!(&buf[23..31], &1.0f64.to_le_bytes());
        assert_eq!(buf.len(), 23 + 16);
    }

    #[test]
    fn f32_payload_is_widened_and_dtype_checked() {
        let t = Tensor::new(vec![3], vec![0.5, 0.25, -4.0]).unwrap();
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t, DType::F32).unwrap();
        let (back, dt) = read_tensor(&mut buf.as_slice()).unwrap();
        assert_eq!(dt, DType::F32);
        assert_eq!(back, t);
        assert!(matches!(
            read_tensor_as(&mut buf.as_slice(), DType::F64),
            Err(Error::DTypeMismatch { .. })
        ));
    }

    #[test]
    fn truncation_and_bad_magic_are_structured_errors() {
        let t = Tensor::ones(&[4, 4]);
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t, DType::F64).unwrap();
        for cut in [0, 3, 10, buf.len() - 1] {
            assert!(matches!(
                read_tensor(&mut &buf[..cut]),
                Err(Error::Format(_))
            ));
        }
        buf[0] = b'X';
        assert!(matches!(
            read_tensor(&mut buf.as_slice()),
            Err(Error::BadMagic { .. })
        ));
    }

    proptest! {
        #[test]
        fn round_trip_is_bitwise(
            shape in prop::collection::vec(1usize..5, 0..4),
            seed in any::<u64>(),
        ) {
            let t = super::super::RandomSource::new(seed, 0).gaussian(&shape);
            let mut buf = Vec::new();
            write_tensor(&mut buf, &t, DType::F64).unwrap();
            let back = read_tensor_as(&mut buf.as_slice(), DType::F64).unwrap();
            prop_assert_eq!(back.shape(), t.shape());
            for (a, b) in back.data().iter().zip(t.data()) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }
}
