//! Tensor persistence.
//!
//! Binary container layout (all little-endian):
//!
//! ```text
//! b"CATN" | rank: u32 | dims: rank x u32 | payload: prod(dims) x f64
//! ```
//!
//! Several containers may be concatenated in one stream. 2-D tensors can also
//! be exchanged as headerless CSV (one line per row).

use std::io::{Read, Write};
use std::path::Path;

use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"CATN";

pub fn write_tensor<W: Write>(out: &mut W, tensor: &Tensor) -> Result<()> {
    out.write_all(MAGIC)?;
    out.write_all(&(tensor.rank() as u32).to_le_bytes())?;
    for &dim in tensor.shape() {
        let dim = u32::try_from(dim)
            .map_err(|_| Error::invalid(format!("dimension {dim} exceeds u32")))?;
        out.write_all(&dim.to_le_bytes())?;
    }
    for v in tensor.data() {
        out.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn to_bytes(tensor: &Tensor) -> Vec<u8> {
    let mut buf = Vec::with_capacity(8 + 4 * tensor.rank() + 8 * tensor.len());
    write_tensor(&mut buf, tensor).expect("writing to a Vec cannot fail");
    buf
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Parse {
                offset: self.pos,
                message: format!(
                    "truncated {what}: need {n} bytes, {} remain",
                    self.bytes.len() - self.pos
                ),
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Parses one container starting at `offset`; returns the tensor and the
/// offset just past it.
pub fn read_tensor_at(bytes: &[u8], offset: usize) -> Result<(Tensor, usize)> {
    let mut cur = Cursor { bytes, pos: offset };
    let magic = cur.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::Parse {
            offset,
            message: format!("bad magic {magic:?}, expected \"CATN\""),
        });
    }
    let rank = cur.u32("rank")? as usize;
    if rank > 16 {
        return Err(Error::Parse {
            offset: cur.pos - 4,
            message: format!("implausible rank {rank}"),
        });
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(cur.u32("dimension")? as usize);
    }
    let shape_at = cur.pos;
    let len = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .and_then(|n| n.checked_mul(8).map(|_| n))
        .ok_or_else(|| Error::Parse {
            offset: shape_at,
            message: format!("shape {shape:?} overflows"),
        })?;
    let payload = cur.take(len * 8, "payload")?;
    let data = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    Ok((Tensor::new(shape, data)?, cur.pos))
}

pub fn from_bytes(bytes: &[u8]) -> Result<Tensor> {
    let (tensor, end) = read_tensor_at(bytes, 0)?;
    if end != bytes.len() {
        return Err(Error::Parse {
            offset: end,
            message: format!("{} trailing bytes", bytes.len() - end),
        });
    }
    Ok(tensor)
}

/// Reads every container in a concatenated stream.
pub fn read_all(bytes: &[u8]) -> Result<Vec<Tensor>> {
    let mut out = Vec::new();
    let mut pos = 0;
    while pos < bytes.len() {
        let (t, next) = read_tensor_at(bytes, pos)?;
        out.push(t);
        pos = next;
    }
    Ok(out)
}

pub fn save(path: impl AsRef<Path>, tensor: &Tensor) -> Result<()> {
    std::fs::write(path, to_bytes(tensor))?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<Tensor> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    from_bytes(&bytes)
}

/// Writes a rank-2 tensor as CSV. Values use Rust's shortest round-trip formatting.
pub fn write_csv<W: Write>(out: W, tensor: &Tensor) -> Result<()> {
    if tensor.rank() != 2 {
        return Err(Error::invalid(format!(
            "CSV export needs a 2-D tensor, got shape {:?}",
            tensor.shape()
        )));
    }
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    for row in tensor.rows() {
        w.write_record(row.iter().map(|v| v.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<R: Read>(input: R) -> Result<Tensor> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(input);
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record?;
        let row = record
            .iter()
            .map(|field| {
                field.parse::<f64>().map_err(|e| {
                    Error::invalid(format!("line {}: `{field}`: {e}", line + 1))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    Tensor::from_rows(&rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn layout_is_bit_exact() {
        let t = Tensor::new(vec![1, 2], vec![1.0, -0.5]).unwrap();
        let bytes = to_bytes(&t);
        let mut expected = b"CATN".to_vec();
        expected.extend_from_slice(&2u32.to_le_bytes());
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&2u32.to_le_bytes());
        expected.extend_from_slice(&1.0f64.to_le_bytes());
        expected.extend_from_slice(&(-0.5f64).to_le_bytes());
        assert_eq!(bytes, expected);
    }

    #[test]
    fn truncation_reports_offset() {
        let t = Tensor::from_fn(&[3, 2], |i| i as f64);
        let bytes = to_bytes(&t);
        let cut = &bytes[..bytes.len() - 3];
        match from_bytes(cut) {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, 4 + 4 + 8),
            other => panic!("expected parse error, got {other:?}"),
        }
        match from_bytes(b"CATX\0\0\0\0") {
            Err(Error::Parse { offset: 0, .. }) => {}
            other => panic!("expected bad magic, got {other:?}"),
        }
    }

    #[test]
    fn concatenated_stream() {
        let a = Tensor::from_fn(&[2], |i| i as f64);
        let b = Tensor::from_fn(&[1, 1, 3], |i| -(i as f64));
        let mut bytes = to_bytes(&a);
        bytes.extend(to_bytes(&b));
        assert_eq!(read_all(&bytes).unwrap(), vec![a, b]);
    }

    #[test]
    fn csv_import_of_hand_written_matrix() {
        let text = "1, 2.5\n-3,4e-3\n";
        let t = read_csv(text.as_bytes()).unwrap();
        assert_eq!(t.shape(), &[2, 2]);
        assert_eq!(t.data(), &[1.0, 2.5, -3.0, 0.004]);
        assert!(read_csv("1,2\n3\n".as_bytes()).is_err());
    }

    proptest! {
        #[test]
        fn binary_round_trip(dims in prop::collection::vec(0usize..4, 0..4), seed in any::<u64>()) {
            let len: usize = dims.iter().product();
            let data: Vec<f64> = (0..len).map(|i| f64::from_bits(seed.wrapping_mul(i as u64 + 1) >> 2)).collect();
            let t = Tensor::new(dims, data).unwrap();
            let back = from_bytes(&to_bytes(&t)).unwrap();
            prop_assert_eq!(back.shape(), t.shape());
            prop_assert!(back.data().iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        }

        #[test]
        fn csv_round_trip(rows in 1usize..5, cols in 1usize..5, vals in prop::collection::vec(-1e6f64..1e6, 25)) {
            let t = Tensor::from_fn(&[rows, cols], |i| vals[i]);
            let mut buf = Vec::new();
            write_csv(&mut buf, &t).unwrap();
            prop_assert_eq!(read_csv(buf.as_slice()).unwrap(), t);
        }
    }
}
