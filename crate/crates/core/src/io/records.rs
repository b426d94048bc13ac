//! Tensor records: one JSON header line `{"name","dtype","shape"}` followed by
//! the raw little-endian payload. Files are plain concatenations of records.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordHeader {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum RecordData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U8(Vec<u8>),
}

impl RecordData {
    fn dtype(&self) -> &'static str {
        match self {
            RecordData::F32(_) => "f32",
            RecordData::F64(_) => "f64",
            RecordData::U8(_) => "u8",
        }
    }

    fn len(&self) -> usize {
        match self {
            RecordData::F32(v) => v.len(),
            RecordData::F64(v) => v.len(),
            RecordData::U8(v) => v.len(),
        }
    }

    pub fn from_real<F: Real>(data: &[F]) -> Self {
        match F::DTYPE {
            "f32" => RecordData::F32(data.iter().map(|v| v.to_f64_lossy() as f32).collect()),
            _ => RecordData::F64(data.iter().map(|v| v.to_f64_lossy()).collect()),
        }
    }

    /// Values as `F`, requiring the stored dtype to match exactly.
    pub fn to_real<F: Real>(&self, name: &str) -> Result<Vec<F>> {
        match (self, F::DTYPE) {
            (RecordData::F32(v), "f32") => {
                Ok(v.iter().map(|&x| F::from_f64_lossy(f64::from(x))).collect())
            }
            (RecordData::F64(v), "f64") => Ok(v.iter().map(|&x| F::from_f64_lossy(x)).collect()),
            _ => Err(Error::Corrupt {
                what: format!("tensor `{name}`"),
                detail: format!("stored as {}, expected {}", self.dtype(), F::DTYPE),
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: RecordData,
}

impl Record {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: RecordData) -> Result<Self> {
        let name = name.into();
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::shape("record", &shape, &[data.len()]));
        }
        Ok(Record { name, shape, data })
    }

    pub fn from_tensor<F: Real>(name: impl Into<String>, t: &Tensor<F>) -> Self {
        Record {
            name: name.into(),
            shape: t.shape().to_vec(),
            data: RecordData::from_real(t.data()),
        }
    }

    pub fn to_tensor<F: Real>(&self) -> Result<Tensor<F>> {
        Tensor::new(self.shape.clone(), self.data.to_real(&self.name)?)
    }

    pub fn u8s(&self) -> Result<&[u8]> {
        match &self.data {
            RecordData::U8(v) => Ok(v),
            other => Err(Error::Corrupt {
                what: format!("tensor `{}`", self.name),
                detail: format!("stored as {}, expected u8", other.dtype()),
            }),
        }
    }

    pub fn f32s(&self) -> Result<&[f32]> {
        match &self.data {
            RecordData::F32(v) => Ok(v),
            other => Err(Error::Corrupt {
                what: format!("tensor `{}`", self.name),
                detail: format!("stored as {}, expected f32", other.dtype()),
            }),
        }
    }
}

pub fn write_record(w: &mut impl Write, rec: &Record) -> std::io::Result<()> {
    let header = RecordHeader {
        name: rec.name.clone(),
        dtype: rec.data.dtype().to_string(),
        shape: rec.shape.clone(),
    };
    let line = serde_json::to_string(&header).map_err(std::io::Error::other)?;
    w.write_all(line.as_bytes())?;
    w.write_all(b"\n")?;
    match &rec.data {
        RecordData::F32(v) => {
            for x in v {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        RecordData::F64(v) => {
            for x in v {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        RecordData::U8(v) => w.write_all(v)?,
    }
    Ok(())
}

/// Reads the next record, or `None` at a clean end of input.
pub fn read_record(r: &mut impl BufRead, what: &str) -> Result<Option<Record>> {
    let corrupt = |detail: String| Error::Corrupt {
        what: what.to_string(),
        detail,
    };
    let mut line = Vec::new();
    let n = r
        .read_until(b'\n', &mut line)
        .map_err(|e| corrupt(e.to_string()))?;
    if n == 0 {
        return Ok(None);
    }
    if line.last() != Some(&b'\n') {
        return Err(corrupt("truncated record header".into()));
    }
    let header: RecordHeader = serde_json::from_slice(&line[..line.len() - 1])
        .map_err(|e| corrupt(format!("bad record header: {e}")))?;
    let count: usize = header.shape.iter().product();
    let width = match header.dtype.as_str() {
        "f32" => 4,
        "f64" => 8,
        "u8" => 1,
        other => {
            return Err(corrupt(format!(
                "unknown dtype `{other}` for `{}`",
                header.name
            )))
        }
    };
    let mut payload = vec![0u8; count * width];
    r.read_exact(&mut payload).map_err(|_| Error::Corrupt {
        what: format!("tensor `{}`", header.name),
        detail: format!("payload truncated (expected {} bytes)", count * width),
    })?;
    let data = match width {
        4 => RecordData::F32(
            payload
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                .collect(),
        ),
        8 => RecordData::F64(
            payload
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                .collect(),
        ),
        _ => RecordData::U8(payload),
    };
    Ok(Some(Record {
        name: header.name,
        shape: header.shape,
        data,
    }))
}

pub fn read_all_records(r: &mut impl BufRead, what: &str) -> Result<Vec<Record>> {
    let mut out = Vec::new();
    while let Some(rec) = read_record(r, what)? {
        out.push(rec);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_is_little_endian_ieee754() {
        let rec = Record::new("p", vec![1], RecordData::F32(vec![1.0])).unwrap();
        let mut buf = Vec::new();
        write_record(&mut buf, &rec).unwrap();
        let nl = buf.iter().position(|&b| b == b'\n').unwrap();
        assert_eq!(&buf[nl + 1..], &[0x00, 0x00, 0x80, 0x3F]);
        let header: serde_json::Value = serde_json::from_slice(&buf[..nl]).unwrap();
        assert_eq!(header["name"], "p");
        assert_eq!(header["dtype"], "f32");
        assert_eq!(header["shape"], serde_json::json!([1]));
    }

    #[test]
    fn truncated_payload_names_the_tensor() {
        let rec = Record::new("graph", vec![4], RecordData::U8(vec![1, 2, 3, 4])).unwrap();
        let mut buf = Vec::new();
        write_record(&mut buf, &rec).unwrap();
        buf.truncate(buf.len() - 1);
        let err = read_record(&mut buf.as_slice(), "split").unwrap_err();
        assert!(err.to_string().contains("`graph`"), "{err}");
    }

    #[test]
    fn mixed_records_round_trip() {
        let recs = vec![
            Record::new("a", vec![2], RecordData::F64(vec![0.1, -3.5])).unwrap(),
            Record::new("b", vec![1, 3], RecordData::U8(vec![0, 7, 255])).unwrap(),
        ];
        let mut buf = Vec::new();
        for r in &recs {
            write_record(&mut buf, r).unwrap();
        }
        assert_eq!(read_all_records(&mut buf.as_slice(), "x").unwrap(), recs);
    }
}
