//! Labeled feature datasets and their on-disk format.
//!
//! ```text
//! "PRIMEDS\0"                      8 bytes
//! version                          u32
//! n_b, n_p                         u32, u32
//! payload_len, tcp_window, cap     f64 x 3   (normalizers)
//! class count                      u32
//!   per class: byte length u32, UTF-8 name
//! record count                     u64
//!   per record: label i32 (-1 = unlabeled), n_b + 4 n_p f64 values
//! ```
//!
//! All integers and floats are little-endian.

use std::fs;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::features::{FeatureVector, Normalizers};
use super::IngestError;
use crate::nn::model::HEADER_FIELDS;
use crate::nn::Tensor;

const MAGIC: &[u8; 8] = b"PRIMEDS\0";
pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub n_b: usize,
    pub n_p: usize,
    pub normalizers: Normalizers,
    pub class_names: Vec<String>,
    labels: Vec<Option<usize>>,
    values: Vec<f64>,
}

impl Dataset {
    pub fn new(n_b: usize, n_p: usize, normalizers: Normalizers, class_names: Vec<String>) -> Self {
        Self {
            n_b,
            n_p,
            normalizers,
            class_names,
            labels: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn width(&self) -> usize {
        self.n_b + HEADER_FIELDS * self.n_p
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn push_row(&mut self, label: Option<usize>, row: &[f64]) -> Result<(), IngestError> {
        if row.len() != self.width() {
            return Err(IngestError::Dataset(format!("row of width {} in a dataset of width {}", row.len(), self.width())));
        }
        if let Some(l) = label {
            if l >= self.class_names.len() {
                return Err(IngestError::Dataset(format!("label {l} but only {} classes", self.class_names.len())));
            }
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(IngestError::Dataset("non-finite feature value".into()));
        }
        self.labels.push(label);
        self.values.extend_from_slice(row);
        Ok(())
    }

    pub fn push(&mut self, fv: &FeatureVector) -> Result<(), IngestError> {
        if fv.x_pay.len() != self.n_b || fv.x_hdr.len() != self.n_p {
            return Err(IngestError::Dataset("feature vector shape does not match dataset".into()));
        }
        self.push_row(fv.label, &fv.to_row())
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let w = self.width();
        &self.values[i * w..(i + 1) * w]
    }

    pub fn label(&self, i: usize) -> Option<usize> {
        self.labels[i]
    }

    pub fn labels(&self) -> &[Option<usize>] {
        &self.labels
    }

    pub fn feature_vector(&self, i: usize) -> FeatureVector {
        FeatureVector::from_row(self.row(i), self.n_b, self.n_p, self.labels[i])
    }

    /// Rows `indices` stacked into a `len x width` tensor.
    pub fn tensor(&self, indices: &[usize]) -> Tensor {
        let w = self.width();
        let mut data = Vec::with_capacity(indices.len() * w);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Tensor::from_vec(&[indices.len(), w], data).expect("rows have dataset width")
    }

    /// Indices of records carrying each label, in record order.
    pub fn indices_by_class(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.class_names.len()];
        for (i, l) in self.labels.iter().enumerate() {
            if let Some(l) = l {
                out[*l].push(i);
            }
        }
        out
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&DATASET_VERSION.to_le_bytes())?;
        w.write_all(&(self.n_b as u32).to_le_bytes())?;
        w.write_all(&(self.n_p as u32).to_le_bytes())?;
        for v in [self.normalizers.payload_len, self.normalizers.tcp_window, self.normalizers.inter_arrival_cap] {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&(self.class_names.len() as u32).to_le_bytes())?;
        for name in &self.class_names {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
        }
        w.write_all(&(self.len() as u64).to_le_bytes())?;
        for i in 0..self.len() {
            let l = self.labels[i].map_or(-1, |l| l as i32);
            w.write_all(&l.to_le_bytes())?;
            for v in self.row(i) {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self, IngestError> {
        let mut cursor = Cursor { inner: r, offset: 0 };
        let magic: [u8; 8] = cursor.array("magic")?;
        if &magic != MAGIC {
            return Err(IngestError::UnsupportedFormat("not a dataset file (bad magic)".into()));
        }
        let version = cursor.u32("version")?;
        if version != DATASET_VERSION {
            return Err(IngestError::UnsupportedFormat(format!("dataset version {version}")));
        }
        let n_b = cursor.u32("n_b")? as usize;
        let n_p = cursor.u32("n_p")? as usize;
        let normalizers = Normalizers {
            payload_len: cursor.f64("normalizer")?,
            tcp_window: cursor.f64("normalizer")?,
            inter_arrival_cap: cursor.f64("normalizer")?,
        };
        let classes = cursor.u32("class count")? as usize;
        let mut class_names = Vec::with_capacity(classes.min(1 << 16));
        for _ in 0..classes {
            let len = cursor.u32("class name length")? as usize;
            let bytes = cursor.bytes(len, "class name")?;
            class_names.push(
                String::from_utf8(bytes).map_err(|_| IngestError::Dataset("class name is not UTF-8".into()))?,
            );
        }
        let mut ds = Dataset::new(n_b, n_p, normalizers, class_names);
        let count = cursor.u64("record count")?;
        let width = ds.width();
        let mut row = vec![0.0; width];
        for _ in 0..count {
            let label = cursor.i32("label")?;
            for v in row.iter_mut() {
                *v = cursor.f64("feature value")?;
            }
            let label = match label {
                -1 => None,
                l if l >= 0 => Some(l as usize),
                l => return Err(IngestError::Dataset(format!("invalid label {l}"))),
            };
            ds.push_row(label, &row)?;
        }
        let mut probe = [0u8; 1];
        if cursor.inner.read(&mut probe)? != 0 {
            return Err(IngestError::Dataset(format!("trailing bytes after {count} records")));
        }
        Ok(ds)
    }

    pub fn save(&self, path: &Path) -> Result<(), IngestError> {
        let mut w = BufWriter::new(fs::File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, IngestError> {
        let mut r = BufReader::new(fs::File::open(path)?);
        Self::read_from(&mut r)
    }

    /// One row per record: `label, class, pay_0.., hdr_<packet>_<field>..`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), IngestError> {
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec!["label".to_string(), "class".to_string()];
        header.extend((0..self.n_b).map(|i| format!("pay_{i}")));
        for p in 0..self.n_p {
            for f in ["len", "win", "iat", "dir"] {
                header.push(format!("hdr_{p}_{f}"));
            }
        }
        out.write_record(&header)?;
        for i in 0..self.len() {
            let (label, class) = match self.labels[i] {
                Some(l) => (l.to_string(), self.class_names[l].clone()),
                None => (String::new(), String::new()),
            };
            let mut rec = vec![label, class];
            rec.extend(self.row(i).iter().map(|v| v.to_string()));
            out.write_record(&rec)?;
        }
        out.flush()?;
        Ok(())
    }
}

struct Cursor<'a, R> {
    inner: &'a mut R,
    offset: u64,
}

impl<R: Read> Cursor<'_, R> {
    fn bytes(&mut self, n: usize, what: &str) -> Result<Vec<u8>, IngestError> {
        let mut buf = vec![0u8; n];
        self.fill(&mut buf, what)?;
        Ok(buf)
    }

    fn fill(&mut self, buf: &mut [u8], what: &str) -> Result<(), IngestError> {
        match self.inner.read_exact(buf) {
            Ok(()) => {
                self.offset += buf.len() as u64;
                Ok(())
            }
            Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => Err(IngestError::Truncated {
                offset: self.offset,
                what: what.to_string(),
            }),
            Err(e) => Err(e.into()),
        }
    }

    fn array<const N: usize>(&mut self, what: &str) -> Result<[u8; N], IngestError> {
        let mut buf = [0u8; N];
        self.fill(&mut buf, what)?;
        Ok(buf)
    }

    fn u32(&mut self, what: &str) -> Result<u32, IngestError> {
        Ok(u32::from_le_bytes(self.array(what)?))
    }

    fn i32(&mut self, what: &str) -> Result<i32, IngestError> {
        Ok(i32::from_le_bytes(self.array(what)?))
    }

    fn u64(&mut self, what: &str) -> Result<u64, IngestError> {
        Ok(u64::from_le_bytes(self.array(what)?))
    }

    fn f64(&mut self, what: &str) -> Result<f64, IngestError> {
        Ok(f64::from_le_bytes(self.array(what)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Dataset {
        let mut ds = Dataset::new(2, 1, Normalizers::default(), vec!["a".into(), "b, c".into()]);
        ds.push_row(Some(1), &[0.5, 1.0, 0.1, 0.2, 0.3, 1.0]).unwrap();
        ds.push_row(None, &[0.0; 6]).unwrap();
        ds
    }

    #[test]
    fn binary_round_trip() {
        let ds = sample();
        let mut buf = Vec::new();
        ds.write_to(&mut buf).unwrap();
        assert_eq!(Dataset::read_from(&mut &buf[..]).unwrap(), ds);
    }

    #[test]
    fn truncation_reports_offset() {
        let mut buf = Vec::new();
        sample().write_to(&mut buf).unwrap();
        let cut = buf.len() - 4;
        match Dataset::read_from(&mut &buf[..cut]) {
            Err(IngestError::Truncated { what, .. }) => assert_eq!(what, "feature value"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn bad_rows_are_rejected() {
        let mut ds = sample();
        assert!(ds.push_row(Some(2), &[0.0; 6]).is_err());
        assert!(ds.push_row(Some(0), &[0.0; 5]).is_err());
    }

    #[test]
    fn csv_quotes_class_names() {
        let mut buf = Vec::new();
        sample().write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "label,class,pay_0,pay_1,hdr_0_len,hdr_0_win,hdr_0_iat,hdr_0_dir");
        assert!(lines[1].starts_with("1,\"b, c\",0.5,1,"));
        assert!(lines[2].starts_with(",,0,"));
    }
}
