//! Embedding tables: per-sample metadata plus a feature matrix.

use std::collections::BTreeSet;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ssl::StudentTeacher;
use crate::synth::{Sample, SampleMeta};
use crate::tensor::Tensor;
use crate::views::full_view;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RowMeta {
    pub sample_id: u64,
    pub batch_id: u32,
    pub treatment_id: u32,
    pub is_control: bool,
    pub moa_id: u32,
}

impl From<&SampleMeta> for RowMeta {
    fn from(m: &SampleMeta) -> Self {
        Self {
            sample_id: m.sample_id,
            batch_id: m.batch_id,
            treatment_id: m.treatment_id,
            is_control: m.is_control,
            moa_id: m.moa_id,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Provenance {
    pub checkpoint_hash: String,
    pub dataset_hash: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    rows: Vec<RowMeta>,
    features: Tensor,
    pub provenance: Provenance,
}

impl EmbeddingTable {
    /// Validates uniqueness of sample ids and the feature shape. `Tensor`
    /// already guarantees finite values.
    pub fn new(rows: Vec<RowMeta>, features: Tensor) -> Result<Self> {
        if features.shape().len() != 2 || features.rows() != rows.len() {
            return Err(Error::Shape(format!(
                "{} rows with features {:?}",
                rows.len(),
                features.shape()
            )));
        }
        let mut seen = BTreeSet::new();
        if let Some(dup) = rows.iter().find(|r| !seen.insert(r.sample_id)) {
            return Err(Error::usage(format!("duplicate sample id {}", dup.sample_id)));
        }
        Ok(Self {
            rows,
            features,
            provenance: Provenance::default(),
        })
    }

    pub fn rows(&self) -> &[RowMeta] {
        &self.rows
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn feature(&self, i: usize) -> &[f64] {
        self.features.row(i)
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    /// Same rows with new features of the same shape.
    pub fn with_features(&self, features: Tensor) -> Result<Self> {
        if features.shape() != self.features.shape() {
            return Err(Error::Shape(format!(
                "replacement features {:?} for table {:?}",
                features.shape(),
                self.features.shape()
            )));
        }
        Ok(Self {
            rows: self.rows.clone(),
            features,
            provenance: self.provenance.clone(),
        })
    }

    pub fn select(&self, idx: &[usize]) -> Self {
        Self {
            rows: idx.iter().map(|&i| self.rows[i]).collect(),
            features: self.features.select_rows(idx),
            provenance: self.provenance.clone(),
        }
    }

    pub fn filter(&self, keep: impl Fn(&RowMeta) -> bool) -> Self {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| keep(&self.rows[i])).collect();
        self.select(&idx)
    }

    pub fn batches(&self) -> Vec<u32> {
        let set: BTreeSet<u32> = self.rows.iter().map(|r| r.batch_id).collect();
        set.into_iter().collect()
    }

    pub fn write_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header: Vec<String> = ["sample_id", "batch_id", "treatment_id", "is_control", "moa_id"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        header.extend((0..self.dim()).map(|j| format!("f{j}")));
        w.write_record(&header)?;
        for (i, r) in self.rows.iter().enumerate() {
            let mut rec = vec![
                r.sample_id.to_string(),
                r.batch_id.to_string(),
                r.treatment_id.to_string(),
                u8::from(r.is_control).to_string(),
                r.moa_id.to_string(),
            ];
            rec.extend(self.feature(i).iter().map(|v| format!("{v:?}")));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(input: impl Read) -> Result<Self> {
        let mut r = csv::Reader::from_reader(input);
        let header = r.headers()?.clone();
        let fixed = ["sample_id", "batch_id", "treatment_id", "is_control", "moa_id"];
        if header.len() < fixed.len() || header.iter().zip(fixed).any(|(h, f)| h != f) {
            return Err(Error::Format(format!("unexpected embedding header {header:?}")));
        }
        let dim = header.len() - fixed.len();
        for (j, h) in header.iter().skip(fixed.len()).enumerate() {
            if h != format!("f{j}") {
                return Err(Error::Format(format!("feature column {j} is named `{h}`")));
            }
        }
        let bad = |line: usize, what: &str| Error::Format(format!("embedding row {line}: bad {what}"));
        let mut rows = Vec::new();
        let mut data = Vec::new();
        for (line, rec) in r.records().enumerate() {
            let rec = rec?;
            let int = |k: usize| rec[k].parse::<u64>().map_err(|_| bad(line, fixed[k]));
            rows.push(RowMeta {
                sample_id: int(0)?,
                batch_id: int(1)? as u32,
                treatment_id: int(2)? as u32,
                is_control: match &rec[3] {
                    "0" => false,
                    "1" => true,
                    _ => return Err(bad(line, "is_control")),
                },
                moa_id: int(4)? as u32,
            });
            for j in 0..dim {
                data.push(rec[fixed.len() + j].parse::<f64>().map_err(|_| bad(line, "feature"))?);
            }
        }
        let n = rows.len();
        Self::new(rows, Tensor::from_vec(&[n, dim], data)?)
    }
}

/// Rows processed per forward pass during extraction.
const EXTRACT_CHUNK: usize = 256;

/// Teacher-extractor features of the deterministic full-image view of
/// each sample.
pub fn extract_embeddings(
    model: &StudentTeacher,
    samples: &[&Sample],
    view_size: (usize, usize),
) -> Result<EmbeddingTable> {
    let mut rows = Vec::with_capacity(samples.len());
    let mut data = Vec::new();
    for chunk in samples.chunks(EXTRACT_CHUNK) {
        let mut x = Vec::new();
        for s in chunk {
            let v = full_view(&s.image, view_size)?;
            if v.len() != model.arch.input_dim {
                return Err(Error::usage(format!(
                    "model expects {} inputs, sample {} gives {}",
                    model.arch.input_dim,
                    s.meta.sample_id,
                    v.len()
                )));
            }
            x.extend_from_slice(v.data());
            rows.push(RowMeta::from(&s.meta));
        }
        let x = Tensor::from_raw(&[chunk.len(), model.arch.input_dim], x);
        data.extend(model.embed(&x)?.into_data());
    }
    let n = rows.len();
    EmbeddingTable::new(rows, Tensor::from_vec(&[n, model.arch.embed_dim], data)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip_is_exact() {
        let rows = vec![
            RowMeta {
                sample_id: 3,
                batch_id: 1,
                treatment_id: 7,
                is_control: true,
                moa_id: 16,
            },
            RowMeta {
                sample_id: 9,
                batch_id: 0,
                treatment_id: 2,
                is_control: false,
                moa_id: 4,
            },
        ];
        let f = Tensor::matrix(2, 3, vec![0.1, -1.0 / 3.0, 1e-300, 5.0, 0.0, -2.5e17]).unwrap();
        let t = EmbeddingTable::new(rows, f).unwrap();
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("sample_id,batch_id,treatment_id,is_control,moa_id,f0,f1,f2\n"));
        let back = EmbeddingTable::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn duplicate_ids_rejected() {
        let r = RowMeta {
            sample_id: 1,
            batch_id: 0,
            treatment_id: 0,
            is_control: false,
            moa_id: 0,
        };
        assert!(EmbeddingTable::new(vec![r, r], Tensor::zeros(&[2, 1])).is_err());
    }
}
