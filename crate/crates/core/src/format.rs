//! Binary dataset and model files. All integers and reals are little-endian.
//!
//! Dataset (`CALTS1`): magic, `u16` version, `u32` trace length `N`, `u32` record count,
//! `u8` class count and one `u8`-length-prefixed UTF-8 name per class, then per record a
//! `u8` label followed by `N` `f32` samples.
//!
//! Model (`CALMD1`): magic, `u16` version, `u32`-length-prefixed spec text (the config
//! format), `u32` trace length, `f64` normalization mean and std, `u32` tensor count, then
//! each tensor as `u32` rows, `u32` cols and `rows * cols` `f64` values in row-major order.
//! Networks store their parameters in declaration order; a stump ensemble stores one
//! `R x 5` tensor of `(feature, threshold, below, above, alpha)` rows.

use std::fs;
use std::io::{self, BufWriter, Read, Write};
use std::path::Path;

use crate::config::{model_spec_to_string, parse_model_spec};
use crate::error::{Error, Result};
use crate::evaluation::{Stump, StumpEnsemble};
use crate::model::{Learned, TrainedModel};
use crate::sim::{CellType, LabeledTimeseries, Provenance};
use crate::tensor::{Matrix, NormStats};
use crate::training::Example;

pub const DATASET_MAGIC: &[u8; 6] = b"CALTS1";
pub const MODEL_MAGIC: &[u8; 6] = b"CALMD1";
pub const VERSION: u16 = 1;

/// Traces of one common length with cell-type labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub length: usize,
    pub examples: Vec<LabeledTimeseries>,
}

impl Dataset {
    pub fn new(length: usize, examples: Vec<LabeledTimeseries>) -> Result<Self> {
        if let Some(e) = examples.iter().find(|e| e.signal.len() != length) {
            return Err(Error::LengthMismatch {
                model: length,
                data: e.signal.len(),
            });
        }
        Ok(Dataset { length, examples })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn class_counts(&self) -> [usize; 4] {
        let mut c = [0; 4];
        for e in &self.examples {
            c[e.label.code() as usize] += 1;
        }
        c
    }

    pub fn training_view(&self) -> Vec<Example<'_>> {
        self.examples
            .iter()
            .map(|e| Example {
                signal: &e.signal,
                label: e.label.code() as usize,
            })
            .collect()
    }

    /// Keeps the first `n` samples of every trace.
    pub fn truncated(&self, n: usize) -> Result<Dataset> {
        if n == 0 || n > self.length {
            return Err(Error::param(format!("cannot truncate length {} to {n}", self.length)));
        }
        let examples = self
            .examples
            .iter()
            .map(|e| LabeledTimeseries {
                signal: e.signal[..n].to_vec(),
                ..e.clone()
            })
            .collect();
        Ok(Dataset { length: n, examples })
    }

    /// Rounds every sample to `f32`, as storing and reloading would.
    pub fn quantized(mut self) -> Dataset {
        for e in &mut self.examples {
            e.signal.iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
        self
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(DATASET_MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&u32_of(self.length)?.to_le_bytes())?;
        w.write_all(&u32_of(self.len())?.to_le_bytes())?;
        w.write_all(&[CellType::ALL.len() as u8])?;
        for c in CellType::ALL {
            let name = c.name().as_bytes();
            w.write_all(&[name.len() as u8])?;
            w.write_all(name)?;
        }
        let mut buf = Vec::with_capacity(1 + 4 * self.length);
        for e in &self.examples {
            buf.clear();
            buf.push(e.label.code());
            for &v in &e.signal {
                buf.extend_from_slice(&(v as f32).to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R, source: &str) -> Result<Dataset> {
        expect_magic(r, DATASET_MAGIC, "dataset")?;
        let length = read_u32(r)? as usize;
        let count = read_u32(r)? as usize;
        let classes = read_u8(r)? as usize;
        for (i, expected) in CellType::ALL.iter().enumerate() {
            if i >= classes {
                break;
            }
            let len = read_u8(r)? as usize;
            let name = read_bytes(r, len)?;
            if name != expected.name().as_bytes() {
                return Err(Error::Format(format!(
                    "class {i} is named `{}`, expected `{expected}`",
                    String::from_utf8_lossy(&name)
                )));
            }
        }
        if classes != CellType::ALL.len() {
            return Err(Error::Format(format!("expected 4 classes, header lists {classes}")));
        }
        let mut examples = Vec::with_capacity(count);
        let mut raw = vec![0u8; 4 * length];
        for index in 0..count {
            let code = read_u8(r)?;
            let label = CellType::from_code(code)
                .ok_or_else(|| Error::Format(format!("record {index} has label {code}, outside 0..4")))?;
            r.read_exact(&mut raw).map_err(truncated)?;
            let signal = raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
                .collect();
            examples.push(LabeledTimeseries {
                signal,
                label,
                provenance: Provenance::File {
                    path: source.to_string(),
                    index,
                },
            });
        }
        let mut extra = [0u8; 1];
        if r.read(&mut extra)? != 0 {
            return Err(Error::Format("trailing bytes after the last record".into()));
        }
        Ok(Dataset { length, examples })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(fs::File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Dataset> {
        let mut r = io::BufReader::new(fs::File::open(path)?);
        Dataset::read_from(&mut r, &path.display().to_string())
    }
}

impl TrainedModel {
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(MODEL_MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        let spec = model_spec_to_string(&self.spec);
        w.write_all(&u32_of(spec.len())?.to_le_bytes())?;
        w.write_all(spec.as_bytes())?;
        w.write_all(&u32_of(self.input_len)?.to_le_bytes())?;
        w.write_all(&self.norm.mean.to_le_bytes())?;
        w.write_all(&self.norm.std.to_le_bytes())?;
        let tensors: Vec<Matrix> = match &self.learned {
            Learned::Network(n) => n.params().into_iter().cloned().collect(),
            Learned::Stumps(e) => vec![stump_table(e)],
        };
        w.write_all(&u32_of(tensors.len())?.to_le_bytes())?;
        for t in &tensors {
            w.write_all(&u32_of(t.rows())?.to_le_bytes())?;
            w.write_all(&u32_of(t.cols())?.to_le_bytes())?;
            let mut buf = Vec::with_capacity(8 * t.len());
            for v in t.as_slice() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<TrainedModel> {
        expect_magic(r, MODEL_MAGIC, "model")?;
        let spec_len = read_u32(r)? as usize;
        let text = String::from_utf8(read_bytes(r, spec_len)?)
            .map_err(|_| Error::Format("model spec is not UTF-8".into()))?;
        let spec = parse_model_spec(&text)?;
        let input_len = read_u32(r)? as usize;
        let norm = NormStats::new(read_f64(r)?, read_f64(r)?)?;
        let count = read_u32(r)? as usize;
        let mut tensors = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let rows = read_u32(r)? as usize;
            let cols = read_u32(r)? as usize;
            let raw = read_bytes(r, 8 * rows * cols)?;
            let data = raw
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                .collect();
            tensors.push(Matrix::from_vec(rows, cols, data)?);
        }
        let mut extra = [0u8; 1];
        if r.read(&mut extra)? != 0 {
            return Err(Error::Format("trailing bytes after the last tensor".into()));
        }

        let learned = match spec.build(input_len, &mut crate::rng::stream(0, &[]))? {
            Some(mut net) => {
                let mut params = net.params_mut();
                if params.len() != tensors.len() {
                    return Err(Error::Format(format!(
                        "spec declares {} tensors, file holds {}",
                        params.len(),
                        tensors.len()
                    )));
                }
                for (p, t) in params.iter_mut().zip(tensors) {
                    if p.shape() != t.shape() {
                        return Err(Error::Format(format!(
                            "tensor shape {:?} does not match the spec's {:?}",
                            t.shape(),
                            p.shape()
                        )));
                    }
                    **p = t;
                }
                Learned::Network(net)
            }
            None => {
                let [table] = <[Matrix; 1]>::try_from(tensors)
                    .map_err(|_| Error::Format("a stump ensemble is stored as exactly one tensor".into()))?;
                Learned::Stumps(stumps_from_table(&table, spec.classes, input_len)?)
            }
        };
        Ok(TrainedModel {
            spec,
            input_len,
            norm,
            learned,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(fs::File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<TrainedModel> {
        TrainedModel::read_from(&mut io::BufReader::new(fs::File::open(path)?))
    }
}

fn stump_table(e: &StumpEnsemble) -> Matrix {
    let data = e
        .rounds
        .iter()
        .flat_map(|s| [s.feature as f64, s.threshold, s.below as f64, s.above as f64, s.alpha])
        .collect();
    Matrix::from_vec(e.rounds.len(), 5, data).expect("stump table shape")
}

fn stumps_from_table(t: &Matrix, classes: usize, input_len: usize) -> Result<StumpEnsemble> {
    if t.cols() != 5 || t.rows() == 0 {
        return Err(Error::Format(format!("stump table has shape {:?}", t.shape())));
    }
    let index = |v: f64, limit: usize| -> Result<usize> {
        if v >= 0.0 && v.fract() == 0.0 && (v as usize) < limit {
            Ok(v as usize)
        } else {
            Err(Error::Format(format!("stump index {v} outside 0..{limit}")))
        }
    };
    let rounds = (0..t.rows())
        .map(|i| {
            let r = t.row(i);
            Ok(Stump {
                feature: index(r[0], input_len)?,
                threshold: r[1],
                below: index(r[2], classes)?,
                above: index(r[3], classes)?,
                alpha: r[4],
            })
        })
        .collect::<Result<_>>()?;
    Ok(StumpEnsemble {
        classes,
        input_len,
        rounds,
    })
}

fn u32_of(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Format(format!("{n} does not fit the 32-bit field")))
}

fn truncated(e: io::Error) -> Error {
    if e.kind() == io::ErrorKind::UnexpectedEof {
        Error::Format("file ends early".into())
    } else {
        Error::Io(e)
    }
}

fn read_bytes<R: Read>(r: &mut R, n: usize) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    r.take(n as u64).read_to_end(&mut buf)?;
    if buf.len() != n {
        return Err(Error::Format("file ends early".into()));
    }
    Ok(buf)
}

fn read_array<R: Read, const N: usize>(r: &mut R) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(b)
}

fn read_u8<R: Read>(r: &mut R) -> Result<u8> {
    Ok(read_array::<R, 1>(r)?[0])
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    Ok(u32::from_le_bytes(read_array(r)?))
}

fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    Ok(f64::from_le_bytes(read_array(r)?))
}

fn expect_magic<R: Read>(r: &mut R, magic: &[u8; 6], what: &str) -> Result<()> {
    let found: [u8; 6] = read_array(r)?;
    if &found != magic {
        return Err(Error::Format(format!("not a {what} file (bad magic)")));
    }
    let version = u16::from_le_bytes(read_array(r)?);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported {what} file version {version}")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{preset, ModelSpec};
    use crate::sim::{generate_dataset, Profile};
    use crate::training::{train, SplitPlan, TrainConfig};

    fn small() -> Dataset {
        Dataset::new(40, generate_dataset(&Profile::default(), [3, 2, 2, 3], 40, 5).unwrap()).unwrap()
    }

    #[test]
    fn dataset_round_trip_matches_f32_rounding() {
        let d = small();
        let mut bytes = Vec::new();
        d.write_to(&mut bytes).unwrap();
        assert_eq!(&bytes[..6], DATASET_MAGIC);
        assert_eq!(bytes.len(), 6 + 2 + 4 + 4 + 1 + (3 + 3 + 4 + 4) + 10 * (1 + 4 * 40));
        let back = Dataset::read_from(&mut bytes.as_slice(), "mem").unwrap();
        let q = d.quantized();
        assert_eq!(back.length, 40);
        for (a, b) in back.examples.iter().zip(&q.examples) {
            assert_eq!((a.label, &a.signal), (b.label, &b.signal));
        }
    }

    #[test]
    fn empty_dataset_is_valid() {
        let d = Dataset::new(10, Vec::new()).unwrap();
        let mut bytes = Vec::new();
        d.write_to(&mut bytes).unwrap();
        assert_eq!(Dataset::read_from(&mut bytes.as_slice(), "mem").unwrap().len(), 0);
    }

    #[test]
    fn corrupt_datasets_are_rejected() {
        let mut bytes = Vec::new();
        small().write_to(&mut bytes).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Dataset::read_from(&mut bad.as_slice(), ""), Err(Error::Format(_))));
        let cut = &bytes[..bytes.len() - 3];
        assert!(matches!(Dataset::read_from(&mut &cut[..], ""), Err(Error::Format(_))));
        let mut long = bytes.clone();
        long.push(0);
        assert!(Dataset::read_from(&mut long.as_slice(), "").is_err());
        let header = 6 + 2 + 4 + 4 + 1 + 14;
        let mut label = bytes;
        label[header] = 9;
        assert!(Dataset::read_from(&mut label.as_slice(), "").is_err());
    }

    fn round_trip(spec: &ModelSpec) {
        let d = small();
        let data = d.training_view();
        let split = SplitPlan {
            seed: 0,
            n_train: 8,
            n_test: 2,
            train_indices: (0..8).collect(),
            test_indices: vec![8, 9],
        };
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 4,
            ..TrainConfig::default()
        };
        let (model, _) = train(spec, &data, &split, &cfg).unwrap();
        let mut bytes = Vec::new();
        model.write_to(&mut bytes).unwrap();
        let back = TrainedModel::read_from(&mut bytes.as_slice()).unwrap();
        assert_eq!(back, model);
        for e in &d.examples {
            let a = model.scores(&e.signal).unwrap();
            let b = back.scores(&e.signal).unwrap();
            assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        }
        let mut again = Vec::new();
        back.write_to(&mut again).unwrap();
        assert_eq!(bytes, again);
    }

    #[test]
    fn models_round_trip_bit_exactly() {
        let mut cnn = ModelSpec::cnn("c", "cpdc");
        if let crate::model::LayerSpec::Conv { filters, kernel, .. } = &mut cnn.layers[0] {
            (*filters, *kernel) = (3, 4);
        }
        if let crate::model::LayerSpec::Conv { filters, kernel, .. } = &mut cnn.layers[3] {
            (*filters, *kernel) = (2, 3);
        }
        round_trip(&cnn);
        let mut rnn = preset("lstm2-dropout-lstm-t5").unwrap();
        for l in &mut rnn.layers {
            if let crate::model::LayerSpec::Lstm { hidden } = l {
                *hidden = 3;
            }
        }
        round_trip(&rnn);
        round_trip(&ModelSpec::adaboost("ab", 5));
    }
}
