//! Versioned little-endian binary containers for learned artifacts.
//!
//! Every container starts with an 8-byte magic (`FLIMFB1`, `FLIMNET1`, ...,
//! NUL-padded to 8 bytes) followed by `u32` dimensions and `f32`/`f64` payloads.
//!
//! Filter bank (`FLIMFB1`): `K, k, k, m` as `u32`, then the stats mean and std
//! (`k*k*m` `f64` each), the filters (`K*k*k*m` `f32`) and one `u32` class per filter.

use std::fs;
use std::path::Path;

use crate::classifier::{Classifier, LinearSvmModel, MlpModel, SvmClassifier};
use crate::error::{FlimError, Result};
use crate::filters::{FilterBank, MarkerStats};
use crate::network::{LayerModel, LayerSpec, NetworkModel, OutputNorm};

pub const FILTER_BANK_MAGIC: &[u8; 8] = b"FLIMFB1\0";
pub const NETWORK_MAGIC: &[u8; 8] = b"FLIMNET1";
pub const SVM_MAGIC: &[u8; 8] = b"FLIMSVM1";
pub const MLP_MAGIC: &[u8; 8] = b"FLIMMLP1";
pub const FEATURES_MAGIC: &[u8; 8] = b"FLIMFEA1";

#[derive(Default)]
struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn magic(&mut self, m: &[u8; 8]) {
        self.buf.extend_from_slice(m);
    }
    fn u32(&mut self, v: usize) {
        self.buf.extend_from_slice(&(v as u32).to_le_bytes());
    }
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn f32s(&mut self, vs: &[f32]) {
        for v in vs {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f64s(&mut self, vs: &[f64]) {
        for &v in vs {
            self.f64(v);
        }
    }
    fn blob(&mut self, bytes: &[u8]) {
        self.u32(bytes.len());
        self.buf.extend_from_slice(bytes);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8], magic: &[u8; 8]) -> Result<Self> {
        if buf.len() < 8 || &buf[..8] != magic {
            return Err(FlimError::Decode(format!(
                "expected magic {:?}",
                String::from_utf8_lossy(magic).trim_end_matches('\0')
            )));
        }
        Ok(Reader { buf, pos: 8 })
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| FlimError::Decode(format!("truncated at byte {}", self.pos)))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| FlimError::Decode("size overflow".into()))?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        (0..n).map(|_| self.f64()).collect()
    }

    fn blob(&mut self) -> Result<&'a [u8]> {
        let n = self.u32()?;
        self.take(n)
    }

    fn finish(self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(FlimError::Decode(format!(
                "{} trailing bytes",
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

pub fn encode_filter_bank(bank: &FilterBank) -> Vec<u8> {
    let mut w = Writer::default();
    w.magic(FILTER_BANK_MAGIC);
    w.u32(bank.num_filters());
    w.u32(bank.k);
    w.u32(bank.k);
    w.u32(bank.bands);
    w.f64s(&bank.stats.mean);
    w.f64s(&bank.stats.std);
    w.f32s(&bank.filters);
    for &c in &bank.classes {
        w.u32(usize::from(c));
    }
    w.buf
}

fn read_filter_bank(r: &mut Reader<'_>) -> Result<FilterBank> {
    let n = r.u32()?;
    let k = r.u32()?;
    let k2 = r.u32()?;
    let bands = r.u32()?;
    if k != k2 {
        return Err(FlimError::Decode(format!("non-square filters {k}x{k2}")));
    }
    let dim = k * k * bands;
    let mean = r.f64s(dim)?;
    let std = r.f64s(dim)?;
    let filters = r.f32s(n * dim)?;
    let classes = (0..n)
        .map(|_| r.u32().map(|c| c as u16))
        .collect::<Result<Vec<_>>>()?;
    let bank = FilterBank {
        k,
        bands,
        filters,
        classes,
        stats: MarkerStats {
            k,
            bands,
            mean,
            std,
        },
    };
    bank.validate()?;
    Ok(bank)
}

pub fn decode_filter_bank(bytes: &[u8]) -> Result<FilterBank> {
    let mut r = Reader::new(bytes, FILTER_BANK_MAGIC)?;
    let bank = read_filter_bank(&mut r)?;
    r.finish()?;
    Ok(bank)
}

/// Human-readable twin of the filter bank container.
pub fn filter_bank_json(bank: &FilterBank) -> String {
    serde_json::to_string_pretty(&serde_json::json!({
        "v": 1,
        "num_filters": bank.num_filters(),
        "k": bank.k,
        "bands": bank.bands,
        "stats": { "mean": bank.stats.mean, "std": bank.stats.std },
        "filters": (0..bank.num_filters())
            .map(|j| serde_json::json!({ "class": bank.classes[j], "weights": bank.filter(j) }))
            .collect::<Vec<_>>(),
    }))
    .expect("json")
}

pub fn encode_network(model: &NetworkModel) -> Vec<u8> {
    let mut w = Writer::default();
    w.magic(NETWORK_MAGIC);
    w.u32(model.input_bands);
    w.u32(model.layers.len());
    for layer in &model.layers {
        w.blob(serde_json::to_string(&layer.spec).expect("json").as_bytes());
        w.blob(&encode_filter_bank(&layer.bank));
        match &layer.output_norm {
            Some(norm) => {
                w.u8(1);
                w.u32(norm.mean.len());
                w.f32s(&norm.mean);
                w.f32s(&norm.std);
            }
            None => w.u8(0),
        }
    }
    w.buf
}

pub fn decode_network(bytes: &[u8]) -> Result<NetworkModel> {
    let mut r = Reader::new(bytes, NETWORK_MAGIC)?;
    let input_bands = r.u32()?;
    let n = r.u32()?;
    let mut layers = Vec::with_capacity(n);
    for _ in 0..n {
        let spec: LayerSpec = serde_json::from_slice(r.blob()?)
            .map_err(|e| FlimError::Decode(format!("layer spec: {e}")))?;
        let bank = decode_filter_bank(r.blob()?)?;
        let output_norm = match r.u8()? {
            0 => None,
            1 => {
                let c = r.u32()?;
                if c != bank.num_filters() {
                    return Err(FlimError::Decode(format!(
                        "output norm of {c} channels for {} filters",
                        bank.num_filters()
                    )));
                }
                Some(OutputNorm {
                    mean: r.f32s(c)?,
                    std: r.f32s(c)?,
                })
            }
            other => return Err(FlimError::Decode(format!("bad norm flag {other}"))),
        };
        layers.push(LayerModel {
            spec,
            bank,
            output_norm,
        });
    }
    r.finish()?;
    Ok(NetworkModel {
        input_bands,
        layers,
    })
}

pub fn encode_svm(clf: &SvmClassifier) -> Vec<u8> {
    let mut w = Writer::default();
    w.magic(SVM_MAGIC);
    w.u32(clf.classes.len());
    for &c in &clf.classes {
        w.u32(usize::from(c));
    }
    w.u32(clf.models.len());
    w.u32(clf.dim());
    for m in &clf.models {
        w.f64(m.c);
        w.f64(m.b);
        w.f64s(&m.w);
    }
    w.buf
}

pub fn decode_svm(bytes: &[u8]) -> Result<SvmClassifier> {
    let mut r = Reader::new(bytes, SVM_MAGIC)?;
    let nc = r.u32()?;
    let classes = (0..nc)
        .map(|_| r.u32().map(|c| c as u16))
        .collect::<Result<Vec<_>>>()?;
    let nm = r.u32()?;
    let dim = r.u32()?;
    let mut models = Vec::with_capacity(nm);
    for _ in 0..nm {
        let c = r.f64()?;
        let b = r.f64()?;
        models.push(LinearSvmModel {
            w: r.f64s(dim)?,
            b,
            c,
        });
    }
    r.finish()?;
    Ok(SvmClassifier { classes, models })
}

pub fn encode_mlp(m: &MlpModel) -> Vec<u8> {
    let mut w = Writer::default();
    w.magic(MLP_MAGIC);
    w.u32(m.sizes.len());
    for &s in &m.sizes {
        w.u32(s);
    }
    for &c in &m.classes {
        w.u32(usize::from(c));
    }
    for (wt, b) in m.weights.iter().zip(&m.biases) {
        w.f64s(wt);
        w.f64s(b);
    }
    w.buf
}

pub fn decode_mlp(bytes: &[u8]) -> Result<MlpModel> {
    let mut r = Reader::new(bytes, MLP_MAGIC)?;
    let n = r.u32()?;
    if n < 2 {
        return Err(FlimError::Decode("MLP needs at least two layer sizes".into()));
    }
    let sizes = (0..n).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
    let classes = (0..sizes[n - 1])
        .map(|_| r.u32().map(|c| c as u16))
        .collect::<Result<Vec<_>>>()?;
    let mut weights = Vec::new();
    let mut biases = Vec::new();
    for win in sizes.windows(2) {
        weights.push(r.f64s(win[0] * win[1])?);
        biases.push(r.f64s(win[1])?);
    }
    r.finish()?;
    Ok(MlpModel {
        sizes,
        weights,
        biases,
        classes,
    })
}

pub fn encode_classifier(clf: &Classifier) -> Vec<u8> {
    match clf {
        Classifier::Svm(m) => encode_svm(m),
        Classifier::Mlp(m) => encode_mlp(m),
    }
}

pub fn decode_classifier(bytes: &[u8]) -> Result<Classifier> {
    match bytes.get(..8) {
        Some(m) if m == SVM_MAGIC => decode_svm(bytes).map(Classifier::Svm),
        Some(m) if m == MLP_MAGIC => decode_mlp(bytes).map(Classifier::Mlp),
        _ => Err(FlimError::Decode("not a classifier container".into())),
    }
}

/// Row-major feature matrix: `n, dim` then `n * dim` `f32`.
pub fn encode_features(rows: &[Vec<f32>]) -> Vec<u8> {
    let dim = rows.first().map(Vec::len).unwrap_or(0);
    let mut w = Writer::default();
    w.magic(FEATURES_MAGIC);
    w.u32(rows.len());
    w.u32(dim);
    for r in rows {
        w.f32s(r);
    }
    w.buf
}

pub fn decode_features(bytes: &[u8]) -> Result<Vec<Vec<f32>>> {
    let mut r = Reader::new(bytes, FEATURES_MAGIC)?;
    let n = r.u32()?;
    let dim = r.u32()?;
    let rows = (0..n).map(|_| r.f32s(dim)).collect::<Result<Vec<_>>>()?;
    r.finish()?;
    Ok(rows)
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| FlimError::io(path, e))
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| FlimError::io(path, e))
}
