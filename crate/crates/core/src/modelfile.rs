//! Binary model files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "PSRN" | version u32 | array count u32
//! per array: name length u16 | UTF-8 name | rank u8 | dims u64 × rank | f64 × Π dims (row-major)
//! header length u64 | JSON header
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{PsrnnError, Result};
use crate::features::RffMap;
use crate::model::{Cell, Decoder, Encoder, FactorizedCell, InputKind, Layer, ModelMeta, PsrnnCell, PsrnnModel};
use crate::tensor::{CpFactors, Tensor3};

pub const MAGIC: &[u8; 4] = b"PSRN";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellKind {
    Full,
    Factorized,
}

/// Trailing JSON block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub kind: String,
    pub input: InputKind,
    pub cells: Vec<CellKind>,
    pub state_dims: Vec<usize>,
    pub obs_dim: usize,
    pub output_dim: usize,
    pub rff: bool,
    pub meta: ModelMeta,
}

#[derive(Debug, Clone, PartialEq)]
struct Array {
    dims: Vec<usize>,
    data: Vec<f64>,
}

fn matrix(m: &DMatrix<f64>) -> Array {
    let data = (0..m.nrows())
        .flat_map(|i| m.row(i).iter().copied().collect::<Vec<_>>())
        .collect();
    Array {
        dims: vec![m.nrows(), m.ncols()],
        data,
    }
}

fn vector(v: &DVector<f64>) -> Array {
    Array {
        dims: vec![v.len()],
        data: v.iter().copied().collect(),
    }
}

fn arrays_of(model: &PsrnnModel) -> Vec<(String, Array)> {
    let mut out = Vec::new();
    let e = &model.encoder;
    if let Some(r) = &e.rff {
        out.push(("encoder.rff.frequencies".into(), matrix(&r.frequencies)));
        out.push(("encoder.rff.phases".into(), vector(&r.phases)));
        out.push((
            "encoder.rff.bandwidth".into(),
            Array {
                dims: Vec::new(),
                data: vec![r.bandwidth],
            },
        ));
    }
    out.push(("encoder.offset".into(), vector(&e.offset)));
    out.push(("encoder.projection".into(), matrix(&e.projection)));
    for (l, layer) in model.layers.iter().enumerate() {
        match &layer.cell {
            Cell::Full(c) => out.push((
                format!("layer{l}.W"),
                Array {
                    dims: c.w.dims().to_vec(),
                    data: c.w.data().to_vec(),
                },
            )),
            Cell::Factorized(c) => {
                out.push((format!("layer{l}.A"), matrix(&c.factors.a)));
                out.push((format!("layer{l}.B"), matrix(&c.factors.b)));
                out.push((format!("layer{l}.C"), matrix(&c.factors.c)));
            }
        }
        out.push((format!("layer{l}.b"), vector(layer.cell.bias())));
        out.push((format!("layer{l}.q1"), vector(&layer.q1)));
    }
    out.push(("decoder.weight".into(), matrix(&model.decoder.weight)));
    out.push(("decoder.bias".into(), vector(&model.decoder.bias)));
    out
}

pub fn header_of(model: &PsrnnModel) -> Header {
    Header {
        kind: "psrnn".into(),
        input: model.encoder.input,
        cells: model
            .layers
            .iter()
            .map(|l| match l.cell {
                Cell::Full(_) => CellKind::Full,
                Cell::Factorized(_) => CellKind::Factorized,
            })
            .collect(),
        state_dims: model.layers.iter().map(|l| l.cell.state_dim()).collect(),
        obs_dim: model.encoder.output_dim(),
        output_dim: model.decoder.weight.nrows(),
        rff: model.encoder.rff.is_some(),
        meta: model.meta.clone(),
    }
}

pub fn to_bytes(model: &PsrnnModel) -> Result<Vec<u8>> {
    model.validate()?;
    let arrays = arrays_of(model);
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(arrays.len() as u32).to_le_bytes());
    for (name, a) in &arrays {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(a.dims.len() as u8);
        for &d in &a.dims {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in &a.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let header = serde_json::to_vec(&header_of(model))?;
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| {
                PsrnnError::ModelFormat(format!("truncated file while reading {what} at byte {}", self.pos))
            })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

pub fn from_bytes(buf: &[u8]) -> Result<PsrnnModel> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(PsrnnError::ModelFormat("not a model file (bad magic)".into()));
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(PsrnnError::ModelFormat(format!(
            "unsupported format version {version} (expected {FORMAT_VERSION})"
        )));
    }
    let count = r.u32("array count")?;
    let mut arrays = BTreeMap::new();
    for _ in 0..count {
        let len = r.u16("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "array name")?)
            .map_err(|_| PsrnnError::ModelFormat("array name is not UTF-8".into()))?
            .to_string();
        let rank = r.u8("rank")? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(
                usize::try_from(r.u64("dims")?).map_err(|_| PsrnnError::ModelFormat("dimension overflow".into()))?,
            );
        }
        let n = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| PsrnnError::ModelFormat(format!("array {name} is too large")))?;
        let data = r
            .take(n, &format!("payload of {name}"))?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        if arrays.insert(name.clone(), Array { dims, data }).is_some() {
            return Err(PsrnnError::ModelFormat(format!("duplicate array {name}")));
        }
    }
    let hlen =
        usize::try_from(r.u64("header length")?).map_err(|_| PsrnnError::ModelFormat("header too large".into()))?;
    let header: Header = serde_json::from_slice(r.take(hlen, "header")?)
        .map_err(|e| PsrnnError::ModelFormat(format!("bad header: {e}")))?;
    if r.pos != buf.len() {
        return Err(PsrnnError::ModelFormat(format!(
            "{} trailing bytes after the header",
            buf.len() - r.pos
        )));
    }
    if header.kind != "psrnn" {
        return Err(PsrnnError::ModelFormat(format!("unknown model kind {:?}", header.kind)));
    }
    let model = build(header, arrays)?;
    model
        .validate()
        .map_err(|e| PsrnnError::ModelFormat(format!("inconsistent model: {e}")))?;
    Ok(model)
}

fn build(header: Header, mut arrays: BTreeMap<String, Array>) -> Result<PsrnnModel> {
    let mut take = |name: &str, rank: usize| -> Result<Array> {
        let a = arrays
            .remove(name)
            .ok_or_else(|| PsrnnError::ModelFormat(format!("missing array {name}")))?;
        if a.dims.len() != rank {
            return Err(PsrnnError::ModelFormat(format!(
                "array {name} has rank {}, expected {rank}",
                a.dims.len()
            )));
        }
        Ok(a)
    };
    let mat = |a: Array| DMatrix::from_row_slice(a.dims[0], a.dims[1], &a.data);
    let vecf = |a: Array| DVector::from_vec(a.data);
    let rff = if header.rff {
        Some(RffMap {
            frequencies: mat(take("encoder.rff.frequencies", 2)?),
            phases: vecf(take("encoder.rff.phases", 1)?),
            bandwidth: take("encoder.rff.bandwidth", 0)?.data[0],
        })
    } else {
        None
    };
    let encoder = Encoder {
        input: header.input,
        rff,
        offset: vecf(take("encoder.offset", 1)?),
        projection: mat(take("encoder.projection", 2)?),
    };
    let mut layers = Vec::with_capacity(header.cells.len());
    for (l, kind) in header.cells.iter().enumerate() {
        let cell = match kind {
            CellKind::Full => {
                let w = take(&format!("layer{l}.W"), 3)?;
                let w = Tensor3::from_vec([w.dims[0], w.dims[1], w.dims[2]], w.data)
                    .map_err(|e| PsrnnError::ModelFormat(e.to_string()))?;
                let b = vecf(take(&format!("layer{l}.b"), 1)?);
                Cell::Full(PsrnnCell::new(w, b).map_err(|e| PsrnnError::ModelFormat(e.to_string()))?)
            }
            CellKind::Factorized => {
                let a = mat(take(&format!("layer{l}.A"), 2)?);
                let bm = mat(take(&format!("layer{l}.B"), 2)?);
                let c = mat(take(&format!("layer{l}.C"), 2)?);
                let b = vecf(take(&format!("layer{l}.b"), 1)?);
                let f = CpFactors::new(a, bm, c).map_err(|e| PsrnnError::ModelFormat(e.to_string()))?;
                Cell::Factorized(FactorizedCell::new(f, b).map_err(|e| PsrnnError::ModelFormat(e.to_string()))?)
            }
        };
        let q1 = vecf(take(&format!("layer{l}.q1"), 1)?);
        layers.push(Layer { cell, q1 });
    }
    let decoder = Decoder {
        weight: mat(take("decoder.weight", 2)?),
        bias: vecf(take("decoder.bias", 1)?),
    };
    if let Some(extra) = arrays.keys().next() {
        return Err(PsrnnError::ModelFormat(format!("unexpected array {extra}")));
    }
    let model = PsrnnModel {
        encoder,
        layers,
        decoder,
        meta: header.meta.clone(),
    };
    if header_of(&model) != header {
        return Err(PsrnnError::ModelFormat(
            "header dimensions disagree with the arrays".into(),
        ));
    }
    Ok(model)
}

pub fn save(model: &PsrnnModel, path: &Path) -> Result<()> {
    let bytes = to_bytes(model)?;
    fs::write(path, bytes).map_err(|e| PsrnnError::io(path, e))
}

pub fn load(path: &Path) -> Result<PsrnnModel> {
    let bytes = fs::read(path).map_err(|e| PsrnnError::io(path, e))?;
    from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Sequence;
    use crate::model::{factorize_model, FactorizeOptions};
    use crate::oracle::HmmSpec;
    use crate::par::Exec;
    use crate::twostage::{init_model, InitConfig};

    fn model() -> (PsrnnModel, Vec<Sequence>) {
        let spec = HmmSpec::random(3, 4, 5, &Default::default()).unwrap();
        let train = vec![Sequence::Discrete(spec.sample(2_000, 3))];
        let cfg = InitConfig {
            layers: 2,
            ..InitConfig::default()
        };
        (init_model(&train, Some(4), &cfg, Exec::Parallel).unwrap().0, train)
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let (m, train) = model();
        let bytes = to_bytes(&m).unwrap();
        assert_eq!(&bytes[..4], b"PSRN");
        let back = from_bytes(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(to_bytes(&back).unwrap(), bytes);
        let opts = FactorizeOptions {
            rank: 4,
            ..FactorizeOptions::default()
        };
        let (f, _) = factorize_model(&m, &opts, &train).unwrap();
        let fb = to_bytes(&f).unwrap();
        assert_eq!(to_bytes(&from_bytes(&fb).unwrap()).unwrap(), fb);
        assert_eq!(from_bytes(&fb).unwrap().meta.bias_scale, Some(0.1));
    }

    #[test]
    fn continuous_model_round_trips() {
        let rows: Vec<Vec<f64>> = (0..400)
            .map(|t| vec![(t as f64 * 0.1).sin(), (t as f64 * 0.07).cos()])
            .collect();
        let train = vec![Sequence::Continuous(rows)];
        let cfg = InitConfig {
            rff_count: 50,
            obs_dim: 4,
            history_dim: 4,
            states: 4,
            ..InitConfig::default()
        };
        let (m, _) = init_model(&train, None, &cfg, Exec::Parallel).unwrap();
        assert!(m.encoder.rff.is_some());
        let bytes = to_bytes(&m).unwrap();
        assert_eq!(to_bytes(&from_bytes(&bytes).unwrap()).unwrap(), bytes);
    }

    #[test]
    fn corruption_is_detected() {
        let (m, _) = model();
        let bytes = to_bytes(&m).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(from_bytes(&bad), Err(PsrnnError::ModelFormat(_))));
        let mut bad = bytes.clone();
        bad[4] = 9;
        let err = from_bytes(&bad).unwrap_err();
        assert!(err.to_string().contains("version"), "{err}");
        assert_eq!(err.exit_code(), 4);
        for cut in [3, 20, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(from_bytes(&bytes[..cut]), Err(PsrnnError::ModelFormat(_))));
        }
        let mut longer = bytes.clone();
        longer.push(0);
        assert!(matches!(from_bytes(&longer), Err(PsrnnError::ModelFormat(_))));
        // Inflate the first array's leading dimension.
        let mut bad = bytes.clone();
        let name_len = u16::from_le_bytes([bad[12], bad[13]]) as usize;
        let dim_at = 14 + name_len + 1;
        bad[dim_at] += 1;
        assert!(matches!(from_bytes(&bad), Err(PsrnnError::ModelFormat(_))));
    }
}
