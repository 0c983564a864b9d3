//! Checkpoint container.
//!
//! ```text
//! "MHDR"  u32 version  u32 entry count
//! per entry: u32 name length, UTF-8 name, u32 rank, rank x u64 extents,
//!            f32 values (little-endian, row-major)
//! u64 FNV-1a of every preceding byte
//! ```
//!
//! Integer and floating-point metadata are stored exactly, split into
//! 16-bit chunks that each fit an `f32` without rounding.

use std::path::Path;

use super::{checked_volume, fnv1a64, Cursor};
use crate::error::{Error, Result};
use crate::losses::FeatureExtractor;
use crate::network::{ConvLayer, UNetConfig, UNetParameters};
use crate::tensor::{AdamState, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MHDR";
pub const CHECKPOINT_VERSION: u32 = 1;
const MAX_RANK: usize = 8;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct CheckpointFile {
    entries: Vec<(String, Tensor<f32>)>,
}

impl CheckpointFile {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn entries(&self) -> &[(String, Tensor<f32>)] {
        &self.entries
    }

    /// Inserts or replaces an entry, keeping first-insertion order.
    pub fn put(&mut self, name: impl Into<String>, t: Tensor<f32>) {
        let name = name.into();
        match self.entries.iter_mut().find(|(n, _)| *n == name) {
            Some(slot) => slot.1 = t,
            None => self.entries.push((name, t)),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    fn require(&self, name: &str) -> Result<&Tensor<f32>> {
        self.get(name)
            .ok_or_else(|| Error::Contract(format!("checkpoint has no entry {name:?}")))
    }

    pub fn put_u64(&mut self, name: impl Into<String>, v: u64) {
        let chunks = (0..4).map(|k| ((v >> (16 * k)) & 0xffff) as f32).collect();
        self.put(name, Tensor::new(vec![4], chunks).expect("4 chunks"));
    }

    pub fn get_u64(&self, name: &str) -> Result<u64> {
        let t = self.require(name)?;
        if t.shape() != [4] {
            return Err(Error::Contract(format!("entry {name:?} is not an integer")));
        }
        let mut v = 0u64;
        for (k, &c) in t.data().iter().enumerate() {
            if !(0.0..=65535.0).contains(&c) || c.fract() != 0.0 {
                return Err(Error::Contract(format!("entry {name:?} is not an integer")));
            }
            v |= (c as u64) << (16 * k);
        }
        Ok(v)
    }

    pub fn put_f64(&mut self, name: impl Into<String>, v: f64) {
        self.put_u64(name, v.to_bits());
    }

    pub fn get_f64(&self, name: &str) -> Result<f64> {
        Ok(f64::from_bits(self.get_u64(name)?))
    }

    pub fn put_bytes(&mut self, name: impl Into<String>, bytes: &[u8]) {
        let data = bytes.iter().map(|&b| b as f32).collect();
        self.put(name, Tensor::new(vec![bytes.len()], data).expect("1-D"));
    }

    pub fn get_bytes(&self, name: &str) -> Result<Vec<u8>> {
        self.require(name)?
            .data()
            .iter()
            .map(|&v| {
                if (0.0..=255.0).contains(&v) && v.fract() == 0.0 {
                    Ok(v as u8)
                } else {
                    Err(Error::Contract(format!(
                        "entry {name:?} is not a byte string"
                    )))
                }
            })
            .collect()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, t) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let sum = fnv1a64(&out);
        out.extend_from_slice(&sum.to_le_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(Error::parse(0, "missing \"MHDR\" magic"));
        }
        if bytes.len() < 20 {
            return Err(Error::parse(
                bytes.len(),
                format!(
                    "truncated checkpoint: expected at least 20 bytes, found {}",
                    bytes.len()
                ),
            ));
        }
        let body = &bytes[..bytes.len() - 8];
        let stored = u64::from_le_bytes(bytes[bytes.len() - 8..].try_into().expect("8 bytes"));
        let computed = fnv1a64(body);
        if stored != computed {
            return Err(Error::Checksum { stored, computed });
        }
        let mut cur = Cursor::at(body, 4);
        let version = cur.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version(version));
        }
        let count = cur.u32("entry count")? as usize;
        let mut file = CheckpointFile::new();
        for _ in 0..count {
            let at = cur.pos();
            let len = cur.u32("name length")? as usize;
            let name = std::str::from_utf8(cur.take(len, "entry name")?)
                .map_err(|_| Error::parse(at + 4, "entry name is not UTF-8"))?
                .to_string();
            let rank_at = cur.pos();
            let rank = cur.u32("rank")? as usize;
            if rank > MAX_RANK {
                return Err(Error::parse(
                    rank_at,
                    format!("rank {rank} exceeds {MAX_RANK}"),
                ));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                let d_at = cur.pos();
                let d = cur.u64("extent")?;
                shape.push(
                    usize::try_from(d)
                        .map_err(|_| Error::parse(d_at, format!("extent {d} too large")))?,
                );
            }
            let n = checked_volume(&shape, rank_at)?;
            let bytes_needed = n
                .checked_mul(4)
                .ok_or_else(|| Error::parse(rank_at, "entry too large"))?;
            let raw = cur.take(bytes_needed, "entry values")?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            if file.get(&name).is_some() {
                return Err(Error::parse(at, format!("duplicate entry {name:?}")));
            }
            file.entries.push((name, Tensor::new(shape, data)?));
        }
        if cur.remaining() != 0 {
            return Err(Error::parse(
                cur.pos(),
                format!("{} unexpected bytes before checksum", cur.remaining()),
            ));
        }
        Ok(file)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }

    pub fn put_parameters(&mut self, params: &UNetParameters<f32>) {
        for l in &params.layers {
            self.put(format!("net/{}/weight", l.name), l.weight.clone());
            self.put(format!("net/{}/bias", l.name), l.bias.clone());
        }
    }

    /// Network layers in stored order, validated against `config`.
    pub fn parameters(&self, config: &UNetConfig) -> Result<UNetParameters<f32>> {
        let mut layers: Vec<ConvLayer<f32>> = Vec::new();
        let mut bad = Vec::new();
        for (name, t) in &self.entries {
            let Some(rest) = name.strip_prefix("net/") else {
                continue;
            };
            let Some(layer) = rest.strip_suffix("/weight") else {
                continue;
            };
            match self.get(&format!("net/{layer}/bias")) {
                Some(b) => layers.push(ConvLayer {
                    name: layer.to_string(),
                    weight: t.clone(),
                    bias: b.clone(),
                }),
                None => bad.push(format!("{layer} (bias missing)")),
            }
        }
        if !bad.is_empty() {
            return Err(Error::ShapeMismatch(bad));
        }
        let params = UNetParameters { layers };
        params.validate(config)?;
        Ok(params)
    }

    pub fn put_adam(&mut self, state: &AdamState<f32>) {
        self.put_u64("adam/step", state.step);
        self.put_u64("adam/count", state.m.len() as u64);
        for (i, (m, v)) in state.m.iter().zip(&state.v).enumerate() {
            self.put(format!("adam/m/{i}"), m.clone());
            self.put(format!("adam/v/{i}"), v.clone());
        }
    }

    /// Optimizer state, if present, checked against the parameter shapes.
    pub fn adam(&self, params: &UNetParameters<f32>) -> Result<Option<AdamState<f32>>> {
        if self.get("adam/step").is_none() {
            return Ok(None);
        }
        let step = self.get_u64("adam/step")?;
        let count = self.get_u64("adam/count")? as usize;
        let expected = params.tensors();
        let mut state = AdamState {
            m: Vec::with_capacity(count),
            v: Vec::with_capacity(count),
            step,
        };
        let mut bad = Vec::new();
        if count != expected.len() {
            bad.push(format!(
                "adam ({count} moments for {} tensors)",
                expected.len()
            ));
        }
        for (i, p) in expected.iter().enumerate().take(count) {
            let m = self.require(&format!("adam/m/{i}"))?;
            let v = self.require(&format!("adam/v/{i}"))?;
            if m.shape() != p.shape() || v.shape() != p.shape() {
                bad.push(format!(
                    "adam moment {i} (expected {:?}, found {:?})",
                    p.shape(),
                    m.shape()
                ));
            }
            state.m.push(m.clone());
            state.v.push(v.clone());
        }
        if !bad.is_empty() {
            return Err(Error::ShapeMismatch(bad));
        }
        Ok(Some(state))
    }

    pub fn put_extractor(&mut self, fx: &FeatureExtractor<f32>) {
        for (i, (w, b)) in fx.stages().iter().enumerate() {
            self.put(format!("extractor/{i}/weight"), w.clone());
            self.put(format!("extractor/{i}/bias"), b.clone());
        }
    }

    pub fn extractor(&self) -> Result<Option<FeatureExtractor<f32>>> {
        let mut stages = Vec::new();
        while let Some(w) = self.get(&format!("extractor/{}/weight", stages.len())) {
            let b = self.require(&format!("extractor/{}/bias", stages.len()))?;
            stages.push((w.clone(), b.clone()));
        }
        if stages.is_empty() {
            return Ok(None);
        }
        FeatureExtractor::from_stages(stages).map(Some)
    }
}

/// Contents of a checkpoint after validation against a network layout.
#[derive(Clone, Debug)]
pub struct LoadedCheckpoint {
    pub params: UNetParameters<f32>,
    pub adam: Option<AdamState<f32>>,
    pub extractor: Option<FeatureExtractor<f32>>,
    /// Every entry, including metadata written by callers.
    pub file: CheckpointFile,
}

pub fn save_checkpoint(
    path: impl AsRef<Path>,
    params: &UNetParameters<f32>,
    adam: Option<&AdamState<f32>>,
    extractor: Option<&FeatureExtractor<f32>>,
) -> Result<()> {
    let mut f = CheckpointFile::new();
    f.put_parameters(params);
    if let Some(a) = adam {
        f.put_adam(a);
    }
    if let Some(x) = extractor {
        f.put_extractor(x);
    }
    f.save(path)
}

pub fn load_checkpoint(path: impl AsRef<Path>, config: &UNetConfig) -> Result<LoadedCheckpoint> {
    let file = CheckpointFile::load(path)?;
    let params = file.parameters(config)?;
    let adam = file.adam(&params)?;
    let extractor = file.extractor()?;
    Ok(LoadedCheckpoint {
        params,
        adam,
        extractor,
        file,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn metadata_is_exact() {
        let mut f = CheckpointFile::new();
        f.put_u64("a", u64::MAX - 12345);
        f.put_f64("b", std::f64::consts::PI);
        f.put_bytes("c", b"{\"k\":1}");
        let g = CheckpointFile::decode(&f.encode()).unwrap();
        assert_eq!(g.get_u64("a").unwrap(), u64::MAX - 12345);
        assert_eq!(g.get_f64("b").unwrap(), std::f64::consts::PI);
        assert_eq!(g.get_bytes("c").unwrap(), b"{\"k\":1}");
    }

    #[test]
    fn errors_are_distinct() {
        let mut f = CheckpointFile::new();
        f.put("x", Tensor::from_fn([2, 3], |i| i as f32));
        let good = f.encode();

        let mut flipped = good.clone();
        flipped[20] ^= 1;
        assert!(matches!(
            CheckpointFile::decode(&flipped),
            Err(Error::Checksum { .. })
        ));

        let mut versioned = good[..good.len() - 8].to_vec();
        versioned[4] = 9;
        let sum = fnv1a64(&versioned);
        versioned.extend_from_slice(&sum.to_le_bytes());
        assert!(matches!(
            CheckpointFile::decode(&versioned),
            Err(Error::Version(9))
        ));

        assert!(matches!(
            CheckpointFile::decode(b"XXXX"),
            Err(Error::Parse { .. })
        ));
    }

    #[test]
    fn layer_mismatch_lists_layers() {
        let small = UNetConfig {
            levels: 2,
            base_channels: 2,
            ..Default::default()
        };
        let params = UNetParameters {
            layers: small
                .layers()
                .iter()
                .map(|s| ConvLayer {
                    name: s.name.clone(),
                    weight: Tensor::zeros(s.weight_shape(3)),
                    bias: Tensor::zeros([s.out_channels]),
                })
                .collect(),
        };
        let mut f = CheckpointFile::new();
        f.put_parameters(&params);
        assert!(f.parameters(&small).is_ok());
        let big = UNetConfig { levels: 3, ..small };
        match f.parameters(&big) {
            Err(Error::ShapeMismatch(list)) => assert!(!list.is_empty()),
            other => panic!("{other:?}"),
        }
    }
}
