//! Named-tensor checkpoints in the `SNF1` binary layout.
//!
//! Layout, all integers 32-bit little endian: magic `SNF1`, version, tensor
//! count, then per tensor its UTF-8 name (length prefixed), rank, dims and
//! row-major f32 payload. The network configuration travels as the tensor
//! [`CONFIG_TENSOR`] holding its JSON bytes, one byte per value.

use std::path::Path;

use crate::architecture::{build_network, NetworkConfig, ShapedNetModel, BACKBONE_END};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"SNF1";
pub const VERSION: u32 = 1;
pub const CONFIG_TENSOR: &str = "meta.config";

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub values: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    /// Every stored model tensor (including running statistics) plus the config.
    pub fn from_model(model: &ShapedNetModel) -> Self {
        let json = serde_json::to_vec(&model.config).expect("config serializes");
        let mut tensors = vec![NamedTensor {
            name: CONFIG_TENSOR.into(),
            dims: vec![json.len()],
            values: json.iter().map(|&b| b as f32).collect(),
        }];
        tensors.extend(model.named_tensors().into_iter().map(|(name, t)| NamedTensor {
            name,
            dims: t.shape().to_vec(),
            values: t.data().iter().map(|&v| v as f32).collect(),
        }));
        Self { tensors }
    }

    pub fn get(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn config(&self) -> Result<NetworkConfig> {
        let t = self
            .get(CONFIG_TENSOR)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {CONFIG_TENSOR}")))?;
        let bytes: Vec<u8> = t
            .values
            .iter()
            .map(|&v| {
                if (0.0..=255.0).contains(&v) && v.fract() == 0.0 {
                    Ok(v as u8)
                } else {
                    Err(Error::Checkpoint(format!("{CONFIG_TENSOR} holds non-byte value {v}")))
                }
            })
            .collect::<Result<_>>()?;
        serde_json::from_slice(&bytes).map_err(|e| Error::Checkpoint(format!("bad config: {e}")))
    }

    /// Rebuilds the model; every model tensor must be present with its shape.
    pub fn to_model(&self) -> Result<ShapedNetModel> {
        let mut model = build_network(self.config()?, 0)?;
        self.copy_into(&mut model, |_| true)?;
        Ok(model)
    }

    /// Overwrites the model tensors selected by `keep`, reporting every
    /// missing or misshapen one.
    fn copy_into(&self, model: &mut ShapedNetModel, keep: impl Fn(&str) -> bool) -> Result<()> {
        let mut problems = Vec::new();
        let mut pending = Vec::new();
        for (name, t) in model.named_tensors() {
            if !keep(&name) {
                continue;
            }
            match self.get(&name) {
                None => problems.push(format!("{name}: missing")),
                Some(src) if src.dims != t.shape() => {
                    problems.push(format!("{name}: shape {:?}, expected {:?}", src.dims, t.shape()))
                }
                Some(src) => pending.push((name, src)),
            }
        }
        if !problems.is_empty() {
            return Err(Error::Checkpoint(problems.join("; ")));
        }
        let mut slots = model.named_tensors_mut();
        for (name, src) in pending {
            let (_, dst) = slots.iter_mut().find(|(n, _)| *n == name).expect("name from model");
            for (d, &s) in dst.data_mut().iter_mut().zip(&src.values) {
                *d = s as f64;
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.extend_from_slice(&(t.dims.len() as u32).to_le_bytes());
            for &d in &t.dims {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in &t.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("bad magic, expected SNF1".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
                .to_string();
            let rank = r.u32()? as usize;
            let dims = (0..rank)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n = dims
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::Checkpoint(format!("{name}: size overflows")))?;
            let raw = r.take(
                n.checked_mul(4)
                    .ok_or_else(|| Error::Checkpoint(format!("{name}: size overflows")))?,
            )?;
            let values = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.push(NamedTensor { name, dims, values });
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::file(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::file(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated: need {n} bytes at offset {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

fn is_backbone(name: &str) -> bool {
    name.strip_prefix("layers.")
        .and_then(|rest| rest.split('.').next())
        .and_then(|i| i.parse::<usize>().ok())
        .is_some_and(|i| i <= BACKBONE_END)
}

/// Replaces the backbone tensors (layers up to the backbone terminus,
/// including batch-norm running statistics) with those of a checkpoint.
/// Head and regression parameters are left alone.
pub fn load_pretrained_backbone(model: &mut ShapedNetModel, path: &Path) -> Result<()> {
    Checkpoint::load(path)?.copy_into(model, is_backbone)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::architecture::NetworkConfig;

    fn toy(seed: u64) -> ShapedNetModel {
        let cfg = NetworkConfig {
            input_size: 32,
            ..NetworkConfig::toy()
        };
        build_network(cfg, seed).unwrap()
    }

    fn rounded(m: &ShapedNetModel) -> Vec<Vec<f64>> {
        m.named_tensors()
            .iter()
            .map(|(_, t)| t.data().iter().map(|&v| v as f32 as f64).collect())
            .collect()
    }

    #[test]
    fn header_layout() {
        let ck = Checkpoint {
            tensors: vec![NamedTensor {
                name: "ab".into(),
                dims: vec![2, 1],
                values: vec![1.0, -2.5],
            }],
        };
        let b = ck.to_bytes();
        let mut expect = b"SNF1".to_vec();
        for w in [1u32, 1, 2] {
            expect.extend_from_slice(&w.to_le_bytes());
        }
        expect.extend_from_slice(b"ab");
        for w in [2u32, 2, 1] {
            expect.extend_from_slice(&w.to_le_bytes());
        }
        expect.extend_from_slice(&1.0f32.to_le_bytes());
        expect.extend_from_slice(&(-2.5f32).to_le_bytes());
        assert_eq!(b, expect);
        assert_eq!(Checkpoint::from_bytes(&b).unwrap(), ck);
    }

    #[test]
    fn model_round_trip_is_exact_at_f32() {
        let mut m = toy(3);
        m.layers[1]
            .conv
            .as_mut()
            .unwrap()
            .bn
            .as_mut()
            .unwrap()
            .running_var
            .data_mut()[0] = 1.2345678901;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.snf");
        Checkpoint::from_model(&m).save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap().to_model().unwrap();
        assert_eq!(back.config, m.config);
        assert_eq!(rounded(&back), rounded(&m));
        // A second trip is the identity.
        assert_eq!(Checkpoint::from_model(&back), Checkpoint::load(&path).unwrap());
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let b = Checkpoint::from_model(&toy(1)).to_bytes();
        assert!(Checkpoint::from_bytes(&b[..b.len() - 3]).is_err());
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
        let mut bad = b.clone();
        bad[4] = 2;
        assert!(Checkpoint::from_bytes(&bad).is_err());
        let mut long = b;
        long.push(0);
        assert!(Checkpoint::from_bytes(&long).is_err());
    }

    #[test]
    fn backbone_load_touches_only_backbone() {
        let src = toy(1);
        let mut dst = toy(2);
        let before = dst.clone();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.snf");
        Checkpoint::from_model(&src).save(&path).unwrap();
        load_pretrained_backbone(&mut dst, &path).unwrap();
        for (((name, a), (_, b)), (_, s)) in dst
            .named_tensors()
            .iter()
            .zip(before.named_tensors())
            .zip(src.named_tensors())
        {
            let got: Vec<f64> = a.data().to_vec();
            if is_backbone(name) {
                let want: Vec<f64> = s.data().iter().map(|&v| v as f32 as f64).collect();
                assert_eq!(got, want, "{name}");
            } else {
                assert_eq!(got, b.data(), "{name}");
            }
        }
    }

    #[test]
    fn backbone_load_names_missing_layer() {
        let mut ck = Checkpoint::from_model(&toy(1));
        ck.tensors.retain(|t| t.name != "layers.5.bn.gamma");
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.snf");
        ck.save(&path).unwrap();
        let mut m = toy(2);
        let before = m.clone();
        match load_pretrained_backbone(&mut m, &path) {
            Err(Error::Checkpoint(msg)) => assert!(msg.contains("layers.5.bn.gamma"), "{msg}"),
            other => panic!("expected checkpoint error, got {other:?}"),
        }
        assert_eq!(m, before);
    }

    #[test]
    fn backbone_load_reports_shape_mismatch() {
        let other = build_network(
            NetworkConfig {
                input_size: 32,
                channel_mult: 0.25,
                ..NetworkConfig::toy()
            },
            1,
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.snf");
        Checkpoint::from_model(&other).save(&path).unwrap();
        let mut m = toy(2);
        let err = load_pretrained_backbone(&mut m, &path).unwrap_err().to_string();
        assert!(err.contains("layers.0.weight: shape"), "{err}");
    }
}
