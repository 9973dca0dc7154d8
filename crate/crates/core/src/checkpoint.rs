//! Binary checkpoint format (`VITC`, version 1).
//!
//! All integers are little-endian.
//!
//! ```text
//! magic          4 bytes  "VITC"
//! version        u32      1
//! config         8 × u64  image_size, channels, patch_size, hidden_dim,
//!                         mlp_dim, num_heads, num_layers, num_classes
//! tensor_count   u64
//! tensor*        name_len u32, name (UTF-8), rank u64, dims rank × u64,
//!                dtype u8 (1 = f32), payload_len u64 (bytes), payload
//! has_optimizer  u8       0 or 1
//! optimizer?     step u64, lr f64, beta1 f64, beta2 f64, eps f64,
//!                weight_decay f64, tensor_count u64, tensor* named
//!                "m/<param>" and "v/<param>"
//! checksum       u64      FNV-1a 64 over every preceding byte
//! ```
//!
//! Tensors are written in ascending name order, so equal states serialize
//! to identical bytes.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::train::{AdamWConfig, AdamWState};
use crate::vit::{ModelParams, ViTConfig, HEAD_BIAS, HEAD_WEIGHT, INIT_STD};

pub const MAGIC: [u8; 4] = *b"VITC";
pub const FORMAT_VERSION: u32 = 1;
pub const DTYPE_F32: u8 = 1;

const FIRST_MOMENT_PREFIX: &str = "m/";
const SECOND_MOMENT_PREFIX: &str = "v/";
const HEADER_LEN: usize = 4 + 4;

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ViTConfig,
    pub params: ModelParams<f32>,
    pub optimizer: Option<AdamWState<f32>>,
}

fn config_fields(c: &ViTConfig) -> [usize; 8] {
    [
        c.image_size,
        c.channels,
        c.patch_size,
        c.hidden_dim,
        c.mlp_dim,
        c.num_heads,
        c.num_layers,
        c.num_classes,
    ]
}

fn put_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor<f32>) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(t.rank() as u64).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    out.push(DTYPE_F32);
    out.extend_from_slice(&(4 * t.numel() as u64).to_le_bytes());
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        for f in config_fields(&self.config) {
            out.extend_from_slice(&(f as u64).to_le_bytes());
        }
        out.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for (name, p) in self.params.iter() {
            put_tensor(&mut out, name, &p.tensor);
        }
        match &self.optimizer {
            None => out.push(0),
            Some(state) => {
                out.push(1);
                out.extend_from_slice(&state.step.to_le_bytes());
                let c = state.config;
                for h in [c.lr, c.beta1, c.beta2, c.eps, c.weight_decay] {
                    out.extend_from_slice(&h.to_le_bytes());
                }
                let mut moments = BTreeMap::new();
                for (name, t) in &state.first_moment {
                    moments.insert(format!("{FIRST_MOMENT_PREFIX}{name}"), t);
                }
                for (name, t) in &state.second_moment {
                    moments.insert(format!("{SECOND_MOMENT_PREFIX}{name}"), t);
                }
                out.extend_from_slice(&(moments.len() as u64).to_le_bytes());
                for (name, t) in moments {
                    put_tensor(&mut out, &name, t);
                }
            }
        }
        let checksum = fnv1a64(&out);
        out.extend_from_slice(&checksum.to_le_bytes());
        out
    }

    /// Validates magic, version and checksum before parsing anything else,
    /// then checks every tensor against the stored config.
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 {
            return Err(Error::Parse {
                offset: bytes.len(),
                reason: "file too short for magic bytes".into(),
            });
        }
        let magic: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
        if magic != MAGIC {
            return Err(Error::BadMagic(magic));
        }
        if bytes.len() < HEADER_LEN + 8 {
            return Err(Error::Parse {
                offset: bytes.len(),
                reason: "file too short for header and checksum".into(),
            });
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 8);
        let stored = u64::from_le_bytes(tail.try_into().expect("8 bytes"));
        let computed = fnv1a64(body);
        if stored != computed {
            return Err(Error::ChecksumMismatch { stored, computed });
        }

        let mut r = Reader { bytes: body, pos: HEADER_LEN };
        let mut fields = [0usize; 8];
        for f in fields.iter_mut() {
            *f = r.usize("config field")?;
        }
        let [image_size, channels, patch_size, hidden_dim, mlp_dim, num_heads, num_layers, num_classes] =
            fields;
        let config = ViTConfig {
            image_size,
            channels,
            patch_size,
            hidden_dim,
            mlp_dim,
            num_heads,
            num_layers,
            num_classes,
        };
        config.validate()?;

        let mut params = ModelParams::new();
        for _ in 0..r.count("tensor count")? {
            let (name, t) = r.tensor()?;
            if params.contains(&name) {
                return Err(Error::TensorShape {
                    name,
                    reason: "duplicate tensor name".into(),
                });
            }
            params.insert(name, t);
        }
        params.check_layout(&config)?;

        let optimizer = match r.u8("optimizer flag")? {
            0 => None,
            1 => Some(r.optimizer(&params)?),
            other => {
                return Err(Error::Parse {
                    offset: r.pos - 1,
                    reason: format!("invalid optimizer flag {other}"),
                })
            }
        };
        if r.pos != body.len() {
            return Err(Error::Parse {
                offset: r.pos,
                reason: format!("{} unexpected trailing bytes", body.len() - r.pos),
            });
        }
        Ok(Checkpoint {
            config,
            params,
            optimizer,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}

/// Writes `params` (checked against `config`) and optional optimizer state.
pub fn save(
    params: &ModelParams<f32>,
    config: &ViTConfig,
    optimizer: Option<&AdamWState<f32>>,
    path: impl AsRef<Path>,
) -> Result<()> {
    params.check_layout(config)?;
    Checkpoint {
        config: *config,
        params: params.clone(),
        optimizer: optimizer.cloned(),
    }
    .save(path)
}

pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint> {
    Checkpoint::load(path)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Parse {
                offset: self.pos,
                reason: format!("truncated while reading {what}"),
            }),
        }
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_bits(self.u64(what)?))
    }

    fn usize(&mut self, what: &str) -> Result<usize> {
        let at = self.pos;
        let v = self.u64(what)?;
        usize::try_from(v).map_err(|_| Error::Parse {
            offset: at,
            reason: format!("{what} {v} does not fit in memory"),
        })
    }

    /// A count that cannot exceed the remaining bytes.
    fn count(&mut self, what: &str) -> Result<usize> {
        let at = self.pos;
        let n = self.usize(what)?;
        if n > self.bytes.len() - self.pos {
            return Err(Error::Parse {
                offset: at,
                reason: format!("{what} {n} exceeds remaining file size"),
            });
        }
        Ok(n)
    }

    fn tensor(&mut self) -> Result<(String, Tensor<f32>)> {
        let name_len = self.u32("tensor name length")? as usize;
        let at = self.pos;
        let name = std::str::from_utf8(self.take(name_len, "tensor name")?)
            .map_err(|_| Error::Parse {
                offset: at,
                reason: "tensor name is not UTF-8".into(),
            })?
            .to_string();
        let rank = self.count("tensor rank")?;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.usize("tensor dim")?);
        }
        let dtype = self.u8("dtype tag")?;
        if dtype != DTYPE_F32 {
            return Err(Error::TensorShape {
                name,
                reason: format!("unsupported dtype tag {dtype}"),
            });
        }
        let payload_len = self.usize("payload length")?;
        let expected = shape
            .iter()
            .try_fold(4usize, |acc, &d| acc.checked_mul(d));
        if expected != Some(payload_len) {
            return Err(Error::TensorShape {
                name,
                reason: format!("dims {shape:?} do not match payload of {payload_len} bytes"),
            });
        }
        let data: Vec<f32> = self
            .take(payload_len, "tensor payload")?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::TensorShape {
            name: name.clone(),
            reason: e.to_string(),
        })?;
        Ok((name, t))
    }

    fn optimizer(&mut self, params: &ModelParams<f32>) -> Result<AdamWState<f32>> {
        let step = self.u64("optimizer step")?;
        let config = AdamWConfig {
            lr: self.f64("lr")?,
            beta1: self.f64("beta1")?,
            beta2: self.f64("beta2")?,
            eps: self.f64("eps")?,
            weight_decay: self.f64("weight_decay")?,
        };
        config.validate()?;
        let mut state = AdamWState::new(config);
        state.step = step;
        for _ in 0..self.count("optimizer tensor count")? {
            let (name, t) = self.tensor()?;
            let (map, param) = if let Some(p) = name.strip_prefix(FIRST_MOMENT_PREFIX) {
                (&mut state.first_moment, p)
            } else if let Some(p) = name.strip_prefix(SECOND_MOMENT_PREFIX) {
                (&mut state.second_moment, p)
            } else {
                return Err(Error::TensorShape {
                    name,
                    reason: "optimizer tensor without m/ or v/ prefix".into(),
                });
            };
            let expected = params.tensor(param).map_err(|_| Error::TensorShape {
                name: name.clone(),
                reason: "moment for unknown parameter".into(),
            })?;
            if expected.shape() != t.shape() {
                return Err(Error::TensorShape {
                    name,
                    reason: format!("shape {:?} differs from parameter {:?}", t.shape(), expected.shape()),
                });
            }
            if map.insert(param.to_string(), t).is_some() {
                return Err(Error::TensorShape {
                    name,
                    reason: "duplicate tensor name".into(),
                });
            }
        }
        Ok(state)
    }
}

/// Swaps the classifier for a fresh `new_k`-way head: weights truncated
/// normal (σ = 0.02), bias zero. Backbone tensors are copied unchanged and
/// optimizer state is dropped.
pub fn replace_head(ckpt: &Checkpoint, new_k: usize, rng: &mut Rng) -> Result<Checkpoint> {
    if new_k < 2 {
        return Err(Error::Validation(format!(
            "a classification head needs at least 2 classes, got {new_k}"
        )));
    }
    let config = ViTConfig {
        num_classes: new_k,
        ..ckpt.config
    };
    let d = config.hidden_dim;
    let mut params = ckpt.params.clone();
    params.insert(
        HEAD_WEIGHT,
        Tensor::from_fn(&[d, new_k], |_| rng.truncated_normal(INIT_STD) as f32),
    );
    params.insert(HEAD_BIAS, Tensor::zeros(&[new_k]));
    params.check_layout(&config)?;
    Ok(Checkpoint {
        config,
        params,
        optimizer: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::adamw_step;
    use crate::vit::is_head;

    fn sample(with_optimizer: bool) -> Checkpoint {
        let config = ViTConfig::tiny(3);
        let mut params = ModelParams::<f32>::init(&config, &mut Rng::new(1)).unwrap();
        let optimizer = with_optimizer.then(|| {
            let mut state = AdamWState::new(AdamWConfig::default());
            let grads = params
                .iter()
                .map(|(n, p)| (n.to_string(), Tensor::full(p.tensor.shape(), 0.5f32)))
                .collect();
            adamw_step(&mut params, &grads, &mut state).unwrap();
            state
        });
        Checkpoint {
            config,
            params,
            optimizer,
        }
    }

    #[test]
    fn fnv_reference_values() {
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a64(b"foobar"), 0x85944171f73967e8);
    }

    #[test]
    fn round_trip_is_bitwise() {
        for opt in [false, true] {
            let c = sample(opt);
            let bytes = c.encode();
            let back = Checkpoint::decode(&bytes).unwrap();
            assert_eq!(back, c);
            assert_eq!(back.encode(), bytes);
        }
    }

    #[test]
    fn header_layout() {
        let bytes = sample(false).encode();
        assert_eq!(&bytes[..4], b"VITC");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(&bytes[8..16], &32u64.to_le_bytes());
        assert_eq!(&bytes[64..72], &3u64.to_le_bytes());
        let first = "embed.cls";
        assert_eq!(&bytes[80..84], &(first.len() as u32).to_le_bytes());
        assert_eq!(&bytes[84..84 + first.len()], first.as_bytes());
        let n = bytes.len();
        assert_eq!(&bytes[n - 8..], &fnv1a64(&bytes[..n - 8]).to_le_bytes());
    }

    #[test]
    fn corruption_is_detected() {
        let bytes = sample(true).encode();
        let mut flipped = bytes.clone();
        flipped[bytes.len() / 2] ^= 0x40;
        assert!(matches!(Checkpoint::decode(&flipped), Err(Error::ChecksumMismatch { .. })));

        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(matches!(Checkpoint::decode(&magic), Err(Error::BadMagic(_))));

        let mut version = bytes.clone();
        version[4..8].copy_from_slice(&999u32.to_le_bytes());
        assert!(matches!(Checkpoint::decode(&version), Err(Error::UnsupportedVersion(999))));

        for cut in [0, 3, 10, bytes.len() / 3] {
            assert!(Checkpoint::decode(&bytes[..cut]).is_err());
        }
    }

    fn reseal(mut body: Vec<u8>) -> Vec<u8> {
        let sum = fnv1a64(&body);
        body.extend_from_slice(&sum.to_le_bytes());
        body
    }

    #[test]
    fn truncated_body_with_valid_checksum_is_a_parse_error() {
        let bytes = sample(false).encode();
        let body = bytes[..bytes.len() / 2].to_vec();
        assert!(matches!(Checkpoint::decode(&reseal(body)), Err(Error::Parse { .. })));
    }

    #[test]
    fn payload_length_mismatch_names_the_tensor() {
        let bytes = sample(false).encode();
        let name = b"embed.cls";
        // name_len, name, rank, two dims, dtype, then payload length.
        let at = 80 + 4 + name.len() + 8 + 16 + 1;
        let mut body = bytes[..bytes.len() - 8].to_vec();
        body[at..at + 8].copy_from_slice(&8u64.to_le_bytes());
        match Checkpoint::decode(&reseal(body)) {
            Err(Error::TensorShape { name, .. }) => assert_eq!(name, "embed.cls"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn config_inconsistency_is_rejected() {
        let mut c = sample(false);
        c.config.mlp_dim = 128;
        assert!(matches!(Checkpoint::decode(&c.encode()), Err(Error::TensorShape { .. })));
    }

    #[test]
    fn save_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let c = sample(true);
        let (a, b) = (dir.path().join("a.vitc"), dir.path().join("b.vitc"));
        save(&c.params, &c.config, c.optimizer.as_ref(), &a).unwrap();
        save(&c.params, &c.config, c.optimizer.as_ref(), &b).unwrap();
        assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
        assert_eq!(load(&a).unwrap(), c);
        assert!(matches!(load(dir.path().join("missing")), Err(Error::Io { .. })));
    }

    #[test]
    fn head_replacement() {
        let c = sample(true);
        let r = replace_head(&c, 2, &mut Rng::new(5)).unwrap();
        assert_eq!(r.config.num_classes, 2);
        assert!(r.optimizer.is_none());
        assert_eq!(r.params.tensor(HEAD_WEIGHT).unwrap().shape(), &[32, 2]);
        assert!(r.params.tensor(HEAD_BIAS).unwrap().data().iter().all(|&v| v == 0.0));
        for (name, p) in c.params.iter().filter(|(n, _)| !is_head(n)) {
            assert_eq!(r.params.tensor(name).unwrap(), &p.tensor);
        }
        let w = r.params.tensor(HEAD_WEIGHT).unwrap();
        assert!(w.data().iter().all(|&v| v.abs() <= 0.04 + 1e-7));
        assert!(w.data().iter().any(|&v| v != 0.0));

        let again = replace_head(&r, 2, &mut Rng::new(6)).unwrap();
        assert_ne!(again.params.tensor(HEAD_WEIGHT).unwrap(), w);
        assert!(matches!(replace_head(&c, 1, &mut Rng::new(0)), Err(Error::Validation(_))));
    }
}
