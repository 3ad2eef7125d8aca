//! A trained model: per-unit lossy and residual networks, their
//! normalization statistics, and the `.tlrm` file format.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "TLRM" | version u16
//! u32 len | config record (JSON)
//! units u32 | per unit: kind u8, channels u32, mean f64 × channels, std f64 × channels
//! tensors u32 | per tensor: name (u16 len + UTF-8), shape 4 × u32, f32 data
//! u32 len | training metadata (JSON)
//! SHA-256 of everything above [32]
//! ```

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::container::{kind_code, kind_from_code, ByteReader, ByteWriter, FormatError};
use crate::dct_image::NormStats;
use crate::jpeg::sha256;
use crate::lossy::{LossyConfig, LossyError, LossyNet};
use crate::nn::{ParamStore, Tensor};
use crate::residual::{ResidualConfig, ResidualNet, UnitKind, DEFAULT_MIXTURES};

pub const MODEL_MAGIC: &[u8; 4] = b"TLRM";
pub const MODEL_VERSION: u16 = 1;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Lossy(#[from] LossyError),
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Unit kinds this model can code, one network pair each.
    pub units: Vec<UnitKind>,
    /// M
    pub latent_channels: usize,
    /// N
    pub hyper_channels: usize,
    /// K
    pub mixtures: usize,
    pub lambda: f64,
    /// No lossy branch; coefficients are coded by the residual network
    /// alone with a single Laplace per channel.
    pub direct: bool,
}

impl ModelConfig {
    /// Full-size architecture.
    pub fn standard(units: Vec<UnitKind>) -> Self {
        ModelConfig { units, latent_channels: 192, hyper_channels: 128, mixtures: DEFAULT_MIXTURES, lambda: 0.03, direct: false }
    }

    /// Reduced widths for single-core training.
    pub fn desk(units: Vec<UnitKind>) -> Self {
        ModelConfig { latent_channels: 32, hyper_channels: 32, ..Self::standard(units) }
    }

    pub fn lossy_config(&self, kind: UnitKind) -> LossyConfig {
        LossyConfig {
            input_channels: 64 * kind.components(),
            latent_channels: self.latent_channels,
            hyper_channels: self.hyper_channels,
            lambda: self.lambda,
        }
    }

    pub fn residual_config(&self, kind: UnitKind) -> ResidualConfig {
        if self.direct {
            ResidualConfig::direct(kind)
        } else {
            ResidualConfig { mixtures: self.mixtures, ..ResidualConfig::new(kind) }
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.units.is_empty() {
            return Err(ModelError::InvalidConfig("no unit kinds".into()));
        }
        for (i, k) in self.units.iter().enumerate() {
            if self.units[..i].contains(k) {
                return Err(ModelError::InvalidConfig(format!("unit kind {} listed twice", k.name())));
            }
        }
        if self.mixtures == 0 {
            return Err(ModelError::InvalidConfig("mixture count must be positive".into()));
        }
        if !self.direct {
            self.lossy_config(self.units[0]).validate()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub lossy_steps: u64,
    pub joint_steps: u64,
    pub seed: u64,
    /// λ used by the most recent training run.
    pub lambda: f64,
    /// Hex SHA-256 over the training files' digests in name order.
    pub corpus_digest: String,
    pub corpus_files: usize,
    /// Mean loss over the final logging window, if any.
    pub final_loss: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct UnitModel {
    pub kind: UnitKind,
    pub lossy: Option<LossyNet>,
    pub residual: ResidualNet,
    pub stats: NormStats,
}

impl UnitModel {
    pub fn lossy_prefix(kind: UnitKind) -> String {
        format!("{}.lossy", kind.name())
    }

    pub fn residual_prefix(kind: UnitKind) -> String {
        format!("{}.residual", kind.name())
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub meta: TrainingMeta,
    pub store: ParamStore<f32>,
    pub units: Vec<UnitModel>,
}

impl Model {
    /// Freshly initialised networks. `stats[i]` belongs to
    /// `config.units[i]`.
    pub fn new(config: ModelConfig, stats: Vec<NormStats>, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        if stats.len() != config.units.len() {
            return Err(ModelError::InvalidConfig(format!("{} stats for {} units", stats.len(), config.units.len())));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut units = Vec::new();
        for (&kind, stats) in config.units.iter().zip(stats) {
            let channels = 64 * kind.components();
            if stats.channels() != channels || stats.std.len() != channels || stats.std.iter().any(|&s| !(s > 0.0)) {
                return Err(ModelError::InvalidConfig(format!("bad norm stats for {} unit", kind.name())));
            }
            let lossy = if config.direct {
                None
            } else {
                Some(LossyNet::new(&mut store, &UnitModel::lossy_prefix(kind), config.lossy_config(kind), &mut rng)?)
            };
            let residual =
                ResidualNet::new(&mut store, &UnitModel::residual_prefix(kind), config.residual_config(kind), &mut rng);
            units.push(UnitModel { kind, lossy, residual, stats });
        }
        Ok(Model { config, meta: TrainingMeta::default(), store, units })
    }

    pub fn unit(&self, kind: UnitKind) -> Option<&UnitModel> {
        self.units.iter().find(|u| u.kind == kind)
    }

    /// Identity hash stored in containers: SHA-256 of the serialized model.
    pub fn hash(&self) -> Result<[u8; 32], ModelError> {
        Ok(sha256(&self.to_bytes()?))
    }

    pub fn stats_hash(&self) -> [u8; 32] {
        let mut w = ByteWriter::default();
        write_stats(&mut w, &self.units);
        sha256(&w.buf)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, ModelError> {
        let mut w = ByteWriter::default();
        w.bytes(MODEL_MAGIC);
        w.u16(MODEL_VERSION);
        w.blob(&json(&self.config)?)?;
        write_stats(&mut w, &self.units);
        w.u32(self.store.len() as u32);
        for p in self.store.params() {
            let name = p.name.as_bytes();
            w.u16(u16::try_from(name.len()).map_err(|_| ModelError::InvalidConfig("parameter name too long".into()))?);
            w.bytes(name);
            for d in p.value.shape {
                w.u32(d as u32);
            }
            for v in &p.value.data {
                w.bytes(&v.to_le_bytes());
            }
        }
        w.blob(&json(&self.meta)?)?;
        Ok(w.seal())
    }

    /// Rebuilds the architecture from the stored config and overwrites every
    /// parameter by name, checking shapes.
    pub fn from_bytes(data: &[u8]) -> Result<Self, ModelError> {
        let mut r = ByteReader::open(data, MODEL_MAGIC, MODEL_VERSION)?;
        let config: ModelConfig = unjson(r.blob()?)?;
        let n_units = r.u32()? as usize;
        if n_units != config.units.len() {
            return Err(FormatError::Malformed(format!("{n_units} stat blocks for {} units", config.units.len())).into());
        }
        let mut stats = Vec::with_capacity(n_units);
        for &kind in &config.units {
            if kind_from_code(r.u8()?)? != kind {
                return Err(FormatError::Malformed("stat blocks out of unit order".into()).into());
            }
            let ch = r.u32()? as usize;
            if ch != 64 * kind.components() {
                return Err(FormatError::Malformed(format!("{ch} stat channels for a {} unit", kind.name())).into());
            }
            let mean = read_f64s(&mut r, ch)?;
            let std = read_f64s(&mut r, ch)?;
            stats.push(NormStats { mean, std });
        }
        let mut model = Model::new(config, stats, 0)?;
        let count = r.u32()? as usize;
        if count != model.store.len() {
            return Err(FormatError::Malformed(format!("{count} tensors, architecture has {}", model.store.len())).into());
        }
        let mut seen = vec![false; count];
        for _ in 0..count {
            let len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| FormatError::Malformed("parameter name is not UTF-8".into()))?
                .to_string();
            let slot = model
                .store
                .slot(&name)
                .ok_or_else(|| FormatError::Malformed(format!("unknown parameter {name}")))?;
            if std::mem::replace(&mut seen[slot], true) {
                return Err(FormatError::Malformed(format!("parameter {name} named twice")).into());
            }
            let mut shape = [0usize; 4];
            for d in &mut shape {
                *d = r.u32()? as usize;
            }
            let expected = model.store.value(slot).shape;
            if shape != expected {
                return Err(FormatError::ShapeMismatch { name, expected, found: shape }.into());
            }
            let n: usize = shape.iter().product();
            let raw = r.take(4 * n)?;
            let data = raw.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
            model.store.get_mut(slot).value = Tensor { shape, data };
        }
        model.meta = unjson(r.blob()?)?;
        r.finish()?;
        Ok(model)
    }

    pub fn save(&self, path: &std::path::Path) -> std::io::Result<()> {
        let bytes = self.to_bytes().map_err(std::io::Error::other)?;
        std::fs::write(path, bytes)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, ModelError> {
        let bytes = std::fs::read(path).map_err(|e| FormatError::Malformed(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}

fn write_stats(w: &mut ByteWriter, units: &[UnitModel]) {
    w.u32(units.len() as u32);
    for u in units {
        w.u8(kind_code(u.kind));
        w.u32(u.stats.channels() as u32);
        for v in u.stats.mean.iter().chain(&u.stats.std) {
            w.bytes(&v.to_le_bytes());
        }
    }
}

fn read_f64s(r: &mut ByteReader<'_>, n: usize) -> Result<Vec<f64>, FormatError> {
    let raw = r.take(8 * n)?;
    Ok(raw.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk"))).collect())
}

fn json<T: Serialize>(v: &T) -> Result<Vec<u8>, ModelError> {
    serde_json::to_vec(v).map_err(|e| ModelError::InvalidConfig(e.to_string()))
}

fn unjson<T: for<'de> Deserialize<'de>>(b: &[u8]) -> Result<T, FormatError> {
    serde_json::from_slice(b).map_err(|e| FormatError::Malformed(format!("record: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(direct: bool) -> Model {
        let cfg = ModelConfig {
            units: vec![UnitKind::Luma, UnitKind::Chroma],
            latent_channels: 4,
            hyper_channels: 3,
            mixtures: 2,
            lambda: 0.03,
            direct,
        };
        let stats = vec![NormStats::identity(64), NormStats { mean: vec![0.5; 128], std: vec![2.0; 128] }];
        Model::new(cfg, stats, 11).unwrap()
    }

    #[test]
    fn init_only_model_round_trips_byte_identically() {
        for direct in [false, true] {
            let m = tiny(direct);
            let a = m.to_bytes().unwrap();
            let back = Model::from_bytes(&a).unwrap();
            assert_eq!(back.store, m.store);
            assert_eq!(back.units[1].stats, m.units[1].stats);
            assert_eq!(back.to_bytes().unwrap(), a);
        }
    }

    #[test]
    fn float_bit_patterns_survive() {
        let mut m = tiny(false);
        let odd = [f32::MIN_POSITIVE / 2.0, -0.0, 1.0e-38, f32::MAX, 0.1];
        m.store.get_mut(0).value.data[..5].copy_from_slice(&odd);
        m.meta.joint_steps = 7;
        let back = Model::from_bytes(&m.to_bytes().unwrap()).unwrap();
        let got = &back.store.value(0).data[..5];
        assert!(got.iter().zip(&odd).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert_eq!(back.meta.joint_steps, 7);
    }

    #[test]
    fn corrupted_model_is_rejected() {
        let bytes = tiny(false).to_bytes().unwrap();
        let mut b = bytes.clone();
        b[bytes.len() / 2] ^= 1;
        assert!(matches!(Model::from_bytes(&b), Err(ModelError::Format(FormatError::ChecksumMismatch))));
        let mut b = bytes.clone();
        b[4] = 2;
        assert!(matches!(Model::from_bytes(&b), Err(ModelError::Format(FormatError::VersionError(_)))));
    }

    #[test]
    fn hashes_track_content() {
        let a = tiny(false);
        let mut b = a.clone();
        assert_eq!(a.hash().unwrap(), b.hash().unwrap());
        b.store.get_mut(3).value.data[0] += 1.0;
        assert_ne!(a.hash().unwrap(), b.hash().unwrap());
        assert_eq!(a.stats_hash(), b.stats_hash());
        b.units[0].stats.std[5] = 3.0;
        assert_ne!(a.stats_hash(), b.stats_hash());
    }

    #[test]
    fn bad_configs_are_rejected() {
        let mut cfg = ModelConfig::desk(vec![UnitKind::Luma, UnitKind::Luma]);
        assert!(Model::new(cfg.clone(), vec![NormStats::identity(64); 2], 0).is_err());
        cfg.units = vec![UnitKind::Luma];
        assert!(Model::new(cfg.clone(), vec![NormStats::identity(128)], 0).is_err());
        cfg.lambda = 0.0;
        assert!(Model::new(cfg, vec![NormStats::identity(64)], 0).is_err());
    }
}
