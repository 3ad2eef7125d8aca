//! Corpus ingestion and the two-phase training procedure.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{plan_units, CodecError};
use crate::dct_image::{blocks_to_dct_image, compute_norm_stats, normalize, DctError, DctImage, NormStats};
use crate::jpeg::{parse_jpeg, sha256};
use crate::lossy::{reconstruct_int, LossyError, SITE_MULTIPLE};
use crate::model::{Model, ModelConfig, ModelError, UnitModel};
use crate::nn::{adam_step, AdamState, Graph, NnError, Tensor, Var};
use crate::residual::{ResidualError, UnitKind};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("no usable JPEG files in {0}")]
    EmptyCorpus(PathBuf),
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("joint training needs a pretrained model (or from_scratch)")]
    MissingPretrain,
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: u64, last_good: Box<Model> },
    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Lossy(#[from] LossyError),
    #[error(transparent)]
    Residual(#[from] ResidualError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Dct(#[from] DctError),
}

/// One file's coefficients, grouped into coding units.
#[derive(Debug, Clone)]
pub struct CorpusFile {
    pub path: PathBuf,
    pub digest: [u8; 32],
    pub units: Vec<(UnitKind, Vec<DctImage>)>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub files: Vec<CorpusFile>,
    pub skipped: usize,
    /// Unit kinds present, in [`UnitKind`] order, with their corpus
    /// statistics.
    pub stats: Vec<(UnitKind, NormStats)>,
}

/// A `tile × tile`-site crop of one unit.
#[derive(Debug, Clone)]
pub struct Tile {
    pub file: usize,
    pub unit: usize,
    pub row: usize,
    pub col: usize,
    pub stack: Vec<DctImage>,
}

fn list_jpegs(dir: &Path) -> Result<Vec<PathBuf>, TrainError> {
    let io = |source| TrainError::Io { path: dir.to_path_buf(), source };
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(io)? {
        let path = entry.map_err(io)?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if path.is_file() && matches!(ext.as_deref(), Some("jpg" | "jpeg")) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

fn load_units(bytes: &[u8]) -> Result<Vec<(UnitKind, Vec<DctImage>)>, CodecError> {
    let image = parse_jpeg(bytes)?;
    let mut units = Vec::new();
    for plan in plan_units(&image.header)? {
        let stack = plan
            .components
            .iter()
            .map(|&i| blocks_to_dct_image(&image.coeff_planes[i], image.header.frame.components[i].id))
            .collect::<Result<Vec<_>, _>>()?;
        units.push((plan.kind, stack));
    }
    Ok(units)
}

const KINDS: [UnitKind; 3] = [UnitKind::Luma, UnitKind::Chroma, UnitKind::Full];

/// Parses every `.jpg`/`.jpeg` in `dir` (sorted by name). Files that cannot
/// be coded are skipped and counted.
pub fn ingest_corpus(dir: &Path) -> Result<Dataset, TrainError> {
    let mut files = Vec::new();
    let mut skipped = 0;
    for path in list_jpegs(dir)? {
        let bytes = std::fs::read(&path).map_err(|source| TrainError::Io { path: path.clone(), source })?;
        match load_units(&bytes) {
            Ok(units) => files.push(CorpusFile { digest: sha256(&bytes), path, units }),
            Err(e) => {
                log::warn!("skipping {}: {e}", path.display());
                skipped += 1;
            }
        }
    }
    if skipped > 0 {
        log::info!("skipped {skipped} unusable file(s) in {}", dir.display());
    }
    if files.is_empty() {
        return Err(TrainError::EmptyCorpus(dir.to_path_buf()));
    }
    let mut stats = Vec::new();
    for kind in KINDS {
        let stacks: Vec<&[DctImage]> =
            files.iter().flat_map(|f| &f.units).filter(|(k, _)| *k == kind).map(|(_, s)| s.as_slice()).collect();
        if !stacks.is_empty() {
            stats.push((kind, compute_norm_stats(stacks)?));
        }
    }
    Ok(Dataset { files, skipped, stats })
}

impl Dataset {
    pub fn kinds(&self) -> Vec<UnitKind> {
        self.stats.iter().map(|(k, _)| *k).collect()
    }

    /// Hex SHA-256 over the file digests in corpus order.
    pub fn digest(&self) -> String {
        let mut all = Vec::with_capacity(32 * self.files.len());
        for f in &self.files {
            all.extend_from_slice(&f.digest);
        }
        sha256(&all).iter().map(|b| format!("{b:02x}")).collect()
    }

    /// `(file, unit)` pairs of `kind` at least `tile` sites in both
    /// dimensions.
    pub fn tileable(&self, kind: UnitKind, tile: usize) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (fi, f) in self.files.iter().enumerate() {
            for (ui, (k, s)) in f.units.iter().enumerate() {
                if *k == kind && s[0].height >= tile && s[0].width >= tile {
                    out.push((fi, ui));
                }
            }
        }
        out
    }

    /// Uniformly chosen unit and site-aligned offset.
    pub fn sample_tile(&self, pool: &[(usize, usize)], tile: usize, rng: &mut impl Rng) -> Tile {
        let (file, unit) = pool[rng.gen_range(0..pool.len())];
        let stack = &self.files[file].units[unit].1;
        let row = rng.gen_range(0..=stack[0].height - tile);
        let col = rng.gen_range(0..=stack[0].width - tile);
        let stack = stack
            .iter()
            .map(|img| {
                let mut t = DctImage::zeros(tile, tile, img.component_id);
                for i in 0..tile {
                    let src = ((row + i) * img.width + col) * 64;
                    t.data[i * tile * 64..(i + 1) * tile * 64].copy_from_slice(&img.data[src..src + tile * 64]);
                }
                t
            })
            .collect();
        Tile { file, unit, row, col, stack }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    LossyPretrain,
    Joint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub phase: Phase,
    pub lambda: f64,
    pub batch_size: usize,
    /// Tile edge in DCT sites; a multiple of 16.
    pub tile_sites: usize,
    pub steps: u64,
    pub lr_initial: f64,
    pub lr_decayed: f64,
    /// Fraction of `steps` after which `lr_decayed` applies.
    pub decay_fraction: f64,
    pub seed: u64,
    /// Joint training without a pretrained model.
    pub from_scratch: bool,
    pub log_every: u64,
    pub checkpoint: Option<PathBuf>,
    pub checkpoint_every: u64,
}

impl TrainConfig {
    pub fn new(phase: Phase) -> Self {
        TrainConfig {
            phase,
            lambda: 0.03,
            batch_size: 4,
            tile_sites: 32,
            steps: 2000,
            lr_initial: 1e-4,
            lr_decayed: 1e-5,
            decay_fraction: 0.9,
            seed: 0,
            from_scratch: false,
            log_every: 50,
            checkpoint: None,
            checkpoint_every: 500,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.into()));
        if !(self.lambda > 0.0) {
            return bad("lambda must be positive");
        }
        if self.batch_size == 0 || self.tile_sites == 0 || self.tile_sites % SITE_MULTIPLE != 0 {
            return bad("batch size must be positive and the tile a positive multiple of 16 sites");
        }
        if !(self.lr_initial > 0.0 && self.lr_decayed > 0.0) || !(0.0..=1.0).contains(&self.decay_fraction) {
            return bad("learning rates must be positive and the decay point in [0, 1]");
        }
        Ok(())
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        if (step as f64) < self.decay_fraction * self.steps as f64 {
            self.lr_initial
        } else {
            self.lr_decayed
        }
    }
}

/// `R_yz + R_r + λ·D`, with `R_r` left out during lossy pretraining.
pub fn joint_loss(r_yz: f64, r_r: f64, d_lossy: f64, lambda: f64, phase: Phase) -> f64 {
    match phase {
        Phase::LossyPretrain => r_yz + lambda * d_lossy,
        Phase::Joint => r_yz + r_r + lambda * d_lossy,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepLog {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    /// Latent bits per coefficient.
    pub rate_latent: f64,
    /// Residual bits per coefficient.
    pub rate_residual: f64,
    /// Mean squared error in coefficient units.
    pub distortion: f64,
}

/// Nodes of one training loss.
pub struct LossNodes {
    pub loss: Var,
    pub rate_latent: Option<Var>,
    pub rate_residual: Option<Var>,
    pub distortion: Option<Var>,
    /// Integer residual targets of the joint phase.
    pub residuals: Option<Vec<Vec<DctImage>>>,
}

/// Builds the loss of one batch of equally sized unit stacks. With
/// `noise_rng` the latents are perturbed as in training.
pub fn batch_loss<T: crate::nn::Real>(
    g: &mut Graph<T>,
    v: &[Var],
    unit: &UnitModel,
    batch: &[Vec<DctImage>],
    lambda: f64,
    phase: Phase,
    noise_rng: &mut impl Rng,
) -> Result<LossNodes, TrainError> {
    batch_loss_with_targets(g, v, unit, batch, lambda, phase, noise_rng, None)
}

/// [`batch_loss`] with the integer residuals supplied instead of derived
/// from the current reconstruction. The gradient is the same either way:
/// residual targets are constants of the graph.
#[allow(clippy::too_many_arguments)]
pub fn batch_loss_with_targets<T: crate::nn::Real>(
    g: &mut Graph<T>,
    v: &[Var],
    unit: &UnitModel,
    batch: &[Vec<DctImage>],
    lambda: f64,
    phase: Phase,
    noise_rng: &mut impl Rng,
    targets: Option<&[Vec<DctImage>]>,
) -> Result<LossNodes, TrainError> {
    let mut parts = Vec::with_capacity(batch.len());
    for stack in batch {
        parts.push(normalize::<T>(stack, &unit.stats)?);
    }
    let [_, c, h, w] = parts[0].shape;
    let mut data = Vec::with_capacity(batch.len() * c * h * w);
    for p in &parts {
        if p.shape != [1, c, h, w] {
            return Err(TrainError::InvalidConfig("batch stacks differ in shape".into()));
        }
        data.extend_from_slice(&p.data);
    }
    let x_norm = Tensor::from_vec([batch.len(), c, h, w], data)?;
    let n_coeff = x_norm.len() as f64;
    let x = g.constant(x_norm.clone());

    let mut terms = Vec::new();
    let (mut rate_latent, mut rate_residual, mut distortion, mut used) = (None, None, None, None);
    let x_hat = match &unit.lossy {
        Some(net) => {
            let f = net.forward_train(g, v, x, noise_rng)?;
            let bits = g.add(f.bits_y, f.bits_z)?;
            let r = g.scale(bits, 1.0 / n_coeff);
            let weights: Vec<f64> = unit.stats.std.iter().map(|s| s * s).collect();
            let d = g.weighted_mse(f.x_hat, x_norm, &weights)?;
            terms.push(r);
            terms.push(g.scale(d, lambda));
            rate_latent = Some(r);
            distortion = Some(d);
            f.x_hat
        }
        None => {
            if phase == Phase::LossyPretrain {
                return Err(TrainError::InvalidConfig("direct-mode models have no lossy phase".into()));
            }
            g.constant(Tensor::zeros([batch.len(), c, h, w]))
        }
    };
    if phase == Phase::Joint {
        let residuals = match targets {
            Some(t) => t.to_vec(),
            None => integer_residuals(g.value(x_hat), unit, batch)?,
        };
        let bits = unit.residual.forward_train(g, v, x_hat, &residuals, &unit.stats.std)?;
        let r = g.scale(bits, 1.0 / n_coeff);
        terms.push(r);
        rate_residual = Some(r);
        used = Some(residuals);
    }
    let mut loss = terms[0];
    for &t in &terms[1..] {
        loss = g.add(loss, t)?;
    }
    Ok(LossNodes { loss, rate_latent, rate_residual, distortion, residuals: used })
}

/// `x − round(denormalize(x̂))` per batch item; zero reconstruction when
/// there is no lossy branch.
fn integer_residuals<T: crate::nn::Real>(
    x_hat: &Tensor<T>,
    unit: &UnitModel,
    batch: &[Vec<DctImage>],
) -> Result<Vec<Vec<DctImage>>, TrainError> {
    let [_, c, h, w] = x_hat.shape;
    let mut out = Vec::with_capacity(batch.len());
    for (b, stack) in batch.iter().enumerate() {
        let ids: Vec<u8> = stack.iter().map(|d| d.component_id).collect();
        let mut r = stack.clone();
        if unit.lossy.is_some() {
            let one = Tensor::from_vec([1, c, h, w], x_hat.data[b * c * h * w..(b + 1) * c * h * w].to_vec())?;
            let recon = reconstruct_int(&one, &unit.stats, &ids)?;
            for (ri, xi) in r.iter_mut().zip(&recon) {
                ri.data.iter_mut().zip(&xi.data).for_each(|(a, b)| *a -= b);
            }
        }
        out.push(r);
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub log: Vec<StepLog>,
}

/// Fresh model for `data`: one unit per kind present in the corpus.
pub fn initial_model(model_config: &ModelConfig, data: &Dataset, seed: u64) -> Result<Model, TrainError> {
    let cfg = ModelConfig { units: data.kinds(), ..model_config.clone() };
    let stats = data.stats.iter().map(|(_, s)| s.clone()).collect();
    Ok(Model::new(cfg, stats, seed)?)
}

/// Runs `cfg.steps` Adam steps on `init` (or a fresh model built from
/// `model_config` when allowed). Unit kinds are visited round-robin.
pub fn train(
    cfg: &TrainConfig,
    model_config: &ModelConfig,
    data: &Dataset,
    init: Option<Model>,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    let mut model = match init {
        Some(m) => m,
        None if cfg.phase == Phase::LossyPretrain || cfg.from_scratch || model_config.direct => {
            initial_model(model_config, data, cfg.seed)?
        }
        None => return Err(TrainError::MissingPretrain),
    };
    if model.config.direct && cfg.phase == Phase::LossyPretrain {
        return Err(TrainError::InvalidConfig("direct-mode models have no lossy phase".into()));
    }
    for u in &model.units {
        model.store.set_trainable(&UnitModel::residual_prefix(u.kind), cfg.phase == Phase::Joint);
    }
    let pools: Vec<(usize, Vec<(usize, usize)>)> = model
        .units
        .iter()
        .enumerate()
        .map(|(i, u)| (i, data.tileable(u.kind, cfg.tile_sites)))
        .filter(|(_, p)| !p.is_empty())
        .collect();
    if pools.is_empty() {
        return Err(TrainError::InvalidConfig(format!("no unit is at least {} sites in both dimensions", cfg.tile_sites)));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = AdamState::new(&model.store);
    let mut log = Vec::with_capacity(cfg.steps as usize);
    for step in 0..cfg.steps {
        let (ui, pool) = &pools[step as usize % pools.len()];
        let batch: Vec<Vec<DctImage>> =
            (0..cfg.batch_size).map(|_| data.sample_tile(pool, cfg.tile_sites, &mut rng).stack).collect();
        let mut g = Graph::<f32>::new();
        let v = model.store.bind(&mut g);
        let nodes = batch_loss(&mut g, &v, &model.units[*ui], &batch, cfg.lambda, cfg.phase, &mut rng)?;
        let scalar = |n: Option<Var>| n.map_or(0.0, |n| g.value(n).data[0] as f64);
        let entry = StepLog {
            step,
            lr: cfg.lr_at(step),
            loss: scalar(Some(nodes.loss)),
            rate_latent: scalar(nodes.rate_latent),
            rate_residual: scalar(nodes.rate_residual),
            distortion: scalar(nodes.distortion),
        };
        if !entry.loss.is_finite() {
            return Err(TrainError::NonFiniteLoss { step, last_good: Box::new(model) });
        }
        g.backward(nodes.loss);
        let grads = model.store.grads(&g, &v);
        if grads.iter().flatten().any(|t| !t.all_finite()) {
            return Err(TrainError::NonFiniteLoss { step, last_good: Box::new(model) });
        }
        adam_step(&mut model.store, &grads, &mut adam, entry.lr)?;
        if cfg.log_every > 0 && (step % cfg.log_every == 0 || step + 1 == cfg.steps) {
            log::info!(
                "step {step} loss {:.4} latent {:.4} residual {:.4} mse {:.3}",
                entry.loss,
                entry.rate_latent,
                entry.rate_residual,
                entry.distortion
            );
        }
        log.push(entry);
        match cfg.phase {
            Phase::LossyPretrain => model.meta.lossy_steps += 1,
            Phase::Joint => model.meta.joint_steps += 1,
        }
        if let Some(path) = &cfg.checkpoint {
            if cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 {
                finish_meta(&mut model, cfg, data, &log);
                model.save(path).map_err(|source| TrainError::Io { path: path.clone(), source })?;
            }
        }
    }
    for u in &model.units {
        model.store.set_trainable(&UnitModel::residual_prefix(u.kind), true);
    }
    finish_meta(&mut model, cfg, data, &log);
    if let Some(path) = &cfg.checkpoint {
        model.save(path).map_err(|source| TrainError::Io { path: path.clone(), source })?;
    }
    Ok(TrainOutcome { model, log })
}

fn finish_meta(model: &mut Model, cfg: &TrainConfig, data: &Dataset, log: &[StepLog]) {
    model.meta.seed = cfg.seed;
    model.meta.corpus_digest = data.digest();
    model.meta.corpus_files = data.files.len();
    model.meta.lambda = cfg.lambda;
    let tail = &log[log.len().saturating_sub(10)..];
    model.meta.final_loss = (!tail.is_empty()).then(|| tail.iter().map(|s| s.loss).sum::<f64>() / tail.len() as f64);
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn joint_loss_is_the_weighted_sum() {
        assert_eq!(joint_loss(0.0, 0.0, 0.0, 0.03, Phase::Joint), 0.0);
        assert!((joint_loss(1.0, 2.0, 100.0, 0.03, Phase::Joint) - 6.0).abs() < 1e-12);
        assert!((joint_loss(1.0, 2.0, 100.0, 0.03, Phase::LossyPretrain) - 4.0).abs() < 1e-12);
    }

    #[test]
    fn schedule_decays_at_the_fraction() {
        let cfg = TrainConfig { steps: 100, ..TrainConfig::new(Phase::Joint) };
        assert_eq!(cfg.lr_at(0), 1e-4);
        assert_eq!(cfg.lr_at(89), 1e-4);
        assert_eq!(cfg.lr_at(90), 1e-5);
    }

    #[test]
    fn config_validation() {
        let ok = TrainConfig::new(Phase::Joint);
        assert!(ok.validate().is_ok());
        assert!(TrainConfig { lambda: 0.0, ..ok.clone() }.validate().is_err());
        assert!(TrainConfig { tile_sites: 24, ..ok.clone() }.validate().is_err());
        assert!(TrainConfig { batch_size: 0, ..ok }.validate().is_err());
    }
}
