//! Adversarial training loop: discriminator-then-generator updates each
//! step, JSON-lines loss logging, resumable checkpoints, and the ablation
//! grid.
//!
//! Determinism contract: for a fixed seed, dataset, and configuration, the
//! loss sequence is bit-reproducible on one machine, and resuming from any
//! checkpoint continues exactly the sequence an uninterrupted run would have
//! produced. Everything that influences a step — parameter initialization,
//! per-epoch sample order, normalization statistics, optimizer moments — is
//! either derived from the seed or carried in the checkpoint.

use std::collections::HashMap;
use std::collections::VecDeque;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use ndarray::{ArrayD, Ix3, IxDyn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Tensor};
use crate::data::{AblationFlags, Image, LossWeights, ModelConfig, SixTuple};
use crate::losses::{self, FeatureExtractor, LossReport};
use crate::model::{envmap_tensor, image_tensor, Checkpoint, DiscriminatorNet, GeneratorNet};
use crate::nn::{param_seed, Adam, Forward, Mode, ParamSet};
use crate::store::{load_all, read_manifest};
use crate::{Error, Result};

/// Global gradient-norm bound applied when clipping is active.
pub const DEFAULT_CLIP_NORM: f64 = 10.0;
/// Image side at and above which clipping defaults to off.
pub const CLIP_FREE_SIDE: usize = 128;
/// Seed of the frozen perceptual extractor. Fixed (rather than tied to the
/// model seed) so perceptual losses are comparable across differently seeded
/// runs.
pub const EXTRACTOR_SEED: u64 = 0x9E11_F0CC;
/// File name of the step-indexed loss log inside the run directory.
pub const LOSS_LOG_FILE: &str = "loss_log.jsonl";
/// File name of the always-written final checkpoint.
pub const FINAL_CHECKPOINT_FILE: &str = "final.ckpt";

/// Gradient clipping policy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClipNorm {
    /// Clip at [`DEFAULT_CLIP_NORM`] below [`CLIP_FREE_SIDE`] pixels (small
    /// sides train at batch 1 with noisy gradients), off at larger sides.
    Auto,
    Off,
    Fixed(f64),
}

/// Everything a training run needs beyond the dataset itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub epochs: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_betas: (f64, f64),
    pub weights: LossWeights,
    pub seed: u64,
    /// Checkpoint every this many steps (a final checkpoint is always written).
    pub checkpoint_every: u64,
    /// Progress line every this many steps.
    pub log_every: u64,
    /// Optional hard cap on total steps; smoke tests and overfit runs stop
    /// here instead of completing every epoch.
    pub max_steps: Option<u64>,
    pub clip_norm: ClipNorm,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            epochs: 80,
            batch_size: 1,
            learning_rate: 1e-4,
            adam_betas: (0.9, 0.999),
            weights: LossWeights::default(),
            seed: 0,
            checkpoint_every: 500,
            log_every: 10,
            max_steps: None,
            clip_norm: ClipNorm::Auto,
        }
    }
}

impl TrainConfig {
    pub fn flags(&self) -> &AblationFlags {
        &self.model.ablation
    }

    /// Resolved clipping bound for this run.
    pub fn effective_clip(&self) -> Option<f64> {
        match self.clip_norm {
            ClipNorm::Auto => (self.model.image_side < CLIP_FREE_SIDE).then_some(DEFAULT_CLIP_NORM),
            ClipNorm::Off => None,
            ClipNorm::Fixed(v) => Some(v),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be positive".into()));
        }
        if self.batch_size != 1 {
            return Err(Error::Config(format!(
                "batch_size must be 1 (single-sample training graph), got {}",
                self.batch_size
            )));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be positive and finite, got {}",
                self.learning_rate
            )));
        }
        for (i, beta) in [self.adam_betas.0, self.adam_betas.1].iter().enumerate() {
            if !(0.0..1.0).contains(beta) {
                return Err(Error::Config(format!(
                    "adam beta{} must lie in [0, 1), got {beta}",
                    i + 1
                )));
            }
        }
        if self.checkpoint_every == 0 || self.log_every == 0 {
            return Err(Error::Config("checkpoint_every and log_every must be positive".into()));
        }
        if self.max_steps == Some(0) {
            return Err(Error::Config("max_steps must be positive when set".into()));
        }
        if let ClipNorm::Fixed(v) = self.clip_norm {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("clip norm must be positive and finite, got {v}")));
            }
        }
        Ok(())
    }
}

/// Mean over the most recent values (step-to-step noise smoothing for
/// progress lines).
#[derive(Debug, Clone)]
pub struct RollingMean {
    window: VecDeque<f64>,
    cap: usize,
}

impl RollingMean {
    pub fn new(cap: usize) -> Self {
        RollingMean { window: VecDeque::with_capacity(cap), cap: cap.max(1) }
    }

    pub fn push(&mut self, v: f64) {
        if self.window.len() == self.cap {
            self.window.pop_front();
        }
        self.window.push_back(v);
    }

    pub fn mean(&self) -> Option<f64> {
        if self.window.is_empty() {
            return None;
        }
        Some(self.window.iter().sum::<f64>() / self.window.len() as f64)
    }
}

/// Live training state: networks, parameters, optimizers, and caches.
pub struct TrainState {
    pub cfg: TrainConfig,
    pub step: u64,
    pub g_params: ParamSet<f32>,
    pub d_params: ParamSet<f32>,
    pub g_opt: Adam<f32>,
    pub d_opt: Adam<f32>,
    pub rolling: RollingMean,
    gen: GeneratorNet,
    disc: DiscriminatorNet,
    extractor: Option<FeatureExtractor>,
    /// Per-sample frozen-extractor features of the three perceptual targets
    /// (object map, background map, harmonized image).
    gt_features: HashMap<String, [Vec<ArrayD<f32>>; 3]>,
}

impl TrainState {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let gen = GeneratorNet::new(&cfg.model)?;
        let disc = DiscriminatorNet::new(&cfg.model);
        let g_params = gen.init_params::<f32>(cfg.seed);
        let d_params = disc.init_params::<f32>(cfg.seed);
        let (b1, b2) = cfg.adam_betas;
        Ok(TrainState {
            cfg: cfg.clone(),
            step: 0,
            g_params,
            d_params,
            g_opt: Adam::new(cfg.learning_rate, b1, b2),
            d_opt: Adam::new(cfg.learning_rate, b1, b2),
            rolling: RollingMean::new(50),
            gen,
            disc,
            extractor: cfg.flags().use_l_per.then(|| FeatureExtractor::new(EXTRACTOR_SEED)),
            gt_features: HashMap::new(),
        })
    }

    /// Snapshot for resumable checkpoints: both parameter sets (including
    /// normalization statistics), both optimizers' moments and step counters.
    pub fn checkpoint(&self) -> Checkpoint {
        let mut tensors: IndexMap<String, ArrayD<f32>> = IndexMap::new();
        for (name, p) in self.g_params.iter().chain(self.d_params.iter()) {
            tensors.insert(name.clone(), p.data.clone());
        }
        for (prefix, opt) in [("opt.g", &self.g_opt), ("opt.d", &self.d_opt)] {
            tensors.insert(
                format!("{prefix}.t"),
                ArrayD::from_elem(IxDyn(&[1]), opt.t as f32),
            );
            for (name, data) in opt.moments() {
                tensors.insert(format!("{prefix}.{name}"), data.clone());
            }
        }
        Checkpoint { config_digest: self.cfg.model.digest(), step: self.step, tensors }
    }

    /// Rebuild a state from a checkpoint written under the same model
    /// configuration.
    pub fn restore(cfg: &TrainConfig, ckpt: &Checkpoint) -> Result<Self> {
        let mut state = TrainState::new(cfg)?;
        let digest = cfg.model.digest();
        if ckpt.config_digest != digest {
            return Err(Error::Data(format!(
                "checkpoint digest {} does not match configuration digest {digest}",
                ckpt.config_digest
            )));
        }
        for params in [&mut state.g_params, &mut state.d_params] {
            let names: Vec<String> = params.names().cloned().collect();
            for name in names {
                let stored = ckpt
                    .tensors
                    .get(&name)
                    .ok_or_else(|| Error::Data(format!("checkpoint is missing tensor {name}")))?;
                let slot = params.get_mut(&name);
                if stored.shape() != slot.data.shape() {
                    return Err(Error::Data(format!(
                        "checkpoint tensor {name} has shape {:?}, expected {:?}",
                        stored.shape(),
                        slot.data.shape()
                    )));
                }
                slot.data = stored.clone();
            }
        }
        for (name, data) in &ckpt.tensors {
            for (prefix, opt) in
                [("opt.g.", &mut state.g_opt), ("opt.d.", &mut state.d_opt)]
            {
                if let Some(rest) = name.strip_prefix(prefix) {
                    if rest == "t" {
                        opt.t = data[[0]] as u64;
                    } else {
                        opt.restore_moment(rest, data.clone());
                    }
                }
            }
        }
        state.step = ckpt.step;
        Ok(state)
    }

    fn perceptual_targets(
        extractor: &FeatureExtractor,
        cache: &mut HashMap<String, [Vec<ArrayD<f32>>; 3]>,
        sample: &SixTuple,
    ) -> [Vec<ArrayD<f32>>; 3] {
        cache
            .entry(sample.sample_id.clone())
            .or_insert_with(|| {
                let tape: Tape<f32> = Tape::new();
                [
                    extractor.features_raw(&tape, &sample.object_illum.radiance),
                    extractor.features_raw(&tape, &sample.background_illum.radiance),
                    extractor.features_raw(&tape, &sample.gt_harmonized.pixels),
                ]
            })
            .clone()
    }

    /// One optimization step on one sample (plus its illumination partner
    /// when the feature-consistency loss is active): the discriminator
    /// updates first on (real, current fake), then the generator updates on
    /// the weighted total evaluated against the refreshed discriminator.
    pub fn train_step(&mut self, primary: &SixTuple, partner: Option<&SixTuple>) -> Result<LossReport> {
        let flags = *self.cfg.flags();
        let clip = self.cfg.effective_clip();
        let weights = self.cfg.weights;

        // Generator training graph. Built first so the discriminator can
        // score the current fake; the generator's own update happens last,
        // against the already-updated discriminator.
        let g_tape: Tape<f32> = Tape::new();
        let mut fg = Forward::new(&g_tape, &mut self.g_params, Mode::Train);
        let out =
            self.gen
                .forward(&mut fg, &primary.composite, &primary.object_mask, &primary.background_mask)?;

        let gt_obj = envmap_tensor(&g_tape, &primary.object_illum);
        let gt_bg = envmap_tensor(&g_tape, &primary.background_illum);
        let l_illu_t = losses::l_illu(&out.obj_illum_pred, &gt_obj, &out.bg_illum_pred, &gt_bg);

        let l_nonillu_t = if flags.use_l_nonillu {
            let p = partner.ok_or_else(|| {
                Error::Config(
                    "feature-consistency training needs a partner sample (paired dataset)".into(),
                )
            })?;
            let (_, split) =
                self.gen.encode_split(&mut fg, &p.composite, &p.object_mask, &p.background_mask)?;
            Some(losses::l_nonillu(&out.bottleneck.f_noillu_obj, &split.f_noillu_obj))
        } else {
            None
        };

        let l_per_t = if flags.use_l_per {
            let extractor = self.extractor.as_ref().expect("built when use_l_per is set");
            let targets = Self::perceptual_targets(extractor, &mut self.gt_features, primary);
            let preds = [&out.obj_illum_pred, &out.bg_illum_pred, &out.relit];
            let mut total: Option<Tensor<f32>> = None;
            for (pred, target) in preds.iter().zip(&targets) {
                let target_tensors: Vec<Tensor<f32>> =
                    target.iter().map(|a| g_tape.constant(a.clone())).collect();
                let term = losses::l_per_slot(extractor, pred, &target_tensors);
                total = Some(match total {
                    None => term,
                    Some(acc) => acc.add_t(&term),
                });
            }
            Some(total.expect("three slots"))
        } else {
            None
        };

        let (l_adv_d, l_adv_g_t) = if flags.use_l_adv {
            // Materialize the fake once; the discriminator update must not
            // backpropagate into the generator.
            let fake = Image {
                pixels: out
                    .relit
                    .to_array()
                    .into_dimensionality::<Ix3>()
                    .expect("relit output is 3 x side x side"),
            };
            let d_tape: Tape<f32> = Tape::new();
            let mut fd = Forward::new(&d_tape, &mut self.d_params, Mode::Train);
            let real_t = image_tensor(&d_tape, &primary.gt_harmonized);
            let fake_t = image_tensor(&d_tape, &fake);
            let d_real = self.disc.forward(&mut fd, &real_t, &primary.object_mask);
            let d_fake = self.disc.forward(&mut fd, &fake_t, &primary.object_mask);
            let (d_loss_t, _) = losses::l_adv(&d_real, &d_fake);
            let grads = d_tape.backward(&d_loss_t);
            let d_grads = fd.collect_grads(&grads);
            drop(fd);
            self.d_opt.step(&mut self.d_params, d_grads, clip);

            // Generator term through the refreshed discriminator; its
            // parameters join the generator tape as frozen leaves.
            let mut fdg = Forward::new(&g_tape, &mut self.d_params, Mode::Frozen);
            let d_fake_g = self.disc.forward(&mut fdg, &out.relit, &primary.object_mask);
            (d_loss_t.scalar() as f64, Some(losses::l_adv_generator(&d_fake_g)))
        } else {
            (0.0, None)
        };

        let l_total_t = losses::l_total(
            &l_illu_t,
            l_nonillu_t.as_ref(),
            l_per_t.as_ref(),
            l_adv_g_t.as_ref(),
            &weights,
            &flags,
        )?;
        let grads = g_tape.backward(&l_total_t);
        let g_grads = fg.collect_grads(&grads);
        drop(fg);
        self.g_opt.step(&mut self.g_params, g_grads, clip);

        self.step += 1;
        let report = LossReport {
            step: self.step,
            l_illu: l_illu_t.scalar() as f64,
            l_nonillu: l_nonillu_t.map(|t| t.scalar() as f64).unwrap_or(0.0),
            l_per: l_per_t.map(|t| t.scalar() as f64).unwrap_or(0.0),
            l_adv_g: l_adv_g_t.map(|t| t.scalar() as f64).unwrap_or(0.0),
            l_adv_d,
            l_total: l_total_t.scalar() as f64,
        };
        if let Some(term) = report.first_non_finite() {
            return Err(Error::Runtime(format!(
                "aborting: loss component {term} became non-finite at step {}",
                self.step
            )));
        }
        self.rolling.push(report.l_total);
        Ok(report)
    }
}

/// Deterministic per-epoch sample order.
pub fn epoch_order(seed: u64, epoch: u64, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(param_seed(seed, &format!("epoch.{epoch}")));
    order.shuffle(&mut rng);
    order
}

/// Where a finished run left its artifacts.
#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub final_checkpoint: PathBuf,
    pub log_path: PathBuf,
    pub steps_run: u64,
    pub last_report: Option<LossReport>,
}

/// Run (or resume) training over a stored dataset. Steps walk the manifest
/// order reshuffled once per epoch; every step appends one JSON line to the
/// loss log; checkpoints land every `checkpoint_every` steps and at the end.
pub fn fit(
    cfg: &TrainConfig,
    data_root: &Path,
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<FitOutcome> {
    cfg.validate()?;
    let manifest = read_manifest(data_root)?;
    if manifest.sample_ids.is_empty() {
        return Err(Error::Data("dataset manifest lists no samples".into()));
    }
    let samples = load_all(data_root, &manifest)?;
    let index_of: HashMap<&str, usize> =
        manifest.sample_ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
    let partner_of: Vec<Option<usize>> = if cfg.flags().use_l_nonillu {
        let pairs = manifest.pair_map.as_ref().ok_or_else(|| {
            Error::Data(
                "feature-consistency training needs a paired dataset (manifest has no pair map)"
                    .into(),
            )
        })?;
        manifest
            .sample_ids
            .iter()
            .map(|id| {
                pairs
                    .get(id)
                    .and_then(|p| index_of.get(p.as_str()).copied())
                    .ok_or_else(|| Error::Data(format!("sample {id} has no illumination partner")))
                    .map(Some)
            })
            .collect::<Result<_>>()?
    } else {
        vec![None; samples.len()]
    };

    let mut state = match resume {
        Some(path) => TrainState::restore(cfg, &Checkpoint::load(path)?)?,
        None => TrainState::new(cfg)?,
    };

    let n = samples.len() as u64;
    let mut total_steps = cfg.epochs.saturating_mul(n);
    if let Some(cap) = cfg.max_steps {
        total_steps = total_steps.min(cap);
    }

    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let log_path = out_dir.join(LOSS_LOG_FILE);
    let mut log = open_log(&log_path, state.step)?;

    let start_step = state.step;
    let mut current_epoch = u64::MAX;
    let mut order: Vec<usize> = Vec::new();
    let mut last_report = None;
    while state.step < total_steps {
        let epoch = state.step / n;
        if epoch != current_epoch {
            order = epoch_order(cfg.seed, epoch, samples.len());
            current_epoch = epoch;
        }
        let idx = order[(state.step % n) as usize];
        let primary = &samples[idx];
        let partner = partner_of[idx].map(|j| &samples[j]);
        let report = state.train_step(primary, partner)?;

        let line = serde_json::to_string(&report)
            .map_err(|e| Error::Runtime(format!("loss report serialization failed: {e}")))?;
        writeln!(log, "{line}").map_err(|e| Error::io(&log_path, e))?;
        log.flush().map_err(|e| Error::io(&log_path, e))?;

        if report.step % cfg.log_every == 0 {
            let rolling = state.rolling.mean().unwrap_or(report.l_total);
            eprintln!(
                "step {}/{total_steps}  l_total {:.6}  rolling {:.6}",
                report.step, report.l_total, rolling
            );
        }
        if report.step % cfg.checkpoint_every == 0 && report.step < total_steps {
            let path = out_dir.join(format!("ckpt-{:06}.ckpt", report.step));
            state.checkpoint().save(&path)?;
        }
        last_report = Some(report);
    }

    let final_path = out_dir.join(FINAL_CHECKPOINT_FILE);
    state.checkpoint().save(&final_path)?;
    Ok(FitOutcome {
        final_checkpoint: final_path,
        log_path,
        steps_run: state.step - start_step,
        last_report,
    })
}

/// Open the loss log for appending. On resume, records beyond the checkpoint
/// step (left over from a run that died between logging and checkpointing)
/// are dropped so the continued log matches an uninterrupted run.
fn open_log(path: &Path, resume_step: u64) -> Result<fs::File> {
    if resume_step > 0 && path.exists() {
        let body = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut kept = String::new();
        for line in body.lines() {
            let report: LossReport = serde_json::from_str(line)
                .map_err(|e| Error::Data(format!("{}: malformed log line: {e}", path.display())))?;
            if report.step <= resume_step {
                kept.push_str(line);
                kept.push('\n');
            }
        }
        fs::write(path, kept).map_err(|e| Error::io(path, e))?;
        fs::OpenOptions::new()
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))
    } else {
        fs::File::create(path).map_err(|e| Error::io(path, e))
    }
}

/// Parse a loss log written by [`fit`].
pub fn read_loss_log(path: &Path) -> Result<Vec<LossReport>> {
    let body = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    body.lines()
        .map(|line| {
            serde_json::from_str(line)
                .map_err(|e| Error::Data(format!("{}: malformed log line: {e}", path.display())))
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Ablation grid
// ---------------------------------------------------------------------------

/// One row of the component-ablation study.
#[derive(Debug, Clone)]
pub struct AblationRow {
    pub label: &'static str,
    pub config: TrainConfig,
}

/// The ten study configurations, from the bare supervised baseline to the
/// full model, as flag settings over a shared base configuration.
pub fn ablation_matrix(base: &TrainConfig) -> Vec<AblationRow> {
    // (label, msa, iem, l_per, l_nonillu, l_adv)
    const ROWS: [(&str, bool, bool, bool, bool, bool); 10] = [
        ("basic", false, false, false, false, false),
        ("msa_iem", true, true, false, false, false),
        ("adv_iem", false, true, false, false, true),
        ("per_iem", false, true, true, false, false),
        ("per_nonillu_adv_iem", false, true, true, true, true),
        ("msa_adv_nonillu_iem", true, true, false, true, true),
        ("msa_per_nonillu_iem", true, true, true, true, false),
        ("msa_adv_per_iem", true, true, true, false, true),
        ("msa_per_nonillu_adv", true, false, true, true, true),
        ("full", true, true, true, true, true),
    ];
    ROWS.iter()
        .map(|&(label, use_msa, use_iem, use_l_per, use_l_nonillu, use_l_adv)| {
            let mut config = base.clone();
            config.model.ablation =
                AblationFlags { use_msa, use_iem, use_l_per, use_l_nonillu, use_l_adv };
            AblationRow { label, config }
        })
        .collect()
}

/// Find an ablation row by label or 1-based index.
pub fn ablation_row(base: &TrainConfig, selector: &str) -> Result<AblationRow> {
    let rows = ablation_matrix(base);
    if let Ok(i) = selector.parse::<usize>() {
        if (1..=rows.len()).contains(&i) {
            return Ok(rows[i - 1].clone());
        }
        return Err(Error::Config(format!(
            "ablation row index {i} out of range 1..={}",
            rows.len()
        )));
    }
    rows.iter()
        .find(|r| r.label == selector)
        .cloned()
        .ok_or_else(|| {
            let labels: Vec<&str> = rows.iter().map(|r| r.label).collect();
            Error::Config(format!(
                "unknown ablation row {selector:?}; expected 1..={} or one of {}",
                rows.len(),
                labels.join(", ")
            ))
        })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene;
    use crate::store::{write_manifest, write_sample, DatasetManifest, MANIFEST_VERSION};
    use std::collections::BTreeMap;

    fn tiny_config(side: usize, flags: AblationFlags) -> TrainConfig {
        TrainConfig {
            model: ModelConfig {
                image_side: side,
                base_channels: 2,
                ablation: flags,
                ..ModelConfig::default()
            },
            epochs: 1,
            seed: 7,
            checkpoint_every: 1000,
            log_every: 1000,
            ..TrainConfig::default()
        }
    }

    fn flags(msa: bool, iem: bool, per: bool, nonillu: bool, adv: bool) -> AblationFlags {
        AblationFlags {
            use_msa: msa,
            use_iem: iem,
            use_l_per: per,
            use_l_nonillu: nonillu,
            use_l_adv: adv,
        }
    }

    fn paired_tuples(seed: u64, side: usize) -> (SixTuple, SixTuple) {
        let (a, b) = scene::sample_paired_specs(seed, side).unwrap();
        (scene::render_six_tuple(&a).unwrap(), scene::render_six_tuple(&b).unwrap())
    }

    /// Write a tiny paired dataset; returns its ids in manifest order.
    fn write_tiny_dataset(root: &Path, pairs: usize, side: usize) -> Vec<String> {
        let mut ids = Vec::new();
        let mut pair_map = BTreeMap::new();
        for k in 0..pairs {
            let (a, b) = paired_tuples(5000 + k as u64, side);
            pair_map.insert(a.sample_id.clone(), b.sample_id.clone());
            pair_map.insert(b.sample_id.clone(), a.sample_id.clone());
            for t in [&a, &b] {
                write_sample(root, t).unwrap();
                ids.push(t.sample_id.clone());
            }
        }
        let manifest = DatasetManifest {
            version: MANIFEST_VERSION.into(),
            sample_ids: ids.clone(),
            image_side: side,
            envmap_shape: (16, 32),
            generator_config_digest: "test".into(),
            pair_map: Some(pair_map),
        };
        write_manifest(root, &manifest).unwrap();
        ids
    }

    #[test]
    fn config_validation_rejects_degenerate_settings() {
        let good = tiny_config(32, AblationFlags::all_off());
        good.validate().unwrap();
        let mut bad = good.clone();
        bad.epochs = 0;
        assert!(bad.validate().is_err());
        let mut bad = good.clone();
        bad.batch_size = 2;
        assert!(bad.validate().is_err());
        let mut bad = good.clone();
        bad.learning_rate = 0.0;
        assert!(bad.validate().is_err());
        let mut bad = good.clone();
        bad.adam_betas = (0.9, 1.0);
        assert!(bad.validate().is_err());
        let mut bad = good;
        bad.max_steps = Some(0);
        assert!(bad.validate().is_err());
    }

    #[test]
    fn clipping_defaults_on_for_small_sides_and_off_for_large() {
        let small = tiny_config(64, AblationFlags::all_off());
        assert_eq!(small.effective_clip(), Some(DEFAULT_CLIP_NORM));
        let mut large = tiny_config(128, AblationFlags::all_off());
        assert_eq!(large.effective_clip(), None);
        large.clip_norm = ClipNorm::Fixed(3.0);
        assert_eq!(large.effective_clip(), Some(3.0));
        large.clip_norm = ClipNorm::Off;
        assert_eq!(large.effective_clip(), None);
    }

    #[test]
    fn ablation_matrix_rows_match_the_study_grid() {
        let base = tiny_config(32, AblationFlags::all_off());
        let rows = ablation_matrix(&base);
        assert_eq!(rows.len(), 10);
        assert_eq!(rows[0].config.model.ablation, AblationFlags::all_off());
        assert_eq!(rows[9].config.model.ablation, AblationFlags::all_on());
        let expected = [
            flags(false, false, false, false, false),
            flags(true, true, false, false, false),
            flags(false, true, false, false, true),
            flags(false, true, true, false, false),
            flags(false, true, true, true, true),
            flags(true, true, false, true, true),
            flags(true, true, true, true, false),
            flags(true, true, true, false, true),
            flags(true, false, true, true, true),
            flags(true, true, true, true, true),
        ];
        for (row, want) in rows.iter().zip(expected) {
            assert_eq!(row.config.model.ablation, want, "row {}", row.label);
        }
        let labels: std::collections::HashSet<_> = rows.iter().map(|r| r.label).collect();
        assert_eq!(labels.len(), 10, "labels are unique");
        // Row selection by label and by 1-based index.
        assert_eq!(ablation_row(&base, "basic").unwrap().label, "basic");
        assert_eq!(ablation_row(&base, "10").unwrap().label, "full");
        assert!(ablation_row(&base, "nope").is_err());
        assert!(ablation_row(&base, "11").is_err());
    }

    #[test]
    fn one_step_changes_generator_parameters_only_without_adv() {
        let cfg = tiny_config(32, AblationFlags::all_off());
        let mut state = TrainState::new(&cfg).unwrap();
        let (primary, _) = paired_tuples(42, 32);
        let g_before = state.g_params.clone();
        let d_before = state.d_params.clone();
        let report = state.train_step(&primary, None).unwrap();
        assert!(report.is_finite());
        let g_changed = state
            .g_params
            .iter()
            .any(|(name, p)| p.data != g_before.get(name).data);
        assert!(g_changed, "generator parameters move");
        for (name, p) in state.d_params.iter() {
            assert_eq!(p.data, d_before.get(name).data, "discriminator untouched: {name}");
        }
        assert_eq!(report.l_adv_d, 0.0);
        assert_eq!(report.l_adv_g, 0.0);
        assert_eq!(report.l_nonillu, 0.0);
        assert_eq!(report.l_per, 0.0);
    }

    #[test]
    fn adversarial_flag_updates_the_discriminator() {
        let cfg = tiny_config(32, flags(false, false, false, false, true));
        let mut state = TrainState::new(&cfg).unwrap();
        let (primary, _) = paired_tuples(43, 32);
        let d_before = state.d_params.clone();
        let report = state.train_step(&primary, None).unwrap();
        let d_changed = state
            .d_params
            .iter()
            .any(|(name, p)| p.data != d_before.get(name).data);
        assert!(d_changed, "discriminator parameters move");
        assert!(report.l_adv_d > 0.0);
        assert!(report.l_adv_g > 0.0);
    }

    #[test]
    fn feature_consistency_needs_a_partner() {
        let cfg = tiny_config(32, flags(false, false, false, true, false));
        let mut state = TrainState::new(&cfg).unwrap();
        let (primary, _) = paired_tuples(44, 32);
        assert!(matches!(state.train_step(&primary, None), Err(Error::Config(_))));
    }

    #[test]
    fn paired_features_under_different_lights_produce_a_live_consistency_term() {
        // The object gate samples the mask on the bottleneck grid, so the
        // object must cover a grid point for the term to see any features.
        // At side 64 the 2x2 grid touches pixel (32, 32); scan for a scene
        // whose object covers it.
        let cfg = tiny_config(64, flags(false, false, false, true, false));
        let (primary, partner) = (100..)
            .map(|seed| paired_tuples(seed, 64))
            .find(|(a, _)| a.object_mask.pixels[[32, 32]] > 0.5)
            .expect("some scene covers the gate cell");
        let mut state = TrainState::new(&cfg).unwrap();
        let report = state.train_step(&primary, Some(&partner)).unwrap();
        assert!(report.l_nonillu > 0.0, "paired features differ under different lights");
    }

    #[test]
    fn perceptual_term_enters_the_weighted_total() {
        let cfg = tiny_config(32, flags(false, false, true, false, false));
        let mut state = TrainState::new(&cfg).unwrap();
        let (primary, _) = paired_tuples(45, 32);
        let report = state.train_step(&primary, None).unwrap();
        assert!(report.l_per > 0.0);
        let expected = cfg.weights.beta_illu * report.l_illu + cfg.weights.beta_per * report.l_per;
        let rel = (report.l_total - expected).abs() / expected.abs().max(1e-9);
        assert!(rel < 1e-5, "total {} vs recomputed {expected}", report.l_total);
    }

    #[test]
    fn loss_sequence_is_bit_reproducible() {
        let cfg = tiny_config(32, flags(false, true, false, true, true));
        let (primary, partner) = paired_tuples(46, 32);
        let run = || -> Vec<LossReport> {
            let mut state = TrainState::new(&cfg).unwrap();
            (0..3)
                .map(|_| state.train_step(&primary, Some(&partner)).unwrap())
                .collect()
        };
        let (a, b) = (run(), run());
        assert_eq!(a, b, "identical seeds give identical loss sequences");
    }

    #[test]
    fn checkpoint_restores_the_exact_training_trajectory() {
        let cfg = tiny_config(32, flags(false, false, false, false, true));
        let (primary, _) = paired_tuples(47, 32);
        let mut reference = TrainState::new(&cfg).unwrap();
        for _ in 0..2 {
            reference.train_step(&primary, None).unwrap();
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mid.ckpt");
        reference.checkpoint().save(&path).unwrap();
        let mut resumed = TrainState::restore(&cfg, &Checkpoint::load(&path).unwrap()).unwrap();
        assert_eq!(resumed.step, 2);
        let next_ref = reference.train_step(&primary, None).unwrap();
        let next_res = resumed.train_step(&primary, None).unwrap();
        assert_eq!(next_ref, next_res, "step 3 agrees after restore");
        // A digest mismatch is refused.
        let other = tiny_config(64, flags(false, false, false, false, true));
        assert!(matches!(
            TrainState::restore(&other, &Checkpoint::load(&path).unwrap()),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn fit_runs_epochs_times_samples_steps_and_logs_each() {
        let data = tempfile::tempdir().unwrap();
        write_tiny_dataset(data.path(), 1, 32);
        let out = tempfile::tempdir().unwrap();
        let mut cfg = tiny_config(32, AblationFlags::all_off());
        cfg.epochs = 2; // 2 samples x 2 epochs = 4 steps
        let outcome = fit(&cfg, data.path(), out.path(), None).unwrap();
        assert_eq!(outcome.steps_run, 4);
        let log = read_loss_log(&outcome.log_path).unwrap();
        assert_eq!(log.len(), 4);
        assert_eq!(log.iter().map(|r| r.step).collect::<Vec<_>>(), vec![1, 2, 3, 4]);
        assert!(outcome.final_checkpoint.exists());
        let ckpt = Checkpoint::load(&outcome.final_checkpoint).unwrap();
        assert_eq!(ckpt.step, 4);
    }

    #[test]
    fn max_steps_caps_a_run() {
        let data = tempfile::tempdir().unwrap();
        write_tiny_dataset(data.path(), 1, 32);
        let out = tempfile::tempdir().unwrap();
        let mut cfg = tiny_config(32, AblationFlags::all_off());
        cfg.epochs = 10;
        cfg.max_steps = Some(3);
        let outcome = fit(&cfg, data.path(), out.path(), None).unwrap();
        assert_eq!(outcome.steps_run, 3);
        assert_eq!(read_loss_log(&outcome.log_path).unwrap().len(), 3);
    }

    #[test]
    fn resumed_fit_reproduces_the_uninterrupted_log() {
        let data = tempfile::tempdir().unwrap();
        write_tiny_dataset(data.path(), 1, 32);
        let mut cfg = tiny_config(32, flags(false, true, false, true, true));
        cfg.epochs = 3; // 6 steps total

        let full_dir = tempfile::tempdir().unwrap();
        let full = fit(&cfg, data.path(), full_dir.path(), None).unwrap();
        let full_log = fs::read_to_string(&full.log_path).unwrap();

        let split_dir = tempfile::tempdir().unwrap();
        let mut first_half = cfg.clone();
        first_half.max_steps = Some(3);
        let part = fit(&first_half, data.path(), split_dir.path(), None).unwrap();
        assert_eq!(part.steps_run, 3);
        let resumed =
            fit(&cfg, data.path(), split_dir.path(), Some(&part.final_checkpoint)).unwrap();
        assert_eq!(resumed.steps_run, 3);
        let split_log = fs::read_to_string(&resumed.log_path).unwrap();
        assert_eq!(split_log, full_log, "continued log equals uninterrupted log");
    }

    #[test]
    fn fit_requires_pairs_when_feature_consistency_is_on() {
        let data = tempfile::tempdir().unwrap();
        // Unpaired dataset: same samples, no pair map.
        let (a, b) = paired_tuples(48, 32);
        write_sample(data.path(), &a).unwrap();
        write_sample(data.path(), &b).unwrap();
        let manifest = DatasetManifest {
            version: MANIFEST_VERSION.into(),
            sample_ids: vec![a.sample_id.clone(), b.sample_id.clone()],
            image_side: 32,
            envmap_shape: (16, 32),
            generator_config_digest: "test".into(),
            pair_map: None,
        };
        write_manifest(data.path(), &manifest).unwrap();
        let out = tempfile::tempdir().unwrap();
        let cfg = tiny_config(32, flags(false, false, false, true, false));
        assert!(matches!(fit(&cfg, data.path(), out.path(), None), Err(Error::Data(_))));
    }

    #[test]
    fn epoch_order_is_a_seeded_permutation() {
        let a = epoch_order(1, 0, 8);
        let b = epoch_order(1, 0, 8);
        assert_eq!(a, b);
        let mut sorted = a.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..8).collect::<Vec<_>>());
        assert_ne!(epoch_order(1, 1, 8), a, "epochs reshuffle");
    }

    #[test]
    fn rolling_mean_tracks_a_window() {
        let mut r = RollingMean::new(3);
        assert_eq!(r.mean(), None);
        for v in [1.0, 2.0, 3.0, 4.0] {
            r.push(v);
        }
        assert!((r.mean().unwrap() - 3.0).abs() < 1e-12, "mean of the last three");
    }
}
