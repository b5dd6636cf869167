//! Training loop and patch-stitched evaluation.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Adam, AdamConfig, Tape, Tensor};
use crate::bank::BankRecord;
use crate::data::{
    augment, extract_patches, gen_synthetic_with, gen_transformed, load_fundus_dir, random_patch, save_grey_png,
    stitch_patches, AugmentSpec, PatchSpec, Sample, SynthSpec,
};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_set, Report};
use crate::nn::{save_model, Mode, Model, ModelConfig};

/// Where samples come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    Synthetic { seed: u64, count: usize, spec: SynthSpec },
    /// Synthetic samples rotated and magnified after drawing; angles in
    /// radians.
    Transformed { seed: u64, count: usize, spec: SynthSpec, rotation: (f64, f64), scale: (f64, f64) },
    Directory { path: PathBuf },
}

impl DataSource {
    pub fn load(&self) -> Result<Vec<Sample>> {
        match self {
            DataSource::Synthetic { seed, count, spec } => gen_synthetic_with(*seed, *count, spec),
            DataSource::Transformed { seed, count, spec, rotation, scale } => {
                gen_transformed(*seed, *count, spec, *rotation, *scale)
            }
            DataSource::Directory { path } => load_fundus_dir(path),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    /// `None` trains without augmentation.
    pub augment: Option<AugmentSpec>,
    pub patch: PatchSpec,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
    /// Random patch draws per image in one epoch.
    pub patches_per_image: usize,
    pub checkpoint_dir: Option<PathBuf>,
    /// Save a checkpoint every this many epochs; 0 saves only the final one.
    pub checkpoint_every: usize,
    pub threshold: f64,
}

impl Default for TrainConfig {
    /// Desk scale: 20 epochs of 64x64 patches.
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            augment: Some(AugmentSpec::default()),
            patch: PatchSpec { size: 64, stride: 32, batch: 2 },
            epochs: 20,
            lr: 2e-4,
            seed: 0,
            patches_per_image: 8,
            checkpoint_dir: None,
            checkpoint_every: 0,
            threshold: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.patch.validate()?;
        if let Some(a) = &self.augment {
            a.validate()?;
        }
        if self.epochs == 0 || !(self.lr >= 0.0) || !self.lr.is_finite() || self.patches_per_image == 0 {
            return Err(Error::invalid("epochs and patches_per_image must be positive and lr non-negative"));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::invalid("threshold must lie in (0, 1)"));
        }
        let m = 1 << (self.model.depth - 1);
        if self.patch.size % m != 0 {
            return Err(Error::invalid(format!("patch size {} is not a multiple of {m}", self.patch.size)));
        }
        Ok(())
    }
}

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean per-pixel binary cross-entropy over the epoch.
    pub loss: f64,
    pub steps: usize,
    pub seconds: f64,
}

pub struct TrainOutcome {
    pub model: Model,
    pub log: Vec<EpochLog>,
}

/// Stacks `[C, H, W]` tensors into `[B, C, H, W]`.
pub fn stack(items: &[&Tensor]) -> Result<Tensor> {
    let first = items.first().ok_or_else(|| Error::invalid("nothing to stack"))?;
    let mut shape = vec![items.len()];
    shape.extend_from_slice(first.shape());
    let mut data = Vec::with_capacity(items.len() * first.len());
    for t in items {
        if t.shape() != first.shape() {
            return Err(Error::shape("stacked tensors differ in shape"));
        }
        data.extend_from_slice(t.data());
    }
    Tensor::new(shape, data)
}

fn dump_batch(dir: &Path, x: &Tensor, y: &Tensor) -> Result<()> {
    fs::create_dir_all(dir)?;
    BankRecord::dense(x.clone()).write_to(fs::File::create(dir.join("nonfinite_input.bin"))?)?;
    BankRecord::dense(y.clone()).write_to(fs::File::create(dir.join("nonfinite_target.bin"))?)
}

fn range(t: &Tensor) -> (f64, f64) {
    t.data().iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
}

/// Trains a fresh model on `samples`. Each epoch draws
/// `images x patches_per_image` random patches with replacement.
pub fn train_loop(cfg: &TrainConfig, samples: &[Sample]) -> Result<TrainOutcome> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    let mut model = Model::new(cfg.model.clone(), cfg.seed)?;
    let mut adam = Adam::new(AdamConfig { lr: cfg.lr, ..AdamConfig::default() });
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_da7a);
    let draws = samples.len() * cfg.patches_per_image;
    let batch = cfg.patch.batch;
    let pixels = (cfg.patch.size * cfg.patch.size) as f64;
    let mut log = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        let (mut loss_sum, mut seen, mut steps) = (0.0, 0, 0);
        while seen < draws {
            let b = batch.min(draws - seen);
            let mut images = Vec::with_capacity(b);
            let mut labels = Vec::with_capacity(b);
            let mut picks = Vec::with_capacity(b);
            for _ in 0..b {
                let idx = rng.gen_range(0..samples.len());
                picks.push(idx);
                let s = match &cfg.augment {
                    Some(a) => augment(&samples[idx], a, &mut rng)?,
                    None => samples[idx].clone(),
                };
                let p = random_patch(&s, cfg.patch.size, &mut rng);
                images.push(p.image);
                labels.push(p.label);
            }
            let x = stack(&images.iter().collect::<Vec<_>>())?;
            let y = stack(&labels.iter().collect::<Vec<_>>())?;

            let tape = Tape::new();
            let fwd = model.forward(&tape, &x, Mode::Train)?;
            let loss = fwd.output.bce(&y, b)?;
            let value = loss.value().item();
            if !value.is_finite() {
                if let Some(dir) = &cfg.checkpoint_dir {
                    dump_batch(dir, &x, &y)?;
                }
                let (lo, hi) = range(&x);
                return Err(Error::NonFiniteLoss {
                    epoch,
                    step: steps,
                    detail: format!("images {picks:?}, input range [{lo}, {hi}], loss {value}"),
                });
            }
            let grads = tape.backward(loss)?;
            let g: Vec<Tensor> = fwd.params.iter().map(|v| grads.get_or_zeros(*v)).collect();
            let mut values: Vec<&mut Tensor> = model.params.iter_mut().map(|p| &mut p.value).collect();
            adam.step(&mut values, &g)?;
            model.update_running(&fwd.stats);

            loss_sum += value * b as f64 / pixels;
            seen += b;
            steps += 1;
        }
        let entry = EpochLog { epoch, loss: loss_sum / draws as f64, steps, seconds: start.elapsed().as_secs_f64() };
        log::info!("epoch {epoch}: loss {:.6} ({:.1}s)", entry.loss, entry.seconds);
        log.push(entry);
        if let Some(dir) = &cfg.checkpoint_dir {
            if cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0 && epoch < cfg.epochs {
                fs::create_dir_all(dir)?;
                save_model(&model, &dir.join(format!("epoch{epoch:04}.bin")))?;
            }
        }
    }
    if let Some(dir) = &cfg.checkpoint_dir {
        fs::create_dir_all(dir)?;
        save_model(&model, &dir.join("final.bin"))?;
    }
    Ok(TrainOutcome { model, log })
}

/// Log CSV without timings, so that reruns compare bit for bit.
pub fn loss_csv(log: &[EpochLog]) -> String {
    let mut s = String::from("epoch,loss,steps\n");
    for e in log {
        s.push_str(&format!("{},{:.17e},{}\n", e.epoch, e.loss, e.steps));
    }
    s
}

pub fn timing_csv(log: &[EpochLog]) -> String {
    let mut s = String::from("epoch,seconds\n");
    for e in log {
        s.push_str(&format!("{},{:.3}\n", e.epoch, e.seconds));
    }
    s
}

/// Probability map `[1, H, W]` of one image, stitched from overlapping
/// patches predicted in batches of `p.batch`.
pub fn predict_image(model: &Model, image: &Tensor, p: &PatchSpec) -> Result<Tensor> {
    let m = model.size_multiple();
    if p.size % m != 0 {
        return Err(Error::invalid(format!("patch size {} is not a multiple of {m}", p.size)));
    }
    let patches = extract_patches(image, p)?;
    let mut out = Vec::with_capacity(patches.len());
    for chunk in patches.chunks(p.batch) {
        let x = stack(&chunk.iter().map(|q| &q.data).collect::<Vec<_>>())?;
        let prob = model.predict(&x)?;
        let plane = p.size * p.size;
        for (q, d) in chunk.iter().zip(prob.data().chunks(plane)) {
            out.push(crate::data::Patch { y: q.y, x: q.x, data: Tensor::new(vec![1, p.size, p.size], d.to_vec())? });
        }
    }
    stitch_patches(&out, image.shape()[1], image.shape()[2])
}

/// Predicts every sample and scores the stitched maps inside the FOV.
/// Probability maps are written as PNGs when `dump` is given.
pub fn evaluate(
    model: &Model,
    samples: &[Sample],
    p: &PatchSpec,
    threshold: f64,
    dump: Option<&Path>,
) -> Result<(Report, Vec<Tensor>)> {
    if samples.is_empty() {
        return Err(Error::invalid("cannot evaluate an empty dataset"));
    }
    if model.config.input_channels != 3 {
        return Err(Error::invalid(format!(
            "model expects {} input channels, samples have 3",
            model.config.input_channels
        )));
    }
    let mut items = Vec::with_capacity(samples.len());
    let mut maps = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let prob = predict_image(model, &s.image, p)?;
        if let Some(dir) = dump {
            fs::create_dir_all(dir)?;
            save_grey_png(&prob, &dir.join(format!("prob{i:04}.png")))?;
        }
        items.push((prob.clone(), s.label.clone(), s.fov.clone()));
        maps.push(prob);
    }
    Ok((evaluate_set(&items, threshold)?, maps))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_synthetic;
    use crate::nn::Variant;

    fn tiny(variant: Variant) -> TrainConfig {
        TrainConfig {
            model: ModelConfig { variant, depth: 2, base_channels: 8, n_rot: 4, n_scale: 2, ..Default::default() },
            augment: None,
            patch: PatchSpec { size: 32, stride: 16, batch: 2 },
            epochs: 2,
            patches_per_image: 2,
            ..Default::default()
        }
    }

    #[test]
    fn zero_lr_keeps_parameters() {
        let data = gen_synthetic(0, 2, 32).unwrap();
        let cfg = TrainConfig { lr: 0.0, ..tiny(Variant::FRS) };
        let out = train_loop(&cfg, &data).unwrap();
        let fresh = Model::new(cfg.model.clone(), cfg.seed).unwrap();
        assert_eq!(out.model.params, fresh.params);
    }

    #[test]
    fn same_seed_same_log() {
        let data = gen_synthetic(1, 2, 32).unwrap();
        let cfg = tiny(Variant::Vanilla);
        let a = train_loop(&cfg, &data).unwrap();
        let b = train_loop(&cfg, &data).unwrap();
        assert_eq!(loss_csv(&a.log), loss_csv(&b.log));
        assert_eq!(a.model.params, b.model.params);
        assert_eq!(a.log[0].steps, 2);
    }

    #[test]
    fn empty_inputs_are_rejected() {
        assert!(train_loop(&tiny(Variant::F), &[]).is_err());
        let m = Model::new(tiny(Variant::F).model, 0).unwrap();
        assert!(evaluate(&m, &[], &PatchSpec::default(), 0.5, None).is_err());
    }

    #[test]
    fn own_predictions_score_perfectly() {
        let cfg = tiny(Variant::FR);
        let m = Model::new(cfg.model.clone(), 2).unwrap();
        let mut data = gen_synthetic(2, 1, 40).unwrap();
        let p = PatchSpec { size: 32, stride: 16, batch: 2 };
        let prob = predict_image(&m, &data[0].image, &p).unwrap();
        data[0].label = prob.map(|v| if v >= 0.5 { 1.0 } else { 0.0 });
        let (r, _) = evaluate(&m, &data, &p, 0.5, None).unwrap();
        assert_eq!(r.micro.acc, 1.0);
    }
}
