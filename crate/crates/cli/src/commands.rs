use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use frs_core::bank::{BankPlan, BankRecord, GroupBank, GroupSpec, LiftingBank};
use frs_core::basis::{
    fit_coefficients, format_c_exp, make_enhanced_basis, make_fourier_basis, read_kernel_text, round_trip_error,
    write_kernel_text, BasisSet, Kernel,
};
use frs_core::data::{
    gen_synthetic_with, gen_transformed, load_fundus_dir, save_sample_png, AugmentSpec, PatchSpec, Sample, SynthSpec,
};
use frs_core::equivariance::{verify_layers, VerifyCase, VerifyConfig, VERIFY_CSV_HEADER};
use frs_core::metrics::{csv_row, Metrics, CSV_HEADER};
use frs_core::nn::{count_params as count, load_model, ModelConfig, Variant};
use frs_core::train::{evaluate, loss_csv, timing_csv, train_loop, TrainConfig};

use crate::config::{describe, resolve, unflatten, Flat};

pub enum Kind {
    Validation,
    Runtime,
}

pub struct Failure {
    pub kind: Kind,
    pub error: anyhow::Error,
}

type Outcome = Result<(), Failure>;

trait Classify<T> {
    fn invalid(self) -> Result<T, Failure>;
    fn runtime(self) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> Classify<T> for Result<T, E> {
    fn invalid(self) -> Result<T, Failure> {
        self.map_err(|e| Failure { kind: Kind::Validation, error: e.into() })
    }

    fn runtime(self) -> Result<T, Failure> {
        self.map_err(|e| Failure { kind: Kind::Runtime, error: e.into() })
    }
}

/// Creates `<out>/<sha256-12>-<utc timestamp>` and stores the resolved
/// config in it.
fn run_dir(out: &str, flat: &Flat) -> anyhow::Result<PathBuf> {
    let canonical = serde_json::to_string(flat)?;
    let hash = hex::encode(Sha256::digest(canonical.as_bytes()));
    let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%S%.3fZ");
    let dir = Path::new(out).join(format!("{}-{stamp}", &hash[..12]));
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    fs::write(dir.join("config.json"), serde_json::to_string_pretty(&unflatten(flat))?)?;
    println!("run directory: {}", dir.display());
    Ok(dir)
}

fn write(path: &Path, text: &str) -> anyhow::Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn basis_for(p: usize, h: f64, enhanced: bool) -> frs_core::Result<BasisSet> {
    if enhanced {
        make_enhanced_basis(p, h)
    } else {
        make_fourier_basis(p, h)
    }
}

// ---------------------------------------------------------------------------

/// Dataset selection shared by the data-consuming commands.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DataConfig {
    /// `synthetic` or `directory`.
    pub source: String,
    /// Root with images/, labels/ and optional fov/ for `directory`.
    pub path: String,
    pub seed: u64,
    pub count: usize,
    pub size: usize,
    /// `canonical` (thin, near-horizontal curves) or `varied`.
    pub preset: String,
    /// Post-hoc rotation range in degrees.
    pub rotation: (f64, f64),
    /// Post-hoc magnification range.
    pub scale: (f64, f64),
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: "synthetic".into(),
            path: String::new(),
            seed: 0,
            count: 16,
            size: 64,
            preset: "canonical".into(),
            rotation: (0.0, 0.0),
            scale: (1.0, 1.0),
        }
    }
}

impl DataConfig {
    fn spec(&self) -> anyhow::Result<SynthSpec> {
        let spec = match self.preset.as_str() {
            "canonical" => SynthSpec::canonical(self.size),
            "varied" => SynthSpec::new(self.size),
            other => bail!("unknown data.preset `{other}` (canonical, varied)"),
        };
        spec.validate()?;
        Ok(spec)
    }

    fn check(&self) -> anyhow::Result<()> {
        match self.source.as_str() {
            "synthetic" => {
                self.spec()?;
                if self.count == 0 {
                    bail!("data.count must be positive");
                }
                let (r, s) = (self.rotation, self.scale);
                if !(r.0 <= r.1) || !(s.0 <= s.1) || s.0 <= 0.0 {
                    bail!("data.rotation and data.scale need lo <= hi and a positive scale");
                }
                Ok(())
            }
            "directory" if self.path.is_empty() => bail!("data.path is required for a directory source"),
            "directory" => Ok(()),
            other => bail!("unknown data.source `{other}` (synthetic, directory)"),
        }
    }

    fn load(&self) -> anyhow::Result<Vec<Sample>> {
        if self.source == "directory" {
            let s = load_fundus_dir(Path::new(&self.path))?;
            if s.is_empty() {
                bail!("no samples found under {}", self.path);
            }
            return Ok(s);
        }
        let spec = self.spec()?;
        if self.rotation == (0.0, 0.0) && self.scale == (1.0, 1.0) {
            Ok(gen_synthetic_with(self.seed, self.count, &spec)?)
        } else {
            let rot = (self.rotation.0.to_radians(), self.rotation.1.to_radians());
            Ok(gen_transformed(self.seed, self.count, &spec, rot, self.scale)?)
        }
    }
}

// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitBasisConfig {
    pub p: usize,
    pub h: f64,
    pub enhanced: bool,
    /// Kernel text file to fit; empty fits `count` random kernels.
    pub kernel: String,
    pub count: usize,
    pub seed: u64,
    pub out: String,
}

impl Default for FitBasisConfig {
    fn default() -> Self {
        Self { p: 6, h: 0.5, enhanced: false, kernel: String::new(), count: 100, seed: 0, out: "runs".into() }
    }
}

pub fn fit_basis(file: Option<&Path>, overrides: &[String]) -> Outcome {
    let (cfg, flat) = resolve(&FitBasisConfig::default(), file, overrides).invalid()?;
    let basis = basis_for(cfg.p, cfg.h, cfg.enhanced).invalid()?;
    let dir = run_dir(&cfg.out, &flat).runtime()?;
    if !cfg.kernel.is_empty() {
        let target = fs::File::open(&cfg.kernel)
            .map_err(anyhow::Error::from)
            .and_then(|f| Ok(read_kernel_text(f)?))
            .with_context(|| format!("reading kernel {}", cfg.kernel))
            .runtime()?;
        let fit = fit_coefficients(&target, &basis).runtime()?;
        let text: String = fit.coefficients.iter().map(|c| format_c_exp(*c) + "\n").collect();
        write(&dir.join("coefficients.txt"), &text).runtime()?;
        let err = round_trip_error(&target, &basis).runtime()?;
        println!("round-trip max-abs error {err:.3e}");
        return Ok(());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut csv = String::from("index,max_abs_error\n");
    let mut worst: f64 = 0.0;
    for i in 0..cfg.count {
        let data = (0..cfg.p * cfg.p).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let target = Kernel::from_vec(cfg.p, data).runtime()?;
        let err = round_trip_error(&target, &basis).runtime()?;
        worst = worst.max(err);
        csv.push_str(&format!("{i},{err:.6e}\n"));
    }
    write(&dir.join("fit.csv"), &csv).runtime()?;
    println!("{} random kernels, worst round-trip max-abs error {worst:.3e}", cfg.count);
    Ok(())
}

// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenBankConfig {
    pub n_rot: usize,
    pub n_scale: usize,
    pub mu: f64,
    pub p: usize,
    pub h: f64,
    pub enhanced: bool,
    /// `lifting` or `group`.
    pub kind: String,
    pub c_out: usize,
    pub c_in: usize,
    pub seed: u64,
    /// Write expanded kernels as text; group banks dump the first output
    /// group element only.
    pub dump_kernels: bool,
    pub out: String,
}

impl Default for GenBankConfig {
    fn default() -> Self {
        Self {
            n_rot: 8,
            n_scale: 4,
            mu: 1.25,
            p: 6,
            h: 0.5,
            enhanced: true,
            kind: "lifting".into(),
            c_out: 1,
            c_in: 1,
            seed: 0,
            dump_kernels: true,
            out: "runs".into(),
        }
    }
}

fn dump(dir: &Path, name: String, k: &Kernel) -> anyhow::Result<()> {
    let mut buf = Vec::new();
    write_kernel_text(k, &mut buf)?;
    fs::write(dir.join(name), buf)?;
    Ok(())
}

pub fn gen_bank(file: Option<&Path>, overrides: &[String]) -> Outcome {
    let (cfg, flat) = resolve(&GenBankConfig::default(), file, overrides).invalid()?;
    let group = GroupSpec::new(cfg.n_rot, cfg.n_scale, cfg.mu, cfg.p, cfg.h).invalid()?;
    let basis = basis_for(cfg.p, cfg.h, cfg.enhanced).invalid()?;
    let plan = std::rc::Rc::new(BankPlan::new(group.clone(), basis).invalid()?);
    if cfg.kind != "lifting" && cfg.kind != "group" {
        return Err(anyhow!("unknown kind `{}` (lifting, group)", cfg.kind)).invalid();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let dir = run_dir(&cfg.out, &flat).runtime()?;
    let kdir = dir.join("kernels");
    if cfg.dump_kernels {
        fs::create_dir_all(&kdir).runtime()?;
    }
    let (rec, params) = if cfg.kind == "lifting" {
        let bank = LiftingBank::random(plan, cfg.c_out, cfg.c_in, &mut rng).invalid()?;
        if cfg.dump_kernels {
            for o in 0..cfg.c_out {
                for c in 0..cfg.c_in {
                    for a in 0..group.n_rot {
                        for b in 0..group.n_scale {
                            let k = bank.expanded_kernel(o, a, b, c);
                            dump(&kdir, format!("o{o}_c{c}_r{a}_s{b}.txt"), &k).runtime()?;
                        }
                    }
                }
            }
        }
        (BankRecord::lifting(&bank), bank.param_count())
    } else {
        let bank = GroupBank::random(plan, cfg.c_out, cfg.c_in, &mut rng).invalid()?;
        if cfg.dump_kernels {
            for o in 0..cfg.c_out {
                for c in 0..cfg.c_in {
                    for a2 in 0..group.n_rot {
                        for b2 in 0..group.n_scale {
                            let k = bank.expanded_kernel(o, 0, 0, c, a2, b2);
                            dump(&kdir, format!("o{o}_r0_s0_c{c}_r{a2}_s{b2}.txt"), &k).runtime()?;
                        }
                    }
                }
            }
        }
        (BankRecord::group(&bank), bank.param_count())
    };
    let f = fs::File::create(dir.join("bank.bin")).runtime()?;
    rec.write_to(f).runtime()?;
    println!("{} bank: {params} coefficients, kernel sizes {:?}", cfg.kind, group.kernel_sizes);
    Ok(())
}

// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct VerifyCommand {
    #[serde(flatten)]
    pub verify: VerifyConfig,
    pub out: String,
}

fn verify_defaults() -> VerifyCommand {
    VerifyCommand { verify: VerifyConfig::default(), out: "runs".into() }
}

pub fn verify(file: Option<&Path>, overrides: &[String]) -> Outcome {
    let (cfg, flat) = resolve(&verify_defaults(), file, overrides).invalid()?;
    GroupSpec::new(cfg.verify.n_rot, cfg.verify.n_scale, cfg.verify.mu, cfg.verify.p, cfg.verify.h).invalid()?;
    let dir = run_dir(&cfg.out, &flat).runtime()?;
    let rows = verify_layers(&cfg.verify, &VerifyCase::standard(cfg.verify.n_rot, cfg.verify.n_scale)).runtime()?;
    let mut csv = format!("{VERIFY_CSV_HEADER}\n");
    for r in &rows {
        csv.push_str(&r.csv());
        csv.push('\n');
    }
    write(&dir.join("verify.csv"), &csv).runtime()?;
    let mut keys: Vec<(String, String, i32)> = Vec::new();
    for r in &rows {
        let k = (r.layer.clone(), format!("{:.4}", r.theta_hat), r.s_hat);
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    for (layer, theta, s) in keys {
        let mut e: Vec<f64> = rows
            .iter()
            .filter(|r| r.layer == layer && format!("{:.4}", r.theta_hat) == theta && r.s_hat == s)
            .map(|r| r.error)
            .collect();
        e.sort_by(f64::total_cmp);
        println!("{layer:<9} theta={theta} s={s}: median {:.3e}, max {:.3e}", e[e.len() / 2], e[e.len() - 1]);
    }
    Ok(())
}

// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthCommand {
    pub data: DataConfig,
    pub out: String,
}

fn synth_defaults() -> SynthCommand {
    SynthCommand { data: DataConfig { count: 20, ..DataConfig::default() }, out: "runs".into() }
}

pub fn synth_data(file: Option<&Path>, overrides: &[String]) -> Outcome {
    let (cfg, flat) = resolve(&synth_defaults(), file, overrides).invalid()?;
    if cfg.data.source != "synthetic" {
        return Err(anyhow!("synth-data needs data.source = synthetic")).invalid();
    }
    cfg.data.check().invalid()?;
    let dir = run_dir(&cfg.out, &flat).runtime()?;
    let samples = cfg.data.load().runtime()?;
    let mut csv = String::from("stem,label_fraction\n");
    for (i, s) in samples.iter().enumerate() {
        let stem = format!("{i:04}");
        save_sample_png(s, &dir.join("samples"), &stem).runtime()?;
        csv.push_str(&format!("{stem},{:.6}\n", s.fov_label_fraction()));
    }
    write(&dir.join("samples.csv"), &csv).runtime()?;
    println!("wrote {} samples", samples.len());
    Ok(())
}

// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainCommand {
    pub model: ModelConfig,
    pub data: DataConfig,
    pub patch: PatchSpec,
    pub augment_enabled: bool,
    pub augment: AugmentSpec,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
    pub patches_per_image: usize,
    pub checkpoint_every: usize,
    pub threshold: f64,
    pub out: String,
}

fn train_defaults() -> TrainCommand {
    let t = TrainConfig::default();
    TrainCommand {
        model: t.model,
        data: DataConfig::default(),
        patch: t.patch,
        augment_enabled: t.augment.is_some(),
        augment: t.augment.unwrap_or_default(),
        epochs: t.epochs,
        lr: t.lr,
        seed: t.seed,
        patches_per_image: t.patches_per_image,
        checkpoint_every: t.checkpoint_every,
        threshold: t.threshold,
        out: "runs".into(),
    }
}

pub fn train(file: Option<&Path>, overrides: &[String]) -> Outcome {
    let (cfg, flat) = resolve(&train_defaults(), file, overrides).invalid()?;
    cfg.data.check().invalid()?;
    let mut tc = TrainConfig {
        model: cfg.model.clone(),
        augment: cfg.augment_enabled.then(|| cfg.augment.clone()),
        patch: cfg.patch,
        epochs: cfg.epochs,
        lr: cfg.lr,
        seed: cfg.seed,
        patches_per_image: cfg.patches_per_image,
        checkpoint_dir: None,
        checkpoint_every: cfg.checkpoint_every,
        threshold: cfg.threshold,
    };
    tc.validate().invalid()?;
    let samples = cfg.data.load().runtime()?;
    let dir = run_dir(&cfg.out, &flat).runtime()?;
    tc.checkpoint_dir = Some(dir.join("checkpoints"));
    let outcome = train_loop(&tc, &samples).runtime()?;
    write(&dir.join("loss.csv"), &loss_csv(&outcome.log)).runtime()?;
    write(&dir.join("timing.csv"), &timing_csv(&outcome.log)).runtime()?;
    let last = outcome.log.last().expect("at least one epoch");
    println!(
        "{}: {} parameters, final loss {:.6}, checkpoint {}",
        cfg.model.variant,
        outcome.model.param_count(),
        last.loss,
        dir.join("checkpoints/final.bin").display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalCommand {
    /// Model blob written by `train` (the `.json` manifest sits next to it).
    pub checkpoint: String,
    pub data: DataConfig,
    pub patch: PatchSpec,
    pub threshold: f64,
    /// Dataset column of the metrics CSV.
    pub dataset: String,
    /// Model column; empty uses the variant name.
    pub model_name: String,
    pub save_predictions: bool,
    pub out: String,
}

fn eval_defaults() -> EvalCommand {
    EvalCommand {
        checkpoint: String::new(),
        data: DataConfig { seed: 1, count: 8, ..DataConfig::default() },
        patch: PatchSpec { size: 64, stride: 32, batch: 2 },
        threshold: 0.5,
        dataset: "synthetic".into(),
        model_name: String::new(),
        save_predictions: false,
        out: "runs".into(),
    }
}

fn metrics_csv(dataset: &str, model: &str, m: &Metrics) -> String {
    format!("{CSV_HEADER}\n{}\n", csv_row(dataset, model, m))
}

pub fn eval(file: Option<&Path>, overrides: &[String]) -> Outcome {
    let (cfg, flat) = resolve(&eval_defaults(), file, overrides).invalid()?;
    if cfg.checkpoint.is_empty() {
        return Err(anyhow!("checkpoint is required")).invalid();
    }
    cfg.data.check().invalid()?;
    cfg.patch.validate().invalid()?;
    if !(cfg.threshold > 0.0 && cfg.threshold < 1.0) {
        return Err(anyhow!("threshold must lie in (0, 1)")).invalid();
    }
    let model = load_model(Path::new(&cfg.checkpoint))
        .with_context(|| format!("loading {}", cfg.checkpoint))
        .runtime()?;
    let samples = cfg.data.load().runtime()?;
    let dir = run_dir(&cfg.out, &flat).runtime()?;
    let dump = cfg.save_predictions.then(|| dir.join("predictions"));
    let (report, _) = evaluate(&model, &samples, &cfg.patch, cfg.threshold, dump.as_deref()).runtime()?;
    let name = if cfg.model_name.is_empty() { model.config.variant.name().to_string() } else { cfg.model_name.clone() };
    write(&dir.join("metrics_micro.csv"), &metrics_csv(&cfg.dataset, &name, &report.micro)).runtime()?;
    write(&dir.join("metrics_macro.csv"), &metrics_csv(&cfg.dataset, &name, &report.macro_avg)).runtime()?;
    let mut per = format!("{CSV_HEADER}\n");
    for (i, m) in report.per_image.iter().enumerate() {
        per.push_str(&csv_row(&format!("{}/{i:04}", cfg.dataset), &name, m));
        per.push('\n');
    }
    write(&dir.join("metrics_per_image.csv"), &per).runtime()?;
    print!("{}", metrics_csv(&cfg.dataset, &name, &report.micro));
    Ok(())
}

// ---------------------------------------------------------------------------

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

pub fn count_params(file: Option<&Path>, overrides: &[String]) -> Outcome {
    let (cfg, _) = resolve(&ModelConfig::full(Variant::FRS), file, overrides).invalid()?;
    let own = count(&cfg).invalid()?;
    let reference = count(&ModelConfig { variant: Variant::F, ..cfg.clone() }).invalid()?;
    println!("variant,total,intermediate");
    println!("{},{},{}", cfg.variant, own.total, own.intermediate);
    if cfg.variant != Variant::F {
        println!("{},{},{}", Variant::F, reference.total, reference.intermediate);
    }
    let g = gcd(own.intermediate, reference.intermediate).max(1);
    println!(
        "intermediate ratio {}/F = {}/{}",
        cfg.variant,
        own.intermediate / g,
        reference.intermediate / g
    );
    Ok(())
}

/// Key listings appended to each subcommand's `--help`.
pub fn help_sections() -> Vec<(&'static str, String)> {
    vec![
        ("fit-basis", describe(&FitBasisConfig::default())),
        ("gen-bank", describe(&GenBankConfig::default())),
        ("verify", describe(&verify_defaults())),
        ("synth-data", describe(&synth_defaults())),
        ("train", describe(&train_defaults())),
        ("eval", describe(&eval_defaults())),
        ("count-params", describe(&ModelConfig::full(Variant::FRS))),
    ]
}
