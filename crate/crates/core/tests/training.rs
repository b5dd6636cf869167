use frs_core::data::{gen_synthetic, PatchSpec};
use frs_core::nn::{load_model, save_model, ModelConfig, Variant};
use frs_core::train::{evaluate, train_loop, TrainConfig};

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// The default desk network trained for 20 epochs on a handful of 64x64
/// synthetic images, then scored at two patch strides and reloaded.
#[test]
fn desk_run_learns_and_evaluates_consistently() {
    let train = gen_synthetic(10, 8, 64).unwrap();
    let cfg = TrainConfig {
        model: ModelConfig::default(),
        augment: None,
        patch: PatchSpec { size: 32, stride: 16, batch: 2 },
        epochs: 20,
        lr: 3e-3,
        patches_per_image: 4,
        ..TrainConfig::default()
    };
    let out = train_loop(&cfg, &train).unwrap();
    let (first, last) = (out.log[0].loss, out.log.last().unwrap().loss);
    // measured 0.699 -> 0.303 on this run
    assert!(last < 0.5 * first, "loss {first:.4} -> {last:.4}");

    let test = gen_synthetic(11, 2, 64).unwrap();
    let coarse = PatchSpec { size: 32, stride: 16, batch: 2 };
    let fine = PatchSpec { size: 32, stride: 8, batch: 2 };
    let (a, _) = evaluate(&out.model, &test, &coarse, 0.5, None).unwrap();
    let (b, _) = evaluate(&out.model, &test, &fine, 0.5, None).unwrap();
    assert!((a.micro.acc - b.micro.acc).abs() <= 0.005, "{} vs {}", a.micro.acc, b.micro.acc);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("desk.bin");
    save_model(&out.model, &path).unwrap();
    let (c, _) = evaluate(&load_model(&path).unwrap(), &test, &coarse, 0.5, None).unwrap();
    assert_eq!(a, c);
}

#[test]
fn ten_epochs_lower_the_loss_for_every_variant() {
    let data = gen_synthetic(20, 2, 32).unwrap();
    for variant in [Variant::Vanilla, Variant::F, Variant::FR, Variant::FS, Variant::FRS] {
        let drops: Vec<f64> = (0..20)
            .map(|seed| {
                let cfg = TrainConfig {
                    model: ModelConfig { variant, depth: 2, base_channels: 8, n_rot: 4, n_scale: 2, ..Default::default() },
                    augment: None,
                    patch: PatchSpec { size: 16, stride: 8, batch: 2 },
                    epochs: 10,
                    lr: 3e-3,
                    seed,
                    patches_per_image: 2,
                    ..TrainConfig::default()
                };
                let log = train_loop(&cfg, &data).unwrap().log;
                log[0].loss - log.last().unwrap().loss
            })
            .collect();
        let m = median(drops);
        assert!(m > 0.0, "{variant}: median loss drop {m}");
    }
}
