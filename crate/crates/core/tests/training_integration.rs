//! End-to-end training checks on micro configurations: analytic gradients
//! against central finite differences at f64, and a short overfit run whose
//! loss must strictly decrease.

use aeroseg_core::data::{generate_synthetic, to_batch, NormParams, SampleMode, SynthConfig};
use aeroseg_core::encoder::EncoderConfig;
use aeroseg_core::geometry::RamParams;
use aeroseg_core::mask::BinMask;
use aeroseg_core::model::{ModelConfig, SegModel};
use aeroseg_core::tensor::{ParamGroup, Tape};
use aeroseg_core::training::{fit, multi_scale_loss, AdamW, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

fn micro_model_config() -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            width: 32,
            blocks: 1,
            heads: 2,
            mlp_ratio: 2,
            pe_source_side: 64,
            shallow_tap: 0,
            in_channels: 3,
        },
        decoder_heads: 2,
        twoway_depth: 1,
        c_refine: 8,
        freeze_backbone: false,
    }
}

fn micro_ram() -> RamParams {
    RamParams {
        s_in: 64,
        ..RamParams::default()
    }
}

fn micro_batch(
    model: &SegModel<f64>,
    seed: u64,
) -> (aeroseg_core::model::PatchBatch<f64>, Vec<BinMask>) {
    let cfg = SynthConfig {
        images: 2,
        instances_per_image: 1,
        img_side: 160,
        size_min: 12.0,
        size_max: 40.0,
        noise: 0.05,
        ..SynthConfig::default()
    };
    let ds = generate_synthetic(&cfg, seed).unwrap();
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let samples: Vec<_> = ds
        .records
        .iter()
        .map(|rec| {
            aeroseg_core::data::build_patch_sample::<f64>(
                ds.image(rec.image_id).unwrap(),
                rec,
                &micro_ram(),
                &NormParams::default(),
                SampleMode::Eval,
                &mut rng,
            )
            .unwrap()
        })
        .collect();
    let gts = samples
        .iter()
        .map(|s| s.gt_mask.clone().unwrap())
        .collect();
    let _ = model;
    (to_batch(&samples), gts)
}

/// Total-loss gradients for a random parameter subset match central finite
/// differences at relative error < 1e-3 in f64.
#[test]
fn full_loss_gradcheck_vs_finite_differences() {
    let mut model: SegModel<f64> = SegModel::new(micro_model_config(), 17).unwrap();
    let (batch, gts) = micro_batch(&model, 5);
    let tcfg = TrainConfig::default();

    let eval_loss = |model: &SegModel<f64>| -> f64 {
        let mut tape = Tape::new(model.store());
        let pyr = model.forward(&mut tape, &batch).unwrap();
        let loss = multi_scale_loss(&mut tape, &pyr, &gts, &tcfg).unwrap();
        loss.total
    };

    // analytic gradients once
    let grads = {
        let mut tape = Tape::new(model.store());
        let pyr = model.forward(&mut tape, &batch).unwrap();
        let loss = multi_scale_loss(&mut tape, &pyr, &gts, &tcfg).unwrap();
        tape.backward(loss.total_id)
    };

    // sample >= 20 scalar coordinates spread over distinct tensors
    let mut rng = ChaCha12Rng::seed_from_u64(99);
    let n_params = model.store().len();
    let mut checked = 0usize;
    let mut attempts = 0usize;
    let h = 1e-6;
    while checked < 24 && attempts < 4000 {
        attempts += 1;
        let pid = rng.random_range(0..n_params);
        if !model.store().trainable(pid) {
            continue;
        }
        let numel = model.store().value(pid).numel();
        let j = rng.random_range(0..numel);
        let analytic = grads
            .get(pid)
            .map(|g| g.data()[j])
            .unwrap_or(0.0);
        let orig = model.store().value(pid).data()[j];
        model.store_mut().value_mut(pid).data_mut()[j] = orig + h;
        let up = eval_loss(&model);
        model.store_mut().value_mut(pid).data_mut()[j] = orig - h;
        let down = eval_loss(&model);
        model.store_mut().value_mut(pid).data_mut()[j] = orig;
        let fd = (up - down) / (2.0 * h);
        if fd.abs() < 1e-7 && analytic.abs() < 1e-7 {
            continue; // both zero: uninformative coordinate
        }
        let rel = (fd - analytic).abs() / fd.abs().max(analytic.abs()).max(1e-6);
        assert!(
            rel < 1e-3,
            "param {} ({}), elem {j}: fd={fd:.6e} analytic={analytic:.6e} rel={rel:.3e}",
            pid,
            model.store().entry(pid).name
        );
        checked += 1;
    }
    assert!(checked >= 20, "only {checked} informative coordinates checked");
}

/// A fixed 8-sample batch must overfit: loss strictly decreases over the
/// first training steps.
#[test]
fn overfit_loss_decreases() {
    let mut model: SegModel<f64> = SegModel::new(micro_model_config(), 3).unwrap();
    let cfg = SynthConfig {
        images: 8,
        instances_per_image: 1,
        img_side: 160,
        size_min: 12.0,
        size_max: 40.0,
        noise: 0.05,
        ..SynthConfig::default()
    };
    let ds = generate_synthetic(&cfg, 7).unwrap();
    let mut rng = ChaCha12Rng::seed_from_u64(2);
    let samples: Vec<_> = ds
        .records
        .iter()
        .map(|rec| {
            aeroseg_core::data::build_patch_sample::<f64>(
                ds.image(rec.image_id).unwrap(),
                rec,
                &micro_ram(),
                &NormParams::default(),
                SampleMode::Eval,
                &mut rng,
            )
            .unwrap()
        })
        .collect();
    let batch = to_batch(&samples);
    let gts: Vec<BinMask> = samples.iter().map(|s| s.gt_mask.clone().unwrap()).collect();

    let tcfg = TrainConfig {
        lr_decoder: 1e-3,
        lr_refine: 2e-3,
        lr_backbone: Some(1e-3),
        ..TrainConfig::default()
    };
    let mut opt = AdamW::new(model.store(), 0.0);
    let mut first = f64::NAN;
    let mut last = f64::NAN;
    let mut prev = f64::INFINITY;
    let mut monotone_violations = 0;
    for step in 0..50 {
        let (loss_val, mut grads) = {
            let mut tape = Tape::new(model.store());
            let pyr = model.forward(&mut tape, &batch).unwrap();
            let loss = multi_scale_loss(&mut tape, &pyr, &gts, &tcfg).unwrap();
            (loss.total, tape.backward(loss.total_id))
        };
        if step == 0 {
            first = loss_val;
        }
        last = loss_val;
        if loss_val >= prev {
            monotone_violations += 1;
        }
        prev = loss_val;
        opt.apply(model.store_mut(), &mut grads, |g| match g {
            ParamGroup::Refine => tcfg.lr_refine,
            ParamGroup::Buffer => 0.0,
            _ => tcfg.lr_decoder,
        });
    }
    assert!(
        last < first * 0.7,
        "loss did not drop enough: {first} -> {last}"
    );
    assert!(
        monotone_violations <= 15,
        "loss too unstable: {monotone_violations} increases in 50 steps"
    );
}

/// Seed-fixed runs produce identical step-0 losses; frozen groups never move.
#[test]
fn determinism_and_freeze_contract() {
    let mut cfg = micro_model_config();
    cfg.freeze_backbone = true;
    let run_step0 = || {
        let model: SegModel<f64> = SegModel::new(cfg.clone(), 11).unwrap();
        let (batch, gts) = micro_batch(&model, 9);
        let mut tape = Tape::new(model.store());
        let pyr = model.forward(&mut tape, &batch).unwrap();
        let loss = multi_scale_loss(&mut tape, &pyr, &gts, &TrainConfig::default()).unwrap();
        loss.total
    };
    let a = run_step0();
    let b = run_step0();
    assert_eq!(a, b, "step-0 loss must be seed-deterministic");

    // one optimizer step leaves the frozen backbone checksum unchanged
    let mut model: SegModel<f64> = SegModel::new(cfg, 11).unwrap();
    let before = model.store().group_checksum(ParamGroup::Backbone);
    let (batch, gts) = micro_batch(&model, 9);
    let mut grads = {
        let mut tape = Tape::new(model.store());
        let pyr = model.forward(&mut tape, &batch).unwrap();
        let loss = multi_scale_loss(&mut tape, &pyr, &gts, &TrainConfig::default()).unwrap();
        tape.backward(loss.total_id)
    };
    let mut opt = AdamW::new(model.store(), 0.01);
    opt.apply(model.store_mut(), &mut grads, |_| 1e-3);
    let after = model.store().group_checksum(ParamGroup::Backbone);
    assert_eq!(before, after);
}

/// `fit` writes metrics, checkpoints, and resumes with the optimizer step
/// count intact.
#[test]
fn fit_smoke_and_resume() {
    let dir = tempfile::tempdir().unwrap();
    let mut model: SegModel<f64> = SegModel::new(micro_model_config(), 1).unwrap();
    let cfg = SynthConfig {
        images: 6,
        instances_per_image: 1,
        img_side: 160,
        size_min: 12.0,
        size_max: 40.0,
        ..SynthConfig::default()
    };
    let train = generate_synthetic(&cfg, 1).unwrap();
    let val = generate_synthetic(
        &SynthConfig {
            images: 2,
            first_image_id: 1000,
            ..cfg.clone()
        },
        2,
    )
    .unwrap();
    let tcfg = TrainConfig {
        epochs: 2,
        batch_size: 3,
        lr_decoder: 1e-3,
        ..TrainConfig::default()
    };
    let ram = micro_ram();
    let report = fit(
        &mut model,
        &train,
        &val,
        &ram,
        &NormParams::default(),
        &tcfg,
        dir.path(),
        None,
    )
    .unwrap();
    assert_eq!(report.epochs_run, 2);
    assert_eq!(report.steps, 4); // 6 samples / batch 3 = 2 steps x 2 epochs
    assert!(report.metrics_path.exists());
    assert!(report.best_checkpoint.exists());
    assert!(report.last_checkpoint.exists());
    let lines: Vec<String> = std::fs::read_to_string(&report.metrics_path)
        .unwrap()
        .lines()
        .map(String::from)
        .collect();
    assert_eq!(lines.len(), 2, "one log line per epoch");
    for line in &lines {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v["val_miou"].is_number());
        assert!(v["lr_decoder"].is_number());
    }

    // resume for 1 more epoch: step count continues from 4
    let tcfg2 = TrainConfig { epochs: 3, ..tcfg };
    let mut model2: SegModel<f64> = SegModel::new(micro_model_config(), 1).unwrap();
    let report2 = fit(
        &mut model2,
        &train,
        &val,
        &ram,
        &NormParams::default(),
        &tcfg2,
        dir.path(),
        Some(&report.last_checkpoint),
    )
    .unwrap();
    assert_eq!(report2.steps, 6, "resume must continue the step count");
}
