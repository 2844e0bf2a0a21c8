//! Desk-profile Deep Fusion V2 on a simulated blob cohort: the scan carries
//! the risk through the blob radius, the EHR columns carry it linearly.
//!
//! cargo run --release --example deep_fusion_desk [epochs]

use survfuse::fusion::{
    build_model, train, FusionConfig, FusionSample, Profile, TrainOptions, Variant,
};
use survfuse::survival::{concordance_index, make_time_grid, GridSize};
use survfuse::synthetic::{generate_tabular, generate_volumes, BlobSpec, SyntheticSpec};
use survfuse::volume::{preprocess, PreprocessConfig, Shape3};
use survfuse::SurvivalRecord;

fn main() -> survfuse::Result<()> {
    let epochs: usize = std::env::args()
        .nth(1)
        .and_then(|a| a.parse().ok())
        .unwrap_or(15);
    let mut spec = SyntheticSpec::new(160, vec![1.0, -0.5], 7);
    spec.c_max = Some(40.0);
    spec.volumes = Some(BlobSpec {
        noise_sd: 0.1,
        ..BlobSpec::default()
    });
    let cohort = generate_tabular(&spec)?;
    let volumes = generate_volumes(&cohort, &spec)?;
    let pre = PreprocessConfig {
        box_target: spec
            .volumes
            .as_ref()
            .map(|b| b.shape)
            .unwrap_or(Shape3::cube(16)),
        crop: Shape3::cube(16),
        ..PreprocessConfig::default()
    };
    let samples = cohort
        .records
        .iter()
        .zip(&volumes)
        .map(|(r, v)| {
            Ok(FusionSample::from_prepared(
                r.clone(),
                preprocess(&v.ct, &v.pet, None, &pre)?,
                Variant::V2,
            ))
        })
        .collect::<survfuse::Result<Vec<_>>>()?;
    let (train_set, test_set) = samples.split_at(120);

    let mut cfg = FusionConfig::new(Variant::V2, Profile::Desk);
    cfg.train.epochs = epochs;
    cfg.train.seed = 1;
    let records: Vec<SurvivalRecord> = train_set.iter().map(|s| s.record.clone()).collect();
    let model = build_model(&cfg, 2, make_time_grid(&records, GridSize::Auto)?)?;
    println!("layers: {}", model.layer_kinds().join(" "));

    let opts = TrainOptions {
        validation: Some(test_set),
        ..TrainOptions::default()
    };
    let fit = train(model, train_set, &opts)?;
    for l in &fit.log {
        println!(
            "epoch {:>3}  loss {:>9.3}  held-out C {:.4}",
            l.epoch,
            l.loss,
            l.val_c_index.unwrap_or(f64::NAN)
        );
    }
    let test_records: Vec<SurvivalRecord> = test_set.iter().map(|s| s.record.clone()).collect();
    let c = concordance_index(&fit.model.predict_risks(test_set)?, &test_records)?;
    println!("final held-out C-index {c:.4}");
    Ok(())
}
