//! CT/PET pair on disk, then box crop, min–max normalization, fusion and
//! center crop.
//!
//! cargo run --example volume_preprocessing [out_dir]

use std::path::PathBuf;

use survfuse::synthetic::{blob_pair, BlobSpec};
use survfuse::volume::{preprocess, BoundingBox, PatientFiles, PreprocessConfig, Shape3, Volume};

fn describe(name: &str, v: &Volume) {
    let (lo, hi) = v
        .data
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| {
            (a.min(x), b.max(x))
        });
    let mean = v.data.iter().sum::<f64>() / v.data.len() as f64;
    println!(
        "{name:<6} {}  min {lo:+.3}  max {hi:+.3}  mean {mean:.3}",
        v.shape
    );
}

fn main() -> survfuse::Result<()> {
    let out = PathBuf::from(
        std::env::args()
            .nth(1)
            .unwrap_or_else(|| "out/volume_preprocessing".into()),
    );
    std::fs::create_dir_all(&out)?;

    let spec = BlobSpec {
        shape: Shape3::new(32, 48, 48),
        radius_min: 3.0,
        radius_max: 10.0,
        background: 0.2,
        noise_sd: 0.05,
        ..BlobSpec::default()
    };
    let pair = blob_pair(&spec, 0.5, 1, 0);
    let files = PatientFiles::new(&out, "P001");
    files.save(&pair.ct, &pair.pet)?;
    let (ct, pet) = files.load()?;
    describe("ct", &ct);
    describe("pet", &pet);

    // Box around the blob; the box step resizes it to 24×32×32 around its center.
    let b = BoundingBox::new([6, 10, 10], [26, 38, 38])?;
    let cfg = PreprocessConfig {
        box_target: Shape3::new(24, 32, 32),
        crop: Shape3::new(16, 24, 24),
        ..PreprocessConfig::default()
    };
    let prepared = preprocess(&ct, &pet, Some(&b), &cfg)?;
    describe("ct'", &prepared.ct);
    describe("pet'", &prepared.pet);
    describe("fused", &prepared.fused);
    Ok(())
}
