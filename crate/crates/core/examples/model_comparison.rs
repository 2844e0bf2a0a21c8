//! Four model configurations trained on one simulated split and scored on
//! the held-out patients, written as `comparison.csv`:
//!
//! | configuration        | members                 |
//! |----------------------|-------------------------|
//! | `mtlr`               | linear MTLR on the EHR  |
//! | `mtlr+cnn`           | one image path + MTLR   |
//! | `mtlr+cox+fusion-v1` | three paths, with Cox   |
//! | `mtlr+cox+fusion-v2` | fused path, with Cox    |
//!
//! cargo run --release --example model_comparison [out_dir] [epochs]

use std::path::PathBuf;

use survfuse::cli::compare::{compare, standard_configurations, write_comparison_csv};
use survfuse::cli::config::{DataConfig, RunConfig};
use survfuse::synthetic::{
    calibrate_c_max, generate_tabular, generate_volumes, write_cohort, BlobSpec, SyntheticSpec,
    BBOX_FILE, EHR_FILE, SCHEMA_FILE, VOLUME_DIR,
};

fn main() -> survfuse::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "out/model_comparison".into()));
    let epochs: usize = args.next().and_then(|a| a.parse().ok()).unwrap_or(10);

    let mut spec = SyntheticSpec::new(160, vec![1.0, -0.5, 0.0], 7);
    spec.c_max = Some(calibrate_c_max(&spec, 0.3)?);
    spec.volumes = Some(BlobSpec {
        noise_sd: 0.05,
        ..BlobSpec::default()
    });
    let cohort = generate_tabular(&spec)?;
    let volumes = generate_volumes(&cohort, &spec)?;
    let sim = out.join("cohort");
    write_cohort(&sim, &cohort, Some(&volumes))?;

    // First 120 patients train, the last 40 are held out.
    let text = std::fs::read_to_string(sim.join(EHR_FILE))?;
    let lines: Vec<&str> = text.lines().collect();
    std::fs::write(sim.join("train.csv"), lines[..121].join("\n"))?;
    std::fs::write(
        sim.join("test.csv"),
        [&lines[..1], &lines[121..]].concat().join("\n"),
    )?;
    let data = |file: &str| DataConfig {
        ehr: Some(sim.join(file)),
        schema: Some(sim.join(SCHEMA_FILE)),
        policy: None,
        volumes: Some(sim.join(VOLUME_DIR)),
        bbox: Some(sim.join(BBOX_FILE)),
    };

    let mut cfg = RunConfig {
        seed: 7,
        ..RunConfig::default()
    };
    cfg.fusion.train.epochs = epochs;
    let rows = compare(
        &cfg,
        &data("train.csv"),
        &data("test.csv"),
        &standard_configurations(),
        &out.join("models"),
    )?;
    for r in &rows {
        println!(
            "{:<20} {:<22} C {:.4}",
            r.configuration, r.members, r.c_index
        );
    }
    write_comparison_csv(out.join("comparison.csv"), &rows)?;
    println!("wrote {}", out.join("comparison.csv").display());
    Ok(())
}
