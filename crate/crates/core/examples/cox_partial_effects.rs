//! Cox fit on a simulated cohort, baseline survival, and partial-effect
//! curves written as CSV and SVG.
//!
//! cargo run --example cox_partial_effects [out_dir]

use std::path::PathBuf;

use survfuse::cli::plot::write_plot;
use survfuse::coxph::{fit_cox_named, CoxConfig};
use survfuse::survival::concordance_index;
use survfuse::synthetic::{calibrate_c_max, covariate_name, generate_tabular, SyntheticSpec};

fn main() -> survfuse::Result<()> {
    let out = PathBuf::from(
        std::env::args()
            .nth(1)
            .unwrap_or_else(|| "out/cox_partial_effects".into()),
    );
    std::fs::create_dir_all(&out)?;

    let mut spec = SyntheticSpec::new(500, vec![1.0, -0.5, 0.0], 3);
    spec.c_max = Some(calibrate_c_max(&spec, 0.3)?);
    let cohort = generate_tabular(&spec)?;
    let names: Vec<String> = (0..spec.d()).map(covariate_name).collect();
    let model = fit_cox_named(&cohort.records, names.clone(), &CoxConfig::default())?;

    println!(
        "converged {} after {} iterations",
        model.report.converged, model.report.iterations
    );
    for ((name, b), truth) in names.iter().zip(&model.beta).zip(&spec.beta_true) {
        println!(
            "{name}: beta {b:+.3} (true {truth:+.1}), hazard ratio {:.3}",
            b.exp()
        );
    }
    let risks = model.predict_risk(&cohort.records)?;
    println!(
        "training C-index {:.4}",
        concordance_index(&risks, &cohort.records)?
    );

    let values = [-1.0, 0.0, 1.0];
    let curves = model.partial_effect_curves(&cohort.records, "x1", &values)?;
    let named: Vec<_> = values
        .iter()
        .map(|v| format!("x1 = {v:+}"))
        .zip(curves)
        .collect();
    for (name, c) in &named {
        println!("{name}: S(10) = {:.3}", c.at(10.0));
    }
    write_plot(&out, "partial_effects", "partial effect of x1", &named)?;
    println!("wrote {}", out.join("partial_effects.svg").display());
    Ok(())
}
