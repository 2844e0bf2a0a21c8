//! Linear versus neural MTLR when the true risk is not linear in the
//! covariates.
//!
//! cargo run --example neural_mtlr

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use survfuse::mtlr::{fit_mtlr, fit_neural_mtlr, predict_risks, MtlrConfig, NeuralMtlrConfig};
use survfuse::survival::{concordance_index, make_time_grid, GridSize};
use survfuse::SurvivalRecord;

/// Exponential times with log-hazard `x1² − 1`, censored uniformly on [0, 25].
fn cohort(n: usize, seed: u64) -> Vec<SurvivalRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let x: Vec<f64> = (0..2).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let rate = 0.1 * (x[0] * x[0] - 1.0).exp();
            let t = -rng.gen_range(f64::EPSILON..1.0f64).ln() / rate;
            let c = rng.gen_range(0.0..25.0);
            SurvivalRecord::new(format!("p{i}"), x, t.min(c), t <= c).expect("valid record")
        })
        .collect()
}

fn main() -> survfuse::Result<()> {
    let train = cohort(400, 1);
    let test = cohort(200, 2);
    let grid = make_time_grid(&train, GridSize::Auto)?;
    let train_cfg = MtlrConfig {
        epochs: 80,
        lr: 0.01,
        c_reg: 0.1,
        ..MtlrConfig::default()
    };

    let linear = fit_mtlr(&train, &grid, &train_cfg)?;
    let neural = fit_neural_mtlr(
        &train,
        &grid,
        &NeuralMtlrConfig {
            hidden: vec![32, 32],
            dropout: 0.1,
            train: train_cfg.clone(),
            ..NeuralMtlrConfig::default()
        },
    )?;
    println!(
        "linear MTLR held-out C {:.4}",
        concordance_index(&predict_risks(&linear.params, &test)?, &test)?
    );
    println!(
        "neural MTLR held-out C {:.4}",
        concordance_index(&neural.model.predict_risks(&test)?, &test)?
    );
    Ok(())
}
