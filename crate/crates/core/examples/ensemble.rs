//! Averaging Cox and MTLR risks after z-score and rank normalization.
//!
//! cargo run --example ensemble

use survfuse::coxph::{fit_cox, CoxConfig};
use survfuse::ensemble::{average_risks, EnsembleSpec, Member, Normalization};
use survfuse::mtlr::{fit_mtlr, predict_risks, MtlrConfig};
use survfuse::survival::{concordance_index, make_time_grid, GridSize};
use survfuse::synthetic::{generate_tabular, SyntheticSpec};

fn main() -> survfuse::Result<()> {
    let mut spec = SyntheticSpec::new(300, vec![1.0, -0.5, 0.25], 9);
    spec.c_max = Some(30.0);
    let cohort = generate_tabular(&spec)?;
    let (train, test) = cohort.records.split_at(200);

    let cox = fit_cox(train, &CoxConfig::default())?;
    let grid = make_time_grid(train, GridSize::Auto)?;
    let mtlr = fit_mtlr(
        train,
        &grid,
        &MtlrConfig {
            epochs: 40,
            lr: 0.05,
            ..MtlrConfig::default()
        },
    )?;
    let members = [cox.predict_risk(test)?, predict_risks(&mtlr.params, test)?];
    println!("cox  C {:.4}", concordance_index(&members[0], test)?);
    println!("mtlr C {:.4}", concordance_index(&members[1], test)?);

    for normalization in [Normalization::ZScore, Normalization::Rank] {
        let spec = EnsembleSpec::equal(&["cox", "mtlr"], normalization);
        let avg = average_risks(&members, &spec)?;
        println!(
            "{normalization:?} ensemble C {:.4}",
            concordance_index(&avg, test)?
        );
    }

    // Unequal weights; an omitted weight takes the remainder.
    let weighted = EnsembleSpec {
        members: vec![
            Member {
                model: "cox".into(),
                weight: Some(0.7),
            },
            Member {
                model: "mtlr".into(),
                weight: None,
            },
        ],
        normalization: Normalization::ZScore,
    };
    println!("weights {:?}", weighted.weights()?);
    println!(
        "weighted ensemble C {:.4}",
        concordance_index(&average_risks(&members, &weighted)?, test)?
    );
    Ok(())
}
