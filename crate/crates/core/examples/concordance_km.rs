//! Kaplan–Meier curve and Harrell's C on a small hand-written cohort.
//!
//! cargo run --example concordance_km

use survfuse::survival::{concordance, kaplan_meier};
use survfuse::{RiskScore, SurvivalRecord};

fn main() -> survfuse::Result<()> {
    // (id, time, event, risk)
    let rows = [
        ("a", 2.0, true, 0.9),
        ("b", 3.0, false, 0.4),
        ("c", 5.0, true, 0.7),
        ("d", 5.0, true, 0.7),
        ("e", 8.0, false, 0.1),
        ("f", 11.0, true, 0.3),
        ("g", 13.0, false, 0.2),
    ];
    let records = rows
        .iter()
        .map(|&(id, t, e, _)| SurvivalRecord::new(id, vec![], t, e))
        .collect::<survfuse::Result<Vec<_>>>()?;
    let risks: Vec<RiskScore> = rows
        .iter()
        .map(|&(id, .., r)| RiskScore::new(id, r))
        .collect();

    let km = kaplan_meier(&records)?;
    println!("time  S(t)");
    for (t, s) in km.times.iter().zip(&km.probabilities) {
        println!("{t:>4}  {s:.4}");
    }
    println!(
        "S(6) = {:.4}, area to the last time = {:.3}",
        km.at(6.0),
        km.area()
    );

    let c = concordance(&risks, &records)?;
    println!(
        "C-index {:.4}: {} concordant, {} tied, {} comparable pairs",
        c.c_index, c.concordant, c.tied_risk, c.comparable_pairs
    );
    Ok(())
}
