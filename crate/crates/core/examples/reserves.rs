//! Mean-field and one-individual reserves of the disability preset for both
//! credibility caps. Usage: `cargo run --release --example reserves [eta]`.

use mfdi_core::grid::build_grid;
use mfdi_core::model::*;
use mfdi_core::solver::NoObserver;
use mfdi_core::valuation::*;

fn main() -> mfdi_core::Result<()> {
    let eta: f64 = std::env::args()
        .nth(1)
        .map(|a| a.parse().expect("eta must be a number"))
        .unwrap_or(0.01);
    let pay = make_disability_annuity(1.0, 0.25)?;
    let r = DiscountRate::Constant(0.01);
    let spec = build_grid(25.0, eta, 20)?;
    for zeta0 in [0.4, 0.5] {
        let p = DisabilityParams {
            zeta0,
            ..Default::default()
        };
        let s = make_disability_scenario(&p, 25.0)?;
        let value = |model| {
            run_model(
                &s,
                spec,
                &pay,
                &r,
                model,
                ReserveKind::Portfolio,
                Default::default(),
                &mut NoObserver,
            )
            .map(|run| run.reserve.value)
        };
        let mf = value(ModelTag::MeanField)?;
        let single = value(ModelTag::TrueSingle)?;
        println!(
            "zeta0={zeta0}: mean-field {mf:.5}, one-individual {single:.5}, ratio {:.4}",
            single / mf
        );
    }
    Ok(())
}
