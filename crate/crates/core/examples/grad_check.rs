//! Double-precision gradient checks and loop-oracle conformance sweeps.

use dcanet::check::{cascade_gradient_check, dca_forward_conformance, dca_gradient_check, pool_conformance, update_conformance};
use dcanet::MaskFn;

fn main() -> dcanet::Result<()> {
    for (name, report) in [("dca module", dca_gradient_check(0)?), ("2-module cascade", cascade_gradient_check(0)?)] {
        println!(
            "{name:17} max rel error {:.2e} over {} coordinates (worst {}: analytic {:.6e}, numeric {:.6e})",
            report.max_rel_error, report.checked, report.worst, report.analytic, report.numeric
        );
    }
    println!("context_pool   vs oracle: {:.2e}", pool_conformance(200, 0)?);
    println!("update_spatial vs oracle: {:.2e}", update_conformance(200, 0)?);
    println!("dca_forward    vs oracle: {:.2e}", dca_forward_conformance(200, 0, MaskFn::Sigmoid)?);
    Ok(())
}
