//! Verify every layer's analytic gradients against central finite
//! differences, then spot-check a small end-to-end model under the full
//! training loss.
//!
//! ```text
//! cargo run -p ucondgcn --example gradcheck
//! ```
//!
//! The autodiff core works in f64 throughout, so layer checks land around
//! 1e-9 relative error and the end-to-end check (with batch norm in train
//! mode and dropout active) stays below 1e-3. Dropout masks depend only on
//! the order of RNG draws, never on parameter values, so reseeding the
//! generator before each loss evaluation makes finite differences exact
//! even with stochastic regularization enabled.

use ucondgcn::cli::{e2e_gradcheck, E2E_GRAD_TOL, LAYER_GRAD_TOL};
use ucondgcn::network::layer_gradient_battery;

fn main() -> ucondgcn::Result<()> {
    let seed = 0;

    println!("── per-layer finite-difference checks (tolerance {LAYER_GRAD_TOL:.0e}) ──");
    let mut worst: f64 = 0.0;
    for item in layer_gradient_battery(seed)? {
        worst = worst.max(item.max_err);
        let mark = if item.max_err <= LAYER_GRAD_TOL { "pass" } else { "FAIL" };
        println!("  {mark}  {:<24} max rel err {:.3e}", item.name, item.max_err);
    }
    println!("  worst layer error: {worst:.3e}");

    println!("\n── end-to-end check: 5-joint tree, 8-frame window, cond everywhere ──");
    let check = e2e_gradcheck(seed)?;
    println!(
        "  checked {} parameter coordinates through the whole U-shaped model",
        check.coords_checked
    );
    println!("  max rel err {:.3e} (tolerance {E2E_GRAD_TOL:.0e})", check.max_err);
    println!("  worst coordinate: {}", check.worst);

    assert!(worst <= LAYER_GRAD_TOL && check.max_err <= E2E_GRAD_TOL);
    println!("\nall gradients verified");
    Ok(())
}
