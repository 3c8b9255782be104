//! Finite-difference audit of every differentiable component.
//!
//! Re-derives the gradient of each tensor primitive, each expert operator,
//! the router, and each loss term by central differences at 64-bit
//! precision and compares against the tape's backward pass. Prints one
//! line per component and exits non-zero if any comparison fails.
//!
//! ```text
//! cargo run --release --example gradient_checks
//! ```

use irdistill::pipeline::{format_gradcheck_line, gradcheck_ok, run_gradcheck, GradScope};

fn main() -> irdistill::Result<()> {
    let lines = run_gradcheck(GradScope::All)?;
    for line in &lines {
        println!("{}", format_gradcheck_line(line));
    }
    if gradcheck_ok(&lines) {
        println!("all {} components pass", lines.len());
        Ok(())
    } else {
        Err(irdistill::Error::Gradcheck(
            "at least one component failed; see lines above".into(),
        ))
    }
}
