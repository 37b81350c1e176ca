//! Runs the solver-versus-enumeration self check, then the same check with
//! the slack applied on the wrong side of the maximum to show it is caught.

use lexdrive::harness::{run_oracle_check, Fault, OracleCheckConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = OracleCheckConfig::default();
    println!("{}\n", run_oracle_check(&cfg)?);
    println!("with flipped slack sign:");
    println!("{}", run_oracle_check(&OracleCheckConfig { fault: Some(Fault::FlipSlackSign), ..cfg })?);
    Ok(())
}
