//! The internal consistency properties behind `--task selftest`.

use ddrmpr::selftest::run_all;

pub fn run_example() -> ddrmpr::Result<()> {
    let checks = run_all(7, 20_000);
    for c in &checks {
        println!("{c}");
    }
    let failed = checks.iter().filter(|c| !c.passed).count();
    println!("{} of {} properties hold", checks.len() - failed, checks.len());
    Ok(())
}

#[allow(dead_code)]
fn main() {
    if let Err(e) = run_example() {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
