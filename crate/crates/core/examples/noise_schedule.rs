//! The noise ladder: a linear-β variance-preserving schedule expressed as
//! σ_t, with α_t = 1/(1 + σ_t²), and the timesteps a short trajectory visits.

use ddrmpr::ddrm_core::{schedule_linear_vp, sigma_from_alpha, timesteps};

pub fn run_example() -> ddrmpr::Result<()> {
    let sched = schedule_linear_vp(1000, 100.0)?;
    println!(
        "T = {}, spacing {}, hash {}",
        sched.t_max(),
        sched.spacing,
        &sched.hash()[..12]
    );
    for t in [0, 1, 10, 100, 220, 350, 500, 1000] {
        let (s, a) = (sched.sigma(t), sched.alpha(t));
        println!(
            "t = {t:>4}: sigma {s:>10.4}  alpha {a:.6}  check {:.1e}",
            (sigma_from_alpha(a) - s).abs()
        );
    }
    println!("15 steps from 350: {:?}", timesteps(350, 15));
    println!("35 steps from 220: {:?}", timesteps(220, 35));
    Ok(())
}

#[allow(dead_code)]
fn main() {
    if let Err(e) = run_example() {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
