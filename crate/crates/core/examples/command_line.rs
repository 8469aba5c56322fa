//! Drives the `ddrmpr` command line in-process: simulate, reconstruct,
//! evaluate, then re-run a task from its manifest and confirm the outputs
//! are byte-identical.

use ddrmpr::cli::{io::png_bytes, run_args};
use ddrmpr::fixtures::piecewise_constant;

pub fn run_example() -> ddrmpr::Result<()> {
    let dir = tempfile::tempdir()?;
    let p = |s: &str| dir.path().join(s).to_string_lossy().into_owned();
    std::fs::write(dir.path().join("blocks.png"), png_bytes(&piecewise_constant(16, 5))?)?;

    let steps: [&[&str]; 4] = [
        &[
            "--task",
            "simulate",
            "--input",
            &p("blocks.png"),
            "--alpha",
            "1",
            "--seed",
            "2",
            "--out",
            &p("sim"),
        ],
        &[
            "--task",
            "hio",
            "--input",
            &p("sim"),
            "--num-inits",
            "10",
            "--out",
            &p("hio"),
        ],
        &[
            "--task",
            "ddrm-pr",
            "--input",
            &p("sim"),
            "--num-inits",
            "10",
            "--denoiser",
            "shrinkage",
            "--out",
            &p("pr"),
        ],
        &[
            "--task",
            "evaluate",
            "--input",
            &p("pr/blocks.png"),
            "--gt",
            &p("blocks.png"),
            "--out",
            &p("ev"),
        ],
    ];
    for args in steps {
        let code = run_args(args);
        println!("ddrmpr {} -> exit {code}", args[..2].join(" "));
        if code != 0 {
            return Err(ddrmpr::Error::Argument(format!("{} failed", args[1])));
        }
    }
    print!("{}", std::fs::read_to_string(dir.path().join("ev/metrics.csv"))?);

    let code = run_args(&["--from-manifest", &p("pr/manifest.json"), "--out", &p("pr-again")]);
    let same =
        std::fs::read(dir.path().join("pr/blocks.dprt"))? == std::fs::read(dir.path().join("pr-again/blocks.dprt"))?;
    println!("rerun from manifest: exit {code}, identical output {same}");
    Ok(())
}

#[allow(dead_code)]
fn main() {
    if let Err(e) = run_example() {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
