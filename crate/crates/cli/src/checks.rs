use std::path::PathBuf;

use anyhow::{bail, Result};
use clap::Args;
use serde::Serialize;

use hdrmask::selfcheck::{format_selftest, fuzz_readers, gradient_suite, GradientCase};

use crate::manifest::{create_dir, inside, Run};

/// Relative error above which a gradient check fails.
const GRADIENT_TOLERANCE: f64 = 1e-3;

#[derive(Args)]
pub struct GradcheckArgs {
    /// First seed.
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Number of consecutive seeds to check.
    #[arg(long, default_value_t = 1)]
    seeds: u64,
    /// Write the results and a manifest here.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Serialize)]
struct GradcheckConfig {
    seed: u64,
    seeds: u64,
    tolerance: f64,
}

pub fn gradcheck(a: GradcheckArgs) -> Result<()> {
    let run = Run::start("gradcheck");
    let mut worst: Vec<GradientCase> = Vec::new();
    for seed in a.seed..a.seed + a.seeds.max(1) {
        for case in gradient_suite(seed)? {
            match worst.iter_mut().find(|w| w.name == case.name) {
                Some(w) => w.max_rel_error = w.max_rel_error.max(case.max_rel_error),
                None => worst.push(case),
            }
        }
    }
    let mut table = String::from("term\tmax_rel_error\n");
    for w in &worst {
        table.push_str(&format!("{}\t{:.3e}\n", w.name, w.max_rel_error));
    }
    print!("{table}");
    let max = worst.iter().map(|w| w.max_rel_error).fold(0.0, f64::max);
    println!(
        "max relative error {max:.3e} over {} seed(s)",
        a.seeds.max(1)
    );
    if let Some(dir) = &a.out_dir {
        create_dir(dir)?;
        let p = dir.join("gradcheck.tsv");
        std::fs::write(&p, &table)?;
        let cfg = GradcheckConfig {
            seed: a.seed,
            seeds: a.seeds,
            tolerance: GRADIENT_TOLERANCE,
        };
        run.finish(&inside(dir), &cfg, Some(a.seed), vec![], vec![p])?;
    }
    if max >= GRADIENT_TOLERANCE {
        bail!("gradient check failed: {max:.3e} >= {GRADIENT_TOLERANCE:e}");
    }
    Ok(())
}

#[derive(Args)]
pub struct FormatsArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Corrupted inputs per reader.
    #[arg(long, default_value_t = 1000)]
    fuzz: usize,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Serialize)]
struct FormatsConfig {
    seed: u64,
    fuzz: usize,
}

pub fn formats(a: FormatsArgs) -> Result<()> {
    let run = Run::start("formats");
    let mut table = String::from("format\tround_trip\tfuzz_cases\taccepted\trejected\tpanics\n");
    let trips = format_selftest(a.seed)?;
    let fuzz = fuzz_readers(a.seed, a.fuzz)?;
    let mut failed = Vec::new();
    for (name, ok) in &trips {
        if !ok {
            failed.push(format!("{name} round trip"));
        }
    }
    for s in &fuzz {
        let trip = trips
            .iter()
            .find(|(n, _)| *n == s.format)
            .map_or("-", |(_, ok)| if *ok { "ok" } else { "FAILED" });
        table.push_str(&format!(
            "{}\t{trip}\t{}\t{}\t{}\t{}\n",
            s.format, s.cases, s.accepted, s.rejected, s.panics
        ));
        if s.panics > 0 {
            failed.push(format!("{} reader panicked {} times", s.format, s.panics));
        }
    }
    print!("{table}");
    if let Some(dir) = &a.out_dir {
        create_dir(dir)?;
        let p = dir.join("formats.tsv");
        std::fs::write(&p, &table)?;
        let cfg = FormatsConfig {
            seed: a.seed,
            fuzz: a.fuzz,
        };
        run.finish(&inside(dir), &cfg, Some(a.seed), vec![], vec![p])?;
    }
    if !failed.is_empty() {
        bail!("{}", failed.join("; "));
    }
    Ok(())
}
