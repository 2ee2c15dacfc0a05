//! Run the fixture pipeline once and print timings and metrics.
//!
//! `cargo run --release --example fixture_run [config.toml] [--unified]`

use actionset::pipeline::{run_pipeline, PipelineConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let unified = args.iter().any(|a| a == "--unified");
    let cfg = match args.iter().find(|a| !a.starts_with("--")) {
        Some(path) => PipelineConfig::from_toml(&std::fs::read_to_string(path)?)?,
        None => PipelineConfig::default(),
    };
    let run = run_pipeline(&cfg, unified)?;
    for (name, t) in &run.timings {
        println!("{name:>10}: {:.1}s", t.as_secs_f64());
    }
    println!("holdout reconstruction ADE: {:.3} m", run.holdout_ade);
    for r in &run.logs {
        println!("{}", r.csv_row());
    }
    print!("{}", run.metrics.to_toml());
    Ok(())
}
