//! Run the whole pipeline at a reduced size and print the per-arm summary.
//! Pass an output directory as the first argument (defaults to `run_small`).

use swiftpan::pipeline::{run_pipeline, summary_csv, RunConfig};

fn main() -> swiftpan::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "run_small".into());
    let mut cfg = RunConfig {
        out: out.into(),
        source_n: 48,
        target_n: 128,
        test_n: 16,
        ratio: 0.1,
        ..RunConfig::default()
    };
    cfg.pretrain.epochs = 15;
    cfg.adapt.epochs = 30;
    let result = run_pipeline(&cfg)?;
    print!("{}", summary_csv(&result.arms));
    println!("artifacts written to {}", cfg.out.display());
    Ok(())
}
