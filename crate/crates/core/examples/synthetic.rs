//! Runs the synthetic three-source experiment and prints its report.

use std::time::Instant;

use nsnmt::synth::{run_experiment, ExperimentConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = ExperimentConfig::default();
    let start = Instant::now();
    let out = run_experiment(&cfg)?;
    for s in &out.systems {
        eprintln!(
            "{}: best epoch {} of {}, valid log-ppl {:.4}",
            s.name,
            s.outcome.best_epoch,
            s.outcome.history.len(),
            s.outcome.best_valid_log_ppl
        );
    }
    print!("{}", out.report.render());
    eprintln!("elapsed {:.1}s", start.elapsed().as_secs_f64());
    Ok(())
}
