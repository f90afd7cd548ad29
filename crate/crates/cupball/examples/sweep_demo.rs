//! Run a reduced calibration sweep and print the per-sample-size statistics.
//!
//! ```text
//! cargo run --release -p cupball --example sweep_demo
//! ```

use cupball::controller::ControllerConfig;
use cupball::sim::{run_sweep, ExperimentConfig};

fn main() {
    let mut cfg = ExperimentConfig::default();
    cfg.n_schedule = vec![50, 200, 800, 2000];
    cfg.rollouts_per_n = 300;
    let ctrl = ControllerConfig::default();
    let out = run_sweep(&cfg, &ctrl).expect("sweep failed");

    println!(
        "{:>6} {:>7} {:>8} {:>8} {:>8} {:>8} {:>8} {:>10} {:>22}",
        "n", "eps", "catch%", "center%", "fail%", "p1", "p2", "mean_vz", "vhat half-widths"
    );
    for s in &out.summary.per_n {
        let hw = s.vhat.halfwidth();
        println!(
            "{:>6} {:>7.3} {:>8.1} {:>8.1} {:>8.1} {:>8} {:>8} {:>10.4} {:>10.5} {:>10.5}",
            s.n,
            s.epsilon_used,
            s.catch_pct,
            s.hit_center_pct,
            s.trial_failure_pct,
            s.p1_failures,
            s.p2_failures,
            s.mean_impact_vz.unwrap_or(f64::NAN),
            hw.x,
            hw.y,
        );
    }
    println!(
        "spearman rho = {:.3}, one-sided p = {:.4}",
        out.summary.spearman_rho, out.summary.spearman_p
    );
}
