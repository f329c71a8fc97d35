//! Runs a bundled scenario (broker, parameter server and clients in one
//! process over the simulated network) and prints the accuracy curve.
//!
//!     cargo run --example three_clinics_sim -- examples/scenarios/lossy_qos1.toml

use fedmq::sim::{run_sim, Scenario};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let path = std::env::args()
        .nth(1)
        .unwrap_or_else(|| concat!(env!("CARGO_MANIFEST_DIR"), "/examples/scenarios/three_clinics.toml").into());
    let scenario = Scenario::load(&path)?;
    let store = std::env::temp_dir().join(format!("fedmq-sim-{}-{}", scenario.name, std::process::id()));
    let report = run_sim(&scenario, &store)?;
    let _ = std::fs::remove_dir_all(&store);

    for r in &report.rounds {
        let bar = "#".repeat((r.accuracy * 50.0) as usize);
        println!(
            "round {:>3} v{:<3} acc {:.4} {:<50} {}",
            r.round,
            r.model_version,
            r.accuracy,
            bar,
            r.contributors.join(",")
        );
    }
    println!(
        "{}: {} rounds, final accuracy {:.4}, target reached at round {:?}",
        report.scenario, report.rounds_completed, report.final_accuracy, report.rounds_to_target
    );
    println!(
        "{} packets ({} bytes), {} dropped, {} retransmissions, {} ms simulated, {} ms wall",
        report.messages,
        report.bytes,
        report.dropped,
        report.broker_retransmissions,
        report.simulated_ms,
        report.wall_ms
    );
    Ok(())
}
