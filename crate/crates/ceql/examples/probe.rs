//! Scratch probe: train one benchmark at a reduced scale and print what
//! comes out. Run: cargo run --release -p ceql --example probe -- E-1 0 0.2

use ceql::bench::{by_id, run_benchmark, BenchRunConfig};
use ceql::expr::render;
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let id = args.get(1).map(String::as_str).unwrap_or("E-1");
    let seed: u64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(0);
    let scale: f64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(0.2);

    let b = by_id(id).expect("benchmark id");
    let mut cfg = BenchRunConfig::default();
    cfg.schedule = cfg.schedule.scaled(scale);

    let t0 = Instant::now();
    match run_benchmark(&b, seed, &cfg) {
        Ok(out) => {
            let m = out.metrics;
            println!(
                "{id} seed {seed} scale {scale}: {:.1?}s",
                t0.elapsed().as_secs_f64()
            );
            println!(
                "  interp {:.3e}  extrap {:.3e}  train {:.3e}  nc {}  im_mass {:.3e}",
                m.interp_mse, m.extrap_mse, m.train_mse, m.node_count, out.model.im_mass_final
            );
            println!("  expr: {}", render(&out.expr, 5));
            println!(
                "  epochs run: {}  prune events: {}  crossings: {}",
                out.history.records.len(),
                out.history.prune_events.len(),
                out.history.branch_crossings
            );
            let last = out.history.records.last().unwrap();
            println!(
                "  final: loss {:.3e} active {} lr {:.1e} flagged {}",
                last.loss, last.active_edges, last.lr, last.flagged_samples
            );
        }
        Err(e) => println!("{id} seed {seed}: FAILED: {e}"),
    }
}
