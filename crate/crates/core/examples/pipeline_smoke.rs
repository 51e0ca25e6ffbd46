use deepdemand_core::demand::{em_fit, DemandConfig};
use deepdemand_core::harness::{simulate_market, SimConfig};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let lr: f64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(0.02);
    let epochs: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(200);
    let patience: usize = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(10);
    let seed: u64 = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(1);
    let taste_scale: f64 = args.get(5).map(|s| s.parse().unwrap()).unwrap_or(1.5);
    let wd: f64 = args.get(6).map(|s| s.parse().unwrap()).unwrap_or(1e-4);
    let min_epochs: usize = args.get(7).map(|s| s.parse().unwrap()).unwrap_or(30);

    let mut sim_cfg = SimConfig::desk_scale(seed);
    sim_cfg.taste_scale = taste_scale;
    let out = simulate_market(&sim_cfg).unwrap();
    let panel = out.choice_panel;
    let cfg = DemandConfig {
        lr,
        epochs,
        patience,
        weight_decay: wd,
        min_epochs,
        use_control_function: false,
        ..DemandConfig::new(panel.user_dim, panel.item_dim)
    };
    let t1 = std::time::Instant::now();
    let (_, report) = em_fit(&panel, &cfg, seed).unwrap();
    for e in report.trace.iter().step_by(10) {
        println!(
            "epoch {:3} train {:.4} val {:.4} pi1 {:.3}",
            e.epoch, e.train_nll, e.val_nll, e.pi1
        );
    }
    println!(
        "fit {:.1}s epochs={} alpha=({:.4},{:.4}) planted=({:.4},{:.4}) pi1={:.3} planted_pi1={:.3} val={:.4}",
        t1.elapsed().as_secs_f64(),
        report.epochs_run,
        report.alpha_bar[0], report.alpha_bar[1],
        out.truth.alpha_class[0], out.truth.alpha_class[1],
        report.pi1, out.truth.pi[0],
        report.val_nll
    );
}
