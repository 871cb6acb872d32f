use mtlcm::cli::pipeline::{run_config, RunOptions};
use mtlcm::cli::reproduce::{table1_cells, table1_config, Scale};

#[test]
#[ignore]
fn grid() {
    let steps: usize = std::env::var("DIAG_STEPS").map(|v| v.parse().unwrap()).unwrap_or(12_000);
    for cell in table1_cells(Scale::Desk) {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = table1_config(&cell, Scale::Desk, dir.path());
        cfg.mtlcm.max_steps = steps;
        cfg.mtlcm.patience = 2000;
        cfg.mtlcm.trace_every = 0;
        let opts = RunOptions { force: true, threads: Some(2), ..RunOptions::default() };
        let summary = run_config(&cfg, &opts).unwrap();
        for r in &summary.reports {
            println!(
                "d{} c{} seed {}: strong {:.5} indicators {:.5} steps {}",
                cell.latent_dim, cell.n_causal, r.seed,
                r.strong_mcc.unwrap(), r.indicator_accuracy.unwrap(), r.mtlcm.steps
            );
        }
    }
}
