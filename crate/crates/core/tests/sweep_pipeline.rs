use sgmoe_core::config::{preset_config, RunConfig};
use sgmoe_core::estimation::EmConfig;
use sgmoe_core::experiments::{
    run_replication, run_sweep_with, Execution, RegressionOptions, SweepConfig,
};
use sgmoe_core::presets::Preset;
use sgmoe_core::report::{
    read_records_csv, read_summary, write_records_csv, write_summary, Summary,
};

fn tiny(preset: Preset) -> SweepConfig {
    let mut cfg = preset_config(preset).sweep;
    cfg.n_grid = vec![150, 250, 400];
    cfg.replications = 2;
    cfg.k_fit = vec![3];
    cfg.em = EmConfig {
        tol: 1e-3,
        max_iter: 20,
        ..EmConfig::default()
    };
    cfg
}

#[test]
fn parallel_and_sequential_sweeps_agree() {
    let cfg = tiny(Preset::TemperatureEuclidean);
    let strip = |v: Vec<_>| {
        v.iter()
            .map(sgmoe_core::experiments::SweepRecord::without_timing)
            .collect::<Vec<_>>()
    };
    let par = strip(run_sweep_with(&cfg, Execution::Parallel, &|_| {}).unwrap());
    let seq = strip(run_sweep_with(&cfg, Execution::Sequential, &|_| {}).unwrap());
    assert_eq!(par, seq);
    assert_eq!(par.len(), 6);
    let keys: Vec<_> = par.iter().map(|r| (r.n, r.replication)).collect();
    assert_eq!(
        keys,
        vec![(150, 0), (150, 1), (250, 0), (250, 1), (400, 0), (400, 1)]
    );
    let again = run_replication(&cfg, 3, 250, 1).unwrap().without_timing();
    assert_eq!(again, par[3]);
}

#[test]
fn seeds_separate_replications_and_sizes() {
    let cfg = tiny(Preset::SigmoidComparison);
    let mut seeds: Vec<u64> = cfg
        .n_grid
        .iter()
        .flat_map(|&n| (0..cfg.replications).map(move |r| (n, r)))
        .map(|(n, r)| cfg.data_seed(n, r))
        .collect();
    seeds.sort_unstable();
    seeds.dedup();
    assert_eq!(seeds.len(), 6);
    let mut other = cfg.clone();
    other.master_seed = 1;
    assert_ne!(cfg.data_seed(150, 0), other.data_seed(150, 0));
    assert_ne!(cfg.init_seed(3, 150, 0), cfg.init_seed(4, 150, 0));
}

#[test]
fn records_and_summary_survive_disk() {
    let cfg = tiny(Preset::SoftmaxComparison);
    let records = run_sweep_with(&cfg, Execution::Parallel, &|_| {}).unwrap();
    assert!(records.iter().filter(|r| r.converged).count() >= 4);
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("records.csv");
    write_records_csv(&records, &csv).unwrap();
    let back = read_records_csv(&csv).unwrap();
    assert_eq!(back, records);

    let summary = Summary::from_records(&records, &RegressionOptions::default()).unwrap();
    let again = Summary::from_records(&back, &RegressionOptions::default()).unwrap();
    assert_eq!(summary.to_json(), again.to_json());
    let path = dir.path().join("summary.json");
    write_summary(&summary, &path).unwrap();
    assert_eq!(read_summary(&path).unwrap(), summary);
    assert_eq!(std::fs::read_to_string(&path).unwrap(), summary.to_json());
}

#[test]
fn resolved_configs_parse_back_identically() {
    for preset in [
        Preset::SigmoidComparison,
        Preset::SoftmaxComparison,
        Preset::TemperatureInner,
        Preset::TemperatureEuclidean,
    ] {
        let cfg = preset_config(preset);
        let text = cfg.to_toml().unwrap();
        let back = RunConfig::from_toml_str(&text).unwrap();
        assert_eq!(back, cfg, "{}", preset.name());
        assert_eq!(back.digest().unwrap(), cfg.digest().unwrap());
    }
}

#[test]
fn shipped_configs_load() {
    let dir = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs");
    let mut count = 0;
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "toml") {
            let cfg =
                RunConfig::from_file(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            assert!(cfg.sweep.validate().is_ok());
            count += 1;
        }
    }
    assert_eq!(count, 8);
}
