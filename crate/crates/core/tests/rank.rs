use lordnet::config::RunConfig;
use lordnet::pipeline;

fn best_loss(rank: usize, seed: u64, dir: &std::path::Path) -> f64 {
    let text = format!(
        r#"{{
        "problem": {{"kind": "poisson_periodic"}},
        "grid": {{"n": 8}},
        "network": {{"arch": {{"lord": {{"variant": "poisson_linear", "channels": 2, "layers": 1, "rank": {rank}, "side": 8}}}},
                    "input_scale": 5.0, "output_scale": 0.01}},
        "train": {{"loss": "msr", "lr0": 0.01, "decay_factor": 0.8, "decay_every": 200, "batch": 4, "max_iters": 600, "log_every": 10}},
        "data": {{"source": "sampled_initials", "samples": 16}},
        "eval": {{"test_samples": 2, "protocol": "one_step"}},
        "seeds": {{"init": {seed}, "train": 1000, "test": 0}},
        "output_dir": "unused"
    }}"#
    );
    let cfg = RunConfig::from_json(&text).unwrap();
    let (_, summary) = pipeline::run(&cfg, &dir.join(format!("r{rank}_s{seed}")), false).unwrap();
    summary.train.curve.iter().map(|p| p.loss).fold(f64::INFINITY, f64::min)
}

#[test]
fn higher_rank_trains_at_least_as_well() {
    let t = tempfile::tempdir().unwrap();
    let r1: Vec<f64> = (0..3).map(|s| best_loss(1, s, t.path())).collect();
    let r2: Vec<f64> = (0..3).map(|s| best_loss(2, s, t.path())).collect();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let spread = |v: &[f64]| {
        let m = mean(v);
        (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
    };
    let noise = spread(&r1).max(spread(&r2));
    assert!(mean(&r2) <= mean(&r1) + noise, "rank 1 {r1:?}, rank 2 {r2:?}");
}
