use safewing::config::RunConfig;
use safewing::gust::dryden_generate;
use safewing::harness::{monte_carlo, summarize, CampaignInputs};
use safewing::pipeline::train_all;
use safewing::plant::simulate;
use safewing::state::{ControlInput, WingState};

fn main() {
    let mut cfg = RunConfig::default();
    cfg.plant_params = std::path::PathBuf::from("configs/plant.toml");
    cfg.harness.timeseries_runs = 0;
    let p = cfg.load_plant().unwrap();
    // open-loop scale check
    let mut worst = [0.0f64; 5];
    for seed in 0..12u64 {
        let g = dryden_generate(seed, 5.0, p.airspeed, 1.5, 200.0, p.sample_time, 4.5).unwrap();
        let mut gusts = g.samples.clone();
        gusts.extend(std::iter::repeat(0.0).take(5000));
        let traj = simulate(&WingState::zero(), |_, _| ControlInput(0.0), &gusts, &p, &cfg.input_box()).unwrap();
        for s in &traj.states {
            let v = s.to_array();
            for i in 0..5 { worst[i] = worst[i].max(v[i].abs()); }
        }
    }
    println!("open-loop maxima: {:?} vs box {:?}", worst.map(|v| (v*1e3).round()/1e3), cfg.boxes.state_half);

    let n_runs: usize = std::env::var("NRUNS").ok().and_then(|s| s.parse().ok()).unwrap_or(100);
    cfg.harness.n_runs = n_runs;
    if let Ok(v) = std::env::var("DUMAX") { cfg.harness.du_max = v.parse().unwrap(); }
    if let Ok(v) = std::env::var("INNER") { cfg.harness.inner_frac = v.parse().unwrap(); }
    let art = train_all(&cfg, &p).unwrap();
    let inputs = CampaignInputs { cfg: &cfg, p: &p, rl_qtable: &art.rl_qtable, db: &art.db };
    let result = monte_carlo(&inputs, cfg.harness.n_runs, cfg.seed).unwrap();
    println!("pairs={} excl={} db={}", art.pairs.len(), art.stats.excluded, art.db.len());
    for (name, m) in summarize(&result) {
        println!(
            "  {name:8} ovs={:.5} st_h={:.2} du%={:.2} viol={} cert={} fb={} comp={} gl={} mg={} me={} env={}",
            m.max_overshoot_h, m.settle_h, m.median_du_pct,
            m.violation_count, m.certified_steps, m.fallback_count,
            m.soundness_violations, m.global_bound_violations, m.margin_violations,
            m.merged_set_exits, m.envelope_exits
        );
    }
}
