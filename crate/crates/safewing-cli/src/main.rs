//! Command-line pipeline driver: `train`, `evaluate`, `validate-model`,
//! and `replay`.
//!
//! Exit codes: 0 success, 1 validation or assertion failure,
//! 2 configuration error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use safewing::config::RunConfig;
use safewing::error::Error;
use safewing::filter::TransitionDb;
use safewing::harness::{
    self, monte_carlo, run_gusts, run_setups, summarize, CampaignInputs, Controller,
    HarnessParams, LpvMpcController, MpcRlController, RlController,
};
use safewing::pipeline::{load_artifacts, save_artifacts, train_all, validate_model};
use safewing::plant::PlantParams;

#[derive(Parser)]
#[command(name = "safewing", version, about = "MPC-bounded safe policy learning and Lipschitz-filtered deployment for an aeroelastic wing")]
struct Cli {
    /// Run configuration (TOML).
    #[arg(long, global = true, default_value = "configs/default.toml")]
    config: PathBuf,
    /// Override the campaign seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker-pool cap.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Override the output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Sample the envelope, compute safe bounds, train the tables, and
    /// persist the deployment database.
    Train,
    /// Run the paired three-controller Monte Carlo campaign.
    Evaluate {
        /// Fail (exit 1) unless the qualitative metric orderings hold.
        #[arg(long)]
        assert_ordering: bool,
    },
    /// Check the scheduled linear model and the two-step update against the
    /// reference integrator.
    ValidateModel,
    /// Re-execute one stored campaign run bit-exactly from persisted seeds.
    Replay {
        /// Run index from the campaign manifest.
        run: usize,
        /// Controller to replay (lpv, rl, mpc-rl).
        #[arg(long, default_value = "mpc-rl")]
        controller: String,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(Error::Config(msg)) | Err(Error::Toml(msg)) => {
            eprintln!("configuration error: {msg}");
            ExitCode::from(2)
        }
        Err(Error::NonFinite(what)) => {
            eprintln!("configuration error: non-finite value in {what}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> safewing::Result<ExitCode> {
    if let Some(jobs) = cli.jobs {
        // Ignore the error if a pool already exists (e.g. repeated init in tests).
        let _ = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global();
    }
    let mut cfg = RunConfig::load(&cli.config)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = cli.out {
        cfg.out_dir = out;
    }
    let plant_toml = std::fs::read_to_string(&cfg.plant_params)
        .map_err(|e| Error::config(format!("cannot read {}: {e}", cfg.plant_params.display())))?;
    let p: PlantParams<f64> = PlantParams::from_toml_str(&plant_toml)?;
    let hash = cfg.config_hash(&plant_toml);

    match cli.cmd {
        Cmd::Train => cmd_train(&cfg, &p, &hash),
        Cmd::Evaluate { assert_ordering } => cmd_evaluate(&cfg, &p, &hash, assert_ordering),
        Cmd::ValidateModel => cmd_validate_model(&cfg, &p, &hash),
        Cmd::Replay { run, controller } => cmd_replay(&cfg, &p, &hash, run, &controller),
    }
}

fn cmd_train(cfg: &RunConfig, p: &PlantParams<f64>, hash: &str) -> safewing::Result<ExitCode> {
    let art = train_all(cfg, p)?;
    save_artifacts(&art, &cfg.out_dir, hash)?;
    println!(
        "trained {} certified pairs ({} excluded, {} certification failures); db {} transitions, table {} entries",
        art.pairs.len(),
        art.stats.excluded,
        art.stats.cert_failures,
        art.db.len(),
        art.qtable.len(),
    );
    println!("artifacts written to {}", cfg.out_dir.display());
    if art.stats.cert_failures == 0 {
        Ok(ExitCode::SUCCESS)
    } else {
        Ok(ExitCode::from(1))
    }
}

fn cmd_evaluate(
    cfg: &RunConfig,
    p: &PlantParams<f64>,
    hash: &str,
    assert_ordering: bool,
) -> safewing::Result<ExitCode> {
    let art = load_artifacts(cfg, &cfg.out_dir)?;
    if art.config_hash != hash {
        eprintln!(
            "note: artifacts were trained under config hash {}, evaluating under {}",
            art.config_hash, hash
        );
    }
    let inputs = CampaignInputs { cfg, p, rl_qtable: &art.rl_qtable, db: &art.db };
    let result = monte_carlo(&inputs, cfg.harness.n_runs, cfg.seed)?;
    harness::write_campaign_outputs(&result, &cfg.out_dir, hash, p.sample_time)?;
    for (name, m) in summarize(&result) {
        println!(
            "{name}: overshoot {:.5} m, settle {:.2} s, median du {:.2}%, violations {}",
            m.max_overshoot_h, m.settle_h, m.median_du_pct, m.violation_count
        );
    }
    println!("campaign outputs written to {}", cfg.out_dir.display());
    if assert_ordering {
        let failures = harness::check_orderings(&result);
        if !failures.is_empty() {
            for f in &failures {
                eprintln!("ordering violated: {f}");
            }
            return Ok(ExitCode::from(1));
        }
        println!("all metric orderings hold");
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_validate_model(cfg: &RunConfig, p: &PlantParams<f64>, hash: &str) -> safewing::Result<ExitCode> {
    let report = validate_model(cfg, p, 100, 100, 1000)?;
    std::fs::create_dir_all(&cfg.out_dir)?;
    safewing::persist::write_json(&cfg.out_dir.join("model_validation.json"), hash, &report)?;
    println!(
        "lpv max relative trajectory error: {:.6} (threshold {})",
        report.lpv.max_rel_traj_error, report.lpv_threshold
    );
    println!(
        "dominant mode: {:.3} Hz (band {:?}), spectral radius {:.6}",
        report.lpv.dominant_mode_hz, report.mode_band_hz, report.lpv.spectral_radius
    );
    println!(
        "two-step taylor max relative difference: {:.6} (threshold {})",
        report.taylor_max_rel, report.taylor_threshold
    );
    println!("report written to {}", cfg.out_dir.join("model_validation.json").display());
    if report.pass {
        println!("model validation PASS");
        Ok(ExitCode::SUCCESS)
    } else {
        println!("model validation FAIL");
        Ok(ExitCode::from(1))
    }
}

fn cmd_replay(
    cfg: &RunConfig,
    p: &PlantParams<f64>,
    hash: &str,
    run: usize,
    controller: &str,
) -> safewing::Result<ExitCode> {
    let art = load_artifacts(cfg, &cfg.out_dir)?;
    let manifest_path = cfg.out_dir.join("runs.jsonl");
    let (_, manifest): (String, Vec<harness::RunManifest>) =
        safewing::persist::read_jsonl(&manifest_path)?;
    let Some(entry) = manifest.iter().find(|m| m.run == run) else {
        return Err(Error::config(format!(
            "run {run} not found in {} ({} runs recorded)",
            manifest_path.display(),
            manifest.len()
        )));
    };

    let hp = HarnessParams::from_config(cfg, p.sample_time);
    let setups = run_setups(cfg, cfg.harness.n_runs, cfg.seed);
    let sb = cfg.state_box();
    let ib = cfg.input_box();
    let mcfg = cfg.mpc_config();
    let fcfg = cfg.filter_config()?;

    // Tier-2 insertions accumulate across sequential MPC-RL episodes, so an
    // MPC-RL replay reconstructs the database by replaying every earlier run.
    let (traj, decisions) = match controller {
        "lpv" => {
            let gusts = run_gusts(cfg, p, &setups[run], &hp)?;
            let mut ctrl = LpvMpcController::new(*p, mcfg, cfg.harness.du_max);
            let traj = safewing::plant::simulate(&entry.x0, |k, x| ctrl.step(k, x), &gusts, p, &ib)?;
            (traj, Vec::new())
        }
        "rl" => {
            let gusts = run_gusts(cfg, p, &setups[run], &hp)?;
            let mut ctrl = RlController::new(&art.rl_qtable, ib, sb.half_widths(), cfg.harness.du_max);
            let traj = safewing::plant::simulate(&entry.x0, |k, x| ctrl.step(k, x), &gusts, p, &ib)?;
            (traj, Vec::new())
        }
        "mpc-rl" => {
            let mut db: TransitionDb<f64> = art.db.clone();
            let mut replayed = None;
            for s in setups.iter().take(run + 1) {
                let gusts = run_gusts(cfg, p, s, &hp)?;
                let mut ctrl = MpcRlController::new(
                    &mut db,
                    *p,
                    fcfg,
                    mcfg,
                    cfg.reward_config(),
                    cfg.gust_config(),
                    cfg.qlearn.n_actions,
                    cfg.harness.du_max,
                    true,
                );
                let traj = safewing::plant::simulate(&s.x0, |k, x| ctrl.step(k, x), &gusts, p, &ib)?;
                ctrl.finalize(&traj);
                let report = ctrl.report();
                if s.run == run {
                    replayed = Some((traj, report.decisions));
                    break;
                }
            }
            replayed.expect("requested run visited")
        }
        other => {
            return Err(Error::config(format!(
                "unknown controller {other:?}; expected lpv, rl, or mpc-rl"
            )))
        }
    };

    std::fs::create_dir_all(&cfg.out_dir)?;
    let ts_path = cfg.out_dir.join(format!("replay_{run}_{controller}.csv"));
    let mut body = Vec::new();
    traj.write_csv(&mut body, p.sample_time)?;
    safewing::persist::write_csv_with_hash(&ts_path, hash, &String::from_utf8_lossy(&body))?;
    println!("replayed run {run} ({controller}) -> {}", ts_path.display());
    if !decisions.is_empty() {
        let dec_path = cfg.out_dir.join(format!("replay_{run}_decisions.csv"));
        let mut body = Vec::new();
        safewing::filter::write_decision_log(&decisions, &mut body)?;
        safewing::persist::write_csv_with_hash(&dec_path, hash, &String::from_utf8_lossy(&body))?;
        println!("decision log -> {}", dec_path.display());
        let steps = traj.steps();
        if decisions.len() != steps {
            eprintln!("warning: {} decision rows for {} steps", decisions.len(), steps);
        }
    }
    Ok(ExitCode::SUCCESS)
}
