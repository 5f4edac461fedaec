//! Experiment orchestration: dataset generation, training runs, model
//! loading, evaluation tables, oracle reports, probes, and the full
//! variant sweep. The command-line binary is a thin wrapper over these
//! functions, which keeps every stage callable from tests.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde_json::json;

use crate::checkpoint::{tensor_string, Checkpoint};
use crate::config::{ModelVariant, RunConfig};
use crate::encoders::{BisimEncoder, FrozenEncoder};
use crate::maze::{generate_dataset, Dataset, DatasetMeta, ScenarioTag};
use crate::oracle::{
    bisim_fixed_point, check_theorem_ingredients, kr_dual, one_step_metric, wasserstein1,
    FiniteMdp,
};
use crate::planner::{
    evaluate_cell, paired_episodes, CemConfig, EpisodeRecord, EvalRow, PlannerStack,
};
use crate::probe::{background_leakage, probe_states, ProbeResult, PROBE_SCENARIOS};
use crate::transition::{train_model, TrainArtifacts, TransitionConfig, TransitionModel};
use crate::{Error, Result};

/// Generate a dataset per the configuration into `out_dir`.
pub fn gen_data_run(cfg: &RunConfig, out_dir: &Path) -> Result<DatasetMeta> {
    cfg.validate()?;
    let spec = cfg.maze_spec();
    let scenario = ScenarioTag::parse(&cfg.data_scenario)?;
    let meta = generate_dataset(
        &spec,
        cfg.n_traj,
        cfg.traj_len,
        cfg.data_seed,
        cfg.dr_fraction,
        scenario,
        out_dir,
    )?;
    cfg.save(&out_dir.join("resolved_config.cfg"))?;
    Ok(meta)
}

/// Train per the configuration on a dataset directory; writes metrics,
/// diagnostics, checkpoint, and the resolved config into `out_dir`.
pub fn train_run(cfg: &RunConfig, data_dir: &Path, out_dir: &Path) -> Result<TrainArtifacts> {
    let dataset = Dataset::open(data_dir)?;
    train_model(cfg, &dataset, out_dir)
}

/// A model reconstructed from a checkpoint: configuration, frozen
/// encoder (rebuilt from its seed), optional bisimulation encoder, and
/// the transition model with checkpointed weights.
pub struct LoadedModel {
    pub cfg: RunConfig,
    pub variant: ModelVariant,
    pub frozen: FrozenEncoder,
    pub bisim: Option<BisimEncoder>,
    pub model: TransitionModel,
}

impl LoadedModel {
    pub fn stack(&self) -> PlannerStack<'_> {
        PlannerStack {
            frozen: &self.frozen,
            bisim: self.bisim.as_ref(),
            model: &self.model,
        }
    }
}

pub fn load_model(ckpt_path: &Path) -> Result<LoadedModel> {
    let ck = Checkpoint::load(ckpt_path)?;
    let cfg_text = tensor_string(
        ck.get("meta.config")
            .ok_or_else(|| Error::Invalid("checkpoint lacks meta.config".into()))?,
    )?;
    let cfg = RunConfig::parse(&cfg_text)?;
    let variant = cfg.variant();
    let frozen = FrozenEncoder::new(
        cfg.frozen_seed,
        cfg.image_size,
        cfg.patch_size,
        cfg.d_z,
        cfg.beta_slow,
    )?;
    let mut bisim = variant.uses_bisim_encoder().then(|| {
        BisimEncoder::new(
            cfg.train_seed ^ 0xb151,
            cfg.d_z,
            cfg.d_w,
            cfg.bisim_hidden,
            cfg.n_patches(),
        )
    });
    let mut model = TransitionModel::new(
        cfg.train_seed ^ 0x7ead,
        TransitionConfig::from_run(&cfg, variant),
    );
    let mut missing = Vec::new();
    for (name, tensor) in ck.iter() {
        if name.starts_with("bisim.") {
            if let Some(enc) = bisim.as_mut() {
                if !enc.params.set_by_name(name, tensor.clone()) {
                    missing.push(name.to_string());
                }
            }
        } else if name.starts_with("predictor.") {
            if !model.params.set_by_name(name, tensor.clone()) {
                missing.push(name.to_string());
            }
        } else if name.starts_with("action_enc.") {
            if !model.action_params.set_by_name(name, tensor.clone()) {
                missing.push(name.to_string());
            }
        } else if name.starts_with("proprio_enc.") {
            if !model.proprio_params.set_by_name(name, tensor.clone()) {
                missing.push(name.to_string());
            }
        }
        // frozen.* tensors are carried for inspection; the encoder is
        // rebuilt exactly from its seed (the checkpoint stores f32).
    }
    if !missing.is_empty() {
        return Err(Error::Invalid(format!(
            "checkpoint tensors with no destination: {missing:?}"
        )));
    }
    Ok(LoadedModel {
        cfg,
        variant,
        frozen,
        bisim,
        model,
    })
}

pub fn write_eval_csv(rows: &[EvalRow], path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(
        f,
        "model_tag,scenario,success_rate,mean_final_distance,mean_steps,n_episodes,seed"
    )?;
    for r in rows {
        writeln!(
            f,
            "{},{},{},{},{},{},{}",
            r.model_tag,
            r.scenario.as_str(),
            r.success_rate,
            r.mean_final_distance,
            r.mean_steps,
            r.n_episodes,
            r.seed
        )?;
    }
    f.flush()?;
    Ok(())
}

fn write_eval_sidecar(path: &Path, seed: u64, episodes: usize) -> Result<()> {
    let meta_path = path.with_extension("meta.txt");
    std::fs::write(
        meta_path,
        format!(
            "# evaluation metadata\npaired_design = true  # identical (start, goal, scenario-seed) triples across scenarios and variants\nepisodes = {episodes}\nseed = {seed}\n"
        ),
    )?;
    Ok(())
}

fn write_trace(
    path: &Path,
    model_tag: &str,
    per_scenario: &[(ScenarioTag, Vec<EpisodeRecord>)],
) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for (tag, records) in per_scenario {
        for (e, r) in records.iter().enumerate() {
            let line = json!({
                "model_tag": model_tag,
                "scenario": tag.as_str(),
                "episode": e,
                "success": r.success,
                "steps": r.steps,
                "final_distance": r.final_distance,
                "plan_costs": r.plan_costs,
                "positions": r.positions,
                "wall_seconds": r.wall_seconds,
            });
            writeln!(f, "{line}")?;
        }
    }
    f.flush()?;
    Ok(())
}

/// Evaluate a checkpoint over scenarios; writes the CSV (+ sidecar, and a
/// JSON-lines trace when requested) and returns the rows.
pub fn eval_run(
    ckpt: &Path,
    scenarios: &[ScenarioTag],
    episodes: usize,
    seed: u64,
    out_csv: &Path,
    trace: Option<&Path>,
) -> Result<Vec<EvalRow>> {
    let loaded = load_model(ckpt)?;
    let spec = loaded.cfg.maze_spec();
    let cem = CemConfig::from_run(&loaded.cfg);
    let stack = loaded.stack();
    let pairs = paired_episodes(&spec, episodes, seed);
    let mut rows = Vec::new();
    let mut traces = Vec::new();
    for &tag in scenarios {
        let (row, records) = evaluate_cell(
            &stack,
            &spec,
            loaded.variant.as_str(),
            tag,
            &pairs,
            seed,
            &cem,
            loaded.cfg.max_steps,
            true,
        )?;
        rows.push(row);
        traces.push((tag, records));
    }
    if let Some(parent) = out_csv.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    write_eval_csv(&rows, out_csv)?;
    write_eval_sidecar(out_csv, seed, episodes)?;
    if let Some(tp) = trace {
        write_trace(tp, loaded.variant.as_str(), &traces)?;
    }
    Ok(rows)
}

/// Probe a checkpoint for background leakage using states drawn from the
/// dataset's trajectories; writes a small CSV and returns the result.
pub fn probe_run(ckpt: &Path, data_dir: &Path, out_csv: &Path) -> Result<ProbeResult> {
    let loaded = load_model(ckpt)?;
    let spec = loaded.cfg.maze_spec();
    let dataset = Dataset::open(data_dir)?;
    // states from stored proprios, fall back to free-space draws if the
    // dataset is tiny
    let mut states = Vec::new();
    let n_states = 32usize;
    let mut rng = crate::rng::Rng::new(loaded.cfg.eval_seed).derive("probe");
    for _ in 0..n_states {
        let traj = rng.uniform_usize(dataset.meta.n_traj);
        let t = rng.uniform_usize(dataset.meta.traj_len + 1);
        let p = dataset.proprio(traj, t);
        states.push([p[0], p[1]]);
    }
    if states.len() < 4 {
        states = probe_states(&spec, 8, loaded.cfg.eval_seed);
    }
    let res = background_leakage(
        &spec,
        &loaded.frozen,
        loaded.bisim.as_ref(),
        &states,
        &PROBE_SCENARIOS,
        loaded.cfg.eval_seed,
    )?;
    let mut f = std::io::BufWriter::new(std::fs::File::create(out_csv)?);
    writeln!(f, "model_tag,space,held_out_accuracy,n_scenarios,n_states")?;
    writeln!(
        f,
        "{},Z,{},{},{}",
        loaded.variant.as_str(),
        res.z_accuracy,
        res.n_scenarios,
        res.n_states
    )?;
    writeln!(
        f,
        "{},W,{},{},{}",
        loaded.variant.as_str(),
        res.w_accuracy,
        res.n_scenarios,
        res.n_states
    )?;
    f.flush()?;
    Ok(res)
}

/// Which oracle computation to run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OracleCheck {
    W1,
    Dual,
    FixedPoint,
    Theorem,
}

impl OracleCheck {
    pub fn parse(s: &str) -> Result<OracleCheck> {
        match s {
            "w1" => Ok(OracleCheck::W1),
            "dual" => Ok(OracleCheck::Dual),
            "fixedpoint" => Ok(OracleCheck::FixedPoint),
            "theorem" => Ok(OracleCheck::Theorem),
            other => Err(Error::Config(format!("unknown oracle check `{other}`"))),
        }
    }
}

/// Run an oracle computation on an MDP file, emitting JSON lines.
pub fn oracle_run(
    mdp_path: &Path,
    check: OracleCheck,
    out_jsonl: &Path,
    t_horizon: usize,
    goal_index: usize,
) -> Result<()> {
    let mdp = FiniteMdp::load(mdp_path)?;
    let mut f = std::io::BufWriter::new(std::fs::File::create(out_jsonl)?);
    match check {
        OracleCheck::W1 => {
            let rho = mdp.ground_metric()?;
            for i in 0..mdp.n {
                for j in (i + 1)..mdp.n {
                    let p = wasserstein1(&mdp.transitions[i], &mdp.transitions[j], &rho)?;
                    writeln!(
                        f,
                        "{}",
                        json!({"check": "w1", "i": i, "j": j, "value": p.value})
                    )?;
                }
            }
        }
        OracleCheck::Dual => {
            let rho = mdp.ground_metric()?;
            for i in 0..mdp.n {
                for j in (i + 1)..mdp.n {
                    let primal = wasserstein1(&mdp.transitions[i], &mdp.transitions[j], &rho)?
                        .value;
                    let (dual, _) = kr_dual(&mdp.transitions[i], &mdp.transitions[j], &rho)?;
                    writeln!(
                        f,
                        "{}",
                        json!({
                            "check": "dual", "i": i, "j": j,
                            "primal": primal, "dual": dual,
                            "gap": (primal - dual).abs(),
                        })
                    )?;
                }
            }
        }
        OracleCheck::FixedPoint => {
            if mdp.rewards.is_some() {
                let t = bisim_fixed_point(&mdp, true)?;
                writeln!(
                    f,
                    "{}",
                    json!({
                        "check": "fixedpoint", "reward_aware": true,
                        "iterations": t.iterations, "residual": t.residual,
                        "distances": t.rows(),
                    })
                )?;
            }
            let t = bisim_fixed_point(&mdp, false)?;
            writeln!(
                f,
                "{}",
                json!({
                    "check": "fixedpoint", "reward_aware": false,
                    "iterations": t.iterations, "residual": t.residual,
                    "distances": t.rows(),
                })
            )?;
            if let Ok(rho) = mdp.ground_metric() {
                let t = one_step_metric(&mdp, &rho)?;
                writeln!(
                    f,
                    "{}",
                    json!({
                        "check": "one_step", "distances": t.rows(),
                    })
                )?;
            }
        }
        OracleCheck::Theorem => {
            let emb = mdp
                .embeddings
                .as_ref()
                .ok_or_else(|| Error::Mdp("theorem check needs embeddings".into()))?;
            if goal_index >= mdp.n {
                return Err(Error::Mdp(format!("goal index {goal_index} out of range")));
            }
            let goal = emb[goal_index].clone();
            let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
            let h_w = emb.iter().map(|e| norm(e)).fold(norm(&goal), f64::max);
            let report = check_theorem_ingredients(&mdp, &goal, t_horizon, h_w)?;
            writeln!(f, "{}", serde_json::to_string(&report).unwrap())?;
        }
    }
    f.flush()?;
    Ok(())
}

/// Everything a sweep produces.
pub struct SweepArtifacts {
    pub rows: Vec<EvalRow>,
    pub out_dir: PathBuf,
}

/// The full grid: generate both datasets, train every requested variant,
/// evaluate each over all six scenarios with the paired episode set, and
/// write `sweep_results.csv`.
///
/// The clean dataset (`dr_fraction = 0`) trains the plain predictive
/// baseline; every other variant trains on the randomized dataset. With
/// `parallel > 1`, (variant, scenario) evaluation cells run concurrently
/// with sequential episodes inside each cell; results are identical either
/// way.
pub fn sweep_run(
    cfg: &RunConfig,
    variants: &[ModelVariant],
    out_dir: &Path,
    parallel: usize,
) -> Result<SweepArtifacts> {
    use rayon::prelude::*;
    cfg.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let data_nc = out_dir.join("data_nc");
    let data_dr = out_dir.join("data_dr");
    let mut cfg_nc = cfg.clone();
    cfg_nc.dr_fraction = 0.0;
    if !data_nc.join("meta.txt").exists() {
        gen_data_run(&cfg_nc, &data_nc)?;
    }
    if !data_dr.join("meta.txt").exists() {
        gen_data_run(cfg, &data_dr)?;
    }

    // train each variant (skipping any with an existing checkpoint)
    for &variant in variants {
        let vdir = out_dir.join(variant.as_str());
        if vdir.join("checkpoint.bwm").exists() {
            continue;
        }
        let mut vcfg = cfg.clone();
        vcfg.model_variant = variant.as_str().to_string();
        let data = if variant.uses_dr_data() { &data_dr } else { &data_nc };
        eprintln!("sweep: training {}", variant.as_str());
        train_run(&vcfg, data, &vdir)?;
    }

    // evaluation grid over all six scenarios
    let spec = cfg.maze_spec();
    let pairs = paired_episodes(&spec, cfg.eval_episodes, cfg.eval_seed);
    let mut cells: Vec<(ModelVariant, ScenarioTag)> = Vec::new();
    for &variant in variants {
        for tag in ScenarioTag::ALL {
            cells.push((variant, tag));
        }
    }
    let eval_cell = |(variant, tag): &(ModelVariant, ScenarioTag),
                     parallel_episodes: bool|
     -> Result<EvalRow> {
        let loaded = load_model(&out_dir.join(variant.as_str()).join("checkpoint.bwm"))?;
        let cem = CemConfig::from_run(&loaded.cfg);
        let (row, _) = evaluate_cell(
            &loaded.stack(),
            &spec,
            variant.as_str(),
            *tag,
            &pairs,
            cfg.eval_seed,
            &cem,
            loaded.cfg.max_steps,
            parallel_episodes,
        )?;
        eprintln!(
            "sweep: {} {} success_rate {:.2}",
            variant.as_str(),
            tag.as_str(),
            row.success_rate
        );
        Ok(row)
    };
    let rows: Vec<EvalRow> = if parallel > 1 {
        cells
            .par_iter()
            .map(|cell| eval_cell(cell, false))
            .collect::<Result<_>>()?
    } else {
        cells
            .iter()
            .map(|cell| eval_cell(cell, true))
            .collect::<Result<_>>()?
    };

    let csv = out_dir.join("sweep_results.csv");
    write_eval_csv(&rows, &csv)?;
    write_eval_sidecar(&csv, cfg.eval_seed, cfg.eval_episodes)?;
    cfg.save(&out_dir.join("resolved_config.cfg"))?;
    Ok(SweepArtifacts {
        rows,
        out_dir: out_dir.to_path_buf(),
    })
}
