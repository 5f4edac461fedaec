//! Command-line contract: subcommands, file outputs, exit codes.

use std::path::PathBuf;
use std::process::Command;

fn bwm() -> Command {
    Command::new(env!("CARGO_BIN_EXE_bwm"))
}

fn tmp(name: &str) -> PathBuf {
    let d = std::env::temp_dir().join(format!("bwm_cli_{name}_{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&d);
    std::fs::create_dir_all(&d).unwrap();
    d
}

fn micro_cfg(dir: &PathBuf) -> PathBuf {
    let p = dir.join("micro.cfg");
    std::fs::write(
        &p,
        "image_size = 32\npatch_size = 8\nd_z = 16\nd_w = 8\nbisim_hidden = 32\n\
         n_traj = 4\ntraj_len = 5\ndr_fraction = 0.5\n\
         model_width = 16\nmodel_layers = 1\nmodel_heads = 2\nmlp_ratio = 2\ncontext_len = 2\npatch_group = 2\n\
         epochs = 1\nbatch_size = 2\nsteps_per_epoch = 2\n\
         buffer_capacity = 20\ncomparison_size = 5\nswitch_epoch = 1\n\
         cem_population = 6\ncem_elites = 2\ncem_iters = 1\nplan_horizon = 2\n\
         max_steps = 2\neval_episodes = 2\n",
    )
    .unwrap();
    p
}

#[test]
fn gen_train_eval_round_trip_with_exit_codes() {
    let dir = tmp("roundtrip");
    let cfg = micro_cfg(&dir);
    let data = dir.join("data");
    let run = dir.join("run");

    let st = bwm()
        .args(["gen-data", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&data)
        .status()
        .unwrap();
    assert_eq!(st.code(), Some(0));
    for f in ["meta.txt", "obs.f32", "proprio.f32", "actions.f32"] {
        assert!(data.join(f).exists(), "{f} missing");
    }

    let st = bwm()
        .args(["train", "--config"])
        .arg(&cfg)
        .arg("--data")
        .arg(&data)
        .arg("--out")
        .arg(&run)
        .status()
        .unwrap();
    assert_eq!(st.code(), Some(0));
    let ckpt = run.join("checkpoint.bwm");
    assert!(ckpt.exists());

    let out_csv = dir.join("eval.csv");
    let trace = dir.join("trace.jsonl");
    let st = bwm()
        .args(["eval", "--ckpt"])
        .arg(&ckpt)
        .args(["--scenarios", "NC,LCG", "--episodes", "2", "--seed", "9", "--out"])
        .arg(&out_csv)
        .arg("--trace")
        .arg(&trace)
        .status()
        .unwrap();
    assert_eq!(st.code(), Some(0));
    let text = std::fs::read_to_string(&out_csv).unwrap();
    assert!(text
        .starts_with("model_tag,scenario,success_rate,mean_final_distance,mean_steps,n_episodes,seed"));
    assert_eq!(text.lines().count(), 3, "header plus one row per scenario");
    // success rates land on the episode granularity grid
    for line in text.lines().skip(1) {
        let rate: f64 = line.split(',').nth(2).unwrap().parse().unwrap();
        assert!((rate * 2.0).fract().abs() < 1e-12);
    }
    // the trace is JSON lines
    let tr = std::fs::read_to_string(&trace).unwrap();
    assert_eq!(tr.lines().count(), 4, "2 scenarios x 2 episodes");
    for line in tr.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v.get("success").is_some());
    }
    // sidecar records the paired design
    let sidecar = std::fs::read_to_string(dir.join("eval.meta.txt")).unwrap();
    assert!(sidecar.contains("paired_design = true"));

    let _ = std::fs::remove_dir_all(dir);
}

#[test]
fn unknown_scenario_tag_exits_2_naming_it() {
    let dir = tmp("badscenario");
    let cfg = micro_cfg(&dir);
    let data = dir.join("data");
    let run = dir.join("run");
    bwm().args(["gen-data", "--config"]).arg(&cfg).arg("--out").arg(&data).status().unwrap();
    bwm()
        .args(["train", "--config"])
        .arg(&cfg)
        .arg("--data")
        .arg(&data)
        .arg("--out")
        .arg(&run)
        .status()
        .unwrap();
    let out = bwm()
        .args(["eval", "--ckpt"])
        .arg(run.join("checkpoint.bwm"))
        .args(["--scenarios", "NC,XX", "--episodes", "1", "--out"])
        .arg(dir.join("x.csv"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("XX"), "stderr must name the tag: {err}");
    let _ = std::fs::remove_dir_all(dir);
}

#[test]
fn config_errors_exit_2_naming_the_key() {
    let dir = tmp("badkey");
    let bad = dir.join("bad.cfg");
    std::fs::write(&bad, "frobnicator = 3\n").unwrap();
    let out = bwm()
        .args(["gen-data", "--config"])
        .arg(&bad)
        .arg("--out")
        .arg(dir.join("d"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("frobnicator"));
    let _ = std::fs::remove_dir_all(dir);
}

#[test]
fn oracle_subcommand_emits_json_lines() {
    let dir = tmp("oracle");
    let mdp = dir.join("chain.mdp");
    std::fs::write(
        &mdp,
        "# two absorbing states\n2\n0.9\n1.0 0.0\n0.0 1.0\nrewards\n1.0 0.0\nembeddings\n0.0 0.0\n1.0 0.5\n",
    )
    .unwrap();
    for check in ["w1", "dual", "fixedpoint", "theorem"] {
        let out_path = dir.join(format!("{check}.jsonl"));
        let st = bwm()
            .args(["oracle", "--mdp"])
            .arg(&mdp)
            .args(["--check", check, "--out"])
            .arg(&out_path)
            .args(["--t-horizon", "3"])
            .status()
            .unwrap();
        assert_eq!(st.code(), Some(0), "check {check}");
        let text = std::fs::read_to_string(&out_path).unwrap();
        assert!(!text.trim().is_empty());
        for line in text.lines() {
            serde_json::from_str::<serde_json::Value>(line).unwrap();
        }
    }
    // the reward-aware fixed point of the absorbing chain is 1/(1-γ) = 10
    let fp = std::fs::read_to_string(dir.join("fixedpoint.jsonl")).unwrap();
    let first: serde_json::Value = serde_json::from_str(fp.lines().next().unwrap()).unwrap();
    let d01 = first["distances"][0][1].as_f64().unwrap();
    assert!((d01 - 10.0).abs() < 1e-9);

    // unknown check name exits 2
    let out = bwm()
        .args(["oracle", "--mdp"])
        .arg(&mdp)
        .args(["--check", "nonsense", "--out"])
        .arg(dir.join("x.jsonl"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let _ = std::fs::remove_dir_all(dir);
}

#[test]
fn shipped_presets_parse_and_carry_published_values() {
    let root = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let desk = bwm::config::RunConfig::load(&root.join("desk.cfg")).unwrap();
    assert_eq!(desk.image_size, 64);
    assert_eq!(desk.n_patches(), 64);
    assert_eq!(desk.d_z, 64);
    assert_eq!(desk.d_w, 16);
    assert_eq!(desk.n_traj, 500);
    assert_eq!(desk.epochs, 20);

    let paper = bwm::config::RunConfig::load(&root.join("paper.cfg")).unwrap();
    assert_eq!(paper.image_size, 224);
    assert_eq!(paper.n_patches(), 196);
    assert_eq!(paper.d_z, 384);
    assert_eq!(paper.d_w, 32);
    assert_eq!(paper.batch_size, 20);
    assert_eq!(paper.epochs, 50);
    assert_eq!(paper.buffer_capacity, 1000);
    assert_eq!(paper.comparison_size, 200);
    assert_eq!(paper.lr_predictor, 1e-5);
    assert_eq!(paper.lr_action_enc, 1e-4);
    assert_eq!(paper.lr_bisim, 5e-7);
    assert_eq!(paper.action_emb_dim, 10);
    assert_eq!(paper.proprio_emb_dim, 10);
}
