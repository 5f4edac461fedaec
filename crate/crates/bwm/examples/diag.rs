// planner diagnostics against a trained checkpoint
use bwm::harness::load_model;
use bwm::maze::{proprio, render, EnvState, Scenario, ScenarioTag};
use bwm::planner::{mpc_episode, CemConfig, Goal, PlannerStack};

fn main() {
    let ckpt = std::env::args().nth(1).expect("usage: diag CKPT");
    let loaded = load_model(std::path::Path::new(&ckpt)).unwrap();
    let spec = loaded.cfg.maze_spec();
    let stack = loaded.stack();
    let scenario = Scenario::new(ScenarioTag::Nc, 3);

    // 1. cost landscape along a straight corridor toward a goal
    let goal_pos = [7.5, 1.5];
    let goal = Goal::at(&spec, goal_pos, scenario.clone());
    let wg = stack.encode(&goal.frame).unwrap();
    println!("cost of latent distance along the corridor y=1.5 (goal at x=7.5):");
    for i in 0..13 {
        let x = 1.5 + i as f64 * 0.5;
        let s = EnvState::new([x, 1.5], scenario.clone());
        let w = stack.encode(&render(&spec, &s)).unwrap();
        let c: f64 = w.data().iter().zip(wg.data()).map(|(a, b)| (a - b) * (a - b)).sum();
        println!("  x = {:.1}  cost = {:.3}", x, c);
    }

    // 2. action response: does a constant push move the predicted latent
    //    toward the truth of the pushed state?
    let s0 = EnvState::new([3.5, 4.5], scenario.clone());
    let w0 = stack.encode(&render(&spec, &s0)).unwrap();
    let acts = vec![[1.0, 0.0]; 4];
    let rollout = loaded.model.rollout(&w0, proprio(&s0), &acts).unwrap();
    let mut s_true = s0.clone();
    for a in &acts {
        s_true = bwm::maze::step(&spec, &s_true, *a);
    }
    println!("\ntrue position after 4 pushes right: {:?}", s_true.pos);
    let w_true = stack.encode(&render(&spec, &s_true)).unwrap();
    let d_pred_true: f64 = rollout[3].data().iter().zip(w_true.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    let d_pred_start: f64 = rollout[3].data().iter().zip(w0.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    let d_true_start: f64 = w_true.data().iter().zip(w0.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    println!("dist2(pred_T, truth_T) = {:.3}, dist2(pred_T, start) = {:.3}, dist2(truth_T, start) = {:.3}", d_pred_true, d_pred_start, d_true_start);

    // 3. a verbose episode
    let cem = CemConfig::from_run(&loaded.cfg);
    let start = EnvState::new([2.0, 2.0], scenario.clone());
    let goal2 = Goal::at(&spec, [6.5, 6.5], scenario.clone());
    let rec = mpc_episode(&spec, &stack, start, &goal2, &cem, 20, 42).unwrap();
    println!("\nepisode to (6.5, 6.5): success {}, steps {}", rec.success, rec.steps);
    for (i, p) in rec.positions.iter().enumerate() {
        if i % 2 == 0 {
            println!("  step {:>2}: pos ({:.2}, {:.2}) plan cost {:.3}", i, p[0], p[1], rec.plan_costs.get(i).copied().unwrap_or(f64::NAN));
        }
    }
    let _ = PlannerStack { frozen: &loaded.frozen, bisim: None, model: &loaded.model };
}
