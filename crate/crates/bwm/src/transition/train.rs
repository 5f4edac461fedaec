//! Joint training of the bisimulation encoder and transition model.
//!
//! One optimizer step per batch of context windows. The objective is the
//! prediction loss plus, for bisimulation variants, the weighted pairing
//! loss and the staged variance-covariance regularizer. Four AdamW groups
//! run their own learning rates: bisimulation encoder, predictor, action
//! encoder, proprio encoder.

use std::io::Write as _;
use std::path::Path;

use crate::autodiff::{AdamW, Graph, Tensor, Var};
use crate::checkpoint::{string_tensor, Checkpoint};
use crate::config::{ModelVariant, RunConfig};
use crate::encoders::{
    loss_bisim, loss_pca_vc, loss_vicreg_standard, mse, pca_basis, staged_regularizer,
    BisimBuffer, BisimEncoder, BufferEntry, FrozenEncoder, RegPhase,
};
use crate::maze::Dataset;
use crate::rng::Rng;
use crate::{Error, Result};

use super::{ContextVars, TransitionConfig, TransitionModel};

/// One row of `train_metrics.csv`.
#[derive(Clone, Copy, Debug)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss_dyn: f64,
    pub loss_bisim: f64,
    pub loss_var: f64,
    pub loss_cov: f64,
    pub total: f64,
}

/// One row of `train_diag.csv`: latent-geometry diagnostics on a fixed
/// held-out batch. Row 0 is measured before any training.
#[derive(Clone, Copy, Debug)]
pub struct DiagRow {
    pub epoch: usize,
    pub mean_pairwise_w: f64,
    pub min_tail_pc_std: f64,
}

pub struct TrainArtifacts {
    pub metrics: Vec<EpochMetrics>,
    pub diag: Vec<DiagRow>,
    pub wall_seconds: f64,
}

pub struct Trainer {
    pub cfg: RunConfig,
    pub variant: ModelVariant,
    pub frozen: FrozenEncoder,
    pub bisim: Option<BisimEncoder>,
    pub model: TransitionModel,
    pub buffer: BisimBuffer,
    opt_bisim: AdamW,
    opt_pred: AdamW,
    opt_act: AdamW,
    opt_prop: AdamW,
    rng: Rng,
    frozen_pca_basis: Option<Tensor>,
    warned_empty_buffer: bool,
}

impl Trainer {
    pub fn new(cfg: &RunConfig) -> Result<Trainer> {
        cfg.validate()?;
        let variant = cfg.variant();
        let frozen = FrozenEncoder::new(
            cfg.frozen_seed,
            cfg.image_size,
            cfg.patch_size,
            cfg.d_z,
            cfg.beta_slow,
        )?;
        let bisim = variant.uses_bisim_encoder().then(|| {
            BisimEncoder::new(
                cfg.train_seed ^ 0xb151,
                cfg.d_z,
                cfg.d_w,
                cfg.bisim_hidden,
                cfg.n_patches(),
            )
        });
        let model = TransitionModel::new(
            cfg.train_seed ^ 0x7ead,
            TransitionConfig::from_run(cfg, variant),
        );
        Ok(Trainer {
            cfg: cfg.clone(),
            variant,
            frozen,
            bisim,
            model,
            buffer: BisimBuffer::new(cfg.buffer_capacity),
            opt_bisim: AdamW::new(cfg.lr_bisim, cfg.weight_decay),
            opt_pred: AdamW::new(cfg.lr_predictor, cfg.weight_decay),
            opt_act: AdamW::new(cfg.lr_action_enc, cfg.weight_decay),
            opt_prop: AdamW::new(cfg.lr_proprio_enc, cfg.weight_decay),
            rng: Rng::new(cfg.train_seed),
            frozen_pca_basis: None,
            warned_empty_buffer: false,
        })
    }

    fn steps_per_epoch(&self, dataset: &Dataset) -> usize {
        if self.cfg.steps_per_epoch > 0 {
            self.cfg.steps_per_epoch
        } else {
            dataset.meta.n_traj.div_ceil(self.cfg.batch_size)
        }
    }

    /// Which regularizer phase a variant runs at an epoch.
    fn reg_phase(&self, epoch: usize) -> Option<RegPhase> {
        match self.variant {
            ModelVariant::Bisim => Some(staged_regularizer(epoch, self.cfg.switch_epoch)),
            ModelVariant::BisimStdVicreg => Some(RegPhase::StandardVicreg),
            ModelVariant::BisimNoVcreg => None,
            ModelVariant::JepaOnly | ModelVariant::JepaDr => None,
        }
    }

    /// One pass over the dataset (by default one sampled window per
    /// trajectory). Refreshes stale buffer latents first, then runs
    /// batched forward/backward/update steps.
    pub fn train_epoch(&mut self, dataset: &Dataset, epoch: usize) -> Result<EpochMetrics> {
        let h = self.cfg.context_len;
        if dataset.meta.traj_len < h + 1 {
            return Err(Error::Invalid(format!(
                "trajectories of length {} are too short for context {h}",
                dataset.meta.traj_len
            )));
        }
        if let Some(enc) = &self.bisim {
            if epoch > 0 && !self.buffer.is_empty() {
                self.buffer.refresh(|z| {
                    let w = enc.encode_value(z)?;
                    Ok(w.into_data())
                })?;
            }
        }
        // one-time basis for the frozen-basis mode, computed at the switch
        // epoch from the refreshed buffer
        if self.cfg.pca_frozen_basis
            && self.frozen_pca_basis.is_none()
            && self.reg_phase(epoch) == Some(RegPhase::PcaVc)
            && self.buffer.len() >= 2
        {
            let d = self.cfg.d_w;
            let mut rows = Vec::new();
            for i in 0..self.buffer.len() {
                rows.extend_from_slice(&self.buffer.get(i).w_flat);
            }
            let m = rows.len() / d;
            let (basis, _) = pca_basis(&Tensor::from_vec(rows, &[m, d]))?;
            self.frozen_pca_basis = Some(basis);
        }

        let steps = self.steps_per_epoch(dataset);
        let rng = self.rng.derive("epoch").derive_u64(epoch as u64);
        let mut acc = EpochMetrics {
            epoch,
            loss_dyn: 0.0,
            loss_bisim: 0.0,
            loss_var: 0.0,
            loss_cov: 0.0,
            total: 0.0,
        };
        for step in 0..steps {
            let m = self.train_step(dataset, epoch, &mut rng.derive_u64(step as u64))?;
            acc.loss_dyn += m.loss_dyn / steps as f64;
            acc.loss_bisim += m.loss_bisim / steps as f64;
            acc.loss_var += m.loss_var / steps as f64;
            acc.loss_cov += m.loss_cov / steps as f64;
            acc.total += m.total / steps as f64;
        }
        Ok(acc)
    }

    fn train_step(
        &mut self,
        dataset: &Dataset,
        epoch: usize,
        rng: &mut Rng,
    ) -> Result<EpochMetrics> {
        let cfg = self.cfg.clone();
        let h = cfg.context_len;
        let b = cfg.batch_size;
        let n_p = cfg.n_patches();
        let valid_t = dataset.meta.traj_len - h; // t in [h-1, h-1 + valid_t)
        let frames_per_window = h + 1;

        // sample windows and load frames
        let mut frames = Vec::with_capacity(b * frames_per_window);
        let mut window_meta = Vec::with_capacity(b);
        let mut proprio_rows = vec![Vec::with_capacity(b * 4); h];
        let mut action_rows = vec![Vec::with_capacity(b * 2); h];
        for _ in 0..b {
            let traj = rng.uniform_usize(dataset.meta.n_traj);
            let t = h - 1 + rng.uniform_usize(valid_t + 1);
            for f in 0..frames_per_window {
                frames.push(dataset.frame(traj, t - (h - 1) + f)?);
            }
            for f in 0..h {
                let tf = t - (h - 1) + f;
                proprio_rows[f].extend_from_slice(&dataset.proprio(traj, tf));
                action_rows[f].extend_from_slice(&dataset.action(traj, tf));
            }
            window_meta.push((traj, t));
        }
        let z_all = self.frozen.encode_batch(&frames)?; // [b·(h+1), n_p, d_z]

        let g = Graph::new();
        let bisim_bound = self.bisim.as_ref().map(|e| (e, e.bind(&g, true)));
        let model_bound = self.model.bind(&g, true);
        let z_var = g.constant(z_all.clone());
        let latents_all = match &bisim_bound {
            Some((enc, bound)) => enc.forward(bound, z_var)?,
            None => z_var,
        };
        let frame_latents: Vec<Var> = (0..frames_per_window)
            .map(|f| {
                let idx: Vec<usize> = (0..b).map(|bi| bi * frames_per_window + f).collect();
                latents_all.gather(0, &idx)
            })
            .collect::<Result<_>>()?;

        // context with per-frame proprio dropout
        let mut proprios = Vec::with_capacity(h);
        let mut actions = Vec::with_capacity(h);
        for f in 0..h {
            let keep = rng.next_f64() >= cfg.proprio_dropout;
            proprios.push(keep.then(|| {
                g.constant(Tensor::from_vec(proprio_rows[f].clone(), &[b, 4]))
            }));
            actions.push(g.constant(Tensor::from_vec(action_rows[f].clone(), &[b, 2])));
        }
        let ctx = ContextVars {
            latents: frame_latents[..h].to_vec(),
            proprios,
            actions,
        };
        let d_latent = self.model.cfg.d_latent;
        // one-step-ahead supervision at every causal prefix: the
        // prediction at frame f (which sees frames <= f only) regresses
        // frame f+1's latents
        let preds = self.model.forward_predictions(&g, &model_bound, &ctx)?;
        let mut target = frame_latents[1].reshape(&[b, 1, n_p, d_latent])?;
        for f in 2..=h {
            target = target.concat(frame_latents[f].reshape(&[b, 1, n_p, d_latent])?, 1)?;
        }
        let l_dyn = mse(preds, target)?;

        let w_t = frame_latents[h - 1];
        let w_t_flat = w_t.reshape(&[b, n_p * d_latent])?;

        // bisimulation pairing loss against buffered states
        let mut l_bisim: Option<Var> = None;
        if self.variant.uses_bisim_encoder() && cfg.lambda_bisim > 0.0 {
            if self.buffer.is_empty() {
                if !self.warned_empty_buffer {
                    eprintln!("warning: comparison buffer empty, bisimulation loss contributes 0 this step");
                    self.warned_empty_buffer = true;
                }
            } else {
                let picks = self
                    .buffer
                    .sample_pairs(rng, cfg.comparison_size, b);
                let mut pair_flat = Vec::with_capacity(b * n_p * d_latent);
                let mut pair_actions = Vec::with_capacity(b);
                for &i in &picks {
                    let e = self.buffer.get(i);
                    pair_flat.extend_from_slice(&e.w_flat);
                    pair_actions.push(e.action);
                }
                let pair_tensor = Tensor::from_vec(pair_flat, &[b, n_p * d_latent]);
                // one-step bootstrap targets, gradient-blocked by construction
                let w_t_value = w_t.value();
                let batch_actions: Vec<[f64; 2]> = (0..b)
                    .map(|bi| {
                        let row = &action_rows[h - 1][bi * 2..bi * 2 + 2];
                        [row[0], row[1]]
                    })
                    .collect();
                let pred_self = self
                    .model
                    .predict_one_step_value(&w_t_value, &batch_actions, None)?;
                let pred_pair = self.model.predict_one_step_value(
                    &pair_tensor.clone().reshaped(&[b, n_p, d_latent])?,
                    &pair_actions,
                    None,
                )?;
                let mut delta = Vec::with_capacity(b);
                for bi in 0..b {
                    let x = &pred_self.data()[bi * n_p * d_latent..(bi + 1) * n_p * d_latent];
                    let y = &pred_pair.data()[bi * n_p * d_latent..(bi + 1) * n_p * d_latent];
                    let dist = x
                        .iter()
                        .zip(y)
                        .map(|(a, c)| (a - c) * (a - c))
                        .sum::<f64>()
                        .sqrt();
                    delta.push(cfg.gamma * dist);
                }
                l_bisim = Some(loss_bisim(
                    w_t_flat,
                    &pair_tensor,
                    &Tensor::from_vec(delta, &[b]),
                )?);
            }
        }

        // staged variance-covariance regularizer
        let mut reg_terms: Option<(Var, Var, RegPhase)> = None;
        if let Some(phase) = self.reg_phase(epoch) {
            match phase {
                RegPhase::StandardVicreg => {
                    let (v, c) = loss_vicreg_standard(w_t_flat, cfg.sigma_min, cfg.eps_var)?;
                    reg_terms = Some((v, c, phase));
                }
                RegPhase::PcaVc => {
                    let rows = w_t.reshape(&[b * n_p, d_latent])?;
                    let basis = match &self.frozen_pca_basis {
                        Some(basis) => basis.clone(),
                        None => pca_basis(&rows.value())?.0,
                    };
                    let (v, c) =
                        loss_pca_vc(rows, &basis, cfg.i0, cfg.sigma_min, cfg.eps_var)?;
                    reg_terms = Some((v, c, phase));
                }
            }
        }

        // total objective
        let mut total = l_dyn;
        if let Some(lb) = l_bisim {
            total = total.add(lb.scale(cfg.lambda_bisim))?;
        }
        if let Some((v, c, phase)) = &reg_terms {
            let (wv, wc) = match phase {
                RegPhase::StandardVicreg => (1.0, 1.0),
                RegPhase::PcaVc => (cfg.alpha_v, cfg.alpha_c),
            };
            total = total.add(v.scale(wv))?.add(c.scale(wc))?;
        }
        total.backward()?;

        // collect gradients, then release the graph borrows before mutating
        let grads_bisim = bisim_bound.as_ref().map(|(_, bound)| bound.grads(&g));
        let grads_pred = model_bound.pred.grads(&g);
        let grads_act = model_bound.act.grads(&g);
        let grads_prop = model_bound.prop.grads(&g);
        drop(bisim_bound);
        if let (Some(gr), Some(enc)) = (grads_bisim, self.bisim.as_mut()) {
            self.opt_bisim.step(&mut enc.params, &gr);
        }
        self.opt_pred.step(&mut self.model.params, &grads_pred);
        self.opt_act.step(&mut self.model.action_params, &grads_act);
        self.opt_prop.step(&mut self.model.proprio_params, &grads_prop);

        // push current states into the comparison buffer
        if self.variant.uses_bisim_encoder() {
            let w_t_value = w_t.value();
            let d_z = cfg.d_z;
            for (bi, (traj, t)) in window_meta.iter().enumerate() {
                let zi = bi * frames_per_window + (h - 1);
                let z = Tensor::from_vec(
                    z_all.data()[zi * n_p * d_z..(zi + 1) * n_p * d_z].to_vec(),
                    &[n_p, d_z],
                );
                let w_flat =
                    w_t_value.data()[bi * n_p * d_latent..(bi + 1) * n_p * d_latent].to_vec();
                let row = &action_rows[h - 1][bi * 2..bi * 2 + 2];
                self.buffer.push(BufferEntry {
                    z,
                    w_flat,
                    action: [row[0], row[1]],
                    traj: *traj,
                    t: *t,
                });
            }
        }

        let (lv, lc) = reg_terms
            .as_ref()
            .map(|(v, c, _)| (v.item(), c.item()))
            .unwrap_or((0.0, 0.0));
        Ok(EpochMetrics {
            epoch,
            loss_dyn: l_dyn.item(),
            loss_bisim: l_bisim.map(|v| v.item()).unwrap_or(0.0),
            loss_var: lv,
            loss_cov: lc,
            total: total.item(),
        })
    }

    /// Latent-geometry diagnostics on a fixed held-out batch of freshly
    /// rendered states: mean pairwise distance between flattened latents
    /// and the smallest tail-PC standard deviation in per-patch space.
    pub fn diagnostics(&self, epoch: usize) -> Result<DiagRow> {
        use crate::maze::{render, EnvState, Scenario, ScenarioTag};
        let spec = self.cfg.maze_spec();
        let mut rng = Rng::new(self.cfg.train_seed).derive("diagnostics");
        let k = 24;
        let frames: Vec<Tensor> = (0..k)
            .map(|_| {
                let pos = spec.sample_free_position(&mut rng);
                render(&spec, &EnvState::new(pos, Scenario::new(ScenarioTag::Nc, 17)))
            })
            .collect();
        let z = self.frozen.encode_batch(&frames)?;
        let w = match &self.bisim {
            Some(enc) => enc.encode_value(&z)?,
            None => z,
        };
        let d = self.model.cfg.d_latent;
        let n_p = self.cfg.n_patches();
        let flat_dim = n_p * d;
        let mut mean_pairwise = 0.0;
        let mut count = 0.0;
        for i in 0..k {
            for j in (i + 1)..k {
                let a = &w.data()[i * flat_dim..(i + 1) * flat_dim];
                let bb = &w.data()[j * flat_dim..(j + 1) * flat_dim];
                mean_pairwise += a
                    .iter()
                    .zip(bb)
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum::<f64>()
                    .sqrt();
                count += 1.0;
            }
        }
        mean_pairwise /= count;
        let rows = Tensor::from_vec(w.data().to_vec(), &[k * n_p, d]);
        let (_, eigvals) = pca_basis(&rows)?;
        let min_tail = eigvals[self.cfg.i0 - 1..]
            .iter()
            .map(|l| l.max(0.0).sqrt())
            .fold(f64::INFINITY, f64::min);
        Ok(DiagRow {
            epoch,
            mean_pairwise_w: mean_pairwise,
            min_tail_pc_std: min_tail,
        })
    }

    /// Serialize everything into one checkpoint, including the resolved
    /// configuration as an embedded byte tensor.
    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        ck.insert("meta.config", string_tensor(&self.cfg.resolved_text()));
        for (name, t) in self.frozen.export_tensors() {
            ck.insert(name, t);
        }
        if let Some(enc) = &self.bisim {
            for (name, t) in enc.params.iter() {
                ck.insert(name, t.clone());
            }
        }
        for set in [
            &self.model.params,
            &self.model.action_params,
            &self.model.proprio_params,
        ] {
            for (name, t) in set.iter() {
                ck.insert(name, t.clone());
            }
        }
        ck
    }
}

/// Full training run: epochs, metrics/diagnostics CSVs, rollout-error
/// curve, checkpoint, resolved config. Returns per-epoch metrics.
pub fn train_model(cfg: &RunConfig, dataset: &Dataset, out_dir: &Path) -> Result<TrainArtifacts> {
    std::fs::create_dir_all(out_dir)?;
    let started = std::time::Instant::now();
    let mut trainer = Trainer::new(cfg)?;
    let frozen_checksum = trainer.frozen.checksum();

    let mut metrics = Vec::with_capacity(cfg.epochs);
    let mut diag = vec![trainer.diagnostics(0)?];
    let mut last_phase = None;
    for epoch in 0..cfg.epochs {
        let phase = trainer.reg_phase(epoch);
        if phase != last_phase {
            if let Some(p) = &phase {
                eprintln!("epoch {epoch}: regularizer phase {p:?}");
            }
            last_phase = phase;
        }
        let m = trainer.train_epoch(dataset, epoch)?;
        diag.push(DiagRow {
            epoch: epoch + 1,
            ..trainer.diagnostics(epoch + 1)?
        });
        metrics.push(m);
    }
    assert_eq!(
        frozen_checksum,
        trainer.frozen.checksum(),
        "frozen encoder weights changed during training"
    );

    // train_metrics.csv
    let mut f = std::io::BufWriter::new(std::fs::File::create(out_dir.join("train_metrics.csv"))?);
    writeln!(f, "epoch,loss_dyn,loss_bisim,loss_var,loss_cov,total")?;
    for m in &metrics {
        writeln!(
            f,
            "{},{},{},{},{},{}",
            m.epoch, m.loss_dyn, m.loss_bisim, m.loss_var, m.loss_cov, m.total
        )?;
    }
    f.flush()?;

    // train_diag.csv
    let mut f = std::io::BufWriter::new(std::fs::File::create(out_dir.join("train_diag.csv"))?);
    writeln!(f, "epoch,mean_pairwise_w,min_tail_pc_std")?;
    for d in &diag {
        writeln!(f, "{},{},{}", d.epoch, d.mean_pairwise_w, d.min_tail_pc_std)?;
    }
    f.flush()?;

    // open-loop rollout error curve on held-out windows
    write_rollout_curve(&trainer, dataset, out_dir)?;

    trainer.checkpoint().save(&out_dir.join("checkpoint.bwm"))?;
    cfg.save(&out_dir.join("resolved_config.cfg"))?;
    Ok(TrainArtifacts {
        metrics,
        diag,
        wall_seconds: started.elapsed().as_secs_f64(),
    })
}

fn write_rollout_curve(trainer: &Trainer, dataset: &Dataset, out_dir: &Path) -> Result<()> {
    let cfg = &trainer.cfg;
    let n_p = cfg.n_patches();
    let d = trainer.model.cfg.d_latent;
    let t_max = (dataset.meta.traj_len - 1).min(10);
    let n_eval = 4.min(dataset.meta.n_traj);
    let mut acc = vec![0.0f64; t_max];
    for traj in 0..n_eval {
        let frames: Vec<Tensor> = (0..=t_max).map(|t| dataset.frame(traj, t)).collect::<Result<_>>()?;
        let z = trainer.frozen.encode_batch(&frames)?;
        let w = match &trainer.bisim {
            Some(enc) => enc.encode_value(&z)?,
            None => z,
        };
        let w0 = Tensor::from_vec(w.data()[..n_p * d].to_vec(), &[n_p, d]);
        let actions: Vec<[f64; 2]> = (0..t_max).map(|t| dataset.action(traj, t)).collect();
        let rollout = trainer.model.rollout(&w0, dataset.proprio(traj, 0), &actions)?;
        for (k, pred) in rollout.iter().enumerate() {
            let truth = &w.data()[(k + 1) * n_p * d..(k + 2) * n_p * d];
            let mse: f64 = pred
                .data()
                .iter()
                .zip(truth)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                / (n_p * d) as f64;
            acc[k] += mse / n_eval as f64;
        }
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(out_dir.join("rollout_mse.csv"))?);
    writeln!(f, "step,mse")?;
    for (k, v) in acc.iter().enumerate() {
        writeln!(f, "{},{}", k + 1, v)?;
    }
    Ok(())
}
