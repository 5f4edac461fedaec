//! Run configuration: one flat `key = value` text file drives every stage.
//!
//! Unknown keys are rejected (naming the key), values are validated, and
//! a write-then-read round trip reproduces the configuration exactly.
//! Every run writes its resolved configuration next to its outputs.

use std::fmt::Write as _;
use std::path::Path;

use crate::maze::MazeSpec;
use crate::{Error, Result};

/// Which loss wiring a training run uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelVariant {
    /// Full method: bisimulation encoder + staged variance-covariance
    /// regularization.
    Bisim,
    /// Prediction loss only, directly in the frozen feature space.
    JepaOnly,
    /// `JepaOnly` trained on the domain-randomized dataset.
    JepaDr,
    /// Ablation: standard VICReg throughout (no PCA switch).
    BisimStdVicreg,
    /// Collapse demonstration: no variance-covariance regularizer at all.
    BisimNoVcreg,
}

impl ModelVariant {
    pub const ALL: [ModelVariant; 5] = [
        ModelVariant::Bisim,
        ModelVariant::JepaOnly,
        ModelVariant::JepaDr,
        ModelVariant::BisimStdVicreg,
        ModelVariant::BisimNoVcreg,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            ModelVariant::Bisim => "bisim",
            ModelVariant::JepaOnly => "jepa-only",
            ModelVariant::JepaDr => "jepa-dr",
            ModelVariant::BisimStdVicreg => "bisim-std-vicreg",
            ModelVariant::BisimNoVcreg => "bisim-no-vcreg",
        }
    }

    pub fn parse(s: &str) -> Result<ModelVariant> {
        Self::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown model variant `{s}`")))
    }

    /// Does this variant train the bisimulation encoder (vs. bypassing it)?
    pub fn uses_bisim_encoder(&self) -> bool {
        !matches!(self, ModelVariant::JepaOnly | ModelVariant::JepaDr)
    }

    /// Does this variant train on the domain-randomized dataset in a sweep?
    pub fn uses_dr_data(&self) -> bool {
        !matches!(self, ModelVariant::JepaOnly)
    }
}

macro_rules! config_fields {
    ($(($field:ident, $ty:ty, $default:expr, $doc:expr)),+ $(,)?) => {
        /// Every tunable of every stage.
        #[derive(Clone, Debug, PartialEq)]
        pub struct RunConfig {
            $(#[doc = $doc] pub $field: $ty,)+
        }

        impl Default for RunConfig {
            fn default() -> RunConfig {
                RunConfig { $($field: $default,)+ }
            }
        }

        impl RunConfig {
            fn set_key(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $(stringify!($field) => {
                        self.$field = value.parse::<$ty>().map_err(|_| {
                            Error::Config(format!("bad value `{value}` for key `{key}`"))
                        })?;
                        Ok(())
                    })+
                    _ => Err(Error::Config(format!("unknown key `{key}`"))),
                }
            }

            /// Serialize every key in declaration order.
            pub fn to_text(&self) -> String {
                let mut s = String::new();
                $(writeln!(s, "{} = {}", stringify!($field), self.$field).unwrap();)+
                s
            }
        }
    };
}

config_fields![
    // environment
    (grid_size, usize, 9, "maze grid side; 9 uses the built-in layout, other sizes get an open ring"),
    (image_size, usize, 64, "rendered frame side in pixels"),
    (patch_size, usize, 8, "patch side in pixels"),
    (agent_radius, f64, 0.30, "agent disc radius, world units"),
    (goal_radius, f64, 0.45, "success threshold (closed ball), world units"),
    (force_limit, f64, 1.0, "max |action| per axis"),
    (v_max, f64, 1.2, "velocity clamp per axis, world units per step"),
    (dt, f64, 0.3, "integration timestep"),
    // data
    (n_traj, usize, 500, "trajectories per dataset"),
    (traj_len, usize, 40, "actions per trajectory"),
    (dr_fraction, f64, 0.4, "fraction of trajectories with randomized backgrounds"),
    (data_scenario, String, "NC".to_string(), "base rendering scenario for datasets"),
    (data_seed, u64, 1000, "dataset generation seed"),
    // frozen encoder
    (d_z, usize, 64, "frozen feature dimension per patch"),
    (frozen_seed, u64, 7, "frozen encoder weight seed"),
    (beta_slow, f64, 20.0, "background-score gain along the slow direction"),
    // bisimulation encoder
    (d_w, usize, 16, "bisimulation latent dimension per patch"),
    (bisim_hidden, usize, 256, "hidden width of the per-patch projection head"),
    // losses
    (gamma, f64, 0.9, "discount in the one-step bisimulation target"),
    (lambda_bisim, f64, 0.5, "weight of the bisimulation loss"),
    (sigma_min, f64, 1.0, "variance-floor target standard deviation"),
    (eps_var, f64, 1e-4, "numerical epsilon inside the variance hinge"),
    (i0, usize, 2, "first principal component carrying a variance floor (1-indexed)"),
    (alpha_v, f64, 1.0, "variance term weight"),
    (alpha_c, f64, 0.04, "covariance term weight"),
    (switch_epoch, usize, 10, "epoch at which PCA-based regularization replaces standard VICReg (>= epochs keeps standard VICReg throughout)"),
    (pca_frozen_basis, bool, false, "freeze the PCA basis once at the switch epoch instead of per batch"),
    (buffer_capacity, usize, 1000, "bisimulation comparison buffer capacity"),
    (comparison_size, usize, 200, "buffer entries sampled per batch for pairing"),
    // transition model
    (model_width, usize, 128, "transformer width"),
    (model_layers, usize, 4, "transformer blocks"),
    (model_heads, usize, 4, "attention heads"),
    (mlp_ratio, usize, 4, "feed-forward hidden multiple"),
    (context_len, usize, 3, "frames of context H"),
    (patch_group, usize, 1, "side of the patch block merged into one token"),
    (action_emb_dim, usize, 10, "action embedding dimension"),
    (proprio_emb_dim, usize, 10, "proprio embedding dimension"),
    (proprio_dropout, f64, 0.3, "probability of dropping a frame's proprio token during training"),
    // training
    (epochs, usize, 20, "training epochs"),
    (batch_size, usize, 20, "windows per batch"),
    (steps_per_epoch, usize, 0, "batches per epoch; 0 means one window per trajectory"),
    (lr_bisim, f64, 1e-3, "bisimulation encoder learning rate"),
    (lr_predictor, f64, 3e-4, "transition model learning rate"),
    (lr_action_enc, f64, 1e-4, "action encoder learning rate"),
    (lr_proprio_enc, f64, 1e-4, "proprio encoder learning rate"),
    (weight_decay, f64, 0.01, "decoupled weight decay"),
    (train_seed, u64, 2000, "training seed"),
    // planner
    (cem_population, usize, 300, "CEM candidates per iteration"),
    (cem_elites, usize, 30, "CEM elite count"),
    (cem_iters, usize, 10, "CEM iterations per plan"),
    (plan_horizon, usize, 10, "planned action-sequence length"),
    (cem_init_std, f64, 0.5, "initial CEM sampling std"),
    (cem_std_floor, f64, 0.05, "elite-refit std floor"),
    (cem_warm_start, bool, true, "warm-start the CEM mean from the previous plan"),
    (max_steps, usize, 60, "episode cap in MPC steps"),
    (eval_episodes, usize, 50, "episodes per evaluation cell"),
    (eval_seed, u64, 3000, "evaluation seed fixing the paired start/goal set"),
    // variant
    (model_variant, String, "bisim".to_string(), "training variant tag"),
];

impl RunConfig {
    /// Parse `key = value` text. Missing keys keep their defaults; unknown
    /// keys are rejected with the offending key named.
    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "line {}: expected `key = value`, got `{raw}`",
                    lineno + 1
                )));
            };
            cfg.set_key(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(std::fs::write(path, self.resolved_text())?)
    }

    /// The resolved configuration written next to run outputs, with a
    /// header recording fixed implementation choices.
    pub fn resolved_text(&self) -> String {
        format!(
            "# resolved configuration\n# precision = f64, initializer = he-uniform\n# evaluation start/goal pairs are shared across scenarios and variants (paired design)\n{}",
            self.to_text()
        )
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |key: &str, why: String| Err(Error::Config(format!("key `{key}`: {why}")));
        if self.image_size == 0 || self.image_size % self.patch_size != 0 {
            return fail("patch_size", format!("must divide image_size {}", self.image_size));
        }
        let per_side = self.image_size / self.patch_size;
        if self.patch_group == 0 || per_side % self.patch_group != 0 {
            return fail(
                "patch_group",
                format!("must divide patches per side {per_side}"),
            );
        }
        if self.d_w == 0 || self.d_z == 0 {
            return fail("d_w", "latent dimensions must be positive".into());
        }
        if !(1..=self.d_w).contains(&self.i0) {
            return fail("i0", format!("must lie in [1, d_w={}]", self.d_w));
        }
        if self.cem_elites == 0 || self.cem_elites > self.cem_population {
            return fail("cem_elites", "must satisfy 1 <= elites <= population".into());
        }
        if self.plan_horizon == 0 || self.cem_iters == 0 {
            return fail("plan_horizon", "planner sizes must be positive".into());
        }
        if self.context_len == 0 {
            return fail("context_len", "context length must be at least 1".into());
        }
        if self.model_width % self.model_heads != 0 {
            return fail("model_heads", "must divide model_width".into());
        }
        if self.batch_size < 2 {
            return fail("batch_size", "regularizers need batch_size >= 2".into());
        }
        if !(0.0..=1.0).contains(&self.dr_fraction) {
            return fail("dr_fraction", "must lie in [0, 1]".into());
        }
        if self.traj_len < self.context_len + 1 {
            return fail(
                "traj_len",
                format!("needs at least context_len+1 = {}", self.context_len + 1),
            );
        }
        if self.gamma <= 0.0 || self.gamma >= 1.0 {
            return fail("gamma", "must lie in (0, 1)".into());
        }
        ModelVariant::parse(&self.model_variant)?;
        crate::maze::ScenarioTag::parse(&self.data_scenario)?;
        Ok(())
    }

    pub fn variant(&self) -> ModelVariant {
        ModelVariant::parse(&self.model_variant).expect("validated")
    }

    pub fn maze_spec(&self) -> MazeSpec {
        let mut spec = if self.grid_size == 9 {
            MazeSpec::default_layout()
        } else {
            let n = self.grid_size;
            let walls = (0..n * n)
                .map(|i| {
                    let (r, c) = (i / n, i % n);
                    r == 0 || c == 0 || r == n - 1 || c == n - 1
                })
                .collect();
            let mut s = MazeSpec::default_layout();
            s.walls = walls;
            s.grid_size = n;
            s
        };
        spec.agent_radius = self.agent_radius;
        spec.goal_radius = self.goal_radius;
        spec.force_limit = self.force_limit;
        spec.v_max = self.v_max;
        spec.dt = self.dt;
        spec.image_size = self.image_size;
        spec.patch_size = self.patch_size;
        spec
    }

    /// Patches per frame.
    pub fn n_patches(&self) -> usize {
        let per_side = self.image_size / self.patch_size;
        per_side * per_side
    }

    /// Latent dimension the transition model operates in for a variant.
    pub fn token_latent_dim(&self, variant: ModelVariant) -> usize {
        if variant.uses_bisim_encoder() {
            self.d_w
        } else {
            self.d_z
        }
    }
}
