//! Decoder-only, frame-causal patch transformer over latent grids.
//!
//! Each context frame contributes its patch tokens (optionally merged in
//! small spatial blocks), one proprio token, and one action token. A
//! frame-causal mask lets every token attend to all tokens of its own and
//! earlier frames, so predictions at a frame depend only on the past.
//! The head reads each frame's patch tokens and predicts the *next*
//! frame's latent grid; `predict_next` is the last frame's prediction.
//!
//! Action and proprio encoders are kernel-1 1-D convolutions (a shared
//! per-component linear map) to a small embedding, flattened and projected
//! to the model width.

mod train;

pub use train::{train_model, EpochMetrics, TrainArtifacts, Trainer};

use crate::autodiff::{he_uniform, BoundParams, Graph, ParamRef, ParamSet, Tensor, Var};
use crate::config::{ModelVariant, RunConfig};
use crate::rng::Rng;
use crate::{Error, Result};

const LN_EPS: f64 = 1e-5;
const MASK_OFF: f64 = -1e30;

#[derive(Clone, Debug)]
pub struct TransitionConfig {
    pub d_latent: usize,
    pub n_patches: usize,
    /// Side of the square patch block merged into one token (1 = none).
    pub patch_group: usize,
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub context_len: usize,
    pub action_dim: usize,
    pub proprio_dim: usize,
    pub action_emb_dim: usize,
    pub proprio_emb_dim: usize,
}

impl TransitionConfig {
    pub fn from_run(cfg: &RunConfig, variant: ModelVariant) -> TransitionConfig {
        TransitionConfig {
            d_latent: cfg.token_latent_dim(variant),
            n_patches: cfg.n_patches(),
            patch_group: cfg.patch_group,
            width: cfg.model_width,
            layers: cfg.model_layers,
            heads: cfg.model_heads,
            mlp_ratio: cfg.mlp_ratio,
            context_len: cfg.context_len,
            action_dim: 2,
            proprio_dim: 4,
            action_emb_dim: cfg.action_emb_dim,
            proprio_emb_dim: cfg.proprio_emb_dim,
        }
    }

    pub fn n_groups(&self) -> usize {
        self.n_patches / (self.patch_group * self.patch_group)
    }

    pub fn tokens_per_frame(&self) -> usize {
        self.n_groups() + 2
    }

    pub fn group_dim(&self) -> usize {
        self.patch_group * self.patch_group * self.d_latent
    }
}

struct BlockRefs {
    ln1_g: ParamRef,
    ln1_b: ParamRef,
    qkv_w: ParamRef,
    qkv_b: ParamRef,
    attn_out_w: ParamRef,
    attn_out_b: ParamRef,
    ln2_g: ParamRef,
    ln2_b: ParamRef,
    fc1_w: ParamRef,
    fc1_b: ParamRef,
    fc2_w: ParamRef,
    fc2_b: ParamRef,
}

struct TokenEncoderRefs {
    conv_w: ParamRef,
    conv_b: ParamRef,
    proj_w: ParamRef,
    proj_b: ParamRef,
}

/// The latent dynamics model plus its action/proprio token encoders.
/// Parameters live in three groups so the optimizer can run per-group
/// learning rates.
pub struct TransitionModel {
    pub cfg: TransitionConfig,
    pub params: ParamSet,
    pub action_params: ParamSet,
    pub proprio_params: ParamSet,
    token_proj_w: ParamRef,
    token_proj_b: ParamRef,
    pos_emb: ParamRef,
    temporal_emb: ParamRef,
    blocks: Vec<BlockRefs>,
    ln_f_g: ParamRef,
    ln_f_b: ParamRef,
    head_w: ParamRef,
    head_b: ParamRef,
    action_enc: TokenEncoderRefs,
    proprio_enc: TokenEncoderRefs,
    /// patch index permutation realizing spatially coherent grouping
    group_perm: Vec<usize>,
    ungroup_perm: Vec<usize>,
}

/// One bound instance of the model on a graph.
pub struct BoundTransition<'g> {
    pub pred: BoundParams<'g>,
    pub act: BoundParams<'g>,
    pub prop: BoundParams<'g>,
}

/// Context frames as graph nodes. `proprios[f] = None` renders that
/// frame's proprio token as zeros (unknown proprio).
pub struct ContextVars<'g> {
    pub latents: Vec<Var<'g>>,
    pub proprios: Vec<Option<Var<'g>>>,
    pub actions: Vec<Var<'g>>,
}

fn grouping_perms(n_patches: usize, group: usize) -> (Vec<usize>, Vec<usize>) {
    let side = (n_patches as f64).sqrt().round() as usize;
    assert_eq!(side * side, n_patches, "patch count must be a square");
    assert_eq!(side % group, 0, "group must divide the patch-grid side");
    let gside = side / group;
    let mut perm = Vec::with_capacity(n_patches);
    for gr in 0..gside {
        for gc in 0..gside {
            for dr in 0..group {
                for dc in 0..group {
                    perm.push((gr * group + dr) * side + gc * group + dc);
                }
            }
        }
    }
    let mut inv = vec![0; n_patches];
    for (dst, &src) in perm.iter().enumerate() {
        inv[src] = dst;
    }
    (perm, inv)
}

impl TransitionModel {
    pub fn new(seed: u64, cfg: TransitionConfig) -> TransitionModel {
        let root = Rng::new(seed);
        let w = cfg.width;
        let gd = cfg.group_dim();
        let mut params = ParamSet::new();
        let token_proj_w = params.add(
            "predictor.token_proj.w",
            he_uniform(&mut root.derive("tok_w"), gd, &[gd, w]),
        );
        let token_proj_b = params.add("predictor.token_proj.b", Tensor::zeros(&[w]));
        let pos_emb = params.add(
            "predictor.pos_emb",
            he_uniform(&mut root.derive("pos"), w, &[cfg.tokens_per_frame(), w]),
        );
        let temporal_emb = params.add(
            "predictor.temporal_emb",
            he_uniform(&mut root.derive("temp"), w, &[cfg.context_len, w]),
        );
        let mut blocks = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let r = root.derive("block").derive_u64(l as u64);
            let pre = |s: &str| format!("predictor.block{l}.{s}");
            blocks.push(BlockRefs {
                ln1_g: params.add(pre("ln1.g"), Tensor::filled(1.0, &[w])),
                ln1_b: params.add(pre("ln1.b"), Tensor::zeros(&[w])),
                qkv_w: params.add(pre("qkv.w"), he_uniform(&mut r.derive("qkv"), w, &[w, 3 * w])),
                qkv_b: params.add(pre("qkv.b"), Tensor::zeros(&[3 * w])),
                attn_out_w: params.add(
                    pre("attn_out.w"),
                    he_uniform(&mut r.derive("attn_out"), w, &[w, w]),
                ),
                attn_out_b: params.add(pre("attn_out.b"), Tensor::zeros(&[w])),
                ln2_g: params.add(pre("ln2.g"), Tensor::filled(1.0, &[w])),
                ln2_b: params.add(pre("ln2.b"), Tensor::zeros(&[w])),
                fc1_w: params.add(
                    pre("mlp.fc1.w"),
                    he_uniform(&mut r.derive("fc1"), w, &[w, cfg.mlp_ratio * w]),
                ),
                fc1_b: params.add(pre("mlp.fc1.b"), Tensor::zeros(&[cfg.mlp_ratio * w])),
                fc2_w: params.add(
                    pre("mlp.fc2.w"),
                    he_uniform(&mut r.derive("fc2"), cfg.mlp_ratio * w, &[cfg.mlp_ratio * w, w]),
                ),
                fc2_b: params.add(pre("mlp.fc2.b"), Tensor::zeros(&[w])),
            });
        }
        let ln_f_g = params.add("predictor.ln_f.g", Tensor::filled(1.0, &[w]));
        let ln_f_b = params.add("predictor.ln_f.b", Tensor::zeros(&[w]));
        let head_w = params.add(
            "predictor.head.w",
            he_uniform(&mut root.derive("head"), w, &[w, gd]),
        );
        let head_b = params.add("predictor.head.b", Tensor::zeros(&[gd]));

        let mut action_params = ParamSet::new();
        let action_enc = TokenEncoderRefs {
            conv_w: action_params.add(
                "action_enc.conv.w",
                he_uniform(&mut root.derive("act_conv"), 1, &[1, cfg.action_emb_dim]),
            ),
            conv_b: action_params.add("action_enc.conv.b", Tensor::zeros(&[cfg.action_emb_dim])),
            proj_w: action_params.add(
                "action_enc.proj.w",
                he_uniform(
                    &mut root.derive("act_proj"),
                    cfg.action_dim * cfg.action_emb_dim,
                    &[cfg.action_dim * cfg.action_emb_dim, w],
                ),
            ),
            proj_b: action_params.add("action_enc.proj.b", Tensor::zeros(&[w])),
        };
        let mut proprio_params = ParamSet::new();
        let proprio_enc = TokenEncoderRefs {
            conv_w: proprio_params.add(
                "proprio_enc.conv.w",
                he_uniform(&mut root.derive("prop_conv"), 1, &[1, cfg.proprio_emb_dim]),
            ),
            conv_b: proprio_params.add("proprio_enc.conv.b", Tensor::zeros(&[cfg.proprio_emb_dim])),
            proj_w: proprio_params.add(
                "proprio_enc.proj.w",
                he_uniform(
                    &mut root.derive("prop_proj"),
                    cfg.proprio_dim * cfg.proprio_emb_dim,
                    &[cfg.proprio_dim * cfg.proprio_emb_dim, w],
                ),
            ),
            proj_b: proprio_params.add("proprio_enc.proj.b", Tensor::zeros(&[w])),
        };

        let (group_perm, ungroup_perm) = grouping_perms(cfg.n_patches, cfg.patch_group);
        TransitionModel {
            cfg,
            params,
            action_params,
            proprio_params,
            token_proj_w,
            token_proj_b,
            pos_emb,
            temporal_emb,
            blocks,
            ln_f_g,
            ln_f_b,
            head_w,
            head_b,
            action_enc,
            proprio_enc,
            group_perm,
            ungroup_perm,
        }
    }

    pub fn bind<'g>(&self, g: &'g Graph, trainable: bool) -> BoundTransition<'g> {
        BoundTransition {
            pred: self.params.bind(g, trainable),
            act: self.action_params.bind(g, trainable),
            prop: self.proprio_params.bind(g, trainable),
        }
    }

    fn frame_causal_mask<'g>(&self, g: &'g Graph, h: usize) -> Var<'g> {
        let f = self.cfg.tokens_per_frame();
        let t = h * f;
        let mut m = vec![0.0; t * t];
        for q in 0..t {
            for k in 0..t {
                if k / f > q / f {
                    m[q * t + k] = MASK_OFF;
                }
            }
        }
        g.constant(Tensor::from_vec(m, &[t, t]))
    }

    fn token_encoder<'g>(
        &self,
        refs: &TokenEncoderRefs,
        bound: &BoundParams<'g>,
        x: Var<'g>,
        dim: usize,
        emb: usize,
    ) -> Result<Var<'g>> {
        let b = x.shape()[0];
        // kernel-1 conv: a shared linear map per component, then flatten + project
        let y = x
            .reshape(&[b, dim, 1])?
            .matmul(bound.var(refs.conv_w))?
            .add(bound.var(refs.conv_b))?
            .gelu()
            .reshape(&[b, dim * emb])?;
        y.matmul(bound.var(refs.proj_w))?
            .add(bound.var(refs.proj_b))
    }

    /// Forward pass producing the next-frame prediction at every context
    /// frame: `[B, H, n_patches, d]`, where the prediction at frame f uses
    /// only frames ≤ f.
    pub fn forward_predictions<'g>(
        &self,
        g: &'g Graph,
        bound: &BoundTransition<'g>,
        ctx: &ContextVars<'g>,
    ) -> Result<Var<'g>> {
        let cfg = &self.cfg;
        let h = ctx.latents.len();
        if h == 0 {
            return Err(Error::Invalid("context must contain at least one frame".into()));
        }
        if h > cfg.context_len {
            return Err(Error::Invalid(format!(
                "context of {h} frames exceeds the model's context length {}",
                cfg.context_len
            )));
        }
        if ctx.actions.len() != h || ctx.proprios.len() != h {
            return Err(Error::Invalid(
                "context latents, actions, and proprios must align".into(),
            ));
        }
        let b = ctx.latents[0].shape()[0];
        for lat in &ctx.latents {
            let sh = lat.shape();
            if sh != vec![b, cfg.n_patches, cfg.d_latent] {
                return Err(Error::ShapeMismatch {
                    op: "predict_next",
                    lhs: sh,
                    rhs: vec![b, cfg.n_patches, cfg.d_latent],
                });
            }
        }
        let v = |r: ParamRef| bound.pred.var(r);
        let f = cfg.tokens_per_frame();
        let ng = cfg.n_groups();
        let gd = cfg.group_dim();

        // per-frame token rows
        let mut frames = Vec::with_capacity(h);
        for fi in 0..h {
            let patches = ctx.latents[fi]
                .gather(1, &self.group_perm)?
                .reshape(&[b, ng, gd])?
                .matmul(v(self.token_proj_w))?
                .add(v(self.token_proj_b))?;
            let prop_tok = match ctx.proprios[fi] {
                Some(p) => self.token_encoder(
                    &self.proprio_enc,
                    &bound.prop,
                    p,
                    cfg.proprio_dim,
                    cfg.proprio_emb_dim,
                )?,
                None => g.constant(Tensor::zeros(&[b, cfg.width])),
            }
            .reshape(&[b, 1, cfg.width])?;
            let act_tok = self
                .token_encoder(
                    &self.action_enc,
                    &bound.act,
                    ctx.actions[fi],
                    cfg.action_dim,
                    cfg.action_emb_dim,
                )?
                .reshape(&[b, 1, cfg.width])?;
            frames.push(patches.concat(prop_tok, 1)?.concat(act_tok, 1)?);
        }
        let mut seq = frames[0];
        for fr in &frames[1..] {
            seq = seq.concat(*fr, 1)?;
        }

        // positional + temporal embeddings
        let pos_idx: Vec<usize> = (0..h).flat_map(|_| 0..f).collect();
        let temp_idx: Vec<usize> = (0..h).flat_map(|fi| std::iter::repeat(fi).take(f)).collect();
        let emb = v(self.pos_emb)
            .gather(0, &pos_idx)?
            .add(v(self.temporal_emb).gather(0, &temp_idx)?)?;
        let mut x = seq.add(emb)?;

        let mask = self.frame_causal_mask(g, h);
        let t = h * f;
        let dh = cfg.width / cfg.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        for blk in &self.blocks {
            let ln1 = x
                .layer_norm(LN_EPS)
                .mul(v(blk.ln1_g))?
                .add(v(blk.ln1_b))?;
            let qkv = ln1.matmul(v(blk.qkv_w))?.add(v(blk.qkv_b))?;
            let split_heads = |z: Var<'g>| -> Result<Var<'g>> {
                z.reshape(&[b, t, cfg.heads, dh])?
                    .swap_axes_12()?
                    .reshape(&[b * cfg.heads, t, dh])
            };
            let q = split_heads(qkv.slice(2, 0, cfg.width)?)?;
            let k = split_heads(qkv.slice(2, cfg.width, cfg.width)?)?;
            let vv = split_heads(qkv.slice(2, 2 * cfg.width, cfg.width)?)?;
            let scores = q.matmul_tb(k)?.scale(scale).add(mask)?;
            let attn = scores.softmax(2)?;
            let merged = attn
                .matmul(vv)?
                .reshape(&[b, cfg.heads, t, dh])?
                .swap_axes_12()?
                .reshape(&[b, t, cfg.width])?;
            let attn_out = merged.matmul(v(blk.attn_out_w))?.add(v(blk.attn_out_b))?;
            x = x.add(attn_out)?;
            let ln2 = x
                .layer_norm(LN_EPS)
                .mul(v(blk.ln2_g))?
                .add(v(blk.ln2_b))?;
            let mlp = ln2
                .matmul(v(blk.fc1_w))?
                .add(v(blk.fc1_b))?
                .gelu()
                .matmul(v(blk.fc2_w))?
                .add(v(blk.fc2_b))?;
            x = x.add(mlp)?;
        }
        let x = x
            .layer_norm(LN_EPS)
            .mul(v(self.ln_f_g))?
            .add(v(self.ln_f_b))?;

        // patch-token outputs at every frame -> next-frame latents
        let patch_idx: Vec<usize> = (0..h).flat_map(|fi| (fi * f)..(fi * f + ng)).collect();
        let out = x
            .gather(1, &patch_idx)?
            .matmul(v(self.head_w))?
            .add(v(self.head_b))?
            .reshape(&[b * h, cfg.n_patches, cfg.d_latent])?
            .gather(1, &self.ungroup_perm)?
            .reshape(&[b, h, cfg.n_patches, cfg.d_latent])?;
        Ok(out)
    }

    /// Prediction from the full context: the next latent grid after the
    /// final frame, `[B, n_patches, d]`.
    pub fn predict_next<'g>(
        &self,
        g: &'g Graph,
        bound: &BoundTransition<'g>,
        ctx: &ContextVars<'g>,
    ) -> Result<Var<'g>> {
        let h = ctx.latents.len();
        let preds = self.forward_predictions(g, bound, ctx)?;
        let b = preds.shape()[0];
        preds
            .slice(1, h - 1, 1)?
            .reshape(&[b, self.cfg.n_patches, self.cfg.d_latent])
    }

    /// Forward-only one-step prediction on plain values: context = a single
    /// frame per batch row. Used for the bootstrap target.
    pub fn predict_one_step_value(
        &self,
        latents: &Tensor,
        actions: &[[f64; 2]],
        proprios: Option<&[[f64; 4]]>,
    ) -> Result<Tensor> {
        let b = latents.shape()[0];
        if actions.len() != b {
            return Err(Error::Invalid("action count must match batch".into()));
        }
        let g = Graph::new();
        let bound = self.bind(&g, false);
        let act = g.constant(Tensor::from_vec(
            actions.iter().flat_map(|a| a.iter().copied()).collect(),
            &[b, 2],
        ));
        let prop = proprios.map(|ps| {
            g.constant(Tensor::from_vec(
                ps.iter().flat_map(|p| p.iter().copied()).collect(),
                &[b, 4],
            ))
        });
        let ctx = ContextVars {
            latents: vec![g.constant(latents.clone())],
            proprios: vec![prop],
            actions: vec![act],
        };
        Ok(self.predict_next(&g, &bound, &ctx)?.value())
    }

    /// Open-loop rollout for a batch of candidate action sequences sharing
    /// a start latent and proprio. Teacher forcing is off: predicted
    /// frames re-enter the context with an unknown (zero-token) proprio,
    /// and the window slides over the most recent `context_len` frames.
    /// Returns the latent at each step, `[n_steps][P, n_patches, d]`.
    pub fn rollout_batch(
        &self,
        w0: &Tensor,
        proprio0: [f64; 4],
        action_seqs: &[Vec<[f64; 2]>],
    ) -> Result<Vec<Tensor>> {
        let p = action_seqs.len();
        if p == 0 || action_seqs[0].is_empty() {
            return Err(Error::Invalid("rollout needs at least one step".into()));
        }
        let t_len = action_seqs[0].len();
        if action_seqs.iter().any(|s| s.len() != t_len) {
            return Err(Error::Invalid("candidate sequences must share a length".into()));
        }
        let (np, d) = (self.cfg.n_patches, self.cfg.d_latent);
        if w0.shape() != [np, d] {
            return Err(Error::ShapeMismatch {
                op: "rollout",
                lhs: w0.shape().to_vec(),
                rhs: vec![np, d],
            });
        }
        // broadcast the start across candidates
        let mut tiled = Vec::with_capacity(p * np * d);
        for _ in 0..p {
            tiled.extend_from_slice(w0.data());
        }
        let mut window: Vec<(Tensor, Option<[f64; 4]>)> =
            vec![(Tensor::from_vec(tiled, &[p, np, d]), Some(proprio0))];
        let mut outputs = Vec::with_capacity(t_len);
        for step in 0..t_len {
            let h = window.len();
            let g = Graph::new();
            let bound = self.bind(&g, false);
            let mut latents = Vec::with_capacity(h);
            let mut proprios = Vec::with_capacity(h);
            let mut actions = Vec::with_capacity(h);
            for (fi, (lat, prop)) in window.iter().enumerate() {
                latents.push(g.constant(lat.clone()));
                proprios.push(prop.map(|pv| {
                    let mut data = Vec::with_capacity(p * 4);
                    for _ in 0..p {
                        data.extend_from_slice(&pv);
                    }
                    g.constant(Tensor::from_vec(data, &[p, 4]))
                }));
                // the action executed at window frame fi
                let global = step + 1 - h + fi;
                let data: Vec<f64> = action_seqs
                    .iter()
                    .flat_map(|s| s[global].iter().copied())
                    .collect();
                actions.push(g.constant(Tensor::from_vec(data, &[p, 2])));
            }
            let ctx = ContextVars {
                latents,
                proprios,
                actions,
            };
            let next = self.predict_next(&g, &bound, &ctx)?.value();
            outputs.push(next.clone());
            window.push((next, None));
            if window.len() > self.cfg.context_len {
                window.remove(0);
            }
        }
        Ok(outputs)
    }

    /// Single-sequence rollout; `[n_steps][n_patches, d]`.
    pub fn rollout(
        &self,
        w0: &Tensor,
        proprio0: [f64; 4],
        actions: &[[f64; 2]],
    ) -> Result<Vec<Tensor>> {
        let (np, d) = (self.cfg.n_patches, self.cfg.d_latent);
        let steps = self.rollout_batch(w0, proprio0, &[actions.to_vec()])?;
        steps.into_iter().map(|t| t.reshaped(&[np, d])).collect()
    }
}
