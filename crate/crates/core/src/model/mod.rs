//! The scoring network and its hand-derived gradients.
//!
//! ```text
//! z    = [mean(query tokens), user, country, task, source, target, (cluster),
//!         dense, extra_dense, (σ(user·target), user ⊙ target)]
//! x0   = W_in z + b_in
//! x_l+1 = x0 ⊙ (w_l · x_l) + b_l + x_l                 cross layers
//! h_k+1 = h_k + W2_k relu(W1_k h_k + b1_k) + b2_k       residual blocks, h_0 = x_L
//! p    = σ(w_out · h_K + b_out)
//! ```
//!
//! One parameter set scores every task; the task only enters as an input.
//! Everything is `f64` so finite-difference checks stay meaningful.

mod adam;
pub mod checkpoint;
mod tensor;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use adam::{AdamConfig, AdamState};
pub use tensor::{axpy, dot, Tensor};

use crate::error::{Error, Result};
use crate::features::{FeatureBundle, FeatureSchema, NULL_ID};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub n_cross_layers: usize,
    pub n_residual_blocks: usize,
    pub hidden_dim: usize,
    pub seed: u64,
    pub init_scale: f64,
    /// Source and target entities look up the same table.
    pub shared_entity_table: bool,
    /// Feed `σ(user·target)` and `user ⊙ target` from the model's own
    /// embeddings into the input layer.
    pub affinity_inputs: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            embed_dim: 16,
            n_cross_layers: 2,
            n_residual_blocks: 2,
            hidden_dim: 64,
            seed: 7,
            init_scale: 0.05,
            shared_entity_table: true,
            affinity_inputs: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.hidden_dim == 0 {
            return Err(Error::InvalidConfig("embed_dim and hidden_dim must be > 0".into()));
        }
        if !(self.init_scale >= 0.0 && self.init_scale.is_finite()) {
            return Err(Error::InvalidConfig("init_scale must be finite and >= 0".into()));
        }
        Ok(())
    }

    /// Width of the concatenated input `z`.
    pub fn input_width(&self, schema: &FeatureSchema) -> usize {
        let d = self.embed_dim;
        let n_tables = 6 + usize::from(schema.cluster_rows.is_some());
        n_tables * d + schema.dense_len + schema.extra_dense_len + if self.affinity_inputs { d + 1 } else { 0 }
    }
}

/// Every learned tensor. Gradients use the same layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    pub e_user: Tensor,
    pub e_country: Tensor,
    pub e_task: Tensor,
    pub e_entity: Tensor,
    /// Only when source and target tables are not shared.
    pub e_source: Option<Tensor>,
    pub e_token: Tensor,
    pub e_cluster: Option<Tensor>,
    pub w_in: Tensor,
    pub b_in: Tensor,
    pub cross_w: Vec<Tensor>,
    pub cross_b: Vec<Tensor>,
    pub res_w1: Vec<Tensor>,
    pub res_b1: Vec<Tensor>,
    pub res_w2: Vec<Tensor>,
    pub res_b2: Vec<Tensor>,
    pub w_out: Tensor,
    pub b_out: Tensor,
}

impl Weights {
    /// Tensors in a fixed order with stable names.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("e_user".into(), &self.e_user),
            ("e_country".into(), &self.e_country),
            ("e_task".into(), &self.e_task),
            ("e_entity".into(), &self.e_entity),
        ];
        if let Some(t) = &self.e_source {
            out.push(("e_source".into(), t));
        }
        out.push(("e_token".into(), &self.e_token));
        if let Some(t) = &self.e_cluster {
            out.push(("e_cluster".into(), t));
        }
        out.push(("w_in".into(), &self.w_in));
        out.push(("b_in".into(), &self.b_in));
        for (l, (w, b)) in self.cross_w.iter().zip(&self.cross_b).enumerate() {
            out.push((format!("cross_w.{l}"), w));
            out.push((format!("cross_b.{l}"), b));
        }
        for k in 0..self.res_w1.len() {
            out.push((format!("res_w1.{k}"), &self.res_w1[k]));
            out.push((format!("res_b1.{k}"), &self.res_b1[k]));
            out.push((format!("res_w2.{k}"), &self.res_w2[k]));
            out.push((format!("res_b2.{k}"), &self.res_b2[k]));
        }
        out.push(("w_out".into(), &self.w_out));
        out.push(("b_out".into(), &self.b_out));
        out
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        self.named().into_iter().map(|(_, t)| t).collect()
    }

    /// Same order as [`Weights::named`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = vec![&mut self.e_user, &mut self.e_country, &mut self.e_task, &mut self.e_entity];
        if let Some(t) = &mut self.e_source {
            out.push(t);
        }
        out.push(&mut self.e_token);
        if let Some(t) = &mut self.e_cluster {
            out.push(t);
        }
        out.push(&mut self.w_in);
        out.push(&mut self.b_in);
        for (w, b) in self.cross_w.iter_mut().zip(&mut self.cross_b) {
            out.push(w);
            out.push(b);
        }
        for (((w1, b1), w2), b2) in
            self.res_w1.iter_mut().zip(&mut self.res_b1).zip(&mut self.res_w2).zip(&mut self.res_b2)
        {
            out.push(w1);
            out.push(b1);
            out.push(w2);
            out.push(b2);
        }
        out.push(&mut self.w_out);
        out.push(&mut self.b_out);
        out
    }

    pub fn zeros_like(&self) -> Weights {
        let mut z = self.clone();
        z.tensors_mut().into_iter().for_each(|t| t.fill(0.0));
        z
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }
}

pub type Gradients = Weights;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub schema: FeatureSchema,
    pub weights: Weights,
    pub version: String,
}

/// Intermediates retained by [`ModelParams::forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct Tape {
    bundle: FeatureBundle,
    /// Non-null query token ids that were pooled (the null row if none).
    pooled_tokens: Vec<u32>,
    z: Vec<f64>,
    /// x_0 .. x_L.
    xs: Vec<Vec<f64>>,
    /// w_l · x_l per cross layer.
    cross_s: Vec<f64>,
    /// Residual inputs h_0 .. h_K.
    hs: Vec<Vec<f64>>,
    /// Pre-activations per block.
    pre: Vec<Vec<f64>>,
    /// relu outputs per block.
    act: Vec<Vec<f64>>,
    affinity: Option<f64>,
    pub logit: f64,
    pub p: f64,
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Binary cross entropy of `σ(logit)` against `y`, evaluated without
/// forming the probability.
pub fn bce_with_logit(logit: f64, y: f64) -> f64 {
    logit.max(0.0) - logit * y + (-logit.abs()).exp().ln_1p()
}

/// Binary cross entropy for a probability in (0, 1).
pub fn bce_loss(p: f64, y: u8) -> f64 {
    let logit = (p / (1.0 - p)).ln();
    bce_with_logit(logit, f64::from(y))
}

impl ModelParams {
    /// Uniform(±init_scale) embeddings, Glorot-uniform dense layers, zero biases.
    pub fn init(config: ModelConfig, schema: FeatureSchema) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (d, h, s) = (config.embed_dim, config.hidden_dim, config.init_scale);
        let width = config.input_width(&schema);
        let mut table = |rows| Tensor::uniform(rows, d, s, &mut rng);
        let e_user = table(schema.user_rows);
        let e_country = table(schema.country_rows);
        let e_task = table(schema.task_rows);
        let e_entity = table(schema.entity_rows);
        let e_source = (!config.shared_entity_table).then(|| table(schema.entity_rows));
        let e_token = table(schema.token_rows);
        let e_cluster = schema.cluster_rows.map(&mut table);
        let glorot = |rows: usize, cols: usize, rng: &mut ChaCha8Rng| {
            Tensor::uniform(rows, cols, (6.0 / (rows + cols) as f64).sqrt(), rng)
        };
        let w_in = glorot(h, width, &mut rng);
        // Cross layers start as the identity map.
        let cross_w = (0..config.n_cross_layers).map(|_| Tensor::vector(h)).collect();
        let cross_b = (0..config.n_cross_layers).map(|_| Tensor::vector(h)).collect();
        let mut res_w1 = Vec::new();
        let mut res_w2 = Vec::new();
        for _ in 0..config.n_residual_blocks {
            res_w1.push(glorot(h, h, &mut rng));
            res_w2.push(glorot(h, h, &mut rng));
        }
        let res_b = || (0..config.n_residual_blocks).map(|_| Tensor::vector(h)).collect::<Vec<_>>();
        let weights = Weights {
            e_user,
            e_country,
            e_task,
            e_entity,
            e_source,
            e_token,
            e_cluster,
            w_in,
            b_in: Tensor::vector(h),
            cross_w,
            cross_b,
            res_w1,
            res_b1: res_b(),
            res_w2,
            res_b2: res_b(),
            w_out: glorot(1, h, &mut rng),
            b_out: Tensor::vector(1),
        };
        let mut params = ModelParams { config, schema, weights, version: String::new() };
        params.version = params.fingerprint();
        Ok(params)
    }

    /// Content hash over config, schema and every tensor bit.
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(serde_json::to_vec(&self.config).expect("config serializes"));
        hasher.update(serde_json::to_vec(&self.schema).expect("schema serializes"));
        for t in self.weights.tensors() {
            for x in &t.data {
                hasher.update(x.to_le_bytes());
            }
        }
        hasher.finalize().iter().take(6).map(|b| format!("{b:02x}")).collect()
    }

    fn source_table(&self) -> &Tensor {
        self.weights.e_source.as_ref().unwrap_or(&self.weights.e_entity)
    }

    pub fn score(&self, bundle: &FeatureBundle) -> Result<f64> {
        Ok(self.forward(bundle)?.p)
    }

    pub fn forward(&self, bundle: &FeatureBundle) -> Result<Tape> {
        self.schema.check(bundle)?;
        let w = &self.weights;
        let cfg = &self.config;
        let d = cfg.embed_dim;
        let row = |t: &Tensor, idx: u32| t.row(idx as usize).to_vec();

        let mut z = Vec::with_capacity(cfg.input_width(&self.schema));
        let mut pooled_tokens: Vec<u32> = bundle.query_token_idxs.iter().copied().filter(|&t| t != NULL_ID).collect();
        if pooled_tokens.is_empty() {
            pooled_tokens.push(NULL_ID);
        }
        let mut q = vec![0.0; d];
        let inv = 1.0 / pooled_tokens.len() as f64;
        for &t in &pooled_tokens {
            axpy(inv, w.e_token.row(t as usize), &mut q);
        }
        z.extend_from_slice(&q);
        z.extend(row(&w.e_user, bundle.user_id_idx));
        z.extend(row(&w.e_country, bundle.country_idx));
        z.extend(row(&w.e_task, bundle.task_idx));
        z.extend(row(self.source_table(), bundle.source_entity_idx));
        z.extend(row(&w.e_entity, bundle.target_entity_idx));
        if let (Some(table), Some(c)) = (&w.e_cluster, bundle.cluster_idx) {
            z.extend(row(table, c));
        }
        z.extend_from_slice(&bundle.dense);
        z.extend_from_slice(&bundle.extra_dense);
        let mut affinity = None;
        if cfg.affinity_inputs {
            let u = w.e_user.row(bundle.user_id_idx as usize);
            let t = w.e_entity.row(bundle.target_entity_idx as usize);
            let a = sigmoid(dot(u, t));
            affinity = Some(a);
            z.push(a);
            z.extend(u.iter().zip(t).map(|(x, y)| x * y));
        }
        debug_assert_eq!(z.len(), cfg.input_width(&self.schema));

        let h = cfg.hidden_dim;
        let mut x0 = vec![0.0; h];
        w.w_in.matvec_into(&z, &w.b_in.data, &mut x0);
        let mut xs = vec![x0];
        let mut cross_s = Vec::with_capacity(cfg.n_cross_layers);
        for (cw, cb) in w.cross_w.iter().zip(&w.cross_b) {
            let xl = xs.last().expect("x0");
            let s = dot(&cw.data, xl);
            let next: Vec<f64> = xs[0].iter().zip(xl).zip(&cb.data).map(|((x0i, xli), bi)| x0i * s + bi + xli).collect();
            cross_s.push(s);
            xs.push(next);
        }

        let mut hs = vec![xs.last().expect("x0").clone()];
        let mut pre = Vec::with_capacity(cfg.n_residual_blocks);
        let mut act = Vec::with_capacity(cfg.n_residual_blocks);
        for k in 0..cfg.n_residual_blocks {
            let hk = hs.last().expect("h0");
            let mut a = vec![0.0; h];
            w.res_w1[k].matvec_into(hk, &w.res_b1[k].data, &mut a);
            let r: Vec<f64> = a.iter().map(|&v| v.max(0.0)).collect();
            let mut delta = vec![0.0; h];
            w.res_w2[k].matvec_into(&r, &w.res_b2[k].data, &mut delta);
            let next: Vec<f64> = hk.iter().zip(&delta).map(|(x, dx)| x + dx).collect();
            pre.push(a);
            act.push(r);
            hs.push(next);
        }

        let logit = dot(&w.w_out.data, hs.last().expect("h0")) + w.b_out.data[0];
        Ok(Tape {
            bundle: bundle.clone(),
            pooled_tokens,
            z,
            xs,
            cross_s,
            hs,
            pre,
            act,
            affinity,
            logit,
            p: sigmoid(logit),
        })
    }

    /// Accumulates `scale * ∂loss/∂θ` into `grads` and returns the loss.
    pub fn backward_into(&self, tape: &Tape, y: u8, scale: f64, grads: &mut Gradients) -> f64 {
        let w = &self.weights;
        let cfg = &self.config;
        let (d, h) = (cfg.embed_dim, cfg.hidden_dim);
        let y = f64::from(y);
        let loss = bce_with_logit(tape.logit, y);
        let g_logit = scale * (tape.p - y);

        // Head.
        let h_last = tape.hs.last().expect("h0");
        axpy(g_logit, h_last, &mut grads.w_out.data);
        grads.b_out.data[0] += g_logit;
        let mut g_h: Vec<f64> = w.w_out.data.iter().map(|wi| wi * g_logit).collect();

        // Residual blocks, last to first.
        for k in (0..cfg.n_residual_blocks).rev() {
            let r = &tape.act[k];
            grads.res_w2[k].outer_acc(&g_h, r);
            axpy(1.0, &g_h, &mut grads.res_b2[k].data);
            let mut g_a = vec![0.0; h];
            w.res_w2[k].matvec_t_acc(&g_h, &mut g_a);
            for (ga, &a) in g_a.iter_mut().zip(&tape.pre[k]) {
                if a <= 0.0 {
                    *ga = 0.0;
                }
            }
            grads.res_w1[k].outer_acc(&g_a, &tape.hs[k]);
            axpy(1.0, &g_a, &mut grads.res_b1[k].data);
            w.res_w1[k].matvec_t_acc(&g_a, &mut g_h);
        }

        // Cross layers, last to first. x0 collects a direct term per layer.
        let x0 = &tape.xs[0];
        let mut g_x0 = vec![0.0; h];
        let mut g_x = g_h;
        for l in (0..cfg.n_cross_layers).rev() {
            let xl = &tape.xs[l];
            axpy(1.0, &g_x, &mut grads.cross_b[l].data);
            axpy(tape.cross_s[l], &g_x, &mut g_x0);
            let g_s = dot(&g_x, x0);
            axpy(g_s, xl, &mut grads.cross_w[l].data);
            axpy(g_s, &w.cross_w[l].data, &mut g_x);
        }
        axpy(1.0, &g_x, &mut g_x0);

        // Input projection.
        grads.w_in.outer_acc(&g_x0, &tape.z);
        axpy(1.0, &g_x0, &mut grads.b_in.data);
        let mut g_z = vec![0.0; tape.z.len()];
        w.w_in.matvec_t_acc(&g_x0, &mut g_z);

        // Scatter into embedding rows.
        let b = &tape.bundle;
        let inv = 1.0 / tape.pooled_tokens.len() as f64;
        for &t in &tape.pooled_tokens {
            axpy(inv, &g_z[0..d], grads.e_token.row_mut(t as usize));
        }
        axpy(1.0, &g_z[d..2 * d], grads.e_user.row_mut(b.user_id_idx as usize));
        axpy(1.0, &g_z[2 * d..3 * d], grads.e_country.row_mut(b.country_idx as usize));
        axpy(1.0, &g_z[3 * d..4 * d], grads.e_task.row_mut(b.task_idx as usize));
        let src_rows = grads.e_source.as_mut().unwrap_or(&mut grads.e_entity);
        axpy(1.0, &g_z[4 * d..5 * d], src_rows.row_mut(b.source_entity_idx as usize));
        axpy(1.0, &g_z[5 * d..6 * d], grads.e_entity.row_mut(b.target_entity_idx as usize));
        let mut offset = 6 * d;
        if let (Some(table), Some(c)) = (&mut grads.e_cluster, b.cluster_idx) {
            axpy(1.0, &g_z[offset..offset + d], table.row_mut(c as usize));
            offset += d;
        }
        offset += b.dense.len() + b.extra_dense.len();
        if let Some(a) = tape.affinity {
            let u_idx = b.user_id_idx as usize;
            let t_idx = b.target_entity_idx as usize;
            let g_dot = g_z[offset] * a * (1.0 - a);
            let g_prod = &g_z[offset + 1..offset + 1 + d];
            let u = w.e_user.row(u_idx);
            let t = w.e_entity.row(t_idx);
            let g_u: Vec<f64> = (0..d).map(|j| g_dot * t[j] + g_prod[j] * t[j]).collect();
            let g_t: Vec<f64> = (0..d).map(|j| g_dot * u[j] + g_prod[j] * u[j]).collect();
            axpy(1.0, &g_u, grads.e_user.row_mut(u_idx));
            axpy(1.0, &g_t, grads.e_entity.row_mut(t_idx));
        }
        loss
    }

    pub fn backward(&self, tape: &Tape, y: u8) -> Gradients {
        let mut grads = self.weights.zeros_like();
        self.backward_into(tape, y, 1.0, &mut grads);
        grads
    }

    pub fn adam_step(&mut self, grads: &Gradients, state: &mut AdamState) -> Result<()> {
        let g = grads.tensors();
        state.step(&mut self.weights.tensors_mut(), &g)
    }

    pub fn new_adam(&self, config: AdamConfig) -> AdamState {
        AdamState::new(config, self.weights.tensors())
    }

    /// Copies rows into an embedding table, used to seed tables from
    /// pretrained representations.
    pub fn set_rows(table: &mut Tensor, rows: impl IntoIterator<Item = (usize, Vec<f64>)>) -> Result<()> {
        for (r, values) in rows {
            if r >= table.rows || values.len() != table.cols {
                return Err(Error::ShapeMismatch(format!(
                    "row {r} with {} values does not fit a {}x{} table",
                    values.len(),
                    table.rows,
                    table.cols
                )));
            }
            table.row_mut(r).copy_from_slice(&values);
        }
        Ok(())
    }
}
