//! Sequence risk model with hand-written gradients.
//!
//! Architecture, for one example with `T` buckets:
//!
//! ```text
//! e_s   = b_e + sum_c count[s, c] * W_e[c, :]          (oldest bucket first)
//! z_s   = sigmoid(W_z e_s + U_z h_{s-1} + b_z)
//! r_s   = sigmoid(W_r e_s + U_r h_{s-1} + b_r)
//! n_s   = tanh(W_n e_s + U_n (r_s * h_{s-1}) + b_n)
//! h_s   = (1 - z_s) * n_s + z_s * h_{s-1}               h_{-1} = 0
//! u_s   = tanh(W_a h_s + b_a),  a_s = softmax_s(v . u_s)
//! c     = sum_s a_s h_s
//! d     = dropout(tanh(W_d [c; x_expert] + b_d))
//! score = sigmoid(w_o . d + b_o)
//! ```
//!
//! Everything is `f64`. Parameters live in one flat vector whose tensor
//! order is fixed by [`TENSOR_NAMES`]; the model file stores them in that
//! order.

use std::io::{Read, Write};
use std::ops::Range;
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{EncodedExample, ExpertStats, FeatureSchema};
use crate::pipeline::Calibrator;

pub const MODEL_MAGIC: &[u8; 6] = b"PRSKM1";
pub const MODEL_FORMAT_VERSION: u32 = 1;
/// Probability clamp used by the cross-entropy loss.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub attn_dim: usize,
    pub dense_dim: usize,
    pub dropout_rate: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            embed_dim: 16,
            hidden_dim: 32,
            attn_dim: 16,
            dense_dim: 16,
            dropout_rate: 0.0,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.hidden_dim == 0 || self.attn_dim == 0 || self.dense_dim == 0 {
            return Err(Error::Config("model dimensions must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!("dropout_rate {} outside [0, 1)", self.dropout_rate)));
        }
        Ok(())
    }
}

/// Input-side sizes fixed by the feature schema.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputDims {
    pub vocab: usize,
    pub buckets: usize,
    pub expert: usize,
}

impl InputDims {
    pub fn of(schema: &FeatureSchema) -> Self {
        Self {
            vocab: schema.vocab().len(),
            buckets: schema.n_buckets(),
            expert: schema.n_expert(),
        }
    }
}

pub const TENSOR_NAMES: [&str; 18] = [
    "embed_w", "embed_b", "gru_wz", "gru_uz", "gru_bz", "gru_wr", "gru_ur", "gru_br", "gru_wn",
    "gru_un", "gru_bn", "attn_w", "attn_b", "attn_v", "dense_w", "dense_b", "out_w", "out_b",
];

const EMBED_W: usize = 0;
const EMBED_B: usize = 1;
const GRU_WZ: usize = 2;
const GRU_UZ: usize = 3;
const GRU_BZ: usize = 4;
const GRU_WR: usize = 5;
const GRU_UR: usize = 6;
const GRU_BR: usize = 7;
const GRU_WN: usize = 8;
const GRU_UN: usize = 9;
const GRU_BN: usize = 10;
const ATTN_W: usize = 11;
const ATTN_B: usize = 12;
const ATTN_V: usize = 13;
const DENSE_W: usize = 14;
const DENSE_B: usize = 15;
const OUT_W: usize = 16;
const OUT_B: usize = 17;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Layout {
    shapes: Vec<Vec<usize>>,
    ranges: Vec<Range<usize>>,
    total: usize,
}

impl Layout {
    fn new(c: &ModelConfig, d: &InputDims) -> Self {
        let (e, h, a, k) = (c.embed_dim, c.hidden_dim, c.attn_dim, c.dense_dim);
        let shapes: Vec<Vec<usize>> = vec![
            vec![d.vocab, e],
            vec![e],
            vec![h, e],
            vec![h, h],
            vec![h],
            vec![h, e],
            vec![h, h],
            vec![h],
            vec![h, e],
            vec![h, h],
            vec![h],
            vec![a, h],
            vec![a],
            vec![a],
            vec![k, h + d.expert],
            vec![k],
            vec![k],
            vec![1],
        ];
        let mut ranges = Vec::with_capacity(shapes.len());
        let mut offset = 0;
        for s in &shapes {
            let n: usize = s.iter().product();
            ranges.push(offset..offset + n);
            offset += n;
        }
        Self {
            shapes,
            ranges,
            total: offset,
        }
    }

    fn infos(&self) -> Vec<TensorInfo> {
        TENSOR_NAMES
            .iter()
            .zip(&self.shapes)
            .map(|(n, s)| TensorInfo {
                name: n.to_string(),
                shape: s.clone(),
            })
            .collect()
    }
}

/// Where a model's parameters came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub site: String,
    pub stage: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RiskModel {
    pub config: ModelConfig,
    pub dims: InputDims,
    pub schema_hash: String,
    pub expert_stats: ExpertStats,
    pub calibrator: Option<Calibrator>,
    pub provenance: Vec<Provenance>,
    params: Vec<f64>,
    layout: Layout,
}

/// Whether dropout is active.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut ChaCha8Rng),
}

/// Cached activations from one forward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    pub score: f64,
    pub logit: f64,
    /// Attention weight per recurrent step (oldest bucket first).
    pub attention: Vec<f64>,
    expert: Vec<f64>,
    embeds: Vec<f64>,
    z: Vec<f64>,
    r: Vec<f64>,
    n: Vec<f64>,
    h: Vec<f64>,
    rh: Vec<f64>,
    u: Vec<f64>,
    pooled: Vec<f64>,
    dense: Vec<f64>,
    mask: Option<Vec<f64>>,
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// out += W x, with W row-major `rows x cols`.
#[inline]
fn matvec_add(out: &mut [f64], w: &[f64], x: &[f64]) {
    let cols = x.len();
    for (o, row) in out.iter_mut().zip(w.chunks_exact(cols)) {
        *o += row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
    }
}

/// out += W^T dy.
#[inline]
fn matvec_t_add(out: &mut [f64], w: &[f64], dy: &[f64]) {
    let cols = out.len();
    for (g, row) in dy.iter().zip(w.chunks_exact(cols)) {
        if *g != 0.0 {
            for (o, a) in out.iter_mut().zip(row) {
                *o += g * a;
            }
        }
    }
}

/// gw += dy x^T.
#[inline]
fn outer_add(gw: &mut [f64], dy: &[f64], x: &[f64]) {
    let cols = x.len();
    for (g, row) in dy.iter().zip(gw.chunks_exact_mut(cols)) {
        if *g != 0.0 {
            for (o, b) in row.iter_mut().zip(x) {
                *o += g * b;
            }
        }
    }
}

impl RiskModel {
    /// Fresh model with Glorot-uniform weight matrices and zero biases.
    pub fn new(config: ModelConfig, schema: &FeatureSchema) -> Result<Self> {
        Self::with_dims(config, InputDims::of(schema), schema.version_hash().to_string())
    }

    pub fn with_dims(config: ModelConfig, dims: InputDims, schema_hash: String) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config, &dims);
        let mut params = vec![0.0; layout.total];
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        for (id, range) in layout.ranges.iter().enumerate() {
            let (fan_out, fan_in) = match layout.shapes[id].as_slice() {
                [rows, cols] => (*rows, *cols),
                [n] if id == ATTN_V || id == OUT_W => (1, *n),
                _ => continue,
            };
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for p in &mut params[range.clone()] {
                *p = rng.random_range(-bound..=bound);
            }
        }
        Ok(Self {
            config,
            dims,
            schema_hash,
            expert_stats: ExpertStats::identity(dims.expert),
            calibrator: None,
            provenance: Vec::new(),
            params,
            layout,
        })
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn tensor_infos(&self) -> Vec<TensorInfo> {
        self.layout.infos()
    }

    /// Parameter slice for a tensor by name.
    pub fn tensor(&self, name: &str) -> Option<&[f64]> {
        let id = TENSOR_NAMES.iter().position(|n| *n == name)?;
        Some(&self.params[self.layout.ranges[id].clone()])
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let id = TENSOR_NAMES.iter().position(|n| *n == name)?;
        let range = self.layout.ranges[id].clone();
        Some(&mut self.params[range])
    }

    #[inline]
    fn t(&self, id: usize) -> &[f64] {
        &self.params[self.layout.ranges[id].clone()]
    }

    pub fn param_norm(&self) -> f64 {
        self.params.iter().map(|p| p * p).sum::<f64>().sqrt()
    }

    pub fn check_schema(&self, schema_hash: &str) -> Result<()> {
        if self.schema_hash != schema_hash {
            return Err(Error::SchemaMismatch {
                expected: self.schema_hash.clone(),
                found: schema_hash.to_string(),
            });
        }
        Ok(())
    }

    fn check_example(&self, ex: &EncodedExample) -> Result<()> {
        let d = &self.dims;
        if ex.sequence.n_buckets() != d.buckets || ex.sequence.n_codes() != d.vocab || ex.expert.len() != d.expert {
            return Err(Error::Data(format!(
                "example shape {}x{} / {} expert does not match model {}x{} / {}",
                ex.sequence.n_buckets(),
                ex.sequence.n_codes(),
                ex.expert.len(),
                d.buckets,
                d.vocab,
                d.expert
            )));
        }
        Ok(())
    }

    pub fn forward(&self, ex: &EncodedExample, mode: Mode<'_>) -> Result<Forward> {
        self.check_example(ex)?;
        let (e_dim, h_dim, a_dim, k_dim) = (
            self.config.embed_dim,
            self.config.hidden_dim,
            self.config.attn_dim,
            self.config.dense_dim,
        );
        let steps = self.dims.buckets;
        let mut embeds = vec![0.0; steps * e_dim];
        let mut z = vec![0.0; steps * h_dim];
        let mut r = vec![0.0; steps * h_dim];
        let mut n = vec![0.0; steps * h_dim];
        let mut h = vec![0.0; steps * h_dim];
        let mut rh = vec![0.0; steps * h_dim];
        let mut u = vec![0.0; steps * a_dim];
        let zeros = vec![0.0; h_dim];

        let embed_w = self.t(EMBED_W);
        for s in 0..steps {
            let bucket = steps - 1 - s;
            let e = &mut embeds[s * e_dim..(s + 1) * e_dim];
            e.copy_from_slice(self.t(EMBED_B));
            for &(code, count) in ex.sequence.row(bucket) {
                let row = &embed_w[code as usize * e_dim..(code as usize + 1) * e_dim];
                let c = count as f64;
                for (o, w) in e.iter_mut().zip(row) {
                    *o += c * w;
                }
            }
        }

        for s in 0..steps {
            let e = &embeds[s * e_dim..(s + 1) * e_dim];
            let (done, rest) = h.split_at_mut(s * h_dim);
            let h_prev: &[f64] = if s == 0 { &zeros } else { &done[(s - 1) * h_dim..] };
            let hs = &mut rest[..h_dim];
            let zs = &mut z[s * h_dim..(s + 1) * h_dim];
            let rs = &mut r[s * h_dim..(s + 1) * h_dim];
            let ns = &mut n[s * h_dim..(s + 1) * h_dim];
            let rhs = &mut rh[s * h_dim..(s + 1) * h_dim];

            zs.copy_from_slice(self.t(GRU_BZ));
            matvec_add(zs, self.t(GRU_WZ), e);
            matvec_add(zs, self.t(GRU_UZ), h_prev);
            zs.iter_mut().for_each(|v| *v = sigmoid(*v));

            rs.copy_from_slice(self.t(GRU_BR));
            matvec_add(rs, self.t(GRU_WR), e);
            matvec_add(rs, self.t(GRU_UR), h_prev);
            rs.iter_mut().for_each(|v| *v = sigmoid(*v));

            for j in 0..h_dim {
                rhs[j] = rs[j] * h_prev[j];
            }
            ns.copy_from_slice(self.t(GRU_BN));
            matvec_add(ns, self.t(GRU_WN), e);
            matvec_add(ns, self.t(GRU_UN), rhs);
            ns.iter_mut().for_each(|v| *v = v.tanh());

            for j in 0..h_dim {
                hs[j] = (1.0 - zs[j]) * ns[j] + zs[j] * h_prev[j];
            }
        }

        let v = self.t(ATTN_V);
        let mut logits_att = vec![0.0; steps];
        for s in 0..steps {
            let us = &mut u[s * a_dim..(s + 1) * a_dim];
            us.copy_from_slice(self.t(ATTN_B));
            matvec_add(us, self.t(ATTN_W), &h[s * h_dim..(s + 1) * h_dim]);
            us.iter_mut().for_each(|x| *x = x.tanh());
            logits_att[s] = us.iter().zip(v).map(|(a, b)| a * b).sum();
        }
        let max = logits_att.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut attention: Vec<f64> = logits_att.iter().map(|l| (l - max).exp()).collect();
        let total: f64 = attention.iter().sum();
        attention.iter_mut().for_each(|a| *a /= total);

        let mut pooled = vec![0.0; h_dim];
        for s in 0..steps {
            for j in 0..h_dim {
                pooled[j] += attention[s] * h[s * h_dim + j];
            }
        }

        let expert = self.expert_stats.apply(&ex.expert);
        let mut blend_in = pooled.clone();
        blend_in.extend_from_slice(&expert);
        let mut dense = self.t(DENSE_B).to_vec();
        matvec_add(&mut dense, self.t(DENSE_W), &blend_in);
        dense.iter_mut().for_each(|x| *x = x.tanh());

        let rate = self.config.dropout_rate;
        let mask = match mode {
            Mode::Train(rng) if rate > 0.0 => {
                let keep = 1.0 / (1.0 - rate);
                Some((0..k_dim).map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep }).collect::<Vec<_>>())
            }
            _ => None,
        };
        let out_w = self.t(OUT_W);
        let mut logit = self.t(OUT_B)[0];
        for j in 0..k_dim {
            let m = mask.as_ref().map_or(1.0, |m| m[j]);
            logit += out_w[j] * dense[j] * m;
        }
        let score = sigmoid(logit);
        if !logit.is_finite() || !score.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite activation (logit {logit}); parameter norm {:.6e}",
                self.param_norm()
            )));
        }
        Ok(Forward {
            score,
            logit,
            attention,
            expert,
            embeds,
            z,
            r,
            n,
            h,
            rh,
            u,
            pooled,
            dense,
            mask,
        })
    }

    /// Raw model score in eval mode.
    pub fn score(&self, ex: &EncodedExample) -> Result<f64> {
        Ok(self.forward(ex, Mode::Eval)?.score)
    }

    /// Score after the attached calibrator, if any.
    pub fn predict(&self, ex: &EncodedExample) -> Result<f64> {
        let s = self.score(ex)?;
        Ok(match &self.calibrator {
            Some(c) => c.apply(s),
            None => s,
        })
    }

    /// Accumulates `dlogit * d(logit)/d(params)` into `grad`.
    fn backward(&self, ex: &EncodedExample, f: &Forward, dlogit: f64, grad: &mut [f64]) {
        let (e_dim, h_dim, a_dim, k_dim) = (
            self.config.embed_dim,
            self.config.hidden_dim,
            self.config.attn_dim,
            self.config.dense_dim,
        );
        let steps = self.dims.buckets;
        let rg = |id: usize| self.layout.ranges[id].clone();

        // output layer
        let out_w = self.t(OUT_W);
        let mut d_dense = vec![0.0; k_dim];
        {
            let g_out = &mut grad[rg(OUT_W)];
            for j in 0..k_dim {
                let m = f.mask.as_ref().map_or(1.0, |m| m[j]);
                g_out[j] += dlogit * f.dense[j] * m;
                d_dense[j] = dlogit * out_w[j] * m;
            }
        }
        grad[rg(OUT_B)][0] += dlogit;

        // dense tanh layer
        for j in 0..k_dim {
            d_dense[j] *= 1.0 - f.dense[j] * f.dense[j];
        }
        let mut blend_in = f.pooled.clone();
        blend_in.extend_from_slice(&f.expert);
        outer_add(&mut grad[rg(DENSE_W)], &d_dense, &blend_in);
        for (g, d) in grad[rg(DENSE_B)].iter_mut().zip(&d_dense) {
            *g += d;
        }
        let mut d_blend = vec![0.0; h_dim + self.dims.expert];
        matvec_t_add(&mut d_blend, self.t(DENSE_W), &d_dense);
        let d_pooled = &d_blend[..h_dim];

        // attention pooling
        let mut dh = vec![0.0; steps * h_dim];
        let mut d_alpha = vec![0.0; steps];
        for s in 0..steps {
            let hs = &f.h[s * h_dim..(s + 1) * h_dim];
            for j in 0..h_dim {
                dh[s * h_dim + j] += f.attention[s] * d_pooled[j];
            }
            d_alpha[s] = hs.iter().zip(d_pooled).map(|(a, b)| a * b).sum();
        }
        let weighted: f64 = f.attention.iter().zip(&d_alpha).map(|(a, d)| a * d).sum();
        let v = self.t(ATTN_V);
        let mut d_u_pre = vec![0.0; a_dim];
        for s in 0..steps {
            let d_score = f.attention[s] * (d_alpha[s] - weighted);
            let us = &f.u[s * a_dim..(s + 1) * a_dim];
            {
                let g_v = &mut grad[rg(ATTN_V)];
                for j in 0..a_dim {
                    g_v[j] += d_score * us[j];
                }
            }
            for j in 0..a_dim {
                d_u_pre[j] = d_score * v[j] * (1.0 - us[j] * us[j]);
            }
            outer_add(&mut grad[rg(ATTN_W)], &d_u_pre, &f.h[s * h_dim..(s + 1) * h_dim]);
            for (g, d) in grad[rg(ATTN_B)].iter_mut().zip(&d_u_pre) {
                *g += d;
            }
            matvec_t_add(&mut dh[s * h_dim..(s + 1) * h_dim], self.t(ATTN_W), &d_u_pre);
        }

        // recurrent pass, newest step first
        let zeros = vec![0.0; h_dim];
        let mut carry = vec![0.0; h_dim];
        let mut d_an = vec![0.0; h_dim];
        let mut d_az = vec![0.0; h_dim];
        let mut d_ar = vec![0.0; h_dim];
        let mut d_rh = vec![0.0; h_dim];
        let mut d_e = vec![0.0; e_dim];
        let embed_w_range = rg(EMBED_W);
        for s in (0..steps).rev() {
            let h_prev: &[f64] = if s == 0 { &zeros } else { &f.h[(s - 1) * h_dim..s * h_dim] };
            let zs = &f.z[s * h_dim..(s + 1) * h_dim];
            let rs = &f.r[s * h_dim..(s + 1) * h_dim];
            let ns = &f.n[s * h_dim..(s + 1) * h_dim];
            let rhs = &f.rh[s * h_dim..(s + 1) * h_dim];
            let e = &f.embeds[s * e_dim..(s + 1) * e_dim];

            let mut d_prev = vec![0.0; h_dim];
            for j in 0..h_dim {
                let d = dh[s * h_dim + j] + carry[j];
                let dn = d * (1.0 - zs[j]);
                let dz = d * (h_prev[j] - ns[j]);
                d_prev[j] = d * zs[j];
                d_an[j] = dn * (1.0 - ns[j] * ns[j]);
                d_az[j] = dz * zs[j] * (1.0 - zs[j]);
            }

            outer_add(&mut grad[rg(GRU_WN)], &d_an, e);
            outer_add(&mut grad[rg(GRU_UN)], &d_an, rhs);
            for (g, d) in grad[rg(GRU_BN)].iter_mut().zip(&d_an) {
                *g += d;
            }
            d_rh.iter_mut().for_each(|x| *x = 0.0);
            matvec_t_add(&mut d_rh, self.t(GRU_UN), &d_an);
            for j in 0..h_dim {
                let dr = d_rh[j] * h_prev[j];
                d_prev[j] += d_rh[j] * rs[j];
                d_ar[j] = dr * rs[j] * (1.0 - rs[j]);
            }

            outer_add(&mut grad[rg(GRU_WZ)], &d_az, e);
            outer_add(&mut grad[rg(GRU_UZ)], &d_az, h_prev);
            for (g, d) in grad[rg(GRU_BZ)].iter_mut().zip(&d_az) {
                *g += d;
            }
            outer_add(&mut grad[rg(GRU_WR)], &d_ar, e);
            outer_add(&mut grad[rg(GRU_UR)], &d_ar, h_prev);
            for (g, d) in grad[rg(GRU_BR)].iter_mut().zip(&d_ar) {
                *g += d;
            }
            matvec_t_add(&mut d_prev, self.t(GRU_UZ), &d_az);
            matvec_t_add(&mut d_prev, self.t(GRU_UR), &d_ar);

            d_e.iter_mut().for_each(|x| *x = 0.0);
            matvec_t_add(&mut d_e, self.t(GRU_WN), &d_an);
            matvec_t_add(&mut d_e, self.t(GRU_WZ), &d_az);
            matvec_t_add(&mut d_e, self.t(GRU_WR), &d_ar);
            for (g, d) in grad[rg(EMBED_B)].iter_mut().zip(&d_e) {
                *g += d;
            }
            let bucket = steps - 1 - s;
            for &(code, count) in ex.sequence.row(bucket) {
                let start = embed_w_range.start + code as usize * e_dim;
                let c = count as f64;
                for (g, d) in grad[start..start + e_dim].iter_mut().zip(&d_e) {
                    *g += c * d;
                }
            }
            carry = d_prev;
        }
    }

    /// Mean clamped cross-entropy against `targets` and its gradient.
    ///
    /// The logit gradient is `p - t` per example (divided by the batch size)
    /// even where `p` is clamped, so saturated predictions keep learning.
    pub fn loss_and_grad(
        &self,
        batch: &[&EncodedExample],
        targets: &[f64],
        mut dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(f64, Vec<f64>)> {
        if batch.is_empty() {
            return Err(Error::Data("loss over an empty batch".into()));
        }
        if batch.len() != targets.len() {
            return Err(Error::Data(format!("{} examples but {} targets", batch.len(), targets.len())));
        }
        if let Some(t) = targets.iter().find(|t| !(0.0..=1.0).contains(*t)) {
            return Err(Error::Data(format!("target {t} outside [0, 1]")));
        }
        let n = batch.len() as f64;
        let mut grad = vec![0.0; self.params.len()];
        let mut loss = 0.0;
        for (ex, &t) in batch.iter().zip(targets) {
            let mode = match dropout_rng.as_deref_mut() {
                Some(rng) => Mode::Train(rng),
                None => Mode::Eval,
            };
            let f = self.forward(ex, mode)?;
            loss += bce(f.score, t);
            self.backward(ex, &f, (f.score - t) / n, &mut grad);
        }
        Ok((loss / n, grad))
    }
}

/// Real-valued training targets aligned index-for-index with a fold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct SoftTargets {
    values: Vec<f64>,
}

impl SoftTargets {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Data(format!("soft target {v} outside [0, 1]")));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

impl TryFrom<Vec<f64>> for SoftTargets {
    type Error = Error;

    fn try_from(values: Vec<f64>) -> Result<Self> {
        Self::new(values)
    }
}

impl From<SoftTargets> for Vec<f64> {
    fn from(t: SoftTargets) -> Self {
        t.values
    }
}

/// Clamped binary cross-entropy for one prediction.
pub fn bce(p: f64, t: f64) -> f64 {
    let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
}

/// Bias-corrected adaptive-moment optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl Adam {
    pub fn new(n_params: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            step: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != grads.len() || grads.len() != self.m.len() {
            return Err(Error::Data("optimizer state, parameters and gradients differ in length".into()));
        }
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::Numerical(format!("non-finite gradient at parameter {i}")));
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

/// Settings for the finite-difference gradient check.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradCheckConfig {
    pub model: ModelConfig,
    pub vocab: usize,
    pub buckets: usize,
    pub expert: usize,
    pub batch: usize,
    pub step: f64,
    pub tolerance: f64,
    /// Floor on the relative-error denominator.
    pub denominator_floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig {
                embed_dim: 3,
                hidden_dim: 4,
                attn_dim: 3,
                dense_dim: 3,
                dropout_rate: 0.25,
                seed: 0,
            },
            vocab: 5,
            buckets: 4,
            expert: 3,
            batch: 3,
            step: 1e-5,
            tolerance: 1e-4,
            denominator_floor: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub trials: usize,
    pub parameters_checked: usize,
    pub max_rel_err: f64,
    pub passed: bool,
    pub warnings: Vec<String>,
}

/// Random example matching the given input dims.
pub fn random_example(dims: &InputDims, rng: &mut ChaCha8Rng) -> EncodedExample {
    let mut triples = Vec::new();
    for b in 0..dims.buckets {
        for c in 0..dims.vocab {
            if rng.random_bool(0.4) {
                triples.push((b, c, rng.random_range(1..=3)));
            }
        }
    }
    EncodedExample {
        patient_id: "gradcheck".into(),
        discharge_date: chrono::NaiveDate::from_ymd_opt(2018, 1, 1).expect("valid date"),
        sequence: crate::features::CountMatrix::from_triples(dims.buckets, dims.vocab, triples)
            .expect("in range"),
        expert: (0..dims.expert).map(|_| rng.random_range(-1.5..1.5)).collect(),
        label: rng.random_bool(0.5),
    }
}

/// Compares `loss_and_grad` to central differences on seeded random tiny
/// models. `corrupt` lets tests tamper with the analytic gradient.
pub fn gradient_check_with(
    cfg: &GradCheckConfig,
    n_trials: usize,
    seed: u64,
    corrupt: Option<&dyn Fn(&mut [f64])>,
) -> Result<GradCheckReport> {
    let mut warnings = Vec::new();
    if n_trials == 0 {
        warnings.push("no trials requested; gradient check passes vacuously".to_string());
        log::warn!("gradient check ran zero trials");
    }
    let dims = InputDims {
        vocab: cfg.vocab,
        buckets: cfg.buckets,
        expert: cfg.expert,
    };
    let mut max_rel = 0.0f64;
    let mut checked = 0usize;
    for trial in 0..n_trials {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(trial as u64);
        let model_cfg = ModelConfig {
            seed: rng.random(),
            ..cfg.model
        };
        let mut model = RiskModel::with_dims(model_cfg, dims, "gradcheck".into())?;
        // Move every tensor, biases included, off its initial values.
        for p in model.params_mut() {
            *p += rng.random_range(-0.5..0.5);
        }
        model.expert_stats = ExpertStats {
            mean: (0..dims.expert).map(|_| rng.random_range(-0.5..0.5)).collect(),
            stdev: (0..dims.expert).map(|_| rng.random_range(0.5..2.0)).collect(),
            clamped: vec![false; dims.expert],
        };
        let examples: Vec<EncodedExample> = (0..cfg.batch).map(|_| random_example(&dims, &mut rng)).collect();
        let batch: Vec<&EncodedExample> = examples.iter().collect();
        let targets: Vec<f64> = (0..cfg.batch).map(|_| rng.random::<f64>()).collect();
        let dropout_seed: u64 = rng.random();
        let fresh = || ChaCha8Rng::seed_from_u64(dropout_seed);

        let mut r0 = fresh();
        let (_, mut analytic) = model.loss_and_grad(&batch, &targets, Some(&mut r0))?;
        if let Some(f) = corrupt {
            f(&mut analytic);
        }
        for i in 0..model.n_params() {
            let orig = model.params[i];
            model.params[i] = orig + cfg.step;
            let mut r1 = fresh();
            let (plus, _) = model.loss_and_grad(&batch, &targets, Some(&mut r1))?;
            model.params[i] = orig - cfg.step;
            let mut r2 = fresh();
            let (minus, _) = model.loss_and_grad(&batch, &targets, Some(&mut r2))?;
            model.params[i] = orig;
            let numeric = (plus - minus) / (2.0 * cfg.step);
            let a = analytic[i];
            let denom = a.abs().max(numeric.abs()).max(cfg.denominator_floor);
            max_rel = max_rel.max((a - numeric).abs() / denom);
            checked += 1;
        }
    }
    Ok(GradCheckReport {
        trials: n_trials,
        parameters_checked: checked,
        max_rel_err: max_rel,
        passed: max_rel < cfg.tolerance,
        warnings,
    })
}

pub fn gradient_check(cfg: &GradCheckConfig, n_trials: usize, seed: u64) -> Result<GradCheckReport> {
    gradient_check_with(cfg, n_trials, seed, None)
}

#[derive(Serialize, Deserialize)]
struct ModelHeader {
    format_version: u32,
    config: ModelConfig,
    dims: InputDims,
    schema_hash: String,
    expert_stats: ExpertStats,
    calibrator: Option<Calibrator>,
    provenance: Vec<Provenance>,
    tensors: Vec<TensorInfo>,
}

fn fmt_err(e: std::io::Error) -> Error {
    Error::Format(format!("model file: {e}"))
}

pub fn write_model<W: Write>(mut w: W, m: &RiskModel) -> Result<()> {
    let header = ModelHeader {
        format_version: MODEL_FORMAT_VERSION,
        config: m.config,
        dims: m.dims,
        schema_hash: m.schema_hash.clone(),
        expert_stats: m.expert_stats.clone(),
        calibrator: m.calibrator,
        provenance: m.provenance.clone(),
        tensors: m.layout.infos(),
    };
    let json = serde_json::to_vec(&header)?;
    w.write_all(MODEL_MAGIC).map_err(fmt_err)?;
    w.write_u32::<LittleEndian>(json.len() as u32).map_err(fmt_err)?;
    w.write_all(&json).map_err(fmt_err)?;
    for p in &m.params {
        w.write_f64::<LittleEndian>(*p).map_err(fmt_err)?;
    }
    w.flush().map_err(fmt_err)
}

pub fn read_model<R: Read>(mut r: R) -> Result<RiskModel> {
    let mut magic = [0u8; 6];
    if r.read_exact(&mut magic).is_err() || &magic != MODEL_MAGIC {
        return Err(Error::Format("not a model file".into()));
    }
    let len = r.read_u32::<LittleEndian>().map_err(fmt_err)? as usize;
    if len > 1 << 28 {
        return Err(Error::Format("model header too large".into()));
    }
    let mut json = vec![0u8; len];
    r.read_exact(&mut json).map_err(fmt_err)?;
    let header: ModelHeader = serde_json::from_slice(&json)?;
    if header.format_version != MODEL_FORMAT_VERSION {
        return Err(Error::Format(format!(
            "model format version {} is not supported (expected {MODEL_FORMAT_VERSION})",
            header.format_version
        )));
    }
    header.config.validate()?;
    let layout = Layout::new(&header.config, &header.dims);
    if header.tensors != layout.infos() {
        return Err(Error::Format("model tensor table does not match its config".into()));
    }
    if header.expert_stats.mean.len() != header.dims.expert || header.expert_stats.stdev.len() != header.dims.expert {
        return Err(Error::Format("expert statistics do not match model dims".into()));
    }
    let mut params = Vec::with_capacity(layout.total);
    for _ in 0..layout.total {
        params.push(r.read_f64::<LittleEndian>().map_err(fmt_err)?);
    }
    if params.iter().any(|p| !p.is_finite()) {
        return Err(Error::Format("model contains non-finite parameters".into()));
    }
    Ok(RiskModel {
        config: header.config,
        dims: header.dims,
        schema_hash: header.schema_hash,
        expert_stats: header.expert_stats,
        calibrator: header.calibrator,
        provenance: header.provenance,
        params,
        layout,
    })
}

pub fn save_model(path: &Path, m: &RiskModel) -> Result<()> {
    write_model(std::io::BufWriter::new(crate::claims::create(path)?), m)
}

pub fn load_model(path: &Path) -> Result<RiskModel> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_model(std::io::BufReader::new(f))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dims() -> InputDims {
        InputDims {
            vocab: 4,
            buckets: 3,
            expert: 2,
        }
    }

    fn tiny(seed: u64) -> RiskModel {
        let cfg = ModelConfig {
            embed_dim: 2,
            hidden_dim: 2,
            attn_dim: 2,
            dense_dim: 2,
            dropout_rate: 0.0,
            seed,
        };
        RiskModel::with_dims(cfg, dims(), "h".into()).unwrap()
    }

    fn example(seed: u64) -> EncodedExample {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        random_example(&dims(), &mut rng)
    }

    #[test]
    fn zero_parameters_score_one_half() {
        let mut m = tiny(1);
        m.params_mut().iter_mut().for_each(|p| *p = 0.0);
        assert_eq!(m.score(&example(3)).unwrap(), 0.5);
    }

    #[test]
    fn identical_hidden_states_give_uniform_attention() {
        let mut m = tiny(1);
        for name in ["embed_w", "embed_b", "gru_wz", "gru_uz", "gru_bz", "gru_wr", "gru_ur", "gru_br", "gru_wn", "gru_un", "gru_bn"] {
            m.tensor_mut(name).unwrap().iter_mut().for_each(|p| *p = 0.0);
        }
        let f = m.forward(&example(4), Mode::Eval).unwrap();
        for a in &f.attention {
            assert!((a - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn attention_is_a_distribution() {
        let m = tiny(9);
        for s in 0..20 {
            let f = m.forward(&example(s), Mode::Eval).unwrap();
            assert!(f.attention.iter().all(|&a| a >= 0.0));
            assert!((f.attention.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn bce_symmetric_point() {
        assert!((bce(0.5, 0.5) - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn logit_gradient_vanishes_when_target_equals_score() {
        let m = tiny(5);
        let ex = example(6);
        let p = m.score(&ex).unwrap();
        let (_, g) = m.loss_and_grad(&[&ex], &[p], None).unwrap();
        assert_eq!(m.tensor("out_b").unwrap().len(), 1);
        let out_b = TENSOR_NAMES.iter().position(|n| *n == "out_b").unwrap();
        assert_eq!(g[m.layout.ranges[out_b].start], 0.0);
    }

    #[test]
    fn empty_batch_rejected() {
        assert!(tiny(1).loss_and_grad(&[], &[], None).is_err());
    }

    #[test]
    fn adam_first_step() {
        let mut p = vec![0.0];
        let mut opt = Adam::new(1, 0.001);
        opt.step(&mut p, &[1.0]).unwrap();
        assert!((p[0] + 0.001 / (1.0 + 1e-8)).abs() < 1e-18);
    }

    #[test]
    fn adam_zero_gradient_and_symmetry() {
        let mut p = vec![0.3, -0.2, 0.5];
        let mut opt = Adam::new(3, 0.01);
        opt.step(&mut p, &[0.0, 0.0, 0.0]).unwrap();
        assert_eq!(p, vec![0.3, -0.2, 0.5]);
        let mut q = vec![0.25, 0.25];
        let mut opt = Adam::new(2, 0.01);
        opt.step(&mut q, &[0.7, 0.7]).unwrap();
        assert_eq!(q[0], q[1]);
        assert!(q[0] < 0.25);
    }

    #[test]
    fn adam_rejects_non_finite() {
        let mut opt = Adam::new(1, 0.01);
        assert!(matches!(opt.step(&mut [0.0], &[f64::NAN]), Err(Error::Numerical(_))));
    }

    #[test]
    fn gradcheck_passes_and_negative_control_fails() {
        let cfg = GradCheckConfig::default();
        let ok = gradient_check(&cfg, 3, 1).unwrap();
        assert!(ok.passed, "max rel err {}", ok.max_rel_err);
        let bad = gradient_check_with(&cfg, 1, 1, Some(&|g: &mut [f64]| g[0] += 0.1)).unwrap();
        assert!(!bad.passed);
    }

    #[test]
    fn gradcheck_zero_trials_vacuous() {
        let r = gradient_check(&GradCheckConfig::default(), 0, 1).unwrap();
        assert!(r.passed);
        assert_eq!(r.warnings.len(), 1);
    }

    #[test]
    fn wrong_magic_rejected() {
        let err = read_model(&b"NOTAMODEL....."[..]).unwrap_err();
        assert_eq!(err.to_string(), "format error: not a model file");
    }

    #[test]
    fn schema_mismatch_detected() {
        let m = tiny(1);
        assert!(matches!(m.check_schema("other"), Err(Error::SchemaMismatch { .. })));
        assert!(m.check_schema("h").is_ok());
    }

    #[test]
    fn shape_mismatch_is_error() {
        let m = tiny(1);
        let mut ex = example(1);
        ex.expert.push(0.0);
        assert!(matches!(m.forward(&ex, Mode::Eval), Err(Error::Data(_))));
    }

    #[test]
    fn eval_forward_is_pure() {
        let m = tiny(2);
        let ex = example(8);
        assert_eq!(m.score(&ex).unwrap().to_bits(), m.score(&ex).unwrap().to_bits());
    }
}
