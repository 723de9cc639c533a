//! Self-attention and cross-modal attention blocks, and the co-attention
//! module that stacks them.
//!
//! A block is multi-head scaled dot-product attention with a temperature
//! softmax, followed by residual + layer norm, a position-wise feed-forward
//! layer, and a second residual + layer norm (post-norm).

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{MpnError, Result};
use crate::nn::{Graph, Init, Linear, ParamId};
use crate::tensor::{Scalar, Var};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub d_k: usize,
    pub d_v: usize,
    pub ff_hidden: usize,
    pub n_mcm: usize,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_heads: 4,
            d_k: 16,
            d_v: 16,
            ff_hidden: 128,
            n_mcm: 2,
        }
    }
}

impl AttentionConfig {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_k", self.d_k),
            ("d_v", self.d_v),
            ("ff_hidden", self.ff_hidden),
            ("n_mcm", self.n_mcm),
        ];
        if let Some((name, _)) = fields.iter().find(|(_, v)| *v == 0) {
            return Err(MpnError::Config(format!("{name} must be at least 1")));
        }
        Ok(())
    }

    /// Geometry of the block that runs over the concatenated audio-visual
    /// sequence: model, key and value widths doubled.
    pub fn widened(&self) -> Self {
        Self {
            d_model: 2 * self.d_model,
            d_k: 2 * self.d_k,
            d_v: 2 * self.d_v,
            ..*self
        }
    }
}

/// Parameters of one attention block (SA or CMA; they share a layout).
///
/// The query/key/value matrices hold all heads side by side: head `i` uses
/// columns `i·d_k .. (i+1)·d_k`.
#[derive(Clone, Copy, Debug)]
pub struct BlockParams {
    pub cfg: AttentionConfig,
    pub query: ParamId,
    pub key: ParamId,
    pub value: ParamId,
    pub output: Linear,
    pub norm1_gain: ParamId,
    pub norm1_bias: ParamId,
    pub ff1: Linear,
    pub ff2: Linear,
    pub norm2_gain: ParamId,
    pub norm2_bias: ParamId,
}

impl BlockParams {
    pub fn new<F: Scalar>(init: &mut Init<'_, F>, name: &str, cfg: AttentionConfig) -> Self {
        let (d, h) = (cfg.d_model, cfg.n_heads);
        Self {
            cfg,
            query: init.glorot(&format!("{name}.query"), d, h * cfg.d_k),
            key: init.glorot(&format!("{name}.key"), d, h * cfg.d_k),
            value: init.glorot(&format!("{name}.value"), d, h * cfg.d_v),
            output: init.linear(&format!("{name}.output"), h * cfg.d_v, d, true),
            norm1_gain: init.ones(&format!("{name}.norm1.gain"), &[d]),
            norm1_bias: init.zeros(&format!("{name}.norm1.bias"), &[d]),
            ff1: init.linear(&format!("{name}.ff1"), d, cfg.ff_hidden, true),
            ff2: init.linear(&format!("{name}.ff2"), cfg.ff_hidden, d, true),
            norm2_gain: init.ones(&format!("{name}.norm2.gain"), &[d]),
            norm2_bias: init.zeros(&format!("{name}.norm2.bias"), &[d]),
        }
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.query, self.key, self.value, self.output.weight];
        ids.extend(self.output.bias);
        ids.extend([self.norm1_gain, self.norm1_bias, self.ff1.weight]);
        ids.extend(self.ff1.bias);
        ids.push(self.ff2.weight);
        ids.extend(self.ff2.bias);
        ids.extend([self.norm2_gain, self.norm2_bias]);
        ids
    }
}

/// Intermediate values of one block, exposed for inspection.
#[derive(Clone, Debug)]
pub struct BlockOutput {
    pub out: Var,
    /// Per-head attention weights, each `[B × T_q × T_k]`.
    pub weights: Vec<Var>,
    /// Concatenated head outputs before the output projection, `[B·T × h·d_v]`.
    pub heads: Var,
}

/// Run one block. `query_seq` is `[B × T × d]`; `context_seq` supplies keys
/// and values and must have the same batch and width.
pub fn attention_block<F: Scalar>(
    g: &mut Graph<'_, F>,
    query_seq: Var,
    context_seq: Var,
    params: &BlockParams,
    tau: f64,
) -> Result<BlockOutput> {
    let cfg = params.cfg;
    let (qs, cs) = (g.shape(query_seq).to_vec(), g.shape(context_seq).to_vec());
    if qs.len() != 3 || qs[2] != cfg.d_model {
        return Err(MpnError::dim("attention_block", &qs, &[cfg.d_model]));
    }
    if cs.len() != 3 || cs[0] != qs[0] || cs[2] != qs[2] {
        return Err(MpnError::dim("attention_block", &qs, &cs));
    }
    let (b, tq, tk, d) = (qs[0], qs[1], cs[1], qs[2]);

    let xq = g.reshape(query_seq, &[b * tq, d])?;
    let xc = if context_seq == query_seq { xq } else { g.reshape(context_seq, &[b * tk, d])? };
    let (wq, wk, wv) = (g.p(params.query), g.p(params.key), g.p(params.value));
    let q = g.matmul(xq, wq)?;
    let k = g.matmul(xc, wk)?;
    let v = g.matmul(xc, wv)?;

    let scale = F::from_f(1.0 / (cfg.d_k as f64).sqrt());
    let tau = F::from_f(tau);
    let mut weights = Vec::with_capacity(cfg.n_heads);
    let mut head_outs = Vec::with_capacity(cfg.n_heads);
    for h in 0..cfg.n_heads {
        let qh = g.slice_last(q, h * cfg.d_k, cfg.d_k)?;
        let qh = g.reshape(qh, &[b, tq, cfg.d_k])?;
        let kh = g.slice_last(k, h * cfg.d_k, cfg.d_k)?;
        let kh = g.reshape(kh, &[b, tk, cfg.d_k])?;
        let vh = g.slice_last(v, h * cfg.d_v, cfg.d_v)?;
        let vh = g.reshape(vh, &[b, tk, cfg.d_v])?;
        let scores = g.bmm(qh, kh, true)?;
        let scores = g.scale(scores, scale);
        let att = g.softmax(scores, tau)?;
        let oh = g.bmm(att, vh, false)?;
        head_outs.push(g.reshape(oh, &[b * tq, cfg.d_v])?);
        weights.push(att);
    }
    let heads = if head_outs.len() == 1 { head_outs[0] } else { g.concat(&head_outs)? };
    let attended = params.output.forward(g, heads)?;

    let eps = F::from_f(LAYER_NORM_EPS);
    let res1 = g.add(xq, attended)?;
    let (n1g, n1b) = (g.p(params.norm1_gain), g.p(params.norm1_bias));
    let x1 = g.layer_norm(res1, n1g, n1b, eps)?;
    let ff = params.ff1.forward(g, x1)?;
    let ff = g.relu(ff);
    let ff = params.ff2.forward(g, ff)?;
    let res2 = g.add(x1, ff)?;
    let (n2g, n2b) = (g.p(params.norm2_gain), g.p(params.norm2_bias));
    let x2 = g.layer_norm(res2, n2g, n2b, eps)?;
    let out = g.reshape(x2, &[b, tq, d])?;
    Ok(BlockOutput { out, weights, heads })
}

/// Self-attention block: queries, keys and values all come from `f`.
pub fn self_attention<F: Scalar>(g: &mut Graph<'_, F>, f: Var, params: &BlockParams, tau: f64) -> Result<Var> {
    Ok(attention_block(g, f, f, params, tau)?.out)
}

/// Cross-modal attention block: queries from `query_seq`, keys and values
/// from the other modality's `context_seq`.
pub fn cross_modal_attention<F: Scalar>(
    g: &mut Graph<'_, F>,
    query_seq: Var,
    context_seq: Var,
    params: &BlockParams,
    tau: f64,
) -> Result<Var> {
    let (qs, cs) = (g.shape(query_seq), g.shape(context_seq));
    if qs.len() == 3 && cs.len() == 3 && qs[1] != cs[1] {
        return Err(MpnError::dim("cross_modal_attention", qs, cs));
    }
    Ok(attention_block(g, query_seq, context_seq, params, tau)?.out)
}

/// Which attention kind each of the two stages of a co-attention module uses.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum McmOrder {
    SaSa,
    CmaCma,
    CmaSa,
    #[default]
    SaCma,
}

impl McmOrder {
    pub const ALL: [McmOrder; 4] = [McmOrder::SaSa, McmOrder::CmaCma, McmOrder::CmaSa, McmOrder::SaCma];

    fn stages(self) -> [bool; 2] {
        // true = cross-modal
        match self {
            McmOrder::SaSa => [false, false],
            McmOrder::CmaCma => [true, true],
            McmOrder::CmaSa => [true, false],
            McmOrder::SaCma => [false, true],
        }
    }
}

impl fmt::Display for McmOrder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            McmOrder::SaSa => "SA+SA",
            McmOrder::CmaCma => "CMA+CMA",
            McmOrder::CmaSa => "CMA+SA",
            McmOrder::SaCma => "SA+CMA",
        })
    }
}

impl FromStr for McmOrder {
    type Err = MpnError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().replace(' ', "").as_str() {
            "SA+SA" => Ok(McmOrder::SaSa),
            "CMA+CMA" => Ok(McmOrder::CmaCma),
            "CMA+SA" => Ok(McmOrder::CmaSa),
            "SA+CMA" => Ok(McmOrder::SaCma),
            _ => Err(MpnError::Config(format!(
                "unknown co-attention variant {s:?} (expected SA+SA, CMA+CMA, CMA+SA or SA+CMA)"
            ))),
        }
    }
}

/// One co-attention module: two stages, each with a block per modality.
/// With the default order the first stage is self-attention and the second
/// cross-modal attention.
#[derive(Clone, Debug)]
pub struct McmParams {
    pub visual: [BlockParams; 2],
    pub audio: [BlockParams; 2],
}

impl McmParams {
    pub fn new<F: Scalar>(init: &mut Init<'_, F>, name: &str, cfg: AttentionConfig) -> Self {
        Self {
            visual: [
                BlockParams::new(init, &format!("{name}.visual.0"), cfg),
                BlockParams::new(init, &format!("{name}.visual.1"), cfg),
            ],
            audio: [
                BlockParams::new(init, &format!("{name}.audio.0"), cfg),
                BlockParams::new(init, &format!("{name}.audio.1"), cfg),
            ],
        }
    }
}

/// Apply one co-attention module to visual `v` and audio `a`, both `[B × T × d]`.
pub fn mcm_forward<F: Scalar>(
    g: &mut Graph<'_, F>,
    v: Var,
    a: Var,
    params: &McmParams,
    order: McmOrder,
    tau: f64,
) -> Result<(Var, Var)> {
    let (mut v, mut a) = (v, a);
    for (stage, cross) in order.stages().into_iter().enumerate() {
        let (pv, pa) = (&params.visual[stage], &params.audio[stage]);
        (v, a) = if cross {
            (
                cross_modal_attention(g, v, a, pv, tau)?,
                cross_modal_attention(g, a, v, pa, tau)?,
            )
        } else {
            (self_attention(g, v, pv, tau)?, self_attention(g, a, pa, tau)?)
        };
    }
    Ok((v, a))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemperatureSchedule {
    pub tau_start: f64,
    pub tau_end: f64,
    pub anneal_epochs: usize,
}

impl Default for TemperatureSchedule {
    fn default() -> Self {
        Self {
            tau_start: 30.0,
            tau_end: 1.0,
            anneal_epochs: 10,
        }
    }
}

impl TemperatureSchedule {
    /// Linear decay from `tau_start` to `tau_end` over `anneal_epochs`, then flat.
    pub fn tau_at(&self, epoch: usize) -> f64 {
        if self.anneal_epochs == 0 || epoch >= self.anneal_epochs {
            return self.tau_end;
        }
        let frac = epoch as f64 / self.anneal_epochs as f64;
        self.tau_start - (self.tau_start - self.tau_end) * frac
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use crate::rng::Rng;
    use crate::tensor::{Tape, Tensor};

    fn small_cfg(h: usize) -> AttentionConfig {
        AttentionConfig {
            d_model: 4,
            n_heads: h,
            d_k: 3,
            d_v: 2,
            ff_hidden: 5,
            n_mcm: 1,
        }
    }

    fn setup(cfg: AttentionConfig, seed: u64) -> (ParamStore<f64>, McmParams) {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(seed);
        let mcm = McmParams::new(
            &mut Init {
                store: &mut store,
                rng: &mut rng,
            },
            "m",
            cfg,
        );
        (store, mcm)
    }

    fn seq(b: usize, t: usize, d: usize, seed: u64) -> Tensor<f64> {
        let mut r = Rng::new(seed);
        Tensor::new(&[b, t, d], (0..b * t * d).map(|_| r.normal()).collect()).unwrap()
    }

    #[test]
    fn tau_schedule_endpoints_and_midpoint() {
        let s = TemperatureSchedule::default();
        assert_eq!(s.tau_at(0), 30.0);
        assert_eq!(s.tau_at(5), 15.5);
        assert_eq!(s.tau_at(10), 1.0);
        assert_eq!(s.tau_at(250), 1.0);
        for e in 0..20 {
            assert!(s.tau_at(e + 1) <= s.tau_at(e));
        }
    }

    #[test]
    fn single_segment_attends_to_itself() {
        let (store, mcm) = setup(small_cfg(2), 1);
        let mut tape = Tape::new();
        let vars = store.bind(&mut tape, false);
        let mut g = Graph::new(&mut tape, &vars);
        let f = g.constant(seq(1, 1, 4, 2));
        let out = attention_block(&mut g, f, f, &mcm.visual[0], 1.0).unwrap();
        for w in &out.weights {
            assert_eq!(g.value(*w).data(), &[1.0]);
        }
    }

    #[test]
    fn identical_rows_give_mean_of_values() {
        let (store, mcm) = setup(small_cfg(2), 3);
        let row = [0.3, -1.0, 2.0, 0.5];
        let data: Vec<f64> = row.iter().cycle().take(12).copied().collect();
        let mut tape = Tape::new();
        let vars = store.bind(&mut tape, false);
        let mut g = Graph::new(&mut tape, &vars);
        let f = g.constant(Tensor::from_f64(&[1, 3, 4], &data).unwrap());
        let out = attention_block(&mut g, f, f, &mcm.visual[0], 1.0).unwrap();
        for w in &out.weights {
            for &x in g.value(*w).data() {
                assert!((x - 1.0 / 3.0).abs() < 1e-12);
            }
        }
        // every head output row equals the (common) value row
        let heads = g.value(out.heads);
        let wv = store.get(mcm.visual[0].value);
        for h in 0..4 {
            let expect: f64 = (0..4).map(|i| row[i] * wv.get(&[i, h])).sum();
            for t in 0..3 {
                assert!((heads.get(&[t, h]) - expect).abs() < 1e-12);
            }
        }
    }

    /// Step-by-step single-head evaluation written with plain loops.
    fn scalar_single_head(
        x: &[Vec<f64>],
        ctx: &[Vec<f64>],
        store: &ParamStore<f64>,
        p: &BlockParams,
        tau: f64,
    ) -> Vec<Vec<f64>> {
        let (d, dk, dv, ffh) = (p.cfg.d_model, p.cfg.d_k, p.cfg.d_v, p.cfg.ff_hidden);
        let proj = |rows: &[Vec<f64>], w: &Tensor<f64>, n: usize| -> Vec<Vec<f64>> {
            rows.iter()
                .map(|r| (0..n).map(|j| (0..r.len()).map(|i| r[i] * w.get(&[i, j])).sum()).collect())
                .collect()
        };
        let q = proj(x, store.get(p.query), dk);
        let k = proj(ctx, store.get(p.key), dk);
        let v = proj(ctx, store.get(p.value), dv);
        let norm = |r: &[f64], gain: &Tensor<f64>, bias: &Tensor<f64>| -> Vec<f64> {
            let m = r.iter().sum::<f64>() / r.len() as f64;
            let var = r.iter().map(|x| (x - m).powi(2)).sum::<f64>() / r.len() as f64;
            r.iter()
                .enumerate()
                .map(|(i, x)| (x - m) / (var + LAYER_NORM_EPS).sqrt() * gain.data()[i] + bias.data()[i])
                .collect()
        };
        let mut out = Vec::new();
        for t in 0..x.len() {
            let s: Vec<f64> = (0..ctx.len())
                .map(|u| (0..dk).map(|i| q[t][i] * k[u][i]).sum::<f64>() / (dk as f64).sqrt() / tau)
                .collect();
            let mx = s.iter().cloned().fold(f64::MIN, f64::max);
            let e: Vec<f64> = s.iter().map(|x| (x - mx).exp()).collect();
            let z: f64 = e.iter().sum();
            let head: Vec<f64> = (0..dv).map(|j| (0..ctx.len()).map(|u| e[u] / z * v[u][j]).sum()).collect();
            let wo = store.get(p.output.weight);
            let bo = store.get(p.output.bias.unwrap());
            let att: Vec<f64> = (0..d)
                .map(|j| (0..dv).map(|i| head[i] * wo.get(&[i, j])).sum::<f64>() + bo.data()[j])
                .collect();
            let r1: Vec<f64> = (0..d).map(|j| x[t][j] + att[j]).collect();
            let x1 = norm(&r1, store.get(p.norm1_gain), store.get(p.norm1_bias));
            let (w1, b1) = (store.get(p.ff1.weight), store.get(p.ff1.bias.unwrap()));
            let hid: Vec<f64> = (0..ffh)
                .map(|j| ((0..d).map(|i| x1[i] * w1.get(&[i, j])).sum::<f64>() + b1.data()[j]).max(0.0))
                .collect();
            let (w2, b2) = (store.get(p.ff2.weight), store.get(p.ff2.bias.unwrap()));
            let r2: Vec<f64> = (0..d)
                .map(|j| x1[j] + (0..ffh).map(|i| hid[i] * w2.get(&[i, j])).sum::<f64>() + b2.data()[j])
                .collect();
            out.push(norm(&r2, store.get(p.norm2_gain), store.get(p.norm2_bias)));
        }
        out
    }

    fn perturb_norms_and_biases(store: &mut ParamStore<f64>, p: &BlockParams, seed: u64) {
        let mut r = Rng::new(seed);
        for id in [p.norm1_gain, p.norm1_bias, p.norm2_gain, p.norm2_bias, p.output.bias.unwrap(), p.ff1.bias.unwrap()] {
            for x in store.get_mut(id).data_mut() {
                *x += 0.3 * r.normal();
            }
        }
    }

    #[test]
    fn single_head_matches_scalar_oracle() {
        for (t, tau) in [(3, 1.0), (3, 7.5)] {
            let (mut store, mcm) = setup(small_cfg(1), 11);
            let p = mcm.visual[0];
            perturb_norms_and_biases(&mut store, &p, 4);
            let x = seq(1, t, 4, 12);
            let rows: Vec<Vec<f64>> = x.data().chunks(4).map(|c| c.to_vec()).collect();
            let expect = scalar_single_head(&rows, &rows, &store, &p, tau);
            let mut tape = Tape::new();
            let vars = store.bind(&mut tape, false);
            let mut g = Graph::new(&mut tape, &vars);
            let f = g.constant(x);
            let y = self_attention(&mut g, f, &p, tau).unwrap();
            for (a, b) in g.value(y).data().iter().zip(expect.iter().flatten()) {
                assert!((a - b).abs() <= 1e-10 * b.abs().max(1.0), "{a} vs {b}");
            }
        }
    }

    #[test]
    fn cross_modal_matches_scalar_oracle() {
        let (mut store, mcm) = setup(small_cfg(1), 21);
        let p = mcm.visual[1];
        perturb_norms_and_biases(&mut store, &p, 5);
        let xq = seq(1, 2, 4, 22);
        let xc = seq(1, 2, 4, 23);
        let rq: Vec<Vec<f64>> = xq.data().chunks(4).map(|c| c.to_vec()).collect();
        let rc: Vec<Vec<f64>> = xc.data().chunks(4).map(|c| c.to_vec()).collect();
        let expect = scalar_single_head(&rq, &rc, &store, &p, 2.0);
        let mut tape = Tape::new();
        let vars = store.bind(&mut tape, false);
        let mut g = Graph::new(&mut tape, &vars);
        let (q, c) = (g.constant(xq), g.constant(xc));
        let y = cross_modal_attention(&mut g, q, c, &p, 2.0).unwrap();
        for (a, b) in g.value(y).data().iter().zip(expect.iter().flatten()) {
            assert!((a - b).abs() <= 1e-10 * b.abs().max(1.0));
        }
    }

    #[test]
    fn constant_context_collapses_to_common_value() {
        let (store, mcm) = setup(small_cfg(2), 31);
        let p = mcm.visual[1];
        let row = [1.0, -0.5, 0.25, 2.0];
        let ctx: Vec<f64> = row.iter().cycle().take(12).copied().collect();
        let mut tape = Tape::new();
        let vars = store.bind(&mut tape, false);
        let mut g = Graph::new(&mut tape, &vars);
        let c = g.constant(Tensor::from_f64(&[1, 3, 4], &ctx).unwrap());
        let q1 = g.constant(seq(1, 3, 4, 32));
        let q2 = g.constant(seq(1, 3, 4, 33));
        let h1 = attention_block(&mut g, q1, c, &p, 1.0).unwrap().heads;
        let h2 = attention_block(&mut g, q2, c, &p, 1.0).unwrap().heads;
        assert_eq!(g.value(h1), g.value(h2));
    }

    #[test]
    fn cross_with_self_context_equals_self_attention() {
        let (store, mcm) = setup(small_cfg(2), 41);
        let mut tape = Tape::new();
        let vars = store.bind(&mut tape, false);
        let mut g = Graph::new(&mut tape, &vars);
        let x = g.constant(seq(2, 3, 4, 42));
        let a = self_attention(&mut g, x, &mcm.audio[1], 1.5).unwrap();
        let b = cross_modal_attention(&mut g, x, x, &mcm.audio[1], 1.5).unwrap();
        assert_eq!(g.value(a), g.value(b));
    }

    #[test]
    fn sequence_length_mismatch_rejected() {
        let (store, mcm) = setup(small_cfg(1), 1);
        let mut tape = Tape::new();
        let vars = store.bind(&mut tape, false);
        let mut g = Graph::new(&mut tape, &vars);
        let q = g.constant(seq(1, 3, 4, 1));
        let c = g.constant(seq(1, 2, 4, 2));
        assert!(cross_modal_attention(&mut g, q, c, &mcm.visual[1], 1.0).is_err());
        let bad = g.constant(seq(1, 3, 5, 3));
        assert!(self_attention(&mut g, bad, &mcm.visual[0], 1.0).is_err());
    }

    #[test]
    fn zero_weights_make_block_identity_on_normalized_input() {
        let (mut store, mcm) = setup(small_cfg(2), 51);
        let p = mcm.visual[0];
        for id in [p.query, p.key, p.value, p.output.weight, p.ff1.weight, p.ff2.weight] {
            store.get_mut(id).data_mut().fill(0.0);
        }
        // rows with zero mean and unit variance are fixed points of layer norm
        let data = [1.0, -1.0, 1.0, -1.0, 2f64.sqrt(), 0.0, -(2f64.sqrt()), 0.0];
        let mut tape = Tape::new();
        let vars = store.bind(&mut tape, false);
        let mut g = Graph::new(&mut tape, &vars);
        let x = g.constant(Tensor::from_f64(&[1, 2, 4], &data).unwrap());
        let y = self_attention(&mut g, x, &p, 1.0).unwrap();
        for (a, b) in g.value(y).data().iter().zip(data) {
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn multi_head_with_one_head_matches_direct_computation() {
        let (store, mcm) = setup(small_cfg(1), 61);
        let p = mcm.audio[0];
        let x = seq(1, 4, 4, 62);
        let mut tape = Tape::new();
        let vars = store.bind(&mut tape, false);
        let mut g = Graph::new(&mut tape, &vars);
        let xv = g.constant(x.clone());
        let heads = attention_block(&mut g, xv, xv, &p, 1.0).unwrap().heads;
        // direct: softmax(Q Kᵀ / √d_k) V on the whole projection matrices
        let flat = g.reshape(xv, &[4, 4]).unwrap();
        let (wq, wk, wv) = (g.p(p.query), g.p(p.key), g.p(p.value));
        let q = g.matmul(flat, wq).unwrap();
        let k = g.matmul(flat, wk).unwrap();
        let v = g.matmul(flat, wv).unwrap();
        let q = g.reshape(q, &[1, 4, 3]).unwrap();
        let k = g.reshape(k, &[1, 4, 3]).unwrap();
        let v = g.reshape(v, &[1, 4, 2]).unwrap();
        let s = g.bmm(q, k, true).unwrap();
        let s = g.scale(s, 1.0 / 3f64.sqrt());
        let w = g.softmax(s, 1.0).unwrap();
        let o = g.bmm(w, v, false).unwrap();
        assert_eq!(g.value(o).data(), g.value(heads).data());
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let (store, mcm) = setup(small_cfg(2), 71);
        let mut tape = Tape::new();
        let vars = store.bind(&mut tape, false);
        let mut g = Graph::new(&mut tape, &vars);
        let x = g.constant(seq(3, 5, 4, 72).map(|v| v * 4.0));
        let c = g.constant(seq(3, 5, 4, 73));
        let out = attention_block(&mut g, x, c, &mcm.visual[1], 1.0).unwrap();
        for w in out.weights {
            for row in g.value(w).data().chunks(5) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
                assert!(row.iter().all(|&p| p > 0.0 && p < 1.0));
            }
        }
    }

    #[test]
    fn sa_sa_ignores_other_modality() {
        let (store, mcm) = setup(small_cfg(2), 81);
        let mut tape = Tape::new();
        let vars = store.bind(&mut tape, false);
        let mut g = Graph::new(&mut tape, &vars);
        let v = g.constant(seq(1, 3, 4, 82));
        let a1 = g.constant(seq(1, 3, 4, 83));
        let a2 = g.constant(seq(1, 3, 4, 84));
        let (v1, _) = mcm_forward(&mut g, v, a1, &mcm, McmOrder::SaSa, 1.0).unwrap();
        let (v2, _) = mcm_forward(&mut g, v, a2, &mcm, McmOrder::SaSa, 1.0).unwrap();
        assert_eq!(g.value(v1), g.value(v2));
        let (v3, _) = mcm_forward(&mut g, v, a1, &mcm, McmOrder::SaCma, 1.0).unwrap();
        let (v4, _) = mcm_forward(&mut g, v, a2, &mcm, McmOrder::SaCma, 1.0).unwrap();
        assert_ne!(g.value(v3), g.value(v4));
    }

    #[test]
    fn default_order_is_self_then_cross() {
        let (store, mcm) = setup(small_cfg(2), 91);
        let mut tape = Tape::new();
        let vars = store.bind(&mut tape, false);
        let mut g = Graph::new(&mut tape, &vars);
        let v = g.constant(seq(1, 3, 4, 92));
        let a = g.constant(seq(1, 3, 4, 93));
        let (mv, ma) = mcm_forward(&mut g, v, a, &mcm, McmOrder::default(), 2.0).unwrap();
        let sv = self_attention(&mut g, v, &mcm.visual[0], 2.0).unwrap();
        let sa = self_attention(&mut g, a, &mcm.audio[0], 2.0).unwrap();
        let cv = cross_modal_attention(&mut g, sv, sa, &mcm.visual[1], 2.0).unwrap();
        let ca = cross_modal_attention(&mut g, sa, sv, &mcm.audio[1], 2.0).unwrap();
        assert_eq!(g.value(mv), g.value(cv));
        assert_eq!(g.value(ma), g.value(ca));
    }

    #[test]
    fn order_names_parse() {
        for o in McmOrder::ALL {
            assert_eq!(o.to_string().parse::<McmOrder>().unwrap(), o);
        }
        assert!("SA+XX".parse::<McmOrder>().is_err());
        assert_eq!(McmOrder::default().to_string(), "SA+CMA");
    }
}
