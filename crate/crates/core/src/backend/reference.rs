//! Seeded decoder-only transformer over a byte vocabulary.
//!
//! Pre-LayerNorm blocks with causal multi-head attention and a GELU
//! feed-forward, final LayerNorm, and an LM head tied to the token
//! embedding. Parameters come from `ChaCha8Rng::seed_from_u64(seed)`.
//!
//! Position ids are counted over real tokens only and padded keys are
//! masked out, so left padding does not change real-token states. The
//! forward pass can record a [`Tape`] from which [`TransformerModel::backward`]
//! computes gradients for the adapter factors; base weights never receive
//! gradients.

use std::borrow::Cow;

use ndarray::{s, Array1, Array2, Array3, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{check_batch, Backend, BackendDescriptor, BackendError, HiddenStateBatch, TokenSequence};
use crate::train::lora::LoraAdapter;
use crate::train::quant::{dequantize_blockwise, QuantizedTensor};

pub const PAD_ID: u32 = 256;
pub const EOS_ID: u32 = 257;

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub ff_dim: usize,
    pub num_layers: usize,
    pub max_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 258,
            hidden_dim: 64,
            num_heads: 4,
            ff_dim: 256,
            num_layers: 2,
            max_len: 512,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum BaseWeight {
    Dense(Array2<f64>),
    Quantized(QuantizedTensor),
}

impl BaseWeight {
    pub fn dense(&self) -> Array2<f64> {
        self.view().into_owned()
    }

    fn view(&self) -> Cow<'_, Array2<f64>> {
        match self {
            BaseWeight::Dense(w) => Cow::Borrowed(w),
            BaseWeight::Quantized(q) => {
                let shape = q.shape();
                Cow::Owned(
                    Array2::from_shape_vec((shape[0], shape[1]), dequantize_blockwise(q))
                        .expect("quantized shape matches its length"),
                )
            }
        }
    }

    fn shape(&self) -> (usize, usize) {
        match self {
            BaseWeight::Dense(w) => w.dim(),
            BaseWeight::Quantized(q) => (q.shape()[0], q.shape()[1]),
        }
    }
}

/// `y = x·Wᵀ + bias`, plus `(α/r)·drop(x)·Aᵀ·Bᵀ` when an adapter is attached.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub name: String,
    pub weight: BaseWeight,
    pub bias: Array1<f64>,
    pub adapter: Option<LoraAdapter>,
}

/// Gradients for one adapter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterGrad {
    pub a: Array2<f64>,
    pub b: Array2<f64>,
}

struct LinearCache {
    /// Adapter-path input after dropout.
    dropped: Option<Array2<f64>>,
    /// Dropout multipliers (0 or 1/(1-p)), when dropout was active.
    keep: Option<Array2<f64>>,
    /// `drop(x)·Aᵀ`.
    u: Option<Array2<f64>>,
}

impl Linear {
    /// `(out, in)`.
    pub fn shape(&self) -> (usize, usize) {
        self.weight.shape()
    }

    fn forward(&self, x: &Array2<f64>, mode: &mut Mode<'_>) -> (Array2<f64>, LinearCache) {
        let w = self.weight.view();
        let mut y = x.dot(&w.t()) + &self.bias;
        let mut cache = LinearCache {
            dropped: None,
            keep: None,
            u: None,
        };
        if let Some(ad) = &self.adapter {
            let (dropped, keep) = match mode {
                Mode::Train(rng) if ad.dropout > 0.0 => {
                    let p = ad.dropout;
                    let keep = Array2::from_shape_simple_fn(x.dim(), || {
                        if rng.gen::<f64>() < p {
                            0.0
                        } else {
                            1.0 / (1.0 - p)
                        }
                    });
                    (x * &keep, Some(keep))
                }
                _ => (x.clone(), None),
            };
            let u = dropped.dot(&ad.a.t());
            y = y + u.dot(&ad.b.t()) * ad.scale();
            if mode.records() {
                cache = LinearCache {
                    dropped: Some(dropped),
                    keep,
                    u: Some(u),
                };
            }
        }
        (y, cache)
    }

    /// Returns `dL/dx` and accumulates adapter gradients into `grad`.
    fn backward(
        &self,
        dy: &Array2<f64>,
        cache: &LinearCache,
        grad: Option<&mut AdapterGrad>,
    ) -> Array2<f64> {
        let w = self.weight.view();
        let mut dx = dy.dot(&*w);
        if let (Some(ad), Some(grad)) = (&self.adapter, grad) {
            let s = ad.scale();
            let u = cache.u.as_ref().expect("tape recorded adapter input");
            let dropped = cache.dropped.as_ref().expect("tape recorded adapter input");
            grad.b.scaled_add(s, &dy.t().dot(u));
            let du = dy.dot(&ad.b) * s;
            grad.a += &du.t().dot(dropped);
            let mut d_dropped = du.dot(&ad.a);
            if let Some(keep) = &cache.keep {
                d_dropped *= keep;
            }
            dx += &d_dropped;
        }
        dx
    }
}

#[derive(Debug, Clone, PartialEq)]
struct LayerNorm {
    gamma: Array1<f64>,
    beta: Array1<f64>,
}

struct LnCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

impl LayerNorm {
    fn new(dim: usize) -> Self {
        Self {
            gamma: Array1::ones(dim),
            beta: Array1::zeros(dim),
        }
    }

    fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, LnCache) {
        let d = x.ncols() as f64;
        let mut xhat = x.clone();
        let mut inv_std = Array1::zeros(x.nrows());
        for (mut row, is) in xhat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
            let mu = row.sum() / d;
            row -= mu;
            let var = row.iter().map(|v| v * v).sum::<f64>() / d;
            *is = 1.0 / (var + LN_EPS).sqrt();
            row *= *is;
        }
        let y = &xhat * &self.gamma + &self.beta;
        (y, LnCache { xhat, inv_std })
    }

    fn backward(&self, dy: &Array2<f64>, cache: &LnCache) -> Array2<f64> {
        let d = dy.ncols() as f64;
        let dxhat = dy * &self.gamma;
        let mut dx = Array2::zeros(dy.dim());
        for (((mut out, g), xh), is) in dx
            .rows_mut()
            .into_iter()
            .zip(dxhat.rows())
            .zip(cache.xhat.rows())
            .zip(cache.inv_std.iter())
        {
            let mean_g = g.sum() / d;
            let mean_gx = g.dot(&xh) / d;
            Zip::from(&mut out)
                .and(&g)
                .and(&xh)
                .for_each(|o, &gi, &xi| *o = is * (gi - mean_g - xi * mean_gx));
        }
        dx
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Block {
    ln1: LayerNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    ln2: LayerNorm,
    ff1: Linear,
    ff2: Linear,
}

struct BlockCache {
    ln1: LnCache,
    q: LinearCache,
    k: LinearCache,
    v: LinearCache,
    o: LinearCache,
    ln2: LnCache,
    ff1: LinearCache,
    ff2: LinearCache,
    qs: Array2<f64>,
    ks: Array2<f64>,
    vs: Array2<f64>,
    /// Attention probabilities per head, `heads × T × T`.
    probs: Array3<f64>,
    ff_pre: Array2<f64>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

enum Mode<'a> {
    Infer,
    /// Record a tape but keep dropout off.
    Record,
    Train(&'a mut ChaCha8Rng),
}

impl Mode<'_> {
    fn records(&self) -> bool {
        !matches!(self, Mode::Infer)
    }
}

impl Block {
    fn linears(&self) -> [&Linear; 6] {
        [&self.q, &self.k, &self.v, &self.o, &self.ff1, &self.ff2]
    }

    fn linears_mut(&mut self) -> [&mut Linear; 6] {
        [
            &mut self.q,
            &mut self.k,
            &mut self.v,
            &mut self.o,
            &mut self.ff1,
            &mut self.ff2,
        ]
    }

    fn forward(
        &self,
        x: &Array2<f64>,
        mask: &[bool],
        heads: usize,
        mode: &mut Mode<'_>,
    ) -> (Array2<f64>, Option<BlockCache>) {
        let t_len = x.nrows();
        let d = x.ncols();
        let dh = d / heads;
        let inv_sqrt = 1.0 / (dh as f64).sqrt();

        let (a, ln1) = self.ln1.forward(x);
        let (qs, qc) = self.q.forward(&a, mode);
        let (ks, kc) = self.k.forward(&a, mode);
        let (vs, vc) = self.v.forward(&a, mode);

        let mut attn = Array2::zeros((t_len, d));
        let mut probs = Array3::zeros((heads, t_len, t_len));
        for h in 0..heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let qh = qs.slice(cols);
            let kh = ks.slice(cols);
            let vh = vs.slice(cols);
            let scores = qh.dot(&kh.t());
            let mut p = probs.index_axis_mut(Axis(0), h);
            for i in 0..t_len {
                // Real queries see earlier real keys; a pad query sees only itself.
                let allowed = |j: usize| if mask[i] { mask[j] } else { j == i };
                let mut max = f64::NEG_INFINITY;
                for j in 0..=i {
                    if allowed(j) {
                        max = max.max(scores[[i, j]] * inv_sqrt);
                    }
                }
                let mut sum = 0.0;
                for j in 0..=i {
                    if allowed(j) {
                        let e = (scores[[i, j]] * inv_sqrt - max).exp();
                        p[[i, j]] = e;
                        sum += e;
                    }
                }
                for j in 0..=i {
                    p[[i, j]] /= sum;
                }
            }
            attn.slice_mut(cols).assign(&p.dot(&vh));
        }

        let (proj, oc) = self.o.forward(&attn, mode);
        let x1 = x + &proj;
        let (b, ln2) = self.ln2.forward(&x1);
        let (ff_pre, f1c) = self.ff1.forward(&b, mode);
        let act = ff_pre.mapv(gelu);
        let (ff_out, f2c) = self.ff2.forward(&act, mode);
        let x2 = x1 + &ff_out;

        let cache = mode.records().then(|| BlockCache {
            ln1,
            q: qc,
            k: kc,
            v: vc,
            o: oc,
            ln2,
            ff1: f1c,
            ff2: f2c,
            qs,
            ks,
            vs,
            probs,
            ff_pre,
        });
        (x2, cache)
    }

    fn backward(
        &self,
        dx2: &Array2<f64>,
        c: &BlockCache,
        heads: usize,
        grads: &mut [AdapterGrad],
    ) -> Array2<f64> {
        let t_len = dx2.nrows();
        let d = dx2.ncols();
        let dh = d / heads;
        let inv_sqrt = 1.0 / (dh as f64).sqrt();
        let mut g = grads.iter_mut().map(Some).collect::<Vec<_>>();
        let mut slot = |i: usize| g[i].take();

        // Feed-forward branch.
        let d_act = self.ff2.backward(dx2, &c.ff2, slot(5));
        let d_pre = Zip::from(&d_act)
            .and(&c.ff_pre)
            .map_collect(|&ga, &z| ga * gelu_grad(z));
        let d_b = self.ff1.backward(&d_pre, &c.ff1, slot(4));
        let dx1 = dx2 + &self.ln2.backward(&d_b, &c.ln2);

        // Attention branch.
        let d_attn = self.o.backward(&dx1, &c.o, slot(3));
        let mut dq = Array2::zeros((t_len, d));
        let mut dk = Array2::zeros((t_len, d));
        let mut dv = Array2::zeros((t_len, d));
        for h in 0..heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let p = c.probs.index_axis(Axis(0), h);
            let d_oh = d_attn.slice(cols);
            let dp = d_oh.dot(&c.vs.slice(cols).t());
            dv.slice_mut(cols).assign(&p.t().dot(&d_oh));
            let mut ds = Array2::zeros((t_len, t_len));
            for i in 0..t_len {
                let dot: f64 = (0..=i).map(|j| p[[i, j]] * dp[[i, j]]).sum();
                for j in 0..=i {
                    ds[[i, j]] = p[[i, j]] * (dp[[i, j]] - dot) * inv_sqrt;
                }
            }
            dq.slice_mut(cols).assign(&ds.dot(&c.ks.slice(cols)));
            dk.slice_mut(cols).assign(&ds.t().dot(&c.qs.slice(cols)));
        }
        let mut da = self.q.backward(&dq, &c.q, slot(0));
        da += &self.k.backward(&dk, &c.k, slot(1));
        da += &self.v.backward(&dv, &c.v, slot(2));
        dx1 + self.ln1.backward(&da, &c.ln1)
    }
}

/// Activations recorded by a forward pass, consumed by [`TransformerModel::backward`].
pub struct Tape {
    blocks: Vec<BlockCache>,
    ln_f: LnCache,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransformerModel {
    config: ModelConfig,
    descriptor: BackendDescriptor,
    seed: u64,
    tok_emb: Array2<f64>,
    pos_emb: Array2<f64>,
    blocks: Vec<Block>,
    ln_f: LayerNorm,
}

/// The default desk-scale model: 2 layers, 4 heads, width 64, byte vocabulary.
pub fn make_reference_model(seed: u64) -> TransformerModel {
    TransformerModel::new(ModelConfig::default(), seed)
}

impl TransformerModel {
    pub fn new(config: ModelConfig, seed: u64) -> Self {
        assert!(config.hidden_dim > 0 && config.hidden_dim % config.num_heads == 0);
        assert!(config.max_len >= 8 && config.vocab_size > PAD_ID.max(EOS_ID) as usize);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.hidden_dim;
        let mut normal = |shape: (usize, usize), std: f64| {
            let dist = Normal::new(0.0, std).expect("positive std");
            Array2::from_shape_simple_fn(shape, || rng.sample(dist))
        };
        let tok_emb = normal((config.vocab_size, d), 1.0);
        let pos_emb = normal((config.max_len, d), 0.5);
        let mut blocks = Vec::with_capacity(config.num_layers);
        for layer in 0..config.num_layers {
            let mut linear = |name: &str, out: usize, inp: usize| Linear {
                name: format!("layers.{layer}.{name}"),
                weight: BaseWeight::Dense(normal((out, inp), 1.0 / (inp as f64).sqrt())),
                bias: Array1::zeros(out),
                adapter: None,
            };
            let q = linear("attn.q", d, d);
            let k = linear("attn.k", d, d);
            let v = linear("attn.v", d, d);
            let o = linear("attn.o", d, d);
            let ff1 = linear("ff.up", config.ff_dim, d);
            let ff2 = linear("ff.down", d, config.ff_dim);
            blocks.push(Block {
                ln1: LayerNorm::new(d),
                q,
                k,
                v,
                o,
                ln2: LayerNorm::new(d),
                ff1,
                ff2,
            });
        }
        let descriptor = BackendDescriptor {
            name: format!("reference-seed{seed}"),
            hidden_dim: d,
            vocab_size: config.vocab_size,
            max_sequence_length: config.max_len,
            supports_generation: true,
            concurrent: true,
        };
        Self {
            config,
            descriptor,
            seed,
            tok_emb,
            pos_emb,
            blocks,
            ln_f: LayerNorm::new(d),
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Linear layers in a fixed order: per layer q, k, v, o, ff.up, ff.down.
    pub fn linears(&self) -> impl Iterator<Item = &Linear> {
        self.blocks.iter().flat_map(|b| b.linears())
    }

    pub fn linears_mut(&mut self) -> impl Iterator<Item = &mut Linear> {
        self.blocks.iter_mut().flat_map(|b| b.linears_mut())
    }

    pub fn has_adapters(&self) -> bool {
        self.linears().any(|l| l.adapter.is_some())
    }

    /// Zeroed gradient buffers, one per linear layer (empty for unadapted layers).
    pub fn zero_grads(&self) -> Vec<AdapterGrad> {
        self.linears()
            .map(|l| match &l.adapter {
                Some(ad) => AdapterGrad {
                    a: Array2::zeros(ad.a.dim()),
                    b: Array2::zeros(ad.b.dim()),
                },
                None => AdapterGrad {
                    a: Array2::zeros((0, 0)),
                    b: Array2::zeros((0, 0)),
                },
            })
            .collect()
    }

    fn run(
        &self,
        ids: &[u32],
        mask: &[bool],
        mode: &mut Mode<'_>,
    ) -> (Array2<f64>, Option<Tape>) {
        let d = self.config.hidden_dim;
        let mut x = Array2::zeros((ids.len(), d));
        let mut pos = 0usize;
        for (t, (&id, &real)) in ids.iter().zip(mask).enumerate() {
            let mut row = x.row_mut(t);
            row.assign(&self.tok_emb.row(id as usize));
            if real {
                row += &self.pos_emb.row(pos);
                pos += 1;
            }
        }
        let mut caches = Vec::new();
        for block in &self.blocks {
            let (next, cache) = block.forward(&x, mask, self.config.num_heads, mode);
            x = next;
            caches.extend(cache);
        }
        let (h, ln_f) = self.ln_f.forward(&x);
        let tape = mode.records().then(|| Tape {
            blocks: caches,
            ln_f,
        });
        (h, tape)
    }

    fn check_ids(&self, ids: &[u32]) -> Result<(), BackendError> {
        if ids.len() > self.config.max_len {
            return Err(BackendError::SequenceTooLong {
                limit: self.config.max_len,
                actual: ids.len(),
            });
        }
        if let Some(bad) = ids.iter().find(|&&id| id as usize >= self.config.vocab_size) {
            return Err(BackendError::InvalidBatch(format!("token id {bad} out of vocabulary")));
        }
        Ok(())
    }

    /// Hidden states for one unpadded sequence, plus a tape for [`Self::backward`].
    ///
    /// With `dropout_rng` set, adapter dropout is active and draws from it.
    pub(crate) fn forward_with_tape(
        &self,
        seq: &TokenSequence,
        dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(Array2<f64>, Tape), BackendError> {
        self.check_ids(seq.token_ids())?;
        let mut mode = match dropout_rng {
            Some(rng) => Mode::Train(rng),
            None => Mode::Record,
        };
        let (h, tape) = self.run(seq.token_ids(), seq.attention_mask(), &mut mode);
        Ok((h, tape.expect("recording mode")))
    }

    /// Accumulates adapter gradients for `dL/dh` (one row per position) into `grads`.
    pub(crate) fn backward(&self, tape: &Tape, dh: &Array2<f64>, grads: &mut [AdapterGrad]) {
        let mut dx = self.ln_f.backward(dh, &tape.ln_f);
        for (layer, (block, cache)) in self.blocks.iter().zip(&tape.blocks).enumerate().rev() {
            let slots = &mut grads[layer * 6..(layer + 1) * 6];
            dx = block.backward(&dx, cache, self.config.num_heads, slots);
        }
    }

    pub fn logits(&self, hidden: ndarray::ArrayView1<'_, f64>) -> Array1<f64> {
        self.tok_emb.dot(&hidden)
    }

    fn weights_digest(&self) -> String {
        let mut h = Sha256::new();
        let mut feed = |a: &Array2<f64>| {
            for v in a.iter() {
                h.update(v.to_le_bytes());
            }
        };
        for l in self.linears() {
            match &l.weight {
                BaseWeight::Dense(w) => feed(w),
                BaseWeight::Quantized(q) => {
                    feed(&Array2::from_shape_vec((1, q.len()), dequantize_blockwise(q)).unwrap())
                }
            }
            if let Some(ad) = &l.adapter {
                feed(&ad.a);
                feed(&ad.b);
            }
        }
        hex::encode(&h.finalize()[..8])
    }
}

impl Backend for TransformerModel {
    fn descriptor(&self) -> &BackendDescriptor {
        &self.descriptor
    }

    fn fingerprint(&self) -> String {
        format!("{}:{}", self.descriptor.name, self.weights_digest())
    }

    fn pad_token_id(&self) -> u32 {
        PAD_ID
    }

    fn tokenize(&self, text: &str) -> Result<TokenSequence, BackendError> {
        if text.is_empty() {
            return Err(BackendError::EmptyInput);
        }
        let ids: Vec<u32> = text.bytes().map(u32::from).collect();
        if ids.len() > self.config.max_len {
            return Err(BackendError::SequenceTooLong {
                limit: self.config.max_len,
                actual: ids.len(),
            });
        }
        TokenSequence::new(ids)
    }

    fn forward_hidden_states(
        &self,
        batch: &[TokenSequence],
    ) -> Result<HiddenStateBatch, BackendError> {
        let width = check_batch(batch)?;
        let mut states = Array3::zeros((batch.len(), width, self.config.hidden_dim));
        for (row, seq) in batch.iter().enumerate() {
            self.check_ids(seq.token_ids())?;
            let (h, _) = self.run(seq.token_ids(), seq.attention_mask(), &mut Mode::Infer);
            states.index_axis_mut(Axis(0), row).assign(&h);
        }
        Ok(HiddenStateBatch {
            states,
            masks: batch.iter().map(|s| s.attention_mask().to_vec()).collect(),
        })
    }

    fn generate_greedy(&self, prompt: &str, max_new_tokens: usize) -> Result<String, BackendError> {
        let mut ids = self.tokenize(prompt)?.token_ids().to_vec();
        let mut out = Vec::new();
        for _ in 0..max_new_tokens {
            if ids.len() >= self.config.max_len {
                break;
            }
            let mask = vec![true; ids.len()];
            let (h, _) = self.run(&ids, &mask, &mut Mode::Infer);
            let logits = self.logits(h.row(ids.len() - 1));
            let next = logits
                .iter()
                .enumerate()
                .filter(|(id, _)| *id as u32 != PAD_ID)
                .fold((0usize, f64::NEG_INFINITY), |best, (id, &l)| {
                    if l > best.1 {
                        (id, l)
                    } else {
                        best
                    }
                })
                .0 as u32;
            if next == EOS_ID {
                break;
            }
            ids.push(next);
            out.push(next as u8);
        }
        Ok(String::from_utf8_lossy(&out).into_owned())
    }

    fn as_transformer(&self) -> Option<&TransformerModel> {
        Some(self)
    }
}
