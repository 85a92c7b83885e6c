use std::sync::atomic::{AtomicUsize, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::prompt::Tokenizer;
use crate::tensor::{
    add_matmul_tn, dropout_mask, gemm_view, log_sum_exp, matmul, softmax_in_place, Mat, View,
    ViewMut,
};

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LmConfig {
    pub vocab_size: usize,
    pub layers: usize,
    pub dim: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub context: usize,
    pub dropout: f64,
    pub seed: u64,
}

impl Default for LmConfig {
    fn default() -> Self {
        LmConfig {
            vocab_size: Tokenizer::default().vocab_size(),
            layers: 2,
            dim: 128,
            heads: 4,
            ff_dim: 512,
            context: 2048,
            dropout: 0.1,
            seed: 0,
        }
    }
}

impl LmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0
            || self.layers == 0
            || self.dim == 0
            || self.heads == 0
            || self.ff_dim == 0
            || self.context == 0
        {
            return Err(Error::Config("language model sizes must be positive".into()));
        }
        if self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "width {} is not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("dropout must be in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LmLayer {
    pub ln1_g: Mat,
    pub ln1_b: Mat,
    /// `d x 3d`, columns are query, key, value.
    pub w_qkv: Mat,
    pub w_o: Mat,
    pub ln2_g: Mat,
    pub ln2_b: Mat,
    pub w_ff1: Mat,
    pub b_ff1: Mat,
    pub w_ff2: Mat,
    pub b_ff2: Mat,
}

/// Token embeddings double as the output head.
#[derive(Clone, Debug, PartialEq)]
pub struct LmParams {
    pub tok_emb: Mat,
    pub pos_emb: Mat,
    pub layers: Vec<LmLayer>,
    pub lnf_g: Mat,
    pub lnf_b: Mat,
}

const LAYER_TENSORS: [&str; 10] = [
    "ln1_g", "ln1_b", "w_qkv", "w_o", "ln2_g", "ln2_b", "w_ff1", "b_ff1", "w_ff2", "b_ff2",
];

impl LmParams {
    pub fn zeros_like(other: &LmParams) -> Self {
        let mut p = other.clone();
        for t in p.tensors_mut() {
            t.fill(0.0);
        }
        p
    }

    pub fn names(&self) -> Vec<String> {
        let mut n = vec!["tok_emb".to_string(), "pos_emb".to_string()];
        for i in 0..self.layers.len() {
            n.extend(LAYER_TENSORS.iter().map(|t| format!("layer{i}.{t}")));
        }
        n.push("lnf_g".into());
        n.push("lnf_b".into());
        n
    }

    pub fn tensors(&self) -> Vec<&Mat> {
        let mut v = vec![&self.tok_emb, &self.pos_emb];
        for l in &self.layers {
            v.extend([
                &l.ln1_g, &l.ln1_b, &l.w_qkv, &l.w_o, &l.ln2_g, &l.ln2_b, &l.w_ff1, &l.b_ff1,
                &l.w_ff2, &l.b_ff2,
            ]);
        }
        v.push(&self.lnf_g);
        v.push(&self.lnf_b);
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Mat> {
        let mut v = vec![&mut self.tok_emb, &mut self.pos_emb];
        for l in &mut self.layers {
            v.extend([
                &mut l.ln1_g,
                &mut l.ln1_b,
                &mut l.w_qkv,
                &mut l.w_o,
                &mut l.ln2_g,
                &mut l.ln2_b,
                &mut l.w_ff1,
                &mut l.b_ff1,
                &mut l.w_ff2,
                &mut l.b_ff2,
            ]);
        }
        v.push(&mut self.lnf_g);
        v.push(&mut self.lnf_b);
        v
    }

    pub fn add_assign(&mut self, other: &LmParams) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for t in self.tensors_mut() {
            t.data.iter_mut().for_each(|v| *v *= s);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }

    pub fn norm(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|t| t.data.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }
}

/// Counts full forward passes. A clone starts from the current count.
#[derive(Debug, Default)]
pub struct CallCounter(AtomicUsize);

impl CallCounter {
    pub fn get(&self) -> usize {
        self.0.load(Ordering::Relaxed)
    }

    pub fn reset(&self) {
        self.0.store(0, Ordering::Relaxed);
    }

    fn bump(&self) {
        self.0.fetch_add(1, Ordering::Relaxed);
    }
}

impl Clone for CallCounter {
    fn clone(&self) -> Self {
        CallCounter(AtomicUsize::new(self.get()))
    }
}

/// Decoder-only transformer: learned positions, pre-norm blocks, GELU
/// feed-forward, tied output head.
#[derive(Clone, Debug)]
pub struct TinyCausalLM {
    pub config: LmConfig,
    pub params: LmParams,
    pub forward_calls: CallCounter,
}

impl PartialEq for TinyCausalLM {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.params == other.params
    }
}

struct LnCache {
    xhat: Mat,
    rstd: Vec<f64>,
}

struct LayerCache {
    ln1: LnCache,
    a: Mat,
    qkv: Mat,
    probs: Vec<Mat>,
    o: Mat,
    mask1: Option<Vec<f64>>,
    ln2: LnCache,
    b: Mat,
    u: Mat,
    gl: Mat,
    mask2: Option<Vec<f64>>,
}

pub(crate) struct LmCache {
    tokens: Vec<usize>,
    mask0: Option<Vec<f64>>,
    layers: Vec<LayerCache>,
    lnf: LnCache,
    /// Final normalized hidden states.
    y: Mat,
}

fn layer_norm(x: &Mat, g: &Mat, b: &Mat) -> (Mat, LnCache) {
    let d = x.cols;
    let mut xhat = Mat::zeros(x.rows, d);
    let mut out = Mat::zeros(x.rows, d);
    let mut rstd = Vec::with_capacity(x.rows);
    for r in 0..x.rows {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let s = 1.0 / (var + LN_EPS).sqrt();
        rstd.push(s);
        let xh = xhat.row_mut(r);
        for j in 0..d {
            xh[j] = (row[j] - mean) * s;
        }
        let o = out.row_mut(r);
        for j in 0..d {
            o[j] = xh[j] * g.data[j] + b.data[j];
        }
    }
    (out, LnCache { xhat, rstd })
}

fn layer_norm_backward(dy: &Mat, c: &LnCache, g: &Mat, dg: &mut Mat, db: &mut Mat) -> Mat {
    let d = dy.cols;
    let mut dx = Mat::zeros(dy.rows, d);
    let mut dxhat = vec![0.0; d];
    for r in 0..dy.rows {
        let dyr = dy.row(r);
        let xh = c.xhat.row(r);
        for j in 0..d {
            dg.data[j] += dyr[j] * xh[j];
            db.data[j] += dyr[j];
            dxhat[j] = dyr[j] * g.data[j];
        }
        let mean_d = dxhat.iter().sum::<f64>() / d as f64;
        let mean_dx = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d as f64;
        let out = dx.row_mut(r);
        for j in 0..d {
            out[j] = c.rstd[r] * (dxhat[j] - mean_d - xh[j] * mean_dx);
        }
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(u: f64) -> f64 {
    0.5 * u * (1.0 + (GELU_C * (u + 0.044715 * u * u * u)).tanh())
}

fn gelu_grad(u: f64) -> f64 {
    let th = (GELU_C * (u + 0.044715 * u * u * u)).tanh();
    0.5 * (1.0 + th) + 0.5 * u * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * 0.044715 * u * u)
}

fn add_bias(m: &mut Mat, b: &Mat) {
    for r in 0..m.rows {
        for (v, bb) in m.row_mut(r).iter_mut().zip(&b.data) {
            *v += bb;
        }
    }
}

fn add_row_sums(acc: &mut Mat, m: &Mat) {
    for r in 0..m.rows {
        for (a, v) in acc.data.iter_mut().zip(m.row(r)) {
            *a += v;
        }
    }
}

fn apply_mask(m: &mut Mat, mask: &Option<Vec<f64>>) {
    if let Some(k) = mask {
        m.data.iter_mut().zip(k).for_each(|(v, k)| *v *= k);
    }
}

impl TinyCausalLM {
    pub fn new(config: LmConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (d, f) = (config.dim, config.ff_dim);
        let std = 0.02;
        let proj_std = std / (2.0 * config.layers as f64).sqrt();
        let ones = |n| Mat::from_vec(1, n, vec![1.0; n]);
        let tok_emb = Mat::randn(config.vocab_size, d, std, &mut rng);
        let pos_emb = Mat::randn(config.context, d, std, &mut rng);
        let layers = (0..config.layers)
            .map(|_| LmLayer {
                ln1_g: ones(d),
                ln1_b: Mat::zeros(1, d),
                w_qkv: Mat::randn(d, 3 * d, std, &mut rng),
                w_o: Mat::randn(d, d, proj_std, &mut rng),
                ln2_g: ones(d),
                ln2_b: Mat::zeros(1, d),
                w_ff1: Mat::randn(d, f, std, &mut rng),
                b_ff1: Mat::zeros(1, f),
                w_ff2: Mat::randn(f, d, proj_std, &mut rng),
                b_ff2: Mat::zeros(1, d),
            })
            .collect();
        Ok(TinyCausalLM {
            params: LmParams {
                tok_emb,
                pos_emb,
                layers,
                lnf_g: ones(d),
                lnf_b: Mat::zeros(1, d),
            },
            config,
            forward_calls: CallCounter::default(),
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    pub fn check_input(&self, tokens: &[usize]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::invalid("language model input is empty"));
        }
        if tokens.len() > self.config.context {
            return Err(Error::ContextOverflow {
                len: tokens.len(),
                context: self.config.context,
            });
        }
        if let Some(&t) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::invalid(format!(
                "token {t} outside vocabulary of {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    pub(crate) fn forward_hidden<R: Rng>(
        &self,
        tokens: &[usize],
        mut dropout: Option<&mut R>,
    ) -> Result<LmCache> {
        self.check_input(tokens)?;
        self.forward_calls.bump();
        let cfg = &self.config;
        let (t_len, d) = (tokens.len(), cfg.dim);
        let dh = d / cfg.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut mask = |n: usize| match dropout.as_deref_mut() {
            Some(rng) if cfg.dropout > 0.0 => Some(dropout_mask(n, cfg.dropout, rng)),
            _ => None,
        };

        let mut x = self.params.tok_emb.gather_rows(tokens);
        for t in 0..t_len {
            for (v, p) in x.row_mut(t).iter_mut().zip(self.params.pos_emb.row(t)) {
                *v += p;
            }
        }
        let mask0 = mask(t_len * d);
        apply_mask(&mut x, &mask0);

        let mut layers = Vec::with_capacity(cfg.layers);
        for lp in &self.params.layers {
            let (a, ln1) = layer_norm(&x, &lp.ln1_g, &lp.ln1_b);
            let qkv = matmul(&a, &lp.w_qkv);
            let mut o = Mat::zeros(t_len, d);
            let mut probs = Vec::with_capacity(cfg.heads);
            for h in 0..cfg.heads {
                let mut s = Mat::zeros(t_len, t_len);
                gemm_view(
                    scale,
                    View::cols(&qkv, h * dh, dh),
                    false,
                    View::cols(&qkv, d + h * dh, dh),
                    true,
                    0.0,
                    ViewMut::full(&mut s),
                );
                for i in 0..t_len {
                    let row = s.row_mut(i);
                    softmax_in_place(&mut row[..=i]);
                    row[i + 1..].fill(0.0);
                }
                gemm_view(
                    1.0,
                    View::full(&s),
                    false,
                    View::cols(&qkv, 2 * d + h * dh, dh),
                    false,
                    0.0,
                    ViewMut::cols(&mut o, h * dh, dh),
                );
                probs.push(s);
            }
            let mut attn = matmul(&o, &lp.w_o);
            let mask1 = mask(t_len * d);
            apply_mask(&mut attn, &mask1);
            attn.add_assign(&x);
            let x1 = attn;

            let (b, ln2) = layer_norm(&x1, &lp.ln2_g, &lp.ln2_b);
            let mut u = matmul(&b, &lp.w_ff1);
            add_bias(&mut u, &lp.b_ff1);
            let gl = Mat::from_vec(u.rows, u.cols, u.data.iter().map(|&v| gelu(v)).collect());
            let mut m = matmul(&gl, &lp.w_ff2);
            add_bias(&mut m, &lp.b_ff2);
            let mask2 = mask(t_len * d);
            apply_mask(&mut m, &mask2);
            m.add_assign(&x1);
            x = m;
            layers.push(LayerCache {
                ln1,
                a,
                qkv,
                probs,
                o,
                mask1,
                ln2,
                b,
                u,
                gl,
                mask2,
            });
        }
        let (y, lnf) = layer_norm(&x, &self.params.lnf_g, &self.params.lnf_b);
        Ok(LmCache {
            tokens: tokens.to_vec(),
            mask0,
            layers,
            lnf,
            y,
        })
    }

    /// Head logits for selected positions.
    fn head(&self, y: &Mat, rows: &[usize]) -> Mat {
        let sel = y.gather_rows(rows);
        let mut out = Mat::zeros(rows.len(), self.config.vocab_size);
        gemm_view(
            1.0,
            View::full(&sel),
            false,
            View::full(&self.params.tok_emb),
            true,
            0.0,
            ViewMut::full(&mut out),
        );
        out
    }

    /// Logits at every position, `len x vocab`.
    pub fn lm_forward(&self, tokens: &[usize]) -> Result<Mat> {
        let c = self.forward_hidden(tokens, None::<&mut ChaCha8Rng>)?;
        let rows: Vec<usize> = (0..tokens.len()).collect();
        Ok(self.head(&c.y, &rows))
    }

    /// Logits for the token after `tokens`; one forward pass.
    pub fn next_token_logits(&self, tokens: &[usize]) -> Result<Vec<f64>> {
        let c = self.forward_hidden(tokens, None::<&mut ChaCha8Rng>)?;
        Ok(self.head(&c.y, &[tokens.len() - 1]).data)
    }

    /// Backpropagates `d_logits` (rows aligned with `rows`) into `grads`.
    pub(crate) fn backward(&self, c: &LmCache, rows: &[usize], d_logits: &Mat, grads: &mut LmParams) {
        let cfg = &self.config;
        let (t_len, d) = (c.tokens.len(), cfg.dim);
        let dh = d / cfg.heads;
        let scale = 1.0 / (dh as f64).sqrt();

        let sel = c.y.gather_rows(rows);
        add_matmul_tn(&mut grads.tok_emb, d_logits, &sel);
        let d_sel = matmul(d_logits, &self.params.tok_emb);
        let mut dy = Mat::zeros(t_len, d);
        for (k, &r) in rows.iter().enumerate() {
            for (a, b) in dy.row_mut(r).iter_mut().zip(d_sel.row(k)) {
                *a += b;
            }
        }
        let mut dx = layer_norm_backward(
            &dy,
            &c.lnf,
            &self.params.lnf_g,
            &mut grads.lnf_g,
            &mut grads.lnf_b,
        );

        for (l, lc) in c.layers.iter().enumerate().rev() {
            let lp = &self.params.layers[l];
            let g = &mut grads.layers[l];
            // feed-forward branch
            let mut dm = dx.clone();
            apply_mask(&mut dm, &lc.mask2);
            add_matmul_tn(&mut g.w_ff2, &lc.gl, &dm);
            add_row_sums(&mut g.b_ff2, &dm);
            let mut du = Mat::zeros(t_len, cfg.ff_dim);
            gemm_view(
                1.0,
                View::full(&dm),
                false,
                View::full(&lp.w_ff2),
                true,
                0.0,
                ViewMut::full(&mut du),
            );
            for (v, &u) in du.data.iter_mut().zip(&lc.u.data) {
                *v *= gelu_grad(u);
            }
            add_matmul_tn(&mut g.w_ff1, &lc.b, &du);
            add_row_sums(&mut g.b_ff1, &du);
            let mut db = Mat::zeros(t_len, d);
            gemm_view(
                1.0,
                View::full(&du),
                false,
                View::full(&lp.w_ff1),
                true,
                0.0,
                ViewMut::full(&mut db),
            );
            dx.add_assign(&layer_norm_backward(&db, &lc.ln2, &lp.ln2_g, &mut g.ln2_g, &mut g.ln2_b));

            // attention branch
            let mut dattn = dx.clone();
            apply_mask(&mut dattn, &lc.mask1);
            add_matmul_tn(&mut g.w_o, &lc.o, &dattn);
            let mut d_o = Mat::zeros(t_len, d);
            gemm_view(
                1.0,
                View::full(&dattn),
                false,
                View::full(&lp.w_o),
                true,
                0.0,
                ViewMut::full(&mut d_o),
            );
            let mut dqkv = Mat::zeros(t_len, 3 * d);
            for h in 0..cfg.heads {
                let p = &lc.probs[h];
                let mut ds = Mat::zeros(t_len, t_len);
                gemm_view(
                    1.0,
                    View::cols(&d_o, h * dh, dh),
                    false,
                    View::cols(&lc.qkv, 2 * d + h * dh, dh),
                    true,
                    0.0,
                    ViewMut::full(&mut ds),
                );
                gemm_view(
                    1.0,
                    View::full(p),
                    true,
                    View::cols(&d_o, h * dh, dh),
                    false,
                    0.0,
                    ViewMut::cols(&mut dqkv, 2 * d + h * dh, dh),
                );
                for i in 0..t_len {
                    let pr = p.row(i);
                    let dr = ds.row_mut(i);
                    let dot: f64 = (0..=i).map(|j| dr[j] * pr[j]).sum();
                    for j in 0..=i {
                        dr[j] = scale * pr[j] * (dr[j] - dot);
                    }
                    dr[i + 1..].fill(0.0);
                }
                gemm_view(
                    1.0,
                    View::full(&ds),
                    false,
                    View::cols(&lc.qkv, d + h * dh, dh),
                    false,
                    0.0,
                    ViewMut::cols(&mut dqkv, h * dh, dh),
                );
                gemm_view(
                    1.0,
                    View::full(&ds),
                    true,
                    View::cols(&lc.qkv, h * dh, dh),
                    false,
                    0.0,
                    ViewMut::cols(&mut dqkv, d + h * dh, dh),
                );
            }
            add_matmul_tn(&mut g.w_qkv, &lc.a, &dqkv);
            let mut da = Mat::zeros(t_len, d);
            gemm_view(
                1.0,
                View::full(&dqkv),
                false,
                View::full(&lp.w_qkv),
                true,
                0.0,
                ViewMut::full(&mut da),
            );
            dx.add_assign(&layer_norm_backward(&da, &lc.ln1, &lp.ln1_g, &mut g.ln1_g, &mut g.ln1_b));
        }

        apply_mask(&mut dx, &c.mask0);
        for (t, &tok) in c.tokens.iter().enumerate() {
            for (a, b) in grads.tok_emb.row_mut(tok).iter_mut().zip(dx.row(t)) {
                *a += b;
            }
            for (a, b) in grads.pos_emb.row_mut(t).iter_mut().zip(dx.row(t)) {
                *a += b;
            }
        }
    }

    /// Summed cross-entropy of the label tokens of one example. Logits at
    /// position `p - 1` predict token `p`. Gradients are accumulated into
    /// `grads` scaled by `weight`.
    pub fn example_loss_and_grad<R: Rng>(
        &self,
        tokens: &[usize],
        label_span: &[usize],
        dropout: Option<&mut R>,
        weight: f64,
        grads: &mut LmParams,
    ) -> Result<f64> {
        let (rows, targets) = label_rows(tokens, label_span)?;
        let input = &tokens[..rows.iter().max().copied().unwrap_or(0) + 1];
        let c = self.forward_hidden(input, dropout)?;
        let logits = self.head(&c.y, &rows);
        let (loss, mut d_logits) = label_loss(&logits, &targets);
        d_logits.data.iter_mut().for_each(|v| *v *= weight);
        self.backward(&c, &rows, &d_logits, grads);
        Ok(loss)
    }

    /// Loss of one example without gradients or dropout.
    pub fn example_loss(&self, tokens: &[usize], label_span: &[usize]) -> Result<f64> {
        let (rows, targets) = label_rows(tokens, label_span)?;
        let input = &tokens[..rows.iter().max().copied().unwrap_or(0) + 1];
        let c = self.forward_hidden(input, None::<&mut ChaCha8Rng>)?;
        Ok(label_loss(&self.head(&c.y, &rows), &targets).0)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            kind: "ranker-lm".into(),
            meta: serde_json::to_value(&self.config).expect("config serializes"),
            tensors: self
                .params
                .names()
                .into_iter()
                .zip(self.params.tensors().into_iter().cloned())
                .collect(),
        }
    }

    pub fn from_checkpoint(mut ck: Checkpoint) -> Result<Self> {
        ck.expect_kind("ranker-lm")?;
        let config: LmConfig = serde_json::from_value(ck.meta.clone())?;
        config.validate()?;
        let (d, f) = (config.dim, config.ff_dim);
        let tok_emb = ck.take("tok_emb", config.vocab_size, d)?;
        let pos_emb = ck.take("pos_emb", config.context, d)?;
        let mut layers = Vec::new();
        for i in 0..config.layers {
            let mut t = |name: &str, r, c| ck.take(&format!("layer{i}.{name}"), r, c);
            layers.push(LmLayer {
                ln1_g: t("ln1_g", 1, d)?,
                ln1_b: t("ln1_b", 1, d)?,
                w_qkv: t("w_qkv", d, 3 * d)?,
                w_o: t("w_o", d, d)?,
                ln2_g: t("ln2_g", 1, d)?,
                ln2_b: t("ln2_b", 1, d)?,
                w_ff1: t("w_ff1", d, f)?,
                b_ff1: t("b_ff1", 1, f)?,
                w_ff2: t("w_ff2", f, d)?,
                b_ff2: t("b_ff2", 1, d)?,
            });
        }
        let lnf_g = ck.take("lnf_g", 1, d)?;
        let lnf_b = ck.take("lnf_b", 1, d)?;
        Ok(TinyCausalLM {
            config,
            params: LmParams {
                tok_emb,
                pos_emb,
                layers,
                lnf_g,
                lnf_b,
            },
            forward_calls: CallCounter::default(),
        })
    }
}

fn label_rows(tokens: &[usize], label_span: &[usize]) -> Result<(Vec<usize>, Vec<usize>)> {
    if label_span.is_empty() {
        return Err(Error::invalid("training example has no label tokens"));
    }
    let mut rows = Vec::with_capacity(label_span.len());
    let mut targets = Vec::with_capacity(label_span.len());
    for &p in label_span {
        if p == 0 || p >= tokens.len() {
            return Err(Error::invalid(format!(
                "label position {p} outside 1..{}",
                tokens.len()
            )));
        }
        rows.push(p - 1);
        targets.push(tokens[p]);
    }
    Ok((rows, targets))
}

/// Summed cross-entropy over rows and its gradient.
fn label_loss(logits: &Mat, targets: &[usize]) -> (f64, Mat) {
    let mut grad = logits.clone();
    let mut loss = 0.0;
    for (r, &t) in targets.iter().enumerate() {
        let row = grad.row_mut(r);
        let lse = log_sum_exp(row);
        loss += lse - row[t];
        for x in row.iter_mut() {
            *x = (*x - lse).exp();
        }
        row[t] -= 1.0;
    }
    (loss, grad)
}

/// Label-masked loss over a full `len x vocab` logit matrix. Positions not
/// predicting a label token contribute nothing and receive zero gradient.
pub fn masked_label_loss(logits: &Mat, tokens: &[usize], label_span: &[usize]) -> Result<(f64, Mat)> {
    let (rows, targets) = label_rows(tokens, label_span)?;
    let mut grad = Mat::zeros(logits.rows, logits.cols);
    let (loss, g) = label_loss(&logits.gather_rows(&rows), &targets);
    for (k, &r) in rows.iter().enumerate() {
        grad.row_mut(r).copy_from_slice(g.row(k));
    }
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny(seed: u64) -> TinyCausalLM {
        TinyCausalLM::new(LmConfig {
            vocab_size: 11,
            layers: 2,
            dim: 8,
            heads: 2,
            ff_dim: 12,
            context: 16,
            dropout: 0.0,
            seed,
        })
        .unwrap()
    }

    #[test]
    fn output_shape_and_last_row() {
        let m = tiny(0);
        let toks = [1, 4, 2, 9, 3];
        let all = m.lm_forward(&toks).unwrap();
        assert_eq!((all.rows, all.cols), (5, 11));
        assert_eq!(m.next_token_logits(&toks).unwrap(), all.row(4).to_vec());
        assert_eq!(m.next_token_logits(&toks).unwrap(), m.next_token_logits(&toks).unwrap());
    }

    #[test]
    fn later_tokens_do_not_affect_earlier_logits() {
        let m = tiny(1);
        let a = m.lm_forward(&[1, 2, 3, 4, 5, 6]).unwrap();
        let b = m.lm_forward(&[1, 2, 3, 7, 5, 0]).unwrap();
        for r in 0..3 {
            assert_eq!(a.row(r), b.row(r));
        }
        assert_ne!(a.row(3), b.row(3));
    }

    #[test]
    fn input_validation() {
        let m = tiny(0);
        assert!(matches!(
            m.next_token_logits(&[1; 17]),
            Err(Error::ContextOverflow { len: 17, context: 16 })
        ));
        assert!(m.next_token_logits(&[]).is_err());
        assert!(m.next_token_logits(&[11]).is_err());
    }

    #[test]
    fn masked_loss_ignores_other_positions() {
        let m = tiny(2);
        let toks = [3, 4, 5, 6, 7, 1];
        let span = [4, 5];
        let logits = m.lm_forward(&toks).unwrap();
        let (loss, grad) = masked_label_loss(&logits, &toks, &span).unwrap();
        for r in 0..toks.len() {
            if r != 3 && r != 4 {
                assert!(grad.row(r).iter().all(|&v| v == 0.0));
            }
        }
        assert!((loss - m.example_loss(&toks, &span).unwrap()).abs() < 1e-12);
        // with the logits fixed, non-label targets are never read
        let mut other = toks;
        other[1] = 9;
        other[2] = 0;
        let (l2, g2) = masked_label_loss(&logits, &other, &span).unwrap();
        assert_eq!((l2, g2), (loss, grad));
        // tokens after the label do not enter the forward pass
        let mut tail = toks.to_vec();
        tail.push(8);
        assert_eq!(m.example_loss(&toks, &span).unwrap(), m.example_loss(&tail, &span).unwrap());
    }

    #[test]
    fn initial_label_loss_near_uniform() {
        let m = TinyCausalLM::new(LmConfig {
            context: 64,
            ..LmConfig::default()
        })
        .unwrap();
        let toks: Vec<usize> = (0..40).map(|i| 3 + (i * 7) % 90).collect();
        let per_token = m.example_loss(&toks, &[38, 39]).unwrap() / 2.0;
        let uniform = (m.vocab_size() as f64).ln();
        assert!((per_token - uniform).abs() / uniform < 0.1, "{per_token} vs {uniform}");
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let m = tiny(3);
        let mut buf = Vec::new();
        m.to_checkpoint().write(&mut buf).unwrap();
        let back = TinyCausalLM::from_checkpoint(Checkpoint::read(buf.as_slice()).unwrap()).unwrap();
        assert_eq!(back, m);
        let toks = [2, 5, 8];
        assert_eq!(
            back.next_token_logits(&toks).unwrap(),
            m.next_token_logits(&toks).unwrap()
        );
    }

    #[test]
    fn forward_counter() {
        let m = tiny(0);
        m.next_token_logits(&[1, 2]).unwrap();
        m.lm_forward(&[1, 2]).unwrap();
        assert_eq!(m.forward_calls.get(), 2);
        m.forward_calls.reset();
        assert_eq!(m.forward_calls.get(), 0);
    }
}
