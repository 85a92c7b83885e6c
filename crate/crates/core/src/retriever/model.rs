use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::tensor::{self, add_matmul_tn, dropout_mask, matmul, matmul_nt, sigmoid, Mat};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrieverConfig {
    pub num_items: usize,
    pub dim: usize,
    pub layers: usize,
    pub dropout: f64,
    /// Inputs longer than this keep only their most recent items.
    pub max_len: usize,
    pub seed: u64,
}

impl RetrieverConfig {
    pub fn new(num_items: usize) -> Self {
        RetrieverConfig {
            num_items,
            dim: 64,
            layers: 2,
            dropout: 0.1,
            max_len: 50,
            seed: 0,
        }
    }
}

/// Parameters of one recurrence layer:
/// `h_t = sigmoid(decay_logit) * h_{t-1} + gate * (w_in x_t)`,
/// `o_t = w_out h_t + x_t`.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub decay_logit: Mat,
    pub gate: Mat,
    pub w_in: Mat,
    pub w_out: Mat,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RetrieverParams {
    pub embeddings: Mat,
    pub layers: Vec<LayerParams>,
}

impl RetrieverParams {
    pub fn zeros_like(other: &RetrieverParams) -> Self {
        RetrieverParams {
            embeddings: Mat::zeros(other.embeddings.rows, other.embeddings.cols),
            layers: other
                .layers
                .iter()
                .map(|l| LayerParams {
                    decay_logit: Mat::zeros(1, l.decay_logit.cols),
                    gate: Mat::zeros(1, l.gate.cols),
                    w_in: Mat::zeros(l.w_in.rows, l.w_in.cols),
                    w_out: Mat::zeros(l.w_out.rows, l.w_out.cols),
                })
                .collect(),
        }
    }

    pub fn tensors(&self) -> Vec<&Mat> {
        let mut v = vec![&self.embeddings];
        for l in &self.layers {
            v.extend([&l.decay_logit, &l.gate, &l.w_in, &l.w_out]);
        }
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Mat> {
        let mut v = vec![&mut self.embeddings];
        for l in &mut self.layers {
            v.extend([&mut l.decay_logit, &mut l.gate, &mut l.w_in, &mut l.w_out]);
        }
        v
    }

    pub fn names(&self) -> Vec<String> {
        let mut v = vec!["embeddings".to_string()];
        for i in 0..self.layers.len() {
            for n in ["decay_logit", "gate", "w_in", "w_out"] {
                v.push(format!("layer{i}.{n}"));
            }
        }
        v
    }

    pub fn scale(&mut self, s: f64) {
        for t in self.tensors_mut() {
            t.data.iter_mut().for_each(|x| *x *= s);
        }
    }

    pub fn add_assign(&mut self, other: &RetrieverParams) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.add_assign(b);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }
}

/// Stage-one sequential recommender: item embeddings, a stack of diagonal
/// gated linear recurrences, and dot-product scoring against the same
/// embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct RetrieverModel {
    pub config: RetrieverConfig,
    pub params: RetrieverParams,
}

pub(crate) struct LayerCache {
    x: Mat,
    u: Mat,
    h: Mat,
    branch_mask: Option<Vec<f64>>,
}

pub(crate) struct ForwardCache {
    items: Vec<usize>,
    input_mask: Option<Vec<f64>>,
    layers: Vec<LayerCache>,
}

impl RetrieverModel {
    pub fn new(config: RetrieverConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = config.dim;
        let embeddings = Mat::randn(config.num_items, d, 1.0 / (d as f64).sqrt(), &mut rng);
        let layers = (0..config.layers)
            .map(|_| {
                // decays spread over [0.5, 0.99]; gate normalizes the
                // stationary state norm
                let decay: Vec<f64> = (0..d)
                    .map(|j| 0.5 + 0.49 * j as f64 / (d.max(2) - 1) as f64)
                    .collect();
                LayerParams {
                    decay_logit: Mat::from_vec(
                        1,
                        d,
                        decay.iter().map(|l| (l / (1.0 - l)).ln()).collect(),
                    ),
                    gate: Mat::from_vec(1, d, decay.iter().map(|l| (1.0 - l * l).sqrt()).collect()),
                    w_in: Mat::randn(d, d, 1.0 / (d as f64).sqrt(), &mut rng),
                    w_out: Mat::randn(d, d, 0.5 / (d as f64).sqrt(), &mut rng),
                }
            })
            .collect();
        RetrieverModel {
            config,
            params: RetrieverParams { embeddings, layers },
        }
    }

    pub fn num_items(&self) -> usize {
        self.config.num_items
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    /// Decay vector of a layer; always strictly inside (0, 1).
    pub fn decay(&self, layer: usize) -> Vec<f64> {
        self.params.layers[layer]
            .decay_logit
            .data
            .iter()
            .map(|&a| sigmoid(a))
            .collect()
    }

    fn truncate<'a>(&self, seq: &'a [usize]) -> &'a [usize] {
        let max = self.config.max_len.max(1);
        &seq[seq.len().saturating_sub(max)..]
    }

    /// Per-position features for `seq` (inference mode, no dropout). The
    /// input is truncated to the most recent `max_len` items.
    pub fn forward(&self, seq: &[usize]) -> Result<Mat> {
        let seq = self.truncate(seq);
        Ok(self.forward_cached(seq, None::<&mut ChaCha8Rng>)?.0)
    }

    pub(crate) fn forward_cached<R: Rng>(
        &self,
        seq: &[usize],
        mut dropout: Option<&mut R>,
    ) -> Result<(Mat, ForwardCache)> {
        if seq.is_empty() {
            return Err(Error::invalid("retriever input sequence is empty"));
        }
        for &i in seq {
            if i >= self.num_items() {
                return Err(Error::UnknownItem {
                    index: i,
                    catalog_size: self.num_items(),
                });
            }
        }
        let d = self.dim();
        let t_len = seq.len();
        let p = self.config.dropout;
        let mut x = self.params.embeddings.gather_rows(seq);
        let input_mask = match dropout.as_deref_mut() {
            Some(rng) if p > 0.0 => {
                let m = dropout_mask(t_len * d, p, rng);
                x.data.iter_mut().zip(&m).for_each(|(v, k)| *v *= k);
                Some(m)
            }
            _ => None,
        };
        let mut caches = Vec::with_capacity(self.params.layers.len());
        for layer in &self.params.layers {
            let lambda: Vec<f64> = layer.decay_logit.data.iter().map(|&a| sigmoid(a)).collect();
            let u = matmul_nt(&x, &layer.w_in);
            let mut h = Mat::zeros(t_len, d);
            for t in 0..t_len {
                for j in 0..d {
                    let prev = if t > 0 { h.data[(t - 1) * d + j] } else { 0.0 };
                    h.data[t * d + j] = lambda[j] * prev + layer.gate.data[j] * u.data[t * d + j];
                }
            }
            let mut branch = matmul_nt(&h, &layer.w_out);
            let branch_mask = match dropout.as_deref_mut() {
                Some(rng) if p > 0.0 => {
                    let m = dropout_mask(t_len * d, p, rng);
                    branch.data.iter_mut().zip(&m).for_each(|(v, k)| *v *= k);
                    Some(m)
                }
                _ => None,
            };
            let mut out = branch;
            out.add_assign(&x);
            caches.push(LayerCache {
                x,
                u,
                h,
                branch_mask,
            });
            x = out;
        }
        Ok((
            x,
            ForwardCache {
                items: seq.to_vec(),
                input_mask,
                layers: caches,
            },
        ))
    }

    /// Backpropagates `d_out` (gradient w.r.t. the final features) into
    /// `grads`.
    pub(crate) fn backward(&self, cache: &ForwardCache, d_out: Mat, grads: &mut RetrieverParams) {
        let d = self.dim();
        let mut dx = d_out;
        for (li, layer) in self.params.layers.iter().enumerate().rev() {
            let c = &cache.layers[li];
            let g = &mut grads.layers[li];
            let t_len = c.x.rows;
            let lambda: Vec<f64> = layer.decay_logit.data.iter().map(|&a| sigmoid(a)).collect();
            // residual passes dx through unchanged; branch gets masked copy
            let mut d_branch = dx.clone();
            if let Some(m) = &c.branch_mask {
                d_branch.data.iter_mut().zip(m).for_each(|(v, k)| *v *= k);
            }
            add_matmul_tn(&mut g.w_out, &d_branch, &c.h);
            let mut dh = matmul(&d_branch, &layer.w_out);
            // reverse scan: dh_t += lambda * dh_{t+1}
            for t in (0..t_len).rev() {
                for j in 0..d {
                    if t + 1 < t_len {
                        let carry = lambda[j] * dh.data[(t + 1) * d + j];
                        dh.data[t * d + j] += carry;
                    }
                }
            }
            let mut du = Mat::zeros(t_len, d);
            for t in 0..t_len {
                for j in 0..d {
                    let dht = dh.data[t * d + j];
                    let prev = if t > 0 { c.h.data[(t - 1) * d + j] } else { 0.0 };
                    g.decay_logit.data[j] += dht * prev * lambda[j] * (1.0 - lambda[j]);
                    g.gate.data[j] += dht * c.u.data[t * d + j];
                    du.data[t * d + j] = dht * layer.gate.data[j];
                }
            }
            add_matmul_tn(&mut g.w_in, &du, &c.x);
            let dx_branch = matmul(&du, &layer.w_in);
            dx.add_assign(&dx_branch);
        }
        if let Some(m) = &cache.input_mask {
            dx.data.iter_mut().zip(m).for_each(|(v, k)| *v *= k);
        }
        for (t, &item) in cache.items.iter().enumerate() {
            let row = grads.embeddings.row_mut(item);
            for (r, v) in row.iter_mut().zip(dx.row(t)) {
                *r += v;
            }
        }
    }

    /// Scores every catalog item against one feature vector: `E_i . feature`.
    pub fn score_all_items(&self, feature: &[f64]) -> Vec<f64> {
        assert_eq!(feature.len(), self.dim(), "feature width must match embeddings");
        (0..self.num_items())
            .map(|i| tensor::dot(self.params.embeddings.row(i), feature))
            .collect()
    }

    /// Scores of all items for the next position after `seq`.
    pub fn score_sequence(&self, seq: &[usize]) -> Result<Vec<f64>> {
        let out = self.forward(seq)?;
        Ok(self.score_all_items(out.row(out.rows - 1)))
    }

    /// Mean next-item cross-entropy over all positions of `windows` and its
    /// gradient. Each window predicts `w[1..]` from `w[..len-1]`.
    pub fn loss_and_grad<R: Rng>(
        &self,
        windows: &[&[usize]],
        mut dropout: Option<&mut R>,
    ) -> Result<(f64, RetrieverParams)> {
        let total: usize = windows.iter().map(|w| w.len().saturating_sub(1)).sum();
        let mut grads = RetrieverParams::zeros_like(&self.params);
        if total == 0 {
            return Ok((0.0, grads));
        }
        let mut loss = 0.0;
        for w in windows {
            if w.len() < 2 {
                continue;
            }
            let (inputs, targets) = (&w[..w.len() - 1], &w[1..]);
            let (out, cache) = self.forward_cached(inputs, dropout.as_deref_mut())?;
            let (l, d_out) = self.output_loss(&out, targets, total, &mut grads);
            loss += l;
            self.backward(&cache, d_out, &mut grads);
        }
        Ok((loss, grads))
    }

    /// Cross-entropy of the full-vocabulary scores, scaled by `1/total`.
    /// Accumulates the embedding gradient of the output side and returns
    /// the gradient w.r.t. `out`.
    fn output_loss(
        &self,
        out: &Mat,
        targets: &[usize],
        total: usize,
        grads: &mut RetrieverParams,
    ) -> (f64, Mat) {
        let logits = matmul_nt(out, &self.params.embeddings);
        let (mean_loss, mut dlogits) = tensor::softmax_cross_entropy(&logits, targets);
        let scale = targets.len() as f64 / total as f64;
        dlogits.data.iter_mut().for_each(|v| *v *= scale);
        add_matmul_tn(&mut grads.embeddings, &dlogits, out);
        let d_out = matmul(&dlogits, &self.params.embeddings);
        (mean_loss * scale, d_out)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            kind: "retriever".into(),
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
        ck.expect_kind("retriever")?;
        let config: RetrieverConfig = serde_json::from_value(ck.meta.clone())?;
        let d = config.dim;
        let embeddings = ck.take("embeddings", config.num_items, d)?;
        let layers = (0..config.layers)
            .map(|i| {
                Ok(LayerParams {
                    decay_logit: ck.take(&format!("layer{i}.decay_logit"), 1, d)?,
                    gate: ck.take(&format!("layer{i}.gate"), 1, d)?,
                    w_in: ck.take(&format!("layer{i}.w_in"), d, d)?,
                    w_out: ck.take(&format!("layer{i}.w_out"), d, d)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(RetrieverModel {
            config,
            params: RetrieverParams { embeddings, layers },
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(num_items: usize, dim: usize, layers: usize, seed: u64) -> RetrieverModel {
        RetrieverModel::new(RetrieverConfig {
            num_items,
            dim,
            layers,
            dropout: 0.0,
            max_len: 50,
            seed,
        })
    }

    #[test]
    fn zero_decay_makes_outputs_depend_on_current_item_only() {
        let mut m = tiny(4, 3, 2, 1);
        for l in &mut m.params.layers {
            // sigmoid(-inf) = 0
            l.decay_logit.fill(f64::NEG_INFINITY);
        }
        let out = m.forward(&[2, 1, 2, 3, 2]).unwrap();
        assert_eq!(out.row(0), out.row(2));
        assert_eq!(out.row(0), out.row(4));
        assert_ne!(out.row(0), out.row(1));
    }

    /// Hand-unrolled single layer, d = 2.
    #[test]
    fn matches_hand_unrolled_recurrence() {
        let mut m = tiny(3, 2, 1, 0);
        m.params.embeddings = Mat::from_vec(3, 2, vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        let l = &mut m.params.layers[0];
        let (l0, l1) = (0.5f64, 0.25f64);
        l.decay_logit = Mat::from_vec(1, 2, vec![(l0 / (1.0 - l0)).ln(), (l1 / (1.0 - l1)).ln()]);
        l.gate = Mat::from_vec(1, 2, vec![2.0, 1.0]);
        l.w_in = Mat::from_vec(2, 2, vec![1.0, 2.0, 0.0, 1.0]);
        l.w_out = Mat::from_vec(2, 2, vec![1.0, 0.0, 1.0, -1.0]);
        let out = m.forward(&[0, 1, 2]).unwrap();

        // e = [1,0],[0,1],[1,1]; u = W_in e = [1,0],[2,1],[3,1]
        // h1 = g*u1 = [2,0]
        // h2 = [0.5*2 + 2*2, 0.25*0 + 1] = [5, 1]
        // h3 = [0.5*5 + 2*3, 0.25*1 + 1] = [8.5, 1.25]
        // o = W_out h + e
        let expect = [
            [2.0 + 1.0, 2.0 - 0.0 + 0.0],
            [5.0 + 0.0, 5.0 - 1.0 + 1.0],
            [8.5 + 1.0, 8.5 - 1.25 + 1.0],
        ];
        for t in 0..3 {
            for j in 0..2 {
                assert!((out.get(t, j) - expect[t][j]).abs() < 1e-12, "t={t} j={j}");
            }
        }
    }

    #[test]
    fn outputs_are_causal() {
        let m = tiny(10, 4, 2, 3);
        let a = m.forward(&[1, 2, 3, 4, 5]).unwrap();
        let b = m.forward(&[1, 2, 3, 9, 0]).unwrap();
        for t in 0..3 {
            assert_eq!(a.row(t), b.row(t));
        }
        assert_ne!(a.row(3), b.row(3));
    }

    #[test]
    fn unknown_item_is_an_error() {
        let m = tiny(5, 2, 1, 0);
        assert!(matches!(m.forward(&[0, 5]), Err(Error::UnknownItem { index: 5, .. })));
        assert!(m.forward(&[]).is_err());
    }

    #[test]
    fn scores_are_embedding_dot_products() {
        let mut m = tiny(3, 3, 1, 0);
        m.params.embeddings = Mat::from_vec(3, 3, vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]);
        assert_eq!(m.score_all_items(&[0.0, 1.0, 0.0]), vec![0.0, 1.0, 0.0]);

        let m = tiny(7, 4, 1, 9);
        let f = [0.3, -1.0, 2.0, 0.5];
        let s = m.score_all_items(&f);
        for i in 0..7 {
            let mut e = 0.0;
            for j in 0..4 {
                e += m.params.embeddings.get(i, j) * f[j];
            }
            assert!((s[i] - e).abs() < 1e-12);
        }
        let scaled: Vec<f64> = f.iter().map(|x| x * 3.0).collect();
        let s3 = m.score_all_items(&scaled);
        for i in 0..7 {
            assert!((s3[i] - 3.0 * s[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn long_inputs_stay_bounded() {
        let m = tiny(20, 8, 2, 5);
        let mut m = m;
        m.config.max_len = 10_000;
        let seq: Vec<usize> = (0..10_000).map(|i| (i * 7) % 20).collect();
        let out = m.forward(&seq).unwrap();
        assert!(out.is_finite());
        let max_e: f64 = (0..20)
            .map(|i| m.params.embeddings.row(i).iter().map(|x| x * x).sum::<f64>().sqrt())
            .fold(0.0, f64::max);
        // geometric-series bound for each layer's state norm
        let mut bound_in = max_e;
        for (li, l) in m.params.layers.iter().enumerate() {
            let lam_max = m.decay(li).into_iter().fold(0.0, f64::max);
            let g_max = l.gate.data.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
            let w_in: f64 = l.w_in.data.iter().map(|x| x * x).sum::<f64>().sqrt();
            let w_out: f64 = l.w_out.data.iter().map(|x| x * x).sum::<f64>().sqrt();
            let h_bound = g_max * w_in * bound_in / (1.0 - lam_max);
            bound_in = w_out * h_bound + bound_in;
        }
        for t in 0..out.rows {
            let n: f64 = out.row(t).iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!(n <= bound_in, "norm {n} exceeds bound {bound_in}");
        }
    }

    #[test]
    fn checkpoint_roundtrip() {
        let m = tiny(6, 4, 2, 11);
        let mut buf = Vec::new();
        m.to_checkpoint().write(&mut buf).unwrap();
        let back = RetrieverModel::from_checkpoint(Checkpoint::read(buf.as_slice()).unwrap()).unwrap();
        assert_eq!(back, m);
    }
}
