//! One-layer ReLU transformer for addition modulo P. Input is the fixed
//! three-token sequence [a, b, =]; logits are read at the "=" position.

use super::{init_rng, kaiming_fill, ForwardCapture};
use crate::error::{GrokError, Result};
use crate::tensor::{NodeId, Tape, Tensor};
use serde::{Deserialize, Serialize};

pub const SEQ_LEN: usize = 3;

/// Which activation is captured as the "first layer" feature.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CapturePoint {
    Embedding,
    #[default]
    PostAttention,
    PostBlock,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransformerConfig {
    /// Modulus; also the number of output classes. Vocabulary is p + 1,
    /// token id p is "=".
    pub p: usize,
    pub d_model: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub hidden: usize,
    /// Per-row standardization before attention and MLP. Off by default:
    /// the reference architecture has no normalization layers.
    #[serde(default)]
    pub layer_norm: bool,
    #[serde(default)]
    pub capture: CapturePoint,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        TransformerConfig {
            p: 113,
            d_model: 128,
            heads: 4,
            head_dim: 32,
            hidden: 512,
            layer_norm: false,
            capture: CapturePoint::default(),
        }
    }
}

impl TransformerConfig {
    pub fn tiny(p: usize, d_model: usize, heads: usize, hidden: usize) -> Self {
        TransformerConfig {
            p,
            d_model,
            heads,
            head_dim: d_model / heads,
            hidden,
            layer_norm: false,
            capture: CapturePoint::default(),
        }
    }

    pub fn vocab(&self) -> usize {
        self.p + 1
    }

    pub fn eq_token(&self) -> usize {
        self.p
    }
}

#[derive(Debug, Clone)]
pub struct TransformerModel {
    pub cfg: TransformerConfig,
    pub tok_embed: Tensor,
    pub pos_embed: Tensor,
    /// Per head: (wq, wk, wv) of d×head_dim and wo of head_dim×d.
    pub heads: Vec<HeadWeights>,
    pub mlp_w_in: Tensor,
    pub mlp_b_in: Tensor,
    pub mlp_w_out: Tensor,
    pub mlp_b_out: Tensor,
    pub unembed: Tensor,
    pub init_scale: f64,
}

#[derive(Debug, Clone)]
pub struct HeadWeights {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
}

impl TransformerModel {
    pub fn init(cfg: &TransformerConfig, seed: u64, init_scale: f64) -> Self {
        let mut rng = init_rng(seed);
        let d = cfg.d_model;
        let hd = cfg.head_dim;
        // Embeddings are not affine layers; they are filled with the same
        // uniform rule using the model dimension as fan-in.
        let mut tok_embed = Tensor::zeros(vec![cfg.vocab(), d]);
        kaiming_fill(&mut rng, &mut tok_embed, d, init_scale);
        let mut pos_embed = Tensor::zeros(vec![SEQ_LEN, d]);
        kaiming_fill(&mut rng, &mut pos_embed, d, init_scale);
        let mut heads = Vec::with_capacity(cfg.heads);
        for _ in 0..cfg.heads {
            let mut wq = Tensor::zeros(vec![d, hd]);
            let mut wk = Tensor::zeros(vec![d, hd]);
            let mut wv = Tensor::zeros(vec![d, hd]);
            let mut wo = Tensor::zeros(vec![hd, d]);
            kaiming_fill(&mut rng, &mut wq, d, init_scale);
            kaiming_fill(&mut rng, &mut wk, d, init_scale);
            kaiming_fill(&mut rng, &mut wv, d, init_scale);
            kaiming_fill(&mut rng, &mut wo, hd, init_scale);
            heads.push(HeadWeights { wq, wk, wv, wo });
        }
        let mut mlp_w_in = Tensor::zeros(vec![d, cfg.hidden]);
        kaiming_fill(&mut rng, &mut mlp_w_in, d, init_scale);
        let mlp_b_in = Tensor::zeros(vec![cfg.hidden]);
        let mut mlp_w_out = Tensor::zeros(vec![cfg.hidden, d]);
        kaiming_fill(&mut rng, &mut mlp_w_out, cfg.hidden, init_scale);
        let mlp_b_out = Tensor::zeros(vec![d]);
        let mut unembed = Tensor::zeros(vec![d, cfg.p]);
        kaiming_fill(&mut rng, &mut unembed, d, init_scale);
        TransformerModel {
            cfg: *cfg,
            tok_embed,
            pos_embed,
            heads,
            mlp_w_in,
            mlp_b_in,
            mlp_w_out,
            mlp_b_out,
            unembed,
            init_scale,
        }
    }

    pub fn params(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("tf.tok_embed".into(), &self.tok_embed),
            ("tf.pos_embed".into(), &self.pos_embed),
        ];
        for (h, hw) in self.heads.iter().enumerate() {
            out.push((format!("tf.h{h}.wq"), &hw.wq));
            out.push((format!("tf.h{h}.wk"), &hw.wk));
            out.push((format!("tf.h{h}.wv"), &hw.wv));
            out.push((format!("tf.h{h}.wo"), &hw.wo));
        }
        out.push(("tf.mlp.w_in".into(), &self.mlp_w_in));
        out.push(("tf.mlp.b_in".into(), &self.mlp_b_in));
        out.push(("tf.mlp.w_out".into(), &self.mlp_w_out));
        out.push(("tf.mlp.b_out".into(), &self.mlp_b_out));
        out.push(("tf.unembed".into(), &self.unembed));
        out
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = vec![
            ("tf.tok_embed".into(), &mut self.tok_embed),
            ("tf.pos_embed".into(), &mut self.pos_embed),
        ];
        for (h, hw) in self.heads.iter_mut().enumerate() {
            out.push((format!("tf.h{h}.wq"), &mut hw.wq));
            out.push((format!("tf.h{h}.wk"), &mut hw.wk));
            out.push((format!("tf.h{h}.wv"), &mut hw.wv));
            out.push((format!("tf.h{h}.wo"), &mut hw.wo));
        }
        out.push(("tf.mlp.w_in".into(), &mut self.mlp_w_in));
        out.push(("tf.mlp.b_in".into(), &mut self.mlp_b_in));
        out.push(("tf.mlp.w_out".into(), &mut self.mlp_w_out));
        out.push(("tf.mlp.b_out".into(), &mut self.mlp_b_out));
        out.push(("tf.unembed".into(), &mut self.unembed));
        out
    }
}

pub struct TransformerOut {
    pub logits: NodeId,
    pub first_layer: NodeId,
}

/// Indices into the canonical bound-parameter list.
struct Slots {
    tok: usize,
    pos: usize,
    head0: usize,
    mlp_w_in: usize,
}

fn slots(n_heads: usize) -> Slots {
    Slots {
        tok: 0,
        pos: 1,
        head0: 2,
        mlp_w_in: 2 + 4 * n_heads,
    }
}

/// Forward pass for a batch of (a, b) pairs, bound parameters in canonical
/// order. `embed_noise`, when given, must be a (3B)×d node; it is added to
/// the residual stream right after the token + positional embedding sum.
pub fn transformer_forward(
    tape: &mut Tape,
    model: &TransformerModel,
    bound: &[NodeId],
    pairs: &[(usize, usize)],
    embed_noise: Option<NodeId>,
) -> Result<TransformerOut> {
    let cfg = &model.cfg;
    let b = pairs.len();
    let d = cfg.d_model;
    let s = slots(cfg.heads);

    let mut token_ids = Vec::with_capacity(b * SEQ_LEN);
    for &(x, y) in pairs {
        if x >= cfg.p || y >= cfg.p {
            return Err(GrokError::TokenOutOfRange {
                token: x.max(y),
                modulus: cfg.p,
            });
        }
        token_ids.extend_from_slice(&[x, y, cfg.eq_token()]);
    }

    let tok = tape.gather_rows(bound[s.tok], &token_ids)?;
    let pos_idx: Vec<usize> = (0..b * SEQ_LEN).map(|i| i % SEQ_LEN).collect();
    let pos = tape.gather_rows(bound[s.pos], &pos_idx)?;
    let mut resid = tape.add(tok, pos)?;
    if let Some(noise) = embed_noise {
        let (nr, nc) = tape.shape(noise);
        if (nr, nc) != (b * SEQ_LEN, d) {
            return Err(GrokError::ShapeMismatch {
                op: "transformer_forward noise",
                left: vec![nr, nc],
                right: vec![b * SEQ_LEN, d],
            });
        }
        resid = tape.add(resid, noise)?;
    }

    let attn_in = if cfg.layer_norm {
        tape.layer_norm_rows(resid)?
    } else {
        resid
    };

    // Attention: 4 heads of scaled dot-product over the 3 positions, no
    // causal mask (fixed-format input; the answer position attends freely).
    let scale = 1.0 / (cfg.head_dim as f64).sqrt();
    let mut attn_total: Option<NodeId> = None;
    for h in 0..cfg.heads {
        let base = s.head0 + 4 * h;
        let q = tape.matmul(attn_in, bound[base])?;
        let k = tape.matmul(attn_in, bound[base + 1])?;
        let v = tape.matmul(attn_in, bound[base + 2])?;
        let mut per_example = Vec::with_capacity(b);
        for e in 0..b {
            let qe = tape.slice_rows(q, e * SEQ_LEN, SEQ_LEN)?;
            let ke = tape.slice_rows(k, e * SEQ_LEN, SEQ_LEN)?;
            let ve = tape.slice_rows(v, e * SEQ_LEN, SEQ_LEN)?;
            let scores = tape.matmul_bt(qe, ke)?;
            let scores = tape.scale(scores, scale)?;
            let weights = tape.softmax_rows(scores)?;
            per_example.push(tape.matmul(weights, ve)?);
        }
        let head_seq = tape.concat_rows(&per_example)?;
        let head_out = tape.matmul(head_seq, bound[base + 3])?;
        attn_total = Some(match attn_total {
            Some(acc) => tape.add(acc, head_out)?,
            None => head_out,
        });
    }
    let resid2 = tape.add(resid, attn_total.expect("at least one head"))?;

    let mlp_in = if cfg.layer_norm {
        tape.layer_norm_rows(resid2)?
    } else {
        resid2
    };
    let pre = tape.matmul(mlp_in, bound[s.mlp_w_in])?;
    let pre = tape.add_row(pre, bound[s.mlp_w_in + 1])?;
    let hid = tape.relu(pre)?;
    let post = tape.matmul(hid, bound[s.mlp_w_in + 2])?;
    let post = tape.add_row(post, bound[s.mlp_w_in + 3])?;
    let resid3 = tape.add(resid2, post)?;

    let eq_rows: Vec<usize> = (0..b).map(|e| e * SEQ_LEN + 2).collect();
    let final_eq = tape.gather_rows(resid3, &eq_rows)?;
    let logits = tape.matmul(final_eq, bound[s.mlp_w_in + 4])?;

    let first_layer = match cfg.capture {
        CapturePoint::Embedding => tape.gather_rows(resid, &eq_rows)?,
        CapturePoint::PostAttention => tape.gather_rows(resid2, &eq_rows)?,
        CapturePoint::PostBlock => final_eq,
    };

    Ok(TransformerOut {
        logits,
        first_layer,
    })
}

impl TransformerModel {
    /// Forward pass from plain data; returns logits and the capture.
    pub fn run(
        &self,
        pairs: &[(usize, usize)],
        embed_noise: Option<&Tensor>,
    ) -> Result<(Tensor, ForwardCapture)> {
        let mut tape = Tape::new();
        let bound = self
            .params()
            .iter()
            .map(|(_, t)| tape.leaf(t, false))
            .collect::<Result<Vec<_>>>()?;
        let noise = match embed_noise {
            Some(n) => Some(tape.leaf(n, false)?),
            None => None,
        };
        let out = transformer_forward(&mut tape, self, &bound, pairs, noise)?;
        let (lr, lc) = tape.shape(out.logits);
        let (fr, fc) = tape.shape(out.first_layer);
        let logits = Tensor::new(vec![lr, lc], tape.value(out.logits).to_vec())?;
        let first = Tensor::new(vec![fr, fc], tape.value(out.first_layer).to_vec())?;
        Ok((
            logits.clone(),
            ForwardCapture {
                first_layer: first,
                output: logits,
            },
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_parameters_give_zero_logits() {
        let cfg = TransformerConfig::default();
        let m = TransformerModel::init(&cfg, 1, 0.0);
        let (logits, _) = m.run(&[(3, 7), (0, 112)], None).unwrap();
        assert!(logits.data().iter().all(|&v| v == 0.0));
        // Uniform logits: cross-entropy is ln 113.
        let ce = (113f64).ln();
        assert!((ce - 4.727_4).abs() < 1e-4);
    }

    #[test]
    fn zero_noise_equals_no_noise() {
        let cfg = TransformerConfig::tiny(11, 8, 2, 16);
        let m = TransformerModel::init(&cfg, 4, 1.0);
        let pairs = [(1, 2), (10, 3)];
        let zero = Tensor::zeros(vec![pairs.len() * SEQ_LEN, cfg.d_model]);
        let (a, _) = m.run(&pairs, None).unwrap();
        let (b, _) = m.run(&pairs, Some(&zero)).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn token_out_of_range_is_an_error() {
        let cfg = TransformerConfig::tiny(11, 8, 2, 16);
        let m = TransformerModel::init(&cfg, 4, 1.0);
        assert!(matches!(
            m.run(&[(11, 0)], None),
            Err(GrokError::TokenOutOfRange { token: 11, .. })
        ));
    }

    #[test]
    fn capture_shapes_match_contract() {
        let cfg = TransformerConfig::default();
        let m = TransformerModel::init(&cfg, 2, 0.5);
        let (logits, cap) = m.run(&[(5, 9), (1, 1), (0, 0)], None).unwrap();
        assert_eq!(logits.shape(), &[3, 113]);
        assert_eq!(cap.first_layer.shape(), &[3, 128]);
        assert_eq!(cap.output.shape(), &[3, 113]);
    }

    #[test]
    fn batch_permutation_permutes_outputs() {
        let cfg = TransformerConfig::tiny(13, 8, 2, 16);
        let m = TransformerModel::init(&cfg, 8, 1.0);
        let pairs = [(1, 2), (5, 7), (12, 0)];
        let perm = [(5, 7), (12, 0), (1, 2)];
        let (a, _) = m.run(&pairs, None).unwrap();
        let (b, _) = m.run(&perm, None).unwrap();
        let p = cfg.p;
        assert_eq!(&a.data()[0..p], &b.data()[2 * p..3 * p]);
        assert_eq!(&a.data()[p..2 * p], &b.data()[0..p]);
        assert_eq!(&a.data()[2 * p..3 * p], &b.data()[p..2 * p]);
    }

    #[test]
    fn noise_equals_preshifted_embeddings() {
        // Adding Δ as embed_noise must equal shifting the token+positional
        // embedding sum by Δ, so verify by shifting the embeddings of a
        // single-pair batch directly.
        let cfg = TransformerConfig::tiny(7, 8, 2, 16);
        let mut m = TransformerModel::init(&cfg, 3, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pair = [(2usize, 4usize)];
        let delta: Vec<f64> = (0..SEQ_LEN * cfg.d_model)
            .map(|_| rng.gen_range(-0.1..0.1))
            .collect();
        let noise = Tensor::new(vec![SEQ_LEN, cfg.d_model], delta.clone()).unwrap();
        let (with_noise, _) = m.run(&pair, Some(&noise)).unwrap();

        // Shift the positional embedding by Δ per position: the tokens
        // 2, 4, "=" appear once each, so shifting pos_embed rows is the
        // same additive change to the residual stream.
        {
            let d = cfg.d_model;
            let pe = m.pos_embed.data_mut();
            for pos in 0..SEQ_LEN {
                for j in 0..d {
                    pe[pos * d + j] += delta[pos * d + j];
                }
            }
        }
        let (shifted, _) = m.run(&pair, None).unwrap();
        for (x, y) in with_noise.data().iter().zip(shifted.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn matches_brute_force_attention_oracle() {
        // Tiny config, independent straight-line recomputation.
        let cfg = TransformerConfig::tiny(5, 4, 1, 8);
        let m = TransformerModel::init(&cfg, 6, 1.0);
        let pairs = [(1usize, 3usize), (4, 2)];
        let (logits, _) = m.run(&pairs, None).unwrap();

        let d = cfg.d_model;
        let hd = cfg.head_dim;
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        for (e, &(a, b)) in pairs.iter().enumerate() {
            let toks = [a, b, cfg.eq_token()];
            // residual = tok + pos embed
            let mut resid: Vec<Vec<f64>> = (0..SEQ_LEN)
                .map(|t| {
                    (0..d)
                        .map(|j| {
                            m.tok_embed.data()[toks[t] * d + j] + m.pos_embed.data()[t * d + j]
                        })
                        .collect()
                })
                .collect();
            let hw = &m.heads[0];
            let proj = |x: &[f64], w: &Tensor, dout: usize| -> Vec<f64> {
                (0..dout)
                    .map(|o| (0..d).map(|k| x[k] * w.data()[k * dout + o]).sum())
                    .collect()
            };
            let q: Vec<Vec<f64>> = resid.iter().map(|r| proj(r, &hw.wq, hd)).collect();
            let k: Vec<Vec<f64>> = resid.iter().map(|r| proj(r, &hw.wk, hd)).collect();
            let v: Vec<Vec<f64>> = resid.iter().map(|r| proj(r, &hw.wv, hd)).collect();
            let scale = 1.0 / (hd as f64).sqrt();
            let mut attn_out = vec![vec![0.0; d]; SEQ_LEN];
            for t in 0..SEQ_LEN {
                let scores: Vec<f64> = (0..SEQ_LEN).map(|u| dot(&q[t], &k[u]) * scale).collect();
                let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
                let z: f64 = exps.iter().sum();
                let mut head = vec![0.0; hd];
                for u in 0..SEQ_LEN {
                    for c in 0..hd {
                        head[c] += exps[u] / z * v[u][c];
                    }
                }
                for j in 0..d {
                    attn_out[t][j] = (0..hd).map(|c| head[c] * hw.wo.data()[c * d + j]).sum();
                }
            }
            for t in 0..SEQ_LEN {
                for j in 0..d {
                    resid[t][j] += attn_out[t][j];
                }
            }
            // MLP
            for t in 0..SEQ_LEN {
                let mut hidv = vec![0.0; cfg.hidden];
                for o in 0..cfg.hidden {
                    let mut acc = m.mlp_b_in.data()[o];
                    for kidx in 0..d {
                        acc += resid[t][kidx] * m.mlp_w_in.data()[kidx * cfg.hidden + o];
                    }
                    hidv[o] = acc.max(0.0);
                }
                let mut out = vec![0.0; d];
                for j in 0..d {
                    let mut acc = m.mlp_b_out.data()[j];
                    for o in 0..cfg.hidden {
                        acc += hidv[o] * m.mlp_w_out.data()[o * d + j];
                    }
                    out[j] = acc;
                }
                for j in 0..d {
                    resid[t][j] += out[j];
                }
            }
            for c in 0..cfg.p {
                let want: f64 = (0..d)
                    .map(|j| resid[2][j] * m.unembed.data()[j * cfg.p + c])
                    .sum();
                let got = logits.data()[e * cfg.p + c];
                assert!(
                    (want - got).abs() < 1e-10,
                    "example {e} class {c}: {got} vs {want}"
                );
            }
        }
    }
}
