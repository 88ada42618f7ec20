//! Spectral-token transformer: patch embedding, mask-token substitution,
//! pre-norm encoder, linear reconstruction decoder and a classification head.
//!
//! Weights use the `out×in` convention; a linear layer computes `x·Wᵀ`.

pub mod checkpoint;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masking::SpatialMask;
use crate::rng::{self, StreamRng};
use crate::tensor::{Graph, Tensor, Var};

const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum PositionalKind {
    /// Trained table initialized from N(0, 0.02²).
    #[default]
    Learned,
    /// Fixed sine/cosine table, excluded from optimization.
    Sinusoidal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Spatial window side `S`; the sequence has `S²` tokens.
    pub patch_size: usize,
    pub bands: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub classes: usize,
    pub mlp_ratio: usize,
    pub dropout: f64,
    pub positional: PositionalKind,
    pub norm_eps: f64,
}

impl ModelConfig {
    /// Five blocks, four heads, width 64, 7×7 window.
    pub fn standard(bands: usize, classes: usize) -> Self {
        ModelConfig {
            patch_size: 7,
            bands,
            embed_dim: 64,
            depth: 5,
            heads: 4,
            classes,
            mlp_ratio: 4,
            dropout: 0.1,
            positional: PositionalKind::Learned,
            norm_eps: 1e-5,
        }
    }

    pub fn tokens(&self) -> usize {
        self.patch_size * self.patch_size
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.patch_size == 0 || self.patch_size.is_multiple_of(2) {
            return fail(format!("patch size must be odd, got {}", self.patch_size));
        }
        if self.bands < 2 {
            return fail(format!("need at least 2 bands, got {}", self.bands));
        }
        if self.heads == 0 || self.embed_dim == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return fail(format!(
                "embedding size {} must be a positive multiple of the head count {}",
                self.embed_dim, self.heads
            ));
        }
        if self.classes < 2 {
            return fail(format!("need at least 2 classes, got {}", self.classes));
        }
        if self.mlp_ratio == 0 {
            return fail("mlp ratio must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        if self.norm_eps <= 0.0 {
            return fail("norm eps must be positive".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams {
    pub norm1_gain: Tensor,
    pub norm1_bias: Tensor,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub norm2_gain: Tensor,
    pub norm2_bias: Tensor,
    /// `(ratio·d)×d`
    pub mlp1: Tensor,
    /// `d×(ratio·d)`
    pub mlp2: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    /// `d×B`
    pub embed: Tensor,
    /// `(N+1)×d`; row 0 belongs to the cls slot.
    pub pos: Tensor,
    pub cls: Tensor,
    pub mask_token: Tensor,
    pub blocks: Vec<BlockParams>,
    pub final_gain: Tensor,
    pub final_bias: Tensor,
    /// `B×d`
    pub decoder_w: Tensor,
    pub decoder_b: Tensor,
    /// `K×d`
    pub head_w: Tensor,
    pub head_b: Tensor,
}

fn normal(shape: &[usize], r: &mut StreamRng) -> Tensor {
    let dist = Normal::new(0.0, INIT_STD).expect("valid std");
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(r)).collect()).expect("shape")
}

pub fn sinusoidal_table(rows: usize, dim: usize) -> Tensor {
    let mut t = Tensor::zeros(&[rows, dim]);
    for p in 0..rows {
        for i in 0..dim {
            let freq = 10000f64.powf(-((i / 2 * 2) as f64) / dim as f64);
            let a = p as f64 * freq;
            t.data_mut()[p * dim + i] = if i % 2 == 0 { a.sin() } else { a.cos() };
        }
    }
    t
}

impl ModelParams {
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (d, b, n, k) = (config.embed_dim, config.bands, config.tokens(), config.classes);
        let hidden = config.mlp_ratio * d;
        let mut r = rng::stream(seed, &[rng::tag::INIT]);
        let embed = normal(&[d, b], &mut r);
        let pos = match config.positional {
            PositionalKind::Learned => normal(&[n + 1, d], &mut r),
            PositionalKind::Sinusoidal => sinusoidal_table(n + 1, d),
        };
        let cls = normal(&[1, d], &mut r);
        let mask_token = normal(&[1, d], &mut r);
        let blocks = (0..config.depth)
            .map(|_| BlockParams {
                norm1_gain: Tensor::filled(&[d], 1.0),
                norm1_bias: Tensor::zeros(&[d]),
                wq: normal(&[d, d], &mut r),
                wk: normal(&[d, d], &mut r),
                wv: normal(&[d, d], &mut r),
                wo: normal(&[d, d], &mut r),
                norm2_gain: Tensor::filled(&[d], 1.0),
                norm2_bias: Tensor::zeros(&[d]),
                mlp1: normal(&[hidden, d], &mut r),
                mlp2: normal(&[d, hidden], &mut r),
            })
            .collect();
        Ok(ModelParams {
            config: config.clone(),
            embed,
            pos,
            cls,
            mask_token,
            blocks,
            final_gain: Tensor::filled(&[d], 1.0),
            final_bias: Tensor::zeros(&[d]),
            decoder_w: normal(&[b, d], &mut r),
            decoder_b: Tensor::zeros(&[b]),
            head_w: normal(&[k, d], &mut r),
            head_b: Tensor::zeros(&[k]),
        })
    }

    /// Every tensor with its checkpoint name, in canonical order.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut v: Vec<(String, &Tensor)> = vec![
            ("embed".into(), &self.embed),
            ("pos".into(), &self.pos),
            ("cls".into(), &self.cls),
            ("mask_token".into(), &self.mask_token),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            for (name, t) in [
                ("norm1.gain", &b.norm1_gain),
                ("norm1.bias", &b.norm1_bias),
                ("attn.wq", &b.wq),
                ("attn.wk", &b.wk),
                ("attn.wv", &b.wv),
                ("attn.wo", &b.wo),
                ("norm2.gain", &b.norm2_gain),
                ("norm2.bias", &b.norm2_bias),
                ("mlp.fc1", &b.mlp1),
                ("mlp.fc2", &b.mlp2),
            ] {
                v.push((format!("blocks.{i}.{name}"), t));
            }
        }
        v.extend([
            ("final_norm.gain".into(), &self.final_gain),
            ("final_norm.bias".into(), &self.final_bias),
            ("decoder.weight".into(), &self.decoder_w),
            ("decoder.bias".into(), &self.decoder_b),
            ("head.weight".into(), &self.head_w),
            ("head.bias".into(), &self.head_b),
        ]);
        v
    }

    /// Mutable tensors in the same order as [`ModelParams::named`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = vec![&mut self.embed, &mut self.pos, &mut self.cls, &mut self.mask_token];
        for b in &mut self.blocks {
            v.extend([
                &mut b.norm1_gain,
                &mut b.norm1_bias,
                &mut b.wq,
                &mut b.wk,
                &mut b.wv,
                &mut b.wo,
                &mut b.norm2_gain,
                &mut b.norm2_bias,
                &mut b.mlp1,
                &mut b.mlp2,
            ]);
        }
        v.extend([
            &mut self.final_gain,
            &mut self.final_bias,
            &mut self.decoder_w,
            &mut self.decoder_b,
            &mut self.head_w,
            &mut self.head_b,
        ]);
        v
    }

    pub fn parameter_count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.named().iter().all(|(_, t)| t.is_finite())
    }

    /// Whether the optimizer may update tensor `name`.
    pub fn is_trainable(&self, name: &str) -> bool {
        !(name == "pos" && self.config.positional == PositionalKind::Sinusoidal)
    }

    /// Records every tensor as a leaf of `g`.
    pub fn bind<'a>(&'a self, g: &mut Graph<'a>) -> Bound {
        let mut leaf = |name: &str, t: &'a Tensor| {
            if self.is_trainable(name) {
                g.param(t)
            } else {
                g.frozen(t)
            }
        };
        let embed = leaf("embed", &self.embed);
        let pos = leaf("pos", &self.pos);
        let cls = leaf("cls", &self.cls);
        let mask_token = leaf("mask_token", &self.mask_token);
        let blocks = self
            .blocks
            .iter()
            .map(|b| BlockVars {
                norm1_gain: leaf("", &b.norm1_gain),
                norm1_bias: leaf("", &b.norm1_bias),
                wq: leaf("", &b.wq),
                wk: leaf("", &b.wk),
                wv: leaf("", &b.wv),
                wo: leaf("", &b.wo),
                norm2_gain: leaf("", &b.norm2_gain),
                norm2_bias: leaf("", &b.norm2_bias),
                mlp1: leaf("", &b.mlp1),
                mlp2: leaf("", &b.mlp2),
            })
            .collect();
        Bound {
            config: self.config.clone(),
            embed,
            pos,
            cls,
            mask_token,
            blocks,
            final_gain: leaf("", &self.final_gain),
            final_bias: leaf("", &self.final_bias),
            decoder_w: leaf("", &self.decoder_w),
            decoder_b: leaf("", &self.decoder_b),
            head_w: leaf("", &self.head_w),
            head_b: leaf("", &self.head_b),
        }
    }
}

#[derive(Clone, Debug)]
pub struct BlockVars {
    pub norm1_gain: Var,
    pub norm1_bias: Var,
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub norm2_gain: Var,
    pub norm2_bias: Var,
    pub mlp1: Var,
    pub mlp2: Var,
}

/// Graph handles for one [`ModelParams`].
#[derive(Clone, Debug)]
pub struct Bound {
    pub config: ModelConfig,
    pub embed: Var,
    pub pos: Var,
    pub cls: Var,
    pub mask_token: Var,
    pub blocks: Vec<BlockVars>,
    pub final_gain: Var,
    pub final_bias: Var,
    pub decoder_w: Var,
    pub decoder_b: Var,
    pub head_w: Var,
    pub head_b: Var,
}

impl Bound {
    /// Handles in [`ModelParams::named`] order.
    pub fn vars(&self) -> Vec<Var> {
        let mut v = vec![self.embed, self.pos, self.cls, self.mask_token];
        for b in &self.blocks {
            v.extend([
                b.norm1_gain,
                b.norm1_bias,
                b.wq,
                b.wk,
                b.wv,
                b.wo,
                b.norm2_gain,
                b.norm2_bias,
                b.mlp1,
                b.mlp2,
            ]);
        }
        v.extend([
            self.final_gain,
            self.final_bias,
            self.decoder_w,
            self.decoder_b,
            self.head_w,
            self.head_b,
        ]);
        v
    }
}

/// Inverted dropout driven by an explicit stream.
pub struct Dropout<'r> {
    pub rate: f64,
    pub rng: &'r mut StreamRng,
}

impl Dropout<'_> {
    fn keep_mask(&mut self, len: usize) -> Vec<f64> {
        let scale = 1.0 / (1.0 - self.rate);
        (0..len)
            .map(|_| if self.rng.random::<f64>() < self.rate { 0.0 } else { scale })
            .collect()
    }
}

/// Row 0 is `cls + pos[0]`; row `i ≥ 1` is `E·y_i + pos[i]`.
pub fn embed(g: &mut Graph<'_>, p: &Bound, tokens: &Tensor) -> Result<Var> {
    let n = g.shape(p.pos)[0] - 1;
    if tokens.rank() != 2 || tokens.rows() != n || tokens.cols() != p.config.bands {
        return Err(Error::Shape(format!(
            "expected {n}x{} tokens, got {:?}",
            p.config.bands,
            tokens.shape()
        )));
    }
    let x = g.constant(tokens.clone());
    let proj = g.matmul_nt(x, p.embed)?;
    let seq = g.concat_rows(&[p.cls, proj])?;
    g.add(seq, p.pos)
}

/// Replaces each masked content row with `mask_token + pos[i+1]`.
pub fn substitute_masked(g: &mut Graph<'_>, p: &Bound, embedded: Var, mask: &SpatialMask) -> Result<Var> {
    let n = g.shape(embedded)[0] - 1;
    if mask.len() != n {
        return Err(Error::Shape(format!("mask covers {} tokens, sequence has {n}", mask.len())));
    }
    if mask.masked_count() == 0 {
        return Ok(embedded);
    }
    let mut flags = Vec::with_capacity(n + 1);
    flags.push(false);
    flags.extend_from_slice(mask.flags());
    let fill = g.add_row(p.pos, p.mask_token)?;
    g.mask_rows(embedded, fill, &flags)
}

#[derive(Clone, Copy, Debug)]
pub struct EncoderOutput {
    /// `(N+1)×d`
    pub tokens: Var,
    /// `1×d`, row 0 of `tokens`.
    pub cls: Var,
}

pub fn encode(g: &mut Graph<'_>, p: &Bound, x: Var, mut dropout: Option<Dropout<'_>>) -> Result<EncoderOutput> {
    let cfg = &p.config;
    let (heads, dh) = (cfg.heads, cfg.head_dim());
    let scale = 1.0 / (dh as f64).sqrt();
    let rows = g.shape(x)[0];
    let dropout = dropout.as_mut().filter(|d| d.rate > 0.0);
    let mut dropout = dropout;
    let mut h = x;
    for b in &p.blocks {
        let n1 = g.layer_norm(h, b.norm1_gain, b.norm1_bias, cfg.norm_eps)?;
        let q = g.matmul_nt(n1, b.wq)?;
        let k = g.matmul_nt(n1, b.wk)?;
        let v = g.matmul_nt(n1, b.wv)?;
        let mut outs = Vec::with_capacity(heads);
        for head in 0..heads {
            let (lo, hi) = (head * dh, (head + 1) * dh);
            let qh = g.slice_cols(q, lo, hi)?;
            let kh = g.slice_cols(k, lo, hi)?;
            let vh = g.slice_cols(v, lo, hi)?;
            let keep = dropout.as_deref_mut().map(|d| d.keep_mask(rows * rows));
            outs.push(g.attention(qh, kh, vh, scale, keep)?);
        }
        let cat = if heads == 1 { outs[0] } else { g.concat_cols(&outs)? };
        let attn = g.matmul_nt(cat, b.wo)?;
        h = g.add(h, attn)?;

        let n2 = g.layer_norm(h, b.norm2_gain, b.norm2_bias, cfg.norm_eps)?;
        let hid = g.matmul_nt(n2, b.mlp1)?;
        let act = g.gelu(hid);
        let mut mlp = g.matmul_nt(act, b.mlp2)?;
        if let Some(d) = dropout.as_deref_mut() {
            let mask = d.keep_mask(g.value(mlp).len());
            let mask = g.constant(Tensor::new(g.shape(mlp).to_vec(), mask)?);
            mlp = g.mul(mlp, mask)?;
        }
        h = g.add(h, mlp)?;
    }
    let tokens = g.layer_norm(h, p.final_gain, p.final_bias, cfg.norm_eps)?;
    let cls = g.slice_rows(tokens, 0, 1)?;
    Ok(EncoderOutput { tokens, cls })
}

/// Affine map of rows `1..=N` back to `B` bands.
pub fn decode(g: &mut Graph<'_>, p: &Bound, tokens: Var) -> Result<Var> {
    let rows = g.shape(tokens)[0];
    let content = g.slice_rows(tokens, 1, rows)?;
    let out = g.matmul_nt(content, p.decoder_w)?;
    g.add_row(out, p.decoder_b)
}

/// `1×K` logits from the cls output.
pub fn classify(g: &mut Graph<'_>, p: &Bound, cls: Var) -> Result<Var> {
    let logits = g.matmul_nt(cls, p.head_w)?;
    g.add_row(logits, p.head_b)
}

impl ModelParams {
    /// Class logits for one token sequence, without dropout.
    pub fn logits(&self, tokens: &Tensor) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let b = self.bind(&mut g);
        let x = embed(&mut g, &b, tokens)?;
        let enc = encode(&mut g, &b, x, None)?;
        let l = classify(&mut g, &b, enc.cls)?;
        Ok(g.value(l).data().to_vec())
    }

    /// Predicted class in `1..=K`.
    pub fn predict(&self, tokens: &Tensor) -> Result<u32> {
        let l = self.logits(tokens)?;
        let best = (0..l.len())
            .max_by(|&a, &b| l[a].total_cmp(&l[b]).then(b.cmp(&a)))
            .expect("K ≥ 1");
        Ok(best as u32 + 1)
    }

    /// Decoder output for an optionally masked sequence, without dropout.
    pub fn reconstruct(&self, tokens: &Tensor, mask: Option<&SpatialMask>) -> Result<Tensor> {
        let mut g = Graph::new();
        let b = self.bind(&mut g);
        let mut x = embed(&mut g, &b, tokens)?;
        if let Some(m) = mask {
            x = substitute_masked(&mut g, &b, x, m)?;
        }
        let enc = encode(&mut g, &b, x, None)?;
        let out = decode(&mut g, &b, enc.tokens)?;
        Ok(g.value(out).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            patch_size: 3,
            bands: 8,
            embed_dim: 8,
            depth: 2,
            heads: 2,
            classes: 3,
            mlp_ratio: 4,
            dropout: 0.0,
            positional: PositionalKind::Learned,
            norm_eps: 1e-5,
        }
    }

    fn tokens(n: usize, b: usize, seed: u64) -> Tensor {
        let mut r = rng::stream(seed, &[]);
        Tensor::new(vec![n, b], (0..n * b).map(|_| r.random_range(-2.0..2.0)).collect()).unwrap()
    }

    #[test]
    fn init_shapes_and_names() {
        let p = ModelParams::init(&tiny(), 0).unwrap();
        let names: Vec<String> = p.named().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names.len(), 4 + 2 * 10 + 6);
        assert_eq!(names[4], "blocks.0.norm1.gain");
        assert_eq!(p.pos.shape(), &[10, 8]);
        assert_eq!(p.blocks[0].mlp1.shape(), &[32, 8]);
        let mut q = p.clone();
        assert_eq!(q.tensors_mut().len(), names.len());
    }

    #[test]
    fn embed_examples() {
        let mut p = ModelParams::init(&tiny(), 0).unwrap();
        p.embed = Tensor::zeros(&[8, 8]);
        p.pos = Tensor::zeros(&[10, 8]);
        let mut g = Graph::new();
        let b = p.bind(&mut g);
        let x = embed(&mut g, &b, &tokens(9, 8, 1)).unwrap();
        let v = g.value(x);
        assert_eq!(v.row(0), p.cls.data());
        assert!((1..10).all(|i| v.row(i).iter().all(|&z| z == 0.0)));

        let p = ModelParams::init(&tiny(), 2).unwrap();
        let mut t = Tensor::zeros(&[9, 8]);
        t.data_mut()[4 * 8 + 5] = 1.0; // token 4 selects band 5
        let mut g = Graph::new();
        let b = p.bind(&mut g);
        let x = embed(&mut g, &b, &t).unwrap();
        for j in 0..8 {
            let want = p.embed.at(j, 5) + p.pos.at(5, j);
            assert!((g.value(x).at(5, j) - want).abs() < 1e-15);
        }
        assert!(embed(&mut g, &b, &tokens(8, 8, 0)).is_err());
    }

    #[test]
    fn standard_embedding_shape() {
        let cfg = ModelConfig { depth: 0, ..ModelConfig::standard(200, 16) };
        let p = ModelParams::init(&cfg, 0).unwrap();
        let mut g = Graph::new();
        let b = p.bind(&mut g);
        let x = embed(&mut g, &b, &tokens(49, 200, 0)).unwrap();
        assert_eq!(g.shape(x), &[50, 64]);
        let enc = encode(&mut g, &b, x, None).unwrap();
        let l = classify(&mut g, &b, enc.cls).unwrap();
        assert_eq!(g.shape(l), &[1, 16]);
    }

    #[test]
    fn masked_rows_take_mask_token() {
        let p = ModelParams::init(&tiny(), 3).unwrap();
        let mut g = Graph::new();
        let b = p.bind(&mut g);
        let x = embed(&mut g, &b, &tokens(9, 8, 4)).unwrap();
        let same = substitute_masked(&mut g, &b, x, &SpatialMask::none(9)).unwrap();
        assert_eq!(same, x);

        let mut flags = vec![true; 9];
        flags[6] = false;
        let y = substitute_masked(&mut g, &b, x, &SpatialMask::from_flags(flags)).unwrap();
        let (xv, yv) = (g.value(x).clone(), g.value(y).clone());
        assert_eq!(yv.row(0), xv.row(0));
        assert_eq!(yv.row(7), xv.row(7));
        for i in (1..10).filter(|&i| i != 7) {
            for j in 0..8 {
                assert_eq!(yv.at(i, j), p.mask_token.data()[j] + p.pos.at(i, j));
            }
        }
    }

    #[test]
    fn zero_depth_is_final_norm() {
        let cfg = ModelConfig { depth: 0, ..tiny() };
        let p = ModelParams::init(&cfg, 0).unwrap();
        let mut g = Graph::new();
        let b = p.bind(&mut g);
        let x = embed(&mut g, &b, &tokens(9, 8, 5)).unwrap();
        let enc = encode(&mut g, &b, x, None).unwrap();
        let (gain, bias) = (g.frozen(&p.final_gain), g.frozen(&p.final_bias));
        let want = g.layer_norm(x, gain, bias, cfg.norm_eps).unwrap();
        assert_eq!(g.value(enc.tokens), g.value(want));
    }

    #[test]
    fn one_token_attention_oracle() {
        let cfg = ModelConfig { patch_size: 1, depth: 1, heads: 2, ..tiny() };
        let mut p = ModelParams::init(&cfg, 0).unwrap();
        p.blocks[0].wv = Tensor::identity(8);
        p.blocks[0].wo = Tensor::identity(8);
        p.blocks[0].mlp2 = Tensor::zeros(&[8, 32]);
        let x0: Vec<f64> = (0..8).map(|i| (i as f64 * 0.9).sin() * 2.0).collect();
        let ln = |v: &[f64]| -> Vec<f64> {
            let m = v.iter().sum::<f64>() / v.len() as f64;
            let var = v.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / v.len() as f64;
            v.iter().map(|a| (a - m) / (var + cfg.norm_eps).sqrt()).collect()
        };
        // a single-key softmax is exactly 1, so attention returns its value row
        let h: Vec<f64> = x0.iter().zip(ln(&x0)).map(|(a, b)| a + b).collect();
        let want = ln(&h);

        let mut g = Graph::new();
        let b = p.bind(&mut g);
        let x = g.constant(Tensor::new(vec![1, 8], x0.clone()).unwrap());
        let enc = encode(&mut g, &b, x, None).unwrap();
        for (a, w) in g.value(enc.tokens).data().iter().zip(&want) {
            assert!((a - w).abs() < 1e-12);
        }
    }

    #[test]
    fn decode_examples() {
        let cfg = tiny();
        let mut p = ModelParams::init(&cfg, 0).unwrap();
        p.decoder_w = Tensor::zeros(&[8, 8]);
        p.decoder_b = Tensor::new(vec![8], (0..8).map(f64::from).collect()).unwrap();
        let out = p.reconstruct(&tokens(9, 8, 1), None).unwrap();
        assert_eq!(out.shape(), &[9, 8]);
        assert!((0..9).all(|i| out.row(i) == p.decoder_b.data()));

        let mut p = ModelParams::init(&cfg, 0).unwrap();
        p.decoder_w = Tensor::identity(8);
        p.decoder_b = Tensor::zeros(&[8]);
        let mut g = Graph::new();
        let b = p.bind(&mut g);
        let x = embed(&mut g, &b, &tokens(9, 8, 1)).unwrap();
        let enc = encode(&mut g, &b, x, None).unwrap();
        let rec = decode(&mut g, &b, enc.tokens).unwrap();
        for i in 0..9 {
            assert_eq!(g.value(rec).row(i), g.value(enc.tokens).row(i + 1));
        }

        let cfg = ModelConfig { bands: 5, embed_dim: 6, heads: 3, patch_size: 5, ..tiny() };
        let p = ModelParams::init(&cfg, 0).unwrap();
        assert_eq!(p.reconstruct(&tokens(25, 5, 2), None).unwrap().shape(), &[25, 5]);
    }

    #[test]
    fn classify_examples() {
        let mut p = ModelParams::init(&tiny(), 0).unwrap();
        p.head_w = Tensor::zeros(&[3, 8]);
        p.head_b = Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap();
        assert_eq!(p.logits(&tokens(9, 8, 7)).unwrap(), vec![0.5, -1.0, 2.0]);
        assert_eq!(p.predict(&tokens(9, 8, 7)).unwrap(), 3);
        let one = ModelConfig { classes: 1, ..tiny() };
        assert!(matches!(ModelParams::init(&one, 0), Err(Error::Config(_))));
    }

    #[test]
    fn masked_spectrum_does_not_matter() {
        let p = ModelParams::init(&tiny(), 9).unwrap();
        let mut flags = vec![false; 9];
        flags[2] = true;
        flags[5] = true;
        let mask = SpatialMask::from_flags(flags);
        let a = tokens(9, 8, 1);
        let mut b = a.clone();
        for j in 0..8 {
            b.data_mut()[2 * 8 + j] = 100.0;
            b.data_mut()[5 * 8 + j] = -7.0;
        }
        assert_eq!(p.reconstruct(&a, Some(&mask)).unwrap(), p.reconstruct(&b, Some(&mask)).unwrap());
    }

    #[test]
    fn validate_rejects_bad_heads() {
        let cfg = ModelConfig { heads: 3, ..tiny() };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn sinusoidal_positions_are_frozen() {
        let cfg = ModelConfig { positional: PositionalKind::Sinusoidal, ..tiny() };
        let p = ModelParams::init(&cfg, 0).unwrap();
        assert_eq!(p.pos, sinusoidal_table(10, 8));
        let mut g = Graph::new();
        let b = p.bind(&mut g);
        assert!(!g.requires_grad(b.pos));
        assert!(g.requires_grad(b.embed));
    }
}
