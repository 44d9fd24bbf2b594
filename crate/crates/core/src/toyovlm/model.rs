use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{CellGrid, GroundingOutput, MultiScaleFeatures, OvlmConfig, TokenKind, TokenSequence, Vocab};
use crate::error::{Result, VistexError};
use crate::linalg::{conv_backward, conv_forward, gemm, matmul, softmax_rows, softmax_rows_backward, ConvGeom, Mat, MatRef};
use crate::params::{he_normal, normal_vec, Grads, ParamStore, TensorId, TensorSpec};

#[derive(Clone, Copy, Debug)]
struct ConvLayer {
    weight: TensorId,
    bias: TensorId,
    c_in: usize,
    c_out: usize,
    stride: usize,
}

impl ConvLayer {
    fn add(store: &mut ParamStore, name: &str, c_in: usize, c_out: usize, stride: usize, gain: f64, rng: &mut Option<ChaCha8Rng>) -> Self {
        let n = 9 * c_in * c_out;
        let w = match rng {
            Some(r) => he_normal(r, n, 9 * c_in).into_iter().map(|v| v * gain).collect(),
            None => vec![0.0; n],
        };
        let weight = store.add(format!("{name}.weight"), &[3, 3, c_in, c_out], w);
        let bias = store.add(format!("{name}.bias"), &[c_out], vec![0.0; c_out]);
        Self {
            weight,
            bias,
            c_in,
            c_out,
            stride,
        }
    }

    fn geom(&self, h: usize, w: usize) -> ConvGeom {
        ConvGeom {
            h,
            w,
            c_in: self.c_in,
            c_out: self.c_out,
            stride: self.stride,
        }
    }

    fn forward(&self, p: &ParamStore, x: &Mat, h: usize, w: usize) -> (Mat, Mat) {
        conv_forward(x, &self.geom(h, w), p.get(self.weight), Some(p.get(self.bias)))
    }

    fn backward(
        &self,
        p: &ParamStore,
        dout: &Mat,
        patches: &Mat,
        h: usize,
        w: usize,
        grads: Option<&mut Grads>,
        want_input: bool,
    ) -> Option<Mat> {
        let g = self.geom(h, w);
        let (pg, dx) = conv_backward(dout, patches, &g, p.get(self.weight), grads.is_some(), want_input);
        if let (Some(grads), Some(pg)) = (grads, pg) {
            grads.accumulate(p, self.weight, &pg.weight);
            grads.accumulate(p, self.bias, &pg.bias);
        }
        dx
    }
}

#[derive(Clone, Debug)]
struct StageLayer {
    convs: Vec<ConvLayer>,
    wq_v: TensorId,
    wk_t: TensorId,
    wv_t: TensorId,
    wq_t: TensorId,
    wk_v: TensorId,
    wv_v: TensorId,
    w1: TensorId,
    b1: TensorId,
    w2: TensorId,
    b2: TensorId,
}

#[derive(Clone, Debug)]
struct Layout {
    embed: TensorId,
    stem: Vec<ConvLayer>,
    pyramid: Vec<ConvLayer>,
    stages: Vec<StageLayer>,
    proj_w: TensorId,
    proj_b: TensorId,
    box_w: TensorId,
    box_b: TensorId,
}

fn build(cfg: &OvlmConfig, mut rng: Option<ChaCha8Rng>) -> (ParamStore, Layout) {
    let mut s = ParamStore::new();
    let (di, dt) = (cfg.d_visual, cfg.d_text);
    let dense = |s: &mut ParamStore, rng: &mut Option<ChaCha8Rng>, name: String, rows: usize, cols: usize, std: f64| {
        let v = match rng {
            Some(r) => normal_vec(r, rows * cols, std),
            None => vec![0.0; rows * cols],
        };
        s.add(name, &[rows, cols], v)
    };

    let embed = dense(&mut s, &mut rng, "embed.weight".into(), cfg.vocab_size, dt, 1.0);

    let n_stem = cfg.stem_downsamples().max(1);
    let stride = if cfg.stem_downsamples() == 0 { 1 } else { 2 };
    let mut stem = Vec::new();
    let mut c_in = 3;
    for k in 0..n_stem {
        let c_out = if k + 1 == n_stem { di } else { cfg.stem_channels };
        stem.push(ConvLayer::add(&mut s, &format!("stem.{k}"), c_in, c_out, stride, 1.0, &mut rng));
        c_in = c_out;
    }
    let pyramid = (1..cfg.scales)
        .map(|j| ConvLayer::add(&mut s, &format!("pyramid.{j}"), di, di, 2, 1.0, &mut rng))
        .collect();

    let inv = |n: usize| (1.0 / n as f64).sqrt();
    let stages = (0..cfg.stages)
        .map(|st| {
            let convs = (0..cfg.scales)
                .map(|j| ConvLayer::add(&mut s, &format!("stage.{st}.conv.{j}"), di, di, 1, 0.5, &mut rng))
                .collect();
            let p = format!("stage.{st}");
            let wq_v = dense(&mut s, &mut rng, format!("{p}.v2t.query"), di, dt, inv(di));
            let wk_t = dense(&mut s, &mut rng, format!("{p}.v2t.key"), dt, dt, inv(dt));
            let wv_t = dense(&mut s, &mut rng, format!("{p}.v2t.value"), dt, di, inv(dt));
            let wq_t = dense(&mut s, &mut rng, format!("{p}.t2v.query"), dt, dt, inv(dt));
            let wk_v = dense(&mut s, &mut rng, format!("{p}.t2v.key"), di, dt, inv(di));
            let wv_v = dense(&mut s, &mut rng, format!("{p}.t2v.value"), di, dt, inv(di));
            let w1 = dense(&mut s, &mut rng, format!("{p}.ffn.0.weight"), dt, cfg.ffn_hidden, (2.0 / dt as f64).sqrt());
            let b1 = s.add(format!("{p}.ffn.0.bias"), &[cfg.ffn_hidden], vec![0.0; cfg.ffn_hidden]);
            let w2 = dense(&mut s, &mut rng, format!("{p}.ffn.1.weight"), cfg.ffn_hidden, dt, 0.5 * inv(cfg.ffn_hidden));
            let b2 = s.add(format!("{p}.ffn.1.bias"), &[dt], vec![0.0; dt]);
            StageLayer {
                convs,
                wq_v,
                wk_t,
                wv_t,
                wq_t,
                wk_v,
                wv_v,
                w1,
                b1,
                w2,
                b2,
            }
        })
        .collect();

    let proj_w = dense(&mut s, &mut rng, "head.proj.weight".into(), di, dt, inv(di));
    let proj_b = s.add("head.proj.bias", &[dt], vec![0.0; dt]);
    let box_w = dense(&mut s, &mut rng, "head.box.weight".into(), di, 4, 0.1 * inv(di));
    let box_b = s.add("head.box.bias", &[4], vec![0.0; 4]);
    (
        s,
        Layout {
            embed,
            stem,
            pyramid,
            stages,
            proj_w,
            proj_b,
            box_w,
            box_b,
        },
    )
}

/// Which gradients a backward pass produces.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradTarget {
    /// Only the gradient w.r.t. the input prompt rows (weights stay frozen
    /// but are differentiated through).
    Prompt,
    /// Prompt rows plus every detector parameter.
    All,
}

struct ConvCache {
    patches: Mat,
    out: Mat,
    h: usize,
    w: usize,
}

/// Saved activations of one cross-modal stage.
pub struct StageCache {
    masked: bool,
    grids: Vec<(usize, usize)>,
    conv_patches: Vec<Mat>,
    conv_pre: Vec<Mat>,
    x: Mat,
    p: Mat,
    qv: Mat,
    kt: Mat,
    vt: Mat,
    attn_v2t: Mat,
    qt: Mat,
    kv: Mat,
    vv: Mat,
    attn_t2v: Mat,
    p_mid: Mat,
    h_pre: Mat,
    h: Mat,
}

pub struct ForwardCache {
    stem: Vec<ConvCache>,
    pyramid: Vec<ConvCache>,
    stages: Vec<StageCache>,
    /// `R^0..R^L`.
    pub features: Vec<MultiScaleFeatures>,
    /// `P^0..P^L`.
    pub prompts: Vec<Mat>,
    /// Final region rows projected into token space, per scale.
    pub region_embeddings: Vec<Mat>,
    vocab_ids: Vec<Option<usize>>,
}

/// Forward result with every stage's intermediates exposed.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub grounding: GroundingOutput,
    pub features: Vec<MultiScaleFeatures>,
    pub prompts: Vec<Mat>,
    pub region_embeddings: Vec<Mat>,
}

pub struct Backward {
    pub grads: Option<Grads>,
    /// Gradient w.r.t. `P^0`, one row per prompt row.
    pub d_prompt: Mat,
}

#[derive(Clone, Debug)]
pub struct ToyOvlm {
    pub config: OvlmConfig,
    pub vocab: Vocab,
    pub params: ParamStore,
    layout: Layout,
}

impl ToyOvlm {
    pub fn new(config: OvlmConfig, vocab: Vocab, seed: u64) -> Result<Self> {
        config.validate()?;
        let (params, layout) = build(&config, Some(ChaCha8Rng::seed_from_u64(seed)));
        Ok(Self {
            config,
            vocab,
            params,
            layout,
        })
    }

    /// Tensor table a checkpoint for `config` must contain.
    pub fn expected_specs(config: &OvlmConfig) -> Result<Vec<TensorSpec>> {
        config.validate()?;
        Ok(build(config, None).0.specs().to_vec())
    }

    /// Rebuilds a model from a flat parameter vector laid out per
    /// [`ToyOvlm::expected_specs`].
    pub fn from_data(config: OvlmConfig, vocab: Vocab, data: Vec<f64>) -> Result<Self> {
        config.validate()?;
        let (mut params, layout) = build(&config, None);
        if data.len() != params.len() {
            return Err(VistexError::Corruption(format!(
                "expected {} parameters, got {}",
                params.len(),
                data.len()
            )));
        }
        params.set_data(data);
        Ok(Self {
            config,
            vocab,
            params,
            layout,
        })
    }

    pub fn embedding(&self, vocab_id: usize) -> &[f64] {
        let dt = self.config.d_text;
        &self.params.get(self.layout.embed)[vocab_id * dt..(vocab_id + 1) * dt]
    }

    /// One text row per class name (`N = 1`); names missing from the
    /// vocabulary share the out-of-vocabulary embedding.
    pub fn tokenize_text<S: AsRef<str>>(&self, prompt: &[(usize, S)]) -> Result<TokenSequence> {
        if prompt.is_empty() {
            return Err(VistexError::InvalidPrompt("empty text prompt".into()));
        }
        let mut seq = TokenSequence::empty(self.config.d_text);
        for (class_id, name) in prompt {
            let v = self.vocab.lookup(name.as_ref());
            seq.push(self.embedding(v), Some(*class_id), TokenKind::Text, Some(v))?;
        }
        Ok(seq)
    }

    /// A text row for an arbitrary vocabulary slot, assigned to `class`.
    pub fn vocab_token(&self, vocab_id: usize, class: Option<usize>) -> TokenSequence {
        let mut seq = TokenSequence::empty(self.config.d_text);
        seq.push(self.embedding(vocab_id), class, TokenKind::Text, Some(vocab_id))
            .expect("embedding width");
        seq
    }

    fn check_pixels(&self, pixels: &[f64]) -> Result<()> {
        let n = self.config.image_size;
        if pixels.len() != n * n * 3 {
            return Err(VistexError::Shape(format!(
                "image has {} values, expected {n}x{n}x3",
                pixels.len()
            )));
        }
        Ok(())
    }

    fn tokenize_visual_cached(&self, pixels: &[f64]) -> Result<(MultiScaleFeatures, Vec<ConvCache>, Vec<ConvCache>)> {
        self.check_pixels(pixels)?;
        let n = self.config.image_size;
        let mut x = Mat::from_vec(n * n, 3, pixels.to_vec());
        let (mut h, mut w) = (n, n);
        let mut stem = Vec::with_capacity(self.layout.stem.len());
        for layer in &self.layout.stem {
            let (mut out, patches) = layer.forward(&self.params, &x, h, w);
            crate::linalg::relu_in_place(&mut out);
            let g = layer.geom(h, w);
            stem.push(ConvCache {
                patches,
                out: out.clone(),
                h,
                w,
            });
            (h, w) = (g.out_h(), g.out_w());
            x = out;
        }
        let mut scales = vec![x];
        let mut pyramid = Vec::with_capacity(self.layout.pyramid.len());
        for layer in &self.layout.pyramid {
            let prev = scales.last().unwrap();
            let (mut out, patches) = layer.forward(&self.params, prev, h, w);
            crate::linalg::relu_in_place(&mut out);
            let g = layer.geom(h, w);
            pyramid.push(ConvCache {
                patches,
                out: out.clone(),
                h,
                w,
            });
            (h, w) = (g.out_h(), g.out_w());
            scales.push(out);
        }
        Ok((MultiScaleFeatures { stage: 0, scales }, stem, pyramid))
    }

    /// Visual tokenizer: the stem plus pyramid, giving `R^0`.
    pub fn visual_tokenize(&self, pixels: &[f64]) -> Result<MultiScaleFeatures> {
        Ok(self.tokenize_visual_cached(pixels)?.0)
    }

    /// One cross-modal stage (`stage` in `1..=L`). With `masked`, both
    /// attention directions are disabled and only the token feed-forward runs.
    pub fn encode_stage(&self, stage: usize, r_prev: &MultiScaleFeatures, p_prev: &Mat, masked: bool) -> Result<(MultiScaleFeatures, Mat, StageCache)> {
        let cfg = &self.config;
        if stage == 0 || stage > cfg.stages {
            return Err(VistexError::InvalidStage {
                index: stage,
                max: cfg.stages,
            });
        }
        if p_prev.cols != cfg.d_text {
            return Err(VistexError::Shape(format!(
                "token width {} != d_T {}",
                p_prev.cols, cfg.d_text
            )));
        }
        let grids = cfg.scale_grids();
        if r_prev.row_counts() != cfg.scale_rows() || r_prev.scales.iter().any(|m| m.cols != cfg.d_visual) {
            return Err(VistexError::Shape("region features do not follow the pyramid schedule".into()));
        }
        let layer = &self.layout.stages[stage - 1];
        let p = &self.params;

        let mut conv_patches = Vec::with_capacity(cfg.scales);
        let mut conv_pre = Vec::with_capacity(cfg.scales);
        let mut residual = Vec::with_capacity(cfg.scales);
        for (j, conv) in layer.convs.iter().enumerate() {
            let (h, w) = grids[j];
            let (pre, patches) = conv.forward(p, &r_prev.scales[j], h, w);
            let mut out = r_prev.scales[j].clone();
            for (o, v) in out.data.iter_mut().zip(&pre.data) {
                *o += v.max(0.0);
            }
            conv_patches.push(patches);
            conv_pre.push(pre);
            residual.push(out);
        }
        let x = Mat::vstack(&residual.iter().collect::<Vec<_>>());
        let pm = p_prev.clone();
        let scale = 1.0 / (cfg.d_text as f64).sqrt();
        let w = |id: TensorId, r: usize, c: usize| MatRef::new(r, c, p.get(id));
        let (di, dt) = (cfg.d_visual, cfg.d_text);

        let empty = || Mat::zeros(0, 0);
        let (mut xn, mut p_mid) = (x.clone(), pm.clone());
        let (mut qv, mut kt, mut vt, mut a, mut qt, mut kv, mut vv, mut b) =
            (empty(), empty(), empty(), empty(), empty(), empty(), empty(), empty());
        if !masked {
            qv = matmul(x.view(), w(layer.wq_v, di, dt));
            kt = matmul(pm.view(), w(layer.wk_t, dt, dt));
            vt = matmul(pm.view(), w(layer.wv_t, dt, di));
            a = matmul(qv.view(), kt.view().t());
            a.data.iter_mut().for_each(|v| *v *= scale);
            softmax_rows(&mut a);
            gemm(1.0, a.view(), vt.view(), 1.0, &mut xn);

            qt = matmul(pm.view(), w(layer.wq_t, dt, dt));
            kv = matmul(x.view(), w(layer.wk_v, di, dt));
            vv = matmul(x.view(), w(layer.wv_v, di, dt));
            b = matmul(qt.view(), kv.view().t());
            b.data.iter_mut().for_each(|v| *v *= scale);
            softmax_rows(&mut b);
            gemm(1.0, b.view(), vv.view(), 1.0, &mut p_mid);
        }

        let hid = cfg.ffn_hidden;
        let mut h_pre = matmul(p_mid.view(), w(layer.w1, dt, hid));
        h_pre.add_row_bias(p.get(layer.b1));
        let mut hact = h_pre.clone();
        crate::linalg::relu_in_place(&mut hact);
        let mut p_next = p_mid.clone();
        gemm(1.0, hact.view(), w(layer.w2, hid, dt), 1.0, &mut p_next);
        p_next.add_row_bias(p.get(layer.b2));

        let r_next = MultiScaleFeatures {
            stage,
            scales: xn.split_rows(&cfg.scale_rows()),
        };
        let cache = StageCache {
            masked,
            grids,
            conv_patches,
            conv_pre,
            x,
            p: pm,
            qv,
            kt,
            vt,
            attn_v2t: a,
            qt,
            kv,
            vv,
            attn_t2v: b,
            p_mid,
            h_pre,
            h: hact,
        };
        Ok((r_next, p_next, cache))
    }

    /// Dense grounding head on final-stage features; returns the output and
    /// the region rows projected into token space.
    pub fn grounding_head(&self, regions: &MultiScaleFeatures, tokens: &Mat) -> (GroundingOutput, Vec<Mat>) {
        let cfg = &self.config;
        let p = &self.params;
        let (di, dt) = (cfg.d_visual, cfg.d_text);
        let scale = 1.0 / (dt as f64).sqrt();
        let mut logits = Vec::with_capacity(cfg.scales);
        let mut deltas = Vec::with_capacity(cfg.scales);
        let mut zs = Vec::with_capacity(cfg.scales);
        let mut grids = Vec::with_capacity(cfg.scales);
        for (j, r) in regions.scales.iter().enumerate() {
            let mut z = matmul(r.view(), MatRef::new(di, dt, p.get(self.layout.proj_w)));
            z.add_row_bias(p.get(self.layout.proj_b));
            let mut l = Mat::zeros(z.rows, tokens.rows);
            gemm(scale, z.view(), tokens.view().t(), 0.0, &mut l);
            let mut d = matmul(r.view(), MatRef::new(di, 4, p.get(self.layout.box_w)));
            d.add_row_bias(p.get(self.layout.box_b));
            let (h, w) = (cfg.grid_h >> j, cfg.grid_w >> j);
            grids.push(CellGrid {
                h,
                w,
                stride_x: cfg.image_size as f64 / w as f64,
                stride_y: cfg.image_size as f64 / h as f64,
            });
            logits.push(l);
            deltas.push(d);
            zs.push(z);
        }
        (
            GroundingOutput {
                logits,
                box_deltas: deltas,
                grids,
                image_size: cfg.image_size,
            },
            zs,
        )
    }

    /// Full forward pass keeping everything the backward pass needs.
    pub fn forward_cached(&self, pixels: &[f64], prompt: &TokenSequence) -> Result<(GroundingOutput, ForwardCache)> {
        if prompt.is_empty() {
            return Err(VistexError::InvalidPrompt("empty prompt".into()));
        }
        let (r0, stem, pyramid) = self.tokenize_visual_cached(pixels)?;
        let mut features = vec![r0];
        let mut prompts = vec![prompt.rows.clone()];
        let mut stages = Vec::with_capacity(self.config.stages);
        for s in 1..=self.config.stages {
            let (r, pn, c) = self.encode_stage(s, features.last().unwrap(), prompts.last().unwrap(), false)?;
            features.push(r);
            prompts.push(pn);
            stages.push(c);
        }
        let (out, zs) = self.grounding_head(features.last().unwrap(), prompts.last().unwrap());
        Ok((
            out,
            ForwardCache {
                stem,
                pyramid,
                stages,
                features,
                prompts,
                region_embeddings: zs,
                vocab_ids: prompt.vocab_ids.clone(),
            },
        ))
    }

    pub fn forward(&self, pixels: &[f64], prompt: &TokenSequence) -> Result<ForwardOutput> {
        let (grounding, cache) = self.forward_cached(pixels, prompt)?;
        Ok(ForwardOutput {
            grounding,
            features: cache.features,
            prompts: cache.prompts,
            region_embeddings: cache.region_embeddings,
        })
    }

    /// Reverse pass from head gradients back to the prompt rows (and, for
    /// [`GradTarget::All`], every parameter including embeddings of text rows).
    pub fn backward(&self, cache: &ForwardCache, d_logits: &[Mat], d_deltas: &[Mat], target: GradTarget) -> Backward {
        let cfg = &self.config;
        let p = &self.params;
        let (di, dt) = (cfg.d_visual, cfg.d_text);
        let mut grads = (target == GradTarget::All).then(|| p.zeros_like());
        let scale = 1.0 / (dt as f64).sqrt();

        // head
        let regions = cache.features.last().unwrap();
        let tokens = cache.prompts.last().unwrap();
        let mut d_tokens = Mat::zeros(tokens.rows, dt);
        let mut d_regions = Vec::with_capacity(cfg.scales);
        for j in 0..cfg.scales {
            let r = &regions.scales[j];
            let z = &cache.region_embeddings[j];
            let mut dz = Mat::zeros(z.rows, dt);
            gemm(scale, d_logits[j].view(), tokens.view(), 0.0, &mut dz);
            gemm(scale, d_logits[j].view().t(), z.view(), 1.0, &mut d_tokens);
            let mut dr = matmul(dz.view(), MatRef::new(di, dt, p.get(self.layout.proj_w)).t());
            gemm(1.0, d_deltas[j].view(), MatRef::new(di, 4, p.get(self.layout.box_w)).t(), 1.0, &mut dr);
            if let Some(g) = grads.as_mut() {
                let dw = matmul(r.view().t(), dz.view());
                g.accumulate(p, self.layout.proj_w, &dw.data);
                let mut db = vec![0.0; dt];
                dz.col_sums_into(&mut db);
                g.accumulate(p, self.layout.proj_b, &db);
                let dbw = matmul(r.view().t(), d_deltas[j].view());
                g.accumulate(p, self.layout.box_w, &dbw.data);
                let mut dbb = vec![0.0; 4];
                d_deltas[j].col_sums_into(&mut dbb);
                g.accumulate(p, self.layout.box_b, &dbb);
            }
            d_regions.push(dr);
        }
        let mut d_x = Mat::vstack(&d_regions.iter().collect::<Vec<_>>());

        for s in (1..=cfg.stages).rev() {
            let need_regions = s > 1 || target == GradTarget::All;
            let (dx_prev, dp_prev) = self.stage_backward(s, &cache.stages[s - 1], &d_x, &d_tokens, grads.as_mut(), need_regions);
            d_x = dx_prev;
            d_tokens = dp_prev;
        }

        if let Some(g) = grads.as_mut() {
            // embeddings of text rows
            for (t, v) in cache.vocab_ids.iter().enumerate() {
                if let Some(v) = v {
                    let r = p.spec(self.layout.embed).offset + v * dt;
                    for (gi, d) in g.0[r..r + dt].iter_mut().zip(d_tokens.row(t)) {
                        *gi += d;
                    }
                }
            }
            self.visual_backward(cache, d_x, g);
        }
        Backward {
            grads,
            d_prompt: d_tokens,
        }
    }

    fn stage_backward(&self, stage: usize, c: &StageCache, d_xn: &Mat, d_pn: &Mat, mut grads: Option<&mut Grads>, need_regions: bool) -> (Mat, Mat) {
        let cfg = &self.config;
        let p = &self.params;
        let layer = &self.layout.stages[stage - 1];
        let (di, dt, hid) = (cfg.d_visual, cfg.d_text, cfg.ffn_hidden);
        let w = |id: TensorId, r: usize, cc: usize| MatRef::new(r, cc, p.get(id));
        let scale = 1.0 / (dt as f64).sqrt();

        // token feed-forward
        let mut d_mid = d_pn.clone();
        let mut d_h = matmul(d_pn.view(), w(layer.w2, hid, dt).t());
        for (d, pre) in d_h.data.iter_mut().zip(&c.h_pre.data) {
            if *pre <= 0.0 {
                *d = 0.0;
            }
        }
        gemm(1.0, d_h.view(), w(layer.w1, dt, hid).t(), 1.0, &mut d_mid);
        if let Some(g) = grads.as_deref_mut() {
            g.accumulate(p, layer.w2, &matmul(c.h.view().t(), d_pn.view()).data);
            let mut db2 = vec![0.0; dt];
            d_pn.col_sums_into(&mut db2);
            g.accumulate(p, layer.b2, &db2);
            g.accumulate(p, layer.w1, &matmul(c.p_mid.view().t(), d_h.view()).data);
            let mut db1 = vec![0.0; hid];
            d_h.col_sums_into(&mut db1);
            g.accumulate(p, layer.b1, &db1);
        }

        let mut d_p = d_mid.clone();
        let mut d_x = d_xn.clone();
        if !c.masked {
            // tokens attend to regions: p_mid = p + B·Vv
            let mut d_b = matmul(d_mid.view(), c.vv.view().t());
            let d_vv = matmul(c.attn_t2v.view().t(), d_mid.view());
            d_b = softmax_rows_backward(&c.attn_t2v, &d_b);
            d_b.data.iter_mut().for_each(|v| *v *= scale);
            let d_qt = matmul(d_b.view(), c.kv.view());
            let d_kv = matmul(d_b.view().t(), c.qt.view());
            gemm(1.0, d_qt.view(), w(layer.wq_t, dt, dt).t(), 1.0, &mut d_p);
            gemm(1.0, d_kv.view(), w(layer.wk_v, di, dt).t(), 1.0, &mut d_x);
            gemm(1.0, d_vv.view(), w(layer.wv_v, di, dt).t(), 1.0, &mut d_x);

            // regions attend to tokens: xn = x + A·Vt
            let mut d_a = matmul(d_xn.view(), c.vt.view().t());
            let d_vt = matmul(c.attn_v2t.view().t(), d_xn.view());
            d_a = softmax_rows_backward(&c.attn_v2t, &d_a);
            d_a.data.iter_mut().for_each(|v| *v *= scale);
            let d_qv = matmul(d_a.view(), c.kt.view());
            let d_kt = matmul(d_a.view().t(), c.qv.view());
            gemm(1.0, d_qv.view(), w(layer.wq_v, di, dt).t(), 1.0, &mut d_x);
            gemm(1.0, d_kt.view(), w(layer.wk_t, dt, dt).t(), 1.0, &mut d_p);
            gemm(1.0, d_vt.view(), w(layer.wv_t, dt, di).t(), 1.0, &mut d_p);

            if let Some(g) = grads.as_deref_mut() {
                g.accumulate(p, layer.wq_t, &matmul(c.p.view().t(), d_qt.view()).data);
                g.accumulate(p, layer.wk_v, &matmul(c.x.view().t(), d_kv.view()).data);
                g.accumulate(p, layer.wv_v, &matmul(c.x.view().t(), d_vv.view()).data);
                g.accumulate(p, layer.wq_v, &matmul(c.x.view().t(), d_qv.view()).data);
                g.accumulate(p, layer.wk_t, &matmul(c.p.view().t(), d_kt.view()).data);
                g.accumulate(p, layer.wv_t, &matmul(c.p.view().t(), d_vt.view()).data);
            }
        }

        // residual convs: r' = r + relu(conv(r))
        let rows: Vec<usize> = c.grids.iter().map(|(h, w)| h * w).collect();
        let d_res = d_x.split_rows(&rows);
        let mut d_prev = Vec::with_capacity(rows.len());
        for (j, conv) in layer.convs.iter().enumerate() {
            let (h, wd) = c.grids[j];
            let mut d_pre = d_res[j].clone();
            for (d, pre) in d_pre.data.iter_mut().zip(&c.conv_pre[j].data) {
                if *pre <= 0.0 {
                    *d = 0.0;
                }
            }
            let dx = conv.backward(p, &d_pre, &c.conv_patches[j], h, wd, grads.as_deref_mut(), need_regions);
            let mut dr = d_res[j].clone();
            if let Some(dx) = dx {
                dr.add_assign(&dx);
            }
            d_prev.push(dr);
        }
        (Mat::vstack(&d_prev.iter().collect::<Vec<_>>()), d_p)
    }

    fn visual_backward(&self, cache: &ForwardCache, d_r0: Mat, g: &mut Grads) {
        let p = &self.params;
        let mut d_scales = d_r0.split_rows(&self.config.scale_rows());
        for (k, layer) in self.layout.pyramid.iter().enumerate().rev() {
            let c = &cache.pyramid[k];
            let mut d_pre = d_scales[k + 1].clone();
            for (d, o) in d_pre.data.iter_mut().zip(&c.out.data) {
                if *o <= 0.0 {
                    *d = 0.0;
                }
            }
            let dx = layer
                .backward(p, &d_pre, &c.patches, c.h, c.w, Some(g), true)
                .expect("input gradient");
            d_scales[k].add_assign(&dx);
        }
        let mut d = d_scales.swap_remove(0);
        for (k, layer) in self.layout.stem.iter().enumerate().rev() {
            let c = &cache.stem[k];
            for (dv, o) in d.data.iter_mut().zip(&c.out.data) {
                if *o <= 0.0 {
                    *dv = 0.0;
                }
            }
            let dx = layer.backward(p, &d, &c.patches, c.h, c.w, Some(g), k > 0);
            match dx {
                Some(dx) => d = dx,
                None => break,
            }
        }
    }
}
