//! Support-image preprocessing and assembly of the prompt `P^0` from text
//! rows plus textualized support rows.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Result, VistexError};
use crate::fusion::{fuse_shots_routed, fuse_stages_routed, FusionMode, FusionRoute, TextualizedToken};
use crate::linalg::Mat;
use crate::mstb::{Mstb, StageTokenCache};
use crate::params::Grads;
use crate::synthdata::{AnnotatedImage, BBox};
use crate::toyovlm::{MultiScaleFeatures, TokenKind, TokenSequence, ToyOvlm, OOV_TOKEN};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptEngineering {
    Baseline,
    BgBlur,
    Crop,
    CropContext,
    Outline,
    DyeRed,
}

impl PromptEngineering {
    pub const ALL: [PromptEngineering; 6] = [
        Self::Baseline,
        Self::BgBlur,
        Self::Crop,
        Self::CropContext,
        Self::Outline,
        Self::DyeRed,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Baseline => "baseline",
            Self::BgBlur => "bg_blur",
            Self::Crop => "crop",
            Self::CropContext => "crop_context",
            Self::Outline => "outline",
            Self::DyeRed => "dye_red",
        }
    }
}

impl fmt::Display for PromptEngineering {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PromptEngineering {
    type Err = VistexError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| VistexError::InvalidConfig(format!("unknown prompt engineering method {s:?}")))
    }
}

pub const SHADOW: f64 = 0.1;
pub const BLUR_TAPS: usize = 15;
pub const BLUR_SIGMA: f64 = 3.0;
pub const CONTEXT_PX: f64 = 10.0;

/// A support image with the boxes its prompt is built around.
#[derive(Clone, Debug, PartialEq)]
pub struct SupportExemplar {
    pub image: AnnotatedImage,
    pub target_class: usize,
    pub target_boxes: Vec<BBox>,
    pub method: PromptEngineering,
}

impl SupportExemplar {
    /// Uses every box of `target_class` in the image.
    pub fn new(image: AnnotatedImage, target_class: usize, method: PromptEngineering) -> Result<Self> {
        let target_boxes = image.boxes_of(target_class);
        if target_boxes.is_empty() {
            return Err(VistexError::InvalidInput(format!(
                "image {} has no box of class {target_class}",
                image.id
            )));
        }
        Ok(Self {
            image,
            target_class,
            target_boxes,
            method,
        })
    }

    pub fn engineered_pixels(&self) -> Result<Vec<f64>> {
        engineer_prompt(&self.image, &self.target_boxes, self.method)
    }
}

fn pixel_in_any(boxes: &[BBox], x: usize, y: usize) -> bool {
    let (cx, cy) = (x as f64 + 0.5, y as f64 + 0.5);
    boxes.iter().any(|b| b.contains(cx, cy))
}

/// Normalized 1-D Gaussian taps, centre at index `BLUR_TAPS / 2`.
pub fn gaussian_taps() -> [f64; BLUR_TAPS] {
    let r = (BLUR_TAPS / 2) as f64;
    let mut k = [0.0; BLUR_TAPS];
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - r;
        *v = (-d * d / (2.0 * BLUR_SIGMA * BLUR_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable Gaussian blur; taps falling outside the image are dropped and
/// the remaining weights renormalized.
fn gaussian_blur(pixels: &[f64], size: usize) -> Vec<f64> {
    let k = gaussian_taps();
    let r = (BLUR_TAPS / 2) as isize;
    let n = size as isize;
    let pass = |src: &[f64], horizontal: bool| {
        let mut out = vec![0.0; src.len()];
        for y in 0..n {
            for x in 0..n {
                let mut acc = [0.0; 3];
                let mut wsum = 0.0;
                for t in -r..=r {
                    let (sx, sy) = if horizontal { (x + t, y) } else { (x, y + t) };
                    if sx < 0 || sy < 0 || sx >= n || sy >= n {
                        continue;
                    }
                    let w = k[(t + r) as usize];
                    let base = ((sy * n + sx) * 3) as usize;
                    for c in 0..3 {
                        acc[c] += w * src[base + c];
                    }
                    wsum += w;
                }
                let base = ((y * n + x) * 3) as usize;
                for c in 0..3 {
                    out[base + c] = acc[c] / wsum;
                }
            }
        }
        out
    };
    pass(&pass(pixels, true), false)
}

fn bilinear_resize(src: &[f64], sw: usize, sh: usize, size: usize) -> Vec<f64> {
    let mut out = vec![0.0; size * size * 3];
    let sample = |x: usize, y: usize, c: usize| src[(y * sw + x) * 3 + c];
    for y in 0..size {
        let fy = ((y as f64 + 0.5) * sh as f64 / size as f64 - 0.5).clamp(0.0, (sh - 1) as f64);
        let (y0, ty) = (fy.floor() as usize, fy.fract());
        let y1 = (y0 + 1).min(sh - 1);
        for x in 0..size {
            let fx = ((x as f64 + 0.5) * sw as f64 / size as f64 - 0.5).clamp(0.0, (sw - 1) as f64);
            let (x0, tx) = (fx.floor() as usize, fx.fract());
            let x1 = (x0 + 1).min(sw - 1);
            for c in 0..3 {
                let top = sample(x0, y0, c) * (1.0 - tx) + sample(x1, y0, c) * tx;
                let bot = sample(x0, y1, c) * (1.0 - tx) + sample(x1, y1, c) * tx;
                out[(y * size + x) * 3 + c] = top * (1.0 - ty) + bot * ty;
            }
        }
    }
    out
}

/// Integer pixel span `[lo, hi)` covered by a box, at least one pixel wide.
fn pixel_span(lo: f64, hi: f64, size: usize) -> (usize, usize) {
    let a = (lo.floor().max(0.0) as usize).min(size - 1);
    let b = (hi.ceil() as usize).clamp(a + 1, size);
    (a, b)
}

fn crop_resize(pixels: &[f64], size: usize, region: &BBox) -> Vec<f64> {
    let (x0, x1) = pixel_span(region.x0, region.x1, size);
    let (y0, y1) = pixel_span(region.y0, region.y1, size);
    let (w, h) = (x1 - x0, y1 - y0);
    let mut sub = Vec::with_capacity(w * h * 3);
    for y in y0..y1 {
        sub.extend_from_slice(&pixels[(y * size + x0) * 3..(y * size + x1) * 3]);
    }
    bilinear_resize(&sub, w, h, size)
}

/// Preprocesses a support image around its target boxes.
pub fn engineer_prompt(image: &AnnotatedImage, target_boxes: &[BBox], method: PromptEngineering) -> Result<Vec<f64>> {
    let size = image.size;
    if target_boxes.is_empty() {
        return Err(VistexError::InvalidInput("no target boxes".into()));
    }
    if image.pixels.len() != size * size * 3 {
        return Err(VistexError::Shape(format!("image buffer {} != {size}x{size}x3", image.pixels.len())));
    }
    if let Some(b) = target_boxes.iter().find(|b| !b.is_valid_within(size as f64, size as f64)) {
        return Err(VistexError::InvalidInput(format!("box {b:?} is degenerate or out of bounds")));
    }
    let px = &image.pixels;
    let union = target_boxes.iter().skip(1).fold(target_boxes[0], |u, b| u.union(b));
    Ok(match method {
        PromptEngineering::Baseline => px.clone(),
        PromptEngineering::BgBlur => {
            let shaded: Vec<f64> = px.iter().map(|v| v * (1.0 - SHADOW)).collect();
            let blurred = gaussian_blur(&shaded, size);
            let mut out = px.clone();
            for y in 0..size {
                for x in 0..size {
                    if !pixel_in_any(target_boxes, x, y) {
                        let i = (y * size + x) * 3;
                        out[i..i + 3].copy_from_slice(&blurred[i..i + 3]);
                    }
                }
            }
            out
        }
        PromptEngineering::Crop => crop_resize(px, size, &union),
        PromptEngineering::CropContext => {
            let s = size as f64;
            let grown = BBox::new(
                (union.x0 - CONTEXT_PX).max(0.0),
                (union.y0 - CONTEXT_PX).max(0.0),
                (union.x1 + CONTEXT_PX).min(s),
                (union.y1 + CONTEXT_PX).min(s),
            );
            crop_resize(px, size, &grown)
        }
        PromptEngineering::Outline => {
            let mut out = px.clone();
            for b in target_boxes {
                let (x0, x1) = pixel_span(b.x0, b.x1, size);
                let (y0, y1) = pixel_span(b.y0, b.y1, size);
                for y in y0..y1 {
                    for x in x0..x1 {
                        if y == y0 || y + 1 == y1 || x == x0 || x + 1 == x1 {
                            let i = (y * size + x) * 3;
                            out[i..i + 3].copy_from_slice(&[1.0, 0.0, 0.0]);
                        }
                    }
                }
            }
            out
        }
        PromptEngineering::DyeRed => {
            let mut out = vec![0.0; px.len()];
            for y in 0..size {
                for x in 0..size {
                    let i = (y * size + x) * 3;
                    let g = 0.299 * px[i] + 0.587 * px[i + 1] + 0.114 * px[i + 2];
                    let v = if pixel_in_any(target_boxes, x, y) {
                        [0.5 + 0.5 * g, 0.5 * g, 0.5 * g]
                    } else {
                        [g, g, g]
                    };
                    out[i..i + 3].copy_from_slice(&v);
                }
            }
            out
        }
    })
}

/// Text rows followed by each class's visual rows (classes ascending).
pub fn assemble_prompt(text_tokens: &TokenSequence, per_class_shot_tokens: &BTreeMap<usize, Mat>) -> Result<TokenSequence> {
    let mut out = text_tokens.clone();
    for (&class, rows) in per_class_shot_tokens {
        if !text_tokens.class_map.contains(&Some(class)) {
            return Err(VistexError::InvalidPrompt(format!("shot tokens for class {class} absent from the text prompt")));
        }
        if rows.cols != text_tokens.width() {
            return Err(VistexError::Shape(format!(
                "visual rows of width {} for text width {}",
                rows.cols,
                text_tokens.width()
            )));
        }
        for r in 0..rows.rows {
            out.push(rows.row(r), Some(class), TokenKind::Visual, None)?;
        }
    }
    Ok(out)
}

/// Knobs of the support → token path that are not learned.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default)]
pub struct PromptSettings {
    /// Stages whose tokens are fused; `None` means `0..=L`.
    pub stages: Option<Vec<usize>>,
    pub msf: FusionMode,
    pub shot_fusion: FusionMode,
    pub prompt_eng: PromptEngineering,
}

impl Default for PromptSettings {
    fn default() -> Self {
        Self {
            stages: None,
            msf: FusionMode::Max,
            shot_fusion: FusionMode::Concat,
            prompt_eng: PromptEngineering::BgBlur,
        }
    }
}

impl PromptSettings {
    pub fn stage_list(&self, l: usize) -> Result<Vec<usize>> {
        let s = self.stages.clone().unwrap_or_else(|| (0..=l).collect());
        if s.is_empty() {
            return Err(VistexError::InvalidConfig("empty stage subset".into()));
        }
        if let Some(&bad) = s.iter().find(|&&i| i > l) {
            return Err(VistexError::InvalidStage { index: bad, max: l });
        }
        Ok(s)
    }
}

/// Frozen-detector features `R^0..R^L` of one engineered support image.
#[derive(Clone, Debug)]
pub struct SupportFeatures {
    pub support_id: usize,
    pub class_id: usize,
    pub stages: Vec<MultiScaleFeatures>,
}

/// Runs the frozen detector on an engineered support image. Every support
/// is encoded under the same out-of-vocabulary prompt, so base and novel
/// exemplars go through identical computation and the class name never
/// leaks into the features.
pub fn support_features(ovlm: &ToyOvlm, exemplar: &SupportExemplar) -> Result<SupportFeatures> {
    let pixels = exemplar.engineered_pixels()?;
    let prompt = ovlm.vocab_token(OOV_TOKEN, None);
    let out = ovlm.forward(&pixels, &prompt)?;
    Ok(SupportFeatures {
        support_id: exemplar.image.id,
        class_id: exemplar.target_class,
        stages: out.features,
    })
}

pub struct ShotCache {
    stage_caches: Vec<StageTokenCache>,
    route: FusionRoute,
}

/// MSTB per selected stage, then stage fusion.
pub fn textualize_support(mstb: &Mstb, feats: &SupportFeatures, settings: &PromptSettings) -> Result<(TextualizedToken, ShotCache)> {
    let stages = settings.stage_list(mstb.ovlm.stages)?;
    let mut tokens = Vec::with_capacity(stages.len());
    let mut stage_caches = Vec::with_capacity(stages.len());
    for &i in &stages {
        let (t, c) = mstb.textualize_stage_cached(&feats.stages[i], i)?;
        tokens.push(t);
        stage_caches.push(c);
    }
    let (rows, route) = fuse_stages_routed(&tokens, settings.msf)?;
    Ok((
        TextualizedToken {
            rows,
            support_id: feats.support_id,
            class_id: feats.class_id,
        },
        ShotCache { stage_caches, route },
    ))
}

struct ClassCache {
    shots: Vec<ShotCache>,
    shot_rows: usize,
    routes: Vec<FusionRoute>,
    /// First prompt row holding this class's visual rows.
    offset: usize,
    rows: usize,
}

/// Everything needed to push `dL/dP^0` back into MSTB parameters.
pub struct PromptCache {
    classes: Vec<ClassCache>,
}

/// Builds `P^0` for text classes `(id, name)` plus the given supports, and
/// keeps the activations for the backward pass.
pub fn build_vistex_prompt(
    ovlm: &ToyOvlm,
    mstb: &Mstb,
    text_classes: &[(usize, String)],
    supports: &[&SupportFeatures],
    settings: &PromptSettings,
) -> Result<(TokenSequence, PromptCache)> {
    let text = ovlm.tokenize_text(text_classes)?;
    let mut by_class: BTreeMap<usize, Vec<&SupportFeatures>> = BTreeMap::new();
    for s in supports {
        by_class.entry(s.class_id).or_default().push(s);
    }
    let mut per_class = BTreeMap::new();
    let mut classes = Vec::new();
    let mut offset = text.len();
    for (&c, shots) in &by_class {
        let mut toks = Vec::with_capacity(shots.len());
        let mut caches = Vec::with_capacity(shots.len());
        for s in shots {
            let (t, cache) = textualize_support(mstb, s, settings)?;
            toks.push(t);
            caches.push(cache);
        }
        let shot_rows = toks[0].rows.rows;
        let (rows, routes) = fuse_shots_routed(&toks, settings.shot_fusion)?;
        classes.push(ClassCache {
            shots: caches,
            shot_rows,
            routes,
            offset,
            rows: rows.rows,
        });
        offset += rows.rows;
        per_class.insert(c, rows);
    }
    Ok((assemble_prompt(&text, &per_class)?, PromptCache { classes }))
}

impl PromptCache {
    /// Accumulates MSTB gradients from `d_prompt` (one row per prompt row).
    pub fn backward(&self, mstb: &Mstb, d_prompt: &Mat, grads: &mut Grads) {
        let width = d_prompt.cols;
        for cc in &self.classes {
            let block = Mat::from_vec(
                cc.rows,
                width,
                d_prompt.data[cc.offset * width..(cc.offset + cc.rows) * width].to_vec(),
            );
            let k = cc.shots.len();
            let mut d_shots = vec![Mat::zeros(cc.shot_rows, width); k];
            match cc.routes.as_slice() {
                [FusionRoute::Stack] => {
                    for (s, d) in d_shots.iter_mut().enumerate() {
                        d.data.copy_from_slice(&block.data[s * cc.shot_rows * width..(s + 1) * cc.shot_rows * width]);
                    }
                }
                routes => {
                    for (r, route) in routes.iter().enumerate() {
                        let d_out = Mat::from_vec(1, width, block.row(r).to_vec());
                        for (s, g) in route.backward(&d_out, k).into_iter().enumerate() {
                            d_shots[s].row_mut(r).copy_from_slice(&g);
                        }
                    }
                }
            }
            for (shot, d) in cc.shots.iter().zip(&d_shots) {
                let n = shot.stage_caches.len();
                for (cache, g) in shot.stage_caches.iter().zip(shot.route.backward(d, n)) {
                    mstb.backward_stage(cache, &g, grads);
                }
            }
        }
    }
}
