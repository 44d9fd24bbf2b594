//! AP50 metrics, the few-shot evaluation protocol, and the object/text
//! alignment histogram.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Result, VistexError};
use crate::exec::Exec;
use crate::mstb::Mstb;
use crate::prompting::{build_vistex_prompt, support_features, PromptSettings, SupportExemplar, SupportFeatures};
use crate::synthdata::{sample_episode, BBox, Dataset, EpisodeSpec};
use crate::toyovlm::{decode_detections, DecodeParams, Detection, TokenSequence, ToyOvlm};

/// Intersection over union; zero when either box has no area.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    iou_checked(a, b).0
}

/// IoU plus a flag set when a degenerate box forced the result to zero.
pub fn iou_checked(a: &BBox, b: &BBox) -> (f64, bool) {
    let (aa, ab) = (a.area(), b.area());
    if aa <= 0.0 || ab <= 0.0 {
        return (0.0, true);
    }
    let iw = (a.x1.min(b.x1) - a.x0.max(b.x0)).max(0.0);
    let ih = (a.y1.min(b.y1) - a.y0.max(b.y0)).max(0.0);
    let inter = iw * ih;
    ((inter / (aa + ab - inter)).clamp(0.0, 1.0), false)
}

/// One scored box of a single class, tagged with its image.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScoredBox {
    pub image_id: usize,
    pub bbox: BBox,
    pub score: f64,
}

/// AP of one class. Detections are ranked by descending score (stable for
/// ties); each claims the unmatched ground-truth box of its image with the
/// highest IoU, if that IoU reaches `threshold`. Precision is made monotone
/// from the right and integrated over every recall step. `None` when the
/// class has no ground truth.
pub fn class_average_precision(detections: &[ScoredBox], ground_truth: &BTreeMap<usize, Vec<BBox>>, threshold: f64) -> Option<f64> {
    let n_gt: usize = ground_truth.values().map(Vec::len).sum();
    if n_gt == 0 {
        return None;
    }
    let mut ranked: Vec<&ScoredBox> = detections.iter().collect();
    ranked.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut taken: BTreeMap<usize, Vec<bool>> = ground_truth.iter().map(|(k, v)| (*k, vec![false; v.len()])).collect();
    let mut tp = 0usize;
    let mut precision = Vec::with_capacity(ranked.len());
    let mut recall = Vec::with_capacity(ranked.len());
    for (k, d) in ranked.iter().enumerate() {
        if let (Some(gts), Some(used)) = (ground_truth.get(&d.image_id), taken.get_mut(&d.image_id)) {
            let mut best: Option<(usize, f64)> = None;
            for (g, gt) in gts.iter().enumerate() {
                if used[g] {
                    continue;
                }
                let o = iou(&d.bbox, gt);
                if o >= threshold && best.is_none_or(|(_, b)| o > b) {
                    best = Some((g, o));
                }
            }
            if let Some((g, _)) = best {
                used[g] = true;
                tp += 1;
            }
        }
        precision.push(tp as f64 / (k + 1) as f64);
        recall.push(tp as f64 / n_gt as f64);
    }
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let mut ap = 0.0;
    let mut prev = 0.0;
    for (p, r) in precision.iter().zip(&recall) {
        ap += (r - prev) * p;
        prev = *r;
    }
    Some(ap)
}

/// Ground truth of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTruth {
    pub image_id: usize,
    pub boxes: Vec<BBox>,
    pub labels: Vec<usize>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ApResult {
    pub per_class: BTreeMap<usize, f64>,
    /// Classes without any ground truth; left out of every mean.
    pub excluded: Vec<usize>,
}

/// Per-class AP over `classes`.
pub fn average_precision(detections: &BTreeMap<usize, Vec<Detection>>, truth: &[ImageTruth], classes: &[usize], threshold: f64) -> ApResult {
    let mut out = ApResult::default();
    for &c in classes {
        let mut gt: BTreeMap<usize, Vec<BBox>> = BTreeMap::new();
        for t in truth {
            for (b, &l) in t.boxes.iter().zip(&t.labels) {
                if l == c {
                    gt.entry(t.image_id).or_default().push(*b);
                }
            }
        }
        let scored: Vec<ScoredBox> = detections
            .iter()
            .flat_map(|(&image_id, ds)| {
                ds.iter().filter(|d| d.class_id == c).map(move |d| ScoredBox {
                    image_id,
                    bbox: d.bbox,
                    score: d.score,
                })
            })
            .collect();
        match class_average_precision(&scored, &gt, threshold) {
            Some(ap) => {
                out.per_class.insert(c, ap);
            }
            None => out.excluded.push(c),
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    ZeroShot,
    Vistex,
    FullFt,
}

impl EvalMode {
    pub fn name(self) -> &'static str {
        match self {
            Self::ZeroShot => "zero_shot",
            Self::Vistex => "vistex",
            Self::FullFt => "full_ft",
        }
    }
}

impl fmt::Display for EvalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EvalMode {
    type Err = VistexError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zs" | "zero_shot" => Ok(Self::ZeroShot),
            "vistex" => Ok(Self::Vistex),
            "ff" | "full_ft" => Ok(Self::FullFt),
            _ => Err(VistexError::InvalidConfig(format!("unknown eval mode {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mode: EvalMode,
    #[serde(rename = "K")]
    pub k: usize,
    pub seed: u64,
    #[serde(rename = "AP50")]
    pub ap50: Option<f64>,
    #[serde(rename = "bAP50")]
    pub bap50: Option<f64>,
    #[serde(rename = "nAP50")]
    pub nap50: Option<f64>,
    pub per_class: BTreeMap<usize, f64>,
    pub config_hash: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub excluded_classes: Vec<usize>,
}

fn mean(v: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

impl MetricsReport {
    pub fn from_ap(mode: EvalMode, k: usize, seed: u64, ap: ApResult, novel: &BTreeSet<usize>) -> Self {
        let pc = &ap.per_class;
        Self {
            mode,
            k,
            seed,
            ap50: mean(pc.values().copied()),
            bap50: mean(pc.iter().filter(|(c, _)| !novel.contains(c)).map(|(_, v)| *v)),
            nap50: mean(pc.iter().filter(|(c, _)| novel.contains(c)).map(|(_, v)| *v)),
            per_class: ap.per_class,
            config_hash: String::new(),
            excluded_classes: ap.excluded,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }
}

#[derive(Clone, Copy, Debug)]
pub struct EvalOptions {
    pub decode: DecodeParams,
    pub iou_threshold: f64,
    pub seed: u64,
    pub exec: Exec,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            decode: DecodeParams::default(),
            iou_threshold: 0.5,
            seed: 0,
            exec: Exec::default(),
        }
    }
}

/// Mixed into the run seed so evaluation episodes do not replay the
/// training draws.
const EPISODE_SALT: u64 = 0x5EED_E915;

/// The evaluation episode of a run: `k` shots for every class.
pub fn eval_episode(dataset: &Dataset, k: usize, seed: u64) -> Result<EpisodeSpec> {
    let all: Vec<usize> = dataset.manifest.classes.iter().map(|c| c.id).collect();
    sample_episode(&dataset.manifest, k, &all, seed ^ EPISODE_SALT)
}

/// `(class id, name)` for every class of the episode.
pub fn episode_text_classes(dataset: &Dataset, episode: &EpisodeSpec) -> Vec<(usize, String)> {
    let names = dataset.class_names();
    episode.class_subset.iter().map(|c| (*c, names[c].clone())).collect()
}

/// Frozen-detector features of every support image of the episode.
pub fn episode_support_features(ovlm: &ToyOvlm, dataset: &Dataset, episode: &EpisodeSpec, settings: &PromptSettings, exec: Exec) -> Result<Vec<SupportFeatures>> {
    let jobs: Vec<(usize, usize)> = episode
        .support_ids
        .iter()
        .flat_map(|(&c, ids)| ids.iter().map(move |&id| (c, id)))
        .collect();
    exec.map(&jobs, |&(c, id)| {
        let ex = SupportExemplar::new(dataset.image(id)?, c, settings.prompt_eng)?;
        support_features(ovlm, &ex)
    })
    .into_iter()
    .collect()
}

/// The prompt a mode evaluates with.
pub fn episode_prompt(ovlm: &ToyOvlm, mstb: Option<&Mstb>, dataset: &Dataset, episode: &EpisodeSpec, mode: EvalMode, settings: &PromptSettings, exec: Exec) -> Result<TokenSequence> {
    let text = episode_text_classes(dataset, episode);
    match mode {
        EvalMode::ZeroShot | EvalMode::FullFt => ovlm.tokenize_text(&text),
        EvalMode::Vistex => {
            let mstb = mstb.ok_or_else(|| VistexError::InvalidConfig("vistex mode needs an MSTB checkpoint".into()))?;
            if mstb.ovlm != ovlm.config {
                return Err(VistexError::InvalidConfig("MSTB was built for a different detector config".into()));
            }
            let feats = episode_support_features(ovlm, dataset, episode, settings, exec)?;
            let refs: Vec<&SupportFeatures> = feats.iter().collect();
            Ok(build_vistex_prompt(ovlm, mstb, &text, &refs, settings)?.0)
        }
    }
}

/// Decoded detections for every query image, keyed by image id.
pub fn detect_queries(ovlm: &ToyOvlm, prompt: &TokenSequence, dataset: &Dataset, query_ids: &[usize], params: &DecodeParams, exec: Exec) -> Result<BTreeMap<usize, Vec<Detection>>> {
    let results = exec.map(query_ids, |&id| {
        let img = dataset.image(id)?;
        let out = ovlm.forward(&img.pixels, prompt)?;
        Ok::<_, VistexError>((id, decode_detections(&out.grounding, &prompt.class_map, params)?))
    });
    results.into_iter().collect()
}

pub fn episode_truth(dataset: &Dataset, ids: &[usize]) -> Result<Vec<ImageTruth>> {
    ids.iter()
        .map(|&id| {
            let r = dataset.record(id)?;
            Ok(ImageTruth {
                image_id: id,
                boxes: r.boxes.clone(),
                labels: r.labels.clone(),
            })
        })
        .collect()
}

/// Runs one evaluation episode over base and novel classes.
pub fn evaluate_fsod(
    ovlm: &ToyOvlm,
    mstb: Option<&Mstb>,
    dataset: &Dataset,
    episode: &EpisodeSpec,
    mode: EvalMode,
    settings: &PromptSettings,
    opts: &EvalOptions,
) -> Result<MetricsReport> {
    episode.check()?;
    let prompt = episode_prompt(ovlm, mstb, dataset, episode, mode, settings, opts.exec)?;
    let dets = detect_queries(ovlm, &prompt, dataset, &episode.query_ids, &opts.decode, opts.exec)?;
    let truth = episode_truth(dataset, &episode.query_ids)?;
    let ap = average_precision(&dets, &truth, &episode.class_subset, opts.iou_threshold);
    let novel: BTreeSet<usize> = dataset.manifest.split.novel.iter().copied().collect();
    Ok(MetricsReport::from_ap(mode, episode.k, opts.seed, ap, &novel))
}

/// One object/name pair for the alignment analysis.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignmentSample {
    pub image_id: usize,
    pub bbox: BBox,
    pub class_id: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DivergenceStats {
    pub sym_kl: f64,
    pub emd: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AlignmentReport {
    pub edges: Vec<f64>,
    pub freq_a: Vec<f64>,
    pub freq_b: Vec<f64>,
    pub stats: DivergenceStats,
}

impl AlignmentReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("bin_left,bin_right,freq_A,freq_B\n");
        for i in 0..self.freq_a.len() {
            s += &format!("{},{},{},{}\n", self.edges[i], self.edges[i + 1], self.freq_a[i], self.freq_b[i]);
        }
        s
    }
}

pub fn cosine(u: &[f64], v: &[f64]) -> f64 {
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        0.0
    } else {
        (dot / (nu * nv)).clamp(-1.0, 1.0)
    }
}

/// Base-split objects, one per annotated box of a base class, in image order.
pub fn base_alignment_samples(dataset: &Dataset) -> Result<Vec<AlignmentSample>> {
    let mut out = Vec::new();
    for id in dataset.base_image_ids() {
        let rec = dataset.record(id)?;
        for (b, &l) in rec.boxes.iter().zip(&rec.labels) {
            out.push(AlignmentSample {
                image_id: id,
                bbox: *b,
                class_id: l,
            });
        }
    }
    Ok(out)
}

/// Cosine similarity between each object's projected final-stage region
/// feature (scale 0 cell under the box centre) and the final-stage token of
/// its class, with every base name in the prompt.
pub fn alignment_cosines(ovlm: &ToyOvlm, dataset: &Dataset, samples: &[AlignmentSample], exec: Exec) -> Result<Vec<f64>> {
    let names = dataset.class_names();
    let base = &dataset.manifest.split.base;
    let text: Vec<(usize, String)> = base.iter().map(|c| (*c, names[c].clone())).collect();
    let prompt = ovlm.tokenize_text(&text)?;
    let mut by_image: BTreeMap<usize, Vec<&AlignmentSample>> = BTreeMap::new();
    for s in samples {
        if !base.contains(&s.class_id) {
            return Err(VistexError::Contamination(format!("alignment sample of novel class {}", s.class_id)));
        }
        by_image.entry(s.image_id).or_default().push(s);
    }
    let groups: Vec<(usize, Vec<&AlignmentSample>)> = by_image.into_iter().collect();
    let cfg = &ovlm.config;
    let per_image = exec.map(&groups, |(id, ss)| {
        let img = dataset.image(*id)?;
        let out = ovlm.forward(&img.pixels, &prompt)?;
        let z = &out.region_embeddings[0];
        let tokens = out.prompts.last().expect("final prompt");
        let grid = out.grounding.grids[0];
        Ok::<_, VistexError>(
            ss.iter()
                .map(|s| {
                    let cx = ((s.bbox.x0 + s.bbox.x1) / 2.0 / grid.stride_x).floor() as usize;
                    let cy = ((s.bbox.y0 + s.bbox.y1) / 2.0 / grid.stride_y).floor() as usize;
                    let cell = cy.min(cfg.grid_h - 1) * grid.w + cx.min(cfg.grid_w - 1);
                    let t = prompt.class_map.iter().position(|c| *c == Some(s.class_id)).expect("base class in prompt");
                    cosine(z.row(cell), tokens.row(t))
                })
                .collect::<Vec<_>>(),
        )
    });
    let mut out = Vec::with_capacity(samples.len());
    for r in per_image {
        out.extend(r?);
    }
    Ok(out)
}

/// Relative frequencies over `bins` equal bins spanning `[-1, 1]`.
pub fn histogram(values: &[f64], bins: usize) -> Vec<f64> {
    let mut h = vec![0.0; bins];
    for v in values {
        let i = (((v + 1.0) / 2.0 * bins as f64).floor().max(0.0) as usize).min(bins - 1);
        h[i] += 1.0;
    }
    let n = values.len().max(1) as f64;
    h.iter_mut().for_each(|x| *x /= n);
    h
}

/// Symmetric KL (after adding `1e-10` to every bin and renormalizing) and
/// the 1-D earth mover's distance.
pub fn divergence(p: &[f64], q: &[f64], bin_width: f64) -> DivergenceStats {
    const EPS: f64 = 1e-10;
    let norm = 1.0 + EPS * p.len() as f64;
    let mut sym_kl = 0.0;
    let (mut cp, mut cq, mut emd) = (0.0, 0.0, 0.0);
    for (a, b) in p.iter().zip(q) {
        let (a2, b2) = ((a + EPS) / norm, (b + EPS) / norm);
        sym_kl += a2 * (a2 / b2).ln() + b2 * (b2 / a2).ln();
        cp += a;
        cq += b;
        emd += (cp - cq).abs() * bin_width;
    }
    DivergenceStats { sym_kl, emd }
}

/// Compares two detectors' object/text alignment on the same samples.
pub fn alignment_histogram(ovlm_a: &ToyOvlm, ovlm_b: &ToyOvlm, dataset: &Dataset, samples: &[AlignmentSample], bins: usize, exec: Exec) -> Result<AlignmentReport> {
    if samples.is_empty() {
        return Err(VistexError::InvalidInput("no alignment samples".into()));
    }
    if bins == 0 {
        return Err(VistexError::InvalidInput("bins must be positive".into()));
    }
    if ovlm_a.config != ovlm_b.config || ovlm_a.vocab != ovlm_b.vocab {
        return Err(VistexError::InvalidInput("detectors differ in architecture or vocabulary".into()));
    }
    let ca = alignment_cosines(ovlm_a, dataset, samples, exec)?;
    let cb = alignment_cosines(ovlm_b, dataset, samples, exec)?;
    let width = 2.0 / bins as f64;
    let edges = (0..=bins).map(|i| -1.0 + i as f64 * width).collect();
    let (freq_a, freq_b) = (histogram(&ca, bins), histogram(&cb, bins));
    let stats = divergence(&freq_a, &freq_b, width);
    Ok(AlignmentReport {
        edges,
        freq_a,
        freq_b,
        stats,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iou_examples() {
        let a = BBox::new(0.0, 0.0, 2.0, 2.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &BBox::new(5.0, 5.0, 6.0, 6.0)), 0.0);
        assert!((iou(&a, &BBox::new(1.0, 1.0, 3.0, 3.0)) - 1.0 / 7.0).abs() < 1e-15);
        let (v, flag) = iou_checked(&a, &BBox::new(1.0, 1.0, 1.0, 3.0));
        assert_eq!((v, flag), (0.0, true));
    }

    fn one_gt() -> BTreeMap<usize, Vec<BBox>> {
        BTreeMap::from([(0, vec![BBox::new(0.0, 0.0, 10.0, 10.0)])])
    }

    #[test]
    fn ap_examples() {
        let gt = one_gt();
        let tp = ScoredBox {
            image_id: 0,
            bbox: BBox::new(0.0, 0.0, 10.0, 10.0),
            score: 0.8,
        };
        assert_eq!(class_average_precision(&[tp], &gt, 0.5), Some(1.0));
        assert_eq!(class_average_precision(&[], &gt, 0.5), Some(0.0));
        let fp = ScoredBox {
            image_id: 0,
            bbox: BBox::new(30.0, 30.0, 40.0, 40.0),
            score: 0.9,
        };
        assert_eq!(class_average_precision(&[fp, tp], &gt, 0.5), Some(0.5));
        assert_eq!(class_average_precision(&[fp], &BTreeMap::new(), 0.5), None);
    }

    #[test]
    fn histogram_self_divergence_is_zero() {
        let h = histogram(&[-1.0, -0.2, 0.3, 1.0, 0.99], 10);
        assert!((h.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(h[9], 0.4);
        let d = divergence(&h, &h, 0.2);
        assert_eq!((d.sym_kl, d.emd), (0.0, 0.0));
    }

    #[test]
    fn cosine_examples() {
        assert!((cosine(&[0.6, 0.8], &[0.6, 0.8]) - 1.0).abs() < 1e-15);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]), 0.0);
        assert_eq!(cosine(&[0.0, 0.0], &[0.0, 1.0]), 0.0);
    }

    #[test]
    fn eval_mode_aliases() {
        assert_eq!("zs".parse::<EvalMode>().unwrap(), EvalMode::ZeroShot);
        assert_eq!("ff".parse::<EvalMode>().unwrap(), EvalMode::FullFt);
        assert!("x".parse::<EvalMode>().is_err());
    }
}
