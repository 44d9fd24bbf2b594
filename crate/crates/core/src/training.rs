//! Grounding loss, detector pretraining, MSTB training with the detector
//! frozen, the full fine-tuning baseline, and a finite-difference checker.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, VistexError};
use crate::exec::Exec;
use crate::linalg::Mat;
use crate::mstb::Mstb;
use crate::params::{AdamW, Grads};
use crate::prompting::{build_vistex_prompt, support_features, PromptSettings, SupportExemplar, SupportFeatures};
use crate::synthdata::{BBox, Dataset};
use crate::toyovlm::{GradTarget, GroundingOutput, OvlmConfig, TokenSequence, ToyOvlm, Vocab, OOV_TOKEN};

/// Weight of the box term.
pub const BOX_LOSS_WEIGHT: f64 = 1.0;

#[derive(Clone, Debug)]
pub struct GroundingLoss {
    pub loss: f64,
    pub d_logits: Vec<Mat>,
    pub d_deltas: Vec<Mat>,
    pub positive_cells: usize,
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Mean BCE over every (cell, token) pair plus `BOX_LOSS_WEIGHT` times the
/// mean L1 box error over positive cells and coordinates.
///
/// Token `t` is a positive target at a cell when the cell centre lies in a
/// ground-truth box of `class_map[t]`. A cell is positive when any of its
/// tokens is; its regression target is the smallest such box.
pub fn compute_grounding_loss(output: &GroundingOutput, boxes: &[BBox], labels: &[usize], class_map: &[Option<usize>]) -> Result<GroundingLoss> {
    let t = class_map.len();
    if t == 0 {
        return Err(VistexError::InvalidInput("no prompt tokens".into()));
    }
    if output.token_count() != t {
        return Err(VistexError::Shape(format!("{} logit columns for {t} tokens", output.token_count())));
    }
    let prompt_classes: BTreeSet<usize> = class_map.iter().flatten().copied().collect();
    let total_pairs: usize = output.logits.iter().map(|l| l.rows).sum::<usize>() * t;
    let inv_pairs = 1.0 / total_pairs as f64;

    let mut bce = 0.0;
    let mut d_logits = Vec::with_capacity(output.logits.len());
    let mut pos: Vec<(usize, usize, [f64; 4])> = Vec::new();
    for (j, (logits, grid)) in output.logits.iter().zip(&output.grids).enumerate() {
        let mut dl = Mat::zeros(logits.rows, t);
        for cell in 0..logits.rows {
            let (cx, cy) = grid.center(cell);
            let mut inside: BTreeSet<usize> = BTreeSet::new();
            let mut target: Option<BBox> = None;
            for (b, &l) in boxes.iter().zip(labels) {
                if prompt_classes.contains(&l) && b.contains(cx, cy) {
                    inside.insert(l);
                    if target.is_none_or(|tb| b.area() < tb.area()) {
                        target = Some(*b);
                    }
                }
            }
            let row = logits.row(cell);
            let drow = dl.row_mut(cell);
            for k in 0..t {
                let y = class_map[k].is_some_and(|c| inside.contains(&c));
                let x = row[k];
                bce += if y { softplus(-x) } else { softplus(x) };
                drow[k] = (sigmoid(x) - if y { 1.0 } else { 0.0 }) * inv_pairs;
            }
            if let Some(b) = target {
                let tgt = [
                    (cx - b.x0) / grid.stride_x,
                    (cy - b.y0) / grid.stride_y,
                    (b.x1 - cx) / grid.stride_x,
                    (b.y1 - cy) / grid.stride_y,
                ];
                pos.push((j, cell, tgt));
            }
        }
        d_logits.push(dl);
    }
    let mut d_deltas: Vec<Mat> = output.box_deltas.iter().map(|d| Mat::zeros(d.rows, 4)).collect();
    let mut l1 = 0.0;
    if !pos.is_empty() {
        let w = BOX_LOSS_WEIGHT / (4 * pos.len()) as f64;
        for (j, cell, tgt) in &pos {
            let pred = output.box_deltas[*j].row(*cell);
            let drow = d_deltas[*j].row_mut(*cell);
            for k in 0..4 {
                let e = pred[k] - tgt[k];
                l1 += e.abs();
                drow[k] = if e > 0.0 {
                    w
                } else if e < 0.0 {
                    -w
                } else {
                    0.0
                };
            }
        }
        l1 *= w;
    }
    let loss = bce * inv_pairs + l1;
    if !loss.is_finite() {
        return Err(VistexError::Numeric(format!("grounding loss is {loss}")));
    }
    Ok(GroundingLoss {
        loss,
        d_logits,
        d_deltas,
        positive_cells: pos.len(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
    pub seed: u64,
}

pub fn train_log_csv(log: &[EpochLog]) -> String {
    let mut s = String::from("epoch,loss,lr,seed\n");
    for e in log {
        s += &format!("{},{},{},{}\n", e.epoch, e.loss, e.lr, e.seed);
    }
    s
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub ovlm: OvlmConfig,
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            ovlm: OvlmConfig::default(),
            epochs: 40,
            lr: 1e-3,
            weight_decay: 0.01,
            batch_size: 8,
        }
    }
}

/// Refuses any image carrying a novel-class label.
pub fn check_no_novel(dataset: &Dataset, ids: &[usize]) -> Result<()> {
    for &id in ids {
        let r = dataset.record(id)?;
        if let Some(l) = r.labels.iter().find(|l| dataset.is_novel(**l)) {
            return Err(VistexError::Contamination(format!("image {id} carries novel class {l}")));
        }
    }
    Ok(())
}

/// `(id, name)` of every base class.
pub fn base_text_classes(dataset: &Dataset) -> Vec<(usize, String)> {
    let names = dataset.class_names();
    dataset.manifest.split.base.iter().map(|c| (*c, names[c].clone())).collect()
}

/// Base names plus the out-of-vocabulary row, which is never a positive.
pub fn pretraining_prompt(ovlm: &ToyOvlm, dataset: &Dataset) -> Result<TokenSequence> {
    let mut p = ovlm.tokenize_text(&base_text_classes(dataset))?;
    let oov = ovlm.vocab_token(OOV_TOKEN, None);
    p.push(oov.rows.row(0), None, oov.kinds[0], oov.vocab_ids[0])?;
    Ok(p)
}

fn epoch_rng(seed: u64, epoch: usize, salt: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ salt)
}

/// Loss and full-parameter gradient of one image under a text prompt.
fn image_step(ovlm: &ToyOvlm, dataset: &Dataset, id: usize, prompt: &TokenSequence) -> Result<(f64, Grads)> {
    let img = dataset.image(id)?;
    let (out, cache) = ovlm.forward_cached(&img.pixels, prompt)?;
    let l = compute_grounding_loss(&out, &img.boxes, &img.labels, &prompt.class_map)?;
    let b = ovlm.backward(&cache, &l.d_logits, &l.d_deltas, GradTarget::All);
    Ok((l.loss, b.grads.expect("all-parameter gradients")))
}

/// Trains every detector weight on `ids` with the text prompt; shared by
/// pretraining and the full fine-tuning baseline.
fn fit_text_prompt(ovlm: &mut ToyOvlm, dataset: &Dataset, ids: &[usize], epochs: usize, lr: f64, wd: f64, batch: usize, seed: u64, exec: Exec) -> Result<Vec<EpochLog>> {
    check_no_novel(dataset, ids)?;
    if batch == 0 {
        return Err(VistexError::InvalidConfig("batch size must be positive".into()));
    }
    let mut opt = AdamW::new(ovlm.params.len(), lr, wd);
    let mut log = Vec::with_capacity(epochs);
    let mut order = ids.to_vec();
    for epoch in 1..=epochs {
        order.shuffle(&mut epoch_rng(seed, epoch, 0x5EED));
        let mut total = 0.0;
        for chunk in order.chunks(batch) {
            // the prompt follows the embedding table, so rebuild it per step
            let prompt = pretraining_prompt(ovlm, dataset)?;
            let model = &*ovlm;
            let results = exec.map(chunk, |&id| image_step(model, dataset, id, &prompt));
            let mut grads = ovlm.params.zeros_like();
            for r in results {
                let (l, g) = r?;
                total += l;
                grads.add_assign(&g);
            }
            grads.scale(1.0 / chunk.len() as f64);
            opt.step(ovlm.params.data_mut(), &grads.0);
        }
        let loss = total / order.len().max(1) as f64;
        log::info!("epoch {epoch}: loss {loss:.5}");
        log.push(EpochLog { epoch, loss, lr, seed });
    }
    Ok(log)
}

/// Grounded pretraining of a fresh detector on the base split.
pub fn pretrain(dataset: &Dataset, config: &PretrainConfig, seed: u64, exec: Exec) -> Result<(ToyOvlm, Vec<EpochLog>)> {
    let ids = dataset.base_image_ids();
    if ids.is_empty() {
        return Err(VistexError::InsufficientData("base split has no images".into()));
    }
    pretrain_on(dataset, &ids, config, seed, exec)
}

/// Pretraining restricted to `ids`; fails on any novel label among them.
pub fn pretrain_on(dataset: &Dataset, ids: &[usize], config: &PretrainConfig, seed: u64, exec: Exec) -> Result<(ToyOvlm, Vec<EpochLog>)> {
    check_no_novel(dataset, ids)?;
    let names: Vec<String> = base_text_classes(dataset).into_iter().map(|(_, n)| n).collect();
    let vocab = Vocab::new(&names, config.ovlm.vocab_size)?;
    let mut ovlm = ToyOvlm::new(config.ovlm.clone(), vocab, seed)?;
    let log = fit_text_prompt(&mut ovlm, dataset, ids, config.epochs, config.lr, config.weight_decay, config.batch_size, seed, exec)?;
    Ok((ovlm, log))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Trainable {
    MstbOnly,
    AllWeights,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub k: usize,
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// Query images drawn per epoch; `None` sweeps every non-support base image.
    pub queries_per_epoch: Option<usize>,
    pub schedule: LrSchedule,
}

/// Per-epoch learning rate, starting from `TrainConfig::lr`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Half-cosine from `lr` at epoch 1 towards 0 after the last epoch.
    Cosine,
}

impl LrSchedule {
    pub fn lr_at(self, base: f64, epoch: usize, epochs: usize) -> f64 {
        match self {
            Self::Constant => base,
            Self::Cosine => 0.5 * base * (1.0 + (std::f64::consts::PI * (epoch - 1) as f64 / epochs.max(1) as f64).cos()),
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            k: 2,
            epochs: 20,
            lr: 1e-3,
            weight_decay: 0.01,
            batch_size: 8,
            queries_per_epoch: None,
            schedule: LrSchedule::default(),
        }
    }
}

/// Draws `k` distinct base-split supports per base class.
pub fn sample_base_supports(dataset: &Dataset, k: usize, rng: &mut ChaCha8Rng) -> Result<Vec<(usize, usize)>> {
    if k == 0 {
        return Err(VistexError::InvalidConfig("K must be >= 1".into()));
    }
    let base_ids: BTreeSet<usize> = dataset.base_image_ids().into_iter().collect();
    let mut used = BTreeSet::new();
    let mut out = Vec::new();
    for &c in &dataset.manifest.split.base {
        let mut pool: Vec<usize> = dataset
            .manifest
            .images_with_class(c)
            .into_iter()
            .filter(|id| base_ids.contains(id) && !used.contains(id))
            .collect();
        if pool.len() < k {
            return Err(VistexError::InsufficientData(format!("class {c} has fewer than {k} free images")));
        }
        pool.shuffle(rng);
        for &id in &pool[..k] {
            used.insert(id);
            out.push((c, id));
        }
    }
    Ok(out)
}

/// Frozen-detector features of `(class, image)` supports.
pub fn compute_support_features(ovlm: &ToyOvlm, dataset: &Dataset, supports: &[(usize, usize)], settings: &PromptSettings, exec: Exec) -> Result<Vec<SupportFeatures>> {
    exec.map(supports, |&(c, id)| {
        let ex = SupportExemplar::new(dataset.image(id)?, c, settings.prompt_eng)?;
        support_features(ovlm, &ex)
    })
    .into_iter()
    .collect()
}

/// Mean loss over `queries` and its gradient w.r.t. MSTB parameters, with
/// gradients flowing through the frozen detector.
pub fn mstb_loss_and_grad(
    ovlm: &ToyOvlm,
    mstb: &Mstb,
    dataset: &Dataset,
    supports: &[SupportFeatures],
    queries: &[usize],
    settings: &PromptSettings,
    exec: Exec,
) -> Result<(f64, Grads)> {
    let text = base_text_classes(dataset);
    let refs: Vec<&SupportFeatures> = supports.iter().collect();
    let (prompt, cache) = build_vistex_prompt(ovlm, mstb, &text, &refs, settings)?;
    let results = exec.map(queries, |&id| {
        let img = dataset.image(id)?;
        let (out, fc) = ovlm.forward_cached(&img.pixels, &prompt)?;
        let l = compute_grounding_loss(&out, &img.boxes, &img.labels, &prompt.class_map)?;
        let b = ovlm.backward(&fc, &l.d_logits, &l.d_deltas, GradTarget::Prompt);
        Ok::<_, VistexError>((l.loss, b.d_prompt))
    });
    let n = queries.len().max(1) as f64;
    let mut loss = 0.0;
    let mut d_prompt = Mat::zeros(prompt.len(), prompt.width());
    for r in results {
        let (l, d) = r?;
        loss += l;
        d_prompt.add_assign(&d);
    }
    d_prompt.data.iter_mut().for_each(|v| *v /= n);
    let mut grads = mstb.params.zeros_like();
    cache.backward(mstb, &d_prompt, &mut grads);
    Ok((loss / n, grads))
}

/// Trains the MSTB on base classes; `ovlm` is only ever borrowed.
pub fn train_mstb(
    ovlm: &ToyOvlm,
    mstb: &mut Mstb,
    dataset: &Dataset,
    config: &TrainConfig,
    settings: &PromptSettings,
    seed: u64,
    exec: Exec,
) -> Result<Vec<EpochLog>> {
    if mstb.ovlm != ovlm.config {
        return Err(VistexError::InvalidConfig("MSTB was built for a different detector config".into()));
    }
    settings.stage_list(ovlm.config.stages)?;
    let base = dataset.base_image_ids();
    check_no_novel(dataset, &base)?;
    let mut opt = AdamW::new(mstb.params.len(), config.lr, config.weight_decay);
    let mut log = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        opt.lr = config.schedule.lr_at(config.lr, epoch, config.epochs);
        let mut rng = epoch_rng(seed, epoch, 0x7E87);
        let supports = sample_base_supports(dataset, config.k, &mut rng)?;
        let support_ids: BTreeSet<usize> = supports.iter().map(|s| s.1).collect();
        let feats = compute_support_features(ovlm, dataset, &supports, settings, exec)?;
        let mut queries: Vec<usize> = base.iter().copied().filter(|id| !support_ids.contains(id)).collect();
        queries.shuffle(&mut rng);
        if let Some(q) = config.queries_per_epoch {
            queries.truncate(q);
        }
        let mut total = 0.0;
        for chunk in queries.chunks(config.batch_size.max(1)) {
            let (l, g) = mstb_loss_and_grad(ovlm, mstb, dataset, &feats, chunk, settings, exec)?;
            total += l * chunk.len() as f64;
            opt.step(mstb.params.data_mut(), &g.0);
        }
        let loss = total / queries.len().max(1) as f64;
        log::info!("epoch {epoch}: loss {loss:.5}");
        log.push(EpochLog {
            epoch,
            loss,
            lr: opt.lr,
            seed,
        });
    }
    Ok(log)
}

/// Full fine-tuning baseline: every detector weight is trained with text
/// prompts on one K-shot draw of base-class supports.
pub fn train_full(ovlm: &mut ToyOvlm, dataset: &Dataset, config: &TrainConfig, seed: u64, exec: Exec) -> Result<Vec<EpochLog>> {
    let mut rng = epoch_rng(seed, 0, 0xFF);
    let mut ids: Vec<usize> = sample_base_supports(dataset, config.k, &mut rng)?.into_iter().map(|s| s.1).collect();
    ids.sort_unstable();
    fit_text_prompt(ovlm, dataset, &ids, config.epochs, config.lr, config.weight_decay, config.batch_size, seed, exec)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub coords: Vec<usize>,
    /// Step outside `[1e-7, 1e-3]` or error at or above `1e-4`.
    pub flagged: bool,
}

/// Central differences of `loss_fn` at `params` on `n_coords` random
/// coordinates against `analytic`. Relative error uses the denominator
/// `max(|analytic|, |numeric|, 1e-8)`.
pub fn finite_diff_grad_check<F>(loss_fn: F, params: &[f64], analytic: &[f64], step: f64, n_coords: usize, seed: u64) -> Result<GradCheckReport>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    if params.len() != analytic.len() {
        return Err(VistexError::Shape("gradient and parameter lengths differ".into()));
    }
    if params.is_empty() {
        return Err(VistexError::InvalidInput("no parameters".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let coords: Vec<usize> = if n_coords >= params.len() {
        (0..params.len()).collect()
    } else {
        rand::seq::index::sample(&mut rng, params.len(), n_coords).into_vec()
    };
    let mut x = params.to_vec();
    let mut worst: f64 = 0.0;
    for &i in &coords {
        let orig = x[i];
        x[i] = orig + step;
        let lp = loss_fn(&x)?;
        x[i] = orig - step;
        let lm = loss_fn(&x)?;
        x[i] = orig;
        if !lp.is_finite() || !lm.is_finite() {
            return Err(VistexError::Numeric(format!("loss not finite at coordinate {i}")));
        }
        let num = (lp - lm) / (2.0 * step);
        let a = analytic[i];
        let rel = (a - num).abs() / a.abs().max(num.abs()).max(1e-8);
        worst = worst.max(rel);
    }
    Ok(GradCheckReport {
        max_rel_error: worst,
        coords,
        flagged: !(1e-7..=1e-3).contains(&step) || worst >= 1e-4,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toyovlm::CellGrid;

    fn two_by_two(logits: Vec<f64>, deltas: Vec<f64>, t: usize) -> GroundingOutput {
        GroundingOutput {
            logits: vec![Mat::from_vec(4, t, logits)],
            box_deltas: vec![Mat::from_vec(4, 4, deltas)],
            grids: vec![CellGrid {
                h: 2,
                w: 2,
                stride_x: 32.0,
                stride_y: 32.0,
            }],
            image_size: 64,
        }
    }

    #[test]
    fn zero_logits_without_positives_is_log2() {
        let out = two_by_two(vec![0.0; 8], vec![0.0; 16], 2);
        let l = compute_grounding_loss(&out, &[], &[], &[Some(0), Some(1)]).unwrap();
        assert!((l.loss - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(l.positive_cells, 0);
    }

    #[test]
    fn saturated_logits_and_exact_boxes_give_near_zero() {
        // box covers only cell 0 (centre 16,16)
        let b = BBox::new(0.0, 0.0, 24.0, 24.0);
        let mut logits = vec![-60.0; 4];
        logits[0] = 60.0;
        let mut deltas = vec![0.0; 16];
        deltas[..4].copy_from_slice(&[0.5, 0.5, 0.25, 0.25]);
        let out = two_by_two(logits, deltas, 1);
        let l = compute_grounding_loss(&out, &[b], &[3], &[Some(3)]).unwrap();
        assert!(l.loss < 1e-20, "{}", l.loss);
        assert_eq!(l.positive_cells, 1);
    }

    #[test]
    fn no_tokens_is_invalid() {
        let out = GroundingOutput {
            logits: vec![Mat::zeros(4, 0)],
            box_deltas: vec![Mat::zeros(4, 4)],
            grids: vec![CellGrid {
                h: 2,
                w: 2,
                stride_x: 32.0,
                stride_y: 32.0,
            }],
            image_size: 64,
        };
        assert!(matches!(
            compute_grounding_loss(&out, &[], &[], &[]),
            Err(VistexError::InvalidInput(_))
        ));
    }

    #[test]
    fn grad_check_on_quadratic() {
        let f = |x: &[f64]| Ok(x.iter().enumerate().map(|(i, v)| (i as f64 + 1.0) * v * v + v).sum());
        let x: Vec<f64> = (0..80).map(|i| i as f64 * 0.01 - 0.3).collect();
        let g: Vec<f64> = x.iter().enumerate().map(|(i, v)| 2.0 * (i as f64 + 1.0) * v + 1.0).collect();
        let r = finite_diff_grad_check(f, &x, &g, 1e-5, 64, 1).unwrap();
        assert!(r.max_rel_error < 1e-7, "{}", r.max_rel_error);
        assert_eq!(r.coords.len(), 64);
        assert!(!r.flagged);
    }

    #[test]
    fn grad_check_large_step_is_flagged() {
        let f = |x: &[f64]| Ok(x.iter().map(|v| v.powi(4)).sum());
        let x = vec![0.5; 70];
        let g: Vec<f64> = x.iter().map(|v| 4.0 * v * v * v).collect();
        let r = finite_diff_grad_check(f, &x, &g, 1.0, 64, 1).unwrap();
        assert!(r.flagged && (r.max_rel_error - 0.8).abs() < 1e-12);
    }

    #[test]
    fn cosine_schedule_decays_from_base() {
        let s = LrSchedule::Cosine;
        assert_eq!(s.lr_at(1e-3, 1, 20), 1e-3);
        assert!((s.lr_at(1e-3, 11, 20) - 5e-4).abs() < 1e-15);
        assert!(s.lr_at(1e-3, 20, 20) > 0.0);
        assert_eq!(LrSchedule::Constant.lr_at(1e-3, 20, 20), 1e-3);
    }

    #[test]
    fn grad_check_rejects_non_finite_loss() {
        let f = |_: &[f64]| Ok(f64::NAN);
        assert!(matches!(
            finite_diff_grad_check(f, &[1.0], &[0.0], 1e-5, 1, 0),
            Err(VistexError::Numeric(_))
        ));
    }
}
