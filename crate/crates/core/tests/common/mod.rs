//! Reference implementations shared by the oracle tests and the acceptance
//! suite. Only the code under test is imported from the library; every
//! expected value is computed here from first principles.
#![allow(dead_code)]

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use vistex::evaluation::{class_average_precision, ScoredBox};
use vistex::linalg::{conv_forward, ConvGeom, Mat};
use vistex::mstb::{Mstb, MstbConfig};
use vistex::prompting::assemble_prompt;
use vistex::synthdata::BBox;
use vistex::toyovlm::{MultiScaleFeatures, OvlmConfig, TokenKind, TokenSequence};

pub fn rand_mat(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Mat {
    Mat::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect())
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// 3×3, padding 1; weight index `((ky·3 + kx)·c_in + c)·c_out + o`.
#[allow(clippy::too_many_arguments)]
pub fn conv_direct(x: &Mat, h: usize, w: usize, c_in: usize, c_out: usize, stride: usize, wt: &[f64], b: &[f64]) -> Mat {
    let ho = (h - 1) / stride + 1;
    let wo = (w - 1) / stride + 1;
    let mut out = Mat::zeros(ho * wo, c_out);
    for oy in 0..ho {
        for ox in 0..wo {
            for o in 0..c_out {
                let mut s = b[o];
                for ky in 0..3 {
                    for kx in 0..3 {
                        let iy = (oy * stride + ky) as isize - 1;
                        let ix = (ox * stride + kx) as isize - 1;
                        if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                            continue;
                        }
                        for c in 0..c_in {
                            s += x.at(iy as usize * w + ix as usize, c) * wt[((ky * 3 + kx) * c_in + c) * c_out + o];
                        }
                    }
                }
                out.row_mut(oy * wo + ox)[o] = s;
            }
        }
    }
    out
}

/// Worst gap between `conv_forward` and direct summation over a few
/// geometries.
pub fn conv_oracle_error() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst: f64 = 0.0;
    for &(h, w, c_in, c_out, stride) in &[(8, 8, 3, 5, 2), (5, 7, 2, 4, 1), (7, 5, 4, 3, 2), (1, 1, 2, 2, 2), (16, 16, 8, 8, 2)] {
        let x = rand_mat(&mut rng, h * w, c_in);
        let wt: Vec<f64> = (0..9 * c_in * c_out).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..c_out).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (got, _) = conv_forward(&x, &ConvGeom { h, w, c_in, c_out, stride }, &wt, Some(&b));
        let want = conv_direct(&x, h, w, c_in, c_out, stride, &wt, &b);
        assert_eq!((got.rows, got.cols), (want.rows, want.cols));
        worst = worst.max(max_abs_diff(&got.data, &want.data));
    }
    worst
}

/// The block written out by hand from its named tensors.
pub fn mstb_oracle(mstb: &Mstb, feats: &MultiScaleFeatures, stage: usize) -> Vec<f64> {
    let cfg = &mstb.ovlm;
    let (m, d, dt) = (cfg.scales, cfg.d_visual, cfg.d_text);
    let get = |name: String| {
        let id = mstb.params.id_of(&name).unwrap_or_else(|| panic!("missing {name}"));
        mstb.params.get(id).to_vec()
    };
    let mut stacked: Vec<Vec<f64>> = Vec::new();
    for j in mstb.config.used_scales(m) {
        let mut x = feats.scales[j].clone();
        for k in j..m - 1 {
            let (h, w) = (cfg.grid_h >> k, cfg.grid_w >> k);
            let owner = if mstb.config.share_across_stages { "mstb".to_string() } else { format!("mstb.stage.{stage}") };
            let name = if mstb.config.sharing { format!("{owner}.down.{k}") } else { format!("{owner}.scale.{j}.down.{k}") };
            x = conv_direct(&x, h, w, d, d, 2, &get(format!("{name}.weight")), &get(format!("{name}.bias")));
        }
        for r in 0..x.rows {
            stacked.push(x.row(r).to_vec());
        }
    }
    let p = format!("mstb.stage.{stage}.mlp");
    let sw = get(format!("{p}.spatial.weight"));
    let sb = get(format!("{p}.spatial.bias"))[0];
    assert_eq!(sw.len(), stacked.len());
    let act: Vec<f64> = (0..d)
        .map(|c| (sb + stacked.iter().zip(&sw).map(|(row, w)| w * row[c]).sum::<f64>()).max(0.0))
        .collect();
    let cw = get(format!("{p}.channel.weight"));
    let cb = get(format!("{p}.channel.bias"));
    (0..dt).map(|o| cb[o] + (0..d).map(|c| act[c] * cw[c * dt + o]).sum::<f64>()).collect()
}

pub fn tiny_ovlm(scales: usize, stages: usize) -> OvlmConfig {
    OvlmConfig {
        stages,
        scales,
        d_visual: 3,
        d_text: 4,
        grid_h: 8,
        grid_w: 8,
        image_size: 16,
        ..Default::default()
    }
}

/// Worst gap between `textualize_stage` and [`mstb_oracle`] over scale
/// counts, sharing modes, scale subsets and stages.
pub fn mstb_oracle_error() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst: f64 = 0.0;
    for scales in 1usize..=4 {
        for (sharing, across) in [(true, false), (false, false), (true, true)] {
            for subset in [None, Some((scales.saturating_sub(2)..scales).collect::<Vec<_>>())] {
                let cfg = tiny_ovlm(scales, 2);
                let mcfg = MstbConfig { sharing, share_across_stages: across, scales: subset };
                let mut mstb = Mstb::new(cfg.clone(), mcfg, 1).unwrap();
                // skewed positive so the ReLU sees both signs
                let data: Vec<f64> = (0..mstb.params.len()).map(|_| rng.random_range(-0.5..1.0)).collect();
                mstb.params.set_data(data);
                for stage in 0..=cfg.stages {
                    let feats = MultiScaleFeatures {
                        stage,
                        scales: cfg.scale_rows().iter().map(|&r| rand_mat(&mut rng, r, cfg.d_visual)).collect(),
                    };
                    let got = mstb.textualize_stage(&feats, stage).unwrap();
                    worst = worst.max(max_abs_diff(&got.row, &mstb_oracle(&mstb, &feats, stage)));
                }
            }
        }
    }
    worst
}

/// `M` values in `1..=5` where the block's concatenated row count differs
/// from `M·(H/2^{M−1})·(W/2^{M−1})`.
pub fn row_count_mismatches() -> Vec<usize> {
    (1..=5)
        .filter(|&m| {
            let cfg = OvlmConfig { scales: m, ..Default::default() };
            let mstb = Mstb::new(cfg.clone(), MstbConfig::default(), 0).unwrap();
            let want = m * (cfg.grid_h / (1 << (m - 1))) * (cfg.grid_w / (1 << (m - 1)));
            let id = mstb.params.id_of("mstb.stage.0.mlp.spatial.weight").unwrap();
            mstb.concat_rows() != want || mstb.params.spec(id).shape != vec![want]
        })
        .collect()
}

/// `(|C|, K)` cells in `1..=4 × 0..=3` where the assembled prompt is not
/// `|C|` text rows followed by each class's `K` visual rows.
pub fn assemble_mismatches() -> Vec<(usize, usize)> {
    let width = 6;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut bad = Vec::new();
    for n_classes in 1..=4 {
        for k in 0..=3 {
            let classes: Vec<usize> = (0..n_classes).map(|c| 3 * c + 1).collect();
            let mut text = TokenSequence::empty(width);
            for &c in &classes {
                let row: Vec<f64> = (0..width).map(|_| rng.random()).collect();
                text.push(&row, Some(c), TokenKind::Text, Some(c + 2)).unwrap();
            }
            let shots: BTreeMap<usize, Mat> = if k == 0 {
                BTreeMap::new()
            } else {
                classes.iter().map(|&c| (c, rand_mat(&mut rng, k, width))).collect()
            };
            let p = assemble_prompt(&text, &shots).unwrap();
            let mut ok = p.len() == n_classes * (1 + k)
                && p.kinds[..n_classes].iter().all(|&t| t == TokenKind::Text)
                && p.kinds[n_classes..].iter().all(|&t| t == TokenKind::Visual);
            for (i, &c) in classes.iter().enumerate() {
                ok &= p.class_map.iter().filter(|m| **m == Some(c)).count() == 1 + k;
                for s in 0..k {
                    ok &= p.rows.row(n_classes + i * k + s) == shots[&c].row(s);
                }
            }
            if !ok {
                bad.push((n_classes, k));
            }
        }
    }
    bad
}

pub fn iou_oracle(a: &BBox, b: &BBox) -> f64 {
    let ix = (a.x1.min(b.x1) - a.x0.max(b.x0)).max(0.0);
    let iy = (a.y1.min(b.y1) - a.y0.max(b.y0)).max(0.0);
    let inter = ix * iy;
    let union = (a.x1 - a.x0) * (a.y1 - a.y0) + (b.x1 - b.x0) * (b.y1 - b.y0) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Rank, greedily match, then average the interpolated precision at every
/// true positive (precision at rank `i` replaced by the best precision at
/// any rank `≥ i`).
pub fn ap_brute_force(dets: &[ScoredBox], gt: &BTreeMap<usize, Vec<BBox>>, thr: f64) -> f64 {
    let n_gt: usize = gt.values().map(Vec::len).sum();
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.partial_cmp(&dets[a].score).unwrap());
    let mut used: BTreeMap<usize, Vec<bool>> = gt.iter().map(|(k, v)| (*k, vec![false; v.len()])).collect();
    let mut is_tp = Vec::new();
    for &i in &order {
        let d = &dets[i];
        let mut hit = None;
        let mut best = -1.0;
        if let Some(boxes) = gt.get(&d.image_id) {
            for (g, b) in boxes.iter().enumerate() {
                let o = iou_oracle(&d.bbox, b);
                if !used[&d.image_id][g] && o >= thr && o > best {
                    best = o;
                    hit = Some(g);
                }
            }
        }
        if let Some(g) = hit {
            used.get_mut(&d.image_id).unwrap()[g] = true;
        }
        is_tp.push(hit.is_some());
    }
    let prec: Vec<f64> = (0..is_tp.len())
        .map(|i| is_tp[..=i].iter().filter(|&&t| t).count() as f64 / (i + 1) as f64)
        .collect();
    let mut total = 0.0;
    for i in 0..is_tp.len() {
        if is_tp[i] {
            total += prec[i..].iter().cloned().fold(0.0, f64::max);
        }
    }
    total / n_gt as f64
}

pub fn random_box(rng: &mut ChaCha8Rng) -> BBox {
    let x0 = rng.random_range(0.0..50.0);
    let y0 = rng.random_range(0.0..50.0);
    BBox::new(x0, y0, x0 + rng.random_range(4.0..14.0), y0 + rng.random_range(4.0..14.0))
}

pub fn jitter(b: &BBox, rng: &mut ChaCha8Rng, s: f64) -> BBox {
    let mut j = || rng.random_range(-s..s);
    BBox::new(b.x0 + j(), b.y0 + j(), b.x1 + j(), b.y1 + j())
}

/// One class of one image set: at most 4 ground-truth boxes and at most 6
/// detections, some jittered copies of the truth and some clutter.
pub fn random_ap_instance(rng: &mut ChaCha8Rng) -> (Vec<ScoredBox>, BTreeMap<usize, Vec<BBox>>) {
    let mut gt: BTreeMap<usize, Vec<BBox>> = BTreeMap::new();
    let mut dets = Vec::new();
    let mut n_gt = 0;
    for img in 0..rng.random_range(1..4) {
        let n = rng.random_range(0..=(4 - n_gt).min(2));
        n_gt += n;
        let boxes: Vec<BBox> = (0..n).map(|_| random_box(rng)).collect();
        for b in &boxes {
            if dets.len() < 6 && rng.random_bool(0.7) {
                dets.push(ScoredBox { image_id: img, bbox: jitter(b, rng, 3.0), score: rng.random() });
            }
        }
        if dets.len() < 6 && rng.random_bool(0.5) {
            dets.push(ScoredBox { image_id: img, bbox: random_box(rng), score: rng.random() });
        }
        if n > 0 {
            gt.insert(img, boxes);
        }
    }
    if gt.is_empty() {
        let b = random_box(rng);
        if dets.len() < 6 {
            dets.push(ScoredBox { image_id: 0, bbox: jitter(&b, rng, 2.0), score: rng.random() });
        }
        gt.insert(0, vec![b]);
    }
    (dets, gt)
}

/// Worst gap between the library AP and [`ap_brute_force`] on `n`
/// random instances.
pub fn ap_oracle_error(n: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    (0..n)
        .map(|_| {
            let (dets, gt) = random_ap_instance(&mut rng);
            let got = class_average_precision(&dets, &gt, 0.5).expect("instance has ground truth");
            (got - ap_brute_force(&dets, &gt, 0.5)).abs()
        })
        .fold(0.0, f64::max)
}

/// Per stage: one conv per downsampling step (shared) or per (source,
/// step) pair (unshared), then the spatial and channel affine layers.
pub fn param_count_oracle(cfg: &OvlmConfig, sharing: bool) -> usize {
    let (m, d, dt) = (cfg.scales, cfg.d_visual, cfg.d_text);
    let conv = 9 * d * d + d;
    let n_convs: usize = if sharing { m - 1 } else { (0..m).map(|j| m - 1 - j).sum() };
    let small = (cfg.grid_h / (1 << (m - 1))) * (cfg.grid_w / (1 << (m - 1)));
    let mlp = m * small + 1 + d * dt + dt;
    (cfg.stages + 1) * (n_convs * conv + mlp)
}
