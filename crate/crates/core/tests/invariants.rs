use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use vistex::fusion::{fuse_shots, fuse_stages, FusionMode, TextualizedToken};
use vistex::linalg::Mat;
use vistex::mstb::{Mstb, MstbConfig, TextualizedStageToken};
use vistex::prompting::{engineer_prompt, PromptEngineering};
use vistex::synthdata::{sample_episode, split_classes, AnnotatedImage, BBox, Dataset, DatasetConfig};
use vistex::toyovlm::{MultiScaleFeatures, OvlmConfig, TokenKind, TokenSequence, ToyOvlm, Vocab};

fn mode() -> impl Strategy<Value = FusionMode> {
    prop::sample::select(FusionMode::ALL.to_vec())
}

fn shots(k: usize, rows: usize, width: usize, seed: u64) -> Vec<TextualizedToken> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..k)
        .map(|s| TextualizedToken {
            rows: Mat::from_vec(rows, width, (0..rows * width).map(|_| rng.random_range(-2.0..2.0)).collect()),
            support_id: s,
            class_id: 0,
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn shot_fusion_ignores_order(k in 1usize..5, rows in 1usize..3, width in 1usize..6, seed: u64, m in mode(), rot in 0usize..5) {
        let s = shots(k, rows, width, seed);
        let mut r = s.clone();
        r.rotate_left(rot % k);
        r.reverse();
        let a = fuse_shots(&s, m).unwrap();
        let b = fuse_shots(&r, m).unwrap();
        if m == FusionMode::Concat {
            prop_assert_eq!(a.rows, k * rows);
            let mut ra: Vec<Vec<u64>> = (0..a.rows).map(|i| a.row(i).iter().map(|v| v.to_bits()).collect()).collect();
            let mut rb: Vec<Vec<u64>> = (0..b.rows).map(|i| b.row(i).iter().map(|v| v.to_bits()).collect()).collect();
            ra.sort();
            rb.sort();
            prop_assert_eq!(ra, rb);
        } else {
            prop_assert_eq!(a.rows, rows);
            for (x, y) in a.data.iter().zip(&b.data) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn stage_fusion_relations(n in 1usize..5, width in 1usize..8, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let toks: Vec<TextualizedStageToken> = (0..n)
            .map(|i| TextualizedStageToken { stage: i, row: (0..width).map(|_| rng.random_range(-3.0..3.0)).collect() })
            .collect();
        let max = fuse_stages(&toks, FusionMode::Max).unwrap();
        let avg = fuse_stages(&toks, FusionMode::Average).unwrap();
        let add = fuse_stages(&toks, FusionMode::Addition).unwrap();
        let cat = fuse_stages(&toks, FusionMode::Concat).unwrap();
        prop_assert_eq!((cat.rows, cat.cols), (n, width));
        for c in 0..width {
            let col: Vec<f64> = toks.iter().map(|t| t.row[c]).collect();
            prop_assert!(col.iter().any(|&v| v == max.data[c]));
            prop_assert!(col.iter().all(|&v| v <= max.data[c]));
            prop_assert!((add.data[c] - n as f64 * avg.data[c]).abs() < 1e-12);
        }
    }

    #[test]
    fn class_split_is_a_partition(n in 2usize..64, frac in 0.0f64..1.0, seed: u64) {
        let novel_n = 1 + ((n - 2) as f64 * frac) as usize;
        let (base, novel) = split_classes(n, novel_n, seed).unwrap();
        prop_assert_eq!(novel.len(), novel_n);
        prop_assert_eq!(base.len() + novel.len(), n);
        let mut all: Vec<usize> = base.iter().chain(&novel).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
    }

    #[test]
    fn background_blur_keeps_foreground(seed: u64, x0 in 0.0f64..40.0, y0 in 0.0f64..40.0, w in 2.0f64..20.0, h in 2.0f64..20.0) {
        let size = 64;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pixels: Vec<f64> = (0..size * size * 3).map(|_| rng.random()).collect();
        let b = BBox::new(x0, y0, x0 + w, y0 + h);
        let img = AnnotatedImage { id: 0, size, pixels: pixels.clone(), boxes: vec![b], labels: vec![0] };
        let out = engineer_prompt(&img, &[b], PromptEngineering::BgBlur).unwrap();
        prop_assert_eq!(out.len(), pixels.len());
        for y in 0..size {
            for x in 0..size {
                if b.contains(x as f64 + 0.5, y as f64 + 0.5) {
                    let i = (y * size + x) * 3;
                    prop_assert_eq!(&out[i..i + 3], &pixels[i..i + 3]);
                }
            }
        }
    }

    #[test]
    fn engineered_supports_stay_in_range(seed: u64, m in prop::sample::select(PromptEngineering::ALL.to_vec()), x0 in 0.0f64..50.0, y0 in 0.0f64..50.0) {
        let size = 64;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pixels: Vec<f64> = (0..size * size * 3).map(|_| rng.random()).collect();
        let b = BBox::new(x0, y0, x0 + 8.0, y0 + 8.0);
        let img = AnnotatedImage { id: 0, size, pixels, boxes: vec![b], labels: vec![0] };
        let out = engineer_prompt(&img, &[b], m).unwrap();
        prop_assert_eq!(out.len(), size * size * 3);
        prop_assert!(out.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn mstb_token_shape_over_config_grid(scales in 1usize..5, stages in 1usize..4, d_visual in 1usize..5, d_text in 1usize..5, sharing: bool, seed: u64) {
        let cfg = OvlmConfig { scales, stages, d_visual, d_text, grid_h: 8, grid_w: 8, image_size: 32, ..Default::default() };
        let mstb = Mstb::new(cfg.clone(), MstbConfig { sharing, ..Default::default() }, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for stage in 0..=stages {
            let feats = MultiScaleFeatures {
                stage,
                scales: cfg.scale_rows().iter().map(|&r| Mat::from_vec(r, d_visual, (0..r * d_visual).map(|_| rng.random()).collect())).collect(),
            };
            let t = mstb.textualize_stage(&feats, stage).unwrap();
            prop_assert_eq!(t.row.len(), d_text);
            prop_assert!(t.row.iter().all(|v| v.is_finite()));
        }
        let feats = MultiScaleFeatures { stage: 0, scales: cfg.scale_rows().iter().map(|&r| Mat::zeros(r, d_visual)).collect() };
        prop_assert!(mstb.textualize_stage(&feats, stages + 1).is_err());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    /// Without positional encoding the detector treats the prompt as a set:
    /// permuting rows permutes logit columns and nothing else.
    #[test]
    fn detector_is_token_permutation_equivariant(seed: u64, n_tokens in 2usize..7) {
        let cfg = OvlmConfig { grid_h: 8, grid_w: 8, image_size: 32, ..Default::default() };
        let names = ["a", "b", "c"];
        let ovlm = ToyOvlm::new(cfg.clone(), Vocab::new(&names, cfg.vocab_size).unwrap(), seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let mut prompt = TokenSequence::empty(cfg.d_text);
        for t in 0..n_tokens {
            let row: Vec<f64> = (0..cfg.d_text).map(|_| rng.random_range(-1.0..1.0)).collect();
            prompt.push(&row, Some(t % 3), TokenKind::Visual, None).unwrap();
        }
        let pixels: Vec<f64> = (0..32 * 32 * 3).map(|_| rng.random()).collect();
        let mut perm: Vec<usize> = (0..n_tokens).collect();
        perm.rotate_left(1);
        perm.swap(0, n_tokens - 1);
        let a = ovlm.forward(&pixels, &prompt).unwrap().grounding;
        let b = ovlm.forward(&pixels, &prompt.permuted(&perm)).unwrap().grounding;
        for (la, lb) in a.logits.iter().zip(&b.logits) {
            for r in 0..la.rows {
                for (i, &p) in perm.iter().enumerate() {
                    prop_assert!((lb.at(r, i) - la.at(r, p)).abs() < 1e-10);
                }
            }
        }
        for (da, db) in a.box_deltas.iter().zip(&b.box_deltas) {
            for (x, y) in da.data.iter().zip(&db.data) {
                prop_assert!((x - y).abs() < 1e-10);
            }
        }
    }
}

#[test]
fn episodes_keep_supports_out_of_queries() {
    let ds = Dataset::render(&DatasetConfig { images_per_class: 6, ..Default::default() }, 3).unwrap();
    let all: Vec<usize> = (0..16).collect();
    for seed in 0..20 {
        for k in 1..=3 {
            let ep = sample_episode(&ds.manifest, k, &all, seed).unwrap();
            ep.check().unwrap();
            let sup = ep.all_support_ids();
            assert_eq!(sup.len(), 16 * k);
            assert!(ep.query_ids.iter().all(|q| !sup.contains(q)));
        }
    }
    assert!(sample_episode(&ds.manifest, 6, &all, 0).is_err());
}
