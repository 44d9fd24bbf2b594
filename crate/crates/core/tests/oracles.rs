//! Independent reference implementations checked against the library.

mod common;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use vistex::evaluation::{class_average_precision, ScoredBox};
use vistex::mstb::{mstb_param_count, Mstb, MstbConfig};
use vistex::prompting::{engineer_prompt, PromptEngineering};
use vistex::synthdata::{AnnotatedImage, BBox};
use vistex::toyovlm::OvlmConfig;

use common::*;

#[test]
fn conv_matches_direct_summation() {
    let e = conv_oracle_error();
    assert!(e < 1e-10, "{e}");
}

#[test]
fn mstb_matches_hand_written_block() {
    let e = mstb_oracle_error();
    assert!(e < 1e-10, "{e}");
}

#[test]
fn concatenated_rows_follow_smallest_grid() {
    assert_eq!(row_count_mismatches(), Vec::<usize>::new());
}

#[test]
fn assembled_prompt_has_text_then_visual_rows() {
    assert_eq!(assemble_mismatches(), Vec::<(usize, usize)>::new());
}

#[test]
fn average_precision_matches_brute_force() {
    let e = ap_oracle_error(500);
    assert!(e < 1e-12, "{e}");
}

#[test]
fn average_precision_edge_cases() {
    let b = BBox::new(0.0, 0.0, 10.0, 10.0);
    let gt = [(0, vec![b])].into_iter().collect();
    assert_eq!(class_average_precision(&[], &gt, 0.5), Some(0.0));
    assert_eq!(class_average_precision(&[], &Default::default(), 0.5), None);
    let hit = ScoredBox { image_id: 0, bbox: b, score: 0.3 };
    let miss = ScoredBox { image_id: 1, bbox: b, score: 0.9 };
    assert_eq!(class_average_precision(&[hit], &gt, 0.5), Some(1.0));
    assert!((class_average_precision(&[hit, miss], &gt, 0.5).unwrap() - 0.5).abs() < 1e-15);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..50 {
        let (dets, gt) = random_ap_instance(&mut rng);
        assert!(dets.len() <= 6 && gt.values().map(Vec::len).sum::<usize>() <= 4);
    }
}

#[test]
fn background_blur_spreads_an_impulse_as_shaded_gaussian() {
    let size = 64;
    let mut pixels = vec![0.0; size * size * 3];
    let (py, px) = (32, 40);
    pixels[(py * size + px) * 3] = 1.0;
    let target = BBox::new(2.0, 2.0, 12.0, 12.0);
    for y in 2..12 {
        for x in 2..12 {
            pixels[(y * size + x) * 3 + 1] = 0.5;
        }
    }
    let img = AnnotatedImage { id: 0, size, pixels: pixels.clone(), boxes: vec![target], labels: vec![0] };
    let out = engineer_prompt(&img, &[target], PromptEngineering::BgBlur).unwrap();

    let raw: Vec<f64> = (-7..=7).map(|d: i32| (-(d * d) as f64 / 18.0).exp()).collect();
    let norm: f64 = raw.iter().sum();
    let taps: Vec<f64> = raw.iter().map(|v| v / norm).collect();
    for dy in -7i32..=7 {
        for dx in -7i32..=7 {
            let (y, x) = ((py as i32 + dy) as usize, (px as i32 + dx) as usize);
            let want = 0.9 * taps[(dy + 7) as usize] * taps[(dx + 7) as usize];
            assert!((out[(y * size + x) * 3] - want).abs() < 1e-12);
        }
    }
    assert!(out[(py * size + px + 8) * 3].abs() < 1e-15);
    for y in 2..12 {
        for x in 2..12 {
            let i = (y * size + x) * 3;
            assert_eq!(&out[i..i + 3], &pixels[i..i + 3]);
        }
    }
}

#[test]
fn parameter_counts_match_closed_form() {
    for m in 1..=4 {
        for stages in 1..=3 {
            let cfg = OvlmConfig { scales: m, stages, ..Default::default() };
            for sharing in [true, false] {
                let mstb = Mstb::new(cfg.clone(), MstbConfig { sharing, ..Default::default() }, 0).unwrap();
                let want = param_count_oracle(&cfg, sharing);
                assert_eq!(mstb.params.len(), want);
                assert_eq!(mstb_param_count(&cfg, sharing).total(), want);
            }
            if m >= 3 {
                assert!(param_count_oracle(&cfg, true) < param_count_oracle(&cfg, false));
            }
        }
    }
}
