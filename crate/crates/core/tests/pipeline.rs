mod common;

use common::{cloud, fit, short_config};
use hacpp::anchor::AttributeGroup;
use hacpp::masking::MaskState;
use hacpp::pipeline::{
    bit_allocation_stats, build_loss, decode, encode, evaluate, read_header, ErrorKind, LossInputs,
    Phase, PipelineError, Section, Trainer,
};
use hacpp::quantizer::uniform_noise;
use hacpp::tensor::Tape;

fn full_phase_loss(trainer: &Trainer<f64>, lambda: f64) -> (f64, f64) {
    let mut cfg = trainer.config.clone();
    cfg.lambda = lambda;
    let rows: Vec<usize> = (0..trainer.data.len()).collect();
    let noise = uniform_noise::<f64>(cfg.seed, 7, &rows, trainer.data.layout.total());
    let mut tape = Tape::new();
    let g = build_loss(
        &mut tape,
        &trainer.model,
        &LossInputs {
            data: &trainer.data,
            mask_logits: trainer.mask_logits,
            rows: &rows,
            noise: Some(&noise),
            phase: Phase::Full,
            config: &cfg,
        },
    )
    .unwrap();
    (tape.scalar(g.loss), tape.scalar(g.d_surr))
}

#[test]
fn zero_rate_weight_leaves_distortion_only() {
    let anchors = cloud(200, 1);
    let trainer = Trainer::<f64>::new(&anchors, short_config(30, 1e-3, 1)).unwrap();
    let (loss, d) = full_phase_loss(&trainer, 0.0);
    assert_eq!(loss, d);
}

#[test]
fn doubling_rate_weight_doubles_rate_term() {
    let anchors = cloud(200, 2);
    let trainer = Trainer::<f64>::new(&anchors, short_config(30, 1e-3, 2)).unwrap();
    let (l1, d1) = full_phase_loss(&trainer, 1e-3);
    let (l2, d2) = full_phase_loss(&trainer, 2e-3);
    assert_eq!(d1, d2);
    let (r1, r2) = (l1 - d1, l2 - d2);
    assert!(r1 > 0.0);
    assert!((r2 - 2.0 * r1).abs() <= 1e-12 * r2, "{r2} vs 2 × {r1}");
}

fn mean_and_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
    (m, (var / n).sqrt())
}

#[test]
fn sampled_loss_is_unbiased() {
    let anchors = cloud(2000, 3);
    let cfg = short_config(300, 1e-3, 3);
    let mut trainer = Trainer::<f32>::new(&anchors, cfg.clone()).unwrap();
    while trainer.iteration() < cfg.phase2_end + 20 {
        trainer.step().unwrap();
    }
    let start = trainer.iteration();
    let losses = |fraction: f64| -> Vec<f64> {
        (start..start + 50)
            .map(|it| trainer.evaluate_loss(it, fraction).unwrap().total)
            .collect()
    };
    let (m_full, se_full) = mean_and_se(&losses(1.0));
    let (m_part, se_part) = mean_and_se(&losses(0.05));
    let se = (se_full * se_full + se_part * se_part).sqrt();
    assert!(
        (m_full - m_part).abs() <= 3.0 * se,
        "full {m_full} ± {se_full}, sampled {m_part} ± {se_part}"
    );
}

#[test]
fn toy_cloud_round_trips_and_rates_agree() {
    let anchors = cloud(100, 4);
    let out = fit(&anchors, &short_config(60, 1e-3, 4));
    let enc = encode(&anchors, &out.model, &out.masks).unwrap();
    let dec = decode(&enc.bytes).unwrap();
    assert!(dec.scene.same_content(&enc.scene));
    assert_eq!(dec.coded, enc.report.coded);
    for g in AttributeGroup::ALL {
        assert_eq!(dec.model.quant.q0(g), out.model.quant.q0(g));
    }
}

#[test]
fn tampered_payload_fails_checksum() {
    let anchors = cloud(100, 5);
    let out = fit(&anchors, &short_config(30, 1e-3, 5));
    let bytes = encode(&anchors, &out.model, &out.masks).unwrap().bytes;
    let (header, start) = read_header(&bytes).unwrap();
    for (s, info) in Section::ALL.iter().zip(&header.sections) {
        if info.length == 0 {
            continue;
        }
        let mut bad = bytes.clone();
        let at = start + info.offset as usize + 8 + info.length as usize / 2;
        bad[at] ^= 0x10;
        let err = decode(&bad).expect_err(s.name());
        assert_eq!(err.kind(), ErrorKind::Stream);
        assert!(err.to_string().contains("checksum"), "{}: {err}", s.name());
    }
}

#[test]
fn fully_pruned_cloud_keeps_only_model_sections() {
    let anchors = cloud(50, 6);
    let out = fit(&anchors, &short_config(30, 1e-3, 6));
    let none = MaskState {
        offsets_per_anchor: anchors.layout.offsets_per_anchor,
        offset_masks: vec![false; out.masks.offset_masks.len()],
    };
    let enc = encode(&anchors, &out.model, &none).unwrap();
    for s in [
        Section::Masks,
        Section::Locations,
        Section::Features,
        Section::Scalings,
        Section::Offsets,
    ] {
        assert_eq!(enc.report.section(s).bytes, 0, "{}", s.name());
    }
    assert!(enc.report.section(Section::Weights).bytes > 0);
    assert!(enc.report.section(Section::Grid).bytes > 0);
    let dec = decode(&enc.bytes).unwrap();
    assert_eq!(dec.header.total_anchors, 50);
    assert_eq!(dec.header.valid_anchors, 0);
    assert!(dec.anchors().is_empty());
}

#[test]
fn identical_runs_give_identical_streams() {
    let anchors = cloud(300, 7);
    let cfg = short_config(60, 2e-3, 7);
    let a = fit(&anchors, &cfg);
    let b = fit(&anchors, &cfg);
    let ea = encode(&anchors, &a.model, &a.masks).unwrap().bytes;
    let eb = encode(&anchors, &b.model, &b.masks).unwrap().bytes;
    assert_eq!(ea, eb);
}

#[test]
fn re_encoding_a_decoded_stream_is_a_fixed_point() {
    let anchors = cloud(200, 8);
    let mut cfg = short_config(60, 1e-3, 8);
    cfg.lr_mask = 0.3;
    let out = fit(&anchors, &cfg);
    let mut masks = out.masks.clone();
    // Prune some anchors outright so the second pass sees fewer anchors.
    for i in (0..masks.len()).step_by(7) {
        let k = masks.offsets_per_anchor;
        masks.offset_masks[i * k..(i + 1) * k].fill(false);
    }
    let first = encode(&anchors, &out.model, &masks).unwrap();
    let d1 = decode(&first.bytes).unwrap();
    let second = encode(&d1.anchors(), &d1.model, &d1.scene.masks).unwrap();
    let d2 = decode(&second.bytes).unwrap();
    let third = encode(&d2.anchors(), &d2.model, &d2.scene.masks).unwrap();
    assert!(d1.scene.same_content(&d2.scene));
    assert_eq!(second.bytes, third.bytes);
    assert_eq!(d2.header.total_anchors, d1.header.valid_anchors);

    let all = MaskState::all_valid(anchors.len(), masks.offsets_per_anchor);
    let s1 = encode(&anchors, &out.model, &all).unwrap();
    let dec = decode(&s1.bytes).unwrap();
    let s2 = encode(&dec.anchors(), &dec.model, &dec.scene.masks).unwrap();
    assert_eq!(s1.bytes, s2.bytes);
}

#[test]
fn sections_account_for_the_whole_file() {
    let anchors = cloud(300, 9);
    let out = fit(&anchors, &short_config(60, 1e-3, 9));
    let enc = encode(&anchors, &out.model, &out.masks).unwrap();
    let r = &enc.report;
    let payload: usize = r.sections.iter().map(|s| s.bytes).sum();
    assert_eq!(payload + r.framing_bytes, enc.bytes.len());
    assert_eq!(r.total_bytes, enc.bytes.len());

    let k = anchors.layout.offsets_per_anchor;
    let kept = enc.scene.masks.offset_masks.iter().filter(|&&b| b).count();
    let m = r.valid_anchors;
    assert_eq!(
        r.coded.counts,
        [m * anchors.layout.feature_dim, m * 6, kept * 3]
    );
    assert_eq!(enc.scene.masks.offset_masks.len(), m * k);
    for g in AttributeGroup::ALL {
        let bpp = r.coded.bits_per_param(g);
        assert!(
            (bpp * r.coded.counts[g.index()] as f64 - r.coded.per_group[g.index()]).abs() < 1e-6
        );
        let measured = r.section(Section::of_group(g)).bytes as f64 * 8.0;
        assert!(measured <= r.coded.per_group[g.index()] + 64.0, "{g:?}");
    }
    let per_anchor: f64 = r.coded.per_anchor.iter().sum();
    assert!((per_anchor - r.coded.total).abs() <= 1e-6 * r.coded.total);
}

#[test]
fn masks_remove_more_gaussians_than_anchors() {
    let anchors = cloud(300, 10);
    let out = fit(&anchors, &short_config(30, 1e-3, 10));
    let k = anchors.layout.offsets_per_anchor;
    let mut masks = MaskState::all_valid(anchors.len(), k);
    assert_eq!(masks.anchor_ratio(), 1.0);
    for i in 0..anchors.len() {
        for j in 0..k {
            masks.offset_masks[i * k + j] = (i + j) % 3 == 0;
        }
    }
    let enc = encode(&anchors, &out.model, &masks).unwrap();
    let dec = decode(&enc.bytes).unwrap();
    let n = dec.header.total_anchors as f64;
    let r_anchor = dec.header.valid_anchors as f64 / n;
    let kept = dec.scene.masks.offset_masks.iter().filter(|&&b| b).count();
    let r_gauss = kept as f64 / (n * k as f64);
    assert!(r_gauss < r_anchor, "{r_gauss} vs {r_anchor}");
    assert_eq!(r_anchor, masks.anchor_ratio());
    assert_eq!(r_gauss, masks.gaussian_ratio());
}

#[test]
fn evaluation_rejects_mismatched_masks() {
    let anchors = cloud(40, 11);
    let out = fit(&anchors, &short_config(30, 1e-3, 11));
    let masks = MaskState::all_valid(39, anchors.layout.offsets_per_anchor);
    let err: PipelineError =
        evaluate(&out.model, &anchors, &masks, &Default::default()).unwrap_err();
    assert_eq!(err.kind(), ErrorKind::Input);
    assert!(encode(&anchors, &out.model, &masks).is_err());
}

#[test]
fn single_anchor_gives_one_voxel() {
    let stats = bit_allocation_stats(&[[0.3, 0.6, 0.9]], &[42.5], 4);
    assert_eq!(stats.len(), 1);
    assert_eq!(stats[0].voxel, [1, 2, 3]);
    assert_eq!(stats[0].anchors, 1);
    assert_eq!(stats[0].mean_bits, 42.5);
}

#[test]
fn constant_bits_give_constant_voxel_means() {
    let coords: Vec<[f32; 3]> = (0..500)
        .map(|i| {
            let t = i as f32 / 500.0;
            [t, (t * 7.0).fract(), (t * 13.0).fract()]
        })
        .collect();
    let stats = bit_allocation_stats(&coords, &vec![3.0; 500], 5);
    assert!(stats.iter().all(|s| (s.mean_bits - 3.0).abs() < 1e-12));
    assert_eq!(stats.iter().map(|s| s.anchors).sum::<usize>(), 500);
}

#[test]
fn dense_voxels_have_steadier_mean_bits() {
    let anchors = cloud(3000, 12);
    let out = fit(&anchors, &short_config(150, 1e-3, 12));
    let enc = encode(&anchors, &out.model, &out.masks).unwrap();
    let coords = enc.scene.locations.normalized();
    let stats = bit_allocation_stats(&coords, &enc.report.coded.per_anchor, 8);
    let mut counts: Vec<usize> = stats.iter().map(|s| s.anchors).collect();
    counts.sort_unstable();
    let median = counts[counts.len() / 2];
    let spread = |dense: bool| {
        let v: Vec<f64> = stats
            .iter()
            .filter(|s| {
                if dense {
                    s.anchors > median
                } else {
                    s.anchors <= median
                }
            })
            .map(|s| s.mean_bits)
            .collect();
        let m = v.iter().sum::<f64>() / v.len() as f64;
        v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64
    };
    let (dense, sparse) = (spread(true), spread(false));
    assert!(dense < sparse, "dense {dense} vs sparse {sparse}");
}
