mod common;

use std::f64::consts::PI;

use binaural_beamform::lcmv::{bmvdr, BlockCpsd};
use binaural_beamform::scene::{
    position_on_circle, render_microphone_signals, self_noise_cpsd, AcousticScene, SelfNoise, SourceDescriptor,
    SourceKind, SourceLocation,
};
use binaural_beamform::signals::white_noise;
use binaural_beamform::stft::{analyze, apply_binaural_filter, synthesize, StftParams};

use common::bte_geometry;

fn single_source_scene(angle: f64) -> AcousticScene {
    let source = SourceDescriptor::new(
        SourceKind::Target,
        SourceLocation::Position(position_on_circle(angle, 0.8)),
        vec![],
    )
    .unwrap();
    AcousticScene {
        geometry: bte_geometry(),
        sources: vec![source],
    }
}

#[test]
fn rendered_stft_matches_the_narrowband_model() {
    let params = StftParams::standard();
    let scene = single_source_scene(45.0);
    let atfs = scene.sources[0].atfs(&scene.geometry, params.fft_size()).unwrap();
    // bin-centred tones far enough apart that their leakage does not overlap
    let tones = [16usize, 40, 64, 96];
    let len = 16_000;
    let x: Vec<f64> = (0..len)
        .map(|n| {
            tones
                .iter()
                .map(|&k| (2.0 * PI * k as f64 * n as f64 / params.fft_size() as f64).cos())
                .sum()
        })
        .collect();
    let y = render_microphone_signals(&scene, std::slice::from_ref(&x), None).unwrap();
    let sx = analyze(&[x], &params).unwrap();
    let sy = analyze(&y, &params).unwrap();
    let mut worst = 0.0f64;
    // skip the onset frames, where the delayed copies are still arriving
    for l in 2..sx.frames() - 1 {
        for &k in &tones {
            for (j, atf) in atfs[k].iter().enumerate() {
                let model = atf * sx.get(l, k, 0);
                worst = worst.max((sy.get(l, k, j) - model).norm() / model.norm());
            }
        }
    }
    assert!(worst <= 0.05, "worst relative error {worst}");
}

#[test]
fn rendering_is_linear_and_noise_is_seeded() {
    let scene = single_source_scene(120.0);
    let x = white_noise(4000, 1);
    let u = white_noise(4000, 2);
    let sum: Vec<f64> = x.iter().zip(&u).map(|(a, b)| a + b).collect();
    let yx = render_microphone_signals(&scene, &[x], None).unwrap();
    let yu = render_microphone_signals(&scene, &[u], None).unwrap();
    let ys = render_microphone_signals(&scene, &[sum], None).unwrap();
    for j in 0..4 {
        for n in 0..4000 {
            assert!((ys[j][n] - yx[j][n] - yu[j][n]).abs() <= 1e-12);
        }
    }
    let noise = Some(SelfNoise { std: 0.01, seed: 5 });
    let a = render_microphone_signals(&scene, &[vec![0.0; 4000]], noise).unwrap();
    let b = render_microphone_signals(&scene, &[vec![0.0; 4000]], noise).unwrap();
    assert_eq!(a, b);
    let var = a[0].iter().map(|v| v * v).sum::<f64>() / 4000.0;
    assert!((var.sqrt() / 0.01 - 1.0).abs() < 0.05);
}

#[test]
fn bmvdr_pipeline_passes_the_target_undistorted() {
    // target only: the left output should reproduce the left reference
    // microphone signal up to the narrowband approximation
    let params = StftParams::standard();
    let scene = single_source_scene(90.0);
    let (rl, rr) = scene.geometry.refs();
    let atfs = scene.sources[0].atfs(&scene.geometry, params.fft_size()).unwrap();
    let p = BlockCpsd::new(&self_noise_cpsd(4, 1e-6).unwrap()).unwrap();
    let filters: Vec<_> = atfs.iter().map(|a| bmvdr(&p, a, rl, rr).unwrap()).collect();

    let y = render_microphone_signals(&scene, &[white_noise(32_000, 3)], None).unwrap();
    let out = synthesize(&apply_binaural_filter(&analyze(&y, &params).unwrap(), &filters).unwrap());
    let l = params.frame_length();
    for (ch, reference) in [(0, rl), (1, rr)] {
        let range = 2 * l..y[0].len() - 2 * l;
        let err: f64 = range.clone().map(|n| (out[ch][n] - y[reference][n]).powi(2)).sum();
        let energy: f64 = range.map(|n| y[reference][n].powi(2)).sum();
        let db = 10.0 * (err / energy).log10();
        assert!(db < -20.0, "channel {ch}: error {db:.1} dB");
    }
}
