use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;

fn config(source: Vec3, mics: Vec<Vec3>, rt60: f64) -> SceneConfig {
    SceneConfig {
        room: [6.0, 5.0, 3.0],
        source,
        mics,
        rt60,
        snr_db: 10.0,
        sample_rate: 16_000,
        seed: 1,
    }
}

fn standard_line(center: Vec3) -> Vec<Vec3> {
    let offsets = [-0.11, -0.03, 0.03, 0.11];
    offsets.iter().map(|o| [center[0] + o, center[1], center[2]]).collect()
}

#[test]
fn anechoic_limit_is_a_single_pulse() {
    let cfg = config([1.0, 1.0, 1.5], vec![[4.0, 3.0, 1.2]], 0.01);
    assert_eq!(reflection_coefficient(cfg.room, cfg.rt60), 0.0);
    let h = simulate_rir(&cfg, 0).unwrap();
    let delay = cfg.direct_delay(0);
    let d = distance(cfg.source, cfg.mics[0]);
    let mut expected = vec![0.0; h.taps.len()];
    rir::add_pulse(&mut expected, delay, 1.0 / (4.0 * std::f64::consts::PI * d));
    assert_eq!(h.taps, expected);
    assert_eq!(h.peak_index(), delay.round() as usize);
    let first = h.taps.iter().position(|&v| v != 0.0).unwrap();
    let last = h.taps.iter().rposition(|&v| v != 0.0).unwrap();
    assert!(last - first <= 2 * PULSE_HALF_WIDTH);
}

#[test]
fn direct_path_onset_at_geometric_delay() {
    // 3.43 m apart: 3.43 / 343 * 16000 = 160 samples
    let cfg = config([1.0, 2.0, 1.5], vec![[4.43, 2.0, 1.5]], 0.2);
    let h = simulate_rir(&cfg, 0).unwrap();
    assert!((h.peak_index() as i64 - 160).abs() <= 1);
}

#[test]
fn schroeder_decay_matches_requested_rt60() {
    let cfg = config([1.5, 1.2, 1.6], standard_line([4.0, 3.5, 1.3]), 0.2);
    for m in 0..4 {
        let h = simulate_rir(&cfg, m).unwrap();
        let t60 = schroeder_t60(&h.taps, 16_000).unwrap();
        assert!((t60 / 0.2 - 1.0).abs() < 0.3, "mic {m}: {t60}");
    }
}

#[test]
fn smoothed_energy_decays_after_the_direct_path() {
    let cfg = config([1.5, 1.2, 1.6], standard_line([4.0, 3.5, 1.3]), 0.2);
    let h = simulate_rir(&cfg, 0).unwrap();
    let start = h.peak_index() + PULSE_HALF_WIDTH + 1;
    let win = 160;
    let energies: Vec<f64> = h.taps[start..]
        .chunks_exact(win)
        .map(|c| c.iter().map(|v| v * v).sum())
        .collect();
    assert!(energies.len() > 10);
    // individual reflections make adjacent windows jitter; over 30 ms the decay dominates
    for k in 0..energies.len() - 3 {
        assert!(energies[k + 3] < energies[k], "window {k}: {energies:?}");
    }
}

#[test]
fn rir_errors_and_determinism() {
    let same = config([2.0, 2.0, 1.5], vec![[2.0, 2.0, 1.5]], 0.2);
    assert!(simulate_rir(&same, 0).is_err());
    let cfg = config([1.0, 2.0, 1.5], vec![[3.0, 2.5, 1.5]], 0.2);
    assert_eq!(simulate_rir(&cfg, 0).unwrap(), simulate_rir(&cfg, 0).unwrap());
    assert!(simulate_rir(&cfg, 1).is_err());
    let outside = config([0.05, 2.0, 1.5], vec![[3.0, 2.5, 1.5]], 0.2);
    assert!(simulate_rir(&outside, 0).is_err());
}

fn speech(seed: u64, n: usize) -> Vec<f64> {
    synthetic_speech(&mut ChaCha8Rng::seed_from_u64(seed), n, 16_000)
}

fn mono_noise(seed: u64, n: usize) -> Waveform {
    let v = noise_source(
        NoiseKind::BabbleSurrogate,
        &mut ChaCha8Rng::seed_from_u64(seed),
        n,
        16_000,
    )
    .unwrap();
    Waveform::mono(v, 16_000)
}

#[test]
fn reference_snr_is_exact() {
    let n = 16_000;
    for &snr in &[5.0, 9.3, 15.0] {
        let mut cfg = config([1.5, 1.2, 1.6], standard_line([4.0, 3.5, 1.3]), 0.2);
        cfg.snr_db = snr;
        let mix = render_scene(&speech(2, n), &mono_noise(3, 4 * n), &cfg).unwrap();
        let p_s = power(mix.reverberant.channel(0));
        let p_n = power(mix.scaled_noise.channel(0));
        assert!((10.0 * (p_s / p_n).log10() - snr).abs() < 0.1);
    }
}

#[test]
fn mixture_is_speech_plus_noise() {
    let n = 8_000;
    let cfg = config([1.5, 1.2, 1.6], standard_line([4.0, 3.5, 1.3]), 0.2);
    let mix = render_scene(&speech(4, n), &mono_noise(5, 4 * n), &cfg).unwrap();
    for m in 0..4 {
        for i in 0..n {
            let diff = mix.noisy.channel(m)[i] - mix.scaled_noise.channel(m)[i];
            let r = mix.reverberant.channel(m)[i];
            assert!((diff - r).abs() <= f64::EPSILON * mix.noisy.channel(m)[i].abs().max(r.abs()));
        }
    }
}

#[test]
fn anechoic_noiseless_reference_is_scaled_target() {
    let n = 4_000;
    let cfg = config([1.5, 1.2, 1.6], vec![[4.0, 3.5, 1.3]], 0.01);
    let silent = Waveform::mono(vec![0.0; n], 16_000);
    let mix = render_scene(&speech(6, n), &silent, &cfg).unwrap();
    assert_eq!(mix.noise_gain, 0.0);
    let gain = 1.0 / (4.0 * std::f64::consts::PI * distance(cfg.source, cfg.mics[0]));
    for (x, t) in mix.noisy.channel(0).iter().zip(&mix.target) {
        assert!((x - gain * t).abs() < 1e-12);
    }
}

#[test]
fn inter_mic_delay_matches_geometry() {
    let cfg = config([1.0, 1.0, 1.3], standard_line([4.0, 3.0, 1.3]), 0.2);
    let h0 = simulate_rir(&cfg, 0).unwrap();
    let h3 = simulate_rir(&cfg, 3).unwrap();
    let measured = h3.peak_index() as f64 - h0.peak_index() as f64;
    let geometric = cfg.direct_delay(3) - cfg.direct_delay(0);
    assert!((measured - geometric).abs() <= 1.0, "{measured} vs {geometric}");
    // ordering of arrivals follows ordering of distances
    let mut by_peak: Vec<usize> = (0..4).collect();
    by_peak.sort_by_key(|&m| simulate_rir(&cfg, m).unwrap().peak_index());
    let mut by_dist: Vec<usize> = (0..4).collect();
    by_dist.sort_by(|&a, &b| cfg.direct_delay(a).total_cmp(&cfg.direct_delay(b)));
    assert_eq!(by_peak, by_dist);
}

#[test]
fn silent_speech_rejected() {
    let cfg = config([1.0, 1.0, 1.3], standard_line([4.0, 3.0, 1.3]), 0.2);
    assert!(render_scene(&vec![0.0; 100], &mono_noise(1, 400), &cfg).is_err());
    assert!(render_scene(&speech(1, 100), &mono_noise(1, 300), &cfg).is_err());
}

#[test]
fn rendering_is_deterministic() {
    let cfg = config([1.0, 1.0, 1.3], standard_line([4.0, 3.0, 1.3]), 0.2);
    let a = render_scene(&speech(7, 4000), &mono_noise(8, 16_000), &cfg).unwrap();
    let b = render_scene(&speech(7, 4000), &mono_noise(8, 16_000), &cfg).unwrap();
    assert_eq!(a.noisy, b.noisy);
    assert_eq!(a.target, b.target);
}

#[test]
fn standard_protocol_ranges() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut snr_sum = 0.0;
    let n = 10_000;
    let (mut min_x, mut max_x) = (f64::MAX, f64::MIN);
    for i in 0..n {
        let c = sample_scene_config(&mut rng, &Protocol::Standard, i).unwrap();
        min_x = min_x.min(c.room[0]);
        max_x = max_x.max(c.room[0]);
        assert!((4.5..=6.5).contains(&c.room[1]));
        assert!((2.5..=3.0).contains(&c.room[2]));
        assert!((5.0..=15.0).contains(&c.snr_db));
        assert_eq!(c.rt60, 0.2);
        assert_eq!(c.mics.len(), 4);
        for (k, w) in c.mics.windows(2).enumerate() {
            assert!((distance(w[0], w[1]) - STANDARD_MIC_SPACINGS[k]).abs() < 1e-12);
        }
        snr_sum += c.snr_db;
    }
    assert!(min_x >= 4.5 && max_x <= 6.5);
    assert!((snr_sum / n as f64 - 10.0).abs() < 0.1);
}

#[test]
fn sampling_is_seeded() {
    let draw = || sample_scene_config(&mut ChaCha8Rng::seed_from_u64(3), &Protocol::Standard, 3).unwrap();
    assert_eq!(draw(), draw());
}

#[test]
fn config_text_round_trip() {
    let c = sample_scene_config(&mut ChaCha8Rng::seed_from_u64(4), &Protocol::Standard, 77).unwrap();
    assert_eq!(SceneConfig::from_text(&c.to_text()).unwrap(), c);
    assert!(SceneConfig::from_text("room = 1 2\n").is_err());
}
