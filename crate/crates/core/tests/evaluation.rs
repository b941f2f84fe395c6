use std::fs;
use std::path::Path;

use cocola::audio::write_wav_f32;
use cocola::dataset::{Split, Stem, StemTrack};
use cocola::encoder::{BackboneScale, Encoder, EncoderConfig};
use cocola::evaluation::{
    cocola_score, evaluate_tracks, read_pairs, score_report, select_loudest_candidate, BatchCount,
    EvalConfig, ScoreOptions, ScoreReport,
};
use cocola::sampling::{Rng, SamplerConfig};
use cocola::synthbench::{render_track, SynthSpec};
use cocola::training::estimate_feature_stats;
use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};

fn tracks(n: usize, duration: f64) -> Vec<StemTrack> {
    let spec = SynthSpec {
        n_tracks: n,
        duration,
        ..SynthSpec::default()
    };
    (0..n).map(|i| render_track(&spec, i).unwrap()).collect()
}

fn encoder(seed: u64) -> Encoder {
    let config = EncoderConfig {
        backbone_scale: BackboneScale::Toy,
        embedding_dim: 32,
        ..EncoderConfig::default()
    };
    Encoder::new(config, &mut Rng::seed_from_u64(seed)).unwrap()
}

fn sampler(window_len: usize) -> SamplerConfig {
    SamplerConfig {
        window_len,
        ..SamplerConfig::default()
    }
}

fn eval_config(k: usize, n: usize, seed: u64) -> EvalConfig {
    EvalConfig {
        k,
        n_batches: BatchCount::Batches(n),
        split: Split::Test,
        seed,
    }
}

/// Tracks of independent white-noise stems: no window carries information
/// about its partner, so any model must score at chance.
fn noise_tracks(n: usize, len: usize, rng: &mut Rng) -> Vec<StemTrack> {
    (0..n)
        .map(|i| {
            let stems = (0..4)
                .map(|s| Stem {
                    tag: format!("s{s}"),
                    samples: (0..len)
                        .map(|_| {
                            let v: f32 = StandardNormal.sample(rng);
                            0.1 * v
                        })
                        .collect(),
                })
                .collect();
            StemTrack::new(format!("n{i}"), 16_000, stems).unwrap()
        })
        .collect()
}

#[test]
fn untrained_model_scores_at_chance_on_unstructured_stems() {
    let mut rng = Rng::seed_from_u64(8);
    let data = noise_tracks(25, 96_000, &mut rng);
    let mut enc = encoder(11);
    let stats = estimate_feature_stats(&enc, &data).unwrap();
    enc.set_feature_stats(Some(stats)).unwrap();
    let k = 4;
    let r = evaluate_tracks(&enc, &data, &sampler(16_000), &eval_config(k, 1000, 3)).unwrap();
    let p = 1.0 / k as f64;
    let rows = (r.n_batches * k) as f64;
    let bound = 3.0 * (p * (1.0 - p) / rows).sqrt();
    assert!(
        (r.accuracy - p).abs() <= bound,
        "accuracy {} vs {p} +/- {bound}",
        r.accuracy
    );
}

#[test]
fn evaluation_is_reproducible_per_seed() {
    let data = tracks(6, 2.0);
    let enc = encoder(1);
    let a = evaluate_tracks(&enc, &data, &sampler(8000), &eval_config(2, 20, 7)).unwrap();
    let b = evaluate_tracks(&enc, &data, &sampler(8000), &eval_config(2, 20, 7)).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.n_batches, 20);
    assert!(a.confidence_half_width > 0.0 || a.accuracy == 1.0 || a.accuracy == 0.0);
}

#[test]
fn full_epoch_uses_every_non_overlapping_window_once() {
    let data = tracks(5, 2.0);
    let enc = encoder(2);
    let config = EvalConfig {
        n_batches: BatchCount::FullEpoch,
        ..eval_config(3, 1, 0)
    };
    let r = evaluate_tracks(&enc, &data, &sampler(8000), &config).unwrap();
    // 5 tracks x 4 windows, grouped in threes
    assert_eq!(r.n_batches, 20 / 3);
}

#[test]
fn invalid_evaluation_settings_are_rejected() {
    let data = tracks(3, 2.0);
    let enc = encoder(3);
    assert!(evaluate_tracks(&enc, &data, &sampler(8000), &eval_config(1, 10, 0)).is_err());
    assert!(evaluate_tracks(&enc, &data, &sampler(8000), &eval_config(2, 0, 0)).is_err());
    assert!(evaluate_tracks(&enc, &[], &sampler(8000), &eval_config(2, 10, 0)).is_err());
}

fn write_clip(dir: &Path, name: &str, track: &StemTrack, stem: usize) -> String {
    write_wav_f32(
        &dir.join(name),
        &track.stems[stem].samples,
        track.sample_rate,
    )
    .unwrap();
    name.to_string()
}

fn write_pairs(dir: &Path, rows: &[(String, String, String)]) -> std::path::PathBuf {
    let path = dir.join("pairs.csv");
    let mut text = String::from("pair_id,conditioning_path,candidate_path\n");
    for (id, c, x) in rows {
        text.push_str(&format!("{id},{c},{x}\n"));
    }
    fs::write(&path, text).unwrap();
    path
}

#[test]
fn identical_members_score_the_self_score() {
    let dir = tempfile::tempdir().unwrap();
    let data = tracks(1, 2.0);
    let clip = write_clip(dir.path(), "clip.wav", &data[0], 0);
    let rows: Vec<_> = (0..5)
        .map(|i| (format!("p{i}"), clip.clone(), clip.clone()))
        .collect();
    let pairs = read_pairs(&write_pairs(dir.path(), &rows)).unwrap();
    let enc = encoder(4);
    let report = score_report(&enc, &pairs, &ScoreOptions::default()).unwrap();
    let own = &data[0].stems[0].samples;
    let self_score = cocola_score(&enc, own, own).unwrap();
    assert_eq!(report.rows.len(), 5);
    for r in &report.rows {
        assert!(
            (r.ccs - self_score).abs() <= 1e-6 * self_score.abs().max(1.0),
            "{} vs {self_score}",
            r.ccs
        );
    }
}

#[test]
fn two_hundred_pairs_give_two_hundred_rows_and_consistent_aggregates() {
    let dir = tempfile::tempdir().unwrap();
    let data = tracks(4, 1.0);
    let mut clips = Vec::new();
    for (t, track) in data.iter().enumerate() {
        for s in 0..track.stems.len() {
            clips.push(write_clip(dir.path(), &format!("t{t}_s{s}.wav"), track, s));
        }
    }
    let rows: Vec<_> = (0..200)
        .map(|i| {
            (
                format!("pair{i:03}"),
                clips[i % clips.len()].clone(),
                clips[(i * 7 + 3) % clips.len()].clone(),
            )
        })
        .collect();
    let pairs = read_pairs(&write_pairs(dir.path(), &rows)).unwrap();
    let report = score_report(&encoder(5), &pairs, &ScoreOptions::default()).unwrap();
    assert_eq!(report.rows.len(), 200);
    assert!(report.errors.is_empty());
    let mean = report.rows.iter().map(|r| r.ccs).sum::<f64>() / 200.0;
    assert!((report.aggregates.mean - mean).abs() <= 1e-9 * mean.abs().max(1.0));
    assert_eq!(report.aggregates.count, 200);

    let csv = dir.path().join("scores.csv");
    report.write_csv(&csv).unwrap();
    assert_eq!(
        fs::read_to_string(&csv).unwrap().lines().count(),
        1 + 200 + 3
    );
    let json = dir.path().join("scores.json");
    report.write_json(&json).unwrap();
    assert_eq!(ScoreReport::read_json(&json).unwrap().rows.len(), 200);
}

#[test]
fn unreadable_pairs_become_error_records() {
    let dir = tempfile::tempdir().unwrap();
    let data = tracks(1, 1.0);
    let clip = write_clip(dir.path(), "ok.wav", &data[0], 1);
    fs::write(dir.path().join("broken.wav"), b"nope").unwrap();
    let rows = vec![
        ("good".to_string(), clip.clone(), clip.clone()),
        ("bad".to_string(), clip.clone(), "broken.wav".to_string()),
        ("gone".to_string(), "missing.wav".to_string(), clip),
    ];
    let pairs = read_pairs(&write_pairs(dir.path(), &rows)).unwrap();
    let report = score_report(&encoder(6), &pairs, &ScoreOptions::default()).unwrap();
    assert_eq!(report.rows.len(), 1);
    let failed: Vec<&str> = report.errors.iter().map(|e| e.pair_id.as_str()).collect();
    assert_eq!(failed, ["bad", "gone"]);
}

#[test]
fn pairs_file_needs_the_expected_header() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("pairs.csv");
    fs::write(&path, "id,a,b\nx,y,z\n").unwrap();
    assert!(read_pairs(&path).is_err());
    assert!(read_pairs(&dir.path().join("absent.csv")).is_err());
}

#[test]
fn loudest_candidate_is_selected() {
    let quiet = vec![0.01f32; 400];
    let loud = vec![0.5f32; 400];
    let mid = vec![0.1f32; 400];
    assert_eq!(select_loudest_candidate(&[quiet, loud, mid]).unwrap(), 1);
    assert!(select_loudest_candidate(&[]).is_err());
}

#[test]
fn clips_shorter_than_one_frame_are_rejected() {
    let enc = encoder(7);
    assert!(cocola_score(&enc, &[0.1; 100], &[0.1; 16_000]).is_err());
}
