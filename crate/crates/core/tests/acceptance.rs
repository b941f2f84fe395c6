//! End-to-end acceptance checks A1 to A10. Each test prints one
//! `A<n> PASS|FAIL ...` line to stderr before asserting.

use std::collections::BTreeSet;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::Instant;

use candle_core::{DType, Device, Tensor, Var};
use cocola::componet::{
    base_train, build_prompt, classify_task, ddpm_sample, sample_task, score_matching_loss,
    AdapterModel, Denoiser, DenoiserConfig, DiffusionBatch, NoiseSchedule, Prompt, TaskLabel,
    TaskPolicy,
};
use cocola::dataset::{DatasetManifest, Split, StemTrack, TagVocabulary};
use cocola::encoder::{similarity_matrix_tensor, BackboneScale, Encoder};
use cocola::evaluation::{cocola_score, evaluate_classification, roc_auc, BatchCount, EvalConfig};
use cocola::sampling::{
    draw_disjoint_pair, make_pair, overlap, sample_windows, Rng, SamplerConfig, SubsetMode, Window,
};
use cocola::synthbench::{generate, SynthMeta, SynthSpec};
use cocola::training::{
    contrastive_loss, contrastive_loss_grad, contrastive_loss_tensor, estimate_feature_stats,
    load_checkpoint, load_tracks, save_checkpoint, train, TrainConfig, Trainer,
};
use ndarray::Array2;
use rand::{Rng as _, SeedableRng};
use rand_distr::{Distribution, StandardNormal};

fn report(id: &str, pass: bool, detail: String) {
    let line = format!("\n{id} {} {detail}\n", if pass { "PASS" } else { "FAIL" });
    let _ = std::io::stderr().write_all(line.as_bytes());
    assert!(pass, "{id} failed: {detail}");
}

/// Runs the checks one at a time so wallclock budgets are not shared.
fn serial() -> MutexGuard<'static, ()> {
    static LOCK: Mutex<()> = Mutex::new(());
    LOCK.lock().unwrap_or_else(|e| e.into_inner())
}

fn randn_vec(n: usize, rng: &mut Rng) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

struct Bench {
    _dir: tempfile::TempDir,
    manifest: DatasetManifest,
    meta: SynthMeta,
    generate_secs: f64,
}

fn bench() -> &'static Bench {
    static BENCH: OnceLock<Bench> = OnceLock::new();
    BENCH.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let start = Instant::now();
        let out = generate(&SynthSpec::default(), dir.path()).unwrap();
        Bench {
            manifest: out.manifest,
            meta: out.meta,
            generate_secs: start.elapsed().as_secs_f64(),
            _dir: dir,
        }
    })
}

fn toy_config() -> TrainConfig {
    let mut cfg = TrainConfig::default();
    cfg.seed = 0;
    cfg.sampler.seed = 0;
    cfg.max_steps = 800;
    cfg.eval_every = 800;
    cfg.learning_rate = 2e-3;
    cfg.sampler.batch_size = 32;
    cfg.sampler.window_len = 16_000;
    cfg.encoder.embedding_dim = 128;
    cfg.encoder.backbone_scale = BackboneScale::Toy;
    cfg.encoder.standardize_features = true;
    cfg
}

struct Trained {
    _dir: tempfile::TempDir,
    encoder: Encoder,
    sampler: SamplerConfig,
    train_secs: f64,
}

fn trained() -> &'static Trained {
    static TRAINED: OnceLock<Trained> = OnceLock::new();
    TRAINED.get_or_init(|| {
        let b = bench();
        let dir = tempfile::tempdir().unwrap();
        let cfg = toy_config();
        let start = Instant::now();
        let out = train(&b.manifest, &cfg, dir.path()).unwrap();
        let ckpt = load_checkpoint(&out.final_path).unwrap();
        Trained {
            encoder: ckpt.encoder,
            sampler: cfg.sampler,
            train_secs: start.elapsed().as_secs_f64(),
            _dir: dir,
        }
    })
}

#[test]
fn a1_synthetic_benchmark_accuracy() {
    let _serial = serial();
    let b = bench();
    let t = trained();
    let start = Instant::now();
    let cfg = EvalConfig {
        k: 2,
        n_batches: BatchCount::Batches(1000),
        split: Split::Test,
        seed: 1,
    };
    let r = evaluate_classification(&t.encoder, &t.sampler, &b.manifest, &cfg).unwrap();
    let total = b.generate_secs + t.train_secs + start.elapsed().as_secs_f64();
    report(
        "A1",
        r.accuracy >= 0.90 && total <= 900.0,
        format!(
            "held-out K=2 accuracy {:.4} (+/-{:.4}, need >= 0.90) after 800 steps; runtime {:.0} s (limit 900 s)",
            r.accuracy, r.confidence_half_width, total
        ),
    );
}

#[test]
fn a2_untrained_model_is_at_chance() {
    let _serial = serial();
    let b = bench();
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = toy_config();
    cfg.seed = 17;
    let mut trainer = Trainer::new(cfg.clone()).unwrap();
    let train_tracks = load_tracks(&b.manifest, Split::Train, 16_000).unwrap();
    let stats = estimate_feature_stats(trainer.encoder(), &train_tracks).unwrap();
    trainer
        .encoder_mut()
        .set_feature_stats(Some(stats))
        .unwrap();
    let path = dir.path().join("random.safetensors");
    save_checkpoint(&trainer.checkpoint(), &path).unwrap();
    let encoder = load_checkpoint(&path).unwrap().encoder;
    let eval = EvalConfig {
        k: 2,
        n_batches: BatchCount::Batches(2000),
        split: Split::Test,
        seed: 2,
    };
    let r = evaluate_classification(&encoder, &cfg.sampler, &b.manifest, &eval).unwrap();
    report(
        "A2",
        (r.accuracy - 0.5).abs() <= 0.05,
        format!(
            "untrained K=2 accuracy {:.4} over {} batches (need 0.50 +/- 0.05)",
            r.accuracy, r.n_batches
        ),
    );
}

#[test]
fn a3_loss_identities() {
    let _serial = serial();
    let one = contrastive_loss(&Array2::from_elem((1, 1), 3.7)).unwrap();
    let mut worst = 0f64;
    for k in [2usize, 3, 8, 32] {
        let got = contrastive_loss(&Array2::from_elem((k, k), 0.25)).unwrap();
        worst = worst.max((got - k as f64 * (k as f64).ln()).abs());
    }
    let s = ndarray::array![[10.0, 0.0], [0.0, 10.0]];
    let got = contrastive_loss(&s).unwrap();
    let diag_err = (got - 2.0 * (1.0 + (-10f64).exp()).ln()).abs();
    let t = Tensor::new(&[[10f64, 0.0], [0.0, 10.0]], &Device::Cpu).unwrap();
    let tensor_err = (contrastive_loss_tensor(&t, false)
        .unwrap()
        .to_scalar::<f64>()
        .unwrap()
        - got)
        .abs();
    report(
        "A3",
        one == 0.0 && worst <= 1e-9 && diag_err <= 1e-9 && tensor_err <= 1e-9,
        format!("K=1 loss {one}; uniform max error {worst:.2e}; diagonal case error {diag_err:.2e}; tensor path error {tensor_err:.2e}"),
    );
}

fn window_at(track: &StemTrack, index: usize, len: usize, rng: &mut Rng) -> Window {
    let offset = rng.random_range(0..=track.n_samples() - len);
    Window::cut(track, index, offset, len).unwrap()
}

#[test]
fn a4_true_pairs_outscore_shuffled_pairs() {
    let _serial = serial();
    let b = bench();
    let t = trained();
    let tracks = load_tracks(&b.manifest, Split::Test, 16_000).unwrap();
    let len = t.sampler.window_len;
    let silence = t.sampler.silence_rms;
    let mut rng = Rng::seed_from_u64(44);
    let mut positives = Vec::new();
    for i in 0..100 {
        let idx = i % tracks.len();
        let w = window_at(&tracks[idx], idx, len, &mut rng);
        let p = make_pair(&w, SubsetMode::RandomSubmix, silence, &mut rng).unwrap();
        positives.push(cocola_score(&t.encoder, &p.mix_1, &p.mix_2).unwrap());
    }
    let mut negatives = Vec::new();
    while negatives.len() < 100 {
        let i = rng.random_range(0..tracks.len());
        let j = rng.random_range(0..tracks.len());
        if i == j || b.meta.collide(&tracks[i].track_id, &tracks[j].track_id) {
            continue;
        }
        let wa = window_at(&tracks[i], i, len, &mut rng);
        let wb = window_at(&tracks[j], j, len, &mut rng);
        let pa = make_pair(&wa, SubsetMode::RandomSubmix, silence, &mut rng).unwrap();
        let pb = make_pair(&wb, SubsetMode::RandomSubmix, silence, &mut rng).unwrap();
        negatives.push(cocola_score(&t.encoder, &pa.mix_1, &pb.mix_2).unwrap());
    }
    let median = |v: &[f64]| {
        let mut s = v.to_vec();
        s.sort_by(f64::total_cmp);
        (s[s.len() / 2 - 1] + s[s.len() / 2]) / 2.0
    };
    let (mp, mn) = (median(&positives), median(&negatives));
    let auc = roc_auc(&positives, &negatives).unwrap();
    report(
        "A4",
        mp > mn && auc >= 0.90,
        format!("median CCS true {mp:.4} vs shuffled {mn:.4}; ROC-AUC {auc:.4} (need >= 0.90)"),
    );
}

fn random_prompt(vocab: &TagVocabulary, rng: &mut Rng) -> Prompt {
    let task = sample_task(vocab.len(), &TaskPolicy::All, rng).unwrap();
    let tags = |idx: &[usize]| {
        idx.iter()
            .map(|&i| vocab.tag(i).unwrap().to_string())
            .collect::<Vec<_>>()
    };
    build_prompt(&tags(&task.inputs), &tags(&task.outputs), vocab).unwrap()
}

fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    (a - b)
        .unwrap()
        .abs()
        .unwrap()
        .flatten_all()
        .unwrap()
        .max(0)
        .unwrap()
        .to_dtype(DType::F64)
        .unwrap()
        .to_scalar::<f64>()
        .unwrap()
}

#[test]
fn a5_fresh_adapter_matches_base() {
    let _serial = serial();
    let vocab = TagVocabulary::new(["bass", "drums", "guitar", "piano"]).unwrap();
    let sizes = [
        (1usize, 8usize, 1usize, 16usize),
        (2, 16, 2, 32),
        (4, 32, 3, 64),
    ];
    let mut rng = Rng::seed_from_u64(5);
    let mut worst = 0f64;
    for (channels, width, levels, len) in sizes {
        let cfg = DenoiserConfig {
            latent_channels: channels,
            width,
            levels,
            n_tags: vocab.len(),
            ..DenoiserConfig::default()
        };
        let base = Denoiser::new(cfg, DType::F32, &mut rng).unwrap();
        let model = AdapterModel::new(base.clone(), &mut rng).unwrap();
        for _ in 0..100 {
            let z = Tensor::from_vec(
                randn_vec(channels * len, &mut rng),
                (1, channels, len),
                &Device::Cpu,
            )
            .unwrap()
            .to_dtype(DType::F32)
            .unwrap();
            let w = Tensor::from_vec(
                randn_vec(channels * len, &mut rng),
                (1, channels, len),
                &Device::Cpu,
            )
            .unwrap()
            .to_dtype(DType::F32)
            .unwrap();
            let prompts = [random_prompt(&vocab, &mut rng)];
            let t = [rng.random_range(0..=100usize)];
            let a = base.forward(&z, &prompts, &t).unwrap();
            let b = model.forward(&z, &prompts, &t, &w).unwrap();
            worst = worst.max(max_abs_diff(&a, &b));
        }
    }
    report(
        "A5",
        worst <= 1e-6,
        format!("max |adapter - base| {worst:.3e} over 3 sizes x 100 inputs (need <= 1e-6)"),
    );
}

#[test]
fn a6_forward_process_statistics() {
    let _serial = serial();
    let schedule = NoiseSchedule::cosine(100).unwrap();
    let n = 10_000;
    let z0 = 1.5f64;
    let mut rng = Rng::seed_from_u64(6);
    let z = Tensor::from_vec(vec![z0; n], (n, 1, 1), &Device::Cpu).unwrap();
    let mut failures = Vec::new();
    let mut worst_sigma = 0f64;
    for t in [1usize, 25, 50, 75, 100] {
        let eps = Tensor::from_vec(randn_vec(n, &mut rng), (n, 1, 1), &Device::Cpu).unwrap();
        let zt = schedule
            .forward_noise_tensor(&z, &vec![t; n], &eps)
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1::<f64>()
            .unwrap();
        let ab = schedule.alpha_bar(t).unwrap();
        let (mean_ref, var_ref) = (ab.sqrt() * z0, 1.0 - ab);
        let mean = zt.iter().sum::<f64>() / n as f64;
        let var = zt.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let mean_se = (var_ref / n as f64).sqrt();
        let var_se = var_ref * (2.0 / (n - 1) as f64).sqrt();
        let dev = ((mean - mean_ref).abs() / mean_se).max((var - var_ref).abs() / var_se);
        worst_sigma = worst_sigma.max(dev);
        if dev > 3.0 {
            failures.push(format!(
                "t={t}: mean {mean:.4}/{mean_ref:.4} var {var:.4}/{var_ref:.4}"
            ));
        }
    }
    let snr: Vec<f64> = (0..=schedule.max_step())
        .map(|t| schedule.snr(t).unwrap())
        .collect();
    let decreasing = snr.windows(2).all(|w| w[1] < w[0]);
    report(
        "A6",
        failures.is_empty() && decreasing,
        format!(
            "worst moment deviation {worst_sigma:.2} sigma at 5 steps (need <= 3){}; SNR strictly decreasing over {} steps: {decreasing}",
            if failures.is_empty() { String::new() } else { format!(" [{}]", failures.join("; ")) },
            snr.len()
        ),
    );
}

fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        .sqrt();
    let scale: f64 = numeric
        .iter()
        .map(|b| b * b)
        .sum::<f64>()
        .sqrt()
        .max(1e-300);
    diff / scale
}

/// Central differences of `f` at the listed coordinates of `var`.
fn numeric_grad(var: &Var, coords: &[usize], h: f64, mut f: impl FnMut() -> f64) -> Vec<f64> {
    let shape = var.as_tensor().shape().clone();
    let base = var
        .as_tensor()
        .flatten_all()
        .unwrap()
        .to_vec1::<f64>()
        .unwrap();
    let mut out = Vec::new();
    for &c in coords {
        let mut v = base.clone();
        v[c] = base[c] + h;
        var.set(&Tensor::from_vec(v.clone(), shape.clone(), &Device::Cpu).unwrap())
            .unwrap();
        let up = f();
        v[c] = base[c] - h;
        var.set(&Tensor::from_vec(v, shape.clone(), &Device::Cpu).unwrap())
            .unwrap();
        let down = f();
        out.push((up - down) / (2.0 * h));
    }
    var.set(&Tensor::from_vec(base, shape, &Device::Cpu).unwrap())
        .unwrap();
    out
}

fn pick(grad: &Tensor, coords: &[usize]) -> Vec<f64> {
    let g = grad.flatten_all().unwrap().to_vec1::<f64>().unwrap();
    coords.iter().map(|&c| g[c]).collect()
}

#[test]
fn a7_gradient_checks() {
    let _serial = serial();
    let mut rng = Rng::seed_from_u64(7);
    let k = 5;
    let s = Array2::from_shape_vec((k, k), randn_vec(k * k, &mut rng)).unwrap();
    let g = contrastive_loss_grad(&s).unwrap();
    let mut numeric = Vec::new();
    for idx in 0..k * k {
        let (i, j) = (idx / k, idx % k);
        let mut up = s.clone();
        up[[i, j]] += 1e-6;
        let mut down = s.clone();
        down[[i, j]] -= 1e-6;
        numeric.push((contrastive_loss(&up).unwrap() - contrastive_loss(&down).unwrap()) / 2e-6);
    }
    let closed_form = rel_err(&g.iter().copied().collect::<Vec<_>>(), &numeric);

    let dim = 6;
    let h1 = Tensor::from_vec(randn_vec(k * dim, &mut rng), (k, dim), &Device::Cpu).unwrap();
    let h2 = Tensor::from_vec(randn_vec(k * dim, &mut rng), (k, dim), &Device::Cpu).unwrap();
    let w = Var::from_tensor(
        &Tensor::from_vec(randn_vec(dim * dim, &mut rng), (dim, dim), &Device::Cpu).unwrap(),
    )
    .unwrap();
    let head_loss = |w: &Var| {
        contrastive_loss_tensor(
            &similarity_matrix_tensor(&h1, &h2, w.as_tensor()).unwrap(),
            false,
        )
        .unwrap()
    };
    let grads = head_loss(&w).backward().unwrap();
    let coords: Vec<usize> = (0..dim * dim).collect();
    let analytic = pick(grads.get(&w).unwrap(), &coords);
    let numeric = numeric_grad(&w, &coords, 1e-6, || {
        head_loss(&w).to_scalar::<f64>().unwrap()
    });
    let head = rel_err(&analytic, &numeric);

    let vocab = TagVocabulary::new(["bass", "drums", "guitar"]).unwrap();
    let cfg = DenoiserConfig {
        latent_channels: 2,
        width: 6,
        levels: 1,
        cond_dim: 8,
        time_dim: 8,
        n_tags: vocab.len(),
        kernel: 3,
    };
    let den = Denoiser::new(cfg, DType::F64, &mut rng).unwrap();
    let (b, c, l) = (3, 2, 8);
    let zt = Tensor::from_vec(randn_vec(b * c * l, &mut rng), (b, c, l), &Device::Cpu).unwrap();
    let eps = Tensor::from_vec(randn_vec(b * c * l, &mut rng), (b, c, l), &Device::Cpu).unwrap();
    let prompts: Vec<Prompt> = (0..b).map(|_| random_prompt(&vocab, &mut rng)).collect();
    let t = [3usize, 40, 97];
    let sm_loss = || score_matching_loss(&den.forward(&zt, &prompts, &t).unwrap(), &eps).unwrap();
    let grads = sm_loss().backward().unwrap();
    let mut worst_sm = 0f64;
    let mut checked = 0;
    for name in den.params().names().map(str::to_string).collect::<Vec<_>>() {
        let var = den.params().get(&name).unwrap();
        let n = var.as_tensor().elem_count();
        let coords: Vec<usize> = (0..n.min(4))
            .map(|_| rng.random_range(0..n))
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let analytic = pick(grads.get(var).unwrap(), &coords);
        let numeric = numeric_grad(var, &coords, 1e-6, || sm_loss().to_scalar::<f64>().unwrap());
        worst_sm = worst_sm.max(rel_err(&analytic, &numeric));
        checked += coords.len();
    }
    report(
        "A7",
        closed_form <= 1e-4 && head <= 1e-4 && worst_sm <= 1e-4,
        format!(
            "relative errors: contrastive closed form {closed_form:.2e}, bilinear head autograd {head:.2e}, score matching {worst_sm:.2e} over {checked} coordinates (need <= 1e-4)"
        ),
    );
}

#[test]
fn a8_sampler_reproduces_gaussian() {
    let _serial = serial();
    let start = Instant::now();
    let mean = [0.5f64, -0.3];
    let cov = [[0.6f64, 0.25], [0.25, 0.4]];
    let l00 = cov[0][0].sqrt();
    let l10 = cov[1][0] / l00;
    let l11 = (cov[1][1] - l10 * l10).sqrt();
    let cfg = DenoiserConfig {
        latent_channels: 2,
        width: 32,
        levels: 2,
        n_tags: 1,
        ..DenoiserConfig::default()
    };
    let mut rng = Rng::seed_from_u64(8);
    let den = Denoiser::new(cfg, DType::F32, &mut rng).unwrap();
    let schedule = NoiseSchedule::cosine(100).unwrap();
    let prompt = Prompt {
        tokens: vec![1, 0],
        n_tags: 1,
    };
    let batch = 256;
    let gaussian_batch = |r: &mut Rng| {
        let mut z = Vec::with_capacity(2 * batch);
        for _ in 0..batch {
            let (a, b): (f64, f64) = (StandardNormal.sample(r), StandardNormal.sample(r));
            z.push((mean[0] + l00 * a) as f32);
            z.push((mean[1] + l10 * a + l11 * b) as f32);
        }
        Ok(DiffusionBatch {
            z: Tensor::from_vec(z, (batch, 2, 1), &Device::Cpu)?,
            w: None,
            prompts: vec![prompt.clone(); batch],
            labels: vec![TaskLabel::UG; batch],
        })
    };
    for (steps, lr) in [(2500, 2e-3), (1000, 2e-4)] {
        base_train(&den, steps, lr, &schedule, &mut rng, gaussian_batch).unwrap();
    }
    let n = 2000;
    let samples = ddpm_sample(
        &den,
        &vec![prompt; n],
        None,
        (2, 1),
        &schedule,
        100,
        DType::F32,
        &mut rng,
    )
    .unwrap()
    .flatten_all()
    .unwrap()
    .to_vec1::<f32>()
    .unwrap();
    let xs: Vec<[f64; 2]> = samples
        .chunks(2)
        .map(|p| [p[0] as f64, p[1] as f64])
        .collect();
    let m = [0, 1].map(|d| xs.iter().map(|x| x[d]).sum::<f64>() / n as f64);
    let mut c = [[0f64; 2]; 2];
    for x in &xs {
        for i in 0..2 {
            for j in 0..2 {
                c[i][j] += (x[i] - m[i]) * (x[j] - m[j]) / (n - 1) as f64;
            }
        }
    }
    let mean_err = ((m[0] - mean[0]).powi(2) + (m[1] - mean[1]).powi(2)).sqrt();
    let cov_err = (0..4)
        .map(|k| (c[k / 2][k % 2] - cov[k / 2][k % 2]).powi(2))
        .sum::<f64>()
        .sqrt();
    let secs = start.elapsed().as_secs_f64();
    report(
        "A8",
        mean_err <= 0.1 && cov_err <= 0.15 && secs <= 600.0,
        format!(
            "mean error {mean_err:.4} (need <= 0.1), covariance Frobenius error {cov_err:.4} (need <= 0.15), runtime {secs:.0} s (limit 600 s); sample mean [{:.3}, {:.3}]",
            m[0], m[1]
        ),
    );
}

#[test]
fn a9_structural_properties() {
    let _serial = serial();
    let mut rng = Rng::seed_from_u64(9);
    let mut disjoint_violations = 0;
    for i in 0..100_000 {
        let n = 2 + i % 5;
        let candidates: Vec<usize> = (0..8)
            .filter(|_| rng.random_bool(0.5))
            .chain(8..8 + n)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let mode = if i % 2 == 0 {
            SubsetMode::SingleStem
        } else {
            SubsetMode::RandomSubmix
        };
        let (a, b) = draw_disjoint_pair(&candidates, mode, &mut rng).unwrap();
        let sa: BTreeSet<_> = a.iter().collect();
        let sb: BTreeSet<_> = b.iter().collect();
        let ok = !a.is_empty()
            && !b.is_empty()
            && sa.is_disjoint(&sb)
            && a.iter().chain(&b).all(|x| candidates.contains(x))
            && (mode == SubsetMode::RandomSubmix || (a.len() == 1 && b.len() == 1));
        if !ok {
            disjoint_violations += 1;
        }
    }

    let tracks: Vec<StemTrack> = (0..3)
        .map(|i| {
            let n = 400 + 150 * i;
            let stems = (0..3)
                .map(|s| cocola::dataset::Stem {
                    tag: format!("s{s}"),
                    samples: (0..n)
                        .map(|k| ((k * (s + 1)) as f32 * 0.01).sin() * 0.3)
                        .collect(),
                })
                .collect();
            StemTrack::new(format!("t{i}"), 16_000, stems).unwrap()
        })
        .collect();
    let mut overlap_violations = 0;
    for i in 0..10_000 {
        let cfg = SamplerConfig {
            window_len: 100,
            max_overlap: [0.0, 0.25, 0.5, 0.9][i % 4],
            batch_size: 8,
            ..SamplerConfig::default()
        };
        let limit = (cfg.max_overlap * cfg.window_len as f64).floor() as usize;
        let windows = sample_windows(&tracks, &cfg, &mut rng).unwrap();
        for (a, wa) in windows.iter().enumerate() {
            if wa.offset + wa.len() > tracks[wa.track_index].n_samples()
                || wa.len() != cfg.window_len
            {
                overlap_violations += 1;
            }
            for wb in &windows[..a] {
                if wa.track_index == wb.track_index
                    && overlap(wa.offset, wb.offset, cfg.window_len) > limit
                {
                    overlap_violations += 1;
                }
            }
        }
    }

    let mut partition_errors = 0;
    let mut counted = 0;
    for n in 1..=4usize {
        let full = 1u32 << n;
        for y in 0..full {
            for x in 0..full {
                let set = |m: u32| (0..n).filter(|i| m >> i & 1 == 1).collect::<Vec<_>>();
                let valid = x != 0 && x != y;
                let inter = x & y;
                let holds = [
                    (TaskLabel::UG, y == 0),
                    (TaskLabel::AG, y != 0 && inter == 0),
                    (TaskLabel::SS, x & !y == 0 && x != y),
                    (TaskLabel::EA, y & !x == 0 && y != 0 && x != y),
                    (TaskLabel::ER, inter != 0 && x & !y != 0 && y & !x != 0),
                ];
                let matching: Vec<TaskLabel> = holds.iter().filter(|h| h.1).map(|h| h.0).collect();
                match (valid, classify_task(&set(y), &set(x))) {
                    (true, Ok(label)) => {
                        counted += 1;
                        if matching != [label] {
                            partition_errors += 1;
                        }
                    }
                    (false, Err(_)) => {}
                    _ => partition_errors += 1,
                }
            }
        }
    }
    report(
        "A9",
        disjoint_violations == 0 && overlap_violations == 0 && partition_errors == 0,
        format!(
            "disjointness violations {disjoint_violations}/100000; overlap violations {overlap_violations} in 10000 batches; partition gaps or overlaps {partition_errors} over {counted} valid tasks for 1-4 stems"
        ),
    );
}

fn cocola(args: &[&str]) {
    let out = Command::new(env!("CARGO_BIN_EXE_cocola"))
        .args(args)
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "cocola {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn files_under(dir: &Path, ext: &str) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = walkdir::WalkDir::new(dir)
        .sort_by_file_name()
        .into_iter()
        .filter_map(|e| e.ok())
        .map(|e| e.into_path())
        .filter(|p| p.extension().is_some_and(|e| e == ext))
        .collect();
    v.sort();
    v
}

#[test]
fn a10_cli_runs_are_reproducible() {
    let _serial = serial();
    let root = tempfile::tempdir().unwrap();
    let shared = root.path().join("shared");
    std::fs::create_dir_all(&shared).unwrap();
    let s = |p: &Path| p.to_str().unwrap().to_string();
    let synth0 = root.path().join("run0").join("synth");
    let manifest = synth0.join("manifest.json");
    let mut mismatches = Vec::new();
    let mut compared = 0;
    let mut same = |a: &Path, b: &Path| {
        compared += 1;
        if std::fs::read(a).unwrap() != std::fs::read(b).unwrap() {
            mismatches.push(a.file_name().unwrap().to_string_lossy().into_owned());
        }
    };

    let mut runs = Vec::new();
    for r in 0..2 {
        let dir = root.path().join(format!("run{r}"));
        let synth = dir.join("synth");
        cocola(&[
            "synth-data",
            "--n-tracks",
            "10",
            "--stems",
            "3",
            "--duration",
            "2",
            "--seed",
            "3",
            "--out",
            &s(&synth),
        ]);
        if r == 0 {
            let m = DatasetManifest::load(&manifest).unwrap();
            let train_entry = m.split(Split::Train).next().unwrap();
            let test_entry = m.split(Split::Test).next().unwrap();
            let pairs = shared.join("pairs.csv");
            let p = |e: &cocola::dataset::ManifestEntry, i: usize| s(&m.stem_path(&e.stems[i]));
            std::fs::write(
                &pairs,
                format!(
                    "pair_id,conditioning_path,candidate_path\nsame,{},{}\nother,{},{}\nmulti,{},{};{}\n",
                    p(train_entry, 0),
                    p(train_entry, 1),
                    p(train_entry, 0),
                    p(test_entry, 1),
                    p(test_entry, 0),
                    p(test_entry, 1),
                    p(test_entry, 2)
                ),
            )
            .unwrap();
            std::fs::write(
                shared.join("fad.csv"),
                "label,fad_clap,fad_encodec,fad_vggish\na,1.5,2.5,\n",
            )
            .unwrap();
        }
        cocola(&[
            "ingest",
            "--root",
            &s(&synth0.join("tracks")),
            "--seed",
            "1",
            "--out",
            &s(&dir.join("ingest").join("manifest.json")),
        ]);
        cocola(&[
            "train",
            "--manifest",
            &s(&manifest),
            "--out-dir",
            &s(&dir.join("train")),
            "--seed",
            "5",
            "--max-steps",
            "6",
            "--eval-every",
            "3",
            "--batch-size",
            "4",
            "--window-len",
            "16000",
            "--embedding-dim",
            "32",
            "--backbone",
            "toy",
            "--learning-rate",
            "0.002",
        ]);
        let ckpt = synth0
            .parent()
            .unwrap()
            .join("train")
            .join("final.safetensors");
        cocola(&[
            "eval",
            "--ckpt",
            &s(&ckpt),
            "--manifest",
            &s(&manifest),
            "--n-batches",
            "20",
            "--seed",
            "2",
            "--out",
            &s(&dir.join("eval.json")),
        ]);
        cocola(&[
            "score",
            "--ckpt",
            &s(&ckpt),
            "--pairs",
            &s(&shared.join("pairs.csv")),
            "--out",
            &s(&dir.join("score.csv")),
            "--ground-truth-manifest",
            &s(&manifest),
            "--ground-truth-n",
            "5",
            "--ground-truth-window",
            "16000",
            "--seed",
            "4",
        ]);
        cocola(&[
            "componet-train",
            "--manifest",
            &s(&manifest),
            "--out",
            &s(&dir.join("componet")),
            "--seed",
            "4",
            "--base-steps",
            "5",
            "--adapter-steps",
            "5",
        ]);
        let m = DatasetManifest::load(&manifest).unwrap();
        let e = m.split(Split::Test).next().unwrap();
        let (tag_in, tag_out) = (e.stems[0].tag.clone(), e.stems[1].tag.clone());
        cocola(&[
            "componet-generate",
            "--ckpt",
            &s(&dir.join("componet")),
            "--tags-in",
            &tag_in,
            "--tags-out",
            &tag_out,
            "--cond",
            &s(&m.stem_path(&e.stems[0])),
            "--steps",
            "10",
            "--seed",
            "9",
            "--out",
            &s(&dir.join("gen.wav")),
        ]);
        let score_json = s(&dir.join("score.json"));
        cocola(&[
            "report",
            "--input",
            &format!("a={score_json}"),
            "--input",
            &format!("b={score_json}"),
            "--fad",
            &s(&shared.join("fad.csv")),
            "--out",
            &s(&dir.join("report.csv")),
        ]);
        runs.push(dir);
    }

    let (a, b) = (&runs[0], &runs[1]);
    for rel in [
        "synth/manifest.json",
        "synth/synth_meta.json",
        "ingest/manifest.json",
        "train/metrics.csv",
        "train/config.json",
        "eval.json",
        "score.csv",
        "score.json",
        "componet/componet_metrics.csv",
        "gen.wav",
        "report.csv",
        "report.json",
    ] {
        same(&a.join(rel), &b.join(rel));
    }
    let wavs_a = files_under(&a.join("synth"), "wav");
    let wavs_b = files_under(&b.join("synth"), "wav");
    assert_eq!(wavs_a.len(), wavs_b.len());
    for (x, y) in wavs_a.iter().zip(&wavs_b) {
        same(x, y);
    }

    let probe_tracks = load_tracks(
        &DatasetManifest::load(&manifest).unwrap(),
        Split::Test,
        16_000,
    )
    .unwrap();
    let mut probe_rng = Rng::seed_from_u64(10);
    let clips: Vec<Vec<f32>> = (0..4)
        .map(|i| {
            let idx = i % probe_tracks.len();
            let w = window_at(&probe_tracks[idx], idx, 16_000, &mut probe_rng);
            cocola::sampling::mix_subset(&w, &(0..w.stems.len()).collect::<Vec<_>>()).unwrap()
        })
        .collect();
    let mut ckpt_diffs = 0;
    for name in ["step_000003.safetensors", "final.safetensors"] {
        let ea = load_checkpoint(&a.join("train").join(name))
            .unwrap()
            .encoder;
        let eb = load_checkpoint(&b.join("train").join(name))
            .unwrap()
            .encoder;
        let ha = ea.embed_many(&clips, 4).unwrap();
        let hb = eb.embed_many(&clips, 4).unwrap();
        if ha.iter().zip(&hb).any(|(x, y)| x.vector != y.vector) {
            ckpt_diffs += 1;
        }
    }
    report(
        "A10",
        mismatches.is_empty() && ckpt_diffs == 0,
        format!(
            "{} of {compared} primary outputs differ between runs{}; {ckpt_diffs} of 2 encoder checkpoints differ on the probe batch",
            mismatches.len(),
            if mismatches.is_empty() { String::new() } else { format!(" ({})", mismatches.join(", ")) }
        ),
    );
}
