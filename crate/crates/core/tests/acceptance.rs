//! End-to-end acceptance checks. Runs with its own harness so every criterion
//! prints a pass/fail line whether or not it succeeds.

mod common;

use std::path::Path;
use std::time::{Duration, Instant};

use dmha::autodiff::Graph;
use dmha::checkpoint::Checkpoint;
use dmha::config::RunConfig;
use dmha::encoder::{EncodedSequence, EncoderConfig};
use dmha::eval::{
    compute_eer, compute_min_dcf, evaluate, evaluate_model, extract_embeddings, score_trials, scores_to_text, trial_ids,
    DcfConfig, EmbeddingSet,
};
use dmha::features::{read_wav_checked, FeatureExtractor};
use dmha::gradsuite::{format_table, run_suite};
use dmha::head::{am_softmax_loss, cosine_logits, SpeakerEmbedding};
use dmha::pooling::{
    double_mha_pool, mha_pool, pooled_dim, self_attention_pool, PoolingConfig, PoolingKind, PoolingParams,
};
use dmha::synth::{all_trials, generate_corpus, Manifest, SynthConfig};
use dmha::trainer::{Dataset, Trainer};
use dmha::{rng, Tensor};

type Outcome = Result<(bool, String), String>;

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

// 1. gradient suite

fn gradients() -> Outcome {
    let start = Instant::now();
    let rows = run_suite(&[0, 1, 2, 3, 4]).map_err(err)?;
    let elapsed = start.elapsed();
    let worst = rows.iter().map(|r| r.worst).fold(0.0, f64::max);
    let ok = rows.iter().all(|r| r.passed()) && elapsed < Duration::from_secs(120);
    if !ok {
        print!("{}", format_table(&rows));
    }
    Ok((ok, format!("{} layers x 5 seeds, worst rel err {worst:.2e}, {:.1}s", rows.len(), elapsed.as_secs_f64())))
}

// 2. pooling equivalences

fn seq(t: usize, d: usize, seed: u64) -> EncodedSequence {
    EncodedSequence::new(Tensor::randn(&[t, d], 1.0, &mut rng::indexed_stream(seed, "accept/h", 0))).unwrap()
}

fn vector(n: usize, seed: u64, name: &str) -> Tensor {
    Tensor::randn(&[n], 1.0, &mut rng::indexed_stream(seed, name, 0))
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn columns(h: &EncodedSequence, from: usize, len: usize) -> EncodedSequence {
    let t = h.tensor();
    let d = t.shape()[1];
    let data: Vec<f64> = t.data().chunks(d).flat_map(|row| row[from..from + len].to_vec()).collect();
    EncodedSequence::new(Tensor::new(&[t.shape()[0], len], data).unwrap()).unwrap()
}

fn permuted(h: &EncodedSequence, seed: u64) -> EncodedSequence {
    use rand::seq::SliceRandom;
    let t = h.tensor();
    let d = t.shape()[1];
    let mut rows: Vec<&[f64]> = t.data().chunks(d).collect();
    rows.shuffle(&mut rng::indexed_stream(seed, "accept/perm", 0));
    EncodedSequence::new(Tensor::new(t.shape(), rows.concat()).unwrap()).unwrap()
}

fn pooling() -> Outcome {
    let mut worst = 0.0f64;
    for seed in 0..20u64 {
        let (t, d) = (5 + seed as usize % 7, 48);
        let h = seq(t, d, seed);
        let u = vector(d, seed, "accept/u");
        let single = |u_prime: Option<Tensor>| PoolingParams { u: u.clone(), u_prime, heads: 1 };

        let (att, _) = self_attention_pool(&h, &single(None)).map_err(err)?;
        let (m1, _) = mha_pool(&h, &single(None)).map_err(err)?;
        let (d1, _) = double_mha_pool(&h, &single(Some(vector(d, seed, "accept/u2")))).map_err(err)?;
        worst = worst.max(max_diff(att.pooled.data(), m1.pooled.data()));
        worst = worst.max(max_diff(att.pooled.data(), d1.pooled.data()));

        for k in [2, 4, 8] {
            let dh = d / k;
            let (mha, _) = mha_pool(&h, &PoolingParams { u: u.clone(), u_prime: None, heads: k }).map_err(err)?;
            let mut sliced = Vec::new();
            for j in 0..k {
                let part = columns(&h, j * dh, dh);
                let uj = Tensor::new(&[dh], u.data()[j * dh..(j + 1) * dh].to_vec()).unwrap();
                let (c, _) =
                    self_attention_pool(&part, &PoolingParams { u: uj, u_prime: None, heads: 1 }).map_err(err)?;
                sliced.extend_from_slice(c.pooled.data());
            }
            worst = worst.max(max_diff(mha.pooled.data(), &sliced));

            let dmha = PoolingParams { u: u.clone(), u_prime: Some(vector(dh, seed, "accept/u2")), heads: k };
            let (a, _) = double_mha_pool(&h, &dmha).map_err(err)?;
            let (b, _) = double_mha_pool(&permuted(&h, seed), &dmha).map_err(err)?;
            worst = worst.max(max_diff(a.pooled.data(), b.pooled.data()));
            let (b, _) = mha_pool(&permuted(&h, seed), &PoolingParams { u: u.clone(), u_prime: None, heads: k })
                .map_err(err)?;
            worst = worst.max(max_diff(mha.pooled.data(), b.pooled.data()));
        }
    }
    Ok((worst <= 1e-12, format!("max abs diff {worst:.2e} over 20 sequences")))
}

// 3. dimension grid

fn dimensions() -> Outcome {
    let mut bad = Vec::new();
    for (k, head_dim) in [(8, 640), (16, 320), (32, 160)] {
        if 5120 / k != head_dim {
            bad.push(format!("head dim K={k}"));
        }
        if pooled_dim(PoolingKind::Mha, 5120, k).map_err(err)? != 5120 {
            bad.push(format!("MHA K={k}"));
        }
        if pooled_dim(PoolingKind::DoubleMha, 5120, k).map_err(err)? != head_dim {
            bad.push(format!("DMHA K={k}"));
        }
        let h = EncodedSequence::new(Tensor::zeros(&[3, 5120])).unwrap();
        let dmha = PoolingParams { u: Tensor::zeros(&[5120]), u_prime: Some(Tensor::zeros(&[head_dim])), heads: k };
        let (c, w) = double_mha_pool(&h, &dmha).map_err(err)?;
        if c.pooled.len() != head_dim || c.heads.shape() != [k, head_dim] || w.w.shape() != [3, k] {
            bad.push(format!("DMHA shapes K={k}"));
        }
        let mha = PoolingParams { u: Tensor::zeros(&[5120]), u_prime: None, heads: k };
        let (c, _) = mha_pool(&h, &mha).map_err(err)?;
        if c.pooled.len() != 5120 || c.heads.shape() != [k, head_dim] {
            bad.push(format!("MHA shapes K={k}"));
        }
    }
    if pooled_dim(PoolingKind::Attention, 5120, 1).map_err(err)? != 5120 {
        bad.push("attention".into());
    }
    let detail = if bad.is_empty() { "MHA 5120, DMHA 640/320/160 for K=8/16/32".into() } else { bad.join(", ") };
    Ok((bad.is_empty(), detail))
}

// 4. metric oracles

fn metrics() -> Outcome {
    let dcf = DcfConfig::default();
    let mut mismatches = 0;
    for seed in 0..1000 {
        let (t, n) = common::random_scores(seed, 200);
        let eer = compute_eer(&t, &n).map_err(err)?;
        let min_dcf = compute_min_dcf(&t, &n, &dcf).map_err(err)?;
        if eer != common::oracle_eer(&t, &n) || min_dcf != common::oracle_dcf(&t, &n, dcf.c_m, dcf.c_fa, dcf.p_t) {
            mismatches += 1;
        }
        let f = |s: &f64| 3.0 * s * s * s + 2.0 * s - 1.0;
        let (ft, fnt): (Vec<f64>, Vec<f64>) = (t.iter().map(f).collect(), n.iter().map(f).collect());
        if compute_eer(&ft, &fnt).map_err(err)? != eer || compute_min_dcf(&ft, &fnt, &dcf).map_err(err)? != min_dcf {
            mismatches += 1;
        }
    }
    let fixture = compute_eer(&[0.8, 0.6, 0.4], &[0.7, 0.5, 0.3]).map_err(err)?;
    let fixture_ok = (fixture - 1.0 / 3.0).abs() < 1e-15;
    Ok((
        mismatches == 0 && fixture_ok,
        format!("1000 random sets, {mismatches} mismatches, fixture EER {fixture:.6}"),
    ))
}

// 5. desk run

fn averaged_mel(fx: &FeatureExtractor, manifest: &Manifest) -> Result<EmbeddingSet, String> {
    let items = manifest
        .entries
        .iter()
        .map(|e| {
            let audio = read_wav_checked(&e.path, fx.config()).map_err(err)?;
            let mel = fx.log_mel(&audio, fx.config().sample_rate).map_err(err)?;
            Ok(SpeakerEmbedding { id: e.utterance.clone(), vector: mel.mean_frame() })
        })
        .collect::<Result<Vec<_>, String>>()?;
    EmbeddingSet::new(items).map_err(err)
}

fn desk_run() -> Outcome {
    let start = Instant::now();
    let dir = tempfile::tempdir().map_err(err)?;
    let cfg = SynthConfig { num_speakers: 16, utts_per_speaker: 10, duration_s: 4.0, seed: 7, ..SynthConfig::default() };
    let manifest = generate_corpus(&cfg, dir.path()).map_err(err)?;
    let (train_set, test_set) = manifest.hold_out(3).map_err(err)?;
    let trials = all_trials(&test_set).map_err(err)?;

    let mut run = RunConfig::desk();
    run.model.num_speakers = 16;
    run.train.max_epochs = 30;
    let fx = FeatureExtractor::new(run.model.features.clone()).map_err(err)?;
    let dcf = DcfConfig::default();

    let (_, baseline) = evaluate(&trials, &averaged_mel(&fx, &test_set)?, &dcf).map_err(err)?;

    let data = Dataset::load(&fx, &train_set).map_err(err)?;
    let (train, val) = data.split(run.train.validation_fraction, run.train.seed).map_err(err)?;
    let mut trainer = Trainer::new(run, train, val).map_err(err)?;
    trainer.train(|_, _| Ok(())).map_err(err)?;
    let best_loss = trainer.log().iter().map(|e| e.train_loss).fold(f64::INFINITY, f64::min);
    let model = trainer.best_model().map_err(err)?;
    let (_, _, report) = evaluate_model(&model, &fx, &test_set, &trials, &dcf).map_err(err)?;
    let elapsed = start.elapsed();

    let ok = best_loss < 16f64.ln()
        && report.eer <= 0.10
        && baseline.eer > report.eer
        && elapsed < Duration::from_secs(15 * 60);
    Ok((
        ok,
        format!(
            "train loss {best_loss:.3} (ln16 {:.3}), EER {:.2}% vs averaged-mel {:.2}% on {} trials, {:.0}s",
            16f64.ln(),
            100.0 * report.eer,
            100.0 * baseline.eer,
            report.num_trials,
            elapsed.as_secs_f64()
        ),
    ))
}

// 6 and 7. small pipeline

fn tiny_run(num_speakers: usize) -> RunConfig {
    let mut run = RunConfig::desk();
    run.model.features.n_mels = 16;
    run.model.encoder = EncoderConfig::doubling(2, 16);
    run.model.pooling = PoolingConfig::new(PoolingKind::DoubleMha, 2);
    run.model.hidden = 8;
    run.model.num_speakers = num_speakers;
    run.train.chunk_frames = 64;
    run.train.batch_size = 4;
    run.train.lr = 1e-2;
    run.train.max_epochs = 3;
    run.train.validation_fraction = 0.2;
    run.train.seed = 5;
    run
}

fn small_corpus(dir: &Path) -> Result<(Manifest, Manifest), String> {
    let cfg = SynthConfig { num_speakers: 3, utts_per_speaker: 5, duration_s: 1.0, seed: 21, ..SynthConfig::default() };
    generate_corpus(&cfg, dir).map_err(err)?.hold_out(2).map_err(err)
}

fn small_data(train_set: &Manifest) -> Result<(Dataset, Dataset), String> {
    let run = tiny_run(3);
    let fx = FeatureExtractor::new(run.model.features).map_err(err)?;
    Dataset::load(&fx, train_set).map_err(err)?.split(0.2, run.train.seed).map_err(err)
}

fn small_trainer(train_set: &Manifest) -> Result<Trainer, String> {
    let (train, val) = small_data(train_set)?;
    Trainer::new(tiny_run(3), train, val).map_err(err)
}

/// Checkpoint, embedding file and score file bytes from a fresh run.
fn pipeline() -> Result<[Vec<u8>; 3], String> {
    let dir = tempfile::tempdir().map_err(err)?;
    let (train_set, test_set) = small_corpus(dir.path())?;
    let mut trainer = small_trainer(&train_set)?;
    trainer.train(|_, _| Ok(())).map_err(err)?;
    let ckpt = dir.path().join("model.ckpt");
    trainer.best_checkpoint().save(&ckpt).map_err(err)?;
    let model = trainer.best_model().map_err(err)?;
    let fx = FeatureExtractor::new(model.config().features.clone()).map_err(err)?;
    let trials = all_trials(&test_set).map_err(err)?;
    let emb = extract_embeddings(&model, &fx, &test_set, &trial_ids(&trials)).map_err(err)?;
    emb.save(&dir.path().join("embeddings.txt")).map_err(err)?;
    let scores = score_trials(&trials, &emb).map_err(err)?;
    std::fs::write(dir.path().join("scores.txt"), scores_to_text(&scores)).map_err(err)?;
    let read = |name: &str| std::fs::read(dir.path().join(name)).map_err(err);
    Ok([read("model.ckpt")?, read("embeddings.txt")?, read("scores.txt")?])
}

fn determinism() -> Outcome {
    let (a, b) = (pipeline()?, pipeline()?);
    let names = ["checkpoint", "embeddings", "scores"];
    let differing: Vec<&str> = names.iter().zip(a.iter().zip(&b)).filter(|(_, (x, y))| x != y).map(|(n, _)| *n).collect();
    let detail = if differing.is_empty() {
        format!("checkpoint {} B, embeddings {} B, scores {} B identical", a[0].len(), a[1].len(), a[2].len())
    } else {
        format!("differs: {}", differing.join(", "))
    };
    Ok((differing.is_empty(), detail))
}

fn advance(t: &mut Trainer, steps: usize) -> Result<(), String> {
    for _ in 0..steps {
        if t.step().map_err(err)?.is_none() {
            t.end_epoch().map_err(err)?;
            t.step().map_err(err)?.ok_or("empty epoch")?;
        }
    }
    Ok(())
}

fn checkpoints() -> Outcome {
    let dir = tempfile::tempdir().map_err(err)?;
    let (train_set, _) = small_corpus(dir.path())?;
    let mut unbroken = small_trainer(&train_set)?;
    advance(&mut unbroken, 2)?;
    let saved = unbroken.checkpoint().to_bytes();
    let path = dir.path().join("state.ckpt");
    std::fs::write(&path, &saved).map_err(err)?;
    let reloaded = Checkpoint::load(&path).map_err(err)?;
    let round_trip = reloaded.to_bytes() == saved;

    advance(&mut unbroken, 3)?;
    let (train, val) = small_data(&train_set)?;
    let mut resumed = Trainer::resume(&reloaded, train, val).map_err(err)?;
    advance(&mut resumed, 3)?;
    let resume_ok = resumed.checkpoint().to_bytes() == unbroken.checkpoint().to_bytes();
    Ok((
        round_trip && resume_ok,
        format!("save-load-save identical: {round_trip}, resume after 3 steps identical: {resume_ok}"),
    ))
}

// 8. loss sanity

fn scaled_cosine_ce(cos: &[f64], c: usize, label: usize, s: f64) -> f64 {
    let row = &cos[..c];
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m * s + row.iter().map(|v| (s * (v - m)).exp()).sum::<f64>().ln();
    lse - s * row[label]
}

fn argmax(row: &[f64]) -> usize {
    row.iter().enumerate().fold(0, |best, (i, v)| if *v > row[best] { i } else { best })
}

fn am_softmax() -> Outcome {
    let (n, f, c) = (6, 10, 7);
    let mut worst = 0.0f64;
    let mut flips = 0;
    for seed in 0..50u64 {
        let mut r = rng::indexed_stream(seed, "accept/am", 0);
        let x = Tensor::randn(&[n, f], 1.0, &mut r);
        let w = Tensor::randn(&[f, c], 1.0, &mut r);
        let labels: Vec<usize> = (0..n).map(|i| (i * 3 + seed as usize) % c).collect();

        let mut g = Graph::new();
        let (xv, wv) = (g.constant(x.clone()), g.constant(w.clone()));
        let out = cosine_logits(&mut g, xv, wv).map_err(err)?;
        let cos = g.value(out).clone();
        for s in [1.0, 5.0, 30.0] {
            let got = am_softmax_loss(&cos, &labels, s, 0.0).map_err(err)?;
            let want = (0..n).map(|i| scaled_cosine_ce(&cos.data()[i * c..], c, labels[i], s)).sum::<f64>() / n as f64;
            worst = worst.max((got - want).abs());
        }

        for alpha in [1e-3, 0.5, 7.0, 1e4] {
            let mut g = Graph::new();
            let xv = g.constant(Tensor::new(&[n, f], x.data().iter().map(|v| v * alpha).collect()).unwrap());
            let wv = g.constant(w.clone());
            let out = cosine_logits(&mut g, xv, wv).map_err(err)?;
            let scaled = g.value(out).clone();
            for i in 0..n {
                if argmax(&scaled.data()[i * c..(i + 1) * c]) != argmax(&cos.data()[i * c..(i + 1) * c]) {
                    flips += 1;
                }
            }
        }
    }
    Ok((
        worst <= 1e-12 && flips == 0,
        format!("m=0 vs scaled-cosine CE max diff {worst:.2e}, argmax changes under scaling {flips}"),
    ))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("gradient suite", gradients),
        ("pooling equivalences", pooling),
        ("pooled dimensions", dimensions),
        ("EER and minDCF", metrics),
        ("desk training run", desk_run),
        ("determinism", determinism),
        ("checkpoint and resume", checkpoints),
        ("AM-Softmax sanity", am_softmax),
    ];
    let only: Vec<usize> = std::env::args().filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let id = i + 1;
        if !only.is_empty() && !only.contains(&id) {
            continue;
        }
        let (ok, detail) = match std::panic::catch_unwind(check) {
            Ok(Ok(r)) => r,
            Ok(Err(e)) => (false, format!("error: {e}")),
            Err(_) => (false, "panicked".to_string()),
        };
        failed += usize::from(!ok);
        println!("criterion {id} {name}: {} ({detail})", if ok { "PASS" } else { "FAIL" });
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
