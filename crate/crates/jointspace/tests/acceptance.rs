//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.

use std::collections::BTreeSet;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use jointspace::formats::{
    decode_checkpoint, encode_checkpoint, read_checkpoint, read_features, read_index, write_checkpoint, write_features,
    write_index, CheckpointMeta, Dtype,
};
use jointspace_core::dataset::CaptionMode;
use jointspace_core::dsp::{log_mel, mel_centers, MelParams, Waveform};
use jointspace_core::encoders::{Encoders, FeatureMatrix, Modality};
use jointspace_core::jointspace::{
    contrastive_loss, loss_gradients, similarity, EmbeddingMatrix, ProjectionModel, ScaleConvention, SimilarityMatrix,
};
use jointspace_core::retrieval::{
    average_precision_at_k, evaluate_indexes, map_at_k, recall_at_k, top_n, ApNorm, Direction, EmbeddingIndex, Ranking,
    RelevanceMap,
};
use jointspace_core::rng::substream;
use jointspace_core::synthetic::{gaussian_matrix, separable_corpus, SeparableSpec};
use jointspace_core::training::{init_model, lr_at, train, StaticPairs, TrainConfig};
use jointspace_core::Matrix;
use jointspace_oracles::{
    ap_from_ranks, finite_difference_gradient, placements, recall_from_best_ranks, relative_error, scalar_softmax,
    selection_ranking,
};
use rand::seq::SliceRandom;
use rand::Rng;

/// `Ok` carries a one-line summary of what was measured.
type Outcome = Result<String, String>;

type Criterion = (&'static str, fn() -> Outcome);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn loss_of(m: Matrix) -> f64 {
    contrastive_loss(&SimilarityMatrix::new(m).unwrap())
}

fn gradient_oracle() -> Outcome {
    let start = Instant::now();
    let (mut worst, mut count, mut seed) = (0.0f64, 0, 0u64);
    for n in [2, 8, 32] {
        for d in [4, 16] {
            for _ in 0..4 {
                let mut rng = substream(seed, "acceptance/fd");
                let mut model = ProjectionModel::init(d, 5, 7, 0.25, ScaleConvention::Inverse, &mut rng).unwrap();
                model.b_audio = gaussian_matrix(1, d, &mut rng).into_vec();
                model.b_text = gaussian_matrix(1, d, &mut rng).into_vec();
                let a = FeatureMatrix::new(gaussian_matrix(n, 5, &mut rng), Modality::Audio);
                let t = FeatureMatrix::new(gaussian_matrix(n, 7, &mut rng), Modality::Text);
                let (_, grads) = loss_gradients(&model, &a, &t).unwrap();
                let numeric = finite_difference_gradient(&model, &a, &t, 1e-5);
                let analytic = grads.slices().concat();
                ensure(analytic.len() == numeric.len(), || "gradient length mismatch".into())?;
                for (g, fd) in analytic.iter().zip(&numeric) {
                    worst = worst.max(relative_error(*g, *fd));
                }
                count += 1;
                seed += 1;
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(worst < 1e-6, || format!("max relative error {worst:.3e}"))?;
    ensure(secs < 10.0, || format!("took {secs:.1} s"))?;
    Ok(format!("{count} instances, max rel err {worst:.2e}, {secs:.2} s"))
}

/// Mean of the row-wise and column-wise cross-entropies, via plain softmax.
fn two_sided_ce(c: &Matrix) -> f64 {
    let n = c.rows();
    let ce = |m: &Matrix| -> f64 { (0..n).map(|i| -scalar_softmax(m.row(i))[i].ln()).sum::<f64>() / n as f64 };
    (ce(c) + ce(&c.transpose())) / 2.0
}

fn loss_analytics() -> Outcome {
    for n in [2usize, 4, 8, 128] {
        let l = loss_of(Matrix::zeros(n, n));
        let want = (n as f64).ln();
        ensure((l - want).abs() <= 1e-12, || format!("C=0, N={n}: {l} vs {want}"))?;
    }
    let mut c = Matrix::identity(2);
    c.scale(2.0);
    let l = loss_of(c);
    let want = (1.0 + (-2.0f64).exp()).ln();
    ensure((l - want).abs() <= 1e-12, || format!("[[2,0],[0,2]]: {l} vs {want}"))?;

    let mut rng = substream(0, "acceptance/loss-matrices");
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let n = rng.gen_range(2..=16);
        let mut c = gaussian_matrix(n, n, &mut rng);
        c.scale(rng.gen_range(0.1..10.0));
        let l = loss_of(c.clone());
        let k = rng.gen_range(-50.0..50.0);
        let shifted = Matrix::from_fn(n, n, |i, j| c[(i, j)] + k);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let permuted = Matrix::from_fn(n, n, |i, j| c[(perm[i], perm[j])]);
        for other in [
            two_sided_ce(&c),
            loss_of(c.transpose()),
            loss_of(shifted),
            loss_of(permuted),
        ] {
            worst = worst.max((l - other).abs());
        }
    }
    ensure(worst <= 1e-10, || format!("invariance deviation {worst:.3e}"))?;
    Ok(format!("closed forms to 1e-12, 100 matrices max deviation {worst:.1e}"))
}

fn concentration() -> Outcome {
    let n = 128;
    let target = (n as f64).ln();
    let mut worst = 0.0f64;
    for seed in 0..10 {
        let mut rng = substream(seed, "acceptance/concentration");
        let t = EmbeddingMatrix::normalized_from(gaussian_matrix(n, 256, &mut rng));
        let a = EmbeddingMatrix::normalized_from(gaussian_matrix(n, 256, &mut rng));
        let l = contrastive_loss(&similarity(&t, &a, 1.0).unwrap());
        worst = worst.max((l / target - 1.0).abs());
    }
    ensure(worst < 0.05, || format!("relative deviation {worst:.4}"))?;
    Ok(format!("10 seeds, max deviation from ln 128 {:.3}%", 100.0 * worst))
}

fn r_at_1(model: &ProjectionModel, pairs: &StaticPairs, direction: Direction) -> f64 {
    let ids: Vec<String> = (0..pairs.audio.n()).map(|i| format!("p{i:03}")).collect();
    let caps: Vec<String> = ids.iter().map(|i| format!("{i}#0")).collect();
    let audio = EmbeddingIndex::build(model, &pairs.audio, ids.clone()).unwrap();
    let text = EmbeddingIndex::build(model, &pairs.text, caps).unwrap();
    evaluate_indexes(&audio, &text, &ids, direction, ApNorm::MinRelK)
        .unwrap()
        .recall_at[&1]
}

fn no_val() -> Option<&'static StaticPairs> {
    None
}

fn overfit() -> Outcome {
    let start = Instant::now();
    let pairs = separable_corpus(&SeparableSpec::default());
    let cfg = TrainConfig {
        batch_size: 16,
        epochs: 200,
        lr: 3e-3,
        lr_decay_factor: 1.0,
        proj_dim: 16,
        ..TrainConfig::default()
    };
    let out = train(&pairs, no_val(), &cfg, |_| {}).map_err(|e| e.to_string())?;
    let t2a = r_at_1(&out.model, &pairs, Direction::TextToAudio);
    let a2t = r_at_1(&out.model, &pairs, Direction::AudioToText);
    let secs = start.elapsed().as_secs_f64();
    ensure(t2a >= 0.95 && a2t >= 0.95, || format!("T-A R@1 {t2a}, A-T R@1 {a2t}"))?;
    ensure(secs < 60.0, || format!("took {secs:.1} s"))?;
    let last = out.history.last().unwrap().mean_loss;
    Ok(format!(
        "T-A R@1 {t2a}, A-T R@1 {a2t}, final loss {last:.2e}, {secs:.2} s"
    ))
}

fn chance_level() -> Outcome {
    let n = 100;
    let pairs = separable_corpus(&SeparableSpec {
        n_pairs: n,
        seed: 7,
        ..SeparableSpec::default()
    });
    let p = 0.01;
    let sigma = (p * (1.0 - p) / n as f64).sqrt();
    let mut seen = Vec::new();
    for seed in 0..10 {
        let cfg = TrainConfig {
            seed,
            ..TrainConfig::default()
        };
        let model = init_model(&cfg, pairs.audio.dim(), pairs.text.dim()).map_err(|e| e.to_string())?;
        let r1 = r_at_1(&model, &pairs, Direction::TextToAudio);
        ensure((r1 - p).abs() <= 3.0 * sigma, || format!("init seed {seed}: R@1 {r1}"))?;
        seen.push(r1);
    }
    Ok(format!(
        "10 untrained inits, T-A R@1 {seen:?}, bound 0.01 ± {:.4}",
        3.0 * sigma
    ))
}

fn metric_oracles() -> Outcome {
    let mut rng = substream(0, "acceptance/top-n");
    for seed in 0..200u64 {
        let n = rng.gen_range(1..=64);
        let d = rng.gen_range(1..=8);
        let want = rng.gen_range(1..=n + 5);
        let mut r = substream(seed, "acceptance/index");
        let mut rows: Vec<Vec<f64>> = gaussian_matrix(n, d, &mut r).iter_rows().map(<[f64]>::to_vec).collect();
        for i in 1..n {
            if r.gen_bool(0.3) {
                rows[i] = rows[r.gen_range(0..i)].clone();
            }
        }
        let emb = EmbeddingMatrix::normalized_from(Matrix::from_rows(d, &rows).unwrap());
        let ids: Vec<String> = (0..n).map(|i| format!("item{:03}", (i * 37 + 11) % 1000)).collect();
        let q = EmbeddingMatrix::normalized_from(gaussian_matrix(1, d, &mut r))
            .values
            .into_vec();
        let index = EmbeddingIndex::new(ids.clone(), emb, Modality::Audio).unwrap();
        let scores: Vec<(String, f64)> = ids
            .iter()
            .zip(index.embeddings.values.iter_rows())
            .map(|(id, row)| (id.clone(), row.iter().zip(&q).map(|(a, b)| a * b).sum()))
            .collect();
        let oracle: Vec<String> = selection_ranking(&scores, want).into_iter().map(|h| h.0).collect();
        let got: Vec<String> = top_n(&q, &index, want).unwrap().into_iter().map(|h| h.id).collect();
        ensure(got == oracle, || {
            format!("top_n differs from brute force on instance {seed}")
        })?;
    }

    // four caption queries whose single relevant item sits at ranks 1, 2, 6, 11
    let ranks = [1usize, 2, 6, 11];
    let rankings: Vec<Ranking> = ranks
        .iter()
        .enumerate()
        .map(|(q, &r)| Ranking {
            query: format!("q{q}"),
            items: (1..=20)
                .map(|i| {
                    if i == r {
                        format!("q{q}-rel")
                    } else {
                        format!("q{q}-x{i}")
                    }
                })
                .collect(),
        })
        .collect();
    let rel: RelevanceMap = (0..4)
        .map(|q| (format!("q{q}"), BTreeSet::from([format!("q{q}-rel")])))
        .collect();
    for k in [1, 5, 10, 50] {
        let got = recall_at_k(&rankings, &rel, k).unwrap();
        ensure(got == recall_from_best_ranks(&ranks, k), || format!("R@{k} = {got}"))?;
    }
    let best_aps: Vec<f64> = ranks.iter().map(|&r| ap_from_ranks(&[r], 1, 10)).collect();
    let want = best_aps.iter().sum::<f64>() / 4.0;
    let got = map_at_k(&rankings, &rel, 10, ApNorm::MinRelK).unwrap();
    ensure(got == want, || format!("mAP@10 {got} vs {want}"))?;

    let two: BTreeSet<String> = ["r1", "r2"].map(String::from).into();
    let items: Vec<String> = ["x", "r1", "y", "z", "r2"].map(String::from).to_vec();
    let ap = average_precision_at_k(&items, &two, 10, ApNorm::MinRelK);
    ensure(ap == 0.45 && ap_from_ranks(&[2, 5], 2, 10) == 0.45, || {
        format!("two-relevant AP {ap}")
    })?;

    let mut fixtures = 0;
    for n_slots in 1..=8 {
        for n_rel in 1..=n_slots {
            for k in [1, 3, 5, 10] {
                for placed in placements(n_slots, n_rel) {
                    let items: Vec<String> = (1..=n_slots)
                        .map(|i| {
                            if placed.contains(&i) {
                                format!("r{i}")
                            } else {
                                format!("n{i}")
                            }
                        })
                        .collect();
                    let rel: BTreeSet<String> = placed.iter().map(|i| format!("r{i}")).collect();
                    let ranks: Vec<usize> = placed.into_iter().collect();
                    let got = average_precision_at_k(&items, &rel, k, ApNorm::MinRelK);
                    let want = ap_from_ranks(&ranks, n_rel, k);
                    ensure(got == want, || format!("AP@{k} for ranks {ranks:?}: {got} vs {want}"))?;
                    fixtures += 1;
                }
            }
        }
    }
    Ok(format!(
        "200 top-n instances, R@K/mAP fixture, AP 0.45, {fixtures} enumerated placements"
    ))
}

fn dsp_checks() -> Outcome {
    let p = MelParams::default();
    let rate = p.sample_rate;
    let tone: Vec<f64> = (0..rate as usize)
        .map(|i| 0.3 * (2.0 * std::f64::consts::PI * 1000.0 * i as f64 / f64::from(rate)).sin())
        .collect();
    let w = Waveform::new(tone, rate).unwrap();
    let mel = log_mel(&w, &p).unwrap();
    ensure(mel.n_mels() == 64 && mel.n_frames() == 138, || {
        format!("shape {}×{}", mel.n_mels(), mel.n_frames())
    })?;

    let floor = p.log_floor.ln();
    let silence = log_mel(&Waveform::new(vec![0.0; rate as usize], rate).unwrap(), &p).unwrap();
    ensure(silence.values.as_slice().iter().all(|&v| v == floor), || {
        "silence is not at the floor".into()
    })?;

    let mut worst = 0.0f64;
    let mut cells = 0;
    for c in [0.1, 0.5, 3.0] {
        let scaled = log_mel(&w.scaled(c), &p).unwrap();
        for (a, b) in mel.values.as_slice().iter().zip(scaled.values.as_slice()) {
            if *a > floor && *b > floor {
                worst = worst.max((b - a - 2.0 * c.ln()).abs());
                cells += 1;
            }
        }
    }
    ensure(cells > 0 && worst <= 1e-6, || {
        format!("scaling deviation {worst:.3e} over {cells} cells")
    })?;

    let centers = mel_centers(&p);
    let increasing = centers.windows(2).all(|w| w[0] < w[1]);
    let in_band = centers.iter().all(|&f| (p.f_min..=p.f_max).contains(&f));
    ensure(increasing && in_band, || format!("mel centers {centers:?}"))?;
    Ok(format!(
        "64×138, silence at floor, 2·ln c shift max err {worst:.1e}, centers {:.1}..{:.1} Hz",
        centers[0], centers[63]
    ))
}

fn schedule() -> Outcome {
    let cfg = TrainConfig::default();
    for (epoch, want) in [(0, 1e-4f64), (19, 1e-4), (20, 1e-5), (39, 1e-5), (40, 1e-6)] {
        let got = lr_at(epoch, &cfg);
        ensure(got.to_bits() == want.to_bits(), || format!("epoch {epoch}: {got:e}"))?;
    }
    Ok("1e-4 / 1e-5 / 1e-6 at epochs 0 / 20 / 40, bit-exact".into())
}

/// Synthetic corpus plus the shipped config, laid out as in the repository.
fn synth_workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::create_dir(dir.path().join("configs")).unwrap();
    fs::write(
        dir.path().join("configs/synth.toml"),
        include_str!("../../../configs/synth.toml"),
    )
    .unwrap();
    let o = cli(dir.path(), &["synth", "--out", "data/synth"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    dir
}

fn cli(dir: &Path, args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_jointspace"))
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .unwrap()
}

fn caption_ablation() -> Outcome {
    let dir = synth_workspace();
    let o = cli(dir.path(), &["ablate-captions", "--config", "configs/synth.toml"]);
    ensure(o.status.success(), || String::from_utf8_lossy(&o.stderr).into_owned())?;
    let results: serde_json::Value = serde_json::from_slice(&o.stdout).map_err(|e| e.to_string())?;
    let results = results.as_array().ok_or("ablation output is not a list")?;
    let modes: Vec<&str> = results.iter().filter_map(|r| r["caption_mode"].as_str()).collect();
    ensure(modes == ["title_plus_description", "description_only"], || {
        format!("modes {modes:?}")
    })?;
    for r in results {
        let dirs: Vec<&str> = r["reports"]
            .as_array()
            .unwrap()
            .iter()
            .filter_map(|x| x["direction"].as_str())
            .collect();
        ensure(dirs == ["text_to_audio", "audio_to_text"], || {
            format!("directions {dirs:?}")
        })?;
    }
    ensure(results[0]["reports"] != results[1]["reports"], || {
        "both caption modes gave identical metrics".into()
    })?;
    let saved: serde_json::Value =
        serde_json::from_slice(&fs::read(dir.path().join("runs/synth/ablation.json")).unwrap()).unwrap();
    ensure(saved.as_array() == Some(results), || {
        "ablation.json differs from stdout".into()
    })?;
    let summary = |r: &serde_json::Value| {
        let t2a = &r["reports"][0];
        format!(
            "T-A mAP@10 {:.3} R@1 {:.3}",
            t2a["map_at_10"].as_f64().unwrap(),
            t2a["recall_at"]["1"].as_f64().unwrap()
        )
    };
    Ok(format!(
        "title_plus_description {} vs description_only {}",
        summary(&results[0]),
        summary(&results[1])
    ))
}

fn reproducibility() -> Outcome {
    let dir = synth_workspace();
    for out in ["runs/a", "runs/b"] {
        let o = cli(dir.path(), &["train", "--config", "configs/synth.toml", "--out", out]);
        ensure(o.status.success(), || String::from_utf8_lossy(&o.stderr).into_owned())?;
    }
    let mut compared = 0;
    for file in ["final.ckpt", "best.ckpt", "history.csv"] {
        let a = fs::read(dir.path().join("runs/a").join(file)).unwrap();
        let b = fs::read(dir.path().join("runs/b").join(file)).unwrap();
        ensure(a == b, || format!("{file} differs between runs"))?;
        compared += a.len();
    }
    Ok(format!(
        "final.ckpt, best.ckpt, history.csv identical ({compared} bytes)"
    ))
}

fn round_trips() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let pairs = separable_corpus(&SeparableSpec {
        n_pairs: 16,
        ..SeparableSpec::default()
    });
    let cfg = TrainConfig {
        batch_size: 8,
        epochs: 3,
        lr: 1e-3,
        proj_dim: 8,
        ..TrainConfig::default()
    };
    let model = train(&pairs, no_val(), &cfg, |_| {}).map_err(|e| e.to_string())?.model;
    let meta = CheckpointMeta {
        encoders: Encoders::default(),
        caption_mode: CaptionMode::TitlePlusDescription,
        train: cfg,
        scale_bounds: (1.0, 1000.0),
        normalize: true,
        epoch: 2,
    };
    let bits = |m: &ProjectionModel| -> Vec<u64> { m.slices().concat().iter().map(|v| v.to_bits()).collect() };
    let ckpt = dir.path().join("m.ckpt");
    write_checkpoint(&ckpt, &model, &meta).map_err(|e| e.to_string())?;
    let (back, back_meta) = read_checkpoint(&ckpt).map_err(|e| e.to_string())?;
    ensure(bits(&back) == bits(&model) && back_meta == meta, || {
        "checkpoint changed on reload".into()
    })?;

    let bytes = encode_checkpoint(&model, &meta);
    let mut rejected = 0;
    for pos in [12, bytes.len() / 2, bytes.len() - 12, bytes.len() - 1] {
        let mut bad = bytes.clone();
        bad[pos] ^= 0x10;
        let err = decode_checkpoint(&bad, &ckpt)
            .err()
            .map(|e| e.to_string())
            .unwrap_or_default();
        ensure(err.contains("CRC"), || {
            format!("byte {pos} flip not caught as a CRC error: {err:?}")
        })?;
        rejected += 1;
    }

    let feats = dir.path().join("a.feat");
    write_features(&feats, &pairs.audio, Dtype::F64).map_err(|e| e.to_string())?;
    let (f, dtype) = read_features(&feats).map_err(|e| e.to_string())?;
    let same = f.values.as_slice().iter().map(|v| v.to_bits()).eq(pairs
        .audio
        .values
        .as_slice()
        .iter()
        .map(|v| v.to_bits()));
    ensure(same && dtype == Dtype::F64 && f.modality == Modality::Audio, || {
        "f64 features changed on reload".into()
    })?;

    let single: Vec<f64> = pairs
        .text
        .values
        .as_slice()
        .iter()
        .map(|&v| f64::from(v as f32))
        .collect();
    let text32 = FeatureMatrix::new(
        Matrix::from_vec(pairs.text.n(), pairs.text.dim(), single).unwrap(),
        Modality::Text,
    );
    write_features(&feats, &text32, Dtype::F32).map_err(|e| e.to_string())?;
    let (f, _) = read_features(&feats).map_err(|e| e.to_string())?;
    ensure(f == text32, || "f32 features changed on reload".into())?;

    let ids: Vec<String> = (0..pairs.audio.n()).map(|i| format!("clip-{i}")).collect();
    let index = EmbeddingIndex::build(&model, &pairs.audio, ids).map_err(|e| e.to_string())?;
    let idx = dir.path().join("audio.index");
    write_index(&idx, &index).map_err(|e| e.to_string())?;
    let back = read_index(&idx).map_err(|e| e.to_string())?;
    let same = back.embeddings.values.as_slice().iter().map(|v| v.to_bits()).eq(index
        .embeddings
        .values
        .as_slice()
        .iter()
        .map(|v| v.to_bits()));
    ensure(same && back.ids == index.ids, || "index changed on reload".into())?;
    Ok(format!(
        "checkpoint, f64/f32 features and index bit-exact; {rejected}/{rejected} corrupted checkpoints rejected"
    ))
}

fn main() {
    let criteria: [Criterion; 11] = [
        ("gradient oracle", gradient_oracle),
        ("loss analytics", loss_analytics),
        ("random-embedding concentration", concentration),
        ("overfit run", overfit),
        ("chance-level control", chance_level),
        ("metric oracles", metric_oracles),
        ("dsp checks", dsp_checks),
        ("schedule check", schedule),
        ("caption ablation harness", caption_ablation),
        ("reproducibility", reproducibility),
        ("round-trips", round_trips),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|panic| {
            let msg = panic
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match outcome {
            Ok(detail) => println!("PASS {:>2} {name}: {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL {:>2} {name}: {why}", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
