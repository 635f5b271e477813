//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::collections::HashSet;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use grn_core::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use grn_core::corpus::{build_vocab, convert_scheme, encode_batch, encode_tokens, load_conll, parse_conll, to_bioes, Column, Scheme, Sentence, Vocab};
use grn_core::crf::{nll_loss, viterbi, LatticeScores};
use grn_core::gradcheck::{check_toy_model, toy_problem};
use grn_core::metrics::{extract_spans, span_prf};
use grn_core::model::{self, init_params, ModelConfig, ModelParams};
use grn_core::relation::{fuse_dfn, fuse_gated};
use grn_core::synthetic::synthetic_corpus;
use grn_core::tagger::tag_conll;
use grn_core::trainer::{initial_params, lr_schedule, train_run, Corpora};
use grn_core::{ContextMode, FusionKind, Graph, SeqLayout, Tensor, TrainConfig};

type Outcome = Result<String, String>;

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures")
}

fn overfit_corpus() -> Vec<Sentence> {
    load_conll(fixtures().join("overfit_train.conll"), Column::Index(0), Column::Last, Scheme::Bio).expect("fixture")
}

fn grn() -> Command {
    Command::new(env!("CARGO_BIN_EXE_grn"))
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(limit: Duration, started: Instant) -> Result<(), String> {
    let took = started.elapsed();
    ensure(took < limit, || format!("took {took:.1?}, limit {limit:?}"))
}

// ---------------------------------------------------------------- 1

/// Score of `path` summed as start, emissions with incoming transitions, stop.
fn enumerated_score(l: usize, em: &[f64], tr: &[f64], path: &[usize]) -> f64 {
    let n = l + 1;
    let mut s = tr[l * n + path[0]];
    for (t, &y) in path.iter().enumerate() {
        s += em[t * l + y];
        if t > 0 {
            s += tr[path[t - 1] * n + y];
        }
    }
    s + tr[path[path.len() - 1] * n + l]
}

fn all_paths(l: usize, t: usize) -> Vec<Vec<usize>> {
    let mut out = vec![vec![]];
    for _ in 0..t {
        out = out
            .into_iter()
            .flat_map(|p| {
                (0..l).map(move |y| {
                    let mut q = p.clone();
                    q.push(y);
                    q
                })
            })
            .collect();
    }
    out
}

fn crf_oracle() -> Outcome {
    let started = Instant::now();
    let mut worst: f64 = 0.0;
    for seed in 0..200u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let l = rng.gen_range(1..=4);
        let t = rng.gen_range(1..=5);
        let em: Vec<f64> = (0..t * l).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let tr: Vec<f64> = (0..(l + 1) * (l + 1)).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let scores: Vec<f64> = all_paths(l, t).iter().map(|p| enumerated_score(l, &em, &tr, p)).collect();
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let log_z = max + scores.iter().map(|s| (s - max).exp()).sum::<f64>().ln();

        let layout = SeqLayout::new(t, vec![t]);
        let gold: Vec<usize> = (0..t).map(|_| rng.gen_range(0..l)).collect();
        let mut g = Graph::new(0);
        let e = g.constant(Tensor::new(vec![t, l], em.clone()).unwrap());
        let w = g.constant(Tensor::new(vec![l + 1, l + 1], tr.clone()).unwrap());
        let nll = nll_loss(&mut g, e, w, &layout, &gold, None).map_err(|e| e.to_string())?;
        let nll_log_z = g.value(nll)[0] + enumerated_score(l, &em, &tr, &gold);
        let err = (nll_log_z - log_z).abs();
        worst = worst.max(err);
        ensure(err < 1e-6, || format!("seed {seed}: logZ {nll_log_z} vs enumeration {log_z}"))?;

        let lat = LatticeScores::new(l, layout, em, tr).unwrap();
        let (path, best) = viterbi(&lat).remove(0);
        ensure(best == max, || format!("seed {seed}: viterbi {best} vs enumeration max {max}"))?;
        ensure(lat.path_score(0, &path) == max, || format!("seed {seed}: viterbi path is not a maximizer"))?;
    }
    within(Duration::from_secs(30), started)?;
    Ok(format!("200 instances, worst |dlogZ| {worst:.1e}, {:.2?}", started.elapsed()))
}

// ---------------------------------------------------------------- 2

fn full_gradcheck() -> Outcome {
    let started = Instant::now();
    let (sentences, vocab) = toy_problem(0).map_err(|e| e.to_string())?;
    ensure(sentences.len() == 3 && sentences.iter().all(|s| s.len() <= 5), || "toy problem shape".into())?;
    let mc = ModelConfig::reduced(vocab.num_words(), vocab.num_chars(), vocab.labels().to_vec());
    ensure((mc.word_dim, mc.char_dim, mc.hidden) == (8, 8, 16), || "reduced dims".into())?;
    let batch = encode_batch(&sentences, &vocab).map_err(|e| e.to_string())?;
    let reports = check_toy_model(&mc, &batch, 0, None).map_err(|e| e.to_string())?;
    let expected: Vec<String> = init_params::<f64>(&mc, 0).unwrap().names().map(String::from).collect();
    let names: Vec<String> = reports.iter().map(|r| r.name.clone()).collect();
    ensure(names == expected, || format!("groups {names:?}"))?;
    let worst = reports
        .iter()
        .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
        .unwrap();
    ensure(worst.max_rel_error < 1e-4, || format!("{} has relative error {:.2e}", worst.name, worst.max_rel_error))?;
    within(Duration::from_secs(120), started)?;
    Ok(format!(
        "{} groups, worst {:.1e} ({}), {:.2?}",
        reports.len(),
        worst.max_rel_error,
        worst.name,
        started.elapsed()
    ))
}

// ---------------------------------------------------------------- 3

fn sig(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Clone, Copy, PartialEq)]
enum Fusion {
    Vector,
    Scalar,
    Mean,
}

/// Double-loop reference over `j` in `0..len`, divided by `len`.
fn reference(f: Fusion, s: &[f64], x: &[f64], layout: &SeqLayout, h: usize, d: usize, skip_diag: bool, norm: Option<f64>) -> Vec<f64> {
    let t = layout.t_max();
    let mut out = vec![0.0; layout.rows() * h];
    for (b, &len) in layout.lengths().iter().enumerate() {
        for i in 0..len {
            let mut acc = vec![0.0; h];
            for j in 0..len {
                if skip_diag && i == j {
                    continue;
                }
                let at = ((b * t + i) * t + j) * d;
                for c in 0..h {
                    acc[c] += match f {
                        Fusion::Vector => sig(s[at + c]) * x[(b * t + j) * h + c],
                        Fusion::Scalar => sig(s[at]) * x[(b * t + j) * h + c],
                        Fusion::Mean => s[at + c],
                    };
                }
            }
            let n = norm.unwrap_or(len as f64);
            for c in 0..h {
                out[(b * t + i) * h + c] = acc[c] / n;
            }
        }
    }
    out
}

fn fusion_oracles() -> Outcome {
    let mut diag_sensitive = 0;
    let mut norm_sensitive = 0;
    for seed in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let b = rng.gen_range(1..=2);
        let t = rng.gen_range(1..=6);
        let h = rng.gen_range(1..=4);
        let mut lengths: Vec<usize> = (0..b).map(|_| rng.gen_range(1..=t)).collect();
        lengths[0] = t;
        let layout = SeqLayout::new(t, lengths.clone());
        let mut x: Vec<f64> = (0..b * t * h).map(|_| rng.gen_range(-2.0..2.0)).collect();
        for (r, keep) in layout.row_mask().into_iter().enumerate() {
            if !keep {
                x[r * h..(r + 1) * h].fill(0.0);
            }
        }
        for (f, d) in [(Fusion::Vector, h), (Fusion::Scalar, 1), (Fusion::Mean, h)] {
            let mut s: Vec<f64> = (0..b * t * t * d).map(|_| rng.gen_range(-4.0..4.0)).collect();
            for bi in 0..b {
                for i in 0..t {
                    for j in 0..t {
                        if i >= lengths[bi] || j >= lengths[bi] {
                            let at = ((bi * t + i) * t + j) * d;
                            s[at..at + d].fill(0.0);
                        }
                    }
                }
            }
            let mut g = Graph::new(0);
            let sn = g.constant(Tensor::new(vec![b, t, t, d], s.clone()).unwrap());
            let xn = g.constant(Tensor::new(vec![b * t, h], x.clone()).unwrap());
            let out = match f {
                Fusion::Mean => fuse_dfn(&mut g, sn, &layout),
                _ => fuse_gated(&mut g, sn, xn, &layout),
            }
            .map_err(|e| e.to_string())?;
            let want = reference(f, &s, &x, &layout, h, d, false, None);
            ensure(g.value(out) == want.as_slice(), || format!("instance {seed}: mismatch"))?;
            if reference(f, &s, &x, &layout, h, d, true, None) != want {
                diag_sensitive += 1;
            }
            if lengths.iter().any(|&n| n < t) && reference(f, &s, &x, &layout, h, d, false, Some(t as f64)) != want {
                norm_sensitive += 1;
            }
        }
    }
    ensure(diag_sensitive > 0 && norm_sensitive > 0, || "diagonal or length checks never exercised".into())?;
    Ok(format!(
        "150 exact matches (grn, gattn, dfn); r_ii mattered in {diag_sensitive}, true-length normalization in {norm_sensitive}"
    ))
}

// ---------------------------------------------------------------- 4

fn padding_invariance() -> Outcome {
    let corpus = overfit_corpus();
    let vocab = build_vocab(&corpus, &[], 3);
    let mc = TrainConfig::default().model_config(&vocab);
    let params: ModelParams<f32> = init_params(&mc, 11).map_err(|e| e.to_string())?;
    let mut compared = 0;
    for case in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(case);
        let k = rng.gen_range(1..=4);
        let mut sentences: Vec<Vec<String>> = synthetic_corpus(k, 500 + case).into_iter().map(|s| s.tokens).collect();
        sentences[0].push("unseenword".into());
        let t_max = sentences.iter().map(Vec::len).max().unwrap();
        let padded = encode_tokens(&sentences, &vocab, t_max + 8).map_err(|e| e.to_string())?;
        let together = model::decode(&mc, &params, &padded).map_err(|e| e.to_string())?;
        for (s, got) in sentences.iter().zip(&together) {
            let alone = encode_tokens(std::slice::from_ref(s), &vocab, 0).map_err(|e| e.to_string())?;
            let want = model::decode(&mc, &params, &alone).map_err(|e| e.to_string())?.remove(0);
            ensure(&want == got, || format!("case {case}: {want:?} vs {got:?}"))?;
            compared += 1;
        }
    }
    Ok(format!("20 cases, {compared} sentences identical alone and padded to T_max + 8"))
}

// ---------------------------------------------------------------- 5

fn scheme_round_trip() -> Outcome {
    let tags = ["O", "B-PER", "I-PER", "B-LOC", "I-LOC"];
    let mut checked = 0;
    for len in 1..=6u32 {
        for code in 0..5usize.pow(len) {
            let seq: Vec<&str> = (0..len).map(|k| tags[code / 5usize.pow(k) % 5]).collect();
            let valid = seq.iter().enumerate().all(|(k, t)| match t.strip_prefix("I-") {
                Some(ty) => k > 0 && seq[k - 1].len() > 2 && &seq[k - 1][2..] == ty,
                None => true,
            });
            if !valid {
                continue;
            }
            let bioes = convert_scheme(&seq, Scheme::Bio, Scheme::Bioes).map_err(|e| e.to_string())?;
            let back = convert_scheme(&bioes, Scheme::Bioes, Scheme::Bio).map_err(|e| e.to_string())?;
            ensure(back == seq, || format!("{seq:?} -> {bioes:?} -> {back:?}"))?;
            let a = extract_spans(&seq).map_err(|e| e.to_string())?;
            let b = extract_spans(&bioes).map_err(|e| e.to_string())?;
            ensure(a == b, || format!("{seq:?}: spans differ"))?;
            checked += 1;
        }
    }
    Ok(format!("{checked} valid sequences"))
}

// ---------------------------------------------------------------- 6

fn scorer_fixtures() -> Outcome {
    let dir = fixtures().join("scorer");
    let expected = std::fs::read_to_string(dir.join("expected.tsv")).map_err(|e| e.to_string())?;
    let mut n = 0;
    for line in expected.lines().filter(|l| !l.starts_with('#') && !l.trim().is_empty()) {
        let f: Vec<&str> = line.split('\t').collect();
        let text = std::fs::read_to_string(dir.join(f[0])).map_err(|e| e.to_string())?;
        let gold = parse_conll(&text, Column::Index(0), Column::Index(1)).map_err(|e| e.to_string())?;
        let pred = parse_conll(&text, Column::Index(0), Column::Index(2)).map_err(|e| e.to_string())?;
        let g: Vec<Vec<String>> = gold.into_iter().map(|s| s.labels).collect();
        let p: Vec<Vec<String>> = pred.into_iter().map(|s| s.labels).collect();
        let prf = span_prf(&g, &p).map_err(|e| e.to_string())?;
        let got = format!("{:.2}\t{:.2}\t{:.2}", prf.precision, prf.recall, prf.f1);
        let want = f[1..4].join("\t");
        ensure(got == want, || format!("{}: got {got}, want {want}", f[0]))?;
        n += 1;
    }
    ensure(n == 10, || format!("{n} fixtures"))?;
    Ok("10 fixtures reproduced to 2 decimals".into())
}

// ---------------------------------------------------------------- 7

fn overfit() -> Outcome {
    let started = Instant::now();
    let corpus = overfit_corpus();
    ensure(corpus.len() == 20, || format!("{} sentences", corpus.len()))?;
    let cfg = TrainConfig {
        epochs: 50,
        runs: 1,
        seed: 1,
        ..TrainConfig::default()
    };
    ensure(
        (cfg.batch_size, cfg.lr0, cfg.momentum, cfg.dropout, cfg.fusion, cfg.context)
            == (10, 0.02, 0.9, 0.5, FusionKind::Grn, ContextMode::Full),
        || "not the default recipe".into(),
    )?;
    let vocab = build_vocab(&corpus, &[], cfg.min_freq);
    let mc = cfg.model_config(&vocab);
    let init = initial_params::<f32>(&mc, &vocab, None, cfg.seed).map_err(|e| e.to_string())?;
    let data = Corpora {
        train: &corpus,
        dev: &corpus,
        test: None,
    };
    let run = train_run(&mc, &cfg, &vocab, init, data, cfg.seed, &mut |_| {}).map_err(|e| e.to_string())?;
    let first = run.log.iter().find(|e| e.dev.f1 == 100.0).map(|e| e.epoch);
    ensure(first.is_some(), || {
        format!("best training F1 {:.2} after 50 epochs", run.best_dev.f1)
    })?;
    within(Duration::from_secs(180), started)?;
    Ok(format!(
        "training F1 100.00 first at epoch {}, {:.1?}",
        first.unwrap(),
        started.elapsed()
    ))
}

// ---------------------------------------------------------------- 8

/// Documented closed form of the parameter count.
fn formula(fusion: &str, context: &str, v: usize, cn: usize, labels: usize) -> usize {
    let (w, c, ch, k, h) = (100, 30, 30, 3, 400);
    let z = ch + w;
    let base = v * w + cn * c + ch * k * c + ch;
    let ctx = match context {
        "full" => h * (1 + 3 + 5) * z + 3 * h,
        "branch3" => 3 * h * z + h,
        _ => h * z + h,
    };
    let rel = match fusion {
        "grn" | "dfn" => 2 * h * h + h,
        "gattn" => 2 * h + 1,
        _ => 0,
    };
    base + ctx + rel + labels * h + (labels + 1) * (labels + 1)
}

fn ablations(tmp: &Path) -> Outcome {
    let corpus = overfit_corpus();
    let vocab = build_vocab(&corpus, &[], 3);
    let train = fixtures().join("overfit_train.conll");
    let variants = [
        ("grn", "full"),
        ("dfn", "full"),
        ("gattn", "full"),
        ("none", "full"),
        ("grn", "branch3"),
        ("grn", "off"),
    ];
    let mut counts = Vec::new();
    for (fusion, context) in variants {
        let out = tmp.join(format!("ablation-{fusion}-{context}"));
        let o = grn()
            .args(["train", "--train"])
            .arg(&train)
            .arg("--out")
            .arg(&out)
            .args(["--runs", "1", "--epochs", "2", "--fusion", fusion, "--context", context])
            .output()
            .map_err(|e| e.to_string())?;
        ensure(o.status.success(), || {
            format!("{fusion}/{context}: {}", String::from_utf8_lossy(&o.stderr))
        })?;
        let report = std::fs::read_to_string(out.join("report.txt")).map_err(|e| e.to_string())?;
        let n: usize = report
            .lines()
            .find_map(|l| l.strip_prefix("parameters: "))
            .and_then(|v| v.trim().parse().ok())
            .ok_or("no parameter count in report")?;
        let want = formula(fusion, context, vocab.num_words(), vocab.num_chars(), vocab.num_labels());
        ensure(n == want, || format!("{fusion}/{context}: reported {n}, formula {want}"))?;
        counts.push(((fusion, context), n));
    }
    for (a, (va, na)) in counts.iter().enumerate() {
        for (vb, nb) in &counts[a + 1..] {
            let shared = [va.0, vb.0] == ["grn", "dfn"] && va.1 == vb.1;
            ensure(shared == (na == nb), || format!("{va:?} and {vb:?} both report {na}"))?;
        }
    }
    let distinct: HashSet<usize> = counts.iter().map(|c| c.1).collect();
    Ok(format!(
        "6 variants trained, all counts match the formula; {} distinct counts (grn and dfn share relation weights)",
        distinct.len()
    ))
}

// ---------------------------------------------------------------- 9

fn lr() -> Outcome {
    for (t, want) in [(0usize, 0.02), (1, 0.0196078431372549), (199, 0.004016064257028112)] {
        let got = lr_schedule(t);
        ensure((got - want).abs() < 1e-12, || format!("lr({t}) = {got}, want {want}"))?;
    }
    Ok("lr(0), lr(1), lr(199) within 1e-12".into())
}

// ---------------------------------------------------------------- 10 and 11

struct Trained {
    vocab: Vocab,
    ckpt: Checkpoint<f32>,
    dir: PathBuf,
}

fn train_small(tmp: &Path) -> Result<Trained, String> {
    let mut corpus = synthetic_corpus(30, 77);
    to_bioes(&mut corpus, Scheme::Bio).map_err(|e| e.to_string())?;
    let cfg = TrainConfig {
        epochs: 5,
        runs: 1,
        seed: 3,
        ..TrainConfig::default()
    };
    let vocab = build_vocab(&corpus, &[], cfg.min_freq);
    let mc = cfg.model_config(&vocab);
    let init = initial_params::<f32>(&mc, &vocab, None, cfg.seed).map_err(|e| e.to_string())?;
    let data = Corpora {
        train: &corpus,
        dev: &corpus,
        test: None,
    };
    let run = train_run(&mc, &cfg, &vocab, init, data, cfg.seed, &mut |_| {}).map_err(|e| e.to_string())?;
    let dir = tmp.join("small");
    std::fs::create_dir_all(&dir).map_err(|e| e.to_string())?;
    vocab.save(dir.join("vocab.json")).map_err(|e| e.to_string())?;
    let ckpt = Checkpoint {
        model: mc,
        train: cfg,
        vocab_hash: vocab.hash(),
        params: run.params,
        epoch: run.best_epoch,
        dev_f1: run.best_dev.f1,
    };
    Ok(Trained { vocab, ckpt, dir })
}

fn heat_maps(t: &Trained) -> Outcome {
    let path = t.dir.join("heat.ckpt");
    save_checkpoint(&t.ckpt, &path).map_err(|e| e.to_string())?;
    let sentences = ["anna smith visited paris today", "boris left lima", "clara praised unseenword kyoto again"];
    for s in sentences {
        let o = grn()
            .args(["export-relations", "--checkpoint"])
            .arg(&path)
            .args(["--sentence", s])
            .output()
            .map_err(|e| e.to_string())?;
        ensure(o.status.success(), || String::from_utf8_lossy(&o.stderr).into_owned())?;
        let text = String::from_utf8(o.stdout).map_err(|e| e.to_string())?;
        let tokens: Vec<String> = s.split_whitespace().map(String::from).collect();
        let n = tokens.len();
        let lines: Vec<&str> = text.lines().collect();
        ensure(lines.len() == n + 1, || format!("{} lines for {n} tokens", lines.len()))?;
        let matrix: Vec<Vec<f64>> = lines[1..]
            .iter()
            .map(|l| l.split('\t').skip(1).map(|v| v.parse().unwrap()).collect())
            .collect();
        ensure(matrix.iter().all(|r| r.len() == n), || "matrix is not T x T".into())?;
        let flat: Vec<f64> = matrix.iter().flatten().copied().collect();
        let lo = flat.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = flat.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        ensure(lo == 0.0 && hi == 1.0, || format!("range [{lo}, {hi}]"))?;

        let batch = encode_tokens(&[tokens], &t.vocab, 0).map_err(|e| e.to_string())?;
        let (raw, d) = model::relation_scores(&t.ckpt.model, &t.ckpt.params, &batch)
            .map_err(|e| e.to_string())?
            .remove(0);
        let norms: Vec<f64> = raw.chunks(d).map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
        let (a, b) = (
            norms.iter().cloned().fold(f64::INFINITY, f64::min),
            norms.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        );
        for (k, &v) in flat.iter().enumerate() {
            let want = (norms[k] - a) / (b - a);
            ensure((v - want).abs() < 1e-6, || format!("cell {k}: {v} vs {want}"))?;
        }
        let again = grn()
            .args(["export-relations", "--checkpoint"])
            .arg(&path)
            .args(["--sentence", s])
            .output()
            .map_err(|e| e.to_string())?;
        ensure(again.stdout == text.as_bytes(), || "export is not deterministic".into())?;
    }
    Ok("3 sentences: T x T, range [0, 1], L2 norms within 1e-6, repeatable".into())
}

fn checkpoint_round_trip(t: &Trained) -> Outcome {
    let input = std::fs::read_to_string(fixtures().join("overfit_train.conll")).map_err(|e| e.to_string())?;
    let before = tag_conll(&t.ckpt.model, &t.ckpt.params, &t.vocab, &input, Column::Index(0), 10).map_err(|e| e.to_string())?;
    let path = t.dir.join("model.ckpt");
    save_checkpoint(&t.ckpt, &path).map_err(|e| e.to_string())?;
    let loaded: Checkpoint<f32> = load_checkpoint(&path, Some(&t.vocab)).map_err(|e| e.to_string())?;
    ensure(loaded.params == t.ckpt.params, || "parameters changed".into())?;
    let after = tag_conll(&loaded.model, &loaded.params, &t.vocab, &input, Column::Index(0), 10).map_err(|e| e.to_string())?;
    ensure(after == before, || "library tag output differs after reload".into())?;
    let out = t.dir.join("tagged.conll");
    let o = grn()
        .args(["tag", "--checkpoint"])
        .arg(&path)
        .arg("--input")
        .arg(fixtures().join("overfit_train.conll"))
        .arg("--output")
        .arg(&out)
        .output()
        .map_err(|e| e.to_string())?;
    ensure(o.status.success(), || String::from_utf8_lossy(&o.stderr).into_owned())?;
    let cli = std::fs::read(&out).map_err(|e| e.to_string())?;
    ensure(cli == before.as_bytes(), || "CLI tag output differs from pre-save output".into())?;
    Ok(format!("{} bytes identical (library reload and CLI)", cli.len()))
}

fn main() {
    let tmp = tempfile::tempdir().expect("temp dir");
    let trained = train_small(tmp.path());
    let criteria: Vec<(&str, Box<dyn Fn() -> Outcome>)> = vec![
        ("CRF oracle equivalence", Box::new(crf_oracle)),
        ("full-model gradient check", Box::new(full_gradcheck)),
        ("fusion-variant oracles", Box::new(fusion_oracles)),
        ("padding invariance", Box::new(padding_invariance)),
        ("scheme round trip", Box::new(scheme_round_trip)),
        ("scorer correctness", Box::new(scorer_fixtures)),
        ("overfit smoke test", Box::new(overfit)),
        ("ablation plumbing", Box::new(|| ablations(tmp.path()))),
        ("LR schedule", Box::new(lr)),
        (
            "heat-map contract",
            Box::new(|| trained.as_ref().map_err(Clone::clone).and_then(heat_maps)),
        ),
        (
            "checkpoint round trip",
            Box::new(|| trained.as_ref().map_err(Clone::clone).and_then(checkpoint_round_trip)),
        ),
    ];
    let mut failed = 0;
    for (k, (name, check)) in criteria.iter().enumerate() {
        let result = std::panic::catch_unwind(std::panic::AssertUnwindSafe(check))
            .unwrap_or_else(|_| Err("panicked".into()));
        match result {
            Ok(detail) => println!("PASS [{}] {name}: {detail}", k + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL [{}] {name}: {why}", k + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
