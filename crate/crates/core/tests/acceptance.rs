//! Acceptance suite. Prints one `[PASS]` / `[FAIL]` line per criterion and
//! exits nonzero if any fails.
//!
//! Criteria 4, 7, 8 and 9 share one default-scale pipeline (corpora,
//! pretraining, a 300-run sweep); its artifacts are left under
//! `target/acceptance/desk` for inspection.

mod support;

use std::collections::BTreeMap;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use gap_core::ascent::{adam_ascent_step, AdamState, Direction, GapConfig, UpdateRule};
use gap_core::checkpoint;
use gap_core::config::{PipelineConfig, SeedStream};
use gap_core::corpus::{familiarity_gate, familiarity_score, load_desk_corpora, sample_snippets, Bucket};
use gap_core::eval::metrics::{diversity, unigram_f1};
use gap_core::eval::{verbalizer_classify, ClassificationExample, DEFAULT_EVAL_CAP};
use gap_core::model::{lm_nll, nll_with_grads};
use gap_core::pipeline::{self, Layout};
use gap_core::sweep::{read_log, SweepSummary};
use gap_core::tokenizer::{tokenize, VOCAB_SIZE};
use gap_core::{ModelConfig, ModelParams, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use support::reference::{self, relative_error};

type Check = std::result::Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> std::result::Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn acceptance_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../target/acceptance")
}

// ---------------------------------------------------------------------------
// 1. gradient check on the desk model

fn ac1_gradcheck() -> Check {
    const COORDS: usize = 128;
    const H: f64 = 1e-3;
    const TOL: f64 = 1e-3;
    let start = Instant::now();
    let cfg = ModelConfig::default();
    ensure(cfg.n_layers >= 2, "desk model must have at least two layers")?;
    let mut worst = 0.0f64;
    let mut zeros = 0usize;
    for (seed, tied) in [(11u64, true), (12, false)] {
        let cfg = ModelConfig {
            tie_embeddings: tied,
            ..cfg.clone()
        };
        let params = ModelParams::init(cfg.clone(), seed).unwrap();
        let tokens = tokenize("User 1: hi! how are you today?\nUser 2: pretty good! i am going to the lake later.");
        let (_, grads) = nll_with_grads(&params, &tokens).unwrap();
        let w = reference::weights_of(&params);
        let names: Vec<&String> = params.tensors().keys().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // every tensor at least once, the rest uniformly over all coordinates
        let sizes: Vec<usize> = names.iter().map(|n| params.get(n).unwrap().len()).collect();
        let total: usize = sizes.iter().sum();
        let mut coords: Vec<(usize, usize)> = (0..names.len()).map(|k| (k, rng.gen_range(0..sizes[k]))).collect();
        while coords.len() < COORDS / 2 {
            let mut flat = rng.gen_range(0..total);
            let mut k = 0;
            while flat >= sizes[k] {
                flat -= sizes[k];
                k += 1;
            }
            coords.push((k, flat));
        }
        for (k, i) in coords {
            let name = names[k];
            let fd = reference::central_difference(&cfg, &w, &tokens, name, i, H);
            let analytic = grads[name.as_str()].data()[i] as f64;
            // softmax is shift invariant, so key biases have an exact zero
            // gradient; the difference quotient there is pure round-off
            if name.ends_with("attn.bk") {
                ensure(analytic.abs() < 1e-12 && fd.abs() < 1e-9, format!("{name}[{i}] fd {fd:e} analytic {analytic:e}"))?;
                zeros += 1;
                continue;
            }
            let err = relative_error(fd, analytic);
            worst = worst.max(err);
            ensure(err < TOL, format!("{name}[{i}] fd {fd:e} analytic {analytic:e} rel {err:e}"))?;
        }
    }
    let took = start.elapsed();
    ensure(took < Duration::from_secs(300), format!("took {took:?}"))?;
    Ok(format!(
        "{COORDS} coordinates ({zeros} exact-zero key biases), worst relative error {worst:.2e}, {:.1}s",
        took.as_secs_f64()
    ))
}

// ---------------------------------------------------------------------------
// 2. Adam trajectories

struct HandAdam {
    theta: f64,
    m: f64,
    v: f64,
    t: i32,
}

impl HandAdam {
    fn step(&mut self, g: f64, lr: f64) {
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8f64);
        self.t += 1;
        self.m = b1 * self.m + (1.0 - b1) * g;
        self.v = b2 * self.v + (1.0 - b2) * g * g;
        let m_hat = self.m / (1.0 - b1.powi(self.t));
        let v_hat = self.v / (1.0 - b2.powi(self.t));
        self.theta += lr * m_hat / (v_hat.sqrt() + eps);
    }
}

fn ac2_adam() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut sequences: Vec<(f64, f32, Vec<f32>)> = vec![
        (5e-5, 0.0, vec![1.0; 10]),
        (5e-5, 0.3, vec![-0.5; 10]),
        (5e-5, 0.0, (0..10).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect()),
        (5e-5, -1.0, (0..10).map(|i| 0.5f32.powi(i)).collect()),
        (1e-3, 0.0, (0..10).map(|i| if i < 5 { 2.0 } else { 0.0 }).collect()),
    ];
    for _ in 0..5 {
        let lr = [5e-5, 1e-4, 1e-3][rng.gen_range(0..3)];
        sequences.push((lr, rng.gen_range(-1.0..1.0), (0..10).map(|_| rng.gen_range(-3.0..3.0)).collect()));
    }
    let mut worst = 0.0f64;
    for (lr, theta0, gs) in &sequences {
        let cfg = GapConfig {
            learning_rate: *lr,
            ..GapConfig::default()
        };
        let mut params = BTreeMap::from([("theta".to_string(), Tensor::scalar(*theta0))]);
        let mut state = AdamState::new();
        let mut hand = HandAdam {
            theta: *theta0 as f64,
            m: 0.0,
            v: 0.0,
            t: 0,
        };
        for (step, &g) in gs.iter().enumerate() {
            let grads = BTreeMap::from([("theta".to_string(), Tensor::scalar(g))]);
            state.apply(params.iter_mut(), &grads, &cfg).unwrap();
            hand.step(g as f64, *lr);
            let got = params["theta"].item() as f64;
            let diff = (got - hand.theta).abs();
            worst = worst.max(diff);
            ensure(diff <= 1e-7, format!("lr {lr} step {}: {got} vs {}", step + 1, hand.theta))?;
            ensure(state.step_count() == step as u64 + 1, "step counter")?;
        }
    }
    Ok(format!("{} ten-step trajectories, worst |diff| {worst:.2e}", sequences.len()))
}

// ---------------------------------------------------------------------------
// 3. plain update equals w + lr * g

fn ac3_plain_rule() -> Check {
    let params = ModelParams::init(ModelConfig::default(), 3).unwrap();
    let tokens = tokenize("User 1: what is your job?\nUser 2: i am a pilot and i have done it for six years.");
    let (_, grads) = nll_with_grads(&params, &tokens).unwrap();
    let cfg = GapConfig {
        rule: UpdateRule::Plain,
        ..GapConfig::default()
    };
    let mut stepped = params.clone();
    adam_ascent_step(&mut stepped, &grads, &mut AdamState::new(), &cfg).unwrap();
    let mut worst = 0.0f64;
    let mut n = 0usize;
    for (name, w) in params.tensors() {
        let g = grads[name].data();
        for (i, (&w0, &w1)) in w.data().iter().zip(stepped.get(name).unwrap().data()).enumerate() {
            let expected = w0 as f64 + cfg.learning_rate * g[i] as f64;
            let denom = expected.abs().max((w1 as f64).abs());
            let rel = if denom == 0.0 { 0.0 } else { (w1 as f64 - expected).abs() / denom };
            worst = worst.max(rel);
            n += 1;
            ensure(rel <= 1e-6, format!("{name}[{i}]: {w1} vs {expected}"))?;
        }
    }
    Ok(format!("{n} parameters, worst relative error {worst:.2e}"))
}

// ---------------------------------------------------------------------------
// 5. metric oracles

fn oracle_normalize(text: &str) -> Vec<String> {
    let mut words = Vec::new();
    let mut cur = String::new();
    for c in text.chars() {
        for lc in c.to_lowercase() {
            if lc.is_whitespace() {
                if !cur.is_empty() {
                    words.push(std::mem::take(&mut cur));
                }
            } else if lc.is_alphanumeric() {
                cur.push(lc);
            }
        }
    }
    if !cur.is_empty() {
        words.push(cur);
    }
    words
}

fn oracle_f1(hyp: &str, reference: &str) -> f64 {
    let mut h = oracle_normalize(hyp);
    let mut r = oracle_normalize(reference);
    if h.is_empty() || r.is_empty() {
        return 0.0;
    }
    h.sort();
    r.sort();
    let (mut i, mut j, mut common) = (0, 0, 0usize);
    while i < h.len() && j < r.len() {
        match h[i].cmp(&r[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                common += 1;
                i += 1;
                j += 1;
            }
        }
    }
    if common == 0 {
        return 0.0;
    }
    let p = common as f64 / h.len() as f64;
    let rc = common as f64 / r.len() as f64;
    2.0 * p * rc / (p + rc)
}

fn oracle_diversity(text: &str) -> f64 {
    let w = oracle_normalize(text);
    let mut product = 1.0;
    for n in 2..=4 {
        if w.len() < n {
            continue;
        }
        let grams: Vec<&[String]> = (0..=w.len() - n).map(|i| &w[i..i + n]).collect();
        let mut unique = 0usize;
        for (i, g) in grams.iter().enumerate() {
            if !grams[..i].contains(g) {
                unique += 1;
            }
        }
        product *= unique as f64 / grams.len() as f64;
    }
    product
}

fn random_text(rng: &mut ChaCha8Rng) -> String {
    const WORDS: &[&str] = &[
        "a", "b", "the", "The", "THE", "cat", "Cat,", "dog.", "don't", "i", "I'm", "école", "ÉCOLE", "1", "22",
        "x-y", "(ok)", "!", "...", "naïve", "swim", "pizza!",
    ];
    const SEPS: &[&str] = &[" ", " ", " ", "  ", "\t", "\n", ", ", "-"];
    if rng.gen_bool(0.7) {
        let n = rng.gen_range(0..12);
        let mut s = String::new();
        for _ in 0..n {
            s.push_str(WORDS.choose(rng).unwrap());
            s.push_str(SEPS.choose(rng).unwrap());
        }
        s
    } else {
        const CHARS: &[char] = &['a', 'b', 'A', 'B', ' ', ' ', '.', ',', '\'', '1', 'é', 'Σ', '\n', '?'];
        (0..rng.gen_range(0..24)).map(|_| *CHARS.choose(rng).unwrap()).collect()
    }
}

fn ac5_metrics() -> Check {
    ensure(unigram_f1("a b c", "a b d") == 2.0 / 3.0, "F1 worked example")?;
    let d = diversity("a a a a a");
    ensure((d - 0.0417).abs() <= 1e-4, format!("diversity worked example {d}"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut nonzero = 0;
    for k in 0..1000 {
        let (a, b) = (random_text(&mut rng), random_text(&mut rng));
        let f = unigram_f1(&a, &b);
        ensure(f == oracle_f1(&a, &b), format!("pair {k}: f1 {a:?} / {b:?}"))?;
        ensure(diversity(&a) == oracle_diversity(&a), format!("pair {k}: diversity {a:?}"))?;
        ensure(diversity(&b) == oracle_diversity(&b), format!("pair {k}: diversity {b:?}"))?;
        nonzero += usize::from(f > 0.0);
    }
    Ok(format!("1000 random pairs exact ({nonzero} with overlap); worked examples 2/3 and {d:.4}"))
}

// ---------------------------------------------------------------------------
// 6. verbalizer on forced-logit models

fn forced_logit_model(bias: &[f32]) -> ModelParams {
    let mut p = ModelParams::zeros(ModelConfig {
        n_layers: 1,
        n_heads: 1,
        d_model: 4,
        d_ff: 4,
        max_seq_len: 64,
        vocab_size: VOCAB_SIZE,
        tie_embeddings: false,
    })
    .unwrap();
    p.get_mut("head.bias").unwrap().data_mut().copy_from_slice(bias);
    p
}

fn predicted(bias: &[f32], options: &[String]) -> (usize, f64) {
    let b: Vec<f64> = bias.iter().map(|&x| x as f64).collect();
    let m = b.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + b.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
    let scores: Vec<f64> = options
        .iter()
        .map(|o| tokenize(o).iter().map(|&t| b[t as usize] - lse).sum())
        .collect();
    let mut best = 0;
    for i in 1..scores.len() {
        if scores[i] > scores[best] {
            best = i;
        }
    }
    let gap = scores
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != best)
        .map(|(_, s)| scores[best] - s)
        .fold(f64::INFINITY, f64::min);
    (best, gap)
}

fn ac6_verbalizer() -> Check {
    let mut cases: Vec<(String, Vec<f32>, Vec<String>, usize)> = Vec::new();
    let uniform = vec![0.0f32; VOCAB_SIZE];
    let s = |xs: &[&str]| xs.iter().map(|x| x.to_string()).collect::<Vec<_>>();
    cases.push(("identical options".into(), uniform.clone(), s(&["same", "same"]), 0));
    cases.push(("uniform, lengths 1 and 5".into(), uniform.clone(), s(&["a", "abcde"]), 0));
    cases.push(("uniform, lengths 5 and 1".into(), uniform.clone(), s(&["abcde", "a"]), 1));
    cases.push(("uniform, equal lengths tie".into(), uniform.clone(), s(&["abc", "xyz", "pqr"]), 0));
    let mut yes = vec![0.0f32; VOCAB_SIZE];
    for t in tokenize("yes") {
        yes[t as usize] = 6.0;
    }
    cases.push(("forced yes".into(), yes.clone(), s(&["no", "yes"]), 1));
    cases.push(("forced yes, reordered".into(), yes.clone(), s(&["yes", "no", "maybe"]), 0));
    cases.push(("forced yes, tie among copies".into(), yes, s(&["no", "yes", "yes"]), 1));

    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let normal = rand_distr::Normal::new(0.0f32, 2.0).unwrap();
    while cases.len() < 24 {
        let bias: Vec<f32> = (0..VOCAB_SIZE).map(|_| rng.sample(normal)).collect();
        let n = rng.gen_range(2..5);
        let options: Vec<String> = (0..n)
            .map(|_| (0..rng.gen_range(1..6)).map(|_| rng.gen_range(b'a'..=b'z') as char).collect())
            .collect();
        let (want, gap) = predicted(&bias, &options);
        if gap < 1e-6 {
            continue;
        }
        cases.push((format!("random bias, {n} options"), bias, options, want));
    }
    for (label, bias, options, want) in &cases {
        let (oracle, _) = predicted(bias, options);
        ensure(oracle == *want, format!("{label}: oracle disagrees with the constructed answer"))?;
        let model = forced_logit_model(bias);
        let ex = ClassificationExample {
            prompt: "Q: pick one\nA:".into(),
            options: options.clone(),
            label: 0,
        };
        let got = verbalizer_classify(&model, &ex).unwrap();
        ensure(got == *want, format!("{label}: got {got}, expected {want}"))?;
    }
    Ok(format!("{} cases", cases.len()))
}

// ---------------------------------------------------------------------------
// Shared desk pipeline

struct Desk {
    cfg: PipelineConfig,
    layout: Layout,
    summary: SweepSummary,
    sweep_time: Duration,
}

fn build_desk() -> std::result::Result<Desk, String> {
    let dir = acceptance_dir().join("desk");
    let _ = fs::remove_dir_all(&dir);
    let layout = Layout::new(&dir);
    let cfg = PipelineConfig::default();
    let t = Instant::now();
    pipeline::build_corpora(&cfg, &layout).map_err(|e| e.to_string())?;
    let pre = pipeline::pretrain_base(&cfg, &layout).map_err(|e| e.to_string())?;
    eprintln!(
        "  desk pretraining: {} steps, train loss {:.3} -> {:.3}, {:.0}s",
        pre.steps_run,
        pre.first_train_loss,
        pre.last_train_loss,
        t.elapsed().as_secs_f64()
    );
    let t = Instant::now();
    let summary = pipeline::sweep(&cfg, &layout, false).map_err(|e| e.to_string())?;
    let sweep_time = t.elapsed();
    eprintln!("  desk sweep: {} runs, {:.0}s", summary.scheduled, sweep_time.as_secs_f64());
    Ok(Desk {
        cfg,
        layout,
        summary,
        sweep_time,
    })
}

// 4. ascent raises snippet NLL, descent lowers it

fn ac4_sign(desk: &Desk) -> Check {
    let base = checkpoint::load(&desk.layout.base_checkpoint()).map_err(|e| e.to_string())?;
    let corpora = load_desk_corpora(&desk.layout.manifest()).map_err(|e| e.to_string())?;
    let mut snippets = Vec::new();
    for (i, b) in Bucket::ALL.into_iter().enumerate() {
        let n = if i == 0 { 18 } else { 16 };
        snippets.extend(sample_snippets(corpora.bucket(b), n, 200, 404 + i as u64).map_err(|e| e.to_string())?);
    }
    ensure(snippets.len() == 50, "snippet count")?;
    let mut passed = 0;
    let mut min_rise = f32::INFINITY;
    for s in &snippets {
        let (nll0, grads) = nll_with_grads(&base, &s.tokens).unwrap();
        let mut up = base.clone();
        adam_ascent_step(&mut up, &grads, &mut AdamState::new(), &GapConfig::default()).unwrap();
        let mut down = base.clone();
        let descent = GapConfig {
            direction: Direction::Descent,
            ..GapConfig::default()
        };
        adam_ascent_step(&mut down, &grads, &mut AdamState::new(), &descent).unwrap();
        let nll_up = lm_nll(&up, &s.tokens).unwrap();
        let nll_down = lm_nll(&down, &s.tokens).unwrap();
        min_rise = min_rise.min(nll_up - nll0);
        if nll_up > nll0 && nll_down < nll0 {
            passed += 1;
        }
    }
    ensure(passed == 50, format!("{passed}/50 passed"))?;
    Ok(format!("50/50 snippets; smallest step-1 rise {min_rise:.4} nats"))
}

// 7. familiarity gate

fn ac7_gate(desk: &Desk) -> Check {
    let base = checkpoint::load(&desk.layout.base_checkpoint()).map_err(|e| e.to_string())?;
    let corpora = load_desk_corpora(&desk.layout.manifest()).map_err(|e| e.to_string())?;
    let gate = familiarity_gate(&base, &corpora, 100, 200, desk.cfg.derived_seed(SeedStream::Gate)).map_err(|e| e.to_string())?;
    let shown: Vec<String> = gate.medians.iter().map(|(b, m)| format!("{b} {m:.3}")).collect();
    ensure(gate.passed, format!("ordering violated: {}", shown.join(" / ")))?;
    Ok(format!("median nats/token: {}", shown.join(" < ")))
}

// 8. protocol constants from the run log

fn ac8_protocol(desk: &Desk) -> Check {
    let text = fs::read_to_string(desk.layout.runs_log()).map_err(|e| e.to_string())?;
    let run_lines = text.lines().filter(|l| l.contains("\"kind\":\"run\"")).count();
    let runs = read_log(&desk.layout.runs_log()).map_err(|e| e.to_string())?;
    ensure(run_lines == 300 && runs.len() == 300, format!("{run_lines} run lines, {} parsed runs", runs.len()))?;
    let mut max_task_examples = 0;
    for r in &runs {
        let rec = &r.record;
        let id = &rec.run_id;
        ensure(rec.snippet_len == 200, format!("{id}: snippet_len {}", rec.snippet_len))?;
        ensure(rec.max_steps == 15 && rec.steps_taken() <= 15, format!("{id}: steps"))?;
        ensure(rec.entries.len() == rec.steps_taken() + 1, format!("{id}: entry count"))?;
        ensure(rec.entries.iter().enumerate().all(|(i, e)| e.epoch == i), format!("{id}: epoch order"))?;
        ensure(rec.batch_size == 1, format!("{id}: batch size {}", rec.batch_size))?;
        ensure(r.eval_cap <= DEFAULT_EVAL_CAP, format!("{id}: eval cap {}", r.eval_cap))?;
        for e in &rec.entries {
            for (name, m) in &e.eval.tasks {
                let n = m.n_examples + m.n_skipped;
                max_task_examples = max_task_examples.max(n);
                ensure(n <= DEFAULT_EVAL_CAP, format!("{id} epoch {}: {name} evaluated {n}", e.epoch))?;
            }
        }
    }
    let complete = runs.iter().filter(|r| r.record.entries.len() == 16).count();
    Ok(format!(
        "300 runs, {complete} with all 16 epochs; snippet 200, batch 1, <=15 steps, <= {max_task_examples} examples per task"
    ))
}

// 9. GAP effect at desk scale

fn ac9_effect(desk: &Desk) -> Check {
    let s = &desk.summary;
    let above = s.scatter.iter().filter(|p| p.best_score > s.baseline_score).count();
    let frac = above as f64 / s.scheduled as f64;
    let report = desk.layout.report_dir();
    let medians = fs::read_to_string(report.join("medians.csv")).map_err(|e| e.to_string())?;
    let rows: Vec<&str> = medians.lines().skip(1).collect();
    ensure(
        Bucket::ALL.iter().all(|b| rows.iter().any(|r| r.starts_with(&format!("{b},")))),
        "medians.csv lacks a bucket row",
    )?;
    ensure(report.join("scatter.svg").exists() && report.join("scatter.csv").exists(), "report files missing")?;
    ensure(frac >= 0.10, format!("{above}/{} runs above baseline ({:.1}%)", s.scheduled, 100.0 * frac))?;
    ensure(desk.sweep_time < Duration::from_secs(7200), format!("sweep took {:?}", desk.sweep_time))?;
    let medians: Vec<String> = s
        .buckets
        .iter()
        .map(|b| format!("{} {:.4}", b.bucket, b.median_best_score.unwrap_or(f64::NAN)))
        .collect();
    let order: Vec<&str> = s.median_ordering.iter().map(|b| b.as_str()).collect();
    Ok(format!(
        "{above}/{} above baseline {:.4}; medians {}; lowest-to-highest {}; sweep {:.0}s",
        s.scheduled,
        s.baseline_score,
        medians.join(", "),
        order.join(" < "),
        desk.sweep_time.as_secs_f64()
    ))
}

/// Memorized snippets should score as more familiar than out-of-distribution
/// snippets in nearly every pairing.
fn familiarity_pairs(desk: &Desk) -> Check {
    let base = checkpoint::load(&desk.layout.base_checkpoint()).map_err(|e| e.to_string())?;
    let corpora = load_desk_corpora(&desk.layout.manifest()).map_err(|e| e.to_string())?;
    let score = |b: Bucket, seed: u64| -> Vec<f64> {
        sample_snippets(corpora.bucket(b), 50, 200, seed)
            .unwrap()
            .iter()
            .map(|s| familiarity_score(&base, s).unwrap())
            .collect()
    };
    let mem = score(Bucket::Memorized, 71);
    let ood = score(Bucket::OutOfDistribution, 72);
    let wins = mem.iter().flat_map(|m| ood.iter().map(move |o| m < o)).filter(|&w| w).count();
    let frac = wins as f64 / (mem.len() * ood.len()) as f64;
    ensure(frac >= 0.9, format!("{:.1}% of pairs", 100.0 * frac))?;
    Ok(format!("memorized below out-of-distribution in {:.1}% of pairs", 100.0 * frac))
}

// ---------------------------------------------------------------------------
// 10. determinism of the full pipeline

fn reduced_config(jobs: usize) -> PipelineConfig {
    let text = format!(
        "seed = 17\ntrain_docs = 24\nmemorized_docs = 6\nheld_out_docs = 4\nood_docs = 4\nvalidation_docs = 1\n\
         min_snippets = 4\ntask_examples = 24\npretrain_steps = 150\npretrain_eval_every = 50\n\
         runs_per_bucket = 4\nmax_steps = 4\neval_cap = 4\ngate_snippets = 12\njobs = {jobs}\n"
    );
    PipelineConfig::from_kv(gap_core::config::KvConfig::parse(&text).unwrap()).unwrap()
}

fn sorted_lines(path: &Path) -> Vec<String> {
    let mut lines: Vec<String> = fs::read_to_string(path).unwrap().lines().map(str::to_owned).collect();
    lines.sort();
    lines
}

fn ac10_determinism() -> Check {
    let root = acceptance_dir().join("determinism");
    let _ = fs::remove_dir_all(&root);
    let a = Layout::new(root.join("a"));
    let b = Layout::new(root.join("b"));
    pipeline::run_pipeline(&reduced_config(1), &a).map_err(|e| e.to_string())?;
    pipeline::run_pipeline(&reduced_config(2), &b).map_err(|e| e.to_string())?;
    let mut compared = 0;
    for f in [
        a.base_checkpoint(),
        a.best_checkpoint(),
        a.pretrain_log(),
        a.baseline(),
        a.familiarity(),
        a.manifest(),
    ]
    .into_iter()
    .chain(fs::read_dir(a.report_dir()).unwrap().map(|e| e.unwrap().path()))
    {
        let rel = f.strip_prefix(&a.root).unwrap();
        let other = b.root.join(rel);
        ensure(fs::read(&f).unwrap() == fs::read(&other).unwrap(), format!("{} differs", rel.display()))?;
        compared += 1;
    }
    ensure(sorted_lines(&a.runs_log()) == sorted_lines(&b.runs_log()), "runs.jsonl differs after sorting")?;
    // the report is a pure function of the log
    let regenerated = pipeline::report(&a).map_err(|e| e.to_string())?;
    let written: SweepSummary =
        serde_json::from_str(&fs::read_to_string(a.report_dir().join("summary.json")).unwrap()).unwrap();
    ensure(regenerated == written, "report regenerated from the log differs")?;
    Ok(format!("{} files byte-identical plus sorted runs.jsonl (1 vs 2 worker threads)", compared + 1))
}

// ---------------------------------------------------------------------------

fn guarded(f: impl FnOnce() -> Check) -> Check {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(r) => r,
        Err(p) => Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into())),
    }
}

fn main() -> ExitCode {
    let mut failures = 0;
    let mut report = |id: &str, title: &str, result: Check| {
        match &result {
            Ok(detail) => println!("[PASS] {id} {title}: {detail}"),
            Err(why) => {
                failures += 1;
                println!("[FAIL] {id} {title}: {why}");
            }
        }
    };
    report("AC1", "gradient check, desk LM", guarded(ac1_gradcheck));
    report("AC2", "Adam oracle", guarded(ac2_adam));
    report("AC3", "plain-rule reduction", guarded(ac3_plain_rule));
    report("AC5", "metric oracles", guarded(ac5_metrics));
    report("AC6", "verbalizer oracle", guarded(ac6_verbalizer));

    eprintln!("  building the desk pipeline (corpora, pretraining, 300-run sweep)...");
    let desk = catch_unwind(build_desk).unwrap_or_else(|_| Err("desk pipeline panicked".into()));
    match &desk {
        Ok(d) => {
            report("AC4", "ascent sign tests", guarded(|| ac4_sign(d)));
            report("AC7", "corpus validity gate", guarded(|| ac7_gate(d)));
            report("AC8", "protocol conformance", guarded(|| ac8_protocol(d)));
            report("AC9", "desk-scale GAP effect", guarded(|| ac9_effect(d)));
            report("AC7+", "familiarity pairs", guarded(|| familiarity_pairs(d)));
        }
        Err(e) => {
            for (id, title) in [
                ("AC4", "ascent sign tests"),
                ("AC7", "corpus validity gate"),
                ("AC8", "protocol conformance"),
                ("AC9", "desk-scale GAP effect"),
            ] {
                report(id, title, Err(format!("desk pipeline failed: {e}")));
            }
        }
    }
    report("AC10", "pipeline determinism", guarded(ac10_determinism));

    if failures == 0 {
        println!("acceptance: all criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: {failures} criteria failed");
        ExitCode::FAILURE
    }
}
