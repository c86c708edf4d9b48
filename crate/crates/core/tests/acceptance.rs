//! Acceptance suite: one PASS/FAIL line per criterion.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::Instant;

use auditlm::eval::{
    field_cross_entropy, next_action_accuracy, per_field_perplexity, perplexity, rouge1, Accuracy,
};
use auditlm::model::{
    init_model, load_checkpoint, per_row_entropy, save_checkpoint, Arch, Batch, Checkpoint, ModelConfig,
    ModelState, Strategy, Tensor,
};
use auditlm::optim::{AdamWConfig, OptimState, OptimizerConfig, SophiaConfig};
use auditlm::pipeline::{prepare_corpus, Partition, PreparedCorpus};
use auditlm::sessionize::{chunk_session, PatientIndex, PreprocessConfig, Provenance, QuantizerSpec, Session, SessionRow};
use auditlm::synth::{generate_logs, reference, true_entropy_rate, EntropyMode, ProcessSpec};
use auditlm::trainer::{stratified_split, train, SplitSpec, TrainConfig};
use auditlm::vocab::{decode_tokenized, encode_session, Field, FieldLayout, GlobalVocab, BOS, NUM_SPECIALS};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(f64::MIN_POSITIVE)
}

fn quantizer() -> Outcome {
    let q = QuantizerSpec::default();
    for (k, &e) in q.edges().iter().enumerate() {
        let want = 240f64.powf(k as f64 / 4.0);
        ensure(rel_err(e, want) <= 1e-9, || format!("edge {k}: {e} vs {want}"))?;
    }
    let bin3 = format!("{:.3}", 240f64.powf(0.75));
    let want = ["≤ 1", "3.936", "15.492", bin3.as_str(), "240"];
    let got = q.labels();
    ensure(got == want, || format!("labels {got:?}, expected {want:?}"))?;
    Ok(format!("edges within 1e-9, labels {got:?}"))
}

fn session_of(rows: usize, metric: &str) -> Session {
    Session {
        rows: (0..rows)
            .map(|i| SessionRow {
                metric_name: metric.into(),
                patient: PatientIndex::Index((i % 128) as u8),
                delta_bin: (i % 5) as u8,
            })
            .collect(),
        provenance: Provenance::default(),
    }
}

fn token_budget() -> Outcome {
    let vocab = GlobalVocab::from_metric_names(["open chart"]).map_err(|e| e.to_string())?;
    let full = encode_session(&session_of(341, "open chart"), &vocab);
    ensure(full.tokens.len() == 1024, || format!("341 rows -> {} tokens", full.tokens.len()))?;
    let max_rows = ModelConfig::preset("gpt2-3layer", vocab.len()).map_err(|e| e.to_string())?.max_rows();
    let chunks = chunk_session(&session_of(342, "open chart"), max_rows);
    let sizes: Vec<usize> = chunks.iter().map(|c| c.len()).collect();
    ensure(sizes == [341, 1], || format!("342 rows chunk into {sizes:?}"))?;
    Ok("341 rows = 1024 tokens; 342 rows -> [341, 1]".into())
}

fn random_session(names: &[String], rng: &mut ChaCha8Rng) -> Session {
    let rows = rng.random_range(1..60);
    Session {
        rows: (0..rows)
            .map(|_| SessionRow {
                metric_name: names[rng.random_range(0..names.len())].clone(),
                patient: match rng.random_range(0..10) {
                    0 => PatientIndex::Absent,
                    1 => PatientIndex::Oov,
                    _ => PatientIndex::Index(rng.random_range(0..128)),
                },
                delta_bin: rng.random_range(0..5),
            })
            .collect(),
        provenance: Provenance {
            user_id: format!("u{}", rng.random_range(0..1000)),
            shift: rng.random_range(0..50),
            session: rng.random_range(0..50),
            chunk: rng.random_range(0..3),
        },
    }
}

fn tiny_config(metric_count: usize, arch: Arch) -> ModelConfig {
    ModelConfig {
        arch,
        n_layers: 1,
        n_heads: 2,
        d_model: 8,
        d_ff: 16,
        context_len: 16,
        vocab_size: FieldLayout::new(metric_count).vocab_size(),
        seed: 0,
    }
}

fn round_trips() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let names: Vec<String> = (0..50).map(|i| format!("action {i:02}")).collect();
    let vocab = GlobalVocab::from_metric_names(&names).map_err(|e| e.to_string())?;
    for i in 0..10_000 {
        let s = random_session(&names, &mut rng);
        let back = decode_tokenized(&encode_session(&s, &vocab), &vocab).map_err(|e| e.to_string())?;
        ensure(back == s, || format!("session {i} differs after round trip"))?;
    }

    let json = vocab.to_json();
    let reread = GlobalVocab::from_json(&json).map_err(|e| e.to_string())?;
    ensure(reread.to_json() == json && reread.hash() == vocab.hash(), || "vocab round trip differs".into())?;

    let mut state = init_model::<f32>(&tiny_config(names.len(), Arch::DecoderRotary), 9).map_err(|e| e.to_string())?;
    state.bind_vocab(&vocab).map_err(|e| e.to_string())?;
    let mut ckpt = Checkpoint::new(state);
    ckpt.optimizer = vec![Tensor {
        name: "optim.m/probe".into(),
        shape: vec![3],
        data: vec![0.1, -0.0, f32::MIN_POSITIVE],
    }];
    ckpt.meta = serde_json::json!({"epoch": 1});
    let mut first = Vec::new();
    save_checkpoint(&ckpt, &mut first).map_err(|e| e.to_string())?;
    let loaded = load_checkpoint(first.as_slice(), Some(vocab.hash())).map_err(|e| e.to_string())?;
    let mut second = Vec::new();
    save_checkpoint(&loaded, &mut second).map_err(|e| e.to_string())?;
    ensure(first == second, || "checkpoint bytes differ after reload".into())?;
    let bitwise = ckpt
        .state
        .params
        .tensors
        .iter()
        .zip(&loaded.state.params.tensors)
        .all(|(a, b)| a.data.iter().zip(&b.data).all(|(x, y)| x.to_bits() == y.to_bits()));
    ensure(bitwise, || "parameters differ bitwise".into())?;
    Ok(format!("10000 sessions, vocab and {}-byte checkpoint identical", first.len()))
}

fn random_tokens(layout: &FieldLayout, rows: usize, rng: &mut ChaCha8Rng) -> Vec<u32> {
    let mut t = vec![BOS];
    for _ in 0..rows {
        for f in Field::ALL {
            let s = layout.support(f);
            t.push(s[rng.random_range(0..s.len())]);
        }
    }
    t
}

/// Masked NLL from first principles: candidates are the field's contiguous
/// block after the four specials plus UNK_MN (2) for metrics or PAT_OOV (3)
/// for patients.
fn brute_nll(logits: &[f64], metric_count: usize, position: usize, target: u32) -> f64 {
    let mn = NUM_SPECIALS..NUM_SPECIALS + metric_count;
    let pid = mn.end..mn.end + 129;
    let at = pid.end..pid.end + 5;
    let mut support: Vec<usize> = match position % 3 {
        1 => mn.chain([2]).collect(),
        2 => pid.chain([3]).collect(),
        _ => at.collect(),
    };
    support.sort_unstable();
    assert!(support.contains(&(target as usize)));
    let max = support.iter().map(|&v| logits[v]).fold(f64::NEG_INFINITY, f64::max);
    let lse = max + support.iter().map(|&v| (logits[v] - max).exp()).sum::<f64>().ln();
    lse - logits[target as usize]
}

/// Per-position brute-force NLLs; entry p scores token p + 1.
fn brute_sequence(state: &ModelState<f64>, tokens: &[u32], metric_count: usize) -> Vec<f64> {
    let out = state.forward(tokens).expect("forward");
    (0..tokens.len() - 1)
        .map(|p| brute_nll(out.logits_at(p), metric_count, p + 1, tokens[p + 1]))
        .collect()
}

fn loss_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    for i in 0..100 {
        let m = rng.random_range(1..8);
        let arch = if i % 2 == 0 { Arch::DecoderAbsolute } else { Arch::DecoderRotary };
        let mut state = init_model::<f64>(&tiny_config(m, arch), i).map_err(|e| e.to_string())?;
        for t in &mut state.params.tensors {
            t.data.iter_mut().for_each(|x| *x += rng.random_range(-0.5..0.5));
        }
        let layout = state.layout();
        let seqs: Vec<Vec<u32>> = (0..rng.random_range(1..4))
            .map(|_| {
                let rows = rng.random_range(1..6);
                random_tokens(&layout, rows, &mut rng)
            })
            .collect();
        let mut all = Vec::new();
        for s in &seqs {
            let brute = brute_sequence(&state, s, m);
            let lib = state.token_nlls(s).map_err(|e| e.to_string())?;
            for (a, b) in lib.iter().zip(&brute) {
                worst = worst.max(rel_err(*a, *b));
            }
            all.extend(brute);
        }
        let loss = state.loss_and_grads(&Batch::from_sequences(&seqs)).map_err(|e| e.to_string())?.loss;
        worst = worst.max(rel_err(loss, all.iter().sum::<f64>() / all.len() as f64));
    }
    ensure(worst <= 1e-6, || format!("worst relative error {worst:e}"))?;
    Ok(format!("100 instances, worst relative error {worst:.2e}"))
}

fn gradient_check() -> Outcome {
    const H: f64 = 1e-5;
    const FLOOR: f64 = 1e-6;
    let mut worst = (0.0f64, String::new());
    let mut checked = 0;
    for arch in [Arch::DecoderAbsolute, Arch::DecoderRotary] {
        let config = ModelConfig {
            n_layers: 2,
            d_model: 16,
            d_ff: 40,
            ..tiny_config(3, arch)
        };
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut state = init_model::<f64>(&config, 3).map_err(|e| e.to_string())?;
        for t in &mut state.params.tensors {
            let gain = t.name.contains("norm") && t.name.ends_with("weight");
            for x in &mut t.data {
                let r: f64 = rng.random_range(-1.0..1.0);
                *x = if gain { 1.0 + 0.3 * r } else { 0.4 * r };
            }
        }
        let layout = state.layout();
        let batch = Batch::from_sequences(&[random_tokens(&layout, 5, &mut rng), random_tokens(&layout, 3, &mut rng)]);
        let analytic = state.loss_and_grads(&batch).map_err(|e| e.to_string())?.grads;
        for ti in 0..state.params.tensors.len() {
            for i in 0..state.params.tensors[ti].data.len() {
                let orig = state.params.tensors[ti].data[i];
                state.params.tensors[ti].data[i] = orig + H;
                let plus = state.loss_and_grads(&batch).map_err(|e| e.to_string())?.loss;
                state.params.tensors[ti].data[i] = orig - H;
                let minus = state.loss_and_grads(&batch).map_err(|e| e.to_string())?.loss;
                state.params.tensors[ti].data[i] = orig;
                let numeric = (plus - minus) / (2.0 * H);
                let a = analytic.tensors[ti].data[i];
                let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(FLOOR);
                if err > worst.0 {
                    worst = (err, format!("{:?} {}[{i}]", arch, state.params.tensors[ti].name));
                }
                checked += 1;
            }
        }
    }
    ensure(worst.0 <= 1e-4, || format!("{} has relative error {:e}", worst.1, worst.0))?;
    Ok(format!("{checked} coordinates, worst relative error {:.2e}", worst.0))
}

fn perplexity_identity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let m = 6;
    let state = init_model::<f64>(&tiny_config(m, Arch::DecoderAbsolute), 2).map_err(|e| e.to_string())?;
    let seqs: Vec<Vec<u32>> = (0..8).map(|_| random_tokens(&state.layout(), 5, &mut rng)).collect();
    let mut sums = [0.0; 3];
    let mut counts = [0usize; 3];
    for s in &seqs {
        for (p, nll) in brute_sequence(&state, s, m).into_iter().enumerate() {
            sums[p % 3] += nll;
            counts[p % 3] += 1;
        }
    }
    let ppl = per_field_perplexity(&state, &seqs).map_err(|e| e.to_string())?;
    let got = [ppl.metric_name, ppl.pat_id, ppl.at_bin];
    for f in 0..3 {
        let want = (sums[f] / counts[f] as f64).exp();
        ensure(rel_err(got[f], want) <= 1e-6, || format!("field {f}: {} vs {want}", got[f]))?;
    }
    let lo = perplexity(1.46395);
    let hi = perplexity(1.46405);
    ensure(lo < 4.32305 && hi >= 4.32295, || format!("exp([1.46395, 1.46405)) = [{lo}, {hi})"))?;
    let point = perplexity(1.4640);
    ensure((point - 4.3230).abs() < 2.5e-4, || format!("exp(1.4640) = {point}"))?;
    Ok(format!("3 fields within 1e-6; exp(1.4640) = {point:.5} rounds onto 4.3230's interval"))
}

fn reference_corpus() -> (ProcessSpec, PreparedCorpus) {
    let spec = ProcessSpec::reference_workflow();
    let logs = generate_logs(&spec, 40, 5000, 11).expect("generate");
    let corpus = prepare_corpus(&logs.streams, &PreprocessConfig::default(), &SplitSpec::default()).expect("prepare");
    (spec, corpus)
}

fn learning(trained: &mut Option<(ProcessSpec, PreparedCorpus, ModelState)>) -> Outcome {
    let (spec, corpus) = reference_corpus();
    let h = true_entropy_rate(&spec, EntropyMode::Stationary).map_err(|e| e.to_string())?;
    let rows: usize = [Partition::Train, Partition::Val, Partition::Test]
        .iter()
        .flat_map(|&p| corpus.partition(p))
        .map(|s| s.rows())
        .sum();
    ensure(spec.n_actions() == 20 && rows >= 200_000, || format!("{} actions, {rows} rows", spec.n_actions()))?;
    let config = ModelConfig::preset("gpt2-3layer", corpus.vocab.len())
        .map_err(|e| e.to_string())?
        .with_width(64, 4);
    let mut state = init_model::<f32>(&config, 1).map_err(|e| e.to_string())?;
    state.bind_vocab(&corpus.vocab).map_err(|e| e.to_string())?;
    let train_config = TrainConfig {
        epochs: 3,
        optimizer: OptimizerConfig::Sophia(SophiaConfig::default()),
        seed: 5,
        ..Default::default()
    };
    let val = corpus.sequences(Partition::Val);
    let outcome = train(state, &corpus.sequences(Partition::Train), &val[..200.min(val.len())], &train_config)
        .map_err(|e| e.to_string())?;
    let losses = field_cross_entropy(&outcome.state, &corpus.sequences(Partition::Test), 1).map_err(|e| e.to_string())?;
    let ce = losses.mean(Field::MetricName).ok_or("no metric positions")?;
    let (lo, hi) = (h - 0.02, 1.05 * h + 0.05);
    let detail = format!("MN CE {ce:.4} nats in [{lo:.4}, {hi:.4}] (H = {h:.4}, {rows} rows, {} steps)", outcome.trace.len());
    *trained = Some((spec, corpus, outcome.state));
    ensure(ce >= lo && ce <= hi, || detail.clone())?;
    Ok(detail)
}

fn entropy_reproduction(trained: &Option<(ProcessSpec, PreparedCorpus, ModelState)>) -> Outcome {
    let (spec, corpus, state) = trained.as_ref().ok_or("no trained reference model")?;
    let id = |k: usize| corpus.vocab.metric_id(&spec.actions[k]).ok_or(format!("action {k} not in vocabulary"));
    let (leader, follower) = (id(reference::LEADER)?, id(reference::FOLLOWER)?);
    let interrupts: Vec<u32> = reference::INTERRUPTS.iter().map(|&k| id(k)).collect::<Result<_, _>>()?;
    let threshold = (interrupts.len() as f64).ln() - 0.1;
    let (mut followers, mut interrupt_min, mut n_interrupts) = (0usize, f64::INFINITY, 0usize);
    let mut follower_max = 0.0f64;
    for s in corpus.test.iter().take(400) {
        let e = per_row_entropy(state, &s.tokens).map_err(|e| e.to_string())?;
        for r in 1..e.len() {
            let (mn, prev) = (s.tokens[1 + 3 * r], s.tokens[1 + 3 * (r - 1)]);
            let here = e[r].ok_or("missing row entropy")?;
            if mn == follower && prev == leader {
                followers += 1;
                follower_max = follower_max.max(here);
                ensure(here < 0.05, || format!("follower row entropy {here:.4}"))?;
                if let Some(before) = e[r - 1] {
                    ensure(here < before, || format!("follower {here:.4} not below leader {before:.4}"))?;
                }
            }
            if interrupts.contains(&mn) {
                n_interrupts += 1;
                interrupt_min = interrupt_min.min(here);
            }
        }
    }
    ensure(followers > 0 && n_interrupts > 0, || "no follower or interrupt rows scored".into())?;
    ensure(interrupt_min >= threshold, || format!("interrupt row entropy {interrupt_min:.4} < {threshold:.4}"))?;
    Ok(format!(
        "{followers} follower rows max {follower_max:.4} below their leaders; {n_interrupts} interrupt rows min {interrupt_min:.4} >= {threshold:.4}"
    ))
}

fn cycle_corpus() -> PreparedCorpus {
    let logs = generate_logs(&ProcessSpec::cycle(8), 20, 1500, 3).expect("generate");
    prepare_corpus(&logs.streams, &PreprocessConfig::default(), &SplitSpec::default()).expect("prepare")
}

fn small_model(corpus: &PreparedCorpus, seed: u64) -> Result<ModelState, String> {
    let mut config = ModelConfig::preset("gpt2-3layer", corpus.vocab.len())
        .map_err(|e| e.to_string())?
        .with_width(32, 4);
    config.n_layers = 1;
    let mut state = init_model::<f32>(&config, seed).map_err(|e| e.to_string())?;
    state.bind_vocab(&corpus.vocab).map_err(|e| e.to_string())?;
    Ok(state)
}

fn joint_below_fields(a: &Accuracy) -> bool {
    a.all <= a.metric_name.min(a.pat_id).min(a.at_bin)
}

fn next_action() -> Outcome {
    let corpus = cycle_corpus();
    let config = TrainConfig {
        epochs: 8,
        optimizer: OptimizerConfig::AdamW(AdamWConfig {
            lr: 3e-3,
            ..Default::default()
        }),
        warmup_steps: 20,
        seed: 1,
        ..Default::default()
    };
    let outcome = train(small_model(&corpus, 2)?, &corpus.sequences(Partition::Train), &[] as &[Vec<u32>], &config)
        .map_err(|e| e.to_string())?;
    let test = corpus.sequences(Partition::Test);
    let greedy = next_action_accuracy(&outcome.state, &test, &Strategy::Greedy, 0).map_err(|e| e.to_string())?;
    let sampled = next_action_accuracy(
        &outcome.state,
        &test[..20.min(test.len())],
        &Strategy::TopK { k: 3, temperature: 1.0 },
        0,
    )
    .map_err(|e| e.to_string())?;
    for a in [&greedy, &sampled] {
        ensure(joint_below_fields(a), || format!("All above a field: {a:?}"))?;
    }
    ensure(greedy.metric_name >= 0.95, || format!("greedy MN accuracy {:.4}", greedy.metric_name))?;
    Ok(format!(
        "greedy MN {:.4} PID {:.4} AT {:.4} All {:.4} over {} events",
        greedy.metric_name, greedy.pat_id, greedy.at_bin, greedy.all, greedy.events
    ))
}

fn rouge_oracle() -> Outcome {
    let cases: [(&[char], &[char], f64); 3] = [
        (&['a', 'b', 'b'], &['a', 'b', 'c'], 2.0 / 3.0),
        (&['a', 'b', 'c'], &['a', 'b', 'c'], 1.0),
        (&['a', 'b'], &['c', 'd'], 0.0),
    ];
    for (c, r, want) in cases {
        let got = rouge1(c, r);
        ensure(got.recall == want && got.precision == want && got.f1 == want, || {
            format!("{c:?} vs {r:?}: {got:?}, expected {want}")
        })?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for i in 0..1000 {
        let mut c: Vec<u8> = (0..rng.random_range(1..20)).map(|_| rng.random_range(0..8)).collect();
        let mut r: Vec<u8> = (0..rng.random_range(1..20)).map(|_| rng.random_range(0..8)).collect();
        let before = rouge1(&c, &r);
        c.shuffle(&mut rng);
        r.shuffle(&mut rng);
        let after = rouge1(&c, &r);
        ensure(before == after, || format!("pair {i}: {before:?} vs {after:?}"))?;
    }
    Ok("3 hand cases exact; 1000 permuted pairs invariant".into())
}

const CURVATURE: [f64; 4] = [0.5, 1.0, 3.0, 9.0];

fn bowl_loss(optimizer: OptimizerConfig) -> Result<f64, String> {
    use auditlm::model::ParamSet;
    let vector = |data: Vec<f64>| ParamSet {
        tensors: vec![Tensor {
            name: "theta".into(),
            shape: vec![data.len()],
            data,
        }],
    };
    let mut params = vector(vec![1.0, -2.0, 0.5, 1.5]);
    let mut opt = OptimState::new(optimizer, &params);
    for _ in 0..2000 {
        if opt.hessian_due() {
            opt.update_hessian(&vector(CURVATURE.to_vec())).map_err(|e| e.to_string())?;
        }
        let g = params.tensors[0].data.iter().zip(CURVATURE).map(|(x, a)| a * x).collect();
        opt.step(&mut params, &vector(g), 1e-2).map_err(|e| e.to_string())?;
    }
    Ok(params.tensors[0].data.iter().zip(CURVATURE).map(|(x, a)| 0.5 * a * x * x).sum())
}

fn optimizer_properties() -> Outcome {
    let adamw = bowl_loss(OptimizerConfig::AdamW(AdamWConfig::default()))?;
    let sophia = bowl_loss(OptimizerConfig::Sophia(SophiaConfig {
        weight_decay: 0.0,
        ..Default::default()
    }))?;
    ensure(adamw < 1e-6 && sophia < 1e-6, || format!("bowl losses AdamW {adamw:e}, Sophia {sophia:e}"))?;

    let corpus = cycle_corpus();
    let sequences = corpus.sequences(Partition::Train);
    let config = TrainConfig {
        epochs: 1,
        seed: 8,
        ..Default::default()
    };
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().map_err(|e| e.to_string())?;
    let run = || pool.install(|| train(small_model(&corpus, 4)?, &sequences, &[] as &[Vec<u32>], &config).map_err(|e| e.to_string()));
    let (a, b) = (run()?, run()?);
    let same_trace = a.trace.len() == b.trace.len()
        && a.trace.iter().zip(&b.trace).all(|(x, y)| x.raw_loss.to_bits() == y.raw_loss.to_bits());
    ensure(same_trace, || "loss traces differ between runs".into())?;
    Ok(format!(
        "bowl AdamW {adamw:.1e} Sophia {sophia:.1e}; {} Sophia steps with clip bound checked, traces bitwise equal",
        a.trace.len()
    ))
}

fn split_fidelity() -> Outcome {
    let ids: Vec<String> = (0..162).map(|i| format!("clin{i:03}")).collect();
    let split = stratified_split(&ids, &SplitSpec::default()).map_err(|e| e.to_string())?;
    let sizes = (split.train.len(), split.val.len(), split.test.len());
    ensure(sizes == (114, 24, 24), || format!("sizes {sizes:?}"))?;
    let mut all: Vec<&String> = split.train.iter().chain(&split.val).chain(&split.test).collect();
    all.sort();
    all.dedup();
    ensure(all.len() == 162, || format!("{} distinct clinicians across partitions", all.len()))?;
    Ok("(114, 24, 24), disjoint and exhaustive".into())
}

fn main() -> ExitCode {
    let mut trained = None;
    let mut failed = 0;
    let mut report = |n: usize, name: &str, f: &mut dyn FnMut() -> Outcome| {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(&mut *f)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or(p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(d) => println!("PASS {n:>2} {name}: {d} ({secs:.1}s)"),
            Err(d) => {
                failed += 1;
                println!("FAIL {n:>2} {name}: {d} ({secs:.1}s)");
            }
        }
    };
    report(1, "quantizer fidelity", &mut quantizer);
    report(2, "token budget", &mut token_budget);
    report(3, "round trips", &mut round_trips);
    report(4, "loss oracle", &mut loss_oracle);
    report(5, "gradient check", &mut gradient_check);
    report(6, "perplexity identity", &mut perplexity_identity);
    report(7, "learning", &mut || learning(&mut trained));
    report(8, "entropy reproduction", &mut || entropy_reproduction(&trained));
    report(9, "next-action accuracy", &mut next_action);
    report(10, "rouge oracle", &mut rouge_oracle);
    report(11, "optimizer properties", &mut optimizer_properties);
    report(12, "split fidelity", &mut split_fidelity);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
