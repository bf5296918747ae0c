//! Acceptance criteria. Each test prints one `PASS` or `FAIL` line.

use std::io::Write;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use abscl_core::adapters::{init_adapter, load_adapter, save_adapter, AdapterRole, InjectionPoint, LoraAdapter, Projection};
use abscl_core::eval::{absc_metrics, joint_f1, rank_score, span_f1, ScoreTable};
use abscl_core::model::{BaseModel, ModelConfig};
use abscl_core::numerics::{Cholesky, Matrix, ParamId};
use abscl_core::pipeline::{
    build_prototypes, desk_options, run_order, sentence_repr, Base, OrderResult, Prepared, RunOptions,
};
use abscl_core::positioning::{mahalanobis_score, DomainPrototypeSet};
use abscl_core::tasks::{format_target, parse_output, synth_generate, Aspect, Polarity, SynthSpec, Task};
use abscl_core::trainer::{
    decoupled_gradients, encode_all, gradient_suite, load_run, save_run, train_domain, warmup, DomainSequenceState,
    TrainConfig,
};
use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

static SERIAL: Mutex<()> = Mutex::new(());

struct Outcome {
    failures: Vec<String>,
}

impl Outcome {
    fn new() -> Self {
        Self { failures: Vec::new() }
    }

    fn check(&mut self, ok: bool, what: impl Into<String>) {
        if !ok {
            self.failures.push(what.into());
        }
    }

    fn finish(self, id: usize, name: &str, elapsed: Duration, budget: Duration, detail: &str) {
        let mut failures = self.failures;
        if elapsed > budget {
            failures.push(format!("took {:.1}s, budget {:.0}s", elapsed.as_secs_f64(), budget.as_secs_f64()));
        }
        let verdict = if failures.is_empty() { "PASS" } else { "FAIL" };
        // straight to the stderr handle so the line survives output capture
        let _ = writeln!(
            std::io::stderr(),
            "{verdict} criterion {id} ({name}) {:.2}s {detail}{}",
            elapsed.as_secs_f64(),
            if failures.is_empty() { String::new() } else { format!(" :: {}", failures.join("; ")) }
        );
        assert!(failures.is_empty(), "criterion {id} failed: {}", failures.join("; "));
    }
}

fn serial() -> std::sync::MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

// ---------------------------------------------------------------- 1

#[test]
fn criterion_1_score_reproduction() {
    let _g = serial();
    let t = Instant::now();
    let mut out = Outcome::new();
    let table = ScoreTable::new(
        vec!["4".into(), "8".into(), "16".into(), "32".into()],
        vec!["absc_acc".into(), "absc_f1".into(), "ae_f1".into(), "joint_f1".into()],
        vec![
            vec![0.9460, 0.9197, 0.6818, 0.5298],
            vec![0.9498, 0.9123, 0.6719, 0.5893],
            vec![0.9465, 0.9124, 0.6865, 0.5700],
            vec![0.9450, 0.8812, 0.6681, 0.5697],
        ],
    )
    .unwrap();
    let expected = [0.4882, 0.7536, 0.6996, 0.1647];
    let mut got = Vec::new();
    for (row, want) in expected.iter().enumerate() {
        let s = rank_score(&table, row).unwrap();
        got.push(format!("{s:.4}"));
        out.check((s - want).abs() <= 5e-4, format!("row {row}: {s:.5} vs {want}"));
    }
    out.finish(1, "score reproduction", t.elapsed(), Duration::from_secs(1), &format!("scores {}", got.join(" ")));
}

// ---------------------------------------------------------------- 2

#[test]
fn criterion_2_gradient_suite() {
    let _g = serial();
    let t = Instant::now();
    let mut out = Outcome::new();
    let mut worst = 0.0f64;
    for seed in 0..20 {
        let r = gradient_suite(seed, 1e-5).unwrap();
        worst = worst.max(r.worst());
        out.check(r.worst() <= 1e-4, format!("seed {seed}: {:?}", r));
    }
    out.finish(2, "gradient suite", t.elapsed(), Duration::from_secs(60), &format!("20 seeds, worst {worst:.2e}"));
}

// ---------------------------------------------------------------- 3

fn to_na(m: &Matrix) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.rows(), m.cols(), m.data())
}

fn layer_norm(x: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = x.clone();
    for mut row in out.row_iter_mut() {
        let n = row.len() as f64;
        let mean = row.sum() / n;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let s = 1.0 / (var + 1e-5).sqrt();
        row.apply(|v| *v = (*v - mean) * s);
    }
    out
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

fn causal_attention(q: &DMatrix<f64>, k: &DMatrix<f64>, v: &DMatrix<f64>, heads: usize) -> DMatrix<f64> {
    let (n, d) = q.shape();
    let dh = d / heads;
    let mut out = DMatrix::zeros(n, d);
    for h in 0..heads {
        let qh = q.columns(h * dh, dh);
        let kh = k.columns(h * dh, dh);
        let vh = v.columns(h * dh, dh);
        let mut s = qh * kh.transpose() / (dh as f64).sqrt();
        for i in 0..n {
            let max = (0..=i).map(|j| s[(i, j)]).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..n {
                let e = if j <= i { (s[(i, j)] - max).exp() } else { 0.0 };
                s[(i, j)] = e;
                z += e;
            }
            for j in 0..n {
                s[(i, j)] /= z;
            }
        }
        out.columns_mut(h * dh, dh).copy_from(&(s * vh));
    }
    out
}

/// Plain dense forward pass with every injected weight materialized as
/// `W + Σ BA`. Returns `(logits, hidden)`.
fn dense_forward(model: &BaseModel, adapters: &[&LoraAdapter], tokens: &[usize]) -> (DMatrix<f64>, DMatrix<f64>) {
    let c = model.config();
    let w = |layer: usize, proj: Projection| {
        let p = InjectionPoint::new(layer, proj);
        let mut w = to_na(model.weight(p).unwrap());
        for a in adapters {
            if let Some(pair) = a.pair(p) {
                w += to_na(&pair.b) * to_na(&pair.a);
            }
        }
        w
    };
    let emb = to_na(model.token_embedding());
    let pos = to_na(model.position_embedding());
    let mut x = DMatrix::from_fn(tokens.len(), c.d_model, |t, j| emb[(tokens[t], j)] + pos[(t, j)]);
    for l in 0..c.n_layers {
        let h = layer_norm(&x);
        let q = &h * w(l, Projection::Q).transpose();
        let k = &h * w(l, Projection::K).transpose();
        let v = &h * w(l, Projection::V).transpose();
        let att = causal_attention(&q, &k, &v, c.n_heads);
        x += att * w(l, Projection::O).transpose();
        let h = layer_norm(&x);
        let up = (&h * w(l, Projection::FfUp).transpose()).map(gelu);
        x += up * w(l, Projection::FfDown).transpose();
    }
    let logits = layer_norm(&x) * emb.transpose() / (c.d_model as f64).sqrt();
    (logits, x)
}

fn rel_err(a: &Matrix, b: &DMatrix<f64>) -> f64 {
    let mut worst = 0.0f64;
    for r in 0..a.rows() {
        for c in 0..a.cols() {
            let n = b[(r, c)];
            worst = worst.max((a.get(r, c) - n).abs() / n.abs().max(1.0));
        }
    }
    worst
}

fn random_adapter(rng: &mut ChaCha8Rng, rank: usize, d: usize, points: &[InjectionPoint], role: AdapterRole) -> LoraAdapter {
    let mut a = init_adapter(rank, d, points, rng.random(), role).unwrap();
    let normal = Normal::new(0.0, 0.3).unwrap();
    for m in a.matrices_mut() {
        for v in m.data_mut() {
            *v = normal.sample(rng);
        }
    }
    a
}

#[test]
fn criterion_3_forward_oracle() {
    let _g = serial();
    let t = Instant::now();
    let mut out = Outcome::new();
    let mut worst = 0.0f64;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for case in 0..50 {
        let heads = rng.random_range(1..=4);
        let config = ModelConfig {
            vocab_size: rng.random_range(10..40),
            d_model: heads * rng.random_range(2..=6),
            n_layers: rng.random_range(1..=3),
            n_heads: heads,
            max_len: 16,
            seed: rng.random(),
        };
        let model = BaseModel::new(config.clone()).unwrap();
        let mut projs: Vec<Projection> = Projection::ALL.into_iter().filter(|_| rng.random_bool(0.5)).collect();
        if projs.is_empty() {
            projs.push(*Projection::ALL.choose(&mut rng).unwrap());
        }
        let points = model.injection_points(&projs);
        let rank = rng.random_range(1..=config.d_model.min(4));
        let n_adapters = rng.random_range(1..=2);
        let adapters: Vec<LoraAdapter> = (0..n_adapters)
            .map(|k| random_adapter(&mut rng, rank, config.d_model, &points, AdapterRole::Variant(k)))
            .collect();
        let refs: Vec<&LoraAdapter> = adapters.iter().collect();
        let len = rng.random_range(1..=12);
        let tokens: Vec<usize> = (0..len).map(|_| rng.random_range(0..config.vocab_size)).collect();

        let trace = model.forward(&refs, &tokens).unwrap();
        let (logits, hidden) = dense_forward(&model, &refs, &tokens);
        let e = rel_err(&trace.logits, &logits).max(rel_err(&trace.hidden, &hidden));
        worst = worst.max(e);
        out.check(e <= 1e-6, format!("case {case}: {e:.2e}"));
    }
    out.finish(3, "forward oracle", t.elapsed(), Duration::from_secs(30), &format!("50 configs, worst {worst:.2e}"));
}

// ---------------------------------------------------------------- 4

#[test]
fn criterion_4_positioning() {
    let _g = serial();
    let t = Instant::now();
    let mut out = Outcome::new();

    let chol = |rows: &[[f64; 2]]| Cholesky::factor(&Matrix::from_rows(rows)).unwrap();
    let id = chol(&[[1.0, 0.0], [0.0, 1.0]]);
    let s = mahalanobis_score(&[3.0, 4.0], &[0.0, 0.0], &id).unwrap();
    out.check((s + 25.0).abs() <= 1e-9, format!("identity example gave {s}"));
    let s = mahalanobis_score(&[2.0, 0.0], &[0.0, 0.0], &chol(&[[4.0, 0.0], [0.0, 1.0]])).unwrap();
    out.check((s + 1.0).abs() <= 1e-9, format!("diagonal example gave {s}"));
    let s = mahalanobis_score(&[0.7, -1.3], &[0.7, -1.3], &id).unwrap();
    out.check(s.abs() <= 1e-9, format!("x = mu gave {s}"));

    // affine equivariance: x -> Mx + b on every representation
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut worst_eq = 0.0f64;
    let mut mismatches = 0;
    let mut worst_asym = 0.0f64;
    let mut min_eig = f64::INFINITY;
    for _ in 0..20 {
        let d = rng.random_range(2..=6);
        let k = rng.random_range(2..=4);
        let reps: Vec<Vec<Vec<f64>>> = (0..k)
            .map(|_| {
                let shift: Vec<f64> = (0..d).map(|_| 3.0 * normal.sample(&mut rng)).collect();
                (0..3 * d)
                    .map(|_| shift.iter().map(|s| s + normal.sample(&mut rng)).collect())
                    .collect()
            })
            .collect();
        let m = DMatrix::from_fn(d, d, |i, j| if i == j { 2.0 } else { 0.0 } + 0.5 * normal.sample(&mut rng));
        let b: Vec<f64> = (0..d).map(|_| normal.sample(&mut rng)).collect();
        let map = |x: &[f64]| -> Vec<f64> {
            (0..d).map(|i| (0..d).map(|j| m[(i, j)] * x[j]).sum::<f64>() + b[i]).collect()
        };
        let moved: Vec<Vec<Vec<f64>>> = reps.iter().map(|dom| dom.iter().map(|x| map(x)).collect()).collect();
        let set = DomainPrototypeSet::compute(&reps, 0.0, false).unwrap();
        let set_m = DomainPrototypeSet::compute(&moved, 0.0, false).unwrap();
        for _ in 0..10 {
            let x: Vec<f64> = (0..d).map(|_| 3.0 * normal.sample(&mut rng)).collect();
            let (s1, s2) = (set.scores(&x).unwrap(), set_m.scores(&map(&x)).unwrap());
            for (a, c) in s1.iter().zip(&s2) {
                worst_eq = worst_eq.max((a - c).abs() / a.abs().max(1.0));
            }
            if set.nearest(&x).unwrap() != set_m.nearest(&map(&x)).unwrap() {
                mismatches += 1;
            }
        }
        for s in [&set, &set_m] {
            let cov = to_na(s.covariance());
            worst_asym = worst_asym.max((&cov - cov.transpose()).abs().max());
            let eig = SymmetricEigen::new(cov.clone()).eigenvalues;
            min_eig = min_eig.min(eig.min() / eig.abs().max().max(1.0));
        }
    }
    out.check(worst_eq <= 1e-6, format!("affine score error {worst_eq:.2e}"));
    out.check(mismatches == 0, format!("{mismatches} routing changes under affine maps"));
    out.check(worst_asym == 0.0, format!("covariance asymmetry {worst_asym:.2e}"));
    out.check(min_eig >= -1e-12, format!("covariance eigenvalue {min_eig:.2e}"));

    // routing on the synthetic 4-domain benchmark
    let corpus = synth_generate(&SynthSpec::default()).unwrap();
    let prepared = Prepared::new(&corpus, Task::Absc, RunOptions::default().vocab_cap).unwrap();
    let base = Base::build(&prepared, 1, &Default::default()).unwrap();
    let set = build_prototypes(&base.model, &prepared.tokenizer, &prepared.sentences, 1e-3, false).unwrap();
    let (mut hit, mut total) = (0usize, 0usize);
    for (k, d) in corpus.domains.iter().enumerate() {
        for s in &d.test {
            let r = sentence_repr(&base.model, &prepared.tokenizer, &s.text).unwrap();
            hit += usize::from(set.nearest(&r).unwrap() == k);
            total += 1;
        }
    }
    let routing = hit as f64 / total as f64;
    out.check(routing >= 0.90, format!("routing accuracy {routing:.4}"));
    out.finish(
        4,
        "positioning",
        t.elapsed(),
        Duration::from_secs(300),
        &format!("affine {worst_eq:.1e}, routing {routing:.4} on {total}"),
    );
}

// ---------------------------------------------------------------- 5

fn order_run(prepared: &Prepared, opts: &RunOptions, base: &Base, dir: &std::path::Path) -> OrderResult {
    run_order(prepared, opts, base, 1, opts.order_seeds[0], dir).unwrap()
}

#[test]
fn criterion_5_mechanism() {
    let _g = serial();
    let t = Instant::now();
    let mut out = Outcome::new();
    let tmp = tempfile::tempdir().unwrap();
    let corpus = synth_generate(&SynthSpec::default()).unwrap();

    let mut absc = desk_options(Task::Absc);
    absc.order_seeds = vec![11];
    let absc_data = Prepared::new(&corpus, Task::Absc, absc.vocab_cap).unwrap();
    let base = Base::build(&absc_data, absc.model_seed, &absc.pretrain).unwrap();

    // (a) forgetting of the sequence baseline
    let seq_opts = RunOptions {
        sequence_baseline: true,
        ..absc.clone()
    };
    let seq = order_run(&absc_data, &seq_opts, &base, &tmp.path().join("seq"));
    let m = seq.primary_matrix();
    let (just, last) = (m.get(0, 0).unwrap(), m.get(m.len() - 1, 0).unwrap());
    out.check(just - last >= 0.10, format!("sequence domain 1 went {just:.3} -> {last:.3}"));

    // (b) full pipeline against the baseline on ABSC
    let full = order_run(&absc_data, &absc, &base, &tmp.path().join("full"));
    let (ap_full, ap_seq) = (
        full.primary_matrix().average_performance().unwrap(),
        m.average_performance().unwrap(),
    );
    out.check(ap_full - ap_seq >= 0.05, format!("ABSC full {ap_full:.3} vs sequence {ap_seq:.3}"));

    // (c) ablation directions on JOINT
    let mut joint = desk_options(Task::Joint);
    joint.order_seeds = vec![11];
    let joint_data = Prepared::new(&corpus, Task::Joint, joint.vocab_cap).unwrap();
    let jf = order_run(&joint_data, &joint, &base, &tmp.path().join("joint"));
    let f1_full = jf.final_report.primary();
    let f1_nowarm = jf.no_warmup.as_ref().unwrap().primary();
    let mut no_orth = joint.clone();
    no_orth.train.lambda_decouple = 0.0;
    no_orth.train.lambda_warmup = 0.0;
    let f1_noorth = order_run(&joint_data, &no_orth, &base, &tmp.path().join("joint0")).final_report.primary();
    out.check(f1_nowarm <= f1_full + 0.01, format!("JOINT without warmup {f1_nowarm:.3} vs full {f1_full:.3}"));
    out.check(f1_noorth <= f1_full + 0.01, format!("JOINT with lambda 0 {f1_noorth:.3} vs full {f1_full:.3}"));

    out.finish(
        5,
        "mechanism",
        t.elapsed(),
        Duration::from_secs(900),
        &format!(
            "seq d1 {just:.3}->{last:.3}; ABSC full {ap_full:.3} seq {ap_seq:.3}; JOINT full {f1_full:.3} \
             no-warmup {f1_nowarm:.3} lambda0 {f1_noorth:.3}"
        ),
    );
}

// ---------------------------------------------------------------- 6

/// A small ABSC problem: a toy model, a tokenizer and training data per domain.
struct Small {
    model: BaseModel,
    prepared: Prepared,
}

fn small(per_domain: usize) -> Small {
    let spec = SynthSpec {
        train_per_domain: per_domain,
        test_per_domain: 4,
        general_sentences: 0,
        ..SynthSpec::default()
    };
    let corpus = synth_generate(&spec).unwrap();
    let prepared = Prepared::new(&corpus, Task::Absc, 2000).unwrap();
    let model = BaseModel::new(ModelConfig {
        d_model: 16,
        n_heads: 2,
        ..ModelConfig::toy(prepared.tokenizer.len(), 5)
    })
    .unwrap();
    Small { model, prepared }
}

fn small_config() -> TrainConfig {
    TrainConfig {
        epochs: 2,
        warmup_epochs: 1,
        rank: 2,
        batch_size: 4,
        replay_capacity: 4,
        lambda_decouple: 0.1,
        ..TrainConfig::default()
    }
}

fn train_through(s: &Small, state: &mut DomainSequenceState, upto: usize, config: &TrainConfig) {
    while state.completed() < upto {
        let k = state.completed();
        state.begin_domain(&s.prepared.train[k], config).unwrap();
        train_domain(&s.model, &s.prepared.tokenizer, state, &s.prepared.train[k], config).unwrap();
    }
}

fn random_term(rng: &mut ChaCha8Rng) -> String {
    const WORDS: [&str; 12] =
        ["battery", "life", "pasta", "service", "room", "view", "lens", "screen", "wait", "staff", "menu", "zoom"];
    let n = rng.random_range(1..=3);
    (0..n).map(|_| *WORDS.choose(rng).unwrap()).collect::<Vec<_>>().join(" ")
}

#[test]
fn criterion_6_round_trips() {
    let _g = serial();
    let t = Instant::now();
    let mut out = Outcome::new();
    let mut rng = ChaCha8Rng::seed_from_u64(6);

    let mut bad = 0;
    for _ in 0..1000 {
        let n = rng.random_range(0..=4);
        let aspects: Vec<Aspect> = (0..n)
            .map(|_| Aspect::new(random_term(&mut rng), *Polarity::ALL.choose(&mut rng).unwrap()))
            .collect();
        let parsed = parse_output(&format_target(&aspects));
        let back: Vec<(String, Polarity)> = aspects.iter().map(|a| (a.term.clone(), a.polarity)).collect();
        if !parsed.parseable || parsed.pairs != back {
            bad += 1;
        }
    }
    out.check(bad == 0, format!("{bad} of 1000 aspect lists did not round-trip"));

    let tmp = tempfile::tempdir().unwrap();
    let s = small(12);
    let config = small_config();
    let order = s.prepared.domains.clone();
    let mut state = DomainSequenceState::new(&s.model, order.clone(), &config).unwrap();
    train_through(&s, &mut state, 1, &config);

    let p = tmp.path().join("variant.json");
    save_adapter(&state.variants[0], &p).unwrap();
    out.check(load_adapter(&p).unwrap().bit_identical(&state.variants[0]), "adapter file is not bit-exact");

    let dir = tmp.path().join("state");
    save_run(&state, &config, &dir).unwrap();
    let (restored, cfg_back) = load_run(&dir).unwrap();
    out.check(restored == state, "run state changed across save/load");
    out.check(cfg_back == config, "train config changed across save/load");
    let bits = |st: &DomainSequenceState| -> Vec<u64> {
        let mut v = Vec::new();
        for a in std::iter::once(&st.invariant).chain(&st.variants) {
            v.extend(a.matrices().iter().flat_map(|m| m.data().iter().map(|x| x.to_bits())));
        }
        v
    };
    out.check(bits(&restored) == bits(&state), "adapter bits changed across save/load");

    // resume: stop after domain 1, reload, finish; compare with one pass
    let mut resumed = restored;
    train_through(&s, &mut resumed, 3, &config);
    let mut straight = DomainSequenceState::new(&s.model, order, &config).unwrap();
    train_through(&s, &mut straight, 3, &config);
    let mut worst = 0.0f64;
    for ((_, _, a), (_, _, b)) in resumed.history.iter().zip(&straight.history) {
        worst = worst.max((a.total - b.total).abs()).max((a.l_s - b.l_s).abs()).max((a.l_d - b.l_d).abs());
    }
    out.check(resumed.history.len() == straight.history.len(), "histories differ in length");
    out.check(worst <= 1e-7, format!("resumed losses differ by {worst:.2e}"));
    out.finish(6, "round trips", t.elapsed(), Duration::from_secs(60), &format!("resume loss diff {worst:.1e}"));
}

// ---------------------------------------------------------------- 7

fn brute_absc(pred: &[Option<Polarity>], gold: &[Polarity]) -> (f64, f64) {
    // confusion[g][p], p = 3 for unparseable
    let mut confusion = [[0usize; 4]; 3];
    let idx = |p: Polarity| Polarity::ALL.iter().position(|&q| q == p).unwrap();
    for (p, g) in pred.iter().zip(gold) {
        confusion[idx(*g)][p.map_or(3, idx)] += 1;
    }
    let correct: usize = (0..3).map(|c| confusion[c][c]).sum();
    let mut classes: Vec<Polarity> = Polarity::ALL
        .into_iter()
        .filter(|&c| {
            let i = idx(c);
            confusion[i].iter().sum::<usize>() > 0 || (0..3).any(|g| confusion[g][i] > 0)
        })
        .collect();
    classes.sort();
    let mut sum = 0.0;
    for c in &classes {
        let i = idx(*c);
        let tp = confusion[i][i];
        let fp: usize = (0..3).filter(|&g| g != i).map(|g| confusion[g][i]).sum();
        let fn_: usize = (0..4).filter(|&p| p != i).map(|p| confusion[i][p]).sum();
        let denom = 2 * tp + fp + fn_;
        sum += if denom == 0 { 0.0 } else { 2.0 * tp as f64 / denom as f64 };
    }
    (correct as f64 / gold.len() as f64, sum / classes.len() as f64)
}

fn brute_prf<T: PartialEq + Clone>(pred: &[Vec<T>], gold: &[Vec<T>]) -> (f64, f64, f64) {
    let dedup = |v: &[T]| -> Vec<T> {
        let mut out: Vec<T> = Vec::new();
        for x in v {
            if !out.contains(x) {
                out.push(x.clone());
            }
        }
        out
    };
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (p, g) in pred.iter().zip(gold) {
        let (p, g) = (dedup(p), dedup(g));
        for x in &p {
            if g.contains(x) {
                tp += 1;
            } else {
                fp += 1;
            }
        }
        fn_ += g.iter().filter(|x| !p.contains(x)).count();
    }
    let precision = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
    let recall = if tp + fn_ == 0 { 0.0 } else { tp as f64 / (tp + fn_) as f64 };
    let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
    (precision, recall, f1)
}

#[test]
fn criterion_7_metric_oracles() {
    let _g = serial();
    let t = Instant::now();
    let mut out = Outcome::new();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let terms = ["Pizza", "pizza ", "wine", "staff", "screen", "battery life"];
    let mut mismatches = 0;
    for _ in 0..200 {
        let n = rng.random_range(1..=8);
        let gold: Vec<Polarity> = (0..n).map(|_| *Polarity::ALL.choose(&mut rng).unwrap()).collect();
        let pred: Vec<Option<Polarity>> = (0..n)
            .map(|_| if rng.random_bool(0.15) { None } else { Some(*Polarity::ALL.choose(&mut rng).unwrap()) })
            .collect();
        let (acc, f1) = absc_metrics(&pred, &gold).unwrap();
        let (bacc, bf1) = brute_absc(&pred, &gold);
        if acc != bacc || f1 != bf1 {
            mismatches += 1;
        }

        let list = |rng: &mut ChaCha8Rng| -> Vec<(String, Polarity)> {
            (0..rng.random_range(0..=3))
                .map(|_| (terms.choose(rng).unwrap().to_string(), *Polarity::ALL.choose(rng).unwrap()))
                .collect()
        };
        let p: Vec<Vec<(String, Polarity)>> = (0..n).map(|_| list(&mut rng)).collect();
        let g: Vec<Vec<(String, Polarity)>> = (0..n).map(|_| list(&mut rng)).collect();
        let norm = |v: &[Vec<(String, Polarity)>]| -> Vec<Vec<(String, Polarity)>> {
            v.iter().map(|s| s.iter().map(|(t, q)| (t.trim().to_lowercase(), *q)).collect()).collect()
        };
        let terms_of = |v: &[Vec<(String, Polarity)>]| -> Vec<Vec<String>> {
            v.iter().map(|s| s.iter().map(|(t, _)| t.trim().to_lowercase()).collect()).collect()
        };
        let raw_terms = |v: &[Vec<(String, Polarity)>]| -> Vec<Vec<String>> {
            v.iter().map(|s| s.iter().map(|(t, _)| t.clone()).collect()).collect()
        };
        let j = joint_f1(&p, &g).unwrap();
        let (bp, br, bf) = brute_prf(&norm(&p), &norm(&g));
        if (j.precision, j.recall, j.f1) != (bp, br, bf) {
            mismatches += 1;
        }
        let s = span_f1(&raw_terms(&p), &raw_terms(&g)).unwrap();
        let (bp, br, bf) = brute_prf(&terms_of(&p), &terms_of(&g));
        if (s.precision, s.recall, s.f1) != (bp, br, bf) {
            mismatches += 1;
        }
    }
    out.check(mismatches == 0, format!("{mismatches} disagreements"));
    out.finish(7, "metric oracles", t.elapsed(), Duration::from_secs(10), "200 cases x 3 metrics");
}

// ---------------------------------------------------------------- 8

#[test]
fn criterion_8_isolation() {
    let _g = serial();
    let t = Instant::now();
    let mut out = Outcome::new();
    let s = small(12);
    let config = small_config();
    let mut state = DomainSequenceState::new(&s.model, s.prepared.domains.clone(), &config).unwrap();
    for k in 0..s.prepared.domains.len() {
        let before: Vec<LoraAdapter> = state.variants.clone();
        train_through(&s, &mut state, k + 1, &config);
        for (i, v) in before.iter().enumerate() {
            out.check(v.bit_identical(&state.variants[i]), format!("training domain {k} moved variant {i}"));
        }
    }

    let before = state.variants.clone();
    warmup(&s.model, &s.prepared.tokenizer, &mut state, &config).unwrap();
    for (i, v) in before.iter().enumerate() {
        out.check(v.bit_identical(&state.variants[i]), format!("warmup moved variant {i}"));
    }

    // with lambda 0, L_S never reaches the variant and L_D never the invariant
    let examples = encode_all(&s.prepared.tokenizer, &s.prepared.train[0]).unwrap();
    let replay: Vec<_> = examples[..4].iter().collect();
    let domain: Vec<_> = examples[4..8].iter().collect();
    let (inv, var) = (&state.invariant, &state.variants[0]);
    let n = inv.num_matrices();
    let g = decoupled_gradients(&s.model, inv, var, &replay, &domain, 0.0).unwrap();
    let (g_inv, g_var) = g.combined(0.0, n).unwrap();
    let zero = |id: usize, grads: &abscl_core::numerics::Gradients| {
        grads.get(ParamId(id)).is_none_or(|m| m.data().iter().all(|&x| x == 0.0))
    };
    let mut leaks = 0;
    for k in 0..n {
        leaks += usize::from(!zero(n + k, &g.ls)) + usize::from(!zero(k, &g.ld));
        let ls = g.ls.get(ParamId(k)).unwrap();
        let ld = g.ld.get(ParamId(n + k)).unwrap();
        leaks += usize::from(g_inv[k].data() != ls.data()) + usize::from(g_var[k].data() != ld.data());
    }
    out.check(leaks == 0, format!("{leaks} cross-adapter gradient leaks"));
    out.finish(8, "isolation", t.elapsed(), Duration::from_secs(120), &format!("{} domains", state.order.len()));
}
