//! One test per acceptance criterion. Each prints a single PASS/FAIL line.

mod common;

use std::collections::HashSet;
use std::time::Instant;

use cmlformer::analysis::{attention_profile, AttentionProfile};
use cmlformer::corpus::{align_word_labels, compute_cmi, derive_switching_points, CmiConfig, CorpusRecord};
use cmlformer::model::{encoder_parameter_count, Checkpoint, CheckpointKind, CmlFormer, CouplingMode, ModelConfig, TokenBatch};
use cmlformer::objectives::{
    apply_mlm_masking, btsp_sample, prepare_corpus, tlc_build_input, total_loss, BtspSource, LossBreakdown, LossComputer,
    LossWeights, MaskAction, Objective,
};
use cmlformer::tensor::{Tape, IGNORE_INDEX};
use cmlformer::tokenizer::{encode, train_vocab, Encoding};
use cmlformer::trainer::{
    ablate_coupling, evaluate, finetune, learning_rate, pretrain, LabeledExample, LossLog, MetricReport, OptimizerKind,
    PretrainOutputs, TrainConfig,
};
use rand::Rng;

/// Prints the verdict line, then fails the test on any failed check.
fn verdict(id: &str, title: &str, checks: &[(bool, String)]) {
    let ok = checks.iter().all(|(pass, _)| *pass);
    let detail: Vec<&str> = checks.iter().map(|(_, d)| d.as_str()).collect();
    println!("{id} {title}: {} ({})", if ok { "PASS" } else { "FAIL" }, detail.join("; "));
    for (pass, d) in checks {
        assert!(*pass, "{id} {title}: {d}");
    }
}

fn check(pass: bool, detail: impl Into<String>) -> (bool, String) {
    (pass, detail.into())
}

#[test]
fn ac01_gradient_suite() {
    let start = Instant::now();
    let ops = common::op_gradient_suite();
    let worst_op = ops.iter().map(|(_, e)| *e).fold(0.0, f64::max);
    let failing: Vec<&str> = ops.iter().filter(|(_, e)| *e > 1e-4).map(|(n, _)| *n).collect();
    let (checked, worst_model) = common::end_to_end_gradient_check(CouplingMode::Synchronous, 5);
    let secs = start.elapsed().as_secs_f64();
    verdict(
        "ac01",
        "gradient checks",
        &[
            check(failing.is_empty(), format!("{} ops, worst rel err {worst_op:.1e}, failing {failing:?}", ops.len())),
            check(checked >= 20 && worst_model <= 1e-3, format!("{checked} model params, worst rel err {worst_model:.1e}")),
            check(secs < 60.0, format!("{secs:.1}s")),
        ],
    );
}

#[test]
fn ac02_coupling_invariants() {
    let max_diff = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let none = common::coupling_probe(CouplingMode::None);
    let (base_a, ..) = none.run(&none.mix);
    let (base_b, ..) = none.run(&none.altered_mix());
    let mut checks = vec![check(base_a == base_b, "none: base logits bit-identical under altered mix input")];
    for mode in [CouplingMode::Synchronous, CouplingMode::Asynchronous] {
        let p = common::coupling_probe(mode);
        let (a, ..) = p.run(&p.mix);
        let (b, ..) = p.run(&p.altered_mix());
        let d = max_diff(&a, &b);
        checks.push(check(d > 0.0, format!("{mode}: max base logit change {d:.2e}")));
    }
    let gap = none.reference_gap();
    checks.push(check(gap <= 1e-10, format!("none vs plain reference: {gap:.1e}")));
    verdict("ac02", "coupling invariants", &checks);
}

/// Independent evaluation of the code-mixing index by counting.
fn brute_cmi(labels: &[u8], w_n: f64, w_p: f64) -> f64 {
    let n = labels.len();
    let mut base_words = 0;
    let mut switches = 0;
    for i in 0..n {
        if labels[i] == 0 {
            base_words += 1;
        }
        if i > 0 && labels[i] != labels[i - 1] {
            switches += 1;
        }
    }
    (w_n * (n - base_words) as f64 + w_p * switches as f64) / n as f64
}

#[test]
fn ac03_annotation_oracles() {
    let a = derive_switching_points(&[1, 0, 1, 0]).unwrap();
    let b = derive_switching_points(&[0, 0, 1, 1, 0, 0, 0, 0]).unwrap();
    let mut rng = common::rng(3);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let n = rng.gen_range(1..40);
        let labels: Vec<u8> = (0..n).map(|_| rng.gen_range(0..2)).collect();
        let (w_n, w_p) = (rng.gen_range(0.0..2.0), rng.gen_range(0.01..2.0));
        let t = derive_switching_points(&labels).unwrap();
        let got = compute_cmi(&labels, &t, &CmiConfig::new(w_n, w_p).unwrap()).unwrap();
        worst = worst.max((got - brute_cmi(&labels, w_n, w_p)).abs());
    }
    verdict(
        "ac03",
        "annotation oracles",
        &[
            check(a == [0, 1, 1, 1], format!("Phone[en] ko[hi] charge[en] karo[hi] -> {a:?}")),
            check(b == [0, 0, 1, 0, 1, 0, 0, 0], format!("Twitter example -> {b:?}")),
            check(worst <= 1e-12, format!("CMI vs brute force on 100 vectors: max diff {worst:.1e}")),
        ],
    );
}

#[test]
fn ac04_alignment() {
    let mut rng = common::rng(4);
    let mut violations = 0;
    for _ in 0..1000 {
        let words = rng.gen_range(0..15);
        let mut word_ids = Vec::new();
        if rng.gen_bool(0.7) {
            word_ids.push(None);
        }
        for w in 0..words {
            word_ids.extend(std::iter::repeat(Some(w)).take(rng.gen_range(1..5)));
        }
        if rng.gen_bool(0.7) {
            word_ids.push(None);
        }
        let n = word_ids.len();
        let enc = Encoding { ids: vec![9; n], word_ids, attention_mask: vec![true; n], source_words: (0..words).collect() };
        let labels: Vec<i64> = (0..words).map(|_| rng.gen_range(0..2)).collect();
        let out = align_word_labels(&labels, &enc, IGNORE_INDEX).unwrap();
        let mut kept: Vec<i64> = out.iter().copied().filter(|&v| v != IGNORE_INDEX).collect();
        let mut expect = labels.clone();
        kept.sort();
        expect.sort();
        let first_subword_rule = (0..n).all(|i| {
            let first = enc.word_ids[i].is_some() && (i == 0 || enc.word_ids[i - 1] != enc.word_ids[i]);
            if first {
                out[i] == labels[enc.word_ids[i].unwrap()]
            } else {
                out[i] == IGNORE_INDEX
            }
        });
        if out.len() != n || kept.len() != words || kept != expect || !first_subword_rule {
            violations += 1;
        }
    }
    verdict("ac04", "subword label alignment", &[check(violations == 0, format!("1000 random tokenizations, {violations} violations"))]);
}

#[test]
fn ac05_stochastic_objective_statistics() {
    let mut rng = common::rng(5);
    let n = 100_000;
    let ids: Vec<usize> = (0..n).map(|_| rng.gen_range(5..500)).collect();
    let masked = apply_mlm_masking(&ids, &vec![false; n], 500, &mut rng);
    let selected: Vec<MaskAction> = masked.actions.iter().flatten().copied().collect();
    let rate = selected.len() as f64 / n as f64;
    let share = |a: MaskAction| selected.iter().filter(|&&x| x == a).count() as f64 / selected.len() as f64;
    let (m, r, k) = (share(MaskAction::Mask), share(MaskAction::Random), share(MaskAction::Keep));

    let mut quad = [0usize; 4];
    let mut label_ok = true;
    for _ in 0..10_000 {
        let s = btsp_sample(2, 8, &mut rng);
        let (q, positive) = match s.source {
            BtspSource::OwnBase => (0, true),
            BtspSource::OwnMix => (1, true),
            BtspSource::OtherBase(j) => (2, j == 2),
            BtspSource::OtherMix(j) => (3, j == 2),
        };
        quad[q] += 1;
        label_ok &= (s.label == 1) == positive && !(q >= 2 && positive);
    }
    let quad_share: Vec<f64> = quad.iter().map(|&c| c as f64 / 10_000.0).collect();

    let records = common::sample_corpus();
    let vocab = common::sample_vocab(&records, 200);
    let orders: HashSet<_> = (0..1000).map(|_| tlc_build_input(&records[1], &vocab, 128, &mut rng).order).collect();

    verdict(
        "ac05",
        "stochastic objective statistics",
        &[
            check((rate - 0.15).abs() <= 0.01, format!("selection {rate:.4}")),
            check(
                (m - 0.8).abs() <= 0.02 && (r - 0.1).abs() <= 0.02 && (k - 0.1).abs() <= 0.02,
                format!("mask/random/keep {m:.4}/{r:.4}/{k:.4}"),
            ),
            check(quad_share.iter().all(|s| (s - 0.25).abs() <= 0.02) && label_ok, format!("BTSP quadrants {quad_share:.4?}")),
            check(orders.len() == 6, format!("{} distinct TLC orders", orders.len())),
        ],
    );
}

#[test]
fn ac06_loss_algebra() {
    let unit = LossBreakdown { mlm: 1.0, spp: 1.0, btsp: 1.0, biltm: 1.0, tlc: 1.0, cmi: 1.0, total: 0.0 };
    let total = total_loss(&unit, &LossWeights::default());

    let records: Vec<CorpusRecord> = common::sample_corpus().into_iter().take(4).collect();
    let vocab = common::sample_vocab(&records, 150);
    let model = CmlFormer::new(ModelConfig::tiny(vocab.len())).unwrap();
    let params = model.init_params(6);
    let prepared = prepare_corpus(&records, &vocab, 128, &CmiConfig::default()).unwrap();
    let computer = LossComputer {
        model: &model,
        vocab: &vocab,
        records: &records,
        prepared: &prepared,
        weights: LossWeights::only(&[Objective::Mlm, Objective::Biltm]),
        static_masks: None,
    };
    let mut tape = Tape::new();
    let loss = computer.batch_loss(&mut tape, &params, &[0, 1, 2, 3], &mut common::rng(6)).unwrap();
    let grads = tape.backward(loss.total).unwrap();
    let mut worst: f64 = 0.0;
    for (id, name, _) in params.iter() {
        if ["heads.spp", "heads.btsp", "heads.tlc", "heads.cmi"].iter().any(|h| name.starts_with(h)) {
            worst = worst.max(grads.param(id).map_or(0.0, |g| g.norm_sq().sqrt()));
        }
    }
    let live = grads.param(params.id("heads.mlm.weight").unwrap()).map_or(0.0, |g| g.norm_sq().sqrt());
    let skipped = ["head.spp", "head.btsp", "head.tlc", "head.cmi"].iter().all(|h| tape.counters().get(h) == 0);
    verdict(
        "ac06",
        "loss algebra",
        &[
            check(total == 24.0, format!("unit components with default weights -> {total}")),
            check(worst < 1e-12 && live > 0.0, format!("disabled head grad norm {worst:.1e}, MLM head {live:.1e}")),
            check(skipped, "no forward pass through disabled heads"),
        ],
    );
}

#[test]
fn ac07_memorization_run() {
    let start = Instant::now();
    let records = common::sample_corpus();
    let vocab = common::sample_vocab(&records, 200);
    let model = CmlFormer::new(ModelConfig::tiny(vocab.len())).unwrap();
    let cfg = TrainConfig {
        epochs: 200,
        batch_size: 1,
        initial_lr: 0.003,
        decay: 1.0,
        seed: 0,
        weights: LossWeights::default(),
        clip_norm: 1.0,
        optimizer: OptimizerKind::Adam,
        static_masks: true,
    };
    let result = pretrain(&model, &vocab, &records, &cfg, None, None).unwrap();
    let first = result.log.epochs[0].losses.total;
    let last = result.log.epochs.last().unwrap().losses.total;
    let prepared = prepare_corpus(&records, &vocab, 128, &CmiConfig::default()).unwrap();
    let computer = LossComputer {
        model: &model,
        vocab: &vocab,
        records: &records,
        prepared: &prepared,
        weights: cfg.weights,
        static_masks: None,
    };
    let masks = result.static_masks.as_deref().unwrap();
    let accuracy = computer.mlm_accuracy(&result.params, masks).unwrap();
    let secs = start.elapsed().as_secs_f64();
    verdict(
        "ac07",
        "memorization run",
        &[
            check(result.log.epochs.len() == 200, "200 epochs, all six objectives"),
            check(last < 0.2 * first, format!("total loss {first:.3} -> {last:.4} (ratio {:.4})", last / first)),
            check(accuracy > 0.9, format!("masked-token accuracy on training masks {accuracy:.3}")),
            check(secs < 300.0, format!("{secs:.1}s")),
        ],
    );
}

#[test]
fn ac08_finetune_pipeline() {
    let positive = ["bakwaas", "ganda", "bekaar", "faltu", "stupid", "idiot"];
    let negative = ["acha", "badhiya", "mast", "shandaar", "great", "awesome"];
    let mut rng = common::rng(8);
    let mut examples = Vec::new();
    for i in 0..16 {
        let (pool, label) = if i % 2 == 0 { (&positive, 1) } else { (&negative, 0) };
        let words: Vec<&str> = (0..4).map(|_| pool[rng.gen_range(0..pool.len())]).collect();
        examples.push(LabeledExample { text: words.join(" "), label });
    }
    let texts: Vec<&str> = examples.iter().map(|e| e.text.as_str()).collect();
    let vocab = train_vocab(texts, 60, 1).unwrap();
    let model = CmlFormer::new(ModelConfig::tiny(vocab.len())).unwrap();
    let pretrained = Checkpoint {
        kind: CheckpointKind::Pretrained,
        config: model.config.clone(),
        vocab: vocab.tokens().to_vec(),
        params: model.init_params(8),
    };
    let cfg = TrainConfig {
        batch_size: 4,
        initial_lr: 0.01,
        decay: 0.95,
        optimizer: OptimizerKind::Adam,
        ..TrainConfig::finetune_defaults()
    };
    let result = finetune(&pretrained, &examples, &cfg).unwrap();
    let train = evaluate(&result.classifier, &result.params, &vocab, &examples).unwrap();

    let labels = [1, 1, 1, 1, 1, 0, 0, 0, 0, 0];
    let predictions = [1, 1, 1, 0, 0, 1, 0, 0, 0, 0];
    let fixture = MetricReport::from_predictions(&labels, &predictions);
    verdict(
        "ac08",
        "fine-tune pipeline",
        &[
            check(train.accuracy == 1.0, format!("train accuracy {} on a separable corpus", train.accuracy)),
            check(
                fixture.precision == 0.75 && fixture.recall == 0.6 && (fixture.f1 - 2.0 / 3.0).abs() < 1e-15,
                format!("fixture P={} R={} F1={:.4}", fixture.precision, fixture.recall, fixture.f1),
            ),
        ],
    );
}

#[test]
fn ac09_parameter_parity() {
    let cfg = ModelConfig::base();
    let (v, p, d, f, l) = (32_000usize, 512usize, 768usize, 3072usize, 12usize);
    let per_layer = 4 * (d * d + d) + (d * f + f) + (f * d + d) + 2 * 2 * d;
    let closed = v * d + p * d + l * per_layer;
    let model = CmlFormer::new(cfg.clone()).unwrap();
    let counted = model.layout().numel_with_prefix("encoder.");
    verdict(
        "ac09",
        "parameter parity",
        &[check(
            counted == closed && closed == 110_023_680 && encoder_parameter_count(&cfg) == closed,
            format!("encoder parameters {counted}, closed form {closed}"),
        )],
    );
}

#[test]
fn ac10_schedule_and_logs() {
    let cfg = TrainConfig::pretrain_defaults();
    let mut expected = 1e-5;
    let mut worst: f64 = 0.0;
    for e in 0..50 {
        // the running product picks up at most one rounding per step
        let ulps = (cfg.learning_rate(e) - expected).abs() / expected / f64::EPSILON;
        worst = worst.max(ulps / (e + 1) as f64);
        assert_eq!(learning_rate(1e-5, 0.9, e), cfg.learning_rate(e));
        expected *= 0.9;
    }

    let records = common::sample_corpus();
    let vocab = common::sample_vocab(&records, 200);
    let model = CmlFormer::new(ModelConfig::tiny(vocab.len())).unwrap();
    let train = TrainConfig { epochs: 4, batch_size: 4, initial_lr: 1e-3, seed: 10, ..TrainConfig::pretrain_defaults() };
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let outputs =
            PretrainOutputs { checkpoint: dir.path().join(format!("{name}.ckpt")), loss_csv: dir.path().join(format!("{name}.csv")) };
        pretrain(&model, &vocab, &records, &train, None, Some(&outputs)).unwrap();
        std::fs::read(&outputs.loss_csv).unwrap()
    };
    let (a, b) = (run("a"), run("b"));
    let text = String::from_utf8(a.clone()).unwrap();
    let rows: Vec<&str> = text.lines().skip(1).collect();
    let shape_ok = rows.len() == 4 && text.lines().all(|l| l.split(',').count() == 8);
    verdict(
        "ac10",
        "schedules and logs",
        &[
            check(worst <= 1.0, format!("lr vs running product 1e-5*0.9^e over 50 epochs: {worst:.2} ulp per epoch")),
            check(shape_ok && LossLog::parse_csv(&text).is_ok(), format!("{} rows x 8 columns", rows.len())),
            check(a == b, "identical seeds give byte-identical CSVs"),
        ],
    );
}

#[test]
fn ac11_ablation_harness() {
    let records = common::sample_corpus();
    let vocab = common::sample_vocab(&records, 200);
    let cfg = TrainConfig { epochs: 2, batch_size: 4, initial_lr: 1e-3, ..TrainConfig::pretrain_defaults() };
    let dir = tempfile::tempdir().unwrap();
    let report = ablate_coupling(&ModelConfig::tiny(vocab.len()), &vocab, &records, &cfg, dir.path()).unwrap();
    let mut logs_ok = report.runs.len() == 3 && report.merged_csv.exists() && report.summary_json.exists();
    for run in &report.runs {
        let rows = LossLog::parse_csv(&std::fs::read_to_string(&run.loss_csv).unwrap()).unwrap();
        logs_ok &= rows.len() == 2 && rows.iter().all(|(_, l)| l.total.is_finite() && l.total > 0.0);
    }
    let count = |m: CouplingMode| report.runs.iter().find(|r| r.mode == m).unwrap().parameters.total;
    let (none, sync, asyn) = (count(CouplingMode::None), count(CouplingMode::Synchronous), count(CouplingMode::Asynchronous));
    verdict(
        "ac11",
        "ablation harness",
        &[
            check(logs_ok, "three modes trained, per-mode and merged logs well formed"),
            check(none < sync && sync == asyn, format!("parameters none {none} < sync {sync} == async {asyn}")),
        ],
    );
}

#[test]
fn ac12_attention_export() {
    let records = common::sample_corpus();
    let vocab = common::sample_vocab(&records, 200);
    let cfg = ModelConfig::tiny(vocab.len());
    let model = CmlFormer::new(cfg.clone()).unwrap();
    let mut params = model.init_params(12);
    for id in 0..params.len() {
        let noise = common::random_tensor(params.get(id).shape(), &mut common::rng(1200 + id as u64), 0.5);
        for (p, n) in params.get_mut(id).data_mut().iter_mut().zip(noise.data()) {
            *p += n;
        }
    }
    let text = &records[1].cm_text;
    let labels = &records[1].labels;
    let profile = attention_profile(&model.encoder, &params, &vocab, text, Some(labels), 0, 0).unwrap();

    let enc = encode(text, &vocab, true, usize::MAX);
    let batch = TokenBatch::from_sequences(&[enc.ids.clone()]);
    let reference = common::Reference { params: &params, cfg: &cfg };
    let t = enc.len();
    let probs = reference.first_layer_attention(&enc.ids, &batch.mask, 0);
    let raw: Vec<f64> = (0..t)
        .filter(|&j| enc.word_ids[j].is_some())
        .map(|j| (0..t).map(|i| probs[i * t + j]).sum::<f64>() / t as f64)
        .collect();
    let lo = raw.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let gap = raw
        .iter()
        .zip(&profile.scores)
        .map(|(r, s)| ((r - lo) / (hi - lo) - s).abs())
        .fold(0.0, f64::max);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("profile.json");
    profile.save(&path).unwrap();
    let back = AttentionProfile::load(&path).unwrap();
    verdict(
        "ac12",
        "attention export",
        &[
            check(raw.len() == profile.scores.len() && gap <= 1e-9, format!("{} tokens, max gap to brute force {gap:.1e}", raw.len())),
            check(profile.scores.iter().all(|s| (0.0..=1.0).contains(s)), "scaled scores within [0, 1]"),
            check(back == profile, "JSON round trip"),
        ],
    );
}
