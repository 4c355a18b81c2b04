//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use std::path::{Path, PathBuf};

use cmlformer::corpus::{load_jsonl, CorpusRecord};
use cmlformer::model::{ModelConfig, ParamStore};
use cmlformer::tensor::{Tape, Tensor, Var};
use cmlformer::tokenizer::{train_vocab, Vocabulary};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn data_path(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("data").join(name)
}

pub fn sample_corpus() -> Vec<CorpusRecord> {
    load_jsonl(&data_path("sample_corpus.jsonl")).expect("bundled corpus loads")
}

/// Vocabulary trained on every sentence of the sample corpus.
pub fn sample_vocab(records: &[CorpusRecord], size: usize) -> Vocabulary {
    let texts: Vec<&str> =
        records.iter().flat_map(|r| [r.cm_text.as_str(), r.base_text.as_str(), r.mix_text.as_str()]).collect();
    train_vocab(texts, size, 1).expect("vocab")
}

pub fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng, scale: f64) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0) * scale).collect()).unwrap()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// ---------------------------------------------------------------------------
// Finite differences

pub const FD_STEP: f64 = 1e-6;
/// Denominator floor for relative error, so that gradients that are zero
/// up to rounding compare in absolute terms.
pub const FD_FLOOR: f64 = 1e-6;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FD_FLOOR)
}

/// Checks `d loss / d inputs` of `build` against central differences on
/// every input element. `build` records the inputs as leaves, in order,
/// and returns the scalar loss. Returns the worst relative error.
pub fn check_op<F>(inputs: &[Tensor], build: F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    check_op_on(inputs, Tape::new, build)
}

/// [`check_op`] with a custom tape constructor (dropout needs a seeded one).
pub fn check_op_on<F>(inputs: &[Tensor], make_tape: fn() -> Tape, build: F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let eval = |values: &[Tensor]| -> f64 {
        let mut tape = make_tape();
        let leaves: Vec<Var> = values.iter().map(|t| tape.leaf(t.clone())).collect();
        let loss = build(&mut tape, &leaves);
        tape.value(loss).item()
    };
    let mut tape = make_tape();
    let leaves: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = build(&mut tape, &leaves);
    let grads = tape.backward(loss).unwrap();
    let mut worst: f64 = 0.0;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads.wrt(leaves[k]).cloned().unwrap_or_else(|| Tensor::zeros(input.shape()));
        for i in 0..input.numel() {
            let mut values = inputs.to_vec();
            values[k].data_mut()[i] = input.data()[i] + FD_STEP;
            let up = eval(&values);
            values[k].data_mut()[i] = input.data()[i] - FD_STEP;
            let down = eval(&values);
            let numeric = (up - down) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic.data()[i], numeric));
        }
    }
    worst
}

/// `sum(x ⊙ w)` for a fixed random `w`, so every output element gets a
/// distinct upstream gradient.
pub fn weighted_sum(tape: &mut Tape, x: Var, seed: u64) -> Var {
    let shape = tape.shape(x).to_vec();
    let w = random_tensor(&shape, &mut rng(seed), 1.0);
    let w = tape.input(w);
    let p = tape.mul(x, w).unwrap();
    tape.sum(p).unwrap()
}

// ---------------------------------------------------------------------------
// Plain-array reference transformer (no tape, no shared code)

type Mat = Vec<Vec<f64>>;

pub struct Reference<'a> {
    pub params: &'a ParamStore,
    pub cfg: &'a ModelConfig,
}

impl Reference<'_> {
    fn p(&self, name: &str) -> &[f64] {
        self.params.by_name(name).unwrap_or_else(|| panic!("missing {name}")).data()
    }

    fn linear(&self, name: &str, x: &Mat) -> Mat {
        let w = self.p(&format!("{name}.weight"));
        let b = self.p(&format!("{name}.bias"));
        let out = b.len();
        let inp = w.len() / out;
        x.iter()
            .map(|row| {
                (0..out)
                    .map(|j| {
                        let mut s = b[j];
                        for i in 0..inp {
                            s += row[i] * w[i * out + j];
                        }
                        s
                    })
                    .collect()
            })
            .collect()
    }

    fn norm(&self, name: &str, x: &Mat) -> Mat {
        let g = self.p(&format!("{name}.gain"));
        let b = self.p(&format!("{name}.bias"));
        x.iter()
            .map(|row| {
                let n = row.len() as f64;
                let mean = row.iter().sum::<f64>() / n;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                let inv = 1.0 / (var + 1e-5).sqrt();
                row.iter().enumerate().map(|(i, v)| (v - mean) * inv * g[i] + b[i]).collect()
            })
            .collect()
    }

    /// Multi-head attention where query `i` sees key `j` iff `allowed(i, j)`.
    fn attention(&self, name: &str, q_in: &Mat, kv_in: &Mat, allowed: &dyn Fn(usize, usize) -> bool) -> Mat {
        let q = self.linear(&format!("{name}.query"), q_in);
        let k = self.linear(&format!("{name}.key"), kv_in);
        let v = self.linear(&format!("{name}.value"), kv_in);
        let d = self.cfg.hidden_dim;
        let h = self.cfg.num_heads;
        let dh = d / h;
        let mut ctx = vec![vec![0.0; d]; q.len()];
        for head in 0..h {
            let cols = head * dh..(head + 1) * dh;
            for i in 0..q.len() {
                let keys: Vec<usize> = (0..k.len()).filter(|&j| allowed(i, j)).collect();
                let scores: Vec<f64> = keys
                    .iter()
                    .map(|&j| cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
                let z: f64 = e.iter().sum();
                for (n, &j) in keys.iter().enumerate() {
                    for c in cols.clone() {
                        ctx[i][c] += e[n] / z * v[j][c];
                    }
                }
            }
        }
        self.linear(&format!("{name}.output"), &ctx)
    }

    fn ffn(&self, name: &str, x: &Mat) -> Mat {
        let h = self.linear(&format!("{name}.inner"), x);
        let h: Mat = h
            .into_iter()
            .map(|r| {
                r.into_iter()
                    .map(|v| 0.5 * v * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (v + 0.044715 * v.powi(3))).tanh()))
                    .collect()
            })
            .collect();
        self.linear(&format!("{name}.outer"), &h)
    }

    fn add(a: &Mat, b: &Mat) -> Mat {
        a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect()).collect()
    }

    fn embed(&self, name: &str, ids: &[usize]) -> Mat {
        let d = self.cfg.hidden_dim;
        let tok = self.p(&format!("{name}.token"));
        let pos = self.p(&format!("{name}.position"));
        ids.iter().enumerate().map(|(t, &id)| (0..d).map(|c| tok[id * d + c] + pos[t * d + c]).collect()).collect()
    }

    /// Hidden states of one sequence; `valid[j]` marks real tokens.
    pub fn encoder(&self, ids: &[usize], valid: &[bool]) -> Mat {
        let mut x = self.embed("encoder.embeddings", ids);
        for l in 0..self.cfg.num_layers {
            let p = format!("encoder.layer{l}");
            let a = self.attention(&format!("{p}.attention"), &x, &x, &|_, j| valid[j]);
            x = self.norm(&format!("{p}.attention_norm"), &Self::add(&x, &a));
            let f = self.ffn(&format!("{p}.ffn"), &x);
            x = self.norm(&format!("{p}.ffn_norm"), &Self::add(&x, &f));
        }
        x
    }

    /// Row-major `t × t` probabilities of one head in the first encoder
    /// layer; rows of padded queries are left at zero.
    pub fn first_layer_attention(&self, ids: &[usize], valid: &[bool], head: usize) -> Vec<f64> {
        let x = self.embed("encoder.embeddings", ids);
        let q = self.linear("encoder.layer0.attention.query", &x);
        let k = self.linear("encoder.layer0.attention.key", &x);
        let dh = self.cfg.hidden_dim / self.cfg.num_heads;
        let cols = head * dh..(head + 1) * dh;
        let t = ids.len();
        let mut out = vec![0.0; t * t];
        for i in (0..t).filter(|&i| valid[i]) {
            let scores: Vec<f64> = (0..t)
                .map(|j| if valid[j] { cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / (dh as f64).sqrt() } else { f64::NEG_INFINITY })
                .collect();
            let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = scores.iter().map(|s| (s - m).exp()).sum();
            for j in 0..t {
                out[i * t + j] = (scores[j] - m).exp() / z;
            }
        }
        out
    }

    pub fn mlm_logits(&self, hidden: &Mat) -> Mat {
        self.linear("heads.mlm", hidden)
    }

    /// Vocabulary logits of one uncoupled decoder stream.
    pub fn decoder(&self, stream: &str, ids: &[usize], valid: &[bool], enc: &Mat, enc_valid: &[bool]) -> Mat {
        let mut x = self.embed(&format!("{stream}.embeddings"), ids);
        for l in 0..self.cfg.num_layers {
            let p = format!("{stream}.layer{l}");
            let s = self.attention(&format!("{p}.self_attention"), &x, &x, &|i, j| valid[j] && j <= i);
            x = self.norm(&format!("{p}.self_norm"), &Self::add(&x, &s));
            let e = self.attention(&format!("{p}.encoder_attention"), &x, enc, &|_, j| enc_valid[j]);
            x = self.norm(&format!("{p}.encoder_norm"), &Self::add(&x, &e));
            let f = self.ffn(&format!("{p}.ffn"), &x);
            x = self.norm(&format!("{p}.ffn_norm"), &Self::add(&x, &f));
        }
        self.linear(&format!("{stream}.output"), &x)
    }
}

pub fn max_abs_diff(flat: &[f64], rows: &Mat) -> f64 {
    let flat_rows = rows.iter().flatten();
    assert_eq!(flat.len(), rows.iter().map(Vec::len).sum::<usize>());
    flat.iter().zip(flat_rows).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
}

// ---------------------------------------------------------------------------
// Gradient suites

fn dropout_tape() -> Tape {
    Tape::with_dropout(11)
}

/// Worst relative error of every differentiable tape op.
pub fn op_gradient_suite() -> Vec<(&'static str, f64)> {
    use cmlformer::tensor::{IGNORE_INDEX, LAYER_NORM_EPS};
    let mut r = rng(2024);
    let mut t = |shape: &[usize]| random_tensor(shape, &mut r, 1.0);
    let mut out = Vec::new();
    let ws = weighted_sum;

    out.push(("matmul", check_op(&[t(&[2, 3, 4]), t(&[2, 4, 5])], |tp, v| {
        let y = tp.matmul(v[0], v[1]).unwrap();
        ws(tp, y, 1)
    })));
    out.push(("matmul_shared_rhs", check_op(&[t(&[2, 3, 4]), t(&[4, 5])], |tp, v| {
        let y = tp.matmul(v[0], v[1]).unwrap();
        ws(tp, y, 2)
    })));
    out.push(("permute", check_op(&[t(&[2, 3, 4])], |tp, v| {
        let y = tp.permute(v[0], &[2, 0, 1]).unwrap();
        ws(tp, y, 3)
    })));
    out.push(("transpose", check_op(&[t(&[2, 3, 4])], |tp, v| {
        let y = tp.transpose(v[0]).unwrap();
        ws(tp, y, 4)
    })));
    out.push(("reshape", check_op(&[t(&[2, 6])], |tp, v| {
        let y = tp.reshape(v[0], &[3, 4]).unwrap();
        ws(tp, y, 5)
    })));
    out.push(("add", check_op(&[t(&[3, 4]), t(&[3, 4])], |tp, v| {
        let y = tp.add(v[0], v[1]).unwrap();
        ws(tp, y, 6)
    })));
    out.push(("add_broadcast", check_op(&[t(&[2, 3, 4]), t(&[4])], |tp, v| {
        let y = tp.add(v[0], v[1]).unwrap();
        ws(tp, y, 7)
    })));
    out.push(("sub_broadcast", check_op(&[t(&[2, 3, 4]), t(&[3, 4])], |tp, v| {
        let y = tp.sub(v[0], v[1]).unwrap();
        ws(tp, y, 8)
    })));
    out.push(("mul", check_op(&[t(&[3, 4]), t(&[3, 4])], |tp, v| {
        let y = tp.mul(v[0], v[1]).unwrap();
        ws(tp, y, 9)
    })));
    out.push(("scale", check_op(&[t(&[3, 4])], |tp, v| {
        let y = tp.scale(v[0], -0.37).unwrap();
        ws(tp, y, 10)
    })));
    out.push(("gelu", check_op(&[random_tensor(&[4, 5], &mut rng(77), 3.0)], |tp, v| {
        let y = tp.gelu(v[0]).unwrap();
        ws(tp, y, 11)
    })));
    out.push(("softmax", check_op(&[random_tensor(&[2, 3, 5], &mut rng(78), 2.0)], |tp, v| {
        let y = tp.softmax(v[0]).unwrap();
        ws(tp, y, 12)
    })));
    out.push(("layer_norm", check_op(&[t(&[3, 6]), t(&[6]), t(&[6])], |tp, v| {
        let y = tp.layer_norm(v[0], v[1], v[2], LAYER_NORM_EPS).unwrap();
        ws(tp, y, 13)
    })));
    out.push(("embedding", check_op(&[t(&[7, 4])], |tp, v| {
        let y = tp.embedding(v[0], &[1, 3, 1, 6, 0, 3], &[2, 3]).unwrap();
        ws(tp, y, 14)
    })));
    out.push(("narrow", check_op(&[t(&[5, 4])], |tp, v| {
        let a = tp.narrow(v[0], 0, 1, 3).unwrap();
        let b = tp.narrow(a, 1, 2, 2).unwrap();
        ws(tp, b, 15)
    })));
    out.push(("sum", check_op(&[t(&[3, 4])], |tp, v| {
        let y = tp.mul(v[0], v[0]).unwrap();
        tp.sum(y).unwrap()
    })));
    out.push(("mean", check_op(&[t(&[3, 4])], |tp, v| {
        let y = tp.mul(v[0], v[0]).unwrap();
        tp.mean(y).unwrap()
    })));
    out.push(("cross_entropy", check_op(&[random_tensor(&[5, 6], &mut rng(79), 2.0)], |tp, v| {
        tp.cross_entropy(v[0], &[2, IGNORE_INDEX, 0, 5, 1], IGNORE_INDEX).unwrap()
    })));
    out.push(("binary_cross_entropy", check_op(&[random_tensor(&[6], &mut rng(80), 3.0)], |tp, v| {
        tp.binary_cross_entropy_with_logits(v[0], &[0, 1, IGNORE_INDEX, 1, 0, 1], IGNORE_INDEX).unwrap()
    })));
    let target = random_tensor(&[2, 3], &mut rng(81), 1.0);
    out.push(("mse", check_op(&[t(&[2, 3])], |tp, v| tp.mse(v[0], &target).unwrap())));
    out.push(("dropout", check_op_on(&[t(&[4, 5])], dropout_tape, |tp, v| {
        let y = tp.dropout(v[0], 0.3).unwrap();
        ws(tp, y, 16)
    })));
    out
}

/// Checks the full pre-training loss of a tiny model against central
/// differences on `per_group` sampled entries from each parameter group.
/// Returns (checked, worst relative error).
pub fn end_to_end_gradient_check(coupling: cmlformer::model::CouplingMode, per_group: usize) -> (usize, f64) {
    use cmlformer::corpus::CmiConfig;
    use cmlformer::model::CmlFormer;
    use cmlformer::objectives::{prepare_corpus, LossComputer, LossWeights};

    let records: Vec<CorpusRecord> = sample_corpus().into_iter().take(3).collect();
    let vocab = sample_vocab(&records, 120);
    let model = CmlFormer::new(ModelConfig::tiny(vocab.len()).with_coupling(coupling)).unwrap();
    let mut params = model.init_params(5);
    // Larger weights than the default init keep gradients well above the
    // finite-difference noise floor.
    for (i, id) in (0..params.len()).enumerate() {
        let noise = random_tensor(params.get(id).shape(), &mut rng(900 + i as u64), 0.2);
        for (p, n) in params.get_mut(id).data_mut().iter_mut().zip(noise.data()) {
            *p += n;
        }
    }
    let prepared = prepare_corpus(&records, &vocab, model.config.max_seq_len, &CmiConfig::default()).unwrap();
    let computer = LossComputer {
        model: &model,
        vocab: &vocab,
        records: &records,
        prepared: &prepared,
        weights: LossWeights::default(),
        static_masks: None,
    };
    let indices = [0usize, 1, 2];
    let loss_at = |p: &ParamStore| -> f64 {
        let mut tape = Tape::new();
        let l = computer.batch_loss(&mut tape, p, &indices, &mut rng(31)).unwrap();
        tape.value(l.total).item()
    };
    let mut tape = Tape::new();
    let l = computer.batch_loss(&mut tape, &params, &indices, &mut rng(31)).unwrap();
    let grads = tape.backward(l.total).unwrap();

    let groups: [fn(&str) -> bool; 5] = [
        |n| n.starts_with("encoder."),
        |n| n.starts_with("decoder.base.") && !n.contains(".cross."),
        |n| n.starts_with("decoder.mix.") && !n.contains(".cross."),
        |n| n.contains(".cross."),
        |n| n.starts_with("heads."),
    ];
    let mut pick = rng(4);
    let mut checked = 0;
    let mut worst: f64 = 0.0;
    for group in groups {
        let mut candidates = Vec::new();
        for (id, name, _) in params.iter() {
            if !group(name) {
                continue;
            }
            if let Some(g) = grads.param(id) {
                for (i, v) in g.data().iter().enumerate() {
                    if v.abs() > 1e-5 {
                        candidates.push((id, i, *v));
                    }
                }
            }
        }
        if candidates.is_empty() {
            continue;
        }
        for _ in 0..per_group {
            let (id, i, analytic) = candidates[pick.gen_range(0..candidates.len())];
            let orig = params.get(id).data()[i];
            params.get_mut(id).data_mut()[i] = orig + FD_STEP;
            let up = loss_at(&params);
            params.get_mut(id).data_mut()[i] = orig - FD_STEP;
            let down = loss_at(&params);
            params.get_mut(id).data_mut()[i] = orig;
            worst = worst.max(rel_err(analytic, (up - down) / (2.0 * FD_STEP)));
            checked += 1;
        }
    }
    (checked, worst)
}

// ---------------------------------------------------------------------------
// Coupling fixtures

pub struct CouplingProbe {
    pub model: cmlformer::model::CmlFormer,
    pub params: ParamStore,
    pub src: cmlformer::model::TokenBatch,
    pub base: cmlformer::model::TokenBatch,
    pub mix: cmlformer::model::TokenBatch,
}

/// Tiny model with a padded two-row batch; the mix stream is deliberately
/// longer than the base stream.
pub fn coupling_probe(mode: cmlformer::model::CouplingMode) -> CouplingProbe {
    use cmlformer::model::{CmlFormer, TokenBatch};
    let model = CmlFormer::new(ModelConfig::tiny(40).with_coupling(mode)).unwrap();
    let mut params = model.init_params(17);
    // Scale up so outputs differ visibly between inputs.
    for id in 0..params.len() {
        let noise = random_tensor(params.get(id).shape(), &mut rng(300 + id as u64), 0.3);
        for (p, n) in params.get_mut(id).data_mut().iter_mut().zip(noise.data()) {
            *p += n;
        }
    }
    let src = TokenBatch::from_sequences(&[vec![2, 11, 12, 13, 14, 3], vec![2, 20, 21, 3]]);
    let base = TokenBatch::from_sequences(&[vec![2, 7, 8, 9, 10], vec![2, 30, 31]]);
    let mix = TokenBatch::from_sequences(&[vec![2, 15, 16, 17, 18, 19, 22], vec![2, 33, 34, 35]]);
    CouplingProbe { model, params, src, base, mix }
}

impl CouplingProbe {
    /// (base logits, mix logits, encoder hidden, MLM logits), flattened.
    pub fn run(&self, mix: &cmlformer::model::TokenBatch) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
        let mut tape = Tape::new();
        let enc = self.model.encode(&mut tape, &self.params, &self.src).unwrap();
        let mlm = self.model.mlm_logits(&mut tape, &self.params, &enc).unwrap();
        let out = self.model.decode(&mut tape, &self.params, &enc, &self.base, mix).unwrap();
        (
            tape.value(out.base_logits).data().to_vec(),
            tape.value(out.mix_logits).data().to_vec(),
            tape.value(enc.hidden).data().to_vec(),
            tape.value(mlm).data().to_vec(),
        )
    }

    /// Same mix batch with every real non-[CLS] token replaced.
    pub fn altered_mix(&self) -> cmlformer::model::TokenBatch {
        let mut m = self.mix.clone();
        for (i, id) in m.ids.iter_mut().enumerate() {
            if m.mask[i] && *id != 2 {
                *id = 5 + (*id * 7 + 3) % 35;
            }
        }
        m
    }

    /// Largest gap between the model and the plain-array reference over
    /// encoder states, MLM logits and both decoder outputs.
    pub fn reference_gap(&self) -> f64 {
        let (base, mix, hidden, mlm) = self.run(&self.mix);
        let r = Reference { params: &self.params, cfg: &self.model.config };
        let v = self.model.config.base_vocab;
        let d = self.model.config.hidden_dim;
        let mut gap: f64 = 0.0;
        for b in 0..self.src.batch {
            let enc = r.encoder(self.src.row(b), self.src.row_mask(b));
            let t = self.src.len;
            gap = gap.max(max_abs_diff(&hidden[b * t * d..(b + 1) * t * d], &enc));
            gap = gap.max(max_abs_diff(&mlm[b * t * v..(b + 1) * t * v], &r.mlm_logits(&enc)));
            for (stream, batch, logits) in [("decoder.base", &self.base, &base), ("decoder.mix", &self.mix, &mix)] {
                let expect = r.decoder(stream, batch.row(b), batch.row_mask(b), &enc, self.src.row_mask(b));
                let t = batch.len;
                let got = &logits[b * t * v..(b + 1) * t * v];
                // Padded query rows are unconstrained; compare real ones.
                for (i, row) in expect.iter().enumerate() {
                    if batch.row_mask(b)[i] {
                        gap = gap.max(max_abs_diff(&got[i * v..(i + 1) * v], &vec![row.clone()]));
                    }
                }
            }
        }
        gap
    }
}
