//! Seeded check suites shared by the focused test files and the acceptance
//! runner.

use ammc::data::HeadKind;
use ammc::gradcheck::{self, GradCheckReport};
use ammc::model::heads::{rank_candidates, ranking_loss};
use ammc::model::{Combiner, CombinerConfig, FeatureBundle, Model};
use ammc::nn::{MultiHeadSelfAttention, TransformerEncoder, LAYER_NORM_EPS};
use ammc::optim::{adam_step, AdamConfig, AdamState};
use ammc::params::{ParamGroup, ParamStore, Session};
use ammc::{Result, Tape, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::oracle::{self, to_mat};
use super::{batch_loss, random_example, random_tensor, randomize, rng, tiny_config, with_params};

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;

type OpFn<'a> = dyn Fn(&mut Tape, &[Var]) -> Result<Var> + 'a;

/// Checks `f` on `inputs` through the scalar `Σ f(x) ⊙ R` for a random `R`.
pub fn check_op(r: &mut ChaCha8Rng, inputs: Vec<Tensor>, f: &OpFn<'_>) -> Result<GradCheckReport> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone().with_requires_grad(true))).collect();
    let out = f(&mut tape, &vars)?;
    let weights = random_tensor(r, tape.value(out).shape());
    let w = tape.constant(weights.clone());
    let prod = tape.mul(out, w)?;
    let loss = tape.sum(prod)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| tape.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; tape.value(v).numel()]))
        .collect();
    gradcheck::check(&inputs, &analytic, FD_STEP, |xs| {
        let mut t = Tape::new();
        let vs: Vec<Var> = xs.iter().map(|x| t.constant(x.clone())).collect();
        let o = f(&mut t, &vs)?;
        Ok(t.value(o).data().iter().zip(weights.data()).map(|(a, b)| a * b).sum())
    })
}

/// Every differentiable tape op plus the composite blocks, on one seed.
pub fn op_gradient_suite(seed: u64) -> Result<Vec<(&'static str, GradCheckReport)>> {
    let mut r = rng(seed);
    let (m, k, n) = (r.random_range(1..=4), r.random_range(1..=4), r.random_range(1..=4));
    let mut out = Vec::new();
    let mut run = |name: &'static str, r: &mut ChaCha8Rng, inputs: Vec<Tensor>, f: &OpFn<'_>| -> Result<()> {
        out.push((name, check_op(r, inputs, f)?));
        Ok(())
    };
    let a = random_tensor(&mut r, &[m, k]);
    let b = random_tensor(&mut r, &[k, n]);
    run("matmul", &mut r, vec![a.clone(), b], &|t, v| t.matmul(v[0], v[1]))?;
    let a2 = random_tensor(&mut r, &[m, k]);
    run("add", &mut r, vec![a.clone(), a2.clone()], &|t, v| t.add(v[0], v[1]))?;
    run("mul", &mut r, vec![a.clone(), a2], &|t, v| t.mul(v[0], v[1]))?;
    let c = r.random_range(-2.0..2.0);
    run("scale", &mut r, vec![a.clone()], &move |t, v| t.scale(v[0], c))?;
    let bias = random_tensor(&mut r, &[k]);
    run("add_bias", &mut r, vec![a.clone(), bias.clone()], &|t, v| t.add_bias(v[0], v[1]))?;
    run("transpose", &mut r, vec![a.clone()], &|t, v| t.transpose(v[0]))?;
    run("reshape", &mut r, vec![a.clone()], &move |t, v| t.reshape(v[0], vec![k, m]))?;
    let s = Tensor::uniform(&[m, k], 3.0, &mut r);
    run("softmax(1)", &mut r, vec![s.clone()], &|t, v| t.softmax(v[0], 1))?;
    run("softmax(0)", &mut r, vec![s], &|t, v| t.softmax(v[0], 0))?;
    let wide = random_tensor(&mut r, &[m, k + 1]);
    let gain = random_tensor(&mut r, &[k + 1]);
    let lb = random_tensor(&mut r, &[k + 1]);
    run("layer_norm", &mut r, vec![wide, gain, lb], &|t, v| t.layer_norm(v[0], v[1], v[2], LAYER_NORM_EPS))?;
    run("mean(0)", &mut r, vec![a.clone()], &|t, v| t.mean(v[0], 0))?;
    run("mean(1)", &mut r, vec![a.clone()], &|t, v| t.mean(v[0], 1))?;
    run("sum", &mut r, vec![a.clone()], &|t, v| t.sum(v[0]))?;
    let x = Tensor::uniform(&[m, k], 3.0, &mut r);
    run("gelu", &mut r, vec![x], &|t, v| t.gelu(v[0]))?;
    let targets = Tensor::new(vec![m, k], (0..m * k).map(|_| r.random_range(0.0..=1.0)).collect())?;
    let z = Tensor::uniform(&[m, k], 4.0, &mut r);
    run("bce_with_logits", &mut r, vec![z], &move |t, v| {
        t.bce_with_logits(v[0], &targets)
    })?;
    let ids: Vec<usize> = (0..5).map(|_| r.random_range(0..m)).collect();
    run("gather_rows", &mut r, vec![a.clone()], &move |t, v| t.gather_rows(v[0], &ids))?;
    let top = random_tensor(&mut r, &[2, k]);
    run("concat_rows", &mut r, vec![a.clone(), top], &|t, v| t.concat_rows(&[v[0], v[1]]))?;
    let side = random_tensor(&mut r, &[m, 2]);
    run("concat_cols", &mut r, vec![a.clone(), side], &|t, v| t.concat_cols(&[v[0], v[1]]))?;
    let wide = random_tensor(&mut r, &[m, 4]);
    let lo = r.random_range(0..3);
    run("slice_cols", &mut r, vec![wide], &move |t, v| t.slice_cols(v[0], lo, 4))?;
    let (j, g) = (random_tensor(&mut r, &[3, k]), random_tensor(&mut r, &[3, k]));
    run("ranking_loss", &mut r, vec![j, g], &|t, v| ranking_loss(t, v[0], v[1]))?;

    // attention and a full encoder stack, differentiated w.r.t. their input
    let mut store = ParamStore::new();
    let attn = MultiHeadSelfAttention::new(&mut store, &mut r, "a", ParamGroup::Combiner, 4, 2)?;
    let enc = TransformerEncoder::new(&mut store, &mut r, "e", ParamGroup::Combiner, 2, 2, 4, 6)?;
    let len = r.random_range(1..=5);
    let x = random_tensor(&mut r, &[len, 4]);
    let st = &store;
    let attn_f = move |t: &mut Tape, v: &[Var]| -> Result<Var> {
        let mut s = Session::inference(st);
        s.tape = std::mem::take(t);
        let y = attn.forward(&mut s, v[0], None);
        *t = std::mem::take(&mut s.tape);
        y
    };
    run("attention", &mut r, vec![x.clone()], &attn_f)?;
    let enc_f = move |t: &mut Tape, v: &[Var]| -> Result<Var> {
        let mut s = Session::inference(st);
        s.tape = std::mem::take(t);
        let y = enc.forward(&mut s, v[0]);
        *t = std::mem::take(&mut s.tape);
        y
    };
    run("transformer_encoder", &mut r, vec![x], &enc_f)?;
    Ok(out)
}

/// Finite differences over every parameter of a tiny model, through the
/// full assemble → combiner mixture → both heads path.
pub fn full_path_gradient(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let n = 1 + (seed as usize % 3);
    let cfg = tiny_config(n);
    let mut model = Model::new(cfg.clone(), seed)?;
    randomize(&mut model, &mut r);
    let batch: Vec<_> = (0..3).map(|i| random_example(&mut r, &cfg, i)).collect();
    let mix = r.random_range(0.1..0.9);
    let mode = HeadKind::Both;

    let mut s = Session::new(&model.params);
    let loss = batch_loss(&model, &mut s, &batch, mode, mix)?;
    s.tape.backward(loss)?;
    let mut analytic: Vec<Vec<f64>> = model.params.iter().map(|(_, p)| vec![0.0; p.tensor.numel()]).collect();
    for (id, g) in s.grads() {
        analytic[id.index()] = g.to_vec();
    }
    let inputs: Vec<Tensor> = model.params.iter().map(|(_, p)| p.tensor.clone()).collect();
    gradcheck::check(&inputs, &analytic, FD_STEP, |xs| {
        let m = with_params(&model, xs);
        let mut s = Session::inference(&m.params);
        let l = batch_loss(&m, &mut s, &batch, mode, mix)?;
        Ok(s.tape.value(l).item())
    })
}

#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityReport {
    pub max_simplex_err: f64,
    pub min_gate: f64,
    pub max_recon_err: f64,
    pub single_bit_equal: bool,
}

fn combiner_config(r: &mut ChaCha8Rng, n: usize) -> CombinerConfig {
    let heads = [1, 2, 4][r.random_range(0..3)];
    CombinerConfig {
        n_combiners: n,
        layers_per_combiner: r.random_range(1..=2),
        n_heads: heads,
        d_model: heads * r.random_range(1..=3),
        ..CombinerConfig::default()
    }
}

fn random_bundle(s: &mut Session, r: &mut ChaCha8Rng, d: usize) -> FeatureBundle {
    fn block(s: &mut Session, r: &mut ChaCha8Rng, rows: usize, d: usize) -> Var {
        s.tape.constant(Tensor::uniform(&[rows, d], 1.5, r))
    }
    let rows = r.random_range(1..=4);
    let context = block(s, r, rows, d);
    let global = r.random_bool(0.7).then(|| block(s, r, 1, d));
    let rows = r.random_range(1..=3);
    let regional = r.random_bool(0.7).then(|| block(s, r, rows, d));
    let style = block(s, r, 1, d);
    FeatureBundle {
        context: Some(context),
        image_global: global,
        image_regional: regional,
        style,
    }
}

/// Gate simplex, probe reconstruction and the single-combiner identity on
/// one randomized combiner configuration.
pub fn ammc_identities(seed: u64) -> Result<IdentityReport> {
    let mut r = rng(seed);
    let n = r.random_range(1..=4);
    let cfg = combiner_config(&mut r, n);
    let d = cfg.d_model;
    let mut store = ParamStore::new();
    let comb = Combiner::new(&mut store, &mut r, &cfg, 2 * d)?;
    // move the gate off its zero init so the weights are informative
    let ids: Vec<_> = store.iter().filter(|(_, p)| p.name.starts_with("combiner.gate")).map(|(id, _)| id).collect();
    for id in ids {
        for v in store.tensor_mut(id).data_mut() {
            *v = r.random_range(-2.0..2.0);
        }
    }
    let mut rep = IdentityReport {
        min_gate: f64::INFINITY,
        single_bit_equal: true,
        ..IdentityReport::default()
    };
    for _ in 0..3 {
        let mut s = Session::new(&store);
        let bundle = random_bundle(&mut s, &mut r, d);
        let seq = comb.assemble_sequence(&mut s, &bundle)?;
        let (joint, gate) = comb.ammc_forward(&mut s, seq, bundle.style)?;
        let total: f64 = gate.weights.iter().sum();
        rep.max_simplex_err = rep.max_simplex_err.max((total - 1.0).abs());
        rep.min_gate = gate.weights.iter().copied().fold(rep.min_gate, f64::min);
        let mut recon = vec![0.0; d];
        for (i, w) in gate.weights.iter().enumerate() {
            let p = comb.probe_single_combiner(&mut s, seq, i)?;
            for (acc, x) in recon.iter_mut().zip(s.tape.value(p).data()) {
                *acc += w * x;
            }
        }
        let err = recon
            .iter()
            .zip(s.tape.value(joint).data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        rep.max_recon_err = rep.max_recon_err.max(err);
        if n == 1 {
            // a plain combiner built from the same seed and stream
            let mut r2 = rng(seed);
            let _ = r2.random_range(1..=4);
            let cfg2 = combiner_config(&mut r2, 1);
            let mut store2 = ParamStore::new();
            let plain = Combiner::new(&mut store2, &mut r2, &cfg2, 2 * d)?;
            let mut s2 = Session::new(&store2);
            let seq2 = s2.tape.constant(s.tape.value(seq).clone());
            let out = plain.mmc_forward(&mut s2, seq2, 0)?;
            rep.single_bit_equal &= s.tape.value(joint).bit_eq(s2.tape.value(out)) && gate.weights == [1.0];
        }
    }
    Ok(rep)
}

#[derive(Debug, Clone)]
pub struct OracleCheck {
    pub name: &'static str,
    pub diff: f64,
    pub tol: f64,
}

impl OracleCheck {
    pub fn ok(&self) -> bool {
        self.diff < self.tol || (self.tol == 0.0 && self.diff == 0.0)
    }
}

fn session_value(store: &ParamStore, x: &Tensor, f: impl FnOnce(&mut Session, Var) -> Result<Var>) -> Result<Tensor> {
    let mut s = Session::inference(store);
    let v = s.tape.constant(x.clone());
    let y = f(&mut s, v)?;
    Ok(s.tape.value(y).clone())
}

/// Tape outputs against the straight-line oracles on one seed.
pub fn oracle_suite(seed: u64) -> Result<Vec<OracleCheck>> {
    let mut r = rng(seed);
    let mut out = Vec::new();
    let mut push = |name, diff, tol| out.push(OracleCheck { name, diff, tol });

    let (m, k, n) = (r.random_range(1..=6), r.random_range(1..=6), r.random_range(1..=6));
    let a = random_tensor(&mut r, &[m, k]);
    let b = random_tensor(&mut r, &[k, n]);
    let mut t = Tape::new();
    let (va, vb) = (t.constant(a.clone()), t.constant(b.clone()));
    let y = t.matmul(va, vb)?;
    push("matmul", oracle::max_abs_diff(&to_mat(t.value(y)), &oracle::matmul(&to_mat(&a), &to_mat(&b))), 1e-12);

    let s = Tensor::uniform(&[m, k], 4.0, &mut r);
    let vs = t.constant(s.clone());
    let y = t.softmax(vs, 1)?;
    let expect: Vec<Vec<f64>> = to_mat(&s).iter().map(|row| oracle::softmax(row)).collect();
    push("softmax", oracle::max_abs_diff(&to_mat(t.value(y)), &expect), 1e-12);

    let g = random_tensor(&mut r, &[k]);
    let bb = random_tensor(&mut r, &[k]);
    let (vg, vbb) = (t.constant(g.clone()), t.constant(bb.clone()));
    let y = t.layer_norm(vs, vg, vbb, LAYER_NORM_EPS)?;
    let expect: Vec<Vec<f64>> = to_mat(&s)
        .iter()
        .map(|row| oracle::layer_norm(row, g.data(), bb.data(), LAYER_NORM_EPS))
        .collect();
    push("layer_norm", oracle::max_abs_diff(&to_mat(t.value(y)), &expect), 1e-10);

    let targets = Tensor::new(vec![m, k], (0..m * k).map(|_| r.random_range(0.0..=1.0)).collect())?;
    let y = t.bce_with_logits(vs, &targets)?;
    push("bce_with_logits", (t.value(y).item() - oracle::bce(s.data(), targets.data())).abs(), 1e-10);

    let y = t.mean(va, 0)?;
    let expect = oracle::mean_rows(&to_mat(&a));
    let diff = t.value(y).data().iter().zip(&expect).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
    push("mean", diff, 1e-12);

    let y = t.gelu(vs)?;
    let diff = t.value(y).data().iter().zip(s.data()).map(|(p, &x)| (p - oracle::gelu(x)).abs()).fold(0.0, f64::max);
    push("gelu", diff, 1e-12);

    let ids: Vec<usize> = (0..6).map(|_| r.random_range(0..m)).collect();
    let y = t.gather_rows(va, &ids)?;
    let expect: Vec<Vec<f64>> = ids.iter().map(|&i| a.row(i).to_vec()).collect();
    push("gather_rows", oracle::max_abs_diff(&to_mat(t.value(y)), &expect), 0.0);

    // attention, L = 3, single head and two heads
    let mut store = ParamStore::new();
    let a1 = MultiHeadSelfAttention::new(&mut store, &mut r, "a1", ParamGroup::Combiner, 4, 1)?;
    let a2 = MultiHeadSelfAttention::new(&mut store, &mut r, "a2", ParamGroup::Combiner, 4, 2)?;
    let enc = TransformerEncoder::new(&mut store, &mut r, "t", ParamGroup::Combiner, 1, 1, 4, 8)?;
    let deep = TransformerEncoder::new(&mut store, &mut r, "d", ParamGroup::Combiner, 2, 2, 4, 8)?;
    let x = random_tensor(&mut r, &[3, 4]);
    let xm = to_mat(&x);
    let y = session_value(&store, &x, |s, v| a1.forward(s, v, None))?;
    push("attention (1 head)", oracle::max_abs_diff(&to_mat(&y), &oracle::attention(&store, &a1, &xm)), 1e-10);
    let y = session_value(&store, &x, |s, v| a2.forward(s, v, None))?;
    push("attention (2 heads)", oracle::max_abs_diff(&to_mat(&y), &oracle::attention(&store, &a2, &xm)), 1e-10);
    let y = session_value(&store, &x, |s, v| enc.forward(s, v))?;
    let expect = oracle::transformer(&store, &enc, &xm, LAYER_NORM_EPS);
    push("transformer (1 layer, 1 head)", oracle::max_abs_diff(&to_mat(&y), &expect), 1e-9);
    let y = session_value(&store, &x, |s, v| deep.forward(s, v))?;
    let expect = oracle::transformer(&store, &deep, &xm, LAYER_NORM_EPS);
    push("transformer (2 layers, 2 heads)", oracle::max_abs_diff(&to_mat(&y), &expect), 1e-9);

    // ranking scores and the in-batch loss
    let joint = random_tensor(&mut r, &[1, 4]);
    let cands = random_tensor(&mut r, &[5, 4]);
    let scores = rank_candidates(&joint, &cands)?;
    let expect = oracle::matmul(&to_mat(&cands), &oracle::transpose(&to_mat(&joint)));
    let diff = scores.iter().zip(&expect).map(|(p, q)| (p - q[0]).abs()).fold(0.0, f64::max);
    push("rank_candidates", diff, 1e-12);
    let (jb, gb) = (random_tensor(&mut r, &[3, 4]), random_tensor(&mut r, &[3, 4]));
    let (vj, vgb) = (t.constant(jb.clone()), t.constant(gb.clone()));
    let y = ranking_loss(&mut t, vj, vgb)?;
    let logits: Vec<f64> = oracle::matmul(&to_mat(&jb), &oracle::transpose(&to_mat(&gb))).concat();
    let eye: Vec<f64> = (0..9).map(|i| if i % 4 == 0 { 1.0 } else { 0.0 }).collect();
    push("ranking_loss", (t.value(y).item() - oracle::bce(&logits, &eye)).abs(), 1e-10);

    // Adam on f(p) = p², ten steps
    let cfg = AdamConfig { lr: 0.05, ..AdamConfig::default() };
    let mut p = vec![r.random_range(-2.0..2.0)];
    let mut state = AdamState::new(1, cfg);
    let mut scalar = oracle::ScalarAdam::new(cfg.lr, cfg.beta1, cfg.beta2, cfg.eps);
    let mut q = p[0];
    let mut diff: f64 = 0.0;
    for _ in 0..10 {
        let grad = 2.0 * p[0];
        adam_step("p", &mut p, &[grad], &mut state)?;
        q = scalar.step(q, 2.0 * q);
        diff = diff.max((p[0] - q).abs());
    }
    push("adam trajectory", diff, 1e-10);
    Ok(out)
}
