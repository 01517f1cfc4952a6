//! Central finite-difference checks of every differentiable block.
//!
//! Each block is written against a [`ParamStore`] holding all of its inputs.
//! Its output `y` is reduced to the scalar `Σ y ⊙ R` with a fixed random `R`,
//! autodiff gradients of that scalar are compared with
//! `(f(θ + h·e) − f(θ − h·e)) / 2h` on sampled coordinates, and the largest
//! relative error `|a − n| / max(|a|, |n|, 1e-6)` is reported.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{attend_and_pool, multi_head, scaled_dot_attention, MhsaParams};
use crate::autodiff::{Tape, Tensor, Var};
use crate::consensus::{build_graph, consensus_embed, gcn_layer, ConsensusHead, GcnForm};
use crate::data::{generate_synthetic, Dataset, SynthConfig, TrainConfig, Vocab};
use crate::encoders::{encode_image, encode_text, gru_step, Caption, EncoderParams, GruGates};
use crate::error::Result;
use crate::fusion::{fuse, FuseType, FusionParams};
use crate::losses::{contrastive_loss, kl_loss, total_loss, ContrastiveMode};
use crate::model::Model;
use crate::params::{Binding, ParamStore};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
const ABS_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct BlockReport {
    pub name: String,
    pub max_rel_err: f64,
    pub coordinates: usize,
}

impl BlockReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < TOLERANCE
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(ABS_FLOOR)
}

/// Compares autodiff gradients of `analytic` with finite differences of
/// `reference`, both reduced through the same random projection. The two are
/// usually the same function; they differ when checking that a quantity is
/// treated as a constant by the analytic path.
pub fn compare<A, F>(name: &str, store: &ParamStore, per_tensor: usize, seed: u64, analytic: A, reference: F) -> Result<BlockReport>
where
    A: Fn(&mut Tape, &Binding) -> Result<Var>,
    F: Fn(&mut Tape, &Binding) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tape = Tape::new();
    let bind = store.bind(&mut tape);
    let out = analytic(&mut tape, &bind)?;
    let shape = tape.value(out).shape().to_vec();
    let n: usize = shape.iter().product();
    let proj = Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())?;

    let reduce = |tape: &mut Tape, y: Var| -> Result<Var> {
        let r = tape.leaf(proj.clone());
        let prod = tape.mul(y, r)?;
        tape.sum(prod)
    };
    let scalar = reduce(&mut tape, out)?;
    let grads = bind.collect_grads(&tape.backward(scalar)?, store);

    let eval = |s: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new();
        let bind = s.bind(&mut tape);
        let y = reference(&mut tape, &bind)?;
        let v = reduce(&mut tape, y)?;
        tape.value(v).item()
    };

    let mut report = BlockReport { name: name.to_string(), max_rel_err: 0.0, coordinates: 0 };
    let mut probe = store.clone();
    for (pi, id) in store.ids().enumerate() {
        let base = store.get(id);
        let count = base.numel();
        let coords: Vec<usize> = if count <= per_tensor {
            (0..count).collect()
        } else {
            (0..per_tensor).map(|_| rng.random_range(0..count)).collect()
        };
        for c in coords {
            let mut t = base.clone();
            t.data_mut()[c] = base.data()[c] + STEP;
            probe.set(id, t.clone())?;
            let plus = eval(&probe)?;
            t.data_mut()[c] = base.data()[c] - STEP;
            probe.set(id, t)?;
            let minus = eval(&probe)?;
            probe.set(id, base.clone())?;
            let numeric = (plus - minus) / (2.0 * STEP);
            let err = relative_error(grads[pi].data()[c], numeric);
            report.max_rel_err = report.max_rel_err.max(err);
            report.coordinates += 1;
        }
    }
    Ok(report)
}

/// [`compare`] with the same function on both sides.
pub fn check<F>(name: &str, store: &ParamStore, per_tensor: usize, seed: u64, f: F) -> Result<BlockReport>
where
    F: Fn(&mut Tape, &Binding) -> Result<Var>,
{
    compare(name, store, per_tensor, seed, &f, &f)
}

fn random(shape: &[usize], scale: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

/// Small model and batch used by the loss-term blocks.
pub fn tiny_setup(seed: u64) -> Result<(Model, Dataset)> {
    let synth = SynthConfig { n_pairs: 12, regions: 3, feature_dim: 6, caption_len: 4, vocab: 16, seed, ..SynthConfig::default() };
    let data = generate_synthetic(&synth)?;
    let tokens = data.train.tokenized();
    let vocab = Vocab::build(tokens.iter().map(Vec::as_slice));
    let graph = build_graph(&tokens, 5)?;
    let cfg = TrainConfig {
        embed_dim: 8,
        feature_dim: 6,
        word_dim: 5,
        heads: 2,
        concepts: 5,
        contrastive_mode: ContrastiveMode::Sum,
        seed,
        ..TrainConfig::default()
    };
    let ds = Dataset::from_raw(&data.train, &vocab)?;
    Ok((Model::new(&cfg, vocab.len(), graph.adjacency)?, ds))
}

/// Runs the whole suite; every block should report an error below [`TOLERANCE`].
pub fn run_suite(seed: u64) -> Result<Vec<BlockReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let all = usize::MAX;

    // GRU step
    {
        let mut s = ParamStore::new();
        let gates = GruGates::init(&mut s, "gru", 5, 4, &mut rng)?;
        let x = s.add("x", random(&[1, 5], 1.0, &mut rng))?;
        let h = s.add("h", random(&[1, 4], 1.0, &mut rng))?;
        out.push(check("gru_step", &s, all, seed, |t, b| gru_step(t, b.var(x), b.var(h), &gates, b))?);
    }
    // image projection and Bi-GRU text encoder
    {
        let mut s = ParamStore::new();
        let enc = EncoderParams::init(&mut s, 7, 4, 5, 6, &mut rng)?;
        let regions = s.add("regions", random(&[3, 5], 1.0, &mut rng))?;
        out.push(check("encode_image", &s, 16, seed, |t, b| encode_image(t, b.var(regions), &enc, b))?);
        let caption = Caption::new(vec![3, 1, 6, 3])?;
        let store = s.clone();
        out.push(check("encode_text", &s, 16, seed, |t, b| Ok(encode_text(t, &caption, &enc, b, &store)?.states))?);
    }
    // attention
    {
        let mut s = ParamStore::new();
        let q = s.add("q", random(&[4, 3], 1.0, &mut rng))?;
        let k = s.add("k", random(&[4, 3], 1.0, &mut rng))?;
        let v = s.add("v", random(&[4, 3], 1.0, &mut rng))?;
        out.push(check("scaled_dot_attention", &s, all, seed, |t, b| {
            Ok(scaled_dot_attention(t, b.var(q), b.var(k), b.var(v))?.output)
        })?);
    }
    {
        let mut s = ParamStore::new();
        let p = MhsaParams::init(&mut s, "mhsa", 8, 2, &mut rng)?;
        let x = s.add("x", random(&[5, 8], 1.0, &mut rng))?;
        out.push(check("multi_head", &s, 24, seed, |t, b| Ok(multi_head(t, b.var(x), &p, b)?.output))?);
        out.push(check("attend_and_pool", &s, 24, seed, |t, b| attend_and_pool(t, b.var(x), &p, b))?);
    }
    // fusion, batched rows
    for (fuse_type, global) in [(FuseType::Concat, false), (FuseType::AdapSum, false), (FuseType::WeightSum, false), (FuseType::WeightSum, true)]
    {
        let mut s = ParamStore::new();
        let p = FusionParams::init(&mut s, "fusion", 4, fuse_type, global, &mut rng)?;
        if global {
            s.set(p.global_logits, random(&[1, 2], 1.0, &mut rng))?;
        }
        s.set(p.alpha_logit, random(&[1, 1], 1.0, &mut rng))?;
        let a = s.add("a", random(&[3, 4], 1.0, &mut rng))?;
        let c = s.add("b", random(&[3, 4], 1.0, &mut rng))?;
        let name = if global { "fuse/weight_sum_global".to_string() } else { format!("fuse/{fuse_type}") };
        out.push(check(&name, &s, all, seed, |t, b| Ok(fuse(t, b.var(a), b.var(c), &p, b)?.vector))?);
    }
    // GCN layer in both forms, consensus embedding
    for form in [GcnForm::Paper, GcnForm::Conventional] {
        let mut s = ParamStore::new();
        let raw = random(&[4, 4], 1.0, &mut rng).map(f64::abs);
        let adj = s.add("adjacency", raw)?;
        let h = s.add("h", random(&[4, 3], 1.0, &mut rng))?;
        let w = s.add("w", random(&[3, 3], 1.0, &mut rng))?;
        for last in [false, true] {
            let name = format!("gcn_layer/{form}{}", if last { "/last" } else { "" });
            out.push(check(&name, &s, all, seed, |t, b| gcn_layer(t, b.var(adj), b.var(h), b.var(w), form, last))?);
        }
    }
    {
        let mut s = ParamStore::new();
        let head = ConsensusHead::init(&mut s, "predictor", 4, 5, &mut rng)?;
        let inst = s.add("instance", random(&[3, 4], 1.0, &mut rng))?;
        let g = s.add("gcn_out", random(&[5, 4], 1.0, &mut rng))?;
        out.push(check("consensus_embed", &s, all, seed, |t, b| {
            Ok(consensus_embed(t, b.var(inst), b.var(g), &head, b)?.embedding)
        })?);
        out.push(check("consensus_dist", &s, all, seed, |t, b| {
            Ok(consensus_embed(t, b.var(inst), b.var(g), &head, b)?.concept_dist)
        })?);
    }
    // raw loss functions
    for mode in [ContrastiveMode::Sum, ContrastiveMode::Hardest] {
        let mut s = ParamStore::new();
        let scores = s.add("scores", random(&[5, 5], 1.0, &mut rng))?;
        out.push(check(&format!("contrastive_loss/{mode}"), &s, all, seed, |t, b| {
            contrastive_loss(t, b.var(scores), 0.2, mode)
        })?);
    }
    {
        let mut s = ParamStore::new();
        let logits_t = s.add("text_logits", random(&[3, 4], 1.0, &mut rng))?;
        let logits_i = s.add("image_logits", random(&[3, 4], 1.0, &mut rng))?;
        out.push(check("kl_loss", &s, all, seed, |t, b| {
            let pt = t.softmax_rows(b.var(logits_t))?;
            let pi = t.softmax_rows(b.var(logits_i))?;
            kl_loss(t, pt, pi)
        })?);
    }

    // the four model loss terms and the weighted total, through the whole model
    let (model, ds) = tiny_setup(seed)?;
    let pairs = ds.pairs()[..4].to_vec();
    let labels = ["loss/instance", "loss/consensus", "loss/fusion", "loss/kl"];
    for (i, label) in labels.iter().enumerate() {
        out.push(check(label, &model.store, 6, seed, |t, b| Ok(model.forward_batch(t, b, &ds, &pairs)?.terms[i]))?);
    }
    out.push(total_loss_detached(&model, &ds, &pairs, 6, seed)?);
    Ok(out)
}

/// Autodiff of the dynamically weighted total against finite differences of
/// the same sum with every weight frozen at its value at the base point.
pub fn total_loss_detached(model: &Model, ds: &Dataset, pairs: &[crate::data::InstancePair], per_tensor: usize, seed: u64) -> Result<BlockReport> {
    let (w, invert) = (model.config.base_weights, model.config.invert_dynamic_weight);
    let frozen = {
        let (_, _, _, terms) = model.batch_loss(ds, pairs)?;
        terms.effective_weights
    };
    compare(
        "total_loss",
        &model.store,
        per_tensor,
        seed,
        |t, b| {
            let terms = model.forward_batch(t, b, ds, pairs)?.terms;
            Ok(total_loss(t, terms, w, invert)?.0)
        },
        |t, b| {
            let terms = model.forward_batch(t, b, ds, pairs)?.terms;
            weighted_sum(t, terms, frozen)
        },
    )
}

/// Finite differences of the total with live weights, which include the
/// weights' own sensitivity; used to show the analytic path leaves it out.
pub fn total_loss_live(model: &Model, ds: &Dataset, pairs: &[crate::data::InstancePair], per_tensor: usize, seed: u64) -> Result<BlockReport> {
    let (w, invert) = (model.config.base_weights, model.config.invert_dynamic_weight);
    check("total_loss/live", &model.store, per_tensor, seed, |t, b| {
        let terms = model.forward_batch(t, b, ds, pairs)?.terms;
        Ok(total_loss(t, terms, w, invert)?.0)
    })
}

/// `Σ c_i · terms_i` with constant coefficients.
pub fn weighted_sum(tape: &mut Tape, terms: [Var; 4], coefficients: [f64; 4]) -> Result<Var> {
    let mut acc = tape.scale(terms[0], coefficients[0])?;
    for i in 1..4 {
        let s = tape.scale(terms[i], coefficients[i])?;
        acc = tape.add(acc, s)?;
    }
    Ok(acc)
}

/// Runs the suite and times it.
pub fn run_timed(seed: u64) -> Result<(Vec<BlockReport>, std::time::Duration)> {
    let start = Instant::now();
    let reports = run_suite(seed)?;
    Ok((reports, start.elapsed()))
}
