//! Finite-difference gradient oracle shared by the integration tests.
#![allow(dead_code)]

use autodial::tensor::{Graph, ParamStore, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub const H: f32 = 1e-3;
pub const TOL: f64 = 1e-3;

pub fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, 0 when both vanish.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale < 1e-12 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

/// Random projection weights turning an output into a scalar `Σ w·y`.
fn weights(numel: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    (0..numel).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn project(y: &Tensor, w: &[f64]) -> f64 {
    y.data().iter().zip(w).map(|(&a, b)| a as f64 * b).sum()
}

/// Checks `f` against central differences with respect to every input.
/// Returns the worst norm-wise relative error.
pub fn gradcheck_inputs<F>(inputs: &[Tensor], seed: u64, f: F) -> f64
where
    F: for<'p> Fn(&mut Graph<'p>, &[Var]) -> Var,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone().with_requires_grad(true))).collect();
    let y = f(&mut g, &vars);
    let w = weights(g.value(y).numel(), seed);
    let wt = Tensor::new(g.shape(y).to_vec(), w.iter().map(|&v| v as f32).collect()).unwrap();
    let wv = g.constant(wt);
    let prod = g.mul(y, wv).unwrap();
    let loss = g.sum(prod);
    g.backward(loss).unwrap();
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| match g.grad(v) {
            Some(gr) => gr.iter().map(|&x| x as f64).collect(),
            None => vec![0.0; g.value(v).numel()],
        })
        .collect();

    let eval = |xs: &[Tensor]| -> f64 {
        let mut g = Graph::no_grad();
        let vs: Vec<Var> = xs.iter().map(|t| g.constant(t.clone())).collect();
        let y = f(&mut g, &vs);
        project(g.value(y), &w)
    };
    let mut worst = 0.0f64;
    for (i, a) in analytic.iter().enumerate() {
        let mut numeric = Vec::with_capacity(a.len());
        for j in 0..inputs[i].numel() {
            let mut xs = inputs.to_vec();
            xs[i].data_mut()[j] += H;
            let up = eval(&xs);
            xs[i].data_mut()[j] -= 2.0 * H;
            let down = eval(&xs);
            numeric.push((up - down) / (2.0 * H as f64));
        }
        worst = worst.max(rel_err(a, &numeric));
    }
    worst
}

/// Checks `f` against central differences with respect to the trainable
/// parameters of `store`, sampling at most `per_tensor` coordinates each.
/// The error is norm-wise over the whole sampled parameter vector; single
/// tensors can have exactly zero gradient (key biases under softmax), which
/// leaves only f32 noise to compare.
pub fn gradcheck_store<F>(store: &ParamStore, seed: u64, per_tensor: usize, f: F) -> f64
where
    F: for<'p> Fn(&mut Graph<'p>, &'p ParamStore) -> Var,
{
    let (analytic, w) = {
        let mut g = Graph::new();
        let y = f(&mut g, store);
        let w = weights(g.value(y).numel(), seed);
        let wt = Tensor::new(g.shape(y).to_vec(), w.iter().map(|&v| v as f32).collect()).unwrap();
        let wv = g.constant(wt);
        let prod = g.mul(y, wv).unwrap();
        let loss = g.sum(prod);
        (g.backward(loss).unwrap(), w)
    };
    let eval = |s: &ParamStore| -> f64 {
        let mut g = Graph::no_grad();
        let y = f(&mut g, s);
        project(g.value(y), &w)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut a_all = Vec::new();
    let mut n_all = Vec::new();
    let names: Vec<String> = store
        .iter()
        .filter(|(_, t)| t.requires_grad)
        .map(|(n, _)| n.to_string())
        .collect();
    for name in names {
        let numel = store.get(&name).unwrap().numel();
        let grad = analytic.get(&name);
        let coords: Vec<usize> = if numel <= per_tensor {
            (0..numel).collect()
        } else {
            (0..per_tensor).map(|_| rng.random_range(0..numel)).collect()
        };
        let mut a = Vec::new();
        let mut n = Vec::new();
        let mut s = store.clone();
        for j in coords {
            let orig = s.get(&name).unwrap().data()[j];
            s.get_mut(&name).unwrap().data_mut()[j] = orig + H;
            let up = eval(&s);
            s.get_mut(&name).unwrap().data_mut()[j] = orig - H;
            let down = eval(&s);
            s.get_mut(&name).unwrap().data_mut()[j] = orig;
            n.push((up - down) / (2.0 * H as f64));
            a.push(grad.map_or(0.0, |g| g[j] as f64));
        }
        a_all.extend(a);
        n_all.extend(n);
    }
    rel_err(&a_all, &n_all)
}

use autodial::transformer::{
    classification_decoder_graph, classification_decoder_layout, encoder_graph, encoder_layout,
    generative_decoder_graph, generative_decoder_layout, materialize, multi_head_attention, AttnMask, AttnWeights,
    ModelConfig,
};

fn tiny_cfg() -> ModelConfig {
    let mut c = ModelConfig::tiny(12);
    c.d_model = 8;
    c.n_heads = 2;
    c.ffn_dim = 12;
    c.enc_layers = 1;
    c.gen_dec_layers = 1;
    c.max_seq_len = 8;
    c
}

/// Replaces every value with an O(1) random draw. At the 0.02 init scale most
/// gradients sit below f32 finite-difference noise.
fn rescale(mut store: ParamStore, rng: &mut ChaCha8Rng) -> ParamStore {
    for (name, t) in store.iter_mut() {
        let base = if name.ends_with("gamma") { 1.0 } else { 0.0 };
        for v in t.data_mut() {
            let z: f32 = StandardNormal.sample(&mut *rng);
            *v = base + 0.3 * z;
        }
    }
    store
}

/// Worst relative error of every differentiable operation, by name.
pub fn all_checks(seed: u64) -> Vec<(&'static str, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let mut dims = |lo: usize, hi: usize| rng.random_range(lo..=hi);
    let (m, k, n) = (dims(1, 5), dims(1, 5), dims(1, 5));
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
    let mut r = |s: &[usize]| randn(s, &mut rng);

    out.push(("matmul", gradcheck_inputs(&[r(&[m, k]), r(&[k, n])], seed, |g, v| g.matmul(v[0], v[1]).unwrap())));
    out.push(("matmul_nt", gradcheck_inputs(&[r(&[m, k]), r(&[n, k])], seed, |g, v| g.matmul_nt(v[0], v[1]).unwrap())));
    out.push(("add", gradcheck_inputs(&[r(&[m, n]), r(&[m, n])], seed, |g, v| g.add(v[0], v[1]).unwrap())));
    out.push(("add_row", gradcheck_inputs(&[r(&[m, n]), r(&[n])], seed, |g, v| g.add(v[0], v[1]).unwrap())));
    out.push(("mul", gradcheck_inputs(&[r(&[m, n]), r(&[m, n])], seed, |g, v| g.mul(v[0], v[1]).unwrap())));
    out.push(("scale", gradcheck_inputs(&[r(&[m, n])], seed, |g, v| g.scale(v[0], -1.7))));
    out.push(("gelu", gradcheck_inputs(&[r(&[m, n])], seed, |g, v| g.gelu(v[0]))));
    out.push(("softmax_rows", gradcheck_inputs(&[r(&[m, n])], seed, |g, v| g.softmax(v[0], 1).unwrap())));
    out.push(("softmax_axis0", gradcheck_inputs(&[r(&[m, n])], seed, |g, v| g.softmax(v[0], 0).unwrap())));
    out.push(("softmax_middle", gradcheck_inputs(&[r(&[2, 3, 2])], seed, |g, v| g.softmax(v[0], 1).unwrap())));
    let d = n + 2;
    out.push((
        "layer_norm",
        gradcheck_inputs(&[r(&[m, d]), r(&[d]), r(&[d])], seed, |g, v| {
            g.layer_norm(v[0], v[1], v[2], 1e-5).unwrap()
        }),
    ));
    out.push((
        "embedding",
        gradcheck_inputs(&[r(&[5, k])], seed, |g, v| g.embedding(&[3, 0, 3, 4], v[0]).unwrap()),
    ));
    out.push(("slice_cols", gradcheck_inputs(&[r(&[m, 5])], seed, |g, v| g.slice_cols(v[0], 1, 3).unwrap())));
    out.push((
        "concat_cols",
        gradcheck_inputs(&[r(&[m, 2]), r(&[m, 3])], seed, |g, v| g.concat_cols(&[v[0], v[1], v[0]]).unwrap()),
    ));
    out.push(("reshape", gradcheck_inputs(&[r(&[2, 6])], seed, |g, v| g.reshape(v[0], vec![3, 4]).unwrap())));
    out.push(("sum", gradcheck_inputs(&[r(&[m, n])], seed, |g, v| g.sum(v[0]))));
    out.push(("mean", gradcheck_inputs(&[r(&[m, n])], seed, |g, v| g.mean(v[0]))));
    out.push((
        "dropout",
        gradcheck_inputs(&[r(&[m, n])], seed, |g, v| {
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            g.dropout(v[0], 0.3, &mut rng)
        }),
    ));
    out.push((
        "bce_with_logits",
        gradcheck_inputs(&[r(&[6])], seed, |g, v| g.bce_with_logits(v[0], &[1.0, 0.0, 0.0, 1.0, 1.0, 0.0]).unwrap()),
    ));
    out.push((
        "cross_entropy",
        gradcheck_inputs(&[r(&[4, 5])], seed, |g, v| g.cross_entropy(v[0], &[2, 0, 4, 0], 0).unwrap()),
    ));

    // Composite blocks, differentiated through their parameter stores.
    let cfg = tiny_cfg();
    let mut prng = ChaCha8Rng::seed_from_u64(seed + 2);
    let enc = rescale(materialize(&encoder_layout(&cfg), true, &mut prng).unwrap(), &mut prng);
    let cls = rescale(
        materialize(&classification_decoder_layout(&cfg, "act", 1, 3), true, &mut prng).unwrap(),
        &mut prng,
    );
    let gen = rescale(materialize(&generative_decoder_layout(&cfg, "dst", 1), true, &mut prng).unwrap(), &mut prng);
    let x = r(&[3, cfg.d_model]);
    let mem = r(&[4, cfg.d_model]);
    out.push((
        "multi_head_attention",
        gradcheck_store(&enc, seed, 24, |g, s| {
            let w = AttnWeights::load(g, s, "encoder.layer0.self_attn").unwrap();
            let q = g.constant(x.clone());
            let kv = g.constant(mem.clone());
            let mask = AttnMask::new(3, 4, vec![true, false, true, true, true, true, false, true, true, true, true, false]).unwrap();
            multi_head_attention(g, &w, q, kv, kv, &mask, 2).unwrap()
        }),
    ));
    let ids = [1usize, 5, 7, 2];
    out.push((
        "encoder",
        gradcheck_store(&enc, seed, 16, |g, s| encoder_graph(g, &cfg, s, &ids).unwrap()),
    ));
    let mut both = enc.clone();
    for (n, t) in cls.iter() {
        both.insert(n, t.clone()).unwrap();
    }
    out.push((
        "classification_decoder",
        gradcheck_store(&both, seed, 16, |g, s| {
            let m = encoder_graph(g, &cfg, s, &ids).unwrap();
            classification_decoder_graph(g, &cfg, s, "act", 1, m, &[true; 4]).unwrap()
        }),
    ));
    let mut both = enc.clone();
    for (n, t) in gen.iter() {
        both.insert(n, t.clone()).unwrap();
    }
    out.push((
        "generative_decoder",
        gradcheck_store(&both, seed, 16, |g, s| {
            let m = encoder_graph(g, &cfg, s, &ids).unwrap();
            generative_decoder_graph(g, &cfg, s, s, "dst", 1, &[1, 9, 4], m, &[true; 4]).unwrap()
        }),
    ));
    out
}

// ── Brute-force metric oracles ───────────────────────────────────────

use autodial::data::BeliefState;
use std::collections::BTreeSet;

pub type RawBelief = Vec<(String, String, String)>;

fn canon(s: &str) -> String {
    s.to_lowercase().split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Canonical triplets by a separate route: a linear scan where the last value
/// written for a `(domain, slot)` wins, returned as a sorted list.
pub fn brute_canonical(raw: &RawBelief) -> Vec<(String, String, String)> {
    let mut out: Vec<(String, String, String)> = Vec::new();
    for (d, s, v) in raw {
        let (d, s, v) = (canon(d), canon(s), canon(v));
        if d.is_empty() || s.is_empty() || v.is_empty() {
            continue;
        }
        out.retain(|(a, b, _)| !(a == &d && b == &s));
        out.push((d, s, v));
    }
    out.sort();
    out
}

pub fn brute_jga(pred: &[RawBelief], gold: &[RawBelief]) -> f64 {
    let mut hits = 0;
    for i in 0..pred.len() {
        if brute_canonical(&pred[i]) == brute_canonical(&gold[i]) {
            hits += 1;
        }
    }
    hits as f64 / pred.len() as f64
}

pub fn brute_em(pred: &[Vec<String>], gold: &[Vec<String>]) -> f64 {
    let mut hits = 0;
    for i in 0..pred.len() {
        let contains_all = |a: &[String], b: &[String]| a.iter().all(|x| b.contains(x));
        if contains_all(&pred[i], &gold[i]) && contains_all(&gold[i], &pred[i]) {
            hits += 1;
        }
    }
    hits as f64 / pred.len() as f64
}

pub fn to_belief(raw: &RawBelief) -> BeliefState {
    BeliefState::from_triplets(raw.iter().map(|(d, s, v)| (d.as_str(), s.as_str(), v.as_str())))
}

pub fn to_set(xs: &[String]) -> BTreeSet<String> {
    xs.iter().cloned().collect()
}

fn raw_belief(rng: &mut ChaCha8Rng) -> RawBelief {
    const DOMAINS: [&str; 3] = ["hotel", "Hotel", "taxi"];
    const SLOTS: [&str; 3] = ["area", " AREA", "day"];
    const VALUES: [&str; 4] = ["north", "North ", "kings  lynn", "kings lynn"];
    (0..rng.random_range(0..4))
        .map(|_| {
            (
                DOMAINS[rng.random_range(0..3)].to_string(),
                SLOTS[rng.random_range(0..3)].to_string(),
                VALUES[rng.random_range(0..4)].to_string(),
            )
        })
        .collect()
}

fn raw_labels(rng: &mut ChaCha8Rng) -> Vec<String> {
    const LABELS: [&str; 4] = ["a", "b", "c", "d"];
    (0..rng.random_range(0..4)).map(|_| LABELS[rng.random_range(0..4)].to_string()).collect()
}

/// Number of `(jga, exact_match)` disagreements with the brute-force oracles
/// over `cases` random small inputs.
pub fn metric_disagreements(seed: u64, cases: usize) -> usize {
    use autodial::metrics::{exact_match_accuracy, joint_goal_accuracy};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bad = 0;
    for _ in 0..cases {
        let n = rng.random_range(1..6);
        let pred: Vec<RawBelief> = (0..n).map(|_| raw_belief(&mut rng)).collect();
        // Gold sometimes copies a prediction so matches actually occur.
        let gold: Vec<RawBelief> = pred
            .iter()
            .map(|p| if rng.random_bool(0.4) { p.clone() } else { raw_belief(&mut rng) })
            .collect();
        let pb: Vec<BeliefState> = pred.iter().map(to_belief).collect();
        let gb: Vec<BeliefState> = gold.iter().map(to_belief).collect();
        if joint_goal_accuracy(&pb, &gb).unwrap() != brute_jga(&pred, &gold) {
            bad += 1;
        }
        let lp: Vec<Vec<String>> = (0..n).map(|_| raw_labels(&mut rng)).collect();
        let lg: Vec<Vec<String>> = lp
            .iter()
            .map(|p| if rng.random_bool(0.4) { p.clone() } else { raw_labels(&mut rng) })
            .collect();
        let sp: Vec<_> = lp.iter().map(|x| to_set(x)).collect();
        let sg: Vec<_> = lg.iter().map(|x| to_set(x)).collect();
        if exact_match_accuracy(&sp, &sg).unwrap() != brute_em(&lp, &lg) {
            bad += 1;
        }
    }
    bad
}
