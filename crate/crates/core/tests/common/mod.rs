//! Checks shared by the integration tests and the acceptance target.
#![allow(dead_code)]

use std::collections::BTreeSet;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use dse_core::autodiff::Tape;
use dse_core::cvgae::{kl_divergence, Batch, Cvgae, GeneratorConfig, RandomGenerator, SurrogateGenerator};
use dse_core::frontdoor::{Dse, DseConfig, Estimator, Sampling};
use dse_core::graph::{all_pairs, Edge, EdgeMask, Graph};
use dse_core::predictor::{Predictor, PredictorConfig};
use dse_core::tr3::{self, Tr3Config};

pub fn ones(n: usize) -> Array2<f64> {
    Array2::ones((n, 1))
}

pub fn graph(id: &str, n: usize, edges: &[(usize, usize)], label: usize) -> Graph {
    Graph::new(id, n, edges.iter().copied(), ones(n), label, None).unwrap()
}

/// Untrained predictor with a random readout so outputs depend on structure.
pub fn toy_predictor(seed: u64) -> Predictor {
    let cfg = PredictorConfig {
        hidden_dim: 8,
        num_layers: 2,
        seed,
        ..Default::default()
    };
    let mut m = Predictor::new(cfg, 1, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
    m.params.init_glorot("readout.w", 8, 3, &mut rng);
    m.params.init_glorot("readout.b", 1, 3, &mut rng);
    m
}

/// Untrained CVGAE with every parameter drawn at random, so pair
/// probabilities vary across pairs and latent draws.
pub fn toy_generator(seed: u64) -> Cvgae {
    let cfg = GeneratorConfig {
        encode_dim: 4,
        critic_dim: 4,
        node_id_dim: 4,
        seed,
        ..Default::default()
    };
    let mut m = Cvgae::new(cfg, 1, 3).unwrap();
    let shapes: Vec<(String, (usize, usize))> = m.params.iter().map(|(k, v)| (k.clone(), v.dim())).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for (name, (r, c)) in shapes {
        m.params.init_glorot(&name, r, c, &mut rng);
    }
    m
}

pub fn small_tr3(num_graphs: usize, seed: u64) -> Vec<Graph> {
    tr3::generate_dataset(&Tr3Config {
        num_graphs,
        seed,
        ..Default::default()
    })
    .unwrap()
}

/// Every 3-node graph with every mask over it.
pub fn three_node_cases() -> Vec<(Graph, EdgeMask)> {
    let pairs = [(0, 1), (0, 2), (1, 2)];
    let mut out = Vec::new();
    for ebits in 1u32..8 {
        let edges: Vec<(usize, usize)> = (0..3).filter(|k| ebits >> k & 1 == 1).map(|k| pairs[k]).collect();
        let g = graph(&format!("tri{ebits}"), 3, &edges, (ebits % 3) as usize);
        for mbits in 0u32..(1 << edges.len()) {
            let sel: Vec<Edge> = (0..edges.len())
                .filter(|k| mbits >> k & 1 == 1)
                .map(|k| Edge::new(edges[k].0, edges[k].1))
                .collect();
            out.push((g.clone(), EdgeMask::from_selection(&g, sel).unwrap()));
        }
    }
    out
}

/// Every completion of `mask` by the free pairs, with its probability under
/// the generator's latent-mean pair probabilities.
fn completions(gen: &dyn SurrogateGenerator, g: &Graph, mask: &EdgeMask) -> Vec<(Graph, f64)> {
    let probs = gen.condition(g, mask).unwrap().mean();
    let n = g.node_count();
    let mut free = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if !mask.selected.contains(&Edge::new(i, j)) {
                free.push((i, j));
            }
        }
    }
    let mut out = Vec::new();
    for bits in 0u32..(1 << free.len()) {
        let mut edges: Vec<(usize, usize)> = mask.selected.iter().map(|e| (e.0, e.1)).collect();
        let mut p = 1.0;
        for (k, &(i, j)) in free.iter().enumerate() {
            let q = probs.get(i, j);
            if bits >> k & 1 == 1 {
                edges.push((i, j));
                p *= q;
            } else {
                p *= 1.0 - q;
            }
        }
        out.push((Graph::new(g.id(), n, edges, g.features().clone(), g.label(), None).unwrap(), p));
    }
    out
}

/// Brute-force `sum_{G*} P(G* | G_s) f(G*)[y]`.
pub fn reduced_oracle(pred: &Predictor, gen: &dyn SurrogateGenerator, g: &Graph, mask: &EdgeMask, y: usize) -> f64 {
    completions(gen, g, mask)
        .iter()
        .map(|(s, p)| p * pred.forward(s).unwrap()[y])
        .sum()
}

/// Outcome that depends on both the surrogate and the adjusted subgraph.
pub fn joint_outcome(pred: &Predictor, s: &Graph, sub: &EdgeMask, y: usize) -> f64 {
    let shared = sub.selected.iter().filter(|e| s.has_edge(**e)).count();
    pred.forward(s).unwrap()[y] * (1.0 + shared as f64) / (1.0 + sub.selected.len() as f64)
}

/// Brute-force weighted estimate: every surrogate, every pool member, weights
/// `P(G') / P(G' | G*)` with the posterior normalised over the pool.
pub fn weighted_oracle(dse: &Dse<'_>, g: &Graph, mask: &EdgeMask, y: usize, stream: &str) -> f64 {
    let pool = dse.adjustment_pool(g, mask, stream);
    let prior = 1.0 / pool.len() as f64;
    let mut total = 0.0;
    for (s, p) in completions(dse.generator, g, mask) {
        let lik: Vec<f64> = pool
            .iter()
            .map(|m| {
                let sub = s.with_edges(m.selected.iter().copied()).unwrap();
                let probs = dse.generator.condition_on(&s, &sub).unwrap().mean();
                all_pairs(s.node_count())
                    .iter()
                    .map(|e| {
                        let q = probs.get(e.0, e.1);
                        if m.selected.contains(e) {
                            q
                        } else {
                            1.0 - q
                        }
                    })
                    .product()
            })
            .collect();
        let z: f64 = lik.iter().sum();
        let raw: Vec<f64> = lik.iter().map(|l| prior / (l / z)).collect();
        let norm: f64 = raw.iter().sum();
        let inner: f64 = pool
            .iter()
            .zip(&raw)
            .map(|(m, w)| w / norm * joint_outcome(dse.predictor, &s, m, y))
            .sum();
        total += p * inner;
    }
    total
}

pub struct OracleReport {
    pub cases: usize,
    pub max_err_reduced: f64,
    pub max_err_weighted: f64,
    pub k1_bit_exact: bool,
}

pub fn estimator_oracle() -> OracleReport {
    let pred = toy_predictor(3);
    let gen = toy_generator(5);
    let exhaustive = DseConfig {
        sampling: Sampling::Exhaustive,
        pool_size: 4,
        ..Default::default()
    };
    let dse = Dse::new(&pred, &gen, exhaustive).unwrap();
    let (mut err_r, mut err_w) = (0.0f64, 0.0f64);
    let cases = three_node_cases();
    for (g, mask) in &cases {
        for y in 0..3 {
            let r = dse.reduced(g, mask, y, "oracle").unwrap();
            err_r = err_r.max((r - reduced_oracle(&pred, &gen, g, mask, y)).abs());
            let outcome = |s: &Graph, m: &EdgeMask| Ok(joint_outcome(&pred, s, m, y));
            let w = dse.weighted_with(g, mask, "oracle", &outcome).unwrap();
            err_w = err_w.max((w - weighted_oracle(&dse, g, mask, y, "oracle")).abs());
        }
    }

    let mut bit_exact = true;
    for estimator_seed in 0..3 {
        let cfg = DseConfig {
            pool_size: 1,
            num_surrogates: 20,
            seed: estimator_seed,
            ..Default::default()
        };
        let reduced = Dse::new(&pred, &gen, cfg.clone()).unwrap();
        let weighted = Dse::new(
            &pred,
            &gen,
            DseConfig {
                estimator: Estimator::Weighted,
                ..cfg
            },
        )
        .unwrap();
        for (g, mask) in &cases {
            let a = reduced.importance(g, mask, g.label(), "k1").unwrap();
            let b = weighted.importance(g, mask, g.label(), "k1").unwrap();
            bit_exact &= a.to_bits() == b.to_bits();
        }
    }
    OracleReport {
        cases: cases.len(),
        max_err_reduced: err_r,
        max_err_weighted: err_w,
        k1_bit_exact: bit_exact,
    }
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    diff / scale.max(1e-12)
}

/// Relative error between the tape gradient of the VAE loss with respect to
/// `(mu, log_sigma)` through `z = mu + exp(log_sigma) * eps` and central
/// differences, on a 5-node probe.
pub fn reparameterization_check() -> f64 {
    let gen = toy_generator(11);
    let g = graph("probe5", 5, &[(0, 1), (1, 2), (2, 3), (3, 4), (0, 4)], 1);
    let s = graph("probe5", 5, &[(0, 1)], 1);
    let batch = Batch::new(&[&g], &[&s], 3).unwrap();
    let d = gen.latent_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mu0 = Array2::from_shape_simple_fn((5, d), || rng.random_range(-1.0..1.0));
    let ls0 = Array2::from_shape_simple_fn((5, d), || rng.random_range(-0.5..0.5));
    let eps = Array2::from_shape_simple_fn((5, d), || rng.sample::<f64, _>(StandardNormal));

    let loss = |mu: &Array2<f64>, ls: &Array2<f64>| {
        let tape = Tape::new();
        let p = gen.params.bind_frozen(&tape);
        let t = gen.vae_terms(&tape, &p, &batch, tape.constant(mu.clone()), tape.constant(ls.clone()), &eps);
        t.recon.add(t.kl).item()
    };
    let tape = Tape::new();
    let p = gen.params.bind_frozen(&tape);
    let (mu, ls) = (tape.var(mu0.clone()), tape.var(ls0.clone()));
    let t = gen.vae_terms(&tape, &p, &batch, mu, ls, &eps);
    let grads = tape.grad(t.recon.add(t.kl), &[mu, ls]);
    let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
    let h = 1e-5;
    for (which, grad) in grads.iter().enumerate() {
        for idx in [(0, 0), (1, 3), (2, 1), (3, d - 1), (4, d / 2)] {
            let bump = |delta: f64| {
                let (mut m, mut l) = (mu0.clone(), ls0.clone());
                if which == 0 {
                    m[idx] += delta;
                } else {
                    l[idx] += delta;
                }
                loss(&m, &l)
            };
            analytic.push(grad.value()[idx]);
            numeric.push((bump(h) - bump(-h)) / (2.0 * h));
        }
    }
    rel_err(&analytic, &numeric)
}

/// Relative error of the predictor's parameter gradients (cross-entropy on a
/// small TR3 batch) against central differences.
pub fn predictor_gradient_check() -> f64 {
    let mut model = toy_predictor(21);
    let data = small_tr3(6, 2);
    let graphs: Vec<&Graph> = data.iter().collect();
    let loss = |m: &Predictor| {
        let tape = Tape::new();
        let p = m.params.bind_frozen(&tape);
        m.batch_loss(&tape, &p, &graphs).item()
    };
    let tape = Tape::new();
    let p = model.params.bind(&tape);
    let grads = p.grads(&tape, model.batch_loss(&tape, &p, &graphs));
    let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
    let h = 1e-5;
    for name in ["mp0.w_self", "mp0.w_nb", "mp1.w_nb", "readout.w", "readout.b"] {
        let shape = model.params.get(name).unwrap().dim();
        for idx in [(0, 0), (shape.0 - 1, shape.1 - 1), (shape.0 / 2, shape.1 / 2)] {
            let orig = model.params.get(name).unwrap()[idx];
            model.params.get_mut(name).unwrap()[idx] = orig + h;
            let up = loss(&model);
            model.params.get_mut(name).unwrap()[idx] = orig - h;
            let down = loss(&model);
            model.params.get_mut(name).unwrap()[idx] = orig;
            analytic.push(grads[name][idx]);
            numeric.push((up - down) / (2.0 * h));
        }
    }
    rel_err(&analytic, &numeric)
}

/// Relative error of the closed-form KL against a Monte-Carlo estimate of
/// `E_q[log q(z) - log p(z)]` with `samples` draws.
pub fn kl_monte_carlo(samples: usize) -> f64 {
    let mu = Array2::from_shape_vec((2, 2), vec![0.5, -1.0, 0.2, 0.8]).unwrap();
    let ls = Array2::from_shape_vec((2, 2), vec![-0.3, 0.2, 0.4, -0.1]).unwrap();
    let closed = kl_divergence(&mu, &ls);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut acc = 0.0;
    for _ in 0..samples {
        for (&m, &l) in mu.iter().zip(&ls) {
            let e: f64 = rng.sample(StandardNormal);
            let z = m + l.exp() * e;
            // log q - log p; the 2π terms cancel.
            acc += (-0.5 * e * e - l) - (-0.5 * z * z);
        }
    }
    let mc = acc / samples as f64;
    (mc - closed).abs() / closed
}

/// Largest `|sum p - 1|` over predictor outputs on TR3 graphs.
pub fn softmax_error() -> f64 {
    let model = toy_predictor(1);
    small_tr3(60, 9)
        .iter()
        .map(|g| (model.forward(g).unwrap().iter().sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max)
}

/// Fraction of surrogates that contain their mask's edges.
pub fn forced_inclusion_rate(samples_per_mask: usize) -> f64 {
    let gen = toy_generator(2);
    let data = small_tr3(30, 4);
    let (mut ok, mut total) = (0usize, 0usize);
    for (i, g) in data.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(i as u64);
        for ratio in [0.1, 0.3, 0.6] {
            let mask = dse_core::cvgae::random_mask(g, ratio, &mut rng);
            for _ in 0..samples_per_mask {
                let s = dse_core::cvgae::sample_surrogate(&gen, g, &mask, &mut rng).unwrap();
                let edges: BTreeSet<Edge> = s.edges.clone();
                ok += (s.contains_subgraph && mask.selected.is_subset(&edges)) as usize;
                total += 1;
            }
        }
    }
    ok as f64 / total as f64
}

fn sample_variance(xs: &[f64]) -> f64 {
    let m = xs.iter().sum::<f64>() / xs.len() as f64;
    xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64
}

/// `(var at n = 25, var at n = 400)` of the reduced estimator over repeated
/// sampling seeds.
pub fn variance_scaling(repeats: u64) -> (f64, f64) {
    let pred = toy_predictor(6);
    let data = small_tr3(3, 12);
    let g = &data[0];
    let mask = EdgeMask::ground_truth(g).unwrap();
    let run = |n: usize| {
        let xs: Vec<f64> = (0..repeats)
            .map(|seed| {
                let cfg = DseConfig {
                    num_surrogates: n,
                    seed,
                    ..Default::default()
                };
                Dse::new(&pred, &RandomGenerator, cfg)
                    .unwrap()
                    .reduced(g, &mask, g.label(), "var")
                    .unwrap()
            })
            .collect();
        sample_variance(&xs)
    };
    (run(25), run(400))
}

/// A pipeline small enough to run in a few seconds.
pub fn tiny_experiment() -> dse_core::evalharness::ExperimentConfig {
    use dse_core::evalharness::ExperimentConfig;
    let text = r#"
        [data]
        eval_graphs = 6
        [data.tr3]
        num_graphs = 45
        seed = 3
        [predictor]
        hidden_dim = 8
        max_epochs = 3
        [generator]
        seeds = [0, 1]
        ablations = true
        vgae_baseline = true
        fid_masks = 1
        metric_graphs = 4
        train_graphs = 12
        encode_dim = 4
        critic_dim = 4
        node_id_dim = 8
        batch_size = 8
        max_epochs = 1
        [explainers]
        maskopt_steps = 5
        [dse]
        num_surrogates = 3
        pool_size = 2
        [sweep]
        lambda = [1.0]
        gamma = [0.5]
    "#;
    ExperimentConfig::from_toml(text).unwrap()
}

pub const RUN_FILES: [&str; 11] = [
    "report.json",
    "table2.csv",
    "table4.csv",
    "fig2.csv",
    "fig2.svg",
    "losses.csv",
    "masks.jsonl",
    "records.jsonl",
    "predictor.ckpt",
    "generator.ckpt",
    "manifest.json",
];

/// Runs `cfg` twice into fresh directories; true when every artifact is
/// byte-identical.
pub fn identical_reruns(cfg: &dse_core::evalharness::ExperimentConfig) -> bool {
    use dse_core::evalharness::run_with_config;
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        run_with_config(cfg, d.path(), d.path(), b"cfg").unwrap();
    }
    RUN_FILES.iter().all(|f| {
        let a = std::fs::read(dirs[0].path().join(f)).unwrap();
        let b = std::fs::read(dirs[1].path().join(f)).unwrap();
        a == b
    })
}

/// Graph, dataset and checkpoint serialisation round-trips on TR3 data.
pub fn roundtrips_exact() -> bool {
    use dse_core::graph::{parse_dataset, parse_graph, serialize_dataset, serialize_graph};
    use dse_core::nn::Checkpoint;
    let data = small_tr3(30, 21);
    let graphs_ok = data.iter().all(|g| parse_graph(&serialize_graph(g)).unwrap() == *g)
        && parse_dataset(&serialize_dataset(&data)).unwrap() == data;
    let pred = toy_predictor(2);
    let gen = toy_generator(3);
    let ck_ok = [pred.to_checkpoint(), gen.to_checkpoint()].iter().all(|ck| {
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        back == *ck && back.to_bytes() == bytes
    });
    let pred_back = Predictor::from_checkpoint(&Checkpoint::from_bytes(&pred.to_checkpoint().to_bytes()).unwrap()).unwrap();
    let outputs_ok = data.iter().all(|g| pred_back.forward(g).unwrap() == pred.forward(g).unwrap());
    graphs_ok && ck_ok && outputs_ok
}
