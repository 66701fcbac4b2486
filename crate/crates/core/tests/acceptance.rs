//! Desk-scale acceptance run. Prints one PASS/FAIL line per criterion.
//!
//! Empirical criteria (1-5) are reported, not asserted; the process only
//! fails when a step errors or an exact criterion (6-8) fails.

mod common;

use std::collections::BTreeMap;
use std::fs;
use std::path::PathBuf;
use std::time::Instant;

use common::*;
use dse_core::evalharness::{run_with_config, EvaluationReport, ExperimentConfig, GeneratorMetrics};
use dse_core::graph::{serialize_dataset, EdgeMask};
use dse_core::predictor::{self, Predictor};
use dse_core::tr3::{self, Tr3Config};

const DESK: &str = include_str!("../../../configs/desk.toml");

struct Outcome {
    id: usize,
    name: &'static str,
    pass: bool,
    detail: String,
}

fn line(o: &Outcome) {
    let verdict = if o.pass { "PASS" } else { "FAIL" };
    println!("criterion {} [{verdict}] {}: {}", o.id, o.name, o.detail);
}

fn rows<'a>(r: &'a EvaluationReport, variant: &str) -> BTreeMap<u64, &'a GeneratorMetrics> {
    r.generators.iter().filter(|g| g.variant == variant).map(|g| (g.seed, g)).collect()
}

fn main() {
    let started = Instant::now();
    let work = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    fs::create_dir_all(&work).unwrap();
    let mut cfg = ExperimentConfig::from_toml(DESK).unwrap();
    let mut outcomes = Vec::new();

    // 1. Predictor quality and runtime.
    let tr3_cfg = Tr3Config {
        num_graphs: 3000,
        ..cfg.data.tr3.clone()
    };
    let data = tr3::generate_dataset(&tr3_cfg).unwrap();
    let data_path = work.join("tr3.bin");
    fs::write(&data_path, serialize_dataset(&data)).unwrap();
    let t = Instant::now();
    let model = predictor::train(&data, &cfg.predictor.config).unwrap();
    let train_secs = t.elapsed().as_secs_f64();
    let ckpt_path = work.join("predictor.ckpt");
    model.to_checkpoint().save(&ckpt_path).unwrap();
    let acc = model.metrics.test_accuracy.unwrap();
    outcomes.push(Outcome {
        id: 1,
        name: "predictor quality",
        pass: acc >= 0.90 && train_secs <= 600.0,
        detail: format!("test accuracy {acc:.4} (>= 0.90), training {train_secs:.0}s on 3000 graphs (<= 600s)"),
    });
    line(outcomes.last().unwrap());

    // 2. OOD gap of ground-truth removal on held-out graphs.
    outcomes.push(ood_gap(&model, &data));
    line(outcomes.last().unwrap());

    // 3-5. Full pipeline from the desk config on the same data and predictor.
    cfg.data.path = Some(data_path);
    cfg.predictor.checkpoint = Some(ckpt_path);
    let run_dir = work.join("run");
    let t = Instant::now();
    let report = run_with_config(&cfg, &work, &run_dir, DESK.as_bytes()).unwrap();
    let pipeline_secs = t.elapsed().as_secs_f64() + train_secs;
    for o in [generator_validity(&report), deconfounding(&report), ablations(&report)] {
        line(&o);
        outcomes.push(o);
    }

    // 6. Estimator oracle.
    let r = estimator_oracle();
    outcomes.push(Outcome {
        id: 6,
        name: "estimator correctness",
        pass: r.max_err_reduced <= 1e-6 && r.max_err_weighted <= 1e-6 && r.k1_bit_exact,
        detail: format!(
            "{} three-node cases: max |reduced - enumeration| {:.2e}, max |weighted - enumeration| {:.2e} (<= 1e-6); K=1 weighted == reduced bit-exactly: {}",
            r.cases, r.max_err_reduced, r.max_err_weighted, r.k1_bit_exact
        ),
    });
    line(outcomes.last().unwrap());

    // 7. Numerical suites.
    let reparam = reparameterization_check();
    let pred_grad = predictor_gradient_check();
    let kl = kl_monte_carlo(100_000);
    let softmax = softmax_error();
    let forced = forced_inclusion_rate(20);
    let (v25, v400) = variance_scaling(60);
    outcomes.push(Outcome {
        id: 7,
        name: "numerical suites",
        pass: reparam <= 1e-3 && pred_grad <= 1e-3 && kl <= 0.02 && softmax <= 1e-6 && forced == 1.0 && v400 <= v25 / 8.0,
        detail: format!(
            "reparameterisation rel err {reparam:.2e}, predictor gradient rel err {pred_grad:.2e} (<= 1e-3); KL MC rel err {kl:.4} (<= 0.02); softmax {softmax:.1e} (<= 1e-6); forced inclusion {:.1}%; var n=25 {v25:.3e}, n=400 {v400:.3e} (ratio {:.1} >= 8)",
            forced * 100.0,
            v25 / v400
        ),
    });
    line(outcomes.last().unwrap());

    // 8. Determinism and round-trips.
    let same = identical_reruns(&tiny_experiment());
    let rt = roundtrips_exact();
    outcomes.push(Outcome {
        id: 8,
        name: "determinism and round-trips",
        pass: same && rt,
        detail: format!("identical configs give byte-identical artifacts: {same}; graph/dataset/checkpoint round-trips exact: {rt}"),
    });
    line(outcomes.last().unwrap());

    let total = started.elapsed().as_secs_f64();
    println!(
        "desk pipeline (data, predictor, generators, evaluation, report): {pipeline_secs:.0}s (limit 3600s); acceptance total {total:.0}s; artifacts in {}",
        run_dir.display()
    );
    let passed = outcomes.iter().filter(|o| o.pass).count();
    println!("acceptance: {passed}/{} criteria pass", outcomes.len());
    let exact_failed: Vec<usize> = outcomes.iter().filter(|o| o.id >= 6 && !o.pass).map(|o| o.id).collect();
    assert!(exact_failed.is_empty(), "exact criteria failed: {exact_failed:?}");
}

fn ood_gap(model: &Predictor, data: &[dse_core::Graph]) -> Outcome {
    let test: std::collections::BTreeSet<&str> = model.metrics.test_ids.iter().map(String::as_str).collect();
    let (mut full, mut re, mut n) = (0.0, 0.0, 0usize);
    for g in data.iter().filter(|g| test.contains(g.id())) {
        let Some(gt) = EdgeMask::ground_truth(g) else { continue };
        full += model.forward(g).unwrap()[g.label()];
        re += model.importance_removal(&gt, g, g.label()).unwrap();
        n += 1;
    }
    let (full, re) = (full / n as f64, re / n as f64);
    Outcome {
        id: 2,
        name: "OOD gap",
        pass: n >= 500 && re <= full - 0.30,
        detail: format!(
            "{n} held-out graphs: mean f(G)[y] {full:.3}, mean Imp_re(ground truth) {re:.3}, gap {:.3} (>= 0.30)",
            full - re
        ),
    }
}

fn generator_validity(r: &EvaluationReport) -> Outcome {
    let (cv, rnd) = (rows(r, "cvgae"), rows(r, "random"));
    let mut parts = Vec::new();
    let mut pass = cv.len() >= 3;
    for (seed, c) in &cv {
        let b = rnd[seed];
        let ok = c.val > 0.0 && c.val > b.val && c.fid < b.fid;
        pass &= ok;
        parts.push(format!(
            "seed {seed}: VAL {:.3} vs random {:.3}, FID {:.4} vs random {:.4}",
            c.val, b.val, c.fid, b.fid
        ));
    }
    Outcome {
        id: 3,
        name: "generator validity",
        pass,
        detail: parts.join("; "),
    }
}

fn deconfounding(r: &EvaluationReport) -> Outcome {
    let better = r
        .explainers
        .values()
        .filter(|s| matches!((s.rho_dse.value, s.rho_re.value), (Some(d), Some(e)) if d > e))
        .count();
    let rho: Vec<String> = r
        .explainers
        .iter()
        .map(|(k, s)| format!("{k} {:.3}/{:.3}", s.rho_re.value.unwrap_or(f64::NAN), s.rho_dse.value.unwrap_or(f64::NAN)))
        .collect();
    let (sre, sdse) = (r.spearman_re.value, r.spearman_dse.value);
    let spearman_ok = matches!((sdse, sre), (Some(d), Some(e)) if d > e);
    Outcome {
        id: 4,
        name: "deconfounding benefit",
        pass: better >= 4 && spearman_ok,
        detail: format!(
            "rho_dse > rho_re for {better}/6 explainers (>= 4) [rho_re/rho_dse: {}]; Spearman vs precision ranking: DSE {:.3}, removal {:.3}",
            rho.join(", "),
            sdse.unwrap_or(f64::NAN),
            sre.unwrap_or(f64::NAN)
        ),
    }
}

fn ablations(r: &EvaluationReport) -> Outcome {
    let (full, no_c, no_p) = (rows(r, "cvgae"), rows(r, "cvgae_no_contrastive"), rows(r, "cvgae_no_penalty"));
    let mut pass = full.len() >= 3;
    let mut parts = Vec::new();
    for (seed, f) in &full {
        let (c, p) = (no_c[seed].val, no_p[seed].val);
        pass &= f.val >= c && f.val >= p;
        parts.push(format!("seed {seed}: full {:.3}, gamma=0 {c:.3}, no penalty {p:.3}", f.val));
    }
    Outcome {
        id: 5,
        name: "ablation ordering",
        pass,
        detail: parts.join("; "),
    }
}
