//! One PASS/FAIL line per acceptance criterion. Criteria 7 and 8 share a
//! desk-scale experiment and take several minutes on one core.

use std::path::Path;
use std::time::Instant;

use difficulty_moe::adapt::{
    adapt, adapt_forward, build_family, combined_loss, reorder_checkpoint, AdaptConfig,
    AdaptedModel, ReorderedModel, Routing,
};
use difficulty_moe::analysis::{analyze, expert_usage, full_params, routed_forward, RoutePolicy};
use difficulty_moe::autodiff::{Activation, Graph};
use difficulty_moe::config::RunConfig;
use difficulty_moe::corpus::{calibration_batches, eval_batches, TokenBatch};
use difficulty_moe::gradcheck::check_gradients;
use difficulty_moe::labels::{derive_labels, DifficultyLabels, SimilarityMatrix};
use difficulty_moe::model::{DenseModel, ModelConfig, ParamRole};
use difficulty_moe::nested::{importance_scores, reorder_mlp, NestedMlp};
use difficulty_moe::pretrain::{heldout_loss, pretrain};
use difficulty_moe::router::router_param_count;
use difficulty_moe::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<(bool, String), Box<dyn std::error::Error>>;

fn random_model(seed: u64, vocab: usize, d: usize, h: usize, layers: usize) -> DenseModel<f64> {
    DenseModel::init(ModelConfig {
        vocab_size: vocab,
        embed_dim: d,
        hidden_dim: h,
        num_layers: layers,
        num_heads: 4,
        max_seq_len: 32,
        activation: Activation::Silu,
        seed,
    })
    .expect("valid config")
}

fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<f64> {
    Tensor::new(
        vec![rows, cols],
        (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

fn c1_router_arithmetic() -> Outcome {
    let n = router_param_count(4096, 256, 4, 32);
    Ok((
        n == 33_587_200,
        format!("router_param_count(4096, 256, 4, 32) = {n}"),
    ))
}

fn c2_nesting_identity() -> Outcome {
    let dense = DenseModel::<f32>::init(ModelConfig {
        vocab_size: 20,
        embed_dim: 32,
        hidden_dim: 64,
        num_layers: 2,
        num_heads: 4,
        max_seq_len: 32,
        activation: Activation::Silu,
        seed: 11,
    })?;
    let base = ReorderedModel {
        model: dense,
        scores: Vec::new(),
    };
    let model = AdaptedModel::from_base(&base, &AdaptConfig::default())?;
    let full = model.num_experts() - 1;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (batch, seq) = (10, 32);
    let mut mismatches = 0;
    for _ in 0..10 {
        let b = TokenBatch {
            tokens: (0..batch * seq).map(|_| rng.gen_range(0..20)).collect(),
            batch,
            seq,
        };
        let want = model.base.forward_dense(&b.tokens, batch, seq)?;
        let mut forced = DifficultyLabels::new(full + 1, 2);
        forced.per_layer = vec![vec![full; batch * seq]; 2];
        let mut g = Graph::new();
        let f = adapt_forward(&mut g, &model, &b, 0.8, Routing::Fixed(&forced), &|_| false)?;
        let routed = routed_forward(&model, &b, RoutePolicy::Forced(full))?;
        mismatches += usize::from(g.value(f.logits).data() != want.data());
        mismatches += usize::from(routed.logits.data() != want.data());
    }
    Ok((
        mismatches == 0,
        format!("100 sequences, {mismatches} mismatching batches (adapted and routed paths)"),
    ))
}

fn c3_reorder_invariance() -> Outcome {
    let dense = random_model(3, 16, 32, 96, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let calib: Vec<usize> = (0..2048).map(|_| rng.gen_range(0..16)).collect();
    let scores = importance_scores(&dense, &calibration_batches(&calib, 0.5, 4, 32, 3)?)?;
    let x = random_tensor(&mut rng, 1000, 32);
    let mut worst = 0.0f64;
    let mut moved = false;
    for (blk, s) in dense.blocks.iter().zip(&scores) {
        let mlp = NestedMlp::new(blk.w_in.clone(), blk.w_out.clone(), 4, Activation::Silu)?;
        let re = reorder_mlp(&mlp, s)?;
        moved |= re.w_in != mlp.w_in;
        let (a, b) = (mlp.expert_forward(&x, 3)?, re.expert_forward(&x, 3)?);
        let scale = a.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let err = a
            .data()
            .iter()
            .zip(b.data())
            .fold(0.0f64, |m, (p, q)| m.max((p - q).abs()));
        worst = worst.max(err / scale);
    }
    Ok((
        worst <= 1e-10 && moved,
        format!("max relative deviation {worst:.2e} over 1000 tokens, 2 layers"),
    ))
}

fn c4_full_expert_pinned() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    for _ in 0..5 {
        let w_in = random_tensor(&mut rng, 128, 32);
        let w_out = random_tensor(&mut rng, 32, 128);
        let mlp = NestedMlp::new(w_in, w_out, 4, Activation::Silu)?;
        let x = random_tensor(&mut rng, 200, 32);
        let s = SimilarityMatrix::from_outputs(&mlp.all_expert_outputs(&x)?)?;
        for b in 0..s.rows {
            worst = worst.max((s.row(b)[3] - 1.0).abs());
        }
    }
    // x = 0 gives silu(0) = 0 in every unit, so every output is exactly zero.
    let w_in = random_tensor(&mut rng, 128, 32);
    let w_out = random_tensor(&mut rng, 32, 128);
    let mlp = NestedMlp::new(w_in, w_out, 4, Activation::Silu)?;
    let mut x = random_tensor(&mut rng, 3, 32);
    x.data_mut()[32..64].fill(0.0);
    let s = SimilarityMatrix::from_outputs(&mlp.all_expert_outputs(&x)?)?;
    let fallback = s.row(1).iter().all(|&v| v == 1.0) && derive_labels(&s, 0.9)?[1] == 0;
    Ok((
        worst <= 1e-6 && fallback,
        format!("max |S[:,E-1] - 1| = {worst:.2e} over 1000 tokens; zero-output token fallback ok: {fallback}"),
    ))
}

fn c5_label_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (rows, e) = (100_000, 4);
    let data: Vec<f64> = (0..rows * e).map(|_| rng.gen_range(-0.2..1.2)).collect();
    let s = SimilarityMatrix::new(rows, e, data)?;
    let mut mismatches = 0;
    let mut non_monotone = 0;
    let per_theta: Vec<Vec<usize>> = [0.5, 0.7, 0.9]
        .iter()
        .map(|&t| derive_labels(&s, t))
        .collect::<Result<_, _>>()?;
    for (labels, &theta) in per_theta.iter().zip(&[0.5, 0.7, 0.9]) {
        for (b, &l) in labels.iter().enumerate() {
            let mut want = e - 1;
            for k in 0..e {
                if s.row(b)[k] > theta {
                    want = k;
                    break;
                }
            }
            mismatches += usize::from(l != want);
        }
    }
    for ((a, b), c) in per_theta[0].iter().zip(&per_theta[1]).zip(&per_theta[2]) {
        non_monotone += usize::from(!(a <= b && b <= c));
    }
    Ok((
        mismatches == 0 && non_monotone == 0,
        format!("{mismatches} oracle mismatches, {non_monotone} monotonicity violations over 3 x 1e5 rows"),
    ))
}

fn c6_gradients() -> Outcome {
    let report = check_gradients(6)?;
    let (name, worst) =
        report.iter().cloned().fold(
            (String::new(), 0.0),
            |acc, (n, e)| if e > acc.1 { (n, e) } else { acc },
        );
    let failed: Vec<&str> = report
        .iter()
        .filter(|(_, e)| e.is_nan() || *e >= 1e-4)
        .map(|(n, _)| n.as_str())
        .collect();
    Ok((
        failed.is_empty(),
        format!(
            "{} checks, worst {worst:.2e} ({name}), failing: {failed:?}",
            report.len()
        ),
    ))
}

fn c9_gradient_isolation() -> Outcome {
    let base = ReorderedModel {
        model: random_model(9, 16, 32, 64, 2),
        scores: Vec::new(),
    };
    let model = AdaptedModel::from_base(&base, &AdaptConfig::default())?;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let batch = TokenBatch {
        tokens: (0..4 * 24).map(|_| rng.gen_range(0..16)).collect(),
        batch: 4,
        seq: 24,
    };
    let grads = |lambda_llm: f64,
                 lambda_router: f64|
     -> Result<(Vec<f64>, Vec<f64>), Box<dyn std::error::Error>> {
        let mut g = Graph::new();
        let f = adapt_forward(&mut g, &model, &batch, 0.8, Routing::TeacherForced, &|r| {
            matches!(r, ParamRole::Mlp | ParamRole::Router)
        })?;
        let loss = combined_loss(&mut g, f.llm_loss, f.router_loss, lambda_llm, lambda_router)?;
        g.backward(loss)?;
        let (mut router, mut mlp) = (Vec::new(), Vec::new());
        for ((_, role, _), (_, v)) in model.named_params().iter().zip(&f.bound.named) {
            let sink = match role {
                ParamRole::Router => &mut router,
                ParamRole::Mlp => &mut mlp,
                _ => continue,
            };
            sink.extend_from_slice(g.grad(*v).ok_or("missing gradient")?);
        }
        Ok((router, mlp))
    };
    let (router_a, mlp_a) = grads(0.2, 0.0)?;
    let (router_b, mlp_b) = grads(0.0, 1.0)?;
    let zero = |v: &[f64]| v.iter().all(|&x| x == 0.0);
    let live = |v: &[f64]| v.iter().any(|&x| x != 0.0);
    let ok = zero(&router_a) && live(&mlp_a) && zero(&mlp_b) && live(&router_b);
    Ok((
        ok,
        format!(
            "lambda_router=0: router grads zero {}, mlp grads live {}; lambda_llm=0: mlp grads zero {}, router grads live {}",
            zero(&router_a),
            live(&mlp_a),
            zero(&mlp_b),
            live(&router_b)
        ),
    ))
}

struct Desk {
    family: Vec<(f64, difficulty_moe::analysis::AnalysisReport, usize)>,
    default_entropy: f64,
    ablated_entropy: f64,
    seconds: f64,
    ablation_seconds: f64,
}

fn desk_experiment() -> Result<Desk, Box<dyn std::error::Error>> {
    let start = Instant::now();
    let cfg = RunConfig::default();
    let corpus = cfg.load_corpus(None)?;
    eprintln!(
        "desk: {} train / {} held-out tokens, vocab {}",
        corpus.train.len(),
        corpus.heldout.len(),
        corpus.vocab.size()
    );
    let pre = pretrain::<f32>(
        &corpus.train,
        cfg.model_config(corpus.vocab.size()),
        &cfg.pretrain_config(),
    )?;
    let held = heldout_loss(
        &pre.model,
        &corpus.heldout,
        cfg.eval.seq_len,
        cfg.eval.max_windows,
    )?;
    eprintln!(
        "desk: pretrained {} steps, held-out loss {held:.3} = {:.3} ln V ({:.0}s)",
        pre.curve.len(),
        held / (corpus.vocab.size() as f64).ln(),
        start.elapsed().as_secs_f64()
    );
    let calib = calibration_batches(
        &corpus.train,
        cfg.reorder.calib_fraction,
        8,
        cfg.reorder.calib_seq_len,
        cfg.seed,
    )?;
    let base = reorder_checkpoint(&pre.model, &calib)?;
    let eval = eval_batches(
        &corpus.heldout,
        cfg.eval.batch_size,
        cfg.eval.seq_len,
        cfg.eval.max_windows,
    );
    let adapt_cfg = cfg.adapt_config();
    let mut family = Vec::new();
    let mut default_run = None;
    for outcome in build_family(&base, &corpus.train, &cfg.adapt.thetas, &adapt_cfg)? {
        let theta = outcome.model.meta.theta;
        let report = analyze(&outcome.model, &eval, theta)?;
        eprintln!(
            "desk: theta {theta}: accuracy {:.3} vs majority {:.3}, activated {:.0} of {}, ppl {:.3} routed / {:.3} dense ({:.0}s)",
            report.metrics.accuracy,
            report.metrics.majority_baseline,
            report.metrics.activated_params,
            report.metrics.full_params,
            report.metrics.perplexity_routed,
            report.metrics.perplexity_dense,
            start.elapsed().as_secs_f64()
        );
        let full = full_params(&outcome.model);
        if theta == adapt_cfg.theta {
            default_run = Some(outcome.model);
        }
        family.push((theta, report, full));
    }
    let seconds = start.elapsed().as_secs_f64();
    let default_run = default_run.ok_or("default theta missing from the family")?;
    let ablation_start = Instant::now();
    let ablated_cfg = AdaptConfig {
        ablation_mode: true,
        lambda_router: 0.0,
        ..adapt_cfg
    };
    let ablated = adapt(&base, &corpus.train, &ablated_cfg)?;
    let default_usage = expert_usage(&default_run, &eval)?;
    let ablated_usage = expert_usage(&ablated.model, &eval)?;
    eprintln!("desk: usage with router loss {:?}", default_usage.fractions);
    eprintln!("desk: usage ablated          {:?}", ablated_usage.fractions);
    Ok(Desk {
        family,
        default_entropy: default_usage.mean_entropy(),
        ablated_entropy: ablated_usage.mean_entropy(),
        seconds,
        ablation_seconds: ablation_start.elapsed().as_secs_f64(),
    })
}

fn c7_desk(desk: &Desk) -> Outcome {
    let mut notes = Vec::new();
    let mut ok = desk.seconds <= 30.0 * 60.0;
    let mut prev = 0.0;
    for (theta, report, full) in &desk.family {
        let m = &report.metrics;
        let a = m.accuracy > m.majority_baseline;
        let dominance = report.confusion.diagonal_dominance();
        let b = dominance.iter().all(|d| d.unwrap_or(true));
        let empty: Vec<usize> = dominance
            .iter()
            .enumerate()
            .filter(|(_, d)| d.is_none())
            .map(|(i, _)| i)
            .collect();
        let c = m.activated_params >= prev && m.activated_params <= *full as f64;
        prev = m.activated_params;
        ok &= a && b && c;
        notes.push(format!(
            "theta {theta}: (a) {:.3} > {:.3} {a}, (b) diagonal {b} (empty rows {empty:?}), (c) {:.0} <= {full} monotone {c}",
            m.accuracy, m.majority_baseline, m.activated_params
        ));
    }
    notes.push(format!("{:.0}s", desk.seconds));
    Ok((ok, notes.join("; ")))
}

fn c8_ablation(desk: &Desk) -> Outcome {
    Ok((
        desk.ablated_entropy < desk.default_entropy && desk.ablation_seconds <= 15.0 * 60.0,
        format!(
            "mean usage entropy ablated {:.4} vs router loss {:.4} ({:.0}s)",
            desk.ablated_entropy, desk.default_entropy, desk.ablation_seconds
        ),
    ))
}

fn run_pipeline(dir: &Path) -> Result<(), Box<dyn std::error::Error>> {
    let config = dir.join("cfg.json");
    std::fs::write(
        &config,
        r#"{
  "synthetic_chars": 40000,
  "seed": 10,
  "model": {"embed_dim": 16, "hidden_dim": 32, "num_layers": 2, "num_heads": 2, "max_seq_len": 16},
  "pretrain": {"steps": 20, "seq_len": 16},
  "reorder": {"calib_fraction": 0.01, "calib_seq_len": 16},
  "adapt": {"steps": 10, "seq_len": 16, "router_hidden": 8, "thetas": [0.7, 0.9]},
  "eval": {"seq_len": 16, "max_windows": 16}
}"#,
    )?;
    let out = dir.join("run");
    let run = |args: &[&str]| -> Result<(), Box<dyn std::error::Error>> {
        let mut argv = vec!["dmoe"];
        argv.extend_from_slice(args);
        argv.extend_from_slice(&[
            "--config",
            config.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ]);
        match difficulty_moe::cli::run(argv) {
            0 => Ok(()),
            code => Err(format!("{args:?} exited with {code}").into()),
        }
    };
    let at = |name: &str| out.join(name).to_str().unwrap().to_string();
    run(&["pretrain"])?;
    run(&["reorder", "--ckpt", &at("dense.ckpt")])?;
    run(&["family", "--ckpt", &at("reordered.ckpt")])?;
    run(&["eval", "--ckpt", &at("adapted_theta0.7.ckpt")])?;
    run(&["analyze", "--ckpt", &at("adapted_theta0.9.ckpt")])?;
    run(&["ablate", "--ckpt", &at("reordered.ckpt")])?;
    Ok(())
}

fn c10_reproducibility() -> Outcome {
    let (a, b) = (tempfile::tempdir()?, tempfile::tempdir()?);
    run_pipeline(a.path())?;
    run_pipeline(b.path())?;
    let mut names: Vec<String> = std::fs::read_dir(a.path().join("run"))?
        .map(|e| e.map(|e| e.file_name().to_string_lossy().into_owned()))
        .collect::<Result<_, _>>()?;
    names.sort();
    let differing: Vec<&String> = names
        .iter()
        .filter(|n| {
            std::fs::read(a.path().join("run").join(n)).ok()
                != std::fs::read(b.path().join("run").join(n)).ok()
        })
        .collect();
    Ok((
        differing.is_empty() && names.iter().any(|n| n.ends_with(".ckpt")),
        format!(
            "{} artifacts compared, differing: {differing:?}",
            names.len()
        ),
    ))
}

fn report(n: usize, start: Instant, outcome: Outcome) -> bool {
    let secs = start.elapsed().as_secs_f64();
    match outcome {
        Ok((pass, detail)) => {
            println!(
                "criterion {n}: {} ({secs:.1}s) {detail}",
                if pass { "PASS" } else { "FAIL" }
            );
            pass
        }
        Err(e) => {
            println!("criterion {n}: FAIL ({secs:.1}s) error: {e}");
            false
        }
    }
}

fn main() {
    let quick: [(usize, fn() -> Outcome); 7] = [
        (1, c1_router_arithmetic),
        (2, c2_nesting_identity),
        (3, c3_reorder_invariance),
        (4, c4_full_expert_pinned),
        (5, c5_label_oracle),
        (6, c6_gradients),
        (9, c9_gradient_isolation),
    ];
    let mut all = true;
    for (n, f) in quick {
        all &= report(n, Instant::now(), f());
    }
    let start = Instant::now();
    match desk_experiment() {
        Ok(desk) => {
            all &= report(7, start, c7_desk(&desk));
            all &= report(8, start, c8_ablation(&desk));
        }
        Err(e) => {
            for n in [7, 8] {
                all &= report(n, start, Err(e.to_string().into()));
            }
        }
    }
    all &= report(10, Instant::now(), c10_reproducibility());
    if !all {
        std::process::exit(1);
    }
}
