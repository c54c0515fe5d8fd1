//! Acceptance gate: ten behavioral criteria, one pass/fail line each.
//! Every criterion runs even after an earlier failure, then the gate
//! panics if any failed.

use mcan_core::accounting::{count_params, estimate_flops};
use mcan_core::cascade::{CascadeStrategy, McaVariant};
use mcan_core::data::QuestionKind;
use mcan_core::feature::{FeatureSet, FeatureVar};
use mcan_core::io::config::{self, RunConfig};
use mcan_core::io::report::{determinism_view, render};
use mcan_core::io::{checkpoint, features};
use mcan_core::model::{forward_sample, ModelConfig, ModelParams, TokenSeq};
use mcan_core::rng::Rng;
use mcan_core::tape::Tape;
use mcan_core::tensor::Tensor;
use mcan_core::train::{grad_check, lr_at_epoch, train, Schedule, TrainOptions};
use mcan_core::units::{ga_unit, sa_unit, UnitCtx, UnitWeights};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

type Verdict = Result<String, String>;

/// Minimum advantage in final counting accuracy of the self-attention
/// composition over the pure guided one, per seed, pinned from baseline
/// runs of `configs/toy_count.toml` (observed margins 0.130, 0.173, and
/// 0.078 on the three seeds; runs are deterministic, so the pin only
/// guards against config drift).
const COUNTING_MARGIN: f64 = 0.05;
const COUNTING_SEEDS: [u64; 3] = [42, 43, 44];

fn workspace_path(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").join(rel)
}

fn small_config(
    variant: McaVariant,
    strategy: CascadeStrategy,
    d: usize,
    heads: usize,
    layers: usize,
) -> ModelConfig {
    ModelConfig {
        variant,
        strategy,
        layers,
        d,
        heads,
        d_x: 6,
        d_y: d,
        d_z: 10,
        answers: 5,
        vocab: 12,
        attn_bias: true,
        positional: true,
        dropout: 0.1,
        eps: 1e-9,
    }
}

fn random_scene(rng: &mut Rng, d_x: usize, mask: Vec<bool>) -> FeatureSet {
    let rows = mask.len();
    let data: Vec<f64> = (0..rows * d_x).map(|_| rng.normal(0.0, 1.0)).collect();
    FeatureSet::new(Tensor::from_vec(&[rows, d_x], data).unwrap(), mask).unwrap()
}

fn random_tokens(rng: &mut Rng, vocab: usize, mask: Vec<bool>) -> TokenSeq {
    let ids = mask
        .iter()
        .map(|&valid| if valid { rng.below(vocab) } else { 0 })
        .collect();
    TokenSeq {
        ids,
        mask,
    }
}

fn bit_eq(a: &Tensor, b: &Tensor) -> bool {
    a.shape() == b.shape()
        && a.data()
            .iter()
            .zip(b.data())
            .all(|(x, y)| x.to_bits() == y.to_bits())
}

/// Eval- or train-mode forward returning materialized (logits, alpha_x,
/// alpha_y) and the optional trace.
fn forward_values(
    cfg: &ModelConfig,
    params: &ModelParams<Tensor>,
    scene: &FeatureSet,
    tokens: &TokenSeq,
    rng: &Rng,
    training: bool,
    want_trace: bool,
) -> Result<(Tensor, Tensor, Tensor, Option<mcan_core::trace::AttentionTrace>), String> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let out = forward_sample(&mut tape, &bound, cfg, scene, tokens, rng, training, want_trace)
        .map_err(|e| e.to_string())?;
    Ok((
        tape.value(out.logits).clone(),
        tape.value(out.alpha_x).clone(),
        tape.value(out.alpha_y).clone(),
        out.trace,
    ))
}

fn gradient_integrity() -> Verdict {
    let mut worst_err = 0.0f64;
    let mut worst_at = String::new();
    for variant in McaVariant::ALL {
        for strategy in CascadeStrategy::ALL {
            let cfg = small_config(variant, strategy, 8, 2, 2);
            let report = grad_check(&cfg, 1e-5, 1e-4, 11).map_err(|e| e.to_string())?;
            if !report.pass {
                return Err(format!(
                    "{}/{}: block {} has max rel err {:.3e} (tol 1e-4)",
                    variant.as_str(),
                    strategy.as_str(),
                    report.worst_block,
                    report.max_rel_err
                ));
            }
            if report.max_rel_err > worst_err {
                worst_err = report.max_rel_err;
                worst_at = format!(
                    "{}/{} {}",
                    variant.as_str(),
                    strategy.as_str(),
                    report.worst_block
                );
            }
        }
    }
    Ok(format!(
        "6 variant/strategy combos at d=8 h=2 L=2; worst rel err {worst_err:.3e} at {worst_at}"
    ))
}

fn single_layer_strategy_equivalence() -> Verdict {
    let mut checked = 0;
    for seed in 0..10u64 {
        for variant in McaVariant::ALL {
            let stack = small_config(variant, CascadeStrategy::Stacking, 16, 2, 1);
            let encdec = ModelConfig {
                strategy: CascadeStrategy::EncoderDecoder,
                ..stack.clone()
            };
            let params = ModelParams::init(&stack, &Rng::from_seed(100 + seed));
            let mut data_rng = Rng::from_seed(200 + seed);
            let scene = random_scene(
                &mut data_rng,
                stack.d_x,
                vec![true, true, true, true, false],
            );
            let tokens = random_tokens(&mut data_rng, stack.vocab, vec![true, true, true, false]);
            for training in [false, true] {
                let rng = Rng::from_seed(300 + seed);
                let (la, axa, aya, _) =
                    forward_values(&stack, &params, &scene, &tokens, &rng, training, false)?;
                let (lb, axb, ayb, _) =
                    forward_values(&encdec, &params, &scene, &tokens, &rng, training, false)?;
                if !(bit_eq(&la, &lb) && bit_eq(&axa, &axb) && bit_eq(&aya, &ayb)) {
                    return Err(format!(
                        "{} seed {seed} training={training}: strategies disagree at L=1",
                        variant.as_str()
                    ));
                }
                checked += 1;
            }
        }
    }
    Ok(format!(
        "{checked} forwards bit-identical across strategies (10 seeds x 3 variants x eval/train)"
    ))
}

fn padding_invariance() -> Verdict {
    for variant in McaVariant::ALL {
        for strategy in CascadeStrategy::ALL {
            let cfg = ModelConfig {
                d_z: 24,
                answers: 7,
                ..small_config(variant, strategy, 32, 4, 6)
            };
            let params = ModelParams::init(&cfg, &Rng::from_seed(17));
            let mut data_rng = Rng::from_seed(18);
            let base_scene = random_scene(&mut data_rng, cfg.d_x, vec![true; 6]);
            let base_tokens = random_tokens(&mut data_rng, cfg.vocab, vec![true; 3]);

            // Garbage values in padded rows must not reach any output.
            let mut padded_feats = base_scene.features().data().to_vec();
            padded_feats.extend(std::iter::repeat(9.25).take(3 * cfg.d_x));
            let mut mask = vec![true; 6];
            mask.extend([false; 3]);
            let padded_scene = FeatureSet::new(
                Tensor::from_vec(&[9, cfg.d_x], padded_feats).unwrap(),
                mask,
            )
            .unwrap();
            let mut ids = base_tokens.ids.clone();
            ids.extend([0, 0]);
            let mut tmask = base_tokens.mask.clone();
            tmask.extend([false, false]);
            let padded_tokens = TokenSeq { ids, mask: tmask };

            let rng = Rng::from_seed(0);
            let (a, _, _, _) =
                forward_values(&cfg, &params, &base_scene, &base_tokens, &rng, false, false)?;
            let (b, _, _, _) =
                forward_values(&cfg, &params, &padded_scene, &padded_tokens, &rng, false, false)?;
            match a.max_abs_diff(&b) {
                Some(0.0) => {}
                diff => {
                    return Err(format!(
                        "{}/{}: padded forward moved logits by {diff:?}",
                        variant.as_str(),
                        strategy.as_str()
                    ))
                }
            }
        }
    }
    Ok("L=6 logits exactly unchanged by padded rows, all variants and strategies".into())
}

fn attention_row_contracts() -> Verdict {
    let mut rows_checked = 0usize;
    let mut rng = Rng::from_seed(31);
    for instance in 0..30 {
        let variant = McaVariant::ALL[instance % 3];
        let cfg = small_config(variant, CascadeStrategy::ALL[instance % 2], 16, 2, 2);
        let m_valid = 3 + rng.below(5);
        let n_valid = 2 + rng.below(3);
        let m_pad = rng.below(3);
        let n_pad = rng.below(2);
        let mut x_mask = vec![true; m_valid];
        x_mask.extend(vec![false; m_pad]);
        let mut y_mask = vec![true; n_valid];
        y_mask.extend(vec![false; n_pad]);
        let scene = random_scene(&mut rng, cfg.d_x, x_mask.clone());
        let tokens = random_tokens(&mut rng, cfg.vocab, y_mask.clone());
        let params = ModelParams::init(&cfg, &Rng::from_seed(400 + instance as u64));
        let (_, alpha_x, alpha_y, trace) = forward_values(
            &cfg,
            &params,
            &scene,
            &tokens,
            &Rng::from_seed(0),
            false,
            true,
        )?;
        let trace = trace.ok_or("trace missing")?;

        for record in &trace.records {
            let (_, key_domain) = record.unit.domains();
            let key_mask = if key_domain == 'x' { &x_mask } else { &y_mask };
            let matrix = &record.matrix;
            if matrix.cols() != key_mask.len() {
                return Err(format!(
                    "instance {instance}: {} map has {} cols for {} keys",
                    record.unit.as_str(),
                    matrix.cols(),
                    key_mask.len()
                ));
            }
            for r in 0..matrix.rows() {
                let row = &matrix.data()[r * matrix.cols()..(r + 1) * matrix.cols()];
                let sum: f64 = row.iter().sum();
                if (sum - 1.0).abs() > 1e-12 {
                    return Err(format!(
                        "instance {instance}: {} row {r} sums to {sum:.17}",
                        record.unit.as_str()
                    ));
                }
                for (c, &valid) in key_mask.iter().enumerate() {
                    if !valid && row[c] != 0.0 {
                        return Err(format!(
                            "instance {instance}: {} row {r} leaks {} into masked key {c}",
                            record.unit.as_str(),
                            row[c]
                        ));
                    }
                }
                rows_checked += 1;
            }
        }

        for (alpha, mask, tag) in [(&alpha_x, &x_mask, "alpha_x"), (&alpha_y, &y_mask, "alpha_y")] {
            let row = alpha.data();
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-12 {
                return Err(format!("instance {instance}: {tag} sums to {sum:.17}"));
            }
            for (c, &valid) in mask.iter().enumerate() {
                if !valid && row[c] != 0.0 {
                    return Err(format!("instance {instance}: {tag} leaks into masked row {c}"));
                }
            }
            rows_checked += 1;
        }
    }
    if rows_checked < 1000 {
        return Err(format!("only {rows_checked} rows checked, need >= 1000"));
    }
    Ok(format!(
        "{rows_checked} attention/reduction rows: sums within 1e-12 of 1, masked keys exactly 0"
    ))
}

fn unit_ctx() -> UnitCtx {
    UnitCtx {
        eps: 1e-9,
        dropout: 0.1,
        training: false,
    }
}

fn permute_rows(t: &Tensor, perm: &[usize]) -> Tensor {
    let cols = t.cols();
    let mut data = Vec::with_capacity(t.numel());
    for &r in perm {
        data.extend_from_slice(&t.data()[r * cols..(r + 1) * cols]);
    }
    Tensor::from_vec(&[perm.len(), cols], data).unwrap()
}

fn permutation_properties() -> Verdict {
    let d = 16;
    let mut worst = 0.0f64;
    let mut rng = Rng::from_seed(51);
    for instance in 0..10u64 {
        let weights = UnitWeights::init(&mut rng, d, 2, true, true);
        let x = Tensor::from_vec(
            &[6, d],
            (0..6 * d).map(|_| rng.normal(0.0, 1.0)).collect(),
        )
        .unwrap();
        let y = Tensor::from_vec(
            &[5, d],
            (0..5 * d).map(|_| rng.normal(0.0, 1.0)).collect(),
        )
        .unwrap();
        let mut perm_x: Vec<usize> = (0..6).collect();
        rng.shuffle(&mut perm_x);
        let mut perm_y: Vec<usize> = (0..5).collect();
        rng.shuffle(&mut perm_y);

        let run_sa = |input: &Tensor| -> Result<Tensor, String> {
            let mut tape = Tape::new();
            let w = weights
                .clone()
                .try_map("u", &mut |_, t| Ok(tape.leaf(t)))
                .map_err(|e| e.to_string())?;
            let fv = FeatureVar::new(tape.leaf(input.clone()), vec![true; input.rows()]);
            let (out, _) = sa_unit(&mut tape, &fv, &w, unit_ctx(), &mut Rng::from_seed(0))
                .map_err(|e| e.to_string())?;
            Ok(tape.value(out.var).clone())
        };
        let sa_then_permute = permute_rows(&run_sa(&x)?, &perm_x);
        let permute_then_sa = run_sa(&permute_rows(&x, &perm_x))?;
        let diff = sa_then_permute
            .max_abs_diff(&permute_then_sa)
            .unwrap_or(f64::INFINITY);
        if diff > 1e-12 {
            return Err(format!(
                "instance {instance}: SA equivariance violated by {diff:.3e}"
            ));
        }
        worst = worst.max(diff);

        let run_ga = |guide: &Tensor| -> Result<Tensor, String> {
            let mut tape = Tape::new();
            let w = weights
                .clone()
                .try_map("u", &mut |_, t| Ok(tape.leaf(t)))
                .map_err(|e| e.to_string())?;
            let fx = FeatureVar::new(tape.leaf(x.clone()), vec![true; x.rows()]);
            let fy = FeatureVar::new(tape.leaf(guide.clone()), vec![true; guide.rows()]);
            let (out, _) = ga_unit(&mut tape, &fx, &fy, &w, unit_ctx(), &mut Rng::from_seed(0))
                .map_err(|e| e.to_string())?;
            Ok(tape.value(out.var).clone())
        };
        let plain = run_ga(&y)?;
        let permuted = run_ga(&permute_rows(&y, &perm_y))?;
        let diff = plain.max_abs_diff(&permuted).unwrap_or(f64::INFINITY);
        if diff > 1e-12 {
            return Err(format!(
                "instance {instance}: GA moved by {diff:.3e} under guide permutation"
            ));
        }
        worst = worst.max(diff);
    }
    Ok(format!(
        "SA equivariant, GA guide-permutation invariant over 10 instances; worst dev {worst:.3e}"
    ))
}

fn parameter_and_flop_accounting() -> Verdict {
    let cfg = ModelConfig {
        layers: 6,
        d: 512,
        heads: 8,
        d_x: 2048,
        d_y: 512,
        d_z: 1024,
        answers: 3129,
        vocab: 100,
        ..small_config(McaVariant::SaSga, CascadeStrategy::EncoderDecoder, 512, 8, 6)
    };
    let per_layer = count_params(&cfg).per_layer;
    if !(6_000_000..=8_000_000).contains(&per_layer) {
        return Err(format!("per-layer increment {per_layer} outside [6.0M, 8.0M]"));
    }
    let total = estimate_flops(&cfg, 100, 14).total as f64;
    let published = 2.8e9;
    let rel = (total - published).abs() / published;
    if rel > 0.2 {
        return Err(format!(
            "forward multiply-adds {total:.3e} deviate {:.1}% from 2.8e9",
            rel * 100.0
        ));
    }
    Ok(format!(
        "per-layer params {per_layer} in [6.0M, 8.0M]; 6-layer forward {total:.4e} MACs within {:.1}% of 2.8e9",
        rel * 100.0
    ))
}

fn learning_rate_schedule() -> Verdict {
    let sched = Schedule::default();
    let lr = |t| lr_at_epoch(t, &sched).map_err(|e| e.to_string());
    let expected = [(1, 2.5e-5), (2, 5e-5), (3, 7.5e-5), (4, 1e-4)];
    for (t, want) in expected {
        let got = lr(t)?;
        let rel = ((got - want) / want).abs();
        if rel > 1e-12 {
            return Err(format!("epoch {t}: lr {got:e}, expected {want:e}"));
        }
    }
    let mut prev = lr(4)?;
    for t in 5..=30 {
        let now = lr(t)?;
        if now > prev {
            return Err(format!("lr increased from {prev:e} to {now:e} at epoch {t}"));
        }
        prev = now;
    }
    Ok("warmup 2.5e-5/5e-5/7.5e-5/1e-4 (rel 1e-12), non-increasing through epoch 30".into())
}

fn counting_advantage() -> Verdict {
    let base = config::load(&workspace_path("configs/toy_count.toml")).map_err(|e| e.to_string())?;
    let accuracy = |cfg: &RunConfig| -> Result<f64, String> {
        let setup = cfg.setup().map_err(|e| e.to_string())?;
        let outcome = train(&setup, &TrainOptions::default()).map_err(|e| e.to_string())?;
        outcome
            .report
            .final_val
            .as_ref()
            .and_then(|v| v.kind_accuracy(QuestionKind::Count))
            .ok_or_else(|| "run produced no counting accuracy".to_string())
    };
    let mut sa = Vec::new();
    let mut id = Vec::new();
    for seed in COUNTING_SEEDS {
        for (variant, bucket) in [("sa_sga", &mut sa), ("id_ga", &mut id)] {
            let mut cfg = base.clone();
            cfg.variant = variant.to_string();
            cfg.seed = seed;
            bucket.push(accuracy(&cfg)?);
        }
    }
    let mut min_margin = f64::INFINITY;
    for (i, seed) in COUNTING_SEEDS.iter().enumerate() {
        let margin = sa[i] - id[i];
        min_margin = min_margin.min(margin);
        if margin < COUNTING_MARGIN {
            return Err(format!(
                "seed {seed}: sa_sga {:.4} vs id_ga {:.4}, margin {margin:.4} < {COUNTING_MARGIN}",
                sa[i], id[i]
            ));
        }
    }
    let fmt = |v: &[f64]| {
        v.iter()
            .map(|a| format!("{a:.3}"))
            .collect::<Vec<_>>()
            .join("/")
    };
    Ok(format!(
        "sa_sga {} vs id_ga {} on val counting; min margin {min_margin:.3} >= {COUNTING_MARGIN}",
        fmt(&sa),
        fmt(&id)
    ))
}

fn run_determinism() -> Verdict {
    let cfg = config::parse_str(
        "variant = \"sa_sga\"\nd = 32\nheads = 4\nd_y = 32\nd_z = 48\nlayers = 2\n\
         epochs = 3\nbatch_size = 32\ntrain_samples = 240\nval_samples = 80\nseed = 9",
    )
    .map_err(|e| e.to_string())?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut views = Vec::new();
    let mut model_bytes = Vec::new();
    let mut epoch_bytes = Vec::new();
    for run in 0..2 {
        let out = dir.path().join(format!("run{run}"));
        let setup = cfg.setup().map_err(|e| e.to_string())?;
        let opts = TrainOptions {
            out_dir: Some(out.clone()),
            epoch_checkpoints: true,
            checkpoint_meta: cfg.canonical_toml(),
        };
        let outcome = train(&setup, &opts).map_err(|e| e.to_string())?;
        views.push(determinism_view(&render(&outcome.report)));
        model_bytes.push(std::fs::read(out.join("model.mckp")).map_err(|e| e.to_string())?);
        epoch_bytes.push(std::fs::read(out.join("epoch_002.mckp")).map_err(|e| e.to_string())?);
    }
    if views[0] != views[1] {
        return Err("reports differ between identical runs".into());
    }
    if model_bytes[0] != model_bytes[1] || epoch_bytes[0] != epoch_bytes[1] {
        return Err("checkpoint bytes differ between identical runs".into());
    }
    Ok(format!(
        "two identical 3-epoch runs: reports and checkpoints bit-identical ({} bytes)",
        model_bytes[0].len()
    ))
}

fn file_round_trips() -> Verdict {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;

    let mut rng = Rng::from_seed(77);
    let mut data: Vec<f64> = (0..7 * 5).map(|_| rng.normal(0.0, 3.0)).collect();
    data[0] = -0.0;
    data[1] = 5e-324;
    data[2] = f64::MAX;
    let matrix = Tensor::from_vec(&[7, 5], data).unwrap();
    let mcaf = dir.path().join("own.mcaf");
    features::write_features(&mcaf, &matrix).map_err(|e| e.to_string())?;
    let back = features::read_features(&mcaf).map_err(|e| e.to_string())?;
    if !bit_eq(back.features(), &matrix) {
        return Err("feature round-trip not bit-exact".into());
    }

    let cfg = small_config(McaVariant::SaSga, CascadeStrategy::EncoderDecoder, 16, 2, 2);
    let named: BTreeMap<String, Tensor> = ModelParams::init(&cfg, &Rng::from_seed(78))
        .named()
        .into_iter()
        .collect();
    let mckp = dir.path().join("own.mckp");
    checkpoint::save(&mckp, "meta = 1\n", &named).map_err(|e| e.to_string())?;
    let (meta, loaded) = checkpoint::load(&mckp).map_err(|e| e.to_string())?;
    let resaved = dir.path().join("resaved.mckp");
    checkpoint::save(&resaved, &meta, &loaded).map_err(|e| e.to_string())?;
    let first = std::fs::read(&mckp).map_err(|e| e.to_string())?;
    let second = std::fs::read(&resaved).map_err(|e| e.to_string())?;
    if first != second {
        return Err("checkpoint save-load-save changed bytes".into());
    }

    let script = workspace_path("scripts/write_features.py");
    let external = dir.path().join("external.mcaf");
    let status = std::process::Command::new("python3")
        .arg(&script)
        .arg(&external)
        .arg("4")
        .arg("5")
        .status()
        .map_err(|e| format!("python3: {e}"))?;
    if !status.success() {
        return Err(format!("writer script exited with {status}"));
    }
    let cell = |i: usize| -> f64 {
        match i {
            0 => -0.0,
            1 => 5e-324,
            2 => f64::MAX,
            _ => i as f64 * 0.5 - 3.25,
        }
    };
    let expected = Tensor::from_vec(&[4, 5], (0..20).map(cell).collect()).unwrap();
    let read = features::read_features(&external).map_err(|e| e.to_string())?;
    if !bit_eq(read.features(), &expected) {
        return Err("independently written feature file did not load bit-exact".into());
    }
    Ok("feature and checkpoint round-trips bit-exact, including an externally written file".into())
}

#[test]
fn acceptance_gate() {
    let criteria: [(&str, Option<f64>, fn() -> Verdict); 10] = [
        ("gradient-integrity", Some(300.0), gradient_integrity),
        ("single-layer-strategy-equivalence", Some(60.0), single_layer_strategy_equivalence),
        ("padding-invariance", Some(60.0), padding_invariance),
        ("attention-row-contracts", None, attention_row_contracts),
        ("permutation-properties", None, permutation_properties),
        ("parameter-and-flop-accounting", None, parameter_and_flop_accounting),
        ("learning-rate-schedule", None, learning_rate_schedule),
        ("counting-advantage", Some(3600.0), counting_advantage),
        ("run-determinism", Some(900.0), run_determinism),
        ("file-round-trips", None, file_round_trips),
    ];

    let mut lines = String::new();
    let mut failures = Vec::new();
    for (i, (name, budget, check)) in criteria.iter().enumerate() {
        let started = Instant::now();
        let mut verdict = check();
        let elapsed = started.elapsed().as_secs_f64();
        if let (Ok(_), Some(limit)) = (&verdict, budget) {
            if elapsed > *limit {
                verdict = Err(format!("took {elapsed:.1}s, budget {limit:.0}s"));
            }
        }
        let line = match &verdict {
            Ok(detail) => format!("[{:>2}/10] {name}: pass ({detail}) [{elapsed:.1}s]", i + 1),
            Err(detail) => format!("[{:>2}/10] {name}: FAIL ({detail}) [{elapsed:.1}s]", i + 1),
        };
        println!("{line}");
        let _ = writeln!(lines, "{line}");
        if verdict.is_err() {
            failures.push(*name);
        }
    }
    assert!(
        failures.is_empty(),
        "acceptance failures: {failures:?}\n{lines}"
    );
}
