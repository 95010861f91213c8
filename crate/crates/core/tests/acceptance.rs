//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs as a plain binary so the lines appear in order without libtest
//! framing. Pass criterion numbers to run a subset, e.g.
//! `cargo test --test acceptance -- 3 7`.

mod common;

use std::time::{Duration, Instant};

use jmt_core::backbones::{
    spectrogram, ClipBackbone, Phys1DCNN, PhysCnnConfig, PhysOutput, SpectrogramConfig, TemporalConvBackbone,
    TemporalConvConfig,
};
use jmt_core::data::SyntheticDataset;
use jmt_core::fusion::{build_model, joint_representation, FusionConfig, ModelKind};
use jmt_core::harness::checkpoint::{capture, restore};
use jmt_core::harness::{ablation_run, prepare_features, preset, train, Checkpoint, TrainOptions};
use jmt_core::metrics::{argmax, ccc, ccc_loss, write_jsonl, MetricsRecord};
use jmt_core::nn::{
    Conv1d, EncoderBlock, FeedForward, ForwardCtx, LayerNorm, Linear, MaxPool1d, Module, MultiHeadAttention,
};
use jmt_core::tensor::{check_gradients, check_gradients_wrt, relu_margin, AttentionScaling, Tensor};
use jmt_core::{Result, Seed};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

const GRAD_TOL: f64 = 1e-3;
const GRAD_EPS: f64 = 1e-4;
const GRAD_BUDGET: Duration = Duration::from_secs(60);
const ROW_SUM_TOL: f64 = 1e-9;
const PERMUTATION_TOL: f64 = 1e-10;
const ATTENTION_CASES: usize = 100;
const CCC_TOL: f64 = 1e-12;
const CCC_PAIRS: usize = 10_000;
const STATIONARY_GRAD_NORM: f64 = 1e-8;
const ORACLE_TOL: f64 = 1e-10;
const ORACLE_CASES: usize = 20;
const OVERFIT_TARGET: f64 = 0.95;
const OVERFIT_MAX_STEPS: u64 = 500;
const OVERFIT_BUDGET: Duration = Duration::from_secs(120);
const ABLATION_MIN_WINS: usize = 4;
const ABLATION_BUDGET: Duration = Duration::from_secs(15 * 60);
const SPECTRO_TONES: usize = 10;
const FRAME_COUNT_CASES: usize = 100;
/// Smallest |ReLU input| allowed at a gradient-check point; keeps every
/// central-difference probe on one side of each kink.
const KINK_MARGIN: f64 = 5e-4;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Result<Outcome> {
    Ok(Outcome { pass, detail })
}

fn rng(seed: u64) -> ChaCha8Rng {
    Seed(seed).rng()
}

/// First seed whose evaluation keeps every ReLU input at least
/// `KINK_MARGIN` from zero.
fn kink_free<T>(build: impl Fn(&mut ChaCha8Rng) -> T, eval: impl Fn(&T) -> Result<Tensor>) -> T {
    for seed in 0..500 {
        let candidate = build(&mut rng(seed));
        let (_, margin) = relu_margin(|| eval(&candidate));
        if margin > KINK_MARGIN {
            return candidate;
        }
    }
    panic!("no kink-free evaluation point in 500 seeds");
}

fn weighted_sum(y: &Tensor, seed: u64) -> Result<Tensor> {
    Ok(y.mul(&Tensor::randn(y.shape(), &mut rng(seed)))?.sum())
}

fn c1_gradients() -> Result<Outcome> {
    let start = Instant::now();
    let mut checks: Vec<(&str, f64)> = Vec::new();
    let eval = ForwardCtx::eval();

    let lin = Linear::new(5, 3, &mut rng(1));
    let x = Tensor::randn(&[4, 5], &mut rng(2));
    checks.push((
        "linear/params",
        check_gradients_wrt(|| weighted_sum(&lin.forward(&x)?, 3), &lin.parameters(), GRAD_EPS)?,
    ));
    checks.push((
        "linear/input",
        check_gradients(|t| weighted_sum(&lin.forward(t)?, 3), &x, GRAD_EPS)?,
    ));

    let conv = Conv1d::new(2, 3, 3, 2, &mut rng(4));
    let x = Tensor::randn(&[11, 2], &mut rng(5));
    checks.push((
        "conv1d/params",
        check_gradients_wrt(|| weighted_sum(&conv.forward(&x)?, 6), &conv.parameters(), GRAD_EPS)?,
    ));
    checks.push((
        "conv1d/input",
        check_gradients(|t| weighted_sum(&conv.forward(t)?, 6), &x, GRAD_EPS)?,
    ));

    let pool = MaxPool1d::new(2);
    let x = Tensor::randn(&[8, 3], &mut rng(7));
    checks.push((
        "maxpool1d/input",
        check_gradients(|t| weighted_sum(&pool.forward(t)?, 8), &x, GRAD_EPS)?,
    ));

    let ln = LayerNorm::new(6);
    for p in ln.parameters() {
        let mut r = rng(9);
        p.update(|v| v.iter_mut().for_each(|w| *w += r.random_range(-0.5..0.5)));
    }
    let x = Tensor::randn(&[3, 6], &mut rng(10));
    checks.push((
        "layer_norm/params",
        check_gradients_wrt(|| weighted_sum(&ln.forward(&x)?, 11), &ln.parameters(), GRAD_EPS)?,
    ));
    checks.push((
        "layer_norm/input",
        check_gradients(|t| weighted_sum(&ln.forward(t)?, 11), &x, GRAD_EPS)?,
    ));

    let x = Tensor::randn(&[3, 5], &mut rng(12));
    checks.push((
        "softmax",
        check_gradients(|t| weighted_sum(&t.softmax(1)?, 13), &x, GRAD_EPS)?,
    ));
    checks.push((
        "cross_entropy",
        check_gradients(|t| t.cross_entropy(&[0, 4, 2]), &x, GRAD_EPS)?,
    ));
    let x = Tensor::randn(&[20], &mut rng(14));
    checks.push((
        "dropout",
        check_gradients(|t| Ok(t.dropout(0.3, true, &mut rng(15))?.square().sum()), &x, GRAD_EPS)?,
    ));

    let (ff, x) = kink_free(
        |r| (FeedForward::new(6, 10, r), Tensor::randn(&[4, 6], r)),
        |(ff, x)| ff.forward(x, 0.0, &eval),
    );
    checks.push((
        "feed_forward/params",
        check_gradients_wrt(
            || weighted_sum(&ff.forward(&x, 0.0, &eval)?, 16),
            &ff.parameters(),
            GRAD_EPS,
        )?,
    ));
    checks.push((
        "feed_forward/input",
        check_gradients(|t| weighted_sum(&ff.forward(t, 0.0, &eval)?, 16), &x, GRAD_EPS)?,
    ));

    for scaling in [AttentionScaling::SqrtDk, AttentionScaling::Dk] {
        let mha = MultiHeadAttention::new(6, 2, scaling, &mut rng(17)).unwrap();
        let q = Tensor::randn(&[2 * 3, 6], &mut rng(18));
        let kv = Tensor::randn(&[2 * 4, 6], &mut rng(19));
        checks.push((
            "attention/params",
            check_gradients_wrt(
                || weighted_sum(&mha.forward(&q, &kv, 2)?.output, 20),
                &mha.parameters(),
                GRAD_EPS,
            )?,
        ));
        checks.push((
            "attention/query",
            check_gradients(|t| weighted_sum(&mha.forward(t, &kv, 2)?.output, 20), &q, GRAD_EPS)?,
        ));
        checks.push((
            "attention/key-value",
            check_gradients(|t| weighted_sum(&mha.forward(&q, t, 2)?.output, 20), &kv, GRAD_EPS)?,
        ));
    }

    let (blk, x, src) = kink_free(
        |r| {
            let blk = EncoderBlock::new(6, 3, 8, AttentionScaling::SqrtDk, 0.0, r).unwrap();
            (blk, Tensor::randn(&[2 * 3, 6], r), Tensor::randn(&[2 * 2, 6], r))
        },
        |(blk, x, src)| {
            blk.forward(x, 2, &eval)?;
            blk.forward_cross(x, src, 2, &eval)
        },
    );
    checks.push((
        "encoder_block/params",
        check_gradients_wrt(
            || weighted_sum(&blk.forward(&x, 2, &eval)?, 21),
            &blk.parameters(),
            GRAD_EPS,
        )?,
    ));
    checks.push((
        "encoder_block/input",
        check_gradients(|t| weighted_sum(&blk.forward(t, 2, &eval)?, 21), &x, GRAD_EPS)?,
    ));
    checks.push((
        "cross_block/source",
        check_gradients(
            |t| weighted_sum(&blk.forward_cross(&x, t, 2, &eval)?, 22),
            &src,
            GRAD_EPS,
        )?,
    ));

    let fc = Linear::new(8, 4, &mut rng(23));
    let fa = Tensor::randn(&[3, 4], &mut rng(24));
    let fb = Tensor::randn(&[3, 4], &mut rng(25));
    checks.push((
        "joint_representation/a",
        check_gradients(|t| weighted_sum(&joint_representation(t, &fb, &fc)?, 26), &fa, GRAD_EPS)?,
    ));
    checks.push((
        "joint_representation/b",
        check_gradients(|t| weighted_sum(&joint_representation(&fa, t, &fc)?, 26), &fb, GRAD_EPS)?,
    ));

    let phys_cfg = PhysCnnConfig {
        input_len: 40,
        conv1_filters: 3,
        conv2_filters: 4,
        feature_dim: 6,
        ..PhysCnnConfig::default()
    };
    let (cnn, x) = kink_free(
        |r| (Phys1DCNN::new(phys_cfg, r).unwrap(), Tensor::randn(&[40, 1], r)),
        |(cnn, x)| cnn.forward(x, PhysOutput::Logits),
    );
    checks.push((
        "phys_cnn/params",
        check_gradients_wrt(
            || weighted_sum(&cnn.forward(&x, PhysOutput::Logits)?, 27),
            &cnn.parameters(),
            GRAD_EPS,
        )?,
    ));

    let tc_cfg = TemporalConvConfig {
        in_channels: 2,
        hidden: 3,
        kernel: 3,
        pool: 2,
        clip_length: 8,
        out_dim: 4,
    };
    let (tc, x) = kink_free(
        |r| (TemporalConvBackbone::new(tc_cfg, r).unwrap(), Tensor::randn(&[8, 2], r)),
        |(tc, x)| tc.embed_clip(x),
    );
    checks.push((
        "temporal_conv/params",
        check_gradients_wrt(|| weighted_sum(&tc.embed_clip(&x)?, 28), &tc.parameters(), GRAD_EPS)?,
    ));

    // end to end: JMT forward into the CCC loss, per-clip and pooled heads
    for per_clip in [true, false] {
        let cfg = FusionConfig {
            model_dim: 8,
            num_heads: 2,
            ff_dim: 8,
            dropout_rate: 0.0,
            per_clip,
            ..FusionConfig::default()
        };
        let (batch, t) = if per_clip { (1, 4) } else { (3, 2) };
        let groups = if per_clip { t } else { batch };
        let (model, fa, fb, target) = kink_free(
            |r| {
                let model = build_model(ModelKind::Jmt, &cfg, r).unwrap();
                let fa = Tensor::randn(&[batch * t, 8], r);
                let fb = Tensor::randn(&[batch * t, 8], r);
                (model, fa, fb, Tensor::uniform(&[groups, 2], -1.0, 1.0, r))
            },
            |(m, fa, fb, _)| m.forward(fa, fb, batch, &eval),
        );
        let loss = || ccc_loss(&model.forward(&fa, &fb, batch, &eval)?, &target);
        let name = if per_clip { "jmt+ccc/per-clip" } else { "jmt+ccc/pooled" };
        checks.push((name, check_gradients_wrt(loss, &model.parameters(), GRAD_EPS)?));
        let input_loss = |t: &Tensor| ccc_loss(&model.forward(t, &fb, batch, &eval)?, &target);
        checks.push(("jmt+ccc/input", check_gradients(input_loss, &fa, GRAD_EPS)?));
    }

    let elapsed = start.elapsed();
    let (worst_name, worst) = checks
        .iter()
        .fold(("", 0.0f64), |acc, (n, e)| if *e > acc.1 { (n, *e) } else { acc });
    // NaN errors count as failures
    let failing: Vec<&str> = checks
        .iter()
        .filter(|(_, e)| e.partial_cmp(&GRAD_TOL) != Some(std::cmp::Ordering::Less))
        .map(|(n, _)| *n)
        .collect();
    outcome(
        failing.is_empty() && elapsed < GRAD_BUDGET,
        format!(
            "{} checks, worst rel err {worst:.2e} ({worst_name}) < {GRAD_TOL:e}, eps {GRAD_EPS:e}; {:.1} s < {} s{}",
            checks.len(),
            elapsed.as_secs_f64(),
            GRAD_BUDGET.as_secs(),
            if failing.is_empty() {
                String::new()
            } else {
                format!("; failing: {}", failing.join(", "))
            }
        ),
    )
}

fn c2_attention() -> Result<Outcome> {
    let mut r = rng(200);
    let mut worst_sum = 0.0f64;
    let mut worst_perm = 0.0f64;
    for _ in 0..ATTENTION_CASES {
        let heads = r.random_range(1..4);
        let d = heads * r.random_range(1..5);
        let batch = r.random_range(1..4);
        let (tq, tk) = (r.random_range(1..6), r.random_range(1..8));
        let scaling = if r.random() {
            AttentionScaling::SqrtDk
        } else {
            AttentionScaling::Dk
        };
        let mha = MultiHeadAttention::new(d, heads, scaling, &mut r)?;
        let q = Tensor::randn(&[batch * tq, d], &mut r).scale(2.0);
        let kv = Tensor::randn(&[batch * tk, d], &mut r).scale(2.0);
        let att = mha.forward(&q, &kv, batch)?;
        for row in att.weights.chunks(tk) {
            worst_sum = worst_sum.max((row.iter().sum::<f64>() - 1.0).abs());
        }
        // permute key/value rows inside each sequence
        let mut perm: Vec<usize> = (0..tk).collect();
        perm.shuffle(&mut r);
        let src = kv.to_vec();
        let mut shuffled = Vec::with_capacity(src.len());
        for b in 0..batch {
            for &j in &perm {
                shuffled.extend_from_slice(&src[(b * tk + j) * d..(b * tk + j + 1) * d]);
            }
        }
        let permuted = mha.forward(&q, &Tensor::new(&[batch * tk, d], shuffled)?, batch)?;
        for (a, b) in att.output.to_vec().iter().zip(permuted.output.to_vec()) {
            worst_perm = worst_perm.max((a - b).abs());
        }
        for (row, prow) in att.weights.chunks(tk).zip(permuted.weights.chunks(tk)) {
            for (pos, &j) in perm.iter().enumerate() {
                worst_perm = worst_perm.max((row[j] - prow[pos]).abs());
            }
        }
    }
    outcome(
        worst_sum < ROW_SUM_TOL && worst_perm < PERMUTATION_TOL,
        format!(
            "{ATTENTION_CASES} cases, max |row sum - 1| {worst_sum:.1e} < {ROW_SUM_TOL:e}, max permutation deviation {worst_perm:.1e} < {PERMUTATION_TOL:e}"
        ),
    )
}

fn c3_table_one() -> Result<Outcome> {
    let cnn = Phys1DCNN::new(PhysCnnConfig::default(), &mut rng(300))?;
    let signal = Tensor::randn(&[2816, 1], &mut rng(301));
    let (_, trace) = cnn.forward_trace(&signal, PhysOutput::Logits)?;
    let expected: Vec<Vec<usize>> = vec![
        vec![2816, 1],
        vec![1406, 32],
        vec![703, 32],
        vec![699, 64],
        vec![349, 64],
        vec![512],
        vec![2],
    ];
    let show = |t: &[Vec<usize>]| {
        t.iter()
            .map(|s| s.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x"))
            .collect::<Vec<_>>()
            .join(" -> ")
    };
    outcome(trace == expected, format!("trace {}", show(&trace)))
}

/// Sum-based form: 2 (Sxy - n mx my) / (Sxx - n mx^2 + Syy - n my^2 + n (mx - my)^2).
fn direct_ccc(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mut sx, mut sy, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sx += a;
        sy += b;
        sxx += a * a;
        syy += b * b;
        sxy += a * b;
    }
    let (mx, my) = (sx / n, sy / n);
    let vx = sxx / n - mx * mx;
    let vy = syy / n - my * my;
    let cov = sxy / n - mx * my;
    2.0 * cov / (vx + vy + (mx - my) * (mx - my))
}

fn c4_ccc() -> Result<Outcome> {
    let mut r = rng(400);
    let mut worst = 0.0f64;
    for _ in 0..CCC_PAIRS {
        let n = r.random_range(2..64);
        let (ox, oy) = (r.random_range(-1.0..1.0), r.random_range(-1.0..1.0));
        let corr = r.random_range(-1.0..1.0);
        let x: Vec<f64> = (0..n).map(|_| ox + r.random_range(-1.0..1.0)).collect();
        let y: Vec<f64> = x.iter().map(|v| oy + corr * v + r.random_range(-0.5..0.5)).collect();
        worst = worst.max((ccc(&x, &y)?.value - direct_ccc(&x, &y)).abs());
    }
    let mut identity = 0.0f64;
    let mut negation = 0.0f64;
    for _ in 0..100 {
        let n = r.random_range(2..64);
        let raw: Vec<f64> = (0..n).map(|_| r.random_range(-3.0..3.0)).collect();
        let mean = raw.iter().sum::<f64>() / n as f64;
        let x: Vec<f64> = raw.iter().map(|v| v - mean).collect();
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        identity = identity.max((ccc(&x, &x)?.value - 1.0).abs());
        negation = negation.max((ccc(&x, &neg)?.value + 1.0).abs());
    }
    let mut grad_norm = 0.0f64;
    for shape in [vec![32], vec![16, 2]] {
        let target = Tensor::uniform(&shape, -1.0, 1.0, &mut r);
        let pred = Tensor::param(&shape, target.to_vec())?;
        ccc_loss(&pred, &target)?.backward()?;
        let g = pred.grad().unwrap_or_default();
        grad_norm = grad_norm.max(g.iter().map(|v| v * v).sum::<f64>().sqrt());
    }
    outcome(
        worst < CCC_TOL && identity < CCC_TOL && negation < CCC_TOL && grad_norm < STATIONARY_GRAD_NORM,
        format!(
            "{CCC_PAIRS} pairs max diff {worst:.1e} < {CCC_TOL:e}; |ccc(x,x)-1| {identity:.1e}, |ccc(x,-x)+1| {negation:.1e}; grad norm at perfection {grad_norm:.1e} < {STATIONARY_GRAD_NORM:e}"
        ),
    )
}

fn c5_oracle() -> Result<Outcome> {
    let err = common::oracle::max_error_over_random_cases(ORACLE_CASES, 500);
    outcome(
        err < ORACLE_TOL,
        format!("{ORACLE_CASES} random configs, max abs diff {err:.1e} < {ORACLE_TOL:e}"),
    )
}

fn c6_overfit() -> Result<Outcome> {
    let start = Instant::now();
    let cfg = preset("overfit")?;
    let dataset = SyntheticDataset::generate(&cfg.dataset)?;
    let features = prepare_features(&cfg, &dataset)?;
    let out = train(&cfg, &features, TrainOptions::default())?;
    let last = out
        .records
        .iter()
        .rfind(|r| r.split == "train")
        .and_then(|r| r.mean_ccc)
        .unwrap_or(f64::NAN);
    let elapsed = start.elapsed();
    outcome(
        last > OVERFIT_TARGET && out.steps <= OVERFIT_MAX_STEPS && elapsed < OVERFIT_BUDGET,
        format!(
            "{} samples, train CCC {last:.4} > {OVERFIT_TARGET} after {} steps (<= {OVERFIT_MAX_STEPS}); {:.1} s < {} s",
            cfg.train_subset.unwrap_or(0),
            out.steps,
            elapsed.as_secs_f64(),
            OVERFIT_BUDGET.as_secs()
        ),
    )
}

fn c7_ablation() -> Result<Outcome> {
    let start = Instant::now();
    let cfg = preset("ablation")?;
    let table = ablation_run(&cfg, &cfg.ablation_seeds, None)?;
    let elapsed = start.elapsed();
    let mean = |k: ModelKind| table.row(k).map_or(f64::NAN, |r| r.mean);
    let (jmt, vanilla, concat) = (mean(ModelKind::Jmt), mean(ModelKind::Vanilla), mean(ModelKind::Concat));
    let unimodal = mean(ModelKind::UnimodalA).max(mean(ModelKind::UnimodalB));
    let wins = table.wins(ModelKind::Jmt, ModelKind::Vanilla);
    let ordered = jmt >= vanilla && vanilla >= concat && concat >= unimodal && jmt > vanilla;
    for line in table.to_text().lines() {
        println!("      {line}");
    }
    outcome(
        ordered && wins >= ABLATION_MIN_WINS && elapsed < ABLATION_BUDGET,
        format!(
            "{} seeds mean {}: jmt {jmt:.4} >= vanilla {vanilla:.4} >= concat {concat:.4} >= best unimodal {unimodal:.4}; jmt > vanilla on {wins}/{} seeds (>= {ABLATION_MIN_WINS}); {:.0} s < {} s",
            table.seeds.len(),
            table.metric,
            table.seeds.len(),
            elapsed.as_secs_f64(),
            ABLATION_BUDGET.as_secs()
        ),
    )
}

fn jsonl(records: &[MetricsRecord]) -> Vec<u8> {
    let mut buf = Vec::new();
    write_jsonl(&mut buf, records).expect("in-memory write");
    buf
}

fn short_run() -> Result<Vec<u8>> {
    let mut cfg = preset("ablation")?;
    cfg.max_epochs = 3;
    let dataset = SyntheticDataset::generate(&cfg.dataset)?;
    let features = prepare_features(&cfg, &dataset)?;
    Ok(jsonl(&train(&cfg, &features, TrainOptions::default())?.records))
}

fn c8_determinism() -> Result<Outcome> {
    let first = short_run()?;
    let second = short_run()?;
    let lines = first.iter().filter(|b| **b == b'\n').count();
    outcome(
        !first.is_empty() && first == second,
        format!(
            "two end-to-end runs: {} bytes / {lines} records, sha256 {} vs {}",
            first.len(),
            jmt_core::codec::bytes_hash_hex(&first),
            jmt_core::codec::bytes_hash_hex(&second)
        ),
    )
}

fn c9_checkpoint() -> Result<Outcome> {
    let dir = tempfile::tempdir()?;
    let mut cfg = preset("smoke")?;
    cfg.max_epochs = 6;
    cfg.patience = 6;
    let dataset = SyntheticDataset::generate(&cfg.dataset)?;
    let features = prepare_features(&cfg, &dataset)?;

    let full = train(&cfg, &features, TrainOptions::default())?;
    let saved = full.last.clone();
    let path = dir.path().join("round-trip.ckpt");
    saved.save(&path)?;
    let loaded = Checkpoint::load(&path)?;
    let fresh = build_model(cfg.model, &cfg.fusion, &mut rng(999))?;
    restore(fresh.as_ref(), &loaded.parameters)?;
    let bits = |arrays: &[jmt_core::harness::checkpoint::NamedArray]| {
        arrays
            .iter()
            .flat_map(|a| a.data.iter().map(|v| v.to_bits()))
            .collect::<Vec<u64>>()
    };
    let bit_exact = loaded == saved && bits(&capture(fresh.as_ref())) == bits(&saved.parameters);

    let partial = train(
        &cfg,
        &features,
        TrainOptions {
            stop_after_epochs: Some(3),
            checkpoint_dir: Some(dir.path()),
            ..TrainOptions::default()
        },
    )?;
    let resume = Checkpoint::load(&dir.path().join("last.ckpt"))?;
    let resumed = train(
        &cfg,
        &features,
        TrainOptions {
            resume: Some(resume),
            ..TrainOptions::default()
        },
    )?;
    let mut joined = partial.records.clone();
    joined.extend(resumed.records.iter().cloned());
    let same_metrics = jsonl(&joined) == jsonl(&full.records);
    let same_params = bits(&resumed.last.parameters) == bits(&full.last.parameters);
    outcome(
        bit_exact && same_metrics && same_params,
        format!(
            "{} tensors bit-exact after save/load/restore: {bit_exact}; resume at epoch 3 of 6 reproduces metrics: {same_metrics}, final parameters: {same_params}",
            saved.parameters.len()
        ),
    )
}

fn c10_spectrogram() -> Result<Outcome> {
    let cfg = SpectrogramConfig::default();
    let mut r = rng(1000);
    let mut peaks_ok = 0;
    for _ in 0..SPECTRO_TONES {
        let bin = r.random_range(5..cfg.dft_length / 2 - 5);
        let freq = bin as f64 * cfg.sample_rate / cfg.dft_length as f64;
        let phase = r.random_range(0.0..std::f64::consts::TAU);
        let signal: Vec<f64> = (0..8820)
            .map(|i| (std::f64::consts::TAU * freq * i as f64 / cfg.sample_rate + phase).sin())
            .collect();
        let spec = spectrogram(&signal, &cfg)?;
        let (bins, frames) = (spec.shape()[0], spec.shape()[1]);
        let all = (0..frames).all(|f| argmax(&(0..bins).map(|b| spec.at(&[b, f])).collect::<Vec<_>>()) == bin);
        peaks_ok += usize::from(all);
    }
    let mut counts_ok = 0;
    for _ in 0..FRAME_COUNT_CASES {
        let sr = r.random_range(500.0..4000.0f64).round();
        let win = r.random_range(8..96usize);
        let hop = r.random_range(1..=win);
        let n = r.random_range(win..win * 20);
        let c = SpectrogramConfig {
            sample_rate: sr,
            dft_length: [32, 64, 128][r.random_range(0..3)],
            hop: hop as f64 / sr,
            window: win as f64 / sr,
            bands: None,
        };
        let signal: Vec<f64> = (0..n).map(|i| (i as f64 * 0.13).sin()).collect();
        let frames = spectrogram(&signal, &c)?.shape()[1];
        counts_ok += usize::from(frames == (n - win) / hop + 1);
    }
    outcome(
        peaks_ok == SPECTRO_TONES && counts_ok == FRAME_COUNT_CASES,
        format!(
            "peak bin correct in every frame for {peaks_ok}/{SPECTRO_TONES} tones; frame count floor((n - win) / hop) + 1 on {counts_ok}/{FRAME_COUNT_CASES}"
        ),
    )
}

type Criterion = (usize, &'static str, fn() -> Result<Outcome>);

const CRITERIA: [Criterion; 10] = [
    (1, "gradient suite", c1_gradients),
    (2, "attention properties", c2_attention),
    (3, "phys CNN shape trace", c3_table_one),
    (4, "CCC oracle", c4_ccc),
    (5, "straight-line fusion oracle", c5_oracle),
    (6, "overfit convergence", c6_overfit),
    (7, "directional ablation", c7_ablation),
    (8, "determinism", c8_determinism),
    (9, "checkpoint round trip and resume", c9_checkpoint),
    (10, "spectrogram", c10_spectrogram),
];

fn main() {
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failures = 0;
    for (id, name, run) in CRITERIA {
        if !selected.is_empty() && !selected.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let result = std::panic::catch_unwind(run);
        let (pass, detail) = match result {
            Ok(Ok(o)) => (o.pass, o.detail),
            Ok(Err(e)) => (false, format!("error: {e}")),
            Err(_) => (false, "panicked".to_string()),
        };
        failures += usize::from(!pass);
        println!(
            "{} [{id:>2}] {name}: {detail} ({:.1} s)",
            if pass { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64()
        );
    }
    if failures > 0 {
        println!("{failures} criteria failed");
        std::process::exit(1);
    }
}
