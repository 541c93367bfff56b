//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any fails.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use fovb_core::checkpoint::{encode, load_checkpoint, to_entries};
use fovb_core::config::RunConfig;
use fovb_core::conv::{self, build_highpass_mask, reflect, DiffConvKernel, DiffKind, RING};
use fovb_core::data::{synth_generate, Prepared};
use fovb_core::metrics::{auc, average_precision};
use fovb_core::model::FovbModel;
use fovb_core::nn::Binder;
use fovb_core::optim::AdamWState;
use fovb_core::train::train_loop;
use fovb_core::vbfe::DiscreteToy;
use fovb_core::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const GRADCHECK_BUDGET: Duration = Duration::from_secs(120);
const KERNEL_TOL: f64 = 1e-10;
const KERNEL_CASES: usize = 50;
const KERNEL_BUDGET: Duration = Duration::from_secs(30);
const GFC_IDEMPOTENCE_TOL: f64 = 1e-9;
const GFC_DC_TOL: f64 = 1e-9;
const GFC_PARSEVAL_TOL: f64 = 1e-8;
const GFC_CASES: usize = 40;
const DIV_SAMPLES: usize = 100_000;
const IDENTITY_TOL: f64 = 1e-12;
const IDENTITY_TOYS: usize = 1000;
const FROZEN_STEPS: usize = 100;
const E2E_AUC: f64 = 0.95;
const E2E_AP: f64 = 0.95;
const E2E_ACC: f64 = 0.90;
const E2E_BUDGET: Duration = Duration::from_secs(600);
const RERUN_STEPS: usize = 10;
const METRIC_CASES: usize = 100;
const METRIC_MAX_LEN: usize = 50;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn fovb(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fovb")).args(args).output().expect("run fovb")
}

fn path(p: &Path) -> &str {
    p.to_str().expect("utf-8 temp path")
}

// ---- 1 ---------------------------------------------------------------------

fn gradient_integrity() -> Outcome {
    let mut details = Vec::new();
    let mut pass = true;
    for scope in ["ops", "full"] {
        let t = Instant::now();
        let out = fovb(&["gradcheck", "--seed", "0", "--scope", scope]);
        let secs = t.elapsed();
        let text = String::from_utf8_lossy(&out.stdout);
        let verdict = text.lines().rfind(|l| l.starts_with("scope")).unwrap_or("no verdict").to_string();
        let ok = out.status.code() == Some(0) && secs < GRADCHECK_BUDGET;
        pass &= ok;
        details.push(format!("{verdict} in {:.1}s", secs.as_secs_f64()));
    }
    outcome(pass, details.join("; "))
}

// ---- 2 ---------------------------------------------------------------------

const KINDS: [DiffKind; 5] = [DiffKind::Vanilla, DiffKind::Adc, DiffKind::Cdc, DiffKind::Rdc, DiffKind::Soc];

fn loop_oracle(kind: DiffKind, x: &Tensor, k: &Tensor) -> Tensor {
    let (h, w, cin) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let cout = k.shape()[0];
    let px = |r: isize, c: isize, ch: usize| x.get(&[reflect(r, h), reflect(c, w), ch]);
    let wt = |o: usize, i: usize, dy: isize, dx: isize| k.get(&[o, i, (dy + 1) as usize, (dx + 1) as usize]);
    let mut out = vec![0.0; h * w * cout];
    for r in 0..h as isize {
        for c in 0..w as isize {
            for o in 0..cout {
                let mut acc = 0.0;
                for i in 0..cin {
                    let xc = px(r, c, i);
                    match kind {
                        DiffKind::Vanilla | DiffKind::Cdc => {
                            let centre = if kind == DiffKind::Cdc { xc } else { 0.0 };
                            for dy in -1..=1 {
                                for dx in -1..=1 {
                                    acc += wt(o, i, dy, dx) * (px(r + dy, c + dx, i) - centre);
                                }
                            }
                        }
                        DiffKind::Adc => {
                            for j in 0..8 {
                                let (a, b) = (RING[j], RING[(j + 1) % 8]);
                                acc += wt(o, i, a.0, a.1) * (px(r + a.0, c + a.1, i) - px(r + b.0, c + b.1, i));
                            }
                        }
                        DiffKind::Rdc => {
                            for (dy, dx) in RING {
                                acc += wt(o, i, dy, dx) * (px(r + 2 * dy, c + 2 * dx, i) - px(r + dy, c + dx, i));
                            }
                        }
                        DiffKind::Soc => {
                            for (dy, dx) in RING {
                                acc += wt(o, i, dy, dx) * (px(r + dy, c + dx, i) + px(r - dy, c - dx, i) - 2.0 * xc);
                            }
                        }
                    }
                }
                out[((r as usize) * w + c as usize) * cout + o] = acc;
            }
        }
    }
    Tensor::new(&[h, w, cout], out).unwrap()
}

fn apply(kind: DiffKind, x: &Tensor, w: &Tensor) -> Tensor {
    let k = DiffConvKernel::new(kind, w.clone()).unwrap();
    match kind {
        DiffKind::Vanilla => conv::conv_vanilla(x, &k),
        DiffKind::Adc => conv::conv_adc(x, &k),
        DiffKind::Cdc => conv::conv_cdc(x, &k),
        DiffKind::Rdc => conv::conv_rdc(x, &k),
        DiffKind::Soc => conv::conv_soc(x, &k),
    }
    .unwrap()
}

fn kernel_oracles() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst = 0.0f64;
    for kind in KINDS {
        for _ in 0..KERNEL_CASES {
            let (h, w) = (rng.random_range(3..=9), rng.random_range(3..=9));
            let (cin, cout) = (rng.random_range(1..=3), rng.random_range(1..=3));
            let x = Tensor::uniform(&[h, w, cin], -2.0, 2.0, &mut rng);
            let k = Tensor::uniform(&[cout, cin, 3, 3], -1.0, 1.0, &mut rng);
            worst = worst.max(apply(kind, &x, &k).max_abs_diff(&loop_oracle(kind, &x, &k)));
        }
    }
    let mut constants_zero = true;
    for kind in DiffKind::DIFFERENCE {
        for _ in 0..KERNEL_CASES {
            let x = Tensor::full(&[6, 7, 2], rng.random_range(-50.0..50.0));
            let k = Tensor::uniform(&[3, 2, 3, 3], -5.0, 5.0, &mut rng);
            constants_zero &= apply(kind, &x, &k).data().iter().all(|&v| v == 0.0);
        }
    }
    let secs = t.elapsed();
    outcome(
        worst < KERNEL_TOL && constants_zero && secs < KERNEL_BUDGET,
        format!("max abs diff {worst:.2e}, constants to zero: {constants_zero}, {:.2}s", secs.as_secs_f64()),
    )
}

// ---- 3 ---------------------------------------------------------------------

fn spectral_filter() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let (mut idem, mut dc, mut parseval) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..GFC_CASES {
        let (h, w, c) = (rng.random_range(8..=32), rng.random_range(8..=32), rng.random_range(1..=3));
        let x = Tensor::uniform(&[h, w, c], -2.0, 2.0, &mut rng);
        let mask = build_highpass_mask(h, w);
        let hi = conv::gfc_filter(&x, &mask).unwrap();
        let lo = conv::lowpass_filter(&x, &mask).unwrap();
        idem = idem.max(conv::gfc_filter(&hi, &mask).unwrap().max_abs_diff(&hi));
        for ch in 0..c {
            let mean: f64 = (0..h * w).map(|i| hi.data()[i * c + ch]).sum::<f64>() / (h * w) as f64;
            dc = dc.max(mean.abs());
        }
        let e = |t: &Tensor| t.data().iter().map(|v| v * v).sum::<f64>();
        parseval = parseval.max((e(&x) - e(&hi) - e(&lo)).abs());
    }
    outcome(
        idem < GFC_IDEMPOTENCE_TOL && dc < GFC_DC_TOL && parseval < GFC_PARSEVAL_TOL,
        format!("idempotence {idem:.2e}, DC {dc:.2e}, energy split {parseval:.2e} over {GFC_CASES} grids"),
    )
}

// ---- 4, 5 --------------------------------------------------------------------

fn divergence_oracles() -> Outcome {
    let out = fovb(&["divcheck", "--samples", &DIV_SAMPLES.to_string(), "--seed", "0"]);
    let text = String::from_utf8_lossy(&out.stdout);
    let failing: Vec<&str> = text.lines().filter(|l| l.contains("FAIL")).collect();
    let detail = if failing.is_empty() { format!("{} checks at {DIV_SAMPLES} samples", text.lines().count()) } else { failing.join("; ") };
    outcome(out.status.code() == Some(0), detail)
}

fn derivation_identity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let worst = (0..IDENTITY_TOYS).map(|_| DiscreteToy::random(&mut rng).identity().residual()).fold(0.0, f64::max);
    outcome(worst < IDENTITY_TOL, format!("max residual {worst:.2e} over {IDENTITY_TOYS} toys"))
}

// ---- 6 ---------------------------------------------------------------------

fn safe_init() -> Outcome {
    let cfg = RunConfig { seed: 21, ..RunConfig::default() };
    let samples = synth_generate(64, 21).unwrap();
    let data = Prepared::new(&samples, cfg.model.input_size, cfg.model.patch).unwrap();
    let mut model = FovbModel::new(&cfg.model, cfg.seed, cfg.train.mc_samples).unwrap();
    let batch = data.batch(&(0..8).collect::<Vec<_>>()).0;
    let logits = |model: &FovbModel, backbone: bool| {
        let tape = Tape::new();
        let p = Binder::new(&tape, &model.store, false);
        let out = if backbone { model.forward_backbone(&p, &batch) } else { model.forward(&p, &batch, None) }.unwrap();
        ((*out.logits_a.value()).clone(), (*out.logits_v.value()).clone())
    };
    let identical = logits(&model, false) == logits(&model, true);

    let frozen_before: Vec<Tensor> = model.store.frozen().iter().map(|&id| model.store.get(id).clone()).collect();
    let checksum = model.store.frozen_checksum();
    let mut run = cfg.clone();
    run.train.steps = FROZEN_STEPS;
    let mut opt = AdamWState::new(&model.store);
    let trained = train_loop(&mut model, &mut opt, &run, &data, None, |_| {}).is_ok();
    let frozen_after: Vec<Tensor> = model.store.frozen().iter().map(|&id| model.store.get(id).clone()).collect();
    let unchanged = frozen_before == frozen_after && checksum == model.store.frozen_checksum();
    outcome(
        identical && trained && unchanged,
        format!("bit-identical at init: {identical}; frozen unchanged over {FROZEN_STEPS} steps: {unchanged} (checksum {checksum:08x})"),
    )
}

// ---- 7, 8 --------------------------------------------------------------------

struct Run {
    dir: PathBuf,
    elapsed: Duration,
    ok: bool,
    stderr: String,
}

fn train_run(root: &Path, name: &str, config: &str, train: &Path, eval: &Path) -> Run {
    let dir = root.join(name);
    let cfg = root.join(format!("{name}.json"));
    std::fs::write(&cfg, config).unwrap();
    let t = Instant::now();
    let out = fovb(&[
        "train", "--config", path(&cfg), "--data", path(train), "--eval-data", path(eval), "--out", path(&dir),
    ]);
    Run { dir, elapsed: t.elapsed(), ok: out.status.success(), stderr: String::from_utf8_lossy(&out.stderr).into_owned() }
}

fn metric(json: &serde_json::Value, key: &str) -> f64 {
    json[key].as_f64().unwrap_or(f64::NAN)
}

fn end_to_end(root: &Path, train: &Path, eval: &Path, full: &Run) -> Outcome {
    if !full.ok {
        return outcome(false, format!("training failed: {}", full.stderr.lines().last().unwrap_or("")));
    }
    let out = fovb(&["eval", "--ckpt", path(&full.dir.join("checkpoint.fovb")), "--data", path(eval)]);
    let json: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap_or_default();
    let (a, p, c) = (metric(&json, "auc"), metric(&json, "ap"), metric(&json, "acc"));

    let short = format!(r#"{{"train": {{"steps": {RERUN_STEPS}}}}}"#);
    let r1 = train_run(root, "rerun1", &short, train, eval);
    let r2 = train_run(root, "rerun2", &short, train, eval);
    let trace = |dir: &Path| std::fs::read_to_string(dir.join("loss_trace.csv")).unwrap_or_default();
    let head = |s: String| s.lines().take(RERUN_STEPS + 1).map(str::to_string).collect::<Vec<_>>();
    let (t1, t2, tf) = (head(trace(&r1.dir)), head(trace(&r2.dir)), head(trace(&full.dir)));
    let exact = r1.ok && r2.ok && t1.len() == RERUN_STEPS + 1 && t1 == t2 && t1 == tf;

    let pass = a >= E2E_AUC && p >= E2E_AP && c >= E2E_ACC && full.elapsed < E2E_BUDGET && exact;
    outcome(
        pass,
        format!(
            "auc {a:.4} ap {p:.4} acc {c:.4}, trained in {:.0}s, first {RERUN_STEPS} steps bit-exact: {exact}",
            full.elapsed.as_secs_f64()
        ),
    )
}

fn mean_abs_cosines(csv: &str) -> Option<[f64; 3]> {
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next()?.split(',').collect();
    let d = (header.len() - 1) / 6;
    let block = |name: &str| header.iter().position(|h| *h == format!("{name}_mean_0"));
    let (c, sa, sv) = (block("c")?, block("s_a")?, block("s_v")?);
    let mut sums = [0.0; 3];
    let mut n = 0.0;
    for line in lines {
        let v: Vec<f64> = line.split(',').skip(1).map(|x| x.parse().unwrap_or(f64::NAN)).collect();
        let vec = |start: usize| &v[start - 1..start - 1 + d];
        let cos = |a: &[f64], b: &[f64]| {
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            (dot / (na * nb)).abs()
        };
        sums[0] += cos(vec(c), vec(sa));
        sums[1] += cos(vec(c), vec(sv));
        sums[2] += cos(vec(sa), vec(sv));
        n += 1.0;
    }
    Some(sums.map(|s| s / n))
}

fn disentanglement(root: &Path, train: &Path, eval: &Path, with_orth: &Run) -> Outcome {
    let ablation = train_run(root, "alpha0", r#"{"train": {"alpha": 0.0}}"#, train, eval);
    let mut means = Vec::new();
    for run in [with_orth, &ablation] {
        if !run.ok {
            return outcome(false, format!("training failed in {}", run.dir.display()));
        }
        let csv = run.dir.join("latents.csv");
        let out = fovb(&["dump-latents", "--ckpt", path(&run.dir.join("checkpoint.fovb")), "--data", path(eval), "--out", path(&csv)]);
        let cos = out.status.success().then(|| mean_abs_cosines(&std::fs::read_to_string(&csv).unwrap_or_default())).flatten();
        match cos {
            Some(c) => means.push(c),
            None => return outcome(false, "could not read latent dump"),
        }
    }
    let avg = |c: &[f64; 3]| c.iter().sum::<f64>() / 3.0;
    let (a, b) = (avg(&means[0]), avg(&means[1]));
    outcome(
        a < b,
        format!("alpha=0.1 {:.4} {:?} vs alpha=0 {:.4} {:?}", a, means[0].map(|v| (v * 1e4).round() / 1e4), b, means[1].map(|v| (v * 1e4).round() / 1e4)),
    )
}

// ---- 9 ---------------------------------------------------------------------

fn metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let mut mismatches = 0;
    for _ in 0..METRIC_CASES {
        let n = rng.random_range(2..=METRIC_MAX_LEN);
        let coarse = rng.random_bool(0.5);
        let mut y: Vec<u8> = (0..n).map(|_| rng.random_range(0..2)).collect();
        y[0] = 0;
        y[1] = 1;
        let s: Vec<f64> = (0..n).map(|_| if coarse { rng.random_range(0..4) as f64 / 3.0 } else { rng.random() }).collect();

        let (mut wins, mut pairs) = (0.0, 0.0);
        for i in 0..n {
            for j in 0..n {
                if y[i] == 1 && y[j] == 0 {
                    pairs += 1.0;
                    wins += if s[i] > s[j] { 1.0 } else if s[i] == s[j] { 0.5 } else { 0.0 };
                }
            }
        }
        let mut th = s.clone();
        th.sort_by(|a, b| b.total_cmp(a));
        th.dedup();
        let n_pos = y.iter().filter(|&&l| l == 1).count() as f64;
        let (mut ap, mut prev) = (0.0, 0.0);
        for t in th {
            let sel: Vec<usize> = (0..n).filter(|&i| s[i] >= t).collect();
            let tp = sel.iter().filter(|&&i| y[i] == 1).count() as f64;
            ap += (tp / n_pos - prev) * (tp / sel.len() as f64);
            prev = tp / n_pos;
        }
        if auc(&s, &y).unwrap() != wins / pairs || average_precision(&s, &y).unwrap() != ap {
            mismatches += 1;
        }
    }
    outcome(mismatches == 0, format!("{mismatches} mismatches in {METRIC_CASES} cases"))
}

// ---- 10 --------------------------------------------------------------------

fn format_integrity(root: &Path, eval: &Path, full: &Run) -> Outcome {
    let ckpt = full.dir.join("checkpoint.fovb");
    let Ok(bytes) = std::fs::read(&ckpt) else {
        return outcome(false, "no checkpoint");
    };
    let round_trip = load_checkpoint(&ckpt)
        .ok()
        .and_then(|c| encode(&to_entries(&c.config, &c.model, &c.optim)).ok())
        .is_some_and(|b| b == bytes);
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let bad = root.join("corrupt.fovb");
    let mut codes = Vec::new();
    for _ in 0..3 {
        let mut b = bytes.clone();
        let i = rng.random_range(0..b.len());
        b[i] = b[i].wrapping_add(rng.random_range(1..=255));
        std::fs::write(&bad, &b).unwrap();
        codes.push(fovb(&["eval", "--ckpt", path(&bad), "--data", path(eval)]).status.code());
    }
    let detected = codes.iter().all(|&c| c == Some(4));
    outcome(round_trip && detected, format!("round trip bit-exact: {round_trip}; corrupted exits {codes:?}"))
}

fn main() {
    let root = tempfile::tempdir().unwrap();
    let (train, eval) = (root.path().join("train.bin"), root.path().join("eval.bin"));
    let synth_ok = fovb(&["synth", "--out", path(&train), "--n", "2000", "--seed", "7"]).status.success()
        && fovb(&["synth", "--out", path(&eval), "--n", "500", "--seed", "8"]).status.success();
    assert!(synth_ok, "could not generate the synthetic datasets");

    let mut results = Vec::new();
    let mut report = |n: usize, name: &str, o: Outcome| {
        println!("criterion {n:>2} {} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push(o.pass);
    };
    report(1, "gradient integrity", gradient_integrity());
    report(2, "kernel oracles", kernel_oracles());
    report(3, "spectral filter", spectral_filter());
    report(4, "divergence oracles", divergence_oracles());
    report(5, "derivation identity", derivation_identity());
    report(6, "safe initialization", safe_init());
    let full = train_run(root.path(), "default", "{}", &train, &eval);
    report(7, "toy end-to-end", end_to_end(root.path(), &train, &eval, &full));
    report(8, "disentanglement direction", disentanglement(root.path(), &train, &eval, &full));
    report(9, "metric oracles", metric_oracles());
    report(10, "format integrity", format_integrity(root.path(), &eval, &full));

    let failed = results.iter().filter(|&&p| !p).count();
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
