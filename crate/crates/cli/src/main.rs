use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};

use fovb_core::checkpoint::{load_checkpoint, save_checkpoint};
use fovb_core::config::RunConfig;
use fovb_core::data::{category_counts, load_dataset, save_dataset, synth_generate_mix, Category, Prepared, SyntheticSample};
use fovb_core::model::FovbModel;
use fovb_core::optim::AdamWState;
use fovb_core::train::{evaluate, posterior_latents, train_loop, TRACE_HEADER};
use fovb_core::verify::{divcheck, gradcheck_scope, search_chain, GradScope};
use fovb_core::Error;

#[derive(Parser)]
#[command(name = "fovb", version, about = "Audio-visual deepfake detection on synthetic data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset file.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        n: u64,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Train a model and write checkpoint, loss trace and metrics into a directory.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Training set; generated from the config when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Evaluation set; generated from the config when omitted.
        #[arg(long)]
        eval_data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint; training stops when the step counter reaches `train.steps`.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score a dataset with a checkpoint and print metrics.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Print `key=value` lines instead of JSON.
        #[arg(long)]
        text: bool,
    },
    /// Finite-difference gradient checks.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = ScopeArg::All)]
        scope: ScopeArg,
    },
    /// Divergence and bound oracles.
    Divcheck {
        #[arg(long, default_value_t = 100_000)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also search random Gaussian configurations for violations of the mixture-prior chain.
        #[arg(long)]
        search_c1: bool,
        #[arg(long, default_value_t = 200)]
        trials: usize,
    },
    /// Write per-sample posterior means and log-variances as CSV.
    DumpLatents {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ScopeArg {
    Ops,
    Glfa,
    Vbfe,
    Full,
    All,
}

/// A failed command: message and process exit code.
struct Failure {
    code: u8,
    msg: String,
}

const USAGE: u8 = 2;
const NUMERICAL: u8 = 3;
const INTEGRITY: u8 = 4;

fn code_of(e: &Error) -> u8 {
    match e {
        Error::Numerical { .. } => NUMERICAL,
        Error::Integrity(_) => INTEGRITY,
        _ => USAGE,
    }
}

/// Errors while reading inputs: I/O problems count as integrity failures.
fn reading(what: &Path) -> impl Fn(Error) -> Failure + '_ {
    move |e| Failure {
        code: if matches!(e, Error::Io(_)) { INTEGRITY } else { code_of(&e) },
        msg: format!("{}: {e}", what.display()),
    }
}

/// Errors while writing outputs: I/O problems are usage errors (bad path).
fn writing(what: &Path) -> impl Fn(Error) -> Failure + '_ {
    move |e| Failure { code: code_of(&e), msg: format!("{}: {e}", what.display()) }
}

fn io_writing(what: &Path) -> impl Fn(std::io::Error) -> Failure + '_ {
    move |e| Failure { code: USAGE, msg: format!("{}: {e}", what.display()) }
}

fn fail(e: Error) -> Failure {
    Failure { code: code_of(&e), msg: e.to_string() }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}

fn run(cmd: Command) -> Result<u8, Failure> {
    match cmd {
        Command::Synth { out, n, seed } => synth(&out, n as usize, seed),
        Command::Train { config, data, eval_data, out, resume } => {
            train(config.as_deref(), data.as_deref(), eval_data.as_deref(), &out, resume.as_deref())
        }
        Command::Eval { ckpt, data, text } => eval(&ckpt, &data, text),
        Command::Gradcheck { seed, scope } => gradcheck(seed, scope),
        Command::Divcheck { samples, seed, search_c1, trials } => divcheck_cmd(samples, seed, search_c1, trials),
        Command::DumpLatents { ckpt, data, out } => dump_latents(&ckpt, &data, &out),
    }
}

fn synth(out: &Path, n: usize, seed: u64) -> Result<u8, Failure> {
    let mix = [0.25; 4];
    let samples = synth_generate_mix(n, seed, &mix).map_err(fail)?;
    save_dataset(&samples, out).map_err(writing(out))?;
    let counts = category_counts(n, &mix).map_err(fail)?;
    for (c, k) in Category::ALL.iter().zip(counts) {
        println!("{}={k}", c.name());
    }
    Ok(0)
}

fn load_config(path: Option<&Path>) -> Result<RunConfig, Failure> {
    match path {
        None => Ok(RunConfig::default()),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Failure { code: USAGE, msg: format!("{}: {e}", p.display()) })?;
            RunConfig::from_json(&text).map_err(|e| Failure { code: USAGE, msg: format!("{}: {e}", p.display()) })
        }
    }
}

fn dataset(path: Option<&Path>, n: usize, seed: u64, mix: &[f64; 4]) -> Result<Vec<SyntheticSample>, Failure> {
    match path {
        Some(p) => load_dataset(p).map_err(reading(p)),
        None => synth_generate_mix(n, seed, mix).map_err(fail),
    }
}

fn prepare(samples: &[SyntheticSample], cfg: &RunConfig, what: &str) -> Result<Prepared, Failure> {
    Prepared::new(samples, cfg.model.input_size, cfg.model.patch)
        .map_err(|e| Failure { code: INTEGRITY, msg: format!("{what}: {e}") })
}

fn train(
    config: Option<&Path>,
    data: Option<&Path>,
    eval_data: Option<&Path>,
    out: &Path,
    resume: Option<&Path>,
) -> Result<u8, Failure> {
    let (cfg, mut model, mut opt) = match resume {
        None => {
            let cfg = load_config(config)?;
            let model = FovbModel::new(&cfg.model, cfg.seed, cfg.train.mc_samples).map_err(fail)?;
            let opt = AdamWState::new(&model.store);
            (cfg, model, opt)
        }
        Some(ck) => {
            let saved = load_checkpoint(ck).map_err(reading(ck))?;
            let cfg = match config {
                None => saved.config.clone(),
                Some(_) => {
                    let cfg = load_config(config)?;
                    if cfg.model != saved.config.model || cfg.seed != saved.config.seed {
                        return Err(Failure {
                            code: USAGE,
                            msg: "resume config must keep the checkpoint's seed and model section".into(),
                        });
                    }
                    cfg
                }
            };
            (cfg, saved.model, saved.optim)
        }
    };
    let train_set = dataset(data, cfg.data.n_train, cfg.seed, &cfg.data.category_mix)?;
    let eval_set = dataset(eval_data, cfg.data.n_eval, cfg.seed.wrapping_add(1), &cfg.data.category_mix)?;
    let train_prep = prepare(&train_set, &cfg, "training data")?;
    let eval_prep = prepare(&eval_set, &cfg, "evaluation data")?;

    fs::create_dir_all(out).map_err(io_writing(out))?;
    let trace_path = out.join("loss_trace.csv");
    let mut trace = fs::File::create(&trace_path).map_err(io_writing(&trace_path))?;
    writeln!(trace, "{TRACE_HEADER}").map_err(io_writing(&trace_path))?;
    let mut trace_err = None;
    let started = Instant::now();
    let result = train_loop(&mut model, &mut opt, &cfg, &train_prep, Some(&eval_prep), |row| {
        if let Err(e) = writeln!(trace, "{}", row.to_csv()) {
            trace_err.get_or_insert(e);
        }
        if row.step % 100 == 0 {
            eprintln!("step {} loss {:.5} ({:.0}s)", row.step, row.loss, started.elapsed().as_secs_f64());
        }
    });
    if let Some(e) = trace_err {
        return Err(io_writing(&trace_path)(e));
    }
    let log = result.map_err(|e| Failure { code: code_of(&e), msg: format!("training aborted: {e}") })?;
    for (step, m) in &log.evals {
        eprintln!("eval at step {step}: acc={:.4} ap={:.4} auc={:.4}", m.acc, m.ap, m.auc);
    }

    let ckpt = out.join("checkpoint.fovb");
    save_checkpoint(&ckpt, &cfg, &model, &opt).map_err(writing(&ckpt))?;
    let metrics = evaluate(&model, &eval_prep).map_err(fail)?;
    let json_path = out.join("metrics.json");
    let json = serde_json::to_string_pretty(&metrics).expect("metrics serialize");
    fs::write(&json_path, json + "\n").map_err(io_writing(&json_path))?;
    let txt_path = out.join("metrics.txt");
    fs::write(&txt_path, metrics.to_text()).map_err(io_writing(&txt_path))?;
    print!("{}", metrics.to_text());
    eprintln!("trained to step {} in {:.1}s", opt.step, started.elapsed().as_secs_f64());
    Ok(0)
}

fn eval(ckpt: &Path, data: &Path, text: bool) -> Result<u8, Failure> {
    let saved = load_checkpoint(ckpt).map_err(reading(ckpt))?;
    let samples = load_dataset(data).map_err(reading(data))?;
    let prep = prepare(&samples, &saved.config, "evaluation data")?;
    let metrics = evaluate(&saved.model, &prep).map_err(fail)?;
    if text {
        print!("{}", metrics.to_text());
    } else {
        println!("{}", serde_json::to_string_pretty(&metrics).expect("metrics serialize"));
    }
    Ok(0)
}

fn gradcheck(seed: u64, scope: ScopeArg) -> Result<u8, Failure> {
    let scopes: Vec<GradScope> = match scope {
        ScopeArg::Ops => vec![GradScope::Ops],
        ScopeArg::Glfa => vec![GradScope::Glfa],
        ScopeArg::Vbfe => vec![GradScope::Vbfe],
        ScopeArg::Full => vec![GradScope::Full],
        ScopeArg::All => GradScope::ALL.to_vec(),
    };
    let mut ok = true;
    for s in scopes {
        let report = gradcheck_scope(s, seed).map_err(fail)?;
        print!("{}", report.to_text());
        ok &= report.passes();
    }
    Ok(if ok { 0 } else { NUMERICAL })
}

fn divcheck_cmd(samples: usize, seed: u64, search: bool, trials: usize) -> Result<u8, Failure> {
    if samples < 2 {
        return Err(Failure { code: USAGE, msg: "--samples must be at least 2".into() });
    }
    let mut report = divcheck(samples, seed).map_err(fail)?;
    if search {
        report.chain = Some(search_chain(trials, 2_000, seed).map_err(fail)?);
    }
    print!("{}", report.to_text());
    Ok(if report.passes() { 0 } else { NUMERICAL })
}

fn dump_latents(ckpt: &Path, data: &Path, out: &Path) -> Result<u8, Failure> {
    let saved = load_checkpoint(ckpt).map_err(reading(ckpt))?;
    let samples = load_dataset(data).map_err(reading(data))?;
    let prep = prepare(&samples, &saved.config, "latent data")?;
    let lat = posterior_latents(&saved.model, &prep).map_err(fail)?;
    let d = saved.config.model.dim;
    let mut csv = String::from("category");
    for name in ["c", "s_a", "s_v"] {
        for kind in ["mean", "log_var"] {
            for i in 0..d {
                let _ = write!(csv, ",{name}_{kind}_{i}");
            }
        }
    }
    csv.push('\n');
    for (row, cat) in prep.categories.iter().enumerate() {
        csv.push_str(cat.name());
        for (mean, log_var) in lat.as_array() {
            for t in [mean, log_var] {
                for v in &t.data()[row * d..(row + 1) * d] {
                    let _ = write!(csv, ",{v:e}");
                }
            }
        }
        csv.push('\n');
    }
    fs::write(out, csv).map_err(io_writing(out))?;
    Ok(0)
}
