use clap::{Args, Parser, Subcommand, ValueEnum};
use hazeforge::io::{
    contact_sheet, load_image, save_image, write_split, Manifest, Overrides, RunConfig,
};
use hazeforge::losses::Preset;
use hazeforge::metrics::evaluate;
use hazeforge::selfcheck::{run_checks, CheckGroup};
use hazeforge::tensor::htf;
use hazeforge::training::{loss_csv, run_ablation_grid, Sample, Trainer};
use hazeforge::{parallel, Error, Result};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[cfg(feature = "f32")]
type S = f32;
#[cfg(not(feature = "f32"))]
type S = f64;

#[derive(Parser)]
#[command(
    name = "hazeforge",
    version,
    about = "Joint transmission estimation and single-image dehazing"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// TOML run configuration; built-in defaults apply without it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    preset: Option<Preset>,
    /// Network initialization and batch-order seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Scene, haze and split seed.
    #[arg(long)]
    data_seed: Option<u64>,
    #[arg(long)]
    scenes: Option<usize>,
    #[arg(long)]
    image_size: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    stage1_iters: Option<usize>,
    #[arg(long)]
    stage2_iters: Option<usize>,
    #[arg(long)]
    scale: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Stage {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
    Both,
}

#[derive(Clone, Copy, ValueEnum)]
enum Module {
    All,
    Tensor,
    Losses,
    Networks,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a hazy dataset with train and test manifests.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the networks; writes checkpoints and loss CSVs.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "both")]
        stage: Stage,
        /// Dataset directory holding `train.manifest`.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Stage-1 checkpoint to start stage 2 from (default `<out>/stage1.htf`).
        #[arg(long)]
        from: Option<PathBuf>,
    },
    /// Dehaze one PNG with a trained checkpoint.
    Dehaze {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Write the estimated transmission: PNG for a `.png` path, otherwise
        /// an exact tensor file plus a PNG preview beside it.
        #[arg(long)]
        dump_transmission: Option<PathBuf>,
    },
    /// Score a checkpoint on a manifest split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Manifest file, or a dataset directory holding `<split>.manifest`.
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, default_value = "eval")]
        out: PathBuf,
        /// Also write per-image inference seconds to `timing.csv`.
        #[arg(long)]
        timing: bool,
    },
    /// Finite-difference gradient checks.
    Gradcheck {
        #[arg(long, value_enum, default_value = "all")]
        module: Module,
    },
    /// Train and score all six ablation presets on one dataset.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run_config(c: &Common, dataset: Option<PathBuf>, output: Option<PathBuf>) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(c.config.as_deref())?;
    cfg.apply(&Overrides {
        preset: c.preset,
        seed: c.seed,
        data_seed: c.data_seed,
        scenes: c.scenes,
        image_size: c.image_size,
        batch_size: c.batch_size,
        stage1_iters: c.stage1_iters,
        stage2_iters: c.stage2_iters,
        scale: c.scale,
        lr: c.lr,
        dataset,
        output,
    })?;
    Ok(cfg)
}

fn create_dir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(|e| Error::Io {
        path: p.to_path_buf(),
        source: e,
    })
}

fn write_text(p: &Path, text: &str) -> Result<()> {
    htf::write_atomic(p, text.as_bytes())
}

fn synth(common: &Common, out: Option<PathBuf>) -> Result<()> {
    let cfg = run_config(common, out, None)?;
    let dir = &cfg.paths.dataset;
    create_dir(dir)?;
    let data = cfg.synthesize::<S>()?;
    let train = write_split(dir, "train", &data.train, &data.sampling)?;
    let test = write_split(dir, "test", &data.test, &data.sampling)?;
    write_text(&dir.join("config.toml"), &cfg.to_toml()?)?;
    println!(
        "wrote {} train and {} test samples to {}",
        train.records.len(),
        test.records.len(),
        dir.display()
    );
    Ok(())
}

fn train(
    common: &Common,
    stage: Stage,
    data: Option<PathBuf>,
    out: Option<PathBuf>,
    from: Option<PathBuf>,
) -> Result<()> {
    let cfg = run_config(common, data, out)?;
    let out = &cfg.paths.output;
    create_dir(out)?;
    let manifest = Manifest::load(&cfg.paths.dataset.join("train.manifest"))?;
    let samples: Vec<Sample<S>> = manifest.load_samples()?;
    let tcfg = cfg.train_config();

    let mut trainer = match stage {
        Stage::One | Stage::Both => {
            let mut tr = Trainer::<S>::new(tcfg)?;
            let recs = tr.run_stage1(&samples)?;
            write_text(&out.join("loss_stage1.csv"), &loss_csv(&recs))?;
            tr.save_checkpoint(&out.join("stage1.htf"))?;
            println!(
                "stage 1: {} iterations, checkpoint {}",
                recs.len(),
                out.join("stage1.htf").display()
            );
            tr
        }
        Stage::Two => {
            Trainer::<S>::load_checkpoint(&from.unwrap_or_else(|| out.join("stage1.htf")))?
        }
    };
    if matches!(stage, Stage::Two | Stage::Both) {
        if cfg.preset.is_some_and(|p| !p.is_image_preset()) {
            println!("stage 2 skipped: transmission-only preset");
            return Ok(());
        }
        let recs = trainer.run_stage2(&samples)?;
        write_text(&out.join("loss_stage2.csv"), &loss_csv(&recs))?;
        trainer.save_checkpoint(&out.join("model.htf"))?;
        println!(
            "stage 2: {} iterations, checkpoint {}",
            recs.len(),
            out.join("model.htf").display()
        );
    }
    Ok(())
}

fn dehaze(checkpoint: &Path, input: &Path, out: &Path, dump: Option<&Path>) -> Result<()> {
    let mut tr = Trainer::<S>::load_checkpoint(checkpoint)?;
    let img = load_image::<S>(input)?;
    let (c, h, w) = img.dims3()?;
    let (t, j) = tr.predict(&img.reshape(&[1, c, h, w])?)?;
    save_image(&j.reshape(&[c, h, w])?, out)?;
    if let Some(p) = dump {
        let t = t.reshape(&[1, h, w])?;
        if p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            save_image(&t, p)?;
        } else {
            htf::save(&t, p)?;
            save_image(&t, &p.with_extension("png"))?;
        }
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn eval(checkpoint: &Path, manifest: &Path, split: &str, out: &Path, timing: bool) -> Result<()> {
    let mpath = if manifest.is_dir() {
        manifest.join(format!("{split}.manifest"))
    } else {
        manifest.to_path_buf()
    };
    let m = Manifest::load(&mpath)?;
    if m.header.split != split {
        return Err(Error::InvalidArgument(format!(
            "{} holds split {:?}, not {split:?}",
            mpath.display(),
            m.header.split
        )));
    }
    let samples: Vec<Sample<S>> = m.load_samples()?;
    let mut tr = Trainer::<S>::load_checkpoint(checkpoint)?;
    let c = &tr.cfg;
    let fingerprint = format!(
        "seed={} scale={} depth={} iters={}+{} done={}+{}",
        c.seed, c.scale, c.depth, c.stage1_iters, c.stage2_iters, tr.stage1_done, tr.stage2_done
    );
    let (report, preds) = evaluate(&mut tr, &samples, &fingerprint)?;
    create_dir(&out.join("sheets"))?;
    write_text(&out.join("eval.csv"), &report.to_csv())?;
    write_text(&out.join("eval_table.txt"), &report.to_table())?;
    if timing {
        write_text(&out.join("timing.csv"), &report.timing_csv())?;
    }
    let mut by_id: Vec<&Sample<S>> = samples.iter().collect();
    by_id.sort_by(|a, b| a.id.cmp(&b.id));
    for ((s, (_, j)), row) in by_id.iter().zip(&preds).zip(&report.rows) {
        let sheet = contact_sheet(&[&s.hazy, j, &s.clear])?;
        save_image(&sheet, &out.join("sheets").join(format!("{}.png", row.id)))?;
    }
    print!("{}", report.to_table());
    Ok(())
}

fn gradcheck(module: Module) -> Result<()> {
    let group = match module {
        Module::All => CheckGroup::All,
        Module::Tensor => CheckGroup::Tensor,
        Module::Losses => CheckGroup::Losses,
        Module::Networks => CheckGroup::Networks,
    };
    let results = run_checks(group)?;
    let mut failed = 0;
    for r in &results {
        println!(
            "{} {:<20} shapes={} max_rel_err={:.3e} tol={:.0e}",
            if r.passed() { "PASS" } else { "FAIL" },
            r.name,
            r.shapes,
            r.max_rel_err,
            r.tol
        );
        failed += usize::from(!r.passed());
    }
    if failed > 0 {
        return Err(Error::Autodiff(format!(
            "{failed} of {} gradient checks failed",
            results.len()
        )));
    }
    println!("all {} gradient checks passed", results.len());
    Ok(())
}

fn ablate(common: &Common, out: Option<PathBuf>) -> Result<()> {
    let cfg = run_config(common, None, out)?;
    let out = &cfg.paths.output;
    create_dir(out)?;
    let data = cfg.synthesize::<S>()?;
    let train: Vec<Sample<S>> = data.train.iter().map(Sample::from).collect();
    let test: Vec<Sample<S>> = data.test.iter().map(Sample::from).collect();
    let res = run_ablation_grid(&cfg.train, &Preset::ALL, &train, &test)?;
    for e in &res.entries {
        let dir = out.join(e.preset.name());
        create_dir(&dir)?;
        write_text(&dir.join("loss_stage1.csv"), &loss_csv(&e.stage1))?;
        if !e.stage2.is_empty() {
            write_text(&dir.join("loss_stage2.csv"), &loss_csv(&e.stage2))?;
        }
        write_text(&dir.join("eval.csv"), &e.report.to_csv())?;
    }
    let mut summary = res.summary();
    let _ = writeln!(summary, "\nseconds per preset");
    for e in &res.entries {
        let _ = writeln!(summary, "{:<12}{:>10.1}", e.preset.name(), e.seconds);
    }
    write_text(&out.join("ablation.txt"), &summary)?;
    print!("{summary}");
    match res.failure {
        Some((_, e)) => Err(e),
        None => Ok(()),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Synth { common, out } => synth(&common, out),
        Cmd::Train {
            common,
            stage,
            data,
            out,
            from,
        } => train(&common, stage, data, out, from),
        Cmd::Dehaze {
            checkpoint,
            input,
            out,
            dump_transmission,
        } => dehaze(&checkpoint, &input, &out, dump_transmission.as_deref()),
        Cmd::Eval {
            checkpoint,
            manifest,
            split,
            out,
            timing,
        } => eval(&checkpoint, &manifest, &split, &out, timing),
        Cmd::Gradcheck { module } => gradcheck(module),
        Cmd::Ablate { common, out } => ablate(&common, out),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let first = text
                .lines()
                .next()
                .unwrap_or("")
                .trim_start_matches("error: ");
            eprintln!("error[E_USAGE]: {first}");
            return ExitCode::from(2);
        }
    };
    parallel::configure_from_env();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {}", e.code(), e.to_string().replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
