//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any
//! criterion fails. Runs without the libtest harness so the lines always show.

use hazeforge::dataset::procedural_scene;
use hazeforge::io::RunConfig;
use hazeforge::losses::Preset;
use hazeforge::metrics::{dcp_atmospheric_light, dcp_dehaze, ssim, DcpOptions};
use hazeforge::networks::{
    build_dehazer, build_discriminator, build_generator, receptive_field, FULL_DEPTH,
};
use hazeforge::physics::{
    depth_to_transmission, invert_closed_form, synthesize_hazy, AirLight, DepthMap,
};
use hazeforge::selfcheck::{run_checks, CheckGroup};
use hazeforge::training::{run_ablation_grid, smoothed_endpoints, AblationResult, Sample};
use hazeforge::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

const GRADCHECK_BUDGET_S: f64 = 60.0;
const MIN_SHAPES: usize = 3;
const ROUND_TRIP_DRAWS: usize = 100;
const ROUND_TRIP_TOL: f64 = 1e-9;
const ROUND_TRIP_T_MIN: f64 = 0.05;
const SSIM_SELF_TOL: f64 = 1e-9;
const SSIM_SYM_TOL: f64 = 1e-12;
const DESK_SEED: u64 = 1;
const DESK_SIZE: usize = 64;
const DESK_SAMPLES: usize = 40;
const DESK_ITERS: usize = 200;
const DESK_BUDGET_S: f64 = 15.0 * 60.0;
const MIN_T_SSIM: f64 = 0.5;
const SMOOTH_WINDOW: usize = 10;
const LOSS_RATIO: f64 = 0.5;
const DENSE_BETA: f64 = 3.0;
const AIRLIGHT_TOL: f64 = 0.1;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: String) -> Outcome {
    Outcome { passed, detail }
}

fn gradients() -> Outcome {
    let start = Instant::now();
    let results = match run_checks(CheckGroup::All) {
        Ok(r) => r,
        Err(e) => return outcome(false, format!("error: {e}")),
    };
    let secs = start.elapsed().as_secs_f64();
    let failed: Vec<String> = results
        .iter()
        .filter(|r| !r.passed() || (r.tol < 1e-3 && r.shapes < MIN_SHAPES))
        .map(|r| format!("{} ({:.1e})", r.name, r.max_rel_err))
        .collect();
    let worst_op = results
        .iter()
        .filter(|r| r.tol < 1e-3)
        .map(|r| r.max_rel_err)
        .fold(0.0, f64::max);
    let worst_net = results
        .iter()
        .filter(|r| r.tol >= 1e-3)
        .map(|r| r.max_rel_err)
        .fold(0.0, f64::max);
    outcome(
        failed.is_empty() && secs < GRADCHECK_BUDGET_S,
        format!(
            "{} checks, worst op/loss {worst_op:.1e} (tol 1e-4), worst network {worst_net:.1e} (tol 1e-3), {secs:.1}s (budget {GRADCHECK_BUDGET_S}s){}",
            results.len(),
            if failed.is_empty() { String::new() } else { format!(", failing: {}", failed.join(", ")) }
        ),
    )
}

fn physics_round_trip() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst = 0.0f64;
    let mut checked = 0usize;
    for _ in 0..ROUND_TRIP_DRAWS {
        let (h, w) = (rng.random_range(4..24), rng.random_range(4..24));
        let clear = Tensor::<f64>::from_fn(&[3, h, w], |_| rng.random_range(0.0..1.0));
        let depth =
            DepthMap::new(Tensor::from_fn(&[1, h, w], |_| rng.random_range(0.0..1.0))).unwrap();
        let a = [0; 3].map(|_| rng.random_range(0.5..1.2));
        let beta = rng.random_range(0.4..1.6);
        let t = depth_to_transmission(&depth, beta).unwrap();
        let air = AirLight::Uniform(a);
        let hazy = synthesize_hazy(&clear, &t, &air).unwrap().image;
        let back = invert_closed_form(&hazy, &t, &air, ROUND_TRIP_T_MIN).unwrap();
        let n = h * w;
        for c in 0..3 {
            for i in 0..n {
                let tv = t.tensor().data()[i];
                let raw = clear.data()[c * n + i] * tv + a[c] * (1.0 - tv);
                if tv < ROUND_TRIP_T_MIN || !(0.0..=1.0).contains(&raw) {
                    continue;
                }
                checked += 1;
                worst = worst.max((back.data()[c * n + i] - clear.data()[c * n + i]).abs());
            }
        }
    }
    outcome(
        worst <= ROUND_TRIP_TOL && checked > 0,
        format!("{ROUND_TRIP_DRAWS} draws, {checked} unclamped pixels, max |dJ| {worst:.1e} (tol {ROUND_TRIP_TOL:.0e})"),
    )
}

/// Output channels of every convolution in an architecture string such as
/// `CP(15)-CBP(30)-TC(1)-TanH`; concatenations are skipped.
fn channels_of(arch: &str) -> Vec<usize> {
    arch.split('-')
        .filter(|s| s.starts_with('C') || s.starts_with("TC"))
        .filter(|s| !s.starts_with("Conca"))
        .filter_map(|s| {
            s.split_once('(')
                .and_then(|(_, n)| n.trim_end_matches(')').parse().ok())
        })
        .collect()
}

fn architecture() -> Outcome {
    let gen_arch = "CP(15)-CBP(30)-CBP(60)-CBP(120)-CBP(120)-CBP(120)-CBP(120)-CBP(120)-TCBR(120)-TCBR(120)-TCBR(120)-TCBR(120)-TCBR(60)-TCBR(30)-TCBR(15)-TC(1)-TanH";
    let disc_arch = "CB(48)-CBP(96)-CBP(192)-CBP(384)-CBP(384)-C(1)-Sigmoid";
    let dehaze_arch = "CP(20)-CBP(40)-CBP(80)-C(1)-Conca(2)-CP(80)-CBP(40)-CBP(20)-C(3)-TanH";
    let g = build_generator::<f64>(1.0, FULL_DEPTH).unwrap();
    let d = build_discriminator::<f64>(1.0, 1).unwrap();
    let e = build_dehazer::<f64>(1.0).unwrap();
    let checks = [
        ("generator", g.conv_channels(), channels_of(gen_arch)),
        ("discriminator", d.conv_channels(), channels_of(disc_arch)),
        ("dehazer", e.conv_channels(), channels_of(dehaze_arch)),
    ];
    let mismatched: Vec<&str> = checks
        .iter()
        .filter(|(_, a, b)| a != b)
        .map(|c| c.0)
        .collect();
    let rf = receptive_field(&d.spec).unwrap();
    outcome(
        mismatched.is_empty() && rf == 70,
        format!(
            "channel sequences {} ({}), discriminator receptive field {rf} (expected 70)",
            if mismatched.is_empty() {
                "match"
            } else {
                "differ"
            },
            checks
                .iter()
                .map(|c| format!("{} {}", c.0, c.1.len()))
                .collect::<Vec<_>>()
                .join(", ")
        ),
    )
}

fn ssim_properties() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = Tensor::<f64>::from_fn(&[3, 48, 48], |_| rng.random_range(0.2..0.8));
    let y = Tensor::<f64>::from_fn(&[3, 48, 48], |_| rng.random_range(0.0..1.0));
    let self_err = (ssim(&x, &x).unwrap() - 1.0).abs();
    let sym_err = (ssim(&x, &y).unwrap() - ssim(&y, &x).unwrap()).abs();
    let noise = Tensor::<f64>::from_fn(&[3, 48, 48], |_| rng.random_range(-1.0..1.0));
    let scores: Vec<f64> = [0.02, 0.05, 0.1, 0.2, 0.4]
        .iter()
        .map(|&amp| ssim(&x, &x.zip_map(&noise, |a, n| a + amp * n).unwrap()).unwrap())
        .collect();
    let monotone = scores.windows(2).all(|w| w[1] < w[0]);
    outcome(
        self_err <= SSIM_SELF_TOL && sym_err <= SSIM_SYM_TOL && monotone,
        format!(
            "|ssim(x,x)-1| {self_err:.1e} (tol 1e-9), asymmetry {sym_err:.1e} (tol 1e-12), noise sweep {}",
            scores.iter().map(|s| format!("{s:.4}")).collect::<Vec<_>>().join(" > ")
        ),
    )
}

fn desk_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.train.seed = DESK_SEED;
    cfg.train.image_size = DESK_SIZE;
    cfg.train.stage1_iters = DESK_ITERS;
    cfg.train.stage2_iters = DESK_ITERS;
    cfg
}

fn desk_effectiveness(grid: &AblationResult, samples: usize) -> Outcome {
    let Some(e) = grid.entry(Preset::IL2PerT) else {
        return outcome(false, "I-L2-Per-T did not complete".into());
    };
    let m = e.report.means();
    outcome(
        samples == DESK_SAMPLES
            && m.ssim_dehazed > m.ssim_input
            && m.ssim_transmission > MIN_T_SSIM
            && e.seconds < DESK_BUDGET_S,
        format!(
            "{samples} samples, held-out dehazed {:.4} vs input {:.4}, transmission {:.4} (> {MIN_T_SSIM}), {:.0}s (budget {DESK_BUDGET_S}s)",
            m.ssim_dehazed, m.ssim_input, m.ssim_transmission, e.seconds
        ),
    )
}

fn ablation_trend(grid: &AblationResult) -> Outcome {
    let mut parts = Vec::new();
    let mut ok = grid.failure.is_none() && grid.entries.len() == Preset::ALL.len();
    if let Some((p, e)) = &grid.failure {
        parts.push(format!("{p} failed: {e}"));
    }
    for e in &grid.entries {
        let recs = if e.preset.is_image_preset() {
            &e.stage2
        } else {
            &e.stage1
        };
        let finite = e
            .stage1
            .iter()
            .chain(&e.stage2)
            .all(|r| r.total.is_finite());
        let ratio = smoothed_endpoints(recs, SMOOTH_WINDOW).map(|(a, b)| b / a);
        let good = finite && ratio.is_some_and(|r| r < LOSS_RATIO);
        ok &= good;
        parts.push(format!("{} {:.2}", e.preset, ratio.unwrap_or(f64::NAN)));
    }
    outcome(
        ok,
        format!(
            "end/start smoothed Euclidean loss (< {LOSS_RATIO}): {}",
            parts.join(", ")
        ),
    )
}

fn dcp_baseline(test: &[Sample<f64>]) -> Outcome {
    let (mut input, mut dehazed) = (0.0, 0.0);
    for s in test {
        input += ssim(&s.hazy, &s.clear).unwrap();
        dehazed += ssim(
            &dcp_dehaze(&s.hazy, &DcpOptions::default()).unwrap().dehazed,
            &s.clear,
        )
        .unwrap();
    }
    let n = test.len() as f64;
    let (input, dehazed) = (input / n, dehazed / n);

    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut worst = 0.0f64;
    let mut dense = true;
    for k in 0..10 {
        let pair = procedural_scene::<f64, _>(&format!("a{k}"), DESK_SIZE, &mut rng);
        let t = depth_to_transmission(&pair.depth.unwrap(), DENSE_BETA).unwrap();
        dense &= t.tensor().min_value() < 0.2;
        let a = rng.random_range(0.5..1.0);
        let hazy = synthesize_hazy(&pair.clear, &t, &AirLight::gray(a))
            .unwrap()
            .image;
        let est = dcp_atmospheric_light(&hazy, 15, 0.001).unwrap();
        worst = est.iter().fold(worst, |m, &v| m.max((v - a).abs()));
    }
    outcome(
        dehazed > input && dense && worst <= AIRLIGHT_TOL,
        format!(
            "DCP SSIM {dehazed:.4} vs input {input:.4} on {} test images, worst |A err| {worst:.3} (tol {AIRLIGHT_TOL}) over 10 scenes with t < 0.2",
            test.len()
        ),
    )
}

fn run(bin: &str, dir: &Path, args: &[&str]) -> Result<(), String> {
    let out = Command::new(bin)
        .args(args)
        .current_dir(dir)
        .env("HAZEFORGE_THREADS", "0")
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!(
            "{args:?}: {}",
            String::from_utf8_lossy(&out.stderr).trim()
        ));
    }
    Ok(())
}

fn tree(dir: &Path, base: &Path, out: &mut Vec<(String, Vec<u8>)>) {
    let mut entries: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    entries.sort();
    for p in entries {
        if p.is_dir() {
            tree(&p, base, out);
        } else {
            let rel = p.strip_prefix(base).unwrap().display().to_string();
            out.push((rel, std::fs::read(&p).unwrap()));
        }
    }
}

fn determinism() -> Outcome {
    let bin = env!("CARGO_BIN_EXE_hazeforge");
    let root = tempfile::tempdir().unwrap();
    let config = "[data]\nscenes = 4\ndraws_per_image = 2\n\n[train]\nimage_size = 32\ndepth = 3\nbatch_size = 2\nstage1_iters = 4\nstage2_iters = 4\nseed = 3\n";
    let mut trees = Vec::new();
    for name in ["a", "b"] {
        let dir = root.path().join(name);
        std::fs::create_dir(&dir).unwrap();
        std::fs::write(dir.join("c.toml"), config).unwrap();
        let steps: [&[&str]; 3] = [
            &["synth", "--config", "c.toml", "--out", "data"],
            &[
                "train", "--config", "c.toml", "--data", "data", "--out", "run",
            ],
            &[
                "eval",
                "--checkpoint",
                "run/model.htf",
                "--manifest",
                "data",
                "--out",
                "eval",
            ],
        ];
        for args in steps {
            if let Err(e) = run(bin, &dir, args) {
                return outcome(false, e);
            }
        }
        let mut files = Vec::new();
        tree(&dir, &dir, &mut files);
        trees.push(files);
    }
    let differing: Vec<&str> = trees[0]
        .iter()
        .zip(&trees[1])
        .filter(|(x, y)| x != y)
        .map(|(x, _)| x.0.as_str())
        .collect();
    let same_names = trees[0]
        .iter()
        .map(|f| &f.0)
        .eq(trees[1].iter().map(|f| &f.0));
    let outputs = |prefix: &str| trees[0].iter().filter(|f| f.0.starts_with(prefix)).count();
    outcome(
        same_names && differing.is_empty(),
        format!(
            "serial runs: synth {} files, train {} files, eval {} files; {}",
            outputs("data"),
            outputs("run"),
            outputs("eval"),
            if differing.is_empty() {
                "all byte-identical".to_string()
            } else {
                format!("differ: {}", differing.join(", "))
            }
        ),
    )
}

fn main() {
    // libtest flags such as `--nocapture` are accepted and ignored; a name
    // filter that matches nothing here skips the suite.
    if std::env::args()
        .skip(1)
        .any(|a| !a.starts_with('-') && !"acceptance".contains(a.as_str()))
    {
        return;
    }
    let mut results: Vec<(&str, Outcome)> = Vec::new();
    let mut report = |name, o: Outcome| {
        println!(
            "{} {name}: {}",
            if o.passed { "PASS" } else { "FAIL" },
            o.detail
        );
        results.push((name, o));
    };
    report("1 gradient checks", gradients());
    report("2 physics round trip", physics_round_trip());
    report("3 architecture", architecture());
    report("4 ssim properties", ssim_properties());

    let cfg = desk_config();
    let data = cfg.synthesize::<f64>().unwrap();
    let train: Vec<Sample<f64>> = data.train.iter().map(Sample::from).collect();
    let test: Vec<Sample<f64>> = data.test.iter().map(Sample::from).collect();
    let total = train.len() + test.len();
    match run_ablation_grid(&cfg.train_config(), &Preset::ALL, &train, &test) {
        Ok(grid) => {
            report("5 desk training", desk_effectiveness(&grid, total));
            report("6 ablation grid", ablation_trend(&grid));
        }
        Err(e) => {
            report("5 desk training", outcome(false, format!("error: {e}")));
            report("6 ablation grid", outcome(false, format!("error: {e}")));
        }
    }
    report("7 dcp baseline", dcp_baseline(&test));
    report("8 determinism", determinism());

    let failed = results.iter().filter(|r| !r.1.passed).count();
    println!(
        "acceptance: {} passed, {failed} failed",
        results.len() - failed
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
