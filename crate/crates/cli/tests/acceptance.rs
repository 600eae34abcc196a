//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.

use std::error::Error;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use oxygan::data::manifest::{split_counts, CaseEntry, DatasetManifest, Provenance, Split, Tissue};
use oxygan::data::{build_dataset, crop_grid, crop_slide, synth_cases, AugmentConfig, SynthConfig};
use oxygan::eval::{eval_full, pair_errors};
use oxygan::nn::{checkpoint, Mode, Network, NetworkConfig};
use oxygan::objective::{d_loss, GanTrainer, TrainConfig};
use oxygan::tensor::{gradcheck, oxt};
use oxygan::{Tape, Tensor};

type Check = Result<String, Box<dyn Error>>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        let ok: bool = $cond;
        if !ok {
            return Err(format!($($msg)+).into());
        }
    };
}

const GRADCHECK_SECONDS: f64 = 60.0;
const GEOMETRY_SECONDS: f64 = 1.0;
const SHAPES_SECONDS: f64 = 10.0;
const EQUILIBRIUM_TOL: f64 = 1e-6;
const OVERFIT_ERROR: f64 = 0.05;
const OVERFIT_SECONDS: f64 = 30.0 * 60.0;

/// Criteria 5 and 7. Nine 64×64 cases at ratio 0.889 give eight training
/// pairs and one held-out case.
const OVERFIT_CONFIG: &str = r#"{
  "synth": {"n_cases": 9, "train_ratio": 0.889, "source": {"height": 64, "width": 64, "seed": 5}},
  "augment": {"augment": false, "net_size": 64},
  "train": {"lambda_l1": 100, "batch_size": 4, "max_iterations": 2000, "log_every": 10, "seed": 7,
            "network": {"image_size": 64, "base_filters": 32}}
}"#;

/// Criterion 6, shrunk so five training runs fit in a few minutes.
const SWEEP_CONFIG: &str = r#"{
  "synth": {"n_cases": 12, "train_ratio": 0.75, "source": {"height": 48, "width": 48, "seed": 11}},
  "augment": {"window": 32, "stride": 16, "net_size": 32},
  "train": {"batch_size": 4, "max_iterations": 600, "log_every": 50, "seed": 3,
            "network": {"image_size": 32, "base_filters": 16}},
  "eval": {"intracase_cases": 3},
  "sweep": {"lambdas": [50, 100, 200, 400], "control": true}
}"#;

fn pattern(dims: &[usize], phase: f32) -> Tensor {
    Tensor::from_fn(dims, |i| (i as f32 * 0.618 + phase).sin() * 0.9)
}

fn oxygan(args: &[&str]) -> Result<(), Box<dyn Error>> {
    let out = Command::new(env!("CARGO_BIN_EXE_oxygan"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()?;
    ensure!(
        out.status.success(),
        "oxygan {:?}: {}",
        args,
        String::from_utf8_lossy(&out.stderr).trim()
    );
    Ok(())
}

fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 temp path")
}

fn gradient_suite() -> Check {
    let t = Instant::now();
    let reports = gradcheck::run_all(0)?;
    let secs = t.elapsed().as_secs_f64();
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passed()).map(|r| r.op.as_str()).collect();
    ensure!(failed.is_empty(), "ops above tolerance {}: {failed:?}", gradcheck::TOLERANCE);
    ensure!(secs < GRADCHECK_SECONDS, "took {secs:.1} s");
    let worst = reports.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    Ok(format!(
        "{} ops, eps {}, max rel error {worst:.2e} < {}, {secs:.2} s",
        reports.len(),
        gradcheck::EPS,
        gradcheck::TOLERANCE
    ))
}

fn augmentation_geometry() -> Check {
    let t = Instant::now();
    ensure!(crop_grid(192, 256, 128, 16)? == (5, 9), "crop grid");
    let crops = crop_slide(&Tensor::zeros(&[3, 192, 256]), 128, 16)?;
    ensure!(crops.len() == 45, "{} crops", crops.len());
    ensure!(AugmentConfig::full_scale().pairs_per_case(192, 256)? == 45, "pairs_per_case");
    ensure!(split_counts(222, 0.752)? == (167, 55), "split_counts");
    let tiny = SynthConfig {
        height: 4,
        width: 4,
        ..SynthConfig::default()
    };
    let cases = synth_cases(&tiny, 222, 0.752)?;
    let train = cases.iter().filter(|c| c.split == Split::Train).count();
    ensure!(
        (train, cases.len() - train) == (167, 55),
        "synthesized split {train}/{}",
        cases.len() - train
    );
    let secs = t.elapsed().as_secs_f64();
    ensure!(secs < GEOMETRY_SECONDS, "took {secs:.2} s");
    Ok(format!("45 crops, 167/55 split, {secs:.3} s"))
}

fn shape_contracts() -> Check {
    let t = Instant::now();
    let g = Network::generator(&NetworkConfig::with_size(256), 1)?;
    let y = g.infer_in(Mode::Eval, &pattern(&[1, 3, 256, 256], 0.0), None)?;
    ensure!(y.dims() == [1, 3, 256, 256], "G output {:?}", y.dims());
    ensure!(y.data().iter().all(|v| (-1.0..=1.0).contains(v)), "G output outside [-1, 1]");
    let mut sides = Vec::new();
    for (size, want) in [(256, 30), (64, 6)] {
        let d = Network::discriminator(&NetworkConfig::with_size(size), 2)?;
        let logits = d.infer_in(Mode::Eval, &pattern(&[1, 6, size, size], 1.0), None)?;
        ensure!(logits.dims() == [1, 1, want, want], "D at {size}: {:?}", logits.dims());
        sides.push(format!("{size}→{want}×{want}"));
    }
    let secs = t.elapsed().as_secs_f64();
    ensure!(secs < SHAPES_SECONDS, "took {secs:.1} s");
    Ok(format!("G 3×256×256 in [-1, 1], D {}, {secs:.2} s", sides.join(", ")))
}

fn equilibrium_value() -> Check {
    let mut worst = 0.0f64;
    for n in [1, 4, 56] {
        let mut tape: Tape = Tape::new();
        let real = tape.constant(Tensor::zeros(&[n, 1, 30, 30]));
        let fake = tape.constant(Tensor::zeros(&[n, 1, 30, 30]));
        let loss = d_loss(&mut tape, real, fake)?;
        let err = (tape.value(loss).item()? as f64 - std::f64::consts::LN_2).abs();
        ensure!(err <= EQUILIBRIUM_TOL, "batch {n}: |d_loss - ln 2| = {err:.2e}");
        worst = worst.max(err);
    }
    Ok(format!(
        "batches 1, 4, 56: max |d_loss - ln 2| = {worst:.1e} <= {EQUILIBRIUM_TOL:e}"
    ))
}

type Files = Vec<(PathBuf, Vec<u8>)>;

fn files_under(root: &Path) -> Result<Files, Box<dyn Error>> {
    let mut out = Vec::new();
    for e in fs::read_dir(root)? {
        let p = e?.path();
        out.push((p.strip_prefix(root)?.to_path_buf(), fs::read(&p)?));
    }
    out.sort();
    Ok(out)
}

fn overfit_runs(work: &Path) -> Result<(PathBuf, PathBuf, f64), Box<dyn Error>> {
    let cfg = work.join("overfit.json");
    fs::write(&cfg, OVERFIT_CONFIG)?;
    let data = work.join("overfit_data");
    oxygan(&["synth", "--config", s(&cfg), "--out", s(&data), "--deterministic"])?;
    let manifest = data.join("manifest.json");
    let mut secs = 0.0;
    let mut dirs = Vec::new();
    for run in ["run_a", "run_b"] {
        let dir = work.join(run);
        let t = Instant::now();
        oxygan(&[
            "train",
            "--config",
            s(&cfg),
            "--manifest",
            s(&manifest),
            "--out",
            s(&dir),
            "--deterministic",
        ])?;
        secs = t.elapsed().as_secs_f64();
        dirs.push(dir);
    }
    let b = dirs.pop().unwrap();
    Ok((dirs.pop().unwrap(), b, secs))
}

fn g_l1_at(csv: &str, iteration: usize) -> Option<f64> {
    csv.lines()
        .filter(|l| !l.starts_with('#'))
        .skip(1)
        .map(|l| l.split(',').collect::<Vec<_>>())
        .find(|f| f[0].parse() == Ok(iteration))
        .and_then(|f| f[3].parse().ok())
}

fn overfit(work: &Path, run: &Path, secs: f64) -> Check {
    let csv = fs::read_to_string(run.join("loss_history.csv"))?;
    let early = g_l1_at(&csv, 100).ok_or("no record at iteration 100")?;
    let last = g_l1_at(&csv, 2000).ok_or("no record at iteration 2000")?;
    ensure!(last < early, "g_l1 {last} at 2000 is not below {early} at 100");

    let ck = checkpoint::load(&run.join("checkpoints/ckpt_002000.json"))?;
    let g = ck.generator.ok_or("checkpoint has no generator")?;
    let manifest_path = work.join("overfit_data/manifest.json");
    let manifest = DatasetManifest::load(&manifest_path)?;
    let cases = manifest.load_images(manifest_path.parent().unwrap())?;
    let ds = build_dataset(
        &cases,
        &AugmentConfig {
            augment: false,
            net_size: 64,
            ..AugmentConfig::default()
        },
    )?;
    let pairs = ds.train_pairs();
    ensure!(pairs.len() == 8, "{} training pairs", pairs.len());
    let errs = pair_errors(&g, &pairs, 8)?;
    let err = errs.iter().sum::<f64>() / errs.len() as f64;
    ensure!(err < OVERFIT_ERROR, "train mean intensity error {err:.4}");
    ensure!(secs < OVERFIT_SECONDS, "training took {secs:.0} s");
    Ok(format!(
        "train error {err:.4} < {OVERFIT_ERROR}, g_l1 {early:.4} → {last:.4}, {secs:.0} s single-threaded"
    ))
}

fn determinism(a: &Path, b: &Path) -> Check {
    let csv_a = fs::read(a.join("loss_history.csv"))?;
    ensure!(csv_a == fs::read(b.join("loss_history.csv"))?, "loss histories differ");
    let (ck_a, ck_b) = (files_under(&a.join("checkpoints"))?, files_under(&b.join("checkpoints"))?);
    ensure!(!ck_a.is_empty(), "no checkpoints written");
    ensure!(ck_a == ck_b, "checkpoint files differ");
    let bytes: usize = ck_a.iter().map(|(_, b)| b.len()).sum();
    Ok(format!(
        "loss CSV ({} bytes) and {} checkpoint files ({bytes} bytes) identical",
        csv_a.len(),
        ck_a.len()
    ))
}

fn sweep(work: &Path) -> Check {
    let t = Instant::now();
    let cfg = work.join("sweep.json");
    fs::write(&cfg, SWEEP_CONFIG)?;
    let out = work.join("sweep");
    oxygan(&["sweep", "--config", s(&cfg), "--out", s(&out)])?;
    let csv = fs::read_to_string(out.join("sweep.csv"))?;
    let lines: Vec<&str> = csv.lines().filter(|l| !l.starts_with('#')).collect();
    ensure!(
        lines.first() == Some(&"axis,value,inter_error,intra_error"),
        "header {:?}",
        lines.first()
    );
    let rows = &lines[1..];
    ensure!(rows.len() == 4, "{} rows", rows.len());
    let mut inter = Vec::new();
    for (row, lambda) in rows.iter().zip(["50", "100", "200", "400"]) {
        let f: Vec<&str> = row.split(',').collect();
        ensure!(f.len() == 4 && f[0] == "lambda" && f[1] == lambda, "row {row:?}");
        for v in &f[2..] {
            let v: f64 = v.parse().map_err(|_| format!("row {row:?} has a missing error"))?;
            ensure!(v.is_finite() && (0.0..=1.0).contains(&v), "row {row:?} out of range");
        }
        inter.push(f[2].parse::<f64>()?);
    }
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("sweep_summary.json"))?)?;
    let control = summary["report"]["control"]["inter_error"]
        .as_f64()
        .ok_or("control run has no inter_error")?;
    ensure!(inter[3] <= control, "λ=400 inter_error {:.4} > control {control:.4}", inter[3]);
    Ok(format!(
        "4 rows, inter_error {} vs control {control:.4}, {:.0} s",
        inter.iter().map(|v| format!("{v:.4}")).collect::<Vec<_>>().join("/"),
        t.elapsed().as_secs_f64()
    ))
}

fn format_round_trips(work: &Path) -> Check {
    let t = pattern(&[2, 3, 5, 7], 0.3).map(|v| v * 1e-3 + f32::EPSILON);
    let path = work.join("t.oxt");
    oxt::save(&t, &path)?;
    let back = oxt::load(&path)?;
    ensure!(back.dims() == t.dims() && back.bit_eq(&t), "OXT1 mismatch");

    let net = NetworkConfig {
        base_filters: 4,
        ..NetworkConfig::with_size(32)
    };
    let train = TrainConfig {
        network: net,
        batch_size: 2,
        ..TrainConfig::default()
    };
    let mut trainer = GanTrainer::new(&train)?;
    let pairs: Vec<_> = (0..2)
        .map(|i| oxygan::data::SamplePair {
            x: pattern(&[3, 32, 32], i as f32),
            y: pattern(&[3, 32, 32], 2.0 + i as f32),
            case_id: format!("p{i}"),
            crop_index: 0,
            offset: (0, 0),
        })
        .collect();
    let refs: Vec<_> = pairs.iter().collect();
    for _ in 0..3 {
        trainer.train_step(&refs, &train)?;
    }
    let (g, d) = (&trainer.generator, &trainer.discriminator);
    checkpoint::save(work, "ck", &[g, d], 3, "hash")?;
    let ck = checkpoint::load(&work.join("ck.json"))?;
    let x = pattern(&[2, 3, 32, 32], 4.0);
    let (g2, d2) = (ck.generator.ok_or("no G")?, ck.discriminator.ok_or("no D")?);
    ensure!(
        g.infer_in(Mode::Eval, &x, None)?.bit_eq(&g2.infer_in(Mode::Eval, &x, None)?),
        "generator output differs"
    );
    let xy = pattern(&[2, 6, 32, 32], 5.0);
    ensure!(
        d.infer_in(Mode::Eval, &xy, None)?.bit_eq(&d2.infer_in(Mode::Eval, &xy, None)?),
        "discriminator output differs"
    );

    let manifest = DatasetManifest {
        provenance: Provenance {
            source: "acceptance".into(),
            seed: Some(9),
            config_hash: None,
        },
        cases: vec![
            CaseEntry {
                case_id: "a".into(),
                tissue: Tissue::PorcineBowel,
                rgb_path: "a_rgb.png".into(),
                sto2_path: "a_sto2.png".into(),
                split: Split::Train,
            },
            CaseEntry {
                case_id: "b".into(),
                tissue: Tissue::LambUterus,
                rgb_path: "b/rgb.oxt".into(),
                sto2_path: "b/sto2.oxt".into(),
                split: Split::Test,
            },
        ],
    };
    let json = manifest.to_json();
    let back = DatasetManifest::from_json(&json, Path::new("m.json"))?;
    ensure!(back == manifest && back.to_json() == json, "manifest JSON changed");
    Ok("OXT1 bit-exact, checkpoint G/D outputs bitwise equal, manifest lossless".into())
}

fn evaluation_invariance() -> Check {
    let synth = SynthConfig {
        height: 64,
        width: 64,
        seed: 21,
        ..SynthConfig::default()
    };
    let cases = synth_cases(&synth, 20, 0.2)?;
    let ds = build_dataset(
        &cases,
        &AugmentConfig {
            window: 32,
            stride: 8,
            net_size: 32,
            ..AugmentConfig::default()
        },
    )?;
    let test = ds.test_cases();
    let n: usize = test.iter().map(|c| c.pairs.len()).sum();
    let mut g = Network::generator(
        &NetworkConfig {
            base_filters: 8,
            ..NetworkConfig::with_size(32)
        },
        4,
    )?;
    g.set_mode(Mode::Eval);
    let one = eval_full(&g, &test, 1)?;
    let many = eval_full(&g, &test, 380)?;
    ensure!(
        one.mean_error.to_bits() == many.mean_error.to_bits(),
        "mean {} vs {}",
        one.mean_error,
        many.mean_error
    );
    ensure!(one == many, "per-case results differ");
    Ok(format!(
        "{n} test pairs over {} cases, full error {:.6} identical",
        test.len(),
        one.mean_error
    ))
}

fn main() {
    let work = tempfile::tempdir().expect("temp dir");
    let work = work.path();
    let mut failures = 0;
    let mut report = |id: u32, name: &str, check: Check| match check {
        Ok(detail) => println!("PASS  [{id}] {name}: {detail}"),
        Err(e) => {
            failures += 1;
            println!("FAIL  [{id}] {name}: {e}");
        }
    };
    report(1, "gradient suite", gradient_suite());
    report(2, "augmentation geometry", augmentation_geometry());
    report(3, "shape contracts", shape_contracts());
    report(4, "equilibrium value", equilibrium_value());
    let determinism_check = match overfit_runs(work) {
        Ok((a, b, secs)) => {
            report(5, "overfit run", overfit(work, &a, secs));
            determinism(&a, &b)
        }
        Err(e) => {
            report(5, "overfit run", Err(e.to_string().into()));
            Err("overfit runs did not complete".into())
        }
    };
    report(6, "lambda sweep", sweep(work));
    report(7, "determinism", determinism_check);
    report(8, "format round-trips", format_round_trips(work));
    report(9, "evaluation invariance", evaluation_invariance());
    if failures > 0 {
        println!("{failures} acceptance criteria failed");
        std::process::exit(1);
    }
}
