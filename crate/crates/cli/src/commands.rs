use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use oxygan::data::{
    self, build_dataset, normalize, png, replicate_channels, resize_bilinear, synth_cases, take_channel, CaseEntry, CaseImages, Dataset,
    DatasetManifest, Provenance, Split,
};
use oxygan::eval::{self, emit_qualitative, evaluate, generator_predictor, write_sweep_csv, Predictor};
use oxygan::nn::checkpoint;
use oxygan::objective::{train_loop, write_history_csv, DirCheckpoints};
use oxygan::tensor::{gradcheck, oxt};
use oxygan::Tensor;
use serde::Serialize;
use serde_json::json;

use crate::config::RunConfig;
use crate::error::CliError;
use crate::Common;

/// The effective configuration and output directory of one invocation.
pub struct Context {
    pub out: PathBuf,
    pub cfg: RunConfig,
    pub hash: String,
    deterministic: bool,
    started: Instant,
}

fn prepare_out(out: &Path, force: bool) -> Result<(), CliError> {
    if out.exists() {
        if !out.is_dir() {
            return Err(CliError::Usage(format!("output path {} is not a directory", out.display())));
        }
        let mut entries = fs::read_dir(out).map_err(|e| CliError::io("listing output directory", out, e))?;
        if entries.next().is_some() && !force {
            return Err(CliError::Usage(format!(
                "output directory {} is not empty; pass --force to write into it",
                out.display()
            )));
        }
    }
    fs::create_dir_all(out).map_err(|e| CliError::io("creating output directory", out, e))
}

impl Context {
    /// Validates the config, prepares the output directory and records the
    /// effective config as `run_config.json`.
    pub fn new(common: &Common, cfg: RunConfig) -> Result<Self, CliError> {
        cfg.validate()?;
        prepare_out(&common.out, common.force)?;
        let ctx = Context {
            out: common.out.clone(),
            hash: cfg.hash(),
            cfg,
            deterministic: common.deterministic,
            started: Instant::now(),
        };
        ctx.write("run_config.json", ctx.cfg.to_json().as_bytes())?;
        info!("config hash {}", ctx.hash);
        Ok(ctx)
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.out.join(rel)
    }

    fn mkdir(&self, rel: &str) -> Result<PathBuf, CliError> {
        let p = self.path(rel);
        fs::create_dir_all(&p).map_err(|e| CliError::io("creating directory", &p, e))?;
        Ok(p)
    }

    fn write(&self, rel: &str, bytes: &[u8]) -> Result<PathBuf, CliError> {
        let p = self.path(rel);
        fs::write(&p, bytes).map_err(|e| CliError::io("writing output", &p, e))?;
        Ok(p)
    }

    fn write_json(&self, rel: &str, value: &impl Serialize) -> Result<PathBuf, CliError> {
        let mut text = serde_json::to_string_pretty(value).expect("summary serializes");
        text.push('\n');
        self.write(rel, text.as_bytes())
    }

    /// CSV with a leading `# config_hash=...` comment line.
    fn write_csv(&self, rel: &str, body: &[u8]) -> Result<PathBuf, CliError> {
        let mut bytes = format!("# config_hash={}\n", self.hash).into_bytes();
        bytes.extend_from_slice(body);
        self.write(rel, &bytes)
    }

    /// Wall-clock seconds so far, omitted in deterministic mode.
    fn runtime(&self) -> Option<f64> {
        (!self.deterministic).then(|| self.started.elapsed().as_secs_f64())
    }

    fn load_cases(&self, manifest: Option<&Path>) -> Result<Vec<CaseImages>, CliError> {
        match manifest {
            Some(path) => {
                let m = DatasetManifest::load(path)?;
                info!("loading {} cases from {}", m.cases.len(), path.display());
                Ok(m.load_images(path.parent().unwrap_or(Path::new(".")))?)
            }
            None => {
                let s = &self.cfg.synth;
                info!("synthesizing {} cases", s.n_cases);
                Ok(synth_cases(&s.source, s.n_cases, s.train_ratio)?)
            }
        }
    }

    fn dataset(&self, manifest: Option<&Path>) -> Result<Dataset, CliError> {
        let cases = self.load_cases(manifest)?;
        let ds = build_dataset(&cases, &self.cfg.augment)?;
        info!(
            "{} train pairs from {} train cases, {} test cases",
            ds.train_pairs().len(),
            ds.train_cases().len(),
            ds.test_cases().len()
        );
        Ok(ds)
    }
}

pub fn synth(ctx: &Context) -> Result<(), CliError> {
    let s = &ctx.cfg.synth;
    let cases = synth_cases(&s.source, s.n_cases, s.train_ratio)?;
    let dir = ctx.mkdir("cases")?;
    let mut entries = Vec::with_capacity(cases.len());
    for c in &cases {
        let (rgb, sto2) = (format!("{}_rgb.oxt", c.case_id), format!("{}_sto2.oxt", c.case_id));
        oxt::save(&c.rgb, dir.join(&rgb))?;
        oxt::save(&c.sto2, dir.join(&sto2))?;
        entries.push(CaseEntry {
            case_id: c.case_id.clone(),
            tissue: c.tissue,
            rgb_path: Path::new("cases").join(rgb),
            sto2_path: Path::new("cases").join(sto2),
            split: c.split,
        });
    }
    let manifest = DatasetManifest {
        provenance: Provenance {
            source: "synthetic".into(),
            seed: Some(s.source.seed),
            config_hash: Some(ctx.hash.clone()),
        },
        cases: entries,
    };
    manifest.save(&ctx.path("manifest.json"))?;
    let train = cases.iter().filter(|c| c.split == Split::Train).count();
    info!("wrote {} cases ({train} train, {} test)", cases.len(), cases.len() - train);
    Ok(())
}

pub fn augment(ctx: &Context, manifest: Option<&Path>, write_pairs: bool) -> Result<(), CliError> {
    let ds = ctx.dataset(manifest)?;
    if write_pairs {
        let dir = ctx.mkdir("pairs")?;
        for c in &ds.cases {
            let x = Tensor::stack(&c.pairs.iter().map(|p| &p.x).collect::<Vec<_>>())?;
            let y = Tensor::stack(&c.pairs.iter().map(|p| &p.y).collect::<Vec<_>>())?;
            oxt::save(&x, dir.join(format!("{}_x.oxt", c.case_id)))?;
            oxt::save(&y, dir.join(format!("{}_y.oxt", c.case_id)))?;
        }
    }
    let cases: Vec<_> = ds
        .cases
        .iter()
        .map(|c| json!({"case_id": c.case_id, "split": c.split, "grid": [c.grid.0, c.grid.1], "pairs": c.pairs.len()}))
        .collect();
    let test_pairs: usize = ds.test_cases().iter().map(|c| c.pairs.len()).sum();
    ctx.write_json(
        "augment_summary.json",
        &json!({
            "config_hash": ctx.hash,
            "train_cases": ds.train_cases().len(),
            "test_cases": ds.test_cases().len(),
            "train_pairs": ds.train_pairs().len(),
            "test_pairs": test_pairs,
            "cases": cases,
            "runtime_secs": ctx.runtime(),
        }),
    )?;
    Ok(())
}

pub fn train(ctx: &Context, manifest: Option<&Path>) -> Result<(), CliError> {
    let ds = ctx.dataset(manifest)?;
    let pairs = ds.train_pairs();
    let dir = ctx.mkdir("checkpoints")?;
    let mut sink = DirCheckpoints::new(&dir, &ctx.hash);
    let t = &ctx.cfg.train;
    info!(
        "training {} iterations at batch {} with lambda {}",
        t.max_iterations, t.batch_size, t.lambda_l1
    );
    let outcome = train_loop(t, &pairs, &mut sink, |r| {
        info!(
            "iter {:>6}  d {:.4}  g_gan {:.4}  g_l1 {:.4}  g_total {:.4}",
            r.iteration, r.d_loss, r.g_gan_loss, r.g_l1_loss, r.g_total
        )
    })?;
    let mut csv = Vec::new();
    write_history_csv(&mut csv, &outcome.history).expect("writing to a Vec cannot fail");
    ctx.write_csv("loss_history.csv", &csv)?;
    let last = sink.written.last().expect("train_loop always writes a final checkpoint");
    let rel = last.strip_prefix(&ctx.out).unwrap_or(last);
    ctx.write_json(
        "train_summary.json",
        &json!({
            "config_hash": ctx.hash,
            "iterations": t.max_iterations,
            "train_cases": ds.train_cases().len(),
            "train_pairs": pairs.len(),
            "final": outcome.history.last(),
            "checkpoint": rel,
            "runtime_secs": ctx.runtime(),
        }),
    )?;
    info!("final checkpoint {}", last.display());
    Ok(())
}

fn load_generator(path: &Path) -> Result<(oxygan::nn::Network, checkpoint::Manifest), CliError> {
    let ck = checkpoint::load(path)?;
    let g = ck
        .generator
        .ok_or_else(|| oxygan::Error::Data(format!("checkpoint {} holds no generator", path.display())))?;
    Ok((g, ck.manifest))
}

pub fn eval(
    common: &Common,
    mut cfg: RunConfig,
    explicit_config: bool,
    checkpoint_path: &Path,
    manifest: Option<&Path>,
    allow_mismatch: bool,
    qualitative: usize,
) -> Result<(), CliError> {
    let (g, ck) = load_generator(checkpoint_path)?;
    if explicit_config && cfg.train.network != ck.network {
        if !allow_mismatch {
            return Err(CliError::invalid(
                "train.network",
                format!(
                    "checkpoint network {} differs from the configured one {}; pass --allow-mismatch to evaluate anyway",
                    serde_json::to_string(&ck.network).expect("serializes"),
                    serde_json::to_string(&cfg.train.network).expect("serializes"),
                ),
            ));
        }
        warn!("checkpoint network differs from the config; using the checkpoint's");
    }
    cfg.train.network = ck.network.clone();
    cfg.augment.net_size = ck.network.image_size;
    let ctx = Context::new(common, cfg)?;
    let ds = ctx.dataset(manifest)?;
    let test = ds.test_cases();
    let model = generator_predictor(&g, &ctx.cfg.eval)?;
    let report = evaluate(model.as_ref(), &test, &ctx.cfg.eval)?;
    let full = eval::eval_full(model.as_ref(), &test, ctx.cfg.eval.infer_batch)?;
    info!(
        "inter-case error {:.4}, intra-case error {:.4}, full error {:.4}",
        report.inter_error, report.intra_error, full.mean_error
    );
    if qualitative > 0 {
        let dir = ctx.mkdir("qualitative")?;
        for c in test.iter().take(qualitative) {
            let p = &c.pairs[c.center_index().min(c.pairs.len() - 1)];
            let pred = model.predict(&Tensor::stack(&[&p.x])?)?.reshape(p.x.dims())?;
            let png_path = dir.join(format!("{}.png", c.case_id));
            emit_qualitative(&png_path, &p.x, &p.y, &pred, 4, &[("config_hash", &ctx.hash)])?;
        }
    }
    let checkpoint_rel = checkpoint_path.display().to_string();
    ctx.write_json(
        "eval_summary.json",
        &json!({
            "config_hash": ctx.hash,
            "checkpoint": checkpoint_rel,
            "checkpoint_config_hash": ck.config_hash,
            "checkpoint_iteration": ck.iteration,
            "test_cases": test.len(),
            "inter_error": report.inter_error,
            "intra_error": report.intra_error,
            "full_error": full.mean_error,
            "inter": report.inter,
            "intra": report.intra,
            "runtime_secs": ctx.runtime(),
        }),
    )?;
    Ok(())
}

pub fn sweep(ctx: &Context, manifest: Option<&Path>) -> Result<(), CliError> {
    let ds = ctx.dataset(manifest)?;
    let report = eval::sweep(&ctx.cfg.train, &ds, &ctx.cfg.sweep, &ctx.cfg.eval, |p| {
        match (&p.failure, p.inter_error, p.intra_error) {
            (Some(f), ..) => warn!("lambda {} batch {}: failed: {f}", p.lambda, p.batch_size),
            (None, Some(a), Some(b)) => info!("lambda {} batch {}: inter {a:.4} intra {b:.4}", p.lambda, p.batch_size),
            _ => {}
        }
    })?;
    if let Some(t) = &report.trend {
        info!("{t}");
    }
    let mut csv = Vec::new();
    write_sweep_csv(&mut csv, &report).expect("writing to a Vec cannot fail");
    ctx.write_csv("sweep.csv", &csv)?;
    ctx.write_json(
        "sweep_summary.json",
        &json!({
            "config_hash": ctx.hash,
            "report": report,
            "runtime_secs": ctx.runtime(),
        }),
    )?;
    Ok(())
}

fn read_rgb(path: &Path) -> Result<Tensor, CliError> {
    let is_png = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png"));
    let img = if is_png { png::read(path)?.0 } else { oxt::load(path)? };
    let img = match *img.dims() {
        [1, 3, h, w] | [3, h, w] => img.reshape(&[3, h, w])?,
        [1, _, _] => replicate_channels(&img)?,
        ref d => return Err(oxygan::Error::Data(format!("{}: expected a 3×H×W image, got dims {d:?}", path.display())).into()),
    };
    if !img.data().iter().all(|v| (0.0..=1.0).contains(v)) {
        return Err(oxygan::Error::Data(format!("{}: values outside [0, 1]", path.display())).into());
    }
    Ok(img)
}

pub fn infer(common: &Common, mut cfg: RunConfig, checkpoint_path: &Path, input: &Path) -> Result<(), CliError> {
    let (g, ck) = load_generator(checkpoint_path)?;
    cfg.train.network = ck.network.clone();
    cfg.augment.net_size = ck.network.image_size;
    let rgb = read_rgb(input)?;
    let ctx = Context::new(common, cfg)?;
    let s = ck.network.image_size;
    let x = normalize(&resize_bilinear(&rgb, s, s)?).reshape(&[1, 3, s, s])?;
    let pred = g.predict(&x)?.reshape(&[3, s, s])?;
    let sto2 = data::denormalize(&take_channel(&pred, 0)?);
    oxt::save(&sto2, ctx.path("prediction.oxt"))?;
    png::write(&ctx.path("prediction.png"), &sto2, &[("config_hash", &ctx.hash)])?;
    info!("wrote prediction ({s}×{s}) to {}", ctx.out.display());
    Ok(())
}

pub fn gradcheck(ctx: &Context) -> Result<(), CliError> {
    let reports = gradcheck::run_all(ctx.cfg.train.seed)?;
    let mut failed = Vec::new();
    for r in &reports {
        let status = if r.passed() { "ok" } else { "FAIL" };
        println!(
            "{:<26} {:>5} elements  max rel err {:.3e}  {status}",
            r.op, r.elements_checked, r.max_rel_error
        );
        if !r.passed() {
            failed.push(r.op.clone());
        }
    }
    let rows: Vec<_> = reports
        .iter()
        .map(|r| json!({"op": r.op, "elements": r.elements_checked, "max_rel_error": r.max_rel_error, "passed": r.passed()}))
        .collect();
    ctx.write_json(
        "gradcheck.json",
        &json!({"config_hash": ctx.hash, "tolerance": gradcheck::TOLERANCE, "ops": rows}),
    )?;
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Check(format!("gradient check failed for {}", failed.join(", "))))
    }
}
