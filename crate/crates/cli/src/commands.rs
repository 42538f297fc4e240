use std::path::{Path, PathBuf};

use fisherjscc::channel::psnr_to_sigma2;
use fisherjscc::data::{load_table, make_blobs, make_rings, write_table, Dataset, Split, Standardizer, TableOptions};
use fisherjscc::experiments::{self, GridRequest, SweepRequest};
use fisherjscc::models::{power_audit, Checkpoint, DecoderModel, EncoderModel};
use fisherjscc::train::train_with;
use fisherjscc::Error;
use log::info;
use serde_json::json;

use crate::config::{DataKind, ExperimentKind, RunConfig};
use crate::manifest::{sha256_file, AuditRecord, Manifest};
use crate::CliError;

pub const DATA_MANIFEST: &str = "data/manifest.json";
pub const CHECKPOINT: &str = "checkpoint.json";

fn refuse_existing(paths: &[PathBuf], force: bool) -> Result<(), CliError> {
    if force {
        return Ok(());
    }
    if let Some(p) = paths.iter().find(|p| p.exists()) {
        return Err(CliError::Other(format!(
            "{} already exists (pass --force to overwrite)",
            p.display()
        )));
    }
    Ok(())
}

fn generate(cfg: &RunConfig, split: Split) -> Result<Dataset, CliError> {
    let d = &cfg.data;
    let seed = cfg.derived_seed("data");
    Ok(match d.kind {
        DataKind::Rings => make_rings(d.classes, d.per_class, d.noise, seed, split)?,
        DataKind::Blobs => make_blobs(d.classes, d.per_class, d.dim, d.spread, seed, split)?,
        DataKind::Table => {
            let opts = TableOptions {
                delimiter: d.delimiter as u8,
                has_header: d.has_header,
                label_column: d.label_column.clone(),
            };
            let train_path = d.train_path.as_ref().expect("validated");
            let train = load_table(train_path, &opts, Split::Train, None)?;
            match split {
                Split::Train => train,
                Split::Test => load_table(
                    d.test_path.as_ref().expect("validated"),
                    &opts,
                    Split::Test,
                    Some(&train.label_names),
                )?,
            }
        }
    })
}

/// Writes `data/train.csv`, `data/test.csv` and their manifest.
pub fn gen_data(cfg: &RunConfig, force: bool) -> Result<(), CliError> {
    let out = &cfg.out_dir;
    let files = ["data/train.csv", "data/test.csv"];
    refuse_existing(&files.iter().map(|f| out.join(f)).collect::<Vec<_>>(), force)?;
    std::fs::create_dir_all(out.join("data"))?;
    let mut m = Manifest::new("gen-data", cfg);
    m.seeds.insert("data".into(), cfg.derived_seed("data"));
    if cfg.data.kind == DataKind::Table {
        for (role, p) in [("train_table", &cfg.data.train_path), ("test_table", &cfg.data.test_path)] {
            m.inputs.insert(role.into(), sha256_file(p.as_ref().expect("validated"))?);
        }
    }
    for (split, file) in [(Split::Train, files[0]), (Split::Test, files[1])] {
        let ds = generate(cfg, split)?;
        if ds.classes != cfg.data.classes {
            return Err(CliError::Config(format!(
                "data.classes = {} but the {} split has {} classes",
                cfg.data.classes,
                split.as_str(),
                ds.classes
            )));
        }
        write_table(&ds, &out.join(file), b',')?;
        m.add_output(out, file)?;
        m.summary.insert(format!("{}_rows", split.as_str()), json!(ds.len()));
        info!("wrote {} rows to {}", ds.len(), out.join(file).display());
    }
    m.write(&out.join(DATA_MANIFEST))
}

/// Recomputes the digests of the generated splits.
pub fn verify_data(cfg: &RunConfig) -> Result<(), CliError> {
    let out = &cfg.out_dir;
    let m = Manifest::read(&out.join(DATA_MANIFEST))?;
    for (rel, want) in &m.outputs {
        let got = sha256_file(&out.join(rel))?;
        if &got != want {
            return Err(CliError::Data(format!("{rel}: digest {got} does not match manifest {want}")));
        }
    }
    println!("verified {} files", m.outputs.len());
    Ok(())
}

/// Loads the generated splits; the test split reuses the training label map.
fn load_splits(out: &Path) -> Result<(Dataset, Dataset), CliError> {
    let path = |s: &str| out.join("data").join(format!("{s}.csv"));
    for s in ["train", "test"] {
        if !path(s).exists() {
            return Err(CliError::Data(format!(
                "{} is missing; run gen-data first",
                path(s).display()
            )));
        }
    }
    let opts = TableOptions::default();
    let train = load_table(&path("train"), &opts, Split::Train, None)?;
    let test = load_table(&path("test"), &opts, Split::Test, Some(&train.label_names))?;
    Ok((train, test))
}

fn data_inputs(m: &mut Manifest, out: &Path) -> Result<(), CliError> {
    for s in ["train", "test"] {
        m.inputs
            .insert(format!("data/{s}.csv"), sha256_file(&out.join("data").join(format!("{s}.csv")))?);
    }
    Ok(())
}

pub fn train(cfg: &RunConfig, force: bool) -> Result<(), CliError> {
    let out = &cfg.out_dir;
    refuse_existing(&[out.join(CHECKPOINT)], force)?;
    let (train_set, _) = load_splits(out)?;
    if train_set.classes != cfg.data.classes {
        return Err(CliError::Config(format!(
            "data.classes = {} but the training split has {} classes",
            cfg.data.classes, train_set.classes
        )));
    }
    let standardizer = cfg.data.standardize.then(|| Standardizer::fit(&train_set));
    let data = match &standardizer {
        Some(s) => s.apply(&train_set)?,
        None => train_set,
    };
    let init_seed = cfg.derived_seed("init");
    let (enc, dec) = cfg.architecture(data.dim()).build(init_seed)?;
    let tc = cfg.train_config();
    let every = cfg.train.checkpoint_every;
    if every > 0 {
        std::fs::create_dir_all(out.join("checkpoints"))?;
    }

    let audit_start = power_audit();
    let result = train_with(&tc, &data, enc, dec, |epoch, e, d, rec| {
        info!(
            "epoch {epoch}: ce {:.5} reg {:.5} acc {:.4}",
            rec.cross_entropy, rec.regularizer, rec.train_accuracy
        );
        if every > 0 && epoch.is_multiple_of(every) {
            Checkpoint::new(e, d, init_seed, standardizer.clone())
                .save(&out.join("checkpoints").join(format!("epoch_{epoch:04}.json")))?;
        }
        Ok(())
    });
    let (enc, dec, log) = match result {
        Ok(r) => r,
        Err(Error::Diverged {
            epoch,
            batch,
            reason,
            snapshot,
        }) => {
            let doc = json!({ "epoch": epoch, "batch": batch, "reason": reason, "snapshot": snapshot });
            std::fs::write(out.join("divergence.json"), serde_json::to_string_pretty(&doc)? + "\n")?;
            return Err(CliError::Numerical(format!(
                "training diverged at epoch {epoch}, batch {batch}: {reason}; see {}",
                out.join("divergence.json").display()
            )));
        }
        Err(e) => return Err(e.into()),
    };

    Checkpoint::new(&enc, &dec, init_seed, standardizer).save(&out.join(CHECKPOINT))?;
    log.write_csv(&out.join("train_log.csv"))?;
    log.write_timing_csv(&out.join("timing.csv"))?;

    let mut m = Manifest::new("train", cfg);
    m.seeds.insert("init".into(), init_seed);
    m.seeds.insert("train".into(), tc.seed);
    data_inputs(&mut m, out)?;
    m.add_output(out, CHECKPOINT)?;
    m.add_output(out, "train_log.csv")?;
    m.power_audit = AuditRecord::since(audit_start, power_audit());
    if let Some(last) = log.last() {
        m.summary.insert("final_cross_entropy".into(), json!(last.cross_entropy));
        m.summary.insert("final_fisher_trace".into(), json!(last.fisher_trace));
        m.summary.insert("final_train_accuracy".into(), json!(last.train_accuracy));
        println!(
            "trained {} epochs: cross-entropy {:.5}, mean Fisher trace {:.5}, train accuracy {:.4}",
            last.epoch, last.cross_entropy, last.fisher_trace, last.train_accuracy
        );
    }
    m.write(&out.join("train_manifest.json"))
}

/// Loads a checkpoint and checks it against the configured architecture.
fn load_models(cfg: &RunConfig, path: &Path, input_dim: usize) -> Result<(Checkpoint, EncoderModel, DecoderModel), CliError> {
    if !path.exists() {
        return Err(CliError::Data(format!("checkpoint {} not found", path.display())));
    }
    let ck = Checkpoint::load(path)?;
    let diff = cfg.architecture(input_dim).diff(&ck.architecture);
    if !diff.is_empty() {
        return Err(Error::ArchitectureMismatch(diff).into());
    }
    let (e, d) = ck.models()?;
    Ok((ck, e, d))
}

fn test_data(cfg: &RunConfig, ck: &Checkpoint, test: &Dataset) -> Result<Dataset, CliError> {
    let ds = match &ck.standardizer {
        Some(s) => s.apply(test)?,
        None => test.clone(),
    };
    let n = cfg.experiment.max_samples;
    if n == 0 || n >= ds.len() {
        return Ok(ds);
    }
    // Evenly spaced rows, since generated splits are sorted by class.
    let idx: Vec<usize> = (0..n).map(|i| i * ds.len() / n).collect();
    Ok(ds.subset(&idx))
}

fn checkpoint_path(cfg: &RunConfig, given: Option<&Path>) -> PathBuf {
    given.map_or_else(|| cfg.out_dir.join(CHECKPOINT), Path::to_path_buf)
}

pub fn eval(cfg: &RunConfig, checkpoint: Option<&Path>, kind: ExperimentKind, force: bool) -> Result<(), CliError> {
    let out = &cfg.out_dir;
    let x = &cfg.experiment;
    let name = match kind {
        ExperimentKind::Sweep => "sweep",
        ExperimentKind::Taylor => "taylor",
        ExperimentKind::Track => "track",
        ExperimentKind::Grid => "grid",
    };
    let files: Vec<String> = match kind {
        ExperimentKind::Sweep => x.families.iter().map(|f| format!("eval/sweep_{f}.csv")).collect(),
        ExperimentKind::Grid => vec!["eval/grid.csv".into(), "eval/grid_axes.csv".into()],
        _ => vec![format!("eval/{name}.csv")],
    };
    let manifest_rel = format!("eval/{name}_manifest.json");
    let mut targets: Vec<PathBuf> = files.iter().map(|f| out.join(f)).collect();
    targets.push(out.join(&manifest_rel));
    refuse_existing(&targets, force)?;

    let (_, test) = load_splits(out)?;
    let ck_path = checkpoint_path(cfg, checkpoint);
    let (ck, enc, dec) = load_models(cfg, &ck_path, test.dim())?;
    let data = test_data(cfg, &ck, &test)?;
    let power = ck.architecture.power;
    std::fs::create_dir_all(out.join("eval"))?;

    let mut m = Manifest::new(&format!("eval:{name}"), cfg);
    data_inputs(&mut m, out)?;
    m.inputs.insert("checkpoint".into(), sha256_file(&ck_path)?);
    let audit_start = power_audit();
    match kind {
        ExperimentKind::Sweep => {
            let seed = cfg.derived_seed("eval");
            m.seeds.insert("eval".into(), seed);
            let regime = cfg.train.psnr.label();
            for (family, file) in x.families.iter().zip(&files) {
                let req = SweepRequest {
                    regime: &regime,
                    psnr_grid: &x.psnr_grid,
                    family: *family,
                    trials: x.trials,
                    seed,
                };
                let s = experiments::error_sweep(&enc, &dec, &data, &req)?;
                s.write_csv(&out.join(file))?;
                for r in &s.rows {
                    println!("{family} {:>6} dB: error {:.4}", r.psnr_db, r.error_rate);
                }
            }
        }
        ExperimentKind::Taylor => {
            let seed = cfg.derived_seed("taylor");
            m.seeds.insert("taylor".into(), seed);
            let s2 = x
                .taylor_psnr
                .iter()
                .map(|&p| psnr_to_sigma2(p, power))
                .collect::<Result<Vec<_>, _>>()?;
            let t = experiments::taylor_validation(&enc, &dec, &data, &s2, x.mc_samples, seed)?;
            t.write_csv(&out.join(&files[0]))?;
            for r in &t.rows {
                println!(
                    "{:>6} dB: E[KL] {:.6e} +/- {:.1e}, regularizer {:.6e}, ratio {:.4}",
                    r.psnr_db, r.mean_expected_kl, r.std_error, r.mean_regularizer, r.ratio
                );
            }
            if let Some(best) = t.closest_to_one() {
                m.summary.insert("closest_ratio_psnr_db".into(), json!(best.psnr_db));
            }
        }
        ExperimentKind::Track => {
            let t = experiments::regularizer_track(&[("model", &enc, &dec)], &x.psnr_grid, &data)?;
            t.write_csv(&out.join(&files[0]))?;
            if let Some(r) = t.rows.first() {
                println!("mean Fisher trace {:.6}", r.mean_fisher_trace);
                m.summary.insert("mean_fisher_trace".into(), json!(r.mean_fisher_trace));
            }
        }
        ExperimentKind::Grid => {
            let req = GridRequest {
                sample: x.grid_sample,
                resolution: x.grid_resolution,
                extent: x.grid_extent,
                sigma2: psnr_to_sigma2(x.grid_psnr, power)?,
            };
            let g = experiments::posterior_grid(&enc, &dec, &data, &req)?;
            g.write_csv(&out.join(&files[0]))?;
            g.write_axes_csv(&out.join(&files[1]))?;
            println!(
                "grid {0}x{0} around sample {1} (label {2}), eigenvalues {3:.4e} {4:.4e}",
                x.grid_resolution, x.grid_sample, g.label, g.eigenvalues[0], g.eigenvalues[1]
            );
        }
    }
    m.power_audit = AuditRecord::since(audit_start, power_audit());
    for f in &files {
        m.add_output(out, f)?;
    }
    m.write(&out.join(manifest_rel))
}

/// Sweeps two checkpoints over the same channel draws and reports `a - b`.
pub fn compare(cfg: &RunConfig, a: &Path, b: &Path, force: bool) -> Result<(), CliError> {
    let out = &cfg.out_dir;
    let x = &cfg.experiment;
    let files: Vec<String> = x.families.iter().map(|f| format!("compare/compare_{f}.csv")).collect();
    let mut targets: Vec<PathBuf> = files.iter().map(|f| out.join(f)).collect();
    targets.push(out.join("compare/manifest.json"));
    refuse_existing(&targets, force)?;

    let (_, test) = load_splits(out)?;
    let (ck_a, enc_a, dec_a) = load_models(cfg, a, test.dim())?;
    let (ck_b, enc_b, dec_b) = load_models(cfg, b, test.dim())?;
    if ck_a.standardizer != ck_b.standardizer {
        return Err(CliError::Config(
            "checkpoints were trained with different feature scaling".into(),
        ));
    }
    let data = test_data(cfg, &ck_a, &test)?;
    std::fs::create_dir_all(out.join("compare"))?;

    let seed = cfg.derived_seed("eval");
    let mut m = Manifest::new("compare", cfg);
    m.seeds.insert("eval".into(), seed);
    data_inputs(&mut m, out)?;
    m.inputs.insert("checkpoint_a".into(), sha256_file(a)?);
    m.inputs.insert("checkpoint_b".into(), sha256_file(b)?);
    let audit_start = power_audit();
    let regime = cfg.train.psnr.label();
    for (family, file) in x.families.iter().zip(&files) {
        let req = SweepRequest {
            regime: &regime,
            psnr_grid: &x.psnr_grid,
            family: *family,
            trials: x.trials,
            seed,
        };
        let r = experiments::compare((&enc_a, &dec_a), (&enc_b, &dec_b), &data, &req)?;
        r.write_csv(&out.join(file))?;
        let (neg, zero, pos) = r.sign_summary();
        println!("{family}: a better at {neg}, tied at {zero}, b better at {pos} PSNRs");
        m.summary.insert(format!("{family}_sign_summary"), json!([neg, zero, pos]));
    }
    m.power_audit = AuditRecord::since(audit_start, power_audit());
    for f in &files {
        m.add_output(out, f)?;
    }
    m.write(&out.join("compare/manifest.json"))
}
