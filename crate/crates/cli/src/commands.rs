use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use serde_json::{json, Value};

use sddg_core::checkpoint::Checkpoint;
use sddg_core::data::{generate_domain, save_domain, write_index, write_png, IndexEntry, LabeledDataset};
use sddg_core::eval::dump_dynamic_weights;
use sddg_core::experiment::Experiment;
use sddg_core::fourier::{perturb_batch, PerturbConfig};
use sddg_core::{Model, RunConfig, Tensor, Trainer};

use crate::{Ablate, ConfigArgs};

pub fn load_config(args: &ConfigArgs) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(path) => RunConfig::load(path).with_context(|| format!("loading {}", path.display()))?,
        None => RunConfig::default(),
    };
    cfg.apply_overrides(&args.set)?;
    Ok(cfg)
}

fn is_empty_dir(dir: &Path) -> Result<bool> {
    Ok(!dir.exists() || fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))?.next().is_none())
}

pub fn gen_data(args: &ConfigArgs, out: &Path, force: bool) -> Result<()> {
    let cfg = load_config(args)?;
    if !is_empty_dir(out)? {
        ensure!(force, "{} exists and is not empty (pass --force to replace it)", out.display());
        fs::remove_dir_all(out).with_context(|| format!("removing {}", out.display()))?;
    }
    fs::create_dir_all(out)?;
    let mut entries: Vec<IndexEntry> = Vec::new();
    for spec in &cfg.data.domains {
        let ds = generate_domain(spec)?;
        entries.extend(save_domain(&ds, out)?);
        println!("{:<12} {} images", spec.name, ds.len());
    }
    write_index(out, &entries)?;
    println!("wrote {} files and {}", entries.len(), out.join(sddg_core::data::INDEX_FILE).display());
    Ok(())
}

fn apply_ablations(cfg: &mut RunConfig, ablate: &[Ablate]) {
    for a in ablate {
        match a {
            Ablate::NoMeta => cfg.ablation.meta_learning = false,
            Ablate::NoIm => cfg.ablation.im_loss = false,
            Ablate::NoDynamic => cfg.ablation.dynamic_block = false,
            Ablate::NoPerturb => cfg.ablation.perturbation = Some(false),
        }
    }
}

fn checkpoint_name(step: usize) -> String {
    format!("step_{step:06}")
}

pub fn train(args: &ConfigArgs, ablate: &[Ablate], resume: Option<&Path>, init_only: bool, log_every: usize) -> Result<()> {
    let mut cfg = load_config(args)?;
    apply_ablations(&mut cfg, ablate);
    cfg.validate()?;
    let run_dir = cfg.run_dir();
    let ck_dir = run_dir.join("checkpoints");
    fs::create_dir_all(&ck_dir).with_context(|| format!("creating {}", ck_dir.display()))?;
    cfg.save(&run_dir.join("config.json"))?;
    let (config_hash, arch_hash) = (cfg.config_hash(), cfg.arch_hash());

    let exp = Experiment::prepare(&cfg)?;
    let mut trainer = match resume {
        Some(dir) => {
            let ck = Checkpoint::read(dir)?;
            let m = &ck.manifest;
            ensure!(
                m.arch_hash == arch_hash,
                "checkpoint architecture {} does not match the config ({arch_hash})",
                m.arch_hash
            );
            ensure!(
                m.rng_state.data_seed == cfg.meta.seed && m.rng_state.perturb_seed == cfg.perturb.seed,
                "checkpoint seeds (data {}, perturb {}) differ from the config",
                m.rng_state.data_seed,
                m.rng_state.perturb_seed
            );
            if m.config_hash != config_hash {
                eprintln!("note: config differs from the one that wrote the checkpoint");
            }
            eprintln!("resuming at step {}", m.step);
            ck.into_trainer()?
        }
        None => Trainer::new(Experiment::fresh_model(&cfg)?, &cfg.meta)?,
    };
    let save = |t: &Trainer, name: &str| {
        Checkpoint::from_trainer(t, cfg.perturb.seed, cfg.meta.seed, &config_hash, &arch_hash).write(&ck_dir.join(name))
    };
    if init_only {
        save(&trainer, &checkpoint_name(trainer.step))?;
        println!("wrote {}", ck_dir.join(checkpoint_name(trainer.step)).display());
        return Ok(());
    }

    let trace_path = run_dir.join("trace.jsonl");
    let mut trace = OpenOptions::new()
        .create(true)
        .append(resume.is_some())
        .write(true)
        .truncate(resume.is_none())
        .open(&trace_path)
        .with_context(|| format!("opening {}", trace_path.display()))?;
    let every = cfg.checkpoint_every;
    let result = trainer.run(&exp.train_data(), &cfg.meta, &cfg.perturb, &cfg.ablation, cfg.meta.steps, |t, rec| {
        let line = serde_json::to_string(rec)?;
        writeln!(trace, "{line}").map_err(|e| sddg_core::Error::io(&trace_path, e))?;
        if every > 0 && t.step % every == 0 {
            save(t, &checkpoint_name(t.step))?;
        }
        if log_every > 0 && (t.step % log_every == 0 || t.step == cfg.meta.steps) {
            let l = &rec.losses;
            eprintln!(
                "step {:>6}  cls {:.4}  im {:+.4}  cls+ {:.4}  total {:.4}",
                t.step, l.cls_s, l.im, l.cls_s_plus, l.total
            );
        }
        Ok(())
    });
    if let Err(e) = result {
        if e.is_divergence() {
            eprintln!("training diverged; checkpoints written so far are kept in {}", ck_dir.display());
        }
        return Err(e.into());
    }
    save(&trainer, "final")?;

    let report = exp.evaluate(&trainer.model, cfg.eval.threshold)?;
    write_report(&run_dir, &report, &config_hash, trainer.step)?;
    if cfg.eval.dump_weights && trainer.model.spec.dynamic_block {
        dump_all(&trainer.model, &exp, &run_dir.join("weights"))?;
    }
    print!("{}", report.render_text());
    Ok(())
}

fn write_report(dir: &Path, report: &sddg_core::EvalReport, config_hash: &str, step: usize) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut v = serde_json::to_value(report)?;
    if let Value::Object(map) = &mut v {
        map.insert("config_hash".into(), json!(config_hash));
        map.insert("step".into(), json!(step));
    }
    fs::write(dir.join("report.json"), serde_json::to_string_pretty(&v)?)?;
    fs::write(dir.join("report.txt"), report.render_text())?;
    Ok(())
}

fn domains(exp: &Experiment) -> impl Iterator<Item = &LabeledDataset> {
    std::iter::once(&exp.source).chain(exp.tests.iter())
}

fn dump_all(model: &Model, exp: &Experiment, dir: &Path) -> Result<()> {
    for ds in domains(exp) {
        let path = dir.join(format!("{}.csv", ds.domain_name));
        let n = dump_dynamic_weights(model, ds, &path)?;
        println!("{n} rows -> {}", path.display());
    }
    Ok(())
}

fn load_checked(cfg: &RunConfig, checkpoint: &Path, allow_mismatch: bool) -> Result<(Model, String, usize)> {
    let ck = Checkpoint::read(checkpoint)?;
    let want = cfg.arch_hash();
    if ck.manifest.arch_hash != want {
        ensure!(
            allow_mismatch,
            "checkpoint architecture {} does not match the config ({want}); pass --allow-mismatch to evaluate anyway",
            ck.manifest.arch_hash
        );
        eprintln!("warning: evaluating a checkpoint whose architecture differs from the config");
    }
    let (hash, step) = (ck.manifest.config_hash.clone(), ck.manifest.step);
    Ok((ck.into_model()?, hash, step))
}

pub fn eval(args: &ConfigArgs, checkpoint: &Path, out: Option<PathBuf>, allow_mismatch: bool, dump: bool) -> Result<()> {
    let cfg = load_config(args)?;
    let (model, hash, step) = load_checked(&cfg, checkpoint, allow_mismatch)?;
    let exp = Experiment::prepare(&cfg)?;
    let report = exp.evaluate(&model, cfg.eval.threshold)?;
    let out = out.unwrap_or_else(|| cfg.run_dir().join("eval"));
    write_report(&out, &report, &hash, step)?;
    if dump || cfg.eval.dump_weights {
        ensure!(model.spec.dynamic_block, "--dump-weights needs a model with the dynamic block");
        dump_all(&model, &exp, &out.join("weights"))?;
    }
    print!("{}", report.render_text());
    Ok(())
}

pub fn dump_weights(args: &ConfigArgs, checkpoint: &Path, out: &Path, allow_mismatch: bool) -> Result<()> {
    let cfg = load_config(args)?;
    let (model, _, _) = load_checked(&cfg, checkpoint, allow_mismatch)?;
    ensure!(model.spec.dynamic_block, "checkpoint has no dynamic block");
    dump_all(&model, &Experiment::prepare(&cfg)?, out)
}

fn parse_sweep(spec: &str) -> Result<(String, Vec<String>)> {
    let Some((path, values)) = spec.split_once('=') else {
        bail!("sweep {spec:?} is not of the form PATH=V1,V2,...");
    };
    let values: Vec<String> = values.split(',').map(str::trim).filter(|v| !v.is_empty()).map(String::from).collect();
    ensure!(!values.is_empty(), "sweep {spec:?} lists no values");
    Ok((path.to_string(), values))
}

pub fn ablate(args: &ConfigArgs, seeds: &[u64], sweeps: &[String], out: Option<PathBuf>) -> Result<()> {
    let cfg = load_config(args)?;
    ensure!(!seeds.is_empty(), "need at least one seed");
    let out = out.unwrap_or_else(|| cfg.run_dir().join("ablation"));
    let exp = Experiment::prepare(&cfg)?;
    let log = |c: &RunConfig, r: &sddg_core::experiment::SeedResult| {
        eprintln!("{:<14} seed {:<3} average HTER {:.4}", c.ablation.label(), r.seed, r.report.average_hter);
    };
    if sweeps.is_empty() {
        let table = exp.ablation_grid(&sddg_core::Ablation::table_rows(), seeds, log)?;
        table.write(&out)?;
        print!("{}", table.render_text());
        return Ok(());
    }
    for spec in sweeps {
        let (path, values) = parse_sweep(spec)?;
        let refs: Vec<&str> = values.iter().map(String::as_str).collect();
        let curve = exp.sweep(&path, &refs, seeds, |c, r| {
            eprint!("{path}: ");
            log(c, r);
        })?;
        let stem = format!("sweep_{}", path.replace('.', "_"));
        curve.write(&out, &stem)?;
        print!("{}", curve.to_csv());
    }
    Ok(())
}

fn plane(t: &Tensor<f32>, i: usize, size: usize) -> Result<Tensor<f32>> {
    Ok(Tensor::from_vec(&[size, size], t.row(i)[..size * size].to_vec())?)
}

pub fn perturb_preview(args: &ConfigArgs, n: usize, out: &Path) -> Result<()> {
    let cfg = load_config(args)?;
    let exp = Experiment::prepare(&cfg)?;
    ensure!(n >= 1 && n <= exp.source.len(), "n must lie in 1..={}", exp.source.len());
    let idx: Vec<usize> = (0..n).collect();
    let batch = exp.source.subset(&idx);
    let pcfg = PerturbConfig { eta: cfg.meta.eta, ..cfg.perturb.clone() };
    let (perturbed, draws) = perturb_batch(&batch, &exp.pool, &pcfg, 0)?;
    fs::create_dir_all(out)?;
    let size = cfg.model.backbone.image_size;
    let mut diff = 0.0;
    for (i, d) in draws.iter().enumerate() {
        write_png(&out.join(format!("{i:03}_source.png")), &plane(&batch.images, i, size)?)?;
        write_png(&out.join(format!("{i:03}_natural.png")), exp.pool.image(d.partner))?;
        write_png(&out.join(format!("{i:03}_perturbed.png")), &plane(&perturbed.images, i, size)?)?;
        diff += perturbed.images.row(i).iter().zip(batch.images.row(i)).map(|(a, b)| (a - b).abs() as f64).sum::<f64>();
        println!("{i:03}: partner {:>4}  lambda {:.3}", d.partner, d.lambda);
    }
    let mean = diff / (n * size * size) as f64;
    println!("mean absolute pixel difference {mean:.5}");
    let mut f = File::create(out.join("preview.json"))?;
    writeln!(f, "{}", json!({ "n": n, "eta": pcfg.eta, "mean_abs_diff": mean, "draws": draws.iter().map(|d| json!({"partner": d.partner, "lambda": d.lambda})).collect::<Vec<_>>() }))?;
    Ok(())
}

pub fn print_config(args: &ConfigArgs) -> Result<()> {
    println!("{}", load_config(args)?.to_json());
    Ok(())
}
