//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits non-zero
//! if any criterion fails.
//!
//! `SDDG_ACCEPTANCE_ONLY=1,4` restricts the run to the listed criteria.
//! `SDDG_FULL_SWEEP=1` runs the hyperparameter sweeps at testbed scale with
//! three seeds instead of the reduced smoke scale.

use std::path::PathBuf;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sddg_core::checkpoint::Checkpoint;
use sddg_core::config::RunConfig;
use sddg_core::data::{default_domains, generate_domain, load_natural_pool, ImageBatch, PoolSource};
use sddg_core::dynamic::{adaptor_weights, instance_normalize, DynamicBlockParams, DynamicConfig};
use sddg_core::experiment::{Experiment, SeedResult};
use sddg_core::fourier::{decompose, mix_amplitude, perturb_batch, recompose, PerturbConfig};
use sddg_core::graph::{Graph, Var};
use sddg_core::losses::{cross_entropy, diversity_loss, entropy_loss, im_loss, ImVars};
use sddg_core::meta::{inner_update, meta_gradients, meta_optimize, Evaluation, Learner, Phase, StepSettings};
use sddg_core::optim::OptimizerConfig;
use sddg_core::params::{BoundParams, ParamPartition, Partition};
use sddg_core::train::{Ablation, Trainer};
use sddg_core::{build_model, DynamicWeights, Model, ModelSpec, Real, Tensor};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn artifacts() -> PathBuf {
    PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance")
}

// ---------------------------------------------------------------- criterion 1

fn c1_analytic_losses() -> Outcome {
    let w = |rows: Vec<Vec<f64>>| {
        let k = rows[0].len();
        DynamicWeights(Tensor::from_vec(&[rows.len(), k], rows.concat()).unwrap())
    };
    let log3 = 3f64.ln();
    let one_hot = w(vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]);
    let uniform = w(vec![vec![1.0 / 3.0; 3]; 4]);
    let mut errs = vec![
        ("ent(one-hot)", entropy_loss(&one_hot).unwrap(), 0.0),
        ("ent(uniform)", entropy_loss(&uniform).unwrap(), log3),
        ("div(uniform)", diversity_loss(&uniform).unwrap(), -log3),
        ("div(spread one-hot)", diversity_loss(&one_hot).unwrap(), -log3),
        ("im(spread one-hot)", im_loss(&one_hot).unwrap().im, -log3),
        ("im(uniform)", im_loss(&uniform).unwrap().im, 0.0),
    ]
    .into_iter()
    .map(|(n, got, want)| (n, (got - want).abs(), 1e-6))
    .collect::<Vec<_>>();
    let logits = Tensor::from_vec(&[3, 2], vec![0.0, 0.0, 1.5, 1.5, -7.0, -7.0]).unwrap();
    let ce = cross_entropy(&logits, &[0, 1, 1]).unwrap();
    errs.push(("ce(uniform logits)", (ce - 2f64.ln()).abs(), 1e-9));
    let bad: Vec<_> = errs.iter().filter(|(_, e, tol)| !(e < tol)).collect();
    let worst = errs.iter().map(|e| e.1).fold(0.0, f64::max);
    check(bad.is_empty(), format!("{} values, max abs error {worst:.2e}; failing: {bad:?}", errs.len()))
}

// ---------------------------------------------------------------- criterion 2

fn c2_simplex_and_in() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (c, s) = (8, 4);
    let mut rows = 0usize;
    let mut worst_sum = 0f64;
    let mut min_entry = f64::INFINITY;
    for batch in 0..100 {
        let cfg = DynamicConfig { k: 2 + batch % 4, ..DynamicConfig::default() };
        let p = DynamicBlockParams::<f64>::init(c, &cfg, &mut rng).unwrap();
        let scale = 10f64.powf(rng.gen_range(-2.0..2.0));
        let f = Tensor::from_fn(&[100, c, s, s], |_| scale * (rng.gen::<f64>() * 2.0 - 1.0));
        let w = adaptor_weights(&f, &p).unwrap();
        for i in 0..w.n() {
            let r = w.row(i);
            worst_sum = worst_sum.max((r.iter().sum::<f64>() - 1.0).abs());
            min_entry = min_entry.min(r.iter().copied().fold(f64::INFINITY, f64::min));
            rows += 1;
        }
    }
    let mut worst_moment = 0f64;
    for _ in 0..20 {
        let (n, ch, h) = (4, 6, 8);
        let scale = rng.gen_range(2.0..20.0);
        let shift = rng.gen_range(-5.0..5.0);
        let f = Tensor::from_fn(&[n, ch, h, h], |_| shift + scale * (rng.gen::<f64>() - 0.5));
        let y = instance_normalize(&f, 1e-5).unwrap();
        for plane in y.data().chunks(h * h) {
            let m = plane.iter().sum::<f64>() / plane.len() as f64;
            let v = plane.iter().map(|x| (x - m).powi(2)).sum::<f64>() / plane.len() as f64;
            worst_moment = worst_moment.max(m.abs()).max((v - 1.0).abs());
        }
    }
    check(
        rows == 10_000 && worst_sum <= 1e-6 && min_entry >= 0.0 && worst_moment <= 1e-4,
        format!("{rows} rows, max |Σw−1| {worst_sum:.1e}, min w {min_entry:.1e}; IN max moment error {worst_moment:.1e}"),
    )
}

// ---------------------------------------------------------------- criterion 3

fn c3_fourier() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0f64;
    for i in 0..100 {
        let (h, w) = [(16, 16), (32, 32), (12, 20)][i % 3];
        let img = Tensor::from_fn(&[h, w], |_| rng.gen::<f32>());
        let sp = decompose(&img).unwrap();
        worst = worst.max(recompose(&sp.amplitude, &sp.phase).unwrap().max_abs_diff(&img));
    }
    let src = Tensor::from_fn(&[32, 32], |_| rng.gen::<f32>());
    let nat = Tensor::from_fn(&[32, 32], |_| rng.gen::<f32>());
    let (a, b) = (decompose(&src).unwrap(), decompose(&nat).unwrap());
    let l0 = mix_amplitude(&a.amplitude, &b.amplitude, 0.0).unwrap();
    let l1 = mix_amplitude(&a.amplitude, &b.amplitude, 1.0).unwrap();
    let e0 = recompose(&l0, &a.phase).unwrap().max_abs_diff(&src);
    let e1 = l1.max_abs_diff(&b.amplitude);
    let e1_img = recompose(&l1, &b.phase).unwrap().max_abs_diff(&nat);
    // η = 0 forces λ = 0 through the batch path as well
    let pool = load_natural_pool(&PoolSource::Procedural, 4, 32, 0).unwrap();
    let batch = ImageBatch { images: src.clone().reshape(&[1, 1, 32, 32]).unwrap(), labels: vec![0] };
    let cfg = PerturbConfig { eta: 0.0, ..PerturbConfig::default() };
    let (out, _) = perturb_batch(&batch, &pool, &cfg, 0).unwrap();
    let e_batch = out.images.max_abs_diff(&batch.images);
    let tol = 1e-5;
    check(
        worst < tol && e0 < tol && e1 < tol && e1_img < tol && e_batch < tol,
        format!("round trip {worst:.1e}; λ=0 {e0:.1e}; λ=1 amplitude {e1:.1e}, image {e1_img:.1e}; η=0 batch {e_batch:.1e}"),
    )
}

// ---------------------------------------------------------------- criterion 4

fn tiny_model() -> Model {
    let mut spec = ModelSpec::default();
    spec.backbone.image_size = 32;
    spec.backbone.feature_channels = 4;
    spec.dynamic.reduction = 2;
    build_model(&spec, 4).unwrap()
}

fn tiny_batches(m: &Model) -> (ImageBatch, ImageBatch) {
    let mut doms = default_domains(32, 12, 4);
    doms.truncate(1);
    let ds = generate_domain(&doms[0]).unwrap();
    let s = ds.subset(&[0, 1, 2, 3, 4, 5]);
    let second = ds.subset(&[6, 7, 8, 9, 10, 11]);
    let pool = load_natural_pool(&PoolSource::Procedural, 4, m.spec.backbone.image_size, 4).unwrap();
    let (plus, _) = perturb_batch(&second, &pool, &PerturbConfig::default(), 0).unwrap();
    (s, plus)
}

enum Objective {
    Cls,
    Im,
    Full(StepSettings),
}

fn graph_grad(m: &Model, p: &ParamPartition<f64>, b: &ImageBatch, im: bool) -> (f64, ParamPartition<f64>) {
    let mut g = Graph::new();
    let bound = p.bind(&mut g);
    let ev = m.evaluate(&mut g, &bound, b, Phase::MetaTrain).unwrap();
    let root = if im { ev.im.unwrap().im } else { ev.cls };
    (g.scalar(root), bound.gradients(&g, &g.backward(root)))
}

/// Objective value plus the activation pattern of every graph it was built from.
fn objective(m: &Model, p: &ParamPartition<f64>, s: &ImageBatch, plus: &ImageBatch, o: &Objective) -> (f64, Vec<usize>) {
    let mut g = Graph::new();
    let bound = p.bind(&mut g);
    let ev = m.evaluate(&mut g, &bound, s, Phase::MetaTrain).unwrap();
    let im = ev.im.unwrap();
    let st = match o {
        Objective::Cls => return (g.scalar(ev.cls), g.activation_pattern()),
        Objective::Im => return (g.scalar(im.im), g.activation_pattern()),
        Objective::Full(st) => st,
    };
    // θ_D′ = θ_D − α∇_{θ_D}L_cls(S), then L_cls(S⁺) at (θ_F, θ_D′, θ_C)
    let grad = bound.gradients(&g, &g.backward(ev.cls));
    let mut prime = p.clone();
    for (name, t) in prime.theta_d.iter_mut() {
        t.axpy(-st.alpha, &grad.theta_d[name]).unwrap();
    }
    let mut g2 = Graph::new();
    let bound2 = prime.bind(&mut g2);
    let ev2 = m.evaluate(&mut g2, &bound2, plus, Phase::MetaTest).unwrap();
    let value = g.scalar(ev.cls) + st.mu * g.scalar(im.im) + g2.scalar(ev2.cls);
    let mut pattern = g.activation_pattern();
    pattern.extend(g2.activation_pattern());
    (value, pattern)
}

fn c4_gradient_oracles() -> Outcome {
    let m = tiny_model();
    let n = m.params.num_params();
    if n > 5000 {
        return Err(format!("tiny model has {n} parameters"));
    }
    let (s, plus) = tiny_batches(&m);
    let p = m.params.cast::<f64>();
    let settings = StepSettings { alpha: 0.1, mu: 1.0, second_order: true };
    let cases = [("L_cls", Objective::Cls), ("L_IM", Objective::Im), ("meta objective", Objective::Full(settings))];
    let h = 1e-4;
    let mut lines = Vec::new();
    let mut ok = true;
    let (mut kinks, mut entries) = (0usize, 0usize);
    for (name, o) in &cases {
        let base = objective(&m, &p, &s, &plus, o).1;
        let analytic = match o {
            Objective::Cls => graph_grad(&m, &p, &s, false).1,
            Objective::Im => graph_grad(&m, &p, &s, true).1,
            Objective::Full(st) => meta_gradients(&m, &p, &s, &plus, *st).unwrap().grads,
        };
        for part in Partition::ALL {
            let (mut num2, mut den_a, mut den_n) = (0f64, 0f64, 0f64);
            for (pn, t) in p.group(part).iter() {
                for j in 0..t.numel() {
                    let bump = |d: f64| {
                        let mut q = p.clone();
                        q.group_mut(part).get_mut(pn).unwrap().data_mut()[j] += d;
                        objective(&m, &q, &s, &plus, o)
                    };
                    let ((up, pat_up), (down, pat_down)) = (bump(h), bump(-h));
                    entries += 1;
                    // the stencil crosses a ReLU kink: the difference quotient
                    // mixes two linear pieces and is no oracle for either
                    if pat_up != pat_down || pat_up != base {
                        kinks += 1;
                        continue;
                    }
                    let fd = (up - down) / (2.0 * h);
                    let an = analytic.group(part)[pn].data()[j];
                    num2 += (an - fd).powi(2);
                    den_a += an * an;
                    den_n += fd * fd;
                }
            }
            let scale = den_a.sqrt().max(den_n.sqrt());
            let rel = if scale == 0.0 { 0.0 } else { num2.sqrt() / scale };
            ok &= rel < 1e-4;
            lines.push(format!("{name}/{part} {rel:.1e}"));
        }
    }
    ok &= (kinks as f64) <= 0.1 * entries as f64;
    lines.push(format!("{kinks}/{entries} entries straddle a kink"));
    check(ok, format!("{n} params; relative errors: {}", lines.join(", ")))
}

// ---------------------------------------------------------------- criterion 5

/// `f, d, c`; meta-train `½a(d−3)² + 0.7fd − 0.4dc + ½f² + ½c²`, IM `fd`,
/// meta-test `½(d−1)² + fd + 2cd`.
struct Toy {
    a: f64,
}

struct NoBatch;

impl Learner for Toy {
    type Batch = NoBatch;

    fn evaluate<T: Real>(
        &self,
        g: &mut Graph<T>,
        b: &BoundParams,
        _: &NoBatch,
        phase: Phase,
    ) -> sddg_core::Result<Evaluation> {
        let t = T::from_f64;
        let (f, d, c) = (b.var("f")?, b.var("d")?, b.var("c")?);
        let one: Var = g.leaf(Tensor::full(&[1], T::one()));
        let (dd, fd, dc, ff, cc) = (g.mul(d, d), g.mul(f, d), g.mul(d, c), g.mul(f, f), g.mul(c, c));
        let a = self.a;
        Ok(match phase {
            Phase::MetaTrain => {
                let cls = g.lincomb(&[
                    (dd, t(0.5 * a)),
                    (d, t(-3.0 * a)),
                    (one, t(4.5 * a)),
                    (fd, t(0.7)),
                    (dc, t(-0.4)),
                    (ff, t(0.5)),
                    (cc, t(0.5)),
                ]);
                let im = g.lincomb(&[(fd, t(1.0))]);
                let zero = g.lincomb(&[(one, t(0.0))]);
                Evaluation { cls, im: Some(ImVars { ent: im, div: zero, im }), weights: None, stats: vec![] }
            }
            Phase::MetaTest => {
                let cls = g.lincomb(&[(dd, t(0.5)), (d, t(-1.0)), (one, t(0.5)), (fd, t(1.0)), (dc, t(2.0))]);
                Evaluation { cls, im: None, weights: None, stats: vec![] }
            }
        })
    }
}

fn toy_params(f: f64, d: f64, c: f64) -> ParamPartition<f64> {
    let mut p = ParamPartition::default();
    p.insert(Partition::Extractor, "f", Tensor::full(&[1], f)).unwrap();
    p.insert(Partition::Dynamic, "d", Tensor::full(&[1], d)).unwrap();
    p.insert(Partition::Classifier, "c", Tensor::full(&[1], c)).unwrap();
    p
}

fn c5_meta_exactness() -> Outcome {
    let (a, alpha, beta, mu) = (2.0, 0.1, 0.05, 0.5);
    let (f, d, c) = (0.3, -0.8, 1.1);
    let toy = Toy { a };
    let p = toy_params(f, d, c);
    let step = |alpha, second_order| {
        let mg = meta_gradients(&toy, &p, &NoBatch, &NoBatch, StepSettings { alpha, mu, second_order }).unwrap();
        meta_optimize(&p, &mg.grads, beta).unwrap()
    };
    let next = step(alpha, true);

    let gf = 0.7 * d + f;
    let gd = a * (d - 3.0) + 0.7 * f - 0.4 * c;
    let gc = -0.4 * d + c;
    let dp = d - alpha * gd;
    let (tf, td, tc) = (dp, (dp - 1.0) + f + 2.0 * c, 2.0 * dp);
    let want = [
        f - beta * (gf + mu * d + tf + td * (-alpha * 0.7)),
        d - beta * (gd + mu * f + td * (1.0 - alpha * a)),
        c - beta * (gc + tc + td * (alpha * 0.4)),
    ];
    let got = ["f", "d", "c"].map(|n| next.get(n).unwrap().item());
    let err = got.iter().zip(&want).map(|(g, w)| (g - w).abs()).fold(0.0, f64::max);
    let inner = inner_update(&toy, &p, &NoBatch, alpha).unwrap().theta_d_prime["d"].item();
    let inner_err = (inner - dp).abs();
    let collapse = step(0.0, true) == step(0.0, false);
    let sep = (step(alpha, true).get("d").unwrap().item() - step(alpha, false).get("d").unwrap().item()).abs();
    check(
        err < 1e-12 && inner_err < 1e-12 && collapse && sep > 1e-6,
        format!("closed form {err:.1e}, inner step {inner_err:.1e}; α=0 orders equal: {collapse}; curvature gap {sep:.2e}"),
    )
}

// ----------------------------------------------------------- criteria 6 and 7

/// Testbed profile used for the ablation and sweeps.
fn testbed_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.run_name = "acceptance".into();
    cfg.model.backbone.feature_channels = 16;
    cfg.data.domains = default_domains(64, 600, 0);
    cfg.data.pool_size = 64;
    cfg.meta.steps = 300;
    cfg.meta.batch_size = 32;
    cfg.meta.optimizer = OptimizerConfig::adam();
    cfg.meta.alpha = 1e-3;
    cfg.meta.beta = 1e-3;
    cfg
}

fn log_run(c: &RunConfig, r: &SeedResult) {
    println!("    {:<12} seed {} average HTER {:.4}", c.ablation.label(), r.seed, r.report.average_hter);
}

fn c6_c7_ablation() -> (Outcome, Outcome) {
    let cfg = testbed_config();
    let exp = Experiment::prepare(&cfg).unwrap();
    let t0 = Instant::now();
    let table = exp.ablation_grid(&Ablation::table_rows(), &[0, 1, 2], log_run).unwrap();
    table.write(&artifacts()).unwrap();
    print!("{}", table.render_text());
    let base = table.row(&Ablation::erm()).unwrap();
    let full = table.row(&Ablation::full()).unwrap();
    let singles = [Ablation::new(true, false, false), Ablation::new(true, true, false), Ablation::new(true, false, true)];
    let mut ok = base.mean_hter - full.mean_hter >= 0.02;
    let mut parts = vec![format!("baseline {:.4}, full {:.4}", base.mean_hter, full.mean_hter)];
    for a in singles {
        let r = table.row(&a).unwrap();
        ok &= r.mean_hter <= base.mean_hter;
        parts.push(format!("{} {:.4}", r.label, r.mean_hter));
    }
    // domain gap precondition: the plain model loses ≥ 10 points on domain_d
    let gap = base
        .runs
        .iter()
        .map(|r| {
            let d = r.report.records.iter().find(|d| d.domain == "domain_d").unwrap().hter;
            d - r.report.source.as_ref().unwrap().hter
        })
        .fold(f64::INFINITY, f64::min);
    ok &= gap >= 0.10;
    parts.push(format!("min domain_d gap {gap:.3}"));
    parts.push(format!("{:.0}s", t0.elapsed().as_secs_f64()));
    let c6 = check(ok, parts.join(", "));

    let seps: Vec<f64> = full.runs.iter().map(|r| r.weight_separation.unwrap()).collect();
    let c7 = check(seps.iter().all(|&s| s > 0.01), format!("full SDDG class-mean weight L2 per seed {seps:.4?}"));
    (c6, c7)
}

// ---------------------------------------------------------------- criterion 8

fn c8_determinism_and_resume() -> Outcome {
    let mut cfg = RunConfig::default();
    cfg.model.backbone.image_size = 32;
    cfg.model.backbone.feature_channels = 8;
    cfg.data.domains = default_domains(32, 64, 8);
    cfg.data.pool_size = 8;
    cfg.meta.steps = 12;
    cfg.meta.batch_size = 8;
    cfg.meta.optimizer = OptimizerConfig::adam();
    cfg.meta.seed = 8;
    cfg.perturb.seed = 8;
    let exp = Experiment::prepare(&cfg).unwrap();
    let a = exp.run_config(&cfg, |_, _| Ok(())).unwrap();
    let b = exp.run_config(&cfg, |_, _| Ok(())).unwrap();
    let same_trace = serde_json::to_string(&a.traces).unwrap() == serde_json::to_string(&b.traces).unwrap();
    let same_params = a.model.params == b.model.params;

    let half = cfg.meta.steps / 2;
    let mut t = Trainer::new(Experiment::fresh_model(&cfg).unwrap(), &cfg.meta).unwrap();
    let data = exp.train_data();
    t.run(&data, &cfg.meta, &cfg.perturb, &cfg.ablation, half, |_, _| Ok(())).unwrap();
    let dir = artifacts().join("resume-ckpt");
    Checkpoint::from_trainer(&t, cfg.perturb.seed, cfg.meta.seed, &cfg.config_hash(), &cfg.arch_hash())
        .write(&dir)
        .unwrap();
    drop(t);
    let mut r = Checkpoint::read(&dir).unwrap().into_trainer().unwrap();
    let resumed_at = r.step;
    r.run(&data, &cfg.meta, &cfg.perturb, &cfg.ablation, cfg.meta.steps, |_, _| Ok(())).unwrap();
    let dev = a
        .model
        .params
        .iter()
        .zip(r.model.params.iter())
        .map(|((_, _, x), (_, _, y))| x.max_abs_diff(y))
        .fold(0.0, f64::max);
    check(
        same_trace && same_params && resumed_at == half && dev <= 1e-6,
        format!("rerun trace identical: {same_trace}, params identical: {same_params}; resume at {resumed_at} max deviation {dev:.1e}"),
    )
}

// ---------------------------------------------------------------- criterion 9

fn c9_sweeps() -> Outcome {
    let full = std::env::var("SDDG_FULL_SWEEP").is_ok_and(|v| v == "1");
    let (cfg, seeds): (RunConfig, Vec<u64>) = if full {
        (testbed_config(), vec![0, 1, 2])
    } else {
        let mut c = RunConfig::default();
        c.model.backbone.image_size = 32;
        c.model.backbone.feature_channels = 8;
        c.data.domains = default_domains(32, 64, 9);
        c.data.pool_size = 8;
        c.meta.steps = 5;
        c.meta.batch_size = 8;
        (c, vec![0])
    };
    let exp = Experiment::prepare(&cfg).unwrap();
    let dir = artifacts();
    let mu = exp.sweep("meta.mu", &["0", "0.5", "1", "1.5", "2"], &seeds, |_, _| ()).unwrap();
    mu.write(&dir, "sweep_mu").unwrap();
    let k = exp.sweep("model.dynamic.k", &["2", "3", "4", "5"], &seeds, |_, _| ()).unwrap();
    k.write(&dir, "sweep_k").unwrap();
    let files = ["sweep_mu.csv", "sweep_mu.json", "sweep_k.csv", "sweep_k.json"];
    let present = files.iter().all(|f| dir.join(f).is_file());
    let curve = |c: &sddg_core::experiment::SweepCurve| {
        c.points.iter().map(|p| format!("{}:{:.3}", p.value, p.mean_hter)).collect::<Vec<_>>().join(" ")
    };
    check(
        present && mu.points.len() == 5 && k.points.len() == 4,
        format!(
            "{} scale; μ [{}]; K [{}]; artifacts in {}",
            if full { "testbed" } else { "smoke" },
            curve(&mu),
            curve(&k),
            dir.display()
        ),
    )
}

fn main() {
    // `cargo test -- --list` and friends expect a quiet binary
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    std::fs::create_dir_all(artifacts()).unwrap();
    let only: Option<Vec<usize>> =
        std::env::var("SDDG_ACCEPTANCE_ONLY").ok().map(|v| v.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let wanted = |n: usize| only.as_ref().map_or(true, |o| o.contains(&n));
    let timed = |n: usize, f: &dyn Fn() -> Outcome| {
        let t = Instant::now();
        let out = f();
        println!("  [{n}] done in {:.1}s", t.elapsed().as_secs_f64());
        out
    };
    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    let singles: [(usize, &str, fn() -> Outcome); 5] = [
        (1, "analytic loss values", c1_analytic_losses),
        (2, "simplex and IN invariants", c2_simplex_and_in),
        (3, "Fourier round trip", c3_fourier),
        (4, "gradient oracles", c4_gradient_oracles),
        (5, "meta-update exactness", c5_meta_exactness),
    ];
    for (n, name, f) in singles {
        if wanted(n) {
            results.push((n, name, timed(n, &f)));
        }
    }
    if wanted(6) || wanted(7) {
        let (c6, c7) = c6_c7_ablation();
        results.push((6, "ablation ordering", c6));
        results.push((7, "dynamic-weight separation", c7));
    }
    if wanted(8) {
        results.push((8, "determinism and resume", timed(8, &c8_determinism_and_resume)));
    }
    if wanted(9) {
        results.push((9, "hyperparameter harness", timed(9, &c9_sweeps)));
    }

    let mut failed = 0;
    for (n, name, out) in &results {
        match out {
            Ok(d) => println!("PASS criterion {n}: {name} ({d})"),
            Err(d) => {
                failed += 1;
                println!("FAIL criterion {n}: {name} ({d})");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
