//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits nonzero if any failed. Built with `harness = false` so the lines are
//! always shown.

mod common;

use std::process::ExitCode;
use std::time::{Duration, Instant};

use common::{knn_softmax, matmul, max_abs_diff, random_matrix, recall, window_partition, Mat};
use prfusion_core::attention::{evolve_metric, metric_attention, AttentionParams, MetricActivation, MetricField, SolverConfig};
use prfusion_core::checkpoint;
use prfusion_core::diagnostics::{run_gradcheck, GradCheckConfig};
use prfusion_core::fusion::{gem_pool, NodeKind, WindowBatch};
use prfusion_core::geometry::WindowGrid;
use prfusion_core::model::{Descriptor, Model, ModelConfig, Variant};
use prfusion_core::ndm::{build_knn_attention, Ndm};
use prfusion_core::params::normal_matrix;
use prfusion_core::pipeline::{embed, evaluate, train_on};
use prfusion_core::report::config_hash;
use prfusion_core::retrieval::{recall_metrics, DescriptorDb};
use prfusion_core::sweep::{perturbation_sweep, sweep_table, ExtrinsicError, SweepConfig, SweepKind, SweepModel, SweepRow};
use prfusion_core::synth::{generate_world, Dataset, Role, WorldConfig};
use prfusion_core::training::{loss_table, triplet_loss, TrainConfig};
use prfusion_core::Error;
use prfusion_tensor::{ode_integrate, OdeState, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn tensor(m: &Mat) -> Tensor {
    Tensor::from_rows(m)
}

fn rows(t: &Tensor) -> Mat {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

fn gradient_integrity() -> Outcome {
    let t = Instant::now();
    let report = run_gradcheck(&GradCheckConfig::default()).map_err(|e| e.to_string())?;
    let elapsed = t.elapsed();
    let wanted = [
        "metric_ode",
        "metric_attention",
        "gem",
        "gfm",
        "lfm",
        "ndm",
        "backbone_2d",
        "backbone_3d",
        "triplet_loss",
    ];
    for w in wanted {
        ensure(report.iter().any(|r| r.module == w), || format!("module {w} was not checked"))?;
    }
    let worst = report.iter().max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err)).unwrap();
    ensure(report.iter().all(|r| r.passed()), || {
        format!("{} has relative error {:.3e}", worst.module, worst.max_rel_err)
    })?;
    ensure(elapsed < Duration::from_secs(60), || format!("took {elapsed:.1?}"))?;
    Ok(format!(
        "{} modules, worst {} at {:.2e}, {:.1?}",
        report.len(),
        worst.module,
        worst.max_rel_err,
        elapsed
    ))
}

fn reduction_identity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1001);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let n = rng.random_range(1..=16);
        let c = rng.random_range(1..=8);
        let x = random_matrix(&mut rng, n, c, -2.0, 2.0);
        let p = AttentionParams::init(c, &mut rng).map_err(|e| e.to_string())?;
        let ones = MetricField { g: Tensor::full(&[n, c], 1.0) };
        let got = metric_attention(&tensor(&x), Some(&ones), &p, None).map_err(|e| e.to_string())?;
        let all: Vec<usize> = (0..n).collect();
        let want: Vec<f64> = common::attention(&x, None, &rows(&p.w_q), &rows(&p.w_k), &rows(&p.w_v), &all)
            .into_values()
            .flatten()
            .collect();
        worst = worst.max(max_abs_diff(got.data(), &want));
    }
    ensure(worst <= 1e-9, || format!("max deviation {worst:.3e}"))?;
    Ok(format!("100 instances, max deviation {worst:.2e}"))
}

fn oracle_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1002);
    let trials = 1000;

    for t in 0..trials {
        let extent = (rng.random_range(1..=6), rng.random_range(1..=8));
        let (dh, dw) = (rng.random_range(1..=4), rng.random_range(1..=4));
        let n = rng.random_range(1..30);
        let coords: Vec<[f64; 2]> = (0..n)
            .map(|_| [rng.random_range(0.0..extent.0 as f64), rng.random_range(0.0..extent.1 as f64)])
            .collect();
        let valid: Vec<bool> = (0..n).map(|_| rng.random_bool(0.85)).collect();
        let grid = WindowGrid::new(extent, dh, dw).map_err(|e| e.to_string())?;
        let batch = WindowBatch::build(&coords, &valid, vec![NodeKind::Sample3d; n], &grid).map_err(|e| e.to_string())?;
        let got: Vec<((usize, usize), Vec<usize>)> = batch.groups.iter().map(|(w, g)| ((w.u, w.v), g.clone())).collect();
        let want: Vec<_> = window_partition(&coords, &valid, extent, dh, dw).into_iter().collect();
        ensure(got == want, || format!("window partition differs on instance {t}"))?;
    }

    let mut knn_err = 0.0f64;
    for t in 0..trials {
        let n = rng.random_range(1..=12);
        let c = rng.random_range(1..=5);
        let k = rng.random_range(1..=n);
        let x = random_matrix(&mut rng, n, c, -1.0, 1.0);
        let wy = random_matrix(&mut rng, c, c, -1.0, 1.0);
        let a = build_knn_attention(&tensor(&x), None, &tensor(&wy), k).map_err(|e| e.to_string())?;
        let y = matmul(&x, &wy);
        let s: Mat = y
            .iter()
            .map(|yi| y.iter().map(|yj| yi.iter().zip(yj).map(|(a, b)| a * b).sum()).collect())
            .collect();
        let want = knn_softmax(&s, k);
        let flat_want = common::flat(&want);
        let zeros_match = a.data().iter().zip(&flat_want).all(|(g, w)| (*g == 0.0) == (*w == 0.0));
        ensure(zeros_match, || format!("KNN support differs on instance {t}"))?;
        knn_err = knn_err.max(max_abs_diff(a.data(), &flat_want));
    }
    ensure(knn_err <= 1e-9, || format!("KNN softmax deviation {knn_err:.3e}"))?;

    let mut gem_err = 0.0f64;
    for _ in 0..trials {
        let n = rng.random_range(1..=12);
        let c = rng.random_range(1..=6);
        let p = rng.random_range(1.0..6.0);
        let x = random_matrix(&mut rng, n, c, 0.05, 3.0);
        let got = gem_pool(&tensor(&x), &Tensor::scalar(p)).map_err(|e| e.to_string())?;
        let want = common::gem(&x, p);
        for (g, w) in got.data().iter().zip(&want) {
            gem_err = gem_err.max((g - w).abs() / w.abs().max(1.0));
        }
    }
    ensure(gem_err <= 1e-9, || format!("GeM deviation {gem_err:.3e}"))?;

    let mut trip_err = 0.0f64;
    for _ in 0..trials {
        let d = rng.random_range(1..=16);
        let v = |rng: &mut ChaCha8Rng| (0..d).map(|_| rng.random_range(-2.0..2.0)).collect::<Vec<f64>>();
        let (a, p, n) = (v(&mut rng), v(&mut rng), v(&mut rng));
        let m = rng.random_range(0.0..1.0);
        let got = triplet_loss(&Tensor::vector(a.clone()), &Tensor::vector(p.clone()), &Tensor::vector(n.clone()), m)
            .map_err(|e| e.to_string())?
            .item();
        trip_err = trip_err.max((got - common::triplet(&a, &p, &n, m)).abs());
    }
    ensure(trip_err <= 1e-9, || format!("triplet deviation {trip_err:.3e}"))?;

    for t in 0..trials {
        let dim = rng.random_range(1..=4);
        let nd = rng.random_range(1..=30);
        let mut db = DescriptorDb::new(dim);
        let mut plain = Vec::new();
        for i in 0..nd {
            let f: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0f32..1.0) as f64).collect();
            let p = [rng.random_range(0.0..60.0), rng.random_range(0.0..60.0), 0.0];
            db.push(i as u64, &f, p).map_err(|e| e.to_string())?;
            plain.push((i as u64, f, p));
        }
        let queries: Vec<Descriptor> = (0..rng.random_range(1..=10))
            .map(|_| Descriptor {
                f: (0..dim).map(|_| rng.random_range(-1.0f32..1.0) as f64).collect(),
                position: [rng.random_range(0.0..60.0), rng.random_range(0.0..60.0), 0.0],
            })
            .collect();
        let k = rng.random_range(1..=8);
        let tau = rng.random_range(5.0..30.0);
        let got = recall_metrics(&db, &queries, k, tau).map_err(|e| e.to_string())?;
        let qs: Vec<(Vec<f64>, [f64; 3])> = queries.iter().map(|q| (q.f.clone(), q.position)).collect();
        let want = recall(&plain, &qs, k, tau);
        let denom = want.evaluated.max(1) as f64;
        let same = got.evaluated == want.evaluated
            && got.excluded == want.excluded
            && got.ar.iter().zip(&want.hits).all(|(a, h)| *a == *h as f64 / denom)
            && got.ar_one_percent == want.hits_one_percent as f64 / denom;
        ensure(same, || format!("recall differs on instance {t}"))?;
    }

    Ok(format!(
        "{trials} instances each: windows exact, KNN {knn_err:.1e}, GeM {gem_err:.1e}, triplet {trip_err:.1e}, recall exact"
    ))
}

fn ode_correctness() -> Outcome {
    let solve = |steps: usize| -> Result<f64, String> {
        let s = OdeState::new(Tensor::scalar(1.0), 0.0, 1.0, steps).map_err(|e| e.to_string())?;
        Ok(ode_integrate(|_, y| Ok(y.clone()), &s).map_err(|e| e.to_string())?.item())
    };
    let e = std::f64::consts::E;
    let y32 = solve(32)?;
    ensure((y32 - e).abs() < 1e-6, || format!("|y(1) - e| = {:.3e} at 32 steps", (y32 - e).abs()))?;
    let oracle = common::rk4_scalar(|y| y, 1.0, 32);
    ensure((y32 - oracle).abs() < 1e-13, || format!("differs from the scalar RK4 oracle by {:.3e}", (y32 - oracle).abs()))?;
    let mut orders = Vec::new();
    for steps in [2, 4, 8, 16] {
        let e1 = (solve(steps)? - e).abs();
        let e2 = (solve(2 * steps)? - e).abs();
        orders.push((e1 / e2).log2());
    }
    let min = orders.iter().cloned().fold(f64::INFINITY, f64::min);
    ensure(min >= 3.5, || format!("empirical orders {orders:.2?}"))?;

    // the metric flow refines the same way
    let mut rng = ChaCha8Rng::seed_from_u64(1004);
    let f = normal_matrix(&mut rng, 6, 4, 1.0).map_err(|e| e.to_string())?;
    let w = normal_matrix(&mut rng, 4, 4, 1.0).map_err(|e| e.to_string())?;
    let g = |steps| {
        evolve_metric(&f, &w, &SolverConfig { horizon: 1.0, steps }, MetricActivation::Tanh)
            .map(|m| m.g.to_vec())
            .map_err(|e| e.to_string())
    };
    let (g8, g16, g32) = (g(8)?, g(16)?, g(32)?);
    let ratio = max_abs_diff(&g8, &g16) / max_abs_diff(&g16, &g32);
    ensure(ratio.log2() >= 3.5, || format!("metric flow order {:.2}", ratio.log2()))?;
    Ok(format!(
        "|y(1)-e| = {:.2e}, orders {:.2?}, metric flow order {:.2}",
        (y32 - e).abs(),
        orders,
        ratio.log2()
    ))
}

fn fixed_points() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1005);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let c = rng.random_range(1..=8);
        let n = rng.random_range(2..=20);
        let k = rng.random_range(1..=n);
        let ndm = Ndm::init(c, 2, k, SolverConfig::default(), &mut rng).map_err(|e| e.to_string())?;
        let row: Vec<f64> = (0..c).map(|_| rng.random_range(-3.0..3.0)).collect();
        let x0 = tensor(&vec![row; n]);
        let pos = normal_matrix(&mut rng, n, 2, 1.0).map_err(|e| e.to_string())?;
        let out = ndm.forward(&x0, Some(&pos)).map_err(|e| e.to_string())?;
        worst = worst.max(max_abs_diff(out.data(), x0.data()));
    }
    ensure(worst <= 1e-9, || format!("consensus drift {worst:.3e}"))?;

    for _ in 0..50 {
        let c = rng.random_range(1..=8);
        let n = rng.random_range(1..=10);
        let f = normal_matrix(&mut rng, n, c, 2.0).map_err(|e| e.to_string())?;
        let g = evolve_metric(&f, &Tensor::zeros(&[c, c]), &SolverConfig::default(), MetricActivation::Tanh)
            .map_err(|e| e.to_string())?;
        ensure(g.g.data() == f.data(), || "zero-field metric flow moved its initial condition".into())?;
    }
    Ok(format!("NDM consensus drift {worst:.1e} over 50 instances, zero-field metric exact"))
}

struct Trained {
    flat: Model,
    full: Model,
    eval_set: Dataset,
}

fn train_variant(variant: Variant, train_set: &Dataset) -> Result<(Model, Vec<f64>), String> {
    let mut model = Model::new(ModelConfig {
        variant,
        ..ModelConfig::default()
    })
    .map_err(|e| e.to_string())?;
    let trace = train_on(&mut model, train_set, &TrainConfig::default()).map_err(|e| e.to_string())?;
    Ok((model, trace.iter().map(|s| s.mean_loss).collect()))
}

fn end_to_end(slot: &mut Option<Trained>) -> Outcome {
    let t = Instant::now();
    let render = |seed| -> Result<Dataset, String> {
        let world = generate_world(seed, WorldConfig::default()).map_err(|e| e.to_string())?;
        Dataset::render(&world).map_err(|e| e.to_string())
    };
    let train_set = render(1007)?;
    let eval_set = render(7)?;
    let (flat, flat_loss) = train_variant(Variant::PrFusion, &train_set)?;
    let (full, full_loss) = train_variant(Variant::PrFusionPlusPlus, &train_set)?;
    let ar = |m: &Model| evaluate(m, &eval_set, 1, 25.0).map(|r| r.ar_at(1)).map_err(|e| e.to_string());
    let (a_flat, a_full) = (ar(&flat)?, ar(&full)?);
    let elapsed = t.elapsed();
    let detail = format!(
        "AR@1 prfusion {a_flat:.3}, prfusion++ {a_full:.3}, loss {:.4}->{:.4} / {:.4}->{:.4}, {:.1?}",
        flat_loss[0],
        flat_loss[flat_loss.len() - 1],
        full_loss[0],
        full_loss[full_loss.len() - 1],
        elapsed
    );
    *slot = Some(Trained { flat, full, eval_set });
    let random = 1.0 / 100.0;
    ensure(a_flat >= 0.80, || format!("prfusion AR@1 below 0.80; {detail}"))?;
    ensure(a_full >= a_flat - 0.02, || format!("prfusion++ more than 0.02 below prfusion; {detail}"))?;
    ensure(a_flat.min(a_full) >= 4.0 * random, || format!("not 4x above random; {detail}"))?;
    ensure(elapsed < Duration::from_secs(20 * 60), || format!("over 20 minutes; {detail}"))?;
    Ok(detail)
}

fn sweep(trained: &Trained, alphas: Vec<f64>, extrinsics: Vec<ExtrinsicError>) -> Result<Vec<SweepRow>, String> {
    let models = [
        SweepModel {
            name: "prfusion".into(),
            model: &trained.flat,
        },
        SweepModel {
            name: "prfusion++".into(),
            model: &trained.full,
        },
    ];
    let cfg = SweepConfig {
        alphas,
        extrinsics,
        tau: 25.0,
        seed: 99,
    };
    perturbation_sweep(&models, &trained.eval_set, &cfg).map_err(|e| e.to_string())
}

fn clean_ar1(trained: &Trained, name: &str) -> Result<f64, String> {
    let m = if name == "prfusion" { &trained.flat } else { &trained.full };
    evaluate(m, &trained.eval_set, 1, 25.0).map(|r| r.ar_at(1)).map_err(|e| e.to_string())
}

fn calibration_sensitivity(trained: Option<&Trained>) -> Outcome {
    let trained = trained.ok_or("no trained models")?;
    let grid = [(0.0, 0.0), (0.1, 1.0), (0.2, 2.0), (0.5, 5.0), (1.0, 10.0)];
    let errs = grid.iter().map(|&(t, r)| ExtrinsicError::oblique(t, f64::to_radians(r))).collect();
    let rows = sweep(trained, vec![], errs)?;
    let clean_full = clean_ar1(trained, "prfusion++")?;
    for r in &rows {
        let SweepKind::Extrinsic { t_err, r_err } = r.kind else { continue };
        let zero = t_err == 0.0 && r_err == 0.0;
        match r.model.as_str() {
            "prfusion" => ensure(r.descriptors_unchanged, || format!("prfusion moved at t_e={t_err}, r_e={r_err}"))?,
            _ if zero => {
                ensure(r.descriptors_unchanged, || "prfusion++ moved at zero error".into())?;
                ensure(r.ar1 == clean_full, || format!("prfusion++ zero-error AR@1 {} vs clean {clean_full}", r.ar1))?;
            }
            _ => ensure(!r.descriptors_unchanged, || format!("prfusion++ ignored t_e={t_err}, r_e={r_err}"))?,
        }
    }
    let full: Vec<String> = rows
        .iter()
        .filter(|r| r.model == "prfusion++")
        .map(|r| format!("{:.2}", r.ar1))
        .collect();
    Ok(format!("prfusion bitwise constant; prfusion++ AR@1 over the grid [{}]", full.join(", ")))
}

fn robustness(trained: Option<&Trained>) -> Outcome {
    let trained = trained.ok_or("no trained models")?;
    let alphas = vec![0.0, 0.02, 0.05, 0.1, 0.2];
    let rows = sweep(trained, alphas.clone(), vec![])?;
    let csv = sweep_table(&rows).render(&config_hash("acceptance"));
    ensure(csv.starts_with("kind,model,alpha") && csv.contains("# config_hash="), || "sweep CSV malformed".into())?;
    let mut summary = Vec::new();
    for name in ["prfusion", "prfusion++"] {
        let clean = clean_ar1(trained, name)?;
        let mine: Vec<&SweepRow> = rows.iter().filter(|r| r.model == name).collect();
        ensure(mine.len() == alphas.len(), || format!("{name}: expected one row per alpha"))?;
        let zero = mine[0];
        ensure(zero.shift.max == 0.0 && zero.shift.mean == 0.0, || format!("{name}: alpha=0 shift is nonzero"))?;
        ensure(zero.ar1 == clean, || format!("{name}: alpha=0 AR@1 {} vs clean {clean}", zero.ar1))?;
        for w in mine.windows(2) {
            ensure(w[1].shift.mean >= w[0].shift.mean, || format!("{name}: mean shift decreases between alphas"))?;
        }
        summary.push(format!(
            "{name} AR@1 {}",
            mine.iter().map(|r| format!("{:.2}", r.ar1)).collect::<Vec<_>>().join("/")
        ));
    }
    Ok(summary.join("; "))
}

fn determinism(trained: Option<&Trained>) -> Outcome {
    let world = WorldConfig {
        n_places: 10,
        ..WorldConfig::default()
    };
    let data = Dataset::render(&generate_world(55, world.clone()).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    let again = Dataset::render(&generate_world(55, world).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    ensure(data.frames == again.frames, || "dataset rendering is not reproducible".into())?;

    let cfg = TrainConfig {
        epochs: 3,
        batch: 10,
        ..TrainConfig::default()
    };
    let run = || -> Result<(String, Vec<u8>), String> {
        let mut m = Model::new(ModelConfig::default()).map_err(|e| e.to_string())?;
        let trace = train_on(&mut m, &data, &cfg).map_err(|e| e.to_string())?;
        let db = embed(&m, &data, Some(Role::Database)).map_err(|e| e.to_string())?;
        Ok((loss_table(&trace).render("h"), db.to_bytes()))
    };
    let (loss_a, db_a) = run()?;
    let (loss_b, db_b) = run()?;
    ensure(loss_a == loss_b, || "loss traces differ".into())?;
    ensure(db_a == db_b, || "descriptor databases differ".into())?;

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let db = DescriptorDb::from_bytes(&db_a).map_err(|e| e.to_string())?;
    let path = dir.path().join("db.prfd");
    db.save(&path).map_err(|e| e.to_string())?;
    let back = DescriptorDb::load(&path).map_err(|e| e.to_string())?;
    ensure(back == db && std::fs::read(&path).map_err(|e| e.to_string())? == db_a, || "db round trip not exact".into())?;

    if let Some(t) = trained {
        let a = embed(&t.full, &t.eval_set, None).map_err(|e| e.to_string())?.to_bytes();
        let b = embed(&t.full, &t.eval_set, None).map_err(|e| e.to_string())?.to_bytes();
        ensure(a == b, || "re-embedding the evaluation set changed bytes".into())?;
        let ck = checkpoint::to_bytes(&t.full);
        let restored = checkpoint::from_bytes(&ck).map_err(|e| e.to_string())?;
        let c = embed(&restored, &t.eval_set, None).map_err(|e| e.to_string())?.to_bytes();
        ensure(a == c, || "restored checkpoint embeds differently".into())?;
    }

    let mut bad = db_a.clone();
    bad[0] ^= 0x20;
    ensure(matches!(DescriptorDb::from_bytes(&bad), Err(Error::Format { .. })), || "bad db magic accepted".into())?;
    ensure(matches!(DescriptorDb::from_bytes(&db_a[..db_a.len() - 5]), Err(Error::Format { .. })), || {
        "truncated db accepted".into()
    })?;
    let ck = checkpoint::to_bytes(&Model::new(ModelConfig::default()).map_err(|e| e.to_string())?);
    let mut bad_ck = ck.clone();
    bad_ck[2] ^= 0x01;
    ensure(matches!(checkpoint::from_bytes(&bad_ck), Err(Error::Format { .. })), || "bad checkpoint magic accepted".into())?;
    ensure(matches!(checkpoint::from_bytes(&ck[..ck.len() - 1]), Err(Error::Format { .. })), || {
        "truncated checkpoint accepted".into()
    })?;
    Ok("loss traces, descriptor DBs and checkpoints byte-identical; corrupt files rejected".into())
}

fn main() -> ExitCode {
    let mut trained = None;
    let mut results: Vec<(&str, Outcome)> = Vec::new();
    let mut run = |name: &'static str, f: &mut dyn FnMut() -> Outcome| {
        let t = Instant::now();
        let r = f();
        let (tag, detail) = match &r {
            Ok(d) => ("PASS", d.clone()),
            Err(d) => ("FAIL", d.clone()),
        };
        println!("criterion {:<28} {tag}  {detail}  [{:.1?}]", name, t.elapsed());
        results.push((name, r));
    };
    run("1 gradient integrity", &mut gradient_integrity);
    run("2 reduction identity", &mut reduction_identity);
    run("3 oracle equivalence", &mut oracle_equivalence);
    run("4 ode correctness", &mut ode_correctness);
    run("5 fixed points", &mut fixed_points);
    run("6 end-to-end retrieval", &mut || end_to_end(&mut trained));
    run("7 calibration sensitivity", &mut || calibration_sensitivity(trained.as_ref()));
    run("8 robustness sweep", &mut || robustness(trained.as_ref()));
    run("9 determinism", &mut || determinism(trained.as_ref()));
    let failed = results.iter().filter(|r| r.1.is_err()).count();
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
