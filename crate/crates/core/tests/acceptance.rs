//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any
//! failure. Heavy criteria share the generated suite and trained models.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use emtcomp::config::ExperimentConfig;
use emtcomp::experiment::{self as exp, ModelKind, ScenarioData};
use emtcomp::geometry::{Cell, Compensator, DisplacementPair, GridSpec, GroundTruthPoint, Measurement, Rotation};
use emtcomp::navsim::{
    accumulate_sigma, adaptive_win_fraction, hypervolume_rank_fraction, simulate, RecalPolicy, Trajectory,
};
use emtcomp::nn::{displacement_loss, gradients, InputLayout, MlpModel, Normalizer};
use emtcomp::poly::fit_absolute;
use emtcomp::scenario::offline_split;
use emtcomp::uncertainty::{linear_fit, spatial_sigma, PlanarReport};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

struct Runner {
    failures: usize,
}

impl Runner {
    fn run(&mut self, id: usize, name: &str, limit: Option<Duration>, f: impl FnOnce() -> Outcome) {
        let start = Instant::now();
        let mut outcome = f();
        let took = start.elapsed();
        if let Some(limit) = limit {
            if took > limit {
                let d = outcome.unwrap_or_else(|e| e);
                outcome = Err(format!("{d}; took {took:.1?}, limit {limit:?}"));
            }
        }
        match outcome {
            Ok(d) => println!("PASS {id:>2} {name}: {d} [{:.1}s]", took.as_secs_f64()),
            Err(d) => {
                self.failures += 1;
                println!("FAIL {id:>2} {name}: {d} [{:.1}s]", took.as_secs_f64());
            }
        }
    }
}

fn board_point(spec: &GridSpec, row: usize, col: usize) -> Measurement {
    let gt = GroundTruthPoint::new(spec, Cell::new(row, col, 0), Rotation::Deg0).unwrap();
    Measurement {
        position_mm: gt.position_mm,
        quality: 0.0,
        gt,
    }
}

fn gradient_check() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut worst: f64 = 0.0;
    for draw in 0..12 {
        let layout = InputLayout {
            spatial_dims: if draw % 2 == 0 { 3 } else { 2 },
            use_quality: draw % 3 != 0,
        };
        let d_in = layout.input_dim();
        let d_out = layout.spatial_dims;
        let in_norm = Normalizer::new(vec![-30.0; d_in], vec![30.0; d_in]).unwrap();
        let out_norm = Normalizer::new(vec![-25.0; d_out], vec![35.0; d_out]).unwrap();
        let width = rng.random_range(3..8);
        let mut m = MlpModel::zeros(vec![d_in, width, width, d_out], layout, in_norm, out_norm).unwrap();
        m.init_he(&mut rng);
        m.residual = draw % 4 == 1;
        for p in m.params_mut() {
            *p += rng.random_range(-0.1..0.1);
        }
        let batch: Vec<DisplacementPair> = (0..8)
            .map(|_| {
                let mut pt = || {
                    let gt = GroundTruthPoint::new(&GridSpec::default(), Cell::new(0, 0, 0), Rotation::Deg0).unwrap();
                    Measurement {
                        position_mm: Vector3::new(
                            rng.random_range(-20.0..20.0),
                            rng.random_range(-20.0..20.0),
                            rng.random_range(-5.0..5.0),
                        ),
                        quality: rng.random_range(0.0..3.0),
                        gt,
                    }
                };
                let (a, b) = (pt(), pt());
                let fa = m.forward(&layout.features(&a), None).unwrap();
                let fb = m.forward(&layout.features(&b), None).unwrap();
                let d: f64 = fa.iter().zip(&fb).map(|(u, v)| (u - v).powi(2)).sum::<f64>().sqrt();
                DisplacementPair {
                    m1: a,
                    m2: b,
                    gt_distance_mm: (d + rng.random_range(-1.0..1.0)).max(0.0),
                }
            })
            .collect();
        let g = gradients(&m, &batch).map_err(|e| e.to_string())?;
        let h = 1e-5;
        for i in 0..g.len() {
            let mut plus = m.clone();
            plus.params_mut()[i] += h;
            let mut minus = m.clone();
            minus.params_mut()[i] -= h;
            let fd = (displacement_loss(&plus, &batch).unwrap() - displacement_loss(&minus, &batch).unwrap()) / (2.0 * h);
            let rel = (g[i] - fd).abs() / g[i].abs().max(fd.abs()).max(1e-5);
            worst = worst.max(rel);
        }
    }
    check(worst < 1e-4, format!("max relative error {worst:.2e} over 12 draws"))
}

fn offline(cfg: &ExperimentConfig, data: &[ScenarioData]) -> Outcome {
    let mut lines = Vec::new();
    let mut ann_ok = true;
    let mut poly_best: f64 = f64::NEG_INFINITY;
    for d in data {
        let ann = exp::train_offline(cfg, d, ModelKind::Ann, true, 0).map_err(|e| e.to_string())?;
        let poly = exp::train_offline(cfg, d, ModelKind::Poly, true, cfg.poly.degree).map_err(|e| e.to_string())?;
        let (a, p) = (ann.metrics.headline.reduction_pct, poly.metrics.headline.reduction_pct);
        ann_ok &= a >= 35.0;
        poly_best = poly_best.max(p);
        lines.push(format!("{} {a:.0}/{p:.0}", d.scenario.name));
    }
    check(
        ann_ok && poly_best >= 35.0,
        format!("ann/poly test reduction %: {}; best poly {poly_best:.0}%", lines.join(", ")),
    )
}

struct Online {
    ann_q: exp::Trained,
    ann_noq: exp::Trained,
    poly: exp::Trained,
}

fn online_compensation(on: &Online) -> Outcome {
    let red = on.ann_q.metrics.headline.reduction_pct;
    let mut ordered = true;
    let mut lines = Vec::new();
    for (a, p) in on.ann_q.metrics.sets.iter().zip(&on.poly.metrics.sets) {
        if a.role != "evaluation" {
            continue;
        }
        ordered &= a.compensated_rmse_mm <= p.compensated_rmse_mm;
        lines.push(format!("{} {:.2}<={:.2}", a.set, a.compensated_rmse_mm, p.compensated_rmse_mm));
    }
    check(
        red >= 50.0 && ordered,
        format!("held-out reduction {red:.1}%; ann vs poly rmse mm: {}", lines.join(", ")),
    )
}

fn quality_ablation(on: &Online) -> Outcome {
    let (q, n) = (
        on.ann_q.metrics.headline.compensated_rmse_mm,
        on.ann_noq.metrics.headline.compensated_rmse_mm,
    );
    check(q <= n, format!("held-out rmse with quality {q:.3} mm, without {n:.3} mm"))
}

fn uncertainty_error(r: &PlanarReport) -> Outcome {
    let f = r.sigma_vs_error;
    check(
        f.pearson_r > 0.5 && f.slope > 0.0,
        format!("r = {:.3}, slope = {:.4}", f.pearson_r, f.slope),
    )
}

fn uncertainty_density(r: &PlanarReport) -> Outcome {
    let f = r.sigma_vs_distance;
    let near = r.mean_sigma_where(|d| d < 10.0);
    let far = r.mean_sigma_where(|d| d > 35.0);
    let (Some(near), Some(far)) = (near, far) else {
        return Err("no cells in one of the distance bands".into());
    };
    check(
        f.slope > 0.0 && far > near,
        format!("slope {:.2e}, mean sigma far {far:.4} mm vs near {near:.4} mm", f.slope),
    )
}

fn accumulation() -> Outcome {
    let exact = accumulate_sigma(&[3.0, 4.0]);
    if exact != 5.0 {
        return Err(format!("accumulate_sigma(3, 4) = {exact}"));
    }
    // ten unit-sigma segments along one row, tau 1.5: the accumulator
    // crosses at the third segment after each reset
    let spec = GridSpec::default();
    let traj = Trajectory::from_waypoints((0..11).map(|c| board_point(&spec, 0, c)).collect());
    let stretch = |p: &Vector3<f64>| Vector3::new(p.x * 1.01, p.y * 1.01, p.z);
    struct F<G>(G);
    impl<G: Fn(&Vector3<f64>) -> Vector3<f64> + Sync> Compensator for F<G> {
        fn compensate(&self, m: &Measurement) -> Vector3<f64> {
            (self.0)(&m.position_mm)
        }
    }
    let r = simulate(&traj, &F(stretch), &|_| 1.0, RecalPolicy::Adaptive { tau_mm: 1.5 }).map_err(|e| e.to_string())?;
    let flags: Vec<usize> = r.segments.iter().enumerate().filter(|(_, s)| s.recalibrated).map(|(i, _)| i).collect();
    let seg_err = 0.01 * spec.pitch_mm;
    let resets_ok = r.segments.iter().enumerate().all(|(i, s)| {
        let k = (i % 3 + 1) as f64;
        (s.sigma_accum_mm - k.sqrt()).abs() < 1e-12 && (s.error_mm - k * seg_err).abs() < 1e-9
    });
    check(
        flags == [2, 5, 8] && r.recal_count == 3 && resets_ok,
        format!("sqrt(3^2+4^2) = 5 exactly; recalibrations at segments {flags:?}"),
    )
}

fn pareto(cfg: &ExperimentConfig, r: &PlanarReport) -> Outcome {
    let has = |v: f64| cfg.nav.intervals_mm.iter().any(|&x| x == v);
    if !has(0.0) || !has(219.0) {
        return Err("interval sweep misses 0 or 219 mm".into());
    }
    let tau_idx = cfg
        .nav
        .taus_mm
        .iter()
        .position(|&t| t == 2.0)
        .ok_or("tau sweep misses 2 mm")?;
    let paths = exp::nav_paths(cfg, r).map_err(|e| e.to_string())?;
    let mut ok = true;
    let mut lines = Vec::new();
    for (region, traj) in [("seen", &paths.seen), ("unseen", &paths.unseen)] {
        let pts = exp::run_pareto(cfg, r, traj).map_err(|e| e.to_string())?;
        let win = adaptive_win_fraction(&pts).unwrap_or(0.0);
        let adaptive = &pts[..cfg.nav.taus_mm.len()];
        let rank = hypervolume_rank_fraction(adaptive, tau_idx);
        ok &= win >= 0.7 && rank < 0.25;
        lines.push(format!(
            "{region}: adaptive wins {:.0}% of matched counts, tau=2 mm ({} recal) ranked below {:.0}% of adaptive points by hypervolume",
            100.0 * win,
            adaptive[tau_idx].recal_count,
            100.0 * rank
        ));
    }
    check(ok, lines.join("; "))
}

fn run_pipeline(cfg: &ExperimentConfig) -> emtcomp::Result<()> {
    exp::cmd_generate(cfg)?;
    let data = exp::load_data(cfg)?;
    exp::train_online(cfg, &data, ModelKind::Ann, true, 0)?.save(cfg)?;
    exp::train_online(cfg, &data, ModelKind::Poly, true, cfg.poly.degree)?.save(cfg)?;
    exp::train_offline(cfg, &data[0], ModelKind::Ann, true, 0)?.save(cfg)?;
    let planar = exp::train_planar_model(cfg)?;
    planar.save(cfg)?;
    exp::cmd_uncertainty(cfg, &planar.model)?;
    exp::cmd_simulate(cfg, &planar.model, RecalPolicy::Adaptive { tau_mm: 0.3 })?;
    exp::cmd_pareto(cfg, &planar.model)?;
    Ok(())
}

fn files_under(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().display().to_string(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn determinism() -> Outcome {
    // the full pipeline with shortened training and sampling
    let mut cfg = ExperimentConfig::default();
    cfg.samples_per_position = 50;
    cfg.train.epochs = 15;
    cfg.poly.epochs = 15;
    cfg.offline.train.epochs = 15;
    cfg.planar.train.epochs = 15;
    cfg.planar.mc_samples = 100;
    let roots = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let mut trees = Vec::new();
    for root in &roots {
        cfg.out_dir = root.path().to_path_buf();
        run_pipeline(&cfg).map_err(|e| e.to_string())?;
        trees.push(files_under(root.path()));
    }
    let differing: Vec<&String> = trees[0].iter().filter(|(k, v)| trees[1].get(*k) != Some(v)).map(|(k, _)| k).collect();
    check(
        differing.is_empty() && trees[0].len() == trees[1].len() && trees[0].len() >= 15,
        format!("{} files compared, {} differ {:?}", trees[0].len(), differing.len(), differing),
    )
}

fn oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let spec = GridSpec::default();

    // degree-1 polynomial against a known affine distortion
    let a = Matrix3::new(1.02, 0.01, -0.005, -0.015, 0.98, 0.02, 0.004, 0.01, 1.01);
    let b = Vector3::new(1.5, -2.0, 0.7);
    let ms: Vec<Measurement> = spec
        .calibrated
        .iter()
        .flat_map(|&(r, c)| (0..spec.n_elevations).map(move |e| (r, c, e)))
        .map(|(r, c, e)| {
            let gt = GroundTruthPoint::new(&spec, Cell::new(r, c, e), Rotation::Deg0).unwrap();
            Measurement {
                position_mm: a * gt.position_mm + b,
                quality: 0.0,
                gt,
            }
        })
        .collect();
    let poly = fit_absolute(&ms, 1, false, 0.05).map_err(|e| e.to_string())?;
    let poly_err = ms
        .iter()
        .map(|m| (poly.compensate(m) - m.gt.position_mm).amax())
        .fold(0.0, f64::max);

    // forward pass against an explicit loop over the weight arrays
    let layout = InputLayout::VOLUMETRIC;
    let in_norm = Normalizer::new(vec![-50.0, -40.0, 0.0, 0.0], vec![250.0, 260.0, 30.0, 5.0]).unwrap();
    let out_norm = Normalizer::new(vec![-60.0, -50.0, -5.0], vec![260.0, 270.0, 35.0]).unwrap();
    let mut m = MlpModel::zeros(vec![4, 7, 5, 3], layout, in_norm.clone(), out_norm.clone()).unwrap();
    for p in m.params_mut() {
        *p = rng.random_range(-1.0..1.0);
    }
    let mut fwd_err: f64 = 0.0;
    for _ in 0..20 {
        let x: Vec<f64> = (0..4).map(|i| rng.random_range(in_norm.min[i]..in_norm.max[i])).collect();
        let got = m.forward(&x, None).unwrap();
        let mut h: Vec<f64> = (0..4).map(|i| (x[i] - in_norm.min[i]) / (in_norm.max[i] - in_norm.min[i])).collect();
        for l in 0..3 {
            let (w, bias) = (m.weights(l), m.biases(l));
            let n_in = h.len();
            let z: Vec<f64> = (0..bias.len())
                .map(|j| bias[j] + (0..n_in).map(|i| w[j * n_in + i] * h[i]).sum::<f64>())
                .collect();
            h = if l < 2 { z.iter().map(|&v| if v > 0.0 { v } else { m.leaky_slope * v }).collect() } else { z };
        }
        for k in 0..3 {
            let expected = h[k] * (out_norm.max[k] - out_norm.min[k]) + out_norm.min[k];
            fwd_err = fwd_err.max((got[k] - expected).abs());
        }
    }

    // spatial sigma and least squares against two-pass and normal-equation forms
    let samples: Vec<Vec<f64>> = (0..500).map(|_| vec![rng.random_range(-3.0..5.0), rng.random_range(10.0..11.0)]).collect();
    let est = spatial_sigma(&samples).map_err(|e| e.to_string())?;
    let n = samples.len() as f64;
    let naive_var = |k: usize| {
        let mean = samples.iter().map(|s| s[k]).sum::<f64>() / n;
        samples.iter().map(|s| (s[k] - mean).powi(2)).sum::<f64>() / (n - 1.0)
    };
    let sigma_err = (est.sigma_mm - (naive_var(0) + naive_var(1)).sqrt()).abs();
    let xs: Vec<f64> = (0..200).map(|_| rng.random_range(0.0..40.0)).collect();
    let ys: Vec<f64> = xs.iter().map(|x| 0.3 * x - 2.0 + rng.random_range(-1.0..1.0)).collect();
    let fit = linear_fit(&xs, &ys).map_err(|e| e.to_string())?;
    let (sx, sy) = (xs.iter().sum::<f64>(), ys.iter().sum::<f64>());
    let sxx: f64 = xs.iter().map(|x| x * x).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| x * y).sum();
    let syy: f64 = ys.iter().map(|y| y * y).sum();
    let k = xs.len() as f64;
    let slope = (k * sxy - sx * sy) / (k * sxx - sx * sx);
    let intercept = (sy - slope * sx) / k;
    let r = (k * sxy - sx * sy) / ((k * sxx - sx * sx).sqrt() * (k * syy - sy * sy).sqrt());
    let fit_err = (fit.slope - slope).abs().max((fit.intercept - intercept).abs()).max((fit.pearson_r - r).abs());

    check(
        poly_err < 1e-6 && fwd_err < 1e-12 && sigma_err < 1e-8 && fit_err < 1e-8,
        format!("affine {poly_err:.1e} mm, forward {fwd_err:.1e}, sigma {sigma_err:.1e}, fit {fit_err:.1e}"),
    )
}

fn structure(data: &[ScenarioData]) -> Outcome {
    let counts: Vec<usize> = data.iter().map(|d| d.dataset.pairs.len()).collect();
    let split = offline_split(&data[0].dataset, 0).map_err(|e| e.to_string())?;
    let parts = [split.train.measurements.len(), split.val.measurements.len(), split.test.measurements.len()];
    let total: usize = parts.iter().sum();
    let pct: Vec<usize> = parts.iter().map(|p| (100 * p + total / 2) / total).collect();
    check(
        counts.iter().all(|&c| c == 870) && pct == [45, 5, 50] && total == data[0].dataset.measurements.len(),
        format!("pairs per scenario {counts:?}; split {parts:?} = {pct:?}%"),
    )
}

fn main() -> ExitCode {
    let mut runner = Runner { failures: 0 };
    let cfg = ExperimentConfig::default();
    let data = exp::generate(&cfg).expect("default suite generates");

    runner.run(1, "gradient correctness", Some(Duration::from_secs(10)), gradient_check);
    runner.run(2, "offline compensation", Some(Duration::from_secs(300)), || offline(&cfg, &data));

    let mut online = None;
    runner.run(3, "online compensation", Some(Duration::from_secs(600)), || {
        let train = |kind, q| exp::train_online(&cfg, &data, kind, q, cfg.poly.degree).map_err(|e| e.to_string());
        let on = Online {
            ann_q: train(ModelKind::Ann, true)?,
            ann_noq: train(ModelKind::Ann, false)?,
            poly: train(ModelKind::Poly, true)?,
        };
        let out = online_compensation(&on);
        online = Some(on);
        out
    });
    runner.run(4, "quality ablation", None, || match &online {
        Some(on) => quality_ablation(on),
        None => Err("online models unavailable".into()),
    });

    let planar = exp::train_planar_model(&cfg)
        .and_then(|t| exp::uncertainty_report(&cfg, &t.model))
        .map_err(|e| e.to_string());
    let on_planar = |f: fn(&PlanarReport) -> Outcome| match &planar {
        Ok(r) => f(r),
        Err(e) => Err(e.clone()),
    };
    runner.run(5, "uncertainty vs error", None, || on_planar(uncertainty_error));
    runner.run(6, "uncertainty vs density", None, || on_planar(uncertainty_density));
    runner.run(7, "accumulation arithmetic", None, accumulation);
    runner.run(8, "pareto behaviour", Some(Duration::from_secs(120)), || match &planar {
        Ok(r) => pareto(&cfg, r),
        Err(e) => Err(e.clone()),
    });
    runner.run(9, "determinism", None, determinism);
    runner.run(10, "oracle equivalences", None, oracles);
    runner.run(11, "structural reproduction", None, || structure(&data));

    if runner.failures == 0 {
        println!("all 11 criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("{} of 11 criteria failed", runner.failures);
        ExitCode::FAILURE
    }
}
