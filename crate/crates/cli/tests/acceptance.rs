//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any failed. Runs the full toy pipeline twice.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use latentservo_core::analysis::{extract_time_varying, FactorSet, TaskMap};
use latentservo_core::autodiff::{
    finite_diff_check, finite_diff_check_with, gaussian_kl, spatial_softmax, ProbeSelection, Tape, Tensor, Var,
};
use latentservo_core::control::{
    broyden_update, control_loop, sample_start, Goal, JacobianEstimate, Sensor, ServoEnv, UvsConfig, UvsController,
};
use latentservo_core::repr::{
    batch_loss, compute_beta, sample_noise, EncoderSpec, Method, Model, OracleRepresentation,
};
use latentservo_core::toyenv::{render_position, Image, TaskSpec};
use nalgebra::DMatrix;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde_json::Value;

type Outcome = Result<String, String>;
type Staged = fn(&RunDir) -> Outcome;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---- criterion 1: gradients ----

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn off_kink(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut t = random(shape, seed);
    t.data_mut().iter_mut().for_each(|v| *v = v.signum() * (0.1 + v.abs()));
    t
}

fn weighted(tape: &mut Tape<f64>, y: Var) -> latentservo_core::Result<Var> {
    let w = tape.constant(random(tape.value(y).shape(), 99));
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

type Layer = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> latentservo_core::Result<Var>>;

fn layer_cases() -> Vec<(&'static str, Layer, Vec<Tensor<f64>>)> {
    let x = || vec![off_kink(&[3, 4], 1)];
    let pair = || vec![random(&[2, 5], 1), random(&[2, 5], 2)];
    let mut sigma = random(&[3, 4], 3);
    sigma.data_mut().iter_mut().for_each(|s| *s = 0.3 + s.abs());
    vec![
        (
            "relu",
            Box::new(|t: &mut Tape<f64>, v: &[Var]| {
                let y = t.relu(v[0]);
                weighted(t, y)
            }) as Layer,
            x(),
        ),
        (
            "sigmoid",
            Box::new(|t: &mut Tape<f64>, v: &[Var]| {
                let y = t.sigmoid(v[0]);
                weighted(t, y)
            }),
            x(),
        ),
        (
            "tanh",
            Box::new(|t: &mut Tape<f64>, v: &[Var]| {
                let y = t.tanh(v[0]);
                weighted(t, y)
            }),
            x(),
        ),
        (
            "exp",
            Box::new(|t: &mut Tape<f64>, v: &[Var]| {
                let y = t.exp(v[0]);
                weighted(t, y)
            }),
            x(),
        ),
        (
            "scale",
            Box::new(|t: &mut Tape<f64>, v: &[Var]| {
                let y = t.scale(v[0], -2.5);
                weighted(t, y)
            }),
            x(),
        ),
        (
            "reshape",
            Box::new(|t: &mut Tape<f64>, v: &[Var]| {
                let y = t.reshape(v[0], vec![4, 3])?;
                weighted(t, y)
            }),
            x(),
        ),
        ("mean", Box::new(|t: &mut Tape<f64>, v: &[Var]| Ok(t.mean(v[0]))), x()),
        (
            "add",
            Box::new(|t: &mut Tape<f64>, v: &[Var]| {
                let y = t.add(v[0], v[1])?;
                weighted(t, y)
            }),
            pair(),
        ),
        (
            "sub",
            Box::new(|t: &mut Tape<f64>, v: &[Var]| {
                let y = t.sub(v[0], v[1])?;
                weighted(t, y)
            }),
            pair(),
        ),
        (
            "mul",
            Box::new(|t: &mut Tape<f64>, v: &[Var]| {
                let y = t.mul(v[0], v[1])?;
                weighted(t, y)
            }),
            pair(),
        ),
        (
            "matmul",
            Box::new(|t: &mut Tape<f64>, v: &[Var]| {
                let y = t.matmul(v[0], v[1])?;
                weighted(t, y)
            }),
            vec![random(&[3, 4], 1), random(&[4, 2], 2)],
        ),
        (
            "add_row",
            Box::new(|t: &mut Tape<f64>, v: &[Var]| {
                let y = t.add_row(v[0], v[1])?;
                weighted(t, y)
            }),
            vec![random(&[3, 4], 1), random(&[4], 2)],
        ),
        (
            "linear",
            Box::new(|t: &mut Tape<f64>, v: &[Var]| {
                let y = t.linear(v[0], v[1], v[2])?;
                weighted(t, y)
            }),
            vec![random(&[3, 4], 1), random(&[4, 5], 2), random(&[5], 4)],
        ),
        (
            "conv2d",
            Box::new(|t: &mut Tape<f64>, v: &[Var]| {
                let y = t.conv2d(v[0], v[1], v[2], 2, 1)?;
                weighted(t, y)
            }),
            vec![random(&[2, 2, 6, 6], 1), random(&[3, 2, 3, 3], 2), random(&[3], 3)],
        ),
        (
            "spatial_softmax",
            Box::new(|t: &mut Tape<f64>, v: &[Var]| {
                let y = t.spatial_softmax(v[0], 0.5)?;
                weighted(t, y)
            }),
            vec![random(&[2, 3, 4, 5], 1)],
        ),
        (
            "mse",
            Box::new(|t: &mut Tape<f64>, v: &[Var]| t.mse(v[0], v[1])),
            vec![random(&[3, 4], 1), random(&[3, 4], 2)],
        ),
        (
            "squared_error_sum",
            Box::new(|t: &mut Tape<f64>, v: &[Var]| t.squared_error_sum(v[0], v[1])),
            vec![random(&[3, 4], 1), random(&[3, 4], 2)],
        ),
        (
            "gaussian_kl",
            Box::new(|t: &mut Tape<f64>, v: &[Var]| t.gaussian_kl(v[0], v[1])),
            vec![random(&[3, 4], 4), sigma],
        ),
    ]
}

fn frames(n: usize) -> Vec<Image> {
    let spec = TaskSpec::default();
    (0..n).map(|i| render_position([0.15 + 0.3 * i as f64, 0.7 - 0.2 * i as f64], &spec)).collect()
}

fn small_spec(method: Method) -> EncoderSpec {
    EncoderSpec {
        latent_dim: 8,
        hidden: vec![16, 8],
        sae_conv_channels: 4,
        sae_channels: 3,
        sae_decoder_hidden: 12,
        seed: 5,
        ..EncoderSpec::new(method)
    }
}

fn f64_params(spec: &EncoderSpec) -> Vec<Tensor<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed + 100);
    let mut params: Vec<Tensor<f64>> = Model::init(spec).unwrap().params().iter().map(|p| p.cast()).collect();
    for p in &mut params {
        p.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.1..0.1));
    }
    params
}

fn criterion_1() -> Outcome {
    let t = Instant::now();
    let mut worst: (f64, &str) = (0.0, "");
    let mut failures = Vec::new();
    for (name, f, params) in layer_cases() {
        let err = finite_diff_check(|tape, v| f(tape, v), &params, 1e-3).map_err(|e| format!("{name}: {e}"))?;
        if err >= 1e-4 {
            failures.push(format!("{name} {err:.2e}"));
        }
        if err > worst.0 {
            worst = (err, name);
        }
    }
    let imgs = frames(2);
    let refs: Vec<&Image> = imgs.iter().collect();
    let mut methods = Vec::new();
    for method in [Method::Ae, Method::Vae, Method::Bvae, Method::Sae] {
        let spec = match method {
            Method::Bvae => EncoderSpec { alpha: Some(0.05), ..small_spec(method) },
            _ => small_spec(method),
        };
        let noise: Tensor<f64> = sample_noise(&mut ChaCha8Rng::seed_from_u64(3), refs.len(), 8);
        let variational = matches!(method, Method::Vae | Method::Bvae);
        let beta = spec.beta().map_err(|e| e.to_string())?;
        let err = finite_diff_check_with(
            |tape, v| batch_loss(tape, &spec, v, &refs, variational.then_some(&noise), beta),
            &f64_params(&spec),
            1e-3,
            ProbeSelection { max_per_param: Some(32), seed: 2 },
        )
        .map_err(|e| format!("{method}: {e}"))?;
        let bound = if variational { 1e-3 } else { 1e-4 };
        if err >= bound {
            failures.push(format!("{method} {err:.2e}"));
        }
        methods.push(format!("{method} {err:.1e}"));
    }
    let secs = t.elapsed().as_secs_f64();
    check(
        failures.is_empty() && secs < 60.0,
        format!(
            "worst layer {} {:.1e}; losses [{}]; {secs:.1}s{}",
            worst.1,
            worst.0,
            methods.join(", "),
            if failures.is_empty() { String::new() } else { format!("; over bound: {}", failures.join(", ")) }
        ),
    )
}

// ---- criterion 2: closed forms ----

fn criterion_2() -> Outcome {
    let mut errs = Vec::new();
    let kl = |m: &[f64], s: &[f64]| gaussian_kl(m, s).unwrap();
    errs.push(kl(&[0.0; 4], &[1.0; 4]).abs());
    errs.push((kl(&[1.0], &[1.0]) - 0.5).abs());
    errs.push((kl(&[0.0], &[2.0]) - 0.5 * (4.0 - 4f64.ln() - 1.0)).abs());

    let flat = Tensor::<f64>::full(&[2, 5, 7], 0.3);
    errs.extend(spatial_softmax(&flat, 1.0).unwrap().iter().map(|v| v.abs()));
    let mut spike = Tensor::<f64>::zeros(&[1, 6, 6]);
    spike.data_mut()[0] = 1.0;
    let xy = spatial_softmax(&spike, 1e-3).unwrap();
    errs.push((xy[0] + 1.0).abs());
    errs.push((xy[1] + 1.0).abs());
    let mut corner = Tensor::<f64>::full(&[1, 4, 4], -1e3);
    corner.data_mut()[15] = 0.0;
    let xy = spatial_softmax(&corner, 1.0).unwrap();
    errs.push((xy[0] - 1.0).abs());
    errs.push((xy[1] - 1.0).abs());

    let worst = errs.iter().copied().fold(0.0, f64::max);
    check(worst < 1e-6, format!("max error {worst:.1e} over {} values", errs.len()))
}

// ---- criterion 3: unit beta ----

fn loss_and_grads(spec: &EncoderSpec, params: &[Tensor<f64>], imgs: &[&Image], noise: &Tensor<f64>) -> (f64, Vec<f64>) {
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = batch_loss(&mut tape, spec, &vars, imgs, Some(noise), spec.beta().unwrap()).unwrap();
    let grads = tape.backward(loss).unwrap();
    (tape.value(loss).item().unwrap(), vars.iter().flat_map(|&v| grads.get(v).to_f64_vec()).collect())
}

fn criterion_3() -> Outcome {
    let vae = small_spec(Method::Vae);
    let alpha = vae.latent_size() as f64 / vae.input_dim() as f64;
    let beta = compute_beta(alpha, vae.input_dim(), vae.latent_size()).map_err(|e| e.to_string())?;
    let bvae = EncoderSpec { method: Method::Bvae, alpha: Some(alpha), ..vae.clone() };
    let params = f64_params(&vae);
    let imgs = frames(3);
    let refs: Vec<&Image> = imgs.iter().collect();
    let noise: Tensor<f64> = sample_noise(&mut ChaCha8Rng::seed_from_u64(8), 3, 8);
    let (lv, gv) = loss_and_grads(&vae, &params, &refs, &noise);
    let (lb, gb) = loss_and_grads(&bvae, &params, &refs, &noise);
    let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(1e-12);
    let worst = gv.iter().zip(&gb).map(|(&a, &b)| rel(a, b)).fold(rel(lv, lb), f64::max);
    check(
        (beta - 1.0).abs() < 1e-12 && worst < 1e-6,
        format!("beta {beta}, max relative difference {worst:.1e} over loss and {} gradients", gv.len()),
    )
}

// ---- criterion 4: synthetic factor oracle ----

fn criterion_4() -> Outcome {
    let mut failures = Vec::new();
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dim = rng.random_range(6..=40);
        let steps = rng.random_range(10..=40);
        let mut ramps: Vec<usize> = sample(&mut rng, dim, 2).into_vec();
        ramps.sort_unstable();
        let amps: [f64; 2] = [rng.random_range(0.5..1.5), rng.random_range(0.5..1.5)];
        // ramp std over time is amp/√12; noise is 100 times smaller
        let noise = Normal::new(0.0, amps[0].min(amps[1]) / 12f64.sqrt() / 100.0).unwrap();
        let n_maps = rng.random_range(1..=3);
        let maps: Vec<TaskMap> = (0..n_maps)
            .map(|_| TaskMap {
                rows: (0..steps)
                    .map(|t| {
                        let s = t as f64 / (steps - 1) as f64;
                        (0..dim)
                            .map(|k| match ramps.iter().position(|&r| r == k) {
                                Some(j) => amps[j] * s,
                                None => noise.sample(&mut rng),
                            })
                            .collect()
                    })
                    .collect(),
                sigma: None,
                demo: String::new(),
                model: String::new(),
            })
            .collect();
        let fs = extract_time_varying(&maps, 0.2).map_err(|e| e.to_string())?;
        if fs.indices != ramps {
            failures.push(format!("seed {seed}: {:?} vs {ramps:?}", fs.indices));
        }
    }
    check(failures.is_empty(), format!("{} failures over 100 instances {}", failures.len(), failures.join("; ")))
}

// ---- criterion 9: Broyden and oracle servo ----

fn criterion_9() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut j = JacobianEstimate::new(DMatrix::zeros(3, 2), 1e-3);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let dq: Vec<f64> = (0..2).map(|_| rng.random_range(-0.05..0.05)).collect();
        let dz: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
        j = broyden_update(&j, &dq, &dz);
        let resid = (0..3)
            .map(|r| {
                let pred: f64 = (0..2).map(|c| j.matrix[(r, c)] * dq[c]).sum();
                (pred - dz[r]).powi(2)
            })
            .sum::<f64>()
            .sqrt();
        worst = worst.max(resid);
    }

    let spec = TaskSpec::default();
    let rep = OracleRepresentation::default();
    let fs = FactorSet::all(2);
    let sensor = Sensor::new(&rep, &fs);
    let goal = Goal::at_target(&sensor, &spec, 0.02, 10.0).map_err(|e| e.to_string())?;
    let cfg = UvsConfig::default();
    let mut failures = Vec::new();
    let mut slack = usize::MAX;
    for _ in 0..20 {
        let start = sample_start(&spec, &mut rng);
        let d = (start[0] - spec.target[0]).hypot(start[1] - spec.target[1]);
        let bound = (d / (cfg.gain * spec.a_max)).ceil() as usize + 5;
        let mut env = ServoEnv::new(spec.clone(), start).map_err(|e| e.to_string())?;
        let ep = control_loop(&mut UvsController::new(cfg.clone()), &mut env, &sensor, &goal, cfg.max_steps)
            .map_err(|e| e.to_string())?;
        if !ep.success || ep.steps > bound {
            failures.push(format!("{start:?}: {} steps, bound {bound}", ep.steps));
        } else {
            slack = slack.min(bound - ep.steps);
        }
    }
    check(
        worst < 1e-9 && failures.is_empty(),
        format!(
            "max secant residual {worst:.1e}; oracle UVS {}/20 within bound (min slack {slack}) {}",
            20 - failures.len(),
            failures.join("; ")
        ),
    )
}

// ---- pipeline-backed criteria ----

fn config_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/toy.toml")
}

fn run_pipeline(out: &Path) -> Result<(), String> {
    let status = Command::new(env!("CARGO_BIN_EXE_latentservo"))
        .args(["pipeline", "--config"])
        .arg(config_path())
        .arg("--out")
        .arg(out)
        .env("RUST_LOG", std::env::var("RUST_LOG").unwrap_or_else(|_| "warn".into()))
        .status()
        .map_err(|e| e.to_string())?;
    if status.success() {
        Ok(())
    } else {
        Err(format!("pipeline exited with {status}"))
    }
}

struct RunDir(PathBuf);

impl RunDir {
    fn json(&self, rel: &str) -> Result<Value, String> {
        let bytes = fs::read(self.0.join(rel)).map_err(|e| format!("{rel}: {e}"))?;
        serde_json::from_slice(&bytes).map_err(|e| format!("{rel}: {e}"))
    }

    fn by_key(&self, rel: &str, key: &str) -> Result<BTreeMap<String, Value>, String> {
        let v = self.json(rel)?;
        let items = v.as_array().ok_or_else(|| format!("{rel} is not a list"))?;
        Ok(items.iter().map(|e| (e[key].as_str().unwrap_or("").to_string(), e.clone())).collect())
    }
}

fn f(v: &Value) -> f64 {
    v.as_f64().unwrap_or(f64::NAN)
}

fn criterion_5(run: &RunDir) -> Outcome {
    let factors = run.json("factors/factors.json")?;
    let bvae = factors["methods"]
        .as_array()
        .and_then(|m| m.iter().find(|e| e["method"] == "bvae"))
        .ok_or("no bvae factors")?;
    let count = bvae["factors"]["indices"].as_array().map_or(0, |a| a.len());
    let dof = factors["dof_compare"]
        .as_array()
        .and_then(|d| d.iter().find(|e| e["method"] == "bvae"))
        .ok_or("no dof comparison")?;
    let (two, one) = (dof["dof2_count"].as_u64().unwrap_or(0), dof["dof1_count"].as_u64().unwrap_or(u64::MAX));
    check(
        (2..=6).contains(&count) && two >= one,
        format!("bvae factors {count} {}; 2-DOF {two} vs 1-DOF {one}", bvae["factors"]["indices"]),
    )
}

fn criterion_6(run: &RunDir) -> Outcome {
    let m = run.by_key("fieldmap/metrics.json", "subject")?;
    let sae = &m.get("sae").ok_or("no sae field map")?["all"];
    let bvae = &m.get("bvae").ok_or("no bvae field map")?["all"];
    let (mx, my) = (f(&sae["monotonicity"][0]), f(&sae["monotonicity"][1]));
    let (si, bi) = (f(&sae["injectivity"]), f(&bvae["injectivity"]));
    check(
        mx.abs() > 0.9 && my.abs() > 0.9 && si < 0.05 && bi >= si,
        format!(
            "sae |rho| ({mx:.4}, {my:.4}) collisions {si:.4}; bvae |rho| ({:.4}, {:.4}) collisions {bi:.4}",
            f(&bvae["monotonicity"][0]),
            f(&bvae["monotonicity"][1])
        ),
    )
}

fn criterion_7(run: &RunDir) -> Outcome {
    let table = run.json("evaluate/table.json")?;
    let rows: BTreeMap<String, &Value> = table["rows"]
        .as_array()
        .ok_or("no rows")?
        .iter()
        .map(|r| (r["subject"].as_str().unwrap_or("").to_string(), r))
        .collect();
    let rate = |s: &str, c: &str| rows.get(s).map_or(f64::NAN, |r| f(&r[format!("{c}_rate")]));
    let ordering = table["ordering"].as_array().is_some_and(|o| o.len() == 2 && o.iter().all(|c| c["holds"] == true));
    let (su, sr) = (rate("sae", "uvs"), rate("sae", "reinforce"));
    let (bu, br) = (rate("bvae", "uvs"), rate("bvae", "reinforce"));
    let (ou, or) = (rate("oracle", "uvs"), rate("oracle", "reinforce"));
    check(
        su >= 0.8 && sr >= 0.8 && su >= bu && sr >= br && ordering && ou == 1.0 && or == 1.0,
        format!("uvs sae {su} bvae {bu} oracle {ou}; reinforce sae {sr:.3} bvae {br:.3} oracle {or:.3}"),
    )
}

fn criterion_8(run: &RunDir) -> Outcome {
    let sae = run.json("reinforce/sae.json")?;
    let runs = sae["runs"].as_array().ok_or("no runs")?;
    let deltas: Vec<String> = runs
        .iter()
        .map(|r| {
            format!("seed {}: {:.3} -> {:.3}", r["seed"], f(&r["first_decile_reward"]), f(&r["last_decile_reward"]))
        })
        .collect();
    let ok = runs.len() == 3 && runs.iter().all(|r| f(&r["last_decile_reward"]) - f(&r["first_decile_reward"]) > 0.0);
    check(ok, deltas.join("; "))
}

fn criterion_10(run: &RunDir) -> Outcome {
    let e = run.by_key("embodiment/embodiment.json", "subject")?;
    let mut bad = Vec::new();
    let mut worst_shuffled: f64 = f64::NEG_INFINITY;
    for (subject, entry) in &e {
        let id = &entry["identical"];
        if f(&id["jaccard"]) != 1.0
            || (f(&id["mean_correlation"]) - 1.0).abs() > 1e-9
            || f(&id["final_distance"]) != 0.0
        {
            bad.push(format!("{subject} identical {id}"));
        }
        let sh = f(&entry["shuffled"]["mean_correlation"]);
        worst_shuffled = worst_shuffled.max(sh);
        if sh.is_nan() || sh >= 0.3 {
            bad.push(format!("{subject} shuffled {sh}"));
        }
    }
    let report = fs::read_to_string(run.0.join("report.md")).map_err(|e| e.to_string())?;
    for m in ["ae", "vae", "bvae", "sae"] {
        if !e.contains_key(m) || !report.contains(&format!("| {m} | teacher to executor |")) {
            bad.push(format!("{m} transfer missing from the report"));
        }
    }
    check(
        bad.is_empty(),
        format!(
            "{} subjects; identical sprite exact; max shuffled correlation {worst_shuffled:.3} {}",
            e.len(),
            bad.join("; ")
        ),
    )
}

fn artifacts(root: &Path) -> Vec<PathBuf> {
    fn walk(dir: &Path, root: &Path, out: &mut Vec<PathBuf>) {
        for entry in fs::read_dir(dir).into_iter().flatten().flatten() {
            let p = entry.path();
            if p.is_dir() {
                walk(&p, root, out);
            } else if matches!(p.extension().and_then(|e| e.to_str()), Some("csv" | "json")) {
                let rel = p.strip_prefix(root).unwrap().to_path_buf();
                // the run manifest records wall-clock time
                if rel != Path::new("manifest.json") {
                    out.push(rel);
                }
            }
        }
    }
    let mut out = Vec::new();
    walk(root, root, &mut out);
    out.sort();
    out
}

fn criterion_11(a: &RunDir, b: &RunDir) -> Outcome {
    let (fa, fb) = (artifacts(&a.0), artifacts(&b.0));
    if fa != fb {
        return Err(format!("artifact lists differ: {} vs {} files", fa.len(), fb.len()));
    }
    let differing: Vec<String> = fa
        .iter()
        .filter(|rel| fs::read(a.0.join(rel)).ok() != fs::read(b.0.join(rel)).ok())
        .map(|rel| rel.display().to_string())
        .collect();
    check(
        differing.is_empty() && !fa.is_empty(),
        format!(
            "{} CSV/JSON files compared, {} differ {}",
            fa.len(),
            differing.len(),
            differing.iter().take(5).cloned().collect::<Vec<_>>().join(", ")
        ),
    )
}

fn main() {
    let tmp = tempfile::tempdir().expect("temp dir");
    let mut results: Vec<(u32, Outcome)> = Vec::new();
    let report = |n: u32, o: &Outcome| match o {
        Ok(d) => println!("criterion {n:>2}: PASS  {d}"),
        Err(d) => println!("criterion {n:>2}: FAIL  {d}"),
    };
    for (n, f) in
        [(1, criterion_1 as fn() -> Outcome), (2, criterion_2), (3, criterion_3), (4, criterion_4), (9, criterion_9)]
    {
        let o = f();
        report(n, &o);
        results.push((n, o));
    }

    let first = RunDir(tmp.path().join("first"));
    let second = RunDir(tmp.path().join("second"));
    let t = Instant::now();
    let pipeline = run_pipeline(&first.0);
    println!("pipeline run 1: {:.0}s", t.elapsed().as_secs_f64());
    let staged: [(u32, Staged); 5] =
        [(5, criterion_5), (6, criterion_6), (7, criterion_7), (8, criterion_8), (10, criterion_10)];
    for (n, f) in staged {
        let o = match &pipeline {
            Ok(()) => f(&first),
            Err(e) => Err(e.clone()),
        };
        report(n, &o);
        results.push((n, o));
    }
    let t = Instant::now();
    let o = pipeline.and_then(|_| run_pipeline(&second.0)).and_then(|_| criterion_11(&first, &second));
    println!("pipeline run 2: {:.0}s", t.elapsed().as_secs_f64());
    report(11, &o);
    results.push((11, o));

    results.sort_by_key(|r| r.0);
    let failed: Vec<u32> = results.iter().filter(|r| r.1.is_err()).map(|r| r.0).collect();
    println!("\nacceptance: {}/{} criteria passed", results.len() - failed.len(), results.len());
    if !failed.is_empty() {
        println!("failed: {failed:?}");
        std::process::exit(1);
    }
}
