//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line per
//! criterion and exits non-zero if any fails.
//!
//! Reference values come from oracles written here (plain loops over the
//! virtual global data, Gauss-Jordan elimination, closed-form calibration),
//! not from the library's own evaluators, except where the criterion is the
//! agreement between two library paths.

use std::collections::BTreeMap;
use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use fedtensor_core::ast::{is_client_local, Context, Expr, Primitive, TensorType};
use fedtensor_core::eval::{deviation, eval_centralized, eval_distributed, Environment, Value};
use fedtensor_core::factorize::{extract_plan, run_iterative, EncodedState, Merge, Params, SharedStatePlan};
use fedtensor_core::fedsim::{deserialize_state, serialize_state, simulate_round, Loopback};
use fedtensor_core::federated::{Federation, FederatedValue};
use fedtensor_core::format::load_program;
use fedtensor_core::gen::{forbidden_program, random_one_round, random_tensor, ExprGen, Family, GenConfig};
use fedtensor_core::learning::{build_gaussian_linear, build_logistic, build_optimizer_program, OptimizerKind, OptimizerSpec, RepresentableLoss};
use fedtensor_core::privacy::{apply_mechanism, calibrate_gaussian_sigma, MechanismKind, MechanismSpec, Placement};
use fedtensor_core::programs;
use fedtensor_core::signature::AggSchema;
use fedtensor_core::tensor::{Shape, TensorValue};
use fedtensor_core::typecheck::{typecheck, typecheck_traced};
use fedtensor_core::Registry;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn rng(seed: u64) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(seed)
}

/// Federated `x` of the given type with independent uniform record counts.
fn random_input(r: &mut ChaCha20Rng, nonrecord: &[usize], max_clients: usize, max_records: usize) -> FederatedValue {
    let m = r.random_range(1..=max_clients);
    let locals = (0..m)
        .map(|_| {
            let n = r.random_range(0..=max_records);
            let mut dims = vec![n];
            dims.extend_from_slice(nonrecord);
            random_tensor(r, &Shape::new(dims))
        })
        .collect();
    FederatedValue::new(Federation::numbered(m).unwrap(), 1, Shape::new(nonrecord.to_vec()), locals).unwrap()
}

fn global_rows(x: &FederatedValue) -> Vec<Vec<f64>> {
    let g = x.virtual_global();
    let width = x.nonrecord_shape().numel();
    g.data().chunks(width.max(1)).take(x.total_records()).map(|c| c.to_vec()).collect()
}

// ---------------------------------------------------------------------------

/// Random arguments for an extension signature, bound to `a0, a1, …`.
fn extension_arguments(r: &mut ChaCha20Rng, sig: &[TensorType]) -> (Environment, Vec<Expr>) {
    let m = r.random_range(1..=4);
    let fed = Federation::numbered(m).unwrap();
    let counts: Vec<usize> = (0..m).map(|_| r.random_range(0..=5)).collect();
    let mut env = Environment::new();
    let mut args = Vec::new();
    for (i, ty) in sig.iter().enumerate() {
        let name = format!("a{i}");
        match ty {
            TensorType::Sh(s) => env.bind_shared(&name, random_tensor(r, s)),
            TensorType::Fed(t) => {
                let locals = counts
                    .iter()
                    .map(|&n| random_tensor(r, &t.nonrecord.insert_axis(t.record_axis, n).unwrap()))
                    .collect();
                let x = FederatedValue::new(fed.clone(), t.record_axis, t.nonrecord.clone(), locals).unwrap();
                env.bind_federated(&name, x).unwrap();
            }
        }
        args.push(Expr::var(name));
    }
    (env, args)
}

fn contains_reassociated_sum(e: &Expr) -> bool {
    let mut found = false;
    e.visit(&mut |_, n| {
        if let Expr::Apply { prim, .. } = n {
            found |= matches!(
                prim,
                Primitive::Agg {
                    schema: AggSchema::Sum,
                    ..
                } | Primitive::MatMulFedFed
            );
        }
    });
    found
}

fn consistency_case(env: &Environment, e: &Expr, reg: &Registry, exact: bool) -> Result<f64, String> {
    let d = eval_distributed(env, e, reg).map_err(|err| format!("{e}: {err}"))?;
    let c = eval_centralized(env, e, reg).map_err(|err| format!("{e}: {err}"))?;
    let dev = deviation(&d.to_global(), &c.value);
    let ok = if exact { dev.is_exact() } else { dev.within(1e-12) };
    ensure!(ok, "{e}: relative deviation {:e} (exact required: {exact})", dev.relative);
    Ok(dev.relative)
}

fn criterion_1() -> Outcome {
    const TRIALS: usize = 200;
    let reg = Registry::default();
    let mut r = rng(1);
    let cfg = GenConfig {
        max_clients: 4,
        max_records: 5,
        max_dim: 4,
        ..GenConfig::default()
    };
    let mut worst: f64 = 0.0;
    let mut exact_checks = 0;
    for &family in Family::ALL {
        for _ in 0..TRIALS {
            let g = ExprGen::new(&mut r, cfg.clone()).generate_application(family);
            let exact = !contains_reassociated_sum(&g.expr);
            exact_checks += exact as usize;
            worst = worst.max(consistency_case(&g.env, &g.expr, &reg, exact).map_err(|m| format!("{}: {m}", family.name()))?);
        }
    }
    let mut extensions = 0;
    let mut singular = 0;
    for prim in reg.iter() {
        extensions += 1;
        for _ in 0..TRIALS {
            let sig = prim.samples()[r.random_range(0..prim.samples().len())].clone();
            let (env, args) = extension_arguments(&mut r, &sig);
            let e = Expr::ext(prim.name(), args);
            match consistency_case(&env, &e, &reg, true) {
                Ok(_) => {}
                Err(m) if m.contains("singular") => singular += 1,
                Err(m) => return Err(format!("{}: {m}", prim.name())),
            }
        }
    }
    ensure!(extensions >= 1, "no extensions registered");
    Ok(format!(
        "{} families + {extensions} extensions x {TRIALS}; {exact_checks} exact; {singular} singular solves skipped; worst relative {worst:.1e}",
        Family::ALL.len()
    ))
}

// ---------------------------------------------------------------------------

fn criterion_2() -> Outcome {
    let reg = Registry::default();
    let mut r = rng(2);
    let cfg = GenConfig {
        client_local_only: true,
        ..GenConfig::default()
    };
    let mut trials = 0;
    let mut checked_clients = 0;
    while trials < 100 {
        let g = ExprGen::new(&mut r, cfg.clone()).generate();
        let report = is_client_local(&g.ctx, &g.expr, &reg).map_err(|e| format!("{}: {e}", g.expr))?;
        ensure!(report.is_client_local(), "{} is not client-local", g.expr);
        let before = match eval_distributed(&g.env, &g.expr, &reg).map_err(|e| e.to_string())? {
            Value::Federated(v) => v,
            Value::Shared(_) => return Err(format!("{}: shared result", g.expr)),
        };
        trials += 1;
        let m = before.federation().len();
        let target = r.random_range(0..m);
        let mut env = Environment::new();
        for (name, v) in g.env.iter() {
            let v = match v {
                Value::Federated(x) => {
                    let fresh = random_tensor(&mut r, x.local(target).shape());
                    Value::Federated(x.with_local(target, fresh).unwrap())
                }
                shared => shared.clone(),
            };
            env.bind(name.clone(), v).unwrap();
        }
        let Value::Federated(after) = eval_distributed(&env, &g.expr, &reg).map_err(|e| e.to_string())? else {
            return Err("perturbed run changed the result kind".into());
        };
        for c in (0..m).filter(|&c| c != target) {
            let (a, b) = (after.local(c), before.local(c));
            let same = a.shape() == b.shape()
                && a.data().iter().zip(b.data()).all(|(u, v)| u.to_bits() == v.to_bits());
            ensure!(same, "{}: client {c} changed after perturbing client {target}", g.expr);
            checked_clients += 1;
        }
    }
    Ok(format!("{trials} expressions; {checked_clients} untouched clients bit-identical"))
}

// ---------------------------------------------------------------------------

fn criterion_3() -> Outcome {
    let reg = Registry::default();
    let mut r = rng(3);
    let cfg = GenConfig::default();
    let mut exposures = 0;
    for _ in 0..1000 {
        let g = ExprGen::new(&mut r, cfg.clone()).generate();
        let trace = typecheck_traced(&g.ctx, &g.expr, &reg).map_err(|e| format!("{}: {e}", g.expr))?;
        let types: BTreeMap<Vec<usize>, TensorType> = trace.nodes.iter().map(|n| (n.path.clone(), n.ty.clone())).collect();
        for (path, ty) in &types {
            let Some(Expr::Apply { prim, args }) = g.expr.at(path) else {
                continue;
            };
            let arg_types: Vec<&TensorType> = (0..args.len())
                .map(|i| {
                    let mut p = path.clone();
                    p.push(i);
                    &types[&p]
                })
                .collect();
            if !ty.is_shared() || !arg_types.iter().any(|t| t.is_federated()) {
                continue;
            }
            exposures += 1;
            let allowed = match prim {
                Primitive::Agg { axis, .. } => arg_types[0].as_fed().is_some_and(|f| f.record_axis == *axis),
                Primitive::MatMulFedFed => true,
                _ => false,
            };
            ensure!(allowed, "{}: shared value from federated input at {path:?} ({})", g.expr, prim.name());
        }
    }
    let mut rejected = 0;
    for _ in 0..500 {
        let f = forbidden_program(&mut r);
        match typecheck(&f.ctx, &f.expr, &reg) {
            Ok(t) => return Err(format!("{} ({}) typechecked to {t}", f.expr, f.description)),
            Err(e) => ensure!(e.kind == f.expected, "{}: got {}, expected {}", f.expr, e.kind, f.expected),
        }
        rejected += 1;
    }
    Ok(format!("1000 scans, {exposures} exposure nodes all allowed; {rejected}/500 forbidden rejected"))
}

// ---------------------------------------------------------------------------

fn corpus_oracle(name: &str, p: usize, rows: &[Vec<f64>]) -> TensorValue {
    let n = rows.len();
    let col = |j: usize| rows.iter().map(move |r| r[j]);
    let total = |j: usize| col(j).sum::<f64>();
    match name {
        "sum" => TensorValue::scalar(total(0)),
        "count" => TensorValue::scalar(n as f64),
        "mean" => TensorValue::scalar(total(0) / n as f64),
        "variance" => {
            let mu = total(0) / n as f64;
            TensorValue::scalar(col(0).map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64)
        }
        "min" => TensorValue::scalar(col(0).fold(f64::INFINITY, f64::min)),
        "max" => TensorValue::scalar(col(0).fold(f64::NEG_INFINITY, f64::max)),
        "gram" => TensorValue::from_fn(Shape::from([p, p]), |i| rows.iter().map(|r| r[i[0]] * r[i[1]]).sum()),
        "cross" => TensorValue::from_fn(Shape::from([p, 1]), |i| rows.iter().map(|r| r[i[0]] * r[p]).sum()),
        other => panic!("no oracle for {other}"),
    }
}

fn check_plan_three_ways(
    plan: &SharedStatePlan,
    program: &fedtensor_core::OneRoundProgram,
    x: &FederatedValue,
    reg: &Registry,
    exact: bool,
) -> Result<TensorValue, String> {
    let out = plan.run(x, &Params::new()).map_err(|e| e.to_string())?;
    let assembled = program.assemble(reg);
    let mut env = Environment::new();
    env.bind_federated(program.input.clone(), x.clone()).unwrap();
    let direct = eval_distributed(&env, &assembled, reg).map_err(|e| e.to_string())?.to_global();
    let central = eval_centralized(&env, &assembled, reg).map_err(|e| e.to_string())?.value;
    for (label, reference) in [("direct", &direct), ("centralized", &central)] {
        let dev = deviation(&out, reference);
        let ok = if exact { dev.is_exact() } else { dev.within(1e-10) };
        ensure!(ok, "{assembled}: plan vs {label}: {:e}", dev.relative);
    }
    Ok(out)
}

fn criterion_4() -> Outcome {
    let reg = Registry::default();
    let mut r = rng(4);
    let p = 3;
    let mut worst: f64 = 0.0;
    for (name, program) in programs::corpus(p) {
        let plan = extract_plan(&program, &reg).map_err(|e| format!("{name}: {e}"))?;
        let exact = matches!(name, "min" | "max");
        let width = match name {
            "gram" => vec![p],
            "cross" => vec![p + 1],
            _ => vec![],
        };
        for _ in 0..25 {
            let x = random_input(&mut r, &width, 4, 5);
            let out = check_plan_three_ways(&plan, &program, &x, &reg, exact).map_err(|m| format!("{name}: {m}"))?;
            let rows: Vec<Vec<f64>> = if width.is_empty() {
                x.virtual_global().data().iter().map(|&v| vec![v]).collect()
            } else {
                global_rows(&x)
            };
            let oracle = corpus_oracle(name, p, &rows);
            let dev = deviation(&out, &oracle);
            let ok = if exact { dev.is_exact() } else { dev.within(1e-10) };
            ensure!(ok, "{name}: plan vs oracle {:e}", dev.relative);
            worst = worst.max(dev.relative);
        }
    }
    let cfg = GenConfig::default();
    for i in 0..200 {
        let rp = random_one_round(&mut r, &cfg);
        let plan = extract_plan(&rp.program, &reg).map_err(|e| format!("random {i}: {e}"))?;
        let exact = !contains_reassociated_sum(&rp.program.assemble(&reg));
        check_plan_three_ways(&plan, &rp.program, &rp.input, &reg, exact).map_err(|m| format!("random {i}: {m}"))?;
    }
    Ok(format!("8 corpus programs x 25 inputs (worst vs oracle {worst:.1e}) + 200 random programs"))
}

// ---------------------------------------------------------------------------

fn criterion_5() -> Outcome {
    let reg = Registry::default();
    let mut r = rng(5);
    let p = 3;
    let mut summary = Vec::new();
    for (name, program) in programs::corpus(p) {
        let plan = extract_plan(&program, &reg).map_err(|e| format!("{name}: {e}"))?;
        let width = match name {
            "gram" => vec![p],
            "cross" => vec![p + 1],
            _ => vec![],
        };
        let expected = serialize_state(&plan.identity_state()).len();
        for &n_c in &[1usize, 10, 100, 1000] {
            for &m in &[1usize, 5, 50] {
                let locals = (0..m)
                    .map(|_| {
                        let mut dims = vec![n_c];
                        dims.extend_from_slice(&width);
                        random_tensor(&mut r, &Shape::new(dims))
                    })
                    .collect();
                let x = FederatedValue::new(Federation::numbered(m).unwrap(), 1, Shape::new(width.clone()), locals).unwrap();
                let (_, ledger) = simulate_round(&plan, &x, Loopback::default()).map_err(|e| e.to_string())?;
                ensure!(ledger.messages.len() == m, "{name}: {} messages for {m} clients", ledger.messages.len());
                ensure!(
                    ledger.message_sizes() == vec![expected],
                    "{name}: n_c={n_c} |C|={m}: sizes {:?}, expected {expected}",
                    ledger.message_sizes()
                );
                ensure!(ledger.merged.iter().all(|g| g.bytes == expected), "{name}: merged size changed");
            }
        }
        summary.push(format!("{name}={expected}B"));
    }
    Ok(format!("12 (n_c, |C|) settings per plan; {}", summary.join(" ")))
}

// ---------------------------------------------------------------------------

fn learning_instance(r: &mut ChaCha20Rng, p: usize, logistic: bool) -> FederatedValue {
    let m = r.random_range(1..=3);
    let locals = (0..m)
        .map(|_| {
            let n = r.random_range(1..=5);
            TensorValue::from_fn(Shape::from([n, p + 1]), |i| {
                if i[1] < p {
                    r.random_range(-2.0..=2.0)
                } else if logistic {
                    r.random_bool(0.5) as u8 as f64
                } else {
                    r.random_range(-3.0..=3.0)
                }
            })
        })
        .collect();
    FederatedValue::new(Federation::numbered(m).unwrap(), 1, Shape::from([p + 1]), locals).unwrap()
}

fn plan_gradient(loss: &RepresentableLoss, x: &FederatedValue, theta: &TensorValue, reg: &Registry) -> Result<TensorValue, String> {
    let program = loss.gradient_program().map_err(|e| e.to_string())?;
    let plan = extract_plan(&program, reg).map_err(|e| e.to_string())?;
    let params: Params = [(loss.theta.clone(), theta.clone())].into();
    plan.run(x, &params).map_err(|e| e.to_string())
}

fn central_difference(loss: &RepresentableLoss, x: &FederatedValue, theta: &TensorValue, h: f64, reg: &Registry) -> Vec<f64> {
    (0..theta.numel())
        .map(|j| {
            let at = |d: f64| {
                let mut v = theta.data().to_vec();
                v[j] += d;
                loss.total_loss(x, &TensorValue::new(theta.shape().clone(), v).unwrap(), reg).unwrap()
            };
            (at(h) - at(-h)) / (2.0 * h)
        })
        .collect()
}

fn inf_norm_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(u, v)| (u - v).abs()).fold(0.0, f64::max)
}

fn criterion_6() -> Outcome {
    let reg = Registry::default();
    let mut r = rng(6);
    let mut worst: f64 = 0.0;
    for logistic in [true, false] {
        for _ in 0..100 {
            let p = r.random_range(1..=4);
            let loss = if logistic {
                build_logistic(p)
            } else {
                build_gaussian_linear(p, r.random_range(0.5..=2.0))
            }
            .map_err(|e| e.to_string())?;
            let x = learning_instance(&mut r, p, logistic);
            let theta = TensorValue::from_fn(Shape::from([p]), |_| r.random_range(-1.0..=1.0));
            let g = plan_gradient(&loss, &x, &theta, &reg)?;
            let fd = central_difference(&loss, &x, &theta, 1e-6, &reg);
            let scale = fd.iter().fold(1.0f64, |m, v| m.max(v.abs()));
            let rel = inf_norm_diff(g.data(), &fd) / scale;
            ensure!(rel <= 1e-5, "{}: relative error {rel:e} (p={p})", loss.name);
            worst = worst.max(rel);
        }
    }
    // Truncation order, on the logistic loss (the Gaussian loss is quadratic,
    // so central differences carry no truncation error there).
    let mut ratios = Vec::new();
    for _ in 0..20 {
        let p = r.random_range(1..=4);
        let loss = build_logistic(p).map_err(|e| e.to_string())?;
        let x = learning_instance(&mut r, p, true);
        let theta = TensorValue::from_fn(Shape::from([p]), |_| r.random_range(-1.0..=1.0));
        let g = plan_gradient(&loss, &x, &theta, &reg)?;
        let e1 = inf_norm_diff(g.data(), &central_difference(&loss, &x, &theta, 1e-2, &reg));
        let e2 = inf_norm_diff(g.data(), &central_difference(&loss, &x, &theta, 5e-3, &reg));
        let ratio = e1 / e2;
        ensure!((2.0..=8.0).contains(&ratio), "halving h changed the error by {ratio:.3} (errors {e1:e}, {e2:e})");
        ratios.push(ratio);
    }
    let lo = ratios.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = ratios.iter().cloned().fold(0.0, f64::max);
    Ok(format!("200 instances, worst relative {worst:.1e}; halving ratios in [{lo:.2}, {hi:.2}]"))
}

// ---------------------------------------------------------------------------

/// Solves `a x = b` by Gauss-Jordan elimination with full pivoting.
fn gauss_jordan(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    let mut cols: Vec<usize> = (0..n).collect();
    for k in 0..n {
        let (mut pr, mut pc, mut best) = (k, k, 0.0);
        for i in k..n {
            for j in k..n {
                if a[i][j].abs() > best {
                    best = a[i][j].abs();
                    pr = i;
                    pc = j;
                }
            }
        }
        a.swap(k, pr);
        b.swap(k, pr);
        for row in a.iter_mut() {
            row.swap(k, pc);
        }
        cols.swap(k, pc);
        let piv = a[k][k];
        for j in 0..n {
            a[k][j] /= piv;
        }
        b[k] /= piv;
        for i in 0..n {
            if i != k {
                let f = a[i][k];
                for j in 0..n {
                    a[i][j] -= f * a[k][j];
                }
                b[i] -= f * b[k];
            }
        }
    }
    let mut x = vec![0.0; n];
    for k in 0..n {
        x[cols[k]] = b[k];
    }
    x
}

fn newton_step(loss: &RepresentableLoss, x: &FederatedValue, theta0: &TensorValue, reg: &Registry) -> Result<TensorValue, String> {
    let opt = OptimizerSpec::new(OptimizerKind::DampedNewton, 1.0).with_lambda(0.0);
    let prog = build_optimizer_program(loss, &opt, 1, theta0, reg).map_err(|e| e.to_string())?;
    Ok(run_iterative(&prog.program, x, reg).map_err(|e| e.to_string())?.theta)
}

fn criterion_7() -> Outcome {
    let reg = Registry::default();
    let mut r = rng(7);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let p = 3;
        let sigma2 = r.random_range(0.5..=2.0);
        let loss = build_gaussian_linear(p, sigma2).map_err(|e| e.to_string())?;
        let locals = (0..3).map(|_| random_tensor(&mut r, &Shape::from([4, p + 1]))).collect();
        let x = FederatedValue::new(Federation::numbered(3).unwrap(), 1, Shape::from([p + 1]), locals).unwrap();
        let theta0 = TensorValue::from_fn(Shape::from([p]), |_| r.random_range(-1.0..=1.0));
        let theta = newton_step(&loss, &x, &theta0, &reg)?;
        let rows = global_rows(&x);
        let xtx = (0..p).map(|i| (0..p).map(|j| rows.iter().map(|a| a[i] * a[j]).sum()).collect()).collect();
        let xty = (0..p).map(|i| rows.iter().map(|a| a[i] * a[p]).sum()).collect();
        let ols = gauss_jordan(xtx, xty);
        let d = inf_norm_diff(theta.data(), &ols);
        ensure!(d <= 1e-8, "Newton step off the least-squares solution by {d:e}");
        worst = worst.max(d);
    }
    let loss = build_gaussian_linear(2, 1.0).map_err(|e| e.to_string())?;
    let x = FederatedValue::new(
        Federation::numbered(2).unwrap(),
        1,
        Shape::from([3]),
        vec![
            TensorValue::matrix(&[vec![1.0, 0.0, 2.0]]).unwrap(),
            TensorValue::matrix(&[vec![0.0, 1.0, 3.0]]).unwrap(),
        ],
    )
    .unwrap();
    let anchor = newton_step(&loss, &x, &TensorValue::zeros(Shape::from([2])), &reg)?;
    ensure!(anchor.data() == [2.0, 3.0], "identity design gave {:?}", anchor.data());
    Ok(format!("20 instances, worst l_inf {worst:.1e}; identity design -> (2, 3) exactly"))
}

// ---------------------------------------------------------------------------

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn logistic_gradient(rows: &[Vec<f64>], theta: &[f64]) -> Vec<f64> {
    let p = theta.len();
    let mut g = vec![0.0; p];
    for a in rows {
        let z: f64 = (0..p).map(|j| a[j] * theta[j]).sum();
        let res = sigmoid(z) - a[p];
        for j in 0..p {
            g[j] += res * a[j];
        }
    }
    g
}

fn criterion_8() -> Outcome {
    let reg = Registry::default();
    let mut r = rng(8);
    let p = 3;
    let rounds = 50;
    let loss = build_logistic(p).map_err(|e| e.to_string())?;
    let m = 4;
    let locals = (0..m)
        .map(|_| {
            let n = r.random_range(1..=8);
            TensorValue::from_fn(Shape::from([n, p + 1]), |i| {
                if i[1] < p {
                    r.random_range(-2.0..=2.0)
                } else {
                    r.random_bool(0.5) as u8 as f64
                }
            })
        })
        .collect();
    let x = FederatedValue::new(Federation::numbered(m).unwrap(), 1, Shape::from([p + 1]), locals).unwrap();
    let rows = global_rows(&x);
    let theta0 = TensorValue::zeros(Shape::from([p]));
    let mut notes = Vec::new();
    for (kind, eta) in [(OptimizerKind::Gd, 0.05), (OptimizerKind::Adam, 0.05)] {
        let opt = OptimizerSpec::new(kind, eta);
        let prog = build_optimizer_program(&loss, &opt, rounds, &theta0, &reg).map_err(|e| e.to_string())?;
        let run = run_iterative(&prog.program, &x, &reg).map_err(|e| e.to_string())?;
        let (b1, b2, eps) = (opt.beta1, opt.beta2, opt.eps);
        let mut theta = vec![0.0; p];
        let mut mom = vec![0.0; p];
        let mut vel = vec![0.0; p];
        let mut worst: f64 = 0.0;
        for t in 0..rounds {
            let g = logistic_gradient(&rows, &theta);
            match kind {
                OptimizerKind::Gd => {
                    for j in 0..p {
                        theta[j] -= eta * g[j];
                    }
                }
                _ => {
                    let k = (t + 1) as i32;
                    for j in 0..p {
                        mom[j] = b1 * mom[j] + (1.0 - b1) * g[j];
                        vel[j] = b2 * vel[j] + (1.0 - b2) * g[j] * g[j];
                        let mh = mom[j] / (1.0 - b1.powi(k));
                        let vh = vel[j] / (1.0 - b2.powi(k));
                        theta[j] -= eta * mh / (vh.sqrt() + eps);
                    }
                }
            }
            let fed = prog.theta_of(&run.trace[t].theta_out);
            let d = inf_norm_diff(fed.data(), &theta);
            ensure!(d <= 1e-9, "{}: round {t}: deviation {d:e}", kind.name());
            worst = worst.max(d);
        }
        notes.push(format!("{} worst {worst:.1e}", kind.name()));
    }
    Ok(format!("{rounds} rounds, {} records; {}", rows.len(), notes.join(", ")))
}

// ---------------------------------------------------------------------------

fn criterion_9() -> Outcome {
    let mut r = rng(9);
    let mut trials = 0;
    for merge in [Merge::Sum, Merge::Min, Merge::Max, Merge::MatrixAdd] {
        for _ in 0..1000 {
            let shape = if merge == Merge::MatrixAdd {
                Shape::from([r.random_range(1..=4), r.random_range(1..=4)])
            } else {
                Shape::new((0..r.random_range(0..=2)).map(|_| r.random_range(1..=4)).collect::<Vec<_>>())
            };
            let draw = |r: &mut ChaCha20Rng| {
                TensorValue::from_fn(shape.clone(), |_| match r.random_range(0..20) {
                    0 if !merge.is_additive() => f64::INFINITY,
                    1 if !merge.is_additive() => f64::NEG_INFINITY,
                    _ => r.random_range(-1e3..=1e3),
                })
            };
            let (a, b, c) = (draw(&mut r), draw(&mut r), draw(&mut r));
            let op = |u: &TensorValue, v: &TensorValue| merge.combine(u, v).unwrap();
            let check = |u: &TensorValue, v: &TensorValue, law: &str| -> Result<(), String> {
                let dev = deviation(u, v);
                let ok = if merge.is_additive() { dev.within(1e-12) } else { dev.is_exact() };
                ensure!(ok, "{}: {law} off by {:e}", merge.name(), dev.relative);
                Ok(())
            };
            check(&op(&op(&a, &b), &c), &op(&a, &op(&b, &c)), "associativity")?;
            check(&op(&a, &b), &op(&b, &a), "commutativity")?;
            let e = merge.identity(&shape);
            ensure!(deviation(&op(&e, &a), &a).is_exact(), "{}: left identity", merge.name());
            ensure!(deviation(&op(&a, &e), &a).is_exact(), "{}: right identity", merge.name());
            trials += 1;
        }
    }
    Ok(format!("{trials} triples over sum, min, max, matrix-add"))
}

// ---------------------------------------------------------------------------

fn scalar_input(r: &mut ChaCha20Rng) -> FederatedValue {
    let m = r.random_range(2..=5);
    let locals = (0..m)
        .map(|_| {
            let n = r.random_range(1..=5);
            random_tensor(r, &Shape::from([n]))
        })
        .collect();
    FederatedValue::new(Federation::numbered(m).unwrap(), 1, Shape::scalar(), locals).unwrap()
}

fn criterion_10() -> Outcome {
    let reg = Registry::default();
    let mut r = rng(10);
    let placements = [Placement::PerClientMessage, Placement::MergedState, Placement::DecodedOutput];
    let kinds = [MechanismKind::GaussianCentral, MechanismKind::LaplaceCentral, MechanismKind::GaussianLocal];

    // Zero scale is the identity on every valid kind/placement pair.
    let mut zero_checks = 0;
    for (name, program) in programs::corpus(2) {
        let plan = extract_plan(&program, &reg).map_err(|e| e.to_string())?;
        let width = match name {
            "gram" => vec![2],
            "cross" => vec![3],
            _ => vec![],
        };
        let x = random_input(&mut r, &width, 4, 5);
        let exact = plan.run(&x, &Params::new()).map_err(|e| e.to_string())?;
        for kind in kinds {
            for placement in placements {
                let spec = MechanismSpec::new(kind, placement, 0.0, 99);
                let Ok(pp) = apply_mechanism(&plan, &spec) else {
                    continue;
                };
                let out = pp.run(&x, &Params::new()).map_err(|e| e.to_string())?.output;
                ensure!(out.bit_eq(&exact), "{name}: zero-scale {kind} at {placement} changed the output");
                zero_checks += 1;
            }
        }
    }

    // Gaussian calibration from the closed form, then the empirical spread.
    let (epsilon, delta, sensitivity) = (1.0, 1e-5, 1.0);
    let sigma = sensitivity * (2.0 * (1.25f64 / delta).ln()).sqrt() / epsilon;
    let calibrated = calibrate_gaussian_sigma(epsilon, delta, sensitivity).map_err(|e| e.to_string())?;
    ensure!((calibrated - sigma).abs() <= 1e-12 * sigma, "calibration {calibrated} vs closed form {sigma}");

    let plan = extract_plan(&programs::sum(), &reg).map_err(|e| e.to_string())?;
    let x = scalar_input(&mut r);
    let exact = plan.run(&x, &Params::new()).map_err(|e| e.to_string())?.as_scalar().unwrap();
    const DRAWS: u64 = 100_000;
    let mut pp = apply_mechanism(&plan, &MechanismSpec::new(MechanismKind::GaussianCentral, Placement::MergedState, sigma, 0))
        .map_err(|e| e.to_string())?;
    let merged = plan.merge_all(&plan.encode_all(&x, &Params::new()).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    let mut noise = Vec::with_capacity(DRAWS as usize);
    for seed in 0..DRAWS {
        pp.set_seed(seed);
        let out = plan.decode(&pp.perturb_merged(&merged, 0), &Params::new()).map_err(|e| e.to_string())?;
        noise.push(out.as_scalar().unwrap() - exact);
    }
    let mean = noise.iter().sum::<f64>() / DRAWS as f64;
    let sd = (noise.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (DRAWS - 1) as f64).sqrt();
    ensure!((sd / sigma - 1.0).abs() <= 0.05, "Gaussian std {sd} vs sigma {sigma}");

    // Laplace with b = sensitivity / epsilon, on the decoded output.
    let b = 1.0 / 0.5;
    let mut pp = apply_mechanism(&plan, &MechanismSpec::new(MechanismKind::LaplaceCentral, Placement::DecodedOutput, b, 0))
        .map_err(|e| e.to_string())?;
    let (mut mad, mut centre) = (0.0, 0.0);
    for seed in 0..DRAWS {
        pp.set_seed(seed);
        let out = pp.run(&x, &Params::new()).map_err(|e| e.to_string())?.output;
        let d = out.as_scalar().unwrap() - exact;
        mad += d.abs();
        centre += d;
    }
    mad /= DRAWS as f64;
    centre /= DRAWS as f64;
    ensure!((mad / b - 1.0).abs() <= 0.05, "Laplace mean absolute deviation {mad} vs b {b}");
    ensure!(centre.abs() <= 0.01 * b, "Laplace mean {centre} vs b {b}");

    // Seeded determinism, for every placement.
    let mean_plan = extract_plan(&programs::mean(), &reg).map_err(|e| e.to_string())?;
    for (kind, placement) in [
        (MechanismKind::GaussianLocal, Placement::PerClientMessage),
        (MechanismKind::GaussianCentral, Placement::MergedState),
        (MechanismKind::LaplaceCentral, Placement::DecodedOutput),
    ] {
        let pp = apply_mechanism(&mean_plan, &MechanismSpec::new(kind, placement, 0.7, 1234)).map_err(|e| e.to_string())?;
        let a = pp.run(&x, &Params::new()).map_err(|e| e.to_string())?;
        let b = pp.run(&x, &Params::new()).map_err(|e| e.to_string())?;
        ensure!(a.output.bit_eq(&b.output) && a.merged.bit_eq(&b.merged), "{kind} at {placement} is not reproducible");
    }

    // Post-processing: decoding the privatized state outside the wrapper
    // gives the wrapper's output.
    let pp = apply_mechanism(&mean_plan, &MechanismSpec::new(MechanismKind::GaussianCentral, Placement::MergedState, 0.7, 77))
        .map_err(|e| e.to_string())?;
    let private = pp.run(&x, &Params::new()).map_err(|e| e.to_string())?;
    let clean = mean_plan.merge_all(&mean_plan.encode_all(&x, &Params::new()).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    let noised = pp.perturb_merged(&clean, 0);
    ensure!(noised.bit_eq(&private.merged), "privatized state differs from an independent perturbation");
    let decoded = mean_plan.decode(&noised, &Params::new()).map_err(|e| e.to_string())?;
    ensure!(decoded.bit_eq(&private.output), "post-processing path differs");

    Ok(format!(
        "{zero_checks} zero-scale identities; sigma {sigma:.4} std {sd:.4}; b {b} MAD {mad:.4} mean {centre:.4}; deterministic; post-processing exact"
    ))
}

// ---------------------------------------------------------------------------

fn bits_equal(a: &EncodedState, b: &EncodedState) -> bool {
    a.0.len() == b.0.len()
        && a.0.iter().zip(&b.0).all(|(s, t)| {
            s.shape() == t.shape() && s.data().iter().zip(t.data()).all(|(u, v)| u.to_bits() == v.to_bits())
        })
}

fn criterion_11() -> Outcome {
    let mut r = rng(11);
    let mut with_inf = 0;
    for i in 0..1000 {
        let q = r.random_range(1..=4);
        let mut has_inf = false;
        let parts = (0..q)
            .map(|_| {
                let shape = Shape::new((0..r.random_range(0..=3)).map(|_| r.random_range(0..=4)).collect::<Vec<_>>());
                TensorValue::from_fn(shape, |_| match r.random_range(0..12) {
                    0 => {
                        has_inf = true;
                        f64::INFINITY
                    }
                    1 => {
                        has_inf = true;
                        f64::NEG_INFINITY
                    }
                    2 => -0.0,
                    3 => f64::from_bits(r.random::<u64>()),
                    _ => r.random_range(-1e6..=1e6),
                })
            })
            .collect();
        with_inf += has_inf as usize;
        let s = EncodedState(parts);
        let bytes = serialize_state(&s);
        let back = deserialize_state(&bytes).map_err(|e| format!("case {i}: {e}"))?;
        ensure!(bits_equal(&s, &back), "case {i}: round trip changed the state");
    }
    let scalar = serialize_state(&EncodedState(vec![TensorValue::scalar(1.5)]));
    ensure!(scalar.len() == 20, "scalar state is {} bytes", scalar.len());
    let reg = Registry::default();
    let id = extract_plan(&programs::minimum(), &reg).map_err(|e| e.to_string())?.identity_state();
    let bytes = serialize_state(&id);
    ensure!(bytes.len() == 20, "min identity state is {} bytes", bytes.len());
    ensure!(
        deserialize_state(&bytes).map(|b| bits_equal(&b, &id)).unwrap_or(false),
        "+inf identity did not round-trip"
    );
    Ok(format!("1000 round trips ({with_inf} with infinities); scalar state 20 bytes"))
}

// ---------------------------------------------------------------------------

fn criterion_12() -> Outcome {
    let reg = Registry::default();
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../corpus/negative");
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).map_err(|e| e.to_string())?)
            .map_err(|e| e.to_string())?;
    let entries = manifest.as_array().ok_or("manifest is not an array")?;
    let mut kinds = BTreeMap::new();
    for e in entries {
        let file = e["file"].as_str().ok_or("entry without file")?;
        let text = fs::read_to_string(dir.join(file)).map_err(|err| format!("{file}: {err}"))?;
        let err = match load_program(&text, &reg) {
            Ok(_) => return Err(format!("{file} was accepted")),
            Err(err) => err,
        };
        let want_cat = e["category"].as_str().unwrap_or_default();
        let want_kind = e["kind"].as_str();
        ensure!(err.category() == want_cat && err.kind() == want_kind, "{file}: got {} {:?} ({err})", err.category(), err.kind());
        *kinds.entry(want_kind.unwrap_or_default().to_string()).or_insert(0) += 1;
    }
    ensure!(entries.len() >= 15, "only {} negative programs", entries.len());
    for required in [
        "record-axis-violation",
        "fedfed-form",
        "decoder-not-shared-only",
        "not-client-local",
        "wrong-form",
    ] {
        ensure!(kinds.contains_key(required), "no negative program of kind {required}");
    }
    // Expression-level sanity check independent of the file format.
    let ctx = Context::new().with("x", TensorType::fed(1, [2])).with("z", TensorType::fed(1, [2]));
    ensure!(
        typecheck(&ctx, &Expr::matmul_fed_fed(Expr::var("x"), Expr::var("z")), &reg).is_err(),
        "record-major federated product typechecked"
    );
    Ok(format!("{} programs rejected across {} kinds", entries.len(), kinds.len()))
}

// ---------------------------------------------------------------------------

fn main() {
    let criteria: [(&str, fn() -> Outcome); 12] = [
        ("virtual-global consistency", criterion_1),
        ("client-locality", criterion_2),
        ("exposure discipline", criterion_3),
        ("one-round factorization", criterion_4),
        ("state-size independence", criterion_5),
        ("gradient expressibility", criterion_6),
        ("Newton exactness", criterion_7),
        ("trajectory agreement", criterion_8),
        ("monoid laws", criterion_9),
        ("privacy lifting", criterion_10),
        ("serialization", criterion_11),
        ("negative corpus", criterion_12),
    ];
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {:>2} {name}: PASS ({detail}) [{secs:.1}s]", i + 1),
            Err(why) => {
                failed += 1;
                println!("criterion {:>2} {name}: FAIL ({why}) [{secs:.1}s]", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
