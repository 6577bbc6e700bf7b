//! Randomized property suites, runnable at any trial count. The `selfcheck`
//! command runs them at reduced counts; the test suite runs them in full.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::Serialize;

use crate::ast::{exposure_points, is_client_local, Context, Expr, Primitive, TensorType};
use crate::eval::{check_consistency, deviation, eval_centralized, eval_distributed, Environment, Value};
use crate::extensions::{audit, Registry};
use crate::factorize::{extract_plan, run_plan, EncodedState, Merge};
use crate::fedsim::{deserialize_state, serialize_state};
use crate::federated::Federation;
use crate::gen::{forbidden_program, random_federated, random_one_round, random_tensor, ExprGen, Family, GenConfig};
use crate::signature::AggSchema;
use crate::tensor::Shape;
use crate::typecheck::{typecheck, NodeRole};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SuiteReport {
    pub name: String,
    pub trials: usize,
    pub failures: Vec<String>,
}

impl SuiteReport {
    fn new(name: &str) -> Self {
        SuiteReport {
            name: name.to_string(),
            trials: 0,
            failures: Vec::new(),
        }
    }

    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }

    fn fail(&mut self, msg: String) {
        if self.failures.len() < 20 {
            self.failures.push(msg);
        }
    }
}

fn rng(seed: u64, suite: u64) -> ChaCha20Rng {
    let mut r = ChaCha20Rng::seed_from_u64(seed);
    r.set_stream(suite);
    r
}

/// Whether a distributed/centralized pair must agree bit-for-bit: everything
/// except record-axis sums and federated-federated products.
pub fn requires_exact(e: &Expr) -> bool {
    let mut exact = true;
    e.visit(&mut |_, node| {
        if let Expr::Apply { prim, .. } = node {
            match prim {
                Primitive::Agg {
                    schema: AggSchema::Sum, ..
                }
                | Primitive::MatMulFedFed => exact = false,
                _ => {}
            }
        }
    });
    exact
}

/// Distributed vs centralized results for single applications of every base
/// family and every registered extension.
pub fn consistency_suite(registry: &Registry, trials: usize, seed: u64, tol: f64) -> SuiteReport {
    let mut report = SuiteReport::new("consistency");
    let mut r = rng(seed, 1);
    let cfg = GenConfig::default();
    for &family in Family::ALL {
        for _ in 0..trials {
            let g = ExprGen::new(&mut r, cfg.clone()).generate_application(family);
            report.trials += 1;
            check_one(&mut report, family.name(), &g.env, &g.expr, registry, tol);
        }
    }
    for prim in registry.iter() {
        for _ in 0..trials {
            let sig = prim.samples()[r.random_range(0..prim.samples().len())].clone();
            let (env, args) = sample_arguments(&mut r, &sig, &cfg);
            let e = Expr::ext(prim.name(), args);
            report.trials += 1;
            check_one(&mut report, prim.name(), &env, &e, registry, tol);
        }
    }
    report
}

/// Random arguments for a signature, bound to `a0, a1, …`.
fn sample_arguments<R: Rng>(r: &mut R, sig: &[TensorType], cfg: &GenConfig) -> (Environment, Vec<Expr>) {
    let m = r.random_range(1..=cfg.max_clients);
    let fed = Federation::numbered(m).expect("m >= 1");
    let counts: Vec<usize> = (0..m).map(|_| r.random_range(0..=cfg.max_records)).collect();
    let mut env = Environment::new();
    let mut args = Vec::with_capacity(sig.len());
    for (i, ty) in sig.iter().enumerate() {
        let name = format!("a{i}");
        match ty {
            TensorType::Sh(s) => env.bind_shared(&name, random_tensor(r, s)),
            TensorType::Fed(t) => env
                .bind_federated(&name, random_federated(r, &fed, t, &counts))
                .expect("one federation"),
        }
        args.push(Expr::var(name));
    }
    (env, args)
}

/// True iff every node turning federated arguments into a shared value is a
/// record-axis aggregation or a federated-federated product.
pub fn exposure_roles_ok(ctx: &Context, e: &Expr, registry: &Registry) -> Result<bool, crate::typecheck::TypeError> {
    Ok(exposure_points(ctx, e, registry)?
        .iter()
        .all(|(_, role)| matches!(role, NodeRole::RecordAggregation | NodeRole::FedFedProduct)))
}

fn check_one(report: &mut SuiteReport, label: &str, env: &Environment, e: &Expr, registry: &Registry, tol: f64) {
    match check_consistency(env, e, registry, tol) {
        Err(err) => report.fail(format!("{label}: {e}: {err}")),
        Ok(c) => {
            let exact = requires_exact(e);
            let dev = deviation(&c.distributed, &c.centralized);
            let ok = if exact { dev.is_exact() } else { c.passed };
            if !ok {
                report.fail(format!("{label}: {e}: relative deviation {:e}", c.relative));
            }
        }
    }
}

/// Perturbing one client's inputs leaves every other client's output of a
/// client-local expression unchanged.
pub fn locality_suite(registry: &Registry, trials: usize, seed: u64) -> SuiteReport {
    let mut report = SuiteReport::new("client-locality");
    let mut r = rng(seed, 2);
    let cfg = GenConfig {
        client_local_only: true,
        extensions: true,
        ..GenConfig::default()
    };
    while report.trials < trials {
        let g = ExprGen::new(&mut r, cfg.clone()).generate();
        match is_client_local(&g.ctx, &g.expr, registry) {
            Ok(l) if l.is_client_local() => {}
            Ok(_) => {
                report.fail(format!("generated expression is not client-local: {}", g.expr));
                report.trials += 1;
                continue;
            }
            Err(e) => {
                report.fail(format!("generated expression is ill-typed: {e}"));
                report.trials += 1;
                continue;
            }
        }
        report.trials += 1;
        let before = match eval_distributed(&g.env, &g.expr, registry) {
            Ok(Value::Federated(v)) => v,
            Ok(_) => {
                report.fail(format!("{}: shared result", g.expr));
                continue;
            }
            Err(e) => {
                report.fail(format!("{}: {e}", g.expr));
                continue;
            }
        };
        let m = before.federation().len();
        let target = r.random_range(0..m);
        let mut env = Environment::new();
        for (name, v) in g.env.iter() {
            let v = match v {
                Value::Federated(x) => {
                    let fresh = random_tensor(&mut r, x.local(target).shape());
                    Value::Federated(x.with_local(target, fresh).expect("same shape"))
                }
                shared => shared.clone(),
            };
            env.bind(name.clone(), v).expect("same federation");
        }
        match eval_distributed(&env, &g.expr, registry) {
            Ok(Value::Federated(after)) => {
                for c in (0..m).filter(|&c| c != target) {
                    if !after.local(c).bit_eq(before.local(c)) {
                        report.fail(format!("{}: client {c} changed when client {target} was perturbed", g.expr));
                    }
                }
            }
            other => report.fail(format!("{}: perturbed run gave {other:?}", g.expr)),
        }
    }
    report
}

/// Shared results computed from federated arguments only at record-axis
/// aggregations and federated-federated products; forbidden programs fail to
/// typecheck with their documented error kind.
pub fn exposure_suite(registry: &Registry, trials: usize, forbidden: usize, seed: u64) -> SuiteReport {
    let mut report = SuiteReport::new("exposure");
    let mut r = rng(seed, 3);
    let cfg = GenConfig {
        extensions: true,
        ..GenConfig::default()
    };
    for _ in 0..trials {
        let g = ExprGen::new(&mut r, cfg.clone()).generate();
        report.trials += 1;
        match exposure_roles_ok(&g.ctx, &g.expr, registry) {
            Ok(true) => {}
            Ok(false) => report.fail(format!("{}: exposure at a disallowed node", g.expr)),
            Err(e) => report.fail(format!("{}: {e}", g.expr)),
        }
    }
    for _ in 0..forbidden {
        let f = forbidden_program(&mut r);
        report.trials += 1;
        match typecheck(&f.ctx, &f.expr, registry) {
            Ok(ty) => report.fail(format!("{} ({}) typechecked to {ty}", f.expr, f.description)),
            Err(e) if e.kind != f.expected => {
                report.fail(format!("{} ({}): got {}, expected {}", f.expr, f.description, e.kind, f.expected))
            }
            Err(_) => {}
        }
    }
    report
}

/// Random one-round programs: plan output against direct distributed and
/// centralized evaluation of the assembled expression.
pub fn factorization_suite(registry: &Registry, trials: usize, seed: u64, tol: f64) -> SuiteReport {
    let mut report = SuiteReport::new("factorization");
    let mut r = rng(seed, 4);
    let cfg = GenConfig {
        extensions: true,
        max_clients: 5,
        max_records: 6,
        ..GenConfig::default()
    };
    for _ in 0..trials {
        let rp = random_one_round(&mut r, &cfg);
        report.trials += 1;
        let plan = match extract_plan(&rp.program, registry) {
            Ok(p) => p,
            Err(e) => {
                report.fail(format!("extraction failed: {e}"));
                continue;
            }
        };
        let assembled = rp.program.assemble(registry);
        let mut env = Environment::new();
        env.bind_federated(rp.program.input.clone(), rp.input.clone())
            .expect("fresh environment");
        let out = run_plan(&plan, &rp.input);
        let direct = eval_distributed(&env, &assembled, registry);
        let central = eval_centralized(&env, &assembled, registry);
        match (out, direct, central) {
            (Ok(out), Ok(Value::Shared(direct)), Ok(central)) => {
                let exact = requires_exact(&assembled);
                for (label, reference) in [("distributed", &direct), ("centralized", &central.value)] {
                    let dev = deviation(&out, reference);
                    let ok = if exact { dev.is_exact() } else { dev.within(tol) };
                    if !ok {
                        report.fail(format!("{assembled}: plan vs {label}: {:e}", dev.relative));
                    }
                }
            }
            (a, b, c) => report.fail(format!(
                "{assembled}: plan {:?}, distributed {:?}, centralized {:?}",
                a.err(),
                b.err(),
                c.err()
            )),
        }
    }
    report
}

/// Associativity, commutativity and identity of every merge.
pub fn monoid_suite(trials: usize, seed: u64, tol: f64) -> SuiteReport {
    let mut report = SuiteReport::new("monoid-laws");
    let mut r = rng(seed, 5);
    for merge in [Merge::Sum, Merge::Min, Merge::Max, Merge::MatrixAdd] {
        for _ in 0..trials {
            report.trials += 1;
            let rank = if merge == Merge::MatrixAdd { 2 } else { r.random_range(0..3) };
            let shape = Shape::new((0..rank).map(|_| r.random_range(1..5)).collect::<Vec<_>>());
            let [a, b, c] = [0, 1, 2].map(|_| random_tensor(&mut r, &shape));
            let op = |x: &crate::tensor::TensorValue, y: &crate::tensor::TensorValue| merge.combine(x, y).expect("same shape");
            let (ab_first, bc_first) = (op(&a, &b), op(&b, &c));
            let left = op(&ab_first, &c);
            let right = op(&a, &bc_first);
            let ab = op(&a, &b);
            let ba = op(&b, &a);
            let id = op(&a, &merge.identity(&shape));
            let tol = if merge.is_additive() { tol } else { 0.0 };
            if !deviation(&left, &right).within(tol) {
                report.fail(format!("{merge}: associativity"));
            }
            if !deviation(&ab, &ba).within(tol) {
                report.fail(format!("{merge}: commutativity"));
            }
            if !id.bit_eq(&a) {
                report.fail(format!("{merge}: identity"));
            }
        }
    }
    report
}

/// Binary state round trips, including infinite identities.
pub fn serialization_suite(trials: usize, seed: u64) -> SuiteReport {
    let mut report = SuiteReport::new("serialization");
    let mut r = rng(seed, 6);
    for _ in 0..trials {
        report.trials += 1;
        let q = r.random_range(1..5);
        let parts = (0..q)
            .map(|_| {
                let rank = r.random_range(0..4);
                let shape = Shape::new((0..rank).map(|_| r.random_range(0..4)).collect::<Vec<_>>());
                let mut t = random_tensor(&mut r, &shape).into_data();
                for v in t.iter_mut() {
                    match r.random_range(0..10) {
                        0 => *v = f64::INFINITY,
                        1 => *v = f64::NEG_INFINITY,
                        _ => {}
                    }
                }
                crate::tensor::TensorValue::new(shape, t).expect("sized")
            })
            .collect();
        let s = EncodedState(parts);
        match deserialize_state(&serialize_state(&s)) {
            Ok(back) if back.bit_eq(&s) => {}
            Ok(_) => report.fail("round trip changed the state".into()),
            Err(e) => report.fail(format!("round trip failed: {e}")),
        }
    }
    report
}

/// Audit of every registered extension.
pub fn extension_suite(registry: &Registry, trials: usize, seed: u64) -> SuiteReport {
    let mut report = SuiteReport::new("extension-audit");
    for name in registry.names() {
        let handle = registry.handle(name).expect("registered");
        let a = audit(registry, &handle, trials, seed);
        report.trials += a.trials;
        for f in a.failures {
            report.fail(format!("{name}: {f}"));
        }
    }
    report
}

/// Every suite at the given trial count.
pub fn run_all(registry: &Registry, trials: usize, seed: u64) -> Vec<SuiteReport> {
    vec![
        consistency_suite(registry, trials, seed, 1e-12),
        locality_suite(registry, trials, seed),
        exposure_suite(registry, trials * 5, trials, seed),
        factorization_suite(registry, trials, seed, 1e-10),
        monoid_suite(trials, seed, 1e-12),
        serialization_suite(trials, seed),
        extension_suite(registry, trials, seed),
    ]
}
