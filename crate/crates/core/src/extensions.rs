//! Registry of extension primitives. Every extension is either client-local
//! (federated arguments map to federated results, computed per client without
//! regard to which client it is) or shared-only (rejects federated arguments).
//! Registration checks the declared typing rule; [`audit`] tests the
//! implementation empirically.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::Serialize;
use thiserror::Error;

use crate::ast::{Context, Expr, FedType, TensorType};
use crate::eval::{check_consistency, eval_distributed, Environment, Value};
use crate::federated::Federation;
use crate::gen::{random_federated, random_tensor};
use crate::linalg;
use crate::signature::builtin_signature;
use crate::tensor::{Shape, TensorValue};
use crate::typecheck::{typecheck, TypeErrorKind};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExtKind {
    ClientLocal,
    SharedOnly,
}

impl fmt::Display for ExtKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ExtKind::ClientLocal => "client-local",
            ExtKind::SharedOnly => "shared-only",
        })
    }
}

/// Arguments handed to a per-client implementation. `client` is `None` when
/// the primitive is applied to shared arguments only.
pub struct LocalCall<'a> {
    pub client: Option<&'a str>,
    pub client_index: Option<usize>,
    pub args: &'a [TensorValue],
}

pub type TypeRule = Arc<dyn Fn(&[TensorType]) -> Result<TensorType, String> + Send + Sync>;
pub type LocalMap = Arc<dyn Fn(&LocalCall<'_>) -> Result<TensorValue, String> + Send + Sync>;
pub type OrdinaryMap = Arc<dyn Fn(&[TensorValue]) -> Result<TensorValue, String> + Send + Sync>;

#[derive(Clone)]
pub struct ExtPrimitive {
    name: String,
    kind: ExtKind,
    arity: usize,
    rule: TypeRule,
    local: LocalMap,
    ordinary: OrdinaryMap,
    samples: Vec<Vec<TensorType>>,
}

impl ExtPrimitive {
    /// A client-local primitive with separate per-client and ordinary maps.
    pub fn client_local(
        name: impl Into<String>,
        arity: usize,
        rule: impl Fn(&[TensorType]) -> Result<TensorType, String> + Send + Sync + 'static,
        local: impl Fn(&LocalCall<'_>) -> Result<TensorValue, String> + Send + Sync + 'static,
        ordinary: impl Fn(&[TensorValue]) -> Result<TensorValue, String> + Send + Sync + 'static,
    ) -> Self {
        ExtPrimitive {
            name: name.into(),
            kind: ExtKind::ClientLocal,
            arity,
            rule: Arc::new(rule),
            local: Arc::new(local),
            ordinary: Arc::new(ordinary),
            samples: Vec::new(),
        }
    }

    /// A client-local primitive whose per-client map is also its ordinary
    /// interpretation (row-wise maps, slicing along non-record axes, ...).
    pub fn client_local_uniform(
        name: impl Into<String>,
        arity: usize,
        rule: impl Fn(&[TensorType]) -> Result<TensorType, String> + Send + Sync + 'static,
        map: impl Fn(&[TensorValue]) -> Result<TensorValue, String> + Send + Sync + 'static,
    ) -> Self {
        let map: OrdinaryMap = Arc::new(map);
        let local = map.clone();
        ExtPrimitive {
            name: name.into(),
            kind: ExtKind::ClientLocal,
            arity,
            rule: Arc::new(rule),
            local: Arc::new(move |call: &LocalCall<'_>| local(call.args)),
            ordinary: map,
            samples: Vec::new(),
        }
    }

    pub fn shared_only(
        name: impl Into<String>,
        arity: usize,
        rule: impl Fn(&[TensorType]) -> Result<TensorType, String> + Send + Sync + 'static,
        map: impl Fn(&[TensorValue]) -> Result<TensorValue, String> + Send + Sync + 'static,
    ) -> Self {
        let map: OrdinaryMap = Arc::new(map);
        let local = map.clone();
        ExtPrimitive {
            name: name.into(),
            kind: ExtKind::SharedOnly,
            arity,
            rule: Arc::new(rule),
            local: Arc::new(move |call: &LocalCall<'_>| local(call.args)),
            ordinary: map,
            samples: Vec::new(),
        }
    }

    /// Argument signatures used to probe the typing rule at registration and
    /// to draw random applications in [`audit`].
    pub fn with_samples(mut self, samples: Vec<Vec<TensorType>>) -> Self {
        self.samples = samples;
        self
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn kind(&self) -> ExtKind {
        self.kind
    }

    pub fn arity(&self) -> usize {
        self.arity
    }

    pub fn samples(&self) -> &[Vec<TensorType>] {
        &self.samples
    }

    pub fn type_rule(&self, args: &[TensorType]) -> Result<TensorType, String> {
        (self.rule)(args)
    }

    pub fn apply_local(&self, call: &LocalCall<'_>) -> Result<TensorValue, String> {
        (self.local)(call)
    }

    pub fn apply_ordinary(&self, args: &[TensorValue]) -> Result<TensorValue, String> {
        (self.ordinary)(args)
    }
}

impl fmt::Debug for ExtPrimitive {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ExtPrimitive")
            .field("name", &self.name)
            .field("kind", &self.kind)
            .field("arity", &self.arity)
            .finish_non_exhaustive()
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RegistryError {
    #[error("primitive `{0}` is already registered")]
    Duplicate(String),
    #[error("`{0}` is not a valid extension name")]
    InvalidName(String),
    #[error("`{name}` declares no sample signatures its rule accepts; {reason}")]
    Unsatisfiable { name: String, reason: String },
    #[error("client-local `{name}` maps federated arguments {signature} to a shared result")]
    ExposureLeak { name: String, signature: String },
    #[error("shared-only `{name}` accepts federated arguments {signature}")]
    SharedOnlyFederated { name: String, signature: String },
    #[error("`{name}`: sample signature {signature} has the wrong arity")]
    SampleArity { name: String, signature: String },
}

/// A handle to a registered primitive.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ExtHandle {
    name: String,
}

impl ExtHandle {
    pub fn name(&self) -> &str {
        &self.name
    }
}

/// The extension registry. Cloning is cheap; registration copies on write.
#[derive(Clone, Debug)]
pub struct Registry {
    prims: Arc<BTreeMap<String, Arc<ExtPrimitive>>>,
}

impl Default for Registry {
    /// The registry with the built-in extension set.
    fn default() -> Self {
        let mut r = Registry::empty();
        for p in builtin_extensions() {
            r.register(p).expect("built-in extensions are well-formed");
        }
        r
    }
}

fn signature_text(sig: &[TensorType]) -> String {
    let parts: Vec<String> = sig.iter().map(ToString::to_string).collect();
    format!("({})", parts.join(", "))
}

impl Registry {
    /// No extensions: the base signature only.
    pub fn empty() -> Self {
        Registry {
            prims: Arc::new(BTreeMap::new()),
        }
    }

    pub fn register(&mut self, p: ExtPrimitive) -> Result<ExtHandle, RegistryError> {
        let name = p.name.clone();
        let well_formed = !name.is_empty()
            && name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_')
            && !name.starts_with(|c: char| c.is_ascii_digit());
        if !well_formed || builtin_signature().contains(&name) || name == "literal" {
            return Err(RegistryError::InvalidName(name));
        }
        if self.prims.contains_key(&name) {
            return Err(RegistryError::Duplicate(name));
        }
        let mut accepted = 0;
        for sig in &p.samples {
            if sig.len() != p.arity {
                return Err(RegistryError::SampleArity {
                    name,
                    signature: signature_text(sig),
                });
            }
            let any_fed = sig.iter().any(TensorType::is_federated);
            let Ok(out) = p.type_rule(sig) else { continue };
            match p.kind {
                ExtKind::ClientLocal if any_fed && out.is_shared() => {
                    return Err(RegistryError::ExposureLeak {
                        name,
                        signature: signature_text(sig),
                    })
                }
                ExtKind::SharedOnly if any_fed || out.is_federated() => {
                    return Err(RegistryError::SharedOnlyFederated {
                        name,
                        signature: signature_text(sig),
                    })
                }
                ExtKind::ClientLocal if any_fed => accepted += 1,
                ExtKind::SharedOnly => accepted += 1,
                ExtKind::ClientLocal => {}
            }
        }
        if accepted == 0 {
            let reason = match p.kind {
                ExtKind::ClientLocal => "a client-local primitive needs a federated sample",
                ExtKind::SharedOnly => "a shared-only primitive needs a shared sample",
            };
            return Err(RegistryError::Unsatisfiable {
                name,
                reason: reason.into(),
            });
        }
        Arc::make_mut(&mut self.prims).insert(name.clone(), Arc::new(p));
        Ok(ExtHandle { name })
    }

    pub fn get(&self, name: &str) -> Option<&ExtPrimitive> {
        self.prims.get(name).map(|p| &**p)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.prims.contains_key(name)
    }

    /// A handle for an already registered primitive.
    pub fn handle(&self, name: &str) -> Option<ExtHandle> {
        self.prims.get(name).map(|p| ExtHandle {
            name: p.name.clone(),
        })
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.prims.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = &ExtPrimitive> {
        self.prims.values().map(|p| &**p)
    }
}

/// Outcome of [`audit`].
#[derive(Clone, Debug, Serialize)]
pub struct AuditReport {
    pub name: String,
    pub kind: ExtKind,
    pub trials: usize,
    /// Trials whose arguments fell outside the implementation's domain.
    pub skipped: usize,
    pub failures: Vec<String>,
}

impl AuditReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

const AUDIT_TOL: f64 = 1e-10;

/// Randomized checks of a registered primitive. Client-local primitives are
/// tested for locality under perturbation of other clients, independence of
/// the client identity, agreement of the result with the typing rule, and
/// virtual-global consistency against the ordinary interpretation. Shared-only
/// primitives are tested for rejection of federated arguments, determinism and
/// agreement with the typing rule.
pub fn audit(registry: &Registry, handle: &ExtHandle, trials: usize, seed: u64) -> AuditReport {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let prim = registry
        .get(handle.name())
        .expect("handles come from this registry");
    let mut report = AuditReport {
        name: prim.name.clone(),
        kind: prim.kind,
        trials,
        skipped: 0,
        failures: Vec::new(),
    };
    let samples: Vec<&Vec<TensorType>> = prim
        .samples
        .iter()
        .filter(|s| prim.type_rule(s).is_ok())
        .collect();
    if samples.is_empty() {
        report.failures.push("no usable sample signatures".into());
        return report;
    }
    for trial in 0..trials {
        let sig = samples[trial % samples.len()];
        let outcome = match prim.kind {
            ExtKind::ClientLocal => audit_client_local(registry, prim, sig, &mut rng, trial),
            ExtKind::SharedOnly => audit_shared_only(registry, prim, sig, &mut rng),
        };
        match outcome {
            Ok(true) => {}
            Ok(false) => report.skipped += 1,
            Err(msg) => {
                report
                    .failures
                    .push(format!("trial {trial}, signature {}: {msg}", signature_text(sig)));
            }
        }
    }
    report
}

fn random_counts(rng: &mut ChaCha20Rng, m: usize) -> Vec<usize> {
    (0..m).map(|_| rng.random_range(0..=5)).collect()
}

fn audit_env(
    rng: &mut ChaCha20Rng,
    sig: &[TensorType],
    fed: &Federation,
    counts: &[usize],
) -> Result<(Environment, Vec<Expr>), String> {
    let mut env = Environment::new();
    let mut vars = Vec::new();
    for (i, ty) in sig.iter().enumerate() {
        let name = format!("a{i}");
        match ty {
            TensorType::Sh(s) => env.bind_shared(&name, random_tensor(rng, s)),
            TensorType::Fed(t) => env
                .bind_federated(&name, random_federated(rng, fed, t, counts))
                .map_err(|e| e.to_string())?,
        }
        vars.push(Expr::var(name));
    }
    Ok((env, vars))
}

fn audit_client_local(
    registry: &Registry,
    prim: &ExtPrimitive,
    sig: &[TensorType],
    rng: &mut ChaCha20Rng,
    trial: usize,
) -> Result<bool, String> {
    let m = rng.random_range(1..=4);
    let fed = Federation::numbered(m).map_err(|e| e.to_string())?;
    let counts = random_counts(rng, m);
    let (env, args) = audit_env(rng, sig, &fed, &counts)?;
    let e = Expr::ext(prim.name.clone(), args);
    let ty = typecheck(&env.context(), &e, registry).map_err(|e| e.to_string())?;
    let out = eval_distributed(&env, &e, registry).map_err(|e| e.to_string())?;
    if out.type_of() != ty {
        return Err(format!("result has type {} but the rule gives {ty}", out.type_of()));
    }
    let report = check_consistency(&env, &e, registry, AUDIT_TOL).map_err(|e| e.to_string())?;
    if !report.passed {
        return Err(format!(
            "distributed and ordinary interpretations differ by {:e}",
            report.relative
        ));
    }
    let Value::Federated(out) = out else {
        return Ok(true);
    };

    // Identity independence: the same local arguments under another client id.
    let local_args: Vec<TensorValue> = (0..sig.len())
        .map(|i| match env.get(&format!("a{i}")) {
            Some(Value::Shared(t)) => t.clone(),
            Some(Value::Federated(x)) => x.local(0).clone(),
            None => unreachable!("every argument is bound"),
        })
        .collect();
    let probe_id = format!("probe{trial}");
    let again = prim.apply_local(&LocalCall {
        client: Some(&probe_id),
        client_index: Some(m + trial),
        args: &local_args,
    })?;
    if !again.bit_eq(out.local(0)) {
        return Err("per-client map depends on the client identity".into());
    }

    // Locality: regenerate one client's data and compare everyone else.
    if m >= 2 {
        let k = rng.random_range(0..m);
        let mut perturbed = env.clone();
        let new_count = rng.random_range(0..=5);
        for (i, ty) in sig.iter().enumerate() {
            if let TensorType::Fed(t) = ty {
                let name = format!("a{i}");
                let Some(Value::Federated(x)) = env.get(&name) else { unreachable!() };
                let local_shape = t.nonrecord.insert_axis(t.record_axis, new_count).expect("valid axis");
                let fresh = random_tensor(rng, &local_shape);
                let x2 = x.with_local(k, fresh).map_err(|e| e.to_string())?;
                perturbed.bind_federated(&name, x2).map_err(|e| e.to_string())?;
            }
        }
        let out2 = eval_distributed(&perturbed, &e, registry).map_err(|e| e.to_string())?;
        let Value::Federated(out2) = out2 else {
            return Err("result kind changed under perturbation".into());
        };
        for c in (0..m).filter(|&c| c != k) {
            if !out.local(c).bit_eq(out2.local(c)) {
                return Err(format!(
                    "output at client {} changed when client {} was perturbed",
                    fed.clients()[c],
                    fed.clients()[k]
                ));
            }
        }
    }
    Ok(true)
}

fn audit_shared_only(
    registry: &Registry,
    prim: &ExtPrimitive,
    sig: &[TensorType],
    rng: &mut ChaCha20Rng,
) -> Result<bool, String> {
    // A federated variant of the signature must be rejected statically.
    let pos = rng.random_range(0..sig.len().max(1));
    if let Some(TensorType::Sh(s)) = sig.get(pos) {
        let mut fed_sig = sig.to_vec();
        fed_sig[pos] = TensorType::Fed(FedType::new(1, s.clone()));
        let ctx: Context = fed_sig
            .iter()
            .enumerate()
            .map(|(i, t)| (format!("a{i}"), t.clone()))
            .collect();
        let e = Expr::ext(
            prim.name.clone(),
            (0..sig.len()).map(|i| Expr::var(format!("a{i}"))).collect(),
        );
        match typecheck(&ctx, &e, registry) {
            Err(err) if err.kind == TypeErrorKind::ExtensionMisuse => {}
            Err(err) => return Err(format!("federated argument rejected with {}", err.kind)),
            Ok(t) => return Err(format!("federated argument accepted with type {t}")),
        }
    }
    let args: Vec<TensorValue> = sig
        .iter()
        .map(|t| match t {
            TensorType::Sh(s) => random_tensor(rng, s),
            TensorType::Fed(_) => unreachable!("shared-only samples are shared"),
        })
        .collect();
    let expected = prim.type_rule(sig)?;
    let Ok(first) = prim.apply_ordinary(&args) else {
        return Ok(false);
    };
    let second = prim.apply_ordinary(&args)?;
    if !first.bit_eq(&second) {
        return Err("implementation is not deterministic".into());
    }
    if TensorType::Sh(first.shape().clone()) != expected {
        return Err(format!("result shape {} but the rule gives {expected}", first.shape()));
    }
    Ok(true)
}

fn fed_arg(args: &[TensorType], i: usize) -> Result<&FedType, String> {
    args.get(i)
        .and_then(TensorType::as_fed)
        .ok_or_else(|| format!("argument {} must be federated", i + 1))
}

fn feature_width(args: &[TensorType]) -> Result<(bool, usize, Option<usize>), String> {
    match &args[0] {
        TensorType::Fed(t) if t.record_axis == 1 && t.nonrecord.rank() == 1 => {
            Ok((true, t.nonrecord.dims()[0], None))
        }
        TensorType::Sh(s) if s.rank() == 2 => Ok((false, s.dims()[1], Some(s.dims()[0]))),
        t => Err(format!("expected Fed_1((k)) or a shared matrix, got {t}")),
    }
}

fn width_of(t: &TensorValue) -> Result<usize, String> {
    match t.shape().dims() {
        [_, k] => Ok(*k),
        _ => Err(format!("expected a matrix, got shape {}", t.shape())),
    }
}

fn project_features() -> ExtPrimitive {
    ExtPrimitive::client_local_uniform(
        "project_features",
        1,
        |args| {
            let (fed, k, n) = feature_width(args)?;
            if k < 2 {
                return Err("needs at least one feature column and a response column".into());
            }
            Ok(if fed {
                TensorType::fed(1, [k - 1])
            } else {
                TensorType::sh([n.unwrap_or(1), k - 1])
            })
        },
        |args| {
            let k = width_of(&args[0])?;
            args[0].slice_axis(2, 0, k - 1).map_err(|e| e.to_string())
        },
    )
    .with_samples(vec![
        vec![TensorType::fed(1, [2])],
        vec![TensorType::fed(1, [3])],
        vec![TensorType::fed(1, [4])],
        vec![TensorType::sh([3, 3])],
    ])
}

fn project_response() -> ExtPrimitive {
    ExtPrimitive::client_local_uniform(
        "project_response",
        1,
        |args| {
            let (fed, k, n) = feature_width(args)?;
            if k < 2 {
                return Err("needs at least one feature column and a response column".into());
            }
            Ok(if fed {
                TensorType::fed(1, [])
            } else {
                TensorType::sh([n.unwrap_or(1)])
            })
        },
        |args| {
            let k = width_of(&args[0])?;
            let col = args[0].slice_axis(2, k - 1, 1).map_err(|e| e.to_string())?;
            let n = col.shape().dims()[0];
            col.reshape([n]).map_err(|e| e.to_string())
        },
    )
    .with_samples(vec![
        vec![TensorType::fed(1, [2])],
        vec![TensorType::fed(1, [4])],
        vec![TensorType::sh([2, 3])],
    ])
}

fn scale_rows() -> ExtPrimitive {
    ExtPrimitive::client_local_uniform(
        "scale_rows",
        2,
        |args| match (&args[0], &args[1]) {
            (TensorType::Fed(w), TensorType::Fed(x))
                if w.record_axis == 1 && w.nonrecord.rank() == 0 && x.record_axis == 1 =>
            {
                Ok(TensorType::Fed(x.clone()))
            }
            (TensorType::Sh(w), TensorType::Sh(x))
                if w.rank() == 1 && x.rank() >= 1 && w.dims()[0] == x.dims()[0] =>
            {
                Ok(TensorType::Sh(x.clone()))
            }
            (a, b) => Err(format!("expected (Fed_1(()), Fed_1(d)) or matching shared rows, got ({a}, {b})")),
        },
        |args| {
            let (w, x) = (&args[0], &args[1]);
            let n = w.numel();
            if w.rank() != 1 || x.rank() == 0 || x.shape().dims()[0] != n {
                return Err(format!(
                    "row weights of shape {} do not match rows of shape {}",
                    w.shape(),
                    x.shape()
                ));
            }
            let row = if n == 0 { 0 } else { x.numel() / n };
            let data = x
                .data()
                .iter()
                .enumerate()
                .map(|(i, &v)| w.data()[i / row] * v)
                .collect();
            TensorValue::new(x.shape().clone(), data).map_err(|e| e.to_string())
        },
    )
    .with_samples(vec![
        vec![TensorType::fed(1, []), TensorType::fed(1, [3])],
        vec![TensorType::fed(1, []), TensorType::fed(1, [])],
        vec![TensorType::fed(1, []), TensorType::fed(1, [2, 2])],
    ])
}

fn outer_rows() -> ExtPrimitive {
    ExtPrimitive::client_local_uniform(
        "outer_rows",
        1,
        |args| {
            let t = fed_arg(args, 0)?;
            match t.nonrecord.dims() {
                [p] if t.record_axis == 1 => Ok(TensorType::fed(1, [*p, *p])),
                _ => Err(format!("expected Fed_1((p)), got {t}")),
            }
        },
        |args| {
            let x = &args[0];
            let (n, p) = match x.shape().dims() {
                [n, p] => (*n, *p),
                _ => return Err(format!("expected a matrix, got shape {}", x.shape())),
            };
            let d = x.data();
            Ok(TensorValue::from_fn([n, p, p], |i| {
                d[i[0] * p + i[1]] * d[i[0] * p + i[2]]
            }))
        },
    )
    .with_samples(vec![
        vec![TensorType::fed(1, [1])],
        vec![TensorType::fed(1, [2])],
        vec![TensorType::fed(1, [3])],
    ])
}

fn transpose_records() -> ExtPrimitive {
    ExtPrimitive::client_local_uniform(
        "transpose_records",
        1,
        |args| {
            let t = fed_arg(args, 0)?;
            match t.nonrecord.dims() {
                [p] if t.record_axis == 1 => Ok(TensorType::fed(2, [*p])),
                _ => Err(format!("expected Fed_1((p)), got {t}")),
            }
        },
        |args| {
            let swap = crate::tensor::Permutation::swap(2, 1, 2).expect("valid");
            args[0].permute(&swap).map_err(|e| e.to_string())
        },
    )
    .with_samples(vec![vec![TensorType::fed(1, [2])], vec![TensorType::fed(1, [3])]])
}

fn shared_arg(args: &[TensorType], i: usize) -> Result<&Shape, String> {
    args.get(i)
        .and_then(TensorType::as_shared)
        .ok_or_else(|| format!("argument {} must be shared", i + 1))
}

fn as_column() -> ExtPrimitive {
    ExtPrimitive::shared_only(
        "as_column",
        1,
        |args| match shared_arg(args, 0)?.dims() {
            [p] => Ok(TensorType::sh([*p, 1])),
            _ => Err("expected a shared vector".into()),
        },
        |args| {
            let n = args[0].numel();
            args[0].reshape([n, 1]).map_err(|e| e.to_string())
        },
    )
    .with_samples(vec![vec![TensorType::sh([1])], vec![TensorType::sh([3])]])
}

fn eye_like() -> ExtPrimitive {
    ExtPrimitive::shared_only(
        "eye_like",
        1,
        |args| match shared_arg(args, 0)?.dims() {
            [p, q] if p == q => Ok(TensorType::sh([*p, *p])),
            _ => Err("expected a square shared matrix".into()),
        },
        |args| match args[0].shape().dims() {
            [p, q] if p == q => Ok(TensorValue::identity(*p)),
            _ => Err(format!("expected a square matrix, got shape {}", args[0].shape())),
        },
    )
    .with_samples(vec![vec![TensorType::sh([1, 1])], vec![TensorType::sh([3, 3])]])
}

fn solve() -> ExtPrimitive {
    ExtPrimitive::shared_only(
        "solve",
        2,
        |args| {
            let a = shared_arg(args, 0)?;
            let b = shared_arg(args, 1)?;
            match (a.dims(), b.dims()) {
                ([p, q], [r]) if p == q && q == r => Ok(TensorType::Sh(b.clone())),
                ([p, q], [r, _]) if p == q && q == r => Ok(TensorType::Sh(b.clone())),
                _ => Err(format!("cannot solve a system of shape {a} against {b}")),
            }
        },
        |args| linalg::solve(&args[0], &args[1]).map_err(|e| e.to_string()),
    )
    .with_samples(vec![
        vec![TensorType::sh([2, 2]), TensorType::sh([2])],
        vec![TensorType::sh([3, 3]), TensorType::sh([3])],
        vec![TensorType::sh([3, 3]), TensorType::sh([3, 2])],
    ])
}

fn shared_matmul() -> ExtPrimitive {
    ExtPrimitive::shared_only(
        "shared_matmul",
        2,
        |args| {
            let a = shared_arg(args, 0)?;
            let b = shared_arg(args, 1)?;
            match (a.dims(), b.dims()) {
                ([m, k], [k2, n]) if k == k2 => Ok(TensorType::sh([*m, *n])),
                _ => Err(format!("matrix product of {a} and {b} is undefined")),
            }
        },
        |args| args[0].matmul(&args[1]).map_err(|e| e.to_string()),
    )
    .with_samples(vec![
        vec![TensorType::sh([2, 3]), TensorType::sh([3, 1])],
        vec![TensorType::sh([1, 2]), TensorType::sh([2, 4])],
    ])
}

/// The extension set loaded by [`Registry::default`].
pub fn builtin_extensions() -> Vec<ExtPrimitive> {
    vec![
        project_features(),
        project_response(),
        scale_rows(),
        outer_rows(),
        transpose_records(),
        as_column(),
        eye_like(),
        solve(),
        shared_matmul(),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtins_register_and_audit() {
        let reg = Registry::default();
        for name in reg.names() {
            let handle = ExtHandle { name: name.into() };
            let report = audit(&reg, &handle, 40, 7);
            assert!(report.passed(), "{name}: {:?}", report.failures);
        }
    }

    #[test]
    fn duplicate_and_reserved_names() {
        let mut reg = Registry::default();
        assert!(matches!(reg.register(solve()), Err(RegistryError::Duplicate(_))));
        let bad = ExtPrimitive::shared_only("add", 1, |a| Ok(a[0].clone()), |a| Ok(a[0].clone()))
            .with_samples(vec![vec![TensorType::sh([1])]]);
        assert!(matches!(reg.register(bad), Err(RegistryError::InvalidName(_))));
    }

    #[test]
    fn leak_is_rejected() {
        let leak = ExtPrimitive::client_local_uniform(
            "leak",
            1,
            |a| match &a[0] {
                TensorType::Fed(t) => Ok(TensorType::Sh(t.nonrecord.clone())),
                t => Ok(t.clone()),
            },
            |a| Ok(a[0].clone()),
        )
        .with_samples(vec![vec![TensorType::fed(1, [2])]]);
        let mut reg = Registry::default();
        assert!(matches!(reg.register(leak), Err(RegistryError::ExposureLeak { .. })));
    }

    #[test]
    fn client_dependent_map_fails_audit() {
        let bad = ExtPrimitive::client_local(
            "by_client",
            1,
            |a| Ok(a[0].clone()),
            |call| {
                let bump = call.client_index.unwrap_or(0) as f64;
                Ok(call.args[0].map(|v| v + bump))
            },
            |a| Ok(a[0].clone()),
        )
        .with_samples(vec![vec![TensorType::fed(1, [2])]]);
        let mut reg = Registry::default();
        let h = reg.register(bad).unwrap();
        let report = audit(&reg, &h, 20, 1);
        assert!(!report.passed());
    }
}
