//! JSON interchange for programs, data, plans and results.
//!
//! Types are `{"fed": {"axis": r, "shape": [..]}}` or `{"sh": [..]}`.
//! Tensors are `{"shape": [..], "data": [..]}` in row-major order; the
//! strings `"inf"`, `"-inf"` and `"nan"` stand for non-finite values.
//! Expressions are `{"var": name}`, a literal (`{"literal": tensor}` or a bare
//! number), or `{"op": name, "args": [..]}` with `"axis"` for aggregations and
//! `"perm"` for permutations. See `docs/format.md` for complete documents.

use std::collections::BTreeMap;

use serde::Serializer;
use serde_json::{json, Map, Value as Json};
use thiserror::Error;

use crate::ast::{Context, Expr, FedType, Primitive, TensorType};
use crate::eval::{Environment, Value};
use crate::extensions::Registry;
use crate::factorize::{
    validate_iterative, validate_one_round, Component, Encoder, IterativeProgram, OneRoundProgram, SharedStatePlan,
    Violation,
};
use crate::federated::{Federation, FederatedValue, FederationError};
use crate::signature::{AggSchema, BinaryOp, CompareOp, UnaryOp};
use crate::tensor::{Permutation, Shape, TensorValue};
use crate::typecheck::{typecheck, TypeError};

pub const FORMAT_VERSION: u64 = 1;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FormatError {
    #[error("line {line}, column {column}: {message}")]
    Parse { line: usize, column: usize, message: String },
    #[error("at {path}: {message}")]
    Schema { path: String, message: String },
    #[error(transparent)]
    Type(#[from] TypeError),
    #[error("{}", .0.iter().map(ToString::to_string).collect::<Vec<_>>().join("; "))]
    Validation(Vec<Violation>),
}

impl FormatError {
    /// Short category used in command-line error lines.
    pub fn category(&self) -> &'static str {
        match self {
            FormatError::Parse { .. } => "parse",
            FormatError::Schema { .. } => "schema",
            FormatError::Type(_) => "type",
            FormatError::Validation(_) => "validation",
        }
    }

    /// The specific error kind for type and validation errors.
    pub fn kind(&self) -> Option<&'static str> {
        match self {
            FormatError::Type(e) => Some(e.kind.name()),
            FormatError::Validation(vs) => vs.first().map(|v| v.kind.name()),
            _ => None,
        }
    }
}

fn schema(path: &str, message: impl Into<String>) -> FormatError {
    FormatError::Schema {
        path: if path.is_empty() { "document".into() } else { path.into() },
        message: message.into(),
    }
}

fn join(path: &str, key: &str) -> String {
    if path.is_empty() {
        key.to_string()
    } else {
        format!("{path}.{key}")
    }
}

fn index(path: &str, i: usize) -> String {
    format!("{path}[{i}]")
}

/// Parses JSON text, reporting line and column on failure.
pub fn parse_json(text: &str) -> Result<Json, FormatError> {
    serde_json::from_str(text).map_err(|e| FormatError::Parse {
        line: e.line(),
        column: e.column(),
        message: strip_position(&e.to_string()),
    })
}

fn strip_position(msg: &str) -> String {
    match msg.rfind(" at line ") {
        Some(i) => msg[..i].to_string(),
        None => msg.to_string(),
    }
}

pub(crate) fn serialize_type<S: Serializer>(ty: &TensorType, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_str(&ty.to_string())
}

fn object<'a>(v: &'a Json, path: &str) -> Result<&'a Map<String, Json>, FormatError> {
    v.as_object().ok_or_else(|| schema(path, "expected an object"))
}

fn field<'a>(obj: &'a Map<String, Json>, key: &str, path: &str) -> Result<&'a Json, FormatError> {
    obj.get(key)
        .ok_or_else(|| schema(path, format!("missing field `{key}`")))
}

fn string<'a>(v: &'a Json, path: &str) -> Result<&'a str, FormatError> {
    v.as_str().ok_or_else(|| schema(path, "expected a string"))
}

fn array<'a>(v: &'a Json, path: &str) -> Result<&'a Vec<Json>, FormatError> {
    v.as_array().ok_or_else(|| schema(path, "expected an array"))
}

fn usize_of(v: &Json, path: &str) -> Result<usize, FormatError> {
    v.as_u64()
        .and_then(|n| usize::try_from(n).ok())
        .ok_or_else(|| schema(path, "expected a nonnegative integer"))
}

fn check_version(obj: &Map<String, Json>) -> Result<(), FormatError> {
    match obj.get("version") {
        None => Ok(()),
        Some(v) if v.as_u64() == Some(FORMAT_VERSION) => Ok(()),
        Some(v) => Err(schema("version", format!("unsupported version {v}"))),
    }
}

fn check_keys(obj: &Map<String, Json>, allowed: &[&str], path: &str) -> Result<(), FormatError> {
    match obj.keys().find(|k| !allowed.contains(&k.as_str())) {
        Some(k) => Err(schema(path, format!("unknown field `{k}`"))),
        None => Ok(()),
    }
}

/// A real number, or one of the strings for non-finite values.
pub fn number_to_json(v: f64) -> Json {
    if v.is_finite() {
        json!(v)
    } else if v.is_nan() {
        json!("nan")
    } else if v > 0.0 {
        json!("inf")
    } else {
        json!("-inf")
    }
}

pub fn number_from_json(v: &Json, path: &str) -> Result<f64, FormatError> {
    match v {
        Json::Number(n) => n.as_f64().ok_or_else(|| schema(path, "number out of range")),
        Json::String(s) => match s.as_str() {
            "inf" | "+inf" => Ok(f64::INFINITY),
            "-inf" => Ok(f64::NEG_INFINITY),
            "nan" => Ok(f64::NAN),
            _ => Err(schema(path, format!("expected a number, got string `{s}`"))),
        },
        _ => Err(schema(path, "expected a number")),
    }
}

pub fn shape_to_json(s: &Shape) -> Json {
    json!(s.dims())
}

pub fn shape_from_json(v: &Json, path: &str) -> Result<Shape, FormatError> {
    let dims = array(v, path)?
        .iter()
        .enumerate()
        .map(|(i, d)| usize_of(d, &index(path, i)))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Shape::new(dims))
}

pub fn tensor_to_json(t: &TensorValue) -> Json {
    json!({
        "shape": shape_to_json(t.shape()),
        "data": t.data().iter().map(|&v| number_to_json(v)).collect::<Vec<_>>(),
    })
}

pub fn tensor_from_json(v: &Json, path: &str) -> Result<TensorValue, FormatError> {
    let obj = object(v, path)?;
    check_keys(obj, &["shape", "data"], path)?;
    let shape = shape_from_json(field(obj, "shape", path)?, &join(path, "shape"))?;
    let data_path = join(path, "data");
    let data = array(field(obj, "data", path)?, &data_path)?
        .iter()
        .enumerate()
        .map(|(i, x)| number_from_json(x, &index(&data_path, i)))
        .collect::<Result<Vec<_>, _>>()?;
    TensorValue::new(shape, data).map_err(|e| schema(path, e.to_string()))
}

pub fn type_to_json(t: &TensorType) -> Json {
    match t {
        TensorType::Sh(s) => json!({ "sh": shape_to_json(s) }),
        TensorType::Fed(f) => json!({ "fed": { "axis": f.record_axis, "shape": shape_to_json(&f.nonrecord) } }),
    }
}

pub fn type_from_json(v: &Json, path: &str) -> Result<TensorType, FormatError> {
    let obj = object(v, path)?;
    let ty = match (obj.get("sh"), obj.get("fed")) {
        (Some(s), None) if obj.len() == 1 => TensorType::Sh(shape_from_json(s, &join(path, "sh"))?),
        (None, Some(f)) if obj.len() == 1 => {
            let fpath = join(path, "fed");
            let fo = object(f, &fpath)?;
            check_keys(fo, &["axis", "shape"], &fpath)?;
            let axis = usize_of(field(fo, "axis", &fpath)?, &join(&fpath, "axis"))?;
            let shape = shape_from_json(field(fo, "shape", &fpath)?, &join(&fpath, "shape"))?;
            TensorType::Fed(FedType::new(axis, shape))
        }
        _ => return Err(schema(path, "a type is {\"sh\": [..]} or {\"fed\": {\"axis\": r, \"shape\": [..]}}")),
    };
    if !ty.is_valid() {
        return Err(schema(path, format!("malformed type {ty}")));
    }
    Ok(ty)
}

pub fn expr_to_json(e: &Expr) -> Json {
    match e {
        Expr::Var(name) => json!({ "var": name }),
        Expr::Apply { prim, args } => {
            if let Primitive::Literal(t) = prim {
                return match t.as_scalar() {
                    Some(v) if t.rank() == 0 => number_to_json(v),
                    _ => json!({ "literal": tensor_to_json(t) }),
                };
            }
            let mut obj = Map::new();
            let op = match prim {
                Primitive::Unary(op) => op.name().to_string(),
                Primitive::Binary(op) => op.name().to_string(),
                Primitive::Compare(op) => op.name().to_string(),
                Primitive::Agg { schema, axis } => {
                    obj.insert("axis".into(), json!(axis));
                    schema.name().to_string()
                }
                Primitive::Perm(p) => {
                    obj.insert("perm".into(), json!(p.images()));
                    "perm".to_string()
                }
                other => other.name(),
            };
            obj.insert("op".into(), json!(op));
            obj.insert("args".into(), Json::Array(args.iter().map(expr_to_json).collect()));
            Json::Object(obj)
        }
    }
}

fn parse_agg_name(op: &str) -> Option<(AggSchema, Option<usize>)> {
    if let Ok(s) = op.parse::<AggSchema>() {
        return Some((s, None));
    }
    let (name, axis) = op.rsplit_once('_')?;
    Some((name.parse().ok()?, Some(axis.parse().ok()?)))
}

pub fn expr_from_json(v: &Json, registry: &Registry, path: &str) -> Result<Expr, FormatError> {
    if v.is_number() || v.is_string() {
        return Ok(Expr::scalar(number_from_json(v, path)?));
    }
    let obj = object(v, path)?;
    if let Some(name) = obj.get("var") {
        check_keys(obj, &["var"], path)?;
        return Ok(Expr::var(string(name, &join(path, "var"))?));
    }
    if let Some(t) = obj.get("literal") {
        check_keys(obj, &["literal"], path)?;
        return Ok(Expr::lit(tensor_from_json(t, &join(path, "literal"))?));
    }
    let op_path = join(path, "op");
    let op = string(field(obj, "op", path)?, &op_path)?;
    check_keys(obj, &["op", "args", "axis", "perm"], path)?;
    let args_path = join(path, "args");
    let args = match obj.get("args") {
        Some(a) => array(a, &args_path)?
            .iter()
            .enumerate()
            .map(|(i, a)| expr_from_json(a, registry, &index(&args_path, i)))
            .collect::<Result<Vec<_>, _>>()?,
        None => Vec::new(),
    };
    let axis = obj
        .get("axis")
        .map(|a| usize_of(a, &join(path, "axis")))
        .transpose()?;
    let prim = if let Ok(u) = op.parse::<UnaryOp>() {
        Primitive::Unary(u)
    } else if let Ok(b) = op.parse::<BinaryOp>() {
        Primitive::Binary(b)
    } else if let Ok(c) = op.parse::<CompareOp>() {
        Primitive::Compare(c)
    } else if let Some((schema_, named_axis)) = parse_agg_name(op) {
        let axis = match (named_axis, axis) {
            (Some(a), None) | (None, Some(a)) => a,
            (Some(a), Some(b)) if a == b => a,
            (Some(_), Some(_)) => return Err(schema(path, "conflicting aggregation axes")),
            (None, None) => return Err(schema(path, format!("`{op}` needs an `axis`"))),
        };
        if axis == 0 {
            return Err(schema(&join(path, "axis"), "axes are numbered from 1"));
        }
        Primitive::Agg { schema: schema_, axis }
    } else if op == "perm" {
        let ppath = join(path, "perm");
        let images = array(field(obj, "perm", path)?, &ppath)?
            .iter()
            .enumerate()
            .map(|(i, x)| usize_of(x, &index(&ppath, i)))
            .collect::<Result<Vec<_>, _>>()?;
        Primitive::Perm(Permutation::new(images).map_err(|e| schema(&ppath, e.to_string()))?)
    } else if op == "matmul_fed_sh" {
        Primitive::MatMulFedSh
    } else if op == "matmul_sh_fed" {
        Primitive::MatMulShFed
    } else if op == "matmul_fed_fed" {
        Primitive::MatMulFedFed
    } else if registry.contains(op) {
        Primitive::Ext(op.to_string())
    } else {
        return Err(schema(&op_path, format!("unknown op `{op}`")));
    };
    if axis.is_some() && !matches!(prim, Primitive::Agg { .. }) {
        return Err(schema(path, format!("`axis` is not a field of `{op}`")));
    }
    if obj.contains_key("perm") && !matches!(prim, Primitive::Perm(_)) {
        return Err(schema(path, format!("`perm` is not a field of `{op}`")));
    }
    if let Some(n) = prim.arity() {
        if n != args.len() {
            return Err(schema(&args_path, format!("`{op}` takes {n} arguments, got {}", args.len())));
        }
    } else if let Primitive::Ext(name) = &prim {
        let n = registry.get(name).expect("checked").arity();
        if n != args.len() {
            return Err(schema(&args_path, format!("`{op}` takes {n} arguments, got {}", args.len())));
        }
    }
    Ok(Expr::apply(prim, args))
}

/// A loaded program.
#[derive(Clone, Debug, PartialEq)]
pub enum ProgramDocument {
    Expr { context: Context, body: Expr },
    OneRound(OneRoundProgram),
    Iterative(IterativeProgram),
}

impl ProgramDocument {
    pub fn kind(&self) -> &'static str {
        match self {
            ProgramDocument::Expr { .. } => "expr",
            ProgramDocument::OneRound(_) => "one-round",
            ProgramDocument::Iterative(_) => "iterative",
        }
    }

    /// Every declared input with its type.
    pub fn context(&self) -> Context {
        match self {
            ProgramDocument::Expr { context, .. } => context.clone(),
            ProgramDocument::OneRound(p) => p.encoder_context(),
            ProgramDocument::Iterative(p) => match p.rounds.first() {
                Some(r) => Context::new().with(r.input.clone(), TensorType::Fed(r.input_type.clone())),
                None => Context::new(),
            },
        }
    }
}

fn context_from_json(v: &Json, path: &str) -> Result<Context, FormatError> {
    let obj = object(v, path)?;
    let mut ctx = Context::new();
    for (name, t) in obj {
        ctx.insert(name.clone(), type_from_json(t, &join(path, name))?);
    }
    Ok(ctx)
}

fn context_to_json(ctx: &Context) -> Json {
    Json::Object(ctx.iter().map(|(n, t)| (n.clone(), type_to_json(t))).collect())
}

fn components_from_json(
    v: &Json,
    registry: &Registry,
    path: &str,
) -> Result<Vec<(String, Component)>, FormatError> {
    array(v, path)?
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let cpath = index(path, i);
            let obj = object(c, &cpath)?;
            let name = string(field(obj, "name", &cpath)?, &join(&cpath, "name"))?.to_string();
            let comp = match (obj.get("agg"), obj.get("matmul")) {
                (Some(agg), None) => {
                    check_keys(obj, &["name", "agg", "encoder"], &cpath)?;
                    let s = string(agg, &join(&cpath, "agg"))?;
                    let schema_ = s
                        .parse::<AggSchema>()
                        .map_err(|_| schema(&join(&cpath, "agg"), format!("unknown aggregation `{s}`")))?;
                    let encoder = expr_from_json(field(obj, "encoder", &cpath)?, registry, &join(&cpath, "encoder"))?;
                    Component::Agg {
                        encoder,
                        schema: schema_,
                    }
                }
                (None, Some(m)) => {
                    check_keys(obj, &["name", "matmul"], &cpath)?;
                    let mpath = join(&cpath, "matmul");
                    let mo = object(m, &mpath)?;
                    check_keys(mo, &["left", "right"], &mpath)?;
                    Component::Mat {
                        left: expr_from_json(field(mo, "left", &mpath)?, registry, &join(&mpath, "left"))?,
                        right: expr_from_json(field(mo, "right", &mpath)?, registry, &join(&mpath, "right"))?,
                    }
                }
                _ => return Err(schema(&cpath, "a component has exactly one of `agg` or `matmul`")),
            };
            Ok((name, comp))
        })
        .collect()
}

fn components_to_json(cs: &[(String, Component)]) -> Json {
    Json::Array(
        cs.iter()
            .map(|(name, c)| match c {
                Component::Agg { encoder, schema } => json!({
                    "name": name,
                    "agg": schema.name(),
                    "encoder": expr_to_json(encoder),
                }),
                Component::Mat { left, right } => json!({
                    "name": name,
                    "matmul": { "left": expr_to_json(left), "right": expr_to_json(right) },
                }),
            })
            .collect(),
    )
}

fn split_inputs(ctx: &Context, path: &str) -> Result<(String, FedType, Vec<(String, Shape)>), FormatError> {
    let mut fed = None;
    let mut params = Vec::new();
    for (name, ty) in ctx.iter() {
        match ty {
            TensorType::Fed(f) => {
                if fed.is_some() {
                    return Err(schema(path, "a one-round program reads exactly one federated input"));
                }
                fed = Some((name.clone(), f.clone()));
            }
            TensorType::Sh(s) => params.push((name.clone(), s.clone())),
        }
    }
    let (name, ty) = fed.ok_or_else(|| schema(path, "a one-round program needs a federated input"))?;
    Ok((name, ty, params))
}

/// Parses and validates a program document.
pub fn load_program(text: &str, registry: &Registry) -> Result<ProgramDocument, FormatError> {
    program_from_json(&parse_json(text)?, registry)
}

pub fn program_from_json(v: &Json, registry: &Registry) -> Result<ProgramDocument, FormatError> {
    let obj = object(v, "")?;
    check_version(obj)?;
    let kind = string(field(obj, "kind", "")?, "kind")?;
    let context = context_from_json(field(obj, "inputs", "")?, "inputs")?;
    match kind {
        "expr" => {
            check_keys(obj, &["version", "kind", "inputs", "body"], "")?;
            let body = expr_from_json(field(obj, "body", "")?, registry, "body")?;
            typecheck(&context, &body, registry)?;
            Ok(ProgramDocument::Expr { context, body })
        }
        "one-round" => {
            check_keys(obj, &["version", "kind", "inputs", "components", "decoder"], "")?;
            let (input, input_type, params) = split_inputs(&context, "inputs")?;
            let p = OneRoundProgram {
                input,
                input_type,
                params,
                components: components_from_json(field(obj, "components", "")?, registry, "components")?,
                decoder: expr_from_json(field(obj, "decoder", "")?, registry, "decoder")?,
            };
            validate_one_round(&p, registry).map_err(FormatError::Validation)?;
            Ok(ProgramDocument::OneRound(p))
        }
        "iterative" => {
            check_keys(obj, &["version", "kind", "inputs", "theta", "rounds", "repeat"], "")?;
            let (input, input_type, extra) = split_inputs(&context, "inputs")?;
            if let Some((name, _)) = extra.first() {
                return Err(schema(
                    &join("inputs", name),
                    "iterative programs carry shared state only through `theta`",
                ));
            }
            let tobj = object(field(obj, "theta", "")?, "theta")?;
            check_keys(tobj, &["name", "init"], "theta")?;
            let theta_name = string(field(tobj, "name", "theta")?, "theta.name")?.to_string();
            let theta0 = tensor_from_json(field(tobj, "init", "theta")?, "theta.init")?;
            let repeat = obj.get("repeat").map(|r| usize_of(r, "repeat")).transpose()?.unwrap_or(1);
            let rounds_json = array(field(obj, "rounds", "")?, "rounds")?;
            if rounds_json.is_empty() {
                return Err(schema("rounds", "an iterative program needs at least one round"));
            }
            let mut parsed = Vec::new();
            for (t, r) in rounds_json.iter().enumerate() {
                let rpath = index("rounds", t);
                let ro = object(r, &rpath)?;
                check_keys(ro, &["components", "decoder"], &rpath)?;
                let comps = components_from_json(field(ro, "components", &rpath)?, registry, &join(&rpath, "components"))?;
                let dec = expr_from_json(field(ro, "decoder", &rpath)?, registry, &join(&rpath, "decoder"))?;
                parsed.push((comps, dec));
            }
            let mut rounds = Vec::new();
            let mut shape = theta0.shape().clone();
            for (t, (components, decoder)) in std::iter::repeat_n(parsed.iter(), repeat).flatten().enumerate() {
                let round = OneRoundProgram {
                    input: input.clone(),
                    input_type: input_type.clone(),
                    params: vec![(theta_name.clone(), shape.clone())],
                    components: components.clone(),
                    decoder: decoder.clone(),
                };
                let comp_shapes = validate_one_round(&round, registry).map_err(|vs| {
                    FormatError::Validation(
                        vs.into_iter()
                            .map(|mut v| {
                                v.round = Some(t);
                                v
                            })
                            .collect(),
                    )
                })?;
                let mut dctx = Context::new().with(theta_name.clone(), TensorType::Sh(shape.clone()));
                for ((n, _), s) in round.components.iter().zip(comp_shapes) {
                    dctx.insert(n.clone(), TensorType::Sh(s));
                }
                if let Ok(TensorType::Sh(next)) = typecheck(&dctx, &round.decoder, registry) {
                    shape = next;
                }
                rounds.push(round);
            }
            let p = IterativeProgram {
                theta_name,
                theta0,
                rounds,
            };
            validate_iterative(&p, registry).map_err(FormatError::Validation)?;
            Ok(ProgramDocument::Iterative(p))
        }
        other => Err(schema("kind", format!("unknown program kind `{other}`"))),
    }
}

pub fn program_to_json(doc: &ProgramDocument) -> Json {
    match doc {
        ProgramDocument::Expr { context, body } => json!({
            "version": FORMAT_VERSION,
            "kind": "expr",
            "inputs": context_to_json(context),
            "body": expr_to_json(body),
        }),
        ProgramDocument::OneRound(p) => json!({
            "version": FORMAT_VERSION,
            "kind": "one-round",
            "inputs": context_to_json(&p.encoder_context()),
            "components": components_to_json(&p.components),
            "decoder": expr_to_json(&p.decoder),
        }),
        ProgramDocument::Iterative(p) => {
            let inputs = match p.rounds.first() {
                Some(r) => context_to_json(&Context::new().with(r.input.clone(), TensorType::Fed(r.input_type.clone()))),
                None => json!({}),
            };
            json!({
                "version": FORMAT_VERSION,
                "kind": "iterative",
                "inputs": inputs,
                "theta": { "name": p.theta_name, "init": tensor_to_json(&p.theta0) },
                "rounds": p.rounds.iter().map(|r| json!({
                    "components": components_to_json(&r.components),
                    "decoder": expr_to_json(&r.decoder),
                })).collect::<Vec<_>>(),
            })
        }
    }
}

pub fn save_program(doc: &ProgramDocument) -> String {
    serde_json::to_string_pretty(&program_to_json(doc)).expect("json values serialize")
}

/// Federated and shared inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct DataDocument {
    pub federation: Federation,
    pub federated: BTreeMap<String, FederatedValue>,
    pub shared: BTreeMap<String, TensorValue>,
}

impl DataDocument {
    pub fn environment(&self) -> Environment {
        let mut env = Environment::new();
        for (name, x) in &self.federated {
            env.bind_federated(name.clone(), x.clone()).expect("one federation");
        }
        for (name, t) in &self.shared {
            env.bind_shared(name.clone(), t.clone());
        }
        env
    }
}

pub fn load_data(text: &str) -> Result<DataDocument, FormatError> {
    data_from_json(&parse_json(text)?)
}

pub fn data_from_json(v: &Json) -> Result<DataDocument, FormatError> {
    let obj = object(v, "")?;
    check_version(obj)?;
    check_keys(obj, &["version", "clients", "record_axes", "shared"], "")?;
    let clients = array(field(obj, "clients", "")?, "clients")?;
    let mut ids = Vec::new();
    let mut tensors: Vec<BTreeMap<String, TensorValue>> = Vec::new();
    for (i, c) in clients.iter().enumerate() {
        let cpath = index("clients", i);
        let co = object(c, &cpath)?;
        check_keys(co, &["id", "tensors"], &cpath)?;
        ids.push(string(field(co, "id", &cpath)?, &join(&cpath, "id"))?.to_string());
        let tpath = join(&cpath, "tensors");
        let mut map = BTreeMap::new();
        if let Some(t) = co.get("tensors") {
            for (name, tv) in object(t, &tpath)? {
                map.insert(name.clone(), tensor_from_json(tv, &join(&tpath, name))?);
            }
        }
        tensors.push(map);
    }
    let federation = Federation::new(ids.clone()).map_err(|e| schema("clients", e.to_string()))?;
    let mut axes = BTreeMap::new();
    if let Some(a) = obj.get("record_axes") {
        for (name, r) in object(a, "record_axes")? {
            axes.insert(name.clone(), usize_of(r, &join("record_axes", name))?);
        }
    }
    let mut federated = BTreeMap::new();
    let names: Vec<String> = tensors.first().map(|m| m.keys().cloned().collect()).unwrap_or_default();
    for (i, m) in tensors.iter().enumerate() {
        let here: Vec<&String> = m.keys().collect();
        if here.len() != names.len() || here.iter().zip(&names).any(|(a, b)| *a != b) {
            return Err(schema(
                &join(&index("clients", i), "tensors"),
                format!("client `{}` does not hold the same tensors as `{}`", ids[i], ids[0]),
            ));
        }
    }
    if let Some(extra) = axes.keys().find(|k| !names.contains(k)) {
        return Err(schema("record_axes", format!("no federated tensor named `{extra}`")));
    }
    for name in &names {
        let axis = axes.get(name).copied().unwrap_or(1);
        let locals: Vec<TensorValue> = tensors.iter().map(|m| m[name].clone()).collect();
        let x = FederatedValue::from_locals(federation.clone(), axis, locals).map_err(|e| match e {
            FederationError::LocalShape {
                client, found, expected, ..
            } => schema(
                &format!("clients.{client}.tensors.{name}"),
                format!("local shape {found} does not have non-record shape {expected}"),
            ),
            other => schema(&format!("tensors.{name}"), other.to_string()),
        })?;
        federated.insert(name.clone(), x);
    }
    let mut shared = BTreeMap::new();
    if let Some(s) = obj.get("shared") {
        for (name, tv) in object(s, "shared")? {
            if federated.contains_key(name) {
                return Err(schema(&join("shared", name), "name is already a federated tensor"));
            }
            shared.insert(name.clone(), tensor_from_json(tv, &join("shared", name))?);
        }
    }
    Ok(DataDocument {
        federation,
        federated,
        shared,
    })
}

pub fn data_to_json(d: &DataDocument) -> Json {
    let clients: Vec<Json> = d
        .federation
        .clients()
        .iter()
        .enumerate()
        .map(|(i, id)| {
            let tensors: Map<String, Json> = d
                .federated
                .iter()
                .map(|(name, x)| (name.clone(), tensor_to_json(x.local(i))))
                .collect();
            json!({ "id": id, "tensors": tensors })
        })
        .collect();
    let axes: Map<String, Json> = d
        .federated
        .iter()
        .map(|(name, x)| (name.clone(), json!(x.record_axis())))
        .collect();
    let shared: Map<String, Json> = d
        .shared
        .iter()
        .map(|(name, t)| (name.clone(), tensor_to_json(t)))
        .collect();
    json!({
        "version": FORMAT_VERSION,
        "clients": clients,
        "record_axes": axes,
        "shared": shared,
    })
}

pub fn save_data(d: &DataDocument) -> String {
    serde_json::to_string_pretty(&data_to_json(d)).expect("json values serialize")
}

/// A value with its type.
pub fn value_to_json(v: &Value) -> Json {
    match v {
        Value::Shared(t) => json!({ "type": type_to_json(&v.type_of()), "value": tensor_to_json(t) }),
        Value::Federated(x) => {
            let locals: Map<String, Json> = x
                .federation()
                .clients()
                .iter()
                .zip(x.locals())
                .map(|(c, t)| (c.clone(), tensor_to_json(t)))
                .collect();
            json!({ "type": type_to_json(&v.type_of()), "locals": locals })
        }
    }
}

/// Summary and full description of a plan.
pub fn plan_to_json(plan: &SharedStatePlan) -> Json {
    let components: Vec<Json> = plan
        .components
        .iter()
        .map(|c| {
            let encoder = match &c.encoder {
                Encoder::Aggregate {
                    expr,
                    schema,
                    record_axis,
                } => json!({ "aggregate": { "schema": schema.name(), "axis": record_axis, "expr": expr_to_json(expr) } }),
                Encoder::Product { left, right } => {
                    json!({ "product": { "left": expr_to_json(left), "right": expr_to_json(right) } })
                }
            };
            json!({
                "name": c.name,
                "shape": shape_to_json(&c.shape),
                "merge": c.merge.name(),
                "identity": number_to_json(c.merge.identity_value()),
                "encoder": encoder,
            })
        })
        .collect();
    let params: Map<String, Json> = plan
        .params
        .iter()
        .map(|(n, s)| (n.clone(), type_to_json(&TensorType::Sh(s.clone()))))
        .collect();
    json!({
        "version": FORMAT_VERSION,
        "kind": "plan",
        "input": { "name": plan.input, "type": type_to_json(&TensorType::Fed(plan.input_type.clone())) },
        "params": params,
        "components": components,
        "decoder": expr_to_json(&plan.decoder),
        "state_elements": plan.state_elements(),
        "state_bytes": plan.state_bytes(),
    })
}

/// Rebuilds the one-round program described by a plan document.
pub fn plan_program_from_json(v: &Json, registry: &Registry) -> Result<OneRoundProgram, FormatError> {
    let obj = object(v, "")?;
    check_version(obj)?;
    if obj.get("kind").and_then(Json::as_str) != Some("plan") {
        return Err(schema("kind", "expected a plan document"));
    }
    let io = object(field(obj, "input", "")?, "input")?;
    let input = string(field(io, "name", "input")?, "input.name")?.to_string();
    let input_type = match type_from_json(field(io, "type", "input")?, "input.type")? {
        TensorType::Fed(f) => f,
        TensorType::Sh(_) => return Err(schema("input.type", "the plan input must be federated")),
    };
    let mut params = Vec::new();
    if let Some(p) = obj.get("params") {
        for (name, t) in object(p, "params")? {
            match type_from_json(t, &join("params", name))? {
                TensorType::Sh(s) => params.push((name.clone(), s)),
                TensorType::Fed(_) => return Err(schema(&join("params", name), "parameters are shared")),
            }
        }
    }
    let mut components = Vec::new();
    for (i, c) in array(field(obj, "components", "")?, "components")?.iter().enumerate() {
        let cpath = index("components", i);
        let co = object(c, &cpath)?;
        let name = string(field(co, "name", &cpath)?, &join(&cpath, "name"))?.to_string();
        let epath = join(&cpath, "encoder");
        let eo = object(field(co, "encoder", &cpath)?, &epath)?;
        let comp = if let Some(a) = eo.get("aggregate") {
            let apath = join(&epath, "aggregate");
            let ao = object(a, &apath)?;
            let s = string(field(ao, "schema", &apath)?, &join(&apath, "schema"))?;
            Component::Agg {
                encoder: expr_from_json(field(ao, "expr", &apath)?, registry, &join(&apath, "expr"))?,
                schema: s
                    .parse()
                    .map_err(|_| schema(&join(&apath, "schema"), format!("unknown aggregation `{s}`")))?,
            }
        } else if let Some(p) = eo.get("product") {
            let ppath = join(&epath, "product");
            let po = object(p, &ppath)?;
            Component::Mat {
                left: expr_from_json(field(po, "left", &ppath)?, registry, &join(&ppath, "left"))?,
                right: expr_from_json(field(po, "right", &ppath)?, registry, &join(&ppath, "right"))?,
            }
        } else {
            return Err(schema(&epath, "an encoder is `aggregate` or `product`"));
        };
        components.push((name, comp));
    }
    let program = OneRoundProgram {
        input,
        input_type,
        params,
        components,
        decoder: expr_from_json(field(obj, "decoder", "")?, registry, "decoder")?,
    };
    validate_one_round(&program, registry).map_err(FormatError::Validation)?;
    Ok(program)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::typecheck::TypeErrorKind;

    fn reg() -> Registry {
        Registry::default()
    }

    #[test]
    fn minimal_expr_program() {
        let text = r#"{"version": 1, "kind": "expr",
            "inputs": {"x": {"fed": {"axis": 1, "shape": []}}},
            "body": {"op": "sum", "axis": 1, "args": [{"var": "x"}]}}"#;
        let doc = load_program(text, &reg()).unwrap();
        let ProgramDocument::Expr { context, body } = &doc else {
            panic!("expected an expression program")
        };
        assert_eq!(typecheck(context, body, &reg()).unwrap(), TensorType::sh([]));
        assert_eq!(load_program(&save_program(&doc), &reg()).unwrap(), doc);
    }

    #[test]
    fn unknown_op_is_named() {
        let text = r#"{"kind": "expr", "inputs": {"x": {"sh": []}}, "body": {"op": "frobnicate", "args": [{"var": "x"}]}}"#;
        let err = load_program(text, &reg()).unwrap_err();
        assert_eq!(err.category(), "schema");
        assert!(err.to_string().contains("frobnicate"), "{err}");
    }

    #[test]
    fn parse_errors_have_positions() {
        let err = load_program("{\n  \"kind\": \"expr\",\n  oops\n}", &reg()).unwrap_err();
        assert!(matches!(err, FormatError::Parse { line: 3, .. }), "{err}");
    }

    #[test]
    fn type_errors_are_delegated() {
        let text = r#"{"kind": "expr",
            "inputs": {"x": {"fed": {"axis": 1, "shape": [2]}}, "s": {"sh": [3, 2]}},
            "body": {"op": "add", "args": [{"var": "x"}, {"var": "s"}]}}"#;
        match load_program(text, &reg()).unwrap_err() {
            FormatError::Type(e) => assert_eq!(e.kind, TypeErrorKind::RecordAxisViolation),
            other => panic!("{other}"),
        }
    }

    #[test]
    fn mismatched_client_shapes() {
        let text = r#"{"clients": [
            {"id": "a", "tensors": {"x": {"shape": [1, 2], "data": [1, 2]}}},
            {"id": "b", "tensors": {"x": {"shape": [1, 3], "data": [1, 2, 3]}}}]}"#;
        let err = load_data(text).unwrap_err();
        assert_eq!(err.category(), "schema");
        assert!(err.to_string().contains("clients.b"), "{err}");
    }

    #[test]
    fn data_round_trip_with_non_finite() {
        let text = r#"{"clients": [
            {"id": "a", "tensors": {"x": {"shape": [2], "data": [1.5, "inf"]}}},
            {"id": "b", "tensors": {"x": {"shape": [0], "data": []}}}],
            "shared": {"t": {"shape": [], "data": ["-inf"]}}}"#;
        let d = load_data(text).unwrap();
        assert_eq!(d.federated["x"].total_records(), 2);
        assert_eq!(load_data(&save_data(&d)).unwrap(), d);
    }
}
