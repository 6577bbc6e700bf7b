//! One-round and iterative programs, their validation, and extraction of
//! encode/merge/decode plans.
//!
//! A one-round program has components `g_i` that are either a record-axis
//! aggregation of a client-local expression or a federated-federated product
//! of two client-local expressions, and a shared-only decoder over the
//! component outputs. Its plan encodes each client's block into a fixed-size
//! state, merges states with per-component commutative monoids, and decodes.

use std::collections::BTreeMap;
use std::fmt;

use serde::Serialize;
use thiserror::Error;

use crate::ast::{is_client_local, is_shared_only, Context, Expr, FedType, TensorType};
use crate::eval::{eval_distributed, Environment, EvalError, Value};
use crate::extensions::Registry;
use crate::federated::{Federation, FederatedValue, FederationError};
use crate::signature::AggSchema;
use crate::tensor::{Shape, TensorValue};
use crate::typecheck::typecheck;

/// A component `g_i` of a one-round program.
#[derive(Clone, Debug, PartialEq)]
pub enum Component {
    /// `α_r(e)` for a client-local `e` whose record axis is `r`.
    Agg { encoder: Expr, schema: AggSchema },
    /// `MatMulFedFed(a, b)` for client-local `a : Fed_2((m))`, `b : Fed_1((n))`.
    Mat { left: Expr, right: Expr },
}

/// A one-round typed program over one federated input and optional shared
/// parameters (the current iterate, in iterative programs).
#[derive(Clone, Debug, PartialEq)]
pub struct OneRoundProgram {
    pub input: String,
    pub input_type: FedType,
    pub params: Vec<(String, Shape)>,
    /// Components, each bound to the decoder variable of the same name.
    pub components: Vec<(String, Component)>,
    pub decoder: Expr,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ViolationKind {
    NoComponents,
    DuplicateName,
    IllTyped,
    NotClientLocal,
    WrongForm,
    NotMergeable,
    DecoderNotSharedOnly,
    DecoderIllTyped,
    RoundState,
}

impl ViolationKind {
    pub fn name(self) -> &'static str {
        match self {
            ViolationKind::NoComponents => "no-components",
            ViolationKind::DuplicateName => "duplicate-name",
            ViolationKind::IllTyped => "ill-typed",
            ViolationKind::NotClientLocal => "not-client-local",
            ViolationKind::WrongForm => "wrong-form",
            ViolationKind::NotMergeable => "not-mergeable",
            ViolationKind::DecoderNotSharedOnly => "decoder-not-shared-only",
            ViolationKind::DecoderIllTyped => "decoder-ill-typed",
            ViolationKind::RoundState => "round-state",
        }
    }
}

impl fmt::Display for ViolationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ViolationKind::NoComponents => "no components",
            ViolationKind::DuplicateName => "duplicate name",
            ViolationKind::IllTyped => "ill-typed",
            ViolationKind::NotClientLocal => "not client-local",
            ViolationKind::WrongForm => "wrong form",
            ViolationKind::NotMergeable => "not mergeable",
            ViolationKind::DecoderNotSharedOnly => "decoder not shared-only",
            ViolationKind::DecoderIllTyped => "decoder ill-typed",
            ViolationKind::RoundState => "round state",
        })
    }
}

/// One reason a program is rejected. `component` is the 0-based component
/// index when the problem is local to a component; `round` is set for
/// iterative programs.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Violation {
    pub kind: ViolationKind,
    pub component: Option<usize>,
    pub round: Option<usize>,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if let Some(t) = self.round {
            write!(f, "round {t}: ")?;
        }
        if let Some(i) = self.component {
            write!(f, "component {i}: ")?;
        }
        write!(f, "{}: {}", self.kind, self.message)
    }
}

fn violation(kind: ViolationKind, component: Option<usize>, message: impl Into<String>) -> Violation {
    Violation {
        kind,
        component,
        round: None,
        message: message.into(),
    }
}

impl OneRoundProgram {
    /// Context of the encoders: the federated input and the parameters.
    pub fn encoder_context(&self) -> Context {
        let mut ctx = Context::new().with(self.input.clone(), TensorType::Fed(self.input_type.clone()));
        for (name, shape) in &self.params {
            ctx.insert(name.clone(), TensorType::Sh(shape.clone()));
        }
        ctx
    }

    /// `h(g_1, …, g_q)` as a single expression over the input and parameters.
    /// Aggregations whose encoder does not typecheck default to axis 1.
    pub fn assemble(&self, registry: &Registry) -> Expr {
        let ctx = self.encoder_context();
        let map: BTreeMap<String, Expr> = self
            .components
            .iter()
            .map(|(name, c)| {
                let g = match c {
                    Component::Agg { encoder, schema } => {
                        let axis = typecheck(&ctx, encoder, registry)
                            .ok()
                            .and_then(|t| t.as_fed().map(|f| f.record_axis))
                            .unwrap_or(1);
                        Expr::agg(*schema, axis, encoder.clone())
                    }
                    Component::Mat { left, right } => Expr::matmul_fed_fed(left.clone(), right.clone()),
                };
                (name.clone(), g)
            })
            .collect();
        self.decoder.substitute(&map)
    }
}

/// Output shapes of the components, or the violations found.
pub fn validate_one_round(p: &OneRoundProgram, registry: &Registry) -> Result<Vec<Shape>, Vec<Violation>> {
    let mut out = Vec::new();
    let mut shapes = Vec::new();
    if p.components.is_empty() {
        out.push(violation(ViolationKind::NoComponents, None, "a program needs at least one component"));
    }
    let mut seen = vec![p.input.clone()];
    seen.extend(p.params.iter().map(|(n, _)| n.clone()));
    for (i, (name, _)) in p.components.iter().enumerate() {
        if seen.contains(name) {
            out.push(violation(
                ViolationKind::DuplicateName,
                Some(i),
                format!("name `{name}` is already in use"),
            ));
        }
        seen.push(name.clone());
    }
    if !p.input_type.is_valid() {
        out.push(violation(
            ViolationKind::IllTyped,
            None,
            format!("input type {} is malformed", p.input_type),
        ));
        return Err(out);
    }
    let ctx = p.encoder_context();
    let client_local = |i: usize, e: &Expr, role: &str, out: &mut Vec<Violation>| -> Option<FedType> {
        match is_client_local(&ctx, e, registry) {
            Err(err) => {
                out.push(violation(ViolationKind::IllTyped, Some(i), format!("{role}: {err}")));
                None
            }
            Ok(report) if !report.ty.is_federated() => {
                out.push(violation(
                    ViolationKind::NotClientLocal,
                    Some(i),
                    format!("{role} has shared type {}", report.ty),
                ));
                None
            }
            Ok(report) if !report.exposures.is_empty() => {
                let at = report
                    .exposures
                    .iter()
                    .map(|p| crate::typecheck::ExprPath(p.clone()).to_string())
                    .collect::<Vec<_>>()
                    .join(", ");
                out.push(violation(
                    ViolationKind::NotClientLocal,
                    Some(i),
                    format!("{role} turns federated data into shared data at {at}"),
                ));
                None
            }
            Ok(report) => report.ty.as_fed().cloned(),
        }
    };
    for (i, (_, c)) in p.components.iter().enumerate() {
        match c {
            Component::Agg { encoder, schema } => {
                if !schema.is_mergeable() {
                    out.push(violation(
                        ViolationKind::NotMergeable,
                        Some(i),
                        format!("aggregation schema `{schema}` has no merge"),
                    ));
                }
                if let Some(t) = client_local(i, encoder, "encoder", &mut out) {
                    shapes.push(t.nonrecord);
                }
            }
            Component::Mat { left, right } => {
                let a = client_local(i, left, "left factor", &mut out);
                let b = client_local(i, right, "right factor", &mut out);
                if let (Some(a), Some(b)) = (a, b) {
                    match (a.record_axis, a.nonrecord.dims(), b.record_axis, b.nonrecord.dims()) {
                        (2, [m], 1, [n]) => shapes.push(Shape::from([*m, *n])),
                        _ => out.push(violation(
                            ViolationKind::WrongForm,
                            Some(i),
                            format!("product factors must be Fed_2((m)) and Fed_1((n)), got {a} and {b}"),
                        )),
                    }
                }
            }
        }
    }
    if out.is_empty() {
        let mut dctx = ctx.clone();
        for ((name, _), s) in p.components.iter().zip(&shapes) {
            dctx.insert(name.clone(), TensorType::Sh(s.clone()));
        }
        match typecheck(&dctx, &p.decoder, registry) {
            Err(err) => out.push(violation(ViolationKind::DecoderIllTyped, None, err.to_string())),
            Ok(_) => match is_shared_only(&dctx, &p.decoder) {
                Ok(true) => {}
                Ok(false) => out.push(violation(
                    ViolationKind::DecoderNotSharedOnly,
                    None,
                    format!("decoder reads the federated input `{}`", p.input),
                )),
                Err(err) => out.push(violation(ViolationKind::DecoderIllTyped, None, err.to_string())),
            },
        }
    }
    if out.is_empty() {
        Ok(shapes)
    } else {
        Err(out)
    }
}

/// The merge operation of one state component.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Merge {
    Sum,
    Min,
    Max,
    MatrixAdd,
}

impl Merge {
    pub fn from_schema(schema: AggSchema) -> Merge {
        match schema {
            AggSchema::Sum => Merge::Sum,
            AggSchema::Min => Merge::Min,
            AggSchema::Max => Merge::Max,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Merge::Sum => "sum",
            Merge::Min => "min",
            Merge::Max => "max",
            Merge::MatrixAdd => "matrix-add",
        }
    }

    pub fn identity_value(self) -> f64 {
        match self {
            Merge::Sum | Merge::MatrixAdd => 0.0,
            Merge::Min => f64::INFINITY,
            Merge::Max => f64::NEG_INFINITY,
        }
    }

    pub fn identity(self, shape: &Shape) -> TensorValue {
        TensorValue::filled(shape.clone(), self.identity_value())
    }

    pub fn is_additive(self) -> bool {
        matches!(self, Merge::Sum | Merge::MatrixAdd)
    }

    pub fn combine_scalar(self, a: f64, b: f64) -> f64 {
        match self {
            Merge::Sum | Merge::MatrixAdd => a + b,
            Merge::Min => a.min(b),
            Merge::Max => a.max(b),
        }
    }

    /// `a ⊕ b` on tensors of equal shape.
    pub fn combine(self, a: &TensorValue, b: &TensorValue) -> Result<TensorValue, PlanError> {
        if a.shape() != b.shape() {
            return Err(PlanError::StateShape {
                expected: a.shape().clone(),
                found: b.shape().clone(),
            });
        }
        let data = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| self.combine_scalar(x, y))
            .collect();
        Ok(TensorValue::new(a.shape().clone(), data).expect("same shape"))
    }
}

impl fmt::Display for Merge {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// How a client turns its local block into one state component.
#[derive(Clone, Debug, PartialEq)]
pub enum Encoder {
    /// Evaluate `expr` locally and aggregate along its record axis.
    Aggregate {
        expr: Expr,
        schema: AggSchema,
        record_axis: usize,
    },
    /// Evaluate both factors locally and multiply.
    Product { left: Expr, right: Expr },
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlanComponent {
    pub name: String,
    pub shape: Shape,
    pub merge: Merge,
    pub encoder: Encoder,
}

/// An element of the state space: one tensor per component.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedState(pub Vec<TensorValue>);

impl EncodedState {
    pub fn components(&self) -> &[TensorValue] {
        &self.0
    }

    pub fn element_count(&self) -> usize {
        self.0.iter().map(TensorValue::numel).sum()
    }

    pub fn bit_eq(&self, other: &EncodedState) -> bool {
        self.0.len() == other.0.len() && self.0.iter().zip(&other.0).all(|(a, b)| a.bit_eq(b))
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PlanError {
    #[error("invalid program: {}", join_violations(.0))]
    Invalid(Vec<Violation>),
    #[error("input has type {found}, the plan expects {expected}")]
    InputMismatch { expected: FedType, found: FedType },
    #[error("parameter `{name}`: {message}")]
    Param { name: String, message: String },
    #[error("state component has shape {found}, expected {expected}")]
    StateShape { expected: Shape, found: Shape },
    #[error("state has {found} components, the plan has {expected}")]
    StateArity { expected: usize, found: usize },
    #[error("client `{client}`, component {component}: {source}")]
    Encode {
        client: String,
        component: usize,
        #[source]
        source: EvalError,
    },
    #[error(transparent)]
    Federation(#[from] FederationError),
    #[error("decoder: {0}")]
    Decode(#[source] EvalError),
    #[error("round {round}: {source}")]
    Round {
        round: usize,
        #[source]
        source: Box<PlanError>,
    },
}

fn join_violations(v: &[Violation]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join("; ")
}

/// Shared parameter values by name.
pub type Params = BTreeMap<String, TensorValue>;

/// An extracted encode/merge/decode plan.
#[derive(Clone, Debug)]
pub struct SharedStatePlan {
    pub input: String,
    pub input_type: FedType,
    pub params: Vec<(String, Shape)>,
    pub components: Vec<PlanComponent>,
    pub decoder: Expr,
    registry: Registry,
}

/// Validates `p` and builds its plan.
pub fn extract_plan(p: &OneRoundProgram, registry: &Registry) -> Result<SharedStatePlan, PlanError> {
    let shapes = validate_one_round(p, registry).map_err(PlanError::Invalid)?;
    let ctx = p.encoder_context();
    let components = p
        .components
        .iter()
        .zip(shapes)
        .map(|((name, c), shape)| {
            let (merge, encoder) = match c {
                Component::Agg { encoder, schema } => {
                    let ty = typecheck(&ctx, encoder, registry).expect("validated");
                    let record_axis = ty.as_fed().expect("validated").record_axis;
                    (
                        Merge::from_schema(*schema),
                        Encoder::Aggregate {
                            expr: encoder.clone(),
                            schema: *schema,
                            record_axis,
                        },
                    )
                }
                Component::Mat { left, right } => (
                    Merge::MatrixAdd,
                    Encoder::Product {
                        left: left.clone(),
                        right: right.clone(),
                    },
                ),
            };
            PlanComponent {
                name: name.clone(),
                shape,
                merge,
                encoder,
            }
        })
        .collect();
    Ok(SharedStatePlan {
        input: p.input.clone(),
        input_type: p.input_type.clone(),
        params: p.params.clone(),
        components,
        decoder: p.decoder.clone(),
        registry: registry.clone(),
    })
}

/// Runs a parameter-free plan.
pub fn run_plan(plan: &SharedStatePlan, x: &FederatedValue) -> Result<TensorValue, PlanError> {
    plan.run(x, &Params::new())
}

impl SharedStatePlan {
    pub fn registry(&self) -> &Registry {
        &self.registry
    }

    pub fn state_shapes(&self) -> Vec<Shape> {
        self.components.iter().map(|c| c.shape.clone()).collect()
    }

    /// Number of reals in the state.
    pub fn state_elements(&self) -> usize {
        self.components.iter().map(|c| c.shape.numel()).sum()
    }

    /// Size of a serialized state in bytes.
    pub fn state_bytes(&self) -> usize {
        8 + self
            .components
            .iter()
            .map(|c| 4 + 4 * c.shape.rank() + 8 * c.shape.numel())
            .sum::<usize>()
    }

    /// `0_M`.
    pub fn identity_state(&self) -> EncodedState {
        EncodedState(self.components.iter().map(|c| c.merge.identity(&c.shape)).collect())
    }

    fn check_params(&self, params: &Params) -> Result<(), PlanError> {
        for (name, shape) in &self.params {
            let v = params.get(name).ok_or_else(|| PlanError::Param {
                name: name.clone(),
                message: "missing".into(),
            })?;
            if v.shape() != shape {
                return Err(PlanError::Param {
                    name: name.clone(),
                    message: format!("has shape {}, expected {shape}", v.shape()),
                });
            }
        }
        Ok(())
    }

    fn check_input(&self, x: &FederatedValue) -> Result<(), PlanError> {
        let found = FedType::new(x.record_axis(), x.nonrecord_shape().clone());
        if found != self.input_type {
            return Err(PlanError::InputMismatch {
                expected: self.input_type.clone(),
                found,
            });
        }
        Ok(())
    }

    /// `φ_n(Z)`: one client's message.
    pub fn encode(&self, client: &str, local: &TensorValue, params: &Params) -> Result<EncodedState, PlanError> {
        let fed = Federation::new([client])?;
        let x = FederatedValue::new(
            fed,
            self.input_type.record_axis,
            self.input_type.nonrecord.clone(),
            vec![local.clone()],
        )?;
        let mut env = Environment::new();
        env.bind_federated(self.input.clone(), x).expect("single federation");
        for (name, v) in params {
            env.bind_shared(name.clone(), v.clone());
        }
        let mut parts = Vec::with_capacity(self.components.len());
        for (i, c) in self.components.iter().enumerate() {
            let e = match &c.encoder {
                Encoder::Aggregate {
                    expr,
                    schema,
                    record_axis,
                } => Expr::agg(*schema, *record_axis, expr.clone()),
                Encoder::Product { left, right } => Expr::matmul_fed_fed(left.clone(), right.clone()),
            };
            let v = eval_distributed(&env, &e, &self.registry).map_err(|source| PlanError::Encode {
                client: client.to_string(),
                component: i,
                source,
            })?;
            match v {
                Value::Shared(t) => parts.push(t),
                Value::Federated(_) => unreachable!("record-eliminating components are shared"),
            }
        }
        Ok(EncodedState(parts))
    }

    /// Merges two states componentwise.
    pub fn merge_pair(&self, a: &EncodedState, b: &EncodedState) -> Result<EncodedState, PlanError> {
        self.check_state(a)?;
        self.check_state(b)?;
        let parts = self
            .components
            .iter()
            .zip(a.0.iter().zip(&b.0))
            .map(|(c, (x, y))| c.merge.combine(x, y))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(EncodedState(parts))
    }

    /// Folds client messages in the given order, starting from the first.
    pub fn merge_all(&self, messages: &[EncodedState]) -> Result<EncodedState, PlanError> {
        let Some((first, rest)) = messages.split_first() else {
            return Ok(self.identity_state());
        };
        self.check_state(first)?;
        rest.iter().try_fold(first.clone(), |acc, m| self.merge_pair(&acc, m))
    }

    pub fn check_state(&self, s: &EncodedState) -> Result<(), PlanError> {
        if s.0.len() != self.components.len() {
            return Err(PlanError::StateArity {
                expected: self.components.len(),
                found: s.0.len(),
            });
        }
        for (c, t) in self.components.iter().zip(&s.0) {
            if t.shape() != &c.shape {
                return Err(PlanError::StateShape {
                    expected: c.shape.clone(),
                    found: t.shape().clone(),
                });
            }
        }
        Ok(())
    }

    /// `ψ`.
    pub fn decode(&self, state: &EncodedState, params: &Params) -> Result<TensorValue, PlanError> {
        self.check_state(state)?;
        let mut env = Environment::new();
        for (c, t) in self.components.iter().zip(&state.0) {
            env.bind_shared(c.name.clone(), t.clone());
        }
        for (name, v) in params {
            env.bind_shared(name.clone(), v.clone());
        }
        match eval_distributed(&env, &self.decoder, &self.registry).map_err(PlanError::Decode)? {
            Value::Shared(t) => Ok(t),
            Value::Federated(_) => unreachable!("decoders are shared-only"),
        }
    }

    /// All clients' messages, in federation order.
    pub fn encode_all(&self, x: &FederatedValue, params: &Params) -> Result<Vec<EncodedState>, PlanError> {
        self.check_input(x)?;
        self.check_params(params)?;
        x.federation()
            .clients()
            .iter()
            .zip(x.locals())
            .map(|(c, local)| self.encode(c, local, params))
            .collect()
    }

    /// Encode, merge and decode; returns the output and the merged state.
    pub fn run_traced(&self, x: &FederatedValue, params: &Params) -> Result<(TensorValue, EncodedState), PlanError> {
        let messages = self.encode_all(x, params)?;
        let merged = self.merge_all(&messages)?;
        let out = self.decode(&merged, params)?;
        Ok((out, merged))
    }

    pub fn run(&self, x: &FederatedValue, params: &Params) -> Result<TensorValue, PlanError> {
        self.run_traced(x, params).map(|(out, _)| out)
    }

    /// Re-expresses the plan as a one-round program.
    pub fn to_program(&self) -> OneRoundProgram {
        OneRoundProgram {
            input: self.input.clone(),
            input_type: self.input_type.clone(),
            params: self.params.clone(),
            components: self
                .components
                .iter()
                .map(|c| {
                    let comp = match &c.encoder {
                        Encoder::Aggregate { expr, schema, .. } => Component::Agg {
                            encoder: expr.clone(),
                            schema: *schema,
                        },
                        Encoder::Product { left, right } => Component::Mat {
                            left: left.clone(),
                            right: right.clone(),
                        },
                    };
                    (c.name.clone(), comp)
                })
                .collect(),
            decoder: self.decoder.clone(),
        }
    }
}

/// An iterative program: rounds of one-round programs whose only parameter is
/// the shared iterate `θ`, and whose decoders produce the next iterate.
#[derive(Clone, Debug, PartialEq)]
pub struct IterativeProgram {
    pub theta_name: String,
    pub theta0: TensorValue,
    pub rounds: Vec<OneRoundProgram>,
}

impl IterativeProgram {
    pub fn len(&self) -> usize {
        self.rounds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rounds.is_empty()
    }
}

/// Checks every round, that `θ` is the only value crossing round boundaries,
/// and that consecutive iterate shapes line up. Returns `𝛕_0, …, 𝛕_T`.
pub fn validate_iterative(p: &IterativeProgram, registry: &Registry) -> Result<Vec<Shape>, Vec<Violation>> {
    let mut out = Vec::new();
    let mut shapes = vec![p.theta0.shape().clone()];
    let mut input: Option<(&String, &FedType)> = None;
    for (t, round) in p.rounds.iter().enumerate() {
        let tag = |mut v: Violation| {
            v.round = Some(t);
            v
        };
        let current = shapes.last().cloned().expect("nonempty");
        match input {
            None => input = Some((&round.input, &round.input_type)),
            Some((name, ty)) if *name != round.input || *ty != round.input_type => {
                out.push(tag(violation(
                    ViolationKind::RoundState,
                    None,
                    "every round must read the same federated input",
                )));
            }
            Some(_) => {}
        }
        let params_ok = round.params.len() == 1 && round.params[0].0 == p.theta_name;
        if !params_ok {
            out.push(tag(violation(
                ViolationKind::RoundState,
                None,
                format!("the only shared parameter of a round must be `{}`", p.theta_name),
            )));
            break;
        }
        if round.params[0].1 != current {
            out.push(tag(violation(
                ViolationKind::RoundState,
                None,
                format!("round expects `{}` of shape {}, previous round produced {current}", p.theta_name, round.params[0].1),
            )));
            break;
        }
        match validate_one_round(round, registry) {
            Err(vs) => {
                out.extend(vs.into_iter().map(tag));
                break;
            }
            Ok(comp_shapes) => {
                let mut dctx = Context::new().with(p.theta_name.clone(), TensorType::Sh(current.clone()));
                for ((name, _), s) in round.components.iter().zip(comp_shapes) {
                    dctx.insert(name.clone(), TensorType::Sh(s));
                }
                match typecheck(&dctx, &round.decoder, registry) {
                    Ok(TensorType::Sh(next)) => shapes.push(next),
                    Ok(other) => {
                        out.push(tag(violation(
                            ViolationKind::DecoderIllTyped,
                            None,
                            format!("decoder produces {other}"),
                        )));
                        break;
                    }
                    Err(err) => {
                        out.push(tag(violation(ViolationKind::DecoderIllTyped, None, err.to_string())));
                        break;
                    }
                }
            }
        }
    }
    if out.is_empty() {
        Ok(shapes)
    } else {
        Err(out)
    }
}

/// What happened in one round.
#[derive(Clone, Debug, PartialEq)]
pub struct RoundTrace {
    pub round: usize,
    pub theta_in: TensorValue,
    pub merged: EncodedState,
    pub theta_out: TensorValue,
    /// Whether the plan of the previous round was reused.
    pub plan_reused: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct IterativeRun {
    pub theta: TensorValue,
    pub trace: Vec<RoundTrace>,
}

/// Runs all rounds through their plans.
pub fn run_iterative(p: &IterativeProgram, x: &FederatedValue, registry: &Registry) -> Result<IterativeRun, PlanError> {
    run_iterative_with(p, x, registry, |_, plan, x, params| plan.run_traced(x, params))
}

/// Like [`run_iterative`] with a custom round executor (for simulated
/// transports or privatized plans). The executor returns the next iterate and
/// the merged state.
pub fn run_iterative_with<F>(
    p: &IterativeProgram,
    x: &FederatedValue,
    registry: &Registry,
    mut exec: F,
) -> Result<IterativeRun, PlanError>
where
    F: FnMut(usize, &SharedStatePlan, &FederatedValue, &Params) -> Result<(TensorValue, EncodedState), PlanError>,
{
    validate_iterative(p, registry).map_err(PlanError::Invalid)?;
    let mut theta = p.theta0.clone();
    let mut trace = Vec::with_capacity(p.rounds.len());
    let mut cached: Option<(&OneRoundProgram, SharedStatePlan)> = None;
    for (t, round) in p.rounds.iter().enumerate() {
        let reuse = cached.as_ref().is_some_and(|(prev, _)| *prev == round);
        if !reuse {
            let plan = extract_plan(round, registry).map_err(|e| PlanError::Round {
                round: t,
                source: Box::new(e),
            })?;
            cached = Some((round, plan));
        }
        let plan = &cached.as_ref().expect("set above").1;
        let params: Params = [(p.theta_name.clone(), theta.clone())].into();
        let (next, merged) = exec(t, plan, x, &params).map_err(|e| PlanError::Round {
            round: t,
            source: Box::new(e),
        })?;
        trace.push(RoundTrace {
            round: t,
            theta_in: theta,
            merged,
            theta_out: next.clone(),
            plan_reused: reuse,
        });
        theta = next;
    }
    Ok(IterativeRun { theta, trace })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::eval_centralized;
    use crate::tensor::Permutation;

    fn reg() -> Registry {
        Registry::default()
    }

    fn scalar_records(parts: &[&[f64]]) -> FederatedValue {
        let fed = Federation::numbered(parts.len()).unwrap();
        let locals = parts.iter().map(|p| TensorValue::vector(p.to_vec())).collect();
        FederatedValue::new(fed, 1, Shape::scalar(), locals).unwrap()
    }

    fn mean_program() -> OneRoundProgram {
        OneRoundProgram {
            input: "x".into(),
            input_type: FedType::new(1, []),
            params: vec![],
            components: vec![
                (
                    "s".into(),
                    Component::Agg {
                        encoder: Expr::var("x"),
                        schema: AggSchema::Sum,
                    },
                ),
                (
                    "n".into(),
                    Component::Agg {
                        encoder: Expr::binary(crate::signature::BinaryOp::Pow, Expr::var("x"), Expr::scalar(0.0)),
                        schema: AggSchema::Sum,
                    },
                ),
            ],
            decoder: Expr::div(Expr::var("s"), Expr::var("n")),
        }
    }

    #[test]
    fn sum_plan_shape() {
        let p = OneRoundProgram {
            input: "x".into(),
            input_type: FedType::new(1, []),
            params: vec![],
            components: vec![(
                "y".into(),
                Component::Agg {
                    encoder: Expr::var("x"),
                    schema: AggSchema::Sum,
                },
            )],
            decoder: Expr::var("y"),
        };
        let plan = extract_plan(&p, &reg()).unwrap();
        assert_eq!(plan.state_shapes(), vec![Shape::scalar()]);
        assert_eq!(plan.components[0].merge, Merge::Sum);
        assert_eq!(plan.identity_state().0[0].as_scalar(), Some(0.0));
        assert_eq!(plan.state_bytes(), 20);
    }

    #[test]
    fn mean_plan_runs() {
        let plan = extract_plan(&mean_program(), &reg()).unwrap();
        let x = scalar_records(&[&[1.0, 2.0], &[3.0]]);
        assert_eq!(run_plan(&plan, &x).unwrap().as_scalar(), Some(2.0));
        let one = scalar_records(&[&[4.0, 8.0]]);
        assert_eq!(run_plan(&plan, &one).unwrap().as_scalar(), Some(6.0));
        assert_eq!(plan.state_elements(), 2);
    }

    #[test]
    fn gram_plan_matches_dense_product() {
        let p = OneRoundProgram {
            input: "x".into(),
            input_type: FedType::new(1, [2]),
            params: vec![],
            components: vec![(
                "g".into(),
                Component::Mat {
                    left: Expr::perm(Permutation::swap(2, 1, 2).unwrap(), Expr::var("x")),
                    right: Expr::var("x"),
                },
            )],
            decoder: Expr::var("g"),
        };
        let plan = extract_plan(&p, &reg()).unwrap();
        assert_eq!(plan.components[0].merge, Merge::MatrixAdd);
        assert_eq!(plan.state_shapes(), vec![Shape::from([2, 2])]);
        let fed = Federation::numbered(2).unwrap();
        let x = FederatedValue::new(
            fed,
            1,
            [2].into(),
            vec![
                TensorValue::matrix(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap(),
                TensorValue::matrix(&[vec![5.0, 6.0]]).unwrap(),
            ],
        )
        .unwrap();
        let g = x.virtual_global();
        let want = g.permute(&Permutation::swap(2, 1, 2).unwrap()).unwrap().matmul(&g).unwrap();
        assert_eq!(run_plan(&plan, &x).unwrap(), want);
    }

    #[test]
    fn violations_are_reported_per_component() {
        let mut p = mean_program();
        p.components[1].1 = Component::Agg {
            encoder: Expr::sub(Expr::var("x"), Expr::sum(1, Expr::var("x"))),
            schema: AggSchema::Sum,
        };
        let v = validate_one_round(&p, &reg()).unwrap_err();
        assert_eq!(v[0].kind, ViolationKind::NotClientLocal);
        assert_eq!(v[0].component, Some(1));

        let mut p = mean_program();
        p.decoder = Expr::add(Expr::var("s"), Expr::sum(1, Expr::var("x")));
        let v = validate_one_round(&p, &reg()).unwrap_err();
        assert_eq!(v[0].kind, ViolationKind::DecoderNotSharedOnly);

        let mut p = mean_program();
        p.components.clear();
        assert_eq!(validate_one_round(&p, &reg()).unwrap_err()[0].kind, ViolationKind::NoComponents);
    }

    #[test]
    fn assembled_program_agrees_with_plan() {
        let p = mean_program();
        let plan = extract_plan(&p, &reg()).unwrap();
        let x = scalar_records(&[&[1.5, 2.0], &[], &[3.25, -1.0, 0.5]]);
        let mut env = Environment::new();
        env.bind_federated("x", x.clone()).unwrap();
        let direct = eval_distributed(&env, &p.assemble(&reg()), &reg()).unwrap();
        let central = eval_centralized(&env, &p.assemble(&reg()), &reg()).unwrap();
        let via_plan = run_plan(&plan, &x).unwrap();
        assert_eq!(Value::Shared(via_plan.clone()), direct);
        assert!((via_plan.data()[0] - central.value.data()[0]).abs() < 1e-12);
        assert_eq!(plan.to_program(), p);
    }

    #[test]
    fn iterative_fixed_point_and_cache() {
        let round = OneRoundProgram {
            input: "x".into(),
            input_type: FedType::new(1, []),
            params: vec![("theta".into(), Shape::scalar())],
            components: vec![(
                "y".into(),
                Component::Agg {
                    encoder: Expr::var("x"),
                    schema: AggSchema::Sum,
                },
            )],
            decoder: Expr::var("theta"),
        };
        let p = IterativeProgram {
            theta_name: "theta".into(),
            theta0: TensorValue::scalar(3.0),
            rounds: vec![round; 4],
        };
        let x = scalar_records(&[&[1.0], &[2.0]]);
        let run = run_iterative(&p, &x, &reg()).unwrap();
        assert_eq!(run.theta.as_scalar(), Some(3.0));
        assert_eq!(run.trace.len(), 4);
        assert!(!run.trace[0].plan_reused);
        assert!(run.trace[1..].iter().all(|r| r.plan_reused));
        assert_eq!(run.trace[2].merged.0[0].as_scalar(), Some(3.0));
    }

    #[test]
    fn iterative_rejects_extra_state() {
        let round = OneRoundProgram {
            input: "x".into(),
            input_type: FedType::new(1, []),
            params: vec![("theta".into(), Shape::scalar()), ("extra".into(), Shape::scalar())],
            components: vec![(
                "y".into(),
                Component::Agg {
                    encoder: Expr::var("x"),
                    schema: AggSchema::Sum,
                },
            )],
            decoder: Expr::var("theta"),
        };
        let p = IterativeProgram {
            theta_name: "theta".into(),
            theta0: TensorValue::scalar(0.0),
            rounds: vec![round],
        };
        let v = validate_iterative(&p, &reg()).unwrap_err();
        assert_eq!(v[0].kind, ViolationKind::RoundState);
        assert_eq!(v[0].round, Some(0));
    }
}
