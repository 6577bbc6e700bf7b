//! Distributed and centralized evaluation, and the consistency check between
//! them.
//!
//! Distributed evaluation works client by client: elementwise maps, non-record
//! aggregations, permutations and the mixed matrix products run on each local
//! tensor, while record-axis aggregation and the federated-federated product
//! produce one shared value per client that is then merged in federation
//! order. Centralized evaluation replaces every federated input by its virtual
//! global tensor and applies the ordinary operations.

use std::collections::BTreeMap;

use serde::Serialize;
use thiserror::Error;

use crate::ast::{Context, Expr, FedType, Primitive, TensorType};
use crate::extensions::{ExtKind, ExtPrimitive, LocalCall, Registry};
use crate::federated::{ClientId, Federation, FederatedValue, FederationError};
use crate::signature::AggSchema;
use crate::tensor::{TensorError, TensorValue};
use crate::typecheck::{delete_axis, permute_type, typecheck, TypeError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error(transparent)]
    Type(#[from] TypeError),
    #[error("client `{client}`: {operand}: {message}")]
    Client {
        client: ClientId,
        operand: String,
        message: String,
    },
    #[error("`{name}`: {message}")]
    Extension { name: String, message: String },
    #[error("federated input `{0}` is over a different federation")]
    FederationMismatch(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Federation(#[from] FederationError),
}

/// A runtime value: one shared tensor, or a federated family.
#[derive(Clone, Debug, PartialEq)]
pub enum Value {
    Shared(TensorValue),
    Federated(FederatedValue),
}

impl Value {
    pub fn type_of(&self) -> TensorType {
        match self {
            Value::Shared(t) => TensorType::Sh(t.shape().clone()),
            Value::Federated(x) => {
                TensorType::Fed(FedType::new(x.record_axis(), x.nonrecord_shape().clone()))
            }
        }
    }

    pub fn is_federated(&self) -> bool {
        matches!(self, Value::Federated(_))
    }

    pub fn as_shared(&self) -> Option<&TensorValue> {
        match self {
            Value::Shared(t) => Some(t),
            Value::Federated(_) => None,
        }
    }

    pub fn as_federated(&self) -> Option<&FederatedValue> {
        match self {
            Value::Federated(x) => Some(x),
            Value::Shared(_) => None,
        }
    }

    /// The shared tensor itself, or the virtual global tensor.
    pub fn to_global(&self) -> TensorValue {
        match self {
            Value::Shared(t) => t.clone(),
            Value::Federated(x) => x.virtual_global(),
        }
    }

    /// Bit-level equality (see [`TensorValue::bit_eq`]).
    pub fn bit_eq(&self, other: &Value) -> bool {
        match (self, other) {
            (Value::Shared(a), Value::Shared(b)) => a.bit_eq(b),
            (Value::Federated(a), Value::Federated(b)) => {
                a.federation() == b.federation()
                    && a.record_axis() == b.record_axis()
                    && a.locals().len() == b.locals().len()
                    && a.locals().iter().zip(b.locals()).all(|(x, y)| x.bit_eq(y))
            }
            _ => false,
        }
    }
}

/// Input bindings. All federated inputs must live on the same federation.
#[derive(Clone, Debug, Default)]
pub struct Environment {
    federation: Option<Federation>,
    bindings: BTreeMap<String, Value>,
}

impl Environment {
    pub fn new() -> Self {
        Environment::default()
    }

    pub fn bind_shared(&mut self, name: impl Into<String>, value: TensorValue) {
        self.bindings.insert(name.into(), Value::Shared(value));
    }

    pub fn bind_federated(
        &mut self,
        name: impl Into<String>,
        value: FederatedValue,
    ) -> Result<(), EvalError> {
        let name = name.into();
        match &self.federation {
            Some(f) if f != value.federation() => return Err(EvalError::FederationMismatch(name)),
            Some(_) => {}
            None => self.federation = Some(value.federation().clone()),
        }
        self.bindings.insert(name, Value::Federated(value));
        Ok(())
    }

    pub fn bind(&mut self, name: impl Into<String>, value: Value) -> Result<(), EvalError> {
        match value {
            Value::Shared(t) => {
                self.bind_shared(name, t);
                Ok(())
            }
            Value::Federated(x) => self.bind_federated(name, x),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Value> {
        self.bindings.get(name)
    }

    pub fn federation(&self) -> Option<&Federation> {
        self.federation.as_ref()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Value)> {
        self.bindings.iter()
    }

    /// The typing context the bindings conform to.
    pub fn context(&self) -> Context {
        self.bindings
            .iter()
            .map(|(k, v)| (k.clone(), v.type_of()))
            .collect()
    }
}

/// Distributed evaluation. The expression is typechecked against the
/// environment first.
pub fn eval_distributed(env: &Environment, e: &Expr, registry: &Registry) -> Result<Value, EvalError> {
    typecheck(&env.context(), e, registry)?;
    Distributed { env, registry }.eval(e)
}

/// Result of centralized evaluation: the ordinary value plus the kind the
/// expression has in the type system.
#[derive(Clone, Debug, PartialEq)]
pub struct CentralValue {
    pub value: TensorValue,
    pub ty: TensorType,
}

/// Centralized reference evaluation on virtual global tensors.
pub fn eval_centralized(
    env: &Environment,
    e: &Expr,
    registry: &Registry,
) -> Result<CentralValue, EvalError> {
    let ty = typecheck(&env.context(), e, registry)?;
    let globals: BTreeMap<&str, TensorValue> = env
        .bindings
        .iter()
        .map(|(k, v)| (k.as_str(), v.to_global()))
        .collect();
    let value = central(&globals, e, registry)?;
    Ok(CentralValue { value, ty })
}

/// Elementwise comparison of two tensors of (hopefully) equal shape.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Deviation {
    pub shape_match: bool,
    pub max_abs: f64,
    /// `max_abs / max(1, ‖reference‖∞)`.
    pub relative: f64,
    pub nan_mismatch: bool,
}

impl Deviation {
    pub fn within(&self, tol: f64) -> bool {
        self.shape_match && !self.nan_mismatch && self.relative <= tol
    }

    pub fn is_exact(&self) -> bool {
        self.within(0.0)
    }
}

pub fn deviation(actual: &TensorValue, reference: &TensorValue) -> Deviation {
    if actual.shape() != reference.shape() {
        return Deviation {
            shape_match: false,
            max_abs: f64::INFINITY,
            relative: f64::INFINITY,
            nan_mismatch: false,
        };
    }
    let mut max_abs: f64 = 0.0;
    let mut nan_mismatch = false;
    let mut scale: f64 = 1.0;
    for (&a, &b) in actual.data().iter().zip(reference.data()) {
        if b.is_finite() {
            scale = scale.max(b.abs());
        }
        if a.is_nan() || b.is_nan() {
            nan_mismatch |= a.is_nan() != b.is_nan();
        } else if a != b {
            max_abs = max_abs.max((a - b).abs());
        }
    }
    Deviation {
        shape_match: true,
        max_abs,
        relative: max_abs / scale,
        nan_mismatch,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConsistencyReport {
    #[serde(serialize_with = "crate::format::serialize_type")]
    pub ty: TensorType,
    #[serde(skip)]
    pub distributed: TensorValue,
    #[serde(skip)]
    pub centralized: TensorValue,
    pub max_abs: f64,
    pub relative: f64,
    pub nan_mismatch: bool,
    pub tol: f64,
    pub passed: bool,
}

/// Runs both semantics and compares the (virtual global of the) distributed
/// result with the centralized one.
pub fn check_consistency(
    env: &Environment,
    e: &Expr,
    registry: &Registry,
    tol: f64,
) -> Result<ConsistencyReport, EvalError> {
    let dist = eval_distributed(env, e, registry)?;
    let cent = eval_centralized(env, e, registry)?;
    let distributed = dist.to_global();
    let dev = deviation(&distributed, &cent.value);
    Ok(ConsistencyReport {
        ty: cent.ty,
        distributed,
        centralized: cent.value,
        max_abs: dev.max_abs,
        relative: dev.relative,
        nan_mismatch: dev.nan_mismatch,
        tol,
        passed: dev.within(tol),
    })
}

/// Merges per-client shared contributions in federation order, starting from
/// the first client's value.
fn merge_in_order(
    parts: Vec<TensorValue>,
    merge: impl Fn(f64, f64) -> f64,
) -> Result<TensorValue, TensorError> {
    let mut iter = parts.into_iter();
    let first = iter.next().expect("federations are nonempty");
    iter.try_fold(first, |acc, next| acc.zip_broadcast(&next, &merge))
}

struct Distributed<'a> {
    env: &'a Environment,
    registry: &'a Registry,
}

impl Distributed<'_> {
    fn eval(&self, e: &Expr) -> Result<Value, EvalError> {
        match e {
            Expr::Var(name) => Ok(self
                .env
                .get(name)
                .cloned()
                .expect("typechecked variables are bound")),
            Expr::Apply { prim, args } => {
                let vals = args
                    .iter()
                    .map(|a| self.eval(a))
                    .collect::<Result<Vec<_>, _>>()?;
                self.apply(prim, vals)
            }
        }
    }

    fn apply(&self, prim: &Primitive, mut vals: Vec<Value>) -> Result<Value, EvalError> {
        use Value::{Federated as F, Shared as S};
        match prim {
            Primitive::Literal(v) => Ok(S(v.clone())),
            Primitive::Unary(op) => Ok(match &vals[0] {
                S(t) => S(t.map(|x| op.apply(x))),
                F(x) => F(map_locals(x, x.record_axis(), x.nonrecord_shape().clone(), |_, t| {
                    Ok(t.map(|v| op.apply(v)))
                })?),
            }),
            Primitive::Binary(_) | Primitive::Compare(_) => {
                let f = |a: f64, b: f64| match prim {
                    Primitive::Binary(op) => op.apply(a, b),
                    Primitive::Compare(op) => op.apply(a, b),
                    _ => unreachable!(),
                };
                let right = vals.pop().expect("binary");
                let left = vals.pop().expect("binary");
                Ok(match (&left, &right) {
                    (S(a), S(b)) => S(a.zip_broadcast(b, f)?),
                    (F(a), F(b)) => {
                        let fed = a.federation();
                        F(map_locals(a, a.record_axis(), a.nonrecord_shape().clone(), |c, la| {
                            let lb = b.local(c);
                            if la.shape() != lb.shape() {
                                return Err(EvalError::Client {
                                    client: fed.clients()[c].clone(),
                                    operand: "right operand".into(),
                                    message: format!(
                                        "local shape {} differs from left operand shape {}",
                                        lb.shape(),
                                        la.shape()
                                    ),
                                });
                            }
                            Ok(la.zip_broadcast(lb, f)?)
                        })?)
                    }
                    (F(a), S(s)) => F(map_locals(a, a.record_axis(), a.nonrecord_shape().clone(), |_, la| {
                        Ok(la.zip_broadcast(s, f)?)
                    })?),
                    (S(s), F(b)) => F(map_locals(b, b.record_axis(), b.nonrecord_shape().clone(), |_, lb| {
                        Ok(s.zip_broadcast(lb, f)?)
                    })?),
                })
            }
            Primitive::Agg { schema, axis } => {
                let reduce = |t: &TensorValue| t.reduce_axis(*axis, |lane| schema.reduce(lane));
                Ok(match &vals[0] {
                    S(t) => S(reduce(t)?),
                    F(x) if *axis == x.record_axis() => {
                        let parts = x.locals().iter().map(reduce).collect::<Result<Vec<_>, _>>()?;
                        let s = *schema;
                        S(merge_in_order(parts, move |a, b| AggSchema::merge(s, a, b))?)
                    }
                    F(x) => {
                        let t = delete_axis(&fed_type(x), *axis)?;
                        F(map_locals(x, t.record_axis, t.nonrecord, |_, l| Ok(reduce(l)?))?)
                    }
                })
            }
            Primitive::Perm(tau) => Ok(match &vals[0] {
                S(t) => S(t.permute(tau)?),
                F(x) => {
                    let t = permute_type(&fed_type(x), tau)?;
                    F(map_locals(x, t.record_axis, t.nonrecord, |_, l| Ok(l.permute(tau)?))?)
                }
            }),
            Primitive::MatMulFedSh => {
                let (F(x), S(w)) = (&vals[0], &vals[1]) else { unreachable!("typechecked") };
                let q = w.shape().dims()[1];
                Ok(F(map_locals(x, 1, [q].into(), |_, l| Ok(l.matmul(w)?))?))
            }
            Primitive::MatMulShFed => {
                let (S(w), F(x)) = (&vals[0], &vals[1]) else { unreachable!("typechecked") };
                let q = w.shape().dims()[0];
                Ok(F(map_locals(x, 2, [q].into(), |_, l| Ok(w.matmul(l)?))?))
            }
            Primitive::MatMulFedFed => {
                let (F(x), F(z)) = (&vals[0], &vals[1]) else { unreachable!("typechecked") };
                let mut parts = Vec::with_capacity(x.locals().len());
                for (c, (a, b)) in x.locals().iter().zip(z.locals()).enumerate() {
                    let (na, nb) = (a.shape().dims()[1], b.shape().dims()[0]);
                    if na != nb {
                        return Err(EvalError::Client {
                            client: x.federation().clients()[c].clone(),
                            operand: "right operand".into(),
                            message: format!("{nb} local records do not match {na} in the left operand"),
                        });
                    }
                    parts.push(a.matmul(b)?);
                }
                Ok(S(merge_in_order(parts, |a, b| a + b)?))
            }
            Primitive::Ext(name) => {
                let ext = self.registry.get(name).expect("typechecked extensions exist");
                self.apply_ext(ext, &vals)
            }
        }
    }

    fn apply_ext(&self, ext: &ExtPrimitive, vals: &[Value]) -> Result<Value, EvalError> {
        let ext_err = |message: String| EvalError::Extension {
            name: ext.name().to_string(),
            message,
        };
        let types: Vec<TensorType> = vals.iter().map(Value::type_of).collect();
        let out_ty = ext.type_rule(&types).map_err(ext_err)?;
        let fed = vals.iter().find_map(Value::as_federated).map(|x| x.federation().clone());
        let Some(fed) = fed else {
            let args: Vec<TensorValue> = vals.iter().map(Value::to_global).collect();
            let out = ext
                .apply_local(&LocalCall {
                    client: None,
                    client_index: None,
                    args: &args,
                })
                .map_err(ext_err)?;
            return Ok(Value::Shared(out));
        };
        debug_assert_eq!(ext.kind(), ExtKind::ClientLocal);
        let TensorType::Fed(out_ty) = out_ty else {
            return Err(ext_err("federated arguments produced a shared type".into()));
        };
        let mut locals = Vec::with_capacity(fed.len());
        for (c, client) in fed.clients().iter().enumerate() {
            let args: Vec<TensorValue> = vals
                .iter()
                .map(|v| match v {
                    Value::Shared(t) => t.clone(),
                    Value::Federated(x) => x.local(c).clone(),
                })
                .collect();
            let out = ext
                .apply_local(&LocalCall {
                    client: Some(client),
                    client_index: Some(c),
                    args: &args,
                })
                .map_err(|message| EvalError::Client {
                    client: client.clone(),
                    operand: ext.name().to_string(),
                    message,
                })?;
            locals.push(out);
        }
        Ok(Value::Federated(FederatedValue::new(
            fed,
            out_ty.record_axis,
            out_ty.nonrecord,
            locals,
        )?))
    }
}

fn fed_type(x: &FederatedValue) -> FedType {
    FedType::new(x.record_axis(), x.nonrecord_shape().clone())
}

fn map_locals(
    x: &FederatedValue,
    record_axis: usize,
    nonrecord: crate::tensor::Shape,
    f: impl Fn(usize, &TensorValue) -> Result<TensorValue, EvalError>,
) -> Result<FederatedValue, EvalError> {
    let locals = x
        .locals()
        .iter()
        .enumerate()
        .map(|(c, l)| f(c, l))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(FederatedValue::new(
        x.federation().clone(),
        record_axis,
        nonrecord,
        locals,
    )?)
}

fn central(
    globals: &BTreeMap<&str, TensorValue>,
    e: &Expr,
    registry: &Registry,
) -> Result<TensorValue, EvalError> {
    let (prim, args) = match e {
        Expr::Var(name) => {
            return Ok(globals
                .get(name.as_str())
                .cloned()
                .expect("typechecked variables are bound"))
        }
        Expr::Apply { prim, args } => (prim, args),
    };
    let vals = args
        .iter()
        .map(|a| central(globals, a, registry))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(match prim {
        Primitive::Literal(v) => v.clone(),
        Primitive::Unary(op) => vals[0].map(|x| op.apply(x)),
        Primitive::Binary(op) => vals[0].zip_broadcast(&vals[1], |a, b| op.apply(a, b))?,
        Primitive::Compare(op) => vals[0].zip_broadcast(&vals[1], |a, b| op.apply(a, b))?,
        Primitive::Agg { schema, axis } => vals[0].reduce_axis(*axis, |lane| schema.reduce(lane))?,
        Primitive::Perm(tau) => vals[0].permute(tau)?,
        Primitive::MatMulFedSh | Primitive::MatMulShFed | Primitive::MatMulFedFed => {
            vals[0].matmul(&vals[1])?
        }
        Primitive::Ext(name) => {
            let ext = registry.get(name).expect("typechecked extensions exist");
            ext.apply_ordinary(&vals).map_err(|message| EvalError::Extension {
                name: name.clone(),
                message,
            })?
        }
    })
}
