//! Tensor types, typing contexts and expression trees, plus the two syntactic
//! classifiers (client-local and shared-only).

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use crate::extensions::Registry;
use crate::signature::{AggSchema, BinaryOp, CompareOp, UnaryOp};
use crate::tensor::{Permutation, Shape, TensorValue};
use crate::typecheck::{typecheck_traced, NodeRole, TypeError, TypeErrorKind};

/// `Fed_r(d)`: record axis `r` (1-based) and common non-record shape `d`.
#[derive(Clone, PartialEq, Eq, Hash, Debug)]
pub struct FedType {
    pub record_axis: usize,
    pub nonrecord: Shape,
}

impl FedType {
    pub fn new(record_axis: usize, nonrecord: impl Into<Shape>) -> Self {
        FedType {
            record_axis,
            nonrecord: nonrecord.into(),
        }
    }

    /// Rank of the local tensors, `|d| + 1`.
    pub fn rank(&self) -> usize {
        self.nonrecord.rank() + 1
    }

    pub fn is_valid(&self) -> bool {
        self.record_axis >= 1 && self.record_axis <= self.rank() && self.nonrecord.is_positive()
    }
}

impl fmt::Display for FedType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Fed_{}({})", self.record_axis, self.nonrecord)
    }
}

/// A tensor type: shared `Sh(s)` or federated `Fed_r(d)`.
#[derive(Clone, PartialEq, Eq, Hash, Debug)]
pub enum TensorType {
    Sh(Shape),
    Fed(FedType),
}

impl TensorType {
    pub fn sh(shape: impl Into<Shape>) -> Self {
        TensorType::Sh(shape.into())
    }

    pub fn fed(record_axis: usize, nonrecord: impl Into<Shape>) -> Self {
        TensorType::Fed(FedType::new(record_axis, nonrecord))
    }

    pub fn is_federated(&self) -> bool {
        matches!(self, TensorType::Fed(_))
    }

    pub fn is_shared(&self) -> bool {
        matches!(self, TensorType::Sh(_))
    }

    pub fn as_fed(&self) -> Option<&FedType> {
        match self {
            TensorType::Fed(t) => Some(t),
            TensorType::Sh(_) => None,
        }
    }

    pub fn as_shared(&self) -> Option<&Shape> {
        match self {
            TensorType::Sh(s) => Some(s),
            TensorType::Fed(_) => None,
        }
    }

    /// Rank of the values of this type (local rank for federated types).
    pub fn rank(&self) -> usize {
        match self {
            TensorType::Sh(s) => s.rank(),
            TensorType::Fed(t) => t.rank(),
        }
    }

    pub fn is_valid(&self) -> bool {
        match self {
            TensorType::Sh(s) => s.is_positive(),
            TensorType::Fed(t) => t.is_valid(),
        }
    }
}

impl fmt::Display for TensorType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TensorType::Sh(s) => write!(f, "Sh({s})"),
            TensorType::Fed(t) => t.fmt(f),
        }
    }
}

/// A typing context `Γ`: a finite map from variable names to types.
#[derive(Clone, Default, PartialEq, Eq, Debug)]
pub struct Context {
    vars: BTreeMap<String, TensorType>,
}

impl Context {
    pub fn new() -> Self {
        Context::default()
    }

    pub fn with(mut self, name: impl Into<String>, ty: TensorType) -> Self {
        self.insert(name, ty);
        self
    }

    /// Binds `name`, returning the previous binding if there was one.
    pub fn insert(&mut self, name: impl Into<String>, ty: TensorType) -> Option<TensorType> {
        self.vars.insert(name.into(), ty)
    }

    pub fn get(&self, name: &str) -> Option<&TensorType> {
        self.vars.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.vars.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &TensorType)> {
        self.vars.iter()
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    /// The sub-context on the given names (names not bound are skipped).
    pub fn restrict<'a>(&self, names: impl IntoIterator<Item = &'a String>) -> Context {
        let vars = names
            .into_iter()
            .filter_map(|n| self.vars.get(n).map(|t| (n.clone(), t.clone())))
            .collect();
        Context { vars }
    }
}

impl FromIterator<(String, TensorType)> for Context {
    fn from_iter<I: IntoIterator<Item = (String, TensorType)>>(iter: I) -> Self {
        Context {
            vars: iter.into_iter().collect(),
        }
    }
}

/// A primitive symbol. `Literal` carries a shared constant and `Ext` names a
/// registered extension primitive.
#[derive(Clone, PartialEq, Debug)]
pub enum Primitive {
    Unary(UnaryOp),
    Binary(BinaryOp),
    Compare(CompareOp),
    Agg { schema: AggSchema, axis: usize },
    Perm(Permutation),
    MatMulFedSh,
    MatMulShFed,
    MatMulFedFed,
    Literal(TensorValue),
    Ext(String),
}

impl Primitive {
    /// Fixed arity of base symbols; `None` for extensions, whose arity lives
    /// in the registry.
    pub fn arity(&self) -> Option<usize> {
        match self {
            Primitive::Unary(_) | Primitive::Agg { .. } | Primitive::Perm(_) => Some(1),
            Primitive::Binary(_)
            | Primitive::Compare(_)
            | Primitive::MatMulFedSh
            | Primitive::MatMulShFed
            | Primitive::MatMulFedFed => Some(2),
            Primitive::Literal(_) => Some(0),
            Primitive::Ext(_) => None,
        }
    }

    /// Operator name as used in program documents.
    pub fn name(&self) -> String {
        match self {
            Primitive::Unary(op) => op.name().to_string(),
            Primitive::Binary(op) => op.name().to_string(),
            Primitive::Compare(op) => op.name().to_string(),
            Primitive::Agg { schema, axis } => format!("{}_{}", schema.name(), axis),
            Primitive::Perm(_) => "perm".to_string(),
            Primitive::MatMulFedSh => "matmul_fed_sh".to_string(),
            Primitive::MatMulShFed => "matmul_sh_fed".to_string(),
            Primitive::MatMulFedFed => "matmul_fed_fed".to_string(),
            Primitive::Literal(_) => "literal".to_string(),
            Primitive::Ext(name) => name.clone(),
        }
    }
}

/// An expression over the signature: a variable or a primitive application.
#[derive(Clone, PartialEq, Debug)]
pub enum Expr {
    Var(String),
    Apply { prim: Primitive, args: Vec<Expr> },
}

impl Expr {
    pub fn var(name: impl Into<String>) -> Expr {
        Expr::Var(name.into())
    }

    pub fn apply(prim: Primitive, args: Vec<Expr>) -> Expr {
        Expr::Apply { prim, args }
    }

    pub fn lit(value: TensorValue) -> Expr {
        Expr::apply(Primitive::Literal(value), vec![])
    }

    pub fn scalar(value: f64) -> Expr {
        Expr::lit(TensorValue::scalar(value))
    }

    pub fn unary(op: UnaryOp, e: Expr) -> Expr {
        Expr::apply(Primitive::Unary(op), vec![e])
    }

    pub fn binary(op: BinaryOp, a: Expr, b: Expr) -> Expr {
        Expr::apply(Primitive::Binary(op), vec![a, b])
    }

    pub fn compare(op: CompareOp, a: Expr, b: Expr) -> Expr {
        Expr::apply(Primitive::Compare(op), vec![a, b])
    }

    pub fn add(a: Expr, b: Expr) -> Expr {
        Expr::binary(BinaryOp::Add, a, b)
    }

    pub fn sub(a: Expr, b: Expr) -> Expr {
        Expr::binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(a: Expr, b: Expr) -> Expr {
        Expr::binary(BinaryOp::Mul, a, b)
    }

    pub fn div(a: Expr, b: Expr) -> Expr {
        Expr::binary(BinaryOp::Div, a, b)
    }

    pub fn agg(schema: AggSchema, axis: usize, e: Expr) -> Expr {
        Expr::apply(Primitive::Agg { schema, axis }, vec![e])
    }

    pub fn sum(axis: usize, e: Expr) -> Expr {
        Expr::agg(AggSchema::Sum, axis, e)
    }

    pub fn perm(p: Permutation, e: Expr) -> Expr {
        Expr::apply(Primitive::Perm(p), vec![e])
    }

    pub fn matmul_fed_sh(a: Expr, b: Expr) -> Expr {
        Expr::apply(Primitive::MatMulFedSh, vec![a, b])
    }

    pub fn matmul_sh_fed(a: Expr, b: Expr) -> Expr {
        Expr::apply(Primitive::MatMulShFed, vec![a, b])
    }

    pub fn matmul_fed_fed(a: Expr, b: Expr) -> Expr {
        Expr::apply(Primitive::MatMulFedFed, vec![a, b])
    }

    pub fn ext(name: impl Into<String>, args: Vec<Expr>) -> Expr {
        Expr::apply(Primitive::Ext(name.into()), args)
    }

    pub fn free_vars(&self) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        self.collect_vars(&mut out);
        out
    }

    fn collect_vars(&self, out: &mut BTreeSet<String>) {
        match self {
            Expr::Var(name) => {
                out.insert(name.clone());
            }
            Expr::Apply { args, .. } => args.iter().for_each(|a| a.collect_vars(out)),
        }
    }

    /// Replaces free variables by expressions (simultaneously).
    pub fn substitute(&self, map: &BTreeMap<String, Expr>) -> Expr {
        match self {
            Expr::Var(name) => map.get(name).cloned().unwrap_or_else(|| self.clone()),
            Expr::Apply { prim, args } => Expr::Apply {
                prim: prim.clone(),
                args: args.iter().map(|a| a.substitute(map)).collect(),
            },
        }
    }

    /// Renames free variables.
    pub fn rename(&self, map: &BTreeMap<String, String>) -> Expr {
        let subst = map
            .iter()
            .map(|(k, v)| (k.clone(), Expr::var(v.clone())))
            .collect();
        self.substitute(&subst)
    }

    /// The subexpression at `path` (child indices from the root).
    pub fn at(&self, path: &[usize]) -> Option<&Expr> {
        match path.split_first() {
            None => Some(self),
            Some((&i, rest)) => match self {
                Expr::Apply { args, .. } => args.get(i)?.at(rest),
                Expr::Var(_) => None,
            },
        }
    }

    pub fn node_count(&self) -> usize {
        match self {
            Expr::Var(_) => 1,
            Expr::Apply { args, .. } => 1 + args.iter().map(Expr::node_count).sum::<usize>(),
        }
    }

    /// Height of the tree; variables and literals have depth 0.
    pub fn depth(&self) -> usize {
        match self {
            Expr::Var(_) => 0,
            Expr::Apply { args, .. } if args.is_empty() => 0,
            Expr::Apply { args, .. } => 1 + args.iter().map(Expr::depth).max().unwrap_or(0),
        }
    }

    /// Pre-order visit of every subexpression with its path.
    pub fn visit(&self, f: &mut impl FnMut(&[usize], &Expr)) {
        fn go(e: &Expr, path: &mut Vec<usize>, f: &mut impl FnMut(&[usize], &Expr)) {
            f(path, e);
            if let Expr::Apply { args, .. } = e {
                for (i, a) in args.iter().enumerate() {
                    path.push(i);
                    go(a, path, f);
                    path.pop();
                }
            }
        }
        go(self, &mut Vec::new(), f)
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Var(name) => f.write_str(name),
            Expr::Apply {
                prim: Primitive::Literal(v),
                ..
            } => match v.as_scalar() {
                Some(x) if v.rank() == 0 => write!(f, "{x}"),
                _ => write!(f, "(literal {})", v.shape()),
            },
            Expr::Apply { prim, args } => {
                write!(f, "({}", prim.name())?;
                if let Primitive::Perm(p) = prim {
                    write!(f, " {p}")?;
                }
                for a in args {
                    write!(f, " {a}")?;
                }
                write!(f, ")")
            }
        }
    }
}

/// Outcome of [`is_client_local`].
#[derive(Clone, Debug, PartialEq)]
pub struct LocalityReport {
    /// Type of the whole expression.
    pub ty: TensorType,
    /// Paths of subexpressions that turn federated arguments into shared values.
    pub exposures: Vec<Vec<usize>>,
}

impl LocalityReport {
    /// A federated expression with no exposing subexpression.
    pub fn is_client_local(&self) -> bool {
        self.ty.is_federated() && self.exposures.is_empty()
    }
}

/// Classifies `e` as client-local: federated-typed, and every primitive
/// application that receives a federated argument is itself federated.
pub fn is_client_local(
    ctx: &Context,
    e: &Expr,
    registry: &Registry,
) -> Result<LocalityReport, TypeError> {
    let trace = typecheck_traced(ctx, e, registry)?;
    let exposures = trace
        .nodes
        .iter()
        .filter(|n| n.has_fed_arg && n.ty.is_shared())
        .map(|n| n.path.clone())
        .collect();
    Ok(LocalityReport {
        ty: trace.ty,
        exposures,
    })
}

/// True iff every free variable of `e` has shared type under `ctx`.
pub fn is_shared_only(ctx: &Context, e: &Expr) -> Result<bool, TypeError> {
    let mut shared = true;
    for name in e.free_vars() {
        match ctx.get(&name) {
            Some(ty) => shared &= ty.is_shared(),
            None => {
                return Err(TypeError::new(
                    TypeErrorKind::UnboundVariable,
                    vec![],
                    format!("variable `{name}` is not bound"),
                ))
            }
        }
    }
    Ok(shared)
}

/// Primitive applications in `e` that produce shared state from federated
/// arguments, with their role. Under a sound typing these are only record-axis
/// aggregations and federated-federated products.
pub fn exposure_points(
    ctx: &Context,
    e: &Expr,
    registry: &Registry,
) -> Result<Vec<(Vec<usize>, NodeRole)>, TypeError> {
    let trace = typecheck_traced(ctx, e, registry)?;
    Ok(trace
        .nodes
        .into_iter()
        .filter(|n| n.has_fed_arg && n.ty.is_shared())
        .map(|n| (n.path, n.role))
        .collect())
}
