//! The typing relation: syntax-directed rules for every primitive, the
//! type-level shape operations on federated types, and a per-node trace used
//! by the locality and exposure scans.

use std::fmt;

use thiserror::Error;

use crate::ast::{Context, Expr, FedType, Primitive, TensorType};
use crate::extensions::{ExtKind, Registry};
use crate::tensor::{broadcast_shape, Permutation, Shape};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TypeErrorKind {
    ShapeMismatch,
    RecordAxisViolation,
    BroadcastIncompatible,
    UnboundVariable,
    Arity,
    FedFedForm,
    ExtensionMisuse,
}

impl TypeErrorKind {
    pub const ALL: &'static [TypeErrorKind] = &[
        TypeErrorKind::ShapeMismatch,
        TypeErrorKind::RecordAxisViolation,
        TypeErrorKind::BroadcastIncompatible,
        TypeErrorKind::UnboundVariable,
        TypeErrorKind::Arity,
        TypeErrorKind::FedFedForm,
        TypeErrorKind::ExtensionMisuse,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TypeErrorKind::ShapeMismatch => "shape-mismatch",
            TypeErrorKind::RecordAxisViolation => "record-axis-violation",
            TypeErrorKind::BroadcastIncompatible => "broadcast-incompatible",
            TypeErrorKind::UnboundVariable => "unbound-variable",
            TypeErrorKind::Arity => "arity",
            TypeErrorKind::FedFedForm => "fedfed-form",
            TypeErrorKind::ExtensionMisuse => "extension-misuse",
        }
    }

    pub fn parse(s: &str) -> Option<TypeErrorKind> {
        TypeErrorKind::ALL.iter().copied().find(|k| k.name() == s)
    }
}

impl fmt::Display for TypeErrorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A position in an expression tree: child indices from the root.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash)]
pub struct ExprPath(pub Vec<usize>);

impl fmt::Display for ExprPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("root")?;
        for i in &self.0 {
            write!(f, ".{i}")?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Error)]
#[error("{kind} at {path}: {message}")]
pub struct TypeError {
    pub kind: TypeErrorKind,
    pub path: ExprPath,
    pub message: String,
}

impl TypeError {
    pub fn new(kind: TypeErrorKind, path: Vec<usize>, message: impl Into<String>) -> Self {
        TypeError {
            kind,
            path: ExprPath(path),
            message: message.into(),
        }
    }

    fn at(mut self, path: &[usize]) -> Self {
        self.path = ExprPath(path.to_vec());
        self
    }
}

fn err(kind: TypeErrorKind, message: impl Into<String>) -> TypeError {
    TypeError::new(kind, Vec::new(), message)
}

/// One entry of a symbolic shape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SymDim {
    Dim(usize),
    Record,
}

/// A shape with exactly one `⋆` entry marking the record axis.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct SymbolicShape(Vec<SymDim>);

impl SymbolicShape {
    pub fn entries(&self) -> &[SymDim] {
        &self.0
    }

    pub fn rank(&self) -> usize {
        self.0.len()
    }

    /// 1-based position of `⋆`.
    pub fn record_position(&self) -> usize {
        self.0
            .iter()
            .position(|d| *d == SymDim::Record)
            .expect("a symbolic shape has one record entry")
            + 1
    }

    /// `erase_⋆`: drop the marker.
    pub fn erase(&self) -> Shape {
        Shape::new(
            self.0
                .iter()
                .filter_map(|d| match d {
                    SymDim::Dim(n) => Some(*n),
                    SymDim::Record => None,
                })
                .collect::<Vec<_>>(),
        )
    }

    fn into_fed(self) -> FedType {
        FedType::new(self.record_position(), self.erase())
    }
}

impl fmt::Display for SymbolicShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("(")?;
        for (i, d) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            match d {
                SymDim::Dim(n) => write!(f, "{n}")?,
                SymDim::Record => f.write_str("⋆")?,
            }
        }
        f.write_str(")")
    }
}

/// `sym(Fed_r(d))`: `d` with `⋆` inserted at position `r`.
pub fn symbolic_shape(t: &FedType) -> SymbolicShape {
    let mut entries: Vec<SymDim> = t.nonrecord.dims().iter().map(|&n| SymDim::Dim(n)).collect();
    entries.insert(t.record_axis - 1, SymDim::Record);
    SymbolicShape(entries)
}

/// Whether a shared shape `s` may be broadcast against every local tensor of
/// type `t`: after left padding, `⋆` positions see extent 1 and every other
/// position sees 1 or the matching extent.
pub fn record_agnostic_compatible(s: &Shape, t: &FedType) -> bool {
    record_agnostic_check(s, t).is_ok()
}

fn record_agnostic_check(s: &Shape, t: &FedType) -> Result<(), TypeError> {
    let sym = symbolic_shape(t);
    if s.rank() > sym.rank() {
        return Err(err(
            TypeErrorKind::BroadcastIncompatible,
            format!("shared shape {s} has higher rank than federated type {t}"),
        ));
    }
    let padded = s.pad_left(sym.rank());
    for (i, (&si, sigma)) in padded.iter().zip(sym.entries()).enumerate() {
        match *sigma {
            SymDim::Record if si != 1 => {
                return Err(err(
                    TypeErrorKind::RecordAxisViolation,
                    format!(
                        "shared shape {s} has extent {si} on the record axis (axis {}) of {t}",
                        i + 1
                    ),
                ))
            }
            SymDim::Dim(n) if si != 1 && si != n => {
                return Err(err(
                    TypeErrorKind::BroadcastIncompatible,
                    format!("shared shape {s} does not broadcast against {t} at axis {}", i + 1),
                ))
            }
            _ => {}
        }
    }
    Ok(())
}

/// `del_j`: delete a non-record axis from a federated type.
pub fn delete_axis(t: &FedType, j: usize) -> Result<FedType, TypeError> {
    if j == 0 || j > t.rank() {
        return Err(err(
            TypeErrorKind::ShapeMismatch,
            format!("axis {j} out of range for {t}"),
        ));
    }
    if j == t.record_axis {
        return Err(err(
            TypeErrorKind::RecordAxisViolation,
            format!("axis {j} is the record axis of {t}"),
        ));
    }
    let mut sym = symbolic_shape(t);
    sym.0.remove(j - 1);
    Ok(sym.into_fed())
}

/// `τ(Fed_r(d))`: permute the symbolic shape; the record axis moves to `τ(r)`.
pub fn permute_type(t: &FedType, tau: &Permutation) -> Result<FedType, TypeError> {
    if tau.len() != t.rank() {
        return Err(err(
            TypeErrorKind::ShapeMismatch,
            format!("permutation {tau} has length {} but {t} has rank {}", tau.len(), t.rank()),
        ));
    }
    let sym = symbolic_shape(t);
    Ok(SymbolicShape(tau.apply(sym.entries())).into_fed())
}

/// What a node of the expression tree is, as far as the exposure scan cares.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum NodeRole {
    Variable,
    Literal,
    Elementwise,
    Aggregation,
    RecordAggregation,
    Permutation,
    MatMulFedSh,
    MatMulShFed,
    FedFedProduct,
    Extension(ExtKind),
}

/// Type information recorded for one subexpression.
#[derive(Clone, Debug, PartialEq)]
pub struct NodeInfo {
    pub path: Vec<usize>,
    pub ty: TensorType,
    pub has_fed_arg: bool,
    pub role: NodeRole,
}

/// Result of [`typecheck_traced`]: the root type plus every node, in
/// post-order.
#[derive(Clone, Debug, PartialEq)]
pub struct TypedTrace {
    pub ty: TensorType,
    pub nodes: Vec<NodeInfo>,
}

pub fn typecheck(ctx: &Context, e: &Expr, registry: &Registry) -> Result<TensorType, TypeError> {
    typecheck_traced(ctx, e, registry).map(|t| t.ty)
}

pub fn typecheck_traced(
    ctx: &Context,
    e: &Expr,
    registry: &Registry,
) -> Result<TypedTrace, TypeError> {
    let mut nodes = Vec::new();
    let mut path = Vec::new();
    let ty = check_node(ctx, e, registry, &mut path, &mut nodes)?;
    Ok(TypedTrace { ty, nodes })
}

fn check_node(
    ctx: &Context,
    e: &Expr,
    registry: &Registry,
    path: &mut Vec<usize>,
    nodes: &mut Vec<NodeInfo>,
) -> Result<TensorType, TypeError> {
    let (ty, has_fed_arg, role) = match e {
        Expr::Var(name) => {
            let ty = ctx.get(name).ok_or_else(|| {
                err(TypeErrorKind::UnboundVariable, format!("variable `{name}` is not bound"))
                    .at(path)
            })?;
            if !ty.is_valid() {
                return Err(err(
                    TypeErrorKind::ShapeMismatch,
                    format!("variable `{name}` has malformed type {ty}"),
                )
                .at(path));
            }
            (ty.clone(), false, NodeRole::Variable)
        }
        Expr::Apply { prim, args } => {
            let expected = match prim {
                Primitive::Ext(name) => registry.get(name).map(|p| p.arity()),
                _ => prim.arity(),
            };
            if let Some(n) = expected {
                if n != args.len() {
                    return Err(err(
                        TypeErrorKind::Arity,
                        format!("`{}` takes {n} arguments, got {}", prim.name(), args.len()),
                    )
                    .at(path));
                }
            }
            let mut arg_types = Vec::with_capacity(args.len());
            for (i, a) in args.iter().enumerate() {
                path.push(i);
                let t = check_node(ctx, a, registry, path, nodes);
                path.pop();
                arg_types.push(t?);
            }
            let ty = infer_application(prim, &arg_types, registry).map_err(|e| e.at(path))?;
            let has_fed = arg_types.iter().any(TensorType::is_federated);
            (ty, has_fed, role_of(prim, &arg_types, registry))
        }
    };
    nodes.push(NodeInfo {
        path: path.clone(),
        ty: ty.clone(),
        has_fed_arg,
        role,
    });
    Ok(ty)
}

fn role_of(prim: &Primitive, args: &[TensorType], registry: &Registry) -> NodeRole {
    match prim {
        Primitive::Unary(_) | Primitive::Binary(_) | Primitive::Compare(_) => NodeRole::Elementwise,
        Primitive::Agg { axis, .. } => match args.first().and_then(TensorType::as_fed) {
            Some(t) if t.record_axis == *axis => NodeRole::RecordAggregation,
            _ => NodeRole::Aggregation,
        },
        Primitive::Perm(_) => NodeRole::Permutation,
        Primitive::MatMulFedSh => NodeRole::MatMulFedSh,
        Primitive::MatMulShFed => NodeRole::MatMulShFed,
        Primitive::MatMulFedFed => NodeRole::FedFedProduct,
        Primitive::Literal(_) => NodeRole::Literal,
        Primitive::Ext(name) => NodeRole::Extension(
            registry
                .get(name)
                .map(|p| p.kind())
                .unwrap_or(ExtKind::SharedOnly),
        ),
    }
}

/// The typing rule of a single primitive application, given argument types.
/// The returned error carries an empty path.
pub fn infer_application(
    prim: &Primitive,
    args: &[TensorType],
    registry: &Registry,
) -> Result<TensorType, TypeError> {
    use TensorType::{Fed, Sh};
    if let Some(n) = prim.arity() {
        if n != args.len() {
            return Err(err(
                TypeErrorKind::Arity,
                format!("`{}` takes {n} arguments, got {}", prim.name(), args.len()),
            ));
        }
    }
    match prim {
        Primitive::Unary(_) => Ok(args[0].clone()),
        Primitive::Binary(_) | Primitive::Compare(_) => match (&args[0], &args[1]) {
            (Sh(s), Sh(t)) => broadcast_shape(s, t).map(Sh).map_err(|e| {
                err(TypeErrorKind::BroadcastIncompatible, e.to_string())
            }),
            (Fed(a), Fed(b)) => {
                if a == b {
                    Ok(Fed(a.clone()))
                } else if a.record_axis != b.record_axis {
                    Err(err(
                        TypeErrorKind::RecordAxisViolation,
                        format!("federated operands {a} and {b} have different record axes"),
                    ))
                } else {
                    Err(err(
                        TypeErrorKind::ShapeMismatch,
                        format!("federated operands {a} and {b} have different non-record shapes"),
                    ))
                }
            }
            (Fed(t), Sh(s)) | (Sh(s), Fed(t)) => {
                record_agnostic_check(s, t)?;
                Ok(Fed(t.clone()))
            }
        },
        Primitive::Agg { axis, .. } => match &args[0] {
            Sh(s) => s.remove_axis(*axis).map(Sh).map_err(|_| {
                err(
                    TypeErrorKind::ShapeMismatch,
                    format!("cannot aggregate axis {axis} of a rank-{} shared tensor", s.rank()),
                )
            }),
            Fed(t) if *axis == t.record_axis => Ok(Sh(t.nonrecord.clone())),
            Fed(t) => delete_axis(t, *axis).map(Fed),
        },
        Primitive::Perm(tau) => match &args[0] {
            Sh(s) => {
                if tau.len() != s.rank() {
                    return Err(err(
                        TypeErrorKind::ShapeMismatch,
                        format!("permutation {tau} applied to rank-{} shape {s}", s.rank()),
                    ));
                }
                Ok(Sh(Shape::new(tau.apply(s.dims()))))
            }
            Fed(t) => permute_type(t, tau).map(Fed),
        },
        Primitive::MatMulFedSh => {
            let p = fed_vector(&args[0], 1, "first operand of matmul_fed_sh")?;
            let (rows, q) = shared_matrix(&args[1], "second operand of matmul_fed_sh")?;
            if rows != p {
                return Err(err(
                    TypeErrorKind::ShapeMismatch,
                    format!("matmul_fed_sh contracts {p} record features against {rows} rows"),
                ));
            }
            Ok(TensorType::fed(1, [q]))
        }
        Primitive::MatMulShFed => {
            let (q, cols) = shared_matrix(&args[0], "first operand of matmul_sh_fed")?;
            let p = fed_vector(&args[1], 2, "second operand of matmul_sh_fed")?;
            if cols != p {
                return Err(err(
                    TypeErrorKind::ShapeMismatch,
                    format!("matmul_sh_fed contracts {cols} columns against {p} record features"),
                ));
            }
            Ok(TensorType::fed(2, [q]))
        }
        Primitive::MatMulFedFed => {
            let form = |t: &TensorType, axis: usize| match t {
                Fed(f) if f.record_axis == axis && f.nonrecord.rank() == 1 => {
                    Some(f.nonrecord.dims()[0])
                }
                _ => None,
            };
            match (form(&args[0], 2), form(&args[1], 1)) {
                (Some(a), Some(b)) => Ok(TensorType::sh([a, b])),
                _ => Err(err(
                    TypeErrorKind::FedFedForm,
                    format!(
                        "matmul_fed_fed needs Fed_2((a)) x Fed_1((b)), got {} x {}",
                        args[0], args[1]
                    ),
                )),
            }
        }
        Primitive::Literal(v) => {
            if v.shape().is_positive() {
                Ok(Sh(v.shape().clone()))
            } else {
                Err(err(
                    TypeErrorKind::ShapeMismatch,
                    format!("literal shape {} has a zero extent", v.shape()),
                ))
            }
        }
        Primitive::Ext(name) => {
            let ext = registry.get(name).ok_or_else(|| {
                err(
                    TypeErrorKind::ExtensionMisuse,
                    format!("`{name}` is not a registered primitive"),
                )
            })?;
            if ext.arity() != args.len() {
                return Err(err(
                    TypeErrorKind::Arity,
                    format!("`{name}` takes {} arguments, got {}", ext.arity(), args.len()),
                ));
            }
            let any_fed = args.iter().any(TensorType::is_federated);
            if ext.kind() == ExtKind::SharedOnly && any_fed {
                return Err(err(
                    TypeErrorKind::ExtensionMisuse,
                    format!("shared-only primitive `{name}` applied to a federated argument"),
                ));
            }
            let out = ext
                .type_rule(args)
                .map_err(|m| err(TypeErrorKind::ShapeMismatch, format!("`{name}`: {m}")))?;
            if !out.is_valid() {
                return Err(err(
                    TypeErrorKind::ExtensionMisuse,
                    format!("`{name}` produced malformed type {out}"),
                ));
            }
            if any_fed && out.is_shared() {
                return Err(err(
                    TypeErrorKind::ExtensionMisuse,
                    format!("client-local primitive `{name}` turned federated input into {out}"),
                ));
            }
            Ok(out)
        }
    }
}

fn fed_vector(t: &TensorType, axis: usize, what: &str) -> Result<usize, TypeError> {
    match t {
        TensorType::Fed(f) if f.nonrecord.rank() == 1 && f.record_axis == axis => {
            Ok(f.nonrecord.dims()[0])
        }
        TensorType::Fed(f) if f.nonrecord.rank() == 1 => Err(err(
            TypeErrorKind::RecordAxisViolation,
            format!("{what} must have record axis {axis}, got {f}"),
        )),
        _ => Err(err(
            TypeErrorKind::ShapeMismatch,
            format!("{what} must be Fed_{axis}((p)), got {t}"),
        )),
    }
}

fn shared_matrix(t: &TensorType, what: &str) -> Result<(usize, usize), TypeError> {
    match t {
        TensorType::Sh(s) if s.rank() == 2 => Ok((s.dims()[0], s.dims()[1])),
        _ => Err(err(
            TypeErrorKind::ShapeMismatch,
            format!("{what} must be a shared matrix, got {t}"),
        )),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signature::{AggSchema, UnaryOp};
    use crate::tensor::TensorValue;

    fn reg() -> Registry {
        Registry::default()
    }

    fn check(ctx: &Context, e: &Expr) -> Result<TensorType, TypeError> {
        typecheck(ctx, e, &reg())
    }

    #[test]
    fn record_sum_gives_shared_nonrecord_shape() {
        let ctx = Context::new().with("x", TensorType::fed(1, [3]));
        assert_eq!(check(&ctx, &Expr::sum(1, Expr::var("x"))).unwrap(), TensorType::sh([3]));
    }

    #[test]
    fn fedfed_product() {
        let ctx = Context::new()
            .with("x", TensorType::fed(2, [5]))
            .with("z", TensorType::fed(1, [4]));
        let e = Expr::matmul_fed_fed(Expr::var("x"), Expr::var("z"));
        assert_eq!(check(&ctx, &e).unwrap(), TensorType::sh([5, 4]));
        let bad = Expr::matmul_fed_fed(Expr::var("z"), Expr::var("x"));
        assert_eq!(check(&ctx, &bad).unwrap_err().kind, TypeErrorKind::FedFedForm);
    }

    #[test]
    fn shared_vector_against_scalar_records_is_a_record_axis_violation() {
        let ctx = Context::new()
            .with("x", TensorType::fed(1, []))
            .with("s", TensorType::sh([2]));
        let e = Expr::add(Expr::var("x"), Expr::var("s"));
        let err = check(&ctx, &e).unwrap_err();
        assert_eq!(err.kind, TypeErrorKind::RecordAxisViolation);
        assert_eq!(err.path, ExprPath(vec![]));
    }

    #[test]
    fn symbolic_shapes() {
        assert_eq!(symbolic_shape(&FedType::new(2, [5, 7])).to_string(), "(5,⋆,7)");
        assert_eq!(symbolic_shape(&FedType::new(1, [])).to_string(), "(⋆)");
        assert_eq!(symbolic_shape(&FedType::new(3, [2, 2])).to_string(), "(2,2,⋆)");
    }

    #[test]
    fn record_agnostic_examples() {
        assert!(record_agnostic_compatible(&Shape::from([3]), &FedType::new(1, [3])));
        assert!(!record_agnostic_compatible(&Shape::from([2]), &FedType::new(1, [])));
        assert!(record_agnostic_compatible(&Shape::scalar(), &FedType::new(2, [4, 4])));
        assert!(!record_agnostic_compatible(&Shape::from([1, 1, 1]), &FedType::new(1, [2])));
    }

    #[test]
    fn deletion_examples() {
        let t = FedType::new(2, [5, 7]);
        assert_eq!(delete_axis(&t, 1).unwrap(), FedType::new(1, [7]));
        assert_eq!(delete_axis(&t, 3).unwrap(), FedType::new(2, [5]));
        assert_eq!(
            delete_axis(&FedType::new(1, [4]), 1).unwrap_err().kind,
            TypeErrorKind::RecordAxisViolation
        );
    }

    #[test]
    fn permutation_examples() {
        let t = FedType::new(2, [5, 7]);
        let swap = Permutation::new(vec![2, 1, 3]).unwrap();
        assert_eq!(permute_type(&t, &swap).unwrap(), FedType::new(1, [5, 7]));
        assert_eq!(permute_type(&t, &Permutation::identity(3)).unwrap(), t);
        let s = FedType::new(1, []);
        assert_eq!(permute_type(&s, &Permutation::identity(1)).unwrap(), s);
        let cyc = Permutation::new(vec![3, 1, 2]).unwrap();
        let back = permute_type(&permute_type(&t, &cyc).unwrap(), &cyc.inverse()).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn aggregation_rules() {
        let ctx = Context::new()
            .with("s", TensorType::sh([2, 3]))
            .with("x", TensorType::fed(2, [5, 7]));
        assert_eq!(check(&ctx, &Expr::sum(2, Expr::var("s"))).unwrap(), TensorType::sh([2]));
        let e = Expr::agg(AggSchema::Max, 3, Expr::var("x"));
        assert_eq!(check(&ctx, &e).unwrap(), TensorType::fed(2, [5]));
        let e = Expr::agg(AggSchema::Min, 2, Expr::var("x"));
        assert_eq!(check(&ctx, &e).unwrap(), TensorType::sh([5, 7]));
        let e = Expr::sum(4, Expr::var("x"));
        assert_eq!(check(&ctx, &e).unwrap_err().kind, TypeErrorKind::ShapeMismatch);
    }

    #[test]
    fn matmul_rules() {
        let ctx = Context::new()
            .with("x", TensorType::fed(1, [3]))
            .with("w", TensorType::sh([3, 2]))
            .with("v", TensorType::sh([4, 3]))
            .with("xt", TensorType::fed(2, [3]));
        let e = Expr::matmul_fed_sh(Expr::var("x"), Expr::var("w"));
        assert_eq!(check(&ctx, &e).unwrap(), TensorType::fed(1, [2]));
        let e = Expr::matmul_sh_fed(Expr::var("v"), Expr::var("xt"));
        assert_eq!(check(&ctx, &e).unwrap(), TensorType::fed(2, [4]));
        let e = Expr::matmul_fed_sh(Expr::var("xt"), Expr::var("w"));
        assert_eq!(check(&ctx, &e).unwrap_err().kind, TypeErrorKind::RecordAxisViolation);
        let e = Expr::matmul_fed_sh(Expr::var("x"), Expr::var("v"));
        assert_eq!(check(&ctx, &e).unwrap_err().kind, TypeErrorKind::ShapeMismatch);
    }

    #[test]
    fn error_paths_point_at_the_failing_node() {
        let ctx = Context::new().with("x", TensorType::fed(1, []));
        let e = Expr::unary(
            UnaryOp::Exp,
            Expr::add(Expr::var("x"), Expr::lit(TensorValue::vector(vec![1.0, 2.0]))),
        );
        let err = check(&ctx, &e).unwrap_err();
        assert_eq!(err.path, ExprPath(vec![0]));
        assert!(e.at(&err.path.0).is_some());
        let e = Expr::unary(UnaryOp::Exp, Expr::var("nope"));
        let err = check(&ctx, &e).unwrap_err();
        assert_eq!((err.kind, err.path.to_string().as_str()), (TypeErrorKind::UnboundVariable, "root.0"));
    }

    #[test]
    fn fed_fed_elementwise_needs_identical_types() {
        let ctx = Context::new()
            .with("a", TensorType::fed(1, [2]))
            .with("b", TensorType::fed(2, [2]))
            .with("c", TensorType::fed(1, [3]));
        let e = Expr::mul(Expr::var("a"), Expr::var("b"));
        assert_eq!(check(&ctx, &e).unwrap_err().kind, TypeErrorKind::RecordAxisViolation);
        let e = Expr::mul(Expr::var("a"), Expr::var("c"));
        assert_eq!(check(&ctx, &e).unwrap_err().kind, TypeErrorKind::ShapeMismatch);
        let e = Expr::mul(Expr::var("a"), Expr::var("a"));
        assert_eq!(check(&ctx, &e).unwrap(), TensorType::fed(1, [2]));
    }

    #[test]
    fn arity_errors() {
        let ctx = Context::new().with("a", TensorType::sh([2]));
        let e = Expr::apply(Primitive::Binary(crate::signature::BinaryOp::Add), vec![Expr::var("a")]);
        assert_eq!(check(&ctx, &e).unwrap_err().kind, TypeErrorKind::Arity);
    }
}
