//! Random inputs and random well-typed (or deliberately ill-typed)
//! expressions, used by the property suites, the extension audit and the
//! `selfcheck` command.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;

use crate::ast::{Context, Expr, FedType, TensorType};
use crate::eval::Environment;
use crate::factorize::{Component, OneRoundProgram};
use crate::federated::{Federation, FederatedValue};
use crate::signature::{AggSchema, BinaryOp, CompareOp, UnaryOp};
use crate::tensor::{Permutation, Shape, TensorValue};
use crate::typecheck::{permute_type, symbolic_shape, SymDim, TypeErrorKind};

/// Uniform entries in `[-2, 2]`.
pub fn random_tensor<R: Rng + ?Sized>(rng: &mut R, shape: &Shape) -> TensorValue {
    TensorValue::from_fn(shape.clone(), |_| rng.random_range(-2.0..=2.0))
}

/// A federated value of type `ty` with the given per-client record counts.
pub fn random_federated<R: Rng + ?Sized>(
    rng: &mut R,
    federation: &Federation,
    ty: &FedType,
    counts: &[usize],
) -> FederatedValue {
    let locals = counts
        .iter()
        .map(|&n| {
            let shape = ty
                .nonrecord
                .insert_axis(ty.record_axis, n)
                .expect("record axis within rank");
            random_tensor(rng, &shape)
        })
        .collect();
    FederatedValue::new(federation.clone(), ty.record_axis, ty.nonrecord.clone(), locals)
        .expect("generated locals fit the type")
}

#[derive(Clone, Debug)]
pub struct GenConfig {
    pub max_depth: usize,
    pub max_rank: usize,
    pub max_dim: usize,
    pub max_clients: usize,
    pub max_records: usize,
    /// Only client-local constructs on federated paths.
    pub client_local_only: bool,
    /// Use the built-in client-local extensions as well.
    pub extensions: bool,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            max_depth: 5,
            max_rank: 3,
            max_dim: 4,
            max_clients: 4,
            max_records: 5,
            client_local_only: false,
            extensions: true,
        }
    }
}

/// A generated expression with a context and a matching random environment.
#[derive(Clone, Debug)]
pub struct Generated {
    pub ctx: Context,
    pub env: Environment,
    pub expr: Expr,
    /// The type the generator aimed for.
    pub ty: TensorType,
}

/// Primitive families, for per-family consistency sampling.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Family {
    Unary,
    Binary,
    Compare,
    SharedAggregation,
    RecordAggregation,
    NonRecordAggregation,
    Permutation,
    MatMulFedSh,
    MatMulShFed,
    MatMulFedFed,
}

impl Family {
    pub const ALL: &'static [Family] = &[
        Family::Unary,
        Family::Binary,
        Family::Compare,
        Family::SharedAggregation,
        Family::RecordAggregation,
        Family::NonRecordAggregation,
        Family::Permutation,
        Family::MatMulFedSh,
        Family::MatMulShFed,
        Family::MatMulFedFed,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Family::Unary => "unary",
            Family::Binary => "binary",
            Family::Compare => "compare",
            Family::SharedAggregation => "shared-aggregation",
            Family::RecordAggregation => "record-aggregation",
            Family::NonRecordAggregation => "nonrecord-aggregation",
            Family::Permutation => "permutation",
            Family::MatMulFedSh => "matmul-fed-sh",
            Family::MatMulShFed => "matmul-sh-fed",
            Family::MatMulFedFed => "matmul-fed-fed",
        }
    }

    /// Families whose distributed and centralized results agree exactly
    /// (no reassociated floating-point sums).
    pub fn is_exact(self) -> bool {
        !matches!(
            self,
            Family::RecordAggregation | Family::MatMulFedFed
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Rule {
    Unary,
    BinaryFedFed,
    BinaryFedSh,
    BinaryShFed,
    BinaryShSh,
    Compare,
    SharedAgg,
    RecordAgg,
    NonRecordAgg,
    Perm,
    MatMulFedSh,
    MatMulShFed,
    MatMulFedFed,
    Extension,
}

const FED_RULES: &[Rule] = &[
    Rule::Unary,
    Rule::BinaryFedFed,
    Rule::BinaryFedSh,
    Rule::BinaryShFed,
    Rule::Compare,
    Rule::NonRecordAgg,
    Rule::Perm,
    Rule::MatMulFedSh,
    Rule::MatMulShFed,
    Rule::Extension,
];

const SHARED_RULES: &[Rule] = &[
    Rule::Unary,
    Rule::BinaryShSh,
    Rule::Compare,
    Rule::SharedAgg,
    Rule::RecordAgg,
    Rule::Perm,
    Rule::MatMulFedFed,
];

/// Type-directed random expression generator. All federated variables share
/// the same per-client record counts, so the semantic side conditions of
/// federated elementwise maps and the federated-federated product hold.
pub struct ExprGen<'a, R: Rng> {
    rng: &'a mut R,
    cfg: GenConfig,
    ctx: Context,
    fed_count: usize,
    shared_count: usize,
}

impl<'a, R: Rng> ExprGen<'a, R> {
    pub fn new(rng: &'a mut R, cfg: GenConfig) -> Self {
        ExprGen {
            rng,
            cfg,
            ctx: Context::new(),
            fed_count: 0,
            shared_count: 0,
        }
    }

    pub fn random_shape(&mut self, rank: usize) -> Shape {
        let max = self.cfg.max_dim;
        Shape::new((0..rank).map(|_| self.rng.random_range(1..=max)).collect::<Vec<_>>())
    }

    pub fn random_fed_type(&mut self) -> FedType {
        let rank = self.rng.random_range(1..=self.cfg.max_rank);
        let d = self.random_shape(rank - 1);
        FedType::new(self.rng.random_range(1..=rank), d)
    }

    pub fn random_type(&mut self) -> TensorType {
        if self.rng.random_bool(0.6) {
            TensorType::Fed(self.random_fed_type())
        } else {
            let rank = self.rng.random_range(0..=self.cfg.max_rank);
            TensorType::Sh(self.random_shape(rank))
        }
    }

    /// A random expression of a random type, plus a random environment.
    pub fn generate(mut self) -> Generated {
        let ty = if self.cfg.client_local_only {
            TensorType::Fed(self.random_fed_type())
        } else {
            self.random_type()
        };
        let depth = self.rng.random_range(1..=self.cfg.max_depth);
        let mut expr = self.gen(&ty, depth);
        if self.cfg.client_local_only && expr.free_vars().iter().all(|v| !self.is_fed_var(v)) {
            expr = self.fed_leaf(ty.as_fed().expect("federated target"));
        }
        self.finish(expr, ty)
    }

    /// A single application of a primitive of the given family to variables.
    pub fn generate_application(mut self, family: Family) -> Generated {
        loop {
            let attempt = match family {
                Family::Unary => {
                    let ty = self.random_type();
                    let arg = self.leaf(&ty);
                    let op = *UnaryOp::ALL.choose(self.rng).expect("nonempty");
                    Some((Expr::unary(op, arg), ty))
                }
                Family::Binary | Family::Compare => {
                    let ty = self.random_type();
                    let rules: &[Rule] = match ty {
                        TensorType::Fed(_) => &[Rule::BinaryFedFed, Rule::BinaryFedSh, Rule::BinaryShFed],
                        TensorType::Sh(_) => &[Rule::BinaryShSh],
                    };
                    let rule = *rules.choose(self.rng).expect("nonempty");
                    self.binary(&ty, rule, 1, family == Family::Compare)
                        .map(|e| (e, ty))
                }
                Family::SharedAggregation => {
                    let rank = self.rng.random_range(0..self.cfg.max_rank);
                    let ty = TensorType::Sh(self.random_shape(rank));
                    self.try_rule(Rule::SharedAgg, &ty, 1).map(|e| (e, ty))
                }
                Family::RecordAggregation => {
                    let rank = self.rng.random_range(0..self.cfg.max_rank);
                    let ty = TensorType::Sh(self.random_shape(rank));
                    self.try_rule(Rule::RecordAgg, &ty, 1).map(|e| (e, ty))
                }
                Family::NonRecordAggregation => {
                    let ty = TensorType::Fed(self.random_fed_type());
                    self.try_rule(Rule::NonRecordAgg, &ty, 1).map(|e| (e, ty))
                }
                Family::Permutation => {
                    let ty = self.random_type();
                    self.try_rule(Rule::Perm, &ty, 1).map(|e| (e, ty))
                }
                Family::MatMulFedSh => {
                    let q = self.rng.random_range(1..=self.cfg.max_dim);
                    let ty = TensorType::fed(1, [q]);
                    self.try_rule(Rule::MatMulFedSh, &ty, 1).map(|e| (e, ty))
                }
                Family::MatMulShFed => {
                    let q = self.rng.random_range(1..=self.cfg.max_dim);
                    let ty = TensorType::fed(2, [q]);
                    self.try_rule(Rule::MatMulShFed, &ty, 1).map(|e| (e, ty))
                }
                Family::MatMulFedFed => {
                    let ty = TensorType::Sh(self.random_shape(2));
                    self.try_rule(Rule::MatMulFedFed, &ty, 1).map(|e| (e, ty))
                }
            };
            if let Some((e, ty)) = attempt {
                return self.finish(e, ty);
            }
        }
    }

    fn finish(self, expr: Expr, ty: TensorType) -> Generated {
        let m = self.rng.random_range(1..=self.cfg.max_clients);
        let federation = Federation::numbered(m).expect("m >= 1");
        let counts: Vec<usize> = (0..m)
            .map(|_| self.rng.random_range(0..=self.cfg.max_records))
            .collect();
        let mut env = Environment::new();
        let vars = expr.free_vars();
        let ctx = self.ctx.restrict(&vars);
        for (name, t) in ctx.iter() {
            match t {
                TensorType::Sh(s) => env.bind_shared(name, random_tensor(self.rng, s)),
                TensorType::Fed(f) => env
                    .bind_federated(name, random_federated(self.rng, &federation, f, &counts))
                    .expect("one federation"),
            }
        }
        Generated { ctx, env, expr, ty }
    }

    fn is_fed_var(&self, name: &str) -> bool {
        self.ctx.get(name).is_some_and(TensorType::is_federated)
    }

    fn fresh(&mut self, ty: &TensorType) -> Expr {
        let name = match ty {
            TensorType::Fed(_) => {
                self.fed_count += 1;
                format!("x{}", self.fed_count)
            }
            TensorType::Sh(_) => {
                self.shared_count += 1;
                format!("s{}", self.shared_count)
            }
        };
        self.ctx.insert(name.clone(), ty.clone());
        Expr::var(name)
    }

    fn fed_leaf(&mut self, t: &FedType) -> Expr {
        let ty = TensorType::Fed(t.clone());
        let existing: Vec<String> = self
            .ctx
            .iter()
            .filter(|(_, v)| **v == ty)
            .map(|(k, _)| k.clone())
            .collect();
        if !existing.is_empty() && self.rng.random_bool(0.5) {
            return Expr::var(existing.choose(self.rng).expect("nonempty").clone());
        }
        self.fresh(&ty)
    }

    fn leaf(&mut self, ty: &TensorType) -> Expr {
        match ty {
            TensorType::Fed(t) => self.fed_leaf(t),
            TensorType::Sh(s) => {
                if self.rng.random_bool(0.3) {
                    let v = random_tensor(self.rng, s);
                    Expr::lit(v)
                } else {
                    self.fresh(ty)
                }
            }
        }
    }

    fn gen(&mut self, ty: &TensorType, depth: usize) -> Expr {
        if depth == 0 || self.rng.random_bool(0.2) {
            return self.leaf(ty);
        }
        let mut rules: Vec<Rule> = match ty {
            TensorType::Fed(_) => FED_RULES.to_vec(),
            TensorType::Sh(_) => SHARED_RULES.to_vec(),
        };
        if self.cfg.client_local_only && ty.is_shared() {
            rules.retain(|r| !matches!(r, Rule::RecordAgg | Rule::MatMulFedFed));
        }
        if !self.cfg.extensions {
            rules.retain(|r| *r != Rule::Extension);
        }
        rules.shuffle(self.rng);
        for rule in rules {
            if let Some(e) = self.try_rule(rule, ty, depth) {
                return e;
            }
        }
        self.leaf(ty)
    }

    fn try_rule(&mut self, rule: Rule, ty: &TensorType, depth: usize) -> Option<Expr> {
        let d = depth - 1;
        let max_rank = self.cfg.max_rank;
        match (rule, ty) {
            (Rule::Unary, _) => {
                let op = *UnaryOp::ALL.choose(self.rng)?;
                Some(Expr::unary(op, self.gen(ty, d)))
            }
            (Rule::BinaryFedFed | Rule::BinaryFedSh | Rule::BinaryShFed | Rule::BinaryShSh, _) => {
                self.binary(ty, rule, depth, false)
            }
            (Rule::Compare, _) => {
                let rules: &[Rule] = match ty {
                    TensorType::Fed(_) => &[Rule::BinaryFedFed, Rule::BinaryFedSh, Rule::BinaryShFed],
                    TensorType::Sh(_) => &[Rule::BinaryShSh],
                };
                let r = *rules.choose(self.rng)?;
                self.binary(ty, r, depth, true)
            }
            (Rule::SharedAgg, TensorType::Sh(s)) if s.rank() < max_rank => {
                let j = self.rng.random_range(1..=s.rank() + 1);
                let e = self.rng.random_range(1..=self.cfg.max_dim);
                let child = TensorType::Sh(s.insert_axis(j, e).ok()?);
                let schema = *AggSchema::ALL.choose(self.rng)?;
                Some(Expr::agg(schema, j, self.gen(&child, d)))
            }
            (Rule::RecordAgg, TensorType::Sh(s)) if s.rank() < max_rank => {
                let r = self.rng.random_range(1..=s.rank() + 1);
                let child = TensorType::Fed(FedType::new(r, s.clone()));
                let schema = *AggSchema::ALL.choose(self.rng)?;
                Some(Expr::agg(schema, r, self.gen(&child, d)))
            }
            (Rule::NonRecordAgg, TensorType::Fed(t)) if t.rank() < max_rank => {
                let mut sym = symbolic_shape(t).entries().to_vec();
                let j = self.rng.random_range(1..=sym.len() + 1);
                let e = self.rng.random_range(1..=self.cfg.max_dim);
                sym.insert(j - 1, SymDim::Dim(e));
                let r = sym.iter().position(|x| *x == SymDim::Record)? + 1;
                let d_shape: Vec<usize> = sym
                    .iter()
                    .filter_map(|x| match x {
                        SymDim::Dim(n) => Some(*n),
                        SymDim::Record => None,
                    })
                    .collect();
                let child = TensorType::fed(r, d_shape);
                let schema = *AggSchema::ALL.choose(self.rng)?;
                Some(Expr::agg(schema, j, self.gen(&child, d)))
            }
            (Rule::Perm, _) => {
                let k = ty.rank();
                if k == 0 {
                    return None;
                }
                let mut images: Vec<usize> = (1..=k).collect();
                images.shuffle(self.rng);
                let tau = Permutation::new(images).ok()?;
                let inv = tau.inverse();
                let child = match ty {
                    TensorType::Sh(s) => TensorType::Sh(Shape::new(inv.apply(s.dims()))),
                    TensorType::Fed(t) => TensorType::Fed(permute_type(t, &inv).ok()?),
                };
                Some(Expr::perm(tau, self.gen(&child, d)))
            }
            (Rule::MatMulFedSh, TensorType::Fed(t)) if t.record_axis == 1 && t.nonrecord.rank() == 1 => {
                let q = t.nonrecord.dims()[0];
                let p = self.rng.random_range(1..=self.cfg.max_dim);
                let x = self.gen(&TensorType::fed(1, [p]), d);
                let w = self.gen(&TensorType::sh([p, q]), d);
                Some(Expr::matmul_fed_sh(x, w))
            }
            (Rule::MatMulShFed, TensorType::Fed(t)) if t.record_axis == 2 && t.nonrecord.rank() == 1 => {
                let q = t.nonrecord.dims()[0];
                let p = self.rng.random_range(1..=self.cfg.max_dim);
                let w = self.gen(&TensorType::sh([q, p]), d);
                let x = self.gen(&TensorType::fed(2, [p]), d);
                Some(Expr::matmul_sh_fed(w, x))
            }
            (Rule::MatMulFedFed, TensorType::Sh(s)) if s.rank() == 2 => {
                let (a, b) = (s.dims()[0], s.dims()[1]);
                let x = self.gen(&TensorType::fed(2, [a]), d);
                let z = self.gen(&TensorType::fed(1, [b]), d);
                Some(Expr::matmul_fed_fed(x, z))
            }
            (Rule::Extension, TensorType::Fed(t)) => self.extension(t, d),
            _ => None,
        }
    }

    fn extension(&mut self, t: &FedType, d: usize) -> Option<Expr> {
        let dims = t.nonrecord.dims().to_vec();
        let mut options: Vec<&str> = Vec::new();
        if t.record_axis == 1 {
            options.push("scale_rows");
            if dims.len() == 1 && dims[0] < self.cfg.max_dim {
                options.push("project_features");
            }
            if dims.is_empty() {
                options.push("project_response");
            }
            if dims.len() == 2 && dims[0] == dims[1] {
                options.push("outer_rows");
            }
        }
        if t.record_axis == 2 && dims.len() == 1 {
            options.push("transpose_records");
        }
        let name = *options.choose(self.rng)?;
        let arg = match name {
            "scale_rows" => {
                let w = self.gen(&TensorType::fed(1, []), d);
                let x = self.gen(&TensorType::Fed(t.clone()), d);
                return Some(Expr::ext(name, vec![w, x]));
            }
            "project_features" => TensorType::fed(1, [dims[0] + 1]),
            "project_response" => {
                let k = self.rng.random_range(2..=self.cfg.max_dim.max(2));
                TensorType::fed(1, [k])
            }
            "outer_rows" => TensorType::fed(1, [dims[0]]),
            "transpose_records" => TensorType::fed(1, [dims[0]]),
            _ => return None,
        };
        let a = self.gen(&arg, d);
        Some(Expr::ext(name, vec![a]))
    }

    fn binary(&mut self, ty: &TensorType, rule: Rule, depth: usize, compare: bool) -> Option<Expr> {
        let d = depth.saturating_sub(1);
        let (a, b) = match (rule, ty) {
            (Rule::BinaryFedFed, TensorType::Fed(_)) => (self.gen(ty, d), self.gen(ty, d)),
            (Rule::BinaryFedSh, TensorType::Fed(t)) => {
                let s = self.agnostic_shape(t);
                (self.gen(ty, d), self.gen(&TensorType::Sh(s), d))
            }
            (Rule::BinaryShFed, TensorType::Fed(t)) => {
                let s = self.agnostic_shape(t);
                (self.gen(&TensorType::Sh(s), d), self.gen(ty, d))
            }
            (Rule::BinaryShSh, TensorType::Sh(s)) => {
                let other = self.broadcast_partner(s);
                if self.rng.random_bool(0.5) {
                    (self.gen(ty, d), self.gen(&TensorType::Sh(other), d))
                } else {
                    (self.gen(&TensorType::Sh(other), d), self.gen(ty, d))
                }
            }
            _ => return None,
        };
        Some(if compare {
            Expr::compare(*CompareOp::ALL.choose(self.rng)?, a, b)
        } else {
            Expr::binary(*BinaryOp::ALL.choose(self.rng)?, a, b)
        })
    }

    /// A shared shape that broadcasts against `t` record-agnostically.
    fn agnostic_shape(&mut self, t: &FedType) -> Shape {
        let sym = symbolic_shape(t);
        let p = self.rng.random_range(0..=sym.rank());
        let tail = &sym.entries()[sym.rank() - p..];
        Shape::new(
            tail.iter()
                .map(|x| match x {
                    SymDim::Record => 1,
                    SymDim::Dim(n) => {
                        if self.rng.random_bool(0.3) {
                            1
                        } else {
                            *n
                        }
                    }
                })
                .collect::<Vec<_>>(),
        )
    }

    /// A shape `t` with `s ∨ t = s`.
    fn broadcast_partner(&mut self, s: &Shape) -> Shape {
        let p = self.rng.random_range(0..=s.rank());
        let tail = &s.dims()[s.rank() - p..];
        Shape::new(
            tail.iter()
                .map(|&n| if self.rng.random_bool(0.3) { 1 } else { n })
                .collect::<Vec<_>>(),
        )
    }
}

/// An ill-typed expression, with the error kind the typechecker must report.
#[derive(Clone, Debug)]
pub struct Forbidden {
    pub ctx: Context,
    pub expr: Expr,
    pub expected: TypeErrorKind,
    pub description: &'static str,
}

/// Draws one program from a family of forbidden constructions, each embedded
/// under a few well-typed unary wrappers.
pub fn forbidden_program<R: Rng>(rng: &mut R) -> Forbidden {
    let max_dim = 4;
    let dim = |rng: &mut R, lo: usize| rng.random_range(lo..=max_dim);
    let case = rng.random_range(0..8);
    let (ctx, core, expected, description) = match case {
        0 => {
            // Shared operand with extent > 1 where the record axis sits.
            let n = dim(rng, 2);
            let ctx = Context::new()
                .with("x", TensorType::fed(1, []))
                .with("s", TensorType::sh([n]));
            let e = Expr::mul(Expr::var("x"), Expr::var("s"));
            (ctx, e, TypeErrorKind::RecordAxisViolation, "shared operand spans the record axis")
        }
        1 => {
            let p = dim(rng, 1);
            let ctx = Context::new()
                .with("a", TensorType::fed(1, [p]))
                .with("b", TensorType::fed(2, [p]));
            let e = Expr::add(Expr::var("a"), Expr::var("b"));
            (ctx, e, TypeErrorKind::RecordAxisViolation, "federated operands on different record axes")
        }
        2 => {
            let (a, b) = (dim(rng, 1), dim(rng, 1));
            let ctx = Context::new()
                .with("x", TensorType::fed(1, [a]))
                .with("z", TensorType::fed(1, [b]));
            let e = Expr::matmul_fed_fed(Expr::var("x"), Expr::var("z"));
            (ctx, e, TypeErrorKind::FedFedForm, "federated product of two record-major operands")
        }
        3 => {
            let p = dim(rng, 1);
            let ctx = Context::new()
                .with("x", TensorType::fed(1, [p]))
                .with("a", TensorType::sh([p, p]));
            let e = Expr::ext("solve", vec![Expr::var("a"), Expr::var("x")]);
            (ctx, e, TypeErrorKind::ExtensionMisuse, "shared-only primitive on federated data")
        }
        4 => {
            let p = dim(rng, 1);
            let ctx = Context::new().with("x", TensorType::fed(1, [p]));
            let e = Expr::ext("leak_records", vec![Expr::var("x")]);
            (ctx, e, TypeErrorKind::ExtensionMisuse, "unregistered primitive")
        }
        5 => {
            let (p, q) = (dim(rng, 1), dim(rng, 1));
            let ctx = Context::new()
                .with("x", TensorType::fed(2, [p]))
                .with("w", TensorType::sh([p, q]));
            let e = Expr::matmul_fed_sh(Expr::var("x"), Expr::var("w"));
            (ctx, e, TypeErrorKind::RecordAxisViolation, "record-major product on a feature-major operand")
        }
        6 => {
            // Shared operand with higher rank than the federated operand.
            let n = dim(rng, 1);
            let ctx = Context::new()
                .with("x", TensorType::fed(1, [n]))
                .with("s", TensorType::sh([1, 1, n]));
            let e = Expr::sub(Expr::var("s"), Expr::var("x"));
            (ctx, e, TypeErrorKind::BroadcastIncompatible, "shared operand of higher rank")
        }
        _ => {
            let (a, b) = (dim(rng, 1), dim(rng, 1));
            let ctx = Context::new()
                .with("x", TensorType::fed(2, [a]))
                .with("z", TensorType::fed(2, [b]));
            let e = Expr::matmul_fed_fed(Expr::var("x"), Expr::var("z"));
            (ctx, e, TypeErrorKind::FedFedForm, "federated product of two feature-major operands")
        }
    };
    let mut expr = core;
    for _ in 0..rng.random_range(0..3) {
        let op = *UnaryOp::ALL.choose(rng).expect("nonempty");
        expr = Expr::unary(op, expr);
    }
    Forbidden {
        ctx,
        expr,
        expected,
        description,
    }
}

/// Ops kept in random one-round programs; they stay finite on bounded data.
const TAME_UNARY: [UnaryOp; 5] = [UnaryOp::Neg, UnaryOp::Abs, UnaryOp::Square, UnaryOp::Relu, UnaryOp::Sigmoid];
const TAME_BINARY: [BinaryOp; 3] = [BinaryOp::Add, BinaryOp::Sub, BinaryOp::Mul];

/// A random validated one-round program over `x`, with matching input data.
pub struct RandomProgram {
    pub program: OneRoundProgram,
    pub input: FederatedValue,
}

/// Draws a one-round program whose encoders are chains of client-local steps
/// from the input and whose decoder combines the component outputs.
pub fn random_one_round<R: Rng>(rng: &mut R, cfg: &GenConfig) -> RandomProgram {
    let mut g = ExprGen::new(rng, cfg.clone());
    let input_type = g.random_fed_type();
    let q = g.rng.random_range(1..=3);
    let mut components = Vec::with_capacity(q);
    let mut shapes = Vec::with_capacity(q);
    for i in 0..q {
        let depth = g.rng.random_range(0..=3);
        let (e, t) = local_chain(&mut g, &input_type, depth);
        let mat = t.rank() >= 2 && g.rng.random_bool(0.35);
        let name = format!("y{}", i + 1);
        if mat {
            let (a, ta) = to_record_major_vector(&mut g, e.clone(), t.clone());
            let depth = g.rng.random_range(0..=2);
            let (e2, t2) = local_chain(&mut g, &input_type, depth);
            if t2.rank() >= 2 {
                let (b, tb) = to_record_major_vector(&mut g, e2, t2);
                let left = Expr::perm(Permutation::swap(2, 1, 2).expect("rank 2"), a);
                shapes.push(Shape::from([ta.nonrecord.dims()[0], tb.nonrecord.dims()[0]]));
                components.push((name, Component::Mat { left, right: b }));
                continue;
            }
        }
        let schema = *AggSchema::ALL.choose(g.rng).expect("nonempty");
        shapes.push(t.nonrecord.clone());
        components.push((name, Component::Agg { encoder: e, schema }));
    }
    let decoder = random_decoder(&mut g, &shapes);
    let m = g.rng.random_range(1..=cfg.max_clients);
    let federation = Federation::numbered(m).expect("m >= 1");
    let counts: Vec<usize> = (0..m).map(|_| g.rng.random_range(0..=cfg.max_records)).collect();
    let input = random_federated(g.rng, &federation, &input_type, &counts);
    RandomProgram {
        program: OneRoundProgram {
            input: "x".into(),
            input_type,
            params: vec![],
            components,
            decoder,
        },
        input,
    }
}

/// A client-local expression over `x : t0` built from `depth` random steps.
fn local_chain<R: Rng>(g: &mut ExprGen<'_, R>, t0: &FedType, depth: usize) -> (Expr, FedType) {
    let mut e = Expr::var("x");
    let mut t = t0.clone();
    for _ in 0..depth {
        let step = g.rng.random_range(0..8);
        match step {
            0 => e = Expr::unary(*TAME_UNARY.choose(g.rng).expect("nonempty"), e),
            1 => {
                let s = g.agnostic_shape(&t);
                let lit = Expr::lit(random_tensor(g.rng, &s));
                let op = *TAME_BINARY.choose(g.rng).expect("nonempty");
                e = if g.rng.random_bool(0.5) {
                    Expr::binary(op, e, lit)
                } else {
                    Expr::binary(op, lit, e)
                };
            }
            2 => {
                let u = *TAME_UNARY.choose(g.rng).expect("nonempty");
                let op = *TAME_BINARY.choose(g.rng).expect("nonempty");
                e = Expr::binary(op, e.clone(), Expr::unary(u, e));
            }
            3 if t.rank() >= 2 => {
                let mut images: Vec<usize> = (1..=t.rank()).collect();
                images.shuffle(g.rng);
                let tau = Permutation::new(images).expect("shuffled identity");
                t = permute_type(&t, &tau).expect("rank matches");
                e = Expr::perm(tau, e);
            }
            4 if t.rank() >= 2 => {
                let sym = symbolic_shape(&t);
                let axes: Vec<usize> = (1..=sym.rank()).filter(|&j| j != t.record_axis).collect();
                let j = *axes.choose(g.rng).expect("rank >= 2");
                let schema = *AggSchema::ALL.choose(g.rng).expect("nonempty");
                t = crate::typecheck::delete_axis(&t, j).expect("non-record axis");
                e = Expr::agg(schema, j, e);
            }
            5 if t.record_axis == 1 && t.nonrecord.rank() == 1 => {
                let p = t.nonrecord.dims()[0];
                let q = g.rng.random_range(1..=g.cfg.max_dim);
                e = Expr::matmul_fed_sh(e, Expr::lit(random_tensor(g.rng, &Shape::from([p, q]))));
                t = FedType::new(1, [q]);
            }
            6 if t.record_axis == 2 && t.nonrecord.rank() == 1 => {
                let p = t.nonrecord.dims()[0];
                let q = g.rng.random_range(1..=g.cfg.max_dim);
                e = Expr::matmul_sh_fed(Expr::lit(random_tensor(g.rng, &Shape::from([q, p]))), e);
                t = FedType::new(2, [q]);
            }
            7 if g.cfg.extensions && t.record_axis == 1 && t.nonrecord.rank() == 1 => {
                let p = t.nonrecord.dims()[0];
                if p >= 2 && g.rng.random_bool(0.5) {
                    e = Expr::ext("project_features", vec![e]);
                    t = FedType::new(1, [p - 1]);
                } else if p <= 3 {
                    e = Expr::ext("outer_rows", vec![e]);
                    t = FedType::new(1, [p, p]);
                } else {
                    e = Expr::ext("transpose_records", vec![e]);
                    t = FedType::new(2, [p]);
                }
            }
            _ => e = Expr::unary(*TAME_UNARY.choose(g.rng).expect("nonempty"), e),
        }
    }
    (e, t)
}

/// Moves the record axis first and sums out all but one other axis, giving
/// `Fed_1((n))`. Needs rank at least 2.
fn to_record_major_vector<R: Rng>(g: &mut ExprGen<'_, R>, mut e: Expr, mut t: FedType) -> (Expr, FedType) {
    if t.record_axis != 1 {
        let tau = Permutation::swap(t.rank(), 1, t.record_axis).expect("axes in range");
        t = permute_type(&t, &tau).expect("rank matches");
        e = Expr::perm(tau, e);
    }
    while t.rank() > 2 {
        let j = t.rank();
        let schema = *AggSchema::ALL.choose(g.rng).expect("nonempty");
        t = crate::typecheck::delete_axis(&t, j).expect("non-record axis");
        e = Expr::agg(schema, j, e);
    }
    (e, t)
}

/// A shared-only combination of `y1 … yq` with the given shapes.
fn random_decoder<R: Rng>(g: &mut ExprGen<'_, R>, shapes: &[Shape]) -> Expr {
    let mut e = Expr::var("y1");
    let mut shape = shapes[0].clone();
    for (i, s) in shapes.iter().enumerate().skip(1) {
        let mut other = Expr::var(format!("y{}", i + 1));
        let mut other_shape = s.clone();
        if crate::tensor::broadcast_shape(&shape, &other_shape).is_err() {
            for axis in (1..=other_shape.rank()).rev() {
                other = Expr::sum(axis, other);
            }
            other_shape = Shape::scalar();
        }
        let op = *TAME_BINARY.choose(g.rng).expect("nonempty");
        shape = crate::tensor::broadcast_shape(&shape, &other_shape).expect("compatible");
        e = Expr::binary(op, e, other);
    }
    if g.rng.random_bool(0.4) {
        e = Expr::unary(*TAME_UNARY.choose(g.rng).expect("nonempty"), e);
    }
    e
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::extensions::Registry;
    use crate::typecheck::typecheck;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn generated_expressions_have_their_target_type() {
        let reg = Registry::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..300 {
            let g = ExprGen::new(&mut rng, GenConfig::default()).generate();
            let ty = typecheck(&g.ctx, &g.expr, &reg).unwrap_or_else(|e| panic!("{}: {e}", g.expr));
            assert_eq!(ty, g.ty, "{}", g.expr);
            assert!(g.expr.depth() <= 5);
        }
    }

    #[test]
    fn family_applications_typecheck() {
        let reg = Registry::default();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for &f in Family::ALL {
            for _ in 0..30 {
                let g = ExprGen::new(&mut rng, GenConfig::default()).generate_application(f);
                assert_eq!(typecheck(&g.ctx, &g.expr, &reg).unwrap(), g.ty, "{f:?} {}", g.expr);
            }
        }
    }

    #[test]
    fn random_one_round_programs_validate() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let reg = Registry::default();
        let cfg = GenConfig {
            extensions: true,
            ..GenConfig::default()
        };
        for _ in 0..200 {
            let r = random_one_round(&mut rng, &cfg);
            if let Err(v) = crate::factorize::validate_one_round(&r.program, &reg) {
                panic!("{:?}: {v:?}", r.program);
            }
        }
    }

    #[test]
    fn forbidden_programs_fail_with_the_expected_kind() {
        let reg = Registry::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let f = forbidden_program(&mut rng);
            let err = typecheck(&f.ctx, &f.expr, &reg).unwrap_err();
            assert_eq!(err.kind, f.expected, "{}: {}", f.description, f.expr);
        }
    }
}
