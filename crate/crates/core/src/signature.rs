//! The shipped instantiation of the base primitive signature: scalar maps,
//! comparisons and mergeable aggregation schemas.

use std::fmt;
use std::str::FromStr;

use serde::Serialize;

macro_rules! named_enum {
    ($(#[$meta:meta])* $name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        $(#[$meta])*
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
        pub enum $name {
            $($variant),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn name(self) -> &'static str {
                match self {
                    $($name::$variant => $text),+
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.name())
            }
        }

        impl FromStr for $name {
            type Err = ();
            fn from_str(s: &str) -> Result<Self, ()> {
                match s {
                    $($text => Ok($name::$variant),)+
                    _ => Err(()),
                }
            }
        }
    };
}

named_enum!(
    /// Scalar unary maps, applied elementwise.
    UnaryOp {
        Neg => "neg",
        Abs => "abs",
        Exp => "exp",
        Log => "log",
        Sqrt => "sqrt",
        Square => "square",
        Relu => "relu",
        Sigmoid => "sigmoid",
    }
);

named_enum!(
    /// Scalar binary maps, applied elementwise with broadcasting.
    BinaryOp {
        Add => "add",
        Sub => "sub",
        Mul => "mul",
        Div => "div",
        Pow => "pow",
    }
);

named_enum!(
    /// Scalar comparisons valued in `{0, 1}`.
    CompareOp {
        Lt => "lt",
        Le => "le",
        Eq => "eq",
        Ge => "ge",
        Gt => "gt",
    }
);

named_enum!(
    /// Aggregation schemas. Each one is a commutative monoid on its value
    /// space, so an aggregate over a union of record blocks equals the merge
    /// of the per-block aggregates.
    AggSchema {
        Sum => "sum",
        Min => "min",
        Max => "max",
    }
);

impl UnaryOp {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            UnaryOp::Neg => -x,
            UnaryOp::Abs => x.abs(),
            UnaryOp::Exp => x.exp(),
            UnaryOp::Log => x.ln(),
            UnaryOp::Sqrt => x.sqrt(),
            UnaryOp::Square => x * x,
            UnaryOp::Relu => {
                if x > 0.0 {
                    x
                } else {
                    0.0
                }
            }
            UnaryOp::Sigmoid => 1.0 / (1.0 + (-x).exp()),
        }
    }
}

impl BinaryOp {
    pub fn apply(self, a: f64, b: f64) -> f64 {
        match self {
            BinaryOp::Add => a + b,
            BinaryOp::Sub => a - b,
            BinaryOp::Mul => a * b,
            BinaryOp::Div => a / b,
            BinaryOp::Pow => a.powf(b),
        }
    }
}

impl CompareOp {
    pub fn apply(self, a: f64, b: f64) -> f64 {
        let holds = match self {
            CompareOp::Lt => a < b,
            CompareOp::Le => a <= b,
            CompareOp::Eq => a == b,
            CompareOp::Ge => a >= b,
            CompareOp::Gt => a > b,
        };
        if holds {
            1.0
        } else {
            0.0
        }
    }
}

impl AggSchema {
    /// `α_0`, the value of the aggregate over no records.
    pub fn identity(self) -> f64 {
        match self {
            AggSchema::Sum => 0.0,
            AggSchema::Min => f64::INFINITY,
            AggSchema::Max => f64::NEG_INFINITY,
        }
    }

    /// `α_n(v_1, …, v_n)`.
    pub fn reduce(self, values: &[f64]) -> f64 {
        values
            .iter()
            .fold(self.identity(), |acc, &v| self.merge(acc, v))
    }

    /// The monoid operation on one coordinate.
    pub fn merge(self, a: f64, b: f64) -> f64 {
        match self {
            AggSchema::Sum => a + b,
            AggSchema::Min => a.min(b),
            AggSchema::Max => a.max(b),
        }
    }

    /// Whether per-block aggregates merge into the aggregate of the union.
    /// All shipped schemas do; the check exists so program validation can
    /// state the requirement explicitly.
    pub fn is_mergeable(self) -> bool {
        true
    }
}

/// One entry of [`SignatureDescription`].
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SymbolInfo {
    pub family: &'static str,
    pub name: String,
    pub arity: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub identity: Option<f64>,
}

/// A listing of the base signature.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SignatureDescription {
    pub symbols: Vec<SymbolInfo>,
}

impl SignatureDescription {
    /// Arity of a symbol by name. Aggregations are written `sum_j`, `min_j`,
    /// `max_j` for any axis `j ≥ 1`; permutations as `perm`.
    pub fn arity(&self, name: &str) -> Option<usize> {
        if let Some((schema, axis)) = name.rsplit_once('_') {
            if schema.parse::<AggSchema>().is_ok() && axis.parse::<usize>().is_ok_and(|j| j >= 1) {
                return Some(1);
            }
        }
        self.symbols
            .iter()
            .find(|s| s.name == name)
            .map(|s| s.arity)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.arity(name).is_some()
    }
}

/// The shipped base signature.
pub fn builtin_signature() -> SignatureDescription {
    let mut symbols = Vec::new();
    let mut push = |family, name: &str, arity, identity| {
        symbols.push(SymbolInfo {
            family,
            name: name.to_string(),
            arity,
            identity,
        })
    };
    for u in UnaryOp::ALL {
        push("unary", u.name(), 1, None);
    }
    for b in BinaryOp::ALL {
        push("binary", b.name(), 2, None);
    }
    for g in CompareOp::ALL {
        push("compare", g.name(), 2, None);
    }
    for a in AggSchema::ALL {
        push("aggregation", a.name(), 1, Some(a.identity()));
    }
    push("permutation", "perm", 1, None);
    push("matmul", "matmul_fed_sh", 2, None);
    push("matmul", "matmul_sh_fed", 2, None);
    push("matmul", "matmul_fed_fed", 2, None);
    SignatureDescription { symbols }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn arities() {
        let sig = builtin_signature();
        assert_eq!(sig.arity("add"), Some(2));
        assert_eq!(sig.arity("sum_1"), Some(1));
        assert_eq!(sig.arity("max_3"), Some(1));
        assert_eq!(sig.arity("sum_0"), None);
        assert_eq!(sig.arity("matmul_fed_fed"), Some(2));
        assert!(sig.contains("sigmoid"));
        assert!(!sig.contains("softmax"));
    }

    #[test]
    fn identities() {
        assert_eq!(AggSchema::Sum.reduce(&[]), 0.0);
        assert_eq!(AggSchema::Min.reduce(&[]), f64::INFINITY);
        assert_eq!(AggSchema::Max.reduce(&[]), f64::NEG_INFINITY);
        assert_eq!(AggSchema::Min.reduce(&[3.0, -1.0, 2.0]), -1.0);
    }

    #[test]
    fn comparisons_are_indicator_valued() {
        for g in CompareOp::ALL {
            for (a, b) in [(1.0, 2.0), (2.0, 2.0), (3.0, 2.0)] {
                let v = g.apply(a, b);
                assert!(v == 0.0 || v == 1.0);
            }
        }
        assert_eq!(CompareOp::Le.apply(2.0, 2.0), 1.0);
        assert_eq!(UnaryOp::Sigmoid.apply(0.0), 0.5);
    }
}
