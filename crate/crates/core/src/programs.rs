//! Ready-made one-round programs for common federated summaries.
//!
//! Scalar summaries read `x : Fed_1(())`. The Gram block reads
//! `x : Fed_1((p))`; the cross block reads packed `x : Fed_1((p+1))` with the
//! response in the last column.

use crate::ast::{Expr, FedType};
use crate::factorize::{Component, OneRoundProgram};
use crate::signature::{AggSchema, BinaryOp};
use crate::tensor::{Permutation, Shape, TensorValue};

fn agg(name: &str, encoder: Expr, schema: AggSchema) -> (String, Component) {
    (name.to_string(), Component::Agg { encoder, schema })
}

fn scalar_program(components: Vec<(String, Component)>, decoder: Expr) -> OneRoundProgram {
    OneRoundProgram {
        input: "x".into(),
        input_type: FedType::new(1, []),
        params: vec![],
        components,
        decoder,
    }
}

/// `x^0`, which is 1 for every record.
fn ones() -> Expr {
    Expr::binary(BinaryOp::Pow, Expr::var("x"), Expr::scalar(0.0))
}

pub fn sum() -> OneRoundProgram {
    scalar_program(vec![agg("s", Expr::var("x"), AggSchema::Sum)], Expr::var("s"))
}

pub fn count() -> OneRoundProgram {
    scalar_program(vec![agg("n", ones(), AggSchema::Sum)], Expr::var("n"))
}

pub fn mean() -> OneRoundProgram {
    scalar_program(
        vec![agg("s", Expr::var("x"), AggSchema::Sum), agg("n", ones(), AggSchema::Sum)],
        Expr::div(Expr::var("s"), Expr::var("n")),
    )
}

/// Population variance from sum, sum of squares and count.
pub fn variance() -> OneRoundProgram {
    let square = Expr::unary(crate::signature::UnaryOp::Square, Expr::var("x"));
    let mean = Expr::div(Expr::var("s"), Expr::var("n"));
    scalar_program(
        vec![
            agg("s", Expr::var("x"), AggSchema::Sum),
            agg("s2", square, AggSchema::Sum),
            agg("n", ones(), AggSchema::Sum),
        ],
        Expr::sub(
            Expr::div(Expr::var("s2"), Expr::var("n")),
            Expr::unary(crate::signature::UnaryOp::Square, mean),
        ),
    )
}

pub fn minimum() -> OneRoundProgram {
    scalar_program(vec![agg("lo", Expr::var("x"), AggSchema::Min)], Expr::var("lo"))
}

pub fn maximum() -> OneRoundProgram {
    scalar_program(vec![agg("hi", Expr::var("x"), AggSchema::Max)], Expr::var("hi"))
}

fn transpose(e: Expr) -> Expr {
    Expr::perm(Permutation::swap(2, 1, 2).expect("rank 2"), e)
}

/// `XᵀX` for `x : Fed_1((p))`.
pub fn gram(p: usize) -> OneRoundProgram {
    OneRoundProgram {
        input: "x".into(),
        input_type: FedType::new(1, [p]),
        params: vec![],
        components: vec![(
            "g".into(),
            Component::Mat {
                left: transpose(Expr::var("x")),
                right: Expr::var("x"),
            },
        )],
        decoder: Expr::var("g"),
    }
}

/// `Xᵀy` as a `(p, 1)` block for packed `x : Fed_1((p+1))`.
pub fn cross(p: usize) -> OneRoundProgram {
    let pick_response = TensorValue::from_fn(Shape::from([p + 1, 1]), |i| if i[0] == p { 1.0 } else { 0.0 });
    OneRoundProgram {
        input: "x".into(),
        input_type: FedType::new(1, [p + 1]),
        params: vec![],
        components: vec![(
            "c".into(),
            Component::Mat {
                left: transpose(Expr::ext("project_features", vec![Expr::var("x")])),
                right: Expr::matmul_fed_sh(Expr::var("x"), Expr::lit(pick_response)),
            },
        )],
        decoder: Expr::var("c"),
    }
}

/// The named corpus, with the feature count used for the matrix blocks.
pub fn corpus(p: usize) -> Vec<(&'static str, OneRoundProgram)> {
    vec![
        ("sum", sum()),
        ("count", count()),
        ("mean", mean()),
        ("variance", variance()),
        ("gram", gram(p)),
        ("cross", cross(p)),
        ("min", minimum()),
        ("max", maximum()),
    ]
}
