//! Losses with per-record gradient (and optional curvature) expressions, and
//! iterative programs for server-side optimizers built from them.
//!
//! Data follow a packed layout: a `Fed_1((p+1))` tensor whose first `p`
//! columns are features and whose last column is the response.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ast::{is_client_local, Context, Expr, FedType, TensorType};
use crate::eval::{eval_centralized, Environment, EvalError};
use crate::extensions::Registry;
use crate::factorize::{Component, IterativeProgram, OneRoundProgram};
use crate::federated::FederatedValue;
use crate::signature::{AggSchema, UnaryOp};
use crate::tensor::{Shape, TensorValue};
use crate::typecheck::typecheck;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LearningError {
    #[error("feature dimension must be at least 1")]
    NoFeatures,
    #[error("noise variance must be positive, got {0}")]
    Variance(f64),
    #[error("{role}: {message}")]
    Invalid { role: &'static str, message: String },
    #[error("{0} needs a curvature expression")]
    MissingCurvature(OptimizerKind),
    #[error("{0} needs a vector parameter")]
    ParameterShape(OptimizerKind),
    #[error("initial parameter has shape {found}, expected {expected}")]
    Theta0 { expected: Shape, found: Shape },
    #[error("step must be positive, got {0}")]
    Step(f64),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

/// A loss `ℓ(x, θ) : Fed_1(())` with a per-record gradient `γ(x, θ) : Fed_1(𝛕)`
/// and, for vector parameters, an optional per-record curvature
/// `B(x, θ) : Fed_1((p, p))`.
#[derive(Clone, Debug, PartialEq)]
pub struct RepresentableLoss {
    pub name: String,
    pub input: String,
    pub input_type: FedType,
    pub theta: String,
    pub theta_shape: Shape,
    pub loss: Expr,
    pub gradient: Option<Expr>,
    pub curvature: Option<Expr>,
}

impl RepresentableLoss {
    pub fn context(&self) -> Context {
        Context::new()
            .with(self.input.clone(), TensorType::Fed(self.input_type.clone()))
            .with(self.theta.clone(), TensorType::Sh(self.theta_shape.clone()))
    }

    /// Checks that `ℓ`, `γ` and `B` are client-local with the expected types.
    pub fn validate(&self, registry: &Registry) -> Result<(), LearningError> {
        let ctx = self.context();
        let check = |role: &'static str, e: &Expr, want: TensorType| -> Result<(), LearningError> {
            let report = is_client_local(&ctx, e, registry).map_err(|err| LearningError::Invalid {
                role,
                message: err.to_string(),
            })?;
            if !report.is_client_local() {
                return Err(LearningError::Invalid {
                    role,
                    message: "not client-local".into(),
                });
            }
            if report.ty != want {
                return Err(LearningError::Invalid {
                    role,
                    message: format!("has type {}, expected {want}", report.ty),
                });
            }
            Ok(())
        };
        check("loss", &self.loss, TensorType::fed(1, []))?;
        if let Some(g) = &self.gradient {
            check("gradient", g, TensorType::fed(1, self.theta_shape.clone()))?;
        }
        if let Some(b) = &self.curvature {
            let p = match self.theta_shape.dims() {
                [p] => *p,
                _ => {
                    return Err(LearningError::Invalid {
                        role: "curvature",
                        message: "curvature needs a vector parameter".into(),
                    })
                }
            };
            check("curvature", b, TensorType::fed(1, [p, p]))?;
        }
        Ok(())
    }

    fn gradient_expr(&self) -> Result<&Expr, LearningError> {
        self.gradient.as_ref().ok_or(LearningError::Invalid {
            role: "gradient",
            message: "missing".into(),
        })
    }

    /// One-round program computing `G(X, θ) = Σ_records γ`.
    pub fn gradient_program(&self) -> Result<OneRoundProgram, LearningError> {
        Ok(OneRoundProgram {
            input: self.input.clone(),
            input_type: self.input_type.clone(),
            params: vec![(self.theta.clone(), self.theta_shape.clone())],
            components: vec![("g".into(), gradient_component(self)?)],
            decoder: Expr::var("g"),
        })
    }

    /// `L(X, θ) = Σ_records ℓ`, evaluated on the virtual global tensor.
    pub fn total_loss(&self, x: &FederatedValue, theta: &TensorValue, registry: &Registry) -> Result<f64, LearningError> {
        let mut env = Environment::new();
        env.bind_federated(self.input.clone(), x.clone())?;
        env.bind_shared(self.theta.clone(), theta.clone());
        let v = eval_centralized(&env, &Expr::sum(1, self.loss.clone()), registry)?;
        Ok(v.value.data()[0])
    }
}

/// `Sum_1(γ)` as an aggregation component.
pub fn gradient_component(loss: &RepresentableLoss) -> Result<Component, LearningError> {
    Ok(Component::Agg {
        encoder: loss.gradient_expr()?.clone(),
        schema: AggSchema::Sum,
    })
}

/// Central differences of `L` in every coordinate of `θ`.
pub fn finite_diff_gradient(
    loss: &RepresentableLoss,
    x: &FederatedValue,
    theta: &TensorValue,
    h: f64,
    registry: &Registry,
) -> Result<TensorValue, LearningError> {
    if h <= 0.0 || !h.is_finite() {
        return Err(LearningError::Step(h));
    }
    let mut grad = Vec::with_capacity(theta.numel());
    for j in 0..theta.numel() {
        let shifted = |delta: f64| {
            let mut d = theta.data().to_vec();
            d[j] += delta;
            TensorValue::new(theta.shape().clone(), d).expect("same shape")
        };
        let up = loss.total_loss(x, &shifted(h), registry)?;
        let down = loss.total_loss(x, &shifted(-h), registry)?;
        grad.push((up - down) / (2.0 * h));
    }
    Ok(TensorValue::new(theta.shape().clone(), grad).expect("same shape"))
}

fn features(x: &str) -> Expr {
    Expr::ext("project_features", vec![Expr::var(x)])
}

fn response(x: &str) -> Expr {
    Expr::ext("project_response", vec![Expr::var(x)])
}

/// `z = x_aᵀθ` per record, as `Fed_1(())`.
fn linear_predictor(x: &str, theta: &str) -> Expr {
    Expr::sum(
        2,
        Expr::matmul_fed_sh(features(x), Expr::ext("as_column", vec![Expr::var(theta)])),
    )
}

/// Logistic regression with `p` features.
pub fn build_logistic(p: usize) -> Result<RepresentableLoss, LearningError> {
    if p < 1 {
        return Err(LearningError::NoFeatures);
    }
    let z = linear_predictor("x", "theta");
    let y = response("x");
    let loss = Expr::sub(
        Expr::unary(UnaryOp::Log, Expr::add(Expr::unary(UnaryOp::Exp, z.clone()), Expr::scalar(1.0))),
        Expr::mul(y.clone(), z.clone()),
    );
    let residual = Expr::sub(Expr::unary(UnaryOp::Sigmoid, z), y);
    let gradient = Expr::ext("scale_rows", vec![residual, features("x")]);
    Ok(RepresentableLoss {
        name: "logistic".into(),
        input: "x".into(),
        input_type: FedType::new(1, [p + 1]),
        theta: "theta".into(),
        theta_shape: Shape::from([p]),
        loss,
        gradient: Some(gradient),
        curvature: None,
    })
}

/// Gaussian linear regression with `p` features and noise variance `σ²`.
pub fn build_gaussian_linear(p: usize, sigma2: f64) -> Result<RepresentableLoss, LearningError> {
    if p < 1 {
        return Err(LearningError::NoFeatures);
    }
    if !(sigma2 > 0.0 && sigma2.is_finite()) {
        return Err(LearningError::Variance(sigma2));
    }
    let r = Expr::sub(linear_predictor("x", "theta"), response("x"));
    let loss = Expr::div(Expr::unary(UnaryOp::Square, r.clone()), Expr::scalar(2.0 * sigma2));
    let gradient = Expr::ext("scale_rows", vec![Expr::div(r, Expr::scalar(sigma2)), features("x")]);
    let curvature = Expr::div(Expr::ext("outer_rows", vec![features("x")]), Expr::scalar(sigma2));
    Ok(RepresentableLoss {
        name: "gaussian".into(),
        input: "x".into(),
        input_type: FedType::new(1, [p + 1]),
        theta: "theta".into(),
        theta_shape: Shape::from([p]),
        loss,
        gradient: Some(gradient),
        curvature: Some(curvature),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    Gd,
    Momentum,
    Adam,
    DampedNewton,
}

impl OptimizerKind {
    pub const ALL: [OptimizerKind; 4] = [
        OptimizerKind::Gd,
        OptimizerKind::Momentum,
        OptimizerKind::Adam,
        OptimizerKind::DampedNewton,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OptimizerKind::Gd => "gd",
            OptimizerKind::Momentum => "momentum",
            OptimizerKind::Adam => "adam",
            OptimizerKind::DampedNewton => "damped-newton",
        }
    }

    /// Number of parameter-shaped slots in the optimizer state.
    pub fn slots(self) -> usize {
        match self {
            OptimizerKind::Gd | OptimizerKind::DampedNewton => 1,
            OptimizerKind::Momentum => 2,
            OptimizerKind::Adam => 3,
        }
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OptimizerKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "gd" => Ok(OptimizerKind::Gd),
            "momentum" => Ok(OptimizerKind::Momentum),
            "adam" => Ok(OptimizerKind::Adam),
            "damped-newton" | "newton" => Ok(OptimizerKind::DampedNewton),
            _ => Err(format!("unknown optimizer `{s}`")),
        }
    }
}

/// A per-round hyperparameter. A list repeats its last value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Schedule {
    Constant(f64),
    Values(Vec<f64>),
}

impl Schedule {
    pub fn at(&self, t: usize) -> f64 {
        match self {
            Schedule::Constant(v) => *v,
            Schedule::Values(vs) => vs.get(t).or(vs.last()).copied().unwrap_or(0.0),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerSpec {
    pub kind: OptimizerKind,
    pub eta: Schedule,
    pub beta: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub lambda: Schedule,
}

impl OptimizerSpec {
    pub fn new(kind: OptimizerKind, eta: f64) -> Self {
        OptimizerSpec {
            kind,
            eta: Schedule::Constant(eta),
            beta: 0.9,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            lambda: Schedule::Constant(0.0),
        }
    }

    pub fn with_lambda(mut self, lambda: f64) -> Self {
        self.lambda = Schedule::Constant(lambda);
        self
    }
}

/// An optimizer as an iterative program, with the layout of its state.
///
/// For `gd` and `damped-newton` the state is `θ` itself. For `momentum` and
/// `adam` the state stacks `θ` and its moments along a new leading axis.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerProgram {
    pub program: IterativeProgram,
    pub kind: OptimizerKind,
    pub theta_shape: Shape,
}

impl OptimizerProgram {
    /// Shape of the state carried between rounds.
    pub fn state_shape(&self) -> Shape {
        state_shape(self.kind, &self.theta_shape)
    }

    /// The parameter stored in a state tensor.
    pub fn theta_of(&self, state: &TensorValue) -> TensorValue {
        if self.kind.slots() == 1 {
            return state.clone();
        }
        let n = self.theta_shape.numel();
        TensorValue::new(self.theta_shape.clone(), state.data()[..n].to_vec()).expect("slot 0")
    }

    /// Packs `θ` with zero moments into a state tensor.
    pub fn initial_state(&self, theta0: &TensorValue) -> TensorValue {
        pack_initial(self.kind, theta0)
    }
}

fn state_shape(kind: OptimizerKind, theta: &Shape) -> Shape {
    if kind.slots() == 1 {
        theta.clone()
    } else {
        theta.insert_axis(1, kind.slots()).expect("leading axis")
    }
}

fn pack_initial(kind: OptimizerKind, theta0: &TensorValue) -> TensorValue {
    if kind.slots() == 1 {
        return theta0.clone();
    }
    let mut data = theta0.data().to_vec();
    data.resize(theta0.numel() * kind.slots(), 0.0);
    TensorValue::new(state_shape(kind, theta0.shape()), data).expect("stacked")
}

/// One-hot selector of shape `(k, 1, …, 1)` that broadcasts against a
/// stacked state of rank `1 + rank`.
fn selector(k: usize, slot: usize, rank: usize) -> TensorValue {
    let mut dims = vec![k];
    dims.extend(std::iter::repeat_n(1, rank));
    TensorValue::from_fn(dims, |i| if i[0] == slot { 1.0 } else { 0.0 })
}

/// `state[slot]` as a base-language expression.
fn unstack(state: &str, k: usize, slot: usize, rank: usize) -> Expr {
    Expr::sum(1, Expr::mul(Expr::var(state), Expr::lit(selector(k, slot, rank))))
}

/// Stacks `parts` along a new leading axis.
fn stack(parts: Vec<Expr>, rank: usize) -> Expr {
    let k = parts.len();
    parts
        .into_iter()
        .enumerate()
        .map(|(slot, e)| Expr::mul(e, Expr::lit(selector(k, slot, rank))))
        .reduce(Expr::add)
        .expect("nonempty")
}

fn lit(v: f64) -> Expr {
    Expr::scalar(v)
}

/// Builds the iterative program running `opt` for `rounds` rounds from `θ₀`.
pub fn build_optimizer_program(
    loss: &RepresentableLoss,
    opt: &OptimizerSpec,
    rounds: usize,
    theta0: &TensorValue,
    registry: &Registry,
) -> Result<OptimizerProgram, LearningError> {
    loss.validate(registry)?;
    if theta0.shape() != &loss.theta_shape {
        return Err(LearningError::Theta0 {
            expected: loss.theta_shape.clone(),
            found: theta0.shape().clone(),
        });
    }
    let gamma = loss.gradient_expr()?.clone();
    let kind = opt.kind;
    if kind == OptimizerKind::DampedNewton {
        if loss.theta_shape.rank() != 1 {
            return Err(LearningError::ParameterShape(kind));
        }
        if loss.curvature.is_none() {
            return Err(LearningError::MissingCurvature(kind));
        }
    }
    let rank = loss.theta_shape.rank();
    let k = kind.slots();
    let state_name = ["state", "opt_state", "optimizer_state"]
        .into_iter()
        .find(|n| *n != loss.input && *n != loss.theta)
        .expect("three distinct names");
    let (state_var, theta_expr) = if k == 1 {
        (loss.theta.clone(), Expr::var(&loss.theta))
    } else {
        (state_name.to_string(), unstack(state_name, k, 0, rank))
    };
    let bind_theta = |e: &Expr| -> Expr {
        if k == 1 {
            e.clone()
        } else {
            e.substitute(&[(loss.theta.clone(), theta_expr.clone())].into())
        }
    };
    let sshape = state_shape(kind, &loss.theta_shape);
    let mut components = vec![(
        "g".to_string(),
        Component::Agg {
            encoder: bind_theta(&gamma),
            schema: AggSchema::Sum,
        },
    )];
    if kind == OptimizerKind::DampedNewton {
        components.push((
            "c".to_string(),
            Component::Agg {
                encoder: bind_theta(loss.curvature.as_ref().expect("checked")),
                schema: AggSchema::Sum,
            },
        ));
    }
    let g = Expr::var("g");
    let program_rounds = (0..rounds)
        .map(|t| {
            let eta = lit(opt.eta.at(t));
            let decoder = match kind {
                OptimizerKind::Gd => Expr::sub(theta_expr.clone(), Expr::mul(eta, g.clone())),
                OptimizerKind::Momentum => {
                    let v = Expr::add(Expr::mul(lit(opt.beta), unstack(&state_var, k, 1, rank)), g.clone());
                    let theta = Expr::sub(theta_expr.clone(), Expr::mul(eta, v.clone()));
                    stack(vec![theta, v], rank)
                }
                OptimizerKind::Adam => {
                    let m = Expr::add(
                        Expr::mul(lit(opt.beta1), unstack(&state_var, k, 1, rank)),
                        Expr::mul(lit(1.0 - opt.beta1), g.clone()),
                    );
                    let w = Expr::add(
                        Expr::mul(lit(opt.beta2), unstack(&state_var, k, 2, rank)),
                        Expr::mul(lit(1.0 - opt.beta2), Expr::unary(UnaryOp::Square, g.clone())),
                    );
                    let power = (t + 1) as i32;
                    let m_hat = Expr::div(m.clone(), lit(1.0 - opt.beta1.powi(power)));
                    let w_hat = Expr::div(w.clone(), lit(1.0 - opt.beta2.powi(power)));
                    let step = Expr::div(m_hat, Expr::add(Expr::unary(UnaryOp::Sqrt, w_hat), lit(opt.eps)));
                    let theta = Expr::sub(theta_expr.clone(), Expr::mul(eta, step));
                    stack(vec![theta, m, w], rank)
                }
                OptimizerKind::DampedNewton => {
                    let c = Expr::var("c");
                    let damped = Expr::add(
                        c.clone(),
                        Expr::mul(lit(opt.lambda.at(t)), Expr::ext("eye_like", vec![c])),
                    );
                    Expr::sub(
                        theta_expr.clone(),
                        Expr::mul(eta, Expr::ext("solve", vec![damped, g.clone()])),
                    )
                }
            };
            OneRoundProgram {
                input: loss.input.clone(),
                input_type: loss.input_type.clone(),
                params: vec![(state_var.clone(), sshape.clone())],
                components: components.clone(),
                decoder,
            }
        })
        .collect();
    Ok(OptimizerProgram {
        program: IterativeProgram {
            theta_name: state_var,
            theta0: pack_initial(kind, theta0),
            rounds: program_rounds,
        },
        kind,
        theta_shape: loss.theta_shape.clone(),
    })
}

/// Evaluates `expr` under the loss context on the virtual global tensor; a
/// small helper for reporting per-record quantities.
pub fn eval_record_expr(
    loss: &RepresentableLoss,
    expr: &Expr,
    x: &FederatedValue,
    theta: &TensorValue,
    registry: &Registry,
) -> Result<TensorValue, LearningError> {
    let mut env = Environment::new();
    env.bind_federated(loss.input.clone(), x.clone())?;
    env.bind_shared(loss.theta.clone(), theta.clone());
    let ctx = env.context();
    typecheck(&ctx, expr, registry).map_err(EvalError::from)?;
    Ok(eval_centralized(&env, expr, registry)?.value)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::factorize::{extract_plan, run_iterative, validate_iterative};
    use crate::federated::Federation;
    use crate::typecheck::typecheck;

    fn reg() -> Registry {
        Registry::default()
    }

    fn packed(rows_per_client: &[Vec<Vec<f64>>]) -> FederatedValue {
        let fed = Federation::numbered(rows_per_client.len()).unwrap();
        let width = rows_per_client.iter().flatten().next().map(|r| r.len()).unwrap();
        let locals = rows_per_client
            .iter()
            .map(|rows| {
                let data: Vec<f64> = rows.iter().flatten().copied().collect();
                TensorValue::new([rows.len(), width], data).unwrap()
            })
            .collect();
        FederatedValue::new(fed, 1, [width].into(), locals).unwrap()
    }

    #[test]
    fn shipped_losses_validate() {
        build_logistic(3).unwrap().validate(&reg()).unwrap();
        build_gaussian_linear(2, 0.5).unwrap().validate(&reg()).unwrap();
        assert_eq!(build_logistic(0), Err(LearningError::NoFeatures));
        assert!(build_gaussian_linear(2, 0.0).is_err());
    }

    #[test]
    fn logistic_single_record_gradient() {
        let loss = build_logistic(2).unwrap();
        let plan = extract_plan(&loss.gradient_program().unwrap(), &reg()).unwrap();
        let x = packed(&[vec![vec![1.0, 0.0, 1.0]]]);
        let params = [("theta".to_string(), TensorValue::vector(vec![0.0, 0.0]))].into();
        assert_eq!(plan.run(&x, &params).unwrap().data(), &[-0.5, 0.0]);
        let l = loss.total_loss(&x, &TensorValue::vector(vec![0.0, 0.0]), &reg()).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn gaussian_single_record() {
        let loss = build_gaussian_linear(1, 1.0).unwrap();
        let x = packed(&[vec![vec![1.0, 0.0]]]);
        let theta = TensorValue::vector(vec![3.0]);
        let g = eval_record_expr(&loss, loss.gradient.as_ref().unwrap(), &x, &theta, &reg()).unwrap();
        assert_eq!(g.data(), &[3.0]);
        let b = eval_record_expr(&loss, loss.curvature.as_ref().unwrap(), &x, &theta, &reg()).unwrap();
        assert_eq!(b.data(), &[1.0]);
    }

    #[test]
    fn newton_identity_design() {
        let loss = build_gaussian_linear(2, 1.0).unwrap();
        let x = packed(&[vec![vec![1.0, 0.0, 2.0]], vec![vec![0.0, 1.0, 3.0]]]);
        let opt = OptimizerSpec::new(OptimizerKind::DampedNewton, 1.0);
        let prog = build_optimizer_program(&loss, &opt, 1, &TensorValue::zeros([2]), &reg()).unwrap();
        let run = run_iterative(&prog.program, &x, &reg()).unwrap();
        assert_eq!(prog.theta_of(&run.theta).data(), &[2.0, 3.0]);
    }

    #[test]
    fn zero_step_is_fixed_point() {
        let loss = build_logistic(2).unwrap();
        let x = packed(&[vec![vec![0.5, -1.0, 1.0], vec![2.0, 0.25, 0.0]]]);
        let theta0 = TensorValue::vector(vec![0.3, -0.7]);
        for kind in OptimizerKind::ALL {
            if kind == OptimizerKind::DampedNewton {
                continue;
            }
            let prog = build_optimizer_program(&loss, &OptimizerSpec::new(kind, 0.0), 3, &theta0, &reg()).unwrap();
            let run = run_iterative(&prog.program, &x, &reg()).unwrap();
            assert_eq!(prog.theta_of(&run.theta), theta0, "{kind}");
        }
    }

    #[test]
    fn state_layout_and_decoders() {
        let loss = build_gaussian_linear(3, 2.0).unwrap();
        let theta0 = TensorValue::vector(vec![1.0, 2.0, 3.0]);
        for kind in OptimizerKind::ALL {
            let prog = build_optimizer_program(&loss, &OptimizerSpec::new(kind, 0.1), 2, &theta0, &reg()).unwrap();
            let shapes = validate_iterative(&prog.program, &reg()).unwrap();
            assert!(shapes.iter().all(|s| *s == prog.state_shape()));
            assert_eq!(prog.theta_of(&prog.program.theta0), theta0);
            for round in &prog.program.rounds {
                assert_eq!(round.params.len(), 1);
                let mut ctx = Context::new().with(round.params[0].0.clone(), TensorType::Sh(round.params[0].1.clone()));
                for (name, _) in &round.components {
                    ctx.insert(name.clone(), TensorType::sh(if name == "c" { vec![3, 3] } else { vec![3] }));
                }
                assert!(typecheck(&ctx, &round.decoder, &reg()).unwrap().is_shared());
            }
        }
        let logistic = build_logistic(2).unwrap();
        let err = build_optimizer_program(
            &logistic,
            &OptimizerSpec::new(OptimizerKind::DampedNewton, 1.0),
            1,
            &TensorValue::zeros([2]),
            &reg(),
        )
        .unwrap_err();
        assert_eq!(err, LearningError::MissingCurvature(OptimizerKind::DampedNewton));
    }
}
