//! Subcommand implementations. Each returns the JSON document to print and,
//! for checks that completed but did not pass, the failure to report.

use std::fs;
use std::path::Path;

use fedtensor_core::ast::{Context, FedType, TensorType};
use fedtensor_core::eval::{deviation, eval_centralized, eval_distributed, Environment};
use fedtensor_core::factorize::{
    extract_plan, run_iterative, run_iterative_with, validate_iterative, validate_one_round, IterativeProgram,
    IterativeRun, OneRoundProgram, Params, PlanError,
};
use fedtensor_core::fedsim::{simulate_iterative, ChannelTransport, MessageLedger, Simulator};
use fedtensor_core::federated::FederatedValue;
use fedtensor_core::format::{
    load_data, load_program, plan_to_json, shape_to_json, tensor_from_json, tensor_to_json, type_to_json,
    value_to_json, DataDocument, FormatError, ProgramDocument,
};
use fedtensor_core::learning::{
    build_gaussian_linear, build_logistic, build_optimizer_program, OptimizerKind, OptimizerSpec,
};
use fedtensor_core::privacy::{apply_mechanism, Calibration, MechanismKind, MechanismSpec, Placement, PrivacyError};
use fedtensor_core::selfcheck::run_all;
use fedtensor_core::tensor::{Shape, TensorValue};
use fedtensor_core::typecheck::typecheck;
use fedtensor_core::Registry;
use serde_json::{json, Value as Json};

use crate::error::{Failure, EXIT_INVALID};
use crate::{DpArgs, Mode, Model, PlanArgs, RunArgs, SelfcheckArgs, TrainArgs};

pub type Reply = (Json, Option<Failure>);

fn read(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| Failure::io(path, e))
}

fn write(path: &Path, text: &str) -> Result<(), Failure> {
    fs::write(path, text).map_err(|e| Failure::io(path, e))
}

fn load_doc(path: &Path, reg: &Registry) -> Result<ProgramDocument, Failure> {
    Ok(load_program(&read(path)?, reg)?)
}

fn load_data_doc(path: &Path) -> Result<DataDocument, Failure> {
    Ok(load_data(&read(path)?)?)
}

fn input_error(message: impl Into<String>) -> Failure {
    Failure::new(EXIT_INVALID, "input", message)
}

fn federated_input(data: &DataDocument, name: &str) -> Result<FederatedValue, Failure> {
    data.federated
        .get(name)
        .cloned()
        .ok_or_else(|| input_error(format!("data has no federated tensor `{name}`")))
}

fn typed_input(data: &DataDocument, name: &str, expected: &FedType) -> Result<FederatedValue, Failure> {
    let x = federated_input(data, name)?;
    if x.record_axis() != expected.record_axis || x.nonrecord_shape() != &expected.nonrecord {
        return Err(input_error(format!(
            "`{name}` has type {}, the program expects {}",
            TensorType::Fed(FedType::new(x.record_axis(), x.nonrecord_shape().clone())),
            TensorType::Fed(expected.clone())
        )));
    }
    Ok(x)
}

fn params_for(p: &OneRoundProgram, data: &DataDocument) -> Result<Params, Failure> {
    p.params
        .iter()
        .map(|(name, shape)| {
            let t = data
                .shared
                .get(name)
                .ok_or_else(|| input_error(format!("data has no shared tensor `{name}`")))?;
            if t.shape() != shape {
                return Err(input_error(format!("shared `{name}` has shape {}, expected {shape}", t.shape())));
            }
            Ok((name.clone(), t.clone()))
        })
        .collect()
}

fn type_json(ty: &TensorType) -> Json {
    json!({ "type": type_to_json(ty), "display": ty.to_string() })
}

fn decoder_type(p: &OneRoundProgram, shapes: &[Shape], reg: &Registry) -> Result<TensorType, Failure> {
    let mut ctx = Context::new();
    for (name, s) in &p.params {
        ctx.insert(name.clone(), TensorType::Sh(s.clone()));
    }
    for ((name, _), s) in p.components.iter().zip(shapes) {
        ctx.insert(name.clone(), TensorType::Sh(s.clone()));
    }
    Ok(typecheck(&ctx, &p.decoder, reg).map_err(FormatError::Type)?)
}

pub fn check(path: &Path) -> Result<Reply, Failure> {
    let reg = Registry::default();
    let doc = load_doc(path, &reg)?;
    let out = match &doc {
        ProgramDocument::Expr { context, body } => {
            let ty = typecheck(context, body, &reg).map_err(FormatError::Type)?;
            json!({ "kind": doc.kind(), "output": type_json(&ty) })
        }
        ProgramDocument::OneRound(p) => {
            let shapes = validate_one_round(p, &reg).map_err(FormatError::Validation)?;
            let components: Vec<Json> = p
                .components
                .iter()
                .zip(&shapes)
                .map(|((name, _), s)| json!({ "name": name, "shape": shape_to_json(s) }))
                .collect();
            let ty = decoder_type(p, &shapes, &reg)?;
            json!({ "kind": doc.kind(), "components": components, "output": type_json(&ty) })
        }
        ProgramDocument::Iterative(p) => {
            let taus = validate_iterative(p, &reg).map_err(FormatError::Validation)?;
            let last = TensorType::Sh(taus.last().cloned().unwrap_or_else(Shape::scalar));
            json!({
                "kind": doc.kind(),
                "rounds": p.rounds.len(),
                "state_shapes": taus.iter().map(shape_to_json).collect::<Vec<_>>(),
                "output": type_json(&last),
            })
        }
    };
    Ok((out, None))
}

/// The mechanism described by the DP flags, if any.
fn mechanism(dp: &DpArgs, seed: u64) -> Result<Option<MechanismSpec>, Failure> {
    let Some(kind) = &dp.dp_kind else {
        if dp.dp_placement.is_some() || dp.dp_sigma.is_some() || dp.dp_epsilon.is_some() || dp.dp_delta.is_some() {
            return Err(Failure::usage("DP flags need --dp-kind"));
        }
        return Ok(None);
    };
    let kind: MechanismKind = kind.parse().map_err(Failure::usage)?;
    let placement = match &dp.dp_placement {
        Some(p) => p.parse().map_err(Failure::usage)?,
        None if kind.is_local() => Placement::PerClientMessage,
        None => Placement::MergedState,
    };
    let spec = match (dp.dp_sigma, dp.dp_epsilon) {
        (Some(scale), _) => MechanismSpec::new(kind, placement, scale, seed),
        (None, Some(epsilon)) => {
            let delta = match (kind, dp.dp_delta) {
                (MechanismKind::LaplaceCentral, d) => d.unwrap_or(0.0),
                (_, Some(d)) => d,
                (_, None) => return Err(Failure::usage("Gaussian calibration needs --dp-delta")),
            };
            let calibration = Calibration {
                epsilon,
                delta,
                sensitivity: dp.dp_sensitivity,
            };
            MechanismSpec::calibrated(kind, placement, calibration, seed)?
        }
        (None, None) => return Err(Failure::usage("--dp-kind needs --dp-sigma or --dp-epsilon")),
    };
    spec.validate()?;
    Ok(Some(spec))
}

fn mechanism_json(spec: &MechanismSpec) -> Json {
    json!({
        "kind": spec.kind.name(),
        "placement": spec.placement.name(),
        "scale": spec.scale,
        "seed": spec.seed,
    })
}

fn deviation_json(a: &TensorValue, b: &TensorValue, tol: f64, enforced: bool) -> (Json, bool) {
    let d = deviation(a, b);
    let passed = d.within(tol);
    let v = json!({
        "max_abs": d.max_abs,
        "relative": d.relative,
        "nan_mismatch": d.nan_mismatch,
        "shape_match": d.shape_match,
        "tol": tol,
        "passed": passed,
        "enforced": enforced,
    });
    (v, passed)
}

fn ledger_summary(ledger: &MessageLedger) -> Json {
    json!({
        "messages": ledger.messages.len(),
        "message_bytes": ledger.message_sizes(),
        "merged_bytes": ledger.merged.iter().map(|m| m.bytes).collect::<Vec<_>>(),
    })
}

fn write_ledger(path: Option<&Path>, ledger: &MessageLedger) -> Result<(), Failure> {
    match path {
        Some(p) => write(p, &ledger.to_json_lines()),
        None => Ok(()),
    }
}

/// Runs every round through plans, optionally over the simulator and with a
/// mechanism attached.
fn run_rounds(
    p: &IterativeProgram,
    x: &FederatedValue,
    reg: &Registry,
    simulate: bool,
    spec: Option<&MechanismSpec>,
) -> Result<(IterativeRun, Option<MessageLedger>), Failure> {
    if simulate {
        let mut sim = Simulator::new(ChannelTransport::default());
        if let Some(s) = spec {
            sim = sim.with_mechanism(s.clone());
        }
        let run = simulate_iterative(p, x, reg, &mut sim)?;
        return Ok((run, Some(sim.into_ledger())));
    }
    let Some(spec) = spec else {
        return Ok((run_iterative(p, x, reg)?, None));
    };
    if let Some(first) = p.rounds.first() {
        apply_mechanism(&extract_plan(first, reg)?, spec)?;
    }
    let run = run_iterative_with(p, x, reg, |t, plan, x, params| {
        let private = apply_mechanism(plan, spec).map_err(privacy_to_plan)?;
        let out = private
            .run_round(t as u32, x, params, &fedtensor_core::privacy::LoopbackMerge)
            .map_err(privacy_to_plan)?;
        Ok((out.output, out.merged))
    })?;
    Ok((run, None))
}

fn privacy_to_plan(e: PrivacyError) -> PlanError {
    match e {
        PrivacyError::Plan(p) => p,
        other => PlanError::Param {
            name: "mechanism".into(),
            message: other.to_string(),
        },
    }
}

fn centralized_rounds(p: &IterativeProgram, x: &FederatedValue, reg: &Registry) -> Result<TensorValue, Failure> {
    let mut theta = p.theta0.clone();
    for round in &p.rounds {
        let mut env = Environment::new();
        env.bind_federated(round.input.clone(), x.clone())
            .map_err(|e| Failure::runtime(e.to_string()))?;
        env.bind_shared(p.theta_name.clone(), theta);
        theta = eval_centralized(&env, &round.assemble(reg), reg)?.value;
    }
    Ok(theta)
}

pub fn run(a: &RunArgs) -> Result<Reply, Failure> {
    let reg = Registry::default();
    let doc = load_doc(&a.program, &reg)?;
    let data = load_data_doc(&a.data)?;
    let spec = mechanism(&a.dp, a.seed)?;
    let simulate = a.simulate || a.ledger.is_some();
    let want_dist = a.mode != Mode::Centralized;
    let want_cent = a.mode != Mode::Distributed;
    let mut out = json!({ "kind": doc.kind(), "mode": format!("{:?}", a.mode).to_lowercase() });
    if let Some(s) = &spec {
        out["mechanism"] = mechanism_json(s);
    }
    let mut failure = None;
    let mut compare = |out: &mut Json, d: &TensorValue, c: &TensorValue| {
        let (dev, passed) = deviation_json(d, c, a.tol, spec.is_none());
        out["deviation"] = dev;
        if !passed && spec.is_none() {
            failure = Some(Failure::new(
                crate::error::EXIT_RUNTIME,
                "consistency",
                format!("distributed and centralized results differ beyond tol {}", a.tol),
            ));
        }
    };
    match &doc {
        ProgramDocument::Expr { body, .. } => {
            if simulate || spec.is_some() {
                return Err(Failure::usage("--simulate, --ledger and DP flags need a one-round or iterative program"));
            }
            let env = data.environment();
            let dist = want_dist.then(|| eval_distributed(&env, body, &reg)).transpose()?;
            let cent = want_cent.then(|| eval_centralized(&env, body, &reg)).transpose()?;
            if let Some(d) = &dist {
                out["distributed"] = value_to_json(d);
            }
            if let Some(c) = &cent {
                out["centralized"] = json!({ "type": type_to_json(&c.ty), "value": tensor_to_json(&c.value) });
            }
            if let (Some(d), Some(c)) = (&dist, &cent) {
                compare(&mut out, &d.to_global(), &c.value);
            }
        }
        ProgramDocument::OneRound(p) => {
            let x = typed_input(&data, &p.input, &p.input_type)?;
            let params = params_for(p, &data)?;
            let plan = extract_plan(p, &reg)?;
            let mut dist = None;
            if want_dist {
                let value = if simulate {
                    let mut sim = Simulator::new(ChannelTransport::default());
                    if let Some(s) = &spec {
                        sim = sim.with_mechanism(s.clone());
                    }
                    let (value, _) = sim.run_round(0, &plan, &x, &params)?;
                    let ledger = sim.into_ledger();
                    write_ledger(a.ledger.as_deref(), &ledger)?;
                    out["ledger"] = ledger_summary(&ledger);
                    value
                } else if let Some(s) = &spec {
                    apply_mechanism(&plan, s)?.run(&x, &params)?.output
                } else {
                    plan.run(&x, &params)?
                };
                out["distributed"] = json!({ "value": tensor_to_json(&value) });
                dist = Some(value);
            }
            if want_cent {
                let mut env = Environment::new();
                env.bind_federated(p.input.clone(), x.clone())
                    .map_err(|e| Failure::runtime(e.to_string()))?;
                for (name, t) in &params {
                    env.bind_shared(name.clone(), t.clone());
                }
                let c = eval_centralized(&env, &p.assemble(&reg), &reg)?;
                out["centralized"] = json!({ "type": type_to_json(&c.ty), "value": tensor_to_json(&c.value) });
                if let Some(d) = &dist {
                    compare(&mut out, d, &c.value);
                }
            }
        }
        ProgramDocument::Iterative(p) => {
            let first = p.rounds.first().expect("validated programs have rounds");
            let x = typed_input(&data, &first.input, &first.input_type)?;
            out["rounds"] = json!(p.rounds.len());
            let mut dist = None;
            if want_dist {
                let (run, ledger) = run_rounds(p, &x, &reg, simulate, spec.as_ref())?;
                if let Some(l) = &ledger {
                    write_ledger(a.ledger.as_deref(), l)?;
                    out["ledger"] = ledger_summary(l);
                }
                out["distributed"] = json!({ "theta": tensor_to_json(&run.theta) });
                dist = Some(run.theta);
            }
            if want_cent {
                let theta = centralized_rounds(p, &x, &reg)?;
                out["centralized"] = json!({ "theta": tensor_to_json(&theta) });
                if let Some(d) = &dist {
                    compare(&mut out, d, &theta);
                }
            }
        }
    }
    Ok((out, failure))
}

pub fn plan(a: &PlanArgs) -> Result<Reply, Failure> {
    let reg = Registry::default();
    let program = match load_doc(&a.program, &reg)? {
        ProgramDocument::OneRound(p) => p,
        ProgramDocument::Iterative(p) => {
            let n = p.rounds.len();
            p.rounds
                .into_iter()
                .nth(a.round)
                .ok_or_else(|| Failure::usage(format!("--round {} but the program has {n} rounds", a.round)))?
        }
        ProgramDocument::Expr { .. } => return Err(Failure::usage("plan needs a one-round or iterative program")),
    };
    let plan = extract_plan(&program, &reg)?;
    let components: Vec<Json> = plan
        .components
        .iter()
        .map(|c| json!({ "name": c.name, "shape": shape_to_json(&c.shape), "merge": c.merge.name() }))
        .collect();
    let mut out = json!({
        "components": components,
        "state_elements": plan.state_elements(),
        "state_bytes": plan.state_bytes(),
    });
    if let Some(path) = &a.output {
        let text = serde_json::to_string_pretty(&plan_to_json(&plan)).expect("json values serialize");
        write(path, &text)?;
        out["output"] = json!(path.display().to_string());
    }
    Ok((out, None))
}

pub fn train(a: &TrainArgs) -> Result<Reply, Failure> {
    let reg = Registry::default();
    let data = load_data_doc(&a.data)?;
    let x = federated_input(&data, &a.input)?;
    let width = x.nonrecord_shape().dims();
    if x.record_axis() != 1 || width.len() != 1 || width[0] < 2 {
        return Err(input_error(format!(
            "`{}` must be Fed_1((p+1)) with p >= 1 features and the response last",
            a.input
        )));
    }
    let p = width[0] - 1;
    let mut loss = match a.model {
        Model::Logistic => build_logistic(p)?,
        Model::Gaussian => build_gaussian_linear(p, a.sigma2)?,
    };
    if a.input != loss.input {
        loss = rename_input(loss, &a.input);
    }
    let kind: OptimizerKind = a.optimizer.parse().map_err(Failure::usage)?;
    if a.rounds == 0 {
        return Err(Failure::usage("--rounds must be at least 1"));
    }
    let theta0 = if a.theta0 == "zeros" {
        TensorValue::zeros(Shape::from([p]))
    } else {
        let path = Path::new(&a.theta0);
        let v = fedtensor_core::format::parse_json(&read(path)?)?;
        tensor_from_json(&v, "theta0")?
    };
    let spec = OptimizerSpec::new(kind, a.eta).with_lambda(a.lambda);
    let prog = build_optimizer_program(&loss, &spec, a.rounds, &theta0, &reg)?;
    let mech = mechanism(&a.dp, a.seed)?;
    let simulate = a.simulate || a.ledger.is_some();
    let (run, ledger) = run_rounds(&prog.program, &x, &reg, simulate, mech.as_ref())?;
    let theta = prog.theta_of(&run.theta);
    let mut out = json!({
        "model": format!("{:?}", a.model).to_lowercase(),
        "optimizer": kind.name(),
        "rounds": a.rounds,
        "theta": tensor_to_json(&theta),
        "loss": loss.total_loss(&x, &theta, &reg)?,
    });
    if let Some(s) = &mech {
        out["mechanism"] = mechanism_json(s);
    }
    if let Some(l) = &ledger {
        write_ledger(a.ledger.as_deref(), l)?;
        out["ledger"] = ledger_summary(l);
    }
    if a.trace {
        let trace = run
            .trace
            .iter()
            .map(|r| {
                let th = prog.theta_of(&r.theta_out);
                Ok(json!({
                    "round": r.round,
                    "theta": tensor_to_json(&th),
                    "loss": loss.total_loss(&x, &th, &reg)?,
                }))
            })
            .collect::<Result<Vec<_>, Failure>>()?;
        out["trace"] = Json::Array(trace);
    }
    Ok((out, None))
}

fn rename_input(
    mut loss: fedtensor_core::learning::RepresentableLoss,
    name: &str,
) -> fedtensor_core::learning::RepresentableLoss {
    let map = [(loss.input.clone(), name.to_string())].into();
    loss.loss = loss.loss.rename(&map);
    loss.gradient = loss.gradient.map(|g| g.rename(&map));
    loss.curvature = loss.curvature.map(|c| c.rename(&map));
    loss.input = name.to_string();
    loss
}

pub fn selfcheck(a: &SelfcheckArgs) -> Result<Reply, Failure> {
    let reg = Registry::default();
    let reports = run_all(&reg, a.trials, a.seed);
    let failed = reports.iter().filter(|r| !r.passed()).count();
    let out = json!({
        "seed": a.seed,
        "trials": a.trials,
        "passed": failed == 0,
        "suites": serde_json::to_value(&reports).expect("reports serialize"),
    });
    let failure = (failed > 0).then(|| Failure::runtime(format!("selfcheck: {failed} of {} suites failed", reports.len())));
    Ok((out, failure))
}
