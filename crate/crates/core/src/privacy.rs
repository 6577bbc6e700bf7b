//! Differential-privacy wrappers for plans: noise on client messages, on the
//! merged state, or on the decoded output.
//!
//! Noise is drawn from ChaCha20 keyed by the mechanism seed. Every round and
//! slot gets its own stream: slot 0 is the server, slot `1 + i` is client `i`.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::factorize::{EncodedState, Params, PlanError, SharedStatePlan};
use crate::federated::FederatedValue;
use crate::tensor::TensorValue;

/// Recorded next to noisy outputs so runs can be reproduced.
pub const RNG_ALGORITHM: &str = "chacha20 (rand_chacha 0.9, seed_from_u64, stream = round << 32 | slot)";

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PrivacyError {
    #[error("{0}")]
    Parameter(String),
    #[error("{kind} noise cannot be placed on {placement}")]
    Placement { kind: MechanismKind, placement: Placement },
    #[error("component `{component}` merges with {merge}; local noise needs additive merges")]
    UnsupportedMerge { component: String, merge: String },
    #[error("inputs differ in {0}")]
    Mismatch(String),
    #[error(transparent)]
    Plan(#[from] PlanError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MechanismKind {
    GaussianCentral,
    LaplaceCentral,
    GaussianLocal,
}

impl MechanismKind {
    pub fn name(self) -> &'static str {
        match self {
            MechanismKind::GaussianCentral => "gaussian-central",
            MechanismKind::LaplaceCentral => "laplace-central",
            MechanismKind::GaussianLocal => "gaussian-local",
        }
    }

    pub fn is_local(self) -> bool {
        self == MechanismKind::GaussianLocal
    }

    fn distribution(self) -> Noise {
        match self {
            MechanismKind::LaplaceCentral => Noise::Laplace,
            MechanismKind::GaussianCentral | MechanismKind::GaussianLocal => Noise::Gaussian,
        }
    }
}

impl fmt::Display for MechanismKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MechanismKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "gaussian-central" => Ok(MechanismKind::GaussianCentral),
            "laplace-central" => Ok(MechanismKind::LaplaceCentral),
            "gaussian-local" => Ok(MechanismKind::GaussianLocal),
            _ => Err(format!("unknown mechanism `{s}`")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Placement {
    PerClientMessage,
    MergedState,
    DecodedOutput,
}

impl Placement {
    pub fn name(self) -> &'static str {
        match self {
            Placement::PerClientMessage => "per-client-message",
            Placement::MergedState => "merged-state",
            Placement::DecodedOutput => "decoded-output",
        }
    }
}

impl fmt::Display for Placement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Placement {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "per-client-message" => Ok(Placement::PerClientMessage),
            "merged-state" => Ok(Placement::MergedState),
            "decoded-output" => Ok(Placement::DecodedOutput),
            _ => Err(format!("unknown placement `{s}`")),
        }
    }
}

/// Privacy parameters a scale was calibrated from.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub epsilon: f64,
    pub delta: f64,
    pub sensitivity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MechanismSpec {
    pub kind: MechanismKind,
    pub placement: Placement,
    /// Standard deviation for Gaussian kinds, `b` for Laplace.
    pub scale: f64,
    pub calibration: Option<Calibration>,
    pub seed: u64,
}

impl MechanismSpec {
    pub fn new(kind: MechanismKind, placement: Placement, scale: f64, seed: u64) -> Self {
        MechanismSpec {
            kind,
            placement,
            scale,
            calibration: None,
            seed,
        }
    }

    /// Scale from `(ε, δ, Δ)`: the Gaussian calibration for Gaussian kinds
    /// and `Δ/ε` for Laplace.
    pub fn calibrated(
        kind: MechanismKind,
        placement: Placement,
        calibration: Calibration,
        seed: u64,
    ) -> Result<Self, PrivacyError> {
        let Calibration {
            epsilon,
            delta,
            sensitivity,
        } = calibration;
        let scale = match kind {
            MechanismKind::LaplaceCentral => {
                check_positive("epsilon", epsilon)?;
                check_positive("sensitivity", sensitivity)?;
                sensitivity / epsilon
            }
            _ => calibrate_gaussian_sigma(epsilon, delta, sensitivity)?,
        };
        Ok(MechanismSpec {
            kind,
            placement,
            scale,
            calibration: Some(calibration),
            seed,
        })
    }

    pub fn validate(&self) -> Result<(), PrivacyError> {
        if !(self.scale >= 0.0 && self.scale.is_finite()) {
            return Err(PrivacyError::Parameter(format!(
                "noise scale must be finite and nonnegative, got {}",
                self.scale
            )));
        }
        let ok = match self.placement {
            Placement::PerClientMessage => self.kind.is_local(),
            Placement::MergedState | Placement::DecodedOutput => !self.kind.is_local(),
        };
        if !ok {
            return Err(PrivacyError::Placement {
                kind: self.kind,
                placement: self.placement,
            });
        }
        Ok(())
    }
}

fn check_positive(name: &str, v: f64) -> Result<(), PrivacyError> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(PrivacyError::Parameter(format!("{name} must be positive, got {v}")))
    }
}

/// `σ = Δ·sqrt(2 ln(1.25/δ))/ε`.
pub fn calibrate_gaussian_sigma(epsilon: f64, delta: f64, sensitivity: f64) -> Result<f64, PrivacyError> {
    if !(epsilon > 0.0) || epsilon.is_nan() {
        return Err(PrivacyError::Parameter(format!("epsilon must be positive, got {epsilon}")));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(PrivacyError::Parameter(format!("delta must lie in (0, 1), got {delta}")));
    }
    check_positive("sensitivity", sensitivity)?;
    Ok(sensitivity * (2.0 * (1.25 / delta).ln()).sqrt() / epsilon)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Noise {
    Gaussian,
    Laplace,
}

/// A deterministic stream of noise values for one round and slot.
pub struct NoiseSource {
    rng: ChaCha20Rng,
    noise: Noise,
    scale: f64,
}

impl NoiseSource {
    pub fn new(kind: MechanismKind, scale: f64, seed: u64, round: u32, slot: u32) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        rng.set_stream(((round as u64) << 32) | slot as u64);
        NoiseSource {
            rng,
            noise: kind.distribution(),
            scale,
        }
    }

    pub fn sample(&mut self) -> f64 {
        match self.noise {
            Noise::Gaussian => {
                let z: f64 = self.rng.sample(StandardNormal);
                self.scale * z
            }
            Noise::Laplace => {
                // Inverse CDF on u in (-1/2, 1/2).
                let u: f64 = self.rng.random::<f64>() - 0.5;
                let tail = (1.0 - 2.0 * u.abs()).max(f64::MIN_POSITIVE);
                -self.scale * u.signum() * tail.ln()
            }
        }
    }

    /// Adds independent noise to every coordinate. A zero scale leaves the
    /// tensor untouched.
    pub fn perturb(&mut self, t: &TensorValue) -> TensorValue {
        if self.scale == 0.0 {
            return t.clone();
        }
        let data = t.data().iter().map(|&v| v + self.sample()).collect();
        TensorValue::new(t.shape().clone(), data).expect("same shape")
    }

    pub fn perturb_state(&mut self, s: &EncodedState) -> EncodedState {
        EncodedState(s.0.iter().map(|t| self.perturb(t)).collect())
    }
}

/// The merge step between clients and server. Implementations may run a
/// secure protocol; the loopback version merges in the clear.
pub trait SecureMerge {
    fn merge(&self, plan: &SharedStatePlan, messages: &[EncodedState]) -> Result<EncodedState, PlanError>;
}

/// Merges messages in federation order with the plan's monoids.
#[derive(Clone, Copy, Debug, Default)]
pub struct LoopbackMerge;

impl SecureMerge for LoopbackMerge {
    fn merge(&self, plan: &SharedStatePlan, messages: &[EncodedState]) -> Result<EncodedState, PlanError> {
        plan.merge_all(messages)
    }
}

/// A plan with a mechanism attached.
#[derive(Clone, Debug)]
pub struct PrivatePlan {
    plan: SharedStatePlan,
    spec: MechanismSpec,
}

/// Wraps `plan` with the mechanism described by `spec`.
pub fn apply_mechanism(plan: &SharedStatePlan, spec: &MechanismSpec) -> Result<PrivatePlan, PrivacyError> {
    spec.validate()?;
    if spec.placement == Placement::PerClientMessage {
        if let Some(c) = plan.components.iter().find(|c| !c.merge.is_additive()) {
            return Err(PrivacyError::UnsupportedMerge {
                component: c.name.clone(),
                merge: c.merge.to_string(),
            });
        }
    }
    Ok(PrivatePlan {
        plan: plan.clone(),
        spec: spec.clone(),
    })
}

/// Output of a private round.
#[derive(Clone, Debug, PartialEq)]
pub struct PrivateOutput {
    pub output: TensorValue,
    /// The merged state handed to the decoder, after any noise.
    pub merged: EncodedState,
}

impl PrivatePlan {
    pub fn plan(&self) -> &SharedStatePlan {
        &self.plan
    }

    pub fn spec(&self) -> &MechanismSpec {
        &self.spec
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.spec.seed = seed;
    }

    pub fn noise(&self, round: u32, slot: u32) -> NoiseSource {
        NoiseSource::new(self.spec.kind, self.spec.scale, self.spec.seed, round, slot)
    }

    /// Noise applied to the merged state in round `round`.
    pub fn perturb_merged(&self, merged: &EncodedState, round: u32) -> EncodedState {
        self.noise(round, 0).perturb_state(merged)
    }

    /// Noise applied to client `index`'s message in round `round`.
    pub fn perturb_message(&self, message: &EncodedState, round: u32, index: usize) -> EncodedState {
        self.noise(round, 1 + index as u32).perturb_state(message)
    }

    /// Noise applied to the decoded output in round `round`.
    pub fn perturb_output(&self, output: &TensorValue, round: u32) -> TensorValue {
        self.noise(round, 0).perturb(output)
    }

    pub fn run(&self, x: &FederatedValue, params: &Params) -> Result<PrivateOutput, PrivacyError> {
        self.run_round(0, x, params, &LoopbackMerge)
    }

    pub fn run_round(
        &self,
        round: u32,
        x: &FederatedValue,
        params: &Params,
        merge: &dyn SecureMerge,
    ) -> Result<PrivateOutput, PrivacyError> {
        let mut messages = self.plan.encode_all(x, params)?;
        if self.spec.placement == Placement::PerClientMessage {
            messages = messages
                .iter()
                .enumerate()
                .map(|(i, m)| self.perturb_message(m, round, i))
                .collect();
        }
        let mut merged = merge.merge(&self.plan, &messages)?;
        if self.spec.placement == Placement::MergedState {
            merged = self.perturb_merged(&merged, round);
        }
        let mut output = self.plan.decode(&merged, params)?;
        if self.spec.placement == Placement::DecodedOutput {
            output = self.perturb_output(&output, round);
        }
        Ok(PrivateOutput { output, merged })
    }
}

/// `d_M(Q(X), Q(X'))` in ℓ2 for one pair of inputs. A probe, not a bound.
pub fn sensitivity_probe(
    plan: &SharedStatePlan,
    x: &FederatedValue,
    x_prime: &FederatedValue,
    params: &Params,
) -> Result<f64, PrivacyError> {
    if x.federation() != x_prime.federation() {
        return Err(PrivacyError::Mismatch("federation".into()));
    }
    if x.record_axis() != x_prime.record_axis() || x.nonrecord_shape() != x_prime.nonrecord_shape() {
        return Err(PrivacyError::Mismatch("type".into()));
    }
    let a = plan.merge_all(&plan.encode_all(x, params)?)?;
    let b = plan.merge_all(&plan.encode_all(x_prime, params)?)?;
    let sq: f64 = a
        .0
        .iter()
        .zip(&b.0)
        .flat_map(|(s, t)| s.data().iter().zip(t.data()))
        .map(|(u, v)| if u == v { 0.0 } else { (u - v) * (u - v) })
        .sum();
    Ok(sq.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ast::{Expr, FedType};
    use crate::extensions::Registry;
    use crate::factorize::{extract_plan, run_plan, Component, OneRoundProgram};
    use crate::federated::Federation;
    use crate::signature::AggSchema;

    fn agg_plan(schema: AggSchema) -> SharedStatePlan {
        let p = OneRoundProgram {
            input: "x".into(),
            input_type: FedType::new(1, []),
            params: vec![],
            components: vec![(
                "y".into(),
                Component::Agg {
                    encoder: Expr::var("x"),
                    schema,
                },
            )],
            decoder: Expr::var("y"),
        };
        extract_plan(&p, &Registry::default()).unwrap()
    }

    fn data() -> FederatedValue {
        FederatedValue::new(
            Federation::numbered(2).unwrap(),
            1,
            [].into(),
            vec![TensorValue::vector(vec![1.0, 2.5]), TensorValue::vector(vec![-4.0])],
        )
        .unwrap()
    }

    #[test]
    fn zero_scale_is_identity() {
        let plan = agg_plan(AggSchema::Sum);
        let exact = run_plan(&plan, &data()).unwrap();
        for (kind, placement) in [
            (MechanismKind::GaussianCentral, Placement::MergedState),
            (MechanismKind::LaplaceCentral, Placement::DecodedOutput),
            (MechanismKind::GaussianLocal, Placement::PerClientMessage),
        ] {
            let pp = apply_mechanism(&plan, &MechanismSpec::new(kind, placement, 0.0, 9)).unwrap();
            assert!(pp.run(&data(), &Params::new()).unwrap().output.bit_eq(&exact));
        }
    }

    #[test]
    fn placement_rules() {
        let plan = agg_plan(AggSchema::Min);
        let local = MechanismSpec::new(MechanismKind::GaussianLocal, Placement::PerClientMessage, 1.0, 1);
        assert!(matches!(
            apply_mechanism(&plan, &local),
            Err(PrivacyError::UnsupportedMerge { .. })
        ));
        let wrong = MechanismSpec::new(MechanismKind::GaussianCentral, Placement::PerClientMessage, 1.0, 1);
        assert!(matches!(wrong.validate(), Err(PrivacyError::Placement { .. })));
        let negative = MechanismSpec::new(MechanismKind::GaussianCentral, Placement::MergedState, -1.0, 1);
        assert!(negative.validate().is_err());
    }

    #[test]
    fn same_seed_same_noise() {
        let plan = agg_plan(AggSchema::Sum);
        let spec = MechanismSpec::new(MechanismKind::LaplaceCentral, Placement::DecodedOutput, 2.0, 17);
        let pp = apply_mechanism(&plan, &spec).unwrap();
        let a = pp.run(&data(), &Params::new()).unwrap();
        let b = pp.run(&data(), &Params::new()).unwrap();
        assert!(a.output.bit_eq(&b.output));
        let mut other = pp.clone();
        other.set_seed(18);
        assert!(!other.run(&data(), &Params::new()).unwrap().output.bit_eq(&a.output));
    }

    #[test]
    fn calibration_bounds() {
        assert!(calibrate_gaussian_sigma(0.0, 1e-5, 1.0).is_err());
        assert!(calibrate_gaussian_sigma(1.0, 1.0, 1.0).is_err());
        assert!(calibrate_gaussian_sigma(1.0, 1e-5, 0.0).is_err());
        let s1 = calibrate_gaussian_sigma(1.0, 1e-5, 1.0).unwrap();
        let s2 = calibrate_gaussian_sigma(1.0, 1e-5, 2.0).unwrap();
        assert_eq!(s2, 2.0 * s1);
    }

    #[test]
    fn probe_on_sum() {
        let plan = agg_plan(AggSchema::Sum);
        let x = data();
        assert_eq!(sensitivity_probe(&plan, &x, &x, &Params::new()).unwrap(), 0.0);
        let changed = x.with_local(1, TensorValue::vector(vec![-1.5])).unwrap();
        assert_eq!(sensitivity_probe(&plan, &x, &changed, &Params::new()).unwrap(), 2.5);
    }
}
