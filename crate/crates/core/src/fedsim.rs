//! Message-level simulation of plan execution: clients encode and serialize
//! their states, a transport carries the bytes, the server deserializes,
//! merges in federation order and decodes. A ledger records message sizes.
//!
//! State wire format (`FTS1`): the magic bytes, a little-endian `u32`
//! component count, then per component a `u32` rank, `rank` `u32` extents and
//! the row-major `f64` values, all little-endian.

use std::sync::mpsc;

use serde::Serialize;
use thiserror::Error;

use crate::extensions::Registry;
use crate::factorize::{run_iterative_with, EncodedState, IterativeProgram, IterativeRun, Params, PlanError, SharedStatePlan};
use crate::federated::{ClientId, FederatedValue};
use crate::privacy::{apply_mechanism, MechanismSpec, PrivacyError, PrivatePlan};
use crate::tensor::{Shape, TensorValue};

pub const STATE_MAGIC: &[u8; 4] = b"FTS1";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum StateCodecError {
    #[error("bad magic bytes")]
    BadMagic,
    #[error("truncated payload: needed {needed} more bytes at offset {offset}")]
    Truncated { offset: usize, needed: usize },
    #[error("extents {0:?} overflow the addressable size")]
    DimOverflow(Vec<usize>),
    #[error("{0} trailing bytes after the last component")]
    TrailingBytes(usize),
}

/// Encodes a state in the `FTS1` format.
pub fn serialize_state(s: &EncodedState) -> Vec<u8> {
    let len = 8 + s
        .0
        .iter()
        .map(|t| 4 + 4 * t.rank() + 8 * t.numel())
        .sum::<usize>();
    let mut out = Vec::with_capacity(len);
    out.extend_from_slice(STATE_MAGIC);
    out.extend_from_slice(&(s.0.len() as u32).to_le_bytes());
    for t in &s.0 {
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape().dims() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], StateCodecError> {
        let rest = self.bytes.len() - self.pos;
        if rest < n {
            return Err(StateCodecError::Truncated {
                offset: self.pos,
                needed: n - rest,
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, StateCodecError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

/// Decodes an `FTS1` state.
pub fn deserialize_state(bytes: &[u8]) -> Result<EncodedState, StateCodecError> {
    if bytes.len() < 4 || &bytes[..4] != STATE_MAGIC {
        return Err(StateCodecError::BadMagic);
    }
    let mut r = Reader { bytes, pos: 4 };
    let q = r.u32()? as usize;
    let mut parts = Vec::new();
    for _ in 0..q {
        let rank = r.u32()? as usize;
        let mut dims = Vec::with_capacity(rank.min(64));
        for _ in 0..rank {
            dims.push(r.u32()? as usize);
        }
        let numel = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(8).map(|_| n))
            .ok_or_else(|| StateCodecError::DimOverflow(dims.clone()))?;
        let raw = r.take(numel * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        parts.push(TensorValue::new(Shape::new(dims), data).expect("length matches"));
    }
    if r.pos != bytes.len() {
        return Err(StateCodecError::TrailingBytes(bytes.len() - r.pos));
    }
    Ok(EncodedState(parts))
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{0}")]
pub struct TransportError(pub String);

/// Carries serialized client messages to the server.
pub trait Transport {
    fn send(&mut self, client: &ClientId, payload: Vec<u8>) -> Result<(), TransportError>;
    /// Everything sent since the last collection, in arrival order.
    fn collect(&mut self) -> Result<Vec<(ClientId, Vec<u8>)>, TransportError>;
}

/// Hands messages straight to the server.
#[derive(Debug, Default)]
pub struct Loopback {
    queue: Vec<(ClientId, Vec<u8>)>,
}

impl Transport for Loopback {
    fn send(&mut self, client: &ClientId, payload: Vec<u8>) -> Result<(), TransportError> {
        self.queue.push((client.clone(), payload));
        Ok(())
    }

    fn collect(&mut self) -> Result<Vec<(ClientId, Vec<u8>)>, TransportError> {
        Ok(std::mem::take(&mut self.queue))
    }
}

/// An in-process channel.
pub struct ChannelTransport {
    tx: mpsc::Sender<(ClientId, Vec<u8>)>,
    rx: mpsc::Receiver<(ClientId, Vec<u8>)>,
}

impl Default for ChannelTransport {
    fn default() -> Self {
        let (tx, rx) = mpsc::channel();
        ChannelTransport { tx, rx }
    }
}

impl ChannelTransport {
    /// A sender clients can use from other threads.
    pub fn sender(&self) -> mpsc::Sender<(ClientId, Vec<u8>)> {
        self.tx.clone()
    }
}

impl Transport for ChannelTransport {
    fn send(&mut self, client: &ClientId, payload: Vec<u8>) -> Result<(), TransportError> {
        self.tx
            .send((client.clone(), payload))
            .map_err(|e| TransportError(e.to_string()))
    }

    fn collect(&mut self) -> Result<Vec<(ClientId, Vec<u8>)>, TransportError> {
        Ok(self.rx.try_iter().collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MessageRecord {
    pub round: usize,
    pub client: ClientId,
    pub bytes: usize,
    pub components: usize,
    pub elements: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MergedRecord {
    pub round: usize,
    pub bytes: usize,
    pub elements: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct MessageLedger {
    pub messages: Vec<MessageRecord>,
    pub merged: Vec<MergedRecord>,
}

impl MessageLedger {
    /// One JSON object per line; messages first within each round, then the
    /// merged state.
    pub fn to_json_lines(&self) -> String {
        let mut out = String::new();
        let rounds = self.merged.iter().map(|m| m.round);
        for round in rounds {
            for m in self.messages.iter().filter(|m| m.round == round) {
                let v = serde_json::json!({
                    "kind": "message",
                    "round": m.round,
                    "client": m.client,
                    "bytes": m.bytes,
                    "components": m.components,
                    "elements": m.elements,
                });
                out.push_str(&v.to_string());
                out.push('\n');
            }
            for m in self.merged.iter().filter(|m| m.round == round) {
                let v = serde_json::json!({
                    "kind": "merged",
                    "round": m.round,
                    "bytes": m.bytes,
                    "elements": m.elements,
                });
                out.push_str(&v.to_string());
                out.push('\n');
            }
        }
        out
    }

    /// Distinct per-client message sizes in bytes.
    pub fn message_sizes(&self) -> Vec<usize> {
        let mut sizes: Vec<usize> = self.messages.iter().map(|m| m.bytes).collect();
        sizes.sort_unstable();
        sizes.dedup();
        sizes
    }
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error(transparent)]
    Privacy(#[from] PrivacyError),
    #[error("round {round}, client `{client}`: transport failed: {source}")]
    Transport {
        round: usize,
        client: ClientId,
        #[source]
        source: TransportError,
    },
    #[error("round {round}: collecting messages failed: {source}")]
    Collect {
        round: usize,
        #[source]
        source: TransportError,
    },
    #[error("round {round}, client `{client}`: {source}")]
    Codec {
        round: usize,
        client: ClientId,
        #[source]
        source: StateCodecError,
    },
    #[error("round {round}: no message from client `{client}`")]
    Missing { round: usize, client: ClientId },
    #[error("round {round}: unexpected message from `{client}`")]
    Unexpected { round: usize, client: ClientId },
}

/// Runs rounds over a transport and keeps the ledger.
pub struct Simulator<T: Transport> {
    transport: T,
    mechanism: Option<MechanismSpec>,
    ledger: MessageLedger,
}

impl<T: Transport> Simulator<T> {
    pub fn new(transport: T) -> Self {
        Simulator {
            transport,
            mechanism: None,
            ledger: MessageLedger::default(),
        }
    }

    pub fn with_mechanism(mut self, spec: MechanismSpec) -> Self {
        self.mechanism = Some(spec);
        self
    }

    pub fn ledger(&self) -> &MessageLedger {
        &self.ledger
    }

    pub fn into_ledger(self) -> MessageLedger {
        self.ledger
    }

    pub fn transport_mut(&mut self) -> &mut T {
        &mut self.transport
    }

    /// One round. Returns the output and the merged state given to the decoder.
    pub fn run_round(
        &mut self,
        round: usize,
        plan: &SharedStatePlan,
        x: &FederatedValue,
        params: &Params,
    ) -> Result<(TensorValue, EncodedState), SimError> {
        let private: Option<PrivatePlan> = self
            .mechanism
            .as_ref()
            .map(|spec| apply_mechanism(plan, spec))
            .transpose()?;
        let round_tag = round as u32;
        let clients = x.federation().clients();
        let payloads = encode_concurrently(plan, x, params, |i, m| match &private {
            Some(pp) if pp.spec().placement == crate::privacy::Placement::PerClientMessage => {
                pp.perturb_message(&m, round_tag, i)
            }
            _ => m,
        })?;
        for (client, (payload, message)) in clients.iter().zip(payloads) {
            self.ledger.messages.push(MessageRecord {
                round,
                client: client.clone(),
                bytes: payload.len(),
                components: message.0.len(),
                elements: message.element_count(),
            });
            self.transport
                .send(client, payload)
                .map_err(|source| SimError::Transport {
                    round,
                    client: client.clone(),
                    source,
                })?;
        }
        let mut received: Vec<Option<EncodedState>> = vec![None; clients.len()];
        for (client, bytes) in self
            .transport
            .collect()
            .map_err(|source| SimError::Collect { round, source })?
        {
            let Some(i) = x.federation().index_of(&client) else {
                return Err(SimError::Unexpected { round, client });
            };
            if received[i].is_some() {
                return Err(SimError::Unexpected { round, client });
            }
            let state = deserialize_state(&bytes).map_err(|source| SimError::Codec {
                round,
                client: client.clone(),
                source,
            })?;
            plan.check_state(&state)?;
            received[i] = Some(state);
        }
        let messages = received
            .into_iter()
            .zip(clients)
            .map(|(m, c)| m.ok_or_else(|| SimError::Missing { round, client: c.clone() }))
            .collect::<Result<Vec<_>, _>>()?;
        let mut merged = plan.merge_all(&messages)?;
        if let Some(pp) = &private {
            if pp.spec().placement == crate::privacy::Placement::MergedState {
                merged = pp.perturb_merged(&merged, round_tag);
            }
        }
        self.ledger.merged.push(MergedRecord {
            round,
            bytes: serialize_state(&merged).len(),
            elements: merged.element_count(),
        });
        let mut output = plan.decode(&merged, params)?;
        if let Some(pp) = &private {
            if pp.spec().placement == crate::privacy::Placement::DecodedOutput {
                output = pp.perturb_output(&output, round_tag);
            }
        }
        Ok((output, merged))
    }
}

/// Encodes and serializes every client's message, spreading clients over a
/// few threads. Results come back in federation order.
fn encode_concurrently<F>(
    plan: &SharedStatePlan,
    x: &FederatedValue,
    params: &Params,
    post: F,
) -> Result<Vec<(Vec<u8>, EncodedState)>, PlanError>
where
    F: Fn(usize, EncodedState) -> EncodedState + Sync,
{
    let clients = x.federation().clients();
    let work = |i: usize| -> Result<(Vec<u8>, EncodedState), PlanError> {
        let m = post(i, plan.encode(&clients[i], x.local(i), params)?);
        Ok((serialize_state(&m), m))
    };
    let threads = std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1)
        .min(clients.len());
    if threads <= 1 {
        return (0..clients.len()).map(work).collect();
    }
    let mut slots: Vec<Option<Result<(Vec<u8>, EncodedState), PlanError>>> = vec![None; clients.len()];
    std::thread::scope(|s| {
        let work = &work;
        for (t, chunk) in slots.chunks_mut(clients.len().div_ceil(threads)).enumerate() {
            let start = t * clients.len().div_ceil(threads);
            s.spawn(move || {
                for (j, slot) in chunk.iter_mut().enumerate() {
                    *slot = Some(work(start + j));
                }
            });
        }
    });
    slots.into_iter().map(|s| s.expect("every slot filled")).collect()
}

/// One round of a parameter-free plan over `transport`.
pub fn simulate_round<T: Transport>(
    plan: &SharedStatePlan,
    x: &FederatedValue,
    transport: T,
) -> Result<(TensorValue, MessageLedger), SimError> {
    let mut sim = Simulator::new(transport);
    let (out, _) = sim.run_round(0, plan, x, &Params::new())?;
    Ok((out, sim.into_ledger()))
}

/// Runs an iterative program with every round going through `sim`.
pub fn simulate_iterative<T: Transport>(
    p: &IterativeProgram,
    x: &FederatedValue,
    registry: &Registry,
    sim: &mut Simulator<T>,
) -> Result<IterativeRun, SimError> {
    let mut failure: Option<SimError> = None;
    let run = run_iterative_with(p, x, registry, |t, plan, x, params| {
        sim.run_round(t, plan, x, params).map_err(|e| match e {
            SimError::Plan(e) => e,
            other => {
                let msg = other.to_string();
                failure = Some(other);
                PlanError::Param {
                    name: "transport".into(),
                    message: msg,
                }
            }
        })
    });
    match (run, failure) {
        (_, Some(e)) => Err(e),
        (Ok(run), None) => Ok(run),
        (Err(e), None) => Err(SimError::Plan(e)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ast::{Expr, FedType};
    use crate::factorize::{extract_plan, run_plan, Component, OneRoundProgram};
    use crate::federated::Federation;
    use crate::signature::{AggSchema, BinaryOp};

    fn mean_plan() -> SharedStatePlan {
        let p = OneRoundProgram {
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
                        encoder: Expr::binary(BinaryOp::Pow, Expr::var("x"), Expr::scalar(0.0)),
                        schema: AggSchema::Sum,
                    },
                ),
            ],
            decoder: Expr::div(Expr::var("s"), Expr::var("n")),
        };
        extract_plan(&p, &Registry::default()).unwrap()
    }

    fn data(counts: &[usize]) -> FederatedValue {
        let fed = Federation::numbered(counts.len()).unwrap();
        let locals = counts
            .iter()
            .enumerate()
            .map(|(c, &n)| TensorValue::vector((0..n).map(|a| (a + c) as f64 * 0.5).collect()))
            .collect();
        FederatedValue::new(fed, 1, Shape::scalar(), locals).unwrap()
    }

    #[test]
    fn scalar_state_is_twenty_bytes() {
        let s = EncodedState(vec![TensorValue::scalar(0.0)]);
        let bytes = serialize_state(&s);
        assert_eq!(bytes.len(), 20);
        assert_eq!(deserialize_state(&bytes).unwrap(), s);
    }

    #[test]
    fn codec_errors() {
        let s = EncodedState(vec![TensorValue::from_fn([3, 2], |i| i[0] as f64 - i[1] as f64)]);
        let bytes = serialize_state(&s);
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert_eq!(deserialize_state(&bad), Err(StateCodecError::BadMagic));
        assert!(matches!(
            deserialize_state(&bytes[..bytes.len() - 3]),
            Err(StateCodecError::Truncated { .. })
        ));
        let mut long = bytes.clone();
        long.push(0);
        assert_eq!(deserialize_state(&long), Err(StateCodecError::TrailingBytes(1)));
        let mut huge = Vec::from(*STATE_MAGIC);
        huge.extend_from_slice(&1u32.to_le_bytes());
        huge.extend_from_slice(&3u32.to_le_bytes());
        for _ in 0..3 {
            huge.extend_from_slice(&u32::MAX.to_le_bytes());
        }
        assert!(matches!(deserialize_state(&huge), Err(StateCodecError::DimOverflow(_))));
    }

    #[test]
    fn simulated_mean_matches_plan() {
        let plan = mean_plan();
        let x = data(&[2, 1, 4]);
        let (out, ledger) = simulate_round(&plan, &x, Loopback::default()).unwrap();
        assert!(out.bit_eq(&run_plan(&plan, &x).unwrap()));
        assert_eq!(ledger.messages.len(), 3);
        assert!(ledger.messages.iter().all(|m| m.elements == 2 && m.components == 2));
        let (out2, ledger2) = simulate_round(&plan, &x, ChannelTransport::default()).unwrap();
        assert!(out2.bit_eq(&out));
        assert_eq!(ledger2.message_sizes(), ledger.message_sizes());
        assert_eq!(ledger.to_json_lines().lines().count(), 4);
    }

    #[test]
    fn sizes_do_not_depend_on_records() {
        let plan = mean_plan();
        let (_, small) = simulate_round(&plan, &data(&[1, 1]), Loopback::default()).unwrap();
        let (_, big) = simulate_round(&plan, &data(&[100, 300]), Loopback::default()).unwrap();
        assert_eq!(small.message_sizes(), big.message_sizes());
        assert_eq!(small.merged[0].bytes, big.merged[0].bytes);
    }

    struct Dropping;

    impl Transport for Dropping {
        fn send(&mut self, client: &ClientId, _: Vec<u8>) -> Result<(), TransportError> {
            if client == "c2" {
                Err(TransportError("link down".into()))
            } else {
                Ok(())
            }
        }

        fn collect(&mut self) -> Result<Vec<(ClientId, Vec<u8>)>, TransportError> {
            Ok(vec![])
        }
    }

    #[test]
    fn transport_failure_names_client() {
        let err = simulate_round(&mean_plan(), &data(&[1, 2]), Dropping).unwrap_err();
        assert!(matches!(err, SimError::Transport { ref client, .. } if client == "c2"), "{err}");
    }
}
