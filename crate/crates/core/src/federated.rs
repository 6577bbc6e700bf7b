//! Federations, federated tensors and the virtual global tensor.

use std::fmt;
use std::sync::Arc;

use thiserror::Error;

use crate::tensor::{Shape, TensorError, TensorValue};

pub type ClientId = String;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FederationError {
    #[error("a federation needs at least one client")]
    Empty,
    #[error("client `{0}` appears more than once")]
    DuplicateClient(ClientId),
    #[error("expected {expected} local tensors, got {found}")]
    LocalCount { expected: usize, found: usize },
    #[error("record axis {axis} out of range for a rank-{rank} federated tensor")]
    RecordAxis { axis: usize, rank: usize },
    #[error("non-record shape {0} has a zero extent")]
    NonPositive(Shape),
    #[error("client `{client}`: local shape {found} does not fit non-record shape {expected} on record axis {axis}")]
    LocalShape {
        client: ClientId,
        expected: Shape,
        found: Shape,
        axis: usize,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// A nonempty, totally ordered set of clients.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct Federation {
    clients: Arc<[ClientId]>,
}

impl Federation {
    pub fn new<I, S>(clients: I) -> Result<Self, FederationError>
    where
        I: IntoIterator<Item = S>,
        S: Into<ClientId>,
    {
        let clients: Vec<ClientId> = clients.into_iter().map(Into::into).collect();
        if clients.is_empty() {
            return Err(FederationError::Empty);
        }
        for (i, c) in clients.iter().enumerate() {
            if clients[..i].contains(c) {
                return Err(FederationError::DuplicateClient(c.clone()));
            }
        }
        Ok(Federation {
            clients: clients.into(),
        })
    }

    /// Clients `c1, …, cm`.
    pub fn numbered(m: usize) -> Result<Self, FederationError> {
        Federation::new((1..=m).map(|i| format!("c{i}")))
    }

    pub fn clients(&self) -> &[ClientId] {
        &self.clients
    }

    pub fn len(&self) -> usize {
        self.clients.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clients.is_empty()
    }

    pub fn index_of(&self, client: &str) -> Option<usize> {
        self.clients.iter().position(|c| c == client)
    }
}

impl fmt::Debug for Federation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(self.clients.iter()).finish()
    }
}

/// A client-indexed family of local tensors sharing every extent except the
/// one on the record axis.
#[derive(Clone, Debug, PartialEq)]
pub struct FederatedValue {
    federation: Federation,
    record_axis: usize,
    nonrecord_shape: Shape,
    locals: Vec<TensorValue>,
}

impl FederatedValue {
    pub fn new(
        federation: Federation,
        record_axis: usize,
        nonrecord_shape: Shape,
        locals: Vec<TensorValue>,
    ) -> Result<Self, FederationError> {
        let rank = nonrecord_shape.rank() + 1;
        if record_axis == 0 || record_axis > rank {
            return Err(FederationError::RecordAxis {
                axis: record_axis,
                rank,
            });
        }
        if !nonrecord_shape.is_positive() {
            return Err(FederationError::NonPositive(nonrecord_shape));
        }
        if locals.len() != federation.len() {
            return Err(FederationError::LocalCount {
                expected: federation.len(),
                found: locals.len(),
            });
        }
        for (client, local) in federation.clients().iter().zip(&locals) {
            let fits = local.rank() == rank
                && local.shape().remove_axis(record_axis).ok().as_ref() == Some(&nonrecord_shape);
            if !fits {
                return Err(FederationError::LocalShape {
                    client: client.clone(),
                    expected: nonrecord_shape.clone(),
                    found: local.shape().clone(),
                    axis: record_axis,
                });
            }
        }
        Ok(FederatedValue {
            federation,
            record_axis,
            nonrecord_shape,
            locals,
        })
    }

    /// Infers the non-record shape from the first client's tensor.
    pub fn from_locals(
        federation: Federation,
        record_axis: usize,
        locals: Vec<TensorValue>,
    ) -> Result<Self, FederationError> {
        let first = locals.first().ok_or(FederationError::LocalCount {
            expected: federation.len(),
            found: 0,
        })?;
        let rank = first.rank();
        let nonrecord = first
            .shape()
            .remove_axis(record_axis)
            .map_err(|_| FederationError::RecordAxis {
                axis: record_axis,
                rank,
            })?;
        FederatedValue::new(federation, record_axis, nonrecord, locals)
    }

    pub fn federation(&self) -> &Federation {
        &self.federation
    }

    pub fn record_axis(&self) -> usize {
        self.record_axis
    }

    pub fn nonrecord_shape(&self) -> &Shape {
        &self.nonrecord_shape
    }

    /// Rank of every local tensor.
    pub fn rank(&self) -> usize {
        self.nonrecord_shape.rank() + 1
    }

    pub fn locals(&self) -> &[TensorValue] {
        &self.locals
    }

    pub fn into_locals(self) -> Vec<TensorValue> {
        self.locals
    }

    pub fn local(&self, index: usize) -> &TensorValue {
        &self.locals[index]
    }

    pub fn local_for(&self, client: &str) -> Option<&TensorValue> {
        self.federation.index_of(client).map(|i| &self.locals[i])
    }

    pub fn record_counts(&self) -> Vec<usize> {
        self.locals
            .iter()
            .map(|t| t.shape().dims()[self.record_axis - 1])
            .collect()
    }

    pub fn total_records(&self) -> usize {
        self.record_counts().iter().sum()
    }

    /// The same value with one client's tensor replaced.
    pub fn with_local(&self, index: usize, local: TensorValue) -> Result<Self, FederationError> {
        let mut locals = self.locals.clone();
        locals[index] = local;
        FederatedValue::new(
            self.federation.clone(),
            self.record_axis,
            self.nonrecord_shape.clone(),
            locals,
        )
    }

    /// `vglob(X)`: concatenation of the local tensors along the record axis in
    /// federation order.
    pub fn virtual_global(&self) -> TensorValue {
        let parts: Vec<&TensorValue> = self.locals.iter().collect();
        TensorValue::concat(self.record_axis, &parts)
            .expect("local shapes were validated on construction")
    }

    /// Splits a global tensor into consecutive record blocks of the given sizes.
    pub fn split_global(
        federation: Federation,
        record_axis: usize,
        global: &TensorValue,
        counts: &[usize],
    ) -> Result<Self, FederationError> {
        let mut start = 0;
        let mut locals = Vec::with_capacity(counts.len());
        for &n in counts {
            locals.push(global.slice_axis(record_axis, start, n)?);
            start += n;
        }
        let nonrecord = global.shape().remove_axis(record_axis)?;
        FederatedValue::new(federation, record_axis, nonrecord, locals)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fed(m: usize) -> Federation {
        Federation::numbered(m).unwrap()
    }

    #[test]
    fn vglob_of_vectors() {
        let x = FederatedValue::new(
            fed(2),
            1,
            Shape::scalar(),
            vec![
                TensorValue::vector(vec![1.0, 2.0]),
                TensorValue::vector(vec![3.0]),
            ],
        )
        .unwrap();
        assert_eq!(x.virtual_global().data(), &[1.0, 2.0, 3.0]);
        assert_eq!(x.record_counts(), vec![2, 1]);
    }

    #[test]
    fn vglob_column_concat() {
        let x = FederatedValue::new(
            fed(2),
            2,
            Shape::from([2]),
            vec![
                TensorValue::matrix(&[vec![1.0], vec![3.0]]).unwrap(),
                TensorValue::matrix(&[vec![4.0, 5.0], vec![6.0, 7.0]]).unwrap(),
            ],
        )
        .unwrap();
        let g = x.virtual_global();
        assert_eq!(g.shape(), &Shape::from([2, 3]));
        assert_eq!(g.data(), &[1.0, 4.0, 5.0, 3.0, 6.0, 7.0]);
    }

    #[test]
    fn single_client_vglob_is_identity() {
        let t = TensorValue::from_fn([3, 2], |i| (i[0] + 10 * i[1]) as f64);
        let x = FederatedValue::from_locals(fed(1), 1, vec![t.clone()]).unwrap();
        assert_eq!(x.virtual_global(), t);
    }

    #[test]
    fn empty_clients_are_allowed() {
        let x = FederatedValue::new(
            fed(2),
            1,
            Shape::from([2]),
            vec![TensorValue::zeros([0, 2]), TensorValue::zeros([0, 2])],
        )
        .unwrap();
        let g = x.virtual_global();
        assert_eq!(g.shape(), &Shape::from([0, 2]));
        assert!(g.data().is_empty());
    }

    #[test]
    fn rejects_bad_families() {
        assert!(Federation::new(Vec::<String>::new()).is_err());
        assert!(Federation::new(["a", "a"]).is_err());
        let bad = FederatedValue::new(
            fed(2),
            1,
            Shape::from([2]),
            vec![TensorValue::zeros([1, 2]), TensorValue::zeros([1, 3])],
        );
        assert!(matches!(bad, Err(FederationError::LocalShape { .. })));
        let bad_axis = FederatedValue::new(fed(1), 3, Shape::from([2]), vec![TensorValue::zeros([1, 2])]);
        assert!(matches!(bad_axis, Err(FederationError::RecordAxis { .. })));
    }
}
