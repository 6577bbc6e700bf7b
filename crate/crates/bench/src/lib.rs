//! Shared fixtures for the benchmarks.

use fedtensor_core::ast::FedType;
use fedtensor_core::federated::{Federation, FederatedValue};
use fedtensor_core::gen::random_federated;
use fedtensor_core::tensor::Shape;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

/// `clients` clients holding `rows` records of width `width` each.
pub fn federated_rows(clients: usize, rows: usize, width: usize, seed: u64) -> FederatedValue {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let fed = Federation::numbered(clients).expect("at least one client");
    let ty = FedType::new(1, Shape::from([width]));
    random_federated(&mut rng, &fed, &ty, &vec![rows; clients])
}

/// Scalar records, one column per client.
pub fn federated_scalars(clients: usize, rows: usize, seed: u64) -> FederatedValue {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let fed = Federation::numbered(clients).expect("at least one client");
    random_federated(&mut rng, &fed, &FedType::new(1, Shape::scalar()), &vec![rows; clients])
}
