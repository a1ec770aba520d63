//! Fixtures shared by the benchmarks.

use slgrad_core::data::{next_batch, TaskBatch};
use slgrad_core::harness::build_dataset;
use slgrad_core::model::init_network;
use slgrad_core::{Algorithm, Dataset, MtlNetwork, Rng, TrainConfig};

pub struct Fixture {
    pub config: TrainConfig,
    pub data: Dataset,
    pub net: MtlNetwork,
    pub batch: TaskBatch,
    pub val_batch: TaskBatch,
}

/// Toy problem at 40% noise with the tuned architecture of `algorithm`.
pub fn toy_fixture(algorithm: Algorithm, batch_size: usize) -> Fixture {
    let config = TrainConfig {
        batch_size,
        ..TrainConfig::toy_optimal(algorithm, 0.4, 0)
    };
    let data = build_dataset(&config).expect("toy data");
    let arch = config.architecture(data.input_dim(), data.output_dims.clone());
    let net = init_network(&arch, &mut Rng::new(0)).expect("valid architecture");
    let mut rng = Rng::new(1);
    let batch = next_batch(&data.train, batch_size, &mut rng).expect("batch");
    let val_batch = next_batch(&data.val, batch_size, &mut rng).expect("batch");
    Fixture {
        config,
        data,
        net,
        batch,
        val_batch,
    }
}
