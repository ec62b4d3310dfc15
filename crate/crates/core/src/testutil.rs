use rand_distr::{Distribution, Normal};

use crate::features::FeatureSet;
use crate::nn::{ArchSpec, ConvBlock};
use crate::rng;

/// Alternating labels; arc rows have `centre` added to the upper half.
pub(crate) fn blobs_with(n: usize, dim: usize, centre: f32, seed: u64) -> FeatureSet {
    let mut r = rng::seeded(seed);
    let noise = Normal::new(0.0, 1.0).unwrap();
    let mut set = FeatureSet::new(dim);
    for i in 0..n {
        let label = (i % 2) as u8;
        let row: Vec<f32> = (0..dim)
            .map(|j| {
                let c = if label == 1 && j >= dim / 2 { centre } else { 0.0 };
                c + noise.sample(&mut r) as f32
            })
            .collect();
        set.push(&row, label).unwrap();
    }
    set
}

pub(crate) fn blobs(n: usize, dim: usize, seed: u64) -> FeatureSet {
    blobs_with(n, dim, 5.0, seed)
}

pub(crate) fn small_arch() -> ArchSpec {
    ArchSpec {
        input_dim: 16,
        conv_blocks: vec![ConvBlock { kernel: 3, channels: 4, pool: 2 }],
        dropout_p: 0.2,
        fc_hidden: 8,
        num_classes: 2,
    }
}

/// A default-architecture model whose output ignores its input.
pub(crate) fn constant_model(arc: bool) -> crate::nn::Model {
    let mut m = crate::nn::Model::init(&ArchSpec::default(), 4).unwrap();
    let b = if arc { [-10.0, 10.0] } else { [10.0, -10.0] };
    m.params.get_mut("head.bias").unwrap().data = b.to_vec();
    m.params.get_mut("head.weight").unwrap().data.fill(0.0);
    m
}
