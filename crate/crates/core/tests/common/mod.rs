#![allow(dead_code)]

use std::collections::BTreeMap;

use mgrad::data::{Features, Matrix};
use mgrad::models::{init_params, ModelSpec, Triplet};
use mgrad::params::ParamSet;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub struct Instance {
    pub spec: ModelSpec,
    pub params: ParamSet,
    pub features: Features,
    pub batch: Vec<Triplet>,
    pub users: usize,
    pub items: usize,
}

/// Small random model instance; multimodal when `multimodal` is set.
pub fn random_instance(seed: u64, multimodal: bool) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let users = rng.random_range(2..=5);
    let items = rng.random_range(3..=6);
    let d = rng.random_range(1..=3);
    let mut dims = BTreeMap::new();
    let mut features = Features::new();
    if multimodal {
        for m in ["text", "visual"].iter().take(rng.random_range(1..=2)) {
            let dim = rng.random_range(1..=3);
            let data = (0..items * dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            features.insert(m.to_string(), Matrix::new(items, dim, data).unwrap());
            dims.insert(m.to_string(), dim);
        }
    }
    let spec = if multimodal {
        ModelSpec::multimodal(d, dims)
    } else {
        ModelSpec::mf(d)
    }
    .with_l2(rng.random_range(0.0..0.1));
    let mut params = init_params(&spec, users, items, rng.random(), 0.7).unwrap();
    // non-zero biases so every block is exercised
    let biases: Vec<f64> = (0..items).map(|_| rng.random_range(-0.5..0.5)).collect();
    params
        .insert("item_bias", mgrad::params::Tensor::from_vec(biases))
        .unwrap();
    let batch = (0..rng.random_range(1..=8))
        .map(|_| {
            let pos = rng.random_range(0..items);
            let mut neg = rng.random_range(0..items - 1);
            if neg >= pos {
                neg += 1;
            }
            Triplet::new(rng.random_range(0..users), pos, neg)
        })
        .collect();
    Instance {
        spec,
        params,
        features,
        batch,
        users,
        items,
    }
}

pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

pub struct Trained {
    pub spec: ModelSpec,
    pub params: ParamSet,
    pub dataset: mgrad::data::Dataset,
    pub full: Vec<Triplet>,
}

/// Small synthetic multimodal model trained with plain SGD on minibatches.
pub fn trained_toy(seed: u64, iterations: usize) -> Trained {
    use mgrad::data::{split, synth_generate, SplitRatios, SynthConfig, TripletSampler};
    use mgrad::models::BatchObjective;
    use mgrad::optim::{train_with, MgConfig, OptState, OptimizerKind};

    let syn = synth_generate(&SynthConfig {
        num_users: 60,
        num_items: 40,
        seed,
        ..Default::default()
    })
    .unwrap();
    let dataset = split(&syn.dataset, SplitRatios::default(), seed).unwrap();
    let spec = ModelSpec::multimodal(8, dataset.feature_dims());
    let p0 = init_params(&spec, dataset.num_users(), dataset.num_items(), seed, 0.1).unwrap();
    let sampler = TripletSampler::new(&dataset).unwrap();
    let full = sampler.full_pass(seed);
    let cfg = MgConfig::new(2.0, 1.0, 1, 1.0, OptimizerKind::Sgd, iterations)
        .unwrap()
        .without_mirror();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = train_with(
        &p0,
        &OptState::new(OptimizerKind::Sgd),
        |_| {
            Ok(BatchObjective {
                spec: &spec,
                features: &dataset.features,
                batch: sampler.sample_batch(&mut rng, 64),
            })
        },
        &cfg,
    )
    .unwrap()
    .params;
    Trained {
        spec,
        params,
        dataset,
        full,
    }
}
