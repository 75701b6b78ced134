#![allow(dead_code)]

use std::collections::BTreeMap;

use phenofuse::eval::split_by_plant;
use phenofuse::store::{Crop, EmbeddingCache};
use phenofuse::synth::{generate_synthetic_cache, SynthSpec};

/// Holds out the highest-numbered plant of every crop in the spec.
pub fn last_plant_hold_out(spec: &SynthSpec) -> BTreeMap<Crop, u32> {
    spec.crops.iter().map(|c| (c.clone(), spec.n_plants)).collect()
}

/// (train, test) caches for a synthetic spec split by [`last_plant_hold_out`].
pub fn synthetic_split(spec: &SynthSpec) -> (EmbeddingCache, EmbeddingCache) {
    let cache = generate_synthetic_cache(spec).unwrap().cache;
    let split = split_by_plant(&cache.records, &last_plant_hold_out(spec)).unwrap();
    (cache.subset(&split.train), cache.subset(&split.test))
}

pub fn small_spec(crops: Vec<Crop>, n_plants: u32, n_days: u32) -> SynthSpec {
    SynthSpec {
        crops,
        n_plants,
        n_days,
        ..SynthSpec::default()
    }
}
