//! Shared fixtures for the benchmarks.

use fedia_core::synth::{build_federation, generate_volume};
use fedia_core::{FederatedDataset, FederationSpec, LabeledVolume, ModelConfig, ModelParams, SegNet, VolumeSpec};
use fedia_core::rng::{self, Domain};

pub fn volume(seed: u64) -> LabeledVolume {
    generate_volume(&VolumeSpec::default(), seed).expect("default spec is valid")
}

pub fn network(seed: u64) -> (SegNet, ModelParams) {
    let net = SegNet::new(ModelConfig::default()).expect("default model is valid");
    let params = ModelParams::init(net.layout().clone(), &mut rng::stream(seed, Domain::Init, 0));
    (net, params)
}

pub fn federation(seed: u64) -> FederatedDataset {
    build_federation(&FederationSpec::default(), seed).expect("default federation is valid")
}
