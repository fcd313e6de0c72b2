//! A small reverse-mode differentiable 3D tensor substrate.

pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod layers;
pub mod params;
pub mod tensor;

pub use graph::{Graph, Mode, Var};
pub use kernels::ConvGeom;
pub use layers::{LayerSpec, Sequential, BN_EPS, BN_MOMENTUM, LEAKY_SLOPE};
pub use params::{Param, ParamStore};
pub use tensor::{Real, Shape5, Tensor};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;

/// Deterministically initialises every parameter of `nets` from one seed.
///
/// Conv weights are uniform in `±sqrt(1/fan_in)`, biases zero, norm scales
/// one and shifts zero; running statistics start at mean 0, variance 1.
pub fn init_params<T: Real>(nets: &[&Sequential], seed: u64) -> Result<ParamStore<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    for net in nets {
        net.init_params(&mut store, &mut rng)?;
    }
    Ok(store)
}
