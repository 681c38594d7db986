//! Shared fixtures for the benchmarks.

use segcotrain_core::data::{synth_volume, SplitTag};
use segcotrain_core::{Dims, LabelMap, SynthSpec, Volume};

/// Synthetic image/label pair `index` of edge `size`.
pub fn fixture(size: usize, index: usize) -> (Volume, LabelMap) {
    let spec = SynthSpec {
        dims: Dims::cube(size),
        ..SynthSpec::default()
    };
    synth_volume(&spec, SplitTag::Val, index).expect("valid synthetic spec")
}
