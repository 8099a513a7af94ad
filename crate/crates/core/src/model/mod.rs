//! The capsule backbone, dynamic routing, and the three heads.

mod config;
mod network;
mod routing;

pub use config::{BackboneConfig, Profile};
pub use network::{CapsuleOutputs, ForwardCache, ModelInput, OutputGrads, ProtoCaps};
pub use routing::{route, route_backward, routing, routing_trace, RoutingDims, RoutingTrace};

/// Parameter ids of [`ProtoCaps`], in registration order.
pub mod param_ids {
    pub use super::network::{
        ATTR_B, ATTR_W, DEC0_B, DEC0_W, DEC1_B, DEC1_W, DEC2_B, DEC2_W, PRIMARY_B, PRIMARY_W, ROUTING_W, STEM_B,
        STEM_W, TARGET_B, TARGET_W,
    };
}
