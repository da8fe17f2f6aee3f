//! Packet formats, hierarchical addressing, routing and the simulated network.

mod address;
mod network;
mod packet;
mod routing;

pub use address::{KernelAddress, NodeId, MAX_CLUSTERS, MAX_KERNELS_PER_CLUSTER};
pub use network::{NetError, Network, NetworkConfig, SwitchId, Topology, Transit};
pub use packet::{
    attach_gmi_header, flits_for, strip_gmi_header, Flit, GalapagosHeader, GalapagosPacket,
    HeaderError, FLIT_BYTES, HEADER_BYTES, TUSER_INTER_CLUSTER_BIT,
};
pub use routing::{route, RouteError, RoutingTables};
