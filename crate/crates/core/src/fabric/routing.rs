use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{GalapagosHeader, NodeId};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum RouteError {
    #[error("no local route for kernel {kernel} in cluster {cluster}")]
    NoLocalRoute { cluster: u8, kernel: u8 },
    #[error("no gateway route for cluster {0}")]
    NoGatewayRoute(u8),
}

/// Per-node routing state.
///
/// The local table resolves kernel IDs of the node's own cluster; the gateway
/// table resolves foreign cluster IDs to the node hosting that cluster's
/// gateway. The local cluster never appears in the gateway table.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoutingTables {
    pub cluster: u8,
    pub local: BTreeMap<u8, NodeId>,
    pub gateways: BTreeMap<u8, NodeId>,
}

impl RoutingTables {
    pub fn new(cluster: u8) -> Self {
        Self {
            cluster,
            ..Self::default()
        }
    }

    /// Number of table entries, one per local kernel and foreign gateway.
    pub fn entries(&self) -> usize {
        self.local.len() + self.gateways.len()
    }

    /// Distinct node addresses the node must hold. Kernels sharing a node
    /// share its address.
    pub fn stored_addresses(&self) -> usize {
        self.local
            .values()
            .chain(self.gateways.values())
            .collect::<std::collections::BTreeSet<_>>()
            .len()
    }
}

/// Resolve the node a packet must be delivered to.
///
/// The TUSER inter-cluster bit selects the table: clear means the receiver is a
/// local kernel, set means the receiver names a cluster whose gateway gets the
/// packet.
pub fn route(header: &GalapagosHeader, tables: &RoutingTables) -> Result<NodeId, RouteError> {
    if header.inter_cluster {
        tables
            .gateways
            .get(&header.receiver)
            .copied()
            .ok_or(RouteError::NoGatewayRoute(header.receiver))
    } else {
        tables
            .local
            .get(&header.receiver)
            .copied()
            .ok_or(RouteError::NoLocalRoute {
                cluster: tables.cluster,
                kernel: header.receiver,
            })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fabric::KernelAddress;

    fn header(receiver: u8, inter_cluster: bool) -> GalapagosHeader {
        GalapagosHeader {
            sender: KernelAddress::new(0, 1),
            receiver,
            message_size: 768,
            inter_cluster,
        }
    }

    #[test]
    fn local_lookup() {
        let mut t = RoutingTables::new(0);
        t.local.insert(5, NodeId(2));
        assert_eq!(route(&header(5, false), &t), Ok(NodeId(2)));
    }

    #[test]
    fn inter_cluster_goes_to_gateway_node() {
        let mut t = RoutingTables::new(0);
        t.local.insert(3, NodeId(1));
        t.gateways.insert(3, NodeId(9));
        // Same receiver byte, different table.
        assert_eq!(route(&header(3, true), &t), Ok(NodeId(9)));
        assert_eq!(route(&header(3, false), &t), Ok(NodeId(1)));
    }

    #[test]
    fn co_located_kernels_share_an_address() {
        let mut t = RoutingTables::new(0);
        for k in 0..38 {
            t.local.insert(k, NodeId(u16::from(k) % 6));
        }
        for c in 1..12 {
            t.gateways.insert(c, NodeId(100 + u16::from(c)));
        }
        assert_eq!(t.entries(), 49);
        assert_eq!(t.stored_addresses(), 17);
    }

    #[test]
    fn missing_entries_fault() {
        let t = RoutingTables::new(4);
        assert_eq!(
            route(&header(8, false), &t),
            Err(RouteError::NoLocalRoute {
                cluster: 4,
                kernel: 8
            })
        );
        assert_eq!(
            route(&header(8, true), &t),
            Err(RouteError::NoGatewayRoute(8))
        );
    }
}
