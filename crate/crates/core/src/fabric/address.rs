use std::fmt;

use serde::{Deserialize, Serialize};

/// Clusters addressable with an 8-bit cluster ID.
pub const MAX_CLUSTERS: usize = 256;
/// Kernels addressable with an 8-bit kernel ID inside one cluster.
pub const MAX_KERNELS_PER_CLUSTER: usize = 256;

/// Two-level kernel address: 256 clusters of 256 kernels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct KernelAddress {
    pub cluster: u8,
    pub kernel: u8,
}

impl KernelAddress {
    pub const fn new(cluster: u8, kernel: u8) -> Self {
        Self { cluster, kernel }
    }

    /// Kernel 0 of the cluster, reserved for the gateway.
    pub const fn gateway_of(cluster: u8) -> Self {
        Self { cluster, kernel: 0 }
    }

    pub fn is_gateway(&self) -> bool {
        self.kernel == 0
    }

    /// Flat 16-bit index, `cluster * 256 + kernel`.
    pub fn flat(&self) -> u16 {
        (u16::from(self.cluster) << 8) | u16::from(self.kernel)
    }
}

impl fmt::Display for KernelAddress {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.cluster, self.kernel)
    }
}

/// Opaque address of a simulated FPGA node (stands in for an IP/MAC pair).
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NodeId(pub u16);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "node{}", self.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn address_space_is_sixteen_bits() {
        assert_eq!(MAX_CLUSTERS * MAX_KERNELS_PER_CLUSTER, 65_536);
        assert_eq!(KernelAddress::new(255, 255).flat(), u16::MAX);
        assert_eq!(KernelAddress::new(1, 2).flat(), 258);
    }

    #[test]
    fn gateway_is_kernel_zero() {
        let gw = KernelAddress::gateway_of(7);
        assert!(gw.is_gateway());
        assert!(!KernelAddress::new(7, 1).is_gateway());
    }
}
