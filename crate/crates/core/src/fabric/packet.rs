use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::KernelAddress;

/// Width of one AXI-Stream data beat.
pub const FLIT_BYTES: usize = 64;
/// Size of an encoded [`GalapagosHeader`].
pub const HEADER_BYTES: usize = 8;
/// TUSER bit selecting the inter-cluster routing table.
pub const TUSER_INTER_CLUSTER_BIT: u32 = 16;

const FLAG_INTER_CLUSTER: u8 = 0x01;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum HeaderError {
    #[error("header needs {HEADER_BYTES} bytes, got {0}")]
    Truncated(usize),
    #[error("reserved header flag bits set: {0:#04x}")]
    ReservedFlags(u8),
    #[error("GMI destination kernel id {0} does not fit in one byte")]
    KernelIdOutOfRange(u32),
    #[error("inter-cluster payload is empty, no GMI header byte")]
    MissingGmiHeader,
}

/// One 64-byte data beat.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Flit {
    pub payload: [u8; FLIT_BYTES],
    /// End-of-packet marker (TLAST).
    pub last: bool,
}

/// Galapagos packet header.
///
/// With `inter_cluster` clear, `receiver` is a kernel ID in the sender's
/// cluster. With it set, `receiver` is a destination cluster ID and the packet
/// is routed to that cluster's gateway.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GalapagosHeader {
    pub sender: KernelAddress,
    pub receiver: u8,
    pub message_size: u32,
    pub inter_cluster: bool,
}

impl GalapagosHeader {
    pub fn encode(&self) -> [u8; HEADER_BYTES] {
        let mut out = [0u8; HEADER_BYTES];
        out[0] = self.sender.cluster;
        out[1] = self.sender.kernel;
        out[2] = self.receiver;
        out[3] = if self.inter_cluster {
            FLAG_INTER_CLUSTER
        } else {
            0
        };
        out[4..8].copy_from_slice(&self.message_size.to_le_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, HeaderError> {
        if bytes.len() < HEADER_BYTES {
            return Err(HeaderError::Truncated(bytes.len()));
        }
        let flags = bytes[3];
        if flags & !FLAG_INTER_CLUSTER != 0 {
            return Err(HeaderError::ReservedFlags(flags));
        }
        Ok(Self {
            sender: KernelAddress::new(bytes[0], bytes[1]),
            receiver: bytes[2],
            inter_cluster: flags & FLAG_INTER_CLUSTER != 0,
            message_size: u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")),
        })
    }

    /// Sideband TUSER word: sender address in the low 16 bits, bit 16 set for
    /// inter-cluster packets.
    pub fn tuser(&self) -> u32 {
        u32::from(self.sender.flat()) | (u32::from(self.inter_cluster) << TUSER_INTER_CLUSTER_BIT)
    }
}

/// A framed message: header plus payload bytes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GalapagosPacket {
    pub header: GalapagosHeader,
    pub payload: Vec<u8>,
}

impl GalapagosPacket {
    pub fn new(sender: KernelAddress, receiver: u8, inter_cluster: bool, payload: Vec<u8>) -> Self {
        let header = GalapagosHeader {
            sender,
            receiver,
            message_size: payload.len() as u32,
            inter_cluster,
        };
        Self { header, payload }
    }

    pub fn flit_count(&self) -> usize {
        flits_for(self.payload.len())
    }

    /// Split the payload into zero-padded flits with TLAST on the final beat.
    pub fn flits(&self) -> Vec<Flit> {
        let n = self.flit_count();
        (0..n)
            .map(|i| {
                let mut payload = [0u8; FLIT_BYTES];
                let start = i * FLIT_BYTES;
                let end = (start + FLIT_BYTES).min(self.payload.len());
                if start < end {
                    payload[..end - start].copy_from_slice(&self.payload[start..end]);
                }
                Flit {
                    payload,
                    last: i + 1 == n,
                }
            })
            .collect()
    }
}

/// Number of flits needed for `bytes` of payload; an empty message still
/// occupies one beat.
pub fn flits_for(bytes: usize) -> usize {
    bytes.div_ceil(FLIT_BYTES).max(1)
}

/// Prepend the one-byte GMI header naming the destination kernel inside the
/// target cluster.
pub fn attach_gmi_header(payload: &[u8], dest_kernel_id: u32) -> Result<Vec<u8>, HeaderError> {
    let id = u8::try_from(dest_kernel_id)
        .map_err(|_| HeaderError::KernelIdOutOfRange(dest_kernel_id))?;
    let mut out = Vec::with_capacity(payload.len() + 1);
    out.push(id);
    out.extend_from_slice(payload);
    Ok(out)
}

/// Inverse of [`attach_gmi_header`].
pub fn strip_gmi_header(payload: &[u8]) -> Result<(u8, &[u8]), HeaderError> {
    match payload.split_first() {
        Some((id, rest)) => Ok((*id, rest)),
        None => Err(HeaderError::MissingGmiHeader),
    }
}
