//! The feature exchange message and its wire format.
//!
//! ```text
//! offset  size                 field
//! 0       4                    magic "FCLX"
//! 4       4                    version (u32, currently 1)
//! 8       4                    sender client id (u32)
//! 12      4                    round index (u32)
//! 16      4                    feature count n (u32)
//! 20      4                    embedding dim d (u32)
//! 24      4·n·d                feature vectors, f32, row-major
//! ..      6·n                  per feature: volume id (u32), partition id (u16)
//! ```
//!
//! All integers and floats are little-endian. Nothing but features and their
//! tags can be expressed in this format.

use crate::codec;
use crate::contrastive::{ClientId, Feature, MemoryBank};
use crate::error::{FclError, Result};
use crate::tensor_math::Vec64;

pub const EXCHANGE_MAGIC: &[u8; 4] = b"FCLX";
pub const EXCHANGE_VERSION: u32 = 1;
pub const HEADER_LEN: usize = 24;

mod sealed {
    pub trait Sealed {}
}

/// Types allowed to cross a client boundary. Sealed: [`ExchangeMessage`] is
/// the only implementor.
pub trait WirePayload: sealed::Sealed + Sized {
    fn encode(&self) -> Result<Vec<u8>>;
    fn decode(bytes: &[u8]) -> Result<Self>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExchangeMessage {
    sender_id: ClientId,
    round_index: u32,
    features: Vec<Feature>,
}

impl sealed::Sealed for ExchangeMessage {}

impl ExchangeMessage {
    pub fn new(sender_id: ClientId, round_index: u32, features: Vec<Feature>) -> Result<Self> {
        if let Some(f) = features.iter().find(|f| f.client_id() != sender_id) {
            return Err(FclError::Protocol(format!(
                "client {sender_id} tried to send a feature owned by client {}",
                f.client_id()
            )));
        }
        if let Some(first) = features.first() {
            let d = first.dim();
            if let Some(f) = features.iter().find(|f| f.dim() != d) {
                return Err(FclError::dim("exchange message", d, f.dim()));
            }
        }
        Ok(ExchangeMessage {
            sender_id,
            round_index,
            features,
        })
    }

    /// Snapshot of a client's local bank.
    pub fn from_bank(sender_id: ClientId, round_index: u32, bank: &MemoryBank) -> Result<Self> {
        ExchangeMessage::new(sender_id, round_index, bank.iter().cloned().collect())
    }

    pub fn sender_id(&self) -> ClientId {
        self.sender_id
    }

    pub fn round_index(&self) -> u32 {
        self.round_index
    }

    pub fn features(&self) -> &[Feature] {
        &self.features
    }

    pub fn into_features(self) -> Vec<Feature> {
        self.features
    }

    pub fn encoded_len(count: usize, dim: usize) -> usize {
        HEADER_LEN + 4 * count * dim + 6 * count
    }
}

impl WirePayload for ExchangeMessage {
    fn encode(&self) -> Result<Vec<u8>> {
        let count = self.features.len();
        let dim = self.features.first().map_or(0, Feature::dim);
        let mut w = Vec::with_capacity(ExchangeMessage::encoded_len(count, dim));
        w.extend_from_slice(EXCHANGE_MAGIC);
        codec::write_u32(&mut w, EXCHANGE_VERSION)?;
        codec::write_u32(&mut w, self.sender_id)?;
        codec::write_u32(&mut w, self.round_index)?;
        codec::write_u32(&mut w, codec::to_u32(count, "feature count")?)?;
        codec::write_u32(&mut w, codec::to_u32(dim, "embedding dim")?)?;
        for f in &self.features {
            for &v in f.vec().iter() {
                codec::write_f32(&mut w, v as f32)?;
            }
        }
        for f in &self.features {
            codec::write_u32(&mut w, f.volume_id())?;
            codec::write_u16(&mut w, f.partition_id())?;
        }
        Ok(w)
    }

    fn decode(bytes: &[u8]) -> Result<Self> {
        const KIND: &str = "exchange message";
        let r = &mut &bytes[..];
        codec::expect_magic(r, EXCHANGE_MAGIC, KIND)?;
        codec::expect_version(r, EXCHANGE_VERSION, KIND)?;
        let sender_id = codec::read_u32(r, KIND)?;
        let round_index = codec::read_u32(r, KIND)?;
        let count = codec::read_u32(r, KIND)? as usize;
        let dim = codec::read_u32(r, KIND)? as usize;
        if bytes.len() != ExchangeMessage::encoded_len(count, dim) {
            return Err(FclError::Format {
                kind: KIND,
                message: format!(
                    "length {} does not match header ({count} features of dim {dim})",
                    bytes.len()
                ),
            });
        }
        if count > 0 && dim == 0 {
            return Err(FclError::Format {
                kind: KIND,
                message: "zero embedding dim".into(),
            });
        }
        let mut vecs = Vec::with_capacity(count);
        for _ in 0..count {
            let v = (0..dim)
                .map(|_| codec::read_f32(r, KIND).map(f64::from))
                .collect::<Result<Vec<_>>>()?;
            vecs.push(Vec64::new(v)?);
        }
        let mut features = Vec::with_capacity(count);
        for v in vecs {
            let volume = codec::read_u32(r, KIND)?;
            let partition = codec::read_u16(r, KIND)?;
            features.push(Feature::new(v, sender_id, volume, partition)?);
        }
        ExchangeMessage::new(sender_id, round_index, features)
    }
}

/// In-process delivery of exchange messages, optionally through the wire
/// encoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Transport {
    pub serialize: bool,
}

impl Transport {
    pub fn deliver<P: WirePayload + Clone>(&self, msg: &P) -> Result<P> {
        if self.serialize {
            P::decode(&msg.encode()?)
        } else {
            Ok(msg.clone())
        }
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::tensor_math::l2_normalize;

    fn feature(client: u32, seed: &[f64], volume: u32, partition: u16) -> Feature {
        Feature::new(l2_normalize(seed).unwrap(), client, volume, partition).unwrap()
    }

    #[test]
    fn header_layout_is_exact() {
        let msg = ExchangeMessage::new(
            7,
            3,
            vec![
                feature(7, &[1.0, 0.0], 11, 2),
                feature(7, &[0.0, -1.0], 12, 3),
            ],
        )
        .unwrap();
        let bytes = msg.encode().unwrap();
        assert_eq!(bytes.len(), ExchangeMessage::encoded_len(2, 2));
        assert_eq!(&bytes[0..4], b"FCLX");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &7u32.to_le_bytes());
        assert_eq!(&bytes[12..16], &3u32.to_le_bytes());
        assert_eq!(&bytes[16..20], &2u32.to_le_bytes());
        assert_eq!(&bytes[20..24], &2u32.to_le_bytes());
        assert_eq!(&bytes[24..28], &1.0f32.to_le_bytes());
        assert_eq!(&bytes[36..40], &(-1.0f32).to_le_bytes());
        assert_eq!(&bytes[40..44], &11u32.to_le_bytes());
        assert_eq!(&bytes[44..46], &2u16.to_le_bytes());
        assert_eq!(&bytes[46..50], &12u32.to_le_bytes());
        assert_eq!(&bytes[50..52], &3u16.to_le_bytes());
    }

    #[test]
    fn rejects_foreign_features_and_bad_bytes() {
        assert!(matches!(
            ExchangeMessage::new(1, 0, vec![feature(2, &[1.0], 0, 0)]),
            Err(FclError::Protocol(_))
        ));
        let msg = ExchangeMessage::new(1, 0, vec![feature(1, &[1.0, 1.0], 0, 0)]).unwrap();
        let mut bytes = msg.encode().unwrap();
        bytes.push(0);
        assert!(ExchangeMessage::decode(&bytes).is_err());
        bytes.pop();
        bytes[0] = b'Y';
        assert!(matches!(
            ExchangeMessage::decode(&bytes),
            Err(FclError::Format { .. })
        ));
        let empty = ExchangeMessage::new(4, 2, vec![]).unwrap();
        assert_eq!(
            ExchangeMessage::decode(&empty.encode().unwrap()).unwrap(),
            empty
        );
    }

    proptest! {
        #[test]
        fn round_trip_within_f32_precision(
            raw in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 8), 1..20),
            sender in 0u32..100,
            round in 0u32..1000,
        ) {
            let feats: Vec<Feature> = raw
                .iter()
                .enumerate()
                .filter_map(|(i, v)| {
                    l2_normalize(v).ok().map(|u| Feature::new(u, sender, i as u32, (i % 4) as u16).unwrap())
                })
                .collect();
            let msg = ExchangeMessage::new(sender, round, feats).unwrap();
            let back = Transport { serialize: true }.deliver(&msg).unwrap();
            prop_assert_eq!(back.sender_id(), sender);
            prop_assert_eq!(back.round_index(), round);
            prop_assert_eq!(back.features().len(), msg.features().len());
            for (a, b) in msg.features().iter().zip(back.features()) {
                prop_assert_eq!(a.volume_id(), b.volume_id());
                prop_assert_eq!(a.partition_id(), b.partition_id());
                for (x, y) in a.vec().iter().zip(b.vec().iter()) {
                    prop_assert!((x - y).abs() < 1e-6);
                }
            }
        }
    }
}
