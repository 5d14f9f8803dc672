use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::scalar::Scalar;

const MAGIC: &[u8; 4] = b"KVMS";
const VERSION: u32 = 1;

/// Per-layer compressive memory for all heads.
///
/// `sk` and `sv` are `[H, m, d_h]`, `rho` is `[H, m]`. Row `i` of `rho` is
/// fixed when the row is created and is never touched by merges.
#[derive(Clone, Debug, PartialEq)]
pub struct KvmState<T> {
    pub(crate) sk: Tensor<T>,
    pub(crate) sv: Tensor<T>,
    pub(crate) rho: Tensor<T>,
    pub(crate) sinks: usize,
}

impl<T: Scalar> KvmState<T> {
    pub fn new(sk: Tensor<T>, sv: Tensor<T>, rho: Tensor<T>, sinks: usize) -> Result<Self> {
        let s = sk.shape().to_vec();
        if s.len() != 3 || sv.shape() != s.as_slice() || rho.shape() != [s[0], s[1]] {
            return Err(Error::ShapeMismatch {
                op: "kvm_state",
                lhs: s,
                rhs: rho.shape().to_vec(),
            });
        }
        Ok(Self { sk, sv, rho, sinks })
    }

    pub fn heads(&self) -> usize {
        self.sk.shape()[0]
    }

    /// Current row count `m`.
    pub fn rows(&self) -> usize {
        self.sk.shape()[1]
    }

    pub fn head_dim(&self) -> usize {
        self.sk.shape()[2]
    }

    pub fn sinks(&self) -> usize {
        self.sinks
    }

    pub fn keys(&self) -> &Tensor<T> {
        &self.sk
    }

    pub fn values(&self) -> &Tensor<T> {
        &self.sv
    }

    pub fn radii(&self) -> &Tensor<T> {
        &self.rho
    }

    pub(crate) fn rho_column(&self) -> Tensor<T> {
        self.rho.clone().reshape([self.heads(), self.rows(), 1]).expect("rho shape")
    }

    /// Snapshot container: `"KVMS"`, then little-endian u32 version, m, S,
    /// d_h, H, followed by `sK` (H·m·d_h), `sV` (H·m·d_h) and `rho` (H·m) as
    /// little-endian f32, head-major and row-major.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let mut buf = Vec::with_capacity(24 + 4 * (2 * self.sk.numel() + self.rho.numel()));
        buf.extend_from_slice(MAGIC);
        for v in [
            VERSION,
            self.rows() as u32,
            self.sinks as u32,
            self.head_dim() as u32,
            self.heads() as u32,
        ] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for t in [&self.sk, &self.sv, &self.rho] {
            for &x in t.data() {
                buf.extend_from_slice(&(x.as_f64() as f32).to_le_bytes());
            }
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut head = [0u8; 24];
        r.read_exact(&mut head)?;
        if &head[..4] != MAGIC {
            return Err(Error::Format("not a KVM state snapshot".into()));
        }
        let field = |i: usize| u32::from_le_bytes(head[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
        if field(0) != VERSION as usize {
            return Err(Error::Format(format!("unsupported state version {}", field(0))));
        }
        let (m, sinks, dh, h) = (field(1), field(2), field(3), field(4));
        let mut read = |n: usize| -> Result<Vec<T>> {
            let mut bytes = vec![0u8; 4 * n];
            r.read_exact(&mut bytes)?;
            Ok(bytes
                .chunks_exact(4)
                .map(|b| T::of(f32::from_le_bytes(b.try_into().unwrap()) as f64))
                .collect())
        };
        let sk = Tensor::new([h, m, dh], read(h * m * dh)?)?;
        let sv = Tensor::new([h, m, dh], read(h * m * dh)?)?;
        let rho = Tensor::new([h, m], read(h * m)?)?;
        Self::new(sk, sv, rho, sinks)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::read_from(bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn state(h: usize, m: usize, dh: usize, seed: u64) -> KvmState<f32> {
        let f = |k: u64| move |i: usize| ((i as u64 * 2654435761 + seed * 97 + k) % 1000) as f32 / 37.0 - 13.0;
        KvmState::new(
            Tensor::from_fn([h, m, dh], f(1)),
            Tensor::from_fn([h, m, dh], f(2)),
            Tensor::from_fn([h, m], f(3)),
            1,
        )
        .unwrap()
    }

    #[test]
    fn header_layout() {
        let s = state(2, 3, 4, 0);
        let b = s.to_bytes();
        assert_eq!(&b[..4], b"KVMS");
        assert_eq!(u32::from_le_bytes(b[8..12].try_into().unwrap()), 3);
        assert_eq!(u32::from_le_bytes(b[12..16].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(b[16..20].try_into().unwrap()), 4);
        assert_eq!(u32::from_le_bytes(b[20..24].try_into().unwrap()), 2);
        assert_eq!(b.len(), 24 + 4 * (2 * 2 * 3 * 4 + 2 * 3));
        let first = f32::from_le_bytes(b[24..28].try_into().unwrap());
        assert_eq!(first, s.keys().data()[0]);
    }

    #[test]
    fn rejects_bad_magic() {
        let mut b = state(1, 1, 2, 0).to_bytes();
        b[0] = b'X';
        assert!(matches!(KvmState::<f32>::from_bytes(&b), Err(Error::Format(_))));
    }

    proptest! {
        #[test]
        fn snapshot_round_trip(h in 1usize..4, m in 1usize..9, dh in 1usize..6, seed in 0u64..1000) {
            let s = state(h, m, dh, seed);
            prop_assert_eq!(KvmState::<f32>::from_bytes(&s.to_bytes()).unwrap(), s);
        }
    }
}
