//! Canonical wire encoding for every object that travels between replicas.
//!
//! Fixed field order, little-endian integers, one-byte presence markers for
//! absent fields. There is exactly one encoding per value and the decoder
//! rejects anything else (unknown discriminants, non-zero padding, trailing
//! bytes), so byte-level accounting and replay stay exact.
//!
//! Pinned layouts:
//! - tag: 8-byte LE payload length, then the 32-byte root;
//! - fragment: 2-byte LE index, 4-byte LE data length, data bytes, then the
//!   validation-path digests (32 bytes each, sides implied by the index).

use thiserror::Error;

use crate::codec::{CertifiedFragment, Tag};
use crate::crypto::{BodyTarget, Certificate, SignBody, SignKind, SignShare};
use crate::hash::{Digest, DIGEST_LEN};
use crate::types::{
    Block, BlockProposal, CertKind, CertificateObject, FinalVote, FirstVote, Message, NotarVote,
    Vote,
};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum WireError {
    #[error("input truncated")]
    Truncated,
    #[error("trailing bytes after message")]
    TrailingBytes,
    #[error("unknown discriminant {value} for {what}")]
    BadDiscriminant { what: &'static str, value: u8 },
    #[error("malformed {0}")]
    Malformed(&'static str),
    #[error("length field out of bounds")]
    BadLength,
}

// Caps on attacker-controlled length fields, far above anything the
// protocol produces at desk scale.
const MAX_FRAGMENT_DATA: usize = 1 << 24;
const MAX_SIGNERS: usize = 1 << 12;

pub fn encode_message(msg: &Message) -> Vec<u8> {
    let mut out = Vec::with_capacity(256);
    match msg {
        Message::Proposal(p) => {
            out.push(1);
            put_block(&mut out, &p.block);
            put_fragment(&mut out, &p.fragment);
        }
        Message::Vote(v) => {
            out.push(2);
            put_vote(&mut out, v);
        }
        Message::Certificate(c) => {
            out.push(3);
            put_certificate_object(&mut out, c);
        }
    }
    out
}

pub fn decode_message(bytes: &[u8]) -> Result<Message, WireError> {
    let mut r = Reader::new(bytes);
    let msg = match r.u8()? {
        1 => {
            let block = get_block(&mut r)?;
            let fragment = get_fragment(&mut r)?;
            Message::Proposal(BlockProposal { block, fragment })
        }
        2 => Message::Vote(get_vote(&mut r)?),
        3 => Message::Certificate(get_certificate_object(&mut r)?),
        value => {
            return Err(WireError::BadDiscriminant {
                what: "message",
                value,
            })
        }
    };
    r.finish()?;
    Ok(msg)
}

fn put_block(out: &mut Vec<u8>, block: &Block) {
    out.extend_from_slice(&block.canonical_bytes());
}

fn get_block(r: &mut Reader) -> Result<Block, WireError> {
    let slot = r.u64()?;
    let tag = match r.marker("tag presence")? {
        false => None,
        true => Some(Tag {
            payload_len: r.u64()?,
            root: r.digest()?,
        }),
    };
    let parent = match r.marker("parent presence")? {
        false => None,
        true => Some(r.digest()?),
    };
    Ok(Block { slot, tag, parent })
}

fn put_fragment(out: &mut Vec<u8>, frag: &CertifiedFragment) {
    // u32 blob length first so fragments can be framed inside larger
    // messages without a path-count field.
    let blob_len = 2 + 4 + frag.data.len() + frag.path.len() * DIGEST_LEN;
    out.extend_from_slice(&(blob_len as u32).to_le_bytes());
    out.extend_from_slice(&frag.index.to_le_bytes());
    out.extend_from_slice(&(frag.data.len() as u32).to_le_bytes());
    out.extend_from_slice(&frag.data);
    for digest in &frag.path {
        out.extend_from_slice(digest.as_bytes());
    }
}

fn get_fragment(r: &mut Reader) -> Result<CertifiedFragment, WireError> {
    let blob_len = r.u32()? as usize;
    let mut fr = Reader::new(r.take(blob_len)?);
    let index = fr.u16()?;
    let data_len = fr.u32()? as usize;
    if data_len > MAX_FRAGMENT_DATA {
        return Err(WireError::BadLength);
    }
    let data = fr.take(data_len)?.to_vec();
    let rest = fr.remaining();
    if !rest.is_multiple_of(DIGEST_LEN) {
        return Err(WireError::Malformed("fragment path"));
    }
    let mut path = Vec::with_capacity(rest / DIGEST_LEN);
    while fr.remaining() > 0 {
        path.push(fr.digest()?);
    }
    Ok(CertifiedFragment { index, data, path })
}

fn put_sign_body(out: &mut Vec<u8>, body: &SignBody) {
    out.extend_from_slice(&body.canonical_bytes());
}

fn get_sign_body(r: &mut Reader) -> Result<SignBody, WireError> {
    let instance = r.u64()?;
    let slot = r.u64()?;
    let marker = r.u8()?;
    let digest = r.digest()?;
    let target = match marker {
        0 => BodyTarget::Block(digest),
        1 => {
            if digest != Digest::ZERO {
                return Err(WireError::Malformed("timeout body padding"));
            }
            BodyTarget::Timeout
        }
        value => {
            return Err(WireError::BadDiscriminant {
                what: "body target",
                value,
            })
        }
    };
    Ok(SignBody {
        instance,
        slot,
        target,
    })
}

fn put_share(out: &mut Vec<u8>, share: &SignShare) {
    out.extend_from_slice(&share.signer.to_le_bytes());
    out.push(share.kind.as_u8());
    put_sign_body(out, &share.body);
    out.extend_from_slice(share.share.as_bytes());
}

fn get_share(r: &mut Reader) -> Result<SignShare, WireError> {
    let signer = r.u16()?;
    let kind_byte = r.u8()?;
    let kind = SignKind::from_u8(kind_byte).ok_or(WireError::BadDiscriminant {
        what: "share kind",
        value: kind_byte,
    })?;
    let body = get_sign_body(r)?;
    let share = r.digest()?;
    Ok(SignShare {
        signer,
        kind,
        body,
        share,
    })
}

fn put_vote(out: &mut Vec<u8>, vote: &Vote) {
    match vote {
        Vote::Notar(v) => {
            out.push(1);
            put_notar_vote(out, v);
        }
        Vote::First(v) => {
            out.push(2);
            put_share(out, &v.first_share);
            put_notar_vote(out, &v.inner);
        }
        Vote::Final(v) => {
            out.push(3);
            put_block(out, &v.block);
            out.extend_from_slice(&v.signer.to_le_bytes());
            put_share(out, &v.share);
        }
    }
}

fn get_vote(r: &mut Reader) -> Result<Vote, WireError> {
    match r.u8()? {
        1 => Ok(Vote::Notar(get_notar_vote(r)?)),
        2 => {
            let first_share = get_share(r)?;
            let inner = get_notar_vote(r)?;
            Ok(Vote::First(FirstVote { first_share, inner }))
        }
        3 => {
            let block = get_block(r)?;
            let signer = r.u16()?;
            let share = get_share(r)?;
            Ok(Vote::Final(FinalVote {
                block,
                signer,
                share,
            }))
        }
        value => Err(WireError::BadDiscriminant {
            what: "vote",
            value,
        }),
    }
}

fn put_notar_vote(out: &mut Vec<u8>, v: &NotarVote) {
    put_block(out, &v.block);
    out.extend_from_slice(&v.signer.to_le_bytes());
    put_share(out, &v.share);
    match &v.fragment {
        None => out.push(0),
        Some(frag) => {
            out.push(1);
            put_fragment(out, frag);
        }
    }
}

fn get_notar_vote(r: &mut Reader) -> Result<NotarVote, WireError> {
    let block = get_block(r)?;
    let signer = r.u16()?;
    let share = get_share(r)?;
    let fragment = match r.marker("fragment presence")? {
        false => None,
        true => Some(get_fragment(r)?),
    };
    Ok(NotarVote {
        block,
        signer,
        share,
        fragment,
    })
}

fn cert_kind_byte(kind: CertKind) -> u8 {
    match kind {
        CertKind::Notar => 1,
        CertKind::Timeout => 2,
        CertKind::FastFinal => 3,
        CertKind::Final => 4,
    }
}

fn put_certificate_object(out: &mut Vec<u8>, co: &CertificateObject) {
    out.push(cert_kind_byte(co.kind));
    put_block(out, &co.block);
    let cert = &co.cert;
    out.push(cert.kind.as_u8());
    put_sign_body(out, &cert.body);
    out.extend_from_slice(&cert.threshold.to_le_bytes());
    out.extend_from_slice(&(cert.signers.len() as u16).to_le_bytes());
    for signer in &cert.signers {
        out.extend_from_slice(&signer.to_le_bytes());
    }
    for share in &cert.shares {
        out.extend_from_slice(share.as_bytes());
    }
}

fn get_certificate_object(r: &mut Reader) -> Result<CertificateObject, WireError> {
    let kind = match r.u8()? {
        1 => CertKind::Notar,
        2 => CertKind::Timeout,
        3 => CertKind::FastFinal,
        4 => CertKind::Final,
        value => {
            return Err(WireError::BadDiscriminant {
                what: "certificate kind",
                value,
            })
        }
    };
    let block = get_block(r)?;
    let sign_kind_byte = r.u8()?;
    let sign_kind = SignKind::from_u8(sign_kind_byte).ok_or(WireError::BadDiscriminant {
        what: "certificate sign kind",
        value: sign_kind_byte,
    })?;
    let body = get_sign_body(r)?;
    let threshold = r.u16()?;
    let count = r.u16()? as usize;
    if count > MAX_SIGNERS {
        return Err(WireError::BadLength);
    }
    let mut signers = Vec::with_capacity(count);
    for _ in 0..count {
        signers.push(r.u16()?);
    }
    let mut shares = Vec::with_capacity(count);
    for _ in 0..count {
        shares.push(r.digest()?);
    }
    Ok(CertificateObject {
        kind,
        block,
        cert: Certificate {
            kind: sign_kind,
            body,
            threshold,
            signers,
            shares,
        },
    })
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Reader { bytes, pos: 0 }
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, len: usize) -> Result<&'a [u8], WireError> {
        if self.remaining() < len {
            return Err(WireError::Truncated);
        }
        let out = &self.bytes[self.pos..self.pos + len];
        self.pos += len;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8, WireError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, WireError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, WireError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, WireError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn digest(&mut self) -> Result<Digest, WireError> {
        Ok(Digest::from_slice(self.take(DIGEST_LEN)?).unwrap())
    }

    fn marker(&mut self, what: &'static str) -> Result<bool, WireError> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            value => Err(WireError::BadDiscriminant { what, value }),
        }
    }

    fn finish(&self) -> Result<(), WireError> {
        if self.remaining() == 0 {
            Ok(())
        } else {
            Err(WireError::TrailingBytes)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::{assemble_certificate, sign_share, KeyRegistry};
    use crate::types::{body_for, make_final_vote, make_first_vote, make_notar_vote, ProtocolParams};
    use proptest::prelude::*;

    fn params() -> ProtocolParams {
        ProtocolParams {
            n: 4,
            f: 1,
            p: 0,
            instance: 5,
        }
    }

    fn arb_digest() -> impl Strategy<Value = Digest> {
        any::<[u8; 32]>().prop_map(Digest)
    }

    fn arb_block() -> impl Strategy<Value = Block> {
        (
            1u64..1000,
            proptest::option::of((any::<u64>(), arb_digest())),
            proptest::option::of(arb_digest()),
        )
            .prop_map(|(slot, tag, parent)| Block {
                slot,
                tag: tag.map(|(payload_len, root)| Tag { payload_len, root }),
                parent,
            })
    }

    fn arb_fragment() -> impl Strategy<Value = CertifiedFragment> {
        (
            1u16..8,
            proptest::collection::vec(any::<u8>(), 0..64),
            proptest::collection::vec(arb_digest(), 0..4),
        )
            .prop_map(|(index, data, path)| CertifiedFragment { index, data, path })
    }

    fn arb_message() -> impl Strategy<Value = Message> {
        let p = params();
        let registry = std::sync::Arc::new(KeyRegistry::from_seed(9, p.n));
        let reg = registry.clone();
        let vote = (arb_block(), 1u16..=4, proptest::option::of(arb_fragment()), 0u8..3).prop_map(
            move |(block, signer, fragment, which)| {
                let key = reg.secret_key(signer);
                match which {
                    0 => Message::Vote(Vote::Notar(make_notar_vote(&key, &p, signer, block, fragment))),
                    1 => Message::Vote(Vote::First(make_first_vote(&key, &p, signer, block, fragment))),
                    _ => Message::Vote(Vote::Final(make_final_vote(&key, &p, signer, block))),
                }
            },
        );
        let reg2 = registry.clone();
        let cert = (arb_block(), 2u16..=4).prop_map(move |(block, count)| {
            let body = body_for(p.instance, &block);
            let shares: Vec<_> = (1..=count)
                .map(|id| sign_share(&reg2.secret_key(id), id, SignKind::Notar, body))
                .collect();
            Message::Certificate(CertificateObject {
                kind: CertKind::Notar,
                block,
                cert: assemble_certificate(&shares, count).unwrap(),
            })
        });
        let proposal = (arb_block(), arb_fragment())
            .prop_map(|(block, fragment)| Message::Proposal(BlockProposal { block, fragment }));
        prop_oneof![vote, cert, proposal]
    }

    proptest! {
        // Every object decodes back to an equal object.
        #[test]
        fn roundtrip(msg in arb_message()) {
            let bytes = encode_message(&msg);
            let back = decode_message(&bytes).unwrap();
            prop_assert_eq!(back, msg);
        }

        // No prefix of a valid encoding parses, and trailing garbage fails.
        #[test]
        fn strictness(msg in arb_message(), extra in 1u8..255) {
            let bytes = encode_message(&msg);
            prop_assert!(decode_message(&bytes[..bytes.len() - 1]).is_err());
            let mut longer = bytes;
            longer.push(extra);
            prop_assert!(decode_message(&longer).is_err());
        }
    }

    #[test]
    fn garbage_rejected() {
        assert!(decode_message(&[]).is_err());
        assert!(decode_message(&[0]).is_err());
        assert!(decode_message(&[9, 1, 2, 3]).is_err());
        assert!(decode_message(&[2, 7]).is_err());
    }

    #[test]
    fn timeout_body_padding_must_be_zero() {
        let p = params();
        let registry = KeyRegistry::from_seed(9, p.n);
        let timeout = Block::timeout(3);
        let vote = make_notar_vote(&registry.secret_key(1), &p, 1, timeout, None);
        let mut bytes = encode_message(&Message::Vote(Vote::Notar(vote)));
        // Flip one byte inside the zeroed digest area of the timeout body.
        let pos = bytes.len() - 40;
        bytes[pos] ^= 0xFF;
        assert!(decode_message(&bytes).is_err());
    }
}
