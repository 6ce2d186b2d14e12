// SPDX-License-Identifier: Apache-2.0

//! Canonical byte layout used for traces, digests and golden files.
//!
//! ```text
//! frame  := version:1 body
//! body   := DA:6 SA:6 ntags:1 (kind:1 tci:2)* encap:1 [itag:4 body] plen:2 payload
//! itag   := pcp:3 dei:1 reserved:4 | isid:24
//! kind   := 0x01 C | 0x02 S | 0x03 B
//! ```
//!
//! Multi-byte fields are big-endian. The inner frame of a PBB stack is a
//! nested `body` without its own version byte.

use super::{Encapsulated, Frame, FrameError, ITag, Isid, MacAddress, TagKind, VlanTag};

pub const FORMAT_VERSION: u8 = 1;

const KIND_C: u8 = 0x01;
const KIND_S: u8 = 0x02;
const KIND_B: u8 = 0x03;

fn kind_code(kind: TagKind) -> u8 {
    match kind {
        TagKind::C => KIND_C,
        TagKind::S => KIND_S,
        TagKind::B => KIND_B,
    }
}

/// Serializes a frame. The frame must satisfy [`Frame::validate`].
pub fn encode(frame: &Frame) -> Vec<u8> {
    let mut out = Vec::with_capacity(encoded_len(frame));
    out.push(FORMAT_VERSION);
    encode_body(frame, &mut out);
    out
}

pub fn encoded_len(frame: &Frame) -> usize {
    1 + body_len(frame)
}

fn body_len(frame: &Frame) -> usize {
    let encap = frame.encapsulated.as_ref().map_or(0, |e| 4 + body_len(&e.inner));
    12 + 1 + 3 * frame.tags.len() + 1 + encap + 2 + frame.payload.len()
}

fn encode_body(frame: &Frame, out: &mut Vec<u8>) {
    out.extend_from_slice(&frame.dst.octets());
    out.extend_from_slice(&frame.src.octets());
    out.push(frame.tags.len() as u8);
    for tag in &frame.tags {
        out.push(kind_code(tag.kind));
        out.extend_from_slice(&tag.tci().to_be_bytes());
    }
    match &frame.encapsulated {
        Some(e) => {
            out.push(1);
            let head = ((e.itag.pcp & 0x7) << 5) | (u8::from(e.itag.dei) << 4);
            let isid = e.itag.isid.value().to_be_bytes();
            out.extend_from_slice(&[head, isid[1], isid[2], isid[3]]);
            encode_body(&e.inner, out);
        }
        None => out.push(0),
    }
    let len = u16::try_from(frame.payload.len()).expect("payload length validated");
    out.extend_from_slice(&len.to_be_bytes());
    out.extend_from_slice(&frame.payload);
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], FrameError> {
        if self.buf.len() - self.pos < n {
            return Err(FrameError::MalformedEncoding(format!(
                "truncated in {what} at offset {}",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8, FrameError> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16, FrameError> {
        let b = self.take(2, what)?;
        Ok(u16::from_be_bytes([b[0], b[1]]))
    }

    fn mac(&mut self, what: &str) -> Result<MacAddress, FrameError> {
        let b = self.take(6, what)?;
        Ok(MacAddress::from_octets([b[0], b[1], b[2], b[3], b[4], b[5]]))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Frame, FrameError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let version = r.u8("version")?;
    if version != FORMAT_VERSION {
        return Err(FrameError::MalformedEncoding(format!("unsupported version {version}")));
    }
    let frame = decode_body(&mut r, 0)?;
    if r.pos != bytes.len() {
        return Err(FrameError::MalformedEncoding(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    frame
        .validate()
        .map_err(|e| FrameError::MalformedEncoding(e.to_string()))?;
    Ok(frame)
}

fn decode_body(r: &mut Reader<'_>, depth: usize) -> Result<Frame, FrameError> {
    let dst = r.mac("destination address")?;
    let src = r.mac("source address")?;
    let ntags = r.u8("tag count")?;
    let mut tags = Vec::with_capacity(usize::from(ntags));
    for _ in 0..ntags {
        let kind = match r.u8("tag kind")? {
            KIND_C => TagKind::C,
            KIND_S => TagKind::S,
            KIND_B => TagKind::B,
            other => {
                return Err(FrameError::MalformedEncoding(format!(
                    "unknown tag marker {other:#04x}"
                )))
            }
        };
        tags.push(VlanTag::from_tci(kind, r.u16("tag control")?));
    }
    let encapsulated = match r.u8("encapsulation flag")? {
        0 => None,
        1 => {
            if depth > 0 {
                return Err(FrameError::MalformedEncoding("nested PBB encapsulation".into()));
            }
            let b = r.take(4, "i-tag")?;
            if b[0] & 0x0f != 0 {
                return Err(FrameError::MalformedEncoding("reserved i-tag bits set".into()));
            }
            let isid = u32::from_be_bytes([0, b[1], b[2], b[3]]);
            let itag = ITag {
                pcp: b[0] >> 5,
                dei: (b[0] >> 4) & 1 == 1,
                isid: Isid::new(isid).expect("24-bit by construction"),
            };
            let inner = decode_body(r, depth + 1)?;
            Some(Box::new(Encapsulated { itag, inner }))
        }
        other => {
            return Err(FrameError::MalformedEncoding(format!(
                "invalid encapsulation flag {other}"
            )))
        }
    };
    let plen = r.u16("payload length")?;
    let payload = r.take(usize::from(plen), "payload")?.to_vec();
    Ok(Frame {
        dst,
        src,
        tags,
        encapsulated,
        payload,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frames::Vid;
    use proptest::prelude::*;

    fn sample() -> Frame {
        Frame::new(MacAddress::new(0xaa), MacAddress::new(0xbb), vec![9, 8, 7])
            .push_tag(VlanTag::c(10).with_pcp(5))
            .unwrap()
            .push_tag(VlanTag::s(100))
            .unwrap()
    }

    #[test]
    fn documented_layout() {
        let f = Frame::new(MacAddress::new(1), MacAddress::new(2), vec![0xee])
            .push_tag(VlanTag::c(10).with_pcp(5))
            .unwrap();
        let bytes = encode(&f);
        assert_eq!(
            bytes,
            vec![
                1, // version
                0, 0, 0, 0, 0, 1, // DA
                0, 0, 0, 0, 0, 2, // SA
                1, // tag count
                KIND_C, 0xa0, 0x0a, // C tag, pcp 5, vid 10
                0,    // no encapsulation
                0, 1, 0xee, // payload
            ]
        );
        assert_eq!(encoded_len(&f), bytes.len());
    }

    #[test]
    fn pbb_layout_carries_isid() {
        let f = sample()
            .encapsulate_pbb(
                MacAddress::new(3),
                MacAddress::new(4),
                VlanTag::b(200),
                ITag::new(Isid::new(0x123456).unwrap()),
            )
            .unwrap();
        let bytes = encode(&f);
        // version + DA + SA + count + one tag + flag
        let itag = &bytes[1 + 12 + 1 + 3 + 1..][..4];
        assert_eq!(itag, &[0x00, 0x12, 0x34, 0x56]);
        assert_eq!(decode(&bytes).unwrap(), f);
        assert_eq!(encoded_len(&f), bytes.len());
    }

    #[test]
    fn truncation_is_malformed() {
        let bytes = encode(&sample());
        // cut inside the second tag
        let cut = 1 + 12 + 1 + 3 + 1;
        assert!(matches!(decode(&bytes[..cut]), Err(FrameError::MalformedEncoding(_))));
        for n in 0..bytes.len() {
            assert!(decode(&bytes[..n]).is_err(), "prefix {n} decoded");
        }
    }

    #[test]
    fn unknown_marker_and_trailing_bytes() {
        let mut bytes = encode(&sample());
        bytes[14] = 0x7f;
        assert!(matches!(decode(&bytes), Err(FrameError::MalformedEncoding(_))));
        let mut bytes = encode(&sample());
        bytes.push(0);
        assert!(decode(&bytes).is_err());
        let mut bytes = encode(&sample());
        bytes[0] = 9;
        assert!(decode(&bytes).is_err());
    }

    #[test]
    fn invariant_violation_is_malformed() {
        let mut f = sample();
        f.tags.reverse(); // C outside S
        let bytes = {
            let mut out = vec![FORMAT_VERSION];
            encode_body(&f, &mut out);
            out
        };
        assert!(matches!(decode(&bytes), Err(FrameError::MalformedEncoding(_))));
    }

    fn arb_mac() -> impl Strategy<Value = MacAddress> {
        any::<u64>().prop_map(MacAddress::new)
    }

    fn arb_tag(kind: TagKind) -> impl Strategy<Value = VlanTag> {
        (0u8..8, any::<bool>(), 0u16..=4095).prop_map(move |(pcp, dei, vid)| VlanTag {
            kind,
            pcp,
            dei,
            vid: Vid::new(vid).unwrap(),
        })
    }

    fn arb_plain() -> impl Strategy<Value = Frame> {
        (
            arb_mac(),
            arb_mac(),
            proptest::option::of(arb_tag(TagKind::S)),
            proptest::option::of(arb_tag(TagKind::C)),
            proptest::collection::vec(any::<u8>(), 0..64),
        )
            .prop_map(|(dst, src, s, c, payload)| Frame {
                dst,
                src,
                tags: s.into_iter().chain(c).collect(),
                encapsulated: None,
                payload,
            })
    }

    fn arb_frame() -> impl Strategy<Value = Frame> {
        (
            arb_plain(),
            proptest::option::of((
                arb_mac(),
                arb_mac(),
                arb_tag(TagKind::B),
                0u8..8,
                any::<bool>(),
                0u32..(1 << 24),
            )),
        )
            .prop_map(|(inner, outer)| match outer {
                None => inner,
                Some((bdst, bsrc, btag, pcp, dei, isid)) => inner
                    .encapsulate_pbb(
                        bdst,
                        bsrc,
                        btag,
                        ITag {
                            pcp,
                            dei,
                            isid: Isid::new(isid).unwrap(),
                        },
                    )
                    .unwrap(),
            })
    }

    proptest! {
        #[test]
        fn round_trip(f in arb_frame()) {
            prop_assert!(f.validate().is_ok());
            let bytes = encode(&f);
            prop_assert_eq!(bytes.len(), encoded_len(&f));
            prop_assert_eq!(decode(&bytes).unwrap(), f);
        }

        #[test]
        fn push_pop_inverse(f in arb_plain(), vid in 1u16..4095) {
            let tag = match f.tags.first().map(|t| t.kind) {
                Some(TagKind::S) => return Ok(()),
                Some(TagKind::C) => VlanTag::s(vid),
                _ => VlanTag::c(vid),
            };
            let pushed = f.clone().push_tag(tag).unwrap();
            let (back, popped) = pushed.clone().pop_tag().unwrap();
            prop_assert_eq!(&back, &f);
            prop_assert_eq!(popped, tag);
            prop_assert_eq!(back.push_tag(popped).unwrap(), pushed);
        }

        #[test]
        fn encapsulation_preserves_inner_bytes(f in arb_plain(), isid in 0u32..(1 << 24)) {
            let outer = f.clone().encapsulate_pbb(
                MacAddress::new(1), MacAddress::new(2), VlanTag::b(7),
                ITag::new(Isid::new(isid).unwrap())).unwrap();
            let back = outer.decapsulate_pbb().unwrap().inner;
            prop_assert_eq!(encode(&back), encode(&f));
        }

        #[test]
        fn self_translation_is_identity(f in arb_plain()) {
            if let Some(v) = f.outer_vid() {
                let table = [(v, v)].into();
                prop_assert_eq!(f.clone().translate_vid(&table).unwrap(), f);
            }
        }
    }
}
