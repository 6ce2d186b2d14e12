// SPDX-License-Identifier: Apache-2.0

//! Ethernet frame model and header-stack operations.
//!
//! A [`Frame`] is an outer MAC header, an ordered list of VLAN tags
//! (outermost first), and either a payload or a PBB I-tag wrapping a complete
//! inner frame. The supported stacks are:
//!
//! ```text
//! untagged     DA SA                     payload
//! C-tagged     DA SA C                   payload
//! Q-in-Q       DA SA S C                 payload
//! MAC-in-MAC   B-DA B-SA B I [DA SA S C  payload]
//! ```
//!
//! Only one backbone layer is allowed, so the whole stack carries at most
//! 12 + 12 + 12 + 24 = 60 bits of virtual network identifier.

mod codec;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use codec::{decode, encode, encoded_len, FORMAT_VERSION};

/// Width in bits of a VLAN identifier.
pub const VID_BITS: u32 = 12;
/// Width in bits of a backbone service instance identifier.
pub const ISID_BITS: u32 = 24;
/// Number of distinct I-SIDs one backbone VLAN can carry.
pub const ISID_SPACE: u32 = 1 << ISID_BITS;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum FrameError {
    #[error("tag order violation: {0}")]
    OrderViolation(String),
    #[error("frame already carries a {0} tag at this level")]
    DuplicateTagKind(TagKind),
    #[error("frame carries no tag")]
    NoTagPresent,
    #[error("frame is already PBB encapsulated")]
    NestedEncapsulation,
    #[error("frame is not PBB encapsulated")]
    NotEncapsulated,
    #[error("field out of range: {0}")]
    InvalidField(String),
    #[error("malformed encoding: {0}")]
    MalformedEncoding(String),
}

/// 48-bit MAC address.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct MacAddress(u64);

impl MacAddress {
    pub const BROADCAST: MacAddress = MacAddress(0xffff_ffff_ffff);
    const MASK: u64 = 0xffff_ffff_ffff;

    /// Keeps the low 48 bits of `value`.
    pub const fn new(value: u64) -> Self {
        MacAddress(value & Self::MASK)
    }

    pub const fn from_octets(o: [u8; 6]) -> Self {
        MacAddress(
            (o[0] as u64) << 40
                | (o[1] as u64) << 32
                | (o[2] as u64) << 24
                | (o[3] as u64) << 16
                | (o[4] as u64) << 8
                | o[5] as u64,
        )
    }

    pub fn octets(self) -> [u8; 6] {
        let b = self.0.to_be_bytes();
        [b[2], b[3], b[4], b[5], b[6], b[7]]
    }

    pub const fn value(self) -> u64 {
        self.0
    }

    /// Group (multicast) bit: least significant bit of the first octet.
    pub fn is_group(self) -> bool {
        (self.0 >> 40) & 1 == 1
    }

    pub fn is_broadcast(self) -> bool {
        self == Self::BROADCAST
    }
}

impl fmt::Display for MacAddress {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let o = self.octets();
        write!(
            f,
            "{:02x}:{:02x}:{:02x}:{:02x}:{:02x}:{:02x}",
            o[0], o[1], o[2], o[3], o[4], o[5]
        )
    }
}

impl fmt::Debug for MacAddress {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

impl FromStr for MacAddress {
    type Err = FrameError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || FrameError::InvalidField(format!("mac address {s:?}"));
        let mut octets = [0u8; 6];
        let mut parts = s.split(':');
        for o in octets.iter_mut() {
            let p = parts.next().ok_or_else(bad)?;
            if p.len() != 2 {
                return Err(bad());
            }
            *o = u8::from_str_radix(p, 16).map_err(|_| bad())?;
        }
        if parts.next().is_some() {
            return Err(bad());
        }
        Ok(MacAddress::from_octets(octets))
    }
}

impl Serialize for MacAddress {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for MacAddress {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

/// 12-bit VLAN identifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct Vid(u16);

impl Vid {
    pub const MAX: u16 = 0x0fff;

    pub fn new(value: u16) -> Result<Self, FrameError> {
        if value > Self::MAX {
            return Err(FrameError::InvalidField(format!("vid {value} exceeds 12 bits")));
        }
        Ok(Vid(value))
    }

    /// A VID usable for a service VLAN: 0 and 4095 are reserved.
    pub fn service(value: u16) -> Result<Self, FrameError> {
        if value == 0 || value >= Self::MAX {
            return Err(FrameError::InvalidField(format!(
                "vid {value} outside service range 1..4094"
            )));
        }
        Ok(Vid(value))
    }

    pub const fn value(self) -> u16 {
        self.0
    }

    pub fn is_service(self) -> bool {
        self.0 != 0 && self.0 != Self::MAX
    }
}

impl fmt::Display for Vid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl<'de> Deserialize<'de> for Vid {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        Vid::service(u16::deserialize(d)?).map_err(serde::de::Error::custom)
    }
}

/// 24-bit backbone service instance identifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct Isid(u32);

impl Isid {
    pub const MAX: u32 = ISID_SPACE - 1;

    pub fn new(value: u32) -> Result<Self, FrameError> {
        if value > Self::MAX {
            return Err(FrameError::InvalidField(format!("isid {value} exceeds 24 bits")));
        }
        Ok(Isid(value))
    }

    pub const fn value(self) -> u32 {
        self.0
    }
}

impl fmt::Display for Isid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl<'de> Deserialize<'de> for Isid {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        Isid::new(u32::deserialize(d)?).map_err(serde::de::Error::custom)
    }
}

/// Backbone group address for I-SID traffic: first octet 0x03 (group and
/// locally administered bits), then a 16-bit source nickname, then the I-SID.
/// Source 0 is the shared-tree address used for explicitly programmed trees;
/// shortest-path trees use one address per source bridge.
pub fn backbone_group_mac(source: u16, isid: Isid) -> MacAddress {
    MacAddress::new(0x03 << 40 | u64::from(source) << 24 | u64::from(isid.value()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum TagKind {
    /// Backbone VLAN tag, only valid as the single tag of a PBB outer header.
    B,
    /// Service (provider) VLAN tag.
    S,
    /// Customer VLAN tag.
    C,
}

impl TagKind {
    // Outermost-first rank; tags must appear in strictly increasing rank.
    fn rank(self) -> u8 {
        match self {
            TagKind::B => 0,
            TagKind::S => 1,
            TagKind::C => 2,
        }
    }
}

impl fmt::Display for TagKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TagKind::B => f.write_str("B"),
            TagKind::S => f.write_str("S"),
            TagKind::C => f.write_str("C"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct VlanTag {
    pub kind: TagKind,
    pub pcp: u8,
    pub dei: bool,
    pub vid: Vid,
}

impl VlanTag {
    pub fn new(kind: TagKind, vid: Vid) -> Self {
        VlanTag {
            kind,
            pcp: 0,
            dei: false,
            vid,
        }
    }

    pub fn with_pcp(mut self, pcp: u8) -> Self {
        self.pcp = pcp & 0x7;
        self
    }

    pub fn c(vid: u16) -> Self {
        Self::new(TagKind::C, Vid::new(vid).expect("12-bit vid"))
    }

    pub fn s(vid: u16) -> Self {
        Self::new(TagKind::S, Vid::new(vid).expect("12-bit vid"))
    }

    pub fn b(vid: u16) -> Self {
        Self::new(TagKind::B, Vid::new(vid).expect("12-bit vid"))
    }

    /// Tag control information: PCP(3) | DEI(1) | VID(12).
    pub fn tci(&self) -> u16 {
        (u16::from(self.pcp & 0x7) << 13) | (u16::from(self.dei) << 12) | self.vid.value()
    }

    pub fn from_tci(kind: TagKind, tci: u16) -> Self {
        VlanTag {
            kind,
            pcp: (tci >> 13) as u8,
            dei: (tci >> 12) & 1 == 1,
            vid: Vid(tci & Vid::MAX),
        }
    }
}

impl fmt::Display for VlanTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.kind, self.vid)
    }
}

/// Backbone service instance tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ITag {
    pub pcp: u8,
    pub dei: bool,
    pub isid: Isid,
}

impl ITag {
    pub fn new(isid: Isid) -> Self {
        ITag {
            pcp: 0,
            dei: false,
            isid,
        }
    }
}

/// The I-tag plus the complete customer frame it carries.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Encapsulated {
    pub itag: ITag,
    pub inner: Frame,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Frame {
    pub dst: MacAddress,
    pub src: MacAddress,
    /// Outermost first.
    pub tags: Vec<VlanTag>,
    pub encapsulated: Option<Box<Encapsulated>>,
    /// Empty for an encapsulated frame; the payload lives in the inner frame.
    pub payload: Vec<u8>,
}

/// Everything a PBB decapsulation hands back.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Decapsulated {
    pub inner: Frame,
    pub bdst: MacAddress,
    pub bsrc: MacAddress,
    pub btag: VlanTag,
    pub itag: ITag,
}

impl Frame {
    pub fn new(dst: MacAddress, src: MacAddress, payload: Vec<u8>) -> Self {
        Frame {
            dst,
            src,
            tags: Vec::new(),
            encapsulated: None,
            payload,
        }
    }

    pub fn outer_tag(&self) -> Option<&VlanTag> {
        self.tags.first()
    }

    pub fn outer_vid(&self) -> Option<Vid> {
        self.tags.first().map(|t| t.vid)
    }

    pub fn is_encapsulated(&self) -> bool {
        self.encapsulated.is_some()
    }

    pub fn itag(&self) -> Option<&ITag> {
        self.encapsulated.as_ref().map(|e| &e.itag)
    }

    pub fn inner(&self) -> Option<&Frame> {
        self.encapsulated.as_ref().map(|e| &e.inner)
    }

    /// The frame carrying customer addresses and payload.
    pub fn innermost(&self) -> &Frame {
        self.inner().unwrap_or(self)
    }

    /// Checks every structural invariant of the header stack.
    pub fn validate(&self) -> Result<(), FrameError> {
        self.validate_level(0)
    }

    fn validate_level(&self, depth: usize) -> Result<(), FrameError> {
        if self.payload.len() > usize::from(u16::MAX) {
            return Err(FrameError::InvalidField(format!(
                "payload of {} bytes exceeds the 16-bit length field",
                self.payload.len()
            )));
        }
        for t in &self.tags {
            if t.pcp > 7 {
                return Err(FrameError::InvalidField(format!("pcp {} exceeds 3 bits", t.pcp)));
            }
        }
        for w in self.tags.windows(2) {
            if w[0].kind == w[1].kind {
                return Err(FrameError::DuplicateTagKind(w[0].kind));
            }
            if w[0].kind.rank() > w[1].kind.rank() {
                return Err(FrameError::OrderViolation(format!(
                    "{} tag outside {} tag",
                    w[0].kind, w[1].kind
                )));
            }
        }
        match &self.encapsulated {
            Some(encap) => {
                if depth > 0 {
                    return Err(FrameError::NestedEncapsulation);
                }
                if self.tags.len() != 1 || self.tags[0].kind != TagKind::B {
                    return Err(FrameError::OrderViolation(
                        "PBB outer header must carry exactly one B tag".into(),
                    ));
                }
                if !self.payload.is_empty() {
                    return Err(FrameError::InvalidField(
                        "encapsulated frame carries an outer payload".into(),
                    ));
                }
                if encap.itag.pcp > 7 {
                    return Err(FrameError::InvalidField("i-tag pcp exceeds 3 bits".into()));
                }
                encap.inner.validate_level(depth + 1)
            }
            None => {
                if self.tags.iter().any(|t| t.kind == TagKind::B) {
                    return Err(FrameError::OrderViolation("B tag outside a PBB outer header".into()));
                }
                Ok(())
            }
        }
    }

    /// Adds `tag` as the new outermost tag.
    pub fn push_tag(mut self, tag: VlanTag) -> Result<Frame, FrameError> {
        if self.tags.iter().any(|t| t.kind == tag.kind) {
            return Err(FrameError::DuplicateTagKind(tag.kind));
        }
        if self.is_encapsulated() {
            return Err(FrameError::OrderViolation(
                "nothing may be pushed outside a B tag".into(),
            ));
        }
        if tag.kind == TagKind::B {
            return Err(FrameError::OrderViolation(
                "B tags are added only by PBB encapsulation".into(),
            ));
        }
        if let Some(outer) = self.tags.first() {
            if tag.kind.rank() > outer.kind.rank() {
                return Err(FrameError::OrderViolation(format!(
                    "{} tag outside {} tag",
                    tag.kind, outer.kind
                )));
            }
        }
        self.tags.insert(0, tag);
        Ok(self)
    }

    /// Removes and returns the outermost tag.
    pub fn pop_tag(mut self) -> Result<(Frame, VlanTag), FrameError> {
        if self.tags.is_empty() {
            return Err(FrameError::NoTagPresent);
        }
        if self.is_encapsulated() {
            return Err(FrameError::OrderViolation(
                "the B tag of a PBB frame is removed only by decapsulation".into(),
            ));
        }
        let tag = self.tags.remove(0);
        Ok((self, tag))
    }

    /// Rewrites the outermost VID through `table`; unmapped VIDs pass unchanged.
    pub fn translate_vid(mut self, table: &BTreeMap<Vid, Vid>) -> Result<Frame, FrameError> {
        let outer = self.tags.first_mut().ok_or(FrameError::NoTagPresent)?;
        if let Some(to) = table.get(&outer.vid) {
            outer.vid = *to;
        }
        Ok(self)
    }

    /// MAC-in-MAC: wraps this frame behind a backbone header.
    pub fn encapsulate_pbb(
        self,
        bdst: MacAddress,
        bsrc: MacAddress,
        btag: VlanTag,
        itag: ITag,
    ) -> Result<Frame, FrameError> {
        if self.is_encapsulated() {
            return Err(FrameError::NestedEncapsulation);
        }
        if btag.kind != TagKind::B {
            return Err(FrameError::OrderViolation(format!(
                "backbone header needs a B tag, got {}",
                btag.kind
            )));
        }
        Ok(Frame {
            dst: bdst,
            src: bsrc,
            tags: vec![btag],
            encapsulated: Some(Box::new(Encapsulated { itag, inner: self })),
            payload: Vec::new(),
        })
    }

    pub fn decapsulate_pbb(self) -> Result<Decapsulated, FrameError> {
        let Frame {
            dst,
            src,
            mut tags,
            encapsulated,
            ..
        } = self;
        let encap = encapsulated.ok_or(FrameError::NotEncapsulated)?;
        let btag = if tags.is_empty() {
            return Err(FrameError::NoTagPresent);
        } else {
            tags.remove(0)
        };
        let Encapsulated { itag, inner } = *encap;
        Ok(Decapsulated {
            inner,
            bdst: dst,
            bsrc: src,
            btag,
            itag,
        })
    }

    /// Total width of virtual network identifiers carried across the whole
    /// header stack: 12 bits per VLAN tag at any level plus 24 per I-tag.
    pub fn virtualization_id_bits(&self) -> u32 {
        let own = self.tags.len() as u32 * VID_BITS;
        match &self.encapsulated {
            Some(e) => own + ISID_BITS + e.inner.virtualization_id_bits(),
            None => own,
        }
    }

    /// Compact header-stack summary such as `[B:100 I:1 | S:11 C:5]`.
    pub fn stack_summary(&self) -> String {
        let mut out = String::from("[");
        let tags: Vec<String> = self.tags.iter().map(ToString::to_string).collect();
        out.push_str(&tags.join(" "));
        if let Some(e) = &self.encapsulated {
            out.push_str(&format!(" I:{} | ", e.itag.isid));
            let inner: Vec<String> = e.inner.tags.iter().map(ToString::to_string).collect();
            out.push_str(&inner.join(" "));
        }
        out.push(']');
        out
    }
}
