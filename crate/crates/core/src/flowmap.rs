// SPDX-License-Identifier: Apache-2.0

//! Edge flow classification.
//!
//! Edge ports match customer frames against priority-ordered rules and map
//! each flow onto an I-SID, a B-VID or a hashed B-VID. Core bridges then only
//! ever look at the backbone header.

use serde::{Deserialize, Serialize};

use crate::frames::{Frame, Isid, MacAddress, Vid};

/// Byte offset of the 16-bit payload-type field (stand-in for an EtherType).
pub const PAYLOAD_TYPE_OFFSET: usize = 0;
/// Byte offset of the 16-bit upper-layer selector (stand-in for a TCP port).
pub const SELECTOR_OFFSET: usize = 2;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum FlowError {
    #[error("duplicate rule priority {0}")]
    DuplicatePriority(u32),
    #[error("rule with priority {0} matches on no field")]
    EmptyKey(u32),
    #[error("flow hash range is empty")]
    EmptyHashRange,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowKey {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dst: Option<MacAddress>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub src: Option<MacAddress>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub outer_vid: Option<Vid>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inner_vid: Option<Vid>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub payload_type: Option<u16>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub selector: Option<u16>,
}

fn payload_u16(frame: &Frame, offset: usize) -> Option<u16> {
    frame
        .payload
        .get(offset..offset + 2)
        .map(|b| u16::from_be_bytes([b[0], b[1]]))
}

impl FlowKey {
    /// Every field of `frame` that a rule can match on.
    pub fn of(frame: &Frame) -> FlowKey {
        FlowKey {
            dst: Some(frame.dst),
            src: Some(frame.src),
            outer_vid: frame.tags.first().map(|t| t.vid),
            inner_vid: frame.tags.get(1).map(|t| t.vid),
            payload_type: payload_u16(frame, PAYLOAD_TYPE_OFFSET),
            selector: payload_u16(frame, SELECTOR_OFFSET),
        }
    }

    pub fn is_empty(&self) -> bool {
        *self == FlowKey::default()
    }

    /// A rule key matches when every field it sets equals the frame's.
    pub fn matches(&self, frame: &Frame) -> bool {
        fn field<T: PartialEq>(want: &Option<T>, have: Option<T>) -> bool {
            want.as_ref().is_none_or(|w| have.as_ref() == Some(w))
        }
        let k = FlowKey::of(frame);
        field(&self.dst, k.dst)
            && field(&self.src, k.src)
            && field(&self.outer_vid, k.outer_vid)
            && field(&self.inner_vid, k.inner_vid)
            && field(&self.payload_type, k.payload_type)
            && field(&self.selector, k.selector)
    }

    fn serialize_into(&self, out: &mut Vec<u8>) {
        fn opt(out: &mut Vec<u8>, v: Option<&[u8]>) {
            match v {
                Some(b) => {
                    out.push(1);
                    out.extend_from_slice(b);
                }
                None => out.push(0),
            }
        }
        opt(out, self.dst.map(|m| m.octets()).as_ref().map(|b| &b[..]));
        opt(out, self.src.map(|m| m.octets()).as_ref().map(|b| &b[..]));
        opt(
            out,
            self.outer_vid.map(|v| v.value().to_be_bytes()).as_ref().map(|b| &b[..]),
        );
        opt(
            out,
            self.inner_vid.map(|v| v.value().to_be_bytes()).as_ref().map(|b| &b[..]),
        );
        opt(out, self.payload_type.map(u16::to_be_bytes).as_ref().map(|b| &b[..]));
        opt(out, self.selector.map(u16::to_be_bytes).as_ref().map(|b| &b[..]));
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum FlowAction {
    MapToIsid { isid: Isid, bvid: Vid },
    MapToBvid { bvid: Vid },
    MapToFlowHash,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlowRule {
    pub priority: u32,
    #[serde(rename = "match")]
    pub key: FlowKey,
    pub action: FlowAction,
}

/// Rule set of one edge port, kept sorted by descending priority.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FlowTable {
    rules: Vec<FlowRule>,
    hash_range: Vec<Vid>,
}

impl FlowTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, rule: FlowRule) -> Result<(), FlowError> {
        if rule.key.is_empty() {
            return Err(FlowError::EmptyKey(rule.priority));
        }
        match self.rules.binary_search_by(|r| rule.priority.cmp(&r.priority)) {
            Ok(_) => Err(FlowError::DuplicatePriority(rule.priority)),
            Err(pos) => {
                self.rules.insert(pos, rule);
                Ok(())
            }
        }
    }

    pub fn set_hash_range(&mut self, range: Vec<Vid>) {
        self.hash_range = range;
    }

    pub fn hash_range(&self) -> &[Vid] {
        &self.hash_range
    }

    pub fn rules(&self) -> &[FlowRule] {
        &self.rules
    }

    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }

    /// Highest-priority rule whose key matches, or `None` (fall through to
    /// the port's default service).
    pub fn classify(&self, frame: &Frame) -> Option<&FlowRule> {
        self.rules.iter().find(|r| r.key.matches(frame))
    }
}

/// Deterministic flow hash onto one VID of `range`: FNV-1a (a multiplicative
/// byte hash) over the serialized flow key, folded to 32 bits.
pub fn flow_hash(frame: &Frame, range: &[Vid]) -> Result<Vid, FlowError> {
    if range.is_empty() {
        return Err(FlowError::EmptyHashRange);
    }
    let mut bytes = Vec::with_capacity(32);
    FlowKey::of(frame).serialize_into(&mut bytes);
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    let folded = (h ^ (h >> 32)) as u32;
    Ok(range[folded as usize % range.len()])
}
