//! Tagged 64-bit pointer values.
//!
//! A pointer word carries a table index in its top `T` bits and an address
//! in the remaining `64 - T` bits. Tag 0 is reserved for untagged
//! (unprotected) pointers, so any word whose value fits in the address bits
//! is an ordinary address.

use std::fmt;

/// Largest supported tag width. 17 tag bits leave 47 address bits, the
/// user-space pointer width on x86-64; 16 leaves 48, matching ARM64.
pub const MAX_TAG_BITS: u32 = 17;

/// Bit-layout configuration: how many of the top pointer bits hold the tag.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TagConfig {
    tag_bits: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TagError {
    /// Requested tag width outside `1..=MAX_TAG_BITS`.
    BadTagBits(u32),
    /// Address has nonzero bits in the tag field.
    AddressOutOfRange(u64),
    /// Tag does not fit in the configured tag field.
    TagOutOfRange(u64),
}

impl fmt::Display for TagError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TagError::BadTagBits(n) => {
                write!(f, "tag width {n} outside 1..={MAX_TAG_BITS}")
            }
            TagError::AddressOutOfRange(a) => {
                write!(f, "address {a:#x} has bits in the tag field")
            }
            TagError::TagOutOfRange(t) => write!(f, "tag {t:#x} does not fit the tag field"),
        }
    }
}

impl std::error::Error for TagError {}

impl TagConfig {
    pub fn new(tag_bits: u32) -> Result<Self, TagError> {
        if tag_bits == 0 || tag_bits > MAX_TAG_BITS {
            return Err(TagError::BadTagBits(tag_bits));
        }
        Ok(TagConfig { tag_bits })
    }

    pub fn tag_bits(&self) -> u32 {
        self.tag_bits
    }

    pub fn address_bits(&self) -> u32 {
        64 - self.tag_bits
    }

    /// Mask covering the address field (low `64 - T` bits).
    pub fn address_mask(&self) -> u64 {
        u64::MAX >> self.tag_bits
    }

    /// Mask covering the tag field (top `T` bits).
    pub fn tag_mask(&self) -> u64 {
        !self.address_mask()
    }

    /// Highest usable tag value, `2^T - 1`.
    pub fn max_tag(&self) -> u64 {
        (1u64 << self.tag_bits) - 1
    }

    /// Number of rows a metadata table indexed by the tag field has, `2^T`.
    pub fn table_entries(&self) -> usize {
        1usize << self.tag_bits
    }

    /// Splits a pointer word into `(tag, address)`.
    pub fn split(&self, p: TaggedPointer) -> (u64, u64) {
        (p.raw() >> self.address_bits(), p.raw() & self.address_mask())
    }

    pub fn tag(&self, p: TaggedPointer) -> u64 {
        p.raw() >> self.address_bits()
    }

    /// Removes the tag bits, leaving the plain address.
    pub fn strip(&self, p: TaggedPointer) -> u64 {
        p.raw() & self.address_mask()
    }

    /// Builds a pointer word from a canonical address and a tag.
    ///
    /// Rejects addresses with bits in the tag field (outside the simulated
    /// canonical range) and tags wider than the tag field.
    pub fn apply_tag(&self, address: u64, tag: u64) -> Result<TaggedPointer, TagError> {
        if address & self.tag_mask() != 0 {
            return Err(TagError::AddressOutOfRange(address));
        }
        if tag > self.max_tag() {
            return Err(TagError::TagOutOfRange(tag));
        }
        Ok(TaggedPointer::from_raw((tag << self.address_bits()) | address))
    }

    /// Overwrites the tag field of an arbitrary word. Total: never fails,
    /// used where a saved tag is mechanically reapplied to a returned value.
    pub fn retag(&self, value: u64, tag: u64) -> TaggedPointer {
        let tag = tag & self.max_tag();
        TaggedPointer::from_raw((tag << self.address_bits()) | (value & self.address_mask()))
    }
}

impl Default for TagConfig {
    fn default() -> Self {
        TagConfig { tag_bits: MAX_TAG_BITS }
    }
}

/// A simulated 64-bit machine pointer word. The tag lives in the top bits;
/// interpretation requires a [`TagConfig`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct TaggedPointer(u64);

impl TaggedPointer {
    pub const NULL: TaggedPointer = TaggedPointer(0);

    pub fn from_raw(raw: u64) -> Self {
        TaggedPointer(raw)
    }

    pub fn raw(self) -> u64 {
        self.0
    }

    pub fn is_null(self) -> bool {
        self.0 == 0
    }

    /// Pointer arithmetic on the full word with 64-bit wraparound. No
    /// masking: an offset large enough to carry into the tag bits corrupts
    /// the tag, and the corruption is caught by a later check, not here.
    pub fn ptr_add(self, offset: i64) -> TaggedPointer {
        TaggedPointer(self.0.wrapping_add(offset as u64))
    }
}

impl fmt::Display for TaggedPointer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#018x}", self.0)
    }
}
