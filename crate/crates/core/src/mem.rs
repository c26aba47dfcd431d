//! Simulated 64-bit address space.
//!
//! Four disjoint byte-addressable regions back all program data. The safe
//! heap sits at the lowest addresses so that "is this address protected"
//! reduces to a single compare against its upper bound; globals, the normal
//! heap, and the stack follow at fixed higher bases. Every base stays below
//! 2^47, so region addresses always carry tag 0.

use std::collections::HashMap;
use std::fmt;

use crate::fault::Fault;

const PAGE: u64 = 4096;

/// Default layout constants. Only the safe-heap size is configurable.
pub const SAFE_HEAP_BASE: u64 = 0x1000;
pub const DEFAULT_SAFE_HEAP_SIZE: u64 = 16 * 1024 * 1024;
pub const GLOBALS_BASE: u64 = 0x1_0000_0000;
pub const GLOBALS_SIZE: u64 = 64 * 1024 * 1024;
pub const NORMAL_HEAP_BASE: u64 = 0x0100_0000_0000;
pub const NORMAL_HEAP_SIZE: u64 = 1024 * 1024 * 1024;
pub const STACK_TOP: u64 = 0x7FFF_FFFF_F000;
pub const STACK_SIZE: u64 = 16 * 1024 * 1024;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum RegionKind {
    SafeHeap,
    Globals,
    NormalHeap,
    Stack,
}

impl fmt::Display for RegionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            RegionKind::SafeHeap => "safe-heap",
            RegionKind::Globals => "globals",
            RegionKind::NormalHeap => "normal-heap",
            RegionKind::Stack => "stack",
        };
        f.write_str(s)
    }
}

/// Region placement for one simulated process.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MemLayout {
    pub safe_heap_size: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayoutError {
    pub safe_heap_size: u64,
}

impl fmt::Display for LayoutError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "safe heap size {:#x} does not fit below the globals base {GLOBALS_BASE:#x}",
            self.safe_heap_size
        )
    }
}

impl std::error::Error for LayoutError {}

impl MemLayout {
    pub fn new(safe_heap_size: u64) -> Result<Self, LayoutError> {
        if safe_heap_size == 0 || SAFE_HEAP_BASE + safe_heap_size > GLOBALS_BASE {
            return Err(LayoutError { safe_heap_size });
        }
        Ok(MemLayout { safe_heap_size })
    }

    pub fn region_base(&self, kind: RegionKind) -> u64 {
        match kind {
            RegionKind::SafeHeap => SAFE_HEAP_BASE,
            RegionKind::Globals => GLOBALS_BASE,
            RegionKind::NormalHeap => NORMAL_HEAP_BASE,
            RegionKind::Stack => STACK_TOP - STACK_SIZE,
        }
    }

    pub fn region_size(&self, kind: RegionKind) -> u64 {
        match kind {
            RegionKind::SafeHeap => self.safe_heap_size,
            RegionKind::Globals => GLOBALS_SIZE,
            RegionKind::NormalHeap => NORMAL_HEAP_SIZE,
            RegionKind::Stack => STACK_SIZE,
        }
    }

    /// One past the last safe-heap byte.
    pub fn safe_heap_upper(&self) -> u64 {
        SAFE_HEAP_BASE + self.safe_heap_size
    }

    pub fn stack_top(&self) -> u64 {
        STACK_TOP
    }
}

impl Default for MemLayout {
    fn default() -> Self {
        MemLayout { safe_heap_size: DEFAULT_SAFE_HEAP_SIZE }
    }
}

/// Sparse page-backed byte store for one region. Unwritten bytes read as 0.
#[derive(Default)]
struct Backing {
    pages: HashMap<u64, Box<[u8; PAGE as usize]>>,
}

impl Backing {
    fn read(&self, offset: u64, out: &mut [u8]) {
        let mut off = offset;
        let mut done = 0usize;
        while done < out.len() {
            let page = off / PAGE;
            let in_page = (off % PAGE) as usize;
            let n = ((PAGE as usize) - in_page).min(out.len() - done);
            match self.pages.get(&page) {
                Some(bytes) => out[done..done + n].copy_from_slice(&bytes[in_page..in_page + n]),
                None => out[done..done + n].fill(0),
            }
            off += n as u64;
            done += n;
        }
    }

    fn write(&mut self, offset: u64, data: &[u8]) {
        let mut off = offset;
        let mut done = 0usize;
        while done < data.len() {
            let page = off / PAGE;
            let in_page = (off % PAGE) as usize;
            let n = ((PAGE as usize) - in_page).min(data.len() - done);
            let bytes = self
                .pages
                .entry(page)
                .or_insert_with(|| Box::new([0u8; PAGE as usize]));
            bytes[in_page..in_page + n].copy_from_slice(&data[done..done + n]);
            off += n as u64;
            done += n;
        }
    }
}

const REGION_ORDER: [RegionKind; 4] = [
    RegionKind::SafeHeap,
    RegionKind::Globals,
    RegionKind::NormalHeap,
    RegionKind::Stack,
];

/// The simulated address space: layout plus per-region backing stores.
pub struct AddressSpace {
    layout: MemLayout,
    backings: [Backing; 4],
}

impl AddressSpace {
    pub fn new(layout: MemLayout) -> Self {
        AddressSpace {
            layout,
            backings: [
                Backing::default(),
                Backing::default(),
                Backing::default(),
                Backing::default(),
            ],
        }
    }

    pub fn layout(&self) -> &MemLayout {
        &self.layout
    }

    /// Maps `[addr, addr+len)` to a region, or faults if it is not fully
    /// inside exactly one region. Zero-length ranges never fault.
    fn translate(&self, addr: u64, len: u64) -> Result<(usize, u64), Fault> {
        if len == 0 {
            return Ok((0, 0));
        }
        for (i, kind) in REGION_ORDER.iter().enumerate() {
            let base = self.layout.region_base(*kind);
            let size = self.layout.region_size(*kind);
            if addr >= base && addr - base < size {
                if size - (addr - base) < len {
                    // Starts inside the region but runs off its end.
                    return Err(Fault::Unmapped { addr, len });
                }
                return Ok((i, addr - base));
            }
        }
        Err(Fault::Unmapped { addr, len })
    }

    pub fn is_mapped(&self, addr: u64, len: u64) -> bool {
        self.translate(addr, len).is_ok()
    }

    /// True iff the address lies at or below the safe heap's upper bound.
    /// This is the optimized one-comparison form: addresses below the safe
    /// heap base, including 0, also answer true.
    pub fn in_safe_heap(&self, addr: u64) -> bool {
        addr <= self.layout.safe_heap_upper()
    }

    pub fn read_bytes(&self, addr: u64, len: u64) -> Result<Vec<u8>, Fault> {
        let (region, offset) = self.translate(addr, len)?;
        let mut out = vec![0u8; len as usize];
        if len > 0 {
            self.backings[region].read(offset, &mut out);
        }
        Ok(out)
    }

    pub fn write_bytes(&mut self, addr: u64, data: &[u8]) -> Result<(), Fault> {
        let (region, offset) = self.translate(addr, data.len() as u64)?;
        if !data.is_empty() {
            self.backings[region].write(offset, data);
        }
        Ok(())
    }

    /// Little-endian load of `width` bytes, zero-extended to 64 bits.
    pub fn read_word(&self, addr: u64, width: u64) -> Result<u64, Fault> {
        debug_assert!(matches!(width, 1 | 2 | 4 | 8));
        let bytes = self.read_bytes(addr, width)?;
        let mut buf = [0u8; 8];
        buf[..bytes.len()].copy_from_slice(&bytes);
        Ok(u64::from_le_bytes(buf))
    }

    /// Little-endian store of the low `width` bytes of `value`.
    pub fn write_word(&mut self, addr: u64, width: u64, value: u64) -> Result<(), Fault> {
        debug_assert!(matches!(width, 1 | 2 | 4 | 8));
        let bytes = value.to_le_bytes();
        self.write_bytes(addr, &bytes[..width as usize])
    }

    pub fn fill(&mut self, addr: u64, len: u64, byte: u8) -> Result<(), Fault> {
        let (region, offset) = self.translate(addr, len)?;
        if len > 0 {
            // Page-sized strides keep large fills cheap.
            let chunk = vec![byte; PAGE as usize];
            let mut done = 0u64;
            while done < len {
                let n = (len - done).min(PAGE);
                self.backings[region].write(offset + done, &chunk[..n as usize]);
                done += n;
            }
        }
        Ok(())
    }

    /// Copies `len` bytes between possibly different regions.
    pub fn copy(&mut self, dst: u64, src: u64, len: u64) -> Result<(), Fault> {
        let data = self.read_bytes(src, len)?;
        self.write_bytes(dst, &data)
    }
}
