//! The MESH runtime: a constant-size metadata table indexed by pointer tag
//! bits, allocation wrappers that claim and release table rows, and the
//! temporal/spatial safety checks.
//!
//! Each table row stores an object's `{lower_bound, upper_bound}`; validity
//! is folded into the lower bound, where the all-ones value marks the row
//! invalid. Row 0 is permanently invalid because tag 0 means "untagged".
//!
//! Thread contract: the allocation and deallocation paths serialize on one
//! global lock, so concurrent allocations always obtain distinct rows.
//! Checks read table rows lock-free; a check racing a free of the same
//! pointer is an application-level bug and gets no ordering guarantee.

use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use crate::fault::Fault;
use crate::heap::{FreeList, DEFAULT_ALIGN};
use crate::mem::{AddressSpace, MemLayout, RegionKind};
use crate::tag::{TagConfig, TaggedPointer};

pub const ALL_ONES: u64 = u64::MAX;

/// Snapshot of one metadata table row.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TableRow {
    pub lower: u64,
    pub upper: u64,
}

impl TableRow {
    pub fn is_valid(&self) -> bool {
        self.lower != ALL_ONES
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ViolationKind {
    UseAfterFree,
    BufferOverflow,
    BufferUnderflow,
    IllegalSafeHeapAccess,
    IllegalSafeHeapFree,
    DoubleFree,
    MetadataExhaustion,
}

impl ViolationKind {
    /// Identifier used in structured reports and corpus expectations.
    pub fn name(&self) -> &'static str {
        match self {
            ViolationKind::UseAfterFree => "UseAfterFree",
            ViolationKind::BufferOverflow => "BufferOverflow",
            ViolationKind::BufferUnderflow => "BufferUnderflow",
            ViolationKind::IllegalSafeHeapAccess => "IllegalSafeHeapAccess",
            ViolationKind::IllegalSafeHeapFree => "IllegalSafeHeapFree",
            ViolationKind::DoubleFree => "DoubleFree",
            ViolationKind::MetadataExhaustion => "MetadataExhaustion",
        }
    }

    pub fn from_name(name: &str) -> Option<ViolationKind> {
        Some(match name {
            "UseAfterFree" => ViolationKind::UseAfterFree,
            "BufferOverflow" => ViolationKind::BufferOverflow,
            "BufferUnderflow" => ViolationKind::BufferUnderflow,
            "IllegalSafeHeapAccess" => ViolationKind::IllegalSafeHeapAccess,
            "IllegalSafeHeapFree" => ViolationKind::IllegalSafeHeapFree,
            "DoubleFree" => ViolationKind::DoubleFree,
            "MetadataExhaustion" => ViolationKind::MetadataExhaustion,
            _ => return None,
        })
    }
}

impl fmt::Display for ViolationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let msg = match self {
            ViolationKind::UseAfterFree => "use-after-free detected",
            ViolationKind::BufferOverflow => "Buffer overflow detected",
            ViolationKind::BufferUnderflow => "Buffer underflow detected",
            ViolationKind::IllegalSafeHeapAccess => "Illegal access to safe heap detected",
            ViolationKind::IllegalSafeHeapFree => "Illegal free in safe heap detected",
            ViolationKind::DoubleFree => "double-free detected",
            ViolationKind::MetadataExhaustion => "Metadata exhaustion",
        };
        f.write_str(msg)
    }
}

/// A detected memory-safety violation, returned as a value; the library
/// never terminates the host process.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Violation {
    pub kind: ViolationKind,
    /// The faulting pointer word, tag bits included.
    pub pointer: u64,
    pub tag: u64,
    pub address: u64,
    /// Access width for checks, request size for allocations, 0 for frees.
    pub access_size: u64,
    /// The consulted table row, when one was.
    pub row: Option<TableRow>,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}: pointer={:#x} tag={:#x} address={:#x}",
            self.kind, self.pointer, self.tag, self.address
        )?;
        if self.access_size != 0 {
            write!(f, " size={}", self.access_size)?;
        }
        if let Some(row) = self.row {
            write!(f, " row=[{:#x}, {:#x})", row.lower, row.upper)?;
        }
        Ok(())
    }
}

impl std::error::Error for Violation {}

/// Either a detected violation or a simulator fault.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RuntimeError {
    Violation(Violation),
    Fault(Fault),
}

impl fmt::Display for RuntimeError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RuntimeError::Violation(v) => v.fmt(f),
            RuntimeError::Fault(e) => e.fmt(f),
        }
    }
}

impl std::error::Error for RuntimeError {}

impl From<Violation> for RuntimeError {
    fn from(v: Violation) -> Self {
        RuntimeError::Violation(v)
    }
}

impl From<Fault> for RuntimeError {
    fn from(e: Fault) -> Self {
        RuntimeError::Fault(e)
    }
}

/// Distinguishes a use-after-free from a buffer underflow once the combined
/// lower-bound comparison has failed: an all-ones lower bound means the row
/// was invalidated, anything else is a live object accessed below its start.
pub fn classify_lower_bound_violation(row: TableRow) -> ViolationKind {
    if row.lower == ALL_ONES {
        ViolationKind::UseAfterFree
    } else {
        ViolationKind::BufferUnderflow
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RuntimeStats {
    pub total_allocations: u64,
    pub peak_live_objects: u64,
    pub current_live: u64,
    pub checks_executed: u64,
    /// Constant for the lifetime of the runtime: 16 bytes per table row.
    pub table_bytes: u64,
    pub wraparound_reuses: u64,
}

struct RowCell {
    lower: AtomicU64,
    upper: AtomicU64,
}

struct MeshTable {
    rows: Box<[RowCell]>,
}

impl MeshTable {
    fn new(entries: usize) -> Self {
        let rows = (0..entries)
            .map(|_| RowCell {
                lower: AtomicU64::new(ALL_ONES),
                upper: AtomicU64::new(ALL_ONES),
            })
            .collect();
        MeshTable { rows }
    }

    fn row(&self, i: u64) -> TableRow {
        let cell = &self.rows[i as usize];
        TableRow {
            lower: cell.lower.load(Ordering::Relaxed),
            upper: cell.upper.load(Ordering::Relaxed),
        }
    }

    fn set(&self, i: u64, lower: u64, upper: u64) {
        let cell = &self.rows[i as usize];
        cell.lower.store(lower, Ordering::Relaxed);
        cell.upper.store(upper, Ordering::Relaxed);
    }

    fn invalidate(&self, i: u64) {
        self.set(i, ALL_ONES, ALL_ONES);
    }
}

struct AllocState {
    /// Next fresh table index; counts down from `2^T - 1`, 0 = exhausted.
    index: u64,
    /// Where the next wrap-around scan starts.
    wrap_cursor: u64,
    safe: FreeList,
    normal: FreeList,
    total_allocations: u64,
    current_live: u64,
    peak_live: u64,
    wraparound_reuses: u64,
}

enum RowChoice {
    Fresh(u64),
    Reused(u64),
}

pub struct Runtime {
    cfg: TagConfig,
    wrap: bool,
    safe_heap_upper: u64,
    table: MeshTable,
    state: Mutex<AllocState>,
    checks_executed: AtomicU64,
}

impl Runtime {
    pub fn new(cfg: TagConfig, wrap: bool, layout: &MemLayout) -> Runtime {
        let safe = FreeList::new(
            RegionKind::SafeHeap,
            layout.region_base(RegionKind::SafeHeap),
            layout.region_size(RegionKind::SafeHeap),
        );
        let normal = FreeList::new(
            RegionKind::NormalHeap,
            layout.region_base(RegionKind::NormalHeap),
            layout.region_size(RegionKind::NormalHeap),
        );
        Runtime {
            cfg,
            wrap,
            safe_heap_upper: layout.safe_heap_upper(),
            table: MeshTable::new(cfg.table_entries()),
            state: Mutex::new(AllocState {
                index: cfg.max_tag(),
                wrap_cursor: cfg.max_tag(),
                safe,
                normal,
                total_allocations: 0,
                current_live: 0,
                peak_live: 0,
                wraparound_reuses: 0,
            }),
            checks_executed: AtomicU64::new(0),
        }
    }

    pub fn cfg(&self) -> TagConfig {
        self.cfg
    }

    pub fn wrap_enabled(&self) -> bool {
        self.wrap
    }

    pub fn safe_heap_upper(&self) -> u64 {
        self.safe_heap_upper
    }

    /// Row snapshot, for diagnostics and tests.
    pub fn row(&self, tag: u64) -> TableRow {
        self.table.row(tag)
    }

    pub fn stats(&self) -> RuntimeStats {
        let st = self.state.lock().unwrap();
        RuntimeStats {
            total_allocations: st.total_allocations,
            peak_live_objects: st.peak_live,
            current_live: st.current_live,
            checks_executed: self.checks_executed.load(Ordering::Relaxed),
            table_bytes: 16 * self.cfg.table_entries() as u64,
            wraparound_reuses: st.wraparound_reuses,
        }
    }

    fn exhaustion(&self, size: u64) -> Violation {
        Violation {
            kind: ViolationKind::MetadataExhaustion,
            pointer: 0,
            tag: 0,
            address: 0,
            access_size: size,
            row: None,
        }
    }

    /// Cyclic downward scan for an invalid row, skipping row 0. `None`
    /// after one full unsuccessful cycle.
    fn find_free_row(&self, st: &AllocState) -> Option<u64> {
        let max = self.cfg.max_tag();
        let mut pos = st.wrap_cursor;
        for _ in 0..max {
            if !self.table.row(pos).is_valid() {
                return Some(pos);
            }
            pos = if pos == 1 { max } else { pos - 1 };
        }
        None
    }

    fn malloc_locked(
        &self,
        st: &mut AllocState,
        size: u64,
        align: u64,
    ) -> Result<TaggedPointer, Violation> {
        // Row availability is settled before touching the allocator, so
        // exhaustion never leaks a safe-heap block.
        let choice = if st.index > 0 {
            RowChoice::Fresh(st.index)
        } else if self.wrap {
            match self.find_free_row(st) {
                Some(i) => RowChoice::Reused(i),
                None => return Err(self.exhaustion(size)),
            }
        } else {
            return Err(self.exhaustion(size));
        };
        let Some(addr) = st.safe.alloc(size, align) else {
            return Ok(TaggedPointer::NULL);
        };
        let i = match choice {
            RowChoice::Fresh(i) => {
                st.index -= 1;
                i
            }
            RowChoice::Reused(i) => {
                st.wraparound_reuses += 1;
                st.wrap_cursor = if i == 1 { self.cfg.max_tag() } else { i - 1 };
                i
            }
        };
        self.table.set(i, addr, addr + size);
        st.total_allocations += 1;
        st.current_live += 1;
        st.peak_live = st.peak_live.max(st.current_live);
        Ok(self
            .cfg
            .apply_tag(addr, i)
            .expect("safe-heap addresses are canonical"))
    }

    /// Allocates a safe-heap object and claims a table row for it.
    ///
    /// `Ok(NULL)` means the safe heap itself is exhausted and the program
    /// is left to handle the failed allocation; `Err` means no table row
    /// is available.
    pub fn malloc(&self, size: u64) -> Result<TaggedPointer, Violation> {
        let mut st = self.state.lock().unwrap();
        self.malloc_locked(&mut st, size, DEFAULT_ALIGN)
    }

    /// `malloc` with caller-chosen alignment. A non-power-of-two alignment
    /// yields NULL.
    pub fn memalign(&self, align: u64, size: u64) -> Result<TaggedPointer, Violation> {
        if align == 0 || !align.is_power_of_two() {
            return Ok(TaggedPointer::NULL);
        }
        let mut st = self.state.lock().unwrap();
        self.malloc_locked(&mut st, size, align)
    }

    /// `malloc(count * size)` with the block zero-filled. NULL when the
    /// multiplication overflows.
    pub fn calloc(
        &self,
        count: u64,
        size: u64,
        mem: &mut AddressSpace,
    ) -> Result<TaggedPointer, Violation> {
        let Some(total) = count.checked_mul(size) else {
            return Ok(TaggedPointer::NULL);
        };
        let p = self.malloc(total)?;
        if !p.is_null() {
            mem.fill(self.cfg.strip(p), total, 0)
                .expect("allocated block is mapped");
        }
        Ok(p)
    }

    /// Reallocation. NULL input behaves as `malloc`; a tagged pointer moves
    /// the object to a fresh block and row, leaving the old pointer
    /// dangling; an untagged normal-heap pointer is resized in the normal
    /// heap and stays untagged. On allocation failure the original object
    /// is untouched and NULL is returned.
    pub fn realloc(
        &self,
        p: TaggedPointer,
        new_size: u64,
        mem: &mut AddressSpace,
    ) -> Result<TaggedPointer, RuntimeError> {
        if p.is_null() {
            return Ok(self.malloc(new_size)?);
        }
        let (tag, address) = self.cfg.split(p);
        if tag == 0 {
            if address <= self.safe_heap_upper {
                return Err(Violation {
                    kind: ViolationKind::IllegalSafeHeapFree,
                    pointer: p.raw(),
                    tag,
                    address,
                    access_size: 0,
                    row: None,
                }
                .into());
            }
            let mut st = self.state.lock().unwrap();
            let Some(old_size) = st.normal.block_size(address) else {
                return Err(Fault::InvalidFree { addr: address }.into());
            };
            let Some(new_addr) = st.normal.alloc(new_size, DEFAULT_ALIGN) else {
                return Ok(TaggedPointer::NULL);
            };
            drop(st);
            mem.copy(new_addr, address, old_size.min(new_size))
                .expect("heap blocks are mapped");
            let mut st = self.state.lock().unwrap();
            st.normal.free(address).expect("block checked above");
            return Ok(TaggedPointer::from_raw(new_addr));
        }

        let mut st = self.state.lock().unwrap();
        let row = self.table.row(tag);
        if !row.is_valid() {
            return Err(Violation {
                kind: ViolationKind::DoubleFree,
                pointer: p.raw(),
                tag,
                address,
                access_size: 0,
                row: Some(row),
            }
            .into());
        }
        if st.safe.block_size(address).is_none() {
            return Err(Fault::InvalidFree { addr: address }.into());
        }
        let old_size = row.upper - row.lower;
        let new_p = self.malloc_locked(&mut st, new_size, DEFAULT_ALIGN)?;
        if new_p.is_null() {
            return Ok(TaggedPointer::NULL);
        }
        drop(st);
        let new_addr = self.cfg.strip(new_p);
        mem.copy(new_addr, address, old_size.min(new_size))
            .expect("heap blocks are mapped");
        let mut st = self.state.lock().unwrap();
        self.table.invalidate(tag);
        st.safe.free(address).expect("block checked above");
        st.current_live -= 1;
        Ok(new_p)
    }

    /// Deallocation. Untagged pointers at or below the safe-heap bound are
    /// illegal to free; other untagged pointers release normal-heap blocks;
    /// tagged pointers invalidate their row and release the safe-heap block.
    pub fn free(&self, p: TaggedPointer) -> Result<(), RuntimeError> {
        let (tag, address) = self.cfg.split(p);
        if tag == 0 {
            if address <= self.safe_heap_upper {
                return Err(Violation {
                    kind: ViolationKind::IllegalSafeHeapFree,
                    pointer: p.raw(),
                    tag,
                    address,
                    access_size: 0,
                    row: None,
                }
                .into());
            }
            let mut st = self.state.lock().unwrap();
            st.normal
                .free(address)
                .map_err(|e| Fault::InvalidFree { addr: e.addr })?;
            return Ok(());
        }
        let mut st = self.state.lock().unwrap();
        let row = self.table.row(tag);
        if !row.is_valid() {
            return Err(Violation {
                kind: ViolationKind::DoubleFree,
                pointer: p.raw(),
                tag,
                address,
                access_size: 0,
                row: Some(row),
            }
            .into());
        }
        self.table.invalidate(tag);
        st.safe
            .free(address)
            .map_err(|e| Fault::InvalidFree { addr: e.addr })?;
        st.current_live -= 1;
        Ok(())
    }

    /// The combined temporal and spatial check guarding every instrumented
    /// dereference. One table-row read, at most two comparisons for tagged
    /// pointers, one comparison for untagged ones.
    pub fn safety_check(&self, p: TaggedPointer, access_size: u64) -> Result<(), Violation> {
        self.checks_executed.fetch_add(1, Ordering::Relaxed);
        let (tag, address) = self.cfg.split(p);
        if tag == 0 {
            if address <= self.safe_heap_upper {
                return Err(Violation {
                    kind: ViolationKind::IllegalSafeHeapAccess,
                    pointer: p.raw(),
                    tag,
                    address,
                    access_size,
                    row: None,
                });
            }
            return Ok(());
        }
        let row = self.table.row(tag);
        if address < row.lower {
            return Err(Violation {
                kind: classify_lower_bound_violation(row),
                pointer: p.raw(),
                tag,
                address,
                access_size,
                row: Some(row),
            });
        }
        if address.saturating_add(access_size) > row.upper {
            return Err(Violation {
                kind: ViolationKind::BufferOverflow,
                pointer: p.raw(),
                tag,
                address,
                access_size,
                row: Some(row),
            });
        }
        Ok(())
    }

    /// Standalone temporal check: untagged pointers pass, tagged pointers
    /// fail iff their row has been invalidated.
    pub fn temporal_check(&self, p: TaggedPointer) -> Result<(), Violation> {
        self.checks_executed.fetch_add(1, Ordering::Relaxed);
        let (tag, address) = self.cfg.split(p);
        if tag == 0 {
            return Ok(());
        }
        let row = self.table.row(tag);
        if !row.is_valid() {
            return Err(Violation {
                kind: ViolationKind::UseAfterFree,
                pointer: p.raw(),
                tag,
                address,
                access_size: 0,
                row: Some(row),
            });
        }
        Ok(())
    }

    /// Standalone spatial check; lower-bound failures report a buffer
    /// underflow without consulting validity, mirroring the separated
    /// presentation. Agrees with `safety_check` whenever the row is valid.
    pub fn spatial_check(&self, p: TaggedPointer, access_size: u64) -> Result<(), Violation> {
        self.checks_executed.fetch_add(1, Ordering::Relaxed);
        let (tag, address) = self.cfg.split(p);
        if tag == 0 {
            if address <= self.safe_heap_upper {
                return Err(Violation {
                    kind: ViolationKind::IllegalSafeHeapAccess,
                    pointer: p.raw(),
                    tag,
                    address,
                    access_size,
                    row: None,
                });
            }
            return Ok(());
        }
        let row = self.table.row(tag);
        if address < row.lower {
            return Err(Violation {
                kind: ViolationKind::BufferUnderflow,
                pointer: p.raw(),
                tag,
                address,
                access_size,
                row: Some(row),
            });
        }
        if address.saturating_add(access_size) > row.upper {
            return Err(Violation {
                kind: ViolationKind::BufferOverflow,
                pointer: p.raw(),
                tag,
                address,
                access_size,
                row: Some(row),
            });
        }
        Ok(())
    }

    /// Check-and-strip for pointers crossing into uninstrumented code.
    /// Untagged values pass through unchanged; tagged pointers must refer
    /// to a live object with at least their first byte in bounds, and come
    /// out stripped.
    pub fn boundary_check(&self, p: TaggedPointer) -> Result<u64, Violation> {
        self.checks_executed.fetch_add(1, Ordering::Relaxed);
        let (tag, address) = self.cfg.split(p);
        if tag == 0 {
            return Ok(p.raw());
        }
        let row = self.table.row(tag);
        if address < row.lower {
            return Err(Violation {
                kind: classify_lower_bound_violation(row),
                pointer: p.raw(),
                tag,
                address,
                access_size: 1,
                row: Some(row),
            });
        }
        if address.saturating_add(1) > row.upper {
            return Err(Violation {
                kind: ViolationKind::BufferOverflow,
                pointer: p.raw(),
                tag,
                address,
                access_size: 1,
                row: Some(row),
            });
        }
        Ok(address)
    }

    /// Plain normal-heap allocation for uninstrumented code paths; the
    /// returned address is untagged by construction.
    pub fn nh_alloc(&self, size: u64, align: u64) -> Option<u64> {
        if align == 0 || !align.is_power_of_two() {
            return None;
        }
        self.state.lock().unwrap().normal.alloc(size, align)
    }

    pub fn nh_free(&self, addr: u64) -> Result<(), Fault> {
        self.state
            .lock()
            .unwrap()
            .normal
            .free(addr)
            .map(|_| ())
            .map_err(|e| Fault::InvalidFree { addr: e.addr })
    }

    pub fn nh_block_size(&self, addr: u64) -> Option<u64> {
        self.state.lock().unwrap().normal.block_size(addr)
    }

    /// Live safe-heap block count, for tests.
    pub fn safe_live_blocks(&self) -> usize {
        self.state.lock().unwrap().safe.live_blocks()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mem::SAFE_HEAP_BASE;

    fn rt(tag_bits: u32, wrap: bool) -> Runtime {
        Runtime::new(TagConfig::new(tag_bits).unwrap(), wrap, &MemLayout::default())
    }

    fn rt_with_mem(tag_bits: u32) -> (Runtime, AddressSpace) {
        let layout = MemLayout::default();
        (
            Runtime::new(TagConfig::new(tag_bits).unwrap(), false, &layout),
            AddressSpace::new(layout),
        )
    }

    #[test]
    fn table_bytes_match_tag_width() {
        assert_eq!(rt(17, false).stats().table_bytes, 2_097_152);
        assert_eq!(rt(16, false).stats().table_bytes, 1_048_576);
    }

    #[test]
    fn fresh_runtime_fails_every_tagged_check() {
        let r = rt(17, false);
        for tag in [1u64, 2, 0x1000, 0x1FFFF] {
            let p = r.cfg().apply_tag(0x1000, tag).unwrap();
            let v = r.safety_check(p, 1).unwrap_err();
            assert_eq!(v.kind, ViolationKind::UseAfterFree);
        }
    }

    #[test]
    fn first_allocation_takes_top_row() {
        let r = rt(17, false);
        let p = r.malloc(4).unwrap();
        assert_eq!(r.cfg().tag(p), 0x1FFFF);
        assert_eq!(r.cfg().strip(p), SAFE_HEAP_BASE);
        assert_eq!(
            r.row(0x1FFFF),
            TableRow { lower: SAFE_HEAP_BASE, upper: SAFE_HEAP_BASE + 4 }
        );
        let q = r.malloc(4).unwrap();
        assert_eq!(r.cfg().tag(q), 0x1FFFE);
    }

    #[test]
    fn exhaustion_after_all_rows_used() {
        let r = rt(4, false);
        for expect in (1..=15u64).rev() {
            let p = r.malloc(8).unwrap();
            assert_eq!(r.cfg().tag(p), expect);
        }
        let v = r.malloc(8).unwrap_err();
        assert_eq!(v.kind, ViolationKind::MetadataExhaustion);
    }

    #[test]
    fn calloc_zero_fills_and_rejects_overflow() {
        let (r, mut mem) = rt_with_mem(17);
        // Dirty the heap first so the zero-fill is observable.
        let d = r.malloc(8).unwrap();
        mem.write_word(r.cfg().strip(d), 8, u64::MAX).unwrap();
        r.free(d).unwrap();

        let p = r.calloc(4, 2, &mut mem).unwrap();
        assert!(!p.is_null());
        assert_eq!(mem.read_word(r.cfg().strip(p), 8).unwrap(), 0);

        assert!(r.calloc(1u64 << 62, 8, &mut mem).unwrap().is_null());

        let z = r.calloc(1, 0, &mut mem).unwrap();
        assert!(!z.is_null());
        let row = r.row(r.cfg().tag(z));
        assert_eq!(row.lower, row.upper);
        assert!(r.safety_check(z, 1).is_err());
    }

    #[test]
    fn realloc_null_is_malloc() {
        let (r, mut mem) = rt_with_mem(17);
        let p = r.realloc(TaggedPointer::NULL, 8, &mut mem).unwrap();
        assert!(!p.is_null());
        assert_eq!(r.cfg().tag(p), 0x1FFFF);
    }

    #[test]
    fn realloc_copies_and_dangles_old_pointer() {
        let (r, mut mem) = rt_with_mem(17);
        let p = r.malloc(4).unwrap();
        mem.write_word(r.cfg().strip(p), 4, 0xAABBCCDD).unwrap();
        let q = r.realloc(p, 8, &mut mem).unwrap();
        assert_ne!(q, p);
        assert_eq!(mem.read_word(r.cfg().strip(q), 4).unwrap(), 0xAABBCCDD);
        let v = r.safety_check(p, 1).unwrap_err();
        assert_eq!(v.kind, ViolationKind::UseAfterFree);
        assert!(r.safety_check(q, 8).is_ok());
    }

    #[test]
    fn realloc_after_free_is_double_free() {
        let (r, mut mem) = rt_with_mem(17);
        let p = r.malloc(4).unwrap();
        r.free(p).unwrap();
        match r.realloc(p, 8, &mut mem) {
            Err(RuntimeError::Violation(v)) => assert_eq!(v.kind, ViolationKind::DoubleFree),
            other => panic!("expected DoubleFree, got {other:?}"),
        }
    }

    #[test]
    fn realloc_untagged_resizes_in_normal_heap() {
        let (r, mut mem) = rt_with_mem(17);
        let a = r.nh_alloc(4, 16).unwrap();
        mem.write_word(a, 4, 0x1234).unwrap();
        let q = r
            .realloc(TaggedPointer::from_raw(a), 16, &mut mem)
            .unwrap();
        assert_eq!(r.cfg().tag(q), 0);
        assert_eq!(mem.read_word(q.raw(), 4).unwrap(), 0x1234);
        assert!(r.nh_block_size(a).is_none());
    }

    #[test]
    fn memalign_contract() {
        let r = rt(17, false);
        let p = r.memalign(64, 8).unwrap();
        assert_eq!(r.cfg().strip(p) % 64, 0);
        let row = r.row(r.cfg().tag(p));
        assert_eq!(row.upper - row.lower, 8);
        assert!(r.memalign(3, 8).unwrap().is_null());
    }

    #[test]
    fn free_then_use_is_uaf_and_refree_is_double_free() {
        let r = rt(17, false);
        let p = r.malloc(4).unwrap();
        r.free(p).unwrap();
        assert_eq!(
            r.safety_check(p, 1).unwrap_err().kind,
            ViolationKind::UseAfterFree
        );
        match r.free(p) {
            Err(RuntimeError::Violation(v)) => assert_eq!(v.kind, ViolationKind::DoubleFree),
            other => panic!("expected DoubleFree, got {other:?}"),
        }
    }

    #[test]
    fn untagged_free_paths() {
        let r = rt(17, false);
        // Normal-heap block frees fine.
        let a = r.nh_alloc(8, 16).unwrap();
        r.free(TaggedPointer::from_raw(a)).unwrap();
        // NULL lands in the safe-heap comparison range.
        match r.free(TaggedPointer::NULL) {
            Err(RuntimeError::Violation(v)) => {
                assert_eq!(v.kind, ViolationKind::IllegalSafeHeapFree)
            }
            other => panic!("expected IllegalSafeHeapFree, got {other:?}"),
        }
        // Untagged pointer into the safe heap.
        match r.free(TaggedPointer::from_raw(0x2000)) {
            Err(RuntimeError::Violation(v)) => {
                assert_eq!(v.kind, ViolationKind::IllegalSafeHeapFree)
            }
            other => panic!("expected IllegalSafeHeapFree, got {other:?}"),
        }
        // Untagged pointer above the safe heap that was never allocated.
        match r.free(TaggedPointer::from_raw(0x4000_0000)) {
            Err(RuntimeError::Fault(Fault::InvalidFree { addr })) => assert_eq!(addr, 0x4000_0000),
            other => panic!("expected InvalidFree, got {other:?}"),
        }
    }

    #[test]
    fn check_is_byte_precise() {
        let r = rt(17, false);
        let p = r.malloc(8).unwrap();
        assert!(r.safety_check(p, 8).is_ok());
        assert!(r.safety_check(p.ptr_add(7), 1).is_ok());
        assert_eq!(
            r.safety_check(p.ptr_add(8), 1).unwrap_err().kind,
            ViolationKind::BufferOverflow
        );
        assert_eq!(
            r.safety_check(p.ptr_add(7), 2).unwrap_err().kind,
            ViolationKind::BufferOverflow
        );
        assert_eq!(
            r.safety_check(p.ptr_add(-1), 1).unwrap_err().kind,
            ViolationKind::BufferUnderflow
        );
    }

    #[test]
    fn untagged_check_guards_safe_heap_only() {
        let r = rt(17, false);
        let v = r
            .safety_check(TaggedPointer::from_raw(0x2000), 1)
            .unwrap_err();
        assert_eq!(v.kind, ViolationKind::IllegalSafeHeapAccess);
        // Address 0: the null page sits below the safe heap bound.
        assert_eq!(
            r.safety_check(TaggedPointer::NULL, 8).unwrap_err().kind,
            ViolationKind::IllegalSafeHeapAccess
        );
        assert!(r
            .safety_check(TaggedPointer::from_raw(r.safe_heap_upper() + 1), 1)
            .is_ok());
    }

    #[test]
    fn temporal_check_cases() {
        let r = rt(17, false);
        assert!(r.temporal_check(TaggedPointer::from_raw(0x9000_0000)).is_ok());
        let p = r.malloc(4).unwrap();
        assert!(r.temporal_check(p).is_ok());
        r.free(p).unwrap();
        assert_eq!(
            r.temporal_check(p).unwrap_err().kind,
            ViolationKind::UseAfterFree
        );
    }

    #[test]
    fn spatial_agrees_with_combined_check_on_valid_rows() {
        let r = rt(17, false);
        let p = r.malloc(8).unwrap();
        for off in -2i64..=10 {
            for size in [1u64, 2, 4, 8] {
                let q = p.ptr_add(off);
                let combined = r.safety_check(q, size).map_err(|v| v.kind);
                let spatial = r.spatial_check(q, size).map_err(|v| v.kind);
                assert_eq!(combined, spatial, "off={off} size={size}");
            }
        }
    }

    #[test]
    fn boundary_check_strips_live_pointers() {
        let r = rt(17, false);
        let p = r.malloc(8).unwrap();
        assert_eq!(r.boundary_check(p).unwrap(), r.cfg().strip(p));
        // Untagged values pass through untouched, even small integers.
        assert_eq!(r.boundary_check(TaggedPointer::from_raw(8)).unwrap(), 8);
        r.free(p).unwrap();
        assert_eq!(
            r.boundary_check(p).unwrap_err().kind,
            ViolationKind::UseAfterFree
        );
    }

    #[test]
    fn wraparound_reuses_freed_row() {
        let r = rt(4, true);
        let mut ptrs = Vec::new();
        for _ in 0..15 {
            ptrs.push(r.malloc(8).unwrap());
        }
        let victim = ptrs
            .iter()
            .find(|p| r.cfg().tag(**p) == 9)
            .copied()
            .unwrap();
        r.free(victim).unwrap();
        let p = r.malloc(8).unwrap();
        assert_eq!(r.cfg().tag(p), 9);
        assert_eq!(r.stats().wraparound_reuses, 1);
    }

    #[test]
    fn wraparound_with_full_table_exhausts() {
        let r = rt(4, true);
        for _ in 0..15 {
            r.malloc(8).unwrap();
        }
        assert_eq!(
            r.malloc(8).unwrap_err().kind,
            ViolationKind::MetadataExhaustion
        );
    }

    #[test]
    fn wraparound_sustains_bounded_live_set() {
        let r = rt(4, true);
        let mut live = std::collections::VecDeque::new();
        for _ in 0..10_000u64 {
            if live.len() == 15 {
                r.free(live.pop_front().unwrap()).unwrap();
            }
            live.push_back(r.malloc(8).unwrap());
        }
        let stats = r.stats();
        assert_eq!(stats.total_allocations, 10_000);
        assert_eq!(stats.wraparound_reuses, 10_000 - 15);
        assert_eq!(stats.peak_live_objects, 15);
    }

    #[test]
    fn tag_sequence_is_strictly_decreasing_without_wrap() {
        let r = rt(8, false);
        let mut prev = r.cfg().max_tag() + 1;
        for _ in 0..255 {
            let t = r.cfg().tag(r.malloc(1).unwrap());
            assert!(t < prev && t > 0);
            prev = t;
        }
    }

    #[test]
    fn table_bytes_invariant_under_workload() {
        let r = rt(17, false);
        let before = r.stats().table_bytes;
        let mut ptrs = Vec::new();
        for i in 0..500 {
            ptrs.push(r.malloc(i % 64).unwrap());
        }
        for p in ptrs {
            r.free(p).unwrap();
        }
        assert_eq!(r.stats().table_bytes, before);
    }

    #[test]
    fn concurrent_allocations_get_distinct_tags() {
        let r = rt(17, false);
        let tags: Vec<u64> = std::thread::scope(|s| {
            let handles: Vec<_> = (0..4)
                .map(|_| {
                    s.spawn(|| {
                        (0..200)
                            .map(|_| r.cfg().tag(r.malloc(8).unwrap()))
                            .collect::<Vec<_>>()
                    })
                })
                .collect();
            handles.into_iter().flat_map(|h| h.join().unwrap()).collect()
        });
        let mut sorted = tags.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), 800);
        assert!(!tags.contains(&0));
    }

    #[test]
    fn null_sized_object_rejects_every_access() {
        let r = rt(17, false);
        let a = r.malloc(0).unwrap();
        let b = r.malloc(0).unwrap();
        assert_ne!(r.cfg().strip(a), r.cfg().strip(b));
        assert_eq!(
            r.safety_check(a, 1).unwrap_err().kind,
            ViolationKind::BufferOverflow
        );
    }
}
