//! First-fit free-list allocator over one region of the simulated address
//! space. One instance manages the safe heap, a second one the normal heap
//! used by uninstrumented code.
//!
//! Block metadata is kept out-of-band in the allocator itself rather than in
//! headers next to the payload, so allocator state survives simulated buffer
//! overflows unharmed.

use std::collections::HashMap;
use std::fmt;

use crate::mem::RegionKind;

pub const DEFAULT_ALIGN: u64 = 16;

/// A free span, `[addr, addr + size)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Chunk {
    pub addr: u64,
    pub size: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct UnknownBlock {
    pub region: RegionKind,
    pub addr: u64,
}

impl fmt::Display for UnknownBlock {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} allocator does not track block {:#x}", self.region, self.addr)
    }
}

impl std::error::Error for UnknownBlock {}

/// First-fit allocator with immediate coalescing.
pub struct FreeList {
    region: RegionKind,
    base: u64,
    size: u64,
    /// Sorted by address, pairwise disjoint, never adjacent.
    free: Vec<Chunk>,
    /// Out-of-band block map: start address -> reserved bytes.
    blocks: HashMap<u64, u64>,
}

impl FreeList {
    pub fn new(region: RegionKind, base: u64, size: u64) -> Self {
        FreeList {
            region,
            base,
            size,
            free: vec![Chunk { addr: base, size }],
            blocks: HashMap::new(),
        }
    }

    pub fn region(&self) -> RegionKind {
        self.region
    }

    /// Reserves an aligned block of `size` bytes; returns its address, or
    /// `None` when no free chunk fits. `align` must be a power of two.
    ///
    /// A zero-byte request reserves one byte internally so that every
    /// allocation has a distinct address, but callers record it as a
    /// zero-length object.
    pub fn alloc(&mut self, size: u64, align: u64) -> Option<u64> {
        assert!(align.is_power_of_two(), "alignment must be a power of two");
        let reserve = size.max(1);
        let (idx, addr) = self.free.iter().enumerate().find_map(|(i, c)| {
            let aligned = c.addr.checked_add(align - 1)? & !(align - 1);
            let lead = aligned.checked_sub(c.addr)?;
            if c.size.checked_sub(lead)? >= reserve {
                Some((i, aligned))
            } else {
                None
            }
        })?;

        let chunk = self.free[idx];
        let lead = addr - chunk.addr;
        let tail = chunk.size - lead - reserve;
        // Replace the chunk by its leading and trailing remainders.
        self.free.remove(idx);
        if tail > 0 {
            self.free.insert(idx, Chunk { addr: addr + reserve, size: tail });
        }
        if lead > 0 {
            self.free.insert(idx, Chunk { addr: chunk.addr, size: lead });
        }
        self.blocks.insert(addr, reserve);
        Some(addr)
    }

    /// Returns a block to the free list and coalesces with its neighbors.
    pub fn free(&mut self, addr: u64) -> Result<u64, UnknownBlock> {
        let size = self
            .blocks
            .remove(&addr)
            .ok_or(UnknownBlock { region: self.region, addr })?;
        let idx = self.free.partition_point(|c| c.addr < addr);
        let merge_prev = idx > 0 && {
            let p = self.free[idx - 1];
            p.addr + p.size == addr
        };
        let merge_next = idx < self.free.len() && addr + size == self.free[idx].addr;
        match (merge_prev, merge_next) {
            (true, true) => {
                let next = self.free.remove(idx);
                self.free[idx - 1].size += size + next.size;
            }
            (true, false) => self.free[idx - 1].size += size,
            (false, true) => {
                self.free[idx].addr = addr;
                self.free[idx].size += size;
            }
            (false, false) => self.free.insert(idx, Chunk { addr, size }),
        }
        Ok(size)
    }

    /// Reserved size of a live block, if `addr` starts one.
    pub fn block_size(&self, addr: u64) -> Option<u64> {
        self.blocks.get(&addr).copied()
    }

    pub fn live_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn free_chunks(&self) -> &[Chunk] {
        &self.free
    }

    pub fn base(&self) -> u64 {
        self.base
    }

    pub fn limit(&self) -> u64 {
        self.base + self.size
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mem::{MemLayout, RegionKind, NORMAL_HEAP_BASE, NORMAL_HEAP_SIZE, SAFE_HEAP_BASE};
    use proptest::prelude::*;
    use std::collections::HashMap;

    fn safe_list() -> FreeList {
        let layout = MemLayout::default();
        FreeList::new(RegionKind::SafeHeap, SAFE_HEAP_BASE, layout.safe_heap_size)
    }

    #[test]
    fn first_alloc_lands_at_base() {
        let mut fl = safe_list();
        assert_eq!(fl.alloc(4, DEFAULT_ALIGN), Some(0x1000));
    }

    #[test]
    fn oversized_request_fails() {
        let mut fl = safe_list();
        let layout = MemLayout::default();
        assert_eq!(fl.alloc(layout.safe_heap_size + 1, DEFAULT_ALIGN), None);
        // A full-region request still fits.
        assert!(fl.alloc(layout.safe_heap_size, 1).is_some());
    }

    #[test]
    fn zero_size_allocations_are_distinct() {
        let mut fl = safe_list();
        let a = fl.alloc(0, DEFAULT_ALIGN).unwrap();
        let b = fl.alloc(0, DEFAULT_ALIGN).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn first_fit_reuses_freed_block() {
        let mut fl = safe_list();
        let a = fl.alloc(32, DEFAULT_ALIGN).unwrap();
        let _b = fl.alloc(32, DEFAULT_ALIGN).unwrap();
        fl.free(a).unwrap();
        assert_eq!(fl.alloc(32, DEFAULT_ALIGN), Some(a));
    }

    #[test]
    fn double_free_is_internal_fault() {
        let mut fl = safe_list();
        let a = fl.alloc(8, DEFAULT_ALIGN).unwrap();
        fl.free(a).unwrap();
        assert!(fl.free(a).is_err());
        assert!(fl.free(0xDEAD_0000).is_err());
    }

    #[test]
    fn alignment_honored() {
        let mut fl = safe_list();
        fl.alloc(3, 1).unwrap();
        let a = fl.alloc(8, 64).unwrap();
        assert_eq!(a % 64, 0);
    }

    #[test]
    fn interleaved_ops_coalesce_back_to_one_chunk() {
        let mut fl = safe_list();
        let mut live = Vec::new();
        for round in 0..1000u64 {
            let a = fl.alloc(8 + (round % 5) * 16, DEFAULT_ALIGN).unwrap();
            live.push(a);
            if round % 3 == 0 {
                // Free from the middle to force both merge directions.
                let victim = live.remove(live.len() / 2);
                fl.free(victim).unwrap();
            }
        }
        for a in live {
            fl.free(a).unwrap();
        }
        let layout = MemLayout::default();
        assert_eq!(
            fl.free_chunks(),
            &[Chunk { addr: SAFE_HEAP_BASE, size: layout.safe_heap_size }]
        );
        assert_eq!(fl.live_blocks(), 0);
    }

    /// Independent overlap oracle: rebuild the live-block interval set and
    /// verify pairwise disjointness and containment in the region.
    fn assert_no_overlap(blocks: &HashMap<u64, u64>, base: u64, limit: u64) {
        let mut spans: Vec<(u64, u64)> = blocks
            .iter()
            .map(|(&a, &s)| (a, a + s))
            .collect();
        spans.sort_unstable();
        for w in spans.windows(2) {
            assert!(w[0].1 <= w[1].0, "blocks overlap: {:x?}", w);
        }
        for &(lo, hi) in &spans {
            assert!(lo >= base && hi <= limit);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn randomized_trace_keeps_blocks_disjoint(ops in proptest::collection::vec((0u8..4, 0u64..512), 1..700)) {
            let mut fl = FreeList::new(RegionKind::NormalHeap, NORMAL_HEAP_BASE, NORMAL_HEAP_SIZE);
            let mut live: Vec<u64> = Vec::new();
            let mut shadow: HashMap<u64, u64> = HashMap::new();
            for (kind, arg) in ops {
                if kind < 3 {
                    let size = arg;
                    if let Some(a) = fl.alloc(size, DEFAULT_ALIGN) {
                        live.push(a);
                        shadow.insert(a, size.max(1));
                    }
                } else if !live.is_empty() {
                    let a = live.remove((arg as usize) % live.len());
                    fl.free(a).unwrap();
                    shadow.remove(&a);
                }
                assert_no_overlap(&shadow, fl.base(), fl.limit());
                prop_assert_eq!(fl.live_blocks(), shadow.len());
            }
        }

        #[test]
        fn allocation_is_deterministic(sizes in proptest::collection::vec(0u64..256, 1..60)) {
            let run = |sizes: &[u64]| -> Vec<Option<u64>> {
                let mut fl = safe_list();
                sizes.iter().map(|&s| fl.alloc(s, DEFAULT_ALIGN)).collect()
            };
            prop_assert_eq!(run(&sizes), run(&sizes));
        }
    }
}
