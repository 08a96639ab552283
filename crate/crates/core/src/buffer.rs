//! Fixed-capacity buffer pool with pinning, CLOCK second-chance replacement,
//! dirty tracking, and redirectable slot handles.
//!
//! Each slot owns a private page frame and a data handle that designates
//! either that frame or a read-only view into the device's mapped region
//! (the redirected state). Rules enforced here:
//!
//! * a pinned slot is never chosen as victim;
//! * a redirected slot is never dirty, and a dirty slot is never redirected;
//! * eviction of a clean redirected slot is a plain release;
//! * CLOCK sets the reference bit on hit (not on initial load), clears it as
//!   the hand sweeps, and visits at most 2 x capacity slots per search.

use crate::device::{Device, DeviceError, PageView};
use std::collections::HashMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum BufferError {
    #[error("all {0} slots pinned")]
    PoolExhausted(usize),
    #[error("cannot redirect a dirty slot")]
    DirtySlot,
    #[error("slot is not redirected")]
    NotRedirected,
    #[error("cannot dirty a redirected slot; copy back first")]
    DirtyRedirected,
    #[error("slot is not pinned")]
    NotPinned,
    #[error("slot is empty")]
    EmptySlot,
    #[error("victim write-back failed: {0}")]
    Writeback(#[from] DeviceError),
}

/// Cache key: (relation id, page number).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PageTag {
    pub rel: u32,
    pub page_no: u64,
}

/// Index of a slot in the pool. Stable while the page stays resident.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SlotId(pub u32);

enum DataHandle {
    Private,
    Mapped(PageView),
}

pub struct BufferSlot {
    frame: Box<[u8]>,
    tag: Option<PageTag>,
    pin_count: u32,
    dirty: bool,
    ref_bit: bool,
    handle: DataHandle,
    generation: u64,
}

impl BufferSlot {
    fn new(page_size: usize) -> Self {
        BufferSlot {
            frame: vec![0u8; page_size].into_boxed_slice(),
            tag: None,
            pin_count: 0,
            dirty: false,
            ref_bit: false,
            handle: DataHandle::Private,
            generation: 0,
        }
    }

    pub fn is_redirected(&self) -> bool {
        matches!(self.handle, DataHandle::Mapped(_))
    }

    pub fn is_dirty(&self) -> bool {
        self.dirty
    }

    pub fn pin_count(&self) -> u32 {
        self.pin_count
    }

    pub fn tag(&self) -> Option<PageTag> {
        self.tag
    }
}

/// Read-only snapshot of a slot, for tests and property checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SlotState {
    pub tag: Option<PageTag>,
    pub pin_count: u32,
    pub dirty: bool,
    pub redirected: bool,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct PoolCounters {
    pub hits: u64,
    pub misses: u64,
    pub evictions: u64,
    pub writebacks: u64,
    /// Longest victim search, in slots visited. Bounded by 2 x capacity.
    pub max_victim_scan: u64,
}

pub struct BufferPool {
    slots: Vec<BufferSlot>,
    page_table: HashMap<PageTag, u32>,
    clock_hand: u32,
    free: Vec<u32>,
    page_size: usize,
    counters: PoolCounters,
}

pub const DEFAULT_CAPACITY_SLOTS: usize = 1024;

impl BufferPool {
    pub fn new(capacity: usize, page_size: usize) -> Self {
        assert!(capacity > 0);
        BufferPool {
            slots: (0..capacity).map(|_| BufferSlot::new(page_size)).collect(),
            page_table: HashMap::new(),
            clock_hand: 0,
            // Pop from the back; slot 0 is used first.
            free: (0..capacity as u32).rev().collect(),
            page_size,
            counters: PoolCounters::default(),
        }
    }

    pub fn capacity(&self) -> usize {
        self.slots.len()
    }

    pub fn page_size(&self) -> usize {
        self.page_size
    }

    pub fn counters(&self) -> PoolCounters {
        self.counters
    }

    pub fn contains(&self, tag: PageTag) -> bool {
        self.page_table.contains_key(&tag)
    }

    pub fn generation(&self, id: SlotId) -> u64 {
        self.slots[id.0 as usize].generation
    }

    pub fn slot_state(&self, id: SlotId) -> SlotState {
        let s = &self.slots[id.0 as usize];
        SlotState {
            tag: s.tag,
            pin_count: s.pin_count,
            dirty: s.dirty,
            redirected: s.is_redirected(),
        }
    }

    /// Snapshot of every occupied slot, for invariant checks.
    pub fn occupied_states(&self) -> Vec<(SlotId, SlotState)> {
        self.slots
            .iter()
            .enumerate()
            .filter(|(_, s)| s.tag.is_some())
            .map(|(i, _)| (SlotId(i as u32), self.slot_state(SlotId(i as u32))))
            .collect()
    }

    /// Verifies the page-table bijection. Cheap enough for per-op checks.
    pub fn table_is_bijective(&self) -> bool {
        if self.page_table.len() != self.slots.iter().filter(|s| s.tag.is_some()).count() {
            return false;
        }
        self.page_table
            .iter()
            .all(|(tag, &idx)| self.slots[idx as usize].tag == Some(*tag))
    }

    /// Pins (and on miss, allocates) the slot for `tag`. On a miss the frame
    /// content is NOT loaded; the caller's engine decides how. A dirty victim
    /// is written back through `write_back` before reuse.
    pub fn get_slot(
        &mut self,
        tag: PageTag,
        write_back: impl FnMut(PageTag, &[u8]) -> Result<(), DeviceError>,
    ) -> Result<(SlotId, bool), BufferError> {
        if let Some(&idx) = self.page_table.get(&tag) {
            let s = &mut self.slots[idx as usize];
            s.pin_count += 1;
            s.ref_bit = true;
            self.counters.hits += 1;
            return Ok((SlotId(idx), true));
        }
        self.counters.misses += 1;
        let idx = match self.free.pop() {
            Some(i) => i,
            None => self.evict_one(write_back)?,
        };
        let s = &mut self.slots[idx as usize];
        debug_assert_eq!(s.pin_count, 0);
        s.tag = Some(tag);
        s.pin_count = 1;
        s.dirty = false;
        s.ref_bit = false;
        s.handle = DataHandle::Private;
        s.generation += 1;
        self.page_table.insert(tag, idx);
        Ok((SlotId(idx), false))
    }

    /// CLOCK second-chance sweep. Visits at most 2 x capacity slots: one
    /// full pass clears reference bits of unpinned slots, a second pass must
    /// then find one, unless every slot is pinned.
    fn evict_one(
        &mut self,
        mut write_back: impl FnMut(PageTag, &[u8]) -> Result<(), DeviceError>,
    ) -> Result<u32, BufferError> {
        let cap = self.slots.len() as u32;
        let mut visited = 0u64;
        let mut victim = None;
        while visited < 2 * cap as u64 {
            let idx = self.clock_hand;
            self.clock_hand = (self.clock_hand + 1) % cap;
            visited += 1;
            let s = &mut self.slots[idx as usize];
            if s.pin_count > 0 {
                continue;
            }
            if s.ref_bit {
                s.ref_bit = false;
                continue;
            }
            victim = Some(idx);
            break;
        }
        self.counters.max_victim_scan = self.counters.max_victim_scan.max(visited);
        let idx = victim.ok_or(BufferError::PoolExhausted(cap as usize))?;
        let s = &mut self.slots[idx as usize];
        let old_tag = s.tag.expect("victim slot must be occupied");
        debug_assert_eq!(s.pin_count, 0, "victim must be unpinned");
        if s.dirty {
            debug_assert!(!s.is_redirected(), "dirty slot can never be redirected");
            write_back(old_tag, &s.frame)?;
            s.dirty = false;
            self.counters.writebacks += 1;
        }
        // A clean redirected victim needs no action beyond dropping the view.
        s.handle = DataHandle::Private;
        s.tag = None;
        self.page_table.remove(&old_tag);
        self.counters.evictions += 1;
        Ok(idx)
    }

    pub fn unpin(&mut self, id: SlotId) -> Result<(), BufferError> {
        let s = &mut self.slots[id.0 as usize];
        if s.pin_count == 0 {
            return Err(BufferError::NotPinned);
        }
        s.pin_count -= 1;
        Ok(())
    }

    pub fn mark_dirty(&mut self, id: SlotId) -> Result<(), BufferError> {
        let s = &mut self.slots[id.0 as usize];
        if s.tag.is_none() {
            return Err(BufferError::EmptySlot);
        }
        if s.is_redirected() {
            return Err(BufferError::DirtyRedirected);
        }
        s.dirty = true;
        Ok(())
    }

    /// Points the slot's data handle at a mapped-region page instead of the
    /// private frame. The frame is retained but inert.
    pub fn redirect(&mut self, id: SlotId, view: PageView) -> Result<(), BufferError> {
        let s = &mut self.slots[id.0 as usize];
        if s.tag.is_none() {
            return Err(BufferError::EmptySlot);
        }
        if s.pin_count == 0 {
            return Err(BufferError::NotPinned);
        }
        if s.dirty {
            return Err(BufferError::DirtySlot);
        }
        s.handle = DataHandle::Mapped(view);
        Ok(())
    }

    /// Copies the mapped page back into the private frame (one counted copy
    /// through the device) and cancels the redirection. The slot may then be
    /// marked dirty.
    pub fn unredirect_with_copyback(
        &mut self,
        id: SlotId,
        device: &mut Device,
    ) -> Result<(), BufferError> {
        let s = &mut self.slots[id.0 as usize];
        if !s.is_redirected() {
            return Err(BufferError::NotRedirected);
        }
        let tag = s.tag.ok_or(BufferError::EmptySlot)?;
        device.mapped_copy(tag.page_no, &mut s.frame)?;
        s.handle = DataHandle::Private;
        Ok(())
    }

    /// Resolved page bytes: the private frame, or the mapped view when
    /// redirected.
    pub fn page_bytes(&self, id: SlotId) -> &[u8] {
        let s = &self.slots[id.0 as usize];
        match &s.handle {
            DataHandle::Private => &s.frame,
            DataHandle::Mapped(v) => v.bytes(),
        }
    }

    /// Mutable access to the private frame. Panics if the slot is
    /// redirected; callers must copy back first.
    pub fn frame_mut(&mut self, id: SlotId) -> &mut [u8] {
        let s = &mut self.slots[id.0 as usize];
        assert!(
            !matches!(s.handle, DataHandle::Mapped(_)),
            "frame_mut on redirected slot"
        );
        &mut s.frame
    }

    /// Writes every dirty page through `write_back`, clears dirty flags, and
    /// returns the number written. Pinned pages are flushed like any other.
    pub fn flush_all(
        &mut self,
        mut write_back: impl FnMut(PageTag, &[u8]) -> Result<(), DeviceError>,
    ) -> Result<u64, BufferError> {
        let mut flushed = 0;
        for s in &mut self.slots {
            if let (Some(tag), true) = (s.tag, s.dirty) {
                write_back(tag, &s.frame)?;
                s.dirty = false;
                flushed += 1;
                self.counters.writebacks += 1;
            }
        }
        Ok(flushed)
    }
}
