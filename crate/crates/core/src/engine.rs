//! The three storage-engine read/write paths behind one interface.
//!
//! Per cold miss, the read path costs:
//!
//! * `Base` — block facade, two copies (region -> staging -> frame);
//! * `Se1`  — mapped facade, one copy (region -> frame);
//! * `Se2`  — slot redirection, zero copies (handle points into the region).
//!
//! Writes are identical in spirit for all three: the modified page always
//! ends up in the private frame, marked dirty, and the backing file does not
//! change until flush (or a dirty eviction). `Se2` first copies a redirected
//! page back into the frame and cancels the redirection, then mutates.

use crate::buffer::{BufferError, BufferPool, PageTag, SlotId};
use crate::device::{
    stage_dataset, Backing, CopyCounters, Device, DeviceError, DeviceOptions, LatencyProfile,
    RegionHandle, StagedData,
};
use crate::storage::{self, Catalog, StorageError};
use std::path::Path;
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Device(#[from] DeviceError),
    #[error(transparent)]
    Buffer(#[from] BufferError),
    #[error(transparent)]
    Storage(#[from] StorageError),
    #[error("no tuple {slot_index} in page {page_no} of relation {rel}")]
    TupleNotFound {
        rel: u32,
        page_no: u64,
        slot_index: usize,
    },
    #[error("in-place update must keep length: old {old} bytes, new {new}")]
    LengthMismatch { old: usize, new: usize },
    #[error("unknown relation {0}")]
    UnknownRelation(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EngineKind {
    Base,
    Se1,
    Se2,
}

impl EngineKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            EngineKind::Base => "base",
            EngineKind::Se1 => "se1",
            EngineKind::Se2 => "se2",
        }
    }
}

impl std::str::FromStr for EngineKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "base" => Ok(EngineKind::Base),
            "se1" => Ok(EngineKind::Se1),
            "se2" => Ok(EngineKind::Se2),
            other => Err(format!("unknown engine kind: {other}")),
        }
    }
}

impl std::fmt::Display for EngineKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Pinned reference to a cached page. Valid while the slot stays pinned with
/// the same generation; `Engine::page_bytes` checks both.
#[derive(Debug, Clone, Copy)]
pub struct PageRef {
    pub rel: u32,
    pub page_no: u64,
    slot: SlotId,
    generation: u64,
}

impl PageRef {
    pub fn slot(&self) -> SlotId {
        self.slot
    }
}

#[derive(Debug, Clone)]
pub struct EngineOptions {
    pub kind: EngineKind,
    pub latency: LatencyProfile,
    pub backing: Backing,
    /// Pool capacity in slots. Default: total dataset pages / 4, clamped to
    /// [4, 1024], so that cold scans miss on every page.
    pub capacity_slots: Option<usize>,
}

impl EngineOptions {
    pub fn new(kind: EngineKind) -> Self {
        EngineOptions {
            kind,
            latency: LatencyProfile::nvm_emu(),
            backing: Backing::File,
            capacity_slots: None,
        }
    }
}

pub fn default_capacity(total_pages: u64) -> usize {
    ((total_pages / 4).max(4).min(1024)) as usize
}

pub struct Engine {
    kind: EngineKind,
    pool: BufferPool,
    devices: Vec<Device>,
    catalog: Catalog,
    _staged: StagedData,
    dm_ns: u64,
    copybacks: u64,
    warnings: Vec<String>,
}

fn write_page(
    kind: EngineKind,
    dev: &mut Device,
    page_no: u64,
    bytes: &[u8],
) -> Result<(), DeviceError> {
    match kind {
        EngineKind::Base => dev.block_write(page_no, bytes),
        EngineKind::Se1 | EngineKind::Se2 => dev.mapped_write(page_no, bytes),
    }
}

impl Engine {
    /// Opens every relation of the catalog under `data_dir` as a device and
    /// builds the buffer pool.
    pub fn open(data_dir: &Path, opts: EngineOptions) -> Result<Engine, EngineError> {
        let catalog = Catalog::load(data_dir)?;
        let files: Vec<String> = catalog.relations.iter().map(|r| r.file.clone()).collect();
        let staged = stage_dataset(data_dir, &files, opts.backing)?;
        let warnings = staged.warnings.clone();
        let page_size = catalog.page_size as usize;
        let capacity = opts
            .capacity_slots
            .unwrap_or_else(|| default_capacity(catalog.total_pages()));
        let mut devices = Vec::with_capacity(catalog.relations.len());
        for rel in &catalog.relations {
            devices.push(Device::open(
                &staged.dir.join(&rel.file),
                page_size,
                opts.latency,
                DeviceOptions::default(),
            )?);
        }
        Ok(Engine {
            kind: opts.kind,
            pool: BufferPool::new(capacity, page_size),
            devices,
            catalog,
            _staged: staged,
            dm_ns: 0,
            copybacks: 0,
            warnings,
        })
    }

    pub fn kind(&self) -> EngineKind {
        self.kind
    }

    pub fn catalog(&self) -> &Catalog {
        &self.catalog
    }

    pub fn page_size(&self) -> usize {
        self.pool.page_size()
    }

    pub fn relation_id(&self, name: &str) -> Result<u32, EngineError> {
        self.catalog
            .relation(name)
            .map(|(id, _)| id)
            .ok_or_else(|| EngineError::UnknownRelation(name.to_string()))
    }

    pub fn pool(&self) -> &BufferPool {
        &self.pool
    }

    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    /// Time spent inside read paths, copy-backs, and flush writes.
    pub fn dm_ns(&self) -> u64 {
        self.dm_ns
    }

    /// Copy-backs performed by the Se2 write path.
    pub fn copybacks(&self) -> u64 {
        self.copybacks
    }

    /// Copy counters summed over all devices.
    pub fn copy_counters(&self) -> CopyCounters {
        let mut total = CopyCounters::default();
        for d in &self.devices {
            let c = d.counters();
            total.copies += c.copies;
            total.bytes_copied += c.bytes_copied;
            total.dm_ns += c.dm_ns;
        }
        total
    }

    /// Region handles for the prefetch library, indexed by relation id.
    pub fn region_handles(&self) -> Vec<RegionHandle> {
        self.devices.iter().map(|d| d.region_handle()).collect()
    }

    /// Where the heap files actually live for this run (staging-aware).
    pub fn device_path(&self, rel: u32) -> &Path {
        self.devices[rel as usize].path()
    }

    /// Pins the page and, on a miss, loads it through the engine's read
    /// path. The caller must `unpin` when done.
    pub fn read_page(&mut self, rel: u32, page_no: u64) -> Result<PageRef, EngineError> {
        let tag = PageTag { rel, page_no };
        let started = Instant::now();
        let kind = self.kind;
        let devices = &mut self.devices;
        let (slot, hit) = self.pool.get_slot(tag, |victim, bytes| {
            write_page(kind, &mut devices[victim.rel as usize], victim.page_no, bytes)
        })?;
        if !hit {
            let dev = &mut self.devices[rel as usize];
            let load = match kind {
                EngineKind::Base => dev.block_read(page_no, self.pool.frame_mut(slot)),
                EngineKind::Se1 => dev.mapped_copy(page_no, self.pool.frame_mut(slot)),
                EngineKind::Se2 => dev
                    .mapped_ref(page_no)
                    .map_err(EngineError::from)
                    .and_then(|view| self.pool.redirect(slot, view).map_err(EngineError::from)),
            };
            if let Err(e) = load.map_err(Into::<EngineError>::into) {
                // Load failed: release the slot so the pool stays consistent.
                let _ = self.pool.unpin(slot);
                return Err(e);
            }
            self.dm_ns += started.elapsed().as_nanos() as u64;
        }
        Ok(PageRef {
            rel,
            page_no,
            slot,
            generation: self.pool.generation(slot),
        })
    }

    /// Resolved bytes of a pinned page. Panics if the reference is stale;
    /// that is a caller bug, not an I/O condition.
    pub fn page_bytes(&self, page: &PageRef) -> &[u8] {
        let state = self.pool.slot_state(page.slot);
        assert!(
            state.pin_count > 0 && self.pool.generation(page.slot) == page.generation,
            "stale PageRef"
        );
        self.pool.page_bytes(page.slot)
    }

    pub fn is_redirected(&self, page: &PageRef) -> bool {
        self.pool.slot_state(page.slot).redirected
    }

    pub fn unpin(&mut self, page: PageRef) -> Result<(), EngineError> {
        self.pool.unpin(page.slot)?;
        Ok(())
    }

    /// In-place, equal-length tuple update. All engines end with the new
    /// bytes in the private frame and the slot dirty; the backing file is
    /// untouched until flush. On Se2 a redirected slot is first copied back
    /// (one counted copy) and un-redirected.
    pub fn write_tuple(
        &mut self,
        rel: u32,
        page_no: u64,
        slot_index: usize,
        new_body: &[u8],
    ) -> Result<(), EngineError> {
        let page = self.read_page(rel, page_no)?;
        let result = self.write_tuple_pinned(&page, slot_index, new_body);
        let _ = self.pool.unpin(page.slot);
        result
    }

    fn write_tuple_pinned(
        &mut self,
        page: &PageRef,
        slot_index: usize,
        new_body: &[u8],
    ) -> Result<(), EngineError> {
        if self.pool.slot_state(page.slot).redirected {
            let started = Instant::now();
            self.pool
                .unredirect_with_copyback(page.slot, &mut self.devices[page.rel as usize])?;
            self.copybacks += 1;
            self.dm_ns += started.elapsed().as_nanos() as u64;
        }
        let frame = self.pool.frame_mut(page.slot);
        let loc = storage::locate_tuple(frame, slot_index)?;
        let (off, len) = loc.ok_or(EngineError::TupleNotFound {
            rel: page.rel,
            page_no: page.page_no,
            slot_index,
        })?;
        if len != new_body.len() {
            return Err(EngineError::LengthMismatch {
                old: len,
                new: new_body.len(),
            });
        }
        frame[off..off + len].copy_from_slice(new_body);
        storage::recompute_checksum(frame);
        self.pool.mark_dirty(page.slot)?;
        Ok(())
    }

    /// Writes every dirty page through the engine's write path, syncs the
    /// regions, and returns the write-back count.
    pub fn flush(&mut self) -> Result<u64, EngineError> {
        let started = Instant::now();
        let kind = self.kind;
        let devices = &mut self.devices;
        let flushed = self.pool.flush_all(|tag, bytes| {
            write_page(kind, &mut devices[tag.rel as usize], tag.page_no, bytes)
        })?;
        for dev in &mut self.devices {
            dev.flush_region()?;
        }
        if flushed > 0 {
            self.dm_ns += started.elapsed().as_nanos() as u64;
        }
        Ok(flushed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fnv::digest_file;
    use crate::storage::{generate_dataset, page_tuples, ScaleSpec};
    use std::path::PathBuf;

    fn dataset(sf: f64) -> (tempfile::TempDir, Catalog) {
        let dir = tempfile::tempdir().unwrap();
        let cat = generate_dataset(42, &ScaleSpec::new(sf).unwrap(), 8192, dir.path()).unwrap();
        (dir, cat)
    }

    fn open(dir: &Path, kind: EngineKind) -> Engine {
        Engine::open(dir, EngineOptions::new(kind)).unwrap()
    }

    #[test]
    fn cold_read_copy_costs() {
        let (dir, _cat) = dataset(0.0005);
        for (kind, expect) in [
            (EngineKind::Base, 2u64),
            (EngineKind::Se1, 1),
            (EngineKind::Se2, 0),
        ] {
            let mut eng = open(dir.path(), kind);
            let rel = eng.relation_id("lineitem").unwrap();
            let before = eng.copy_counters();
            let page = eng.read_page(rel, 0).unwrap();
            let after = eng.copy_counters();
            assert_eq!(after.copies - before.copies, expect, "{kind} cold read");
            // Warm read: no further copies, any engine.
            let page2 = eng.read_page(rel, 0).unwrap();
            assert_eq!(eng.copy_counters().copies, after.copies, "{kind} warm read");
            eng.unpin(page).unwrap();
            eng.unpin(page2).unwrap();
        }
    }

    #[test]
    fn engines_see_identical_bytes() {
        let (dir, cat) = dataset(0.0005);
        let li = cat.relation("lineitem").unwrap().1.clone();
        let mut digests = Vec::new();
        for kind in [EngineKind::Base, EngineKind::Se1, EngineKind::Se2] {
            let mut eng = open(dir.path(), kind);
            let rel = eng.relation_id("lineitem").unwrap();
            let mut h = crate::fnv::Fnv64::new();
            for p in 0..li.page_count {
                let page = eng.read_page(rel, p).unwrap();
                h.write(eng.page_bytes(&page));
                eng.unpin(page).unwrap();
            }
            digests.push(h.finish());
        }
        assert_eq!(digests[0], digests[1]);
        assert_eq!(digests[1], digests[2]);
    }

    fn first_tuple_patch(eng: &mut Engine, rel: u32, page_no: u64) -> Vec<u8> {
        let page = eng.read_page(rel, page_no).unwrap();
        let bytes = eng.page_bytes(&page);
        let t = page_tuples(bytes).unwrap().next().unwrap().unwrap();
        let mut body = vec![0u8; t.body_len()];
        body[0..8].copy_from_slice(&t.key.to_le_bytes());
        body[8..16].copy_from_slice(&t.quantity.to_le_bytes());
        body[16..24].copy_from_slice(&t.price_cents.to_le_bytes());
        body[24..32].copy_from_slice(&t.date_ordinal.to_le_bytes());
        for (i, b) in t.text.iter().enumerate() {
            body[32 + i] = b ^ 0x5a;
        }
        eng.unpin(page).unwrap();
        body
    }

    #[test]
    fn se2_write_path_copies_back() {
        let (dir, _cat) = dataset(0.0005);
        let mut eng = open(dir.path(), EngineKind::Se2);
        let rel = eng.relation_id("lineitem").unwrap();
        let page = eng.read_page(rel, 0).unwrap();
        assert!(eng.is_redirected(&page));
        eng.unpin(page).unwrap();

        let new_body = first_tuple_patch(&mut eng, rel, 0);
        let before = eng.copy_counters();
        eng.write_tuple(rel, 0, 0, &new_body).unwrap();
        let after = eng.copy_counters();
        assert_eq!(after.copies - before.copies, 1, "exactly the copy-back");
        assert_eq!(eng.copybacks(), 1);
        let page = eng.read_page(rel, 0).unwrap();
        assert!(!eng.is_redirected(&page));
        let state = eng.pool().slot_state(page.slot());
        assert!(state.dirty);
        eng.unpin(page).unwrap();
    }

    #[test]
    fn base_write_leaves_file_untouched_until_flush() {
        let (dir, cat) = dataset(0.0005);
        let li_file = dir.path().join(&cat.relation("lineitem").unwrap().1.file);
        let before = digest_file(&li_file).unwrap();
        let mut eng = open(dir.path(), EngineKind::Base);
        let rel = eng.relation_id("lineitem").unwrap();
        let new_body = first_tuple_patch(&mut eng, rel, 0);
        let copies_before = eng.copy_counters().copies;
        eng.write_tuple(rel, 0, 0, &new_body).unwrap();
        assert_eq!(eng.copy_counters().copies, copies_before);
        assert_eq!(digest_file(&li_file).unwrap(), before, "no write until flush");
        assert_eq!(eng.flush().unwrap(), 1);
        assert_ne!(digest_file(&li_file).unwrap(), before);
        assert_eq!(eng.flush().unwrap(), 0, "second flush is a no-op");
    }

    #[test]
    fn write_flush_cold_reread() {
        let (dir, _cat) = dataset(0.0005);
        for kind in [EngineKind::Base, EngineKind::Se1, EngineKind::Se2] {
            // Work on a private copy so engines don't see each other's writes.
            let work = tempfile::tempdir().unwrap();
            for entry in std::fs::read_dir(dir.path()).unwrap() {
                let entry = entry.unwrap();
                std::fs::copy(entry.path(), work.path().join(entry.file_name())).unwrap();
            }
            let mut eng = open(work.path(), kind);
            let rel = eng.relation_id("lineitem").unwrap();
            let new_body = first_tuple_patch(&mut eng, rel, 0);
            eng.write_tuple(rel, 0, 0, &new_body).unwrap();
            eng.flush().unwrap();
            drop(eng);

            let mut eng = open(work.path(), kind);
            let rel = eng.relation_id("lineitem").unwrap();
            let page = eng.read_page(rel, 0).unwrap();
            let t = page_tuples(eng.page_bytes(&page))
                .unwrap()
                .next()
                .unwrap()
                .unwrap();
            let mut expect = vec![0u8; t.body_len()];
            expect.copy_from_slice(&new_body);
            assert_eq!(&expect[32..], t.text, "{kind}: updated text visible");
            eng.unpin(page).unwrap();
        }
    }

    #[test]
    fn update_errors() {
        let (dir, _cat) = dataset(0.0005);
        let mut eng = open(dir.path(), EngineKind::Se1);
        let rel = eng.relation_id("lineitem").unwrap();
        let body = first_tuple_patch(&mut eng, rel, 0);
        assert!(matches!(
            eng.write_tuple(rel, 0, 100_000, &body),
            Err(EngineError::TupleNotFound { .. })
        ));
        let mut short = body.clone();
        short.pop();
        assert!(matches!(
            eng.write_tuple(rel, 0, 0, &short),
            Err(EngineError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn cross_engine_file_state_equivalence() {
        // Same logical update sequence under each engine on private copies:
        // post-flush files must be byte-identical.
        let (dir, cat) = dataset(0.001);
        let li = cat.relation("lineitem").unwrap().1.clone();
        let mut file_digests = Vec::new();
        for kind in [EngineKind::Base, EngineKind::Se1, EngineKind::Se2] {
            let work = tempfile::tempdir().unwrap();
            for entry in std::fs::read_dir(dir.path()).unwrap() {
                let entry = entry.unwrap();
                std::fs::copy(entry.path(), work.path().join(entry.file_name())).unwrap();
            }
            let mut eng = Engine::open(
                work.path(),
                EngineOptions {
                    capacity_slots: Some(8), // force evictions mid-sequence
                    ..EngineOptions::new(kind)
                },
            )
            .unwrap();
            let rel = eng.relation_id("lineitem").unwrap();
            let mut rng = crate::storage::SplitMix64::new(2024);
            for _ in 0..200 {
                let page_no = rng.below(li.page_count);
                let patch = first_tuple_patch(&mut eng, rel, page_no);
                eng.write_tuple(rel, page_no, 0, &patch).unwrap();
            }
            eng.flush().unwrap();
            drop(eng);
            file_digests.push(digest_file(&work.path().join(&li.file)).unwrap());
        }
        assert_eq!(file_digests[0], file_digests[1]);
        assert_eq!(file_digests[1], file_digests[2]);
    }

    #[test]
    fn ram_backing_stages_elsewhere() {
        let (dir, _cat) = dataset(0.0005);
        let eng = Engine::open(
            dir.path(),
            EngineOptions {
                backing: Backing::Ram,
                ..EngineOptions::new(EngineKind::Se2)
            },
        )
        .unwrap();
        let p: PathBuf = eng.device_path(0).to_path_buf();
        if eng.warnings().is_empty() {
            assert!(p.starts_with("/dev/shm"));
        }
    }
}
