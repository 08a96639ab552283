//! Emulated storage device.
//!
//! One backing file, two facades:
//!
//! * block facade: `block_read` / `block_write` move whole pages through a
//!   single staging frame (the kernel-buffer analog), so every block
//!   operation costs exactly two byte-copies, plus an injected per-block
//!   latency for the disk profile;
//! * mapped facade: `mapped_copy` (one copy, no latency), `mapped_ref`
//!   (zero copies, returns a read-only view aliasing the mapping), and
//!   `mapped_write` (one copy, the write path used by the mapped engines).
//!
//! Copy counters are exact: 2 / 1 / 0 per page for the three read paths.
//! Injected latency below 50us is a calibrated busy-wait, not a sleep, to
//! stay clear of scheduler quantization.

use std::fs::{File, OpenOptions};
use std::os::unix::io::AsRawFd;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DeviceError {
    #[error("device i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("file length {file_len} is not a multiple of page size {page_size}")]
    Misaligned { file_len: u64, page_size: usize },
    #[error("page {page_no} out of range (device holds {page_count} pages)")]
    OutOfRange { page_no: u64, page_count: u64 },
    #[error("device is read-only")]
    ReadOnly,
    #[error("mapped facade disabled on this device")]
    MappingDisabled,
    #[error("block facade disabled on this device")]
    BlockIoDisabled,
    #[error("device is closed")]
    Closed,
}

/// Storage substrate label, used for reporting and config.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProfileKind {
    DiskEmu,
    NvmEmu,
}

impl ProfileKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ProfileKind::DiskEmu => "disk_emu",
            ProfileKind::NvmEmu => "nvm_emu",
        }
    }
}

/// Per-block injected latency. The disk default derives from a 75k read
/// iops / 36k write iops device: 1s/75000 = 13333ns, 1s/36000 = 27777ns.
#[derive(Debug, Clone, Copy)]
pub struct LatencyProfile {
    per_block_read: Duration,
    per_block_write: Duration,
    label: ProfileKind,
}

pub const DISK_EMU_READ_NS: u64 = 1_000_000_000 / 75_000;
pub const DISK_EMU_WRITE_NS: u64 = 1_000_000_000 / 36_000;

impl LatencyProfile {
    pub fn disk_emu() -> Self {
        LatencyProfile {
            per_block_read: Duration::from_nanos(DISK_EMU_READ_NS),
            per_block_write: Duration::from_nanos(DISK_EMU_WRITE_NS),
            label: ProfileKind::DiskEmu,
        }
    }

    /// Direct-access profile: reads cost nothing beyond the copy itself.
    /// Write latency is configurable; it defaults to zero.
    pub fn nvm_emu() -> Self {
        LatencyProfile {
            per_block_read: Duration::ZERO,
            per_block_write: Duration::ZERO,
            label: ProfileKind::NvmEmu,
        }
    }

    pub fn disk_emu_with(read: Duration, write: Duration) -> Self {
        LatencyProfile {
            per_block_read: read,
            per_block_write: write,
            label: ProfileKind::DiskEmu,
        }
    }

    /// nvm_emu keeps per_block_read pinned at zero by construction.
    pub fn nvm_emu_with_write(write: Duration) -> Self {
        LatencyProfile {
            per_block_read: Duration::ZERO,
            per_block_write: write,
            label: ProfileKind::NvmEmu,
        }
    }

    pub fn per_block_read(&self) -> Duration {
        self.per_block_read
    }

    pub fn per_block_write(&self) -> Duration {
        self.per_block_write
    }

    pub fn label(&self) -> ProfileKind {
        self.label
    }
}

/// Busy-wait for short targets; sleep only for the bulk of long ones.
fn inject_latency(target: Duration) {
    if target.is_zero() {
        return;
    }
    let start = Instant::now();
    const SPIN_CEILING: Duration = Duration::from_micros(50);
    if target > SPIN_CEILING {
        std::thread::sleep(target - SPIN_CEILING);
    }
    while start.elapsed() < target {
        std::hint::spin_loop();
    }
}

/// A shared, page-aligned mapping of the backing file. Lives until the last
/// handle (device, page view, or prefetch region) drops, so views never
/// dangle. Writes go through raw pointers on the owning thread only; helper
/// threads read with volatile loads.
pub struct RegionMap {
    ptr: *mut u8,
    len: usize,
}

unsafe impl Send for RegionMap {}
unsafe impl Sync for RegionMap {}

impl RegionMap {
    fn map(file: &File, len: usize, writable: bool) -> std::io::Result<RegionMap> {
        if len == 0 {
            return Ok(RegionMap {
                ptr: std::ptr::null_mut(),
                len: 0,
            });
        }
        let prot = libc::PROT_READ | if writable { libc::PROT_WRITE } else { 0 };
        let ptr = unsafe {
            libc::mmap(
                std::ptr::null_mut(),
                len,
                prot,
                libc::MAP_SHARED,
                file.as_raw_fd(),
                0,
            )
        };
        if ptr == libc::MAP_FAILED {
            return Err(std::io::Error::last_os_error());
        }
        Ok(RegionMap {
            ptr: ptr as *mut u8,
            len,
        })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub(crate) fn as_ptr(&self) -> *const u8 {
        self.ptr
    }

    /// Caller must ensure the range is in bounds and not concurrently
    /// written.
    pub(crate) unsafe fn slice(&self, offset: usize, len: usize) -> &[u8] {
        debug_assert!(offset + len <= self.len);
        std::slice::from_raw_parts(self.ptr.add(offset), len)
    }

    /// Raw write into the mapping. Exclusive-writer contract: only the
    /// device-owning thread calls this, and never on a page with a live
    /// redirected view.
    pub(crate) fn write_at(&self, offset: usize, src: &[u8]) {
        debug_assert!(offset + src.len() <= self.len);
        unsafe {
            std::ptr::copy_nonoverlapping(src.as_ptr(), self.ptr.add(offset), src.len());
        }
    }

    fn sync(&self) -> std::io::Result<()> {
        if self.len == 0 {
            return Ok(());
        }
        let rc = unsafe { libc::msync(self.ptr as *mut libc::c_void, self.len, libc::MS_SYNC) };
        if rc != 0 {
            return Err(std::io::Error::last_os_error());
        }
        Ok(())
    }
}

impl Drop for RegionMap {
    fn drop(&mut self) {
        if !self.ptr.is_null() {
            unsafe {
                libc::munmap(self.ptr as *mut libc::c_void, self.len);
            }
        }
    }
}

impl std::fmt::Debug for RegionMap {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RegionMap")
            .field("ptr", &self.ptr)
            .field("len", &self.len)
            .finish()
    }
}

/// Read-only view of one page inside the mapped region. Holding the view
/// keeps the mapping alive.
#[derive(Clone)]
pub struct PageView {
    region: Arc<RegionMap>,
    offset: usize,
    len: usize,
}

impl PageView {
    pub fn bytes(&self) -> &[u8] {
        unsafe { self.region.slice(self.offset, self.len) }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn as_ptr(&self) -> *const u8 {
        unsafe { self.region.as_ptr().add(self.offset) }
    }
}

impl std::fmt::Debug for PageView {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PageView")
            .field("offset", &self.offset)
            .field("len", &self.len)
            .finish()
    }
}

/// Whole-region handle handed to the prefetch library. Helpers only read.
#[derive(Clone)]
pub struct RegionHandle {
    region: Arc<RegionMap>,
}

impl RegionHandle {
    pub fn len(&self) -> u64 {
        self.region.len() as u64
    }

    pub fn is_empty(&self) -> bool {
        self.region.is_empty()
    }

    /// Volatile byte reads every `stride` bytes plus the final byte.
    /// Returns the number of strided touches, `ceil(len / stride)`.
    /// Bounds are the caller's responsibility (checked at enqueue).
    pub(crate) fn touch(&self, base: u64, len: u64, stride: usize) -> u64 {
        debug_assert!(len > 0 && base + len <= self.len());
        let ptr = self.region.as_ptr();
        let mut sum = 0u64;
        let mut touched = 0u64;
        let mut off = base as usize;
        let end = (base + len) as usize;
        while off < end {
            sum = sum.wrapping_add(unsafe { ptr.add(off).read_volatile() } as u64);
            touched += 1;
            off += stride;
        }
        sum = sum.wrapping_add(unsafe { ptr.add(end - 1).read_volatile() } as u64);
        std::hint::black_box(sum);
        touched
    }
}

impl std::fmt::Debug for RegionHandle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RegionHandle")
            .field("len", &self.len())
            .finish()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct DeviceOptions {
    pub read_only: bool,
    pub block_io_enabled: bool,
    pub mapped_enabled: bool,
}

impl Default for DeviceOptions {
    fn default() -> Self {
        DeviceOptions {
            read_only: false,
            block_io_enabled: true,
            mapped_enabled: true,
        }
    }
}

/// Exact data-movement accounting, maintained by the device.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CopyCounters {
    /// Whole-page byte-copy operations.
    pub copies: u64,
    pub bytes_copied: u64,
    /// Wall time spent inside copy/latency paths (the data-movement clock).
    pub dm_ns: u64,
}

pub struct Device {
    path: PathBuf,
    _file: File,
    region: Arc<RegionMap>,
    page_size: usize,
    page_count: u64,
    latency: LatencyProfile,
    staging: Box<[u8]>,
    opts: DeviceOptions,
    counters: CopyCounters,
    open: bool,
}

impl Device {
    /// Opens an existing file whose length must be a multiple of `page_size`.
    pub fn open(
        path: &Path,
        page_size: usize,
        latency: LatencyProfile,
        opts: DeviceOptions,
    ) -> Result<Device, DeviceError> {
        assert!(page_size > 0);
        let file = OpenOptions::new()
            .read(true)
            .write(!opts.read_only)
            .open(path)?;
        let file_len = file.metadata()?.len();
        if file_len % page_size as u64 != 0 {
            return Err(DeviceError::Misaligned {
                file_len,
                page_size,
            });
        }
        let region = RegionMap::map(&file, file_len as usize, !opts.read_only)?;
        Ok(Device {
            path: path.to_path_buf(),
            _file: file,
            region: Arc::new(region),
            page_size,
            page_count: file_len / page_size as u64,
            latency,
            staging: vec![0u8; page_size].into_boxed_slice(),
            opts,
            counters: CopyCounters::default(),
            open: true,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn page_size(&self) -> usize {
        self.page_size
    }

    pub fn page_count(&self) -> u64 {
        self.page_count
    }

    pub fn region_len(&self) -> u64 {
        self.region.len() as u64
    }

    pub fn latency(&self) -> &LatencyProfile {
        &self.latency
    }

    pub fn counters(&self) -> CopyCounters {
        self.counters
    }

    pub fn region_handle(&self) -> RegionHandle {
        RegionHandle {
            region: Arc::clone(&self.region),
        }
    }

    fn check_open(&self) -> Result<(), DeviceError> {
        if self.open {
            Ok(())
        } else {
            Err(DeviceError::Closed)
        }
    }

    fn check_range(&self, page_no: u64) -> Result<usize, DeviceError> {
        if page_no >= self.page_count {
            return Err(DeviceError::OutOfRange {
                page_no,
                page_count: self.page_count,
            });
        }
        Ok(page_no as usize * self.page_size)
    }

    fn account(&mut self, copies: u64, started: Instant) {
        self.counters.copies += copies;
        self.counters.bytes_copied += copies * self.page_size as u64;
        self.counters.dm_ns += started.elapsed().as_nanos() as u64;
    }

    /// Block-facade read: region -> staging -> dest (two copies), one
    /// injected per-block read latency.
    pub fn block_read(&mut self, page_no: u64, dest: &mut [u8]) -> Result<(), DeviceError> {
        self.check_open()?;
        if !self.opts.block_io_enabled {
            return Err(DeviceError::BlockIoDisabled);
        }
        let off = self.check_range(page_no)?;
        assert_eq!(dest.len(), self.page_size);
        let started = Instant::now();
        let src = unsafe { self.region.slice(off, self.page_size) };
        self.staging.copy_from_slice(src);
        inject_latency(self.latency.per_block_read);
        dest.copy_from_slice(&self.staging);
        self.account(2, started);
        Ok(())
    }

    /// Block-facade write: src -> staging -> region (two copies), one
    /// injected per-block write latency.
    pub fn block_write(&mut self, page_no: u64, src: &[u8]) -> Result<(), DeviceError> {
        self.check_open()?;
        if self.opts.read_only {
            return Err(DeviceError::ReadOnly);
        }
        if !self.opts.block_io_enabled {
            return Err(DeviceError::BlockIoDisabled);
        }
        let off = self.check_range(page_no)?;
        assert_eq!(src.len(), self.page_size);
        let started = Instant::now();
        self.staging.copy_from_slice(src);
        inject_latency(self.latency.per_block_write);
        self.region.write_at(off, &self.staging);
        self.account(2, started);
        Ok(())
    }

    /// Mapped-facade read into a caller frame: one copy, no latency.
    pub fn mapped_copy(&mut self, page_no: u64, dest: &mut [u8]) -> Result<(), DeviceError> {
        self.check_open()?;
        if !self.opts.mapped_enabled {
            return Err(DeviceError::MappingDisabled);
        }
        let off = self.check_range(page_no)?;
        assert_eq!(dest.len(), self.page_size);
        let started = Instant::now();
        dest.copy_from_slice(unsafe { self.region.slice(off, self.page_size) });
        self.account(1, started);
        Ok(())
    }

    /// Zero-copy read: a view aliasing the mapped page. No counter changes.
    pub fn mapped_ref(&self, page_no: u64) -> Result<PageView, DeviceError> {
        self.check_open()?;
        if !self.opts.mapped_enabled {
            return Err(DeviceError::MappingDisabled);
        }
        let off = self.check_range(page_no)?;
        Ok(PageView {
            region: Arc::clone(&self.region),
            offset: off,
            len: self.page_size,
        })
    }

    /// Mapped-facade write: one copy frame -> region, no staging detour.
    pub fn mapped_write(&mut self, page_no: u64, src: &[u8]) -> Result<(), DeviceError> {
        self.check_open()?;
        if self.opts.read_only {
            return Err(DeviceError::ReadOnly);
        }
        if !self.opts.mapped_enabled {
            return Err(DeviceError::MappingDisabled);
        }
        let off = self.check_range(page_no)?;
        assert_eq!(src.len(), self.page_size);
        let started = Instant::now();
        inject_latency(self.latency.per_block_write);
        self.region.write_at(off, src);
        self.account(1, started);
        Ok(())
    }

    /// Makes all written bytes durable in the backing file.
    pub fn flush_region(&mut self) -> Result<(), DeviceError> {
        self.check_open()?;
        if !self.opts.read_only {
            self.region.sync()?;
        }
        Ok(())
    }

    /// Marks the device closed. Outstanding views stay valid (they hold the
    /// mapping), but every device operation now fails.
    pub fn close(&mut self) -> Result<(), DeviceError> {
        self.check_open()?;
        if !self.opts.read_only {
            self.region.sync()?;
        }
        self.open = false;
        Ok(())
    }
}

impl std::fmt::Debug for Device {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Device")
            .field("path", &self.path)
            .field("page_size", &self.page_size)
            .field("page_count", &self.page_count)
            .field("profile", &self.latency.label().as_str())
            .field("open", &self.open)
            .finish()
    }
}

/// Where heap files live for a run: copied to a RAM-backed tmpfs (the
/// direct-access emulation) or used in place.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Backing {
    Ram,
    File,
}

/// A staged copy of the dataset. Removes the copy on drop.
#[derive(Debug)]
pub struct StagedData {
    pub dir: PathBuf,
    pub warnings: Vec<String>,
    cleanup: bool,
}

impl Drop for StagedData {
    fn drop(&mut self) {
        if self.cleanup {
            let _ = std::fs::remove_dir_all(&self.dir);
        }
    }
}

static STAGE_COUNTER: AtomicU64 = AtomicU64::new(0);

/// For `Backing::Ram`, copies the heap files named by `files` into a fresh
/// directory under /dev/shm; falls back to using `src_dir` in place (with a
/// recorded warning) when no RAM-backed filesystem is available.
pub fn stage_dataset(
    src_dir: &Path,
    files: &[String],
    backing: Backing,
) -> Result<StagedData, DeviceError> {
    match backing {
        Backing::File => Ok(StagedData {
            dir: src_dir.to_path_buf(),
            warnings: Vec::new(),
            cleanup: false,
        }),
        Backing::Ram => {
            let shm = Path::new("/dev/shm");
            if !shm.is_dir() {
                return Ok(StagedData {
                    dir: src_dir.to_path_buf(),
                    warnings: vec![
                        "no RAM-backed filesystem at /dev/shm; using backing files in place"
                            .to_string(),
                    ],
                    cleanup: false,
                });
            }
            let dir = shm.join(format!(
                "nvmse-{}-{}",
                std::process::id(),
                STAGE_COUNTER.fetch_add(1, Ordering::Relaxed)
            ));
            std::fs::create_dir_all(&dir)?;
            for f in files {
                std::fs::copy(src_dir.join(f), dir.join(f))?;
            }
            Ok(StagedData {
                dir,
                warnings: Vec::new(),
                cleanup: true,
            })
        }
    }
}
