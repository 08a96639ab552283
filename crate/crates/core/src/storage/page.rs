//! Slotted page codec.
//!
//! A page is exactly `page_size` bytes:
//!
//! ```text
//! offset  len  field
//! 0       4    magic "NVPG"
//! 4       8    FNV-1a 64 checksum over payload (bytes 16..page_size), LE
//! 12      2    tuple_count, LE
//! 14      2    free_offset (bytes from page start), LE
//! 16      ..   payload: length-prefixed tuple bodies, then zero padding
//! ```
//!
//! A tuple body is a fixed 32-byte column block (key u64, quantity u64,
//! price_cents i64, date_ordinal u64, all LE) followed by a variable text
//! remainder. The 2-byte length prefix counts the body only. Tuples never
//! span pages.

use crate::fnv::fnv1a64;
use thiserror::Error;

pub const PAGE_MAGIC: [u8; 4] = *b"NVPG";
pub const PAGE_HEADER_LEN: usize = 16;
pub const TUPLE_FIXED_LEN: usize = 32;
pub const MIN_PAGE_SIZE: usize = 512;
/// free_offset is 16-bit, so a page larger than 32 KiB cannot be represented.
pub const MAX_PAGE_SIZE: usize = 32 * 1024;

#[derive(Debug, Error)]
pub enum StorageError {
    #[error("tuples exceed page capacity: need {needed} payload bytes, page holds {available}")]
    Overflow { needed: usize, available: usize },
    #[error("bad page magic")]
    BadMagic,
    #[error("page checksum mismatch: stored {stored:#018x}, computed {computed:#018x}")]
    BadChecksum { stored: u64, computed: u64 },
    #[error("truncated tuple at page offset {offset}")]
    TruncatedTuple { offset: usize },
    #[error("invalid page size {0}: must be a power of two in {MIN_PAGE_SIZE}..={MAX_PAGE_SIZE}")]
    InvalidPageSize(usize),
    #[error("invalid scale factor {0}: must be finite and >= 0")]
    InvalidScale(f64),
    #[error("catalog: {0}")]
    Catalog(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub fn validate_page_size(page_size: usize) -> Result<(), StorageError> {
    if page_size < MIN_PAGE_SIZE || page_size > MAX_PAGE_SIZE || !page_size.is_power_of_two() {
        return Err(StorageError::InvalidPageSize(page_size));
    }
    Ok(())
}

/// An owned row. `text` is the variable remainder after the fixed columns.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tuple {
    pub key: u64,
    pub quantity: u64,
    pub price_cents: i64,
    pub date_ordinal: u64,
    pub text: Vec<u8>,
}

impl Tuple {
    pub fn body_len(&self) -> usize {
        TUPLE_FIXED_LEN + self.text.len()
    }

    /// Encoded size inside a page, including the 2-byte length prefix.
    pub fn encoded_len(&self) -> usize {
        2 + self.body_len()
    }

    pub fn view(&self) -> TupleView<'_> {
        TupleView {
            key: self.key,
            quantity: self.quantity,
            price_cents: self.price_cents,
            date_ordinal: self.date_ordinal,
            text: &self.text,
        }
    }
}

/// A borrowed row decoded in place from page bytes. Scans use this to avoid
/// per-tuple allocation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TupleView<'a> {
    pub key: u64,
    pub quantity: u64,
    pub price_cents: i64,
    pub date_ordinal: u64,
    pub text: &'a [u8],
}

impl TupleView<'_> {
    pub fn body_len(&self) -> usize {
        TUPLE_FIXED_LEN + self.text.len()
    }

    pub fn to_owned(&self) -> Tuple {
        Tuple {
            key: self.key,
            quantity: self.quantity,
            price_cents: self.price_cents,
            date_ordinal: self.date_ordinal,
            text: self.text.to_vec(),
        }
    }
}

fn write_body(out: &mut [u8], t: &TupleView<'_>) {
    out[0..8].copy_from_slice(&t.key.to_le_bytes());
    out[8..16].copy_from_slice(&t.quantity.to_le_bytes());
    out[16..24].copy_from_slice(&t.price_cents.to_le_bytes());
    out[24..32].copy_from_slice(&t.date_ordinal.to_le_bytes());
    out[TUPLE_FIXED_LEN..].copy_from_slice(t.text);
}

fn parse_body(body: &[u8], offset: usize) -> Result<TupleView<'_>, StorageError> {
    if body.len() < TUPLE_FIXED_LEN {
        return Err(StorageError::TruncatedTuple { offset });
    }
    let u64_at = |i: usize| u64::from_le_bytes(body[i..i + 8].try_into().unwrap());
    Ok(TupleView {
        key: u64_at(0),
        quantity: u64_at(8),
        price_cents: i64::from_le_bytes(body[16..24].try_into().unwrap()),
        date_ordinal: u64_at(24),
        text: &body[TUPLE_FIXED_LEN..],
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PageHeader {
    pub checksum: u64,
    pub tuple_count: u16,
    pub free_offset: u16,
}

/// Validates magic and checksum, then returns the header fields.
pub fn parse_header(page: &[u8]) -> Result<PageHeader, StorageError> {
    if page.len() < PAGE_HEADER_LEN || page[0..4] != PAGE_MAGIC {
        return Err(StorageError::BadMagic);
    }
    let stored = u64::from_le_bytes(page[4..12].try_into().unwrap());
    let computed = fnv1a64(&page[PAGE_HEADER_LEN..]);
    if stored != computed {
        return Err(StorageError::BadChecksum { stored, computed });
    }
    let tuple_count = u16::from_le_bytes(page[12..14].try_into().unwrap());
    let free_offset = u16::from_le_bytes(page[14..16].try_into().unwrap());
    if (free_offset as usize) < PAGE_HEADER_LEN || free_offset as usize > page.len() {
        return Err(StorageError::TruncatedTuple {
            offset: free_offset as usize,
        });
    }
    Ok(PageHeader {
        checksum: stored,
        tuple_count,
        free_offset,
    })
}

/// Encodes `tuples` into a fresh page of exactly `page_size` bytes.
pub fn encode_page(tuples: &[Tuple], page_size: usize) -> Result<Vec<u8>, StorageError> {
    validate_page_size(page_size)?;
    let needed: usize = tuples.iter().map(|t| t.encoded_len()).sum();
    let available = page_size - PAGE_HEADER_LEN;
    if needed > available {
        return Err(StorageError::Overflow { needed, available });
    }
    let mut page = vec![0u8; page_size];
    let mut off = PAGE_HEADER_LEN;
    for t in tuples {
        let body = t.body_len();
        page[off..off + 2].copy_from_slice(&(body as u16).to_le_bytes());
        write_body(&mut page[off + 2..off + 2 + body], &t.view());
        off += 2 + body;
    }
    page[0..4].copy_from_slice(&PAGE_MAGIC);
    page[12..14].copy_from_slice(&(tuples.len() as u16).to_le_bytes());
    page[14..16].copy_from_slice(&(off as u16).to_le_bytes());
    recompute_checksum(&mut page);
    Ok(page)
}

/// Recomputes the payload checksum and stores it in the header. Call after
/// any in-place payload mutation.
pub fn recompute_checksum(page: &mut [u8]) {
    let sum = fnv1a64(&page[PAGE_HEADER_LEN..]);
    page[4..12].copy_from_slice(&sum.to_le_bytes());
}

/// Iterator over the tuples of a validated page.
pub struct PageTupleIter<'a> {
    page: &'a [u8],
    cursor: usize,
    remaining: u16,
    free_offset: usize,
}

impl<'a> Iterator for PageTupleIter<'a> {
    type Item = Result<TupleView<'a>, StorageError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.remaining == 0 {
            // All tuples consumed: the cursor must land exactly on free_offset.
            if self.cursor != self.free_offset {
                self.free_offset = self.cursor; // emit the error only once
                return Some(Err(StorageError::TruncatedTuple {
                    offset: self.cursor,
                }));
            }
            return None;
        }
        self.remaining -= 1;
        let off = self.cursor;
        if off + 2 > self.free_offset {
            self.remaining = 0;
            self.free_offset = self.cursor;
            return Some(Err(StorageError::TruncatedTuple { offset: off }));
        }
        let body = u16::from_le_bytes(self.page[off..off + 2].try_into().unwrap()) as usize;
        if off + 2 + body > self.free_offset {
            self.remaining = 0;
            self.free_offset = self.cursor;
            return Some(Err(StorageError::TruncatedTuple { offset: off }));
        }
        self.cursor = off + 2 + body;
        Some(parse_body(&self.page[off + 2..off + 2 + body], off))
    }
}

/// Validates the header and returns an iterator over the page's tuples.
pub fn page_tuples(page: &[u8]) -> Result<PageTupleIter<'_>, StorageError> {
    let hdr = parse_header(page)?;
    Ok(PageTupleIter {
        page,
        cursor: PAGE_HEADER_LEN,
        remaining: hdr.tuple_count,
        free_offset: hdr.free_offset as usize,
    })
}

/// Decodes all tuples of a page into owned rows.
pub fn decode_page(page: &[u8]) -> Result<Vec<Tuple>, StorageError> {
    page_tuples(page)?
        .map(|r| r.map(|v| v.to_owned()))
        .collect()
}

/// Byte range `(body_offset, body_len)` of tuple `index` within the page, or
/// `None` if the page holds fewer tuples.
pub fn locate_tuple(page: &[u8], index: usize) -> Result<Option<(usize, usize)>, StorageError> {
    let hdr = parse_header(page)?;
    if index >= hdr.tuple_count as usize {
        return Ok(None);
    }
    let mut off = PAGE_HEADER_LEN;
    for _ in 0..index {
        let body = u16::from_le_bytes(page[off..off + 2].try_into().unwrap()) as usize;
        off += 2 + body;
    }
    let body = u16::from_le_bytes(page[off..off + 2].try_into().unwrap()) as usize;
    Ok(Some((off + 2, body)))
}
