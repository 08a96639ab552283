//! On-disk format: slotted pages, the heap-file tuple layout, the relation
//! catalog, and the deterministic dataset generator.

mod catalog;
mod gen;
mod page;

pub use catalog::{Catalog, RelationMeta, CATALOG_FILE};
pub use gen::{
    generate_dataset, ScaleSpec, SplitMix64, LINEITEM, LINEITEM_BASE_ROWS, ORDERS,
    ORDERS_BASE_ROWS,
};
pub use page::{
    decode_page, encode_page, locate_tuple, page_tuples, parse_header, recompute_checksum,
    validate_page_size, PageHeader, PageTupleIter, StorageError, Tuple, TupleView,
    MAX_PAGE_SIZE, MIN_PAGE_SIZE, PAGE_HEADER_LEN, PAGE_MAGIC, TUPLE_FIXED_LEN,
};

use std::path::Path;

/// Decodes every tuple of a heap file by reading it directly, bypassing the
/// device and buffer layers. Serves as the independent data path for oracle
/// tests and row-count checks.
pub fn scan_heap_file(path: &Path, page_size: usize) -> Result<Vec<Tuple>, StorageError> {
    let bytes = std::fs::read(path)?;
    if bytes.len() % page_size != 0 {
        return Err(StorageError::TruncatedTuple { offset: bytes.len() });
    }
    let mut out = Vec::new();
    for page in bytes.chunks(page_size) {
        out.extend(decode_page(page)?);
    }
    Ok(out)
}
