//! Backing storage for the ping-pong queue: a control block followed by the
//! two data buffers, either on the heap or in a shared file mapping.

use std::fs::OpenOptions;
use std::io;
use std::path::Path;
use std::sync::atomic::AtomicU64;

use memmap2::MmapMut;

/// Words per control line; each control word sits on its own cache line.
const LINE: usize = 8;

pub(crate) const MAGIC: u64 = 0x5052_4F4D_5054_5131; // "PROMPTQ1"

/// Control word slots (line indices).
pub(crate) mod slot {
    pub const MAGIC: usize = 0;
    pub const BUFFER_WORDS: usize = 1;
    pub const NUM_CONSUMERS: usize = 2;
    pub const FINAL_GEN: usize = 3;
    pub const SEQ: [usize; 2] = [4, 5];
    pub const LEN: [usize; 2] = [6, 7];
    pub const DONE: [usize; 2] = [8, 9];
    pub const DETACHED: usize = 10;
    pub const CLAIMED: usize = 11;
    pub const COUNT: usize = 12;
}

pub(crate) const HEADER_WORDS: usize = slot::COUNT * LINE;

/// Set in the final-generation word when the producer vanished without closing.
pub(crate) const ABORTED: u64 = 1 << 63;

enum Backing {
    Heap(#[allow(dead_code)] Box<[AtomicU64]>),
    File(#[allow(dead_code)] MmapMut),
}

pub(crate) struct Region {
    _backing: Backing,
    base: *mut u64,
    buffer_words: usize,
}

// SAFETY: all cross-thread access to the region goes through atomics on the
// control words; data words are handed between threads by the release/acquire
// protocol in `queue`.
unsafe impl Send for Region {}
unsafe impl Sync for Region {}

impl Region {
    pub(crate) fn total_words(buffer_words: usize) -> usize {
        HEADER_WORDS + 2 * buffer_words
    }

    pub(crate) fn heap(buffer_words: usize) -> Region {
        let words: Box<[AtomicU64]> = (0..Self::total_words(buffer_words))
            .map(|_| AtomicU64::new(0))
            .collect();
        let base = words.as_ptr() as *mut u64;
        Region {
            _backing: Backing::Heap(words),
            base,
            buffer_words,
        }
    }

    /// Creates (truncating) a file of the right size and maps it.
    pub(crate) fn create_file(path: &Path, buffer_words: usize) -> io::Result<Region> {
        let file = OpenOptions::new()
            .read(true)
            .write(true)
            .create(true)
            .truncate(true)
            .open(path)?;
        file.set_len((Self::total_words(buffer_words) * 8) as u64)?;
        // SAFETY: the file was just sized by us; concurrent users coordinate
        // through the atomic control block.
        let mut map = unsafe { MmapMut::map_mut(&file)? };
        let base = map.as_mut_ptr() as *mut u64;
        Ok(Region {
            _backing: Backing::File(map),
            base,
            buffer_words,
        })
    }

    /// Maps an existing queue file created by [`Region::create_file`].
    pub(crate) fn open_file(path: &Path) -> io::Result<Region> {
        let file = OpenOptions::new().read(true).write(true).open(path)?;
        let len = file.metadata()?.len() as usize;
        if len < HEADER_WORDS * 8 {
            return Err(io::Error::new(io::ErrorKind::InvalidData, "queue file too small"));
        }
        // SAFETY: see `create_file`.
        let mut map = unsafe { MmapMut::map_mut(&file)? };
        let base = map.as_mut_ptr() as *mut u64;
        let mut region = Region {
            _backing: Backing::File(map),
            base,
            buffer_words: 0,
        };
        use std::sync::atomic::Ordering::Acquire;
        if region.ctrl(slot::MAGIC).load(Acquire) != MAGIC {
            return Err(io::Error::new(io::ErrorKind::InvalidData, "not a queue file"));
        }
        let buffer_words = region.ctrl(slot::BUFFER_WORDS).load(Acquire) as usize;
        if Self::total_words(buffer_words) * 8 != len {
            return Err(io::Error::new(io::ErrorKind::InvalidData, "queue file size mismatch"));
        }
        region.buffer_words = buffer_words;
        Ok(region)
    }

    #[inline]
    pub(crate) fn ctrl(&self, slot: usize) -> &AtomicU64 {
        debug_assert!(slot < slot::COUNT);
        // SAFETY: the header is in bounds, 8-byte aligned, and only ever
        // accessed atomically.
        unsafe { AtomicU64::from_ptr(self.base.add(slot * LINE)) }
    }

    #[inline]
    pub(crate) fn buffer_words(&self) -> usize {
        self.buffer_words
    }

    /// Start of data buffer `b`.
    #[inline]
    pub(crate) fn buffer_ptr(&self, b: usize) -> *mut u64 {
        debug_assert!(b < 2);
        // SAFETY: both buffers lie within the allocation.
        unsafe { self.base.add(HEADER_WORDS + b * self.buffer_words) }
    }
}
