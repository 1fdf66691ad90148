//! Byte-granular shadow memory.
//!
//! Every application byte maps to one metadata record of `P = size_of::<T>()`
//! bytes. Records live in fixed-size pages that are allocated on first write
//! and found through a hash directory keyed by page number, so memory is
//! proportional to the footprint actually touched.

use rustc_hash::FxHashMap;

pub const DEFAULT_PAGE_SHIFT: u32 = 16;

pub struct ShadowMemory<T> {
    page_shift: u32,
    directory: FxHashMap<u64, Box<[T]>>,
}

impl<T: Copy + Default> Default for ShadowMemory<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Copy + Default> ShadowMemory<T> {
    const RECORD_BYTES: usize = {
        let p = std::mem::size_of::<T>();
        assert!(
            p == 1 || p == 2 || p == 4 || p == 8 || p == 16,
            "shadow records must be 1, 2, 4, 8 or 16 bytes"
        );
        p
    };

    pub fn new() -> Self {
        Self::with_page_shift(DEFAULT_PAGE_SHIFT)
    }

    /// Pages cover `1 << page_shift` application bytes.
    pub fn with_page_shift(page_shift: u32) -> Self {
        let _ = Self::RECORD_BYTES;
        assert!((4..=30).contains(&page_shift), "page shift out of range");
        ShadowMemory {
            page_shift,
            directory: FxHashMap::default(),
        }
    }

    #[inline]
    fn split(&self, addr: u64) -> (u64, usize) {
        (addr >> self.page_shift, (addr & ((1 << self.page_shift) - 1)) as usize)
    }

    fn page_mut(&mut self, page: u64) -> &mut [T] {
        let len = 1usize << self.page_shift;
        self.directory
            .entry(page)
            .or_insert_with(|| vec![T::default(); len].into_boxed_slice())
    }

    /// Record for `addr`; untouched bytes read as `T::default()`.
    #[inline]
    pub fn get(&self, addr: u64) -> T {
        let (page, off) = self.split(addr);
        match self.directory.get(&page) {
            Some(p) => p[off],
            None => T::default(),
        }
    }

    /// Mutable record for `addr`, allocating its page.
    #[inline]
    pub fn get_mut(&mut self, addr: u64) -> &mut T {
        let (page, off) = self.split(addr);
        &mut self.page_mut(page)[off]
    }

    #[inline]
    pub fn set(&mut self, addr: u64, value: T) {
        *self.get_mut(addr) = value;
    }

    /// Calls `f(addr, record)` for every byte of `[addr, addr + len)`,
    /// allocating pages as needed. Addresses wrap at the top of the space.
    pub fn for_each_mut(&mut self, addr: u64, len: u64, mut f: impl FnMut(u64, &mut T)) {
        let mut a = addr;
        let mut left = len;
        while left > 0 {
            let (page, off) = self.split(a);
            let in_page = ((1u64 << self.page_shift) - off as u64).min(left);
            let slice = &mut self.page_mut(page)[off..off + in_page as usize];
            for (i, rec) in slice.iter_mut().enumerate() {
                f(a.wrapping_add(i as u64), rec);
            }
            a = a.wrapping_add(in_page);
            left -= in_page;
        }
    }

    /// Writes `value` over `[addr, addr + len)`.
    pub fn fill(&mut self, addr: u64, len: u64, value: T) {
        let mut a = addr;
        let mut left = len;
        while left > 0 {
            let (page, off) = self.split(a);
            let in_page = ((1u64 << self.page_shift) - off as u64).min(left);
            self.page_mut(page)[off..off + in_page as usize].fill(value);
            a = a.wrapping_add(in_page);
            left -= in_page;
        }
    }

    /// Resets `[addr, addr + len)` to the default record without allocating.
    pub fn clear(&mut self, addr: u64, len: u64) {
        let mut a = addr;
        let mut left = len;
        while left > 0 {
            let (page, off) = self.split(a);
            let in_page = ((1u64 << self.page_shift) - off as u64).min(left);
            if let Some(p) = self.directory.get_mut(&page) {
                p[off..off + in_page as usize].fill(T::default());
            }
            a = a.wrapping_add(in_page);
            left -= in_page;
        }
    }

    pub fn page_shift(&self) -> u32 {
        self.page_shift
    }

    pub fn record_bytes(&self) -> usize {
        Self::RECORD_BYTES
    }

    pub fn page_count(&self) -> usize {
        self.directory.len()
    }

    /// Bytes held by shadow pages.
    pub fn page_bytes(&self) -> usize {
        self.directory.len() * (Self::RECORD_BYTES << self.page_shift)
    }

    /// Approximate bytes held by the directory itself.
    pub fn directory_bytes(&self) -> usize {
        self.directory.capacity() * (std::mem::size_of::<u64>() + std::mem::size_of::<Box<[T]>>() + 1)
    }

    pub fn resident_bytes(&self) -> usize {
        self.page_bytes() + self.directory_bytes()
    }
}
