//! Open-addressing hash map from lattice coordinates to row indices.
//!
//! FNV-1a over the 16 packed key bytes, linear probing, load factor kept at
//! or below 50%. Construction is incremental; lookups on the finished map are
//! lock-free shared reads.

use super::Coord;

const EMPTY: u32 = u32::MAX;

#[derive(Debug, Clone)]
pub struct CoordHashMap {
    /// (packed key, row index); a slot is free while its value is `EMPTY`.
    slots: Vec<(u128, u32)>,
    mask: usize,
    len: usize,
}

#[inline]
fn fnv1a(key: u128) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    let bytes = key.to_le_bytes();
    for &b in &bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

impl CoordHashMap {
    /// Allocates for `entries` keys at no more than 50% load.
    pub fn with_capacity(entries: usize) -> Self {
        let cap = (2 * entries.max(4)).next_power_of_two();
        Self {
            slots: vec![(0, EMPTY); cap],
            mask: cap - 1,
            len: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Inserts `coord -> value`. Returns the previous value if the key was
    /// already present (and leaves the map unchanged in that case).
    pub fn insert(&mut self, coord: Coord, value: u32) -> Option<u32> {
        debug_assert_ne!(value, EMPTY);
        if (self.len + 1) * 2 > self.slots.len() {
            self.grow();
        }
        let key = coord.packed();
        let mut i = fnv1a(key) as usize & self.mask;
        loop {
            let (k, v) = self.slots[i];
            if v == EMPTY {
                self.slots[i] = (key, value);
                self.len += 1;
                return None;
            }
            if k == key {
                return Some(v);
            }
            i = (i + 1) & self.mask;
        }
    }

    /// Looks up `coord`; `None` is the distinguished not-found result.
    #[inline]
    pub fn query(&self, coord: &Coord) -> Option<u32> {
        let key = coord.packed();
        let mut i = fnv1a(key) as usize & self.mask;
        loop {
            let (k, v) = self.slots[i];
            if v == EMPTY {
                return None;
            }
            if k == key {
                return Some(v);
            }
            i = (i + 1) & self.mask;
        }
    }

    fn grow(&mut self) {
        let new_cap = self.slots.len() * 2;
        let old = std::mem::replace(&mut self.slots, vec![(0, EMPTY); new_cap]);
        self.mask = self.slots.len() - 1;
        for (key, value) in old {
            if value == EMPTY {
                continue;
            }
            let mut i = fnv1a(key) as usize & self.mask;
            while self.slots[i].1 != EMPTY {
                i = (i + 1) & self.mask;
            }
            self.slots[i] = (key, value);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn insert_query_and_duplicate_detection() {
        let mut map = CoordHashMap::with_capacity(2);
        assert_eq!(map.insert(Coord::new(0, 1, 2, 3), 0), None);
        assert_eq!(map.insert(Coord::new(1, -1, -2, -3), 1), None);
        assert_eq!(map.insert(Coord::new(0, 1, 2, 3), 9), Some(0));
        assert_eq!(map.query(&Coord::new(0, 1, 2, 3)), Some(0));
        assert_eq!(map.query(&Coord::new(1, -1, -2, -3)), Some(1));
        assert_eq!(map.query(&Coord::new(9, 9, 9, 9)), None);
        assert_eq!(map.len(), 2);
    }

    #[test]
    fn growth_preserves_entries() {
        let mut map = CoordHashMap::with_capacity(1);
        for i in 0..1000 {
            map.insert(Coord::new(0, i, -i, i * 7), i as u32);
        }
        for i in 0..1000 {
            assert_eq!(map.query(&Coord::new(0, i, -i, i * 7)), Some(i as u32));
        }
    }
}
