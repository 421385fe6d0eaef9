use serde::{Deserialize, Serialize};

use crate::isa::Word;

/// Set-associative LRU cache holding tags only.
///
/// Each set lists its tags most-recently-used first.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CacheState {
    pub sets: Vec<Vec<Word>>,
    pub ways: usize,
    /// Line size in words.
    pub line: usize,
}

impl CacheState {
    pub fn new(sets: usize, ways: usize, line: usize) -> Self {
        CacheState { sets: vec![Vec::with_capacity(ways); sets], ways, line }
    }

    /// `(set, tag)` of a word address.
    pub fn locate(&self, addr: Word) -> (usize, Word) {
        let line = addr as usize / self.line;
        let nsets = self.sets.len();
        (line % nsets, (line / nsets) as Word)
    }

    /// Touches the line holding `addr`. Returns the `(set, tag)` inserted on a miss.
    pub fn access(&mut self, addr: Word) -> Option<(usize, Word)> {
        let (set, tag) = self.locate(addr);
        let entries = &mut self.sets[set];
        if let Some(pos) = entries.iter().position(|t| *t == tag) {
            entries[..=pos].rotate_right(1);
            None
        } else {
            entries.insert(0, tag);
            entries.truncate(self.ways);
            Some((set, tag))
        }
    }

    pub fn contains(&self, addr: Word) -> bool {
        let (set, tag) = self.locate(addr);
        self.sets[set].contains(&tag)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn set_and_tag_arithmetic() {
        let c = CacheState::new(4, 2, 4);
        assert_eq!(c.locate(4), (1, 0));
        assert_eq!(c.locate(3), (0, 0));
        assert_eq!(c.locate(16), (0, 1));
        assert_eq!(c.locate(44), (3, 2));
    }

    #[test]
    fn lru_eviction_and_refresh() {
        let mut c = CacheState::new(1, 2, 1);
        assert_eq!(c.access(0), Some((0, 0)));
        assert_eq!(c.access(1), Some((0, 1)));
        assert_eq!(c.sets[0], vec![1, 0]);
        assert_eq!(c.access(0), None);
        assert_eq!(c.sets[0], vec![0, 1]);
        assert_eq!(c.access(2), Some((0, 2)));
        // 1 was least recently used.
        assert_eq!(c.sets[0], vec![2, 0]);
    }

    #[test]
    fn same_line_shares_tag() {
        let mut c = CacheState::new(4, 2, 4);
        c.access(8);
        assert!(c.contains(11));
        assert!(!c.contains(12));
    }
}
