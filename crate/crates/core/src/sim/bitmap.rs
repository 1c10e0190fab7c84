use serde::{Deserialize, Serialize};

/// Set of owned piece indices with a cached cardinality.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Bitmap {
    words: Vec<u64>,
    len: u32,
    count: u32,
}

impl Bitmap {
    pub fn empty(len: u32) -> Self {
        Self {
            words: vec![0; (len as usize).div_ceil(64)],
            len,
            count: 0,
        }
    }

    pub fn full(len: u32) -> Self {
        let mut b = Self::empty(len);
        for w in b.words.iter_mut() {
            *w = u64::MAX;
        }
        let tail = len % 64;
        if tail != 0 {
            if let Some(last) = b.words.last_mut() {
                *last = (1u64 << tail) - 1;
            }
        }
        b.count = len;
        b
    }

    /// Number of pieces in the content.
    pub fn len(&self) -> u32 {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    /// Number of owned pieces.
    pub fn count(&self) -> u32 {
        self.count
    }

    pub fn is_complete(&self) -> bool {
        self.count == self.len
    }

    pub fn contains(&self, piece: u32) -> bool {
        piece < self.len && self.words[(piece / 64) as usize] & (1 << (piece % 64)) != 0
    }

    /// Returns `false` if the piece was already present.
    pub fn insert(&mut self, piece: u32) -> bool {
        assert!(piece < self.len, "piece {piece} out of range {}", self.len);
        let w = &mut self.words[(piece / 64) as usize];
        let bit = 1 << (piece % 64);
        if *w & bit != 0 {
            return false;
        }
        *w |= bit;
        self.count += 1;
        true
    }

    /// Returns `false` if the piece was absent.
    pub fn remove(&mut self, piece: u32) -> bool {
        if piece >= self.len {
            return false;
        }
        let w = &mut self.words[(piece / 64) as usize];
        let bit = 1 << (piece % 64);
        if *w & bit == 0 {
            return false;
        }
        *w &= !bit;
        self.count -= 1;
        true
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    /// `|other \ self|`: pieces `other` holds that `self` lacks.
    pub fn missing_from(&self, other: &Bitmap) -> u32 {
        self.words
            .iter()
            .zip(&other.words)
            .map(|(mine, theirs)| (theirs & !mine).count_ones())
            .sum()
    }

    pub fn is_subset_of(&self, other: &Bitmap) -> bool {
        other.missing_from(self) == 0
    }

    pub fn iter(&self) -> impl Iterator<Item = u32> + '_ {
        self.words.iter().enumerate().flat_map(|(wi, &w)| {
            let mut bits = w;
            std::iter::from_fn(move || {
                if bits == 0 {
                    return None;
                }
                let tz = bits.trailing_zeros();
                bits &= bits - 1;
                Some(wi as u32 * 64 + tz)
            })
        })
    }
}
