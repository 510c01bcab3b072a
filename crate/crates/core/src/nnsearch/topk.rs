use super::rank_order;
use std::cmp::Ordering;

/// Bounded top-K selection over `(score, index)` pairs in caller-provided
/// storage. Keeps a binary heap whose root is the current worst entry, so the
/// buffer can come from an arena and selection never allocates.
pub struct TopK<'a> {
    buf: &'a mut [(f64, u32)],
    len: usize,
}

impl<'a> TopK<'a> {
    /// Capacity is `buf.len()`.
    pub fn new(buf: &'a mut [(f64, u32)]) -> Self {
        TopK { buf, len: 0 }
    }

    #[inline]
    fn worse(a: (f64, u32), b: (f64, u32)) -> bool {
        // `a` ranks after `b`.
        rank_order(a, b) == Ordering::Greater
    }

    #[inline]
    pub fn offer(&mut self, score: f64, index: u32) {
        let cap = self.buf.len();
        if cap == 0 {
            return;
        }
        let item = (score, index);
        if self.len < cap {
            let mut i = self.len;
            self.buf[i] = item;
            self.len += 1;
            while i > 0 {
                let parent = (i - 1) / 2;
                if Self::worse(self.buf[i], self.buf[parent]) {
                    self.buf.swap(i, parent);
                    i = parent;
                } else {
                    break;
                }
            }
        } else if Self::worse(self.buf[0], item) {
            self.buf[0] = item;
            self.sift_down(0);
        }
    }

    fn sift_down(&mut self, mut i: usize) {
        let n = self.len;
        loop {
            let l = 2 * i + 1;
            if l >= n {
                break;
            }
            let r = l + 1;
            let mut w = l;
            if r < n && Self::worse(self.buf[r], self.buf[l]) {
                w = r;
            }
            if Self::worse(self.buf[w], self.buf[i]) {
                self.buf.swap(i, w);
                i = w;
            } else {
                break;
            }
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Selected entries, best first.
    pub fn into_sorted(self) -> &'a [(f64, u32)] {
        let out = &mut self.buf[..self.len];
        out.sort_unstable_by(|a, b| rank_order(*a, *b));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn matches_full_sort(scores in proptest::collection::vec(-3i32..3, 0..60), k in 0usize..20) {
            // Small integer scores force many ties.
            let mut buf = vec![(0.0, 0); k.min(scores.len())];
            let mut top = TopK::new(&mut buf);
            for (i, s) in scores.iter().enumerate() {
                top.offer(f64::from(*s), i as u32);
            }
            let got: Vec<u32> = top.into_sorted().iter().map(|x| x.1).collect();

            let mut all: Vec<(f64, u32)> = scores.iter().enumerate().map(|(i, s)| (f64::from(*s), i as u32)).collect();
            all.sort_by(|a, b| rank_order(*a, *b));
            let expect: Vec<u32> = all.iter().take(k).map(|x| x.1).collect();
            prop_assert_eq!(got, expect);
        }
    }
}
