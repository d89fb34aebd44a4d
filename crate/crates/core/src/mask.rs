//! Binary attention-visibility matrices.
//!
//! Square masks are laid out over the sentinel-padded sequence: position 0 is
//! the BEGIN sentinel, positions `1..=n` are the real tokens and `n + 1` is the
//! END sentinel. Span arguments (`start`, `end`) are always real-token indices
//! (0-based, inclusive), as in the corpus format.

use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskKind {
    Global,
    Focus,
    Mention,
    Neighbor,
    Custom,
}

/// `rows x cols` visibility matrix; `true` means the column may be attended.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskMatrix {
    kind: MaskKind,
    rows: usize,
    cols: usize,
    bits: Vec<bool>,
}

impl MaskMatrix {
    pub fn from_bits(kind: MaskKind, rows: usize, cols: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != rows * cols {
            return Err(Error::shape(
                "mask",
                format!("{rows}x{cols} mask needs {} bits, got {}", rows * cols, bits.len()),
            ));
        }
        Ok(MaskMatrix {
            kind,
            rows,
            cols,
            bits,
        })
    }

    /// Stacks independent rows (each of the same width) into one mask.
    pub fn from_rows(kind: MaskKind, rows: &[Vec<bool>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("mask", "ragged mask rows"));
        }
        Self::from_bits(kind, rows.len(), cols, rows.concat())
    }

    /// Everything visible over `len` positions.
    pub fn global(len: usize) -> Self {
        MaskMatrix {
            kind: MaskKind::Global,
            rows: len,
            cols: len,
            bits: vec![true; len * len],
        }
    }

    /// Global mask over `len` real positions embedded in a `padded_len`
    /// sequence. Padding columns are never visible; padding rows fall back to
    /// themselves.
    pub fn global_padded(len: usize, padded_len: usize) -> Self {
        let mut bits = vec![false; padded_len * padded_len];
        for i in 0..len {
            bits[i * padded_len..i * padded_len + len].fill(true);
        }
        let mut mask = MaskMatrix {
            kind: MaskKind::Global,
            rows: padded_len,
            cols: padded_len,
            bits,
        };
        mask.apply_self_fallback();
        mask
    }

    pub fn identity(len: usize) -> Self {
        let mut bits = vec![false; len * len];
        for i in 0..len {
            bits[i * len + i] = true;
        }
        MaskMatrix {
            kind: MaskKind::Custom,
            rows: len,
            cols: len,
            bits,
        }
    }

    /// Mention-focus mask over `n = entity_prob.len()` real tokens.
    ///
    /// With `E = { j : p[j] >= tau }`, an entity row sees every real token but
    /// itself; any other row sees `E` plus the tokens within `window` of it.
    /// Sentinel rows and columns are fully visible.
    pub fn focus(entity_prob: &[f64], window: usize, tau_ent: f64) -> Self {
        let n = entity_prob.len();
        let len = n + 2;
        let is_entity: Vec<bool> = entity_prob.iter().map(|&p| p >= tau_ent).collect();
        let mut bits = vec![false; len * len];
        for i in 0..len {
            for j in 0..len {
                let visible = if i == 0 || i == len - 1 || j == 0 || j == len - 1 {
                    true
                } else {
                    let (ti, tj) = (i - 1, j - 1);
                    if is_entity[ti] {
                        ti != tj
                    } else {
                        is_entity[tj] || ti.abs_diff(tj) <= window
                    }
                };
                bits[i * len + j] = visible;
            }
        }
        MaskMatrix {
            kind: MaskKind::Focus,
            rows: len,
            cols: len,
            bits,
        }
    }

    /// One row of the mention-level mask for span `[start, end]`: only the
    /// span's own tokens are visible.
    pub fn mention_row(n: usize, start: usize, end: usize) -> Vec<bool> {
        let mut row = vec![false; n + 2];
        row[start + 1..=end + 1].fill(true);
        row
    }

    /// One row of the neighbor-level mask for span `[start, end]`: real tokens
    /// outside the span and within `max_window` of it. An empty complement
    /// falls back to the two sentinels.
    pub fn neighbor_row(n: usize, start: usize, end: usize, max_window: usize) -> Vec<bool> {
        let mut row = vec![false; n + 2];
        let lo = start.saturating_sub(max_window);
        let hi = (end + max_window).min(n.saturating_sub(1));
        for k in (lo..start).chain(end + 1..=hi) {
            row[k + 1] = true;
        }
        if !row.iter().any(|&b| b) {
            row[0] = true;
            row[n + 1] = true;
        }
        row
    }

    pub fn mention(n: usize, start: usize, end: usize) -> Result<Self> {
        check_span(n, start, end)?;
        let row = Self::mention_row(n, start, end);
        Self::from_rows(MaskKind::Mention, &vec![row; n + 2])
    }

    pub fn neighbor(n: usize, start: usize, end: usize, max_window: usize) -> Result<Self> {
        check_span(n, start, end)?;
        let row = Self::neighbor_row(n, start, end, max_window);
        Self::from_rows(MaskKind::Neighbor, &vec![row; n + 2])
    }

    /// A square mask's fully hidden rows are replaced by self-only visibility.
    pub fn apply_self_fallback(&mut self) {
        if self.rows != self.cols {
            return;
        }
        for i in 0..self.rows {
            let row = &mut self.bits[i * self.cols..(i + 1) * self.cols];
            if !row.iter().any(|&b| b) {
                row[i] = true;
            }
        }
    }

    pub fn select_rows(&self, rows: &[usize]) -> MaskMatrix {
        let mut bits = Vec::with_capacity(rows.len() * self.cols);
        for &r in rows {
            bits.extend_from_slice(self.row(r));
        }
        MaskMatrix {
            kind: self.kind,
            rows: rows.len(),
            cols: self.cols,
            bits,
        }
    }

    pub fn kind(&self) -> MaskKind {
        self.kind
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[bool] {
        &self.bits[i * self.cols..(i + 1) * self.cols]
    }

    pub fn is_visible(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.cols + j]
    }

    pub fn visible(&self, i: usize) -> Vec<usize> {
        (0..self.cols).filter(|&j| self.is_visible(i, j)).collect()
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }
}

fn check_span(n: usize, start: usize, end: usize) -> Result<()> {
    if start > end || end >= n {
        return Err(Error::Contract(format!(
            "span ({start}, {end}) outside sentence of length {n}"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn real_visible(mask: &MaskMatrix, token: usize) -> Vec<usize> {
        let n = mask.cols() - 2;
        (0..n).filter(|&j| mask.is_visible(token + 1, j + 1)).collect()
    }

    #[test]
    fn focus_rule_worked_example() {
        let p = [0.1, 0.9, 0.2, 0.8, 0.0];
        let mask = MaskMatrix::focus(&p, 1, 0.5);
        assert_eq!(real_visible(&mask, 0), vec![0, 1, 3]);
        assert_eq!(real_visible(&mask, 1), vec![0, 2, 3, 4]);
        // sentinels see and are seen by everything
        assert!(mask.row(0).iter().all(|&b| b));
        assert!((0..7).all(|i| mask.is_visible(i, 6)));
    }

    #[test]
    fn focus_without_entities_is_a_band() {
        let mask = MaskMatrix::focus(&[0.0; 6], 2, 0.5);
        for i in 0..6usize {
            let want: Vec<usize> = (0..6).filter(|&j| i.abs_diff(j) <= 2).collect();
            assert_eq!(real_visible(&mask, i), want);
        }
    }

    #[test]
    fn focus_all_entities_excludes_diagonal() {
        let mask = MaskMatrix::focus(&[1.0; 3], 0, 0.5);
        for i in 0..3 {
            let want: Vec<usize> = (0..3).filter(|&j| j != i).collect();
            assert_eq!(real_visible(&mask, i), want);
        }
    }

    #[test]
    fn whole_sentence_neighbor_falls_back_to_sentinels() {
        let mask = MaskMatrix::neighbor(4, 0, 3, 128).unwrap();
        assert_eq!(mask.visible(2), vec![0, 5]);
    }

    #[test]
    fn neighbor_window_clips() {
        let row = MaskMatrix::neighbor_row(10, 4, 5, 2);
        let visible: Vec<usize> = (0..12).filter(|&j| row[j]).collect();
        assert_eq!(visible, vec![3, 4, 7, 8]);
    }

    #[test]
    fn out_of_range_span_is_rejected() {
        assert!(MaskMatrix::mention(3, 1, 3).is_err());
        assert!(MaskMatrix::neighbor(3, 2, 1, 4).is_err());
    }

    #[test]
    fn padded_global_hides_padding() {
        let mask = MaskMatrix::global_padded(3, 5);
        assert_eq!(mask.visible(1), vec![0, 1, 2]);
        assert_eq!(mask.visible(4), vec![4]);
    }
}
