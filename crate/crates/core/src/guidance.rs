//! Binary guidance matrices that gate encoder self-attention.
//!
//! The encoder input is the concatenation `[text | local regions | global]`.
//! Positions of the same modality always see each other, the global image
//! vector sees and is seen by everything, and a text position sees a region
//! only when an alignment record links them.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Position spans of the concatenated encoder input.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    pub text_len: usize,
    pub n_local: usize,
    pub has_global: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Modality {
    Text,
    Local,
    Global,
}

impl Layout {
    pub fn new(text_len: usize, n_local: usize, has_global: bool) -> Self {
        Self {
            text_len,
            n_local,
            has_global,
        }
    }

    pub fn text_only(text_len: usize) -> Self {
        Self::new(text_len, 0, false)
    }

    pub fn len(&self) -> usize {
        self.text_len + self.n_local + usize::from(self.has_global)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn text_span(&self) -> std::ops::Range<usize> {
        0..self.text_len
    }

    pub fn local_span(&self) -> std::ops::Range<usize> {
        self.text_len..self.text_len + self.n_local
    }

    pub fn global_position(&self) -> Option<usize> {
        self.has_global.then(|| self.text_len + self.n_local)
    }

    pub fn modality(&self, pos: usize) -> Modality {
        if pos < self.text_len {
            Modality::Text
        } else if pos < self.text_len + self.n_local {
            Modality::Local
        } else {
            Modality::Global
        }
    }
}

/// One text-span to region link. `token_end` is exclusive.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AlignmentRecord {
    pub token_start: usize,
    pub token_end: usize,
    pub box_index: usize,
}

impl AlignmentRecord {
    pub fn new(token_start: usize, token_end: usize, box_index: usize) -> Self {
        Self {
            token_start,
            token_end,
            box_index,
        }
    }

    pub fn validate(&self, text_len: usize, n_local: usize) -> Result<()> {
        if self.token_start >= self.token_end || self.token_end > text_len {
            return Err(Error::Validation(format!(
                "alignment {self} has token span outside [0, {text_len})"
            )));
        }
        if self.box_index >= n_local {
            return Err(Error::Validation(format!(
                "alignment {self} references box {} but only {n_local} regions exist",
                self.box_index
            )));
        }
        Ok(())
    }
}

impl fmt::Display for AlignmentRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "tokens {}..{} <-> box {}",
            self.token_start, self.token_end, self.box_index
        )
    }
}

/// Square binary matrix over the encoder input positions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GuidanceMatrix {
    layout: Layout,
    bits: Vec<bool>,
}

impl GuidanceMatrix {
    pub fn all_ones(layout: Layout) -> Self {
        let s = layout.len();
        Self {
            layout,
            bits: vec![true; s * s],
        }
    }

    /// Wraps raw row-major bits. Every row must allow at least one entry.
    pub fn from_bits(layout: Layout, bits: Vec<bool>) -> Result<Self> {
        let s = layout.len();
        if bits.len() != s * s {
            return Err(Error::dim("guidance", &[s, s], &[bits.len()]));
        }
        if let Some(row) = (0..s).find(|&i| !bits[i * s..(i + 1) * s].iter().any(|&b| b)) {
            return Err(Error::DegenerateRow { row });
        }
        Ok(Self { layout, bits })
    }

    pub fn layout(&self) -> Layout {
        self.layout
    }

    pub fn size(&self) -> usize {
        self.layout.len()
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.size() + j]
    }

    /// Row-major mask, suitable for [`crate::numerics::masked_softmax`].
    pub fn as_mask(&self) -> &[bool] {
        &self.bits
    }

    pub fn is_symmetric(&self) -> bool {
        let s = self.size();
        (0..s).all(|i| (0..s).all(|j| self.get(i, j) == self.get(j, i)))
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Same layout with every text-to-visual and visual-to-text entry cleared,
    /// including the global column for text rows. Text rows then depend on
    /// text positions only.
    pub fn without_cross_modal(&self) -> Self {
        let s = self.size();
        let mut bits = self.bits.clone();
        for i in 0..s {
            for j in 0..s {
                let (mi, mj) = (self.layout.modality(i), self.layout.modality(j));
                if (mi == Modality::Text) != (mj == Modality::Text) {
                    bits[i * s + j] = false;
                }
            }
        }
        Self {
            layout: self.layout,
            bits,
        }
    }

    /// Restricts the matrix to a subset of positions, in order.
    fn select(&self, keep: &[usize], layout: Layout) -> Self {
        let mut bits = Vec::with_capacity(keep.len() * keep.len());
        for &i in keep {
            for &j in keep {
                bits.push(self.get(i, j));
            }
        }
        Self { layout, bits }
    }
}

/// Builds `C` for `text_len` text positions, `n_local` regions and one
/// global image position.
pub fn build_guidance(
    text_len: usize,
    n_local: usize,
    alignments: &[AlignmentRecord],
) -> Result<GuidanceMatrix> {
    for a in alignments {
        a.validate(text_len, n_local)?;
    }
    let layout = Layout::new(text_len, n_local, true);
    let s = layout.len();
    let mut bits = vec![false; s * s];
    for i in 0..s {
        for j in 0..s {
            let (mi, mj) = (layout.modality(i), layout.modality(j));
            bits[i * s + j] = mi == mj || mi == Modality::Global || mj == Modality::Global;
        }
    }
    for a in alignments {
        let b = text_len + a.box_index;
        for t in a.token_start..a.token_end {
            bits[t * s + b] = true;
            bits[b * s + t] = true;
        }
    }
    Ok(GuidanceMatrix { layout, bits })
}

/// Attention/feature ablations applied to an input's guidance matrix.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GuidanceMode {
    /// Alignment-derived matrix, unchanged.
    #[default]
    Guided,
    /// Full self-attention over every position.
    Full,
    /// Local region features removed from the input.
    DropLocal,
    /// Global image feature removed from the input.
    DropGlobal,
    /// Every visual position removed.
    TextOnly,
}

impl GuidanceMode {
    pub const ALL: [GuidanceMode; 5] = [
        GuidanceMode::Guided,
        GuidanceMode::Full,
        GuidanceMode::DropLocal,
        GuidanceMode::DropGlobal,
        GuidanceMode::TextOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            GuidanceMode::Guided => "guided",
            GuidanceMode::Full => "full",
            GuidanceMode::DropLocal => "drop-local",
            GuidanceMode::DropGlobal => "drop-global",
            GuidanceMode::TextOnly => "text-only",
        }
    }

    pub fn keeps_local(self) -> bool {
        !matches!(self, GuidanceMode::DropLocal | GuidanceMode::TextOnly)
    }

    pub fn keeps_global(self) -> bool {
        !matches!(self, GuidanceMode::DropGlobal | GuidanceMode::TextOnly)
    }
}

impl fmt::Display for GuidanceMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for GuidanceMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::UnknownName {
                kind: "guidance mode",
                name: s.to_string(),
            })
    }
}

/// Derives the ablated matrix. Modes that drop features also shrink the
/// layout; the caller must drop the matching feature rows from the input.
pub fn degrade_guidance(c: &GuidanceMatrix, mode: GuidanceMode) -> GuidanceMatrix {
    let layout = c.layout();
    let keep_local = mode.keeps_local() && layout.n_local > 0;
    let keep_global = mode.keeps_global() && layout.has_global;
    let new_layout = Layout::new(
        layout.text_len,
        if keep_local { layout.n_local } else { 0 },
        keep_global,
    );
    match mode {
        GuidanceMode::Guided => c.clone(),
        GuidanceMode::Full => GuidanceMatrix::all_ones(layout),
        _ => {
            let mut keep: Vec<usize> = layout.text_span().collect();
            if keep_local {
                keep.extend(layout.local_span());
            }
            if keep_global {
                keep.extend(layout.global_position());
            }
            c.select(&keep, new_layout)
        }
    }
}

/// Reads the tab-separated alignment file:
/// `example_id <TAB> token_start <TAB> token_end <TAB> box_index`.
/// Blank lines and lines starting with `#` are skipped.
pub fn read_alignment_file(path: &Path) -> Result<BTreeMap<String, Vec<AlignmentRecord>>> {
    let file = std::fs::File::open(path)
        .map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    let mut out: BTreeMap<String, Vec<AlignmentRecord>> = BTreeMap::new();
    for (idx, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let trimmed = line.trim_end_matches(['\r', '\n']);
        if trimmed.trim().is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let record_err = |message: String| Error::Record {
            path: path.to_path_buf(),
            line: idx + 1,
            message,
        };
        let fields: Vec<&str> = trimmed.split('\t').collect();
        if fields.len() != 4 {
            return Err(record_err(format!("expected 4 tab-separated fields, found {}", fields.len())));
        }
        let num = |s: &str, what: &str| {
            s.trim()
                .parse::<usize>()
                .map_err(|_| record_err(format!("{what} '{s}' is not a non-negative integer")))
        };
        let rec = AlignmentRecord::new(
            num(fields[1], "token_start")?,
            num(fields[2], "token_end")?,
            num(fields[3], "box_index")?,
        );
        if rec.token_start >= rec.token_end {
            return Err(record_err(format!("empty token span in {rec}")));
        }
        out.entry(fields[0].to_string()).or_default().push(rec);
    }
    Ok(out)
}

pub fn write_alignment_file(
    path: &Path,
    records: &BTreeMap<String, Vec<AlignmentRecord>>,
) -> Result<()> {
    let file = std::fs::File::create(path)
        .map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
    let mut w = std::io::BufWriter::new(file);
    let io = |e| Error::io(format!("writing {}", path.display()), e);
    writeln!(w, "# example_id\ttoken_start\ttoken_end\tbox_index").map_err(io)?;
    for (id, recs) in records {
        for r in recs {
            writeln!(w, "{id}\t{}\t{}\t{}", r.token_start, r.token_end, r.box_index)
                .map_err(io)?;
        }
    }
    w.flush().map_err(io)
}
