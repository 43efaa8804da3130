//! Line-delimited JSON dataset files.
//!
//! Every line is one JSON object. Float arrays are stored bit-exactly as
//! base64 of their little-endian `f64` bytes:
//!
//! ```text
//! image   = {"local": {"rows": N, "cols": D, "f64le": "<base64>"},
//!            "global": {"len": G, "f64le": "<base64>"}}
//! parallel     {"id", "source", "target", "image", "alignments": [[start, end, box], ...]}
//! monolingual  {"id", "source", "image", "alignments"}
//! contrastive  {"id", "source", "translation_a", "translation_b",
//!               "image_1", "alignments_1", "image_2", "alignments_2",
//!               "correct_for_image_1": "a" | "b"}
//! ```
//!
//! Text fields are whitespace-tokenized with the shared vocabulary.
//! Alignment spans index source tokens (end exclusive).

use std::fmt;
use std::io::{BufRead, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::guidance::{build_guidance, AlignmentRecord};
use crate::model::{ModelConfig, MultimodalInput};
use crate::numerics::Tensor;

use super::vocab::{detokenize, tokenize, Vocabulary, EOS};

/// Visual features of one image: region features and the global vector.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageFeatures {
    /// `N x d_local`
    pub local: Tensor,
    pub global: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MultimodalExample {
    pub id: String,
    /// Source token ids without EOS.
    pub source: Vec<usize>,
    /// Target token ids without BOS/EOS; `None` for monolingual data.
    pub target: Option<Vec<usize>>,
    pub image: ImageFeatures,
    pub alignments: Vec<AlignmentRecord>,
}

impl MultimodalExample {
    /// Encoder input: source ids followed by EOS, then regions and global.
    pub fn input(&self) -> Result<MultimodalInput> {
        encoder_input(&self.source, &self.image, &self.alignments)
    }

    /// `BOS target EOS`.
    pub fn target_sequence(&self) -> Option<Vec<usize>> {
        self.target.as_ref().map(|t| with_bos_eos(t))
    }
}

pub fn with_bos_eos(ids: &[usize]) -> Vec<usize> {
    let mut v = Vec::with_capacity(ids.len() + 2);
    v.push(super::vocab::BOS);
    v.extend_from_slice(ids);
    v.push(EOS);
    v
}

pub fn encoder_input(
    source: &[usize],
    image: &ImageFeatures,
    alignments: &[AlignmentRecord],
) -> Result<MultimodalInput> {
    let mut text_ids = source.to_vec();
    text_ids.push(EOS);
    let guidance = build_guidance(text_ids.len(), image.local.rows(), alignments)?;
    Ok(MultimodalInput {
        text_ids,
        local_features: image.local.clone(),
        global_feature: Some(image.global.clone()),
        guidance,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Choice {
    A,
    B,
}

impl Choice {
    pub fn other(self) -> Self {
        match self {
            Choice::A => Choice::B,
            Choice::B => Choice::A,
        }
    }
}

/// Ambiguous source sentence, two translations and two images; each image
/// licenses exactly one translation.
#[derive(Clone, Debug, PartialEq)]
pub struct ContrastiveItem {
    pub id: String,
    pub source: Vec<usize>,
    pub translation_a: Vec<usize>,
    pub translation_b: Vec<usize>,
    pub image_1: ImageFeatures,
    pub alignments_1: Vec<AlignmentRecord>,
    pub image_2: ImageFeatures,
    pub alignments_2: Vec<AlignmentRecord>,
    /// Translation that is correct for image 1; the other one is correct for
    /// image 2.
    pub correct_for_image_1: Choice,
}

impl ContrastiveItem {
    pub fn translation(&self, c: Choice) -> &[usize] {
        match c {
            Choice::A => &self.translation_a,
            Choice::B => &self.translation_b,
        }
    }

    pub fn input_for_image(&self, image: usize) -> Result<MultimodalInput> {
        match image {
            1 => encoder_input(&self.source, &self.image_1, &self.alignments_1),
            2 => encoder_input(&self.source, &self.image_2, &self.alignments_2),
            _ => Err(Error::Contract(format!("contrastive items have images 1 and 2, not {image}"))),
        }
    }

    pub fn correct_for_image(&self, image: usize) -> Choice {
        if image == 1 {
            self.correct_for_image_1
        } else {
            self.correct_for_image_1.other()
        }
    }

    /// Swaps the two translations and updates the pairing.
    pub fn swapped(&self) -> Self {
        Self {
            translation_a: self.translation_b.clone(),
            translation_b: self.translation_a.clone(),
            correct_for_image_1: self.correct_for_image_1.other(),
            ..self.clone()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Parallel,
    Monolingual,
    Contrastive,
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DatasetKind::Parallel => "parallel",
            DatasetKind::Monolingual => "monolingual",
            DatasetKind::Contrastive => "contrastive",
        })
    }
}

impl FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "parallel" => Ok(DatasetKind::Parallel),
            "monolingual" => Ok(DatasetKind::Monolingual),
            "contrastive" => Ok(DatasetKind::Contrastive),
            _ => Err(Error::UnknownName {
                kind: "dataset kind",
                name: s.to_string(),
            }),
        }
    }
}

/// Feature shapes every record must match.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureDims {
    pub max_local: usize,
    pub d_local: usize,
    pub d_global: usize,
}

impl From<&ModelConfig> for FeatureDims {
    fn from(c: &ModelConfig) -> Self {
        Self {
            max_local: c.n_local_features,
            d_local: c.d_local_in,
            d_global: c.d_global_in,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Dataset {
    Parallel(Vec<MultimodalExample>),
    Monolingual(Vec<MultimodalExample>),
    Contrastive(Vec<ContrastiveItem>),
}

impl Dataset {
    pub fn kind(&self) -> DatasetKind {
        match self {
            Dataset::Parallel(_) => DatasetKind::Parallel,
            Dataset::Monolingual(_) => DatasetKind::Monolingual,
            Dataset::Contrastive(_) => DatasetKind::Contrastive,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Dataset::Parallel(v) | Dataset::Monolingual(v) => v.len(),
            Dataset::Contrastive(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn into_examples(self) -> Result<Vec<MultimodalExample>> {
        match self {
            Dataset::Parallel(v) | Dataset::Monolingual(v) => Ok(v),
            Dataset::Contrastive(_) => Err(Error::Contract(
                "expected a parallel or monolingual dataset, got contrastive".into(),
            )),
        }
    }

    pub fn into_items(self) -> Result<Vec<ContrastiveItem>> {
        match self {
            Dataset::Contrastive(v) => Ok(v),
            other => Err(Error::Contract(format!(
                "expected a contrastive dataset, got {}",
                other.kind()
            ))),
        }
    }
}

// --- wire records -------------------------------------------------------

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WireMatrix {
    rows: usize,
    cols: usize,
    f64le: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WireVector {
    len: usize,
    f64le: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WireImage {
    local: WireMatrix,
    global: WireVector,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WireExample {
    id: String,
    source: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    target: Option<String>,
    image: WireImage,
    #[serde(default)]
    alignments: Vec<[usize; 3]>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WireItem {
    id: String,
    source: String,
    translation_a: String,
    translation_b: String,
    image_1: WireImage,
    #[serde(default)]
    alignments_1: Vec<[usize; 3]>,
    image_2: WireImage,
    #[serde(default)]
    alignments_2: Vec<[usize; 3]>,
    correct_for_image_1: Choice,
}

fn encode_f64s(values: &[f64]) -> String {
    let mut bytes = Vec::with_capacity(values.len() * 8);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    STANDARD.encode(bytes)
}

fn decode_f64s(text: &str, expected: usize) -> std::result::Result<Vec<f64>, String> {
    let bytes = STANDARD.decode(text).map_err(|e| format!("bad base64: {e}"))?;
    if bytes.len() != expected * 8 {
        return Err(format!("expected {expected} floats, found {} bytes", bytes.len()));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err("non-finite feature value".into());
    }
    Ok(values)
}

impl WireImage {
    fn from_image(img: &ImageFeatures) -> Self {
        Self {
            local: WireMatrix {
                rows: img.local.rows(),
                cols: img.local.cols(),
                f64le: encode_f64s(img.local.data()),
            },
            global: WireVector {
                len: img.global.len(),
                f64le: encode_f64s(&img.global),
            },
        }
    }

    fn to_image(&self, dims: &FeatureDims) -> std::result::Result<ImageFeatures, String> {
        if self.local.cols != dims.d_local {
            return Err(format!(
                "local feature width {} does not match configured {}",
                self.local.cols, dims.d_local
            ));
        }
        if self.local.rows > dims.max_local {
            return Err(format!(
                "{} region features exceed the configured maximum {}",
                self.local.rows, dims.max_local
            ));
        }
        if self.global.len != dims.d_global {
            return Err(format!(
                "global feature width {} does not match configured {}",
                self.global.len, dims.d_global
            ));
        }
        let local = decode_f64s(&self.local.f64le, self.local.rows * self.local.cols)?;
        let global = decode_f64s(&self.global.f64le, self.global.len)?;
        Ok(ImageFeatures {
            local: Tensor::new(vec![self.local.rows, self.local.cols], local)
                .map_err(|e| e.to_string())?,
            global,
        })
    }
}

fn to_records(al: &[AlignmentRecord]) -> Vec<[usize; 3]> {
    al.iter().map(|a| [a.token_start, a.token_end, a.box_index]).collect()
}

fn from_records(
    raw: &[[usize; 3]],
    text_len: usize,
    n_local: usize,
) -> std::result::Result<Vec<AlignmentRecord>, String> {
    raw.iter()
        .map(|&[s, e, b]| {
            let a = AlignmentRecord::new(s, e, b);
            a.validate(text_len, n_local).map_err(|e| e.to_string())?;
            Ok(a)
        })
        .collect()
}

fn check_known(ids: &[usize], field: &str) -> std::result::Result<(), String> {
    if ids.contains(&super::vocab::UNK) {
        return Err(format!("{field} contains out-of-vocabulary words"));
    }
    Ok(())
}

fn parse_line(
    line: &str,
    kind: DatasetKind,
    vocab: &Vocabulary,
    dims: &FeatureDims,
) -> std::result::Result<Record, String> {
    match kind {
        DatasetKind::Parallel | DatasetKind::Monolingual => {
            let w: WireExample = serde_json::from_str(line).map_err(|e| e.to_string())?;
            let source = tokenize(&w.source, vocab);
            check_known(&source, "source")?;
            let target = match (kind, &w.target) {
                (DatasetKind::Parallel, Some(t)) => {
                    let ids = tokenize(t, vocab);
                    check_known(&ids, "target")?;
                    Some(ids)
                }
                (DatasetKind::Parallel, None) => return Err("missing field `target`".into()),
                (_, Some(_)) => return Err("monolingual record has a `target` field".into()),
                (_, None) => None,
            };
            let image = w.image.to_image(dims)?;
            let alignments = from_records(&w.alignments, source.len(), image.local.rows())?;
            Ok(Record::Example(MultimodalExample {
                id: w.id,
                source,
                target,
                image,
                alignments,
            }))
        }
        DatasetKind::Contrastive => {
            let w: WireItem = serde_json::from_str(line).map_err(|e| e.to_string())?;
            let source = tokenize(&w.source, vocab);
            check_known(&source, "source")?;
            let translation_a = tokenize(&w.translation_a, vocab);
            let translation_b = tokenize(&w.translation_b, vocab);
            check_known(&translation_a, "translation_a")?;
            check_known(&translation_b, "translation_b")?;
            let image_1 = w.image_1.to_image(dims)?;
            let image_2 = w.image_2.to_image(dims)?;
            let alignments_1 = from_records(&w.alignments_1, source.len(), image_1.local.rows())?;
            let alignments_2 = from_records(&w.alignments_2, source.len(), image_2.local.rows())?;
            Ok(Record::Item(ContrastiveItem {
                id: w.id,
                source,
                translation_a,
                translation_b,
                image_1,
                alignments_1,
                image_2,
                alignments_2,
                correct_for_image_1: w.correct_for_image_1,
            }))
        }
    }
}

enum Record {
    Example(MultimodalExample),
    Item(ContrastiveItem),
}

/// Parses and validates a dataset file, failing on the first bad record
/// with its line number.
pub fn load_dataset(
    path: &Path,
    kind: DatasetKind,
    vocab: &Vocabulary,
    dims: &FeatureDims,
) -> Result<Dataset> {
    let file = std::fs::File::open(path)
        .map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    let mut examples = Vec::new();
    let mut items = Vec::new();
    for (idx, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record = parse_line(&line, kind, vocab, dims).map_err(|message| Error::Record {
            path: path.to_path_buf(),
            line: idx + 1,
            message,
        })?;
        match record {
            Record::Example(e) => examples.push(e),
            Record::Item(i) => items.push(i),
        }
    }
    Ok(match kind {
        DatasetKind::Parallel => Dataset::Parallel(examples),
        DatasetKind::Monolingual => Dataset::Monolingual(examples),
        DatasetKind::Contrastive => Dataset::Contrastive(items),
    })
}

pub fn save_dataset(path: &Path, dataset: &Dataset, vocab: &Vocabulary) -> Result<()> {
    let file = std::fs::File::create(path)
        .map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(format!("writing {}", path.display()), e);
    let json = |e: serde_json::Error| Error::Validation(e.to_string());
    match dataset {
        Dataset::Parallel(v) | Dataset::Monolingual(v) => {
            for ex in v {
                let rec = WireExample {
                    id: ex.id.clone(),
                    source: detokenize(&ex.source, vocab),
                    target: ex.target.as_ref().map(|t| detokenize(t, vocab)),
                    image: WireImage::from_image(&ex.image),
                    alignments: to_records(&ex.alignments),
                };
                serde_json::to_writer(&mut w, &rec).map_err(json)?;
                writeln!(w).map_err(io)?;
            }
        }
        Dataset::Contrastive(v) => {
            for it in v {
                let rec = WireItem {
                    id: it.id.clone(),
                    source: detokenize(&it.source, vocab),
                    translation_a: detokenize(&it.translation_a, vocab),
                    translation_b: detokenize(&it.translation_b, vocab),
                    image_1: WireImage::from_image(&it.image_1),
                    alignments_1: to_records(&it.alignments_1),
                    image_2: WireImage::from_image(&it.image_2),
                    alignments_2: to_records(&it.alignments_2),
                    correct_for_image_1: it.correct_for_image_1,
                };
                serde_json::to_writer(&mut w, &rec).map_err(json)?;
                writeln!(w).map_err(io)?;
            }
        }
    }
    w.flush().map_err(io)
}
