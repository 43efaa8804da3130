//! Synthetic lexical-disambiguation corpus.
//!
//! Each ambiguous source word `ambKK` has two target translations `tKKa`
//! and `tKKb`. Which one is right is decided by the sense of the scene: the
//! global image vector carries a per-(lexeme, sense) code on a fixed set of
//! signal dimensions, and one region box carries the object's identity and
//! is alignment-linked to the ambiguous token. Optional context words
//! (`cKKa` on the source side, `dKKa` on the target side) spell the sense
//! out in text.

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::guidance::AlignmentRecord;
use crate::numerics::Tensor;

use super::dataset::{save_dataset, Choice, ContrastiveItem, Dataset, ImageFeatures, MultimodalExample};
use super::vocab::Vocabulary;

/// Output file names inside a corpus directory.
pub const CORPUS_FILES: [&str; 6] = [
    "vocab.txt",
    "parallel.jsonl",
    "monolingual.jsonl",
    "dev.jsonl",
    "contrastive.jsonl",
    "key.json",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSpec {
    pub n_lexemes: usize,
    /// Unambiguous source words; each has one fixed translation.
    pub n_fillers: usize,
    pub n_parallel: usize,
    pub n_monolingual: usize,
    pub n_dev: usize,
    pub n_contrastive: usize,
    /// Also train on both (image, correct translation) pairs of every
    /// contrastive item.
    pub contrastive_in_parallel: bool,
    pub n_boxes: usize,
    pub d_local: usize,
    pub d_global: usize,
    pub signal_dims: usize,
    pub signal_scale: f64,
    pub global_noise: f64,
    pub local_noise: f64,
    pub object_scale: f64,
    /// Strength of a sense code added to the linked box. Zero keeps the
    /// sense in the global vector only.
    pub local_sense_scale: f64,
    /// Probability that a parallel or dev sentence carries a context word.
    pub parallel_context_rate: f64,
    pub mono_context_rate: f64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            n_lexemes: 20,
            n_fillers: 24,
            n_parallel: 400,
            n_monolingual: 400,
            n_dev: 40,
            n_contrastive: 155,
            contrastive_in_parallel: true,
            n_boxes: 3,
            d_local: 64,
            d_global: 512,
            signal_dims: 32,
            signal_scale: 1.0,
            global_noise: 0.1,
            local_noise: 0.1,
            object_scale: 1.0,
            local_sense_scale: 0.0,
            parallel_context_rate: 0.0,
            mono_context_rate: 1.0,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(format!("corpus spec: {m}")));
        if self.n_lexemes == 0 {
            return fail("n_lexemes must be positive");
        }
        if self.n_fillers == 0 {
            return fail("n_fillers must be positive");
        }
        if self.n_parallel == 0 && !(self.contrastive_in_parallel && self.n_contrastive > 0) {
            return fail("no parallel training examples");
        }
        if self.n_boxes == 0 {
            return fail("n_boxes must be positive");
        }
        if self.d_local == 0 || self.d_global == 0 {
            return fail("feature widths must be positive");
        }
        if self.signal_dims == 0 || self.signal_dims > self.d_global {
            return fail("signal_dims must be in 1..=d_global");
        }
        for (name, r) in [
            ("parallel_context_rate", self.parallel_context_rate),
            ("mono_context_rate", self.mono_context_rate),
        ] {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::Config(format!("corpus spec: {name} {r} outside [0, 1]")));
            }
        }
        for v in [
            self.signal_scale,
            self.global_noise,
            self.local_noise,
            self.object_scale,
            self.local_sense_scale,
        ] {
            if !v.is_finite() || v < 0.0 {
                return fail("scales must be finite and non-negative");
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LexemeKey {
    pub source: String,
    /// Translation per sense.
    pub translations: [String; 2],
    pub source_context: [String; 2],
    pub target_context: [String; 2],
    /// Global-vector code per sense, aligned with `CorpusKey::signal_dims`.
    /// The two codes are opposite.
    pub sense_codes: [Vec<f64>; 2],
    pub object_code: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ItemKey {
    pub id: String,
    pub lexeme: usize,
    pub sense_image_1: usize,
    pub sense_image_2: usize,
    /// Source position of the ambiguous word.
    pub position: usize,
    pub box_image_1: usize,
    pub box_image_2: usize,
}

/// Ground truth for a generated corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusKey {
    pub spec: CorpusSpec,
    pub signal_dims: Vec<usize>,
    pub lexemes: Vec<LexemeKey>,
    pub items: Vec<ItemKey>,
    /// `(example id, lexeme, sense)` for every parallel, dev and
    /// monolingual example.
    pub examples: Vec<(String, usize, usize)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticCorpus {
    pub vocab: Vocabulary,
    pub parallel: Vec<MultimodalExample>,
    pub monolingual: Vec<MultimodalExample>,
    pub dev: Vec<MultimodalExample>,
    pub contrastive: Vec<ContrastiveItem>,
    pub key: CorpusKey,
}

impl SyntheticCorpus {
    /// Writes the files named in [`CORPUS_FILES`] into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)
            .map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
        self.vocab.save(&dir.join(CORPUS_FILES[0]))?;
        save_dataset(&dir.join(CORPUS_FILES[1]), &Dataset::Parallel(self.parallel.clone()), &self.vocab)?;
        save_dataset(
            &dir.join(CORPUS_FILES[2]),
            &Dataset::Monolingual(self.monolingual.clone()),
            &self.vocab,
        )?;
        save_dataset(&dir.join(CORPUS_FILES[3]), &Dataset::Parallel(self.dev.clone()), &self.vocab)?;
        save_dataset(
            &dir.join(CORPUS_FILES[4]),
            &Dataset::Contrastive(self.contrastive.clone()),
            &self.vocab,
        )?;
        let key = serde_json::to_string_pretty(&self.key)
            .map_err(|e| Error::Validation(format!("encoding key: {e}")))?;
        let path = dir.join(CORPUS_FILES[5]);
        std::fs::write(&path, key).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }
}

impl CorpusKey {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Validation(format!("{}: {e}", path.display())))
    }
}

struct World {
    spec: CorpusSpec,
    vocab: Vocabulary,
    src_fillers: Vec<usize>,
    tgt_fillers: Vec<usize>,
    amb: Vec<usize>,
    trans: Vec<[usize; 2]>,
    src_ctx: Vec<[usize; 2]>,
    tgt_ctx: Vec<[usize; 2]>,
    signal_dims: Vec<usize>,
    sense_codes: Vec<[Vec<f64>; 2]>,
    local_sense_codes: Vec<[Vec<f64>; 2]>,
    object_codes: Vec<Vec<f64>>,
}

/// One sampled sentence pair before the image is attached.
struct Sentence {
    source: Vec<usize>,
    target: Vec<usize>,
    position: usize,
}

fn gaussian(n: usize, scale: f64, rng: &mut impl Rng) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            scale * z
        })
        .collect()
}

fn sign_code(n: usize, scale: f64, rng: &mut impl Rng) -> Vec<f64> {
    (0..n)
        .map(|_| if rng.gen::<bool>() { scale } else { -scale })
        .collect()
}

impl World {
    fn new(spec: &CorpusSpec, rng: &mut impl Rng) -> Self {
        let mut vocab = Vocabulary::new();
        let src_fillers = (0..spec.n_fillers).map(|i| vocab.add(&format!("w{i:02}"))).collect();
        let tgt_fillers = (0..spec.n_fillers).map(|i| vocab.add(&format!("v{i:02}"))).collect();
        let mut amb = Vec::new();
        let mut trans = Vec::new();
        let mut src_ctx = Vec::new();
        let mut tgt_ctx = Vec::new();
        for k in 0..spec.n_lexemes {
            amb.push(vocab.add(&format!("amb{k:02}")));
            trans.push([vocab.add(&format!("t{k:02}a")), vocab.add(&format!("t{k:02}b"))]);
            src_ctx.push([vocab.add(&format!("c{k:02}a")), vocab.add(&format!("c{k:02}b"))]);
            tgt_ctx.push([vocab.add(&format!("d{k:02}a")), vocab.add(&format!("d{k:02}b"))]);
        }
        let mut dims: Vec<usize> = (0..spec.d_global).collect();
        dims.shuffle(rng);
        let mut signal_dims = dims[..spec.signal_dims].to_vec();
        signal_dims.sort_unstable();
        let mut sense_codes = Vec::new();
        let mut local_sense_codes = Vec::new();
        let mut object_codes = Vec::new();
        for _ in 0..spec.n_lexemes {
            let code = sign_code(spec.signal_dims, spec.signal_scale, rng);
            let opposite = code.iter().map(|c| -c).collect();
            sense_codes.push([code, opposite]);
            local_sense_codes.push([
                gaussian(spec.d_local, spec.local_sense_scale, rng),
                gaussian(spec.d_local, spec.local_sense_scale, rng),
            ]);
            object_codes.push(gaussian(spec.d_local, spec.object_scale, rng));
        }
        Self {
            spec: spec.clone(),
            vocab,
            src_fillers,
            tgt_fillers,
            amb,
            trans,
            src_ctx,
            tgt_ctx,
            signal_dims,
            sense_codes,
            local_sense_codes,
            object_codes,
        }
    }

    /// `filler amb [ctx] filler [filler]`, translated word by word.
    fn sentence(&self, lexeme: usize, sense: usize, context: bool, rng: &mut impl Rng) -> Sentence {
        let n = self.src_fillers.len();
        let pre = rng.gen_range(0..n);
        let n_post = rng.gen_range(1..=2);
        let post: Vec<usize> = (0..n_post).map(|_| rng.gen_range(0..n)).collect();
        let mut source = vec![self.src_fillers[pre], self.amb[lexeme]];
        let mut target = vec![self.tgt_fillers[pre], self.trans[lexeme][sense]];
        if context {
            source.push(self.src_ctx[lexeme][sense]);
            target.push(self.tgt_ctx[lexeme][sense]);
        }
        for &p in &post {
            source.push(self.src_fillers[p]);
            target.push(self.tgt_fillers[p]);
        }
        Sentence {
            source,
            target,
            position: 1,
        }
    }

    /// Scene noise shared by both images of a contrastive item.
    fn scene(&self, lexeme: usize, rng: &mut impl Rng) -> (Vec<f64>, Tensor, usize) {
        let s = &self.spec;
        let global = gaussian(s.d_global, s.global_noise, rng);
        let object_box = rng.gen_range(0..s.n_boxes);
        let mut local = Vec::with_capacity(s.n_boxes * s.d_local);
        for b in 0..s.n_boxes {
            let noise = gaussian(s.d_local, s.local_noise, rng);
            if b == object_box {
                local.extend(noise.iter().zip(&self.object_codes[lexeme]).map(|(n, c)| n + c));
            } else {
                let distractor = gaussian(s.d_local, s.object_scale, rng);
                local.extend(noise.iter().zip(&distractor).map(|(n, c)| n + c));
            }
        }
        let local = Tensor::matrix(s.n_boxes, s.d_local, local).expect("sized");
        (global, local, object_box)
    }

    /// Writes the sense signal into a copy of the scene.
    fn image(
        &self,
        scene: &(Vec<f64>, Tensor, usize),
        lexeme: usize,
        sense: usize,
    ) -> ImageFeatures {
        let (global, local, object_box) = scene;
        let mut global = global.clone();
        for (&d, &c) in self.signal_dims.iter().zip(&self.sense_codes[lexeme][sense]) {
            global[d] += c;
        }
        let mut local = local.clone();
        if self.spec.local_sense_scale > 0.0 {
            let cols = local.cols();
            let row = &mut local.data_mut()[object_box * cols..(object_box + 1) * cols];
            for (x, c) in row.iter_mut().zip(&self.local_sense_codes[lexeme][sense]) {
                *x += c;
            }
        }
        ImageFeatures { local, global }
    }

    fn example(
        &self,
        id: String,
        lexeme: usize,
        sense: usize,
        context_rate: f64,
        with_target: bool,
        rng: &mut impl Rng,
    ) -> MultimodalExample {
        let context = rng.gen::<f64>() < context_rate;
        let s = self.sentence(lexeme, sense, context, rng);
        let scene = self.scene(lexeme, rng);
        let image = self.image(&scene, lexeme, sense);
        MultimodalExample {
            id,
            source: s.source,
            target: with_target.then_some(s.target),
            image,
            alignments: vec![AlignmentRecord::new(s.position, s.position + 1, scene.2)],
        }
    }

    fn lexeme_key(&self, k: usize) -> LexemeKey {
        let word = |id: usize| self.vocab.token(id).expect("in vocab").to_string();
        LexemeKey {
            source: word(self.amb[k]),
            translations: [word(self.trans[k][0]), word(self.trans[k][1])],
            source_context: [word(self.src_ctx[k][0]), word(self.src_ctx[k][1])],
            target_context: [word(self.tgt_ctx[k][0]), word(self.tgt_ctx[k][1])],
            sense_codes: self.sense_codes[k].clone(),
            object_code: self.object_codes[k].clone(),
        }
    }
}

/// Builds a corpus where the image alone decides between the two
/// translations of every ambiguous word (context words, when enabled,
/// agree with the image). Senses are balanced within each lexeme.
pub fn generate_synthetic_corpus(spec: &CorpusSpec, rng: &mut impl Rng) -> Result<SyntheticCorpus> {
    spec.validate()?;
    let world = World::new(spec, rng);
    let mut examples_key = Vec::new();
    let mut draw = |prefix: &str, n: usize, rate: f64, target: bool, rng: &mut _| {
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let lexeme = i % spec.n_lexemes;
            let sense = (i / spec.n_lexemes) % 2;
            let id = format!("{prefix}-{i:05}");
            examples_key.push((id.clone(), lexeme, sense));
            out.push(world.example(id, lexeme, sense, rate, target, rng));
        }
        out.shuffle(rng);
        out
    };
    let mut parallel = draw("par", spec.n_parallel, spec.parallel_context_rate, true, rng);
    let monolingual = draw("mono", spec.n_monolingual, spec.mono_context_rate, false, rng);
    let dev = draw("dev", spec.n_dev, spec.parallel_context_rate, true, rng);

    let mut contrastive = Vec::with_capacity(spec.n_contrastive);
    let mut items = Vec::with_capacity(spec.n_contrastive);
    let mut seen = BTreeSet::new();
    for i in 0..spec.n_contrastive {
        let lexeme = i % spec.n_lexemes;
        let sentence = world.sentence(lexeme, 0, false, rng);
        seen.insert(sentence.source.clone());
        let scene = world.scene(lexeme, rng);
        let sense_1 = rng.gen_range(0..2);
        let image_1 = world.image(&scene, lexeme, sense_1);
        let image_2 = world.image(&scene, lexeme, 1 - sense_1);
        let align = vec![AlignmentRecord::new(sentence.position, sentence.position + 1, scene.2)];
        let mut translation_b = sentence.target.clone();
        translation_b[sentence.position] = world.trans[lexeme][1];
        let item = ContrastiveItem {
            id: format!("item-{i:05}"),
            source: sentence.source,
            translation_a: sentence.target,
            translation_b,
            image_1,
            alignments_1: align.clone(),
            image_2,
            alignments_2: align,
            correct_for_image_1: if sense_1 == 0 { Choice::A } else { Choice::B },
        };
        items.push(ItemKey {
            id: item.id.clone(),
            lexeme,
            sense_image_1: sense_1,
            sense_image_2: 1 - sense_1,
            position: sentence.position,
            box_image_1: scene.2,
            box_image_2: scene.2,
        });
        if spec.contrastive_in_parallel {
            for image in [1, 2] {
                let (features, alignments) = if image == 1 {
                    (&item.image_1, &item.alignments_1)
                } else {
                    (&item.image_2, &item.alignments_2)
                };
                parallel.push(MultimodalExample {
                    id: format!("{}-img{image}", item.id),
                    source: item.source.clone(),
                    target: Some(item.translation(item.correct_for_image(image)).to_vec()),
                    image: features.clone(),
                    alignments: alignments.clone(),
                });
            }
        }
        contrastive.push(item);
    }
    if spec.contrastive_in_parallel {
        parallel.shuffle(rng);
    }

    let key = CorpusKey {
        spec: spec.clone(),
        signal_dims: world.signal_dims.clone(),
        lexemes: (0..spec.n_lexemes).map(|k| world.lexeme_key(k)).collect(),
        items,
        examples: examples_key,
    };
    Ok(SyntheticCorpus {
        vocab: world.vocab,
        parallel,
        monolingual,
        dev,
        contrastive,
        key,
    })
}
