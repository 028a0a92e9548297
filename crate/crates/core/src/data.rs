//! Vocabulary, caption encoding, dataset ingestion and the synthetic
//! attribute-caption dataset.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::backbone::{load_features, GridFeatureSet};
use crate::error::{Error, Result};
use crate::metrics::tokenize;
use crate::tensor::Tensor;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const RESERVED: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];
pub const MAX_CAPTION_LEN: usize = 16;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Reserved ids first, then `words` in the given order. Duplicates and
    /// reserved spellings are skipped.
    pub fn from_tokens<S: AsRef<str>>(words: &[S]) -> Self {
        let mut v = Self {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for w in RESERVED.iter().copied().chain(words.iter().map(AsRef::as_ref)) {
            if !v.index.contains_key(w) {
                v.index.insert(w.to_string(), v.tokens.len());
                v.tokens.push(w.to_string());
            }
        }
        v
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// Non-reserved tokens in id order.
    pub fn words(&self) -> &[String] {
        &self.tokens[RESERVED.len()..]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Content words of a sequence (reserved ids other than UNK dropped,
    /// stopping at the first EOS).
    pub fn decode(&self, seq: &TokenSequence) -> Vec<String> {
        seq.content()
            .iter()
            .filter_map(|&id| self.token(id).map(str::to_string))
            .collect()
    }
}

/// Tokens occurring strictly more than `min_occurrences` times, ordered by
/// descending count, ties lexicographic.
pub fn build_vocab(captions: &[Vec<String>], min_occurrences: usize) -> Result<Vocabulary> {
    if captions.iter().all(Vec::is_empty) {
        return Err(Error::Data("cannot build a vocabulary from an empty corpus".into()));
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for t in captions.iter().flatten() {
        *counts.entry(t.as_str()).or_default() += 1;
    }
    let mut kept: Vec<(&str, usize)> = counts
        .into_iter()
        .filter(|&(_, c)| c > min_occurrences)
        .collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    let words: Vec<&str> = kept.into_iter().map(|(w, _)| w).collect();
    Ok(Vocabulary::from_tokens(&words))
}

/// Token ids of one caption, starting with BOS.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TokenSequence(pub Vec<usize>);

impl TokenSequence {
    pub fn ids(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Ids after BOS up to (excluding) the first EOS, PAD removed.
    pub fn content(&self) -> Vec<usize> {
        let start = usize::from(self.0.first() == Some(&BOS));
        self.0[start..]
            .iter()
            .copied()
            .take_while(|&t| t != EOS)
            .filter(|&t| t != PAD && t != BOS)
            .collect()
    }

    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        if let Some(&bad) = self.0.iter().find(|&&t| t >= vocab_size) {
            return Err(Error::Data(format!(
                "token id {bad} outside vocabulary of {vocab_size}"
            )));
        }
        Ok(())
    }
}

/// `[BOS] + ids (truncated to max_len) + [EOS]`, padded with PAD to
/// `max_len + 2` entries.
pub fn encode<S: AsRef<str>>(tokens: &[S], vocab: &Vocabulary, max_len: usize) -> TokenSequence {
    let mut ids = Vec::with_capacity(max_len + 2);
    ids.push(BOS);
    ids.extend(tokens.iter().take(max_len).map(|t| vocab.id(t.as_ref())));
    ids.push(EOS);
    ids.resize(max_len + 2, PAD);
    TokenSequence(ids)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    /// Karpathy split labels; `restval` folds into train.
    pub fn parse(label: &str) -> Result<Self> {
        match label {
            "train" | "restval" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Format(format!("unknown split label {other:?}"))),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

#[derive(Clone, Debug)]
pub enum FeatureSource {
    File(PathBuf),
    Memory(Arc<GridFeatureSet>),
}

impl FeatureSource {
    pub fn load(&self) -> Result<Arc<GridFeatureSet>> {
        match self {
            FeatureSource::File(p) => Ok(Arc::new(load_features(p)?)),
            FeatureSource::Memory(f) => Ok(Arc::clone(f)),
        }
    }
}

#[derive(Clone, Debug)]
pub struct CaptionItem {
    pub id: String,
    pub features: FeatureSource,
    pub captions: Vec<Vec<String>>,
    pub split: Split,
}

#[derive(Clone, Debug, Default)]
pub struct CaptionDataset {
    pub items: Vec<CaptionItem>,
    /// Fixed vocabulary shipped with the dataset, if any.
    pub vocabulary: Option<Vec<String>>,
}

impl CaptionDataset {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &CaptionItem> {
        self.items.iter().filter(move |i| i.split == split)
    }

    pub fn count(&self, split: Split) -> usize {
        self.split(split).count()
    }

    /// Loads every item's features into memory.
    pub fn into_memory(self) -> Result<Self> {
        let items = self
            .items
            .into_iter()
            .map(|it| {
                Ok(CaptionItem {
                    features: FeatureSource::Memory(it.features.load()?),
                    ..it
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            items,
            vocabulary: self.vocabulary,
        })
    }

    /// Dataset vocabulary, or one built from training captions.
    pub fn vocabulary(&self, min_occurrences: usize) -> Result<Vocabulary> {
        if let Some(words) = &self.vocabulary {
            return Ok(Vocabulary::from_tokens(words));
        }
        let caps: Vec<Vec<String>> = self
            .split(Split::Train)
            .flat_map(|i| i.captions.iter().cloned())
            .collect();
        build_vocab(&caps, min_occurrences)
    }
}

fn truncate_caption(mut tokens: Vec<String>) -> Vec<String> {
    tokens.truncate(MAX_CAPTION_LEN);
    tokens
}

#[derive(Deserialize)]
struct KarpathyFile {
    images: Vec<KarpathyImage>,
}

#[derive(Deserialize)]
struct KarpathyImage {
    filepath: String,
    #[serde(default)]
    filename: Option<String>,
    split: String,
    sentences: Vec<KarpathySentence>,
    #[serde(default)]
    cocoid: Option<u64>,
    #[serde(default)]
    imgid: Option<u64>,
}

#[derive(Deserialize)]
struct KarpathySentence {
    tokens: Vec<String>,
}

/// Reads a Karpathy-split caption file. Feature files are expected under
/// `feature_dir` at the image's relative path with its extension replaced by
/// `extension`.
pub fn load_karpathy_json(
    path: impl AsRef<Path>,
    feature_dir: impl AsRef<Path>,
    extension: &str,
) -> Result<CaptionDataset> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: KarpathyFile = serde_json::from_str(&text)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let mut items = Vec::with_capacity(file.images.len());
    for (i, img) in file.images.into_iter().enumerate() {
        let ctx = |m: String| Error::Format(format!("{}: images[{i}]: {m}", path.display()));
        let split = Split::parse(&img.split).map_err(|e| ctx(e.to_string()))?;
        if img.sentences.is_empty() {
            return Err(ctx("no sentences".into()));
        }
        let mut rel = PathBuf::from(&img.filepath);
        if let Some(name) = &img.filename {
            rel.push(name);
        }
        rel.set_extension(extension);
        let id = img
            .cocoid
            .or(img.imgid)
            .map_or_else(|| i.to_string(), |v| v.to_string());
        let captions = img
            .sentences
            .into_iter()
            .map(|s| truncate_caption(s.tokens.iter().map(|t| t.to_lowercase()).collect()))
            .collect();
        items.push(CaptionItem {
            id,
            features: FeatureSource::File(feature_dir.as_ref().join(rel)),
            captions,
            split,
        });
    }
    Ok(CaptionDataset {
        items,
        vocabulary: None,
    })
}

/// On-disk dataset manifest: items with feature paths relative to the
/// manifest's directory.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocabulary: Option<Vec<String>>,
    pub items: Vec<ManifestItem>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestItem {
    pub id: String,
    pub features: String,
    pub split: Split,
    pub captions: Vec<String>,
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<CaptionDataset> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let m: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    if m.version != 1 {
        return Err(Error::Format(format!("unsupported manifest version {}", m.version)));
    }
    let base = path.parent().unwrap_or(Path::new("."));
    let mut items = Vec::with_capacity(m.items.len());
    for it in m.items {
        if it.captions.is_empty() {
            return Err(Error::Format(format!("item {} has no captions", it.id)));
        }
        items.push(CaptionItem {
            features: FeatureSource::File(base.join(&it.features)),
            captions: it
                .captions
                .iter()
                .map(|c| truncate_caption(tokenize(c)))
                .collect(),
            id: it.id,
            split: it.split,
        });
    }
    Ok(CaptionDataset {
        items,
        vocabulary: m.vocabulary,
    })
}

const COLORS: [&str; 8] = [
    "red", "green", "blue", "yellow", "black", "white", "purple", "orange",
];
const SHAPES: [&str; 8] = [
    "circle", "square", "triangle", "star", "cross", "ring", "heart", "diamond",
];
const RELATIONS: [&str; 8] = [
    "above", "below", "beside", "behind", "near", "under", "over", "inside",
];

/// Attribute ids of one synthetic scene: two colored shapes and a relation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SceneAttributes {
    pub color1: usize,
    pub shape1: usize,
    pub relation: usize,
    pub color2: usize,
    pub shape2: usize,
}

impl SceneAttributes {
    pub fn caption(&self) -> Vec<String> {
        [
            "a",
            COLORS[self.color1],
            SHAPES[self.shape1],
            RELATIONS[self.relation],
            "a",
            COLORS[self.color2],
            SHAPES[self.shape2],
        ]
        .iter()
        .map(|s| s.to_string())
        .collect()
    }
}

/// Grid layout of synthetic features: `(positions, channels)` per level.
pub const SYNTH_LEVELS: [(usize, usize); 4] = [(64, 8), (16, 16), (4, 32), (4, 64)];
const SYNTH_NOISE: f64 = 0.1;

/// A generated dataset together with its vocabulary and ground-truth attributes.
#[derive(Clone, Debug)]
pub struct SynthDataset {
    pub dataset: CaptionDataset,
    pub vocab: Vocabulary,
    pub attributes: Vec<SceneAttributes>,
}

/// Scenes are captioned `a <color> <shape> <relation> a <color> <shape>`.
/// Each attribute lights up its own channel block in one level: the first
/// color in level 0, the first shape in level 1, the relation in level 2, and
/// the second object in the two halves of level 3. All items are in the
/// train split.
pub fn synth_dataset(seed: u64, n_items: usize, grammar_size: usize) -> Result<SynthDataset> {
    if n_items == 0 {
        return Err(Error::Config("synthetic dataset needs at least one item".into()));
    }
    if !(2..=8).contains(&grammar_size) {
        return Err(Error::Config(format!(
            "grammar size {grammar_size} outside 2..=8"
        )));
    }
    let combos = grammar_size.pow(5);
    if n_items > combos {
        return Err(Error::Config(format!(
            "{n_items} distinct scenes requested but grammar {grammar_size} allows {combos}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = BTreeSet::new();
    let mut attributes = Vec::with_capacity(n_items);
    while attributes.len() < n_items {
        let mut pick = || rng.random_range(0..grammar_size);
        let a = SceneAttributes {
            color1: pick(),
            shape1: pick(),
            relation: pick(),
            color2: pick(),
            shape2: pick(),
        };
        if seen.insert(a) {
            attributes.push(a);
        }
    }
    let noise = Normal::new(0.0, SYNTH_NOISE).expect("valid normal");
    let mut items = Vec::with_capacity(n_items);
    for (i, a) in attributes.iter().enumerate() {
        let mut levels = Vec::with_capacity(4);
        for (level, &(n, c)) in SYNTH_LEVELS.iter().enumerate() {
            let blocks: Vec<(usize, usize, usize)> = match level {
                0 => vec![(0, c, a.color1)],
                1 => vec![(0, c, a.shape1)],
                2 => vec![(0, c, a.relation)],
                _ => vec![(0, c / 2, a.color2), (c / 2, c / 2, a.shape2)],
            };
            let mut data: Vec<f32> = (0..n * c).map(|_| noise.sample(&mut rng) as f32).collect();
            for (offset, span, id) in blocks {
                let width = span / grammar_size;
                for p in 0..n {
                    for k in 0..width {
                        data[p * c + offset + id * width + k] += 1.0;
                    }
                }
            }
            levels.push(Tensor::matrix(n, c, data)?);
        }
        items.push(CaptionItem {
            id: format!("synth{i:05}"),
            features: FeatureSource::Memory(Arc::new(GridFeatureSet::new(levels)?)),
            captions: vec![a.caption()],
            split: Split::Train,
        });
    }
    let words: Vec<&str> = std::iter::once("a")
        .chain(COLORS[..grammar_size].iter().copied())
        .chain(SHAPES[..grammar_size].iter().copied())
        .chain(RELATIONS[..grammar_size].iter().copied())
        .collect();
    let vocab = Vocabulary::from_tokens(&words);
    Ok(SynthDataset {
        dataset: CaptionDataset {
            items,
            vocabulary: Some(vocab.words().to_vec()),
        },
        vocab,
        attributes,
    })
}

impl SynthDataset {
    /// Writes one OFT file per item plus `manifest.json` into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<PathBuf> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut items = Vec::with_capacity(self.dataset.items.len());
        for it in &self.dataset.items {
            let rel = format!("{}.oft", it.id);
            it.features.load()?.save(dir.join(&rel))?;
            items.push(ManifestItem {
                id: it.id.clone(),
                features: rel,
                split: it.split,
                captions: it.captions.iter().map(|c| c.join(" ")).collect(),
            });
        }
        let manifest = Manifest {
            version: 1,
            vocabulary: self.dataset.vocabulary.clone(),
            items,
        };
        let path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

/// Deterministic shuffled order of `0..n` for one epoch.
pub fn epoch_order(n: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx
}
