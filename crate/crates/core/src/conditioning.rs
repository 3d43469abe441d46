//! Class registry, prompt templates and the hashed-vocabulary text encoder.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use candle_core::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{invalid, Error, Result};
use crate::nn::{Init, ParamStore};

/// Which prompt template a class uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    /// Multi-class clip recognition.
    Action,
    /// Binary video-level event recognition.
    Event,
}

impl FromStr for TaskKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "action" => Ok(Self::Action),
            "event" => Ok(Self::Event),
            other => Err(invalid!("unknown task kind {other:?}")),
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Action => write!(f, "action"),
            Self::Event => write!(f, "event"),
        }
    }
}

/// Fill the prompt template for `task` with a class name.
pub fn prompt_template(class_name: &str, task: TaskKind) -> String {
    match task {
        TaskKind::Action => format!("action recognition task of {class_name}"),
        TaskKind::Event => format!("a complication of {class_name}"),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassEntry {
    pub id: usize,
    pub name: String,
    pub template: TaskKind,
    pub under_represented: bool,
}

/// Bijective mapping between label ids and class names.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassRegistry {
    classes: Vec<ClassEntry>,
}

impl ClassRegistry {
    pub fn new(mut classes: Vec<ClassEntry>) -> Result<Self> {
        classes.sort_by_key(|c| c.id);
        let mut names = BTreeSet::new();
        for (i, c) in classes.iter().enumerate() {
            if c.id != i {
                return Err(invalid!("class ids must be 0..n without gaps, found {}", c.id));
            }
            if !names.insert(c.name.clone()) {
                return Err(invalid!("duplicate class name {:?}", c.name));
            }
        }
        if classes.is_empty() {
            return Err(invalid!("registry needs at least one class"));
        }
        Ok(Self { classes })
    }

    /// Registry where every class shares the same template.
    pub fn from_names(names: &[&str], task: TaskKind, under_represented: &[usize]) -> Result<Self> {
        Self::new(
            names
                .iter()
                .enumerate()
                .map(|(id, n)| ClassEntry {
                    id,
                    name: n.to_string(),
                    template: task,
                    under_represented: under_represented.contains(&id),
                })
                .collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn classes(&self) -> &[ClassEntry] {
        &self.classes
    }

    pub fn get(&self, id: usize) -> Option<&ClassEntry> {
        self.classes.get(id)
    }

    pub fn id_of(&self, name: &str) -> Option<usize> {
        self.classes.iter().find(|c| c.name == name).map(|c| c.id)
    }

    pub fn name_of(&self, id: usize) -> Option<&str> {
        self.classes.get(id).map(|c| c.name.as_str())
    }

    pub fn under_represented(&self) -> Vec<usize> {
        self.classes
            .iter()
            .filter(|c| c.under_represented)
            .map(|c| c.id)
            .collect()
    }

    /// Prompt for a registered class under the given task template.
    pub fn build_prompt(&self, class_name: &str, task: TaskKind) -> Result<String> {
        if self.id_of(class_name).is_none() {
            return Err(invalid!("unknown class {class_name:?}"));
        }
        Ok(prompt_template(class_name, task))
    }

    /// Prompt for a label id using the class's own template.
    pub fn prompt_for(&self, id: usize) -> Result<String> {
        let c = self
            .get(id)
            .ok_or_else(|| invalid!("label {id} out of range"))?;
        Ok(prompt_template(&c.name, c.template))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let r: ClassRegistry = serde_json::from_str(s)?;
        Self::new(r.classes)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, self.to_json()?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&s)
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("registry serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

pub const START_TOKEN: u32 = 0;
pub const PAD_TOKEN: u32 = 1;
pub const UNKNOWN_TOKEN: u32 = 2;
/// Stands in for a dropped prompt during conditioning dropout.
pub const NULL_TOKEN: u32 = 3;
const RESERVED: u32 = 4;

/// Hashed word vocabulary.
///
/// Known words hash to `4 + (sha256(word)[..8] mod (size - 4))`; ids 0..4
/// are start, pad, unknown and null. Any word outside the known set maps
/// to the unknown bucket.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub size: usize,
    pub max_tokens: usize,
    known: BTreeMap<String, u32>,
}

fn normalize_words(prompt: &str) -> Vec<String> {
    prompt
        .split_whitespace()
        .map(|w| {
            w.chars()
                .filter(|c| c.is_alphanumeric() || *c == '-' || *c == '_')
                .collect::<String>()
                .to_lowercase()
        })
        .filter(|w| !w.is_empty())
        .collect()
}

fn bucket(word: &str, size: usize) -> u32 {
    let digest = Sha256::digest(word.as_bytes());
    let h = u64::from_le_bytes(digest[..8].try_into().unwrap());
    RESERVED + (h % (size as u64 - RESERVED as u64)) as u32
}

impl Vocabulary {
    /// Build from a prompt corpus. Fails if two distinct known words share a
    /// bucket, since that would make distinct prompts indistinguishable.
    pub fn from_prompts<S: AsRef<str>>(prompts: &[S], size: usize, max_tokens: usize) -> Result<Self> {
        if size <= RESERVED as usize {
            return Err(invalid!("vocabulary size must exceed {RESERVED}"));
        }
        if max_tokens == 0 {
            return Err(invalid!("max_tokens must be positive"));
        }
        let mut known = BTreeMap::new();
        let mut used: BTreeMap<u32, String> = BTreeMap::new();
        for p in prompts {
            for w in normalize_words(p.as_ref()) {
                if known.contains_key(&w) {
                    continue;
                }
                let id = bucket(&w, size);
                if let Some(other) = used.get(&id) {
                    return Err(invalid!(
                        "words {other:?} and {w:?} collide in a vocabulary of {size}; enlarge it"
                    ));
                }
                used.insert(id, w.clone());
                known.insert(w, id);
            }
        }
        Ok(Self {
            size,
            max_tokens,
            known,
        })
    }

    pub fn for_registry(registry: &ClassRegistry, size: usize, max_tokens: usize) -> Result<Self> {
        let prompts: Vec<String> = (0..registry.len())
            .map(|i| registry.prompt_for(i))
            .collect::<Result<_>>()?;
        Self::from_prompts(&prompts, size, max_tokens)
    }

    /// Start token followed by word ids, truncated to `max_tokens`.
    pub fn token_ids(&self, prompt: &str) -> Vec<u32> {
        let mut ids = vec![START_TOKEN];
        for w in normalize_words(prompt) {
            ids.push(*self.known.get(&w).unwrap_or(&UNKNOWN_TOKEN));
        }
        ids.truncate(self.max_tokens);
        ids
    }

    /// `token_ids` right-padded to `max_tokens`.
    pub fn padded_ids(&self, prompt: &str) -> Vec<u32> {
        let mut ids = self.token_ids(prompt);
        ids.resize(self.max_tokens, PAD_TOKEN);
        ids
    }

    pub fn null_ids(&self) -> Vec<u32> {
        let mut ids = vec![NULL_TOKEN];
        ids.resize(self.max_tokens, PAD_TOKEN);
        ids
    }
}

/// Learned lookup table over the hashed vocabulary. No contextualization.
#[derive(Debug, Clone)]
pub struct TextEncoder {
    vocab: Vocabulary,
    table: Tensor,
}

impl TextEncoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        vocab: Vocabulary,
        dim: usize,
    ) -> Result<Self> {
        let table = store.get(
            "text.token_embedding",
            &[vocab.size, dim],
            Init::Normal { std: 1.0 },
            rng,
        )?;
        Ok(Self { vocab, table })
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn dim(&self) -> usize {
        self.table.dim(1).unwrap_or(0)
    }

    /// (len, dim) embedding of a prompt, `len = min(1 + words, max_tokens)`.
    pub fn embed_text(&self, prompt: &str) -> Result<Tensor> {
        self.embed_ids(&self.vocab.token_ids(prompt))
    }

    pub fn embed_ids(&self, ids: &[u32]) -> Result<Tensor> {
        let idx = Tensor::from_slice(ids, ids.len(), self.table.device())?;
        Ok(self.table.index_select(&idx, 0)?)
    }

    /// (batch, max_tokens, dim) embeddings for padded id rows.
    pub fn embed_batch(&self, rows: &[Vec<u32>]) -> Result<Tensor> {
        let len = self.vocab.max_tokens;
        let mut flat = Vec::with_capacity(rows.len() * len);
        for r in rows {
            if r.len() != len {
                return Err(Error::Shape(format!("token row of length {} (expected {len})", r.len())));
            }
            flat.extend_from_slice(r);
        }
        let e = self.embed_ids(&flat)?;
        Ok(e.reshape((rows.len(), len, self.dim()))?)
    }
}

/// Everything the denoiser is conditioned on for one clip, apart from the
/// timestep.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConditioningContext {
    pub prompt: String,
    /// Padded token ids.
    pub token_ids: Vec<u32>,
    pub class_label: Option<usize>,
}

impl ConditioningContext {
    pub fn new(vocab: &Vocabulary, prompt: &str, class_label: Option<usize>) -> Self {
        Self {
            prompt: prompt.to_string(),
            token_ids: vocab.padded_ids(prompt),
            class_label,
        }
    }

    /// Context with the prompt replaced by the null token and the label (if
    /// any) replaced by the null class.
    pub fn dropped(&self, vocab: &Vocabulary, null_class: usize) -> Self {
        Self {
            prompt: String::new(),
            token_ids: vocab.null_ids(),
            class_label: self.class_label.map(|_| null_class),
        }
    }
}
