//! Per-image forward-pass artifacts kept for filter-only recounts.

use std::num::NonZeroUsize;
use std::sync::{Arc, Mutex};

use countpp::filtering::{filter_queries, FilterDecision, Rejection, SimilarityPair};
use countpp::geometry::BBox;
use countpp::model::Model;
use countpp::prompts::{ClassPrompt, PromptSpec};
use countpp::{ImageStore, ImageTensor, Result};
use lru::LruCache;
use ndarray::{concatenate, Array2, Axis};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Role {
    Positive,
    Negative,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct CacheKey {
    pub image_id: String,
    pub prompt_hash: String,
    pub role: Role,
}

/// Hex digest of a class prompt's canonical JSON.
pub fn prompt_hash(class: &ClassPrompt) -> String {
    let json = serde_json::to_vec(class).expect("prompt serialises");
    Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug)]
pub enum Entry {
    /// Pass with the positive class alone: query features, boxes and the
    /// positive similarity columns.
    Positive { query_features: Array2<f64>, boxes: Vec<BBox>, logits: Array2<f64> },
    /// Enhanced features of a negative class prompted on its own.
    Negative { prompt_features: Array2<f64> },
}

pub struct ForwardCache {
    inner: Mutex<LruCache<CacheKey, Arc<Entry>>>,
}

impl ForwardCache {
    pub fn new(capacity: usize) -> Self {
        let cap = NonZeroUsize::new(capacity.max(1)).expect("non-zero");
        Self { inner: Mutex::new(LruCache::new(cap)) }
    }

    pub fn len(&self) -> usize {
        self.inner.lock().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn capacity(&self) -> usize {
        self.inner.lock().expect("cache lock").cap().get()
    }

    pub fn clear(&self) {
        self.inner.lock().expect("cache lock").clear();
    }

    pub fn contains(&self, key: &CacheKey) -> bool {
        self.inner.lock().expect("cache lock").contains(key)
    }

    /// Looks `key` up, computing and inserting it on a miss. The computation
    /// runs outside the lock; concurrent misses compute identical values.
    pub fn get_or_try_insert(&self, key: CacheKey, make: impl FnOnce() -> Result<Entry>) -> Result<(Arc<Entry>, bool)> {
        if let Some(e) = self.inner.lock().expect("cache lock").get(&key) {
            return Ok((e.clone(), true));
        }
        let e = Arc::new(make()?);
        self.inner.lock().expect("cache lock").put(key, e.clone());
        Ok((e, false))
    }
}

/// Result of the filter-only path.
pub struct CachedCount {
    pub decision: FilterDecision,
    pub boxes: Vec<BBox>,
    /// True when every artifact came from the cache.
    pub hit: bool,
}

impl CachedCount {
    pub fn negative_boxes(&self) -> Vec<BBox> {
        self.decision
            .reasons
            .iter()
            .enumerate()
            .filter(|(_, r)| **r == Some(Rejection::NegativeDominates))
            .map(|(i, _)| self.boxes[i])
            .collect()
    }
}

/// Counts with queries and positive logits from a positive-only pass and
/// negative logits scored against those same queries. Adding a negative
/// class only appends columns, so the kept set can only shrink.
pub fn cached_count(
    cache: &ForwardCache,
    model: &Model,
    store: &dyn ImageStore,
    image_id: &str,
    image: &ImageTensor,
    spec: &PromptSpec,
    sigma: f64,
) -> Result<CachedCount> {
    spec.validate()?;
    let key = |c: &ClassPrompt, role| CacheKey { image_id: image_id.to_string(), prompt_hash: prompt_hash(c), role };
    let solo = |c: &ClassPrompt| PromptSpec::new(c.clone(), vec![]);
    let (pos, mut hit) = cache.get_or_try_insert(key(&spec.positive, Role::Positive), || {
        let inf = model.infer(image, image_id, &solo(&spec.positive), store)?;
        let sim = inf.similarity()?;
        Ok(Entry::Positive { query_features: inf.query_features, boxes: inf.batch.boxes, logits: sim.pos })
    })?;
    let Entry::Positive { query_features, boxes, logits } = &*pos else { unreachable!("positive key holds a positive entry") };
    let mut neg_cols: Vec<Array2<f64>> = Vec::new();
    for c in &spec.negatives {
        let (e, h) = cache.get_or_try_insert(key(c, Role::Negative), || {
            let inf = model.infer(image, image_id, &solo(c), store)?;
            let rows = inf.groups.positive_columns();
            Ok(Entry::Negative { prompt_features: inf.prompt_features.select(Axis(0), &rows) })
        })?;
        hit &= h;
        let Entry::Negative { prompt_features } = &*e else { unreachable!("negative key holds a negative entry") };
        neg_cols.push(model.score(query_features, prompt_features)?);
    }
    let neg = if neg_cols.is_empty() {
        Array2::zeros((logits.nrows(), 0))
    } else {
        let views: Vec<_> = neg_cols.iter().map(|a| a.view()).collect();
        concatenate(Axis(1), &views).expect("equal row counts")
    };
    let decision = filter_queries(&SimilarityPair::new(logits.clone(), neg)?, sigma)?;
    Ok(CachedCount { decision, boxes: boxes.clone(), hit })
}
