//! Two-region KV storage.
//!
//! A shared prefix is decompressed once into per-head keys and values and
//! then frozen. Everything past the prefix lives in compressed form in a
//! paged pool: fixed-size blocks handed out to sequences through per-sequence
//! page tables.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap};
use std::hash::{Hash, Hasher};
use std::sync::Arc;

use serde::Serialize;

use crate::error::{arg_err, shape_err, Error, Result};
use crate::mla::{expand_kv, ExpandedKv, LatentKv, MlaConfig, MlaWeights};
use crate::numerics::Scalar;

pub const DEFAULT_BLOCK_SIZE: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct PrefixId(pub u64);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct SeqId(pub u64);

/// Client-side view of a registered sequence. `len` is the number of
/// compressed (non-shared) tokens at the time the handle was issued.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SequenceHandle {
    pub seq: SeqId,
    pub prefix: Option<PrefixId>,
    pub len: usize,
}

/// Shared prefix in expanded form. Immutable once sealed; the compressed
/// latents are kept alongside for absorb-only execution.
#[derive(Debug, PartialEq)]
pub struct SharedPrefixCache<T> {
    id: PrefixId,
    tokens: Vec<ExpandedKv<T>>,
    latents: Vec<LatentKv<T>>,
}

impl<T: Scalar> SharedPrefixCache<T> {
    pub fn id(&self) -> PrefixId {
        self.id
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[ExpandedKv<T>] {
        &self.tokens
    }

    pub fn latents(&self) -> &[LatentKv<T>] {
        &self.latents
    }

    /// `L_s · H · (D_qk + D_v)`
    pub fn expanded_elements(&self) -> usize {
        self.tokens
            .iter()
            .map(|t| t.k.iter().chain(&t.v).map(Vec::len).sum::<usize>())
            .sum()
    }

    pub fn latent_elements(&self) -> usize {
        self.latents.iter().map(|l| l.nope.len() + l.pe.len()).sum()
    }

    /// Hash over the exact bit patterns of every stored element.
    pub fn fingerprint(&self) -> u64 {
        let mut hasher = std::collections::hash_map::DefaultHasher::new();
        self.id.hash(&mut hasher);
        let mut feed = |xs: &[T]| {
            for x in xs {
                x.as_f64().to_bits().hash(&mut hasher);
            }
        };
        for t in &self.tokens {
            t.k.iter().chain(&t.v).for_each(|v| feed(v));
        }
        for l in &self.latents {
            feed(&l.nope);
            feed(&l.pe);
        }
        hasher.finish()
    }
}

/// Expand every prefix latent into per-head K/V and freeze the result.
pub fn seal_shared_prefix<T: Scalar>(
    id: PrefixId,
    latents: Vec<LatentKv<T>>,
    w: &MlaWeights<T>,
) -> Result<SharedPrefixCache<T>> {
    if latents.is_empty() {
        return arg_err("shared prefix must contain at least one token");
    }
    let tokens = latents.iter().map(|l| expand_kv(l, w)).collect::<Result<Vec<_>>>()?;
    Ok(SharedPrefixCache { id, tokens, latents })
}

#[derive(Debug, Clone)]
struct PageTable {
    prefix: Option<PrefixId>,
    pages: Vec<usize>,
    len: usize,
}

/// Block-paged pool of compressed latents.
#[derive(Debug, Clone)]
pub struct PagedLatentCache<T> {
    block_size: usize,
    nope_dim: usize,
    pe_dim: usize,
    pages: Vec<Vec<LatentKv<T>>>,
    // Min-heap: the lowest free page is handed out first.
    free: BinaryHeap<Reverse<usize>>,
    tables: BTreeMap<SeqId, PageTable>,
    next_seq: u64,
}

impl<T: Scalar> PagedLatentCache<T> {
    pub fn new(block_size: usize, num_pages: usize, nope_dim: usize, pe_dim: usize) -> Result<Self> {
        if block_size == 0 {
            return arg_err("block size must be at least 1");
        }
        Ok(Self {
            block_size,
            nope_dim,
            pe_dim,
            pages: (0..num_pages).map(|_| Vec::new()).collect(),
            free: (0..num_pages).map(Reverse).collect(),
            tables: BTreeMap::new(),
            next_seq: 0,
        })
    }

    pub fn block_size(&self) -> usize {
        self.block_size
    }

    pub fn total_pages(&self) -> usize {
        self.pages.len()
    }

    pub fn free_pages(&self) -> usize {
        self.free.len()
    }

    pub fn used_pages(&self) -> usize {
        self.tables.values().map(|t| t.pages.len()).sum()
    }

    pub fn num_sequences(&self) -> usize {
        self.tables.len()
    }

    pub fn total_tokens(&self) -> usize {
        self.tables.values().map(|t| t.len).sum()
    }

    pub fn register(&mut self, prefix: Option<PrefixId>) -> SequenceHandle {
        let seq = SeqId(self.next_seq);
        self.next_seq += 1;
        self.tables.insert(
            seq,
            PageTable {
                prefix,
                pages: Vec::new(),
                len: 0,
            },
        );
        SequenceHandle { seq, prefix, len: 0 }
    }

    fn table(&self, seq: SeqId) -> Result<&PageTable> {
        self.tables
            .get(&seq)
            .ok_or_else(|| Error::NotFound(format!("sequence {}", seq.0)))
    }

    /// Current handle for a registered sequence.
    pub fn handle(&self, seq: SeqId) -> Result<SequenceHandle> {
        let t = self.table(seq)?;
        Ok(SequenceHandle {
            seq,
            prefix: t.prefix,
            len: t.len,
        })
    }

    pub fn pages_of(&self, seq: SeqId) -> Result<&[usize]> {
        Ok(&self.table(seq)?.pages)
    }

    /// Append one latent. A new page is taken from the pool exactly when
    /// the sequence length is a multiple of the block size.
    pub fn append_token(&mut self, seq: &SequenceHandle, latent: LatentKv<T>) -> Result<SequenceHandle> {
        if latent.nope.len() != self.nope_dim || latent.pe.len() != self.pe_dim {
            return shape_err(format!(
                "latent has nope/pe lengths {}/{}, cache expects {}/{}",
                latent.nope.len(),
                latent.pe.len(),
                self.nope_dim,
                self.pe_dim
            ));
        }
        let block_size = self.block_size;
        let table = self
            .tables
            .get_mut(&seq.seq)
            .ok_or_else(|| Error::NotFound(format!("sequence {}", seq.seq.0)))?;
        if table.len % block_size == 0 {
            let Reverse(page) = self.free.pop().ok_or_else(|| {
                Error::Capacity(format!(
                    "no free pages for sequence {} ({} pages total)",
                    seq.seq.0,
                    self.pages.len()
                ))
            })?;
            table.pages.push(page);
        }
        let page = *table.pages.last().expect("page allocated above");
        self.pages[page].push(latent);
        table.len += 1;
        Ok(SequenceHandle {
            seq: seq.seq,
            prefix: table.prefix,
            len: table.len,
        })
    }

    /// Drop a sequence and return its pages to the pool.
    pub fn release_sequence(&mut self, seq: &SequenceHandle) -> Result<usize> {
        let table = self
            .tables
            .remove(&seq.seq)
            .ok_or_else(|| Error::NotFound(format!("sequence {}", seq.seq.0)))?;
        let freed = table.pages.len();
        for p in table.pages {
            self.pages[p].clear();
            self.free.push(Reverse(p));
        }
        Ok(freed)
    }

    /// Tokens of a sequence in append order, borrowed from the pool.
    pub fn iter_sequence(&self, seq: SeqId) -> Result<impl Iterator<Item = &LatentKv<T>> + Clone> {
        let table = self.table(seq)?;
        Ok(table.pages.iter().flat_map(move |&p| self.pages[p].iter()))
    }

    pub fn gather_sequence(&self, seq: &SequenceHandle) -> Result<Vec<LatentKv<T>>> {
        Ok(self.iter_sequence(seq.seq)?.cloned().collect())
    }
}

/// Byte and page accounting for the whole store.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CacheStats {
    pub block_size: usize,
    pub pages_total: usize,
    pub pages_used: usize,
    pub pages_free: usize,
    pub sequences: usize,
    pub compressed_tokens: usize,
    pub compressed_elements: usize,
    pub shared_prefixes: usize,
    pub shared_tokens: usize,
    pub expanded_shared_elements: usize,
    pub retained_shared_latent_elements: usize,
    pub element_bytes: usize,
    pub compressed_bytes: usize,
    pub expanded_shared_bytes: usize,
    pub retained_shared_latent_bytes: usize,
}

/// Shared prefixes plus the paged tail pool.
#[derive(Debug)]
pub struct KvStore<T> {
    config: MlaConfig,
    prefixes: BTreeMap<PrefixId, Arc<SharedPrefixCache<T>>>,
    paged: PagedLatentCache<T>,
    prefix_builds: usize,
}

impl<T: Scalar> KvStore<T> {
    pub fn new(config: &MlaConfig, block_size: usize, num_pages: usize) -> Result<Self> {
        Ok(Self {
            config: config.clone(),
            prefixes: BTreeMap::new(),
            paged: PagedLatentCache::new(block_size, num_pages, config.kv_lora_rank, config.rope_dim)?,
            prefix_builds: 0,
        })
    }

    pub fn config(&self) -> &MlaConfig {
        &self.config
    }

    pub fn paged(&self) -> &PagedLatentCache<T> {
        &self.paged
    }

    pub fn paged_mut(&mut self) -> &mut PagedLatentCache<T> {
        &mut self.paged
    }

    /// Seal and register a prefix. Each id can be sealed once.
    pub fn seal_prefix(
        &mut self,
        id: PrefixId,
        latents: Vec<LatentKv<T>>,
        w: &MlaWeights<T>,
    ) -> Result<Arc<SharedPrefixCache<T>>> {
        if self.prefixes.contains_key(&id) {
            return arg_err(format!("prefix {} is already sealed", id.0));
        }
        let cache = Arc::new(seal_shared_prefix(id, latents, w)?);
        self.prefix_builds += 1;
        self.prefixes.insert(id, Arc::clone(&cache));
        Ok(cache)
    }

    pub fn prefix(&self, id: PrefixId) -> Result<&Arc<SharedPrefixCache<T>>> {
        self.prefixes
            .get(&id)
            .ok_or_else(|| Error::NotFound(format!("prefix {}", id.0)))
    }

    pub fn has_prefix(&self, id: PrefixId) -> bool {
        self.prefixes.contains_key(&id)
    }

    /// Number of prefix expansions performed so far.
    pub fn prefix_builds(&self) -> usize {
        self.prefix_builds
    }

    /// Register a sequence attached to an (optional) sealed prefix.
    pub fn register(&mut self, prefix: Option<PrefixId>) -> Result<SequenceHandle> {
        if let Some(id) = prefix {
            self.prefix(id)?;
        }
        Ok(self.paged.register(prefix))
    }

    pub fn append_token(&mut self, seq: &SequenceHandle, latent: LatentKv<T>) -> Result<SequenceHandle> {
        self.paged.append_token(seq, latent)
    }

    pub fn release_sequence(&mut self, seq: &SequenceHandle) -> Result<usize> {
        self.paged.release_sequence(seq)
    }

    pub fn stats(&self) -> CacheStats {
        let element_bytes = std::mem::size_of::<T>();
        let compressed_tokens = self.paged.total_tokens();
        let compressed_elements = compressed_tokens * self.config.latent_dim();
        let expanded: usize = self.prefixes.values().map(|p| p.expanded_elements()).sum();
        let retained: usize = self.prefixes.values().map(|p| p.latent_elements()).sum();
        CacheStats {
            block_size: self.paged.block_size(),
            pages_total: self.paged.total_pages(),
            pages_used: self.paged.used_pages(),
            pages_free: self.paged.free_pages(),
            sequences: self.paged.num_sequences(),
            compressed_tokens,
            compressed_elements,
            shared_prefixes: self.prefixes.len(),
            shared_tokens: self.prefixes.values().map(|p| p.len()).sum(),
            expanded_shared_elements: expanded,
            retained_shared_latent_elements: retained,
            element_bytes,
            compressed_bytes: compressed_elements * element_bytes,
            expanded_shared_bytes: expanded * element_bytes,
            retained_shared_latent_bytes: retained * element_bytes,
        }
    }
}
