//! Example sources and token-budget batching.
//!
//! Every example is framed as `src + [EOS]` for the encoder, `[BOS] + tgt` as
//! decoder input and `tgt + [EOS]` as decoder output.

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::mpsc::{sync_channel, Receiver};
use std::sync::Arc;
use std::thread::JoinHandle;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::model::{Specials, TokenBatch};
use crate::seed::{derive_seed, splitmix64};

use super::TrainError;

/// Ids below this are reserved for PAD, BOS and EOS in synthetic tasks.
pub const FIRST_CONTENT_ID: usize = 3;

/// Stream id of held-out examples; training streams are derived from seeds.
const VALID_STREAM: u64 = u64::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    Copy,
    Reverse,
    Sort,
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaskKind::Copy => "copy",
            TaskKind::Reverse => "reverse",
            TaskKind::Sort => "sort",
        })
    }
}

impl FromStr for TaskKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "copy" => Ok(TaskKind::Copy),
            "reverse" => Ok(TaskKind::Reverse),
            "sort" => Ok(TaskKind::Sort),
            _ => Err(format!("unknown task `{s}` (expected copy, reverse or sort)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub src: Vec<usize>,
    pub tgt: Vec<usize>,
}

/// Random content sequences whose target is a fixed function of the source.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SynthTask {
    pub kind: TaskKind,
    pub vocab_size: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub seed: u64,
}

impl SynthTask {
    pub fn new(kind: TaskKind, vocab_size: usize, min_len: usize, max_len: usize, seed: u64) -> Result<Self, TrainError> {
        if vocab_size <= FIRST_CONTENT_ID {
            return Err(TrainError::Data(format!(
                "vocabulary of {vocab_size} leaves no room for content after the {FIRST_CONTENT_ID} reserved ids"
            )));
        }
        if min_len == 0 || min_len > max_len {
            return Err(TrainError::Data(format!("bad length range {min_len}..={max_len}")));
        }
        Ok(SynthTask { kind, vocab_size, min_len, max_len, seed })
    }

    pub fn target_for(&self, src: &[usize]) -> Vec<usize> {
        let mut t = src.to_vec();
        match self.kind {
            TaskKind::Copy => {}
            TaskKind::Reverse => t.reverse(),
            TaskKind::Sort => t.sort_unstable(),
        }
        t
    }

    /// Example `index` of `stream`; a pure function of `(seed, stream, index)`.
    pub fn example(&self, stream: u64, index: u64) -> Example {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, "synth") ^ splitmix64(stream));
        rng.set_stream(index);
        let len = rng.gen_range(self.min_len..=self.max_len);
        let src: Vec<usize> = (0..len).map(|_| rng.gen_range(FIRST_CONTENT_ID..self.vocab_size)).collect();
        let tgt = self.target_for(&src);
        Example { src, tgt }
    }
}

/// `key = value` lines naming the special ids and vocabulary size.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VocabMeta {
    pub size: usize,
    pub specials: Specials,
}

impl VocabMeta {
    pub fn parse(text: &str) -> Result<Self, TrainError> {
        let mut size = None;
        let mut specials = Specials::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let bad = |m: &str| TrainError::Data(format!("vocab line {}: {m}", n + 1));
            let (k, v) = line.split_once('=').ok_or_else(|| bad("expected `name = id`"))?;
            let v: usize = v.trim().parse().map_err(|_| bad("id is not a non-negative integer"))?;
            match k.trim().to_ascii_lowercase().trim_matches(|c| c == '<' || c == '>') {
                "size" => size = Some(v),
                "pad" => specials.pad = v,
                "bos" => specials.bos = v,
                "eos" => specials.eos = v,
                other => return Err(bad(&format!("unknown name `{other}`"))),
            }
        }
        let size = size.ok_or_else(|| TrainError::Data("vocab file lacks `size`".into()))?;
        let meta = VocabMeta { size, specials };
        if [specials.pad, specials.bos, specials.eos].iter().any(|&id| id >= size) {
            return Err(TrainError::Data("special ids must be below the vocabulary size".into()));
        }
        Ok(meta)
    }
}

/// One sequence per line of whitespace-separated ids.
pub fn read_sequences(path: &Path) -> Result<Vec<Vec<usize>>, TrainError> {
    let text = std::fs::read_to_string(path).map_err(|source| TrainError::Io {
        path: path.display().to_string(),
        source,
    })?;
    text.lines()
        .enumerate()
        .map(|(n, line)| {
            line.split_whitespace()
                .map(|tok| {
                    tok.parse().map_err(|_| {
                        TrainError::Data(format!("{}:{}: `{tok}` is not a token id", path.display(), n + 1))
                    })
                })
                .collect()
        })
        .collect()
}

/// Pre-tokenized parallel files.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    pub train: Vec<Example>,
    pub valid: Vec<Example>,
    pub vocab: VocabMeta,
}

impl Corpus {
    pub fn load(
        train_src: &Path,
        train_tgt: &Path,
        valid_src: &Path,
        valid_tgt: &Path,
        vocab: &Path,
    ) -> Result<Self, TrainError> {
        let vocab_text = std::fs::read_to_string(vocab).map_err(|source| TrainError::Io {
            path: vocab.display().to_string(),
            source,
        })?;
        let vocab = VocabMeta::parse(&vocab_text)?;
        let pair = |s: &Path, t: &Path| -> Result<Vec<Example>, TrainError> {
            let (src, tgt) = (read_sequences(s)?, read_sequences(t)?);
            if src.len() != tgt.len() {
                return Err(TrainError::Data(format!(
                    "{} has {} lines but {} has {}",
                    s.display(),
                    src.len(),
                    t.display(),
                    tgt.len()
                )));
            }
            let examples: Vec<Example> = src.into_iter().zip(tgt).map(|(src, tgt)| Example { src, tgt }).collect();
            if let Some(id) = examples.iter().flat_map(|e| e.src.iter().chain(&e.tgt)).find(|&&id| id >= vocab.size) {
                return Err(TrainError::Data(format!("{}: token {id} outside vocabulary of {}", s.display(), vocab.size)));
            }
            Ok(examples)
        };
        let corpus = Corpus {
            train: pair(train_src, train_tgt)?,
            valid: pair(valid_src, valid_tgt)?,
            vocab,
        };
        if corpus.train.is_empty() {
            return Err(TrainError::Data("training corpus is empty".into()));
        }
        Ok(corpus)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Dataset {
    Synth(SynthTask),
    Corpus(Corpus),
}

impl Dataset {
    pub fn vocab_size(&self) -> usize {
        match self {
            Dataset::Synth(t) => t.vocab_size,
            Dataset::Corpus(c) => c.vocab.size,
        }
    }

    /// Training example `index` of `stream`. Corpus examples are drawn
    /// uniformly with replacement by hashing `(stream, index)`.
    pub fn train_example(&self, stream: u64, index: u64) -> Example {
        match self {
            Dataset::Synth(t) => t.example(stream, index),
            Dataset::Corpus(c) => {
                let h = splitmix64(splitmix64(stream) ^ index);
                c.train[(h % c.train.len() as u64) as usize].clone()
            }
        }
    }

    /// The first `count` held-out examples (all of them for a corpus when
    /// `count` exceeds its size).
    pub fn valid_examples(&self, count: usize) -> Vec<Example> {
        match self {
            Dataset::Synth(t) => (0..count as u64).map(|i| t.example(VALID_STREAM, i)).collect(),
            Dataset::Corpus(c) => c.valid.iter().take(count).cloned().collect(),
        }
    }
}

/// Framed, padded tensors for one step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub src: TokenBatch,
    pub tgt_in: TokenBatch,
    pub tgt_out: TokenBatch,
    /// Non-pad decoder output tokens.
    pub target_tokens: usize,
}

impl Batch {
    pub fn from_examples(examples: &[Example], sp: Specials) -> Result<Self, TrainError> {
        let frame = |body: &[usize], pre: Option<usize>, post: Option<usize>| -> Vec<usize> {
            pre.into_iter().chain(body.iter().copied()).chain(post).collect()
        };
        let src: Vec<_> = examples.iter().map(|e| frame(&e.src, None, Some(sp.eos))).collect();
        let tin: Vec<_> = examples.iter().map(|e| frame(&e.tgt, Some(sp.bos), None)).collect();
        let tout: Vec<_> = examples.iter().map(|e| frame(&e.tgt, None, Some(sp.eos))).collect();
        let tgt_out = TokenBatch::from_sequences(&tout, sp.pad)?;
        Ok(Batch {
            src: TokenBatch::from_sequences(&src, sp.pad)?,
            tgt_in: TokenBatch::from_sequences(&tin, sp.pad)?,
            target_tokens: tgt_out.count_non_pad(sp.pad),
            tgt_out,
        })
    }

    pub fn rows(&self) -> usize {
        self.src.rows()
    }
}

fn framed_len(e: &Example) -> usize {
    e.src.len().max(e.tgt.len()) + 1
}

/// Groups consecutive examples while `rows × longest framed length` stays
/// within the token budget; a batch always holds at least one example.
#[derive(Debug, Clone)]
pub struct BatchStream {
    dataset: Arc<Dataset>,
    specials: Specials,
    batch_tokens: usize,
    stream: u64,
    next_index: u64,
    pending: Option<Example>,
}

impl BatchStream {
    pub fn new(dataset: Arc<Dataset>, specials: Specials, batch_tokens: usize, stream: u64) -> Self {
        BatchStream {
            dataset,
            specials,
            batch_tokens,
            stream,
            next_index: 0,
            pending: None,
        }
    }

    fn pull(&mut self) -> Example {
        self.pending.take().unwrap_or_else(|| {
            let e = self.dataset.train_example(self.stream, self.next_index);
            self.next_index += 1;
            e
        })
    }

    pub fn next_batch(&mut self) -> Result<Batch, TrainError> {
        let first = self.pull();
        let mut longest = framed_len(&first);
        let mut group = vec![first];
        loop {
            let e = self.pull();
            let l = longest.max(framed_len(&e));
            if l * (group.len() + 1) > self.batch_tokens {
                self.pending = Some(e);
                break;
            }
            longest = l;
            group.push(e);
        }
        Batch::from_examples(&group, self.specials)
    }
}

impl Iterator for BatchStream {
    type Item = Result<Batch, TrainError>;
    fn next(&mut self) -> Option<Self::Item> {
        Some(self.next_batch())
    }
}

/// `count` training batches of `task`, reproducible per `seed`.
pub fn make_batches(task: &SynthTask, count: usize, batch_tokens: usize, seed: u64) -> Result<Vec<Batch>, TrainError> {
    let mut stream = BatchStream::new(
        Arc::new(Dataset::Synth(task.clone())),
        Specials::default(),
        batch_tokens,
        derive_seed(seed, "train-data"),
    );
    (0..count).map(|_| stream.next_batch()).collect()
}

/// Runs a [`BatchStream`] on a background thread behind a bounded queue. The
/// single producer keeps delivery order identical to inline generation.
pub struct Prefetcher {
    rx: Option<Receiver<Result<Batch, TrainError>>>,
    handle: Option<JoinHandle<()>>,
}

impl Prefetcher {
    pub fn spawn(mut stream: BatchStream, depth: usize) -> Self {
        let (tx, rx) = sync_channel(depth.max(1));
        let handle = std::thread::spawn(move || {
            while tx.send(stream.next_batch()).is_ok() {}
        });
        Prefetcher { rx: Some(rx), handle: Some(handle) }
    }

    pub fn next_batch(&mut self) -> Result<Batch, TrainError> {
        self.rx
            .as_ref()
            .and_then(|rx| rx.recv().ok())
            .unwrap_or_else(|| Err(TrainError::Data("batch producer stopped".into())))
    }
}

impl Drop for Prefetcher {
    fn drop(&mut self) {
        self.rx.take();
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn task(kind: TaskKind) -> SynthTask {
        SynthTask::new(kind, 20, 2, 9, 5).unwrap()
    }

    #[test]
    fn targets_follow_the_task() {
        for kind in [TaskKind::Copy, TaskKind::Reverse, TaskKind::Sort] {
            let t = task(kind);
            for i in 0..1000 {
                let e = t.example(3, i);
                let mut want = e.src.clone();
                match kind {
                    TaskKind::Copy => {}
                    TaskKind::Reverse => want = e.src.iter().rev().copied().collect(),
                    TaskKind::Sort => {
                        // insertion sort as an independent oracle
                        for j in 1..want.len() {
                            let mut k = j;
                            while k > 0 && want[k - 1] > want[k] {
                                want.swap(k - 1, k);
                                k -= 1;
                            }
                        }
                    }
                }
                assert_eq!(e.tgt, want);
                assert!((2..=9).contains(&e.src.len()));
                assert!(e.src.iter().all(|&x| (FIRST_CONTENT_ID..20).contains(&x)));
            }
        }
    }

    #[test]
    fn batches_are_framed_padded_and_reproducible() {
        let t = task(TaskKind::Copy);
        let a = make_batches(&t, 5, 64, 7).unwrap();
        assert_eq!(a, make_batches(&t, 5, 64, 7).unwrap());
        assert_ne!(a, make_batches(&t, 5, 64, 8).unwrap());
        for b in &a {
            assert!(b.rows() * b.tgt_in.len() <= 64);
            for r in 0..b.rows() {
                assert_eq!(b.tgt_in.row(r)[0], 1);
                let body: Vec<_> = b.tgt_out.row(r).iter().copied().take_while(|&x| x != 0).collect();
                assert_eq!(*body.last().unwrap(), 2);
                let src: Vec<_> = b.src.row(r).iter().copied().take_while(|&x| x != 0).collect();
                assert_eq!(src, body);
            }
        }
    }

    #[test]
    fn prefetch_preserves_order() {
        let ds = Arc::new(Dataset::Synth(task(TaskKind::Sort)));
        let mut inline = BatchStream::new(ds.clone(), Specials::default(), 40, 11);
        let mut queued = Prefetcher::spawn(BatchStream::new(ds, Specials::default(), 40, 11), 3);
        for _ in 0..20 {
            assert_eq!(inline.next_batch().unwrap(), queued.next_batch().unwrap());
        }
    }

    #[test]
    fn vocab_meta_parsing() {
        let m = VocabMeta::parse("# specials\nsize = 50\n<pad> = 3\nbos = 4\neos = 5\n").unwrap();
        assert_eq!(m.size, 50);
        assert_eq!((m.specials.pad, m.specials.bos, m.specials.eos), (3, 4, 5));
        assert!(VocabMeta::parse("pad = 0\n").is_err());
        assert!(VocabMeta::parse("size = 2\n").is_err());
    }
}
