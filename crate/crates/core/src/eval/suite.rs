use std::ops::Range;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::container::fnv1a64;
use crate::error::{Error, Result};
use crate::model::TokenId;
use crate::train::Example;

pub const BOS: TokenId = 0;
/// Closes every frame in both task and general text.
pub const FILL: TokenId = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SuiteConfig {
    pub seed: u64,
    pub n_tasks: usize,
    pub examples_per_task: usize,
    /// Share of each task's training set replaced by general-corpus sequences.
    pub gamma: f64,
    pub general_examples: usize,
    /// Size of the shared word alphabet; task answers are words.
    pub answer_tokens: usize,
    pub domain_size: usize,
    /// Query/answer pairs per task training sequence.
    pub pairs_per_example: usize,
    pub heldout_tasks: usize,
    pub items_per_task: usize,
    /// Solved pairs shown before the query in a multiple-choice prompt.
    pub context_pairs: usize,
    pub candidates: usize,
    /// Frames per general-corpus sequence.
    pub general_frames: usize,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_tasks: 10,
            examples_per_task: 512,
            gamma: 0.0,
            general_examples: 512,
            answer_tokens: 8,
            domain_size: 3,
            pairs_per_example: 6,
            heldout_tasks: 10,
            items_per_task: 40,
            context_pairs: 3,
            candidates: 4,
            general_frames: 9,
        }
    }
}

/// Token ranges of the suite vocabulary.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    pub answers: Range<TokenId>,
    pub domains: Vec<Range<TokenId>>,
}

impl Layout {
    fn new(cfg: &SuiteConfig) -> Self {
        let a0 = 2;
        let d0 = a0 + cfg.answer_tokens as TokenId;
        let ds = cfg.domain_size as TokenId;
        Self {
            answers: a0..d0,
            domains: (0..cfg.n_tasks as TokenId)
                .map(|i| d0 + i * ds..d0 + (i + 1) * ds)
                .collect(),
        }
    }

    pub fn vocab_needed(&self) -> usize {
        self.domains.last().map_or(self.answers.end, |d| d.end) as usize
    }
}

impl SuiteConfig {
    pub fn validate(&self, vocab_size: usize, max_seq: usize) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(format!("suite config: {m}")));
        if self.n_tasks < 2 {
            return bad("n_tasks must be at least 2".into());
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return bad("gamma must lie in [0, 1]".into());
        }
        if self.examples_per_task == 0 || self.general_examples == 0 || self.items_per_task == 0 {
            return bad("example and item counts must be at least 1".into());
        }
        if self.domain_size == 0 || self.pairs_per_example == 0 || self.general_frames == 0 {
            return bad("domain_size, pairs_per_example and general_frames must be at least 1".into());
        }
        if self.candidates < 2 || self.candidates > self.answer_tokens {
            return bad(format!(
                "candidates must lie in 2..={} (the answer alphabet)",
                self.answer_tokens
            ));
        }
        let max_pairs = self.n_tasks * (self.n_tasks - 1) / 2;
        if self.heldout_tasks == 0 || self.heldout_tasks > max_pairs {
            return bad(format!("heldout_tasks must lie in 1..={max_pairs}"));
        }
        let need = Layout::new(self).vocab_needed();
        if need > vocab_size {
            return bad(format!("needs {need} token ids, model vocabulary has {vocab_size}"));
        }
        let longest = (1 + 3 * self.pairs_per_example)
            .max(1 + 3 * self.context_pairs + 2)
            .max(1 + 2 * self.general_frames);
        if longest > max_seq {
            return bad(format!("sequences of length {longest} exceed max_seq {max_seq}"));
        }
        Ok(())
    }
}

/// A training task: a substitution cipher from its own domain into the answers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub name: String,
    pub domain: Vec<TokenId>,
    /// `cipher[k]` answers `domain[k]`.
    pub cipher: Vec<TokenId>,
}

impl TaskSpec {
    pub fn answer(&self, q: TokenId) -> Option<TokenId> {
        self.domain.iter().position(|&d| d == q).map(|k| self.cipher[k])
    }
}

/// An unseen combination: queries from two training domains in one sequence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeldOutTask {
    pub name: String,
    pub parts: (usize, usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct McItem {
    pub prompt: Vec<TokenId>,
    pub candidates: Vec<Vec<TokenId>>,
    pub gold: usize,
}

/// A full held-out sequence whose answer slots are decoded under teacher forcing.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GenItem {
    pub tokens: Vec<TokenId>,
    pub answer_positions: Vec<usize>,
}

impl GenItem {
    pub fn reference(&self) -> Vec<TokenId> {
        self.answer_positions.iter().map(|&p| self.tokens[p]).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeldOutSet {
    pub task: HeldOutTask,
    pub mc: Vec<McItem>,
    pub generation: Vec<GenItem>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSuite {
    pub cfg: SuiteConfig,
    pub layout: Layout,
    pub tasks: Vec<TaskSpec>,
    pub train_sets: Vec<Vec<Example>>,
    pub general_corpus: Vec<Example>,
    pub heldout: Vec<HeldOutSet>,
}

impl SyntheticSuite {
    /// FNV-1a over the serialized evaluation items; equal hashes mean every
    /// method saw the same examples in the same order.
    pub fn eval_fingerprint(&self) -> String {
        let json = serde_json::to_vec(&self.heldout).expect("items serialize");
        format!("{:016x}", fnv1a64(&json))
    }

    pub fn pooled_train_set(&self) -> Vec<Example> {
        self.train_sets.iter().flatten().cloned().collect()
    }

    fn answer(&self, q: TokenId) -> TokenId {
        self.tasks
            .iter()
            .find_map(|t| t.answer(q))
            .expect("query drawn from a task domain")
    }
}

/// `BOS w F w F …` over the word alphabet.
fn general_sequence(rng: &mut ChaCha8Rng, layout: &Layout, frames: usize) -> Example {
    let mut tokens = vec![BOS];
    for _ in 0..frames {
        tokens.push(rng.gen_range(layout.answers.clone()));
        tokens.push(FILL);
    }
    Example::full(tokens)
}

/// `BOS q a F q a F …` with the answer slots, which are the only targets.
fn task_sequence(rng: &mut ChaCha8Rng, pool: &[TokenId], answer: impl Fn(TokenId) -> TokenId, pairs: usize) -> (Example, Vec<usize>) {
    let mut tokens = vec![BOS];
    let mut slots = Vec::with_capacity(pairs);
    for _ in 0..pairs {
        let q = *pool.choose(rng).expect("nonempty domain");
        tokens.push(q);
        slots.push(tokens.len());
        tokens.push(answer(q));
        tokens.push(FILL);
    }
    let mut loss_on = vec![false; tokens.len()];
    for &p in &slots {
        loss_on[p] = true;
    }
    (Example { tokens, loss_on }, slots)
}

/// Generates the full suite deterministically from `cfg.seed`.
pub fn gen_suite(cfg: &SuiteConfig, vocab_size: usize, max_seq: usize) -> Result<SyntheticSuite> {
    cfg.validate(vocab_size, max_seq)?;
    let layout = Layout::new(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let answers: Vec<TokenId> = layout.answers.clone().collect();
    let mut seen_ciphers = Vec::new();
    let mut tasks = Vec::with_capacity(cfg.n_tasks);
    for (i, domain) in layout.domains.iter().enumerate() {
        let cipher = loop {
            let c: Vec<TokenId> = (0..cfg.domain_size)
                .map(|_| *answers.choose(&mut rng).expect("answers"))
                .collect();
            let distinct = c.iter().collect::<std::collections::BTreeSet<_>>().len();
            if !seen_ciphers.contains(&c) && distinct == c.len().min(answers.len()) {
                break c;
            }
        };
        seen_ciphers.push(cipher.clone());
        tasks.push(TaskSpec {
            name: format!("task{i:02}"),
            domain: domain.clone().collect(),
            cipher,
        });
    }

    let n_general = (cfg.gamma * cfg.examples_per_task as f64).round() as usize;
    let train_sets: Vec<Vec<Example>> = tasks
        .iter()
        .enumerate()
        .map(|(i, task)| {
            let mut r = ChaCha8Rng::seed_from_u64(cfg.seed);
            r.set_stream(10 + i as u64);
            let mut set: Vec<Example> = (0..cfg.examples_per_task - n_general)
                .map(|_| task_sequence(&mut r, &task.domain, |q| task.answer(q).expect("own domain"), cfg.pairs_per_example).0)
                .collect();
            set.extend((0..n_general).map(|_| general_sequence(&mut r, &layout, cfg.general_frames)));
            set.shuffle(&mut r);
            set
        })
        .collect();

    let mut r = ChaCha8Rng::seed_from_u64(cfg.seed);
    r.set_stream(2);
    let general_corpus = (0..cfg.general_examples)
        .map(|_| general_sequence(&mut r, &layout, cfg.general_frames))
        .collect();

    let mut pairs: Vec<(usize, usize)> = (0..cfg.n_tasks)
        .flat_map(|i| (i + 1..cfg.n_tasks).map(move |j| (i, j)))
        .collect();
    pairs.shuffle(&mut rng);
    pairs.truncate(cfg.heldout_tasks);
    pairs.sort();

    let mut suite = SyntheticSuite {
        cfg: cfg.clone(),
        layout,
        tasks,
        train_sets,
        general_corpus,
        heldout: Vec::new(),
    };

    let mut r = ChaCha8Rng::seed_from_u64(cfg.seed);
    r.set_stream(3);
    for &(i, j) in &pairs {
        let pool: Vec<TokenId> = suite.tasks[i].domain.iter().chain(&suite.tasks[j].domain).copied().collect();
        let mut mc = Vec::with_capacity(cfg.items_per_task);
        for k in 0..cfg.items_per_task {
            let (ctx, _) = task_sequence(&mut r, &pool, |q| suite.answer(q), cfg.context_pairs);
            // alternate the query's source domain
            let src = if k % 2 == 0 { i } else { j };
            let q = *suite.tasks[src].domain.choose(&mut r).expect("domain");
            let gold_token = suite.answer(q);
            let mut prompt = ctx.tokens;
            prompt.push(q);
            let mut distractors: Vec<TokenId> = answers.iter().copied().filter(|&a| a != gold_token).collect();
            distractors.shuffle(&mut r);
            let gold = r.gen_range(0..cfg.candidates);
            let mut candidates: Vec<Vec<TokenId>> = distractors[..cfg.candidates - 1].iter().map(|&a| vec![a]).collect();
            candidates.insert(gold, vec![gold_token]);
            mc.push(McItem { prompt, candidates, gold });
        }
        let generation = (0..cfg.items_per_task)
            .map(|_| {
                let (ex, slots) = task_sequence(&mut r, &pool, |q| suite.answer(q), cfg.pairs_per_example);
                GenItem {
                    tokens: ex.tokens,
                    answer_positions: slots,
                }
            })
            .collect();
        suite.heldout.push(HeldOutSet {
            task: HeldOutTask {
                name: format!("mix{i:02}x{j:02}"),
                parts: (i, j),
            },
            mc,
            generation,
        });
    }
    Ok(suite)
}
