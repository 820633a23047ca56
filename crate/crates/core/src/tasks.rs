//! Two-sequence toy tasks: sorting under a reference ordering, and locating
//! a short query inside a longer reference.
//!
//! Files hold one record per line, space-separated fields, comma-joined
//! token lists:
//!
//! ```text
//! sorting:   <ordering_id> <ordering> <target> <labels>
//! retrieval: <query> <reference> <start>
//! ```

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use thiserror::Error;

use crate::rng;

pub const ALPHABET: usize = 10;
pub const SORT_LEN: usize = 10;
pub const POOL_SIZE: usize = 5;
pub const QUERY_LEN: usize = 3;
pub const REF_LEN: usize = 10;
/// Number of possible start positions, `REF_LEN - QUERY_LEN + 1`.
pub const N_STARTS: usize = REF_LEN - QUERY_LEN + 1;

const POOL_STREAM: u64 = 0;
const TRAIN_STREAM: u64 = 1;
const TEST_STREAM: u64 = 2;

#[derive(Debug, Error)]
pub enum TaskError {
    #[error("token {token} at position {position} is outside the alphabet 0..{ALPHABET}")]
    TokenOutOfRange { token: usize, position: usize },
    #[error("ordering is not a permutation of 0..{ALPHABET}: {0:?}")]
    InvalidOrdering(Vec<usize>),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TaskError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TaskKind {
    Sorting,
    Retrieval,
}

impl TaskKind {
    /// Classes predicted per position (sorting) or per sequence (retrieval).
    pub fn n_classes(self) -> usize {
        match self {
            TaskKind::Sorting => SORT_LEN,
            TaskKind::Retrieval => N_STARTS,
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaskKind::Sorting => "sorting",
            TaskKind::Retrieval => "retrieval",
        })
    }
}

impl FromStr for TaskKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "sorting" => Ok(TaskKind::Sorting),
            "retrieval" => Ok(TaskKind::Retrieval),
            other => Err(format!("unknown task `{other}` (expected sorting, retrieval)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DatasetSpec {
    pub task: TaskKind,
    pub n_train: usize,
    pub n_test: usize,
    pub seed: u64,
}

impl DatasetSpec {
    pub fn new(task: TaskKind, seed: u64) -> Self {
        Self {
            task,
            n_train: 1000,
            n_test: 200,
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SortingInstance {
    pub ordering_id: usize,
    /// Symbols listed from first to last under this ordering.
    pub ordering: Vec<usize>,
    pub target: Vec<usize>,
    /// Destination index of each target token.
    pub labels: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RetrievalInstance {
    pub query: Vec<usize>,
    pub reference: Vec<usize>,
    /// First index where `query` occurs in `reference`.
    pub start: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split<T> {
    pub train: Vec<T>,
    pub test: Vec<T>,
}

fn check_ordering(ordering: &[usize]) -> Result<Vec<usize>> {
    let mut rank = vec![usize::MAX; ALPHABET];
    if ordering.len() != ALPHABET {
        return Err(TaskError::InvalidOrdering(ordering.to_vec()));
    }
    for (r, &s) in ordering.iter().enumerate() {
        if s >= ALPHABET || rank[s] != usize::MAX {
            return Err(TaskError::InvalidOrdering(ordering.to_vec()));
        }
        rank[s] = r;
    }
    Ok(rank)
}

/// Stable rank of every token under `ordering`; ties keep input order.
pub fn sorting_labels(target: &[usize], ordering: &[usize]) -> Result<Vec<usize>> {
    let rank = check_ordering(ordering)?;
    if let Some((position, &token)) = target.iter().enumerate().find(|(_, &t)| t >= ALPHABET) {
        return Err(TaskError::TokenOutOfRange { token, position });
    }
    let mut idx: Vec<usize> = (0..target.len()).collect();
    idx.sort_by_key(|&i| rank[target[i]]);
    let mut labels = vec![0; target.len()];
    for (dest, &i) in idx.iter().enumerate() {
        labels[i] = dest;
    }
    Ok(labels)
}

/// Scatter `target` by `labels`.
pub fn apply_labels(target: &[usize], labels: &[usize]) -> Vec<usize> {
    let mut out = vec![0; target.len()];
    for (&t, &l) in target.iter().zip(labels) {
        out[l] = t;
    }
    out
}

/// Whether `labels` is a permutation that sorts `target` under `ordering`
/// (any tie order accepted).
pub fn is_consistent_sort(target: &[usize], ordering: &[usize], labels: &[usize]) -> bool {
    let Ok(rank) = check_ordering(ordering) else {
        return false;
    };
    let mut seen = vec![false; target.len()];
    for &l in labels {
        if l >= target.len() || seen[l] {
            return false;
        }
        seen[l] = true;
    }
    let sorted = apply_labels(target, labels);
    sorted.windows(2).all(|w| rank[w[0]] <= rank[w[1]])
}

/// The five distinct orderings shared by both splits of a seed.
pub fn ordering_pool(seed: u64) -> Vec<Vec<usize>> {
    let mut r = rng::stream(seed, POOL_STREAM);
    let mut pool: Vec<Vec<usize>> = Vec::with_capacity(POOL_SIZE);
    while pool.len() < POOL_SIZE {
        let mut p: Vec<usize> = (0..ALPHABET).collect();
        p.shuffle(&mut r);
        if !pool.contains(&p) {
            pool.push(p);
        }
    }
    pool
}

fn sorting_instance<R: Rng + ?Sized>(pool: &[Vec<usize>], r: &mut R) -> SortingInstance {
    let ordering_id = r.random_range(0..pool.len());
    let target: Vec<usize> = (0..SORT_LEN).map(|_| r.random_range(0..ALPHABET)).collect();
    let ordering = pool[ordering_id].clone();
    let labels = sorting_labels(&target, &ordering).expect("generated tokens are in range");
    SortingInstance {
        ordering_id,
        ordering,
        target,
        labels,
    }
}

pub fn gen_sorting(spec: &DatasetSpec) -> Split<SortingInstance> {
    let pool = ordering_pool(spec.seed);
    let mut train_rng = rng::stream(spec.seed, TRAIN_STREAM);
    let mut test_rng = rng::stream(spec.seed, TEST_STREAM);
    Split {
        train: (0..spec.n_train)
            .map(|_| sorting_instance(&pool, &mut train_rng))
            .collect(),
        test: (0..spec.n_test)
            .map(|_| sorting_instance(&pool, &mut test_rng))
            .collect(),
    }
}

/// First index at which `query` occurs in `reference`.
pub fn first_occurrence(query: &[usize], reference: &[usize]) -> Option<usize> {
    reference.windows(query.len()).position(|w| w == query)
}

fn retrieval_instance<R: Rng + ?Sized>(r: &mut R) -> RetrievalInstance {
    let query: Vec<usize> = (0..QUERY_LEN).map(|_| r.random_range(0..ALPHABET)).collect();
    let filler: Vec<usize> = (0..REF_LEN - QUERY_LEN).map(|_| r.random_range(0..ALPHABET)).collect();
    let insert = r.random_range(0..N_STARTS);
    let mut reference = filler[..insert].to_vec();
    reference.extend_from_slice(&query);
    reference.extend_from_slice(&filler[insert..]);
    let start = first_occurrence(&query, &reference).expect("query was inserted");
    RetrievalInstance {
        query,
        reference,
        start,
    }
}

pub fn gen_retrieval(spec: &DatasetSpec) -> Split<RetrievalInstance> {
    let mut train_rng = rng::stream(spec.seed, TRAIN_STREAM);
    let mut test_rng = rng::stream(spec.seed, TEST_STREAM);
    Split {
        train: (0..spec.n_train).map(|_| retrieval_instance(&mut train_rng)).collect(),
        test: (0..spec.n_test).map(|_| retrieval_instance(&mut test_rng)).collect(),
    }
}

/// Either task's split, as produced by [`generate`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Dataset {
    Sorting(Split<SortingInstance>),
    Retrieval(Split<RetrievalInstance>),
}

impl Dataset {
    pub fn task(&self) -> TaskKind {
        match self {
            Dataset::Sorting(_) => TaskKind::Sorting,
            Dataset::Retrieval(_) => TaskKind::Retrieval,
        }
    }

    pub fn len(&self) -> (usize, usize) {
        match self {
            Dataset::Sorting(s) => (s.train.len(), s.test.len()),
            Dataset::Retrieval(s) => (s.train.len(), s.test.len()),
        }
    }
}

pub fn generate(spec: &DatasetSpec) -> Dataset {
    match spec.task {
        TaskKind::Sorting => Dataset::Sorting(gen_sorting(spec)),
        TaskKind::Retrieval => Dataset::Retrieval(gen_retrieval(spec)),
    }
}

/// One line of a dataset file.
pub trait Record: Sized {
    fn to_line(&self) -> String;
    fn parse_line(line: &str) -> std::result::Result<Self, String>;
}

fn join(tokens: &[usize]) -> String {
    tokens.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(",")
}

fn tokens(field: &str, len: usize, what: &str) -> std::result::Result<Vec<usize>, String> {
    let out: Vec<usize> = field
        .split(',')
        .map(|t| t.parse::<usize>().map_err(|_| format!("{what}: bad token `{t}`")))
        .collect::<std::result::Result<_, _>>()?;
    if out.len() != len {
        return Err(format!("{what}: expected {len} tokens, found {}", out.len()));
    }
    if let Some(t) = out.iter().find(|&&t| t >= ALPHABET) {
        return Err(format!("{what}: token {t} outside 0..{ALPHABET}"));
    }
    Ok(out)
}

fn fields(line: &str, n: usize) -> std::result::Result<Vec<&str>, String> {
    let f: Vec<&str> = line.split(' ').collect();
    if f.len() != n {
        return Err(format!("expected {n} space-separated fields, found {}", f.len()));
    }
    Ok(f)
}

impl Record for SortingInstance {
    fn to_line(&self) -> String {
        format!(
            "{} {} {} {}",
            self.ordering_id,
            join(&self.ordering),
            join(&self.target),
            join(&self.labels)
        )
    }

    fn parse_line(line: &str) -> std::result::Result<Self, String> {
        let f = fields(line, 4)?;
        let ordering_id: usize = f[0].parse().map_err(|_| format!("bad ordering id `{}`", f[0]))?;
        if ordering_id >= POOL_SIZE {
            return Err(format!("ordering id {ordering_id} outside 0..{POOL_SIZE}"));
        }
        let ordering = tokens(f[1], ALPHABET, "ordering")?;
        let target = tokens(f[2], SORT_LEN, "target")?;
        let labels = tokens(f[3], SORT_LEN, "labels")?;
        let want = sorting_labels(&target, &ordering).map_err(|e| e.to_string())?;
        if want != labels {
            return Err("labels disagree with the stable sort of target".into());
        }
        Ok(Self {
            ordering_id,
            ordering,
            target,
            labels,
        })
    }
}

impl Record for RetrievalInstance {
    fn to_line(&self) -> String {
        format!("{} {} {}", join(&self.query), join(&self.reference), self.start)
    }

    fn parse_line(line: &str) -> std::result::Result<Self, String> {
        let f = fields(line, 3)?;
        let query = tokens(f[0], QUERY_LEN, "query")?;
        let reference = tokens(f[1], REF_LEN, "reference")?;
        let start: usize = f[2].parse().map_err(|_| format!("bad start `{}`", f[2]))?;
        if first_occurrence(&query, &reference) != Some(start) {
            return Err(format!("start {start} is not the first occurrence of the query"));
        }
        Ok(Self {
            query,
            reference,
            start,
        })
    }
}

pub fn serialize<T: Record>(records: &[T]) -> String {
    let mut s = String::new();
    for r in records {
        s += &r.to_line();
        s.push('\n');
    }
    s
}

/// Parses a dataset file body; errors name the 1-based line.
pub fn parse<T: Record>(text: &str) -> Result<Vec<T>> {
    text.lines()
        .enumerate()
        .map(|(i, l)| T::parse_line(l).map_err(|msg| TaskError::Parse { line: i + 1, msg }))
        .collect()
}

pub fn load<T: Record>(path: &Path) -> Result<Vec<T>> {
    parse(&std::fs::read_to_string(path)?)
}
