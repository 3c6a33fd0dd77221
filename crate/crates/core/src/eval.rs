//! Ranking metrics and cohort evaluation.

use std::fmt::Write as _;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Corpus, UserSequence};
use crate::error::{Error, Result};
use crate::model::{hidden_states, ModelConfig, ModelParams};

/// Cutoffs reported for Acc@K.
pub const KS: [usize; 5] = [1, 5, 10, 15, 20];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankingResult {
    pub user: String,
    /// Index of the predicted check-in within the user's full history.
    pub step: usize,
    /// 1-based rank of the true next POI.
    pub rank: usize,
}

pub fn acc_at_k(results: &[RankingResult], k: usize) -> Result<f64> {
    if results.is_empty() {
        return Err(Error::UndefinedMetric(format!("acc@{k} of an empty result set")));
    }
    let hits = results.iter().filter(|r| r.rank <= k).count();
    Ok(hits as f64 / results.len() as f64)
}

/// Mean reciprocal rank, i.e. average precision with one relevant item.
pub fn mean_ap(results: &[RankingResult]) -> Result<f64> {
    if results.is_empty() {
        return Err(Error::UndefinedMetric("MAP of an empty result set".into()));
    }
    Ok(results.iter().map(|r| 1.0 / r.rank as f64).sum::<f64>() / results.len() as f64)
}

/// 1-based rank of `target` by score descending, ties broken by ascending
/// id. Candidates flagged in `excluded` are skipped, except the target.
pub fn rank_of(scores: &[f64], target: usize, excluded: Option<&[bool]>) -> usize {
    let s_t = scores[target];
    let mut rank = 1;
    for (j, &s) in scores.iter().enumerate() {
        if j == target || excluded.is_some_and(|ex| ex[j]) {
            continue;
        }
        if s > s_t || (s == s_t && j < target) {
            rank += 1;
        }
    }
    rank
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Cohort {
    #[default]
    All,
    /// Users with fewer training check-ins than the cold threshold.
    Cold,
}

impl Cohort {
    pub fn name(self) -> &'static str {
        match self {
            Cohort::All => "all",
            Cohort::Cold => "cold",
        }
    }
}

impl FromStr for Cohort {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(Cohort::All),
            "cold" => Ok(Cohort::Cold),
            other => Err(Error::Config(format!("unknown cohort `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub cold_threshold: usize,
    pub exclude_visited: bool,
    pub parallel: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            cold_threshold: 5,
            exclude_visited: false,
            parallel: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub cohort: Cohort,
    /// `(K, Acc@K)` for each K in [`KS`].
    pub acc: Vec<(usize, f64)>,
    pub map: f64,
    pub n_instances: usize,
    pub n_users: usize,
}

impl MetricsReport {
    pub fn from_results(cohort: Cohort, results: &[RankingResult], n_users: usize) -> Result<Self> {
        let acc = KS
            .iter()
            .map(|&k| acc_at_k(results, k).map(|a| (k, a)))
            .collect::<Result<_>>()?;
        Ok(MetricsReport {
            cohort,
            acc,
            map: mean_ap(results)?,
            n_instances: results.len(),
            n_users,
        })
    }

    pub fn acc_at(&self, k: usize) -> Option<f64> {
        self.acc.iter().find(|(kk, _)| *kk == k).map(|(_, a)| *a)
    }
}

/// Anything that scores every POI for each test instance of a user.
pub trait Recommender: Sync {
    fn vocab(&self) -> usize;

    /// One score vector per test check-in of `user`, each conditioned on
    /// every earlier check-in.
    fn score_test(&self, user: &UserSequence) -> Result<Vec<Vec<f64>>>;
}

/// A trained network. The hidden state is warmed on the training history
/// and rolled forward through the test triples with the true history.
pub struct ModelRecommender<'a> {
    pub params: &'a ModelParams,
    pub config: &'a ModelConfig,
}

impl Recommender for ModelRecommender<'_> {
    fn vocab(&self) -> usize {
        self.params.vocab()
    }

    fn score_test(&self, user: &UserSequence) -> Result<Vec<Vec<f64>>> {
        let hs = hidden_states(self.params, &user.triples, self.config)?;
        let first = user.n_train.saturating_sub(1);
        Ok(hs[first..].iter().map(|h| self.params.logits(h).into_inner()).collect())
    }
}

/// Scores each POI by how often the user visited it in training.
pub struct MostFrequent {
    pub vocab: usize,
}

impl Recommender for MostFrequent {
    fn vocab(&self) -> usize {
        self.vocab
    }

    fn score_test(&self, user: &UserSequence) -> Result<Vec<Vec<f64>>> {
        let mut counts = vec![0.0; self.vocab];
        for &p in &user.pois[..user.n_train] {
            counts[p] += 1.0;
        }
        Ok(vec![counts; user.n_test()])
    }
}

/// Independent uniform scores per instance, seeded per user.
pub struct UniformRandom {
    pub vocab: usize,
    pub seed: u64,
}

impl Recommender for UniformRandom {
    fn vocab(&self) -> usize {
        self.vocab
    }

    fn score_test(&self, user: &UserSequence) -> Result<Vec<Vec<f64>>> {
        let mut h = self.seed;
        for b in user.user.bytes() {
            h = h.wrapping_mul(0x100_0000_01b3).wrapping_add(b as u64);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(h);
        Ok((0..user.n_test())
            .map(|_| (0..self.vocab).map(|_| rng.gen::<f64>()).collect())
            .collect())
    }
}

fn rank_user<R: Recommender + ?Sized>(
    rec: &R,
    user: &UserSequence,
    exclude_visited: bool,
) -> Result<Vec<RankingResult>> {
    let scores = rec.score_test(user)?;
    if scores.len() != user.n_test() {
        return Err(Error::dim("recommender test scores", user.n_test(), scores.len()));
    }
    let mut visited = vec![false; rec.vocab()];
    if exclude_visited {
        for &p in &user.pois[..user.n_train] {
            visited[p] = true;
        }
    }
    let mut out = Vec::with_capacity(scores.len());
    for (k, s) in scores.iter().enumerate() {
        let step = user.n_train + k;
        let target = user.pois[step];
        if s.len() != rec.vocab() {
            return Err(Error::dim("recommender score vector", rec.vocab(), s.len()));
        }
        if target >= s.len() {
            return Err(Error::Index {
                what: "recommender vocabulary",
                index: target,
                len: s.len(),
            });
        }
        out.push(RankingResult {
            user: user.user.clone(),
            step,
            rank: rank_of(s, target, exclude_visited.then_some(visited.as_slice())),
        });
        if exclude_visited {
            visited[target] = true;
        }
    }
    Ok(out)
}

/// Ranks every test instance of the cohort's users.
pub fn rank_corpus<R: Recommender + ?Sized>(
    rec: &R,
    corpus: &Corpus,
    cohort: Cohort,
    cfg: &EvalConfig,
) -> Result<(Vec<RankingResult>, usize)> {
    if rec.vocab() != corpus.n_pois() {
        return Err(Error::Config(format!(
            "model vocabulary {} does not match corpus vocabulary {}",
            rec.vocab(),
            corpus.n_pois()
        )));
    }
    let users: Vec<&UserSequence> = corpus
        .users
        .iter()
        .filter(|u| u.n_test() > 0)
        .filter(|u| cohort == Cohort::All || u.n_train < cfg.cold_threshold)
        .collect();
    if users.is_empty() {
        let why = match cohort {
            Cohort::All => "corpus has no test instances".to_string(),
            Cohort::Cold => format!("no user has fewer than {} training check-ins", cfg.cold_threshold),
        };
        return Err(Error::UndefinedMetric(format!(
            "{} cohort is empty: {why}",
            cohort.name()
        )));
    }
    let per_user: Vec<Result<Vec<RankingResult>>> = if cfg.parallel {
        users
            .par_iter()
            .map(|u| rank_user(rec, u, cfg.exclude_visited))
            .collect()
    } else {
        users.iter().map(|u| rank_user(rec, u, cfg.exclude_visited)).collect()
    };
    let mut results = Vec::new();
    for r in per_user {
        results.extend(r?);
    }
    Ok((results, users.len()))
}

pub fn evaluate<R: Recommender + ?Sized>(
    rec: &R,
    corpus: &Corpus,
    cohort: Cohort,
    cfg: &EvalConfig,
) -> Result<(MetricsReport, Vec<RankingResult>)> {
    let (results, n_users) = rank_corpus(rec, corpus, cohort, cfg)?;
    Ok((MetricsReport::from_results(cohort, &results, n_users)?, results))
}

/// One line of the structured metrics file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub model: String,
    pub ablation: String,
    pub exclude_visited: bool,
    #[serde(flatten)]
    pub metrics: MetricsReport,
}

/// Flat `key = value` text, one block per record.
pub fn format_kv(records: &[MetricsRecord]) -> String {
    let mut out = String::new();
    for r in records {
        let prefix = format!("{}.{}.{}", r.model, r.ablation, r.metrics.cohort.name());
        for (k, a) in &r.metrics.acc {
            let _ = writeln!(out, "{prefix}.acc@{k} = {a:.6}");
        }
        let _ = writeln!(out, "{prefix}.map = {:.6}", r.metrics.map);
        let _ = writeln!(out, "{prefix}.instances = {}", r.metrics.n_instances);
        let _ = writeln!(out, "{prefix}.users = {}", r.metrics.n_users);
    }
    out
}

pub fn format_jsonl(records: &[MetricsRecord]) -> String {
    records
        .iter()
        .map(|r| serde_json::to_string(r).expect("metrics serialize") + "\n")
        .collect()
}

/// Tab-separated `user step rank` lines with a header.
pub fn format_rank_dump(results: &[RankingResult]) -> String {
    let mut out = String::from("user\tstep\trank\n");
    for r in results {
        let _ = writeln!(out, "{}\t{}\t{}", r.user, r.step, r.rank);
    }
    out
}
