//! Full-ranking HR@k / NDCG@k and the ablation harness.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::data::{split_dataset, DomainDataset, DomainId, OverlapMap};
use crate::error::{Error, Result};
use crate::hypergraph::ClusterAssignment;
use crate::io;
use crate::propagation::{propagate, PropagationOutput};
use crate::similarity::SimilarityGraph;
use crate::training::{init_model, train, Ablation, TrainConfig, TrainingDomain};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalSplit {
    Validation,
    Test,
}

/// One evaluated `(user, held-out item)` case.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CaseRank {
    pub user: usize,
    pub item: usize,
    pub rank: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub k: usize,
    pub hr: f64,
    pub ndcg: f64,
    pub cases: Vec<CaseRank>,
}

/// Candidates sorted by descending `exp(cos(𝒰_u, 𝒱_i))`, lower index first on ties.
pub fn rank_items(out: &PropagationOutput, user: usize, candidates: &[usize]) -> Result<Vec<usize>> {
    if candidates.is_empty() {
        return Err(Error::Contract("no candidates to rank".into()));
    }
    let u = out.user_emb.row(user);
    let mut scored = candidates
        .iter()
        .map(|&i| crate::training::similarity_kernel(u, out.item_emb.row(i)).map(|s| (s, i)))
        .collect::<Result<Vec<_>>>()?;
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    Ok(scored.into_iter().map(|(_, i)| i).collect())
}

/// HR@k and NDCG@k from 1-based ranks, one rank per held-out positive.
pub fn hr_ndcg(ranks: &[usize], k: usize) -> (f64, f64) {
    if ranks.is_empty() {
        return (0.0, 0.0);
    }
    let (mut hits, mut gain) = (0usize, 0.0);
    for &r in ranks.iter().filter(|&&r| r <= k) {
        hits += 1;
        gain += 1.0 / ((r + 1) as f64).log2();
    }
    let n = ranks.len() as f64;
    (hits as f64 / n, gain / n)
}

fn unit_rows(x: &Array2<f64>) -> Result<Array2<f64>> {
    let norms: Array1<f64> = x.map_axis(Axis(1), |r| r.dot(&r).sqrt());
    if norms.iter().any(|&n| !(n > 0.0)) {
        return Err(Error::DegenerateEmbedding);
    }
    Ok(x / &norms.insert_axis(Axis(1)))
}

/// Ranks every held-out positive of `split` against all items the user has no
/// known interaction with in any split.
pub fn evaluate(out: &PropagationOutput, domain: &TrainingDomain, split: EvalSplit, k: usize) -> Result<MetricReport> {
    let held = match split {
        EvalSplit::Validation => &domain.validation,
        EvalSplit::Test => &domain.test,
    };
    let items = unit_rows(&out.item_emb)?;
    let mut known = vec![false; domain.num_items];
    let mut cases = Vec::new();
    for (u, positives) in held.iter().enumerate() {
        if positives.is_empty() {
            continue;
        }
        let user = out.user_emb.row(u);
        let n = user.dot(&user).sqrt();
        if !(n > 0.0) {
            return Err(Error::DegenerateEmbedding);
        }
        let scores = items.dot(&(&user / n));
        let lists = [&domain.train[u], &domain.validation[u], &domain.test[u]];
        for &i in lists.iter().flat_map(|l| l.iter()) {
            known[i] = true;
        }
        for &p in positives {
            let sp = scores[p];
            let ahead = scores
                .iter()
                .enumerate()
                .filter(|&(i, &s)| !known[i] && (s > sp || (s == sp && i < p)))
                .count();
            cases.push(CaseRank {
                user: u,
                item: p,
                rank: ahead + 1,
            });
        }
        for &i in lists.iter().flat_map(|l| l.iter()) {
            known[i] = false;
        }
    }
    let ranks: Vec<usize> = cases.iter().map(|c| c.rank).collect();
    let (hr, ndcg) = hr_ndcg(&ranks, k);
    Ok(MetricReport { k, hr, ndcg, cases })
}

/// Model hyper-parameters shared by every variant of an experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSpec {
    pub dim: usize,
    pub layers: usize,
    pub init_std: f64,
    pub train_hyper_weights: bool,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            dim: 128,
            layers: 3,
            init_std: 0.1,
            train_hyper_weights: false,
        }
    }
}

/// Data and frozen item structures shared across seeds and variants.
#[derive(Debug, Clone)]
pub struct ExperimentData {
    pub domains: [DomainDataset; 2],
    pub overlap: OverlapMap,
    pub item_graphs: [SimilarityGraph; 2],
    pub clusters: [ClusterAssignment; 2],
}

impl ExperimentData {
    /// Splits both domains with `seed` and attaches the frozen graphs.
    pub fn training_domains(&self, seed: u64) -> Result<[TrainingDomain; 2]> {
        let mut out = Vec::with_capacity(2);
        for d in 0..2 {
            let split = split_dataset(&self.domains[d], seed)?;
            out.push(TrainingDomain::new(&self.domains[d], &split, &self.item_graphs[d], &self.clusters[d])?);
        }
        let t = out.pop().expect("two domains");
        let s = out.pop().expect("two domains");
        Ok([s, t])
    }
}

/// One trained configuration of the comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct VariantSpec {
    pub name: String,
    pub ablation: Ablation,
    pub lambda: f64,
    pub epsilon: f64,
}

/// The full model and its three ablations under `base`'s λ and ε.
pub fn standard_variants(base: &TrainConfig) -> Vec<VariantSpec> {
    [Ablation::Full, Ablation::O, Ablation::M, Ablation::G]
        .into_iter()
        .map(|a| VariantSpec {
            name: a.as_str().to_string(),
            ablation: a,
            lambda: base.lambda,
            epsilon: base.epsilon,
        })
        .collect()
}

/// Full model at each guidance weight.
pub fn lambda_sweep(base: &TrainConfig, lambdas: &[f64]) -> Vec<VariantSpec> {
    lambdas
        .iter()
        .map(|&l| VariantSpec {
            name: format!("lambda={l}"),
            ablation: Ablation::Full,
            lambda: l,
            epsilon: base.epsilon,
        })
        .collect()
}

/// Full model at each matching smoothness.
pub fn epsilon_sweep(base: &TrainConfig, epsilons: &[f64]) -> Vec<VariantSpec> {
    epsilons
        .iter()
        .map(|&e| VariantSpec {
            name: format!("epsilon={e}"),
            ablation: Ablation::Full,
            lambda: base.lambda,
            epsilon: e,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub variant: String,
    pub domain: DomainId,
    pub seed: u64,
    pub hr: f64,
    pub ndcg: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub variant: String,
    pub domain: DomainId,
    pub runs: usize,
    pub hr_mean: f64,
    pub hr_std: f64,
    pub ndcg_mean: f64,
    pub ndcg_std: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationTable {
    pub k: usize,
    pub rows: Vec<AblationRow>,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl AblationTable {
    pub fn row(&self, variant: &str, domain: DomainId, seed: u64) -> Option<&AblationRow> {
        self.rows
            .iter()
            .find(|r| r.variant == variant && r.domain == domain && r.seed == seed)
    }

    /// Mean and population standard deviation per variant and domain, in first-seen order.
    pub fn summary(&self) -> Vec<SummaryRow> {
        let mut keys: Vec<(String, DomainId)> = Vec::new();
        for r in &self.rows {
            let key = (r.variant.clone(), r.domain);
            if !keys.contains(&key) {
                keys.push(key);
            }
        }
        keys.into_iter()
            .map(|(variant, domain)| {
                let sel: Vec<&AblationRow> = self
                    .rows
                    .iter()
                    .filter(|r| r.variant == variant && r.domain == domain)
                    .collect();
                let (hr_mean, hr_std) = mean_std(&sel.iter().map(|r| r.hr).collect::<Vec<_>>());
                let (ndcg_mean, ndcg_std) = mean_std(&sel.iter().map(|r| r.ndcg).collect::<Vec<_>>());
                SummaryRow {
                    runs: sel.len(),
                    variant,
                    domain,
                    hr_mean,
                    hr_std,
                    ndcg_mean,
                    ndcg_std,
                }
            })
            .collect()
    }

    pub fn summary_row(&self, variant: &str, domain: DomainId) -> Option<SummaryRow> {
        self.summary().into_iter().find(|s| s.variant == variant && s.domain == domain)
    }

    pub fn to_csv(&self) -> String {
        let k = self.k;
        let mut out = format!("variant,domain,seed,hr{k},ndcg{k}\n");
        for r in &self.rows {
            writeln!(out, "{},{},{},{},{}", r.variant, r.domain, r.seed, r.hr, r.ndcg).unwrap();
        }
        out
    }

    pub fn summary_csv(&self) -> String {
        let k = self.k;
        let mut out = format!("variant,domain,runs,hr{k}_mean,hr{k}_std,ndcg{k}_mean,ndcg{k}_std\n");
        for s in self.summary() {
            writeln!(
                out,
                "{},{},{},{},{},{},{}",
                s.variant, s.domain, s.runs, s.hr_mean, s.hr_std, s.ndcg_mean, s.ndcg_std
            )
            .unwrap();
        }
        out
    }

    pub fn save(&self, report: &Path, summary: &Path) -> Result<()> {
        io::write_atomic(report, self.to_csv().as_bytes())?;
        io::write_atomic(summary, self.summary_csv().as_bytes())
    }
}

/// Trains every variant on every seed with identical data, splits and initial models,
/// and reports test-split metrics of the best-validation snapshots.
pub fn run_ablation(
    data: &ExperimentData,
    model: &ModelSpec,
    base: &TrainConfig,
    variants: &[VariantSpec],
    seeds: &[u64],
) -> Result<AblationTable> {
    let mut rows = Vec::new();
    for &seed in seeds {
        let domains = data.training_domains(seed)?;
        let init = |d: usize| -> Result<_> {
            let id = [DomainId::Source, DomainId::Target][d];
            let mut m = init_model(id, domains[d].num_users(), domains[d].num_items, model.dim, model.layers, model.init_std, seed)?;
            m.train_hyper_weights = model.train_hyper_weights;
            Ok(m)
        };
        for v in variants {
            let cfg = TrainConfig {
                ablation: v.ablation,
                lambda: v.lambda,
                epsilon: v.epsilon,
                seed,
                ..base.clone()
            };
            let outcome = train([init(0)?, init(1)?], [&domains[0], &domains[1]], &data.overlap, &cfg)?;
            for (d, id) in [DomainId::Source, DomainId::Target].into_iter().enumerate() {
                let out = propagate(&outcome.models[d], &domains[d].graphs)?;
                let report = evaluate(&out, &domains[d], EvalSplit::Test, base.eval_k)?;
                rows.push(AblationRow {
                    variant: v.name.clone(),
                    domain: id,
                    seed,
                    hr: report.hr,
                    ndcg: report.ndcg,
                });
            }
        }
    }
    Ok(AblationTable { k: base.eval_k, rows })
}
