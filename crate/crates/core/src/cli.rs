//! Pipeline commands behind the `mmcdr` binary.
//!
//! Directory layout shared by the commands:
//!
//! ```text
//! <data>/source_ratings.tsv   <data>/target_ratings.tsv   <data>/overlap.tsv
//! <data>/{source,target}_features_<modality>.tsv
//! <data>/generator.json                    (written by `gen` only)
//! <graphs>/item_graph_{source,target}.tsv  (written by `fuse`)
//! <clusters>/clusters_{source,target}.tsv  (written by `cluster`)
//! ```

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::PipelineConfig;
use crate::data::{self, DomainDataset, DomainId, OverlapMap, SyntheticConfig};
use crate::error::{Error, Result};
use crate::evaluation::{self, EvalSplit, ExperimentData};
use crate::hypergraph::{sishe_cluster, ClusterAssignment};
use crate::io;
use crate::matching::{match_users, MatchOptions};
use crate::propagation::propagate;
use crate::similarity::{fuse_modalities, SimilarityGraph};
use crate::training::{self, init_model};

const DOMAINS: [DomainId; 2] = [DomainId::Source, DomainId::Target];
const GENERATOR_FILE: &str = "generator.json";

pub fn ratings_path(dir: &Path, d: DomainId) -> PathBuf {
    dir.join(format!("{d}_ratings.tsv"))
}

pub fn features_path(dir: &Path, d: DomainId, modality: &str) -> PathBuf {
    dir.join(format!("{d}_features_{modality}.tsv"))
}

pub fn overlap_path(dir: &Path) -> PathBuf {
    dir.join("overlap.tsv")
}

pub fn graph_path(dir: &Path, d: DomainId) -> PathBuf {
    dir.join(format!("item_graph_{d}.tsv"))
}

pub fn clusters_path(dir: &Path, d: DomainId) -> PathBuf {
    dir.join(format!("clusters_{d}.tsv"))
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GeneratorRecord {
    seed: u64,
    synthetic: SyntheticConfig,
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))
}

/// Modality names found as `<domain>_features_<name>.tsv`, sorted.
fn modalities(dir: &Path, d: DomainId) -> Result<Vec<String>> {
    let prefix = format!("{d}_features_");
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(format!("listing {}", dir.display()), e))?;
    let mut names = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(format!("listing {}", dir.display()), e))?;
        let file = entry.file_name().to_string_lossy().into_owned();
        if let Some(name) = file.strip_prefix(&prefix).and_then(|r| r.strip_suffix(".tsv")) {
            names.push(name.to_string());
        }
    }
    names.sort();
    if names.is_empty() {
        return Err(Error::Schema(format!("no {prefix}*.tsv files in {}", dir.display())));
    }
    Ok(names)
}

/// Reads both domains (ratings and features) and the overlap file.
pub fn load_data(cfg: &PipelineConfig, dir: &Path) -> Result<([DomainDataset; 2], OverlapMap)> {
    let generated = dir.join(GENERATOR_FILE).exists();
    let min = cfg.data.min_interactions.unwrap_or(if generated { 1 } else { 10 });
    let mut out = Vec::with_capacity(2);
    for d in DOMAINS {
        let mut ds = data::load_ratings(&ratings_path(dir, d), d, cfg.data.rating_threshold, min)?;
        for m in modalities(dir, d)? {
            let f = data::load_features(&features_path(dir, d, &m), &ds.item_ids)?;
            ds.features.insert(m, f);
        }
        ds.validate()?;
        out.push(ds);
    }
    let target = out.pop().expect("two domains");
    let source = out.pop().expect("two domains");
    let overlap = OverlapMap::load(&overlap_path(dir), &source, &target)?;
    Ok(([source, target], overlap))
}

/// Datasets plus the frozen item graphs and clusters.
pub fn load_experiment(cfg: &PipelineConfig, data_dir: &Path, graphs: &Path, clusters: &Path) -> Result<ExperimentData> {
    let (domains, overlap) = load_data(cfg, data_dir)?;
    let item_graphs = [
        SimilarityGraph::load(&graph_path(graphs, DomainId::Source))?,
        SimilarityGraph::load(&graph_path(graphs, DomainId::Target))?,
    ];
    let clusters = [
        ClusterAssignment::load(&clusters_path(clusters, DomainId::Source))?,
        ClusterAssignment::load(&clusters_path(clusters, DomainId::Target))?,
    ];
    Ok(ExperimentData {
        domains,
        overlap,
        item_graphs,
        clusters,
    })
}

pub fn cmd_gen(cfg: &PipelineConfig, seed: u64, out: &Path) -> Result<()> {
    let (source, target, overlap) = data::generate_synthetic(&cfg.data.synthetic, seed)?;
    create_dir(out)?;
    for ds in [&source, &target] {
        data::write_ratings(&ratings_path(out, ds.domain), ds)?;
        for m in ds.features.keys() {
            data::write_features(&features_path(out, ds.domain, m), ds, m)?;
        }
    }
    data::write_overlap(&overlap_path(out), &source, &target, &overlap)?;
    let record = GeneratorRecord {
        seed,
        synthetic: cfg.data.synthetic.clone(),
    };
    let mut text = serde_json::to_string_pretty(&record).expect("record serializes");
    text.push('\n');
    io::write_atomic(&out.join(GENERATOR_FILE), text.as_bytes())
}

pub fn cmd_fuse(cfg: &PipelineConfig, data_dir: &Path, out: &Path) -> Result<()> {
    let (domains, _) = load_data(cfg, data_dir)?;
    create_dir(out)?;
    for ds in &domains {
        let fused = fuse_modalities(ds.features.values().map(|f| f.view()), cfg.graph.z, &cfg.risgf_options())?;
        fused.graph.save(&graph_path(out, ds.domain))?;
    }
    Ok(())
}

pub fn cmd_cluster(cfg: &PipelineConfig, seed: u64, graphs: &Path, out: &Path) -> Result<()> {
    create_dir(out)?;
    for d in DOMAINS {
        let graph = SimilarityGraph::load(&graph_path(graphs, d))?;
        let assignment = sishe_cluster(graph.weights.view(), &cfg.sishe_options(seed))?;
        assignment.save(&clusters_path(out, d))?;
    }
    Ok(())
}

fn read_embeddings(path: &Path) -> Result<(Vec<String>, Array2<f64>)> {
    let rows = io::read_id_vectors(path)?;
    let dim = rows.first().map(|r| r.1.len()).ok_or_else(|| Error::Schema(format!("{}: no rows", path.display())))?;
    let mut m = Array2::zeros((rows.len(), dim));
    let mut ids = Vec::with_capacity(rows.len());
    for (i, (id, v)) in rows.into_iter().enumerate() {
        if v.len() != dim {
            return Err(Error::DimensionMismatch {
                item: id,
                expected: dim,
                found: v.len(),
            });
        }
        m.row_mut(i).assign(&ndarray::ArrayView1::from(&v[..]));
        ids.push(id);
    }
    Ok((ids, m))
}

/// Matches two equally sized user sets given as `id<TAB>vector` files.
pub fn cmd_match(
    cfg: &PipelineConfig,
    source_emb: &Path,
    target_emb: &Path,
    overlap: Option<&Path>,
    allow_unconverged: bool,
    out: &Path,
) -> Result<()> {
    let (sids, s) = read_embeddings(source_emb)?;
    let (tids, t) = read_embeddings(target_emb)?;
    let mut pairs = Vec::new();
    if let Some(path) = overlap {
        let sidx: HashMap<&str, usize> = sids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
        let tidx: HashMap<&str, usize> = tids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
        for (lineno, line) in io::read_to_string(path)?.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').map(str::trim).collect();
            let [a, b] = cols[..] else {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: lineno + 1,
                    message: "expected source_id<TAB>target_id".into(),
                });
            };
            let i = *sidx.get(a).ok_or_else(|| Error::UnknownId(a.to_string()))?;
            let j = *tidx.get(b).ok_or_else(|| Error::UnknownId(b.to_string()))?;
            pairs.push((i, j));
        }
    }
    let opts = MatchOptions {
        wafi: cfg.wafi_options(),
        allow_unconverged,
    };
    let (plan, _) = match_users(s.view(), t.view(), &pairs, &opts)?;
    plan.save(out, cfg.matching.epsilon)
}

/// Trains both domains and writes `checkpoint/`, `trace.csv` and `config.json` under `out`.
pub fn cmd_train(cfg: &PipelineConfig, seed: u64, data: &ExperimentData, out: &Path) -> Result<Checkpoint> {
    let domains = data.training_domains(seed)?;
    let tcfg = cfg.train_config(seed);
    let models = [0, 1].map(|d| {
        init_model(DOMAINS[d], domains[d].num_users(), domains[d].num_items, cfg.model.dim, cfg.model.layers, cfg.model.init_std, seed).map(|mut m| {
            m.train_hyper_weights = cfg.model.train_hyper_weights;
            m
        })
    });
    let [ms, mt] = models;
    let outcome = training::train([ms?, mt?], [&domains[0], &domains[1]], &data.overlap, &tcfg)?;
    create_dir(out)?;
    training::write_trace(&out.join("trace.csv"), &outcome.trace, cfg.eval.k)?;
    io::write_atomic(&out.join("config.json"), cfg.to_canonical_json().as_bytes())?;
    let ck = Checkpoint {
        models: outcome.models,
        config: serde_json::to_value(cfg).expect("config serializes"),
        seed,
        epochs: outcome.best_epochs,
    };
    ck.save(&out.join("checkpoint"))?;
    Ok(ck)
}

/// HR@k and NDCG@k of a checkpoint on both domains; the split reuses the checkpoint's seed.
pub fn cmd_eval(cfg: &PipelineConfig, ck: &Checkpoint, data: &ExperimentData, out: &Path) -> Result<String> {
    let domains = data.training_domains(ck.seed)?;
    let k = cfg.eval.k;
    let mut csv = format!("domain,split,cases,hr{k},ndcg{k}\n");
    for (d, id) in DOMAINS.into_iter().enumerate() {
        let model = &ck.models[d];
        if model.num_users() != domains[d].num_users() || model.num_items() != domains[d].num_items {
            return Err(Error::ShapeMismatch(format!("checkpoint does not fit the {id} data")));
        }
        let emb = propagate(model, &domains[d].graphs)?;
        for (split, name) in [(EvalSplit::Validation, "validation"), (EvalSplit::Test, "test")] {
            let r = evaluation::evaluate(&emb, &domains[d], split, k)?;
            csv.push_str(&format!("{id},{name},{},{},{}\n", r.cases.len(), r.hr, r.ndcg));
        }
    }
    io::write_atomic(out, csv.as_bytes())?;
    Ok(csv)
}

/// The four-variant comparison; writes `ablation.csv` and `ablation_summary.csv` under `out`.
pub fn cmd_ablate(cfg: &PipelineConfig, seed: u64, data: &ExperimentData, out: &Path) -> Result<evaluation::AblationTable> {
    let base = cfg.train_config(seed);
    let variants = evaluation::standard_variants(&base);
    let table = evaluation::run_ablation(data, &cfg.model, &base, &variants, &cfg.ablation_seeds(seed))?;
    create_dir(out)?;
    table.save(&out.join("ablation.csv"), &out.join("ablation_summary.csv"))?;
    Ok(table)
}
