//! Two-domain interaction data: ingestion, synthesis, splitting and the
//! user-item bipartite graph.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::linalg::CsrMatrix;

/// Item feature rows for one modality (`num_items × dim`).
pub type FeatureMatrix = Array2<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DomainId {
    Source,
    Target,
}

impl DomainId {
    pub fn as_str(self) -> &'static str {
        match self {
            DomainId::Source => "source",
            DomainId::Target => "target",
        }
    }
}

impl fmt::Display for DomainId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Binary user-item interactions of one domain plus per-modality item features.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainDataset {
    pub domain: DomainId,
    pub user_ids: Vec<String>,
    pub item_ids: Vec<String>,
    /// Sorted, deduplicated `(user, item)` pairs.
    pub interactions: Vec<(usize, usize)>,
    pub features: BTreeMap<String, FeatureMatrix>,
}

impl DomainDataset {
    pub fn num_users(&self) -> usize {
        self.user_ids.len()
    }

    pub fn num_items(&self) -> usize {
        self.item_ids.len()
    }

    pub fn user_index(&self) -> HashMap<&str, usize> {
        self.user_ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect()
    }

    pub fn item_index(&self) -> HashMap<&str, usize> {
        self.item_ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect()
    }

    /// Checks index ranges, per-user/per-item coverage and feature row counts.
    pub fn validate(&self) -> Result<()> {
        let (nu, ni) = (self.num_users(), self.num_items());
        let mut user_seen = vec![false; nu];
        let mut item_seen = vec![false; ni];
        for &(u, i) in &self.interactions {
            if u >= nu || i >= ni {
                return Err(Error::Contract(format!("interaction ({u}, {i}) out of range")));
            }
            user_seen[u] = true;
            item_seen[i] = true;
        }
        if let Some(u) = user_seen.iter().position(|s| !s) {
            return Err(Error::Contract(format!("user {} has no interactions", self.user_ids[u])));
        }
        if let Some(i) = item_seen.iter().position(|s| !s) {
            return Err(Error::Contract(format!("item {} has no interactions", self.item_ids[i])));
        }
        for (name, f) in &self.features {
            if f.nrows() != ni {
                return Err(Error::Contract(format!(
                    "modality {name} has {} rows for {ni} items",
                    f.nrows()
                )));
            }
        }
        Ok(())
    }

    /// Items of each user, in ascending order.
    pub fn items_by_user(&self) -> Vec<Vec<usize>> {
        group_by_user(self.num_users(), &self.interactions)
    }
}

fn group_by_user(num_users: usize, pairs: &[(usize, usize)]) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new(); num_users];
    for &(u, i) in pairs {
        out[u].push(i);
    }
    for items in &mut out {
        items.sort_unstable();
    }
    out
}

/// Reads `user_id<TAB>item_id<TAB>rating` rows, binarizes at `threshold` and
/// iteratively drops users and items with fewer than `min_interactions`.
pub fn load_ratings(
    path: &Path,
    domain: DomainId,
    threshold: f64,
    min_interactions: usize,
) -> Result<DomainDataset> {
    let text = io::read_to_string(path)?;
    let mut positives: BTreeSet<(String, String)> = BTreeSet::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: lineno + 1,
            message,
        };
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 3 {
            return Err(parse_err(format!("expected 3 columns, found {}", cols.len())));
        }
        let rating: f64 = cols[2]
            .trim()
            .parse()
            .map_err(|_| parse_err(format!("bad rating `{}`", cols[2])))?;
        if rating >= threshold {
            positives.insert((cols[0].trim().to_string(), cols[1].trim().to_string()));
        }
    }

    let min = min_interactions.max(1);
    loop {
        let mut ucount: HashMap<&str, usize> = HashMap::new();
        let mut icount: HashMap<&str, usize> = HashMap::new();
        for (u, i) in &positives {
            *ucount.entry(u).or_default() += 1;
            *icount.entry(i).or_default() += 1;
        }
        let before = positives.len();
        let keep: BTreeSet<(String, String)> = positives
            .iter()
            .filter(|(u, i)| ucount[u.as_str()] >= min && icount[i.as_str()] >= min)
            .cloned()
            .collect();
        positives = keep;
        if positives.len() == before {
            break;
        }
    }
    if positives.is_empty() {
        return Err(Error::EmptyDataset);
    }

    let user_ids: Vec<String> = positives
        .iter()
        .map(|(u, _)| u.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let item_ids: Vec<String> = positives
        .iter()
        .map(|(_, i)| i.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let mut ds = DomainDataset {
        domain,
        user_ids,
        item_ids,
        interactions: Vec::new(),
        features: BTreeMap::new(),
    };
    let (uidx, iidx) = (ds.user_index(), ds.item_index());
    let mut interactions: Vec<(usize, usize)> = positives
        .iter()
        .map(|(u, i)| (uidx[u.as_str()], iidx[i.as_str()]))
        .collect();
    interactions.sort_unstable();
    ds.interactions = interactions;
    Ok(ds)
}

/// Reads `item_id<TAB>v1<TAB>…<TAB>vD` rows and orders them by `item_ids`.
///
/// Rows for ids outside `item_ids` are rejected; every listed item must be present.
pub fn load_features(path: &Path, item_ids: &[String]) -> Result<FeatureMatrix> {
    let rows = io::read_id_vectors(path)?;
    let index: HashMap<&str, usize> =
        item_ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    let dim = rows.first().map_or(0, |(_, v)| v.len());
    let mut out = Array2::zeros((item_ids.len(), dim));
    let mut filled = vec![false; item_ids.len()];
    for (id, values) in rows {
        if values.len() != dim {
            return Err(Error::DimensionMismatch {
                item: id,
                expected: dim,
                found: values.len(),
            });
        }
        let &row = index.get(id.as_str()).ok_or_else(|| Error::UnknownId(id.clone()))?;
        for (c, v) in values.into_iter().enumerate() {
            out[[row, c]] = v;
        }
        filled[row] = true;
    }
    if let Some(missing) = filled.iter().position(|f| !f) {
        return Err(Error::Schema(format!(
            "{}: no feature row for item {}",
            path.display(),
            item_ids[missing]
        )));
    }
    Ok(out)
}

/// One-to-one pairing of overlapped users between the source and target domains.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlapMap {
    /// `(source_user, target_user)` index pairs.
    pub pairs: Vec<(usize, usize)>,
    pub ratio: f64,
}

impl OverlapMap {
    pub fn new(pairs: Vec<(usize, usize)>, ratio: f64) -> Result<Self> {
        let map = OverlapMap { pairs, ratio };
        map.validate()?;
        Ok(map)
    }

    pub fn validate(&self) -> Result<()> {
        let mut src = BTreeSet::new();
        let mut tgt = BTreeSet::new();
        for &(s, t) in &self.pairs {
            if !src.insert(s) || !tgt.insert(t) {
                return Err(Error::Contract(format!("overlap pair ({s}, {t}) is not one-to-one")));
            }
        }
        Ok(())
    }

    pub fn target_of(&self) -> HashMap<usize, usize> {
        self.pairs.iter().copied().collect()
    }

    /// Reads `source_user_id<TAB>target_user_id` rows. Pairs whose users were
    /// filtered out of either dataset are dropped.
    pub fn load(path: &Path, source: &DomainDataset, target: &DomainDataset) -> Result<Self> {
        let text = io::read_to_string(path)?;
        let (sidx, tidx) = (source.user_index(), target.user_index());
        let mut pairs = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').map(str::trim).collect();
            if cols.len() != 2 {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: lineno + 1,
                    message: format!("expected 2 columns, found {}", cols.len()),
                });
            }
            if let (Some(&s), Some(&t)) = (sidx.get(cols[0]), tidx.get(cols[1])) {
                pairs.push((s, t));
            }
        }
        pairs.sort_unstable();
        let denom = source.num_users().min(target.num_users()).max(1) as f64;
        let ratio = pairs.len() as f64 / denom;
        OverlapMap::new(pairs, ratio)
    }
}

/// Parameters of the synthetic two-domain generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub source_users: usize,
    pub target_users: usize,
    pub source_items: usize,
    pub target_items: usize,
    pub latent_dim: usize,
    /// Overlapped user ratio, strictly inside (0, 1).
    pub overlap_ratio: f64,
    /// Modality name and feature dimension.
    pub modalities: Vec<(String, usize)>,
    /// Standard deviation of the Gaussian feature noise.
    pub noise: f64,
    /// Mean interactions per user and domain.
    pub interactions_per_user: usize,
    /// Inverse temperature of the preference softmax used to sample interactions.
    pub sharpness: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            source_users: 500,
            target_users: 500,
            source_items: 300,
            target_items: 300,
            latent_dim: 8,
            overlap_ratio: 0.1,
            modalities: vec![("visual".into(), 32), ("text".into(), 24)],
            noise: 0.5,
            interactions_per_user: 12,
            sharpness: 4.0,
        }
    }
}

/// Samples two domains whose overlapped users share one latent preference vector.
///
/// Item features are per-modality random projections of the item latent factor
/// plus Gaussian noise; each user draws interactions without replacement with
/// probability proportional to `exp(sharpness · ⟨user, item⟩)`.
pub fn generate_synthetic(
    cfg: &SyntheticConfig,
    seed: u64,
) -> Result<(DomainDataset, DomainDataset, OverlapMap)> {
    if !(cfg.overlap_ratio > 0.0 && cfg.overlap_ratio < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "overlap ratio must lie in (0, 1), got {}",
            cfg.overlap_ratio
        )));
    }
    if cfg.latent_dim == 0 || cfg.interactions_per_user == 0 {
        return Err(Error::InvalidParameter("latent_dim and interactions_per_user must be positive".into()));
    }
    for (nu, ni) in [(cfg.source_users, cfg.source_items), (cfg.target_users, cfg.target_items)] {
        if nu == 0 || ni < 2 {
            return Err(Error::InvalidParameter("each domain needs users and at least 2 items".into()));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = cfg.latent_dim;

    let source_users = unit_rows(&mut rng, cfg.source_users, r);
    let mut target_users = unit_rows(&mut rng, cfg.target_users, r);

    let num_pairs = (cfg.overlap_ratio * cfg.source_users.min(cfg.target_users) as f64).round() as usize;
    let mut sperm: Vec<usize> = (0..cfg.source_users).collect();
    let mut tperm: Vec<usize> = (0..cfg.target_users).collect();
    sperm.shuffle(&mut rng);
    tperm.shuffle(&mut rng);
    let mut pairs: Vec<(usize, usize)> = sperm.into_iter().zip(tperm).take(num_pairs).collect();
    pairs.sort_unstable();
    for &(s, t) in &pairs {
        let shared = source_users.row(s).to_owned();
        target_users.row_mut(t).assign(&shared);
    }
    let source = synth_domain(&mut rng, cfg, DomainId::Source, &source_users, cfg.source_items);
    let target = synth_domain(&mut rng, cfg, DomainId::Target, &target_users, cfg.target_items);
    let overlap = OverlapMap::new(pairs, cfg.overlap_ratio)?;
    Ok((source, target, overlap))
}

fn unit_rows(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> Array2<f64> {
    let mut m = Array2::<f64>::zeros((n, dim));
    for mut row in m.rows_mut() {
        for v in row.iter_mut() {
            *v = StandardNormal.sample(rng);
        }
        let norm = row.dot(&row).sqrt().max(1e-12);
        row /= norm;
    }
    m
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    let mut m = Array2::zeros((rows, cols));
    for v in m.iter_mut() {
        let z: f64 = StandardNormal.sample(rng);
        *v = scale * z;
    }
    m
}

/// Random linear projection of item latents plus isotropic Gaussian noise.
fn modality_features(rng: &mut ChaCha8Rng, latents: &Array2<f64>, dim: usize, noise: f64) -> FeatureMatrix {
    let projection = gaussian(rng, latents.ncols(), dim, 1.0);
    let noise = gaussian(rng, latents.nrows(), dim, noise);
    latents.dot(&projection) + noise
}

fn synth_domain(
    rng: &mut ChaCha8Rng,
    cfg: &SyntheticConfig,
    domain: DomainId,
    users: &Array2<f64>,
    num_items: usize,
) -> DomainDataset {
    let r = cfg.latent_dim;
    let items = unit_rows(rng, num_items, r);
    let prefix = match domain {
        DomainId::Source => "s",
        DomainId::Target => "t",
    };

    let mut features = BTreeMap::new();
    for (name, dim) in &cfg.modalities {
        features.insert(name.clone(), modality_features(rng, &items, *dim, cfg.noise));
    }

    let affinity = users.dot(&items.t());
    let mut pairs: BTreeSet<(usize, usize)> = BTreeSet::new();
    let lo = (cfg.interactions_per_user / 2).max(1);
    let hi = (cfg.interactions_per_user * 3 / 2).max(lo).min(num_items - 1);
    for u in 0..users.nrows() {
        let count = rng.random_range(lo..=hi.max(lo));
        // Gumbel top-k draws `count` items without replacement from the softmax.
        let mut keyed: Vec<(f64, usize)> = (0..num_items)
            .map(|i| {
                let g: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
                (cfg.sharpness * affinity[[u, i]] - (-g.ln()).ln(), i)
            })
            .collect();
        keyed.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        for &(_, i) in keyed.iter().take(count) {
            pairs.insert((u, i));
        }
    }
    // every item needs at least one interaction; give orphans to their best-matching user
    let mut covered = vec![false; num_items];
    for &(_, i) in &pairs {
        covered[i] = true;
    }
    for i in (0..num_items).filter(|&i| !covered[i]) {
        let best = (0..users.nrows())
            .max_by(|&a, &b| affinity[[a, i]].total_cmp(&affinity[[b, i]]).then(b.cmp(&a)))
            .unwrap();
        pairs.insert((best, i));
    }

    DomainDataset {
        domain,
        user_ids: (0..users.nrows()).map(|u| format!("{prefix}u{u:06}")).collect(),
        item_ids: (0..num_items).map(|i| format!("{prefix}i{i:06}")).collect(),
        interactions: pairs.into_iter().collect(),
        features,
    }
}

/// Disjoint train / validation / test partition of one domain's interactions.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: Vec<(usize, usize)>,
    pub validation: Vec<(usize, usize)>,
    pub test: Vec<(usize, usize)>,
}

impl Split {
    pub fn train_items_by_user(&self, num_users: usize) -> Vec<Vec<usize>> {
        group_by_user(num_users, &self.train)
    }

    pub fn validation_items_by_user(&self, num_users: usize) -> Vec<Vec<usize>> {
        group_by_user(num_users, &self.validation)
    }

    pub fn test_items_by_user(&self, num_users: usize) -> Vec<Vec<usize>> {
        group_by_user(num_users, &self.test)
    }
}

/// Per-user 8:1:1 split with randomized rounding; every user keeps at least one
/// training interaction.
pub fn split_dataset(ds: &DomainDataset, seed: u64) -> Result<Split> {
    if ds.interactions.len() < 3 {
        return Err(Error::InvalidParameter("split needs at least 3 interactions".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut split = Split {
        train: Vec::new(),
        validation: Vec::new(),
        test: Vec::new(),
    };
    for (u, mut items) in ds.items_by_user().into_iter().enumerate() {
        let n = items.len();
        if n == 0 {
            continue;
        }
        items.shuffle(&mut rng);
        let tenth = n as f64 * 0.1;
        let mut n_test = (tenth + rng.random::<f64>()).floor() as usize;
        let mut n_val = (tenth + rng.random::<f64>()).floor() as usize;
        while n_test + n_val >= n {
            if n_test >= n_val && n_test > 0 {
                n_test -= 1;
            } else {
                n_val -= 1;
            }
        }
        for (k, &i) in items.iter().enumerate() {
            let bucket = if k < n_test {
                &mut split.test
            } else if k < n_test + n_val {
                &mut split.validation
            } else {
                &mut split.train
            };
            bucket.push((u, i));
        }
    }
    split.train.sort_unstable();
    split.validation.sort_unstable();
    split.test.sort_unstable();
    Ok(split)
}

/// Symmetric block adjacency `[[0, R], [Rᵀ, 0]]` over users followed by items.
#[derive(Debug, Clone, PartialEq)]
pub struct BipartiteGraph {
    pub num_users: usize,
    pub num_items: usize,
    pub adjacency: CsrMatrix,
}

/// Assembles the interaction graph from training interactions only.
pub fn build_bipartite(ds: &DomainDataset, split: &Split) -> BipartiteGraph {
    let nu = ds.num_users();
    let n = nu + ds.num_items();
    let mut triplets = Vec::with_capacity(split.train.len() * 2);
    for &(u, i) in &split.train {
        triplets.push((u, nu + i, 1.0));
        triplets.push((nu + i, u, 1.0));
    }
    BipartiteGraph {
        num_users: nu,
        num_items: ds.num_items(),
        adjacency: CsrMatrix::from_triplets(n, n, triplets),
    }
}

pub fn write_ratings(path: &Path, ds: &DomainDataset) -> Result<()> {
    let mut out = String::new();
    for &(u, i) in &ds.interactions {
        out.push_str(&format!("{}\t{}\t5\n", ds.user_ids[u], ds.item_ids[i]));
    }
    io::write_atomic(path, out.as_bytes())
}

pub fn write_features(path: &Path, ds: &DomainDataset, modality: &str) -> Result<()> {
    let f = ds
        .features
        .get(modality)
        .ok_or_else(|| Error::UnknownId(modality.to_string()))?;
    io::write_id_vectors(path, &ds.item_ids, f.view())
}

pub fn write_overlap(path: &Path, source: &DomainDataset, target: &DomainDataset, overlap: &OverlapMap) -> Result<()> {
    let mut out = String::new();
    for &(s, t) in &overlap.pairs {
        out.push_str(&format!("{}\t{}\n", source.user_ids[s], target.user_ids[t]));
    }
    io::write_atomic(path, out.as_bytes())
}
