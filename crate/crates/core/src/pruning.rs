//! Similarity-driven kernel pruning.
//!
//! A sweep runs per layer: pairwise distances among the active kernels, a
//! candidate list of similar pairs, per-kernel appearance counts, and removal
//! of the kernels whose count exceeds the frequency threshold. Within one
//! sweep at most one member of any candidate pair is removed, so every
//! similar pair keeps a representative.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::similarity::{KernelVector, SearchEngine, SimilarityError, SimilarityMatrix};

#[derive(Debug, Error)]
pub enum PruneError {
    #[error("kernel {kernel} of layer {layer} is already pruned")]
    AlreadyPruned { layer: usize, kernel: usize },
    #[error("layer {layer} has no kernel {kernel}")]
    UnknownKernel { layer: usize, kernel: usize },
    #[error("invalid prune config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Similarity(#[from] SimilarityError),
    #[error("network: {0}")]
    Network(Box<dyn std::error::Error + Send + Sync>),
}

/// How a distance is compared against the threshold to call a pair similar.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum Comparator {
    #[default]
    SimilarIfAtMost,
    SimilarIfAtLeast,
}

/// `[prune]` config section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PruneConfig {
    pub enabled: bool,
    /// Raw distance units, or a fraction of the kernel length when
    /// `normalized` is set.
    pub distance_threshold: f64,
    pub normalized: bool,
    /// A kernel is removable once its candidate-pair count exceeds this.
    pub frequency_threshold: u32,
    /// Per-layer overrides of `frequency_threshold`.
    pub layer_frequency_thresholds: Option<Vec<u32>>,
    pub cadence_epochs: u32,
    pub min_kernels_per_layer: usize,
    /// Cap on pruned kernels over all prunable layers.
    pub max_prune_fraction: f64,
    pub comparator: Comparator,
}

impl Default for PruneConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            distance_threshold: 0.0,
            normalized: false,
            frequency_threshold: 0,
            layer_frequency_thresholds: None,
            cadence_epochs: 1,
            min_kernels_per_layer: 2,
            max_prune_fraction: 0.5,
            comparator: Comparator::SimilarIfAtMost,
        }
    }
}

impl PruneConfig {
    pub fn validate(&self) -> Result<(), PruneError> {
        let bad = |m: &str| Err(PruneError::InvalidConfig(m.into()));
        if !(self.distance_threshold >= 0.0 && self.distance_threshold.is_finite()) {
            return bad("distance_threshold must be finite and non-negative");
        }
        if self.min_kernels_per_layer < 1 {
            return bad("min_kernels_per_layer must be at least 1");
        }
        if !(self.max_prune_fraction > 0.0 && self.max_prune_fraction <= 1.0) {
            return bad("max_prune_fraction must lie in (0, 1]");
        }
        if self.cadence_epochs < 1 {
            return bad("cadence_epochs must be at least 1");
        }
        Ok(())
    }

    /// Threshold in raw units for kernels of `len` elements.
    pub fn raw_threshold(&self, len: usize) -> f64 {
        if self.normalized {
            self.distance_threshold * len as f64
        } else {
            self.distance_threshold
        }
    }

    pub fn frequency_threshold_for(&self, layer: usize) -> u32 {
        self.layer_frequency_thresholds
            .as_ref()
            .and_then(|t| t.get(layer).copied())
            .unwrap_or(self.frequency_threshold)
    }

    fn similar(&self, d: u64, threshold: f64) -> bool {
        match self.comparator {
            Comparator::SimilarIfAtMost => d as f64 <= threshold,
            Comparator::SimilarIfAtLeast => d as f64 >= threshold,
        }
    }

    /// Whether a sweep is due after `epoch` (1-based).
    pub fn sweep_due(&self, epoch: u32) -> bool {
        self.enabled && epoch.is_multiple_of(self.cadence_epochs)
    }
}

/// `(kernel i, kernel j, distance)` with `i < j`, in kernel ids.
pub type CandidatePair = (usize, usize, u64);

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PruneRecord {
    pub epoch: u32,
    pub layer: usize,
    pub pruned_ids: Vec<usize>,
    pub active: usize,
    pub weights: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneState {
    /// Per layer, per kernel.
    pub active_mask: Vec<Vec<bool>>,
    /// Weights held by one kernel of each layer.
    pub kernel_weights: Vec<usize>,
    pub history: Vec<PruneRecord>,
    /// Candidate pairs of the most recent sweep, per layer.
    pub candidate_pairs: Vec<Vec<CandidatePair>>,
}

impl PruneState {
    /// `layers[l] = (kernel count, weights per kernel)`.
    pub fn new(layers: &[(usize, usize)]) -> Self {
        Self {
            active_mask: layers.iter().map(|&(n, _)| vec![true; n]).collect(),
            kernel_weights: layers.iter().map(|&(_, w)| w).collect(),
            history: Vec::new(),
            candidate_pairs: vec![Vec::new(); layers.len()],
        }
    }

    pub fn active(&self, layer: usize) -> usize {
        self.active_mask[layer].iter().filter(|&&a| a).count()
    }

    pub fn active_ids(&self, layer: usize) -> Vec<usize> {
        (0..self.active_mask[layer].len()).filter(|&k| self.active_mask[layer][k]).collect()
    }

    pub fn total_kernels(&self) -> usize {
        self.active_mask.iter().map(Vec::len).sum()
    }

    pub fn total_active(&self) -> usize {
        (0..self.active_mask.len()).map(|l| self.active(l)).sum()
    }

    pub fn pruned_fraction(&self) -> f64 {
        let total = self.total_kernels();
        if total == 0 {
            0.0
        } else {
            1.0 - self.total_active() as f64 / total as f64
        }
    }

    pub fn weights(&self, layer: usize) -> usize {
        self.active(layer) * self.kernel_weights[layer]
    }

    /// `epoch,layer,pruned_ids,active,weights`; ids are `;`-separated.
    pub fn history_csv(&self) -> String {
        let mut out = String::from("epoch,layer,pruned_ids,active,weights\n");
        for r in &self.history {
            let ids: Vec<String> = r.pruned_ids.iter().map(usize::to_string).collect();
            out.push_str(&format!("{},{},{},{},{}\n", r.epoch, r.layer, ids.join(";"), r.active, r.weights));
        }
        out
    }
}

/// Similar pairs under the configured comparator. `sm.sources[i].1` is the
/// kernel id of matrix index `i`.
pub fn build_candidates(sm: &SimilarityMatrix, threshold: f64, cfg: &PruneConfig) -> Vec<CandidatePair> {
    let mut pairs = Vec::new();
    for i in 0..sm.n {
        for j in i + 1..sm.n {
            let d = sm.get(i, j);
            if cfg.similar(d, threshold) {
                let (a, b) = (sm.sources[i].1, sm.sources[j].1);
                pairs.push((a.min(b), a.max(b), d));
            }
        }
    }
    pairs
}

pub fn frequency_count(pairs: &[CandidatePair]) -> BTreeMap<usize, u32> {
    let mut counts = BTreeMap::new();
    for &(i, j, _) in pairs {
        *counts.entry(i).or_insert(0) += 1;
        *counts.entry(j).or_insert(0) += 1;
    }
    counts
}

/// Kernels of `layer` to remove this sweep.
///
/// Kernels whose count exceeds the layer's frequency threshold are taken by
/// descending count, then ascending id. A kernel is skipped when one of its
/// candidate partners is already selected. Selection stops at the layer
/// floor and at the global pruned-fraction cap.
pub fn select_prune(
    layer: usize,
    counts: &BTreeMap<usize, u32>,
    pairs: &[CandidatePair],
    cfg: &PruneConfig,
    state: &PruneState,
) -> Vec<usize> {
    let threshold = cfg.frequency_threshold_for(layer);
    let mut order: Vec<(usize, u32)> =
        counts.iter().filter(|&(&k, &c)| c > threshold && state.active_mask[layer][k]).map(|(&k, &c)| (k, c)).collect();
    order.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));

    let cap = (cfg.max_prune_fraction * state.total_kernels() as f64 + 1e-9).floor() as usize;
    let already = state.total_kernels() - state.total_active();
    let budget = cap.saturating_sub(already);
    let floor_room = state.active(layer).saturating_sub(cfg.min_kernels_per_layer);
    let limit = budget.min(floor_room);

    let mut partners: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for &(i, j, _) in pairs {
        partners.entry(i).or_default().push(j);
        partners.entry(j).or_default().push(i);
    }
    let mut selected = BTreeSet::new();
    let mut out = Vec::new();
    for (k, _) in order {
        if out.len() == limit {
            break;
        }
        if partners.get(&k).is_some_and(|ps| ps.iter().any(|p| selected.contains(p))) {
            continue;
        }
        selected.insert(k);
        out.push(k);
    }
    out
}

/// Marks `ids` of `layer` pruned and appends a history record.
pub fn apply_prune(state: &mut PruneState, layer: usize, ids: &[usize], epoch: u32) -> Result<(), PruneError> {
    for &k in ids {
        match state.active_mask[layer].get(k) {
            None => return Err(PruneError::UnknownKernel { layer, kernel: k }),
            Some(false) => return Err(PruneError::AlreadyPruned { layer, kernel: k }),
            Some(true) => {}
        }
    }
    for &k in ids {
        state.active_mask[layer][k] = false;
    }
    state.history.push(PruneRecord {
        epoch,
        layer,
        pruned_ids: ids.to_vec(),
        active: state.active(layer),
        weights: state.weights(layer),
    });
    Ok(())
}

/// A network whose kernels can be inspected and masked by a sweep.
pub trait PrunableNetwork {
    /// `(kernel count, weights per kernel)` per prunable layer.
    fn prunable_layers(&self) -> Vec<(usize, usize)>;

    /// Kernel vectors of the listed kernels, as resident in hardware.
    fn kernel_vectors(&mut self, layer: usize, ids: &[usize]) -> Result<Vec<KernelVector>, PruneError>;

    /// Removes kernels: their output channels and the matching downstream
    /// input channels stop contributing.
    fn mask_kernels(&mut self, layer: usize, ids: &[usize]) -> Result<(), PruneError>;
}

/// Per-layer outcome of one sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepLayer {
    pub layer: usize,
    pub candidates: usize,
    pub pruned: Vec<usize>,
    pub active: usize,
}

/// Runs one sweep over every prunable layer, in layer order.
pub fn prune_sweep<N: PrunableNetwork + ?Sized>(
    net: &mut N,
    engine: &mut SearchEngine,
    cfg: &PruneConfig,
    state: &mut PruneState,
    epoch: u32,
) -> Result<Vec<SweepLayer>, PruneError> {
    cfg.validate()?;
    let mut report = Vec::new();
    for layer in 0..state.active_mask.len() {
        let ids = state.active_ids(layer);
        let pairs = if ids.len() >= 2 {
            let kernels = net.kernel_vectors(layer, &ids)?;
            let len = kernels[0].len();
            let sm = engine.similarity_matrix(&kernels)?;
            build_candidates(&sm, cfg.raw_threshold(len), cfg)
        } else {
            Vec::new()
        };
        let counts = frequency_count(&pairs);
        let pruned = select_prune(layer, &counts, &pairs, cfg, state);
        if !pruned.is_empty() {
            net.mask_kernels(layer, &pruned)?;
        }
        apply_prune(state, layer, &pruned, epoch)?;
        report.push(SweepLayer { layer, candidates: pairs.len(), pruned, active: state.active(layer) });
        state.candidate_pairs[layer] = pairs;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::array::TimingParams;
    use crate::device::DeviceParams;
    use proptest::prelude::*;

    fn matrix(d: &[&[u64]]) -> SimilarityMatrix {
        let n = d.len();
        SimilarityMatrix {
            n,
            metric: crate::similarity::Metric::Hamming,
            sources: (0..n).map(|i| (0, i)).collect(),
            d: d.iter().flat_map(|r| r.iter().copied()).collect(),
        }
    }

    #[test]
    fn candidates_examples() {
        let cfg = PruneConfig::default();
        let sm = matrix(&[&[0, 3, 5, 1], &[3, 0, 2, 4], &[5, 2, 0, 6], &[1, 4, 6, 0]]);
        assert!(build_candidates(&sm, 0.0, &cfg).is_empty());
        assert_eq!(build_candidates(&sm, 2.0, &cfg), vec![(0, 3, 1), (1, 2, 2)]);
        let far = PruneConfig { comparator: Comparator::SimilarIfAtLeast, ..cfg };
        assert_eq!(build_candidates(&sm, 5.0, &far), vec![(0, 2, 5), (2, 3, 6)]);
        let same = matrix(&[&[0, 0], &[0, 0]]);
        assert_eq!(build_candidates(&same, 0.0, &PruneConfig::default()), vec![(0, 1, 0)]);
    }

    #[test]
    fn frequency_examples() {
        assert!(frequency_count(&[]).is_empty());
        let c = frequency_count(&[(1, 2, 0), (1, 3, 0)]);
        assert_eq!(c, BTreeMap::from([(1, 2), (2, 1), (3, 1)]));
    }

    #[test]
    fn selection_rules() {
        let cfg = PruneConfig { min_kernels_per_layer: 1, max_prune_fraction: 1.0, ..Default::default() };
        let state = PruneState::new(&[(4, 9)]);
        let pairs = [(0, 1, 0)];
        assert_eq!(select_prune(0, &frequency_count(&pairs), &pairs, &cfg, &state), vec![0]);
        let strict = PruneConfig { frequency_threshold: 1, ..cfg.clone() };
        assert!(select_prune(0, &frequency_count(&pairs), &pairs, &strict, &state).is_empty());

        // Kernel 0 pairs with 1, 2 and 3; 1 and 2 also pair with each other.
        let pairs = [(0, 1, 0), (0, 2, 0), (0, 3, 0), (1, 2, 0)];
        let got = select_prune(0, &frequency_count(&pairs), &pairs, &cfg, &state);
        assert_eq!(got, vec![0]);
        let pairs = [(0, 1, 0), (2, 3, 0)];
        let floor = PruneConfig { min_kernels_per_layer: 3, ..cfg.clone() };
        assert_eq!(select_prune(0, &frequency_count(&pairs), &pairs, &floor, &state), vec![0]);
        let capped = PruneConfig { max_prune_fraction: 0.25, ..cfg };
        let mut st = state.clone();
        assert_eq!(select_prune(0, &frequency_count(&pairs), &pairs, &capped, &st), vec![0]);
        apply_prune(&mut st, 0, &[0], 1).unwrap();
        assert!(select_prune(0, &frequency_count(&pairs), &pairs, &capped, &st).is_empty());
    }

    #[test]
    fn apply_errors_and_history() {
        let mut st = PruneState::new(&[(3, 9), (2, 4)]);
        apply_prune(&mut st, 0, &[1], 1).unwrap();
        assert!(matches!(apply_prune(&mut st, 0, &[1], 2), Err(PruneError::AlreadyPruned { layer: 0, kernel: 1 })));
        assert!(matches!(apply_prune(&mut st, 1, &[5], 2), Err(PruneError::UnknownKernel { .. })));
        apply_prune(&mut st, 1, &[], 2).unwrap();
        assert_eq!(st.history_csv(), "epoch,layer,pruned_ids,active,weights\n1,0,1,2,18\n2,1,,2,8\n");
        assert!((st.pruned_fraction() - 0.2).abs() < 1e-12);
    }

    #[test]
    fn config_validation() {
        PruneConfig::default().validate().unwrap();
        for bad in [
            PruneConfig { distance_threshold: -1.0, ..Default::default() },
            PruneConfig { min_kernels_per_layer: 0, ..Default::default() },
            PruneConfig { max_prune_fraction: 0.0, ..Default::default() },
            PruneConfig { max_prune_fraction: 1.5, ..Default::default() },
            PruneConfig { cadence_epochs: 0, ..Default::default() },
        ] {
            assert!(bad.validate().is_err());
        }
        let cfg = PruneConfig { normalized: true, distance_threshold: 0.1, ..Default::default() };
        assert!((cfg.raw_threshold(90) - 9.0).abs() < 1e-12);
        let per = PruneConfig { layer_frequency_thresholds: Some(vec![3, 4]), ..Default::default() };
        assert_eq!((per.frequency_threshold_for(1), per.frequency_threshold_for(2)), (4, 0));
    }

    /// Binary kernels held in memory.
    struct Toy {
        kernels: Vec<Vec<Vec<bool>>>,
        masked: Vec<(usize, usize)>,
    }

    impl PrunableNetwork for Toy {
        fn prunable_layers(&self) -> Vec<(usize, usize)> {
            self.kernels.iter().map(|l| (l.len(), l[0].len())).collect()
        }

        fn kernel_vectors(&mut self, layer: usize, ids: &[usize]) -> Result<Vec<KernelVector>, PruneError> {
            Ok(ids.iter().map(|&k| KernelVector::binary((layer, k), self.kernels[layer][k].clone())).collect())
        }

        fn mask_kernels(&mut self, layer: usize, ids: &[usize]) -> Result<(), PruneError> {
            self.masked.extend(ids.iter().map(|&k| (layer, k)));
            Ok(())
        }
    }

    fn engine() -> SearchEngine {
        SearchEngine::new(DeviceParams::default(), TimingParams::default(), 3).unwrap()
    }

    #[test]
    fn orthogonal_kernels_are_never_pruned() {
        let kernels: Vec<Vec<bool>> = (0..6).map(|i| (0..6).map(|j| i == j).collect()).collect();
        let mut toy = Toy { kernels: vec![kernels], masked: vec![] };
        let mut st = PruneState::new(&toy.prunable_layers());
        let cfg = PruneConfig { max_prune_fraction: 1.0, ..Default::default() };
        let mut e = engine();
        for epoch in 1..=4 {
            prune_sweep(&mut toy, &mut e, &cfg, &mut st, epoch).unwrap();
        }
        assert_eq!(st.total_active(), 6);
        assert!(toy.masked.is_empty());
    }

    #[test]
    fn duplicates_collapse_to_one_representative() {
        let base: Vec<Vec<bool>> = (0..4).map(|i| (0..9).map(|j| (i * 7 + j * 3) % 5 < 2).collect()).collect();
        // Classes: {0, 4, 7}, {1, 5}, {2}, {3, 6}.
        let layout = [0, 1, 2, 3, 0, 1, 3, 0];
        let kernels: Vec<Vec<bool>> = layout.iter().map(|&c| base[c].clone()).collect();
        let mut toy = Toy { kernels: vec![kernels], masked: vec![] };
        let mut st = PruneState::new(&toy.prunable_layers());
        let cfg = PruneConfig { max_prune_fraction: 1.0, min_kernels_per_layer: 1, ..Default::default() };
        let mut e = engine();
        for epoch in 1..=2 {
            prune_sweep(&mut toy, &mut e, &cfg, &mut st, epoch).unwrap();
        }
        let survivors: Vec<usize> = st.active_ids(0).iter().map(|&k| layout[k]).collect();
        assert_eq!(survivors.len(), 4);
        assert_eq!(survivors.iter().copied().collect::<BTreeSet<_>>().len(), 4);
    }

    proptest! {
        #[test]
        fn frequency_matches_multiset(pairs in prop::collection::vec((0usize..8, 0usize..8), 0..20)) {
            let pairs: Vec<CandidatePair> =
                pairs.into_iter().filter(|(a, b)| a != b).map(|(a, b)| (a.min(b), a.max(b), 0)).collect();
            let counts = frequency_count(&pairs);
            for k in 0..8 {
                let oracle = pairs.iter().filter(|p| p.0 == k || p.1 == k).count() as u32;
                prop_assert_eq!(counts.get(&k).copied().unwrap_or(0), oracle);
            }
        }

        #[test]
        fn selection_respects_floors_and_pairs(
            pairs in prop::collection::vec((0usize..10, 0usize..10), 0..30),
            min_k in 1usize..6,
            frac in 0.05f64..1.0,
            ft in 0u32..3,
        ) {
            let pairs: Vec<CandidatePair> =
                pairs.into_iter().filter(|(a, b)| a != b).map(|(a, b)| (a.min(b), a.max(b), 0)).collect();
            let cfg = PruneConfig { min_kernels_per_layer: min_k, max_prune_fraction: frac, frequency_threshold: ft, ..Default::default() };
            let mut st = PruneState::new(&[(10, 9)]);
            let counts = frequency_count(&pairs);
            let ids = select_prune(0, &counts, &pairs, &cfg, &st);
            apply_prune(&mut st, 0, &ids, 1).unwrap();
            prop_assert!(st.active(0) >= min_k);
            prop_assert!(st.pruned_fraction() <= frac + 1e-9);
            for &(i, j, _) in &pairs {
                prop_assert!(st.active_mask[0][i] || st.active_mask[0][j]);
            }
            for &k in &ids {
                prop_assert!(counts[&k] > ft);
            }
        }
    }
}
