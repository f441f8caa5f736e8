//! Semantic labelling of class-agnostic instance masks by majority vote.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::types::{ClassId, ClassTable, InstanceMask, SemanticInstance};

/// Per-pixel class labels from a semantic segmenter.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SemanticMap {
    width: usize,
    height: usize,
    labels: Vec<ClassId>,
    ignore_label: ClassId,
}

impl SemanticMap {
    pub fn new(width: usize, height: usize, labels: Vec<ClassId>, ignore_label: ClassId) -> Result<Self> {
        ensure!(
            labels.len() == width * height,
            Contract,
            "semantic map has {} labels for {width}x{height}",
            labels.len()
        );
        Ok(Self {
            width,
            height,
            labels,
            ignore_label,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn labels(&self) -> &[ClassId] {
        &self.labels
    }

    pub fn ignore_label(&self) -> ClassId {
        self.ignore_label
    }
}

/// Labels every instance with the most frequent non-ignore class under its
/// mask. Ties go to the lowest class id. Instances whose pixels are all
/// ignore-labelled (or that are empty) get the ignore label with zero
/// confidence. Masks may overlap; each votes on its own.
pub fn fuse_semantics(instances: &[InstanceMask], semantic: &SemanticMap) -> Result<Vec<SemanticInstance>> {
    instances
        .iter()
        .map(|mask| {
            ensure!(
                mask.same_size(semantic.width, semantic.height),
                Contract,
                "mask {} is {}x{}, semantic map is {}x{}",
                mask.id(),
                mask.width(),
                mask.height(),
                semantic.width,
                semantic.height
            );
            let mut votes: BTreeMap<ClassId, usize> = BTreeMap::new();
            for i in mask.indices() {
                let label = semantic.labels[i];
                if label != semantic.ignore_label {
                    *votes.entry(label).or_default() += 1;
                }
            }
            let voted: usize = votes.values().sum();
            // BTreeMap iterates in ascending id order; keep the first maximum.
            let winner = votes.iter().fold(None, |best: Option<(ClassId, usize)>, (&l, &n)| match best {
                Some((_, bn)) if bn >= n => best,
                _ => Some((l, n)),
            });
            match winner {
                Some((label, n)) => SemanticInstance::new(mask.clone(), label, n, voted),
                None => SemanticInstance::new(mask.clone(), semantic.ignore_label, 0, 0),
            }
        })
        .collect()
}

/// Splits instances into (foreground, background) by label membership in
/// `background_classes`. Input order is preserved within each side.
pub fn classify_background(
    instances: Vec<SemanticInstance>,
    background_classes: &BTreeSet<ClassId>,
) -> (Vec<SemanticInstance>, Vec<SemanticInstance>) {
    instances.into_iter().partition(|inst| !background_classes.contains(&inst.label()))
}

/// Class names that count as room structure unless configured otherwise.
pub const DEFAULT_BACKGROUND_CLASSES: [&str; 5] = ["wall", "floor", "ceiling", "window", "door"];

/// Names of the background classes, resolved to ids through a class table.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct MaskFuseConfig {
    pub background_classes: Vec<String>,
    /// Classes treated as flat surfaces when weighting depth alignment.
    pub flat_classes: Vec<String>,
    pub ignore_label: u32,
}

impl Default for MaskFuseConfig {
    fn default() -> Self {
        Self {
            background_classes: DEFAULT_BACKGROUND_CLASSES.iter().map(|s| s.to_string()).collect(),
            flat_classes: ["wall", "floor", "ceiling"].iter().map(|s| s.to_string()).collect(),
            ignore_label: 0,
        }
    }
}

/// Ids of the named classes present in `table`; unknown names are skipped.
pub fn resolve_classes(table: &ClassTable, names: &[String]) -> BTreeSet<ClassId> {
    names.iter().filter_map(|n| table.id(n)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(w: usize, h: usize, labels: &[u32]) -> SemanticMap {
        SemanticMap::new(w, h, labels.iter().map(|l| ClassId(*l)).collect(), ClassId(0)).unwrap()
    }

    #[test]
    fn majority_wins_with_fraction() {
        // 10-pixel mask: 6 pixels of class 7, 4 of class 3.
        let labels = [7, 7, 7, 7, 7, 7, 3, 3, 3, 3, 1, 1];
        let m = InstanceMask::from_fn(1, 12, 1, |x, _| x < 10);
        let out = fuse_semantics(&[m], &map(12, 1, &labels)).unwrap();
        assert_eq!(out[0].label(), ClassId(7));
        assert_eq!(out[0].label_confidence(), 0.6);
        assert_eq!(out[0].votes(), 6);
    }

    #[test]
    fn unanimous_vote() {
        let m = InstanceMask::from_fn(1, 5, 1, |_, _| true);
        let out = fuse_semantics(&[m], &map(5, 1, &[2; 5])).unwrap();
        assert_eq!((out[0].label(), out[0].label_confidence()), (ClassId(2), 1.0));
    }

    #[test]
    fn empty_and_all_ignore_masks() {
        let empty = InstanceMask::empty(1, 4, 1);
        let ignored = InstanceMask::from_fn(2, 4, 1, |x, _| x < 2);
        let out = fuse_semantics(&[empty, ignored], &map(4, 1, &[0, 0, 5, 5])).unwrap();
        for inst in &out {
            assert_eq!((inst.label(), inst.label_confidence()), (ClassId(0), 0.0));
        }
    }

    #[test]
    fn tie_goes_to_lowest_id() {
        let m = InstanceMask::from_fn(1, 4, 1, |_, _| true);
        let out = fuse_semantics(&[m], &map(4, 1, &[9, 4, 9, 4])).unwrap();
        assert_eq!(out[0].label(), ClassId(4));
    }

    #[test]
    fn dimension_mismatch() {
        let m = InstanceMask::empty(1, 3, 1);
        assert!(fuse_semantics(&[m], &map(4, 1, &[0; 4])).is_err());
    }

    #[test]
    fn background_partition() {
        let table = ClassTable::new([
            (1, "wall".into()),
            (2, "floor".into()),
            (3, "ceiling".into()),
            (4, "sofa".into()),
            (5, "chair".into()),
        ]);
        let inst = |id, label| SemanticInstance::new(InstanceMask::empty(id, 1, 1), ClassId(label), 0, 0).unwrap();
        let bg = resolve_classes(&table, &["wall".into(), "floor".into(), "ceiling".into()]);
        let (fg, b) = classify_background(vec![inst(1, 1), inst(2, 4)], &bg);
        assert_eq!(fg.iter().map(|i| i.mask().id()).collect::<Vec<_>>(), vec![2]);
        assert_eq!(b.iter().map(|i| i.mask().id()).collect::<Vec<_>>(), vec![1]);
        assert_eq!(classify_background(vec![], &bg), (vec![], vec![]));
        let (fg, b) = classify_background(vec![inst(1, 4), inst(2, 5)], &BTreeSet::new());
        assert_eq!((fg.len(), b.len()), (2, 0));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn votes_are_consistent_and_order_equivariant(
                labels in proptest::collection::vec(0u32..4, 36),
                masks in proptest::collection::vec(proptest::collection::vec(any::<bool>(), 36), 1..5),
            ) {
                let sem = map(6, 6, &labels);
                let masks: Vec<InstanceMask> = masks
                    .into_iter()
                    .enumerate()
                    .map(|(i, b)| InstanceMask::new(i as u32 + 1, 6, 6, b).unwrap())
                    .collect();
                let out = fuse_semantics(&masks, &sem).unwrap();
                for (inst, m) in out.iter().zip(&masks) {
                    prop_assert_eq!(inst.mask(), m);
                    let brute = m.indices().filter(|&i| sem.labels()[i] == inst.label()).count();
                    if inst.voted_pixels() > 0 {
                        prop_assert_eq!(inst.votes(), brute);
                        let recon = inst.label_confidence() * inst.voted_pixels() as f64;
                        prop_assert!((recon - inst.votes() as f64).abs() < 1e-9);
                    }
                }
                let mut rev = masks.clone();
                rev.reverse();
                let mut out_rev = fuse_semantics(&rev, &sem).unwrap();
                out_rev.reverse();
                prop_assert_eq!(out, out_rev);
            }
        }
    }
}
