//! Label-alignment metrics: per-node entropy (bits) and purity.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::taxonomy::{majority_label, ThematicTree};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MetricError {
    #[error("node has no labeled documents")]
    EmptyNode,
    #[error("node `{0}` has no label histogram; assign labels first")]
    MissingHistograms(String),
}

/// −Σ pᵢ log₂ pᵢ over the class proportions, with 0·log 0 = 0.
pub fn node_entropy<K>(counts: &BTreeMap<K, u64>) -> Result<f64, MetricError> {
    let total: u64 = counts.values().sum();
    if total == 0 {
        return Err(MetricError::EmptyNode);
    }
    let total = total as f64;
    let h = counts
        .values()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total;
            -p * p.log2()
        })
        .sum::<f64>();
    // -0.0 for a pure node
    Ok(h.max(0.0))
}

/// Share of the majority class.
pub fn node_purity<K>(counts: &BTreeMap<K, u64>) -> Result<f64, MetricError> {
    let total: u64 = counts.values().sum();
    if total == 0 {
        return Err(MetricError::EmptyNode);
    }
    let max = counts.values().copied().max().unwrap_or(0);
    Ok(max as f64 / total as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeAlignment {
    pub node_id: String,
    pub depth: u32,
    /// Labeled documents in the node.
    pub n: u64,
    /// Documents in the node without a label; not part of `counts`.
    pub unlabeled: u64,
    pub counts: BTreeMap<String, u64>,
    /// `None` when the node has no labeled documents.
    pub entropy_bits: Option<f64>,
    pub purity: Option<f64>,
    pub majority_label: Option<String>,
}

/// One row per node in root-first breadth order.
pub fn tree_alignment_report(tree: &ThematicTree) -> Result<Vec<NodeAlignment>, MetricError> {
    tree.breadth_first()
        .into_iter()
        .map(|node| {
            let counts = node
                .label_histogram
                .clone()
                .ok_or_else(|| MetricError::MissingHistograms(node.node_id.clone()))?;
            let n: u64 = counts.values().sum();
            Ok(NodeAlignment {
                node_id: node.node_id.clone(),
                depth: node.depth,
                n,
                unlabeled: (node.doc_ids.len() as u64).saturating_sub(n),
                entropy_bits: node_entropy(&counts).ok(),
                purity: node_purity(&counts).ok(),
                majority_label: majority_label(&counts).map(str::to_string),
                counts,
            })
        })
        .collect()
}

/// CSV with columns `node_id,depth,n,entropy_bits,purity,majority_label`.
pub fn alignment_csv(rows: &[NodeAlignment]) -> String {
    let mut out = String::from("node_id,depth,n,entropy_bits,purity,majority_label\n");
    let num = |x: Option<f64>| x.map(|v| format!("{v:.6}")).unwrap_or_default();
    for row in rows {
        let label = row.majority_label.as_deref().unwrap_or("");
        let label = if label.contains([',', '"', '\n']) {
            format!("\"{}\"", label.replace('"', "\"\""))
        } else {
            label.to_string()
        };
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            row.node_id,
            row.depth,
            row.n,
            num(row.entropy_bits),
            num(row.purity),
            label
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::taxonomy::{assign_leaf_labels, tests::sample_tree};

    fn counts(pairs: &[(&str, u64)]) -> BTreeMap<String, u64> {
        pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
    }

    #[test]
    fn entropy_examples() {
        assert_eq!(node_entropy(&counts(&[("A", 10)])).unwrap(), 0.0);
        assert!((node_entropy(&counts(&[("A", 5), ("B", 5)])).unwrap() - 1.0).abs() < 1e-12);
        assert!((node_entropy(&counts(&[("A", 3), ("B", 1)])).unwrap() - 0.811278).abs() < 1e-6);
        assert_eq!(node_entropy(&counts(&[])), Err(MetricError::EmptyNode));
        assert_eq!(node_entropy(&counts(&[("A", 0)])), Err(MetricError::EmptyNode));
    }

    #[test]
    fn purity_examples() {
        assert_eq!(node_purity(&counts(&[("A", 10)])).unwrap(), 1.0);
        assert_eq!(node_purity(&counts(&[("A", 5), ("B", 5)])).unwrap(), 0.5);
        assert_eq!(node_purity(&counts(&[("A", 3), ("B", 1)])).unwrap(), 0.75);
        assert_eq!(node_purity(&counts(&[])), Err(MetricError::EmptyNode));
    }

    #[test]
    fn zero_count_classes_are_ignored() {
        let with_zero = counts(&[("A", 3), ("B", 1), ("C", 0)]);
        assert_eq!(
            node_entropy(&with_zero).unwrap(),
            node_entropy(&counts(&[("A", 3), ("B", 1)])).unwrap()
        );
    }

    #[test]
    fn report_rows() {
        let t = sample_tree();
        assert!(matches!(
            tree_alignment_report(&t),
            Err(MetricError::MissingHistograms(_))
        ));
        let labels = [("a", "A"), ("b", "A"), ("c", "A"), ("d", "B"), ("e", "B")]
            .into_iter()
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect();
        let labeled = assign_leaf_labels(&t, &labels).unwrap();
        let rows = tree_alignment_report(&labeled).unwrap();
        assert_eq!(rows.len(), labeled.nodes.len());
        let ids: Vec<_> = rows.iter().map(|r| r.node_id.as_str()).collect();
        assert_eq!(ids, ["r", "ry", "rn", "rny", "rnn"]);
        for leaf in ["ry", "rny", "rnn"] {
            let row = rows.iter().find(|r| r.node_id == leaf).unwrap();
            assert_eq!(row.entropy_bits, Some(0.0));
            assert_eq!(row.purity, Some(1.0));
        }
        let csv = alignment_csv(&rows);
        assert_eq!(csv.lines().count(), 6);
        assert!(csv.lines().nth(2).unwrap().starts_with("ry,1,2,0.000000,1.000000,A"));
    }

    proptest::proptest! {
        #[test]
        fn bounds_hold(a in 0u64..50, b in 0u64..50, c in 0u64..50) {
            let m = counts(&[("A", a), ("B", b), ("C", c)]);
            proptest::prop_assume!(a + b + c > 0);
            let classes = [a, b, c].iter().filter(|&&x| x > 0).count() as f64;
            let h = node_entropy(&m).unwrap();
            let p = node_purity(&m).unwrap();
            proptest::prop_assert!(h >= 0.0 && h <= classes.log2() + 1e-12);
            proptest::prop_assert!(p >= 1.0 / classes - 1e-12 && p <= 1.0);
            proptest::prop_assert_eq!(h == 0.0, p == 1.0);
        }
    }
}
