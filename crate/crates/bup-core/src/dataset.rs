//! Citation-dataset ingestion and split construction.
//!
//! The on-disk format is the classic two-file citation layout:
//! `<id> <f_1> ... <f_F> <label>` per line in the `.content` file and
//! `<id> <id>` per line in the `.cites` file, whitespace-separated, UTF-8.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Graph;

/// A loaded node-classification dataset with dense 0-based node indices.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Array2<f64>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub graph: Graph,
    /// Original string IDs in index order.
    pub node_ids: Vec<String>,
    /// Original label strings in class-index order (sorted).
    pub label_names: Vec<String>,
}

impl Dataset {
    pub fn new(
        features: Array2<f64>,
        labels: Vec<usize>,
        num_classes: usize,
        graph: Graph,
        node_ids: Vec<String>,
        label_names: Vec<String>,
    ) -> Result<Dataset> {
        let n = features.nrows();
        if n == 0 {
            return Err(Error::input("dataset has zero nodes"));
        }
        if features.ncols() == 0 {
            return Err(Error::input("dataset must have at least one feature"));
        }
        if labels.len() != n || node_ids.len() != n || graph.num_nodes() != n {
            return Err(Error::input(format!(
                "inconsistent dataset sizes: {} features rows, {} labels, {} ids, {} graph nodes",
                n,
                labels.len(),
                node_ids.len(),
                graph.num_nodes()
            )));
        }
        if label_names.len() != num_classes {
            return Err(Error::input("label_names length must equal num_classes"));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::input(format!(
                "label index {bad} out of range for {num_classes} classes"
            )));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::input("feature matrix contains NaN or Inf"));
        }
        Ok(Dataset {
            features,
            labels,
            num_classes,
            graph,
            node_ids,
            label_names,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.features.nrows()
    }

    pub fn num_features(&self) -> usize {
        self.features.ncols()
    }

    /// Divides each feature row by its sum; all-zero rows are left as zeros.
    pub fn row_normalize_features(&mut self) {
        for mut row in self.features.rows_mut() {
            let sum: f64 = row.sum();
            if sum != 0.0 {
                row.mapv_inplace(|v| v / sum);
            }
        }
    }
}

/// Reads the `.content` / `.cites` pair into a [`Dataset`].
///
/// Labels are mapped to `0..C-1` by sorted label-string order so runs are
/// reproducible regardless of file order. Citations referencing unknown IDs
/// are skipped and counted in a single warning.
pub fn load_planetoid(content_path: &Path, cites_path: &Path) -> Result<Dataset> {
    let content = std::fs::read_to_string(content_path)?;
    let mut node_ids = Vec::new();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut raw_labels: Vec<String> = Vec::new();
    let mut id_to_index: HashMap<String, usize> = HashMap::new();
    let mut num_features = None;

    for (lineno, line) in content.lines().enumerate() {
        let lineno = lineno + 1;
        if line.trim().is_empty() {
            continue;
        }
        let tokens: Vec<&str> = line.split_whitespace().collect();
        if tokens.len() < 3 {
            return Err(Error::Parse {
                line: lineno,
                message: format!(
                    "expected `<id> <features...> <label>`, found {} fields",
                    tokens.len()
                ),
            });
        }
        let f = tokens.len() - 2;
        match num_features {
            None => num_features = Some(f),
            Some(expected) if expected != f => {
                return Err(Error::Parse {
                    line: lineno,
                    message: format!("expected {expected} feature values, found {f}"),
                });
            }
            _ => {}
        }
        let id = tokens[0].to_string();
        if id_to_index.contains_key(&id) {
            return Err(Error::Parse {
                line: lineno,
                message: format!("duplicate node id `{id}`"),
            });
        }
        let mut row = Vec::with_capacity(f);
        for tok in &tokens[1..=f] {
            let v: f64 = tok.parse().map_err(|_| Error::Parse {
                line: lineno,
                message: format!("invalid feature value `{tok}`"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    line: lineno,
                    message: format!("non-finite feature value `{tok}`"),
                });
            }
            row.push(v);
        }
        id_to_index.insert(id.clone(), node_ids.len());
        node_ids.push(id);
        rows.push(row);
        raw_labels.push(tokens[f + 1].to_string());
    }

    let n = node_ids.len();
    if n == 0 {
        return Err(Error::input(format!(
            "no nodes found in {}",
            content_path.display()
        )));
    }
    let num_features = num_features.unwrap();
    if num_features == 0 {
        return Err(Error::input("dataset must have at least one feature"));
    }

    let mut label_names: Vec<String> = raw_labels.clone();
    label_names.sort();
    label_names.dedup();
    let label_index: HashMap<&str, usize> = label_names
        .iter()
        .enumerate()
        .map(|(i, name)| (name.as_str(), i))
        .collect();
    let labels: Vec<usize> = raw_labels.iter().map(|l| label_index[l.as_str()]).collect();

    let cites = std::fs::read_to_string(cites_path)?;
    let mut edges = Vec::new();
    let mut skipped = 0usize;
    for (lineno, line) in cites.lines().enumerate() {
        let lineno = lineno + 1;
        if line.trim().is_empty() {
            continue;
        }
        let tokens: Vec<&str> = line.split_whitespace().collect();
        if tokens.len() != 2 {
            return Err(Error::Parse {
                line: lineno,
                message: format!("expected `<id> <id>`, found {} fields", tokens.len()),
            });
        }
        match (id_to_index.get(tokens[0]), id_to_index.get(tokens[1])) {
            (Some(&a), Some(&b)) => edges.push((a, b)),
            _ => skipped += 1,
        }
    }
    if skipped > 0 {
        log::warn!(
            "{}: skipped {} citations referencing unknown node ids",
            cites_path.display(),
            skipped
        );
    }

    let graph = Graph::from_edge_list(&edges, n)?;
    let features = Array2::from_shape_vec((n, num_features), rows.concat())
        .expect("row-major feature buffer matches (n, F)");
    let num_classes = label_names.len();
    Dataset::new(features, labels, num_classes, graph, node_ids, label_names)
}

/// Writes a dataset back to the two-file citation format. Reloading the
/// written pair reproduces the dataset exactly (indices, edges, features).
pub fn save_planetoid(ds: &Dataset, content_path: &Path, cites_path: &Path) -> Result<()> {
    let mut content = String::new();
    for i in 0..ds.num_nodes() {
        content.push_str(&ds.node_ids[i]);
        for &v in ds.features.row(i).iter() {
            // `{}` is the shortest representation that round-trips f64.
            write!(content, " {v}").expect("write to String");
        }
        content.push(' ');
        content.push_str(&ds.label_names[ds.labels[i]]);
        content.push('\n');
    }
    std::fs::write(content_path, content)?;

    let mut cites = String::new();
    for (i, j) in ds.graph.edges() {
        cites.push_str(&ds.node_ids[i]);
        cites.push(' ');
        cites.push_str(&ds.node_ids[j]);
        cites.push('\n');
    }
    std::fs::write(cites_path, cites)?;
    Ok(())
}

/// Train/validation/test node-index sets, plus the held-out class in the
/// OOD setting. Index arrays are kept sorted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub seed: u64,
    pub per_class: usize,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub ood_class: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub ood_test: Option<Vec<usize>>,
}

impl Split {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("split serializes")
    }

    pub fn from_json(s: &str) -> Result<Split> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Stratified split: exactly `per_class` training nodes per class, then
/// `val_size` validation and `test_size` test nodes drawn uniformly without
/// replacement from the remainder.
///
/// Sampling is a Fisher-Yates shuffle driven by ChaCha8 seeded with `seed`,
/// applied to ascending candidate lists, so identical seeds give identical
/// splits on any platform.
pub fn make_split(
    ds: &Dataset,
    per_class: usize,
    val_size: usize,
    test_size: usize,
    seed: u64,
) -> Result<Split> {
    let split = stratified_split(ds, per_class, val_size, test_size, seed, None)?;
    Ok(split)
}

/// As [`make_split`], but the held-out class `ood_class` is excluded from
/// train, validation, and the in-distribution test set; up to `test_size`
/// of its nodes (all of them if fewer) form the OOD test set.
pub fn make_ood_split(
    ds: &Dataset,
    per_class: usize,
    val_size: usize,
    test_size: usize,
    seed: u64,
    ood_class: usize,
) -> Result<Split> {
    if ood_class >= ds.num_classes {
        return Err(Error::input(format!(
            "ood_class {ood_class} out of range for {} classes",
            ds.num_classes
        )));
    }
    stratified_split(ds, per_class, val_size, test_size, seed, Some(ood_class))
}

fn stratified_split(
    ds: &Dataset,
    per_class: usize,
    val_size: usize,
    test_size: usize,
    seed: u64,
    ood_class: Option<usize>,
) -> Result<Split> {
    let n = ds.num_nodes();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); ds.num_classes];
    for (i, &label) in ds.labels.iter().enumerate() {
        by_class[label].push(i);
    }

    let trained_classes = ds.num_classes - usize::from(ood_class.is_some());
    let needed = per_class * trained_classes + val_size + test_size;
    let available = n - ood_class.map_or(0, |c| by_class[c].len());
    if needed > available {
        return Err(Error::input(format!(
            "split needs {needed} nodes ({per_class}/class train + {val_size} val + {test_size} test) \
             but only {available} are available"
        )));
    }

    let mut in_train = vec![false; n];
    let mut train = Vec::new();
    for (class, members) in by_class.iter().enumerate() {
        if Some(class) == ood_class {
            continue;
        }
        if members.len() < per_class {
            return Err(Error::input(format!(
                "class {class} (`{}`) has {} nodes, fewer than per_class = {per_class}",
                ds.label_names[class],
                members.len()
            )));
        }
        let mut candidates = members.clone();
        candidates.shuffle(&mut rng);
        for &node in candidates.iter().take(per_class) {
            in_train[node] = true;
            train.push(node);
        }
    }

    let mut remainder: Vec<usize> = (0..n)
        .filter(|&i| !in_train[i] && Some(ds.labels[i]) != ood_class)
        .collect();
    remainder.shuffle(&mut rng);
    let mut val: Vec<usize> = remainder[..val_size].to_vec();
    let mut test: Vec<usize> = remainder[val_size..val_size + test_size].to_vec();

    let ood_test = ood_class.map(|c| {
        let mut candidates = by_class[c].clone();
        candidates.shuffle(&mut rng);
        candidates.truncate(test_size);
        candidates.sort_unstable();
        candidates
    });

    train.sort_unstable();
    val.sort_unstable();
    test.sort_unstable();
    Ok(Split {
        seed,
        per_class,
        train,
        val,
        test,
        ood_class,
        ood_test,
    })
}

/// Remaps a label vector for OOD training: labels above the held-out class
/// shift down by one so the remaining classes form `0..C-1`. The remapped
/// value of a held-out-class node is meaningless and must not be used; such
/// nodes never appear in train, val, or the in-distribution test set.
pub fn remap_labels_for_ood(labels: &[usize], ood_class: usize) -> Vec<usize> {
    labels
        .iter()
        .map(|&l| if l > ood_class { l - 1 } else { l })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_pair(content: &str, cites: &str) -> (tempfile::TempDir, std::path::PathBuf, std::path::PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        let content_path = dir.path().join("toy.content");
        let cites_path = dir.path().join("toy.cites");
        let mut f = std::fs::File::create(&content_path).unwrap();
        f.write_all(content.as_bytes()).unwrap();
        let mut f = std::fs::File::create(&cites_path).unwrap();
        f.write_all(cites.as_bytes()).unwrap();
        (dir, content_path, cites_path)
    }

    /// Six nodes, two features, three classes, a couple of edges.
    fn toy_dataset() -> Dataset {
        let (_dir, content, cites) = write_pair(
            "n0 1 0 alpha\n\
             n1 0 1 beta\n\
             n2 1 1 alpha\n\
             n3 0 2 gamma\n\
             n4 2 0 beta\n\
             n5 3 1 gamma\n",
            "n0 n2\nn1 n4\nn3 n5\nn0 n1\n",
        );
        load_planetoid(&content, &cites).unwrap()
    }

    #[test]
    fn two_line_synthetic_content_loads() {
        let (_dir, content, cites) = write_pair("a 1 0 x\nb 0 1 y\n", "a b\n");
        let ds = load_planetoid(&content, &cites).unwrap();
        assert_eq!(ds.num_nodes(), 2);
        assert_eq!(ds.num_features(), 2);
        assert_eq!(ds.num_classes, 2);
        assert_eq!(ds.graph.num_edges(), 1);
        assert_eq!(ds.graph.neighbors(0), &[1]);
    }

    #[test]
    fn labels_map_by_sorted_label_string() {
        let ds = toy_dataset();
        assert_eq!(ds.label_names, vec!["alpha", "beta", "gamma"]);
        assert_eq!(ds.labels, vec![0, 1, 0, 2, 1, 2]);
    }

    #[test]
    fn unknown_citation_endpoints_are_skipped() {
        let (_dir, content, cites) = write_pair("a 1 0 x\nb 0 1 y\n", "a b\na missing\nghost b\n");
        let ds = load_planetoid(&content, &cites).unwrap();
        assert_eq!(ds.graph.num_edges(), 1);
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let (_dir, content, cites) = write_pair("a 1 0 x\nb 0 y\n", "a b\n");
        let err = load_planetoid(&content, &cites).unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other}"),
        }
    }

    #[test]
    fn duplicate_node_id_is_rejected() {
        let (_dir, content, cites) = write_pair("a 1 0 x\na 0 1 y\n", "");
        let err = load_planetoid(&content, &cites).unwrap_err();
        assert!(err.to_string().contains("duplicate"));
    }

    #[test]
    fn empty_content_is_an_input_error() {
        let (_dir, content, cites) = write_pair("", "");
        assert!(matches!(
            load_planetoid(&content, &cites),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn round_trip_through_files_is_identity() {
        let ds = toy_dataset();
        let dir = tempfile::tempdir().unwrap();
        let content = dir.path().join("rt.content");
        let cites = dir.path().join("rt.cites");
        save_planetoid(&ds, &content, &cites).unwrap();
        let reloaded = load_planetoid(&content, &cites).unwrap();
        assert_eq!(ds, reloaded);
    }

    #[test]
    fn round_trip_preserves_fractional_features() {
        let mut ds = toy_dataset();
        ds.row_normalize_features();
        let dir = tempfile::tempdir().unwrap();
        let content = dir.path().join("rt.content");
        let cites = dir.path().join("rt.cites");
        save_planetoid(&ds, &content, &cites).unwrap();
        let reloaded = load_planetoid(&content, &cites).unwrap();
        assert_eq!(ds, reloaded);
    }

    #[test]
    fn row_normalization_leaves_zero_rows() {
        let (_dir, content, cites) = write_pair("a 0 0 x\nb 2 2 y\n", "");
        let mut ds = load_planetoid(&content, &cites).unwrap();
        ds.row_normalize_features();
        assert_eq!(ds.features.row(0).to_vec(), vec![0.0, 0.0]);
        assert_eq!(ds.features.row(1).to_vec(), vec![0.5, 0.5]);
    }

    fn bigger_dataset(nodes_per_class: usize, classes: usize) -> Dataset {
        let n = nodes_per_class * classes;
        let features = Array2::from_shape_fn((n, 3), |(i, j)| ((i * 7 + j * 3) % 5) as f64);
        let labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
        let edges: Vec<(usize, usize)> = (1..n).map(|i| (i - 1, i)).collect();
        let graph = Graph::from_edge_list(&edges, n).unwrap();
        let node_ids = (0..n).map(|i| format!("node{i}")).collect();
        let label_names = (0..classes).map(|c| format!("class{c}")).collect();
        Dataset::new(features, labels, classes, graph, node_ids, label_names).unwrap()
    }

    #[test]
    fn split_sizes_and_stratification() {
        let ds = bigger_dataset(30, 3);
        let split = make_split(&ds, 5, 20, 40, 7).unwrap();
        assert_eq!(split.train.len(), 15);
        assert_eq!(split.val.len(), 20);
        assert_eq!(split.test.len(), 40);
        for class in 0..3 {
            let count = split.train.iter().filter(|&&i| ds.labels[i] == class).count();
            assert_eq!(count, 5, "class {class} should have exactly 5 train nodes");
        }
    }

    #[test]
    fn split_is_deterministic_and_disjoint() {
        let ds = bigger_dataset(30, 3);
        for seed in 0..10u64 {
            let a = make_split(&ds, 5, 20, 40, seed).unwrap();
            let b = make_split(&ds, 5, 20, 40, seed).unwrap();
            assert_eq!(a, b);
            let mut all: Vec<usize> = a
                .train
                .iter()
                .chain(a.val.iter())
                .chain(a.test.iter())
                .copied()
                .collect();
            let before = all.len();
            all.sort_unstable();
            all.dedup();
            assert_eq!(before, all.len(), "train/val/test overlap at seed {seed}");
        }
    }

    #[test]
    fn oversized_per_class_names_the_deficient_class() {
        let ds = bigger_dataset(4, 3);
        let err = make_split(&ds, 5, 1, 1, 0).unwrap_err();
        assert!(err.to_string().contains("class"), "{err}");
    }

    #[test]
    fn ood_split_excludes_held_out_class_everywhere() {
        let ds = bigger_dataset(30, 3);
        for seed in 0..10u64 {
            let split = make_ood_split(&ds, 5, 10, 20, seed, 2).unwrap();
            for &i in split.train.iter().chain(split.val.iter()).chain(split.test.iter()) {
                assert_ne!(ds.labels[i], 2);
            }
            let ood = split.ood_test.as_ref().unwrap();
            assert!(!ood.is_empty());
            for &i in ood {
                assert_eq!(ds.labels[i], 2);
            }
            assert_eq!(split.ood_class, Some(2));
        }
    }

    #[test]
    fn ood_test_takes_all_nodes_when_fewer_than_test_size() {
        let ds = bigger_dataset(6, 3);
        // only 6 nodes of class 0 exist; test_size 4 caps the OOD test set
        let split = make_ood_split(&ds, 2, 2, 4, 1, 0).unwrap();
        assert_eq!(split.ood_test.as_ref().unwrap().len(), 4);
        // test_size 6 is the largest feasible in-distribution test set here,
        // and the OOD side takes all 6 held-out nodes
        let split2 = make_ood_split(&ds, 2, 2, 6, 1, 0).unwrap();
        assert_eq!(split2.ood_test.as_ref().unwrap().len(), 6);
        // asking for more in-distribution test nodes than remain is an error
        assert!(make_ood_split(&ds, 2, 2, 7, 1, 0).is_err());
    }

    #[test]
    fn ood_class_out_of_range_is_rejected() {
        let ds = bigger_dataset(6, 3);
        assert!(make_ood_split(&ds, 2, 2, 2, 0, 3).is_err());
    }

    #[test]
    fn degenerate_two_class_ood_still_valid() {
        let ds = bigger_dataset(20, 2);
        let split = make_ood_split(&ds, 5, 5, 10, 3, 1).unwrap();
        assert!(split.train.iter().all(|&i| ds.labels[i] == 0));
        assert_eq!(split.train.len(), 5);
    }

    #[test]
    fn split_json_round_trip_and_field_names() {
        let ds = bigger_dataset(10, 2);
        let split = make_ood_split(&ds, 2, 2, 4, 9, 1).unwrap();
        let json = split.to_json();
        assert!(json.contains("\"seed\""));
        assert!(json.contains("\"per_class\""));
        assert!(json.contains("\"ood_test\""));
        let back = Split::from_json(&json).unwrap();
        assert_eq!(split, back);

        let normal = make_split(&ds, 2, 2, 4, 9).unwrap();
        let json = normal.to_json();
        assert!(!json.contains("ood_class"));
    }

    #[test]
    fn label_remap_shifts_higher_classes_down() {
        assert_eq!(remap_labels_for_ood(&[0, 1, 2, 3], 1), vec![0, 1, 1, 2]);
        assert_eq!(remap_labels_for_ood(&[0, 1, 2, 3], 3), vec![0, 1, 2, 3]);
    }
}
