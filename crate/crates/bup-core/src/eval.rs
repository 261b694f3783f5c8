//! Prediction quality and reliability metrics: accuracy, expected and
//! average calibration error, probability dispersion, and the relation
//! between graph topology and learned uncertainty.

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::dataset::Split;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::UncertaintyScore;

/// Argmax match rate over `idx`. Ties go to the lowest class index.
pub fn accuracy(probs: ArrayView2<f64>, labels: &[usize], idx: &[usize]) -> Result<f64> {
    if idx.is_empty() {
        return Err(Error::input("accuracy over an empty index set"));
    }
    let mut correct = 0usize;
    for &i in idx {
        if predicted_class(probs, i) == labels[i] {
            correct += 1;
        }
    }
    Ok(correct as f64 / idx.len() as f64)
}

fn predicted_class(probs: ArrayView2<f64>, i: usize) -> usize {
    let row = probs.row(i);
    let mut best = 0usize;
    for c in 1..row.len() {
        if row[c] > row[best] {
            best = c;
        }
    }
    best
}

/// One equal-width confidence bin on `(0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationBin {
    pub count: usize,
    pub mean_confidence: f64,
    pub mean_accuracy: f64,
}

/// ECE/ACE in percent, plus the per-bin statistics behind them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub ece: f64,
    pub ace: f64,
    pub bins: Vec<CalibrationBin>,
}

/// Bins the per-node max probability into `num_bins` equal-width bins on
/// `(0, 1]` and reports, in percent,
/// `ECE = 100 * sum_b (n_b / N) |acc_b - conf_b|` and
/// `ACE = (100 / B+) * sum_{b nonempty} |acc_b - conf_b|`.
pub fn calibration(
    probs: ArrayView2<f64>,
    labels: &[usize],
    idx: &[usize],
    num_bins: usize,
) -> Result<Calibration> {
    if idx.is_empty() {
        return Err(Error::input("calibration over an empty index set"));
    }
    if num_bins == 0 {
        return Err(Error::input("need at least one calibration bin"));
    }
    let mut counts = vec![0usize; num_bins];
    let mut conf_sums = vec![0.0f64; num_bins];
    let mut acc_sums = vec![0.0f64; num_bins];
    for &i in idx {
        let pred = predicted_class(probs, i);
        let conf = probs[[i, pred]];
        // bin b covers (b/B, (b+1)/B]
        let bin = ((conf * num_bins as f64).ceil() as usize).saturating_sub(1).min(num_bins - 1);
        counts[bin] += 1;
        conf_sums[bin] += conf;
        if pred == labels[i] {
            acc_sums[bin] += 1.0;
        }
    }
    let n = idx.len() as f64;
    let mut ece = 0.0;
    let mut ace = 0.0;
    let mut nonempty = 0usize;
    let mut bins = Vec::with_capacity(num_bins);
    for b in 0..num_bins {
        if counts[b] == 0 {
            bins.push(CalibrationBin {
                count: 0,
                mean_confidence: 0.0,
                mean_accuracy: 0.0,
            });
            continue;
        }
        let count = counts[b] as f64;
        let conf = conf_sums[b] / count;
        let acc = acc_sums[b] / count;
        ece += (count / n) * (acc - conf).abs();
        ace += (acc - conf).abs();
        nonempty += 1;
        bins.push(CalibrationBin {
            count: counts[b],
            mean_confidence: conf,
            mean_accuracy: acc,
        });
    }
    ece *= 100.0;
    ace = if nonempty > 0 {
        100.0 * ace / nonempty as f64
    } else {
        0.0
    };
    Ok(Calibration { ece, ace, bins })
}

/// Max probability and the population standard deviation of a probability
/// row (divided by the number of entries, matching the `1/(C-1)` form used
/// over the `C-1` observed classes in the OOD protocol).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dispersion {
    pub p_max: f64,
    pub std_dev: f64,
}

pub fn prob_dispersion(probs: ArrayView2<f64>, idx: &[usize]) -> Vec<Dispersion> {
    let c = probs.ncols() as f64;
    idx.iter()
        .map(|&i| {
            let row = probs.row(i);
            let p_max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mean = row.sum() / c;
            let var = row.iter().map(|&p| (p - mean) * (p - mean)).sum::<f64>() / c;
            Dispersion {
                p_max,
                std_dev: var.sqrt(),
            }
        })
        .collect()
}

/// Average ranks (1-based) with ties sharing their mean rank.
fn average_ranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).expect("finite values"));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation with average-rank tie handling. Returns 0 when
/// either input has no rank variance (the all-ties convention).
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len());
    if x.len() < 2 {
        return 0.0;
    }
    let rx = average_ranks(x);
    let ry = average_ranks(y);
    let n = x.len() as f64;
    let mean = (n + 1.0) / 2.0;
    let mut cov = 0.0;
    let mut var_x = 0.0;
    let mut var_y = 0.0;
    for i in 0..x.len() {
        let dx = rx[i] - mean;
        let dy = ry[i] - mean;
        cov += dx * dy;
        var_x += dx * dx;
        var_y += dy * dy;
    }
    if var_x == 0.0 || var_y == 0.0 {
        return 0.0;
    }
    cov / (var_x * var_y).sqrt()
}

/// Unweighted BFS distance from every node to the nearest source, `None`
/// for nodes no source can reach.
pub fn bfs_nearest_distance(g: &Graph, sources: &[usize]) -> Vec<Option<usize>> {
    let n = g.num_nodes();
    let mut dist = vec![None; n];
    let mut queue = std::collections::VecDeque::new();
    for &s in sources {
        if dist[s].is_none() {
            dist[s] = Some(0);
            queue.push_back(s);
        }
    }
    while let Some(u) = queue.pop_front() {
        let du = dist[u].expect("queued nodes have distances");
        for &v in g.neighbors(u) {
            if dist[v].is_none() {
                dist[v] = Some(du + 1);
                queue.push_back(v);
            }
        }
    }
    dist
}

/// Mean BFS distance from each node to the sources, averaged over the
/// sources it can reach; `None` when it reaches none of them.
pub fn bfs_mean_distance(g: &Graph, sources: &[usize]) -> Vec<Option<f64>> {
    let n = g.num_nodes();
    let mut sums = vec![0.0f64; n];
    let mut reached = vec![0usize; n];
    let mut dist = vec![usize::MAX; n];
    let mut queue = std::collections::VecDeque::new();
    for &s in sources {
        dist.fill(usize::MAX);
        dist[s] = 0;
        queue.clear();
        queue.push_back(s);
        while let Some(u) = queue.pop_front() {
            for &v in g.neighbors(u) {
                if dist[v] == usize::MAX {
                    dist[v] = dist[u] + 1;
                    queue.push_back(v);
                }
            }
        }
        for i in 0..n {
            if dist[i] != usize::MAX {
                sums[i] += dist[i] as f64;
                reached[i] += 1;
            }
        }
    }
    (0..n)
        .map(|i| {
            if reached[i] > 0 {
                Some(sums[i] / reached[i] as f64)
            } else {
                None
            }
        })
        .collect()
}

/// One evaluated node. Uncertainty columns are absent for models without a
/// variance channel (the GCN baseline).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerNode {
    pub node: usize,
    pub label: usize,
    pub predicted: usize,
    pub p_max: f64,
    pub std_dev: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub avg_std: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub entropy: Option<f64>,
    pub degree: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub dist_mean: Option<f64>,
    pub is_ood: bool,
}

/// Full evaluation outcome over the in-distribution test set (accuracy and
/// calibration) plus per-node rows for both in-distribution and OOD nodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub acc: f64,
    pub ece: f64,
    pub ace: f64,
    pub bins: Vec<CalibrationBin>,
    pub per_node: Vec<PerNode>,
}

/// Assembles an [`EvalReport`]. `probs` are predictive probabilities over
/// the trained head (C-1 classes in the OOD setting), `labels` are the
/// matching effective labels, and `scores` carries per-node uncertainty
/// when the model has a variance channel.
pub fn build_report(
    probs: ArrayView2<f64>,
    labels: &[usize],
    graph: &Graph,
    split: &Split,
    scores: Option<&UncertaintyScore>,
    num_bins: usize,
) -> Result<EvalReport> {
    let cal = calibration(probs, labels, &split.test, num_bins)?;
    let acc = accuracy(probs, labels, &split.test)?;
    let dist_mean = bfs_mean_distance(graph, &split.train);

    let mut per_node = Vec::new();
    let mut push_rows = |idx: &[usize], is_ood: bool, out: &mut Vec<PerNode>| {
        let disp = prob_dispersion(probs, idx);
        for (&i, d) in idx.iter().zip(disp.iter()) {
            out.push(PerNode {
                node: i,
                label: labels[i],
                predicted: predicted_class(probs, i),
                p_max: d.p_max,
                std_dev: d.std_dev,
                avg_std: scores.map(|s| s.avg_std[i]),
                entropy: scores.map(|s| s.gaussian_entropy[i]),
                degree: graph.neighbors(i).len(),
                dist_mean: dist_mean[i],
                is_ood,
            });
        }
    };
    push_rows(&split.test, false, &mut per_node);
    if let Some(ood_idx) = &split.ood_test {
        push_rows(ood_idx, true, &mut per_node);
    }

    Ok(EvalReport {
        acc,
        ece: cal.ece,
        ace: cal.ace,
        bins: cal.bins,
        per_node,
    })
}

impl EvalReport {
    /// Mean `p_max` and mean `std_dev` over the in-distribution and OOD
    /// rows: the two columns of the OOD analysis table.
    pub fn dispersion_summary(&self) -> DispersionSummary {
        let mut summary = DispersionSummary::default();
        let mut n_in = 0usize;
        let mut n_ood = 0usize;
        for row in &self.per_node {
            if row.is_ood {
                summary.ood_p_max += row.p_max;
                summary.ood_std_dev += row.std_dev;
                n_ood += 1;
            } else {
                summary.in_dist_p_max += row.p_max;
                summary.in_dist_std_dev += row.std_dev;
                n_in += 1;
            }
        }
        if n_in > 0 {
            summary.in_dist_p_max /= n_in as f64;
            summary.in_dist_std_dev /= n_in as f64;
        }
        if n_ood > 0 {
            summary.ood_p_max /= n_ood as f64;
            summary.ood_std_dev /= n_ood as f64;
        }
        summary
    }

    /// CSV rows (`node_id,label,pred,p_max,std_dev,avg_std,entropy,degree,
    /// dist_mean,is_ood`), with empty cells for absent optional columns.
    pub fn per_node_csv(&self, node_ids: &[String]) -> String {
        let mut out = String::from(
            "node_id,label,pred,p_max,std_dev,avg_std,entropy,degree,dist_mean,is_ood\n",
        );
        let fmt_opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for row in &self.per_node {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{}\n",
                node_ids[row.node],
                row.label,
                row.predicted,
                row.p_max,
                row.std_dev,
                fmt_opt(row.avg_std),
                fmt_opt(row.entropy),
                row.degree,
                fmt_opt(row.dist_mean),
                row.is_ood
            ));
        }
        out
    }
}

/// Mean dispersion statistics split by in-distribution vs OOD membership.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct DispersionSummary {
    pub in_dist_p_max: f64,
    pub in_dist_std_dev: f64,
    pub ood_p_max: f64,
    pub ood_std_dev: f64,
}

/// Mean uncertainty per exact node degree.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DegreeBucket {
    pub degree: usize,
    pub count: usize,
    pub mean_avg_std: f64,
    pub mean_entropy: f64,
}

/// Degree- and distance-based analysis of the learned uncertainty over the
/// report's evaluated nodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopologyAnalysis {
    pub degree_buckets: Vec<DegreeBucket>,
    pub spearman_degree_avg_std: f64,
    pub spearman_degree_entropy: f64,
    /// Correlation of uncertainty with the mean BFS distance to the
    /// training nodes (the primary distance statistic).
    pub spearman_dist_mean_avg_std: f64,
    /// Same with the distance to the nearest training node.
    pub spearman_dist_nearest_avg_std: f64,
    /// Evaluated nodes from which no training node is reachable.
    pub unreachable_nodes: usize,
}

pub fn topology_analysis(report: &EvalReport, graph: &Graph, split: &Split) -> TopologyAnalysis {
    let nearest = bfs_nearest_distance(graph, &split.train);

    let mut degrees = Vec::new();
    let mut avg_stds = Vec::new();
    let mut entropies = Vec::new();
    let mut dist_means = Vec::new();
    let mut dist_nearests = Vec::new();
    let mut unreachable = 0usize;
    let mut by_degree: std::collections::BTreeMap<usize, (usize, f64, f64)> =
        std::collections::BTreeMap::new();

    for row in &report.per_node {
        let (Some(avg_std), Some(entropy)) = (row.avg_std, row.entropy) else {
            continue;
        };
        degrees.push(row.degree as f64);
        avg_stds.push(avg_std);
        entropies.push(entropy);
        let bucket = by_degree.entry(row.degree).or_insert((0, 0.0, 0.0));
        bucket.0 += 1;
        bucket.1 += avg_std;
        bucket.2 += entropy;
        match (row.dist_mean, nearest[row.node]) {
            (Some(dm), Some(dn)) => {
                dist_means.push((dm, avg_std));
                dist_nearests.push((dn as f64, avg_std));
            }
            _ => unreachable += 1,
        }
    }

    let degree_buckets = by_degree
        .into_iter()
        .map(|(degree, (count, s, e))| DegreeBucket {
            degree,
            count,
            mean_avg_std: s / count as f64,
            mean_entropy: e / count as f64,
        })
        .collect();

    let (dm_x, dm_y): (Vec<f64>, Vec<f64>) = dist_means.into_iter().unzip();
    let (dn_x, dn_y): (Vec<f64>, Vec<f64>) = dist_nearests.into_iter().unzip();

    TopologyAnalysis {
        degree_buckets,
        spearman_degree_avg_std: spearman(&degrees, &avg_stds),
        spearman_degree_entropy: spearman(&degrees, &entropies),
        spearman_dist_mean_avg_std: spearman(&dm_x, &dm_y),
        spearman_dist_nearest_avg_std: spearman(&dn_x, &dn_y),
        unreachable_nodes: unreachable,
    }
}
