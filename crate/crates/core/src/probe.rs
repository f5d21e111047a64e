//! Final-token hidden states of both branches, their PCA projection and
//! alignment scores.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::checkpoint::write_atomic;
use crate::error::{Error, Result};
use crate::expansion::ControlModel;
use crate::training::data::{FIRST_SYMBOL, PAYLOAD_LEN, SEP};
use crate::training::TaskKind;
use crate::transformer::{forward, BranchKind, TokenBatch};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeItem {
    pub category: String,
    pub tokens: Vec<u32>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeSet {
    pub items: Vec<ProbeItem>,
}

impl ProbeSet {
    /// `categories` payload multisets, each shown as `per_category`
    /// copy_reverse prompts holding a different ordering of the same symbols.
    pub fn synthetic(categories: usize, per_category: usize, seed: u64) -> Self {
        use rand::seq::SliceRandom;
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut items = Vec::with_capacity(categories * per_category);
        for c in 0..categories {
            let mut payload: Vec<u32> = (0..PAYLOAD_LEN)
                .map(|_| rng.gen_range(FIRST_SYMBOL..crate::training::data::VOCAB as u32))
                .collect();
            for _ in 0..per_category {
                payload.shuffle(&mut rng);
                let mut tokens = vec![TaskKind::CopyReverse.marker()];
                tokens.extend_from_slice(&payload);
                tokens.push(SEP);
                items.push(ProbeItem {
                    category: format!("multiset_{c}"),
                    tokens,
                });
            }
        }
        ProbeSet { items }
    }

    /// Parses `category<TAB>sentence` lines. Each byte becomes one symbol id;
    /// bytes wrap onto the `vocab_size - 4` non-special ids.
    pub fn from_text(text: &str, vocab_size: usize) -> Result<Self> {
        let span = vocab_size.checked_sub(FIRST_SYMBOL as usize).filter(|&s| s > 0).ok_or_else(|| {
            Error::Probe(format!("vocabulary of {vocab_size} has no room for byte symbols"))
        })?;
        let mut items = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let (category, sentence) = line
                .split_once('\t')
                .ok_or_else(|| Error::Probe(format!("line {}: expected category<TAB>sentence", n + 1)))?;
            if sentence.is_empty() {
                return Err(Error::Probe(format!("line {}: empty sentence", n + 1)));
            }
            items.push(ProbeItem {
                category: category.trim().to_string(),
                tokens: sentence
                    .bytes()
                    .map(|b| FIRST_SYMBOL + (b as usize % span) as u32)
                    .collect(),
            });
        }
        Ok(ProbeSet { items })
    }

    pub fn load(path: &Path, vocab_size: usize) -> Result<Self> {
        ProbeSet::from_text(&std::fs::read_to_string(path)?, vocab_size)
    }

    /// Categories with fewer than two items.
    pub fn thin_categories(&self) -> Vec<String> {
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for it in &self.items {
            *counts.entry(&it.category).or_default() += 1;
        }
        counts
            .into_iter()
            .filter(|&(_, n)| n < 2)
            .map(|(c, _)| c.to_string())
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Branch {
    Pretrained,
    Expanded,
}

/// Final-token states of one probe at one expanded layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairedState {
    pub probe: usize,
    pub category: String,
    pub layer: usize,
    pub kind: BranchKind,
    pub pre: Vec<f64>,
    pub exp: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeStates {
    pub d_model: usize,
    pub layers: Vec<usize>,
    pub states: Vec<PairedState>,
}

/// One capturing forward pass per probe. Reads the model only.
pub fn extract_states(model: &ControlModel, probes: &ProbeSet) -> Result<ProbeStates> {
    if probes.items.is_empty() {
        return Err(Error::Probe("empty probe set".into()));
    }
    let view = model.view();
    let mut states = Vec::new();
    for (p, item) in probes.items.iter().enumerate() {
        let tokens = TokenBatch::new(1, item.tokens.len(), item.tokens.clone())?;
        let (_, trace) = forward(&view, &tokens, true)?;
        let last = item.tokens.len() - 1;
        for l in trace.expect("capture requested").layers {
            let row = |t: &crate::Tensor| t.row(last).iter().map(|&v| v as f64).collect::<Vec<_>>();
            states.push(PairedState {
                probe: p,
                category: item.category.clone(),
                layer: l.layer,
                kind: l.branch,
                pre: row(&l.h_pre),
                exp: row(&l.h_exp),
            });
        }
    }
    if states.iter().any(|s| s.pre.iter().chain(&s.exp).any(|v| !v.is_finite())) {
        return Err(Error::Probe("non-finite hidden state".into()));
    }
    Ok(ProbeStates {
        d_model: model.spec.d_model,
        layers: model.plan.expanded.clone(),
        states,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pca {
    /// `n x k` projected coordinates.
    pub coords: Vec<Vec<f64>>,
    /// `k` orthonormal directions of length `d`.
    pub components: Vec<Vec<f64>>,
    pub explained_ratio: Vec<f64>,
}

/// Top-`k` principal components of the rows of `points`. Each component is
/// signed so its largest-magnitude entry is positive.
pub fn pca_project(points: &[Vec<f64>], k: usize) -> Result<Pca> {
    let n = points.len();
    let d = points.first().map_or(0, Vec::len);
    if k == 0 || k > d {
        return Err(Error::Probe(format!("k = {k} must be in 1..={d}")));
    }
    if n < k + 1 {
        return Err(Error::Probe(format!("{n} points are too few for {k} components")));
    }
    if points.iter().any(|p| p.len() != d) {
        return Err(Error::Probe("points differ in dimension".into()));
    }
    let mut x = DMatrix::from_fn(n, d, |i, j| points[i][j]);
    let mean = x.row_mean();
    for mut row in x.row_iter_mut() {
        row -= &mean;
    }
    let cov = x.transpose() * &x / n as f64;
    let total = cov.trace();
    if total <= 0.0 {
        return Ok(Pca {
            coords: vec![vec![0.0; k]; n],
            components: (0..k).map(|c| (0..d).map(|j| if j == c { 1.0 } else { 0.0 }).collect()).collect(),
            explained_ratio: vec![0.0; k],
        });
    }
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let mut components = Vec::with_capacity(k);
    let mut ratios = Vec::with_capacity(k);
    for &c in order.iter().take(k) {
        let mut v: Vec<f64> = eig.eigenvectors.column(c).iter().copied().collect();
        let lead = v
            .iter()
            .copied()
            .fold(0.0f64, |m, e| if e.abs() > m.abs() { e } else { m });
        if lead < 0.0 {
            v.iter_mut().for_each(|e| *e = -*e);
        }
        components.push(v);
        ratios.push((eig.eigenvalues[c] / total).max(0.0));
    }
    let coords = x
        .row_iter()
        .map(|row| components.iter().map(|c| row.iter().zip(c).map(|(a, b)| a * b).sum()).collect())
        .collect();
    Ok(Pca {
        coords,
        components,
        explained_ratio: ratios,
    })
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    (dot / (na * nb).max(1e-8)).clamp(-1.0, 1.0)
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Mean silhouette coefficient under Euclidean distance. Points alone in
/// their cluster score 0. `None` with fewer than two clusters.
pub fn silhouette(points: &[Vec<f64>], labels: &[usize]) -> Option<f64> {
    let mut clusters: Vec<usize> = labels.to_vec();
    clusters.sort_unstable();
    clusters.dedup();
    if clusters.len() < 2 || points.len() != labels.len() {
        return None;
    }
    let mut total = 0.0;
    for (i, p) in points.iter().enumerate() {
        let mut sums: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
        for (j, q) in points.iter().enumerate() {
            if i != j {
                let e = sums.entry(labels[j]).or_default();
                e.0 += euclidean(p, q);
                e.1 += 1;
            }
        }
        let Some(&(own, n_own)) = sums.get(&labels[i]) else { continue };
        if n_own == 0 {
            continue;
        }
        let a = own / n_own as f64;
        let b = sums
            .iter()
            .filter(|(&l, _)| l != labels[i])
            .map(|(_, &(s, n))| s / n as f64)
            .fold(f64::INFINITY, f64::min);
        let denom = a.max(b);
        total += if denom > 0.0 { (b - a) / denom } else { 0.0 };
    }
    Some(total / points.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerDrift {
    pub layer: usize,
    pub mean_cosine: f64,
    pub mean_distance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectedPoint {
    pub probe: usize,
    pub category: String,
    pub layer: usize,
    pub branch: Branch,
    pub coords: Vec<f64>,
}

pub const NEIGHBOURS: usize = 20;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Neighbour {
    pub probe: usize,
    pub category: String,
    pub layer: usize,
    pub branch: Branch,
    pub distance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentReport {
    pub drift: Vec<LayerDrift>,
    /// Mean over layers of the paired pre/exp cosine similarity.
    pub mean_drift_cosine: f64,
    /// Mean cosine between same-category expanded states, averaged over layers.
    pub semantic_stability: Option<f64>,
    /// Silhouette of expanded states labelled by layer.
    pub layer_silhouette: Option<f64>,
    pub explained_ratio: Vec<f64>,
    pub points: Vec<ProjectedPoint>,
    /// Nearest states to the expanded state of the first probe at the deepest
    /// expanded layer, closest first.
    pub neighbours: Vec<Neighbour>,
    pub warnings: Vec<String>,
}

pub fn alignment_metrics(states: &ProbeStates) -> Result<AlignmentReport> {
    if states.states.is_empty() {
        return Err(Error::Probe("no paired states".into()));
    }
    let mut warnings = Vec::new();
    let mut per_category: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for s in &states.states {
        let probes = per_category.entry(&s.category).or_default();
        if !probes.contains(&s.probe) {
            probes.push(s.probe);
        }
    }
    for (c, probes) in &per_category {
        if probes.len() < 2 {
            warnings.push(format!("category `{c}` has {} item; excluded from stability", probes.len()));
        }
    }

    let mut drift = Vec::new();
    let mut stability = Vec::new();
    for &layer in &states.layers {
        let at: Vec<&PairedState> = states.states.iter().filter(|s| s.layer == layer).collect();
        if at.is_empty() {
            continue;
        }
        let n = at.len() as f64;
        drift.push(LayerDrift {
            layer,
            mean_cosine: at.iter().map(|s| cosine(&s.pre, &s.exp)).sum::<f64>() / n,
            mean_distance: at.iter().map(|s| euclidean(&s.pre, &s.exp)).sum::<f64>() / n,
        });
        let (mut sum, mut pairs) = (0.0, 0usize);
        for (i, a) in at.iter().enumerate() {
            for b in &at[i + 1..] {
                if a.category == b.category && per_category[a.category.as_str()].len() >= 2 {
                    sum += cosine(&a.exp, &b.exp);
                    pairs += 1;
                }
            }
        }
        if pairs > 0 {
            stability.push(sum / pairs as f64);
        }
    }
    let mean_drift_cosine = drift.iter().map(|d| d.mean_cosine).sum::<f64>() / drift.len().max(1) as f64;
    let semantic_stability = (!stability.is_empty()).then(|| stability.iter().sum::<f64>() / stability.len() as f64);

    let exp_points: Vec<Vec<f64>> = states.states.iter().map(|s| s.exp.clone()).collect();
    let layer_labels: Vec<usize> = states.states.iter().map(|s| s.layer).collect();
    let layer_silhouette = silhouette(&exp_points, &layer_labels);

    let mut all = Vec::with_capacity(2 * states.states.len());
    let mut tags = Vec::with_capacity(all.capacity());
    for s in &states.states {
        all.push(s.pre.clone());
        tags.push((s, Branch::Pretrained));
        all.push(s.exp.clone());
        tags.push((s, Branch::Expanded));
    }
    let anchor = tags
        .iter()
        .enumerate()
        .filter(|(_, (s, b))| s.probe == states.states[0].probe && *b == Branch::Expanded)
        .max_by_key(|(_, (s, _))| s.layer)
        .map(|(i, _)| i)
        .expect("at least one state");
    let mut neighbours: Vec<Neighbour> = tags
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != anchor)
        .map(|(i, (s, branch))| Neighbour {
            probe: s.probe,
            category: s.category.clone(),
            layer: s.layer,
            branch: *branch,
            distance: euclidean(&all[anchor], &all[i]),
        })
        .collect();
    neighbours.sort_by(|a, b| a.distance.total_cmp(&b.distance));
    neighbours.truncate(NEIGHBOURS);

    let k = 3.min(states.d_model).min(all.len() - 1);
    let pca = pca_project(&all, k)?;
    let points = tags
        .into_iter()
        .zip(pca.coords)
        .map(|((s, branch), coords)| ProjectedPoint {
            probe: s.probe,
            category: s.category.clone(),
            layer: s.layer,
            branch,
            coords,
        })
        .collect();

    Ok(AlignmentReport {
        drift,
        mean_drift_cosine,
        semantic_stability,
        layer_silhouette,
        explained_ratio: pca.explained_ratio,
        points,
        neighbours,
        warnings,
    })
}

/// Scatter of the first two principal coordinates: colour by layer, circles
/// for pretrained states and squares for expanded ones.
pub fn report_svg(report: &AlignmentReport) -> String {
    const SIZE: f64 = 480.0;
    const PAD: f64 = 30.0;
    const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"];
    let coord = |p: &ProjectedPoint, i: usize| p.coords.get(i).copied().unwrap_or(0.0);
    let extent = report
        .points
        .iter()
        .flat_map(|p| [coord(p, 0).abs(), coord(p, 1).abs()])
        .fold(0.0f64, f64::max)
        .max(1e-12);
    let scale = (SIZE / 2.0 - PAD) / extent;
    let mut layers: Vec<usize> = report.points.iter().map(|p| p.layer).collect();
    layers.sort_unstable();
    layers.dedup();
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SIZE}" height="{}" font-family="sans-serif" font-size="11">"#,
        SIZE + 20.0 + 16.0 * layers.len() as f64
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    for p in &report.points {
        let x = SIZE / 2.0 + scale * coord(p, 0);
        let y = SIZE / 2.0 - scale * coord(p, 1);
        let colour = PALETTE[layers.iter().position(|&l| l == p.layer).unwrap_or(0) % PALETTE.len()];
        match p.branch {
            Branch::Pretrained => {
                let _ = writeln!(
                    s,
                    r#"<circle class="marker" cx="{x:.2}" cy="{y:.2}" r="3.5" fill="none" stroke="{colour}"/>"#
                );
            }
            Branch::Expanded => {
                let _ = writeln!(
                    s,
                    r#"<rect class="marker" x="{:.2}" y="{:.2}" width="6" height="6" fill="{colour}" fill-opacity="0.6"/>"#,
                    x - 3.0,
                    y - 3.0
                );
            }
        }
    }
    for (i, l) in layers.iter().enumerate() {
        let y = SIZE + 10.0 + 16.0 * i as f64;
        let _ = writeln!(
            s,
            r#"<rect x="10" y="{}" width="10" height="10" fill="{}"/><text x="26" y="{}">layer {l}</text>"#,
            y - 8.0,
            PALETTE[i % PALETTE.len()],
            y + 1.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="end">circle: pretrained, square: expanded</text>"#,
        SIZE - 10.0,
        SIZE + 10.0
    );
    s.push_str("</svg>\n");
    s
}

/// Writes `<stem>.json` and `<stem>.svg`; returns both paths.
pub fn emit_probe_report(report: &AlignmentReport, stem: &Path) -> Result<(PathBuf, PathBuf)> {
    let json = stem.with_extension("json");
    let svg = stem.with_extension("svg");
    if let Some(dir) = stem.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    write_atomic(&json, &serde_json::to_vec_pretty(report)?)?;
    write_atomic(&svg, report_svg(report).as_bytes())?;
    Ok((json, svg))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pca_on_axis_aligned_cross() {
        let pts = vec![vec![1.0, 0.0], vec![-1.0, 0.0], vec![0.0, 0.5], vec![0.0, -0.5]];
        let p = pca_project(&pts, 2).unwrap();
        assert!((p.explained_ratio[0] - 0.8).abs() < 1e-12);
        assert!((p.explained_ratio[1] - 0.2).abs() < 1e-12);
        assert!((p.components[0][0] - 1.0).abs() < 1e-12 && p.components[0][1].abs() < 1e-12);
    }

    #[test]
    fn pca_on_a_line_and_degenerate_input() {
        let pts: Vec<Vec<f64>> = (0..6).map(|i| vec![i as f64, 2.0 * i as f64, -(i as f64)]).collect();
        let p = pca_project(&pts, 3).unwrap();
        assert!((p.explained_ratio[0] - 1.0).abs() < 1e-6);
        assert!(p.explained_ratio[1..].iter().all(|r| r.abs() < 1e-6));
        let same = vec![vec![1.0, 2.0]; 4];
        let z = pca_project(&same, 2).unwrap();
        assert!(z.coords.iter().flatten().all(|&c| c == 0.0));
        assert_eq!(z.explained_ratio, vec![0.0, 0.0]);
        assert!(pca_project(&same, 3).is_err());
        assert!(pca_project(&same[..2], 2).is_err());
    }

    #[test]
    fn separated_clusters_score_near_one() {
        let mut pts = Vec::new();
        let mut labels = Vec::new();
        for c in 0..2 {
            for i in 0..5 {
                pts.push(vec![1000.0 * c as f64, i as f64 * 1e-6]);
                labels.push(c);
            }
        }
        assert!((silhouette(&pts, &labels).unwrap() - 1.0).abs() < 1e-6);
        assert!(silhouette(&pts, &[0; 10]).is_none());
    }

    #[test]
    fn text_probes_parse_and_flag_thin_categories() {
        let set = ProbeSet::from_text("gender\tking queen\ngender\tman woman\n# note\ntense\twalk walked\n", 64).unwrap();
        assert_eq!(set.items.len(), 3);
        assert!(set.items.iter().flat_map(|i| &i.tokens).all(|&t| (4..64).contains(&t)));
        assert_eq!(set.thin_categories(), vec!["tense".to_string()]);
        assert!(ProbeSet::from_text("no tab here", 64).is_err());
    }

    #[test]
    fn synthetic_pairs_share_a_multiset() {
        let set = ProbeSet::synthetic(3, 2, 7);
        assert_eq!(set.items.len(), 6);
        let sorted = |t: &[u32]| {
            let mut v = t[1..t.len() - 1].to_vec();
            v.sort_unstable();
            v
        };
        assert_eq!(sorted(&set.items[0].tokens), sorted(&set.items[1].tokens));
        assert!(set.thin_categories().is_empty());
    }

    #[test]
    fn neighbours_of_the_first_probe_are_sorted_and_capped() {
        let states = (0..15)
            .flat_map(|p| {
                [1, 3].map(|layer| PairedState {
                    probe: p,
                    category: format!("c{}", p % 3),
                    layer,
                    kind: BranchKind::Concat,
                    pre: vec![p as f64, layer as f64],
                    exp: vec![p as f64 + 0.5, layer as f64],
                })
            })
            .collect();
        let report = alignment_metrics(&ProbeStates { d_model: 2, layers: vec![1, 3], states }).unwrap();
        let n = &report.neighbours;
        assert_eq!(n.len(), NEIGHBOURS);
        assert!(n.windows(2).all(|w| w[0].distance <= w[1].distance));
        assert_eq!((n[0].probe, n[0].layer, n[0].branch), (0, 3, Branch::Pretrained));
        assert!((n[0].distance - 0.5).abs() < 1e-12);
    }
}
