//! AUC-ROC and Spearman statistics, and per-tag evaluation reports.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::arch::{ArchId, Network};
use crate::dataset::{Category, TagVocabulary, TaggedDataset};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Average 1-based ranks; tied values share the mean of their positions.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half, via the Mann-Whitney rank sum.
pub fn auc_roc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Dimension {
            op: "auc_roc",
            lhs: vec![scores.len()],
            rhs: vec![labels.len()],
        });
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Contract("auc_roc scores contain NaN".into()));
    }
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedAuc(format!("{pos} positives and {neg} negatives")));
    }
    let ranks = average_ranks(scores);
    let rank_sum: f64 = ranks.iter().zip(labels).filter(|(_, &l)| l == 1).map(|(r, _)| r).sum();
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Pearson correlation of average-rank vectors.
pub fn spearman_rho(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Dimension {
            op: "spearman_rho",
            lhs: vec![a.len()],
            rhs: vec![b.len()],
        });
    }
    if a.len() < 2 {
        return Err(Error::Contract("spearman_rho needs at least two pairs".into()));
    }
    let (ra, rb) = (average_ranks(a), average_ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::Contract("spearman_rho is undefined for a constant input".into()));
    }
    Ok((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

/// Per-tag AUCs over `preds` (rows of tag scores) and `labels`; `None` where
/// a tag has a single class.
pub fn per_tag_auc(preds: &[Vec<f64>], labels: &[Vec<u8>]) -> Result<Vec<Option<f64>>> {
    if preds.len() != labels.len() {
        return Err(Error::Dimension {
            op: "per_tag_auc",
            lhs: vec![preds.len()],
            rhs: vec![labels.len()],
        });
    }
    let n_tags = labels.first().map_or(0, Vec::len);
    (0..n_tags)
        .map(|k| {
            let s: Vec<f64> = preds.iter().map(|p| p[k]).collect();
            let l: Vec<u8> = labels.iter().map(|r| r[k]).collect();
            match auc_roc(&s, &l) {
                Ok(a) => Ok(Some(a)),
                Err(Error::UndefinedAuc(_)) => Ok(None),
                Err(e) => Err(e),
            }
        })
        .collect()
}

/// Mean AUC over tags where it is defined.
pub fn mean_auc(preds: &[Vec<f64>], labels: &[Vec<u8>]) -> Result<f64> {
    let defined: Vec<f64> = per_tag_auc(preds, labels)?.into_iter().flatten().collect();
    if defined.is_empty() {
        return Err(Error::UndefinedAuc("no tag has both classes".into()));
    }
    Ok(defined.iter().sum::<f64>() / defined.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFingerprint {
    pub arch: ArchId,
    pub params: u64,
}

impl ModelFingerprint {
    pub fn label(&self) -> String {
        format!("{}@{}", self.arch, self.params)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TagResult {
    pub tag: String,
    pub category: Category,
    /// 1 for the most frequent tag in the training split.
    pub popularity_rank: usize,
    pub auc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: ModelFingerprint,
    pub tags: Vec<TagResult>,
    pub mean_auc: f64,
    pub category_auc: BTreeMap<Category, f64>,
    /// Rank correlation between tag popularity (occurrence count) and AUC;
    /// positive when frequent tags score higher.
    pub spearman_rho: Option<f64>,
    pub notes: Vec<String>,
}

/// Popularity ranks from vocabulary counts, 1 = most frequent; ties keep
/// vocabulary order.
pub fn popularity_ranks(vocab: &TagVocabulary) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..vocab.len()).collect();
    idx.sort_by_key(|&k| std::cmp::Reverse(vocab.tags()[k].count));
    let mut ranks = vec![0; vocab.len()];
    for (r, k) in idx.into_iter().enumerate() {
        ranks[k] = r + 1;
    }
    ranks
}

/// Builds a report from precomputed predictions. `vocab` counts define
/// popularity.
pub fn report_from_predictions(
    preds: &[Vec<f64>],
    labels: &[Vec<u8>],
    vocab: &TagVocabulary,
    model: ModelFingerprint,
) -> Result<EvalReport> {
    if labels.iter().any(|r| r.len() != vocab.len()) || preds.iter().any(|r| r.len() != vocab.len()) {
        return Err(Error::Contract(format!("predictions and labels must have {} columns", vocab.len())));
    }
    let aucs = per_tag_auc(preds, labels)?;
    let ranks = popularity_ranks(vocab);
    let mut notes = Vec::new();
    let tags: Vec<TagResult> = vocab
        .tags()
        .iter()
        .zip(&aucs)
        .zip(&ranks)
        .map(|((t, &auc), &popularity_rank)| {
            if auc.is_none() {
                notes.push(format!("`{}` has a single class in the test split; excluded", t.name));
            }
            TagResult {
                tag: t.name.clone(),
                category: t.category,
                popularity_rank,
                auc,
            }
        })
        .collect();
    let defined: Vec<(&TagResult, f64)> = tags.iter().filter_map(|t| t.auc.map(|a| (t, a))).collect();
    if defined.is_empty() {
        return Err(Error::UndefinedAuc("no tag has both classes in the test split".into()));
    }
    let mean_auc = defined.iter().map(|(_, a)| a).sum::<f64>() / defined.len() as f64;
    let mut category_auc = BTreeMap::new();
    for cat in Category::ALL {
        let v: Vec<f64> = defined.iter().filter(|(t, _)| t.category == cat).map(|(_, a)| *a).collect();
        if !v.is_empty() {
            category_auc.insert(cat, v.iter().sum::<f64>() / v.len() as f64);
        }
    }
    let counts: Vec<f64> = defined
        .iter()
        .map(|(t, _)| vocab.tags()[vocab.index_of(&t.tag).expect("vocab tag")].count as f64)
        .collect();
    let values: Vec<f64> = defined.iter().map(|(_, a)| *a).collect();
    let spearman_rho = match spearman_rho(&counts, &values) {
        Ok(r) => Some(r),
        Err(_) => {
            notes.push("rank correlation undefined (constant popularity or AUC)".into());
            None
        }
    };
    Ok(EvalReport {
        model,
        tags,
        mean_auc,
        category_auc,
        spearman_rho,
        notes,
    })
}

/// Inference on `inputs` (aligned with `test.examples`) and report assembly.
pub fn evaluate(net: &Network, test: &TaggedDataset, inputs: &[Tensor], vocab: &TagVocabulary, batch_size: usize) -> Result<EvalReport> {
    if inputs.len() != test.len() {
        return Err(Error::Contract(format!("{} inputs for {} examples", inputs.len(), test.len())));
    }
    let refs: Vec<&Tensor> = inputs.iter().collect();
    let preds = net.predict(&refs, batch_size)?;
    let labels: Vec<Vec<u8>> = test.examples.iter().map(|e| e.labels.clone()).collect();
    let model = ModelFingerprint {
        arch: net.spec.id(),
        params: net.spec.param_count,
    };
    report_from_predictions(&preds, &labels, vocab, model)
}

impl EvalReport {
    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, serde_json::to_vec_pretty(self)?).map_err(|e| Error::file(path, e))
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Per-tag table `tag,category,popularity_rank,<model>...` for one or more
/// reports over the same vocabulary, rows grouped by category and sorted by
/// the first model's AUC within each.
pub fn write_tag_table(reports: &[EvalReport], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let first = reports.first().ok_or_else(|| Error::Contract("no reports to tabulate".into()))?;
    let mut w = csv::Writer::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::file(path, io),
        other => Error::Format(format!("{other:?}")),
    })?;
    let mut header = vec!["tag".to_string(), "category".into(), "popularity_rank".into()];
    header.extend(reports.iter().map(|r| r.model.label()));
    w.write_record(&header)?;
    let mut order: Vec<usize> = (0..first.tags.len()).collect();
    order.sort_by(|&a, &b| {
        let (ta, tb) = (&first.tags[a], &first.tags[b]);
        ta.category
            .cmp(&tb.category)
            .then(tb.auc.unwrap_or(-1.0).total_cmp(&ta.auc.unwrap_or(-1.0)))
    });
    for k in order {
        let t = &first.tags[k];
        let mut rec = vec![t.tag.clone(), t.category.to_string(), t.popularity_rank.to_string()];
        for r in reports {
            rec.push(r.tags.get(k).and_then(|x| x.auc).map(|a| format!("{a:.6}")).unwrap_or_default());
        }
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::file(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::test_support::random_tensor;
    use rand::{Rng, SeedableRng};

    fn pairwise(scores: &[f64], labels: &[u8]) -> f64 {
        let (mut w, mut n) = (0.0, 0.0);
        for (s, l) in scores.iter().zip(labels) {
            for (t, m) in scores.iter().zip(labels) {
                if *l == 1 && *m == 0 {
                    n += 1.0;
                    w += if s > t { 1.0 } else if s == t { 0.5 } else { 0.0 };
                }
            }
        }
        w / n
    }

    #[test]
    fn auc_basic_cases() {
        assert_eq!(auc_roc(&[0.1, 0.2, 0.8, 0.9], &[0, 0, 1, 1]).unwrap(), 1.0);
        assert_eq!(auc_roc(&[0.5; 4], &[0, 1, 0, 1]).unwrap(), 0.5);
        assert!(matches!(auc_roc(&[0.1, 0.2], &[1, 1]), Err(Error::UndefinedAuc(_))));
        let mut rng = crate::SeededRng::seed_from_u64(1);
        let n = 20_000;
        let s: Vec<f64> = (0..n).map(|_| rng.random()).collect();
        let l: Vec<u8> = (0..n).map(|_| u8::from(rng.random_bool(0.3))).collect();
        assert!((auc_roc(&s, &l).unwrap() - 0.5).abs() < 0.02);
    }

    #[test]
    fn auc_matches_pairwise_oracle() {
        let mut rng = crate::SeededRng::seed_from_u64(2);
        for _ in 0..200 {
            let s: Vec<f64> = (0..30).map(|_| f64::from(rng.random_range(0..8u8))).collect();
            let mut l: Vec<u8> = (0..30).map(|_| u8::from(rng.random_bool(0.4))).collect();
            l[0] = 1;
            l[1] = 0;
            assert!((auc_roc(&s, &l).unwrap() - pairwise(&s, &l)).abs() < 1e-12);
        }
    }

    #[test]
    fn auc_invariances() {
        let mut rng = crate::SeededRng::seed_from_u64(3);
        let s: Vec<f64> = (0..50).map(|_| rng.random_range(-2.0..2.0)).collect();
        let l: Vec<u8> = (0..50).map(|i| u8::from(i % 3 == 0)).collect();
        let a = auc_roc(&s, &l).unwrap();
        let t: Vec<f64> = s.iter().map(|x| x.exp() * 3.0 + 1.0).collect();
        assert!((auc_roc(&t, &l).unwrap() - a).abs() < 1e-12);
        let neg: Vec<f64> = s.iter().map(|x| -x).collect();
        assert!((auc_roc(&neg, &l).unwrap() + a - 1.0).abs() < 1e-12);
    }

    #[test]
    fn spearman_cases() {
        let a = [3.0, 1.0, 4.0, 1.5, 9.0, 2.6];
        assert!((spearman_rho(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let rev: Vec<f64> = a.iter().map(|x| -x).collect();
        assert!((spearman_rho(&a, &rev).unwrap() + 1.0).abs() < 1e-12);
        let mono: Vec<f64> = a.iter().map(|x| x.powi(3)).collect();
        assert!((spearman_rho(&mono, &a).unwrap() - 1.0).abs() < 1e-12);
        assert!(spearman_rho(&[1.0], &[2.0]).is_err());
        assert!(spearman_rho(&[1.0, 1.0], &[2.0, 3.0]).is_err());
    }

    fn brute_rank(x: &[f64]) -> Vec<f64> {
        x.iter()
            .map(|v| {
                let below = x.iter().filter(|w| *w < v).count() as f64;
                let equal = x.iter().filter(|w| *w == v).count() as f64;
                below + (equal + 1.0) / 2.0
            })
            .collect()
    }

    fn pearson(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
        let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
        let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
        cov / (va * vb).sqrt()
    }

    #[test]
    fn spearman_matches_rank_then_pearson() {
        let mut rng = crate::SeededRng::seed_from_u64(4);
        for _ in 0..100 {
            let a: Vec<f64> = (0..20).map(|_| f64::from(rng.random_range(0..6u8))).collect();
            let b: Vec<f64> = (0..20).map(|_| rng.random_range(0.0..1.0)).collect();
            let want = pearson(&brute_rank(&a), &brute_rank(&b));
            assert!((spearman_rho(&a, &b).unwrap() - want).abs() < 1e-12);
        }
    }

    fn toy() -> (Vec<Vec<f64>>, Vec<Vec<u8>>, TagVocabulary) {
        let labels: Vec<Vec<u8>> = (0..40).map(|i| (0..50).map(|k| u8::from((i + k) % 4 == 0)).collect()).collect();
        let preds = labels.iter().map(|r| r.iter().map(|&l| f64::from(l)).collect()).collect();
        (preds, labels, TagVocabulary::top50())
    }

    fn fp() -> ModelFingerprint {
        ModelFingerprint {
            arch: ArchId::K2c2,
            params: 10,
        }
    }

    #[test]
    fn perfect_and_constant_predictions() {
        let (preds, labels, vocab) = toy();
        let r = report_from_predictions(&preds, &labels, &vocab, fp()).unwrap();
        assert_eq!(r.mean_auc, 1.0);
        assert_eq!(r.tags.len(), 50);
        assert_eq!(r.category_auc.len(), 4);
        let constant = vec![vec![0.3; 50]; 40];
        let r = report_from_predictions(&constant, &labels, &vocab, fp()).unwrap();
        assert!(r.tags.iter().all(|t| t.auc == Some(0.5)));
    }

    #[test]
    fn single_class_tags_are_excluded_with_a_note() {
        let (preds, mut labels, vocab) = toy();
        for r in labels.iter_mut() {
            r[7] = 0;
        }
        let mut noisy = preds.clone();
        for (i, r) in noisy.iter_mut().enumerate() {
            r[3] = (i % 7) as f64;
        }
        let r = report_from_predictions(&noisy, &labels, &vocab, fp()).unwrap();
        assert!(r.tags[7].auc.is_none());
        assert_eq!(r.notes.len(), 1);
        let defined: Vec<f64> = r.tags.iter().filter_map(|t| t.auc).collect();
        assert_eq!(defined.len(), 49);
        assert!((r.mean_auc - defined.iter().sum::<f64>() / 49.0).abs() < 1e-12);
        assert!(r.spearman_rho.is_some());
    }

    #[test]
    fn untrained_network_scores_near_chance() {
        use crate::arch::{build, ArchitectureTemplate};
        let spec = ArchitectureTemplate::compact(ArchId::K2c2).at_multiplier(0.2).unwrap();
        let net = build(&spec, &mut crate::SeededRng::seed_from_u64(1)).unwrap();
        let mut rng = crate::SeededRng::seed_from_u64(2);
        let inputs: Vec<Tensor> = (0..300).map(|i| random_tensor(&[1, 8, 12], 100 + i)).collect();
        let examples = (0..300)
            .map(|i| crate::dataset::Example {
                path: format!("{i}").into(),
                labels: (0..50).map(|k| u8::from(k == i % 50 || rng.random_bool(0.2))).collect(),
            })
            .collect();
        let test = TaggedDataset::new(TagVocabulary::top50().names(), examples).unwrap();
        let r = evaluate(&net, &test, &inputs, &TagVocabulary::top50(), 32).unwrap();
        assert!((0.4..=0.6).contains(&r.mean_auc), "{}", r.mean_auc);
    }

    #[test]
    fn report_files_round_trip() {
        let (preds, labels, vocab) = toy();
        let r = report_from_predictions(&preds, &labels, &vocab, fp()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        r.save_json(dir.path().join("r.json")).unwrap();
        assert_eq!(EvalReport::load_json(dir.path().join("r.json")).unwrap(), r);
        write_tag_table(&[r.clone(), r], dir.path().join("t.csv")).unwrap();
        let text = fs::read_to_string(dir.path().join("t.csv")).unwrap();
        assert_eq!(text.lines().count(), 51);
        assert!(text.starts_with("tag,category,popularity_rank,k2c2@10,k2c2@10"));
    }
}
