//! Retrieval and verification metrics. Scores are dissimilarities: lower ranks first.

use crate::simcore::{self, Matrix};
use crate::trainer::{ModelState, Sample};
use crate::{fmt_f64, Domain, Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    /// `probes × gallery`.
    pub scores: Matrix,
    pub probe_classes: Vec<u32>,
    pub gallery_classes: Vec<u32>,
}

impl ScoreMatrix {
    pub fn new(scores: Matrix, probe_classes: Vec<u32>, gallery_classes: Vec<u32>) -> Result<Self> {
        if scores.nrows() != probe_classes.len() {
            return Err(Error::dim("probe_classes", scores.nrows(), probe_classes.len()));
        }
        if scores.ncols() != gallery_classes.len() {
            return Err(Error::dim("gallery_classes", scores.ncols(), gallery_classes.len()));
        }
        if !scores.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("score matrix".into()));
        }
        Ok(ScoreMatrix {
            scores,
            probe_classes,
            gallery_classes,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CmcCurve {
    /// `rank_acc[k]`: fraction of probes matched within the top `k + 1`.
    pub rank_acc: Vec<f64>,
}

impl CmcCurve {
    /// Accuracy at a 1-based rank, clamped to the gallery size.
    pub fn at_rank(&self, rank: usize) -> f64 {
        let k = rank.clamp(1, self.rank_acc.len().max(1)) - 1;
        self.rank_acc.get(k).copied().unwrap_or(0.0)
    }

    /// `rank<TAB>accuracy` lines, ranks from 1.
    pub fn to_tsv(&self) -> String {
        self.rank_acc
            .iter()
            .enumerate()
            .map(|(k, a)| format!("{}\t{}\n", k + 1, fmt_f64(*a)))
            .collect()
    }

    /// Pointwise mean of curves over the same gallery size.
    pub fn average(curves: &[CmcCurve]) -> Result<CmcCurve> {
        let first = curves
            .first()
            .ok_or_else(|| Error::Evaluation("no curves to average".into()))?;
        let g = first.rank_acc.len();
        let mut acc = vec![0.0; g];
        for c in curves {
            if c.rank_acc.len() != g {
                return Err(Error::dim("cmc curve", g, c.rank_acc.len()));
            }
            acc.iter_mut().zip(&c.rank_acc).for_each(|(a, v)| *a += v);
        }
        let n = curves.len() as f64;
        Ok(CmcCurve {
            rank_acc: acc.into_iter().map(|a| a / n).collect(),
        })
    }
}

fn single_domain(samples: &[Sample], side: &str) -> Result<Domain> {
    let domain = samples
        .first()
        .map(|s| s.domain)
        .ok_or_else(|| Error::Evaluation(format!("{side} set is empty")))?;
    if let Some(k) = samples.iter().position(|s| s.domain != domain) {
        return Err(Error::Evaluation(format!(
            "{side} set mixes domains: sample {k} is {} but the first is {domain}",
            samples[k].domain
        )));
    }
    Ok(domain)
}

/// Scores every probe against every gallery item. Gallery projections are
/// computed once. Probes and gallery must come from opposite domains; the
/// x-domain side always enters the measure's x slot.
pub fn score_all(state: &ModelState, probes: &[Sample], gallery: &[Sample]) -> Result<ScoreMatrix> {
    let pd = single_domain(probes, "probe")?;
    let gd = single_domain(gallery, "gallery")?;
    if pd == gd {
        return Err(Error::Evaluation(format!(
            "probes and gallery are both from domain {pd}"
        )));
    }
    let gallery_proj = gallery
        .iter()
        .map(|s| state.project(s))
        .collect::<Result<Vec<_>>>()?;
    let mut scores = Matrix::zeros(probes.len(), gallery.len());
    for (i, probe) in probes.iter().enumerate() {
        let pp = state.project(probe)?;
        for (j, gp) in gallery_proj.iter().enumerate() {
            scores[(i, j)] = match pd {
                Domain::X => simcore::score_projected(&pp, gp, state.phi.f)?,
                Domain::Y => simcore::score_projected(gp, &pp, state.phi.f)?,
            };
        }
    }
    ScoreMatrix::new(
        scores,
        probes.iter().map(|s| s.class_id).collect(),
        gallery.iter().map(|s| s.class_id).collect(),
    )
}

/// Cumulative matching characteristic. A probe's rank is the position of its
/// best same-class gallery item after a stable ascending sort of its row.
pub fn cmc(sm: &ScoreMatrix) -> Result<CmcCurve> {
    let g = sm.gallery_classes.len();
    let n = sm.probe_classes.len();
    if n == 0 || g == 0 {
        return Err(Error::Evaluation("empty score matrix".into()));
    }
    let missing: Vec<usize> = (0..n)
        .filter(|&i| !sm.gallery_classes.contains(&sm.probe_classes[i]))
        .collect();
    if !missing.is_empty() {
        return Err(Error::Evaluation(format!(
            "probe class absent from gallery for probes {missing:?}"
        )));
    }
    let mut hits = vec![0usize; g];
    for i in 0..n {
        let row = sm.scores.row(i);
        let mut order: Vec<usize> = (0..g).collect();
        order.sort_by(|&a, &b| row[a].total_cmp(&row[b]));
        let rank = order
            .iter()
            .position(|&j| sm.gallery_classes[j] == sm.probe_classes[i])
            .expect("class present");
        hits[rank] += 1;
    }
    let mut cum = 0;
    let rank_acc = hits
        .into_iter()
        .map(|h| {
            cum += h;
            cum as f64 / n as f64
        })
        .collect();
    Ok(CmcCurve { rank_acc })
}

/// Best accuracy of the rule "same class iff score < threshold" over every
/// midpoint between consecutive distinct sorted scores and ±∞.
/// Returns `(threshold, accuracy)`; the smallest maximizing threshold wins.
pub fn verification_accuracy(scores: &[f64], labels: &[i8]) -> Result<(f64, f64)> {
    if scores.is_empty() {
        return Err(Error::Evaluation("no scores".into()));
    }
    if scores.len() != labels.len() {
        return Err(Error::dim("labels", scores.len(), labels.len()));
    }
    if let Some(k) = labels.iter().position(|&l| l != 1 && l != -1) {
        return Err(Error::Evaluation(format!("label {k} is neither -1 nor +1")));
    }
    if !scores.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("verification scores".into()));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let n = scores.len() as f64;
    let total_neg = labels.iter().filter(|&&l| l == 1).count();

    // Threshold −∞: everything classified "different".
    let mut correct = total_neg;
    let mut best = (f64::NEG_INFINITY, correct);
    let mut k = 0;
    while k < idx.len() {
        // Move every item tied at this score below the threshold.
        let s = scores[idx[k]];
        while k < idx.len() && scores[idx[k]] == s {
            if labels[idx[k]] == -1 {
                correct += 1;
            } else {
                correct -= 1;
            }
            k += 1;
        }
        let threshold = if k < idx.len() {
            0.5 * (s + scores[idx[k]])
        } else {
            f64::INFINITY
        };
        if correct > best.1 {
            best = (threshold, correct);
        }
    }
    Ok((best.0, best.1 as f64 / n))
}

/// Mean score between one sample and a set of opposite-domain frames.
pub fn point_to_set_score(state: &ModelState, still: &Sample, frames: &[Sample]) -> Result<f64> {
    if frames.is_empty() {
        return Err(Error::Evaluation("empty frame set".into()));
    }
    let fd = single_domain(frames, "frame")?;
    if fd == still.domain {
        return Err(Error::Evaluation(format!(
            "frames and still are both from domain {fd}"
        )));
    }
    let still_proj = state.project(still)?;
    let mut total = 0.0;
    for frame in frames {
        let fp = state.project(frame)?;
        total += match still.domain {
            Domain::X => simcore::score_projected(&still_proj, &fp, state.phi.f)?,
            Domain::Y => simcore::score_projected(&fp, &still_proj, state.phi.f)?,
        };
    }
    Ok(total / frames.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::featnet::NetShape;
    use crate::simcore::Vector;
    use crate::trainer::TrainConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sm(rows: &[&[f64]], probes: &[u32], gallery: &[u32]) -> ScoreMatrix {
        let flat: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        ScoreMatrix::new(
            Matrix::from_row_slice(rows.len(), gallery.len(), &flat),
            probes.to_vec(),
            gallery.to_vec(),
        )
        .unwrap()
    }

    #[test]
    fn perfect_ranking_gives_rank1_one() {
        let m = sm(&[&[0.1, 0.5, 0.9], &[0.7, 0.2, 0.9], &[0.8, 0.9, 0.3]], &[0, 1, 2], &[0, 1, 2]);
        let c = cmc(&m).unwrap();
        assert_eq!(c.rank_acc, vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn reversed_ranking_reaches_one_at_last_rank() {
        // Each probe's match has the largest score in its row.
        let m = sm(&[&[0.9, 0.1, 0.2], &[0.1, 0.9, 0.2], &[0.1, 0.2, 0.9]], &[0, 1, 2], &[0, 1, 2]);
        let c = cmc(&m).unwrap();
        assert_eq!(c.rank_acc[0], 0.0);
        assert_eq!(c.rank_acc[2], 1.0);
    }

    #[test]
    fn ties_break_by_gallery_index() {
        let m = sm(&[&[0.5, 0.5]], &[1], &[0, 1]);
        assert_eq!(cmc(&m).unwrap().rank_acc, vec![0.0, 1.0]);
        let m = sm(&[&[0.5, 0.5]], &[0], &[0, 1]);
        assert_eq!(cmc(&m).unwrap().rank_acc, vec![1.0, 1.0]);
    }

    #[test]
    fn absent_probe_class_is_listed() {
        let m = sm(&[&[0.1, 0.2], &[0.3, 0.4]], &[0, 5], &[0, 1]);
        let err = cmc(&m).unwrap_err();
        assert!(err.to_string().contains("[1]"), "{err}");
    }

    #[test]
    fn tsv_and_average() {
        let a = CmcCurve { rank_acc: vec![0.5, 1.0] };
        let b = CmcCurve { rank_acc: vec![1.0, 1.0] };
        let avg = CmcCurve::average(&[a.clone(), b]).unwrap();
        assert_eq!(avg.rank_acc, vec![0.75, 1.0]);
        assert_eq!(a.to_tsv(), "1\t5.0000000000000000e-1\n2\t1.0000000000000000e0\n");
        assert_eq!(a.at_rank(10), 1.0);
        assert_eq!(a.at_rank(1), 0.5);
        assert!(CmcCurve::average(&[]).is_err());
    }

    /// Oracle: brute-force accuracy for every candidate threshold.
    fn brute_verification(scores: &[f64], labels: &[i8]) -> f64 {
        let mut cands = vec![f64::NEG_INFINITY, f64::INFINITY];
        let mut sorted = scores.to_vec();
        sorted.sort_by(f64::total_cmp);
        for w in sorted.windows(2) {
            cands.push(0.5 * (w[0] + w[1]));
        }
        cands
            .iter()
            .map(|&t| {
                scores
                    .iter()
                    .zip(labels)
                    .filter(|(&s, &l)| (s < t) == (l == -1))
                    .count() as f64
                    / scores.len() as f64
            })
            .fold(0.0, f64::max)
    }

    #[test]
    fn verification_cases() {
        let (t, acc) = verification_accuracy(&[0.1, 0.2, 0.8, 0.9], &[-1, -1, 1, 1]).unwrap();
        assert_eq!(acc, 1.0);
        assert_eq!(t, 0.5);
        let (t, acc) = verification_accuracy(&[0.1, 0.2, 0.8], &[1, 1, 1]).unwrap();
        assert_eq!((t, acc), (f64::NEG_INFINITY, 1.0));
        let (t, acc) = verification_accuracy(&[0.1, 0.2, 0.8], &[-1, -1, -1]).unwrap();
        assert_eq!((t, acc), (f64::INFINITY, 1.0));
        assert!(verification_accuracy(&[], &[]).is_err());
        assert!(verification_accuracy(&[0.1], &[1, 1]).is_err());
        assert!(verification_accuracy(&[0.1], &[0]).is_err());
    }

    #[test]
    fn verification_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let n = rng.gen_range(1..40);
            // Coarse grid so ties occur.
            let scores: Vec<f64> = (0..n).map(|_| f64::from(rng.gen_range(0..10))).collect();
            let labels: Vec<i8> = (0..n).map(|_| if rng.gen_bool(0.5) { -1 } else { 1 }).collect();
            let (t, acc) = verification_accuracy(&scores, &labels).unwrap();
            assert_eq!(acc, brute_verification(&scores, &labels));
            let at_t = scores
                .iter()
                .zip(&labels)
                .filter(|(&s, &l)| (s < t) == (l == -1))
                .count() as f64
                / n as f64;
            assert_eq!(at_t, acc);
        }
    }

    fn state() -> ModelState {
        let mut s = ModelState::init(&NetShape::desk(4, 3, 5, 4, 3), &TrainConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for sl in s.param_slices_mut() {
            sl.iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
        }
        s
    }

    fn sample(domain: Domain, class_id: u32, rng: &mut ChaCha8Rng) -> Sample {
        let dim = if domain == Domain::X { 4 } else { 3 };
        Sample {
            id: 0,
            domain,
            class_id,
            raw: Vector::from_fn(dim, |_, _| rng.gen_range(-1.0..1.0)),
        }
    }

    #[test]
    fn score_all_matches_naive_loop() {
        let st = state();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let probes: Vec<_> = (0..5).map(|c| sample(Domain::X, c, &mut rng)).collect();
        let gallery: Vec<_> = (0..7).map(|c| sample(Domain::Y, c, &mut rng)).collect();
        let m = score_all(&st, &probes, &gallery).unwrap();
        for i in 0..5 {
            for j in 0..7 {
                let naive = st.score(&probes[i], &gallery[j]).unwrap();
                assert!((m.scores[(i, j)] - naive).abs() < 1e-12);
            }
        }
        // Y probes against an X gallery keep x in the x slot.
        let mt = score_all(&st, &gallery, &probes).unwrap();
        assert!((mt.scores.transpose() - &m.scores).amax() < 1e-12);
    }

    #[test]
    fn score_all_single_and_duplicate() {
        let st = state();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = sample(Domain::X, 0, &mut rng);
        let y = sample(Domain::Y, 0, &mut rng);
        let m = score_all(&st, &[x.clone()], &[y.clone()]).unwrap();
        let fx = st.feature(&x).unwrap();
        let fy = st.feature(&y).unwrap();
        assert!((m.scores[(0, 0)] - simcore::score_factorized(&st.phi, &fx, &fy).unwrap()).abs() < 1e-12);
        let y2 = sample(Domain::Y, 1, &mut rng);
        let m = score_all(&st, &[x.clone()], &[y.clone(), y2, y.clone()]).unwrap();
        assert_eq!(m.scores.column(0), m.scores.column(2));
    }

    #[test]
    fn score_all_rejects_mixed_domains() {
        let st = state();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = sample(Domain::X, 0, &mut rng);
        let y = sample(Domain::Y, 0, &mut rng);
        assert!(score_all(&st, &[x.clone(), y.clone()], &[y.clone()]).is_err());
        assert!(score_all(&st, &[x.clone()], &[x.clone()]).is_err());
    }

    #[test]
    fn point_to_set_cases() {
        let st = state();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let still = sample(Domain::X, 0, &mut rng);
        let f1 = sample(Domain::Y, 0, &mut rng);
        let single = st.score(&still, &f1).unwrap();
        assert!((point_to_set_score(&st, &still, &[f1.clone()]).unwrap() - single).abs() < 1e-12);
        let repeated = vec![f1.clone(); 4];
        assert!((point_to_set_score(&st, &still, &repeated).unwrap() - single).abs() < 1e-12);
        let frames: Vec<_> = (0..10).map(|_| sample(Domain::Y, 0, &mut rng)).collect();
        let each: Vec<f64> = frames.iter().map(|f| st.score(&still, f).unwrap()).collect();
        let mean = each.iter().sum::<f64>() / 10.0;
        let got = point_to_set_score(&st, &still, &frames).unwrap();
        assert!((got - mean).abs() < 1e-12);
        let lo = each.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = each.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        assert!(got >= lo && got <= hi);
        assert!(point_to_set_score(&st, &still, &[]).is_err());
        assert!(point_to_set_score(&st, &still, &[still.clone()]).is_err());
    }
}
