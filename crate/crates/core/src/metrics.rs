//! Fidelity metrics between simulated and real sweeps.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par::{self, Exec};
use crate::polar_grid::Mask;
use crate::rng::{counter_uniform, STREAM_RANDOM_DROP};

/// Detected/missed ground-truth label ids on real (`r_*`) and simulated (`s_*`) data.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgreementSets {
    pub r_plus: BTreeSet<String>,
    pub r_minus: BTreeSet<String>,
    pub s_plus: BTreeSet<String>,
    pub s_minus: BTreeSet<String>,
}

impl AgreementSets {
    pub fn new<S: Into<String>>(
        r_plus: impl IntoIterator<Item = S>,
        r_minus: impl IntoIterator<Item = S>,
        s_plus: impl IntoIterator<Item = S>,
        s_minus: impl IntoIterator<Item = S>,
    ) -> Self {
        let set = |it: &mut dyn Iterator<Item = S>| it.map(Into::into).collect::<BTreeSet<String>>();
        Self {
            r_plus: set(&mut r_plus.into_iter()),
            r_minus: set(&mut r_minus.into_iter()),
            s_plus: set(&mut s_plus.into_iter()),
            s_minus: set(&mut s_minus.into_iter()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.r_plus.is_disjoint(&self.r_minus) {
            return Err(Error::input("a label is both detected and missed on real data"));
        }
        if !self.s_plus.is_disjoint(&self.s_minus) {
            return Err(Error::input("a label is both detected and missed on simulated data"));
        }
        let real: BTreeSet<&String> = self.r_plus.union(&self.r_minus).collect();
        let sim: BTreeSet<&String> = self.s_plus.union(&self.s_minus).collect();
        if real != sim {
            return Err(Error::input("real and simulated label sets cover different labels"));
        }
        Ok(())
    }
}

/// Fraction of labels whose detected/missed outcome agrees between real and
/// simulated data. An empty label set agrees vacuously.
pub fn detection_agreement(sets: &AgreementSets) -> Result<f64> {
    sets.validate()?;
    let universe = sets.r_plus.len() + sets.r_minus.len();
    if universe == 0 {
        return Ok(1.0);
    }
    let agree = sets.r_plus.intersection(&sets.s_plus).count() + sets.r_minus.intersection(&sets.s_minus).count();
    Ok(agree as f64 / universe as f64)
}

pub fn point_count_ratio(sim_count: usize, real_count: usize) -> Result<f64> {
    if sim_count == 0 {
        return Err(Error::input("simulated sweep has no points"));
    }
    Ok(real_count as f64 / sim_count as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OccupancyAgreement {
    pub precision: f64,
    pub recall: f64,
    pub iou: f64,
}

/// Set metrics over occupied cells, treating `real` as ground truth.
///
/// A ratio with an empty denominator is 1 when both masks are empty and 0
/// otherwise.
pub fn occupancy_agreement(sim: &Mask, real: &Mask) -> Result<OccupancyAgreement> {
    if !sim.same_shape(real) {
        return Err(Error::input("masks differ in shape"));
    }
    let (mut tp, mut ns, mut nr, mut union) = (0usize, 0usize, 0usize, 0usize);
    for (&s, &r) in sim.bits.iter().zip(&real.bits) {
        tp += (s && r) as usize;
        ns += s as usize;
        nr += r as usize;
        union += (s || r) as usize;
    }
    let both_empty = union == 0;
    let ratio = |num: usize, den: usize| {
        if den > 0 {
            num as f64 / den as f64
        } else if both_empty {
            1.0
        } else {
            0.0
        }
    };
    Ok(OccupancyAgreement {
        precision: ratio(tp, ns),
        recall: ratio(tp, nr),
        iou: ratio(tp, union),
    })
}

/// Drops each occupied cell independently with probability `rate`.
pub fn random_raydrop(occupancy: &Mask, rate: f64, seed: u64, exec: Exec) -> Result<Mask> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::input(format!("drop rate {rate} outside [0, 1]")));
    }
    let cols = occupancy.cols;
    let bits = par::map_range(exec, occupancy.len(), |cell| {
        occupancy.bits[cell] && counter_uniform(seed, STREAM_RANDOM_DROP, (cell / cols) as u32, (cell % cols) as u32) >= rate
    });
    Ok(Mask {
        rows: occupancy.rows,
        cols,
        bits,
    })
}

/// Area under the ROC curve via average ranks; `None` without both classes.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), labels.len());
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // Ranks i+1..=j+1 share their mean.
        let avg = (i + j + 2) as f64 / 2.0;
        rank_sum += avg * order[i..=j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Some((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Summary written by the `eval` command.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub sim_points: usize,
    pub real_points: usize,
    pub point_count_ratio: f64,
    pub occupancy: OccupancyAgreement,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub detection_agreement: Option<f64>,
}

impl EvalReport {
    pub fn new(sim: &Mask, real: &Mask, sets: Option<&AgreementSets>) -> Result<Self> {
        let (sim_points, real_points) = (sim.count(), real.count());
        Ok(Self {
            sim_points,
            real_points,
            point_count_ratio: point_count_ratio(sim_points, real_points)?,
            occupancy: occupancy_agreement(sim, real)?,
            detection_agreement: sets.map(detection_agreement).transpose()?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sets(rp: &[&str], rm: &[&str], sp: &[&str], sm: &[&str]) -> AgreementSets {
        AgreementSets::new(rp.iter().copied(), rm.iter().copied(), sp.iter().copied(), sm.iter().copied())
    }

    #[test]
    fn kappa_examples() {
        assert_eq!(detection_agreement(&sets(&["a", "b"], &["c"], &["a", "b"], &["c"])).unwrap(), 1.0);
        assert_eq!(detection_agreement(&sets(&["a", "b"], &["c"], &["a"], &["b", "c"])).unwrap(), 2.0 / 3.0);
        assert_eq!(detection_agreement(&sets(&[], &["a"], &["a"], &[])).unwrap(), 0.0);
        assert_eq!(detection_agreement(&AgreementSets::default()).unwrap(), 1.0);
        assert!(detection_agreement(&sets(&["a"], &[], &["b"], &[])).is_err());
        assert!(detection_agreement(&sets(&["a"], &["a"], &["a"], &[])).is_err());
    }

    #[test]
    fn count_ratio() {
        assert_eq!(point_count_ratio(100_000, 90_000).unwrap(), 0.9);
        assert_eq!(point_count_ratio(1, 1).unwrap(), 1.0);
        assert_eq!(point_count_ratio(100, 0).unwrap(), 0.0);
        assert!(point_count_ratio(0, 5).is_err());
    }

    #[test]
    fn occupancy_examples() {
        let ones = Mask::from_fn(64, 2048, |_, _| true);
        let half = Mask::from_fn(64, 2048, |_, c| c % 2 == 0);
        let other = Mask::from_fn(64, 2048, |_, c| c % 2 == 1);
        let same = occupancy_agreement(&half, &half).unwrap();
        assert_eq!((same.precision, same.recall, same.iou), (1.0, 1.0, 1.0));
        let a = occupancy_agreement(&ones, &half).unwrap();
        assert_eq!((a.precision, a.recall, a.iou), (0.5, 1.0, 0.5));
        let d = occupancy_agreement(&half, &other).unwrap();
        assert_eq!((d.precision, d.recall, d.iou), (0.0, 0.0, 0.0));
        let z = Mask::zeros(64, 2048);
        let e = occupancy_agreement(&z, &z).unwrap();
        assert_eq!((e.precision, e.recall, e.iou), (1.0, 1.0, 1.0));
        let s = occupancy_agreement(&z, &half).unwrap();
        assert_eq!((s.precision, s.recall, s.iou), (0.0, 0.0, 0.0));
    }

    #[test]
    fn random_drop_rates() {
        let occ = Mask::from_fn(64, 2048, |_, _| true);
        assert_eq!(random_raydrop(&occ, 0.0, 1, Exec::Parallel).unwrap(), occ);
        assert_eq!(random_raydrop(&occ, 1.0, 1, Exec::Parallel).unwrap().count(), 0);
        let kept = random_raydrop(&occ, 0.1, 1, Exec::Parallel).unwrap();
        let dropped = 1.0 - kept.count() as f64 / 131072.0;
        assert!((0.095..=0.105).contains(&dropped), "{dropped}");
        assert!(random_raydrop(&occ, 1.5, 1, Exec::Parallel).is_err());
    }

    #[test]
    fn auc_against_pair_counting() {
        let scores = [0.1, 0.4, 0.35, 0.8, 0.4, 0.9, 0.2];
        let labels = [false, false, true, true, true, true, false];
        let mut wins = 0.0;
        let mut pairs = 0.0;
        for i in 0..7 {
            for j in 0..7 {
                if labels[i] && !labels[j] {
                    pairs += 1.0;
                    wins += if scores[i] > scores[j] {
                        1.0
                    } else if scores[i] == scores[j] {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
        }
        assert!((roc_auc(&scores, &labels).unwrap() - wins / pairs).abs() < 1e-15);
        assert_eq!(roc_auc(&[0.1], &[true]), None);
    }

    fn label_sets() -> impl Strategy<Value = AgreementSets> {
        prop::collection::vec((any::<bool>(), any::<bool>()), 0..30).prop_map(|v| {
            let mut s = AgreementSets::default();
            for (i, (real, sim)) in v.into_iter().enumerate() {
                let id = format!("l{i}");
                if real { &mut s.r_plus } else { &mut s.r_minus }.insert(id.clone());
                if sim { &mut s.s_plus } else { &mut s.s_minus }.insert(id);
            }
            s
        })
    }

    proptest! {
        #[test]
        fn kappa_symmetric(s in label_sets()) {
            let swapped = AgreementSets {
                r_plus: s.s_plus.clone(),
                r_minus: s.s_minus.clone(),
                s_plus: s.r_plus.clone(),
                s_minus: s.r_minus.clone(),
            };
            prop_assert_eq!(detection_agreement(&s).unwrap(), detection_agreement(&swapped).unwrap());
        }

        #[test]
        fn kappa_one_iff_equal(s in label_sets()) {
            let k = detection_agreement(&s).unwrap();
            prop_assert!((0.0..=1.0).contains(&k));
            prop_assert_eq!(k == 1.0, s.r_plus == s.s_plus && s.r_minus == s.s_minus);
        }

        #[test]
        fn iou_bounded_by_precision_and_recall(a in prop::collection::vec(any::<bool>(), 64), b in prop::collection::vec(any::<bool>(), 64)) {
            let sim = Mask { rows: 8, cols: 8, bits: a };
            let real = Mask { rows: 8, cols: 8, bits: b };
            let m = occupancy_agreement(&sim, &real).unwrap();
            prop_assert!(m.iou <= m.precision && m.iou <= m.recall);
        }
    }
}
