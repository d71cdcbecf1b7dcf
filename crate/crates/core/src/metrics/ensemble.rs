//! Self-ensembling: k-means on the endpoints of every member's modes.

use crate::net::Prediction;
use crate::scene::Vec2;

use super::{dist, MetricsError, Result};

pub const KMEANS_ITERATIONS: usize = 50;

struct Mode<'a> {
    traj: &'a [Vec2],
    score: f64,
    end: Vec2,
}

/// Merges the modes of `members` into `k_out` modes.
///
/// Centers start from the highest-scoring mode and grow by farthest-point
/// selection, then run [`KMEANS_ITERATIONS`] Lloyd steps on endpoints. Each
/// cluster yields the score-weighted mean trajectory of its modes and the
/// sum of their scores. With fewer distinct endpoints than `k_out`, the
/// remaining slots take the highest-scoring modes not yet used as a
/// cluster's first member. Scores are renormalized to sum to one and
/// clusters are ordered by their first member.
pub fn ensemble_cluster(members: &[Prediction], k_out: usize) -> Result<Prediction> {
    let modes: Vec<Mode> = members
        .iter()
        .flat_map(|p| {
            p.trajectories.iter().zip(&p.scores).map(|(tr, s)| Mode {
                traj: tr,
                score: *s,
                end: *tr.last().expect("non-empty trajectory"),
            })
        })
        .collect();
    if k_out == 0 || modes.len() < k_out {
        return Err(MetricsError::TooFewModes {
            needed: k_out.max(1),
            got: modes.len(),
        });
    }
    let horizon = modes[0].traj.len();

    // Farthest-point initialization; stops early when every endpoint
    // coincides with a center.
    let first = (0..modes.len()).fold(0, |b, i| if modes[i].score > modes[b].score { i } else { b });
    let mut centers = vec![modes[first].end];
    while centers.len() < k_out {
        let (far, d) = modes
            .iter()
            .enumerate()
            .map(|(i, m)| (i, nearest(&centers, m.end).1))
            .fold((0, -1.0), |b, x| if x.1 > b.1 { x } else { b });
        if d <= 0.0 {
            break;
        }
        centers.push(modes[far].end);
    }

    let mut assign = vec![0; modes.len()];
    for _ in 0..KMEANS_ITERATIONS {
        for (a, m) in assign.iter_mut().zip(&modes) {
            *a = nearest(&centers, m.end).0;
        }
        for (c, center) in centers.iter_mut().enumerate() {
            let (mut sum, mut n) = ([0.0, 0.0], 0usize);
            for (m, _) in modes.iter().zip(&assign).filter(|(_, a)| **a == c) {
                sum[0] += m.end[0];
                sum[1] += m.end[1];
                n += 1;
            }
            if n > 0 {
                *center = [sum[0] / n as f64, sum[1] / n as f64];
            }
        }
    }
    for (a, m) in assign.iter_mut().zip(&modes) {
        *a = nearest(&centers, m.end).0;
    }

    // (first member index, trajectory, score) per nonempty cluster.
    let mut out: Vec<(usize, Vec<Vec2>, f64)> = Vec::new();
    for c in 0..centers.len() {
        let idx: Vec<usize> = (0..modes.len()).filter(|i| assign[*i] == c).collect();
        let Some(&head) = idx.first() else { continue };
        let total: f64 = idx.iter().map(|i| modes[*i].score).sum();
        let weight = |i: usize| {
            if total > 0.0 {
                modes[i].score / total
            } else {
                1.0 / idx.len() as f64
            }
        };
        let traj = (0..horizon)
            .map(|t| {
                let mut p = [0.0, 0.0];
                for &i in &idx {
                    let w = weight(i);
                    p[0] += w * modes[i].traj[t][0];
                    p[1] += w * modes[i].traj[t][1];
                }
                p
            })
            .collect();
        out.push((head, traj, total));
    }
    if out.len() < k_out {
        let mut rest: Vec<usize> = (0..modes.len()).filter(|i| !out.iter().any(|o| o.0 == *i)).collect();
        rest.sort_by(|a, b| modes[*b].score.total_cmp(&modes[*a].score).then(a.cmp(b)));
        for i in rest.into_iter().take(k_out - out.len()) {
            out.push((i, modes[i].traj.to_vec(), modes[i].score));
        }
    }
    out.sort_by_key(|o| o.0);

    let total: f64 = out.iter().map(|o| o.2).sum();
    let n = out.len() as f64;
    Ok(Prediction {
        scores: out
            .iter()
            .map(|o| if total > 0.0 { o.2 / total } else { 1.0 / n })
            .collect(),
        trajectories: out.into_iter().map(|o| o.1).collect(),
    })
}

/// Index of and distance to the nearest center; ties go to the smallest
/// index.
fn nearest(centers: &[Vec2], p: Vec2) -> (usize, f64) {
    centers
        .iter()
        .enumerate()
        .map(|(i, c)| (i, dist(*c, p)))
        .fold((0, f64::INFINITY), |b, x| if x.1 < b.1 { x } else { b })
}
