//! DBSCAN over unit vectors with cosine distance (`1 - cos`).
//!
//! A point's neighborhood includes itself; a point is core when its
//! neighborhood holds at least `min_pts` points. Noise is not a cluster.

use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::index::dot;

pub const DEFAULT_EPS: f64 = 0.4;
pub const DEFAULT_MIN_PTS: usize = 3;

fn check(eps: f64, min_pts: usize) -> Result<()> {
    if eps.is_nan() || eps <= 0.0 || eps.is_infinite() {
        return Err(Error::Config(format!("eps must be positive, got {eps}")));
    }
    if min_pts == 0 {
        return Err(Error::Config("min_pts must be at least 1".into()));
    }
    Ok(())
}

fn neighborhoods(points: &[&[f32]], eps: f64) -> Vec<Vec<usize>> {
    crate::par::map_range(points.len(), |i| {
        (0..points.len())
            .filter(|&j| 1.0 - dot(points[i], points[j]) <= eps)
            .collect()
    })
}

/// Cluster label per point (`None` = noise). Labels are numbered in order
/// of each cluster's first core point.
pub fn dbscan_labels(points: &[&[f32]], eps: f64, min_pts: usize) -> Result<Vec<Option<usize>>> {
    check(eps, min_pts)?;
    let neighbors = neighborhoods(points, eps);
    let is_core: Vec<bool> = neighbors.iter().map(|n| n.len() >= min_pts).collect();
    let mut labels = vec![None; points.len()];
    let mut next = 0;
    for seed in 0..points.len() {
        if !is_core[seed] || labels[seed].is_some() {
            continue;
        }
        let cluster = next;
        next += 1;
        labels[seed] = Some(cluster);
        let mut queue = VecDeque::from([seed]);
        while let Some(p) = queue.pop_front() {
            for &q in &neighbors[p] {
                if labels[q].is_none() {
                    labels[q] = Some(cluster);
                    if is_core[q] {
                        queue.push_back(q);
                    }
                }
            }
        }
    }
    Ok(labels)
}

pub fn dbscan_cluster_count(points: &[&[f32]], eps: f64, min_pts: usize) -> Result<usize> {
    check(eps, min_pts)?;
    if points.is_empty() {
        return Ok(0);
    }
    let labels = dbscan_labels(points, eps, min_pts)?;
    Ok(labels.iter().flatten().max().map_or(0, |m| m + 1))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(v: &[f32]) -> Vec<f32> {
        let n = v.iter().map(|x| x * x).sum::<f32>().sqrt();
        v.iter().map(|x| x / n).collect()
    }

    #[test]
    fn separated_groups() {
        let a = unit(&[1.0, 0.0]);
        let b = unit(&[0.0, 1.0]);
        let pts: Vec<&[f32]> = vec![&a, &a, &a, &b, &b, &b];
        assert_eq!(dbscan_cluster_count(&pts, 0.4, 2).unwrap(), 2);
    }

    #[test]
    fn one_dense_cluster() {
        let a = unit(&[1.0, 0.1]);
        let b = unit(&[1.0, 0.0]);
        let c = unit(&[1.0, -0.1]);
        let pts: Vec<&[f32]> = vec![&a, &b, &c];
        assert_eq!(dbscan_cluster_count(&pts, 0.4, 3).unwrap(), 1);
    }

    #[test]
    fn noise_is_not_counted() {
        let a = unit(&[1.0, 0.0]);
        let b = unit(&[0.0, 1.0]);
        let c = unit(&[-1.0, 0.0]);
        let pts: Vec<&[f32]> = vec![&a, &b, &c];
        assert_eq!(dbscan_cluster_count(&pts, 0.4, 2).unwrap(), 0);
        assert_eq!(dbscan_cluster_count(&pts, 0.4, 1).unwrap(), 3);
        assert_eq!(dbscan_labels(&pts, 0.4, 2).unwrap(), vec![None; 3]);
    }

    #[test]
    fn empty_and_bad_parameters() {
        assert_eq!(dbscan_cluster_count(&[], 0.4, 3).unwrap(), 0);
        assert!(dbscan_cluster_count(&[], 0.0, 3).is_err());
        assert!(dbscan_cluster_count(&[], 0.4, 0).is_err());
    }
}
