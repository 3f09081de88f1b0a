//! Label-conditioned cluster quality in a feature space, Euclidean distance.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::Matrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    pub silhouette: f64,
    pub calinski_harabasz: f64,
    pub davies_bouldin: f64,
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

struct Clusters {
    /// Cluster id per row, renumbered densely.
    ids: Vec<usize>,
    sizes: Vec<usize>,
}

fn clusters(x: &Matrix, labels: &[usize]) -> Result<Clusters> {
    if x.rows() != labels.len() {
        return Err(Error::dim(format!(
            "{} rows but {} labels",
            x.rows(),
            labels.len()
        )));
    }
    let mut seen: Vec<usize> = labels.to_vec();
    seen.sort_unstable();
    seen.dedup();
    if seen.len() < 2 {
        return Err(Error::invalid("cluster scores need at least two clusters"));
    }
    let ids: Vec<usize> = labels.iter().map(|l| seen.binary_search(l).unwrap()).collect();
    let mut sizes = vec![0; seen.len()];
    for &i in &ids {
        sizes[i] += 1;
    }
    Ok(Clusters { ids, sizes })
}

fn centroids(x: &Matrix, c: &Clusters) -> Vec<Vec<f64>> {
    let mut out = vec![vec![0.0; x.cols()]; c.sizes.len()];
    for (r, &k) in c.ids.iter().enumerate() {
        for (o, v) in out[k].iter_mut().zip(x.row(r)) {
            *o += v;
        }
    }
    for (row, &n) in out.iter_mut().zip(&c.sizes) {
        row.iter_mut().for_each(|v| *v /= n as f64);
    }
    out
}

/// Mean silhouette; points in singleton clusters score 0.
pub fn silhouette(x: &Matrix, labels: &[usize]) -> Result<f64> {
    let c = clusters(x, labels)?;
    let k = c.sizes.len();
    let n = x.rows();
    let mut total = 0.0;
    let mut sums = vec![0.0; k];
    for i in 0..n {
        sums.iter_mut().for_each(|s| *s = 0.0);
        for j in 0..n {
            if i != j {
                sums[c.ids[j]] += dist(x.row(i), x.row(j));
            }
        }
        let own = c.ids[i];
        if c.sizes[own] == 1 {
            continue;
        }
        let a = sums[own] / (c.sizes[own] - 1) as f64;
        let b = (0..k)
            .filter(|&m| m != own)
            .map(|m| sums[m] / c.sizes[m] as f64)
            .fold(f64::INFINITY, f64::min);
        let denom = a.max(b);
        if denom > 0.0 {
            total += (b - a) / denom;
        }
    }
    Ok(total / n as f64)
}

/// Between/within dispersion ratio; 1 when every cluster is a single point mass.
pub fn calinski_harabasz(x: &Matrix, labels: &[usize]) -> Result<f64> {
    let c = clusters(x, labels)?;
    let (n, k) = (x.rows(), c.sizes.len());
    let cent = centroids(x, &c);
    let mut mean = vec![0.0; x.cols()];
    for r in 0..n {
        for (m, v) in mean.iter_mut().zip(x.row(r)) {
            *m += v / n as f64;
        }
    }
    let between: f64 = cent
        .iter()
        .zip(&c.sizes)
        .map(|(ck, &nk)| nk as f64 * dist(ck, &mean).powi(2))
        .sum();
    let within: f64 = (0..n).map(|r| dist(x.row(r), &cent[c.ids[r]]).powi(2)).sum();
    if within == 0.0 {
        return Ok(1.0);
    }
    Ok(between * (n - k) as f64 / (within * (k - 1) as f64))
}

/// Mean over clusters of the worst scatter-to-separation ratio.
pub fn davies_bouldin(x: &Matrix, labels: &[usize]) -> Result<f64> {
    let c = clusters(x, labels)?;
    let k = c.sizes.len();
    let cent = centroids(x, &c);
    let mut scatter = vec![0.0; k];
    for r in 0..x.rows() {
        scatter[c.ids[r]] += dist(x.row(r), &cent[c.ids[r]]);
    }
    for (s, &nk) in scatter.iter_mut().zip(&c.sizes) {
        *s /= nk as f64;
    }
    let mut total = 0.0;
    for i in 0..k {
        let mut worst = 0.0f64;
        for j in 0..k {
            if i == j {
                continue;
            }
            let sep = dist(&cent[i], &cent[j]);
            // Coincident centroids are ignored.
            if sep > 0.0 {
                worst = worst.max((scatter[i] + scatter[j]) / sep);
            }
        }
        total += worst;
    }
    Ok(total / k as f64)
}

pub fn cluster_geometry(x: &Matrix, labels: &[usize]) -> Result<Geometry> {
    Ok(Geometry {
        silhouette: silhouette(x, labels)?,
        calinski_harabasz: calinski_harabasz(x, labels)?,
        davies_bouldin: davies_bouldin(x, labels)?,
    })
}
