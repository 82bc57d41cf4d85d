use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::DataError;
use crate::tensor::{seeded_rng, Tensor};

const fn rgb(r: u8, g: u8, b: u8) -> [f64; 3] {
    [r as f64 / 255.0, g as f64 / 255.0, b as f64 / 255.0]
}

/// Reference colors in sRGB, channel values in `[0, 1]`.
pub const PALETTE: [(&str, [f64; 3]); 10] = [
    ("black", rgb(0, 0, 0)),
    ("white", rgb(255, 255, 255)),
    ("red", rgb(255, 0, 0)),
    ("orange", rgb(255, 165, 0)),
    ("yellow", rgb(255, 255, 0)),
    ("green", rgb(0, 128, 0)),
    ("cyan", rgb(0, 255, 255)),
    ("blue", rgb(0, 0, 255)),
    ("purple", rgb(128, 0, 128)),
    ("gray", rgb(128, 128, 128)),
];

pub fn palette_name(i: usize) -> &'static str {
    PALETTE[i].0
}

/// Covariances whose smallest/largest eigenvalue ratio falls below this are
/// treated as singular.
const CONDITION_FLOOR: f64 = 1e-9;

/// Squared point-to-center distance used by k-means.
#[derive(Clone, Debug, PartialEq)]
pub enum Metric {
    Euclidean,
    /// `(x - c)ᵀ Σ⁻¹ (x - c)` with the stored inverse covariance.
    Mahalanobis(Matrix3<f64>),
}

impl Metric {
    pub fn dist2(&self, a: &[f64; 3], b: &[f64; 3]) -> f64 {
        let d = Vector3::new(a[0] - b[0], a[1] - b[1], a[2] - b[2]);
        match self {
            Metric::Euclidean => d.norm_squared(),
            Metric::Mahalanobis(inv) => (d.transpose() * inv * d)[0],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mcd {
    pub mean: [f64; 3],
    pub cov: Matrix3<f64>,
    pub det: f64,
}

fn mean_cov(points: &[[f64; 3]], idx: &[usize]) -> ([f64; 3], Matrix3<f64>) {
    let n = idx.len() as f64;
    let mut m = [0.0; 3];
    for &i in idx {
        for c in 0..3 {
            m[c] += points[i][c] / n;
        }
    }
    let mut cov = Matrix3::zeros();
    for &i in idx {
        let d = Vector3::new(points[i][0] - m[0], points[i][1] - m[1], points[i][2] - m[2]);
        cov += d * d.transpose();
    }
    (m, cov / (n - 1.0).max(1.0))
}

fn well_conditioned(cov: &Matrix3<f64>) -> bool {
    let ev = SymmetricEigen::new(*cov).eigenvalues;
    let (lo, hi) = (ev.min(), ev.max());
    hi > 0.0 && lo / hi > CONDITION_FLOOR
}

/// Minimum covariance determinant estimate over `h = ⌈h_frac·n⌉` points
/// by concentration steps from `starts` random elemental subsets. Returns
/// `None` when no start yields a non-singular covariance.
pub fn mcd_covariance(points: &[[f64; 3]], h_frac: f64, starts: usize, seed: u64) -> Option<Mcd> {
    let n = points.len();
    let h = ((h_frac * n as f64).ceil() as usize).clamp(4.min(n), n);
    if n < 4 {
        return None;
    }
    let mut rng = seeded_rng(seed, "dominant_color.mcd");
    let mut best: Option<Mcd> = None;
    for _ in 0..starts {
        // elemental start: p + 1 points, grown until non-singular
        let mut pool: Vec<usize> = (0..n).collect();
        let mut subset = Vec::with_capacity(h);
        let (mut m, mut cov);
        loop {
            let j = rng.random_range(subset.len()..n);
            pool.swap(subset.len(), j);
            subset.push(pool[subset.len()]);
            (m, cov) = mean_cov(points, &subset);
            if (subset.len() >= 4 && well_conditioned(&cov)) || subset.len() >= h {
                break;
            }
        }
        if !well_conditioned(&cov) {
            continue;
        }
        let mut det = cov.determinant();
        for _ in 0..100 {
            let Some(inv) = cov.try_inverse() else { break };
            let metric = Metric::Mahalanobis(inv);
            let mut order: Vec<(f64, usize)> = points.iter().enumerate().map(|(i, p)| (metric.dist2(p, &m), i)).collect();
            order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let idx: Vec<usize> = order[..h].iter().map(|&(_, i)| i).collect();
            let (m2, cov2) = mean_cov(points, &idx);
            let det2 = cov2.determinant();
            if !well_conditioned(&cov2) || det2 >= det * (1.0 - 1e-12) {
                if well_conditioned(&cov2) && det2 <= det {
                    (m, cov, det) = (m2, cov2, det2);
                }
                break;
            }
            (m, cov, det) = (m2, cov2, det2);
        }
        if best.as_ref().is_none_or(|b| det < b.det) {
            best = Some(Mcd { mean: m, cov, det });
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq)]
pub struct KMeans {
    pub init: Vec<[f64; 3]>,
    pub centers: Vec<[f64; 3]>,
    pub labels: Vec<usize>,
    pub counts: Vec<usize>,
    pub iterations: usize,
}

fn nearest(metric: &Metric, centers: &[[f64; 3]], p: &[f64; 3]) -> usize {
    let mut best = 0;
    let mut bd = f64::INFINITY;
    for (j, c) in centers.iter().enumerate() {
        let d = metric.dist2(p, c);
        if d < bd {
            bd = d;
            best = j;
        }
    }
    best
}

/// k-means++ seeding: the first center uniformly, the rest with probability
/// proportional to the squared distance to the nearest chosen center. If
/// every point already coincides with a center, the last one is repeated.
pub fn kmeans_pp_init(points: &[[f64; 3]], k: usize, metric: &Metric, rng: &mut impl Rng) -> Vec<[f64; 3]> {
    let mut centers = vec![points[rng.random_range(0..points.len())]];
    let mut d2: Vec<f64> = points.iter().map(|p| metric.dist2(p, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut r = rng.random::<f64>() * total;
            let mut pick = points.len() - 1;
            for (i, &d) in d2.iter().enumerate() {
                if r < d {
                    pick = i;
                    break;
                }
                r -= d;
            }
            points[pick]
        } else {
            *centers.last().expect("non-empty")
        };
        for (p, d) in points.iter().zip(d2.iter_mut()) {
            *d = d.min(metric.dist2(p, &next));
        }
        centers.push(next);
    }
    centers
}

/// Lloyd iterations from k-means++ seeds. Points go to the nearest center
/// (lowest index on ties); an empty cluster keeps its center. Stops when no
/// center moves more than `tol` (Euclidean) or after `max_iter` rounds.
pub fn kmeans(points: &[[f64; 3]], k: usize, metric: &Metric, seed: u64, max_iter: usize, tol: f64) -> KMeans {
    let mut rng = seeded_rng(seed, "dominant_color.kmeans");
    let init = kmeans_pp_init(points, k, metric, &mut rng);
    let mut centers = init.clone();
    let mut labels = vec![0; points.len()];
    let mut iterations = 0;
    for _ in 0..max_iter {
        iterations += 1;
        for (l, p) in labels.iter_mut().zip(points) {
            *l = nearest(metric, &centers, p);
        }
        let mut sums = vec![[0.0; 3]; k];
        let mut counts = vec![0usize; k];
        for (l, p) in labels.iter().zip(points) {
            counts[*l] += 1;
            for c in 0..3 {
                sums[*l][c] += p[c];
            }
        }
        let mut shift: f64 = 0.0;
        for j in 0..k {
            if counts[j] == 0 {
                continue;
            }
            let new = sums[j].map(|s| s / counts[j] as f64);
            shift = shift.max(Metric::Euclidean.dist2(&new, &centers[j]).sqrt());
            centers[j] = new;
        }
        if shift < tol {
            break;
        }
    }
    for (l, p) in labels.iter_mut().zip(points) {
        *l = nearest(metric, &centers, p);
    }
    let mut counts = vec![0; k];
    for &l in &labels {
        counts[l] += 1;
    }
    KMeans {
        init,
        centers,
        labels,
        counts,
        iterations,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColorOptions {
    pub k: usize,
    pub seed: u64,
    pub max_iter: usize,
    pub tol: f64,
    pub h_frac: f64,
    pub mcd_starts: usize,
}

impl ColorOptions {
    pub fn new(k: usize, seed: u64) -> Self {
        Self {
            k,
            seed,
            max_iter: 100,
            tol: 1e-6,
            h_frac: 0.75,
            mcd_starts: 20,
        }
    }
}

/// Result of the two-stage extraction.
#[derive(Clone, Debug, PartialEq)]
pub struct DominantColor {
    pub index: usize,
    /// Center of the largest cluster.
    pub intermediate: [f64; 3],
    /// False when the robust covariance was singular and Euclidean distance
    /// was used instead.
    pub mahalanobis: bool,
}

fn pixels(image: &Tensor) -> Result<Vec<[f64; 3]>, DataError> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(DataError::Invalid(format!("image {s:?} must be [3, H, W]")));
    }
    let plane = s[1] * s[2];
    let d = image.data();
    Ok((0..plane).map(|i| [d[i], d[plane + i], d[2 * plane + i]]).collect())
}

pub fn dominant_color_with(image: &Tensor, opts: &ColorOptions) -> Result<DominantColor, DataError> {
    if opts.k == 0 {
        return Err(DataError::Invalid("k must be at least 1".into()));
    }
    let px = pixels(image)?;
    let robust = mcd_covariance(&px, opts.h_frac, opts.mcd_starts, opts.seed)
        .and_then(|m| m.cov.try_inverse())
        .map(Metric::Mahalanobis);
    let mahalanobis = robust.is_some();
    let metric = robust.unwrap_or_else(|| {
        log::warn!("dominant_color: robust covariance is singular, falling back to Euclidean distance");
        Metric::Euclidean
    });
    let km = kmeans(&px, opts.k, &metric, opts.seed, opts.max_iter, opts.tol);
    let mut top = 0;
    for j in 1..km.counts.len() {
        if km.counts[j] > km.counts[top] {
            top = j;
        }
    }
    let center = km.centers[top];
    let index = nearest(&Metric::Euclidean, &PALETTE.map(|(_, c)| c), &center);
    Ok(DominantColor {
        index,
        intermediate: center,
        mahalanobis,
    })
}

/// Palette index of the image's dominant color.
pub fn dominant_color(image: &Tensor, k: usize, seed: u64) -> Result<usize, DataError> {
    Ok(dominant_color_with(image, &ColorOptions::new(k, seed))?.index)
}
