//! Offline K-means codebook over pooled visual frame vectors: k-means++
//! seeding, Lloyd iterations to an assignment fixpoint, empty clusters
//! re-seeded to the farthest point.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::numerics::Matrix;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Codebook {
    /// K x D centroid rows.
    pub centroids: Matrix,
    pub k: usize,
    /// Final sum of squared distances to assigned centroids.
    pub inertia: f64,
    pub seed: u64,
    pub iterations: usize,
    /// Inertia after each assign/update cycle; non-increasing.
    pub inertia_trace: Vec<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest centroid by Euclidean distance; ties break to the lowest index.
pub fn quantize(x: &[f64], cb: &Codebook) -> usize {
    assert_eq!(x.len(), cb.centroids.cols(), "quantize: dimension mismatch");
    let mut best = 0usize;
    let mut best_d = f64::INFINITY;
    for j in 0..cb.k {
        let d = sq_dist(x, cb.centroids.row(j));
        if d < best_d {
            best_d = d;
            best = j;
        }
    }
    best
}

pub fn quantize_frames(frames: &Matrix, cb: &Codebook) -> Vec<usize> {
    (0..frames.rows()).map(|t| quantize(frames.row(t), cb)).collect()
}

fn count_distinct_rows(frames: &Matrix) -> usize {
    let mut seen: Vec<&[f64]> = Vec::new();
    for t in 0..frames.rows() {
        let row = frames.row(t);
        if !seen.iter().any(|s| s == &row) {
            seen.push(row);
        }
    }
    seen.len()
}

/// Fit a codebook with `k` centroids. Deterministic given the seed.
pub fn kmeans_fit(frames: &Matrix, k: usize, max_iters: usize, seed: u64) -> Result<Codebook> {
    if k < 2 {
        return Err(CoreError::InvalidArg("kmeans: k must be >= 2".into()));
    }
    if frames.rows() < k {
        return Err(CoreError::InvalidArg(format!(
            "kmeans: {} frames for k = {k}",
            frames.rows()
        )));
    }
    frames.ensure_finite("kmeans input")?;
    if count_distinct_rows(frames) < k {
        return Err(CoreError::InvalidArg(format!(
            "kmeans: fewer than {k} distinct points"
        )));
    }

    let n = frames.rows();
    let d = frames.cols();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // k-means++ seeding
    let mut centroids = Matrix::zeros(k, d);
    let first = rng.random_range(0..n);
    centroids.row_mut(0).copy_from_slice(frames.row(first));
    let mut min_d: Vec<f64> = (0..n).map(|i| sq_dist(frames.row(i), centroids.row(0))).collect();
    for c in 1..k {
        let total: f64 = min_d.iter().sum();
        let chosen = if total <= 0.0 {
            // all remaining mass at chosen points; take the first unused distinct row
            (0..n).find(|&i| min_d[i] > 0.0).unwrap_or(0)
        } else {
            let mut threshold = rng.random_range(0.0..total);
            let mut pick = n - 1;
            for (i, &w) in min_d.iter().enumerate() {
                if threshold < w {
                    pick = i;
                    break;
                }
                threshold -= w;
            }
            pick
        };
        centroids.row_mut(c).copy_from_slice(frames.row(chosen));
        for i in 0..n {
            let dd = sq_dist(frames.row(i), centroids.row(c));
            if dd < min_d[i] {
                min_d[i] = dd;
            }
        }
    }

    let mut assign = vec![usize::MAX; n];
    let mut inertia_trace = Vec::new();
    let mut iterations = 0usize;
    for _iter in 0..max_iters.max(1) {
        iterations += 1;
        // assignment
        let mut changed = false;
        let mut inertia = 0.0;
        for i in 0..n {
            let mut best = 0usize;
            let mut best_d = f64::INFINITY;
            for j in 0..k {
                let dd = sq_dist(frames.row(i), centroids.row(j));
                if dd < best_d {
                    best_d = dd;
                    best = j;
                }
            }
            if assign[i] != best {
                assign[i] = best;
                changed = true;
            }
            inertia += best_d;
        }
        inertia_trace.push(inertia);
        if !changed && inertia_trace.len() > 1 {
            break;
        }
        // update
        let mut sums = Matrix::zeros(k, d);
        let mut counts = vec![0usize; k];
        for i in 0..n {
            counts[assign[i]] += 1;
            for (s, v) in sums.row_mut(assign[i]).iter_mut().zip(frames.row(i)) {
                *s += v;
            }
        }
        for j in 0..k {
            if counts[j] > 0 {
                let inv = 1.0 / counts[j] as f64;
                for (c, s) in centroids.row_mut(j).iter_mut().zip(sums.row(j)) {
                    *c = s * inv;
                }
            } else {
                // re-seed an empty cluster to the point farthest from its centroid
                let mut far = 0usize;
                let mut far_d = -1.0;
                for i in 0..n {
                    let dd = sq_dist(frames.row(i), centroids.row(assign[i]));
                    if dd > far_d {
                        far_d = dd;
                        far = i;
                    }
                }
                centroids.row_mut(j).copy_from_slice(frames.row(far));
                assign[far] = j;
            }
        }
    }

    let inertia = *inertia_trace.last().expect("at least one cycle");
    Ok(Codebook { centroids, k, inertia, seed, iterations, inertia_trace })
}

const CODEBOOK_MAGIC: &[u8; 4] = b"AVCB";
const CODEBOOK_VERSION: u32 = 1;

impl Codebook {
    /// Binary layout: magic "AVCB", version u32, K u32, D u32, seed u64,
    /// iterations u32, then K*D little-endian f64 centroid values.
    pub fn write_binary<W: std::io::Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(CODEBOOK_MAGIC)?;
        w.write_all(&CODEBOOK_VERSION.to_le_bytes())?;
        w.write_all(&(self.k as u32).to_le_bytes())?;
        w.write_all(&(self.centroids.cols() as u32).to_le_bytes())?;
        w.write_all(&self.seed.to_le_bytes())?;
        w.write_all(&(self.iterations as u32).to_le_bytes())?;
        for v in self.centroids.as_slice() {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_binary<R: std::io::Read>(r: &mut R) -> Result<Codebook> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CODEBOOK_MAGIC {
            return Err(CoreError::Format("codebook: bad magic".into()));
        }
        let mut u32buf = [0u8; 4];
        let mut u64buf = [0u8; 8];
        r.read_exact(&mut u32buf)?;
        let version = u32::from_le_bytes(u32buf);
        if version != CODEBOOK_VERSION {
            return Err(CoreError::Format(format!("codebook: unsupported version {version}")));
        }
        r.read_exact(&mut u32buf)?;
        let k = u32::from_le_bytes(u32buf) as usize;
        r.read_exact(&mut u32buf)?;
        let d = u32::from_le_bytes(u32buf) as usize;
        r.read_exact(&mut u64buf)?;
        let seed = u64::from_le_bytes(u64buf);
        r.read_exact(&mut u32buf)?;
        let iterations = u32::from_le_bytes(u32buf) as usize;
        let mut data = Vec::with_capacity(k * d);
        for _ in 0..k * d {
            r.read_exact(&mut u64buf)?;
            data.push(f64::from_le_bytes(u64buf));
        }
        let centroids = Matrix::from_vec(k, d, data);
        Ok(Codebook { centroids, k, inertia: f64::NAN, seed, iterations, inertia_trace: Vec::new() })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_binary(&mut f)
    }

    pub fn load(path: &std::path::Path) -> Result<Codebook> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_binary(&mut f)
    }

    /// Human-readable export: header line then one centroid per line.
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "k={} d={} seed={} iterations={} inertia={}\n",
            self.k,
            self.centroids.cols(),
            self.seed,
            self.iterations,
            self.inertia
        );
        for j in 0..self.k {
            let row: Vec<String> = self.centroids.row(j).iter().map(|v| v.to_string()).collect();
            s.push_str(&row.join(" "));
            s.push('\n');
        }
        s
    }
}
