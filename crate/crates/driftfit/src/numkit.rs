//! Minimal dense numerical kernel: symmetric positive-definite solves with
//! diagonal-jitter retry, multivariate normal sampling, and seeded RNG streams.
//!
//! Every matrix this crate factors (regularized Gram matrices, second-moment
//! matrices) is SPD by construction, so Cholesky is the only factorization here.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_distr::{Distribution, StandardNormal};

use crate::{Error, Result};

/// Dense matrix of `f64`, row-major construction semantics.
pub type Matrix = DMatrix<f64>;
/// Dense vector of `f64`.
pub type Vector = DVector<f64>;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// A named, reproducible random stream.
///
/// Identical `(seed, stream)` pairs always produce the identical sample
/// sequence; distinct stream ids give statistically independent generators.
/// Streams form a tree: [`RngStream::derive`] hashes a salt into the stream id,
/// so concurrent tasks can each own a stream without coordination.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngStream {
    seed: u64,
    stream: u64,
}

impl RngStream {
    /// Root stream for a seed.
    pub fn new(seed: u64) -> Self {
        Self { seed, stream: 0 }
    }

    /// Stream with an explicit id (e.g. one per replication).
    pub fn with_stream(seed: u64, stream: u64) -> Self {
        Self { seed, stream }
    }

    /// Child stream obtained by hashing `salt` into this stream's id.
    pub fn derive(&self, salt: u64) -> Self {
        Self {
            seed: self.seed,
            stream: splitmix64(self.stream ^ splitmix64(salt ^ 0x5851_F42D_4C95_7F2D)),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    /// Instantiate the generator. The 32-byte ChaCha key is a splitmix64
    /// expansion of `(seed, stream)`, so the sequence depends on nothing else.
    pub fn rng(&self) -> ChaCha8Rng {
        let mut state = splitmix64(splitmix64(self.seed) ^ splitmix64(self.stream ^ 0xA076_1D64_78BD_642F));
        let mut key = [0u8; 32];
        for chunk in key.chunks_exact_mut(8) {
            state = splitmix64(state);
            chunk.copy_from_slice(&state.to_le_bytes());
        }
        ChaCha8Rng::from_seed(key)
    }
}

fn check_square_symmetric(a: &Matrix) -> Result<()> {
    if a.nrows() != a.ncols() {
        return Err(Error::DimensionMismatch {
            what: "solve_spd matrix",
            expected: a.nrows(),
            got: a.ncols(),
        });
    }
    let scale = 1.0 + a.amax();
    for i in 0..a.nrows() {
        for j in (i + 1)..a.ncols() {
            if (a[(i, j)] - a[(j, i)]).abs() > 1e-10 * scale {
                return Err(Error::InvalidData(format!(
                    "matrix not symmetric at ({i},{j}): {} vs {}",
                    a[(i, j)],
                    a[(j, i)]
                )));
            }
        }
    }
    Ok(())
}

/// Cholesky factorization with diagonal-jitter retry.
///
/// On failure, adds `1e-10 * trace(A)/dim` to the diagonal and retries,
/// doubling the jitter up to three times before giving up.
pub fn spd_cholesky(a: &Matrix) -> Result<Cholesky<f64, Dyn>> {
    if let Some(chol) = Cholesky::new(a.clone()) {
        return Ok(chol);
    }
    let dim = a.nrows().max(1);
    let base = 1e-10 * a.trace().abs().max(f64::MIN_POSITIVE) / dim as f64;
    let mut jitter = base;
    for _ in 0..4 {
        let mut aj = a.clone();
        for i in 0..dim {
            aj[(i, i)] += jitter;
        }
        if let Some(chol) = Cholesky::new(aj) {
            return Ok(chol);
        }
        jitter *= 2.0;
    }
    Err(Error::NotPositiveDefinite {
        context: "Cholesky failed after jitter retries",
    })
}

/// Solve `A x = b` for symmetric positive-definite `A`.
pub fn solve_spd(a: &Matrix, b: &Vector) -> Result<Vector> {
    check_square_symmetric(a)?;
    if a.nrows() != b.len() {
        return Err(Error::DimensionMismatch {
            what: "solve_spd rhs",
            expected: a.nrows(),
            got: b.len(),
        });
    }
    Ok(spd_cholesky(a)?.solve(b))
}

/// Draw `count` i.i.d. samples from `N(mean, cov)` via the Cholesky factor.
pub fn sample_mvnormal<R: Rng>(
    rng: &mut R,
    mean: &Vector,
    cov: &Matrix,
    count: usize,
) -> Result<Vec<Vector>> {
    check_square_symmetric(cov)?;
    if cov.nrows() != mean.len() {
        return Err(Error::DimensionMismatch {
            what: "sample_mvnormal mean",
            expected: cov.nrows(),
            got: mean.len(),
        });
    }
    let l = spd_cholesky(cov)?.l();
    let d = mean.len();
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let z = Vector::from_fn(d, |_, _| StandardNormal.sample(rng));
        out.push(mean + &l * z);
    }
    Ok(out)
}

/// Median pairwise Euclidean distance over row-major `points` (`n` rows of
/// dimension `d`), the usual bandwidth heuristic. Rows are subsampled evenly
/// down to 256 before the O(n²) pass. Falls back to 1.0 for degenerate data.
pub fn median_pairwise_distance(points: &[f64], n: usize, d: usize) -> f64 {
    debug_assert_eq!(points.len(), n * d);
    if n < 2 {
        return 1.0;
    }
    let cap = 256.min(n);
    let idx: Vec<usize> = (0..cap).map(|i| i * n / cap).collect();
    let mut dists = Vec::with_capacity(cap * (cap - 1) / 2);
    for (a, &i) in idx.iter().enumerate() {
        let xi = &points[i * d..(i + 1) * d];
        for &j in &idx[(a + 1)..] {
            let xj = &points[j * d..(j + 1) * d];
            let d2: f64 = xi.iter().zip(xj).map(|(u, v)| (u - v) * (u - v)).sum();
            dists.push(d2.sqrt());
        }
    }
    dists.sort_by(|a, b| a.total_cmp(b));
    let med = dists[dists.len() / 2];
    if med > 0.0 {
        med
    } else {
        1.0
    }
}
