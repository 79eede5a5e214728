//! Bit-packed binary codes, popcount Hamming search, and the exact
//! identities connecting Hamming distance to inner products and cosines.
//!
//! Codes store +1 as bit 1 and -1 as bit 0, packed little-endian into u64
//! words: bit `j` of item `i` is `(words[i][j/64] >> (j % 64)) & 1`. Padding
//! bits past `b` are always zero.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::matrix::{dot, norm, Matrix};
use crate::{Error, Result};

/// Sign with the convention `sgn(0) = -1`: positive values map to +1,
/// everything else to -1.
#[inline]
pub fn sign(z: f64) -> f64 {
    if z > 0.0 {
        1.0
    } else {
        -1.0
    }
}

/// Bit-packed +-1 codes for `n` items of `b` bits each.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HashCodeMatrix {
    n: usize,
    bits: usize,
    words_per_item: usize,
    words: Vec<u64>,
}

impl HashCodeMatrix {
    pub fn new(n: usize, bits: usize) -> Result<Self> {
        if n == 0 || bits == 0 {
            return Err(Error::Config(format!(
                "code matrix needs positive dimensions, got n={n}, b={bits}"
            )));
        }
        let words_per_item = bits.div_ceil(64);
        Ok(HashCodeMatrix {
            n,
            bits,
            words_per_item,
            words: vec![0; n * words_per_item],
        })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn bits(&self) -> usize {
        self.bits
    }

    pub fn words_per_item(&self) -> usize {
        self.words_per_item
    }

    /// Packed words of one item's code.
    pub fn item(&self, i: usize) -> &[u64] {
        &self.words[i * self.words_per_item..(i + 1) * self.words_per_item]
    }

    pub fn item_mut(&mut self, i: usize) -> &mut [u64] {
        &mut self.words[i * self.words_per_item..(i + 1) * self.words_per_item]
    }

    pub fn set_bit(&mut self, i: usize, j: usize, value: bool) {
        debug_assert!(j < self.bits);
        let w = &mut self.item_mut(i)[j / 64];
        if value {
            *w |= 1u64 << (j % 64);
        } else {
            *w &= !(1u64 << (j % 64));
        }
    }

    pub fn bit(&self, i: usize, j: usize) -> bool {
        (self.item(i)[j / 64] >> (j % 64)) & 1 == 1
    }

    /// Unpacks one item to its +-1 vector.
    pub fn unpack(&self, i: usize) -> Vec<f64> {
        (0..self.bits)
            .map(|j| if self.bit(i, j) { 1.0 } else { -1.0 })
            .collect()
    }
}

/// Binarizes embeddings by sign: bit `j` of item `i` is 1 iff `u_ij > 0`;
/// exactly zero maps to -1.
pub fn binarize(u: &Matrix) -> Result<HashCodeMatrix> {
    let mut codes = HashCodeMatrix::new(u.rows(), u.cols())?;
    for i in 0..u.rows() {
        for (j, &value) in u.row(i).iter().enumerate() {
            if value > 0.0 {
                codes.set_bit(i, j, true);
            }
        }
    }
    Ok(codes)
}

fn last_word_mask(bits: usize) -> u64 {
    let rem = bits % 64;
    if rem == 0 {
        u64::MAX
    } else {
        (1u64 << rem) - 1
    }
}

/// Hamming distance between two packed code rows of `bits` bits.
pub fn hamming(a: &[u64], b: &[u64], bits: usize) -> Result<u32> {
    if a.len() != b.len() || a.len() != bits.div_ceil(64) {
        return Err(Error::Shape(format!(
            "code rows of {} and {} words do not both hold {bits} bits",
            a.len(),
            b.len()
        )));
    }
    Ok(hamming_unchecked(a, b, bits))
}

#[inline]
fn hamming_unchecked(a: &[u64], b: &[u64], bits: usize) -> u32 {
    let last = a.len() - 1;
    let mut total = 0u32;
    for w in 0..last {
        total += (a[w] ^ b[w]).count_ones();
    }
    total + ((a[last] ^ b[last]) & last_word_mask(bits)).count_ones()
}

/// One search hit: database index and Hamming distance.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Neighbor {
    pub index: usize,
    pub distance: u32,
}

/// Search results ordered by (distance, index) ascending.
pub type RankedResult = Vec<Neighbor>;

/// Exact linear scan returning the `r` nearest codes; ties break toward the
/// smaller database index. Asking for more than `n` results returns all `n`.
pub fn search(db: &HashCodeMatrix, query: &[u64], r: usize) -> Result<RankedResult> {
    if query.len() != db.words_per_item {
        return Err(Error::Shape(format!(
            "query has {} words, database rows have {}",
            query.len(),
            db.words_per_item
        )));
    }
    let mut hits: Vec<Neighbor> = (0..db.n)
        .map(|i| Neighbor {
            index: i,
            distance: hamming_unchecked(db.item(i), query, db.bits),
        })
        .collect();
    hits.sort_unstable_by_key(|h| (h.distance, h.index));
    hits.truncate(r);
    Ok(hits)
}

/// Maximum deviations observed while checking the two Hamming identities
/// `dist = (b - <h, h'>) / 2` (exact in integers) and
/// `dist = (b/2)(1 - cos(h, h'))`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IdentityReport {
    pub pairs_checked: usize,
    /// Worst |2*dist - (b - <h,h'>)|; must be 0.
    pub max_inner_deviation: i64,
    /// Worst |dist - (b/2)(1 - cos)|.
    pub max_cosine_deviation: f64,
}

impl IdentityReport {
    pub fn holds(&self) -> bool {
        self.max_inner_deviation == 0 && self.max_cosine_deviation <= 1e-9
    }
}

fn check_identity_pair(codes: &HashCodeMatrix, i: usize, j: usize, report: &mut IdentityReport) {
    let b = codes.bits;
    let dist = hamming_unchecked(codes.item(i), codes.item(j), b);

    // Independent route: unpack to +-1 and take the real inner product.
    let hi = codes.unpack(i);
    let hj = codes.unpack(j);
    let inner = dot(&hi, &hj);

    let lhs = 2 * i64::from(dist);
    let rhs = b as i64 - inner as i64;
    report.max_inner_deviation = report.max_inner_deviation.max((lhs - rhs).abs());

    let cos = inner / (norm(&hi) * norm(&hj));
    let via_cos = (b as f64 / 2.0) * (1.0 - cos);
    report.max_cosine_deviation = report
        .max_cosine_deviation
        .max((f64::from(dist) - via_cos).abs());
    report.pairs_checked += 1;
}

/// Checks the Hamming identities on randomly sampled pairs of rows.
pub fn verify_identities(
    codes: &HashCodeMatrix,
    sample_pairs: usize,
    seed: u64,
) -> Result<IdentityReport> {
    if codes.n < 2 {
        return Err(Error::Config(
            "identity verification needs at least two codes".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = IdentityReport {
        pairs_checked: 0,
        max_inner_deviation: 0,
        max_cosine_deviation: 0.0,
    };
    for _ in 0..sample_pairs {
        let i = rng.random_range(0..codes.n);
        let j = rng.random_range(0..codes.n);
        check_identity_pair(codes, i, j, &mut report);
    }
    Ok(report)
}

/// Checks the identities over every ordered pair of rows, including
/// self-pairs. For `b <= 8` combined with [`all_codes`] this covers the full
/// code space.
pub fn verify_identities_exhaustive(codes: &HashCodeMatrix) -> IdentityReport {
    let mut report = IdentityReport {
        pairs_checked: 0,
        max_inner_deviation: 0,
        max_cosine_deviation: 0.0,
    };
    for i in 0..codes.n {
        for j in 0..codes.n {
            check_identity_pair(codes, i, j, &mut report);
        }
    }
    report
}

/// Enumerates all `2^bits` codes (bits <= 16 to keep this enumerable).
pub fn all_codes(bits: usize) -> Result<HashCodeMatrix> {
    if bits == 0 || bits > 16 {
        return Err(Error::Config(format!(
            "exhaustive code enumeration supports 1..=16 bits, got {bits}"
        )));
    }
    let n = 1usize << bits;
    let mut codes = HashCodeMatrix::new(n, bits)?;
    for (i, value) in (0..n as u64).enumerate() {
        codes.item_mut(i)[0] = value;
    }
    Ok(codes)
}

/// Per-item quantization-bound measurements.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundRow {
    /// `||u - sgn(u)||^2`
    pub itq_error: f64,
    /// `2b - 2b cos(|u|, 1)`
    pub bound_rhs: f64,
    /// `|| |u| - 1 ||^2`
    pub identity_lhs: f64,
    /// `||u||^2 + b - 2 sqrt(b) ||u|| cos(|u|, 1)`
    pub exact_rhs: f64,
    /// True when the claimed bound fails: `itq_error > bound_rhs + 1e-9`.
    pub violated: bool,
}

/// Bound measurements for a whole embedding matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundReport {
    pub rows: Vec<BoundRow>,
}

impl BoundReport {
    pub fn violations(&self) -> usize {
        self.rows.iter().filter(|r| r.violated).count()
    }

    pub fn violation_rate(&self) -> f64 {
        if self.rows.is_empty() {
            0.0
        } else {
            self.violations() as f64 / self.rows.len() as f64
        }
    }
}

/// Measures, per row, the ITQ quantization error against the claimed cosine
/// bound, and enforces the two identities that hold exactly:
/// `||u - sgn(u)||^2 = || |u| - 1 ||^2` and its norm-expanded form.
///
/// The bound itself is only guaranteed on the `||u||^2 = b` sphere; interior
/// points can violate it, so violations are measured and reported rather
/// than treated as errors.
pub fn quantization_bound_report(u: &Matrix) -> Result<BoundReport> {
    let b = u.cols() as f64;
    let mut rows = Vec::with_capacity(u.rows());
    for i in 0..u.rows() {
        let row = u.row(i);
        let itq_error: f64 = row.iter().map(|&x| (x - sign(x)) * (x - sign(x))).sum();
        let identity_lhs: f64 = row.iter().map(|&x| (x.abs() - 1.0) * (x.abs() - 1.0)).sum();
        let nu = norm(row);
        let cos = {
            let abs_sum: f64 = row.iter().map(|x| x.abs()).sum();
            (abs_sum / (nu.max(crate::losses::NORM_EPSILON) * b.sqrt())).clamp(-1.0, 1.0)
        };
        let bound_rhs = 2.0 * b - 2.0 * b * cos;
        let exact_rhs = nu * nu + b - 2.0 * b.sqrt() * nu * cos;

        if (itq_error - identity_lhs).abs() > 1e-9 {
            return Err(Error::Verification(format!(
                "row {i}: ||u - sgn(u)||^2 = {itq_error} but || |u| - 1 ||^2 = {identity_lhs}"
            )));
        }
        if (identity_lhs - exact_rhs).abs() > 1e-9 {
            return Err(Error::Verification(format!(
                "row {i}: || |u| - 1 ||^2 = {identity_lhs} but norm expansion gives {exact_rhs}"
            )));
        }

        rows.push(BoundRow {
            itq_error,
            bound_rhs,
            identity_lhs,
            exact_rhs,
            violated: itq_error > bound_rhs + 1e-9,
        });
    }
    Ok(BoundReport { rows })
}

/// Samples `n` embeddings uniformly from the open box `(-1, 1)^bits`.
pub fn sample_interior_embeddings(n: usize, bits: usize, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = Matrix::zeros(n, bits);
    for v in m.as_mut_slice() {
        *v = rng.random_range(-1.0..1.0);
    }
    m
}

/// All `2^bits` sign vertices for small `bits`, otherwise `limit` sampled
/// vertices; rows are +-1 valued.
pub fn sample_vertex_embeddings(bits: usize, limit: usize, seed: u64) -> Matrix {
    if bits <= 16 && (1usize << bits) <= limit {
        let n = 1usize << bits;
        let mut m = Matrix::zeros(n, bits);
        for i in 0..n {
            for j in 0..bits {
                let v = if (i >> j) & 1 == 1 { 1.0 } else { -1.0 };
                m.set(i, j, v);
            }
        }
        m
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = Matrix::zeros(limit, bits);
        for v in m.as_mut_slice() {
            *v = if rng.random::<bool>() { 1.0 } else { -1.0 };
        }
        m
    }
}

// --- code file I/O ---------------------------------------------------------
//
// Binary format, all little-endian:
//   magic "CHNB", u32 version = 1, u32 n, u32 b,
//   then n * ceil(b/64) u64 words.

const CODE_MAGIC: &[u8; 4] = b"CHNB";
const CODE_VERSION: u32 = 1;

impl HashCodeMatrix {
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path)?;
        let mut out = BufWriter::new(file);
        out.write_all(CODE_MAGIC)?;
        out.write_all(&CODE_VERSION.to_le_bytes())?;
        out.write_all(&(self.n as u32).to_le_bytes())?;
        out.write_all(&(self.bits as u32).to_le_bytes())?;
        for w in &self.words {
            out.write_all(&w.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = crate::error::open_file(path)?;
        Self::read_from(BufReader::new(file))
    }

    pub fn read_from(mut reader: impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        reader
            .read_exact(&mut magic)
            .map_err(|_| Error::parse(1, "truncated code file header"))?;
        if &magic != CODE_MAGIC {
            return Err(Error::parse(1, "bad magic, expected 'CHNB'"));
        }
        let mut u32_buf = [0u8; 4];
        reader
            .read_exact(&mut u32_buf)
            .map_err(|_| Error::parse(1, "truncated version field"))?;
        let version = u32::from_le_bytes(u32_buf);
        if version != CODE_VERSION {
            return Err(Error::parse(1, format!("unsupported version {version}")));
        }
        reader
            .read_exact(&mut u32_buf)
            .map_err(|_| Error::parse(1, "truncated item count"))?;
        let n = u32::from_le_bytes(u32_buf) as usize;
        reader
            .read_exact(&mut u32_buf)
            .map_err(|_| Error::parse(1, "truncated bit count"))?;
        let bits = u32::from_le_bytes(u32_buf) as usize;

        let mut codes = HashCodeMatrix::new(n, bits)?;
        let mut u64_buf = [0u8; 8];
        let mask = last_word_mask(bits);
        let wpi = codes.words_per_item;
        for idx in 0..n * wpi {
            reader
                .read_exact(&mut u64_buf)
                .map_err(|_| Error::parse(1, "truncated code words"))?;
            let mut word = u64::from_le_bytes(u64_buf);
            if idx % wpi == wpi - 1 && word & !mask != 0 {
                return Err(Error::parse(1, "nonzero padding bits"));
            }
            if idx % wpi == wpi - 1 {
                word &= mask;
            }
            codes.words[idx] = word;
        }
        let mut extra = [0u8; 1];
        if reader.read(&mut extra)? != 0 {
            return Err(Error::parse(1, "trailing bytes after code words"));
        }
        Ok(codes)
    }
}
