//! Window masks over key positions.
//!
//! For a query with left boundary `l` and right boundary `r`, the discrete
//! mask is `(φ_lᵀ L) ⊙ (φ_rᵀ Lᵀ)` where `φ` is one-hot and `L` is the unit
//! upper-triangular matrix. The soft mask replaces the one-hot vectors with
//! pointer distributions and adds the swapped term so that a left boundary
//! falling right of the right boundary still yields a window:
//!
//! ```text
//! m̂ = (φ̂_lᵀ L) ⊙ (φ̂_rᵀ Lᵀ) + (φ̂_rᵀ L) ⊙ (φ̂_lᵀ Lᵀ)
//! ```
//!
//! Segment masks use the block matrix `J` (`J[i,j] = 1 iff i <= b·⌈j/b⌉`) in
//! place of `L`, so every position of a length-`b` segment shares one value.
//!
//! Products with `L`, `Lᵀ`, `J` and `Jᵀ` are evaluated as blocked prefix and
//! suffix sums ([`Tape::scan`]); the explicit matrices are kept for the
//! literal discrete mask and for cross-checking the scan route.
//!
//! Positions are 1-based throughout this module's public functions.

use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{ScanDir, Tape, Tensor, Var};

/// Tolerance for the row-sum check on boundary distributions.
pub const DISTRIBUTION_TOLERANCE: f64 = 1e-9;

/// Per-query left/right boundary distributions, `[m, n]` each.
#[derive(Clone, Debug, PartialEq)]
pub struct BoundaryScores {
    phi_left: Tensor,
    phi_right: Tensor,
}

impl BoundaryScores {
    pub fn new(phi_left: Tensor, phi_right: Tensor) -> Result<Self> {
        if phi_left.rank() != 2 || phi_left.shape() != phi_right.shape() {
            return Err(Error::shape(
                "boundary_scores",
                format!("{:?} vs {:?}", phi_left.shape(), phi_right.shape()),
            ));
        }
        for t in [&phi_left, &phi_right] {
            for i in 0..t.rows() {
                let row = t.row(i);
                let total: f64 = row.iter().sum();
                if row.iter().any(|&x| x < 0.0) || (total - 1.0).abs() > DISTRIBUTION_TOLERANCE {
                    return Err(Error::Config(format!(
                        "boundary row {i} is not a distribution (sum {total})"
                    )));
                }
            }
        }
        Ok(Self {
            phi_left,
            phi_right,
        })
    }

    pub fn phi_left(&self) -> &Tensor {
        &self.phi_left
    }

    pub fn phi_right(&self) -> &Tensor {
        &self.phi_right
    }

    pub fn queries(&self) -> usize {
        self.phi_left.shape()[0]
    }

    pub fn keys(&self) -> usize {
        self.phi_left.shape()[1]
    }

    /// Swaps the roles of the two boundaries.
    pub fn swapped(&self) -> Self {
        Self {
            phi_left: self.phi_right.clone(),
            phi_right: self.phi_left.clone(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskMode {
    Discrete,
    SoftToken,
    SoftSegment,
}

/// Window weights, one row per query and one column per key position.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskMatrix {
    values: Tensor,
    mode: MaskMode,
    segment_size: usize,
}

impl MaskMatrix {
    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn into_values(self) -> Tensor {
        self.values
    }

    pub fn mode(&self) -> MaskMode {
        self.mode
    }

    /// Meaningful only for [`MaskMode::SoftSegment`]; 1 otherwise.
    pub fn segment_size(&self) -> usize {
        self.segment_size
    }
}

/// `L` (unit upper-triangular) and `J` (segment block matrix) for one length.
#[derive(Clone, Debug, PartialEq)]
pub struct StructureMatrices {
    pub upper: Tensor,
    pub segment: Tensor,
    pub segment_size: usize,
}

impl StructureMatrices {
    pub fn len(&self) -> usize {
        self.upper.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

pub fn build_structure(n: usize, b: usize) -> Result<StructureMatrices> {
    if n == 0 {
        return Err(Error::Empty("build_structure"));
    }
    if b == 0 {
        return Err(Error::Config("segment size must be at least 1".into()));
    }
    let mut upper = Tensor::zeros(vec![n, n]);
    let mut segment = Tensor::zeros(vec![n, n]);
    for i in 1..=n {
        for j in 1..=n {
            let cell = (i - 1) * n + (j - 1);
            if i <= j {
                upper.data_mut()[cell] = 1.0;
            }
            if i <= b * j.div_ceil(b) {
                segment.data_mut()[cell] = 1.0;
            }
        }
    }
    Ok(StructureMatrices {
        upper,
        segment,
        segment_size: b,
    })
}

/// Structure matrices keyed by `(n, b)`, built on first request.
#[derive(Default)]
pub struct StructureCache {
    built: HashMap<(usize, usize), Arc<StructureMatrices>>,
}

impl StructureCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&mut self, n: usize, b: usize) -> Result<Arc<StructureMatrices>> {
        if let Some(s) = self.built.get(&(n, b)) {
            return Ok(Arc::clone(s));
        }
        let s = Arc::new(build_structure(n, b)?);
        self.built.insert((n, b), Arc::clone(&s));
        Ok(s)
    }

    pub fn len(&self) -> usize {
        self.built.len()
    }

    pub fn is_empty(&self) -> bool {
        self.built.is_empty()
    }
}

fn one_hot(k: usize, n: usize) -> Vec<f64> {
    let mut v = vec![0.0; n];
    v[k - 1] = 1.0;
    v
}

fn vec_mat(v: &[f64], m: &Tensor, transpose: bool) -> Vec<f64> {
    let n = v.len();
    (0..n)
        .map(|j| {
            (0..n)
                .map(|i| {
                    let cell = if transpose { j * n + i } else { i * n + j };
                    v[i] * m.data()[cell]
                })
                .sum()
        })
        .collect()
}

/// Discrete window row for 1-based boundaries `l`, `r`, computed literally as
/// `(φ_lᵀ L) ⊙ (φ_rᵀ Lᵀ)`. Ones on `[l, r]`; all zeros when `l > r`.
pub fn discrete_mask(l: usize, r: usize, n: usize) -> Result<Vec<f64>> {
    for (what, k) in [("left boundary", l), ("right boundary", r)] {
        if k == 0 || k > n {
            return Err(Error::IndexOutOfRange {
                what,
                index: k,
                bound: n,
            });
        }
    }
    let s = build_structure(n, 1)?;
    let f = vec_mat(&one_hot(l, n), &s.upper, false);
    let g = vec_mat(&one_hot(r, n), &s.upper, true);
    Ok(f.iter().zip(&g).map(|(a, b)| a * b).collect())
}

/// Discrete masks for a batch of queries, as a [`MaskMatrix`].
pub fn discrete_mask_matrix(bounds: &[(usize, usize)], n: usize) -> Result<MaskMatrix> {
    if bounds.is_empty() {
        return Err(Error::Empty("discrete_mask_matrix"));
    }
    let mut data = Vec::with_capacity(bounds.len() * n);
    for &(l, r) in bounds {
        data.extend(discrete_mask(l, r, n)?);
    }
    Ok(MaskMatrix {
        values: Tensor::new(vec![bounds.len(), n], data)?,
        mode: MaskMode::Discrete,
        segment_size: 1,
    })
}

/// Learned projections for the two pointer distributions.
#[derive(Clone, Copy, Debug)]
pub struct BoundaryParams {
    pub left_query: Var,
    pub left_key: Var,
    pub right_query: Var,
    pub right_key: Var,
}

/// `softmax(q·kᵀ·scale + bias)` over key positions, for `[m,e]`/`[n,e]` or
/// head-batched `[g,m,e]`/`[g,n,e]` inputs. `bias` carries causal and padding
/// exclusions.
pub fn pointer_distribution(
    tape: &mut Tape,
    q: Var,
    k: Var,
    scale: f64,
    bias: Option<Var>,
) -> Result<Var> {
    let logits = tape.matmul_nt(q, k)?;
    let mut logits = tape.scale(logits, scale)?;
    if let Some(b) = bias {
        logits = tape.add(logits, b)?;
    }
    tape.softmax_rows(logits)
}

/// Single-head boundary distributions for queries `q: [m,d]` over keys
/// `k: [n,d]`: `softmax((q W_L^Q)(k W_L^K)ᵀ/√d)` and the same with the right
/// projections. Returns `(φ̂_l, φ̂_r)`.
pub fn boundary_scores(
    tape: &mut Tape,
    q: Var,
    k: Var,
    params: &BoundaryParams,
    bias: Option<Var>,
) -> Result<(Var, Var)> {
    let d = *tape.shape(q).last().expect("rank >= 1");
    if tape.shape(k).last() != Some(&d) {
        return Err(Error::shape(
            "boundary_scores",
            format!("{:?} vs {:?}", tape.shape(q), tape.shape(k)),
        ));
    }
    let scale = 1.0 / (d as f64).sqrt();
    let ql = tape.matmul(q, params.left_query)?;
    let kl = tape.matmul(k, params.left_key)?;
    let left = pointer_distribution(tape, ql, kl, scale, bias)?;
    let qr = tape.matmul(q, params.right_query)?;
    let kr = tape.matmul(k, params.right_key)?;
    let right = pointer_distribution(tape, qr, kr, scale, bias)?;
    Ok((left, right))
}

/// Soft mask on the tape. `segment_size == 1` gives the token mask; larger
/// values give the segment mask. Works on any rank; positions are the last
/// axis.
pub fn soft_mask_on_tape(tape: &mut Tape, phi_left: Var, phi_right: Var, segment_size: usize) -> Result<Var> {
    if tape.shape(phi_left) != tape.shape(phi_right) {
        return Err(Error::shape(
            "soft_mask",
            format!("{:?} vs {:?}", tape.shape(phi_left), tape.shape(phi_right)),
        ));
    }
    let rightward_l = tape.scan(phi_left, ScanDir::Prefix, segment_size)?;
    let leftward_r = tape.scan(phi_right, ScanDir::Suffix, segment_size)?;
    let ordered = tape.mul(rightward_l, leftward_r)?;
    let rightward_r = tape.scan(phi_right, ScanDir::Prefix, segment_size)?;
    let leftward_l = tape.scan(phi_left, ScanDir::Suffix, segment_size)?;
    let swapped = tape.mul(rightward_r, leftward_l)?;
    tape.add(ordered, swapped)
}

/// Same quantity as [`soft_mask_on_tape`] but with explicit products against
/// the structure matrix (`L` or `J`), for `[m,n]` inputs.
pub fn soft_mask_by_matmul(tape: &mut Tape, phi_left: Var, phi_right: Var, structure: Var) -> Result<Var> {
    let structure_t = tape.transpose(structure)?;
    let f_l = tape.matmul(phi_left, structure)?;
    let g_r = tape.matmul(phi_right, structure_t)?;
    let ordered = tape.mul(f_l, g_r)?;
    let f_r = tape.matmul(phi_right, structure)?;
    let g_l = tape.matmul(phi_left, structure_t)?;
    let swapped = tape.mul(f_r, g_l)?;
    tape.add(ordered, swapped)
}

fn check_structure(bs: &BoundaryScores, s: &StructureMatrices) -> Result<()> {
    if s.len() != bs.keys() {
        return Err(Error::shape(
            "soft_mask",
            format!("structure side {} vs {} keys", s.len(), bs.keys()),
        ));
    }
    Ok(())
}

fn soft_mask_value(bs: &BoundaryScores, block: usize) -> Result<Tensor> {
    let mut tape = Tape::new();
    let l = tape.constant(bs.phi_left.clone());
    let r = tape.constant(bs.phi_right.clone());
    let m = soft_mask_on_tape(&mut tape, l, r, block)?;
    Ok(tape.value(m).clone())
}

/// Token-level soft mask `m̂` for every query.
pub fn soft_mask(bs: &BoundaryScores, s: &StructureMatrices) -> Result<MaskMatrix> {
    check_structure(bs, s)?;
    Ok(MaskMatrix {
        values: soft_mask_value(bs, 1)?,
        mode: MaskMode::SoftToken,
        segment_size: 1,
    })
}

/// Segment-level soft mask `m′` with the segment size carried by `s`.
pub fn segment_soft_mask(bs: &BoundaryScores, s: &StructureMatrices) -> Result<MaskMatrix> {
    check_structure(bs, s)?;
    Ok(MaskMatrix {
        values: soft_mask_value(bs, s.segment_size)?,
        mode: MaskMode::SoftSegment,
        segment_size: s.segment_size,
    })
}

/// Brute-force expectation of the discrete mask under independent boundary
/// draws: for each position `i`,
/// `Σ_a Σ_b φ̂_l[a] φ̂_r[b] (1[a≤i≤b] + 1[b≤i≤a])`. O(n³) per query; it shares
/// no code with the cumulative-sum route and serves as its reference.
pub fn expectation_oracle(bs: &BoundaryScores) -> MaskMatrix {
    let (m, n) = (bs.queries(), bs.keys());
    let mut out = vec![0.0; m * n];
    for q in 0..m {
        let pl = bs.phi_left.row(q);
        let pr = bs.phi_right.row(q);
        for i in 0..n {
            let mut e = 0.0;
            for a in 0..n {
                for b in 0..n {
                    let inside = u8::from(a <= i && i <= b) + u8::from(b <= i && i <= a);
                    if inside > 0 {
                        e += pl[a] * pr[b] * f64::from(inside);
                    }
                }
            }
            out[q * n + i] = e;
        }
    }
    MaskMatrix {
        values: Tensor::from_parts(vec![m, n], out),
        mode: MaskMode::SoftToken,
        segment_size: 1,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bs(l: &[f64], r: &[f64]) -> BoundaryScores {
        BoundaryScores::new(
            Tensor::new(vec![1, l.len()], l.to_vec()).unwrap(),
            Tensor::new(vec![1, r.len()], r.to_vec()).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn structure_matrices() {
        let s = build_structure(3, 1).unwrap();
        assert_eq!(s.upper.data(), &[1., 1., 1., 0., 1., 1., 0., 0., 1.]);
        assert_eq!(s.segment, s.upper);
        let s = build_structure(4, 2).unwrap();
        #[rustfmt::skip]
        let want = [
            1., 1., 1., 1.,
            1., 1., 1., 1.,
            0., 0., 1., 1.,
            0., 0., 1., 1.,
        ];
        assert_eq!(s.segment.data(), &want);
        assert!(build_structure(4, 0).is_err());
        assert!(build_structure(0, 1).is_err());
    }

    #[test]
    fn cache_reuses_matrices() {
        let mut cache = StructureCache::new();
        let a = cache.get(5, 2).unwrap();
        let b = cache.get(5, 2).unwrap();
        assert!(Arc::ptr_eq(&a, &b));
        assert_eq!(cache.len(), 1);
    }

    #[test]
    fn discrete_window() {
        assert_eq!(
            discrete_mask(3, 8, 10).unwrap(),
            vec![0., 0., 1., 1., 1., 1., 1., 1., 0., 0.]
        );
        assert_eq!(discrete_mask(4, 4, 6).unwrap(), vec![0., 0., 0., 1., 0., 0.]);
        assert_eq!(discrete_mask(5, 2, 6).unwrap(), vec![0.; 6]);
        assert!(discrete_mask(0, 2, 6).is_err());
        assert!(discrete_mask(1, 7, 6).is_err());
    }

    #[test]
    fn soft_mask_hand_cases() {
        let s3 = build_structure(3, 1).unwrap();
        let m = soft_mask(&bs(&[1., 0., 0.], &[0., 0., 1.]), &s3).unwrap();
        assert_eq!(m.values().data(), &[1., 1., 1.]);
        let m = soft_mask(&bs(&[0., 0., 1.], &[1., 0., 0.]), &s3).unwrap();
        assert_eq!(m.values().data(), &[1., 1., 1.]);
        let m = soft_mask(&bs(&[0., 1., 0.], &[0., 1., 0.]), &s3).unwrap();
        assert_eq!(m.values().data(), &[0., 2., 0.]);
        let s2 = build_structure(2, 1).unwrap();
        let m = soft_mask(&bs(&[0.5, 0.5], &[0.5, 0.5]), &s2).unwrap();
        assert_eq!(m.values().data(), &[1., 1.]);
        assert_eq!(m.mode(), MaskMode::SoftToken);
    }

    #[test]
    fn oracle_matches_point_masses() {
        let m = expectation_oracle(&bs(&[0., 1., 0., 0.], &[0., 0., 0., 1.]));
        assert_eq!(m.values().data(), discrete_mask(2, 4, 4).unwrap().as_slice());
        let m = expectation_oracle(&bs(&[0.5, 0.5], &[0.5, 0.5]));
        assert_eq!(m.values().data(), &[1., 1.]);
    }

    #[test]
    fn segment_mask_full_block_is_constant() {
        let l = [0.1, 0.2, 0.3, 0.4];
        let r = [0.4, 0.3, 0.2, 0.1];
        let s = build_structure(4, 4).unwrap();
        let m = segment_soft_mask(&bs(&l, &r), &s).unwrap();
        let v = m.values().data();
        assert!(v.iter().all(|&x| x == v[0]));
        assert_eq!(m.segment_size(), 4);
    }

    #[test]
    fn rejects_non_distributions_and_mismatched_structure() {
        let bad = BoundaryScores::new(
            Tensor::new(vec![1, 2], vec![0.7, 0.7]).unwrap(),
            Tensor::new(vec![1, 2], vec![0.5, 0.5]).unwrap(),
        );
        assert!(bad.is_err());
        let s = build_structure(3, 1).unwrap();
        assert!(soft_mask(&bs(&[0.5, 0.5], &[0.5, 0.5]), &s).is_err());
    }
}
