//! Exact rate bounds for distributed coding of two correlated finite sources.
//!
//! The codec in this crate encodes every view independently and decodes them
//! jointly. For two discrete memoryless sources that setup has a classical
//! theory: the Slepian–Wolf theorem gives the exact achievable region for
//! lossless coding, and the Berger–Tung bounds bracket the lossy region via
//! auxiliary variables. This module evaluates those quantities *exactly* (by
//! direct enumeration, in bits) for small alphabets, so the distributed
//! premise can be sanity-checked numerically at toy scale.
//!
//! Everything here is plain `f64`: the quantities are entropies of explicit
//! probability tables, not learned tensors, and the tolerances below assume
//! double precision. Only specific points are evaluated — the module never
//! optimizes over auxiliary channels to trace a frontier.

use ndarray::{Array1, Array2, Array4, ArrayView2, ArrayView4, Axis};

use crate::error::{Error, Result};

/// Tolerance for "sums to one" checks on probability tables.
pub const PMF_TOL: f64 = 1e-12;
/// Slack applied to rate inequalities and identity checks: entropies are
/// accumulated in double precision, so equalities hold far tighter than this.
pub const RATE_TOL: f64 = 1e-9;
/// Largest alphabet per variable; keeps every computation in the exact
/// enumeration regime (the induced four-way joint stays enumerable).
pub const MAX_ALPHABET: usize = 64;

/// `-p log2 p` with the `0 log 0 = 0` convention.
fn entropy_term(p: f64) -> f64 {
    if p > 0.0 {
        -p * p.log2()
    } else {
        0.0
    }
}

fn entropy_of<'a, I: IntoIterator<Item = &'a f64>>(probs: I) -> f64 {
    probs.into_iter().map(|&p| entropy_term(p)).sum()
}

fn check_alphabet(what: &str, n: usize) -> Result<()> {
    if n == 0 || n > MAX_ALPHABET {
        return Err(Error::Schema(format!(
            "{what}: alphabet size {n} outside 1..={MAX_ALPHABET}"
        )));
    }
    Ok(())
}

fn check_distribution<'a, I: IntoIterator<Item = &'a f64>>(what: &str, probs: I) -> Result<()> {
    let mut sum = 0.0;
    for &p in probs {
        if !p.is_finite() || p < 0.0 {
            return Err(Error::Schema(format!("{what}: entry {p} is not a probability")));
        }
        sum += p;
    }
    if (sum - 1.0).abs() > PMF_TOL {
        return Err(Error::Schema(format!(
            "{what}: probabilities sum to {sum}, expected 1 within {PMF_TOL:e}"
        )));
    }
    Ok(())
}

/// Joint probability mass function of two finite sources, `p[x1, x2]`.
#[derive(Debug, Clone, PartialEq)]
pub struct JointPmf {
    p: Array2<f64>,
}

impl JointPmf {
    /// Validates non-negativity, normalization within [`PMF_TOL`] and the
    /// [`MAX_ALPHABET`] bound on both axes.
    pub fn new(p: Array2<f64>) -> Result<Self> {
        check_alphabet("joint pmf rows", p.nrows())?;
        check_alphabet("joint pmf cols", p.ncols())?;
        check_distribution("joint pmf", p.iter())?;
        Ok(Self { p })
    }

    /// Doubly symmetric binary source: a uniform bit observed through a
    /// binary symmetric channel with the given crossover probability.
    pub fn doubly_symmetric_binary(crossover: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&crossover) {
            return Err(Error::Schema(format!(
                "crossover probability {crossover} outside [0, 1]"
            )));
        }
        let same = (1.0 - crossover) / 2.0;
        let diff = crossover / 2.0;
        Self::new(ndarray::arr2(&[[same, diff], [diff, same]]))
    }

    pub fn n1(&self) -> usize {
        self.p.nrows()
    }

    pub fn n2(&self) -> usize {
        self.p.ncols()
    }

    pub fn p(&self) -> ArrayView2<'_, f64> {
        self.p.view()
    }

    /// Marginal distribution of the first source.
    pub fn marginal1(&self) -> Array1<f64> {
        self.p.sum_axis(Axis(1))
    }

    /// Marginal distribution of the second source.
    pub fn marginal2(&self) -> Array1<f64> {
        self.p.sum_axis(Axis(0))
    }

    /// Joint entropy `H(X1, X2)` in bits, by direct summation.
    pub fn entropy(&self) -> f64 {
        entropy_of(self.p.iter())
    }
}

/// The corner of the lossless separate-encoding region: the three bounds
/// `R1 >= H(X1|X2)`, `R2 >= H(X2|X1)`, `R1 + R2 >= H(X1, X2)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SwCorner {
    /// `H(X1|X2)` in bits: the least rate for source 1 when source 2 is
    /// delivered losslessly.
    pub h_x1_given_x2: f64,
    /// `H(X2|X1)` in bits.
    pub h_x2_given_x1: f64,
    /// `H(X1, X2)` in bits: the least achievable rate sum.
    pub h_joint: f64,
}

impl SwCorner {
    /// True iff `(r1, r2)` satisfies all three region inequalities within
    /// [`RATE_TOL`] slack. Rates are expected to be non-negative.
    pub fn admits(&self, r1: f64, r2: f64) -> bool {
        r1 >= self.h_x1_given_x2 - RATE_TOL
            && r2 >= self.h_x2_given_x1 - RATE_TOL
            && r1 + r2 >= self.h_joint - RATE_TOL
    }
}

/// Exact Slepian–Wolf corner of a joint pmf, by direct summation with the
/// `0 log 0 = 0` convention.
pub fn sw_corner(pmf: &JointPmf) -> SwCorner {
    let m1 = pmf.marginal1();
    let m2 = pmf.marginal2();
    let mut h_x1_given_x2 = 0.0;
    let mut h_x2_given_x1 = 0.0;
    let mut h_joint = 0.0;
    for x1 in 0..pmf.n1() {
        for x2 in 0..pmf.n2() {
            let p = pmf.p[[x1, x2]];
            if p > 0.0 {
                h_joint += entropy_term(p);
                h_x1_given_x2 += p * (m2[x2] / p).log2();
                h_x2_given_x1 += p * (m1[x1] / p).log2();
            }
        }
    }
    SwCorner {
        h_x1_given_x2,
        h_x2_given_x1,
        h_joint,
    }
}

/// True iff `(r1, r2)` is inside the lossless separate-encoding region of
/// `pmf`, within [`RATE_TOL`] slack.
pub fn sw_admissible(r1: f64, r2: f64, pmf: &JointPmf) -> bool {
    sw_corner(pmf).admits(r1, r2)
}

/// Auxiliary description of a lossy distributed code point: per-source
/// test channels `p(u_j | x_j)`, joint reconstruction maps on `U1 x U2`,
/// and per-source distortion tables.
///
/// The induced joint `p(x1, x2) p(u1|x1) p(u2|x2)` satisfies the chain
/// `U1 - X1 - X2 - U2` by construction, which is exactly the inner-bound
/// regime of [`bt_inner`].
#[derive(Debug, Clone, PartialEq)]
pub struct AuxChannels {
    /// Row-stochastic `|X1| x |U1|` channel `p(u1 | x1)`.
    ch1: Array2<f64>,
    /// Row-stochastic `|X2| x |U2|` channel `p(u2 | x2)`.
    ch2: Array2<f64>,
    /// Reconstruction of source 1 from both descriptions: `|U1| x |U2|`
    /// table of column indices into `dist1`.
    recon1: Array2<usize>,
    /// Reconstruction of source 2 from both descriptions.
    recon2: Array2<usize>,
    /// Distortion table `d1[x1, xhat1]` for source 1.
    dist1: Array2<f64>,
    /// Distortion table `d2[x2, xhat2]` for source 2.
    dist2: Array2<f64>,
}

impl AuxChannels {
    pub fn new(
        ch1: Array2<f64>,
        ch2: Array2<f64>,
        recon1: Array2<usize>,
        recon2: Array2<usize>,
        dist1: Array2<f64>,
        dist2: Array2<f64>,
    ) -> Result<Self> {
        for (what, ch) in [("channel 1", &ch1), ("channel 2", &ch2)] {
            check_alphabet(what, ch.nrows())?;
            check_alphabet(what, ch.ncols())?;
            for (i, row) in ch.rows().into_iter().enumerate() {
                check_distribution(&format!("{what} row {i}"), row.iter())?;
            }
        }
        let u_shape = (ch1.ncols(), ch2.ncols());
        for (what, recon) in [("reconstruction 1", &recon1), ("reconstruction 2", &recon2)] {
            if recon.dim() != u_shape {
                return Err(Error::Shape(format!(
                    "{what}: map shape {:?} does not match description alphabets {:?}",
                    recon.dim(),
                    u_shape
                )));
            }
        }
        for (what, recon, dist, src_rows) in [
            ("source 1", &recon1, &dist1, ch1.nrows()),
            ("source 2", &recon2, &dist2, ch2.nrows()),
        ] {
            if dist.nrows() != src_rows {
                return Err(Error::Shape(format!(
                    "{what} distortion: {} rows for a {src_rows}-letter source",
                    dist.nrows()
                )));
            }
            if dist.ncols() == 0 {
                return Err(Error::Schema(format!(
                    "{what} distortion: empty reconstruction alphabet"
                )));
            }
            if let Some(&bad) = recon.iter().find(|&&r| r >= dist.ncols()) {
                return Err(Error::Schema(format!(
                    "{what} reconstruction index {bad} outside alphabet of {}",
                    dist.ncols()
                )));
            }
            if dist.iter().any(|d| !d.is_finite()) {
                return Err(Error::Schema(format!("{what} distortion has non-finite entries")));
            }
        }
        Ok(Self {
            ch1,
            ch2,
            recon1,
            recon2,
            dist1,
            dist2,
        })
    }

    /// Noiseless descriptions `U_j = X_j` with Hamming distortion: each
    /// decoder copies its own description and is charged 1 per mismatch.
    pub fn identity_hamming(n1: usize, n2: usize) -> Result<Self> {
        let hamming = |n: usize| Array2::from_shape_fn((n, n), |(a, b)| f64::from(u8::from(a != b)));
        Self::new(
            Array2::eye(n1),
            Array2::eye(n2),
            Array2::from_shape_fn((n1, n2), |(u1, _)| u1),
            Array2::from_shape_fn((n1, n2), |(_, u2)| u2),
            hamming(n1),
            hamming(n2),
        )
    }

    pub fn u1_len(&self) -> usize {
        self.ch1.ncols()
    }

    pub fn u2_len(&self) -> usize {
        self.ch2.ncols()
    }

    fn check_source(&self, pmf: &JointPmf) -> Result<()> {
        if self.ch1.nrows() != pmf.n1() || self.ch2.nrows() != pmf.n2() {
            return Err(Error::Shape(format!(
                "channels describe a {}x{} source but the pmf is {}x{}",
                self.ch1.nrows(),
                self.ch2.nrows(),
                pmf.n1(),
                pmf.n2()
            )));
        }
        Ok(())
    }
}

/// One evaluated point of the lossy inner bound: the three rate floors and
/// the expected distortions delivered by the reconstruction maps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BtInnerPoint {
    /// `I(X1, X2; U1 | U2)` in bits: the floor on `R1`.
    pub rate1: f64,
    /// `I(X1, X2; U2 | U1)` in bits: the floor on `R2`.
    pub rate2: f64,
    /// `I(X1, X2; U1, U2)` in bits: the floor on `R1 + R2`.
    pub rate_sum: f64,
    /// `E d1(X1, f1(U1, U2))`.
    pub distortion1: f64,
    /// `E d2(X2, f2(U1, U2))`.
    pub distortion2: f64,
}

/// Evaluates the Berger–Tung inner-bound quantities for one auxiliary-channel
/// choice, by exact enumeration of the induced joint
/// `p(x1, x2) p(u1|x1) p(u2|x2)`.
///
/// The mutual informations are assembled from joint entropies of that
/// distribution, so no conditional-independence shortcut is baked in; tiny
/// negative rounding residue is clamped at zero.
pub fn bt_inner(pmf: &JointPmf, aux: &AuxChannels) -> Result<BtInnerPoint> {
    aux.check_source(pmf)?;
    let (m1, m2) = (aux.u1_len(), aux.u2_len());
    let mut pu = Array2::<f64>::zeros((m1, m2));
    let mut h4 = 0.0;
    let mut h_x12u1 = 0.0;
    let mut h_x12u2 = 0.0;
    let mut distortion1 = 0.0;
    let mut distortion2 = 0.0;
    for x1 in 0..pmf.n1() {
        for x2 in 0..pmf.n2() {
            let px = pmf.p[[x1, x2]];
            if px == 0.0 {
                continue;
            }
            for u2 in 0..m2 {
                h_x12u2 += entropy_term(px * aux.ch2[[x2, u2]]);
            }
            for u1 in 0..m1 {
                let q1 = px * aux.ch1[[x1, u1]];
                h_x12u1 += entropy_term(q1);
                if q1 == 0.0 {
                    continue;
                }
                for u2 in 0..m2 {
                    let q = q1 * aux.ch2[[x2, u2]];
                    if q == 0.0 {
                        continue;
                    }
                    h4 += entropy_term(q);
                    pu[[u1, u2]] += q;
                    distortion1 += q * aux.dist1[[x1, aux.recon1[[u1, u2]]]];
                    distortion2 += q * aux.dist2[[x2, aux.recon2[[u1, u2]]]];
                }
            }
        }
    }
    let h_u12 = entropy_of(pu.iter());
    let h_u1 = entropy_of(pu.sum_axis(Axis(1)).iter());
    let h_u2 = entropy_of(pu.sum_axis(Axis(0)).iter());
    let h_x12 = pmf.entropy();
    Ok(BtInnerPoint {
        rate1: (h_x12u2 + h_u12 - h4 - h_u2).max(0.0),
        rate2: (h_x12u1 + h_u12 - h4 - h_u1).max(0.0),
        rate_sum: (h_x12 + h_u12 - h4).max(0.0),
        distortion1,
        distortion2,
    })
}

/// A full joint distribution over `(X1, X2, U1, U2)`, axes in that order.
///
/// The outer bound relaxes the single chain `U1 - X1 - X2 - U2` to the pair
/// `U1 - X1 - X2` and `X1 - X2 - U2`; this type checks those conditions as
/// predicates on an explicitly supplied joint instead of optimizing over
/// distributions.
#[derive(Debug, Clone, PartialEq)]
pub struct Joint4 {
    q: Array4<f64>,
}

impl Joint4 {
    pub fn new(q: Array4<f64>) -> Result<Self> {
        let (n1, n2, m1, m2) = q.dim();
        check_alphabet("joint4 x1", n1)?;
        check_alphabet("joint4 x2", n2)?;
        check_alphabet("joint4 u1", m1)?;
        check_alphabet("joint4 u2", m2)?;
        check_distribution("joint4", q.iter())?;
        Ok(Self { q })
    }

    /// The joint induced by per-source channels:
    /// `q(x1, x2, u1, u2) = p(x1, x2) p(u1|x1) p(u2|x2)`.
    pub fn induced(pmf: &JointPmf, aux: &AuxChannels) -> Result<Self> {
        aux.check_source(pmf)?;
        let q = Array4::from_shape_fn(
            (pmf.n1(), pmf.n2(), aux.u1_len(), aux.u2_len()),
            |(x1, x2, u1, u2)| pmf.p[[x1, x2]] * aux.ch1[[x1, u1]] * aux.ch2[[x2, u2]],
        );
        Self::new(q)
    }

    pub fn view(&self) -> ArrayView4<'_, f64> {
        self.q.view()
    }

    fn m_x1(&self) -> Array1<f64> {
        self.q
            .sum_axis(Axis(3))
            .sum_axis(Axis(2))
            .sum_axis(Axis(1))
    }

    fn m_x2(&self) -> Array1<f64> {
        self.q
            .sum_axis(Axis(3))
            .sum_axis(Axis(2))
            .sum_axis(Axis(0))
    }

    fn m_x1x2(&self) -> Array2<f64> {
        self.q.sum_axis(Axis(3)).sum_axis(Axis(2))
    }

    fn m_x1u1(&self) -> Array2<f64> {
        self.q.sum_axis(Axis(3)).sum_axis(Axis(1))
    }

    fn m_x2u2(&self) -> Array2<f64> {
        self.q.sum_axis(Axis(2)).sum_axis(Axis(0))
    }

    /// True iff `U1` and `X2` are conditionally independent given `X1` in
    /// the `U2`-marginal, i.e. the chain `U1 - X1 - X2` holds within `tol`
    /// (checked cross-multiplied, so zero-probability conditions are safe).
    pub fn is_chain_u1_x1_x2(&self, tol: f64) -> bool {
        let m_x1 = self.m_x1();
        let m_x1x2 = self.m_x1x2();
        let m_x1u1 = self.m_x1u1();
        let m_x1x2u1 = self.q.sum_axis(Axis(3));
        for ((x1, x2, u1), &p) in m_x1x2u1.indexed_iter() {
            if (p * m_x1[x1] - m_x1u1[[x1, u1]] * m_x1x2[[x1, x2]]).abs() > tol {
                return false;
            }
        }
        true
    }

    /// True iff the chain `X1 - X2 - U2` holds within `tol` in the
    /// `U1`-marginal.
    pub fn is_chain_x1_x2_u2(&self, tol: f64) -> bool {
        let m_x2 = self.m_x2();
        let m_x1x2 = self.m_x1x2();
        let m_x2u2 = self.m_x2u2();
        let m_x1x2u2 = self.q.sum_axis(Axis(2));
        for ((x1, x2, u2), &p) in m_x1x2u2.indexed_iter() {
            if (p * m_x2[x2] - m_x2u2[[x2, u2]] * m_x1x2[[x1, x2]]).abs() > tol {
                return false;
            }
        }
        true
    }

    /// True iff the full chain `U1 - X1 - X2 - U2` holds within `tol`:
    /// `U1` depends on the rest only through `X1`, and `U2` only through
    /// `X2`.
    pub fn is_chain_u1_x1_x2_u2(&self, tol: f64) -> bool {
        let m_x1 = self.m_x1();
        let m_x2 = self.m_x2();
        let m_x1u1 = self.m_x1u1();
        let m_x2u2 = self.m_x2u2();
        let m_x1x2u1 = self.q.sum_axis(Axis(3));
        let m_x1x2u2 = self.q.sum_axis(Axis(2));
        for ((x1, x2, u1, u2), &p) in self.q.indexed_iter() {
            if (p * m_x1[x1] - m_x1u1[[x1, u1]] * m_x1x2u2[[x1, x2, u2]]).abs() > tol {
                return false;
            }
            if (p * m_x2[x2] - m_x2u2[[x2, u2]] * m_x1x2u1[[x1, x2, u1]]).abs() > tol {
                return false;
            }
        }
        true
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::arr2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn binary_entropy(p: f64) -> f64 {
        entropy_term(p) + entropy_term(1.0 - p)
    }

    #[test]
    fn pmf_validation_rejects_bad_tables() {
        assert!(JointPmf::new(arr2(&[[0.5, 0.6], [-0.05, -0.05]])).is_err());
        assert!(JointPmf::new(arr2(&[[0.25, 0.25], [0.25, 0.2]])).is_err());
        assert!(JointPmf::new(Array2::zeros((0, 2))).is_err());
        let n = MAX_ALPHABET + 1;
        let uniform = Array2::from_elem((n, 1), 1.0 / n as f64);
        assert!(JointPmf::new(uniform).is_err());
        assert!(JointPmf::new(arr2(&[[0.25, 0.25], [0.25, 0.25]])).is_ok());
        assert!(JointPmf::doubly_symmetric_binary(1.5).is_err());
    }

    #[test]
    fn lossless_corner_matches_closed_forms() {
        // Uniform bit through a binary symmetric channel: both conditionals
        // equal the binary entropy of the crossover.
        let pmf = JointPmf::doubly_symmetric_binary(0.1).unwrap();
        let c = sw_corner(&pmf);
        let h = binary_entropy(0.1);
        assert_abs_diff_eq!(c.h_x1_given_x2, h, epsilon = 1e-12);
        assert_abs_diff_eq!(c.h_x2_given_x1, h, epsilon = 1e-12);
        assert_abs_diff_eq!(c.h_joint, 1.0 + h, epsilon = 1e-12);
        assert_abs_diff_eq!(c.h_x1_given_x2, 0.46900, epsilon = 1e-5);
        assert_abs_diff_eq!(c.h_joint, 1.46900, epsilon = 1e-5);

        // Independent uniform bits.
        let ind = JointPmf::new(Array2::from_elem((2, 2), 0.25)).unwrap();
        let c = sw_corner(&ind);
        assert_abs_diff_eq!(c.h_x1_given_x2, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(c.h_x2_given_x1, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(c.h_joint, 2.0, epsilon = 1e-12);

        // Deterministic copy: conditionals vanish, the joint is H(X1).
        let copy = JointPmf::new(arr2(&[[0.3, 0.0], [0.0, 0.7]])).unwrap();
        let c = sw_corner(&copy);
        assert_abs_diff_eq!(c.h_x1_given_x2, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(c.h_x2_given_x1, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(c.h_joint, binary_entropy(0.3), epsilon = 1e-12);
    }

    #[test]
    fn admissibility_follows_the_three_inequalities() {
        let pmf = JointPmf::doubly_symmetric_binary(0.1).unwrap();
        let h1 = entropy_of(pmf.marginal1().iter());
        let h2 = entropy_of(pmf.marginal2().iter());
        let c = sw_corner(&pmf);
        // Corner point: send source 1 at its full entropy, source 2 at the
        // conditional.
        assert!(sw_admissible(h1, c.h_x2_given_x1, &pmf));
        // Undershooting the first conditional is never admissible.
        assert!(!sw_admissible(c.h_x1_given_x2 - 0.01, h2, &pmf));
        // 0.8 + 0.8 = 1.6 clears the 1.4690 sum bound and each side clears
        // its 0.4690 conditional bound.
        assert!(sw_admissible(0.8, 0.8, &pmf));
    }

    #[test]
    fn aux_validation_rejects_malformed_channels() {
        let ok = AuxChannels::identity_hamming(2, 2).unwrap();
        assert_eq!((ok.u1_len(), ok.u2_len()), (2, 2));

        let eye = Array2::eye(2);
        let recon1 = Array2::from_shape_fn((2, 2), |(u1, _)| u1);
        let recon2 = Array2::from_shape_fn((2, 2), |(_, u2)| u2);
        let ham = arr2(&[[0.0, 1.0], [1.0, 0.0]]);
        // Row of channel 1 does not sum to one.
        let bad = arr2(&[[0.9, 0.0], [0.0, 1.0]]);
        assert!(AuxChannels::new(
            bad,
            eye.clone(),
            recon1.clone(),
            recon2.clone(),
            ham.clone(),
            ham.clone()
        )
        .is_err());
        // Reconstruction index outside the distortion alphabet.
        let bad_recon = arr2(&[[0usize, 2], [0, 1]]);
        assert!(AuxChannels::new(
            eye.clone(),
            eye.clone(),
            bad_recon,
            recon2.clone(),
            ham.clone(),
            ham.clone()
        )
        .is_err());
        // Distortion table rows must match the source alphabet.
        let tall = Array2::zeros((3, 2));
        assert!(
            AuxChannels::new(eye.clone(), eye, recon1, recon2, tall, ham).is_err()
        );
        // Channel shape must match the pmf it is evaluated against.
        let pmf3 = JointPmf::new(Array2::from_elem((3, 3), 1.0 / 9.0)).unwrap();
        let aux2 = AuxChannels::identity_hamming(2, 2).unwrap();
        assert!(bt_inner(&pmf3, &aux2).is_err());
    }

    #[test]
    fn identity_channels_reduce_to_the_lossless_corner() {
        let pmf = JointPmf::doubly_symmetric_binary(0.1).unwrap();
        let aux = AuxChannels::identity_hamming(2, 2).unwrap();
        let bt = bt_inner(&pmf, &aux).unwrap();
        let c = sw_corner(&pmf);
        assert_abs_diff_eq!(bt.rate1, c.h_x1_given_x2, epsilon = 1e-9);
        assert_abs_diff_eq!(bt.rate2, c.h_x2_given_x1, epsilon = 1e-9);
        assert_abs_diff_eq!(bt.rate_sum, c.h_joint, epsilon = 1e-9);
        assert_abs_diff_eq!(bt.distortion1, 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(bt.distortion2, 0.0, epsilon = 1e-15);
    }

    #[test]
    fn constant_descriptions_carry_no_rate() {
        let pmf = JointPmf::doubly_symmetric_binary(0.1).unwrap();
        // |U1| = |U2| = 1: the descriptions are independent of the sources.
        let aux = AuxChannels::new(
            Array2::from_elem((2, 1), 1.0),
            Array2::from_elem((2, 1), 1.0),
            Array2::zeros((1, 1)),
            Array2::zeros((1, 1)),
            arr2(&[[0.0, 1.0], [1.0, 0.0]]),
            arr2(&[[0.0, 1.0], [1.0, 0.0]]),
        )
        .unwrap();
        let bt = bt_inner(&pmf, &aux).unwrap();
        assert_abs_diff_eq!(bt.rate1, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(bt.rate2, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(bt.rate_sum, 0.0, epsilon = 1e-12);
        // Both decoders always output letter 0, so the distortion is the
        // probability that the source is letter 1.
        assert_abs_diff_eq!(bt.distortion1, 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(bt.distortion2, 0.5, epsilon = 1e-12);
    }

    /// Brute-force oracle: every output of `bt_inner` recomputed from an
    /// explicitly materialized four-way joint with separate code.
    struct Oracle {
        rate1: f64,
        rate2: f64,
        rate_sum: f64,
        i_x12_u1: f64,
        i_x12_u2: f64,
        distortion1: f64,
        distortion2: f64,
    }

    fn oracle(pmf: &JointPmf, aux: &AuxChannels) -> Oracle {
        let q = Joint4::induced(pmf, aux).unwrap();
        let q = q.view();
        let (n1, n2, m1, m2) = q.dim();
        let h = |probs: &[f64]| entropy_of(probs.iter());
        let mut joint = vec![0.0; n1 * n2];
        let mut u12 = vec![0.0; m1 * m2];
        let mut u1 = vec![0.0; m1];
        let mut u2 = vec![0.0; m2];
        let mut x12u1 = vec![0.0; n1 * n2 * m1];
        let mut x12u2 = vec![0.0; n1 * n2 * m2];
        let mut h4 = 0.0;
        let mut d1 = 0.0;
        let mut d2 = 0.0;
        for ((x1, x2, v1, v2), &p) in q.indexed_iter() {
            joint[x1 * n2 + x2] += p;
            u12[v1 * m2 + v2] += p;
            u1[v1] += p;
            u2[v2] += p;
            x12u1[(x1 * n2 + x2) * m1 + v1] += p;
            x12u2[(x1 * n2 + x2) * m2 + v2] += p;
            h4 += entropy_term(p);
            d1 += p * aux.dist1[[x1, aux.recon1[[v1, v2]]]];
            d2 += p * aux.dist2[[x2, aux.recon2[[v1, v2]]]];
        }
        Oracle {
            rate1: h(&x12u2) + h(&u12) - h4 - h(&u2),
            rate2: h(&x12u1) + h(&u12) - h4 - h(&u1),
            rate_sum: h(&joint) + h(&u12) - h4,
            i_x12_u1: h(&joint) + h(&u1) - h(&x12u1),
            i_x12_u2: h(&joint) + h(&u2) - h(&x12u2),
            distortion1: d1,
            distortion2: d2,
        }
    }

    fn random_distribution<R: Rng>(rng: &mut R, len: usize) -> Vec<f64> {
        let mut v: Vec<f64> = (0..len)
            .map(|_| {
                // Sprinkle hard zeros to exercise the 0 log 0 convention.
                if rng.gen_bool(0.2) {
                    0.0
                } else {
                    rng.gen_range(0.05..1.0)
                }
            })
            .collect();
        if v.iter().all(|&p| p == 0.0) {
            v[0] = 1.0;
        }
        let total: f64 = v.iter().sum();
        for p in &mut v {
            *p /= total;
        }
        v
    }

    fn random_instance(seed: u64) -> (JointPmf, AuxChannels) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n1 = rng.gen_range(2..=4);
        let n2 = rng.gen_range(2..=4);
        let m1 = rng.gen_range(1..=3);
        let m2 = rng.gen_range(1..=3);
        let pmf = JointPmf::new(
            Array2::from_shape_vec((n1, n2), random_distribution(&mut rng, n1 * n2)).unwrap(),
        )
        .unwrap();
        let channel = |rng: &mut ChaCha8Rng, rows: usize, cols: usize| {
            let data: Vec<f64> = (0..rows)
                .flat_map(|_| random_distribution(rng, cols))
                .collect();
            Array2::from_shape_vec((rows, cols), data).unwrap()
        };
        let ch1 = channel(&mut rng, n1, m1);
        let ch2 = channel(&mut rng, n2, m2);
        let r1_len = rng.gen_range(1..=3);
        let r2_len = rng.gen_range(1..=3);
        let recon1 = Array2::from_shape_fn((m1, m2), |_| rng.gen_range(0..r1_len));
        let recon2 = Array2::from_shape_fn((m1, m2), |_| rng.gen_range(0..r2_len));
        let dist1 = Array2::from_shape_fn((n1, r1_len), |_| rng.gen_range(0.0..2.0));
        let dist2 = Array2::from_shape_fn((n2, r2_len), |_| rng.gen_range(0.0..2.0));
        let aux = AuxChannels::new(ch1, ch2, recon1, recon2, dist1, dist2).unwrap();
        (pmf, aux)
    }

    #[test]
    fn inner_bound_matches_bruteforce_and_chain_rule_on_random_instances() {
        for seed in 0..100 {
            let (pmf, aux) = random_instance(seed);
            let bt = bt_inner(&pmf, &aux).unwrap();
            let o = oracle(&pmf, &aux);
            assert_abs_diff_eq!(bt.rate1, o.rate1, epsilon = 1e-9);
            assert_abs_diff_eq!(bt.rate2, o.rate2, epsilon = 1e-9);
            assert_abs_diff_eq!(bt.rate_sum, o.rate_sum, epsilon = 1e-9);
            assert_abs_diff_eq!(bt.distortion1, o.distortion1, epsilon = 1e-12);
            assert_abs_diff_eq!(bt.distortion2, o.distortion2, epsilon = 1e-12);
            assert!(bt.rate1 >= 0.0 && bt.rate2 >= 0.0 && bt.rate_sum >= 0.0);
            // Chain rule: conditioning on one description and then adding
            // its own information recovers the pair information.
            assert_abs_diff_eq!(bt.rate1 + o.i_x12_u2, bt.rate_sum, epsilon = 1e-9);
            assert_abs_diff_eq!(bt.rate2 + o.i_x12_u1, bt.rate_sum, epsilon = 1e-9);
            // The induced joint satisfies the full chain by construction.
            let q = Joint4::induced(&pmf, &aux).unwrap();
            assert!(q.is_chain_u1_x1_x2_u2(RATE_TOL));
            assert!(q.is_chain_u1_x1_x2(RATE_TOL));
            assert!(q.is_chain_x1_x2_u2(RATE_TOL));
        }
    }

    #[test]
    fn noisy_binary_descriptions_match_sixteen_entry_enumeration() {
        let pmf = JointPmf::doubly_symmetric_binary(0.1).unwrap();
        let bsc = |e: f64| arr2(&[[1.0 - e, e], [e, 1.0 - e]]);
        let ham = arr2(&[[0.0, 1.0], [1.0, 0.0]]);
        // Each decoder trusts its own description directly.
        let aux = AuxChannels::new(
            bsc(0.05),
            bsc(0.05),
            Array2::from_shape_fn((2, 2), |(u1, _)| u1),
            Array2::from_shape_fn((2, 2), |(_, u2)| u2),
            ham.clone(),
            ham,
        )
        .unwrap();
        let bt = bt_inner(&pmf, &aux).unwrap();
        let o = oracle(&pmf, &aux);
        assert_abs_diff_eq!(bt.rate1, o.rate1, epsilon = 1e-12);
        assert_abs_diff_eq!(bt.rate2, o.rate2, epsilon = 1e-12);
        assert_abs_diff_eq!(bt.rate_sum, o.rate_sum, epsilon = 1e-12);
        // Description noise must strictly cheapen the rates relative to the
        // lossless corner while charging distortion.
        let c = sw_corner(&pmf);
        assert!(bt.rate_sum < c.h_joint);
        assert!(bt.rate1 < c.h_x1_given_x2 + 1e-12);
        assert_abs_diff_eq!(bt.distortion1, 0.05, epsilon = 1e-12);
        assert_abs_diff_eq!(bt.distortion2, 0.05, epsilon = 1e-12);
    }

    #[test]
    fn swapping_sources_swaps_the_conditional_rates() {
        let (pmf, aux) = random_instance(7);
        let swapped_pmf = JointPmf::new(pmf.p().t().to_owned().as_standard_layout().to_owned())
            .unwrap();
        let swapped_aux = AuxChannels::new(
            aux.ch2.clone(),
            aux.ch1.clone(),
            aux.recon2.t().to_owned().as_standard_layout().to_owned(),
            aux.recon1.t().to_owned().as_standard_layout().to_owned(),
            aux.dist2.clone(),
            aux.dist1.clone(),
        )
        .unwrap();
        let bt = bt_inner(&pmf, &aux).unwrap();
        let sw = bt_inner(&swapped_pmf, &swapped_aux).unwrap();
        assert_abs_diff_eq!(bt.rate1, sw.rate2, epsilon = 1e-12);
        assert_abs_diff_eq!(bt.rate2, sw.rate1, epsilon = 1e-12);
        assert_abs_diff_eq!(bt.rate_sum, sw.rate_sum, epsilon = 1e-12);
        assert_abs_diff_eq!(bt.distortion1, sw.distortion2, epsilon = 1e-12);
        assert_abs_diff_eq!(bt.distortion2, sw.distortion1, epsilon = 1e-12);
        let corner = sw_corner(&pmf);
        let swapped_corner = sw_corner(&swapped_pmf);
        assert_abs_diff_eq!(
            corner.h_x1_given_x2,
            swapped_corner.h_x2_given_x1,
            epsilon = 1e-12
        );
    }

    #[test]
    fn markov_predicates_separate_chain_from_non_chain_joints() {
        let pmf = JointPmf::doubly_symmetric_binary(0.2).unwrap();
        let bsc = |e: f64| arr2(&[[1.0 - e, e], [e, 1.0 - e]]);

        // U2 generated from X1 instead of X2: the first sub-chain holds,
        // the second does not, and the full chain fails.
        let ch1 = bsc(0.1);
        let ch2 = bsc(0.3);
        let cross = Array4::from_shape_fn((2, 2, 2, 2), |(x1, x2, u1, u2)| {
            pmf.p()[[x1, x2]] * ch1[[x1, u1]] * ch2[[x1, u2]]
        });
        let cross = Joint4::new(cross).unwrap();
        assert!(cross.is_chain_u1_x1_x2(RATE_TOL));
        assert!(!cross.is_chain_x1_x2_u2(RATE_TOL));
        assert!(!cross.is_chain_u1_x1_x2_u2(RATE_TOL));

        // Both sub-chains can hold while the full chain fails: make U1 and
        // U2 share randomness beyond the sources. Take X1, X2 independent
        // uniform bits and U1 = U2 = a coin that is correlated with neither
        // source but fully correlated across descriptions.
        let shared = Array4::from_shape_fn((2, 2, 2, 2), |(_, _, u1, u2)| {
            if u1 == u2 {
                0.125
            } else {
                0.0
            }
        });
        let shared = Joint4::new(shared).unwrap();
        assert!(shared.is_chain_u1_x1_x2(RATE_TOL));
        assert!(shared.is_chain_x1_x2_u2(RATE_TOL));
        assert!(!shared.is_chain_u1_x1_x2_u2(RATE_TOL));

        // Joint4 validation mirrors the pmf rules.
        assert!(Joint4::new(Array4::from_elem((2, 2, 2, 2), 0.1)).is_err());
        assert!(Joint4::new(Array4::from_elem((0, 2, 2, 2), 0.0)).is_err());
    }
}
