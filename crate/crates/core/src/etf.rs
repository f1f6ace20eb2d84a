//! Simplex equiangular tight frames, feature statistics and the neural
//! collapse metrics.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stiefel::StiefelPoint;

/// Centring projector `I_C − (1/C) 1 1ᵀ`.
pub fn centring_projector(c: usize) -> DMatrix<f64> {
    let mut p = DMatrix::from_element(c, c, -1.0 / c as f64);
    for i in 0..c {
        p[(i, i)] += 1.0;
    }
    p
}

/// The standard simplex ETF with unit Frobenius norm,
/// `M̃ = (I_C − (1/C) 1 1ᵀ) / √(C−1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct StandardEtf {
    matrix: DMatrix<f64>,
}

impl StandardEtf {
    pub fn new(c: usize) -> Result<Self> {
        if c < 2 {
            return Err(Error::Domain(format!("a simplex ETF needs C >= 2, got {c}")));
        }
        Ok(Self { matrix: centring_projector(c) / ((c - 1) as f64).sqrt() })
    }

    pub fn num_classes(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }
}

/// `A (I − 11ᵀ/C)`: subtracts the row means, in `O(rows·C)`.
pub fn right_centre(a: &DMatrix<f64>) -> DMatrix<f64> {
    let mean = a.column_mean();
    let mut out = a.clone();
    for mut col in out.column_iter_mut() {
        col -= &mean;
    }
    out
}

/// The `C×C` simplex ETF with unit-norm columns, `√(C/(C−1)) (I − 11ᵀ/C)`.
/// Used for classifier weights.
pub fn unit_column_etf(c: usize) -> Result<DMatrix<f64>> {
    if c < 2 {
        return Err(Error::Domain(format!("a simplex ETF needs C >= 2, got {c}")));
    }
    Ok(centring_projector(c) * (c as f64 / (c - 1) as f64).sqrt())
}

/// `M = α √(C/(C−1)) U (I_C − (1/C) 1 1ᵀ)` for a rotation `U ∈ St(d, C)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SimplexEtf {
    pub alpha: f64,
    pub rotation: StiefelPoint,
    pub matrix: DMatrix<f64>,
}

impl SimplexEtf {
    pub fn new(c: usize, d: usize, alpha: f64, rotation: DMatrix<f64>) -> Result<Self> {
        if c < 2 {
            return Err(Error::Domain(format!("a simplex ETF needs C >= 2, got {c}")));
        }
        if d < c {
            return Err(Error::Dimension(format!("simplex ETF needs d >= C, got d={d}, C={c}")));
        }
        if rotation.shape() != (d, c) {
            return Err(Error::Dimension(format!(
                "rotation must be {d}x{c}, got {:?}",
                rotation.shape()
            )));
        }
        if !(alpha > 0.0) {
            return Err(Error::Domain("ETF scale must be positive".into()));
        }
        let rotation = StiefelPoint::new(rotation)?;
        let matrix = rotation.matrix() * unit_column_etf(c)? * alpha;
        Ok(Self { alpha, rotation, matrix })
    }

    pub fn num_classes(&self) -> usize {
        self.matrix.ncols()
    }
}

/// Global mean, class means and the centred / normalised class-mean matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStatistics {
    pub global_mean: DVector<f64>,
    /// `d×C`, column `c` is the class-`c` mean.
    pub class_means: DMatrix<f64>,
    /// `H̄`: class means minus the global mean.
    pub centred: DMatrix<f64>,
    /// `H̃ = H̄ / ‖H̄‖_F`.
    pub normalised: DMatrix<f64>,
    pub centred_norm: f64,
    pub counts: Vec<usize>,
}

fn check_labels(h: &DMatrix<f64>, labels: &[usize], num_classes: usize) -> Result<()> {
    if labels.len() != h.ncols() {
        return Err(Error::Dimension(format!(
            "{} labels for {} features",
            labels.len(),
            h.ncols()
        )));
    }
    if h.ncols() == 0 {
        return Err(Error::Domain("no samples".into()));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
        return Err(Error::Domain(format!("label {bad} out of range for {num_classes} classes")));
    }
    Ok(())
}

/// Class sums and counts, without requiring every class to be present.
pub(crate) fn class_sums(h: &DMatrix<f64>, labels: &[usize], num_classes: usize) -> (DMatrix<f64>, Vec<usize>) {
    let mut sums = DMatrix::zeros(h.nrows(), num_classes);
    let mut counts = vec![0; num_classes];
    for (i, &y) in labels.iter().enumerate() {
        let mut col = sums.column_mut(y);
        col += h.column(i);
        counts[y] += 1;
    }
    (sums, counts)
}

pub fn compute_feature_statistics(
    h: &DMatrix<f64>,
    labels: &[usize],
    num_classes: usize,
) -> Result<FeatureStatistics> {
    check_labels(h, labels, num_classes)?;
    let (sums, counts) = class_sums(h, labels, num_classes);
    if let Some(class) = counts.iter().position(|&n| n == 0) {
        return Err(Error::MissingClass { class });
    }
    let global_mean = h.column_sum() / h.ncols() as f64;
    let mut class_means = sums;
    for (c, &n) in counts.iter().enumerate() {
        class_means.column_mut(c).unscale_mut(n as f64);
    }
    let mut centred = class_means.clone();
    for mut col in centred.column_iter_mut() {
        col -= &global_mean;
    }
    let centred_norm = centred.norm();
    if centred_norm == 0.0 || !centred_norm.is_finite() {
        return Err(Error::DegenerateFeatures);
    }
    let normalised = &centred / centred_norm;
    Ok(FeatureStatistics { global_mean, class_means, centred, normalised, centred_norm, counts })
}

/// `(1/C) Tr(Σ_W Σ_B†)`.
///
/// `Σ_B = (1/C) H̄ H̄ᵀ` is diagonalised through the thin SVD of `H̄`; modes
/// whose eigenvalue is below `1e-10` times the largest are dropped.
pub fn nc1(h: &DMatrix<f64>, labels: &[usize], num_classes: usize) -> Result<f64> {
    if num_classes < 2 {
        return Err(Error::Domain("NC1 needs at least two classes".into()));
    }
    let stats = compute_feature_statistics(h, labels, num_classes)?;
    nc1_with_statistics(h, labels, &stats)
}

pub fn nc1_with_statistics(h: &DMatrix<f64>, labels: &[usize], stats: &FeatureStatistics) -> Result<f64> {
    let c = stats.class_means.ncols();
    if c < 2 {
        return Err(Error::Domain("NC1 needs at least two classes".into()));
    }
    let n = h.ncols() as f64;
    let svd = stats.centred.clone().svd(true, false);
    let p = svd.u.ok_or_else(|| Error::Numerical("SVD did not return U".into()))?;
    let eig: Vec<f64> = svd.singular_values.iter().map(|s| s * s / c as f64).collect();
    let max_eig = eig.iter().copied().fold(0.0, f64::max);

    // within-class residuals projected on the between-class eigenvectors
    let mut resid = h.clone();
    for (i, &y) in labels.iter().enumerate() {
        let mut col = resid.column_mut(i);
        col -= stats.class_means.column(y);
    }
    let proj = p.transpose() * resid;
    let mut trace = 0.0;
    for (k, &lambda) in eig.iter().enumerate() {
        if lambda <= 1e-10 * max_eig || lambda == 0.0 {
            continue;
        }
        let var = proj.row(k).norm_squared() / n;
        trace += var / lambda;
    }
    Ok(trace / c as f64)
}

fn normalised_gap_to_etf(m: &DMatrix<f64>) -> Result<f64> {
    let c = m.nrows();
    let norm = m.norm();
    if norm == 0.0 {
        return Err(Error::Domain("matrix is zero".into()));
    }
    let etf = StandardEtf::new(c)?;
    Ok((m / norm - etf.matrix()).norm())
}

/// `‖WWᵀ/‖WWᵀ‖_F − M̃‖_F`.
pub fn nc2(w: &DMatrix<f64>) -> Result<f64> {
    if w.norm() == 0.0 {
        return Err(Error::Domain("NC2 of a zero classifier".into()));
    }
    normalised_gap_to_etf(&(w * w.transpose()))
}

/// `‖W H̄/‖W H̄‖_F − M̃‖_F`.
pub fn nc3(w: &DMatrix<f64>, centred_means: &DMatrix<f64>) -> Result<f64> {
    if w.ncols() != centred_means.nrows() || w.nrows() != centred_means.ncols() {
        return Err(Error::Dimension("W and H̄ are not conformable".into()));
    }
    let prod = w * centred_means;
    if prod.norm() == 0.0 {
        return Err(Error::Domain("NC3 of a zero product".into()));
    }
    normalised_gap_to_etf(&prod)
}

/// Index of the first maximal entry.
fn first_argmax(values: impl Iterator<Item = f64>) -> usize {
    let mut best = 0;
    let mut best_val = f64::NEG_INFINITY;
    for (i, v) in values.enumerate() {
        if v > best_val {
            best = i;
            best_val = v;
        }
    }
    best
}

/// Fraction of samples on which the linear classifier and the nearest class
/// centre agree. Ties go to the lowest class index in both rules.
pub fn nc4_agreement(
    w: &DMatrix<f64>,
    b: &DVector<f64>,
    h: &DMatrix<f64>,
    class_means: &DMatrix<f64>,
) -> Result<f64> {
    if w.ncols() != h.nrows() || class_means.nrows() != h.nrows() || b.len() != w.nrows() {
        return Err(Error::Dimension("NC4 inputs are not conformable".into()));
    }
    if h.ncols() == 0 {
        return Err(Error::Domain("no samples".into()));
    }
    let scores = w * h;
    // ‖h − μ_c‖² = ‖h‖² − 2μ_cᵀh + ‖μ_c‖²; the first term does not affect the argmin
    let proximity = class_means.transpose() * h * 2.0;
    let mean_sq: Vec<f64> = class_means.column_iter().map(|m| m.norm_squared()).collect();
    let mut agree = 0usize;
    for i in 0..h.ncols() {
        let cls = first_argmax((0..w.nrows()).map(|c| scores[(c, i)] + b[c]));
        let ncc = first_argmax((0..class_means.ncols()).map(|c| proximity[(c, i)] - mean_sq[c]));
        agree += usize::from(cls == ncc);
    }
    Ok(agree as f64 / h.ncols() as f64)
}

fn coefficient_of_variation(norms: &[f64]) -> Result<f64> {
    let n = norms.len() as f64;
    let avg = norms.iter().sum::<f64>() / n;
    if avg == 0.0 {
        return Err(Error::Domain("average norm is zero".into()));
    }
    let var = norms.iter().map(|x| (x - avg).powi(2)).sum::<f64>() / n;
    Ok(var.sqrt() / avg)
}

/// `|std_c ‖w_c‖ / avg_c ‖w_c‖ − std_c ‖h̄_c − h_G‖ / avg_c ‖h̄_c − h_G‖|`,
/// with population standard deviations.
pub fn equinorm_gap(w: &DMatrix<f64>, centred_means: &DMatrix<f64>) -> Result<f64> {
    let w_norms: Vec<f64> = w.row_iter().map(|r| r.norm()).collect();
    let h_norms: Vec<f64> = centred_means.column_iter().map(|c| c.norm()).collect();
    Ok((coefficient_of_variation(&w_norms)? - coefficient_of_variation(&h_norms)?).abs())
}

/// Per-sample cosine margins.
#[derive(Debug, Clone, PartialEq)]
pub struct CosineMargins {
    /// `None` for samples whose centred feature has zero norm.
    pub margins: Vec<Option<f64>>,
    pub excluded: Vec<usize>,
}

impl CosineMargins {
    pub fn mean(&self) -> Option<f64> {
        let vals: Vec<f64> = self.margins.iter().flatten().copied().collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }
}

/// `CM_i = cos θ_{i;y_i} − max_{j≠y_i} cos θ_{i;j}`, where the cosines are
/// between `w_j − w_G` and `h_i − h_G`. `w_G` is the mean classifier row.
pub fn cosine_margins(w: &DMatrix<f64>, h: &DMatrix<f64>, labels: &[usize]) -> Result<CosineMargins> {
    let c = w.nrows();
    check_labels(h, labels, c)?;
    if w.ncols() != h.nrows() {
        return Err(Error::Dimension("W and H are not conformable".into()));
    }
    if c < 2 {
        return Err(Error::Domain("cosine margin needs at least two classes".into()));
    }
    let w_g = w.row_sum() / c as f64;
    let mut wc = w.clone();
    for mut row in wc.row_iter_mut() {
        row -= &w_g;
    }
    for (j, mut row) in wc.row_iter_mut().enumerate() {
        let n = row.norm();
        if n == 0.0 {
            return Err(Error::Domain(format!("centred classifier row {j} is zero")));
        }
        row.unscale_mut(n);
    }
    let h_g = h.column_sum() / h.ncols() as f64;
    let mut hc = h.clone();
    for mut col in hc.column_iter_mut() {
        col -= &h_g;
    }
    let dots = &wc * &hc;
    let mut margins = Vec::with_capacity(h.ncols());
    let mut excluded = Vec::new();
    for (i, &y) in labels.iter().enumerate() {
        let hn = hc.column(i).norm();
        // a centred sample that is zero up to roundoff has no direction
        if hn <= 1e-12 * h.column(i).norm().max(h_g.norm()) {
            margins.push(None);
            excluded.push(i);
            continue;
        }
        let rival = (0..c).filter(|&j| j != y).map(|j| dots[(j, i)]).fold(f64::NEG_INFINITY, f64::max);
        margins.push(Some((dots[(y, i)] - rival) / hn));
    }
    Ok(CosineMargins { margins, excluded })
}

/// The cosine margin of a perfectly collapsed simplex ETF, `C/(C−1)`.
pub fn theoretical_cosine_margin(c: usize) -> f64 {
    c as f64 / (c as f64 - 1.0)
}

/// All neural collapse metrics for one snapshot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NcMetricsRecord {
    pub nc1: f64,
    pub nc2: f64,
    pub nc3: f64,
    pub nc4_agreement: f64,
    pub equinorm_gap: f64,
    #[serde(skip)]
    pub cosine_margins: Vec<Option<f64>>,
    pub mean_cosine_margin: f64,
}

impl NcMetricsRecord {
    pub fn compute(
        w: &DMatrix<f64>,
        b: &DVector<f64>,
        h: &DMatrix<f64>,
        labels: &[usize],
    ) -> Result<Self> {
        let c = w.nrows();
        let stats = compute_feature_statistics(h, labels, c)?;
        let margins = cosine_margins(w, h, labels)?;
        Ok(Self {
            nc1: nc1_with_statistics(h, labels, &stats)?,
            nc2: nc2(w)?,
            nc3: nc3(w, &stats.centred)?,
            nc4_agreement: nc4_agreement(w, b, h, &stats.class_means)?,
            equinorm_gap: equinorm_gap(w, &stats.centred)?,
            mean_cosine_margin: margins.mean().unwrap_or(f64::NAN),
            cosine_margins: margins.margins,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn gaussian(r: usize, c: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| rng.sample::<f64, _>(StandardNormal))
    }

    fn cosine(a: nalgebra::DVectorView<f64>, b: nalgebra::DVectorView<f64>) -> f64 {
        a.dot(&b) / (a.norm() * b.norm())
    }

    /// Features sitting exactly on the columns of `etf`, `per_class` copies each.
    fn collapsed(etf: &DMatrix<f64>, per_class: usize) -> (DMatrix<f64>, Vec<usize>) {
        let c = etf.ncols();
        let labels: Vec<usize> = (0..c * per_class).map(|i| i % c).collect();
        let h = DMatrix::from_fn(etf.nrows(), labels.len(), |r, i| etf[(r, labels[i])]);
        (h, labels)
    }

    #[test]
    fn simplex_etf_pairwise_cosines() {
        let two = SimplexEtf::new(2, 2, 1.0, DMatrix::identity(2, 2)).unwrap();
        assert!((cosine(two.matrix.column(0), two.matrix.column(1)) + 1.0).abs() < 1e-14);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let u = StiefelPoint::haar_random(7, 3, &mut rng).unwrap();
        let three = SimplexEtf::new(3, 7, 2.5, u.into_matrix()).unwrap();
        for i in 0..3 {
            for j in 0..i {
                let cos = cosine(three.matrix.column(i), three.matrix.column(j));
                assert!((cos + 0.5).abs() < 1e-13);
            }
        }
        assert!(three.matrix.column_sum().norm() < 1e-13);
    }

    #[test]
    fn simplex_etf_gram_structure() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let u = StiefelPoint::haar_random(9, 5, &mut rng).unwrap();
        let m = SimplexEtf::new(5, 9, 1.0, u.into_matrix()).unwrap().matrix;
        let gram = m.transpose() * &m;
        for i in 0..5 {
            assert!((gram[(i, i)] - 1.0).abs() < 1e-13);
            for j in 0..5 {
                if i != j {
                    assert!((gram[(i, j)] + 0.25).abs() < 1e-13);
                }
            }
        }
        let svd = m.svd(false, false);
        let rank = svd.singular_values.iter().filter(|&&s| s > 1e-10).count();
        assert_eq!(rank, 4);
    }

    #[test]
    fn simplex_etf_errors() {
        assert!(matches!(SimplexEtf::new(3, 2, 1.0, DMatrix::identity(2, 3)), Err(Error::Dimension(_))));
        assert!(matches!(
            SimplexEtf::new(2, 3, 1.0, DMatrix::from_element(3, 2, 1.0)),
            Err(Error::Constraint(_))
        ));
    }

    #[test]
    fn standard_etf_cases() {
        let two = StandardEtf::new(2).unwrap();
        assert_eq!(two.matrix(), &DMatrix::from_row_slice(2, 2, &[0.5, -0.5, -0.5, 0.5]));
        assert!((StandardEtf::new(10).unwrap().matrix().norm() - 1.0).abs() < 1e-15);
        let four = StandardEtf::new(4).unwrap();
        for col in four.matrix().column_iter() {
            assert!((col.norm() - 0.5).abs() < 1e-15);
        }
        assert!((four.matrix() * DVector::from_element(4, 1.0)).norm() < 1e-15);
        assert!(matches!(StandardEtf::new(1), Err(Error::Domain(_))));
    }

    #[test]
    fn feature_statistics_cases() {
        let h = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let s = compute_feature_statistics(&h, &[0, 1], 2).unwrap();
        assert_eq!(s.global_mean.as_slice(), &[0.5, 0.5]);
        assert_eq!(s.centred, DMatrix::from_row_slice(2, 2, &[0.5, -0.5, -0.5, 0.5]));
        assert!((s.normalised.norm() - 1.0).abs() < 1e-15);

        let same = DMatrix::from_element(3, 4, 0.7);
        assert!(matches!(
            compute_feature_statistics(&same, &[0, 1, 0, 1], 2),
            Err(Error::DegenerateFeatures)
        ));
        assert!(matches!(
            compute_feature_statistics(&h, &[0, 0], 2),
            Err(Error::MissingClass { class: 1 })
        ));
    }

    #[test]
    fn feature_statistics_match_naive_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for &(d, c, n) in &[(3, 2, 7), (6, 4, 40), (10, 5, 100)] {
            let h = gaussian(d, n, &mut rng);
            let labels: Vec<usize> = (0..n).map(|i| if i < c { i } else { rng.random_range(0..c) }).collect();
            let s = compute_feature_statistics(&h, &labels, c).unwrap();
            for k in 0..c {
                for r in 0..d {
                    let (mut sum, mut cnt, mut all) = (0.0, 0.0, 0.0);
                    for i in 0..n {
                        all += h[(r, i)];
                        if labels[i] == k {
                            sum += h[(r, i)];
                            cnt += 1.0;
                        }
                    }
                    let want = sum / cnt - all / n as f64;
                    assert!((s.centred[(r, k)] - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn nc1_zero_at_collapse_and_monotone_in_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let u = StiefelPoint::haar_random(6, 3, &mut rng).unwrap();
        let etf = SimplexEtf::new(3, 6, 1.0, u.into_matrix()).unwrap().matrix;
        let (h, labels) = collapsed(&etf, 4);
        assert!(nc1(&h, &labels, 3).unwrap().abs() < 1e-12);

        let mut prev = 0.0;
        for eps in [1e-3, 1e-2, 1e-1] {
            let mut noisy = h.clone();
            noisy[(0, 0)] += eps;
            let v = nc1(&noisy, &labels, 3).unwrap();
            assert!(v > prev);
            prev = v;
        }
        assert!(matches!(
            nc1(&DMatrix::from_element(2, 1, 1.0), &[0], 1),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn nc1_matches_explicit_pseudo_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let (d, c, n) = (4, 2, 6);
        let h = gaussian(d, n, &mut rng);
        let labels = vec![0, 1, 0, 1, 1, 0];
        let s = compute_feature_statistics(&h, &labels, c).unwrap();
        let mut sw = DMatrix::zeros(d, d);
        for i in 0..n {
            let r = h.column(i) - s.class_means.column(labels[i]);
            sw += &r * r.transpose();
        }
        sw /= n as f64;
        let mut sb = DMatrix::zeros(d, d);
        for k in 0..c {
            let r = s.centred.column(k);
            sb += r * r.transpose();
        }
        sb /= c as f64;
        let pinv = sb.pseudo_inverse(1e-10).unwrap();
        let want = (sw * pinv).trace() / c as f64;
        assert!((nc1(&h, &labels, c).unwrap() - want).abs() < 1e-10 * want.max(1.0));
    }

    #[test]
    fn nc1_rotation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let h = gaussian(5, 20, &mut rng);
        let labels: Vec<usize> = (0..20).map(|i| i % 4).collect();
        let q = StiefelPoint::haar_random(5, 5, &mut rng).unwrap().into_matrix();
        let a = nc1(&h, &labels, 4).unwrap();
        let b = nc1(&(q * &h), &labels, 4).unwrap();
        assert!((a - b).abs() < 1e-10 * a);
    }

    #[test]
    fn right_centre_matches_projector() {
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        let a = gaussian(5, 4, &mut rng);
        assert!((right_centre(&a) - &a * centring_projector(4)).norm() < 1e-14);
    }

    #[test]
    fn nc2_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let u = StiefelPoint::haar_random(8, 4, &mut rng).unwrap();
        let w = unit_column_etf(4).unwrap() * u.matrix().transpose();
        assert!(nc2(&w).unwrap() < 1e-12);
        let i2 = DMatrix::<f64>::identity(2, 2);
        let want = (&i2 / 2f64.sqrt() - StandardEtf::new(2).unwrap().matrix()).norm();
        assert!((nc2(&i2).unwrap() - want).abs() < 1e-15);
        let w = gaussian(3, 5, &mut rng);
        assert!((nc2(&w).unwrap() - nc2(&(&w * 3.7)).unwrap()).abs() < 1e-14);
        assert!(nc2(&DMatrix::zeros(2, 3)).is_err());
    }

    #[test]
    fn nc3_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let u = StiefelPoint::haar_random(8, 4, &mut rng).unwrap();
        let mbar = unit_column_etf(4).unwrap();
        let w = &mbar * u.matrix().transpose();
        let hbar = u.matrix() * &mbar * 0.3;
        assert!(nc3(&w, &hbar).unwrap() < 1e-12);

        let w = gaussian(3, 6, &mut rng);
        let hbar = gaussian(6, 3, &mut rng);
        let prod = &w * &hbar;
        let want = (&prod / prod.norm() - StandardEtf::new(3).unwrap().matrix()).norm();
        assert!((nc3(&w, &hbar).unwrap() - want).abs() < 1e-14);
        assert!((nc3(&w, &(&hbar * 4.0)).unwrap() - want).abs() < 1e-14);
    }

    #[test]
    fn nc4_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let u = StiefelPoint::haar_random(6, 3, &mut rng).unwrap();
        let mbar = unit_column_etf(3).unwrap();
        let etf = u.matrix() * &mbar;
        let (h, labels) = collapsed(&etf, 3);
        let s = compute_feature_statistics(&h, &labels, 3).unwrap();
        let w = &mbar * u.matrix().transpose();
        let b = DVector::zeros(3);
        assert_eq!(nc4_agreement(&w, &b, &h, &s.class_means).unwrap(), 1.0);

        // W = 0: the classifier always picks class 0; brute-force the NCC rule
        let h = gaussian(6, 12, &mut rng);
        let labels: Vec<usize> = (0..12).map(|i| i % 3).collect();
        let s = compute_feature_statistics(&h, &labels, 3).unwrap();
        let mut agree = 0;
        for i in 0..12 {
            let mut best = 0;
            for c in 1..3 {
                if (h.column(i) - s.class_means.column(c)).norm()
                    < (h.column(i) - s.class_means.column(best)).norm()
                {
                    best = c;
                }
            }
            agree += usize::from(best == 0);
        }
        let got = nc4_agreement(&DMatrix::zeros(3, 6), &DVector::zeros(3), &h, &s.class_means).unwrap();
        assert_eq!(got, agree as f64 / 12.0);

        let single = nc4_agreement(
            &gaussian(2, 3, &mut rng),
            &DVector::zeros(2),
            &gaussian(3, 1, &mut rng),
            &gaussian(3, 2, &mut rng),
        )
        .unwrap();
        assert!(single == 0.0 || single == 1.0);
    }

    #[test]
    fn equinorm_cases() {
        let mbar = unit_column_etf(3).unwrap();
        assert!(equinorm_gap(&mbar, &mbar).unwrap() < 1e-15);
        let w = DMatrix::identity(2, 2);
        let hbar = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 3.0]);
        assert!((equinorm_gap(&w, &hbar).unwrap() - 0.5).abs() < 1e-15);
        let swapped = equinorm_gap(&hbar.transpose(), &w).unwrap();
        assert!((swapped - 0.5).abs() < 1e-15);
        assert!(equinorm_gap(&DMatrix::zeros(2, 2), &hbar).is_err());
    }

    #[test]
    fn cosine_margin_at_collapse() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let c = 10;
        let u = StiefelPoint::haar_random(16, c, &mut rng).unwrap();
        let mbar = unit_column_etf(c).unwrap();
        let (h, labels) = collapsed(&(u.matrix() * &mbar), 2);
        let w = &mbar * u.matrix().transpose();
        let m = cosine_margins(&w, &h, &labels).unwrap();
        assert!(m.excluded.is_empty());
        for v in m.margins.iter().flatten() {
            assert!((v - 10.0 / 9.0).abs() < 1e-10);
        }
        assert!((theoretical_cosine_margin(10) - 10.0 / 9.0).abs() < 1e-15);
    }

    #[test]
    fn cosine_margin_negative_when_misclassified() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let u = StiefelPoint::haar_random(5, 3, &mut rng).unwrap();
        let mbar = unit_column_etf(3).unwrap();
        let etf = u.matrix() * &mbar;
        let (mut h, labels) = collapsed(&etf, 2);
        // sample 0 (class 0) placed on class 1's vertex
        h.set_column(0, &etf.column(1));
        let w = &mbar * u.matrix().transpose();
        let m = cosine_margins(&w, &h, &labels).unwrap();
        assert!(m.margins[0].unwrap() < 0.0);
    }

    #[test]
    fn cosine_margin_brute_force_and_exclusion() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let (d, c, n) = (5, 4, 15);
        let w = gaussian(c, d, &mut rng);
        let mut h = gaussian(d, n, &mut rng);
        let labels: Vec<usize> = (0..n).map(|i| i % c).collect();
        // make the last sample coincide with the global mean of the others
        let others = h.columns(0, n - 1).column_sum() / (n - 1) as f64;
        h.set_column(n - 1, &others);
        let m = cosine_margins(&w, &h, &labels).unwrap();
        assert_eq!(m.excluded, vec![n - 1]);
        assert!(m.margins[n - 1].is_none());

        let wg: DVector<f64> = (0..d).map(|k| (0..c).map(|j| w[(j, k)]).sum::<f64>() / c as f64).collect::<Vec<_>>().into();
        let hg: DVector<f64> = (0..d).map(|k| (0..n).map(|i| h[(k, i)]).sum::<f64>() / n as f64).collect::<Vec<_>>().into();
        for i in 0..n - 1 {
            let hc = h.column(i) - &hg;
            let cosv: Vec<f64> = (0..c)
                .map(|j| {
                    let wj = w.row(j).transpose() - &wg;
                    wj.dot(&hc) / (wj.norm() * hc.norm())
                })
                .collect();
            let mut rival = f64::NEG_INFINITY;
            for j in 0..c {
                if j != labels[i] && cosv[j] > rival {
                    rival = cosv[j];
                }
            }
            let got = m.margins[i].unwrap();
            assert!((got - (cosv[labels[i]] - rival)).abs() < 1e-12);
            assert!((-2.0..=2.0).contains(&got));
        }
    }
}
