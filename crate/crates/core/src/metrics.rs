//! Gesture evaluation metrics.
//!
//! Conventions: PCK counts (frame, joint) pairs whose Euclidean error is below
//! δ mm. MAJE is the per-coordinate mean absolute error in mm. MAD compares
//! second central differences scaled by fps² (mm/s²), averaged per coordinate.
//! FGD is the Fréchet distance between Gaussian fits of feature vectors
//! (sample covariance with n − 1). GAD is the fraction of segments whose
//! gesture and audio midpoints lie within τ seconds.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::motion::{MotionSequence, SegmentAnnotation};

pub const DEFAULT_PCK_DELTA_MM: f64 = 10.0;
pub const DEFAULT_GAD_TAU_S: f64 = 0.3;
const FGD_REGULARIZATION: f64 = 1e-6;

fn same_shape(pred: &MotionSequence, gt: &MotionSequence) -> Result<()> {
    if pred.frames().dim() != gt.frames().dim() {
        return Err(Error::shape(format!(
            "prediction {:?} vs ground truth {:?}",
            pred.frames().dim(),
            gt.frames().dim()
        )));
    }
    Ok(())
}

pub fn pck(pred: &MotionSequence, gt: &MotionSequence, delta: f64) -> Result<f64> {
    same_shape(pred, gt)?;
    let (l, j, _) = gt.frames().dim();
    let (p, g) = (pred.frames(), gt.frames());
    let mut hits = 0usize;
    for k in 0..l {
        for i in 0..j {
            let d2: f64 = (0..3).map(|c| (p[[k, i, c]] - g[[k, i, c]]).powi(2)).sum();
            if d2.sqrt() < delta {
                hits += 1;
            }
        }
    }
    Ok(hits as f64 / (l * j) as f64)
}

pub fn maje(pred: &MotionSequence, gt: &MotionSequence) -> Result<f64> {
    same_shape(pred, gt)?;
    let total: f64 = pred.frames().iter().zip(gt.frames()).map(|(a, b)| (a - b).abs()).sum();
    Ok(total / gt.frames().len() as f64)
}

pub fn mad(pred: &MotionSequence, gt: &MotionSequence, fps: f64) -> Result<f64> {
    same_shape(pred, gt)?;
    let (l, j, _) = gt.frames().dim();
    if l < 3 {
        return Err(Error::TooShort { len: l, min: 3 });
    }
    let (p, g) = (pred.frames(), gt.frames());
    let fps2 = fps * fps;
    let mut total = 0.0;
    for k in 1..l - 1 {
        for i in 0..j {
            for c in 0..3 {
                let ap = p[[k + 1, i, c]] - 2.0 * p[[k, i, c]] + p[[k - 1, i, c]];
                let ag = g[[k + 1, i, c]] - 2.0 * g[[k, i, c]] + g[[k - 1, i, c]];
                total += ((ap - ag) * fps2).abs();
            }
        }
    }
    Ok(total / ((l - 2) * j * 3) as f64)
}

pub fn gad(gesture: &SegmentAnnotation, audio: &SegmentAnnotation, tau: f64) -> Result<f64> {
    let (hits, n) = gad_counts(gesture, audio, tau)?;
    Ok(hits as f64 / n as f64)
}

/// (segments within τ, total segments).
pub fn gad_counts(gesture: &SegmentAnnotation, audio: &SegmentAnnotation, tau: f64) -> Result<(usize, usize)> {
    if gesture.len() != audio.len() {
        return Err(Error::CountMismatch {
            gesture: gesture.len(),
            audio: audio.len(),
        });
    }
    if gesture.is_empty() {
        return Err(Error::EmptySet);
    }
    let hits = gesture
        .midpoints()
        .iter()
        .zip(audio.midpoints())
        .filter(|(g, a)| (*g - a).abs() < tau)
        .count();
    Ok((hits, gesture.len()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FgdResult {
    pub value: f64,
    /// A covariance was singular and both were regularised.
    pub regularized: bool,
}

fn gaussian_fit(features: &[Vec<f64>]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    if features.len() < 2 {
        return Err(Error::TooFewItems {
            n: features.len(),
            min: 2,
        });
    }
    let d = features[0].len();
    if features.iter().any(|f| f.len() != d) {
        return Err(Error::shape("feature vectors differ in length"));
    }
    let n = features.len() as f64;
    let x = DMatrix::from_fn(features.len(), d, |r, c| features[r][c]);
    let mean = DVector::from_fn(d, |c, _| x.column(c).sum() / n);
    let mut centered = x;
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    let cov = centered.transpose() * &centered / (n - 1.0);
    Ok((mean, cov))
}

fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

fn is_singular(cov: &DMatrix<f64>) -> bool {
    let eig = SymmetricEigen::new((cov + cov.transpose()) * 0.5);
    let max = eig.eigenvalues.amax().max(1e-300);
    eig.eigenvalues.min() <= 1e-12 * max
}

/// ||μ₁−μ₂||² + Tr(Σ₁ + Σ₂ − 2(Σ₁Σ₂)^{1/2}); the trace of the product root is
/// evaluated as Tr((Σ₁^{1/2} Σ₂ Σ₁^{1/2})^{1/2}).
pub fn fgd(pred: &[Vec<f64>], gt: &[Vec<f64>]) -> Result<FgdResult> {
    let (m1, mut s1) = gaussian_fit(pred)?;
    let (m2, mut s2) = gaussian_fit(gt)?;
    if m1.len() != m2.len() {
        return Err(Error::shape(format!("{} vs {} feature dims", m1.len(), m2.len())));
    }
    let regularized = is_singular(&s1) || is_singular(&s2);
    if regularized {
        let eye = DMatrix::identity(m1.len(), m1.len()) * FGD_REGULARIZATION;
        s1 += &eye;
        s2 += &eye;
    }
    let r1 = psd_sqrt(&s1);
    let cross = psd_sqrt(&(&r1 * &s2 * &r1)).trace();
    let value = (&m1 - &m2).norm_squared() + s1.trace() + s2.trace() - 2.0 * cross;
    Ok(FgdResult {
        value: value.max(0.0),
        regularized,
    })
}

/// FGD over motions via a feature extractor (e.g. the frozen motion encoder).
pub fn fgd_motions(
    pred: &[MotionSequence],
    gt: &[MotionSequence],
    extractor: impl Fn(&MotionSequence) -> Result<Vec<f64>>,
) -> Result<FgdResult> {
    let fp = pred.iter().map(&extractor).collect::<Result<Vec<_>>>()?;
    let fg = gt.iter().map(&extractor).collect::<Result<Vec<_>>>()?;
    fgd(&fp, &fg)
}

/// Pearson correlation; 0 when either side is constant.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape(format!("{} vs {} samples", a.len(), b.len())));
    }
    if a.is_empty() {
        return Err(Error::EmptySet);
    }
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    if saa == 0.0 || sbb == 0.0 {
        return Ok(0.0);
    }
    Ok(sab / (saa * sbb).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricConfig {
    pub pck_delta_mm: f64,
    pub gad_tau_s: f64,
    pub fps: f64,
    pub mad_scheme: String,
    pub maje_convention: String,
    /// sha256 of the checkpoint whose encoder produced FGD features.
    pub fgd_extractor: Option<String>,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self {
            pck_delta_mm: DEFAULT_PCK_DELTA_MM,
            gad_tau_s: DEFAULT_GAD_TAU_S,
            fps: crate::motion::DEFAULT_FPS,
            mad_scheme: "second central difference x fps^2, mean abs per coordinate".into(),
            maje_convention: "mean abs error per coordinate".into(),
            fgd_extractor: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub pck: f64,
    pub fgd: Option<f64>,
    pub fgd_regularized: bool,
    pub maje: f64,
    pub mad: f64,
    pub gad: Option<f64>,
    pub items: usize,
    pub config: MetricConfig,
}

/// Averages PCK/MAJE/MAD over pairs and pools GAD over all segments.
pub fn evaluate_pairs(
    preds: &[MotionSequence],
    gts: &[MotionSequence],
    segments: Option<&[(SegmentAnnotation, SegmentAnnotation)]>,
    fgd_value: Option<FgdResult>,
    config: MetricConfig,
) -> Result<MetricReport> {
    if preds.len() != gts.len() {
        return Err(Error::shape(format!("{} predictions vs {} references", preds.len(), gts.len())));
    }
    if preds.is_empty() {
        return Err(Error::EmptySet);
    }
    let n = preds.len() as f64;
    let (mut p, mut j, mut a) = (0.0, 0.0, 0.0);
    for (x, y) in preds.iter().zip(gts) {
        p += pck(x, y, config.pck_delta_mm)?;
        j += maje(x, y)?;
        a += mad(x, y, config.fps)?;
    }
    let gad = match segments {
        None => None,
        Some(s) => {
            let (mut hits, mut total) = (0, 0);
            for (g, au) in s {
                let (h, t) = gad_counts(g, au, config.gad_tau_s)?;
                hits += h;
                total += t;
            }
            (total > 0).then(|| hits as f64 / total as f64)
        }
    };
    Ok(MetricReport {
        pck: p / n,
        fgd: fgd_value.map(|f| f.value),
        fgd_regularized: fgd_value.is_some_and(|f| f.regularized),
        maje: j / n,
        mad: a / n,
        gad,
        items: preds.len(),
        config,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::motion::synth::{synth_generate, SyntheticSpec};
    use crate::motion::{JointMap, PoseTable, Segment, Stream, NUM_JOINTS};
    use crate::rules::{text_to_units, MappingTable};
    use ndarray::Array3;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn motion(f: Array3<f64>) -> MotionSequence {
        MotionSequence::new(f, 30.0, JointMap::default()).unwrap()
    }

    fn random(rng: &mut ChaCha8Rng, len: usize, scale: f64) -> MotionSequence {
        motion(Array3::from_shape_fn((len, NUM_JOINTS, 3), |_| rng.gen_range(-scale..scale)))
    }

    fn segs(stream: Stream, mids: &[f64]) -> SegmentAnnotation {
        let s = mids
            .iter()
            .enumerate()
            .map(|(i, &m)| Segment { unit_index: i, start: m - 0.02, end: m + 0.02 })
            .collect();
        SegmentAnnotation::new(stream, s).unwrap()
    }

    #[test]
    fn identical_inputs_are_perfect() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = random(&mut rng, 10, 50.0);
        assert_eq!(pck(&m, &m, 10.0).unwrap(), 1.0);
        assert_eq!(maje(&m, &m).unwrap(), 0.0);
        assert_eq!(mad(&m, &m, 30.0).unwrap(), 0.0);
        let s = segs(Stream::Gesture, &[0.2, 0.6]);
        assert_eq!(gad(&s, &s.shifted(Stream::Audio, 0.0).unwrap(), 0.1).unwrap(), 1.0);
        let feats: Vec<Vec<f64>> = (0..30).map(|_| (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        assert!(fgd(&feats, &feats).unwrap().value < 1e-6);
    }

    #[test]
    fn uniform_offset_of_two_delta_fails_every_joint() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = random(&mut rng, 6, 50.0);
        let moved = m.with_frames(m.frames() + 20.0 / 3f64.sqrt()).unwrap();
        assert_eq!(pck(&moved, &m, 10.0).unwrap(), 0.0);
    }

    #[test]
    fn maje_counts_per_coordinate() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = random(&mut rng, 5, 50.0);
        let mut f = m.frames().clone();
        f.index_axis_mut(ndarray::Axis(2), 0).mapv_inplace(|v| v + 1.0);
        assert!((maje(&m.with_frames(f).unwrap(), &m).unwrap() - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn mad_ignores_constant_and_linear_terms() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = random(&mut rng, 12, 50.0);
        let ramp = Array3::from_shape_fn((12, NUM_JOINTS, 3), |(k, _, _)| 3.0 + 0.7 * k as f64);
        assert!(mad(&m.with_frames(m.frames() + &ramp).unwrap(), &m, 30.0).unwrap() < 1e-9);
        let a = 0.25;
        let quad = Array3::from_shape_fn((12, NUM_JOINTS, 3), |(k, _, _)| a * (k * k) as f64);
        let got = mad(&m.with_frames(m.frames() + &quad).unwrap(), &m, 30.0).unwrap();
        assert!((got - 2.0 * a * 900.0).abs() < 1e-6, "{got}");
        assert!(matches!(mad(&random(&mut rng, 2, 1.0), &random(&mut rng, 2, 1.0), 30.0), Err(Error::TooShort { .. })));
    }

    #[test]
    fn shape_and_count_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (a, b) = (random(&mut rng, 5, 1.0), random(&mut rng, 6, 1.0));
        assert!(matches!(pck(&a, &b, 10.0), Err(Error::ShapeMismatch(_))));
        assert!(matches!(maje(&a, &b), Err(Error::ShapeMismatch(_))));
        let g = segs(Stream::Gesture, &[0.1, 0.5]);
        let au = segs(Stream::Audio, &[0.1]);
        assert!(matches!(gad(&g, &au, 0.3), Err(Error::CountMismatch { gesture: 2, audio: 1 })));
    }

    #[test]
    fn gad_shift_of_two_tau_is_zero() {
        let g = segs(Stream::Gesture, &[0.3, 0.9, 1.4]);
        let au = g.shifted(Stream::Audio, 0.2).unwrap();
        assert_eq!(gad(&g, &au, 0.1).unwrap(), 0.0);
    }

    #[test]
    fn gad_on_oracle_offset() {
        let units = text_to_units("shu ma ni hao", &MappingTable::default()).unwrap();
        let out = synth_generate(&SyntheticSpec::new(units, 0.4), &PoseTable::default()).unwrap();
        assert_eq!(gad(&out.gesture_segments, &out.audio_segments, 0.3).unwrap(), 1.0);
        assert_eq!(gad(&out.gesture_segments, &out.audio_segments, 0.1).unwrap(), 0.0);
    }

    #[test]
    fn fgd_point_masses_give_squared_distance() {
        let a = vec![vec![1.0, 2.0, 3.0]; 5];
        let b = vec![vec![1.0, 2.0, 7.0]; 4];
        let r = fgd(&a, &b).unwrap();
        assert!(r.regularized);
        assert!((r.value - 16.0).abs() < 1e-9, "{}", r.value);
        assert!(matches!(fgd(&a[..1], &b), Err(Error::TooFewItems { n: 1, min: 2 })));
    }

    #[test]
    fn fgd_matches_two_dimensional_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let cloud = |rng: &mut ChaCha8Rng, mx: f64, sx: f64, rho: f64| -> Vec<Vec<f64>> {
            (0..400)
                .map(|_| {
                    let u: f64 = rng.sample(StandardNormal);
                    let v: f64 = rng.sample(StandardNormal);
                    vec![mx + sx * u, -1.0 + rho * u + v]
                })
                .collect()
        };
        let a = cloud(&mut rng, 0.0, 1.0, 0.5);
        let b = cloud(&mut rng, 2.0, 3.0, -0.8);
        // independent oracle: sample moments by hand and the 2×2 identity
        // Tr √M = √(tr M + 2√det M) for M with positive eigenvalues
        let moments = |s: &[Vec<f64>]| {
            let n = s.len() as f64;
            let m = [s.iter().map(|r| r[0]).sum::<f64>() / n, s.iter().map(|r| r[1]).sum::<f64>() / n];
            let mut c = [[0.0; 2]; 2];
            for r in s {
                for i in 0..2 {
                    for j in 0..2 {
                        c[i][j] += (r[i] - m[i]) * (r[j] - m[j]) / (n - 1.0);
                    }
                }
            }
            (m, c)
        };
        let ((ma, ca), (mb, cb)) = (moments(&a), moments(&b));
        let mut p = [[0.0; 2]; 2];
        for i in 0..2 {
            for j in 0..2 {
                p[i][j] = ca[i][0] * cb[0][j] + ca[i][1] * cb[1][j];
            }
        }
        let det = p[0][0] * p[1][1] - p[0][1] * p[1][0];
        let tr_sqrt = (p[0][0] + p[1][1] + 2.0 * det.sqrt()).sqrt();
        let expected = (ma[0] - mb[0]).powi(2) + (ma[1] - mb[1]).powi(2) + ca[0][0] + ca[1][1] + cb[0][0]
            + cb[1][1]
            - 2.0 * tr_sqrt;
        let got = fgd(&a, &b).unwrap();
        assert!(!got.regularized);
        assert!((got.value - expected).abs() < 1e-6, "{} vs {expected}", got.value);
    }

    #[test]
    fn pearson_basics() {
        assert!((pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!((pearson(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-12);
        assert_eq!(pearson(&[1.0, 1.0], &[0.0, 5.0]).unwrap(), 0.0);
    }

    #[test]
    fn report_aggregates() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let gts: Vec<_> = (0..3).map(|_| random(&mut rng, 8, 30.0)).collect();
        let g = segs(Stream::Gesture, &[0.2, 0.6]);
        let pairs = vec![(g.clone(), g.shifted(Stream::Audio, 0.05).unwrap()); 3];
        let r = evaluate_pairs(&gts, &gts, Some(&pairs), None, MetricConfig::default()).unwrap();
        assert_eq!((r.pck, r.maje, r.mad, r.gad, r.items), (1.0, 0.0, 0.0, Some(1.0), 3));
        let json = serde_json::to_string(&r).unwrap();
        assert_eq!(serde_json::from_str::<MetricReport>(&json).unwrap(), r);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(20))]

        #[test]
        fn metrics_match_naive_loops(seed in 0u64..10_000, len in 3usize..9) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let gt = random(&mut rng, len, 40.0);
            let noise = Array3::from_shape_fn((len, NUM_JOINTS, 3), |_| rng.gen_range(-12.0..12.0));
            let pred = gt.with_frames(gt.frames() + &noise).unwrap();
            let (p, g) = (pred.frames(), gt.frames());
            let (mut hits, mut abs, mut acc) = (0usize, 0.0, 0.0);
            for k in 0..len {
                for j in 0..NUM_JOINTS {
                    let mut d2 = 0.0;
                    for c in 0..3 {
                        d2 += (p[[k, j, c]] - g[[k, j, c]]).powi(2);
                        abs += (p[[k, j, c]] - g[[k, j, c]]).abs();
                        if k >= 1 && k + 1 < len {
                            let a1 = (p[[k + 1, j, c]] - 2.0 * p[[k, j, c]] + p[[k - 1, j, c]]) * 900.0;
                            let a2 = (g[[k + 1, j, c]] - 2.0 * g[[k, j, c]] + g[[k - 1, j, c]]) * 900.0;
                            acc += (a1 - a2).abs();
                        }
                    }
                    if d2.sqrt() < 10.0 {
                        hits += 1;
                    }
                }
            }
            let n = (len * NUM_JOINTS) as f64;
            prop_assert!((pck(&pred, &gt, 10.0).unwrap() - hits as f64 / n).abs() < 1e-9);
            prop_assert!((maje(&pred, &gt).unwrap() - abs / (3.0 * n)).abs() < 1e-9);
            let mad_naive = acc / ((len - 2) * NUM_JOINTS * 3) as f64;
            prop_assert!((mad(&pred, &gt, 30.0).unwrap() - mad_naive).abs() < 1e-9 * mad_naive.max(1.0));
            prop_assert!((maje(&pred, &gt).unwrap() - maje(&gt, &pred).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn gad_matches_naive_count(seed in 0u64..10_000, n in 1usize..12, tau in 0.01f64..0.25) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let gm: Vec<f64> = (0..n).map(|i| 0.5 * i as f64 + 0.1).collect();
            let am: Vec<f64> = gm.iter().map(|m| m + rng.gen_range(-0.2..0.2)).collect();
            let g = segs(Stream::Gesture, &gm);
            let a = segs(Stream::Audio, &am);
            let mut hits = 0;
            for i in 0..n {
                if (g.midpoints()[i] - a.midpoints()[i]).abs() < tau {
                    hits += 1;
                }
            }
            prop_assert!((gad(&g, &a, tau).unwrap() - hits as f64 / n as f64).abs() < 1e-12);
            prop_assert!(gad(&g, &a, tau * 1.5).unwrap() >= gad(&g, &a, tau).unwrap());
        }

        #[test]
        fn pck_is_monotone_in_delta(seed in 0u64..10_000, d in 1.0f64..30.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (a, b) = (random(&mut rng, 4, 20.0), random(&mut rng, 4, 20.0));
            prop_assert!(pck(&a, &b, d * 1.3).unwrap() >= pck(&a, &b, d).unwrap());
        }

        #[test]
        fn mad_is_translation_invariant(seed in 0u64..10_000, shift in -100.0f64..100.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (a, b) = (random(&mut rng, 6, 20.0), random(&mut rng, 6, 20.0));
            let moved = a.with_frames(a.frames() + shift).unwrap();
            prop_assert!((mad(&moved, &b, 30.0).unwrap() - mad(&a, &b, 30.0).unwrap()).abs() < 1e-6);
        }

        #[test]
        fn fgd_is_symmetric(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut cloud = |m: f64| -> Vec<Vec<f64>> {
                (0..12).map(|_| (0..3).map(|_| m + rng.gen_range(-1.0..1.0)).collect()).collect()
            };
            let (a, b) = (cloud(0.0), cloud(0.5));
            let (x, y) = (fgd(&a, &b).unwrap().value, fgd(&b, &a).unwrap().value);
            prop_assert!((x - y).abs() < 1e-6, "{} {}", x, y);
            prop_assert!(x >= 0.0);
        }
    }
}
