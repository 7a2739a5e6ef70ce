//! Confusion matrices, accuracy statistics and classification maps.
//!
//! Maps are written as binary PPM (`P6`, maxval 255). Raster value 0 (not
//! predicted) is black; class `k >= 1` uses `PALETTE[k - 1]` for `k <= 16`
//! and a golden-angle hue walk beyond that.

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{extract_patch, HsiCube};
use crate::error::{arg_err, shape_err, Result};
use crate::model::{predict, BiClstmModel};

/// Counts with rows = true class and columns = predicted class, both 0-based.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn from_counts(rows: &[Vec<u64>]) -> Result<Self> {
        let c = rows.len();
        if rows.iter().any(|r| r.len() != c) {
            return shape_err("confusion matrix must be square");
        }
        Ok(ConfusionMatrix {
            classes: c,
            counts: rows.concat(),
        })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn count(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn rows(&self) -> Vec<Vec<u64>> {
        self.counts.chunks(self.classes.max(1)).map(<[u64]>::to_vec).collect()
    }

    pub fn accumulate(&mut self, truth: usize, pred: usize) -> Result<()> {
        if truth >= self.classes || pred >= self.classes {
            return arg_err(format!(
                "class pair ({truth}, {pred}) out of range for {} classes",
                self.classes
            ));
        }
        self.counts[truth * self.classes + pred] += 1;
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return shape_err(format!(
                "cannot merge {}-class and {}-class matrices",
                self.classes, other.classes
            ));
        }
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn row_sums(&self) -> Vec<u64> {
        (0..self.classes)
            .map(|i| (0..self.classes).map(|j| self.count(i, j)).sum())
            .collect()
    }

    pub fn col_sums(&self) -> Vec<u64> {
        (0..self.classes)
            .map(|j| (0..self.classes).map(|i| self.count(i, j)).sum())
            .collect()
    }

    fn trace(&self) -> u64 {
        (0..self.classes).map(|i| self.count(i, i)).sum()
    }

    fn nonempty_total(&self) -> Result<f64> {
        match self.total() {
            0 => arg_err("confusion matrix is empty"),
            t => Ok(t as f64),
        }
    }

    pub fn oa(&self) -> Result<f64> {
        Ok(self.trace() as f64 / self.nonempty_total()?)
    }

    /// Per-class recall; `None` for classes with no true samples.
    pub fn per_class(&self) -> Result<Vec<Option<f64>>> {
        self.nonempty_total()?;
        Ok(self
            .row_sums()
            .iter()
            .enumerate()
            .map(|(i, &r)| (r > 0).then(|| self.count(i, i) as f64 / r as f64))
            .collect())
    }

    /// Mean per-class accuracy over classes present in the matrix.
    pub fn aa(&self) -> Result<f64> {
        let per = self.per_class()?;
        let present: Vec<f64> = per.iter().flatten().copied().collect();
        if present.len() < per.len() {
            let missing: Vec<usize> = (0..per.len()).filter(|&i| per[i].is_none()).collect();
            warn!("average accuracy excludes classes with no samples: {missing:?}");
        }
        Ok(present.iter().sum::<f64>() / present.len() as f64)
    }

    /// Cohen's kappa. When chance agreement is total, returns 1 for perfect
    /// observed agreement and an error otherwise.
    pub fn kappa(&self) -> Result<f64> {
        let total = self.nonempty_total()?;
        let po = self.trace() as f64 / total;
        let pe = self
            .row_sums()
            .iter()
            .zip(self.col_sums())
            .map(|(&r, c)| r as f64 * c as f64)
            .sum::<f64>()
            / (total * total);
        if pe == 1.0 {
            if po == 1.0 {
                return Ok(1.0);
            }
            return arg_err("kappa undefined: chance agreement is 1 but observed agreement is not");
        }
        Ok((po - pe) / (1.0 - pe))
    }

    pub fn report(&self) -> Result<MetricsReport> {
        Ok(MetricsReport {
            oa: self.oa()?,
            aa: self.aa()?,
            kappa: self.kappa()?,
            per_class: self.per_class()?,
            confusion: self.rows(),
        })
    }
}

/// Serializable summary of a confusion matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub oa: f64,
    pub aa: f64,
    pub kappa: f64,
    pub per_class: Vec<Option<f64>>,
    pub confusion: Vec<Vec<u64>>,
}

fn predict_pixels(cube: &HsiCube, model: &BiClstmModel, pixels: &[(usize, usize)]) -> Result<Vec<usize>> {
    let c = model.config();
    if cube.bands() != c.bands {
        return shape_err(format!("cube has {} bands, model expects {}", cube.bands(), c.bands));
    }
    pixels
        .par_iter()
        .map(|&(i, j)| {
            let seq = extract_patch(cube, i, j, c.patch_size, c.band_group)?;
            Ok(predict(&seq, model)?.0)
        })
        .collect()
}

/// Confusion matrix of `model` on the given labeled pixels.
pub fn evaluate(cube: &HsiCube, model: &BiClstmModel, pixels: &[(usize, usize)]) -> Result<ConfusionMatrix> {
    let preds = predict_pixels(cube, model, pixels)?;
    let mut cm = ConfusionMatrix::new(model.config().classes);
    for (&(i, j), pred) in pixels.iter().zip(preds) {
        let label = cube.label(i, j);
        if label == 0 {
            return arg_err(format!("pixel ({i}, {j}) is unlabeled"));
        }
        cm.accumulate(label as usize - 1, pred)?;
    }
    Ok(cm)
}

/// Predicted label raster (row-major, classes `1..=c`). Unlabeled pixels are
/// 0 unless `all_pixels` is set.
pub fn render_map(cube: &HsiCube, model: &BiClstmModel, all_pixels: bool) -> Result<Vec<u16>> {
    let n = cube.cols();
    let pixels: Vec<(usize, usize)> = if all_pixels {
        (0..cube.rows() * n).map(|k| (k / n, k % n)).collect()
    } else {
        cube.labeled_pixels()
    };
    let preds = predict_pixels(cube, model, &pixels)?;
    let mut raster = vec![0u16; cube.rows() * n];
    for ((i, j), pred) in pixels.into_iter().zip(preds) {
        raster[i * n + j] = pred as u16 + 1;
    }
    Ok(raster)
}

pub const PALETTE: [[u8; 3]; 16] = [
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
    [210, 245, 60],
    [250, 190, 212],
    [0, 128, 128],
    [220, 190, 255],
    [170, 110, 40],
    [255, 250, 200],
    [128, 0, 0],
    [170, 255, 195],
];

pub fn class_color(label: u16) -> [u8; 3] {
    match label {
        0 => [0, 0, 0],
        k if (k as usize) <= PALETTE.len() => PALETTE[k as usize - 1],
        k => {
            let hue = (k as f64 * 0.618_033_988_749_895).fract() * 6.0;
            let x = 1.0 - (hue % 2.0 - 1.0).abs();
            let (r, g, b) = match hue as u32 {
                0 => (1.0, x, 0.0),
                1 => (x, 1.0, 0.0),
                2 => (0.0, 1.0, x),
                3 => (0.0, x, 1.0),
                4 => (x, 0.0, 1.0),
                _ => (1.0, 0.0, x),
            };
            [r, g, b].map(|v: f64| (55.0 + 200.0 * v).round() as u8)
        }
    }
}

/// Binary PPM image of a label raster, with an optional single-line header
/// comment.
pub fn map_to_ppm(raster: &[u16], rows: usize, cols: usize, comment: Option<&str>) -> Result<Vec<u8>> {
    if raster.len() != rows * cols {
        return shape_err(format!("raster has {} pixels, expected {rows}x{cols}", raster.len()));
    }
    let mut out = b"P6\n".to_vec();
    if let Some(c) = comment {
        if c.contains(['\n', '\r']) {
            return arg_err("map comment must be a single line");
        }
        out.extend_from_slice(format!("# {c}\n").as_bytes());
    }
    out.extend_from_slice(format!("{cols} {rows}\n255\n").as_bytes());
    for &l in raster {
        out.extend_from_slice(&class_color(l));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::rng::Rng;
    use crate::tensor::Tensor;
    use proptest::prelude::*;

    fn sample_matrix() -> ConfusionMatrix {
        ConfusionMatrix::from_counts(&[vec![50, 10], vec![5, 35]]).unwrap()
    }

    #[test]
    fn hand_computed_two_class() {
        let cm = sample_matrix();
        assert!((cm.oa().unwrap() - 0.85).abs() < 1e-12);
        let pe = (60.0 * 55.0 + 40.0 * 45.0) / 10_000.0;
        assert!((pe - 0.51_f64).abs() < 1e-15);
        assert!((cm.kappa().unwrap() - (0.85 - pe) / (1.0 - pe)).abs() < 1e-12);
        assert!((cm.kappa().unwrap() - 0.693878).abs() < 1e-6);
        let per = cm.per_class().unwrap();
        assert!((per[0].unwrap() - 50.0 / 60.0).abs() < 1e-12);
        assert!((per[1].unwrap() - 35.0 / 40.0).abs() < 1e-12);
        assert!((cm.aa().unwrap() - (50.0 / 60.0 + 35.0 / 40.0) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn perfect_diagonal() {
        let cm = ConfusionMatrix::from_counts(&[vec![4, 0, 0], vec![0, 7, 0], vec![0, 0, 1]]).unwrap();
        assert_eq!(
            (cm.oa().unwrap(), cm.aa().unwrap(), cm.kappa().unwrap()),
            (1.0, 1.0, 1.0)
        );
        // Single class: chance agreement is total.
        let one = ConfusionMatrix::from_counts(&[vec![5, 0], vec![0, 0]]).unwrap();
        assert_eq!(one.kappa().unwrap(), 1.0);
        assert_eq!(one.aa().unwrap(), 1.0);
        assert_eq!(one.per_class().unwrap()[1], None);
    }

    #[test]
    fn empty_and_out_of_range() {
        let mut cm = ConfusionMatrix::new(3);
        assert!(cm.oa().is_err());
        assert!(cm.kappa().is_err());
        assert!(cm.aa().is_err());
        assert!(cm.accumulate(3, 0).is_err());
        cm.accumulate(0, 0).unwrap();
        assert_eq!((cm.count(0, 0), cm.total()), (1, 1));
        assert!(cm.merge(&ConfusionMatrix::new(2)).is_err());
    }

    #[test]
    fn accumulation_matches_tally() {
        let mut rng = Rng::new(1);
        let pairs: Vec<(usize, usize)> = (0..1000)
            .map(|_| (rng.below(4) as usize, rng.below(4) as usize))
            .collect();
        let mut cm = ConfusionMatrix::new(4);
        let mut tally = [0u64; 4];
        for &(t, p) in &pairs {
            cm.accumulate(t, p).unwrap();
            tally[t] += 1;
        }
        assert_eq!(cm.row_sums(), tally);
        let mut reversed = ConfusionMatrix::new(4);
        for &(t, p) in pairs.iter().rev() {
            reversed.accumulate(t, p).unwrap();
        }
        assert_eq!(cm, reversed);
        let (mut a, mut b) = (ConfusionMatrix::new(4), ConfusionMatrix::new(4));
        for (k, &(t, p)) in pairs.iter().enumerate() {
            if k % 2 == 0 { &mut a } else { &mut b }.accumulate(t, p).unwrap();
        }
        a.merge(&b).unwrap();
        assert_eq!(a, cm);
    }

    #[test]
    fn chance_kappa_is_near_zero() {
        let mut rng = Rng::new(2);
        let mut cm = ConfusionMatrix::new(5);
        for _ in 0..100_000 {
            cm.accumulate(rng.below(5) as usize, rng.below(5) as usize).unwrap();
        }
        assert!(cm.kappa().unwrap().abs() < 0.02);
    }

    proptest! {
        #[test]
        fn statistics_are_bounded_and_permutation_invariant(
            counts in prop::collection::vec(0u64..50, 9),
            perm_seed in any::<u64>(),
        ) {
            prop_assume!(counts.iter().sum::<u64>() > 0);
            let rows: Vec<Vec<u64>> = counts.chunks(3).map(<[u64]>::to_vec).collect();
            let cm = ConfusionMatrix::from_counts(&rows).unwrap();
            let oa = cm.oa().unwrap();
            prop_assert!((0.0..=1.0).contains(&oa));
            prop_assert!((0.0..=1.0).contains(&cm.aa().unwrap()));
            if let Ok(k) = cm.kappa() {
                prop_assert!((-1.0..=1.0 + 1e-12).contains(&k));
                prop_assert!(k <= oa + 1e-12);

                let mut perm = [0usize, 1, 2];
                Rng::new(perm_seed).shuffle(&mut perm);
                let permuted: Vec<Vec<u64>> = (0..3)
                    .map(|i| (0..3).map(|j| rows[perm[i]][perm[j]]).collect())
                    .collect();
                let pm = ConfusionMatrix::from_counts(&permuted).unwrap();
                prop_assert!((pm.oa().unwrap() - oa).abs() < 1e-12);
                prop_assert!((pm.aa().unwrap() - cm.aa().unwrap()).abs() < 1e-12);
                prop_assert!((pm.kappa().unwrap() - k).abs() < 1e-12);
            }
        }
    }

    fn constant_model(bands: usize, classes: usize, k: usize) -> BiClstmModel {
        let config = ModelConfig {
            hidden_channels: 1,
            ..ModelConfig::new(bands, classes)
        };
        let mut m = BiClstmModel::zeros(config).unwrap();
        m.head_mut().bias.data_mut()[k] = 5.0;
        m
    }

    fn small_cube() -> HsiCube {
        let mut rng = Rng::new(3);
        let values = crate::rng::rng_uniform(&mut rng, &[2, 6, 5], 0.0, 1.0).unwrap();
        let labels = (0..30)
            .map(|k| if k % 4 == 0 { 0 } else { (k % 3) as u16 + 1 })
            .collect();
        HsiCube::new(values, labels).unwrap()
    }

    #[test]
    fn constant_model_renders_constant_map() {
        let cube = small_cube();
        let m = constant_model(2, 3, 1);
        let raster = render_map(&cube, &m, true).unwrap();
        assert!(raster.iter().all(|&l| l == 2));
        let labeled = render_map(&cube, &m, false).unwrap();
        for (k, &l) in labeled.iter().enumerate() {
            assert_eq!(l, if cube.labels[k] == 0 { 0 } else { 2 });
        }
        let wrong = constant_model(3, 3, 1);
        assert!(render_map(&cube, &wrong, true).is_err());
    }

    #[test]
    fn map_agrees_with_pointwise_prediction() {
        let cube = small_cube();
        let config = ModelConfig {
            hidden_channels: 2,
            ..ModelConfig::new(2, 3)
        };
        let m = BiClstmModel::new(config, &mut Rng::new(4), 1.0).unwrap();
        let raster = render_map(&cube, &m, true).unwrap();
        for i in 0..cube.rows() {
            for j in 0..cube.cols() {
                let seq = extract_patch(&cube, i, j, 8, 1).unwrap();
                assert_eq!(raster[i * cube.cols() + j] as usize, predict(&seq, &m).unwrap().0 + 1);
            }
        }
        assert_eq!(raster, render_map(&cube, &m, true).unwrap());
    }

    #[test]
    fn all_correct_model_scores_one() {
        let values = Tensor::zeros(&[1, 4, 4]);
        let cube = HsiCube::new(values, vec![2; 16]).unwrap();
        let m = constant_model(1, 2, 1);
        let r = evaluate(&cube, &m, &cube.labeled_pixels()).unwrap().report().unwrap();
        assert_eq!((r.oa, r.aa, r.kappa), (1.0, 1.0, 1.0));
    }

    #[test]
    fn ppm_layout() {
        let bytes = map_to_ppm(&[0, 1, 2, 17], 2, 2, None).unwrap();
        let header = b"P6\n2 2\n255\n";
        assert_eq!(&bytes[..header.len()], header);
        assert_eq!(bytes.len(), header.len() + 12);
        assert_eq!(&bytes[header.len()..header.len() + 6], &[0, 0, 0, 230, 25, 75]);
        assert!(map_to_ppm(&[0, 1], 2, 2, None).is_err());
        let with = map_to_ppm(&[1], 1, 1, Some("seed 3")).unwrap();
        assert_eq!(with, b"P6\n# seed 3\n1 1\n255\n\xe6\x19\x4b".to_vec());
        assert!(map_to_ppm(&[1], 1, 1, Some("a\nb")).is_err());
        assert_ne!(class_color(17), class_color(18));
    }
}
