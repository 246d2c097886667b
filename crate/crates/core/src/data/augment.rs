//! Feature-vector augmentations. Instances are viewed as a `rows × cols`
//! grid so flips, quarter turns and crop masks have a spatial meaning;
//! crops zero everything outside a random window, keeping the dimension.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CropView {
    Global,
    Local,
}

impl CropView {
    /// Range of the kept window's area fraction.
    pub fn default_scale(self) -> (f64, f64) {
        match self {
            CropView::Global => (0.5, 1.0),
            CropView::Local => (0.15, 0.4),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Transform {
    HorizontalFlip { p: f64 },
    VerticalFlip { p: f64 },
    Rotate90 { p: f64 },
    GaussianNoise { sigma: f64 },
    ScaleJitter { low: f64, high: f64 },
    CropMask { view: CropView, low: f64, high: f64 },
}

impl Transform {
    pub fn crop(view: CropView) -> Self {
        let (low, high) = view.default_scale();
        Transform::CropMask { view, low, high }
    }

    fn validate(&self, grid: (usize, usize)) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        match *self {
            Transform::HorizontalFlip { p } | Transform::VerticalFlip { p } | Transform::Rotate90 { p }
                if !(0.0..=1.0).contains(&p) =>
            {
                bad(format!("probability {p} outside [0, 1]"))
            }
            Transform::Rotate90 { .. } if grid.0 != grid.1 => {
                bad(format!("quarter turn needs a square grid, got {grid:?}"))
            }
            Transform::GaussianNoise { sigma } if !(sigma >= 0.0 && sigma.is_finite()) => {
                bad(format!("noise sigma {sigma}"))
            }
            Transform::ScaleJitter { low, high } if !(low > 0.0 && low <= high && high.is_finite()) => {
                bad(format!("scale range [{low}, {high}]"))
            }
            Transform::CropMask { low, high, .. } if !(low > 0.0 && low <= high && high <= 1.0) => {
                bad(format!("crop area range [{low}, {high}]"))
            }
            _ => Ok(()),
        }
    }
}

/// Ordered transform list applied to instances of a fixed grid shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationSpec {
    pub grid: (usize, usize),
    pub transforms: Vec<Transform>,
}

impl AugmentationSpec {
    pub fn new(grid: (usize, usize), transforms: Vec<Transform>) -> Result<Self> {
        let spec = Self { grid, transforms };
        spec.validate()?;
        Ok(spec)
    }

    pub fn identity(grid: (usize, usize)) -> Self {
        Self {
            grid,
            transforms: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid.0 == 0 || self.grid.1 == 0 {
            return Err(Error::InvalidParameter("empty augmentation grid".into()));
        }
        self.transforms.iter().try_for_each(|t| t.validate(self.grid))
    }

    pub fn dim(&self) -> usize {
        self.grid.0 * self.grid.1
    }
}

/// Near-square grid for a feature dimension: the largest divisor not above
/// its square root gives the row count.
pub fn grid_for(dim: usize) -> (usize, usize) {
    let mut rows = (dim as f64).sqrt() as usize;
    while rows > 1 && dim % rows != 0 {
        rows -= 1;
    }
    let rows = rows.max(1);
    (rows, dim / rows)
}

fn flip_horizontal(x: &mut [f64], (rows, cols): (usize, usize)) {
    for r in 0..rows {
        x[r * cols..(r + 1) * cols].reverse();
    }
}

fn flip_vertical(x: &mut [f64], (rows, cols): (usize, usize)) {
    for r in 0..rows / 2 {
        for c in 0..cols {
            x.swap(r * cols + c, (rows - 1 - r) * cols + c);
        }
    }
}

/// Clockwise quarter turn of a square grid.
fn rotate90(x: &mut [f64], n: usize) {
    let src = x.to_vec();
    for r in 0..n {
        for c in 0..n {
            x[r * n + c] = src[(n - 1 - c) * n + r];
        }
    }
}

fn crop_mask(x: &mut [f64], (rows, cols): (usize, usize), low: f64, high: f64, rng: &mut impl Rng) {
    let area = if low < high { rng.random_range(low..=high) } else { low };
    let side = area.sqrt();
    let h = ((side * rows as f64).round() as usize).clamp(1, rows);
    let w = ((side * cols as f64).round() as usize).clamp(1, cols);
    let top = rng.random_range(0..=rows - h);
    let left = rng.random_range(0..=cols - w);
    for r in 0..rows {
        for c in 0..cols {
            if r < top || r >= top + h || c < left || c >= left + w {
                x[r * cols + c] = 0.0;
            }
        }
    }
}

/// Applies the transforms in order; a pure function of `(instance, rng)`.
pub fn apply_augmentations(spec: &AugmentationSpec, instance: &[f64], rng: &mut impl Rng) -> Result<Vec<f64>> {
    if instance.len() != spec.dim() {
        return Err(Error::ShapeMismatch(format!(
            "instance of length {} for a {:?} grid",
            instance.len(),
            spec.grid
        )));
    }
    let mut x = instance.to_vec();
    for t in &spec.transforms {
        match *t {
            Transform::HorizontalFlip { p } => {
                if rng.random_bool(p) {
                    flip_horizontal(&mut x, spec.grid);
                }
            }
            Transform::VerticalFlip { p } => {
                if rng.random_bool(p) {
                    flip_vertical(&mut x, spec.grid);
                }
            }
            Transform::Rotate90 { p } => {
                if rng.random_bool(p) {
                    rotate90(&mut x, spec.grid.0);
                }
            }
            Transform::GaussianNoise { sigma } => {
                if sigma > 0.0 {
                    for v in x.iter_mut() {
                        *v += sigma * rng.sample::<f64, _>(StandardNormal);
                    }
                }
            }
            Transform::ScaleJitter { low, high } => {
                let s = if low < high { rng.random_range(low..=high) } else { low };
                x.iter_mut().for_each(|v| *v *= s);
            }
            Transform::CropMask { low, high, .. } => crop_mask(&mut x, spec.grid, low, high, rng),
        }
    }
    Ok(x)
}

/// Augments every row of a matrix with one rng stream.
pub fn augment_rows(spec: &AugmentationSpec, x: &Matrix, rng: &mut impl Rng) -> Result<Matrix> {
    let mut data = Vec::with_capacity(x.rows() * x.cols());
    for r in 0..x.rows() {
        data.extend(apply_augmentations(spec, x.row(r), rng)?);
    }
    Matrix::new(x.rows(), x.cols(), data)
}

/// Global and local view recipes for multi-crop training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiCropSpec {
    pub n_global: usize,
    pub n_local: usize,
    pub global: AugmentationSpec,
    pub local: AugmentationSpec,
}

impl MultiCropSpec {
    /// Default recipe: crop mask, additive noise and scale jitter.
    pub fn standard(dim: usize, n_global: usize, n_local: usize, noise: f64) -> Result<Self> {
        let grid = grid_for(dim);
        let recipe = |view| {
            AugmentationSpec::new(
                grid,
                vec![
                    Transform::crop(view),
                    Transform::GaussianNoise { sigma: noise },
                    Transform::ScaleJitter { low: 0.8, high: 1.2 },
                ],
            )
        };
        if n_global == 0 {
            return Err(Error::InvalidParameter("multi-crop needs a global view".into()));
        }
        Ok(Self {
            n_global,
            n_local,
            global: recipe(CropView::Global)?,
            local: recipe(CropView::Local)?,
        })
    }

    pub fn n_views(&self) -> usize {
        self.n_global + self.n_local
    }

    /// All views of a batch, globals first. View `v` uses its own rng stream
    /// derived from `seed`, so views can be generated independently.
    pub fn views(&self, x: &Matrix, seed: u64) -> Result<Vec<Matrix>> {
        (0..self.n_views())
            .map(|v| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(v as u64 + 1);
                let spec = if v < self.n_global { &self.global } else { &self.local };
                augment_rows(spec, x, &mut rng)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(42)
    }

    #[test]
    fn double_flip_is_identity() {
        let x: Vec<f64> = (0..12).map(f64::from).collect();
        let spec = AugmentationSpec::new((3, 4), vec![Transform::HorizontalFlip { p: 1.0 }; 2]).unwrap();
        assert_eq!(apply_augmentations(&spec, &x, &mut rng()).unwrap(), x);
        let spec = AugmentationSpec::new((3, 4), vec![Transform::VerticalFlip { p: 1.0 }; 2]).unwrap();
        assert_eq!(apply_augmentations(&spec, &x, &mut rng()).unwrap(), x);
        let spec = AugmentationSpec::new((3, 3), vec![Transform::Rotate90 { p: 1.0 }; 4]).unwrap();
        let x9: Vec<f64> = (0..9).map(f64::from).collect();
        assert_eq!(apply_augmentations(&spec, &x9, &mut rng()).unwrap(), x9);
    }

    #[test]
    fn single_flip_moves_values() {
        let x: Vec<f64> = (0..4).map(f64::from).collect();
        let h = AugmentationSpec::new((2, 2), vec![Transform::HorizontalFlip { p: 1.0 }]).unwrap();
        assert_eq!(apply_augmentations(&h, &x, &mut rng()).unwrap(), vec![1.0, 0.0, 3.0, 2.0]);
        let r = AugmentationSpec::new((2, 2), vec![Transform::Rotate90 { p: 1.0 }]).unwrap();
        assert_eq!(apply_augmentations(&r, &x, &mut rng()).unwrap(), vec![2.0, 0.0, 3.0, 1.0]);
    }

    #[test]
    fn zero_probabilities_are_identity() {
        let x: Vec<f64> = (0..16).map(|i| f64::from(i) * 0.3 - 1.0).collect();
        let spec = AugmentationSpec::new(
            (4, 4),
            vec![
                Transform::HorizontalFlip { p: 0.0 },
                Transform::VerticalFlip { p: 0.0 },
                Transform::Rotate90 { p: 0.0 },
                Transform::GaussianNoise { sigma: 0.0 },
            ],
        )
        .unwrap();
        assert_eq!(apply_augmentations(&spec, &x, &mut rng()).unwrap(), x);
    }

    #[test]
    fn noise_mean_absolute_perturbation() {
        let sigma = 0.7;
        let spec = AugmentationSpec::new((10, 10), vec![Transform::GaussianNoise { sigma }]).unwrap();
        let x = vec![0.0; 100];
        let mut r = rng();
        let mut total = 0.0;
        let draws = 200;
        for _ in 0..draws {
            total += apply_augmentations(&spec, &x, &mut r).unwrap().iter().map(|v| v.abs()).sum::<f64>();
        }
        let mean = total / (100 * draws) as f64;
        let want = sigma * (2.0 / std::f64::consts::PI).sqrt();
        assert!((mean - want).abs() < 0.1 * want, "{mean} vs {want}");
    }

    #[test]
    fn invalid_parameters_rejected() {
        assert!(AugmentationSpec::new((2, 2), vec![Transform::HorizontalFlip { p: 1.5 }]).is_err());
        assert!(AugmentationSpec::new((2, 3), vec![Transform::Rotate90 { p: 0.5 }]).is_err());
        assert!(AugmentationSpec::new((2, 2), vec![Transform::GaussianNoise { sigma: -1.0 }]).is_err());
        assert!(AugmentationSpec::new((2, 2), vec![Transform::ScaleJitter { low: 2.0, high: 1.0 }]).is_err());
        let spec = AugmentationSpec::identity((2, 2));
        assert!(apply_augmentations(&spec, &[1.0; 5], &mut rng()).is_err());
    }

    #[test]
    fn crop_keeps_dimension_and_zeroes_outside() {
        let spec = AugmentationSpec::new((8, 8), vec![Transform::crop(CropView::Local)]).unwrap();
        let x = vec![1.0; 64];
        let y = apply_augmentations(&spec, &x, &mut rng()).unwrap();
        assert_eq!(y.len(), 64);
        let kept = y.iter().filter(|v| **v == 1.0).count();
        assert!(kept > 0 && kept < 64);
    }

    #[test]
    fn multicrop_views_are_reproducible() {
        let mc = MultiCropSpec::standard(16, 2, 3, 0.2).unwrap();
        let x = Matrix::from_fn(4, 16, |r, c| (r * 16 + c) as f64 * 0.01);
        let a = mc.views(&x, 5).unwrap();
        assert_eq!(a.len(), 5);
        assert_eq!(a, mc.views(&x, 5).unwrap());
        assert_ne!(a[0], a[1]);
        assert_eq!(grid_for(64), (8, 8));
        assert_eq!(grid_for(12), (3, 4));
        assert_eq!(grid_for(7), (1, 7));
    }
}
