//! Scalar fields on a pixel grid and class-index label maps.

use bayeseg_tensor::Tensor;

use crate::error::{Error, Result};

/// Row-major `height x width` field of reals.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageGrid {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl ImageGrid {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape(
                "ImageGrid::new",
                format!("{} values for a {height}x{width} grid", data.len()),
            ));
        }
        Ok(ImageGrid { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        ImageGrid {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self::filled(height, width, 0.0)
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x));
            }
        }
        ImageGrid { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: f64) {
        self.data[y * self.width + x] = v;
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> ImageGrid {
        ImageGrid {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Elementwise combination of two same-sized grids.
    pub fn zip_with(&self, other: &ImageGrid, f: impl Fn(f64, f64) -> f64) -> Result<ImageGrid> {
        self.check_same(other, "ImageGrid::zip_with")?;
        Ok(ImageGrid {
            height: self.height,
            width: self.width,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn check_same(&self, other: &ImageGrid, op: &'static str) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::shape(op, format!("{:?} vs {:?}", self.dims(), other.dims())));
        }
        Ok(())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    /// Population standard deviation.
    pub fn std(&self) -> f64 {
        let m = self.mean();
        (self.data.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / self.data.len() as f64).sqrt()
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    /// `[1, 1, H, W]` tensor view.
    pub fn to_tensor(&self) -> Tensor<f64> {
        Tensor::new(vec![1, 1, self.height, self.width], self.data.clone()).expect("grid length matches dims")
    }

    /// Reads channel `c` of item `n` from an `[N, C, H, W]` tensor.
    pub fn from_channel<T: bayeseg_tensor::Element>(t: &Tensor<T>, n: usize, c: usize) -> Result<Self> {
        let d = t.dims();
        if d.len() != 4 || n >= d[0] || c >= d[1] {
            return Err(Error::shape(
                "ImageGrid::from_channel",
                format!("item {n} channel {c} of {d:?}"),
            ));
        }
        let plane = d[2] * d[3];
        let start = (n * d[1] + c) * plane;
        Ok(ImageGrid {
            height: d[2],
            width: d[3],
            data: t.data()[start..start + plane].iter().map(|v| v.as_f64()).collect(),
        })
    }
}

/// Stacks same-sized grids into a `[N, C, H, W]` tensor, item-major.
pub fn stack_grids<T: bayeseg_tensor::Element>(items: &[Vec<&ImageGrid>]) -> Result<Tensor<T>> {
    let first = items
        .first()
        .and_then(|c| c.first())
        .ok_or_else(|| Error::shape("stack_grids", "no grids"))?;
    let (h, w) = first.dims();
    let ch = items[0].len();
    let mut data = Vec::with_capacity(items.len() * ch * h * w);
    for item in items {
        if item.len() != ch {
            return Err(Error::shape("stack_grids", "ragged channel counts"));
        }
        for g in item {
            g.check_same(first, "stack_grids")?;
            data.extend(g.data.iter().map(|&v| T::from_f64_lossy(v)));
        }
    }
    Ok(Tensor::new(vec![items.len(), ch, h, w], data)?)
}

/// Per-pixel class indices in `0..classes`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    classes: usize,
    labels: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, classes: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::shape(
                "LabelMap::new",
                format!("{} labels for a {height}x{width} grid", labels.len()),
            ));
        }
        if classes < 2 || classes > 256 {
            return Err(Error::Data(format!("class count {classes} outside 2..=256")));
        }
        if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l as usize >= classes) {
            return Err(Error::Data(format!(
                "label {l} at pixel {i} exceeds {} classes",
                classes
            )));
        }
        Ok(LabelMap {
            height,
            width,
            classes,
            labels,
        })
    }

    /// Validates a one-hot encoding (`classes` grids) and collapses it.
    pub fn from_one_hot(u: &[ImageGrid]) -> Result<Self> {
        let first = u.first().ok_or_else(|| Error::Data("empty one-hot stack".into()))?;
        let (h, w) = first.dims();
        let mut labels = vec![0u8; h * w];
        for (i, label) in labels.iter_mut().enumerate() {
            let mut hot = None;
            for (k, g) in u.iter().enumerate() {
                g.check_same(first, "LabelMap::from_one_hot")?;
                let v = g.data()[i];
                if v == 1.0 {
                    if hot.is_some() {
                        return Err(Error::Data(format!("pixel {i} is hot in two classes")));
                    }
                    hot = Some(k);
                } else if v != 0.0 {
                    return Err(Error::Data(format!("pixel {i} class {k} has value {v}")));
                }
            }
            *label = hot.ok_or_else(|| Error::Data(format!("pixel {i} has no class")))? as u8;
        }
        LabelMap::new(h, w, u.len(), labels)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.labels[y * self.width + x]
    }

    pub fn mask(&self, class: usize) -> Vec<bool> {
        self.labels.iter().map(|&l| l as usize == class).collect()
    }

    pub fn count(&self, class: usize) -> usize {
        self.labels.iter().filter(|&&l| l as usize == class).count()
    }

    /// One grid per class, 1 where the pixel carries that class.
    pub fn one_hot(&self) -> Vec<ImageGrid> {
        (0..self.classes)
            .map(|k| ImageGrid {
                height: self.height,
                width: self.width,
                data: self
                    .labels
                    .iter()
                    .map(|&l| if l as usize == k { 1.0 } else { 0.0 })
                    .collect(),
            })
            .collect()
    }

    /// Pixels with a 4-neighbour of a different class.
    pub fn boundary(&self) -> Vec<bool> {
        let (h, w) = (self.height, self.width);
        let mut out = vec![false; h * w];
        for y in 0..h {
            for x in 0..w {
                let l = self.labels[y * w + x];
                let neighbours = [
                    (y > 0).then(|| (y - 1, x)),
                    (y + 1 < h).then(|| (y + 1, x)),
                    (x > 0).then(|| (y, x - 1)),
                    (x + 1 < w).then(|| (y, x + 1)),
                ];
                out[y * w + x] = neighbours
                    .iter()
                    .flatten()
                    .any(|&(ny, nx)| self.labels[ny * w + nx] != l);
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_rejects_wrong_length() {
        assert!(ImageGrid::new(2, 3, vec![0.0; 5]).is_err());
    }

    #[test]
    fn one_hot_round_trip() {
        let l = LabelMap::new(2, 2, 3, vec![0, 1, 2, 1]).unwrap();
        let u = l.one_hot();
        assert_eq!(u.len(), 3);
        assert_eq!(u[1].data(), &[0.0, 1.0, 0.0, 1.0]);
        assert_eq!(LabelMap::from_one_hot(&u).unwrap(), l);
    }

    #[test]
    fn from_one_hot_rejects_soft_labels() {
        let a = ImageGrid::new(1, 2, vec![0.5, 1.0]).unwrap();
        let b = ImageGrid::new(1, 2, vec![0.5, 0.0]).unwrap();
        assert!(matches!(LabelMap::from_one_hot(&[a, b]), Err(Error::Data(_))));
    }

    #[test]
    fn label_out_of_range_is_data_error() {
        assert!(matches!(LabelMap::new(1, 2, 2, vec![0, 2]), Err(Error::Data(_))));
    }

    #[test]
    fn boundary_marks_both_sides() {
        let l = LabelMap::new(1, 4, 2, vec![0, 0, 1, 1]).unwrap();
        assert_eq!(l.boundary(), vec![false, true, true, false]);
    }

    #[test]
    fn channel_extraction() {
        let t = Tensor::<f32>::from_fn(&[2, 2, 1, 2], |i| i as f32);
        let g = ImageGrid::from_channel(&t, 1, 0).unwrap();
        assert_eq!(g.data(), &[4.0, 5.0]);
    }
}
