use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Labelled images `[C, H, W]`, all of one shape, each with a stable id that
/// survives reordering and subsetting.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset<T> {
    pub images: Vec<Tensor<T>>,
    pub labels: Vec<usize>,
    pub ids: Vec<u64>,
    pub classes: usize,
}

impl<T: Scalar> Dataset<T> {
    pub fn new(images: Vec<Tensor<T>>, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::Config(format!(
                "{} images but {} labels",
                images.len(),
                labels.len()
            )));
        }
        if let Some(first) = images.first() {
            if first.rank() != 3 {
                return Err(Error::shape("dataset image", &[0, 0, 0], first.shape()));
            }
            if let Some(bad) = images.iter().find(|im| im.shape() != first.shape()) {
                return Err(Error::shape("dataset image", first.shape(), bad.shape()));
            }
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::Config(format!("label {y} out of range for {classes} classes")));
        }
        let ids = (0..images.len() as u64).collect();
        Ok(Dataset {
            images,
            labels,
            ids,
            classes,
        })
    }

    /// Replaces the positional ids.
    pub fn with_ids(mut self, ids: Vec<u64>) -> Result<Self> {
        if ids.len() != self.images.len() {
            return Err(Error::Config(format!("{} ids for {} images", ids.len(), self.images.len())));
        }
        self.ids = ids;
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn image_shape(&self) -> Option<&[usize]> {
        self.images.first().map(Tensor::shape)
    }

    /// The first `n` images of every class, in dataset order.
    pub fn take_per_class(&self, n: usize) -> Self {
        let mut seen = vec![0; self.classes];
        let keep: Vec<usize> = (0..self.len())
            .filter(|&i| {
                let y = self.labels[i];
                seen[y] += 1;
                seen[y] <= n
            })
            .collect();
        self.select(&keep)
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        Dataset {
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            ids: indices.iter().map(|&i| self.ids[i]).collect(),
            classes: self.classes,
        }
    }

    pub fn cast<U: Scalar>(&self) -> Dataset<U> {
        Dataset {
            images: self.images.iter().map(Tensor::cast).collect(),
            labels: self.labels.clone(),
            ids: self.ids.clone(),
            classes: self.classes,
        }
    }
}

/// Rotates a square image `[C, N, N]` counter-clockwise by `quarter_turns·90°`.
pub fn rotate90<T: Scalar>(image: &Tensor<T>, quarter_turns: usize) -> Result<Tensor<T>> {
    let s = image.shape();
    if s.len() != 3 || s[1] != s[2] {
        return Err(Error::Config(format!("rotation needs a square [C, N, N] image, got {s:?}")));
    }
    let n = s[1];
    let d = image.data();
    let k = quarter_turns % 4;
    Ok(Tensor::from_fn(s, |i| {
        let (c, y, x) = (i / (n * n), (i / n) % n, i % n);
        // source pixel of output (y, x) under a counter-clockwise turn
        let (sy, sx) = match k {
            0 => (y, x),
            1 => (x, n - 1 - y),
            2 => (n - 1 - y, n - 1 - x),
            _ => (n - 1 - x, y),
        };
        d[(c * n + sy) * n + sx]
    }))
}

/// Mirrors every row of `[C, H, W]`.
pub fn hflip<T: Scalar>(image: &Tensor<T>) -> Tensor<T> {
    let s = image.shape();
    let w = s[s.len() - 1];
    let d = image.data();
    Tensor::from_fn(s, |i| d[i - i % w + (w - 1 - i % w)])
}
