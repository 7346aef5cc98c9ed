//! Dense row-major N-d arrays of `f64`.

use crate::error::{Error, Result};
use crate::volume::{ChannelLabel, Volume};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    /// `[B, C, Z, Y, X]` view of a rank-5 tensor.
    pub fn dims5(&self) -> Result<[usize; 5]> {
        <[usize; 5]>::try_from(self.shape.as_slice())
            .map_err(|_| Error::BadShape(format!("expected rank-5 tensor, got {:?}", self.shape)))
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::ShapeMismatch(format!("cannot reshape {:?} to {shape:?}", self.shape)));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn same_shape(&self, other: &Tensor, what: &str) -> Result<()> {
        if self.shape == other.shape {
            Ok(())
        } else {
            Err(Error::ShapeMismatch(format!("{what}: {:?} vs {:?}", self.shape, other.shape)))
        }
    }

    /// Concatenates rank-5 tensors along the batch axis.
    pub fn stack_batch(items: &[Tensor]) -> Result<Tensor> {
        let first = items.first().ok_or_else(|| Error::BadShape("empty batch".into()))?;
        let [_, c, z, y, x] = first.dims5()?;
        let mut data = Vec::with_capacity(items.len() * first.len());
        let mut b = 0;
        for t in items {
            let [bi, ci, zi, yi, xi] = t.dims5()?;
            if [ci, zi, yi, xi] != [c, z, y, x] {
                return Err(Error::ShapeMismatch(format!("batch item {:?} vs {:?}", t.shape, first.shape)));
            }
            b += bi;
            data.extend_from_slice(&t.data);
        }
        Tensor::new(vec![b, c, z, y, x], data)
    }

    /// Item `b` of a rank-5 tensor as a `[1, C, Z, Y, X]` tensor.
    pub fn batch_item(&self, b: usize) -> Result<Tensor> {
        let [nb, c, z, y, x] = self.dims5()?;
        if b >= nb {
            return Err(Error::BadShape(format!("batch index {b} of {nb}")));
        }
        let n = c * z * y * x;
        Tensor::new(vec![1, c, z, y, x], self.data[b * n..(b + 1) * n].to_vec())
    }

    /// `[1, C, Z, Y, X]` tensor holding a volume's channels.
    pub fn from_volume(v: &Volume) -> Tensor {
        let [z, y, x] = v.dims();
        Tensor {
            shape: vec![1, v.channels(), z, y, x],
            data: v.data().to_vec(),
        }
    }

    /// Converts batch item 0 back into a volume with the given geometry.
    pub fn to_volume(&self, spacing: [f64; 3], origin: [f64; 3], labels: Vec<ChannelLabel>) -> Result<Volume> {
        let [b, c, z, y, x] = self.dims5()?;
        if b != 1 || c != labels.len() {
            return Err(Error::ShapeMismatch(format!(
                "tensor {:?} with {} labels",
                self.shape,
                labels.len()
            )));
        }
        Volume::new(self.data.clone(), [z, y, x], spacing, origin, labels)
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}
