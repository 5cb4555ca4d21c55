use crate::error::{Error, Result};

/// Dense `(batch, channels, height, width)` array, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: [usize; 4],
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: [usize; 4], data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: [usize; 4]) -> Self {
        Tensor {
            shape,
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn from_fn(shape: [usize; 4], mut f: impl FnMut(usize) -> f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    pub fn height(&self) -> usize {
        self.shape[2]
    }

    pub fn width(&self) -> usize {
        self.shape[3]
    }

    /// Elements per batch item.
    pub fn item_len(&self) -> usize {
        self.shape[1] * self.shape[2] * self.shape[3]
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

    pub fn item(&self, n: usize) -> &[f64] {
        let len = self.item_len();
        &self.data[n * len..(n + 1) * len]
    }

    pub fn item_mut(&mut self, n: usize) -> &mut [f64] {
        let len = self.item_len();
        &mut self.data[n * len..(n + 1) * len]
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> f64 {
        let [_, cs, h, w] = self.shape;
        self.data[((n * cs + c) * h + y) * w + x]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Stacks single-item tensors of equal shape along the batch axis.
    pub fn stack(items: &[&Tensor]) -> Result<Self> {
        let first = items.first().ok_or(Error::EmptyInput("nothing to stack"))?;
        let [_, c, h, w] = first.shape;
        let mut data = Vec::with_capacity(items.iter().map(|t| t.len()).sum());
        let mut batch = 0;
        for t in items {
            if t.shape[1..] != [c, h, w] {
                return Err(Error::Shape(format!(
                    "cannot stack {:?} with {:?}",
                    t.shape, first.shape
                )));
            }
            batch += t.shape[0];
            data.extend_from_slice(&t.data);
        }
        Tensor::new([batch, c, h, w], data)
    }

    pub(crate) fn ensure_shape(&self, shape: [usize; 4], what: &str) -> Result<()> {
        if self.shape != shape {
            return Err(Error::Shape(format!(
                "{what}: expected {shape:?}, got {:?}",
                self.shape
            )));
        }
        Ok(())
    }
}
