use std::fmt;

/// Dense 4-D shape in `[batch, channels, height, width]` order.
///
/// Lower-rank data is expressed with unit dimensions, e.g. a scalar is
/// `[1, 1, 1, 1]` and a batch of embeddings is `[n, e, 1, 1]`.
pub type Shape = [usize; 4];

pub const SCALAR: Shape = [1, 1, 1, 1];

pub fn numel(shape: &Shape) -> usize {
    shape.iter().product()
}

/// Row-major `f64` tensor with a fixed rank of four.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 8 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl Tensor {
    pub fn new(shape: Shape, data: Vec<f64>) -> Self {
        assert_eq!(
            numel(&shape),
            data.len(),
            "shape {shape:?} does not match data length {}",
            data.len()
        );
        Tensor { shape, data }
    }

    pub fn zeros(shape: Shape) -> Self {
        Tensor::full(shape, 0.0)
    }

    pub fn ones(shape: Shape) -> Self {
        Tensor::full(shape, 1.0)
    }

    pub fn full(shape: Shape, value: f64) -> Self {
        Tensor {
            shape,
            data: vec![value; numel(&shape)],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor::full(SCALAR, value)
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
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

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(
            self.data.len(),
            1,
            "item() on tensor of shape {:?}",
            self.shape
        );
        self.data[0]
    }

    pub fn reshape(mut self, shape: Shape) -> Self {
        assert_eq!(
            numel(&shape),
            self.data.len(),
            "reshape {:?} -> {shape:?}",
            self.shape
        );
        self.shape = shape;
        self
    }

    /// Contiguous slice holding sample `n` of the batch.
    pub fn sample(&self, n: usize) -> &[f64] {
        let per = self.data.len() / self.shape[0];
        &self.data[n * per..(n + 1) * per]
    }

    /// Copies samples `indices` (along the batch axis) into a new tensor.
    pub fn select_batch(&self, indices: &[usize]) -> Tensor {
        let per = self.data.len() / self.shape[0];
        let mut data = Vec::with_capacity(per * indices.len());
        for &i in indices {
            data.extend_from_slice(&self.data[i * per..(i + 1) * per]);
        }
        let [_, c, h, w] = self.shape;
        Tensor::new([indices.len(), c, h, w], data)
    }

    /// Stacks equally shaped tensors along the batch axis.
    pub fn stack(parts: &[Tensor]) -> Tensor {
        assert!(!parts.is_empty(), "stack of zero tensors");
        let [_, c, h, w] = parts[0].shape;
        let mut n = 0;
        let mut data = Vec::new();
        for p in parts {
            assert_eq!(
                [c, h, w],
                [p.shape[1], p.shape[2], p.shape[3]],
                "stack shape mismatch"
            );
            n += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        Tensor::new([n, c, h, w], data)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        assert_eq!(self.shape, other.shape, "elementwise shape mismatch");
        Tensor {
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Expands unit dimensions to `shape`.
    pub fn broadcast_to(&self, shape: Shape) -> Tensor {
        if shape == self.shape {
            return self.clone();
        }
        check_broadcast(&self.shape, &shape);
        let src = strides_for_broadcast(&self.shape);
        let mut data = Vec::with_capacity(numel(&shape));
        for n in 0..shape[0] {
            for c in 0..shape[1] {
                for h in 0..shape[2] {
                    let base = n * src[0] + c * src[1] + h * src[2];
                    for w in 0..shape[3] {
                        data.push(self.data[base + w * src[3]]);
                    }
                }
            }
        }
        Tensor { shape, data }
    }

    /// Sums over the axes where `shape` has a unit dimension; the adjoint of
    /// [`Tensor::broadcast_to`].
    pub fn sum_to(&self, shape: Shape) -> Tensor {
        if shape == self.shape {
            return self.clone();
        }
        check_broadcast(&shape, &self.shape);
        let dst = strides_for_broadcast(&shape);
        let mut out = vec![0.0; numel(&shape)];
        let [sn, sc, sh, sw] = self.shape;
        let mut i = 0;
        for n in 0..sn {
            for c in 0..sc {
                for h in 0..sh {
                    let base = n * dst[0] + c * dst[1] + h * dst[2];
                    for w in 0..sw {
                        out[base + w * dst[3]] += self.data[i];
                        i += 1;
                    }
                }
            }
        }
        Tensor { shape, data: out }
    }
}

fn check_broadcast(small: &Shape, large: &Shape) {
    for (s, l) in small.iter().zip(large) {
        assert!(
            s == l || *s == 1,
            "cannot broadcast {small:?} against {large:?}"
        );
    }
}

/// Row-major strides with zero stride on unit dimensions.
fn strides_for_broadcast(shape: &Shape) -> [usize; 4] {
    let mut strides = [0; 4];
    let mut acc = 1;
    for d in (0..4).rev() {
        strides[d] = if shape[d] == 1 { 0 } else { acc };
        acc *= shape[d];
    }
    strides
}
