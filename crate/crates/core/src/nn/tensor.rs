use super::Scalar;

/// Dense NCHW tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S> {
    shape: [usize; 4],
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Self {
            shape,
            data: vec![S::zero(); shape.iter().product()],
        }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<S>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor data length does not match shape {shape:?}"
        );
        Self { shape, data }
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

    /// Number of elements in one (channel) plane.
    pub fn plane(&self) -> usize {
        self.shape[2] * self.shape[3]
    }

    /// Number of elements belonging to one batch item.
    pub fn item_len(&self) -> usize {
        self.shape[1] * self.plane()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<S> {
        self.data
    }

    pub fn item(&self, n: usize) -> &[S] {
        let len = self.item_len();
        &self.data[n * len..(n + 1) * len]
    }

    pub fn item_mut(&mut self, n: usize) -> &mut [S] {
        let len = self.item_len();
        &mut self.data[n * len..(n + 1) * len]
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Self {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor<S>) {
        assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn add(&self, other: &Tensor<S>) -> Self {
        let mut out = self.clone();
        out.add_assign(other);
        out
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Stack single-item tensors along the batch axis.
    pub fn stack(items: &[Tensor<S>]) -> Self {
        assert!(!items.is_empty());
        let [_, c, h, w] = items[0].shape;
        let mut data = Vec::with_capacity(items.len() * c * h * w);
        let mut n = 0;
        for t in items {
            assert_eq!([c, h, w], [t.shape[1], t.shape[2], t.shape[3]]);
            data.extend_from_slice(&t.data);
            n += t.shape[0];
        }
        Self::from_vec([n, c, h, w], data)
    }

    /// Split into single-item tensors.
    pub fn unstack(&self) -> Vec<Tensor<S>> {
        let [n, c, h, w] = self.shape;
        (0..n)
            .map(|i| Tensor::from_vec([1, c, h, w], self.item(i).to_vec()))
            .collect()
    }

    /// Concatenate along the channel axis.
    pub fn concat_channels(parts: &[&Tensor<S>]) -> Self {
        let [n, _, h, w] = parts[0].shape;
        let total_c: usize = parts.iter().map(|p| p.shape[1]).sum();
        let mut out = Tensor::zeros([n, total_c, h, w]);
        for b in 0..n {
            let dst = out.item_mut(b);
            let mut offset = 0;
            for p in parts {
                assert_eq!([n, h, w], [p.shape[0], p.shape[2], p.shape[3]]);
                let src = p.item(b);
                dst[offset..offset + src.len()].copy_from_slice(src);
                offset += src.len();
            }
        }
        out
    }

    /// Inverse of [`Tensor::concat_channels`] given the channel counts.
    pub fn split_channels(&self, counts: &[usize]) -> Vec<Tensor<S>> {
        let [n, c, h, w] = self.shape;
        assert_eq!(counts.iter().sum::<usize>(), c);
        let plane = h * w;
        let mut out: Vec<Tensor<S>> = counts.iter().map(|&k| Tensor::zeros([n, k, h, w])).collect();
        for b in 0..n {
            let src = self.item(b);
            let mut offset = 0;
            for (t, &k) in out.iter_mut().zip(counts) {
                t.item_mut(b).copy_from_slice(&src[offset..offset + k * plane]);
                offset += k * plane;
            }
        }
        out
    }

    /// Mirror every plane left to right.
    pub fn flip_horizontal(&self) -> Self {
        let w = self.width();
        let mut out = self.clone();
        for row in out.data.chunks_mut(w) {
            row.reverse();
        }
        out
    }

    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape,
            data: self
                .data
                .iter()
                .map(|v| T::from_f64(v.to_f64().unwrap_or(f64::NAN)).unwrap_or_else(T::nan))
                .collect(),
        }
    }
}
