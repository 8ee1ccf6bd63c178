use crate::error::{DialError, Result};
use crate::scalar::Scalar;

/// Number of semantic categories in the trainId taxonomy.
pub const NUM_CLASSES: usize = 19;
/// Label value excluded from every loss and metric.
pub const IGNORE_LABEL: u8 = 255;

/// Dense row-major tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(DialError::invalid(format!("zero extent in shape {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(DialError::invalid(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    /// Panicking constructor for internal use where the shape is known to match.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![v; n],
        }
    }

    pub fn scalar(v: T) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(DialError::invalid(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Interprets the shape as `[N, C, H, W]`.
    pub fn nchw(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(DialError::invalid(format!(
                "expected a 4-d [N, C, H, W] tensor, got {:?}",
                self.shape
            ))),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> T {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (a, b)| m.max((*a - *b).abs()))
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|v| U::from_f64_lossy(v.to_f64_lossy()))
                .collect(),
        }
    }
}

/// RGB raster with values in `[0, 1]`, stored as three planes (R, G, B).
#[derive(Clone, Debug, PartialEq)]
pub struct Image<T> {
    height: usize,
    width: usize,
    data: Vec<T>,
}

impl<T: Scalar> Image<T> {
    pub const CHANNELS: usize = 3;

    /// Builds an image from planar RGB data, clamping every value to `[0, 1]`.
    pub fn new(height: usize, width: usize, mut data: Vec<T>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(DialError::invalid("image must be non-empty"));
        }
        if data.len() != 3 * height * width {
            return Err(DialError::invalid(format!(
                "{height}x{width} RGB image needs {} values, got {}",
                3 * height * width,
                data.len()
            )));
        }
        for v in &mut data {
            if !v.is_finite() {
                return Err(DialError::NumericFailure("non-finite pixel value".into()));
            }
            *v = v.max(T::zero()).min(T::one());
        }
        Ok(Image {
            height,
            width,
            data,
        })
    }

    pub fn constant(height: usize, width: usize, v: T) -> Self {
        Self::from_fn(height, width, |_, _, _| v)
    }

    /// `f(channel, y, x)`; results are clamped to `[0, 1]`.
    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(3 * height * width);
        for c in 0..3 {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x).max(T::zero()).min(T::one()));
                }
            }
        }
        Image {
            height,
            width,
            data,
        }
    }

    /// Decodes interleaved 8-bit RGB bytes (value / 255).
    pub fn from_rgb8(height: usize, width: usize, bytes: &[u8]) -> Result<Self> {
        if bytes.len() != 3 * height * width {
            return Err(DialError::Data(format!(
                "expected {} RGB bytes, got {}",
                3 * height * width,
                bytes.len()
            )));
        }
        let scale = T::from_f64_lossy(255.0);
        Ok(Self::from_fn(height, width, |c, y, x| {
            T::from_u8(bytes[3 * (y * width + x) + c]).unwrap() / scale
        }))
    }

    /// Encodes to interleaved 8-bit RGB with rounding.
    pub fn to_rgb8(&self) -> Vec<u8> {
        let mut out = vec![0u8; 3 * self.height * self.width];
        let plane = self.height * self.width;
        for c in 0..3 {
            for i in 0..plane {
                let v = self.data[c * plane + i].to_f64_lossy();
                out[3 * i + c] = (v * 255.0).round().clamp(0.0, 255.0) as u8;
            }
        }
        out
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn plane(&self, c: usize) -> &[T] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> T {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn mean(&self) -> T {
        self.data.iter().copied().sum::<T>() / T::from_usize(self.data.len()).unwrap()
    }

    /// `[1, 3, H, W]` view of the same values.
    pub fn to_tensor(&self) -> Tensor<T> {
        Tensor::from_parts(vec![1, 3, self.height, self.width], self.data.clone())
    }

    /// Reads sample `n` out of an `[N, 3, H, W]` tensor, clamping to `[0, 1]`.
    pub fn from_tensor(t: &Tensor<T>, n: usize) -> Result<Self> {
        let (nb, c, h, w) = t.nchw()?;
        if c != 3 || n >= nb {
            return Err(DialError::invalid(format!(
                "cannot read image {n} from tensor {:?}",
                t.shape()
            )));
        }
        let sz = 3 * h * w;
        Image::new(h, w, t.data()[n * sz..(n + 1) * sz].to_vec())
    }

    pub fn flip_horizontal(&self) -> Self {
        let w = self.width;
        Self::from_fn(self.height, w, |c, y, x| self.get(c, y, w - 1 - x))
    }

    pub fn cast<U: Scalar>(&self) -> Image<U> {
        Image {
            height: self.height,
            width: self.width,
            data: self
                .data
                .iter()
                .map(|v| U::from_f64_lossy(v.to_f64_lossy()))
                .collect(),
        }
    }
}

/// Stacks equally sized images into an `[N, 3, H, W]` tensor.
pub fn stack_images<T: Scalar>(images: &[&Image<T>]) -> Result<Tensor<T>> {
    let first = images
        .first()
        .ok_or_else(|| DialError::invalid("cannot stack an empty batch"))?;
    let (h, w) = (first.height(), first.width());
    let mut data = Vec::with_capacity(images.len() * 3 * h * w);
    for im in images {
        if im.height() != h || im.width() != w {
            return Err(DialError::invalid("batch images differ in size"));
        }
        data.extend_from_slice(im.data());
    }
    Tensor::new(vec![images.len(), 3, h, w], data)
}

/// Per-pixel category ids (`0..19`) with `255` marking ignored pixels.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct LabelMap {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width {
            return Err(DialError::Data(format!(
                "label map {height}x{width} with {} values",
                data.len()
            )));
        }
        if let Some(bad) = data
            .iter()
            .find(|&&v| v as usize >= NUM_CLASSES && v != IGNORE_LABEL)
        {
            return Err(DialError::Data(format!("invalid trainId {bad} in label map")));
        }
        Ok(LabelMap {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, v: u8) -> Result<Self> {
        Self::new(height, width, vec![v; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn valid_pixels(&self) -> usize {
        self.data.iter().filter(|&&v| v != IGNORE_LABEL).count()
    }

    pub fn flip_horizontal(&self) -> Self {
        let w = self.width;
        let data = (0..self.height * w)
            .map(|i| self.data[(i / w) * w + (w - 1 - i % w)])
            .collect();
        LabelMap {
            height: self.height,
            width: w,
            data,
        }
    }
}
