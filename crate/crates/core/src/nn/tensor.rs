use super::{NnError, Result};

/// Dense `[channels, height, width]` array in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3 {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Tensor3 {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self { channels, height, width, data: vec![0.0; channels * height * width] }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(NnError::Shape(format!(
                "{} values for a {channels}x{height}x{width} tensor",
                data.len()
            )));
        }
        Ok(Self { channels, height, width, data })
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.plane_len();
        &self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn at_mut(&mut self, c: usize, y: usize, x: usize) -> &mut f64 {
        &mut self.data[(c * self.height + y) * self.width + x]
    }

    /// Rows `[row, row + h)` and columns `[col, col + w)` of every channel.
    pub fn crop(&self, row: usize, col: usize, h: usize, w: usize) -> Self {
        assert!(row + h <= self.height && col + w <= self.width, "crop out of bounds");
        let mut data = Vec::with_capacity(self.channels * h * w);
        for c in 0..self.channels {
            for y in row..row + h {
                let start = (c * self.height + y) * self.width + col;
                data.extend_from_slice(&self.data[start..start + w]);
            }
        }
        Self { channels: self.channels, height: h, width: w, data }
    }
}
