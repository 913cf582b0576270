//! `C×H×W` raster stacks with a per-cell validity mask.

use crate::error::{dim_err, Error, Result};

pub const DEFAULT_NODATA: f32 = -9999.0;

#[derive(Debug, Clone, PartialEq)]
pub struct GridStack {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
    valid: Vec<bool>,
    nodata: f32,
}

impl GridStack {
    /// Fully valid stack.
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        let n = channels * height * width;
        Self::with_mask(channels, height, width, data, vec![true; n])
    }

    /// Stack with explicit mask. Invalid cells are reset to the nodata value.
    pub fn with_mask(
        channels: usize,
        height: usize,
        width: usize,
        mut data: Vec<f32>,
        valid: Vec<bool>,
    ) -> Result<Self> {
        let n = channels * height * width;
        if n == 0 {
            return Err(dim_err!("grid dimensions must be positive ({channels}×{height}×{width})"));
        }
        if data.len() != n || valid.len() != n {
            return Err(dim_err!(
                "grid {channels}×{height}×{width} needs {n} cells, got {} values and {} mask bits",
                data.len(),
                valid.len()
            ));
        }
        for (v, &ok) in data.iter_mut().zip(&valid) {
            if !ok {
                *v = DEFAULT_NODATA;
            }
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
            valid,
            nodata: DEFAULT_NODATA,
        })
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f32) -> Self {
        Self::new(channels, height, width, vec![value; channels * height * width]).expect("positive dims")
    }

    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Self {
        let mut data = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self::new(channels, height, width, data).expect("positive dims")
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn nodata(&self) -> f32 {
        self.nodata
    }

    /// Change the sentinel used for invalid cells.
    pub fn set_nodata(&mut self, nodata: f32) -> Result<()> {
        if self
            .data
            .iter()
            .zip(&self.valid)
            .any(|(&v, &ok)| ok && v.to_bits() == nodata.to_bits())
        {
            return Err(Error::Data(format!("nodata sentinel {nodata} collides with valid data")));
        }
        for (v, &ok) in self.data.iter_mut().zip(&self.valid) {
            if !ok {
                *v = nodata;
            }
        }
        self.nodata = nodata;
        Ok(())
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn mask(&self) -> &[bool] {
        &self.valid
    }

    pub fn index(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.height + y) * self.width + x
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[self.index(c, y, x)]
    }

    pub fn is_valid(&self, c: usize, y: usize, x: usize) -> bool {
        self.valid[self.index(c, y, x)]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        let i = self.index(c, y, x);
        self.data[i] = v;
        self.valid[i] = true;
    }

    pub fn invalidate(&mut self, c: usize, y: usize, x: usize) {
        let i = self.index(c, y, x);
        self.data[i] = self.nodata;
        self.valid[i] = false;
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.plane_len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mask(&self, c: usize) -> &[bool] {
        let n = self.plane_len();
        &self.valid[c * n..(c + 1) * n]
    }

    pub fn is_gap_free(&self) -> bool {
        self.valid.iter().all(|&v| v)
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    pub fn same_plane(&self, other: &GridStack) -> bool {
        self.height == other.height && self.width == other.width
    }

    pub(crate) fn expect_dims(&self, dims: (usize, usize, usize), what: &str) -> Result<()> {
        if self.dims() != dims {
            return Err(dim_err!("{what}: expected {:?}, got {:?}", dims, self.dims()));
        }
        Ok(())
    }

    /// Copy of the listed channels, in order.
    pub fn select_channels(&self, channels: &[usize]) -> Result<GridStack> {
        let n = self.plane_len();
        let mut data = Vec::with_capacity(channels.len() * n);
        let mut valid = Vec::with_capacity(channels.len() * n);
        for &c in channels {
            if c >= self.channels {
                return Err(Error::Index(format!("channel {c} of {}", self.channels)));
            }
            data.extend_from_slice(self.channel(c));
            valid.extend_from_slice(self.channel_mask(c));
        }
        GridStack::with_mask(channels.len(), self.height, self.width, data, valid)
    }

    /// Rectangular window `[y0, y0+h) × [x0, x0+w)` over every channel.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<GridStack> {
        if y0 + h > self.height || x0 + w > self.width {
            return Err(Error::Index(format!(
                "window {h}×{w} at ({y0},{x0}) exceeds {}×{}",
                self.height, self.width
            )));
        }
        let mut data = Vec::with_capacity(self.channels * h * w);
        let mut valid = Vec::with_capacity(self.channels * h * w);
        for c in 0..self.channels {
            for y in y0..y0 + h {
                let i = self.index(c, y, x0);
                data.extend_from_slice(&self.data[i..i + w]);
                valid.extend_from_slice(&self.valid[i..i + w]);
            }
        }
        GridStack::with_mask(self.channels, h, w, data, valid)
    }

    /// Write `tile` into this stack at `(y0, x0)`; channel counts must agree.
    pub fn paste(&mut self, tile: &GridStack, y0: usize, x0: usize) -> Result<()> {
        if tile.channels != self.channels || y0 + tile.height > self.height || x0 + tile.width > self.width {
            return Err(dim_err!("tile {:?} does not fit at ({y0},{x0}) in {:?}", tile.dims(), self.dims()));
        }
        for c in 0..self.channels {
            for y in 0..tile.height {
                let src = tile.index(c, y, 0);
                let dst = self.index(c, y0 + y, x0);
                self.data[dst..dst + tile.width].copy_from_slice(&tile.data[src..src + tile.width]);
                self.valid[dst..dst + tile.width].copy_from_slice(&tile.valid[src..src + tile.width]);
            }
        }
        Ok(())
    }
}
