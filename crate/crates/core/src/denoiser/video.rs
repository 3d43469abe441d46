use candle_core::Tensor;

use crate::error::{invalid, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layout {
    /// (b, c, f, h, w)
    Clip,
    /// (b*f, c, h, w): frames processed independently by spatial layers.
    SpatialView,
    /// (b*h*w, f, c): one frame sequence per spatial location.
    TemporalView,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClipDims {
    pub b: usize,
    pub c: usize,
    pub f: usize,
    pub h: usize,
    pub w: usize,
}

/// A 5D clip tensor tagged with the layout it is currently stored in.
///
/// Row `b0 * f + f0` of the spatial view holds frame `f0` of clip `b0`;
/// row `(b0 * h + h0) * w + w0` of the temporal view holds the frame
/// sequence at pixel `(h0, w0)` of clip `b0`.
#[derive(Debug, Clone)]
pub struct VideoTensor {
    data: Tensor,
    layout: Layout,
    dims: ClipDims,
}

impl VideoTensor {
    pub fn clip(data: Tensor) -> Result<Self> {
        let (b, c, f, h, w) = data
            .dims5()
            .map_err(|_| Error::Shape(format!("expected a 5D clip, got {:?}", data.dims())))?;
        Ok(Self {
            data,
            layout: Layout::Clip,
            dims: ClipDims { b, c, f, h, w },
        })
    }

    /// Wrap an existing (b*f, c, h, w) tensor.
    pub fn from_spatial_view(data: Tensor, b: usize, f: usize) -> Result<Self> {
        let (n, c, h, w) = data.dims4()?;
        if n != b * f {
            return Err(Error::Shape(format!("{n} rows cannot hold {b} clips of {f} frames")));
        }
        Ok(Self {
            data,
            layout: Layout::SpatialView,
            dims: ClipDims { b, c, f, h, w },
        })
    }

    pub fn layout(&self) -> Layout {
        self.layout
    }

    pub fn dims(&self) -> ClipDims {
        self.dims
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor {
        self.data
    }

    /// Replace the payload keeping the layout; the shape must be unchanged.
    pub fn with_data(&self, data: Tensor) -> Result<Self> {
        if data.dims() != self.data.dims() {
            return Err(Error::Shape(format!(
                "replacement {:?} differs from {:?}",
                data.dims(),
                self.data.dims()
            )));
        }
        Ok(Self {
            data,
            layout: self.layout,
            dims: self.dims,
        })
    }

    pub fn to_spatial_view(&self) -> Result<Self> {
        if self.layout != Layout::Clip {
            return Err(invalid!("to_spatial_view expects clip layout, got {:?}", self.layout));
        }
        let ClipDims { b, c, f, h, w } = self.dims;
        let data = self
            .data
            .permute((0, 2, 1, 3, 4))?
            .contiguous()?
            .reshape((b * f, c, h, w))?;
        Ok(Self {
            data,
            layout: Layout::SpatialView,
            dims: self.dims,
        })
    }

    pub fn to_temporal_view(&self) -> Result<Self> {
        if self.layout != Layout::Clip {
            return Err(invalid!("to_temporal_view expects clip layout, got {:?}", self.layout));
        }
        let ClipDims { b, c, f, h, w } = self.dims;
        let data = self
            .data
            .permute((0, 3, 4, 2, 1))?
            .contiguous()?
            .reshape((b * h * w, f, c))?;
        Ok(Self {
            data,
            layout: Layout::TemporalView,
            dims: self.dims,
        })
    }

    /// Back to (b, c, f, h, w) from whichever layout this is in.
    pub fn to_clip(&self) -> Result<Self> {
        let ClipDims { b, c, f, h, w } = self.dims;
        let data = match self.layout {
            Layout::Clip => self.data.clone(),
            Layout::SpatialView => self
                .data
                .reshape((b, f, c, h, w))?
                .permute((0, 2, 1, 3, 4))?
                .contiguous()?,
            Layout::TemporalView => self
                .data
                .reshape((b, h, w, f, c))?
                .permute((0, 4, 3, 1, 2))?
                .contiguous()?,
        };
        Ok(Self {
            data,
            layout: Layout::Clip,
            dims: self.dims,
        })
    }
}
