use crate::error::{Error, Result};

/// Dense image in channel-major (`C × H × W`) layout with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Image {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn at_mut(&mut self, c: usize, y: usize, x: usize) -> &mut f64 {
        &mut self.data[(c * self.height + y) * self.width + x]
    }
}

/// A set of equally sized images, one per flat combination index.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageSet {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    data: Vec<f64>,
}

impl ImageSet {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        let per = channels * height * width;
        if per == 0 || data.len() % per != 0 {
            return Err(Error::shape(format!(
                "image data of length {} is not a multiple of {channels}x{height}x{width}",
                data.len()
            )));
        }
        Ok(ImageSet {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn from_images(images: Vec<Image>) -> Result<Self> {
        let first = images
            .first()
            .ok_or_else(|| Error::shape("empty image list"))?;
        let (c, h, w) = (first.channels, first.height, first.width);
        let mut data = Vec::with_capacity(images.len() * c * h * w);
        for img in &images {
            if (img.channels, img.height, img.width) != (c, h, w) {
                return Err(Error::shape("images differ in size"));
            }
            data.extend_from_slice(&img.data);
        }
        Self::new(c, h, w, data)
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.image_len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn pixels(&self, index: usize) -> &[f64] {
        let n = self.image_len();
        &self.data[index * n..(index + 1) * n]
    }

    pub fn image(&self, index: usize) -> Image {
        Image {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data: self.pixels(index).to_vec(),
        }
    }

    pub fn raw(&self) -> &[f64] {
        &self.data
    }

    /// Same set with every pixel snapped to the nearest multiple of 1/255.
    pub fn quantized(&self) -> ImageSet {
        ImageSet {
            data: self
                .data
                .iter()
                .map(|&p| quantize(p) as f64 / 255.0)
                .collect(),
            ..*self
        }
    }
}

#[inline]
pub fn quantize(p: f64) -> u8 {
    (255.0 * p.clamp(0.0, 1.0)).round() as u8
}
