/// A single-channel 2D raster, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, pixels: Vec<f32>) -> Self {
        assert_eq!(
            pixels.len(),
            height * width,
            "pixel count does not match {height}x{width}"
        );
        Image {
            height,
            width,
            pixels,
        }
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        Image {
            height,
            width,
            pixels: vec![value; height * width],
        }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.pixels[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: f32) {
        self.pixels[y * self.width + x] = v;
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    /// Zero-pad on the bottom and right so both sides are multiples of `m`.
    pub fn pad_to_multiple(&self, m: usize) -> Image {
        let h = self.height.div_ceil(m) * m;
        let w = self.width.div_ceil(m) * m;
        if h == self.height && w == self.width {
            return self.clone();
        }
        let mut out = Image::filled(h, w, 0.0);
        for y in 0..self.height {
            out.pixels[y * w..y * w + self.width]
                .copy_from_slice(&self.pixels[y * self.width..(y + 1) * self.width]);
        }
        out
    }
}
