//! Dense real-valued grids and the convolution primitives everything else
//! builds on: zero-padded stride-1 cross-correlation, ReLU, Gaussian blur,
//! and 8-bit grayscale (P5) image I/O.
//!
//! Coordinate convention shared by the whole crate: `x` is the column index,
//! `y` the row index, origin at the center of the top-left pixel.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// A channels × height × width array of real values in row-major
/// `[channel][row][col]` order. Carries images, feature maps and response
/// maps alike.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueGrid {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl ValueGrid {
    /// Build a grid from raw data; `data.len()` must equal `c*h*w`.
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::Dimension("grid dimensions must be positive".into()));
        }
        if data.len() != channels * height * width {
            return Err(Error::Dimension(format!(
                "data length {} does not match {}x{}x{}",
                data.len(),
                channels,
                height,
                width
            )));
        }
        Ok(Self { channels, height, width, data })
    }

    /// Grid of the given shape with every value set to `fill`.
    pub fn filled(channels: usize, height: usize, width: usize, fill: f64) -> Self {
        Self { channels, height, width, data: vec![fill; channels * height * width] }
    }

    /// All-zero grid.
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self::filled(channels, height, width, 0.0)
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    fn index(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.height + y) * self.width + x
    }

    /// Value at `(channel, row, col)`.
    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.index(c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        let i = self.index(c, y, x);
        self.data[i] = v;
    }

    /// Single channel as a contiguous row-major slice.
    pub fn channel(&self, c: usize) -> &[f64] {
        let plane = self.height * self.width;
        &self.data[c * plane..(c + 1) * plane]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let plane = self.height * self.width;
        &mut self.data[c * plane..(c + 1) * plane]
    }

    /// True when every stored value is finite.
    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Largest stored value (NaN-free input assumed).
    pub fn max_value(&self) -> f64 {
        self.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Smallest stored value.
    pub fn min_value(&self) -> f64 {
        self.data.iter().cloned().fold(f64::INFINITY, f64::min)
    }
}

/// Per-layer activation applied after the bias add.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Linear,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Linear => "linear",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "linear" => Ok(Activation::Linear),
            other => Err(Error::Format(format!("unknown activation `{other}`"))),
        }
    }
}

/// One convolution layer: odd square kernels, per-output-channel bias, and
/// the activation applied to the result. Kernels are stored row-major in
/// `[out][in][ky][kx]` order.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub kernel_size: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernels: Vec<f64>,
    pub biases: Vec<f64>,
    pub activation: Activation,
}

impl ConvLayer {
    pub fn new(
        kernel_size: usize,
        in_channels: usize,
        out_channels: usize,
        kernels: Vec<f64>,
        biases: Vec<f64>,
        activation: Activation,
    ) -> Result<Self> {
        if kernel_size % 2 == 0 || kernel_size == 0 {
            return Err(Error::Parameter(format!(
                "kernel size must be odd and positive, got {kernel_size}"
            )));
        }
        if kernels.len() != out_channels * in_channels * kernel_size * kernel_size {
            return Err(Error::Dimension(format!(
                "kernel data length {} does not match {}x{}x{}x{}",
                kernels.len(),
                out_channels,
                in_channels,
                kernel_size,
                kernel_size
            )));
        }
        if biases.len() != out_channels {
            return Err(Error::Dimension(format!(
                "bias length {} does not match {out_channels} output channels",
                biases.len()
            )));
        }
        Ok(Self { kernel_size, in_channels, out_channels, kernels, biases, activation })
    }

    /// All-zero layer of the given shape (kernels and biases zero).
    pub fn zeros(
        kernel_size: usize,
        in_channels: usize,
        out_channels: usize,
        activation: Activation,
    ) -> Self {
        Self {
            kernel_size,
            in_channels,
            out_channels,
            kernels: vec![0.0; out_channels * in_channels * kernel_size * kernel_size],
            biases: vec![0.0; out_channels],
            activation,
        }
    }

    /// Kernel and bias count of this layer.
    pub fn parameter_count(&self) -> usize {
        self.kernels.len() + self.biases.len()
    }

    #[inline]
    pub(crate) fn kernel_index(&self, oc: usize, ic: usize, ky: usize, kx: usize) -> usize {
        ((oc * self.in_channels + ic) * self.kernel_size + ky) * self.kernel_size + kx
    }
}

/// Zero-padded stride-1 cross-correlation plus bias, then the layer's
/// activation. Output keeps the input's height and width.
pub fn conv2d(input: &ValueGrid, layer: &ConvLayer) -> Result<ValueGrid> {
    if input.channels() != layer.in_channels {
        return Err(Error::ChannelMismatch {
            expected: layer.in_channels,
            actual: input.channels(),
        });
    }
    let (h, w) = (input.height(), input.width());
    let k = layer.kernel_size;
    let r = (k / 2) as isize;
    let mut out = ValueGrid::zeros(layer.out_channels, h, w);

    for oc in 0..layer.out_channels {
        let plane = out.channel_mut(oc);
        plane.fill(layer.biases[oc]);
        for ic in 0..layer.in_channels {
            let src = input.channel(ic);
            for ky in 0..k {
                let dy = ky as isize - r;
                let y0 = (-dy).max(0) as usize;
                let y1 = ((h as isize - dy).min(h as isize)).max(0) as usize;
                for kx in 0..k {
                    let wgt = layer.kernels[layer.kernel_index(oc, ic, ky, kx)];
                    let dx = kx as isize - r;
                    let x0 = (-dx).max(0) as usize;
                    let x1 = ((w as isize - dx).min(w as isize)).max(0) as usize;
                    if x0 >= x1 {
                        continue;
                    }
                    // Accumulate one shifted tap over its valid rectangle;
                    // pixels whose source falls outside the image keep the
                    // implicit zero-padding contribution.
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        let s0 = sy * w + (x0 as isize + dx) as usize;
                        let srow = &src[s0..s0 + (x1 - x0)];
                        let drow = &mut plane[y * w + x0..y * w + x1];
                        for (d, s) in drow.iter_mut().zip(srow) {
                            *d += wgt * *s;
                        }
                    }
                }
            }
        }
        if layer.activation == Activation::Relu {
            for v in plane.iter_mut() {
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
        }
    }
    Ok(out)
}

/// Elementwise `max(0, v)`; shape preserved.
pub fn relu(input: &ValueGrid) -> ValueGrid {
    let mut out = input.clone();
    for v in out.data_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    out
}

/// The normalized 3×3 Gaussian kernel for the given variance.
pub fn gaussian_kernel_3x3(variance: f64) -> Result<[f64; 9]> {
    if !(variance > 0.0) {
        return Err(Error::Parameter(format!("blur variance must be positive, got {variance}")));
    }
    let mut k = [0.0f64; 9];
    let mut sum = 0.0;
    for dy in -1i32..=1 {
        for dx in -1i32..=1 {
            let v = (-((dx * dx + dy * dy) as f64) / (2.0 * variance)).exp();
            k[((dy + 1) * 3 + dx + 1) as usize] = v;
            sum += v;
        }
    }
    for v in &mut k {
        *v /= sum;
    }
    Ok(k)
}

/// Blur a single-channel image with the normalized 3×3 Gaussian kernel
/// `w(dx,dy) ∝ exp(−(dx²+dy²)/(2·variance))`, replicating edge pixels at the
/// border.
pub fn gaussian_blur_3x3(image: &ValueGrid, variance: f64) -> Result<ValueGrid> {
    if image.channels() != 1 {
        return Err(Error::ChannelMismatch { expected: 1, actual: image.channels() });
    }
    let kern = gaussian_kernel_3x3(variance)?;
    let (h, w) = (image.height(), image.width());
    let src = image.channel(0);
    let mut out = ValueGrid::zeros(1, h, w);
    let dst = out.channel_mut(0);
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for dy in -1i64..=1 {
                let sy = (y as i64 + dy).clamp(0, h as i64 - 1) as usize;
                for dx in -1i64..=1 {
                    let sx = (x as i64 + dx).clamp(0, w as i64 - 1) as usize;
                    acc += kern[((dy + 1) * 3 + dx + 1) as usize] * src[sy * w + sx];
                }
            }
            dst[y * w + x] = acc;
        }
    }
    Ok(out)
}

/// Load an 8-bit binary graymap (P5), mapping byte v to v/255 in [0,1].
pub fn load_gray<P: AsRef<Path>>(path: P) -> Result<ValueGrid> {
    let mut reader = BufReader::new(File::open(path)?);
    let mut bytes = Vec::new();
    reader.read_to_end(&mut bytes)?;
    parse_pgm(&bytes)
}

fn parse_pgm(bytes: &[u8]) -> Result<ValueGrid> {
    let mut pos = 0usize;
    let mut token = |ctx: &str| -> Result<String> {
        // skip whitespace and '#' comment lines
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while let Some(b) = bytes.get(pos) {
                        pos += 1;
                        if *b == b'\n' {
                            break;
                        }
                    }
                }
                Some(_) => break,
                None => return Err(Error::Format(format!("unexpected end of header ({ctx})"))),
            }
        }
        let start = pos;
        while let Some(b) = bytes.get(pos) {
            if b.is_ascii_whitespace() {
                break;
            }
            pos += 1;
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };

    let magic = token("magic")?;
    if magic != "P5" {
        return Err(Error::Format(format!("expected P5 magic, got `{magic}`")));
    }
    let width: usize = token("width")?
        .parse()
        .map_err(|_| Error::Format("invalid width".into()))?;
    let height: usize = token("height")?
        .parse()
        .map_err(|_| Error::Format("invalid height".into()))?;
    let maxval: usize = token("maxval")?
        .parse()
        .map_err(|_| Error::Format("invalid maxval".into()))?;
    if maxval != 255 {
        return Err(Error::Format(format!("only maxval 255 supported, got {maxval}")));
    }
    if width == 0 || height == 0 {
        return Err(Error::Format("zero image dimension".into()));
    }
    // exactly one whitespace byte separates header and payload
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(Error::Format("missing header terminator".into())),
    }
    let need = width * height;
    let payload = &bytes[pos..];
    if payload.len() < need {
        return Err(Error::Format(format!(
            "truncated payload: need {need} bytes, got {}",
            payload.len()
        )));
    }
    let data = payload[..need].iter().map(|&b| b as f64 / 255.0).collect();
    ValueGrid::new(1, height, width, data)
}

/// Save a single-channel grid as a binary P5 graymap: values are clamped to
/// [0,1], scaled by 255, and rounded half-up.
pub fn save_gray<P: AsRef<Path>>(path: P, image: &ValueGrid) -> Result<()> {
    if image.channels() != 1 {
        return Err(Error::ChannelMismatch { expected: 1, actual: image.channels() });
    }
    let mut writer = BufWriter::new(File::create(path)?);
    write!(writer, "P5\n{} {}\n255\n", image.width(), image.height())?;
    let bytes: Vec<u8> = image
        .data()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8)
        .collect();
    writer.write_all(&bytes)?;
    Ok(())
}

/// Dump a grid as `GRID c h w\n` followed by little-endian 32-bit floats in
/// row-major order. Used for response-map snapshots.
pub fn save_raw<P: AsRef<Path>>(path: P, grid: &ValueGrid) -> Result<()> {
    let mut writer = BufWriter::new(File::create(path)?);
    write!(writer, "GRID {} {} {}\n", grid.channels(), grid.height(), grid.width())?;
    for &v in grid.data() {
        writer.write_all(&(v as f32).to_le_bytes())?;
    }
    Ok(())
}

/// Load a raw grid dump written by [`save_raw`].
pub fn load_raw<P: AsRef<Path>>(path: P) -> Result<ValueGrid> {
    let mut reader = BufReader::new(File::open(path)?);
    let mut bytes = Vec::new();
    reader.read_to_end(&mut bytes)?;
    let newline = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Format("missing raw-grid header line".into()))?;
    let header = String::from_utf8_lossy(&bytes[..newline]);
    let fields: Vec<&str> = header.split_whitespace().collect();
    if fields.len() != 4 || fields[0] != "GRID" {
        return Err(Error::Format(format!("bad raw-grid header `{header}`")));
    }
    let parse = |s: &str| -> Result<usize> {
        s.parse().map_err(|_| Error::Format(format!("bad raw-grid dimension `{s}`")))
    };
    let (c, h, w) = (parse(fields[1])?, parse(fields[2])?, parse(fields[3])?);
    let need = c * h * w;
    let payload = &bytes[newline + 1..];
    if payload.len() < need * 4 {
        return Err(Error::Format(format!(
            "truncated raw grid: need {} bytes, got {}",
            need * 4,
            payload.len()
        )));
    }
    let data = payload[..need * 4]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    ValueGrid::new(c, h, w, data)
}
