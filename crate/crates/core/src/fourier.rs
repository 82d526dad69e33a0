//! 2D discrete Fourier analysis of image planes and amplitude-spectrum
//! style injection.
//!
//! The forward transform is unnormalized; the inverse carries the
//! `1 / (W·H)` factor. Only power-of-two extents are accepted.

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::image::Image;

/// Largest imaginary residue tolerated when a round trip is expected to be
/// real.
pub const REAL_RESIDUE_TOL: f64 = 1e-6;

fn check_pow2(width: usize, height: usize) -> Result<()> {
    if !width.is_power_of_two() || !height.is_power_of_two() {
        return Err(Error::invalid(format!(
            "FFT extents must be powers of two, got {width}x{height}"
        )));
    }
    Ok(())
}

/// In-place iterative radix-2 transform of one line. `inverse` flips the
/// twiddle sign; no scaling is applied.
fn fft1d(buf: &mut [Complex64], inverse: bool) {
    let n = buf.len();
    if n <= 1 {
        return;
    }
    let bits = n.trailing_zeros();
    for i in 0..n {
        let j = i.reverse_bits() >> (usize::BITS - bits);
        if i < j {
            buf.swap(i, j);
        }
    }
    let sign = if inverse { 1.0 } else { -1.0 };
    let mut len = 2;
    while len <= n {
        let half = len / 2;
        let step = sign * 2.0 * std::f64::consts::PI / len as f64;
        for start in (0..n).step_by(len) {
            for k in 0..half {
                // Twiddles are evaluated directly rather than by repeated
                // multiplication to keep round-off at the 1e-15 level.
                let w = Complex64::from_polar(1.0, step * k as f64);
                let a = buf[start + k];
                let b = buf[start + k + half] * w;
                buf[start + k] = a + b;
                buf[start + k + half] = a - b;
            }
        }
        len <<= 1;
    }
}

fn transform2d(width: usize, height: usize, data: &mut [Complex64], inverse: bool) {
    for row in data.chunks_exact_mut(width) {
        fft1d(row, inverse);
    }
    let mut col = vec![Complex64::default(); height];
    for x in 0..width {
        for y in 0..height {
            col[y] = data[y * width + x];
        }
        fft1d(&mut col, inverse);
        for y in 0..height {
            data[y * width + x] = col[y];
        }
    }
}

/// Unnormalized forward 2D transform of a real row-major plane.
pub fn fft2(plane: &[f64], width: usize, height: usize) -> Result<Vec<Complex64>> {
    let data: Vec<Complex64> = plane.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    fft2_complex(data, width, height)
}

pub fn fft2_complex(mut data: Vec<Complex64>, width: usize, height: usize) -> Result<Vec<Complex64>> {
    check_pow2(width, height)?;
    if data.len() != width * height {
        return Err(Error::invalid("plane length does not match extents"));
    }
    transform2d(width, height, &mut data, false);
    Ok(data)
}

/// Inverse 2D transform with `1 / (W·H)` normalization, complex output.
pub fn ifft2_complex(spectrum: &[Complex64], width: usize, height: usize) -> Result<Vec<Complex64>> {
    check_pow2(width, height)?;
    if spectrum.len() != width * height {
        return Err(Error::invalid("spectrum length does not match extents"));
    }
    let mut data = spectrum.to_vec();
    transform2d(width, height, &mut data, true);
    let scale = 1.0 / (width * height) as f64;
    for v in &mut data {
        *v *= scale;
    }
    Ok(data)
}

/// Inverse transform returning the real part and the largest discarded
/// imaginary magnitude.
pub fn ifft2_with_residue(
    spectrum: &[Complex64],
    width: usize,
    height: usize,
) -> Result<(Vec<f64>, f64)> {
    let data = ifft2_complex(spectrum, width, height)?;
    let residue = data.iter().fold(0.0f64, |m, v| m.max(v.im.abs()));
    Ok((data.iter().map(|v| v.re).collect(), residue))
}

/// Inverse transform of a spectrum expected to come from a real plane.
/// Fails if the imaginary residue exceeds [`REAL_RESIDUE_TOL`].
pub fn ifft2(spectrum: &[Complex64], width: usize, height: usize) -> Result<Vec<f64>> {
    let (re, residue) = ifft2_with_residue(spectrum, width, height)?;
    if residue >= REAL_RESIDUE_TOL {
        return Err(Error::invalid(format!(
            "inverse transform has imaginary residue {residue:e}"
        )));
    }
    Ok(re)
}

/// Per-channel complex spectra of an image.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrum {
    width: usize,
    height: usize,
    planes: Vec<Vec<Complex64>>,
}

impl Spectrum {
    pub fn of_image(image: &Image) -> Result<Self> {
        let (w, h) = (image.width(), image.height());
        let planes = (0..image.channels())
            .map(|c| fft2(&image.plane_f64(c), w, h))
            .collect::<Result<_>>()?;
        Ok(Spectrum {
            width: w,
            height: h,
            planes,
        })
    }

    /// Rebuilds a spectrum from amplitude and phase views.
    pub fn compose(
        width: usize,
        height: usize,
        amplitudes: &[Vec<f64>],
        phases: &[Vec<f64>],
    ) -> Result<Self> {
        check_pow2(width, height)?;
        if amplitudes.len() != phases.len() {
            return Err(Error::invalid("amplitude/phase channel counts differ"));
        }
        let planes = amplitudes
            .iter()
            .zip(phases)
            .map(|(a, p)| {
                if a.len() != width * height || p.len() != width * height {
                    return Err(Error::invalid("view length does not match extents"));
                }
                Ok(a.iter()
                    .zip(p)
                    .map(|(&a, &p)| Complex64::from_polar(a, p))
                    .collect())
            })
            .collect::<Result<_>>()?;
        Ok(Spectrum {
            width,
            height,
            planes,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.planes.len()
    }

    pub fn plane(&self, c: usize) -> &[Complex64] {
        &self.planes[c]
    }

    /// `√(re² + im²)` per bin.
    pub fn amplitude(&self, c: usize) -> Vec<f64> {
        self.planes[c].iter().map(|v| v.norm()).collect()
    }

    /// `atan2(im, re)` per bin.
    pub fn phase(&self, c: usize) -> Vec<f64> {
        self.planes[c].iter().map(|v| v.arg()).collect()
    }

    /// Inverse-transforms every channel into a clamped image.
    pub fn to_image(&self) -> Result<Image> {
        let planes = self
            .planes
            .iter()
            .map(|p| ifft2_with_residue(p, self.width, self.height).map(|(re, _)| re))
            .collect::<Result<Vec<_>>>()?;
        Image::from_planes_clamped(self.width, self.height, &planes)
    }
}

/// Signed frequency of bin `k` on an axis of length `n` (fftshift order).
fn signed_freq(k: usize, n: usize) -> f64 {
    if k < n / 2 {
        k as f64
    } else {
        k as f64 - n as f64
    }
}

/// Whether bin `(u, v)` lies in the centered low-frequency window of
/// half-width `beta · extent / 2` on each axis. Bounds are half-open, so
/// `beta == 1` selects every bin exactly once and `beta == 0` none.
pub fn in_swap_window(u: usize, v: usize, width: usize, height: usize, beta: f64) -> bool {
    let rx = beta * width as f64 / 2.0;
    let ry = beta * height as f64 / 2.0;
    let (fu, fv) = (signed_freq(u, width), signed_freq(v, height));
    -rx <= fu && fu < rx && -ry <= fv && fv < ry
}

fn check_beta(beta: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::invalid(format!("beta {beta} outside [0, 1]")));
    }
    Ok(())
}

/// Spectrum whose amplitude comes from `style` and phase from `content`
/// inside the swap window, and equals `content` elsewhere.
pub fn splice_spectrum(content: &Spectrum, style: &Spectrum, beta: f64) -> Result<Spectrum> {
    check_beta(beta)?;
    if content.width != style.width
        || content.height != style.height
        || content.channels() != style.channels()
    {
        return Err(Error::invalid("content and style spectra differ in shape"));
    }
    let (w, h) = (content.width, content.height);
    let planes = content
        .planes
        .iter()
        .zip(&style.planes)
        .map(|(cp, sp)| {
            let mut out = cp.clone();
            for v in 0..h {
                for u in 0..w {
                    if in_swap_window(u, v, w, h, beta) {
                        let i = v * w + u;
                        out[i] = Complex64::from_polar(sp[i].norm(), cp[i].arg());
                    }
                }
            }
            out
        })
        .collect();
    Ok(Spectrum {
        width: w,
        height: h,
        planes,
    })
}

/// Gives `content` the amplitude spectrum of `style` on the low-frequency
/// window selected by `beta`, keeping the content phase, then clamps the
/// inverse transform to `[0, 1]`.
pub fn style_inject(content: &Image, style: &Image, beta: f64) -> Result<Image> {
    check_beta(beta)?;
    if !content.same_dims(style) {
        return Err(Error::invalid(format!(
            "style image {}x{}x{} does not match content {}x{}x{}",
            style.width(),
            style.height(),
            style.channels(),
            content.width(),
            content.height(),
            content.channels()
        )));
    }
    let cs = Spectrum::of_image(content)?;
    let ss = Spectrum::of_image(style)?;
    splice_spectrum(&cs, &ss, beta)?.to_image()
}
