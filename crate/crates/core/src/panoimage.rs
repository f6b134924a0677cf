//! Equirectangular-to-perspective unwarping: cut a pinhole-camera crop out
//! of a 360° panorama.
//!
//! The pipeline is split in two so the geometry can be tested without
//! pixels:
//!
//! 1. [`sampling_map`] — for every output pixel, where in the panorama does
//!    its camera ray land? Pure trigonometry, computed once per crop.
//! 2. [`bilinear_sample`] — read the panorama at those (fractional)
//!    coordinates with bilinear filtering, wrapping across the horizontal
//!    seam and clamping at the poles.
//!
//! [`unwarp`] composes the two.
//!
//! Panorama orientation convention (shared with the synthetic renderer, and
//! the canonical form real-imagery adapters must normalize to): the center
//! column faces the vehicle azimuth, columns increase clockwise (eastward
//! when facing north), row 0 is the zenith, and the bottom row is the
//! nadir. So column `c` of a `W`-wide panorama shows world azimuth
//! `vehicle_azimuth − 180 + c/W·360`.

use image::RgbImage;

use crate::error::{Error, Result};
use crate::geo::wrap360;
use crate::labelgen::CropSpec;
use crate::panograph::PanoMeta;

/// Focal length in pixels of a pinhole camera with the given horizontal
/// field of view and image width.
pub fn focal_px(fov_deg: f64, width_px: u32) -> f64 {
    (width_px as f64 / 2.0) / (fov_deg.to_radians() / 2.0).tan()
}

/// World (azimuth, elevation) of the camera ray through continuous crop
/// coordinates `(u, v)`.
///
/// The crop's pixel grid has pixel `(i, j)` centered at `(i + 0.5, j + 0.5)`,
/// `(0, 0)` at the top-left corner, and `(w/2, h/2)` exactly on the optical
/// axis, so `u = 0` and `u = w` on the center row land at exactly ∓fov/2
/// from the crop heading. The ray `(u − w/2, v − h/2, f)` is rotated up by
/// the pitch, then from north to the crop heading; azimuth is measured
/// clockwise from north, elevation upward from the horizon.
pub fn ray_angles(crop: &CropSpec, u: f64, v: f64) -> (f64, f64) {
    let f = focal_px(crop.fov_deg, crop.width_px);
    let x = u - crop.width_px as f64 / 2.0;
    let y = v - crop.height_px as f64 / 2.0;

    // Tilt about the camera's x-axis. Image y points down, so a ray that
    // should rise (positive pitch) needs its y component pushed negative.
    let (sp, cp) = crop.pitch_deg.to_radians().sin_cos();
    let yp = y * cp - f * sp;
    let zp = y * sp + f * cp;

    // Rotate the (x, z) ground-plane components from camera frame (z =
    // forward) into world east/north.
    let (sh, ch) = crop.heading_deg.to_radians().sin_cos();
    let east = x * ch + zp * sh;
    let north = -x * sh + zp * ch;
    let up = -yp;

    let az = wrap360(east.atan2(north).to_degrees());
    let el = up.atan2(east.hypot(north)).to_degrees();
    (az, el)
}

/// Continuous panorama coordinates showing world direction `(az, el)`.
/// `col ∈ [0, pano_w)`, `row ∈ [0, pano_h]` for `el ∈ [−90, 90]`.
pub fn pano_coords(
    az_deg: f64,
    el_deg: f64,
    pano_w: u32,
    pano_h: u32,
    pano_azimuth_deg: f64,
) -> (f64, f64) {
    let col = wrap360(az_deg - pano_azimuth_deg + 180.0) / 360.0 * pano_w as f64;
    let row = (90.0 - el_deg) / 180.0 * pano_h as f64;
    (col, row)
}

/// Where each output pixel of one crop reads from in one panorama.
#[derive(Debug, Clone)]
pub struct SamplingMap {
    crop_w: u32,
    crop_h: u32,
    pano_w: u32,
    pano_h: u32,
    /// Row-major (col, row) source coordinates, one per output pixel.
    coords: Vec<(f64, f64)>,
}

impl SamplingMap {
    pub fn crop_size(&self) -> (u32, u32) {
        (self.crop_w, self.crop_h)
    }

    pub fn pano_size(&self) -> (u32, u32) {
        (self.pano_w, self.pano_h)
    }

    /// Source coordinates for output pixel (u, v).
    pub fn source(&self, u: u32, v: u32) -> (f64, f64) {
        self.coords[(v * self.crop_w + u) as usize]
    }
}

/// Build the sampling map for a crop out of a `pano_w`x`pano_h` panorama
/// whose center column faces `pano_azimuth_deg`. Each output pixel is
/// sampled at its center.
pub fn sampling_map(
    crop: &CropSpec,
    pano_w: u32,
    pano_h: u32,
    pano_azimuth_deg: f64,
) -> Result<SamplingMap> {
    if !(crop.fov_deg > 0.0 && crop.fov_deg < 180.0) {
        return Err(Error::Validation(format!(
            "field of view must be in (0, 180) degrees, got {}",
            crop.fov_deg
        )));
    }
    if crop.width_px == 0 || crop.height_px == 0 {
        return Err(Error::Validation("crop dimensions must be positive".into()));
    }
    if pano_w == 0 || pano_h == 0 {
        return Err(Error::Validation(
            "panorama dimensions must be positive".into(),
        ));
    }
    let mut coords = Vec::with_capacity((crop.width_px * crop.height_px) as usize);
    for v in 0..crop.height_px {
        for u in 0..crop.width_px {
            let (az, el) = ray_angles(crop, u as f64 + 0.5, v as f64 + 0.5);
            coords.push(pano_coords(az, el, pano_w, pano_h, pano_azimuth_deg));
        }
    }
    Ok(SamplingMap {
        crop_w: crop.width_px,
        crop_h: crop.height_px,
        pano_w,
        pano_h,
        coords,
    })
}

/// Bilinear tap at continuous panorama coordinates. Pixel `(i, j)` is
/// centered at `(i + 0.5, j + 0.5)`; the horizontal axis wraps (the 0/W
/// seam is the same meridian), the vertical axis clamps (there is nothing
/// above the zenith row).
fn bilinear_tap(pano: &RgbImage, col: f64, row: f64) -> [u8; 3] {
    let w = pano.width() as i64;
    let h = pano.height() as i64;
    let fx = col - 0.5;
    let fy = row - 0.5;
    let x0 = fx.floor();
    let y0 = fy.floor();
    let wx = fx - x0;
    let wy = fy - y0;
    let xi0 = (x0 as i64).rem_euclid(w);
    let xi1 = (x0 as i64 + 1).rem_euclid(w);
    let yi0 = (y0 as i64).clamp(0, h - 1);
    let yi1 = (y0 as i64 + 1).clamp(0, h - 1);
    let p00 = pano.get_pixel(xi0 as u32, yi0 as u32).0;
    let p10 = pano.get_pixel(xi1 as u32, yi0 as u32).0;
    let p01 = pano.get_pixel(xi0 as u32, yi1 as u32).0;
    let p11 = pano.get_pixel(xi1 as u32, yi1 as u32).0;
    let mut out = [0u8; 3];
    for c in 0..3 {
        let top = p00[c] as f64 * (1.0 - wx) + p10[c] as f64 * wx;
        let bot = p01[c] as f64 * (1.0 - wx) + p11[c] as f64 * wx;
        out[c] = (top * (1.0 - wy) + bot * wy).round().clamp(0.0, 255.0) as u8;
    }
    out
}

/// Resample a panorama through a sampling map.
pub fn bilinear_sample(pano: &RgbImage, map: &SamplingMap) -> Result<RgbImage> {
    if (pano.width(), pano.height()) != (map.pano_w, map.pano_h) {
        return Err(Error::Validation(format!(
            "sampling map was built for a {}x{} panorama, got {}x{}",
            map.pano_w,
            map.pano_h,
            pano.width(),
            pano.height()
        )));
    }
    let mut out = RgbImage::new(map.crop_w, map.crop_h);
    for v in 0..map.crop_h {
        for u in 0..map.crop_w {
            let (col, row) = map.source(u, v);
            out.put_pixel(u, v, image::Rgb(bilinear_tap(pano, col, row)));
        }
    }
    Ok(out)
}

/// Cut one perspective crop out of one panorama.
pub fn unwarp(pano: &RgbImage, meta: &PanoMeta, crop: &CropSpec) -> Result<RgbImage> {
    let map = sampling_map(crop, pano.width(), pano.height(), meta.azimuth_deg)?;
    bilinear_sample(pano, &map)
}
