//! Crop, resample and intensity normalization.

use super::VolumeRecord;
use crate::error::{Error, Result};

fn crop_to_nonzero(rec: &VolumeRecord) -> Result<VolumeRecord> {
    let [h, w, d] = rec.shape;
    let mut lo = [usize::MAX; 3];
    let mut hi = [0usize; 3];
    for i in 0..h {
        for j in 0..w {
            for k in 0..d {
                if rec.image[rec.index(i, j, k)] != 0.0 {
                    for (a, v) in [i, j, k].into_iter().enumerate() {
                        lo[a] = lo[a].min(v);
                        hi[a] = hi[a].max(v);
                    }
                }
            }
        }
    }
    if lo[0] == usize::MAX {
        return Err(Error::Invalid(format!("{}: image is all zero", rec.case_id)));
    }
    let shape: [usize; 3] = std::array::from_fn(|a| hi[a] - lo[a] + 1);
    let n = shape.iter().product();
    let mut image = Vec::with_capacity(n);
    let mut label = Vec::with_capacity(n);
    for i in lo[0]..=hi[0] {
        for j in lo[1]..=hi[1] {
            let s = rec.index(i, j, lo[2]);
            image.extend_from_slice(&rec.image[s..s + shape[2]]);
            label.extend_from_slice(&rec.label[s..s + shape[2]]);
        }
    }
    Ok(VolumeRecord { shape, image, label, ..rec.clone() })
}

/// Source coordinate of destination voxel `j` with voxel centres aligned.
fn source_coord(j: usize, scale: f64, n: usize) -> f64 {
    ((j as f64 + 0.5) * scale - 0.5).clamp(0.0, (n - 1) as f64)
}

/// Resamples to `target` spacing: trilinear for the image, nearest neighbour
/// for the label. The new extent along each axis is `round(n·s/t)`.
pub fn resample(rec: &VolumeRecord, target: [f64; 3]) -> Result<VolumeRecord> {
    rec.validate(None)?;
    if target.iter().any(|&t| !(t > 0.0 && t.is_finite())) {
        return Err(Error::Invalid(format!("target spacing {target:?} must be positive")));
    }
    let shape: [usize; 3] =
        std::array::from_fn(|a| ((rec.shape[a] as f64 * rec.spacing[a] / target[a]).round() as usize).max(1));
    let scale: [f64; 3] = std::array::from_fn(|a| rec.shape[a] as f64 / shape[a] as f64);
    let coords: [Vec<(usize, usize, f64, usize)>; 3] = std::array::from_fn(|a| {
        (0..shape[a])
            .map(|j| {
                let x = source_coord(j, scale[a], rec.shape[a]);
                let x0 = x.floor() as usize;
                let x1 = (x0 + 1).min(rec.shape[a] - 1);
                let nearest = (x.round() as usize).min(rec.shape[a] - 1);
                (x0, x1, x - x0 as f64, nearest)
            })
            .collect()
    });
    let n = shape.iter().product();
    let mut image = Vec::with_capacity(n);
    let mut label = Vec::with_capacity(n);
    for &(i0, i1, fi, ni) in &coords[0] {
        for &(j0, j1, fj, nj) in &coords[1] {
            for &(k0, k1, fk, nk) in &coords[2] {
                let v = |i, j, k| rec.image[rec.index(i, j, k)] as f64;
                let lerp = |a: f64, b: f64, t: f64| a + (b - a) * t;
                let c00 = lerp(v(i0, j0, k0), v(i0, j0, k1), fk);
                let c01 = lerp(v(i0, j1, k0), v(i0, j1, k1), fk);
                let c10 = lerp(v(i1, j0, k0), v(i1, j0, k1), fk);
                let c11 = lerp(v(i1, j1, k0), v(i1, j1, k1), fk);
                let c0 = lerp(c00, c01, fj);
                let c1 = lerp(c10, c11, fj);
                image.push(lerp(c0, c1, fi) as f32);
                label.push(rec.label[rec.index(ni, nj, nk)]);
            }
        }
    }
    Ok(VolumeRecord { shape, spacing: target, image, label, ..rec.clone() })
}

/// Z-scores the nonzero voxels; zeros stay zero.
fn normalize(rec: &mut VolumeRecord) {
    let (mut n, mut sum, mut sq) = (0usize, 0f64, 0f64);
    for &v in rec.image.iter().filter(|&&v| v != 0.0) {
        n += 1;
        sum += v as f64;
        sq += (v as f64) * (v as f64);
    }
    if n == 0 {
        return;
    }
    let mean = sum / n as f64;
    let var = (sq / n as f64 - mean * mean).max(0.0);
    let std = if var > 0.0 { var.sqrt() } else { 1.0 };
    for v in rec.image.iter_mut().filter(|v| **v != 0.0) {
        *v = ((*v as f64 - mean) / std) as f32;
    }
}

/// Crops to the nonzero bounding box, optionally resamples, then z-scores.
pub fn preprocess(rec: &VolumeRecord, target_spacing: Option<[f64; 3]>) -> Result<VolumeRecord> {
    rec.validate(None)?;
    let cropped = crop_to_nonzero(rec)?;
    let mut out = match target_spacing {
        Some(t) if t != cropped.spacing => resample(&cropped, t)?,
        _ => cropped,
    };
    normalize(&mut out);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(shape: [usize; 3], spacing: [f64; 3], f: impl Fn(usize, usize, usize) -> (f32, u8)) -> VolumeRecord {
        let mut image = Vec::new();
        let mut label = Vec::new();
        for i in 0..shape[0] {
            for j in 0..shape[1] {
                for k in 0..shape[2] {
                    let (v, l) = f(i, j, k);
                    image.push(v);
                    label.push(l);
                }
            }
        }
        VolumeRecord { case_id: "t".into(), shape, spacing, image, label, tumour_fraction: None }
    }

    #[test]
    fn crop_removes_zero_margin() {
        let rec = record([6, 7, 8], [1.0; 3], |i, j, k| {
            if (1..4).contains(&i) && (2..5).contains(&j) && k == 6 {
                (3.0, 1)
            } else {
                (0.0, 0)
            }
        });
        let out = preprocess(&rec, None).unwrap();
        assert_eq!(out.shape, [3, 3, 1]);
        assert_eq!(out.foreground_voxels(), 9);
    }

    #[test]
    fn all_zero_is_an_error() {
        let rec = record([3, 3, 3], [1.0; 3], |_, _, _| (0.0, 0));
        assert!(matches!(preprocess(&rec, None), Err(Error::Invalid(_))));
    }

    #[test]
    fn fixed_point_geometry() {
        let rec = record([4, 5, 6], [1.0, 2.0, 0.5], |i, j, k| ((1 + i + 2 * j + 3 * k) as f32, (k % 2) as u8));
        let out = preprocess(&rec, Some([1.0, 2.0, 0.5])).unwrap();
        assert_eq!(out.shape, rec.shape);
        assert_eq!(out.label, rec.label);
        let n = out.image.len() as f64;
        let mean = out.image.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = out.image.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 1e-5 && (var - 1.0).abs() < 1e-4);
    }

    #[test]
    fn anisotropic_resample_shape() {
        let rec = record([8, 8, 8], [1.0, 1.0, 2.0], |i, j, k| (1.0 + (i + j + k) as f32, ((i + j + k) % 3) as u8));
        let out = resample(&rec, [1.0; 3]).unwrap();
        assert_eq!(out.shape, [8, 8, 16]);
        assert!(out.label.iter().all(|&l| l < 3));
        // trilinear on a linear ramp stays linear in the interior
        let v = |k| out.image[out.index(3, 3, k)];
        assert!((v(5) - v(4) - 0.5).abs() < 1e-5);
    }

    #[test]
    fn sphere_volume_is_preserved() {
        let r = 7.0;
        let spacing = [1.0, 1.0, 2.0];
        let shape = [24, 24, 12];
        let c = [11.5, 11.5, 5.75];
        let rec = record(shape, spacing, |i, j, k| {
            let d2 = (i as f64 - c[0]).powi(2) + (j as f64 - c[1]).powi(2) + ((k as f64 - c[2]) * 2.0).powi(2);
            if d2 <= r * r {
                (5.0, 1)
            } else {
                (0.0, 0)
            }
        });
        let want = 4.0 / 3.0 * std::f64::consts::PI * r * r * r;
        let out = resample(&rec, [1.0; 3]).unwrap();
        let mm3 = out.foreground_voxels() as f64;
        assert!((mm3 - want).abs() / want < 0.10, "{mm3} vs {want}");
        let bright = out.image.iter().filter(|&&v| v >= 2.5).count() as f64;
        assert!((bright - want).abs() / want < 0.10, "{bright} vs {want}");
    }
}
