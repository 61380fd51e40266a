//! Sliding-window inference with uniform probability averaging.

use crate::data::VolumeRecord;
use crate::error::{Error, Result};
use crate::network::APAUNet;
use crate::params::{Ctx, ParamStore};
use crate::tensor::{Real, Tensor};

/// Window origins along one axis: stride `⌊p·(1−overlap)⌋` (at least 1), with
/// the last window clamped to the border.
pub fn window_starts(n: usize, p: usize, overlap: f64) -> Result<Vec<usize>> {
    if !(0.0..1.0).contains(&overlap) {
        return Err(Error::Invalid(format!("overlap {overlap} outside [0, 1)")));
    }
    if p == 0 || n < p {
        return Err(Error::shape(format!("extent {n} is smaller than window {p}")));
    }
    let stride = ((p as f64 * (1.0 - overlap)).floor() as usize).max(1);
    let mut starts: Vec<usize> = (0..).map(|i| i * stride).take_while(|&s| s + p < n).collect();
    starts.push(n - p);
    Ok(starts)
}

fn grid(shape: [usize; 3], patch: [usize; 3], overlap: f64) -> Result<Vec<[usize; 3]>> {
    let [a, b, c] = [0, 1, 2].map(|i| window_starts(shape[i], patch[i], overlap));
    let (a, b, c) = (a?, b?, c?);
    let mut out = Vec::with_capacity(a.len() * b.len() * c.len());
    for &i in &a {
        for &j in &b {
            for &k in &c {
                out.push([i, j, k]);
            }
        }
    }
    Ok(out)
}

/// Number of windows covering each voxel.
pub fn coverage_map(shape: [usize; 3], patch: [usize; 3], overlap: f64) -> Result<Vec<u32>> {
    let mut cover = vec![0u32; shape.iter().product()];
    for o in grid(shape, patch, overlap)? {
        for i in 0..patch[0] {
            for j in 0..patch[1] {
                let s = ((o[0] + i) * shape[1] + o[1] + j) * shape[2] + o[2];
                cover[s..s + patch[2]].iter_mut().for_each(|c| *c += 1);
            }
        }
    }
    Ok(cover)
}

pub struct WindowOutput {
    pub labels: Vec<u8>,
    /// `(classes, H, W, D)` averaged probabilities.
    pub probabilities: Tensor<f32>,
    pub windows: usize,
}

/// Tiles `rec` with `patch` windows, averages per-voxel softmax
/// probabilities over covering windows and takes the argmax (ties go to the
/// lowest class).
pub fn sliding_window_infer<T: Real>(
    net: &APAUNet,
    store: &ParamStore<T>,
    rec: &VolumeRecord,
    patch: [usize; 3],
    overlap: f64,
) -> Result<WindowOutput> {
    sliding_window_ordered(net, store, rec, patch, overlap, false)
}

/// `reverse` enumerates windows in the opposite order.
pub(crate) fn sliding_window_ordered<T: Real>(
    net: &APAUNet,
    store: &ParamStore<T>,
    rec: &VolumeRecord,
    patch: [usize; 3],
    overlap: f64,
    reverse: bool,
) -> Result<WindowOutput> {
    rec.validate(None)?;
    let shape = rec.shape;
    let classes = net.config.num_classes;
    let vol = rec.voxels();
    let pv: usize = patch.iter().product();
    let mut windows = grid(shape, patch, overlap)?;
    if reverse {
        windows.reverse();
    }
    let mut acc = vec![0f64; classes * vol];
    let mut count = vec![0u32; vol];
    for o in &windows {
        let mut x = Vec::with_capacity(pv);
        for i in 0..patch[0] {
            for j in 0..patch[1] {
                let s = rec.index(o[0] + i, o[1] + j, o[2]);
                x.extend(rec.image[s..s + patch[2]].iter().map(|&v| T::lit(v as f64)));
            }
        }
        let x = Tensor::new(&[1, 1, patch[0], patch[1], patch[2]], x)?;
        let mut ctx = Ctx::new(store, false);
        let xv = ctx.tape.constant(x);
        let logits = net.forward(&mut ctx, xv)?.logits;
        let probs = ctx.tape.softmax(logits, 1)?;
        let p = ctx.value(probs).data();
        for i in 0..patch[0] {
            for j in 0..patch[1] {
                for k in 0..patch[2] {
                    let local = (i * patch[1] + j) * patch[2] + k;
                    let global = rec.index(o[0] + i, o[1] + j, o[2] + k);
                    for c in 0..classes {
                        acc[c * vol + global] += p[c * pv + local].to_f64_lossy();
                    }
                    count[global] += 1;
                }
            }
        }
    }
    let mut labels = vec![0u8; vol];
    let mut probs = vec![0f32; classes * vol];
    for v in 0..vol {
        let n = count[v] as f64;
        let mut best = 0;
        for c in 0..classes {
            let mean = acc[c * vol + v] / n;
            probs[c * vol + v] = mean as f32;
            if mean > acc[best * vol + v] / n {
                best = c;
            }
        }
        labels[v] = best as u8;
    }
    Ok(WindowOutput {
        labels,
        probabilities: Tensor::new(&[classes, shape[0], shape[1], shape[2]], probs)?,
        windows: windows.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::APAUNetConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> (APAUNet, ParamStore<f32>) {
        let cfg = APAUNetConfig { levels: 2, base_channels: 4, seed: 5, ..APAUNetConfig::default() };
        APAUNet::build(&cfg).unwrap()
    }

    fn volume(shape: [usize; 3], seed: u64) -> VolumeRecord {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        VolumeRecord {
            case_id: "v".into(),
            shape,
            spacing: [1.0; 3],
            image: (0..n).map(|_| r.gen_range(-1.0..2.0)).collect(),
            label: vec![0; n],
            tumour_fraction: None,
        }
    }

    #[test]
    fn grid_counting() {
        assert_eq!(window_starts(100, 32, 0.5).unwrap(), vec![0, 16, 32, 48, 64, 68]);
        assert_eq!(window_starts(32, 32, 0.5).unwrap(), vec![0]);
        assert_eq!(window_starts(40, 32, 0.0).unwrap(), vec![0, 8]);
        let cover = coverage_map([100; 3], [32; 3], 0.5).unwrap();
        assert!(cover.iter().all(|&c| c >= 1));
        // along one axis the counts are 1,2,2,2,2,3(clamped overlap),...
        let per_axis = |i: usize| window_starts(100, 32, 0.5).unwrap().iter().filter(|&&s| s <= i && i < s + 32).count();
        for (v, &c) in cover.iter().enumerate().step_by(997) {
            let (i, j, k) = (v / 10_000, (v / 100) % 100, v % 100);
            assert_eq!(c as usize, per_axis(i) * per_axis(j) * per_axis(k));
        }
        assert!(window_starts(10, 32, 0.5).is_err());
        assert!(window_starts(64, 32, 1.0).is_err());
    }

    #[test]
    fn single_window_equals_forward() {
        let (net, store) = tiny();
        let rec = volume([8, 8, 8], 1);
        let out = sliding_window_infer(&net, &store, &rec, [8; 3], 0.5).unwrap();
        assert_eq!(out.windows, 1);
        let x = Tensor::new(&[1, 1, 8, 8, 8], rec.image.clone()).unwrap();
        let logits = net.predict(&store, &x).unwrap();
        let c = net.config.num_classes;
        for v in 0..512 {
            let row: Vec<f32> = (0..c).map(|k| logits.data()[k * 512 + v]).collect();
            let mut best = 0;
            for k in 1..c {
                if row[k] > row[best] {
                    best = k;
                }
            }
            assert_eq!(out.labels[v] as usize, best);
        }
    }

    #[test]
    fn enumeration_order_is_irrelevant() {
        let (net, store) = tiny();
        let rec = volume([12, 10, 9], 2);
        let a = sliding_window_ordered(&net, &store, &rec, [8, 8, 8], 0.5, false).unwrap();
        let b = sliding_window_ordered(&net, &store, &rec, [8, 8, 8], 0.5, true).unwrap();
        assert_eq!(a.labels, b.labels);
        for (x, y) in a.probabilities.data().iter().zip(b.probabilities.data()) {
            assert!((x - y).abs() <= 1e-6);
        }
        let cover = coverage_map([12, 10, 9], [8; 3], 0.5).unwrap();
        assert!(cover.iter().all(|&c| c >= 1));
    }

    #[test]
    fn small_volume_is_rejected() {
        let (net, store) = tiny();
        let rec = volume([8, 6, 8], 3);
        assert!(matches!(sliding_window_infer(&net, &store, &rec, [8; 3], 0.5), Err(Error::Shape(_))));
    }
}
