//! Foreground-oversampled patch sampling and flip augmentation.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::VolumeRecord;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PatchSpec {
    pub patch_shape: [usize; 3],
    /// Share of each batch forced to contain foreground.
    pub oversample_ratio: f64,
}

impl Default for PatchSpec {
    fn default() -> Self {
        Self { patch_shape: [32; 3], oversample_ratio: 0.5 }
    }
}

impl PatchSpec {
    pub fn validate(&self) -> Result<()> {
        if self.patch_shape.contains(&0) {
            return Err(Error::config(format!("patch shape {:?} has a zero extent", self.patch_shape)));
        }
        if !(0.0..=1.0).contains(&self.oversample_ratio) {
            return Err(Error::config(format!("oversample ratio {} outside [0, 1]", self.oversample_ratio)));
        }
        Ok(())
    }

    pub fn voxels(&self) -> usize {
        self.patch_shape.iter().product()
    }

    pub fn forced_slots(&self, batch_size: usize) -> usize {
        ((batch_size as f64 * self.oversample_ratio).ceil() as usize).min(batch_size)
    }
}

/// A window cut from one volume.
#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    pub case: usize,
    pub origin: [usize; 3],
    pub shape: [usize; 3],
    pub image: Vec<f32>,
    pub label: Vec<u8>,
    pub forced: bool,
}

impl Patch {
    pub fn has_foreground(&self) -> bool {
        self.label.iter().any(|&l| l > 0)
    }
}

pub struct PatchSampler<'a> {
    records: &'a [VolumeRecord],
    spec: PatchSpec,
    foreground: Vec<Vec<usize>>,
    with_foreground: Vec<usize>,
}

impl<'a> PatchSampler<'a> {
    pub fn new(records: &'a [VolumeRecord], spec: PatchSpec) -> Result<Self> {
        spec.validate()?;
        if records.is_empty() {
            return Err(Error::Invalid("patch sampler needs at least one volume".into()));
        }
        for r in records {
            if (0..3).any(|a| r.shape[a] < spec.patch_shape[a]) {
                return Err(Error::shape(format!(
                    "{}: volume {:?} is smaller than patch {:?}",
                    r.case_id, r.shape, spec.patch_shape
                )));
            }
        }
        let foreground: Vec<Vec<usize>> = records
            .iter()
            .map(|r| r.label.iter().enumerate().filter(|(_, &l)| l > 0).map(|(i, _)| i).collect())
            .collect();
        let with_foreground = (0..records.len()).filter(|&i| !foreground[i].is_empty()).collect();
        Ok(Self { records, spec, foreground, with_foreground })
    }

    pub fn spec(&self) -> &PatchSpec {
        &self.spec
    }

    /// The first ⌈b·ratio⌉ slots are centred on a random foreground voxel;
    /// the rest are uniform windows.
    pub fn sample_batch<R: Rng + ?Sized>(&self, batch_size: usize, rng: &mut R) -> Result<Vec<Patch>> {
        if batch_size == 0 {
            return Err(Error::Invalid("batch size must be at least 1".into()));
        }
        let forced = self.spec.forced_slots(batch_size);
        (0..batch_size)
            .map(|slot| {
                if slot < forced {
                    if self.with_foreground.is_empty() {
                        log::warn!("no foreground in any volume; forced slot {slot} sampled uniformly");
                    } else {
                        return Ok(self.foreground_patch(rng));
                    }
                }
                Ok(self.uniform_patch(rng))
            })
            .collect()
    }

    fn foreground_patch<R: Rng + ?Sized>(&self, rng: &mut R) -> Patch {
        let case = self.with_foreground[rng.gen_range(0..self.with_foreground.len())];
        let fg = &self.foreground[case];
        let flat = fg[rng.gen_range(0..fg.len())];
        let rec = &self.records[case];
        let [_, w, d] = rec.shape;
        let voxel = [flat / (w * d), (flat / d) % w, flat % d];
        let p = self.spec.patch_shape;
        let origin = std::array::from_fn(|a| voxel[a].saturating_sub(p[a] / 2).min(rec.shape[a] - p[a]));
        self.cut(case, origin, true)
    }

    fn uniform_patch<R: Rng + ?Sized>(&self, rng: &mut R) -> Patch {
        let case = rng.gen_range(0..self.records.len());
        let rec = &self.records[case];
        let p = self.spec.patch_shape;
        let origin = std::array::from_fn(|a| rng.gen_range(0..=rec.shape[a] - p[a]));
        self.cut(case, origin, false)
    }

    fn cut(&self, case: usize, origin: [usize; 3], forced: bool) -> Patch {
        let rec = &self.records[case];
        let p = self.spec.patch_shape;
        let mut image = Vec::with_capacity(self.spec.voxels());
        let mut label = Vec::with_capacity(self.spec.voxels());
        for i in 0..p[0] {
            for j in 0..p[1] {
                let start = rec.index(origin[0] + i, origin[1] + j, origin[2]);
                image.extend_from_slice(&rec.image[start..start + p[2]]);
                label.extend_from_slice(&rec.label[start..start + p[2]]);
            }
        }
        Patch { case, origin, shape: p, image, label, forced }
    }
}

/// Reverses `data` (an `(H, W, D)` volume) along every axis set in `mask`.
fn flip_volume<T: Copy>(data: &mut [T], shape: [usize; 3], mask: [bool; 3]) {
    let [h, w, d] = shape;
    let src = data.to_vec();
    for i in 0..h {
        let si = if mask[0] { h - 1 - i } else { i };
        for j in 0..w {
            let sj = if mask[1] { w - 1 - j } else { j };
            for k in 0..d {
                let sk = if mask[2] { d - 1 - k } else { k };
                data[(i * w + j) * d + k] = src[(si * w + sj) * d + sk];
            }
        }
    }
}

pub fn flip_patch(patch: &mut Patch, mask: [bool; 3]) {
    if mask == [false; 3] {
        return;
    }
    flip_volume(&mut patch.image, patch.shape, mask);
    flip_volume(&mut patch.label, patch.shape, mask);
}

/// Flips each axis independently with probability ½ and returns the mask.
pub fn random_flip<R: Rng + ?Sized>(patch: &mut Patch, rng: &mut R) -> [bool; 3] {
    let mask = [rng.gen_bool(0.5), rng.gen_bool(0.5), rng.gen_bool(0.5)];
    flip_patch(patch, mask);
    mask
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sparse(case: &str, shape: [usize; 3], fg: &[[usize; 3]]) -> VolumeRecord {
        let n = shape.iter().product();
        let mut rec = VolumeRecord {
            case_id: case.into(),
            shape,
            spacing: [1.0; 3],
            image: (0..n).map(|i| i as f32).collect(),
            label: vec![0; n],
            tumour_fraction: None,
        };
        for &[i, j, k] in fg {
            let x = rec.index(i, j, k);
            rec.label[x] = 2;
        }
        rec
    }

    fn spec() -> PatchSpec {
        PatchSpec { patch_shape: [4, 5, 3], oversample_ratio: 0.5 }
    }

    #[test]
    fn forced_slots_always_hold_foreground() {
        let recs = vec![
            sparse("a", [16, 12, 10], &[[0, 0, 0]]),
            sparse("b", [12, 16, 9], &[[11, 15, 8], [6, 7, 4]]),
            sparse("c", [10, 10, 10], &[]),
        ];
        let sampler = PatchSampler::new(&recs, spec()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut with_fg = 0;
        let batches = 10_000;
        for _ in 0..batches {
            let batch = sampler.sample_batch(2, &mut rng).unwrap();
            assert!(batch[0].forced && batch[0].has_foreground());
            assert!(batch.iter().any(Patch::has_foreground));
            with_fg += batch.iter().filter(|p| p.has_foreground()).count();
            for p in &batch {
                let rec = &recs[p.case];
                assert!((0..3).all(|a| p.origin[a] + p.shape[a] <= rec.shape[a]));
            }
        }
        assert!(with_fg as f64 / (2 * batches) as f64 >= 0.5);
    }

    #[test]
    fn patch_content_matches_volume() {
        let recs = vec![sparse("a", [9, 9, 9], &[[4, 4, 4]])];
        let sampler = PatchSampler::new(&recs, spec()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for p in sampler.sample_batch(6, &mut rng).unwrap() {
            let [o0, o1, o2] = p.origin;
            for i in 0..4 {
                for j in 0..5 {
                    for k in 0..3 {
                        let v = p.image[(i * 5 + j) * 3 + k];
                        assert_eq!(v, recs[0].image[recs[0].index(o0 + i, o1 + j, o2 + k)]);
                    }
                }
            }
        }
    }

    #[test]
    fn empty_foreground_falls_back() {
        let recs = vec![sparse("a", [8, 8, 8], &[])];
        let sampler = PatchSampler::new(&recs, spec()).unwrap();
        let batch = sampler.sample_batch(2, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert!(batch.iter().all(|p| !p.forced));
    }

    #[test]
    fn small_volume_is_rejected() {
        let recs = vec![sparse("a", [3, 8, 8], &[])];
        assert!(matches!(PatchSampler::new(&recs, spec()), Err(Error::Shape(_))));
    }

    #[test]
    fn flips() {
        let recs = vec![sparse("a", [4, 5, 3], &[[0, 1, 2], [3, 0, 0]])];
        let sampler = PatchSampler::new(&recs, spec()).unwrap();
        let orig = sampler.sample_batch(1, &mut ChaCha8Rng::seed_from_u64(4)).unwrap().remove(0);
        for m in 0..8 {
            let mask = [m & 1 != 0, m & 2 != 0, m & 4 != 0];
            let mut p = orig.clone();
            flip_patch(&mut p, mask);
            assert_eq!(p.foreground_count(), orig.foreground_count());
            // image holds the flat index, so each voxel's origin is recoverable
            for (x, (&v, &l)) in p.image.iter().zip(&p.label).enumerate() {
                assert_eq!(orig.label[v as usize], l, "mask {mask:?} voxel {x}");
            }
            flip_patch(&mut p, mask);
            assert_eq!(p, orig);
        }
        let masks = |seed| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let mut p = orig.clone();
            (0..16).map(|_| random_flip(&mut p, &mut r)).collect::<Vec<_>>()
        };
        assert_eq!(masks(5), masks(5));
    }

    impl Patch {
        fn foreground_count(&self) -> usize {
            self.label.iter().filter(|&&l| l > 0).count()
        }
    }
}
