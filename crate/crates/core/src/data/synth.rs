//! Synthetic phantoms: one ellipsoidal organ holding small spherical tumours.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::VolumeRecord;
use crate::error::{Error, Result};

pub const BACKGROUND: u8 = 0;
pub const ORGAN: u8 = 1;
pub const TUMOUR: u8 = 2;

const PLACEMENT_TRIES: usize = 200;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassIntensity {
    pub mean: f64,
    pub sigma: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub volume_shape: [usize; 3],
    pub spacing: [f64; 3],
    pub num_classes: usize,
    /// Per-axis organ semi-axis range in voxels.
    pub organ_radius: [f64; 2],
    /// Inclusive tumour count range.
    pub tumour_count: [usize; 2],
    pub tumour_radius: [f64; 2],
    /// Upper bound on the tumour voxel fraction of the volume.
    pub max_tumour_fraction: f64,
    /// Background, organ, tumour.
    pub intensity: [ClassIntensity; 3],
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            volume_shape: [48, 48, 48],
            spacing: [1.0, 1.0, 1.0],
            num_classes: 3,
            organ_radius: [11.0, 16.0],
            tumour_count: [1, 2],
            tumour_radius: [3.0, 4.5],
            max_tumour_fraction: 0.006,
            intensity: [
                ClassIntensity { mean: 0.0, sigma: 0.1 },
                ClassIntensity { mean: 1.0, sigma: 0.1 },
                ClassIntensity { mean: 2.0, sigma: 0.1 },
            ],
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Generation(m));
        if self.num_classes != 3 {
            return bad(format!("phantoms have 3 classes, spec asks for {}", self.num_classes));
        }
        if self.organ_radius[0] <= 0.0 || self.organ_radius[0] > self.organ_radius[1] {
            return bad(format!("organ radius range {:?} is empty", self.organ_radius));
        }
        if self.tumour_radius[0] <= 0.0 || self.tumour_radius[0] > self.tumour_radius[1] {
            return bad(format!("tumour radius range {:?} is empty", self.tumour_radius));
        }
        if self.tumour_count[0] > self.tumour_count[1] {
            return bad(format!("tumour count range {:?} is empty", self.tumour_count));
        }
        if let Some(i) = (0..3).find(|&i| 2.0 * self.organ_radius[0] + 2.0 > self.volume_shape[i] as f64) {
            return bad(format!(
                "organ of radius {} cannot fit along axis {i} of {:?}",
                self.organ_radius[0], self.volume_shape
            ));
        }
        if self.intensity.iter().any(|c| c.sigma < 0.0) {
            return bad("intensity sigma must be non-negative".into());
        }
        Ok(())
    }
}

fn inside_ellipsoid(p: [usize; 3], c: [f64; 3], r: [f64; 3]) -> bool {
    (0..3).map(|a| ((p[a] as f64 - c[a]) / r[a]).powi(2)).sum::<f64>() <= 1.0
}

/// Voxels of the ball `|p − c| ≤ r`, clipped to the volume.
fn ball(shape: [usize; 3], c: [f64; 3], r: f64) -> Vec<[usize; 3]> {
    let range = |a: usize| {
        let lo = (c[a] - r).floor().max(0.0) as usize;
        let hi = ((c[a] + r).ceil() as usize).min(shape[a] - 1);
        lo..=hi
    };
    let mut out = Vec::new();
    for i in range(0) {
        for j in range(1) {
            for k in range(2) {
                let d2 = (i as f64 - c[0]).powi(2) + (j as f64 - c[1]).powi(2) + (k as f64 - c[2]).powi(2);
                if d2 <= r * r {
                    out.push([i, j, k]);
                }
            }
        }
    }
    out
}

/// Generates one phantom. Deterministic in `(spec, seed)`.
pub fn synthesize_case(spec: &SyntheticSpec, seed: u64, case_id: &str) -> Result<VolumeRecord> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = spec.volume_shape;
    let n: usize = shape.iter().product();
    let idx = |p: [usize; 3]| (p[0] * shape[1] + p[1]) * shape[2] + p[2];

    let radii: [f64; 3] = std::array::from_fn(|a| {
        let hi = spec.organ_radius[1].min((shape[a] as f64 - 2.0) / 2.0);
        rng.gen_range(spec.organ_radius[0]..=hi.max(spec.organ_radius[0]))
    });
    let centre: [f64; 3] = std::array::from_fn(|a| {
        let lo = radii[a] + 1.0;
        let hi = shape[a] as f64 - 2.0 - radii[a];
        if hi > lo {
            rng.gen_range(lo..hi)
        } else {
            (shape[a] as f64 - 1.0) / 2.0
        }
    });
    let mut label = vec![BACKGROUND; n];
    for i in 0..shape[0] {
        for j in 0..shape[1] {
            for k in 0..shape[2] {
                if inside_ellipsoid([i, j, k], centre, radii) {
                    label[idx([i, j, k])] = ORGAN;
                }
            }
        }
    }

    let budget = (spec.max_tumour_fraction * n as f64).floor() as usize;
    let count = rng.gen_range(spec.tumour_count[0]..=spec.tumour_count[1]);
    let mut tumour_voxels = 0;
    for t in 0..count {
        let mut placed = false;
        for _ in 0..PLACEMENT_TRIES {
            let r = rng.gen_range(spec.tumour_radius[0]..=spec.tumour_radius[1]);
            let c: [f64; 3] = std::array::from_fn(|a| centre[a] + rng.gen_range(-1.0..1.0) * (radii[a] - r).max(0.0));
            let voxels = ball(shape, c, r);
            if voxels.is_empty() || tumour_voxels + voxels.len() > budget {
                continue;
            }
            // every tumour voxel and its face neighbours must be untouched organ
            let interior = voxels.iter().all(|&p| {
                let neighbours = [[0isize, 0, 0], [1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]];
                neighbours.iter().all(|d| {
                    let q: Option<[usize; 3]> = (0..3)
                        .map(|a| {
                            let v = p[a] as isize + d[a];
                            (v >= 0 && (v as usize) < shape[a]).then_some(v as usize)
                        })
                        .collect::<Option<Vec<_>>>()
                        .map(|v| [v[0], v[1], v[2]]);
                    q.is_some_and(|q| label[idx(q)] == ORGAN)
                })
            });
            if !interior {
                continue;
            }
            for &p in &voxels {
                label[idx(p)] = TUMOUR;
            }
            tumour_voxels += voxels.len();
            placed = true;
            break;
        }
        if !placed && t < spec.tumour_count[0] {
            return Err(Error::Generation(format!(
                "{case_id}: could not place tumour {} of {} inside the organ within {PLACEMENT_TRIES} tries",
                t + 1,
                spec.tumour_count[0]
            )));
        }
    }

    let noise: Vec<Normal<f64>> = spec
        .intensity
        .iter()
        .map(|c| Normal::new(c.mean, c.sigma).map_err(|e| Error::Generation(e.to_string())))
        .collect::<Result<_>>()?;
    let image = label.iter().map(|&l| noise[l as usize].sample(&mut rng) as f32).collect();
    Ok(VolumeRecord {
        case_id: case_id.to_string(),
        shape,
        spacing: spec.spacing,
        image,
        label,
        tumour_fraction: Some(tumour_voxels as f64 / n as f64),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_in_seed() {
        let spec = SyntheticSpec::default();
        let a = synthesize_case(&spec, 7, "a").unwrap();
        let b = synthesize_case(&spec, 7, "a").unwrap();
        assert_eq!(a, b);
        let c = synthesize_case(&spec, 8, "a").unwrap();
        assert_ne!(a.label, c.label);
    }

    #[test]
    fn labels_and_containment() {
        let spec = SyntheticSpec::default();
        for seed in 0..20 {
            let rec = synthesize_case(&spec, seed, "c").unwrap();
            let frac = rec.tumour_fraction.unwrap();
            assert!(frac > 0.0 && frac <= 0.006, "seed {seed}: {frac}");
            let mut seen = [false; 3];
            for &l in &rec.label {
                seen[l as usize] = true;
            }
            assert_eq!(seen, [true; 3]);
            let [h, w, d] = rec.shape;
            for i in 0..h {
                for j in 0..w {
                    for k in 0..d {
                        if rec.label[rec.index(i, j, k)] != TUMOUR {
                            continue;
                        }
                        assert!(i > 0 && j > 0 && k > 0 && i + 1 < h && j + 1 < w && k + 1 < d);
                        for (a, b, c) in [(i - 1, j, k), (i + 1, j, k), (i, j - 1, k), (i, j + 1, k), (i, j, k - 1), (i, j, k + 1)] {
                            assert_ne!(rec.label[rec.index(a, b, c)], BACKGROUND);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn sphere_volume_matches_formula() {
        for r in [3.0, 4.0, 5.0] {
            let spec = SyntheticSpec {
                volume_shape: [40, 40, 40],
                organ_radius: [14.0, 15.0],
                tumour_count: [1, 1],
                tumour_radius: [r, r],
                max_tumour_fraction: 1.0,
                ..SyntheticSpec::default()
            };
            let rec = synthesize_case(&spec, 3, "s").unwrap();
            let got = rec.label.iter().filter(|&&l| l == TUMOUR).count() as f64;
            let want = 4.0 / 3.0 * std::f64::consts::PI * r * r * r;
            assert!((got - want).abs() / want < 0.15, "r {r}: {got} vs {want}");
        }
    }

    #[test]
    fn unsatisfiable_specs_fail() {
        let tiny = SyntheticSpec { volume_shape: [10, 10, 10], ..SyntheticSpec::default() };
        assert!(matches!(synthesize_case(&tiny, 0, "x"), Err(Error::Generation(_))));
        let starved = SyntheticSpec { max_tumour_fraction: 1e-6, tumour_count: [1, 1], ..SyntheticSpec::default() };
        assert!(matches!(synthesize_case(&starved, 0, "x"), Err(Error::Generation(_))));
    }
}
