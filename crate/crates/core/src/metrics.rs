//! Evaluation metrics on hard label volumes: Dice, HD95, size-stratified means.

use serde::{Deserialize, Serialize};

use crate::error::{ensure_shape, Result};

pub fn dice_score(pred: &[u8], gt: &[u8], class: u8) -> Result<f64> {
    ensure_shape!(pred.len() == gt.len(), "dice_score: {} vs {} voxels", pred.len(), gt.len());
    let (mut a, mut b, mut both) = (0usize, 0usize, 0usize);
    for (&p, &g) in pred.iter().zip(gt) {
        let (ip, ig) = (p == class, g == class);
        a += ip as usize;
        b += ig as usize;
        both += (ip && ig) as usize;
    }
    Ok(match (a, b) {
        (0, 0) => 1.0,
        (0, _) | (_, 0) => 0.0,
        _ => 2.0 * both as f64 / (a + b) as f64,
    })
}

/// Foreground voxels with a background face-neighbour or on the volume border.
pub fn boundary(mask: &[bool], shape: [usize; 3]) -> Vec<bool> {
    let [h, w, d] = shape;
    let idx = |i: usize, j: usize, k: usize| (i * w + j) * d + k;
    let mut out = vec![false; mask.len()];
    for i in 0..h {
        for j in 0..w {
            for k in 0..d {
                let o = idx(i, j, k);
                if !mask[o] {
                    continue;
                }
                let border = i == 0 || j == 0 || k == 0 || i + 1 == h || j + 1 == w || k + 1 == d;
                out[o] = border
                    || !mask[idx(i - 1, j, k)]
                    || !mask[idx(i + 1, j, k)]
                    || !mask[idx(i, j - 1, k)]
                    || !mask[idx(i, j + 1, k)]
                    || !mask[idx(i, j, k - 1)]
                    || !mask[idx(i, j, k + 1)];
            }
        }
    }
    out
}

/// Lower envelope of parabolas `s²(p − q)² + f(q)` along one line.
fn edt_line(f: &[f64], s2: f64, out: &mut [f64], v: &mut Vec<usize>, z: &mut Vec<f64>) {
    v.clear();
    z.clear();
    for q in 0..f.len() {
        if !f[q].is_finite() {
            continue;
        }
        let fq = f[q] + s2 * (q * q) as f64;
        loop {
            match v.last() {
                None => {
                    v.push(q);
                    z.push(f64::NEG_INFINITY);
                    break;
                }
                Some(&p) => {
                    let fp = f[p] + s2 * (p * p) as f64;
                    let x = (fq - fp) / (2.0 * s2 * (q - p) as f64);
                    if x <= *z.last().expect("z tracks v") {
                        v.pop();
                        z.pop();
                    } else {
                        v.push(q);
                        z.push(x);
                        break;
                    }
                }
            }
        }
    }
    if v.is_empty() {
        out.fill(f64::INFINITY);
        return;
    }
    let mut k = 0;
    for (p, o) in out.iter_mut().enumerate() {
        while k + 1 < v.len() && z[k + 1] < p as f64 {
            k += 1;
        }
        let q = v[k];
        let dq = p as f64 - q as f64;
        *o = s2 * dq * dq + f[q];
    }
}

/// Squared Euclidean distance (in spacing units) from every voxel to the
/// nearest `true` site; infinite if there are none.
pub fn squared_distance_transform(sites: &[bool], shape: [usize; 3], spacing: [f64; 3]) -> Vec<f64> {
    let mut g: Vec<f64> = sites.iter().map(|&s| if s { 0.0 } else { f64::INFINITY }).collect();
    let strides = [shape[1] * shape[2], shape[2], 1];
    let (mut line, mut out, mut v, mut z) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for axis in 0..3 {
        let n = shape[axis];
        let s2 = spacing[axis] * spacing[axis];
        line.resize(n, 0.0);
        out.resize(n, 0.0);
        let others: Vec<usize> = (0..3).filter(|&a| a != axis).collect();
        for a in 0..shape[others[0]] {
            for b in 0..shape[others[1]] {
                let base = a * strides[others[0]] + b * strides[others[1]];
                for (t, l) in line.iter_mut().enumerate() {
                    *l = g[base + t * strides[axis]];
                }
                edt_line(&line, s2, &mut out, &mut v, &mut z);
                for (t, o) in out.iter().enumerate() {
                    g[base + t * strides[axis]] = *o;
                }
            }
        }
    }
    g
}

/// Percentile with linear interpolation between order statistics.
pub fn percentile(values: &mut [f64], p: f64) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    let rank = p / 100.0 * (values.len() - 1) as f64;
    let (lo, hi) = (rank.floor() as usize, rank.ceil() as usize);
    values[lo] + (values[hi] - values[lo]) * (rank - lo as f64)
}

/// Symmetric 95th-percentile Hausdorff distance between the boundaries of
/// `class` in both volumes, in spacing units. `None` when either mask is empty.
pub fn hd95(pred: &[u8], gt: &[u8], shape: [usize; 3], class: u8, spacing: [f64; 3]) -> Result<Option<f64>> {
    let n: usize = shape.iter().product();
    ensure_shape!(pred.len() == n && gt.len() == n, "hd95: volumes do not match shape {shape:?}");
    let a: Vec<bool> = pred.iter().map(|&v| v == class).collect();
    let b: Vec<bool> = gt.iter().map(|&v| v == class).collect();
    if !a.contains(&true) || !b.contains(&true) {
        return Ok(None);
    }
    let (ba, bb) = (boundary(&a, shape), boundary(&b, shape));
    let directed = |from: &[bool], to: &[bool]| {
        let dt = squared_distance_transform(to, shape, spacing);
        let mut d: Vec<f64> = from.iter().zip(&dt).filter(|(f, _)| **f).map(|(_, t)| t.sqrt()).collect();
        percentile(&mut d, 95.0)
    };
    Ok(Some(directed(&ba, &bb).max(directed(&bb, &ba))))
}

/// Size bins over the target fraction, `[e_i, e_{i+1})` with the last bin closed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SizeBins {
    pub edges: Vec<f64>,
}

impl Default for SizeBins {
    fn default() -> Self {
        Self { edges: vec![0.0, 0.001, 0.003, 0.006, 1.0] }
    }
}

fn pct(v: f64) -> String {
    let s = format!("{:.2}", v * 100.0);
    s.trim_end_matches('0').trim_end_matches('.').to_string()
}

impl SizeBins {
    pub fn len(&self) -> usize {
        self.edges.len().saturating_sub(1)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn assign(&self, fraction: f64) -> Option<usize> {
        let last = self.len().checked_sub(1)?;
        (0..self.len()).find(|&i| {
            let (lo, hi) = (self.edges[i], self.edges[i + 1]);
            fraction >= lo && (fraction < hi || (i == last && fraction <= hi))
        })
    }

    pub fn label(&self, i: usize) -> String {
        if i + 2 == self.edges.len() && self.edges[i + 1] >= 1.0 {
            format!(">{}%", pct(self.edges[i]))
        } else {
            format!("{}-{}%", pct(self.edges[i]), pct(self.edges[i + 1]))
        }
    }
}

/// One (case, class) evaluation row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseMetrics {
    pub case_id: String,
    pub class: u8,
    pub dsc: f64,
    /// `None` when either mask is empty.
    pub hd95: Option<f64>,
    pub target_fraction: f64,
    pub size_bin: String,
}

/// Scores every class in `classes` for one case.
pub fn evaluate_case(
    case_id: &str,
    pred: &[u8],
    gt: &[u8],
    shape: [usize; 3],
    spacing: [f64; 3],
    classes: &[u8],
    bins: &SizeBins,
) -> Result<Vec<CaseMetrics>> {
    classes
        .iter()
        .map(|&class| {
            let fraction = gt.iter().filter(|&&v| v == class).count() as f64 / gt.len().max(1) as f64;
            Ok(CaseMetrics {
                case_id: case_id.to_string(),
                class,
                dsc: dice_score(pred, gt, class)?,
                hd95: hd95(pred, gt, shape, class, spacing)?,
                target_fraction: fraction,
                size_bin: bins.assign(fraction).map(|i| bins.label(i)).unwrap_or_default(),
            })
        })
        .collect()
}

/// Mean scores of one (class, size bin) cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinSummary {
    pub class: u8,
    pub size_bin: String,
    pub cases: usize,
    pub mean_dsc: f64,
    /// Mean over cases with a defined HD95.
    pub mean_hd95: Option<f64>,
}

/// Per-class, per-bin means; empty cells are omitted.
pub fn size_report(rows: &[CaseMetrics], bins: &SizeBins) -> Vec<BinSummary> {
    let mut classes: Vec<u8> = rows.iter().map(|r| r.class).collect();
    classes.sort_unstable();
    classes.dedup();
    let mut out = Vec::new();
    for class in classes {
        for i in 0..bins.len() {
            let cell: Vec<&CaseMetrics> = rows
                .iter()
                .filter(|r| r.class == class && bins.assign(r.target_fraction) == Some(i))
                .collect();
            if cell.is_empty() {
                continue;
            }
            let hd: Vec<f64> = cell.iter().filter_map(|r| r.hd95).collect();
            out.push(BinSummary {
                class,
                size_bin: bins.label(i),
                cases: cell.len(),
                mean_dsc: cell.iter().map(|r| r.dsc).sum::<f64>() / cell.len() as f64,
                mean_hd95: (!hd.is_empty()).then(|| hd.iter().sum::<f64>() / hd.len() as f64),
            });
        }
    }
    out
}
