//! Synthetic phantom datasets: nested-ellipsoid tumors with per-modality
//! intensity contrast, sized so grade is recoverable from geometry.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::volume::{write_labels, write_volume, CaseManifest, Grade, LabelVolume};

/// Smallest usable extent per axis. Below this the nested ellipsoids
/// collapse to fewer than three distinct label shells.
pub const MIN_DIM: usize = 16;

/// A case whose enhancing tumor fills at least this fraction of the whole
/// tumor is labeled high grade.
pub const ET_GRADE_FRACTION: f64 = 0.1;

/// Mean tissue intensity per modality, rows in the fixed channel order
/// T1, T1Gd, T2, FLAIR; columns background, brain, edema, core, enhancing.
/// Contrast follows the usual reading: enhancing tumor lights up under
/// gadolinium, edema is bright on T2 and FLAIR.
const PROFILE: [[f32; 5]; 4] = [
    [0.05, 0.55, 0.40, 0.30, 0.45],
    [0.05, 0.50, 0.40, 0.25, 0.95],
    [0.05, 0.40, 0.85, 0.65, 0.55],
    [0.05, 0.35, 0.90, 0.60, 0.50],
];

const NOISE_SIGMA: f32 = 0.04;

/// Dataset recipe. `hgg_fraction` sets the target class balance; the grade
/// written to each manifest is still derived from the realized geometry.
#[derive(Debug, Clone, Copy)]
pub struct SynthSpec {
    pub cases: usize,
    pub dims: [usize; 3],
    pub seed: u64,
    pub hgg_fraction: f64,
}

impl Default for SynthSpec {
    fn default() -> SynthSpec {
        SynthSpec { cases: 10, dims: [32, 32, 32], seed: 0, hgg_fraction: 0.7 }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.cases == 0 {
            return Err(Error::config("synth: case count must be positive"));
        }
        if let Some(d) = self.dims.iter().find(|&&d| d < MIN_DIM) {
            return Err(Error::config(format!(
                "synth: extent {d} is below the minimum of {MIN_DIM} per axis"
            )));
        }
        if !(0.0..=1.0).contains(&self.hgg_fraction) || !self.hgg_fraction.is_finite() {
            return Err(Error::config(format!(
                "synth: hgg fraction {} is outside [0, 1]",
                self.hgg_fraction
            )));
        }
        Ok(())
    }

    /// Whether case `index` should aim for a high grade tumor. Spreads the
    /// two classes evenly through the index order via a cumulative quota,
    /// so any contiguous split of the dataset keeps both classes.
    pub fn wants_hgg(&self, index: usize) -> bool {
        let quota = |upto: usize| (upto as f64 * self.hgg_fraction).floor() as usize;
        quota(index + 1) > quota(index)
    }
}

/// One generated case held in memory.
#[derive(Debug, Clone)]
pub struct SynthCase {
    /// Shape [4, D, H, W], channel order T1, T1Gd, T2, FLAIR.
    pub image: Tensor,
    pub labels: LabelVolume,
    pub grade: Grade,
}

struct Ellipsoid {
    center: [f64; 3],
    semi: [f64; 3],
}

impl Ellipsoid {
    fn contains(&self, p: [usize; 3]) -> bool {
        let mut q = 0.0;
        for a in 0..3 {
            let d = (p[a] as f64 - self.center[a]) / self.semi[a];
            q += d * d;
        }
        q <= 1.0
    }

    fn scaled(&self, factor: f64) -> Ellipsoid {
        Ellipsoid { center: self.center, semi: self.semi.map(|s| s * factor) }
    }
}

/// Generates one phantom. The three tumor shells share a center with
/// strictly shrinking semi-axes, so the label regions nest by
/// construction; `hgg` only steers how much of the tumor enhances, and
/// the returned grade is read back off the realized voxel counts.
pub fn synth_case(dims: [usize; 3], hgg: bool, rng: &mut ChaCha8Rng) -> Result<SynthCase> {
    if let Some(d) = dims.iter().find(|&&d| d < MIN_DIM) {
        return Err(Error::config(format!(
            "synth: extent {d} is below the minimum of {MIN_DIM} per axis"
        )));
    }

    let center: [f64; 3] = std::array::from_fn(|a| {
        let mid = dims[a] as f64 / 2.0;
        mid + rng.gen_range(-0.06..0.06) * dims[a] as f64
    });
    let wt = Ellipsoid {
        center,
        semi: std::array::from_fn(|a| dims[a] as f64 * rng.gen_range(0.20..0.30)),
    };
    let tc = wt.scaled(rng.gen_range(0.72..0.85));
    let et_ratio = if hgg { rng.gen_range(0.50..0.68) } else { rng.gen_range(0.18..0.30) };
    let et = wt.scaled(et_ratio);
    let brain = Ellipsoid {
        center: dims.map(|d| d as f64 / 2.0),
        semi: dims.map(|d| d as f64 * 0.44),
    };

    let n = dims[0] * dims[1] * dims[2];
    let mut labels = vec![0u8; n];
    let mut tissue = vec![0u8; n];
    let mut wt_count = 0u64;
    let mut et_count = 0u64;
    let mut idx = 0;
    for d in 0..dims[0] {
        for h in 0..dims[1] {
            for w in 0..dims[2] {
                let p = [d, h, w];
                let (label, class) = if et.contains(p) {
                    (4, 4)
                } else if tc.contains(p) {
                    (1, 3)
                } else if wt.contains(p) {
                    (2, 2)
                } else if brain.contains(p) {
                    (0, 1)
                } else {
                    (0, 0)
                };
                labels[idx] = label;
                tissue[idx] = class;
                if label != 0 {
                    wt_count += 1;
                }
                if label == 4 {
                    et_count += 1;
                }
                idx += 1;
            }
        }
    }

    let fraction = et_count as f64 / wt_count.max(1) as f64;
    let grade = if fraction >= ET_GRADE_FRACTION { Grade::Hgg } else { Grade::Lgg };

    let mut image = vec![0f32; 4 * n];
    for (m, row) in PROFILE.iter().enumerate() {
        let gain: f32 = rng.gen_range(0.9..1.1);
        let base = m * n;
        for (i, &class) in tissue.iter().enumerate() {
            let noise = NOISE_SIGMA * rng.gen_range(-1.0f32..1.0);
            image[base + i] = row[class as usize] * gain + noise;
        }
    }

    Ok(SynthCase {
        image: Tensor::new(&[4, dims[0], dims[1], dims[2]], image)?,
        labels: LabelVolume::new(dims, labels, [1.0; 3])?,
        grade,
    })
}

/// Generates the whole dataset in memory, in index order from one seeded
/// stream. Reruns with the same spec are bit identical.
pub fn synth_cases(spec: &SynthSpec) -> Result<Vec<SynthCase>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    (0..spec.cases).map(|i| synth_case(spec.dims, spec.wants_hgg(i), &mut rng)).collect()
}

fn modality_volume(case: &SynthCase, m: usize) -> Tensor {
    let dims = case.labels.dims;
    let n: usize = dims.iter().product();
    let data = case.image.data()[m * n..(m + 1) * n].to_vec();
    Tensor::new(&[dims[0], dims[1], dims[2]], data).expect("channel slice")
}

/// Writes `case_000/`, `case_001/`, ... under `dir`, each holding the four
/// modality volumes, the label volume, and a manifest with the derived
/// grade. Returns the manifests in case order.
pub fn synth_dataset(dir: &Path, spec: &SynthSpec) -> Result<Vec<CaseManifest>> {
    let cases = synth_cases(spec)?;
    let mut manifests = Vec::with_capacity(cases.len());
    for (i, case) in cases.iter().enumerate() {
        let id = format!("case_{i:03}");
        let case_dir = dir.join(&id);
        std::fs::create_dir_all(&case_dir)
            .map_err(|e| Error::io(format!("{}: {e}", case_dir.display())))?;
        let names = ["t1.acsv", "t1gd.acsv", "t2.acsv", "flair.acsv"];
        for (m, name) in names.iter().enumerate() {
            write_volume(&case_dir.join(name), &modality_volume(case, m), &[1.0; 3])?;
        }
        write_labels(&case_dir.join("seg.acsv"), &case.labels)?;
        let manifest = CaseManifest {
            id,
            t1: names[0].into(),
            t1gd: names[1].into(),
            t2: names[2].into(),
            flair: names[3].into(),
            labels: Some("seg.acsv".into()),
            grade: Some(case.grade),
        };
        manifest.save(&case_dir.join("manifest.toml"))?;
        manifests.push(manifest);
    }
    Ok(manifests)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::evaluate_case;
    use crate::volume::scan_dataset;
    use rand::SeedableRng;

    #[test]
    fn spec_rejects_small_axes_and_bad_balance() {
        let ok = SynthSpec::default();
        assert!(ok.validate().is_ok());
        assert!(SynthSpec { dims: [15, 16, 16], ..ok }.validate().is_err());
        assert!(SynthSpec { dims: [32, 32, 8], ..ok }.validate().is_err());
        assert!(SynthSpec { cases: 0, ..ok }.validate().is_err());
        assert!(SynthSpec { hgg_fraction: 1.5, ..ok }.validate().is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(synth_case([16, 16, 15], true, &mut rng).is_err());
    }

    #[test]
    fn class_quota_spreads_grades_through_the_order() {
        let spec = SynthSpec { cases: 8, hgg_fraction: 0.75, ..SynthSpec::default() };
        let flags: Vec<bool> = (0..8).map(|i| spec.wants_hgg(i)).collect();
        assert_eq!(flags.iter().filter(|&&f| f).count(), 6);
        assert_eq!(flags[..4].iter().filter(|&&f| f).count(), 3);
    }

    #[test]
    fn cases_nest_and_grade_follows_enhancing_fraction() {
        let spec = SynthSpec { cases: 10, seed: 3, ..SynthSpec::default() };
        let cases = synth_cases(&spec).unwrap();
        assert_eq!(cases.len(), 10);
        let mut hgg = 0;
        for (i, case) in cases.iter().enumerate() {
            let counts = case.labels.label_counts();
            assert!(counts.iter().all(|&c| c < case.labels.numel()));
            let wt = counts[1] + counts[2] + counts[4];
            assert!(counts[2] > 0 && counts[1] > 0, "case {i}: missing shell");
            assert!(wt > 0);
            let fraction = counts[4] as f64 / wt as f64;
            let expect = if fraction >= ET_GRADE_FRACTION { Grade::Hgg } else { Grade::Lgg };
            assert_eq!(case.grade, expect, "case {i}");
            assert_eq!(case.grade == Grade::Hgg, spec.wants_hgg(i), "case {i} missed its class");
            if case.grade == Grade::Hgg {
                hgg += 1;
            }
        }
        assert_eq!(hgg, 7);
    }

    #[test]
    fn modality_contrast_is_learnable() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let case = synth_case([32, 32, 32], true, &mut rng).unwrap();
        let dims = case.labels.dims;
        let n: usize = dims.iter().product();
        let mean_in = |m: usize, label: u8| {
            let mut sum = 0.0f64;
            let mut count = 0usize;
            for (i, &l) in case.labels.voxels.iter().enumerate() {
                if l == label {
                    sum += f64::from(case.image.data()[m * n + i]);
                    count += 1;
                }
            }
            sum / count as f64
        };
        assert!(mean_in(1, 4) > mean_in(1, 1) + 0.3, "enhancing core hidden on T1Gd");
        assert!(mean_in(3, 2) > mean_in(3, 0) + 0.2, "edema hidden on FLAIR");
    }

    #[test]
    fn generation_is_bit_identical_per_seed() {
        let spec = SynthSpec { cases: 3, dims: [16, 16, 16], seed: 9, ..SynthSpec::default() };
        let a = synth_cases(&spec).unwrap();
        let b = synth_cases(&spec).unwrap();
        for (x, y) in a.iter().zip(&b) {
            let xb: Vec<u32> = x.image.data().iter().map(|v| v.to_bits()).collect();
            let yb: Vec<u32> = y.image.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(xb, yb);
            assert_eq!(x.labels.voxels, y.labels.voxels);
            assert_eq!(x.grade, y.grade);
        }
    }

    #[test]
    fn dataset_round_trips_and_self_evaluates_perfectly() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SynthSpec { cases: 2, dims: [16, 20, 18], seed: 5, ..SynthSpec::default() };
        let manifests = synth_dataset(dir.path(), &spec).unwrap();
        assert_eq!(manifests.len(), 2);

        let scanned = scan_dataset(dir.path()).unwrap();
        assert_eq!(scanned.len(), 2);
        for (case_dir, manifest) in &scanned {
            let loaded = manifest.load_case(case_dir).unwrap();
            assert_eq!(loaded.input.shape(), &[4, 16, 20, 18]);
            assert!(loaded.grade.is_some());
            let labels = loaded.labels.unwrap();
            let report = evaluate_case(&labels, &labels).unwrap();
            for (_, scores) in report.named() {
                assert_eq!(scores.dice, 1.0);
                assert_eq!(scores.hd95, 0.0);
            }
        }
    }
}
