//! Synthetic volumetric phantoms with a planted aging signal.
//!
//! Each phantom is a G^3 grid holding an ellipsoidal "brain" with three
//! age-coupled structures and age-independent distractors:
//!
//! - region 1, "ventricle": central dark sphere whose radius grows
//!   affinely with effective age;
//! - regions 2-3, "capsules": bright lateral ellipsoid slabs whose
//!   thickness shrinks affinely with effective age;
//! - regions 4..R, fillers: small low-contrast spheres with per-scan
//!   jittered, age-independent sizes at fixed anatomical positions.
//!
//! effective_age = age + group_offset + eps, eps ~ N(0, noise_sigma).
//! Group offsets plant the recoverable brain-age-gap ground truth; the
//! cognitive score decays with the planted gap.
//!
//! All randomness comes from the caller-supplied stream, so a phantom is a
//! pure function of (seed, subject, age, group).

use crate::error::{Error, Result};
use crate::model::Group;
use crate::rng::DeterministicRng;
use crate::tensor::Tensor;

/// Corpus-level geometry and noise parameters.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SynthConfig {
    /// Grid extent G (volume is G^3).
    pub grid: usize,
    /// Region count R (>= 4: ventricle, two capsules, >= 1 filler).
    pub regions: usize,
    /// View chunk shape; filler regions are laid out clear of the three
    /// centered crop windows, like peripheral structures that center crops
    /// never see.
    pub chunk: (usize, usize, usize),
    /// Std-dev of the effective-age noise eps, in years.
    pub noise_sigma: f64,
    /// Voxel edge length in mm.
    pub voxel_mm: f64,
    /// Valid chronological age range.
    pub age_range: (f64, f64),
}

impl SynthConfig {
    pub fn desk() -> Self {
        Self {
            grid: 64,
            regions: 24,
            chunk: (32, 32, 8),
            noise_sigma: 2.0,
            voxel_mm: 2.0,
            age_range: (42.0, 95.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid < 16 {
            return Err(Error::Config(format!("grid {} too small (< 16)", self.grid)));
        }
        if self.regions < 4 {
            return Err(Error::Config(format!(
                "regions {} too few: need ventricle, two capsules and at least one filler",
                self.regions
            )));
        }
        if self.chunk.0 > self.grid || self.chunk.1 > self.grid || self.chunk.2 > self.grid {
            return Err(Error::Config(format!(
                "chunk {:?} does not fit a {}^3 grid",
                self.chunk, self.grid
            )));
        }
        if self.noise_sigma < 0.0 || self.voxel_mm <= 0.0 {
            return Err(Error::Config("noise_sigma/voxel_mm out of range".into()));
        }
        if self.age_range.0 >= self.age_range.1 {
            return Err(Error::Config(format!(
                "empty age range {:?}",
                self.age_range
            )));
        }
        Ok(())
    }
}

/// Mean effective-age shift per group, in years.
pub fn group_offset(group: Group) -> f64 {
    match group {
        Group::Cn => 0.0,
        Group::Mci => 2.55,
        Group::Ad => 6.12,
    }
}

pub const REGION_VENTRICLE: u16 = 1;
pub const REGION_CAPSULE_L: u16 = 2;
pub const REGION_CAPSULE_R: u16 = 3;
/// First filler region id.
pub const REGION_FILLER0: u16 = 4;

// Geometry as fractions of the grid extent G.
const BRAIN_SEMI: [f64; 3] = [0.42, 0.38, 0.35];
const VENTRICLE_R0: f64 = 0.086;
const VENTRICLE_SLOPE: f64 = 0.060;
// Offset keeps the slabs clear of the ventricle at the geometric age cap
// (largest radius meets the thinnest slab) while staying mostly inside
// the centered crop windows.
const CAPSULE_OFFSET: f64 = 0.200;
const CAPSULE_HALF_THICK0: f64 = 0.070;
const CAPSULE_HALF_THICK_SLOPE: f64 = 0.030;
const CAPSULE_SEMI_YZ: f64 = 0.150;
/// Effective age is clamped to this window for geometry only, keeping the
/// structures inside the brain for extreme noise draws.
const GEOM_AGE_LO: f64 = 40.0;
const GEOM_AGE_HI: f64 = 105.0;
const AGE_LO: f64 = 42.0;
const AGE_SPAN: f64 = 53.0;

// The ventricle carries the strongest contrast (bright against tissue) so
// that intensity perturbations of the highest-signal region visibly move
// the prediction; the capsules sit well below tissue. Fillers match plain
// tissue: they exist in the label map and the volume vector, but give the
// image path no scan-specific feature to latch onto.
const TISSUE_INTENSITY: f64 = 0.55;
const VENTRICLE_INTENSITY: f64 = 0.92;
const CAPSULE_INTENSITY: f64 = 0.22;
const FILLER_SIZE_JITTER: f64 = 0.25;
const FILLER_INTENSITY_DELTA: f64 = 0.0;
const VOXEL_NOISE_STD: f64 = 0.03;

fn age_frac(effective_age: f64) -> f64 {
    (effective_age.clamp(GEOM_AGE_LO, GEOM_AGE_HI) - AGE_LO) / AGE_SPAN
}

/// Ventricle radius in voxels at a given effective age.
pub fn ventricle_radius(grid: usize, effective_age: f64) -> f64 {
    grid as f64 * (VENTRICLE_R0 + VENTRICLE_SLOPE * age_frac(effective_age))
}

/// Capsule half-thickness (x semi-axis) in voxels at a given effective age.
pub fn capsule_half_thickness(grid: usize, effective_age: f64) -> f64 {
    grid as f64 * (CAPSULE_HALF_THICK0 - CAPSULE_HALF_THICK_SLOPE * age_frac(effective_age))
}

/// Fixed positions and base sizes for the filler regions. The layout is a
/// deterministic function of the config (an "atlas"): region r sits at the
/// same place in every phantom.
#[derive(Debug, Clone)]
pub struct RegionLayout {
    pub fillers: Vec<Filler>,
}

#[derive(Debug, Clone)]
pub struct Filler {
    /// Offset from the volume center, in voxels.
    pub center: [f64; 3],
    /// Base radius in voxels, jittered per scan.
    pub base_radius: f64,
    /// Intensity offset against plain tissue.
    pub intensity_delta: f64,
}

impl RegionLayout {
    pub fn build(cfg: &SynthConfig) -> Result<Self> {
        cfg.validate()?;
        let g = cfg.grid as f64;
        let n_fillers = cfg.regions - 3;
        let axes = BRAIN_SEMI.map(|f| f * g);
        let r_vent_max = ventricle_radius(cfg.grid, GEOM_AGE_HI);
        let cap_half_max = capsule_half_thickness(cfg.grid, GEOM_AGE_LO);
        let cap_yz = CAPSULE_SEMI_YZ * g;
        let cap_off = CAPSULE_OFFSET * g;
        let r_max_frac = 0.042;
        let windows = view_windows(cfg.grid, cfg.chunk);
        let center = (g - 1.0) / 2.0;

        // Paddings scale with the grid so small test grids stay feasible.
        let pad = 0.023 * g;
        let pair_pad = 0.016 * g;

        let mut rng = DeterministicRng::new(0xA71A5, cfg.regions as u64);
        let mut fillers: Vec<Filler> = Vec::new();
        let mut attempts = 0usize;
        while fillers.len() < n_fillers {
            attempts += 1;
            if attempts > 200_000 {
                return Err(Error::Config(format!(
                    "cannot place {n_fillers} filler regions on a grid of {} (placed {})",
                    cfg.grid,
                    fillers.len()
                )));
            }
            let u = rng.next_f64();
            let cos_theta = 1.0 - 2.0 * u;
            let sin_theta = (1.0 - cos_theta * cos_theta).sqrt();
            let phi = rng.uniform(0.0, std::f64::consts::TAU);
            let rho = rng.uniform(0.40, 0.95);
            let base_radius = rng.uniform(0.030, r_max_frac) * g;
            let p = [
                rho * axes[0] * sin_theta * phi.cos(),
                rho * axes[1] * sin_theta * phi.sin(),
                rho * axes[2] * cos_theta,
            ];
            let reach = base_radius * (1.0 + FILLER_SIZE_JITTER);
            let margin = reach + pad;

            // Stay inside the brain surface with margin.
            let depth_ok = (0..3)
                .map(|i| (p[i] / (axes[i] - margin)).powi(2))
                .sum::<f64>()
                <= 1.0;
            // Clear of the ventricle at its largest.
            let dist = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
            let vent_ok = dist >= r_vent_max + margin;
            // Clear of both capsule slabs at their thickest.
            let cap_ok = [-cap_off, cap_off].iter().all(|&cx| {
                let e = ((p[0] - cx) / (cap_half_max + margin)).powi(2)
                    + (p[1] / (cap_yz + margin)).powi(2)
                    + (p[2] / (cap_yz + margin)).powi(2);
                e >= 1.0
            });
            // Fully outside all three view-crop windows, like peripheral
            // anatomy that centered chunks never image.
            let abs_p = [center + p[0], center + p[1], center + p[2]];
            let window_ok = windows
                .iter()
                .all(|w| w.distance(&abs_p) > reach + 1.0);
            // Clear of the fillers already placed.
            let pair_ok = fillers.iter().all(|f| {
                let d = ((p[0] - f.center[0]).powi(2)
                    + (p[1] - f.center[1]).powi(2)
                    + (p[2] - f.center[2]).powi(2))
                .sqrt();
                d >= reach + f.base_radius * (1.0 + FILLER_SIZE_JITTER) + pair_pad
            });

            if depth_ok && vent_ok && cap_ok && window_ok && pair_ok {
                let idx = fillers.len() as f64;
                fillers.push(Filler {
                    center: p,
                    base_radius,
                    intensity_delta: FILLER_INTENSITY_DELTA * (idx * 2.399_963).sin(),
                });
            }
        }
        Ok(Self { fillers })
    }
}

/// Axis-aligned boxes of the three centered view crops, in voxel coords.
struct WindowBox {
    lo: [f64; 3],
    hi: [f64; 3],
}

impl WindowBox {
    fn distance(&self, p: &[f64; 3]) -> f64 {
        let mut d2 = 0.0;
        for i in 0..3 {
            let d = (self.lo[i] - p[i]).max(p[i] - self.hi[i]).max(0.0);
            d2 += d * d;
        }
        d2.sqrt()
    }
}

fn view_windows(grid: usize, chunk: (usize, usize, usize)) -> [WindowBox; 3] {
    let (c1, c2, t) = chunk;
    let s1 = ((grid - c1) / 2) as f64;
    let s2 = ((grid - c2) / 2) as f64;
    let sv = ((grid - t) / 2) as f64;
    let e = |start: f64, extent: usize| start + extent as f64 - 1.0;
    [
        WindowBox {
            lo: [sv, s1, s2],
            hi: [e(sv, t), e(s1, c1), e(s2, c2)],
        },
        WindowBox {
            lo: [s1, sv, s2],
            hi: [e(s1, c1), e(sv, t), e(s2, c2)],
        },
        WindowBox {
            lo: [s1, s2, sv],
            hi: [e(s1, c1), e(s2, c2), e(sv, t)],
        },
    ]
}

/// One generated subject-scan.
#[derive(Debug, Clone)]
pub struct Phantom {
    /// Raw intensities, `[G, G, G]`.
    pub volume: Tensor,
    /// Region ids per voxel; 0 = background/plain tissue.
    pub label_map: Vec<u16>,
    /// Exact voxel count of each region times voxel volume, mm^3.
    pub region_volumes: Vec<f64>,
    pub age: f64,
    pub effective_age: f64,
    pub group: Group,
    pub cog_score: f64,
    pub subject_id: String,
}

struct Draws {
    effective_age: f64,
    cog_score: f64,
    filler_jitter: Vec<f64>,
    noise: bool,
}

/// Deterministic phantom for (rng stream, subject, age, group).
pub fn generate_phantom(
    cfg: &SynthConfig,
    layout: &RegionLayout,
    rng: &mut DeterministicRng,
    subject_id: &str,
    age: f64,
    group: Group,
) -> Result<Phantom> {
    if age < cfg.age_range.0 || age > cfg.age_range.1 {
        return Err(Error::Data(format!(
            "age {age} outside configured range {:?}",
            cfg.age_range
        )));
    }
    let eps = rng.normal_scaled(0.0, cfg.noise_sigma);
    let effective_age = age + group_offset(group) + eps;
    let eta = rng.normal();
    let cog_score = (30.0 - 0.4 * (effective_age - age) - eta).clamp(0.0, 30.0);
    let jitter = (0..layout.fillers.len())
        .map(|_| rng.uniform(-1.0, 1.0))
        .collect();
    rasterize(
        cfg,
        layout,
        Draws {
            effective_age,
            cog_score,
            filler_jitter: jitter,
            noise: true,
        },
        rng,
        subject_id,
        age,
        group,
    )
}

/// Noise-free phantom at a given age: eps = 0, neutral filler jitter, no
/// voxel noise. Serves as the shared reference frame ("atlas" stand-in)
/// for attribution and as a clean probe in tests.
pub fn generate_reference(cfg: &SynthConfig, layout: &RegionLayout, age: f64) -> Result<Phantom> {
    let mut unused = DeterministicRng::new(0, 0);
    rasterize(
        cfg,
        layout,
        Draws {
            effective_age: age,
            cog_score: 30.0,
            filler_jitter: vec![0.0; layout.fillers.len()],
            noise: false,
        },
        &mut unused,
        "reference",
        age,
        Group::Cn,
    )
}

fn rasterize(
    cfg: &SynthConfig,
    layout: &RegionLayout,
    draws: Draws,
    rng: &mut DeterministicRng,
    subject_id: &str,
    age: f64,
    group: Group,
) -> Result<Phantom> {
    let g = cfg.grid;
    let n = g * g * g;
    let gf = g as f64;
    let center = (gf - 1.0) / 2.0;
    let axes = BRAIN_SEMI.map(|f| f * gf);

    // Brain mask.
    let mut brain = vec![false; n];
    for x in 0..g {
        let dx = (x as f64 - center) / axes[0];
        for y in 0..g {
            let dy = (y as f64 - center) / axes[1];
            let plane = dx * dx + dy * dy;
            if plane > 1.0 {
                continue;
            }
            for z in 0..g {
                let dz = (z as f64 - center) / axes[2];
                if plane + dz * dz <= 1.0 {
                    brain[(x * g + y) * g + z] = true;
                }
            }
        }
    }

    let mut labels = vec![0u16; n];
    let e = draws.effective_age;

    // Ventricle: central sphere, radius growing with effective age.
    let r_vent = ventricle_radius(g, e);
    stamp_ellipsoid(
        &mut labels,
        &brain,
        g,
        [center, center, center],
        [r_vent, r_vent, r_vent],
        REGION_VENTRICLE,
    );

    // Capsules: lateral slabs, thickness shrinking with effective age.
    let half_t = capsule_half_thickness(g, e);
    let cap_yz = CAPSULE_SEMI_YZ * gf;
    let cap_off = CAPSULE_OFFSET * gf;
    for (region, sign) in [(REGION_CAPSULE_L, -1.0), (REGION_CAPSULE_R, 1.0)] {
        stamp_ellipsoid(
            &mut labels,
            &brain,
            g,
            [center + sign * cap_off, center, center],
            [half_t, cap_yz, cap_yz],
            region,
        );
    }

    // Fillers: age-independent jittered sizes at fixed positions.
    for (i, filler) in layout.fillers.iter().enumerate() {
        let r = filler.base_radius * (1.0 + FILLER_SIZE_JITTER * draws.filler_jitter[i]);
        stamp_ellipsoid(
            &mut labels,
            &brain,
            g,
            [
                center + filler.center[0],
                center + filler.center[1],
                center + filler.center[2],
            ],
            [r, r, r],
            REGION_FILLER0 + i as u16,
        );
    }

    // Intensities: per-region base + a gentle tissue ramp + voxel noise.
    let mut volume = vec![0.0f64; n];
    for x in 0..g {
        for y in 0..g {
            for z in 0..g {
                let idx = (x * g + y) * g + z;
                if !brain[idx] {
                    continue;
                }
                let base = match labels[idx] {
                    0 => {
                        let ramp = (x + y + z) as f64 / (3.0 * (gf - 1.0)) - 0.5;
                        TISSUE_INTENSITY + 0.05 * ramp
                    }
                    REGION_VENTRICLE => VENTRICLE_INTENSITY,
                    REGION_CAPSULE_L | REGION_CAPSULE_R => CAPSULE_INTENSITY,
                    r => TISSUE_INTENSITY + layout.fillers[(r - REGION_FILLER0) as usize].intensity_delta,
                };
                let noise = if draws.noise {
                    rng.normal_scaled(0.0, VOXEL_NOISE_STD)
                } else {
                    0.0
                };
                volume[idx] = base + noise;
            }
        }
    }

    let region_volumes = region_volumes(&labels, cfg.regions, cfg.voxel_mm)?;
    Ok(Phantom {
        volume: Tensor::new(vec![g, g, g], volume).expect("sized above"),
        label_map: labels,
        region_volumes,
        age,
        effective_age: e,
        group,
        cog_score: draws.cog_score,
        subject_id: subject_id.to_string(),
    })
}

/// First writer wins; voxels outside the brain mask are never labeled.
fn stamp_ellipsoid(
    labels: &mut [u16],
    brain: &[bool],
    g: usize,
    center: [f64; 3],
    semi: [f64; 3],
    region: u16,
) {
    let lo = |c: f64, a: f64| ((c - a).floor().max(0.0)) as usize;
    let hi = |c: f64, a: f64| ((c + a).ceil().min((g - 1) as f64)) as usize;
    for x in lo(center[0], semi[0])..=hi(center[0], semi[0]) {
        let dx = (x as f64 - center[0]) / semi[0];
        for y in lo(center[1], semi[1])..=hi(center[1], semi[1]) {
            let dy = (y as f64 - center[1]) / semi[1];
            if dx * dx + dy * dy > 1.0 {
                continue;
            }
            for z in lo(center[2], semi[2])..=hi(center[2], semi[2]) {
                let dz = (z as f64 - center[2]) / semi[2];
                let idx = (x * g + y) * g + z;
                if dx * dx + dy * dy + dz * dz <= 1.0 && brain[idx] && labels[idx] == 0 {
                    labels[idx] = region;
                }
            }
        }
    }
}

/// Exact voxel counts times voxel volume, indexed by region id - 1.
pub fn region_volumes(label_map: &[u16], regions: usize, voxel_mm: f64) -> Result<Vec<f64>> {
    let mut counts = vec![0u64; regions];
    for &l in label_map {
        if l == 0 {
            continue;
        }
        if l as usize > regions {
            return Err(Error::Data(format!(
                "label id {l} exceeds region count {regions}"
            )));
        }
        counts[l as usize - 1] += 1;
    }
    let vox = voxel_mm * voxel_mm * voxel_mm;
    Ok(counts.iter().map(|&c| c as f64 * vox).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn desk() -> (SynthConfig, RegionLayout) {
        let cfg = SynthConfig::desk();
        let layout = RegionLayout::build(&cfg).unwrap();
        (cfg, layout)
    }

    #[test]
    fn layout_places_all_fillers() {
        let (cfg, layout) = desk();
        assert_eq!(layout.fillers.len(), cfg.regions - 3);
    }

    #[test]
    fn phantom_is_deterministic() {
        let (cfg, layout) = desk();
        let make = || {
            let mut rng = DeterministicRng::new(5, 77);
            generate_phantom(&cfg, &layout, &mut rng, "subj-1", 66.0, Group::Mci).unwrap()
        };
        let a = make();
        let b = make();
        assert_eq!(a.volume.data(), b.volume.data());
        assert_eq!(a.label_map, b.label_map);
        assert_eq!(a.effective_age.to_bits(), b.effective_age.to_bits());
        assert_eq!(a.cog_score.to_bits(), b.cog_score.to_bits());
    }

    #[test]
    fn ventricle_grows_with_age_without_noise() {
        let (cfg, layout) = desk();
        let young = generate_reference(&cfg, &layout, 50.0).unwrap();
        let old = generate_reference(&cfg, &layout, 90.0).unwrap();
        let count = |p: &Phantom| {
            p.label_map
                .iter()
                .filter(|&&l| l == REGION_VENTRICLE)
                .count()
        };
        assert!(
            count(&old) > count(&young),
            "{} !> {}",
            count(&old),
            count(&young)
        );
    }

    #[test]
    fn capsules_shrink_with_age_without_noise() {
        let (cfg, layout) = desk();
        let young = generate_reference(&cfg, &layout, 50.0).unwrap();
        let old = generate_reference(&cfg, &layout, 90.0).unwrap();
        for region in [REGION_CAPSULE_L, REGION_CAPSULE_R] {
            let count = |p: &Phantom| p.label_map.iter().filter(|&&l| l == region).count();
            assert!(count(&old) < count(&young));
        }
    }

    #[test]
    fn filler_sizes_do_not_depend_on_age() {
        let (cfg, layout) = desk();
        let young = generate_reference(&cfg, &layout, 42.0).unwrap();
        let old = generate_reference(&cfg, &layout, 95.0).unwrap();
        for r in REGION_FILLER0..=(cfg.regions as u16) {
            let count = |p: &Phantom| p.label_map.iter().filter(|&&l| l == r).count() as f64;
            assert_eq!(count(&young), count(&old), "filler region {r}");
            assert!(count(&young) > 0.0, "filler region {r} empty");
        }
    }

    #[test]
    fn ad_offset_recovers_planted_mean() {
        // Sampling check over 500 draws: mean(effective - age) = 6.12 +/- 0.25.
        let (cfg, layout) = desk();
        let mut sum = 0.0;
        let n = 500;
        for i in 0..n {
            let mut rng = DeterministicRng::new(17, i);
            let p = generate_phantom(&cfg, &layout, &mut rng, "s", 70.0, Group::Ad).unwrap();
            sum += p.effective_age - p.age;
        }
        let mean = sum / n as f64;
        assert!((mean - 6.12).abs() < 0.25, "mean {mean}");
    }

    #[test]
    fn region_volumes_empty_map_is_zero() {
        let vols = region_volumes(&[0u16; 100], 5, 2.0).unwrap();
        assert_eq!(vols, vec![0.0; 5]);
    }

    #[test]
    fn region_volumes_single_voxel_at_two_mm() {
        let mut labels = vec![0u16; 27];
        labels[13] = 3;
        let vols = region_volumes(&labels, 4, 2.0).unwrap();
        assert_eq!(vols[2], 8.0);
        assert_eq!(vols[0], 0.0);
    }

    #[test]
    fn region_volumes_reject_out_of_range_ids() {
        assert!(region_volumes(&[9u16], 5, 2.0).is_err());
    }

    #[test]
    fn labels_partition_the_grid() {
        let (cfg, layout) = desk();
        let mut rng = DeterministicRng::new(3, 3);
        let p = generate_phantom(&cfg, &layout, &mut rng, "s", 77.0, Group::Cn).unwrap();
        let labeled: usize = p
            .region_volumes
            .iter()
            .map(|v| (v / (cfg.voxel_mm.powi(3))) as usize)
            .sum();
        let background = p.label_map.iter().filter(|&&l| l == 0).count();
        assert_eq!(labeled + background, cfg.grid.pow(3));
    }

    #[test]
    fn age_out_of_range_is_rejected() {
        let (cfg, layout) = desk();
        let mut rng = DeterministicRng::new(1, 1);
        assert!(generate_phantom(&cfg, &layout, &mut rng, "s", 30.0, Group::Cn).is_err());
    }

    #[test]
    fn structures_never_overlap_across_the_age_span() {
        // At both geometric extremes every planted voxel keeps a single
        // owner, and the ventricle never touches the capsules.
        let (cfg, layout) = desk();
        for age in [42.0, 95.0] {
            let p = generate_reference(&cfg, &layout, age).unwrap();
            let g = cfg.grid;
            let center = (g as f64 - 1.0) / 2.0;
            let r_vent = ventricle_radius(g, age);
            for (idx, &l) in p.label_map.iter().enumerate() {
                if l >= REGION_CAPSULE_L && l <= REGION_CAPSULE_R {
                    let x = (idx / (g * g)) as f64;
                    let y = ((idx / g) % g) as f64;
                    let z = (idx % g) as f64;
                    let d = ((x - center).powi(2) + (y - center).powi(2) + (z - center).powi(2))
                        .sqrt();
                    assert!(d > r_vent, "capsule voxel inside ventricle radius");
                }
            }
        }
    }

    #[test]
    fn fillers_avoid_every_view_window() {
        // A filler voxel inside a crop window would let a distractor leak
        // into the model's field of view.
        let (cfg, layout) = desk();
        let p = generate_reference(&cfg, &layout, 70.0).unwrap();
        let g = cfg.grid;
        let windows = view_windows(g, cfg.chunk);
        for (idx, &l) in p.label_map.iter().enumerate() {
            if l < REGION_FILLER0 {
                continue;
            }
            let pos = [
                (idx / (g * g)) as f64,
                ((idx / g) % g) as f64,
                (idx % g) as f64,
            ];
            for w in &windows {
                assert!(
                    w.distance(&pos) > 0.0,
                    "filler {l} voxel {pos:?} inside a view window"
                );
            }
        }
    }

    #[test]
    fn cognitive_score_tracks_planted_gap() {
        let (cfg, layout) = desk();
        let mut cn_sum = 0.0;
        let mut ad_sum = 0.0;
        let n = 200;
        for i in 0..n {
            let mut rng = DeterministicRng::new(29, i);
            cn_sum += generate_phantom(&cfg, &layout, &mut rng, "s", 70.0, Group::Cn)
                .unwrap()
                .cog_score;
            let mut rng = DeterministicRng::new(31, i);
            ad_sum += generate_phantom(&cfg, &layout, &mut rng, "s", 70.0, Group::Ad)
                .unwrap()
                .cog_score;
        }
        assert!(cn_sum / n as f64 > ad_sum / n as f64 + 1.0);
    }
}
