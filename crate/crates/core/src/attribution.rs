//! Gradient-mapping interpretability: per-view input gradients of the
//! training loss, signed fusion back into the shared G^3 frame, corpus
//! averaging, and the gradient-per-volume region ranking.
//!
//! All phantoms share one frame by construction, so the registration step
//! of the original pipeline is the identity here and a noise-free
//! reference phantom serves as the atlas stand-in.

use crate::corpus::CropGeometry;
use crate::error::{Error, Result};
use crate::model::{BrainAgeModel, PseudoSample};
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Gradients of the per-sample training loss w.r.t. the three normalized
/// view chunks.
#[derive(Debug, Clone)]
pub struct ViewGradients {
    pub g_s: Tensor,
    pub g_c: Tensor,
    pub g_a: Tensor,
}

impl ViewGradients {
    pub fn views(&self) -> [&Tensor; 3] {
        [&self.g_s, &self.g_c, &self.g_a]
    }
}

/// d L(yhat_i, y_i) / d chunk for each view, where L is the single-sample
/// squared error against the ground-truth age.
pub fn view_gradients(model: &BrainAgeModel, sample: &PseudoSample) -> Result<ViewGradients> {
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape, false);
    let (yhat, chunks) = model.forward_sample(&mut tape, &vars, sample, true)?;
    let target = tape.leaf_owned(vec![1, 1], vec![sample.age], false);
    let diff = tape.sub(yhat, target)?;
    let sq = tape.mul(diff, diff)?;
    let loss = tape.mean_all(sq);
    tape.backward(loss)?;

    let chunk_shape = vec![
        model.config.chunk.0,
        model.config.chunk.1,
        model.config.chunk.2,
    ];
    let grab = |tape: &Tape, v| -> Result<Tensor> {
        let g = tape
            .grad_tensor(v)
            .ok_or_else(|| Error::Data("chunk gradient missing".into()))?;
        g.reshaped(chunk_shape.clone())
    };
    Ok(ViewGradients {
        g_s: grab(&tape, chunks[0])?,
        g_c: grab(&tape, chunks[1])?,
        g_a: grab(&tape, chunks[2])?,
    })
}

/// Scatter each view gradient back to its source voxels, take the signed
/// sum where views overlap, and apply the absolute value last. Voxels not
/// covered by any view stay zero.
pub fn fuse_to_volume(grads: &ViewGradients, geom: &CropGeometry) -> Result<Tensor> {
    let (c1, c2, t) = geom.chunk;
    let expect = [c1, c2, t];
    for g in grads.views() {
        if g.shape() != expect {
            return Err(Error::DimMismatch {
                op: "fuse_to_volume",
                left: g.shape().to_vec(),
                right: expect.to_vec(),
            });
        }
        if !g.is_finite() {
            return Err(Error::NonFinite {
                op: "fuse_to_volume",
            });
        }
    }
    let g = geom.grid;
    let mut fused = vec![0.0f64; g * g * g];
    for (view, grad) in grads.views().iter().enumerate() {
        let data = grad.data();
        for i in 0..c1 {
            for j in 0..c2 {
                for s in 0..t {
                    let (x, y, z) = geom.source_index(view, i, j, s);
                    fused[(x * g + y) * g + z] += data[(i * c2 + j) * t + s];
                }
            }
        }
    }
    for v in fused.iter_mut() {
        *v = v.abs();
    }
    Tensor::new(vec![g, g, g], fused)
}

/// Voxelwise arithmetic mean over per-sample maps (identity registration).
pub fn average_maps(maps: &[Tensor]) -> Result<Tensor> {
    let first = maps
        .first()
        .ok_or_else(|| Error::Data("average_maps over an empty list".into()))?;
    let shape = first.shape().to_vec();
    let mut acc = vec![0.0f64; first.numel()];
    for m in maps {
        if m.shape() != shape.as_slice() {
            return Err(Error::DimMismatch {
                op: "average_maps",
                left: shape,
                right: m.shape().to_vec(),
            });
        }
        for (a, v) in acc.iter_mut().zip(m.data()) {
            *a += v;
        }
    }
    let inv = 1.0 / maps.len() as f64;
    for a in acc.iter_mut() {
        *a *= inv;
    }
    Tensor::new(shape, acc)
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct RegionAttribution {
    pub region_id: u16,
    /// Sum of the averaged gradient map over the region's voxels.
    pub attribution: f64,
    /// Region volume in mm^3, from the reference label map.
    pub volume_mm3: f64,
    /// attribution / volume.
    pub score: f64,
    /// 1-based rank after sorting.
    pub rank: usize,
}

/// score_r = (sum of gbar over region r) / volume_r, sorted descending,
/// ties broken by ascending region id. Zero-volume regions score 0 with a
/// warning and sort last.
pub fn rank_regions(
    gbar: &Tensor,
    label_map: &[u16],
    region_volumes: &[f64],
) -> Result<(Vec<RegionAttribution>, Vec<String>)> {
    if gbar.numel() != label_map.len() {
        return Err(Error::DimMismatch {
            op: "rank_regions",
            left: gbar.shape().to_vec(),
            right: vec![label_map.len()],
        });
    }
    let regions = region_volumes.len();
    let mut sums = vec![0.0f64; regions];
    for (&l, &v) in label_map.iter().zip(gbar.data()) {
        if l == 0 {
            continue;
        }
        if l as usize > regions {
            return Err(Error::Data(format!(
                "label id {l} exceeds region count {regions}"
            )));
        }
        sums[l as usize - 1] += v;
    }

    let mut warnings = Vec::new();
    let mut rows: Vec<RegionAttribution> = (0..regions)
        .map(|i| {
            let region_id = (i + 1) as u16;
            let volume = region_volumes[i];
            let score = if volume > 0.0 {
                sums[i] / volume
            } else {
                warnings.push(format!(
                    "region {region_id} has zero volume in the reference map; scored 0"
                ));
                0.0
            };
            RegionAttribution {
                region_id,
                attribution: sums[i],
                volume_mm3: volume,
                score,
                rank: 0,
            }
        })
        .collect();

    rows.sort_by(|a, b| {
        let a_zero = a.volume_mm3 <= 0.0;
        let b_zero = b.volume_mm3 <= 0.0;
        a_zero
            .cmp(&b_zero)
            .then(b.score.partial_cmp(&a.score).expect("finite scores"))
            .then(a.region_id.cmp(&b.region_id))
    });
    for (i, row) in rows.iter_mut().enumerate() {
        row.rank = i + 1;
    }
    Ok((rows, warnings))
}

pub fn ranking_csv(rows: &[RegionAttribution]) -> String {
    let mut out = String::from("rank,region_id,score,attribution,volume_mm3\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.rank, r.region_id, r.score, r.attribution, r.volume_mm3
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Group, ModelConfig, VolumeStats};
    use crate::rng::DeterministicRng;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            chunk: (8, 8, 4),
            regions: 5,
            encoder_channels: vec![2],
            d_model: 8,
            n_heads: 2,
            stem_queries: 2,
            trunk_layers: 1,
            ff_width: 12,
            head_hidden: 8,
            head_bias_init: 68.5,
            seed: 42,
        }
    }

    fn random_sample(cfg: &ModelConfig, seed: u64) -> PseudoSample {
        let (c1, c2, t) = cfg.chunk;
        let mut rng = DeterministicRng::new(seed, 0);
        let mut chunk = || {
            Tensor::new(
                vec![c1, c2, t],
                (0..c1 * c2 * t).map(|_| rng.next_f64()).collect(),
            )
            .unwrap()
        };
        PseudoSample {
            subject_id: "s".into(),
            scan_id: "s-0".into(),
            view_s: chunk(),
            view_c: chunk(),
            view_a: chunk(),
            region_volumes: vec![1.0; cfg.regions],
            age: 71.0,
            group: Group::Cn,
            cog_score: 29.0,
        }
    }

    #[test]
    fn constant_model_has_zero_view_gradients() {
        let cfg = tiny_config();
        let mut model = BrainAgeModel::init(cfg.clone(), VolumeStats::identity(5)).unwrap();
        model.head.w2 = Tensor::zeros(vec![8, 1]);
        let grads = view_gradients(&model, &random_sample(&cfg, 3)).unwrap();
        for g in grads.views() {
            assert!(g.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn view_gradients_have_chunk_shapes_and_match_finite_differences() {
        let cfg = tiny_config();
        let model = BrainAgeModel::init(cfg.clone(), VolumeStats::identity(5)).unwrap();
        let sample = random_sample(&cfg, 7);
        let grads = view_gradients(&model, &sample).unwrap();
        for g in grads.views() {
            assert_eq!(g.shape(), &[8, 8, 4]);
        }

        let loss_of = |s: &PseudoSample| -> f64 {
            let e = model.predict(s).unwrap() - s.age;
            e * e
        };
        let mut pick = DeterministicRng::new(11, 0);
        let h = 1e-4;
        for view in 0..3 {
            let analytic = grads.views()[view];
            for _ in 0..5 {
                let idx = pick.below(analytic.numel());
                let probe = |delta: f64| -> f64 {
                    let mut s = sample.clone();
                    let t = match view {
                        0 => &mut s.view_s,
                        1 => &mut s.view_c,
                        _ => &mut s.view_a,
                    };
                    t.data_mut()[idx] += delta;
                    loss_of(&s)
                };
                let numeric = (probe(h) - probe(-h)) / (2.0 * h);
                let a = analytic.data()[idx];
                let scale = a.abs().max(numeric.abs()).max(1e-4);
                assert!(
                    (a - numeric).abs() / scale < 1e-4,
                    "view {view} voxel {idx}: {a} vs {numeric}"
                );
            }
        }
    }

    #[test]
    fn fusion_applies_signed_sum_then_abs() {
        // A voxel covered by all three views with gradients (1, -2, 0.5)
        // ends at |1 - 2 + 0.5| = 0.5; single-view coverage of -3 ends at 3.
        let geom = CropGeometry::new(8, (8, 8, 8)).unwrap();
        let mut g_s = Tensor::zeros(vec![8, 8, 8]);
        let mut g_c = Tensor::zeros(vec![8, 8, 8]);
        let mut g_a = Tensor::zeros(vec![8, 8, 8]);
        // Full-extent crops cover every voxel in all three views. Chunk
        // coordinates mapping to source voxel (2,3,4) per view:
        g_s.set(&[3, 4, 2], 1.0);
        g_c.set(&[2, 4, 3], -2.0);
        g_a.set(&[2, 3, 4], 0.5);
        // Another voxel touched only by the sagittal view.
        g_s.set(&[0, 0, 0], -3.0);
        let fused = fuse_to_volume(&ViewGradients { g_s, g_c, g_a }, &geom).unwrap();
        assert!((fused.at(&[2, 3, 4]) - 0.5).abs() < 1e-15);
        assert_eq!(fused.at(&[0, 0, 0]), 3.0);
        assert!(fused.data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn fusion_of_zero_gradients_is_zero() {
        let geom = CropGeometry::new(6, (4, 4, 2)).unwrap();
        let z = Tensor::zeros(vec![4, 4, 2]);
        let fused = fuse_to_volume(
            &ViewGradients {
                g_s: z.clone(),
                g_c: z.clone(),
                g_a: z,
            },
            &geom,
        )
        .unwrap();
        assert!(fused.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_view_fusion_conserves_mass() {
        let geom = CropGeometry::new(10, (6, 6, 3)).unwrap();
        let mut rng = DeterministicRng::new(21, 0);
        let g_s = Tensor::randn(vec![6, 6, 3], 1.0, &mut rng);
        let mass: f64 = g_s.data().iter().map(|v| v.abs()).sum();
        let fused = fuse_to_volume(
            &ViewGradients {
                g_s: g_s.clone(),
                g_c: Tensor::zeros(vec![6, 6, 3]),
                g_a: Tensor::zeros(vec![6, 6, 3]),
            },
            &geom,
        )
        .unwrap();
        let fused_mass: f64 = fused.data().iter().sum();
        assert!((mass - fused_mass).abs() < 1e-12);
    }

    #[test]
    fn geometry_mismatch_is_rejected() {
        let geom = CropGeometry::new(8, (4, 4, 2)).unwrap();
        let wrong = Tensor::zeros(vec![4, 4, 3]);
        let z = Tensor::zeros(vec![4, 4, 2]);
        assert!(fuse_to_volume(
            &ViewGradients {
                g_s: wrong,
                g_c: z.clone(),
                g_a: z
            },
            &geom
        )
        .is_err());
    }

    #[test]
    fn averaging_examples() {
        let mut rng = DeterministicRng::new(31, 0);
        let v = Tensor::randn(vec![4, 4, 4], 1.0, &mut rng);
        // Single map: itself.
        let avg = average_maps(std::slice::from_ref(&v)).unwrap();
        assert_eq!(avg.data(), v.data());
        // {0, v}: v/2.
        let avg = average_maps(&[Tensor::zeros(vec![4, 4, 4]), v.clone()]).unwrap();
        for (a, b) in avg.data().iter().zip(v.data()) {
            assert!((a - b / 2.0).abs() < 1e-15);
        }
        // Mean of N identical maps is that map.
        let avg = average_maps(&[v.clone(), v.clone(), v.clone()]).unwrap();
        for (a, b) in avg.data().iter().zip(v.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(average_maps(&[]).is_err());
    }

    #[test]
    fn averaging_is_order_invariant_within_tolerance() {
        let mut rng = DeterministicRng::new(41, 0);
        let maps: Vec<Tensor> = (0..7)
            .map(|_| Tensor::randn(vec![5, 5, 5], 0.1, &mut rng))
            .collect();
        let fwd = average_maps(&maps).unwrap();
        let rev: Vec<Tensor> = maps.iter().rev().cloned().collect();
        let bwd = average_maps(&rev).unwrap();
        for (a, b) in fwd.data().iter().zip(bwd.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn uniform_map_ties_fall_back_to_id_order() {
        // gbar = 1 everywhere: every region scores 1/voxel_volume.
        let g = 6;
        let mut labels = vec![0u16; g * g * g];
        // Three regions with different voxel counts.
        labels[0] = 1;
        labels[1] = 2;
        labels[2] = 2;
        labels[3] = 3;
        labels[4] = 3;
        labels[5] = 3;
        let voxel_mm3 = 8.0;
        let volumes = vec![8.0, 16.0, 24.0];
        let gbar = Tensor::full(vec![g, g, g], 1.0);
        let (rows, warnings) = rank_regions(&gbar, &labels, &volumes).unwrap();
        assert!(warnings.is_empty());
        for r in &rows {
            assert!((r.score - 1.0 / voxel_mm3).abs() < 1e-12);
        }
        let ids: Vec<u16> = rows.iter().map(|r| r.region_id).collect();
        assert_eq!(ids, vec![1, 2, 3]);
        assert_eq!(rows[0].rank, 1);
    }

    #[test]
    fn concentrated_map_ranks_its_region_first() {
        let g = 4;
        let mut labels = vec![0u16; g * g * g];
        labels[10] = 3;
        labels[11] = 3;
        labels[20] = 1;
        labels[30] = 2;
        let mut gbar = Tensor::zeros(vec![g, g, g]);
        gbar.data_mut()[10] = 5.0;
        let volumes = vec![8.0, 8.0, 16.0];
        let (rows, _) = rank_regions(&gbar, &labels, &volumes).unwrap();
        assert_eq!(rows[0].region_id, 3);
        assert!(rows[0].score > 0.0);
    }

    #[test]
    fn zero_volume_region_warns_and_sorts_last() {
        let g = 4;
        let mut labels = vec![0u16; g * g * g];
        labels[0] = 1;
        let volumes = vec![8.0, 0.0];
        let gbar = Tensor::full(vec![g, g, g], 2.0);
        let (rows, warnings) = rank_regions(&gbar, &labels, &volumes).unwrap();
        assert_eq!(rows.last().unwrap().region_id, 2);
        assert_eq!(rows.last().unwrap().score, 0.0);
        assert!(warnings.iter().any(|w| w.contains("region 2")));
    }
}
