mod oracles;

use bgseg::head::{FeatureMatrix, SegHeadParams};
use bgseg::image::RgbImage;
use bgseg::localize::{self, Connectivity, InferenceConfig, SelectMode};
use bgseg::mask::{BinaryMask, Resolution, SoftMask};
use bgseg::tensors::PatchGrid;
use proptest::prelude::*;

fn binary(rows: usize, cols: usize, v: Vec<bool>) -> BinaryMask {
    BinaryMask::new(Resolution::Pixel, rows, cols, v).unwrap()
}

fn mask_and_conn() -> impl Strategy<Value = (BinaryMask, Connectivity)> {
    (1usize..24, 1usize..24, prop_oneof![Just(Connectivity::Four), Just(Connectivity::Eight)]).prop_flat_map(
        |(r, c, conn)| {
            prop::collection::vec(prop::bool::weighted(0.45), r * c).prop_map(move |v| (binary(r, c, v), conn))
        },
    )
}

/// Patch values drawn near the threshold and at a few exact levels.
fn patch_values(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(
        prop_oneof![0.0f64..=1.0, 0.49f64..0.51, Just(0.5), Just(0.0), Just(1.0)],
        n,
    )
}

proptest! {
    #[test]
    fn components_match_flood_fill((m, conn) in mask_and_conn()) {
        let c = localize::connected_components(&m, conn);
        let flood = oracles::flood_labels(&m.values, m.rows, m.cols, conn == Connectivity::Eight);
        prop_assert_eq!(&c.labels, &flood);
        for (k, b) in c.boxes.iter().enumerate() {
            let label = k as u32 + 1;
            let pixels: Vec<usize> = (0..m.len()).filter(|&i| flood[i] == label).collect();
            prop_assert_eq!(c.sizes[k], pixels.len());
            // tight box: every edge touches a pixel of the component
            let xs: Vec<usize> = pixels.iter().map(|&i| i % m.cols).collect();
            let ys: Vec<usize> = pixels.iter().map(|&i| i / m.cols).collect();
            prop_assert_eq!(b.xmin, *xs.iter().min().unwrap());
            prop_assert_eq!(b.xmax, *xs.iter().max().unwrap());
            prop_assert_eq!(b.ymin, *ys.iter().min().unwrap());
            prop_assert_eq!(b.ymax, *ys.iter().max().unwrap());
        }
    }

    #[test]
    fn single_mode_keeps_the_largest((m, conn) in mask_and_conn()) {
        let c = localize::connected_components(&m, conn);
        let sel = localize::select(&c, SelectMode::Single, Resolution::Pixel);
        if c.is_empty() {
            prop_assert!(sel.degenerate);
        } else {
            let max = *c.sizes.iter().max().unwrap();
            prop_assert_eq!(sel.kept.len(), 1);
            let kept = sel.kept[0] as usize;
            prop_assert_eq!(c.sizes[kept - 1], max);
            // lowest label wins ties
            prop_assert!(c.sizes[..kept - 1].iter().all(|&s| s < max));
            prop_assert_eq!(sel.mask.count(), max);
        }
    }

    #[test]
    fn fused_upsample_components_match_the_generic_path(
        (rows, cols, p) in (1usize..8, 1usize..8, 1usize..10),
        values in patch_values(64),
        threshold in prop_oneof![Just(0.5), 0.0f64..1.0],
        conn in prop_oneof![Just(Connectivity::Four), Just(Connectivity::Eight)],
    ) {
        let grid = PatchGrid::new(cols * p, rows * p, p).unwrap();
        let values = values[..rows * cols].to_vec();
        let m = SoftMask::new(Resolution::Patch, rows, cols, values).unwrap();
        let up = localize::upsample(&m, &grid).unwrap();
        let generic = localize::connected_components(&up.binarize(threshold), conn);
        prop_assert_eq!(&localize::components_above(&up, threshold, conn), &generic);
        prop_assert_eq!(&localize::upsampled_components(&m, &grid, threshold, conn).unwrap(), &generic);
    }

    #[test]
    fn upsample_stays_within_neighbouring_patch_values(
        (rows, cols, p) in (1usize..7, 1usize..7, 1usize..9),
        values in prop::collection::vec(0.0f64..=1.0, 49),
    ) {
        let grid = PatchGrid::new(cols * p, rows * p, p).unwrap();
        let m = SoftMask::new(Resolution::Patch, rows, cols, values[..rows * cols].to_vec()).unwrap();
        let up = localize::upsample(&m, &grid).unwrap();
        for y in 0..rows * p {
            for x in 0..cols * p {
                // a pixel only mixes patches within one step of its own
                let (pr, pc) = (y / p, x / p);
                let mut lo = f64::MAX;
                let mut hi = f64::MIN;
                for r in pr.saturating_sub(1)..=(pr + 1).min(rows - 1) {
                    for c in pc.saturating_sub(1)..=(pc + 1).min(cols - 1) {
                        lo = lo.min(m.values[r * cols + c]);
                        hi = hi.max(m.values[r * cols + c]);
                    }
                }
                let v = up.values[y * cols * p + x];
                prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn downsample_inverts_replication(
        (rows, cols, p) in (1usize..7, 1usize..7, 1usize..6),
        bits in prop::collection::vec(any::<bool>(), 36),
    ) {
        let grid = PatchGrid::new(cols * p, rows * p, p).unwrap();
        let patch = BinaryMask::new(Resolution::Patch, rows, cols, bits[..rows * cols].to_vec()).unwrap();
        let soft: Vec<f64> = patch.values.iter().map(|&b| b as u8 as f64).collect();
        let nn = oracles::nearest_upsample(&soft, rows, cols, p);
        let pixel = binary(rows * p, cols * p, nn.iter().map(|&v| v > 0.5).collect());
        prop_assert_eq!(localize::downsample(&pixel, &grid).unwrap(), patch);
    }
}

#[test]
fn boxes_surround_planted_rectangles() {
    let grid = PatchGrid::new(64, 48, 8).unwrap();
    let mut patch = vec![0.0; grid.n_patches()];
    for r in 1..4 {
        for c in 2..6 {
            patch[r * grid.cols + c] = 1.0;
        }
    }
    patch[5 * grid.cols + 7] = 1.0;
    // a one-column head whose output is the feature itself, shifted to logits
    let feats = FeatureMatrix::new(grid, 1, patch.iter().map(|&v| if v > 0.5 { 10.0 } else { -10.0 }).collect())
        .unwrap();
    let head = SegHeadParams {
        weight: vec![1.0],
        bias: 0.0,
    };
    let img = RgbImage::filled(64, 48, [0, 0, 0]);
    let cfg = InferenceConfig {
        mode: SelectMode::Multi,
        min_component_frac: 0.0,
        ..Default::default()
    };
    let out = localize::infer(&feats, &img, &head, &cfg, &Default::default()).unwrap();
    assert_eq!(out.boxes.len(), 2);
    let b = out.boxes[0];
    // the rectangle spans pixels 16..48 x 8..32; the bilinear edge sits on the boundary
    assert_eq!((b.xmin, b.ymin, b.xmax, b.ymax), (16, 8, 47, 31));
    let single = localize::infer(&feats, &img, &head, &InferenceConfig { mode: SelectMode::Single, ..cfg }, &Default::default())
        .unwrap();
    assert_eq!(single.boxes, vec![b]);
}
