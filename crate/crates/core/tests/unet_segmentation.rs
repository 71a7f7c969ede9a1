use ctbert::ingest::{Partition, SyntheticConfig, SyntheticVolume};
use ctbert::lungseg::{binarize, morph_segment, refine_mask, train_unet, BinaryImage, SliceMask, UnetConfig};

fn slices(cfg: &SyntheticConfig, partition: Partition, volumes: usize, per_volume: usize) -> Vec<(SyntheticVolume, usize)> {
    let mut out = Vec::new();
    for index in 0..volumes {
        let vol = SyntheticVolume::build(cfg, partition, index).unwrap();
        // Middle slices, where both lungs are well formed.
        let n = vol.n_slices;
        for j in 0..per_volume {
            out.push((vol.clone(), n / 4 + j * (n / 2) / per_volume));
        }
    }
    out
}

fn pseudo_mask(vol: &SyntheticVolume, z: usize) -> SliceMask {
    refine_mask(&morph_segment(&binarize(&vol.render(z))))
}

#[test]
fn held_out_iou_against_pseudo_masks_and_geometry() {
    let cfg = SyntheticConfig { image_size: 128, seed: 3, ..SyntheticConfig::default() };
    let train: Vec<_> = slices(&cfg, Partition::Train, 10, 5)
        .into_iter()
        .map(|(v, z)| (v.render(z), pseudo_mask(&v, z)))
        .collect();
    assert_eq!(train.len(), 50);
    let unet = UnetConfig { input_size: 64, seed: 4, ..UnetConfig::default() };
    let model = train_unet(&train, &unet).unwrap().model;

    let held_out = slices(&cfg, Partition::Val, 5, 4);
    let images: Vec<_> = held_out.iter().map(|(v, z)| v.render(*z)).collect();
    let predicted = model.segment_batch(&images.iter().collect::<Vec<_>>());
    let (mut vs_target, mut vs_truth) = (0.0, 0.0);
    for ((vol, z), pred) in held_out.iter().zip(&predicted) {
        vs_target += pred.mask.iou(&pseudo_mask(vol, *z).mask);
        let truth = BinaryImage::new(vol.size, vol.size, vol.lung_mask(*z));
        vs_truth += pred.mask.iou(&truth);
    }
    let n = held_out.len() as f64;
    assert!(vs_target / n >= 0.8, "mean IoU vs pseudo-masks {}", vs_target / n);
    assert!(vs_truth / n >= 0.8, "mean IoU vs lung geometry {}", vs_truth / n);
}
