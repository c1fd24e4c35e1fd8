use uqr_core::codec::io::{read_basis, write_basis};
use uqr_core::codec::{Codec, CodecKind, CodecSpec};
use uqr_core::data::{crop_masks, gen_synthetic, load_scenes, save_dataset, SceneConfig};
use uqr_core::eval::{evaluate, EvalGt, EvalImage};
use uqr_core::mask::{binarize, mask_iou};
use uqr_core::model::Detection;

#[test]
fn saved_scenes_load_back() {
    let scenes = gen_synthetic(3, 5, &SceneConfig::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_dataset(dir.path(), &scenes).unwrap();
    let back = load_scenes(dir.path()).unwrap();
    assert_eq!(back.len(), scenes.len());
    for (a, b) in scenes.iter().zip(&back) {
        assert_eq!(a.instances.len(), b.instances.len());
        for (x, y) in a.instances.iter().zip(&b.instances) {
            assert_eq!((x.category, &x.mask, x.bbox), (y.category, &y.mask, y.bbox));
        }
    }
}

#[test]
fn fitted_basis_survives_file_round_trip() {
    let scenes = gen_synthetic(11, 40, &SceneConfig::default()).unwrap();
    let masks = crop_masks(&scenes, 32).unwrap();
    for kind in [CodecKind::Pca, CodecKind::Dct] {
        let spec = CodecSpec::new(kind, 32, 24);
        let codec = if kind.needs_fitting() { Codec::fit(spec, &masks).unwrap() } else { Codec::analytic(spec).unwrap() };
        let mut buf = Vec::new();
        write_basis(&codec, &mut buf).unwrap();
        let back = read_basis(spec, buf.as_slice()).unwrap();
        for m in masks.iter().take(10) {
            assert_eq!(codec.encode(m).unwrap().coeffs(), back.encode(m).unwrap().coeffs());
        }
        let enc = codec.encode_batch(&masks).unwrap();
        let dec = codec.decode_batch(&enc).unwrap();
        let mean: f64 = masks
            .iter()
            .zip(&dec)
            .map(|(m, d)| mask_iou(&binarize(m, 0.5), &binarize(d, 0.5)).unwrap())
            .sum::<f64>()
            / masks.len() as f64;
        assert!(mean > 0.85, "{kind:?} {mean}");
    }
}

#[test]
fn ground_truth_as_detections_scores_full_ap() {
    let scenes = gen_synthetic(5, 6, &SceneConfig::default()).unwrap();
    let images: Vec<EvalImage> = scenes
        .iter()
        .map(|s| {
            let gts: Vec<EvalGt> = s
                .instances
                .iter()
                .map(|i| EvalGt { category: i.category, bbox: i.bbox, mask: i.mask.clone() })
                .collect();
            let dets = gts
                .iter()
                .map(|g| Detection { category: g.category, score: 0.9, bbox: g.bbox, mask: g.mask.clone() })
                .collect();
            EvalImage { gts, dets }
        })
        .collect();
    let r = evaluate(&images, 3).unwrap();
    assert!((r.bbox.ap - 1.0).abs() < 1e-12 && (r.mask.ap - 1.0).abs() < 1e-12, "{r:?}");

    // dropping every detection of one image lowers recall in its categories
    let mut partial = images.clone();
    partial[0].dets.clear();
    let r = evaluate(&partial, 3).unwrap();
    assert!(r.bbox.ap50 < 1.0);
}
