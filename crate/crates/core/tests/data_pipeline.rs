use clickvos_core::annotate::{annotate_detailed, annotate_first_frame, erode_mask, load_points, save_points};
use clickvos_core::io::{
    decode_flo, decode_pgm, decode_ppm, encode_flo, encode_pgm, encode_ppm, read_sample, write_sample,
};
use clickvos_core::model::{AbsModel, ModelConfig};
use clickvos_core::synth::{quantize, SceneSampler};
use clickvos_core::video::{FlowField, Image, LabelMap};
use proptest::prelude::*;

fn mem() -> &'static std::path::Path {
    "mem".as_ref()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn ppm_round_trips_quantized_frames(h in 1usize..12, w in 1usize..12, seed in any::<u64>()) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..h * w * 3).map(|_| rng.random::<f64>()).collect();
        let img = Image::from_data(h, w, data.clone()).unwrap();
        let back = decode_ppm(&encode_ppm(&img), mem()).unwrap();
        let expect: Vec<f64> = data.iter().map(|&v| quantize(v)).collect();
        prop_assert_eq!(&back.data, &expect);
        let again = decode_ppm(&encode_ppm(&back), mem()).unwrap();
        prop_assert_eq!(again, back);
    }

    #[test]
    fn pgm_round_trips(h in 1usize..12, w in 1usize..12, data in prop::collection::vec(any::<u8>(), 144)) {
        let m = LabelMap::from_data(h, w, data[..h * w].to_vec()).unwrap();
        prop_assert_eq!(decode_pgm(&encode_pgm(&m), mem()).unwrap(), m);
    }

    #[test]
    fn flo_round_trips_bit_exact(h in 1usize..10, w in 1usize..10, data in prop::collection::vec(any::<f32>(), 200)) {
        let mut f = FlowField::zeros(h, w);
        f.data.copy_from_slice(&data[..h * w * 2]);
        let back = decode_flo(&encode_flo(&f), mem()).unwrap();
        let a: Vec<u32> = back.data.iter().map(|v| v.to_bits()).collect();
        let b: Vec<u32> = f.data.iter().map(|v| v.to_bits()).collect();
        prop_assert_eq!(a, b);
    }
}

#[test]
fn sample_directory_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let (_, s) = SceneSampler {
        occlusion: true,
        ..SceneSampler::default()
    }
    .sample(11)
    .unwrap();
    write_sample(&s, dir.path()).unwrap();
    assert_eq!(read_sample(dir.path()).unwrap(), s);
}

#[test]
fn model_checkpoint_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.absw");
    let m = AbsModel::new(ModelConfig {
        channels: 8,
        n_heads: 2,
        init_seed: 9,
        ..ModelConfig::default()
    })
    .unwrap();
    m.save(&path).unwrap();
    let back = AbsModel::load(&path).unwrap();
    assert_eq!(back.config, m.config);
    for ((na, a), (nb, b)) in m.params.iter().zip(back.params.iter()) {
        assert_eq!(na, nb);
        let x: Vec<u64> = a.data().iter().map(|v| v.to_bits()).collect();
        let y: Vec<u64> = b.data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(x, y);
    }
}

#[test]
fn flow_warps_previous_object_pixels_onto_current_ones() {
    let sampler = SceneSampler::default();
    for seed in 0..20 {
        let (_, s) = sampler.sample(seed).unwrap();
        for t in 1..s.num_frames() {
            for y in 0..s.height {
                for x in 0..s.width {
                    let id = s.masks[t].get(x, y);
                    if id == 0 {
                        continue;
                    }
                    let (dx, dy) = s.flows[t].get(x, y);
                    let (px, py) = (x as f64 - dx as f64, y as f64 - dy as f64);
                    if px < 0.0 || py < 0.0 || px >= s.width as f64 || py >= s.height as f64 {
                        continue;
                    }
                    assert_eq!(s.masks[t - 1].get(px as usize, py as usize), id, "seed {seed} t {t} ({x},{y})");
                }
            }
        }
    }
}

#[test]
fn generation_is_deterministic() {
    let sampler = SceneSampler {
        occlusion: true,
        ..SceneSampler::default()
    };
    assert_eq!(sampler.sample(5).unwrap().1, sampler.sample(5).unwrap().1);
    assert_ne!(sampler.sample(5).unwrap().1, sampler.sample(6).unwrap().1);
}

#[test]
fn clicks_land_inside_eroded_objects() {
    let sampler = SceneSampler::default();
    for seed in 0..30 {
        let (_, s) = sampler.sample(seed).unwrap();
        let gt = &s.masks[0];
        let (_, detail) = annotate_detailed(gt, &s.object_ids, seed).unwrap();
        for a in &detail {
            let m = gt.mask_of(a.click.id);
            assert!(m.get(a.click.x, a.click.y));
            if !a.fell_back {
                assert!(erode_mask(&m, a.erosion).get(a.click.x, a.click.y));
            }
        }
        let points = annotate_first_frame(gt, seed).unwrap();
        assert_eq!(points, annotate_first_frame(gt, seed).unwrap());
        points.check_against(gt).unwrap();
    }
}

#[test]
fn points_file_round_trips_and_rejects_bad_input() {
    let dir = tempfile::tempdir().unwrap();
    let (_, s) = SceneSampler::default().sample(2).unwrap();
    let points = annotate_first_frame(&s.masks[0], 2).unwrap();
    let path = dir.path().join("points.json");
    save_points(&path, &points).unwrap();
    assert_eq!(load_points(&path, 64, 64, Some(&s.masks[0])).unwrap(), points);
    assert!(load_points(&path, 4, 4, None).is_err());
    std::fs::write(&path, r#"{"background":{"x":1,"y":1},"objects":[],"extra":1}"#).unwrap();
    assert!(load_points(&path, 64, 64, None).is_err());
}
