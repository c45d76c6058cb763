use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use smca::boxes::iou;
use smca::data::{export_scenes, generate_scene, generate_scenes, import_scenes, split_seeds, SceneConfig, Split};
use smca::features::Stem;
use smca::gradcheck::{finite_diff_check, GradCheckOptions};
use smca::{Graph, ParamStore};
use statrs::distribution::{ChiSquared, ContinuousCDF};

#[test]
fn scenes_are_deterministic_per_seed() {
    let cfg = SceneConfig::default();
    for seed in [0, 1, 17, u64::MAX] {
        assert_eq!(generate_scene(seed, &cfg).unwrap(), generate_scene(seed, &cfg).unwrap());
    }
    assert_ne!(
        generate_scene(1, &cfg).unwrap().pixels,
        generate_scene(2, &cfg).unwrap().pixels
    );
}

#[test]
fn zero_objects_gives_blank_canvas() {
    let cfg = SceneConfig {
        min_objects: 0,
        max_objects: 0,
        ..SceneConfig::default()
    };
    let s = generate_scene(3, &cfg).unwrap();
    assert!(s.objects.is_empty());
    assert_eq!(s.pixels.len(), 32 * 32);
    assert!(s.pixels.iter().all(|&p| p == 0.0));
}

#[test]
fn objects_stay_in_bounds_and_apart() {
    let cfg = SceneConfig::default();
    for seed in 0..300 {
        let s = generate_scene(seed, &cfg).unwrap();
        assert!(s.objects.len() <= cfg.max_objects);
        for o in &s.objects {
            let [x0, y0, x1, y1] = o.bbox.corners();
            assert!(0.0 <= x0 && x0 < x1 && x1 <= 1.0 + 1e-12, "{:?}", o.bbox);
            assert!(0.0 <= y0 && y0 < y1 && y1 <= 1.0 + 1e-12, "{:?}", o.bbox);
            assert!(o.class < cfg.num_classes);
        }
        for (i, a) in s.objects.iter().enumerate() {
            for b in &s.objects[i + 1..] {
                assert!(iou(a.bbox, b.bbox) <= cfg.max_overlap + 1e-12);
            }
        }
    }
}

#[test]
fn class_frequencies_are_uniform() {
    let cfg = SceneConfig::default();
    let mut counts = [0usize; 3];
    for seed in 0..1000 {
        for o in generate_scene(seed, &cfg).unwrap().objects {
            counts[o.class] += 1;
        }
    }
    let total: usize = counts.iter().sum();
    let expected = total as f64 / 3.0;
    let stat: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    let p = 1.0 - ChiSquared::new(2.0).unwrap().cdf(stat);
    assert!(p > 0.01, "counts {counts:?}, chi2 {stat}, p {p}");
}

#[test]
fn splits_are_disjoint() {
    let train = split_seeds(5, Split::Train, 500);
    let eval = split_seeds(5, Split::Eval, 500);
    assert!(train.iter().all(|s| !eval.contains(s)));
    assert_eq!(train, split_seeds(5, Split::Train, 500));
}

#[test]
fn export_import_round_trip() {
    let cfg = SceneConfig::default();
    let scenes = generate_scenes(&split_seeds(9, Split::Eval, 20), &cfg).unwrap();
    let mut buf = Vec::new();
    export_scenes(&scenes, &mut buf).unwrap();
    assert_eq!(import_scenes(buf.as_slice(), &cfg).unwrap(), scenes);

    let other = SceneConfig { max_size: 8, ..cfg };
    assert!(import_scenes(buf.as_slice(), &other).is_err());
}

#[test]
fn invalid_scene_configs_are_rejected() {
    let base = SceneConfig::default();
    for bad in [
        SceneConfig {
            canvas: 0,
            ..base.clone()
        },
        SceneConfig {
            min_size: 9,
            max_size: 8,
            ..base.clone()
        },
        SceneConfig {
            min_objects: 4,
            ..base.clone()
        },
        SceneConfig {
            num_classes: 0,
            ..base.clone()
        },
        SceneConfig {
            min_aspect: 0.0,
            ..base.clone()
        },
    ] {
        assert!(generate_scene(0, &bad).is_err(), "{bad:?}");
    }
}

fn stem(canvas: usize, strides: &[usize], dim: usize, seed: u64) -> (Stem, ParamStore) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let s = Stem::new(&mut store, &mut rng, canvas, strides, dim).unwrap();
    (s, store)
}

#[test]
fn token_counts_follow_stride() {
    let (s, store) = stem(32, &[2, 4, 8], 8, 0);
    let img = vec![0.5; 32 * 32];
    let mut g = Graph::new();
    let f = s.featurize(&mut g, &store, &[&img, &img]).unwrap();
    assert_eq!(f.token_counts(), vec![256, 64, 16]);
    for sc in &f.scales {
        assert_eq!(g.shape(sc.tokens), &[2, sc.height * sc.width, 8]);
        assert_eq!(g.shape(sc.pos), &[1, sc.height * sc.width, 8]);
    }
}

#[test]
fn blank_canvas_tokens_equal_embedding_bias() {
    let (s, store) = stem(16, &[2, 4], 8, 1);
    let img = vec![0.0; 16 * 16];
    let mut g = Graph::new();
    let f = s.featurize(&mut g, &store, &[&img]).unwrap();
    for (j, sc) in f.scales.iter().enumerate() {
        let bias = store.get(s.embed[j].bias).tensor.values().to_vec();
        for row in g.value(sc.tokens).chunks(8) {
            assert_eq!(row, bias.as_slice());
        }
    }
}

#[test]
fn patch_layout_is_row_major() {
    // A single lit pixel moves exactly one token at every stride.
    let (s, store) = stem(8, &[2, 4], 4, 2);
    let blank = vec![0.0; 64];
    let mut lit = blank.clone();
    lit[5 * 8 + 6] = 1.0;
    let mut g = Graph::new();
    let a = s.featurize(&mut g, &store, &[&blank]).unwrap();
    let b = s.featurize(&mut g, &store, &[&lit]).unwrap();
    for (j, r) in [2usize, 4].into_iter().enumerate() {
        let gs = 8 / r;
        let want = (5 / r) * gs + 6 / r;
        let (ta, tb) = (g.value(a.scales[j].tokens), g.value(b.scales[j].tokens));
        for t in 0..gs * gs {
            let moved = ta[t * 4..t * 4 + 4] != tb[t * 4..t * 4 + 4];
            assert_eq!(moved, t == want, "stride {r} token {t}");
        }
    }
}

#[test]
fn featurize_gradients_match_finite_differences() {
    let (s, mut store) = stem(8, &[2, 4], 4, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let img: Vec<f64> = (0..64).map(|_| rng.gen::<f64>()).collect();
    let weights: Vec<(Vec<f64>, Vec<f64>)> = [16usize, 4]
        .iter()
        .map(|&t| {
            let w: Vec<f64> = (0..t * 4).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let v: Vec<f64> = (0..t * 4).map(|_| rng.gen_range(-1.0..1.0)).collect();
            (w, v)
        })
        .collect();
    let f = |g: &mut Graph, store: &ParamStore| {
        let fs = s.featurize(g, store, &[&img])?;
        let mut total = None;
        for (sc, (w, v)) in fs.scales.iter().zip(&weights) {
            let n = sc.height * sc.width;
            let wc = g.constant(&[1, n, 4], w.clone())?;
            let vc = g.constant(&[1, n, 4], v.clone())?;
            let a = g.mul(sc.tokens, wc)?;
            let a = g.sum(a);
            let b = g.mul(sc.pos, vc)?;
            let b = g.sum(b);
            let t = g.add(a, b)?;
            total = Some(match total {
                None => t,
                Some(acc) => g.add(acc, t)?,
            });
        }
        Ok(total.unwrap())
    };
    let report = finite_diff_check(&mut store, f, &GradCheckOptions::default(), |_| true).unwrap();
    assert!(report.passed(), "{}", report.summary());
}

#[test]
fn bad_strides_are_rejected() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut store = ParamStore::new();
    assert!(Stem::new(&mut store, &mut rng, 32, &[3], 8).is_err());
    assert!(Stem::new(&mut store, &mut rng, 32, &[8, 4], 8).is_err());
    assert!(Stem::new(&mut store, &mut rng, 32, &[], 8).is_err());
    assert!(Stem::new(&mut store, &mut rng, 32, &[0], 8).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn grid_side_is_canvas_over_stride(exps in proptest::collection::btree_set(0u32..4, 1..4), mult in 1usize..4) {
        let strides: Vec<usize> = exps.iter().map(|e| 1usize << e).collect();
        let canvas = 8 * mult;
        let (s, store) = stem(canvas, &strides, 4, 5);
        let img = vec![0.25; canvas * canvas];
        let mut g = Graph::new();
        let f = s.featurize(&mut g, &store, &[&img]).unwrap();
        for (sc, &r) in f.scales.iter().zip(&strides) {
            prop_assert_eq!(sc.height, canvas / r);
            prop_assert_eq!(sc.width, canvas / r);
            prop_assert_eq!(sc.len(), (canvas / r) * (canvas / r));
        }
    }
}
