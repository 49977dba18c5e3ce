use evdeblur_core::edi::{reconstruct_mid, EdiParams};
use evdeblur_core::events::read_events;
use evdeblur_core::metrics::psnr;
use evdeblur_core::network::{evaluate, evaluate_blur, load_samples, ModelConfig, Weights};
use evdeblur_core::simulator::{make_dataset, DatasetSpec, Manifest};
use evdeblur_core::Image;

fn small_spec(posterize: bool) -> DatasetSpec {
    DatasetSpec {
        width: 32,
        height: 32,
        n_scenes: 6,
        train_fraction: 0.5,
        posterize,
        ..DatasetSpec::toy(11)
    }
}

#[test]
fn dataset_on_disk_reloads_through_its_manifests() {
    let dir = tempfile::tempdir().unwrap();
    let spec = small_spec(false);
    let ds = make_dataset(
        &spec.scene_configs(),
        spec.contrast_c,
        spec.train_fraction,
        dir.path(),
        2,
    )
    .unwrap();
    let train = Manifest::read(&ds.train_path).unwrap();
    let test = Manifest::read(&ds.test_path).unwrap();
    assert_eq!(train, ds.train);
    assert_eq!((train.entries.len(), test.entries.len()), (3, 3));
    assert_eq!(test.contrast_c().unwrap(), Some(spec.contrast_c));

    let cfg = ModelConfig::default();
    let samples = load_samples(&test, &cfg, 2).unwrap();
    assert_eq!(samples.len(), 3);
    for (s, e) in samples.iter().zip(&test.entries) {
        assert_eq!(s.name, e.name());
        assert_eq!(s.gt.shape(), &[1, 1, 32, 32]);
        assert_eq!(s.blur_image().unwrap(), Image::read_pnm(&e.blur).unwrap());
    }

    // Zero weights reproduce the input, so the network scores equal the blur scores.
    let zero = evaluate(&Weights::zeros(&cfg).unwrap(), &cfg, &samples, 2).unwrap();
    assert_eq!(zero, evaluate_blur(&samples).unwrap());
}

#[test]
fn stored_noiseless_scenes_are_recovered_by_edi() {
    let dir = tempfile::tempdir().unwrap();
    let spec = small_spec(true);
    let ds = make_dataset(
        &spec.scene_configs(),
        spec.contrast_c,
        spec.train_fraction,
        dir.path(),
        1,
    )
    .unwrap();
    let p = EdiParams::new(spec.contrast_c).with_samples(spec.n_frames);
    for e in ds.train.entries.iter().chain(&ds.test.entries) {
        let blur = Image::read_pnm(&e.blur).unwrap();
        let rec = reconstruct_mid(&blur, &read_events(&e.events).unwrap(), &p).unwrap();
        let db = psnr(&rec, &Image::read_pnm(&e.gt).unwrap()).unwrap();
        assert!(db > 40.0, "{}: {db:.2} dB", e.name());
    }
}

#[test]
fn threads_do_not_change_the_dataset() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let spec = small_spec(false);
    make_dataset(&spec.scene_configs(), spec.contrast_c, spec.train_fraction, a.path(), 1).unwrap();
    make_dataset(&spec.scene_configs(), spec.contrast_c, spec.train_fraction, b.path(), 3).unwrap();
    for i in 0..spec.n_scenes {
        for f in [
            format!("{i:04}_blur.pgm"),
            format!("{i:04}_gt.pgm"),
            format!("{i:04}.evt"),
        ] {
            let x = std::fs::read(a.path().join("scenes").join(&f)).unwrap();
            let y = std::fs::read(b.path().join("scenes").join(&f)).unwrap();
            assert_eq!(x, y, "{f}");
        }
    }
}
