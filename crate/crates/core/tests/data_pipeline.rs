use graphcnn::data::{
    add_awgn, decode_pgm, encode_pgm, extract_patches, load_image, load_manifest, save_image, synthetic_image,
    GrayImage, NoiseConfig, PatchSet,
};
use graphcnn::Error;

#[test]
fn pgm_and_png_round_trip_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let img = synthetic_image(23, 17, 4);
    for name in ["a.pgm", "a.png"] {
        let p = dir.path().join(name);
        save_image(&img, &p).unwrap();
        assert_eq!(load_image(&p).unwrap(), img, "{name}");
    }
    // a PNG written from a decoded PGM carries the same bytes
    let via = load_image(dir.path().join("a.pgm")).unwrap();
    save_image(&via, dir.path().join("b.png")).unwrap();
    assert_eq!(load_image(dir.path().join("b.png")).unwrap().to_u8(), img.to_u8());
}

#[test]
fn pgm_header_by_hand() {
    let img = GrayImage::from_u8(2, 3, &[0, 1, 2, 253, 254, 255]).unwrap();
    let bytes = encode_pgm(&img);
    assert_eq!(&bytes[..11], b"P5\n3 2\n255\n");
    assert_eq!(&bytes[11..], &[0, 1, 2, 253, 254, 255]);
    let commented = b"P5\n# made by hand\n3 2\n255\n\x00\x01\x02\xfd\xfe\xff";
    assert_eq!(decode_pgm(commented, "x.pgm".as_ref()).unwrap(), img);
}

#[test]
fn malformed_images_are_format_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cases: [(&str, &[u8]); 3] = [
        ("short.pgm", b"P5\n4 4\n255\n\x00\x01"),
        ("deep.pgm", b"P5\n1 1\n65535\n\x00\x01"),
        ("text.png", b"not an image at all"),
    ];
    for (name, bytes) in cases {
        let p = dir.path().join(name);
        std::fs::write(&p, bytes).unwrap();
        assert!(matches!(load_image(&p), Err(Error::Format { .. })), "{name}");
    }
    assert!(matches!(load_image(dir.path().join("missing.pgm")), Err(Error::Io { .. })));
}

#[test]
fn awgn_statistics_and_reproducibility() {
    let img = GrayImage::filled(256, 256, 0.5);
    let cfg = NoiseConfig { sigma: 25.0, seed: 3 };
    let noisy = add_awgn(&img, cfg).unwrap();
    let d: Vec<f64> = noisy.pixels.iter().map(|&p| f64::from(p) - 0.5).collect();
    let n = d.len() as f64;
    let mean = d.iter().sum::<f64>() / n;
    let sd = (d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    // 65536 samples: standard errors are σ/256 for the mean and about σ/362 for the deviation
    let sigma = 25.0 / 255.0;
    assert!(mean.abs() < 4.0 * sigma / 256.0, "mean {mean}");
    assert!((sd - sigma).abs() < 4.0 * sigma / 362.0, "sd {sd}");
    assert_eq!(add_awgn(&img, cfg).unwrap(), noisy);
    assert_ne!(add_awgn(&img, NoiseConfig { seed: 4, ..cfg }).unwrap(), noisy);
    assert_eq!(add_awgn(&img, NoiseConfig { sigma: 0.0, seed: 3 }).unwrap(), img);
    assert!(matches!(add_awgn(&img, NoiseConfig { sigma: -1.0, seed: 3 }), Err(Error::Config(_))));
}

#[test]
fn patch_grid_and_shuffle() {
    let img = synthetic_image(40, 50, 1);
    let set = extract_patches(&img, 16, 8).unwrap();
    // rows 0,8,16,24 and cols 0,8,..,32
    assert_eq!(set.len(), 4 * 5);
    let order = set.iterate(9);
    assert_eq!(order, set.iterate(9));
    assert_ne!(order, set.iterate(10));
    let mut sorted = order.clone();
    sorted.sort_by_key(|p| (p.image, p.row, p.col));
    assert_eq!(sorted, set.patches);
    let p = set.get(std::slice::from_ref(&img), order[0]).unwrap();
    assert_eq!(p.get(0, 0), img.get(order[0].row, order[0].col));
    assert!(matches!(PatchSet::from_images(&[img], 64, 8), Err(Error::Sizing(_))));
}

#[test]
fn manifest_resolves_relative_paths_and_skips_comments() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::create_dir(dir.path().join("imgs")).unwrap();
    save_image(&synthetic_image(8, 8, 1), dir.path().join("imgs/one.pgm")).unwrap();
    save_image(&synthetic_image(9, 7, 2), dir.path().join("imgs/two.png")).unwrap();
    let manifest = dir.path().join("list.txt");
    std::fs::write(&manifest, "# training set\nimgs/one.pgm\n\n  imgs/two.png  # second\n").unwrap();
    let loaded = load_manifest(&manifest).unwrap();
    assert_eq!(loaded.len(), 2);
    assert_eq!((loaded[1].1.height, loaded[1].1.width), (9, 7));
    std::fs::write(&manifest, "# nothing\n").unwrap();
    assert!(load_manifest(&manifest).is_err());
}
