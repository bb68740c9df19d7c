use cssr::data::{
    augment_image, encode_idx_images, encode_idx_labels, load_idx, make_open_split, parse_idx_images, render_glyphs,
    write_idx, AugmentSpec, GlyphSpec,
};
use cssr::Error;

#[test]
fn idx_round_trip_through_files() {
    let data = render_glyphs(&GlyphSpec::new(3, 4)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let (i, l) = (dir.path().join("img"), dir.path().join("lbl"));
    write_idx(&data, &i, &l).unwrap();
    let back = load_idx(&i, &l).unwrap();
    assert_eq!(back.labels, data.labels);
    assert_eq!(back.sample_shape, vec![28, 28, 1]);
    for (a, b) in back.inputs.iter().zip(&data.inputs) {
        assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
    }
    // bytes are stable: writing what we read gives the same file
    let i2 = dir.path().join("img2");
    write_idx(&back, &i2, &dir.path().join("lbl2")).unwrap();
    assert_eq!(std::fs::read(&i).unwrap(), std::fs::read(&i2).unwrap());
}

#[test]
fn idx_header_layout() {
    let bytes = encode_idx_images(2, 3, &[0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11]).unwrap();
    assert_eq!(&bytes[..16], &[0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 3]);
    assert_eq!(&encode_idx_labels(&[7, 1])[..], &[0, 0, 8, 1, 0, 0, 0, 2, 7, 1]);
    let (n, r, c, px) = parse_idx_images(&bytes).unwrap();
    assert_eq!((n, r, c, px.len()), (2, 2, 3, 12));
}

#[test]
fn idx_errors_carry_offsets() {
    let bytes = encode_idx_images(2, 2, &[0; 8]).unwrap();
    assert!(matches!(parse_idx_images(&bytes[..bytes.len() - 1]), Err(Error::Format { .. })));
    let mut wrong = bytes.clone();
    wrong[3] = 1;
    assert!(matches!(parse_idx_images(&wrong), Err(Error::Format { offset: 0, .. })));

    let dir = tempfile::tempdir().unwrap();
    let (i, l) = (dir.path().join("i"), dir.path().join("l"));
    std::fs::write(&i, &bytes).unwrap();
    std::fs::write(&l, encode_idx_labels(&[1, 2, 3])).unwrap();
    assert!(matches!(load_idx(&i, &l), Err(Error::Format { offset: 4, .. })));
}

#[test]
fn reference_splits() {
    let expected: [[usize; 6]; 5] = [
        [1, 2, 3, 6, 8, 9],
        [1, 2, 3, 4, 8, 9],
        [2, 3, 4, 6, 8, 9],
        [2, 4, 5, 6, 7, 8],
        [0, 2, 3, 5, 6, 9],
    ];
    for (seed, known) in expected.iter().enumerate() {
        let split = make_open_split(10, 6, seed as u64).unwrap();
        assert_eq!(&split.known_classes[..], known, "trial {seed}");
        assert_eq!(split.unknown_classes.len(), 4);
    }
}

#[test]
fn augmentation_is_seeded_and_bounded() {
    let data = render_glyphs(&GlyphSpec::new(1, 0)).unwrap();
    let spec = AugmentSpec::default();
    let img = data.sample(0);
    let a = augment_image(img, 28, 28, &spec, 42).unwrap();
    let b = augment_image(img, 28, 28, &spec, 42).unwrap();
    assert_eq!(a, b);
    assert!(a.iter().all(|v| (0.0..=1.0).contains(v)));
    let differs = (0..20).any(|s| augment_image(img, 28, 28, &spec, s).unwrap() != a);
    assert!(differs);
    assert_eq!(augment_image(img, 28, 28, &AugmentSpec::disabled(), 3).unwrap(), img);
}
