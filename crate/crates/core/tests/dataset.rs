use std::collections::HashMap;

use capgan::dataset::{
    caption_from_seed, class_for_index, generate_caption, render_scene, render_scene_bytes,
    synthesize_dataset, Cell, Color, Dataset, Kind, Manifest, Object, Relation, ShapeScene, Size, BACKGROUNDS,
    MANIFEST, NUM_CLASSES,
};
use capgan::dataset::scene::byte_to_unit;
use capgan::textenc::Vocab;
use capgan::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn object(kind: Kind, color: Color, row: u8, col: u8, size: Size) -> Object {
    Object {
        kind,
        color,
        cell: Cell { row, col },
        size,
    }
}

fn single(obj: Object) -> ShapeScene {
    ShapeScene {
        objects: vec![obj],
        relation: None,
        background: 0,
    }
}

fn pixel(image: &diffcomp::Tensor<f32>, ch: usize, i: usize, j: usize) -> f32 {
    let r = image.shape()[1];
    image.data()[(ch * r + i) * r + j]
}

#[test]
fn center_pixel_is_shape_color_and_corner_is_background() {
    let scene = single(object(Kind::Circle, Color::Red, 1, 1, Size::Large));
    let img = render_scene(&scene, 16).unwrap();
    assert_eq!(img.shape(), &[3, 16, 16]);
    let red = [1.0, -1.0, -1.0];
    for ch in 0..3 {
        assert_eq!(pixel(&img, ch, 8, 8), red[ch]);
        assert_eq!(pixel(&img, ch, 0, 0), byte_to_unit(BACKGROUNDS[0]));
    }
}

#[test]
fn rendering_is_deterministic_and_in_range() {
    let scene = ShapeScene {
        objects: vec![
            object(Kind::Triangle, Color::Cyan, 0, 2, Size::Large),
            object(Kind::Square, Color::Black, 2, 2, Size::Small),
        ],
        relation: Some(Relation::Above),
        background: 3,
    };
    for r in [16, 32, 64] {
        let a = render_scene(&scene, r).unwrap();
        let b = render_scene(&scene, r).unwrap();
        assert_eq!(a.data(), b.data());
        assert!(a.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }
    assert!(matches!(render_scene(&scene, 20), Err(Error::Invalid(_))));
}

#[test]
fn circle_pixel_count_matches_area() {
    let r = 32;
    for size in [Size::Small, Size::Large] {
        let obj = object(Kind::Circle, Color::White, 1, 1, size);
        let bytes = render_scene_bytes(&single(obj), r).unwrap();
        let plane = r * r;
        let count = (0..plane).filter(|&p| bytes[p] == 255 && bytes[plane + p] == 255).count() as f64;
        let radius = size.radius(r);
        let area = std::f64::consts::PI * radius * radius;
        println!("{size:?}: {count} pixels vs area {area:.1}");
        assert!((count - area).abs() <= 0.15 * area);
    }
}

#[derive(Debug, PartialEq)]
struct Parsed {
    objects: Vec<(String, String, Option<String>)>,
    relation: Option<String>,
}

/// Independent reading of the caption grammar.
fn parse(words: &[&str]) -> Option<Parsed> {
    const SIZES: [&str; 2] = ["small", "large"];
    let mut objects = Vec::new();
    let mut relation = None;
    let mut i = 0;
    loop {
        if words.get(i) != Some(&"a") {
            return None;
        }
        i += 1;
        let size = SIZES.contains(words.get(i)?).then(|| words[i].to_string());
        if size.is_some() {
            i += 1;
        }
        objects.push((words.get(i)?.to_string(), words.get(i + 1)?.to_string(), size));
        i += 2;
        match words.get(i) {
            None => break,
            Some(&w @ ("above" | "below")) if relation.is_none() => {
                relation = Some(w.to_string());
                i += 1;
            }
            Some(&w @ ("left" | "right")) if relation.is_none() && words.get(i + 1) == Some(&"of") => {
                relation = Some(format!("{w}_of"));
                i += 2;
            }
            _ => return None,
        }
    }
    Some(Parsed { objects, relation })
}

#[test]
fn caption_grammar_examples() {
    let vocab = Vocab::standard();
    let blue_square = single(object(Kind::Square, Color::Blue, 1, 1, Size::Large));
    let mut seen_plain = false;
    for seed in 0..64 {
        let text = vocab.decode(&caption_from_seed(&blue_square, &vocab, seed).unwrap());
        assert!(text == "a blue square" || text == "a large blue square", "{text}");
        seen_plain |= text == "a blue square";
    }
    assert!(seen_plain);

    let pair = ShapeScene {
        objects: vec![
            object(Kind::Circle, Color::Red, 0, 1, Size::Large),
            object(Kind::Triangle, Color::Green, 2, 1, Size::Small),
        ],
        relation: Some(Relation::Above),
        background: 1,
    };
    let tokens = generate_caption(&pair, &vocab, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    assert_eq!(tokens.last(), Some(&capgan::textenc::END));
    assert_eq!(vocab.decode(&tokens), "a red circle above a green triangle");
}

#[test]
fn every_caption_parses_back_to_its_scene() {
    let dir = tempfile::tempdir().unwrap();
    synthesize_dataset(480, 16, 11, dir.path()).unwrap();
    let data = Dataset::open(dir.path()).unwrap();
    for i in 0..data.len() {
        let rec = data.record(i);
        let text = data.vocab.decode(&rec.tokens);
        let words: Vec<&str> = text.split(' ').collect();
        let parsed = parse(&words).unwrap_or_else(|| panic!("unparseable caption `{text}`"));
        assert_eq!(parsed.objects.len(), rec.scene.objects.len(), "{text}");
        for ((color, kind, size), obj) in parsed.objects.iter().zip(&rec.scene.objects) {
            assert_eq!(color, obj.color.word());
            assert_eq!(kind, obj.kind.word());
            if let Some(size) = size {
                assert_eq!(size, obj.size.word());
            }
        }
        let expected_rel = rec.scene.relation.map(|r| serde_json::to_value(r).unwrap().as_str().unwrap().to_string());
        assert_eq!(parsed.relation, expected_rel);
        assert_eq!(rec.label, rec.scene.class_label());
        assert_eq!(caption_from_seed(&rec.scene, &data.vocab, rec.caption_seed).unwrap(), rec.tokens);
        if let (Some(rel), [a, b]) = (rec.scene.relation, rec.scene.objects.as_slice()) {
            assert!(rel.holds(a.cell, b.cell));
        }
    }
}

#[test]
fn class_histogram_is_balanced() {
    let mut counts = HashMap::new();
    for i in 0..2400 {
        *counts.entry(class_for_index(3, i)).or_insert(0usize) += 1;
    }
    assert_eq!(counts.len(), NUM_CLASSES);
    for (class, n) in counts {
        assert!((90..=110).contains(&n), "class {class}: {n}");
    }
}

#[test]
fn synthesis_is_deterministic() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    synthesize_dataset(50, 16, 7, a.path()).unwrap();
    synthesize_dataset(50, 16, 7, b.path()).unwrap();
    let read = |d: &std::path::Path| std::fs::read(d.join(MANIFEST)).unwrap();
    assert_eq!(read(a.path()), read(b.path()));
    let (ma, mb) = (Manifest::read(a.path()).unwrap(), Manifest::read(b.path()).unwrap());
    for (ra, rb) in ma.records.iter().zip(&mb.records) {
        assert_eq!(
            std::fs::read(a.path().join(&ra.image)).unwrap(),
            std::fs::read(b.path().join(&rb.image)).unwrap()
        );
    }
    let c = tempfile::tempdir().unwrap();
    synthesize_dataset(50, 16, 8, c.path()).unwrap();
    assert_ne!(read(a.path()), read(c.path()));
}

#[test]
fn single_sample_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let header = synthesize_dataset(1, 32, 0, dir.path()).unwrap();
    assert_eq!(header.count, 1);
    let m = Manifest::read(dir.path()).unwrap();
    assert_eq!(m.records.len(), 1);
    let files: Vec<_> = walk(dir.path()).into_iter().filter(|p| p.extension().is_some_and(|e| e == "pgim")).collect();
    assert_eq!(files.len(), 1);
}

fn walk(dir: &std::path::Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.is_dir() {
            out.extend(walk(&path));
        } else {
            out.push(path);
        }
    }
    out
}

#[test]
fn load_batch_round_trips_and_keeps_order() {
    let dir = tempfile::tempdir().unwrap();
    synthesize_dataset(6, 16, 4, dir.path()).unwrap();
    let m = Manifest::read(dir.path()).unwrap();
    let batch = m.load_batch(&[3, 1]).unwrap();
    assert_eq!(batch.images.shape(), &[2, 3, 16, 16]);
    for (row, &i) in [3usize, 1].iter().enumerate() {
        let rec = &m.records[i];
        let expected = render_scene(&rec.scene, 16).unwrap();
        assert_eq!(batch.images.slice_rows(row, 1).unwrap().data(), expected.data());
        assert_eq!(batch.labels[row], rec.label);
        assert_eq!(&batch.captions.row(row)[..rec.tokens.len()], rec.tokens.as_slice());
        assert!(batch.captions.row(row)[rec.tokens.len()..].iter().all(|&t| t == 0));
        assert_eq!(batch.captions.lengths[row], rec.tokens.len());
    }
}

#[test]
fn truncated_image_is_a_format_error() {
    let dir = tempfile::tempdir().unwrap();
    synthesize_dataset(3, 16, 4, dir.path()).unwrap();
    let m = Manifest::read(dir.path()).unwrap();
    let path = dir.path().join(&m.records[2].image);
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
    let err = m.load_batch(&[0, 2]).unwrap_err();
    assert_eq!(err.category(), "format", "{err}");
    std::fs::write(&path, &bytes[..5]).unwrap();
    assert_eq!(m.load_batch(&[2]).unwrap_err().category(), "format");
    std::fs::remove_file(&path).unwrap();
    assert_eq!(m.load_batch(&[2]).unwrap_err().category(), "io");
}

#[test]
fn resolution_mismatch_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    synthesize_dataset(2, 16, 4, dir.path()).unwrap();
    let m = Manifest::read(dir.path()).unwrap();
    let other = capgan::dataset::RawImage::from_tensor(&render_scene(&m.records[0].scene, 32).unwrap()).unwrap();
    other.write(&dir.path().join(&m.records[0].image)).unwrap();
    assert!(m.load_batch(&[0]).is_err());
}

#[test]
fn bad_magic_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.pgim");
    std::fs::write(&path, b"PNGX\x01\x00\x10\x00\x10\x00\x03").unwrap();
    assert_eq!(capgan::dataset::read_image(&path).unwrap_err().category(), "format");
}

#[test]
fn invalid_scenes_are_rejected() {
    let a = object(Kind::Circle, Color::Red, 1, 1, Size::Large);
    let b = object(Kind::Square, Color::Blue, 1, 1, Size::Small);
    let same_cell = ShapeScene {
        objects: vec![a, b],
        relation: Some(Relation::Above),
        background: 0,
    };
    assert!(same_cell.validate().is_err());
    let wrong_rel = ShapeScene {
        objects: vec![a, object(Kind::Square, Color::Blue, 0, 1, Size::Small)],
        relation: Some(Relation::Above),
        background: 0,
    };
    assert!(wrong_rel.validate().is_err());
}

/// Foreground pixel offsets relative to the cell center, collected per cell.
fn mask(obj: Object, r: usize) -> Vec<(i64, i64)> {
    let bytes = render_scene_bytes(&single(obj), r).unwrap();
    let bg = BACKGROUNDS[0];
    let (cx, cy) = obj.cell.center(r);
    let mut out = Vec::new();
    for i in 0..r {
        for j in 0..r {
            if bytes[i * r + j] != bg || bytes[r * r + i * r + j] != bg {
                out.push((j as i64 - cx.floor() as i64, i as i64 - cy.floor() as i64));
            }
        }
    }
    out
}

#[test]
fn shapes_are_unambiguous_at_every_resolution() {
    for r in [16, 32, 64] {
        let mut distinct = Vec::new();
        for kind in Kind::ALL {
            for size in [Size::Small, Size::Large] {
                let reference = mask(object(kind, Color::White, 1, 1, size), r);
                for row in 0..3 {
                    for col in 0..3 {
                        assert_eq!(mask(object(kind, Color::White, row, col, size), r), reference, "{kind:?} {size:?} R={r}");
                    }
                }
                assert!(!distinct.contains(&reference), "{kind:?} {size:?} R={r} duplicates another shape");
                distinct.push(reference);
            }
        }
    }
}
