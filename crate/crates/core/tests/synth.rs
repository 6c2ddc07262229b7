use pathonet::annotation::CellClass;
use pathonet::synth::{generate_tile, masks_may_touch, ClassStyle, SynthConfig, SynthError};

fn only(counts: [usize; 3]) -> SynthConfig {
    let mut cfg = SynthConfig::default();
    for (s, n) in cfg.classes.iter_mut().zip(counts) {
        s.count = (n, n);
    }
    cfg
}

#[test]
fn zero_cells_is_background() {
    let cfg = SynthConfig {
        noise_amplitude: 0,
        ..only([0, 0, 0])
    };
    let tile = generate_tile(&cfg).unwrap();
    assert!(tile.cells.is_empty());
    assert!(tile.image.pixels().all(|p| p.0 == cfg.background));
}

#[test]
fn same_seed_same_tile() {
    let cfg = SynthConfig::default().with_seed(99);
    let a = generate_tile(&cfg).unwrap();
    let b = generate_tile(&cfg).unwrap();
    assert_eq!(a.image.as_raw(), b.image.as_raw());
    assert_eq!(a.annotations(), b.annotations());
    let c = generate_tile(&cfg.clone().with_seed(100)).unwrap();
    assert_ne!(a.annotations(), c.annotations());
}

#[test]
fn twenty_cells_keep_apart() {
    let cfg = only([8, 8, 4]).with_seed(3);
    let tile = generate_tile(&cfg).unwrap();
    assert_eq!(tile.cells.len(), 20);
    assert_eq!(tile.annotations().len(), 20);
    for (i, a) in tile.cells.iter().enumerate() {
        for b in &tile.cells[i + 1..] {
            assert!(a.annotation.distance(&b.annotation) >= a.radius + b.radius);
            assert!(!masks_may_touch(a, b));
        }
    }
    let per_class = |c| tile.cells.iter().filter(|s| s.annotation.class == c).count();
    assert_eq!(per_class(CellClass::Immunopositive), 8);
    assert_eq!(per_class(CellClass::Lymphocyte), 4);
}

#[test]
fn counts_and_bounds_hold_for_many_seeds() {
    for seed in 0..40 {
        let cfg = SynthConfig::default().with_seed(seed);
        let tile = generate_tile(&cfg).unwrap();
        let n = tile.cells.len();
        assert!((22..=46).contains(&n), "{n} cells");
        for c in &tile.cells {
            let style: &ClassStyle = &cfg.classes[c.annotation.class.channel()];
            assert!(c.radius >= style.radius.0 && c.radius <= style.radius.1);
            assert!(c.annotation.x >= 9 && c.annotation.x < 256 - 9);
            assert!(c.annotation.y >= 9 && c.annotation.y < 256 - 9);
        }
    }
}

#[test]
fn overlap_mode_produces_touching_pairs() {
    let cfg = SynthConfig {
        overlap_probability: 0.3,
        ..SynthConfig::default().with_seed(5)
    };
    let touching: usize = (0..10)
        .map(|s| {
            let t = generate_tile(&cfg.clone().with_seed(s)).unwrap();
            let mut k = 0;
            for (i, a) in t.cells.iter().enumerate() {
                for b in &t.cells[i + 1..] {
                    if a.annotation.distance(&b.annotation) < a.radius + b.radius {
                        assert!(a.annotation.distance(&b.annotation) >= 1.0);
                        k += 1;
                    }
                }
            }
            k
        })
        .sum();
    assert!(touching > 0);
}

#[test]
fn invalid_configs() {
    let mut cfg = SynthConfig::default();
    cfg.classes[0].radius = (1.0, 3.0);
    assert!(matches!(generate_tile(&cfg), Err(SynthError::Config(_))));
    let cfg = SynthConfig {
        overlap_probability: 1.5,
        ..Default::default()
    };
    assert!(matches!(generate_tile(&cfg), Err(SynthError::Config(_))));
    let cfg = SynthConfig {
        tile_size: 64,
        ..only([200, 0, 0])
    };
    assert!(matches!(generate_tile(&cfg), Err(SynthError::InfeasiblePacking { .. })));
}
