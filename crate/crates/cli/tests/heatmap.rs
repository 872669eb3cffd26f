use crossrisk_cli::heatmap::{gray_levels, pair_bytes, pgm_bytes};
use proptest::prelude::*;

#[test]
fn constant_map_is_uniform_gray_over_valid_cells() {
    let mask = [true, false, true, true, false, true];
    let levels = gray_levels(&[2.5; 6], &mask);
    assert_eq!(levels, vec![128, 0, 128, 128, 0, 128]);
}

#[test]
fn header_and_layout() {
    // 3 x 2 grid, cell (x, y) at index x * 2 + y.
    let levels = [1, 2, 3, 4, 5, 6];
    let bytes = pgm_bytes(&levels, 3, 2);
    assert_eq!(&bytes[..11], b"P5 3 2 255\n");
    assert_eq!(&bytes[11..], &[1, 3, 5, 2, 4, 6]);
    let pair = pair_bytes(&levels, &[9; 6], 3, 2);
    assert_eq!(&pair[..11], b"P5 7 2 255\n");
    assert_eq!(&pair[11..], &[1, 3, 5, 0, 9, 9, 9, 2, 4, 6, 0, 9, 9, 9]);
}

#[test]
fn extremes_map_to_ends_of_the_range() {
    let levels = gray_levels(&[0.0, 1.0, 0.5, 100.0], &[true, true, true, false]);
    assert_eq!(levels, vec![1, 255, 128, 0]);
}

proptest! {
    #[test]
    fn scaling_is_monotone_and_ignores_invalid(
        values in prop::collection::vec(-10.0f64..10.0, 1..30),
        seed in any::<u64>(),
    ) {
        let mask: Vec<bool> = (0..values.len()).map(|k| (seed >> (k % 64)) & 1 == 1 || k == 0).collect();
        let levels = gray_levels(&values, &mask);
        let mut scrambled = values.clone();
        for (v, m) in scrambled.iter_mut().zip(&mask) {
            if !m {
                *v = 1e6;
            }
        }
        prop_assert_eq!(&levels, &gray_levels(&scrambled, &mask));
        for i in 0..values.len() {
            prop_assert_eq!(levels[i] == 0, !mask[i]);
            for j in 0..values.len() {
                if mask[i] && mask[j] && values[i] < values[j] {
                    prop_assert!(levels[i] <= levels[j]);
                }
            }
        }
    }
}
