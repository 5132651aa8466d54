use gaussianssc_demo::{anchor_window_weights, build_preview, refine, test_plane};

#[test]
fn preview_matches_the_desk_grid_and_is_seeded() {
    let a = build_preview(4, 0.05, 0.1, 0.2).unwrap();
    let b = build_preview(4, 0.05, 0.1, 0.2).unwrap();
    assert_eq!((a.grid_x(), a.grid_y()), (64, 64));
    assert_eq!(a.top().len(), 64 * 64);
    assert_eq!(a.image().len(), a.image_w() * a.image_h());
    assert_eq!(a.top(), b.top());
    assert_eq!(a.image(), b.image());
    assert_eq!(a.queries(), b.queries());
    assert!(a.queries() > 0);
    assert!(a.seeds().iter().filter(|&&s| s == 1).count() > 0);
    assert!(build_preview(0, 0.05, 0.1, 1.0).is_err());
}

#[test]
fn refinement_endpoints_reproduce_branches() {
    let [input, local, global, local_only] = refine(16, 2, 1.0, 1.0).unwrap();
    assert_eq!(input, test_plane(16, 2).into_data());
    assert_eq!(local_only, local);
    let [_, _, global_again, global_only] = refine(16, 2, 1.0, 0.0).unwrap();
    assert_eq!(global_only, global_again);
    assert_eq!(global, global_again);
    assert!(refine(16, 2, 1.0, 1.5).is_err());
}

#[test]
fn anchor_window_is_normalized_and_leans_toward_the_offset() {
    let w = anchor_window_weights(0.8, 1.3, 0.4, 0.0, 2).unwrap();
    assert_eq!(w.len(), 25);
    assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    let peak = (0..25).max_by(|&a, &b| w[a].total_cmp(&w[b])).unwrap();
    assert_eq!(peak, 12);
    assert!(w[13] > w[11]);
    assert!((w[7] - w[17]).abs() < 1e-15);
}
