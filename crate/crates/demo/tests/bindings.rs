use mergeforge_demo::{decide, mask_sweep_rows, merge_flat};

const DATA: [f32; 6] = [1.0, -0.5, 0.2, 0.9, 0.4, -0.3];

#[test]
fn merge_sums_and_averages_rows() {
    let ta = merge_flat("task_arithmetic", &DATA, 2, 0.5, 0.2).unwrap();
    let expected: Vec<f32> = (0..3).map(|i| 0.5 * (DATA[i] + DATA[i + 3])).collect();
    assert_eq!(ta, expected);
    assert_eq!(merge_flat("average", &DATA, 2, 1.0, 0.2).unwrap(), expected);
    // TIES keeps one entry per task (1.0 and 0.9); they agree in sign.
    let ties = merge_flat("ties", &DATA, 2, 1.0, 0.3).unwrap();
    assert!((ties[0] - 0.95).abs() < 1e-6);
    assert_eq!(&ties[1..], &[0.0, 0.0]);
}

#[test]
fn bad_inputs_are_rejected() {
    assert!(merge_flat("median", &DATA, 2, 1.0, 0.2).is_err());
    assert!(merge_flat("average", &DATA, 4, 1.0, 0.2).is_err());
    assert!(merge_flat("average", &DATA, 0, 1.0, 0.2).is_err());
    assert!(decide(&[]).is_err());
    assert!(decide(&[1.0, f64::NAN]).is_err());
}

#[test]
fn sweep_masks_follow_the_threshold() {
    let rows = mask_sweep_rows("task_arithmetic", &DATA, 2, &[0.0, 1.0, 10.0]).unwrap();
    assert_eq!(rows.len(), 3);
    // Zero keeps every nonzero entry, a huge threshold keeps none here.
    assert_eq!(rows[0].masks, vec![vec![1, 1, 1], vec![1, 1, 1]]);
    assert_eq!(rows[0].selfish_ratio, 0.0);
    assert_eq!(rows[2].masks, vec![vec![0, 0, 0], vec![0, 0, 0]]);
    // At one, only the larger entry of each pair survives.
    assert_eq!(rows[1].masks, vec![vec![1, 1, 0], vec![0, 0, 1]]);
    assert_eq!(rows[1].selfish_ratio, 1.0);
}

#[test]
fn routing_picks_the_first_maximum() {
    let d = decide(&[1.0, 3.0, 3.0]).unwrap();
    assert_eq!(d.selected, 1);
    assert!((d.probabilities.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    assert_eq!(d.probabilities[1], d.probabilities[2]);
}
