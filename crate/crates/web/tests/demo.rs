use roboaug_web::{composite_preview_impl, loss_curve_impl, pr_explorer_impl};

#[test]
fn preview_panels_agree_with_the_mask() {
    let p = composite_preview_impl(32, 4, Some("weathered oak planks".into())).unwrap();
    assert_eq!((p.width, p.height), (96, 32));
    assert_eq!(p.rgba.len(), 96 * 32 * 4);
    let px = |x: usize, y: usize| &p.rgba[(y * 96 + x) * 4..(y * 96 + x) * 4 + 3];
    let mut inside = 0;
    for y in 0..32 {
        for x in 0..32 {
            if px(32 + x, y)[0] == 255 {
                inside += 1;
                assert_eq!(px(x, y), px(64 + x, y));
            }
        }
    }
    assert!(inside > 0);
    assert!(composite_preview_impl(20, 0, None).is_err());
    assert!(!composite_preview_impl(16, 1, None).unwrap().prompt.is_empty());
}

#[test]
fn loss_curve_is_finite_and_positive() {
    let temps = [0.03, 0.07, 0.2, 1.0];
    let curve = loss_curve_impl(1, 8, 2, 4, 0.3, &temps).unwrap();
    assert_eq!(curve.len(), 4);
    assert!(curve.iter().all(|l| l.is_finite() && *l >= 0.0));
    assert!(loss_curve_impl(1, 1, 2, 4, 0.3, &temps).is_err());
}

#[test]
fn pr_explorer_matches_hand_values() {
    let v: serde_json::Value = serde_json::from_str(&pr_explorer_impl("TFT", 2).unwrap()).unwrap();
    assert_eq!(v["ap"].as_f64().unwrap(), 0.5 + 0.5 * (2.0 / 3.0));
    assert_eq!(v["points"].as_array().unwrap().len(), 3);
    let v: serde_json::Value = serde_json::from_str(&pr_explorer_impl("TT", 2).unwrap()).unwrap();
    assert_eq!(v["ap"].as_f64().unwrap(), 1.0);
    assert!(pr_explorer_impl("TTT", 2).is_err());
    assert!(pr_explorer_impl("TX", 2).is_err());
}
