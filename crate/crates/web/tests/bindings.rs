// Success paths only: building a JsError calls into JS, which panics off-wasm.

use endoreport_web::{lr_curve, score, segment, scene};

#[test]
fn scene_is_rgba_with_a_box_inside_the_image() {
    let s = scene("colon", "polyp", true, 1, 2, 7, 64).unwrap_or_else(|_| panic!("render failed"));
    assert_eq!(s.size(), 64);
    let px = s.rgba();
    assert_eq!(px.len(), 64 * 64 * 4);
    assert!(px.chunks(4).all(|p| p[3] == 255));
    let info: serde_json::Value = serde_json::from_str(&s.info()).unwrap();
    assert_eq!(info["caption"], "large polyp colon");
    assert_eq!(info["sentence"], "A large polyp was found in the colon.");
    let b = &info["box"];
    assert!(b["x0"].as_u64().unwrap() < b["x1"].as_u64().unwrap());
    assert!(b["y1"].as_u64().unwrap() <= 64);
}

#[test]
fn normal_scene_has_no_box() {
    let s = scene("stomach", "normal", false, 0, 0, 1, 64).unwrap_or_else(|_| panic!("render failed"));
    let info: serde_json::Value = serde_json::from_str(&s.info()).unwrap();
    assert!(info["box"].is_null());
    assert_eq!(info["caption"], "normal stomach");
}

#[test]
fn lr_curve_warms_up_then_decays_to_the_floor() {
    let lr = lr_curve(1000, 6e-4, 0.05, 0.1).unwrap_or_else(|_| panic!("bad schedule"));
    assert_eq!(lr.len(), 1000);
    assert!((lr[49] - 6e-4).abs() < 1e-15);
    assert!(lr[..50].windows(2).all(|w| w[0] < w[1]));
    assert!(lr[50..].windows(2).all(|w| w[0] >= w[1]));
    assert!((lr[999] - 6e-5).abs() / 6e-5 < 1e-4);
}

#[test]
fn identical_texts_score_one_and_lexicon_keeps_polyp_whole() {
    let r: serde_json::Value = serde_json::from_str(&score("a polyp in the colon", "a polyp in the colon").unwrap_or_else(|_| panic!())).unwrap();
    assert_eq!(r["rouge"], 1.0);
    assert_eq!(r["bleu4"], 1.0);
    let plain: Vec<String> = serde_json::from_str(&segment("a polyp", false).unwrap_or_else(|_| panic!())).unwrap();
    let lex: Vec<String> = serde_json::from_str(&segment("a polyp", true).unwrap_or_else(|_| panic!())).unwrap();
    assert_eq!(plain.concat(), "a polyp");
    assert_eq!(lex, ["a", " polyp"]);
    assert!(plain.len() > lex.len());
}
