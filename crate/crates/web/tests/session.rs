use shunted::model::{Checkpoint, Model, ModelConfig, Variant};
use shunted_web::{report_json, Session};

#[test]
fn report_matches_core_numbers() {
    let v: serde_json::Value = serde_json::from_str(&report_json("desk", 64).unwrap()).unwrap();
    assert_eq!(v["params"], 118_020);
    assert_eq!(v["trail"][1]["h"], 8);
    let v: serde_json::Value = serde_json::from_str(&report_json("small", 224).unwrap()).unwrap();
    assert_eq!(v["published"]["params_m"], 22.4);
    assert!(report_json("tiny", 225).unwrap_err().contains("divisible"));
    assert!(report_json("huge", 224).is_err());
}

#[test]
fn session_maps_are_row_stochastic() {
    let mut s = Session::random(3).unwrap();
    for class in 0..4 {
        s.sample(7, class).unwrap();
        assert_eq!(s.label(), class);
        let p = s.probabilities();
        assert_eq!(p.len(), 4);
        assert!((p.iter().sum::<f32>() - 1.0).abs() < 1e-5);
    }
    assert_eq!(s.image_rgba().len(), 64 * 64 * 4);
    // desk: 2 heads per block, one block per stage
    let maps = s.maps();
    assert_eq!(maps.len(), 4);
    assert_eq!((maps[0].rate, maps[0].key_grid), (2, (8, 8)));
    assert_eq!((maps[1].rate, maps[1].key_grid), (4, (4, 4)));
    assert_eq!(maps[2].query_grid, (8, 8));
    for m in maps {
        let keys = m.key_grid.0 * m.key_grid.1;
        for row in m.data.chunks_exact(keys) {
            assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-4);
        }
    }
    let row = s.attention_row(1, 0.5, 0.99).unwrap();
    assert_eq!(row.len(), 16);
    assert_eq!(row.iter().copied().fold(0.0, f32::max), 1.0);
    assert!(s.attention_row(9, 0.0, 0.0).is_err());
    assert!(s.sample(0, 4).is_err());
}

#[test]
fn checkpoint_session_uses_the_stored_weights() {
    let cfg = ModelConfig::variant(Variant::Desk);
    let (_, store) = Model::build::<f32>(&cfg, 5).unwrap();
    let bytes = Checkpoint::from_store(&store).to_bytes().unwrap();
    let json = serde_json::to_string(&cfg).unwrap();
    let a = Session::from_checkpoint(&bytes, &json).unwrap();
    let b = Session::random(5).unwrap();
    assert_eq!(a.probabilities(), b.probabilities());
    assert!(Session::from_checkpoint(&bytes[..10], &json).is_err());
}
