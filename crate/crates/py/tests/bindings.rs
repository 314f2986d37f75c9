use std::collections::HashMap;

use portrait::{load_schema, PyGenerator};
use portrait_core::checkpoint::save_checkpoint;
use portrait_core::dataset::{decode_png, encode_png, ToyDatasetSpec};
use portrait_core::training::{ModelState, TrainConfig};
use portrait_core::AttributeSchema;

fn checkpoint(dir: &std::path::Path) {
    let schema = AttributeSchema::toy();
    let mut cfg = TrainConfig::toy();
    cfg.model.base_filters = 2;
    cfg.model.disc_base_filters = 2;
    cfg.model.hidden_dim = 4;
    let state = ModelState::init(&cfg, &schema, None).unwrap();
    save_checkpoint(&state, &cfg, &schema, dir).unwrap();
}

#[test]
fn schemas_load() {
    assert_eq!(load_schema(None, false).unwrap().slot_count(), 82);
    assert_eq!(load_schema(None, true).unwrap().type_count(), 3);
    assert!(load_schema(Some("/nonexistent.toml"), false).is_err());
}

#[test]
fn generator_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    checkpoint(dir.path());
    let g = PyGenerator::load(dir.path().to_str().unwrap()).unwrap();
    let photo = encode_png(&ToyDatasetSpec::new(1, 1).sample(0).photo).unwrap();
    let attrs = HashMap::from([("hair_color".to_string(), "Black".to_string())]);
    let a = g.generate_png(&photo, &attrs).unwrap();
    assert_eq!(a, g.generate_png(&photo, &attrs).unwrap());
    assert_eq!(decode_png(&a, 64).unwrap().dim(), (3, 64, 64));
    let bad = HashMap::from([("HairColor".to_string(), "Green".to_string())]);
    assert!(g.generate_png(&photo, &bad).is_err());
    assert!(g.generate_png(b"junk", &attrs).is_err());
}
