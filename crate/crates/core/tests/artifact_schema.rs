use std::collections::BTreeSet;

use fortress::model::{train, FeatureMask, TrainConfig, TrainSet};
use serde_json::Value;

fn keys(v: &Value) -> BTreeSet<String> {
    v.as_object().unwrap().keys().cloned().collect()
}

fn strings(v: &Value) -> BTreeSet<String> {
    v.as_array().unwrap().iter().map(|s| s.as_str().unwrap().to_string()).collect()
}

fn check_node(node: &Value, defs: &Value) {
    let kind = node["kind"].as_str().unwrap();
    let def = &defs[kind];
    assert_eq!(keys(node), keys(&def["properties"]), "{kind}");
    assert_eq!(keys(node), strings(&def["required"]));
    if kind == "split" {
        check_node(&node["left"], defs);
        check_node(&node["right"], defs);
    }
}

#[test]
fn documented_schema_matches_serialized_model() {
    let doc: Value =
        serde_json::from_str(include_str!(concat!(env!("CARGO_MANIFEST_DIR"), "/../../docs/model.schema.json"))).unwrap();
    let schema = vec!["f_eng_a".to_string(), "f_eng_b".to_string()];
    let rows: Vec<Vec<Option<f64>>> = (0..40)
        .map(|i| vec![Some(i as f64), if i % 3 == 0 { None } else { Some((i % 7) as f64) }])
        .collect();
    let labels: Vec<bool> = (0..40).map(|i| i % 2 == 0 || i > 30).collect();
    let set = TrainSet::new(&schema, rows.iter().map(Vec::as_slice).collect(), labels);
    let model = train(&set, &FeatureMask::all(2), &TrainConfig { rounds: 5, ..TrainConfig::default() }).unwrap();
    let json: Value = serde_json::from_str(&model.to_json()).unwrap();

    assert_eq!(keys(&json), strings(&doc["required"]));
    assert_eq!(keys(&json), keys(&doc["properties"]));
    assert_eq!(json["version"], doc["properties"]["version"]["const"]);
    assert_eq!(keys(&json["config"]), keys(&doc["$defs"]["trainConfig"]["properties"]));
    let trees = json["trees"].as_array().unwrap();
    assert!(trees.iter().any(|t| t["kind"] == "split"));
    for t in trees {
        check_node(t, &doc["$defs"]);
    }
}
