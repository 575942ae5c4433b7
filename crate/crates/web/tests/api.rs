use mctspipe_web::{fill_curve_json, search_json, simulate_json};
use serde_json::Value;

const FIG5: &str = r#"{"stages":[{"name":"select","duration":1},{"name":"expand","duration":1},
    {"name":"playout","duration":2,"lanes":2},{"name":"backup","duration":1}],"items":4}"#;

#[test]
fn schedule_with_gantt() {
    let v: Value = serde_json::from_str(&simulate_json(FIG5).unwrap()).unwrap();
    assert_eq!(v["makespan"], 8);
    assert_eq!(v["gantt"].as_array().unwrap().len(), 16);
    assert!(simulate_json("{}").is_err());
}

#[test]
fn fill_curve_approaches_period() {
    let v: Value = serde_json::from_str(&fill_curve_json(FIG5, 64).unwrap()).unwrap();
    assert_eq!(v["steady_period"], 1);
    let points = v["points"].as_array().unwrap();
    assert_eq!(points.len(), 64);
    assert_eq!(points[3]["makespan"], 8);
    let last = points[63]["per_item"].as_f64().unwrap();
    assert!(last < 1.1, "{last}");
    assert!(fill_curve_json(FIG5, 0).is_err());
}

#[test]
fn search_finds_the_win() {
    // X to move, a win on cell 2 (and 6 via the column)
    let v: Value = serde_json::from_str(&search_json("XX./OO./...", 500, 1.0, 1).unwrap()).unwrap();
    assert_eq!(v["to_move"], "X");
    assert_eq!(v["result"]["best_action"], 2);
    assert_eq!(v["result"]["root_visits"], 500);
    let children = v["result"]["root_children"].as_array().unwrap();
    assert_eq!(children.len(), 5);
}

#[test]
fn search_rejects_bad_input() {
    assert!(search_json("XX", 10, 1.0, 0).is_err());
    assert!(search_json("XXX/OO./...", 10, 1.0, 0).is_err());
    assert!(search_json(".........", 0, 1.0, 0).is_err());
    assert!(search_json(".........", 10, -1.0, 0).is_err());
}
