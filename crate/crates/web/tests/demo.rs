use shelf_search_web::Demo;

fn step_json(text: &str) -> serde_json::Value {
    serde_json::from_str(text).unwrap()
}

#[test]
fn raster_is_rgba_and_heatmap_tints_it() {
    let demo = Demo::new(2, 3, 4).unwrap();
    let plain = demo.rgba(false).unwrap();
    assert_eq!(plain.len(), demo.size() * demo.size() * 4);
    assert!(plain.chunks(4).all(|p| p[3] == 255));
    let tinted = demo.rgba(true).unwrap();
    assert_eq!(tinted.len(), plain.len());
    assert_ne!(tinted, plain);
    assert!(tinted.chunks(4).zip(plain.chunks(4)).all(|(t, p)| t[0] >= p[0]));
}

#[test]
fn manual_steps_cost_one_each() {
    let mut demo = Demo::new(0, 1, 2).unwrap();
    for i in 1..=3 {
        let s = step_json(&demo.manual_step(0.0, 0.01, 0.0, 0.0).unwrap());
        assert_eq!(s["step"], i);
        assert_eq!(s["reward"], -1.0);
        assert_eq!(s["total_reward"], -(i as f64));
    }
    assert_eq!(demo.steps(), 3);
    assert_eq!(demo.roots(), "[]");
}

#[test]
fn planner_steps_are_reproducible_and_finish_empty_shelves() {
    let mut a = Demo::new(0, 0, 9).unwrap();
    let mut b = Demo::new(0, 0, 9).unwrap();
    let mut last = serde_json::Value::Null;
    while !a.done() {
        let sa = a.plan_step(2, 2).unwrap();
        assert_eq!(sa, b.plan_step(2, 2).unwrap());
        last = step_json(&sa);
    }
    assert_eq!(a.status(), last["terminal"].as_str().unwrap());
    assert!(a.steps() <= 50);
}
