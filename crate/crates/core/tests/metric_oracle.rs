mod oracle;

#[test]
fn library_matches_brute_force_oracle() {
    for (name, gap, tol) in oracle::compare_all(100) {
        assert!(gap <= tol, "{name}: gap {gap:e} exceeds {tol:e}");
    }
}

#[test]
fn tied_instances_exist() {
    let inst = oracle::instance(1);
    let mut v = inst.map.clone();
    v.sort_by(f64::total_cmp);
    v.dedup();
    assert!(v.len() < inst.map.len());
}
