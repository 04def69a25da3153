use dwe_lab::cache::{Lookup, CACHE_ENV};
use dwe_lab::Cache;

#[test]
fn keys_depend_on_stage_and_inputs() {
    let a = Cache::key("spectrum", &(32, 1.0));
    assert_eq!(a, Cache::key("spectrum", &(32, 1.0)));
    assert_ne!(a, Cache::key("spectrum", &(32, 1.5)));
    assert_ne!(a, Cache::key("orbit", &(32, 1.0)));
    assert_eq!(a.len(), 64);
}

#[test]
fn miss_then_hit() {
    let dir = tempfile::tempdir().unwrap();
    let cache = Cache::at(dir.path());
    let key = Cache::key("s", &1);
    let mut calls = 0;
    let (v, l) = cache.get_or_compute("s", &key, || -> Result<Vec<f64>, ()> {
        calls += 1;
        Ok(vec![0.1, 1.0 / 3.0])
    }).unwrap();
    assert_eq!(l, Lookup::Miss);
    let (w, l) = cache.get_or_compute("s", &key, || -> Result<Vec<f64>, ()> {
        calls += 1;
        Ok(vec![])
    }).unwrap();
    assert_eq!(l, Lookup::Hit);
    assert_eq!(v, w);
    assert_eq!(calls, 1);
}

#[test]
fn corrupt_entry_is_removed_and_recomputed() {
    let dir = tempfile::tempdir().unwrap();
    let cache = Cache::at(dir.path());
    let key = Cache::key("s", &2);
    cache.put("s", &key, &vec![1.0f64]).unwrap();
    let path = cache.path("s", &key).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
    let (v, l) = cache.get::<Vec<f64>>("s", &key);
    assert_eq!(l, Lookup::Corrupt);
    assert!(v.is_none());
    assert!(!path.exists());
    let (v, l) = cache.get_or_compute("s", &key, || -> Result<_, ()> { Ok(vec![2.0f64]) }).unwrap();
    assert_eq!((v, l), (vec![2.0], Lookup::Miss));
    assert_eq!(cache.get::<Vec<f64>>("s", &key).1, Lookup::Hit);
}

#[test]
fn wrong_payload_type_counts_as_corrupt() {
    let dir = tempfile::tempdir().unwrap();
    let cache = Cache::at(dir.path());
    cache.put("s", "k", &"text").unwrap();
    assert_eq!(cache.get::<Vec<f64>>("s", "k").1, Lookup::Corrupt);
}

#[test]
fn no_temporary_files_remain() {
    let dir = tempfile::tempdir().unwrap();
    let cache = Cache::at(dir.path());
    for i in 0..5 {
        cache.put("s", &i.to_string(), &i).unwrap();
    }
    let names: Vec<String> =
        std::fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name().to_string_lossy().into_owned()).collect();
    assert_eq!(names.len(), 5);
    assert!(names.iter().all(|n| n.ends_with(".json") && !n.starts_with('.')));
}

#[test]
fn disabled_cache_always_computes() {
    let cache = Cache::disabled();
    assert!(!cache.enabled());
    assert_eq!(cache.get::<i32>("s", "k").1, Lookup::Disabled);
    cache.put("s", "k", &1).unwrap();
    let (v, l) = cache.get_or_compute("s", "k", || -> Result<_, ()> { Ok(3) }).unwrap();
    assert_eq!((v, l), (3, Lookup::Disabled));
}

#[test]
fn environment_overrides_location() {
    let dir = tempfile::tempdir().unwrap();
    std::env::set_var(CACHE_ENV, dir.path());
    let cache = Cache::from_env(std::path::Path::new("out"));
    std::env::remove_var(CACHE_ENV);
    assert!(cache.path("s", "k").unwrap().starts_with(dir.path()));
    let fallback = Cache::from_env(std::path::Path::new("out"));
    assert!(fallback.path("s", "k").unwrap().starts_with("out/.cache"));
}
