use std::fs;

use rehostfuzz::config::HarnessConfig;
use rehostfuzz::corpus::CorpusStore;
use rehostfuzz::coverage::ClassifiedMap;
use rehostfuzz::executor::{fuzz, Budget, FuzzOptions, NoObserver, Verdict};
use rehostfuzz::mutator::Mutator;
use rehostfuzz::targets;

#[test]
fn exported_target_loads_from_disk() {
    let d = tempfile::tempdir().unwrap();
    for name in ["t1", "t2", "t3"] {
        let t = targets::build(name).unwrap();
        t.export(&d.path().join(name)).unwrap();
        let cfg = HarnessConfig::load(&d.path().join(name).join(format!("{name}.toml"))).unwrap();
        assert_eq!(cfg.entry, t.config.entry);
        assert_eq!(cfg.candidates.len(), t.config.candidates.len());
        let mut c = cfg.campaign().unwrap();
        for (seed, bytes) in &t.seeds {
            let o = c.run_one(bytes);
            if name != "t3" || seed == "clean" {
                assert_eq!(o.verdict, Verdict::Clean, "{name}/{seed}");
            }
        }
    }
}

#[test]
fn on_disk_corpus_layout() {
    let d = tempfile::tempdir().unwrap();
    let t = targets::build("t1").unwrap();
    let mut c = t.campaign().unwrap();
    let mut q = CorpusStore::open(d.path(), c.map_size()).unwrap();
    q.add_seed(t.seeds[0].1.clone());
    let mut m = Mutator::new(3, 1024);
    fuzz(&mut c, &mut q, &mut m, FuzzOptions::with_budget(Budget::execs(20_000)), &mut NoObserver).unwrap();

    let queue = fs::read_dir(d.path().join("queue")).unwrap().count();
    assert_eq!(queue, q.len());
    let index = fs::read_to_string(d.path().join("index.jsonl")).unwrap();
    assert_eq!(index.lines().count(), q.len());
    for line in index.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v["id"].is_u64() && v["map_digest"].is_string());
    }
    for f in q.crashes().values() {
        let p = f.path.as_ref().unwrap();
        assert!(p.file_name().unwrap().to_str().unwrap().starts_with(&format!("crash-{}-", f.key)));
        assert_eq!(fs::read(p).unwrap(), f.input);
        let reports = fs::read_to_string(p.with_extension("jsonl")).unwrap();
        assert!(reports.lines().next().unwrap().contains(&f.key));
    }
    let map = ClassifiedMap::load(&d.path().join("global.map")).unwrap();
    assert_eq!(&map, q.global_map());
}

#[test]
fn second_store_imports_queue_through_sync() {
    let d = tempfile::tempdir().unwrap();
    let t = targets::build("t1").unwrap();
    let mut c = t.campaign().unwrap();
    let mut a = CorpusStore::open(d.path(), c.map_size()).unwrap();
    a.add_seed(t.seeds[0].1.clone());
    let mut m = Mutator::new(5, 1024);
    fuzz(&mut c, &mut a, &mut m, FuzzOptions::with_budget(Budget::execs(10_000)), &mut NoObserver).unwrap();

    let mut c2 = t.campaign().unwrap();
    let mut b = CorpusStore::open(d.path(), c2.map_size()).unwrap();
    let imported = b.sync(&mut c2).unwrap();
    assert!(imported > 0 && imported <= a.len());
    assert_eq!(b.global_map(), a.global_map());
    assert_eq!(b.sync(&mut c2).unwrap(), 0);
}
