use std::collections::HashMap;

use proptest::prelude::*;

use super::*;

fn cfg(n_envs: usize, len: usize) -> DataConfig {
    DataConfig {
        n_envs,
        stream_length: len,
        master_seed: 3,
        width: 9,
        height: 9,
        ..DataConfig::default()
    }
}

/// Streams of chosen lengths with `t` and a recognizable goal per stream.
fn synthetic(lengths: &[usize]) -> Vec<StreamDataset> {
    lengths
        .iter()
        .enumerate()
        .map(|(i, &len)| {
            let mut ds = generate_stream(&cfg(1, len), i as u64).unwrap();
            ds.header.env_index = i as u64;
            ds
        })
        .collect()
}

#[test]
fn expert_actions_replay_to_next_observation() {
    let ds = generate_stream(&cfg(1, 300), 0).unwrap();
    ds.verify_replay().unwrap();
    let mut env = ds.env().unwrap();
    env.set_goal(ds.records[0].goal_id).unwrap();
    for w in ds.records.windows(2) {
        let out = env.step(Action::from_index(w[0].expert_action as usize).unwrap());
        if w[1].new_task {
            env.set_goal(w[1].goal_id).unwrap();
        }
        assert_eq!(env.observe(), w[1].observation());
        assert_eq!(out.reached_goal, w[0].reached_goal);
    }
}

#[test]
fn task_accounting() {
    for (i, len) in [(0u64, 300usize), (1, 57), (2, 1)].into_iter() {
        let ds = generate_stream(&cfg(1, len), i).unwrap();
        let reached = ds.records.iter().filter(|r| r.reached_goal).count();
        let tasks = ds.records.iter().filter(|r| r.new_task).count();
        let mid_task = !ds.records.last().unwrap().reached_goal;
        assert_eq!(reached, tasks - mid_task as usize, "len {len}");
        assert!(ds.records[0].new_task);
        for w in ds.records.windows(2) {
            assert_eq!(w[1].t, w[0].t + 1);
            assert_eq!(w[1].new_task, w[0].reached_goal);
            assert_eq!(w[1].new_task, w[1].goal_id != w[0].goal_id);
        }
    }
}

#[test]
fn stream_ending_exactly_on_arrival() {
    let full = generate_stream(&cfg(1, 400), 5).unwrap();
    let cut = full.records.iter().position(|r| r.reached_goal).unwrap() + 1;
    let ds = generate_stream(&cfg(1, cut), 5).unwrap();
    assert!(ds.records.last().unwrap().reached_goal);
    let reached = ds.records.iter().filter(|r| r.reached_goal).count();
    let tasks = ds.records.iter().filter(|r| r.new_task).count();
    assert_eq!(reached, tasks);
}

#[test]
fn generation_is_deterministic() {
    let a = format::encode(&generate_stream(&cfg(1, 200), 7).unwrap());
    let b = format::encode(&generate_stream(&cfg(1, 200), 7).unwrap());
    assert_eq!(a, b);
    let c = format::encode(&generate_stream(&cfg(1, 200), 8).unwrap());
    assert_ne!(a, c);
}

#[test]
fn zero_length_is_a_config_error() {
    assert!(matches!(generate_stream(&cfg(1, 0), 0), Err(DataError::Config(_))));
}

#[test]
fn file_round_trip_and_damage() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.cons");
    let ds = generate_stream(&cfg(1, 120), 1).unwrap();
    write_dataset(&ds, &path).unwrap();
    assert_eq!(read_dataset(&path).unwrap(), ds);

    let bytes = std::fs::read(&path).unwrap();
    let err = format::decode(&bytes[..bytes.len() - 1]).unwrap_err();
    assert!(matches!(err, DataError::Decode { .. }), "{err}");

    let mut short = ds.clone();
    short.records.pop();
    let err = format::decode(&format::encode(&short)).unwrap_err();
    assert!(matches!(err, DataError::Integrity(_)), "{err}");

    let mut v = bytes.clone();
    v[4] = 7;
    assert!(matches!(format::decode(&v), Err(DataError::Version { found: 7, .. })));
}

#[test]
fn dataset_directory_generation() {
    let dir = tempfile::tempdir().unwrap();
    let c = cfg(4, 50);
    let entries = generate_dataset(&c, dir.path(), false).unwrap();
    assert_eq!(entries.len(), 4);
    let loaded = load_dataset(dir.path()).unwrap();
    assert_eq!(loaded.len(), 4);
    assert!(loaded.iter().all(|d| d.len() == 50));
    let h1 = index_hash(dir.path()).unwrap();
    assert!(matches!(generate_dataset(&c, dir.path(), false), Err(DataError::Config(_))));
    generate_dataset(&c, dir.path(), true).unwrap();
    assert_eq!(index_hash(dir.path()).unwrap(), h1);
    // a tampered stream file is caught by its index hash
    let p = dir.path().join(stream_file_name(2));
    let mut b = std::fs::read(&p).unwrap();
    let n = b.len();
    b[n - 2] ^= 1;
    std::fs::write(&p, b).unwrap();
    assert!(matches!(load_dataset(dir.path()), Err(DataError::Integrity(_))));
}

#[test]
fn windowing_single_slot() {
    let streams = synthetic(&[8]);
    let loader = Loader::new(&streams, 1, 4, 0).unwrap();
    let batches: Vec<_> = loader.epoch(0).collect();
    assert_eq!(batches.len(), 2);
    assert_eq!(loader.batches_in_epoch(0), 2);
    assert_eq!(batches[1].start_t[0], Some(4));
    assert_eq!(batches[0].fresh_stream, vec![true]);
    assert_eq!(batches[1].fresh_stream, vec![false]);
}

#[test]
fn segment_longer_than_stream_is_rejected() {
    let streams = synthetic(&[8]);
    assert!(matches!(Loader::new(&streams, 1, 9, 0), Err(DataError::Config(_))));
}

#[test]
fn padded_tail_is_masked() {
    let streams = synthetic(&[10]);
    let loader = Loader::new(&streams, 2, 4, 0).unwrap();
    let batches: Vec<_> = loader.epoch(0).collect();
    assert_eq!(batches.len(), 3);
    let last = &batches[2];
    // slot 0 has records 8, 9 then padding; slot 1 idle throughout
    assert_eq!(last.mask, vec![true, false, true, false, false, false, false, false]);
    assert_eq!(last.streams, vec![Some(0), None]);
}

/// Walk one epoch and check continuity, coverage and fresh accounting.
fn check_epoch(lengths: &[usize], slots: usize, t: usize, seed: u64, epoch: u32) -> Result<(), TestCaseError> {
    let streams = synthetic(lengths);
    let loader = Loader::new(&streams, slots, t, seed).unwrap();
    let mut seen: Vec<Vec<u32>> = vec![Vec::new(); streams.len()];
    let mut fresh_count = vec![0usize; streams.len()];
    let mut last_t: HashMap<usize, (usize, u32)> = HashMap::new();
    let mut n = 0u64;
    for batch in loader.epoch(epoch) {
        prop_assert_eq!(batch.index, n);
        n += 1;
        for s in 0..slots {
            let Some(stream) = batch.streams[s] else {
                prop_assert!((0..t).all(|k| !batch.mask[k * slots + s]));
                continue;
            };
            let start = batch.start_t[s].unwrap();
            if batch.fresh_stream[s] {
                fresh_count[stream] += 1;
                prop_assert_eq!(start, 0);
            } else {
                let (prev_stream, prev_end) = last_t[&s];
                prop_assert_eq!(prev_stream, stream);
                prop_assert_eq!(start, prev_end + 1);
            }
            let recs = &streams[stream].records;
            let mut end = start;
            for k in 0..t {
                let row = k * slots + s;
                let idx = start as usize + k;
                if idx < recs.len() {
                    prop_assert!(batch.mask[row]);
                    prop_assert_eq!(batch.targets[row], recs[idx].expert_action);
                    prop_assert_eq!(batch.inputs.goals[row], recs[idx].goal_id);
                    seen[stream].push(recs[idx].t);
                    end = recs[idx].t;
                } else {
                    prop_assert!(!batch.mask[row]);
                }
            }
            last_t.insert(s, (stream, end));
        }
    }
    prop_assert_eq!(n, loader.batches_in_epoch(epoch));
    for (i, ts) in seen.iter().enumerate() {
        prop_assert_eq!(fresh_count[i], 1);
        let want: Vec<u32> = (0..lengths[i] as u32).collect();
        prop_assert_eq!(ts, &want);
    }
    Ok(())
}

#[test]
fn desk_shape_epoch() {
    check_epoch(&[64 * 3 + 5; 12], 4, 64, 9, 0).unwrap();
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn continuity_and_coverage(
        lengths in proptest::collection::vec(6usize..40, 1..7),
        slots in 1usize..5,
        t in 1usize..7,
        seed in any::<u64>(),
        epoch in 0u32..3,
    ) {
        check_epoch(&lengths, slots, t, seed, epoch)?;
    }
}
