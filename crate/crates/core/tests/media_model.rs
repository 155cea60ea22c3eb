use std::collections::BTreeSet;

use famsync::{Media, MediaConfig};
use proptest::prelude::*;

const CAPACITY: usize = 64;
const LINE: usize = 8;

#[derive(Debug, Clone)]
enum Op {
    Write(usize, Vec<u8>),
    Flush(usize, usize),
    Fence,
}

fn op() -> impl Strategy<Value = Op> {
    prop_oneof![
        3 => (0..CAPACITY).prop_flat_map(|at| (Just(at), prop::collection::vec(any::<u8>(), 1..=(CAPACITY - at).min(12))))
            .prop_map(|(at, data)| Op::Write(at, data)),
        2 => (0..CAPACITY).prop_flat_map(|at| (Just(at), 1..=CAPACITY - at)).prop_map(|(at, len)| Op::Flush(at, len)),
        1 => Just(Op::Fence),
    ]
}

fn trace() -> impl Strategy<Value = Vec<Op>> {
    prop::collection::vec(op(), 0..24).prop_filter("at most 10 writes", |ops| {
        ops.iter().filter(|o| matches!(o, Op::Write(..))).count() <= 10
    })
}

/// Per-line model: durable bytes, cached bytes, and whether the cached
/// bytes are flushed but not yet fenced.
struct Model {
    durable: Vec<u8>,
    cached: Vec<u8>,
    dirty: [bool; CAPACITY / LINE],
    flushed: [bool; CAPACITY / LINE],
}

impl Model {
    fn new() -> Model {
        Model {
            durable: vec![0; CAPACITY],
            cached: vec![0; CAPACITY],
            dirty: [false; CAPACITY / LINE],
            flushed: [false; CAPACITY / LINE],
        }
    }

    fn apply(&mut self, op: &Op) {
        match op {
            Op::Write(at, data) => {
                self.cached[*at..at + data.len()].copy_from_slice(data);
                for line in at / LINE..=(at + data.len() - 1) / LINE {
                    self.dirty[line] = true;
                    self.flushed[line] = false;
                }
            }
            Op::Flush(at, len) => {
                for line in at / LINE..=(at + len - 1) / LINE {
                    if self.dirty[line] {
                        self.dirty[line] = false;
                        self.flushed[line] = true;
                    }
                }
            }
            Op::Fence => {
                for line in 0..CAPACITY / LINE {
                    if self.flushed[line] {
                        let r = line * LINE..(line + 1) * LINE;
                        self.durable[r.clone()].copy_from_slice(&self.cached[r]);
                        self.flushed[line] = false;
                    }
                }
            }
        }
    }

    /// Every image a crash could leave, by trying all subsets.
    fn crash_images(&self) -> BTreeSet<Vec<u8>> {
        let candidates: Vec<usize> = (0..CAPACITY / LINE).filter(|&l| self.flushed[l]).collect();
        let mut out = BTreeSet::new();
        for mask in 0u32..1 << candidates.len() {
            let mut image = self.durable.clone();
            for (bit, &line) in candidates.iter().enumerate() {
                if mask & (1 << bit) != 0 {
                    let r = line * LINE..(line + 1) * LINE;
                    image[r.clone()].copy_from_slice(&self.cached[r]);
                }
            }
            out.insert(image);
        }
        out
    }

    fn flushed_count(&self) -> usize {
        self.flushed.iter().filter(|&&f| f).count()
    }
}

fn run(media: &mut Media, ops: &[Op]) {
    for op in ops {
        match op {
            Op::Write(at, data) => media.write(*at as u64, data).unwrap(),
            Op::Flush(at, len) => media.flush(*at as u64, *len as u64).unwrap(),
            Op::Fence => media.fence().unwrap(),
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn crash_states_match_brute_force(ops in trace()) {
        let mut media = Media::simulated(CAPACITY as u64, LINE as u64).unwrap();
        run(&mut media, &ops);
        let mut model = Model::new();
        ops.iter().for_each(|op| model.apply(op));

        let states = media.enumerate_crash_states().unwrap();
        prop_assert_eq!(states.len(), 1 << model.flushed_count());
        let images: BTreeSet<Vec<u8>> = states.into_iter().map(|s| s.durable_image).collect();
        prop_assert_eq!(images, model.crash_images());
        prop_assert_eq!(media.durable_snapshot().unwrap(), model.durable.clone());
    }

    #[test]
    fn real_file_durable_image_is_a_simulated_crash_state(ops in trace()) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("media.bin");
        let mut file = Media::new(&MediaConfig::real_file(&path, CAPACITY as u64, LINE as u64)).unwrap();
        let mut sim = Media::simulated(CAPACITY as u64, LINE as u64).unwrap();
        run(&mut file, &ops);
        run(&mut sim, &ops);
        drop(file);

        let on_disk = std::fs::read(&path).unwrap();
        let images: BTreeSet<Vec<u8>> =
            sim.enumerate_crash_states().unwrap().into_iter().map(|s| s.durable_image).collect();
        prop_assert!(images.contains(&on_disk));
    }
}

#[test]
fn unflushed_write_never_persists() {
    let mut media = Media::simulated(64, 8).unwrap();
    media.write(3, &[1, 2, 3]).unwrap();
    let states = media.enumerate_crash_states().unwrap();
    assert_eq!(states.len(), 1);
    assert_eq!(states[0].durable_image, vec![0; 64]);
}

#[test]
fn rewrite_after_flush_withdraws_the_line() {
    let mut media = Media::simulated(64, 8).unwrap();
    media.write(0, &[9]).unwrap();
    media.flush(0, 1).unwrap();
    media.write(1, &[8]).unwrap();
    assert_eq!(media.enumerate_crash_states().unwrap().len(), 1);
    media.fence().unwrap();
    assert_eq!(media.durable_snapshot().unwrap()[..2], [0, 0]);
}
