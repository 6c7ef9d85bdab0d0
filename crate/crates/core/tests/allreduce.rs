mod oracles;

use std::net::TcpListener;
use std::thread;
use std::time::Duration;

use edl_core::allreduce::{allreduce_mean, chunk_bounds, memory_ring, MemoryRing, TcpRing};
use oracles::gather_mean;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const T: Duration = Duration::from_secs(10);

fn random_inputs(rng: &mut ChaCha8Rng, n: usize, len: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| (0..len).map(|_| rng.random_range(-100.0..100.0)).collect())
        .collect()
}

/// Runs one collective on every rank, returning each rank's result, data and send count.
fn run_ring(ring: Vec<MemoryRing>, inputs: &[Vec<f64>]) -> Vec<(bool, Vec<f64>, usize)> {
    let handles: Vec<_> = ring
        .into_iter()
        .zip(inputs.iter().cloned())
        .map(|(mut t, mut data)| {
            thread::spawn(move || {
                let ok = allreduce_mean(&mut t, 1, &mut data).is_ok();
                (ok, data, t.sends())
            })
        })
        .collect();
    handles.into_iter().map(|h| h.join().unwrap()).collect()
}

#[test]
fn ring_mean_matches_gather_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for n in 1..=8usize {
        for len in [0, 1, n.saturating_sub(1), n, 7, 64, 1000] {
            let inputs = random_inputs(&mut rng, n, len);
            let want = gather_mean(&inputs);
            let out = run_ring(memory_ring(n, T), &inputs);
            for (rank, (ok, data, sends)) in out.iter().enumerate() {
                assert!(ok);
                assert_eq!(*sends, 2 * (n - 1), "n={n} rank {rank}");
                for (g, w) in data.iter().zip(&want) {
                    assert!((g - w).abs() <= 1e-12, "n={n} len={len}: {g} vs {w}");
                }
                assert_eq!(
                    data.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                    out[0].1.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
                );
            }
        }
    }
}

#[test]
fn chunks_tile_the_vector() {
    for len in 0..40 {
        for n in 1..9 {
            let mut next = 0;
            for c in 0..n {
                let (a, b) = chunk_bounds(len, n, c);
                assert_eq!(a, next);
                assert!(b >= a);
                next = b;
            }
            assert_eq!(next, len);
        }
    }
}

#[test]
fn killed_member_never_leaves_a_partial_average() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for case in 0..100 {
        let n = rng.random_range(2..=8);
        let len = rng.random_range(n..200);
        let inputs = random_inputs(&mut rng, n, len);
        let clean = run_ring(memory_ring(n, T), &inputs);
        let victim = rng.random_range(0..n);
        let k = rng.random_range(0..2 * (n - 1));
        let mut ring = memory_ring(n, Duration::from_secs(2));
        ring[victim].fail_after_sends(k);
        let out = run_ring(ring, &inputs);
        assert!(!out[victim].0, "case {case}: victim finished");
        for (rank, (ok, data, _)) in out.iter().enumerate() {
            let expect = if *ok { &clean[rank].1 } else { &inputs[rank] };
            assert_eq!(
                data.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                expect.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                "case {case}: n={n} victim={victim} k={k} rank {rank} ok={ok}"
            );
        }
    }
}

#[test]
fn tcp_ring_agrees_with_memory_ring() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for n in [1, 2, 3, 5] {
        let inputs = random_inputs(&mut rng, n, 257);
        let listeners: Vec<TcpListener> = (0..n)
            .map(|_| TcpListener::bind("127.0.0.1:0").unwrap())
            .collect();
        let peers: Vec<String> = listeners
            .iter()
            .map(|l| l.local_addr().unwrap().to_string())
            .collect();
        let handles: Vec<_> = listeners
            .into_iter()
            .zip(inputs.clone())
            .enumerate()
            .map(|(rank, (l, mut data))| {
                let peers = peers.clone();
                thread::spawn(move || {
                    let mut ring = TcpRing::connect(rank, &peers, &l, 4, T).unwrap();
                    for _ in 0..3 {
                        let mut d = data.clone();
                        allreduce_mean(&mut ring, 4, &mut d).unwrap();
                        data = d;
                    }
                    data
                })
            })
            .collect();
        let tcp: Vec<Vec<f64>> = handles.into_iter().map(|h| h.join().unwrap()).collect();
        // three rounds in memory for comparison
        let mut mem = inputs.clone();
        for _ in 0..3 {
            mem = run_ring(memory_ring(n, T), &mem)
                .into_iter()
                .map(|r| r.1)
                .collect();
        }
        assert_eq!(tcp, mem, "n={n}");
    }
}

#[test]
fn tcp_ring_reports_a_dead_neighbour() {
    let listeners: Vec<TcpListener> = (0..3)
        .map(|_| TcpListener::bind("127.0.0.1:0").unwrap())
        .collect();
    let peers: Vec<String> = listeners
        .iter()
        .map(|l| l.local_addr().unwrap().to_string())
        .collect();
    let handles: Vec<_> = listeners
        .into_iter()
        .enumerate()
        .map(|(rank, l)| {
            let peers = peers.clone();
            thread::spawn(move || {
                let mut ring = TcpRing::connect(rank, &peers, &l, 0, T).unwrap();
                let mut data = vec![rank as f64; 30];
                if rank == 2 {
                    drop(ring);
                    return None;
                }
                let before = data.clone();
                let res = allreduce_mean(&mut ring, 0, &mut data);
                assert_eq!(data, before);
                Some(res.is_err())
            })
        })
        .collect();
    let res: Vec<Option<bool>> = handles.into_iter().map(|h| h.join().unwrap()).collect();
    assert_eq!(res, vec![Some(true), Some(true), None]);
}
