use seqtrans::synth::{generate, SynthSpec};

#[test]
fn empirical_transitions_match_matrix() {
    // 2000 users × 500 steps ≈ 10⁶ transitions
    let p = vec![
        vec![0.1, 0.6, 0.3],
        vec![0.5, 0.25, 0.25],
        vec![0.0, 0.2, 0.8],
    ];
    let spec = SynthSpec::new(3, 4, 501, 2000, p.clone(), 13).unwrap();
    let events = generate(&spec).unwrap();
    let mut counts = [[0usize; 3]; 3];
    for pair in events.windows(2) {
        if pair[0].user != pair[1].user {
            continue;
        }
        let from: usize = pair[0].category[1..].parse().unwrap();
        let to: usize = pair[1].category[1..].parse().unwrap();
        counts[from][to] += 1;
    }
    for (c, row) in counts.iter().enumerate() {
        let total: usize = row.iter().sum();
        for (j, &n) in row.iter().enumerate() {
            let freq = n as f64 / total as f64;
            assert!((freq - p[c][j]).abs() < 0.02, "P[{c}][{j}] = {}, observed {freq}", p[c][j]);
        }
    }
}

#[test]
fn items_stay_inside_their_category() {
    let spec = SynthSpec::noisy_cycle(4, 5, 20, 50, 0.7, 3).unwrap();
    for e in generate(&spec).unwrap() {
        let item: usize = e.item[1..].parse().unwrap();
        let cat: usize = e.category[1..].parse().unwrap();
        assert_eq!(item / spec.m, cat);
    }
}

#[test]
fn generation_is_seeded() {
    let a = SynthSpec::noisy_cycle(4, 5, 20, 50, 0.7, 3).unwrap();
    let mut b = a.clone();
    assert_eq!(generate(&a).unwrap(), generate(&b).unwrap());
    b.seed = 4;
    assert_ne!(generate(&a).unwrap(), generate(&b).unwrap());
}
