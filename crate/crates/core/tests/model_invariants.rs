use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use seqtrans::models::{forward, Dims, ForwardCtx, HeadSteps, SeqBatch};
use seqtrans::{ParamSet, Tape, Variant};

fn dims() -> Dims {
    Dims {
        d: 6,
        n_items: 9,
        n_cats: 3,
        n_users: 2,
    }
}

/// Every head's logits at every step, on the deterministic mean path.
fn logits(p: &ParamSet, items: &[usize], cats: &[usize]) -> Vec<Vec<Vec<f64>>> {
    let batch = SeqBatch::from_histories(&[(1, items, cats)]).unwrap();
    let mut tape = Tape::new();
    let bound = p.bind(&mut tape);
    let mut ctx = ForwardCtx::mean_path(HeadSteps::All);
    let out = forward(&mut tape, p, &bound, &batch, &mut ctx).unwrap();
    out.logits
        .iter()
        .map(|h| h.steps.iter().map(|&s| tape.value(s).to_vec()).collect())
        .collect()
}

#[test]
fn outputs_never_see_the_future() {
    let items = [3, 7, 1, 9, 2, 5];
    let cats = [1, 3, 1, 3, 1, 2];
    for variant in Variant::ALL {
        let p = ParamSet::init(variant, dims(), &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        let base = logits(&p, &items, &cats);
        for cut in 1..items.len() {
            let mut later_items = items;
            let mut later_cats = cats;
            for k in cut..items.len() {
                later_items[k] = later_items[k] % 9 + 1;
                later_cats[k] = later_cats[k] % 3 + 1;
            }
            let changed = logits(&p, &later_items, &later_cats);
            for (h, (a, b)) in base.iter().zip(&changed).enumerate() {
                assert_eq!(a[..cut], b[..cut], "{variant:?} head {h} leaks future input at step {cut}");
            }
        }
    }
}

#[test]
fn mean_path_is_bit_deterministic() {
    for variant in Variant::ALL {
        let p = ParamSet::init(variant, dims(), &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        let a = logits(&p, &[1, 2, 3], &[1, 1, 2]);
        let b = logits(&p, &[1, 2, 3], &[1, 1, 2]);
        assert_eq!(a, b);
    }
}
