mod common;

use common::*;
use guidemt::guidance::{GuidanceMatrix, GuidanceMode};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn check(seed: u64) -> (f64, f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = random_model(&mut rng);
    let input = random_input(&model.config, &mut rng);

    let guided = model.encode(&input).unwrap();
    let want = reference_encode(&model, &input, Some(&input.guidance));
    let d_guided = max_abs_diff(guided.states.data(), &flatten(&want));

    let mut ones = input.clone();
    ones.guidance = GuidanceMatrix::all_ones(input.guidance.layout());
    let all_ones = model.encode(&ones).unwrap();
    let full_ref = reference_encode(&model, &input, None);
    let d_ones = max_abs_diff(all_ones.states.data(), &flatten(&full_ref));

    let full = model.encode(&input.degrade(GuidanceMode::Full)).unwrap();
    let d_full = max_abs_diff(full.states.data(), all_ones.states.data());
    (d_guided, d_ones, d_full)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn encoder_matches_straight_line_reference(seed in 0u64..1_000_000) {
        let (g, o, f) = check(seed);
        prop_assert!(g < 1e-12, "guided {g}");
        prop_assert!(o < 1e-12, "all ones vs unmasked reference {o}");
        prop_assert!(f < 1e-12, "full mode vs all ones {f}");
    }
}

#[test]
fn reference_sees_the_guidance() {
    // The reference would be useless if masking never changed anything.
    let mut moved = 0;
    for seed in 0..40 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = random_model(&mut rng);
        let input = random_input(&model.config, &mut rng);
        let a = reference_encode(&model, &input, Some(&input.guidance));
        let b = reference_encode(&model, &input, None);
        if max_abs_diff(&flatten(&a), &flatten(&b)) > 1e-6 {
            moved += 1;
        }
    }
    assert!(moved > 20, "{moved}");
}
