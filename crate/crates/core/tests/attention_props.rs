mod common;

use proptest::prelude::*;
use speaker_count::attention::{attention_backward, attention_pool, attention_scores, FeatureMap};
use speaker_count::nn::Tensor;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn attention_invariants(c in common::attn_case()) {
        common::attention_case_holds(&c)?;
    }

    #[test]
    fn larger_score_gets_larger_weight(r in prop::collection::vec(-5.0..5.0f64, 2..12)) {
        let keys = Tensor::from_vec(&[1, r.len()], r.clone()).unwrap();
        let s = attention_scores(&keys, &[1.0], 1).unwrap();
        for i in 0..r.len() {
            for j in 0..r.len() {
                if r[i] > r[j] {
                    prop_assert!(s.w[i] >= s.w[j]);
                }
            }
        }
    }
}

#[test]
fn backward_without_forward_is_an_error() {
    assert!(attention_backward::<f64>(&[1.0], None).is_err());
}

#[test]
fn mismatched_projection_is_rejected() {
    let c = common::AttnCase {
        k: 2,
        m: 3,
        dk: 2,
        x: vec![0.0; 6],
        wk: vec![0.0; 4],
        wv: vec![0.0; 4],
        q: vec![0.0; 2],
        perm_keys: vec![0, 1, 2],
    };
    let wrong = FeatureMap::new(3, 3, vec![0.0; 9]).unwrap();
    assert!(attention_pool(&wrong, &c.params()).is_err());
}
