use histprune::cost::{prefill_flops, ModelShape, FLOPS_PER_MAC};
use histprune::harness::{Harness, HarnessConfig, Position, RopeMode, TokenInfo, TokenRole, TokenTensor};
use histprune::prune::TokenLabel;

#[test]
fn attention_only_formula_matches_counted_macs() {
    for (layers, dim, heads, n) in [(2, 8, 2, 5), (3, 16, 4, 9), (4, 12, 3, 1), (2, 32, 1, 17)] {
        let cfg = HarnessConfig {
            layers,
            embed_dim: dim,
            heads,
            prune_layer: 1,
            rope: RopeMode::Rope1d,
            ..HarnessConfig::default()
        };
        let info = (0..n)
            .map(|i| TokenInfo {
                role: TokenRole::Text,
                position: Position::Linear(i as u32),
                label: TokenLabel::Unlabeled,
            })
            .collect();
        let t = TokenTensor::new(dim, vec![0.1; n * dim], info).unwrap();
        let out = Harness::new(cfg).unwrap().forward(&t, None).unwrap();
        let shape = ModelShape::llm_only(layers, dim, 0, false);
        assert_eq!(prefill_flops(&shape, n), FLOPS_PER_MAC * out.macs);
    }
}
