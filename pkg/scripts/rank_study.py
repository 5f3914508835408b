"""How often does adding the positional convolution raise the rank of the attention map?"""
import numpy as np

from taylorformer.analysis import measure_attention_rank
from taylorformer.attention import AttentionConfig, QkvTriple


def main(seeds=100):
    for d in (1, 2, 4, 8):
        cfg = AttentionConfig(head_dim=d)
        ranks = []
        for seed in range(seeds):
            rng = np.random.default_rng(seed)
            q, k, _ = QkvTriple.random(rng, 64, d)
            ranks.append(measure_attention_rank(q, k, cfg, (8, 8), rng.standard_normal((3, 3))))
        rk, rc = np.array(ranks).T
        print(f"D={d}: kernel rank max {rk.max()} (bound {2 * d + 1}), with CPE median {int(np.median(rc))}, "
              f"raised in {(rc > rk).sum()}/{seeds}")


if __name__ == "__main__":
    main()
