"""Print the mapped probe vectors and how the remainder term and p reshape the attention row."""
import numpy as np

from taylorformer import analysis
from taylorformer.attention import AttentionConfig, phi_p

NAMES = ["K1", "K2", "K3", "K4"]


def main():
    np.set_printoptions(precision=4, suppress=True)
    print("mapped with p=3")
    print("  Q ", phi_p(analysis.PROBE_QUERY, 3)[0])
    for name, row in zip(NAMES, phi_p(analysis.PROBE_KEYS, 3)):
        print(f"  {name}", row)

    print("\n  s    p   weights over K1..K4          entropy  peak")
    for s in (0.0, 0.5, 1.0):
        for p in (3.0, 4.0, 5.0, 8.0):
            m = analysis.probe_map(AttentionConfig(head_dim=2, focused_factor=p, modulation=s))
            print(f"  {s:<4} {p:<3} {m[0]}  {analysis.row_entropy(m):.5f}  {m.max():.4f}")


if __name__ == "__main__":
    main()
