"""Parameter counts per model variant, with the share taken by each parameter role."""
from collections import Counter

import numpy as np

from taylorformer.backbone import ModelConfig, count_params, param_role, param_shapes

PUBLISHED = {"B": 2.63e6, "L": 7.29e6, "XL": 16.26e6}


def main():
    for name in ("nano", "B", "L", "XL"):
        shapes = param_shapes(ModelConfig.variant(name))
        total = count_params(shapes)
        line = f"{name:5s} {total:>10,d}"
        if name in PUBLISHED:
            line += f"   published {PUBLISHED[name] / 1e6:.2f}M, deviation {(total - PUBLISHED[name]) / PUBLISHED[name]:+.1%}"
        print(line)
        roles = Counter()
        for pname, shape in shapes.items():
            roles[param_role(pname)] += int(np.prod(shape))
        for role, n in roles.most_common():
            print(f"      {role:28s} {n:>9,d}  {n / total:6.1%}")


if __name__ == "__main__":
    main()
