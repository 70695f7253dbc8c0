"""Per-layer cosine of LaProx against the mean-attention baseline on one synthetic stack.

    python3 scripts/per_layer_fidelity.py --seed 3 --budget 64
"""
import argparse

from laprox.checks import FIDELITY_HEAD_SPREAD, FIDELITY_SHAPE
from laprox.evaluate import paired_fidelity
from laprox.scoring import PolicyConfig


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--budget", type=int, default=64)
    ap.add_argument("--head-spread", type=float, default=FIDELITY_HEAD_SPREAD)
    args = ap.parse_args()

    s = FIDELITY_SHAPE
    variants = {p: PolicyConfig(p) for p in ("laprox", "snapkv", "criticalkv", "adakv", "cake")}
    reports = paired_fidelity(s["n_layers"], s["n_heads"], s["n_kv_heads"], s["head_dim"], s["seq_len"],
                              args.seed, variants, [args.budget], head_spread=args.head_spread)
    print("layer  " + "  ".join(f"{r.policy:>10}" for r in reports))
    for layer in range(s["n_layers"]):
        print(f"{layer:>5}  " + "  ".join(f"{r.cosine[layer]:>10.4f}" for r in reports))
    print(" mean  " + "  ".join(f"{r.mean_cosine:>10.4f}" for r in reports))


if __name__ == "__main__":
    main()
