"""Slot recovery: ARI of argmax slot maps against planted entities, with and without the alignment loss."""
import numpy as np

from _common import base_parser, load, report
from slotground.experiments import slot_recovery_experiment


def main():
    ap = base_parser(__doc__, "recovery.json")
    ap.add_argument("--seeds", type=int, default=5)
    args = ap.parse_args()
    cfg = load(args)
    res = slot_recovery_experiment(cfg, range(args.seeds), lambdas=(cfg.lambda_sa, 0.0))
    lam = cfg.lambda_sa
    summary = {
        "mean_ari": {str(k): float(np.mean(v)) for k, v in res["ari"].items()},
        "sa_relative_fall": float(np.mean([1 - b / a for a, b in zip(res["sa_first"][lam], res["sa_last"][lam])])),
        **{k: ({str(a): b for a, b in v.items()} if isinstance(v, dict) else v) for k, v in res.items()},
    }
    report(args, "slot_recovery.json", summary)


if __name__ == "__main__":
    main()
