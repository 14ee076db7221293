"""Domain gap: ID-vs-OOD MMD^2 of pooled hidden states with the trained slot adapters on and bypassed."""
from _common import base_parser, load, report
from slotground.experiments import mmd_gap_experiment


def main():
    ap = base_parser(__doc__, "recovery.json")
    ap.add_argument("--seeds", type=int, default=5)
    args = ap.parse_args()
    res = mmd_gap_experiment(load(args), range(args.seeds))
    res["adapter_lower"] = sum(r["adapter"] < r["baseline"] for r in res["rows"])
    report(args, "mmd_gap.json", res)


if __name__ == "__main__":
    main()
