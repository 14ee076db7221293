"""Grounding: pretrain a frozen base, fine-tune adapters + LoRA with lambda and with 0, then score ID/OOD and
run the perturbation and domain-gap diagnostics on the trained model."""
from _common import base_parser, load, report
from slotground.experiments import domain_gap, grounding_experiment, perturbation_experiment


def main():
    ap = base_parser(__doc__, "grounding.json")
    ap.add_argument("--perturb-seeds", type=int, default=5)
    ap.add_argument("--runs", default="runs/grounding", help="directory for checkpoints, logs and predictions")
    args = ap.parse_args()
    cfg = load(args)
    lam = cfg.lambda_sa
    res = grounding_experiment(cfg, lambdas=(lam, 0.0), out_dir=args.runs)
    tr, ev, ood = res["data"]
    model = res["models"][lam]
    payload = {
        "metrics": {str(k): v for k, v in res["metrics"].items()},
        "perturbation": perturbation_experiment(model, ev, range(args.perturb_seeds)),
        "domain_gap": domain_gap(model, ev, ood),
        "seconds": res["seconds"],
    }
    report(args, "grounding.json", payload)


if __name__ == "__main__":
    main()
