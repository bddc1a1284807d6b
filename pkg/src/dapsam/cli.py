"""Command-line entry point: ``dapsam <subcommand>``."""
from __future__ import annotations

import argparse
import logging
import sys

import torch

from .config import RunConfig, load_config
from .errors import DapsamError


def _cmd_gen_data(args):
    from .data import generate_domain_suite

    cfg = load_config(args.config) if args.config else RunConfig()
    path = generate_domain_suite(cfg.data, args.out, args.seed, overwrite=args.overwrite)
    n = len(cfg.data.domains) * cfg.data.samples_per_domain
    print(f"wrote {n} samples across {len(cfg.data.domains)} domains to {path}")


def _cmd_train(args):
    from .train import train

    res = train(load_config(args.config), args.data, args.out)
    last = res.history[-1] if res.history else {}
    print(f"trained {len(res.history)} epochs; final loss {last.get('loss', float('nan')):.6g}; "
          f"best val DSC {res.best_val if res.best_val is not None else 'n/a'}; checkpoints in {res.out_dir}")


def _cmd_eval(args):
    from .train import evaluate, summary_path

    rep = evaluate(args.ckpt, args.data, args.report, train_domain=args.train_domain)
    print(f"Average DSC over {len(rep.test_domains)} test domains: {rep.average['DSC']:.6g}")
    print(f"per-sample report: {args.report}; summary: {summary_path(args.report)}")


def _cmd_ablate(args):
    from .train import ablate

    res = ablate(load_config(args.config), args.data, args.out)
    for row in res.components:
        print(f"{row['row']:>14}  Average DSC {row['Average']:.6g}")
    for row in res.bank_sweep:
        print(f"{'N=' + str(row['N']):>14}  bank params {row['bank_params']:>6}  Average DSC {row['Average']:.6g}")


def _cmd_gradcheck(args):
    from .gradcheck import gradcheck

    err = gradcheck(args.component, args.seed)
    print(f"{args.component} seed={args.seed} max relative error {err:.3e}")
    return 0 if err < args.tol else 1


def _cmd_export(args):
    from .checkpoint import load_checkpoint
    from .data import load_dataset, stack
    from .encoder import encoder_forward
    from .errors import InventoryError
    from .prompt import export_prototypes

    ck = load_checkpoint(args.ckpt)
    if "prompt.bank" not in ck.params:
        raise InventoryError("checkpoint has no memory bank (prompt generator disabled)")
    embeddings = []
    if args.data:
        data = load_dataset(args.data)
        t = ck.config.train.toggles
        with torch.no_grad():
            for samples in data.domains.values():
                chosen = samples[: args.limit] if args.limit else samples
                images, _ = stack(chosen)
                embeddings.append(encoder_forward(images, ck.params, ck.config.encoder,
                                                  use_fusion=t.low_level_fusion, use_filter=t.channel_filter))
    export_prototypes(ck.params["prompt.bank"].detach(), embeddings, args.out)
    n_emb = sum(e.shape[0] for e in embeddings)
    print(f"exported {ck.params['prompt.bank'].shape[0]} bank rows and {n_emb} raw/adapted pairs to {args.out}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dapsam", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen-data", help="generate the synthetic multi-domain suite")
    s.add_argument("--config", help="JSON config (its 'data' section is used); defaults when omitted")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--overwrite", action="store_true")
    s.set_defaults(func=_cmd_gen_data)

    s = sub.add_parser("train", help="train on the configured source domain")
    s.add_argument("--config", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=_cmd_train)

    s = sub.add_parser("eval", help="leave-one-domain-out evaluation of a checkpoint")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--report", required=True)
    s.add_argument("--train-domain")
    s.set_defaults(func=_cmd_eval)

    s = sub.add_parser("ablate", help="component ablation and memory-bank size sweep")
    s.add_argument("--config", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=_cmd_ablate)

    s = sub.add_parser("gradcheck", help="finite-difference gradient check of one component")
    s.add_argument("--component", required=True, choices=("adapter", "filter", "prompt", "decoder", "loss", "encoder"))
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--tol", type=float, default=1e-4)
    s.set_defaults(func=_cmd_gradcheck)

    s = sub.add_parser("export-prototypes", help="dump memory-bank rows (and optional data prototypes) to CSV")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--data", help="also export raw/adapted prototypes of this suite's samples")
    s.add_argument("--limit", type=int, default=0, help="samples per domain when --data is given (0 = all)")
    s.set_defaults(func=_cmd_export)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args) or 0
    except DapsamError as exc:
        print(f"dapsam: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
