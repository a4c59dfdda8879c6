"""Command line entry point: gen-data, train, eval and dcam subcommands.

Exit codes: 0 on success, 1 for usage, config or input errors, 2 when a
request is refused on domain grounds (dense maps from the baseline).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import FORMAT_VERSION, __version__
from .dcam import DCAMRefused, compute_dcam, export_slices, refusal_message, save_dcam
from .evaluation import write_metrics_csv
from .nn import baseline_topology, load_checkpoint, proposed_topology
from .nn.checkpoint import FORMAT_VERSION as CHECKPOINT_FORMAT_VERSION
from .phantom import generate_dataset
from .pipeline import ConfigError, evaluate, load_config, train
from .volume import MANIFEST_NAME, FormatError, check_divisible, load_dataset, save_dataset

log = logging.getLogger("densecluster")

EXIT_OK, EXIT_USAGE, EXIT_REFUSED = 0, 1, 2
RUN_MANIFEST = "manifest.json"
REFUSAL_FILE = "dcam_refused.txt"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage; 2 is reserved for refusals here
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _dims(text: str) -> tuple[int, int, int]:
    parts = text.lower().replace("x", ",").split(",")
    try:
        vals = tuple(int(p) for p in parts if p.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad dims {text!r}") from None
    if len(vals) == 1:
        vals = vals * 3
    if len(vals) != 3 or min(vals) < 1:
        raise argparse.ArgumentTypeError(f"dims must be N or D,H,W, got {text!r}")
    return vals


def version_string() -> str:
    return (f"densecluster {__version__} (format {FORMAT_VERSION}, "
            f"checkpoint format {CHECKPOINT_FORMAT_VERSION})")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="densecluster", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=version_string())
    p.add_argument("--threads", type=int, default=1,
                   help="cap on BLAS/OpenMP threads (default 1 for bit-stable runs)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="write a synthetic phantom dataset")
    g.add_argument("--classes", type=int, required=True)
    g.add_argument("--per-class", type=int, required=True)
    g.add_argument("--dims", type=_dims, default=(16, 16, 16), help="N or D,H,W")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--variant", choices=("proposed", "baseline"), default="proposed",
                   help="network the data must fit (sets the divisibility check)")
    g.add_argument("--out", type=Path, required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a feature network by deep clustering")
    t.add_argument("--config", type=Path, required=True)
    t.add_argument("--data", type=Path, required=True)
    t.add_argument("--out", type=Path, required=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="cluster a dataset with frozen checkpoints and score it")
    e.add_argument("--checkpoint", action="append", required=True,
                   help="checkpoint stem; repeat to compare several")
    e.add_argument("--method", action="append",
                   help="row label per checkpoint (default: the network variant)")
    e.add_argument("--data", type=Path, required=True)
    e.add_argument("--out", type=Path, required=True)
    e.add_argument("--k", type=int, help="clusters (default: number of true classes)")
    e.add_argument("--seed", type=int, default=0, help="k-means seed")
    e.set_defaults(func=cmd_eval)

    d = sub.add_parser("dcam", help="export dense clustering activation map slices")
    d.add_argument("--checkpoint", required=True)
    d.add_argument("--data", type=Path, required=True)
    d.add_argument("--subject", required=True)
    d.add_argument("--channel", type=int, help="cluster channel (default: assigned cluster)")
    d.add_argument("--axis", default="z", help="z|y|x or axial|coronal|sagittal")
    d.add_argument("--out", type=Path, required=True)
    d.add_argument("--dump", action="store_true", help="also write the raw maps")
    d.set_defaults(func=cmd_dcam)
    return p


def cmd_gen_data(args) -> int:
    if args.classes < 2:
        raise UsageError("--classes must be at least 2")
    if args.per_class < 1:
        raise UsageError("--per-class must be at least 1")
    topo = proposed_topology() if args.variant == "proposed" else baseline_topology()
    try:
        check_divisible(args.dims, topo.factor)
    except ValueError as e:
        raise UsageError(f"{e} (required by the {args.variant} network)") from None
    ds = generate_dataset(args.classes, args.per_class, args.dims, args.seed)
    manifest = save_dataset(ds, args.out)
    print(f"wrote {len(ds)} subjects to {manifest}")
    return EXIT_OK


def cmd_train(args) -> int:
    config = load_config(args.config)
    data = load_dataset(args.data)
    args.out.mkdir(parents=True, exist_ok=True)
    data_manifest = args.data / MANIFEST_NAME if args.data.is_dir() else args.data
    run = {
        "tool": "densecluster",
        "version": __version__,
        "format_version": FORMAT_VERSION,
        "config": config.to_dict(),
        "seeds": dataclasses.asdict(config.seeds),
        "dataset_manifest": str(data_manifest.resolve()),
        "output_dir": str(args.out.resolve()),
        "subjects": len(data),
        "epochs_completed": 0,
    }
    manifest = args.out / RUN_MANIFEST
    manifest.write_text(json.dumps(run, indent=1) + "\n")
    _, _, logs = train(config, data, out_dir=args.out)
    run["epochs_completed"] = len(logs)
    run["flagged_epochs"] = [e.epoch for e in logs if e.flagged]
    manifest.write_text(json.dumps(run, indent=1) + "\n")
    print(f"trained {len(logs)} epochs; outputs in {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    methods = args.method or []
    if len(methods) > len(args.checkpoint):
        raise UsageError("more --method labels than --checkpoint arguments")
    data = load_dataset(args.data)
    k = args.k or data.k_true
    if k < 2:
        raise UsageError("need k >= 2 clusters; pass --k for unlabeled data")
    reports, raw_reports = [], []
    for i, ckpt in enumerate(args.checkpoint):
        net, _, _ = load_checkpoint(ckpt)
        method = methods[i] if i < len(methods) else net.topology.variant
        ev = evaluate(net, data, k, method, seed=args.seed)
        reports.append(ev.report)
        raw_reports.append(ev.raw_report)
    args.out.mkdir(parents=True, exist_ok=True)
    write_metrics_csv(args.out / "metrics.csv", reports)
    write_metrics_csv(args.out / "metrics_raw.csv", raw_reports)
    for r in reports:
        print(r.csv_row())
    return EXIT_OK


def cmd_dcam(args) -> int:
    net, head, _ = load_checkpoint(args.checkpoint)
    subject = load_dataset(args.data).by_id(args.subject)
    try:
        dcam = compute_dcam(net, head, subject)
    except DCAMRefused:
        args.out.mkdir(parents=True, exist_ok=True)
        (args.out / REFUSAL_FILE).write_text(
            f"{args.checkpoint}: {refusal_message(net)}; no maps were written\n")
        raise
    channel = dcam.cluster if args.channel is None else args.channel
    paths = export_slices(dcam, channel, args.axis, args.out)
    if args.dump:
        save_dcam(dcam, args.out / f"{dcam.subject_id}_dcam")
    print(f"subject {dcam.subject_id}: cluster {dcam.cluster}, wrote {len(paths)} slices "
          f"of channel {channel}")
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads < 1:
        parser.error("--threads must be at least 1")
    try:
        with threadpool_limits(limits=args.threads):
            return args.func(args)
    except DCAMRefused as e:
        print(f"refused: {e}", file=sys.stderr)
        return EXIT_REFUSED
    except KeyError as e:
        print(f"error: {e.args[0]}", file=sys.stderr)
        return EXIT_USAGE
    except (UsageError, ConfigError, FormatError, ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
