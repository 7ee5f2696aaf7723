"""Command-line interface.

One binary, subcommand style. Machine-readable outputs (CSV/JSON) are the
primary artifacts; every run writes a run.json provenance record (resolved
arguments, package/runtime versions) into the output directory so it can
be reproduced exactly. BREPS_LOG controls logging verbosity.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .attack import AttackConfig, run_attacks, sweep_lambda
from .bridge import BridgeClient, BridgeEndpoint
from .data import (
    load_annotations,
    load_corpus,
    make_toy_corpus,
    write_corpus,
)
from .errors import BrepsError, InvalidInputError
from .geometry import ciou_loss
from .metrics import robustness_report, user_spread_report
from .oracle import exhaustive_centered, render_heatmap
from .realism import (
    DEFAULT_REALISM,
    GammaRealismModel,
    fit_gamma,
    log_pdf,
    mala_sample,
)
from .segmodel import ToyModel

logger = logging.getLogger(__name__)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="breps",
        description="Bounding-box prompt robustness evaluation toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, corpus=True, model=False, attack=False):
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--workers", type=int, default=os.cpu_count() or 1)
        if corpus:
            p.add_argument("--corpus", required=True, help="corpus directory (manifest.json)")
        if model:
            p.add_argument(
                "--model",
                default="toy",
                help="'toy', 'bridge:stdio:<cmd>' or 'bridge:tcp:<host>:<port>'",
            )
            p.add_argument("--timeout-ms", type=int, default=30_000)
        if attack:
            p.add_argument("--lambda", dest="lam", type=float, default=0.1)
            p.add_argument("--steps", type=int, default=50)
            p.add_argument("--lr", type=float, default=9.0)
            p.add_argument("--realism", help="realism model JSON (defaults to the study fit)")

    p = sub.add_parser("gen-corpus", help="generate a synthetic toy corpus")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--size", type=int, required=True)
    common(p, corpus=False)

    p = sub.add_parser("fit-realism", help="fit the Gamma realism model from CIoU samples")
    p.add_argument("--input", required=True, help="CSV with a single 'ciou_loss' column")
    p.add_argument("--x-clamp", type=float, default=DEFAULT_REALISM.x_clamp)
    common(p, corpus=False)

    p = sub.add_parser("sample", help="draw human-plausible boxes around each tight box")
    p.add_argument("--n", type=int, default=100)
    p.add_argument("--step", type=float, default=None)
    p.add_argument("--burn-in", type=int, default=500)
    p.add_argument("--thin", type=int, default=1)
    p.add_argument("--realism", help="realism model JSON")
    common(p)

    p = sub.add_parser("attack", help="run the min/max prompt attack per instance")
    p.add_argument("--mode", choices=("min", "max"), required=True)
    common(p, model=True, attack=True)

    p = sub.add_parser("sweep-lambda", help="trade-off sweep over the realism weight")
    p.add_argument("--lambdas", default="0,0.01,0.05,0.1,0.5,1.0")
    common(p, model=True, attack=True)

    p = sub.add_parser("heatmap", help="centered exhaustive sweep and IoU heatmap")
    p.add_argument("--instance", required=True)
    p.add_argument("--stride", type=int, default=1)
    p.add_argument("--png", action="store_true")
    common(p, model=True)

    p = sub.add_parser("evaluate", help="evaluate user annotations against a model")
    p.add_argument("--annotations", required=True)
    common(p, model=True)

    p = sub.add_parser("report", help="Tight/Min/Max/Delta robustness report")
    common(p, model=True, attack=True)
    return parser


def _setup_logging() -> None:
    level = os.environ.get("BREPS_LOG", "warning").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING))


def _write_run_record(args: argparse.Namespace, out: Path) -> None:
    record = {
        "command": args.command,
        "args": {k: v for k, v in vars(args).items() if k != "command"},
        "versions": {
            "breps": __version__,
            "python": sys.version.split()[0],
            "numpy": np.__version__,
        },
    }
    out.mkdir(parents=True, exist_ok=True)
    (out / "run.json").write_text(json.dumps(record, indent=2, default=str))


def _write_csv(path: Path, header: list[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([repr(v) if isinstance(v, float) else v for v in row])


def _load_realism(spec: str | None) -> GammaRealismModel:
    if not spec:
        return DEFAULT_REALISM
    blob = json.loads(Path(spec).read_text())
    return GammaRealismModel(
        k=blob["k"], theta=blob["theta"], x_clamp=blob.get("x_clamp", DEFAULT_REALISM.x_clamp)
    )


def _open_model(args: argparse.Namespace, instances):
    """Build the model named by --model; returns (model, workers, closer)."""
    spec = getattr(args, "model", "toy")
    workers = args.workers
    if spec == "toy":
        return ToyModel(instances), workers, lambda: None
    if spec.startswith("bridge:"):
        endpoint = BridgeEndpoint(
            transport=spec[len("bridge:") :], timeout_ms=args.timeout_ms
        )
        client = BridgeClient(endpoint)
        known = set(client.server_images())
        for inst in instances:
            if inst.image_id not in known:
                client.register_instance(inst)
        if workers != 1:
            logger.info("bridge model: forcing --workers 1 (single connection)")
        return client, 1, client.close
    raise InvalidInputError(f"unknown model spec {spec!r}")


def _attack_config(args: argparse.Namespace, mode: str) -> AttackConfig:
    return AttackConfig(
        mode=mode,
        lam=args.lam,
        steps=args.steps,
        base_lr=args.lr,
        seed=args.seed,
    )


# --- subcommand handlers -------------------------------------------------------


def _cmd_gen_corpus(args, out: Path) -> None:
    instances = make_toy_corpus(args.n, args.size, args.seed)
    write_corpus(out, instances, meta={"seed": args.seed, "size": args.size, "n": args.n})
    logger.info("wrote %d instances to %s", len(instances), out)


def _cmd_fit_realism(args, out: Path) -> None:
    with open(args.input, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["ciou_loss"]:
            raise InvalidInputError("input CSV must have the single header 'ciou_loss'")
        try:
            samples = [float(row[0]) for row in reader if row]
        except ValueError as exc:
            raise InvalidInputError(f"bad sample value: {exc}") from None
    model = fit_gamma(samples, x_clamp=args.x_clamp)
    (out / "realism.json").write_text(
        json.dumps({"k": model.k, "theta": model.theta, "x_clamp": model.x_clamp})
    )


def _cmd_sample(args, out: Path) -> None:
    instances = load_corpus(args.corpus)
    realism = _load_realism(args.realism)
    rows = []
    for inst in instances:
        kwargs = dict(burn_in=args.burn_in, seed=args.seed, thin=args.thin)
        if args.step is not None:
            kwargs["step"] = args.step
        boxes = mala_sample(realism, inst.tight, inst.width, inst.height, args.n, **kwargs)
        rows.extend(
            (inst.image_id, b.x1, b.y1, b.x2, b.y2) for b in boxes
        )
    _write_csv(out / "samples.csv", ["image_id", "x1", "y1", "x2", "y2"], rows)


def _cmd_attack(args, out: Path) -> None:
    instances = load_corpus(args.corpus)
    realism = _load_realism(args.realism)
    model, workers, closer = _open_model(args, instances)
    try:
        cfg = _attack_config(args, args.mode)
        results = run_attacks(model, instances, cfg, realism, workers)
        rows = []
        for inst, res in zip(instances, results):
            if res is None:
                logger.warning("attack aborted for %s", inst.image_id)
                continue
            (out / f"attack_{inst.image_id}.json").write_text(
                json.dumps(res.to_json_dict())
            )
            tight_iou = model.eval(inst.image_id, inst.tight).iou
            rows.append(
                (inst.image_id, args.mode, tight_iou, res.final_iou, res.final_log_pdf)
            )
        _write_csv(
            out / "attacks.csv",
            ["image_id", "mode", "iou_tight", "iou_final", "log_pdf_final"],
            rows,
        )
    finally:
        closer()


def _cmd_sweep_lambda(args, out: Path) -> None:
    instances = load_corpus(args.corpus)
    realism = _load_realism(args.realism)
    try:
        lambdas = [float(tok) for tok in args.lambdas.split(",") if tok.strip() != ""]
    except ValueError:
        raise InvalidInputError(f"bad --lambdas list: {args.lambdas!r}") from None
    model, workers, closer = _open_model(args, instances)
    try:
        rows = sweep_lambda(
            model, instances, lambdas, _attack_config(args, "min"), realism, workers
        )
        _write_csv(
            out / "sweep.csv",
            ["lambda", "iou_delta", "log_pdf"],
            [(r.lam, r.iou_delta, r.log_pdf) for r in rows],
        )
    finally:
        closer()


def _cmd_heatmap(args, out: Path) -> None:
    instances = load_corpus(args.corpus)
    by_id = {inst.image_id: inst for inst in instances}
    if args.instance not in by_id:
        raise InvalidInputError(f"instance {args.instance!r} not in corpus")
    inst = by_id[args.instance]
    model, _, closer = _open_model(args, [inst])
    try:
        heat, lo, hi = exhaustive_centered(model, inst, stride=args.stride)
        tight_iou = model.eval(inst.image_id, inst.tight).iou
        render_heatmap(heat, out / f"heatmap_{inst.image_id}", png=args.png)
        summary = {
            "min": {"bbox": list(lo.bbox.as_array()), "iou": lo.iou},
            "max": {"bbox": list(hi.bbox.as_array()), "iou": hi.iou},
            "tight_iou": tight_iou,
        }
        (out / f"heatmap_{inst.image_id}.json").write_text(json.dumps(summary))
    finally:
        closer()


def _cmd_evaluate(args, out: Path) -> None:
    instances = load_corpus(args.corpus)
    annotations = load_annotations(args.annotations)
    model, _, closer = _open_model(args, instances)
    try:
        report = user_spread_report(model, instances, annotations)
    finally:
        closer()
    rows = []
    for row in report.rows:
        devices = {}
        for dev in ("desktop", "mobile"):
            stats = row.per_device.get(dev)
            devices[dev] = (
                (stats.mean, stats.std if stats.std is not None else "")
                if stats
                else ("", "")
            )
        rows.append(
            (
                row.image_id,
                len(row.ious),
                row.mean,
                row.std if row.std is not None else "",
                *devices["desktop"],
                *devices["mobile"],
            )
        )
    _write_csv(
        out / "user_spread.csv",
        [
            "image_id",
            "n_users",
            "mean_iou",
            "std_iou",
            "desktop_mean",
            "desktop_std",
            "mobile_mean",
            "mobile_std",
        ],
        rows,
    )
    summary = {
        "mean_iou": report.mean_iou,
        "mean_std": report.mean_std,
        "per_device": {
            dev: {"mean": st.mean, "std": st.std, "n": st.n}
            for dev, st in report.per_device.items()
        },
    }
    (out / "user_spread.json").write_text(json.dumps(summary))


def _cmd_report(args, out: Path) -> None:
    instances = load_corpus(args.corpus)
    realism = _load_realism(args.realism)
    model, workers, closer = _open_model(args, instances)
    try:
        report = robustness_report(
            model, instances, _attack_config(args, "min"), realism, workers
        )
    finally:
        closer()
    _write_csv(
        out / "robustness.csv",
        ["image_id", "iou_tight", "iou_min", "iou_max", "iou_delta"],
        [(r.image_id, r.iou_tight, r.iou_min, r.iou_max, r.iou_delta) for r in report.rows],
    )
    summary = {
        "mean": {
            "tight": report.mean_iou_tight,
            "min": report.mean_iou_min,
            "max": report.mean_iou_max,
            "delta": report.mean_iou_delta,
        },
        "n_instances": len(report.rows),
        "n_failed": report.n_failed,
    }
    (out / "robustness.json").write_text(json.dumps(summary))


_HANDLERS = {
    "gen-corpus": _cmd_gen_corpus,
    "fit-realism": _cmd_fit_realism,
    "sample": _cmd_sample,
    "attack": _cmd_attack,
    "sweep-lambda": _cmd_sweep_lambda,
    "heatmap": _cmd_heatmap,
    "evaluate": _cmd_evaluate,
    "report": _cmd_report,
}


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse uses 2 for usage errors
        return int(exc.code or 0)
    out = Path(args.out)
    try:
        _write_run_record(args, out)
        _HANDLERS[args.command](args, out)
    except BrepsError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
