"""Command-line front end: plan, train, deploy, eval, report, histogram, rerun.

Exit codes: 0 ok, 1 usage, 2 data error, 3 validation error, 4 numerical
divergence.
"""
from __future__ import annotations

import argparse
import contextlib
import csv
import dataclasses
import datetime as dt
import hashlib
import io
import json
import logging
import os
import sys
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import __version__
from .analysis import EnergyModel, accuracy_report, read_eval_csv, weight_histogram
from .core_model import ContinuousNetwork, DeployedNetwork
from .dataio import AUGMENT_PRESETS, load_idx, load_mnist
from .deploy_sim import deploy, evaluate, reports_to_csv
from .errors import (ConfigError, DataError, DivergenceError, NetworkFileError,
                     NumericalError, XbarError)
from .serialization import load_network, save_network, write_json_atomic
from .topology import (TopologyError, load_topology_spec, plan_from_spec,
                       tile_positions, validate)
from .trainer import TrainConfig, load_checkpoint, save_checkpoint, train

log = logging.getLogger("xbarnet")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_VALIDATION, EXIT_DIVERGENCE = 0, 1, 2, 3, 4


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------------------
# run manifest

def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


class RunManifest:
    """Written atomically when a command starts and again when it ends."""

    def __init__(self, path: Path, argv: list[str], config: str | None,
                 seed: int | None, output: str | None):
        self.path = path
        self.data = {
            "tool": f"xbarnet {__version__}",
            "command": list(argv),
            "cwd": os.getcwd(),
            "configPath": config,
            "seed": seed,
            "output": output,
            "startedAt": dt.datetime.now(dt.timezone.utc).isoformat(),
            "finishedAt": None,
            "status": "running",
            "artifacts": {},
        }

    def write(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        write_json_atomic(self.path, self.data)

    def finish(self, status: str, artifacts=()):
        self.data["status"] = status
        self.data["finishedAt"] = dt.datetime.now(dt.timezone.utc).isoformat()
        self.data["artifacts"] = {str(p): _sha256(Path(p)) for p in artifacts
                                  if Path(p).is_file()}
        self.write()


@contextlib.contextmanager
def _manifest(args, path, seed=None, output=None):
    m = RunManifest(path, args.argv, getattr(args, "config", None), seed, output)
    m.write()
    artifacts: list[Path] = []
    try:
        yield artifacts
    except BaseException:
        m.finish("error", artifacts)
        raise
    m.finish("ok", artifacts)


def _write_text(path: str | None, text: str):
    if path is None:
        sys.stdout.write(text)
        return
    tmp = Path(str(path) + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def _manifest_path(args, out: str | None = None) -> Path:
    """Explicit ``--manifest``, else next to the output file, else in the cwd."""
    if args.manifest:
        return Path(args.manifest)
    if out:
        return Path(str(out) + ".manifest.json")
    return Path(f"xbarnet-{args.command}.manifest.json")


# ---------------------------------------------------------------------------
# data

def _load_data(args, split: str):
    images = getattr(args, "images", None)
    labels = getattr(args, "labels", None)
    if images or labels:
        if not (images and labels):
            raise UsageError("--images and --labels must be given together")
        data = load_idx(images, labels)
    elif args.data:
        try:
            data = load_mnist(args.data, split)
        except FileNotFoundError as exc:
            raise DataError(str(exc)) from exc
    else:
        raise UsageError("no data given: use --data DIR or --images/--labels")
    limit = getattr(args, "limit", None)
    if limit:
        data = data.subset(slice(0, limit))
    return data


def _limit_threads(n):
    if not n:
        return contextlib.nullcontext()
    return threadpool_limits(n)


# ---------------------------------------------------------------------------
# commands

def cmd_plan(args) -> int:
    spec = load_topology_spec(args.topology)
    if args.block is not None:
        layers = list(spec.layers)
        layers[0] = dataclasses.replace(layers[0], block_size=args.block[0],
                                        stride=args.block[1])
        spec = dataclasses.replace(spec, layers=tuple(layers))
    with _manifest(args, _manifest_path(args, args.out), output=args.out) as artifacts:
        try:
            plan = plan_from_spec(spec)
        except TopologyError as exc:
            # still show how the first layer tiles before reporting the problem
            h, w, _ = spec.input_shape
            first = spec.layers[0]
            rows = tile_positions(h, first.block_size, first.stride, 1)
            cols = tile_positions(w, first.block_size, first.stride, 1)
            grids, total, problems = [[len(rows), len(cols)]], None, [str(exc)]
            text = f"layers: {len(spec.layers)}, cores: unknown\n" \
                   f"  layer 1: grid {len(rows)}x{len(cols)}\n"
        else:
            problems = validate(plan)
            grids, total = [list(g) for g in plan.grids], plan.total_cores
            text = plan.summary() + "\n"
        text += "valid\n" if not problems else "".join(f"violation: {p}\n" for p in problems)
        print(text, end="")
        if args.out:
            doc = {"topologySpec": spec.to_dict(), "grids": grids,
                   "totalCores": total, "violations": problems}
            write_json_atomic(args.out, doc)
            artifacts.append(Path(args.out))
    return EXIT_VALIDATION if problems else EXIT_OK


def _train_config(args) -> tuple[TrainConfig, str]:
    base = {}
    topology = "mnist-small"
    if args.config:
        try:
            cfg_doc = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
        topology = cfg_doc.get("topology", topology)
        if isinstance(topology, dict):
            spec_path = Path(args.out) / "topology.json"
            Path(args.out).mkdir(parents=True, exist_ok=True)
            spec_path.write_text(json.dumps(topology))
            topology = str(spec_path)
        base = dict(cfg_doc.get("train", {}))
    overrides = {
        "total_iterations": args.iterations, "batch_size": args.batch, "lr0": args.lr0,
        "lr_decay_factor": args.lr_decay, "lr_decay_every": args.lr_decay_every,
        "sigma_floor": args.sigma_floor, "seed": args.seed, "template": args.template,
        "log_every": args.log_every, "init_width": args.init_width,
    }
    base.update({k: v for k, v in overrides.items() if v is not None})
    if args.aug is not None:
        aug = AUGMENT_PRESETS[args.aug]
        base["augment"] = dataclasses.asdict(aug) if aug else None
    if args.topology:
        topology = args.topology
    if "total_iterations" not in base:
        raise UsageError("--iterations is required")
    try:
        return TrainConfig.from_json(base), topology
    except TypeError as exc:
        raise ConfigError(f"bad training config: {exc}") from exc


def cmd_train(args) -> int:
    cfg, topology = _train_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    spec = load_topology_spec(topology)
    if args.template is None and not (args.config and "template" in
                                      json.loads(Path(args.config).read_text()).get("train", {})):
        cfg = dataclasses.replace(cfg, template=spec.template)
    plan = plan_from_spec(spec)
    problems = validate(plan)
    if problems:
        raise ConfigError("; ".join(problems))
    data = _load_data(args, "train")
    with _manifest(args, Path(args.manifest) if args.manifest else out / "manifest.json",
                   seed=cfg.seed, output=str(out)) as artifacts:
        log_path = out / "train_log.csv"
        log_fh = open(log_path, "w", newline="")
        writer = csv.writer(log_fh, lineterminator="\n")
        writer.writerow(["iteration", "lr", "loss"])
        artifacts.append(log_path)

        def on_log(it, lr, loss_value):
            writer.writerow([it, repr(lr), f"{loss_value:.8f}"])
            log_fh.flush()

        def checkpoint(run):
            path = out / f"checkpoint_{run.iteration:08d}.json"
            save_checkpoint(run, path)
            artifacts.append(path)

        try:
            with _limit_threads(args.threads):
                run = train(cfg, plan, data, on_log=on_log, checkpoint_fn=checkpoint,
                            checkpoint_every=args.checkpoint_every)
        except DivergenceError as exc:
            if exc.last_good is not None:
                path = out / "checkpoint_last_good.json"
                save_checkpoint(exc.last_good, path)
                artifacts.append(path)
            raise
        finally:
            log_fh.close()
        final = out / "checkpoint_final.json"
        save_checkpoint(run, final)
        artifacts.append(final)
        print(f"trained {run.iteration} iterations -> {final}")
    return EXIT_OK


def cmd_deploy(args) -> int:
    with _manifest(args, _manifest_path(args, args.out), output=args.out) as artifacts:
        src = load_network(args.checkpoint)
        if isinstance(src, DeployedNetwork):
            raise ConfigError(f"{args.checkpoint} is already deployed")
        net = deploy(src)
        save_network(net, args.out)
        artifacts.append(Path(args.out))
        print(f"deployed {net.plan.total_cores} cores -> {args.out}")
    return EXIT_OK


def _parse_ticks(text: str) -> list[int]:
    try:
        ticks = sorted({int(t) for t in text.split(",") if t.strip()})
    except ValueError:
        raise UsageError(f"bad --ticks value {text!r}")
    if not ticks or ticks[0] < 1:
        raise UsageError("--ticks needs positive integers")
    return ticks


def cmd_eval(args) -> int:
    if not args.networks:
        raise UsageError("eval needs at least one network file")
    ticks = _parse_ticks(args.ticks)
    with _manifest(args, _manifest_path(args, args.out), output=args.out) as artifacts:
        nets = []
        for path in args.networks:
            net = load_network(path)
            if isinstance(net, ContinuousNetwork):
                net = deploy(net)
            nets.append(net)
        data = _load_data(args, args.split)
        ens = Path(args.networks[0]).stem if len(nets) == 1 else f"E{len(nets)}"
        reports = [evaluate(nets, data, t, threads=args.threads or os.cpu_count() or 1, ensemble_id=ens)
                   for t in ticks]
        _write_text(args.out, reports_to_csv(reports))
        if args.out:
            artifacts.append(Path(args.out))
    return EXIT_OK


def cmd_report(args) -> int:
    energy = EnergyModel(args.e_static, args.e_spike)
    with _manifest(args, _manifest_path(args, args.out), output=args.out) as artifacts:
        rows = []
        for path in args.evals:
            try:
                rows.extend(read_eval_csv(Path(path).read_text()))
            except (OSError, KeyError, ValueError) as exc:
                raise DataError(f"{path}: unreadable evaluation CSV: {exc}") from exc
        _write_text(args.out, accuracy_report(rows, energy))
        if args.out:
            artifacts.append(Path(args.out))
    return EXIT_OK


def cmd_histogram(args) -> int:
    with _manifest(args, _manifest_path(args, args.out), output=args.out) as artifacts:
        net = load_network(args.network)
        if isinstance(net, ContinuousNetwork):
            net = deploy(net)
        hist = weight_histogram(net)
        _write_text(args.out, hist.to_csv())
        if args.out:
            artifacts.append(Path(args.out))
        log.info("zero effective weights: %.4f", hist.zero_fraction())
    return EXIT_OK


@contextlib.contextmanager
def _chdir(path):
    old = os.getcwd()
    os.chdir(path)
    try:
        yield
    finally:
        os.chdir(old)


def cmd_rerun(args) -> int:
    try:
        doc = json.loads(Path(args.manifest_file).read_text())
        argv = list(doc["command"])
        cwd = doc.get("cwd") or os.getcwd()
    except (OSError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise DataError(f"cannot read manifest {args.manifest_file}: {exc}") from exc
    # relative paths in the recorded command refer to the original directory
    with _chdir(cwd):
        return main(argv)


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="xbarnet", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    p.add_argument("--manifest", help="where to write the run manifest")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    sp = sub.add_parser("plan", help="compile a topology and print its core grid")
    sp.add_argument("topology", help="preset (mnist-small, mnist-large) or spec JSON file")
    sp.add_argument("--block", type=int, nargs=2, metavar=("SIZE", "STRIDE"),
                    help="override the first layer's block size and stride")
    sp.add_argument("--out", help="write the plan summary as JSON")
    sp.set_defaults(func=cmd_plan)

    sp = sub.add_parser("train", help="train a network")
    sp.add_argument("--config", help="JSON config with 'topology' and 'train' sections")
    sp.add_argument("--topology", help="preset name or topology spec file")
    sp.add_argument("--data", help="directory with MNIST IDX files")
    sp.add_argument("--images")
    sp.add_argument("--labels")
    sp.add_argument("--limit", type=int, help="use only the first N training images")
    sp.add_argument("--out", required=True, help="output directory")
    sp.add_argument("--iterations", type=int)
    sp.add_argument("--batch", type=int)
    sp.add_argument("--lr0", type=float)
    sp.add_argument("--lr-decay", type=float)
    sp.add_argument("--lr-decay-every", type=int)
    sp.add_argument("--sigma-floor", type=float)
    sp.add_argument("--aug", choices=sorted(AUGMENT_PRESETS))
    sp.add_argument("--template", choices=["s1", "s2"])
    sp.add_argument("--seed", type=int)
    sp.add_argument("--init-width", type=float,
                    help="initial c drawn uniformly from 0.5 +/- width/2 (default 0.1)")
    sp.add_argument("--log-every", type=int)
    sp.add_argument("--checkpoint-every", type=int, default=0)
    sp.add_argument("--threads", type=int)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("deploy", help="binarize a checkpoint into a deployed network")
    sp.add_argument("checkpoint")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_deploy)

    sp = sub.add_parser("eval", help="evaluate one network or an ensemble")
    sp.add_argument("networks", nargs="*")
    sp.add_argument("--data", help="directory with MNIST IDX files")
    sp.add_argument("--images")
    sp.add_argument("--labels")
    sp.add_argument("--split", default="test", choices=["train", "test"])
    sp.add_argument("--limit", type=int, help="evaluate only the first N images")
    sp.add_argument("--ticks", default="1")
    sp.add_argument("--out", help="CSV output (default stdout)")
    sp.add_argument("--threads", type=int, help="worker threads (default: all CPUs)")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("report", help="accuracy/energy table from eval CSVs")
    sp.add_argument("evals", nargs="+")
    sp.add_argument("--e-static", type=float, default=1.0,
                    help="energy per core per tick")
    sp.add_argument("--e-spike", type=float, default=0.0, help="energy per spike")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_report)

    sp = sub.add_parser("histogram", help="effective weight and leak histograms")
    sp.add_argument("network")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_histogram)

    sp = sub.add_parser("rerun", help="repeat the command recorded in a manifest")
    sp.add_argument("manifest_file", metavar="manifest")
    sp.set_defaults(func=cmd_rerun)
    return p


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        args.argv = argv
        if args.command is None:
            raise UsageError(parser.format_usage().strip())
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"numerical divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except (DataError, NetworkFileError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except XbarError as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
