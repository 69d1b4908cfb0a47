"""Command-line surface: training, stream adaptation, experiment runs, serving.

Every failure exits nonzero with one machine-parseable stderr line of the form
``error: <Code>: <message>`` so wrappers can dispatch on the code.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import fields

import numpy as np

from .bn_adapt import BnLayer, bn_entropy_step, bn_forward
from .classifier import AdaptConfig, adapt_step
from .errors import AdanpcError, BadParams
from .harness import (
    BaselineSpec,
    bench_inference,
    make_rotated_sequence,
    run_successive,
    write_bench_csv,
    write_successive_csv,
)
from .memory_bank import snapshot_load
from .theory_lab import (
    Prop1Config,
    Prop2Config,
    Prop3Config,
    run_prop1,
    run_prop2,
    run_prop3,
    write_report_csv,
)
from .trainer import (
    EncoderParams,
    KnnLossConfig,
    LabeledDataset,
    init_encoder,
    train,
)

BN_REFRESH_EVERY = 16  # entropy step cadence for --bn-adapt, matches the harness


class CliError(Exception):
    """Operator-facing failure with a short machine-parseable code."""

    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


class _Parser(argparse.ArgumentParser):
    # argparse prints multi-line usage on bad flags; fold that into the
    # single-line error contract instead
    def error(self, message):
        raise CliError("UsageError", message)


def save_encoder(params: EncoderParams, path) -> None:
    arrays: dict[str, np.ndarray] = {"n_layers": np.array(len(params.layers))}
    for i, (w, b) in enumerate(params.layers):
        arrays[f"w{i}"] = w
        arrays[f"b{i}"] = b
    if params.bn is not None:
        arrays["bn_gamma"] = params.bn.gamma
        arrays["bn_beta"] = params.bn.beta
        arrays["bn_mean"] = params.bn.running_mean
        arrays["bn_var"] = params.bn.running_var
        arrays["bn_momentum"] = np.array(params.bn.momentum)
    np.savez(path, **arrays)


def load_encoder(path) -> EncoderParams:
    with np.load(path) as data:
        n = int(data["n_layers"])
        layers = [(data[f"w{i}"], data[f"b{i}"]) for i in range(n)]
        bn = None
        if "bn_gamma" in data:
            bn = BnLayer(
                gamma=data["bn_gamma"],
                beta=data["bn_beta"],
                running_mean=data["bn_mean"],
                running_var=data["bn_var"],
                momentum=float(data["bn_momentum"]),
            )
    return EncoderParams(layers=layers, bn=bn)


def _load_json(path) -> dict:
    try:
        with open(path) as fh:
            body = json.load(fh)
    except FileNotFoundError:
        raise CliError("FileNotFound", f"no such file: {path}")
    except json.JSONDecodeError as exc:
        raise CliError("BadConfig", f"{path} is not valid JSON ({exc})")
    if not isinstance(body, dict):
        raise CliError("BadConfig", f"{path} must hold a JSON object")
    return body


def _load_stream(path) -> tuple[np.ndarray, np.ndarray | None]:
    try:
        data = np.load(path)
    except FileNotFoundError:
        raise CliError("FileNotFound", f"no such file: {path}")
    except Exception as exc:
        raise CliError("BadPack", f"cannot read stream pack {path} ({exc})")
    if "x" not in data:
        raise CliError("BadPack", f"stream pack {path} lacks array 'x'")
    x = np.asarray(data["x"], dtype=np.float64)
    if x.ndim != 2:
        raise CliError("BadPack", f"stream 'x' must be 2-D, got shape {x.shape}")
    y = np.asarray(data["y"], dtype=np.int64) if "y" in data else None
    if y is not None and len(y) != len(x):
        raise CliError("BadPack", "stream 'y' length differs from 'x'")
    return x, y


def _parse_seeds(text: str) -> list[int]:
    """Comma list with inclusive ranges: "0,1,2" or "0-29" or "0-4,10"."""
    seeds: list[int] = []
    for token in text.split(","):
        token = token.strip()
        if not token:
            continue
        if "-" in token[1:]:
            lo, _, hi = token.partition("-")
            try:
                a, b = int(lo), int(hi)
            except ValueError:
                raise CliError("UsageError", f"bad seed range {token!r}")
            if b < a:
                raise CliError("UsageError", f"empty seed range {token!r}")
            seeds.extend(range(a, b + 1))
        else:
            try:
                seeds.append(int(token))
            except ValueError:
                raise CliError("UsageError", f"bad seed {token!r}")
    if not seeds:
        raise CliError("UsageError", "no seeds given")
    return seeds


def _fill_config(cls, overrides: dict, seeds: list[int]):
    allowed = {f.name for f in fields(cls)}
    kwargs = {}
    for key, value in overrides.items():
        if key not in allowed:
            raise CliError("BadConfig", f"unknown grid key {key!r} for {cls.__name__}")
        if isinstance(value, list):
            value = tuple(value)
        kwargs[key] = value
    kwargs["seeds"] = tuple(seeds)
    return cls(**kwargs)


def _cmd_train(args) -> int:
    cfg = _load_json(args.config)
    data_keys = cfg.get("data")
    if not isinstance(data_keys, dict):
        raise CliError("BadConfig", "config needs a 'data' object")
    seq = make_rotated_sequence(**data_keys)
    d0 = seq.domains[0]
    dataset = LabeledDataset(x=d0.x, y=d0.y, domain=np.zeros(len(d0), dtype=np.int64))
    dims = tuple(cfg.get("dims", ()))
    if len(dims) < 2:
        raise CliError("BadConfig", "config 'dims' needs at least [input, output]")
    if dims[0] != seq.dim:
        raise CliError("BadConfig", f"dims[0]={dims[0]} but the data is {seq.dim}-D")
    loss_cfg = KnnLossConfig(**cfg.get("loss", {}))
    seed = int(cfg.get("seed", 0))
    params = init_encoder(dims, seed=seed)
    params, trace = train(params, dataset, loss_cfg, seed=seed)
    save_encoder(params, args.out)
    if args.report:
        lines = ["# knn-loss training trace", "step,loss"]
        lines += [f"{step},{loss!r}" for step, loss in trace]
        with open(args.report, "w") as fh:
            fh.write("\n".join(lines) + "\n")
    print(f"trained {len(trace)} steps; params -> {args.out}")
    return 0


def _cmd_adapt(args) -> int:
    bank = snapshot_load(args.bank)
    stream, labels = _load_stream(args.stream)
    if stream.shape[1] != bank.dim:
        raise CliError("BadPack", f"stream is {stream.shape[1]}-D, bank is {bank.dim}-D")
    config = AdaptConfig(k=args.k, margin=args.margin)
    layer = (
        BnLayer.identity(bank.dim, momentum=args.bn_momentum) if args.bn_adapt else None
    )
    buffer: list[np.ndarray] = []
    rows = []
    hits = 0
    inserted_count = 0
    for i, x in enumerate(stream):
        if layer is not None:
            z, layer = bn_forward(layer, x, mode="train")
            buffer.append(x)
        else:
            z = x
        pred, inserted, entry_id = adapt_step(bank, z, config)
        inserted_count += int(inserted)
        correct = ""
        if labels is not None:
            correct = int(pred.label == labels[i])
            hits += correct
        rows.append(
            f"{i},{pred.label},{pred.confidence!r},{int(inserted)},"
            f"{'' if entry_id is None else entry_id},{correct}"
        )
        if layer is not None and len(buffer) >= BN_REFRESH_EVERY:
            layer, _, _ = bn_entropy_step(
                layer, bank, np.asarray(buffer), args.k, args.bn_lr
            )
            buffer.clear()
    lines = [
        f"# adapt stream: k={args.k} margin={config.resolve_margin(bank.num_classes)!r}"
        f" bn_adapt={int(args.bn_adapt)}",
        f"# inserted {inserted_count} of {len(stream)}"
        + (f"; accuracy {hits / len(stream)!r}" if labels is not None and len(stream) else ""),
        "idx,label,confidence,inserted,entry_id,correct",
    ]
    with open(args.report, "w") as fh:
        fh.write("\n".join(lines + rows) + "\n")
    print(f"adapted {len(stream)} points; inserted {inserted_count}; report -> {args.report}")
    return 0


def _cmd_successive(args) -> int:
    cfg = _load_json(args.sequence)
    baseline_keys = cfg.pop("baseline", {})
    if not isinstance(baseline_keys, dict):
        raise CliError("BadConfig", "'baseline' must be an object")
    spec = BaselineSpec(kind=args.method, **baseline_keys)
    base_seed = int(cfg.pop("seed", 0))
    traces = []
    for seed in _parse_seeds(args.seeds):
        seq = make_rotated_sequence(seed=base_seed + seed, **cfg)
        traces.append(run_successive(seq, spec, seed=seed))
    write_successive_csv(traces, args.report)
    print(f"{len(traces)} runs of {args.method}; report -> {args.report}")
    return 0


def _cmd_theory(args) -> int:
    grid = _load_json(args.grid) if args.grid else {}
    seeds = _parse_seeds(args.seeds)
    runner, cls = {
        "prop1": (run_prop1, Prop1Config),
        "prop2": (run_prop2, Prop2Config),
        "prop3": (run_prop3, Prop3Config),
    }[args.prop]
    report = runner(_fill_config(cls, grid, seeds))
    write_report_csv(report, args.report)
    print(
        f"{report.name}: {len(report.rows)} rows, {len(report.aggregates)} aggregates;"
        f" report -> {args.report}"
    )
    return 0


def _cmd_bench(args) -> int:
    sizes = tuple(int(s) for s in args.sizes.split(",") if s.strip())
    if not sizes:
        raise CliError("UsageError", "no sizes given")
    report = bench_inference(sizes, d=args.dim, k=args.k)
    write_bench_csv(report, args.report)
    print(f"{len(report.rows)} bench cells; report -> {args.report}")
    return 0


def _cmd_serve(args) -> int:
    import uvicorn

    from .service import create_app

    addr = args.addr or os.environ.get("ADANPC_ADDR", "127.0.0.1:8000")
    host, _, port_text = addr.rpartition(":")
    if not host or not port_text.isdigit():
        raise CliError("UsageError", f"bad --addr {addr!r}, expected host:port")
    bank = snapshot_load(args.bank)
    app = create_app(bank, k_default=args.k, margin=args.margin, readonly=args.readonly)
    print(f"serving {len(bank)} entries on {host}:{port_text}" + (" (readonly)" if args.readonly else ""))
    uvicorn.run(app, host=host, port=int(port_text), log_level="warning")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="adanpc")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="fit an encoder with the neighborhood loss")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--report", default=None)
    p.set_defaults(fn=_cmd_train)

    p = sub.add_parser("adapt", help="stream a pack through gated adaptation")
    p.add_argument("--bank", required=True)
    p.add_argument("--stream", required=True)
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--margin", type=float, default=None)
    p.add_argument("--bn-adapt", action="store_true")
    p.add_argument("--bn-lr", type=float, default=1e-3)
    p.add_argument("--bn-momentum", type=float, default=0.05)
    p.add_argument("--report", required=True)
    p.set_defaults(fn=_cmd_adapt)

    p = sub.add_parser("successive", help="multi-domain adaptation trace")
    p.add_argument("--sequence", required=True)
    p.add_argument("--method", required=True)
    p.add_argument("--seeds", required=True)
    p.add_argument("--report", required=True)
    p.set_defaults(fn=_cmd_successive)

    p = sub.add_parser("theory", help="desk-scale bound experiments")
    p.add_argument("prop", choices=("prop1", "prop2", "prop3"))
    p.add_argument("--grid", default=None)
    p.add_argument("--seeds", required=True)
    p.add_argument("--report", required=True)
    p.set_defaults(fn=_cmd_theory)

    p = sub.add_parser("bench", help="query latency and recall benchmark")
    p.add_argument("--sizes", required=True)
    p.add_argument("--dim", type=int, default=128)
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--report", required=True)
    p.set_defaults(fn=_cmd_bench)

    p = sub.add_parser("serve", help="HTTP prediction and curation service")
    p.add_argument("--bank", required=True)
    p.add_argument("--addr", default=None)
    p.add_argument("--readonly", action="store_true")
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--margin", type=float, default=None)
    p.set_defaults(fn=_cmd_serve)
    return parser


def _one_line(text: str) -> str:
    return " ".join(str(text).split())


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.fn(args)
    except CliError as exc:
        print(f"error: {exc.code}: {_one_line(exc)}", file=sys.stderr)
        return 2
    except AdanpcError as exc:
        print(f"error: {exc.code}: {_one_line(exc)}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: FileNotFound: {_one_line(exc)}", file=sys.stderr)
        return 2
    except (TypeError, ValueError) as exc:
        print(f"error: {type(exc).__name__}: {_one_line(exc)}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
