"""Command line entry point.

Every failure prints a single line ``error:<category>: <message>`` on stderr
and exits 1 (runtime) or 2 (configuration).
"""

from __future__ import annotations

import argparse
import logging
import signal
import sys
import threading
from pathlib import Path

import numpy as np

from .archive import RemoteServer, Store, export_csv
from .config import load_config
from .errors import ConfigError, MotorMonError, PipelineError
from .order import DEFAULT_THETA_STEP, analyze_block, block_length, diagnose, resample_grid
from .pipeline import Pipeline
from .recording import RecordingWriter, load_recording
from .source import MotorSimulator

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2


def _fail(exc: BaseException) -> int:
    category = getattr(exc, "category", "runtime")
    print(f"error:{category}: {exc}", file=sys.stderr)
    return EXIT_CONFIG if isinstance(exc, ConfigError) else EXIT_RUNTIME


def _orders(text: str) -> list[float]:
    out = []
    for part in text.split(","):
        part = part.strip()
        if "-" in part:
            lo, hi = part.split("-")
            out.extend(float(k) for k in range(int(lo), int(hi) + 1))
        elif part:
            out.append(float(part))
    return out


def _fmt_order(k: float) -> str:
    return f"{k:g}"


def cmd_run(args) -> int:
    cfg = load_config(args.config)
    if args.duration is not None:
        cfg.duration = args.duration
    if args.seed is not None:
        cfg.seed = args.seed
    stop = threading.Event()

    def _signal(signum, frame):
        stop.set()

    if threading.current_thread() is threading.main_thread():
        signal.signal(signal.SIGINT, _signal)
        signal.signal(signal.SIGTERM, _signal)

    def status(line):
        print(line, flush=True)

    pipe = Pipeline(cfg, status=None if args.quiet else status)
    try:
        stats = pipe.run(stop)
    except PipelineError as exc:
        print(f"run {pipe.run_id} failed; {exc.stats.summary() if exc.stats else ''}")
        return _fail(exc)
    print(f"run {pipe.run_id} finished: {stats.summary()}")
    state = pipe.final_state
    print(f"final state: {state.overall.name if state else 'Healthy'}")
    for ev in pipe.events:
        if not ev.is_clear and ev.kind.name != "OrderFault":
            print(f"alarm {ev.kind.name} ch{ev.channel_id} value={ev.value:.6g} limit={ev.limit:.6g} t={ev.t:.4f}")
    last = {}
    for rep in pipe.diagnoses:
        last[rep.channel_id] = rep
    for cid in sorted(last):
        rep = last[cid]
        if rep.flagged_orders:
            orders = ",".join(_fmt_order(k) for k in rep.flagged_orders)
            print(f"OrderFault ch{cid} flagged orders {{{orders}}} max ratio {rep.max_ratio:.3g}")
        else:
            print(f"ch{cid} order diagnosis Healthy")
    if not stats.drained:
        print(f"error:runtime: drain incomplete, stranded {stats.stranded}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_simulate(args) -> int:
    cfg = load_config(args.config)
    if cfg.profile is None:
        raise ConfigError("simulate needs a [profile]", "profile")
    duration = args.duration if args.duration is not None else cfg.duration
    sim = MotorSimulator(cfg.profile, cfg.channels, cfg.seed, cfg.frame_period)
    n = 0
    with RecordingWriter(args.out, cfg.channels) as w:
        for block in sim.blocks(duration):
            w.write_block(block)
            n += 1
    print(f"wrote {n} blocks ({duration:g} s) to {args.out}")
    return EXIT_OK


def _recording_spectra(path, theta_step, n=None):
    channels, signals, pulses = load_recording(path)
    if pulses is None:
        raise MotorMonError(f"{path}: recording has no tachometer pulses")
    vib = {}
    for cid, (values, rate, t0) in signals.items():
        spec = channels[cid]
        if spec.kind.is_vibration:
            vib[cid] = (spec.gain * values + spec.offset, rate, t0)
    if not vib:
        raise MotorMonError(f"{path}: recording has no vibration channels")
    grid = resample_grid(pulses, theta_step)
    n = n or block_length(len(grid), theta_step)
    return analyze_block(pulses, vib, theta_step, n), n, len(grid)


def cmd_analyze(args) -> int:
    theta_step = args.theta_step
    spectra, n, n_grid = _recording_spectra(args.recording, theta_step)
    baseline = None
    if args.baseline:
        _, _, n_base = _recording_spectra(args.baseline, theta_step)
        n = min(n, block_length(n_base, theta_step))
        spectra, _, _ = _recording_spectra(args.recording, theta_step, n)
        baseline, _, _ = _recording_spectra(args.baseline, theta_step, n)
    out_dir = Path(args.out_dir) if args.out_dir else Path(args.recording).parent
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = Path(args.recording).stem
    verdicts = []
    for cid in sorted(spectra):
        sp = spectra[cid]
        path = out_dir / f"{stem}_ch{cid}_orders.csv"
        np.savetxt(path, np.column_stack([sp.orders, sp.amplitudes]), delimiter=",",
                   header="order,amplitude", comments="", fmt="%.17g")
        peak = int(np.argmax(sp.amplitudes[1:]) + 1)
        print(f"ch{cid}: {n} samples, {sp.revolutions:g} rev, resolution {sp.order_resolution:g} order; "
              f"peak order {sp.orders[peak]:g} amplitude {sp.amplitudes[peak]:.6g}; spectrum -> {path}")
        if baseline is not None and cid in baseline:
            rep = diagnose(sp, baseline[cid], args.watch, args.ratio_threshold, args.floor)
            verdicts.append(rep.verdict.value)
            print(f"  {'order':>6} {'healthy':>12} {'measured':>12} {'ratio':>10} flag")
            for f in rep.findings:
                print(f"  {f.order:6g} {f.healthy_amplitude:12.6g} {f.measured_amplitude:12.6g} "
                      f"{f.ratio:10.4g} {'*' if f.flagged else ''}")
            orders = ",".join(_fmt_order(k) for k in rep.flagged_orders)
            print(f"  ch{cid} verdict {rep.verdict.value} flagged {{{orders}}}")
    if verdicts:
        print(f"verdict: {'Faulty' if 'Faulty' in verdicts else 'Healthy'}")
    else:
        print("verdict: no baseline")
    return EXIT_OK


def _filters(args) -> dict:
    return {"run_id": args.run, "t_from": args.t_from, "t_to": args.t_to,
            "channel_id": args.channel, "kind": args.kind}


def _open_existing(path) -> Store:
    if not Path(path).exists():
        raise ConfigError(f"store {path} does not exist", "--store")
    return Store(path)


def cmd_query(args) -> int:
    with _open_existing(args.store) as store:
        table = "spectra" if args.spectra else "samples"
        rows = store.query(table=table, **_filters(args))
    if table == "spectra":
        header = ("t", "channel", "order", "amplitude")
        body = [(f"{t:.6f}", str(c), f"{o:g}", f"{a:.6g}") for _, t, c, o, a in rows]
    else:
        header = ("t", "channel", "value")
        body = [(f"{t:.6f}", str(c), f"{v:.9g}") for _, t, c, v in rows]
    if body:
        widths = [max(len(h), *(len(r[i]) for r in body)) for i, h in enumerate(header)]
        print("  ".join(h.rjust(w) for h, w in zip(header, widths)))
        for r in body:
            print("  ".join(v.rjust(w) for v, w in zip(r, widths)))
    print(f"{len(rows)} rows")
    return EXIT_OK


def cmd_export(args) -> int:
    with _open_existing(args.store) as store:
        n = export_csv(store, args.out, table="spectra" if args.spectra else "samples", **_filters(args))
    print(f"{n} rows written to {args.out}")
    return EXIT_OK


def cmd_serve_remote(args) -> int:
    host, _, port = args.listen.rpartition(":")
    if not port.isdigit():
        raise ConfigError(f"bad listen address {args.listen!r}", "--listen")
    server = RemoteServer(args.store, host or "0.0.0.0", int(port))
    stop = threading.Event()
    if threading.current_thread() is threading.main_thread():
        signal.signal(signal.SIGINT, lambda *a: stop.set())
        signal.signal(signal.SIGTERM, lambda *a: stop.set())
    try:
        server.start()
    except OSError as exc:
        print(f"error:bind: cannot listen on {args.listen}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    print(f"serving replication on {server.endpoint}, store {args.store}", flush=True)
    try:
        stop.wait()
    finally:
        server.close()
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="motormon", description="Motor condition monitoring engine")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run the acquisition/processing/archiving pipeline")
    r.add_argument("--config", required=True)
    r.add_argument("--duration", type=float)
    r.add_argument("--seed", type=int)
    r.add_argument("--quiet", action="store_true", help="suppress live status lines")
    r.set_defaults(func=cmd_run)

    s = sub.add_parser("simulate", help="write a synthetic recording from a config profile")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--duration", type=float)
    s.set_defaults(func=cmd_simulate)

    a = sub.add_parser("analyze", help="order-analyse a recording")
    a.add_argument("--recording", required=True)
    a.add_argument("--baseline")
    a.add_argument("--theta-step", type=float, default=DEFAULT_THETA_STEP)
    a.add_argument("--watch", type=_orders, default=[float(k) for k in range(1, 21)])
    a.add_argument("--ratio-threshold", type=float, default=5.0)
    a.add_argument("--floor", type=float, default=0.02)
    a.add_argument("--out-dir")
    a.set_defaults(func=cmd_analyze)

    for name, func in (("query", cmd_query), ("export", cmd_export)):
        q = sub.add_parser(name, help=f"{name} archived rows")
        q.add_argument("--store", required=True)
        q.add_argument("--from", dest="t_from", type=float)
        q.add_argument("--to", dest="t_to", type=float)
        sel = q.add_mutually_exclusive_group()
        sel.add_argument("--channel", type=int)
        sel.add_argument("--kind")
        q.add_argument("--run")
        q.add_argument("--spectra", action="store_true", help="order spectra instead of samples")
        if name == "export":
            q.add_argument("--out", required=True)
        q.set_defaults(func=func)

    sr = sub.add_parser("serve-remote", help="accept replication from remote pipelines")
    sr.add_argument("--listen", required=True)
    sr.add_argument("--store", required=True)
    sr.set_defaults(func=cmd_serve_remote)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        if exc.code not in (0, None):
            print("error:config: invalid command line", file=sys.stderr)
            return EXIT_CONFIG
        return EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except MotorMonError as exc:
        return _fail(exc)
    except OSError as exc:
        print(f"error:io: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
