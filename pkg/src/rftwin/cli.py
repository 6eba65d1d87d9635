"""Command-line front end.

Subcommands: create, validate, replay, sound, broker, latency, jam-demo,
bench.  Options resolve with precedence flags > environment > config file
> built-in defaults; ``RFTW_SEED`` seeds anything random and
``RFTW_BROKER_ADDR`` points latency runs at an external broker.  Report
paths write figures next to their delimited output unless --no-fig.

Exit codes: 0 success, 1 internal error, 2 input error, 3 validation
failure.
"""

from __future__ import annotations

import argparse
import cmath
import json
import math
import os
import signal
import sys
import time
from dataclasses import replace as _replace
from pathlib import Path

from . import broker as broker_mod
from . import engine, rays, replay, sounder, waveforms
from .scenario import (
    GridSpec,
    LinkId,
    ScenarioFormatError,
    ScenarioValidationError,
    read_scenario,
    write_scenario,
)

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_INPUT = 2
EXIT_VALIDATION = 3

ENV_SEED = "RFTW_SEED"
ENV_BROKER = "RFTW_BROKER_ADDR"


def _parse_link(text: str) -> LinkId:
    parts = text.split(":")
    if len(parts) not in (2, 4):
        raise argparse.ArgumentTypeError(
            f"link {text!r} must be tx:rx or tx:rx:tx_ant:rx_ant"
        )
    try:
        nums = [int(p) for p in parts]
    except ValueError:
        raise argparse.ArgumentTypeError(f"link {text!r} has non-integer fields") from None
    if len(nums) == 2:
        return LinkId(nums[0], nums[1])
    return LinkId(nums[0], nums[1], nums[2], nums[3])


def _parse_addr(text: str) -> tuple[str, int]:
    host, sep, port = text.rpartition(":")
    if not sep or not host:
        raise argparse.ArgumentTypeError(f"address {text!r} must be host:port")
    try:
        return host, int(port)
    except ValueError:
        raise argparse.ArgumentTypeError(f"address {text!r} has a bad port") from None


def _parse_sizes(text: str) -> tuple[int, ...]:
    try:
        sizes = tuple(int(s) for s in text.split(",") if s.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"sizes {text!r} must be comma-separated integers")
    if not sizes or any(s < 1 for s in sizes):
        raise argparse.ArgumentTypeError("sizes must be positive integers")
    return sizes


def _read_config_file(path: str) -> dict:
    """key=value lines, # comments; values parsed as JSON when possible."""
    out = {}
    for line_no, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path} line {line_no}: expected key=value, got {raw!r}")
        key, value = line.split("=", 1)
        key = key.strip().replace("-", "_")
        value = value.strip()
        try:
            out[key] = json.loads(value)
        except json.JSONDecodeError:
            out[key] = value
    return out


def _grid_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--bin-ns", type=int, default=10, help="delay bin duration [ns]")
    p.add_argument("--num-bins", type=int, default=512, help="delay bins per tap line")
    p.add_argument(
        "--snapshot-us", type=int, default=1000, help="snapshot period [us]"
    )


def _fig_path(out_path: str, explicit: str | None) -> Path:
    if explicit:
        return Path(explicit)
    return Path(out_path).with_suffix(".png")


def build_parser(defaults: dict | None = None) -> argparse.ArgumentParser:
    """Construct the CLI parser.

    ``defaults`` (from a config file or the environment) replace matching
    option defaults on every subcommand that declares them, so explicit
    flags still win; subcommands parse into a fresh namespace, which is
    why top-level ``set_defaults`` alone would not stick.
    """
    parser = argparse.ArgumentParser(
        prog="rftwin",
        description="Tapped-delay-line channel emulation toolkit",
    )
    parser.add_argument("--config", help="key=value config file merged under flags/env")
    parser.add_argument(
        "--verbose", action="store_true", help="print the resolved configuration"
    )
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("create", help="build a scenario file from ray traces")
    p.add_argument("--rays", required=True, help="ray input (.csv or .jsonl)")
    p.add_argument("--out", required=True, help="scenario file to write")
    p.add_argument("--num-nodes", type=int, required=True)
    p.add_argument("--antennas", type=int, default=1, choices=(1, 2))
    p.add_argument("--duration-ms", type=int, required=True)
    _grid_args(p)
    p.set_defaults(func=cmd_create)

    p = sub.add_parser("validate", help="sound installed tap lines through the engine")
    p.add_argument("--scenario", required=True)
    p.add_argument("--link", action="append", type=_parse_link, default=None,
                   help="tx:rx[:tx_ant:rx_ant]; repeatable, default all links")
    p.add_argument("--ms", action="append", type=int, default=None,
                   help="snapshot time; repeatable, default 0")
    p.add_argument("--reps", type=int, default=16, help="sounding repetitions")
    p.add_argument("--snr-db", type=float, default=None,
                   help="add noise at this SNR (default noiseless)")
    p.add_argument("--m", type=int, default=10, help="probe register length (L = 2^m - 1)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--delay-tol-ns", type=float, default=20.0)
    p.add_argument("--gain-tol-db", type=float, default=0.5)
    p.add_argument("--out", default=None, help="write the JSON report here")
    p.add_argument("--fig", default=None, help="figure path (default: next to --out)")
    p.add_argument("--no-fig", action="store_true")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("replay", help="stream tap frames from a scenario")
    p.add_argument("--scenario", required=True)
    p.add_argument("--mode", choices=(replay.VIRTUAL, replay.PACED), default=replay.VIRTUAL)
    p.add_argument("--loop", action="store_true")
    p.add_argument("--link", action="append", type=_parse_link, default=None,
                   help="restrict playback to these links")
    p.add_argument("--start-ms", type=int, default=0)
    p.add_argument("--max-frames", type=int, default=None,
                   help="stop after this many frames (required with --loop output)")
    p.add_argument("--out", default=None, help="frame JSONL path (default stdout)")
    p.add_argument("--listen", type=_parse_addr, default=None,
                   help="serve frames over TCP at host:port instead of dumping")
    p.add_argument("--runtime-s", type=float, default=None,
                   help="with --listen: serve for this long, then exit")
    p.add_argument("--status-json", default=None, help="write final status here")
    p.set_defaults(func=cmd_replay)

    p = sub.add_parser("sound", help="estimate one link's CIR and recovered taps")
    p.add_argument("--scenario", required=True)
    p.add_argument("--link", type=_parse_link, required=True)
    p.add_argument("--ms", type=int, default=0)
    p.add_argument("--reps", type=int, default=16)
    p.add_argument("--snr-db", type=float, default=None)
    p.add_argument("--m", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None, help="CIR estimate CSV path")
    p.add_argument("--fig", default=None)
    p.add_argument("--no-fig", action="store_true")
    p.set_defaults(func=cmd_sound)

    p = sub.add_parser("broker", help="run the twin message broker")
    p.add_argument("--listen", type=_parse_addr, default=("127.0.0.1", 0))
    p.add_argument("--max-payload", type=int, default=broker_mod.DEFAULT_MAX_PAYLOAD)
    p.add_argument("--runtime-s", type=float, default=None,
                   help="exit after this long (default: run until interrupted)")
    p.set_defaults(func=cmd_broker)

    p = sub.add_parser("latency", help="measure broker round-trip latency")
    p.add_argument("--broker", type=_parse_addr, default=None,
                   help="host:port (default: RFTW_BROKER_ADDR or a self-hosted broker)")
    p.add_argument("--sizes", type=_parse_sizes,
                   default=broker_mod.DEFAULT_SIZES,
                   help="comma-separated payload sizes in bytes")
    p.add_argument("--samples", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None, help="CSV report path")
    p.add_argument("--fig", default=None)
    p.add_argument("--no-fig", action="store_true")
    p.set_defaults(func=cmd_latency)

    p = sub.add_parser("jam-demo", help="throughput timeline under jamming")
    p.add_argument("--jammer", choices=("narrowband", "wideband", "none"),
                   default="narrowband")
    p.add_argument("--jsr-db", type=float, default=waveforms.DEFAULT_JSR_DB,
                   help="jammer-to-signal power ratio")
    p.add_argument("--snr-db", type=float, default=None,
                   help="link SNR (default: the committed demo value)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--segments", type=int, default=30)
    p.add_argument("--frames-per-segment", type=int, default=20)
    p.add_argument("--out", default=None, help="timeline CSV path")
    p.add_argument("--fig", default=None)
    p.add_argument("--no-fig", action="store_true")
    p.set_defaults(func=cmd_jam_demo)

    p = sub.add_parser("bench", help="measure engine filter throughput")
    p.add_argument("--links", type=int, default=1)
    p.add_argument("--ms", type=int, default=50, help="snapshots per link")
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    _grid_args(p)
    p.set_defaults(func=cmd_bench)

    if defaults:
        for leaf in (parser, *sub.choices.values()):
            applicable = {
                key: value
                for key, value in defaults.items()
                if any(action.dest == key for action in leaf._actions)
            }
            if applicable:
                leaf.set_defaults(**applicable)
    return parser


def cmd_create(args) -> int:
    traces = rays.load_ray_traces(args.rays)
    grid = GridSpec(args.bin_ns, args.num_bins, args.snapshot_us)
    scenario, report = rays.build_scenario(
        traces, grid, args.num_nodes, args.antennas, args.duration_ms
    )
    write_scenario(args.out, scenario)
    print(f"wrote {args.out}: {scenario.num_links()} links x {scenario.duration_ms} ms")
    print(
        f"binned {report.cells} trace cells, dropped {report.dropped_rays} rays "
        f"beyond {grid.max_delay_ns} ns, "
        f"discarded {report.discarded_fraction:.2%} of binned energy in tap selection"
    )
    return EXIT_OK


def cmd_validate(args) -> int:
    scenario = read_scenario(args.scenario)
    links = args.link if args.link else list(scenario.links())
    times = args.ms if args.ms else [0]
    known = set(scenario.links())
    sequence = sounder.generate_msequence(args.m)
    if sequence.length <= scenario.grid.num_bins:
        raise ValueError(
            f"probe length {sequence.length} must exceed the {scenario.grid.num_bins}-bin grid; "
            f"raise --m"
        )
    results = []
    all_pass = True
    for link in links:
        if link not in known:
            raise rays.RayInputError(f"{link} is not a link of this scenario")
        for ms in times:
            if not (0 <= ms < scenario.duration_ms):
                raise rays.RayInputError(f"--ms {ms} outside scenario duration")
            installed = scenario.tap_line(link, ms)
            _, recovered = sounder.sound_tap_line(
                installed,
                scenario.grid,
                sequence=sequence,
                repetitions=args.reps,
                snr_db=args.snr_db,
                seed=args.seed,
            )
            outcome = sounder.validate_channel(
                installed,
                recovered,
                scenario.grid.bin_duration_ns,
                delay_tolerance_ns=args.delay_tol_ns,
                gain_tolerance_db=args.gain_tol_db,
            )
            record = {
                "link": {
                    "tx": link.tx_node,
                    "rx": link.rx_node,
                    "tx_ant": link.tx_antenna,
                    "rx_ant": link.rx_antenna,
                },
                "time_ms": ms,
                **outcome.to_dict(),
            }
            results.append(record)
            all_pass = all_pass and outcome.passed
            tag = "PASS" if outcome.passed else "FAIL"
            print(
                f"{tag} link {link.tx_node}:{link.rx_node}:{link.tx_antenna}:"
                f"{link.rx_antenna} ms {ms}: {len(outcome.matches)} matched, "
                f"{len(outcome.missed_bins)} missed, {len(outcome.spurious_bins)} spurious"
            )
    payload = json.dumps(results, indent=2)
    if args.out:
        Path(args.out).write_text(payload + "\n")
        if not args.no_fig:
            from .figures import save_validation_figure

            save_validation_figure(_fig_path(args.out, args.fig), results)
    else:
        print(payload)
    return EXIT_OK if all_pass else EXIT_VALIDATION


def cmd_replay(args) -> int:
    session = replay.load(args.scenario, mode=args.mode, loop=args.loop)
    if args.link:
        session.subscribe_links(args.link)
    if args.start_ms:
        replay.seek(session, args.start_ms)
    if args.loop and args.listen is None and args.max_frames is None:
        raise ValueError("--loop frame dumps need --max-frames to terminate")

    if args.listen is not None:
        host, port = args.listen
        server, bound_port, thread = replay.serve_frames(session, host, port)
        print(f"serving tap frames on {host}:{bound_port}", file=sys.stderr)
        if args.mode == replay.PACED:
            replay.play(session)
        try:
            if args.runtime_s is not None:
                time.sleep(args.runtime_s)
            else:
                while True:
                    time.sleep(0.5)
        except KeyboardInterrupt:
            pass
        finally:
            replay.stop(session)
            server.close()
            thread.join()
    else:
        out_fh = open(args.out, "w") if args.out else sys.stdout
        emitted = 0
        try:
            if args.mode == replay.VIRTUAL:
                for frame in replay.play(session):
                    out_fh.write(replay.frame_to_json(frame) + "\n")
                    emitted += 1
                    if args.max_frames is not None and emitted >= args.max_frames:
                        replay.stop(session)
                        break
            else:
                from queue import Empty

                sub = replay.attach_subscriber(session, links=args.link)
                replay.play(session)
                total = args.max_frames
                if total is None:
                    total = session.scenario.duration_ms * len(session.subscribed_links())
                while emitted < total:
                    try:
                        frame = sub.queue.get(timeout=2.0)
                    except Empty:
                        break
                    out_fh.write(replay.frame_to_json(frame) + "\n")
                    emitted += 1
                replay.stop(session)
        finally:
            if args.out:
                out_fh.close()
    status = session.status()
    if args.status_json:
        Path(args.status_json).write_text(json.dumps(status) + "\n")
    else:
        print(json.dumps(status), file=sys.stderr)
    return EXIT_OK


def cmd_sound(args) -> int:
    scenario = read_scenario(args.scenario)
    if (args.link, args.ms) not in scenario.snapshots:
        raise rays.RayInputError(
            f"link {args.link} ms {args.ms} is not in this scenario"
        )
    sequence = sounder.generate_msequence(args.m)
    installed = scenario.tap_line(args.link, args.ms)
    est, recovered = sounder.sound_tap_line(
        installed,
        scenario.grid,
        sequence=sequence,
        repetitions=args.reps,
        snr_db=args.snr_db,
        seed=args.seed,
    )
    print(f"noise floor: {est.noise_floor:.3e}")
    for tap in recovered.taps:
        gain = complex(tap.gain)
        print(
            f"tap bin {tap.bin} ({tap.bin * scenario.grid.bin_duration_ns} ns): "
            f"{abs(gain):.4f} @ {math.degrees(cmath.phase(gain)):+.1f} deg"
        )
    if args.out:
        import csv as _csv

        with open(args.out, "w", newline="") as fh:
            writer = _csv.writer(fh)
            writer.writerow(["bin", "delay_ns", "re", "im", "power_db"])
            for b, amp in enumerate(est.amplitudes):
                power = float(abs(amp)) ** 2
                writer.writerow(
                    [
                        b,
                        b * scenario.grid.bin_duration_ns,
                        f"{amp.real:.9e}",
                        f"{amp.imag:.9e}",
                        f"{10 * math.log10(max(power, 1e-30)):.3f}",
                    ]
                )
        if not args.no_fig:
            from .figures import save_cir_figure

            save_cir_figure(_fig_path(args.out, args.fig), est, scenario.grid, installed)
    return EXIT_OK


def cmd_broker(args) -> int:
    host, port = args.listen
    hub = broker_mod.TwinBroker(host, port, max_payload=args.max_payload).start()
    bound_host, bound_port = hub.address
    print(f"broker listening on {bound_host}:{bound_port}", flush=True)
    try:
        if args.runtime_s is not None:
            time.sleep(args.runtime_s)
        else:
            signal.pause()
    except KeyboardInterrupt:
        pass
    finally:
        hub.stop()
    print(f"delivered {hub.delivered_count} messages", file=sys.stderr)
    return EXIT_OK


def cmd_latency(args) -> int:
    address = args.broker
    if address is None and os.environ.get(ENV_BROKER):
        address = _parse_addr(os.environ[ENV_BROKER])
    report = broker_mod.measure_latency(
        address=address,
        sizes=args.sizes,
        samples=args.samples,
        seed=args.seed,
    )
    print(report.to_text())
    if args.out:
        report.write_csv(args.out)
        if not args.no_fig:
            from .figures import save_latency_figure

            save_latency_figure(_fig_path(args.out, args.fig), report)
    if any(row.failed for row in report.rows):
        return EXIT_INTERNAL
    return EXIT_OK


def cmd_jam_demo(args) -> int:
    cfg = waveforms.ToyLinkConfig()
    if args.snr_db is not None:
        cfg = _replace(cfg, snr_db=args.snr_db)
    power = 10.0 ** (args.jsr_db / 10.0)
    if args.jammer == "narrowband":
        jammer = _replace(waveforms.DEFAULT_TONE, power=power)
    elif args.jammer == "wideband":
        jammer = _replace(waveforms.DEFAULT_NOISE, power=power)
    else:
        jammer = None
    points = waveforms.run_timeline(
        cfg,
        jammer,
        seed=args.seed,
        segments=args.segments,
        frames_per_segment=args.frames_per_segment,
    )
    mean_on = [p.throughput_fraction for p in points if p.jammer_on]
    mean_off = [p.throughput_fraction for p in points if not p.jammer_on]
    print(
        f"jammer={args.jammer} jsr={args.jsr_db:+.1f} dB: "
        f"throughput while jammed "
        f"{(sum(mean_on) / len(mean_on)) if mean_on else float('nan'):.3f}, "
        f"clear {sum(mean_off) / len(mean_off):.3f}"
    )
    if args.out:
        import csv as _csv

        with open(args.out, "w", newline="") as fh:
            writer = _csv.writer(fh)
            writer.writerow(["time_s", "throughput_fraction"])
            for p in points:
                writer.writerow([f"{p.time_s:.1f}", f"{p.throughput_fraction:.4f}"])
        if not args.no_fig:
            from .figures import save_timeline_figure

            save_timeline_figure(
                _fig_path(args.out, args.fig),
                points,
                title=f"Throughput, {args.jammer} jammer at {args.jsr_db:+.1f} dB",
            )
    return EXIT_OK


def cmd_bench(args) -> int:
    grid = GridSpec(args.bin_ns, args.num_bins, args.snapshot_us)
    result = engine.benchmark_throughput(
        num_links=args.links,
        duration_ms=args.ms,
        grid=grid,
        seed=args.seed,
        threads=args.threads,
    )
    for i, rate in enumerate(result["per_link_samples_per_s"]):
        print(f"link {i}: {rate / 1e6:8.2f} MS/s")
    print(f"aggregate: {result['aggregate_samples_per_s'] / 1e6:8.2f} MS/s "
          f"({args.links} link(s), {args.threads} thread(s))")
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)

    # Resolve --config and the environment before the real parse so that
    # explicit flags keep the last word.
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    defaults: dict = {}
    try:
        if known.config:
            defaults.update(_read_config_file(known.config))
        if os.environ.get(ENV_SEED):
            defaults["seed"] = int(os.environ[ENV_SEED])
        if os.environ.get(ENV_BROKER):
            defaults["broker"] = _parse_addr(os.environ[ENV_BROKER])
    except (OSError, ValueError, argparse.ArgumentTypeError) as exc:
        print(f"rftwin: input error: {exc}", file=sys.stderr)
        return EXIT_INPUT

    parser = build_parser(defaults)
    args = parser.parse_args(argv)
    if args.verbose:
        resolved = {k: repr(v) for k, v in vars(args).items() if k != "func"}
        print(json.dumps(resolved, indent=2, sort_keys=True), file=sys.stderr)
    try:
        return args.func(args)
    except ScenarioValidationError as exc:
        print(f"rftwin: validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (
        rays.RayInputError,
        ScenarioFormatError,
        FileNotFoundError,
        IsADirectoryError,
        PermissionError,
        ConnectionRefusedError,
        broker_mod.TopicError,
        broker_mod.PayloadTooLargeError,
        ValueError,
    ) as exc:
        print(f"rftwin: input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except KeyboardInterrupt:
        return EXIT_INTERNAL
    except Exception as exc:  # pragma: no cover - debugging aid
        import traceback

        traceback.print_exc()
        print(f"rftwin: internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
