"""Command-line entry points.

    dynfuse scripts                      list bundled scene scripts
    dynfuse gen <script> -o seq.bin     record a synthetic sequence
    dynfuse serve --listen host:port    run the relay server
    dynfuse reconstruct --seq ... --connect host:port
    dynfuse explore --connect host:port [--gateway-port N]
    dynfuse run --seq seq.bin --report out.json
    dynfuse metrics --out-dir dir       recompute a report from logs
"""

from __future__ import annotations

import argparse
import json
import signal
import sys
import time
from pathlib import Path

from .config import PipelineConfig


def _address(text: str) -> tuple[str, int]:
    host, _, port = text.rpartition(":")
    return host or "127.0.0.1", int(port)


def cmd_scripts(args):
    from .synth import bundled_scripts
    for name, script in bundled_scripts().items():
        movers = sum(1 for o in script.objects if o.trajectory.kind != "fixed")
        print(f"{name:18s} frames={script.frame_count:4d} "
              f"{script.width}x{script.height} moving_objects={movers}")
    return 0


def cmd_gen(args):
    from .synth import SceneScript, SyntheticSequence, bundled_scripts, write_container
    scripts = bundled_scripts()
    if args.script in scripts:
        script = scripts[args.script]
    else:
        script = SceneScript.load(args.script)
    if args.frames:
        from dataclasses import replace
        script = replace(script, frame_count=args.frames)
    seq = SyntheticSequence(script)
    write_container(args.output, seq)
    meta = {"script": script.name, "frames": script.frame_count,
            "overrides": script.config_overrides}
    Path(str(args.output) + ".meta.json").write_text(json.dumps(meta))
    print(f"WROTE {args.output} frames={script.frame_count}")
    return 0


def cmd_serve(args):
    from .streaming import RelayServer
    host, port = _address(args.listen)
    netlog = open(args.netlog, "w") if args.netlog else None
    server = RelayServer(host, port, codec=args.codec, netlog=netlog,
                         max_clients=args.max_clients,
                         realtime_reliable=args.reliable_realtime)
    server.start()
    print(f"LISTENING {server.port}", flush=True)
    stop = []
    signal.signal(signal.SIGTERM, lambda *a: stop.append(1))
    signal.signal(signal.SIGINT, lambda *a: stop.append(1))
    try:
        while not stop:
            time.sleep(0.2)
    finally:
        server.stop()
        if netlog:
            netlog.close()
    return 0


def _load_config(args) -> PipelineConfig:
    cfg = PipelineConfig.load(args.config) if args.config else PipelineConfig()
    if getattr(args, "codec", None):
        from dataclasses import replace
        cfg = replace(cfg, codec=args.codec)
    return cfg


def cmd_reconstruct(args):
    from .streaming import ReconstructionClient, connect
    from . import protocol as P
    from .synth import read_container

    cfg = _load_config(args)
    source = read_container(args.seq)
    netlog = open(args.netlog, "w") if args.netlog else None
    conn = None
    if args.connect:
        conn = connect(_address(args.connect), name="recon", netlog=netlog,
                       codec=P.Codec(cfg.codec))
    snapshots = tuple(int(v) for v in args.snapshot_frames.split(",")) \
        if args.snapshot_frames else ()
    client = ReconstructionClient(
        source, cfg, conn, out_dir=args.out_dir, snapshot_frames=snapshots,
        progress=lambda k: print(f"FRAME {k}", flush=True))
    if args.debug_dir:
        _attach_debug_dump(client, Path(args.debug_dir))
    if conn is not None:
        client.handshake()
    summary = client.run()
    if conn is not None:
        conn.close()
    if netlog:
        netlog.close()
    print(f"DONE {summary['digest']}", flush=True)
    return 0


def _attach_debug_dump(client, debug_dir: Path):
    """Per-frame PNG dumps of scores, mask and accumulated motion."""
    from PIL import Image
    import numpy as np

    debug_dir.mkdir(parents=True, exist_ok=True)
    original = client._perceive

    def wrapped(k):
        out = original(k)
        frame, pose, score_map, mask, records, emitted, conv = out
        Image.fromarray(
            np.clip(score_map.scores * 80, 0, 255).astype(np.uint8)
        ).save(debug_dir / f"scores_{k:05d}.png")
        Image.fromarray((mask * 255).astype(np.uint8)).save(
            debug_dir / f"mask_{k:05d}.png")
        Image.fromarray(
            np.clip(score_map.accum * 500, 0, 255).astype(np.uint8)
        ).save(debug_dir / f"accum_{k:05d}.png")
        return out

    client._perceive = wrapped


def cmd_explore(args):
    from .streaming import ExplorationClient, ViewerGateway, connect
    from . import protocol as P

    netlog = open(args.netlog, "w") if args.netlog else None
    conn = connect(_address(args.connect), name=args.name, netlog=netlog,
                   codec=P.Codec(args.codec))
    client = ExplorationClient(conn, name=args.name, out_dir=args.out_dir)
    gateway = None
    if args.gateway_port is not None:
        gateway = ViewerGateway(client, port=args.gateway_port)
        client.on_update = gateway.on_update
        gateway.start()
        print(f"GATEWAY {gateway.port}", flush=True)
    client.handshake()
    print(f"READY {args.name}", flush=True)
    summary = client.run()
    if args.linger > 0:
        time.sleep(args.linger)
    if gateway:
        gateway.stop()
    conn.close()
    if netlog:
        netlog.close()
    print(f"DONE {summary['digest']}", flush=True)
    return 0


def cmd_run(args):
    from .harness import run_end_to_end
    from .synth import read_container  # validate early

    cfg = _load_config(args)
    meta_path = Path(str(args.seq) + ".meta.json")
    if meta_path.exists() and not args.no_script_overrides:
        overrides = json.loads(meta_path.read_text()).get("overrides", {})
        cfg = cfg.with_overrides(overrides)
    read_container(args.seq)
    snapshots = tuple(int(v) for v in args.snapshot_frames.split(",")) \
        if args.snapshot_frames else ()
    report = run_end_to_end(
        args.seq, args.out_dir, cfg, snapshot_frames=snapshots,
        late_join_frame=args.late_join_frame,
        reliable_realtime=not args.lossy_realtime)
    if args.report:
        Path(args.report).write_text(json.dumps(report, indent=2))
    print(json.dumps({k: report[k] for k in
                      ("latency_s", "fps", "bandwidth_mbit_s", "digests")},
                     indent=2))
    return 0


def cmd_metrics(args):
    from .harness import build_report
    report = build_report(args.out_dir)
    print(json.dumps(report, indent=2))
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="dynfuse", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("scripts", help="list bundled scene scripts")

    p = sub.add_parser("gen", help="record a synthetic sequence container")
    p.add_argument("script", help="bundled script name or script JSON path")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--frames", type=int, default=None)

    p = sub.add_parser("serve", help="run the relay server")
    p.add_argument("--listen", default="127.0.0.1:0")
    p.add_argument("--codec", default="deflate",
                   choices=["identity", "deflate", "default"])
    p.add_argument("--max-clients", type=int, default=16)
    p.add_argument("--netlog", default=None)
    p.add_argument("--reliable-realtime", action="store_true",
                   help="deliver dynamic frames/poses reliably (deterministic runs)")

    p = sub.add_parser("reconstruct", help="run the reconstruction client")
    p.add_argument("--seq", required=True)
    p.add_argument("--connect", default=None)
    p.add_argument("--config", default=None)
    p.add_argument("--codec", default=None,
                   choices=[None, "identity", "deflate", "default"])
    p.add_argument("--out-dir", required=True)
    p.add_argument("--netlog", default=None)
    p.add_argument("--snapshot-frames", default=None)
    p.add_argument("--debug-dir", default=None)

    p = sub.add_parser("explore", help="run a headless exploration client")
    p.add_argument("--connect", required=True)
    p.add_argument("--name", default="explore0")
    p.add_argument("--codec", default="deflate",
                   choices=["identity", "deflate", "default"])
    p.add_argument("--out-dir", required=True)
    p.add_argument("--netlog", default=None)
    p.add_argument("--gateway-port", type=int, default=None)
    p.add_argument("--linger", type=float, default=0.0,
                   help="seconds to keep serving the gateway after end of stream")

    p = sub.add_parser("run", help="end-to-end: server + clients + report")
    p.add_argument("--seq", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--report", default=None)
    p.add_argument("--config", default=None)
    p.add_argument("--codec", default=None,
                   choices=[None, "identity", "deflate", "default"])
    p.add_argument("--snapshot-frames", default=None)
    p.add_argument("--late-join-frame", type=int, default=None)
    p.add_argument("--lossy-realtime", action="store_true",
                   help="latest-wins dynamic frames (live behavior)")
    p.add_argument("--no-script-overrides", action="store_true")

    p = sub.add_parser("metrics", help="recompute the report from run logs")
    p.add_argument("--out-dir", required=True)

    args = parser.parse_args(argv)
    handler = {
        "scripts": cmd_scripts,
        "gen": cmd_gen,
        "serve": cmd_serve,
        "reconstruct": cmd_reconstruct,
        "explore": cmd_explore,
        "run": cmd_run,
        "metrics": cmd_metrics,
    }[args.command]
    return handler(args)


if __name__ == "__main__":
    sys.exit(main())
