"""End-to-end orchestration: three processes, logs, metrics report.

Spawns the relay server, one or two headless exploration clients and the
reconstruction client as separate OS processes on this machine (remote
machines only change the addresses), waits for a clean finish and reduces
the per-process logs into a MetricsReport plus state digests.
"""

from __future__ import annotations

import json
import subprocess
import sys
import time
from pathlib import Path

from .config import PipelineConfig
from .metrics import (
    MetricsReport,
    fps_metric,
    grouped_bandwidth,
    latency_metric,
    read_arrival_log,
    read_emission_log,
    read_netlog,
)


class HarnessError(RuntimeError):
    pass


def _spawn(args, cwd=None):
    return subprocess.Popen(
        [sys.executable, "-m", "dynfuse", *args],
        stdout=subprocess.PIPE, stderr=subprocess.PIPE, text=True, cwd=cwd)


def _await_line(proc, prefix, timeout=30.0, sink=None):
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        line = proc.stdout.readline()
        if not line:
            break
        line = line.strip()
        if sink is not None:
            sink.append(line)
        if line.startswith(prefix):
            return line
    raise HarnessError(f"did not observe {prefix!r} from {proc.args}")


def _fail(proc, name):
    try:
        _, err = proc.communicate(timeout=5)
    except subprocess.TimeoutExpired:
        proc.kill()
        err = "<no stderr: killed>"
    raise HarnessError(f"{name} failed (rc={proc.returncode}): {err[-2000:]}")


def run_end_to_end(seq_path: str | Path, out_dir: str | Path,
                   config: PipelineConfig | None = None,
                   snapshot_frames: tuple[int, ...] = (),
                   late_join_frame: int | None = None,
                   reliable_realtime: bool = True,
                   timeout: float = 600.0) -> dict:
    """Runs server + exploration client(s) + reconstruction over a container.

    Returns the report dict (also written to out_dir/report.json).  Raises
    HarnessError with diagnostics if any process fails.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    config = config or PipelineConfig()
    cfg_path = out / "config.json"
    cfg_path.write_text(config.to_json())

    t_start = time.monotonic()
    server = _spawn(["serve", "--listen", "127.0.0.1:0",
                     "--codec", config.codec,
                     "--netlog", str(out / "server.netlog"),
                     *(["--reliable-realtime"] if reliable_realtime else [])])
    procs = {"server": server}
    explorers = []
    try:
        line = _await_line(server, "LISTENING")
        port = int(line.split()[1])

        def start_explorer(name):
            proc = _spawn(["explore", "--connect", f"127.0.0.1:{port}",
                           "--name", name, "--out-dir", str(out),
                           "--codec", config.codec,
                           "--netlog", str(out / f"{name}.netlog")])
            procs[name] = proc
            explorers.append((name, proc))
            _await_line(proc, "READY")

        start_explorer("explore0")

        recon = _spawn([
            "reconstruct", "--seq", str(seq_path),
            "--connect", f"127.0.0.1:{port}",
            "--config", str(cfg_path), "--out-dir", str(out),
            "--netlog", str(out / "recon.netlog"),
            *(["--snapshot-frames", ",".join(map(str, snapshot_frames))]
              if snapshot_frames else []),
        ])
        procs["recon"] = recon

        late_started = late_join_frame is None
        deadline = time.monotonic() + timeout
        while True:
            if time.monotonic() > deadline:
                raise HarnessError("reconstruction timed out")
            line = recon.stdout.readline()
            if not line:
                break
            line = line.strip()
            if line.startswith("FRAME") and not late_started:
                if int(line.split()[1]) >= late_join_frame:
                    start_explorer("explore1")
                    late_started = True
        recon.wait(timeout=60)
        if recon.returncode != 0:
            _fail(recon, "reconstruction")
        if not late_started:
            start_explorer("explore1")  # join after the final snapshot

        for name, proc in explorers:
            try:
                proc.wait(timeout=120)
            except subprocess.TimeoutExpired:
                _fail(proc, name)
            if proc.returncode != 0:
                _fail(proc, name)
    finally:
        for proc in procs.values():
            if proc.poll() is None:
                proc.terminate()
                try:
                    proc.wait(timeout=10)
                except subprocess.TimeoutExpired:
                    proc.kill()
    runtime = time.monotonic() - t_start

    report = build_report(out, runtime_s=runtime)
    (out / "report.json").write_text(json.dumps(report, indent=2))
    return report


def build_report(out_dir: str | Path, runtime_s: float | None = None) -> dict:
    """Reduces the logs in a run directory into the metrics report."""
    out = Path(out_dir)
    recon_summary = json.loads((out / "summary.json").read_text())
    emissions = read_emission_log(out / "emission.log")

    explorers = sorted(p.name.split(".")[0]
                       for p in out.glob("*.summary.json")
                       if p.name.startswith("explore"))
    digests = {"reconstruction": recon_summary["digest"], "exploration": {}}
    latency = fps = None
    unmatched = 0
    dyn_pixels = {}
    sync_ok = recon_summary.get("sync_ok", False)
    for name in explorers:
        summary = json.loads((out / f"{name}.summary.json").read_text())
        digests["exploration"][name] = summary["digest"]
        if name == "explore0":
            arrivals, dyn_pixels = read_arrival_log(out / f"{name}.arrival.log")
            latency, unmatched = latency_metric(
                emissions, arrivals,
                emission_offset_us=recon_summary.get("sync_offset_us", 0),
                arrival_offset_us=summary.get("sync_offset_us", 0))
            fps = fps_metric(list(arrivals.values()))
            sync_ok = sync_ok and summary.get("sync_ok", False)

    bandwidth = {}
    server_log = out / "server.netlog"
    explorer_log = out / "explore0.netlog"
    if server_log.exists() and explorer_log.exists():
        tsdf_rows = [r for r in read_netlog(server_log, "rx")
                     if r[1] == "TSDF_BLOCKS"]
        down_rows = read_netlog(explorer_log, "rx")
        bandwidth = {k: v.as_dict() for k, v in
                     grouped_bandwidth(tsdf_rows, down_rows, runtime_s).items()}

    report = MetricsReport(latency, fps, {}, unmatched, sync_ok).as_dict()
    report["bandwidth_mbit_s"] = bandwidth
    report["digests"] = digests
    report["dynamic_pixels_per_frame"] = {str(k): v
                                          for k, v in sorted(dyn_pixels.items())}
    report["frames"] = recon_summary.get("frames")
    if runtime_s is not None:
        report["runtime_s"] = runtime_s
    return report
