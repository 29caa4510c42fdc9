"""screenctl: serve, simulate, ingest, label, export, stats, verify."""

from __future__ import annotations

import json
import shutil
import sys
import tempfile
import threading
import time
from pathlib import Path

import click
import uvicorn

from . import Platform, create_app
from ..autolabel import AutoLabeler
from ..config import ENV_API_TOKEN, load_settings
from ..errors import ConfigError, ScreenforgeError
from ..qlog import QueueLog, TopicCorrupt
from ..registry import Registry
from ..simulate import SimulationSpec, generate

_SOURCE_FILES = {
    "crm": ("crm.csv",),
    "ris": ("ris.csv", "ris.txt"),
    "ehr": ("ehr.json", "ehr.xml"),
}


def _settings(data_root: str | None, config: str | None):
    try:
        return load_settings(data_root=data_root, config_path=config)
    except ConfigError as exc:
        raise click.ClickException(str(exc))


def _common(f):
    f = click.option("--config", type=click.Path(), default=None,
                     help="INI config file.")(f)
    f = click.option("--data-root", type=click.Path(), default=None,
                     help="Platform state directory.")(f)
    return f


@click.group()
def main():
    """Desk-scale lung screening data platform."""


@main.command()
@_common
@click.option("--host", default=None, help="Bind address override.")
@click.option("--port", type=int, default=None, help="Port override.")
def serve(data_root, config, host, port):
    """Run the HTTP gateway with a background source poller."""
    settings = _settings(data_root, config)
    app = create_app(settings)
    platform = app.state.platform
    stop = threading.Event()

    def poll_loop():
        while not stop.wait(settings.poll_interval_seconds):
            try:
                platform.poll_sources()
            except ScreenforgeError as exc:
                click.echo(f"poll: {exc}", err=True)

    poller = threading.Thread(target=poll_loop, daemon=True,
                              name="source-poller")
    poller.start()
    try:
        uvicorn.run(app, host=host or settings.host,
                    port=port or settings.port, log_level="warning")
    finally:
        stop.set()
        poller.join(timeout=5)


@main.command()
@_common
@click.option("--seed", type=int, default=42, show_default=True)
@click.option("-n", "--participants", type=int, default=50, show_default=True)
@click.option("--anomaly-rate", type=float, default=0.06, show_default=True)
@click.option("--out", type=click.Path(), default=None,
              help="Output directory (default <data-root>/sim).")
def simulate(data_root, config, seed, participants, anomaly_rate, out):
    """Generate synthetic CRM/RIS/EHR/DICOM source files."""
    settings = _settings(data_root, config)
    out_dir = Path(out) if out else settings.data_root / "sim"
    ledger = generate(SimulationSpec(seed=seed, participants=participants,
                                     anomaly_rate=anomaly_rate), out_dir)
    counts = ledger["counts"]
    click.echo(f"wrote {out_dir}")
    for name in ("participants", "expected_eligible", "studies",
                 "instances", "anomalous_studies"):
        click.echo(f"  {name}: {counts[name]}")


@main.command()
@_common
@click.option("--from", "src", type=click.Path(exists=True), default=None,
              help="Source directory (default <data-root>/sim).")
def ingest(data_root, config, src):
    """Pull simulated source files through the full ingest path."""
    settings = _settings(data_root, config)
    src_dir = Path(src) if src else settings.data_root / "sim"
    if not src_dir.is_dir():
        raise click.ClickException(f"no source directory {src_dir}")
    platform = Platform(settings)
    try:
        for source, names in _SOURCE_FILES.items():
            for name in names:
                path = src_dir / name
                if path.is_file():
                    shutil.copy2(path, platform.connectors[source.upper()]
                                 .inbox / name)
        dicom_dir = src_dir / "dicom"
        routed = 0
        if dicom_dir.is_dir():
            for path in sorted(dicom_dir.glob("*.dcm")):
                shutil.copy2(path, platform.pacs.inbox / path.name)
                routed += 1
        reports = platform.poll_sources()
        ready = platform.pacs.finalize_ready(force=True)
        registry_report = platform.registry.consume_available()
        pacs_report = reports.pop("pacs")
        rows = sum(r.rows for r in reports.values())
        published = sum(r.published for r in reports.values())
        quarantined = sum(r.quarantined for r in reports.values())
        for report in list(reports.values()) + [pacs_report]:
            for line in report.reasons:
                click.echo(f"warning: {line}", err=True)
        click.echo(f"source rows: {rows}, published: {published}, "
                   f"quarantined: {quarantined}")
        click.echo(f"instances routed: {routed}, "
                   f"stored: {pacs_report.stored}, "
                   f"studies ready: {len(ready)}")
        stats = platform.registry.stats()
        click.echo(f"cases: {stats['cases_total']}, "
                   f"records applied: {registry_report['processed']}")
    finally:
        platform.close()


@main.command()
@click.option("--url", default=None, help="Gateway base URL.")
@click.option("--token", envvar=ENV_API_TOKEN, default=None)
@click.option("--seed", type=int, default=42, show_default=True)
@click.option("--second-opinion-rate", type=float, default=0.15,
              show_default=True)
@click.option("--close-tasks", is_flag=True, default=False)
@_common
def label(data_root, config, url, token, seed, second_opinion_rate,
          close_tasks):
    """Drain the worklist with the deterministic reader bot."""
    settings = _settings(data_root, config)
    if not token:
        token = settings.api_token or settings.reader_token
    if not token:
        raise click.ClickException("no API token configured")
    base = url or f"http://{settings.host}:{settings.port}"
    bot = AutoLabeler(base, token, seed=seed,
                      second_opinion_rate=second_opinion_rate)
    try:
        report = bot.run(close_tasks=close_tasks)
    finally:
        bot.close()
    click.echo(json.dumps(report, indent=2))


@main.command()
@_common
@click.option("--out", type=click.Path(), default=None,
              help="CSV file (default stdout).")
@click.option("--manifest", "manifest_path", type=click.Path(), default=None,
              help="Also write the export manifest as JSON.")
def export(data_root, config, out, manifest_path):
    """Write the analysis-ready screening outcome table."""
    settings = _settings(data_root, config)
    platform = Platform(settings)
    try:
        platform.refresh()
        data, manifest = platform.registry.export_csv()
    finally:
        platform.close()
    if out:
        Path(out).write_bytes(data)
        click.echo(f"wrote {out} ({manifest['row_count']} rows)")
    else:
        sys.stdout.buffer.write(data)
    if manifest_path:
        Path(manifest_path).write_text(json.dumps(manifest, indent=2,
                                                  sort_keys=True) + "\n")


@main.command()
@_common
def stats(data_root, config):
    """Print registry statistics as JSON."""
    settings = _settings(data_root, config)
    platform = Platform(settings)
    try:
        platform.refresh()
        click.echo(json.dumps(platform.registry.stats(), indent=2))
    finally:
        platform.close()


def _verify_queue(queue: QueueLog) -> list[str]:
    problems = []
    for topic in queue.topics():
        try:
            end = queue.recover(topic)
        except TopicCorrupt as exc:
            problems.append(f"queue topic {topic}: {exc}")
            continue
        expect = 0
        while expect < end:
            batch = queue.read(topic, expect, 1000)
            if not batch:
                problems.append(f"queue topic {topic}: offsets end at "
                                f"{expect}, expected {end}")
                break
            for record in batch:
                if record.offset != expect:
                    problems.append(
                        f"queue topic {topic}: offset gap, expected "
                        f"{expect} found {record.offset}")
                    return problems
                expect += 1
    return problems


def _verify_replay(settings, queue: QueueLog, live_registry) -> list[str]:
    live_csv, live_manifest = live_registry.export_csv()
    with tempfile.TemporaryDirectory() as tmp:
        fresh = Registry(Path(tmp), queue, rules=settings.eligibility,
                         follow_up_days=settings.follow_up_days)
        try:
            fresh.consume_available()
            replay_csv, replay_manifest = fresh.export_csv()
        finally:
            fresh.close()
    problems = []
    if replay_csv != live_csv:
        problems.append("replay: export differs from live registry")
    for key in ("row_count", "rows"):
        if replay_manifest.get(key) != live_manifest.get(key):
            problems.append(f"replay: manifest {key} differs")
    return problems


def _verify_leaks(platform) -> list[str]:
    needles = [s.lower().encode() for s in
               platform.vault.all_identity_strings()]
    if not needles:
        return []
    problems = []
    roots = [platform.queue.root, platform.pacs.storage,
             platform.settings.data_root / "registry"]
    for root in roots:
        for path in sorted(Path(root).rglob("*")):
            if not path.is_file():
                continue
            blob = path.read_bytes().lower()
            for needle in needles:
                if needle in blob:
                    problems.append(
                        f"leak: {needle.decode(errors='replace')!r} "
                        f"in {path}")
    export_csv, _ = platform.registry.export_csv()
    blob = export_csv.lower()
    for needle in needles:
        if needle in blob:
            problems.append(
                f"leak: {needle.decode(errors='replace')!r} in export")
    return problems


@main.command()
@_common
def verify(data_root, config):
    """Check queue integrity, PACS index, replay determinism, identifiers."""
    settings = _settings(data_root, config)
    platform = Platform(settings)
    failures = 0
    try:
        try:
            platform.refresh()
        except ScreenforgeError:
            pass  # the queue-integrity check reports the specifics
        checks = (
            ("queue-integrity", lambda: _verify_queue(platform.queue)),
            ("pacs-index", platform.pacs.verify),
            ("replay-determinism",
             lambda: _verify_replay(settings, platform.queue,
                                    platform.registry)),
            ("identifier-scan", lambda: _verify_leaks(platform)),
        )
        for name, check in checks:
            try:
                problems = check()
            except ScreenforgeError as exc:
                problems = [str(exc)]
            if problems:
                failures += len(problems)
                for line in problems:
                    click.echo(f"FAIL {name}: {line}")
            else:
                click.echo(f"OK {name}")
    finally:
        platform.close()
    if failures:
        raise SystemExit(1)


if __name__ == "__main__":
    main()
