#!/usr/bin/env python

__copyright__ = "Copyright (c) 2024-2025 Alex Laird"
__license__ = "MIT"

import glob
import logging
import os
import platform
import re
import time
from typing import Any, Dict, Optional

import click
from click.core import Context

from buildmonitor import __version__, util
from buildmonitor.conf import BuildMonitorConfig
from buildmonitor.constants import Constants
from buildmonitor.deposition import DepositionModel
from buildmonitor.deviation import classify, compute_deviation, deviation_mesh, summarize
from buildmonitor.exception import (BuildMonitorConfigError, BuildMonitorError, BuildMonitorIOError,
                                    BuildMonitorStreamError)
from buildmonitor.fusion import save_grid
from buildmonitor.meshing import read_ply, write_ply
from buildmonitor.monitor import run_monitor
from buildmonitor.reference import ReferenceBuilder, ReferenceSettings, reference_mesh
from buildmonitor.scansim import SimulationSettings, VirtualProfiler, run_simulation
from buildmonitor.toolpath import Toolpath, parse_toolpath, with_vertex_dwell

logger = logging.getLogger("buildmonitor")

REPORT_PATTERN = re.compile(r"^report-(\d+)\.json$")


def exit_code(error: Exception) -> int:
    """
    The process exit code for an error: 2 for config, 3 for I/O (toolpath files included), 4 for stream integrity
    and 1 for anything else.
    """
    if isinstance(error, BuildMonitorConfigError):
        return 2
    elif isinstance(error, (BuildMonitorIOError, OSError)):
        return 3
    elif isinstance(error, BuildMonitorStreamError):
        return 4
    return 1


def _fail(ctx: Context,
          error: Exception) -> None:
    logger.debug("An error occurred.", exc_info=True)
    click.secho(f"Error: {error}", fg="red", err=True)
    ctx.exit(exit_code(error))


@click.group()
@click.option("--config", "config_path",
              help="The config file (JSON or YAML).")
@click.option("--set", "overrides", multiple=True, metavar="KEY=VALUE",
              help="Override a config value, dotted keys address nested blocks. May be repeated.")
@click.option("--debug", is_flag=True, default=False,
              help="Enable debugging and send output to command line.")
@click.pass_context
def build_monitor_cli(ctx: Context,
                      **kwargs: Any) -> None:
    """
    build-monitor reconstructs a growing additively-manufactured part from laser profiler scan streams, compares
    each layer against a deposition-model reference, and tracks over- and underbuild defects layer by layer.

    A bundled simulator produces scan streams with a known ground truth, so every stage can be checked at desk
    scale. All lengths are in mm and all times in s.
    """
    ctx.ensure_object(dict)

    if kwargs["debug"]:
        logger.setLevel(logging.DEBUG)
        logger.addHandler(logging.StreamHandler())

    try:
        ctx.obj["conf"] = BuildMonitorConfig(config_path=kwargs.get("config_path"),
                                             overrides=kwargs.get("overrides"))
    except BuildMonitorError as e:
        _fail(ctx, e)


@build_monitor_cli.command()
@click.pass_context
@click.option("--toolpath", required=True,
              help="The toolpath CSV to simulate.")
@click.option("--out",
              help="The directory to write streams to, defaults to the config's output_dir.")
@click.option("--seed", type=int,
              help="The noise seed, passing this overrides config value.")
def simulate(ctx: Context,
             **kwargs: Any) -> None:
    """
    Simulate a build: deposit along the toolpath and record profiler streams, poses and the true final surface.
    """
    config = ctx.obj["conf"]

    try:
        config.validate()
        toolpath = _load_toolpath(config, kwargs["toolpath"])
        out_dir = kwargs["out"] or config.output_dir

        click.echo(f"Info: Simulating {len(toolpath)} segments ({toolpath.duration:.1f} s), "
                   "this might take a minute ...")
        start_time = time.time()

        result = run_simulation(toolpath,
                                DepositionModel.from_config(config.deposition),
                                [VirtualProfiler.from_config(block) for block in config.profilers],
                                out_dir,
                                SimulationSettings.from_config(config, kwargs["seed"]))

        for scanner_id, frames in sorted(result.frames.items()):
            click.echo(f"Info: Scanner {scanner_id}: {frames} frames.")
        click.echo(f"... simulation written to {out_dir} in {time.time() - start_time:.1f} seconds.\n")
    except (BuildMonitorError, OSError) as e:
        _fail(ctx, e)


@build_monitor_cli.command()
@click.pass_context
@click.option("--toolpath", required=True,
              help="The executed toolpath CSV, used for the reference model.")
@click.option("--streams", required=True,
              help="The directory holding scan-<id>.jsonl, poses.jsonl and calibration.json.")
@click.option("--out",
              help="The directory to write outputs to, defaults to the config's output_dir.")
@click.option("--layers",
              help="Only analyze layers in this inclusive range, as \"a..b\".")
def run(ctx: Context,
        **kwargs: Any) -> None:
    """
    Fuse recorded streams and analyze every layer: fused, reference and deviation meshes, a report per layer and
    the cumulative track CSV.
    """
    config = ctx.obj["conf"]

    try:
        config.validate()
        layer_range = util.parse_layer_range(kwargs["layers"])
        toolpath = _load_toolpath(config, kwargs["toolpath"])
        out_dir = kwargs["out"] or config.output_dir

        click.echo(f"Info: Processing streams in {kwargs['streams']}, this might take a minute ...")

        result = run_monitor(config, toolpath, kwargs["streams"], out_dir, layer_range)

        for layer, report in sorted(result.reports.items()):
            click.echo(f"Layer {layer}: {_global_output(report['global'])}, {len(report['regions'])} regions, "
                       f"{len(report['tracks'])} active tracks")
        timing = result.manifest["timing"]
        if timing["frames_per_s"] is not None:
            click.echo(f"Info: Integrated {result.manifest['frames']['integrated']} frames at "
                       f"{timing['frames_per_s']} frames/s.")
        if "validation" in result.manifest:
            click.echo(f"Info: Final surface vs ground truth: {_global_output(result.manifest['validation'])}.")
        click.echo(f"... {len(result.files)} files written to {out_dir}.\n")
    except (BuildMonitorError, OSError) as e:
        _fail(ctx, e)


@build_monitor_cli.command()
@click.pass_context
@click.option("--toolpath", required=True,
              help="The toolpath CSV to build the reference from.")
@click.option("--out",
              help="The directory to write to, defaults to the config's output_dir.")
@click.option("--layers",
              help="Only build layers in this inclusive range, as \"a..b\".")
def reference(ctx: Context,
              **kwargs: Any) -> None:
    """
    Build the near-net reference at the end of each layer, as a mesh, a distance grid and a summary.
    """
    config = ctx.obj["conf"]

    try:
        config.validate()
        layer_range = util.parse_layer_range(kwargs["layers"])
        toolpath = _load_toolpath(config, kwargs["toolpath"])
        out_dir = util.ensure_dir(kwargs["out"] or config.output_dir)

        builder = ReferenceBuilder(toolpath, DepositionModel.from_config(config.deposition),
                                   ReferenceSettings.from_config(config))
        for layer in toolpath.layer_indices:
            if not util.in_layer_range(layer, layer_range):
                continue
            ref = builder.advance_to_layer(layer)
            write_ply(os.path.join(out_dir, Constants.REFERENCE_MESH_FILENAME.format(layer=layer)),
                      reference_mesh(ref))
            save_grid(ref.grid, os.path.join(out_dir, Constants.REFERENCE_GRID_FILENAME.format(layer=layer)))
            summary = ref.to_dict()
            util.write_json(os.path.join(out_dir, Constants.REFERENCE_SUMMARY_FILENAME.format(layer=layer)), summary)

            click.echo(f"Layer {layer}: max height {summary['max_height_mm']} mm, "
                       f"volume {summary['volume_mm3']} mm^3")
        click.echo("")
    except (BuildMonitorError, OSError) as e:
        _fail(ctx, e)


@build_monitor_cli.command()
@click.pass_context
@click.argument("mesh_a")
@click.argument("mesh_b")
@click.option("--out",
              help="The directory to write the deviation mesh and summary to, defaults to the config's output_dir.")
def compare(ctx: Context,
            mesh_a: str,
            mesh_b: str,
            out: Optional[str]) -> None:
    """
    Signed deviation of every vertex of MESH_A from the surface of MESH_B (positive beyond it).
    """
    config = ctx.obj["conf"]

    try:
        scanned = read_ply(mesh_a)
        target = read_ply(mesh_b)
        out_dir = util.ensure_dir(out or config.output_dir)

        global_tolerance = float(config.global_tolerance_mm)
        local_threshold = float(config.local_threshold)
        deviation_map = classify(compute_deviation(scanned, target), global_tolerance, local_threshold)

        summary = summarize(deviation_map)
        summary["mesh_a"] = os.path.abspath(mesh_a)
        summary["mesh_b"] = os.path.abspath(mesh_b)
        write_ply(os.path.join(out_dir, Constants.COMPARE_MESH_FILENAME),
                  deviation_mesh(deviation_map, global_tolerance, local_threshold))
        util.write_json(os.path.join(out_dir, Constants.COMPARE_SUMMARY_FILENAME), summary)

        click.echo(f"{_global_output(summary)} over {summary['vertices']} vertices\n")
    except (BuildMonitorError, OSError) as e:
        _fail(ctx, e)


@build_monitor_cli.command()
@click.pass_context
@click.option("--out",
              help="The directory of a finished run, defaults to the config's output_dir.")
@click.option("--layers",
              help="Only show layers in this inclusive range, as \"a..b\".")
def report(ctx: Context,
           **kwargs: Any) -> None:
    """
    Show the defect tracks of a finished run, layer by layer.
    """
    config = ctx.obj["conf"]

    try:
        layer_range = util.parse_layer_range(kwargs["layers"])
        out_dir = kwargs["out"] or config.output_dir

        reports = _find_reports(out_dir)
        if not reports:
            raise BuildMonitorIOError(f"No layer reports found in {out_dir}")

        for layer, path in sorted(reports.items()):
            if not util.in_layer_range(layer, layer_range):
                continue
            click.echo(f"{_report_output(util.read_json(path))}\n")
    except (BuildMonitorError, OSError) as e:
        _fail(ctx, e)


@build_monitor_cli.command()
@click.pass_context
@click.argument("key")
@click.argument("value")
def update_config(ctx: Context,
                  key: str,
                  value: str) -> None:
    """
    Persist the given config value to the config file.
    """
    config = ctx.obj["conf"]

    try:
        config.update_config(key, util.to_type(value))
    except (BuildMonitorError, OSError) as e:
        _fail(ctx, e)

    click.echo(f"Info: Config \"{key}\" updated to \"{value}\".\n")


@build_monitor_cli.command()
@click.pass_context
def version(ctx: Context) -> None:
    """
    Show the package version.
    """
    click.echo(f"build-monitor/{__version__} Python/{platform.python_version()}")
    ctx.exit(0)


def _load_toolpath(config: BuildMonitorConfig,
                   path: str) -> Toolpath:
    return with_vertex_dwell(parse_toolpath(path), float(config.vertex_dwell_s))


def _find_reports(out_dir: str) -> Dict[int, str]:
    if not os.path.isdir(out_dir):
        raise BuildMonitorIOError(f"Output directory not found: {out_dir}")

    reports = {}
    for path in glob.glob(os.path.join(out_dir, "report-*.json")):
        match = REPORT_PATTERN.match(os.path.basename(path))
        if match:
            reports[int(match.group(1))] = path
    return reports


def _global_output(summary: Dict[str, Any]) -> str:
    return (f"mean {summary.get('mean_dev_mm', 0.0):+.3f} mm, RMS {summary.get('rms_dev_mm', 0.0):.3f} mm, "
            f"max |d| {summary.get('max_dev_mm', 0.0):.3f} mm")


def _track_output(track: Dict[str, Any]) -> str:
    track_str = f"  Track #{track['id']}: {track['class']}, {track['status']}, trend {track['trend']}"
    track_str += f"\n    Layers: {track['first_layer']}..{track['last_layer']}"
    track_str += f"\n    Area: {track['area_mm2']:.2f} mm^2"
    track_str += f"\n    Height: {track['height_mm']:.3f} mm"
    track_str += f"\n    Peak Deviation: {track['peak_dev_mm']:.3f} mm"
    if track.get("closed_layer") is not None:
        track_str += f"\n    Closed On Layer: {track['closed_layer']}"

    return track_str


def _report_output(layer_report: Dict[str, Any]) -> str:
    report_str = """-----------------------------------------------------------------------
Layer {layer}
-----------------------------------------------------------------------""".format(layer=layer_report["layer"])

    report_str += f"\n  Deviation: {_global_output(layer_report.get('global', {}))}"
    summary = layer_report.get("global", {})
    if summary.get("edge_center_ratio") is not None:
        report_str += f"\n  Edge/Center Height: {summary['edge_center_ratio']:.3f}"
    report_str += f"\n  Regions: {len(layer_report.get('regions', []))}"

    tracks = layer_report.get("tracks", [])
    history = layer_report.get("history", [])
    report_str += f"\n  Active Tracks: {len(tracks)}"
    for track in tracks:
        report_str += f"\n{_track_output(track)}"
    if history:
        report_str += f"\n  Closed Tracks: {len(history)}"
        for track in history:
            report_str += f"\n{_track_output(track)}"

    report_str += "\n-----------------------------------------------------------------------"

    return report_str


if __name__ == "__main__":
    build_monitor_cli(obj={})
