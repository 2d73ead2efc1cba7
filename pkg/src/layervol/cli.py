"""``layervol`` command line.

Every run writes ``manifest.json`` (command line, resolved config and content
hashes of all inputs) into its run directory; ``layervol replay`` re-executes
a manifest.  Exit codes: 0 success, 1 internal error or failed verification,
2 user or configuration error.
"""

import argparse
import dataclasses
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .config import load_config, write_config, write_resolved
from .errors import CheckpointError, ConfigError, LayervolError
from .fields import BODY, CLOTHING

log = logging.getLogger("layervol")

EXIT_OK, EXIT_INTERNAL, EXIT_USER = 0, 1, 2
COMMANDS = ("gen-body", "gen-cloth", "match", "render", "transfer", "make-scene", "verify")


class UsageError(LayervolError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise SystemExit(f"{self.prog}: error: {message}") from None


def git_blob_hash(data):
    """SHA-1 of ``b"blob <size>\\0" + data``, as ``git hash-object`` computes it."""
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def _input_record(paths):
    records = {}
    for name, path in paths.items():
        if path is None:
            continue
        p = Path(path)
        if not p.exists():
            raise UsageError(f"input {name} not found: {path}")
        records[name] = {"path": str(path), "blob": git_blob_hash(p.read_bytes())}
    digest = hashlib.sha256()
    for name in sorted(records):
        digest.update(f"{name}\0{records[name]['blob']}\n".encode())
    return records, digest.hexdigest()


def _strip_out(argv):
    out, skip = [], False
    for i, tok in enumerate(argv):
        if skip:
            skip = False
            continue
        if tok == "--out":
            skip = True
            continue
        if tok.startswith("--out="):
            continue
        out.append(tok)
    return out


def write_manifest(out, command, argv, config, inputs):
    records, digest = _input_record(inputs)
    manifest = {
        "command": command,
        "argv": _strip_out(argv),
        "config": config.resolved(),
        "inputs": records,
        "input_hash": digest,
        "version": __version__,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    write_config(out / "config.ini", config)
    return manifest


def _load_scene(config):
    from .scene import build_scene

    return build_scene(config.scene)


def _backend(config):
    from .guidance import make_backend

    kind = config.guidance["backend"]
    if kind == "mock_score":
        return make_backend(kind, bias=config.guidance["bias"])
    if kind == "external_stub":
        return make_backend(kind, options={"cfg_scale": config.guidance["cfg_scale"]})
    return make_backend(kind)


def _prompts(config):
    g = config.guidance
    return {"body": g["prompt_body"], "clothing": g["prompt_clothing"], "composite": g["prompt_composite"]}


def _require(path, stage):
    from .errors import MissingPrerequisiteError

    if path is None or not Path(path).exists():
        raise MissingPrerequisiteError(stage)


def _load_field(path, role):
    from .io import Checkpoint, field_from_checkpoint

    return field_from_checkpoint(Checkpoint.load(path), role)


def _save_outputs(out, result):
    from .train import write_log

    for role, ckpt in result.checkpoints.items():
        ckpt.save(out / f"{role}.ckpt")
    write_log(out / f"{result.stage}_log.csv", result.log)


# --------------------------------------------------------------------------
# commands


def cmd_gen_body(args, config, out):
    from .train import run_stage

    scene = _load_scene(config)
    result = run_stage(config.stages["body"], scene, {"prompts": _prompts(config)}, _backend(config))
    _save_outputs(out, result)
    print(f"body stage: {len(result.log)} iterations, checkpoint {out / 'body.ckpt'}")
    return {}


def cmd_gen_cloth(args, config, out):
    from .train import run_stage

    _require(args.body, "body")
    body = _load_field(args.body, BODY)
    scene = _load_scene(config)
    result = run_stage(config.stages["clothing"], scene, {"body": body, "prompts": _prompts(config)},
                       _backend(config))
    _save_outputs(out, result)
    start, end = result.metrics["overlap_mass"][0][1], result.metrics["overlap_mass"][-1][1]
    print(f"clothing stage: overlap mass {start:.4g} -> {end:.4g}")
    return {"body": args.body}


def _proxy(path, fallback):
    from .proxy import read_obj

    return fallback if path is None else read_obj(path)


def _matching(config, scene, cloth, target, one_sided):
    from .train import run_stage

    stage = config.stages["matching"].updated(one_sided=one_sided)
    inputs = {"body": scene.body, "clothing": cloth, "target_proxy": target}
    return run_stage(stage, scene, inputs)


def cmd_match(args, config, out):
    _require(args.body, "body")
    _require(args.cloth, "clothing")
    _load_field(args.body, BODY)
    cloth = _load_field(args.cloth, CLOTHING)
    scene = _load_scene(config)
    target = _proxy(args.target, None)
    result = _matching(config, scene, cloth, target, config.stages["matching"].one_sided)
    _save_outputs(out, result)
    start, end = result.metrics["uncovered_mass"]
    (out / "matching.json").write_text(json.dumps({"uncovered_mass": [start, end]}, indent=2) + "\n")
    print(f"matching: uncovered body mass {start:.4g} -> {end:.4g}")
    return {"body": args.body, "cloth": args.cloth, "target": args.target}


def _orbit(config, frames, resolution, elevation):
    from .render import orbit_camera

    spec = config.scene
    return [orbit_camera(360.0 * k / frames, elevation, spec.camera_radius, width=resolution,
                         height=resolution, fov_deg=spec.fov_deg) for k in range(frames)]


def cmd_render(args, config, out):
    from .io import Checkpoint, field_from_checkpoint, save_png
    from .render import SHLighting, render_image

    layers = []
    for path in args.ckpt:
        ckpt = Checkpoint.load(path)
        if ckpt.role not in (BODY, CLOTHING):
            raise CheckpointError(f"{path} holds a {ckpt.role!r} checkpoint, not a radiance-field layer")
        layers.append(field_from_checkpoint(ckpt))
    if sum(lay.role == BODY for lay in layers) > 1:
        raise CheckpointError("more than one body layer supplied")
    layers.sort(key=lambda lay: lay.layer_index)
    sh = None
    if args.sh is not None:
        sh = SHLighting(Checkpoint.load(args.sh, role="sh").params)
    for k, cam in enumerate(_orbit(config, args.frames, args.resolution, args.elevation)):
        if len(layers) == 1:
            image, _ = render_image(layers[0], cam, args.samples, sh=sh, bound=config.scene.bound)
        else:
            image, _ = render_image(layers, cam, args.samples, bound=config.scene.bound)
        save_png(out / f"frame_{k:03d}.png", image)
    print(f"rendered {args.frames} frames of {len(layers)} layer(s)")
    return {f"ckpt{i}": p for i, p in enumerate(args.ckpt)} | ({"sh": args.sh} if args.sh else {})


def cmd_transfer(args, config, out):
    from .io import save_png
    from .proxy import ProxyWarp, WarpedField, rasterize_silhouette, write_obj
    from .render import render_image
    from .train import transfer_report

    _require(args.cloth, "clothing")
    cloth = _load_field(args.cloth, CLOTHING)
    source = _proxy(args.source, None)
    target = _proxy(args.target, None)
    scene = dataclasses.replace(_load_scene(config), proxy=source)
    result = _matching(config, scene, cloth, target, config.transfer["one_sided"])
    _save_outputs(out, result)
    offsets = result.trained["offset_values"]
    problem = result.trained["problem"]
    report = transfer_report(problem, cloth, offsets, config.scene.bound)
    report["mean_offset"] = result.metrics["mean_offset"]
    report["uncovered_mass"] = list(result.metrics["uncovered_mass"])
    (out / "transfer.json").write_text(json.dumps(report, indent=2) + "\n")
    np.savetxt(out / "offsets.txt", offsets)
    deformed = source.with_vertices(source.vertices.copy())
    deformed.vertices[problem.index] += offsets
    write_obj(out / "cloth_proxy.obj", deformed)
    warped = WarpedField(cloth, ProxyWarp(problem.canonical, offsets))
    for k, cam in enumerate(_orbit(config, args.frames, args.resolution, 0.0)):
        color, alpha = render_image(warped, cam, args.samples, bound=config.scene.bound)
        body = rasterize_silhouette(target.vertices, target.faces, cam).image
        frame = color + (1.0 - alpha)[..., None] * 0.6 * body[..., None]
        save_png(out / f"frame_{k:03d}.png", frame)
    print(f"transfer: IoU {report['iou_unwarped']:.4f} -> {report['iou_warped']:.4f}, "
          f"mean offset {report['mean_offset']:.3g}")
    return {"cloth": args.cloth, "source": args.source, "target": args.target}


def cmd_make_scene(args, config, out):
    from .guidance import rasterize_skeleton_condition
    from .io import save_grid, save_png
    from .proxy import write_obj
    from .scene import render_reference

    scene = _load_scene(config)
    write_obj(out / "proxy.obj", scene.proxy)
    if args.target_scale is not None:
        scale = np.asarray(args.target_scale, dtype=np.float64)
        write_obj(out / "target.obj", scene.proxy.with_vertices(scene.proxy.vertices * scale))
    cams = _orbit(config, args.views, args.resolution, 0.0)
    for k, ref in enumerate(render_reference(scene, cams)):
        for name, image in ref.items():
            save_png(out / f"ref_{k:03d}_{name}.png", image)
            save_grid(out / f"ref_{k:03d}_{name}.fgrd", image)
    if scene.skeleton is not None:
        sk = scene.skeleton
        (out / "skeleton.json").write_text(json.dumps(
            {"names": sk.names, "joints": sk.joints.tolist(), "bones": sk.bones}, indent=2) + "\n")
        save_png(out / "condition_000.png", rasterize_skeleton_condition(sk.joints, sk.bones, cams[0]))
    print(f"scene {config.scene.kind}: disjoint={scene.disjoint}, {args.views} reference views")
    return {}


def cmd_verify(args, config, out):
    from .verify import run_suite

    report = run_suite(args.mutate, seed=config.run["seed"])
    (out / "verify.json").write_text(json.dumps(report, indent=2) + "\n")
    for check in report["checks"]:
        print(f"{'PASS' if check['passed'] else 'FAIL'} {check['id']}: {check['detail']}")
    if not report["passed"]:
        raise _VerifyFailed()
    return {}


class _VerifyFailed(Exception):
    pass


HANDLERS = {
    "gen-body": cmd_gen_body, "gen-cloth": cmd_gen_cloth, "match": cmd_match, "render": cmd_render,
    "transfer": cmd_transfer, "make-scene": cmd_make_scene, "verify": cmd_verify,
}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI run configuration")
    common.add_argument("--out", required=True, help="run directory for all outputs")
    common.add_argument("--seed", type=int, help="overrides run.seed")
    common.add_argument("--threads", type=int, help="cap on BLAS worker threads")
    common.add_argument("--deterministic", action="store_true", help="single worker, fixed reduction order")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="config override, repeatable")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="layervol", description="Layered radiance-field avatars at desk scale.")
    parser.add_argument("--version", action="version", version=f"layervol {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    sub.add_parser("gen-body", parents=[common], help="train the body layer")
    p = sub.add_parser("gen-cloth", parents=[common], help="train a clothing layer over the body")
    p.add_argument("--body", help="body checkpoint")
    p = sub.add_parser("match", parents=[common], help="fit proxy vertex offsets")
    p.add_argument("--body", help="body checkpoint")
    p.add_argument("--cloth", help="clothing checkpoint")
    p.add_argument("--target", help="target proxy OBJ (defaults to the scene proxy)")
    p = sub.add_parser("render", parents=[common], help="render a turntable of checkpoints")
    p.add_argument("--ckpt", action="append", required=True, help="layer checkpoint, repeatable")
    p.add_argument("--sh", help="SH lighting checkpoint")
    p.add_argument("--frames", type=int, default=8)
    p.add_argument("--resolution", type=int, default=64)
    p.add_argument("--elevation", type=float, default=0.0)
    p.add_argument("--samples", type=int, default=64)
    p = sub.add_parser("transfer", parents=[common], help="fit a clothing layer to another body proxy")
    p.add_argument("--cloth", required=True, help="clothing checkpoint")
    p.add_argument("--source", required=True, help="source proxy OBJ")
    p.add_argument("--target", required=True, help="target proxy OBJ")
    p.add_argument("--frames", type=int, default=4)
    p.add_argument("--resolution", type=int, default=64)
    p.add_argument("--samples", type=int, default=64)
    p = sub.add_parser("make-scene", parents=[common], help="write proxy, skeleton and reference renders")
    p.add_argument("--views", type=int, default=4)
    p.add_argument("--resolution", type=int, default=64)
    p.add_argument("--target-scale", type=float, nargs=3, metavar=("SX", "SY", "SZ"))
    p = sub.add_parser("verify", parents=[common], help="run the invariant suite")
    p.add_argument("--mutate", choices=["flip_transmittance"], help="inject a known compositing bug")
    rp = sub.add_parser("replay", help="re-run a manifest into a new run directory")
    rp.add_argument("manifest")
    rp.add_argument("--out", required=True)
    return parser


def _replay(args):
    manifest = json.loads(Path(args.manifest).read_text())
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg_path = out / "replay_config.ini"
    write_resolved(cfg_path, manifest["config"])
    argv, skip = [], False
    for tok in manifest["argv"]:
        if skip:
            skip = False
            continue
        if tok in ("--config", "--set", "--seed", "--threads"):
            skip = True
            continue
        if tok.startswith(("--config=", "--set=", "--seed=", "--threads=")):
            continue
        argv.append(tok)
    return main([*argv, "--config", str(cfg_path), "--out", str(out)])


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        if exc.code in (0, None):
            return EXIT_OK
        if isinstance(exc.code, str):
            print(exc.code, file=sys.stderr)
        return EXIT_USER
    if args.command == "replay":
        return _replay(args)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    overrides = list(args.set)
    if args.seed is not None:
        overrides.append(f"run.seed={args.seed}")
    if args.threads is not None:
        overrides.append(f"run.threads={args.threads}")
    if args.deterministic:
        overrides.append("run.deterministic=true")
    try:
        config = load_config(args.config, overrides)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        threads = 1 if config.run["deterministic"] else config.run["threads"]
        with threadpool_limits(limits=threads):
            inputs = HANDLERS[args.command](args, config, out)
        if args.config:
            inputs = {"config": args.config, **inputs}
        write_manifest(out, args.command, argv, config, inputs)
        return EXIT_OK
    except _VerifyFailed:
        print("verification failed", file=sys.stderr)
        return EXIT_INTERNAL
    except (ConfigError, CheckpointError, UsageError) as exc:
        print(f"layervol {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USER
    except Exception as exc:  # last-resort guard so scripted callers see exit 1
        log.exception("internal error")
        print(f"layervol {args.command}: internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
