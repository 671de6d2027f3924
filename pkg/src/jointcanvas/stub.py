"""Reference responder for the external drawer exchange directory.

    python -m jointcanvas.stub --dir EXCHANGE --mode copy|oracle

``copy`` answers every condition image with itself. ``oracle`` rebuilds the
world from ``{seq}_state.json`` and renders the oracle target. The responder
exits when a file named ``STOP`` appears or after ``--idle`` seconds
without new requests.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

from . import render


def _respond(d: Path, stem: str, mode: str) -> None:
    cond = d / f"{stem}_cond.png"
    if mode == "copy":
        px = render.read_png(cond)
    else:
        from . import agent
        from . import simworld as sw
        from .config import default_setup

        state = json.loads((d / f"{stem}_state.json").read_text())
        style = None
        pert = state.get("perturbation")
        if pert:
            from .evalcli import perturbed_style

            style = perturbed_style(state["task"], state["seed"], pert)
        setup = default_setup()
        world = agent.restore_world(state, setup.arm, style)
        target = sw.target_at_horizon(world, int(state.get("K", 20)))
        px = agent.oracle_draw(world, target, setup.rig, stripes=bool(state.get("stripes", True))).tiled.pixels
    tmp = d / f"{stem}_target.png.part"
    render.write_png(tmp, px)
    os.replace(tmp, d / f"{stem}_target.png")


def serve(directory: str | Path, mode: str = "copy", idle: float = 60.0, poll: float = 0.01) -> int:
    d = Path(directory)
    last = time.monotonic()
    served = 0
    while True:
        if (d / "STOP").exists():
            return served
        pending = sorted(
            p.name[: -len("_cond.png")] for p in d.glob("*_cond.png") if not (d / p.name.replace("_cond.png", "_target.png")).exists()
        )
        if mode == "oracle":
            pending = [s for s in pending if (d / f"{s}_state.json").exists()]
        for stem in pending:
            _respond(d, stem, mode)
            served += 1
            last = time.monotonic()
        if not pending:
            if time.monotonic() - last > idle:
                return served
            time.sleep(poll)


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="jointcanvas.stub", description=__doc__.splitlines()[0])
    ap.add_argument("--dir", required=True)
    ap.add_argument("--mode", choices=("copy", "oracle"), default="copy")
    ap.add_argument("--idle", type=float, default=60.0, help="exit after this many idle seconds")
    args = ap.parse_args(argv)
    serve(args.dir, args.mode, args.idle)
    return 0


if __name__ == "__main__":
    sys.exit(main())
