"""Image-to-image fine-tuning pairs and the controller training set."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from . import render
from . import simworld as sw
from .camera import VIEW_ORDER, CameraRig
from .errors import EmptyDemo, IoFailure, MissingMask
from .kinematics import ArmModel

DATASET_FORMAT = "jointcanvas-dataset"
DATASET_VERSION = 1
MANIFEST = "manifest.jsonl"
RECORD_FIELDS = ("cond", "target", "prompt", "meta", "cond_sha256", "target_sha256", "version", "palette_hash", "rig_hash")


@dataclass(frozen=True, eq=False)
class TrainingPair:
    condition: render.TiledImage
    target: render.TiledImage
    prompt: str
    meta: dict
    mask: np.ndarray | None = None  # 512x512 sphere coverage of the target
    sphere_layer: render.TiledImage | None = None  # target spheres over black

    def __post_init__(self):
        if self.meta.get("K", 1) < 1:
            raise ValueError("K must be >= 1")


@dataclass(frozen=True)
class Violation:
    kind: str  # MissingManifest | BadSchema | MissingFile | BadDimensions | EmptyPrompt | HashMismatch
    path: str
    detail: str = ""


@dataclass(frozen=True, eq=False)
class Manifest:
    path: Path
    header: dict
    records: list


def rig_hash(rig: CameraRig) -> str:
    h = hashlib.sha256()
    for name in VIEW_ORDER:
        cam = rig[name]
        i = cam.intrinsics
        h.update(name.encode())
        h.update(np.round(cam.mount, 12).tobytes())
        h.update(np.array([i.fx, i.fy, i.cx, i.cy, i.width, i.height, cam.sphere_radius, cam.on_ee], float).tobytes())
    return h.hexdigest()[:16]


def _setup(arm, rig):
    if arm is None or rig is None:
        from .config import default_setup

        s = default_setup()
        arm, rig = arm or s.arm, rig or s.rig
    return arm, rig


def extract_pairs(
    demo: sw.DemoRecord,
    K: int = 20,
    stride: int = 1,
    arm: ArmModel | None = None,
    rig: CameraRig | None = None,
    palette: render.Palette = render.DEFAULT_PALETTE,
    episode: int = 0,
    stripes: bool = True,
) -> list[TrainingPair]:
    """Sliding-window pairs: observation at t, spheres at the configuration of min(t + K, T_final).

    The condition and target come from one render, so they are identical
    outside the sphere mask.
    """
    if K < 1 or stride < 1:
        raise ValueError("K and stride must be >= 1")
    if len(demo.steps) < 2:
        raise EmptyDemo(f"demo for {demo.task_name} seed {demo.seed} has {len(demo.steps)} steps")
    arm, rig = _setup(arm, rig)
    style = render.SceneStyle()
    last = len(demo.steps) - 1
    pairs = []
    for t in range(0, len(demo.steps), stride):
        st = demo.steps[t]
        k_target = min(t + K, last)
        target_cfg = demo.steps[k_target].config
        objects = sw.demo_objects(demo, t)
        _, layers = sw.render_views(arm, rig, st.config, objects, style, target_cfg, stripes, palette, demo.table_bounds)
        cond = render.tile([render.ViewImage(n, L.scene) for n, L in zip(VIEW_ORDER, layers)])
        tgt = render.tile([render.ViewImage(n, L.composite()) for n, L in zip(VIEW_ORDER, layers)])
        sph = render.tile([render.ViewImage(n, L.spheres) for n, L in zip(VIEW_ORDER, layers)])
        mask = render.tile_masks([L.mask for L in layers])
        actions = [demo.steps[min(t + k, last)].config.as_vector().tolist() for k in range(1, K + 1)]
        meta = {
            "episode": episode,
            "t": t,
            "t_target": k_target,
            "K": K,
            "task": demo.task_name,
            "seed": demo.seed,
            "q_t": st.config.as_vector().tolist(),
            "q_target": target_cfg.as_vector().tolist(),
            "actions": actions,
        }
        pairs.append(TrainingPair(cond, tgt, demo.goal_text, meta, mask, sph))
    return pairs


def make_controller_set(pairs: Sequence[TrainingPair], seed: int, palette: render.Palette = render.DEFAULT_PALETTE) -> list[TrainingPair]:
    """Replace each condition with the target spheres over a random background.

    The per-view background seed mixes ``seed`` with the pair's episode, t and
    view index. The K x 8 action labels stay in ``meta["actions"]``.
    """
    out = []
    for idx, p in enumerate(pairs):
        if p.mask is None or p.sphere_layer is None:
            raise MissingMask(f"pair {idx} carries no sphere mask")
        views = []
        for k, (layer, name) in enumerate(zip(render.untile(p.sphere_layer), VIEW_ORDER)):
            r, c = divmod(k, 2)
            m = p.mask[r * render.VIEW_SIZE : (r + 1) * render.VIEW_SIZE, c * render.VIEW_SIZE : (c + 1) * render.VIEW_SIZE]
            bg_seed = int(np.random.default_rng([seed, p.meta.get("episode", 0), p.meta.get("t", idx), idx, k]).integers(1 << 62))
            views.append(render.composite_random_background(render.ViewImage(name, layer.pixels, m), bg_seed, palette))
        meta = dict(p.meta, background_seed=seed)
        out.append(replace(p, condition=render.tile(views), meta=meta))
    return out


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_dataset(
    pairs: Sequence[TrainingPair],
    out_dir: str | Path,
    palette: render.Palette = render.DEFAULT_PALETTE,
    rig: CameraRig | None = None,
) -> Manifest:
    """PNGs ``{episode:04}_{t:06}_cond.png`` / ``_target.png`` plus ``manifest.jsonl``."""
    _, rig = _setup(None, rig)
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoFailure(f"cannot create {out}: {exc}") from None
    p_hash, r_hash = palette.digest(), rig_hash(rig)
    header = {"format": DATASET_FORMAT, "version": DATASET_VERSION, "count": len(pairs), "palette_hash": p_hash, "rig_hash": r_hash}
    records = []
    for p in pairs:
        stem = f"{p.meta['episode']:04d}_{p.meta['t']:06d}"
        cond, tgt = out / f"{stem}_cond.png", out / f"{stem}_target.png"
        render.write_png(cond, p.condition.pixels)
        render.write_png(tgt, p.target.pixels)
        meta = {k: v for k, v in p.meta.items()}
        records.append(
            {
                "cond": cond.name,
                "target": tgt.name,
                "prompt": p.prompt,
                "meta": meta,
                "cond_sha256": _sha256(cond),
                "target_sha256": _sha256(tgt),
                "version": DATASET_VERSION,
                "palette_hash": p_hash,
                "rig_hash": r_hash,
            }
        )
    lines = [json.dumps(header, sort_keys=True)] + [json.dumps(r, sort_keys=True) for r in records]
    path = out / MANIFEST
    try:
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from None
    return Manifest(path, header, records)


def read_manifest(path: str | Path) -> Manifest:
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST
    lines = path.read_text(encoding="utf-8").splitlines()
    return Manifest(path, json.loads(lines[0]), [json.loads(x) for x in lines[1:] if x.strip()])


def validate_manifest(directory: str | Path, palette_hash: str | None = None, rig_hash_value: str | None = None) -> list[Violation]:
    """Schema, file, dimension, prompt and hash checks; violations are returned, not raised."""
    d = Path(directory)
    path = d / MANIFEST
    if not path.is_file():
        return [Violation("MissingManifest", str(path))]
    out: list[Violation] = []
    try:
        man = read_manifest(path)
    except (ValueError, IndexError) as exc:
        return [Violation("BadSchema", str(path), f"unparseable manifest: {exc}")]
    h = man.header
    if h.get("format") != DATASET_FORMAT or h.get("version") != DATASET_VERSION:
        out.append(Violation("BadSchema", str(path), "header format/version"))
    if h.get("count") != len(man.records):
        out.append(Violation("BadSchema", str(path), f"header count {h.get('count')} != {len(man.records)} records"))
    for i, rec in enumerate(man.records):
        where = f"{path}:{i + 2}"
        missing = [k for k in RECORD_FIELDS if k not in rec]
        if missing:
            out.append(Violation("BadSchema", where, f"missing fields {missing}"))
            continue
        if not isinstance(rec["prompt"], str) or not rec["prompt"].strip():
            out.append(Violation("EmptyPrompt", where))
        for want, have, label in ((palette_hash, rec["palette_hash"], "palette"), (rig_hash_value, rec["rig_hash"], "rig")):
            if want is not None and want != have:
                out.append(Violation("HashMismatch", where, f"{label} hash {have} != {want}"))
        if rec["palette_hash"] != h.get("palette_hash") or rec["rig_hash"] != h.get("rig_hash"):
            out.append(Violation("HashMismatch", where, "record hashes differ from header"))
        for key in ("cond", "target"):
            f = d / rec[key]
            if not f.is_file():
                out.append(Violation("MissingFile", str(f)))
                continue
            try:
                with Image.open(f) as im:
                    im.load()
                    size, mode = im.size, im.mode
            except (OSError, SyntaxError) as exc:
                out.append(Violation("BadDimensions", str(f), f"unreadable image: {exc}"))
                continue
            if size != (render.TILE_SIZE, render.TILE_SIZE) or mode != "RGB":
                out.append(Violation("BadDimensions", str(f), f"{size[0]}x{size[1]} {mode}"))
                continue
            if _sha256(f) != rec[f"{key}_sha256"]:
                out.append(Violation("HashMismatch", str(f), "file content hash"))
    return out
