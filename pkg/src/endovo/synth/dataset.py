"""On-disk dataset format.

::

    root/manifest.json            version, scene, SfS settings, channel means,
                                  trajectory list with split tags
    root/<traj>/manifest.json     per-trajectory manifest (same means)
    root/<traj>/frames/NNNNNN.png 8-bit RGB
    root/<traj>/depth/NNNNNN.f32  SfS depth, little-endian float32, row-major
    root/<traj>/poses.csv         timestamp,tx,ty,tz,qw,qx,qy,qz (camera-to-world)

Channel means are taken over the stacked pairs of the train split only:
channels 0-3 are R, G, B, D of the earlier frame, 4-7 of the later one.
"""
import csv
import json
import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from endovo.errors import ConfigurationError, ValidationError
from endovo.sfs import SfSConfig, image_depth
from endovo.synth.scene import SceneConfig, TubeScene, render_frame
from endovo.synth.trajectory import TrajectorySpec, generate_trajectory, relative_motions

VERSION = 1
SPLITS = ("train", "val", "test")
POSE_HEADER = ["timestamp", "tx", "ty", "tz", "qw", "qx", "qy", "qz"]
FRAME_RATE = 10.0


def _fmt(v):
    return repr(float(v))


def write_poses_csv(path, timestamps, positions, quats):
    rows = [POSE_HEADER]
    for t, p, q in zip(timestamps, positions, quats):
        rows.append([_fmt(t)] + [_fmt(v) for v in p] + [_fmt(v) for v in q])
    try:
        with open(path, "w", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerows(rows)
    except OSError as exc:
        raise OSError(f"cannot write poses {path}: {exc}") from exc


def read_poses_csv(path):
    """Return ``(timestamps[F], positions[F,3], quats[F,4])``."""
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise OSError(f"cannot read poses {path}: {exc}") from exc
    if not rows or rows[0] != POSE_HEADER:
        raise ValidationError(f"{path}: expected header {','.join(POSE_HEADER)}")
    try:
        data = np.array([[float(v) for v in r] for r in rows[1:]], dtype=float).reshape(-1, 8)
    except ValueError as exc:
        raise ValidationError(f"{path}: {exc}") from None
    return data[:, 0], data[:, 1:4], data[:, 4:8]


def write_png(path, image):
    """Quantise a ``[3,H,W]`` image in [0, 1] to 8-bit RGB."""
    arr = np.clip(np.rint(np.asarray(image).transpose(1, 2, 0) * 255.0), 0, 255).astype(np.uint8)
    try:
        Image.fromarray(arr, mode="RGB").save(path, format="PNG")
    except OSError as exc:
        raise OSError(f"cannot write frame {path}: {exc}") from exc


def read_png(path):
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    except OSError as exc:
        raise OSError(f"cannot read frame {path}: {exc}") from exc
    return arr.transpose(2, 0, 1) / 255.0


def write_f32(path, depth):
    try:
        np.asarray(depth, dtype="<f4").tofile(path)
    except OSError as exc:
        raise OSError(f"cannot write depth {path}: {exc}") from exc


def read_f32(path, shape):
    try:
        data = np.fromfile(path, dtype="<f4")
    except OSError as exc:
        raise OSError(f"cannot read depth {path}: {exc}") from exc
    if data.size != shape[0] * shape[1]:
        raise ValidationError(f"{path}: {data.size} values, expected {shape[0]}x{shape[1]}")
    return data.reshape(shape)


def _write_json(path, obj):
    try:
        with open(path, "w") as fh:
            json.dump(obj, fh, indent=1, sort_keys=True)
            fh.write("\n")
    except OSError as exc:
        raise OSError(f"cannot write manifest {path}: {exc}") from exc


def _read_json(path):
    try:
        with open(path) as fh:
            return json.load(fh)
    except OSError as exc:
        raise OSError(f"cannot read manifest {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: {exc}") from None


@dataclass
class TrajectoryRecord:
    name: str
    split: str
    frames: list
    depth: list
    poses: str = "poses.csv"
    spec: dict = field(default_factory=dict)


@dataclass
class DatasetManifest:
    root: str
    version: int
    height: int
    width: int
    channel_means: np.ndarray
    scene: dict
    sfs: dict
    trajectories: list

    def split(self, tag):
        return [t for t in self.trajectories if t.split == tag]


def split_counts(n, ratios):
    """Largest-remainder allocation of ``n`` trajectories to (train, val, test)."""
    r = np.asarray(ratios, dtype=float)
    if r.shape != (3,) or np.any(r < 0) or r.sum() <= 0:
        raise ConfigurationError(f"split ratios must be three non-negative numbers, got {ratios}")
    raw = n * r / r.sum()
    counts = np.floor(raw).astype(int)
    for i in np.argsort(-(raw - counts), kind="stable")[: n - counts.sum()]:
        counts[i] += 1
    return [int(c) for c in counts]


def _pair_means(rgbs, depths):
    """Sums and count over stacked consecutive pairs of one trajectory."""
    chan = np.concatenate([rgbs, depths[:, None]], axis=1)   # [F,4,H,W]
    per_frame = chan.sum(axis=(2, 3))                        # [F,4]
    sums = np.concatenate([per_frame[:-1].sum(axis=0), per_frame[1:].sum(axis=0)])
    return sums, (len(chan) - 1) * chan.shape[2] * chan.shape[3]


def compute_channel_means(trajectories):
    """Means over pairs of ``[(rgb[F,3,H,W], depth[F,H,W]), ...]``."""
    total = np.zeros(8)
    count = 0
    for rgbs, depths in trajectories:
        s, c = _pair_means(np.asarray(rgbs, dtype=float), np.asarray(depths, dtype=float))
        total += s
        count += c
    if count == 0:
        raise ConfigurationError("no training pairs to compute channel means from")
    return total / count


def build_dataset(scene_cfg: SceneConfig, specs, split_ratios, out_dir, sfs_cfg=None, log=None):
    """Render trajectories, run SfS on every frame and write the dataset.

    Trajectories are assigned to splits in order: the first ``n_train``
    specs go to train, then val, then test.
    """
    sfs_cfg = sfs_cfg or SfSConfig()
    counts = split_counts(len(specs), split_ratios)
    tags = [tag for tag, c in zip(SPLITS, counts) for _ in range(c)]
    if counts[0] == 0:
        raise ConfigurationError("split ratios leave the train split empty")
    scene = TubeScene(scene_cfg)
    try:
        os.makedirs(out_dir, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create dataset directory {out_dir}: {exc}") from exc
    records = []
    train_stats = []
    for idx, (spec, tag) in enumerate(zip(specs, tags)):
        name = f"traj_{idx:03d}"
        tdir = os.path.join(out_dir, name)
        for sub in ("frames", "depth"):
            os.makedirs(os.path.join(tdir, sub), exist_ok=True)
        pos, quats = generate_trajectory(spec, scene_cfg.min_radius)
        frames, depths = [], []
        rgbs, ds = [], []
        for k, (p, q) in enumerate(zip(pos, quats)):
            image, _ = render_frame(p, q, scene)
            fpath = os.path.join("frames", f"{k:06d}.png")
            dpath = os.path.join("depth", f"{k:06d}.f32")
            write_png(os.path.join(tdir, fpath), image)
            # SfS runs on the quantised frame the network will see
            rgb = read_png(os.path.join(tdir, fpath))
            depth = image_depth(rgb, sfs_cfg).astype(np.float32)
            write_f32(os.path.join(tdir, dpath), depth)
            frames.append(fpath)
            depths.append(dpath)
            if tag == "train":
                rgbs.append(rgb)
                ds.append(depth.astype(float))
        write_poses_csv(os.path.join(tdir, "poses.csv"), np.arange(len(pos)) / FRAME_RATE, pos, quats)
        if tag == "train":
            train_stats.append((np.stack(rgbs), np.stack(ds)))
        records.append(TrajectoryRecord(name, tag, frames, depths, "poses.csv", spec.to_dict()))
        if log:
            log("generate", trajectory=name, split=tag, frames=len(pos))
    means = compute_channel_means(train_stats)
    manifest = DatasetManifest(out_dir, VERSION, scene_cfg.height, scene_cfg.width, means,
                               scene_cfg.to_dict(), dict(vars(sfs_cfg)), records)
    write_manifest(manifest)
    return manifest


def _root_dict(m: DatasetManifest):
    return {
        "version": m.version,
        "height": m.height,
        "width": m.width,
        "channel_means": [float(v) for v in m.channel_means],
        "scene": m.scene,
        "sfs": {k: list(v) if isinstance(v, tuple) else v for k, v in m.sfs.items()},
        "trajectories": [{"name": t.name, "split": t.split, "frames": len(t.frames)} for t in m.trajectories],
    }


def write_manifest(m: DatasetManifest):
    root = _root_dict(m)
    _write_json(os.path.join(m.root, "manifest.json"), root)
    for t in m.trajectories:
        _write_json(os.path.join(m.root, t.name, "manifest.json"), {
            "version": m.version,
            "name": t.name,
            "split": t.split,
            "height": m.height,
            "width": m.width,
            "channel_means": root["channel_means"],
            "frames": t.frames,
            "depth": t.depth,
            "poses": t.poses,
            "trajectory_spec": t.spec,
            "scene": m.scene,
        })


def load_manifest(root):
    top = _read_json(os.path.join(root, "manifest.json"))
    if top.get("version") != VERSION:
        raise ValidationError(f"{root}: unsupported dataset version {top.get('version')}")
    records = []
    for entry in top["trajectories"]:
        t = _read_json(os.path.join(root, entry["name"], "manifest.json"))
        if t["split"] not in SPLITS:
            raise ValidationError(f"{entry['name']}: unknown split {t['split']!r}")
        if len(t["frames"]) != len(t["depth"]):
            raise ValidationError(f"{entry['name']}: frame and depth counts differ")
        records.append(TrajectoryRecord(t["name"], t["split"], t["frames"], t["depth"], t["poses"],
                                        t.get("trajectory_spec", {})))
    means = np.array(top["channel_means"], dtype=float)
    if means.shape != (8,) or not np.all(np.isfinite(means)):
        raise ValidationError(f"{root}: channel_means must be 8 finite values")
    return DatasetManifest(root, top["version"], top["height"], top["width"], means,
                           top["scene"], top["sfs"], records)


@dataclass
class TrajectoryData:
    name: str
    split: str
    timestamps: np.ndarray
    positions: np.ndarray
    quats: np.ndarray
    rgb: np.ndarray       # [F,3,H,W]
    depth: np.ndarray     # [F,H,W]

    @property
    def relative(self):
        return relative_motions(self.positions, self.quats)

    def pairs(self, channel_means, dtype=np.float32):
        """Mean-subtracted stacked pairs ``[F-1, 8, H, W]``."""
        chan = np.concatenate([self.rgb, self.depth[:, None]], axis=1)
        out = np.concatenate([chan[:-1], chan[1:]], axis=1).astype(dtype)
        out -= np.asarray(channel_means, dtype=dtype)[None, :, None, None]
        return out


def load_trajectory(manifest: DatasetManifest, record: TrajectoryRecord, depth_source="stored", sfs_cfg=None):
    """Read frames, depth and poses of one trajectory.

    ``depth_source='sfs'`` recomputes depth from the frames instead of
    reading the stored sidecars.
    """
    tdir = os.path.join(manifest.root, record.name)
    ts, pos, quats = read_poses_csv(os.path.join(tdir, record.poses))
    if len(ts) != len(record.frames):
        raise ValidationError(f"{record.name}: {len(record.frames)} frames but {len(ts)} poses")
    rgb = np.stack([read_png(os.path.join(tdir, f)) for f in record.frames])
    shape = (manifest.height, manifest.width)
    if rgb.shape[2:] != shape:
        raise ValidationError(f"{record.name}: frame size {rgb.shape[2:]} != manifest {shape}")
    if depth_source == "stored":
        depth = np.stack([read_f32(os.path.join(tdir, d), shape) for d in record.depth])
    elif depth_source == "sfs":
        cfg = sfs_cfg or SfSConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in manifest.sfs.items()})
        depth = np.stack([image_depth(im, cfg).astype(np.float32) for im in rgb])
    else:
        raise ConfigurationError(f"depth_source must be 'stored' or 'sfs', got {depth_source!r}")
    return TrajectoryData(record.name, record.split, ts, pos, quats, rgb, depth)


def load_split(manifest, tag, **kw):
    return [load_trajectory(manifest, r, **kw) for r in manifest.split(tag)]
