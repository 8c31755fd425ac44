"""On-disk dataset layout.

::

    rgb/NNNNNN.png      8-bit RGB
    depth/NNNNNN.png    16-bit grayscale, millimetres, 0 = invalid
    prior/NNNNNN.png    optional monocular depth prior, same encoding
    sparse/NNNNNN.png   optional sparse metric depth, same encoding
    flow/IIIIII_JJJJJJ.flw   FLW1 flow from frame I to frame J
    poses.txt           "id tx ty tz qx qy qz qw" per line, camera-to-world
    intrinsics.txt      "fx fy cx cy width height"

Every file is optional; a missing file leaves the matching ``Frame`` field
empty.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image

from .correspondence import FlowField, read_flow, write_flow
from .geometry import ColorImage, DepthImage, Frame, Intrinsics, Pose


def frame_name(i: int) -> str:
    return f"{i:06d}"


def write_depth_png(path, depth: np.ndarray) -> None:
    mm = np.where(np.isfinite(depth) & (depth > 0), np.round(depth * 1000.0), 0)
    Image.fromarray(np.clip(mm, 0, 65535).astype(np.uint16)).save(path)


def read_depth_png(path) -> DepthImage:
    mm = np.asarray(Image.open(path)).astype(float)
    return DepthImage.from_array(mm / 1000.0)


def write_rgb_png(path, color: np.ndarray) -> None:
    Image.fromarray(np.clip(np.round(color * 255.0), 0, 255).astype(np.uint8)).save(path)


def read_rgb_png(path) -> ColorImage:
    img = Image.open(path).convert("RGB")
    return ColorImage(np.asarray(img).astype(float) / 255.0)


def write_gray_png(path, values: np.ndarray) -> None:
    Image.fromarray(np.clip(np.round(values * 255.0), 0, 255).astype(np.uint8)).save(path)


def format_pose_line(i: int, pose: Pose) -> str:
    t, q = pose.translation, pose.quat
    vals = " ".join(f"{x:.9f}" for x in (*t, *q))
    return f"{i} {vals}"


def write_poses(path, poses: dict) -> None:
    with open(path, "w") as f:
        for i in sorted(poses):
            f.write(format_pose_line(i, poses[i]) + "\n")


def read_poses(path) -> dict:
    poses = {}
    for line in Path(path).read_text().splitlines():
        parts = line.split()
        if not parts or parts[0].startswith("#"):
            continue
        vals = [float(x) for x in parts[1:8]]
        poses[int(parts[0])] = Pose(vals[3:7], vals[0:3])
    return poses


def write_intrinsics(path, k: Intrinsics) -> None:
    Path(path).write_text(f"{k.fx:.9f} {k.fy:.9f} {k.cx:.9f} {k.cy:.9f} {k.width} {k.height}\n")


def read_intrinsics(path) -> Intrinsics:
    v = Path(path).read_text().split()
    return Intrinsics(float(v[0]), float(v[1]), float(v[2]), float(v[3]), int(v[4]), int(v[5]))


@dataclass
class Dataset:
    root: Path
    ids: list
    intrinsics: Optional[Intrinsics] = None
    poses: dict = field(default_factory=dict)

    @classmethod
    def open(cls, root) -> "Dataset":
        root = Path(root)
        if not root.is_dir():
            raise FileNotFoundError(f"dataset directory {root} not found")
        ids = set()
        for sub in ("rgb", "depth"):
            d = root / sub
            if d.is_dir():
                ids.update(int(p.stem) for p in d.glob("*.png") if p.stem.isdigit())
        poses = read_poses(root / "poses.txt") if (root / "poses.txt").exists() else {}
        ids.update(poses)
        k = read_intrinsics(root / "intrinsics.txt") if (root / "intrinsics.txt").exists() else None
        return cls(root, sorted(ids), k, poses)

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def has_rgb(self) -> bool:
        return (self.root / "rgb").is_dir() and any((self.root / "rgb").glob("*.png"))

    @property
    def has_depth(self) -> bool:
        return (self.root / "depth").is_dir() and any((self.root / "depth").glob("*.png"))

    @property
    def has_prior(self) -> bool:
        return (self.root / "prior").is_dir() and any((self.root / "prior").glob("*.png"))

    @property
    def has_sparse(self) -> bool:
        return (self.root / "sparse").is_dir() and any((self.root / "sparse").glob("*.png"))

    def image_size(self) -> Optional[tuple]:
        """``(width, height)`` of the first stored image."""
        for sub in ("rgb", "depth", "sparse"):
            for p in sorted((self.root / sub).glob("*.png")) if (self.root / sub).is_dir() else []:
                with Image.open(p) as im:
                    return im.size
        return None

    def color(self, i: int) -> Optional[ColorImage]:
        p = self.root / "rgb" / f"{frame_name(i)}.png"
        return read_rgb_png(p) if p.exists() else None

    def depth(self, i: int) -> Optional[DepthImage]:
        p = self.root / "depth" / f"{frame_name(i)}.png"
        return read_depth_png(p) if p.exists() else None

    def prior(self, i: int) -> Optional[DepthImage]:
        p = self.root / "prior" / f"{frame_name(i)}.png"
        return read_depth_png(p) if p.exists() else None

    def sparse(self, i: int) -> Optional[DepthImage]:
        p = self.root / "sparse" / f"{frame_name(i)}.png"
        return read_depth_png(p) if p.exists() else None

    def flow(self, i: int, j: int) -> Optional[FlowField]:
        p = self.root / "flow" / f"{frame_name(i)}_{frame_name(j)}.flw"
        return read_flow(p) if p.exists() else None

    def frame(self, i: int, *, rgb=True, depth=True, pose=True, intrinsics=True) -> Frame:
        return Frame(
            i,
            self.color(i) if rgb else None,
            self.depth(i) if depth else None,
            self.poses.get(i) if pose else None,
            self.intrinsics if intrinsics else None,
        )


def write_frame(root, frame: Frame) -> None:
    root = Path(root)
    name = frame_name(frame.id)
    if frame.color is not None:
        (root / "rgb").mkdir(parents=True, exist_ok=True)
        write_rgb_png(root / "rgb" / f"{name}.png", frame.color.values)
    if frame.depth is not None:
        (root / "depth").mkdir(parents=True, exist_ok=True)
        write_depth_png(root / "depth" / f"{name}.png", frame.depth.values)


def write_flow_file(root, i: int, j: int, flow: FlowField) -> None:
    d = Path(root) / "flow"
    d.mkdir(parents=True, exist_ok=True)
    write_flow(d / f"{frame_name(i)}_{frame_name(j)}.flw", flow)
