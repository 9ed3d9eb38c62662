"""Synthetic paired edge-to-image dataset of anti-aliased shapes.

Targets are random compositions of 1-3 filled ellipses/polygons over a
linearly shaded background, rendered at 4x resolution and box-downsampled
for anti-aliasing.  Inputs are Sobel-magnitude edge maps of the target,
thresholded and replicated to three channels.  Everything is a pure
function of the generation seed; splits are stored as packed little-endian
float32 arrays ([N, C, H, W], row-major) with sha256 checksums in the
manifest so loads are bit-exact and verifiable.
"""

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from scipy import ndimage

from .determinism import derive_seed, numpy_generator
from .errors import ConfigError, DataIntegrityError
from .images import validate_image_batch

FORMAT_VERSION = 1
EDGE_THRESHOLD = 0.25
SUPERSAMPLE = 4


@dataclass(frozen=True)
class DatasetSpec:
    name: str = "shapes32"
    image_size: int = 32
    channels: int = 3
    num_train: int = 2000
    num_val: int = 256
    seed: int = 0

    def validate(self) -> "DatasetSpec":
        if self.image_size not in (32, 64):
            raise ConfigError(f"data.image_size must be 32 or 64, got {self.image_size}")
        if self.channels != 3:
            raise ConfigError(f"shapes dataset is 3-channel, got {self.channels}")
        if self.num_train < 1 or self.num_val < 1:
            raise ConfigError("data.num_train and data.num_val must be >= 1")
        return self


def _render_target(rng: np.random.Generator, size: int) -> np.ndarray:
    """One [3, H, W] image in [-1, 1]: shaded background plus filled shapes."""
    hi = size * SUPERSAMPLE
    yy, xx = np.mgrid[0:hi, 0:hi].astype(np.float64) / hi
    c0 = rng.uniform(0.05, 0.5, size=3)
    c1 = rng.uniform(0.3, 0.95, size=3)
    direction = rng.uniform(-1.0, 1.0, size=2)
    lo = min(direction[0], 0.0) + min(direction[1], 0.0)
    ramp = (direction[0] * xx + direction[1] * yy - lo) / (
        abs(direction[0]) + abs(direction[1]) + 1e-9
    )
    img = c0[:, None, None] + (c1 - c0)[:, None, None] * ramp[None]

    for _ in range(rng.integers(1, 4)):
        color = rng.uniform(0.0, 1.0, size=3)
        cx, cy = rng.uniform(0.2, 0.8, size=2) * hi
        if rng.random() < 0.5:
            rx, ry = rng.uniform(0.08, 0.3, size=2) * hi
            theta = rng.uniform(0.0, np.pi)
            ct, st = np.cos(theta), np.sin(theta)
            u = (xx * hi - cx) * ct + (yy * hi - cy) * st
            v = -(xx * hi - cx) * st + (yy * hi - cy) * ct
            inside = (u / rx) ** 2 + (v / ry) ** 2 <= 1.0
        else:
            n_vert = rng.integers(3, 6)
            angles = np.sort(rng.uniform(0.0, 2 * np.pi, size=n_vert))
            radius = rng.uniform(0.1, 0.3) * hi
            px = cx + radius * np.cos(angles)
            py = cy + radius * np.sin(angles)
            inside = np.zeros((hi, hi), dtype=bool)
            # even-odd rule against each polygon edge
            j = n_vert - 1
            gx = xx * hi
            gy = yy * hi
            for i in range(n_vert):
                cond = (py[i] > gy) != (py[j] > gy)
                slope = (px[j] - px[i]) / (py[j] - py[i] + 1e-12)
                inside ^= cond & (gx < px[i] + slope * (gy - py[i]))
                j = i
        img = np.where(inside[None], color[:, None, None], img)

    # box-filter downsample for anti-aliasing
    img = img.reshape(3, size, SUPERSAMPLE, size, SUPERSAMPLE).mean(axis=(2, 4))
    return (img * 2.0 - 1.0).astype(np.float32)


def edge_map(target: np.ndarray) -> np.ndarray:
    """[3, H, W] thresholded Sobel-magnitude edges of a [-1, 1] target."""
    gray = target.astype(np.float64).mean(axis=0)
    gx = ndimage.sobel(gray, axis=1)
    gy = ndimage.sobel(gray, axis=0)
    mag = np.hypot(gx, gy)
    peak = mag.max()
    if peak > 0:
        mag = mag / peak
    edges = (mag > EDGE_THRESHOLD).astype(np.float32)
    edges = edges * 2.0 - 1.0
    return np.repeat(edges[None], 3, axis=0)


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def generate_shapes_dataset(spec: DatasetSpec, out_dir) -> Path:
    """Render both splits to <out_dir>/{split}_{x,y}.f32 plus manifest.json."""
    spec.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "name": spec.name,
        "format_version": FORMAT_VERSION,
        "image_size": spec.image_size,
        "channels": spec.channels,
        "num_train": spec.num_train,
        "num_val": spec.num_val,
        "seed": spec.seed,
        "splits": {},
    }
    for split, count in (("train", spec.num_train), ("val", spec.num_val)):
        rng = numpy_generator(spec.seed, f"shapes/{split}")
        xs = np.empty((count, 3, spec.image_size, spec.image_size), dtype=np.float32)
        ys = np.empty_like(xs)
        for i in range(count):
            y = _render_target(rng, spec.image_size)
            ys[i] = y
            xs[i] = edge_map(y)
        x_path = out / f"{split}_x.f32"
        y_path = out / f"{split}_y.f32"
        x_path.write_bytes(xs.astype("<f4").tobytes())
        y_path.write_bytes(ys.astype("<f4").tobytes())
        manifest["splits"][split] = {
            "count": count,
            "x": x_path.name,
            "y": y_path.name,
            "sha256_x": _sha256(x_path),
            "sha256_y": _sha256(y_path),
        }
    manifest_path = out / "manifest.json"
    manifest_path.write_text(json.dumps(manifest, indent=2) + "\n")
    return manifest_path


def load_manifest(root) -> dict:
    path = Path(root) / "manifest.json"
    if not path.exists():
        raise DataIntegrityError(f"no manifest.json under {root}")
    manifest = json.loads(path.read_text())
    if manifest.get("format_version") != FORMAT_VERSION:
        raise DataIntegrityError(
            f"unsupported dataset format version {manifest.get('format_version')}"
        )
    manifest["_root"] = str(Path(root))
    return manifest


def load_split(manifest: dict, split: str) -> tuple:
    """Return (x, y) float32 torch tensors after checksum verification."""
    if split not in manifest["splits"]:
        raise ConfigError(f"dataset has no split {split!r}")
    info = manifest["splits"][split]
    root = Path(manifest["_root"])
    shape = (info["count"], manifest["channels"], manifest["image_size"], manifest["image_size"])
    out = []
    for key, checksum_key in (("x", "sha256_x"), ("y", "sha256_y")):
        path = root / info[key]
        if not path.exists():
            raise DataIntegrityError(f"missing dataset file {path}")
        if _sha256(path) != info[checksum_key]:
            raise DataIntegrityError(f"checksum mismatch for {path}")
        arr = np.frombuffer(path.read_bytes(), dtype="<f4").reshape(shape)
        out.append(validate_image_batch(torch.from_numpy(arr.copy()), name=str(path.name)))
    return out[0], out[1]


def epoch_permutation(n: int, seed: int, epoch: int) -> torch.Tensor:
    """Stateless per-epoch shuffle: a pure function of (seed, epoch)."""
    gen = torch.Generator()
    gen.manual_seed(derive_seed(seed, f"epoch/{epoch}"))
    return torch.randperm(n, generator=gen)


def load_batches(manifest: dict, split: str, batch_size: int, seed: int, epochs: int = 1):
    """Yield (x, y) batches; train split reshuffles per epoch, val split is
    sequential; a final partial batch is dropped."""
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
    x, y = load_split(manifest, split)
    n = x.shape[0]
    for epoch in range(epochs):
        if split == "val":
            order = torch.arange(n)
        else:
            order = epoch_permutation(n, seed, epoch)
        for start in range(0, n - batch_size + 1, batch_size):
            idx = order[start : start + batch_size]
            yield x[idx], y[idx]
