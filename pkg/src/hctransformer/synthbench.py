"""Two-domain feature-level benchmark with planted human masks and a flipping scene shortcut.

Every video draws from its own Philox stream keyed by ``(seed, domain, index)``,
so output is independent of generation order.

Feature layout (a seeded orthonormal basis of R^D is split into blocks):

* human positions carry a rotating vector in a class-specific plane,
  ``cos(theta_c t) u_c + sin(theta_c t) v_c`` with ``theta_c = 2 pi k_c / M``;
  its average over the M clips is exactly zero, so only order-aware temporal
  modeling recovers the class;
* context positions carry ``f * tool_c + (1 - f) * scene_s``, where the tool
  direction follows the action in both domains and the scene type ``s`` is
  tied to the action with probability rho (identity map in the source,
  cyclic derangement in the target) and uniform otherwise.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .config import ConfigError

MAGIC = b"HCTBENCH"
VERSION = 1
_HEADER = struct.Struct("<8sIIIIIIIi")
DOMAINS = ("source", "target")


@dataclass
class BenchSpec:
    n_cls: int = 6
    M: int = 5
    H: int = 4
    W: int = 4
    D: int = 32
    n_source: int = 600
    n_target: int = 600
    human_region: list[int] = field(default_factory=lambda: [2, 2])
    sigma: float = 0.3
    rho_source: float = 1.0
    rho_target: float = 0.0
    shared_context_fraction: float = 0.4
    human_amplitude: float = 1.0
    context_amplitude: float = 1.0
    # share of each target scene vector drawn from target-only directions
    scene_appearance_shift: float = 0.0
    seed: int = 0

    def validate(self) -> None:
        rh, rw = self.human_region
        if not (1 <= rh <= self.H and 1 <= rw <= self.W):
            raise ConfigError(f"bench.human_region {self.human_region} does not fit in {self.H}x{self.W}")
        for name in ("rho_source", "rho_target", "shared_context_fraction", "scene_appearance_shift"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"bench.{name} must lie in [0, 1]")
        if self.n_cls < 2 or self.M < 2:
            raise ConfigError("bench.n_cls and bench.M must be at least 2")
        blocks = 5 if self.scene_appearance_shift > 0 else 4
        if blocks * self.n_cls > self.D:
            raise ConfigError(f"bench.D={self.D} too small for {self.n_cls} classes (needs {blocks}*n_cls)")
        if self.sigma < 0 or self.n_source < 1 or self.n_target < 1:
            raise ConfigError("bench.sigma must be nonnegative and split sizes positive")
        if not 0 <= self.seed < 2 ** 63:
            raise ConfigError("bench.seed must be a nonnegative 63-bit integer")


@dataclass
class VideoRecord:
    clips: np.ndarray  # (M, H, W, D)
    mask: np.ndarray  # (M, H, W)
    label: int  # -1 when withheld
    domain: int  # 0 source, 1 target


@dataclass
class Split:
    features: np.ndarray  # (n, M, H, W, D)
    masks: np.ndarray  # (n, M, H, W)
    labels: np.ndarray  # (n,), -1 when withheld
    domain: int
    scene: np.ndarray | None = None  # generator-side scene types, not serialized

    def __len__(self):
        return len(self.labels)

    def record(self, i: int) -> VideoRecord:
        return VideoRecord(self.features[i], self.masks[i], int(self.labels[i]), self.domain)

    def withhold_labels(self) -> tuple["Split", np.ndarray]:
        hidden = Split(self.features, self.masks, np.full_like(self.labels, -1), self.domain)
        return hidden, self.labels.copy()


def stream(seed: int, domain: int, index: int) -> np.random.Generator:
    """Counter-based generator for one video; (domain, index) = (2, 0) holds global structure."""
    return np.random.Generator(np.random.Philox(key=(seed << 64) | (domain << 32) | index))


def latent_basis(spec: BenchSpec) -> dict[str, np.ndarray]:
    rng = stream(spec.seed, 2, 0)
    q, r = np.linalg.qr(rng.standard_normal((spec.D, spec.D)))
    q = q * np.sign(np.diag(r))
    n = spec.n_cls
    basis = {
        "u": q[:, 0:n].T,
        "v": q[:, n:2 * n].T,
        "tool": q[:, 2 * n:3 * n].T,
        "scene": q[:, 3 * n:4 * n].T,
    }
    s = spec.scene_appearance_shift
    basis["scene_target"] = basis["scene"]
    if s > 0:
        basis["scene_target"] = math.sqrt(1 - s * s) * basis["scene"] + s * q[:, 4 * n:5 * n].T
    return basis


def angular_steps(spec: BenchSpec) -> np.ndarray:
    return 1 + np.arange(spec.n_cls) % (spec.M - 1)


def scene_map(spec: BenchSpec, domain: int) -> np.ndarray:
    """Scene type tied to each action: identity in the source, a cyclic derangement in the target."""
    c = np.arange(spec.n_cls)
    return c if domain == 0 else (c + 1) % spec.n_cls


def human_signal(spec: BenchSpec, basis: dict[str, np.ndarray], label: int) -> np.ndarray:
    """(M, D) noiseless human feature per clip for one class."""
    t = np.arange(spec.M)
    ang = 2 * np.pi * angular_steps(spec)[label] * t / spec.M
    return spec.human_amplitude * (np.cos(ang)[:, None] * basis["u"][label] + np.sin(ang)[:, None] * basis["v"][label])


def generate_video(spec: BenchSpec, basis: dict[str, np.ndarray], domain: int, index: int):
    rng = stream(spec.seed, domain, index)
    label = int(rng.integers(spec.n_cls))
    rho = spec.rho_source if domain == 0 else spec.rho_target
    if rng.random() < rho:
        scene = int(scene_map(spec, domain)[label])
    else:
        scene = int(rng.integers(spec.n_cls))
    rh, rw = spec.human_region
    top = int(rng.integers(spec.H - rh + 1))
    left = int(rng.integers(spec.W - rw + 1))
    mask = np.zeros((spec.H, spec.W))
    mask[top:top + rh, left:left + rw] = 1.0
    f = spec.shared_context_fraction
    scenes = basis["scene"] if domain == 0 else basis["scene_target"]
    ctx = spec.context_amplitude * (f * basis["tool"][label] + (1 - f) * scenes[scene])
    hum = human_signal(spec, basis, label)
    clips = np.where(mask[None, :, :, None] > 0, hum[:, None, None, :], ctx[None, None, None, :])
    clips = clips + spec.sigma * rng.standard_normal(clips.shape)
    masks = np.broadcast_to(mask, (spec.M, spec.H, spec.W)).copy()
    return clips, masks, label, scene


def generate_split(spec: BenchSpec, domain: int) -> Split:
    basis = latent_basis(spec)
    n = spec.n_source if domain == 0 else spec.n_target
    feats = np.empty((n, spec.M, spec.H, spec.W, spec.D))
    masks = np.empty((n, spec.M, spec.H, spec.W))
    labels = np.empty(n, dtype=np.int64)
    scenes = np.empty(n, dtype=np.int64)
    for i in range(n):
        feats[i], masks[i], labels[i], scenes[i] = generate_video(spec, basis, domain, i)
    return Split(feats, masks, labels, domain, scenes)


def generate_dataset(spec: BenchSpec) -> tuple[Split, Split, np.ndarray]:
    """Labeled source split, label-free target split, and the withheld target labels."""
    spec.validate()
    source = generate_split(spec, 0)
    target, target_labels = generate_split(spec, 1).withhold_labels()
    return source, target, target_labels


# --- file format ---------------------------------------------------------------


def write_split(path: str | Path, split: Split, n_cls: int) -> None:
    n, M, H, W, D = split.features.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, n_cls, M, H, W, D, n, split.domain))
        for i in range(n):
            fh.write(struct.pack("<i", int(split.labels[i])))
            fh.write(np.ascontiguousarray(split.features[i], dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(split.masks[i], dtype="<f8").tobytes())


def read_split(path: str | Path) -> tuple[Split, int]:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise ValueError(f"{path}: truncated header")
    magic, version, n_cls, M, H, W, D, n, domain = _HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise ValueError(f"{path}: not a benchmark file")
    if version != VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    nf, nm = M * H * W * D, M * H * W
    rec = 4 + 8 * (nf + nm)
    if len(raw) != _HEADER.size + n * rec:
        raise ValueError(f"{path}: expected {n} records, file size disagrees")
    feats = np.empty((n, M, H, W, D))
    masks = np.empty((n, M, H, W))
    labels = np.empty(n, dtype=np.int64)
    off = _HEADER.size
    for i in range(n):
        labels[i] = struct.unpack_from("<i", raw, off)[0]
        feats[i] = np.frombuffer(raw, "<f8", nf, off + 4).reshape(M, H, W, D)
        masks[i] = np.frombuffer(raw, "<f8", nm, off + 4 + 8 * nf).reshape(M, H, W)
        off += rec
    return Split(feats, masks, labels, domain), n_cls


def write_dataset(out_dir: str | Path, spec: BenchSpec) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    source, target, target_labels = generate_dataset(spec)
    paths = {
        "source": out / "source.bin",
        "target": out / "target.bin",
        "eval_labels": out / "target_labels.eval.json",
        "spec": out / "bench.json",
    }
    write_split(paths["source"], source, spec.n_cls)
    write_split(paths["target"], target, spec.n_cls)
    paths["eval_labels"].write_text(json.dumps({"domain": "target", "labels": target_labels.tolist()}))
    paths["spec"].write_text(json.dumps(asdict(spec), indent=2))
    return paths


def load_training_data(data_dir: str | Path) -> tuple[Split, Split, BenchSpec]:
    """Source and target splits for training; never touches the evaluation label file."""
    d = Path(data_dir)
    spec = BenchSpec(**json.loads((d / "bench.json").read_text()))
    source, _ = read_split(d / "source.bin")
    target, _ = read_split(d / "target.bin")
    if np.any(target.labels >= 0):
        raise ValueError("target split carries labels; refusing to train on it")
    return source, target, spec


def load_eval_labels(data_dir: str | Path) -> np.ndarray:
    """Evaluation-only loader for the withheld target labels."""
    doc = json.loads((Path(data_dir) / "target_labels.eval.json").read_text())
    return np.asarray(doc["labels"], dtype=np.int64)


def dataset_hash(data_dir: str | Path) -> str:
    h = hashlib.sha256()
    for name in ("bench.json", "source.bin", "target.bin"):
        h.update((Path(data_dir) / name).read_bytes())
    return h.hexdigest()
