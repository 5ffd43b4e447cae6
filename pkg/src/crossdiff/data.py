"""Dataset ingestion, synthetic slender-crack generation, mask encoding,
and checkpoint persistence.

Dataset layout on disk: ``<root>/<tag>/images/*.png|jpg`` paired with
``<root>/<tag>/masks/*.png`` by file stem. Masks are binarized at 128/255.
Images live in [-1, 1]; the diffusion-resolution mask is the
nearest-neighbor downsample of the full mask re-encoded to {-1, +1}.

Checkpoints are single files: magic, format version, a JSON header
(config, schedule, step, array index with CRCs), then named raw
little-endian float32 arrays.
"""

from __future__ import annotations

import io
import json
import warnings
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from . import kernels
from .errors import DataError
from .model import CrossDiffModel, ModelConfig, build_model
from .schedule import encode_mask

_MAGIC = b"XDIFCKPT"
_FORMAT_VERSION = 1

IMAGE_EXTS = (".png", ".jpg", ".jpeg", ".bmp")


@dataclass
class SegmentationSample:
    """One training/eval sample. image: (3, S, S) in [-1, 1];
    mask_full: (1, S, S) in {0, 1}; mask_diff: (1, s, s) in {-1, +1}."""

    image: np.ndarray
    mask_diff: np.ndarray
    mask_full: np.ndarray
    dataset_tag: str
    id: str

    def validate(self) -> None:
        if not np.all(np.isfinite(self.image)):
            raise DataError(f"{self.id}: non-finite image values")
        full = self.mask_full
        if not np.isin(full, (0.0, 1.0)).all():
            raise DataError(f"{self.id}: mask_full values outside {{0,1}}")
        expect = encode_mask(nn_downsample(full[0], self.mask_diff.shape[-1]))
        if not np.array_equal(self.mask_diff[0], expect):
            raise DataError(f"{self.id}: mask_diff is not the NN downsample of mask_full")


def nn_downsample(mask: np.ndarray, out_side: int) -> np.ndarray:
    """Nearest-neighbor resample of a 2-D array to out_side^2 (cell-center
    sampling, exact for integer ratios)."""
    h, w = mask.shape
    yi = np.floor((np.arange(out_side) + 0.5) * h / out_side).astype(int)
    xi = np.floor((np.arange(out_side) + 0.5) * w / out_side).astype(int)
    return mask[np.ix_(yi, xi)]


def make_sample(image01: np.ndarray, mask01: np.ndarray, diff_side: int,
                tag: str, sample_id: str) -> SegmentationSample:
    """Assemble a SegmentationSample from an RGB image in [0,1] (H,W,3)
    and a {0,1} mask (H,W)."""
    img = (image01.astype(np.float32) * 2.0 - 1.0).transpose(2, 0, 1)
    full = mask01.astype(np.float32)[None]
    diff = encode_mask(nn_downsample(full[0], diff_side))[None]
    return SegmentationSample(np.ascontiguousarray(img), diff, full, tag, sample_id)


# -- synthetic slender cracks ---------------------------------------------------


def _chaikin(pts: np.ndarray, rounds: int = 2) -> np.ndarray:
    for _ in range(rounds):
        out = [pts[0]]
        for a, b in zip(pts[:-1], pts[1:]):
            out.append(0.75 * a + 0.25 * b)
            out.append(0.25 * a + 0.75 * b)
        out.append(pts[-1])
        pts = np.asarray(out)
    return pts


def _random_polyline(side: int, rng: np.random.Generator) -> np.ndarray:
    margin = max(2.0, side * 0.05)
    n_ctrl = int(rng.integers(4, 7))
    pts = [rng.uniform(margin, side - margin, size=2)]
    ang = rng.uniform(0.0, 2.0 * np.pi)
    step = rng.uniform(0.7, 1.2) * side / (n_ctrl - 1)
    for _ in range(n_ctrl - 1):
        ang += rng.uniform(-0.7, 0.7)
        pts.append(pts[-1] + step * np.array([np.sin(ang), np.cos(ang)]))
    pts = np.clip(_chaikin(np.asarray(pts)), 1.0, side - 2.0)
    # densify to ~1/3 px spacing for gap-free stamping
    dense = [pts[0]]
    for a, b in zip(pts[:-1], pts[1:]):
        seg = np.linalg.norm(b - a)
        for k in range(1, max(int(seg * 3), 1) + 1):
            dense.append(a + (b - a) * k / max(int(seg * 3), 1))
    return np.asarray(dense)


def synth_crack(side: int, n_cracks: int, width_px: tuple[float, float],
                rng: np.random.Generator, diff_side: int | None = None,
                tag: str = "synthetic", sample_id: str | None = None,
                max_retries: int = 20) -> SegmentationSample:
    """Generate one synthetic sample: low-frequency textured background,
    ``n_cracks`` random smooth dark polylines of the requested width
    rasterized into the mask."""
    if side < 32:
        raise ValueError("side must be >= 32")
    if diff_side is None:
        diff_side = side // 2
    lo, hi = width_px
    if lo > hi or lo < 1:
        raise ValueError(f"invalid width range {width_px}")

    coarse = rng.standard_normal((side // 8, side // 8, 1))
    base = _area_resize2d(coarse[:, :, 0], side, side)
    tex = 0.62 + 0.06 * base + 0.02 * rng.standard_normal((side, side))

    mask = np.zeros((side, side), dtype=np.bool_)
    for _ in range(n_cracks):
        placed = False
        for _ in range(max_retries):
            poly = _random_polyline(side, rng)
            span = poly.max(axis=0) - poly.min(axis=0)
            if np.hypot(*span) < 0.25 * side:
                continue
            w = rng.uniform(lo, hi)
            kernels.stamp_disks(mask, poly[:, 0].copy(), poly[:, 1].copy(), w / 2.0)
            placed = True
            break
        if not placed:
            raise DataError("degenerate crack geometry: retries exhausted")

    img = tex.copy()
    dark = rng.uniform(0.3, 0.45) + 0.05 * rng.standard_normal((side, side))
    img[mask] = img[mask] * dark[mask]
    img = np.clip(img, 0.0, 1.0)
    rgb = np.stack([np.clip(img + 0.01 * rng.standard_normal((side, side)), 0, 1)
                    for _ in range(3)], axis=-1)
    sid = sample_id if sample_id is not None else f"synth_{rng.integers(1 << 31)}"
    return make_sample(rgb, mask.astype(np.float32), diff_side, tag, sid)


def _area_resize2d(x: np.ndarray, oh: int, ow: int) -> np.ndarray:
    from .autograd import _overlap_matrix

    rh = _overlap_matrix(x.shape[0], oh, np.float64)
    rw = _overlap_matrix(x.shape[1], ow, np.float64)
    return rh @ x @ rw.T


def synth_dataset(out_dir, n: int, side: int, seed: int, n_cracks=(1, 3),
                  width_px=(1.0, 3.0), tag: str = "synthetic") -> list[str]:
    """Write n synthetic samples to disk in the standard dataset layout.
    Returns the sample ids."""
    root = Path(out_dir) / tag
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0xC4ACC]))
    ids = []
    for i in range(n):
        k = int(rng.integers(n_cracks[0], n_cracks[1] + 1))
        s = synth_crack(side, k, width_px, rng, tag=tag, sample_id=f"{i:04d}")
        img01 = ((s.image.transpose(1, 2, 0) + 1.0) / 2.0 * 255.0).round().astype(np.uint8)
        Image.fromarray(img01).save(root / "images" / f"{s.id}.png")
        Image.fromarray((s.mask_full[0] * 255).astype(np.uint8)).save(
            root / "masks" / f"{s.id}.png")
        ids.append(s.id)
    return ids


# -- on-disk dataset loading -----------------------------------------------------


def _load_image(path: Path, side: int) -> np.ndarray:
    img = Image.open(path).convert("RGB")
    if img.size != (side, side):
        warnings.warn(f"resizing {path.name} from {img.size} to {side}x{side}")
        img = img.resize((side, side), Image.BILINEAR)
    return np.asarray(img, dtype=np.float32) / 255.0


def _load_mask(path: Path, side: int) -> np.ndarray:
    img = Image.open(path).convert("L")
    if img.size != (side, side):
        warnings.warn(f"resizing mask {path.name} from {img.size} to {side}x{side}")
        img = img.resize((side, side), Image.NEAREST)
    arr = np.asarray(img)
    return (arr >= 128).astype(np.float32)


def load_dataset(root, image_side: int, diff_side: int,
                 tags: list[str] | None = None) -> list[SegmentationSample]:
    """Load every image/mask pair under root. Root may itself be a tag
    directory (images/ + masks/) or contain one subdirectory per tag."""
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset root {root} is not a directory")
    if (root / "images").is_dir():
        tag_dirs = [root]
    else:
        tag_dirs = sorted(d for d in root.iterdir() if (d / "images").is_dir())
    if tags is not None:
        tag_dirs = [d for d in tag_dirs if d.name in tags]
    if not tag_dirs:
        raise DataError(f"no dataset directories with images/ found under {root}")

    samples = []
    for d in tag_dirs:
        img_dir, mask_dir = d / "images", d / "masks"
        if not mask_dir.is_dir():
            raise DataError(f"{d} has images/ but no masks/")
        img_files = sorted(p for p in img_dir.iterdir()
                           if p.suffix.lower() in IMAGE_EXTS)
        if not img_files:
            raise DataError(f"no images found in {img_dir}")
        for p in img_files:
            candidates = [mask_dir / (p.stem + ext) for ext in (".png", ".jpg", ".bmp")]
            mask_path = next((c for c in candidates if c.exists()), None)
            if mask_path is None:
                raise DataError(f"missing mask for image {d.name}/{p.name}")
            try:
                img01 = _load_image(p, image_side)
                mask01 = _load_mask(mask_path, image_side)
            except (OSError, ValueError) as e:
                raise DataError(f"unreadable file for {d.name}/{p.stem}: {e}") from e
            samples.append(make_sample(img01, mask01, diff_side, d.name,
                                       f"{d.name}/{p.stem}"))
    samples.sort(key=lambda s: s.id)
    return samples


def split_dataset(samples, fractions=(0.8, 0.1, 0.1), seed: int = 0):
    """Seeded shuffle split; returns ({split: samples}, {split: id list})."""
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError("split fractions must sum to 1")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x5B117]))
    order = rng.permutation(len(samples))
    n_train = int(round(fractions[0] * len(samples)))
    n_val = int(round(fractions[1] * len(samples)))
    parts = {
        "train": [samples[i] for i in order[:n_train]],
        "val": [samples[i] for i in order[n_train:n_train + n_val]],
        "test": [samples[i] for i in order[n_train + n_val:]],
    }
    manifests = {k: [s.id for s in v] for k, v in parts.items()}
    return parts, manifests


def write_manifest(ids: list[str], path) -> None:
    Path(path).write_text("".join(i + "\n" for i in ids))


def read_manifest(path) -> list[str]:
    return [line.strip() for line in Path(path).read_text().splitlines() if line.strip()]


# -- checkpoint container ---------------------------------------------------------


@dataclass
class CheckpointBundle:
    """Named float32 arrays (parameters plus optimizer moments), schedule
    metadata, config snapshots, and the step counter."""

    step: int
    config: dict
    schedule_meta: dict
    arrays: dict[str, np.ndarray] = field(default_factory=dict)
    opt_t: int = 0
    version: int = _FORMAT_VERSION


def bundle_from_model(model: CrossDiffModel, train_cfg=None, optimizer=None,
                      step: int = 0) -> CheckpointBundle:
    from dataclasses import asdict

    arrays = {f"params.{name}": np.ascontiguousarray(p.data.astype("<f4"))
              for name, p in model.named_parameters()}
    opt_t = 0
    if optimizer is not None:
        for k, v in optimizer.state_arrays().items():
            arrays[k] = np.ascontiguousarray(v.astype("<f4"))
        opt_t = optimizer.t
    config = {
        "model": model.config.to_dict(),
        "train": asdict(train_cfg) if train_cfg is not None else {},
        "init_seed": model.init_seed,
    }
    return CheckpointBundle(step=int(step), config=config,
                            schedule_meta=model.schedule.meta(), arrays=arrays,
                            opt_t=opt_t)


def model_from_bundle(bundle: CheckpointBundle, inference_only: bool = False) -> CrossDiffModel:
    cfg = ModelConfig.from_dict(bundle.config["model"])
    model = build_model(cfg, seed=bundle.config.get("init_seed", 0))
    own = dict(model.named_parameters())
    dtype = cfg.np_dtype()
    for key, arr in bundle.arrays.items():
        if not key.startswith("params."):
            continue
        name = key[len("params."):]
        if inference_only and name.startswith("cross_decoder."):
            continue
        if name not in own:
            raise DataError(f"checkpoint parameter {name} not present in model")
        p = own[name]
        if p.data.shape != arr.shape:
            raise DataError(f"checkpoint/preset mismatch for {name}: "
                            f"{arr.shape} vs {p.data.shape}")
        p.data = np.ascontiguousarray(arr, dtype=dtype)
    return model


def save_checkpoint(bundle: CheckpointBundle, path) -> None:
    index = []
    offset = 0
    payloads = []
    for name in sorted(bundle.arrays):
        arr = np.ascontiguousarray(bundle.arrays[name].astype("<f4"))
        raw = arr.tobytes()
        index.append({
            "name": name,
            "shape": list(arr.shape),
            "dtype": "<f4",
            "offset": offset,
            "nbytes": len(raw),
            "crc32": zlib.crc32(raw),
        })
        payloads.append(raw)
        offset += len(raw)
    header = {
        "format_version": bundle.version,
        "step": bundle.step,
        "opt_t": bundle.opt_t,
        "config": bundle.config,
        "schedule": bundle.schedule_meta,
        "arrays": index,
    }
    hraw = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    buf = io.BytesIO()
    buf.write(_MAGIC)
    buf.write(np.uint32(bundle.version).tobytes())
    buf.write(np.uint32(len(hraw)).tobytes())
    buf.write(hraw)
    for raw in payloads:
        buf.write(raw)
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path, inference_only: bool = False) -> CheckpointBundle:
    try:
        raw = Path(path).read_bytes()
    except OSError as e:
        raise DataError(f"cannot read checkpoint {path}: {e}") from e
    if len(raw) < len(_MAGIC) + 8 or raw[:len(_MAGIC)] != _MAGIC:
        raise DataError(f"{path}: not a checkpoint file (bad magic)")
    pos = len(_MAGIC)
    version = int(np.frombuffer(raw, "<u4", 1, pos)[0])
    if version != _FORMAT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    hlen = int(np.frombuffer(raw, "<u4", 1, pos + 4)[0])
    pos += 8
    header = json.loads(raw[pos:pos + hlen].decode())
    pos += hlen
    arrays = {}
    for meta in header["arrays"]:
        name = meta["name"]
        if inference_only and (name.startswith("params.cross_decoder.")
                               or name.startswith("opt.")):
            continue
        start = pos + meta["offset"]
        chunk = raw[start:start + meta["nbytes"]]
        if len(chunk) != meta["nbytes"]:
            raise DataError(f"{path}: truncated payload for {name}")
        if zlib.crc32(chunk) != meta["crc32"]:
            raise DataError(f"{path}: checksum failure for array {name}")
        arrays[name] = np.frombuffer(chunk, "<f4").reshape(meta["shape"]).copy()
    return CheckpointBundle(step=header["step"], config=header["config"],
                            schedule_meta=header["schedule"], arrays=arrays,
                            opt_t=header.get("opt_t", 0), version=version)
