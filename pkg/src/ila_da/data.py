"""Digit datasets: file formats, preprocessing, fetching and batch sampling."""
from __future__ import annotations

import bz2
import gzip
import hashlib
import json
import logging
import os
import shutil
import struct
import urllib.request
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Iterator, Optional, Union

import numpy as np
import torch
import torch.nn.functional as F

log = logging.getLogger(__name__)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
DATASETS = ("mnist", "usps", "svhn")
# derived domain for quick runs on MNIST alone: intensity-inverted digits
DERIVED = {"mnist-inverted": "mnist"}
# 8x8 UCI optical digits bundled with scikit-learn; usable offline as a custom target
BUNDLED = ("optdigits",)
DATA_ROOT_ENV = "ILA_DA_DATA"


def default_data_root() -> Path:
    return Path(os.environ.get(DATA_ROOT_ENV, Path.home() / ".cache" / "ila-da"))


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------

class DatasetNotFoundError(FileNotFoundError):
    pass


@dataclass
class DigitDataset:
    images: torch.Tensor  # (N, C, H, W) float
    labels: Optional[torch.Tensor]  # (N,) long
    name: str
    split: str

    def __len__(self) -> int:
        return self.images.shape[0]

    def unlabeled(self) -> "UnlabeledDigits":
        return UnlabeledDigits(images=self.images, name=self.name, split=self.split)

    def subset(self, indices) -> "DigitDataset":
        idx = torch.as_tensor(indices, dtype=torch.long)
        labels = self.labels[idx] if self.labels is not None else None
        return DigitDataset(self.images[idx], labels, self.name, self.split)


@dataclass
class UnlabeledDigits:
    """Image-only view used as the training-time target domain."""

    images: torch.Tensor
    name: str
    split: str

    def __len__(self) -> int:
        return self.images.shape[0]


# ---------------------------------------------------------------------------
# IDX container
# ---------------------------------------------------------------------------

def _open_maybe_gzip(path: Path):
    with open(path, "rb") as fh:
        head = fh.read(2)
    return gzip.open(path, "rb") if head == b"\x1f\x8b" else open(path, "rb")


def load_idx(path: Union[str, Path]) -> np.ndarray:
    """Parse an IDX file (optionally gzipped).

    Image files (magic 0x803) come back as float32 scaled to [0, 1]; label
    files (magic 0x801) as int64.
    """
    path = Path(path)
    with _open_maybe_gzip(path) as fh:
        data = fh.read()
    if len(data) < 8:
        raise ValueError(f"{path}: truncated IDX header")
    magic = struct.unpack(">I", data[:4])[0]
    if magic == IDX_IMAGES_MAGIC:
        ndim = 3
    elif magic == IDX_LABELS_MAGIC:
        ndim = 1
    else:
        raise ValueError(f"{path}: bad IDX magic 0x{magic:08X}")
    header = 4 + 4 * ndim
    if len(data) < header:
        raise ValueError(f"{path}: truncated IDX header")
    shape = struct.unpack(f">{ndim}I", data[4:header])
    expected = int(np.prod(shape))
    payload = np.frombuffer(data, dtype=np.uint8, offset=header)
    if payload.size != expected:
        raise ValueError(f"{path}: truncated IDX payload ({payload.size} of {expected} bytes)")
    arr = payload.reshape(shape)
    if magic == IDX_IMAGES_MAGIC:
        return arr.astype(np.float32) / 255.0
    return arr.astype(np.int64)


def write_idx(path: Union[str, Path], array: np.ndarray) -> None:
    """Write uint8 images (N, H, W) or labels (N,) as an IDX file."""
    array = np.asarray(array)
    if array.ndim == 3:
        magic = IDX_IMAGES_MAGIC
    elif array.ndim == 1:
        magic = IDX_LABELS_MAGIC
    else:
        raise ValueError("IDX writer supports 1-d labels or 3-d images")
    if array.min(initial=0) < 0 or array.max(initial=0) > 255:
        raise ValueError("IDX payload must fit in unsigned bytes")
    with open(path, "wb") as fh:
        fh.write(struct.pack(">I", magic))
        fh.write(struct.pack(f">{array.ndim}I", *array.shape))
        fh.write(array.astype(np.uint8).tobytes())


# ---------------------------------------------------------------------------
# delimited text digits (one sample per line: label then side*side values)
# ---------------------------------------------------------------------------

def load_delimited_digits(path: Union[str, Path], side: int, value_range=(-1.0, 1.0),
                          name: str = "usps", split: str = "train") -> DigitDataset:
    """Read ``label v_1 ... v_{side^2}`` lines; values are mapped from
    ``value_range`` onto [0, 1]."""
    path = Path(path)
    labels, rows = [], []
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rt") as fh:
        for lineno, line in enumerate(fh, start=1):
            fields = line.split()
            if not fields:
                continue
            if len(fields) != side * side + 1:
                raise ValueError(f"{path}:{lineno}: expected {side * side + 1} fields, got {len(fields)}")
            labels.append(int(float(fields[0])))
            rows.append(np.asarray(fields[1:], dtype=np.float32))
    if not rows:
        return DigitDataset(torch.zeros(0, 1, side, side), torch.zeros(0, dtype=torch.long), name, split)
    lo, hi = value_range
    images = (np.stack(rows) - lo) / (hi - lo)
    images = np.clip(images, 0.0, 1.0).reshape(-1, 1, side, side)
    return DigitDataset(torch.from_numpy(images), torch.tensor(labels, dtype=torch.long), name, split)


def libsvm_to_delimited(src: Union[str, Path], dst: Union[str, Path], side: int = 16) -> int:
    """Convert the libsvm USPS distribution (labels 1..10, ``i:v`` pairs) to
    the delimited format with labels 0..9.  Returns the number of samples."""
    src = Path(src)
    opener = bz2.open if src.suffix == ".bz2" else open
    count = 0
    with opener(src, "rt") as fin, open(dst, "w") as fout:
        for lineno, line in enumerate(fin, start=1):
            fields = line.split()
            if not fields:
                continue
            values = ["0"] * (side * side)
            for item in fields[1:]:
                idx, val = item.split(":")
                values[int(idx) - 1] = val
            fout.write(f"{int(float(fields[0])) - 1} {' '.join(values)}\n")
            count += 1
    return count


def load_svhn_mat(path: Union[str, Path], split: str) -> DigitDataset:
    from scipy.io import loadmat

    mat = loadmat(str(path))
    images = np.transpose(mat["X"], (3, 2, 0, 1)).astype(np.float32) / 255.0
    labels = mat["y"].astype(np.int64).reshape(-1)
    labels[labels == 10] = 0
    return DigitDataset(torch.from_numpy(images), torch.from_numpy(labels), "svhn", split)


def load_optdigits(split: str = "train") -> DigitDataset:
    """The 1797-sample 8x8 digit set shipped with scikit-learn (both splits are the whole set)."""
    from sklearn.datasets import load_digits as _sk_digits

    bunch = _sk_digits()
    images = torch.from_numpy(bunch.images.astype(np.float32) / 16.0).unsqueeze(1)
    return DigitDataset(images, torch.from_numpy(bunch.target.astype(np.int64)), "optdigits", split)


# ---------------------------------------------------------------------------
# loading by name
# ---------------------------------------------------------------------------

def load_digits(name: str, split: str, root: Optional[Union[str, Path]] = None) -> DigitDataset:
    """Load a raw (unpreprocessed) digit dataset from the data root."""
    root = Path(root) if root is not None else default_data_root()
    if name in DERIVED:
        base = load_digits(DERIVED[name], split, root)
        return DigitDataset(1.0 - base.images, base.labels, name, split)
    if split not in ("train", "test"):
        raise ValueError(f"unknown split {split!r}")
    if name == "optdigits":
        return load_optdigits(split)
    folder = root / name
    if name == "mnist":
        prefix = "train" if split == "train" else "t10k"
        images = _find(folder, f"{prefix}-images-idx3-ubyte")
        labels = _find(folder, f"{prefix}-labels-idx1-ubyte")
        x = torch.from_numpy(load_idx(images)).unsqueeze(1)
        y = torch.from_numpy(load_idx(labels))
        return DigitDataset(x, y, name, split)
    if name == "usps":
        return load_delimited_digits(_find(folder, f"{split}.txt"), side=16, name=name, split=split)
    if name == "svhn":
        return load_svhn_mat(_find(folder, f"{split}_32x32.mat"), split)
    raise ValueError(f"unknown dataset {name!r}")


def _find(folder: Path, filename: str) -> Path:
    for candidate in (folder / filename, folder / (filename + ".gz")):
        if candidate.is_file():
            return candidate
    raise DatasetNotFoundError(
        f"{folder / filename} not found; run `ila-da fetch --datasets {folder.name}` first")


def dataset_available(name: str, root: Optional[Union[str, Path]] = None) -> bool:
    root = Path(root) if root is not None else default_data_root()
    if name in BUNDLED:
        return True
    name = DERIVED.get(name, name)
    needed = {
        "mnist": ["train-images-idx3-ubyte", "train-labels-idx1-ubyte",
                  "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"],
        "usps": ["train.txt", "test.txt"],
        "svhn": ["train_32x32.mat", "test_32x32.mat"],
    }.get(name)
    if needed is None:
        return False
    return all((root / name / f).is_file() or (root / name / (f + ".gz")).is_file() for f in needed)


# ---------------------------------------------------------------------------
# preprocessing
# ---------------------------------------------------------------------------

def task_geometry(task: str, domains: tuple[str, str] = ("", "")) -> tuple[int, int]:
    """(side, channels) every image is brought to for ``task``."""
    if task in ("m2u", "u2m"):
        return 28, 1
    if task == "s2m":
        return 32, 3
    if task == "custom":
        return (32, 3) if "svhn" in domains else (28, 1)
    raise ValueError(f"unknown task {task!r}")


def preprocess(ds: DigitDataset, task: str, domains: tuple[str, str] = ("", ""),
               chunk: int = 4096) -> DigitDataset:
    """Resize, fix channel count and normalize to mean 0.5 / std 0.5."""
    side, channels = task_geometry(task, domains)
    out = []
    for start in range(0, len(ds), chunk):
        x = ds.images[start:start + chunk].float()
        if x.shape[-1] != side or x.shape[-2] != side:
            x = F.interpolate(x, size=(side, side), mode="bilinear", align_corners=False,
                              antialias=x.shape[-1] > side)
        if x.shape[1] != channels:
            if x.shape[1] == 1:
                x = x.expand(-1, channels, -1, -1)
            elif channels == 1:
                x = x.mean(dim=1, keepdim=True)
            else:
                raise ValueError(f"cannot map {x.shape[1]} channels to {channels}")
        out.append(((x - 0.5) / 0.5).contiguous())
    images = torch.cat(out) if out else torch.zeros(0, channels, side, side)
    return DigitDataset(images, ds.labels, ds.name, ds.split)


# ---------------------------------------------------------------------------
# batch plans
# ---------------------------------------------------------------------------

@dataclass
class BatchPlan:
    batches: list[np.ndarray]
    per_class: Optional[int] = None

    def __len__(self) -> int:
        return len(self.batches)

    def __iter__(self):
        return iter(self.batches)


def _epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(epoch)])


def class_balanced_batches(labels, per_class: int, seed: int, epoch: int = 0,
                           num_classes: Optional[int] = None) -> BatchPlan:
    """One epoch of source batches holding exactly ``per_class`` of every class.

    Each class keeps its own shuffled pool and is drawn without replacement;
    a pool with fewer than ``per_class`` samples left is reshuffled.  An epoch
    has ``len(labels) // (per_class * num_classes)`` batches (at least one).
    """
    labels = np.asarray(labels, dtype=np.int64)
    if num_classes is None:
        num_classes = int(labels.max()) + 1 if labels.size else 0
    pools = [np.flatnonzero(labels == c) for c in range(num_classes)]
    short = [c for c, pool in enumerate(pools) if len(pool) < per_class]
    if short:
        raise ValueError(f"classes {short} have fewer than per_class={per_class} samples")
    rng = _epoch_rng(seed, epoch)
    order = [rng.permutation(pool) for pool in pools]
    cursor = [0] * num_classes
    n_batches = max(1, len(labels) // (per_class * num_classes))
    batches = []
    for _ in range(n_batches):
        parts = []
        for c in range(num_classes):
            if cursor[c] + per_class > len(order[c]):
                order[c] = rng.permutation(pools[c])
                cursor[c] = 0
            parts.append(order[c][cursor[c]:cursor[c] + per_class])
            cursor[c] += per_class
        batch = np.concatenate(parts)
        batches.append(batch[rng.permutation(batch.size)])
    return BatchPlan(batches, per_class)


def random_target_batches(n: int, batch: int, seed: int, epoch: int = 0) -> BatchPlan:
    """Uniformly shuffled batches over ``n`` samples; the ragged tail is dropped."""
    if batch > n:
        raise ValueError(f"batch size {batch} exceeds dataset size {n}")
    perm = _epoch_rng(seed, epoch).permutation(n)
    return BatchPlan([perm[i:i + batch] for i in range(0, n - batch + 1, batch)])


class BatchStream:
    """Endless sequence of batches built epoch by epoch from a plan function.

    ``position`` counts batches handed out so far; a stream rebuilt with the
    same arguments and advanced to the same position continues identically.
    """

    def __init__(self, plan_fn, seed: int):
        self._plan_fn = plan_fn
        self._seed = seed
        self.epoch = 0
        self._index = 0
        self.position = 0
        self._plan = plan_fn(seed, 0)

    def __iter__(self) -> Iterator[np.ndarray]:
        return self

    def __next__(self) -> np.ndarray:
        if self._index >= len(self._plan):
            self.epoch += 1
            self._index = 0
            self._plan = self._plan_fn(self._seed, self.epoch)
        batch = self._plan.batches[self._index]
        self._index += 1
        self.position += 1
        return batch

    def advance(self, count: int) -> None:
        for _ in range(count):
            next(self)


def source_stream(labels, per_class: int, seed: int, num_classes: int) -> BatchStream:
    return BatchStream(lambda s, e: class_balanced_batches(labels, per_class, s, e, num_classes), seed)


def target_stream(n: int, batch: int, seed: int) -> BatchStream:
    return BatchStream(lambda s, e: random_target_batches(n, batch, s, e), seed)


# ---------------------------------------------------------------------------
# fetching with checksum verification
# ---------------------------------------------------------------------------

def load_manifest() -> dict:
    return json.loads(resources.files("ila_da").joinpath("checksums.json").read_text())


def md5sum(path: Union[str, Path], chunk: int = 1 << 20) -> str:
    digest = hashlib.md5()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(chunk), b""):
            digest.update(block)
    return digest.hexdigest()


class ChecksumError(RuntimeError):
    pass


def _install_entry(entry: dict, folder: Path, source_dir: Optional[Path]) -> Path:
    name = entry["name"]
    dest = folder / name
    archive = entry.get("archive")
    if dest.is_file() and md5sum(dest) in (entry.get("md5"), entry.get("raw_md5")):
        return dest

    candidates = []
    if source_dir is not None:
        candidates = [source_dir / n for n in (name, archive) if n] + \
                     [source_dir / folder.name / n for n in (name, archive) if n]
    for cand in candidates:
        if cand.is_file():
            return _verify_and_place(cand, entry, folder)
    if source_dir is not None:
        raise FileNotFoundError(f"{name} not found under {source_dir}")

    errors = []
    download_name = archive or name
    for url in entry["urls"]:
        tmp = folder / (download_name + ".part")
        try:
            log.info("downloading %s", url)
            with urllib.request.urlopen(url, timeout=60) as resp, open(tmp, "wb") as fh:
                shutil.copyfileobj(resp, fh)
        except OSError as exc:
            errors.append(f"{url}: {exc}")
            tmp.unlink(missing_ok=True)
            continue
        final = tmp.with_name(download_name)
        tmp.replace(final)
        return _verify_and_place(final, entry, folder)
    raise ConnectionError(f"could not download {name}: " + "; ".join(errors))


def _verify_and_place(path: Path, entry: dict, folder: Path) -> Path:
    digest = md5sum(path)
    dest = folder / entry["name"]
    if digest == entry.get("md5") and entry.get("archive") and path.name.endswith(".gz"):
        with gzip.open(path, "rb") as fin, open(dest, "wb") as fout:
            shutil.copyfileobj(fin, fout)
        if entry.get("raw_md5") and md5sum(dest) != entry["raw_md5"]:
            dest.unlink()
            raise ChecksumError(f"{dest}: decompressed checksum mismatch")
        return dest
    if digest not in (entry.get("md5"), entry.get("raw_md5")):
        raise ChecksumError(f"{path}: md5 {digest} does not match the manifest")
    if path.resolve() != dest.resolve():
        shutil.copyfile(path, dest)
    return dest


def fetch(datasets=DATASETS, root: Optional[Union[str, Path]] = None,
          source_dir: Optional[Union[str, Path]] = None) -> dict[str, list[Path]]:
    """Download (or copy from ``source_dir``) and verify the listed datasets.

    Every file is checked against the packaged md5 manifest before use.  USPS
    is converted from its libsvm distribution to the delimited text format.
    """
    root = Path(root) if root is not None else default_data_root()
    source_dir = Path(source_dir) if source_dir is not None else None
    manifest = load_manifest()
    installed: dict[str, list[Path]] = {}
    for name in datasets:
        if name not in manifest:
            raise ValueError(f"unknown dataset {name!r}")
        folder = root / name
        folder.mkdir(parents=True, exist_ok=True)
        paths = []
        for entry in manifest[name]:
            path = _install_entry(entry, folder, source_dir)
            if entry.get("convert"):
                converted = folder / entry["convert"]
                libsvm_to_delimited(path, converted)
                path = converted
            paths.append(path)
        installed[name] = paths
    return installed
