"""Class-per-directory speech datasets: loading, seeded splitting and poisoning.

Items are lightweight references (path, label, split, optional trigger); the
audio itself is decoded, up-sampled and stamped on demand so a dataset value
stays cheap to copy.  Shuffling uses numpy's PCG64 generator seeded with the
64-bit ``shuffle_seed`` over the lexicographically sorted file list, so the
order depends only on the file names and the seed.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field, replace
from functools import lru_cache
from pathlib import Path

import numpy as np

from .audio import AudioClip, normalize_peak, read_wav, resample
from .errors import AudioFormatError, DatasetError, PoisonConfigError
from .features import FeatureCache, MfccConfig, mfcc
from .trigger import TriggerSpec, stamp

log = logging.getLogger(__name__)

TRAIN, VAL, TEST = "train", "val", "test"
SPLITS = (TRAIN, VAL, TEST)
TRAINVAL_FRACTION = 0.8
TRAIN_FRACTION = 0.8

MANIFEST_COLUMNS = (
    "original_path",
    "original_label",
    "new_label",
    "trigger_duration_ms",
    "placement",
    "continuity",
)


@dataclass(frozen=True)
class Item:
    path: str
    label: int
    split: str
    original_label: int
    trigger: TriggerSpec | None = None


@dataclass(frozen=True)
class LabeledDataset:
    items: tuple[Item, ...]
    classes: tuple[str, ...]
    sample_rate: int = 44_100
    clip_samples: int = 44_100
    shuffle_seed: int = 0
    normalize: bool = False
    skipped: tuple[str, ...] = field(default=(), compare=False)

    def __post_init__(self):
        for it in self.items:
            if not 0 <= it.label < len(self.classes):
                raise DatasetError(f"label {it.label} outside the {len(self.classes)}-class vocabulary")
            if it.split not in SPLITS:
                raise DatasetError(f"unknown split {it.split!r}")

    def __len__(self) -> int:
        return len(self.items)

    def indices(self, split: str) -> list[int]:
        return [i for i, it in enumerate(self.items) if it.split == split]

    def labels(self, split: str | None = None) -> np.ndarray:
        idx = range(len(self.items)) if split is None else self.indices(split)
        return np.array([self.items[i].label for i in idx], dtype=np.int64)

    def class_index(self, name: str) -> int:
        try:
            return self.classes.index(name)
        except ValueError:
            raise PoisonConfigError(f"class {name!r} not in {list(self.classes)}") from None

    def clean_clip(self, i: int) -> AudioClip:
        return AudioClip(
            _decoded(self.items[i].path, self.sample_rate, self.clip_samples, self.normalize),
            self.sample_rate,
        )

    def clip(self, i: int) -> AudioClip:
        clip = self.clean_clip(i)
        trig = self.items[i].trigger
        return clip if trig is None else stamp(clip, trig)


@lru_cache(maxsize=4096)
def _decoded(path: str, rate: int, n_samples: int, normalize: bool) -> np.ndarray:
    clip = read_wav(path)
    if normalize:
        clip = normalize_peak(clip)
    clip = resample(clip, rate)
    out = clip.samples[:n_samples]
    if out.shape[0] < n_samples:
        out = np.pad(out, (0, n_samples - out.shape[0]))
    out = np.array(out)
    out.setflags(write=False)
    return out


def split_sizes(n: int) -> tuple[int, int, int]:
    """(train, val, test) counts for the 80/20 then 80/20 scheme."""
    n_trainval = int(round(TRAINVAL_FRACTION * n))
    n_train = int(round(TRAIN_FRACTION * n_trainval))
    return n_train, n_trainval - n_train, n - n_trainval


def load_dataset(
    root: str | Path,
    min_duration_s: float = 1.0,
    seed: int = 0,
    *,
    sample_rate: int = 44_100,
    clip_seconds: float | None = None,
    normalize: bool = False,
) -> LabeledDataset:
    """Scan ``root/<class>/*.wav``, drop short files, shuffle and split.

    Clips are cropped or zero-padded to ``clip_seconds`` (default:
    ``min_duration_s``, or 1 s when that is zero) so every item yields the
    same feature shape.  Unreadable files are skipped and listed in
    ``dataset.skipped``.
    """
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"{root} is not a directory")
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not class_dirs:
        raise DatasetError(f"{root} has no class subdirectories")
    classes = tuple(p.name for p in class_dirs)

    entries: list[tuple[str, int]] = []
    skipped: list[str] = []
    for label, cdir in enumerate(class_dirs):
        files = sorted(cdir.glob("*.wav"))
        if not files:
            raise DatasetError(f"class directory {cdir} contains no WAV files")
        for f in files:
            try:
                dur = read_wav(f).duration_seconds
            except AudioFormatError as exc:
                log.warning("skipping %s: %s", f, exc)
                skipped.append(str(f))
                continue
            if dur + 1e-9 < min_duration_s:
                continue
            entries.append((str(f), label))
    if not entries:
        raise DatasetError(f"no usable clips under {root}")

    entries.sort(key=lambda e: e[0])
    order = np.random.Generator(np.random.PCG64(seed)).permutation(len(entries))
    n_train, n_val, _ = split_sizes(len(entries))
    items = []
    for pos, k in enumerate(order):
        path, label = entries[k]
        split = TRAIN if pos < n_train else VAL if pos < n_train + n_val else TEST
        items.append(Item(path, label, split, label))

    seconds = clip_seconds if clip_seconds is not None else (min_duration_s or 1.0)
    return LabeledDataset(
        items=tuple(items),
        classes=classes,
        sample_rate=sample_rate,
        clip_samples=int(round(seconds * sample_rate)),
        shuffle_seed=seed,
        normalize=normalize,
        skipped=tuple(skipped),
    )


@dataclass(frozen=True)
class PoisonConfig:
    n_poison: int
    target_class: str
    trigger: TriggerSpec = field(default_factory=TriggerSpec)


def poison_rate(ds: LabeledDataset, n_poison: int) -> float:
    n_train = len(ds.indices(TRAIN))
    return n_poison / n_train if n_train else 0.0


def poison(ds: LabeledDataset, cfg: PoisonConfig) -> LabeledDataset:
    """Stamp the first ``n_poison`` training items and relabel them as the target.

    Items that already carry the target label are stamped and counted too.
    """
    target = ds.class_index(cfg.target_class)
    train_idx = ds.indices(TRAIN)
    if not 0 <= cfg.n_poison <= len(train_idx):
        raise PoisonConfigError(
            f"n_poison={cfg.n_poison} but the train split holds {len(train_idx)} items"
        )
    items = list(ds.items)
    for i in train_idx[:cfg.n_poison]:
        items[i] = replace(items[i], label=target, trigger=cfg.trigger)
    return replace(ds, items=tuple(items))


def stamp_test_set(ds: LabeledDataset, trigger: TriggerSpec) -> LabeledDataset:
    """Stamp every test item, keeping the true labels; other splits are untouched."""
    items = tuple(replace(it, trigger=trigger) if it.split == TEST else it for it in ds.items)
    return replace(ds, items=items)


def manifest_rows(ds: LabeledDataset) -> list[dict]:
    rows = []
    for it in ds.items:
        if it.trigger is None or it.split != TRAIN:
            continue
        rows.append({
            "original_path": it.path,
            "original_label": ds.classes[it.original_label],
            "new_label": ds.classes[it.label],
            "trigger_duration_ms": f"{it.trigger.duration_ms:g}",
            "placement": it.trigger.placement_label,
            "continuity": it.trigger.continuity_label,
        })
    return rows


def write_manifest(ds: LabeledDataset, path: str | Path) -> int:
    rows = manifest_rows(ds)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=MANIFEST_COLUMNS, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    return len(rows)


class FeatureExtractor:
    """MFCCs for dataset items.

    Clean items are memoised in memory and, when ``cache_dir`` is given, on
    disk.  Stamped items are recomputed since they are cheap and few.
    """

    def __init__(self, cfg: MfccConfig | None = None, cache_dir: str | Path | None = None):
        self.cfg = cfg or MfccConfig()
        self.disk = FeatureCache(cache_dir) if cache_dir is not None else None
        self._memory: dict[tuple, np.ndarray] = {}

    def clean(self, ds: LabeledDataset, i: int) -> np.ndarray:
        it = ds.items[i]
        key = (it.path, ds.sample_rate, ds.clip_samples, ds.normalize)
        frames = self._memory.get(key)
        if frames is None:
            fm = self.disk.get(it.path, ds.sample_rate, self.cfg) if self.disk else None
            if fm is None or ds.normalize or ds.clip_samples != ds.sample_rate:
                fm = mfcc(ds.clean_clip(i), self.cfg)
                if self.disk and not ds.normalize and ds.clip_samples == ds.sample_rate:
                    self.disk.put(it.path, ds.sample_rate, self.cfg, fm)
            frames = np.asarray(fm.frames, dtype=np.float32)
            self._memory[key] = frames
        return frames

    def item(self, ds: LabeledDataset, i: int) -> np.ndarray:
        if ds.items[i].trigger is None:
            return self.clean(ds, i)
        return mfcc(ds.clip(i), self.cfg).frames.astype(np.float32)

    def split(self, ds: LabeledDataset, split: str | None = None, transform=None):
        """Stacked features and labels for one split (or all items).

        ``transform`` maps an AudioClip to an AudioClip before extraction,
        e.g. a low-pass defense; it bypasses the clean-feature cache.
        """
        idx = range(len(ds)) if split is None else ds.indices(split)
        if transform is None:
            feats = [self.item(ds, i) for i in idx]
        else:
            feats = [mfcc(transform(ds.clip(i)), self.cfg).frames.astype(np.float32) for i in idx]
        labels = np.array([ds.items[i].label for i in idx], dtype=np.int64)
        if not feats:
            return np.zeros((0, self.cfg.n_frames(ds.clip_samples), self.cfg.n_coeffs), dtype=np.float32), labels
        return np.stack(feats), labels


# ---------------------------------------------------------------- index files

INDEX_NAME = "dataset.json"


def trigger_to_dict(spec: TriggerSpec) -> dict:
    d = {f: getattr(spec, f) for f in TriggerSpec.__dataclass_fields__}
    d["placement"] = spec.placement.value
    return d


def save_dataset_index(ds: LabeledDataset, path: str | Path) -> None:
    """Write the dataset description (paths, labels, splits, triggers) as JSON."""
    doc = {
        "classes": list(ds.classes),
        "sample_rate": ds.sample_rate,
        "clip_samples": ds.clip_samples,
        "shuffle_seed": ds.shuffle_seed,
        "normalize": ds.normalize,
        "items": [
            {
                "path": it.path,
                "label": it.label,
                "split": it.split,
                "original_label": it.original_label,
                "trigger": None if it.trigger is None else trigger_to_dict(it.trigger),
            }
            for it in ds.items
        ],
    }
    Path(path).write_text(json.dumps(doc, indent=1))


def load_dataset_index(path: str | Path) -> LabeledDataset:
    path = Path(path)
    if path.is_dir():
        path = path / INDEX_NAME
    try:
        doc = json.loads(path.read_text())
        items = tuple(
            Item(
                e["path"],
                int(e["label"]),
                e["split"],
                int(e["original_label"]),
                None if e["trigger"] is None else TriggerSpec(**e["trigger"]),
            )
            for e in doc["items"]
        )
        return LabeledDataset(
            items=items,
            classes=tuple(doc["classes"]),
            sample_rate=int(doc["sample_rate"]),
            clip_samples=int(doc["clip_samples"]),
            shuffle_seed=int(doc["shuffle_seed"]),
            normalize=bool(doc["normalize"]),
        )
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise DatasetError(f"cannot read dataset index {path}: {exc}") from exc


def open_dataset(path: str | Path, seed: int = 0, min_duration_s: float = 1.0, **kwargs) -> LabeledDataset:
    """A dataset index file/directory if one exists, otherwise a class-per-directory root."""
    path = Path(path)
    if path.is_file() or (path / INDEX_NAME).is_file():
        return load_dataset_index(path)
    return load_dataset(path, min_duration_s, seed, **kwargs)
